use rand::Rng;

use super::{FilterConfig, PfBelief, PfUpdate, StepDiagnostics};
use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{self, Belief, LOG_2PI};
use crate::models::{observation_model_h, Models, Observation};
use crate::nn::Bound;
use crate::tensor::Tensor;

/// Weighted particle set; weights are kept as normalized log-weights.
#[derive(Clone)]
pub struct ParticleBelief<'t> {
    pub particles: Var<'t>,
    pub log_weights: Var<'t>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct PlainParticles {
    pub particles: Tensor,
    pub log_weights: Tensor,
}

impl PlainParticles {
    pub fn on<'t>(&self, tape: &'t Tape) -> ParticleBelief<'t> {
        ParticleBelief {
            particles: tape.constant(self.particles.clone()),
            log_weights: tape.constant(self.log_weights.clone()),
        }
    }

    pub fn weights(&self) -> Vec<f64> {
        self.log_weights.data().iter().map(|w| w.exp()).collect()
    }

    pub fn mean(&self) -> Tensor {
        let w = Tensor::vector(&self.weights());
        let (count, n) = (w.len(), self.particles.cols());
        w.reshaped(&[1, count]).unwrap().matmul(&self.particles).reshaped(&[n]).unwrap()
    }
}

impl<'t> ParticleBelief<'t> {
    pub fn count(&self) -> usize {
        self.log_weights.value().len()
    }

    pub fn weights(&self) -> Var<'t> {
        self.log_weights.exp()
    }

    pub fn mean(&self) -> Result<Var<'t>> {
        self.weights().matmul(&self.particles)
    }

    /// Effective sample size `1/Σπ²`.
    pub fn ess(&self) -> f64 {
        1.0 / self.log_weights.value().data().iter().map(|w| (2.0 * w).exp()).sum::<f64>()
    }

    pub fn value(&self) -> PlainParticles {
        PlainParticles {
            particles: self.particles.value().clone(),
            log_weights: self.log_weights.value().clone(),
        }
    }
}

/// `count` equally weighted samples from a Gaussian belief.
pub fn init_particles<'t>(bel: &Belief<'t>, count: usize, rng: &mut impl Rng) -> Result<ParticleBelief<'t>> {
    if count == 0 {
        return Err(Error::Config("a particle filter needs at least one particle".into()));
    }
    let particles = gaussian::sample_gaussian(bel, count, rng)?;
    let log_weights = bel
        .mean
        .tape()
        .constant(Tensor::full(&[count], -(count as f64).ln()));
    Ok(ParticleBelief { particles, log_weights })
}

/// Low-variance resampling: one uniform offset, `count` evenly spaced
/// positions through the cumulative weights.
pub fn systematic_indices(weights: &[f64], count: usize, rng: &mut impl Rng) -> Vec<usize> {
    let total: f64 = weights.iter().sum();
    let u0: f64 = rng.gen::<f64>() / count as f64;
    let mut out = Vec::with_capacity(count);
    let mut cum = weights[0] / total;
    let mut i = 0;
    for k in 0..count {
        let u = u0 + k as f64 / count as f64;
        while u > cum && i + 1 < weights.len() {
            i += 1;
            cum += weights[i] / total;
        }
        out.push(i);
    }
    out
}

/// Draws indices from `q = α·π + (1−α)/N` and reweights by `π/q`, taped
/// through `π`. `α = 1` is hard resampling.
pub fn soft_resample<'t>(bel: &ParticleBelief<'t>, alpha: f64, rng: &mut impl Rng) -> Result<ParticleBelief<'t>> {
    if !(0.0..=1.0).contains(&alpha) {
        return Err(Error::Config(format!("alpha_re must lie in [0, 1], got {alpha}")));
    }
    let n = bel.count();
    let uniform = (1.0 - alpha) / n as f64;
    let q_values: Vec<f64> = bel
        .log_weights
        .value()
        .data()
        .iter()
        .map(|lw| alpha * lw.exp() + uniform)
        .collect();
    let idx = systematic_indices(&q_values, n, rng);
    let tape = bel.particles.tape();
    let particles = bel.particles.gather_rows(&idx)?;
    let lw = bel.log_weights.gather_rows(&idx)?;
    let new_lw = if alpha == 1.0 {
        tape.constant(Tensor::full(&[n], -(n as f64).ln()))
    } else {
        // log π − log(α·π + (1−α)/N), then renormalized.
        let q = lw.exp().scale(alpha).add_scalar(uniform).ln();
        let raw = lw.sub(&q)?;
        raw.sub(&raw.logsumexp()?)?
    };
    Ok(ParticleBelief {
        particles,
        log_weights: new_lw,
    })
}

/// Log-likelihood per particle of `z` under `N(H·χ, R)`, with the 2π term.
fn analytic_log_likelihood<'t>(h: &Var<'t>, particles: &Var<'t>, obs: &Observation<'t>) -> Result<Var<'t>> {
    let m = obs.z.value().len();
    let l = obs.r.cholesky()?;
    let d = obs.z.sub(&observation_model_h(h, particles)?)?;
    let y = l.solve_triangular(&d.t()?, true)?;
    let maha = y.square().sum_axis(0)?;
    let norm = l.diag()?.ln().sum().add_scalar(0.5 * m as f64 * LOG_2PI);
    maha.scale(-0.5).sub(&norm)
}

/// One particle filter step: optional resampling, stochastic prediction and
/// reweighting by the observation likelihood.
pub fn pf_step<'t>(
    models: &Models,
    p: &Bound<'t>,
    bel: &ParticleBelief<'t>,
    obs: &Observation<'t>,
    config: &FilterConfig,
    rng: &mut impl Rng,
    step: usize,
) -> Result<(ParticleBelief<'t>, StepDiagnostics)> {
    let n = models.config.state_dim;
    if bel.particles.shape().len() != 2 || bel.particles.shape()[1] != n {
        return Err(Error::Shape(format!("particles {:?} for state dimension {n}", bel.particles.shape())));
    }
    let tape = p.tape();
    let mut diag = StepDiagnostics::default();
    let bel = if step % config.resample_every == 0 {
        diag.resampled = true;
        soft_resample(bel, config.alpha_re, rng)?
    } else {
        bel.clone()
    };

    let count = bel.count();
    let moved = models.process.forward(p, &bel.particles)?;
    let q = models
        .process_noise
        .cov(p, &bel.particles, Some(&bel.weights()))
        .map_err(|e| e.during("pf prediction"))?;
    let l = gaussian::matrix_sqrt_psd(&q).map_err(|e| e.during("pf prediction"))?;
    let eta = tape.constant(gaussian::standard_normal(count, n, rng));
    let particles = moved.add(&eta.matmul(&l.t()?)?)?;

    let h = tape.constant(models.h.clone());
    let log_lik = match config.pf_update {
        PfUpdate::Analytic => analytic_log_likelihood(&h, &particles, obs).map_err(|e| e.during("pf update"))?,
        PfUpdate::Learned => {
            let net = models
                .likelihood
                .as_ref()
                .ok_or_else(|| Error::Config("learned particle update without a likelihood network".into()))?;
            let enc = obs
                .encoding
                .as_ref()
                .ok_or_else(|| Error::Config("learned particle update needs a sensor encoding".into()))?;
            net.log_likelihood(p, enc, &observation_model_h(&h, &particles)?)?
        }
    };
    let raw = bel.log_weights.add(&log_lik)?;
    let total = raw.logsumexp()?;
    let log_weights = if total.value().item().is_finite() {
        raw.sub(&total)?
    } else {
        diag.weights_reset = true;
        tape.constant(Tensor::full(&[count], -(count as f64).ln()))
    };
    let out = ParticleBelief { particles, log_weights };
    let mean = out.mean()?;
    let innovation = obs.z.sub(&observation_model_h(&h, &mean)?)?;
    diag.innovation_norm = innovation.value().data().iter().map(|x| x * x).sum::<f64>().sqrt();
    diag.ess = Some(out.ess());
    Ok((out, diag))
}

/// The Gaussian or mixture a particle belief stands for when scoring it.
#[derive(Clone)]
pub enum ParticleSummary<'t> {
    Gaussian(Belief<'t>),
    Mixture {
        particles: Var<'t>,
        log_weights: Var<'t>,
        cov: Var<'t>,
    },
}

impl<'t> ParticleSummary<'t> {
    /// NLL of `x` without the 2π constant.
    pub fn nll(&self, x: &Var<'t>) -> Result<Var<'t>> {
        match self {
            ParticleSummary::Gaussian(b) => gaussian::gaussian_nll(x, b),
            ParticleSummary::Mixture {
                particles,
                log_weights,
                cov,
            } => gaussian::gmm_nll_log(x, particles, log_weights, cov),
        }
    }
}

pub fn particle_belief_summary<'t>(bel: &ParticleBelief<'t>, mode: PfBelief, gmm_sigma: f64, eps: f64) -> Result<ParticleSummary<'t>> {
    match mode {
        PfBelief::Gaussian => Ok(ParticleSummary::Gaussian(gaussian::fit_gaussian(
            &bel.particles,
            &bel.weights(),
            eps,
        )?)),
        PfBelief::Mixture => {
            let n = bel.particles.shape()[1];
            let cov = bel
                .particles
                .tape()
                .constant(Tensor::eye(n).scale(gmm_sigma * gmm_sigma));
            Ok(ParticleSummary::Mixture {
                particles: bel.particles.clone(),
                log_weights: bel.log_weights.clone(),
                cov,
            })
        }
    }
}
