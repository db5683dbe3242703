//! Differentiable extended, unscented, Monte-Carlo unscented and particle
//! filters. Every step is built from taped operations so that losses on the
//! beliefs can be differentiated with respect to all model parameters.

pub mod oracle;
mod particle;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::gaussian::{self, Belief, GaussianBelief};
use crate::models::{observation_model_h, Models, Observation};
use crate::nn::Bound;
use crate::tensor::Tensor;

pub use particle::{
    init_particles, particle_belief_summary, pf_step, soft_resample, systematic_indices, ParticleBelief,
    ParticleSummary, PlainParticles,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterKind {
    Ekf,
    Ukf,
    Mcukf,
    Pf,
}

/// Scaling parameters of the unscented transform.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct UkfParams {
    pub alpha: f64,
    pub kappa: f64,
    pub beta: f64,
}

impl Default for UkfParams {
    fn default() -> Self {
        Self {
            alpha: 1.0,
            kappa: 0.5,
            beta: 0.0,
        }
    }
}

impl UkfParams {
    pub fn lambda(&self, n: usize) -> f64 {
        self.alpha * self.alpha * (self.kappa + n as f64) - n as f64
    }

    /// Mean and covariance weights of the `2n + 1` sigma points.
    pub fn weights(&self, n: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let lambda = self.lambda(n);
        let spread = lambda + n as f64;
        if !(spread > 0.0) {
            return Err(Error::Config(format!(
                "sigma point spread λ + n = {spread} must be positive (α = {}, κ = {}, n = {n}); \
                 the square root of (λ + n)Σ does not exist",
                self.alpha, self.kappa
            )));
        }
        let mut wm = vec![0.5 / spread; 2 * n + 1];
        wm[0] = lambda / spread;
        // The centre weight absorbs rounding so that the weights sum to
        // exactly 1 when added in order.
        for _ in 0..4 {
            let total: f64 = wm.iter().sum();
            if total == 1.0 {
                break;
            }
            wm[0] += 1.0 - total;
        }
        let mut wc = wm.clone();
        wc[0] += 1.0 - self.alpha * self.alpha + self.beta;
        Ok((wm, wc))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PfUpdate {
    Analytic,
    Learned,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PfBelief {
    /// One Gaussian fitted to the particles.
    Gaussian,
    /// One mixture component per particle.
    Mixture,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FilterConfig {
    pub kind: FilterKind,
    pub ukf: UkfParams,
    pub samples_train: usize,
    pub samples_eval: usize,
    pub pf_update: PfUpdate,
    pub pf_belief: PfBelief,
    /// Standard deviation of each mixture component.
    pub gmm_sigma: f64,
    pub resample_every: usize,
    pub alpha_re: f64,
    /// Regularizer added when fitting a Gaussian to particles.
    pub eps: f64,
}

impl FilterConfig {
    pub fn new(kind: FilterKind) -> Self {
        Self {
            kind,
            ukf: UkfParams::default(),
            samples_train: 100,
            samples_eval: 500,
            pf_update: PfUpdate::Analytic,
            pf_belief: PfBelief::Mixture,
            gmm_sigma: 1.0,
            resample_every: 1,
            alpha_re: 0.05,
            eps: gaussian::DEFAULT_EPS,
        }
    }

    /// Checks invariants for a state of dimension `n`.
    pub fn validate(&self, n: usize) -> Result<()> {
        if self.kind == FilterKind::Ukf {
            self.ukf.weights(n)?;
        }
        let min = if self.kind == FilterKind::Mcukf { 2 } else { 1 };
        if self.samples_train < min || self.samples_eval < min {
            return Err(Error::Config(format!("sample counts must be at least {min}")));
        }
        if !(0.0..=1.0).contains(&self.alpha_re) {
            return Err(Error::Config(format!("alpha_re must lie in [0, 1], got {}", self.alpha_re)));
        }
        if self.resample_every == 0 {
            return Err(Error::Config("resample_every must be at least 1".into()));
        }
        if !(self.gmm_sigma > 0.0) {
            return Err(Error::Config("gmm_sigma must be positive".into()));
        }
        Ok(())
    }

    pub fn samples(&self, mode: RunMode) -> usize {
        match mode {
            RunMode::Train => self.samples_train,
            RunMode::Eval => self.samples_eval,
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum RunMode {
    Train,
    Eval,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize)]
pub struct StepDiagnostics {
    /// ‖z − ẑ‖ of the update.
    pub innovation_norm: f64,
    /// 1/Σπ² after the update (particle filters only).
    pub ess: Option<f64>,
    pub resampled: bool,
    /// All weights vanished and were reset to uniform.
    pub weights_reset: bool,
}

/// A filter belief on a tape.
#[derive(Clone)]
pub enum FilterBelief<'t> {
    Gaussian(Belief<'t>),
    Particles(ParticleBelief<'t>),
}

/// A filter belief detached from any tape.
#[derive(Clone, Debug, PartialEq)]
pub enum PlainBelief {
    Gaussian(GaussianBelief),
    Particles(PlainParticles),
}

impl<'t> FilterBelief<'t> {
    /// Point estimate: the mean, or the weighted particle mean.
    pub fn mean(&self) -> Result<Var<'t>> {
        match self {
            FilterBelief::Gaussian(b) => Ok(b.mean.clone()),
            FilterBelief::Particles(p) => p.mean(),
        }
    }

    pub fn value(&self) -> PlainBelief {
        match self {
            FilterBelief::Gaussian(b) => PlainBelief::Gaussian(b.value()),
            FilterBelief::Particles(p) => PlainBelief::Particles(p.value()),
        }
    }
}

impl PlainBelief {
    pub fn on<'t>(&self, tape: &'t Tape) -> FilterBelief<'t> {
        match self {
            PlainBelief::Gaussian(b) => FilterBelief::Gaussian(b.on(tape)),
            PlainBelief::Particles(p) => FilterBelief::Particles(p.on(tape)),
        }
    }

    pub fn mean(&self) -> Tensor {
        match self {
            PlainBelief::Gaussian(b) => b.mean.clone(),
            PlainBelief::Particles(p) => p.mean(),
        }
    }
}

/// Innovation, cross covariance `C` and innovation covariance `S` feed the
/// shared Kalman correction `μ + K·ν`, `Σ − K·S·Kᵀ` with `K = C·S⁻¹`.
fn kalman_correct<'t>(pred: &Belief<'t>, cross: &Var<'t>, s: &Var<'t>, innovation: &Var<'t>) -> Result<Belief<'t>> {
    let l = s.cholesky()?;
    // M = L⁻¹Cᵀ gives K·ν = Mᵀ·L⁻¹ν and K·S·Kᵀ = Mᵀ·M.
    let m = l.solve_triangular(&cross.t()?, true)?;
    let nu = l.solve_triangular(innovation, true)?;
    let mean = pred.mean.add(&m.t()?.matmul(&nu)?)?;
    let cov = pred.cov.sub(&m.t()?.matmul(&m)?)?.symmetrize()?;
    Ok(Belief { mean, cov })
}

fn check_belief(bel: &Belief<'_>, n: usize) -> Result<()> {
    if bel.mean.shape() != [n] || bel.cov.shape() != [n, n] {
        return Err(Error::Shape(format!(
            "belief {:?}/{:?} for state dimension {n}",
            bel.mean.shape(),
            bel.cov.shape()
        )));
    }
    Ok(())
}

pub fn ekf_predict<'t>(models: &Models, p: &Bound<'t>, bel: &Belief<'t>) -> Result<Belief<'t>> {
    check_belief(bel, models.config.state_dim)?;
    let mean = models.process.forward(p, &bel.mean)?;
    let f = models.process.jacobian(p, &bel.mean)?;
    let q = models.process_noise.cov(p, &bel.mean, None)?;
    let cov = f.matmul(&bel.cov)?.matmul(&f.t()?)?.add(&q)?.symmetrize()?;
    Ok(Belief { mean, cov })
}

pub fn ekf_update<'t>(models: &Models, p: &Bound<'t>, pred: &Belief<'t>, obs: &Observation<'t>) -> Result<(Belief<'t>, StepDiagnostics)> {
    let h = p.tape().constant(models.h.clone());
    let cross = pred.cov.matmul(&h.t()?)?;
    let s = h.matmul(&cross)?.add(&obs.r)?.symmetrize()?;
    let innovation = obs.z.sub(&observation_model_h(&h, &pred.mean)?)?;
    let diag = StepDiagnostics {
        innovation_norm: innovation.value().data().iter().map(|x| x * x).sum::<f64>().sqrt(),
        ..Default::default()
    };
    Ok((kalman_correct(pred, &cross, &s, &innovation)?, diag))
}

/// One extended Kalman filter step: linearized prediction, then update.
pub fn ekf_step<'t>(models: &Models, p: &Bound<'t>, bel: &Belief<'t>, obs: &Observation<'t>) -> Result<(Belief<'t>, StepDiagnostics)> {
    let pred = ekf_predict(models, p, bel).map_err(|e| e.during("ekf prediction"))?;
    ekf_update(models, p, &pred, obs).map_err(|e| e.during("ekf update"))
}

/// Sigma points `μ`, `μ ± columns of √((n+λ)Σ)` as rows of a `(2n+1)×n`
/// matrix, with their mean and covariance weights.
pub fn ukf_sigma_points<'t>(bel: &Belief<'t>, params: &UkfParams) -> Result<(Var<'t>, Vec<f64>, Vec<f64>)> {
    let n = bel.mean.value().len();
    let (wm, wc) = params.weights(n)?;
    let spread = params.lambda(n) + n as f64;
    let l = gaussian::matrix_sqrt_psd(&bel.cov.scale(spread))?;
    // Rows of Lᵀ are the columns of L.
    let lt = l.t()?;
    let centre = bel.mean.reshape(&[1, n])?;
    let points = Var::concat(&[centre.clone(), centre.add(&lt)?, centre.sub(&lt)?], 0)?;
    Ok((points, wm, wc))
}

/// Weighted mean and covariance of transformed points `[P, m]`, plus an
/// optional additive covariance.
pub fn unscented_transform<'t>(points: &Var<'t>, wm: &[f64], wc: &[f64], additive: Option<&Var<'t>>) -> Result<(Var<'t>, Var<'t>)> {
    let s = points.shape();
    if s.len() != 2 || s[0] != wm.len() || s[0] != wc.len() {
        return Err(Error::Shape(format!(
            "unscented transform of {s:?} with {} weights",
            wm.len()
        )));
    }
    let tape = points.tape();
    let mean = tape.constant(Tensor::vector(wm)).matmul(points)?;
    let d = points.sub(&mean)?;
    let mut cov = d.t()?.mul(&tape.constant(Tensor::vector(wc)))?.matmul(&d)?;
    if let Some(a) = additive {
        cov = cov.add(a)?;
    }
    Ok((mean, cov.symmetrize()?))
}

/// Prediction through a weighted point set drawn from the belief.
fn points_predict<'t>(models: &Models, p: &Bound<'t>, points: &Var<'t>, wm: &[f64], wc: &[f64]) -> Result<Belief<'t>> {
    let moved = models.process.forward(p, points)?;
    let w = p.tape().constant(Tensor::vector(wm));
    let q = models.process_noise.cov(p, points, Some(&w))?;
    let (mean, cov) = unscented_transform(&moved, wm, wc, Some(&q))?;
    Ok(Belief { mean, cov })
}

/// Update from a point set drawn from the predicted belief.
fn points_update<'t>(
    models: &Models,
    p: &Bound<'t>,
    pred: &Belief<'t>,
    points: &Var<'t>,
    wm: &[f64],
    wc: &[f64],
    obs: &Observation<'t>,
) -> Result<(Belief<'t>, StepDiagnostics)> {
    let tape = p.tape();
    let h = tape.constant(models.h.clone());
    let zp = observation_model_h(&h, points)?;
    let (z_hat, s) = unscented_transform(&zp, wm, wc, Some(&obs.r))?;
    let dx = points.sub(&pred.mean)?;
    let dz = zp.sub(&z_hat)?;
    let cross = dx.t()?.mul(&tape.constant(Tensor::vector(wc)))?.matmul(&dz)?;
    let innovation = obs.z.sub(&z_hat)?;
    let diag = StepDiagnostics {
        innovation_norm: innovation.value().data().iter().map(|x| x * x).sum::<f64>().sqrt(),
        ..Default::default()
    };
    Ok((kalman_correct(pred, &cross, &s, &innovation)?, diag))
}

/// One unscented Kalman filter step. The update draws fresh sigma points
/// from the predicted belief.
pub fn ukf_step<'t>(
    models: &Models,
    p: &Bound<'t>,
    bel: &Belief<'t>,
    obs: &Observation<'t>,
    params: &UkfParams,
) -> Result<(Belief<'t>, StepDiagnostics)> {
    check_belief(bel, models.config.state_dim)?;
    let pred = ukf_sigma_points(bel, params)
        .and_then(|(pts, wm, wc)| points_predict(models, p, &pts, &wm, &wc))
        .map_err(|e| e.during("ukf prediction"))?;
    ukf_sigma_points(&pred, params)
        .and_then(|(pts, wm, wc)| points_update(models, p, &pred, &pts, &wm, &wc, obs))
        .map_err(|e| e.during("ukf update"))
}

/// The unscented step with `count` equally weighted random samples in place
/// of sigma points.
pub fn mcukf_step<'t>(
    models: &Models,
    p: &Bound<'t>,
    bel: &Belief<'t>,
    obs: &Observation<'t>,
    count: usize,
    rng: &mut impl Rng,
) -> Result<(Belief<'t>, StepDiagnostics)> {
    if count < 2 {
        return Err(Error::Config("the Monte-Carlo unscented filter needs at least 2 samples".into()));
    }
    check_belief(bel, models.config.state_dim)?;
    let w = vec![1.0 / count as f64; count];
    let pred = gaussian::sample_gaussian(bel, count, rng)
        .and_then(|pts| points_predict(models, p, &pts, &w, &w))
        .map_err(|e| e.during("mcukf prediction"))?;
    gaussian::sample_gaussian(&pred, count, rng)
        .and_then(|pts| points_update(models, p, &pred, &pts, &w, &w, obs))
        .map_err(|e| e.during("mcukf update"))
}

/// The initial filter belief: the Gaussian itself, or `count` particles
/// drawn from it.
pub fn init_belief<'t>(config: &FilterConfig, init: &Belief<'t>, mode: RunMode, rng: &mut impl Rng) -> Result<FilterBelief<'t>> {
    match config.kind {
        FilterKind::Pf => Ok(FilterBelief::Particles(init_particles(init, config.samples(mode), rng)?)),
        _ => Ok(FilterBelief::Gaussian(init.clone())),
    }
}

/// Dispatches one step of the configured filter.
#[allow(clippy::too_many_arguments)]
pub fn filter_step<'t>(
    config: &FilterConfig,
    models: &Models,
    p: &Bound<'t>,
    bel: &FilterBelief<'t>,
    obs: &Observation<'t>,
    mode: RunMode,
    step: usize,
    rng: &mut impl Rng,
) -> Result<(FilterBelief<'t>, StepDiagnostics)> {
    match (config.kind, bel) {
        (FilterKind::Ekf, FilterBelief::Gaussian(b)) => {
            ekf_step(models, p, b, obs).map(|(b, d)| (FilterBelief::Gaussian(b), d))
        }
        (FilterKind::Ukf, FilterBelief::Gaussian(b)) => {
            ukf_step(models, p, b, obs, &config.ukf).map(|(b, d)| (FilterBelief::Gaussian(b), d))
        }
        (FilterKind::Mcukf, FilterBelief::Gaussian(b)) => {
            mcukf_step(models, p, b, obs, config.samples(mode), rng).map(|(b, d)| (FilterBelief::Gaussian(b), d))
        }
        (FilterKind::Pf, FilterBelief::Particles(b)) => {
            pf_step(models, p, b, obs, config, rng, step).map(|(b, d)| (FilterBelief::Particles(b), d))
        }
        _ => Err(Error::Contract(format!("belief type does not match filter {:?}", config.kind))),
    }
}

/// Folds the filter over a sequence of observations on one tape.
pub fn run_filter<'t>(
    config: &FilterConfig,
    models: &Models,
    p: &Bound<'t>,
    init: &Belief<'t>,
    observations: &[Observation<'t>],
    mode: RunMode,
    rng: &mut impl Rng,
) -> Result<Vec<(FilterBelief<'t>, StepDiagnostics)>> {
    if observations.is_empty() {
        return Err(Error::Data("cannot filter an empty sequence".into()));
    }
    config.validate(models.config.state_dim)?;
    let mut bel = init_belief(config, init, mode, rng)?;
    let mut out = Vec::with_capacity(observations.len());
    for (t, obs) in observations.iter().enumerate() {
        let (next, diag) = filter_step(config, models, p, &bel, obs, mode, t, rng)?;
        out.push((next.clone(), diag));
        bel = next;
    }
    Ok(out)
}
