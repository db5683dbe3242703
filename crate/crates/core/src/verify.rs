//! Verification suites: finite-difference gradient checks of every tape op
//! and of short filter losses, and agreement of the filters with a
//! closed-form Kalman filter on random linear-Gaussian systems.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::autodiff::{gradient_check, Tape, Var};
use crate::error::Result;
use crate::filters::oracle::{kalman_filter, LinearSystem};
use crate::filters::{filter_step, init_belief, run_filter, FilterBelief, FilterConfig, FilterKind, PfBelief, PlainBelief, RunMode};
use crate::filters::particle_belief_summary;
use crate::gaussian::{self, Belief, CovMode, GaussianBelief};
use crate::models::{ModelConfig, Models, NoiseKind, NoiseModel, NoiseSpec, ProcessModel, ProcessSpec};
use crate::nn::{he_uniform, ParamStore};
use crate::tensor::Tensor;

/// Relative error bound of the gradient checks.
pub const GRADCHECK_TOL: f64 = 1e-4;

/// Bound on the deviation of the deterministic filters from the oracle.
pub const ORACLE_TOL: f64 = 1e-8;

/// Monte-Carlo bound in standard errors per state component.
pub const MC_BOUND_SIGMAS: f64 = 5.0;

/// Share of trials that must fall inside the Monte-Carlo bound.
pub const MC_PASS_RATE: f64 = 0.95;

pub const ORACLE_STEPS: usize = 50;

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckEntry {
    pub name: String,
    pub trials: usize,
    pub max_rel_error: f64,
    pub pass: bool,
}

type Scalar = for<'t> fn(&'t Tape, &Var<'t>) -> Result<Var<'t>>;

fn random(rng: &mut ChaCha8Rng, shape: &[usize], lo: f64, hi: f64) -> Tensor {
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(lo..hi)).collect()).expect("shape matches")
}

/// Values in ±[0.2, 2) so that kinks and poles stay out of the stencil.
fn nonzero(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| {
            let v = rng.gen_range(0.2..2.0);
            if rng.gen_bool(0.5) {
                v
            } else {
                -v
            }
        })
        .collect();
    Tensor::new(shape.to_vec(), data).expect("shape matches")
}

fn weights<'t>(tape: &'t Tape, shape: &[usize], seed: u64) -> Var<'t> {
    tape.constant(random(&mut ChaCha8Rng::seed_from_u64(seed), shape, -1.0, 1.0))
}

fn spd<'t>(x: &Var<'t>, n: usize) -> Result<Var<'t>> {
    let b = x.reshape(&[n, n])?;
    b.matmul(&b.t()?)?.add(&x.tape().constant(Tensor::eye(n)))
}

type Inputs = fn(&mut ChaCha8Rng) -> Tensor;

fn op_cases() -> Vec<(&'static str, Scalar, Inputs)> {
    vec![
        ("add", |t, x| Ok(x.add(&weights(t, &[3, 4], 1))?.square().sum()), |r| random(r, &[3, 4], -1.0, 1.0)),
        ("sub (broadcast)", |t, x| Ok(weights(t, &[2, 3], 2).sub(x)?.square().sum()), |r| random(r, &[3], -1.0, 1.0)),
        ("mul (broadcast)", |t, x| Ok(x.mul(&weights(t, &[4, 3], 3))?.square().sum()), |r| random(r, &[4, 1], -1.0, 1.0)),
        ("div", |t, x| Ok(weights(t, &[3], 4).div(x)?.sum()), |r| nonzero(r, &[3])),
        ("neg, scale, add_scalar", |_, x| Ok(x.neg().scale(2.5).add_scalar(1.0).square().sum()), |r| random(r, &[5], -1.0, 1.0)),
        ("relu", |_, x| Ok(x.relu().square().sum()), |r| nonzero(r, &[6])),
        ("exp", |_, x| Ok(x.exp().sum()), |r| random(r, &[4], -2.0, 2.0)),
        ("ln", |_, x| Ok(x.ln().sum()), |r| random(r, &[4], 0.2, 3.0)),
        ("sqrt", |_, x| Ok(x.sqrt().sum()), |r| random(r, &[4], 0.2, 3.0)),
        ("square", |_, x| Ok(x.square().sum()), |r| random(r, &[4], -2.0, 2.0)),
        ("sign", |_, x| Ok(x.mul(&x.sign())?.square().sum()), |r| nonzero(r, &[4])),
        ("matmul", |t, x| Ok(x.matmul(&weights(t, &[3, 2], 5))?.square().sum()), |r| random(r, &[4, 3], -1.0, 1.0)),
        ("matmul (vector)", |t, x| Ok(weights(t, &[2, 3], 6).matmul(x)?.square().sum()), |r| random(r, &[3], -1.0, 1.0)),
        (
            "transpose, reshape",
            |t, x| Ok(x.reshape(&[2, 3])?.t()?.mul(&weights(t, &[3, 2], 7))?.sum()),
            |r| random(r, &[6], -1.0, 1.0),
        ),
        (
            "concat, slice",
            |t, x| {
                let c = Var::concat(&[x.clone(), weights(t, &[2, 2], 8), x.square()], 1)?;
                Ok(c.slice(1, 1, 4)?.square().sum())
            },
            |r| random(r, &[2, 2], -1.0, 1.0),
        ),
        ("gather_rows", |_, x| Ok(x.gather_rows(&[2, 0, 2, 1])?.square().sum()), |r| random(r, &[3, 2], -1.0, 1.0)),
        (
            "scatter_last",
            |t, x| Ok(x.scatter_last(&[3, 0, 4], 5)?.mul(&weights(t, &[2, 5], 15))?.sum()),
            |r| random(r, &[2, 3], -1.0, 1.0),
        ),
        (
            "diag_embed, diag",
            |t, x| {
                let d = x.diag_embed()?;
                d.matmul(&weights(t, &[3, 3], 9))?.square().sum().add(&d.diag()?.sum())
            },
            |r| random(r, &[3], -1.0, 1.0),
        ),
        (
            "sum_axis, mean",
            |_, x| x.sum_axis(0)?.square().sum().add(&x.sum_axis(1)?.square().mean()),
            |r| random(r, &[3, 4], -1.0, 1.0),
        ),
        ("softmax", |t, x| Ok(x.softmax()?.mul(&weights(t, &[5], 10))?.sum()), |r| random(r, &[5], -2.0, 2.0)),
        ("logsumexp", |_, x| x.logsumexp(), |r| random(r, &[5], -3.0, 3.0)),
        (
            "symmetrize",
            |t, x| Ok(x.reshape(&[3, 3])?.symmetrize()?.mul(&weights(t, &[3, 3], 16))?.square().sum()),
            |r| random(r, &[9], -1.0, 1.0),
        ),
        (
            "cholesky",
            |t, x| Ok(spd(x, 3)?.cholesky()?.mul(&weights(t, &[3, 3], 11))?.sum()),
            |r| random(r, &[9], -1.0, 1.0),
        ),
        (
            "solve_triangular (lower)",
            |t, x| Ok(spd(x, 3)?.cholesky()?.solve_triangular(&weights(t, &[3, 2], 12), true)?.square().sum()),
            |r| random(r, &[9], -1.0, 1.0),
        ),
        (
            "solve_triangular (upper)",
            |t, x| {
                let u = spd(&weights(t, &[9], 13), 3)?.cholesky()?.t()?;
                Ok(u.solve_triangular(x, false)?.square().sum())
            },
            |r| random(r, &[3], -1.0, 1.0),
        ),
        ("logdet", |_, x| spd(x, 3)?.logdet(), |r| random(r, &[9], -1.0, 1.0)),
        (
            "conv2d",
            |t, x| Ok(x.reshape(&[5, 6, 2])?.conv2d(&weights(t, &[3, 3, 2, 3], 14), 2)?.square().sum()),
            |r| random(r, &[60], -1.0, 1.0),
        ),
    ]
}

/// Gradient checks of every tape op at `trials` random inputs each.
pub fn gradcheck_ops(trials: usize, seed: u64) -> Result<Vec<GradCheckEntry>> {
    let mut out = Vec::new();
    for (k, (name, f, inputs)) in op_cases().into_iter().enumerate() {
        let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_add(k as u64));
        let mut worst: f64 = 0.0;
        for _ in 0..trials {
            let r = gradient_check(f, &inputs(&mut rng), 1e-5, GRADCHECK_TOL)?;
            worst = worst.max(r.max_rel_error);
        }
        out.push(GradCheckEntry {
            name: name.to_string(),
            trials,
            max_rel_error: worst,
            pass: worst < GRADCHECK_TOL,
        });
    }
    Ok(out)
}

/// Disc models with a learned process, heteroscedastic full Q and constant
/// diagonal R, with non-zero output layers so every path carries gradient.
pub fn composed_models() -> Result<(Models, ParamStore)> {
    let mut c = ModelConfig::disc(0);
    c.process = ProcessSpec::Learned;
    c.process_noise = NoiseSpec::diagonal(NoiseKind::Heteroscedastic, CovMode::Full, &[4.0; 4]);
    c.obs_noise = NoiseSpec::diagonal(NoiseKind::Constant, CovMode::Diagonal, &[9.0; 2]);
    let (models, mut store) = Models::build(&c, 11)?;
    let mut r = ChaCha8Rng::seed_from_u64(5);
    if let ProcessModel::Learned(net) = &models.process {
        store.set(net.out.weight, he_uniform(&[4, 64], 64, &mut r).scale(0.3))?;
    }
    if let NoiseModel::Heteroscedastic { out, .. } = &models.process_noise {
        store.set(out.weight, he_uniform(&[10, 32], 32, &mut r).scale(0.3))?;
    }
    Ok((models, store))
}

/// Three-step NLL through a filter. `x` holds the initial mean, then the
/// observation-noise parameters, then the process net's output bias.
pub fn three_step_loss<'t>(kind: FilterKind, t: &'t Tape, x: &Var<'t>) -> Result<Var<'t>> {
    let (models, store) = composed_models()?;
    let mut p = store.bind(t);
    for (name, start, len) in [("r.raw", 4, 2), ("r.bias", 6, 2), ("process.delta.bias", 8, 4)] {
        let id = store.id_of(name).expect("composed models declare this parameter");
        p.replace(id, x.slice(0, start, len)?)?;
    }
    let init = Belief {
        mean: x.slice(0, 0, 4)?,
        cov: t.constant(Tensor::eye(4).scale(4.0)),
    };
    let zs = [[11.0, -4.0], [12.5, -3.0], [13.0, -2.5]];
    let truth = [[11.2, -4.1, 1.0, 0.8], [12.4, -3.2, 1.1, 0.7], [13.3, -2.4, 0.9, 0.6]];
    let observations = zs
        .iter()
        .map(|z| models.observe_direct(&p, &Tensor::vector(z)))
        .collect::<Result<Vec<_>>>()?;
    let mut c = FilterConfig::new(kind);
    c.samples_train = 30;
    // Resampling draws indices, which makes the loss piecewise constant in
    // the weights; the check covers the weighting path instead.
    c.resample_every = 1000;
    let out = run_filter(&c, &models, &p, &init, &observations, RunMode::Train, &mut ChaCha8Rng::seed_from_u64(42))?;
    let mut loss = t.scalar(0.0);
    for ((b, _), x) in out.iter().zip(&truth) {
        let xt = t.constant(Tensor::vector(x));
        let nll = match b {
            FilterBelief::Gaussian(g) => gaussian::gaussian_nll(&xt, g)?,
            FilterBelief::Particles(pb) => particle_belief_summary(pb, PfBelief::Gaussian, 1.0, c.eps)?.nll(&xt)?,
        };
        loss = loss.add(&nll)?;
    }
    Ok(loss.scale(1.0 / 3.0))
}

/// Point at which the composed losses are checked.
pub fn three_step_point() -> Result<Tensor> {
    let (_, store) = composed_models()?;
    let mut x = vec![10.0, -5.0, 1.0, 1.0];
    for name in ["r.raw", "r.bias"] {
        x.extend_from_slice(store.get(store.id_of(name).expect("declared")).data());
    }
    x.extend_from_slice(&[0.1, -0.2, 0.05, 0.0]);
    Ok(Tensor::vector(&x))
}

/// Gradient checks of three-step NLL losses through each filter with a
/// learned process model and learned noise.
pub fn gradcheck_filters() -> Result<Vec<GradCheckEntry>> {
    let cases: [(&str, Scalar); 4] = [
        ("3-step dEKF loss", |t, x| three_step_loss(FilterKind::Ekf, t, x)),
        ("3-step dUKF loss", |t, x| three_step_loss(FilterKind::Ukf, t, x)),
        ("3-step dMCUKF loss", |t, x| three_step_loss(FilterKind::Mcukf, t, x)),
        ("3-step dPF loss", |t, x| three_step_loss(FilterKind::Pf, t, x)),
    ];
    let x = three_step_point()?;
    cases
        .into_iter()
        .map(|(name, f)| {
            let r = gradient_check(f, &x, 1e-6, GRADCHECK_TOL)?;
            Ok(GradCheckEntry {
                name: name.to_string(),
                trials: 1,
                max_rel_error: r.max_rel_error,
                pass: r.pass,
            })
        })
        .collect()
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleTrial {
    pub seed: u64,
    /// Largest absolute deviation of the posterior mean over all steps.
    pub max_mean_dev: f64,
    pub max_cov_dev: f64,
    /// Final-step mean deviation in Monte-Carlo standard errors, largest
    /// over the state components. Only for sampling filters.
    pub final_mean_z: Option<f64>,
    pub pass: bool,
}

#[derive(Clone, Debug, Serialize)]
pub struct OracleReport {
    pub filter: FilterKind,
    pub samples: Option<usize>,
    pub steps: usize,
    pub max_mean_dev: f64,
    pub max_cov_dev: f64,
    pub pass_rate: f64,
    pub pass: bool,
    pub trials: Vec<OracleTrial>,
}

/// Runs one filter on random 4-D linear-Gaussian systems with 2-D
/// observations and compares it with the closed-form Kalman filter.
///
/// dEKF and dUKF must match mean and covariance to [`ORACLE_TOL`] at every
/// step of every trial. For dMCUKF and dPF a trial passes when each final
/// mean component lies within [`MC_BOUND_SIGMAS`] standard errors
/// `sqrt(P_ii / N_eff)` of the oracle, where `P` is the oracle's predicted
/// covariance at the last step and `N_eff` the sample count (dMCUKF) or
/// the final effective sample size (dPF); the check passes when at least
/// [`MC_PASS_RATE`] of the trials do.
pub fn oracle_check(kind: FilterKind, trials: usize, samples: Option<usize>, seed: u64) -> Result<OracleReport> {
    let mut config = FilterConfig::new(kind);
    let sampling = matches!(kind, FilterKind::Mcukf | FilterKind::Pf);
    if let Some(n) = samples {
        config.samples_eval = n;
    }
    config.validate(4)?;
    let mut out = Vec::with_capacity(trials);
    for trial in 0..trials as u64 {
        let trial_seed = seed.wrapping_mul(1_000_003).wrapping_add(trial);
        let mut rng = ChaCha8Rng::seed_from_u64(trial_seed);
        let sys = LinearSystem::random(4, 2, &mut rng);
        let init = GaussianBelief::new(Tensor::vector(&[1.0, -1.0, 0.5, 0.0]), Tensor::eye(4).scale(2.0))?;
        let (_, zs) = sys.simulate(&init.mean, ORACLE_STEPS, &mut rng);
        let oracle = kalman_filter(&sys, &init, &zs)?;
        let (models, store) = Models::build(&ModelConfig::linear(sys.a.clone(), sys.q.clone(), 2, sys.r.clone()), 0)?;

        let mut bel = {
            let tape = Tape::new();
            init_belief(&config, &init.on(&tape), RunMode::Eval, &mut rng)?.value()
        };
        let (mut mean_dev, mut cov_dev): (f64, f64) = (0.0, 0.0);
        let mut ess = None;
        for (t, (z, o)) in zs.iter().zip(&oracle).enumerate() {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let obs = models.observe_direct(&p, z)?;
            let (next, diag) = filter_step(&config, &models, &p, &bel.on(&tape), &obs, RunMode::Eval, t, &mut rng)?;
            bel = next.value();
            ess = diag.ess;
            mean_dev = mean_dev.max(bel.mean().max_abs_diff(&o.mean));
            if let PlainBelief::Gaussian(g) = &bel {
                cov_dev = cov_dev.max(g.cov.max_abs_diff(&o.cov));
            }
        }

        let final_mean_z = sampling.then(|| {
            let prev = if ORACLE_STEPS >= 2 { &oracle[ORACLE_STEPS - 2].cov } else { &init.cov };
            let pred = sys.a.matmul(prev).matmul(&sys.a.transpose()).zip_map(&sys.q, |a, b| a + b);
            let n_eff = ess.unwrap_or(config.samples_eval as f64);
            let mu = bel.mean();
            let last = &oracle[ORACLE_STEPS - 1].mean;
            (0..4)
                .map(|i| (mu.data()[i] - last.data()[i]).abs() / (pred.at(i, i) / n_eff).sqrt())
                .fold(0.0, f64::max)
        });
        let pass = match final_mean_z {
            Some(zv) => zv <= MC_BOUND_SIGMAS,
            None => mean_dev < ORACLE_TOL && cov_dev < ORACLE_TOL,
        };
        out.push(OracleTrial {
            seed: trial_seed,
            max_mean_dev: mean_dev,
            max_cov_dev: cov_dev,
            final_mean_z,
            pass,
        });
    }
    let passed = out.iter().filter(|t| t.pass).count();
    let pass_rate = passed as f64 / trials.max(1) as f64;
    Ok(OracleReport {
        filter: kind,
        samples: sampling.then_some(config.samples_eval),
        steps: ORACLE_STEPS,
        max_mean_dev: out.iter().map(|t| t.max_mean_dev).fold(0.0, f64::max),
        max_cov_dev: out.iter().map(|t| t.max_cov_dev).fold(0.0, f64::max),
        pass_rate,
        pass: trials > 0 && if sampling { pass_rate >= MC_PASS_RATE } else { passed == trials },
        trials: out,
    })
}
