use std::collections::BTreeMap;
use std::fmt::Write as _;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{belief_nll, perturb_initial_state, seeded_rng, Prepared};
use crate::autodiff::Tape;
use crate::error::{Error, Result};
use crate::filters::{filter_step, init_belief, FilterConfig, PlainBelief, RunMode};
use crate::gaussian::{bhattacharyya_value, Belief, GaussianBelief, LOG_2PI};
use crate::models::Models;
use crate::nn::ParamStore;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalConfig {
    /// Each seed adds one run from a perturbed initial state; the run from the
    /// true initial state is always included.
    pub perturbation_seeds: Vec<u64>,
    pub sigma_init: f64,
    pub seed: u64,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            perturbation_seeds: vec![1, 2],
            sigma_init: 25.0,
            seed: 0,
        }
    }
}

/// Per-step averages over sequences and initial states.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub t: usize,
    pub rmse: f64,
    pub nll: f64,
    pub sigma_qp_pred: f64,
    pub sigma_qv_pred: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalReport {
    pub sequences: usize,
    pub steps: usize,
    /// Initial states per sequence (true plus perturbed).
    pub inits: usize,
    pub rmse: f64,
    /// Mean NLL without the 2π constant, as used for training.
    pub nll: f64,
    /// Mean NLL including the `n/2·ln 2π` constant.
    pub nll_2pi: f64,
    pub obs_rmse: f64,
    /// Pearson correlation of trace(R) with visible target pixels; `None`
    /// when either series has zero variance.
    pub corr_r_visibility: Option<f64>,
    pub corr_undefined: bool,
    /// Bhattacharyya distance of the learned Q averaged over the test states
    /// to the true Q averaged the same way.
    pub d_q: f64,
    pub learned_q: Tensor,
    pub true_q: Tensor,
    #[serde(default)]
    pub config: serde_json::Value,
    #[serde(skip)]
    pub trace: Vec<TraceRow>,
}

impl EvalReport {
    /// Scalar metrics by name; undefined ones are left out.
    pub fn metrics(&self) -> BTreeMap<String, f64> {
        let mut m = BTreeMap::new();
        m.insert("rmse".into(), self.rmse);
        m.insert("nll".into(), self.nll);
        m.insert("nll_2pi".into(), self.nll_2pi);
        m.insert("obs_rmse".into(), self.obs_rmse);
        m.insert("d_q".into(), self.d_q);
        if let Some(c) = self.corr_r_visibility {
            m.insert("corr_r_visibility".into(), c);
        }
        m
    }

    pub fn trace_csv(&self) -> String {
        let mut s = String::from("t,rmse,nll,sigma_qp_pred,sigma_qv_pred\n");
        for r in &self.trace {
            let _ = writeln!(s, "{},{},{},{},{}", r.t, r.rmse, r.nll, r.sigma_qp_pred, r.sigma_qv_pred);
        }
        s
    }
}

/// Pearson correlation, or `None` when undefined.
pub fn pearson(xs: &[f64], ys: &[f64]) -> Option<f64> {
    if xs.len() != ys.len() || xs.len() < 2 {
        return None;
    }
    let n = xs.len() as f64;
    let mx = xs.iter().sum::<f64>() / n;
    let my = ys.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (x, y) in xs.iter().zip(ys) {
        sxy += (x - mx) * (y - my);
        sxx += (x - mx) * (x - mx);
        syy += (y - my) * (y - my);
    }
    if sxx <= 0.0 || syy <= 0.0 {
        return None;
    }
    Some((sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0))
}

struct SequenceStats {
    sq_err: Vec<f64>,
    nll: Vec<f64>,
    obs_sq_err: Vec<f64>,
    r_trace: Vec<f64>,
    q_learned: Vec<Tensor>,
    q_true: Vec<Tensor>,
}

fn evaluate_sequence(
    models: &Models,
    store: &ParamStore,
    data: &Prepared,
    filter: &FilterConfig,
    cfg: &EvalConfig,
    seq: usize,
) -> Result<SequenceStats> {
    let record = &data.dataset.sequences[seq];
    let regime = &data.dataset.manifest.regime;
    let steps = record.steps();
    let n = models.config.state_dim;
    let mut stats = SequenceStats {
        sq_err: vec![0.0; steps],
        nll: vec![0.0; steps],
        obs_sq_err: vec![0.0; steps],
        r_trace: vec![0.0; steps],
        q_learned: Vec::with_capacity(steps),
        q_true: Vec::with_capacity(steps),
    };
    // Observation and noise quantities do not depend on the initial state.
    for t in 0..steps {
        let tape = Tape::new();
        let p = store.bind(&tape);
        let obs = data.observe(models, &p, seq, t)?;
        let x = record.states[t + 1];
        let z = obs.z.value();
        stats.obs_sq_err[t] = (z.data()[0] - x[0]).powi(2) + (z.data()[1] - x[1]).powi(2);
        stats.r_trace[t] = obs.r.value().diagonal().iter().sum();
        let prev = tape.constant(record.state_tensor(t));
        stats.q_learned.push(models.process_noise.cov(&p, &prev, None)?.value().clone());
        stats.q_true.push(regime.covariance(&record.states[t]));
    }

    let mut inits = vec![GaussianBelief {
        mean: record.state_tensor(0),
        cov: Tensor::eye(n).scale(cfg.sigma_init.max(filter.eps)),
    }];
    for &s in &cfg.perturbation_seeds {
        let mut rng = seeded_rng(&[cfg.seed, s, seq as u64, 0x1417]);
        inits.push(perturb_initial_state(&record.state_tensor(0), &Tensor::eye(n).scale(cfg.sigma_init), &mut rng)?);
    }
    for (k, init) in inits.iter().enumerate() {
        let mut rng = seeded_rng(&[cfg.seed, seq as u64, k as u64, 0xe7a1]);
        let mut bel: PlainBelief = {
            let tape = Tape::new();
            init_belief(filter, &init.on(&tape), RunMode::Eval, &mut rng)?.value()
        };
        for t in 0..steps {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let obs = data.observe(models, &p, seq, t)?;
            let (next, _) = filter_step(filter, models, &p, &bel.on(&tape), &obs, RunMode::Eval, t, &mut rng)
                .map_err(|e| e.during(&format!("evaluation of sequence {seq} at step {t}")))?;
            let label = tape.constant(record.state_tensor(t + 1));
            let mean = next.mean()?.value().clone();
            stats.sq_err[t] += mean.zip_map(label.value(), |a, b| (a - b) * (a - b)).sum();
            stats.nll[t] += belief_nll(&next, &label, filter)?.value().item();
            bel = next.value();
        }
    }
    Ok(stats)
}

fn mean_matrix(ms: &[Tensor]) -> Tensor {
    let mut acc = Tensor::zeros(ms[0].shape());
    for m in ms {
        acc.add_assign(m);
    }
    acc.scale(1.0 / ms.len() as f64)
}

/// Runs the filter over every sequence of a split from the true and the
/// perturbed initial states and aggregates the metrics.
pub fn evaluate(
    models: &Models,
    store: &ParamStore,
    data: &Prepared,
    filter: &FilterConfig,
    cfg: &EvalConfig,
) -> Result<EvalReport> {
    filter.validate(models.config.state_dim)?;
    let seqs = data.dataset.sequences.len();
    if seqs == 0 {
        return Err(Error::Data("cannot evaluate an empty split".into()));
    }
    let stats = (0..seqs)
        .into_par_iter()
        .map(|s| evaluate_sequence(models, store, data, filter, cfg, s))
        .collect::<Result<Vec<_>>>()?;
    let steps = data.dataset.manifest.steps;
    let inits = 1 + cfg.perturbation_seeds.len();
    let runs = (seqs * inits) as f64;
    let total_steps = runs * steps as f64;
    let n = models.config.state_dim as f64;

    let sq: f64 = stats.iter().flat_map(|s| &s.sq_err).sum();
    let nll: f64 = stats.iter().flat_map(|s| &s.nll).sum::<f64>() / total_steps;
    let obs: f64 = stats.iter().flat_map(|s| &s.obs_sq_err).sum();
    let r_trace: Vec<f64> = stats.iter().flat_map(|s| s.r_trace.iter().copied()).collect();
    let visible: Vec<f64> = data
        .dataset
        .sequences
        .iter()
        .flat_map(|s| s.visible_pixels.iter().map(|&v| v as f64))
        .collect();
    let corr = pearson(&r_trace, &visible);
    let learned: Vec<Tensor> = stats.iter().flat_map(|s| s.q_learned.iter().cloned()).collect();
    let truth: Vec<Tensor> = stats.iter().flat_map(|s| s.q_true.iter().cloned()).collect();
    let (learned_q, true_q) = (mean_matrix(&learned), mean_matrix(&truth));
    let d_q = bhattacharyya_value(&learned_q, &true_q)?;

    let trace = (0..steps)
        .map(|t| {
            let q = mean_matrix(&stats.iter().map(|s| s.q_learned[t].clone()).collect::<Vec<_>>());
            TraceRow {
                t: t + 1,
                rmse: (stats.iter().map(|s| s.sq_err[t]).sum::<f64>() / runs).sqrt(),
                nll: stats.iter().map(|s| s.nll[t]).sum::<f64>() / runs,
                sigma_qp_pred: (0.5 * (q.at(0, 0) + q.at(1, 1))).sqrt(),
                sigma_qv_pred: (0.5 * (q.at(2, 2) + q.at(3, 3))).sqrt(),
            }
        })
        .collect();

    let report = EvalReport {
        sequences: seqs,
        steps,
        inits,
        rmse: (sq / total_steps).sqrt(),
        nll,
        nll_2pi: nll + 0.5 * n * LOG_2PI,
        obs_rmse: (obs / (seqs * steps) as f64).sqrt(),
        corr_undefined: corr.is_none(),
        corr_r_visibility: corr,
        d_q,
        learned_q,
        true_q,
        config: serde_json::json!({ "filter": filter, "eval": cfg }),
        trace,
    };
    if !(report.rmse.is_finite() && report.nll.is_finite()) {
        return Err(Error::Numeric(format!("evaluation produced rmse {} and nll {}", report.rmse, report.nll)));
    }
    Ok(report)
}

/// NLL and squared error of a label under a Gaussian, as plain numbers.
pub fn gaussian_step_metrics(bel: &GaussianBelief, label: &Tensor) -> Result<(f64, f64)> {
    let tape = Tape::new();
    let b: Belief = bel.on(&tape);
    let x = tape.constant(label.clone());
    let nll = crate::gaussian::gaussian_nll(&x, &b)?.value().item();
    let sq = bel.mean.zip_map(label, |a, b| (a - b) * (a - b)).sum();
    Ok((nll, sq))
}
