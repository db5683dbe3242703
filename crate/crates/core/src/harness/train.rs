use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use rand::seq::SliceRandom;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{batch_for_seq_len, perturb_initial_state, seeded_rng, sequence_loss, LossKind, Prepared};
use crate::autodiff::{Tape, Var};
use crate::discworld::Dataset;
use crate::error::{Error, Result};
use crate::filters::{run_filter, FilterConfig, RunMode};
use crate::gaussian::{self, Belief};
use crate::models::Models;
use crate::nn::{grad_norm, Adam, ParamStore};
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub loss: LossKind,
    /// Chunk length k.
    pub seq_len: usize,
    pub epochs: usize,
    pub lr: f64,
    /// Chunks per batch; `None` keeps steps × batch at 320.
    pub batch_size: Option<usize>,
    /// Σ_init = sigma_init · I.
    pub sigma_init: f64,
    pub seed: u64,
    /// Caps the batches per epoch, for quick runs.
    pub max_batches: Option<usize>,
    /// Rescales the mean gradient to at most this global norm.
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Nll,
            seq_len: 10,
            epochs: 15,
            lr: 1e-4,
            batch_size: None,
            sigma_init: 25.0,
            seed: 0,
            max_batches: None,
            clip_norm: None,
        }
    }
}

impl TrainConfig {
    pub fn validate(&self) -> Result<()> {
        if self.seq_len == 0 || self.epochs == 0 {
            return Err(Error::Config("seq_len and epochs must be at least 1".into()));
        }
        if !(self.lr > 0.0) || !(self.sigma_init >= 0.0) {
            return Err(Error::Config("lr must be positive and sigma_init non-negative".into()));
        }
        if self.batch_size == Some(0) {
            return Err(Error::Config("batch size must be at least 1".into()));
        }
        check_clip(self.clip_norm)
    }

    pub fn batch(&self) -> usize {
        self.batch_size.unwrap_or_else(|| batch_for_seq_len(self.seq_len))
    }
}

/// One line of the training log; epoch 0 is the untrained model.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LogRow {
    pub epoch: usize,
    pub step: u64,
    pub train_loss: Option<f64>,
    pub val_loss: f64,
    pub grad_norm: Option<f64>,
}

pub struct TrainOutcome {
    /// Parameters at the epoch with the lowest validation loss.
    pub store: ParamStore,
    pub best_epoch: usize,
    pub best_val: f64,
    pub log: Vec<LogRow>,
    /// Wall time in seconds at the end of each logged epoch.
    pub seconds: Vec<f64>,
    pub skipped_updates: u64,
}

fn fmt_opt(x: Option<f64>) -> String {
    x.map(|v| format!("{v}")).unwrap_or_default()
}

/// `epoch,step,train_loss,val_loss,grad_norm`; wall time is kept out of this
/// file so that it is reproducible byte for byte.
pub fn log_csv(rows: &[LogRow]) -> String {
    let mut s = String::from("epoch,step,train_loss,val_loss,grad_norm\n");
    for r in rows {
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            r.epoch,
            r.step,
            fmt_opt(r.train_loss),
            r.val_loss,
            fmt_opt(r.grad_norm)
        );
    }
    s
}

pub fn timing_csv(rows: &[LogRow], seconds: &[f64]) -> String {
    let mut s = String::from("epoch,seconds\n");
    for (r, t) in rows.iter().zip(seconds) {
        let _ = writeln!(s, "{},{t:.3}", r.epoch);
    }
    s
}

impl TrainOutcome {
    pub fn write_logs(&self, dir: &Path) -> Result<()> {
        std::fs::create_dir_all(dir)?;
        std::fs::write(dir.join("train_log.csv"), log_csv(&self.log))?;
        std::fs::write(dir.join("timing.csv"), timing_csv(&self.log, &self.seconds))?;
        Ok(())
    }
}

/// Sums per-chunk gradients in order and divides by the chunk count.
fn mean_gradients(all: Vec<Vec<Option<Tensor>>>) -> Vec<Option<Tensor>> {
    let count = all.len() as f64;
    let mut iter = all.into_iter();
    let mut acc = iter.next().unwrap_or_default();
    for g in iter {
        for (a, b) in acc.iter_mut().zip(g) {
            match (a.as_mut(), b) {
                (Some(a), Some(b)) => a.add_assign(&b),
                (None, Some(b)) => *a = Some(b),
                _ => {}
            }
        }
    }
    for a in acc.iter_mut().flatten() {
        *a = a.scale(1.0 / count);
    }
    acc
}

fn check_clip(clip: Option<f64>) -> Result<()> {
    match clip {
        Some(c) if !(c > 0.0) => Err(Error::Config(format!("clip norm must be positive, got {c}"))),
        _ => Ok(()),
    }
}

/// Scales `grads` down to global norm `clip` if it is larger; returns the
/// norm before clipping.
pub fn clip_gradients(grads: &mut [Option<Tensor>], clip: Option<f64>) -> f64 {
    let norm = grad_norm(grads);
    if let Some(c) = clip {
        if norm > c {
            for g in grads.iter_mut().flatten() {
                *g = g.scale(c / norm);
            }
        }
    }
    norm
}

/// Loss of one chunk: `len` steps of sequence `seq` starting at `start`,
/// from a perturbed belief around the true state at `start`.
#[allow(clippy::too_many_arguments)]
fn chunk_loss<'t>(
    tape: &'t Tape,
    models: &Models,
    p: &crate::nn::Bound<'t>,
    data: &Prepared,
    filter: &FilterConfig,
    loss: LossKind,
    sigma_init: f64,
    (seq, start, len): (usize, usize, usize),
    mode: RunMode,
    rng: &mut rand_chacha::ChaCha8Rng,
) -> Result<Var<'t>> {
    let record = &data.dataset.sequences[seq];
    let n = models.config.state_dim;
    let init = perturb_initial_state(&record.state_tensor(start), &Tensor::eye(n).scale(sigma_init), rng)?;
    let init = if sigma_init == 0.0 {
        // A degenerate Σ_init still needs a valid covariance for the filter.
        gaussian::GaussianBelief {
            mean: init.mean,
            cov: Tensor::eye(n).scale(filter.eps.max(1e-9)),
        }
    } else {
        init
    };
    let init = Belief {
        mean: tape.constant(init.mean),
        cov: tape.constant(init.cov),
    };
    let observations = (start..start + len)
        .map(|t| data.observe(models, p, seq, t))
        .collect::<Result<Vec<_>>>()?;
    let labels: Vec<Var<'t>> = (start + 1..=start + len)
        .map(|t| tape.constant(record.state_tensor(t)))
        .collect();
    let out = run_filter(filter, models, p, &init, &observations, mode, rng)?;
    let beliefs: Vec<_> = out.into_iter().map(|(b, _)| b).collect();
    sequence_loss(loss, &beliefs, &labels, filter)
}

/// Every `k`-step chunk of every sequence; a shorter chunk closes a sequence
/// whose length is not a multiple of `k`.
pub fn chunks(dataset: &Dataset, k: usize) -> Vec<(usize, usize, usize)> {
    let mut out = Vec::new();
    for (i, seq) in dataset.sequences.iter().enumerate() {
        let t = seq.steps();
        let mut start = 0;
        while start < t {
            let len = k.min(t - start);
            out.push((i, start, len));
            start += len;
        }
    }
    out
}

const VAL_STREAM: u64 = 0x7661_6c;

/// Mean loss over whole validation sequences with fixed perturbations.
pub fn validation_loss(
    models: &Models,
    store: &ParamStore,
    data: &Prepared,
    filter: &FilterConfig,
    loss: LossKind,
    sigma_init: f64,
    seed: u64,
) -> f64 {
    let losses: Vec<f64> = (0..data.dataset.sequences.len())
        .into_par_iter()
        .map(|seq| {
            let tape = Tape::new();
            let p = store.bind(&tape);
            let mut rng = seeded_rng(&[seed, VAL_STREAM, seq as u64]);
            let len = data.dataset.sequences[seq].steps();
            chunk_loss(&tape, models, &p, data, filter, loss, sigma_init, (seq, 0, len), RunMode::Train, &mut rng)
                .map(|l| l.value().item())
                .unwrap_or(f64::INFINITY)
        })
        .collect();
    let mean = losses.iter().sum::<f64>() / losses.len().max(1) as f64;
    if mean.is_finite() {
        mean
    } else {
        f64::INFINITY
    }
}

/// Trains the trainable parameters of `store` through the filter and keeps
/// the snapshot with the best validation loss.
pub fn train(
    models: &Models,
    store: ParamStore,
    train_data: &Prepared,
    val_data: &Prepared,
    filter: &FilterConfig,
    cfg: &TrainConfig,
) -> Result<TrainOutcome> {
    cfg.validate()?;
    filter.validate(models.config.state_dim)?;
    if store.trainable_count() == 0 {
        return Err(Error::Config("no trainable parameters".into()));
    }
    if train_data.dataset.sequences.is_empty() || val_data.dataset.sequences.is_empty() {
        return Err(Error::Data("training and validation splits must not be empty".into()));
    }
    let started = Instant::now();
    let mut store = store;
    let mut adam = Adam::new(&store, cfg.lr);
    let all_chunks = chunks(train_data.dataset, cfg.seq_len);
    let batch = cfg.batch();

    let val0 = validation_loss(models, &store, val_data, filter, cfg.loss, cfg.sigma_init, cfg.seed);
    let mut log = vec![LogRow {
        epoch: 0,
        step: 0,
        train_loss: None,
        val_loss: val0,
        grad_norm: None,
    }];
    let mut seconds = vec![started.elapsed().as_secs_f64()];
    let (mut best, mut best_epoch, mut best_val) = (store.clone(), 0, val0);
    let mut bad_streak = 0;
    let mut last_finite = None;

    for epoch in 1..=cfg.epochs {
        let mut order = all_chunks.clone();
        order.shuffle(&mut seeded_rng(&[cfg.seed, epoch as u64]));
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, group) in order.chunks(batch).enumerate() {
            if cfg.max_batches.is_some_and(|m| b >= m) {
                break;
            }
            let results: Vec<Result<(f64, Vec<Option<Tensor>>)>> = group
                .par_iter()
                .enumerate()
                .map(|(i, &chunk)| {
                    let tape = Tape::new();
                    let p = store.bind(&tape);
                    let mut rng = seeded_rng(&[cfg.seed, epoch as u64, b as u64, i as u64]);
                    let l = chunk_loss(&tape, models, &p, train_data, filter, cfg.loss, cfg.sigma_init, chunk, RunMode::Train, &mut rng)?;
                    let grads = tape.backward(&l)?;
                    Ok((l.value().item(), p.gradients(&grads)))
                })
                .collect();
            let mut values = Vec::with_capacity(results.len());
            let mut grads = Vec::with_capacity(results.len());
            let mut failure = None;
            for r in results {
                match r {
                    Ok((v, g)) if v.is_finite() => {
                        values.push(v);
                        grads.push(g);
                    }
                    Ok((v, _)) => failure = Some(format!("loss {v}")),
                    Err(e) if e.is_numeric() => failure = Some(e.to_string()),
                    Err(e) => return Err(e),
                }
            }
            if let Some(reason) = failure {
                bad_streak += 1;
                log::warn!("epoch {epoch} batch {b}: non-finite loss ({reason})");
                if bad_streak >= 3 {
                    return Err(Error::Divergence(format!(
                        "three consecutive non-finite batch losses at epoch {epoch}, batch {b}, optimizer step {}; \
                         last: {reason}; last finite loss: {}",
                        adam.step,
                        last_finite.map(|v: f64| v.to_string()).unwrap_or_else(|| "none".into())
                    )));
                }
                continue;
            }
            bad_streak = 0;
            let mean_loss = values.iter().sum::<f64>() / values.len() as f64;
            last_finite = Some(mean_loss);
            let mut g = mean_gradients(grads);
            let norm = clip_gradients(&mut g, cfg.clip_norm);
            adam.update(&mut store, &g)?;
            loss_sum += mean_loss;
            norm_sum += norm;
            batches += 1;
        }
        let val = validation_loss(models, &store, val_data, filter, cfg.loss, cfg.sigma_init, cfg.seed);
        let denom = batches.max(1) as f64;
        log.push(LogRow {
            epoch,
            step: adam.step,
            train_loss: (batches > 0).then(|| loss_sum / denom),
            val_loss: val,
            grad_norm: (batches > 0).then(|| norm_sum / denom),
        });
        seconds.push(started.elapsed().as_secs_f64());
        log::info!("epoch {epoch}: train {:?} val {val}", log.last().unwrap().train_loss);
        if val < best_val {
            best = store.clone();
            best_val = val;
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        store: best,
        best_epoch,
        best_val,
        log,
        seconds,
        skipped_updates: adam.skipped,
    })
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct PretrainConfig {
    pub loss: LossKind,
    pub epochs: usize,
    pub lr: f64,
    pub batch_size: usize,
    pub seed: u64,
    pub max_batches: Option<usize>,
    #[serde(default)]
    pub clip_norm: Option<f64>,
}

impl Default for PretrainConfig {
    fn default() -> Self {
        Self {
            loss: LossKind::Mix,
            epochs: 30,
            lr: 1e-3,
            batch_size: 32,
            seed: 0,
            max_batches: None,
            clip_norm: None,
        }
    }
}

/// Loss of `(z, R)` against the true position for image `t` of `seq`: the
/// NLL under `N(z, R)`, the squared error of `z`, or their mean.
fn sensor_loss<'t>(models: &Models, p: &crate::nn::Bound<'t>, data: &Dataset, loss: LossKind, seq: usize, t: usize) -> Result<Var<'t>> {
    let tape = p.tape();
    let record = &data.sequences[seq];
    let img = tape.constant(record.image_tensor(t, data.image_size()));
    let obs = models.observe_image(p, &img)?;
    let x = record.states[t + 1];
    let label = tape.constant(Tensor::vector(&[x[0], x[1]]));
    let mse = || Ok::<_, Error>(label.sub(&obs.z)?.square().sum());
    let nll = || gaussian::gaussian_nll(&label, &Belief { mean: obs.z.clone(), cov: obs.r.clone() });
    match loss {
        LossKind::Mse => mse(),
        LossKind::Nll => nll(),
        LossKind::Mix => Ok(mse()?.add(&nll()?)?.scale(0.5)),
    }
}

fn sensor_validation(models: &Models, store: &ParamStore, data: &Dataset, loss: LossKind) -> f64 {
    let values: Vec<f64> = (0..data.sequences.len())
        .into_par_iter()
        .map(|seq| {
            (0..data.sequences[seq].steps())
                .map(|t| {
                    let tape = Tape::new();
                    let p = store.bind(&tape);
                    sensor_loss(models, &p, data, loss, seq, t)
                        .map(|l| l.value().item())
                        .unwrap_or(f64::INFINITY)
                })
                .sum::<f64>()
        })
        .collect();
    let count: usize = data.sequences.iter().map(|s| s.steps()).sum();
    let mean = values.iter().sum::<f64>() / count.max(1) as f64;
    if mean.is_finite() {
        mean
    } else {
        f64::INFINITY
    }
}

/// Supervised sensor training on single images; returns the
/// best-validation parameters.
pub fn pretrain_sensor(
    models: &Models,
    store: ParamStore,
    train_data: &Dataset,
    val_data: &Dataset,
    cfg: &PretrainConfig,
) -> Result<TrainOutcome> {
    if cfg.epochs == 0 || cfg.batch_size == 0 || !(cfg.lr > 0.0) {
        return Err(Error::Config("pretraining needs epochs, batch size and lr above zero".into()));
    }
    check_clip(cfg.clip_norm)?;
    models.sensor()?;
    let started = Instant::now();
    let mut store = store;
    let mut adam = Adam::new(&store, cfg.lr);
    let items: Vec<(usize, usize)> = train_data
        .sequences
        .iter()
        .enumerate()
        .flat_map(|(i, s)| (0..s.steps()).map(move |t| (i, t)))
        .collect();
    let val0 = sensor_validation(models, &store, val_data, cfg.loss);
    let mut log = vec![LogRow {
        epoch: 0,
        step: 0,
        train_loss: None,
        val_loss: val0,
        grad_norm: None,
    }];
    let mut seconds = vec![started.elapsed().as_secs_f64()];
    let (mut best, mut best_epoch, mut best_val) = (store.clone(), 0, val0);
    let mut bad_streak = 0;
    for epoch in 1..=cfg.epochs {
        let mut order = items.clone();
        order.shuffle(&mut seeded_rng(&[cfg.seed, 0x5e45, epoch as u64]));
        let (mut loss_sum, mut norm_sum, mut batches) = (0.0, 0.0, 0usize);
        for (b, group) in order.chunks(cfg.batch_size).enumerate() {
            if cfg.max_batches.is_some_and(|m| b >= m) {
                break;
            }
            let results: Vec<Result<(f64, Vec<Option<Tensor>>)>> = group
                .par_iter()
                .map(|&(seq, t)| {
                    let tape = Tape::new();
                    let p = store.bind(&tape);
                    let l = sensor_loss(models, &p, train_data, cfg.loss, seq, t)?;
                    let grads = tape.backward(&l)?;
                    Ok((l.value().item(), p.gradients(&grads)))
                })
                .collect();
            let results = results.into_iter().collect::<Result<Vec<_>>>();
            let finite = matches!(&results, Ok(r) if r.iter().all(|(v, _)| v.is_finite()));
            if !finite {
                if let Err(e) = &results {
                    if !e.is_numeric() {
                        return Err(results.err().unwrap());
                    }
                }
                bad_streak += 1;
                if bad_streak >= 3 {
                    return Err(Error::Divergence(format!(
                        "sensor pretraining: three consecutive non-finite batch losses at epoch {epoch}, batch {b}"
                    )));
                }
                continue;
            }
            bad_streak = 0;
            let results = results?;
            let mean_loss = results.iter().map(|(v, _)| v).sum::<f64>() / results.len() as f64;
            let mut g = mean_gradients(results.into_iter().map(|(_, g)| g).collect());
            norm_sum += clip_gradients(&mut g, cfg.clip_norm);
            adam.update(&mut store, &g)?;
            loss_sum += mean_loss;
            batches += 1;
        }
        let val = sensor_validation(models, &store, val_data, cfg.loss);
        let denom = batches.max(1) as f64;
        log.push(LogRow {
            epoch,
            step: adam.step,
            train_loss: (batches > 0).then(|| loss_sum / denom),
            val_loss: val,
            grad_norm: (batches > 0).then(|| norm_sum / denom),
        });
        seconds.push(started.elapsed().as_secs_f64());
        log::info!("sensor epoch {epoch}: val {val}");
        if val < best_val {
            best = store.clone();
            best_val = val;
            best_epoch = epoch;
        }
    }
    Ok(TrainOutcome {
        store: best,
        best_epoch,
        best_val,
        log,
        seconds,
        skipped_updates: adam.skipped,
    })
}
