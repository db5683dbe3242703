//! Losses, training, evaluation and experiment presets for the disc task.

mod compare;
mod eval;
mod train;
#[cfg(test)]
mod tests;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::discworld::Dataset;
use crate::error::{Error, Result};
use crate::filters::{particle_belief_summary, FilterBelief, FilterConfig, FilterKind, PfBelief, PfUpdate};
use crate::gaussian::{self, CovMode, GaussianBelief};
use crate::models::{ModelConfig, Models, NoiseKind, NoiseSpec, Observation, ProcessSpec};
use crate::nn::{Bound, ParamStore};
use crate::tensor::{self, Tensor};

pub use compare::{compare, ComparisonTable};
pub use eval::{evaluate, gaussian_step_metrics, pearson, EvalConfig, EvalReport, TraceRow};
pub use train::{
    chunks, clip_gradients, log_csv, pretrain_sensor, timing_csv, train, validation_loss, LogRow, PretrainConfig, TrainConfig, TrainOutcome,
};

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LossKind {
    Mse,
    Nll,
    /// `0.5·(MSE + NLL)`.
    Mix,
}

/// Mean over steps of the squared distance between belief means and labels.
pub fn loss_mse<'t>(means: &[Var<'t>], labels: &[Var<'t>]) -> Result<Var<'t>> {
    check_steps(means.len(), labels.len())?;
    let mut terms = Vec::with_capacity(means.len());
    for (m, x) in means.iter().zip(labels) {
        terms.push(x.sub(m)?.square().sum());
    }
    average(&terms)
}

/// NLL of one label under a filter belief, without the 2π constant. Particle
/// beliefs are scored as a fitted Gaussian or as a mixture per `config`.
pub fn belief_nll<'t>(bel: &FilterBelief<'t>, label: &Var<'t>, config: &FilterConfig) -> Result<Var<'t>> {
    match bel {
        FilterBelief::Gaussian(b) => gaussian::gaussian_nll(label, b),
        FilterBelief::Particles(p) => particle_belief_summary(p, config.pf_belief, config.gmm_sigma, config.eps)?.nll(label),
    }
}

/// Mean over steps of [`belief_nll`].
pub fn loss_nll<'t>(beliefs: &[FilterBelief<'t>], labels: &[Var<'t>], config: &FilterConfig) -> Result<Var<'t>> {
    check_steps(beliefs.len(), labels.len())?;
    let mut terms = Vec::with_capacity(beliefs.len());
    for (b, x) in beliefs.iter().zip(labels) {
        terms.push(belief_nll(b, x, config)?);
    }
    average(&terms)
}

pub fn sequence_loss<'t>(
    kind: LossKind,
    beliefs: &[FilterBelief<'t>],
    labels: &[Var<'t>],
    config: &FilterConfig,
) -> Result<Var<'t>> {
    let mse = || {
        let means = beliefs.iter().map(|b| b.mean()).collect::<Result<Vec<_>>>()?;
        loss_mse(&means, labels)
    };
    match kind {
        LossKind::Mse => mse(),
        LossKind::Nll => loss_nll(beliefs, labels, config),
        LossKind::Mix => mse()?.add(&loss_nll(beliefs, labels, config)?).map(|l| l.scale(0.5)),
    }
}

fn check_steps(a: usize, b: usize) -> Result<()> {
    if a == 0 || a != b {
        return Err(Error::Shape(format!("{a} beliefs for {b} labels")));
    }
    Ok(())
}

fn average<'t>(terms: &[Var<'t>]) -> Result<Var<'t>> {
    let mut total = terms[0].clone();
    for t in &terms[1..] {
        total = total.add(t)?;
    }
    Ok(total.scale(1.0 / terms.len() as f64))
}

/// Initial belief centred on `x0` plus a draw from `N(0, Σ_init)`, with
/// covariance `Σ_init`. A zero `Σ_init` leaves the mean at `x0`.
pub fn perturb_initial_state(x0: &Tensor, sigma_init: &Tensor, rng: &mut impl Rng) -> Result<GaussianBelief> {
    let n = x0.len();
    if sigma_init.shape() != [n, n] {
        return Err(Error::Shape(format!("Σ_init {:?} for a {n}-dimensional state", sigma_init.shape())));
    }
    if sigma_init.max_abs() == 0.0 {
        return Ok(GaussianBelief {
            mean: x0.clone(),
            cov: sigma_init.clone(),
        });
    }
    let l = tensor::cholesky(sigma_init)?;
    let e = gaussian::standard_normal(n, 1, rng);
    let mean = x0.zip_map(&l.matmul(&e).reshaped(&[n])?, |a, b| a + b);
    Ok(GaussianBelief {
        mean,
        cov: sigma_init.clone(),
    })
}

/// A deterministic RNG for a tuple of indices.
pub fn seeded_rng(parts: &[u64]) -> ChaCha8Rng {
    let mut h: u64 = 0x243F_6A88_85A3_08D3;
    for &p in parts {
        h ^= p.wrapping_add(0x9E37_79B9_7F4A_7C15).wrapping_add(h << 6).wrapping_add(h >> 2);
        h = h.wrapping_mul(0xBF58_476D_1CE4_E5B9);
        h ^= h >> 31;
    }
    ChaCha8Rng::seed_from_u64(h)
}

/// Filter variants selectable by name.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FilterChoice {
    Ekf,
    Ukf,
    Mcukf,
    PfG,
    PfM,
    PfGLrn,
    PfMLrn,
}

impl FilterChoice {
    pub const ALL: [FilterChoice; 7] = [
        FilterChoice::Ekf,
        FilterChoice::Ukf,
        FilterChoice::Mcukf,
        FilterChoice::PfG,
        FilterChoice::PfM,
        FilterChoice::PfGLrn,
        FilterChoice::PfMLrn,
    ];

    pub fn name(self) -> &'static str {
        match self {
            FilterChoice::Ekf => "ekf",
            FilterChoice::Ukf => "ukf",
            FilterChoice::Mcukf => "mcukf",
            FilterChoice::PfG => "pf-g",
            FilterChoice::PfM => "pf-m",
            FilterChoice::PfGLrn => "pf-g-lrn",
            FilterChoice::PfMLrn => "pf-m-lrn",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        Self::ALL.into_iter().find(|c| c.name() == s)
    }

    pub fn is_particle(self) -> bool {
        matches!(self, FilterChoice::PfG | FilterChoice::PfM | FilterChoice::PfGLrn | FilterChoice::PfMLrn)
    }

    pub fn learned_likelihood(self) -> bool {
        matches!(self, FilterChoice::PfGLrn | FilterChoice::PfMLrn)
    }

    pub fn filter_config(self) -> FilterConfig {
        let kind = match self {
            FilterChoice::Ekf => FilterKind::Ekf,
            FilterChoice::Ukf => FilterKind::Ukf,
            FilterChoice::Mcukf => FilterKind::Mcukf,
            _ => FilterKind::Pf,
        };
        let mut c = FilterConfig::new(kind);
        c.pf_belief = match self {
            FilterChoice::PfG | FilterChoice::PfGLrn => PfBelief::Gaussian,
            _ => PfBelief::Mixture,
        };
        if self.learned_likelihood() {
            c.pf_update = PfUpdate::Learned;
        }
        c
    }
}

/// Which noise models are learned and how.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NoiseChoice {
    pub hetero_q: bool,
    pub hetero_r: bool,
    pub full_cov: bool,
}

impl NoiseChoice {
    fn spec(&self, hetero: bool, init: Tensor) -> NoiseSpec {
        let kind = if hetero { NoiseKind::Heteroscedastic } else { NoiseKind::Constant };
        let mode = if self.full_cov { CovMode::Full } else { CovMode::Diagonal };
        NoiseSpec::new(kind, mode, init)
    }
}

/// Pretrained sensor and analytic process; only the noise models learn,
/// starting from `Q = I` and `R = 100·I`.
pub fn noise_only_config(image_size: usize, noise: NoiseChoice) -> ModelConfig {
    let mut c = ModelConfig::disc(image_size);
    c.process = ProcessSpec::Analytic;
    c.process_noise = noise.spec(noise.hetero_q, Tensor::eye(4));
    c.obs_noise = noise.spec(noise.hetero_r, Tensor::eye(2).scale(100.0));
    c
}

/// Every model learns, with a learned process and `Q = 100·I`, `R = 900·I`.
pub fn from_scratch_config(image_size: usize, noise: NoiseChoice) -> ModelConfig {
    let mut c = ModelConfig::disc(image_size);
    c.process = ProcessSpec::Learned;
    c.process_noise = noise.spec(noise.hetero_q, Tensor::eye(4).scale(100.0));
    c.obs_noise = noise.spec(noise.hetero_r, Tensor::eye(2).scale(900.0));
    c
}

/// Sequence lengths of the chunk-length sweep.
pub const SEQ_LEN_SWEEP: [usize; 6] = [1, 2, 5, 10, 25, 50];

/// Steps per batch held constant across chunk lengths (32 chunks of 10).
pub const STEPS_PER_BATCH: usize = 320;

/// Default batch size for chunks of `k` steps.
pub fn batch_for_seq_len(k: usize) -> usize {
    (STEPS_PER_BATCH / k.max(1)).max(1)
}

/// Observations for one split: images, or sensor encodings computed once
/// when the sensor trunk is frozen.
pub struct Prepared<'d> {
    pub dataset: &'d Dataset,
    encodings: Option<Vec<Vec<Tensor>>>,
}

/// True when no parameter of the sensor trunk is trainable.
pub fn sensor_trunk_frozen(store: &ParamStore) -> bool {
    store
        .specs()
        .iter()
        .filter(|s| s.name.starts_with("sensor.conv") || s.name.starts_with("sensor.fc"))
        .all(|s| !s.trainable)
}

impl<'d> Prepared<'d> {
    pub fn new(models: &Models, store: &ParamStore, dataset: &'d Dataset) -> Result<Self> {
        let sensor = models.sensor()?;
        if sensor.image_size != dataset.image_size() {
            return Err(Error::Data(format!(
                "models expect {0}×{0} images but the dataset has {1}×{1}",
                sensor.image_size,
                dataset.image_size()
            )));
        }
        let encodings = if sensor_trunk_frozen(store) {
            Some(encode_dataset(models, store, dataset)?)
        } else {
            None
        };
        Ok(Self { dataset, encodings })
    }

    /// Always computes the sensor on the tape.
    pub fn images(dataset: &'d Dataset) -> Self {
        Self { dataset, encodings: None }
    }

    pub fn is_encoded(&self) -> bool {
        self.encodings.is_some()
    }

    /// Observation for image `t` of sequence `seq`.
    pub fn observe<'t>(&self, models: &Models, p: &Bound<'t>, seq: usize, t: usize) -> Result<Observation<'t>> {
        let tape = p.tape();
        match &self.encodings {
            Some(enc) => models.observe(p, &tape.constant(enc[seq][t].clone())),
            None => {
                let img = self.dataset.sequences[seq].image_tensor(t, self.dataset.image_size());
                models.observe_image(p, &tape.constant(img))
            }
        }
    }
}

/// Sensor encodings of every image, sequence by sequence.
pub fn encode_dataset(models: &Models, store: &ParamStore, dataset: &Dataset) -> Result<Vec<Vec<Tensor>>> {
    let sensor = models.sensor()?;
    let size = dataset.image_size();
    dataset
        .sequences
        .par_iter()
        .map(|seq| {
            (0..seq.steps())
                .map(|t| {
                    let tape = Tape::new();
                    let p = store.bind(&tape);
                    let img = tape.constant(seq.image_tensor(t, size));
                    Ok(sensor.encode(&p, &img)?.value().clone())
                })
                .collect()
        })
        .collect()
}

/// Writes a checkpoint that records the model configuration next to the
/// parameters, plus any `extra` fields, so it can be rebuilt on its own.
pub fn save_models(
    dir: &std::path::Path,
    models: &Models,
    store: &ParamStore,
    seed: u64,
    step: u64,
    extra: serde_json::Value,
) -> Result<()> {
    let mut model = serde_json::json!({ "config": models.config });
    if let (Some(m), serde_json::Value::Object(e)) = (model.as_object_mut(), extra) {
        m.extend(e);
    }
    crate::nn::save_checkpoint(dir, store, seed, step, model)
}

/// Loads a checkpoint written by [`save_models`] and rebuilds its models.
pub fn load_models(dir: &std::path::Path) -> Result<(Models, ParamStore, crate::nn::CheckpointManifest)> {
    if !dir.join("manifest.json").exists() {
        return Err(Error::Data(format!("no checkpoint at {}", dir.display())));
    }
    let (store, manifest) = crate::nn::load_checkpoint(dir)?;
    let config: ModelConfig = manifest
        .model
        .get("config")
        .cloned()
        .ok_or_else(|| Error::Data("checkpoint manifest has no model config".into()))
        .and_then(|c| serde_json::from_value(c).map_err(Error::from))?;
    let (models, fresh) = Models::build(&config, manifest.seed)?;
    let same = fresh.specs().len() == store.specs().len()
        && fresh
            .specs()
            .iter()
            .zip(store.specs())
            .all(|(a, b)| a.name == b.name && a.shape == b.shape);
    if !same {
        return Err(Error::Data("checkpoint parameters do not match its model config".into()));
    }
    Ok((models, store, manifest))
}
