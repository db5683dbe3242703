//! Learnable components plugged into the filters: the image sensor, process
//! models, noise models and the particle filter's learned likelihood.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::Var;
use crate::error::{Error, Result};
use crate::gaussian::{materialize_cov_mean, upper_entries, CovMode, DEFAULT_EPS};
use crate::nn::{Activation, Bound, ConvLayer, DenseLayer, ParamId, ParamStore};
use crate::tensor::{self, Tensor};

/// Attraction towards the origin in the disc dynamics.
pub const DISC_PULL: f64 = 0.05;
/// Quadratic drag in the disc dynamics.
pub const DISC_DRAG: f64 = 0.0075;

/// Noiseless disc dynamics on a single state `(p, v)`.
pub fn disc_process_analytic(x: &[f64; 4]) -> [f64; 4] {
    let [px, py, vx, vy] = *x;
    let step = |p: f64, v: f64| v - DISC_PULL * p - DISC_DRAG * v * v.abs();
    [px + vx, py + vy, step(px, vx), step(py, vy)]
}

/// Selection matrix picking the first `obs_dim` state components.
pub fn selection_matrix(obs_dim: usize, state_dim: usize) -> Tensor {
    let mut h = Tensor::zeros(&[obs_dim, state_dim]);
    for i in 0..obs_dim.min(state_dim) {
        h.set(i, i, 1.0);
    }
    h
}

/// Applies `H` to a state vector `[n]` or a set of states `[N, n]`.
pub fn observation_model_h<'t>(h: &Var<'t>, x: &Var<'t>) -> Result<Var<'t>> {
    if x.shape().len() == 1 {
        h.matmul(x)
    } else {
        x.matmul(&h.t()?)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum NoiseKind {
    /// A fixed, non-learnable covariance.
    Fixed,
    Constant,
    Heteroscedastic,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct NoiseSpec {
    pub kind: NoiseKind,
    pub mode: CovMode,
    /// Covariance at initialization (exact for fixed noise).
    pub init: Tensor,
}

impl NoiseSpec {
    pub fn new(kind: NoiseKind, mode: CovMode, init: Tensor) -> Self {
        Self { kind, mode, init }
    }

    pub fn diagonal(kind: NoiseKind, mode: CovMode, diag: &[f64]) -> Self {
        Self::new(kind, mode, Tensor::diag(diag))
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum ProcessSpec {
    /// Disc dynamics with their fixed physical constants.
    Analytic,
    /// `x + Δx` with `Δx` from a residual network.
    Learned,
    /// `A·x` with a fixed matrix.
    Linear { a: Tensor },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub state_dim: usize,
    pub obs_dim: usize,
    /// Side length of input images; 0 means observations are supplied
    /// directly and no sensor network is built.
    pub image_size: usize,
    pub process: ProcessSpec,
    pub process_noise: NoiseSpec,
    pub obs_noise: NoiseSpec,
    pub learned_likelihood: bool,
    pub eps: f64,
    /// Multiplies states before they enter a network.
    pub state_scale: f64,
    /// Multiplies the raw output of the sensor's z head.
    pub z_scale: f64,
}

impl ModelConfig {
    /// Disc tracking with images of `image_size` pixels.
    pub fn disc(image_size: usize) -> Self {
        Self {
            state_dim: 4,
            obs_dim: 2,
            image_size,
            process: ProcessSpec::Analytic,
            process_noise: NoiseSpec::diagonal(NoiseKind::Constant, CovMode::Diagonal, &[100.0; 4]),
            obs_noise: NoiseSpec::diagonal(NoiseKind::Constant, CovMode::Diagonal, &[900.0; 2]),
            learned_likelihood: false,
            eps: DEFAULT_EPS,
            state_scale: 0.02,
            z_scale: 50.0,
        }
    }

    /// Linear-Gaussian system without a sensor; all noise is fixed.
    pub fn linear(a: Tensor, q: Tensor, obs_dim: usize, r: Tensor) -> Self {
        let n = a.rows();
        Self {
            state_dim: n,
            obs_dim,
            image_size: 0,
            process: ProcessSpec::Linear { a },
            process_noise: NoiseSpec::new(NoiseKind::Fixed, CovMode::Full, q),
            obs_noise: NoiseSpec::new(NoiseKind::Fixed, CovMode::Full, r),
            learned_likelihood: false,
            eps: DEFAULT_EPS,
            state_scale: 1.0,
            z_scale: 1.0,
        }
    }
}

/// Image encoder and position head.
#[derive(Clone, Debug)]
pub struct SensorNet {
    pub conv1: ConvLayer,
    pub conv2: ConvLayer,
    pub fc1: DenseLayer,
    pub fc2: DenseLayer,
    pub z_head: DenseLayer,
    pub image_size: usize,
    pub z_scale: f64,
}

/// Width of the sensor encoding fed to the heads.
pub const ENCODING_DIM: usize = 32;

impl SensorNet {
    fn new(store: &mut ParamStore, image_size: usize, obs_dim: usize, z_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let conv1 = ConvLayer::new(store, "sensor.conv1", 9, 3, 4, 2, Activation::Relu, rng);
        let conv2 = ConvLayer::new(store, "sensor.conv2", 9, 4, 8, 2, Activation::Relu, rng);
        let side = conv2.output_size(conv1.output_size(image_size));
        let fc1 = DenseLayer::new(store, "sensor.fc1", side * side * 8, 16, Activation::Relu, rng);
        let fc2 = DenseLayer::new(store, "sensor.fc2", 16, ENCODING_DIM, Activation::Relu, rng);
        let z_head = DenseLayer::new(store, "sensor.z", ENCODING_DIM, obs_dim, Activation::None, rng);
        Self {
            conv1,
            conv2,
            fc1,
            fc2,
            z_head,
            image_size,
            z_scale,
        }
    }

    /// The fc 2 encoding of an `H×W×3` image with values in [0, 1].
    pub fn encode<'t>(&self, p: &Bound<'t>, image: &Var<'t>) -> Result<Var<'t>> {
        let s = self.image_size;
        if image.shape() != [s, s, 3] {
            return Err(Error::Shape(format!(
                "sensor expects a {s}×{s}×3 image, got {:?}",
                image.shape()
            )));
        }
        let h = self.conv2.forward(p, &self.conv1.forward(p, image)?)?;
        let h = h.reshape(&[h.value().len()])?;
        self.fc2.forward(p, &self.fc1.forward(p, &h)?)
    }

    /// Predicted observable components from an encoding.
    pub fn z<'t>(&self, p: &Bound<'t>, encoding: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.z_head.forward(p, encoding)?.scale(self.z_scale))
    }
}

/// Residual dense network: hidden 32/64/64, zero-initialized output.
#[derive(Clone, Debug)]
pub struct ProcessNet {
    pub layers: Vec<DenseLayer>,
    pub out: DenseLayer,
    pub input_scale: f64,
}

impl ProcessNet {
    fn new(store: &mut ParamStore, n: usize, input_scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let layers = vec![
            DenseLayer::new(store, "process.fc1", n, 32, Activation::Relu, rng),
            DenseLayer::new(store, "process.fc2", 32, 64, Activation::Relu, rng),
            DenseLayer::new(store, "process.fc3", 64, 64, Activation::Relu, rng),
        ];
        let out = DenseLayer::zeroed(store, "process.delta", 64, n);
        Self { layers, out, input_scale }
    }

    pub fn delta<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let mut h = x.scale(self.input_scale);
        for l in &self.layers {
            h = l.forward(p, &h)?;
        }
        self.out.forward(p, &h)
    }

    /// `I + ∂Δ/∂x` at a single state, built from taped weights so that it
    /// stays differentiable with respect to them.
    pub fn jacobian<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let n = x.value().len();
        let mut h = x.scale(self.input_scale);
        let mut acc: Option<Var<'t>> = None;
        for l in &self.layers {
            h = l.forward(p, &h)?;
            // relu'(a) as a constant 0/1 column scaling the rows of W.
            let mask = h.sign().reshape(&[l.outputs, 1])?;
            let local = mask.mul(p.var(l.weight))?;
            acc = Some(match acc {
                None => local,
                Some(a) => local.matmul(&a)?,
            });
        }
        let inner = acc.ok_or_else(|| Error::Config("process net without hidden layers".into()))?;
        let d = p.var(self.out.weight).matmul(&inner)?.scale(self.input_scale);
        d.add(&x.tape().constant(Tensor::eye(n)))
    }
}

#[derive(Clone, Debug)]
pub enum ProcessModel {
    Analytic,
    Learned(ProcessNet),
    Linear(Tensor),
}

impl ProcessModel {
    /// Next-state mean for a state `[n]` or a set of states `[N, n]`.
    pub fn forward<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        match self {
            ProcessModel::Analytic => disc_process_taped(x),
            ProcessModel::Learned(net) => x.add(&net.delta(p, x)?),
            ProcessModel::Linear(a) => observation_model_h(&x.tape().constant(a.clone()), x),
        }
    }

    /// `∂f/∂x` at a single state.
    pub fn jacobian<'t>(&self, p: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let tape = x.tape();
        match self {
            ProcessModel::Analytic => {
                if x.shape() != [4] {
                    return Err(Error::Shape(format!("disc dynamics need a 4-state, got {:?}", x.shape())));
                }
                let base = Tensor::from_rows(&[
                    vec![1.0, 0.0, 1.0, 0.0],
                    vec![0.0, 1.0, 0.0, 1.0],
                    vec![-DISC_PULL, 0.0, 1.0, 0.0],
                    vec![0.0, -DISC_PULL, 0.0, 1.0],
                ])?;
                let v = x.slice(0, 2, 2)?;
                let speed = v.mul(&v.sign())?;
                let drag = speed.scale(-2.0 * DISC_DRAG).scatter_last(&[10, 15], 16)?.reshape(&[4, 4])?;
                drag.add(&tape.constant(base))
            }
            ProcessModel::Learned(net) => net.jacobian(p, x),
            ProcessModel::Linear(a) => Ok(tape.constant(a.clone())),
        }
    }
}

/// Disc dynamics on taped states `[4]` or `[N, 4]`.
pub fn disc_process_taped<'t>(x: &Var<'t>) -> Result<Var<'t>> {
    let axis = x.shape().len().saturating_sub(1);
    if x.shape().last() != Some(&4) {
        return Err(Error::Shape(format!("disc dynamics need 4-states, got {:?}", x.shape())));
    }
    let p = x.slice(axis, 0, 2)?;
    let v = x.slice(axis, 2, 2)?;
    let drag = v.mul(&v.mul(&v.sign())?)?.scale(DISC_DRAG);
    let v_next = v.sub(&p.scale(DISC_PULL))?.sub(&drag)?;
    Var::concat(&[p.add(&v)?, v_next], axis)
}

/// A covariance that is fixed, a learned constant, or predicted per input.
#[derive(Clone, Debug)]
pub enum NoiseModel {
    Fixed(Tensor),
    Constant {
        raw: ParamId,
        bias: ParamId,
        mode: CovMode,
        scale: f64,
        eps: f64,
    },
    Heteroscedastic {
        layers: Vec<DenseLayer>,
        out: DenseLayer,
        bias: ParamId,
        mode: CovMode,
        scale: f64,
        input_scale: f64,
        eps: f64,
    },
}

/// Upper-triangular `U` with `U·Uᵀ = a`.
fn upper_factor(a: &Tensor) -> Result<Tensor> {
    let n = a.rows();
    let flip = |m: &Tensor| {
        let mut out = Tensor::zeros(&[n, n]);
        for i in 0..n {
            for j in 0..n {
                out.set(i, j, m.at(n - 1 - i, n - 1 - j));
            }
        }
        out
    };
    Ok(flip(&tensor::cholesky(&flip(a))?))
}

/// Raw entries and diagonal bias reproducing `target` under
/// `materialize_cov`, all divided by `scale`.
fn noise_init(target: &Tensor, mode: CovMode, eps: f64, scale: f64) -> Result<(Tensor, Tensor)> {
    let n = target.rows();
    let shifted = target.zip_map(&Tensor::eye(n), |t, i| t - eps * i);
    match mode {
        CovMode::Diagonal => {
            let d = shifted.diagonal();
            if d.iter().any(|&x| x <= 0.0) {
                return Err(Error::Config(format!("noise target diagonal must exceed eps = {eps}")));
            }
            Ok((
                Tensor::zeros(&[n]),
                Tensor::vector(&d.iter().map(|x| x.sqrt() / scale).collect::<Vec<_>>()),
            ))
        }
        CovMode::Full => {
            let u = upper_factor(&shifted).map_err(|_| {
                Error::Config(format!("noise target minus eps = {eps} must be positive definite"))
            })?;
            let raw = upper_entries(n)
                .into_iter()
                .map(|(i, j)| if i == j { 0.0 } else { u.at(i, j) / scale })
                .collect::<Vec<_>>();
            let bias = (0..n).map(|i| u.at(i, i) / scale).collect::<Vec<_>>();
            Ok((Tensor::vector(&raw), Tensor::vector(&bias)))
        }
    }
}

impl NoiseModel {
    fn new(
        store: &mut ParamStore,
        name: &str,
        spec: &NoiseSpec,
        input_dim: usize,
        hidden: &[usize],
        input_scale: f64,
        eps: f64,
        rng: &mut ChaCha8Rng,
    ) -> Result<Self> {
        let n = spec.init.rows();
        if spec.init.shape() != [n, n] {
            return Err(Error::Shape(format!("noise init must be square, got {:?}", spec.init.shape())));
        }
        let scale = spec.init.diagonal().iter().cloned().fold(0.0, f64::max).sqrt().max(1e-6);
        match spec.kind {
            NoiseKind::Fixed => {
                tensor::cholesky(&spec.init)
                    .map_err(|_| Error::Config(format!("{name} covariance must be positive definite")))?;
                Ok(NoiseModel::Fixed(spec.init.symmetrized()))
            }
            NoiseKind::Constant => {
                let (raw, bias) = noise_init(&spec.init, spec.mode, eps, scale)?;
                Ok(NoiseModel::Constant {
                    raw: store.add(format!("{name}.raw"), raw, true),
                    bias: store.add(format!("{name}.bias"), bias, true),
                    mode: spec.mode,
                    scale,
                    eps,
                })
            }
            NoiseKind::Heteroscedastic => {
                let (raw, bias) = noise_init(&spec.init, spec.mode, eps, scale)?;
                let mut layers = Vec::new();
                let mut width = input_dim;
                for (i, &h) in hidden.iter().enumerate() {
                    layers.push(DenseLayer::new(store, &format!("{name}.fc{}", i + 1), width, h, Activation::Relu, rng));
                    width = h;
                }
                let out = DenseLayer::zeroed(store, &format!("{name}.out"), width, raw.len());
                // Off-diagonal initial entries go into the output bias.
                store.set(out.bias, raw)?;
                Ok(NoiseModel::Heteroscedastic {
                    layers,
                    out,
                    bias: store.add(format!("{name}.bias"), bias, true),
                    mode: spec.mode,
                    scale,
                    input_scale,
                    eps,
                })
            }
        }
    }

    pub fn is_heteroscedastic(&self) -> bool {
        matches!(self, NoiseModel::Heteroscedastic { .. })
    }

    /// Covariance for one input `[d]`, or the `weights`-weighted mean over a
    /// set of inputs `[N, d]`.
    pub fn cov<'t>(&self, p: &Bound<'t>, input: &Var<'t>, weights: Option<&Var<'t>>) -> Result<Var<'t>> {
        let tape = input.tape();
        match self {
            NoiseModel::Fixed(q) => Ok(tape.constant(q.clone())),
            NoiseModel::Constant { raw, bias, mode, scale, eps } => {
                let r = p.var(*raw).scale(*scale);
                let k = r.value().len();
                let one = tape.constant(Tensor::ones(&[1]));
                materialize_cov_mean(&r.reshape(&[1, k])?, &p.var(*bias).scale(*scale), &one, *mode, *eps)
            }
            NoiseModel::Heteroscedastic {
                layers,
                out,
                bias,
                mode,
                scale,
                input_scale,
                eps,
            } => {
                let batch = if input.shape().len() == 1 {
                    input.reshape(&[1, input.value().len()])?
                } else {
                    input.clone()
                };
                let rows = batch.shape()[0];
                let w = match weights {
                    Some(w) if input.shape().len() == 2 => w.clone(),
                    None if rows == 1 => tape.constant(Tensor::ones(&[1])),
                    None => tape.constant(Tensor::full(&[rows], 1.0 / rows as f64)),
                    Some(_) => return Err(Error::Shape("weights given for a single noise input".into())),
                };
                let mut h = batch.scale(*input_scale);
                for l in layers {
                    h = l.forward(p, &h)?;
                }
                let raw = out.forward(p, &h)?.scale(*scale);
                materialize_cov_mean(&raw, &p.var(*bias).scale(*scale), &w, *mode, *eps)
            }
        }
    }
}

/// Per-particle observation likelihood from the sensor encoding and the
/// particle's observable components.
#[derive(Clone, Debug)]
pub struct LikelihoodNet {
    pub layers: Vec<DenseLayer>,
    pub out: DenseLayer,
}

impl LikelihoodNet {
    fn new(store: &mut ParamStore, obs_dim: usize, rng: &mut ChaCha8Rng) -> Self {
        let layers = vec![
            DenseLayer::new(store, "likelihood.fc1", ENCODING_DIM + obs_dim, 128, Activation::Relu, rng),
            DenseLayer::new(store, "likelihood.fc2", 128, 64, Activation::Relu, rng),
        ];
        let out = DenseLayer::zeroed(store, "likelihood.out", 64, 1);
        Self { layers, out }
    }

    /// Log-likelihood per particle, `[N]`, for observable components `[N, m]`.
    pub fn log_likelihood<'t>(&self, p: &Bound<'t>, encoding: &Var<'t>, observed: &Var<'t>) -> Result<Var<'t>> {
        let count = observed.shape()[0];
        let enc = encoding
            .reshape(&[1, ENCODING_DIM])?
            .gather_rows(&vec![0; count])?;
        let mut h = Var::concat(&[enc, observed.clone()], 1)?;
        for l in &self.layers {
            h = l.forward(p, &h)?;
        }
        self.out.forward(p, &h)?.reshape(&[count])
    }

    /// Strictly positive likelihood per particle.
    pub fn forward<'t>(&self, p: &Bound<'t>, encoding: &Var<'t>, observed: &Var<'t>) -> Result<Var<'t>> {
        Ok(self.log_likelihood(p, encoding, observed)?.exp())
    }
}

/// What the filters consume at each step.
#[derive(Clone)]
pub struct Observation<'t> {
    pub z: Var<'t>,
    pub r: Var<'t>,
    pub encoding: Option<Var<'t>>,
}

/// Every model used by a filter, with parameter handles into one store.
#[derive(Clone, Debug)]
pub struct Models {
    pub config: ModelConfig,
    pub sensor: Option<SensorNet>,
    pub process: ProcessModel,
    pub process_noise: NoiseModel,
    pub obs_noise: NoiseModel,
    pub likelihood: Option<LikelihoodNet>,
    pub h: Tensor,
}

impl Models {
    /// Builds the models and a freshly initialized parameter store; the
    /// result depends only on `config` and `seed`.
    pub fn build(config: &ModelConfig, seed: u64) -> Result<(Self, ParamStore)> {
        let (n, m) = (config.state_dim, config.obs_dim);
        if n == 0 || m == 0 || m > n {
            return Err(Error::Config(format!("state dimension {n} with observation dimension {m}")));
        }
        if config.eps < 0.0 {
            return Err(Error::Config("eps must be non-negative".into()));
        }
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut store = ParamStore::new();
        let sensor = if config.image_size > 0 {
            if config.image_size < 16 {
                return Err(Error::Config(format!("image size {} is below 16", config.image_size)));
            }
            Some(SensorNet::new(&mut store, config.image_size, m, config.z_scale, &mut rng))
        } else {
            None
        };
        let process = match &config.process {
            ProcessSpec::Analytic if n != 4 => {
                return Err(Error::Config("analytic disc dynamics need a 4-dimensional state".into()))
            }
            ProcessSpec::Analytic => ProcessModel::Analytic,
            ProcessSpec::Learned => ProcessModel::Learned(ProcessNet::new(&mut store, n, config.state_scale, &mut rng)),
            ProcessSpec::Linear { a } => {
                if a.shape() != [n, n] {
                    return Err(Error::Shape(format!("process matrix {:?} for state dimension {n}", a.shape())));
                }
                ProcessModel::Linear(a.clone())
            }
        };
        if config.process_noise.init.shape() != [n, n] || config.obs_noise.init.shape() != [m, m] {
            return Err(Error::Shape("noise initial covariance has the wrong size".into()));
        }
        let process_noise = NoiseModel::new(
            &mut store,
            "q",
            &config.process_noise,
            n,
            &[32, 32],
            config.state_scale,
            config.eps,
            &mut rng,
        )?;
        if config.obs_noise.kind == NoiseKind::Heteroscedastic && sensor.is_none() {
            return Err(Error::Config("heteroscedastic observation noise needs a sensor".into()));
        }
        let obs_noise = NoiseModel::new(&mut store, "r", &config.obs_noise, ENCODING_DIM, &[], 1.0, config.eps, &mut rng)?;
        let likelihood = if config.learned_likelihood {
            if sensor.is_none() {
                return Err(Error::Config("a learned likelihood needs a sensor".into()));
            }
            Some(LikelihoodNet::new(&mut store, m, &mut rng))
        } else {
            None
        };
        let models = Self {
            config: config.clone(),
            sensor,
            process,
            process_noise,
            obs_noise,
            likelihood,
            h: selection_matrix(m, n),
        };
        Ok((models, store))
    }

    pub fn sensor(&self) -> Result<&SensorNet> {
        self.sensor
            .as_ref()
            .ok_or_else(|| Error::Config("these models have no sensor".into()))
    }

    /// z, R and the encoding for an encoded image.
    pub fn observe<'t>(&self, p: &Bound<'t>, encoding: &Var<'t>) -> Result<Observation<'t>> {
        let z = self.sensor()?.z(p, encoding)?;
        let r = self.obs_noise.cov(p, encoding, None)?;
        Ok(Observation {
            z,
            r,
            encoding: Some(encoding.clone()),
        })
    }

    /// Observation from an `H×W×3` image in [0, 1].
    pub fn observe_image<'t>(&self, p: &Bound<'t>, image: &Var<'t>) -> Result<Observation<'t>> {
        let enc = self.sensor()?.encode(p, image)?;
        self.observe(p, &enc)
    }

    /// Observation given directly (no sensor); R comes from the observation
    /// noise model evaluated on `z`.
    pub fn observe_direct<'t>(&self, p: &Bound<'t>, z: &Tensor) -> Result<Observation<'t>> {
        if self.obs_noise.is_heteroscedastic() {
            return Err(Error::Config("heteroscedastic observation noise needs an encoding".into()));
        }
        let z = p.tape().constant(z.clone());
        let r = self.obs_noise.cov(p, &z, None)?;
        Ok(Observation { z, r, encoding: None })
    }
}
