//! Parameter storage, dense and convolutional layers, Adam, and checkpoints.

use std::fs;
use std::io::{Read, Write};
use std::path::Path;

use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Gradients, Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct ParamId(pub usize);

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParamSpec {
    pub name: String,
    pub shape: Vec<usize>,
    pub trainable: bool,
}

/// Named parameter tensors in declaration order.
#[derive(Clone, Debug, Default)]
pub struct ParamStore {
    specs: Vec<ParamSpec>,
    values: Vec<Tensor>,
}

impl ParamStore {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn add(&mut self, name: impl Into<String>, value: Tensor, trainable: bool) -> ParamId {
        self.specs.push(ParamSpec {
            name: name.into(),
            shape: value.shape().to_vec(),
            trainable,
        });
        self.values.push(value);
        ParamId(self.values.len() - 1)
    }

    pub fn len(&self) -> usize {
        self.values.len()
    }

    pub fn is_empty(&self) -> bool {
        self.values.is_empty()
    }

    pub fn get(&self, id: ParamId) -> &Tensor {
        &self.values[id.0]
    }

    pub fn set(&mut self, id: ParamId, value: Tensor) -> Result<()> {
        if value.shape() != self.values[id.0].shape() {
            return Err(Error::Shape(format!(
                "parameter {} has shape {:?}, got {:?}",
                self.specs[id.0].name,
                self.values[id.0].shape(),
                value.shape()
            )));
        }
        self.values[id.0] = value;
        Ok(())
    }

    pub fn specs(&self) -> &[ParamSpec] {
        &self.specs
    }

    pub fn values(&self) -> &[Tensor] {
        &self.values
    }

    pub fn id_of(&self, name: &str) -> Option<ParamId> {
        self.specs.iter().position(|s| s.name == name).map(ParamId)
    }

    /// Marks every parameter whose name starts with `prefix`.
    pub fn set_trainable(&mut self, prefix: &str, trainable: bool) -> usize {
        let mut n = 0;
        for s in self.specs.iter_mut().filter(|s| s.name.starts_with(prefix)) {
            s.trainable = trainable;
            n += 1;
        }
        n
    }

    pub fn is_trainable(&self, id: ParamId) -> bool {
        self.specs[id.0].trainable
    }

    pub fn trainable_count(&self) -> usize {
        self.specs
            .iter()
            .filter(|s| s.trainable)
            .map(|s| s.shape.iter().product::<usize>())
            .sum()
    }

    /// Copies values for every parameter name present in `other`.
    pub fn copy_matching(&mut self, other: &ParamStore, prefix: &str) -> Result<usize> {
        let mut n = 0;
        for (spec, value) in other.specs.iter().zip(&other.values) {
            if !spec.name.starts_with(prefix) {
                continue;
            }
            if let Some(id) = self.id_of(&spec.name) {
                self.set(id, value.clone())?;
                n += 1;
            }
        }
        Ok(n)
    }

    /// Registers every parameter on `tape`; frozen ones become constants.
    pub fn bind<'t>(&self, tape: &'t Tape) -> Bound<'t> {
        let vars = self
            .specs
            .iter()
            .zip(&self.values)
            .map(|(s, v)| {
                if s.trainable {
                    tape.leaf(v.clone())
                } else {
                    tape.constant(v.clone())
                }
            })
            .collect();
        Bound { tape, vars }
    }
}

/// Parameters registered on one tape.
pub struct Bound<'t> {
    tape: &'t Tape,
    vars: Vec<Var<'t>>,
}

impl<'t> Bound<'t> {
    pub fn tape(&self) -> &'t Tape {
        self.tape
    }

    pub fn var(&self, id: ParamId) -> &Var<'t> {
        &self.vars[id.0]
    }

    /// Substitutes a parameter with another variable of the same shape.
    pub fn replace(&mut self, id: ParamId, var: Var<'t>) -> Result<()> {
        if var.shape() != self.vars[id.0].shape() {
            return Err(Error::Shape(format!(
                "replacement {:?} for parameter of shape {:?}",
                var.shape(),
                self.vars[id.0].shape()
            )));
        }
        self.vars[id.0] = var;
        Ok(())
    }

    /// Per-parameter gradients in declaration order (`None` where frozen or
    /// unreached).
    pub fn gradients(&self, grads: &Gradients) -> Vec<Option<Tensor>> {
        self.vars
            .iter()
            .map(|v| if v.requires_grad() { Some(grads.wrt(v)) } else { None })
            .collect()
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Activation {
    Relu,
    None,
}

impl Activation {
    fn apply<'t>(self, x: Var<'t>) -> Var<'t> {
        match self {
            Activation::Relu => x.relu(),
            Activation::None => x,
        }
    }
}

/// He-uniform weights: U(−√(6/fan_in), √(6/fan_in)), variance 2/fan_in.
pub fn he_uniform(shape: &[usize], fan_in: usize, rng: &mut impl Rng) -> Tensor {
    let bound = (6.0 / fan_in as f64).sqrt();
    let n: usize = shape.iter().product();
    Tensor::new(shape.to_vec(), (0..n).map(|_| rng.gen_range(-bound..bound)).collect())
        .expect("shape matches")
}

/// Fully connected layer: `activation(W·x + b)` with `W` of shape out×in.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct DenseLayer {
    pub weight: ParamId,
    pub bias: ParamId,
    pub inputs: usize,
    pub outputs: usize,
    pub activation: Activation,
}

impl DenseLayer {
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        inputs: usize,
        outputs: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let weight = store.add(format!("{name}.weight"), he_uniform(&[outputs, inputs], inputs, rng), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true);
        Self {
            weight,
            bias,
            inputs,
            outputs,
            activation,
        }
    }

    /// A layer whose weights and bias start at zero (output is exactly 0).
    pub fn zeroed(store: &mut ParamStore, name: &str, inputs: usize, outputs: usize) -> Self {
        let weight = store.add(format!("{name}.weight"), Tensor::zeros(&[outputs, inputs]), true);
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[outputs]), true);
        Self {
            weight,
            bias,
            inputs,
            outputs,
            activation: Activation::None,
        }
    }

    /// Applies the layer to a vector `[in]` or a batch of rows `[B, in]`.
    pub fn forward<'t>(&self, params: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        let last = *x.shape().last().unwrap_or(&0);
        if last != self.inputs || x.shape().len() > 2 {
            return Err(Error::Shape(format!(
                "dense layer expects last dimension {}, got {:?}",
                self.inputs,
                x.shape()
            )));
        }
        let w = params.var(self.weight);
        let b = params.var(self.bias);
        let y = if x.shape().len() == 1 {
            w.matmul(x)?
        } else {
            x.matmul(&w.t()?)?
        };
        Ok(self.activation.apply(y.add(b)?))
    }
}

/// Same-padded strided convolution over `H×W×C` images.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ConvLayer {
    pub kernel: ParamId,
    pub bias: ParamId,
    pub size: usize,
    pub in_channels: usize,
    pub out_channels: usize,
    pub stride: usize,
    pub activation: Activation,
}

impl ConvLayer {
    #[allow(clippy::too_many_arguments)]
    pub fn new(
        store: &mut ParamStore,
        name: &str,
        size: usize,
        in_channels: usize,
        out_channels: usize,
        stride: usize,
        activation: Activation,
        rng: &mut impl Rng,
    ) -> Self {
        let fan_in = size * size * in_channels;
        let kernel = store.add(
            format!("{name}.kernel"),
            he_uniform(&[size, size, in_channels, out_channels], fan_in, rng),
            true,
        );
        let bias = store.add(format!("{name}.bias"), Tensor::zeros(&[out_channels]), true);
        Self {
            kernel,
            bias,
            size,
            in_channels,
            out_channels,
            stride,
            activation,
        }
    }

    /// Spatial output size for an input of `input` pixels: ceil(input / stride).
    pub fn output_size(&self, input: usize) -> usize {
        input.div_ceil(self.stride)
    }

    pub fn forward<'t>(&self, params: &Bound<'t>, x: &Var<'t>) -> Result<Var<'t>> {
        if x.shape().len() != 3 || x.shape()[2] != self.in_channels {
            return Err(Error::Shape(format!(
                "conv layer expects H×W×{}, got {:?}",
                self.in_channels,
                x.shape()
            )));
        }
        let y = x.conv2d(params.var(self.kernel), self.stride)?;
        Ok(self.activation.apply(y.add(params.var(self.bias))?))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StepOutcome {
    Applied,
    /// A gradient contained NaN or infinity; parameters were left untouched.
    Skipped,
}

/// Adam with bias correction.
#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct Adam {
    pub lr: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
    pub step: u64,
    pub skipped: u64,
    m: Vec<Tensor>,
    v: Vec<Tensor>,
}

impl Adam {
    pub fn new(store: &ParamStore, lr: f64) -> Self {
        Self {
            lr,
            beta1: 0.9,
            beta2: 0.999,
            eps: 1e-8,
            step: 0,
            skipped: 0,
            m: store.values().iter().map(|v| Tensor::zeros(v.shape())).collect(),
            v: store.values().iter().map(|v| Tensor::zeros(v.shape())).collect(),
        }
    }

    /// Applies one update to every trainable parameter that has a gradient.
    pub fn update(&mut self, store: &mut ParamStore, grads: &[Option<Tensor>]) -> Result<StepOutcome> {
        if grads.len() != store.len() {
            return Err(Error::Shape(format!(
                "{} gradients for {} parameters",
                grads.len(),
                store.len()
            )));
        }
        for (i, g) in grads.iter().enumerate() {
            if let Some(g) = g {
                if g.shape() != store.values[i].shape() {
                    return Err(Error::Shape(format!(
                        "gradient for {} has shape {:?}, expected {:?}",
                        store.specs[i].name,
                        g.shape(),
                        store.values[i].shape()
                    )));
                }
                if !g.is_finite() {
                    self.skipped += 1;
                    return Ok(StepOutcome::Skipped);
                }
            }
        }
        self.step += 1;
        let t = self.step as i32;
        let c1 = 1.0 - self.beta1.powi(t);
        let c2 = 1.0 - self.beta2.powi(t);
        for (i, g) in grads.iter().enumerate() {
            let Some(g) = g else { continue };
            if !store.specs[i].trainable {
                continue;
            }
            let (m, v) = (&mut self.m[i], &mut self.v[i]);
            let p = &mut store.values[i];
            for (((pk, mk), vk), gk) in p
                .data_mut()
                .iter_mut()
                .zip(m.data_mut())
                .zip(v.data_mut())
                .zip(g.data())
            {
                *mk = self.beta1 * *mk + (1.0 - self.beta1) * gk;
                *vk = self.beta2 * *vk + (1.0 - self.beta2) * gk * gk;
                let mhat = *mk / c1;
                let vhat = *vk / c2;
                *pk -= self.lr * mhat / (vhat.sqrt() + self.eps);
            }
        }
        Ok(StepOutcome::Applied)
    }
}

/// Euclidean norm over all gradient entries.
pub fn grad_norm(grads: &[Option<Tensor>]) -> f64 {
    grads
        .iter()
        .flatten()
        .map(|g| g.data().iter().map(|x| x * x).sum::<f64>())
        .sum::<f64>()
        .sqrt()
}

pub const CHECKPOINT_VERSION: u32 = 1;

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct CheckpointManifest {
    pub version: u32,
    pub seed: u64,
    pub step: u64,
    pub params: Vec<ParamSpec>,
    /// Architecture and configuration needed to rebuild the models.
    #[serde(default)]
    pub model: serde_json::Value,
}

/// Writes `manifest.json` and `params.bin` (little-endian f32 per tensor, in
/// declaration order) into `dir`.
pub fn save_checkpoint(
    dir: &Path,
    store: &ParamStore,
    seed: u64,
    step: u64,
    model: serde_json::Value,
) -> Result<()> {
    fs::create_dir_all(dir)?;
    let manifest = CheckpointManifest {
        version: CHECKPOINT_VERSION,
        seed,
        step,
        params: store.specs.clone(),
        model,
    };
    fs::write(dir.join("manifest.json"), serde_json::to_vec_pretty(&manifest)?)?;
    let mut bytes = Vec::with_capacity(store.values.iter().map(Tensor::len).sum::<usize>() * 4);
    for v in &store.values {
        for x in v.data() {
            bytes.extend_from_slice(&(*x as f32).to_le_bytes());
        }
    }
    let mut f = fs::File::create(dir.join("params.bin"))?;
    f.write_all(&bytes)?;
    Ok(())
}

pub fn load_checkpoint(dir: &Path) -> Result<(ParamStore, CheckpointManifest)> {
    let manifest: CheckpointManifest = serde_json::from_slice(&fs::read(dir.join("manifest.json"))?)?;
    if manifest.version != CHECKPOINT_VERSION {
        return Err(Error::Data(format!("unsupported checkpoint version {}", manifest.version)));
    }
    let mut bytes = Vec::new();
    fs::File::open(dir.join("params.bin"))?.read_to_end(&mut bytes)?;
    let total: usize = manifest
        .params
        .iter()
        .map(|p| p.shape.iter().product::<usize>())
        .sum();
    if bytes.len() != total * 4 {
        return Err(Error::Data(format!(
            "params.bin holds {} bytes, manifest needs {}",
            bytes.len(),
            total * 4
        )));
    }
    let mut store = ParamStore::new();
    let mut offset = 0;
    for spec in &manifest.params {
        let n: usize = spec.shape.iter().product();
        let data = bytes[offset..offset + n * 4]
            .chunks_exact(4)
            .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
            .collect();
        offset += n * 4;
        store.add(spec.name.clone(), Tensor::new(spec.shape.clone(), data)?, spec.trainable);
    }
    Ok((store, manifest))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::autodiff::gradient_check;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    fn rng(seed: u64) -> ChaCha8Rng {
        ChaCha8Rng::seed_from_u64(seed)
    }

    #[test]
    fn dense_relu_clamps() {
        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, "fc", 2, 2, Activation::Relu, &mut rng(0));
        store.set(layer.weight, Tensor::eye(2)).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = layer.forward(&p, &tape.constant(Tensor::vector(&[-1.0, 2.0]))).unwrap();
        assert_eq!(y.value().data(), &[0.0, 2.0]);
    }

    #[test]
    fn dense_affine_value_and_batch() {
        let mut store = ParamStore::new();
        let layer = DenseLayer::new(&mut store, "fc", 1, 1, Activation::None, &mut rng(0));
        store.set(layer.weight, Tensor::new(vec![1, 1], vec![2.0]).unwrap()).unwrap();
        store.set(layer.bias, Tensor::vector(&[1.0])).unwrap();
        let tape = Tape::new();
        let p = store.bind(&tape);
        let y = layer.forward(&p, &tape.constant(Tensor::vector(&[3.0]))).unwrap();
        assert_eq!(y.value().data(), &[7.0]);
        let batch = tape.constant(Tensor::new(vec![2, 1], vec![3.0, -1.0]).unwrap());
        assert_eq!(layer.forward(&p, &batch).unwrap().value().data(), &[7.0, -1.0]);
        assert!(layer.forward(&p, &tape.constant(Tensor::zeros(&[2]))).is_err());
    }

    #[test]
    fn dense_gradient_check() {
        fn f<'t>(t: &'t Tape, x: &Var<'t>) -> Result<Var<'t>> {
            let mut store = ParamStore::new();
            let a = DenseLayer::new(&mut store, "a", 3, 5, Activation::Relu, &mut rng(4));
            let b = DenseLayer::new(&mut store, "b", 5, 2, Activation::None, &mut rng(5));
            store.set(a.bias, Tensor::vector(&[0.3, -0.2, 0.1, 0.05, 0.4])).unwrap();
            let p = store.bind(t);
            Ok(b.forward(&p, &a.forward(&p, x)?)?.square().sum())
        }
        let report = gradient_check(f, &Tensor::vector(&[0.5, -0.3, 0.9]), 1e-5, 1e-4).unwrap();
        assert!(report.pass, "{report:?}");
    }

    #[test]
    fn dense_weight_gradient_check() {
        fn f<'t>(t: &'t Tape, w: &Var<'t>) -> Result<Var<'t>> {
            let x = t.constant(Tensor::new(vec![2, 3], vec![0.1, 0.4, -0.3, 0.8, -0.5, 0.2]).unwrap());
            let y = x.matmul(&w.reshape(&[4, 3])?.t()?)?.relu();
            Ok(y.square().sum())
        }
        let w = he_uniform(&[12], 3, &mut rng(9));
        assert!(gradient_check(f, &w, 1e-5, 1e-4).unwrap().pass);
    }

    #[test]
    fn conv_output_shapes_match_reference_architecture() {
        let mut store = ParamStore::new();
        let mut r = rng(1);
        let c1 = ConvLayer::new(&mut store, "conv1", 9, 3, 4, 2, Activation::Relu, &mut r);
        let c2 = ConvLayer::new(&mut store, "conv2", 9, 4, 8, 2, Activation::Relu, &mut r);
        let tape = Tape::new();
        let p = store.bind(&tape);
        let img = tape.constant(Tensor::full(&[100, 100, 3], 0.5));
        let h1 = c1.forward(&p, &img).unwrap();
        assert_eq!(h1.shape(), &[50, 50, 4]);
        let h2 = c2.forward(&p, &h1).unwrap();
        assert_eq!(h2.shape(), &[25, 25, 8]);
        assert_eq!(c1.output_size(33), 17);
        assert!(c2.forward(&p, &img).is_err());
    }

    #[test]
    fn adam_zero_gradient_leaves_params() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(&[1.5, -2.0]), true);
        let mut adam = Adam::new(&store, 0.1);
        adam.update(&mut store, &[Some(Tensor::zeros(&[2]))]).unwrap();
        assert_eq!(store.get(id).data(), &[1.5, -2.0]);
    }

    #[test]
    fn adam_first_step_moves_by_learning_rate() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0), true);
        let mut adam = Adam::new(&store, 0.1);
        adam.update(&mut store, &[Some(Tensor::scalar(1.0))]).unwrap();
        // m̂ = 1, v̂ = 1 after bias correction.
        assert!((store.get(id).item() - (1.0 - 0.1 / (1.0 + 1e-8))).abs() < 1e-12);
    }

    #[test]
    fn adam_minimizes_quadratic_bowl() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::scalar(1.0), true);
        let mut adam = Adam::new(&store, 0.05);
        for _ in 0..500 {
            let x = store.get(id).item();
            adam.update(&mut store, &[Some(Tensor::scalar(2.0 * x))]).unwrap();
        }
        assert!(store.get(id).item().abs() < 1e-3, "x = {}", store.get(id).item());
    }

    #[test]
    fn adam_skips_non_finite_gradients() {
        let mut store = ParamStore::new();
        let id = store.add("x", Tensor::vector(&[1.0, 1.0]), true);
        let mut adam = Adam::new(&store, 0.1);
        let out = adam
            .update(&mut store, &[Some(Tensor::vector(&[f64::NAN, 1.0]))])
            .unwrap();
        assert_eq!(out, StepOutcome::Skipped);
        assert_eq!(adam.skipped, 1);
        assert_eq!(adam.step, 0);
        assert_eq!(store.get(id).data(), &[1.0, 1.0]);
    }

    #[test]
    fn adam_is_deterministic_and_respects_frozen() {
        let run = || {
            let mut store = ParamStore::new();
            store.add("a", Tensor::vector(&[0.3, 0.7]), true);
            store.add("b", Tensor::vector(&[1.0]), false);
            let mut adam = Adam::new(&store, 0.01);
            for k in 0..5 {
                let g = vec![Some(Tensor::vector(&[0.1 * k as f64, -0.2])), Some(Tensor::vector(&[1.0]))];
                adam.update(&mut store, &g).unwrap();
            }
            store
        };
        let (s1, s2) = (run(), run());
        assert_eq!(s1.values(), s2.values());
        assert_eq!(s1.get(ParamId(1)).data(), &[1.0]);
    }

    #[test]
    fn he_init_is_seeded_and_has_expected_variance() {
        let a = he_uniform(&[1000], 50, &mut rng(7));
        let b = he_uniform(&[1000], 50, &mut rng(7));
        let c = he_uniform(&[1000], 50, &mut rng(8));
        assert_eq!(a, b);
        assert_ne!(a, c);
        let mean = a.sum() / 1000.0;
        let var = a.data().iter().map(|x| (x - mean).powi(2)).sum::<f64>() / 999.0;
        let target = 2.0 / 50.0;
        assert!((var - target).abs() < 0.2 * target, "variance {var} vs {target}");
    }

    #[test]
    fn layers_initialize_with_zero_bias() {
        let mut store = ParamStore::new();
        let l = DenseLayer::new(&mut store, "fc", 4, 3, Activation::Relu, &mut rng(1));
        assert_eq!(store.get(l.bias), &Tensor::zeros(&[3]));
    }

    #[test]
    fn checkpoint_round_trip() {
        let dir = tempfile::tempdir().unwrap();
        let mut store = ParamStore::new();
        DenseLayer::new(&mut store, "fc", 3, 2, Activation::Relu, &mut rng(2));
        store.add("frozen", Tensor::vector(&[0.25]), false);
        save_checkpoint(dir.path(), &store, 42, 7, serde_json::json!({"kind": "test"})).unwrap();
        let (loaded, manifest) = load_checkpoint(dir.path()).unwrap();
        assert_eq!(manifest.seed, 42);
        assert_eq!(manifest.step, 7);
        assert_eq!(loaded.specs(), store.specs());
        for (a, b) in loaded.values().iter().zip(store.values()) {
            assert!(a.max_abs_diff(b) < 1e-6);
        }
        let bytes = fs::read(dir.path().join("params.bin")).unwrap();
        assert_eq!(bytes.len(), (6 + 2 + 1) * 4);
        let first = f32::from_le_bytes([bytes[0], bytes[1], bytes[2], bytes[3]]);
        assert_eq!(first, store.values()[0].data()[0] as f32);
    }
}
