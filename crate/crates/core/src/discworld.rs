//! Disc-tracking simulator: dynamics, rendering with distractors, and the
//! on-disk dataset container.
//!
//! States live in a 100×100 reference frame centred on the image (x right,
//! y down); images of any size render that frame scaled to fit, so state
//! magnitudes do not depend on the image resolution.

use std::fs::File;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::models::disc_process_analytic;
use crate::tensor::{self, Tensor};

/// Side length of the reference frame in state units.
pub const WORLD_SIZE: f64 = 100.0;
pub const TARGET_COLOR: [u8; 3] = [255, 0, 0];
pub const MAGIC: &[u8; 8] = b"DFKITDS1";
pub const FORMAT_VERSION: u32 = 1;

/// `(p_x, p_y, v_x, v_y)`.
pub type DiscState = [f64; 4];

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum NoiseRegime {
    Constant { sigma_p: f64, sigma_v: f64 },
    /// Velocity noise grows in three steps towards the origin.
    Heteroscedastic { sigma_p: f64, sigma_v: f64 },
    /// Joint draw of `(q_p, q_v)` from a full covariance.
    Correlated { q: Tensor },
}

/// Process noise covariance of the correlated benchmark.
pub fn correlated_q() -> Tensor {
    Tensor::from_rows(&[
        vec![9.0, -3.6, 1.2, 5.4],
        vec![-3.6, 9.0, -0.6, 0.0],
        vec![1.2, -0.6, 4.0, 0.0],
        vec![5.4, 0.0, 0.0, 4.0],
    ])
    .expect("constant matrix")
}

/// Band edges of the heteroscedastic schedule, in state units from the origin.
pub const HETERO_BANDS: [f64; 2] = [15.0, 30.0];

/// σ_v of the heteroscedastic regime: 3σ inside the inner band, 2σ in the
/// middle band and σ outside.
pub fn hetero_sigma_v(p: [f64; 2], base: f64) -> f64 {
    let r = (p[0] * p[0] + p[1] * p[1]).sqrt();
    if r < HETERO_BANDS[0] {
        3.0 * base
    } else if r < HETERO_BANDS[1] {
        2.0 * base
    } else {
        base
    }
}

impl NoiseRegime {
    pub fn validate(&self) -> Result<()> {
        match self {
            NoiseRegime::Constant { sigma_p, sigma_v } | NoiseRegime::Heteroscedastic { sigma_p, sigma_v } => {
                if !(*sigma_p >= 0.0 && *sigma_v >= 0.0) {
                    return Err(Error::Config("noise standard deviations must be non-negative".into()));
                }
            }
            NoiseRegime::Correlated { q } => {
                if q.shape() != [4, 4] || q.max_abs_diff(&q.transpose()) > 1e-12 {
                    return Err(Error::Config("correlated noise needs a symmetric 4×4 matrix".into()));
                }
                tensor::cholesky(q).map_err(|_| Error::Config("correlated noise matrix is not positive definite".into()))?;
            }
        }
        Ok(())
    }

    /// True process noise covariance at state `x`.
    pub fn covariance(&self, x: &DiscState) -> Tensor {
        match self {
            NoiseRegime::Constant { sigma_p, sigma_v } => {
                Tensor::diag(&[sigma_p * sigma_p, sigma_p * sigma_p, sigma_v * sigma_v, sigma_v * sigma_v])
            }
            NoiseRegime::Heteroscedastic { sigma_p, sigma_v } => {
                let s = hetero_sigma_v([x[0], x[1]], *sigma_v);
                Tensor::diag(&[sigma_p * sigma_p, sigma_p * sigma_p, s * s, s * s])
            }
            NoiseRegime::Correlated { q } => q.clone(),
        }
    }

    /// One draw of `(q_p, q_v)` at state `x`.
    pub fn sample(&self, x: &DiscState, rng: &mut impl Rng) -> [f64; 4] {
        let e: [f64; 4] = std::array::from_fn(|_| rng.sample(StandardNormal));
        match self {
            NoiseRegime::Correlated { q } => {
                let l = tensor::cholesky(q).expect("validated");
                std::array::from_fn(|i| (0..=i).map(|j| l.at(i, j) * e[j]).sum())
            }
            _ => {
                let d = self.covariance(x).diagonal();
                std::array::from_fn(|i| d[i].sqrt() * e[i])
            }
        }
    }
}

/// Disc dynamics plus process noise.
pub fn simulate_step(s: &DiscState, regime: &NoiseRegime, rng: &mut impl Rng) -> DiscState {
    let next = disc_process_analytic(s);
    let q = regime.sample(s, rng);
    std::array::from_fn(|i| next[i] + q[i])
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SceneSpec {
    pub num_distractors: usize,
    /// Radius of the target in state units.
    pub target_radius: f64,
    /// Range of distractor radii in state units.
    pub distractor_radius: [f64; 2],
    pub image_size: usize,
}

impl SceneSpec {
    pub fn new(image_size: usize, num_distractors: usize) -> Self {
        Self {
            num_distractors,
            target_radius: 7.0,
            distractor_radius: [3.0, 10.0],
            image_size,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.image_size < 16 {
            return Err(Error::Config(format!("image size {} is below 16", self.image_size)));
        }
        if !(self.target_radius > 0.0 && self.distractor_radius[0] > 0.0 && self.distractor_radius[1] >= self.distractor_radius[0]) {
            return Err(Error::Config("disc radii must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Distractor {
    pub radius: f64,
    pub color: [u8; 3],
}

/// A fully saturated-enough colour whose hue keeps clear of red.
fn distractor_color(rng: &mut impl Rng) -> [u8; 3] {
    let h = rng.gen_range(40.0..320.0) / 60.0;
    let s: f64 = rng.gen_range(0.5..1.0);
    let v: f64 = rng.gen_range(0.5..1.0);
    let c = v * s;
    let x = c * (1.0 - ((h % 2.0) - 1.0f64).abs());
    let (r, g, b) = match h as u32 {
        0 => (c, x, 0.0),
        1 => (x, c, 0.0),
        2 => (0.0, c, x),
        3 => (0.0, x, c),
        4 => (x, 0.0, c),
        _ => (c, 0.0, x),
    };
    let m = v - c;
    [r, g, b].map(|u| ((u + m) * 255.0).round() as u8)
}

/// Draws a disc into an `size×size×3` image; returns nothing.
fn draw_disc(image: &mut [u8], size: usize, centre: [f64; 2], radius: f64, color: [u8; 3]) {
    let px = WORLD_SIZE / size as f64;
    let r2 = radius * radius;
    let to_px = |w: f64| (w + WORLD_SIZE / 2.0) / px;
    let lo = |w: f64| (to_px(w - radius).floor().max(0.0)) as usize;
    let hi = |w: f64| (to_px(w + radius).ceil().min(size as f64)).max(0.0) as usize;
    for i in lo(centre[1])..hi(centre[1]) {
        let y = (i as f64 + 0.5) * px - WORLD_SIZE / 2.0;
        for j in lo(centre[0])..hi(centre[0]) {
            let x = (j as f64 + 0.5) * px - WORLD_SIZE / 2.0;
            if (x - centre[0]).powi(2) + (y - centre[1]).powi(2) <= r2 {
                let k = (i * size + j) * 3;
                image[k..k + 3].copy_from_slice(&color);
            }
        }
    }
}

/// Renders the target and then the distractors in order on a black
/// background; returns the image and the count of target pixels left visible.
pub fn render_frame(
    target: &DiscState,
    scene: &SceneSpec,
    distractors: &[(Distractor, DiscState)],
) -> (Vec<u8>, usize) {
    let size = scene.image_size;
    let mut image = vec![0u8; size * size * 3];
    draw_disc(&mut image, size, [target[0], target[1]], scene.target_radius, TARGET_COLOR);
    for (d, s) in distractors {
        draw_disc(&mut image, size, [s[0], s[1]], d.radius, d.color);
    }
    let visible = image.chunks_exact(3).filter(|c| *c == TARGET_COLOR).count();
    (image, visible)
}

/// Initial position uniform in ±40 and velocity uniform in ±5 per axis.
fn initial_state(rng: &mut impl Rng) -> DiscState {
    [
        rng.gen_range(-40.0..40.0),
        rng.gen_range(-40.0..40.0),
        rng.gen_range(-5.0..5.0),
        rng.gen_range(-5.0..5.0),
    ]
}

#[derive(Clone, Debug, PartialEq)]
pub struct SequenceRecord {
    /// `T + 1` states; image `t` shows state `t + 1`.
    pub states: Vec<DiscState>,
    /// `T` images of `size×size×3` bytes, concatenated.
    pub images: Vec<u8>,
    pub visible_pixels: Vec<u16>,
}

impl SequenceRecord {
    pub fn steps(&self) -> usize {
        self.visible_pixels.len()
    }

    pub fn image(&self, t: usize, size: usize) -> &[u8] {
        let n = size * size * 3;
        &self.images[t * n..(t + 1) * n]
    }

    /// Image `t` as an `H×W×3` tensor with values in [0, 1].
    pub fn image_tensor(&self, t: usize, size: usize) -> Tensor {
        let data = self.image(t, size).iter().map(|&b| b as f64 / 255.0).collect();
        Tensor::new(vec![size, size, 3], data).expect("image size matches")
    }

    pub fn state_tensor(&self, t: usize) -> Tensor {
        Tensor::vector(&self.states[t])
    }
}

/// Independent RNG for one sequence and purpose.
fn stream(seed: u64, index: u64, purpose: u64) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed.wrapping_mul(0x9E37_79B9_7F4A_7C15).wrapping_add(index));
    rng.set_stream(purpose);
    rng
}

const TARGET_NOISE: u64 = 1;

/// Target trajectory of `steps` transitions from `x0`, driven by the target
/// noise stream of sequence `index`.
pub fn simulate_target(x0: &DiscState, regime: &NoiseRegime, steps: usize, seed: u64, index: u64) -> Vec<DiscState> {
    let mut rng = stream(seed, index, TARGET_NOISE);
    let mut states = Vec::with_capacity(steps + 1);
    states.push(*x0);
    for _ in 0..steps {
        let next = simulate_step(states.last().unwrap(), regime, &mut rng);
        states.push(next);
    }
    states
}

/// Generates sequence `index` deterministically from `seed`.
pub fn generate_sequence(scene: &SceneSpec, regime: &NoiseRegime, steps: usize, seed: u64, index: u64) -> SequenceRecord {
    let mut init_rng = stream(seed, index, 0);
    let x0 = initial_state(&mut init_rng);
    let states = simulate_target(&x0, regime, steps, seed, index);

    let mut scene_rng = stream(seed, index, 2);
    let mut distractors: Vec<(Distractor, DiscState)> = (0..scene.num_distractors)
        .map(|_| {
            let radius = scene_rng.gen_range(scene.distractor_radius[0]..=scene.distractor_radius[1]);
            let color = distractor_color(&mut scene_rng);
            (Distractor { radius, color }, initial_state(&mut scene_rng))
        })
        .collect();
    let mut images = Vec::with_capacity(steps * scene.image_size * scene.image_size * 3);
    let mut visible = Vec::with_capacity(steps);
    for t in 1..=steps {
        for (_, s) in distractors.iter_mut() {
            *s = simulate_step(s, regime, &mut scene_rng);
        }
        let (img, vis) = render_frame(&states[t], scene, &distractors);
        images.extend_from_slice(&img);
        visible.push(vis.min(u16::MAX as usize) as u16);
    }
    SequenceRecord {
        states,
        images,
        visible_pixels: visible,
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub version: u32,
    pub task: String,
    pub split: String,
    pub count: usize,
    pub steps: usize,
    pub image_size: usize,
    pub regime: NoiseRegime,
    pub scene: SceneSpec,
    pub seed: u64,
    /// Radii at which the heteroscedastic velocity noise changes.
    pub hetero_bands: [f64; 2],
}

#[derive(Clone, Debug, PartialEq)]
pub struct Dataset {
    pub manifest: DatasetManifest,
    pub sequences: Vec<SequenceRecord>,
}

fn write_field(w: &mut impl Write, bytes: &[u8]) -> Result<()> {
    let len = u32::try_from(bytes.len()).map_err(|_| Error::Data("record field exceeds 4 GiB".into()))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(bytes)?;
    Ok(())
}

fn encode_sequence(seq: &SequenceRecord) -> [Vec<u8>; 3] {
    let states = seq.states.iter().flatten().flat_map(|&x| (x as f32).to_le_bytes()).collect();
    let visible = seq.visible_pixels.iter().flat_map(|v| v.to_le_bytes()).collect();
    [states, seq.images.clone(), visible]
}

fn write_header(w: &mut impl Write, manifest: &DatasetManifest) -> Result<()> {
    let json = serde_json::to_vec(manifest)?;
    w.write_all(MAGIC)?;
    write_field(w, &json)
}

impl Dataset {
    pub fn write(&self, path: &Path) -> Result<()> {
        let mut w = BufWriter::new(File::create(path)?);
        write_header(&mut w, &self.manifest)?;
        for seq in &self.sequences {
            for field in encode_sequence(seq) {
                write_field(&mut w, &field)?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::Data(format!("cannot open dataset {}: {e}", path.display())))?;
        let mut r = BufReader::new(file);
        let mut magic = [0u8; 8];
        r.read_exact(&mut magic).map_err(|_| Error::Data("dataset file is truncated".into()))?;
        if &magic != MAGIC {
            return Err(Error::Data(format!("{} is not a dataset file", path.display())));
        }
        let manifest: DatasetManifest = serde_json::from_slice(&read_field(&mut r)?)
            .map_err(|e| Error::Data(format!("bad dataset manifest: {e}")))?;
        if manifest.version != FORMAT_VERSION {
            return Err(Error::Data(format!("unsupported dataset version {}", manifest.version)));
        }
        let size = manifest.image_size;
        let (t, image_len) = (manifest.steps, manifest.steps * size * size * 3);
        let mut sequences = Vec::with_capacity(manifest.count);
        for i in 0..manifest.count {
            let states = read_field(&mut r)?;
            let images = read_field(&mut r)?;
            let visible = read_field(&mut r)?;
            if states.len() != (t + 1) * 16 || images.len() != image_len || visible.len() != t * 2 {
                return Err(Error::Data(format!("sequence {i} has inconsistent field lengths")));
            }
            let floats: Vec<f64> = states
                .chunks_exact(4)
                .map(|c| f32::from_le_bytes([c[0], c[1], c[2], c[3]]) as f64)
                .collect();
            sequences.push(SequenceRecord {
                states: floats.chunks_exact(4).map(|c| [c[0], c[1], c[2], c[3]]).collect(),
                images,
                visible_pixels: visible.chunks_exact(2).map(|c| u16::from_le_bytes([c[0], c[1]])).collect(),
            });
        }
        Ok(Self { manifest, sequences })
    }

    pub fn image_size(&self) -> usize {
        self.manifest.image_size
    }
}

fn read_field(r: &mut impl Read) -> Result<Vec<u8>> {
    let mut len = [0u8; 4];
    r.read_exact(&mut len).map_err(|_| Error::Data("dataset file is truncated".into()))?;
    let mut buf = vec![0u8; u32::from_le_bytes(len) as usize];
    r.read_exact(&mut buf).map_err(|_| Error::Data("dataset file is truncated".into()))?;
    Ok(buf)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DatasetConfig {
    pub train: usize,
    pub val: usize,
    pub test: usize,
    pub steps: usize,
    pub scene: SceneSpec,
    pub regime: NoiseRegime,
    pub seed: u64,
}

impl DatasetConfig {
    /// 2400/300/303 sequences of 50 steps at 100×100 pixels.
    pub fn paper(num_distractors: usize, regime: NoiseRegime, seed: u64) -> Self {
        Self {
            train: 2400,
            val: 300,
            test: 303,
            steps: 50,
            scene: SceneSpec::new(100, num_distractors),
            regime,
            seed,
        }
    }

    /// 300/50/50 sequences at 32×32 pixels with 5 distractors.
    pub fn desk_scale(regime: NoiseRegime, seed: u64) -> Self {
        Self {
            train: 300,
            val: 50,
            test: 50,
            steps: 50,
            scene: SceneSpec::new(32, 5),
            regime,
            seed,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.scene.validate()?;
        self.regime.validate()?;
        if self.steps == 0 {
            return Err(Error::Config("sequences need at least one step".into()));
        }
        Ok(())
    }

    pub fn splits(&self) -> [(&'static str, usize); 3] {
        [("train", self.train), ("val", self.val), ("test", self.test)]
    }

    fn manifest(&self, split: &str, count: usize) -> DatasetManifest {
        DatasetManifest {
            version: FORMAT_VERSION,
            task: "disc".into(),
            split: split.into(),
            count,
            steps: self.steps,
            image_size: self.scene.image_size,
            regime: self.regime.clone(),
            scene: self.scene.clone(),
            seed: self.split_seed(split),
            hetero_bands: HETERO_BANDS,
        }
    }

    fn split_seed(&self, split: &str) -> u64 {
        let offset = match split {
            "train" => 0,
            "val" => 1,
            _ => 2,
        };
        self.seed.wrapping_mul(3).wrapping_add(offset)
    }

    /// Generates one split in memory.
    pub fn generate_split(&self, split: &str, count: usize) -> Result<Dataset> {
        self.validate()?;
        let manifest = self.manifest(split, count);
        let sequences = (0..count as u64)
            .into_par_iter()
            .map(|i| generate_sequence(&self.scene, &self.regime, self.steps, manifest.seed, i))
            .collect();
        Ok(Dataset { manifest, sequences })
    }
}

/// Writes `train.dfds`, `val.dfds` and `test.dfds` into `dir`, generating
/// sequences in parallel chunks so memory stays bounded.
pub fn generate_dataset(config: &DatasetConfig, dir: &Path) -> Result<Vec<DatasetManifest>> {
    config.validate()?;
    std::fs::create_dir_all(dir)?;
    let mut manifests = Vec::new();
    for (split, count) in config.splits() {
        let manifest = config.manifest(split, count);
        let mut w = BufWriter::new(File::create(dir.join(format!("{split}.dfds")))?);
        write_header(&mut w, &manifest)?;
        for start in (0..count).step_by(64) {
            let end = (start + 64).min(count);
            let chunk: Vec<SequenceRecord> = (start as u64..end as u64)
                .into_par_iter()
                .map(|i| generate_sequence(&config.scene, &config.regime, config.steps, manifest.seed, i))
                .collect();
            for seq in &chunk {
                for field in encode_sequence(seq) {
                    write_field(&mut w, &field)?;
                }
            }
        }
        w.flush()?;
        manifests.push(manifest);
    }
    Ok(manifests)
}
