//! Covariance parameterization, Gaussian densities and belief conversions.
//!
//! Negative log-likelihoods here drop the `½·n·log 2π` constant; use
//! [`LOG_2PI`] to convert to a true negative log density.

use rand::Rng;
use rand_distr::StandardNormal;
use serde::{Deserialize, Serialize};

use crate::autodiff::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

pub const LOG_2PI: f64 = 1.837_877_066_409_345_5;

/// Lower bound added to covariance diagonals.
pub const DEFAULT_EPS: f64 = 1e-3;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CovMode {
    Diagonal,
    Full,
}

impl CovMode {
    /// Number of raw entries needed for an `n×n` covariance.
    pub fn raw_len(self, n: usize) -> usize {
        match self {
            CovMode::Diagonal => n,
            CovMode::Full => n * (n + 1) / 2,
        }
    }
}

/// Row-major positions `(i, j)`, `j ≥ i`, of the upper-triangular entries.
pub fn upper_entries(n: usize) -> Vec<(usize, usize)> {
    (0..n).flat_map(|i| (i..n).map(move |j| (i, j))).collect()
}

/// Plain (untaped) Gaussian belief.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GaussianBelief {
    pub mean: Tensor,
    pub cov: Tensor,
}

impl GaussianBelief {
    pub fn new(mean: Tensor, cov: Tensor) -> Result<Self> {
        let b = Self { mean, cov };
        b.validate()?;
        Ok(b)
    }

    pub fn dim(&self) -> usize {
        self.mean.len()
    }

    /// Checks shapes, symmetry (relative 1e-8) and positive definiteness.
    pub fn validate(&self) -> Result<()> {
        let n = self.mean.len();
        if self.mean.rank() != 1 || self.cov.shape() != [n, n] {
            return Err(Error::Shape(format!(
                "belief mean {:?} with covariance {:?}",
                self.mean.shape(),
                self.cov.shape()
            )));
        }
        let scale = self.cov.max_abs().max(1.0);
        if self.cov.max_abs_diff(&self.cov.transpose()) > 1e-8 * scale {
            return Err(Error::Numeric("belief covariance is not symmetric".into()));
        }
        tensor::cholesky(&self.cov)?;
        Ok(())
    }

    pub fn on<'t>(&self, tape: &'t Tape) -> Belief<'t> {
        Belief {
            mean: tape.constant(self.mean.clone()),
            cov: tape.constant(self.cov.clone()),
        }
    }
}

/// Gaussian belief living on a tape.
#[derive(Clone)]
pub struct Belief<'t> {
    pub mean: Var<'t>,
    pub cov: Var<'t>,
}

impl<'t> Belief<'t> {
    pub fn value(&self) -> GaussianBelief {
        GaussianBelief {
            mean: self.mean.value().clone(),
            cov: self.cov.value().clone(),
        }
    }

    pub fn detach(&self) -> Belief<'t> {
        Belief {
            mean: self.mean.detach(),
            cov: self.cov.detach(),
        }
    }
}

/// Builds a covariance from raw entries: `diag((raw + bias)² + eps)` in
/// diagonal mode, `L·Lᵀ + eps·I` in full mode where `L` is upper triangular
/// with `raw` in row-major order and `bias` added to its diagonal.
pub fn materialize_cov<'t>(raw: &Var<'t>, bias: &Var<'t>, mode: CovMode, eps: f64) -> Result<Var<'t>> {
    let k = raw.value().len();
    let raw = raw.reshape(&[1, k])?;
    let w = raw.tape().constant(Tensor::ones(&[1]));
    materialize_cov_mean(&raw, bias, &w, mode, eps)
}

/// Weighted mean over a batch of raw entries `[B, k]` of the covariances
/// [`materialize_cov`] would build for each row.
pub fn materialize_cov_mean<'t>(
    raw: &Var<'t>,
    bias: &Var<'t>,
    weights: &Var<'t>,
    mode: CovMode,
    eps: f64,
) -> Result<Var<'t>> {
    if eps.is_nan() || eps < 0.0 {
        return Err(Error::Config(format!("covariance eps must be ≥ 0, got {eps}")));
    }
    let n = bias.value().len();
    let k = mode.raw_len(n);
    let s = raw.shape();
    if bias.shape().len() != 1 || s.len() != 2 || s[1] != k || weights.shape() != [s[0]] {
        return Err(Error::Shape(format!(
            "covariance entries {s:?} with bias {:?} and weights {:?} in {mode:?} mode",
            bias.shape(),
            weights.shape()
        )));
    }
    let tape = raw.tape();
    let eps_i = tape.constant(Tensor::eye(n).scale(eps));
    match mode {
        CovMode::Diagonal => {
            let d = raw.add(bias)?.square();
            weights.matmul(&d)?.diag_embed()?.add(&eps_i)
        }
        CovMode::Full => {
            let entries = upper_entries(n);
            let diag_pos: Vec<usize> = (0..n)
                .map(|d| entries.iter().position(|&(i, j)| i == d && j == d).unwrap())
                .collect();
            let l_entries = raw.add(&bias.scatter_last(&diag_pos, k)?)?;
            // Rows of Lᵀ stacked over the batch: Σ_b w_b L_b L_bᵀ = Aᵀ (A ⊙ w).
            let lt_pos: Vec<usize> = entries.iter().map(|&(i, j)| j * n + i).collect();
            let b = s[0];
            let a = l_entries.scatter_last(&lt_pos, n * n)?.reshape(&[b * n, n])?;
            let rep: Vec<usize> = (0..b).flat_map(|i| std::iter::repeat(i).take(n)).collect();
            let w = weights.reshape(&[b, 1])?.gather_rows(&rep)?;
            a.t()?.matmul(&a.mul(&w)?)?.symmetrize()?.add(&eps_i)
        }
    }
}

/// `½[log|Σ| + (x−μ)ᵀΣ⁻¹(x−μ)]`, via a Cholesky solve.
pub fn gaussian_nll<'t>(x: &Var<'t>, bel: &Belief<'t>) -> Result<Var<'t>> {
    let l = bel.cov.cholesky()?;
    let y = l.solve_triangular(&x.sub(&bel.mean)?, true)?;
    let half_logdet = l.diag()?.ln().sum();
    Ok(half_logdet.add(&y.square().sum().scale(0.5))?)
}

/// Negative log of an equal-covariance mixture,
/// `−log Σ_i π_i |Σ|^{-½} exp(−½ d_iᵀΣ⁻¹d_i)`, with `log π` given directly.
pub fn gmm_nll_log<'t>(x: &Var<'t>, particles: &Var<'t>, log_weights: &Var<'t>, cov: &Var<'t>) -> Result<Var<'t>> {
    let n = x.value().len();
    let count = log_weights.value().len();
    if particles.shape() != [count, n] {
        return Err(Error::Shape(format!(
            "mixture of {:?} particles with {count} weights in dimension {n}",
            particles.shape()
        )));
    }
    let l = cov.cholesky()?;
    let d = x.sub(particles)?;
    let y = l.solve_triangular(&d.t()?, true)?;
    let maha = y.square().sum_axis(0)?;
    let lse = log_weights.sub(&maha.scale(0.5))?.logsumexp()?;
    Ok(l.diag()?.ln().sum().sub(&lse)?)
}

/// [`gmm_nll_log`] with plain mixture weights.
pub fn gmm_nll<'t>(x: &Var<'t>, particles: &Var<'t>, weights: &Var<'t>, cov: &Var<'t>) -> Result<Var<'t>> {
    gmm_nll_log(x, particles, &weights.ln(), cov)
}

/// Weighted mean and covariance of a particle set, plus `eps·I`.
pub fn fit_gaussian<'t>(particles: &Var<'t>, weights: &Var<'t>, eps: f64) -> Result<Belief<'t>> {
    let s = particles.shape();
    if s.len() != 2 || weights.shape() != [s[0]] {
        return Err(Error::Shape(format!(
            "fit of particles {s:?} with weights {:?}",
            weights.shape()
        )));
    }
    let mean = weights.matmul(particles)?;
    let d = particles.sub(&mean)?;
    let w = weights.reshape(&[s[0], 1])?;
    let eps_i = particles.tape().constant(Tensor::eye(s[1]).scale(eps));
    let cov = d.t()?.matmul(&d.mul(&w)?)?.symmetrize()?.add(&eps_i)?;
    Ok(Belief { mean, cov })
}

/// Bhattacharyya distance between `N(0, Σ_a)` and `N(0, Σ_b)`.
pub fn bhattacharyya<'t>(a: &Var<'t>, b: &Var<'t>) -> Result<Var<'t>> {
    let mid = a.add(b)?.scale(0.5).logdet()?;
    let both = a.logdet()?.add(&b.logdet()?)?;
    Ok(mid.sub(&both.scale(0.5))?.scale(0.5))
}

/// Plain-tensor version of [`bhattacharyya`].
pub fn bhattacharyya_value(a: &Tensor, b: &Tensor) -> Result<f64> {
    let mid = tensor::logdet_spd(&a.zip_map(b, |x, y| 0.5 * (x + y)))?;
    Ok(0.5 * (mid - 0.5 * (tensor::logdet_spd(a)? + tensor::logdet_spd(b)?)))
}

/// Lower Cholesky factor `L` with `L·Lᵀ = Σ`.
pub fn matrix_sqrt_psd<'t>(cov: &Var<'t>) -> Result<Var<'t>> {
    cov.cholesky()
}

/// `rows × cols` standard normal draws.
pub fn standard_normal(rows: usize, cols: usize, rng: &mut impl Rng) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.sample::<f64, _>(StandardNormal)).collect();
    Tensor::new(vec![rows, cols], data).expect("shape matches")
}

/// Reparameterized samples `μ + η·Lᵀ`, one per row of `eta`.
pub fn samples_from_noise<'t>(bel: &Belief<'t>, eta: &Tensor) -> Result<Var<'t>> {
    let l = matrix_sqrt_psd(&bel.cov)?;
    let eta = bel.mean.tape().constant(eta.clone());
    eta.matmul(&l.t()?)?.add(&bel.mean)
}

pub fn sample_gaussian<'t>(bel: &Belief<'t>, count: usize, rng: &mut impl Rng) -> Result<Var<'t>> {
    let eta = standard_normal(count, bel.mean.value().len(), rng);
    samples_from_noise(bel, &eta)
}
