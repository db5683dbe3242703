//! Closed-form Kalman filter for linear-Gaussian systems, written directly
//! against nalgebra so it shares no code with the taped filters.

use nalgebra::{DMatrix, DVector};
use rand::Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::gaussian::GaussianBelief;
use crate::tensor::Tensor;

fn mat(t: &Tensor) -> DMatrix<f64> {
    DMatrix::from_row_slice(t.rows(), t.cols(), t.data())
}

fn vec(t: &Tensor) -> DVector<f64> {
    DVector::from_column_slice(t.data())
}

fn to_tensor(m: &DMatrix<f64>) -> Tensor {
    let mut out = Tensor::zeros(&[m.nrows(), m.ncols()]);
    for i in 0..m.nrows() {
        for j in 0..m.ncols() {
            out.set(i, j, m[(i, j)]);
        }
    }
    out
}

/// `x' = A·x + q`, `z = H·x + r` with `q ~ N(0, Q)`, `r ~ N(0, R)`.
#[derive(Clone, Debug)]
pub struct LinearSystem {
    pub a: Tensor,
    pub q: Tensor,
    pub h: Tensor,
    pub r: Tensor,
}

fn random_spd(n: usize, scale: f64, rng: &mut impl Rng) -> DMatrix<f64> {
    let b = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
    (&b * b.transpose()) * (scale / n as f64) + DMatrix::identity(n, n) * (0.2 * scale)
}

impl LinearSystem {
    /// A random stable system whose observations are the first `m` state
    /// components.
    pub fn random(n: usize, m: usize, rng: &mut impl Rng) -> Self {
        let b = DMatrix::from_fn(n, n, |_, _| rng.sample::<f64, _>(StandardNormal));
        let norm = b.norm() / (n as f64).sqrt();
        let a = DMatrix::identity(n, n) * 0.7 + b * (0.25 / norm.max(1e-9));
        let mut h = DMatrix::zeros(m, n);
        for i in 0..m {
            h[(i, i)] = 1.0;
        }
        Self {
            a: to_tensor(&a),
            q: to_tensor(&random_spd(n, 0.5, rng)),
            h: to_tensor(&h),
            r: to_tensor(&random_spd(m, 1.0, rng)),
        }
    }

    /// True states `x_1..x_T` and observations `z_1..z_T` from `x0`.
    pub fn simulate(&self, x0: &Tensor, steps: usize, rng: &mut impl Rng) -> (Vec<Tensor>, Vec<Tensor>) {
        let (a, h) = (mat(&self.a), mat(&self.h));
        let lq = self.q_chol();
        let lr = nalgebra::Cholesky::new(mat(&self.r)).expect("R is positive definite").l();
        let mut x = vec(x0);
        let mut states = Vec::with_capacity(steps);
        let mut obs = Vec::with_capacity(steps);
        for _ in 0..steps {
            let eq = DVector::from_fn(x.len(), |_, _| rng.sample::<f64, _>(StandardNormal));
            x = &a * &x + &lq * eq;
            let er = DVector::from_fn(h.nrows(), |_, _| rng.sample::<f64, _>(StandardNormal));
            let z = &h * &x + &lr * er;
            states.push(Tensor::vector(x.as_slice()));
            obs.push(Tensor::vector(z.as_slice()));
        }
        (states, obs)
    }

    fn q_chol(&self) -> DMatrix<f64> {
        nalgebra::Cholesky::new(mat(&self.q)).expect("Q is positive definite").l()
    }
}

/// Textbook Kalman filter: posterior after each observation.
pub fn kalman_filter(sys: &LinearSystem, init: &GaussianBelief, observations: &[Tensor]) -> Result<Vec<GaussianBelief>> {
    let (a, q, h, r) = (mat(&sys.a), mat(&sys.q), mat(&sys.h), mat(&sys.r));
    let n = a.nrows();
    let mut x = vec(&init.mean);
    let mut p = mat(&init.cov);
    let mut out = Vec::with_capacity(observations.len());
    for z in observations {
        x = &a * &x;
        p = &a * &p * a.transpose() + &q;
        let s = &h * &p * h.transpose() + &r;
        let s_inv = s
            .try_inverse()
            .ok_or_else(|| Error::Numeric("innovation covariance is singular".into()))?;
        let k = &p * h.transpose() * s_inv;
        x = &x + &k * (vec(z) - &h * &x);
        p = (DMatrix::identity(n, n) - &k * &h) * &p;
        p = (&p + p.transpose()) * 0.5;
        out.push(GaussianBelief {
            mean: Tensor::vector(x.as_slice()),
            cov: to_tensor(&p),
        });
    }
    Ok(out)
}
