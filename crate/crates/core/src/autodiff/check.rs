use serde::Serialize;

use super::{Tape, Var};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Jacobian of a vector function at `x`, one backward pass per output entry.
///
/// `f` receives a fresh tape and `x` registered as a leaf; its output is
/// flattened, so the result is `len(f(x)) × len(x)`.
pub fn jacobian<F>(f: F, x: &Tensor) -> Result<Tensor>
where
    F: for<'t> Fn(&'t Tape, &Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, &xv)?;
    let (m, n) = (y.value().len(), x.len());
    let mut jac = Tensor::zeros(&[m, n]);
    for i in 0..m {
        let mut seed = Tensor::zeros(y.shape());
        seed.data_mut()[i] = 1.0;
        let g = tape.backward_seeded(&y, seed)?.wrt(&xv);
        jac.data_mut()[i * n..(i + 1) * n].copy_from_slice(g.data());
    }
    if !jac.is_finite() {
        return Err(Error::Numeric("jacobian has non-finite entries".into()));
    }
    Ok(jac)
}

#[derive(Clone, Debug, Serialize)]
pub struct GradCheckReport {
    pub max_rel_error: f64,
    /// Flat index of the coordinate with the largest error.
    pub worst_index: usize,
    pub pass: bool,
    pub analytic: Vec<f64>,
    pub numeric: Vec<f64>,
}

/// Compares reverse-mode gradients of a scalar function with central
/// differences of width `2·step`.
///
/// The relative error of a coordinate is `|g − ĝ| / max(|g|, |ĝ|, 1e-8)`;
/// the check passes when the largest one is below `tol`.
pub fn gradient_check<F>(f: F, x: &Tensor, step: f64, tol: f64) -> Result<GradCheckReport>
where
    F: for<'t> Fn(&'t Tape, &Var<'t>) -> Result<Var<'t>>,
{
    let tape = Tape::new();
    let xv = tape.leaf(x.clone());
    let y = f(&tape, &xv)?;
    let analytic = tape.backward(&y)?.wrt(&xv).into_data();

    let eval = |p: &Tensor| -> Result<f64> {
        let t = Tape::new();
        let v = t.constant(p.clone());
        Ok(f(&t, &v)?.item())
    };
    let mut numeric = Vec::with_capacity(x.len());
    let mut probe = x.clone();
    for i in 0..x.len() {
        let orig = probe.data()[i];
        probe.data_mut()[i] = orig + step;
        let up = eval(&probe)?;
        probe.data_mut()[i] = orig - step;
        let down = eval(&probe)?;
        probe.data_mut()[i] = orig;
        numeric.push((up - down) / (2.0 * step));
    }

    let mut max_rel_error = 0.0;
    let mut worst_index = 0;
    for (i, (a, n)) in analytic.iter().zip(&numeric).enumerate() {
        let denom = a.abs().max(n.abs()).max(1e-8);
        let err = (a - n).abs() / denom;
        let err = if err.is_nan() { f64::INFINITY } else { err };
        if err > max_rel_error {
            max_rel_error = err;
            worst_index = i;
        }
    }
    Ok(GradCheckReport {
        max_rel_error,
        worst_index,
        pass: max_rel_error < tol,
        analytic,
        numeric,
    })
}
