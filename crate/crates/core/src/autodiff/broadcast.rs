//! NumPy-style broadcasting for elementwise binary ops.

use crate::error::{Error, Result};
use crate::tensor::{numel, Tensor};

pub(crate) fn broadcast_shape(a: &[usize], b: &[usize]) -> Result<Vec<usize>> {
    let rank = a.len().max(b.len());
    let mut out = vec![0; rank];
    for i in 0..rank {
        let da = dim_from_right(a, rank - 1 - i);
        let db = dim_from_right(b, rank - 1 - i);
        out[i] = match (da, db) {
            (x, y) if x == y => x,
            (1, y) => y,
            (x, 1) => x,
            _ => {
                return Err(Error::Shape(format!(
                    "cannot broadcast {a:?} with {b:?}"
                )))
            }
        };
    }
    Ok(out)
}

fn dim_from_right(shape: &[usize], from_right: usize) -> usize {
    if from_right < shape.len() {
        shape[shape.len() - 1 - from_right]
    } else {
        1
    }
}

/// Strides of `shape` laid out in the index space of `out`, with 0 for
/// broadcast dimensions.
fn aligned_strides(shape: &[usize], out: &[usize]) -> Vec<usize> {
    let rank = out.len();
    let mut strides = vec![0; rank];
    let mut acc = 1;
    for i in (0..rank).rev() {
        let from_right = rank - 1 - i;
        let d = dim_from_right(shape, from_right);
        if from_right < shape.len() && d == out[i] && d != 1 {
            strides[i] = acc;
        }
        if from_right < shape.len() {
            acc *= d;
        }
    }
    strides
}

/// Calls `f(out_index, a_offset, b_offset)` for every element of `out`.
fn for_each_pair(out: &[usize], sa: &[usize], sb: &[usize], mut f: impl FnMut(usize, usize, usize)) {
    let n = numel(out);
    let rank = out.len();
    let mut idx = vec![0usize; rank];
    let (mut oa, mut ob) = (0usize, 0usize);
    for o in 0..n {
        f(o, oa, ob);
        for d in (0..rank).rev() {
            idx[d] += 1;
            oa += sa[d];
            ob += sb[d];
            if idx[d] < out[d] {
                break;
            }
            oa -= sa[d] * out[d];
            ob -= sb[d] * out[d];
            idx[d] = 0;
        }
    }
}

pub(crate) fn binary(a: &Tensor, b: &Tensor, f: impl Fn(f64, f64) -> f64) -> Result<Tensor> {
    if a.shape() == b.shape() {
        return Ok(a.zip_map(b, f));
    }
    let out = broadcast_shape(a.shape(), b.shape())?;
    // Fast path: one operand repeats along leading axes of the other.
    if out == a.shape() && is_trailing(b.shape(), &out) && !b.is_empty() {
        let mut data = Vec::with_capacity(a.len());
        for row in a.data().chunks(b.len()) {
            data.extend(row.iter().zip(b.data()).map(|(x, y)| f(*x, *y)));
        }
        return Tensor::new(out, data);
    }
    if out == b.shape() && is_trailing(a.shape(), &out) && !a.is_empty() {
        let mut data = Vec::with_capacity(b.len());
        for row in b.data().chunks(a.len()) {
            data.extend(a.data().iter().zip(row).map(|(x, y)| f(*x, *y)));
        }
        return Tensor::new(out, data);
    }
    let sa = aligned_strides(a.shape(), &out);
    let sb = aligned_strides(b.shape(), &out);
    let mut data = vec![0.0; numel(&out)];
    let (ad, bd) = (a.data(), b.data());
    for_each_pair(&out, &sa, &sb, |o, ia, ib| data[o] = f(ad[ia], bd[ib]));
    Tensor::new(out, data)
}

/// True when `shape` equals the trailing axes of `out`, ignoring leading 1s.
fn is_trailing(shape: &[usize], out: &[usize]) -> bool {
    let core: &[usize] = {
        let lead = shape.iter().take_while(|&&d| d == 1).count();
        &shape[lead..]
    };
    core.len() <= out.len() && out[out.len() - core.len()..] == *core
}

/// Sums `grad` (shaped like the broadcast output) back down to `shape`.
pub(crate) fn reduce_to(grad: &Tensor, shape: &[usize]) -> Tensor {
    if grad.shape() == shape {
        return grad.clone();
    }
    let out = grad.shape();
    let s = aligned_strides(shape, out);
    let zeros = vec![0; out.len()];
    let mut acc = Tensor::zeros(shape);
    let gd = grad.data();
    let ad = acc.data_mut();
    for_each_pair(out, &s, &zeros, |o, i, _| ad[i] += gd[o]);
    acc
}

/// Gathers `a` into the broadcast output shape `out` (no arithmetic).
pub(crate) fn expand(a: &Tensor, out: &[usize]) -> Tensor {
    if a.shape() == out {
        return a.clone();
    }
    let s = aligned_strides(a.shape(), out);
    let zeros = vec![0; out.len()];
    let mut data = vec![0.0; numel(out)];
    let ad = a.data();
    for_each_pair(out, &s, &zeros, |o, i, _| data[o] = ad[i]);
    Tensor::new(out.to_vec(), data).expect("expand shape")
}
