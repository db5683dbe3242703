use super::broadcast;
use super::{outer_inner, Op, Var};
use crate::error::{Error, Result};
use crate::tensor::{self, Tensor};

impl<'t> Var<'t> {
    fn binary_op(&self, other: &Var<'t>, op: Op, f: impl Fn(f64, f64) -> f64) -> Result<Var<'t>> {
        self.check_same_tape(other)?;
        let value = broadcast::binary(&self.value, &other.value, f)?;
        Ok(self.nary(value, op, &[self.id, other.id]))
    }

    pub fn add(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, Op::Add(self.id, other.id), |a, b| a + b)
    }

    pub fn sub(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, Op::Sub(self.id, other.id), |a, b| a - b)
    }

    /// Elementwise product with broadcasting.
    pub fn mul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, Op::Mul(self.id, other.id), |a, b| a * b)
    }

    pub fn div(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.binary_op(other, Op::Div(self.id, other.id), |a, b| a / b)
    }

    pub fn neg(&self) -> Var<'t> {
        self.unary(self.value.scale(-1.0), Op::Neg(self.id))
    }

    pub fn scale(&self, c: f64) -> Var<'t> {
        self.unary(self.value.scale(c), Op::Scale(self.id, c))
    }

    pub fn add_scalar(&self, c: f64) -> Var<'t> {
        self.unary(self.value.map(|x| x + c), Op::AddScalar(self.id))
    }

    /// Matrix product. A rank-1 left operand acts as a row vector and a
    /// rank-1 right operand as a column vector; the result drops that axis.
    pub fn matmul(&self, other: &Var<'t>) -> Result<Var<'t>> {
        self.check_same_tape(other)?;
        let (a, b) = (&*self.value, &*other.value);
        if a.rank() == 0 || b.rank() == 0 || a.rank() > 2 || b.rank() > 2 {
            return Err(Error::Shape(format!("matmul of {:?} and {:?}", a.shape(), b.shape())));
        }
        let am = super::as_matrix(a, true);
        let bm = super::as_matrix(b, false);
        if am.cols() != bm.rows() {
            return Err(Error::Shape(format!("matmul of {:?} and {:?}", a.shape(), b.shape())));
        }
        let mut shape = Vec::new();
        if a.rank() == 2 {
            shape.push(am.rows());
        }
        if b.rank() == 2 {
            shape.push(bm.cols());
        }
        let value = am.matmul(&bm).reshaped(&shape)?;
        Ok(self.nary(value, Op::MatMul(self.id, other.id), &[self.id, other.id]))
    }

    pub fn t(&self) -> Result<Var<'t>> {
        if self.value.rank() != 2 {
            return Err(Error::Shape(format!("transpose needs rank 2, got {:?}", self.shape())));
        }
        Ok(self.unary(self.value.transpose(), Op::Transpose(self.id)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Var<'t>> {
        let value = (*self.value).clone().reshaped(shape)?;
        Ok(self.unary(value, Op::Reshape(self.id)))
    }

    pub fn concat(parts: &[Var<'t>], axis: usize) -> Result<Var<'t>> {
        let first = parts
            .first()
            .ok_or_else(|| Error::Shape("concat of zero tensors".into()))?;
        let rank = first.value.rank();
        if axis >= rank {
            return Err(Error::Shape(format!("concat axis {axis} out of range for rank {rank}")));
        }
        let mut shape = first.shape().to_vec();
        shape[axis] = 0;
        for p in parts {
            first.check_same_tape(p)?;
            let s = p.shape();
            if s.len() != rank
                || s.iter().enumerate().any(|(d, &n)| d != axis && n != first.shape()[d])
            {
                return Err(Error::Shape(format!("concat of {:?} with {:?}", first.shape(), s)));
            }
            shape[axis] += s[axis];
        }
        let (outer, total, inner) = outer_inner(&shape, axis);
        let mut data = vec![0.0; outer * total * inner];
        let mut offset = 0;
        for p in parts {
            let len = p.shape()[axis];
            for o in 0..outer {
                let dst = (o * total + offset) * inner;
                data[dst..dst + len * inner]
                    .copy_from_slice(&p.value.data()[o * len * inner..(o + 1) * len * inner]);
            }
            offset += len;
        }
        let ids: Vec<_> = parts.iter().map(|p| p.id).collect();
        let value = Tensor::new(shape, data)?;
        Ok(first.nary(value, Op::Concat { inputs: ids.clone(), axis }, &ids))
    }

    pub fn slice(&self, axis: usize, start: usize, len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() || start + len > shape[axis] {
            return Err(Error::Shape(format!(
                "slice {start}..{} on axis {axis} of {shape:?}",
                start + len
            )));
        }
        let (outer, total, inner) = outer_inner(shape, axis);
        let mut data = Vec::with_capacity(outer * len * inner);
        for o in 0..outer {
            let src = (o * total + start) * inner;
            data.extend_from_slice(&self.value.data()[src..src + len * inner]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[axis] = len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.unary(value, Op::Slice { input: self.id, axis, start }))
    }

    /// Selects rows (first-axis entries) by index; repeats are allowed.
    pub fn gather_rows(&self, rows: &[usize]) -> Result<Var<'t>> {
        let shape = self.shape();
        if shape.is_empty() {
            return Err(Error::Shape("gather_rows on a scalar".into()));
        }
        let width: usize = shape[1..].iter().product();
        let mut data = Vec::with_capacity(rows.len() * width);
        for &r in rows {
            if r >= shape[0] {
                return Err(Error::Shape(format!("row {r} out of range for {shape:?}")));
            }
            data.extend_from_slice(&self.value.data()[r * width..(r + 1) * width]);
        }
        let mut out_shape = shape.to_vec();
        out_shape[0] = rows.len();
        let value = Tensor::new(out_shape, data)?;
        Ok(self.unary(value, Op::GatherRows { input: self.id, rows: rows.to_vec() }))
    }

    /// Places the last-axis entries of `self` at distinct `positions` of a
    /// zero-filled last axis of length `out_len`.
    pub fn scatter_last(&self, positions: &[usize], out_len: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        let m = *shape.last().unwrap_or(&1);
        if positions.len() != m || positions.iter().any(|&p| p >= out_len) {
            return Err(Error::Shape(format!(
                "scatter of last axis {m} into {out_len} with {} positions",
                positions.len()
            )));
        }
        let mut seen = vec![false; out_len];
        for &p in positions {
            if std::mem::replace(&mut seen[p], true) {
                return Err(Error::Shape(format!("duplicate scatter position {p}")));
            }
        }
        let outer = self.value.len() / m.max(1);
        let mut data = vec![0.0; outer * out_len];
        for o in 0..outer {
            for (j, &p) in positions.iter().enumerate() {
                data[o * out_len + p] = self.value.data()[o * m + j];
            }
        }
        let mut out_shape = if shape.is_empty() { vec![1] } else { shape.to_vec() };
        *out_shape.last_mut().unwrap() = out_len;
        let value = Tensor::new(out_shape, data)?;
        Ok(self.unary(value, Op::Scatter { input: self.id, positions: positions.to_vec() }))
    }

    /// Square matrix with `self` (a vector) on the diagonal.
    pub fn diag_embed(&self) -> Result<Var<'t>> {
        if self.value.rank() != 1 {
            return Err(Error::Shape(format!("diag_embed needs a vector, got {:?}", self.shape())));
        }
        let n = self.value.len();
        let positions: Vec<usize> = (0..n).map(|i| i * n + i).collect();
        self.scatter_last(&positions, n * n)?.reshape(&[n, n])
    }

    pub fn diag(&self) -> Result<Var<'t>> {
        let s = self.shape();
        if s.len() != 2 || s[0] != s[1] {
            return Err(Error::Shape(format!("diag needs a square matrix, got {s:?}")));
        }
        let value = Tensor::vector(&self.value.diagonal());
        Ok(self.unary(value, Op::Diag(self.id)))
    }

    pub fn relu(&self) -> Var<'t> {
        self.unary(self.value.map(|x| x.max(0.0)), Op::Relu(self.id))
    }

    pub fn exp(&self) -> Var<'t> {
        self.unary(self.value.map(f64::exp), Op::Exp(self.id))
    }

    pub fn ln(&self) -> Var<'t> {
        self.unary(self.value.map(f64::ln), Op::Log(self.id))
    }

    pub fn sqrt(&self) -> Var<'t> {
        self.unary(self.value.map(f64::sqrt), Op::Sqrt(self.id))
    }

    pub fn square(&self) -> Var<'t> {
        self.unary(self.value.map(|x| x * x), Op::Square(self.id))
    }

    /// Sign (0 at 0). Piecewise constant, so the result carries no gradient.
    pub fn sign(&self) -> Var<'t> {
        let value = self.value.map(|x| {
            if x > 0.0 {
                1.0
            } else if x < 0.0 {
                -1.0
            } else {
                0.0
            }
        });
        self.tape.constant(value)
    }

    pub fn sum(&self) -> Var<'t> {
        self.unary(Tensor::scalar(self.value.sum()), Op::Sum(self.id))
    }

    /// Sums over `axis`, removing it.
    pub fn sum_axis(&self, axis: usize) -> Result<Var<'t>> {
        let shape = self.shape();
        if axis >= shape.len() {
            return Err(Error::Shape(format!("sum axis {axis} of {shape:?}")));
        }
        let (outer, n, inner) = outer_inner(shape, axis);
        let mut data = vec![0.0; outer * inner];
        for o in 0..outer {
            for k in 0..n {
                for i in 0..inner {
                    data[o * inner + i] += self.value.data()[(o * n + k) * inner + i];
                }
            }
        }
        let mut out_shape = shape.to_vec();
        out_shape.remove(axis);
        let value = Tensor::new(out_shape, data)?;
        Ok(self.unary(value, Op::SumAxis { input: self.id, axis }))
    }

    pub fn mean(&self) -> Var<'t> {
        let n = self.value.len() as f64;
        self.unary(Tensor::scalar(self.value.sum() / n), Op::Mean(self.id))
    }

    /// Softmax of a vector.
    pub fn softmax(&self) -> Result<Var<'t>> {
        if self.value.rank() != 1 {
            return Err(Error::Shape(format!("softmax needs a vector, got {:?}", self.shape())));
        }
        let m = self.value.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let e = self.value.map(|x| (x - m).exp());
        let z = e.sum();
        Ok(self.unary(e.scale(1.0 / z), Op::Softmax(self.id)))
    }

    /// log Σ exp(x) of a vector, shifted by the maximum for stability.
    pub fn logsumexp(&self) -> Result<Var<'t>> {
        if self.value.rank() != 1 {
            return Err(Error::Shape(format!("logsumexp needs a vector, got {:?}", self.shape())));
        }
        let m = self.value.data().iter().fold(f64::NEG_INFINITY, |a, &b| a.max(b));
        let v = if m.is_finite() {
            m + self.value.data().iter().map(|x| (x - m).exp()).sum::<f64>().ln()
        } else {
            m
        };
        Ok(self.unary(Tensor::scalar(v), Op::LogSumExp(self.id)))
    }

    /// Lower Cholesky factor of a symmetric positive definite matrix.
    pub fn cholesky(&self) -> Result<Var<'t>> {
        let l = tensor::cholesky(&self.value)?;
        Ok(self.unary(l, Op::Cholesky(self.id)))
    }

    /// Solves `self · X = rhs` where `self` is lower (or upper) triangular.
    /// A rank-1 `rhs` is treated as a column.
    pub fn solve_triangular(&self, rhs: &Var<'t>, lower: bool) -> Result<Var<'t>> {
        self.check_same_tape(rhs)?;
        let t = &*self.value;
        let n = t.rows();
        if t.rank() != 2 || t.cols() != n {
            return Err(Error::Shape(format!("triangular solve needs a square matrix, got {:?}", t.shape())));
        }
        if rhs.value.rank() == 1 {
            let col = rhs.reshape(&[rhs.value.len(), 1])?;
            return self.solve_triangular(&col, lower)?.reshape(&[n]);
        }
        if rhs.value.rank() != 2 || rhs.value.rows() != n {
            return Err(Error::Shape(format!(
                "triangular solve of {:?} with rhs {:?}",
                t.shape(),
                rhs.shape()
            )));
        }
        if (0..n).any(|i| t.at(i, i) == 0.0) {
            return Err(Error::Numeric("singular triangular matrix".into()));
        }
        let x = tensor::solve_triangular(t, &rhs.value, lower);
        Ok(self.nary(x, Op::TriSolve { tri: self.id, rhs: rhs.id, lower }, &[self.id, rhs.id]))
    }

    /// log-determinant of a symmetric positive definite matrix.
    pub fn logdet(&self) -> Result<Var<'t>> {
        let v = tensor::logdet_spd(&self.value)?;
        Ok(self.unary(Tensor::scalar(v), Op::LogDet(self.id)))
    }

    /// `½ (A + Aᵀ)`.
    pub fn symmetrize(&self) -> Result<Var<'t>> {
        Ok(self.add(&self.t()?)?.scale(0.5))
    }

    /// Same-padded strided 2-D convolution of an `H×W×C` image with a
    /// `k×k×C×O` kernel.
    pub fn conv2d(&self, kernel: &Var<'t>, stride: usize) -> Result<Var<'t>> {
        self.check_same_tape(kernel)?;
        let (x, k) = (&*self.value, &*kernel.value);
        if x.rank() != 3 || k.rank() != 4 || x.shape()[2] != k.shape()[2] || stride == 0 {
            return Err(Error::Shape(format!(
                "conv2d of input {:?} with kernel {:?} (stride {stride})",
                x.shape(),
                k.shape()
            )));
        }
        let value = conv2d_forward(x, k, stride);
        Ok(self.nary(
            value,
            Op::Conv2d { input: self.id, kernel: kernel.id, stride },
            &[self.id, kernel.id],
        ))
    }
}

/// Output size and leading padding of a same-padded strided axis.
pub(crate) fn same_padding(input: usize, kernel: usize, stride: usize) -> (usize, usize) {
    let out = input.div_ceil(stride);
    let total = ((out - 1) * stride + kernel).saturating_sub(input);
    (out, total / 2)
}

fn conv2d_forward(x: &Tensor, k: &Tensor, stride: usize) -> Tensor {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, o) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (oh, pt) = same_padding(h, kh, stride);
    let (ow, pl) = same_padding(w, kw, stride);
    let mut out = vec![0.0; oh * ow * o];
    let (xd, kd) = (x.data(), k.data());
    for i in 0..oh {
        for j in 0..ow {
            let dst = &mut out[(i * ow + j) * o..(i * ow + j + 1) * o];
            for a in 0..kh {
                let r = (i * stride + a) as isize - pt as isize;
                if r < 0 || r >= h as isize {
                    continue;
                }
                for b in 0..kw {
                    let s = (j * stride + b) as isize - pl as isize;
                    if s < 0 || s >= w as isize {
                        continue;
                    }
                    let xbase = (r as usize * w + s as usize) * c;
                    for ci in 0..c {
                        let xv = xd[xbase + ci];
                        if xv == 0.0 {
                            continue;
                        }
                        let kbase = ((a * kw + b) * c + ci) * o;
                        for (d, kv) in dst.iter_mut().zip(&kd[kbase..kbase + o]) {
                            *d += xv * kv;
                        }
                    }
                }
            }
        }
    }
    Tensor::new(vec![oh, ow, o], out).expect("conv output shape")
}

pub(super) fn conv2d_backward(x: &Tensor, k: &Tensor, stride: usize, g: &Tensor) -> (Tensor, Tensor) {
    let (h, w, c) = (x.shape()[0], x.shape()[1], x.shape()[2]);
    let (kh, kw, o) = (k.shape()[0], k.shape()[1], k.shape()[3]);
    let (oh, pt) = same_padding(h, kh, stride);
    let (ow, pl) = same_padding(w, kw, stride);
    let mut gx = Tensor::zeros(x.shape());
    let mut gk = Tensor::zeros(k.shape());
    let (xd, kd, gd) = (x.data(), k.data(), g.data());
    {
        let gxd = gx.data_mut();
        let gkd = gk.data_mut();
        for i in 0..oh {
            for j in 0..ow {
                let go = &gd[(i * ow + j) * o..(i * ow + j + 1) * o];
                if go.iter().all(|&v| v == 0.0) {
                    continue;
                }
                for a in 0..kh {
                    let r = (i * stride + a) as isize - pt as isize;
                    if r < 0 || r >= h as isize {
                        continue;
                    }
                    for b in 0..kw {
                        let s = (j * stride + b) as isize - pl as isize;
                        if s < 0 || s >= w as isize {
                            continue;
                        }
                        let xbase = (r as usize * w + s as usize) * c;
                        for ci in 0..c {
                            let kbase = ((a * kw + b) * c + ci) * o;
                            let xv = xd[xbase + ci];
                            let mut acc = 0.0;
                            for q in 0..o {
                                acc += go[q] * kd[kbase + q];
                                gkd[kbase + q] += go[q] * xv;
                            }
                            gxd[xbase + ci] += acc;
                        }
                    }
                }
            }
        }
    }
    (gx, gk)
}
