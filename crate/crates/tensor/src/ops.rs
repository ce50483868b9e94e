//! Forward kernels and their vector-Jacobian products.

use std::sync::Arc;

use crate::error::{Result, TensorError};
use crate::tensor::Tensor;

/// Lower clamp applied by [`Tensor::pow`] so that `d/dp x^p = x^p ln x` stays finite.
pub const POW_EPS: f64 = 1e-6;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Broadcast {
    Same,
    /// Right operand is a length-`cols` vector added to every row.
    Row,
    /// Right operand has a single entry.
    Scalar,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub(crate) enum Unary {
    Tanh,
    Relu,
    Exp,
    Ln,
    Recip,
    Sqrt,
    Square,
}

pub(crate) enum Op {
    MatMul(Tensor, Tensor),
    Transpose(Tensor),
    Add(Tensor, Tensor, Broadcast),
    Sub(Tensor, Tensor, Broadcast),
    Mul(Tensor, Tensor, Broadcast),
    Scale(Tensor, f64),
    AddScalar(Tensor),
    Unary(Tensor, Unary),
    PowConst(Tensor, f64),
    Pow(Tensor, Tensor),
    ClampMin(Tensor, f64),
    Softmax(Tensor),
    Sum(Tensor),
    SumRows(Tensor),
    SumCols(Tensor),
    Gather(Tensor, Arc<[Option<usize>]>),
    Concat(Vec<Tensor>, usize),
    Reshape(Tensor),
    Norm(Tensor),
}

/// `out = op(a) · op(b)` where `a` is logically m×k and `b` k×n.
fn gemm(m: usize, k: usize, n: usize, a: &[f64], a_t: bool, b: &[f64], b_t: bool, out: &mut [f64]) {
    debug_assert_eq!(a.len(), m * k);
    debug_assert_eq!(b.len(), k * n);
    debug_assert_eq!(out.len(), m * n);
    let (rsa, csa) = if a_t { (1, m as isize) } else { (k as isize, 1) };
    let (rsb, csb) = if b_t { (1, k as isize) } else { (n as isize, 1) };
    // SAFETY: the strides above describe exactly the m×k, k×n and m×n
    // row-major buffers whose lengths are asserted above.
    unsafe {
        matrixmultiply::dgemm(
            m,
            k,
            n,
            1.0,
            a.as_ptr(),
            rsa,
            csa,
            b.as_ptr(),
            rsb,
            csb,
            0.0,
            out.as_mut_ptr(),
            n as isize,
            1,
        );
    }
}

fn as_matrix(t: &Tensor, op: &'static str) -> Result<(usize, usize)> {
    match t.shape() {
        [r, c] => Ok((*r, *c)),
        [c] => Ok((1, *c)),
        s => Err(TensorError::shape(op, s, &[])),
    }
}

impl Op {
    pub(crate) fn inputs(&self) -> Vec<&Tensor> {
        match self {
            Op::MatMul(a, b) | Op::Add(a, b, _) | Op::Sub(a, b, _) | Op::Mul(a, b, _) | Op::Pow(a, b) => {
                vec![a, b]
            }
            Op::Transpose(a)
            | Op::Scale(a, _)
            | Op::AddScalar(a)
            | Op::Unary(a, _)
            | Op::PowConst(a, _)
            | Op::ClampMin(a, _)
            | Op::Softmax(a)
            | Op::Sum(a)
            | Op::SumRows(a)
            | Op::SumCols(a)
            | Op::Gather(a, _)
            | Op::Reshape(a)
            | Op::Norm(a) => vec![a],
            Op::Concat(parts, _) => parts.iter().collect(),
        }
    }

    /// Pushes `(input, d loss / d input)` for every input of `out`.
    pub(crate) fn backward(&self, out: &Tensor, g: &[f64], push: &mut dyn FnMut(&Tensor, Vec<f64>)) {
        match self {
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(a, "matmul").expect("validated");
                let n = b.cols();
                if a.requires_grad() {
                    let mut ga = vec![0.0; m * k];
                    gemm(m, n, k, g, false, b.data(), true, &mut ga);
                    push(a, ga);
                }
                if b.requires_grad() {
                    let mut gb = vec![0.0; k * n];
                    gemm(k, m, n, a.data(), true, g, false, &mut gb);
                    push(b, gb);
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (a.rows(), a.cols());
                let mut ga = vec![0.0; r * c];
                for i in 0..r {
                    for j in 0..c {
                        ga[i * c + j] = g[j * r + i];
                    }
                }
                push(a, ga);
            }
            Op::Add(a, b, bc) | Op::Sub(a, b, bc) => {
                let sign = if matches!(self, Op::Sub(..)) { -1.0 } else { 1.0 };
                push(a, g.to_vec());
                if b.requires_grad() {
                    let gb = match bc {
                        Broadcast::Same => g.iter().map(|v| sign * v).collect(),
                        Broadcast::Row => {
                            let n = b.numel();
                            let mut gb = vec![0.0; n];
                            for row in g.chunks(n) {
                                gb.iter_mut().zip(row).for_each(|(s, v)| *s += sign * v);
                            }
                            gb
                        }
                        Broadcast::Scalar => vec![sign * g.iter().sum::<f64>()],
                    };
                    push(b, gb);
                }
            }
            Op::Mul(a, b, bc) => {
                let (ad, bd) = (a.data(), b.data());
                match bc {
                    Broadcast::Same => {
                        if a.requires_grad() {
                            push(a, g.iter().zip(bd).map(|(x, y)| x * y).collect());
                        }
                        if b.requires_grad() {
                            push(b, g.iter().zip(ad).map(|(x, y)| x * y).collect());
                        }
                    }
                    Broadcast::Row | Broadcast::Scalar => {
                        let n = b.numel();
                        if a.requires_grad() {
                            let ga = g.iter().enumerate().map(|(i, v)| v * bd[i % n]).collect();
                            push(a, ga);
                        }
                        if b.requires_grad() {
                            let mut gb = vec![0.0; n];
                            for (i, (v, x)) in g.iter().zip(ad).enumerate() {
                                gb[i % n] += v * x;
                            }
                            push(b, gb);
                        }
                    }
                }
            }
            Op::Scale(a, s) => push(a, g.iter().map(|v| v * s).collect()),
            Op::AddScalar(a) => push(a, g.to_vec()),
            Op::Unary(a, u) => {
                let x = a.data();
                let y = out.data();
                let ga = match u {
                    Unary::Tanh => g.iter().zip(y).map(|(g, y)| g * (1.0 - y * y)).collect(),
                    Unary::Relu => g.iter().zip(x).map(|(g, x)| if *x > 0.0 { *g } else { 0.0 }).collect(),
                    Unary::Exp => g.iter().zip(y).map(|(g, y)| g * y).collect(),
                    Unary::Ln => g.iter().zip(x).map(|(g, x)| g / x).collect(),
                    Unary::Recip => g.iter().zip(y).map(|(g, y)| -g * y * y).collect(),
                    Unary::Sqrt => g.iter().zip(y).map(|(g, y)| 0.5 * g / y).collect(),
                    Unary::Square => g.iter().zip(x).map(|(g, x)| 2.0 * g * x).collect(),
                };
                push(a, ga);
            }
            Op::PowConst(a, p) => {
                let ga = g.iter().zip(a.data()).map(|(g, x)| g * p * x.powf(p - 1.0)).collect();
                push(a, ga);
            }
            Op::Pow(a, p) => {
                let pv = p.item();
                let y = out.data();
                if a.requires_grad() {
                    let ga = g
                        .iter()
                        .zip(a.data())
                        .zip(y)
                        .map(|((g, x), y)| if *x >= POW_EPS { g * pv * y / x } else { 0.0 })
                        .collect();
                    push(a, ga);
                }
                if p.requires_grad() {
                    let gp: f64 = g
                        .iter()
                        .zip(a.data())
                        .zip(y)
                        .map(|((g, x), y)| g * y * x.max(POW_EPS).ln())
                        .sum();
                    push(p, vec![gp]);
                }
            }
            Op::ClampMin(a, lo) => {
                let ga = g.iter().zip(a.data()).map(|(g, x)| if x >= lo { *g } else { 0.0 }).collect();
                push(a, ga);
            }
            Op::Softmax(a) => {
                let n = a.cols();
                let y = out.data();
                let mut ga = vec![0.0; y.len()];
                for ((yr, gr), gar) in y.chunks(n).zip(g.chunks(n)).zip(ga.chunks_mut(n)) {
                    let dot: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        gar[j] = yr[j] * (gr[j] - dot);
                    }
                }
                push(a, ga);
            }
            Op::Sum(a) => push(a, vec![g[0]; a.numel()]),
            Op::SumRows(a) => {
                let n = a.cols();
                let ga = (0..a.numel()).map(|i| g[i % n]).collect();
                push(a, ga);
            }
            Op::SumCols(a) => {
                let n = a.cols();
                let ga = (0..a.numel()).map(|i| g[i / n]).collect();
                push(a, ga);
            }
            Op::Gather(a, idx) => {
                let mut ga = vec![0.0; a.numel()];
                for (gv, src) in g.iter().zip(idx.iter()) {
                    if let Some(s) = src {
                        ga[*s] += gv;
                    }
                }
                push(a, ga);
            }
            Op::Concat(parts, axis) => {
                if *axis == 0 {
                    let mut off = 0;
                    for p in parts {
                        let len = p.numel();
                        if p.requires_grad() {
                            push(p, g[off..off + len].to_vec());
                        }
                        off += len;
                    }
                } else {
                    let total = out.cols();
                    let mut off = 0;
                    for p in parts {
                        let c = p.cols();
                        if p.requires_grad() {
                            let mut gp = Vec::with_capacity(p.numel());
                            for row in g.chunks(total) {
                                gp.extend_from_slice(&row[off..off + c]);
                            }
                            push(p, gp);
                        }
                        off += c;
                    }
                }
            }
            Op::Reshape(a) => push(a, g.to_vec()),
            Op::Norm(a) => {
                let nrm = out.item();
                let ga = if nrm > 0.0 {
                    a.data().iter().map(|x| g[0] * x / nrm).collect()
                } else {
                    // Subgradient 0 at the origin.
                    vec![0.0; a.numel()]
                };
                push(a, ga);
            }
        }
    }
}

fn broadcast_kind(op: &'static str, a: &Tensor, b: &Tensor) -> Result<Broadcast> {
    if a.shape() == b.shape() {
        return Ok(Broadcast::Same);
    }
    if b.numel() == 1 {
        return Ok(Broadcast::Scalar);
    }
    let row_vec = match b.shape() {
        [n] => Some(*n),
        [1, n] => Some(*n),
        _ => None,
    };
    match (a.shape(), row_vec) {
        ([_, c], Some(n)) if *c == n => Ok(Broadcast::Row),
        _ => Err(TensorError::shape(op, a.shape(), b.shape())),
    }
}

fn zip_broadcast(a: &Tensor, b: &Tensor, bc: Broadcast, f: impl Fn(f64, f64) -> f64) -> Vec<f64> {
    match bc {
        Broadcast::Same => a.data().iter().zip(b.data()).map(|(x, y)| f(*x, *y)).collect(),
        Broadcast::Row | Broadcast::Scalar => {
            let bd = b.data();
            let n = bd.len();
            a.data().iter().enumerate().map(|(i, x)| f(*x, bd[i % n])).collect()
        }
    }
}

impl Tensor {
    fn unary(&self, u: Unary, f: impl Fn(f64) -> f64) -> Tensor {
        let data = self.data().iter().map(|&x| f(x)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Unary(self.clone(), u))
    }

    /// Matrix product of an m×k and a k×n matrix. A rank-1 left operand is
    /// treated as a single row.
    pub fn matmul(&self, b: &Tensor) -> Result<Tensor> {
        let (m, k) = as_matrix(self, "matmul")?;
        let (k2, n) = match b.shape() {
            [r, c] => (*r, *c),
            s => return Err(TensorError::shape("matmul", self.shape(), s)),
        };
        if k != k2 {
            return Err(TensorError::shape("matmul", self.shape(), b.shape()));
        }
        let mut out = vec![0.0; m * n];
        gemm(m, k, n, self.data(), false, b.data(), false, &mut out);
        Ok(Tensor::from_op(out, vec![m, n], Op::MatMul(self.clone(), b.clone())))
    }

    pub fn transpose(&self) -> Result<Tensor> {
        let (r, c) = match self.shape() {
            [r, c] => (*r, *c),
            s => return Err(TensorError::shape("transpose", s, &[])),
        };
        let d = self.data();
        let mut out = vec![0.0; r * c];
        for i in 0..r {
            for j in 0..c {
                out[j * r + i] = d[i * c + j];
            }
        }
        Ok(Tensor::from_op(out, vec![c, r], Op::Transpose(self.clone())))
    }

    /// Elementwise sum. `b` may also be a row vector broadcast over the rows
    /// of `self`, or a single-entry tensor broadcast everywhere.
    pub fn add(&self, b: &Tensor) -> Result<Tensor> {
        let bc = broadcast_kind("add", self, b)?;
        let data = zip_broadcast(self, b, bc, |x, y| x + y);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Add(self.clone(), b.clone(), bc)))
    }

    pub fn sub(&self, b: &Tensor) -> Result<Tensor> {
        let bc = broadcast_kind("sub", self, b)?;
        let data = zip_broadcast(self, b, bc, |x, y| x - y);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Sub(self.clone(), b.clone(), bc)))
    }

    /// Elementwise (Hadamard) product with the same broadcasting as [`Tensor::add`].
    pub fn mul(&self, b: &Tensor) -> Result<Tensor> {
        let bc = broadcast_kind("mul", self, b)?;
        let data = zip_broadcast(self, b, bc, |x, y| x * y);
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Mul(self.clone(), b.clone(), bc)))
    }

    pub fn scale(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|x| x * s).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::Scale(self.clone(), s))
    }

    pub fn add_scalar(&self, s: f64) -> Tensor {
        let data = self.data().iter().map(|x| x + s).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::AddScalar(self.clone()))
    }

    pub fn tanh(&self) -> Tensor {
        self.unary(Unary::Tanh, f64::tanh)
    }

    pub fn relu(&self) -> Tensor {
        self.unary(Unary::Relu, |x| x.max(0.0))
    }

    pub fn exp(&self) -> Tensor {
        self.unary(Unary::Exp, f64::exp)
    }

    pub fn ln(&self) -> Tensor {
        self.unary(Unary::Ln, f64::ln)
    }

    pub fn recip(&self) -> Tensor {
        self.unary(Unary::Recip, f64::recip)
    }

    pub fn sqrt(&self) -> Tensor {
        self.unary(Unary::Sqrt, f64::sqrt)
    }

    pub fn square(&self) -> Tensor {
        self.unary(Unary::Square, |x| x * x)
    }

    /// `x^p` for a constant exponent.
    pub fn powf(&self, p: f64) -> Tensor {
        let data = self.data().iter().map(|x| x.powf(p)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::PowConst(self.clone(), p))
    }

    /// `max(x, 1e-6)^p` with a learnable one-element exponent `p`.
    ///
    /// Entries below the clamp receive no gradient.
    pub fn pow(&self, p: &Tensor) -> Result<Tensor> {
        if p.numel() != 1 {
            return Err(TensorError::shape("pow", self.shape(), p.shape()));
        }
        let pv = p.item();
        let data = self.data().iter().map(|x| x.max(POW_EPS).powf(pv)).collect();
        Ok(Tensor::from_op(data, self.shape().to_vec(), Op::Pow(self.clone(), p.clone())))
    }

    pub fn clamp_min(&self, lo: f64) -> Tensor {
        let data = self.data().iter().map(|x| x.max(lo)).collect();
        Tensor::from_op(data, self.shape().to_vec(), Op::ClampMin(self.clone(), lo))
    }

    /// Row-wise softmax. `mask[i]` (row-major, same length as `self`) keeps
    /// entry `i` when true; masked entries come out exactly zero.
    pub fn softmax_rows(&self, mask: Option<&[bool]>) -> Result<Tensor> {
        let (_, n) = as_matrix(self, "softmax_rows")?;
        if let Some(m) = mask {
            if m.len() != self.numel() {
                return Err(TensorError::shape("softmax_rows", self.shape(), &[m.len()]));
            }
        }
        let x = self.data();
        let mut out = vec![0.0; x.len()];
        for (r, (xr, or)) in x.chunks(n).zip(out.chunks_mut(n)).enumerate() {
            let keep = |j: usize| mask.is_none_or(|m| m[r * n + j]);
            let mut max = f64::NEG_INFINITY;
            for (j, &v) in xr.iter().enumerate() {
                if keep(j) && v > max {
                    max = v;
                }
            }
            if max == f64::NEG_INFINITY {
                return Err(TensorError::DegenerateRow { row: r });
            }
            let mut total = 0.0;
            for (j, &v) in xr.iter().enumerate() {
                if keep(j) {
                    let e = (v - max).exp();
                    or[j] = e;
                    total += e;
                }
            }
            or.iter_mut().for_each(|v| *v /= total);
        }
        Ok(Tensor::from_op(out, self.shape().to_vec(), Op::Softmax(self.clone())))
    }

    pub fn sum(&self) -> Tensor {
        let s = self.data().iter().sum();
        Tensor::from_op(vec![s], vec![1], Op::Sum(self.clone()))
    }

    pub fn mean(&self) -> Tensor {
        let n = self.numel() as f64;
        self.sum().scale(1.0 / n)
    }

    /// Sums over the row axis: m×n → \[n\].
    pub fn sum_rows(&self) -> Tensor {
        let n = self.cols();
        let mut out = vec![0.0; n];
        for row in self.data().chunks(n) {
            out.iter_mut().zip(row).for_each(|(o, v)| *o += v);
        }
        Tensor::from_op(out, vec![n], Op::SumRows(self.clone()))
    }

    /// Column means: m×n → \[n\].
    pub fn mean_rows(&self) -> Tensor {
        let m = self.rows() as f64;
        self.sum_rows().scale(1.0 / m)
    }

    /// Sums within each row: m×n → \[m\].
    pub fn sum_cols(&self) -> Tensor {
        let n = self.cols();
        let out: Vec<f64> = self.data().chunks(n).map(|r| r.iter().sum()).collect();
        let m = out.len();
        Tensor::from_op(out, vec![m], Op::SumCols(self.clone()))
    }

    /// Flat gather: `out[i] = self[idx[i]]`, or 0 for `None`.
    pub fn gather(&self, idx: Vec<Option<usize>>, shape: &[usize]) -> Result<Tensor> {
        if idx.len() != shape.iter().product::<usize>() || shape.contains(&0) {
            return Err(TensorError::shape("gather", shape, &[idx.len()]));
        }
        let src = self.data();
        if let Some(bad) = idx.iter().flatten().find(|&&i| i >= src.len()) {
            return Err(TensorError::Contract(format!(
                "gather index {bad} out of range for {} entries",
                src.len()
            )));
        }
        let out = idx.iter().map(|i| i.map_or(0.0, |i| src[i])).collect();
        Ok(Tensor::from_op(out, shape.to_vec(), Op::Gather(self.clone(), idx.into())))
    }

    /// Picks rows of a matrix (repeats allowed).
    pub fn select_rows(&self, rows: &[usize]) -> Result<Tensor> {
        let (m, n) = as_matrix(self, "select_rows")?;
        if let Some(bad) = rows.iter().find(|&&r| r >= m) {
            return Err(TensorError::Contract(format!("row {bad} out of range for {m} rows")));
        }
        let idx = rows.iter().flat_map(|&r| (0..n).map(move |j| Some(r * n + j))).collect();
        self.gather(idx, &[rows.len(), n])
    }

    /// Stacks matrices (or row vectors) vertically.
    pub fn concat_rows(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let n = first.cols();
        let mut rows = 0;
        let mut data = Vec::new();
        for p in parts {
            let (r, c) = as_matrix(p, "concat_rows")?;
            if c != n {
                return Err(TensorError::shape("concat_rows", first.shape(), p.shape()));
            }
            rows += r;
            data.extend_from_slice(p.data());
        }
        Ok(Tensor::from_op(data, vec![rows, n], Op::Concat(parts.to_vec(), 0)))
    }

    /// Joins matrices with equal row counts side by side.
    pub fn concat_cols(parts: &[Tensor]) -> Result<Tensor> {
        let first = parts
            .first()
            .ok_or_else(|| TensorError::Contract("concat of zero tensors".into()))?;
        let m = first.rows();
        let mut total = 0;
        for p in parts {
            let (r, c) = as_matrix(p, "concat_cols")?;
            if r != m {
                return Err(TensorError::shape("concat_cols", first.shape(), p.shape()));
            }
            total += c;
        }
        let mut data = Vec::with_capacity(m * total);
        for i in 0..m {
            for p in parts {
                data.extend_from_slice(p.row(i));
            }
        }
        let shape = if parts.iter().all(|p| p.rank() == 1) {
            vec![total]
        } else {
            vec![m, total]
        };
        Ok(Tensor::from_op(data, shape, Op::Concat(parts.to_vec(), 1)))
    }

    pub fn reshape(&self, shape: &[usize]) -> Result<Tensor> {
        if shape.iter().product::<usize>() != self.numel() || shape.contains(&0) {
            return Err(TensorError::shape("reshape", self.shape(), shape));
        }
        Ok(Tensor::from_op(self.to_vec(), shape.to_vec(), Op::Reshape(self.clone())))
    }

    /// Euclidean norm of all entries, with subgradient 0 at the origin.
    pub fn norm(&self) -> Tensor {
        let n = self.data().iter().map(|x| x * x).sum::<f64>().sqrt();
        Tensor::from_op(vec![n], vec![1], Op::Norm(self.clone()))
    }
}
