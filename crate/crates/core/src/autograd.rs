//! A small eager reverse-mode autodiff tape over [`Tensor`]s.
//!
//! Every op computes its value immediately and records how to push gradients
//! back to its inputs. Nodes that do not depend on a tracked leaf never get a
//! gradient, so inference graphs pay only for the forward values.

use alloc::vec;
use alloc::vec::Vec;

use crate::tensor::{gemm_nn, gemm_nt, gemm_tn, Tensor};

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Index value used by [`Graph::gather`] for "emit zero".
pub const GATHER_ZERO: u32 = u32::MAX;

#[derive(Debug)]
enum Op {
    Leaf,
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Offset(Var),
    AddRow(Var, Var),
    MulRow(Var, Var),
    MulCol(Var, Var),
    MatMul(MatMulDims),
    Softmax(Var),
    Silu(Var),
    LayerNorm(Var, f64),
    Reshape(Var),
    Gather(Var, Vec<u32>),
    Concat(Vec<Var>),
    Slice(Var, usize),
    Sum(Var),
    L2Normalize(Var, f64),
    CrossEntropy(Var, Vec<usize>),
}

#[derive(Debug, Clone, Copy)]
struct MatMulDims {
    a: Var,
    b: Var,
    trans_b: bool,
    batch: usize,
    a_batched: bool,
    b_batched: bool,
    m: usize,
    k: usize,
    n: usize,
}

struct Node {
    value: Tensor,
    op: Op,
    tracked: bool,
}

#[derive(Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], indexed by [`Var`].
pub struct Grads {
    grads: Vec<Option<Tensor>>,
}

impl Grads {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(Option::take)
    }
}

fn batch_of(shape: &[usize]) -> usize {
    if shape.len() <= 2 {
        1
    } else {
        shape[..shape.len() - 2].iter().product()
    }
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, tracked: bool) -> Var {
        self.nodes.push(Node { value, op, tracked });
        Var(self.nodes.len() - 1)
    }

    fn tracked(&self, v: Var) -> bool {
        self.nodes[v.0].tracked
    }

    /// A constant: never receives a gradient.
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf whose gradient is wanted.
    pub fn param(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Add(a, b), tracked)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x - y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Sub(a, b), tracked)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y);
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(value, Op::Mul(a, b), tracked)
    }

    pub fn scale(&mut self, a: Var, s: f64) -> Var {
        let value = self.value(a).scale(s);
        let tracked = self.tracked(a);
        self.push(value, Op::Scale(a, s), tracked)
    }

    pub fn offset(&mut self, a: Var, c: f64) -> Var {
        let value = self.value(a).map(|x| x + c);
        let tracked = self.tracked(a);
        self.push(value, Op::Offset(a), tracked)
    }

    /// `x[.., n] + bias[n]`.
    pub fn add_row(&mut self, x: Var, bias: Var) -> Var {
        let n = self.value(bias).len();
        let xv = self.value(x);
        assert_eq!(xv.last_dim(), n, "add_row width mismatch");
        let mut value = xv.clone();
        let b = self.value(bias).data();
        for row in value.data_mut().chunks_mut(n) {
            for (v, bv) in row.iter_mut().zip(b) {
                *v += bv;
            }
        }
        let tracked = self.tracked(x) || self.tracked(bias);
        self.push(value, Op::AddRow(x, bias), tracked)
    }

    /// `x[.., n] * gain[n]`.
    pub fn mul_row(&mut self, x: Var, gain: Var) -> Var {
        let n = self.value(gain).len();
        let xv = self.value(x);
        assert_eq!(xv.last_dim(), n, "mul_row width mismatch");
        let mut value = xv.clone();
        let g = self.value(gain).data();
        for row in value.data_mut().chunks_mut(n) {
            for (v, gv) in row.iter_mut().zip(g) {
                *v *= gv;
            }
        }
        let tracked = self.tracked(x) || self.tracked(gain);
        self.push(value, Op::MulRow(x, gain), tracked)
    }

    /// Scales row `r` of `x` (viewed as `[rows, last_dim]`) by `s[r]`.
    pub fn mul_col(&mut self, x: Var, s: Var) -> Var {
        let xv = self.value(x);
        let w = xv.last_dim();
        let rows = xv.len() / w;
        assert_eq!(self.value(s).len(), rows, "mul_col row-count mismatch");
        let mut value = xv.clone();
        let sv = self.value(s).data();
        for (row, &k) in value.data_mut().chunks_mut(w).zip(sv) {
            for v in row.iter_mut() {
                *v *= k;
            }
        }
        let tracked = self.tracked(x) || self.tracked(s);
        self.push(value, Op::MulCol(x, s), tracked)
    }

    /// Batched matrix product over the last two axes. Either operand may be
    /// unbatched (2-D), in which case it is broadcast over the other's batch.
    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, false)
    }

    /// Like [`Graph::matmul`] but with the last two axes of `b` transposed.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        self.matmul_impl(a, b, true)
    }

    fn matmul_impl(&mut self, a: Var, b: Var, trans_b: bool) -> Var {
        let sa = self.shape(a).to_vec();
        let sb = self.shape(b).to_vec();
        assert!(sa.len() >= 2 && sb.len() >= 2, "matmul needs matrices");
        let (m, k) = (sa[sa.len() - 2], sa[sa.len() - 1]);
        let (kb, n) = if trans_b {
            (sb[sb.len() - 1], sb[sb.len() - 2])
        } else {
            (sb[sb.len() - 2], sb[sb.len() - 1])
        };
        assert_eq!(k, kb, "matmul inner dimension mismatch {sa:?} x {sb:?}");
        let (ba, bb) = (batch_of(&sa), batch_of(&sb));
        let a_batched = sa.len() > 2;
        let b_batched = sb.len() > 2;
        let batch = ba.max(bb);
        assert!(
            (ba == batch || ba == 1) && (bb == batch || bb == 1),
            "matmul batch mismatch {sa:?} x {sb:?}"
        );
        let mut out = vec![0.0; batch * m * n];
        {
            let ad = self.value(a).data();
            let bd = self.value(b).data();
            for bi in 0..batch {
                let ao = if ba == 1 { 0 } else { bi * m * k };
                let bo = if bb == 1 { 0 } else { bi * k * n };
                let a_blk = &ad[ao..ao + m * k];
                let b_blk = &bd[bo..bo + k * n];
                let c_blk = &mut out[bi * m * n..(bi + 1) * m * n];
                if trans_b {
                    gemm_nt(m, k, n, a_blk, b_blk, c_blk);
                } else {
                    gemm_nn(m, k, n, a_blk, b_blk, c_blk);
                }
            }
        }
        let mut shape = if a_batched {
            sa[..sa.len() - 2].to_vec()
        } else if b_batched {
            sb[..sb.len() - 2].to_vec()
        } else {
            Vec::new()
        };
        shape.push(m);
        shape.push(n);
        let dims = MatMulDims {
            a,
            b,
            trans_b,
            batch,
            a_batched: ba == batch && batch > 1,
            b_batched: bb == batch && batch > 1,
            m,
            k,
            n,
        };
        let tracked = self.tracked(a) || self.tracked(b);
        self.push(Tensor::new(&shape, out), Op::MatMul(dims), tracked)
    }

    /// Softmax over the last axis.
    pub fn softmax(&mut self, x: Var) -> Var {
        let value = softmax_rows(self.value(x));
        let tracked = self.tracked(x);
        self.push(value, Op::Softmax(x), tracked)
    }

    pub fn silu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v * sigmoid(v));
        let tracked = self.tracked(x);
        self.push(value, Op::Silu(x), tracked)
    }

    /// Normalizes each row of the last axis to zero mean, unit variance.
    pub fn layer_norm(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let w = xv.last_dim();
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(w) {
            let (mean, rstd) = row_stats(row, eps);
            for v in row.iter_mut() {
                *v = (*v - mean) * rstd;
            }
        }
        let tracked = self.tracked(x);
        self.push(value, Op::LayerNorm(x, eps), tracked)
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Var {
        let value = self.value(x).clone().reshape(shape);
        let tracked = self.tracked(x);
        self.push(value, Op::Reshape(x), tracked)
    }

    /// `out.flat[i] = x.flat[index[i]]`, or 0 where `index[i] == GATHER_ZERO`.
    pub fn gather(&mut self, x: Var, index: Vec<u32>, shape: &[usize]) -> Var {
        assert_eq!(shape.iter().product::<usize>(), index.len());
        let src = self.value(x).data();
        let data = index
            .iter()
            .map(|&i| if i == GATHER_ZERO { 0.0 } else { src[i as usize] })
            .collect();
        let tracked = self.tracked(x);
        self.push(Tensor::new(shape, data), Op::Gather(x, index), tracked)
    }

    /// Concatenates along the outermost axis.
    pub fn concat(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty());
        let inner: Vec<usize> = self.shape(parts[0])[1..].to_vec();
        let mut outer = 0;
        let mut data = Vec::new();
        for &p in parts {
            let v = self.value(p);
            assert_eq!(&v.shape()[1..], &inner[..], "concat inner shape mismatch");
            outer += v.shape()[0];
            data.extend_from_slice(v.data());
        }
        let mut shape = vec![outer];
        shape.extend_from_slice(&inner);
        let tracked = parts.iter().any(|&p| self.tracked(p));
        self.push(Tensor::new(&shape, data), Op::Concat(parts.to_vec()), tracked)
    }

    /// Rows `start..start+len` of the outermost axis.
    pub fn slice(&mut self, x: Var, start: usize, len: usize) -> Var {
        let xv = self.value(x);
        let stride = xv.len() / xv.shape()[0];
        assert!(start + len <= xv.shape()[0], "slice out of range");
        let data = xv.data()[start * stride..(start + len) * stride].to_vec();
        let mut shape = xv.shape().to_vec();
        shape[0] = len;
        let tracked = self.tracked(x);
        self.push(Tensor::new(&shape, data), Op::Slice(x, start), tracked)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let value = Tensor::scalar(self.value(x).sum());
        let tracked = self.tracked(x);
        self.push(value, Op::Sum(x), tracked)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let n = self.value(x).len() as f64;
        let s = self.sum(x);
        self.scale(s, 1.0 / n)
    }

    /// Mean of squared differences.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let d = self.sub(a, b);
        let sq = self.mul(d, d);
        self.mean(sq)
    }

    /// Rows divided by `sqrt(|row|^2 + eps)`.
    pub fn l2_normalize(&mut self, x: Var, eps: f64) -> Var {
        let xv = self.value(x);
        let w = xv.last_dim();
        let mut value = xv.clone();
        for row in value.data_mut().chunks_mut(w) {
            let s = libm::sqrt(row.iter().map(|v| v * v).sum::<f64>() + eps);
            for v in row.iter_mut() {
                *v /= s;
            }
        }
        let tracked = self.tracked(x);
        self.push(value, Op::L2Normalize(x, eps), tracked)
    }

    /// Mean softmax cross-entropy of each row of `logits` against `targets`.
    pub fn cross_entropy(&mut self, logits: Var, targets: Vec<usize>) -> Var {
        let lv = self.value(logits);
        let w = lv.last_dim();
        assert_eq!(lv.len() / w, targets.len());
        let mut loss = 0.0;
        for (row, &t) in lv.data().chunks(w).zip(&targets) {
            let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let lse = mx + libm::log(row.iter().map(|v| libm::exp(v - mx)).sum::<f64>());
            loss += lse - row[t];
        }
        loss /= targets.len() as f64;
        let tracked = self.tracked(logits);
        self.push(Tensor::scalar(loss), Op::CrossEntropy(logits, targets), tracked)
    }

    /// Reverse pass from the scalar `loss`.
    pub fn backward(&self, loss: Var) -> Grads {
        let mut grads: Vec<Option<Tensor>> = Vec::new();
        grads.resize_with(self.nodes.len(), || None);
        assert_eq!(self.value(loss).len(), 1, "backward needs a scalar loss");
        grads[loss.0] = Some(Tensor::new(self.shape(loss), vec![1.0]));
        for i in (0..=loss.0).rev() {
            let node = &self.nodes[i];
            if !node.tracked {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.push_back(i, &g, &mut grads);
            grads[i] = Some(g);
        }
        Grads { grads }
    }

    fn acc(&self, grads: &mut [Option<Tensor>], v: Var, f: impl FnOnce(&mut [f64])) {
        if !self.tracked(v) {
            return;
        }
        let slot = &mut grads[v.0];
        if slot.is_none() {
            *slot = Some(Tensor::zeros(self.shape(v)));
        }
        f(slot.as_mut().unwrap().data_mut());
    }

    fn push_back(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) {
        let gd = g.data();
        match &self.nodes[i].op {
            Op::Leaf => {}
            Op::Add(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| add_into(d, gd));
            }
            Op::Sub(a, b) => {
                self.acc(grads, *a, |d| add_into(d, gd));
                self.acc(grads, *b, |d| {
                    for (x, y) in d.iter_mut().zip(gd) {
                        *x -= y;
                    }
                });
            }
            Op::Mul(a, b) => {
                let (av, bv) = (self.value(*a).data(), self.value(*b).data());
                self.acc(grads, *a, |d| {
                    for ((x, y), z) in d.iter_mut().zip(gd).zip(bv) {
                        *x += y * z;
                    }
                });
                self.acc(grads, *b, |d| {
                    for ((x, y), z) in d.iter_mut().zip(gd).zip(av) {
                        *x += y * z;
                    }
                });
            }
            Op::Scale(a, s) => {
                let s = *s;
                self.acc(grads, *a, |d| {
                    for (x, y) in d.iter_mut().zip(gd) {
                        *x += s * y;
                    }
                });
            }
            Op::Offset(a) | Op::Reshape(a) => self.acc(grads, *a, |d| add_into(d, gd)),
            Op::AddRow(x, b) => {
                let n = self.value(*b).len();
                self.acc(grads, *x, |d| add_into(d, gd));
                self.acc(grads, *b, |d| {
                    for row in gd.chunks(n) {
                        add_into(d, row);
                    }
                });
            }
            Op::MulRow(x, gain) => {
                let n = self.value(*gain).len();
                let gv = self.value(*gain).data();
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for (drow, grow) in d.chunks_mut(n).zip(gd.chunks(n)) {
                        for ((dv, gg), k) in drow.iter_mut().zip(grow).zip(gv) {
                            *dv += gg * k;
                        }
                    }
                });
                self.acc(grads, *gain, |d| {
                    for (xrow, grow) in xv.chunks(n).zip(gd.chunks(n)) {
                        for ((dv, gg), xx) in d.iter_mut().zip(grow).zip(xrow) {
                            *dv += gg * xx;
                        }
                    }
                });
            }
            Op::MulCol(x, s) => {
                let w = self.value(*x).last_dim();
                let sv = self.value(*s).data();
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((drow, grow), k) in d.chunks_mut(w).zip(gd.chunks(w)).zip(sv) {
                        for (dv, gg) in drow.iter_mut().zip(grow) {
                            *dv += gg * k;
                        }
                    }
                });
                self.acc(grads, *s, |d| {
                    for ((dv, grow), xrow) in d.iter_mut().zip(gd.chunks(w)).zip(xv.chunks(w)) {
                        *dv += crate::tensor::dot(grow, xrow);
                    }
                });
            }
            Op::MatMul(dims) => self.matmul_back(dims, gd, grads),
            Op::Softmax(x) => {
                let y = &self.nodes[i].value;
                let w = y.last_dim();
                self.acc(grads, *x, |d| {
                    for ((drow, grow), yrow) in d.chunks_mut(w).zip(gd.chunks(w)).zip(y.data().chunks(w)) {
                        let s = crate::tensor::dot(grow, yrow);
                        for ((dv, gg), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += yy * (gg - s);
                        }
                    }
                });
            }
            Op::Silu(x) => {
                let xv = self.value(*x).data();
                self.acc(grads, *x, |d| {
                    for ((dv, gg), &xx) in d.iter_mut().zip(gd).zip(xv) {
                        let s = sigmoid(xx);
                        *dv += gg * s * (1.0 + xx * (1.0 - s));
                    }
                });
            }
            Op::LayerNorm(x, eps) => {
                let xv = self.value(*x);
                let w = xv.last_dim();
                let eps = *eps;
                self.acc(grads, *x, |d| {
                    for ((drow, grow), xrow) in d.chunks_mut(w).zip(gd.chunks(w)).zip(xv.data().chunks(w)) {
                        let (mean, rstd) = row_stats(xrow, eps);
                        let sum_g: f64 = grow.iter().sum();
                        let sum_gx: f64 = grow
                            .iter()
                            .zip(xrow)
                            .map(|(gg, xx)| gg * (xx - mean) * rstd)
                            .sum();
                        let nf = w as f64;
                        for ((dv, gg), xx) in drow.iter_mut().zip(grow).zip(xrow) {
                            let xhat = (xx - mean) * rstd;
                            *dv += rstd / nf * (nf * gg - sum_g - xhat * sum_gx);
                        }
                    }
                });
            }
            Op::Gather(x, index) => {
                self.acc(grads, *x, |d| {
                    for (&j, gg) in index.iter().zip(gd) {
                        if j != GATHER_ZERO {
                            d[j as usize] += gg;
                        }
                    }
                });
            }
            Op::Concat(parts) => {
                let mut offset = 0;
                for &p in parts {
                    let len = self.value(p).len();
                    self.acc(grads, p, |d| add_into(d, &gd[offset..offset + len]));
                    offset += len;
                }
            }
            Op::Slice(x, start) => {
                let xv = self.value(*x);
                let stride = xv.len() / xv.shape()[0];
                let off = start * stride;
                self.acc(grads, *x, |d| add_into(&mut d[off..off + gd.len()], gd));
            }
            Op::Sum(x) => {
                let gg = gd[0];
                self.acc(grads, *x, |d| {
                    for v in d.iter_mut() {
                        *v += gg;
                    }
                });
            }
            Op::L2Normalize(x, eps) => {
                let xv = self.value(*x);
                let y = &self.nodes[i].value;
                let w = xv.last_dim();
                let eps = *eps;
                self.acc(grads, *x, |d| {
                    for (((drow, grow), xrow), yrow) in d
                        .chunks_mut(w)
                        .zip(gd.chunks(w))
                        .zip(xv.data().chunks(w))
                        .zip(y.data().chunks(w))
                    {
                        let s = libm::sqrt(xrow.iter().map(|v| v * v).sum::<f64>() + eps);
                        let gy = crate::tensor::dot(grow, yrow);
                        for ((dv, gg), yy) in drow.iter_mut().zip(grow).zip(yrow) {
                            *dv += (gg - yy * gy) / s;
                        }
                    }
                });
            }
            Op::CrossEntropy(logits, targets) => {
                let lv = self.value(*logits);
                let w = lv.last_dim();
                let scale = gd[0] / targets.len() as f64;
                self.acc(grads, *logits, |d| {
                    for ((drow, lrow), &t) in d.chunks_mut(w).zip(lv.data().chunks(w)).zip(targets) {
                        let mx = lrow.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
                        let z: f64 = lrow.iter().map(|v| libm::exp(v - mx)).sum();
                        for (j, (dv, lj)) in drow.iter_mut().zip(lrow).enumerate() {
                            let p = libm::exp(lj - mx) / z;
                            let onehot = if j == t { 1.0 } else { 0.0 };
                            *dv += scale * (p - onehot);
                        }
                    }
                });
            }
        }
    }

    fn matmul_back(&self, dims: &MatMulDims, gd: &[f64], grads: &mut [Option<Tensor>]) {
        let MatMulDims {
            a,
            b,
            trans_b,
            batch,
            a_batched,
            b_batched,
            m,
            k,
            n,
        } = *dims;
        let av = self.value(a).data();
        let bv = self.value(b).data();
        self.acc(grads, a, |d| {
            for bi in 0..batch {
                let ao = if a_batched { bi * m * k } else { 0 };
                let bo = if b_batched { bi * k * n } else { 0 };
                let g_blk = &gd[bi * m * n..(bi + 1) * m * n];
                let b_blk = &bv[bo..bo + k * n];
                let d_blk = &mut d[ao..ao + m * k];
                if trans_b {
                    // b is [n, k]
                    gemm_nn(m, n, k, g_blk, b_blk, d_blk);
                } else {
                    gemm_nt(m, n, k, g_blk, b_blk, d_blk);
                }
            }
        });
        self.acc(grads, b, |d| {
            for bi in 0..batch {
                let ao = if a_batched { bi * m * k } else { 0 };
                let bo = if b_batched { bi * k * n } else { 0 };
                let g_blk = &gd[bi * m * n..(bi + 1) * m * n];
                let a_blk = &av[ao..ao + m * k];
                let d_blk = &mut d[bo..bo + k * n];
                if trans_b {
                    gemm_tn(m, n, k, g_blk, a_blk, d_blk);
                } else {
                    gemm_tn(m, k, n, a_blk, g_blk, d_blk);
                }
            }
        });
    }
}

fn add_into(d: &mut [f64], g: &[f64]) {
    for (x, y) in d.iter_mut().zip(g) {
        *x += y;
    }
}

#[inline]
pub(crate) fn sigmoid(x: f64) -> f64 {
    1.0 / (1.0 + libm::exp(-x))
}

fn row_stats(row: &[f64], eps: f64) -> (f64, f64) {
    let n = row.len() as f64;
    let mean = row.iter().sum::<f64>() / n;
    let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    (mean, 1.0 / libm::sqrt(var + eps))
}

/// Numerically stable softmax over the last axis.
pub fn softmax_rows(x: &Tensor) -> Tensor {
    let w = x.last_dim();
    let mut out = x.clone();
    for row in out.data_mut().chunks_mut(w) {
        let mx = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let mut z = 0.0;
        for v in row.iter_mut() {
            *v = libm::exp(*v - mx);
            z += *v;
        }
        for v in row.iter_mut() {
            *v /= z;
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn seq(shape: &[usize], phase: f64) -> Tensor {
        Tensor::from_fn(shape, |i| libm::sin(i as f64 * 0.71 + phase) * 0.8)
    }

    /// Central-difference check of d(loss)/d(leaf) for a graph builder.
    fn check(build: impl Fn(&mut Graph, Var) -> Var, x0: Tensor) {
        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let loss = build(&mut g, x);
        let grads = g.backward(loss);
        let analytic = grads.get(x).cloned().unwrap_or_else(|| Tensor::zeros(x0.shape()));
        let h = 1e-6;
        for i in 0..x0.len() {
            let eval = |delta: f64| {
                let mut xp = x0.clone();
                xp.data_mut()[i] += delta;
                let mut g = Graph::new();
                let x = g.constant(xp);
                let l = build(&mut g, x);
                g.value(l).item()
            };
            let fd = (eval(h) - eval(-h)) / (2.0 * h);
            let a = analytic.data()[i];
            assert!(
                (fd - a).abs() <= 1e-6 * (1.0 + fd.abs().max(a.abs())),
                "element {i}: analytic {a} vs fd {fd}"
            );
        }
    }

    #[test]
    fn grad_matmul_batched_and_broadcast() {
        let w = seq(&[4, 3], 0.3);
        check(
            move |g, x| {
                let wv = g.constant(w.clone());
                let y = g.matmul(x, wv);
                let y2 = g.mul(y, y);
                g.sum(y2)
            },
            seq(&[2, 5, 4], 0.0),
        );
        let a = seq(&[2, 5, 4], 1.0);
        check(
            move |g, x| {
                let av = g.constant(a.clone());
                let y = g.matmul_nt(av, x);
                let y = g.silu(y);
                g.sum(y)
            },
            seq(&[2, 3, 4], 0.2),
        );
        let b = seq(&[3, 4], 0.9);
        check(
            move |g, x| {
                let bv = g.constant(b.clone());
                let y = g.matmul_nt(x, bv);
                let y = g.softmax(y);
                let y = g.mul(y, y);
                g.sum(y)
            },
            seq(&[2, 5, 4], 0.4),
        );
    }

    #[test]
    fn grad_normalizations() {
        check(
            |g, x| {
                let y = g.layer_norm(x, 1e-5);
                let w = g.constant(seq(&[6], 2.0));
                let y = g.mul_row(y, w);
                let y = g.add_row(y, w);
                let y = g.silu(y);
                g.sum(y)
            },
            seq(&[3, 6], 0.1),
        );
        check(
            |g, x| {
                let y = g.l2_normalize(x, 1e-12);
                let w = g.constant(seq(&[3, 6], 0.5));
                let y = g.mul(y, w);
                g.sum(y)
            },
            seq(&[3, 6], 0.7),
        );
        check(|g, x| g.cross_entropy(x, alloc::vec![1, 0, 4]), seq(&[3, 5], 0.2));
    }

    #[test]
    fn grad_structural_ops() {
        check(
            |g, x| {
                let a = g.slice(x, 1, 2);
                let b = g.slice(x, 0, 1);
                let c = g.concat(&[a, b, a]);
                let idx = alloc::vec![0, 5, GATHER_ZERO, 7, 7, 11];
                let d = g.gather(c, idx, &[2, 3]);
                let s = g.constant(seq(&[2], 0.0));
                let e = g.mul_col(d, s);
                let e = g.reshape(e, &[6]);
                let e = g.mul(e, e);
                let e = g.offset(e, 3.0);
                let e = g.scale(e, 0.5);
                g.mean(e)
            },
            seq(&[3, 4], 0.3),
        );
    }

    #[test]
    fn softmax_rows_sum_to_one() {
        let y = softmax_rows(&seq(&[4, 7], 0.0).scale(30.0));
        for r in 0..4 {
            let s: f64 = y.row(r).iter().sum();
            assert!((s - 1.0).abs() < 1e-12);
        }
    }

    #[test]
    fn untracked_graph_has_no_gradients() {
        let mut g = Graph::new();
        let x = g.constant(seq(&[3], 0.0));
        let y = g.sum(x);
        let grads = g.backward(y);
        assert!(grads.get(x).is_none());
    }
}
