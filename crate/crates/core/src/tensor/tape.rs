use super::kernels::{dot, gemm_nn_acc, gemm_nt_acc, gemm_tn_acc};
use super::{Scalar, Tensor};
use crate::error::{Error, Result};

pub const LAYERNORM_EPS: f64 = 1e-5;

/// Handle to a value recorded on a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(pub(crate) usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

enum Op<T> {
    Leaf,
    MatMul(Var, Var),
    MatMulBt(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, T),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        mean: Vec<T>,
        rstd: Vec<T>,
    },
    Reshape(Var),
    SliceRows {
        x: Var,
        start: usize,
    },
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    Transpose(Var),
    EmbeddingRows {
        table: Var,
        ids: Vec<usize>,
    },
    Softmax(Var),
    CausalSoftmax(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<usize>,
        mask: Vec<bool>,
        count: usize,
    },
    Sum(Var),
}

struct Node<T> {
    value: Tensor<T>,
    requires_grad: bool,
    op: Op<T>,
}

/// Execution-ordered record of operations. Backward walks the record in exact
/// reverse and accumulates into every node that requires a gradient.
pub struct Tape<T: Scalar> {
    nodes: Vec<Node<T>>,
    grads: Vec<Option<Vec<T>>>,
    executed: bool,
}

impl<T: Scalar> Default for Tape<T> {
    fn default() -> Self {
        Self::new()
    }
}

#[inline]
fn gelu_scalar<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    half * x * (T::one() + (c * (x + k * x * x * x)).tanh())
}

#[inline]
fn gelu_grad<T: Scalar>(x: T) -> T {
    let c = T::of((2.0 / std::f64::consts::PI).sqrt());
    let k = T::of(0.044715);
    let half = T::of(0.5);
    let t = (c * (x + k * x * x * x)).tanh();
    half * (T::one() + t) + half * x * (T::one() - t * t) * c * (T::one() + T::of(3.0) * k * x * x)
}

pub fn gelu<T: Scalar>(x: T) -> T {
    gelu_scalar(x)
}

fn softmax_in_place<T: Scalar>(row: &mut [T]) {
    let max = row.iter().copied().fold(T::neg_infinity(), T::max);
    let mut sum = T::zero();
    for x in row.iter_mut() {
        *x = (*x - max).exp();
        sum += *x;
    }
    let inv = T::one() / sum;
    for x in row.iter_mut() {
        *x *= inv;
    }
}

fn slot<'g, T: Scalar>(
    grads: &'g mut [Option<Vec<T>>],
    nodes: &[Node<T>],
    v: Var,
) -> Option<&'g mut [T]> {
    let node = &nodes[v.0];
    if !node.requires_grad {
        return None;
    }
    let n = node.value.numel();
    Some(grads[v.0].get_or_insert_with(|| vec![T::zero(); n]).as_mut_slice())
}

impl<T: Scalar> Tape<T> {
    pub fn new() -> Self {
        Self {
            nodes: Vec::new(),
            grads: Vec::new(),
            executed: false,
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn is_executed(&self) -> bool {
        self.executed
    }

    pub fn leaf(&mut self, value: Tensor<T>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            requires_grad,
            op: Op::Leaf,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor<T>) -> Var {
        self.leaf(value, false)
    }

    pub fn value(&self, v: Var) -> &Tensor<T> {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    /// Accumulated gradient of `v`, if backward reached it.
    pub fn grad(&self, v: Var) -> Option<&[T]> {
        self.grads[v.0].as_deref()
    }

    /// Clears all gradients so backward can run again on the same graph.
    pub fn reset_grads(&mut self) {
        self.grads.iter_mut().for_each(|g| *g = None);
        self.executed = false;
    }

    fn push(&mut self, value: Tensor<T>, op: Op<T>, parents: &[Var]) -> Var {
        let requires_grad = parents.iter().any(|p| self.nodes[p.0].requires_grad);
        self.nodes.push(Node {
            value,
            requires_grad,
            op,
        });
        self.grads.push(None);
        Var(self.nodes.len() - 1)
    }

    fn matrix_dims(&self, v: Var, op: &'static str) -> Result<(usize, usize)> {
        self.nodes[v.0].value.require_matrix(op)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul")?;
        let (k2, n) = self.matrix_dims(b, "matmul")?;
        if k != k2 {
            return Err(Error::shape("matmul", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nn_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMul(a, b), &[a, b]))
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_bt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (m, k) = self.matrix_dims(a, "matmul_bt")?;
        let (n, k2) = self.matrix_dims(b, "matmul_bt")?;
        if k != k2 {
            return Err(Error::shape("matmul_bt", self.value(a).shape(), self.value(b).shape()));
        }
        let mut out = vec![T::zero(); m * n];
        gemm_nt_acc(self.value(a).data(), self.value(b).data(), &mut out, m, k, n);
        let t = Tensor::matrix(m, n, out)?;
        Ok(self.push(t, Op::MatMulBt(a, b), &[a, b]))
    }

    fn same_shape(&self, a: Var, b: Var, op: &'static str) -> Result<()> {
        let (sa, sb) = (self.value(a).shape(), self.value(b).shape());
        if sa != sb {
            return Err(Error::shape(op, sa, sb));
        }
        Ok(())
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "add")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x + y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Add(a, b), &[a, b]))
    }

    /// Adds a bias vector to every row of `a`; the only broadcast supported.
    pub fn add_row(&mut self, a: Var, bias: Var) -> Result<Var> {
        let cols = self.value(a).cols();
        if self.value(bias).numel() != cols {
            return Err(Error::shape("add_row", self.value(a).shape(), self.value(bias).shape()));
        }
        let b = self.value(bias).data();
        let data = self
            .value(a)
            .data()
            .chunks(cols)
            .flat_map(|row| row.iter().zip(b).map(|(&x, &y)| x + y))
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::AddRow(a, bias), &[a, bias]))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.same_shape(a, b, "mul")?;
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| x * y)
            .collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Mul(a, b), &[a, b]))
    }

    pub fn scale(&mut self, a: Var, c: T) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| x * c).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Scale(a, c), &[a]))
    }

    /// Tanh-approximated GELU.
    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        let data = self.value(a).data().iter().map(|&x| gelu_scalar(x)).collect();
        let t = Tensor::new(self.value(a).shape().to_vec(), data)?;
        Ok(self.push(t, Op::Gelu(a), &[a]))
    }

    /// Normalizes over the last axis, then applies learnable scale and shift.
    pub fn layernorm(&mut self, x: Var, gamma: Var, beta: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.cols();
        for p in [gamma, beta] {
            if self.value(p).numel() != d {
                return Err(Error::shape("layernorm", xv.shape(), self.value(p).shape()));
            }
        }
        let (g, b) = (self.value(gamma).data(), self.value(beta).data());
        let eps = T::of(LAYERNORM_EPS);
        let inv_d = T::one() / T::of(d as f64);
        let rows = xv.rows();
        let mut out = Vec::with_capacity(xv.numel());
        let mut means = Vec::with_capacity(rows);
        let mut rstds = Vec::with_capacity(rows);
        for row in xv.data().chunks(d) {
            let mean = row.iter().copied().sum::<T>() * inv_d;
            let var = row.iter().map(|&v| (v - mean) * (v - mean)).sum::<T>() * inv_d;
            let rstd = T::one() / (var + eps).sqrt();
            out.extend(row.iter().enumerate().map(|(j, &v)| (v - mean) * rstd * g[j] + b[j]));
            means.push(mean);
            rstds.push(rstd);
        }
        let t = Tensor::new(xv.shape().to_vec(), out)?;
        Ok(self.push(
            t,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean: means,
                rstd: rstds,
            },
            &[x, gamma, beta],
        ))
    }

    pub fn reshape(&mut self, a: Var, shape: &[usize]) -> Result<Var> {
        let t = self.value(a).reshape(shape)?;
        Ok(self.push(t, Op::Reshape(a), &[a]))
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_rows")?;
        if len == 0 || start + len > r {
            return Err(Error::IndexOutOfRange {
                op: "slice_rows",
                index: start + len,
                extent: r,
            });
        }
        let data = self.value(x).data()[start * c..(start + len) * c].to_vec();
        let t = Tensor::matrix(len, c, data)?;
        Ok(self.push(t, Op::SliceRows { x, start }, &[x]))
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "slice_cols")?;
        if len == 0 || start + len > c {
            return Err(Error::IndexOutOfRange {
                op: "slice_cols",
                index: start + len,
                extent: c,
            });
        }
        let src = self.value(x).data();
        let mut data = Vec::with_capacity(r * len);
        for i in 0..r {
            data.extend_from_slice(&src[i * c + start..i * c + start + len]);
        }
        let t = Tensor::matrix(r, len, data)?;
        Ok(self.push(t, Op::SliceCols { x, start }, &[x]))
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_rows of nothing"))?;
        let (_, c) = self.matrix_dims(first, "concat_rows")?;
        let mut rows = 0;
        let mut data = Vec::new();
        for &p in parts {
            let (r, pc) = self.matrix_dims(p, "concat_rows")?;
            if pc != c {
                return Err(Error::shape("concat_rows", self.value(first).shape(), self.value(p).shape()));
            }
            rows += r;
            data.extend_from_slice(self.value(p).data());
        }
        let t = Tensor::matrix(rows, c, data)?;
        Ok(self.push(t, Op::ConcatRows(parts.to_vec()), parts))
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat_cols of nothing"))?;
        let (r, _) = self.matrix_dims(first, "concat_cols")?;
        let mut widths = Vec::with_capacity(parts.len());
        for &p in parts {
            let (pr, pc) = self.matrix_dims(p, "concat_cols")?;
            if pr != r {
                return Err(Error::shape("concat_cols", self.value(first).shape(), self.value(p).shape()));
            }
            widths.push(pc);
        }
        let total: usize = widths.iter().sum();
        let mut data = Vec::with_capacity(r * total);
        for i in 0..r {
            for (&p, &w) in parts.iter().zip(&widths) {
                data.extend_from_slice(&self.value(p).data()[i * w..(i + 1) * w]);
            }
        }
        let t = Tensor::matrix(r, total, data)?;
        Ok(self.push(t, Op::ConcatCols(parts.to_vec()), parts))
    }

    pub fn transpose(&mut self, a: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(a, "transpose")?;
        let src = self.value(a).data();
        let mut data = vec![T::zero(); r * c];
        for i in 0..r {
            for j in 0..c {
                data[j * r + i] = src[i * c + j];
            }
        }
        let t = Tensor::matrix(c, r, data)?;
        Ok(self.push(t, Op::Transpose(a), &[a]))
    }

    /// Gathers table rows; backward scatter-adds into the table gradient.
    pub fn embedding_rows(&mut self, table: Var, ids: &[usize]) -> Result<Var> {
        let (rows, d) = self.matrix_dims(table, "embedding_rows")?;
        if ids.is_empty() {
            return Err(Error::invalid("embedding_rows with no ids"));
        }
        let src = self.value(table).data();
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            if id >= rows {
                return Err(Error::IndexOutOfRange {
                    op: "embedding_rows",
                    index: id,
                    extent: rows,
                });
            }
            data.extend_from_slice(&src[id * d..(id + 1) * d]);
        }
        let t = Tensor::matrix(ids.len(), d, data)?;
        Ok(self.push(
            t,
            Op::EmbeddingRows {
                table,
                ids: ids.to_vec(),
            },
            &[table],
        ))
    }

    /// Row-wise softmax with max subtraction.
    pub fn softmax_rows(&mut self, x: Var) -> Result<Var> {
        let mut t = self.value(x).clone();
        let c = t.cols();
        t.data_mut().chunks_mut(c).for_each(softmax_in_place);
        Ok(self.push(t, Op::Softmax(x), &[x]))
    }

    /// Row-wise softmax over a square score matrix where row `i` only sees
    /// columns `0..=i`; masked entries are exactly zero.
    pub fn causal_softmax_rows(&mut self, x: Var) -> Result<Var> {
        let (r, c) = self.matrix_dims(x, "causal_softmax_rows")?;
        if r != c {
            return Err(Error::shape("causal_softmax_rows", &[r, c], &[r, r]));
        }
        let mut t = self.value(x).clone();
        for (i, row) in t.data_mut().chunks_mut(c).enumerate() {
            softmax_in_place(&mut row[..=i]);
            row[i + 1..].iter_mut().for_each(|v| *v = T::zero());
        }
        Ok(self.push(t, Op::CausalSoftmax(x), &[x]))
    }

    /// Mean negative log-likelihood of `targets` over unmasked rows.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[usize], mask: &[bool]) -> Result<Var> {
        let (l, v) = self.matrix_dims(logits, "cross_entropy")?;
        if targets.len() != l || mask.len() != l {
            return Err(Error::shape("cross_entropy", &[l, v], &[targets.len(), mask.len()]));
        }
        let count = mask.iter().filter(|&&m| m).count();
        if count == 0 {
            return Err(Error::DegenerateLoss);
        }
        let data = self.value(logits).data();
        let mut total = T::zero();
        for i in (0..l).filter(|&i| mask[i]) {
            let t = targets[i];
            if t >= v {
                return Err(Error::IndexOutOfRange {
                    op: "cross_entropy",
                    index: t,
                    extent: v,
                });
            }
            let row = &data[i * v..(i + 1) * v];
            let max = row.iter().copied().fold(T::neg_infinity(), T::max);
            let lse = row.iter().map(|&x| (x - max).exp()).sum::<T>().ln() + max;
            total += lse - row[t];
        }
        let loss = total / T::of(count as f64);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                mask: mask.to_vec(),
                count,
            },
            &[logits],
        ))
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().copied().sum::<T>();
        Ok(self.push(Tensor::scalar(s), Op::Sum(x), &[x]))
    }

    /// Runs reverse-mode differentiation from a scalar output.
    pub fn backward(&mut self, out: Var) -> Result<()> {
        if self.executed {
            return Err(Error::AlreadyExecuted);
        }
        let shape = self.value(out).shape();
        if self.value(out).numel() != 1 {
            return Err(Error::NotScalar(shape.to_vec()));
        }
        self.executed = true;
        if !self.nodes[out.0].requires_grad {
            return Ok(());
        }
        self.grads[out.0] = Some(vec![T::one()]);
        for i in (0..=out.0).rev() {
            let Some(g) = self.grads[i].take() else {
                continue;
            };
            self.backprop_node(i, &g);
            self.grads[i] = Some(g);
        }
        Ok(())
    }

    fn backprop_node(&mut self, i: usize, g: &[T]) {
        let nodes = &self.nodes;
        let grads = &mut self.grads;
        let node = &nodes[i];
        let out = &node.value;
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[1];
                if let Some(ga) = slot(grads, nodes, *a) {
                    gemm_nt_acc(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    gemm_tn_acc(av.data(), g, gb, m, k, n);
                }
            }
            Op::MatMulBt(a, b) => {
                let (av, bv) = (&nodes[a.0].value, &nodes[b.0].value);
                let (m, k) = (av.shape()[0], av.shape()[1]);
                let n = bv.shape()[0];
                if let Some(ga) = slot(grads, nodes, *a) {
                    gemm_nn_acc(g, bv.data(), ga, m, n, k);
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    gemm_tn_acc(g, av.data(), gb, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if let Some(gv) = slot(grads, nodes, v) {
                        gv.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::AddRow(a, bias) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
                if let Some(gb) = slot(grads, nodes, *bias) {
                    let c = gb.len();
                    for row in g.chunks(c) {
                        gb.iter_mut().zip(row).for_each(|(x, &y)| *x += y);
                    }
                }
            }
            Op::Mul(a, b) => {
                let (av, bv) = (nodes[a.0].value.data(), nodes[b.0].value.data());
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((x, &gy), &o) in ga.iter_mut().zip(g).zip(bv) {
                        *x += gy * o;
                    }
                }
                if let Some(gb) = slot(grads, nodes, *b) {
                    for ((x, &gy), &o) in gb.iter_mut().zip(g).zip(av) {
                        *x += gy * o;
                    }
                }
            }
            Op::Scale(a, c) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += *c * y);
                }
            }
            Op::Gelu(a) => {
                let av = nodes[a.0].value.data();
                if let Some(ga) = slot(grads, nodes, *a) {
                    for ((x, &gy), &v) in ga.iter_mut().zip(g).zip(av) {
                        *x += gy * gelu_grad(v);
                    }
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                mean,
                rstd,
            } => {
                let xv = nodes[x.0].value.data();
                let gam = nodes[gamma.0].value.data();
                let d = gam.len();
                let inv_d = T::one() / T::of(d as f64);
                let xhat = |r: usize, j: usize| (xv[r * d + j] - mean[r]) * rstd[r];
                if let Some(gg) = slot(grads, nodes, *gamma) {
                    for (r, gy) in g.chunks(d).enumerate() {
                        for j in 0..d {
                            gg[j] += gy[j] * xhat(r, j);
                        }
                    }
                }
                if let Some(gb) = slot(grads, nodes, *beta) {
                    for gy in g.chunks(d) {
                        gb.iter_mut().zip(gy).for_each(|(b, &y)| *b += y);
                    }
                }
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, gy) in g.chunks(d).enumerate() {
                        let mut sum_dxhat = T::zero();
                        let mut sum_dxhat_xhat = T::zero();
                        for j in 0..d {
                            let dxh = gy[j] * gam[j];
                            sum_dxhat += dxh;
                            sum_dxhat_xhat += dxh * xhat(r, j);
                        }
                        for j in 0..d {
                            let dxh = gy[j] * gam[j];
                            gx[r * d + j] += rstd[r]
                                * (dxh - inv_d * sum_dxhat - xhat(r, j) * inv_d * sum_dxhat_xhat);
                        }
                    }
                }
            }
            Op::Reshape(a) => {
                if let Some(ga) = slot(grads, nodes, *a) {
                    ga.iter_mut().zip(g).for_each(|(x, &y)| *x += y);
                }
            }
            Op::SliceRows { x, start } => {
                let c = out.cols();
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx[start * c..start * c + g.len()]
                        .iter_mut()
                        .zip(g)
                        .for_each(|(a, &b)| *a += b);
                }
            }
            Op::SliceCols { x, start } => {
                let w = out.cols();
                let c = nodes[x.0].value.cols();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for (r, row) in g.chunks(w).enumerate() {
                        gx[r * c + start..r * c + start + w]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::ConcatRows(parts) => {
                let mut offset = 0;
                for p in parts {
                    let n = nodes[p.0].value.numel();
                    if let Some(gp) = slot(grads, nodes, *p) {
                        gp.iter_mut()
                            .zip(&g[offset..offset + n])
                            .for_each(|(a, &b)| *a += b);
                    }
                    offset += n;
                }
            }
            Op::ConcatCols(parts) => {
                let total = out.cols();
                let mut col = 0;
                for p in parts {
                    let w = nodes[p.0].value.cols();
                    if let Some(gp) = slot(grads, nodes, *p) {
                        for (r, row) in gp.chunks_mut(w).enumerate() {
                            row.iter_mut()
                                .zip(&g[r * total + col..r * total + col + w])
                                .for_each(|(a, &b)| *a += b);
                        }
                    }
                    col += w;
                }
            }
            Op::Transpose(a) => {
                let (r, c) = (nodes[a.0].value.shape()[0], nodes[a.0].value.shape()[1]);
                if let Some(ga) = slot(grads, nodes, *a) {
                    for i in 0..r {
                        for j in 0..c {
                            ga[i * c + j] += g[j * r + i];
                        }
                    }
                }
            }
            Op::EmbeddingRows { table, ids } => {
                let d = out.cols();
                if let Some(gt) = slot(grads, nodes, *table) {
                    for (row, &id) in g.chunks(d).zip(ids) {
                        gt[id * d..(id + 1) * d]
                            .iter_mut()
                            .zip(row)
                            .for_each(|(a, &b)| *a += b);
                    }
                }
            }
            Op::Softmax(x) | Op::CausalSoftmax(x) => {
                // Masked causal entries are exactly zero, so the same Jacobian
                // product applies to both variants.
                let c = out.cols();
                if let Some(gx) = slot(grads, nodes, *x) {
                    for ((gxr, gr), sr) in gx.chunks_mut(c).zip(g.chunks(c)).zip(out.data().chunks(c)) {
                        let inner = dot(gr, sr);
                        for ((a, &gy), &s) in gxr.iter_mut().zip(gr).zip(sr) {
                            *a += s * (gy - inner);
                        }
                    }
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                mask,
                count,
            } => {
                let lv = &nodes[logits.0].value;
                let v = lv.cols();
                let scale = g[0] / T::of(*count as f64);
                if let Some(gl) = slot(grads, nodes, *logits) {
                    let mut probs = vec![T::zero(); v];
                    for (r, &m) in mask.iter().enumerate() {
                        if !m {
                            continue;
                        }
                        probs.copy_from_slice(lv.row(r));
                        softmax_in_place(&mut probs);
                        probs[targets[r]] -= T::one();
                        gl[r * v..(r + 1) * v]
                            .iter_mut()
                            .zip(&probs)
                            .for_each(|(a, &p)| *a += scale * p);
                    }
                }
            }
            Op::Sum(x) => {
                if let Some(gx) = slot(grads, nodes, *x) {
                    gx.iter_mut().for_each(|a| *a += g[0]);
                }
            }
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn m(rows: &[&[f64]]) -> Tensor<f64> {
        Tensor::from_rows(rows).unwrap()
    }

    #[test]
    fn matmul_identity_and_dot() {
        let mut t = Tape::<f64>::new();
        let i = t.constant(m(&[&[1.0, 0.0], &[0.0, 1.0]]));
        let x = t.constant(m(&[&[3.0], &[4.0]]));
        let y = t.matmul(i, x).unwrap();
        assert_eq!(t.value(y).data(), &[3.0, 4.0]);

        let a = t.leaf(m(&[&[1.0, 2.0]]), true);
        let b = t.constant(m(&[&[3.0], &[4.0]]));
        let c = t.matmul(a, b).unwrap();
        assert_eq!(t.value(c).data(), &[11.0]);
        let s = t.sum(c).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(a).unwrap(), &[3.0, 4.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut t = Tape::<f64>::new();
        let a = t.constant(Tensor::zeros(&[2, 3]));
        let b = t.constant(Tensor::zeros(&[2, 3]));
        let err = t.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]"), "{err}");
    }

    #[test]
    fn softmax_reference_values() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(m(&[&[0.0, 0.0, 0.0, 0.0], &[1000.0, 0.0, -1000.0, 0.0]]));
        let s = t.softmax_rows(x).unwrap();
        assert_eq!(&t.value(s).data()[..4], &[0.25; 4]);
        assert!((t.value(s).data()[4] - 1.0).abs() < 1e-12);
        assert!(t.value(s).is_finite());

        let x = t.constant(m(&[&[1.0, 2.0, 3.0]]));
        let s = t.softmax_rows(x).unwrap();
        let want = [0.09003057, 0.24472847, 0.66524096];
        for (a, b) in t.value(s).data().iter().zip(want) {
            assert!((a - b).abs() < 1e-8);
        }
    }

    #[test]
    fn cross_entropy_reference_values() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(m(&[&[0.0, 0.0]]));
        let l = t.cross_entropy(x, &[0], &[true]).unwrap();
        assert!((t.value(l).item() - 2f64.ln()).abs() < 1e-12);

        let x = t.constant(m(&[&[1.0, 2.0, 3.0]]));
        let l = t.cross_entropy(x, &[2], &[true]).unwrap();
        assert!((t.value(l).item() - 0.40760596).abs() < 1e-8);

        let x = t.constant(m(&[&[0.0, 60.0]]));
        let l = t.cross_entropy(x, &[1], &[true]).unwrap();
        assert!(t.value(l).item() < 1e-25);

        let x = t.constant(m(&[&[0.0, 0.0]]));
        assert!(matches!(
            t.cross_entropy(x, &[0], &[false]),
            Err(Error::DegenerateLoss)
        ));
    }

    #[test]
    fn cross_entropy_ignores_masked_targets() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(&[&[1.0, 2.0], &[5.0, -1.0]]), true);
        let l = t.cross_entropy(x, &[1, 99], &[true, false]).unwrap();
        t.backward(l).unwrap();
        assert_eq!(&t.grad(x).unwrap()[2..], &[0.0, 0.0]);
    }

    #[test]
    fn gelu_and_layernorm_fixed_points() {
        assert_eq!(gelu(0.0f64), 0.0);
        let mut t = Tape::<f64>::new();
        let x = t.constant(m(&[&[3.0, 3.0, 3.0]]));
        let g = t.constant(Tensor::full(&[3], 1.0));
        let b = t.constant(Tensor::zeros(&[3]));
        let y = t.layernorm(x, g, b).unwrap();
        assert_eq!(t.value(y).data(), &[0.0, 0.0, 0.0]);
    }

    #[test]
    fn embedding_rows_scatter_accumulates() {
        let mut t = Tape::<f64>::new();
        let table = t.leaf(
            Tensor::matrix(4, 3, (0..12).map(f64::from).collect()).unwrap(),
            true,
        );
        let e = t.embedding_rows(table, &[2, 2]).unwrap();
        assert_eq!(t.value(e).data(), &[6.0, 7.0, 8.0, 6.0, 7.0, 8.0]);
        let s = t.sum(e).unwrap();
        t.backward(s).unwrap();
        let g = t.grad(table).unwrap();
        assert_eq!(&g[6..9], &[2.0, 2.0, 2.0]);
        assert_eq!(g.iter().sum::<f64>(), 6.0);
        assert!(t.embedding_rows(table, &[4]).is_err());
    }

    #[test]
    fn second_backward_requires_reset() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(m(&[&[1.0, -2.0]]), true);
        let y = t.mul(x, x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        let first = t.grad(x).unwrap().to_vec();
        assert_eq!(first, vec![2.0, -4.0]);
        assert!(matches!(t.backward(s), Err(Error::AlreadyExecuted)));
        t.reset_grads();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), first.as_slice());
    }

    #[test]
    fn causal_softmax_masks_future() {
        let mut t = Tape::<f64>::new();
        let x = t.constant(m(&[&[1.0, 5.0, 5.0], &[1.0, 1.0, 9.0], &[0.0, 0.0, 0.0]]));
        let s = t.causal_softmax_rows(x).unwrap();
        let d = t.value(s).data();
        assert_eq!(&d[..3], &[1.0, 0.0, 0.0]);
        assert_eq!(&d[3..6], &[0.5, 0.5, 0.0]);
        assert!((d[6..].iter().sum::<f64>() - 1.0).abs() < 1e-15);
    }

    #[test]
    fn concat_of_slices_is_identity() {
        let mut t = Tape::<f64>::new();
        let x = t.leaf(Tensor::matrix(3, 4, (0..12).map(f64::from).collect()).unwrap(), true);
        let a = t.slice_cols(x, 0, 1).unwrap();
        let b = t.slice_cols(x, 1, 3).unwrap();
        let y = t.concat_cols(&[a, b]).unwrap();
        assert_eq!(t.value(y), t.value(x));
        let r0 = t.slice_rows(y, 0, 2).unwrap();
        let r1 = t.slice_rows(y, 2, 1).unwrap();
        let z = t.concat_rows(&[r0, r1]).unwrap();
        assert_eq!(t.value(z), t.value(x));
        let s = t.sum(z).unwrap();
        t.backward(s).unwrap();
        assert_eq!(t.grad(x).unwrap(), &[1.0; 12]);
    }

    #[test]
    fn frozen_leaves_receive_no_gradient() {
        let mut t = Tape::<f64>::new();
        let w = t.leaf(m(&[&[1.0, 2.0]]), false);
        let x = t.leaf(m(&[&[3.0, 4.0]]), true);
        let y = t.mul(w, x).unwrap();
        let s = t.sum(y).unwrap();
        t.backward(s).unwrap();
        assert!(t.grad(w).is_none());
        assert_eq!(t.grad(x).unwrap(), &[1.0, 2.0]);
    }
}
