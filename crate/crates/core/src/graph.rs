//! Reverse-mode automatic differentiation over dense 2-d tensors.
//!
//! A [`Tape`] records one forward pass as a flat list of nodes; creation
//! order is the topological order. [`Tape::backward`] walks the list once
//! in reverse, accumulating into each parent left to right, so gradient
//! values are bit-identical across runs. One tape serves one forward pass
//! and is dropped after backward; there are no higher-order derivatives.
//!
//! Gelu uses the exact Gaussian-CDF form `x * Phi(x)` with
//! `Phi(x) = (1 + erf(x / sqrt(2))) / 2`, not the tanh approximation, so
//! its analytic derivative `Phi(x) + x * pdf(x)` agrees with central
//! finite differences to rounding error.

use crate::params::{ParamId, ParamStore};
use crate::tensor::Tensor;

/// Handle to a node on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Var(usize);

#[derive(Debug, Clone)]
enum Op {
    Leaf,
    /// `a [m,k] * b [k,n]`
    Matmul(Var, Var),
    /// `a [m,k] * transpose(b [n,k])`
    MatmulNT(Var, Var),
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    /// `x [m,n] + bias [n]` broadcast over rows
    AddBias(Var, Var),
    Relu(Var),
    Gelu(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        eps: f64,
    },
    /// Row-wise softmax
    Softmax(Var),
    /// Mean over the batch of `-log softmax(logits)[label]`
    SoftmaxXent { logits: Var, labels: Vec<usize> },
    Mse(Var, Var),
    SumAll(Var),
    /// Row gather: `out[t, :] = table[ids[t], :]`
    Embed { table: Var, ids: Vec<usize> },
    SliceRows { x: Var, start: usize, len: usize },
    SliceCols { x: Var, start: usize, len: usize },
    ConcatRows(Vec<Var>),
    ConcatCols(Vec<Var>),
    /// Column means: `[m,n] -> [1,n]`
    MeanRows(Var),
    /// Vertical repetition: `[m,n] -> [m*times, n]`
    TileRows { x: Var, times: usize },
}

struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// One recorded forward pass.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
    bindings: Vec<(ParamId, Var)>,
}

const INV_SQRT_2: f64 = std::f64::consts::FRAC_1_SQRT_2;
/// 1 / sqrt(2 * pi), the standard normal density at 0.
const INV_SQRT_2PI: f64 = 0.3989422804014327;

fn gauss_cdf(x: f64) -> f64 {
    0.5 * (1.0 + libm::erf(x * INV_SQRT_2))
}

fn gauss_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

fn matmul_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[p * n..(p + 1) * n];
            let orow = &mut out[i * n..(i + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

/// `a [m,k] * transpose(b [n,k])`
fn matmul_nt_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; m * n];
    for i in 0..m {
        let arow = &a[i * k..(i + 1) * k];
        for j in 0..n {
            let brow = &b[j * k..(j + 1) * k];
            let mut s = 0.0;
            for p in 0..k {
                s += arow[p] * brow[p];
            }
            out[i * n + j] = s;
        }
    }
    out
}

/// `transpose(a [m,k]) * b [m,n] -> [k,n]`, used by matmul backward.
fn matmul_tn_raw(a: &[f64], b: &[f64], m: usize, k: usize, n: usize) -> Vec<f64> {
    let mut out = vec![0.0; k * n];
    for i in 0..m {
        for p in 0..k {
            let av = a[i * k + p];
            if av == 0.0 {
                continue;
            }
            let brow = &b[i * n..(i + 1) * n];
            let orow = &mut out[p * n..(p + 1) * n];
            for j in 0..n {
                orow[j] += av * brow[j];
            }
        }
    }
    out
}

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    /// Gradient of the last `backward` root with respect to `v`, if tracked.
    pub fn grad(&self, v: Var) -> Option<Tensor> {
        let node = &self.nodes[v.0];
        node.grad
            .as_ref()
            .map(|g| Tensor::from_vec(node.value.shape().to_vec(), g.clone()))
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn any_grad(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// Stage a stored parameter as a leaf; gradient flows back into the
    /// store through [`Tape::write_grads`] only if the entry is trainable.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        let entry = store.entry(id);
        let var = self.leaf(entry.value.clone(), entry.trainable);
        if entry.trainable {
            self.bindings.push((id, var));
        }
        var
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape().len(), 2, "matmul lhs must be 2-d");
        assert_eq!(tb.shape().len(), 2, "matmul rhs must be 2-d");
        let (m, k) = (ta.rows(), ta.cols());
        let (k2, n) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul inner dimensions {k} vs {k2}");
        let data = matmul_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_vec(vec![m, n], data), Op::Matmul(a, b), rg)
    }

    /// `a [m,k] * transpose(b [n,k]) -> [m,n]`; the usual `x * W^T` shape.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape().len(), 2, "matmul_nt lhs must be 2-d");
        assert_eq!(tb.shape().len(), 2, "matmul_nt rhs must be 2-d");
        let (m, k) = (ta.rows(), ta.cols());
        let (n, k2) = (tb.rows(), tb.cols());
        assert_eq!(k, k2, "matmul_nt inner dimensions {k} vs {k2}");
        let data = matmul_nt_raw(ta.data(), tb.data(), m, k, n);
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_vec(vec![m, n], data), Op::MatmulNT(a, b), rg)
    }

    fn binary_pointwise(&mut self, a: Var, b: Var, op: Op, f: impl Fn(f64, f64) -> f64) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "elementwise shape mismatch");
        let data: Vec<f64> = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = ta.shape().to_vec();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::from_vec(shape, data), op, rg)
    }

    pub fn add(&mut self, a: Var, b: Var) -> Var {
        self.binary_pointwise(a, b, Op::Add(a, b), |x, y| x + y)
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Var {
        self.binary_pointwise(a, b, Op::Sub(a, b), |x, y| x - y)
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Var {
        self.binary_pointwise(a, b, Op::Mul(a, b), |x, y| x * y)
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Var {
        assert!(c.is_finite(), "scale constant must be finite");
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| x * c).collect();
        let shape = ta.shape().to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::from_vec(shape, data), Op::Scale(a, c), rg)
    }

    /// `x [m,n] + bias [n]`, broadcast over rows.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Var {
        let (tx, tb) = (&self.nodes[x.0].value, &self.nodes[bias.0].value);
        let (m, n) = (tx.rows(), tx.cols());
        assert_eq!(tb.len(), n, "bias length must equal column count");
        let mut data = tx.data().to_vec();
        let bd = tb.data();
        for i in 0..m {
            for j in 0..n {
                data[i * n + j] += bd[j];
            }
        }
        let rg = self.any_grad(&[x, bias]);
        self.push(Tensor::from_vec(vec![m, n], data), Op::AddBias(x, bias), rg)
    }

    pub fn relu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| x.max(0.0)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::from_vec(shape, data), Op::Relu(a), rg)
    }

    pub fn gelu(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let data: Vec<f64> = ta.data().iter().map(|&x| x * gauss_cdf(x)).collect();
        let shape = ta.shape().to_vec();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::from_vec(shape, data), Op::Gelu(a), rg)
    }

    /// Per-row normalization over the last axis, then affine by `gain`/`bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var, eps: f64) -> Var {
        assert!(eps > 0.0, "layer_norm eps must be positive");
        let tx = &self.nodes[x.0].value;
        let (m, d) = (tx.rows(), tx.cols());
        assert_eq!(self.nodes[gain.0].value.len(), d, "gain length");
        assert_eq!(self.nodes[bias.0].value.len(), d, "bias length");
        let g = self.nodes[gain.0].value.data();
        let b = self.nodes[bias.0].value.data();
        let xd = tx.data();
        let mut data = vec![0.0; m * d];
        for i in 0..m {
            let row = &xd[i * d..(i + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let inv_std = 1.0 / (var + eps).sqrt();
            for j in 0..d {
                data[i * d + j] = (row[j] - mean) * inv_std * g[j] + b[j];
            }
        }
        let rg = self.any_grad(&[x, gain, bias]);
        self.push(
            Tensor::from_vec(vec![m, d], data),
            Op::LayerNorm { x, gain, bias, eps },
            rg,
        )
    }

    /// Row-wise softmax, stabilized by per-row max subtraction.
    pub fn softmax(&mut self, a: Var) -> Var {
        let ta = &self.nodes[a.0].value;
        let (m, n) = (ta.rows(), ta.cols());
        let xd = ta.data();
        let mut data = vec![0.0; m * n];
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let mut sum = 0.0;
            for j in 0..n {
                let e = (row[j] - max).exp();
                data[i * n + j] = e;
                sum += e;
            }
            for j in 0..n {
                data[i * n + j] /= sum;
            }
        }
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::from_vec(vec![m, n], data), Op::Softmax(a), rg)
    }

    /// Mean over the batch of `-log softmax(logits)[label]`, stabilized by
    /// max subtraction. Panics on out-of-range labels.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Var {
        let tl = &self.nodes[logits.0].value;
        let (m, n) = (tl.rows(), tl.cols());
        assert!(m >= 1, "softmax_cross_entropy needs a nonempty batch");
        assert_eq!(labels.len(), m, "one label per row");
        for &l in labels {
            assert!(l < n, "label {l} out of range for {n} classes");
        }
        let xd = tl.data();
        let mut total = 0.0;
        for i in 0..m {
            let row = &xd[i * n..(i + 1) * n];
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let lse = row.iter().map(|&v| (v - max).exp()).sum::<f64>().ln() + max;
            total += lse - row[labels[i]];
        }
        let rg = self.nodes[logits.0].requires_grad;
        self.push(
            Tensor::scalar(total / m as f64),
            Op::SoftmaxXent {
                logits,
                labels: labels.to_vec(),
            },
            rg,
        )
    }

    /// Mean of squared elementwise differences over all elements.
    pub fn mse(&mut self, a: Var, b: Var) -> Var {
        let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
        assert_eq!(ta.shape(), tb.shape(), "mse shape mismatch");
        let n = ta.len() as f64;
        let sum: f64 = ta
            .data()
            .iter()
            .zip(tb.data())
            .map(|(&x, &y)| (x - y) * (x - y))
            .sum();
        let rg = self.any_grad(&[a, b]);
        self.push(Tensor::scalar(sum / n), Op::Mse(a, b), rg)
    }

    pub fn sum_all(&mut self, a: Var) -> Var {
        let s: f64 = self.nodes[a.0].value.data().iter().sum();
        let rg = self.nodes[a.0].requires_grad;
        self.push(Tensor::scalar(s), Op::SumAll(a), rg)
    }

    /// Gather rows of `table` by token id.
    pub fn embed(&mut self, table: Var, ids: &[usize]) -> Var {
        let tt = &self.nodes[table.0].value;
        let (rows, d) = (tt.rows(), tt.cols());
        let mut data = Vec::with_capacity(ids.len() * d);
        for &id in ids {
            assert!(id < rows, "token id {id} out of range for table of {rows}");
            data.extend_from_slice(&tt.data()[id * d..(id + 1) * d]);
        }
        let rg = self.nodes[table.0].requires_grad;
        self.push(
            Tensor::from_vec(vec![ids.len(), d], data),
            Op::Embed {
                table,
                ids: ids.to_vec(),
            },
            rg,
        )
    }

    pub fn slice_rows(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let (m, n) = (tx.rows(), tx.cols());
        assert!(start + len <= m, "row slice out of range");
        let data = tx.data()[start * n..(start + len) * n].to_vec();
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            Tensor::from_vec(vec![len, n], data),
            Op::SliceRows { x, start, len },
            rg,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Var {
        let tx = &self.nodes[x.0].value;
        let (m, n) = (tx.rows(), tx.cols());
        assert!(start + len <= n, "column slice out of range");
        let mut data = Vec::with_capacity(m * len);
        for i in 0..m {
            data.extend_from_slice(&tx.data()[i * n + start..i * n + start + len]);
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            Tensor::from_vec(vec![m, len], data),
            Op::SliceCols { x, start, len },
            rg,
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_rows needs at least one part");
        let n = self.nodes[parts[0].0].value.cols();
        let mut data = Vec::new();
        let mut rows = 0;
        for &p in parts {
            let tp = &self.nodes[p.0].value;
            assert_eq!(tp.cols(), n, "concat_rows column mismatch");
            rows += tp.rows();
            data.extend_from_slice(tp.data());
        }
        let rg = self.any_grad(parts);
        self.push(
            Tensor::from_vec(vec![rows, n], data),
            Op::ConcatRows(parts.to_vec()),
            rg,
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Var {
        assert!(!parts.is_empty(), "concat_cols needs at least one part");
        let m = self.nodes[parts[0].0].value.rows();
        let widths: Vec<usize> = parts
            .iter()
            .map(|&p| {
                let tp = &self.nodes[p.0].value;
                assert_eq!(tp.rows(), m, "concat_cols row mismatch");
                tp.cols()
            })
            .collect();
        let n: usize = widths.iter().sum();
        let mut data = vec![0.0; m * n];
        let mut col = 0;
        for (&p, &w) in parts.iter().zip(&widths) {
            let pd = self.nodes[p.0].value.data();
            for i in 0..m {
                data[i * n + col..i * n + col + w].copy_from_slice(&pd[i * w..(i + 1) * w]);
            }
            col += w;
        }
        let rg = self.any_grad(parts);
        self.push(
            Tensor::from_vec(vec![m, n], data),
            Op::ConcatCols(parts.to_vec()),
            rg,
        )
    }

    /// Column means: `[m,n] -> [1,n]`.
    pub fn mean_rows(&mut self, x: Var) -> Var {
        let tx = &self.nodes[x.0].value;
        let (m, n) = (tx.rows(), tx.cols());
        let xd = tx.data();
        let mut data = vec![0.0; n];
        for i in 0..m {
            for j in 0..n {
                data[j] += xd[i * n + j];
            }
        }
        for v in &mut data {
            *v /= m as f64;
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(Tensor::from_vec(vec![1, n], data), Op::MeanRows(x), rg)
    }

    /// Repeat `x` vertically `times` times.
    pub fn tile_rows(&mut self, x: Var, times: usize) -> Var {
        assert!(times >= 1, "tile_rows needs times >= 1");
        let tx = &self.nodes[x.0].value;
        let (m, n) = (tx.rows(), tx.cols());
        let mut data = Vec::with_capacity(m * n * times);
        for _ in 0..times {
            data.extend_from_slice(tx.data());
        }
        let rg = self.nodes[x.0].requires_grad;
        self.push(
            Tensor::from_vec(vec![m * times, n], data),
            Op::TileRows { x, times },
            rg,
        )
    }

    fn grad_buf(&mut self, v: Var) -> &mut Vec<f64> {
        let node = &mut self.nodes[v.0];
        let len = node.value.len();
        node.grad.get_or_insert_with(|| vec![0.0; len])
    }

    fn add_into(&mut self, v: Var, contrib: &[f64]) {
        if !self.nodes[v.0].requires_grad {
            return;
        }
        let buf = self.grad_buf(v);
        debug_assert_eq!(buf.len(), contrib.len());
        for (g, c) in buf.iter_mut().zip(contrib) {
            *g += c;
        }
    }

    /// Populate gradients of every tracked ancestor of a scalar `root`.
    ///
    /// Nodes are visited exactly once in reverse creation order; parents
    /// accumulate left to right, so results are deterministic.
    pub fn backward(&mut self, root: Var) {
        assert!(
            self.nodes[root.0].value.is_scalar(),
            "backward root must be a scalar"
        );
        if !self.nodes[root.0].requires_grad {
            return;
        }
        self.grad_buf(root)[0] = 1.0;

        for idx in (0..=root.0).rev() {
            if !self.nodes[idx].requires_grad || self.nodes[idx].grad.is_none() {
                continue;
            }
            let upstream = self.nodes[idx].grad.clone().unwrap();
            let op = self.nodes[idx].op.clone();
            match op {
                Op::Leaf => {}
                Op::Matmul(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.cols());
                    if self.nodes[a.0].requires_grad {
                        // dA = dC * B^T
                        let da = matmul_nt_raw(&upstream, tb.data(), m, n, k);
                        self.add_into(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = A^T * dC
                        let db = matmul_tn_raw(self.nodes[a.0].value.data(), &upstream, m, k, n);
                        self.add_into(b, &db);
                    }
                }
                Op::MatmulNT(a, b) => {
                    let (ta, tb) = (&self.nodes[a.0].value, &self.nodes[b.0].value);
                    let (m, k, n) = (ta.rows(), ta.cols(), tb.rows());
                    if self.nodes[a.0].requires_grad {
                        // dA = dC * B
                        let da = matmul_raw(&upstream, tb.data(), m, n, k);
                        self.add_into(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        // dB = dC^T * A
                        let db = matmul_tn_raw(&upstream, self.nodes[a.0].value.data(), m, n, k);
                        self.add_into(b, &db);
                    }
                }
                Op::Add(a, b) => {
                    self.add_into(a, &upstream);
                    self.add_into(b, &upstream);
                }
                Op::Sub(a, b) => {
                    self.add_into(a, &upstream);
                    let neg: Vec<f64> = upstream.iter().map(|g| -g).collect();
                    self.add_into(b, &neg);
                }
                Op::Mul(a, b) => {
                    if self.nodes[a.0].requires_grad {
                        let bd = self.nodes[b.0].value.data();
                        let da: Vec<f64> = upstream.iter().zip(bd).map(|(g, v)| g * v).collect();
                        self.add_into(a, &da);
                    }
                    if self.nodes[b.0].requires_grad {
                        let ad = self.nodes[a.0].value.data();
                        let db: Vec<f64> = upstream.iter().zip(ad).map(|(g, v)| g * v).collect();
                        self.add_into(b, &db);
                    }
                }
                Op::Scale(a, c) => {
                    let da: Vec<f64> = upstream.iter().map(|g| g * c).collect();
                    self.add_into(a, &da);
                }
                Op::AddBias(x, bias) => {
                    self.add_into(x, &upstream);
                    if self.nodes[bias.0].requires_grad {
                        let n = self.nodes[bias.0].value.len();
                        let mut db = vec![0.0; n];
                        for (i, g) in upstream.iter().enumerate() {
                            db[i % n] += g;
                        }
                        self.add_into(bias, &db);
                    }
                }
                Op::Relu(a) => {
                    let xd = self.nodes[a.0].value.data();
                    let da: Vec<f64> = upstream
                        .iter()
                        .zip(xd)
                        .map(|(g, &x)| if x > 0.0 { *g } else { 0.0 })
                        .collect();
                    self.add_into(a, &da);
                }
                Op::Gelu(a) => {
                    let xd = self.nodes[a.0].value.data();
                    let da: Vec<f64> = upstream
                        .iter()
                        .zip(xd)
                        .map(|(g, &x)| g * (gauss_cdf(x) + x * gauss_pdf(x)))
                        .collect();
                    self.add_into(a, &da);
                }
                Op::LayerNorm { x, gain, bias, eps } => {
                    let tx = &self.nodes[x.0].value;
                    let (m, d) = (tx.rows(), tx.cols());
                    let xd = tx.data();
                    let gd = self.nodes[gain.0].value.data();
                    let mut dx = vec![0.0; m * d];
                    let mut dg = vec![0.0; d];
                    let mut db = vec![0.0; d];
                    for i in 0..m {
                        let row = &xd[i * d..(i + 1) * d];
                        let up = &upstream[i * d..(i + 1) * d];
                        let mean = row.iter().sum::<f64>() / d as f64;
                        let var =
                            row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
                        let inv_std = 1.0 / (var + eps).sqrt();
                        let xhat: Vec<f64> = row.iter().map(|&v| (v - mean) * inv_std).collect();
                        let dxhat: Vec<f64> = up.iter().zip(gd).map(|(u, g)| u * g).collect();
                        let mean_dxhat = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dxhat_xhat =
                            dxhat.iter().zip(&xhat).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        for j in 0..d {
                            dx[i * d + j] =
                                inv_std * (dxhat[j] - mean_dxhat - xhat[j] * mean_dxhat_xhat);
                            dg[j] += up[j] * xhat[j];
                            db[j] += up[j];
                        }
                    }
                    self.add_into(x, &dx);
                    self.add_into(gain, &dg);
                    self.add_into(bias, &db);
                }
                Op::Softmax(a) => {
                    let ty = &self.nodes[idx].value;
                    let (m, n) = (ty.rows(), ty.cols());
                    let yd = ty.data();
                    let mut da = vec![0.0; m * n];
                    for i in 0..m {
                        let y = &yd[i * n..(i + 1) * n];
                        let up = &upstream[i * n..(i + 1) * n];
                        let dot: f64 = y.iter().zip(up).map(|(a, b)| a * b).sum();
                        for j in 0..n {
                            da[i * n + j] = y[j] * (up[j] - dot);
                        }
                    }
                    self.add_into(a, &da);
                }
                Op::SoftmaxXent { logits, labels } => {
                    let tl = &self.nodes[logits.0].value;
                    let (m, n) = (tl.rows(), tl.cols());
                    let xd = tl.data();
                    let scale = upstream[0] / m as f64;
                    let mut dl = vec![0.0; m * n];
                    for i in 0..m {
                        let row = &xd[i * n..(i + 1) * n];
                        let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
                        let sum: f64 = row.iter().map(|&v| (v - max).exp()).sum();
                        for j in 0..n {
                            let p = (row[j] - max).exp() / sum;
                            let ind = if labels[i] == j { 1.0 } else { 0.0 };
                            dl[i * n + j] = scale * (p - ind);
                        }
                    }
                    self.add_into(logits, &dl);
                }
                Op::Mse(a, b) => {
                    let n = self.nodes[a.0].value.len() as f64;
                    let scale = upstream[0] * 2.0 / n;
                    if self.nodes[a.0].requires_grad || self.nodes[b.0].requires_grad {
                        let diff: Vec<f64> = self.nodes[a.0]
                            .value
                            .data()
                            .iter()
                            .zip(self.nodes[b.0].value.data())
                            .map(|(&x, &y)| scale * (x - y))
                            .collect();
                        self.add_into(a, &diff);
                        let neg: Vec<f64> = diff.iter().map(|v| -v).collect();
                        self.add_into(b, &neg);
                    }
                }
                Op::SumAll(a) => {
                    let da = vec![upstream[0]; self.nodes[a.0].value.len()];
                    self.add_into(a, &da);
                }
                Op::Embed { table, ids } => {
                    if self.nodes[table.0].requires_grad {
                        let d = self.nodes[table.0].value.cols();
                        let mut dt = vec![0.0; self.nodes[table.0].value.len()];
                        for (t, &id) in ids.iter().enumerate() {
                            for j in 0..d {
                                dt[id * d + j] += upstream[t * d + j];
                            }
                        }
                        self.add_into(table, &dt);
                    }
                }
                Op::SliceRows { x, start, len } => {
                    if self.nodes[x.0].requires_grad {
                        let n = self.nodes[x.0].value.cols();
                        let mut dx = vec![0.0; self.nodes[x.0].value.len()];
                        dx[start * n..(start + len) * n].copy_from_slice(&upstream);
                        self.add_into(x, &dx);
                    }
                }
                Op::SliceCols { x, start, len } => {
                    if self.nodes[x.0].requires_grad {
                        let (m, n) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                        let mut dx = vec![0.0; m * n];
                        for i in 0..m {
                            dx[i * n + start..i * n + start + len]
                                .copy_from_slice(&upstream[i * len..(i + 1) * len]);
                        }
                        self.add_into(x, &dx);
                    }
                }
                Op::ConcatRows(parts) => {
                    let mut row = 0;
                    for &p in &parts {
                        let tp = &self.nodes[p.0].value;
                        let (pm, pn) = (tp.rows(), tp.cols());
                        let chunk = upstream[row * pn..(row + pm) * pn].to_vec();
                        self.add_into(p, &chunk);
                        row += pm;
                    }
                }
                Op::ConcatCols(parts) => {
                    let m = self.nodes[parts[0].0].value.rows();
                    let n = self.nodes[idx].value.cols();
                    let mut col = 0;
                    for &p in &parts {
                        let w = self.nodes[p.0].value.cols();
                        if self.nodes[p.0].requires_grad {
                            let mut chunk = vec![0.0; m * w];
                            for i in 0..m {
                                chunk[i * w..(i + 1) * w]
                                    .copy_from_slice(&upstream[i * n + col..i * n + col + w]);
                            }
                            self.add_into(p, &chunk);
                        }
                        col += w;
                    }
                }
                Op::MeanRows(x) => {
                    if self.nodes[x.0].requires_grad {
                        let (m, n) = (self.nodes[x.0].value.rows(), self.nodes[x.0].value.cols());
                        let mut dx = vec![0.0; m * n];
                        for i in 0..m {
                            for j in 0..n {
                                dx[i * n + j] = upstream[j] / m as f64;
                            }
                        }
                        self.add_into(x, &dx);
                    }
                }
                Op::TileRows { x, times } => {
                    if self.nodes[x.0].requires_grad {
                        let len = self.nodes[x.0].value.len();
                        let mut dx = vec![0.0; len];
                        for t in 0..times {
                            for i in 0..len {
                                dx[i] += upstream[t * len + i];
                            }
                        }
                        self.add_into(x, &dx);
                    }
                }
            }
        }
    }

    /// Accumulate tape gradients back into bound store parameters.
    ///
    /// Each bound parameter's slot is reset first, so the result reflects
    /// this tape alone; unbound parameters are left untouched.
    pub fn write_grads(&self, store: &mut ParamStore) {
        for &(id, _) in &self.bindings {
            store.entry_mut(id).grad = None;
        }
        for &(id, var) in &self.bindings {
            let node = &self.nodes[var.0];
            let entry = store.entry_mut(id);
            let len = entry.value.len();
            let slot = entry.grad.get_or_insert_with(|| vec![0.0; len]);
            if let Some(g) = &node.grad {
                for (s, v) in slot.iter_mut().zip(g) {
                    *s += v;
                }
            }
        }
    }
}
