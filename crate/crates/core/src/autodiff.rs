//! Define-by-run reverse-mode differentiation over [`Tensor`]s.
//!
//! A [`Graph`] is the computation tape: every op appends a node whose inputs
//! are earlier nodes, so node order is already a topological order. Calling
//! [`Graph::backward`] consumes the tape and walks it once in reverse.
//!
//! Leaves created with `requires_grad == false` (frozen weights, data) never
//! receive a gradient, and no gradient work is done for subgraphs that only
//! depend on such leaves.

use crate::error::{Error, Result};
use crate::linalg;
use crate::tensor::Tensor;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul {
        a: Var,
        b: Var,
        m: usize,
        k: usize,
        n: usize,
    },
    BatchMatMul {
        a: Var,
        b: Var,
        g: usize,
        m: usize,
        k: usize,
        n: usize,
        transpose_b: bool,
    },
    Add(Var, Var),
    Sub(Var, Var),
    Mul(Var, Var),
    AddRow {
        x: Var,
        bias: Var,
    },
    Scale(Var, f64),
    Gelu(Var),
    Softmax {
        x: Var,
        outer: usize,
        len: usize,
        inner: usize,
    },
    LayerNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    Ln(Var),
    ClampMin(Var, f64),
    XLogX(Var),
    Sum(Var),
    Mean(Var),
    CrossEntropy {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    GatherRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Var, Var),
    SplitHeads {
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
    MergeHeads {
        x: Var,
        batch: usize,
        tokens: usize,
        heads: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
}

/// The computation tape. Build one per forward pass.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
}

/// Gradients produced by [`Graph::backward`], keyed by leaf.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, v: Var) -> Option<&Tensor> {
        self.grads.get(v.0).and_then(|g| g.as_ref())
    }

    pub fn take(&mut self, v: Var) -> Option<Tensor> {
        self.grads.get_mut(v.0).and_then(|g| g.take())
    }

    /// Number of leaves that received a gradient.
    pub fn len(&self) -> usize {
        self.grads.iter().filter(|g| g.is_some()).count()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn shape_err(op: &'static str, a: &Tensor, b: &Tensor) -> Error {
    Error::Shape {
        op,
        lhs: a.shape().to_vec(),
        rhs: b.shape().to_vec(),
    }
}

const GELU_C: f64 = 0.797_884_560_802_865_4; // sqrt(2/pi)
const GELU_A: f64 = 0.044_715;

/// `tanh` through one `exp`; libm's `tanh` is about three times slower and
/// dominated the MLP. Absolute error stays near machine epsilon.
fn tanh_exp(z: f64) -> f64 {
    1.0 - 2.0 / ((2.0 * z).exp() + 1.0)
}

/// Tanh approximation of GELU.
pub fn gelu_scalar(x: f64) -> f64 {
    0.5 * x * (1.0 + tanh_exp(GELU_C * (x + GELU_A * x * x * x)))
}

fn gelu_grad_scalar(x: f64) -> f64 {
    let t = tanh_exp(GELU_C * (x + GELU_A * x * x * x));
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * GELU_C * (1.0 + 3.0 * GELU_A * x * x)
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

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.push(value, Op::Leaf, requires_grad)
    }

    pub fn param(&mut self, value: Tensor) -> Var {
        self.leaf(value, true)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    /// A constant copy of `v`: same value, no gradient flows back through it.
    pub fn detach(&mut self, v: Var) -> Var {
        let value = self.value(v).clone();
        self.constant(value)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[0] {
            return Err(shape_err("matmul", ta, tb));
        }
        let (m, k, n) = (ta.shape()[0], ta.shape()[1], tb.shape()[1]);
        let out = linalg::gemm(ta.data(), false, tb.data(), false, m, k, n);
        let value = Tensor::new(vec![m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::MatMul { a, b, m, k, n }, rg))
    }

    /// Group-wise matmul of `[g, m, k] x [g, k, n]`, or `[g, m, k] x [g, n, k]^T`
    /// when `transpose_b` is set.
    pub fn batch_matmul(&mut self, a: Var, b: Var, transpose_b: bool) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 3 || tb.rank() != 3 || ta.shape()[0] != tb.shape()[0] {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let (g, m, k) = (ta.shape()[0], ta.shape()[1], ta.shape()[2]);
        let (bk, n) = if transpose_b {
            (tb.shape()[2], tb.shape()[1])
        } else {
            (tb.shape()[1], tb.shape()[2])
        };
        if bk != k {
            return Err(shape_err("batch_matmul", ta, tb));
        }
        let mut out = Vec::with_capacity(g * m * n);
        for gi in 0..g {
            let ag = &ta.data()[gi * m * k..(gi + 1) * m * k];
            let bg = &tb.data()[gi * k * n..(gi + 1) * k * n];
            if transpose_b {
                out.extend(linalg::gemm(ag, false, bg, true, m, k, n));
            } else {
                out.extend(linalg::gemm(ag, false, bg, false, m, k, n));
            }
        }
        let value = Tensor::new(vec![g, m, n], out)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(
            value,
            Op::BatchMatMul {
                a,
                b,
                g,
                m,
                k,
                n,
                transpose_b,
            },
            rg,
        ))
    }

    fn zip_same(
        &mut self,
        a: Var,
        b: Var,
        name: &'static str,
        f: impl Fn(f64, f64) -> f64,
    ) -> Result<Tensor> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.shape() != tb.shape() {
            return Err(shape_err(name, ta, tb));
        }
        let data = ta.data().iter().zip(tb.data()).map(|(&x, &y)| f(x, y)).collect();
        Tensor::new(ta.shape().to_vec(), data)
    }

    fn map(&self, x: Var, f: impl Fn(f64) -> f64) -> Tensor {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| f(v)).collect();
        Tensor::new(t.shape().to_vec(), data).expect("same shape")
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "add", |x, y| x + y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn sub(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "sub", |x, y| x - y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Sub(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.zip_same(a, b, "mul", |x, y| x * y)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Adds a rank-1 `bias` to every row of `x` (broadcast over leading axes).
    pub fn add_row(&mut self, x: Var, bias: Var) -> Result<Var> {
        let (tx, tb) = (self.value(x), self.value(bias));
        let n = *tx.shape().last().unwrap();
        if tb.rank() != 1 || tb.shape()[0] != n {
            return Err(shape_err("add_row", tx, tb));
        }
        let mut data = tx.data().to_vec();
        for row in data.chunks_exact_mut(n) {
            for (o, &b) in row.iter_mut().zip(tb.data()) {
                *o += b;
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), data)?;
        let rg = self.rg(&[x, bias]);
        Ok(self.push(value, Op::AddRow { x, bias }, rg))
    }

    pub fn scale(&mut self, x: Var, c: f64) -> Var {
        let value = self.map(x, |v| v * c);
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale(x, c), rg)
    }

    pub fn gelu(&mut self, x: Var) -> Var {
        let value = self.map(x, gelu_scalar);
        let rg = self.rg(&[x]);
        self.push(value, Op::Gelu(x), rg)
    }

    /// Softmax along `axis`, computed with max subtraction.
    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let t = self.value(x);
        if axis >= t.rank() {
            return Err(Error::Contract(format!(
                "softmax axis {axis} out of range for shape {:?}",
                t.shape()
            )));
        }
        let outer: usize = t.shape()[..axis].iter().product();
        let len = t.shape()[axis];
        let inner: usize = t.shape()[axis + 1..].iter().product();
        let src = t.data();
        let mut out = vec![0.0; src.len()];
        if inner == 1 && len > 0 {
            for (row, dst) in src.chunks_exact(len).zip(out.chunks_exact_mut(len)) {
                let mx = row.iter().fold(f64::NEG_INFINITY, |m, &v| m.max(v));
                let mut sum = 0.0;
                for (d, &v) in dst.iter_mut().zip(row) {
                    *d = (v - mx).exp();
                    sum += *d;
                }
                dst.iter_mut().for_each(|d| *d /= sum);
            }
        }
        for o in 0..if inner == 1 { 0 } else { outer } {
            for i in 0..inner {
                let at = |j: usize| (o * len + j) * inner + i;
                let mut mx = f64::NEG_INFINITY;
                for j in 0..len {
                    mx = mx.max(src[at(j)]);
                }
                let mut sum = 0.0;
                for j in 0..len {
                    let e = (src[at(j)] - mx).exp();
                    out[at(j)] = e;
                    sum += e;
                }
                for j in 0..len {
                    out[at(j)] /= sum;
                }
            }
        }
        let value = Tensor::new(t.shape().to_vec(), out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            },
            rg,
        ))
    }

    /// Normalizes the last axis to zero mean / unit variance, then applies
    /// `gamma * xhat + beta`. Uses the biased variance.
    pub fn layer_norm(&mut self, x: Var, gamma: Var, beta: Var, eps: f64) -> Result<Var> {
        if eps <= 0.0 {
            return Err(Error::Contract(format!("layer_norm eps must be > 0, got {eps}")));
        }
        let (tx, tg, tb) = (self.value(x), self.value(gamma), self.value(beta));
        let d = *tx.shape().last().unwrap();
        if tg.shape() != [d] {
            return Err(shape_err("layer_norm", tx, tg));
        }
        if tb.shape() != [d] {
            return Err(shape_err("layer_norm", tx, tb));
        }
        let rows = tx.numel() / d;
        let mut xhat = vec![0.0; tx.numel()];
        let mut rstd = vec![0.0; rows];
        let mut out = vec![0.0; tx.numel()];
        for r in 0..rows {
            let row = &tx.data()[r * d..(r + 1) * d];
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let rs = 1.0 / (var + eps).sqrt();
            rstd[r] = rs;
            for j in 0..d {
                let h = (row[j] - mean) * rs;
                xhat[r * d + j] = h;
                out[r * d + j] = tg.data()[j] * h + tb.data()[j];
            }
        }
        let value = Tensor::new(tx.shape().to_vec(), out)?;
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            value,
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            },
            rg,
        ))
    }

    /// Natural log. Inputs must be positive.
    pub fn ln(&mut self, x: Var) -> Var {
        let value = self.map(x, f64::ln);
        let rg = self.rg(&[x]);
        self.push(value, Op::Ln(x), rg)
    }

    /// `max(x, lo)`; the gradient is zero where the floor is active.
    pub fn clamp_min(&mut self, x: Var, lo: f64) -> Var {
        let value = self.map(x, |v| v.max(lo));
        let rg = self.rg(&[x]);
        self.push(value, Op::ClampMin(x, lo), rg)
    }

    /// `x * ln(x)` with the convention `0 * ln 0 = 0`.
    pub fn xlogx(&mut self, x: Var) -> Var {
        let value = self.map(x, |v| if v == 0.0 { 0.0 } else { v * v.ln() });
        let rg = self.rg(&[x]);
        self.push(value, Op::XLogX(x), rg)
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    pub fn mean(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let s = t.data().iter().sum::<f64>() / t.numel() as f64;
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Mean(x), rg)
    }

    /// Mean over rows of `-log softmax(logits)[label]`, via log-sum-exp.
    pub fn cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let t = self.value(logits);
        if t.rank() != 2 || t.shape()[0] != labels.len() {
            return Err(Error::Shape {
                op: "cross_entropy",
                lhs: t.shape().to_vec(),
                rhs: vec![labels.len()],
            });
        }
        let (b, c) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = labels.iter().find(|&&y| y >= c) {
            return Err(Error::Contract(format!("label {bad} out of range for {c} classes")));
        }
        let mut probs = vec![0.0; b * c];
        let mut total = 0.0;
        for (r, &y) in labels.iter().enumerate() {
            let row = t.row(r);
            let mx = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let sum: f64 = row.iter().map(|v| (v - mx).exp()).sum();
            let lse = mx + sum.ln();
            total += lse - row[y];
            for j in 0..c {
                probs[r * c + j] = (row[j] - lse).exp();
            }
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(total / b as f64),
            Op::CrossEntropy {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    /// Selects rows of a 2-D tensor; indices may repeat.
    pub fn gather_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 {
            return Err(Error::Contract(format!(
                "gather_rows expects a matrix, got {:?}",
                t.shape()
            )));
        }
        let (rows, cols) = (t.shape()[0], t.shape()[1]);
        if let Some(&bad) = idx.iter().find(|&&i| i >= rows) {
            return Err(Error::Contract(format!("row {bad} out of range for {rows} rows")));
        }
        let mut data = Vec::with_capacity(idx.len() * cols);
        for &i in idx {
            data.extend_from_slice(t.row(i));
        }
        let value = Tensor::new(vec![idx.len(), cols], data)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::GatherRows {
                x,
                idx: idx.to_vec(),
            },
            rg,
        ))
    }

    pub fn concat_rows(&mut self, a: Var, b: Var) -> Result<Var> {
        let (ta, tb) = (self.value(a), self.value(b));
        if ta.rank() != 2 || tb.rank() != 2 || ta.shape()[1] != tb.shape()[1] {
            return Err(shape_err("concat_rows", ta, tb));
        }
        let mut data = ta.data().to_vec();
        data.extend_from_slice(tb.data());
        let value = Tensor::new(vec![ta.shape()[0] + tb.shape()[0], ta.shape()[1]], data)?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::ConcatRows(a, b), rg))
    }

    /// `[batch*tokens, heads*dh]` -> `[batch*heads, tokens, dh]`.
    pub fn split_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 2 || t.shape()[0] % batch != 0 || t.shape()[1] % heads != 0 {
            return Err(Error::Contract(format!(
                "split_heads: {:?} not divisible into {batch} samples x {heads} heads",
                t.shape()
            )));
        }
        let tokens = t.shape()[0] / batch;
        let dh = t.shape()[1] / heads;
        let out = permute_heads(t.data(), batch, tokens, heads, dh, true);
        let value = Tensor::new(vec![batch * heads, tokens, dh], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
            },
            rg,
        ))
    }

    /// Inverse of [`Graph::split_heads`].
    pub fn merge_heads(&mut self, x: Var, batch: usize, heads: usize) -> Result<Var> {
        let t = self.value(x);
        if t.rank() != 3 || t.shape()[0] != batch * heads {
            return Err(Error::Contract(format!(
                "merge_heads: {:?} is not [{batch}*{heads}, tokens, dh]",
                t.shape()
            )));
        }
        let (tokens, dh) = (t.shape()[1], t.shape()[2]);
        let out = permute_heads(t.data(), batch, tokens, heads, dh, false);
        let value = Tensor::new(vec![batch * tokens, heads * dh], out)?;
        let rg = self.rg(&[x]);
        Ok(self.push(
            value,
            Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
            },
            rg,
        ))
    }

    /// Reverse sweep from a scalar `loss`. Consumes the tape.
    pub fn backward(self, loss: Var) -> Result<Gradients> {
        if self.nodes.is_empty() {
            return Err(Error::Contract("backward on an empty tape".into()));
        }
        if self.value(loss).numel() != 1 {
            return Err(Error::Contract(format!(
                "backward needs a scalar loss, got shape {:?}",
                self.value(loss).shape()
            )));
        }
        let n = self.nodes.len();
        let mut grads: Vec<Option<Vec<f64>>> = (0..n).map(|_| None).collect();
        grads[loss.0] = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(g) = grads[id].take() else { continue };
            if matches!(self.nodes[id].op, Op::Leaf) {
                grads[id] = Some(g);
                continue;
            }
            for (input, contrib) in self.local_grads(id, &g) {
                match &mut grads[input.0] {
                    Some(acc) => {
                        for (a, c) in acc.iter_mut().zip(&contrib) {
                            *a += c;
                        }
                    }
                    slot @ None => *slot = Some(contrib),
                }
            }
        }
        let grads = self
            .nodes
            .iter()
            .zip(grads)
            .map(|(node, g)| match (&node.op, g) {
                (Op::Leaf, Some(g)) if node.requires_grad => {
                    Some(Tensor::new(node.value.shape().to_vec(), g).expect("grad shape"))
                }
                _ => None,
            })
            .collect();
        Ok(Gradients { grads })
    }

    /// Vector-Jacobian products for each differentiable input of node `id`.
    fn local_grads(&self, id: usize, g: &[f64]) -> Vec<(Var, Vec<f64>)> {
        let node = &self.nodes[id];
        let wants = |v: &Var| self.nodes[v.0].requires_grad;
        let val = |v: &Var| self.nodes[v.0].value.data();
        let mut out = Vec::with_capacity(3);
        match &node.op {
            Op::Leaf => {}
            Op::MatMul { a, b, m, k, n } => {
                if wants(a) {
                    out.push((*a, linalg::gemm(g, false, val(b), true, *m, *n, *k)));
                }
                if wants(b) {
                    out.push((*b, linalg::gemm(val(a), true, g, false, *k, *m, *n)));
                }
            }
            Op::BatchMatMul {
                a,
                b,
                g: groups,
                m,
                k,
                n,
                transpose_b,
            } => {
                let (m, k, n) = (*m, *k, *n);
                let (av, bv) = (val(a), val(b));
                let mut ga = wants(a).then(|| Vec::with_capacity(av.len()));
                let mut gb = wants(b).then(|| Vec::with_capacity(bv.len()));
                for gi in 0..*groups {
                    let gg = &g[gi * m * n..(gi + 1) * m * n];
                    let ag = &av[gi * m * k..(gi + 1) * m * k];
                    let bg = &bv[gi * k * n..(gi + 1) * k * n];
                    if let Some(ga) = ga.as_mut() {
                        // dA = dC * B^T, where B is [k,n] (or stored [n,k] when transposed)
                        if *transpose_b {
                            ga.extend(linalg::gemm(gg, false, bg, false, m, n, k));
                        } else {
                            ga.extend(linalg::gemm(gg, false, bg, true, m, n, k));
                        }
                    }
                    if let Some(gb) = gb.as_mut() {
                        if *transpose_b {
                            // stored B is [n,k]: dB = dC^T * A
                            gb.extend(linalg::gemm(gg, true, ag, false, n, m, k));
                        } else {
                            gb.extend(linalg::gemm(ag, true, gg, false, k, m, n));
                        }
                    }
                }
                if let Some(ga) = ga {
                    out.push((*a, ga));
                }
                if let Some(gb) = gb {
                    out.push((*b, gb));
                }
            }
            Op::Add(a, b) => {
                if wants(a) {
                    out.push((*a, g.to_vec()));
                }
                if wants(b) {
                    out.push((*b, g.to_vec()));
                }
            }
            Op::Sub(a, b) => {
                if wants(a) {
                    out.push((*a, g.to_vec()));
                }
                if wants(b) {
                    out.push((*b, g.iter().map(|v| -v).collect()));
                }
            }
            Op::Mul(a, b) => {
                if wants(a) {
                    out.push((*a, g.iter().zip(val(b)).map(|(g, y)| g * y).collect()));
                }
                if wants(b) {
                    out.push((*b, g.iter().zip(val(a)).map(|(g, x)| g * x).collect()));
                }
            }
            Op::AddRow { x, bias } => {
                if wants(x) {
                    out.push((*x, g.to_vec()));
                }
                if wants(bias) {
                    let n = val(bias).len();
                    let mut gb = vec![0.0; n];
                    for row in g.chunks_exact(n) {
                        for (acc, v) in gb.iter_mut().zip(row) {
                            *acc += v;
                        }
                    }
                    out.push((*bias, gb));
                }
            }
            Op::Scale(x, c) => {
                if wants(x) {
                    out.push((*x, g.iter().map(|v| v * c).collect()));
                }
            }
            Op::Gelu(x) => {
                if wants(x) {
                    let d = g
                        .iter()
                        .zip(val(x))
                        .map(|(g, &x)| g * gelu_grad_scalar(x))
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::Softmax {
                x,
                outer,
                len,
                inner,
            } => {
                if wants(x) {
                    let y = node.value.data();
                    let mut dx = vec![0.0; y.len()];
                    if *inner == 1 && *len > 0 {
                        for ((yr, gr), dr) in y.chunks_exact(*len).zip(g.chunks_exact(*len)).zip(dx.chunks_exact_mut(*len)) {
                            let dot: f64 = gr.iter().zip(yr).map(|(a, b)| a * b).sum();
                            for ((d, &yv), &gv) in dr.iter_mut().zip(yr).zip(gr) {
                                *d = yv * (gv - dot);
                            }
                        }
                    }
                    for o in 0..if *inner == 1 { 0 } else { *outer } {
                        for i in 0..*inner {
                            let at = |j: usize| (o * len + j) * inner + i;
                            let dot: f64 = (0..*len).map(|j| g[at(j)] * y[at(j)]).sum();
                            for j in 0..*len {
                                dx[at(j)] = y[at(j)] * (g[at(j)] - dot);
                            }
                        }
                    }
                    out.push((*x, dx));
                }
            }
            Op::LayerNorm {
                x,
                gamma,
                beta,
                xhat,
                rstd,
            } => {
                let gv = val(gamma);
                let d = gv.len();
                if wants(x) {
                    let mut dx = vec![0.0; xhat.len()];
                    for (r, &rs) in rstd.iter().enumerate() {
                        let span = r * d..(r + 1) * d;
                        let (gr, hr) = (&g[span.clone()], &xhat[span.clone()]);
                        let mut m1 = 0.0;
                        let mut m2 = 0.0;
                        for j in 0..d {
                            let dh = gr[j] * gv[j];
                            m1 += dh;
                            m2 += dh * hr[j];
                        }
                        m1 /= d as f64;
                        m2 /= d as f64;
                        for j in 0..d {
                            dx[r * d + j] = rs * (gr[j] * gv[j] - m1 - hr[j] * m2);
                        }
                    }
                    out.push((*x, dx));
                }
                if wants(gamma) {
                    let mut dg = vec![0.0; d];
                    for (gr, hr) in g.chunks_exact(d).zip(xhat.chunks_exact(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                    out.push((*gamma, dg));
                }
                if wants(beta) {
                    let mut db = vec![0.0; d];
                    for gr in g.chunks_exact(d) {
                        for j in 0..d {
                            db[j] += gr[j];
                        }
                    }
                    out.push((*beta, db));
                }
            }
            Op::Ln(x) => {
                if wants(x) {
                    out.push((*x, g.iter().zip(val(x)).map(|(g, x)| g / x).collect()));
                }
            }
            Op::ClampMin(x, lo) => {
                if wants(x) {
                    let d = g
                        .iter()
                        .zip(val(x))
                        .map(|(g, &x)| if x < *lo { 0.0 } else { *g })
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::XLogX(x) => {
                if wants(x) {
                    // d/dx x ln x = ln x + 1; at 0 the subgradient is taken as 0
                    let d = g
                        .iter()
                        .zip(val(x))
                        .map(|(g, &x)| if x == 0.0 { 0.0 } else { g * (x.ln() + 1.0) })
                        .collect();
                    out.push((*x, d));
                }
            }
            Op::Sum(x) => {
                if wants(x) {
                    out.push((*x, vec![g[0]; val(x).len()]));
                }
            }
            Op::Mean(x) => {
                if wants(x) {
                    let n = val(x).len();
                    out.push((*x, vec![g[0] / n as f64; n]));
                }
            }
            Op::CrossEntropy {
                logits,
                labels,
                probs,
            } => {
                if wants(logits) {
                    let b = labels.len();
                    let c = probs.len() / b;
                    let scale = g[0] / b as f64;
                    let mut d: Vec<f64> = probs.iter().map(|p| p * scale).collect();
                    for (r, &y) in labels.iter().enumerate() {
                        d[r * c + y] -= scale;
                    }
                    out.push((*logits, d));
                }
            }
            Op::GatherRows { x, idx } => {
                if wants(x) {
                    let src = &self.nodes[x.0].value;
                    let cols = src.shape()[1];
                    let mut d = vec![0.0; src.numel()];
                    for (r, &i) in idx.iter().enumerate() {
                        for j in 0..cols {
                            d[i * cols + j] += g[r * cols + j];
                        }
                    }
                    out.push((*x, d));
                }
            }
            Op::ConcatRows(a, b) => {
                let na = val(a).len();
                if wants(a) {
                    out.push((*a, g[..na].to_vec()));
                }
                if wants(b) {
                    out.push((*b, g[na..].to_vec()));
                }
            }
            Op::SplitHeads {
                x,
                batch,
                tokens,
                heads,
            } => {
                if wants(x) {
                    let dh = g.len() / (batch * tokens * heads);
                    out.push((*x, permute_heads(g, *batch, *tokens, *heads, dh, false)));
                }
            }
            Op::MergeHeads {
                x,
                batch,
                tokens,
                heads,
            } => {
                if wants(x) {
                    let dh = g.len() / (batch * tokens * heads);
                    out.push((*x, permute_heads(g, *batch, *tokens, *heads, dh, true)));
                }
            }
        }
        out
    }
}

/// Moves between token-major `[b, t, h, e]` and head-major `[b, h, t, e]`.
fn permute_heads(
    src: &[f64],
    batch: usize,
    tokens: usize,
    heads: usize,
    dh: usize,
    to_head_major: bool,
) -> Vec<f64> {
    let mut out = vec![0.0; src.len()];
    for b in 0..batch {
        for t in 0..tokens {
            for h in 0..heads {
                let tm = ((b * tokens + t) * heads + h) * dh;
                let hm = ((b * heads + h) * tokens + t) * dh;
                let (from, to) = if to_head_major { (tm, hm) } else { (hm, tm) };
                out[to..to + dh].copy_from_slice(&src[from..from + dh]);
            }
        }
    }
    out
}

/// Outcome of a finite-difference comparison.
#[derive(Clone, Debug, PartialEq)]
pub struct GradCheckReport {
    /// max over coordinates of `|analytic - numeric| / max(1, |analytic|)`
    pub max_rel_error: f64,
    /// (param index, flat coordinate) of the worst coordinate
    pub worst: Option<(usize, usize)>,
    pub coordinates: usize,
}

/// Compares the tape's gradient of `f` against central differences with step `h`.
///
/// `f` receives fresh leaf handles for `params` (in order) and must return a
/// scalar node. It is called once with gradients enabled, then twice per
/// coordinate in forward-only mode.
pub fn grad_check<F>(f: F, params: &[Tensor], h: f64) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    let all: Vec<Vec<usize>> = params.iter().map(|p| (0..p.numel()).collect()).collect();
    grad_check_at(f, params, h, &all)
}

/// Like [`grad_check`], restricted to `coords[i]` within `params[i]`.
pub fn grad_check_at<F>(f: F, params: &[Tensor], h: f64, coords: &[Vec<usize>]) -> Result<GradCheckReport>
where
    F: Fn(&mut Graph, &[Var]) -> Result<Var>,
{
    if coords.len() != params.len() || coords.iter().zip(params).any(|(c, p)| c.iter().any(|&i| i >= p.numel())) {
        return Err(Error::Contract("grad_check coordinates do not match the parameters".into()));
    }
    if h <= 0.0 {
        return Err(Error::Contract(format!("grad_check step must be > 0, got {h}")));
    }
    let eval = |ps: &[Tensor], rg: bool| -> Result<(Graph, Var, Vec<Var>)> {
        let mut g = Graph::new();
        let vars: Vec<Var> = ps.iter().map(|p| g.leaf(p.clone(), rg)).collect();
        let loss = f(&mut g, &vars)?;
        Ok((g, loss, vars))
    };
    let (g, loss, vars) = eval(params, true)?;
    let grads = g.backward(loss)?;
    let analytic: Vec<Tensor> = vars
        .iter()
        .zip(params)
        .map(|(v, p)| {
            grads
                .get(*v)
                .cloned()
                .unwrap_or_else(|| Tensor::zeros(p.shape()))
        })
        .collect();

    let mut report = GradCheckReport {
        max_rel_error: 0.0,
        worst: None,
        coordinates: 0,
    };
    let mut work: Vec<Tensor> = params.to_vec();
    for pi in 0..params.len() {
        for &ci in &coords[pi] {
            let orig = params[pi].data()[ci];
            work[pi].data_mut()[ci] = orig + h;
            let (g, l, _) = eval(&work, false)?;
            let fp = g.value(l).item();
            work[pi].data_mut()[ci] = orig - h;
            let (g, l, _) = eval(&work, false)?;
            let fm = g.value(l).item();
            work[pi].data_mut()[ci] = orig;

            let numeric = (fp - fm) / (2.0 * h);
            let an = analytic[pi].data()[ci];
            let err = (an - numeric).abs() / an.abs().max(1.0);
            report.coordinates += 1;
            if err > report.max_rel_error || report.worst.is_none() {
                report.max_rel_error = report.max_rel_error.max(err);
                report.worst = Some((pi, ci));
            }
        }
    }
    Ok(report)
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn rand_tensor(rng: &mut ChaCha8Rng, shape: &[usize]) -> Tensor {
        let n = shape.iter().product();
        Tensor::new(shape.to_vec(), (0..n).map(|_| rng.random_range(-2.0..2.0)).collect())
            .unwrap()
    }

    #[test]
    fn matmul_examples() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::from_rows(&[&[1.0, 2.0], &[3.0, 4.0]]));
        let b = g.constant(Tensor::from_rows(&[&[0.0, 1.0], &[1.0, 0.0]]));
        let c = g.matmul(a, b).unwrap();
        assert_eq!(g.value(c).data(), &[2.0, 1.0, 4.0, 3.0]);

        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let m = rand_tensor(&mut rng, &[3, 4]);
        let i3 = g.constant(Tensor::eye(3));
        let mv = g.constant(m.clone());
        let r = g.matmul(i3, mv).unwrap();
        assert_eq!(g.value(r), &m);

        let z = g.constant(Tensor::zeros(&[2, 3]));
        let any = g.constant(rand_tensor(&mut rng, &[3, 4]));
        let r = g.matmul(z, any).unwrap();
        assert_eq!(g.value(r), &Tensor::zeros(&[2, 4]));
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::zeros(&[2, 3]));
        let b = g.constant(Tensor::zeros(&[2, 3]));
        let err = g.matmul(a, b).unwrap_err().to_string();
        assert!(err.contains("[2, 3]") && err.contains("matmul"), "{err}");
    }

    #[test]
    fn softmax_examples() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(vec![2], vec![0.0, 0.0]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        assert_eq!(g.value(y).data(), &[0.5, 0.5]);

        let x = g.constant(Tensor::new(vec![2], vec![1f64.ln(), 3f64.ln()]).unwrap());
        let y = g.softmax(x, 0).unwrap();
        let v = g.value(y).data();
        assert!((v[0] - 0.25).abs() < 1e-15 && (v[1] - 0.75).abs() < 1e-15);

        let x = g.constant(Tensor::new(vec![1, 2], vec![1000.0, 0.0]).unwrap());
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        assert!(v.iter().all(|p| p.is_finite()));
        assert!((v[0] - 1.0).abs() < 1e-12 && v[1] < 1e-300);

        assert!(g.softmax(x, 2).is_err());
    }

    #[test]
    fn softmax_along_inner_axis() {
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[2, 3, 4]));
        let y = g.softmax(x, 1).unwrap();
        let v = g.value(y).data();
        for o in 0..2 {
            for i in 0..4 {
                let s: f64 = (0..3).map(|j| v[(o * 3 + j) * 4 + i]).sum();
                assert!((s - 1.0).abs() <= 1e-12);
            }
        }
    }

    #[test]
    fn layer_norm_examples() {
        let mut g = Graph::new();
        let ones = g.constant(Tensor::ones(&[2]));
        let zeros = g.constant(Tensor::zeros(&[2]));

        let c = g.constant(Tensor::filled(&[1, 2], 7.0));
        let y = g.layer_norm(c, ones, zeros, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.0, 0.0]);

        let x = g.constant(Tensor::new(vec![1, 2], vec![1.0, 3.0]).unwrap());
        let y = g.layer_norm(x, ones, zeros, 1e-300).unwrap();
        let v = g.value(y).data();
        assert!((v[0] + 1.0).abs() < 1e-12 && (v[1] - 1.0).abs() < 1e-12);

        let gz = g.constant(Tensor::zeros(&[2]));
        let beta = g.constant(Tensor::new(vec![2], vec![0.3, -0.7]).unwrap());
        let y = g.layer_norm(x, gz, beta, 1e-5).unwrap();
        assert_eq!(g.value(y).data(), &[0.3, -0.7]);

        assert!(g.layer_norm(x, ones, zeros, 0.0).is_err());
    }

    #[test]
    fn layer_norm_standardizes_rows() {
        let mut rng = ChaCha8Rng::seed_from_u64(4);
        let mut g = Graph::new();
        let x = g.constant(rand_tensor(&mut rng, &[5, 16]));
        let one = g.constant(Tensor::ones(&[16]));
        let zero = g.constant(Tensor::zeros(&[16]));
        let y = g.layer_norm(x, one, zero, 1e-12).unwrap();
        for r in 0..5 {
            let row = g.value(y).row(r);
            let mean = row.iter().sum::<f64>() / 16.0;
            let var = row.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / 16.0;
            assert!(mean.abs() < 1e-9 && (var - 1.0).abs() < 1e-9);
        }
    }

    #[test]
    fn gelu_examples() {
        assert_eq!(gelu_scalar(0.0), 0.0);
        assert!(((gelu_scalar(10.0) - 10.0) / 10.0).abs() < 1e-3);
        // 0.5 * (1 + tanh(sqrt(2/pi) * 1.044715))
        let expected = 0.5 * (1.0 + (0.797_884_560_802_865_4f64 * 1.044_715).tanh());
        assert!((gelu_scalar(1.0) - expected).abs() < 1e-15);
        assert!((gelu_scalar(1.0) - 0.841_191_990_607_477).abs() < 1e-12);
        let grid: Vec<f64> = (-50..=300).map(|i| gelu_scalar(i as f64 * 0.01)).collect();
        assert!(grid.windows(2).all(|w| w[1] > w[0]));
    }

    #[test]
    fn backward_examples() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let x0 = rand_tensor(&mut rng, &[3, 2]);

        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let s = g.sum(x);
        let grads = g.backward(s).unwrap();
        assert_eq!(grads.get(x).unwrap(), &Tensor::ones(&[3, 2]));

        let mut g = Graph::new();
        let x = g.param(x0.clone());
        let sq = g.mul(x, x).unwrap();
        let s = g.sum(sq);
        let grads = g.backward(s).unwrap();
        let expected: Vec<f64> = x0.data().iter().map(|v| 2.0 * v).collect();
        assert_eq!(grads.get(x).unwrap().data(), expected.as_slice());
    }

    #[test]
    fn backward_rejects_non_scalar_loss() {
        let mut g = Graph::new();
        let x = g.param(Tensor::ones(&[2]));
        assert!(matches!(g.backward(x), Err(Error::Contract(_))));
        assert!(Graph::new().backward(Var(0)).is_err());
    }

    #[test]
    fn frozen_leaves_get_no_gradient() {
        let mut g = Graph::new();
        let w = g.constant(Tensor::ones(&[2, 2]));
        let x = g.param(Tensor::ones(&[1, 2]));
        let y = g.matmul(x, w).unwrap();
        let s = g.sum(y);
        let grads = g.backward(s).unwrap();
        assert!(grads.get(w).is_none());
        assert!(grads.get(x).is_some());
    }

    #[test]
    fn grad_check_quadratic_and_constant() {
        let mut rng = ChaCha8Rng::seed_from_u64(6);
        let w = rand_tensor(&mut rng, &[5]);
        let rep = grad_check(
            |g, v| {
                let sq = g.mul(v[0], v[0])?;
                Ok(g.sum(sq))
            },
            &[w.clone()],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-8, "{rep:?}");

        let rep = grad_check(
            |g, _| Ok(g.constant(Tensor::scalar(3.0))),
            &[w],
            1e-5,
        )
        .unwrap();
        assert_eq!(rep.max_rel_error, 0.0);
    }

    /// matmul -> softmax -> CE, checked against central differences.
    #[test]
    fn composed_chain_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(7);
        let x = rand_tensor(&mut rng, &[4, 3]);
        let w = rand_tensor(&mut rng, &[3, 2]);
        let rep = grad_check(
            |g, v| {
                let xc = g.constant(x.clone());
                let z = g.matmul(xc, v[0])?;
                let p = g.softmax(z, 1)?;
                let lp = g.ln(p);
                let picked = g.gather_rows(lp, &[0, 1, 2, 3])?;
                let s = g.sum(picked);
                let ce = g.cross_entropy(z, &[0, 1, 1, 0])?;
                let t = g.scale(s, -0.1);
                g.add(ce, t)
            },
            &[w],
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-5, "{rep:?}");
    }

    /// Every differentiable op against central differences on inputs in [-2, 2].
    #[test]
    fn every_op_matches_finite_differences() {
        let mut rng = ChaCha8Rng::seed_from_u64(8);
        let a = rand_tensor(&mut rng, &[2, 3, 4]);
        let b = rand_tensor(&mut rng, &[2, 4, 3]);
        let c = rand_tensor(&mut rng, &[2, 3, 4]);
        let m = rand_tensor(&mut rng, &[6, 4]);
        let gam = rand_tensor(&mut rng, &[4]);
        let bet = rand_tensor(&mut rng, &[4]);
        let pos: Vec<f64> = (0..24).map(|_| rng.random_range(0.1..2.0)).collect();
        let pos = Tensor::new(vec![6, 4], pos).unwrap();
        let params = [a, b, c, m, gam, bet, pos];
        let rep = grad_check(
            |g, v| {
                let ab = g.batch_matmul(v[0], v[1], false)?; // [2,3,3]
                let act = g.batch_matmul(v[0], v[2], true)?; // [2,3,3]
                let s1 = g.mul(ab, act)?;
                let sm = g.softmax(s1, 2)?;
                let sm0 = g.softmax(s1, 0)?;
                let t1 = g.sub(sm, sm0)?;
                let l1 = g.sum(t1);
                let l1s = g.mul(l1, l1)?;

                let ln = g.layer_norm(v[3], v[4], v[5], 1e-5)?;
                let ge = g.gelu(ln);
                let rows = g.gather_rows(ge, &[0, 2, 2, 5])?;
                let cat = g.concat_rows(rows, v[3])?; // [10,4]
                let sp = g.split_heads(cat, 2, 2)?; // [4,5,2]
                let mg = g.merge_heads(sp, 2, 2)?;
                let biased = g.add_row(mg, v[4])?;
                let sc = g.scale(biased, 0.3);
                let sq = g.mul(sc, sc)?;
                let l2 = g.mean(sq);

                let cl = g.clamp_min(v[6], 0.05);
                let lg = g.ln(cl);
                let xl = g.xlogx(v[6]);
                let d = g.sub(xl, lg)?;
                let l3 = g.sum(d);
                let ce = g.cross_entropy(v[3], &[0, 1, 2, 3, 0, 1])?;

                let t = g.add(l1s, l2)?;
                let t = g.add(t, l3)?;
                g.add(t, ce)
            },
            &params,
            1e-5,
        )
        .unwrap();
        assert!(rep.max_rel_error <= 1e-4, "{rep:?}");
    }

    #[test]
    fn backward_is_linear_in_the_loss() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let w0 = rand_tensor(&mut rng, &[3, 3]);
        let x0 = rand_tensor(&mut rng, &[2, 3]);
        let run = |ca: f64, cb: f64| {
            let mut g = Graph::new();
            let w = g.param(w0.clone());
            let x = g.constant(x0.clone());
            let z = g.matmul(x, w).unwrap();
            let h = g.gelu(z);
            let l1 = g.mean(h);
            let p = g.softmax(z, 1).unwrap();
            let l2 = g.sum(p);
            let l2 = g.mul(l2, l1).unwrap();
            let a = g.scale(l1, ca);
            let b = g.scale(l2, cb);
            let l = g.add(a, b).unwrap();
            g.backward(l).unwrap().take(w).unwrap()
        };
        let (g1, g2, g12) = (run(1.0, 0.0), run(0.0, 1.0), run(2.5, -1.5));
        for i in 0..9 {
            let lin = 2.5 * g1.data()[i] - 1.5 * g2.data()[i];
            assert!((lin - g12.data()[i]).abs() <= 1e-10);
        }
        // identical inputs, identical bits
        assert_eq!(run(2.5, -1.5), g12);
    }

    proptest! {
        #[test]
        fn softmax_rows_are_distributions(vals in prop::collection::vec(-50.0f64..50.0, 12)) {
            let mut g = Graph::new();
            let x = g.constant(Tensor::new(vec![3, 4], vals).unwrap());
            let y = g.softmax(x, 1).unwrap();
            for r in 0..3 {
                let row = g.value(y).row(r);
                prop_assert!(row.iter().all(|&p| p > 0.0));
                prop_assert!((row.iter().sum::<f64>() - 1.0).abs() <= 1e-12);
            }
        }
    }
}
