//! Reverse-mode differentiation over an append-only computation record.
//!
//! Every operation appends a node holding its output value plus whatever the
//! backward pass needs. Nodes only reference earlier nodes, so append order is
//! a topological order and the backward pass is a single reverse sweep.

use std::sync::Arc;

use rand::Rng;
use rand_chacha::ChaCha8Rng;

use crate::error::{Error, Result};
use crate::tensor::{self, as_matrix, Tensor};

/// Handle to a node of a [`Tape`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, serde::Serialize, serde::Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Activation {
    Relu,
    Gelu,
}

#[derive(Debug)]
enum Op {
    Leaf,
    MatMul(Var, Var),
    MatMulNT(Var, Var),
    Add(Var, Var),
    AddRow(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    Relu(Var),
    Gelu {
        x: Var,
        slope: Vec<f64>,
    },
    Tanh(Var),
    LayerNorm {
        x: Var,
        gain: Var,
        bias: Var,
        xhat: Vec<f64>,
        rstd: Vec<f64>,
    },
    SoftmaxMasked(Var),
    SegmentAttention {
        q: Var,
        k: Var,
        v: Var,
        segments: Vec<(usize, usize)>,
        n_heads: usize,
        scale: f64,
        // per segment, per head: an L×L lower-triangular matrix
        probs: Vec<f64>,
    },
    Dropout {
        x: Var,
        scale: Vec<f64>,
    },
    Gather {
        table: Var,
        idx: Vec<usize>,
    },
    SelectRows {
        x: Var,
        idx: Vec<usize>,
    },
    ConcatRows(Vec<Var>),
    Interleave(Vec<Var>),
    SliceCols {
        x: Var,
        start: usize,
    },
    ConcatCols(Vec<Var>),
    Sum(Var),
    CrossEntropy {
        logits: Var,
        targets: Vec<Option<usize>>,
        probs: Vec<f64>,
        count: usize,
    },
    Mse {
        pred: Var,
        diff: Vec<f64>,
        count: usize,
    },
}

#[derive(Debug)]
struct Node {
    value: Arc<Tensor>,
    op: Op,
    requires_grad: bool,
}

/// The computation record. Single-threaded by construction; build one per
/// forward/backward pass.
#[derive(Debug, Default)]
pub struct Tape {
    nodes: Vec<Node>,
    consumed: bool,
    no_grad: bool,
}

/// Gradients produced by [`Tape::backward`], indexed by node.
#[derive(Debug)]
pub struct Gradients {
    grads: Vec<Option<Tensor>>,
}

impl Gradients {
    pub fn get(&self, var: Var) -> Option<&Tensor> {
        self.grads.get(var.0).and_then(Option::as_ref)
    }

    pub fn take(&mut self, var: Var) -> Option<Tensor> {
        self.grads.get_mut(var.0).and_then(Option::take)
    }
}

fn shape_err(op: &'static str, lhs: &[usize], rhs: &[usize]) -> Error {
    Error::Shape {
        op,
        lhs: lhs.to_vec(),
        rhs: rhs.to_vec(),
    }
}

const SQRT_2_OVER_PI: f64 = 0.797_884_560_802_865_4;
const GELU_C: f64 = 0.044_715;

/// GELU, tanh approximation: `0.5·x·(1 + tanh(√(2/π)·(x + 0.044715·x³)))`.
pub fn gelu(x: f64) -> f64 {
    0.5 * x * (1.0 + (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh())
}

pub fn gelu_grad(x: f64) -> f64 {
    let u = SQRT_2_OVER_PI * (x + GELU_C * x * x * x);
    let t = u.tanh();
    let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
    0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du
}

pub const LAYER_NORM_EPS: f64 = 1e-5;

impl Tape {
    pub fn new() -> Self {
        Self::default()
    }

    /// A record that never tracks gradients; used for rollouts.
    pub fn no_grad() -> Self {
        Self {
            no_grad: true,
            ..Self::default()
        }
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    /// Drops every node so the record can be reused.
    pub fn reset(&mut self) {
        self.nodes.clear();
        self.consumed = false;
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn requires_grad(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: Tensor, op: Op, inputs: &[Var]) -> Result<Var> {
        if self.consumed {
            return Err(Error::StaleRecord);
        }
        let requires_grad = !self.no_grad && inputs.iter().any(|v| self.nodes[v.0].requires_grad);
        self.nodes.push(Node {
            value: Arc::new(value),
            op,
            requires_grad,
        });
        Ok(Var(self.nodes.len() - 1))
    }

    pub fn leaf(&mut self, value: Tensor, requires_grad: bool) -> Var {
        self.leaf_shared(Arc::new(value), requires_grad)
    }

    /// Registers a leaf without copying its storage.
    pub fn leaf_shared(&mut self, value: Arc<Tensor>, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op: Op::Leaf,
            requires_grad: requires_grad && !self.no_grad,
        });
        Var(self.nodes.len() - 1)
    }

    pub fn constant(&mut self, value: Tensor) -> Var {
        self.leaf(value, false)
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [k2, n]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        tensor::gemm_nn(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMul(a, b), &[a, b])
    }

    /// `a · bᵀ` without materializing the transpose.
    pub fn matmul_nt(&mut self, a: Var, b: Var) -> Result<Var> {
        let (sa, sb) = (self.shape(a), self.shape(b));
        let (m, k, n) = match (sa, sb) {
            ([m, k], [n, k2]) if k == k2 => (*m, *k, *n),
            _ => return Err(shape_err("matmul_nt", sa, sb)),
        };
        let mut out = vec![0.0; m * n];
        tensor::gemm_nt(
            self.value(a).data(),
            self.value(b).data(),
            &mut out,
            m,
            k,
            n,
        );
        self.push(Tensor::new(vec![m, n], out)?, Op::MatMulNT(a, b), &[a, b])
    }

    fn zip_same(
        &mut self,
        name: &'static str,
        a: Var,
        b: Var,
        f: fn(f64, f64) -> f64,
        op: Op,
    ) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(shape_err(name, self.shape(a), self.shape(b)));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(&x, &y)| f(x, y))
            .collect();
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, op, &[a, b])
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("add", a, b, |x, y| x + y, Op::Add(a, b))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        self.zip_same("mul", a, b, |x, y| x * y, Op::Mul(a, b))
    }

    /// Adds a length-`n` vector to every row of `a: [.., n]`.
    pub fn add_row(&mut self, a: Var, row: Var) -> Result<Var> {
        let n = self.value(a).last_dim();
        if self.value(row).numel() != n {
            return Err(shape_err("add_row", self.shape(a), self.shape(row)));
        }
        let r = self.value(row).data();
        let mut data = self.value(a).data().to_vec();
        for chunk in data.chunks_mut(n) {
            axpy(chunk, r, 1.0);
        }
        let shape = self.shape(a).to_vec();
        self.push(Tensor::new(shape, data)?, Op::AddRow(a, row), &[a, row])
    }

    pub fn scale(&mut self, a: Var, c: f64) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|x| x * c).collect())?;
        self.push(t, Op::Scale(a, c), &[a])
    }

    fn map(&mut self, a: Var, f: impl Fn(f64) -> f64, op: Op) -> Result<Var> {
        let v = self.value(a);
        let t = Tensor::new(v.shape().to_vec(), v.data().iter().map(|&x| f(x)).collect())?;
        self.push(t, op, &[a])
    }

    pub fn relu(&mut self, a: Var) -> Result<Var> {
        self.map(a, |x| x.max(0.0), Op::Relu(a))
    }

    pub fn gelu(&mut self, a: Var) -> Result<Var> {
        // one tanh per element serves both the value and the slope
        let v = self.value(a);
        let mut out = Vec::with_capacity(v.numel());
        let mut slope = Vec::with_capacity(v.numel());
        for &x in v.data() {
            let t = (SQRT_2_OVER_PI * (x + GELU_C * x * x * x)).tanh();
            out.push(0.5 * x * (1.0 + t));
            let du = SQRT_2_OVER_PI * (1.0 + 3.0 * GELU_C * x * x);
            slope.push(0.5 * (1.0 + t) + 0.5 * x * (1.0 - t * t) * du);
        }
        let shape = v.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::Gelu { x: a, slope }, &[a])
    }

    pub fn tanh(&mut self, a: Var) -> Result<Var> {
        self.map(a, f64::tanh, Op::Tanh(a))
    }

    pub fn activation(&mut self, a: Var, kind: Activation) -> Result<Var> {
        match kind {
            Activation::Relu => self.relu(a),
            Activation::Gelu => self.gelu(a),
        }
    }

    /// Normalizes every row of `x: [.., d]` to zero mean and unit variance,
    /// then applies `gain · x̂ + bias`.
    pub fn layer_norm(&mut self, x: Var, gain: Var, bias: Var) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        if self.value(gain).numel() != d || self.value(bias).numel() != d {
            return Err(shape_err("layer_norm", xv.shape(), self.shape(gain)));
        }
        let rows = xv.rows();
        let mut xhat = Vec::with_capacity(xv.numel());
        let mut rstd = Vec::with_capacity(rows);
        for r in 0..rows {
            let row = xv.row(r);
            let mean = row.iter().sum::<f64>() / d as f64;
            let var = row.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / d as f64;
            let s = 1.0 / (var + LAYER_NORM_EPS).sqrt();
            rstd.push(s);
            xhat.extend(row.iter().map(|v| (v - mean) * s));
        }
        let g = self.value(gain).data();
        let b = self.value(bias).data();
        let out: Vec<f64> = xhat
            .chunks(d)
            .flat_map(|row| row.iter().zip(g).zip(b).map(|((h, g), b)| h * g + b))
            .collect();
        let shape = xv.shape().to_vec();
        self.push(
            Tensor::new(shape, out)?,
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            },
            &[x, gain, bias],
        )
    }

    /// Row-wise softmax over `[.., n]` restricted to positions where `mask` is
    /// true; masked outputs are exactly zero.
    pub fn softmax_masked(&mut self, x: Var, mask: Arc<Vec<bool>>) -> Result<Var> {
        let xv = self.value(x);
        if mask.len() != xv.numel() {
            return Err(shape_err("softmax_masked", xv.shape(), &[mask.len()]));
        }
        let n = xv.last_dim();
        let mut out = vec![0.0; xv.numel()];
        for r in 0..xv.rows() {
            let row = xv.row(r);
            let m = &mask[r * n..(r + 1) * n];
            let max = row
                .iter()
                .zip(m)
                .filter(|(_, &keep)| keep)
                .map(|(&v, _)| v)
                .fold(f64::NEG_INFINITY, f64::max);
            if max == f64::NEG_INFINITY {
                return Err(Error::InvalidMask { row: r });
            }
            let o = &mut out[r * n..(r + 1) * n];
            let mut z = 0.0;
            for j in 0..n {
                if m[j] {
                    o[j] = (row[j] - max).exp();
                    z += o[j];
                }
            }
            for v in o.iter_mut() {
                *v /= z;
            }
        }
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, out)?, Op::SoftmaxMasked(x), &[x])
    }

    /// Multi-head causal attention over packed sequences. `q`, `k`, `v` are
    /// `[N, d]`; `segments` are `(start, len)` row ranges that tile `0..N`, and
    /// a row only attends to rows of its own segment at or before it. Heads
    /// split the columns evenly; the merged head outputs are returned as
    /// `[N, d]`.
    pub fn segment_attention(
        &mut self,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        n_heads: usize,
        scale: f64,
    ) -> Result<Var> {
        let (qv, kv, vv) = (self.value(q), self.value(k), self.value(v));
        let (n, d) =
            as_matrix(qv.shape()).ok_or_else(|| shape_err("segment_attention", qv.shape(), &[]))?;
        if kv.shape() != qv.shape() || vv.shape() != qv.shape() {
            return Err(shape_err("segment_attention", qv.shape(), kv.shape()));
        }
        if n_heads == 0 || d % n_heads != 0 {
            return Err(shape_err("segment_attention", qv.shape(), &[n_heads]));
        }
        let mut next = 0;
        for &(start, len) in segments {
            if start != next || len == 0 {
                return Err(shape_err("segment_attention", &[n], &[start, len]));
            }
            next += len;
        }
        if next != n {
            return Err(shape_err("segment_attention", &[n], &[next]));
        }
        let hd = d / n_heads;
        let (qd, kd, vd) = (qv.data(), kv.data(), vv.data());
        let mut out = vec![0.0; n * d];
        let mut probs =
            Vec::with_capacity(segments.iter().map(|s| s.1 * s.1).sum::<usize>() * n_heads);
        let mut row = Vec::new();
        for &(s, len) in segments {
            for h in 0..n_heads {
                let c = h * hd;
                for i in 0..len {
                    let qi = &qd[(s + i) * d + c..(s + i) * d + c + hd];
                    row.clear();
                    let mut max = f64::NEG_INFINITY;
                    for j in 0..=i {
                        let x = tensor::dot(qi, &kd[(s + j) * d + c..(s + j) * d + c + hd]) * scale;
                        max = max.max(x);
                        row.push(x);
                    }
                    let mut z = 0.0;
                    for x in row.iter_mut() {
                        *x = (*x - max).exp();
                        z += *x;
                    }
                    let o = &mut out[(s + i) * d + c..(s + i) * d + c + hd];
                    for (j, x) in row.iter_mut().enumerate() {
                        *x /= z;
                        axpy(o, &vd[(s + j) * d + c..(s + j) * d + c + hd], *x);
                    }
                    probs.extend_from_slice(&row);
                    probs.extend(std::iter::repeat_n(0.0, len - i - 1));
                }
            }
        }
        let op = Op::SegmentAttention {
            q,
            k,
            v,
            segments: segments.to_vec(),
            n_heads,
            scale,
            probs,
        };
        self.push(Tensor::new(vec![n, d], out)?, op, &[q, k, v])
    }

    /// Attention weights recorded by [`Tape::segment_attention`], indexed
    /// `[segment][head]`; `None` for any other node.
    pub fn attention_weights(&self, att: Var) -> Option<Vec<Vec<Tensor>>> {
        let Op::SegmentAttention {
            segments,
            n_heads,
            probs,
            ..
        } = &self.nodes[att.0].op
        else {
            return None;
        };
        let mut off = 0;
        let mut all = Vec::with_capacity(segments.len());
        for &(_, len) in segments {
            let mut heads = Vec::with_capacity(*n_heads);
            for _ in 0..*n_heads {
                let m = probs[off..off + len * len].to_vec();
                heads.push(Tensor::new(vec![len, len], m).expect("square"));
                off += len * len;
            }
            all.push(heads);
        }
        Some(all)
    }

    /// Inverted dropout: survivors are scaled by `1/(1-rate)`.
    pub fn dropout(&mut self, x: Var, rate: f64, rng: &mut ChaCha8Rng) -> Result<Var> {
        if rate <= 0.0 {
            return Ok(x);
        }
        let keep = 1.0 - rate;
        let xv = self.value(x);
        let scale: Vec<f64> = (0..xv.numel())
            .map(|_| {
                if rng.gen::<f64>() < keep {
                    1.0 / keep
                } else {
                    0.0
                }
            })
            .collect();
        let data = xv.data().iter().zip(&scale).map(|(a, s)| a * s).collect();
        let shape = xv.shape().to_vec();
        self.push(Tensor::new(shape, data)?, Op::Dropout { x, scale }, &[x])
    }

    /// Row lookup into `table: [V, d]`.
    pub fn gather(&mut self, table: Var, idx: &[usize]) -> Result<Var> {
        let tv = self.value(table);
        let (v, d) = as_matrix(tv.shape()).ok_or_else(|| shape_err("gather", tv.shape(), &[]))?;
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= v {
                return Err(shape_err("gather", tv.shape(), &[i]));
            }
            data.extend_from_slice(tv.row(i));
        }
        self.push(
            Tensor::new(vec![idx.len(), d], data)?,
            Op::Gather {
                table,
                idx: idx.to_vec(),
            },
            &[table],
        )
    }

    /// Picks rows of `x: [m, d]` (repeats allowed).
    pub fn select_rows(&mut self, x: Var, idx: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let d = xv.last_dim();
        let mut data = Vec::with_capacity(idx.len() * d);
        for &i in idx {
            if i >= xv.rows() {
                return Err(shape_err("select_rows", xv.shape(), &[i]));
            }
            data.extend_from_slice(xv.row(i));
        }
        self.push(
            Tensor::new(vec![idx.len(), d], data)?,
            Op::SelectRows {
                x,
                idx: idx.to_vec(),
            },
            &[x],
        )
    }

    pub fn concat_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let d = self.value(parts[0]).last_dim();
        let mut data = Vec::new();
        for &p in parts {
            let pv = self.value(p);
            if pv.last_dim() != d {
                return Err(shape_err("concat_rows", self.shape(parts[0]), pv.shape()));
            }
            data.extend_from_slice(pv.data());
        }
        let rows = data.len() / d;
        self.push(
            Tensor::new(vec![rows, d], data)?,
            Op::ConcatRows(parts.to_vec()),
            parts,
        )
    }

    /// Interleaves the rows of equally shaped `[m, d]` inputs:
    /// `a₀, b₀, c₀, a₁, b₁, c₁, …`.
    pub fn interleave_rows(&mut self, parts: &[Var]) -> Result<Var> {
        let s0 = self.shape(parts[0]).to_vec();
        let (m, d) = as_matrix(&s0).ok_or_else(|| shape_err("interleave_rows", &s0, &[]))?;
        for &p in parts {
            if self.shape(p) != s0.as_slice() {
                return Err(shape_err("interleave_rows", &s0, self.shape(p)));
            }
        }
        let mut data = Vec::with_capacity(m * d * parts.len());
        for i in 0..m {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(i));
            }
        }
        self.push(
            Tensor::new(vec![m * parts.len(), d], data)?,
            Op::Interleave(parts.to_vec()),
            parts,
        )
    }

    pub fn slice_cols(&mut self, x: Var, start: usize, len: usize) -> Result<Var> {
        let xv = self.value(x);
        let n = xv.last_dim();
        if start + len > n || len == 0 {
            return Err(shape_err("slice_cols", xv.shape(), &[start, len]));
        }
        let data = (0..xv.rows())
            .flat_map(|r| xv.row(r)[start..start + len].iter().copied())
            .collect();
        let rows = xv.rows();
        self.push(
            Tensor::new(vec![rows, len], data)?,
            Op::SliceCols { x, start },
            &[x],
        )
    }

    pub fn concat_cols(&mut self, parts: &[Var]) -> Result<Var> {
        let rows = self.value(parts[0]).rows();
        let mut total = 0;
        for &p in parts {
            if self.value(p).rows() != rows {
                return Err(shape_err(
                    "concat_cols",
                    self.shape(parts[0]),
                    self.shape(p),
                ));
            }
            total += self.value(p).last_dim();
        }
        let mut data = Vec::with_capacity(rows * total);
        for r in 0..rows {
            for &p in parts {
                data.extend_from_slice(self.value(p).row(r));
            }
        }
        self.push(
            Tensor::new(vec![rows, total], data)?,
            Op::ConcatCols(parts.to_vec()),
            parts,
        )
    }

    pub fn sum(&mut self, x: Var) -> Result<Var> {
        let s = self.value(x).data().iter().sum();
        self.push(Tensor::scalar(s), Op::Sum(x), &[x])
    }

    /// Mean negative log-softmax over rows whose target is `Some`.
    pub fn cross_entropy(&mut self, logits: Var, targets: &[Option<usize>]) -> Result<Var> {
        let lv = self.value(logits);
        let n = lv.last_dim();
        if targets.len() != lv.rows() {
            return Err(shape_err("cross_entropy", lv.shape(), &[targets.len()]));
        }
        let count = targets.iter().filter(|t| t.is_some()).count();
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let mut probs = vec![0.0; lv.numel()];
        let mut loss = 0.0;
        for (r, t) in targets.iter().enumerate() {
            let Some(t) = *t else { continue };
            if t >= n {
                return Err(Error::TargetOutOfRange {
                    index: t,
                    classes: n,
                });
            }
            let row = lv.row(r);
            let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - max).exp()).sum();
            let log_z = z.ln() + max;
            loss += log_z - row[t];
            for (p, v) in probs[r * n..(r + 1) * n].iter_mut().zip(row) {
                *p = (v - log_z).exp();
            }
        }
        self.push(
            Tensor::scalar(loss / count as f64),
            Op::CrossEntropy {
                logits,
                targets: targets.to_vec(),
                probs,
                count,
            },
            &[logits],
        )
    }

    /// Mean squared error over elements where `keep` is true.
    pub fn mse(&mut self, pred: Var, target: &Tensor, keep: &[bool]) -> Result<Var> {
        let pv = self.value(pred);
        if pv.shape() != target.shape() || keep.len() != pv.numel() {
            return Err(shape_err("mse", pv.shape(), target.shape()));
        }
        let count = keep.iter().filter(|&&k| k).count();
        if count == 0 {
            return Err(Error::EmptyBatch);
        }
        let diff: Vec<f64> = pv
            .data()
            .iter()
            .zip(target.data())
            .zip(keep)
            .map(|((p, t), &k)| if k { p - t } else { 0.0 })
            .collect();
        let loss = diff.iter().map(|d| d * d).sum::<f64>() / count as f64;
        self.push(Tensor::scalar(loss), Op::Mse { pred, diff, count }, &[pred])
    }

    /// Reverse sweep from a scalar `loss`. The record is consumed: a second
    /// call fails with [`Error::StaleRecord`] until [`Tape::reset`].
    pub fn backward(&mut self, loss: Var) -> Result<Gradients> {
        if self.consumed {
            return Err(Error::StaleRecord);
        }
        let lv = self.value(loss);
        if !lv.is_scalar() {
            return Err(Error::NonScalarLoss(lv.shape().to_vec()));
        }
        let loss_shape = lv.shape().to_vec();
        self.consumed = true;
        let mut grads: Vec<Option<Tensor>> = (0..self.nodes.len()).map(|_| None).collect();
        if !self.nodes[loss.0].requires_grad {
            return Ok(Gradients { grads });
        }
        grads[loss.0] = Some(Tensor::full(&loss_shape, 1.0));
        for i in (0..=loss.0).rev() {
            if !self.nodes[i].requires_grad {
                continue;
            }
            let Some(g) = grads[i].take() else { continue };
            self.backprop_node(i, &g, &mut grads)?;
            grads[i] = Some(g);
        }
        Ok(Gradients { grads })
    }

    fn backprop_node(&self, i: usize, g: &Tensor, grads: &mut [Option<Tensor>]) -> Result<()> {
        let node = &self.nodes[i];
        let gd = g.data();
        let out = node.value.data();
        match &node.op {
            Op::Leaf => {}
            Op::MatMul(a, b) => {
                let (m, k) = as_matrix(self.shape(*a)).unwrap();
                let n = self.value(*b).last_dim();
                if self.requires_grad(*a) {
                    let da = self.grad_buf(*a, grads);
                    tensor::gemm_nt(gd, self.value(*b).data(), da, m, n, k);
                }
                if self.requires_grad(*b) {
                    let db = self.grad_buf(*b, grads);
                    tensor::gemm_tn(self.value(*a).data(), gd, db, m, k, n);
                }
            }
            Op::MatMulNT(a, b) => {
                let (m, k) = as_matrix(self.shape(*a)).unwrap();
                let n = self.value(*b).rows();
                if self.requires_grad(*a) {
                    let da = self.grad_buf(*a, grads);
                    tensor::gemm_nn(gd, self.value(*b).data(), da, m, n, k);
                }
                if self.requires_grad(*b) {
                    let db = self.grad_buf(*b, grads);
                    tensor::gemm_tn(gd, self.value(*a).data(), db, m, n, k);
                }
            }
            Op::Add(a, b) => {
                for v in [*a, *b] {
                    if self.requires_grad(v) {
                        axpy(self.grad_buf(v, grads), gd, 1.0);
                    }
                }
            }
            Op::AddRow(a, row) => {
                if self.requires_grad(*a) {
                    axpy(self.grad_buf(*a, grads), gd, 1.0);
                }
                if self.requires_grad(*row) {
                    let n = self.value(*row).numel();
                    let dr = self.grad_buf(*row, grads);
                    for chunk in gd.chunks(n) {
                        axpy(dr, chunk, 1.0);
                    }
                }
            }
            Op::Mul(a, b) => {
                if self.requires_grad(*a) {
                    let bv = self.value(*b).data();
                    let da = self.grad_buf(*a, grads);
                    for ((d, g), y) in da.iter_mut().zip(gd).zip(bv) {
                        *d += g * y;
                    }
                }
                if self.requires_grad(*b) {
                    let av = self.value(*a).data();
                    let db = self.grad_buf(*b, grads);
                    for ((d, g), x) in db.iter_mut().zip(gd).zip(av) {
                        *d += g * x;
                    }
                }
            }
            Op::Scale(a, c) => {
                if self.requires_grad(*a) {
                    axpy(self.grad_buf(*a, grads), gd, *c);
                }
            }
            Op::Relu(a) => {
                let x = self.value(*a).data();
                let da = self.grad_buf(*a, grads);
                for ((d, g), &x) in da.iter_mut().zip(gd).zip(x) {
                    if x > 0.0 {
                        *d += g;
                    }
                }
            }
            Op::Gelu { x, slope } => {
                let dx = self.grad_buf(*x, grads);
                for ((d, g), s) in dx.iter_mut().zip(gd).zip(slope) {
                    *d += g * s;
                }
            }
            Op::Tanh(a) => {
                let da = self.grad_buf(*a, grads);
                for ((d, g), y) in da.iter_mut().zip(gd).zip(out) {
                    *d += g * (1.0 - y * y);
                }
            }
            Op::LayerNorm {
                x,
                gain,
                bias,
                xhat,
                rstd,
            } => {
                let d = node.value.last_dim();
                let gv = self.value(*gain).data();
                if self.requires_grad(*x) {
                    let dx = self.grad_buf(*x, grads);
                    let mut dxhat = vec![0.0; d];
                    for (r, &s) in rstd.iter().enumerate() {
                        let gr = &gd[r * d..(r + 1) * d];
                        let hr = &xhat[r * d..(r + 1) * d];
                        for j in 0..d {
                            dxhat[j] = gr[j] * gv[j];
                        }
                        let mean_d = dxhat.iter().sum::<f64>() / d as f64;
                        let mean_dh =
                            dxhat.iter().zip(hr).map(|(a, b)| a * b).sum::<f64>() / d as f64;
                        let dr = &mut dx[r * d..(r + 1) * d];
                        for j in 0..d {
                            dr[j] += s * (dxhat[j] - mean_d - hr[j] * mean_dh);
                        }
                    }
                }
                if self.requires_grad(*gain) {
                    let dg = self.grad_buf(*gain, grads);
                    for (gr, hr) in gd.chunks(d).zip(xhat.chunks(d)) {
                        for j in 0..d {
                            dg[j] += gr[j] * hr[j];
                        }
                    }
                }
                if self.requires_grad(*bias) {
                    let db = self.grad_buf(*bias, grads);
                    for gr in gd.chunks(d) {
                        axpy(db, gr, 1.0);
                    }
                }
            }
            Op::SoftmaxMasked(x) => {
                let n = node.value.last_dim();
                let dx = self.grad_buf(*x, grads);
                for ((yr, gr), dr) in out.chunks(n).zip(gd.chunks(n)).zip(dx.chunks_mut(n)) {
                    let s: f64 = yr.iter().zip(gr).map(|(y, g)| y * g).sum();
                    for j in 0..n {
                        // masked entries have y == 0 and receive nothing
                        dr[j] += yr[j] * (gr[j] - s);
                    }
                }
            }
            Op::SegmentAttention {
                q,
                k,
                v,
                segments,
                n_heads,
                scale,
                probs,
            } => {
                let d = node.value.last_dim();
                let hd = d / n_heads;
                let (qd, kd, vd) = (
                    self.value(*q).data(),
                    self.value(*k).data(),
                    self.value(*v).data(),
                );
                let n = node.value.rows();
                let mut dq = vec![0.0; n * d];
                let mut dk = vec![0.0; n * d];
                let mut dv = vec![0.0; n * d];
                let mut dp = Vec::new();
                let mut off = 0;
                for &(s, len) in segments {
                    for h in 0..*n_heads {
                        let c = h * hd;
                        let r = |m: usize| (s + m) * d + c..(s + m) * d + c + hd;
                        for i in 0..len {
                            let p = &probs[off + i * len..off + i * len + i + 1];
                            let go = &gd[r(i)];
                            dp.clear();
                            let mut rowdot = 0.0;
                            for (j, &pij) in p.iter().enumerate() {
                                let x = tensor::dot(go, &vd[r(j)]);
                                rowdot += pij * x;
                                dp.push(x);
                                axpy(&mut dv[r(j)], go, pij);
                            }
                            for (j, &pij) in p.iter().enumerate() {
                                let ds = pij * (dp[j] - rowdot) * scale;
                                if ds == 0.0 {
                                    continue;
                                }
                                axpy(&mut dq[r(i)], &kd[r(j)], ds);
                                axpy(&mut dk[r(j)], &qd[r(i)], ds);
                            }
                        }
                        off += len * len;
                    }
                }
                for (var, buf) in [(*q, dq), (*k, dk), (*v, dv)] {
                    if self.requires_grad(var) {
                        axpy(self.grad_buf(var, grads), &buf, 1.0);
                    }
                }
            }
            Op::Dropout { x, scale } => {
                let dx = self.grad_buf(*x, grads);
                for ((d, g), s) in dx.iter_mut().zip(gd).zip(scale) {
                    *d += g * s;
                }
            }
            Op::Gather { table, idx } | Op::SelectRows { x: table, idx } => {
                let d = node.value.last_dim();
                let dt = self.grad_buf(*table, grads);
                for (r, &i) in idx.iter().enumerate() {
                    axpy(&mut dt[i * d..(i + 1) * d], &gd[r * d..(r + 1) * d], 1.0);
                }
            }
            Op::ConcatRows(parts) => {
                let mut off = 0;
                for &p in parts {
                    let len = self.value(p).numel();
                    if self.requires_grad(p) {
                        axpy(self.grad_buf(p, grads), &gd[off..off + len], 1.0);
                    }
                    off += len;
                }
            }
            Op::Interleave(parts) => {
                let d = node.value.last_dim();
                let k = parts.len();
                for (j, &p) in parts.iter().enumerate() {
                    if !self.requires_grad(p) {
                        continue;
                    }
                    let m = self.value(p).rows();
                    let dp = self.grad_buf(p, grads);
                    for i in 0..m {
                        let r = i * k + j;
                        axpy(&mut dp[i * d..(i + 1) * d], &gd[r * d..(r + 1) * d], 1.0);
                    }
                }
            }
            Op::SliceCols { x, start } => {
                let len = node.value.last_dim();
                let n = self.value(*x).last_dim();
                let dx = self.grad_buf(*x, grads);
                for (r, gr) in gd.chunks(len).enumerate() {
                    axpy(&mut dx[r * n + start..r * n + start + len], gr, 1.0);
                }
            }
            Op::ConcatCols(parts) => {
                let total = node.value.last_dim();
                let mut off = 0;
                for &p in parts {
                    let w = self.value(p).last_dim();
                    if self.requires_grad(p) {
                        let dp = self.grad_buf(p, grads);
                        for (r, gr) in gd.chunks(total).enumerate() {
                            axpy(&mut dp[r * w..(r + 1) * w], &gr[off..off + w], 1.0);
                        }
                    }
                    off += w;
                }
            }
            Op::Sum(x) => {
                let g0 = gd[0];
                for d in self.grad_buf(*x, grads).iter_mut() {
                    *d += g0;
                }
            }
            Op::CrossEntropy {
                logits,
                targets,
                probs,
                count,
            } => {
                let n = self.value(*logits).last_dim();
                let c = gd[0] / *count as f64;
                let dl = self.grad_buf(*logits, grads);
                for (r, t) in targets.iter().enumerate() {
                    let Some(t) = *t else { continue };
                    for j in 0..n {
                        let onehot = if j == t { 1.0 } else { 0.0 };
                        dl[r * n + j] += c * (probs[r * n + j] - onehot);
                    }
                }
            }
            Op::Mse { pred, diff, count } => {
                let c = 2.0 * gd[0] / *count as f64;
                axpy(self.grad_buf(*pred, grads), diff, c);
            }
        }
        Ok(())
    }

    fn grad_buf<'g>(&self, v: Var, grads: &'g mut [Option<Tensor>]) -> &'g mut [f64] {
        grads[v.0]
            .get_or_insert_with(|| Tensor::zeros(self.shape(v)))
            .data_mut()
    }
}

fn axpy(y: &mut [f64], x: &[f64], a: f64) {
    for (y, x) in y.iter_mut().zip(x) {
        *y += a * x;
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;

    fn t(shape: &[usize], data: &[f64]) -> Tensor {
        Tensor::new(shape.to_vec(), data.to_vec()).unwrap()
    }

    #[test]
    fn matmul_identity_and_definition() {
        let mut tape = Tape::new();
        let i2 = tape.constant(t(&[2, 2], &[1.0, 0.0, 0.0, 1.0]));
        let m = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let p = tape.matmul(i2, m).unwrap();
        assert_eq!(tape.value(p).data(), &[1.0, 2.0, 3.0, 4.0]);

        let a = tape.constant(t(&[1, 2], &[1.0, 0.0]));
        let b = tape.constant(t(&[2, 1], &[0.0, 5.0]));
        let p = tape.matmul(a, b).unwrap();
        assert_eq!(tape.value(p).data(), &[0.0]);
    }

    #[test]
    fn matmul_shape_error_names_both_shapes() {
        let mut tape = Tape::new();
        let a = tape.constant(Tensor::zeros(&[2, 3]));
        let b = tape.constant(Tensor::zeros(&[2, 3]));
        let msg = tape.matmul(a, b).unwrap_err().to_string();
        assert!(msg.contains("[2, 3]"), "{msg}");
    }

    #[test]
    fn softmax_masked_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[0.0, 0.0]));
        let y = tape.softmax_masked(x, Arc::new(vec![true, true])).unwrap();
        assert_eq!(tape.value(y).data(), &[0.5, 0.5]);

        let x = tape.constant(t(&[3], &[10.0, 10.0, 10.0]));
        let y = tape
            .softmax_masked(x, Arc::new(vec![true, false, false]))
            .unwrap();
        assert_eq!(tape.value(y).data(), &[1.0, 0.0, 0.0]);

        let x = tape.constant(t(&[3], &[1.0, 2.0, 3.0]));
        let y = tape.softmax_masked(x, Arc::new(vec![true; 3])).unwrap();
        let s: f64 = tape.value(y).data().iter().sum();
        assert!((s - 1.0).abs() < 1e-12);
    }

    #[test]
    fn softmax_rejects_fully_masked_row() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2, 2], &[1.0, 2.0, 3.0, 4.0]));
        let err = tape
            .softmax_masked(x, Arc::new(vec![true, false, false, false]))
            .unwrap_err();
        assert!(matches!(err, Error::InvalidMask { row: 1 }));
    }

    #[test]
    fn layer_norm_examples() {
        let mut tape = Tape::new();
        let g = tape.constant(Tensor::full(&[3], 1.0));
        let b = tape.constant(Tensor::zeros(&[3]));
        let x = tape.constant(t(&[3], &[1.0, 1.0, 1.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 0.0, 0.0]);

        let g = tape.constant(Tensor::full(&[2], 1.0));
        let b = tape.constant(Tensor::zeros(&[2]));
        let x = tape.constant(t(&[2], &[-1.0, 1.0]));
        let y = tape.layer_norm(x, g, b).unwrap();
        let out = tape.value(y).data();
        assert!((out[0] + 1.0).abs() < 1e-5 && (out[1] - 1.0).abs() < 1e-5);
    }

    #[test]
    fn activation_examples() {
        let mut tape = Tape::new();
        let x = tape.constant(t(&[2], &[-1.0, 2.0]));
        let y = tape.relu(x).unwrap();
        assert_eq!(tape.value(y).data(), &[0.0, 2.0]);
        assert_eq!(gelu(0.0), 0.0);
        // tanh form: gelu(1) ≈ 0.8412
        assert!((gelu(1.0) - 0.841_192).abs() < 1e-5);

        let xs = [-3.0, -0.4, 0.0, 0.7, 2.5];
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[5], &xs), true);
        let y = tape.gelu(x).unwrap();
        for (v, &x) in tape.value(y).data().iter().zip(&xs) {
            assert!((v - gelu(x)).abs() < 1e-15);
        }
        let s = tape.sum(y).unwrap();
        let g = tape.backward(s).unwrap();
        for (d, &x) in g.get(x).unwrap().data().iter().zip(&xs) {
            assert!((d - gelu_grad(x)).abs() < 1e-15);
        }
    }

    #[test]
    fn cross_entropy_examples() {
        let mut tape = Tape::new();
        let l = tape.constant(t(&[1, 3], &[0.0, 1e9, 0.0]));
        let loss = tape.cross_entropy(l, &[Some(1)]).unwrap();
        assert!(tape.value(loss).item().abs() < 1e-12);

        let l = tape.constant(Tensor::zeros(&[1, 4]));
        let loss = tape.cross_entropy(l, &[Some(2)]).unwrap();
        assert!((tape.value(loss).item() - 4f64.ln()).abs() < 1e-12);

        let l2 = tape.constant(t(&[2, 3], &[0.3, -1.0, 2.0, 5.0, 5.0, -5.0]));
        let l1 = tape.constant(t(&[1, 3], &[0.3, -1.0, 2.0]));
        let a = tape.cross_entropy(l2, &[Some(0), None]).unwrap();
        let b = tape.cross_entropy(l1, &[Some(0)]).unwrap();
        assert_eq!(tape.value(a).item(), tape.value(b).item());

        let err = tape.cross_entropy(l2, &[None, None]).unwrap_err();
        assert!(matches!(err, Error::EmptyBatch));
        let err = tape.cross_entropy(l1, &[Some(3)]).unwrap_err();
        assert!(matches!(err, Error::TargetOutOfRange { .. }));
    }

    #[test]
    fn mse_examples() {
        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2], &[0.0, 2.0]), true);
        let same = tape.mse(p, &t(&[2], &[0.0, 2.0]), &[true, true]).unwrap();
        assert_eq!(tape.value(same).item(), 0.0);
        let loss = tape.mse(p, &Tensor::zeros(&[2]), &[true, true]).unwrap();
        assert_eq!(tape.value(loss).item(), 2.0);
        let g = tape.backward(loss).unwrap();
        // 2(pred − target)/count
        assert_eq!(g.get(p).unwrap().data(), &[0.0, 2.0]);

        let mut tape = Tape::new();
        let p = tape.leaf(t(&[2], &[0.0, 2.0]), true);
        assert!(matches!(
            tape.mse(p, &Tensor::zeros(&[2]), &[false, false]),
            Err(Error::EmptyBatch)
        ));
    }

    #[test]
    fn backward_linear_and_square() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[3], &[1.0, -2.0, 0.5]), true);
        let s = tape.sum(x).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[1.0, 1.0, 1.0]);

        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let sq = tape.mul(x, x).unwrap();
        let s = tape.sum(sq).unwrap();
        let g = tape.backward(s).unwrap();
        assert_eq!(g.get(x).unwrap().data(), &[2.0, 4.0]);
    }

    #[test]
    fn backward_rejects_non_scalar_and_repeat() {
        let mut tape = Tape::new();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        assert!(matches!(tape.backward(x), Err(Error::NonScalarLoss(_))));
        let s = tape.sum(x).unwrap();
        tape.backward(s).unwrap();
        assert!(matches!(tape.backward(s), Err(Error::StaleRecord)));
        assert!(matches!(tape.sum(x), Err(Error::StaleRecord)));
        tape.reset();
        assert!(tape.is_empty());
    }

    #[test]
    fn dropout_is_seeded_and_inverted() {
        let run = |seed| {
            let mut tape = Tape::new();
            let x = tape.constant(Tensor::full(&[1000], 1.0));
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let y = tape.dropout(x, 0.1, &mut rng).unwrap();
            tape.value(y).data().to_vec()
        };
        assert_eq!(run(3), run(3));
        let v = run(3);
        assert!(v.iter().all(|&x| x == 0.0 || (x - 1.0 / 0.9).abs() < 1e-15));
        let mean = v.iter().sum::<f64>() / v.len() as f64;
        assert!((mean - 1.0).abs() < 0.1);
    }

    #[test]
    fn no_grad_tape_tracks_nothing() {
        let mut tape = Tape::no_grad();
        let x = tape.leaf(t(&[2], &[1.0, 2.0]), true);
        let s = tape.sum(x).unwrap();
        assert!(!tape.requires_grad(s));
        let g = tape.backward(s).unwrap();
        assert!(g.get(x).is_none());
    }

    fn random(shape: &[usize], seed: u64) -> Tensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let n = shape.iter().product();
        Tensor::new(
            shape.to_vec(),
            (0..n).map(|_| rng.gen_range(-1.0..1.0)).collect(),
        )
        .unwrap()
    }

    // the same attention composed from primitive ops, one segment and head at a time
    fn unfused_attention(
        tape: &mut Tape,
        q: Var,
        k: Var,
        v: Var,
        segments: &[(usize, usize)],
        heads: usize,
        scale: f64,
    ) -> Var {
        let hd = tape.value(q).last_dim() / heads;
        let mut rows = Vec::new();
        for &(s, len) in segments {
            let idx: Vec<usize> = (s..s + len).collect();
            let mask = Arc::new(
                (0..len * len)
                    .map(|x| x % len <= x / len)
                    .collect::<Vec<_>>(),
            );
            let mut outs = Vec::new();
            for h in 0..heads {
                let pick = |tape: &mut Tape, x: Var| {
                    let r = tape.select_rows(x, &idx).unwrap();
                    tape.slice_cols(r, h * hd, hd).unwrap()
                };
                let (qh, kh, vh) = (pick(tape, q), pick(tape, k), pick(tape, v));
                let sc = tape.matmul_nt(qh, kh).unwrap();
                let sc = tape.scale(sc, scale).unwrap();
                let p = tape.softmax_masked(sc, Arc::clone(&mask)).unwrap();
                outs.push(tape.matmul(p, vh).unwrap());
            }
            rows.push(tape.concat_cols(&outs).unwrap());
        }
        tape.concat_rows(&rows).unwrap()
    }

    const SEGS: [(usize, usize); 3] = [(0, 3), (3, 1), (4, 4)];

    #[test]
    fn segment_attention_matches_composed_ops() {
        let mut tape = Tape::no_grad();
        let q = tape.constant(random(&[8, 6], 1));
        let k = tape.constant(random(&[8, 6], 2));
        let v = tape.constant(random(&[8, 6], 3));
        let fused = tape.segment_attention(q, k, v, &SEGS, 3, 0.7).unwrap();
        let reference = unfused_attention(&mut tape, q, k, v, &SEGS, 3, 0.7);
        for (a, b) in tape
            .value(fused)
            .data()
            .iter()
            .zip(tape.value(reference).data())
        {
            assert!((a - b).abs() < 1e-14, "{a} {b}");
        }
        let w = tape.attention_weights(fused).unwrap();
        assert_eq!(w.len(), 3);
        assert_eq!(w[1][2].data(), &[1.0]);
        let m = &w[2][0];
        for i in 0..4 {
            assert!((m.row(i).iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(m.row(i)[i + 1..].iter().all(|&x| x == 0.0));
        }
        assert!(tape.attention_weights(q).is_none());
    }

    #[test]
    fn segment_attention_gradient_matches_finite_differences() {
        let x = random(&[8, 12], 4);
        let w = random(&[8, 4], 5);
        let err = crate::gradcheck::finite_diff_check(
            |tape, xv| {
                let q = tape.slice_cols(xv, 0, 4)?;
                let k = tape.slice_cols(xv, 4, 4)?;
                let v = tape.slice_cols(xv, 8, 4)?;
                let a = tape.segment_attention(q, k, v, &SEGS, 2, 1.3)?;
                let wv = tape.constant(w.clone());
                let y = tape.mul(a, wv)?;
                tape.sum(y)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn segment_attention_rejects_bad_tiling() {
        let mut tape = Tape::no_grad();
        let q = tape.constant(random(&[4, 4], 1));
        assert!(tape
            .segment_attention(q, q, q, &[(0, 2), (3, 1)], 2, 1.0)
            .is_err());
        assert!(tape.segment_attention(q, q, q, &[(0, 3)], 2, 1.0).is_err());
        assert!(tape.segment_attention(q, q, q, &[(0, 4)], 3, 1.0).is_err());
        assert!(tape.segment_attention(q, q, q, &[(0, 4)], 2, 1.0).is_ok());
    }
}
