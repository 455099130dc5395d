//! Tape-based reverse-mode differentiation over [`NdArray`] values.
//!
//! Every primitive call appends one node to a [`Tape`] and returns a [`Var`]
//! handle. Nodes only reference earlier nodes, so walking the tape from the
//! loss back to the start visits each node once in a valid reverse
//! topological order. [`Tape::backward`] accumulates into the gradients of the
//! [`ParamStore`] the forward pass read from.

mod kernels;
mod param;

use alloc::format;
use alloc::vec;
use alloc::vec::Vec;

use serde::{Deserialize, Serialize};

pub use kernels::sym_normalize;
pub use param::{ParamId, ParamStore, Parameter};

use crate::error::{Error, Result};
use crate::tensor::{gemm_acc_nt, gemm_acc_tn, numel, strides, MatmulPlan, NdArray};
use kernels::{AttnGeom, ConvGeom};

/// Handle to a value recorded on a [`Tape`].
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn index(self) -> usize {
        self.0
    }
}

/// Whether normalization layers use batch or running statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics for one batch-normalization layer.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchNormStats {
    pub running_mean: Vec<f64>,
    pub running_var: Vec<f64>,
    pub momentum: f64,
    pub eps: f64,
    /// Number of train-mode updates applied so far.
    pub updates: u64,
}

impl BatchNormStats {
    pub const DEFAULT_EPS: f64 = 1e-5;
    pub const DEFAULT_MOMENTUM: f64 = 0.1;

    pub fn new(channels: usize) -> Self {
        Self {
            running_mean: vec![0.0; channels],
            running_var: vec![1.0; channels],
            momentum: Self::DEFAULT_MOMENTUM,
            eps: Self::DEFAULT_EPS,
            updates: 0,
        }
    }

    pub fn channels(&self) -> usize {
        self.running_mean.len()
    }
}

enum Op {
    Leaf,
    Param(ParamId),
    MatMul(Var, Var),
    Add(Var, Var),
    Mul(Var, Var),
    Scale(Var, f64),
    AddBias(Var, Var),
    Relu(Var),
    Reshape(Var),
    Permute(Var, Vec<usize>),
    Concat(Vec<Var>, usize),
    Softmax(Var, usize),
    MeanAxes(Var, Vec<usize>),
    Sum(Var),
    TemporalConv {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        x_hat: NdArray,
        inv_std: Vec<f64>,
        batch_stats: bool,
    },
    NormalizeAdjacency {
        mask: Var,
        base: NdArray,
    },
    Huber {
        pred: Var,
        target: NdArray,
        delta: f64,
    },
    Attention {
        q: Var,
        k: Var,
        v: Var,
        weights: Var,
        geom: AttnGeom,
    },
}

fn op_inputs(op: &Op) -> Vec<Var> {
    match op {
        Op::Leaf | Op::Param(_) => Vec::new(),
        Op::MatMul(a, b) | Op::Add(a, b) | Op::Mul(a, b) | Op::AddBias(a, b) => vec![*a, *b],
        Op::Scale(x, _)
        | Op::Relu(x)
        | Op::Reshape(x)
        | Op::Permute(x, _)
        | Op::Softmax(x, _)
        | Op::MeanAxes(x, _)
        | Op::Sum(x) => vec![*x],
        Op::Concat(xs, _) => xs.clone(),
        Op::TemporalConv { x, w, b, .. } => {
            let mut v = vec![*x, *w];
            v.extend(b);
            v
        }
        Op::BatchNorm { x, gamma, beta, .. } => vec![*x, *gamma, *beta],
        Op::NormalizeAdjacency { mask, .. } => vec![*mask],
        Op::Huber { pred, .. } => vec![*pred],
        Op::Attention { q, k, v, .. } => vec![*q, *k, *v],
    }
}

struct Node {
    value: NdArray,
    op: Op,
}

/// Gradients of one scalar with respect to every node of a tape.
pub struct Gradients {
    grads: Vec<Option<NdArray>>,
}

impl Gradients {
    /// Gradient for `v`, or `None` when `v` does not influence the loss.
    pub fn get(&self, v: Var) -> Option<&NdArray> {
        self.grads.get(v.0).and_then(Option::as_ref)
    }
}

/// Ordered record of executed primitive operations.
#[derive(Default)]
pub struct Tape {
    nodes: Vec<Node>,
}

/// Gradient accumulators, one per node; nodes outside `needs` are skipped.
struct GradSlots {
    slots: Vec<Option<NdArray>>,
    needs: Vec<bool>,
}

impl GradSlots {
    fn wants(&self, v: Var) -> bool {
        self.needs[v.0]
    }

    fn add(&mut self, v: Var, g: NdArray) {
        if !self.needs[v.0] {
            return;
        }
        match &mut self.slots[v.0] {
            Some(acc) => {
                for (a, b) in acc.data_mut().iter_mut().zip(g.data()) {
                    *a += b;
                }
            }
            slot => *slot = Some(g),
        }
    }
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

    pub fn value(&self, v: Var) -> &NdArray {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    fn push(&mut self, value: NdArray, op: Op) -> Var {
        self.nodes.push(Node { value, op });
        Var(self.nodes.len() - 1)
    }

    /// Records a value that gradients flow into but that no parameter owns.
    pub fn leaf(&mut self, value: NdArray) -> Var {
        self.push(value, Op::Leaf)
    }

    /// Records a copy of a parameter's current value.
    pub fn param(&mut self, store: &ParamStore, id: ParamId) -> Var {
        self.push(store.get(id).value.clone(), Op::Param(id))
    }

    pub fn matmul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).matmul(self.value(b))?;
        Ok(self.push(value, Op::MatMul(a, b)))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x + y)?;
        Ok(self.push(value, Op::Add(a, b)))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        let value = self.value(a).zip_map(self.value(b), |x, y| x * y)?;
        Ok(self.push(value, Op::Mul(a, b)))
    }

    pub fn scale(&mut self, a: Var, factor: f64) -> Var {
        let value = self.value(a).map(|x| x * factor);
        self.push(value, Op::Scale(a, factor))
    }

    /// Adds a 1-D `bias` along the last axis of `x`.
    pub fn add_bias(&mut self, x: Var, bias: Var) -> Result<Var> {
        let xs = self.value(x);
        let bs = self.value(bias);
        let last = xs.shape().last().copied().unwrap_or(1);
        if bs.ndim() != 1 || bs.len() != last {
            return Err(Error::Shape {
                op: "add_bias",
                lhs: xs.shape().to_vec(),
                rhs: bs.shape().to_vec(),
            });
        }
        let bd = bs.data();
        let value = NdArray::from_fn(xs.shape(), |i| xs.data()[i] + bd[i % last]);
        Ok(self.push(value, Op::AddBias(x, bias)))
    }

    /// Affine map `x · w + b` over the last axis of `x`.
    pub fn linear(&mut self, x: Var, w: Var, b: Option<Var>) -> Result<Var> {
        let y = self.matmul(x, w)?;
        match b {
            Some(b) => self.add_bias(y, b),
            None => Ok(y),
        }
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let value = self.value(x).map(|v| v.max(0.0));
        self.push(value, Op::Relu(x))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).reshape(shape)?;
        Ok(self.push(value, Op::Reshape(x)))
    }

    pub fn permute(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let value = self.value(x).permute(axes)?;
        Ok(self.push(value, Op::Permute(x, axes.to_vec())))
    }

    /// Swaps the last two axes.
    pub fn transpose(&mut self, x: Var) -> Result<Var> {
        let rank = self.value(x).ndim();
        if rank < 2 {
            return Err(Error::InvalidShape {
                shape: self.shape(x).to_vec(),
                reason: "transpose needs at least two axes".into(),
            });
        }
        let mut axes: Vec<usize> = (0..rank).collect();
        axes.swap(rank - 2, rank - 1);
        self.permute(x, &axes)
    }

    pub fn concat(&mut self, xs: &[Var], axis: usize) -> Result<Var> {
        let arrays: Vec<&NdArray> = xs.iter().map(|&v| self.value(v)).collect();
        let value = NdArray::concat(&arrays, axis)?;
        Ok(self.push(value, Op::Concat(xs.to_vec(), axis)))
    }

    pub fn softmax(&mut self, x: Var, axis: usize) -> Result<Var> {
        let xv = self.value(x);
        if axis >= xv.ndim() {
            return Err(Error::InvalidShape {
                shape: xv.shape().to_vec(),
                reason: format!("softmax axis {axis} out of range"),
            });
        }
        let value = kernels::softmax_forward(xv, axis);
        Ok(self.push(value, Op::Softmax(x, axis)))
    }

    /// Mean over `axes`, which are removed from the output shape.
    pub fn mean_axes(&mut self, x: Var, axes: &[usize]) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape();
        let mut sorted = axes.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        if sorted.len() != axes.len() || sorted.iter().any(|&a| a >= shape.len()) {
            return Err(Error::InvalidShape {
                shape: shape.to_vec(),
                reason: format!("invalid pooling axes {axes:?}"),
            });
        }
        let (out_shape, map) = reduction_map(shape, &sorted);
        let count: usize = sorted.iter().map(|&a| shape[a]).product();
        let mut out = vec![0.0; numel(&out_shape)];
        for (i, &o) in map.iter().enumerate() {
            out[o] += xv.data()[i];
        }
        let inv = 1.0 / count as f64;
        out.iter_mut().for_each(|v| *v *= inv);
        let value = NdArray::new(out_shape, out)?;
        Ok(self.push(value, Op::MeanAxes(x, sorted)))
    }

    /// Sum of all elements, as a 0-dimensional array.
    pub fn sum(&mut self, x: Var) -> Var {
        let value = NdArray::scalar(self.value(x).sum());
        self.push(value, Op::Sum(x))
    }

    /// Convolution along the frame axis of `[N, C, T, V]` input with kernel
    /// `[C_out, C_in, k_t]` and optional bias `[C_out]`.
    ///
    /// Output frames: `T' = ⌊(T + 2·padding − k_t) / stride⌋ + 1`.
    pub fn temporal_conv(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.c_out] {
                return Err(Error::Shape {
                    op: "temporal_conv bias",
                    lhs: self.shape(w).to_vec(),
                    rhs: self.shape(b).to_vec(),
                });
            }
        }
        let value = kernels::temporal_conv_forward(self.value(x), self.value(w), b.map(|b| self.value(b)), geom);
        Ok(self.push(value, Op::TemporalConv { x, w, b, geom }))
    }

    /// Multi-head scaled dot-product attention along axis 1.
    ///
    /// `q` and `k` are `[B, T, heads·d_k]`, `v` is `[B, T, heads·d_v]`; head
    /// `i` owns the `i`-th slice of the last axis. Returns the concatenated
    /// head outputs `[B, T, heads·d_v]` and the softmax weights
    /// `[B, heads, T, T]`, the latter recorded as a detached node.
    pub fn attention(&mut self, q: Var, k: Var, v: Var, heads: usize, scale: f64) -> Result<(Var, Var)> {
        let (qs, ks, vs) = (self.shape(q), self.shape(k), self.shape(v));
        if qs.len() != 3
            || qs != ks
            || vs.len() != 3
            || vs[..2] != qs[..2]
            || heads == 0
            || qs[2] % heads != 0
            || vs[2] % heads != 0
        {
            return Err(Error::Shape {
                op: "attention",
                lhs: qs.to_vec(),
                rhs: vs.to_vec(),
            });
        }
        let geom = AttnGeom {
            batch: qs[0],
            t: qs[1],
            heads,
            d_k: qs[2] / heads,
            d_v: vs[2] / heads,
            scale,
        };
        let (out, w) =
            kernels::attention_forward(self.value(q).data(), self.value(k).data(), self.value(v).data(), geom);
        let out_shape = vec![geom.batch, geom.t, vs[2]];
        let weights = self.push(NdArray::new(vec![geom.batch, heads, geom.t, geom.t], w)?, Op::Leaf);
        let out = self.push(NdArray::new(out_shape, out)?, Op::Attention { q, k, v, weights, geom });
        Ok((out, weights))
    }

    /// Batch normalization over every axis except `axis`.
    ///
    /// Train mode normalizes with the batch mean and biased variance and
    /// folds them into `stats` (unbiased variance, as is conventional); eval
    /// mode uses the running values.
    pub fn batch_norm(
        &mut self,
        x: Var,
        gamma: Var,
        beta: Var,
        axis: usize,
        stats: &mut BatchNormStats,
        mode: Mode,
    ) -> Result<Var> {
        let xv = self.value(x);
        let shape = xv.shape().to_vec();
        if axis >= shape.len() {
            return Err(Error::InvalidShape {
                shape,
                reason: format!("channel axis {axis} out of range"),
            });
        }
        let (outer, ch, inner) = kernels::axis_split(&shape, axis);
        for (name, v) in [("gamma", gamma), ("beta", beta)] {
            if self.shape(v) != [ch] {
                return Err(Error::Shape {
                    op: if name == "gamma" {
                        "batch_norm gamma"
                    } else {
                        "batch_norm beta"
                    },
                    lhs: shape.clone(),
                    rhs: self.shape(v).to_vec(),
                });
            }
        }
        if stats.channels() != ch {
            return Err(Error::Shape {
                op: "batch_norm stats",
                lhs: shape,
                rhs: vec![stats.channels()],
            });
        }
        let m = outer * inner;
        let xd = xv.data();
        let (mean, var) = match mode {
            Mode::Train => {
                let mut mean = vec![0.0; ch];
                let mut var = vec![0.0; ch];
                for o in 0..outer {
                    for (c, mc) in mean.iter_mut().enumerate() {
                        let base = (o * ch + c) * inner;
                        *mc += xd[base..base + inner].iter().sum::<f64>();
                    }
                }
                mean.iter_mut().for_each(|v| *v /= m as f64);
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        var[c] += xd[base..base + inner]
                            .iter()
                            .map(|v| (v - mean[c]) * (v - mean[c]))
                            .sum::<f64>();
                    }
                }
                var.iter_mut().for_each(|v| *v /= m as f64);
                let mo = stats.momentum;
                let unbias = if m > 1 { m as f64 / (m - 1) as f64 } else { 1.0 };
                for c in 0..ch {
                    stats.running_mean[c] = (1.0 - mo) * stats.running_mean[c] + mo * mean[c];
                    stats.running_var[c] = (1.0 - mo) * stats.running_var[c] + mo * var[c] * unbias;
                }
                stats.updates += 1;
                (mean, var)
            }
            Mode::Eval => {
                if stats.updates == 0 {
                    log::warn!("batch norm evaluated before any training step; using initial statistics");
                }
                (stats.running_mean.clone(), stats.running_var.clone())
            }
        };
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / crate::math::sqrt(v + stats.eps)).collect();
        let gd = self.value(gamma).data();
        let bd = self.value(beta).data();
        let mut x_hat = vec![0.0; xd.len()];
        let mut y = vec![0.0; xd.len()];
        for o in 0..outer {
            for c in 0..ch {
                let base = (o * ch + c) * inner;
                for i in base..base + inner {
                    let h = (xd[i] - mean[c]) * inv_std[c];
                    x_hat[i] = h;
                    y[i] = gd[c] * h + bd[c];
                }
            }
        }
        let x_hat = NdArray::new(shape.clone(), x_hat)?;
        let value = NdArray::new(shape, y)?;
        Ok(self.push(
            value,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis,
                x_hat,
                inv_std,
                batch_stats: mode == Mode::Train,
            },
        ))
    }

    /// `D^{-1/2}(A ⊙ E + I)D^{-1/2}` for a binary partition `base` and a
    /// learnable `mask`, with `D` the row sums of the bracketed matrix.
    pub fn normalize_adjacency(&mut self, base: &NdArray, mask: Var) -> Result<Var> {
        let b = masked_with_identity(base, self.value(mask))?;
        let value = kernels::sym_normalize(&b)?;
        Ok(self.push(
            value,
            Op::NormalizeAdjacency {
                mask,
                base: base.clone(),
            },
        ))
    }

    /// Mean Huber loss between `pred` and `target`, with residual `target − pred`.
    pub fn huber_loss(&mut self, pred: Var, target: &NdArray, delta: f64) -> Result<Var> {
        let p = self.value(pred);
        p.expect_same_shape(target, "huber_loss")?;
        if !(delta > 0.0) {
            return Err(Error::Config(format!("huber delta must be positive, got {delta}")));
        }
        let n = p.len().max(1) as f64;
        let total: f64 = p
            .data()
            .iter()
            .zip(target.data())
            .map(|(yh, y)| kernels::huber_value(y - yh, delta))
            .sum();
        Ok(self.push(
            NdArray::scalar(total / n),
            Op::Huber {
                pred,
                target: target.clone(),
                delta,
            },
        ))
    }

    /// Gradients of scalar `loss` with respect to every recorded node.
    pub fn gradients(&self, loss: Var) -> Result<Gradients> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        let needs = vec![true; loss.0 + 1];
        let grads = self.run_backward(loss, needs, |_| true)?;
        Ok(Gradients { grads })
    }

    fn run_backward(&self, loss: Var, needs: Vec<bool>, keep: impl Fn(usize) -> bool) -> Result<Vec<Option<NdArray>>> {
        let lv = self.value(loss);
        let mut grads = GradSlots {
            slots: Vec::new(),
            needs,
        };
        grads.slots.resize_with(loss.0 + 1, || None);
        grads.slots[loss.0] = Some(NdArray::full(lv.shape(), 1.0));
        for i in (0..=loss.0).rev() {
            let Some(g) = grads.slots[i].take() else { continue };
            self.propagate(i, &g, &mut grads)?;
            if keep(i) {
                grads.slots[i] = Some(g);
            }
        }
        Ok(grads.slots)
    }

    /// Backpropagates `loss` and adds the result into every trainable
    /// parameter gradient reachable from it.
    pub fn backward(&self, loss: Var, store: &mut ParamStore) -> Result<()> {
        let lv = self.value(loss);
        if lv.len() != 1 {
            return Err(Error::Contract(format!(
                "backward requires a scalar loss, got shape {:?}",
                lv.shape()
            )));
        }
        // only nodes downstream of a trainable parameter carry gradients
        let mut needs = vec![false; loss.0 + 1];
        for i in 0..=loss.0 {
            needs[i] = match &self.nodes[i].op {
                Op::Leaf => false,
                Op::Param(id) => store.get(*id).trainable,
                op => op_inputs(op).iter().any(|v| needs[v.0]),
            };
        }
        let is_param = |i: usize| matches!(self.nodes[i].op, Op::Param(_));
        let grads = self.run_backward(loss, needs, is_param)?;
        for (i, node) in self.nodes.iter().enumerate().take(loss.0 + 1) {
            if let (Op::Param(id), Some(g)) = (&node.op, grads[i].as_ref()) {
                let p = store.get_mut(*id);
                if p.trainable {
                    p.grad.add_assign(g)?;
                }
            }
        }
        Ok(())
    }

    fn propagate(&self, i: usize, g: &NdArray, grads: &mut GradSlots) -> Result<()> {
        let node = &self.nodes[i];
        match &node.op {
            Op::Leaf | Op::Param(_) => {}
            Op::MatMul(a, b) => {
                let av = self.value(*a);
                let bv = self.value(*b);
                let plan = MatmulPlan::new(av.shape(), bv.shape())?;
                let mut da = vec![0.0; av.len()];
                let mut db = vec![0.0; bv.len()];
                let (m, k, n) = (plan.m, plan.k, plan.n);
                let (want_a, want_b) = (grads.wants(*a), grads.wants(*b));
                for &(ao, bo, co) in &plan.batches {
                    let dc = &g.data()[co..co + m * n];
                    if want_a {
                        gemm_acc_nt(dc, &bv.data()[bo..bo + k * n], &mut da[ao..ao + m * k], m, k, n);
                    }
                    if want_b {
                        gemm_acc_tn(&av.data()[ao..ao + m * k], dc, &mut db[bo..bo + k * n], m, k, n);
                    }
                }
                grads.add(*a, NdArray::new(av.shape().to_vec(), da)?);
                grads.add(*b, NdArray::new(bv.shape().to_vec(), db)?);
            }
            Op::Add(a, b) => {
                grads.add(*a, g.clone());
                grads.add(*b, g.clone());
            }
            Op::Mul(a, b) => {
                let ga = g.zip_map(self.value(*b), |d, y| d * y)?;
                let gb = g.zip_map(self.value(*a), |d, x| d * x)?;
                grads.add(*a, ga);
                grads.add(*b, gb);
            }
            Op::Scale(a, f) => grads.add(*a, g.map(|d| d * f)),
            Op::AddBias(x, b) => {
                let last = self.shape(*b)[0];
                let mut gb = vec![0.0; last];
                for (i, d) in g.data().iter().enumerate() {
                    gb[i % last] += d;
                }
                grads.add(*x, g.clone());
                grads.add(*b, NdArray::new(vec![last], gb)?);
            }
            Op::Relu(x) => {
                let gx = g.zip_map(&node.value, |d, y| if y > 0.0 { d } else { 0.0 })?;
                grads.add(*x, gx);
            }
            Op::Reshape(x) => {
                grads.add(*x, g.reshape(self.shape(*x))?);
            }
            Op::Permute(x, axes) => {
                let mut inverse = vec![0; axes.len()];
                for (i, &a) in axes.iter().enumerate() {
                    inverse[a] = i;
                }
                grads.add(*x, g.permute(&inverse)?);
            }
            Op::Concat(xs, axis) => {
                let outer: usize = g.shape()[..*axis].iter().product();
                let total_chunk: usize = g.shape()[*axis..].iter().product();
                let mut offset = 0;
                for x in xs {
                    let shape = self.shape(*x).to_vec();
                    let chunk: usize = shape[*axis..].iter().product();
                    let mut part = Vec::with_capacity(numel(&shape));
                    for o in 0..outer {
                        let start = o * total_chunk + offset;
                        part.extend_from_slice(&g.data()[start..start + chunk]);
                    }
                    offset += chunk;
                    grads.add(*x, NdArray::new(shape, part)?);
                }
            }
            Op::Softmax(x, axis) => {
                grads.add(*x, kernels::softmax_backward(&node.value, g, *axis));
            }
            Op::MeanAxes(x, axes) => {
                let shape = self.shape(*x);
                let (_, map) = reduction_map(shape, axes);
                let count: usize = axes.iter().map(|&a| shape[a]).product();
                let inv = 1.0 / count as f64;
                let gd = g.data();
                let gx = NdArray::from_fn(shape, |i| gd[map[i]] * inv);
                grads.add(*x, gx);
            }
            Op::Sum(x) => {
                let d = g.data()[0];
                grads.add(*x, NdArray::full(self.shape(*x), d));
            }
            Op::Attention { q, k, v, weights, geom } => {
                let (qv, kv, vv) = (self.value(*q), self.value(*k), self.value(*v));
                let (dq, dk, dv) = kernels::attention_backward(
                    qv.data(),
                    kv.data(),
                    vv.data(),
                    self.value(*weights).data(),
                    g.data(),
                    *geom,
                );
                grads.add(*q, NdArray::new(qv.shape().to_vec(), dq)?);
                grads.add(*k, NdArray::new(kv.shape().to_vec(), dk)?);
                grads.add(*v, NdArray::new(vv.shape().to_vec(), dv)?);
            }
            Op::TemporalConv { x, w, b, geom } => {
                let (dx, dw, db) = kernels::temporal_conv_backward(self.value(*x), self.value(*w), g, *geom);
                grads.add(*x, dx);
                grads.add(*w, dw);
                if let Some(b) = b {
                    grads.add(*b, db);
                }
            }
            Op::BatchNorm {
                x,
                gamma,
                beta,
                axis,
                x_hat,
                inv_std,
                batch_stats,
            } => {
                let shape = x_hat.shape();
                let (outer, ch, inner) = kernels::axis_split(shape, *axis);
                let m = (outer * inner) as f64;
                let gd = g.data();
                let hd = x_hat.data();
                let gam = self.value(*gamma).data();
                let mut dgamma = vec![0.0; ch];
                let mut dbeta = vec![0.0; ch];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        for i in base..base + inner {
                            dgamma[c] += gd[i] * hd[i];
                            dbeta[c] += gd[i];
                        }
                    }
                }
                let mut dx = vec![0.0; gd.len()];
                for o in 0..outer {
                    for c in 0..ch {
                        let base = (o * ch + c) * inner;
                        let k = gam[c] * inv_std[c];
                        for i in base..base + inner {
                            dx[i] = if *batch_stats {
                                k * (gd[i] - dbeta[c] / m - hd[i] * dgamma[c] / m)
                            } else {
                                k * gd[i]
                            };
                        }
                    }
                }
                grads.add(*x, NdArray::new(shape.to_vec(), dx)?);
                grads.add(*gamma, NdArray::new(vec![ch], dgamma)?);
                grads.add(*beta, NdArray::new(vec![ch], dbeta)?);
            }
            Op::NormalizeAdjacency { mask, base } => {
                let b = masked_with_identity(base, self.value(*mask))?;
                let db = kernels::sym_normalize_backward(&b, g)?;
                let dmask = db.zip_map(base, |d, a| d * a)?;
                grads.add(*mask, dmask);
            }
            Op::Huber { pred, target, delta } => {
                let p = self.value(*pred);
                let scale = g.data()[0] / p.len().max(1) as f64;
                let gp = NdArray::from_fn(p.shape(), |i| {
                    -scale * kernels::huber_slope(target.data()[i] - p.data()[i], *delta)
                });
                grads.add(*pred, gp);
            }
        }
        Ok(())
    }
}

fn masked_with_identity(base: &NdArray, mask: &NdArray) -> Result<NdArray> {
    base.expect_same_shape(mask, "normalize_adjacency")?;
    if base.ndim() != 2 || base.shape()[0] != base.shape()[1] {
        return Err(Error::InvalidShape {
            shape: base.shape().to_vec(),
            reason: "adjacency must be square".into(),
        });
    }
    if !mask.is_finite() {
        return Err(Error::Numeric("adjacency mask contains non-finite values".into()));
    }
    let v = base.shape()[0];
    let mut b = base.zip_map(mask, |a, e| a * e)?;
    for i in 0..v {
        b.data_mut()[i * v + i] += 1.0;
    }
    Ok(b)
}

/// Output shape after removing `axes`, plus the output index of every input
/// element.
fn reduction_map(shape: &[usize], axes: &[usize]) -> (Vec<usize>, Vec<usize>) {
    let out_shape: Vec<usize> = shape
        .iter()
        .enumerate()
        .filter(|(i, _)| !axes.contains(i))
        .map(|(_, &d)| d)
        .collect();
    let out_strides = strides(&out_shape);
    let mut keep_stride = vec![0usize; shape.len()];
    let mut j = 0;
    for (i, ks) in keep_stride.iter_mut().enumerate() {
        if !axes.contains(&i) {
            *ks = out_strides[j];
            j += 1;
        }
    }
    let total = numel(shape);
    let mut map = Vec::with_capacity(total);
    let mut idx = vec![0usize; shape.len()];
    let mut off = 0usize;
    for _ in 0..total {
        map.push(off);
        for d in (0..shape.len()).rev() {
            idx[d] += 1;
            off += keep_stride[d];
            if idx[d] < shape[d] {
                break;
            }
            off -= keep_stride[d] * idx[d];
            idx[d] = 0;
        }
    }
    (out_shape, map)
}

#[cfg(test)]
mod tests;
