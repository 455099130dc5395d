//! Stacked ST-GCN blocks, per-joint temporal attention and the scalar
//! regression head.

use alloc::format;
use alloc::string::String;
use alloc::vec;
use alloc::vec::Vec;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::autograd::{BatchNormStats, Mode, ParamId, ParamStore, Tape, Var};
use crate::error::{Error, Result};
use crate::math;
use crate::skeleton::{build_partitions, invert_permutation, permute_square, JointLayout, PartitionedAdjacency};
use crate::tensor::NdArray;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct BlockConfig {
    pub in_channels: usize,
    pub out_channels: usize,
    pub kernel: usize,
    pub stride: usize,
    pub residual: bool,
}

impl BlockConfig {
    fn validate(&self, index: usize) -> Result<()> {
        if self.kernel % 2 == 0 {
            return Err(Error::Config(format!("block {index}: temporal kernel must be odd")));
        }
        if !(1..=2).contains(&self.stride) {
            return Err(Error::Config(format!("block {index}: stride must be 1 or 2")));
        }
        if self.in_channels == 0 || self.out_channels == 0 {
            return Err(Error::Config(format!("block {index}: channel counts must be positive")));
        }
        if index == 0 && self.residual {
            return Err(Error::Config("the first block has no residual path".into()));
        }
        Ok(())
    }

    fn needs_projection(&self) -> bool {
        self.residual && (self.in_channels != self.out_channels || self.stride != 1)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct AttentionConfig {
    pub heads: usize,
    pub d_k: usize,
    pub d_v: usize,
    pub model_dim: usize,
}

impl AttentionConfig {
    /// `heads` heads of width `model_dim / heads`.
    pub fn with_heads(model_dim: usize, heads: usize) -> Result<Self> {
        if heads == 0 || model_dim % heads != 0 {
            return Err(Error::Config(format!(
                "{heads} heads do not divide model dimension {model_dim}"
            )));
        }
        Ok(Self {
            heads,
            d_k: model_dim / heads,
            d_v: model_dim / heads,
            model_dim,
        })
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelConfig {
    pub in_channels: usize,
    /// Hop partitions `0..=max_hop`.
    pub max_hop: usize,
    pub blocks: Vec<BlockConfig>,
    pub attention: Option<AttentionConfig>,
    pub head_hidden: usize,
    /// Required input frame count; `None` accepts any length.
    pub expected_frames: Option<usize>,
    pub init_seed: u64,
}

fn schedule(in_channels: usize, stages: &[(usize, usize, usize)], kernel: usize) -> Vec<BlockConfig> {
    let mut blocks = Vec::new();
    let mut c_in = in_channels;
    for &(c_out, count, first_stride) in stages {
        for i in 0..count {
            blocks.push(BlockConfig {
                in_channels: c_in,
                out_channels: c_out,
                kernel,
                stride: if i == 0 { first_stride } else { 1 },
                residual: !blocks.is_empty(),
            });
            c_in = c_out;
        }
    }
    blocks
}

impl ModelConfig {
    /// Ten blocks: 64 × 4, 128 × 3 and 256 × 3 channels, each later stage
    /// opening with a stride-2 block.
    pub fn canonical(in_channels: usize) -> Self {
        Self {
            in_channels,
            max_hop: 2,
            blocks: schedule(in_channels, &[(64, 4, 1), (128, 3, 2), (256, 3, 2)], 9),
            attention: Some(AttentionConfig::with_heads(256, 4).expect("256 splits into 4 heads")),
            head_hidden: 64,
            expected_frames: Some(288),
            init_seed: 0,
        }
    }

    /// Same topology at single-core width: 8, 16 (stride 2) and 16 (stride 2).
    pub fn desk(in_channels: usize) -> Self {
        Self {
            in_channels,
            max_hop: 2,
            blocks: schedule(in_channels, &[(8, 1, 1), (16, 1, 2), (16, 1, 2)], 9),
            attention: Some(AttentionConfig::with_heads(16, 4).expect("16 splits into 4 heads")),
            head_hidden: 64,
            expected_frames: Some(288),
            init_seed: 0,
        }
    }

    pub fn preset(name: &str, in_channels: usize) -> Result<Self> {
        match name {
            "canonical" => Ok(Self::canonical(in_channels)),
            "desk" => Ok(Self::desk(in_channels)),
            other => Err(Error::Config(format!("unknown model preset `{other}`"))),
        }
    }

    pub fn out_channels(&self) -> usize {
        self.blocks.last().map_or(self.in_channels, |b| b.out_channels)
    }

    pub fn validate(&self) -> Result<()> {
        if self.blocks.is_empty() {
            return Err(Error::Config("model needs at least one block".into()));
        }
        if self.max_hop == 0 {
            return Err(Error::Config("max_hop must be at least 1".into()));
        }
        let mut c = self.in_channels;
        for (i, b) in self.blocks.iter().enumerate() {
            b.validate(i)?;
            if b.in_channels != c {
                return Err(Error::Config(format!(
                    "block {i} expects {} input channels but receives {c}",
                    b.in_channels
                )));
            }
            c = b.out_channels;
        }
        if let Some(a) = &self.attention {
            if a.model_dim != c || a.heads == 0 || a.d_k == 0 || a.d_v == 0 {
                return Err(Error::Config(format!(
                    "attention model dimension {} does not match block output {c}",
                    a.model_dim
                )));
            }
        }
        if self.head_hidden == 0 {
            return Err(Error::Config("head hidden width must be positive".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
struct BlockParams {
    masks: Vec<ParamId>,
    gcn: Vec<ParamId>,
    bn_s: (ParamId, ParamId, usize),
    tconv: (ParamId, ParamId),
    bn_t: (ParamId, ParamId, usize),
    projection: Option<(ParamId, ParamId, ParamId, usize)>,
}

#[derive(Debug, Clone, PartialEq)]
struct AttentionParams {
    q: ParamId,
    k: ParamId,
    v: ParamId,
    o: ParamId,
}

#[derive(Debug, Clone, PartialEq)]
struct HeadParams {
    w1: ParamId,
    b1: ParamId,
    w2: ParamId,
    b2: ParamId,
}

/// Every parameter value by name plus the batch-norm statistics.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelState {
    pub params: Vec<(String, NdArray)>,
    pub bn: Vec<BatchNormStats>,
}

/// Tape handles produced by one forward pass.
#[derive(Debug, Clone, Copy)]
pub struct ForwardOutput {
    /// `N × 1` scores.
    pub scores: Var,
    /// Block-stack output `X^L`, `N × C × T' × V`.
    pub features: Var,
    /// Per-head attention weights, `(N·V) × h × T' × T'`.
    pub attention: Option<Var>,
}

/// Parameters, running statistics and fixed graph of a model.
#[derive(Debug, Clone, PartialEq)]
pub struct RastGModel {
    config: ModelConfig,
    layout: JointLayout,
    adjacency: PartitionedAdjacency,
    params: ParamStore,
    bn: Vec<BatchNormStats>,
    blocks: Vec<BlockParams>,
    attention: Option<AttentionParams>,
    head: HeadParams,
}

struct Init {
    rng: ChaCha8Rng,
}

impl Init {
    fn normal(&mut self, shape: &[usize], std: f64) -> NdArray {
        let dist = Normal::new(0.0, std).expect("positive std");
        NdArray::from_fn(shape, |_| dist.sample(&mut self.rng))
    }
}

impl RastGModel {
    pub fn new(config: ModelConfig, layout: JointLayout) -> Result<Self> {
        config.validate()?;
        layout.validate()?;
        let adjacency = build_partitions(&layout, config.max_hop)?;
        let v = layout.num_joints();
        let parts = adjacency.num_partitions();
        let mut init = Init {
            rng: ChaCha8Rng::seed_from_u64(config.init_seed),
        };
        let mut params = ParamStore::new();
        let mut bn = Vec::new();
        let mut add_bn = |params: &mut ParamStore, name: &str, c: usize| {
            let g = params.add(format!("{name}.gamma"), NdArray::ones(&[c]), true);
            let b = params.add(format!("{name}.beta"), NdArray::zeros(&[c]), true);
            bn.push(BatchNormStats::new(c));
            (g, b, bn.len() - 1)
        };
        let mut blocks = Vec::new();
        for (l, b) in config.blocks.iter().enumerate() {
            let (ci, co, kt) = (b.in_channels, b.out_channels, b.kernel);
            let masks = (0..parts)
                .map(|k| params.add(format!("block{l}.mask{k}"), NdArray::ones(&[v, v]), true))
                .collect();
            let gcn_std = math::sqrt(2.0 / (ci * parts) as f64);
            let gcn = (0..parts)
                .map(|k| params.add(format!("block{l}.gcn{k}"), init.normal(&[co, ci], gcn_std), true))
                .collect();
            let bn_s = add_bn(&mut params, &format!("block{l}.bn_s"), co);
            let tw = params.add(
                format!("block{l}.tconv.weight"),
                init.normal(&[co, co, kt], math::sqrt(2.0 / (co * kt) as f64)),
                true,
            );
            let tb = params.add(format!("block{l}.tconv.bias"), NdArray::zeros(&[co]), true);
            let bn_t = add_bn(&mut params, &format!("block{l}.bn_t"), co);
            let projection = if b.needs_projection() {
                let w = params.add(
                    format!("block{l}.res.weight"),
                    init.normal(&[co, ci, 1], math::sqrt(2.0 / ci as f64)),
                    true,
                );
                let (g, be, s) = add_bn(&mut params, &format!("block{l}.res_bn"), co);
                Some((w, g, be, s))
            } else {
                None
            };
            blocks.push(BlockParams {
                masks,
                gcn,
                bn_s,
                tconv: (tw, tb),
                bn_t,
                projection,
            });
        }
        let attention = config.attention.map(|a| {
            let c = a.model_dim;
            let s_in = 1.0 / math::sqrt(c as f64);
            let s_out = 1.0 / math::sqrt((a.heads * a.d_v) as f64);
            AttentionParams {
                q: params.add("attn.query", init.normal(&[c, a.heads * a.d_k], s_in), true),
                k: params.add("attn.key", init.normal(&[c, a.heads * a.d_k], s_in), true),
                v: params.add("attn.value", init.normal(&[c, a.heads * a.d_v], s_in), true),
                o: params.add("attn.output", init.normal(&[a.heads * a.d_v, c], s_out), true),
            }
        });
        let c = config.out_channels();
        let hid = config.head_hidden;
        let head = HeadParams {
            w1: params.add("head.w1", init.normal(&[c, hid], math::sqrt(2.0 / c as f64)), true),
            b1: params.add("head.b1", NdArray::zeros(&[hid]), true),
            w2: params.add("head.w2", init.normal(&[hid, 1], 1.0 / math::sqrt(hid as f64)), true),
            b2: params.add("head.b2", NdArray::zeros(&[1]), true),
        };
        Ok(Self {
            config,
            layout,
            adjacency,
            params,
            bn,
            blocks,
            attention,
            head,
        })
    }

    pub fn config(&self) -> &ModelConfig {
        &self.config
    }

    pub fn layout(&self) -> &JointLayout {
        &self.layout
    }

    pub fn adjacency(&self) -> &PartitionedAdjacency {
        &self.adjacency
    }

    pub fn params(&self) -> &ParamStore {
        &self.params
    }

    pub fn params_mut(&mut self) -> &mut ParamStore {
        &mut self.params
    }

    pub fn bn_stats(&self) -> &[BatchNormStats] {
        &self.bn
    }

    pub fn state(&self) -> ModelState {
        ModelState {
            params: self
                .params
                .iter()
                .map(|(_, p)| (p.name.clone(), p.value.clone()))
                .collect(),
            bn: self.bn.clone(),
        }
    }

    /// Replaces every parameter value and batch-norm statistic, checking
    /// names and shapes against this model's own layout.
    pub fn load_state(&mut self, state: &ModelState) -> Result<()> {
        let (values, bn) = (&state.params, &state.bn);
        if values.len() != self.params.len() {
            return Err(Error::Data(format!(
                "state has {} parameters, model has {}",
                values.len(),
                self.params.len()
            )));
        }
        if bn.len() != self.bn.len()
            || bn
                .iter()
                .zip(&self.bn)
                .any(|(a, b)| a.channels() != b.channels() || a.running_var.len() != b.running_var.len())
        {
            return Err(Error::Data("batch-norm statistics do not match the model".into()));
        }
        for (name, value) in values {
            let id = self
                .params
                .find(name)
                .ok_or_else(|| Error::Data(format!("unknown parameter `{name}`")))?;
            let p = self.params.get_mut(id);
            if p.value.shape() != value.shape() {
                return Err(Error::Data(format!(
                    "parameter `{name}` has shape {:?}, expected {:?}",
                    value.shape(),
                    p.value.shape()
                )));
            }
            p.value = value.clone();
        }
        self.bn = bn.clone();
        Ok(())
    }

    /// The same model with joints relabeled so new joint `i` is old joint `perm[i]`.
    pub fn permute_joints(&self, perm: &[usize]) -> Result<Self> {
        let v = self.layout.num_joints();
        invert_permutation(perm, v)?;
        let mut out = self.clone();
        out.layout = self.layout.permuted(perm)?;
        out.adjacency = self.adjacency.permuted(perm)?;
        for b in &out.blocks {
            for &m in &b.masks {
                let p = out.params.get_mut(m);
                p.value = permute_square(&p.value, perm);
            }
        }
        Ok(out)
    }

    /// Accepts `N × C × T × V` or `N × C × T × V × 1`.
    pub fn check_input(&self, x: &NdArray) -> Result<Vec<usize>> {
        let s = x.shape();
        let s4 = match s.len() {
            4 => s.to_vec(),
            5 if s[4] == 1 => s[..4].to_vec(),
            5 => {
                return Err(Error::Contract(format!(
                    "only single-instance input (M = 1) is supported, got M = {}",
                    s[4]
                )))
            }
            _ => {
                return Err(Error::InvalidShape {
                    shape: s.to_vec(),
                    reason: "model input must be N × C × T × V × M".into(),
                })
            }
        };
        if s4[0] == 0 {
            return Err(Error::Contract("empty batch".into()));
        }
        if s4[1] != self.config.in_channels || s4[3] != self.layout.num_joints() {
            return Err(Error::Shape {
                op: "model input",
                lhs: s.to_vec(),
                rhs: vec![s4[0], self.config.in_channels, s4[2], self.layout.num_joints(), 1],
            });
        }
        if let Some(t) = self.config.expected_frames {
            if s4[2] != t {
                return Err(Error::Contract(format!(
                    "input has {} frames; preprocess to {t} frames first",
                    s4[2]
                )));
            }
        }
        if !x.is_finite() {
            return Err(Error::Data("model input contains non-finite values".into()));
        }
        Ok(s4)
    }

    /// Records the forward pass on `tape`. Train mode updates batch-norm statistics.
    pub fn forward_on_tape(&mut self, tape: &mut Tape, x: &NdArray, mode: Mode) -> Result<ForwardOutput> {
        let s4 = self.check_input(x)?;
        let input = tape.leaf(x.reshape(&s4)?);
        let mut h = input;
        for (l, cfg) in self.config.blocks.clone().iter().enumerate() {
            h = self.block_on_tape(tape, h, l, cfg, mode)?;
        }
        let features = h;
        let (attended, weights) = match (&self.attention, &self.config.attention) {
            (Some(p), Some(cfg)) => {
                let a = AttentionVars {
                    q: tape.param(&self.params, p.q),
                    k: tape.param(&self.params, p.k),
                    v: tape.param(&self.params, p.v),
                    o: tape.param(&self.params, p.o),
                };
                let out = temporal_attention(tape, features, &a, cfg)?;
                (out.output, Some(out.weights))
            }
            _ => (features, None),
        };
        let pooled = tape.mean_axes(attended, &[2, 3])?;
        let w1 = tape.param(&self.params, self.head.w1);
        let b1 = tape.param(&self.params, self.head.b1);
        let w2 = tape.param(&self.params, self.head.w2);
        let b2 = tape.param(&self.params, self.head.b2);
        let hidden = tape.linear(pooled, w1, Some(b1))?;
        let hidden = tape.relu(hidden);
        let scores = tape.linear(hidden, w2, Some(b2))?;
        Ok(ForwardOutput {
            scores,
            features,
            attention: weights,
        })
    }

    fn block_on_tape(&mut self, tape: &mut Tape, x: Var, l: usize, cfg: &BlockConfig, mode: Mode) -> Result<Var> {
        let p = self.blocks[l].clone();
        let mut adj = Vec::with_capacity(p.masks.len());
        for (k, &m) in p.masks.iter().enumerate() {
            let mask = tape.param(&self.params, m);
            adj.push(tape.normalize_adjacency(&self.adjacency.partitions[k], mask)?);
        }
        let weights: Vec<Var> = p.gcn.iter().map(|&w| tape.param(&self.params, w)).collect();
        let agg = graph_aggregate(tape, x, &adj, &weights)?;
        let s = self.bn_on_tape(tape, agg, p.bn_s, mode)?;
        let s = tape.relu(s);
        let tw = tape.param(&self.params, p.tconv.0);
        let tb = tape.param(&self.params, p.tconv.1);
        let g = tape.temporal_conv(s, tw, Some(tb), cfg.stride, cfg.kernel / 2)?;
        let g = self.bn_on_tape(tape, g, p.bn_t, mode)?;
        let out = if !cfg.residual {
            g
        } else if let Some((w, gamma, beta, stats)) = p.projection {
            let w = tape.param(&self.params, w);
            let r = tape.temporal_conv(x, w, None, cfg.stride, 0)?;
            let r = self.bn_on_tape(tape, r, (gamma, beta, stats), mode)?;
            tape.add(g, r)?
        } else {
            tape.add(g, x)?
        };
        Ok(tape.relu(out))
    }

    fn bn_on_tape(&mut self, tape: &mut Tape, x: Var, p: (ParamId, ParamId, usize), mode: Mode) -> Result<Var> {
        let gamma = tape.param(&self.params, p.0);
        let beta = tape.param(&self.params, p.1);
        tape.batch_norm(x, gamma, beta, 1, &mut self.bn[p.2], mode)
    }

    /// Eval-mode scores, one per batch element.
    pub fn predict(&mut self, x: &NdArray) -> Result<Vec<f64>> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, x, Mode::Eval)?;
        Ok(tape.value(out.scores).data().to_vec())
    }

    /// Eval-mode scores together with the pre-pooling feature map `X^L`.
    pub fn predict_with_features(&mut self, x: &NdArray) -> Result<(Vec<f64>, NdArray)> {
        let mut tape = Tape::new();
        let out = self.forward_on_tape(&mut tape, x, Mode::Eval)?;
        Ok((tape.value(out.scores).data().to_vec(), tape.value(out.features).clone()))
    }
}

/// `Σ_k Ã_k X W_k` for `x: N × Ci × T × V`, `adj[k]: V × V`, `weights[k]: Co × Ci`.
pub fn graph_aggregate(tape: &mut Tape, x: Var, adj: &[Var], weights: &[Var]) -> Result<Var> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 || adj.len() != weights.len() || adj.is_empty() {
        return Err(Error::InvalidShape {
            shape: xs,
            reason: format!(
                "graph aggregation over {} partitions and {} weights",
                adj.len(),
                weights.len()
            ),
        });
    }
    let (n, ci, t, v) = (xs[0], xs[1], xs[2], xs[3]);
    let parts = adj.len();
    let co = tape.shape(weights[0])[0];
    let mut transposed = Vec::with_capacity(parts);
    for (&a, &w) in adj.iter().zip(weights) {
        if tape.shape(a) != [v, v] {
            return Err(Error::Shape {
                op: "graph_aggregate",
                lhs: xs.clone(),
                rhs: tape.shape(a).to_vec(),
            });
        }
        if tape.shape(w) != [co, ci] {
            return Err(Error::Shape {
                op: "graph_aggregate",
                lhs: xs.clone(),
                rhs: tape.shape(w).to_vec(),
            });
        }
        transposed.push(tape.transpose(a)?);
    }
    // joints first: [.., j] · [Ã_0ᵀ | Ã_1ᵀ | ..] gives every partition at once
    let a_cat = tape.concat(&transposed, 1)?;
    let rows = tape.reshape(x, &[n * ci * t, v])?;
    let spread = tape.matmul(rows, a_cat)?;
    let spread = tape.reshape(spread, &[n, ci, t, parts, v])?;
    let spread = tape.permute(spread, &[0, 3, 1, 2, 4])?;
    let spread = tape.reshape(spread, &[n, parts * ci, t * v])?;
    let w_cat = tape.concat(weights, 1)?;
    let mixed = tape.matmul(w_cat, spread)?;
    tape.reshape(mixed, &[n, co, t, v])
}

/// `ReLU(Σ_k Ã_k X W_k)`.
pub fn spatial_gcn(tape: &mut Tape, x: Var, adj: &[Var], weights: &[Var]) -> Result<Var> {
    let agg = graph_aggregate(tape, x, adj, weights)?;
    Ok(tape.relu(agg))
}

/// Projection weights of one attention layer, already on a tape.
#[derive(Debug, Clone, Copy)]
pub struct AttentionVars {
    /// `C × h·d_k`
    pub q: Var,
    /// `C × h·d_k`
    pub k: Var,
    /// `C × h·d_v`
    pub v: Var,
    /// `h·d_v × C`
    pub o: Var,
}

#[derive(Debug, Clone, Copy)]
pub struct AttentionOutput {
    pub output: Var,
    /// Output before the residual is added.
    pub pre_residual: Var,
    pub weights: Var,
}

/// Multi-head self-attention along `T`, independently for every joint.
pub fn temporal_attention(
    tape: &mut Tape,
    x: Var,
    p: &AttentionVars,
    cfg: &AttentionConfig,
) -> Result<AttentionOutput> {
    let xs = tape.shape(x).to_vec();
    if xs.len() != 4 || xs[1] != cfg.model_dim {
        return Err(Error::Shape {
            op: "temporal_attention",
            lhs: xs,
            rhs: vec![cfg.model_dim],
        });
    }
    let (n, c, t, v) = (xs[0], xs[1], xs[2], xs[3]);
    let h = cfg.heads;
    let seq = tape.permute(x, &[0, 3, 2, 1])?;
    let seq = tape.reshape(seq, &[n * v, t, c])?;
    let q = tape.matmul(seq, p.q)?;
    let k = tape.matmul(seq, p.k)?;
    let val = tape.matmul(seq, p.v)?;
    let (heads, weights) = tape.attention(q, k, val, h, 1.0 / math::sqrt(cfg.d_k as f64))?;
    let proj = tape.matmul(heads, p.o)?;
    let proj = tape.reshape(proj, &[n, v, t, c])?;
    let pre_residual = tape.permute(proj, &[0, 3, 2, 1])?;
    let output = tape.add(pre_residual, x)?;
    Ok(AttentionOutput {
        output,
        pre_residual,
        weights,
    })
}

/// Mean Huber loss of `pred` against `target`.
pub fn huber_loss(pred: &[f64], target: &[f64], delta: f64) -> Result<f64> {
    let mut tape = Tape::new();
    let p = tape.leaf(NdArray::new(vec![pred.len()], pred.to_vec())?);
    let t = NdArray::new(vec![target.len()], target.to_vec())?;
    let loss = tape.huber_loss(p, &t, delta)?;
    Ok(tape.value(loss).data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::skeleton::LayoutVariant;

    fn toy_config(blocks: Vec<BlockConfig>, heads: usize) -> ModelConfig {
        let c = blocks.last().unwrap().out_channels;
        ModelConfig {
            in_channels: blocks[0].in_channels,
            max_hop: 2,
            blocks,
            attention: Some(AttentionConfig::with_heads(c, heads).unwrap()),
            head_hidden: 4,
            expected_frames: None,
            init_seed: 5,
        }
    }

    fn toy_blocks() -> Vec<BlockConfig> {
        vec![
            BlockConfig {
                in_channels: 3,
                out_channels: 4,
                kernel: 3,
                stride: 1,
                residual: false,
            },
            BlockConfig {
                in_channels: 4,
                out_channels: 4,
                kernel: 3,
                stride: 2,
                residual: true,
            },
        ]
    }

    fn random(shape: &[usize], seed: u64) -> NdArray {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let d = Normal::new(0.0, 1.0).unwrap();
        NdArray::from_fn(shape, |_| d.sample(&mut rng))
    }

    #[test]
    fn presets_validate() {
        ModelConfig::canonical(3).validate().unwrap();
        ModelConfig::desk(7).validate().unwrap();
        assert_eq!(ModelConfig::canonical(3).blocks.len(), 10);
        assert!(ModelConfig::preset("huge", 3).is_err());
        let mut bad = ModelConfig::desk(3);
        bad.blocks[0].kernel = 4;
        assert!(bad.validate().is_err());
    }

    #[test]
    fn spatial_gcn_examples() {
        let mut tape = Tape::new();
        let x = tape.leaf(NdArray::from_fn(&[1, 2, 3, 4], |i| i as f64));
        let a = tape.leaf(NdArray::eye(4));
        let w = tape.leaf(NdArray::eye(2));
        let y = spatial_gcn(&mut tape, x, &[a], &[w]).unwrap();
        assert_eq!(tape.value(y), tape.value(x));

        let x = tape.leaf(NdArray::full(&[1, 1, 1, 1], 3.0));
        let a = tape.leaf(NdArray::eye(1));
        let w = tape.leaf(NdArray::full(&[1, 1], 2.0));
        let y = spatial_gcn(&mut tape, x, &[a], &[w]).unwrap();
        assert_eq!(tape.value(y).data(), &[6.0]);

        let bad = tape.leaf(NdArray::eye(3));
        assert!(matches!(
            spatial_gcn(&mut tape, x, &[bad], &[w]),
            Err(Error::Shape { .. })
        ));
    }

    #[test]
    fn block_shapes_and_null_input() {
        let layout = JointLayout::chain(5).unwrap();
        let mut cfg = toy_config(toy_blocks(), 2);
        cfg.blocks.push(BlockConfig {
            in_channels: 4,
            out_channels: 4,
            kernel: 3,
            stride: 1,
            residual: true,
        });
        let mut model = RastGModel::new(cfg, layout).unwrap();
        let x = random(&[2, 3, 8, 5], 1);
        let mut tape = Tape::new();
        let out = model.forward_on_tape(&mut tape, &x, Mode::Train).unwrap();
        assert_eq!(tape.shape(out.features), &[2, 4, 4, 5]);
        assert_eq!(tape.shape(out.scores), &[2, 1]);

        // zero input, zero biases and eval-mode stats at init: every block emits zeros
        let mut fresh = RastGModel::new(toy_config(toy_blocks(), 2), JointLayout::chain(5).unwrap()).unwrap();
        let mut tape = Tape::new();
        let out = fresh
            .forward_on_tape(&mut tape, &NdArray::zeros(&[1, 3, 8, 5]), Mode::Eval)
            .unwrap();
        assert!(tape.value(out.features).data().iter().all(|v| *v == 0.0));
    }

    #[test]
    fn attention_degenerate_keys_average_values() {
        let cfg = AttentionConfig::with_heads(4, 2).unwrap();
        let mut tape = Tape::new();
        let xv = random(&[1, 4, 5, 3], 2);
        let x = tape.leaf(xv.clone());
        let vars = AttentionVars {
            q: tape.leaf(NdArray::zeros(&[4, 4])),
            k: tape.leaf(NdArray::zeros(&[4, 4])),
            v: tape.leaf(NdArray::eye(4)),
            o: tape.leaf(NdArray::eye(4)),
        };
        let out = temporal_attention(&mut tape, x, &vars, &cfg).unwrap();
        for w in tape.value(out.weights).data() {
            assert!((w - 0.2).abs() < 1e-15);
        }
        let pre = tape.value(out.pre_residual);
        for c in 0..4 {
            for j in 0..3 {
                let mean: f64 = (0..5).map(|t| xv.get(&[0, c, t, j])).sum::<f64>() / 5.0;
                for t in 0..5 {
                    assert!((pre.get(&[0, c, t, j]) - mean).abs() < 1e-12);
                }
            }
        }
    }

    #[test]
    fn attention_single_step_passes_values_through() {
        let cfg = AttentionConfig::with_heads(4, 1).unwrap();
        let mut tape = Tape::new();
        let xv = random(&[2, 4, 1, 3], 3);
        let x = tape.leaf(xv.clone());
        let vars = AttentionVars {
            q: tape.leaf(random(&[4, 4], 4)),
            k: tape.leaf(random(&[4, 4], 5)),
            v: tape.leaf(NdArray::eye(4)),
            o: tape.leaf(NdArray::eye(4)),
        };
        let out = temporal_attention(&mut tape, x, &vars, &cfg).unwrap();
        assert!(tape.value(out.weights).data().iter().all(|w| *w == 1.0));
        assert!(tape.value(out.pre_residual).max_abs_diff(&xv).unwrap() < 1e-15);
    }

    #[test]
    fn attention_never_mixes_joints() {
        let cfg = AttentionConfig::with_heads(4, 2).unwrap();
        let base = random(&[1, 4, 6, 3], 6);
        let mut zeroed = base.clone();
        for c in 0..4 {
            for t in 0..6 {
                zeroed.set(&[0, c, t, 1], 0.0);
            }
        }
        let run = |x: &NdArray| {
            let mut tape = Tape::new();
            let xv = tape.leaf(x.clone());
            let vars = AttentionVars {
                q: tape.leaf(random(&[4, 4], 7)),
                k: tape.leaf(random(&[4, 4], 8)),
                v: tape.leaf(random(&[4, 4], 9)),
                o: tape.leaf(random(&[4, 4], 10)),
            };
            let out = temporal_attention(&mut tape, xv, &vars, &cfg).unwrap();
            tape.value(out.pre_residual).clone()
        };
        let (a, b) = (run(&base), run(&zeroed));
        for c in 0..4 {
            for t in 0..6 {
                for j in [0, 2] {
                    assert_eq!(a.get(&[0, c, t, j]), b.get(&[0, c, t, j]));
                }
            }
        }
    }

    #[test]
    fn frame_contract_and_batch_determinism() {
        let layout = JointLayout::chain(5).unwrap();
        let mut cfg = toy_config(toy_blocks(), 2);
        cfg.expected_frames = Some(8);
        let mut model = RastGModel::new(cfg, layout).unwrap();
        assert!(matches!(
            model.predict(&NdArray::zeros(&[1, 3, 9, 5])),
            Err(Error::Contract(_))
        ));
        let one = random(&[1, 3, 8, 5], 11);
        let batch = NdArray::concat(&[&one, &one, &one], 0).unwrap();
        let five = batch.reshape(&[3, 3, 8, 5, 1]).unwrap();
        let s = model.predict(&five).unwrap();
        assert_eq!(s.len(), 3);
        assert!(s.iter().all(|v| v.to_bits() == s[0].to_bits()));
        assert_eq!(model.predict(&five).unwrap(), s);
    }

    #[test]
    fn huber_examples() {
        assert_eq!(huber_loss(&[1.0, 2.0], &[1.0, 2.0], 0.1).unwrap(), 0.0);
        assert!((huber_loss(&[0.0], &[0.05], 0.1).unwrap() - 0.00125).abs() < 1e-15);
        assert!((huber_loss(&[0.0], &[0.2], 0.1).unwrap() - 0.015).abs() < 1e-15);
    }

    #[test]
    fn canonical_feature_map_shape() {
        // canonical schedule at reduced V keeps the test fast; the full
        // 25-joint, 288-frame check lives in the acceptance suite
        let layout = JointLayout::build(LayoutVariant::Basic25).unwrap();
        let mut cfg = ModelConfig::canonical(3);
        cfg.expected_frames = None;
        let mut model = RastGModel::new(cfg, layout).unwrap();
        let (scores, fm) = model.predict_with_features(&NdArray::zeros(&[1, 3, 16, 25])).unwrap();
        assert_eq!(scores.len(), 1);
        assert_eq!(fm.shape(), &[1, 256, 4, 25]);
    }
}
