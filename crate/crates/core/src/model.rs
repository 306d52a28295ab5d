//! A small LLaMA-style decoder: RMSNorm, rotary attention with grouped KV
//! heads, SwiGLU feed-forward, tied output head.
//!
//! Linear weights follow the crate convention `y = x·W` with `W` of shape
//! `fan_in × fan_out`.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::binfact::BinaryFactorMatrix;
use crate::error::{Error, Result};
use crate::preprocess::InputTransform;
use crate::quant::QuantizedMatrix;
use crate::rng;
use crate::tensor::Matrix;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ToyConfig {
    pub n_layers: usize,
    pub d_model: usize,
    pub n_heads: usize,
    pub n_kv_heads: usize,
    pub d_ff: usize,
    pub vocab: usize,
    pub max_seq: usize,
    pub rope_base: f64,
    pub rms_eps: f64,
}

impl Default for ToyConfig {
    fn default() -> Self {
        Self {
            n_layers: 2,
            d_model: 32,
            n_heads: 4,
            n_kv_heads: 2,
            d_ff: 64,
            vocab: 256,
            max_seq: 128,
            rope_base: 10_000.0,
            rms_eps: 1e-5,
        }
    }
}

impl ToyConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [self.n_layers, self.d_model, self.n_heads, self.n_kv_heads, self.d_ff, self.vocab, self.max_seq];
        if positive.contains(&0) {
            return Err(Error::Config("model dimensions must all be positive".into()));
        }
        if !self.d_model.is_multiple_of(self.n_heads) {
            return Err(Error::Config(format!(
                "hidden size {} not divisible by {} heads",
                self.d_model, self.n_heads
            )));
        }
        if !self.n_heads.is_multiple_of(self.n_kv_heads) {
            return Err(Error::Config(format!(
                "{} query heads not divisible by {} kv heads",
                self.n_heads, self.n_kv_heads
            )));
        }
        if !self.head_dim().is_multiple_of(2) {
            return Err(Error::Config("rotary embeddings need an even head dimension".into()));
        }
        if !(self.rope_base > 0.0 && self.rms_eps > 0.0) {
            return Err(Error::Config("rope base and rms epsilon must be positive".into()));
        }
        Ok(())
    }

    pub fn head_dim(&self) -> usize {
        self.d_model / self.n_heads
    }

    pub fn kv_dim(&self) -> usize {
        self.n_kv_heads * self.head_dim()
    }

    pub fn group_size(&self) -> usize {
        self.n_heads / self.n_kv_heads
    }

    pub fn layer_shape(&self, role: Role) -> (usize, usize) {
        let (d, f, kv) = (self.d_model, self.d_ff, self.kv_dim());
        match role {
            Role::Q | Role::O => (d, d),
            Role::K | Role::V => (d, kv),
            Role::Gate | Role::Up => (d, f),
            Role::Down => (f, d),
        }
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Q,
    K,
    V,
    O,
    Gate,
    Up,
    Down,
}

impl Role {
    /// Forward execution order inside a block.
    pub const ALL: [Role; 7] = [Role::Q, Role::K, Role::V, Role::O, Role::Gate, Role::Up, Role::Down];

    pub fn name(self) -> &'static str {
        match self {
            Role::Q => "q",
            Role::K => "k",
            Role::V => "v",
            Role::O => "o",
            Role::Gate => "gate",
            Role::Up => "up",
            Role::Down => "down",
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }
}

impl FromStr for Role {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        Role::ALL
            .into_iter()
            .find(|r| r.name() == s)
            .ok_or_else(|| Error::UnknownLayer(s.to_string()))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct LayerId {
    pub block: usize,
    pub role: Role,
}

impl LayerId {
    pub fn new(block: usize, role: Role) -> Self {
        Self { block, role }
    }
}

impl fmt::Display for LayerId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "blocks.{}.{}", self.block, self.role.name())
    }
}

impl FromStr for LayerId {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let unknown = || Error::UnknownLayer(s.to_string());
        let rest = s.strip_prefix("blocks.").ok_or_else(unknown)?;
        let (block, role) = rest.split_once('.').ok_or_else(unknown)?;
        let block = block.parse().map_err(|_| unknown())?;
        let role = role.parse().map_err(|_| unknown())?;
        Ok(Self { block, role })
    }
}

impl Serialize for LayerId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> std::result::Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for LayerId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> std::result::Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerInfo {
    pub id: LayerId,
    pub role: Role,
    pub block: usize,
    pub shape: (usize, usize),
}

impl LayerInfo {
    pub fn params(&self) -> usize {
        self.shape.0 * self.shape.1
    }
}

/// Quantizable linear modules in forward execution order.
#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct LayerGraph {
    pub layers: Vec<LayerInfo>,
}

impl LayerGraph {
    pub fn from_config(cfg: &ToyConfig) -> Self {
        let layers = (0..cfg.n_layers)
            .flat_map(|b| {
                Role::ALL.into_iter().map(move |role| LayerInfo {
                    id: LayerId::new(b, role),
                    role,
                    block: b,
                    shape: cfg.layer_shape(role),
                })
            })
            .collect();
        Self { layers }
    }

    pub fn len(&self) -> usize {
        self.layers.len()
    }

    pub fn is_empty(&self) -> bool {
        self.layers.is_empty()
    }

    pub fn total_params(&self) -> usize {
        self.layers.iter().map(LayerInfo::params).sum()
    }

    pub fn get(&self, id: &LayerId) -> Option<&LayerInfo> {
        self.layers.iter().find(|l| l.id == *id)
    }
}

/// Stored form of a linear weight.
#[derive(Clone, Debug, PartialEq)]
pub enum WeightRepr {
    Full(Matrix),
    Uniform(QuantizedMatrix),
    Binary(BinaryFactorMatrix),
}

impl WeightRepr {
    pub fn dense(&self) -> Matrix {
        match self {
            WeightRepr::Full(m) => m.clone(),
            WeightRepr::Uniform(q) => q.dequantize(),
            WeightRepr::Binary(f) => f.dequantize(),
        }
    }

    pub fn shape(&self) -> (usize, usize) {
        match self {
            WeightRepr::Full(m) => m.shape(),
            WeightRepr::Uniform(q) => q.shape(),
            WeightRepr::Binary(f) => f.shape(),
        }
    }

    pub fn is_full(&self) -> bool {
        matches!(self, WeightRepr::Full(_))
    }
}

/// Rank-`r` additive correction `B·A` with `B: N×r`, `A: r×M`.
#[derive(Clone, Debug, PartialEq)]
pub struct LowRank {
    pub b: Matrix,
    pub a: Matrix,
}

impl LowRank {
    pub fn rank(&self) -> usize {
        self.a.rows()
    }

    pub fn product(&self) -> Matrix {
        self.b.matmul(&self.a).expect("adapter factors are shape-checked")
    }
}

/// A linear module: base representation, optional input-side transform and
/// low-rank adapter, plus the cached dense weight the forward pass uses.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear {
    repr: WeightRepr,
    transform: InputTransform,
    adapter: Option<LowRank>,
    effective: Matrix,
}

impl Linear {
    pub fn full(w: Matrix) -> Self {
        Self { effective: w.clone(), repr: WeightRepr::Full(w), transform: InputTransform::identity(), adapter: None }
    }

    pub fn new(repr: WeightRepr, transform: InputTransform, adapter: Option<LowRank>) -> Result<Self> {
        let (n, m) = repr.shape();
        let base = repr.dense();
        let mut effective = transform.effective(&base)?;
        if effective.shape() != (n, m) {
            return Err(Error::shape("transform changed the weight shape"));
        }
        if let Some(lr) = &adapter {
            if lr.b.rows() != n || lr.a.cols() != m || lr.b.cols() != lr.a.rows() {
                return Err(Error::shape(format!(
                    "adapter {:?}·{:?} does not fit a {n}x{m} weight",
                    lr.b.shape(),
                    lr.a.shape()
                )));
            }
            effective = effective.add(&lr.product())?;
        }
        if !effective.is_finite() {
            return Err(Error::numerical("linear weight became non-finite"));
        }
        Ok(Self { repr, transform, adapter, effective })
    }

    pub fn repr(&self) -> &WeightRepr {
        &self.repr
    }

    pub fn transform(&self) -> &InputTransform {
        &self.transform
    }

    pub fn adapter(&self) -> Option<&LowRank> {
        self.adapter.as_ref()
    }

    /// The dense weight applied in the forward pass.
    pub fn weight(&self) -> &Matrix {
        &self.effective
    }

    pub fn shape(&self) -> (usize, usize) {
        self.effective.shape()
    }

    pub fn with_repr(&self, repr: WeightRepr) -> Result<Self> {
        Self::new(repr, self.transform.clone(), self.adapter.clone())
    }

    pub fn with_adapter(&self, adapter: Option<LowRank>) -> Result<Self> {
        Self::new(self.repr.clone(), self.transform.clone(), adapter)
    }

    pub fn is_quantized(&self) -> bool {
        !self.repr.is_full()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Block {
    pub attn_norm: Vec<f32>,
    pub ffn_norm: Vec<f32>,
    linears: Vec<Linear>,
}

impl Block {
    pub fn linear(&self, role: Role) -> &Linear {
        &self.linears[role.index()]
    }

    pub fn weight(&self, role: Role) -> &Matrix {
        self.linears[role.index()].weight()
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ToyModel {
    config: ToyConfig,
    pub embedding: Matrix,
    pub final_norm: Vec<f32>,
    blocks: Vec<Block>,
}

/// Activations recorded inside one block.
#[derive(Clone, Debug, PartialEq)]
pub struct BlockTaps {
    /// Residual stream entering the block.
    pub input: Matrix,
    /// Normed input shared by q, k and v.
    pub attn_in: Matrix,
    /// Concatenated head outputs, the input of o.
    pub o_in: Matrix,
    /// Residual stream after the attention sublayer.
    pub mid: Matrix,
    /// Normed input shared by gate and up.
    pub ffn_in: Matrix,
    /// `silu(gate) ⊙ up`, the input of down.
    pub down_in: Matrix,
    /// Residual stream leaving the block.
    pub output: Matrix,
    /// Causal attention probabilities per query head (`T×T`, zero above the diagonal).
    pub probs: Vec<Matrix>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Taps {
    pub logits: Matrix,
    pub blocks: Vec<BlockTaps>,
}

impl Taps {
    pub fn hidden(&self) -> Vec<&Matrix> {
        self.blocks.iter().map(|b| &b.output).collect()
    }

    pub fn layer_input(&self, id: &LayerId) -> &Matrix {
        let b = &self.blocks[id.block];
        match id.role {
            Role::Q | Role::K | Role::V => &b.attn_in,
            Role::O => &b.o_in,
            Role::Gate | Role::Up => &b.ffn_in,
            Role::Down => &b.down_in,
        }
    }
}

pub fn rmsnorm(x: &[f32], gain: &[f32], eps: f64) -> Vec<f32> {
    let ms = x.iter().map(|&v| (v as f64) * (v as f64)).sum::<f64>() / x.len().max(1) as f64;
    let inv = (1.0 / (ms + eps).sqrt()) as f32;
    x.iter().zip(gain).map(|(&v, &g)| v * inv * g).collect()
}

pub fn rmsnorm_rows(x: &Matrix, gain: &[f32], eps: f64) -> Matrix {
    let mut out = Matrix::zeros(x.rows(), x.cols());
    for t in 0..x.rows() {
        out.row_mut(t).copy_from_slice(&rmsnorm(x.row(t), gain, eps));
    }
    out
}

#[inline]
pub fn sigmoid(x: f32) -> f32 {
    1.0 / (1.0 + (-x).exp())
}

#[inline]
pub fn silu(x: f32) -> f32 {
    x * sigmoid(x)
}

/// Rotation angle of pair `i` at position `pos`.
pub fn rope_angle(pos: usize, pair: usize, head_dim: usize, base: f64) -> f64 {
    pos as f64 * base.powf(-2.0 * pair as f64 / head_dim as f64)
}

/// Rotates interleaved pairs `(2i, 2i+1)` of one head vector at `pos`.
/// `inverse` applies the transpose rotation.
pub fn rope_vec(x: &mut [f32], pos: usize, base: f64, inverse: bool) {
    let dk = x.len();
    for i in 0..dk / 2 {
        let theta = rope_angle(pos, i, dk, base);
        let (s, c) = theta.sin_cos();
        let s = if inverse { -s } else { s };
        let (a, b) = (x[2 * i] as f64, x[2 * i + 1] as f64);
        x[2 * i] = (a * c - b * s) as f32;
        x[2 * i + 1] = (a * s + b * c) as f32;
    }
}

/// Applies rotary embeddings in place to every head of a `T × heads·dk` matrix.
pub fn rope(x: &mut Matrix, heads: usize, base: f64) -> Result<()> {
    if heads == 0 || !x.cols().is_multiple_of(heads) || !(x.cols() / heads).is_multiple_of(2) {
        return Err(Error::shape(format!("cannot split {} columns into {heads} even heads", x.cols())));
    }
    let dk = x.cols() / heads;
    for t in 0..x.rows() {
        let row = x.row_mut(t);
        for h in 0..heads {
            rope_vec(&mut row[h * dk..(h + 1) * dk], t, base, false);
        }
    }
    Ok(())
}

/// Causal softmax of `q_h k_hᵀ/√dk` for one head; columns `[off, off+dk)` of
/// `q` and `[koff, koff+dk)` of `k`.
pub fn causal_probs(q: &Matrix, off: usize, k: &Matrix, koff: usize, dk: usize) -> Matrix {
    let t_len = q.rows();
    let scale = 1.0 / (dk as f32).sqrt();
    let mut p = Matrix::zeros(t_len, t_len);
    for t in 0..t_len {
        let qt = &q.row(t)[off..off + dk];
        let row = p.row_mut(t);
        let mut max = f32::NEG_INFINITY;
        for s in 0..=t {
            let ks = &k.row(s)[koff..koff + dk];
            let v = qt.iter().zip(ks).map(|(a, b)| a * b).sum::<f32>() * scale;
            row[s] = v;
            max = max.max(v);
        }
        let mut sum = 0.0f32;
        for v in &mut row[..=t] {
            *v = (*v - max).exp();
            sum += *v;
        }
        for v in &mut row[..=t] {
            *v /= sum;
        }
    }
    p
}

impl ToyModel {
    /// Seeded Gaussian weights with standard deviation `1/√fan_in`.
    pub fn random(config: ToyConfig, seed: u64) -> Result<Self> {
        config.validate()?;
        let mut r = rng::seeded(seed);
        let (d, v) = (config.d_model, config.vocab);
        let embedding = Matrix::from_vec(v, d, rng::gaussian_vec(&mut r, v * d, 1.0))?;
        let mut blocks = Vec::with_capacity(config.n_layers);
        for _ in 0..config.n_layers {
            let linears = Role::ALL
                .into_iter()
                .map(|role| {
                    let (n, m) = config.layer_shape(role);
                    let w = rng::gaussian_vec(&mut r, n * m, 1.0 / (n as f64).sqrt());
                    Matrix::from_vec(n, m, w).map(Linear::full)
                })
                .collect::<Result<Vec<_>>>()?;
            blocks.push(Block { attn_norm: vec![1.0; d], ffn_norm: vec![1.0; d], linears });
        }
        Ok(Self { config, embedding, final_norm: vec![1.0; d], blocks })
    }

    /// Assembles a model from explicit parts, validating every shape.
    pub fn from_parts(
        config: ToyConfig,
        embedding: Matrix,
        final_norm: Vec<f32>,
        blocks: Vec<(Vec<f32>, Vec<f32>, Vec<Linear>)>,
    ) -> Result<Self> {
        config.validate()?;
        let d = config.d_model;
        if embedding.shape() != (config.vocab, d) {
            return Err(Error::shape(format!("embedding is {:?}, expected ({}, {d})", embedding.shape(), config.vocab)));
        }
        if final_norm.len() != d || blocks.len() != config.n_layers {
            return Err(Error::shape("final norm or block count does not match the config"));
        }
        let mut out = Vec::with_capacity(blocks.len());
        for (b, (attn_norm, ffn_norm, linears)) in blocks.into_iter().enumerate() {
            if attn_norm.len() != d || ffn_norm.len() != d || linears.len() != 7 {
                return Err(Error::shape(format!("block {b} has malformed norms or linears")));
            }
            for (role, lin) in Role::ALL.iter().zip(&linears) {
                if lin.shape() != config.layer_shape(*role) {
                    return Err(Error::shape(format!(
                        "{} is {:?}, expected {:?}",
                        LayerId::new(b, *role),
                        lin.shape(),
                        config.layer_shape(*role)
                    )));
                }
            }
            out.push(Block { attn_norm, ffn_norm, linears });
        }
        Ok(Self { config, embedding, final_norm, blocks: out })
    }

    pub fn config(&self) -> &ToyConfig {
        &self.config
    }

    pub fn blocks(&self) -> &[Block] {
        &self.blocks
    }

    pub fn block_mut(&mut self, b: usize) -> &mut Block {
        &mut self.blocks[b]
    }

    pub fn layer_graph(&self) -> LayerGraph {
        LayerGraph::from_config(&self.config)
    }

    pub fn check_layer(&self, id: &LayerId) -> Result<()> {
        if id.block >= self.config.n_layers {
            return Err(Error::UnknownLayer(id.to_string()));
        }
        Ok(())
    }

    pub fn linear(&self, id: &LayerId) -> Result<&Linear> {
        self.check_layer(id)?;
        Ok(self.blocks[id.block].linear(id.role))
    }

    pub fn set_linear(&mut self, id: &LayerId, lin: Linear) -> Result<()> {
        self.check_layer(id)?;
        let expected = self.config.layer_shape(id.role);
        if lin.shape() != expected {
            return Err(Error::shape(format!("{id} expects {expected:?}, got {:?}", lin.shape())));
        }
        self.blocks[id.block].linears[id.role.index()] = lin;
        Ok(())
    }

    /// Total parameter count, including embedding and norm gains.
    pub fn num_params(&self) -> usize {
        let c = &self.config;
        c.vocab * c.d_model + c.d_model + c.n_layers * 2 * c.d_model + self.layer_graph().total_params()
    }

    fn check_tokens(&self, tokens: &[u32]) -> Result<()> {
        if tokens.is_empty() {
            return Err(Error::invalid("empty token sequence"));
        }
        if tokens.len() > self.config.max_seq {
            return Err(Error::invalid(format!(
                "sequence of {} tokens exceeds the maximum of {}",
                tokens.len(),
                self.config.max_seq
            )));
        }
        if let Some(t) = tokens.iter().find(|&&t| t as usize >= self.config.vocab) {
            return Err(Error::invalid(format!("token id {t} outside vocabulary of {}", self.config.vocab)));
        }
        Ok(())
    }

    pub fn embed(&self, tokens: &[u32]) -> Result<Matrix> {
        self.check_tokens(tokens)?;
        let d = self.config.d_model;
        let mut h = Matrix::zeros(tokens.len(), d);
        for (t, &tok) in tokens.iter().enumerate() {
            h.row_mut(t).copy_from_slice(self.embedding.row(tok as usize));
        }
        Ok(h)
    }

    pub fn forward(&self, tokens: &[u32]) -> Result<Matrix> {
        Ok(self.forward_with_taps(tokens)?.logits)
    }

    pub fn forward_with_taps(&self, tokens: &[u32]) -> Result<Taps> {
        let mut h = self.embed(tokens)?;
        let mut blocks = Vec::with_capacity(self.blocks.len());
        for block in &self.blocks {
            let taps = self.block_forward(block, &h)?;
            h = taps.output.clone();
            blocks.push(taps);
        }
        let logits = self.head(&h)?;
        Ok(Taps { logits, blocks })
    }

    pub fn head(&self, h: &Matrix) -> Result<Matrix> {
        let normed = rmsnorm_rows(h, &self.final_norm, self.config.rms_eps);
        let mut logits = Matrix::zeros(h.rows(), self.config.vocab);
        for t in 0..h.rows() {
            let x = normed.row(t);
            let out = logits.row_mut(t);
            for (v, o) in out.iter_mut().enumerate() {
                *o = x.iter().zip(self.embedding.row(v)).map(|(a, b)| a * b).sum();
            }
        }
        Ok(logits)
    }

    /// Attention sublayer on already-normed input: returns the concatenated
    /// head outputs and the per-head probabilities.
    pub fn attention(&self, x: &Matrix, wq: &Matrix, wk: &Matrix, wv: &Matrix) -> Result<(Matrix, Vec<Matrix>)> {
        let c = &self.config;
        let dk = c.head_dim();
        let mut q = x.matmul(wq)?;
        let mut k = x.matmul(wk)?;
        let v = x.matmul(wv)?;
        rope(&mut q, c.n_heads, c.rope_base)?;
        rope(&mut k, c.n_kv_heads, c.rope_base)?;
        let t_len = x.rows();
        let mut o_in = Matrix::zeros(t_len, c.d_model);
        let mut probs = Vec::with_capacity(c.n_heads);
        for h in 0..c.n_heads {
            let g = h / c.group_size();
            let p = causal_probs(&q, h * dk, &k, g * dk, dk);
            for t in 0..t_len {
                let prow = p.row(t);
                let orow = &mut o_in.row_mut(t)[h * dk..(h + 1) * dk];
                for (s, &w) in prow[..=t].iter().enumerate() {
                    let vs = &v.row(s)[g * dk..(g + 1) * dk];
                    for (o, &vv) in orow.iter_mut().zip(vs) {
                        *o += w * vv;
                    }
                }
            }
            probs.push(p);
        }
        Ok((o_in, probs))
    }

    /// `silu(x·W_gate) ⊙ (x·W_up)`.
    pub fn ffn_hidden(x: &Matrix, wg: &Matrix, wu: &Matrix) -> Result<Matrix> {
        let g = x.matmul(wg)?;
        let u = x.matmul(wu)?;
        g.map(silu).hadamard(&u)
    }

    pub fn block_forward(&self, block: &Block, h: &Matrix) -> Result<BlockTaps> {
        let eps = self.config.rms_eps;
        let attn_in = rmsnorm_rows(h, &block.attn_norm, eps);
        let (o_in, probs) = self.attention(&attn_in, block.weight(Role::Q), block.weight(Role::K), block.weight(Role::V))?;
        let mid = h.add(&o_in.matmul(block.weight(Role::O))?)?;
        let ffn_in = rmsnorm_rows(&mid, &block.ffn_norm, eps);
        let down_in = Self::ffn_hidden(&ffn_in, block.weight(Role::Gate), block.weight(Role::Up))?;
        let output = mid.add(&down_in.matmul(block.weight(Role::Down))?)?;
        Ok(BlockTaps { input: h.clone(), attn_in, o_in, mid, ffn_in, down_in, output, probs })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::quant::{quantize_matrix, Granularity, QuantConfig, ScaleMode};

    fn model(seed: u64) -> ToyModel {
        ToyModel::random(ToyConfig::default(), seed).unwrap()
    }

    fn tokens(n: usize) -> Vec<u32> {
        (0..n as u32).map(|t| (t * 37 + 11) % 256).collect()
    }

    #[test]
    fn layer_ids_round_trip() {
        let id = LayerId::new(3, Role::Gate);
        assert_eq!(id.to_string(), "blocks.3.gate");
        assert_eq!("blocks.3.gate".parse::<LayerId>().unwrap(), id);
        assert!("blocks.x.q".parse::<LayerId>().is_err());
        assert!("blocks.0.w".parse::<LayerId>().is_err());
    }

    #[test]
    fn graph_has_seven_layers_per_block() {
        let g = model(0).layer_graph();
        assert_eq!(g.len(), 14);
        assert_eq!(g.layers[3].id, LayerId::new(0, Role::O));
        assert_eq!(g.layers[13].shape, (64, 32));
    }

    #[test]
    fn causal_prefix_is_untouched() {
        let m = model(1);
        let a = tokens(12);
        let mut b = a.clone();
        b[7] = (b[7] + 5) % 256;
        let la = m.forward(&a).unwrap();
        let lb = m.forward(&b).unwrap();
        for t in 0..7 {
            assert_eq!(la.row(t), lb.row(t));
        }
        assert_ne!(la.row(7), lb.row(7));
    }

    #[test]
    fn zero_projections_pass_residual_through() {
        let mut m = model(2);
        for b in 0..2 {
            for role in Role::ALL {
                let (n, k) = m.config().layer_shape(role);
                m.set_linear(&LayerId::new(b, role), Linear::full(Matrix::zeros(n, k))).unwrap();
            }
        }
        let toks = tokens(5);
        let logits = m.forward(&toks).unwrap();
        let direct = m.head(&m.embed(&toks).unwrap()).unwrap();
        assert_eq!(logits, direct);
    }

    #[test]
    fn single_position_attention_returns_value_row() {
        let cfg = ToyConfig { n_heads: 1, n_kv_heads: 1, ..ToyConfig::default() };
        let m = ToyModel::random(cfg, 3).unwrap();
        let x = rmsnorm_rows(&m.embed(&[9]).unwrap(), &m.blocks()[0].attn_norm, 1e-5);
        let b = &m.blocks()[0];
        let (o, p) = m.attention(&x, b.weight(Role::Q), b.weight(Role::K), b.weight(Role::V)).unwrap();
        assert_eq!(p[0].get(0, 0), 1.0);
        assert_eq!(o, x.matmul(b.weight(Role::V)).unwrap());
    }

    #[test]
    fn primitive_edge_cases() {
        assert_eq!(rmsnorm(&[0.0; 4], &[1.0; 4], 1e-5), vec![0.0; 4]);
        let mut v = vec![0.3, -1.2, 2.0, 0.5];
        let orig = v.clone();
        rope_vec(&mut v, 0, 1e4, false);
        assert_eq!(v, orig);
        rope_vec(&mut v, 5, 1e4, false);
        rope_vec(&mut v, 5, 1e4, true);
        for (a, b) in v.iter().zip(&orig) {
            assert!((a - b).abs() < 1e-6);
        }
        assert_eq!(silu(0.0), 0.0);
        assert!((silu(30.0) - 30.0).abs() < 1e-6);
    }

    #[test]
    fn block_zero_taps_match_external_recomputation() {
        let m = model(4);
        let toks = tokens(6);
        let taps = m.forward_with_taps(&toks).unwrap();
        assert_eq!(taps.blocks.len(), 2);
        let d = 32;
        for (t, &tok) in toks.iter().enumerate() {
            let e = m.embedding.row(tok as usize);
            let rms = (e.iter().map(|v| (*v as f64).powi(2)).sum::<f64>() / d as f64 + 1e-5).sqrt();
            for j in 0..d {
                let expect = e[j] as f64 / rms;
                assert!((taps.blocks[0].attn_in.get(t, j) as f64 - expect).abs() < 1e-5);
            }
        }
    }

    #[test]
    fn o_input_is_concatenated_heads() {
        let m = model(5);
        let toks = tokens(5);
        let taps = m.forward_with_taps(&toks).unwrap();
        let bt = &taps.blocks[0];
        let b = &m.blocks()[0];
        let dk = 8;
        let v = bt.attn_in.matmul(b.weight(Role::V)).unwrap();
        for h in 0..4 {
            let g = h / 2;
            for t in 0..5 {
                for c in 0..dk {
                    let mut acc = 0.0f64;
                    for s in 0..=t {
                        acc += bt.probs[h].get(t, s) as f64 * v.get(s, g * dk + c) as f64;
                    }
                    assert!((acc - bt.o_in.get(t, h * dk + c) as f64).abs() < 1e-5);
                }
            }
        }
    }

    #[test]
    fn equal_kv_heads_reproduce_plain_multi_head() {
        let cfg = ToyConfig { n_kv_heads: 4, ..ToyConfig::default() };
        let m = ToyModel::random(cfg.clone(), 6).unwrap();
        let toks = tokens(7);
        let taps = m.forward_with_taps(&toks).unwrap();
        let bt = &taps.blocks[0];
        let b = &m.blocks()[0];
        let dk = cfg.head_dim();
        let mut q = bt.attn_in.matmul(b.weight(Role::Q)).unwrap();
        let mut k = bt.attn_in.matmul(b.weight(Role::K)).unwrap();
        let v = bt.attn_in.matmul(b.weight(Role::V)).unwrap();
        rope(&mut q, 4, cfg.rope_base).unwrap();
        rope(&mut k, 4, cfg.rope_base).unwrap();
        let mut o = Matrix::zeros(7, 32);
        for h in 0..4 {
            let p = causal_probs(&q, h * dk, &k, h * dk, dk);
            for t in 0..7 {
                for c in 0..dk {
                    let mut acc = 0.0f32;
                    for s in 0..=t {
                        acc += p.get(t, s) * v.get(s, h * dk + c);
                    }
                    o.set(t, h * dk + c, acc);
                }
            }
        }
        assert_eq!(o, bt.o_in);
    }

    #[test]
    fn logit_drift_shrinks_with_bits() {
        let base = model(7);
        let toks = tokens(16);
        let reference = base.forward(&toks).unwrap();
        let mut drifts = Vec::new();
        for bits in [2u8, 4, 8] {
            let mut m = base.clone();
            let cfg = QuantConfig::symmetric(bits, Granularity::PerChannel).unwrap();
            for info in base.layer_graph().layers {
                let w = base.linear(&info.id).unwrap().weight().clone();
                let q = quantize_matrix(&w, &cfg, ScaleMode::Minmax).unwrap();
                let lin = base.linear(&info.id).unwrap().with_repr(WeightRepr::Uniform(q)).unwrap();
                m.set_linear(&info.id, lin).unwrap();
            }
            drifts.push(m.forward(&toks).unwrap().sub(&reference).unwrap().frobenius());
        }
        assert!(drifts[0] > drifts[1] && drifts[1] > drifts[2], "{drifts:?}");
    }

    #[test]
    fn forward_rejects_bad_input() {
        let m = model(8);
        assert!(m.forward(&[300]).is_err());
        assert!(m.forward(&vec![1; 129]).is_err());
        assert!(m.forward(&[]).is_err());
    }
}
