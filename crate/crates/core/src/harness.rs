//! Minimal rotary-attention transformer used to run pruning at an
//! intermediate layer and to measure what pruning does to attention.
//!
//! Each layer is multi-head scaled dot-product attention with a residual
//! connection and nothing else: no MLP, no normalization, no causal mask.
//! Queries and keys are rotated either by a scalar position (1-D RoPE) or by
//! a (temporal, height, width) triple applied to separate frequency sections
//! of every head (M-RoPE). History tokens are pruned after layer `k`; kept
//! tokens carry their original positions into layers `k+1..L` unless the
//! contiguous remap is requested.

use std::fmt::Write as _;

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::BudgetSchedule;
use crate::prune::{
    self, AttentionContext, Pool, PositionIndex, PruneError, PruneResult, Strategy, TokenLabel,
    TokenMeta, TokenTable,
};

pub const DEFAULT_ROPE_BASE: f64 = 10_000.0;
pub const DEFAULT_PRUNE_LAYER: usize = 3;

#[derive(Debug, Error, PartialEq)]
pub enum HarnessError {
    #[error("invalid harness config: {0}")]
    Config(String),
    #[error("invalid tokens: {0}")]
    Tokens(String),
    #[error("invalid probe region: {0}")]
    InvalidRegion(String),
    #[error(transparent)]
    Prune(#[from] PruneError),
}

/// Rotary layout. M-RoPE sections are dimension counts per head.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "mode", rename_all = "snake_case")]
pub enum RopeMode {
    Rope1d,
    Mrope {
        temporal: usize,
        height: usize,
        width: usize,
    },
}

impl RopeMode {
    /// M-RoPE sections splitting a head's rotary pairs 2:3:3 across
    /// (temporal, height, width), the rest going to width.
    pub fn mrope_for(head_dim: usize) -> RopeMode {
        let pairs = head_dim / 2;
        let temporal = pairs / 4;
        let height = (pairs * 3) / 8;
        RopeMode::Mrope {
            temporal: 2 * temporal,
            height: 2 * height,
            width: 2 * (pairs - temporal - height),
        }
    }
}

/// What happens to the positions of surviving tokens after pruning.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PositionMode {
    /// Kept tokens keep their original indices.
    #[default]
    Preserve,
    /// Indices are re-packed to dense ranks over the survivors.
    Contiguous,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Position {
    Linear(u32),
    Multi(PositionIndex),
}

impl Position {
    pub fn shifted(self, by: u32) -> Position {
        match self {
            Position::Linear(p) => Position::Linear(p + by),
            Position::Multi(p) => Position::Multi(PositionIndex {
                temporal: p.temporal + by,
                height: p.height + by,
                width: p.width + by,
            }),
        }
    }

    fn as_index(self) -> PositionIndex {
        match self {
            Position::Linear(p) => PositionIndex {
                temporal: p,
                height: p,
                width: p,
            },
            Position::Multi(p) => p,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct HarnessConfig {
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    /// Pruning happens after this layer (1-based).
    pub prune_layer: usize,
    pub rope: RopeMode,
    pub rope_base: f64,
    pub positions: PositionMode,
    pub seed: u64,
}

impl Default for HarnessConfig {
    fn default() -> Self {
        Self {
            layers: 4,
            embed_dim: 64,
            heads: 4,
            prune_layer: DEFAULT_PRUNE_LAYER,
            rope: RopeMode::Mrope {
                temporal: 4,
                height: 6,
                width: 6,
            },
            rope_base: DEFAULT_ROPE_BASE,
            positions: PositionMode::Preserve,
            seed: 0,
        }
    }
}

impl HarnessConfig {
    pub fn head_dim(&self) -> usize {
        self.embed_dim / self.heads.max(1)
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        if self.heads == 0 || self.embed_dim == 0 || !self.embed_dim.is_multiple_of(2 * self.heads) {
            return Err(HarnessError::Config(format!(
                "embed_dim {} must be a positive multiple of 2*heads ({})",
                self.embed_dim, self.heads
            )));
        }
        if self.prune_layer < 1 || self.prune_layer >= self.layers {
            return Err(HarnessError::Config(format!(
                "prune layer {} must satisfy 1 <= k < L = {}",
                self.prune_layer, self.layers
            )));
        }
        if self.rope_base.is_nan() || self.rope_base <= 1.0 {
            return Err(HarnessError::Config("rope base must be > 1".into()));
        }
        check_rope(&self.rope, self.head_dim())
    }
}

fn check_rope(mode: &RopeMode, head_dim: usize) -> Result<(), HarnessError> {
    if !head_dim.is_multiple_of(2) {
        return Err(HarnessError::Config(format!("head dim {head_dim} is odd")));
    }
    if let RopeMode::Mrope {
        temporal,
        height,
        width,
    } = *mode
    {
        if temporal % 2 != 0 || height % 2 != 0 || width % 2 != 0 {
            return Err(HarnessError::Config(format!(
                "M-RoPE sections ({temporal}, {height}, {width}) must be even"
            )));
        }
        if temporal + height + width != head_dim {
            return Err(HarnessError::Config(format!(
                "M-RoPE sections ({temporal}, {height}, {width}) must sum to head dim {head_dim}"
            )));
        }
    }
    Ok(())
}

/// Rotates consecutive pairs `(2i, 2i+1)` of `v` by `pos * base^(-2i/d)`.
/// Under M-RoPE pair `i` takes its position component from the section it
/// falls in (temporal first, then height, then width).
pub fn rope_rotate(v: &[f64], position: Position, mode: &RopeMode, base: f64) -> Result<Vec<f64>, HarnessError> {
    let d = v.len();
    check_rope(mode, d)?;
    let component = |pair: usize| -> Result<f64, HarnessError> {
        match (*mode, position) {
            (RopeMode::Rope1d, Position::Linear(p)) => Ok(p as f64),
            (RopeMode::Mrope { temporal, height, .. }, Position::Multi(p)) => {
                let dim = 2 * pair;
                Ok(if dim < temporal {
                    p.temporal
                } else if dim < temporal + height {
                    p.height
                } else {
                    p.width
                } as f64)
            }
            _ => Err(HarnessError::Config(format!(
                "position {position:?} does not match rope mode {mode:?}"
            ))),
        }
    };
    let mut out = vec![0.0; d];
    for i in 0..d / 2 {
        let theta = base.powf(-2.0 * i as f64 / d as f64);
        let angle = component(i)? * theta;
        let (s, c) = angle.sin_cos();
        let (x, y) = (v[2 * i], v[2 * i + 1]);
        out[2 * i] = x * c - y * s;
        out[2 * i + 1] = x * s + y * c;
    }
    Ok(out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "role", rename_all = "snake_case")]
pub enum TokenRole {
    Text,
    Current { row: u32, col: u32 },
    History { frame: u32, row: u32, col: u32 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenInfo {
    pub role: TokenRole,
    pub position: Position,
    pub label: TokenLabel,
}

/// Hidden states plus fixed per-token metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTensor {
    dim: usize,
    hidden: Vec<f64>,
    info: Vec<TokenInfo>,
}

impl TokenTensor {
    pub fn new(dim: usize, hidden: Vec<f64>, info: Vec<TokenInfo>) -> Result<Self, HarnessError> {
        if dim == 0 || hidden.len() != dim * info.len() {
            return Err(HarnessError::Tokens(format!(
                "{} hidden values for {} tokens of dim {dim}",
                hidden.len(),
                info.len()
            )));
        }
        if hidden.iter().any(|v| !v.is_finite()) {
            return Err(HarnessError::Tokens("non-finite hidden state".into()));
        }
        if let Some(i) = info
            .iter()
            .position(|t| matches!(t.role, TokenRole::History { frame: 0, .. }))
        {
            return Err(HarnessError::Tokens(format!("history token {i} has frame distance 0")));
        }
        Ok(Self { dim, hidden, info })
    }

    pub fn len(&self) -> usize {
        self.info.len()
    }

    pub fn is_empty(&self) -> bool {
        self.info.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn hidden(&self) -> &[f64] {
        &self.hidden
    }

    pub fn info(&self) -> &[TokenInfo] {
        &self.info
    }

    pub fn row(&self, i: usize) -> &[f64] {
        &self.hidden[i * self.dim..(i + 1) * self.dim]
    }

    /// Copy with every position shifted by `by` on all axes.
    pub fn shifted(&self, by: u32) -> TokenTensor {
        let mut out = self.clone();
        out.info
            .iter_mut()
            .for_each(|t| t.position = t.position.shifted(by));
        out
    }
}

/// Segments of a multimodal sequence for position assignment.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Segment {
    /// Visual frame laid out as a `rows`×`cols` grid.
    Image { rows: u32, cols: u32 },
    Text { len: u32 },
}

/// Multi-axis positions in sequence order: an image segment starting at
/// offset `s` gets `(s, s + row, s + col)`, a text token `(p, p, p)`. Each
/// segment starts one past the largest index used so far.
pub fn mrope_positions(segments: &[Segment]) -> Vec<PositionIndex> {
    let mut next = 0u32;
    let mut out = Vec::new();
    for seg in segments {
        match *seg {
            Segment::Image { rows, cols } => {
                for r in 0..rows {
                    for c in 0..cols {
                        out.push(PositionIndex {
                            temporal: next,
                            height: next + r,
                            width: next + c,
                        });
                    }
                }
                next += rows.max(cols);
            }
            Segment::Text { len } => {
                for i in 0..len {
                    out.push(PositionIndex {
                        temporal: next + i,
                        height: next + i,
                        width: next + i,
                    });
                }
                next += len;
            }
        }
    }
    out
}

/// What to prune after the configured layer.
#[derive(Debug, Clone, PartialEq)]
pub struct PruneSpec {
    pub strategy: Strategy,
    pub schedule: BudgetSchedule,
    pub seed: u64,
    pub pool: Pool,
}

impl PruneSpec {
    pub fn new(strategy: Strategy, schedule: BudgetSchedule, seed: u64) -> Self {
        Self {
            strategy,
            schedule,
            seed,
            pool: Pool::PerFrame,
        }
    }
}

/// Attention of one layer over the tokens alive at that layer.
#[derive(Debug, Clone, PartialEq)]
pub struct LayerAttention {
    /// 1-based layer number.
    pub layer: usize,
    pub heads: usize,
    /// Original indices of the tokens present, in order.
    pub token_ids: Vec<usize>,
    /// `heads × n × n` scaled logits.
    pub logits: Vec<f64>,
    /// `heads × n × n` softmax weights.
    pub weights: Vec<f64>,
}

impl LayerAttention {
    pub fn n(&self) -> usize {
        self.token_ids.len()
    }

    fn slot(&self, original: usize) -> Option<usize> {
        self.token_ids.iter().position(|&t| t == original)
    }

    /// Logit between original tokens `q` and `k` in `head`.
    pub fn logit(&self, head: usize, q: usize, k: usize) -> Option<f64> {
        let n = self.n();
        Some(self.logits[head * n * n + self.slot(q)? * n + self.slot(k)?])
    }

    pub fn weight(&self, head: usize, q: usize, k: usize) -> Option<f64> {
        let n = self.n();
        Some(self.weights[head * n * n + self.slot(q)? * n + self.slot(k)?])
    }

    /// Head-averaged weights, `n × n`.
    pub fn mean_weights(&self) -> Vec<f64> {
        let n = self.n();
        let mut out = vec![0.0; n * n];
        for h in 0..self.heads {
            for (o, w) in out.iter_mut().zip(&self.weights[h * n * n..(h + 1) * n * n]) {
                *o += w;
            }
        }
        out.iter_mut().for_each(|v| *v /= self.heads as f64);
        out
    }

    /// `layer,query,key,weight` rows of the head-averaged weights, using
    /// original token indices.
    pub fn to_csv(&self, with_header: bool) -> String {
        let mut s = String::new();
        if with_header {
            s.push_str("layer,query,key,weight\n");
        }
        let n = self.n();
        let w = self.mean_weights();
        for i in 0..n {
            for j in 0..n {
                let _ = writeln!(
                    s,
                    "{},{},{},{}",
                    self.layer, self.token_ids[i], self.token_ids[j], w[i * n + j]
                );
            }
        }
        s
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct PruneOutcome {
    pub result: PruneResult,
    /// Original token index of each row of the pruned table.
    pub history_ids: Vec<usize>,
    pub table: TokenTable,
}

impl PruneOutcome {
    /// Original indices of the kept history tokens.
    pub fn kept_ids(&self) -> Vec<usize> {
        self.result.kept().iter().map(|&i| self.history_ids[i]).collect()
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardOutput {
    pub dim: usize,
    /// Final hidden states of the surviving tokens.
    pub hidden: Vec<f64>,
    pub token_ids: Vec<usize>,
    pub positions: Vec<Position>,
    pub layers: Vec<LayerAttention>,
    pub prune: Option<PruneOutcome>,
    /// Multiply-accumulates performed by projections and attention products.
    pub macs: u64,
}

struct LayerWeights {
    wq: Vec<f64>,
    wk: Vec<f64>,
    wv: Vec<f64>,
    wo: Vec<f64>,
}

/// Seeded attention stack.
pub struct Harness {
    config: HarnessConfig,
    weights: Vec<LayerWeights>,
}

/// Row-major `(n × k) · (k × m)`, counting every multiply-accumulate.
fn matmul(a: &[f64], n: usize, k: usize, b: &[f64], m: usize, macs: &mut u64) -> Vec<f64> {
    let mut out = vec![0.0; n * m];
    for i in 0..n {
        for p in 0..k {
            let av = a[i * k + p];
            let row = &b[p * m..(p + 1) * m];
            let dst = &mut out[i * m..(i + 1) * m];
            for (d, r) in dst.iter_mut().zip(row) {
                *d += av * r;
            }
            *macs += m as u64;
        }
    }
    out
}

fn dot_counted(a: &[f64], b: &[f64], macs: &mut u64) -> f64 {
    *macs += a.len().min(b.len()) as u64;
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

fn softmax_in_place(row: &mut [f64]) {
    let max = row.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut sum = 0.0;
    for v in row.iter_mut() {
        *v = (*v - max).exp();
        sum += *v;
    }
    row.iter_mut().for_each(|v| *v /= sum);
}

impl Harness {
    pub fn new(config: HarnessConfig) -> Result<Self, HarnessError> {
        config.validate()?;
        let d = config.embed_dim;
        let scale = 1.0 / (d as f64).sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
        let mut matrix = || -> Vec<f64> {
            (0..d * d)
                .map(|_| {
                    let z: f64 = StandardNormal.sample(&mut rng);
                    z * scale
                })
                .collect()
        };
        let weights = (0..config.layers)
            .map(|_| LayerWeights {
                wq: matrix(),
                wk: matrix(),
                wv: matrix(),
                wo: matrix(),
            })
            .collect();
        Ok(Self { config, weights })
    }

    pub fn config(&self) -> &HarnessConfig {
        &self.config
    }

    fn check_tokens(&self, tokens: &TokenTensor) -> Result<(), HarnessError> {
        if tokens.dim != self.config.embed_dim {
            return Err(HarnessError::Tokens(format!(
                "token dim {} does not match embed_dim {}",
                tokens.dim, self.config.embed_dim
            )));
        }
        for (i, t) in tokens.info.iter().enumerate() {
            let ok = matches!(
                (self.config.rope, t.position),
                (RopeMode::Rope1d, Position::Linear(_)) | (RopeMode::Mrope { .. }, Position::Multi(_))
            );
            if !ok {
                return Err(HarnessError::Tokens(format!(
                    "token {i} position {:?} does not match rope mode",
                    t.position
                )));
            }
        }
        Ok(())
    }

    /// Rotated per-head queries/keys for `x` (`n × d`) under layer `l`.
    fn rotated(
        &self,
        x: &[f64],
        w: &[f64],
        positions: &[Position],
        macs: &mut u64,
    ) -> Result<Vec<f64>, HarnessError> {
        let d = self.config.embed_dim;
        let dh = self.config.head_dim();
        let n = positions.len();
        let proj = matmul(x, n, d, w, d, macs);
        let mut out = vec![0.0; n * d];
        for (i, &pos) in positions.iter().enumerate() {
            for h in 0..self.config.heads {
                let span = i * d + h * dh..i * d + (h + 1) * dh;
                let r = rope_rotate(&proj[span.clone()], pos, &self.config.rope, self.config.rope_base)?;
                out[span].copy_from_slice(&r);
            }
        }
        Ok(out)
    }

    fn attention_layer(
        &self,
        layer: usize,
        x: &[f64],
        positions: &[Position],
        token_ids: &[usize],
        macs: &mut u64,
    ) -> Result<(Vec<f64>, LayerAttention), HarnessError> {
        let d = self.config.embed_dim;
        let dh = self.config.head_dim();
        let heads = self.config.heads;
        let n = positions.len();
        let w = &self.weights[layer];
        let q = self.rotated(x, &w.wq, positions, macs)?;
        let k = self.rotated(x, &w.wk, positions, macs)?;
        let v = matmul(x, n, d, &w.wv, d, macs);
        let scale = 1.0 / (dh as f64).sqrt();
        let mut logits = vec![0.0; heads * n * n];
        let mut weights = vec![0.0; heads * n * n];
        let mut context = vec![0.0; n * d];
        for h in 0..heads {
            let off = h * dh;
            for i in 0..n {
                let qi = &q[i * d + off..i * d + off + dh];
                let base = h * n * n + i * n;
                for j in 0..n {
                    let kj = &k[j * d + off..j * d + off + dh];
                    logits[base + j] = dot_counted(qi, kj, macs) * scale;
                }
                let row = &mut weights[base..base + n];
                row.copy_from_slice(&logits[base..base + n]);
                softmax_in_place(row);
                let ctx = &mut context[i * d + off..i * d + off + dh];
                for j in 0..n {
                    let a = weights[base + j];
                    for (c, vv) in ctx.iter_mut().zip(&v[j * d + off..j * d + off + dh]) {
                        *c += a * vv;
                    }
                    *macs += dh as u64;
                }
            }
        }
        let out = matmul(&context, n, d, &w.wo, d, macs);
        Ok((
            out,
            LayerAttention {
                layer: layer + 1,
                heads,
                token_ids: token_ids.to_vec(),
                logits,
                weights,
            },
        ))
    }

    /// Runs all layers. With `prune`, history tokens are selected after the
    /// configured layer and the remaining layers run on the reduced set.
    pub fn forward(&self, tokens: &TokenTensor, prune: Option<&PruneSpec>) -> Result<ForwardOutput, HarnessError> {
        self.check_tokens(tokens)?;
        let d = self.config.embed_dim;
        let mut hidden = tokens.hidden.clone();
        let mut ids: Vec<usize> = (0..tokens.len()).collect();
        let mut positions: Vec<Position> = tokens.info.iter().map(|t| t.position).collect();
        let mut layers = Vec::with_capacity(self.config.layers);
        let mut macs = 0u64;
        let mut outcome = None;
        for l in 0..self.config.layers {
            let (delta, attn) = self.attention_layer(l, &hidden, &positions, &ids, &mut macs)?;
            hidden.iter_mut().zip(&delta).for_each(|(h, dlt)| *h += dlt);
            layers.push(attn);
            if l + 1 == self.config.prune_layer {
                if let Some(spec) = prune {
                    let o = self.prune_step(tokens, &hidden, &ids, layers.last().expect("just pushed"), spec)?;
                    let kept: std::collections::HashSet<usize> = o.kept_ids().into_iter().collect();
                    let survivors: Vec<usize> = (0..ids.len())
                        .filter(|&s| {
                            let id = ids[s];
                            !matches!(tokens.info[id].role, TokenRole::History { .. }) || kept.contains(&id)
                        })
                        .collect();
                    hidden = survivors
                        .iter()
                        .flat_map(|&s| hidden[s * d..(s + 1) * d].to_vec())
                        .collect();
                    ids = survivors.iter().map(|&s| ids[s]).collect();
                    positions = survivors.iter().map(|&s| positions[s]).collect();
                    if self.config.positions == PositionMode::Contiguous {
                        positions = remap_contiguous(&positions);
                    }
                    outcome = Some(o);
                }
            }
        }
        Ok(ForwardOutput {
            dim: d,
            hidden,
            token_ids: ids,
            positions,
            layers,
            prune: outcome,
            macs,
        })
    }

    fn prune_step(
        &self,
        tokens: &TokenTensor,
        hidden: &[f64],
        ids: &[usize],
        attn: &LayerAttention,
        spec: &PruneSpec,
    ) -> Result<PruneOutcome, HarnessError> {
        let d = self.config.embed_dim;
        let mut history_slots = Vec::new();
        let mut text_slots = Vec::new();
        for (s, &id) in ids.iter().enumerate() {
            match tokens.info[id].role {
                TokenRole::History { .. } => history_slots.push(s),
                TokenRole::Text => text_slots.push(s),
                TokenRole::Current { .. } => {}
            }
        }
        let mut embeddings = Vec::with_capacity(history_slots.len() * d);
        let mut meta = Vec::with_capacity(history_slots.len());
        for &s in &history_slots {
            let info = tokens.info[ids[s]];
            let TokenRole::History { frame, row, col } = info.role else {
                unreachable!("filtered above")
            };
            embeddings.extend_from_slice(&hidden[s * d..(s + 1) * d]);
            meta.push(TokenMeta {
                frame,
                row,
                col,
                position: info.position.as_index(),
                label: info.label,
            });
        }
        let table = TokenTable::new(d, embeddings, meta)?;
        let context = if spec.strategy.needs_attention() && !text_slots.is_empty() {
            Some(attention_context(attn, &text_slots, &history_slots)?)
        } else {
            None
        };
        let result = prune::apply(&spec.strategy, &table, context.as_ref(), &spec.schedule, spec.seed, spec.pool)?;
        Ok(PruneOutcome {
            result,
            history_ids: history_slots.iter().map(|&s| ids[s]).collect(),
            table,
        })
    }

    /// Max over token pairs and heads of
    /// `|<q'_m, k'_n> - <q'_{m+s}, k'_{n+s}>|` using the first layer's projections.
    pub fn relative_logit_check(&self, tokens: &TokenTensor, shift: u32) -> Result<f64, HarnessError> {
        self.check_tokens(tokens)?;
        let positions: Vec<Position> = tokens.info.iter().map(|t| t.position).collect();
        let moved: Vec<Position> = positions.iter().map(|p| p.shifted(shift)).collect();
        let w = &self.weights[0];
        let mut scratch = 0;
        let q0 = self.rotated(&tokens.hidden, &w.wq, &positions, &mut scratch)?;
        let k0 = self.rotated(&tokens.hidden, &w.wk, &positions, &mut scratch)?;
        let q1 = self.rotated(&tokens.hidden, &w.wq, &moved, &mut scratch)?;
        let k1 = self.rotated(&tokens.hidden, &w.wk, &moved, &mut scratch)?;
        let (d, dh, n) = (self.config.embed_dim, self.config.head_dim(), tokens.len());
        let mut worst: f64 = 0.0;
        for h in 0..self.config.heads {
            let off = h * dh;
            for m in 0..n {
                for j in 0..n {
                    let span = |x: &[f64], i: usize| x[i * d + off..i * d + off + dh].to_vec();
                    let a = dot_counted(&span(&q0, m), &span(&k0, j), &mut scratch);
                    let b = dot_counted(&span(&q1, m), &span(&k1, j), &mut scratch);
                    worst = worst.max((a - b).abs());
                }
            }
        }
        Ok(worst)
    }
}

/// Text rows of the head-averaged attention, renormalized over text keys and
/// over history keys respectively.
fn attention_context(
    attn: &LayerAttention,
    text_slots: &[usize],
    history_slots: &[usize],
) -> Result<AttentionContext, PruneError> {
    let n = attn.n();
    let mean = attn.mean_weights();
    let gather = |cols: &[usize]| -> Vec<f64> {
        let mut out = Vec::with_capacity(text_slots.len() * cols.len());
        for &t in text_slots {
            let row: Vec<f64> = cols.iter().map(|&c| mean[t * n + c]).collect();
            let sum: f64 = row.iter().sum();
            if sum > 0.0 {
                out.extend(row.iter().map(|v| v / sum));
            } else {
                out.extend(std::iter::repeat_n(1.0 / cols.len() as f64, cols.len()));
            }
        }
        out
    };
    AttentionContext::new(
        text_slots.len(),
        history_slots.len(),
        gather(text_slots),
        gather(history_slots),
    )
}

/// Dense-rank positions of the survivors, per axis.
fn remap_contiguous(positions: &[Position]) -> Vec<Position> {
    fn dense_rank(values: &[u32]) -> Vec<u32> {
        let mut sorted = values.to_vec();
        sorted.sort_unstable();
        sorted.dedup();
        values
            .iter()
            .map(|v| sorted.binary_search(v).expect("value present") as u32)
            .collect()
    }
    if positions.iter().all(|p| matches!(p, Position::Linear(_))) {
        let lin: Vec<u32> = positions
            .iter()
            .map(|p| match p {
                Position::Linear(v) => *v,
                Position::Multi(_) => unreachable!(),
            })
            .collect();
        return dense_rank(&lin).into_iter().map(Position::Linear).collect();
    }
    let idx: Vec<PositionIndex> = positions.iter().map(|p| p.as_index()).collect();
    let t = dense_rank(&idx.iter().map(|p| p.temporal).collect::<Vec<_>>());
    let h = dense_rank(&idx.iter().map(|p| p.height).collect::<Vec<_>>());
    let w = dense_rank(&idx.iter().map(|p| p.width).collect::<Vec<_>>());
    (0..positions.len())
        .map(|i| {
            Position::Multi(PositionIndex {
                temporal: t[i],
                height: h[i],
                width: w[i],
            })
        })
        .collect()
}

/// Rectangular block of patches, in grid coordinates.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct PatchRegion {
    pub row: u32,
    pub col: u32,
    pub rows: u32,
    pub cols: u32,
}

impl PatchRegion {
    pub fn contains(&self, row: u32, col: u32) -> bool {
        row >= self.row && row < self.row + self.rows && col >= self.col && col < self.col + self.cols
    }
}

/// Location diagnostics of one probe run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ProbeOutcome {
    /// Attention-mass centroid `(row, col)` of the probe query, unpruned.
    pub pre_centroid: (f64, f64),
    /// Same centroid over the kept tokens after pruning.
    pub post_centroid: (f64, f64),
    /// Mid-rank quantile `(row, col)` of the target centroid among all visual tokens.
    pub pre_quantile: (f64, f64),
    /// Same quantile among the kept visual tokens.
    pub post_quantile: (f64, f64),
    /// `post_quantile - pre_quantile`.
    pub rank_shift: (f64, f64),
    pub kept_tokens: usize,
}

impl ProbeOutcome {
    pub fn centroid_shift(&self) -> f64 {
        (self.pre_centroid.0 - self.post_centroid.0).hypot(self.pre_centroid.1 - self.post_centroid.1)
    }
}

/// Synthetic single-screenshot scene: a `rows`×`cols` history frame whose
/// `target` tokens share one embedding signature and whose other tokens share
/// a "blank" signature, followed by one probe text token. Target tokens are
/// labelled foreground so the semantic filter keeps exactly the target.
pub fn probe_scene(
    config: &HarnessConfig,
    rows: u32,
    cols: u32,
    target: PatchRegion,
) -> Result<TokenTensor, HarnessError> {
    if rows == 0 || cols == 0 {
        return Err(HarnessError::InvalidRegion("empty grid".into()));
    }
    if target.rows == 0 || target.cols == 0 {
        return Err(HarnessError::InvalidRegion("target region is empty".into()));
    }
    if target.row + target.rows > rows || target.col + target.cols > cols {
        return Err(HarnessError::InvalidRegion(format!(
            "target {target:?} exceeds {rows}x{cols} grid"
        )));
    }
    let d = config.embed_dim;
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_9b0b);
    let mut gaussian = |scale: f64| -> Vec<f64> {
        (0..d)
            .map(|_| {
                let z: f64 = StandardNormal.sample(&mut rng);
                z * scale
            })
            .collect()
    };
    let blank = gaussian(1.0);
    let signature = gaussian(1.0);
    let query = gaussian(1.0);
    let positions: Vec<Position> = match config.rope {
        RopeMode::Mrope { .. } => mrope_positions(&[Segment::Image { rows, cols }, Segment::Text { len: 1 }])
            .into_iter()
            .map(Position::Multi)
            .collect(),
        RopeMode::Rope1d => (0..rows * cols + 1).map(Position::Linear).collect(),
    };
    let mut hidden = Vec::with_capacity((rows * cols + 1) as usize * d);
    let mut info = Vec::with_capacity((rows * cols + 1) as usize);
    for r in 0..rows {
        for c in 0..cols {
            let inside = target.contains(r, c);
            let base = if inside { &signature } else { &blank };
            let noise = gaussian(0.05);
            hidden.extend(base.iter().zip(&noise).map(|(b, e)| b + e));
            info.push(TokenInfo {
                role: TokenRole::History { frame: 1, row: r, col: c },
                position: positions[(r * cols + c) as usize],
                label: if inside {
                    TokenLabel::Foreground
                } else {
                    TokenLabel::Background
                },
            });
        }
    }
    hidden.extend_from_slice(&query);
    info.push(TokenInfo {
        role: TokenRole::Text,
        position: positions[(rows * cols) as usize],
        label: TokenLabel::Unlabeled,
    });
    TokenTensor::new(d, hidden, info)
}

/// Mid-rank quantile of `x` within `values`.
pub fn mid_rank_quantile(x: f64, values: &[f64]) -> f64 {
    let below = values.iter().filter(|&&v| v < x).count() as f64;
    let equal = values.iter().filter(|&&v| v == x).count() as f64;
    (below + 0.5 * equal) / values.len() as f64
}

/// Probe scene with its unpruned run, reusable across pruning specs.
pub struct ProbeScene {
    tokens: TokenTensor,
    target: PatchRegion,
    baseline: ForwardOutput,
}

impl ProbeScene {
    pub fn new(harness: &Harness, rows: u32, cols: u32, target: PatchRegion) -> Result<Self, HarnessError> {
        let tokens = probe_scene(harness.config(), rows, cols, target)?;
        let baseline = harness.forward(&tokens, None)?;
        Ok(Self {
            tokens,
            target,
            baseline,
        })
    }

    pub fn tokens(&self) -> &TokenTensor {
        &self.tokens
    }

    fn grid_of(&self, id: usize) -> Option<(f64, f64)> {
        match self.tokens.info[id].role {
            TokenRole::History { row, col, .. } | TokenRole::Current { row, col } => Some((row as f64, col as f64)),
            TokenRole::Text => None,
        }
    }

    /// Attention-mass centroid of the probe query at the last layer.
    fn centroid(&self, out: &ForwardOutput) -> (f64, f64) {
        let probe_id = self.tokens.len() - 1;
        let last = out.layers.last().expect("at least one layer");
        let (mut r, mut c, mut mass) = (0.0, 0.0, 0.0);
        for h in 0..last.heads {
            for &id in &last.token_ids {
                if let Some((gr, gc)) = self.grid_of(id) {
                    let w = last.weight(h, probe_id, id).expect("probe survives pruning");
                    r += w * gr;
                    c += w * gc;
                    mass += w;
                }
            }
        }
        (r / mass, c / mass)
    }

    /// Per-axis mid-rank quantile of the target centroid among `ids`.
    fn quantile(&self, ids: &[usize]) -> (f64, f64) {
        let t = self.target;
        let coords: Vec<(f64, f64)> = ids.iter().filter_map(|&id| self.grid_of(id)).collect();
        let in_target: Vec<(f64, f64)> = coords
            .iter()
            .copied()
            .filter(|&(r, c)| t.contains(r as u32, c as u32))
            .collect();
        let center = if in_target.is_empty() {
            (
                t.row as f64 + (t.rows as f64 - 1.0) / 2.0,
                t.col as f64 + (t.cols as f64 - 1.0) / 2.0,
            )
        } else {
            let n = in_target.len() as f64;
            (
                in_target.iter().map(|p| p.0).sum::<f64>() / n,
                in_target.iter().map(|p| p.1).sum::<f64>() / n,
            )
        };
        let rows: Vec<f64> = coords.iter().map(|p| p.0).collect();
        let cols: Vec<f64> = coords.iter().map(|p| p.1).collect();
        (mid_rank_quantile(center.0, &rows), mid_rank_quantile(center.1, &cols))
    }

    pub fn run(&self, harness: &Harness, prune: &PruneSpec) -> Result<ProbeOutcome, HarnessError> {
        let post = harness.forward(&self.tokens, Some(prune))?;
        let pre_quantile = self.quantile(&self.baseline.token_ids);
        let post_quantile = self.quantile(&post.token_ids);
        Ok(ProbeOutcome {
            pre_centroid: self.centroid(&self.baseline),
            post_centroid: self.centroid(&post),
            pre_quantile,
            post_quantile,
            rank_shift: (post_quantile.0 - pre_quantile.0, post_quantile.1 - pre_quantile.1),
            kept_tokens: post.token_ids.iter().filter(|&&id| self.grid_of(id).is_some()).count(),
        })
    }
}

/// Runs the probe scene with and without pruning and reports where the
/// probe query's attention mass and the target sit relative to the kept
/// tokens.
pub fn spatial_probe(
    harness: &Harness,
    rows: u32,
    cols: u32,
    target: PatchRegion,
    prune: &PruneSpec,
) -> Result<ProbeOutcome, HarnessError> {
    ProbeScene::new(harness, rows, cols, target)?.run(harness, prune)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::budget::uniform_budgets;
    use crate::prune::SemanticKeep;

    fn cfg_1d() -> HarnessConfig {
        HarnessConfig {
            layers: 3,
            embed_dim: 8,
            heads: 2,
            prune_layer: 1,
            rope: RopeMode::Rope1d,
            ..HarnessConfig::default()
        }
    }

    /// Two history frames of 2×2, one current frame of 2×2, two text tokens.
    fn small_tensor(dim: usize, seed: u64, rope: RopeMode) -> TokenTensor {
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let mut roles = Vec::new();
        for frame in [2u32, 1] {
            for r in 0..2 {
                for c in 0..2 {
                    roles.push(TokenRole::History { frame, row: r, col: c });
                }
            }
        }
        for r in 0..2 {
            for c in 0..2 {
                roles.push(TokenRole::Current { row: r, col: c });
            }
        }
        roles.extend([TokenRole::Text, TokenRole::Text]);
        let positions: Vec<Position> = match rope {
            RopeMode::Rope1d => (0..roles.len() as u32).map(Position::Linear).collect(),
            RopeMode::Mrope { .. } => mrope_positions(&[
                Segment::Image { rows: 2, cols: 2 },
                Segment::Image { rows: 2, cols: 2 },
                Segment::Image { rows: 2, cols: 2 },
                Segment::Text { len: 2 },
            ])
            .into_iter()
            .map(Position::Multi)
            .collect(),
        };
        let info = roles
            .into_iter()
            .zip(positions)
            .map(|(role, position)| TokenInfo {
                role,
                position,
                label: TokenLabel::Unlabeled,
            })
            .collect::<Vec<_>>();
        let hidden = (0..info.len() * dim)
            .map(|_| StandardNormal.sample(&mut rng))
            .collect();
        TokenTensor::new(dim, hidden, info).unwrap()
    }

    #[test]
    fn config_validation() {
        let mut c = cfg_1d();
        c.prune_layer = 3;
        assert!(Harness::new(c).is_err());
        c.prune_layer = 0;
        assert!(Harness::new(c).is_err());
        let c = HarnessConfig {
            embed_dim: 6,
            heads: 2,
            ..cfg_1d()
        };
        assert!(Harness::new(c).is_err());
        let c = HarnessConfig {
            rope: RopeMode::Mrope {
                temporal: 2,
                height: 2,
                width: 2,
            },
            ..cfg_1d()
        };
        assert!(Harness::new(c).is_err());
        assert!(Harness::new(HarnessConfig::default()).is_ok());
    }

    #[test]
    fn rotate_zero_and_identity() {
        let zero = rope_rotate(&[0.0; 4], Position::Linear(17), &RopeMode::Rope1d, 1e4).unwrap();
        assert_eq!(zero, vec![0.0; 4]);
        let v = [0.3, -1.2, 2.5, 0.7];
        assert_eq!(rope_rotate(&v, Position::Linear(0), &RopeMode::Rope1d, 1e4).unwrap(), v);
    }

    #[test]
    fn rotate_by_hand() {
        // d=4, position 1: pair 0 turns by 1 rad, pair 1 by 10000^(-1/2) = 0.01 rad.
        let v = [1.0, 2.0, 3.0, 4.0];
        let out = rope_rotate(&v, Position::Linear(1), &RopeMode::Rope1d, 1e4).unwrap();
        let (s0, c0) = 1f64.sin_cos();
        let (s1, c1) = 0.01f64.sin_cos();
        let expect = [
            1.0 * c0 - 2.0 * s0,
            1.0 * s0 + 2.0 * c0,
            3.0 * c1 - 4.0 * s1,
            3.0 * s1 + 4.0 * c1,
        ];
        for (a, b) in out.iter().zip(expect) {
            assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn mrope_sections_pick_components() {
        let mode = RopeMode::Mrope {
            temporal: 2,
            height: 2,
            width: 2,
        };
        let v = [1.0, 0.0, 1.0, 0.0, 1.0, 0.0];
        let p = Position::Multi(PositionIndex {
            temporal: 0,
            height: 5,
            width: 0,
        });
        let out = rope_rotate(&v, p, &mode, 1e4).unwrap();
        assert_eq!(&out[0..2], &[1.0, 0.0]);
        assert_eq!(&out[4..6], &[1.0, 0.0]);
        let angle = 5.0 * 1e4f64.powf(-2.0 / 6.0);
        assert!((out[2] - angle.cos()).abs() < 1e-12);
        assert!((out[3] - angle.sin()).abs() < 1e-12);
        assert!(rope_rotate(&[0.0; 5], Position::Linear(1), &RopeMode::Rope1d, 1e4).is_err());
        assert!(rope_rotate(&v, Position::Linear(1), &mode, 1e4).is_err());
    }

    #[test]
    fn mrope_split() {
        assert_eq!(RopeMode::mrope_for(16), RopeMode::Mrope { temporal: 4, height: 6, width: 6 });
        assert_eq!(RopeMode::mrope_for(128), RopeMode::Mrope { temporal: 32, height: 48, width: 48 });
        for d in (2..64).step_by(2) {
            assert!(check_rope(&RopeMode::mrope_for(d), d).is_ok());
        }
    }

    #[test]
    fn mrope_layout() {
        let p = mrope_positions(&[Segment::Text { len: 2 }, Segment::Image { rows: 2, cols: 3 }, Segment::Text { len: 1 }]);
        assert_eq!(p[0], PositionIndex { temporal: 0, height: 0, width: 0 });
        assert_eq!(p[2], PositionIndex { temporal: 2, height: 2, width: 2 });
        assert_eq!(p[7], PositionIndex { temporal: 2, height: 3, width: 4 });
        assert_eq!(p[8], PositionIndex { temporal: 5, height: 5, width: 5 });
    }

    #[test]
    fn forward_without_pruning_keeps_all_tokens() {
        let h = Harness::new(cfg_1d()).unwrap();
        let t = small_tensor(8, 1, RopeMode::Rope1d);
        let out = h.forward(&t, None).unwrap();
        assert!(out.layers.iter().all(|l| l.n() == t.len()));
        assert!(out.prune.is_none());
        for l in &out.layers {
            for row in l.weights.chunks(t.len()) {
                assert!((row.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            }
        }
    }

    #[test]
    fn full_budget_prune_is_bitwise_identity() {
        let h = Harness::new(cfg_1d()).unwrap();
        let t = small_tensor(8, 2, RopeMode::Rope1d);
        let plain = h.forward(&t, None).unwrap();
        for strategy in [Strategy::Random, Strategy::AttentionRank, Strategy::Diversity] {
            let spec = PruneSpec::new(strategy, BudgetSchedule::full(4, 2), 3);
            let pruned = h.forward(&t, Some(&spec)).unwrap();
            assert_eq!(pruned.hidden, plain.hidden);
            assert_eq!(pruned.layers, plain.layers);
        }
    }

    #[test]
    fn zero_budget_leaves_current_and_text() {
        let h = Harness::new(cfg_1d()).unwrap();
        let t = small_tensor(8, 3, RopeMode::Rope1d);
        let spec = PruneSpec::new(Strategy::Random, BudgetSchedule::explicit(4, &[0, 0]), 0);
        let out = h.forward(&t, Some(&spec)).unwrap();
        assert_eq!(out.layers[0].n(), 14);
        assert_eq!(out.layers[1].n(), 6);
        assert_eq!(out.token_ids, vec![8, 9, 10, 11, 12, 13]);
    }

    #[test]
    fn contiguous_remap_packs_positions() {
        let cfg = HarnessConfig {
            positions: PositionMode::Contiguous,
            ..cfg_1d()
        };
        let h = Harness::new(cfg).unwrap();
        let t = small_tensor(8, 3, RopeMode::Rope1d);
        let spec = PruneSpec::new(Strategy::Random, BudgetSchedule::explicit(4, &[0, 0]), 0);
        let out = h.forward(&t, Some(&spec)).unwrap();
        let expect: Vec<Position> = (0..6).map(Position::Linear).collect();
        assert_eq!(out.positions, expect);
    }

    #[test]
    fn shift_zero_is_exact() {
        let h = Harness::new(cfg_1d()).unwrap();
        let t = small_tensor(8, 4, RopeMode::Rope1d);
        assert_eq!(h.relative_logit_check(&t, 0).unwrap(), 0.0);
        assert!(h.relative_logit_check(&t, 5).unwrap() < 1e-5);
    }

    #[test]
    fn mrope_shift_invariance() {
        let cfg = HarnessConfig {
            embed_dim: 16,
            heads: 2,
            rope: RopeMode::Mrope {
                temporal: 2,
                height: 2,
                width: 4,
            },
            ..cfg_1d()
        };
        let h = Harness::new(cfg).unwrap();
        let t = small_tensor(16, 5, cfg.rope);
        assert!(h.relative_logit_check(&t, 9).unwrap() < 1e-5);
    }

    #[test]
    fn mismatched_positions_are_rejected() {
        let h = Harness::new(cfg_1d()).unwrap();
        let t = small_tensor(8, 4, RopeMode::Mrope { temporal: 2, height: 2, width: 0 });
        assert!(matches!(h.forward(&t, None), Err(HarnessError::Tokens(_))));
    }

    #[test]
    fn mac_count_matches_closed_form() {
        let h = Harness::new(cfg_1d()).unwrap();
        let t = small_tensor(8, 6, RopeMode::Rope1d);
        let out = h.forward(&t, None).unwrap();
        let (n, d, l) = (14u64, 8u64, 3u64);
        assert_eq!(out.macs, l * (4 * n * d * d + 2 * n * n * d));
    }

    #[test]
    fn attention_csv_shape() {
        let h = Harness::new(cfg_1d()).unwrap();
        let t = small_tensor(8, 6, RopeMode::Rope1d);
        let out = h.forward(&t, None).unwrap();
        let csv = out.layers[0].to_csv(true);
        assert_eq!(csv.lines().count(), 1 + 14 * 14);
        assert!(csv.starts_with("layer,query,key,weight\n1,0,0,"));
    }

    #[test]
    fn probe_region_validation() {
        let cfg = HarnessConfig::default();
        assert!(probe_scene(&cfg, 4, 4, PatchRegion { row: 0, col: 0, rows: 0, cols: 1 }).is_err());
        assert!(probe_scene(&cfg, 4, 4, PatchRegion { row: 3, col: 0, rows: 2, cols: 1 }).is_err());
    }

    #[test]
    fn probe_without_reduction_is_stable() {
        let h = Harness::new(HarnessConfig::default()).unwrap();
        let target = PatchRegion { row: 2, col: 5, rows: 2, cols: 2 };
        let spec = PruneSpec::new(Strategy::Random, uniform_budgets(64, 1, 1.0).unwrap(), 1);
        let o = spatial_probe(&h, 8, 8, target, &spec).unwrap();
        assert_eq!(o.pre_centroid, o.post_centroid);
        assert_eq!(o.rank_shift, (0.0, 0.0));
    }

    #[test]
    fn probe_keep_target_collapses_quantile() {
        let h = Harness::new(HarnessConfig::default()).unwrap();
        let target = PatchRegion { row: 1, col: 5, rows: 2, cols: 2 };
        let spec = PruneSpec::new(
            Strategy::Semantic { keep: SemanticKeep::ForegroundOnly },
            BudgetSchedule::full(64, 1),
            0,
        );
        let o = spatial_probe(&h, 8, 8, target, &spec).unwrap();
        assert_eq!(o.post_quantile, (0.5, 0.5));
        assert_eq!(o.kept_tokens, 4);
        assert!(o.pre_quantile.1 > 0.7);
    }
}
