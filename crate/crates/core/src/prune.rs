//! Token selection over history-frame tokens.
//!
//! Every strategy consumes a [`TokenTable`] (hidden states of history tokens
//! at the pruning layer plus per-token metadata) and a [`BudgetSchedule`],
//! and returns a [`PruneResult`] holding the sorted surviving indices.
//! Selection runs per frame against that frame's budget unless the global
//! pool is requested. Ties always go to the lower token index.

use std::cmp::Ordering;
use std::collections::BTreeMap;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::BudgetSchedule;

#[derive(Debug, Error, PartialEq)]
pub enum PruneError {
    #[error("frame {distance} budget {budget} exceeds its {available} tokens")]
    BudgetOverflow {
        distance: u32,
        budget: usize,
        available: usize,
    },
    #[error("no budget scheduled for frame distance {0}")]
    MissingBudget(u32),
    #[error("shape mismatch: {0}")]
    Shape(String),
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
    #[error("token {0} has no foreground/background label")]
    MissingLabel(usize),
    #[error("invalid token table: {0}")]
    InvalidTable(String),
    #[error("invalid attention context: {0}")]
    InvalidAttention(String),
    #[error("kept set is empty")]
    EmptyResult,
    #[error("strategy needs an attention context")]
    MissingAttention,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TokenLabel {
    Foreground,
    Background,
    Unlabeled,
}

/// Multi-axis position index (temporal, height, width).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, Serialize, Deserialize)]
pub struct PositionIndex {
    pub temporal: u32,
    pub height: u32,
    pub width: u32,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TokenMeta {
    /// Distance from the current step, `>= 1`.
    pub frame: u32,
    pub row: u32,
    pub col: u32,
    pub position: PositionIndex,
    pub label: TokenLabel,
}

/// Hidden states of history tokens plus their metadata.
#[derive(Debug, Clone, PartialEq)]
pub struct TokenTable {
    embed_dim: usize,
    embeddings: Vec<f64>,
    meta: Vec<TokenMeta>,
}

impl TokenTable {
    pub fn new(embed_dim: usize, embeddings: Vec<f64>, meta: Vec<TokenMeta>) -> Result<Self, PruneError> {
        if embed_dim == 0 {
            return Err(PruneError::InvalidTable("embed_dim must be > 0".into()));
        }
        if embeddings.len() != embed_dim * meta.len() {
            return Err(PruneError::InvalidTable(format!(
                "{} embedding values for {} tokens of dim {embed_dim}",
                embeddings.len(),
                meta.len()
            )));
        }
        if let Some(i) = embeddings.iter().position(|v| !v.is_finite()) {
            return Err(PruneError::InvalidTable(format!(
                "non-finite embedding value in token {}",
                i / embed_dim
            )));
        }
        if let Some(i) = meta.iter().position(|m| m.frame == 0) {
            return Err(PruneError::InvalidTable(format!(
                "token {i} has frame distance 0; the current frame is never prunable"
            )));
        }
        Ok(Self {
            embed_dim,
            embeddings,
            meta,
        })
    }

    pub fn len(&self) -> usize {
        self.meta.len()
    }

    pub fn is_empty(&self) -> bool {
        self.meta.is_empty()
    }

    pub fn embed_dim(&self) -> usize {
        self.embed_dim
    }

    pub fn embedding(&self, i: usize) -> &[f64] {
        &self.embeddings[i * self.embed_dim..(i + 1) * self.embed_dim]
    }

    pub fn meta(&self) -> &[TokenMeta] {
        &self.meta
    }

    /// Token indices of each frame, ascending, keyed by frame distance.
    pub fn frames(&self) -> BTreeMap<u32, Vec<usize>> {
        let mut out: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, m) in self.meta.iter().enumerate() {
            out.entry(m.frame).or_default().push(i);
        }
        out
    }

    /// Token count of frames `1..=max_distance`; absent frames count 0.
    pub fn frame_counts(&self) -> Vec<usize> {
        let frames = self.frames();
        let max = frames.keys().next_back().copied().unwrap_or(0);
        (1..=max)
            .map(|d| frames.get(&d).map_or(0, Vec::len))
            .collect()
    }

    /// Bounding grid `(rows, cols)` over all tokens.
    pub fn grid_extent(&self) -> (u32, u32) {
        let rows = self.meta.iter().map(|m| m.row + 1).max().unwrap_or(0);
        let cols = self.meta.iter().map(|m| m.col + 1).max().unwrap_or(0);
        (rows, cols)
    }
}

/// Text self-attention and text→history cross-attention at the pruning layer.
#[derive(Debug, Clone, PartialEq)]
pub struct AttentionContext {
    text_len: usize,
    history_len: usize,
    text_self: Vec<f64>,
    cross: Vec<f64>,
}

impl AttentionContext {
    /// Both matrices must be row-stochastic within 1e-5.
    pub fn new(
        text_len: usize,
        history_len: usize,
        text_self: Vec<f64>,
        cross: Vec<f64>,
    ) -> Result<Self, PruneError> {
        let ctx = Self::unnormalized(text_len, history_len, text_self, cross)?;
        for (name, m, cols) in [
            ("text self-attention", &ctx.text_self, text_len),
            ("cross-attention", &ctx.cross, history_len),
        ] {
            if cols == 0 {
                continue;
            }
            for (r, row) in m.chunks_exact(cols).enumerate() {
                let s: f64 = row.iter().sum();
                if (s - 1.0).abs() > 1e-5 {
                    return Err(PruneError::InvalidAttention(format!(
                        "{name} row {r} sums to {s}"
                    )));
                }
            }
        }
        Ok(ctx)
    }

    /// Non-negative attention mass without the row-sum check, e.g. summed over heads.
    pub fn unnormalized(
        text_len: usize,
        history_len: usize,
        text_self: Vec<f64>,
        cross: Vec<f64>,
    ) -> Result<Self, PruneError> {
        if text_len == 0 {
            return Err(PruneError::InvalidAttention("no text rows".into()));
        }
        if text_self.len() != text_len * text_len {
            return Err(PruneError::Shape(format!(
                "text self-attention has {} entries, expected {text_len}x{text_len}",
                text_self.len()
            )));
        }
        if cross.len() != text_len * history_len {
            return Err(PruneError::Shape(format!(
                "cross-attention has {} entries, expected {text_len}x{history_len}",
                cross.len()
            )));
        }
        if text_self
            .iter()
            .chain(cross.iter())
            .any(|v| !v.is_finite() || *v < 0.0)
        {
            return Err(PruneError::InvalidAttention(
                "entries must be finite and non-negative".into(),
            ));
        }
        Ok(Self {
            text_len,
            history_len,
            text_self,
            cross,
        })
    }

    pub fn text_len(&self) -> usize {
        self.text_len
    }

    pub fn history_len(&self) -> usize {
        self.history_len
    }

    fn cross_row(&self, t: usize) -> &[f64] {
        &self.cross[t * self.history_len..(t + 1) * self.history_len]
    }

    /// Mean cross-attention each history token receives over `rows`.
    pub fn column_means(&self, rows: &[usize]) -> Vec<f64> {
        let mut out = vec![0.0; self.history_len];
        for &t in rows {
            for (acc, v) in out.iter_mut().zip(self.cross_row(t)) {
                *acc += v;
            }
        }
        let n = rows.len() as f64;
        out.iter_mut().for_each(|v| *v /= n);
        out
    }

    /// Total self-attention each text token receives.
    pub fn text_relevance(&self) -> Vec<f64> {
        let t = self.text_len;
        (0..t)
            .map(|j| (0..t).map(|i| self.text_self[i * t + j]).sum())
            .collect()
    }
}

/// A kept token and the centroid of the pruned tokens merged into it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MergedToken {
    pub kept: usize,
    pub assignees: Vec<usize>,
    pub centroid: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneResult {
    kept: Vec<usize>,
    per_frame_kept: BTreeMap<u32, usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    merged: Option<Vec<MergedToken>>,
}

impl PruneResult {
    /// Builds a result from unsorted indices into `table`.
    pub fn from_indices(table: &TokenTable, mut kept: Vec<usize>) -> Result<Self, PruneError> {
        kept.sort_unstable();
        kept.dedup();
        if let Some(&bad) = kept.iter().find(|&&i| i >= table.len()) {
            return Err(PruneError::InvalidParameter(format!(
                "kept index {bad} out of range for {} tokens",
                table.len()
            )));
        }
        let mut per_frame_kept: BTreeMap<u32, usize> =
            table.frames().keys().map(|&d| (d, 0)).collect();
        for &i in &kept {
            *per_frame_kept.entry(table.meta[i].frame).or_default() += 1;
        }
        Ok(Self {
            kept,
            per_frame_kept,
            merged: None,
        })
    }

    pub fn kept(&self) -> &[usize] {
        &self.kept
    }

    pub fn per_frame_kept(&self) -> &BTreeMap<u32, usize> {
        &self.per_frame_kept
    }

    pub fn merged(&self) -> Option<&[MergedToken]> {
        self.merged.as_deref()
    }

    pub fn len(&self) -> usize {
        self.kept.len()
    }

    pub fn is_empty(&self) -> bool {
        self.kept.is_empty()
    }
}

/// Which tokens the semantic filter retains.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SemanticKeep {
    ForegroundOnly,
    BackgroundOnly,
    All,
}

/// Whether budgets are enforced per frame or pooled across all frames.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pool {
    #[default]
    PerFrame,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "strategy", rename_all = "snake_case")]
pub enum Strategy {
    Random,
    AttentionRank,
    TextGuided { text_top_m: usize, recycle: bool },
    Diversity,
    Duplication { pivot_count: usize },
    Semantic { keep: SemanticKeep },
}

impl Strategy {
    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Random => "random",
            Strategy::AttentionRank => "attention_rank",
            Strategy::TextGuided { .. } => "text_guided",
            Strategy::Diversity => "diversity",
            Strategy::Duplication { .. } => "duplication",
            Strategy::Semantic { keep: SemanticKeep::ForegroundOnly } => "keep_fg",
            Strategy::Semantic { keep: SemanticKeep::BackgroundOnly } => "keep_bg",
            Strategy::Semantic { keep: SemanticKeep::All } => "keep_all",
        }
    }

    pub fn needs_attention(&self) -> bool {
        matches!(self, Strategy::AttentionRank | Strategy::TextGuided { .. })
    }
}

/// Runs `strategy` with the given pool. Attention-driven strategies need `attn`.
pub fn apply(
    strategy: &Strategy,
    tokens: &TokenTable,
    attn: Option<&AttentionContext>,
    schedule: &BudgetSchedule,
    seed: u64,
    pool: Pool,
) -> Result<PruneResult, PruneError> {
    let need_attn = || attn.ok_or(PruneError::MissingAttention);
    match strategy {
        Strategy::Random => select(tokens, schedule, pool, |members, budget, stream| {
            Ok(random_subset(members, budget, seed, stream))
        }),
        Strategy::AttentionRank => {
            let attn = need_attn()?;
            check_attention(tokens, attn)?;
            let rows: Vec<usize> = (0..attn.text_len).collect();
            let scores = attn.column_means(&rows);
            select(tokens, schedule, pool, |members, budget, _| {
                Ok(top_by_score(members, &scores, budget))
            })
        }
        Strategy::TextGuided { text_top_m, recycle } => {
            text_guided_impl(tokens, need_attn()?, schedule, *text_top_m, *recycle, pool)
        }
        Strategy::Diversity => select(tokens, schedule, pool, |members, budget, _| {
            Ok(farthest_point(tokens, members, budget))
        }),
        Strategy::Duplication { pivot_count } => duplication_impl(
            tokens,
            schedule,
            PivotChoice::Random {
                count: *pivot_count,
                seed,
            },
            pool,
        ),
        Strategy::Semantic { keep } => semantic_filter(tokens, *keep),
    }
}

/// Per-frame uniform sampling without replacement.
pub fn random_prune(
    tokens: &TokenTable,
    budgets: &BudgetSchedule,
    seed: u64,
) -> Result<PruneResult, PruneError> {
    apply(&Strategy::Random, tokens, None, budgets, seed, Pool::PerFrame)
}

/// Keeps the tokens with the highest mean text→token cross-attention.
pub fn attention_rank_prune(
    tokens: &TokenTable,
    attn: &AttentionContext,
    budgets: &BudgetSchedule,
) -> Result<PruneResult, PruneError> {
    apply(&Strategy::AttentionRank, tokens, Some(attn), budgets, 0, Pool::PerFrame)
}

/// Scores tokens by cross-attention from the `text_top_m` most attended text
/// tokens only. With `recycle`, every pruned token is merged into its most
/// cosine-similar kept token of the same frame.
pub fn text_guided_prune(
    tokens: &TokenTable,
    attn: &AttentionContext,
    budgets: &BudgetSchedule,
    text_top_m: usize,
    recycle: bool,
) -> Result<PruneResult, PruneError> {
    text_guided_impl(tokens, attn, budgets, text_top_m, recycle, Pool::PerFrame)
}

/// Greedy max-min (farthest point) selection seeded with the largest-norm token.
pub fn diversity_prune(tokens: &TokenTable, budgets: &BudgetSchedule) -> Result<PruneResult, PruneError> {
    apply(&Strategy::Diversity, tokens, None, budgets, 0, Pool::PerFrame)
}

/// How duplication pruning picks its pivots.
#[derive(Debug, Clone, PartialEq)]
pub enum PivotChoice {
    /// `count` pivots per frame, uniformly at random.
    Random { count: usize, seed: u64 },
    /// Fixed token indices; each frame uses the ones that belong to it.
    Fixed(Vec<usize>),
}

/// Keeps random pivots plus the tokens least duplicated (max cosine
/// similarity) with respect to them.
pub fn duplication_prune(
    tokens: &TokenTable,
    budgets: &BudgetSchedule,
    pivot_count: usize,
    seed: u64,
) -> Result<PruneResult, PruneError> {
    duplication_impl(
        tokens,
        budgets,
        PivotChoice::Random {
            count: pivot_count,
            seed,
        },
        Pool::PerFrame,
    )
}

pub fn duplication_prune_with(
    tokens: &TokenTable,
    budgets: &BudgetSchedule,
    pivots: PivotChoice,
) -> Result<PruneResult, PruneError> {
    duplication_impl(tokens, budgets, pivots, Pool::PerFrame)
}

/// Keeps foreground-only, background-only, or all tokens.
pub fn semantic_filter(tokens: &TokenTable, keep: SemanticKeep) -> Result<PruneResult, PruneError> {
    let wanted = match keep {
        SemanticKeep::All => return PruneResult::from_indices(tokens, (0..tokens.len()).collect()),
        SemanticKeep::ForegroundOnly => TokenLabel::Foreground,
        SemanticKeep::BackgroundOnly => TokenLabel::Background,
    };
    let mut kept = Vec::new();
    for (i, m) in tokens.meta.iter().enumerate() {
        match m.label {
            TokenLabel::Unlabeled => return Err(PruneError::MissingLabel(i)),
            l if l == wanted => kept.push(i),
            _ => {}
        }
    }
    PruneResult::from_indices(tokens, kept)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SpatialBias {
    /// Distance between kept and full grid-coordinate centroids over the grid diagonal.
    pub centroid_shift: f64,
    /// Entropy of kept counts over a 4×4 super-cell partition, normalized to [0, 1].
    pub coverage_entropy: f64,
}

/// Super-cell partition used by coverage metrics.
pub const SUPER_CELLS_PER_SIDE: u32 = 4;

/// Super-cell `(r, c)` of a grid position in a `rows`×`cols` grid.
pub fn super_cell(row: u32, col: u32, rows: u32, cols: u32) -> (u32, u32) {
    (
        row * SUPER_CELLS_PER_SIDE / rows,
        col * SUPER_CELLS_PER_SIDE / cols,
    )
}

pub fn spatial_bias(result: &PruneResult, tokens: &TokenTable) -> Result<SpatialBias, PruneError> {
    if result.kept.is_empty() {
        return Err(PruneError::EmptyResult);
    }
    let (rows, cols) = tokens.grid_extent();
    let centroid = |idx: &mut dyn Iterator<Item = usize>| {
        let (mut r, mut c, mut n) = (0.0, 0.0, 0.0);
        for i in idx {
            r += tokens.meta[i].row as f64;
            c += tokens.meta[i].col as f64;
            n += 1.0;
        }
        (r / n, c / n)
    };
    let full = centroid(&mut (0..tokens.len()));
    let kept = centroid(&mut result.kept.iter().copied());
    let diag = (rows as f64).hypot(cols as f64);
    let centroid_shift = (full.0 - kept.0).hypot(full.1 - kept.1) / diag;

    let side = SUPER_CELLS_PER_SIDE as usize;
    let cell_of = |i: usize| {
        let m = &tokens.meta[i];
        let (r, c) = super_cell(m.row, m.col, rows, cols);
        r as usize * side + c as usize
    };
    let mut occupied = vec![false; side * side];
    for i in 0..tokens.len() {
        occupied[cell_of(i)] = true;
    }
    let mut counts = vec![0usize; side * side];
    for &i in &result.kept {
        counts[cell_of(i)] += 1;
    }
    let n_cells = occupied.iter().filter(|&&o| o).count();
    let coverage_entropy = if n_cells <= 1 {
        1.0
    } else {
        let total = result.kept.len() as f64;
        let h: f64 = counts
            .iter()
            .filter(|&&c| c > 0)
            .map(|&c| {
                let p = c as f64 / total;
                -p * p.ln()
            })
            .sum();
        h / (n_cells as f64).ln()
    };
    Ok(SpatialBias {
        centroid_shift,
        coverage_entropy,
    })
}

fn check_attention(tokens: &TokenTable, attn: &AttentionContext) -> Result<(), PruneError> {
    if attn.history_len != tokens.len() {
        return Err(PruneError::Shape(format!(
            "cross-attention has {} columns for {} history tokens",
            attn.history_len,
            tokens.len()
        )));
    }
    Ok(())
}

/// Drives per-frame (or pooled) selection. `pick` receives the candidate
/// indices, the budget, and a stream id for seeded randomness.
fn select(
    tokens: &TokenTable,
    schedule: &BudgetSchedule,
    pool: Pool,
    mut pick: impl FnMut(&[usize], usize, u64) -> Result<Vec<usize>, PruneError>,
) -> Result<PruneResult, PruneError> {
    let frames = tokens.frames();
    let mut budgets = Vec::with_capacity(frames.len());
    for (&distance, members) in &frames {
        let budget = schedule
            .budget_for(distance)
            .ok_or(PruneError::MissingBudget(distance))?;
        if budget > members.len() {
            return Err(PruneError::BudgetOverflow {
                distance,
                budget,
                available: members.len(),
            });
        }
        budgets.push(budget);
    }
    let kept = match pool {
        Pool::PerFrame => {
            let mut kept = Vec::new();
            for ((&distance, members), budget) in frames.iter().zip(budgets) {
                kept.extend(pick(members, budget, distance as u64)?);
            }
            kept
        }
        Pool::Global => {
            let all: Vec<usize> = (0..tokens.len()).collect();
            pick(&all, budgets.iter().sum(), 0)?
        }
    };
    PruneResult::from_indices(tokens, kept)
}

fn random_subset(members: &[usize], budget: usize, seed: u64, stream: u64) -> Vec<usize> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(stream);
    sample(&mut rng, members.len(), budget)
        .into_iter()
        .map(|i| members[i])
        .collect()
}

/// Highest `budget` scores, ties to the lower index.
fn top_by_score(members: &[usize], scores: &[f64], budget: usize) -> Vec<usize> {
    let mut order = members.to_vec();
    order.sort_by(|&a, &b| desc(scores[a], scores[b]).then(a.cmp(&b)));
    order.truncate(budget);
    order
}

fn desc(a: f64, b: f64) -> Ordering {
    b.partial_cmp(&a).unwrap_or(Ordering::Equal)
}

fn squared_distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

/// Cosine similarity; zero vectors have similarity 0 with everything.
pub fn cosine(a: &[f64], b: &[f64]) -> f64 {
    let na: f64 = a.iter().map(|v| v * v).sum::<f64>().sqrt();
    let nb: f64 = b.iter().map(|v| v * v).sum::<f64>().sqrt();
    if na == 0.0 || nb == 0.0 {
        return 0.0;
    }
    a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>() / (na * nb)
}

fn farthest_point(tokens: &TokenTable, members: &[usize], budget: usize) -> Vec<usize> {
    if budget == 0 || members.is_empty() {
        return Vec::new();
    }
    let norm2 = |i: usize| tokens.embedding(i).iter().map(|v| v * v).sum::<f64>();
    let mut first = members[0];
    for &i in &members[1..] {
        if norm2(i) > norm2(first) {
            first = i;
        }
    }
    let mut chosen = vec![first];
    let mut taken = vec![false; members.len()];
    let mut min_d: Vec<f64> = members
        .iter()
        .map(|&i| squared_distance(tokens.embedding(i), tokens.embedding(first)))
        .collect();
    taken[members.iter().position(|&i| i == first).expect("first is a member")] = true;
    while chosen.len() < budget {
        let mut best: Option<usize> = None;
        for (slot, &d) in min_d.iter().enumerate() {
            if taken[slot] {
                continue;
            }
            if best.is_none_or(|b| d > min_d[b]) {
                best = Some(slot);
            }
        }
        let slot = best.expect("budget never exceeds frame size");
        taken[slot] = true;
        let new = members[slot];
        chosen.push(new);
        for (s, &i) in members.iter().enumerate() {
            let d = squared_distance(tokens.embedding(i), tokens.embedding(new));
            if d < min_d[s] {
                min_d[s] = d;
            }
        }
    }
    chosen
}

fn text_guided_impl(
    tokens: &TokenTable,
    attn: &AttentionContext,
    schedule: &BudgetSchedule,
    text_top_m: usize,
    recycle: bool,
    pool: Pool,
) -> Result<PruneResult, PruneError> {
    if text_top_m == 0 || text_top_m > attn.text_len {
        return Err(PruneError::InvalidParameter(format!(
            "text_top_m must be in 1..={}, got {text_top_m}",
            attn.text_len
        )));
    }
    check_attention(tokens, attn)?;
    let relevance = attn.text_relevance();
    let all_text: Vec<usize> = (0..attn.text_len).collect();
    let rows = top_by_score(&all_text, &relevance, text_top_m);
    let scores = attn.column_means(&rows);
    let mut result = select(tokens, schedule, pool, |members, budget, _| {
        Ok(top_by_score(members, &scores, budget))
    })?;
    if recycle {
        result.merged = Some(recycle_pruned(tokens, &result.kept));
    }
    Ok(result)
}

/// Assigns each pruned token to its most similar kept token in the same frame
/// and reports the centroid of every non-empty assignment.
fn recycle_pruned(tokens: &TokenTable, kept: &[usize]) -> Vec<MergedToken> {
    let mut is_kept = vec![false; tokens.len()];
    kept.iter().for_each(|&i| is_kept[i] = true);
    let mut groups: BTreeMap<usize, Vec<usize>> = BTreeMap::new();
    for members in tokens.frames().values() {
        let frame_kept: Vec<usize> = members.iter().copied().filter(|&i| is_kept[i]).collect();
        if frame_kept.is_empty() {
            continue;
        }
        for &p in members.iter().filter(|&&i| !is_kept[i]) {
            let mut best = frame_kept[0];
            let mut best_sim = cosine(tokens.embedding(p), tokens.embedding(best));
            for &k in &frame_kept[1..] {
                let s = cosine(tokens.embedding(p), tokens.embedding(k));
                if s > best_sim {
                    best = k;
                    best_sim = s;
                }
            }
            groups.entry(best).or_default().push(p);
        }
    }
    groups
        .into_iter()
        .map(|(kept, assignees)| {
            let mut centroid = vec![0.0; tokens.embed_dim];
            for &a in &assignees {
                for (c, v) in centroid.iter_mut().zip(tokens.embedding(a)) {
                    *c += v;
                }
            }
            let n = assignees.len() as f64;
            centroid.iter_mut().for_each(|c| *c /= n);
            MergedToken {
                kept,
                assignees,
                centroid,
            }
        })
        .collect()
}

fn duplication_impl(
    tokens: &TokenTable,
    schedule: &BudgetSchedule,
    pivots: PivotChoice,
    pool: Pool,
) -> Result<PruneResult, PruneError> {
    if let PivotChoice::Random { count: 0, .. } = pivots {
        return Err(PruneError::InvalidParameter("pivot_count must be >= 1".into()));
    }
    select(tokens, schedule, pool, |members, budget, stream| {
        if budget == 0 {
            return Ok(Vec::new());
        }
        let chosen: Vec<usize> = match &pivots {
            PivotChoice::Random { count, seed } => {
                if *count > budget {
                    return Err(PruneError::InvalidParameter(format!(
                        "pivot_count {count} exceeds budget {budget}"
                    )));
                }
                let mut p = random_subset(members, *count, *seed, stream);
                p.sort_unstable();
                p
            }
            PivotChoice::Fixed(fixed) => {
                let p: Vec<usize> = members.iter().copied().filter(|i| fixed.contains(i)).collect();
                if p.len() > budget {
                    return Err(PruneError::InvalidParameter(format!(
                        "{} fixed pivots exceed budget {budget}",
                        p.len()
                    )));
                }
                p
            }
        };
        let duplication: Vec<(usize, f64)> = members
            .iter()
            .copied()
            .filter(|i| !chosen.contains(i))
            .map(|i| {
                let dup = chosen
                    .iter()
                    .map(|&p| cosine(tokens.embedding(i), tokens.embedding(p)))
                    .fold(f64::NEG_INFINITY, f64::max);
                (i, if chosen.is_empty() { 0.0 } else { dup })
            })
            .collect();
        let mut rest = duplication;
        rest.sort_by(|a, b| a.1.partial_cmp(&b.1).unwrap_or(Ordering::Equal).then(a.0.cmp(&b.0)));
        let mut kept = chosen.clone();
        kept.extend(rest.into_iter().take(budget - chosen.len()).map(|(i, _)| i));
        Ok(kept)
    })
}
