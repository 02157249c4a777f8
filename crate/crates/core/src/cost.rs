//! Analytic FLOPs for vision encoding, LLM prefill and decode.
//!
//! One multiply-accumulate counts as 2 FLOPs. Embedding lookups, softmax,
//! normalization, rotary and activation costs are not counted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::budget::BudgetSchedule;

pub const FLOPS_PER_MAC: u64 = 2;
pub const CONVENTION: &str = "1 MAC = 2 FLOPs; embeddings, softmax and norms excluded";

#[derive(Debug, Error, PartialEq)]
pub enum CostError {
    #[error("invalid shape: {0}")]
    Shape(String),
    #[error("reduction needs a positive baseline, got {0}")]
    ZeroBaseline(&'static str),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ModelShape {
    pub llm_layers: usize,
    pub llm_dim: usize,
    pub llm_ffn_dim: usize,
    /// Gated FFN (three projections) instead of two.
    pub llm_gated_ffn: bool,
    pub vit_layers: usize,
    pub vit_dim: usize,
    pub vit_ffn_dim: usize,
    pub vit_gated_ffn: bool,
    /// Vision patches merged into one LLM token.
    pub vit_patches_per_token: usize,
    pub vocab_size: usize,
}

impl ModelShape {
    /// Dimensions of a 2B-class Qwen2-VL-style model.
    pub fn qwen2vl_2b_like() -> Self {
        Self {
            llm_layers: 28,
            llm_dim: 1536,
            llm_ffn_dim: 8960,
            llm_gated_ffn: true,
            vit_layers: 32,
            vit_dim: 1280,
            vit_ffn_dim: 5120,
            vit_gated_ffn: false,
            vit_patches_per_token: 4,
            vocab_size: 151_936,
        }
    }

    /// LLM-only shape with no vision tower cost.
    pub fn llm_only(layers: usize, dim: usize, ffn_dim: usize, gated: bool) -> Self {
        Self {
            llm_layers: layers,
            llm_dim: dim,
            llm_ffn_dim: ffn_dim,
            llm_gated_ffn: gated,
            vit_layers: 0,
            vit_dim: 1,
            vit_ffn_dim: 1,
            vit_gated_ffn: false,
            vit_patches_per_token: 1,
            vocab_size: 1,
        }
    }

    pub fn validate(&self) -> Result<(), CostError> {
        let fields = [
            ("llm_layers", self.llm_layers),
            ("llm_dim", self.llm_dim),
            ("llm_ffn_dim", self.llm_ffn_dim),
            ("vit_dim", self.vit_dim),
            ("vit_ffn_dim", self.vit_ffn_dim),
            ("vit_patches_per_token", self.vit_patches_per_token),
            ("vocab_size", self.vocab_size),
        ];
        for (name, v) in fields {
            if v == 0 {
                return Err(CostError::Shape(format!("{name} must be positive")));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TokenComposition {
    pub current_frame_tokens: usize,
    /// `history_tokens_by_frame[k-1]` is the size of the frame at distance `k`.
    pub history_tokens_by_frame: Vec<usize>,
    pub text_tokens: usize,
    pub decode_tokens: usize,
}

impl TokenComposition {
    /// Phone screenshots resized to long side 512 (224×504 → 8×18 tokens
    /// after 2×2 merging), four history frames, a short instruction plus
    /// action history prompt and a short action answer.
    pub fn aitw_like() -> Self {
        Self {
            current_frame_tokens: 144,
            history_tokens_by_frame: vec![144; 4],
            text_tokens: 160,
            decode_tokens: 30,
        }
    }

    pub fn without_history(&self) -> Self {
        Self {
            history_tokens_by_frame: Vec::new(),
            ..self.clone()
        }
    }

    pub fn history_tokens(&self) -> usize {
        self.history_tokens_by_frame.iter().sum()
    }

    pub fn prompt_tokens(&self) -> usize {
        self.current_frame_tokens + self.text_tokens + self.history_tokens()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FlopsBreakdown {
    pub vit_encode: u64,
    pub prefill: u64,
    pub decode: u64,
    pub total: u64,
}

impl FlopsBreakdown {
    pub fn new(vit_encode: u64, prefill: u64, decode: u64) -> Self {
        Self {
            vit_encode,
            prefill,
            decode,
            total: vit_encode + prefill + decode,
        }
    }
}

fn n64(x: usize) -> u64 {
    x as u64
}

fn ffn_macs(n: u64, d: u64, f: u64, gated: bool) -> u64 {
    if gated {
        3 * n * d * f
    } else {
        2 * n * d * f
    }
}

/// One transformer layer over `n` tokens with full attention.
pub fn layer_flops(n: usize, dim: usize, ffn_dim: usize, gated: bool) -> u64 {
    let (n, d, f) = (n64(n), n64(dim), n64(ffn_dim));
    FLOPS_PER_MAC * (4 * n * d * d + 2 * n * n * d + ffn_macs(n, d, f, gated))
}

/// `8nd² + 4n²d + 4nd·d_ffn` (`6nd·d_ffn` gated) per LLM layer, summed.
pub fn prefill_flops(shape: &ModelShape, n_tokens: usize) -> u64 {
    n64(shape.llm_layers) * layer_flops(n_tokens, shape.llm_dim, shape.llm_ffn_dim, shape.llm_gated_ffn)
}

/// Prefill with layers `1..=k` on `n_full` tokens and the rest on `n_reduced`.
pub fn pruned_prefill_flops(shape: &ModelShape, n_full: usize, n_reduced: usize, prune_layer: usize) -> u64 {
    let k = prune_layer.min(shape.llm_layers);
    let (d, f, g) = (shape.llm_dim, shape.llm_ffn_dim, shape.llm_gated_ffn);
    n64(k) * layer_flops(n_full, d, f, g) + n64(shape.llm_layers - k) * layer_flops(n_reduced, d, f, g)
}

/// Vision encoder cost of one frame yielding `llm_tokens` merged tokens.
pub fn vit_frame_flops(shape: &ModelShape, llm_tokens: usize) -> u64 {
    let patches = llm_tokens * shape.vit_patches_per_token;
    n64(shape.vit_layers) * layer_flops(patches, shape.vit_dim, shape.vit_ffn_dim, shape.vit_gated_ffn)
}

/// Autoregressive decode of `steps` tokens. Step `s` attends over
/// `context + s + 1` keys, where layers `1..=k` see `n_full` prompt tokens and
/// later layers `n_reduced`. Each step ends with the LM head.
pub fn decode_flops(shape: &ModelShape, n_full: usize, n_reduced: usize, prune_layer: usize, steps: usize) -> u64 {
    let (d, f) = (n64(shape.llm_dim), n64(shape.llm_ffn_dim));
    let k = n64(prune_layer.min(shape.llm_layers));
    let rest = n64(shape.llm_layers) - k;
    let per_layer_fixed = 4 * d * d + ffn_macs(1, d, f, shape.llm_gated_ffn);
    let mut macs = 0u64;
    for s in 0..n64(steps) {
        let early = n64(n_full) + s + 1;
        let late = n64(n_reduced) + s + 1;
        macs += n64(shape.llm_layers) * per_layer_fixed;
        macs += k * 2 * early * d + rest * 2 * late * d;
        macs += d * n64(shape.vocab_size);
    }
    FLOPS_PER_MAC * macs
}

/// Full cost of one agent step. With a schedule, history frame `k` keeps
/// `schedule.budget_for(k)` tokens after layer `prune_layer`; the vision
/// encoder always sees every frame in full.
pub fn trajectory_flops(
    shape: &ModelShape,
    comp: &TokenComposition,
    schedule: Option<&BudgetSchedule>,
    prune_layer: usize,
) -> Result<FlopsBreakdown, CostError> {
    shape.validate()?;
    if schedule.is_some() && (prune_layer == 0 || prune_layer >= shape.llm_layers) {
        return Err(CostError::Shape(format!(
            "prune layer {prune_layer} must satisfy 1 <= k < {}",
            shape.llm_layers
        )));
    }
    let n_full = comp.prompt_tokens();
    let n_reduced = match schedule {
        None => n_full,
        Some(s) => {
            if s.budgets().len() != comp.history_tokens_by_frame.len() {
                return Err(CostError::Shape(format!(
                    "schedule has {} frames, composition has {}",
                    s.budgets().len(),
                    comp.history_tokens_by_frame.len()
                )));
            }
            let mut kept = 0;
            for (i, &size) in comp.history_tokens_by_frame.iter().enumerate() {
                let b = s.budget_for(i as u32 + 1).ok_or_else(|| {
                    CostError::Shape(format!("schedule has no budget for frame {}", i + 1))
                })?;
                if b > size {
                    return Err(CostError::Shape(format!(
                        "budget {b} exceeds frame {} size {size}",
                        i + 1
                    )));
                }
                kept += b;
            }
            comp.current_frame_tokens + comp.text_tokens + kept
        }
    };
    let vit = std::iter::once(comp.current_frame_tokens)
        .chain(comp.history_tokens_by_frame.iter().copied())
        .map(|t| vit_frame_flops(shape, t))
        .sum();
    let prefill = pruned_prefill_flops(shape, n_full, n_reduced, prune_layer);
    let decode = decode_flops(shape, n_full, n_reduced, prune_layer, comp.decode_tokens);
    Ok(FlopsBreakdown::new(vit, prefill, decode))
}

/// Percent reductions from `before` to `after`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Reduction {
    pub prefill_pct: f64,
    pub total_pct: f64,
}

pub fn reduction_report(before: &FlopsBreakdown, after: &FlopsBreakdown) -> Result<Reduction, CostError> {
    if before.total == 0 {
        return Err(CostError::ZeroBaseline("total"));
    }
    if before.prefill == 0 {
        return Err(CostError::ZeroBaseline("prefill"));
    }
    let pct = |b: u64, a: u64| 100.0 * (b as f64 - a as f64) / b as f64;
    Ok(Reduction {
        prefill_pct: pct(before.prefill, after.prefill),
        total_pct: pct(before.total, after.total),
    })
}
