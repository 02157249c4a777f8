//! Per-frame token budgets and history truncation.
//!
//! Frame distance `k` counts backwards from the current step: `k = 1` is the
//! most recent history screenshot. The current frame is never budgeted.

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Decay factor used by the time-decay schedule unless overridden.
pub const DEFAULT_LAMBDA: f64 = 0.5;

#[derive(Debug, Error, PartialEq)]
pub enum BudgetError {
    #[error("invalid parameter: {0}")]
    InvalidParameter(String),
}

/// How the per-frame budgets were derived.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BudgetRule {
    /// `floor(n_total * lambda^k)`.
    TimeDecay { lambda: f64 },
    /// `floor(n_total * keep_ratio * lambda^k)`: decay composed with a uniform cap.
    TimeDecayComposed { lambda: f64, keep_ratio: f64 },
    /// `floor(n_total * keep_ratio)` for every frame.
    Uniform { keep_ratio: f64 },
    /// Budgets set directly.
    Explicit,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameBudget {
    pub distance: u32,
    pub retained: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BudgetSchedule {
    pub tau: u32,
    pub n_total: usize,
    pub rule: BudgetRule,
    budgets: Vec<FrameBudget>,
}

/// `floor(x)` that tolerates representation error just below an integer.
fn floor_tolerant(x: f64) -> usize {
    let nearest = x.round();
    if (x - nearest).abs() <= 1e-9 * nearest.abs().max(1.0) {
        nearest.max(0.0) as usize
    } else {
        x.floor().max(0.0) as usize
    }
}

fn check_lambda(lambda: f64) -> Result<(), BudgetError> {
    if !(lambda > 0.0 && lambda <= 1.0) {
        return Err(BudgetError::InvalidParameter(format!(
            "lambda must be in (0, 1], got {lambda}"
        )));
    }
    Ok(())
}

fn check_ratio(keep_ratio: f64) -> Result<(), BudgetError> {
    if !(0.0..=1.0).contains(&keep_ratio) {
        return Err(BudgetError::InvalidParameter(format!(
            "keep_ratio must be in [0, 1], got {keep_ratio}"
        )));
    }
    Ok(())
}

/// Time-decay budgets: frame `k` keeps `floor(n_total * lambda^k)` tokens.
/// `lambda^k` is evaluated directly, not by iterated flooring.
pub fn allocate_budgets(n_total: usize, tau: u32, lambda: f64) -> Result<BudgetSchedule, BudgetError> {
    check_lambda(lambda)?;
    let budgets = (1..=tau)
        .map(|k| FrameBudget {
            distance: k,
            retained: floor_tolerant(n_total as f64 * lambda.powi(k as i32)).min(n_total),
        })
        .collect();
    Ok(BudgetSchedule {
        tau,
        n_total,
        rule: BudgetRule::TimeDecay { lambda },
        budgets,
    })
}

/// Time decay applied on top of a uniform keep ratio.
pub fn allocate_composed_budgets(
    n_total: usize,
    tau: u32,
    lambda: f64,
    keep_ratio: f64,
) -> Result<BudgetSchedule, BudgetError> {
    check_lambda(lambda)?;
    check_ratio(keep_ratio)?;
    let budgets = (1..=tau)
        .map(|k| FrameBudget {
            distance: k,
            retained: floor_tolerant(n_total as f64 * keep_ratio * lambda.powi(k as i32))
                .min(n_total),
        })
        .collect();
    Ok(BudgetSchedule {
        tau,
        n_total,
        rule: BudgetRule::TimeDecayComposed { lambda, keep_ratio },
        budgets,
    })
}

/// Same budget `floor(n_total * keep_ratio)` for each of `tau` frames.
pub fn uniform_budgets(n_total: usize, tau: u32, keep_ratio: f64) -> Result<BudgetSchedule, BudgetError> {
    check_ratio(keep_ratio)?;
    let per_frame = floor_tolerant(n_total as f64 * keep_ratio).min(n_total);
    Ok(BudgetSchedule {
        tau,
        n_total,
        rule: BudgetRule::Uniform { keep_ratio },
        budgets: (1..=tau)
            .map(|distance| FrameBudget {
                distance,
                retained: per_frame,
            })
            .collect(),
    })
}

impl BudgetSchedule {
    /// Explicit budgets for frame distances `1..=budgets.len()`.
    pub fn explicit(n_total: usize, budgets: &[usize]) -> Self {
        Self {
            tau: budgets.len() as u32,
            n_total,
            rule: BudgetRule::Explicit,
            budgets: budgets
                .iter()
                .enumerate()
                .map(|(i, &retained)| FrameBudget {
                    distance: i as u32 + 1,
                    retained,
                })
                .collect(),
        }
    }

    /// Every frame keeps all `n_total` tokens.
    pub fn full(n_total: usize, tau: u32) -> Self {
        Self::explicit(n_total, &vec![n_total; tau as usize])
    }

    pub fn budgets(&self) -> &[FrameBudget] {
        &self.budgets
    }

    pub fn retained(&self) -> Vec<usize> {
        self.budgets.iter().map(|b| b.retained).collect()
    }

    pub fn budget_for(&self, distance: u32) -> Option<usize> {
        self.budgets
            .iter()
            .find(|b| b.distance == distance)
            .map(|b| b.retained)
    }

    pub fn total(&self) -> usize {
        self.budgets.iter().map(|b| b.retained).sum()
    }

    /// Drops budgets beyond the `available` most recent frames.
    pub fn truncated(&self, available: usize) -> Self {
        let mut out = self.clone();
        out.budgets.retain(|b| (b.distance as usize) <= available);
        out
    }

    /// Fits budgets to actual per-frame token counts (`counts[k-1]` is the
    /// size of frame `k`). Frames smaller than their budget keep everything.
    /// With `redistribute`, the surplus goes to the nearest frames first.
    /// Returns the fitted schedule and whether any budget was clamped.
    pub fn fit_to_frames(&self, counts: &[usize], redistribute: bool) -> (Self, bool) {
        let mut out = self.truncated(counts.len());
        let mut clamped = false;
        let mut surplus = 0usize;
        for b in out.budgets.iter_mut() {
            let size = counts[b.distance as usize - 1];
            if b.retained > size {
                surplus += b.retained - size;
                b.retained = size;
                clamped = true;
            }
        }
        if redistribute {
            for b in out.budgets.iter_mut() {
                if surplus == 0 {
                    break;
                }
                let room = counts[b.distance as usize - 1] - b.retained;
                let give = room.min(surplus);
                b.retained += give;
                surplus -= give;
            }
        }
        (out, clamped)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct HistoryFrame {
    pub distance: u32,
    pub tokens: usize,
}

/// History frames ordered by distance `1..=len`, plus the current frame.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct FrameSequence {
    pub current_tokens: usize,
    history: Vec<HistoryFrame>,
}

impl FrameSequence {
    /// `history_tokens[0]` is the most recent history frame (distance 1).
    pub fn new(current_tokens: usize, history_tokens: &[usize]) -> Self {
        Self {
            current_tokens,
            history: history_tokens
                .iter()
                .enumerate()
                .map(|(i, &tokens)| HistoryFrame {
                    distance: i as u32 + 1,
                    tokens,
                })
                .collect(),
        }
    }

    pub fn history(&self) -> &[HistoryFrame] {
        &self.history
    }

    pub fn history_counts(&self) -> Vec<usize> {
        self.history.iter().map(|f| f.tokens).collect()
    }
}

/// Keeps only the `tau` most recent history frames.
pub fn truncate_history(frames: &FrameSequence, tau: u32) -> FrameSequence {
    let keep = (tau as usize).min(frames.history.len());
    FrameSequence::new(
        frames.current_tokens,
        &frames.history_counts()[..keep],
    )
}
