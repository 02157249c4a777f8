//! JSON report written by every subcommand.

use histprune::budget::BudgetRule;
use histprune::cost::{FlopsBreakdown, ModelShape, Reduction, TokenComposition};
use histprune::harness::{HarnessConfig, PatchRegion};
use histprune::ingest::PatchGrid;
use histprune::prune::SpatialBias;
use serde::{Deserialize, Serialize};

use crate::config::RunConfig;

pub const TOOL: &str = "histprune";
pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Report {
    pub tool: String,
    pub version: String,
    /// Seconds since the Unix epoch. The only field allowed to differ
    /// between identical runs.
    pub timestamp: u64,
    pub command: String,
    pub config: RunConfig,
    pub conventions: Conventions,
    pub frames: Vec<FrameReport>,
    pub errors: Vec<FileError>,
    pub prune: Option<PruneReport>,
    pub probe: Option<ProbeReport>,
    pub cost: Option<CostReport>,
}

impl Report {
    pub fn from_json(text: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(text)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report types always serialize")
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Conventions {
    pub resize_rounding: String,
    pub grayscale: String,
    pub flops: String,
    pub embedding: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FileError {
    pub path: String,
    pub message: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FrameReport {
    pub path: String,
    pub original_width: u32,
    pub original_height: u32,
    pub grid: PatchGrid,
    pub fg_fraction: f64,
    pub bg_fraction: f64,
    /// Row-major patch labels, `1` foreground and `0` background.
    pub labels: String,
    pub overlay: Option<String>,
    pub resized: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PrunedFrame {
    pub path: String,
    pub distance: u32,
    pub tokens: usize,
    pub budget: usize,
    pub kept: usize,
    /// Kept patch indices within the frame, ascending.
    pub kept_indices: Vec<usize>,
    pub spatial_bias: Option<SpatialBias>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PruneReport {
    pub strategy: String,
    pub budget_rule: BudgetRule,
    pub embedding: String,
    pub harness: HarnessConfig,
    pub current_frame: String,
    pub current_tokens: usize,
    pub text_tokens: usize,
    pub history: Vec<PrunedFrame>,
    /// History frames older than `tau`, dropped before pruning.
    pub truncated: Vec<String>,
    pub clamped: bool,
    pub warnings: Vec<String>,
    pub shape: ModelShape,
    pub flops_unpruned: FlopsBreakdown,
    pub flops_pruned: FlopsBreakdown,
    pub reduction: Reduction,
    pub attention_csv: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeRow {
    pub strategy: String,
    pub seed: u64,
    pub pre_centroid: [f64; 2],
    pub post_centroid: [f64; 2],
    pub pre_quantile: [f64; 2],
    pub post_quantile: [f64; 2],
    pub rank_shift: [f64; 2],
    pub centroid_shift: f64,
    pub kept_tokens: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeSummary {
    pub strategy: String,
    pub runs: usize,
    pub mean_centroid_shift: f64,
    /// Mean centroid shift over the grid diagonal.
    pub mean_centroid_shift_rel: f64,
    pub mean_post_quantile: [f64; 2],
    pub mean_abs_rank_shift: [f64; 2],
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeReport {
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub target: PatchRegion,
    pub harness: HarnessConfig,
    pub csv: String,
    pub rows: Vec<ProbeRow>,
    pub summary: Vec<ProbeSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReport {
    pub shape_name: String,
    pub shape: ModelShape,
    pub composition_name: String,
    pub composition: TokenComposition,
    pub prune_layer: usize,
    pub schedule_rule: BudgetRule,
    pub schedule: Vec<usize>,
    pub uniform_baseline_schedule: Vec<usize>,
    pub without_history: FlopsBreakdown,
    pub with_history: FlopsBreakdown,
    pub with_schedule: FlopsBreakdown,
    pub with_uniform_baseline: FlopsBreakdown,
    /// `with_history.total / without_history.total`.
    pub history_total_ratio: f64,
    pub history_prefill_ratio: f64,
    pub reduction_vs_full: Reduction,
    pub reduction_vs_uniform: Reduction,
    pub reference: CostReference,
    pub assumptions: Vec<String>,
}

/// Published figures the ratios are compared against.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CostReference {
    pub prefill_reduction_pct: f64,
    pub history_total_ratio: f64,
}
