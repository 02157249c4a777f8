//! Historical-screenshot token pruning for GUI agents: screenshot ingest,
//! edge-based patch partition, per-frame budgets, selection strategies, a
//! rotary attention harness and an analytic cost model.

pub mod budget;
pub mod cost;
pub mod edge;
pub mod harness;
pub mod ingest;
pub mod prune;

pub use budget::{allocate_budgets, truncate_history, uniform_budgets, BudgetSchedule, FrameSequence};
pub use cost::{prefill_flops, reduction_report, trajectory_flops, FlopsBreakdown, ModelShape, TokenComposition};
pub use edge::{classify_patches, sobel, PatchLabel, PatchLabels};
pub use harness::{rope_rotate, spatial_probe, Harness, HarnessConfig, PruneSpec};
pub use ingest::{build_grid, resize, PatchGrid, RawImage, ResizePolicy};
pub use prune::{PruneResult, Strategy, TokenTable};
