//! Flat `key = value` configuration and the resolved run configuration.
//!
//! Grammar, one entry per line:
//!
//! ```text
//! line    = blank | comment | entry
//! comment = "#" any-text
//! entry   = key "=" value [comment]
//! key     = [a-z] [a-z0-9_]*
//! value   = any text up to "#" or end of line, trimmed, non-empty
//! ```
//!
//! Whitespace around keys and values is ignored. Repeating a key is an
//! error. Lists are comma-separated values.

use std::collections::BTreeMap;

use histprune::budget::{
    allocate_budgets, allocate_composed_budgets, uniform_budgets, BudgetRule, BudgetSchedule, DEFAULT_LAMBDA,
};
use histprune::cost::{ModelShape, TokenComposition};
use histprune::edge::{DEFAULT_EDGE_THRESHOLD, DEFAULT_MIN_EDGE_FRACTION};
use histprune::harness::{PatchRegion, PositionMode, DEFAULT_PRUNE_LAYER};
use histprune::ingest::{ResizePolicy, DEFAULT_PATCH_SIZE};
use histprune::prune::{Pool, SemanticKeep, Strategy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::error::CliError;

pub const MAX_CONFIG_BYTES: usize = 1 << 20;

#[derive(Debug, Error, PartialEq)]
pub enum ConfigError {
    #[error("line {line}: {message}")]
    Syntax { line: usize, message: String },
    #[error("config is larger than {MAX_CONFIG_BYTES} bytes")]
    TooLarge,
}

/// Parses the flat config grammar into ordered key/value pairs.
pub fn parse_config(text: &str) -> Result<BTreeMap<String, String>, ConfigError> {
    if text.len() > MAX_CONFIG_BYTES {
        return Err(ConfigError::TooLarge);
    }
    let mut out = BTreeMap::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        let body = raw.split('#').next().unwrap_or("").trim();
        if body.is_empty() {
            continue;
        }
        let err = |message: String| ConfigError::Syntax { line, message };
        let (key, value) = body
            .split_once('=')
            .ok_or_else(|| err(format!("expected `key = value`, got `{body}`")))?;
        let (key, value) = (key.trim(), value.trim());
        if !valid_key(key) {
            return Err(err(format!("invalid key `{key}`")));
        }
        if value.is_empty() {
            return Err(err(format!("key `{key}` has an empty value")));
        }
        if out.insert(key.to_string(), value.to_string()).is_some() {
            return Err(err(format!("duplicate key `{key}`")));
        }
    }
    Ok(out)
}

fn valid_key(key: &str) -> bool {
    let mut chars = key.chars();
    matches!(chars.next(), Some('a'..='z'))
        && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Command {
    Partition,
    Prune,
    Probe,
    Cost,
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::Partition => "partition",
            Command::Prune => "prune",
            Command::Probe => "probe",
            Command::Cost => "cost",
        }
    }
}

/// How per-frame budgets are derived. Each frame's budget uses its own
/// token count as `n_total`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "rule", rename_all = "snake_case")]
pub enum BudgetSpec {
    Uniform { keep_ratio: f64 },
    TimeDecay { lambda: f64 },
    TimeDecayComposed { lambda: f64, keep_ratio: f64 },
    Explicit { budgets: Vec<usize> },
}

impl BudgetSpec {
    /// Budget for the frame at `distance` holding `size` tokens.
    pub fn budget(&self, size: usize, distance: u32) -> Result<usize, CliError> {
        let from = |s: BudgetSchedule| s.budget_for(distance).unwrap_or(0);
        Ok(match self {
            BudgetSpec::Uniform { keep_ratio } => from(uniform_budgets(size, distance, *keep_ratio)?),
            BudgetSpec::TimeDecay { lambda } => from(allocate_budgets(size, distance, *lambda)?),
            BudgetSpec::TimeDecayComposed { lambda, keep_ratio } => {
                from(allocate_composed_budgets(size, distance, *lambda, *keep_ratio)?)
            }
            BudgetSpec::Explicit { budgets } => *budgets.get(distance as usize - 1).ok_or_else(|| {
                CliError::Usage(format!(
                    "explicit budgets cover {} frames, frame {distance} has none",
                    budgets.len()
                ))
            })?,
        })
    }

    pub fn rule(&self) -> BudgetRule {
        match *self {
            BudgetSpec::Uniform { keep_ratio } => BudgetRule::Uniform { keep_ratio },
            BudgetSpec::TimeDecay { lambda } => BudgetRule::TimeDecay { lambda },
            BudgetSpec::TimeDecayComposed { lambda, keep_ratio } => {
                BudgetRule::TimeDecayComposed { lambda, keep_ratio }
            }
            BudgetSpec::Explicit { .. } => BudgetRule::Explicit,
        }
    }

    /// Schedule for history frames with `sizes[k-1]` tokens at distance `k`.
    /// Budgets above a frame's size are clamped; the flag reports it.
    pub fn schedule(&self, sizes: &[usize], redistribute: bool) -> Result<(BudgetSchedule, bool), CliError> {
        let raw = sizes
            .iter()
            .enumerate()
            .map(|(i, &n)| self.budget(n, i as u32 + 1))
            .collect::<Result<Vec<_>, _>>()?;
        let n_total = sizes.iter().copied().max().unwrap_or(0);
        let mut schedule = BudgetSchedule::explicit(n_total, &raw);
        schedule.rule = self.rule();
        Ok(schedule.fit_to_frames(sizes, redistribute))
    }
}

/// Everything a run needs, after merging defaults, config file and flags.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunConfig {
    pub command: Command,
    pub inputs: Vec<String>,
    pub out: String,
    pub seed: u64,
    pub patch_size: u32,
    pub resize: ResizePolicy,
    pub threshold: f64,
    pub edge_fraction: f64,
    pub strategies: Vec<String>,
    pub budget: BudgetSpec,
    pub tau: u32,
    pub pool: Pool,
    pub redistribute: bool,
    pub layer: usize,
    pub layers: usize,
    pub embed_dim: usize,
    pub heads: usize,
    pub positions: PositionMode,
    pub text_tokens: usize,
    pub text_top_m: usize,
    pub recycle: bool,
    pub pivots: usize,
    pub attention_csv: bool,
    pub grid_rows: u32,
    pub grid_cols: u32,
    pub target: PatchRegion,
    pub seeds: u32,
    pub shape_name: Option<String>,
    pub shape: Option<ModelShape>,
    pub composition_name: String,
    pub composition: TokenComposition,
}

pub const SHAPE_PRESET: &str = "qwen2vl-2b-like";
pub const COMPOSITION_PRESET: &str = "aitw-like";

const KEYS: &[&str] = &[
    "inputs",
    "out",
    "seed",
    "patch_size",
    "resize",
    "threshold",
    "edge_fraction",
    "strategy",
    "lambda",
    "keep_ratio",
    "budgets",
    "tau",
    "pool",
    "redistribute",
    "layer",
    "layers",
    "embed_dim",
    "heads",
    "positions",
    "text_tokens",
    "text_top_m",
    "recycle",
    "pivots",
    "attention_csv",
    "grid",
    "target",
    "seeds",
    "shape",
    "llm_layers",
    "llm_dim",
    "llm_ffn_dim",
    "llm_gated_ffn",
    "vit_layers",
    "vit_dim",
    "vit_ffn_dim",
    "vit_gated_ffn",
    "vit_patches_per_token",
    "vocab_size",
    "composition",
    "current_frame_tokens",
    "history_tokens",
    "decode_tokens",
];

const SHAPE_KEYS: &[&str] = &[
    "llm_layers",
    "llm_dim",
    "llm_ffn_dim",
    "llm_gated_ffn",
    "vit_layers",
    "vit_dim",
    "vit_ffn_dim",
    "vit_gated_ffn",
    "vit_patches_per_token",
    "vocab_size",
];

/// Typed access to merged settings.
struct Settings<'a>(&'a BTreeMap<String, String>);

impl Settings<'_> {
    fn raw(&self, key: &str) -> Option<&str> {
        self.0.get(key).map(String::as_str)
    }

    fn get<T: std::str::FromStr>(&self, key: &str) -> Result<Option<T>, CliError> {
        self.raw(key)
            .map(|v| {
                v.parse::<T>()
                    .map_err(|_| CliError::Usage(format!("cannot parse `{v}` for `{key}`")))
            })
            .transpose()
    }

    fn or<T: std::str::FromStr>(&self, key: &str, default: T) -> Result<T, CliError> {
        Ok(self.get(key)?.unwrap_or(default))
    }

    fn list<T: std::str::FromStr>(&self, key: &str) -> Result<Option<Vec<T>>, CliError> {
        self.raw(key)
            .map(|v| {
                v.split(',')
                    .map(str::trim)
                    .filter(|s| !s.is_empty())
                    .map(|s| {
                        s.parse::<T>()
                            .map_err(|_| CliError::Usage(format!("cannot parse `{s}` in `{key}`")))
                    })
                    .collect()
            })
            .transpose()
    }
}

fn parse_resize(value: &str, patch: u32) -> Result<ResizePolicy, CliError> {
    let parts: Vec<&str> = value.split(':').map(str::trim).collect();
    let num = |s: &str| {
        s.parse::<u64>()
            .map_err(|_| CliError::Usage(format!("cannot parse resize `{value}`")))
    };
    let policy = match parts.as_slice() {
        ["long_side", t] => ResizePolicy::LongSide {
            target: num(t)? as u32,
            patch_multiple: patch,
        },
        ["smart"] => match ResizePolicy::smart_default() {
            ResizePolicy::SmartResize {
                min_pixels, max_pixels, ..
            } => ResizePolicy::SmartResize {
                min_pixels,
                max_pixels,
                patch_multiple: patch,
            },
            other => other,
        },
        ["smart", lo, hi] => ResizePolicy::SmartResize {
            min_pixels: num(lo)?,
            max_pixels: num(hi)?,
            patch_multiple: patch,
        },
        _ => {
            return Err(CliError::Usage(format!(
                "resize must be `long_side:N`, `smart` or `smart:MIN:MAX`, got `{value}`"
            )))
        }
    };
    policy.validate()?;
    Ok(policy)
}

fn parse_bool(key: &str, value: Option<&str>, default: bool) -> Result<bool, CliError> {
    match value {
        None => Ok(default),
        Some("true" | "yes" | "1") => Ok(true),
        Some("false" | "no" | "0") => Ok(false),
        Some(v) => Err(CliError::Usage(format!("`{key}` expects true/false, got `{v}`"))),
    }
}

/// Strategy names accepted by `prune` and `probe`.
pub const STRATEGY_NAMES: &[&str] = &[
    "random",
    "attention_rank",
    "text_guided",
    "diversity",
    "duplication",
    "keep_fg",
    "keep_bg",
    "keep_all",
    "keep_target_only",
];

impl RunConfig {
    /// Resolves `settings` (config file entries overlaid by flags).
    pub fn resolve(command: Command, settings: &BTreeMap<String, String>) -> Result<Self, CliError> {
        if let Some(k) = settings.keys().find(|k| !KEYS.contains(&k.as_str())) {
            return Err(CliError::Usage(format!("unknown key `{k}`")));
        }
        let s = Settings(settings);
        let patch_size = s.or("patch_size", DEFAULT_PATCH_SIZE)?;
        if patch_size == 0 {
            return Err(CliError::Usage("patch_size must be positive".into()));
        }
        let resize = parse_resize(s.raw("resize").unwrap_or("long_side:512"), patch_size)?;
        let threshold = s.or("threshold", DEFAULT_EDGE_THRESHOLD)?;
        let edge_fraction = s.or("edge_fraction", DEFAULT_MIN_EDGE_FRACTION)?;
        if !threshold.is_finite() || !(0.0..1.0).contains(&edge_fraction) {
            return Err(CliError::Usage(
                "threshold must be finite and edge_fraction in [0, 1)".into(),
            ));
        }

        let default_strategy = match command {
            Command::Probe => "keep_target_only,random",
            _ => "random",
        };
        let strategies: Vec<String> = s
            .raw("strategy")
            .unwrap_or(default_strategy)
            .split(',')
            .map(|v| v.trim().to_string())
            .filter(|v| !v.is_empty())
            .collect();
        if let Some(bad) = strategies.iter().find(|n| !STRATEGY_NAMES.contains(&n.as_str())) {
            return Err(CliError::Usage(format!(
                "unknown strategy `{bad}`; expected one of {}",
                STRATEGY_NAMES.join(", ")
            )));
        }
        if strategies.is_empty() || (command == Command::Prune && strategies.len() != 1) {
            return Err(CliError::Usage(format!(
                "{} takes {} strategy",
                command.name(),
                if command == Command::Prune { "exactly one" } else { "at least one" }
            )));
        }

        let lambda: Option<f64> = s.get("lambda")?;
        let keep_ratio: Option<f64> = s.get("keep_ratio")?;
        let budgets: Option<Vec<usize>> = s.list("budgets")?;
        let budget = match (budgets, lambda, keep_ratio) {
            (Some(b), None, None) => BudgetSpec::Explicit { budgets: b },
            (Some(_), _, _) => {
                return Err(CliError::Usage("`budgets` excludes `lambda` and `keep_ratio`".into()))
            }
            (None, Some(lambda), Some(keep_ratio)) => BudgetSpec::TimeDecayComposed { lambda, keep_ratio },
            (None, Some(lambda), None) => BudgetSpec::TimeDecay { lambda },
            (None, None, Some(keep_ratio)) => BudgetSpec::Uniform { keep_ratio },
            (None, None, None) if command == Command::Cost => BudgetSpec::TimeDecay { lambda: DEFAULT_LAMBDA },
            (None, None, None) => BudgetSpec::Uniform { keep_ratio: 0.5 },
        };
        // Validate domains once, up front.
        budget.budget(1, 1)?;

        let pool = match s.raw("pool").unwrap_or("per_frame") {
            "per_frame" => Pool::PerFrame,
            "global" => Pool::Global,
            v => return Err(CliError::Usage(format!("pool must be per_frame or global, got `{v}`"))),
        };
        let positions = match s.raw("positions").unwrap_or("preserve") {
            "preserve" => PositionMode::Preserve,
            "contiguous" => PositionMode::Contiguous,
            v => {
                return Err(CliError::Usage(format!(
                    "positions must be preserve or contiguous, got `{v}`"
                )))
            }
        };

        let (grid_rows, grid_cols) = match s.raw("grid") {
            None => (16, 16),
            Some(v) => {
                let (r, c) = v
                    .split_once('x')
                    .ok_or_else(|| CliError::Usage(format!("grid must be ROWSxCOLS, got `{v}`")))?;
                let p = |x: &str| {
                    x.trim()
                        .parse::<u32>()
                        .map_err(|_| CliError::Usage(format!("grid must be ROWSxCOLS, got `{v}`")))
                };
                (p(r)?, p(c)?)
            }
        };
        let target = match s.list::<u32>("target")? {
            None => PatchRegion {
                row: 6,
                col: 11,
                rows: 4,
                cols: 4,
            },
            Some(v) if v.len() == 4 => PatchRegion {
                row: v[0],
                col: v[1],
                rows: v[2],
                cols: v[3],
            },
            Some(_) => return Err(CliError::Usage("target must be ROW,COL,ROWS,COLS".into())),
        };

        let shape_name = s.raw("shape").map(str::to_string);
        let has_inline_shape = SHAPE_KEYS.iter().any(|k| settings.contains_key(*k));
        let shape = match (shape_name.as_deref(), has_inline_shape, command) {
            (Some(SHAPE_PRESET), _, _) | (None, false, Command::Prune) => Some(ModelShape::qwen2vl_2b_like()),
            (Some("custom"), true, _) | (None, true, _) => Some(ModelShape::qwen2vl_2b_like()),
            (Some(other), _, _) => {
                return Err(CliError::Usage(format!(
                    "unknown shape `{other}`; use `{SHAPE_PRESET}` or `custom` with inline fields"
                )))
            }
            (None, false, _) => None,
        };
        let shape = match shape {
            None => None,
            Some(mut m) => {
                m.llm_layers = s.or("llm_layers", m.llm_layers)?;
                m.llm_dim = s.or("llm_dim", m.llm_dim)?;
                m.llm_ffn_dim = s.or("llm_ffn_dim", m.llm_ffn_dim)?;
                m.llm_gated_ffn = parse_bool("llm_gated_ffn", s.raw("llm_gated_ffn"), m.llm_gated_ffn)?;
                m.vit_layers = s.or("vit_layers", m.vit_layers)?;
                m.vit_dim = s.or("vit_dim", m.vit_dim)?;
                m.vit_ffn_dim = s.or("vit_ffn_dim", m.vit_ffn_dim)?;
                m.vit_gated_ffn = parse_bool("vit_gated_ffn", s.raw("vit_gated_ffn"), m.vit_gated_ffn)?;
                m.vit_patches_per_token = s.or("vit_patches_per_token", m.vit_patches_per_token)?;
                m.vocab_size = s.or("vocab_size", m.vocab_size)?;
                m.validate()?;
                Some(m)
            }
        };
        if command == Command::Cost && shape.is_none() {
            return Err(CliError::Usage(format!(
                "cost needs a model shape: set `shape = {SHAPE_PRESET}` or inline llm_*/vit_* fields"
            )));
        }

        let composition_name = s.raw("composition").unwrap_or(COMPOSITION_PRESET).to_string();
        let mut composition = match composition_name.as_str() {
            COMPOSITION_PRESET | "custom" => TokenComposition::aitw_like(),
            other => {
                return Err(CliError::Usage(format!(
                    "unknown composition `{other}`; use `{COMPOSITION_PRESET}` or `custom`"
                )))
            }
        };
        composition.current_frame_tokens = s.or("current_frame_tokens", composition.current_frame_tokens)?;
        if let Some(h) = s.list("history_tokens")? {
            composition.history_tokens_by_frame = h;
        }
        composition.decode_tokens = s.or("decode_tokens", composition.decode_tokens)?;
        let default_text = match command {
            Command::Cost => composition.text_tokens,
            _ => 16,
        };
        let text_tokens = s.or("text_tokens", default_text)?;
        composition.text_tokens = text_tokens;

        let inputs = s
            .raw("inputs")
            .map(|v| {
                v.split(',')
                    .map(|p| p.trim().to_string())
                    .filter(|p| !p.is_empty())
                    .collect()
            })
            .unwrap_or_default();

        Ok(RunConfig {
            command,
            inputs,
            out: s.raw("out").unwrap_or("out").to_string(),
            seed: s.or("seed", 0)?,
            patch_size,
            resize,
            threshold,
            edge_fraction,
            strategies,
            budget,
            tau: s.or("tau", 4)?,
            pool,
            redistribute: parse_bool("redistribute", s.raw("redistribute"), false)?,
            layer: s.or("layer", DEFAULT_PRUNE_LAYER)?,
            layers: s.or("layers", 4)?,
            embed_dim: s.or("embed_dim", 64)?,
            heads: s.or("heads", 4)?,
            positions,
            text_tokens,
            text_top_m: s.or("text_top_m", 4)?,
            recycle: parse_bool("recycle", s.raw("recycle"), false)?,
            pivots: s.or("pivots", 4)?,
            attention_csv: parse_bool("attention_csv", s.raw("attention_csv"), false)?,
            grid_rows,
            grid_cols,
            target,
            seeds: s.or("seeds", 100)?,
            shape_name,
            shape,
            composition_name,
            composition,
        })
    }

    /// Core strategy for a validated strategy name.
    pub fn strategy(&self, name: &str) -> Result<Strategy, CliError> {
        Ok(match name {
            "random" => Strategy::Random,
            "attention_rank" => Strategy::AttentionRank,
            "text_guided" => Strategy::TextGuided {
                text_top_m: self.text_top_m,
                recycle: self.recycle,
            },
            "diversity" => Strategy::Diversity,
            "duplication" => Strategy::Duplication {
                pivot_count: self.pivots,
            },
            "keep_fg" | "keep_target_only" => Strategy::Semantic {
                keep: SemanticKeep::ForegroundOnly,
            },
            "keep_bg" => Strategy::Semantic {
                keep: SemanticKeep::BackgroundOnly,
            },
            "keep_all" => Strategy::Semantic {
                keep: SemanticKeep::All,
            },
            other => return Err(CliError::Usage(format!("unknown strategy `{other}`"))),
        })
    }
}
