//! The four subcommand pipelines.

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use histprune::budget::BudgetSchedule;
use histprune::cost::{reduction_report, trajectory_flops, TokenComposition, CONVENTION};
use histprune::edge::{classify_patches, overlay_background, partition_stats, sobel, PatchLabel, PatchLabels};
use histprune::harness::{
    mrope_positions, Harness, HarnessConfig, Position, ProbeScene, PruneSpec, RopeMode, Segment, TokenInfo,
    TokenRole, TokenTensor, DEFAULT_ROPE_BASE,
};
use histprune::ingest::{build_grid, load_png, resize, save_png, PatchGrid, RawImage};
use histprune::prune::{spatial_bias, PruneResult, Strategy, TokenLabel, TokenTable};

use crate::config::{Command, RunConfig};
use crate::error::CliError;
use crate::report::{
    Conventions, CostReference, CostReport, FileError, FrameReport, ProbeReport, ProbeRow, ProbeSummary,
    PruneReport, PrunedFrame, Report, TOOL, VERSION,
};
use crate::stub::{StubEncoder, STUB_LABEL};

pub const REPORT_FILE: &str = "report.json";
pub const PROBE_CSV: &str = "probe.csv";
pub const ATTENTION_CSV: &str = "attention.csv";
/// Share of each history frame kept by the baseline the schedule is compared to.
pub const UNIFORM_BASELINE_RATIO: f64 = 0.5;
const REFERENCE_PREFILL_REDUCTION_PCT: f64 = 20.5;
const REFERENCE_HISTORY_RATIO: f64 = 9.29 / 2.45;

/// Runs the configured subcommand and writes `report.json` into `out`.
pub fn execute(config: &RunConfig) -> Result<Report, CliError> {
    let report = match config.command {
        Command::Partition => run_partition(config)?,
        Command::Prune => run_prune(config)?,
        Command::Probe => run_probe(config)?,
        Command::Cost => run_cost(config)?,
    };
    write_report(config, &report)?;
    Ok(report)
}

pub fn write_report(config: &RunConfig, report: &Report) -> Result<(), CliError> {
    let out = Path::new(&config.out);
    fs::create_dir_all(out)?;
    fs::write(out.join(REPORT_FILE), report.to_json() + "\n")?;
    Ok(())
}

fn now_unix() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_secs())
        .unwrap_or(0)
}

fn empty_report(config: &RunConfig) -> Report {
    Report {
        tool: TOOL.into(),
        version: VERSION.into(),
        timestamp: now_unix(),
        command: config.command.name().into(),
        config: config.clone(),
        conventions: Conventions {
            resize_rounding: "aspect-preserving scale, then each side rounded to the nearest multiple of the patch size (at least one)".into(),
            grayscale: "round(0.299 R + 0.587 G + 0.114 B)".into(),
            flops: CONVENTION.into(),
            embedding: STUB_LABEL.into(),
        },
        frames: Vec::new(),
        errors: Vec::new(),
        prune: None,
        probe: None,
        cost: None,
    }
}

/// PNG paths named by `config.inputs`: directories contribute their `*.png`
/// files. Sorted by path.
pub fn collect_inputs(config: &RunConfig) -> Result<(Vec<PathBuf>, Vec<FileError>), CliError> {
    let mut paths = Vec::new();
    let mut errors = Vec::new();
    for input in &config.inputs {
        let p = PathBuf::from(input);
        if p.is_dir() {
            match fs::read_dir(&p) {
                Ok(entries) => {
                    for e in entries.flatten() {
                        let path = e.path();
                        let is_png = path
                            .extension()
                            .and_then(|x| x.to_str())
                            .is_some_and(|x| x.eq_ignore_ascii_case("png"));
                        if is_png && path.is_file() {
                            paths.push(path);
                        }
                    }
                }
                Err(e) => errors.push(FileError {
                    path: input.clone(),
                    message: e.to_string(),
                }),
            }
        } else {
            paths.push(p);
        }
    }
    paths.sort();
    paths.dedup();
    if paths.is_empty() {
        return Err(CliError::Data("no PNG inputs found".into()));
    }
    Ok((paths, errors))
}

struct Frame {
    path: String,
    original: (u32, u32),
    image: RawImage,
    grid: PatchGrid,
    energy: Vec<f64>,
    labels: PatchLabels,
}

fn load_frame(path: &Path, config: &RunConfig) -> Result<Frame, CliError> {
    let raw = load_png(path)?;
    let image = resize(&raw, &config.resize)?;
    let grid = build_grid(&image, config.patch_size)?;
    let edges = sobel(&image.to_gray())?;
    let labels = classify_patches(&edges, &grid, config.threshold, config.edge_fraction)?;
    let energy = edges.patch_energy(&grid)?;
    Ok(Frame {
        path: path.display().to_string(),
        original: (raw.width(), raw.height()),
        image,
        grid,
        energy,
        labels,
    })
}

/// Loads every input, recording per-file failures instead of aborting.
fn load_frames(config: &RunConfig) -> Result<(Vec<Frame>, Vec<FileError>), CliError> {
    let (paths, mut errors) = collect_inputs(config)?;
    let mut frames = Vec::new();
    for p in &paths {
        match load_frame(p, config) {
            Ok(f) => frames.push(f),
            Err(e @ (CliError::Data(_) | CliError::Internal(_))) => errors.push(FileError {
                path: p.display().to_string(),
                message: e.to_string(),
            }),
            Err(e) => return Err(e),
        }
    }
    if frames.is_empty() {
        return Err(CliError::Data(format!(
            "none of the {} inputs could be read",
            paths.len()
        )));
    }
    Ok((frames, errors))
}

fn frame_report(frame: &Frame) -> FrameReport {
    let stats = partition_stats(&frame.labels);
    FrameReport {
        path: frame.path.clone(),
        original_width: frame.original.0,
        original_height: frame.original.1,
        grid: frame.grid,
        fg_fraction: stats.fg_fraction,
        bg_fraction: stats.bg_fraction,
        labels: frame
            .labels
            .to_bits()
            .iter()
            .map(|&b| if b == 1 { '1' } else { '0' })
            .collect(),
        overlay: None,
        resized: None,
    }
}

fn stem(path: &str) -> String {
    Path::new(path)
        .file_stem()
        .and_then(|s| s.to_str())
        .unwrap_or("frame")
        .to_string()
}

pub fn run_partition(config: &RunConfig) -> Result<Report, CliError> {
    let (frames, errors) = load_frames(config)?;
    let out = Path::new(&config.out);
    fs::create_dir_all(out.join("overlays"))?;
    fs::create_dir_all(out.join("resized"))?;
    let mut report = empty_report(config);
    report.errors = errors;
    for (i, f) in frames.iter().enumerate() {
        let name = format!("{i:03}_{}.png", stem(&f.path));
        let overlay = format!("overlays/{name}");
        let resized = format!("resized/{name}");
        save_png(&overlay_background(&f.image, &f.labels), &out.join(&overlay))?;
        save_png(&f.image, &out.join(&resized))?;
        let mut fr = frame_report(f);
        fr.overlay = Some(overlay);
        fr.resized = Some(resized);
        report.frames.push(fr);
    }
    Ok(report)
}

fn harness_config(config: &RunConfig) -> Result<HarnessConfig, CliError> {
    if config.heads == 0 || !config.embed_dim.is_multiple_of(2 * config.heads) {
        return Err(CliError::Usage(format!(
            "embed_dim {} must be a positive multiple of 2*heads ({})",
            config.embed_dim, config.heads
        )));
    }
    let cfg = HarnessConfig {
        layers: config.layers,
        embed_dim: config.embed_dim,
        heads: config.heads,
        prune_layer: config.layer,
        rope: RopeMode::mrope_for(config.embed_dim / config.heads),
        rope_base: DEFAULT_ROPE_BASE,
        positions: config.positions,
        seed: config.seed,
    };
    cfg.validate()?;
    Ok(cfg)
}

fn token_label(l: PatchLabel) -> TokenLabel {
    match l {
        PatchLabel::Foreground => TokenLabel::Foreground,
        PatchLabel::Background => TokenLabel::Background,
    }
}

pub fn run_prune(config: &RunConfig) -> Result<Report, CliError> {
    let name = &config.strategies[0];
    let strategy = config.strategy(name)?;
    if strategy.needs_attention() && config.text_tokens == 0 {
        return Err(CliError::Usage(format!("strategy `{name}` needs text_tokens > 0")));
    }
    let harness = Harness::new(harness_config(config)?)?;
    let (mut frames, errors) = load_frames(config)?;
    let mut report = empty_report(config);
    report.errors = errors;
    report.frames = frames.iter().map(frame_report).collect();

    let current = frames.pop().expect("load_frames returns at least one frame");
    // history[k-1] is the frame at distance k.
    let mut history: Vec<Frame> = frames.into_iter().rev().collect();
    let truncated: Vec<String> = history
        .split_off(history.len().min(config.tau as usize))
        .into_iter()
        .map(|f| f.path)
        .collect();
    let sizes: Vec<usize> = history.iter().map(|f| f.grid.len()).collect();
    let (schedule, clamped) = config.budget.schedule(&sizes, config.redistribute)?;
    let mut warnings = Vec::new();
    for (i, &n) in sizes.iter().enumerate() {
        let wanted = config.budget.budget(n, i as u32 + 1)?;
        if wanted > n {
            warnings.push(format!(
                "frame at distance {} has {n} tokens, budget {wanted} clamped",
                i + 1
            ));
        }
    }

    // Sequence order: oldest history frame first, then current, then text.
    let encoder = StubEncoder::new(config.embed_dim, config.seed);
    let mut segments = Vec::new();
    let mut hidden = Vec::new();
    let mut roles_labels = Vec::new();
    for (k, f) in history.iter().enumerate().rev() {
        segments.push(Segment::Image {
            rows: f.grid.rows,
            cols: f.grid.cols,
        });
        hidden.extend(encoder.encode(&f.image, &f.energy, &f.grid));
        for p in 0..f.grid.len() {
            let (row, col) = f.grid.coords(p);
            let role = TokenRole::History {
                frame: k as u32 + 1,
                row,
                col,
            };
            roles_labels.push((role, token_label(f.labels.labels()[p])));
        }
    }
    segments.push(Segment::Image {
        rows: current.grid.rows,
        cols: current.grid.cols,
    });
    hidden.extend(encoder.encode(&current.image, &current.energy, &current.grid));
    for p in 0..current.grid.len() {
        let (row, col) = current.grid.coords(p);
        roles_labels.push((TokenRole::Current { row, col }, token_label(current.labels.labels()[p])));
    }
    segments.push(Segment::Text {
        len: config.text_tokens as u32,
    });
    hidden.extend(encoder.text(config.text_tokens));
    for _ in 0..config.text_tokens {
        roles_labels.push((TokenRole::Text, TokenLabel::Unlabeled));
    }
    let info: Vec<TokenInfo> = roles_labels
        .into_iter()
        .zip(mrope_positions(&segments))
        .map(|((role, label), p)| TokenInfo {
            role,
            position: Position::Multi(p),
            label,
        })
        .collect();
    let tensor = TokenTensor::new(config.embed_dim, hidden, info)?;
    let spec = PruneSpec {
        strategy: strategy.clone(),
        schedule: schedule.clone(),
        seed: config.seed,
        pool: config.pool,
    };
    let forward = harness.forward(&tensor, (!history.is_empty()).then_some(&spec))?;

    let mut kept_by_frame: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    let mut local_by_frame: BTreeMap<u32, (Vec<usize>, Vec<histprune::prune::TokenMeta>)> = BTreeMap::new();
    if let Some(outcome) = &forward.prune {
        let kept: std::collections::BTreeSet<usize> = outcome.result.kept().iter().copied().collect();
        for (i, m) in outcome.table.meta().iter().enumerate() {
            let entry = local_by_frame.entry(m.frame).or_default();
            if kept.contains(&i) {
                entry.0.push(entry.1.len());
            }
            entry.1.push(*m);
        }
        for &i in &kept {
            let m = outcome.table.meta()[i];
            let cols = history[m.frame as usize - 1].grid.cols;
            kept_by_frame
                .entry(m.frame)
                .or_default()
                .push((m.row * cols + m.col) as usize);
        }
    }
    let mut pruned_frames = Vec::new();
    for (k, f) in history.iter().enumerate() {
        let d = k as u32 + 1;
        let mut idx = kept_by_frame.remove(&d).unwrap_or_default();
        idx.sort_unstable();
        let bias = match local_by_frame.remove(&d) {
            Some((local, metas)) if !local.is_empty() => {
                let n = metas.len();
                let table = TokenTable::new(1, vec![0.0; n], metas)?;
                Some(spatial_bias(&PruneResult::from_indices(&table, local)?, &table)?)
            }
            _ => None,
        };
        pruned_frames.push(PrunedFrame {
            path: f.path.clone(),
            distance: d,
            tokens: f.grid.len(),
            budget: schedule.budget_for(d).unwrap_or(0),
            kept: idx.len(),
            kept_indices: idx,
            spatial_bias: bias,
        });
    }

    let shape = config
        .shape
        .ok_or_else(|| CliError::Internal("prune always resolves a model shape".into()))?;
    let comp = TokenComposition {
        current_frame_tokens: current.grid.len(),
        history_tokens_by_frame: sizes.clone(),
        text_tokens: config.text_tokens,
        decode_tokens: config.composition.decode_tokens,
    };
    let kept_counts: Vec<usize> = pruned_frames.iter().map(|f| f.kept).collect();
    let flops_unpruned = trajectory_flops(&shape, &comp, None, config.layer)?;
    let flops_pruned = trajectory_flops(
        &shape,
        &comp,
        Some(&BudgetSchedule::explicit(schedule.n_total, &kept_counts)),
        config.layer,
    )?;
    let reduction = reduction_report(&flops_unpruned, &flops_pruned)?;

    let attention_csv = if config.attention_csv {
        let out = Path::new(&config.out);
        fs::create_dir_all(out)?;
        fs::write(out.join(ATTENTION_CSV), forward.layers[config.layer - 1].to_csv(true))?;
        Some(ATTENTION_CSV.to_string())
    } else {
        None
    };

    report.prune = Some(PruneReport {
        strategy: name.clone(),
        budget_rule: schedule.rule,
        embedding: STUB_LABEL.into(),
        harness: *harness.config(),
        current_frame: current.path.clone(),
        current_tokens: current.grid.len(),
        text_tokens: config.text_tokens,
        history: pruned_frames,
        truncated,
        clamped,
        warnings,
        shape,
        flops_unpruned,
        flops_pruned,
        reduction,
        attention_csv,
    });
    Ok(report)
}

fn mean(values: impl Iterator<Item = f64>) -> f64 {
    let (s, n) = values.fold((0.0, 0usize), |(s, n), v| (s + v, n + 1));
    if n == 0 {
        0.0
    } else {
        s / n as f64
    }
}

pub fn run_probe(config: &RunConfig) -> Result<Report, CliError> {
    let harness = Harness::new(harness_config(config)?)?;
    let (rows, cols) = (config.grid_rows, config.grid_cols);
    let n = rows as usize * cols as usize;
    let diagonal = (rows as f64).hypot(cols as f64);
    let scene = ProbeScene::new(&harness, rows, cols, config.target)?;
    let mut probe_rows = Vec::new();
    let mut summary = Vec::new();
    for name in &config.strategies {
        let strategy = match config.strategy(name)? {
            // The probe scene has a single text token.
            Strategy::TextGuided { recycle, .. } => Strategy::TextGuided { text_top_m: 1, recycle },
            s => s,
        };
        let schedule = match strategy {
            Strategy::Semantic { .. } => BudgetSchedule::full(n, 1),
            _ => config.budget.schedule(&[n], false)?.0,
        };
        let start = probe_rows.len();
        for i in 0..config.seeds as u64 {
            let seed = config.seed.wrapping_add(i);
            let spec = PruneSpec {
                strategy: strategy.clone(),
                schedule: schedule.clone(),
                seed,
                pool: config.pool,
            };
            let o = scene.run(&harness, &spec)?;
            probe_rows.push(ProbeRow {
                strategy: name.clone(),
                seed,
                pre_centroid: [o.pre_centroid.0, o.pre_centroid.1],
                post_centroid: [o.post_centroid.0, o.post_centroid.1],
                pre_quantile: [o.pre_quantile.0, o.pre_quantile.1],
                post_quantile: [o.post_quantile.0, o.post_quantile.1],
                rank_shift: [o.rank_shift.0, o.rank_shift.1],
                centroid_shift: o.centroid_shift(),
                kept_tokens: o.kept_tokens,
            });
        }
        let runs = &probe_rows[start..];
        let shift = mean(runs.iter().map(|r| r.centroid_shift));
        summary.push(ProbeSummary {
            strategy: name.clone(),
            runs: runs.len(),
            mean_centroid_shift: shift,
            mean_centroid_shift_rel: shift / diagonal,
            mean_post_quantile: [
                mean(runs.iter().map(|r| r.post_quantile[0])),
                mean(runs.iter().map(|r| r.post_quantile[1])),
            ],
            mean_abs_rank_shift: [
                mean(runs.iter().map(|r| r.rank_shift[0].abs())),
                mean(runs.iter().map(|r| r.rank_shift[1].abs())),
            ],
        });
    }
    let mut csv = String::from(
        "strategy,seed,pre_row,pre_col,post_row,post_col,rank_shift_row,rank_shift_col,centroid_shift\n",
    );
    for r in &probe_rows {
        csv.push_str(&format!(
            "{},{},{},{},{},{},{},{},{}\n",
            r.strategy,
            r.seed,
            r.pre_centroid[0],
            r.pre_centroid[1],
            r.post_centroid[0],
            r.post_centroid[1],
            r.rank_shift[0],
            r.rank_shift[1],
            r.centroid_shift
        ));
    }
    let out = Path::new(&config.out);
    fs::create_dir_all(out)?;
    fs::write(out.join(PROBE_CSV), &csv)?;
    let mut report = empty_report(config);
    report.probe = Some(ProbeReport {
        grid_rows: rows,
        grid_cols: cols,
        target: config.target,
        harness: *harness.config(),
        csv: PROBE_CSV.into(),
        rows: probe_rows,
        summary,
    });
    Ok(report)
}

pub fn run_cost(config: &RunConfig) -> Result<Report, CliError> {
    let shape = config
        .shape
        .ok_or_else(|| CliError::Usage("cost needs a model shape".into()))?;
    let k = config.layer;
    let mut comp = config.composition.clone();
    comp.history_tokens_by_frame.truncate(config.tau as usize);
    let sizes = comp.history_tokens_by_frame.clone();
    let (schedule, _) = config.budget.schedule(&sizes, config.redistribute)?;
    let uniform = crate::config::BudgetSpec::Uniform {
        keep_ratio: UNIFORM_BASELINE_RATIO,
    }
    .schedule(&sizes, false)?
    .0;
    let without_history = trajectory_flops(&shape, &comp.without_history(), None, k)?;
    let with_history = trajectory_flops(&shape, &comp, None, k)?;
    let with_schedule = trajectory_flops(&shape, &comp, Some(&schedule), k)?;
    let with_uniform_baseline = trajectory_flops(&shape, &comp, Some(&uniform), k)?;
    let ffn = |gated: bool| if gated { "gated" } else { "plain" };
    let assumptions = vec![
        format!(
            "LLM: {} layers, width {}, {} FFN width {}, vocabulary {}",
            shape.llm_layers,
            shape.llm_dim,
            ffn(shape.llm_gated_ffn),
            shape.llm_ffn_dim,
            shape.vocab_size
        ),
        format!(
            "vision encoder: {} layers, width {}, {} FFN width {}, {} patches per LLM token, full attention per frame",
            shape.vit_layers,
            shape.vit_dim,
            ffn(shape.vit_gated_ffn),
            shape.vit_ffn_dim,
            shape.vit_patches_per_token
        ),
        format!(
            "prompt: {} current-frame tokens, history frames {:?}, {} text tokens; {} decoded tokens",
            comp.current_frame_tokens, comp.history_tokens_by_frame, comp.text_tokens, comp.decode_tokens
        ),
        format!("history pruned after LLM layer {k}; the vision encoder always sees every frame in full"),
        format!(
            "reduction_vs_uniform compares the schedule with a uniform {}% per-frame budget; reduction_vs_full with unpruned history",
            UNIFORM_BASELINE_RATIO * 100.0
        ),
        CONVENTION.to_string(),
    ];
    let mut report = empty_report(config);
    report.cost = Some(CostReport {
        shape_name: config.shape_name.clone().unwrap_or_else(|| "custom".into()),
        shape,
        composition_name: config.composition_name.clone(),
        composition: comp,
        prune_layer: k,
        schedule_rule: schedule.rule,
        schedule: schedule.retained(),
        uniform_baseline_schedule: uniform.retained(),
        history_total_ratio: with_history.total as f64 / without_history.total as f64,
        history_prefill_ratio: with_history.prefill as f64 / without_history.prefill as f64,
        reduction_vs_full: reduction_report(&with_history, &with_schedule)?,
        reduction_vs_uniform: reduction_report(&with_uniform_baseline, &with_schedule)?,
        without_history,
        with_history,
        with_schedule,
        with_uniform_baseline,
        reference: CostReference {
            prefill_reduction_pct: REFERENCE_PREFILL_REDUCTION_PCT,
            history_total_ratio: REFERENCE_HISTORY_RATIO,
        },
        assumptions,
    });
    Ok(report)
}
