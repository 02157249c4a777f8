//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails.

mod common;

use std::collections::BTreeSet;
use std::fs;
use std::path::Path;
use std::process::ExitCode;
use std::time::{Duration, Instant};

use common::*;
use histprune::budget::{allocate_budgets, uniform_budgets, BudgetSchedule};
use histprune::cost::{layer_flops, FLOPS_PER_MAC};
use histprune::edge::{classify_patches, sobel, PatchLabel};
use histprune::harness::{
    mrope_positions, Harness, HarnessConfig, Position, PruneSpec, RopeMode, Segment, TokenInfo, TokenRole,
    TokenTensor,
};
use histprune::ingest::{build_grid, RawImage};
use histprune::prune::{
    diversity_prune, random_prune, super_cell, PositionIndex, Strategy, TokenLabel, TokenMeta, TokenTable,
};
use histprune_cli::{Command, Report};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};

type Outcome = Result<String, String>;
type Criterion<'a> = (&'static str, Option<Duration>, Box<dyn Fn() -> Outcome + 'a>);

fn check(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn table(dim: usize, embeddings: Vec<f64>, rows: u32, cols: u32) -> TokenTable {
    let meta = (0..rows * cols)
        .map(|i| TokenMeta {
            frame: 1,
            row: i / cols,
            col: i % cols,
            position: PositionIndex {
                temporal: 0,
                height: i / cols,
                width: i % cols,
            },
            label: TokenLabel::Unlabeled,
        })
        .collect();
    TokenTable::new(dim, embeddings, meta).unwrap()
}

fn schedule_exactness() -> Outcome {
    let lambdas: [(u128, u128); 4] = [(1, 4), (1, 2), (3, 4), (1, 1)];
    let mut cases = 0;
    for n in [64usize, 144, 1024] {
        for tau in 1..=8u32 {
            for (p, q) in lambdas {
                let got = allocate_budgets(n, tau, p as f64 / q as f64).map_err(|e| e.to_string())?;
                let expect: Vec<usize> = (1..=tau).map(|k| (n as u128 * p.pow(k) / q.pow(k)) as usize).collect();
                check(got.retained() == expect, || {
                    format!("n={n} tau={tau} lambda={p}/{q}: {:?} vs {expect:?}", got.retained())
                })?;
                cases += 1;
            }
        }
    }
    Ok(format!("{cases} schedules exact"))
}

fn min_pairwise(points: &[&[f64]]) -> f64 {
    let mut best = f64::INFINITY;
    for i in 0..points.len() {
        for j in i + 1..points.len() {
            let d: f64 = points[i].iter().zip(points[j]).map(|(a, b)| (a - b) * (a - b)).sum();
            best = best.min(d.sqrt());
        }
    }
    best
}

fn exhaustive_optimum(t: &TokenTable, k: usize) -> f64 {
    let n = t.len();
    let mut best = 0.0f64;
    for mask in 0u32..(1 << n) {
        if mask.count_ones() as usize != k {
            continue;
        }
        let pts: Vec<&[f64]> = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| t.embedding(i)).collect();
        best = best.max(min_pairwise(&pts));
    }
    best
}

fn greedy_value(t: &TokenTable, k: usize) -> Result<f64, String> {
    let kept = diversity_prune(t, &BudgetSchedule::explicit(t.len(), &[k])).map_err(|e| e.to_string())?;
    check(kept.len() == k, || format!("kept {} of budget {k}", kept.len()))?;
    let pts: Vec<&[f64]> = kept.kept().iter().map(|&i| t.embedding(i)).collect();
    Ok(min_pairwise(&pts))
}

fn diversity_oracle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2024);
    let mut worst = f64::INFINITY;
    for trial in 0..200 {
        let n = rng.random_range(2..=12usize);
        let k = rng.random_range(2..=5usize.min(n));
        let dim = rng.random_range(1..=4usize);
        let emb: Vec<f64> = (0..n * dim).map(|_| StandardNormal.sample(&mut rng)).collect();
        let t = table(dim, emb, 1, n as u32);
        let opt = exhaustive_optimum(&t, k);
        let got = greedy_value(&t, k)?;
        check(got >= 0.5 * opt - 1e-12, || format!("trial {trial}: greedy {got} < opt {opt} / 2"))?;
        worst = worst.min(got / opt);
    }
    let fixtures: [&[f64]; 4] = [
        &[0.0, 1.0, 10.0],
        &[0.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 7.0, 8.0],
        &[-4.0, -3.5, 0.2, 0.9, 6.0, 6.1],
        &[2.0, 3.0, 5.0, 8.0, 13.0, 21.0, 34.0],
    ];
    let mut exact = 0;
    for f in fixtures {
        let t = table(1, f.to_vec(), 1, f.len() as u32);
        for k in 2..=3.min(f.len()) {
            let (got, opt) = (greedy_value(&t, k)?, exhaustive_optimum(&t, k));
            check(got == opt, || format!("1-D fixture {f:?} k={k}: {got} vs {opt}"))?;
            exact += 1;
        }
    }
    Ok(format!("200 instances, worst ratio {worst:.3}; {exact} 1-D cases exact"))
}

fn random_uniformity() -> Outcome {
    const CRITICAL: f64 = 30.578; // chi-square, 15 df, 0.99
    let (rows, cols) = (16u32, 16u32);
    let t = table(1, vec![0.0; 256], rows, cols);
    let schedule = uniform_budgets(256, 1, 0.5).map_err(|e| e.to_string())?;
    let mut passing = 0;
    let mut worst: f64 = 0.0;
    for batch in 0..100u64 {
        let mut counts = [0u64; 16];
        for s in 0..100u64 {
            for &i in random_prune(&t, &schedule, batch * 100 + s).map_err(|e| e.to_string())?.kept() {
                let (r, c) = super_cell(i as u32 / cols, i as u32 % cols, rows, cols);
                counts[(r * 4 + c) as usize] += 1;
            }
        }
        let expect = counts.iter().sum::<u64>() as f64 / 16.0;
        let chi: f64 = counts.iter().map(|&c| (c as f64 - expect).powi(2) / expect).sum();
        worst = worst.max(chi);
        if chi < CRITICAL {
            passing += 1;
        }
    }
    check(passing >= 95, || format!("{passing}/100 batches below {CRITICAL}"))?;
    Ok(format!("{passing}/100 batches below {CRITICAL}, max chi-square {worst:.2}"))
}

fn history_tensor(rng: &mut ChaCha8Rng, dim: usize, frames: u32, rows: u32, cols: u32, text: u32) -> TokenTensor {
    let mut segments = Vec::new();
    let mut roles = Vec::new();
    for f in (1..=frames).rev() {
        segments.push(Segment::Image { rows, cols });
        roles.extend((0..rows * cols).map(|i| TokenRole::History { frame: f, row: i / cols, col: i % cols }));
    }
    segments.push(Segment::Image { rows, cols });
    roles.extend((0..rows * cols).map(|i| TokenRole::Current { row: i / cols, col: i % cols }));
    segments.push(Segment::Text { len: text });
    roles.extend((0..text).map(|_| TokenRole::Text));
    let info: Vec<TokenInfo> = roles
        .into_iter()
        .zip(mrope_positions(&segments))
        .map(|(role, p)| TokenInfo {
            role,
            position: Position::Multi(p),
            label: TokenLabel::Unlabeled,
        })
        .collect();
    let hidden = (0..info.len() * dim).map(|_| StandardNormal.sample(rng)).collect();
    TokenTensor::new(dim, hidden, info).unwrap()
}

fn rope_identities() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut worst_shift: f64 = 0.0;
    let mut worst_kept: f64 = 0.0;
    for i in 0..50u64 {
        let heads = rng.random_range(1..=4usize);
        let head_dim = 2 * rng.random_range(2..=8usize);
        let layers = rng.random_range(2..=4usize);
        let cfg = HarnessConfig {
            layers,
            embed_dim: heads * head_dim,
            heads,
            prune_layer: rng.random_range(1..layers),
            rope: RopeMode::mrope_for(head_dim),
            rope_base: [100.0, 10_000.0, 1_000_000.0][i as usize % 3],
            seed: i,
            ..HarnessConfig::default()
        };
        let h = Harness::new(cfg).map_err(|e| e.to_string())?;
        let (rows, cols) = (rng.random_range(1..=4u32), rng.random_range(1..=4u32));
        let (frames, text) = (rng.random_range(1..=3), rng.random_range(1..=4));
        let t = history_tensor(&mut rng, cfg.embed_dim, frames, rows, cols, text);
        let shift = rng.random_range(1..5000u32);
        worst_shift = worst_shift.max(h.relative_logit_check(&t, shift).map_err(|e| e.to_string())?);

        let strategy = [Strategy::Random, Strategy::AttentionRank, Strategy::Diversity][i as usize % 3].clone();
        let ratio = rng.random_range(0.2..0.9);
        let spec = PruneSpec::new(strategy, uniform_budgets((rows * cols) as usize, frames, ratio).unwrap(), i);
        let full = h.forward(&t, None).map_err(|e| e.to_string())?;
        let pruned = h.forward(&t, Some(&spec)).map_err(|e| e.to_string())?;
        let k = cfg.prune_layer;
        let (a, b) = (&full.layers[k], &pruned.layers[k]);
        for head in 0..heads {
            for &q in &b.token_ids {
                for &key in &b.token_ids {
                    let d = (a.logit(head, q, key).unwrap() - b.logit(head, q, key).unwrap()).abs();
                    worst_kept = worst_kept.max(d);
                }
            }
        }
    }
    check(worst_shift < 1e-5, || format!("shift deviation {worst_shift:e}"))?;
    check(worst_kept < 1e-6, || format!("kept-pair logit deviation {worst_kept:e}"))?;
    Ok(format!("50 configs, shift dev {worst_shift:.1e}, kept-pair dev {worst_kept:.1e}"))
}

fn probe_separation(dir: &Path) -> Outcome {
    let targets = ["6,11,4,4", "0,0,4,4", "12,2,4,4", "3,5,2,6", "9,9,5,3"];
    let mut worst_q: f64 = 0.0;
    for (n, target) in targets.iter().enumerate() {
        let r = run(
            Command::Probe,
            &dir.join(format!("t{n}")),
            &[("strategy", "keep_target_only"), ("seeds", "1"), ("target", target)],
        )
        .map_err(|e| e.to_string())?;
        for row in &r.probe.unwrap().rows {
            for q in row.post_quantile {
                worst_q = worst_q.max((q - 0.5).abs());
                check((q - 0.5).abs() <= 0.02, || format!("target {target}: post quantile {q}"))?;
            }
        }
    }
    let r = run(Command::Probe, &dir.join("contrast"), &[("seeds", "100"), ("keep_ratio", "0.5")])
        .map_err(|e| e.to_string())?;
    let summary = r.probe.unwrap().summary;
    let get = |name: &str| summary.iter().find(|s| s.strategy == name).map(|s| s.mean_centroid_shift_rel);
    let (biased, uniform) = (get("keep_target_only").unwrap(), get("random").unwrap());
    check(uniform < 0.05, || format!("random shift {uniform:.4} x diagonal"))?;
    check(biased > 3.0 * uniform, || format!("biased {biased:.4} vs uniform {uniform:.4}"))?;
    Ok(format!(
        "quantile within {worst_q:.3} of 0.5 on {} targets; random shift {uniform:.4}, biased {biased:.4} (x diagonal)",
        targets.len()
    ))
}

fn flops_vs_macs() -> Outcome {
    let shapes = [
        (2, 4, 1, 3),
        (2, 8, 2, 5),
        (2, 16, 4, 12),
        (3, 12, 3, 7),
        (3, 24, 2, 20),
        (4, 16, 2, 16),
        (2, 32, 4, 9),
        (4, 8, 4, 30),
        (5, 20, 5, 11),
        (3, 48, 6, 25),
    ];
    let mut worst: f64 = 0.0;
    for (i, &(layers, dim, heads, n)) in shapes.iter().enumerate() {
        let cfg = HarnessConfig {
            layers,
            embed_dim: dim,
            heads,
            prune_layer: 1,
            rope: RopeMode::Rope1d,
            seed: i as u64,
            ..HarnessConfig::default()
        };
        let info = (0..n)
            .map(|p| TokenInfo {
                role: TokenRole::Text,
                position: Position::Linear(p as u32),
                label: TokenLabel::Unlabeled,
            })
            .collect();
        let t = TokenTensor::new(dim, vec![0.25; n * dim], info).unwrap();
        let macs = Harness::new(cfg).and_then(|h| h.forward(&t, None)).map_err(|e| e.to_string())?.macs;
        // The harness has no feed-forward block, so the formula is taken
        // with a zero-width FFN.
        let formula = layers as u64 * layer_flops(n, dim, 0, false);
        let rel = (formula as f64 - (FLOPS_PER_MAC * macs) as f64).abs() / formula as f64;
        worst = worst.max(rel);
        check(rel <= 0.01, || format!("shape {layers}x{dim} n={n}: {formula} vs {} MAC", macs))?;
    }
    Ok(format!("10 shapes, max relative error {worst:.2e}"))
}

fn cost_report(dir: &Path) -> Result<histprune_cli::report::CostReport, String> {
    let r = run(
        Command::Cost,
        dir,
        &[("shape", "qwen2vl-2b-like"), ("composition", "aitw-like"), ("lambda", "0.5"), ("tau", "4")],
    )
    .map_err(|e| e.to_string())?;
    let c = r.cost.ok_or("no cost section")?;
    check(!c.assumptions.is_empty(), || "report lists no assumptions".into())?;
    Ok(c)
}

fn td_reduction(dir: &Path) -> Outcome {
    let c = cost_report(dir)?;
    let pct = c.reduction_vs_uniform.prefill_pct;
    check((pct - 20.5).abs() <= 5.0, || format!("prefill reduction {pct:.2}% not within 20.5 +/- 5"))?;
    Ok(format!(
        "prefill reduction {pct:.2}% vs uniform 50% (vs unpruned history {:.2}%)",
        c.reduction_vs_full.prefill_pct
    ))
}

fn history_ratio(dir: &Path) -> Outcome {
    let c = cost_report(dir)?;
    let target = 9.29 / 2.45;
    let ratio = c.history_total_ratio;
    check((ratio / target - 1.0).abs() <= 0.25, || format!("ratio {ratio:.3} vs {target:.3}"))?;
    Ok(format!("total ratio {ratio:.3} vs {target:.3} ({:+.1}%)", (ratio / target - 1.0) * 100.0))
}

/// Every file under `dir`, relative path to bytes, with the timestamp line
/// removed from reports.
fn snapshot(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
                continue;
            }
            let mut bytes = fs::read(&p).unwrap();
            if p.extension().is_some_and(|x| x == "json") {
                let text = String::from_utf8(bytes).unwrap();
                bytes = text
                    .lines()
                    .filter(|l| !l.trim_start().starts_with("\"timestamp\""))
                    .collect::<Vec<_>>()
                    .join("\n")
                    .into_bytes();
            }
            out.push((p.strip_prefix(dir).unwrap().display().to_string(), bytes));
        }
    }
    out.sort();
    out
}

fn determinism(dir: &Path) -> Outcome {
    let src = dir.join("in");
    fs::create_dir_all(&src).unwrap();
    for (i, r) in RECTS.iter().take(4).enumerate() {
        write_rect(&src, &format!("f{i}.png"), *r);
    }
    let bin = env!("CARGO_BIN_EXE_histprune");
    let mut files = 0;
    for sub in ["partition", "prune", "probe", "cost"] {
        let out = dir.join(sub);
        let mut snaps = Vec::new();
        for _ in 0..2 {
            let _ = fs::remove_dir_all(&out);
            let status = std::process::Command::new(bin)
                .arg(sub)
                .arg(&src)
                .args(["--out", out.to_str().unwrap(), "--seed", "7"])
                .args(["--set", "resize=long_side:224", "--set", "seeds=5", "--set", "shape=qwen2vl-2b-like"])
                .args(["--set", "attention_csv=true"])
                .output()
                .map_err(|e| e.to_string())?;
            check(status.status.success(), || {
                format!("{sub} exited {:?}: {}", status.status.code(), String::from_utf8_lossy(&status.stderr))
            })?;
            snaps.push(snapshot(&out));
        }
        check(snaps[0] == snaps[1], || format!("{sub}: outputs differ"))?;
        let report: Report = Report::from_json(&fs::read_to_string(out.join("report.json")).unwrap())
            .map_err(|e| e.to_string())?;
        check(report.command == sub, || format!("report command {}", report.command))?;
        files += snaps[0].len();
    }
    Ok(format!("4 subcommands, {files} files byte-identical"))
}

/// Vertical stripes whose contrast grows with the patch index, so each
/// threshold step drops a few patches.
fn graded_stripes() -> RawImage {
    RawImage::from_fn_gray(224, 224, |x, y| {
        let amp = 4 * ((y / P) * 8 + x / P) as i32;
        let v = if (x / 4) % 2 == 0 { 128 - amp / 2 } else { 128 + amp / 2 };
        v as u8
    })
    .unwrap()
}

fn edge_oracles() -> Outcome {
    for v in [0u8, 90, 255] {
        let img = RawImage::filled_gray(224, 168, v).unwrap();
        let grid = build_grid(&img, P).unwrap();
        let labels = classify_patches(&sobel(&img).unwrap(), &grid, 50.0, 0.01).map_err(|e| e.to_string())?;
        check(labels.labels().iter().all(|&l| l == PatchLabel::Background), || {
            format!("constant {v} has foreground")
        })?;
    }
    for r in RECTS {
        let img = rect_image(224, 224, r);
        let grid = build_grid(&img, P).unwrap();
        let labels = classify_patches(&sobel(&img).unwrap(), &grid, 50.0, 0.01).map_err(|e| e.to_string())?;
        let fg: BTreeSet<usize> = labels.foreground_indices().into_iter().collect();
        check(fg == outline(grid.cols, r), || format!("rectangle {r:?}: {fg:?}"))?;
    }
    let img = graded_stripes();
    let (edges, grid) = (sobel(&img).unwrap(), build_grid(&img, P).unwrap());
    let mut prev: Option<BTreeSet<usize>> = None;
    let mut sizes = Vec::new();
    for step in 0..10 {
        let t = step as f64 * 100.0;
        let fg: BTreeSet<usize> = classify_patches(&edges, &grid, t, 0.01)
            .map_err(|e| e.to_string())?
            .foreground_indices()
            .into_iter()
            .collect();
        if let Some(p) = &prev {
            check(fg.is_subset(p), || format!("threshold {t} adds foreground"))?;
        }
        sizes.push(fg.len());
        prev = Some(fg);
    }
    check(sizes.windows(2).filter(|w| w[1] < w[0]).count() >= 5, || format!("sweep barely moves: {sizes:?}"))?;
    Ok(format!("constant, {} rectangles, sweep sizes {sizes:?}", RECTS.len()))
}

fn main() -> ExitCode {
    let dir = tempfile::tempdir().expect("temp dir");
    let root = dir.path();
    let criteria: Vec<Criterion> = vec![
        ("schedule exactness", Some(Duration::from_secs(1)), Box::new(schedule_exactness)),
        ("diversity oracle", Some(Duration::from_secs(30)), Box::new(diversity_oracle)),
        ("random spatial uniformity", Some(Duration::from_secs(30)), Box::new(random_uniformity)),
        ("rope identities", Some(Duration::from_secs(10)), Box::new(rope_identities)),
        ("probe separation", None, Box::new(move || probe_separation(&root.join("probe")))),
        ("flops vs mac count", Some(Duration::from_secs(10)), Box::new(flops_vs_macs)),
        ("time-decay prefill reduction", None, Box::new(move || td_reduction(&root.join("td")))),
        ("history cost ratio", None, Box::new(move || history_ratio(&root.join("hist")))),
        ("cli determinism", None, Box::new(move || determinism(&root.join("det")))),
        ("edge oracles", None, Box::new(edge_oracles)),
    ];
    let mut failed = 0;
    for (i, (name, limit, f)) in criteria.iter().enumerate() {
        let start = Instant::now();
        let outcome = f();
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if elapsed > *l => Err(format!("took {elapsed:.2?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(detail) => println!("PASS {:>2} {name}: {detail} [{elapsed:.2?}]", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail} [{elapsed:.2?}]", i + 1);
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", criteria.len() - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
