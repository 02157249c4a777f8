//! Flag parsing. Flags become config keys and override the config file.

use std::collections::BTreeMap;
use std::fs;
use std::path::PathBuf;

use clap::{Args, Parser, Subcommand};

use crate::config::{parse_config, Command, RunConfig};
use crate::error::CliError;

#[derive(Debug, Parser)]
#[command(name = "histprune", version, about = "Prune historical screenshot tokens for GUI agents")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Sub,
}

#[derive(Debug, Subcommand)]
pub enum Sub {
    /// Label patches foreground/background and write overlays.
    Partition(Common),
    /// Prune history-frame tokens with a strategy and budget schedule.
    Prune(Common),
    /// Measure how pruning moves attention on a synthetic grid.
    Probe(Common),
    /// Analytic FLOPs with and without history frames.
    Cost(Common),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// PNG files or directories of PNGs.
    pub inputs: Vec<PathBuf>,
    /// Flat `key = value` config file; flags override it.
    #[arg(long)]
    pub config: Option<PathBuf>,
    /// Strategy name (comma-separated list for `probe`).
    #[arg(long)]
    pub strategy: Option<String>,
    /// Time-decay factor in (0, 1].
    #[arg(long)]
    pub lambda: Option<f64>,
    /// Number of most recent history frames kept.
    #[arg(long)]
    pub tau: Option<u32>,
    /// Uniform share of each history frame kept.
    #[arg(long)]
    pub keep_ratio: Option<f64>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Pruning happens after this layer.
    #[arg(long)]
    pub layer: Option<usize>,
    /// Sobel magnitude threshold on the 0..=1020 scale.
    #[arg(long)]
    pub threshold: Option<f64>,
    /// Share of strong-edge pixels above which a patch is foreground.
    #[arg(long)]
    pub edge_fraction: Option<f64>,
    #[arg(long)]
    pub patch_size: Option<u32>,
    /// Output directory.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Any other config key, e.g. `--set grid=16x16`.
    #[arg(long = "set", value_name = "KEY=VALUE")]
    pub set: Vec<String>,
}

impl Common {
    /// Config file entries overlaid by flags.
    pub fn settings(&self) -> Result<BTreeMap<String, String>, CliError> {
        let mut map = match &self.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
                parse_config(&text)?
            }
            None => BTreeMap::new(),
        };
        for kv in &self.set {
            let (k, v) = kv
                .split_once('=')
                .ok_or_else(|| CliError::Usage(format!("--set expects KEY=VALUE, got `{kv}`")))?;
            map.insert(k.trim().to_string(), v.trim().to_string());
        }
        let mut put = |key: &str, value: Option<String>| {
            if let Some(v) = value {
                map.insert(key.to_string(), v);
            }
        };
        put("strategy", self.strategy.clone());
        put("lambda", self.lambda.map(|v| v.to_string()));
        put("tau", self.tau.map(|v| v.to_string()));
        put("keep_ratio", self.keep_ratio.map(|v| v.to_string()));
        put("seed", self.seed.map(|v| v.to_string()));
        put("layer", self.layer.map(|v| v.to_string()));
        put("threshold", self.threshold.map(|v| v.to_string()));
        put("edge_fraction", self.edge_fraction.map(|v| v.to_string()));
        put("patch_size", self.patch_size.map(|v| v.to_string()));
        put("out", self.out.as_ref().map(|p| p.display().to_string()));
        if !self.inputs.is_empty() {
            let joined = self
                .inputs
                .iter()
                .map(|p| p.display().to_string())
                .collect::<Vec<_>>()
                .join(",");
            put("inputs", Some(joined));
        }
        Ok(map)
    }
}

impl Cli {
    pub fn resolve(&self) -> Result<RunConfig, CliError> {
        let (command, common) = match &self.command {
            Sub::Partition(c) => (Command::Partition, c),
            Sub::Prune(c) => (Command::Prune, c),
            Sub::Probe(c) => (Command::Probe, c),
            Sub::Cost(c) => (Command::Cost, c),
        };
        RunConfig::resolve(command, &common.settings()?)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn flags_override_file() {
        let dir = tempfile::tempdir().unwrap();
        let cfg = dir.path().join("run.cfg");
        fs::write(&cfg, "seed = 1\nlambda = 0.25\ntau = 2\n").unwrap();
        let cli = Cli::try_parse_from([
            "histprune",
            "prune",
            "--config",
            cfg.to_str().unwrap(),
            "--seed",
            "9",
            "--set",
            "embed_dim=32",
            "a.png",
        ])
        .unwrap();
        let c = cli.resolve().unwrap();
        assert_eq!(c.seed, 9);
        assert_eq!(c.tau, 2);
        assert_eq!(c.embed_dim, 32);
        assert_eq!(c.inputs, vec!["a.png"]);
        assert_eq!(c.budget, crate::config::BudgetSpec::TimeDecay { lambda: 0.25 });
    }

    #[test]
    fn bad_set_is_usage() {
        let cli = Cli::try_parse_from(["histprune", "probe", "--set", "grid"]).unwrap();
        assert_eq!(cli.resolve().unwrap_err().exit_code(), 1);
    }
}
