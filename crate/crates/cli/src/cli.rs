//! Argument definitions and the config-override splitter.

use clap::{Args, CommandFactory, Parser, Subcommand, ValueEnum};
use dhq::GateDirection;
use std::ffi::OsString;
use std::path::PathBuf;

/// Toy query-based crowd detector: data generation, training, evaluation,
/// ablations, suppression baselines and diagnostics.
///
/// Any config key may also be passed as `--key value` (for example
/// `--lr 0` or `--model.seed 3`); a bare key sets the field in every
/// section that has it.
#[derive(Debug, Parser)]
#[command(name = "dhq", version)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic scene dataset.
    GenData(GenDataArgs),
    /// Train a detector and write its snapshot and training log.
    Train(TrainArgs),
    /// Evaluate a model snapshot or a prediction file.
    Eval(EvalArgs),
    /// Train and evaluate a grid of model variants.
    Ablate(AblateArgs),
    /// Run a suppression baseline over a prediction file.
    Suppress(SuppressArgs),
    /// Write homogeneity, score-IoU and equilibrium diagnostics.
    Diagnose(DiagnoseArgs),
}

#[derive(Debug, Clone, Args)]
pub struct Common {
    /// TOML run config; defaults apply to absent keys.
    #[arg(long)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Split {
    All,
    Train,
    Val,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Switch {
    Off,
    On,
}

impl From<Switch> for bool {
    fn from(s: Switch) -> bool {
        s == Switch::On
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Method {
    Nms,
    Soft,
    Adaptive,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum)]
pub enum Gate {
    Below,
    Above,
}

impl From<Gate> for GateDirection {
    fn from(g: Gate) -> Self {
        match g {
            Gate::Below => GateDirection::Below,
            Gate::Above => GateDirection::Above,
        }
    }
}

#[derive(Debug, Args)]
pub struct GenDataArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset file (default `<out_dir>/dataset.jsonl`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    /// Dataset file; scenes are generated from `[scenes]` when absent.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output directory (default `out_dir`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    /// Model snapshot (`model.json`).
    #[arg(
        long,
        required_unless_present = "predictions",
        conflicts_with = "predictions"
    )]
    pub model: Option<PathBuf>,
    /// Prediction file, one detection per line.
    #[arg(long)]
    pub predictions: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
    /// Keep only this many decoder layers after DCG.
    #[arg(long, requires = "model")]
    pub stages: Option<usize>,
    /// Also write every stage's detections to this file.
    #[arg(long, requires = "model")]
    pub export_predictions: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct AblateArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["off", "on"])]
    pub grid_dcg: Vec<Switch>,
    /// Defaults to the configured value.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub grid_gqs: Vec<Switch>,
    /// Defaults to the configured value.
    #[arg(long, value_enum, value_delimiter = ',')]
    pub grid_aligned: Vec<Switch>,
    /// Gate directions tried for DCG-enabled rows.
    #[arg(long, value_enum, value_delimiter = ',', default_values = ["below", "above"])]
    pub grid_gate: Vec<Gate>,
    /// Decoder splits as `before:after`; defaults to the configured split.
    #[arg(long, value_delimiter = ',')]
    pub grid_split: Vec<String>,
    /// Query counts; defaults to the configured count.
    #[arg(long, value_delimiter = ',')]
    pub grid_queries: Vec<usize>,
    /// Model seeds per row, counting up from `model.seed`.
    #[arg(long, default_value_t = 3)]
    pub seeds: usize,
    /// Also write every trained model to `<out>/models/<run>.json`.
    #[arg(long)]
    pub save_models: bool,
}

#[derive(Debug, Args)]
pub struct SuppressArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub predictions: PathBuf,
    #[arg(long, value_enum)]
    pub method: Method,
    /// IoU threshold for `nms`, base threshold for `adaptive`.
    #[arg(long, default_value_t = 0.5)]
    pub nms_thresh: f64,
    #[arg(long, default_value_t = 0.5)]
    pub sigma: f64,
    #[arg(long, default_value_t = 1e-3)]
    pub score_floor: f64,
    /// Dataset used to derive densities for detections without one.
    #[arg(long)]
    pub data: Option<PathBuf>,
    /// Output file (default `<out_dir>/suppressed.jsonl`).
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct DiagnoseArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub model: PathBuf,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long, value_enum, default_value = "val")]
    pub split: Split,
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Minimum confidence for a query to enter the homogeneity scatter.
    #[arg(long, default_value_t = dhq::eval::POSITIVE_FLOOR)]
    pub positive_floor: f64,
    #[arg(long, default_value_t = 0.3)]
    pub equilibrium_init: f64,
    #[arg(long, default_value_t = 0.1)]
    pub equilibrium_lr: f64,
    #[arg(long, default_value_t = 500)]
    pub equilibrium_steps: usize,
}

/// Separates `--key value` config overrides from subcommand arguments.
///
/// A flag declared by the subcommand keeps its meaning; any other flag
/// naming a config key becomes an override.
pub fn split_overrides(
    args: Vec<OsString>,
) -> anyhow::Result<(Vec<OsString>, Vec<(String, String)>)> {
    let keys = crate::config::config_keys();
    let cmd = Cli::command();
    let mut sub = None;
    let mut passed = Vec::with_capacity(args.len());
    let mut overrides = Vec::new();
    let mut it = args.into_iter();
    if let Some(prog) = it.next() {
        passed.push(prog);
    }
    while let Some(arg) = it.next() {
        let Some(s) = arg.to_str().map(str::to_string) else {
            passed.push(arg);
            continue;
        };
        if sub.is_none() && !s.starts_with('-') {
            sub = cmd.find_subcommand(&s).cloned();
            passed.push(arg);
            continue;
        }
        let Some(flag) = s.strip_prefix("--").filter(|f| !f.is_empty()) else {
            passed.push(arg);
            continue;
        };
        let (name, inline) = match flag.split_once('=') {
            Some((n, v)) => (n.to_string(), Some(v.to_string())),
            None => (flag.to_string(), None),
        };
        let declared = sub.as_ref().is_some_and(|c| {
            name == "help"
                || c.get_arguments()
                    .any(|a| a.get_long() == Some(name.as_str()))
        });
        let key = name.replace('-', "_");
        if sub.is_none() || declared || !keys.contains(&key) {
            passed.push(arg);
            continue;
        }
        let value = match inline {
            Some(v) => v,
            None => it
                .next()
                .and_then(|v| v.into_string().ok())
                .ok_or_else(|| anyhow::anyhow!("--{name} needs a value"))?,
        };
        overrides.push((key, value));
    }
    Ok((passed, overrides))
}

#[cfg(test)]
mod tests {
    use super::*;

    fn os(v: &[&str]) -> Vec<OsString> {
        v.iter().map(OsString::from).collect()
    }

    #[test]
    fn overrides_are_split_out() {
        let (rest, ov) = split_overrides(os(&[
            "dhq",
            "train",
            "--lr",
            "0",
            "--out",
            "x",
            "--model.seed=4",
            "--weight-decay",
            "0.1",
        ]))
        .unwrap();
        assert_eq!(rest, os(&["dhq", "train", "--out", "x"]));
        assert_eq!(
            ov,
            vec![
                ("lr".to_string(), "0".to_string()),
                ("model.seed".to_string(), "4".to_string()),
                ("weight_decay".to_string(), "0.1".to_string()),
            ]
        );
    }

    #[test]
    fn declared_flags_win_and_unknown_pass_through() {
        let (rest, ov) =
            split_overrides(os(&["dhq", "suppress", "--sigma", "0.3", "--bogus", "1"])).unwrap();
        assert!(ov.is_empty());
        assert_eq!(rest.len(), 6);
        assert!(split_overrides(os(&["dhq", "train", "--lr"])).is_err());
    }

    #[test]
    fn cli_definition_is_consistent() {
        Cli::command().debug_assert();
    }
}
