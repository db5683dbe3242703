use std::ffi::OsString;
use std::path::PathBuf;

use clap::parser::ValueSource;
use clap::{Args, CommandFactory, FromArgMatches, Parser, Subcommand};
use dfkit::harness::{FilterChoice, LossKind};
use serde::Serialize;

use crate::CliError;

#[derive(Debug, Parser)]
#[command(name = "dfkit", version, about = "Differentiable Bayesian filters for the disc tracking task")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Simulate a disc tracking dataset.
    GenData(GenDataArgs),
    /// Train a filter and its models.
    Train(TrainArgs),
    /// Evaluate a checkpoint on a dataset split.
    Eval(EvalArgs),
    /// Tabulate evaluation reports.
    Compare(CompareArgs),
    /// Check tape gradients against finite differences.
    Gradcheck(GradcheckArgs),
    /// Compare the filters with a closed-form Kalman filter.
    OracleCheck(OracleArgs),
}

impl Command {
    pub fn name(&self) -> &'static str {
        match self {
            Command::GenData(_) => "gen-data",
            Command::Train(_) => "train",
            Command::Eval(_) => "eval",
            Command::Compare(_) => "compare",
            Command::Gradcheck(_) => "gradcheck",
            Command::OracleCheck(_) => "oracle-check",
        }
    }

    pub fn common(&self) -> &Common {
        match self {
            Command::GenData(a) => &a.common,
            Command::Train(a) => &a.common,
            Command::Eval(a) => &a.common,
            Command::Compare(a) => &a.common,
            Command::Gradcheck(a) => &a.common,
            Command::OracleCheck(a) => &a.common,
        }
    }
}

#[derive(Debug, Args, Serialize)]
pub struct Common {
    /// Directory for every output of the command.
    #[arg(long, default_value = "out")]
    pub out: PathBuf,
    #[arg(long, default_value_t = 0)]
    pub seed: u64,
    /// Caps the number of worker threads.
    #[arg(long)]
    pub threads: Option<usize>,
    /// TOML file with flag values; flags given on the command line win.
    #[arg(long)]
    #[serde(skip)]
    pub config: Option<PathBuf>,
}

#[derive(Debug, Args, Serialize)]
pub struct GenDataArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// 32×32 images and 300/50/50 sequences.
    #[arg(long)]
    pub desk_scale: bool,
    #[arg(long)]
    pub distractors: Option<usize>,
    #[arg(long, default_value_t = 0.1)]
    pub sigma_p: f64,
    #[arg(long, default_value_t = 2.0)]
    pub sigma_v: f64,
    /// Velocity noise that grows towards the image centre.
    #[arg(long)]
    pub hetero_q: bool,
    /// Full correlated process noise.
    #[arg(long)]
    pub correlated_q: bool,
    #[arg(long)]
    pub image_size: Option<usize>,
    #[arg(long)]
    pub steps: Option<usize>,
    #[arg(long)]
    pub train: Option<usize>,
    #[arg(long)]
    pub val: Option<usize>,
    #[arg(long)]
    pub test: Option<usize>,
}

fn parse_filter(s: &str) -> Result<FilterChoice, String> {
    FilterChoice::parse(s).ok_or_else(|| {
        let names: Vec<_> = FilterChoice::ALL.iter().map(|c| c.name()).collect();
        format!("unknown filter '{s}', expected one of {}", names.join(", "))
    })
}

fn parse_loss(s: &str) -> Result<LossKind, String> {
    match s {
        "mse" => Ok(LossKind::Mse),
        "nll" => Ok(LossKind::Nll),
        "mix" => Ok(LossKind::Mix),
        _ => Err(format!("unknown loss '{s}', expected mse, nll or mix")),
    }
}

#[derive(Debug, Args, Serialize)]
pub struct TrainArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Directory holding train.dfds and val.dfds.
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "ekf", value_parser = parse_filter)]
    pub filter: FilterChoice,
    #[arg(long, default_value = "nll", value_parser = parse_loss)]
    pub loss: LossKind,
    /// Training chunk length k.
    #[arg(long, default_value_t = 10)]
    pub seq_len: usize,
    #[arg(long, default_value_t = 15)]
    pub epochs: usize,
    #[arg(long, default_value_t = 1e-4)]
    pub lr: f64,
    /// Chunks per batch; by default 320 steps per batch.
    #[arg(long)]
    pub batch: Option<usize>,
    #[arg(long)]
    pub hetero_r: bool,
    #[arg(long)]
    pub hetero_q: bool,
    /// Full instead of diagonal learned covariances.
    #[arg(long)]
    pub full_cov: bool,
    /// Particles or samples during training.
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long)]
    pub alpha_re: Option<f64>,
    #[arg(long)]
    pub resample_every: Option<usize>,
    #[arg(long)]
    pub gmm_sigma: Option<f64>,
    #[arg(long)]
    pub freeze_sensor: bool,
    #[arg(long)]
    pub freeze_process: bool,
    /// Use the known disc dynamics instead of a learned process model.
    #[arg(long)]
    pub analytic_process: bool,
    /// Σ_init = sigma-init · I for the perturbed initial belief.
    #[arg(long, default_value_t = 25.0)]
    pub sigma_init: f64,
    #[arg(long)]
    pub clip_norm: Option<f64>,
    #[arg(long)]
    pub max_batches: Option<usize>,
    /// Checkpoint whose parameters initialize those with the same name.
    #[arg(long)]
    pub init: Option<PathBuf>,
    /// Supervised sensor epochs before filter training.
    #[arg(long, default_value_t = 0)]
    pub pretrain_epochs: usize,
    #[arg(long, default_value_t = 1e-3)]
    pub pretrain_lr: f64,
    #[arg(long, default_value = "mix", value_parser = parse_loss)]
    pub pretrain_loss: LossKind,
}

#[derive(Debug, Args, Serialize)]
pub struct EvalArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Checkpoint directory written by train.
    #[arg(long)]
    pub checkpoint: Option<PathBuf>,
    #[arg(long)]
    pub data: PathBuf,
    #[arg(long, default_value = "test")]
    pub split: String,
    /// Evaluate with another filter than the one trained.
    #[arg(long, value_parser = parse_filter)]
    pub filter: Option<FilterChoice>,
    /// Particles or samples during evaluation.
    #[arg(long)]
    pub particles: Option<usize>,
    #[arg(long, default_value_t = 25.0)]
    pub sigma_init: f64,
    /// Perturbed initial states per sequence, besides the true one.
    #[arg(long, default_value_t = 2)]
    pub perturbations: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct CompareArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Report files, each optionally prefixed with `label=`; reports with
    /// the same label are averaged.
    #[arg(required = true)]
    pub reports: Vec<String>,
}

#[derive(Debug, Args, Serialize)]
pub struct GradcheckArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// Random inputs per op.
    #[arg(long, default_value_t = 20)]
    pub trials: usize,
}

#[derive(Debug, Args, Serialize)]
pub struct OracleArgs {
    #[command(flatten)]
    #[serde(flatten)]
    pub common: Common,
    /// ekf, ukf, mcukf, pf or all.
    #[arg(long, default_value = "all")]
    pub filter: String,
    #[arg(long, default_value_t = 100)]
    pub trials: usize,
    /// Samples (mcukf) or particles (pf); 10⁵ and 10⁴ by default.
    #[arg(long)]
    pub samples: Option<usize>,
}

/// Parses `argv`, filling flags that are absent from the command line with
/// values from the `--config` file.
pub fn parse(argv: Vec<OsString>) -> Result<Cli, CliError> {
    let cmd = Cli::command();
    let matches = cmd.clone().try_get_matches_from(&argv).map_err(CliError::Clap)?;
    let Some((name, sub)) = matches.subcommand() else {
        return Err(CliError::Usage("missing command".into()));
    };
    let Some(path) = sub.get_one::<PathBuf>("config") else {
        return Cli::from_arg_matches(&matches).map_err(CliError::Clap);
    };
    let text = std::fs::read_to_string(path)
        .map_err(|e| CliError::Usage(format!("cannot read config {}: {e}", path.display())))?;
    let table: toml::Table = text
        .parse()
        .map_err(|e: toml::de::Error| CliError::Usage(format!("config {}: {}", path.display(), e.message())))?;

    // Top-level keys apply to any command; a table named after the command
    // overrides them.
    // Top-level keys that only some other command understands are skipped.
    let sub_cmd = cmd.find_subcommand(name).expect("parsed subcommand exists");
    let own_flag = |k: &str| sub_cmd.get_arguments().any(|a| a.get_long() == Some(k) || (a.is_positional() && a.get_id() == k));
    let other_flag =
        |k: &str| cmd.get_subcommands().any(|c| c.get_arguments().any(|a| a.get_long() == Some(k)));
    let mut entries: Vec<(String, toml::Value)> = Vec::new();
    for (k, v) in &table {
        if !v.is_table() && (own_flag(k) || !other_flag(k)) {
            entries.push((k.clone(), v.clone()));
        }
    }
    if let Some(toml::Value::Table(own)) = table.get(name) {
        for (k, v) in own {
            entries.retain(|(e, _)| e != k);
            entries.push((k.clone(), v.clone()));
        }
    }

    let mut extra: Vec<OsString> = Vec::new();
    for (key, value) in entries {
        let arg = sub_cmd
            .get_arguments()
            .find(|a| a.get_long() == Some(key.as_str()) || (a.is_positional() && a.get_id() == key.as_str()))
            .ok_or_else(|| CliError::Usage(format!("unknown config key '{key}' for {name}")))?;
        if key == "config" {
            return Err(CliError::Usage("a config file cannot name another config file".into()));
        }
        if sub.value_source(arg.get_id().as_str()) == Some(ValueSource::CommandLine) {
            continue;
        }
        let values = match value {
            toml::Value::Array(items) => items,
            v => vec![v],
        };
        for v in values {
            let text = match v {
                toml::Value::Boolean(true) if !arg.is_positional() => {
                    extra.push(format!("--{key}").into());
                    continue;
                }
                toml::Value::Boolean(false) => continue,
                toml::Value::String(s) => s,
                toml::Value::Integer(i) => i.to_string(),
                toml::Value::Float(f) => f.to_string(),
                other => return Err(CliError::Usage(format!("config key '{key}' has unsupported value {other}"))),
            };
            if !arg.is_positional() {
                extra.push(format!("--{key}").into());
            }
            extra.push(text.into());
        }
    }
    let mut full = argv;
    full.extend(extra);
    let matches = cmd.try_get_matches_from(full).map_err(CliError::Clap)?;
    Cli::from_arg_matches(&matches).map_err(CliError::Clap)
}
