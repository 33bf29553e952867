use std::cell::RefCell;
use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::str::FromStr;

use clap::{Args, Parser, Subcommand};
use confrank_core::features::{DriftStreamConfig, TimeUnit};
use confrank_core::losses::{LossWeights, ScoringFunction};
use confrank_core::losses::{DEFAULT_KD_ALPHA, DEFAULT_KD_TEMPERATURE, DEFAULT_RKD_WEIGHT};
use confrank_core::models::{AdagradConfig, ArchDescriptor, ArchKind, DEFAULT_EMBEDDING_DIM, DEFAULT_HIDDEN_UNITS};
use confrank_core::pipeline::{Mode, Setting, TrainConfig, DEFAULT_BATCH_SIZE, DEFAULT_DELTA, DEFAULT_EPOCHS};
use serde::{Deserialize, Serialize};

use crate::failure::Failure;

#[derive(Debug, Parser)]
#[command(
    name = "confrank",
    version,
    about = "Train CTR models that rank better than the deployed one"
)]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate a synthetic drifting click stream.
    Gen(GenArgs),
    /// Train in the standard (multi-epoch) setting.
    Train(TrainArgs),
    /// Run a one-pass serve-then-train experiment.
    Onepass(OnePassArgs),
    /// Evaluate a snapshot on a dataset.
    Eval(EvalArgs),
    /// Grid search over the ranking-loss weights.
    Sweep(SweepArgs),
    /// Re-run a command from its manifest.
    Replay(ReplayArgs),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Flat key=value or JSON file of defaults; flags take precedence.
    #[arg(long, global = false)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    #[arg(long)]
    pub out: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct GenArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub days: Option<usize>,
    #[arg(long)]
    pub examples_per_day: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub drift_rate: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub base_ctr: Option<f64>,
    #[arg(long)]
    pub field_count: Option<usize>,
    #[arg(long)]
    pub vocab_size: Option<usize>,
    #[arg(long)]
    pub hash_dim: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub zipf_exponent: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub weight_scale: Option<f64>,
}

#[derive(Debug, Args)]
pub struct DataArgs {
    /// CSV with header `id,timestamp,label,<fields...>`.
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub hash_dim: Option<usize>,
    /// `days` or `epoch-seconds`.
    #[arg(long)]
    pub time_unit: Option<String>,
}

#[derive(Debug, Args)]
pub struct ModelArgs {
    /// erm, cr, rcr, kd or rkd.
    #[arg(long)]
    pub mode: Option<String>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda_cr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub lambda_rcr: Option<f64>,
    /// logistic or square.
    #[arg(long)]
    pub phi: Option<String>,
    /// lr, fm or deepfm.
    #[arg(long)]
    pub arch: Option<String>,
    #[arg(long)]
    pub embedding_dim: Option<usize>,
    #[arg(long)]
    pub hidden_units: Option<usize>,
    #[arg(long)]
    pub epochs: Option<usize>,
    /// Validation-loss improvement threshold; `inf` stops after one epoch.
    #[arg(long, allow_negative_numbers = true)]
    pub delta: Option<f64>,
    #[arg(long)]
    pub batch_size: Option<usize>,
    #[arg(long, allow_negative_numbers = true)]
    pub lr: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub kd_alpha: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub kd_temperature: Option<f64>,
    #[arg(long, allow_negative_numbers = true)]
    pub rkd_weight: Option<f64>,
}

#[derive(Debug, Args)]
pub struct TrainArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub validation_days: Option<usize>,
    #[arg(long)]
    pub test_days: Option<usize>,
    /// Fixed teacher snapshot instead of the previous epoch.
    #[arg(long)]
    pub teacher: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct OnePassArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub warmup_days: Option<usize>,
    #[arg(long)]
    pub cycle_days: Option<usize>,
    /// Train each successor from a fresh initialization.
    #[arg(long)]
    pub cold_start: bool,
    /// Also run this mode on the same data and write per-day AUC deltas.
    #[arg(long)]
    pub compare_with: Option<String>,
}

#[derive(Debug, Args)]
pub struct EvalArgs {
    #[command(flatten)]
    pub common: Common,
    #[arg(long)]
    pub snapshot: Option<PathBuf>,
    #[arg(long)]
    pub data: Option<PathBuf>,
    #[arg(long)]
    pub teacher_snapshot: Option<PathBuf>,
}

#[derive(Debug, Args)]
pub struct SweepArgs {
    #[command(flatten)]
    pub common: Common,
    #[command(flatten)]
    pub data: DataArgs,
    #[command(flatten)]
    pub model: ModelArgs,
    #[arg(long)]
    pub validation_days: Option<usize>,
    #[arg(long)]
    pub test_days: Option<usize>,
    /// Comma-separated lambda_cr values.
    #[arg(long)]
    pub grid_cr: Option<String>,
    /// Comma-separated lambda_rcr values.
    #[arg(long)]
    pub grid_rcr: Option<String>,
}

#[derive(Debug, Args)]
pub struct ReplayArgs {
    /// manifest.json written by an earlier run.
    #[arg(long)]
    pub manifest: PathBuf,
    /// Output directory for the rerun.
    #[arg(long)]
    pub out: PathBuf,
}

/// Fully resolved command, as recorded in the run manifest.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "lowercase")]
pub enum Invocation {
    Gen(GenSpec),
    Train(TrainSpec),
    Onepass(OnePassSpec),
    Eval(EvalSpec),
    Sweep(SweepSpec),
}

impl Invocation {
    pub fn out(&self) -> Option<&Path> {
        match self {
            Invocation::Gen(s) => Some(&s.out),
            Invocation::Train(s) => Some(&s.out),
            Invocation::Onepass(s) => Some(&s.out),
            Invocation::Eval(s) => s.out.as_deref(),
            Invocation::Sweep(s) => Some(&s.out),
        }
    }

    pub fn set_out(&mut self, out: PathBuf) {
        match self {
            Invocation::Gen(s) => s.out = out,
            Invocation::Train(s) => s.out = out,
            Invocation::Onepass(s) => s.out = out,
            Invocation::Eval(s) => s.out = Some(out),
            Invocation::Sweep(s) => s.out = out,
        }
    }

    pub fn seed(&self) -> Option<u64> {
        match self {
            Invocation::Gen(s) => Some(s.generator.seed),
            Invocation::Train(s) => Some(s.model.seed),
            Invocation::Onepass(s) => Some(s.model.seed),
            Invocation::Eval(_) => None,
            Invocation::Sweep(s) => Some(s.model.seed),
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct GenSpec {
    pub generator: DriftStreamConfig,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DataSpec {
    pub path: PathBuf,
    pub hash_dim: usize,
    pub time_unit: TimeUnit,
}

/// Training settings that do not depend on the data.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ModelSpec {
    pub mode: Mode,
    pub weights: LossWeights,
    pub phi: ScoringFunction,
    pub arch: ArchKind,
    pub embedding_dim: usize,
    pub hidden_units: usize,
    pub epochs: usize,
    pub delta: String,
    pub batch_size: usize,
    pub optimizer: AdagradConfig,
    pub kd_alpha: f64,
    pub kd_temperature: f64,
    pub rkd_weight: f64,
    pub seed: u64,
}

impl ModelSpec {
    pub fn train_config(&self, field_count: usize, hash_dim: usize, setting: Setting) -> Result<TrainConfig, Failure> {
        let arch = match self.arch {
            ArchKind::Lr => ArchDescriptor::lr(field_count, hash_dim),
            ArchKind::Fm => ArchDescriptor::fm(field_count, hash_dim, self.embedding_dim),
            ArchKind::DeepFm => ArchDescriptor::deepfm(field_count, hash_dim, self.embedding_dim, self.hidden_units),
        };
        let mut config = TrainConfig::new(arch, self.mode);
        config.setting = setting;
        config.weights = self.weights;
        config.phi = self.phi;
        config.epochs = self.epochs;
        config.delta = parse_value::<f64>("delta", &self.delta)?;
        config.batch_size = self.batch_size;
        config.optimizer = self.optimizer;
        config.kd_alpha = self.kd_alpha;
        config.kd_temperature = self.kd_temperature;
        config.rkd_weight = self.rkd_weight;
        config.seed = self.seed;
        config.validate()?;
        Ok(config)
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSpec {
    pub data: DataSpec,
    pub model: ModelSpec,
    pub validation_days: usize,
    pub test_days: usize,
    pub teacher: Option<PathBuf>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OnePassSpec {
    pub data: DataSpec,
    pub model: ModelSpec,
    pub warmup_days: usize,
    pub cycle_days: usize,
    pub warm_start: bool,
    pub compare_with: Option<Mode>,
    pub out: PathBuf,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct EvalSpec {
    pub snapshot: PathBuf,
    pub data: PathBuf,
    pub teacher_snapshot: Option<PathBuf>,
    pub out: Option<PathBuf>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepSpec {
    pub data: DataSpec,
    pub model: ModelSpec,
    pub validation_days: usize,
    pub test_days: usize,
    pub grid_cr: Vec<f64>,
    pub grid_rcr: Vec<f64>,
    pub out: PathBuf,
}

fn parse_value<T: FromStr>(key: &str, raw: &str) -> Result<T, Failure>
where
    T::Err: std::fmt::Display,
{
    raw.trim()
        .parse::<T>()
        .map_err(|e| Failure::usage(format!("invalid value `{raw}` for {key}: {e}")))
}

/// Values read from `--config`, keyed by flag name with `_` separators.
#[derive(Debug, Default)]
pub struct ConfigFile {
    values: BTreeMap<String, String>,
    used: RefCell<BTreeSet<String>>,
    path: Option<PathBuf>,
}

fn normalize_key(key: &str) -> String {
    key.trim()
        .trim_start_matches("--")
        .replace('-', "_")
        .to_ascii_lowercase()
}

impl ConfigFile {
    pub fn load(path: Option<&Path>) -> Result<Self, Failure> {
        let Some(path) = path else {
            return Ok(Self::default());
        };
        let text = std::fs::read_to_string(path).map_err(|e| Failure::data(format!("{}: {e}", path.display())))?;
        let mut config = Self::parse(&text).map_err(|msg| Failure::usage(format!("{}: {msg}", path.display())))?;
        config.path = Some(path.to_path_buf());
        Ok(config)
    }

    pub fn parse(text: &str) -> Result<Self, String> {
        let mut values = BTreeMap::new();
        if text.trim_start().starts_with('{') {
            let json: serde_json::Map<String, serde_json::Value> =
                serde_json::from_str(text).map_err(|e| format!("invalid JSON config: {e}"))?;
            for (key, value) in json {
                let raw = match value {
                    serde_json::Value::Null => continue,
                    serde_json::Value::String(s) => s,
                    serde_json::Value::Array(items) => items
                        .iter()
                        .map(|v| v.as_str().map_or_else(|| v.to_string(), str::to_owned))
                        .collect::<Vec<_>>()
                        .join(","),
                    other => other.to_string(),
                };
                values.insert(normalize_key(&key), raw);
            }
        } else {
            for (number, line) in text.lines().enumerate() {
                let line = line.trim();
                if line.is_empty() || line.starts_with('#') {
                    continue;
                }
                let (key, value) = line
                    .split_once('=')
                    .ok_or_else(|| format!("line {}: expected key=value", number + 1))?;
                values.insert(normalize_key(key), value.trim().to_owned());
            }
        }
        Ok(ConfigFile {
            values,
            ..Self::default()
        })
    }

    fn get(&self, key: &str) -> Option<&str> {
        let value = self.values.get(key)?;
        self.used.borrow_mut().insert(key.to_owned());
        Some(value)
    }

    /// Flag value if given, else the config value, else `None`.
    pub fn pick<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<Option<T>, Failure>
    where
        T::Err: std::fmt::Display,
    {
        let from_file = self.get(key).map(|raw| parse_value(key, raw)).transpose()?;
        Ok(flag.or(from_file))
    }

    pub fn pick_or<T: FromStr>(&self, flag: Option<T>, key: &str, default: T) -> Result<T, Failure>
    where
        T::Err: std::fmt::Display,
    {
        Ok(self.pick(flag, key)?.unwrap_or(default))
    }

    pub fn require<T: FromStr>(&self, flag: Option<T>, key: &str) -> Result<T, Failure>
    where
        T::Err: std::fmt::Display,
    {
        self.pick(flag, key)?
            .ok_or_else(|| Failure::usage(format!("missing required option --{}", key.replace('_', "-"))))
    }

    /// Fails on keys no option consumed.
    pub fn finish(&self) -> Result<(), Failure> {
        let used = self.used.borrow();
        if let Some(key) = self.values.keys().find(|k| !used.contains(*k)) {
            let source = self
                .path
                .as_ref()
                .map_or_else(String::new, |p| format!("{}: ", p.display()));
            return Err(Failure::usage(format!("{source}unknown config key `{key}`")));
        }
        Ok(())
    }
}

fn parse_time_unit(raw: &str) -> Result<TimeUnit, Failure> {
    match raw {
        "days" => Ok(TimeUnit::Days),
        "epoch-seconds" | "epoch_seconds" => Ok(TimeUnit::EpochSeconds),
        other => Err(Failure::usage(format!(
            "invalid time unit `{other}` (expected days or epoch-seconds)"
        ))),
    }
}

fn parse_grid(key: &str, raw: &str) -> Result<Vec<f64>, Failure> {
    let values: Vec<f64> = raw
        .split(',')
        .filter(|s| !s.trim().is_empty())
        .map(|s| parse_value::<f64>(key, s))
        .collect::<Result<_, _>>()?;
    if values.is_empty() {
        return Err(Failure::usage(format!("{key} must list at least one value")));
    }
    Ok(values)
}

fn absolute(path: PathBuf) -> PathBuf {
    if path.is_absolute() {
        path
    } else {
        std::env::current_dir().map(|d| d.join(&path)).unwrap_or(path)
    }
}

fn resolve_data(args: DataArgs, cfg: &ConfigFile) -> Result<DataSpec, Failure> {
    let path = cfg.require(args.data, "data")?;
    let hash_dim = cfg.pick_or(args.hash_dim, "hash_dim", 1 << 14)?;
    let time_unit = match cfg.pick::<String>(args.time_unit, "time_unit")? {
        Some(raw) => parse_time_unit(&raw)?,
        None => TimeUnit::Days,
    };
    Ok(DataSpec {
        path: absolute(path),
        hash_dim,
        time_unit,
    })
}

fn resolve_model(args: ModelArgs, seed: Option<u64>, cfg: &ConfigFile) -> Result<ModelSpec, Failure> {
    let mode: Mode = match cfg.pick::<String>(args.mode, "mode")? {
        Some(raw) => raw.parse()?,
        None => Mode::Erm,
    };
    let defaults = mode.default_weights();
    let weights = LossWeights {
        lambda_cr: cfg.pick_or(args.lambda_cr, "lambda_cr", defaults.lambda_cr)?,
        lambda_rcr: cfg.pick_or(args.lambda_rcr, "lambda_rcr", defaults.lambda_rcr)?,
    };
    let phi: ScoringFunction = match cfg.pick::<String>(args.phi, "phi")? {
        Some(raw) => raw.parse()?,
        None => ScoringFunction::default(),
    };
    let arch: ArchKind = match cfg.pick::<String>(args.arch, "arch")? {
        Some(raw) => raw.parse()?,
        None => ArchKind::DeepFm,
    };
    let delta = cfg.pick_or(args.delta, "delta", DEFAULT_DELTA)?;
    let defaults_opt = AdagradConfig::default();
    Ok(ModelSpec {
        mode,
        weights,
        phi,
        arch,
        embedding_dim: cfg.pick_or(args.embedding_dim, "embedding_dim", DEFAULT_EMBEDDING_DIM)?,
        hidden_units: cfg.pick_or(args.hidden_units, "hidden_units", DEFAULT_HIDDEN_UNITS)?,
        epochs: cfg.pick_or(args.epochs, "epochs", DEFAULT_EPOCHS)?,
        delta: delta.to_string(),
        batch_size: cfg.pick_or(args.batch_size, "batch_size", DEFAULT_BATCH_SIZE)?,
        optimizer: AdagradConfig {
            lr: cfg.pick_or(args.lr, "lr", defaults_opt.lr)?,
            ..defaults_opt
        },
        kd_alpha: cfg.pick_or(args.kd_alpha, "kd_alpha", DEFAULT_KD_ALPHA)?,
        kd_temperature: cfg.pick_or(args.kd_temperature, "kd_temperature", DEFAULT_KD_TEMPERATURE)?,
        rkd_weight: cfg.pick_or(args.rkd_weight, "rkd_weight", DEFAULT_RKD_WEIGHT)?,
        seed: cfg.pick_or(seed, "seed", 0)?,
    })
}

/// Merges flags, config file and defaults into a complete invocation.
pub fn resolve(command: Command) -> Result<Invocation, Failure> {
    let invocation = match command {
        Command::Gen(a) => {
            let cfg = ConfigFile::load(a.common.config.as_deref())?;
            let mut generator = DriftStreamConfig::new(
                cfg.pick_or(a.days, "days", 10)?,
                cfg.pick_or(a.examples_per_day, "examples_per_day", 5000)?,
                cfg.pick_or(a.drift_rate, "drift_rate", 0.2)?,
                cfg.pick_or(a.base_ctr, "base_ctr", 0.1)?,
                cfg.pick_or(a.common.seed, "seed", 0)?,
            );
            generator.field_count = cfg.pick_or(a.field_count, "field_count", generator.field_count)?;
            generator.vocab_size = cfg.pick_or(a.vocab_size, "vocab_size", generator.vocab_size)?;
            generator.hash_dim = cfg.pick_or(a.hash_dim, "hash_dim", generator.hash_dim)?;
            generator.zipf_exponent = cfg.pick_or(a.zipf_exponent, "zipf_exponent", generator.zipf_exponent)?;
            generator.weight_scale = cfg.pick_or(a.weight_scale, "weight_scale", generator.weight_scale)?;
            generator.validate()?;
            let out = absolute(cfg.require(a.common.out, "out")?);
            cfg.finish()?;
            Invocation::Gen(GenSpec { generator, out })
        }
        Command::Train(a) => {
            let cfg = ConfigFile::load(a.common.config.as_deref())?;
            let spec = TrainSpec {
                data: resolve_data(a.data, &cfg)?,
                model: resolve_model(a.model, a.common.seed, &cfg)?,
                validation_days: cfg.pick_or(a.validation_days, "validation_days", 1)?,
                test_days: cfg.pick_or(a.test_days, "test_days", 1)?,
                teacher: cfg.pick(a.teacher, "teacher")?.map(absolute),
                out: absolute(cfg.require(a.common.out, "out")?),
            };
            cfg.finish()?;
            spec.model.train_config(1, 2, Setting::Standard)?;
            Invocation::Train(spec)
        }
        Command::Onepass(a) => {
            let cfg = ConfigFile::load(a.common.config.as_deref())?;
            let cold_start = a.cold_start || cfg.pick_or::<bool>(None, "cold_start", false)?;
            let compare_with = cfg
                .pick::<String>(a.compare_with, "compare_with")?
                .map(|m| m.parse::<Mode>())
                .transpose()?;
            let spec = OnePassSpec {
                data: resolve_data(a.data, &cfg)?,
                model: resolve_model(a.model, a.common.seed, &cfg)?,
                warmup_days: cfg.require(a.warmup_days, "warmup_days")?,
                cycle_days: cfg.require(a.cycle_days, "cycle_days")?,
                warm_start: !cold_start,
                compare_with,
                out: absolute(cfg.require(a.common.out, "out")?),
            };
            cfg.finish()?;
            spec.model.train_config(1, 2, Setting::OnePass)?;
            Invocation::Onepass(spec)
        }
        Command::Eval(a) => {
            let cfg = ConfigFile::load(a.common.config.as_deref())?;
            if cfg.pick(a.common.seed, "seed")?.is_some() {
                return Err(Failure::usage("eval does not take a seed"));
            }
            let spec = EvalSpec {
                snapshot: absolute(cfg.require(a.snapshot, "snapshot")?),
                data: absolute(cfg.require(a.data, "data")?),
                teacher_snapshot: cfg.pick(a.teacher_snapshot, "teacher_snapshot")?.map(absolute),
                out: cfg.pick(a.common.out, "out")?.map(absolute),
            };
            cfg.finish()?;
            Invocation::Eval(spec)
        }
        Command::Sweep(a) => {
            let cfg = ConfigFile::load(a.common.config.as_deref())?;
            let grid_cr = parse_grid("grid_cr", &cfg.require::<String>(a.grid_cr, "grid_cr")?)?;
            let grid_rcr = parse_grid("grid_rcr", &cfg.require::<String>(a.grid_rcr, "grid_rcr")?)?;
            let mut model_args = a.model;
            if model_args.mode.is_none() && !cfg.values.contains_key("mode") {
                model_args.mode = Some("cr".into());
            }
            let spec = SweepSpec {
                data: resolve_data(a.data, &cfg)?,
                model: resolve_model(model_args, a.common.seed, &cfg)?,
                validation_days: cfg.pick_or(a.validation_days, "validation_days", 1)?,
                test_days: cfg.pick_or(a.test_days, "test_days", 1)?,
                grid_cr,
                grid_rcr,
                out: absolute(cfg.require(a.common.out, "out")?),
            };
            cfg.finish()?;
            if !matches!(spec.model.mode, Mode::Cr | Mode::Rcr) {
                return Err(Failure::usage(
                    "sweep varies the ranking-loss weights; use --mode cr or rcr",
                ));
            }
            for &w in spec.grid_cr.iter().chain(&spec.grid_rcr) {
                LossWeights::new(w, 0.0)?;
            }
            spec.model.train_config(1, 2, Setting::Standard)?;
            Invocation::Sweep(spec)
        }
        Command::Replay(_) => unreachable!("replay is handled before resolution"),
    };
    Ok(invocation)
}
