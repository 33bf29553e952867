//! Training orchestration: multi-epoch training with early stopping, the
//! serve-then-retrain loop, and the baselines that share its harness.
//!
//! Examples are always visited in `(timestamp, id)` order. Two runs whose
//! configs differ only in loss weights therefore see identical batches and
//! identical initial parameters.

use std::collections::HashMap;
use std::fs::File;
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::{sort_for_training, DatasetSplit, Example};
use crate::losses::{
    ce_loss, BatchLogits, LossWeights, Objective, ScoringFunction, DEFAULT_KD_ALPHA, DEFAULT_KD_TEMPERATURE,
    DEFAULT_RKD_WEIGHT,
};
use crate::metrics::MetricReport;
use crate::models::{Adagrad, AdagradConfig, ArchDescriptor, GradientBuffer, ModelSnapshot};

/// Which loss a run optimizes. `Cr` and `Rcr` share one objective and differ
/// only in their default weights.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Mode {
    Erm,
    Cr,
    Rcr,
    Kd,
    Rkd,
}

impl Mode {
    pub fn default_weights(self) -> LossWeights {
        match self {
            Mode::Cr => LossWeights {
                lambda_cr: 0.4,
                lambda_rcr: 0.5,
            },
            Mode::Rcr => LossWeights {
                lambda_cr: 0.0,
                lambda_rcr: 0.5,
            },
            _ => LossWeights::default(),
        }
    }

    pub fn as_str(self) -> &'static str {
        match self {
            Mode::Erm => "erm",
            Mode::Cr => "cr",
            Mode::Rcr => "rcr",
            Mode::Kd => "kd",
            Mode::Rkd => "rkd",
        }
    }
}

impl std::str::FromStr for Mode {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "erm" => Ok(Mode::Erm),
            "cr" => Ok(Mode::Cr),
            "rcr" => Ok(Mode::Rcr),
            "kd" => Ok(Mode::Kd),
            "rkd" => Ok(Mode::Rkd),
            other => Err(Error::InvalidConfig(format!(
                "unknown mode `{other}` (expected erm, cr, rcr, kd or rkd)"
            ))),
        }
    }
}

/// Training regime.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Setting {
    /// Daily serve-then-train cycles, one pass per day.
    OnePass,
    /// Multi-epoch training with early stopping on validation loss.
    #[default]
    Standard,
}

/// `f64` that round-trips infinity through JSON as the string `"inf"`.
mod extended_f64 {
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(value: &f64, serializer: S) -> Result<S::Ok, S::Error> {
        if value.is_infinite() && *value > 0.0 {
            serializer.serialize_str("inf")
        } else {
            serializer.serialize_f64(*value)
        }
    }

    #[derive(Deserialize)]
    #[serde(untagged)]
    enum Repr {
        Number(f64),
        Text(String),
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(deserializer: D) -> Result<f64, D::Error> {
        match Repr::deserialize(deserializer)? {
            Repr::Number(v) => Ok(v),
            Repr::Text(s) => s.parse::<f64>().map_err(serde::de::Error::custom),
        }
    }
}

pub const DEFAULT_BATCH_SIZE: usize = 256;
pub const DEFAULT_EPOCHS: usize = 10;
pub const DEFAULT_DELTA: f64 = 1e-4;

/// Everything a training run depends on.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub arch: ArchDescriptor,
    pub optimizer: AdagradConfig,
    pub batch_size: usize,
    pub mode: Mode,
    pub setting: Setting,
    pub weights: LossWeights,
    pub phi: ScoringFunction,
    pub kd_alpha: f64,
    pub kd_temperature: f64,
    pub rkd_weight: f64,
    pub epochs: usize,
    /// Minimum validation-loss improvement between epochs; training stops
    /// once an epoch improves by less.
    #[serde(with = "extended_f64")]
    pub delta: f64,
    pub seed: u64,
    /// Fixed teacher for standard training instead of the previous epoch.
    pub teacher_path: Option<PathBuf>,
    /// One-pass successors start from the online snapshot rather than a
    /// fresh initialization.
    pub warm_start: bool,
}

impl TrainConfig {
    pub fn new(arch: ArchDescriptor, mode: Mode) -> Self {
        TrainConfig {
            arch,
            optimizer: AdagradConfig::default(),
            batch_size: DEFAULT_BATCH_SIZE,
            mode,
            setting: Setting::Standard,
            weights: mode.default_weights(),
            phi: ScoringFunction::default(),
            kd_alpha: DEFAULT_KD_ALPHA,
            kd_temperature: DEFAULT_KD_TEMPERATURE,
            rkd_weight: DEFAULT_RKD_WEIGHT,
            epochs: DEFAULT_EPOCHS,
            delta: DEFAULT_DELTA,
            seed: 0,
            teacher_path: None,
            warm_start: true,
        }
    }

    pub fn validate(&self) -> Result<()> {
        self.arch.validate()?;
        if self.batch_size == 0 {
            return Err(Error::InvalidConfig("batch_size must be positive".into()));
        }
        if self.epochs == 0 {
            return Err(Error::InvalidConfig("epochs must be positive".into()));
        }
        if self.delta.is_nan() || self.delta < 0.0 {
            return Err(Error::InvalidConfig(format!("delta must be >= 0, got {}", self.delta)));
        }
        if self.setting == Setting::Standard && self.delta <= 0.0 {
            return Err(Error::InvalidConfig(
                "delta must be positive in the standard setting".into(),
            ));
        }
        let AdagradConfig {
            lr,
            eps,
            initial_accumulator,
        } = self.optimizer;
        if !(lr.is_finite() && lr > 0.0)
            || !(eps.is_finite() && eps >= 0.0)
            || initial_accumulator.is_nan()
            || initial_accumulator < 0.0
        {
            return Err(Error::InvalidConfig(format!(
                "invalid optimizer settings {:?}",
                self.optimizer
            )));
        }
        self.weights.validate()?;
        if !matches!(self.mode, Mode::Cr | Mode::Rcr) && !self.weights.is_zero() {
            return Err(Error::InvalidConfig(format!(
                "mode {} has no teacher ranking terms; lambda_cr and lambda_rcr must be 0",
                self.mode.as_str()
            )));
        }
        self.objective().validate()
    }

    pub fn objective(&self) -> Objective {
        match self.mode {
            Mode::Erm => Objective::Erm,
            Mode::Cr | Mode::Rcr => Objective::ConfidenceRanking {
                weights: self.weights,
                phi: self.phi,
            },
            Mode::Kd => Objective::Kd {
                alpha: self.kd_alpha,
                temperature: self.kd_temperature,
            },
            Mode::Rkd => Objective::Rkd {
                weight: self.rkd_weight,
            },
        }
    }
}

/// One logged online prediction.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct LogRecord {
    pub example_id: u64,
    pub snapshot_version: u64,
    pub online_logit: f64,
}

/// Append-only record of served logits, keyed by `(example_id, version)`.
#[derive(Clone, Debug, Default)]
pub struct PredictionLog {
    records: Vec<LogRecord>,
    index: HashMap<(u64, u64), usize>,
}

const LOG_HEADER: [&str; 3] = ["example_id", "snapshot_version", "online_logit"];

impl PredictionLog {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn append(&mut self, record: LogRecord) -> Result<()> {
        if !record.online_logit.is_finite() {
            return Err(Error::NonFinite(format!(
                "online logit of example {} at version {}",
                record.example_id, record.snapshot_version
            )));
        }
        let key = (record.example_id, record.snapshot_version);
        if self.index.contains_key(&key) {
            return Err(Error::DuplicateLogRecord {
                id: record.example_id,
                version: record.snapshot_version,
            });
        }
        self.index.insert(key, self.records.len());
        self.records.push(record);
        Ok(())
    }

    pub fn extend_from(&mut self, other: &PredictionLog) -> Result<()> {
        other.records.iter().try_for_each(|r| self.append(*r))
    }

    pub fn get(&self, example_id: u64, snapshot_version: u64) -> Option<f64> {
        self.index
            .get(&(example_id, snapshot_version))
            .map(|&i| self.records[i].online_logit)
    }

    pub fn records(&self) -> &[LogRecord] {
        &self.records
    }

    pub fn len(&self) -> usize {
        self.records.len()
    }

    pub fn is_empty(&self) -> bool {
        self.records.is_empty()
    }

    /// Writes `example_id,snapshot_version,online_logit`; logits use the
    /// shortest representation that parses back to the same `f64`.
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = BufWriter::new(writer);
        let write_err = |e: std::io::Error| Error::Write(e.to_string());
        writeln!(out, "{}", LOG_HEADER.join(",")).map_err(write_err)?;
        for r in &self.records {
            writeln!(out, "{},{},{}", r.example_id, r.snapshot_version, r.online_logit).map_err(write_err)?;
        }
        out.flush().map_err(write_err)
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(file)
    }

    pub fn read_csv<R: Read>(reader: R, path: &Path) -> Result<Self> {
        let csv_err = |source: csv::Error| Error::Csv {
            path: path.to_path_buf(),
            source,
        };
        let mut rdr = csv::ReaderBuilder::new().has_headers(true).from_reader(reader);
        let header = rdr.headers().map_err(csv_err)?.clone();
        if header.iter().collect::<Vec<_>>() != LOG_HEADER {
            return Err(Error::MalformedRow {
                path: path.to_path_buf(),
                line: 1,
                reason: format!("expected header `{}`", LOG_HEADER.join(",")),
            });
        }
        let mut log = PredictionLog::new();
        for row in rdr.records() {
            let row = row.map_err(csv_err)?;
            let line = row.position().map_or(0, |p| p.line());
            let malformed = |reason: String| Error::MalformedRow {
                path: path.to_path_buf(),
                line,
                reason,
            };
            if row.len() != 3 {
                return Err(malformed(format!("expected 3 columns, found {}", row.len())));
            }
            let example_id = row[0]
                .parse()
                .map_err(|_| malformed(format!("bad example id `{}`", &row[0])))?;
            let snapshot_version = row[1]
                .parse()
                .map_err(|_| malformed(format!("bad version `{}`", &row[1])))?;
            let online_logit = row[2]
                .parse()
                .map_err(|_| malformed(format!("bad logit `{}`", &row[2])))?;
            log.append(LogRecord {
                example_id,
                snapshot_version,
                online_logit,
            })?;
        }
        Ok(log)
    }

    pub fn load_csv(path: &Path) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        Self::read_csv(file, path)
    }
}

pub const CYCLE_REPORT_SCHEMA: u32 = 1;

/// Outcome of one serve-then-train day.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CycleReport {
    pub schema_version: u32,
    /// Day key of the traffic (timestamp of its first example for [`one_pass_cycle`]).
    pub day: u64,
    pub served_version: u64,
    pub produced_version: u64,
    /// Metrics of the served snapshot on the day's traffic, before training.
    pub serve: MetricReport,
    /// Per-batch training loss.
    pub train_loss: Vec<f64>,
}

impl CycleReport {
    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("cycle report serializes")
    }
}

/// Mean losses of one epoch.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub validation_loss: Option<f64>,
}

/// Result of a multi-epoch run.
#[derive(Clone, Debug)]
pub struct TrainOutcome {
    /// Snapshot with the lowest validation loss (the last one without a
    /// validation set).
    pub snapshot: ModelSnapshot,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    optimizer: Adagrad,
}

/// Where the teacher logits of a batch come from.
enum Teacher<'a> {
    None,
    Snapshot(&'a ModelSnapshot),
    Log { log: &'a PredictionLog, version: u64 },
}

impl Teacher<'_> {
    fn logits(&self, batch: &[Example]) -> Result<Vec<Option<f64>>> {
        match self {
            Teacher::None => Ok(vec![None; batch.len()]),
            Teacher::Snapshot(s) => Ok(s.forward_batch(batch)?.into_iter().map(Some).collect()),
            Teacher::Log { log, version } => batch
                .iter()
                .map(|e| {
                    log.get(e.id, *version)
                        .map(Some)
                        .ok_or(Error::MissingTeacher { id: e.id })
                })
                .collect(),
        }
    }
}

/// One pass over `examples` (already in training order), one Adagrad step
/// per mini-batch. Returns the updated model and the per-batch losses.
fn train_pass(
    mut model: ModelSnapshot,
    examples: &[Example],
    objective: &Objective,
    teacher: &Teacher,
    batch_size: usize,
    optimizer: &mut Adagrad,
) -> Result<(ModelSnapshot, Vec<f64>)> {
    let mut grads = GradientBuffer::for_snapshot(&model);
    let mut losses = Vec::with_capacity(examples.len().div_ceil(batch_size));
    let no_teacher = Teacher::None;
    let teacher = if objective.needs_teacher() {
        teacher
    } else {
        &no_teacher
    };
    for batch in examples.chunks(batch_size) {
        let ids: Vec<u64> = batch.iter().map(|e| e.id).collect();
        let labels: Vec<bool> = batch.iter().map(|e| e.label).collect();
        let student = model.forward_batch(batch)?;
        let teacher_logits = teacher.logits(batch)?;
        let logits = BatchLogits::new(&ids, &student, &teacher_logits, &labels)?;
        let out = objective.loss(&logits)?;
        if !out.value.is_finite() {
            return Err(Error::NonFinite(format!(
                "training loss on batch starting at example {}",
                ids[0]
            )));
        }
        grads.clear();
        for (example, &g) in batch.iter().zip(&out.grad) {
            model.backward(example, g, &mut grads)?;
        }
        model = model.into_updated(&grads, optimizer)?;
        losses.push(out.value);
    }
    Ok((model, losses))
}

fn mean(values: &[f64]) -> f64 {
    if values.is_empty() {
        0.0
    } else {
        values.iter().sum::<f64>() / values.len() as f64
    }
}

/// Mean cross-entropy of `model` on `examples`; `None` when empty.
pub fn evaluation_loss(model: &ModelSnapshot, examples: &[Example]) -> Result<Option<f64>> {
    if examples.is_empty() {
        return Ok(None);
    }
    let ids: Vec<u64> = examples.iter().map(|e| e.id).collect();
    let labels: Vec<bool> = examples.iter().map(|e| e.label).collect();
    let student = model.forward_batch(examples)?;
    let teacher = vec![None; examples.len()];
    Ok(Some(
        ce_loss(&BatchLogits::new(&ids, &student, &teacher, &labels)?)?.value,
    ))
}

enum EpochTeacher<'a> {
    Never,
    PreviousEpoch,
    Fixed(&'a ModelSnapshot),
}

fn sorted(examples: &[Example]) -> Vec<Example> {
    let mut out = examples.to_vec();
    sort_for_training(&mut out);
    out
}

fn fit(
    split: &DatasetSplit,
    config: &TrainConfig,
    objective: Objective,
    teacher: EpochTeacher,
) -> Result<TrainOutcome> {
    config.validate()?;
    if split.train.is_empty() {
        return Err(Error::InvalidConfig("training split is empty".into()));
    }
    let train = sorted(&split.train);
    let validation = sorted(&split.validation);

    let initial = ModelSnapshot::init(config.arch, config.seed)?;
    let mut optimizer = Adagrad::new(config.optimizer, config.arch.param_count());
    let mut previous_loss = evaluation_loss(&initial, &validation)?;
    let mut model = initial;
    let mut best: Option<(ModelSnapshot, f64, usize)> = None;
    let mut history = Vec::new();

    for epoch in 1..=config.epochs {
        let end_of_previous = model.clone();
        let (epoch_objective, epoch_teacher) = match teacher {
            EpochTeacher::Never => (Objective::Erm, Teacher::None),
            EpochTeacher::PreviousEpoch if epoch == 1 => (Objective::Erm, Teacher::None),
            EpochTeacher::PreviousEpoch => (objective, Teacher::Snapshot(&end_of_previous)),
            EpochTeacher::Fixed(t) => (objective, Teacher::Snapshot(t)),
        };
        let (trained, losses) = train_pass(
            model,
            &train,
            &epoch_objective,
            &epoch_teacher,
            config.batch_size,
            &mut optimizer,
        )?;
        model = trained.with_version(1);
        let validation_loss = evaluation_loss(&model, &validation)?;
        history.push(EpochRecord {
            epoch,
            train_loss: mean(&losses),
            validation_loss,
        });
        let Some(loss) = validation_loss else {
            best = Some((model.clone(), f64::NAN, epoch));
            continue;
        };
        if !loss.is_finite() {
            return Err(Error::NonFinite(format!("validation loss after epoch {epoch}")));
        }
        if best.as_ref().is_none_or(|(_, b, _)| loss < *b) {
            best = Some((model.clone(), loss, epoch));
        }
        let improvement = previous_loss.map_or(f64::INFINITY, |p| p - loss);
        if improvement < config.delta {
            break;
        }
        previous_loss = Some(loss);
    }
    let (snapshot, _, best_epoch) = best.expect("at least one epoch ran");
    Ok(TrainOutcome {
        snapshot,
        best_epoch,
        history,
        optimizer,
    })
}

/// Mini-batch cross-entropy training with early stopping, keeping the
/// outcome details.
pub fn fit_erm(split: &DatasetSplit, config: &TrainConfig) -> Result<TrainOutcome> {
    fit(split, config, Objective::Erm, EpochTeacher::Never)
}

pub fn train_erm(split: &DatasetSplit, config: &TrainConfig) -> Result<ModelSnapshot> {
    Ok(fit_erm(split, config)?.snapshot)
}

/// Multi-epoch training with the configured objective. Without a fixed
/// `teacher`, epoch 1 is plain cross-entropy and every later epoch uses the
/// previous epoch's final snapshot as teacher.
pub fn fit_standard(
    split: &DatasetSplit,
    config: &TrainConfig,
    teacher: Option<&ModelSnapshot>,
) -> Result<TrainOutcome> {
    if let Some(t) = teacher {
        if t.arch().field_count != config.arch.field_count {
            return Err(Error::FieldCountMismatch {
                expected: config.arch.field_count,
                got: t.arch().field_count,
            });
        }
    }
    let epoch_teacher = match teacher {
        Some(t) => EpochTeacher::Fixed(t),
        None => EpochTeacher::PreviousEpoch,
    };
    fit(split, config, config.objective(), epoch_teacher)
}

/// [`fit_standard`] with the teacher loaded from `config.teacher_path` if set.
pub fn train_standard_with_teacher(split: &DatasetSplit, config: &TrainConfig) -> Result<ModelSnapshot> {
    let teacher = config.teacher_path.as_deref().map(ModelSnapshot::load).transpose()?;
    Ok(fit_standard(split, config, teacher.as_ref())?.snapshot)
}

/// Logs `snapshot`'s logit for every example and reports the day's metrics.
pub fn serve_day(snapshot: &ModelSnapshot, day: &[Example]) -> Result<(PredictionLog, MetricReport)> {
    serve_day_against(snapshot, day, None)
}

/// Like [`serve_day`]; with `baseline`, the report also carries the ranking
/// scores of `snapshot` against it.
pub fn serve_day_against(
    snapshot: &ModelSnapshot,
    day: &[Example],
    baseline: Option<&ModelSnapshot>,
) -> Result<(PredictionLog, MetricReport)> {
    let logits = snapshot.forward_batch(day)?;
    let mut log = PredictionLog::new();
    for (example, &online_logit) in day.iter().zip(&logits) {
        log.append(LogRecord {
            example_id: example.id,
            snapshot_version: snapshot.version(),
            online_logit,
        })?;
    }
    let ids: Vec<u64> = day.iter().map(|e| e.id).collect();
    let labels: Vec<bool> = day.iter().map(|e| e.label).collect();
    let baseline_logits = baseline.map(|b| b.forward_batch(day)).transpose()?;
    let report = MetricReport::evaluate(&ids, &logits, &labels, baseline_logits.as_deref())?;
    Ok((log, report))
}

/// Trains the successor of `online` with one pass over `day`, using the
/// logged online logits as teacher. `online` is left untouched.
/// `optimizer` carries Adagrad state between cycles; with
/// `config.warm_start == false` a fresh model and optimizer are used.
pub fn one_pass_cycle(
    online: &ModelSnapshot,
    day: &[Example],
    log: &PredictionLog,
    config: &TrainConfig,
    optimizer: &mut Adagrad,
) -> Result<(ModelSnapshot, CycleReport)> {
    config.validate()?;
    let day = sorted(day);
    let version = online.version();
    let mut served = Vec::with_capacity(day.len());
    for example in &day {
        served.push(
            log.get(example.id, version)
                .ok_or(Error::MissingTeacher { id: example.id })?,
        );
    }
    let ids: Vec<u64> = day.iter().map(|e| e.id).collect();
    let labels: Vec<bool> = day.iter().map(|e| e.label).collect();
    let serve = MetricReport::evaluate(&ids, &served, &labels, None)?;

    let teacher = Teacher::Log { log, version };
    let objective = config.objective();
    let (trained, train_loss) = if config.warm_start {
        train_pass(online.clone(), &day, &objective, &teacher, config.batch_size, optimizer)?
    } else {
        let fresh = ModelSnapshot::init(config.arch, config.seed)?;
        let mut fresh_optimizer = Adagrad::new(config.optimizer, config.arch.param_count());
        train_pass(
            fresh,
            &day,
            &objective,
            &teacher,
            config.batch_size,
            &mut fresh_optimizer,
        )?
    };
    let successor = trained.with_version(version + 1);
    let report = CycleReport {
        schema_version: CYCLE_REPORT_SCHEMA,
        day: day.first().map_or(0, |e| e.timestamp),
        served_version: version,
        produced_version: successor.version(),
        serve,
        train_loss,
    };
    Ok((successor, report))
}

/// Output of a one-pass experiment.
#[derive(Clone, Debug)]
pub struct OnePassRun {
    pub warmup: ModelSnapshot,
    pub reports: Vec<CycleReport>,
    /// Every served logit, across all cycles.
    pub log: PredictionLog,
    pub final_snapshot: ModelSnapshot,
}

/// Warmup pass over the first `warmup_days` days, then `cycle_days`
/// serve-then-train cycles. Each cycle's serve report includes ranking
/// scores against the previously served snapshot when there is one.
pub fn run_one_pass_experiment(
    days: &[(u64, Vec<Example>)],
    warmup_days: usize,
    cycle_days: usize,
    config: &TrainConfig,
) -> Result<OnePassRun> {
    config.validate()?;
    if warmup_days == 0 {
        return Err(Error::InvalidConfig("warmup needs at least one day".into()));
    }
    let required = warmup_days + cycle_days;
    if days.len() < required {
        return Err(Error::InsufficientDays {
            required,
            available: days.len(),
        });
    }
    let warmup_split = DatasetSplit {
        train: days[..warmup_days]
            .iter()
            .flat_map(|(_, d)| d.iter().cloned())
            .collect(),
        validation: Vec::new(),
        test: Vec::new(),
    };
    let warmup_config = TrainConfig {
        epochs: 1,
        setting: Setting::OnePass,
        ..config.clone()
    };
    let outcome = fit_erm(&warmup_split, &warmup_config)?;
    let mut optimizer = outcome.optimizer;
    let warmup = outcome.snapshot;

    let mut online = warmup.clone();
    let mut previous: Option<ModelSnapshot> = None;
    let mut reports = Vec::with_capacity(cycle_days);
    let mut full_log = PredictionLog::new();
    for (day_key, day) in &days[warmup_days..required] {
        let day = sorted(day);
        let (log, serve) = serve_day_against(&online, &day, previous.as_ref())?;
        let (successor, mut report) = one_pass_cycle(&online, &day, &log, config, &mut optimizer)?;
        report.day = *day_key;
        report.serve = serve;
        full_log.extend_from(&log)?;
        reports.push(report);
        previous = Some(std::mem::replace(&mut online, successor));
    }
    Ok(OnePassRun {
        warmup,
        reports,
        log: full_log,
        final_snapshot: online,
    })
}

/// Input of [`run_baseline`].
#[derive(Clone, Copy, Debug)]
pub enum RunData<'a> {
    Split(&'a DatasetSplit),
    Stream {
        days: &'a [(u64, Vec<Example>)],
        warmup_days: usize,
        cycle_days: usize,
    },
}

#[derive(Clone, Debug)]
pub enum RunOutput {
    Standard(TrainOutcome),
    OnePass(OnePassRun),
}

/// Runs any mode through the shared harness: the standard setting on a
/// split, or the one-pass setting on a day stream.
pub fn run(data: RunData, config: &TrainConfig) -> Result<RunOutput> {
    match (config.setting, data) {
        (Setting::Standard, RunData::Split(split)) => {
            let teacher = config.teacher_path.as_deref().map(ModelSnapshot::load).transpose()?;
            Ok(RunOutput::Standard(fit_standard(split, config, teacher.as_ref())?))
        }
        (
            Setting::OnePass,
            RunData::Stream {
                days,
                warmup_days,
                cycle_days,
            },
        ) => Ok(RunOutput::OnePass(run_one_pass_experiment(
            days,
            warmup_days,
            cycle_days,
            config,
        )?)),
        (setting, _) => Err(Error::InvalidConfig(format!(
            "data shape does not match setting {setting:?}"
        ))),
    }
}

/// [`run`] restricted to the baseline modes (ERM, KD, RKD).
pub fn run_baseline(data: RunData, config: &TrainConfig) -> Result<RunOutput> {
    if !matches!(config.mode, Mode::Erm | Mode::Kd | Mode::Rkd) {
        return Err(Error::InvalidConfig(format!(
            "{} is not a baseline mode",
            config.mode.as_str()
        )));
    }
    run(data, config)
}
