//! Feature ingestion: hashing of categorical field values, CSV loading,
//! temporal splitting, and a synthetic drifting click stream.
//!
//! Every field is single-valued. A raw value is hashed into the field's own
//! index space `[0, hash_dim)`; index 0 is reserved for a missing (empty)
//! value so that absent fields still contribute a well-defined parameter.

use std::collections::BTreeSet;
use std::fs::File;
use std::io::{Read, Write};
use std::path::Path;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal, Zipf};
use serde::{Deserialize, Serialize};
use twox_hash::XxHash64;

use crate::error::{Error, Result};
use crate::sigmoid;

/// Seed constant for field hashing. Changing it changes every hashed index.
pub const HASH_SEED: u64 = 0x9e37_79b9_7f4a_7c15;

const ID_COLUMN: &str = "id";
const TIMESTAMP_COLUMN: &str = "timestamp";
const LABEL_COLUMN: &str = "label";
const SECONDS_PER_DAY: u64 = 86_400;

/// Hashes a raw field value into `[0, hash_dim)`.
///
/// Empty values map to the reserved index 0; all other values land in
/// `[1, hash_dim)`. Each field hashes with its own seed so equal strings in
/// different fields are independent.
pub fn hash_field(field_index: usize, raw_value: &str, hash_dim: usize) -> u32 {
    debug_assert!(hash_dim >= 2, "hash_dim must be at least 2");
    if raw_value.is_empty() {
        return 0;
    }
    let seed = HASH_SEED.wrapping_add(field_index as u64);
    let h = XxHash64::oneshot(seed, raw_value.as_bytes());
    (1 + h % (hash_dim as u64 - 1)) as u32
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct FieldSchema {
    field_names: Vec<String>,
    hash_dim: usize,
}

impl FieldSchema {
    pub fn new(field_names: Vec<String>, hash_dim: usize) -> Result<Self> {
        if field_names.is_empty() {
            return Err(Error::InvalidConfig("schema needs at least one field".into()));
        }
        if hash_dim < 2 {
            return Err(Error::InvalidConfig(format!("hash_dim must be >= 2, got {hash_dim}")));
        }
        let mut seen = BTreeSet::new();
        for name in &field_names {
            if [ID_COLUMN, TIMESTAMP_COLUMN, LABEL_COLUMN].contains(&name.as_str()) {
                return Err(Error::InvalidConfig(format!(
                    "field name `{name}` collides with a mandatory column"
                )));
            }
            if !seen.insert(name.as_str()) {
                return Err(Error::InvalidConfig(format!("duplicate field name `{name}`")));
            }
        }
        Ok(FieldSchema { field_names, hash_dim })
    }

    /// Schema with fields named `f0, f1, ...`.
    pub fn numbered(field_count: usize, hash_dim: usize) -> Result<Self> {
        Self::new((0..field_count).map(|f| format!("f{f}")).collect(), hash_dim)
    }

    /// Reads the header of a CSV file and takes every non-mandatory column
    /// as a field, in header order.
    pub fn from_csv_header(path: &Path, hash_dim: usize) -> Result<Self> {
        let file = File::open(path).map_err(|e| Error::io(path, e))?;
        let mut reader = csv::Reader::from_reader(file);
        let headers = reader.headers().map_err(|source| Error::Csv {
            path: path.to_path_buf(),
            source,
        })?;
        for column in [ID_COLUMN, TIMESTAMP_COLUMN, LABEL_COLUMN] {
            if !headers.iter().any(|h| h == column) {
                return Err(Error::MissingColumn {
                    path: path.to_path_buf(),
                    column: column.into(),
                });
            }
        }
        let names = headers
            .iter()
            .filter(|h| ![ID_COLUMN, TIMESTAMP_COLUMN, LABEL_COLUMN].contains(h))
            .map(str::to_owned)
            .collect();
        Self::new(names, hash_dim)
    }

    pub fn field_names(&self) -> &[String] {
        &self.field_names
    }

    pub fn field_count(&self) -> usize {
        self.field_names.len()
    }

    pub fn hash_dim(&self) -> usize {
        self.hash_dim
    }
}

/// One labeled impression.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Example {
    pub id: u64,
    pub timestamp: u64,
    pub label: bool,
    /// One hashed index per field.
    pub indices: Vec<u32>,
}

/// How raw timestamps map onto days.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum TimeUnit {
    /// Timestamps already are day indices.
    #[default]
    Days,
    /// Timestamps are epoch seconds, bucketed into UTC days.
    EpochSeconds,
}

impl TimeUnit {
    pub fn day_of(self, timestamp: u64) -> u64 {
        match self {
            TimeUnit::Days => timestamp,
            TimeUnit::EpochSeconds => timestamp / SECONDS_PER_DAY,
        }
    }
}

/// Loads examples from a CSV file with header `id,timestamp,label,<fields...>`.
pub fn load_csv(path: &Path, schema: &FieldSchema) -> Result<Vec<Example>> {
    let file = File::open(path).map_err(|e| Error::io(path, e))?;
    read_csv(file, path, schema)
}

/// Same as [`load_csv`] over any reader; `path` is only used in error messages.
pub fn read_csv<R: Read>(reader: R, path: &Path, schema: &FieldSchema) -> Result<Vec<Example>> {
    let csv_err = |source: csv::Error| Error::Csv {
        path: path.to_path_buf(),
        source,
    };
    let mut reader = csv::ReaderBuilder::new()
        .has_headers(true)
        .flexible(true)
        .from_reader(reader);
    let headers = reader.headers().map_err(csv_err)?.clone();

    let position = |column: &str| -> Result<usize> {
        headers
            .iter()
            .position(|h| h == column)
            .ok_or_else(|| Error::MissingColumn {
                path: path.to_path_buf(),
                column: column.to_owned(),
            })
    };
    let id_col = position(ID_COLUMN)?;
    let ts_col = position(TIMESTAMP_COLUMN)?;
    let label_col = position(LABEL_COLUMN)?;
    let field_cols = schema
        .field_names()
        .iter()
        .map(|name| position(name))
        .collect::<Result<Vec<_>>>()?;
    if let Some(extra) = headers.iter().find(|h| {
        ![ID_COLUMN, TIMESTAMP_COLUMN, LABEL_COLUMN].contains(h) && !schema.field_names().iter().any(|f| f == h)
    }) {
        return Err(Error::UnexpectedColumn {
            path: path.to_path_buf(),
            column: extra.to_owned(),
        });
    }

    let mut examples = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|source| match source.position() {
            Some(pos) => Error::MalformedRow {
                path: path.to_path_buf(),
                line: pos.line(),
                reason: source.to_string(),
            },
            None => csv_err(source),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        let malformed = |reason: String| Error::MalformedRow {
            path: path.to_path_buf(),
            line,
            reason,
        };
        if record.len() != headers.len() {
            return Err(malformed(format!(
                "expected {} columns, found {}",
                headers.len(),
                record.len()
            )));
        }
        let parse_u64 = |col: usize, what: &str| -> Result<u64> {
            let raw = &record[col];
            raw.trim()
                .parse::<u64>()
                .map_err(|_| malformed(format!("{what} `{raw}` is not an unsigned integer")))
        };
        let id = parse_u64(id_col, ID_COLUMN)?;
        let timestamp = parse_u64(ts_col, TIMESTAMP_COLUMN)?;
        let label = match record[label_col].trim() {
            "0" => false,
            "1" => true,
            other => {
                return Err(Error::InvalidLabel {
                    path: path.to_path_buf(),
                    line,
                    value: other.to_owned(),
                })
            }
        };
        let indices = field_cols
            .iter()
            .enumerate()
            .map(|(f, &col)| hash_field(f, &record[col], schema.hash_dim()))
            .collect();
        examples.push(Example {
            id,
            timestamp,
            label,
            indices,
        });
    }
    Ok(examples)
}

/// Train/validation/test partition by day.
#[derive(Clone, Debug, Default)]
pub struct DatasetSplit {
    pub train: Vec<Example>,
    pub validation: Vec<Example>,
    pub test: Vec<Example>,
}

/// Splits by day: the last `test_days` distinct days go to test, the
/// `validation_days` before them to validation, everything earlier to train.
/// Relative input order is kept within each part.
pub fn temporal_split(
    examples: &[Example],
    validation_days: usize,
    test_days: usize,
    unit: TimeUnit,
) -> Result<DatasetSplit> {
    let days: BTreeSet<u64> = examples.iter().map(|e| unit.day_of(e.timestamp)).collect();
    let required = validation_days + test_days + 1;
    if days.len() < required {
        return Err(Error::InsufficientDays {
            required,
            available: days.len(),
        });
    }
    let days: Vec<u64> = days.into_iter().collect();
    let test_start = days.len() - test_days;
    let validation_start = test_start - validation_days;

    let mut split = DatasetSplit::default();
    for example in examples {
        let position = days
            .binary_search(&unit.day_of(example.timestamp))
            .expect("day collected above");
        let bucket = if position >= test_start {
            &mut split.test
        } else if position >= validation_start {
            &mut split.validation
        } else {
            &mut split.train
        };
        bucket.push(example.clone());
    }
    Ok(split)
}

/// Groups examples by day in ascending day order. Within a day, examples are
/// ordered by timestamp, then id.
pub fn group_by_day(examples: &[Example], unit: TimeUnit) -> Vec<(u64, Vec<Example>)> {
    let mut sorted = examples.to_vec();
    sorted.sort_by_key(|e| (unit.day_of(e.timestamp), e.timestamp, e.id));
    let mut days: Vec<(u64, Vec<Example>)> = Vec::new();
    for example in sorted {
        let day = unit.day_of(example.timestamp);
        match days.last_mut() {
            Some((d, bucket)) if *d == day => bucket.push(example),
            _ => days.push((day, vec![example])),
        }
    }
    days
}

/// Sorts in the canonical training order: timestamp, then id.
pub fn sort_for_training(examples: &mut [Example]) {
    examples.sort_by_key(|e| (e.timestamp, e.id));
}

fn default_field_count() -> usize {
    8
}
fn default_vocab_size() -> usize {
    400
}
fn default_hash_dim() -> usize {
    1 << 14
}
fn default_zipf_exponent() -> f64 {
    1.1
}
fn default_weight_scale() -> f64 {
    0.5
}

/// Parameters of the synthetic drifting click stream.
///
/// Day `d` labels come from `sigmoid(bias + w_d . x)` where `w_d` is the
/// latent weight vector rotated by `drift_rate * d` radians in a fixed plane.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct DriftStreamConfig {
    pub days: usize,
    pub examples_per_day: usize,
    pub drift_rate: f64,
    pub base_ctr: f64,
    pub seed: u64,
    #[serde(default = "default_field_count")]
    pub field_count: usize,
    /// Distinct raw values per field, drawn Zipf-distributed.
    #[serde(default = "default_vocab_size")]
    pub vocab_size: usize,
    #[serde(default = "default_hash_dim")]
    pub hash_dim: usize,
    #[serde(default = "default_zipf_exponent")]
    pub zipf_exponent: f64,
    /// Standard deviation of each latent per-value weight.
    #[serde(default = "default_weight_scale")]
    pub weight_scale: f64,
}

impl DriftStreamConfig {
    pub fn new(days: usize, examples_per_day: usize, drift_rate: f64, base_ctr: f64, seed: u64) -> Self {
        DriftStreamConfig {
            days,
            examples_per_day,
            drift_rate,
            base_ctr,
            seed,
            field_count: default_field_count(),
            vocab_size: default_vocab_size(),
            hash_dim: default_hash_dim(),
            zipf_exponent: default_zipf_exponent(),
            weight_scale: default_weight_scale(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.days == 0 || self.examples_per_day == 0 {
            return bad("days and examples_per_day must be positive".into());
        }
        if !(self.drift_rate.is_finite() && self.drift_rate >= 0.0) {
            return bad(format!("drift_rate must be finite and >= 0, got {}", self.drift_rate));
        }
        if !(self.base_ctr > 0.0 && self.base_ctr < 1.0) {
            return bad(format!("base_ctr must lie in (0, 1), got {}", self.base_ctr));
        }
        if self.field_count == 0 || self.vocab_size == 0 {
            return bad("field_count and vocab_size must be positive".into());
        }
        if self.hash_dim < 2 {
            return bad(format!("hash_dim must be >= 2, got {}", self.hash_dim));
        }
        if !(self.zipf_exponent.is_finite() && self.zipf_exponent > 0.0) {
            return bad(format!("zipf_exponent must be > 0, got {}", self.zipf_exponent));
        }
        if !(self.weight_scale.is_finite() && self.weight_scale >= 0.0) {
            return bad(format!("weight_scale must be >= 0, got {}", self.weight_scale));
        }
        Ok(())
    }
}

/// Generated stream plus the hidden ground truth that produced it.
#[derive(Clone, Debug)]
pub struct DriftStream {
    pub config: DriftStreamConfig,
    pub schema: FieldSchema,
    pub examples: Vec<Example>,
    /// Raw value id per field for each example; the CSV token is its decimal form.
    pub raw_values: Vec<Vec<u32>>,
    /// True click probability of each example.
    pub probabilities: Vec<f64>,
    /// Calibrated intercept of the latent model.
    pub bias: f64,
}

struct LatentModel {
    start: Vec<f64>,
    end: Vec<f64>,
    vocab: usize,
}

impl LatentModel {
    fn sample(fields: usize, vocab: usize, scale: f64, rng: &mut ChaCha8Rng) -> Self {
        let n = fields * vocab;
        let normal = Normal::new(0.0, 1.0).expect("unit normal");
        let mut start: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        let mut end: Vec<f64> = (0..n).map(|_| normal.sample(rng)).collect();
        // Gram-Schmidt so that the rotation stays in one plane and preserves norm.
        let dot = |a: &[f64], b: &[f64]| a.iter().zip(b).map(|(x, y)| x * y).sum::<f64>();
        let aa = dot(&start, &start);
        if aa > 0.0 {
            let proj = dot(&start, &end) / aa;
            end.iter_mut().zip(&start).for_each(|(b, a)| *b -= proj * a);
            let bb = dot(&end, &end);
            if bb > 0.0 {
                let rescale = (aa / bb).sqrt();
                end.iter_mut().for_each(|b| *b *= rescale);
            }
        }
        // Rescale so each coordinate has standard deviation `scale` on average.
        let norm = (aa / n as f64).sqrt();
        let factor = if norm > 0.0 { scale / norm } else { 0.0 };
        start.iter_mut().for_each(|w| *w *= factor);
        end.iter_mut().for_each(|w| *w *= factor);
        LatentModel { start, end, vocab }
    }

    fn weights_at(&self, angle: f64) -> Vec<f64> {
        let (s, c) = angle.sin_cos();
        self.start.iter().zip(&self.end).map(|(a, b)| c * a + s * b).collect()
    }

    fn score(weights: &[f64], vocab: usize, values: &[u32]) -> f64 {
        values
            .iter()
            .enumerate()
            .map(|(f, &v)| weights[f * vocab + v as usize])
            .sum()
    }
}

fn draw_values(zipf: &Zipf<f64>, fields: usize, rng: &mut ChaCha8Rng) -> Vec<u32> {
    (0..fields).map(|_| zipf.sample(rng) as u32 - 1).collect()
}

/// Finds the intercept that makes the mean predicted CTR equal `target` on
/// the given scores.
fn calibrate_bias(scores: &[f64], target: f64) -> f64 {
    let mean_ctr = |b: f64| scores.iter().map(|s| sigmoid(b + s)).sum::<f64>() / scores.len() as f64;
    let (mut lo, mut hi) = (-40.0_f64, 40.0_f64);
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if mean_ctr(mid) < target {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    0.5 * (lo + hi)
}

const CALIBRATION_SAMPLES: usize = 20_000;

/// Generates a drifting click stream. Deterministic in `config.seed`.
pub fn generate_drift_stream(config: &DriftStreamConfig) -> Result<DriftStream> {
    config.validate()?;
    let fields = config.field_count;
    let vocab = config.vocab_size;
    let zipf = Zipf::new(vocab as f64, config.zipf_exponent)
        .map_err(|e| Error::InvalidConfig(format!("zipf distribution: {e}")))?;

    let mut weight_rng = ChaCha8Rng::seed_from_u64(config.seed);
    let latent = LatentModel::sample(fields, vocab, config.weight_scale, &mut weight_rng);

    let mut calibration_rng = ChaCha8Rng::seed_from_u64(config.seed);
    calibration_rng.set_stream(1);
    let start_weights = latent.weights_at(0.0);
    let calibration_scores: Vec<f64> = (0..CALIBRATION_SAMPLES)
        .map(|_| {
            let values = draw_values(&zipf, fields, &mut calibration_rng);
            LatentModel::score(&start_weights, latent.vocab, &values)
        })
        .collect();
    let bias = calibrate_bias(&calibration_scores, config.base_ctr);

    let mut rng = ChaCha8Rng::seed_from_u64(config.seed);
    rng.set_stream(2);
    let total = config.days * config.examples_per_day;
    let mut examples = Vec::with_capacity(total);
    let mut raw_values = Vec::with_capacity(total);
    let mut probabilities = Vec::with_capacity(total);
    for day in 0..config.days {
        let weights = latent.weights_at(config.drift_rate * day as f64);
        for i in 0..config.examples_per_day {
            let values = draw_values(&zipf, fields, &mut rng);
            let p = sigmoid(bias + LatentModel::score(&weights, vocab, &values));
            let label = rng.random::<f64>() < p;
            let indices = values
                .iter()
                .enumerate()
                .map(|(f, v)| hash_field(f, &v.to_string(), config.hash_dim))
                .collect();
            examples.push(Example {
                id: (day * config.examples_per_day + i) as u64,
                timestamp: day as u64,
                label,
                indices,
            });
            raw_values.push(values);
            probabilities.push(p);
        }
    }
    Ok(DriftStream {
        config: config.clone(),
        schema: FieldSchema::numbered(fields, config.hash_dim)?,
        examples,
        raw_values,
        probabilities,
        bias,
    })
}

impl DriftStream {
    /// Writes the stream as CSV with raw value tokens, loadable by [`load_csv`].
    pub fn write_csv<W: Write>(&self, writer: W) -> Result<()> {
        let mut out = csv::Writer::from_writer(writer);
        let to_err = |e: csv::Error| Error::Write(e.to_string());
        let mut header = vec![
            ID_COLUMN.to_owned(),
            TIMESTAMP_COLUMN.to_owned(),
            LABEL_COLUMN.to_owned(),
        ];
        header.extend(self.schema.field_names().iter().cloned());
        out.write_record(&header).map_err(to_err)?;
        let mut row: Vec<String> = Vec::with_capacity(header.len());
        for (example, values) in self.examples.iter().zip(&self.raw_values) {
            row.clear();
            row.push(example.id.to_string());
            row.push(example.timestamp.to_string());
            row.push(if example.label { "1" } else { "0" }.to_owned());
            row.extend(values.iter().map(u32::to_string));
            out.write_record(&row).map_err(to_err)?;
        }
        out.flush().map_err(|e| Error::Write(e.to_string()))?;
        Ok(())
    }

    pub fn save_csv(&self, path: &Path) -> Result<()> {
        let file = File::create(path).map_err(|e| Error::io(path, e))?;
        self.write_csv(std::io::BufWriter::new(file))
    }
}
