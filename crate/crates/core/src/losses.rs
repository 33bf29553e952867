//! Training objectives over a mini-batch of logits.
//!
//! Every loss returns its batch value together with `dLoss/du_i` for each
//! student logit `u_i`. Teacher logits `v_i` are constants: no gradient is
//! ever produced for them.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::{sigmoid, softplus};

/// Convex margin loss used to rank the student above the teacher.
#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ScoringFunction {
    /// `log(1 + exp(-m))`
    #[default]
    Logistic,
    /// `(1 - m)^2`
    Square,
}

impl ScoringFunction {
    pub fn value(self, margin: f64) -> f64 {
        match self {
            ScoringFunction::Logistic => softplus(-margin),
            ScoringFunction::Square => (1.0 - margin).powi(2),
        }
    }

    pub fn derivative(self, margin: f64) -> f64 {
        match self {
            ScoringFunction::Logistic => -sigmoid(-margin),
            ScoringFunction::Square => -2.0 * (1.0 - margin),
        }
    }
}

impl std::str::FromStr for ScoringFunction {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.to_ascii_lowercase().as_str() {
            "logistic" => Ok(ScoringFunction::Logistic),
            "square" => Ok(ScoringFunction::Square),
            other => Err(Error::InvalidConfig(format!(
                "unknown scoring function `{other}` (expected logistic or square)"
            ))),
        }
    }
}

/// Weights of the point-wise and relational confidence-ranking terms.
#[derive(Clone, Copy, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct LossWeights {
    pub lambda_cr: f64,
    pub lambda_rcr: f64,
}

impl LossWeights {
    pub fn new(lambda_cr: f64, lambda_rcr: f64) -> Result<Self> {
        let w = LossWeights { lambda_cr, lambda_rcr };
        w.validate()?;
        Ok(w)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, value) in [("lambda_cr", self.lambda_cr), ("lambda_rcr", self.lambda_rcr)] {
            if !(value.is_finite() && value >= 0.0) {
                return Err(Error::InvalidConfig(format!(
                    "{name} must be finite and non-negative, got {value}"
                )));
            }
        }
        Ok(())
    }

    pub fn is_zero(&self) -> bool {
        self.lambda_cr == 0.0 && self.lambda_rcr == 0.0
    }
}

/// Student logits, optional teacher logits and labels of one batch.
#[derive(Clone, Copy, Debug)]
pub struct BatchLogits<'a> {
    pub ids: &'a [u64],
    pub student: &'a [f64],
    pub teacher: &'a [Option<f64>],
    pub labels: &'a [bool],
}

impl<'a> BatchLogits<'a> {
    pub fn new(ids: &'a [u64], student: &'a [f64], teacher: &'a [Option<f64>], labels: &'a [bool]) -> Result<Self> {
        let n = ids.len();
        for len in [student.len(), teacher.len(), labels.len()] {
            if len != n {
                return Err(Error::LengthMismatch { expected: n, got: len });
            }
        }
        if let Some(pos) = teacher.iter().position(|v| v.is_some_and(|v| !v.is_finite())) {
            return Err(Error::NonFinite(format!("teacher logit of example {}", ids[pos])));
        }
        Ok(BatchLogits {
            ids,
            student,
            teacher,
            labels,
        })
    }

    pub fn len(&self) -> usize {
        self.ids.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ids.is_empty()
    }

    /// Teacher logits, failing on the first example without one.
    pub fn teacher_logits(&self) -> Result<Vec<f64>> {
        self.teacher
            .iter()
            .zip(self.ids)
            .map(|(v, &id)| v.ok_or(Error::MissingTeacher { id }))
            .collect()
    }
}

/// Batch loss value and per-example `dLoss/du`.
#[derive(Clone, Debug, PartialEq)]
pub struct LossOutput {
    pub value: f64,
    pub grad: Vec<f64>,
}

impl LossOutput {
    fn zero(n: usize) -> Self {
        LossOutput {
            value: 0.0,
            grad: vec![0.0; n],
        }
    }

    fn add_scaled(&mut self, other: &LossOutput, weight: f64) {
        self.value += weight * other.value;
        self.grad
            .iter_mut()
            .zip(&other.grad)
            .for_each(|(g, o)| *g += weight * o);
    }

    fn scale(&mut self, weight: f64) {
        self.value *= weight;
        self.grad.iter_mut().for_each(|g| *g *= weight);
    }
}

fn label(y: bool) -> f64 {
    if y {
        1.0
    } else {
        0.0
    }
}

/// Mean binary cross-entropy of `sigmoid(u)` against the labels.
pub fn ce_loss(batch: &BatchLogits) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let n = batch.len() as f64;
    let mut value = 0.0;
    let grad = batch
        .student
        .iter()
        .zip(batch.labels)
        .map(|(&u, &y)| {
            // -[y log s(u) + (1-y) log(1-s(u))] = softplus(u) - y*u
            value += softplus(u) - label(y) * u;
            (sigmoid(u) - label(y)) / n
        })
        .collect();
    Ok(LossOutput { value: value / n, grad })
}

/// Point-wise confidence ranking: mean of `phi(u - v)` for positives and
/// `phi(-(u - v))` for negatives.
pub fn cr_loss(batch: &BatchLogits, phi: ScoringFunction) -> Result<LossOutput> {
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let teacher = batch.teacher_logits()?;
    let n = batch.len() as f64;
    let mut value = 0.0;
    let grad = batch
        .student
        .iter()
        .zip(&teacher)
        .zip(batch.labels)
        .map(|((&u, &v), &y)| {
            let m = u - v;
            if y {
                value += phi.value(m);
                phi.derivative(m) / n
            } else {
                value += phi.value(-m);
                -phi.derivative(-m) / n
            }
        })
        .collect();
    Ok(LossOutput { value: value / n, grad })
}

/// Relational confidence ranking over every (positive, negative) pair of
/// the batch: mean of `phi((u+ - u-) - (v+ - v-))`. A batch without both
/// classes contributes nothing.
pub fn rcr_loss(batch: &BatchLogits, phi: ScoringFunction) -> Result<LossOutput> {
    let teacher = batch.teacher_logits()?;
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..batch.len()).partition(|&i| batch.labels[i]);
    let mut out = LossOutput::zero(batch.len());
    if pos.is_empty() || neg.is_empty() {
        return Ok(out);
    }
    let pairs = (pos.len() * neg.len()) as f64;
    let u = batch.student;
    for &i in &pos {
        let mut grad_i = 0.0;
        for &j in &neg {
            let m = (u[i] - u[j]) - (teacher[i] - teacher[j]);
            out.value += phi.value(m);
            let d = phi.derivative(m);
            grad_i += d;
            out.grad[j] -= d;
        }
        out.grad[i] += grad_i;
    }
    out.scale(1.0 / pairs);
    Ok(out)
}

/// Distillation against the teacher's softened probability:
/// `T^2 * BCE(sigmoid(v/T), sigmoid(u/T))`, averaged over the batch.
pub fn kd_loss(batch: &BatchLogits, temperature: f64) -> Result<LossOutput> {
    if !(temperature.is_finite() && temperature > 0.0) {
        return Err(Error::InvalidConfig(format!(
            "temperature must be positive, got {temperature}"
        )));
    }
    if batch.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let teacher = batch.teacher_logits()?;
    let n = batch.len() as f64;
    let t = temperature;
    let mut value = 0.0;
    let grad = batch
        .student
        .iter()
        .zip(&teacher)
        .map(|(&u, &v)| {
            let target = sigmoid(v / t);
            value += t * t * (softplus(u / t) - target * u / t);
            t * (sigmoid(u / t) - target) / n
        })
        .collect();
    Ok(LossOutput { value: value / n, grad })
}

/// Logit-level relational distillation: mean over ordered pairs `i != j` of
/// `0.5 * ((u_i - u_j) - (v_i - v_j))^2`. Batches smaller than two give zero.
pub fn rkd_logit_loss(batch: &BatchLogits) -> Result<LossOutput> {
    let teacher = batch.teacher_logits()?;
    let n = batch.len();
    let mut out = LossOutput::zero(n);
    if n < 2 {
        return Ok(out);
    }
    // With e = u - v the pair sum collapses to n * sum (e_i - mean)^2.
    let residual: Vec<f64> = batch.student.iter().zip(&teacher).map(|(u, v)| u - v).collect();
    let mean = residual.iter().sum::<f64>() / n as f64;
    let denom = (n - 1) as f64;
    for (g, e) in out.grad.iter_mut().zip(&residual) {
        let centered = e - mean;
        out.value += centered * centered;
        *g = 2.0 * centered / denom;
    }
    out.value /= denom;
    Ok(out)
}

/// `ce + lambda_cr * cr + lambda_rcr * rcr`. Terms with zero weight are not
/// evaluated, so zero weights reproduce [`ce_loss`] bit for bit.
pub fn combined_loss(batch: &BatchLogits, weights: LossWeights, phi: ScoringFunction) -> Result<LossOutput> {
    weights.validate()?;
    let mut out = ce_loss(batch)?;
    if weights.lambda_cr != 0.0 {
        out.add_scaled(&cr_loss(batch, phi)?, weights.lambda_cr);
    }
    if weights.lambda_rcr != 0.0 {
        out.add_scaled(&rcr_loss(batch, phi)?, weights.lambda_rcr);
    }
    Ok(out)
}

pub const DEFAULT_KD_ALPHA: f64 = 0.5;
pub const DEFAULT_KD_TEMPERATURE: f64 = 2.0;
pub const DEFAULT_RKD_WEIGHT: f64 = 0.5;

/// Which objective a training run optimizes.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Objective {
    /// Plain cross-entropy.
    Erm,
    /// Cross-entropy plus confidence-ranking terms.
    ConfidenceRanking { weights: LossWeights, phi: ScoringFunction },
    /// `(1 - alpha) * ce + alpha * kd`.
    Kd { alpha: f64, temperature: f64 },
    /// `ce + weight * rkd_logit`.
    Rkd { weight: f64 },
}

impl Objective {
    /// Whether a teacher logit must be supplied for every example.
    pub fn needs_teacher(&self) -> bool {
        match *self {
            Objective::Erm => false,
            Objective::ConfidenceRanking { weights, .. } => !weights.is_zero(),
            Objective::Kd { alpha, .. } => alpha != 0.0,
            Objective::Rkd { weight } => weight != 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        match *self {
            Objective::Erm => Ok(()),
            Objective::ConfidenceRanking { weights, .. } => weights.validate(),
            Objective::Kd { alpha, temperature } => {
                if !(0.0..=1.0).contains(&alpha) {
                    return Err(Error::InvalidConfig(format!(
                        "kd alpha must lie in [0, 1], got {alpha}"
                    )));
                }
                if !(temperature.is_finite() && temperature > 0.0) {
                    return Err(Error::InvalidConfig(format!(
                        "kd temperature must be positive, got {temperature}"
                    )));
                }
                Ok(())
            }
            Objective::Rkd { weight } => {
                if !(weight.is_finite() && weight >= 0.0) {
                    return Err(Error::InvalidConfig(format!("rkd weight must be >= 0, got {weight}")));
                }
                Ok(())
            }
        }
    }

    /// Evaluates the objective on a batch. Zero-weighted auxiliary terms are
    /// skipped, so every objective degenerates exactly to [`ce_loss`].
    pub fn loss(&self, batch: &BatchLogits) -> Result<LossOutput> {
        match *self {
            Objective::Erm => ce_loss(batch),
            Objective::ConfidenceRanking { weights, phi } => combined_loss(batch, weights, phi),
            Objective::Kd { alpha, temperature } => {
                let mut out = ce_loss(batch)?;
                if alpha != 0.0 {
                    out.scale(1.0 - alpha);
                    out.add_scaled(&kd_loss(batch, temperature)?, alpha);
                }
                Ok(out)
            }
            Objective::Rkd { weight } => {
                let mut out = ce_loss(batch)?;
                if weight != 0.0 {
                    out.add_scaled(&rkd_logit_loss(batch)?, weight);
                }
                Ok(out)
            }
        }
    }
}
