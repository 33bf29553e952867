//! Evaluation metrics and model-vs-model ranking scores.
//!
//! All scores here are logits; probabilities are derived with the sigmoid
//! where a metric is defined on the probability scale. Accumulation is `f64`.

use std::cmp::Ordering;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::sigmoid;

fn check_lengths(scores: usize, labels: usize) -> Result<()> {
    if scores != labels {
        return Err(Error::LengthMismatch {
            expected: scores,
            got: labels,
        });
    }
    Ok(())
}

/// Bipartite AUC: the fraction of (positive, negative) pairs whose positive
/// scores higher, ties counting one half. Runs in `O(N log N)` by sorting
/// once and sweeping groups of tied scores.
pub fn auc(scores: &[f64], labels: &[bool]) -> Result<f64> {
    check_lengths(scores.len(), labels.len())?;
    if let Some(i) = scores.iter().position(|s| s.is_nan()) {
        return Err(Error::NonFinite(format!("score at position {i} is NaN")));
    }
    let n_pos = labels.iter().filter(|&&y| y).count();
    let n_neg = labels.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return Err(Error::UndefinedMetric(
            "auc needs at least one positive and one negative",
        ));
    }
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the Mann-Whitney U statistic, kept integral.
    let mut twice_u: u128 = 0;
    let mut negatives_below: u128 = 0;
    let mut start = 0;
    while start < order.len() {
        let mut end = start;
        let (mut pos, mut neg) = (0u128, 0u128);
        while end < order.len() && scores[order[end]].total_cmp(&scores[order[start]]) == Ordering::Equal {
            if labels[order[end]] {
                pos += 1;
            } else {
                neg += 1;
            }
            end += 1;
        }
        twice_u += pos * (2 * negatives_below + neg);
        negatives_below += neg;
        start = end;
    }
    Ok(twice_u as f64 / (2.0 * n_pos as f64 * n_neg as f64))
}

/// Fraction of examples whose thresholded prediction matches the label.
/// `threshold` is on the probability scale; a probability equal to the
/// threshold counts as positive.
pub fn accuracy(logits: &[f64], labels: &[bool], threshold: f64) -> Result<f64> {
    check_lengths(logits.len(), labels.len())?;
    if logits.is_empty() {
        return Err(Error::UndefinedMetric("accuracy of an empty set"));
    }
    let hits = logits
        .iter()
        .zip(labels)
        .filter(|(&z, &y)| (sigmoid(z) >= threshold) == y)
        .count();
    Ok(hits as f64 / logits.len() as f64)
}

/// Mean predicted probability per class and their difference.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct MarginDiagnostics {
    pub pos_mean: Option<f64>,
    pub neg_mean: Option<f64>,
    /// `pos_mean - neg_mean`, defined only when both classes are present.
    pub sample_margin: Option<f64>,
}

pub fn margin_diagnostics(logits: &[f64], labels: &[bool]) -> Result<MarginDiagnostics> {
    check_lengths(logits.len(), labels.len())?;
    let (mut pos_sum, mut neg_sum) = (0.0, 0.0);
    let (mut n_pos, mut n_neg) = (0usize, 0usize);
    for (&z, &y) in logits.iter().zip(labels) {
        if y {
            pos_sum += sigmoid(z);
            n_pos += 1;
        } else {
            neg_sum += sigmoid(z);
            n_neg += 1;
        }
    }
    let pos_mean = (n_pos > 0).then(|| pos_sum / n_pos as f64);
    let neg_mean = (n_neg > 0).then(|| neg_sum / n_neg as f64);
    let sample_margin = pos_mean.zip(neg_mean).map(|(p, n)| p - n);
    Ok(MarginDiagnostics {
        pos_mean,
        neg_mean,
        sample_margin,
    })
}

/// Logits tagged with the example ids they belong to.
#[derive(Clone, Copy, Debug)]
pub struct Scored<'a> {
    pub ids: &'a [u64],
    pub logits: &'a [f64],
}

fn check_aligned(student: &Scored, teacher: &Scored, labels: &[bool]) -> Result<()> {
    check_lengths(student.ids.len(), student.logits.len())?;
    check_lengths(teacher.ids.len(), teacher.logits.len())?;
    check_lengths(student.ids.len(), labels.len())?;
    if student.ids.len() != teacher.ids.len() {
        return Err(Error::LengthMismatch {
            expected: student.ids.len(),
            got: teacher.ids.len(),
        });
    }
    if let Some(position) = student.ids.iter().zip(teacher.ids).position(|(a, b)| a != b) {
        return Err(Error::MisalignedIds {
            position,
            left: student.ids[position],
            right: teacher.ids[position],
        });
    }
    Ok(())
}

/// Fraction of examples where the student's label-signed logit strictly
/// beats the teacher's. Labels act as signs in {-1, +1}; ties count zero.
pub fn ranking_score_acc(student: Scored, teacher: Scored, labels: &[bool]) -> Result<f64> {
    check_aligned(&student, &teacher, labels)?;
    if labels.is_empty() {
        return Err(Error::UndefinedMetric("ranking score of an empty set"));
    }
    let wins = student
        .logits
        .iter()
        .zip(teacher.logits)
        .zip(labels)
        .filter(|((&u, &v), &y)| if y { u > v } else { -u > -v })
        .count();
    Ok(wins as f64 / labels.len() as f64)
}

/// Fraction of (positive, negative) pairs where the student's logit gap
/// strictly exceeds the teacher's. Quadratic in the batch size.
pub fn ranking_score_auc(student: Scored, teacher: Scored, labels: &[bool]) -> Result<f64> {
    check_aligned(&student, &teacher, labels)?;
    let (pos, neg): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| labels[i]);
    if pos.is_empty() || neg.is_empty() {
        return Err(Error::UndefinedMetric("ranking score needs both classes"));
    }
    let (u, v) = (student.logits, teacher.logits);
    let mut wins: u64 = 0;
    for &i in &pos {
        for &j in &neg {
            if u[i] - u[j] > v[i] - v[j] {
                wins += 1;
            }
        }
    }
    Ok(wins as f64 / (pos.len() as f64 * neg.len() as f64))
}

pub const METRIC_REPORT_SCHEMA: u32 = 1;

/// Evaluation summary. Serializes to one JSON line with a fixed key order;
/// undefined metrics are `null`, ranking scores are omitted without a teacher.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub schema_version: u32,
    pub n: usize,
    pub n_pos: usize,
    pub n_neg: usize,
    pub auc: Option<f64>,
    pub accuracy: Option<f64>,
    pub pos_mean: Option<f64>,
    pub neg_mean: Option<f64>,
    pub sample_margin: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_acc: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub c_auc: Option<f64>,
}

impl MetricReport {
    /// Computes every metric that is defined for the given logits. When
    /// `teacher` is given (aligned with `logits`), `c_acc`/`c_auc` are filled
    /// in as far as they are defined.
    pub fn evaluate(ids: &[u64], logits: &[f64], labels: &[bool], teacher: Option<&[f64]>) -> Result<Self> {
        check_lengths(logits.len(), labels.len())?;
        check_lengths(logits.len(), ids.len())?;
        let n_pos = labels.iter().filter(|&&y| y).count();
        let n_neg = labels.len() - n_pos;
        let auc = if n_pos > 0 && n_neg > 0 {
            Some(auc(logits, labels)?)
        } else {
            None
        };
        let accuracy = if logits.is_empty() {
            None
        } else {
            Some(accuracy(logits, labels, 0.5)?)
        };
        let margins = margin_diagnostics(logits, labels)?;
        let (mut c_acc, mut c_auc) = (None, None);
        if let Some(teacher) = teacher {
            check_lengths(logits.len(), teacher.len())?;
            let student = Scored { ids, logits };
            let teacher = Scored { ids, logits: teacher };
            if !labels.is_empty() {
                c_acc = Some(ranking_score_acc(student, teacher, labels)?);
            }
            if n_pos > 0 && n_neg > 0 {
                c_auc = Some(ranking_score_auc(student, teacher, labels)?);
            }
        }
        Ok(MetricReport {
            schema_version: METRIC_REPORT_SCHEMA,
            n: labels.len(),
            n_pos,
            n_neg,
            auc,
            accuracy,
            pos_mean: margins.pos_mean,
            neg_mean: margins.neg_mean,
            sample_margin: margins.sample_margin,
            c_acc,
            c_auc,
        })
    }

    pub fn to_json_line(&self) -> String {
        serde_json::to_string(self).expect("metric report serializes")
    }
}

#[cfg(test)]
mod tests {
    use proptest::prelude::*;

    use super::*;

    fn logit(p: f64) -> f64 {
        (p / (1.0 - p)).ln()
    }

    /// Indicator double loop over all (positive, negative) pairs.
    fn auc_pairs(scores: &[f64], labels: &[bool]) -> f64 {
        let mut total = 0.0;
        let mut pairs = 0.0;
        for i in 0..scores.len() {
            for j in 0..scores.len() {
                if labels[i] && !labels[j] {
                    pairs += 1.0;
                    total += match scores[i].partial_cmp(&scores[j]).unwrap() {
                        Ordering::Greater => 1.0,
                        Ordering::Equal => 0.5,
                        Ordering::Less => 0.0,
                    };
                }
            }
        }
        total / pairs
    }

    #[test]
    fn auc_examples() {
        assert_eq!(auc(&[0.9, 0.8, 0.1, 0.2], &[true, true, false, false]).unwrap(), 1.0);
        assert_eq!(auc(&[0.9, 0.4, 0.5, 0.2], &[true, true, false, false]).unwrap(), 0.75);
        assert_eq!(auc(&[0.3; 6], &[true, false, true, false, false, false]).unwrap(), 0.5);
    }

    #[test]
    fn auc_undefined_for_single_class() {
        assert!(matches!(
            auc(&[0.1, 0.2], &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
        assert!(matches!(auc(&[], &[]), Err(Error::UndefinedMetric(_))));
        assert!(auc(&[f64::NAN, 0.2], &[true, false]).is_err());
    }

    #[test]
    fn accuracy_examples() {
        assert_eq!(accuracy(&[3.0, -3.0], &[true, false], 0.5).unwrap(), 1.0);
        assert_eq!(accuracy(&[-5.0; 4], &[false; 4], 0.5).unwrap(), 1.0);
        assert_eq!(
            accuracy(&[1.0, -1.0, 2.0, 0.5], &[true, false, true, false], 0.5).unwrap(),
            0.75
        );
        // Exactly at the threshold counts as positive.
        assert_eq!(accuracy(&[0.0], &[true], 0.5).unwrap(), 1.0);
        assert!(accuracy(&[], &[], 0.5).is_err());
    }

    #[test]
    fn margin_examples() {
        let z = [logit(0.8), logit(0.8), logit(0.3), logit(0.3), logit(0.3)];
        let y = [true, true, false, false, false];
        let m = margin_diagnostics(&z, &y).unwrap();
        assert!((m.sample_margin.unwrap() - 0.5).abs() < 1e-12);
        assert_eq!(m.sample_margin.unwrap(), m.pos_mean.unwrap() - m.neg_mean.unwrap());

        let z = [0.3, -1.0, 0.3, -1.0];
        let m = margin_diagnostics(&z, &[true, true, false, false]).unwrap();
        assert!(m.sample_margin.unwrap().abs() < 1e-15);

        let m = margin_diagnostics(&[1.0, 2.0], &[false, false]).unwrap();
        assert!(m.pos_mean.is_none() && m.sample_margin.is_none());
        assert!(m.neg_mean.is_some());
    }

    #[test]
    fn ranking_scores_self_comparison_is_zero() {
        let ids = [1, 2, 3, 4];
        let z = [0.1, -2.0, 3.0, 0.0];
        let y = [true, false, true, false];
        let s = Scored { ids: &ids, logits: &z };
        assert_eq!(ranking_score_acc(s, s, &y).unwrap(), 0.0);
        assert_eq!(ranking_score_auc(s, s, &y).unwrap(), 0.0);
    }

    #[test]
    fn ranking_scores_strictly_better_student() {
        let ids = [1, 2, 3, 4];
        let teacher = [0.1, -0.2, 0.3, 0.0];
        let y = [true, false, true, false];
        let student: Vec<f64> = teacher
            .iter()
            .zip(&y)
            .map(|(v, &y)| if y { v + 1.0 } else { v - 1.0 })
            .collect();
        let s = Scored {
            ids: &ids,
            logits: &student,
        };
        let t = Scored {
            ids: &ids,
            logits: &teacher,
        };
        assert_eq!(ranking_score_acc(s, t, &y).unwrap(), 1.0);
        assert_eq!(ranking_score_auc(s, t, &y).unwrap(), 1.0);
    }

    #[test]
    fn ranking_scores_reject_misaligned_ids() {
        let z = [0.0, 1.0];
        let s = Scored {
            ids: &[1, 2],
            logits: &z,
        };
        let t = Scored {
            ids: &[1, 3],
            logits: &z,
        };
        assert!(matches!(
            ranking_score_acc(s, t, &[true, false]),
            Err(Error::MisalignedIds {
                position: 1,
                left: 2,
                right: 3
            })
        ));
        assert!(matches!(
            ranking_score_auc(s, s, &[true, true]),
            Err(Error::UndefinedMetric(_))
        ));
    }

    #[test]
    fn report_json_has_fixed_keys() {
        let ids = [1, 2, 3];
        let z = [1.0, -1.0, 0.5];
        let y = [true, false, false];
        let report = MetricReport::evaluate(&ids, &z, &y, None).unwrap();
        let line = report.to_json_line();
        assert!(!line.contains('\n'));
        assert!(line.starts_with(r#"{"schema_version":1,"n":3,"n_pos":1,"n_neg":2,"auc":1.0,"accuracy":"#));
        assert!(!line.contains("c_acc"));
        let with_teacher = MetricReport::evaluate(&ids, &z, &y, Some(&z)).unwrap();
        assert!(with_teacher.to_json_line().ends_with(r#""c_acc":0.0,"c_auc":0.0}"#));
        let back: MetricReport = serde_json::from_str(&with_teacher.to_json_line()).unwrap();
        assert_eq!(back, with_teacher);
    }

    #[test]
    fn empty_report_is_undefined() {
        let report = MetricReport::evaluate(&[], &[], &[], None).unwrap();
        assert_eq!(report.n, 0);
        assert!(report.auc.is_none() && report.accuracy.is_none() && report.sample_margin.is_none());
        assert_eq!(
            report.to_json_line(),
            r#"{"schema_version":1,"n":0,"n_pos":0,"n_neg":0,"auc":null,"accuracy":null,"pos_mean":null,"neg_mean":null,"sample_margin":null}"#
        );
    }

    fn scores_and_labels() -> impl Strategy<Value = (Vec<f64>, Vec<bool>)> {
        (2usize..120)
            .prop_flat_map(|n| {
                (
                    proptest::collection::vec((0u8..6).prop_map(|k| k as f64 * 0.25), n),
                    proptest::collection::vec(any::<bool>(), n),
                )
            })
            .prop_filter("both classes", |(_, y)| y.iter().any(|&b| b) && y.iter().any(|&b| !b))
    }

    proptest! {
        #[test]
        fn auc_matches_pair_loop_with_ties((s, y) in scores_and_labels()) {
            prop_assert!((auc(&s, &y).unwrap() - auc_pairs(&s, &y)).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform((s, y) in scores_and_labels()) {
            let t: Vec<f64> = s.iter().map(|x| (3.0 * x).exp() + 7.0).collect();
            prop_assert_eq!(auc(&s, &y).unwrap(), auc(&t, &y).unwrap());
        }

        #[test]
        fn auc_label_flip_symmetry((s, y) in scores_and_labels()) {
            let neg: Vec<f64> = s.iter().map(|x| -x).collect();
            let flipped: Vec<bool> = y.iter().map(|b| !b).collect();
            prop_assert!((auc(&s, &y).unwrap() - auc(&neg, &flipped).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn ranking_acc_matches_indicator_loop(
            u in proptest::collection::vec(-3.0..3.0_f64, 1..60),
            shift in proptest::collection::vec(-1.0..1.0_f64, 60),
            seed in any::<u64>(),
        ) {
            let n = u.len();
            let ids: Vec<u64> = (0..n as u64).collect();
            let v: Vec<f64> = u.iter().zip(&shift).map(|(a, b)| a + b).collect();
            let y: Vec<bool> = (0..n).map(|i| (seed >> (i % 64)) & 1 == 1).collect();
            let mut wins = 0;
            for i in 0..n {
                let sign = if y[i] { 1.0 } else { -1.0 };
                if sign * u[i] > sign * v[i] {
                    wins += 1;
                }
            }
            let got = ranking_score_acc(Scored { ids: &ids, logits: &u }, Scored { ids: &ids, logits: &v }, &y).unwrap();
            prop_assert_eq!(got, wins as f64 / n as f64);
        }
    }
}
