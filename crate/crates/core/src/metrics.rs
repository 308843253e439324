//! Evaluation metrics (accuracy, AUROC, mean confidence) and the six-row
//! per-condition report with CSV and plain-text renderings.

use std::fmt::Write as _;

use crate::error::{Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Fraction of rows whose argmax probability matches the label; argmax ties
/// resolve to class 0.
pub fn accuracy<S: Scalar>(predictions: &Tensor<S>, labels: &[u8]) -> Result<f64> {
    check_rows(predictions, labels.len(), "accuracy")?;
    let mut correct = 0usize;
    for (row, &y) in predictions.data().chunks(2).zip(labels) {
        if y > 1 {
            return Err(Error::LabelOutOfRange(y as i64));
        }
        let pred = if row[1] > row[0] { 1u8 } else { 0u8 };
        if pred == y {
            correct += 1;
        }
    }
    Ok(correct as f64 / labels.len() as f64)
}

/// Mean over rows of the probability assigned to the predicted class.
pub fn mean_confidence<S: Scalar>(predictions: &Tensor<S>) -> Result<f64> {
    if predictions.shape().first() == Some(&0) || predictions.numel() == 0 {
        return Err(Error::UndefinedMetric("mean_confidence of empty input".into()));
    }
    if predictions.shape().len() != 2 || predictions.shape()[1] != 2 {
        return Err(Error::shape(
            "mean_confidence",
            format!("expected [n, 2], got {:?}", predictions.shape()),
        ));
    }
    let mut sum = 0.0;
    let n = predictions.shape()[0];
    for row in predictions.data().chunks(2) {
        sum += row[0].max(row[1]).as_f64();
    }
    Ok(sum / n as f64)
}

fn check_rows<S: Scalar>(predictions: &Tensor<S>, n: usize, op: &'static str) -> Result<()> {
    if n == 0 {
        return Err(Error::UndefinedMetric(format!("{op} of empty input")));
    }
    if predictions.shape() != [n, 2] {
        return Err(Error::shape(
            op,
            format!("expected [{n}, 2] predictions, got {:?}", predictions.shape()),
        ));
    }
    Ok(())
}

/// AUROC numerator and denominator as exact integers.
///
/// The statistic is computed from rank sums (Mann-Whitney): with `P`
/// positives, `N` negatives, and `R` the sum of positive ranks (average
/// ranks on ties), the returned pair is `(2R - P(P+1), 2PN)`, i.e. the
/// AUROC scaled by `2PN`. Ties contribute exactly one half each, so the
/// numerator is an integer.
pub fn auroc_counts(scores: &[f64], labels: &[u8]) -> Result<(u64, u64)> {
    if scores.len() != labels.len() {
        return Err(Error::shape(
            "auroc",
            format!("{} scores vs {} labels", scores.len(), labels.len()),
        ));
    }
    let positives = labels.iter().filter(|&&l| l == 1).count() as u64;
    let negatives = labels.iter().filter(|&&l| l == 0).count() as u64;
    if let Some(&bad) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::LabelOutOfRange(bad as i64));
    }
    if positives == 0 || negatives == 0 {
        return Err(Error::UndefinedMetric(
            "AUROC needs both classes present".into(),
        ));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::UndefinedMetric("AUROC of NaN scores".into()));
    }

    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));

    // Twice the positive rank sum, walking tie groups; twice the average
    // rank of a tie group [i, j) is (i + 1) + j, an integer.
    let mut twice_rank_sum: u64 = 0;
    let mut i = 0usize;
    while i < order.len() {
        let mut j = i + 1;
        while j < order.len() && scores[order[j]] == scores[order[i]] {
            j += 1;
        }
        let twice_avg_rank = (i as u64 + 1) + j as u64;
        for &idx in &order[i..j] {
            if labels[idx] == 1 {
                twice_rank_sum += twice_avg_rank;
            }
        }
        i = j;
    }

    let numerator = twice_rank_sum - positives * (positives + 1);
    Ok((numerator, 2 * positives * negatives))
}

/// Converts an exact AUROC fraction to `f64`.
///
/// Divides on the side of the fraction below one half and reflects,
/// which makes `auroc(s, y) + auroc(s, 1-y) == 1.0` hold exactly in
/// floating point: the reflection error is at most half an ulp of 1.
pub fn auroc_ratio(numerator: u64, denominator: u64) -> f64 {
    if 2 * numerator <= denominator {
        numerator as f64 / denominator as f64
    } else {
        1.0 - (denominator - numerator) as f64 / denominator as f64
    }
}

/// Probability that a uniformly random positive outscores a uniformly random
/// negative, ties counted one half. Errors when either class is absent.
pub fn auroc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (num, den) = auroc_counts(scores, labels)?;
    Ok(auroc_ratio(num, den))
}

// ── Report ───────────────────────────────────────────────────────────

/// The six evaluation conditions, in report row order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord)]
pub enum Condition {
    Clean,
    PgdWhite,
    PgdBlack,
    PatchNatural,
    PatchWhite,
    PatchBlack,
}

impl Condition {
    pub const TABLE_ORDER: [Condition; 6] = [
        Condition::Clean,
        Condition::PgdWhite,
        Condition::PgdBlack,
        Condition::PatchNatural,
        Condition::PatchWhite,
        Condition::PatchBlack,
    ];

    /// Stable machine token used in CSV and directory names.
    pub fn token(self) -> &'static str {
        match self {
            Condition::Clean => "Clean",
            Condition::PgdWhite => "PGD-White",
            Condition::PgdBlack => "PGD-Black",
            Condition::PatchNatural => "Patch-Natural",
            Condition::PatchWhite => "Patch-White",
            Condition::PatchBlack => "Patch-Black",
        }
    }

    pub fn display_name(self) -> &'static str {
        match self {
            Condition::Clean => "Clean",
            Condition::PgdWhite => "PGD - White Box",
            Condition::PgdBlack => "PGD - Black Box",
            Condition::PatchNatural => "Patch - Natural",
            Condition::PatchWhite => "Patch - White Box",
            Condition::PatchBlack => "Patch - Black Box",
        }
    }

    pub fn parse(token: &str) -> Result<Self> {
        Self::TABLE_ORDER
            .into_iter()
            .find(|c| c.token() == token)
            .ok_or_else(|| Error::MalformedReport(format!("unknown condition {token:?}")))
    }
}

/// Metric triple for one condition.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ConditionMetrics {
    pub n: usize,
    pub accuracy: f64,
    pub auroc: f64,
    pub avg_confidence: f64,
}

impl ConditionMetrics {
    /// Computes all three metrics from prediction rows and hard labels.
    pub fn from_predictions<S: Scalar>(predictions: &Tensor<S>, labels: &[u8]) -> Result<Self> {
        let scores: Vec<f64> = predictions
            .data()
            .chunks(2)
            .map(|row| row[1].as_f64())
            .collect();
        Ok(ConditionMetrics {
            n: labels.len(),
            accuracy: accuracy(predictions, labels)?,
            auroc: auroc(&scores, labels)?,
            avg_confidence: mean_confidence(predictions)?,
        })
    }

    fn validate(&self) -> Result<()> {
        if self.n == 0 {
            return Err(Error::MalformedReport("row with n = 0".into()));
        }
        for (name, v) in [
            ("accuracy", self.accuracy),
            ("auroc", self.auroc),
            ("avg_confidence", self.avg_confidence),
        ] {
            if !(0.0..=1.0).contains(&v) {
                return Err(Error::MalformedReport(format!("{name} {v} outside [0,1]")));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportRow {
    pub condition: Condition,
    pub metrics: ConditionMetrics,
}

/// Provenance of the numbers in a report.
#[derive(Clone, Debug, Default, PartialEq)]
pub struct ReportMetadata {
    pub model_digest: String,
    pub dataset_digest: String,
    pub seeds: Vec<(String, u64)>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct EvaluationReport {
    pub rows: Vec<ReportRow>,
    pub metadata: ReportMetadata,
}

pub const REPORT_CSV_HEADER: &str = "condition,n,accuracy,auroc,avg_confidence";

/// Assembles rows into table order, validating ranges and uniqueness.
///
/// The Clean condition is mandatory; other missing conditions produce
/// warnings, not errors.
pub fn build_report(
    rows: Vec<ReportRow>,
    metadata: ReportMetadata,
) -> Result<(EvaluationReport, Vec<String>)> {
    let mut ordered = Vec::new();
    let mut warnings = Vec::new();
    for cond in Condition::TABLE_ORDER {
        let found: Vec<&ReportRow> = rows.iter().filter(|r| r.condition == cond).collect();
        match found.len() {
            0 => {
                if cond == Condition::Clean {
                    return Err(Error::MalformedReport("Clean condition is required".into()));
                }
                warnings.push(format!("missing condition {}", cond.token()));
            }
            1 => {
                found[0].metrics.validate()?;
                ordered.push(found[0].clone());
            }
            _ => {
                return Err(Error::MalformedReport(format!(
                    "duplicate condition {}",
                    cond.token()
                )))
            }
        }
    }
    Ok((
        EvaluationReport {
            rows: ordered,
            metadata,
        },
        warnings,
    ))
}

impl EvaluationReport {
    /// Machine-readable CSV. Metric values use the shortest `f64`
    /// representation, so parsing and re-rendering is lossless.
    pub fn to_csv(&self) -> String {
        let mut out = String::from(REPORT_CSV_HEADER);
        out.push('\n');
        for row in &self.rows {
            writeln!(
                out,
                "{},{},{},{},{}",
                row.condition.token(),
                row.metrics.n,
                row.metrics.accuracy,
                row.metrics.auroc,
                row.metrics.avg_confidence
            )
            .expect("writing to string");
        }
        out
    }

    pub fn rows_from_csv(text: &str) -> Result<Vec<ReportRow>> {
        let mut lines = text.lines();
        match lines.next() {
            Some(h) if h.trim_end() == REPORT_CSV_HEADER => {}
            other => {
                return Err(Error::MalformedReport(format!(
                    "bad header {other:?}, expected {REPORT_CSV_HEADER:?}"
                )))
            }
        }
        let mut rows = Vec::new();
        for line in lines {
            if line.is_empty() {
                continue;
            }
            let parts: Vec<&str> = line.split(',').collect();
            if parts.len() != 5 {
                return Err(Error::MalformedReport(format!("bad row {line:?}")));
            }
            let parse = |t: &str| -> Result<f64> {
                t.parse()
                    .map_err(|_| Error::MalformedReport(format!("bad number {t:?}")))
            };
            rows.push(ReportRow {
                condition: Condition::parse(parts[0])?,
                metrics: ConditionMetrics {
                    n: parts[1]
                        .parse()
                        .map_err(|_| Error::MalformedReport(format!("bad count {:?}", parts[1])))?,
                    accuracy: parse(parts[2])?,
                    auroc: parse(parts[3])?,
                    avg_confidence: parse(parts[4])?,
                },
            });
        }
        Ok(rows)
    }

    /// Aligned plain-text table: percentages with one decimal, AUROC with
    /// three.
    pub fn to_table(&self) -> String {
        let mut out = String::new();
        writeln!(
            out,
            "{:<20}{:>6}{:>11}{:>8}{:>13}",
            "Condition", "n", "Accuracy", "AUROC", "Avg. Conf."
        )
        .expect("writing to string");
        for row in &self.rows {
            writeln!(
                out,
                "{:<20}{:>6}{:>10.1}%{:>8.3}{:>12.1}%",
                row.condition.display_name(),
                row.metrics.n,
                row.metrics.accuracy * 100.0,
                row.metrics.auroc,
                row.metrics.avg_confidence * 100.0
            )
            .expect("writing to string");
        }
        out
    }
}
