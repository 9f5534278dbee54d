//! Precision, recall and f-score for a designated positive class.

use std::collections::BTreeSet;
use std::fmt::Write as _;

use serde::{Deserialize, Serialize};

use crate::error::{FlimError, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    #[serde(rename = "fn")]
    pub fn_: usize,
    pub tn: usize,
}

impl Confusion {
    pub fn from_labels(pred: &[u16], truth: &[u16], positive: u16) -> Self {
        let mut c = Confusion::default();
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == positive, t == positive) {
                (true, true) => c.tp += 1,
                (true, false) => c.fp += 1,
                (false, true) => c.fn_ += 1,
                (false, false) => c.tn += 1,
            }
        }
        c
    }

    /// `(precision, recall, f_score, any_zero_denominator)`; undefined ratios are 0.
    pub fn scores(&self) -> (f64, f64, f64, bool) {
        let ratio = |num: usize, den: usize| {
            if den == 0 {
                (0.0, true)
            } else {
                (num as f64 / den as f64, false)
            }
        };
        let (p, pz) = ratio(self.tp, self.tp + self.fp);
        let (r, rz) = ratio(self.tp, self.tp + self.fn_);
        // harmonic mean of p and r, in its exact rational form
        let (f, fz) = if self.tp == 0 {
            (0.0, true)
        } else {
            ratio(2 * self.tp, 2 * self.tp + self.fp + self.fn_)
        };
        (p, r, f, pz || rz || fz)
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    pub positive_class: u16,
    pub precision: f64,
    pub recall: f64,
    pub f_score: f64,
    pub confusion: Confusion,
    /// Set when any of the ratios above had a zero denominator.
    pub zero_division: bool,
    pub macro_precision: f64,
    pub macro_recall: f64,
    pub macro_f_score: f64,
    pub accuracy: f64,
}

/// Scores `pred` against `truth` for `positive`, plus macro averages over
/// every class that appears in either vector.
pub fn evaluate(pred: &[u16], truth: &[u16], positive: u16) -> Result<Metrics> {
    if pred.len() != truth.len() {
        return Err(FlimError::LengthMismatch {
            left: pred.len(),
            right: truth.len(),
        });
    }
    let confusion = Confusion::from_labels(pred, truth, positive);
    let (precision, recall, f_score, zero_division) = confusion.scores();
    let classes: BTreeSet<u16> = pred.iter().chain(truth).copied().collect();
    let (mut mp, mut mr, mut mf) = (0.0, 0.0, 0.0);
    for &c in &classes {
        let (p, r, f, _) = Confusion::from_labels(pred, truth, c).scores();
        mp += p;
        mr += r;
        mf += f;
    }
    let nc = classes.len().max(1) as f64;
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    Ok(Metrics {
        positive_class: positive,
        precision,
        recall,
        f_score,
        confusion,
        zero_division,
        macro_precision: mp / nc,
        macro_recall: mr / nc,
        macro_f_score: mf / nc,
        accuracy: if pred.is_empty() {
            0.0
        } else {
            correct as f64 / pred.len() as f64
        },
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MeanStd {
    pub mean: f64,
    pub std: f64,
}

impl MeanStd {
    /// Mean and population standard deviation.
    pub fn of(values: &[f64]) -> Self {
        if values.is_empty() {
            return MeanStd { mean: 0.0, std: 0.0 };
        }
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / n;
        MeanStd {
            mean,
            std: var.sqrt(),
        }
    }
}

/// Metrics aggregated over repeated splits.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsSummary {
    pub precision: MeanStd,
    pub recall: MeanStd,
    pub f_score: MeanStd,
    pub runs: usize,
}

impl MetricsSummary {
    pub fn from_runs(runs: &[Metrics]) -> Self {
        let pick = |f: fn(&Metrics) -> f64| MeanStd::of(&runs.iter().map(f).collect::<Vec<_>>());
        MetricsSummary {
            precision: pick(|m| m.precision),
            recall: pick(|m| m.recall),
            f_score: pick(|m| m.f_score),
            runs: runs.len(),
        }
    }
}

/// Aligned `Method | Precision | Recall | F-score` table of `mean ± std` cells.
pub fn format_table(rows: &[(&str, &MetricsSummary)]) -> String {
    let cell = |m: &MeanStd| format!("{:.3} ± {:.3}", m.mean, m.std);
    let width = rows
        .iter()
        .map(|(name, _)| name.chars().count())
        .max()
        .unwrap_or(0)
        .max("Method".len());
    let mut out = String::new();
    let _ = writeln!(
        out,
        "{:<width$} | {:^13} | {:^13} | {:^13}",
        "Method", "Precision", "Recall", "F-score"
    );
    let _ = writeln!(out, "{}", "-".repeat(width + 3 * 16));
    for (name, s) in rows {
        let _ = writeln!(
            out,
            "{:<width$} | {:>13} | {:>13} | {:>13}",
            name,
            cell(&s.precision),
            cell(&s.recall),
            cell(&s.f_score)
        );
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn perfect_predictions() {
        let t = [1u16, 2, 1, 2, 2];
        let m = evaluate(&t, &t, 1).unwrap();
        assert_eq!((m.precision, m.recall, m.f_score), (1.0, 1.0, 1.0));
        assert!(!m.zero_division);
    }

    #[test]
    fn hand_computed_case() {
        // tp=3, fp=1, fn=2, tn=1
        let pred = [1u16, 1, 1, 1, 2, 2, 2];
        let truth = [1u16, 1, 1, 2, 1, 1, 2];
        let m = evaluate(&pred, &truth, 1).unwrap();
        assert_eq!(m.confusion, Confusion { tp: 3, fp: 1, fn_: 2, tn: 1 });
        assert_eq!(m.precision, 0.75);
        assert_eq!(m.recall, 0.6);
        assert!((m.f_score - 2.0 * 0.75 * 0.6 / 1.35).abs() < 1e-15);
    }

    #[test]
    fn all_negative_predictions() {
        let m = evaluate(&[2, 2, 2], &[1, 2, 1], 1).unwrap();
        assert_eq!((m.precision, m.recall, m.f_score), (0.0, 0.0, 0.0));
        assert!(m.zero_division);
    }

    #[test]
    fn length_mismatch() {
        assert!(matches!(
            evaluate(&[1], &[1, 2], 1),
            Err(FlimError::LengthMismatch { left: 1, right: 2 })
        ));
    }

    #[test]
    fn table_layout() {
        let s = MetricsSummary::from_runs(&[
            evaluate(&[1, 2], &[1, 2], 1).unwrap(),
            evaluate(&[1, 1], &[1, 2], 1).unwrap(),
        ]);
        let t = format_table(&[("FLIM+SVM", &s)]);
        let lines: Vec<&str> = t.lines().collect();
        assert!(lines[0].starts_with("Method"));
        assert!(lines[2].contains("0.750 ± 0.250"));
        assert!(lines[2].contains("1.000 ± 0.000"));
    }
}
