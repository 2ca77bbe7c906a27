//! Classification metrics over labeled predictions: confusion matrix,
//! accuracy, per-class precision/recall/F1, support-weighted F1, the
//! unknown-class metrics, and optional one-vs-rest AUC.
//!
//! Per-class values are single integer divisions (F1 uses the
//! 2TP/(2TP+FP+FN) form) so fixtures with hand-computed rational values can
//! assert exact equality.

use crate::error::{Error, Result};
use crate::inference::UNKNOWN_LABEL;
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassMetrics {
    pub class: String,
    pub precision: f64,
    pub recall: f64,
    pub f1: f64,
    pub support: usize,
    /// Set when the zero-division convention forced a 0.
    pub undefined: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub classes: Vec<String>,
    /// `confusion[t][p]` counts samples of true class `t` predicted as `p`.
    pub confusion: Vec<Vec<usize>>,
    pub accuracy: f64,
    pub per_class: Vec<ClassMetrics>,
    pub weighted_f1: f64,
    pub unknown_precision: f64,
    pub unknown_recall: f64,
    pub unknown_f1: f64,
    pub unknown_defined: bool,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub auc: Option<f64>,
}

/// Per-sample scores aligned with a class order, for ROC computation.
#[derive(Debug, Clone, PartialEq)]
pub struct ScoreMatrix {
    pub class_order: Vec<String>,
    pub rows: Vec<Vec<f64>>,
}

/// One-vs-rest AUC by rank statistics with midpoint tie handling.
fn binary_auc(scores: &[f64], positives: &[bool]) -> f64 {
    let n_pos = positives.iter().filter(|&&p| p).count();
    let n_neg = positives.len() - n_pos;
    debug_assert!(n_pos > 0 && n_neg > 0);
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[a].total_cmp(&scores[b]));
    // Average ranks across ties.
    let mut rank_sum_pos = 0.0;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scores[order[j + 1]] == scores[order[i]] {
            j += 1;
        }
        let avg_rank = (i + 1 + j + 1) as f64 / 2.0;
        for &idx in &order[i..=j] {
            if positives[idx] {
                rank_sum_pos += avg_rank;
            }
        }
        i = j + 1;
    }
    (rank_sum_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64
}

/// Compute the full report. `classes` fixes the label universe (defaults to
/// the sorted labels observed in truth and predictions); `scores` enables the
/// macro one-vs-rest AUC.
pub fn compute_metrics(
    y_true: &[String],
    y_pred: &[String],
    classes: Option<&[String]>,
    scores: Option<&ScoreMatrix>,
) -> Result<MetricsReport> {
    if y_true.len() != y_pred.len() {
        return Err(Error::LengthMismatch {
            expected: y_true.len(),
            got: y_pred.len(),
        });
    }
    if y_true.is_empty() {
        return Err(Error::LengthMismatch {
            expected: 1,
            got: 0,
        });
    }
    let classes: Vec<String> = match classes {
        Some(c) => c.to_vec(),
        None => {
            let mut all: Vec<String> = y_true.iter().chain(y_pred).cloned().collect();
            all.sort();
            all.dedup();
            all
        }
    };
    let index_of = |label: &String| -> Result<usize> {
        classes
            .iter()
            .position(|c| c == label)
            .ok_or_else(|| Error::UnknownLabel(label.clone()))
    };

    let n = classes.len();
    let mut confusion = vec![vec![0usize; n]; n];
    for (t, p) in y_true.iter().zip(y_pred) {
        confusion[index_of(t)?][index_of(p)?] += 1;
    }

    let total = y_true.len();
    let correct: usize = (0..n).map(|i| confusion[i][i]).sum();
    let accuracy = correct as f64 / total as f64;

    let mut per_class = Vec::with_capacity(n);
    for c in 0..n {
        let tp: usize = confusion[c][c];
        let fp: usize = (0..n).filter(|&t| t != c).map(|t| confusion[t][c]).sum();
        let fn_: usize = (0..n).filter(|&p| p != c).map(|p| confusion[c][p]).sum();
        let support: usize = confusion[c].iter().sum();
        let precision = if tp + fp == 0 {
            0.0
        } else {
            tp as f64 / (tp + fp) as f64
        };
        let recall = if tp + fn_ == 0 {
            0.0
        } else {
            tp as f64 / (tp + fn_) as f64
        };
        let f1_denom = 2 * tp + fp + fn_;
        let f1 = if f1_denom == 0 {
            0.0
        } else {
            (2 * tp) as f64 / f1_denom as f64
        };
        per_class.push(ClassMetrics {
            class: classes[c].clone(),
            precision,
            recall,
            f1,
            support,
            undefined: tp + fp == 0 || tp + fn_ == 0,
        });
    }

    // Support-weighted F1 over all classes, the unknown class included.
    let weighted_sum: f64 = per_class
        .iter()
        .map(|m| m.support as f64 * m.f1)
        .sum();
    let weighted_f1 = weighted_sum / total as f64;

    let unknown = per_class.iter().find(|m| m.class == UNKNOWN_LABEL);
    let (unknown_precision, unknown_recall, unknown_f1, unknown_defined) = match unknown {
        Some(m) => {
            let appears = m.support > 0 || y_pred.iter().any(|p| p == UNKNOWN_LABEL);
            (m.precision, m.recall, m.f1, appears)
        }
        None => (0.0, 0.0, 0.0, false),
    };

    let auc = match scores {
        None => None,
        Some(matrix) => {
            if matrix.rows.len() != total {
                return Err(Error::LengthMismatch {
                    expected: total,
                    got: matrix.rows.len(),
                });
            }
            let mut aucs = Vec::new();
            for (ci, class) in matrix.class_order.iter().enumerate() {
                let positives: Vec<bool> = y_true.iter().map(|t| t == class).collect();
                let n_pos = positives.iter().filter(|&&p| p).count();
                if n_pos == 0 || n_pos == total {
                    continue;
                }
                let col: Vec<f64> = matrix.rows.iter().map(|r| r[ci]).collect();
                aucs.push(binary_auc(&col, &positives));
            }
            if aucs.is_empty() {
                None
            } else {
                Some(aucs.iter().sum::<f64>() / aucs.len() as f64)
            }
        }
    };

    Ok(MetricsReport {
        classes,
        confusion,
        accuracy,
        per_class,
        weighted_f1,
        unknown_precision,
        unknown_recall,
        unknown_f1,
        unknown_defined,
        auc,
    })
}

impl MetricsReport {
    /// Plain-text rendering: the headline open-set row plus per-class lines.
    pub fn render_text(&self) -> String {
        use std::fmt::Write;
        let mut out = String::new();
        let _ = writeln!(out, "metric      value");
        let _ = writeln!(out, "W-F1        {:.3}", self.weighted_f1);
        let _ = writeln!(out, "U-Pr        {:.3}", self.unknown_precision);
        let _ = writeln!(out, "U-Rc        {:.3}", self.unknown_recall);
        let _ = writeln!(out, "U-F1        {:.3}", self.unknown_f1);
        let _ = writeln!(out, "accuracy    {:.3}", self.accuracy);
        if let Some(auc) = self.auc {
            let _ = writeln!(out, "AUC         {auc:.3}");
        }
        if !self.unknown_defined {
            let _ = writeln!(out, "note: unknown-class metrics undefined on this data");
        }
        let _ = writeln!(out);
        let _ = writeln!(out, "class            P      R      F1     support");
        for m in &self.per_class {
            let _ = writeln!(
                out,
                "{:<14} {:>6.3} {:>6.3} {:>6.3} {:>9}{}",
                m.class,
                m.precision,
                m.recall,
                m.f1,
                m.support,
                if m.undefined { "  (undefined)" } else { "" }
            );
        }
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn labels(v: &[&str]) -> Vec<String> {
        v.iter().map(|s| s.to_string()).collect()
    }

    #[test]
    fn unknown_metrics_on_spec_fixture() {
        let y_true = labels(&["U", "U", "U", "U", "A", "A", "B", "B"]);
        let y_pred = labels(&["U", "U", "U", "A", "U", "A", "B", "B"]);
        let report = compute_metrics(&y_true, &y_pred, None, None).unwrap();
        assert_eq!(report.unknown_precision, 0.75);
        assert_eq!(report.unknown_recall, 0.75);
        assert_eq!(report.unknown_f1, 0.75);
        assert!(report.unknown_defined);
        // Hand-counted confusion entries: TP_U=3, FP_U=1, FN_U=1.
        let u = report.classes.iter().position(|c| c == "U").unwrap();
        assert_eq!(report.confusion[u][u], 3);
    }

    #[test]
    fn perfect_predictions() {
        let y = labels(&["A", "B", "U", "A", "U"]);
        let report = compute_metrics(&y, &y, None, None).unwrap();
        assert_eq!(report.accuracy, 1.0);
        assert_eq!(report.weighted_f1, 1.0);
        assert_eq!(report.unknown_f1, 1.0);
    }

    #[test]
    fn absent_unknown_class_is_flagged() {
        let y_true = labels(&["A", "B"]);
        let y_pred = labels(&["A", "B"]);
        let report = compute_metrics(&y_true, &y_pred, None, None).unwrap();
        assert_eq!(report.unknown_precision, 0.0);
        assert_eq!(report.unknown_recall, 0.0);
        assert_eq!(report.unknown_f1, 0.0);
        assert!(!report.unknown_defined);
    }

    #[test]
    fn permutation_invariance() {
        let y_true = labels(&["A", "B", "U", "A", "B", "U", "A"]);
        let y_pred = labels(&["A", "U", "U", "B", "B", "A", "A"]);
        let base = compute_metrics(&y_true, &y_pred, None, None).unwrap();
        let perm = [3usize, 0, 6, 1, 5, 2, 4];
        let t2: Vec<String> = perm.iter().map(|&i| y_true[i].clone()).collect();
        let p2: Vec<String> = perm.iter().map(|&i| y_pred[i].clone()).collect();
        let shuffled = compute_metrics(&t2, &p2, None, None).unwrap();
        assert_eq!(base, shuffled);
    }

    #[test]
    fn length_mismatch_and_unknown_label_errors() {
        let a = labels(&["A"]);
        let b = labels(&["A", "B"]);
        assert!(matches!(
            compute_metrics(&a, &b, None, None),
            Err(Error::LengthMismatch { .. })
        ));
        let declared = labels(&["A"]);
        assert!(matches!(
            compute_metrics(&a, &labels(&["X"]), Some(&declared), None),
            Err(Error::UnknownLabel(_))
        ));
    }

    #[test]
    fn auc_perfect_and_constant() {
        let y_true = labels(&["A", "A", "B", "B"]);
        let y_pred = labels(&["A", "A", "B", "B"]);
        let perfect = ScoreMatrix {
            class_order: labels(&["A", "B"]),
            rows: vec![
                vec![0.9, 0.1],
                vec![0.8, 0.2],
                vec![0.1, 0.9],
                vec![0.2, 0.8],
            ],
        };
        let report = compute_metrics(&y_true, &y_pred, None, Some(&perfect)).unwrap();
        assert_eq!(report.auc, Some(1.0));

        let constant = ScoreMatrix {
            class_order: labels(&["A", "B"]),
            rows: vec![vec![0.5, 0.5]; 4],
        };
        let report = compute_metrics(&y_true, &y_pred, None, Some(&constant)).unwrap();
        assert_eq!(report.auc, Some(0.5));
    }

    #[test]
    fn render_text_mentions_headline_metrics() {
        let y = labels(&["A", "U"]);
        let report = compute_metrics(&y, &y, None, None).unwrap();
        let text = report.render_text();
        assert!(text.contains("W-F1"));
        assert!(text.contains("U-F1"));
    }
}
