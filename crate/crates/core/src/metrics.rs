//! Binary classification metrics.
//!
//! The positive class throughout is `covid`. Derived scores are each a
//! single division of exact integer counts, so a reported value is the
//! correctly-rounded rational it claims to be — `precision 1/3` compares
//! equal to `1.0 / 3.0` exactly.

use std::fmt;

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsError {
    pub line: usize,
    pub why: String,
}

impl fmt::Display for MetricsError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "metrics line {}: {}", self.line, self.why)
    }
}

impl std::error::Error for MetricsError {}

/// Binary confusion counts. Positive means the covid class. (Spelled-out
/// field names; `fn` is not available as one.)
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub struct ConfusionMatrix {
    pub true_positive: u64,
    pub false_positive: u64,
    pub true_negative: u64,
    pub false_negative: u64,
}

impl ConfusionMatrix {
    pub fn record(&mut self, actual_positive: bool, predicted_positive: bool) {
        match (actual_positive, predicted_positive) {
            (true, true) => self.true_positive += 1,
            (false, true) => self.false_positive += 1,
            (false, false) => self.true_negative += 1,
            (true, false) => self.false_negative += 1,
        }
    }

    pub fn total(&self) -> u64 {
        self.true_positive + self.false_positive + self.true_negative + self.false_negative
    }

    /// `(TP + TN) / total`; 0 for an empty matrix.
    pub fn accuracy(&self) -> f64 {
        ratio(self.true_positive + self.true_negative, self.total())
    }

    /// `TP / (TP + FP)`; 0 when nothing was predicted positive.
    pub fn precision(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_positive)
    }

    /// `TP / (TP + FN)`; 0 when no positives exist.
    pub fn recall(&self) -> f64 {
        ratio(self.true_positive, self.true_positive + self.false_negative)
    }

    /// `2TP / (2TP + FP + FN)`, the harmonic mean of precision and recall
    /// reduced to one division; 0 when the denominator is 0.
    pub fn f1(&self) -> f64 {
        ratio(
            2 * self.true_positive,
            2 * self.true_positive + self.false_positive + self.false_negative,
        )
    }
}

fn ratio(num: u64, den: u64) -> f64 {
    if den == 0 {
        0.0
    } else {
        num as f64 / den as f64
    }
}

/// Area under the ROC curve by the rank statistic: sort by score, give tied
/// scores their mid-rank, and normalize the Mann-Whitney U of the positive
/// class. Equals the trapezoidal area under the ROC curve, ties handled by
/// the half-credit convention. `None` when either class is absent, since a
/// single-class AUC is undefined.
///
/// Scores must not be NaN.
pub fn compute_auc(scored: &[(f64, bool)]) -> Option<f64> {
    let n_pos = scored.iter().filter(|(_, positive)| *positive).count();
    let n_neg = scored.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        return None;
    }
    let mut order: Vec<usize> = (0..scored.len()).collect();
    order.sort_by(|&a, &b| {
        scored[a]
            .0
            .partial_cmp(&scored[b].0)
            .expect("AUC scores must not be NaN")
    });
    let mut rank_sum_pos = 0.0f64;
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && scored[order[j + 1]].0 == scored[order[i]].0 {
            j += 1;
        }
        // Average of the 1-based ranks i+1 ..= j+1.
        let mid_rank = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            if scored[k].1 {
                rank_sum_pos += mid_rank;
            }
        }
        i = j + 1;
    }
    let n_pos = n_pos as f64;
    let u = rank_sum_pos - n_pos * (n_pos + 1.0) / 2.0;
    Some(u / (n_pos * n_neg as f64))
}

/// Evaluation summary: raw counts, derived scores, mean loss, and AUC when
/// both classes were present.
#[derive(Debug, Clone, PartialEq)]
pub struct MetricsReport {
    pub confusion: ConfusionMatrix,
    pub loss: f64,
    pub auc: Option<f64>,
}

impl MetricsReport {
    /// Plain-text rendering: one `name value` pair per line, counts as
    /// integers, scores to six decimal places. The `auc` line is omitted
    /// when AUC is undefined.
    pub fn to_text(&self) -> String {
        let c = &self.confusion;
        let mut out = String::new();
        out.push_str(&format!("true_positive {}\n", c.true_positive));
        out.push_str(&format!("false_positive {}\n", c.false_positive));
        out.push_str(&format!("true_negative {}\n", c.true_negative));
        out.push_str(&format!("false_negative {}\n", c.false_negative));
        out.push_str(&format!("accuracy {:.6}\n", c.accuracy()));
        out.push_str(&format!("precision {:.6}\n", c.precision()));
        out.push_str(&format!("recall {:.6}\n", c.recall()));
        out.push_str(&format!("f1 {:.6}\n", c.f1()));
        if let Some(auc) = self.auc {
            out.push_str(&format!("auc {auc:.6}\n"));
        }
        out.push_str(&format!("loss {:.6}\n", self.loss));
        out
    }

    /// Parse the [`to_text`](Self::to_text) format. The four counts and the
    /// loss are required; derived-score lines are accepted and ignored
    /// (they are recomputed from the counts); unknown names are an error.
    pub fn from_text(text: &str) -> Result<MetricsReport, MetricsError> {
        let mut confusion = ConfusionMatrix::default();
        let mut seen_counts = 0u8;
        let mut loss = None;
        let mut auc = None;
        for (i, line) in text.lines().enumerate() {
            if line.is_empty() {
                continue;
            }
            let err = |why: String| MetricsError { line: i + 1, why };
            let Some((name, value)) = line.split_once(' ') else {
                return Err(err("expected `name value`".into()));
            };
            let count = |v: &str| {
                v.parse::<u64>()
                    .map_err(|e| err(format!("bad count {v:?}: {e}")))
            };
            let float = |v: &str| {
                v.parse::<f64>()
                    .map_err(|e| err(format!("bad value {v:?}: {e}")))
            };
            match name {
                "true_positive" => {
                    confusion.true_positive = count(value)?;
                    seen_counts |= 1;
                }
                "false_positive" => {
                    confusion.false_positive = count(value)?;
                    seen_counts |= 2;
                }
                "true_negative" => {
                    confusion.true_negative = count(value)?;
                    seen_counts |= 4;
                }
                "false_negative" => {
                    confusion.false_negative = count(value)?;
                    seen_counts |= 8;
                }
                "accuracy" | "precision" | "recall" | "f1" => {
                    float(value)?;
                }
                "auc" => auc = Some(float(value)?),
                "loss" => loss = Some(float(value)?),
                other => return Err(err(format!("unknown metric {other:?}"))),
            }
        }
        let Some(loss) = loss else {
            return Err(MetricsError {
                line: 0,
                why: "missing loss".into(),
            });
        };
        if seen_counts != 0b1111 {
            return Err(MetricsError {
                line: 0,
                why: "missing confusion counts".into(),
            });
        }
        Ok(MetricsReport { confusion, loss, auc })
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn matrix(tp: u64, fp: u64, tn: u64, fne: u64) -> ConfusionMatrix {
        ConfusionMatrix {
            true_positive: tp,
            false_positive: fp,
            true_negative: tn,
            false_negative: fne,
        }
    }

    #[test]
    fn derived_scores_are_exact_rationals() {
        let c = matrix(2, 1, 3, 0);
        assert_eq!(c.total(), 6);
        assert_eq!(c.accuracy(), 5.0 / 6.0);
        assert_eq!(c.precision(), 2.0 / 3.0);
        assert_eq!(c.recall(), 1.0);
        assert_eq!(c.f1(), 4.0 / 5.0);

        let c = matrix(1, 1, 0, 1);
        assert_eq!(c.precision(), 1.0 / 2.0);
        assert_eq!(c.recall(), 1.0 / 2.0);
        assert_eq!(c.f1(), 2.0 / 4.0);
    }

    #[test]
    fn zero_denominators_yield_zero() {
        let c = matrix(0, 0, 5, 0);
        assert_eq!(c.precision(), 0.0);
        assert_eq!(c.recall(), 0.0);
        assert_eq!(c.f1(), 0.0);
        assert_eq!(ConfusionMatrix::default().accuracy(), 0.0);
    }

    #[test]
    fn record_routes_each_outcome() {
        let mut c = ConfusionMatrix::default();
        c.record(true, true);
        c.record(true, false);
        c.record(false, true);
        c.record(false, false);
        assert_eq!(c, matrix(1, 1, 1, 1));
    }

    #[test]
    fn auc_of_perfect_and_inverted_rankings() {
        let perfect = [(0.9, true), (0.8, true), (0.2, false), (0.1, false)];
        assert_eq!(compute_auc(&perfect), Some(1.0));
        let inverted = [(0.1, true), (0.2, true), (0.8, false), (0.9, false)];
        assert_eq!(compute_auc(&inverted), Some(0.0));
    }

    #[test]
    fn auc_gives_ties_half_credit() {
        // Pairs: 0.9>0.5, 0.9>0.1, 0.5=0.5 (half), 0.5>0.1 -> 3.5/4
        let scored = [(0.9, true), (0.5, true), (0.5, false), (0.1, false)];
        assert_eq!(compute_auc(&scored), Some(0.875));
        // All scores equal: no ranking information at all.
        let flat = [(0.5, true), (0.5, false), (0.5, true), (0.5, false)];
        assert_eq!(compute_auc(&flat), Some(0.5));
    }

    #[test]
    fn auc_matches_the_pairwise_definition() {
        // Deterministic pseudo-random scores, then compare against the
        // O(n^2) count of correctly ordered positive/negative pairs.
        let scored: Vec<(f64, bool)> = (0..101u64)
            .map(|i| {
                let h = i.wrapping_mul(0x9e3779b97f4a7c15).rotate_left(17);
                // Coarse buckets force plenty of ties.
                ((h % 16) as f64 / 16.0, h % 3 == 0)
            })
            .collect();
        let positives: Vec<f64> = scored.iter().filter(|s| s.1).map(|s| s.0).collect();
        let negatives: Vec<f64> = scored.iter().filter(|s| !s.1).map(|s| s.0).collect();
        let mut wins = 0.0f64;
        for &p in &positives {
            for &n in &negatives {
                if p > n {
                    wins += 1.0;
                } else if p == n {
                    wins += 0.5;
                }
            }
        }
        let expected = wins / (positives.len() as f64 * negatives.len() as f64);
        let got = compute_auc(&scored).unwrap();
        assert!((got - expected).abs() < 1e-12, "{got} vs {expected}");
    }

    #[test]
    fn auc_is_undefined_for_a_single_class() {
        assert_eq!(compute_auc(&[(0.4, true), (0.6, true)]), None);
        assert_eq!(compute_auc(&[(0.4, false)]), None);
        assert_eq!(compute_auc(&[]), None);
    }

    #[test]
    fn report_text_roundtrip() {
        let report = MetricsReport {
            confusion: matrix(12, 3, 14, 1),
            loss: 0.412345678,
            auc: Some(0.9125),
        };
        let text = report.to_text();
        assert!(text.contains("true_positive 12\n"));
        assert!(text.contains("accuracy 0.866667\n"));
        assert!(text.contains("auc 0.912500\n"));
        let back = MetricsReport::from_text(&text).unwrap();
        assert_eq!(back.confusion, report.confusion);
        // Text carries six decimals; parsing it again is stable.
        assert_eq!(back.to_text(), MetricsReport::from_text(&back.to_text()).unwrap().to_text());
    }

    #[test]
    fn report_omits_undefined_auc() {
        let report = MetricsReport {
            confusion: matrix(1, 0, 0, 0),
            loss: 0.1,
            auc: None,
        };
        let text = report.to_text();
        assert!(!text.contains("auc"));
        assert_eq!(MetricsReport::from_text(&text).unwrap().auc, None);
    }

    #[test]
    fn report_parser_rejects_unknown_and_incomplete_input() {
        assert!(MetricsReport::from_text("bogus 1\n").is_err());
        assert!(MetricsReport::from_text("true_positive 1\nloss 0.5\n").is_err());
        let err = MetricsReport::from_text("true_positive x\n").unwrap_err();
        assert_eq!(err.line, 1);
    }
}
