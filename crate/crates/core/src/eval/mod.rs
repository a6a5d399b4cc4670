//! Classification metrics: macro F1, accuracy, ROC AUC and McClish
//! standardized partial AUC.

mod report;

pub use report::{
    aggregate_seeds, read_metrics_csv, read_predictions, render_table, write_metrics_csv,
    write_predictions, MetricsRow, PredictionRow, SeedSummary,
};

use serde::Serialize;

use crate::error::{Error, Result};

pub const DEFAULT_THRESHOLD: f64 = 0.5;
pub const DEFAULT_FPR_MAX: f64 = 0.1;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize)]
pub struct Confusion {
    pub tp: usize,
    pub fp: usize,
    pub tn: usize,
    pub fn_: usize,
}

impl Confusion {
    pub fn total(&self) -> usize {
        self.tp + self.fp + self.tn + self.fn_
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct F1Accuracy {
    pub f1_macro: f64,
    pub f1_fake: f64,
    pub f1_real: f64,
    pub accuracy: f64,
    pub confusion: Confusion,
    /// Set when a class is missing from both labels and predictions, in
    /// which case its F1 is taken as 0.
    pub degenerate_class: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize)]
pub struct MetricsReport {
    pub f1_macro: f64,
    pub accuracy: f64,
    pub auc: f64,
    pub spauc: f64,
    pub confusion: Confusion,
}

fn check_inputs(scores: &[f64], labels: &[u8]) -> Result<()> {
    if scores.len() != labels.len() {
        return Err(Error::LengthMismatch {
            what: "scores vs labels",
            left: scores.len(),
            right: labels.len(),
        });
    }
    if scores.is_empty() {
        return Err(Error::EmptyInput("score list".into()));
    }
    if let Some(l) = labels.iter().find(|&&l| l > 1) {
        return Err(Error::InvalidInput(format!("label {l} is not 0 or 1")));
    }
    if scores.iter().any(|s| s.is_nan()) {
        return Err(Error::NonFinite("scores".into()));
    }
    Ok(())
}

/// Thresholded confusion counts (`score >= threshold` predicts fake) and
/// the macro F1 over the two classes.
pub fn f1_acc(scores: &[f64], labels: &[u8], threshold: f64) -> Result<F1Accuracy> {
    check_inputs(scores, labels)?;
    let mut c = Confusion::default();
    for (&s, &y) in scores.iter().zip(labels) {
        match (s >= threshold, y == 1) {
            (true, true) => c.tp += 1,
            (true, false) => c.fp += 1,
            (false, false) => c.tn += 1,
            (false, true) => c.fn_ += 1,
        }
    }
    let f1 = |hit: usize, miss_a: usize, miss_b: usize| {
        let denom = 2 * hit + miss_a + miss_b;
        if denom == 0 {
            None
        } else {
            Some(2.0 * hit as f64 / denom as f64)
        }
    };
    let fake = f1(c.tp, c.fp, c.fn_);
    let real = f1(c.tn, c.fn_, c.fp);
    let f1_fake = fake.unwrap_or(0.0);
    let f1_real = real.unwrap_or(0.0);
    Ok(F1Accuracy {
        f1_macro: (f1_fake + f1_real) / 2.0,
        f1_fake,
        f1_real,
        accuracy: (c.tp + c.tn) as f64 / c.total() as f64,
        confusion: c,
        degenerate_class: fake.is_none() || real.is_none(),
    })
}

fn class_counts(labels: &[u8]) -> Result<(usize, usize)> {
    let pos = labels.iter().filter(|&&l| l == 1).count();
    let neg = labels.len() - pos;
    if pos == 0 || neg == 0 {
        return Err(Error::InvalidInput(
            "ROC analysis needs both classes present".into(),
        ));
    }
    Ok((pos, neg))
}

/// ROC vertices `(fpr, tpr)` from `(0, 0)` to `(1, 1)`, one vertex per
/// distinct score (tied scores move diagonally).
pub fn roc_curve(scores: &[f64], labels: &[u8]) -> Result<Vec<(f64, f64)>> {
    check_inputs(scores, labels)?;
    let (pos, neg) = class_counts(labels)?;
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let mut points = vec![(0.0, 0.0)];
    let (mut tp, mut fp) = (0usize, 0usize);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                tp += 1;
            } else {
                fp += 1;
            }
            i += 1;
        }
        points.push((fp as f64 / neg as f64, tp as f64 / pos as f64));
    }
    Ok(points)
}

/// Area under the ROC curve by the trapezoid rule over grouped thresholds;
/// identical to the Mann–Whitney probability with half credit for ties.
pub fn roc_auc(scores: &[f64], labels: &[u8]) -> Result<f64> {
    let (pos, neg) = {
        check_inputs(scores, labels)?;
        class_counts(labels)?
    };
    // Integer trapezoid sums keep the result exact: each group adds
    // dfp·(2·tp_before + dtp) / 2, normalised once at the end.
    let mut order: Vec<usize> = (0..scores.len()).collect();
    order.sort_by(|&a, &b| scores[b].total_cmp(&scores[a]));
    let (mut tp, mut twice_area) = (0u128, 0u128);
    let mut i = 0;
    while i < order.len() {
        let s = scores[order[i]];
        let (mut dtp, mut dfp) = (0u128, 0u128);
        while i < order.len() && scores[order[i]] == s {
            if labels[order[i]] == 1 {
                dtp += 1;
            } else {
                dfp += 1;
            }
            i += 1;
        }
        twice_area += dfp * (2 * tp + dtp);
        tp += dtp;
    }
    Ok(twice_area as f64 / (2 * pos * neg) as f64)
}

/// Area under the ROC polyline for `fpr ∈ [0, fpr_max]`, interpolating the
/// segment that crosses `fpr_max`.
pub fn partial_auc(scores: &[f64], labels: &[u8], fpr_max: f64) -> Result<f64> {
    if !(fpr_max > 0.0 && fpr_max <= 1.0) {
        return Err(Error::InvalidInput(format!("fpr_max must be in (0, 1], got {fpr_max}")));
    }
    let curve = roc_curve(scores, labels)?;
    let mut area = 0.0;
    for w in curve.windows(2) {
        let ((x0, y0), (x1, y1)) = (w[0], w[1]);
        if x0 >= fpr_max {
            break;
        }
        if x1 <= fpr_max {
            area += (x1 - x0) * (y0 + y1) / 2.0;
        } else {
            let y_cut = y0 + (y1 - y0) * (fpr_max - x0) / (x1 - x0);
            area += (fpr_max - x0) * (y0 + y_cut) / 2.0;
            break;
        }
    }
    Ok(area)
}

/// McClish standardization of the partial AUC: chance maps to 0.5 and a
/// perfect ranking to 1.0.
pub fn spauc(scores: &[f64], labels: &[u8], fpr_max: f64) -> Result<f64> {
    let pauc = partial_auc(scores, labels, fpr_max)?;
    let a_max = fpr_max;
    let a_min = fpr_max * fpr_max / 2.0;
    Ok(0.5 * (1.0 + (pauc - a_min) / (a_max - a_min)))
}

/// All four metrics at the default threshold and FPR cap.
pub fn evaluate(scores: &[f64], labels: &[u8]) -> Result<MetricsReport> {
    let fa = f1_acc(scores, labels, DEFAULT_THRESHOLD)?;
    Ok(MetricsReport {
        f1_macro: fa.f1_macro,
        accuracy: fa.accuracy,
        auc: roc_auc(scores, labels)?,
        spauc: spauc(scores, labels, DEFAULT_FPR_MAX)?,
        confusion: fa.confusion,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn mann_whitney(scores: &[f64], labels: &[u8]) -> f64 {
        let mut wins = 0.0;
        let mut pairs = 0.0;
        for (i, &si) in scores.iter().enumerate() {
            for (j, &sj) in scores.iter().enumerate() {
                if labels[i] == 1 && labels[j] == 0 {
                    pairs += 1.0;
                    if si > sj {
                        wins += 1.0;
                    } else if si == sj {
                        wins += 0.5;
                    }
                }
            }
        }
        wins / pairs
    }

    #[test]
    fn perfect_predictions() {
        let r = f1_acc(&[0.9, 0.8, 0.1], &[1, 1, 0], 0.5).unwrap();
        assert_eq!((r.f1_macro, r.accuracy), (1.0, 1.0));
        let r = f1_acc(&[0.1, 0.2, 0.9], &[1, 1, 0], 0.5).unwrap();
        assert_eq!(r.accuracy, 0.0);
    }

    #[test]
    fn hand_confusion_example() {
        let r = f1_acc(&[0.9, 0.6, 0.4, 0.1], &[1, 0, 1, 0], 0.5).unwrap();
        assert_eq!(
            r.confusion,
            Confusion {
                tp: 1,
                fp: 1,
                tn: 1,
                fn_: 1
            }
        );
        assert_eq!((r.f1_fake, r.f1_real, r.f1_macro, r.accuracy), (0.5, 0.5, 0.5, 0.5));
    }

    #[test]
    fn absent_class_is_flagged() {
        let r = f1_acc(&[0.1, 0.2], &[0, 0], 0.5).unwrap();
        assert!(r.degenerate_class);
        assert_eq!(r.f1_macro, 0.5);
        assert!(f1_acc(&[], &[], 0.5).is_err());
    }

    #[test]
    fn auc_examples() {
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.7], &[1, 1, 0, 0]).unwrap(), 1.0);
        assert_eq!(roc_auc(&[0.5, 0.5], &[1, 0]).unwrap(), 0.5);
        assert_eq!(roc_auc(&[0.9, 0.8, 0.1, 0.7], &[0, 0, 1, 1]).unwrap(), 0.0);
        assert!(roc_auc(&[0.1, 0.2], &[1, 1]).is_err());
    }

    #[test]
    fn spauc_extremes() {
        let s = [0.9, 0.8, 0.3, 0.2];
        assert!((partial_auc(&s, &[1, 1, 0, 0], 0.1).unwrap() - 0.1).abs() < 1e-15);
        assert!((spauc(&s, &[1, 1, 0, 0], 0.1).unwrap() - 1.0).abs() < 1e-12);
        // every score tied: ROC is the diagonal
        let tied = [0.5; 6];
        let l = [1, 0, 1, 0, 1, 0];
        assert!((partial_auc(&tied, &l, 0.1).unwrap() - 0.005).abs() < 1e-15);
        assert!((spauc(&tied, &l, 0.1).unwrap() - 0.5).abs() < 1e-12);
        assert!(spauc(&s, &[1, 1, 0, 0], 0.0).is_err());
    }

    /// Brute-force ROC: every threshold from the score set plus ±∞,
    /// vertices sorted by (fpr, tpr), pAUC integrated on the polyline.
    fn brute_partial_auc(scores: &[f64], labels: &[u8], cap: f64) -> f64 {
        let pos = labels.iter().filter(|&&l| l == 1).count() as f64;
        let neg = labels.len() as f64 - pos;
        let mut ts: Vec<f64> = scores.to_vec();
        ts.push(f64::INFINITY);
        ts.sort_by(|a, b| b.total_cmp(a));
        ts.dedup();
        let pts: Vec<(f64, f64)> = ts
            .iter()
            .map(|&t| {
                let tp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 1).count();
                let fp = scores.iter().zip(labels).filter(|(s, l)| **s >= t && **l == 0).count();
                (fp as f64 / neg, tp as f64 / pos)
            })
            .collect();
        // fine midpoint quadrature of the piecewise-linear curve
        let steps = 200_000;
        let h = cap / steps as f64;
        let tpr_at = |x: f64| {
            for w in pts.windows(2) {
                let ((x0, y0), (x1, y1)) = (w[0], w[1]);
                if x >= x0 && x <= x1 && x1 > x0 {
                    return y0 + (y1 - y0) * (x - x0) / (x1 - x0);
                }
            }
            pts.last().unwrap().1
        };
        (0..steps).map(|k| tpr_at((k as f64 + 0.5) * h) * h).sum()
    }

    #[test]
    fn six_point_partial_auc_matches_brute_force() {
        let scores = [0.95, 0.7, 0.7, 0.4, 0.3, 0.05];
        let labels = [1, 0, 1, 0, 1, 0];
        for cap in [0.1, 0.3, 0.5, 1.0] {
            let fast = partial_auc(&scores, &labels, cap).unwrap();
            let brute = brute_partial_auc(&scores, &labels, cap);
            // midpoint rule loses up to ~h at each vertical ROC jump
            assert!((fast - brute).abs() < 1e-5, "cap {cap}: {fast} vs {brute}");
        }
        assert_eq!(
            partial_auc(&scores, &labels, 1.0).unwrap(),
            mann_whitney(&scores, &labels)
        );
    }

    proptest! {
        #[test]
        fn auc_equals_pair_counting(
            pairs in proptest::collection::vec((0u8..6, 0u8..2), 2..30)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64 / 5.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), mann_whitney(&scores, &labels));
            let flipped: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            let sum = roc_auc(&scores, &labels).unwrap() + roc_auc(&scores, &flipped).unwrap();
            prop_assert!((sum - 1.0).abs() < 1e-12);
        }

        #[test]
        fn auc_invariant_under_monotone_transform(
            pairs in proptest::collection::vec((-5.0f64..5.0, 0u8..2), 2..30)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let squashed: Vec<f64> = scores.iter().map(|s| 1.0 / (1.0 + (-s).exp())).collect();
            prop_assert_eq!(roc_auc(&scores, &labels).unwrap(), roc_auc(&squashed, &labels).unwrap());
        }

        #[test]
        fn full_range_spauc_is_auc(
            pairs in proptest::collection::vec((0u8..8, 0u8..2), 2..30)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0 as f64).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            prop_assume!(labels.contains(&0) && labels.contains(&1));
            let auc = roc_auc(&scores, &labels).unwrap();
            let s = spauc(&scores, &labels, 1.0).unwrap();
            prop_assert!((s - 0.5 * (1.0 + (auc - 0.5) / 0.5)).abs() < 1e-12);
        }

        #[test]
        fn macro_f1_symmetric_under_relabel_and_flip(
            pairs in proptest::collection::vec((0.0f64..1.0, 0u8..2), 1..30)
        ) {
            let scores: Vec<f64> = pairs.iter().map(|p| p.0).collect();
            let labels: Vec<u8> = pairs.iter().map(|p| p.1).collect();
            // strict complement at threshold 0.5: s >= 0.5  <=>  !(1 - s > 0.5)
            prop_assume!(scores.iter().all(|&s| s != 0.5));
            let a = f1_acc(&scores, &labels, 0.5).unwrap();
            let fs: Vec<f64> = scores.iter().map(|s| 1.0 - s).collect();
            let fl: Vec<u8> = labels.iter().map(|l| 1 - l).collect();
            let b = f1_acc(&fs, &fl, 0.5).unwrap();
            prop_assert!((a.f1_macro - b.f1_macro).abs() < 1e-12);
            prop_assert_eq!(a.accuracy, b.accuracy);
        }
    }
}
