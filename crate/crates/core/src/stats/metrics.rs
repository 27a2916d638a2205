use crate::error::{bail, Result};
use serde::Serialize;

/// Mean per-class recall over the classes present in `y_true`.
pub fn balanced_accuracy(y_true: &[usize], y_pred: &[usize]) -> Result<f64> {
    if y_true.is_empty() {
        bail!(Data, "balanced accuracy of an empty set");
    }
    if y_true.len() != y_pred.len() {
        bail!(Data, "{} labels but {} predictions", y_true.len(), y_pred.len());
    }
    let n_classes = y_true.iter().max().copied().unwrap_or(0) + 1;
    let mut total = vec![0usize; n_classes];
    let mut hit = vec![0usize; n_classes];
    for (&t, &p) in y_true.iter().zip(y_pred) {
        total[t] += 1;
        hit[t] += (t == p) as usize;
    }
    let recalls: Vec<f64> = total
        .iter()
        .zip(&hit)
        .filter(|(&n, _)| n > 0)
        .map(|(&n, &h)| h as f64 / n as f64)
        .collect();
    Ok(recalls.iter().sum::<f64>() / recalls.len() as f64)
}

/// Average ranks (1-based), ties sharing the mean of their positions.
pub fn average_ranks(values: &[f64]) -> Vec<f64> {
    let mut order: Vec<usize> = (0..values.len()).collect();
    order.sort_by(|&a, &b| values[a].total_cmp(&values[b]));
    let mut ranks = vec![0.0; values.len()];
    let mut i = 0;
    while i < order.len() {
        let mut j = i;
        while j + 1 < order.len() && values[order[j + 1]] == values[order[i]] {
            j += 1;
        }
        let r = (i + j) as f64 / 2.0 + 1.0;
        for &k in &order[i..=j] {
            ranks[k] = r;
        }
        i = j + 1;
    }
    ranks
}

/// Mann–Whitney AUC: fraction of positive/negative pairs ordered correctly,
/// ties counting one half.
pub fn auc(y_true: &[bool], scores: &[f64]) -> Result<f64> {
    if y_true.len() != scores.len() {
        bail!(Data, "{} labels but {} scores", y_true.len(), scores.len());
    }
    if scores.iter().any(|s| !s.is_finite()) {
        bail!(Data, "non-finite score");
    }
    let n_pos = y_true.iter().filter(|&&y| y).count();
    let n_neg = y_true.len() - n_pos;
    if n_pos == 0 || n_neg == 0 {
        bail!(Data, "AUC needs both classes (positives {}, negatives {})", n_pos, n_neg);
    }
    let ranks = average_ranks(scores);
    let r_pos: f64 = ranks.iter().zip(y_true).filter(|(_, &y)| y).map(|(r, _)| r).sum();
    Ok((r_pos - (n_pos * (n_pos + 1)) as f64 / 2.0) / (n_pos * n_neg) as f64)
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct RegressionReport {
    /// `None` when either series has zero variance.
    pub pearson: Option<f64>,
    pub mse: f64,
    /// `None` when `y_true` has zero variance.
    pub r2: Option<f64>,
}

pub fn regression_metrics(y_true: &[f64], y_pred: &[f64]) -> Result<RegressionReport> {
    let n = y_true.len();
    if n < 2 || y_pred.len() != n {
        bail!(Data, "regression metrics need two or more paired values");
    }
    let nf = n as f64;
    let my = y_true.iter().sum::<f64>() / nf;
    let mp = y_pred.iter().sum::<f64>() / nf;
    let (mut sxy, mut sxx, mut syy, mut ss_res) = (0.0, 0.0, 0.0, 0.0);
    for (&y, &p) in y_true.iter().zip(y_pred) {
        sxy += (y - my) * (p - mp);
        syy += (y - my).powi(2);
        sxx += (p - mp).powi(2);
        ss_res += (y - p).powi(2);
    }
    Ok(RegressionReport {
        pearson: (syy > 0.0 && sxx > 0.0).then(|| sxy / (syy * sxx).sqrt()),
        mse: ss_res / nf,
        r2: (syy > 0.0).then(|| 1.0 - ss_res / syy),
    })
}

#[derive(Clone, Debug, PartialEq, Serialize)]
pub struct PpvReport {
    pub ppv: f64,
    /// `None` when the threshold leaves no predicted negatives.
    pub npv: Option<f64>,
    /// Scores `≥ threshold` are called positive.
    pub threshold: f64,
    /// Set when no threshold reached the NPV floor.
    pub flagged: bool,
}

/// Highest PPV over thresholds whose NPV is at least `npv_min`; among equal
/// PPVs the lowest threshold (highest sensitivity) wins.
pub fn ppv_at_npv(y_true: &[bool], scores: &[f64], npv_min: f64) -> Result<PpvReport> {
    if y_true.len() != scores.len() || y_true.is_empty() {
        bail!(Data, "need matching nonempty labels and scores");
    }
    if !(npv_min > 0.0 && npv_min < 1.0) {
        bail!(Data, "npv_min must lie in (0, 1)");
    }
    if !y_true.iter().any(|&y| y) || y_true.iter().all(|&y| y) {
        bail!(Data, "PPV at NPV needs both classes");
    }
    let mut thresholds: Vec<f64> = scores.to_vec();
    thresholds.sort_by(f64::total_cmp);
    thresholds.dedup();
    let mut best: Option<PpvReport> = None;
    let mut fallback: Option<PpvReport> = None;
    for &t in &thresholds {
        let (mut tp, mut fp, mut tn, mut fn_) = (0usize, 0usize, 0usize, 0usize);
        for (&y, &s) in y_true.iter().zip(scores) {
            match (s >= t, y) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, false) => tn += 1,
                (false, true) => fn_ += 1,
            }
        }
        let ppv = tp as f64 / (tp + fp) as f64;
        let npv = (tn + fn_ > 0).then(|| tn as f64 / (tn + fn_) as f64);
        let report = PpvReport {
            ppv,
            npv,
            threshold: t,
            flagged: false,
        };
        if npv.is_some_and(|v| v >= npv_min) && best.as_ref().is_none_or(|b| ppv > b.ppv) {
            best = Some(report.clone());
        }
        if fallback.as_ref().is_none_or(|f| npv.unwrap_or(-1.0) > f.npv.unwrap_or(-1.0)) {
            fallback = Some(report);
        }
    }
    Ok(best.unwrap_or_else(|| PpvReport {
        flagged: true,
        ..fallback.expect("at least one threshold")
    }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn balanced_accuracy_cases() {
        assert_eq!(balanced_accuracy(&[0, 1, 2], &[0, 1, 2]).unwrap(), 1.0);
        assert_eq!(balanced_accuracy(&[0, 0, 1, 1], &[0, 0, 0, 0]).unwrap(), 0.5);
        let ba = balanced_accuracy(&[0, 0, 1, 1, 1], &[0, 1, 1, 1, 0]).unwrap();
        assert!((ba - 7.0 / 12.0).abs() < 1e-15);
        assert!(balanced_accuracy(&[], &[]).is_err());
    }

    #[test]
    fn auc_cases() {
        assert_eq!(auc(&[true, false, true, false], &[0.9, 0.8, 0.7, 0.1]).unwrap(), 0.75);
        assert_eq!(auc(&[true, true, false], &[3.0, 2.0, 1.0]).unwrap(), 1.0);
        assert_eq!(auc(&[true, false, false], &[1.0, 1.0, 1.0]).unwrap(), 0.5);
        assert!(auc(&[true, true], &[1.0, 2.0]).is_err());
    }

    #[test]
    fn regression_cases() {
        let r = regression_metrics(&[1.0, 2.0, 3.0], &[1.0, 2.0, 3.0]).unwrap();
        assert_eq!((r.pearson, r.mse, r.r2), (Some(1.0), 0.0, Some(1.0)));
        let r = regression_metrics(&[1.0, 2.0, 3.0], &[2.0, 2.0, 2.0]).unwrap();
        assert!((r.mse - 2.0 / 3.0).abs() < 1e-15);
        assert_eq!(r.r2, Some(0.0));
        assert_eq!(r.pearson, None);
        let r = regression_metrics(&[1.0, 1.0], &[0.0, 2.0]).unwrap();
        assert_eq!((r.pearson, r.r2, r.mse), (None, None, 1.0));
    }

    #[test]
    fn ppv_cases() {
        let r = ppv_at_npv(&[true, true, false, false], &[0.9, 0.8, 0.2, 0.1], 0.95).unwrap();
        assert_eq!((r.ppv, r.flagged), (1.0, false));
        // Calling only the top score positive keeps every called negative a
        // true negative and is the PPV-maximizing threshold.
        let r = ppv_at_npv(&[true, false, false, false], &[0.9, 0.8, 0.2, 0.1], 0.95).unwrap();
        assert_eq!((r.ppv, r.threshold, r.npv), (1.0, 0.9, Some(1.0)));
        // A positive ranked last makes every NPV below the floor.
        let r = ppv_at_npv(&[false, false, true, true], &[0.9, 0.8, 0.2, 0.1], 0.95).unwrap();
        assert!(r.flagged);
        let r = ppv_at_npv(&[true, false], &[0.5, 0.5], 0.95).unwrap();
        assert!(r.flagged);
    }

    fn brute_auc(y: &[bool], s: &[f64]) -> f64 {
        let (mut num, mut den) = (0.0, 0.0);
        for i in 0..y.len() {
            for j in 0..y.len() {
                if y[i] && !y[j] {
                    den += 1.0;
                    num += if s[i] > s[j] { 1.0 } else if s[i] == s[j] { 0.5 } else { 0.0 };
                }
            }
        }
        num / den
    }

    proptest! {
        #[test]
        fn auc_matches_pairs_and_reverses(
            data in prop::collection::vec((any::<bool>(), 0u8..8), 2..30)
        ) {
            let y: Vec<bool> = data.iter().map(|d| d.0).collect();
            prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
            let s: Vec<f64> = data.iter().map(|d| d.1 as f64).collect();
            let a = auc(&y, &s).unwrap();
            prop_assert!((a - brute_auc(&y, &s)).abs() < 1e-12);
            let neg: Vec<f64> = s.iter().map(|v| -v).collect();
            prop_assert!((a + auc(&y, &neg).unwrap() - 1.0).abs() < 1e-12);
            let mono: Vec<f64> = s.iter().map(|v| (v * 0.3).exp()).collect();
            prop_assert!((a - auc(&y, &mono).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn balanced_accuracy_relabel_invariant(
            pairs in prop::collection::vec((0usize..3, 0usize..3), 1..40)
        ) {
            let perm = [2usize, 0, 1];
            let (t, p): (Vec<_>, Vec<_>) = pairs.iter().cloned().unzip();
            let t2: Vec<usize> = t.iter().map(|&c| perm[c]).collect();
            let p2: Vec<usize> = p.iter().map(|&c| perm[c]).collect();
            let a = balanced_accuracy(&t, &p).unwrap();
            prop_assert!((a - balanced_accuracy(&t2, &p2).unwrap()).abs() < 1e-12);
        }

        #[test]
        fn ppv_threshold_meets_floor_when_possible(
            data in prop::collection::vec((any::<bool>(), 0u8..10), 2..30),
            npv_min in 0.5f64..0.99,
        ) {
            let y: Vec<bool> = data.iter().map(|d| d.0).collect();
            prop_assume!(y.iter().any(|&v| v) && y.iter().any(|&v| !v));
            let s: Vec<f64> = data.iter().map(|d| d.1 as f64).collect();
            let r = ppv_at_npv(&y, &s, npv_min).unwrap();
            prop_assert!(r.ppv <= 1.0);
            if !r.flagged {
                prop_assert!(r.npv.unwrap() >= npv_min);
            }
        }
    }
}
