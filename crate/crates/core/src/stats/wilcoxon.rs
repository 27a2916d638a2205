//! Two-sided Wilcoxon signed-rank test for paired samples.
//!
//! Zero differences are dropped, tied magnitudes share average ranks. Up to
//! [`EXACT_MAX_N`] pairs the null distribution of W⁺ is counted exactly over
//! all sign patterns (a subset-sum count on doubled ranks, which are integers
//! even with ties); beyond that a tie- and continuity-corrected normal
//! approximation is used.

use super::metrics::average_ranks;
use crate::error::{bail, Result};
use serde::{Deserialize, Serialize};

pub const EXACT_MAX_N: usize = 12;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct WilcoxonResult {
    /// Sum of ranks of positive differences.
    pub statistic: f64,
    pub p_value: f64,
    /// Pairs remaining after dropping zero differences.
    pub n: usize,
    pub exact: bool,
}

/// Average ranks of `|d|` for the nonzero differences `a − b`, with signs.
fn signed_ranks(a: &[f64], b: &[f64]) -> Result<(Vec<f64>, Vec<bool>)> {
    if a.len() != b.len() {
        bail!(Data, "paired samples differ in length ({} vs {})", a.len(), b.len());
    }
    if a.iter().chain(b).any(|v| !v.is_finite()) {
        bail!(Data, "non-finite value in paired samples");
    }
    let d: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).filter(|v| *v != 0.0).collect();
    if d.is_empty() {
        bail!(Analysis, "all paired differences are zero; the signed-rank test is undefined");
    }
    let mags: Vec<f64> = d.iter().map(|v| v.abs()).collect();
    Ok((average_ranks(&mags), d.iter().map(|v| *v > 0.0).collect()))
}

pub fn wilcoxon_signed_rank(a: &[f64], b: &[f64]) -> Result<WilcoxonResult> {
    let (ranks, positive) = signed_ranks(a, b)?;
    let n = ranks.len();
    let w: f64 = ranks.iter().zip(&positive).filter(|(_, p)| **p).map(|(r, _)| r).sum();
    let p_value = if n <= EXACT_MAX_N { exact_p(&ranks, w) } else { normal_p(&ranks, w) };
    Ok(WilcoxonResult { statistic: w, p_value, n, exact: n <= EXACT_MAX_N })
}

fn exact_p(ranks: &[f64], w: f64) -> f64 {
    let doubled: Vec<usize> = ranks.iter().map(|r| (2.0 * r).round() as usize).collect();
    let total: usize = doubled.iter().sum();
    // counts[s] = number of sign patterns whose doubled W⁺ equals s
    let mut counts = vec![0u64; total + 1];
    counts[0] = 1;
    for &r in &doubled {
        for s in (r..=total).rev() {
            counts[s] += counts[s - r];
        }
    }
    let target = (2.0 * w).round() as usize;
    let patterns = (1u64 << ranks.len()) as f64;
    let lower: u64 = counts[..=target].iter().sum();
    let upper: u64 = counts[target..].iter().sum();
    (2.0 * lower.min(upper) as f64 / patterns).min(1.0)
}

fn normal_p(ranks: &[f64], w: f64) -> f64 {
    let n = ranks.len() as f64;
    let mean = n * (n + 1.0) / 4.0;
    let mut sorted = ranks.to_vec();
    sorted.sort_by(f64::total_cmp);
    let mut tie_term = 0.0;
    let mut i = 0;
    while i < sorted.len() {
        let j = sorted[i..].iter().take_while(|r| **r == sorted[i]).count();
        let t = j as f64;
        tie_term += t * t * t - t;
        i += j;
    }
    let var = n * (n + 1.0) * (2.0 * n + 1.0) / 24.0 - tie_term / 48.0;
    if var <= 0.0 {
        return 1.0;
    }
    let z = ((w - mean).abs() - 0.5).max(0.0) / var.sqrt();
    libm::erfc(z / std::f64::consts::SQRT_2).min(1.0)
}

#[cfg(test)]
mod tests {
    use super::*;

    /// Direct walk over all 2ⁿ sign patterns.
    fn brute_force(a: &[f64], b: &[f64]) -> f64 {
        let (ranks, pos) = signed_ranks(a, b).unwrap();
        let w: f64 = ranks.iter().zip(&pos).filter(|(_, p)| **p).map(|(r, _)| r).sum();
        let n = ranks.len();
        let (mut le, mut ge) = (0usize, 0usize);
        for mask in 0..(1usize << n) {
            let s: f64 = (0..n).filter(|i| mask >> i & 1 == 1).map(|i| ranks[i]).sum();
            le += (s <= w + 1e-9) as usize;
            ge += (s >= w - 1e-9) as usize;
        }
        (2.0 * le.min(ge) as f64 / (1usize << n) as f64).min(1.0)
    }

    #[test]
    fn worked_examples() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, 3.0], &[0.0; 3]).unwrap();
        assert_eq!((r.statistic, r.p_value, r.exact), (6.0, 0.25, true));
        let r = wilcoxon_signed_rank(&[-1.0, 2.0], &[0.0, 0.0]).unwrap();
        assert_eq!((r.statistic, r.p_value), (2.0, 1.0));
        assert!(matches!(wilcoxon_signed_rank(&[1.0, 2.0], &[1.0, 2.0]), Err(crate::Error::Analysis(_))));
    }

    #[test]
    fn zeros_are_dropped_and_ties_share_ranks() {
        let r = wilcoxon_signed_rank(&[1.0, 2.0, -2.0, 5.0], &[1.0, 0.0, 0.0, 0.0]).unwrap();
        assert_eq!(r.n, 3);
        // |d| = 2, 2, 5 → ranks 1.5, 1.5, 3; positives 2 and 5
        assert_eq!(r.statistic, 4.5);
        assert!((r.p_value - brute_force(&[1.0, 2.0, -2.0, 5.0], &[1.0, 0.0, 0.0, 0.0])).abs() < 1e-12);
    }

    #[test]
    fn normal_branch_is_close_to_exact_at_the_boundary() {
        let a: Vec<f64> = (0..12).map(|i| (i as f64 * 1.7).sin() + 0.4).collect();
        let b = vec![0.0; 12];
        let (ranks, pos) = signed_ranks(&a, &b).unwrap();
        let w: f64 = ranks.iter().zip(&pos).filter(|(_, p)| **p).map(|(r, _)| r).sum();
        assert!((exact_p(&ranks, w) - normal_p(&ranks, w)).abs() < 0.03);
        let big: Vec<f64> = (0..40).map(|i| i as f64 + 1.0).collect();
        let r = wilcoxon_signed_rank(&big, &vec![0.0; 40]).unwrap();
        assert!(!r.exact && r.p_value < 1e-6);
    }

    proptest::proptest! {
        #[test]
        fn exact_p_matches_enumeration(d in proptest::collection::vec(-4i32..=4, 1..=10)) {
            let a: Vec<f64> = d.iter().map(|&v| v as f64 * 0.5).collect();
            let b = vec![0.0; a.len()];
            if a.iter().any(|v| *v != 0.0) {
                let r = wilcoxon_signed_rank(&a, &b).unwrap();
                proptest::prop_assert!((r.p_value - brute_force(&a, &b)).abs() < 1e-12);
            }
        }
    }
}
