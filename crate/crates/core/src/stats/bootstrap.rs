//! Percentile bootstrap over rows of a sample.
//!
//! Replicate `r` draws from its own ChaCha stream (`seed`, stream `r + 1`), so
//! replicates can be computed in any order and still reproduce a serial run.

use crate::error::{bail, Result};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_BOOTSTRAP: usize = 1000;
/// Redraws allowed per replicate when the metric is undefined on a resample.
pub const MAX_REDRAWS: usize = 100;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub point: f64,
    pub lower: f64,
    pub upper: f64,
    pub n_bootstrap: usize,
    pub seed: u64,
    /// Resamples thrown away because the metric was undefined on them.
    pub redraws: usize,
    /// Replicates that never produced a defined metric and were dropped.
    pub dropped: usize,
    pub point_outside_ci: bool,
}

/// Linear-interpolation percentile of sorted data, `q ∈ [0, 1]`.
pub fn percentile(sorted: &[f64], q: f64) -> f64 {
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

fn replicate_rng(seed: u64, r: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(r as u64 + 1);
    rng
}

/// `metric` returns `None` where it is undefined (e.g. a single-class resample).
pub fn bootstrap_ci<T: Clone>(
    data: &[T],
    metric: impl Fn(&[T]) -> Option<f64>,
    n_bootstrap: usize,
    seed: u64,
) -> Result<MetricReport> {
    if data.is_empty() {
        bail!(Data, "bootstrap needs a nonempty sample");
    }
    if n_bootstrap == 0 {
        bail!(Config, "n_bootstrap must be at least 1");
    }
    let Some(point) = metric(data) else {
        bail!(Analysis, "metric is undefined on the full sample");
    };
    let n = data.len();
    let mut values = Vec::with_capacity(n_bootstrap);
    let mut redraws = 0;
    let mut dropped = 0;
    let mut buf: Vec<T> = Vec::with_capacity(n);
    for r in 0..n_bootstrap {
        let mut rng = replicate_rng(seed, r);
        let mut got = None;
        for _ in 0..=MAX_REDRAWS {
            buf.clear();
            buf.extend((0..n).map(|_| data[rng.random_range(0..n)].clone()));
            if let Some(v) = metric(&buf) {
                got = Some(v);
                break;
            }
            redraws += 1;
        }
        match got {
            Some(v) if v.is_finite() => values.push(v),
            Some(_) => bail!(Analysis, "metric returned a non-finite value on replicate {}", r),
            None => dropped += 1,
        }
    }
    if values.is_empty() {
        bail!(Analysis, "metric undefined on every bootstrap resample");
    }
    values.sort_by(f64::total_cmp);
    let lower = percentile(&values, 0.025);
    let upper = percentile(&values, 0.975);
    Ok(MetricReport {
        point,
        lower,
        upper,
        n_bootstrap,
        seed,
        redraws,
        dropped,
        point_outside_ci: point < lower || point > upper,
    })
}

/// All `n^n` ordered resamples of a tiny sample, each with probability `n^-n`.
pub fn exhaustive_resamples<T: Clone>(data: &[T]) -> Result<Vec<Vec<T>>> {
    let n = data.len();
    if n == 0 || n > 7 {
        bail!(Contract, "exhaustive resampling is limited to 1..=7 rows, got {}", n);
    }
    let total = n.pow(n as u32);
    Ok((0..total)
        .map(|mut code| {
            (0..n)
                .map(|_| {
                    let i = code % n;
                    code /= n;
                    data[i].clone()
                })
                .collect()
        })
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::auc;

    fn mean(x: &[f64]) -> Option<f64> {
        Some(x.iter().sum::<f64>() / x.len() as f64)
    }

    #[test]
    fn constant_metric_has_degenerate_interval() {
        let r = bootstrap_ci(&[1.0, 5.0, 9.0], |_| Some(0.7), 200, 3).unwrap();
        assert_eq!((r.lower, r.point, r.upper), (0.7, 0.7, 0.7));
        assert!(!r.point_outside_ci);
    }

    #[test]
    fn tiny_sample_matches_exhaustive_enumeration() {
        let data = [1.0, 2.0, 3.0];
        let exact: Vec<f64> = exhaustive_resamples(&data).unwrap().iter().map(|s| mean(s).unwrap()).collect();
        assert_eq!(exact.len(), 27);
        let mut sorted = exact.clone();
        sorted.sort_by(f64::total_cmp);
        // P(mean = 1) = P(mean = 3) = 1/27 > 2.5 %, so the exact interval is [1, 3].
        let quantile = |q: f64| sorted[((q * 27.0).ceil() as usize).max(1) - 1];
        assert_eq!((quantile(0.025), quantile(0.975)), (1.0, 3.0));

        let r = bootstrap_ci(&data, mean, 20_000, 7).unwrap();
        assert!(r.lower < 2.0 && r.upper > 2.0);
        assert_eq!((r.lower, r.upper), (1.0, 3.0));
        let mut boot = Vec::new();
        for k in 0..20_000 {
            let mut rng = replicate_rng(7, k);
            let s: Vec<f64> = (0..3).map(|_| data[rng.random_range(0..3)]).collect();
            boot.push(mean(&s).unwrap());
        }
        for level in [1.0, 4.0 / 3.0, 5.0 / 3.0, 2.0, 7.0 / 3.0, 8.0 / 3.0, 3.0] {
            let p_exact = exact.iter().filter(|&&m| (m - level).abs() < 1e-12).count() as f64 / 27.0;
            let p_boot = boot.iter().filter(|&&m| (m - level).abs() < 1e-12).count() as f64 / 20_000.0;
            assert!((p_exact - p_boot).abs() < 0.01, "{level}: {p_exact} vs {p_boot}");
        }
    }

    #[test]
    fn deterministic_and_redraws_single_class_resamples() {
        let rows: Vec<(bool, f64)> = vec![(true, 0.9), (false, 0.1), (false, 0.3), (true, 0.4), (false, 0.5)];
        let metric = |s: &[(bool, f64)]| {
            let (y, sc): (Vec<bool>, Vec<f64>) = s.iter().cloned().unzip();
            auc(&y, &sc).ok()
        };
        let a = bootstrap_ci(&rows, metric, 300, 11).unwrap();
        let b = bootstrap_ci(&rows, metric, 300, 11).unwrap();
        assert_eq!(a, b);
        assert!(a.redraws > 0);
        assert_eq!(a.dropped, 0);
        assert!(a.lower <= a.upper);
    }

    #[test]
    fn undefined_everywhere_is_an_analysis_error() {
        assert!(bootstrap_ci(&[1.0, 2.0], |_| None, 10, 0).is_err());
        assert!(bootstrap_ci::<f64>(&[], mean, 10, 0).is_err());
    }
}
