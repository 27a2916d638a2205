//! Ridge regression on slide embeddings, used for continuous targets.
//!
//! Features are standardized and the target centred, so the intercept is the
//! target mean and is not penalized.

use crate::error::{bail, Result};
use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RidgeModel {
    pub weights: Vec<f64>,
    pub intercept: f64,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub alpha: f64,
}

impl RidgeModel {
    pub fn predict(&self, x: &[f64]) -> Result<f64> {
        if x.len() != self.weights.len() {
            bail!(Dimension, "ridge expects {} features, got {}", self.weights.len(), x.len());
        }
        Ok(self.intercept
            + x.iter()
                .zip(&self.mean)
                .zip(&self.scale)
                .zip(&self.weights)
                .map(|(((v, m), s), w)| w * (v - m) / s)
                .sum::<f64>())
    }
}

pub fn fit_ridge(features: &[Vec<f64>], targets: &[f64], alpha: f64) -> Result<RidgeModel> {
    let n = features.len();
    if n < 2 || targets.len() != n {
        bail!(Data, "ridge needs at least two rows with matching targets ({} rows, {} targets)", n, targets.len());
    }
    if !(alpha > 0.0) {
        bail!(Config, "ridge alpha must be positive, got {}", alpha);
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|r| r.len() != d) {
        bail!(Dimension, "ridge features must share one nonzero width");
    }
    if features.iter().flatten().chain(targets).any(|v| !v.is_finite()) {
        bail!(Data, "non-finite value in ridge inputs");
    }
    let nf = n as f64;
    let mean: Vec<f64> = (0..d).map(|j| features.iter().map(|r| r[j]).sum::<f64>() / nf).collect();
    let scale: Vec<f64> = (0..d)
        .map(|j| {
            let v = features.iter().map(|r| (r[j] - mean[j]).powi(2)).sum::<f64>() / nf;
            if v > 1e-24 {
                v.sqrt()
            } else {
                1.0
            }
        })
        .collect();
    let y_mean = targets.iter().sum::<f64>() / nf;
    let x = DMatrix::from_fn(n, d, |i, j| (features[i][j] - mean[j]) / scale[j]);
    let y = DVector::from_iterator(n, targets.iter().map(|t| t - y_mean));
    let gram = x.transpose() * &x + DMatrix::identity(d, d) * alpha;
    let Some(chol) = gram.cholesky() else {
        bail!(Numerical, "ridge normal equations are not positive definite");
    };
    let w = chol.solve(&(x.transpose() * y));
    Ok(RidgeModel { weights: w.iter().copied().collect(), intercept: y_mean, mean, scale, alpha })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn recovers_a_noiseless_linear_map_with_tiny_alpha() {
        let x: Vec<Vec<f64>> = (0..30).map(|i| vec![i as f64, ((i * 7) % 11) as f64]).collect();
        let y: Vec<f64> = x.iter().map(|r| 3.0 - 2.0 * r[0] + 0.5 * r[1]).collect();
        let m = fit_ridge(&x, &y, 1e-9).unwrap();
        for (r, t) in x.iter().zip(&y) {
            assert!((m.predict(r).unwrap() - t).abs() < 1e-6);
        }
    }

    #[test]
    fn large_alpha_shrinks_to_the_mean() {
        let x: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let y: Vec<f64> = (0..10).map(|i| i as f64).collect();
        let m = fit_ridge(&x, &y, 1e12).unwrap();
        assert!((m.predict(&[100.0]).unwrap() - 4.5).abs() < 1e-6);
        assert!(fit_ridge(&x, &y, 0.0).is_err());
    }
}
