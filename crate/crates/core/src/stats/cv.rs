//! Stratified k-fold linear probing with k-model probability averaging for
//! external sets.

use super::metrics::{auc, balanced_accuracy};
use super::probe::{fit_linear_probe, ProbeModel, ProbeOptions};
use crate::error::{bail, Result};
use crate::trainer::argmax;
use rand::seq::SliceRandom;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

pub const DEFAULT_FOLDS: usize = 5;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FoldMetrics {
    pub fold: usize,
    pub n_train: usize,
    pub n_test: usize,
    pub balanced_accuracy: f64,
    /// Binary tasks only.
    pub auc: Option<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CvReport {
    pub k: usize,
    pub seed: u64,
    pub folds: Vec<FoldMetrics>,
    pub fold_of: Vec<usize>,
    /// Held-out class probabilities for every sample.
    pub out_of_fold: Vec<Vec<f64>>,
    pub models: Vec<ProbeModel>,
}

impl CvReport {
    pub fn mean_balanced_accuracy(&self) -> f64 {
        self.folds.iter().map(|f| f.balanced_accuracy).sum::<f64>() / self.folds.len() as f64
    }

    /// Average of the k probes' class probabilities.
    pub fn ensemble_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        let mut acc: Vec<f64> = Vec::new();
        for m in &self.models {
            let p = m.predict_proba(x)?;
            if acc.is_empty() {
                acc = vec![0.0; p.len()];
            }
            acc.iter_mut().zip(&p).for_each(|(a, v)| *a += v / self.models.len() as f64);
        }
        Ok(acc)
    }
}

/// Fold index per sample: each class is shuffled and dealt round-robin,
/// continuing where the previous class stopped so fold sizes stay balanced.
pub fn stratified_folds(labels: &[usize], k: usize, seed: u64) -> Result<Vec<usize>> {
    if k < 2 {
        bail!(Config, "k must be at least 2, got {}", k);
    }
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut fold_of = vec![0; labels.len()];
    let mut next = 0;
    for c in 0..n_classes {
        let mut idx: Vec<usize> = (0..labels.len()).filter(|&i| labels[i] == c).collect();
        if idx.is_empty() {
            continue;
        }
        if idx.len() < k {
            bail!(
                Data,
                "class {} has {} members, fewer than k = {} folds; lower k or merge rare classes",
                c,
                idx.len(),
                k
            );
        }
        idx.shuffle(&mut rng);
        for i in idx {
            fold_of[i] = next % k;
            next += 1;
        }
    }
    Ok(fold_of)
}

pub fn cross_validate(
    features: &[Vec<f64>],
    labels: &[usize],
    k: usize,
    seed: u64,
    options: &ProbeOptions,
) -> Result<CvReport> {
    if features.len() != labels.len() {
        bail!(Data, "{} feature rows for {} labels", features.len(), labels.len());
    }
    let fold_of = stratified_folds(labels, k, seed)?;
    let n_classes = labels.iter().max().map_or(0, |m| m + 1);
    let mut out_of_fold = vec![Vec::new(); labels.len()];
    let mut folds = Vec::with_capacity(k);
    let mut models = Vec::with_capacity(k);
    for fold in 0..k {
        let (train, test): (Vec<usize>, Vec<usize>) = (0..labels.len()).partition(|&i| fold_of[i] != fold);
        let xt: Vec<Vec<f64>> = train.iter().map(|&i| features[i].clone()).collect();
        let yt: Vec<usize> = train.iter().map(|&i| labels[i]).collect();
        let model = fit_linear_probe(&xt, &yt, options, seed)?;
        let mut y_true = Vec::with_capacity(test.len());
        let mut y_pred = Vec::with_capacity(test.len());
        for &i in &test {
            let mut p = model.predict_proba(&features[i])?;
            p.resize(n_classes, 0.0);
            y_pred.push(argmax(&p));
            y_true.push(labels[i]);
            out_of_fold[i] = p;
        }
        let auc = if n_classes == 2 {
            let y: Vec<bool> = y_true.iter().map(|&l| l == 1).collect();
            let s: Vec<f64> = test.iter().map(|&i| out_of_fold[i][1]).collect();
            auc(&y, &s).ok()
        } else {
            None
        };
        folds.push(FoldMetrics {
            fold,
            n_train: train.len(),
            n_test: test.len(),
            balanced_accuracy: balanced_accuracy(&y_true, &y_pred)?,
            auc,
        });
        models.push(model);
    }
    Ok(CvReport { k, seed, folds, fold_of, out_of_fold, models })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn toy() -> (Vec<Vec<f64>>, Vec<usize>) {
        let x: Vec<Vec<f64>> = (0..40).map(|i| vec![(i % 2) as f64 * 4.0 + (i as f64 * 0.37).sin(), i as f64 * 0.01]).collect();
        let y = (0..40).map(|i| i % 2).collect();
        (x, y)
    }

    #[test]
    fn predictable_labels_give_perfect_folds() {
        let (x, y) = toy();
        let r = cross_validate(&x, &y, DEFAULT_FOLDS, 1, &ProbeOptions::default()).unwrap();
        assert!(r.folds.iter().all(|f| f.balanced_accuracy == 1.0 && f.auc == Some(1.0)));
        let p = r.ensemble_proba(&[4.0, 0.2]).unwrap();
        assert!(p[1] > 0.9 && (p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
    }

    #[test]
    fn folds_are_stratified_and_deterministic() {
        let labels: Vec<usize> = (0..23).map(|i| (i % 3 == 0) as usize).collect();
        let f = stratified_folds(&labels, 4, 9).unwrap();
        assert_eq!(f, stratified_folds(&labels, 4, 9).unwrap());
        for fold in 0..4 {
            let size = f.iter().filter(|&&v| v == fold).count();
            assert!((5..=6).contains(&size));
            assert!(labels.iter().zip(&f).any(|(&l, &v)| v == fold && l == 1));
        }
        let (x, y) = toy();
        let a = cross_validate(&x, &y, 5, 3, &ProbeOptions::default()).unwrap();
        let b = cross_validate(&x, &y, 5, 3, &ProbeOptions::default()).unwrap();
        assert_eq!(a, b);
    }

    #[test]
    fn rare_class_is_a_split_error() {
        let labels = vec![0, 0, 0, 0, 0, 1, 1];
        let err = stratified_folds(&labels, 5, 0).unwrap_err().to_string();
        assert!(err.contains("lower k"), "{err}");
        assert!(stratified_folds(&labels, 1, 0).is_err());
    }
}
