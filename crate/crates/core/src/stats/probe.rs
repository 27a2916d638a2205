//! Multinomial logistic-regression probe on frozen features.
//!
//! Features are standardized with the training-set mean and standard
//! deviation, then `mean CE + (l2/2)·‖W‖²` (bias unpenalized) is minimized by
//! full-batch gradient descent with Armijo backtracking, starting from zero.

use crate::error::{bail, Result};
use crate::tensor::{log_sum_exp, softmax};
use serde::{Deserialize, Serialize};

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeOptions {
    /// `None` means `1/n`.
    pub l2: Option<f64>,
    pub max_iter: usize,
    pub tol: f64,
}

impl Default for ProbeOptions {
    fn default() -> Self {
        Self {
            l2: None,
            max_iter: 2000,
            tol: 1e-6,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel {
    /// `n_classes × dim`, on standardized features.
    pub weights: Vec<Vec<f64>>,
    pub bias: Vec<f64>,
    pub mean: Vec<f64>,
    pub scale: Vec<f64>,
    pub l2: f64,
    pub iterations: usize,
    pub converged: bool,
    pub grad_norm: f64,
    pub seed: u64,
}

impl ProbeModel {
    pub fn n_classes(&self) -> usize {
        self.bias.len()
    }

    fn logits(&self, x: &[f64]) -> Vec<f64> {
        let z: Vec<f64> = x.iter().zip(&self.mean).zip(&self.scale).map(|((v, m), s)| (v - m) / s).collect();
        self.weights
            .iter()
            .zip(&self.bias)
            .map(|(w, b)| b + w.iter().zip(&z).map(|(a, c)| a * c).sum::<f64>())
            .collect()
    }

    pub fn predict_proba(&self, x: &[f64]) -> Result<Vec<f64>> {
        if x.len() != self.mean.len() {
            bail!(Dimension, "probe expects {} features, got {}", self.mean.len(), x.len());
        }
        softmax(&self.logits(x))
    }

    pub fn predict(&self, x: &[f64]) -> Result<usize> {
        let p = self.predict_proba(x)?;
        Ok(crate::trainer::argmax(&p))
    }
}

struct Problem<'a> {
    z: Vec<f64>,
    n: usize,
    d: usize,
    c: usize,
    labels: &'a [usize],
    l2: f64,
}

impl Problem<'_> {
    /// Loss and, when requested, its gradient in `[W (c×d) | b (c)]` layout.
    fn eval(&self, theta: &[f64], want_grad: bool) -> (f64, Vec<f64>) {
        let (n, d, c) = (self.n, self.d, self.c);
        let (w, b) = theta.split_at(c * d);
        let mut grad = if want_grad { vec![0.0; theta.len()] } else { Vec::new() };
        let mut loss = 0.0;
        let mut logits = vec![0.0; c];
        for i in 0..n {
            let x = &self.z[i * d..(i + 1) * d];
            for k in 0..c {
                logits[k] = b[k] + w[k * d..(k + 1) * d].iter().zip(x).map(|(a, v)| a * v).sum::<f64>();
            }
            let lse = log_sum_exp(&logits);
            loss += lse - logits[self.labels[i]];
            if want_grad {
                for k in 0..c {
                    let r = (logits[k] - lse).exp() - (k == self.labels[i]) as u8 as f64;
                    for (g, v) in grad[k * d..(k + 1) * d].iter_mut().zip(x) {
                        *g += r * v;
                    }
                    grad[c * d + k] += r;
                }
            }
        }
        let nf = n as f64;
        let reg: f64 = w.iter().map(|v| v * v).sum::<f64>() * 0.5 * self.l2;
        if want_grad {
            for g in grad.iter_mut() {
                *g /= nf;
            }
            for (g, v) in grad[..c * d].iter_mut().zip(w) {
                *g += self.l2 * v;
            }
        }
        (loss / nf + reg, grad)
    }
}

fn standardize(features: &[Vec<f64>]) -> (Vec<f64>, Vec<f64>) {
    let n = features.len() as f64;
    let d = features[0].len();
    let mut mean = vec![0.0; d];
    for x in features {
        for (m, v) in mean.iter_mut().zip(x) {
            *m += v / n;
        }
    }
    let mut scale = vec![0.0; d];
    for x in features {
        for ((s, v), m) in scale.iter_mut().zip(x).zip(&mean) {
            *s += (v - m).powi(2) / n;
        }
    }
    for s in scale.iter_mut() {
        *s = if *s > 1e-24 { s.sqrt() } else { 1.0 };
    }
    (mean, scale)
}

pub fn fit_linear_probe(features: &[Vec<f64>], labels: &[usize], options: &ProbeOptions, seed: u64) -> Result<ProbeModel> {
    let n = features.len();
    if n == 0 || labels.len() != n {
        bail!(Data, "probe needs matching nonempty features ({}) and labels ({})", n, labels.len());
    }
    let d = features[0].len();
    if d == 0 || features.iter().any(|x| x.len() != d) {
        bail!(Dimension, "probe features must share one nonzero width");
    }
    if features.iter().flatten().any(|v| !v.is_finite()) {
        bail!(Data, "non-finite probe feature");
    }
    let c = labels.iter().max().copied().unwrap_or(0) + 1;
    let mut present = vec![false; c];
    labels.iter().for_each(|&l| present[l] = true);
    if present.iter().filter(|&&p| p).count() < 2 {
        bail!(Data, "probe labels contain a single class");
    }
    if n < c {
        bail!(Data, "probe needs at least as many samples ({}) as classes ({})", n, c);
    }
    let l2 = options.l2.unwrap_or(1.0 / n as f64);
    if !(l2 >= 0.0) {
        bail!(Config, "l2 must be nonnegative");
    }
    let (mean, scale) = standardize(features);
    let mut z = Vec::with_capacity(n * d);
    for x in features {
        z.extend(x.iter().zip(&mean).zip(&scale).map(|((v, m), s)| (v - m) / s));
    }
    let problem = Problem { z, n, d, c, labels, l2 };

    let mut theta = vec![0.0; c * d + c];
    let (mut loss, mut grad) = problem.eval(&theta, true);
    let mut step = 1.0;
    let mut iterations = 0;
    let mut grad_norm = norm(&grad);
    while iterations < options.max_iter && grad_norm >= options.tol {
        let g2 = grad_norm * grad_norm;
        step *= 2.0;
        let mut accepted = false;
        for _ in 0..60 {
            let trial: Vec<f64> = theta.iter().zip(&grad).map(|(t, g)| t - step * g).collect();
            let (trial_loss, _) = problem.eval(&trial, false);
            if trial_loss <= loss - 0.5 * step * g2 {
                theta = trial;
                accepted = true;
                break;
            }
            step *= 0.5;
        }
        iterations += 1;
        if !accepted {
            break;
        }
        let (l, g) = problem.eval(&theta, true);
        loss = l;
        grad = g;
        grad_norm = norm(&grad);
    }
    let (w, b) = theta.split_at(c * d);
    Ok(ProbeModel {
        weights: w.chunks(d).map(|r| r.to_vec()).collect(),
        bias: b.to_vec(),
        mean,
        scale,
        l2,
        iterations,
        converged: grad_norm < options.tol,
        grad_norm,
        seed,
    })
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::balanced_accuracy;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn separable_toy_set_is_fit_exactly() {
        let x: Vec<Vec<f64>> = (0..20).map(|i| vec![i as f64, (i % 3) as f64]).collect();
        let y: Vec<usize> = (0..20).map(|i| (i >= 10) as usize).collect();
        let p = fit_linear_probe(&x, &y, &ProbeOptions::default(), 0).unwrap();
        let pred: Vec<usize> = x.iter().map(|v| p.predict(v).unwrap()).collect();
        assert_eq!(balanced_accuracy(&y, &pred).unwrap(), 1.0);
    }

    #[test]
    fn null_signal_is_near_chance() {
        let mut rng = ChaCha8Rng::seed_from_u64(9);
        let mut draw = |n: usize| -> (Vec<Vec<f64>>, Vec<usize>) {
            let x = (0..n).map(|_| (0..5).map(|_| rng.random::<f64>()).collect()).collect();
            let y = (0..n).map(|i| i % 2).collect();
            (x, y)
        };
        let (xt, yt) = draw(200);
        let (xe, ye) = draw(400);
        let p = fit_linear_probe(&xt, &yt, &ProbeOptions::default(), 0).unwrap();
        let pred: Vec<usize> = xe.iter().map(|v| p.predict(v).unwrap()).collect();
        let ba = balanced_accuracy(&ye, &pred).unwrap();
        assert!((ba - 0.5).abs() < 0.1, "{ba}");
    }

    #[test]
    fn duplication_leaves_weights_unchanged() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let x: Vec<Vec<f64>> = (0..30).map(|_| (0..3).map(|_| rng.random_range(-1.0..1.0)).collect()).collect();
        let y: Vec<usize> = x.iter().map(|v| (v[0] + 0.3 * rng.random::<f64>() > 0.2) as usize + (v[1] > 0.5) as usize).collect();
        let opts = ProbeOptions {
            l2: Some(0.01),
            ..ProbeOptions::default()
        };
        let a = fit_linear_probe(&x, &y, &opts, 0).unwrap();
        let x2: Vec<Vec<f64>> = x.iter().chain(&x).cloned().collect();
        let y2: Vec<usize> = y.iter().chain(&y).cloned().collect();
        let b = fit_linear_probe(&x2, &y2, &opts, 0).unwrap();
        for (ra, rb) in a.weights.iter().zip(&b.weights) {
            for (u, v) in ra.iter().zip(rb) {
                assert!((u - v).abs() < 1e-8, "{u} vs {v}");
            }
        }
        assert!(a.converged && b.converged);
    }

    #[test]
    fn single_class_is_rejected() {
        let x = vec![vec![1.0], vec![2.0]];
        assert!(fit_linear_probe(&x, &[1, 1], &ProbeOptions::default(), 0).is_err());
    }
}
