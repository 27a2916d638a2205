use super::Tensor;
use crate::error::{bail, Result};

/// Precomputed linear-interpolation weights mapping `src` features onto `dst`.
///
/// Uses the align-corners convention: output `j` samples source coordinate
/// `j * (src - 1) / (dst - 1)`, so both endpoints map to endpoints and
/// `src == dst` is the identity. A single-feature source is broadcast, and a
/// single-feature target samples coordinate 0.
#[derive(Clone, Debug, PartialEq)]
pub struct ResizePlan {
    src: usize,
    taps: Vec<(usize, usize, f64)>,
}

impl ResizePlan {
    pub fn new(src: usize, dst: usize) -> Result<Self> {
        if src == 0 || dst == 0 {
            bail!(Dimension, "resize from {} to {} features", src, dst);
        }
        let taps = (0..dst)
            .map(|j| {
                if src == dst {
                    (j, j, 0.0)
                } else if src == 1 || dst == 1 {
                    (0, 0, 0.0)
                } else {
                    let t = (j * (src - 1)) as f64 / (dst - 1) as f64;
                    let lo = (t.floor() as usize).min(src - 1);
                    let hi = (lo + 1).min(src - 1);
                    (lo, hi, t - lo as f64)
                }
            })
            .collect();
        Ok(Self { src, taps })
    }

    pub fn src(&self) -> usize {
        self.src
    }

    pub fn dst(&self) -> usize {
        self.taps.len()
    }

    pub fn is_identity(&self) -> bool {
        self.src == self.taps.len()
    }

    pub(crate) fn apply_row(&self, row: &[f64], out: &mut [f64]) {
        for (o, &(lo, hi, w)) in out.iter_mut().zip(&self.taps) {
            *o = if w == 0.0 {
                row[lo]
            } else {
                (1.0 - w) * row[lo] + w * row[hi]
            };
        }
    }

    /// Adjoint of [`apply_row`](Self::apply_row): scatters output gradients back.
    pub(crate) fn adjoint_row(&self, grad_out: &[f64], grad_in: &mut [f64]) {
        for (&g, &(lo, hi, w)) in grad_out.iter().zip(&self.taps) {
            if w == 0.0 {
                grad_in[lo] += g;
            } else {
                grad_in[lo] += (1.0 - w) * g;
                grad_in[hi] += w * g;
            }
        }
    }
}

/// Resizes every row of an `N×D` tensor to `target_dim` features.
pub fn resize_linear(x: &Tensor, target_dim: usize) -> Result<Tensor> {
    let (n, d) = x.dims2()?;
    let plan = ResizePlan::new(d, target_dim)?;
    let mut out = vec![0.0; n * target_dim];
    for r in 0..n {
        plan.apply_row(x.row(r), &mut out[r * target_dim..(r + 1) * target_dim]);
    }
    Ok(Tensor::from_parts(vec![n, target_dim], out))
}
