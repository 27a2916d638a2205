//! Parameter containers generic over their leaf type.
//!
//! The same struct holds values (`T = Tensor`) or tape handles (`T = Var`);
//! `map` walks the leaves in a fixed order with stable slash-separated names,
//! which is the order used for optimizer state and checkpoints.

use crate::error::{bail, Result};
use crate::tensor::{Gradients, Tape, Tensor, Var};
use rand::Rng;
use rand_distr::StandardNormal;

/// Weight std for freshly initialized projections.
pub const INIT_STD: f64 = 0.02;

/// Normal(0, std²) truncated to ±2 std by rejection.
pub fn trunc_normal<R: Rng + ?Sized>(rng: &mut R, shape: Vec<usize>, std: f64) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let z: f64 = rng.sample(StandardNormal);
            if z.abs() <= 2.0 {
                break z * std;
            }
        })
        .collect();
    Tensor::from_parts(shape, data)
}

/// Affine map `x·w + b` with `w: in×out`.
#[derive(Clone, Debug, PartialEq)]
pub struct Linear<T> {
    pub w: T,
    pub b: T,
}

impl<T> Linear<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T) -> U) -> Linear<U> {
        Linear {
            w: f(format!("{prefix}/w"), &self.w),
            b: f(format!("{prefix}/b"), &self.b),
        }
    }
}

impl Linear<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, fan_in: usize, fan_out: usize) -> Self {
        Self {
            w: trunc_normal(rng, vec![fan_in, fan_out], INIT_STD),
            b: Tensor::zeros(vec![fan_out]),
        }
    }
}

impl Linear<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = tape.matmul(x, self.w)?;
        tape.add_row(h, self.b)
    }
}

/// Two-layer perceptron with a GELU between the layers.
#[derive(Clone, Debug, PartialEq)]
pub struct Mlp<T> {
    pub hidden: Linear<T>,
    pub out: Linear<T>,
}

impl<T> Mlp<T> {
    pub fn map<'a, U>(&'a self, prefix: &str, f: &mut dyn FnMut(String, &'a T) -> U) -> Mlp<U> {
        Mlp {
            hidden: self.hidden.map(&format!("{prefix}/hidden"), f),
            out: self.out.map(&format!("{prefix}/out"), f),
        }
    }
}

impl Mlp<Tensor> {
    pub fn init<R: Rng + ?Sized>(rng: &mut R, input: usize, hidden: usize, output: usize) -> Self {
        Self {
            hidden: Linear::init(rng, input, hidden),
            out: Linear::init(rng, hidden, output),
        }
    }
}

impl Mlp<Var> {
    pub fn forward(&self, tape: &mut Tape, x: Var) -> Result<Var> {
        let h = self.hidden.forward(tape, x)?;
        let h = tape.gelu(h)?;
        self.out.forward(tape, h)
    }
}

/// Operations shared by every value-level parameter tree.
pub trait ParamTree: Clone {
    type Bound;

    fn named(&self) -> Vec<(String, &Tensor)>;

    /// Rebuilds the tree from flat tensors in [`named`](Self::named) order.
    fn with_tensors(&self, tensors: Vec<Tensor>) -> Result<Self>;

    /// Records every leaf on `tape`.
    fn bind(&self, tape: &mut Tape, requires_grad: bool) -> Self::Bound;

    /// Gradients for every leaf of `bound`, in [`named`](Self::named) order.
    fn grads_of(bound: &Self::Bound, grads: &Gradients) -> Vec<Tensor>;

    fn tensors(&self) -> Vec<&Tensor> {
        self.named().into_iter().map(|(_, t)| t).collect()
    }

    fn numel(&self) -> usize {
        self.tensors().iter().map(|t| t.numel()).sum()
    }

    /// Fails unless both trees have the same names and shapes.
    fn check_same_structure(&self, other: &Self) -> Result<()> {
        let a = self.named();
        let b = other.named();
        if a.len() != b.len() {
            bail!(Contract, "parameter sets have {} and {} tensors", a.len(), b.len());
        }
        for ((na, ta), (nb, tb)) in a.iter().zip(&b) {
            if na != nb || ta.shape() != tb.shape() {
                bail!(
                    Contract,
                    "parameter mismatch: {} {:?} vs {} {:?}",
                    na,
                    ta.shape(),
                    nb,
                    tb.shape()
                );
            }
        }
        Ok(())
    }
}

/// Shared implementation of [`ParamTree::with_tensors`] for trees exposing `map`.
pub(crate) fn rebuild<'a, T, Out>(
    template: &'a T,
    tensors: Vec<Tensor>,
    map: impl FnOnce(&'a T, &mut dyn FnMut(String, &'a Tensor) -> Tensor) -> Out,
    expected: &[(String, &Tensor)],
) -> Result<Out> {
    if tensors.len() != expected.len() {
        bail!(Contract, "expected {} tensors, got {}", expected.len(), tensors.len());
    }
    for ((name, t), new) in expected.iter().zip(&tensors) {
        if t.shape() != new.shape() {
            bail!(
                Contract,
                "tensor {} has shape {:?}, expected {:?}",
                name,
                new.shape(),
                t.shape()
            );
        }
    }
    let mut it = tensors.into_iter();
    Ok(map(template, &mut |_, _| it.next().expect("length checked")))
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    #[test]
    fn trunc_normal_respects_bounds() {
        let mut rng = ChaCha8Rng::seed_from_u64(1);
        let t = trunc_normal(&mut rng, vec![100, 50], INIT_STD);
        assert!(t.data().iter().all(|v| v.abs() <= 2.0 * INIT_STD));
        let mean = t.data().iter().sum::<f64>() / t.numel() as f64;
        let sd = (t.data().iter().map(|v| (v - mean).powi(2)).sum::<f64>() / t.numel() as f64).sqrt();
        assert!(mean.abs() < 1e-3);
        assert!((sd - 0.88 * INIT_STD).abs() < 2e-3, "sd = {sd}");
    }

    #[test]
    fn mlp_names_are_stable() {
        let mut rng = ChaCha8Rng::seed_from_u64(2);
        let mlp = Mlp::init(&mut rng, 3, 4, 2);
        let mut names = Vec::new();
        mlp.map("proj", &mut |n, _| names.push(n));
        assert_eq!(
            names,
            ["proj/hidden/w", "proj/hidden/b", "proj/out/w", "proj/out/b"]
        );
    }
}
