use super::{Tape, Tensor, Var};
use crate::error::{bail, Result};

/// Compares reverse-mode gradients of a scalar function against central
/// differences and returns the worst `|analytic - numeric| / max(1, |numeric|)`.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, Var) -> Result<Var>,
{
    finite_diff_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`finite_diff_check`] over several inputs at once; every coordinate of
/// every input is perturbed.
pub fn finite_diff_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    finite_diff_check_tampered(f, xs, eps, &|_, _| {})
}

/// [`finite_diff_check_many`] with `tamper(input_index, gradient)` applied to
/// each analytic gradient before comparison. Exists so negative controls can
/// confirm the checker notices a wrong gradient.
pub fn finite_diff_check_tampered<F>(f: F, xs: &[Tensor], eps: f64, tamper: &dyn Fn(usize, &mut [f64])) -> Result<f64>
where
    F: Fn(&mut Tape, &[Var]) -> Result<Var>,
{
    if !(eps > 0.0 && eps <= 1e-2) {
        bail!(Contract, "finite-difference eps must lie in (0, 1e-2], got {}", eps);
    }
    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|t| tape.constant(t.clone())).collect();
        let out = f(&mut tape, &vars)?;
        scalar_of(&tape, out)
    };

    let mut tape = Tape::new();
    let vars: Vec<Var> = xs.iter().map(|t| tape.param(t.clone())).collect();
    let out = f(&mut tape, &vars)?;
    scalar_of(&tape, out)?;
    let grads = tape.backward(out)?;

    let mut worst = 0.0f64;
    let mut probe: Vec<Tensor> = xs.to_vec();
    for (k, v) in vars.iter().enumerate() {
        let mut analytic = grads.tensor(*v).into_data();
        tamper(k, &mut analytic);
        for i in 0..xs[k].numel() {
            let orig = xs[k].data()[i];
            probe[k].data_mut()[i] = orig + eps;
            let up = eval(&probe)?;
            probe[k].data_mut()[i] = orig - eps;
            let down = eval(&probe)?;
            probe[k].data_mut()[i] = orig;
            let numeric = (up - down) / (2.0 * eps);
            let err = (analytic[i] - numeric).abs() / numeric.abs().max(1.0);
            worst = worst.max(err);
        }
    }
    Ok(worst)
}

fn scalar_of(tape: &Tape, v: Var) -> Result<f64> {
    let t = tape.value(v);
    if t.numel() != 1 {
        bail!(Contract, "finite-difference target must be scalar, got shape {:?}", t.shape());
    }
    Ok(t.data()[0])
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::error::Error;

    #[test]
    fn sum_of_squares_is_exact() {
        let x = Tensor::matrix(2, 3, vec![0.5, -1.5, 2.0, 3.0, -0.25, 1.0]).unwrap();
        let err = finite_diff_check(
            |t, x| {
                let sq = t.hadamard(x, x)?;
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-9, "err = {err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        let err = finite_diff_check(
            |t, _| {
                let c = t.constant(Tensor::scalar(7.0)?);
                Ok(c)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn non_scalar_and_bad_eps_are_contract_errors() {
        let x = Tensor::vector(vec![1.0, 2.0]).unwrap();
        assert!(matches!(
            finite_diff_check(|t, x| t.tanh(x), &x, 1e-5),
            Err(Error::Contract(_))
        ));
        assert!(matches!(
            finite_diff_check(|t, x| t.sum(x), &x, 0.5),
            Err(Error::Contract(_))
        ));
    }
}
