//! Central-difference gradient verification.

use super::{Tape, Tensor, Var};
use crate::{Error, Result};

/// Scaled error between an analytic and a numeric derivative.
pub fn relative_error(analytic: f64, numeric: f64) -> f64 {
    (analytic - numeric).abs() / numeric.abs().max(1.0)
}

/// Compares the tape gradient of scalar-valued `f` at `x` against central
/// differences with step `eps`, returning the maximum relative error over
/// all coordinates.
pub fn grad_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Var,
{
    grad_check_many(|tape, vars| f(tape, vars[0]), std::slice::from_ref(x), eps)
}

/// [`grad_check`] over several inputs at once.
pub fn grad_check_many<F>(f: F, xs: &[Tensor], eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, &[Var]) -> Var,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return Err(Error::range(format!("grad_check eps {eps} outside [1e-7, 1e-3]")));
    }

    let analytic: Vec<Tensor> = {
        let mut tape = Tape::new();
        let vars: Vec<Var> = xs.iter().map(|x| tape.leaf_ref(x)).collect();
        let out = f(&mut tape, &vars);
        let value = tape.value(out);
        if value.len() != 1 {
            return Err(Error::shape("grad_check needs a scalar-valued function"));
        }
        value.check_finite()?;
        let mut grads = tape.backward(out);
        vars.iter()
            .zip(xs)
            .map(|(v, x)| grads.take(*v).unwrap_or_else(|| Tensor::zeros(x.shape())))
            .collect()
    };

    let eval = |inputs: &[Tensor]| -> Result<f64> {
        let mut tape = Tape::new();
        let vars: Vec<Var> = inputs.iter().map(|x| tape.constant_ref(x)).collect();
        let out = f(&mut tape, &vars);
        let v = tape.value(out).data()[0];
        if v.is_finite() {
            Ok(v)
        } else {
            Err(Error::range("function non-finite at a perturbed point"))
        }
    };

    let mut inputs = xs.to_vec();
    let mut worst = 0.0f64;
    for k in 0..xs.len() {
        for i in 0..xs[k].len() {
            let orig = xs[k].data()[i];
            inputs[k].data_mut()[i] = orig + eps;
            let plus = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig - eps;
            let minus = eval(&inputs)?;
            inputs[k].data_mut()[i] = orig;
            let numeric = (plus - minus) / (2.0 * eps);
            worst = worst.max(relative_error(analytic[k].data()[i], numeric));
        }
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::row_vector(&[1.0, 2.0, 3.0]);
        let err = grad_check(
            |t, x| {
                let sq = t.mul(x, x);
                t.sum(sq)
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-8, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::row_vector(&[0.5, -1.0]);
        let err = grad_check(|t, _| t.constant(Tensor::scalar(4.0)), &x, 1e-5).unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn eps_out_of_range_rejected() {
        let x = Tensor::scalar(1.0);
        assert!(grad_check(|t, x| t.sum(x), &x, 1e-2).is_err());
        assert!(grad_check(|t, x| t.sum(x), &x, 1e-9).is_err());
    }

    #[test]
    fn non_finite_perturbation_is_an_error() {
        // exp overflows once x moves upward past ~709.78
        let x = Tensor::scalar(709.782712893384 - 5e-4);
        let res = grad_check(
            |t, x| {
                let e = t.exp(x);
                t.sum(e)
            },
            &x,
            1e-3,
        );
        assert!(res.is_err());
    }
}
