use super::params::ParamStore;
use super::tape::{Tape, Var};
use crate::error::{contract, Result, Sd3Error};

/// Largest relative error between `analytic` and central differences of `f` at `x`:
/// `max_i |g_i - fd_i| / (|fd_i| + 1e-8)`.
pub fn finite_diff_check<F>(f: F, analytic: &[f64], x: &[f64], eps: f64) -> Result<f64>
where
    F: Fn(&[f64]) -> f64,
{
    if analytic.len() != x.len() {
        return Err(contract("finite_diff_check: gradient and point differ in length"));
    }
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(contract(format!("finite_diff_check: eps {eps} outside [1e-6, 1e-3]")));
    }
    let f0 = f(x);
    if !f0.is_finite() {
        return Err(Sd3Error::Domain(format!("finite_diff_check: f(x) = {f0}")));
    }
    let mut probe = x.to_vec();
    let mut worst = 0.0f64;
    for i in 0..x.len() {
        probe[i] = x[i] + eps;
        let up = f(&probe);
        probe[i] = x[i] - eps;
        let down = f(&probe);
        probe[i] = x[i];
        if !up.is_finite() || !down.is_finite() {
            return Err(Sd3Error::Domain(format!(
                "finite_diff_check: non-finite value near coordinate {i}"
            )));
        }
        let fd = (up - down) / (2.0 * eps);
        worst = worst.max((analytic[i] - fd).abs() / (fd.abs() + 1e-8));
    }
    Ok(worst)
}

/// Checks the tape gradient of a scalar loss with respect to every parameter
/// in `store`, returning the worst relative error.
pub fn check_param_gradients<B>(store: &ParamStore, build: B, eps: f64) -> Result<f64>
where
    B: Fn(&mut Tape<'_>) -> Result<Var>,
{
    let analytic = {
        let mut tape = Tape::new(store);
        let loss = build(&mut tape)?;
        tape.backward(loss)?.params(&tape).flatten(store)
    };
    let x = store.flatten();
    let eval = |flat: &[f64]| -> f64 {
        let mut s = store.clone();
        if s.set_flat(flat).is_err() {
            return f64::NAN;
        }
        let mut tape = Tape::new(&s);
        match build(&mut tape) {
            Ok(loss) => tape.scalar(loss),
            Err(_) => f64::NAN,
        }
    };
    finite_diff_check(eval, &analytic, &x, eps)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::diffnet::gaussian::gaussian_kl;

    #[test]
    fn polynomial_is_exact() {
        let err = finite_diff_check(|x| x[0] * x[0], &[6.0], &[3.0], 1e-4).unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn kl_mean_derivative() {
        let f = |x: &[f64]| gaussian_kl(x, &[1.0]).unwrap();
        let err = finite_diff_check(f, &[1.0], &[1.0], 1e-5).unwrap();
        assert!(err < 1e-5, "{err}");
    }

    #[test]
    fn wrong_gradient_is_detected() {
        let err = finite_diff_check(|x| x[0] * x[0], &[5.0], &[3.0], 1e-4).unwrap();
        assert!(err > 0.1);
    }

    #[test]
    fn rejects_bad_inputs() {
        assert!(finite_diff_check(|x| x[0], &[1.0], &[0.0], 1e-1).is_err());
        assert!(finite_diff_check(|x| x[0].ln(), &[1.0], &[-1.0], 1e-4).is_err());
        assert!(finite_diff_check(|x| x[0], &[1.0, 2.0], &[0.0], 1e-4).is_err());
    }
}
