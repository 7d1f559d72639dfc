//! Central-difference gradient checking against the autodiff tape.

use crate::autodiff::{Graph, Var};
use crate::error::{invalid, Error, Result};
use crate::scalar::Scalar;
use crate::tensor::Tensor;

/// Compares the tape gradient of a scalar function with central differences.
///
/// `f` builds the function on a fresh graph from the input node and returns
/// a `1×1` node. The result is the maximum over coordinates of
/// `|analytic − numeric| / max(1, |analytic|, |numeric|)`.
pub fn grad_check<T, F>(f: F, x: &Tensor<T>, eps: f64) -> Result<f64>
where
    T: Scalar,
    F: Fn(&mut Graph<T>, Var) -> Result<Var>,
{
    if !(1e-7..=1e-3).contains(&eps) {
        return invalid(format!("grad_check eps {eps} outside [1e-7, 1e-3]"));
    }
    let eval = |input: &Tensor<T>| -> Result<f64> {
        let mut g = Graph::new();
        let v = g.input(input.clone());
        let out = f(&mut g, v)?;
        let y = g.value(out).data()[0].as_f64();
        if !y.is_finite() {
            return Err(Error::NonFinite("grad_check objective".into()));
        }
        Ok(y)
    };

    let mut g = Graph::new();
    let v = g.input(x.clone());
    let out = f(&mut g, v)?;
    if g.value(out).len() != 1 {
        return invalid("grad_check objective must be scalar");
    }
    if !g.value(out).data()[0].is_finite() {
        return Err(Error::NonFinite("grad_check objective".into()));
    }
    g.backward(out)?;
    let analytic: Vec<f64> = match g.grad(v) {
        Some(gr) => gr.iter().map(|v| v.as_f64()).collect(),
        None => vec![0.0; x.len()],
    };

    let mut worst = 0.0f64;
    let h = T::lit(eps);
    let mut probe = x.clone();
    for k in 0..x.len() {
        let orig = probe.data()[k];
        probe.data_mut()[k] = orig + h;
        let up = eval(&probe)?;
        probe.data_mut()[k] = orig - h;
        let down = eval(&probe)?;
        probe.data_mut()[k] = orig;
        let numeric = (up - down) / (2.0 * eps);
        let a = analytic[k];
        let rel = (a - numeric).abs() / 1f64.max(a.abs()).max(numeric.abs());
        worst = worst.max(rel);
    }
    Ok(worst)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::rng::RandomSource;

    #[test]
    fn quadratic_is_exact() {
        let x = Tensor::<f64>::from_f64(&[1, 3], &[1.0, 2.0, 3.0]).unwrap();
        let err = grad_check(
            |g, v| {
                let sq = g.mul(v, v)?;
                Ok(g.sum(sq))
            },
            &x,
            1e-5,
        )
        .unwrap();
        assert!(err < 1e-6, "{err}");
    }

    #[test]
    fn softmax_then_dot() {
        let mut rng = RandomSource::new(5, 0);
        let x = Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng);
        let w = Tensor::<f64>::randn(&[2, 5], 1.0, &mut rng);
        let err = grad_check(
            |g, v| {
                let s = g.softmax_rows(v)?;
                let wv = g.constant(w.clone());
                let p = g.mul(s, wv)?;
                Ok(g.sum(p))
            },
            &x,
            1e-6,
        )
        .unwrap();
        assert!(err < 1e-4, "{err}");
    }

    #[test]
    fn constant_function_has_zero_error() {
        let x = Tensor::<f64>::from_f64(&[1, 2], &[0.3, -0.1]).unwrap();
        let err = grad_check(
            |g, _| Ok(g.constant(Tensor::filled(&[1, 1], 4.0))),
            &x,
            1e-5,
        )
        .unwrap();
        assert_eq!(err, 0.0);
    }

    #[test]
    fn rejects_bad_eps_and_non_finite() {
        let x = Tensor::<f64>::from_f64(&[1, 1], &[1.0]).unwrap();
        assert!(grad_check(|g, v| Ok(g.sum(v)), &x, 1e-2).is_err());
        let inf = |g: &mut Graph, _v: Var| Ok(g.constant(Tensor::filled(&[1, 1], f64::INFINITY)));
        assert!(matches!(grad_check(inf, &x, 1e-5), Err(Error::NonFinite(_))));
    }
}
