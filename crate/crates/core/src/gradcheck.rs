//! Central-difference verification of tape gradients.
//!
//! `f` must be deterministic; a function whose value changes between calls
//! yields meaningless error figures.

use crate::error::{Error, Result};
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;

/// `|a - n| / max(1, |a|, |n|)`, maximized over coordinates.
pub fn max_relative_error(analytic: &[f64], numeric: &[f64]) -> f64 {
    analytic
        .iter()
        .zip(numeric)
        .map(|(&a, &n)| (a - n).abs() / 1f64.max(a.abs()).max(n.abs()))
        .fold(0.0, f64::max)
}

fn check_eps(eps: f64) -> Result<()> {
    if !(1e-6..=1e-3).contains(&eps) {
        return Err(Error::Usage(format!("finite-difference eps {eps} outside [1e-6, 1e-3]")));
    }
    Ok(())
}

/// Numerical gradient of `eval` at `x` by central differences.
pub fn central_difference(
    mut eval: impl FnMut(&[f64]) -> Result<f64>,
    x: &[f64],
    eps: f64,
) -> Result<Vec<f64>> {
    check_eps(eps)?;
    let mut probe = x.to_vec();
    let mut out = Vec::with_capacity(x.len());
    for i in 0..x.len() {
        let orig = probe[i];
        probe[i] = orig + eps;
        let up = eval(&probe)?;
        probe[i] = orig - eps;
        let down = eval(&probe)?;
        probe[i] = orig;
        out.push((up - down) / (2.0 * eps));
    }
    Ok(out)
}

/// Compares the tape gradient of scalar `f(x)` against central differences and
/// returns the maximum relative error.
pub fn finite_diff_check<F>(f: F, x: &Tensor, eps: f64) -> Result<f64>
where
    F: Fn(&mut Tape<'_>, Var) -> Result<Var>,
{
    check_eps(eps)?;
    let (rows, cols) = x.matrix_dims()?;
    let mut tape = Tape::new();
    let xv = tape.variable(rows, cols, x.values().to_vec())?;
    let loss = f(&mut tape, xv)?;
    let grads = tape.backward(loss)?;
    let analytic = grads
        .get(xv)
        .map(<[f64]>::to_vec)
        .unwrap_or_else(|| vec![0.0; x.len()]);
    let numeric = central_difference(
        |v| {
            let mut t = Tape::new();
            let xv = t.constant(rows, cols, v.to_vec())?;
            let out = f(&mut t, xv)?;
            Ok(t.scalar(out))
        },
        x.values(),
        eps,
    )?;
    Ok(max_relative_error(&analytic, &numeric))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn exact_for_linear() {
        let x = Tensor::new(&[2, 3], vec![0.3, -1.0, 2.0, 4.0, 0.1, -0.7]).unwrap();
        let err = finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-5).unwrap();
        assert!(err < 1e-10, "{err}");
    }

    #[test]
    fn rejects_out_of_range_eps() {
        let x = Tensor::scalar(1.0);
        assert!(finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-2).is_err());
        assert!(finite_diff_check(|t, v| Ok(t.sum(v)), &x, 1e-9).is_err());
    }
}
