//! Central finite differences, the independent oracle for `backward`.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Denominator floor for [`relative_error`]; below this magnitude the
/// comparison degrades to an absolute error scaled by `1 / REL_ERR_FLOOR`.
pub const REL_ERR_FLOOR: f64 = 1e-6;

fn finite(v: f64, what: &str) -> Result<f64> {
    if v.is_finite() {
        Ok(v)
    } else {
        Err(Error::Numeric(format!("{what} evaluated to {v}")))
    }
}

/// `(f(x + h·e_i) - f(x - h·e_i)) / 2h` for every coordinate of `x`.
///
/// `f` receives constant copies of `x`; `x` itself is never modified.
pub fn finite_diff_grad<F>(mut f: F, x: &Tensor, h: f64) -> Result<Tensor>
where
    F: FnMut(&Tensor) -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let base = x.to_vec();
    let mut out = Vec::with_capacity(base.len());
    for i in 0..base.len() {
        let mut probe = base.clone();
        probe[i] = base[i] + h;
        let plus = finite(f(&Tensor::new(x.shape().to_vec(), probe.clone())?)?, "f(x+h)")?;
        probe[i] = base[i] - h;
        let minus = finite(f(&Tensor::new(x.shape().to_vec(), probe)?)?, "f(x-h)")?;
        out.push((plus - minus) / (2.0 * h));
    }
    Tensor::new(x.shape().to_vec(), out)
}

/// Central differences of `f` with respect to the values of `param`, which
/// is perturbed in place and restored bitwise after each probe.
pub fn finite_diff_in_place<F>(param: &Tensor, h: f64, mut f: F) -> Result<Vec<f64>>
where
    F: FnMut() -> Result<f64>,
{
    if !(h > 0.0) {
        return Err(Error::Contract(format!("step must be positive, got {h}")));
    }
    let n = param.numel();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = param.data()[i];
        param.data_mut()[i] = orig + h;
        let plus = f();
        param.data_mut()[i] = orig - h;
        let minus = f();
        param.data_mut()[i] = orig;
        let plus = finite(plus?, "f(θ+h)")?;
        let minus = finite(minus?, "f(θ-h)")?;
        out.push((plus - minus) / (2.0 * h));
    }
    Ok(out)
}

/// `|a - b| / max(|a|, |b|, REL_ERR_FLOOR)`.
pub fn relative_error(a: f64, b: f64) -> f64 {
    (a - b).abs() / a.abs().max(b.abs()).max(REL_ERR_FLOOR)
}

pub fn max_relative_error(a: &[f64], b: &[f64]) -> f64 {
    assert_eq!(a.len(), b.len(), "gradient length mismatch");
    a.iter()
        .zip(b)
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}
