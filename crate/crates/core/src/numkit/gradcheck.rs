//! Central finite-difference gradient checking.
//!
//! The numerical side only evaluates the function forward, so it stays
//! independent of the reverse-mode code it checks.

use crate::numkit::tensor::Tensor;

pub const DEFAULT_STEP: f64 = 1e-5;

/// Numerical gradient of `f` with respect to `inputs[which]`.
pub fn numerical_gradient<F>(f: &F, inputs: &[Tensor], which: usize, step: f64) -> Tensor
where
    F: Fn(&[Tensor]) -> f64,
{
    let mut probe = inputs.to_vec();
    let n = probe[which].len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let orig = probe[which].data()[i];
        probe[which].data_mut()[i] = orig + step;
        let plus = f(&probe);
        probe[which].data_mut()[i] = orig - step;
        let minus = f(&probe);
        probe[which].data_mut()[i] = orig;
        out.push((plus - minus) / (2.0 * step));
    }
    Tensor::from_parts(inputs[which].shape().to_vec(), out)
}

/// Relative error `|a − n| / max(|a|, |n|, floor)` maximised over entries.
///
/// The floor keeps entries whose true gradient is ~0 from dominating through
/// finite-difference noise.
pub fn max_relative_error(analytic: &Tensor, numeric: &Tensor, floor: f64) -> f64 {
    analytic
        .data()
        .iter()
        .zip(numeric.data())
        .map(|(&a, &n)| (a - n).abs() / a.abs().max(n.abs()).max(floor))
        .fold(0.0, f64::max)
}
