use super::param::ParamSet;
use super::tensor::Tensor;
use crate::error::{Error, Result};

/// Central differences `(f(x + h e_i) - f(x - h e_i)) / 2h` for every
/// element of every entry.
pub fn finite_difference_oracle(
    mut f: impl FnMut(&ParamSet<Tensor<f64>>) -> Result<f64>,
    at: &ParamSet<Tensor<f64>>,
    step: f64,
) -> Result<ParamSet<Tensor<f64>>> {
    if step.partial_cmp(&0.0) != Some(std::cmp::Ordering::Greater) {
        return Err(Error::Numeric(format!(
            "finite difference step must be positive, got {step}"
        )));
    }
    let mut flat = at.flatten();
    let mut grad = vec![0.0; flat.len()];
    for i in 0..flat.len() {
        let orig = flat[i];
        flat[i] = orig + step;
        let plus = f(&at.unflatten(&flat)?)?;
        flat[i] = orig - step;
        let minus = f(&at.unflatten(&flat)?)?;
        flat[i] = orig;
        grad[i] = (plus - minus) / (2.0 * step);
    }
    at.unflatten(&grad)
}

/// Largest `|a - b| / max(|a|, |b|, floor)` across all elements.
pub fn max_relative_error(a: &ParamSet<Tensor<f64>>, b: &ParamSet<Tensor<f64>>, floor: f64) -> f64 {
    a.flatten()
        .iter()
        .zip(b.flatten())
        .map(|(&x, y)| (x - y).abs() / x.abs().max(y.abs()).max(floor))
        .fold(0.0, f64::max)
}
