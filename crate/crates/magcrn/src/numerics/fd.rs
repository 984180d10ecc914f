//! Central finite differences: the independent oracle used to validate
//! reverse-mode gradients.

use crate::error::{Error, Result};
use crate::numerics::tensor::{relative_error, Tensor};

pub const DEFAULT_STEP: f64 = 1e-5;

/// Central-difference gradient of `f` with respect to every entry of every
/// tensor in `params`: (f(x + h e_i) - f(x - h e_i)) / 2h.
///
/// `f` must be deterministic and finite in an `h`-neighborhood of `params`.
pub fn finite_diff_gradient(
    mut f: impl FnMut(&[Tensor]) -> Result<f64>,
    params: &[Tensor],
    h: f64,
) -> Result<Vec<Tensor>> {
    let mut work: Vec<Tensor> = params.to_vec();
    let mut grads = Vec::with_capacity(params.len());
    for pi in 0..params.len() {
        let numel = params[pi].numel();
        let mut g = vec![0.0; numel];
        for (entry, gv) in g.iter_mut().enumerate() {
            let orig = work[pi].data()[entry];
            work[pi].data_mut()[entry] = orig + h;
            let up = f(&work)?;
            work[pi].data_mut()[entry] = orig - h;
            let down = f(&work)?;
            work[pi].data_mut()[entry] = orig;
            if !up.is_finite() || !down.is_finite() {
                return Err(Error::FdNonFinite {
                    param: format!("#{pi}"),
                    entry,
                });
            }
            *gv = (up - down) / (2.0 * h);
        }
        grads.push(Tensor::new(params[pi].shape().to_vec(), g));
    }
    Ok(grads)
}

/// Largest relative error between two gradient tensors,
/// |a - b| / max(1, |a|, |b|) per entry.
pub fn max_relative_error(a: &Tensor, b: &Tensor) -> f64 {
    assert_eq!(a.shape(), b.shape());
    a.data()
        .iter()
        .zip(b.data())
        .map(|(&x, &y)| relative_error(x, y))
        .fold(0.0, f64::max)
}
