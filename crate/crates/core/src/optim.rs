//! SGD with heavy-ball momentum and coupled weight decay.

use crate::error::{Error, Result};
use crate::tensor::Scalar;

/// One in-place update of a single parameter tensor:
/// `v ← μ·v + g + wd·θ`, then `θ ← θ − γ·v`.
///
/// The step is all-or-nothing: a non-finite gradient leaves `param` and
/// `velocity` untouched.
pub fn sgd_momentum_update<T: Scalar>(
    param: &mut [T],
    grad: &[T],
    velocity: &mut [T],
    lr: f64,
    momentum: f64,
    weight_decay: f64,
) -> Result<()> {
    if param.len() != grad.len() || param.len() != velocity.len() {
        return Err(Error::Invalid(format!(
            "sgd: param {} / grad {} / velocity {} lengths differ",
            param.len(),
            grad.len(),
            velocity.len()
        )));
    }
    if grad.iter().any(|g| !g.is_finite()) {
        return Err(Error::NonFiniteGradient(String::from("<tensor>")));
    }
    let (lr, mu, wd) = (T::of(lr), T::of(momentum), T::of(weight_decay));
    for ((p, &g), v) in param.iter_mut().zip(grad).zip(velocity.iter_mut()) {
        *v = mu * *v + g + wd * *p;
        *p -= lr * *v;
    }
    Ok(())
}
