//! Plain stochastic gradient descent and the exponential learning-rate schedule.

use super::Tensor;
use crate::error::{Error, Result};

/// In-place update `p ← p − lr·g` for each parameter/gradient pair.
pub fn sgd_step<'a>(
    params: impl IntoIterator<Item = (&'a mut Tensor, &'a Tensor)>,
    lr: f64,
) -> Result<()> {
    if !(lr > 0.0 && lr.is_finite()) {
        return Err(Error::InvalidArgument(format!(
            "learning rate must be positive, got {lr}"
        )));
    }
    for (p, g) in params {
        if p.shape() != g.shape() {
            return Err(Error::shape(
                "sgd_step",
                format!("parameter {:?} vs gradient {:?}", p.shape(), g.shape()),
            ));
        }
        for (pv, gv) in p.data_mut().iter_mut().zip(g.data()) {
            *pv -= lr * gv;
        }
    }
    Ok(())
}

/// Learning rate at `epoch` (0-based): `base_lr · decay_rate^epoch`.
pub fn exponential_lr(base_lr: f64, decay_rate: f64, epoch: usize) -> f64 {
    base_lr * decay_rate.powi(epoch as i32)
}
