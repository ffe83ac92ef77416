//! Cosine annealing: lr(e) = lr0 * (1 + cos(pi * e / epochs)) / 2, reaching
//! exactly zero at the final epoch boundary.

use crate::error::{Error, Result};

pub fn cosine_lr(epoch: usize, lr0: f64, epochs: usize) -> Result<f64> {
    if epoch > epochs {
        return Err(Error::Train(format!(
            "epoch {epoch} outside the schedule range 0..={epochs}"
        )));
    }
    if epoch == 0 {
        return Ok(lr0);
    }
    if epoch == epochs {
        return Ok(0.0);
    }
    Ok(lr0 * 0.5 * (1.0 + (std::f64::consts::PI * epoch as f64 / epochs as f64).cos()))
}
