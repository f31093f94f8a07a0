//! SGD with momentum over a flat list of parameter buffers.

use super::ops::sgd_update;
use crate::error::{Error, Result};

/// Per-parameter velocity buffers for momentum SGD.
#[derive(Debug, Clone)]
pub struct SgdState {
    velocity: Vec<Vec<f64>>,
    lr: f64,
    momentum: f64,
}

impl SgdState {
    pub fn new(param_sizes: &[usize], lr: f64, momentum: f64) -> Result<Self> {
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(Error::Param(format!("learning rate must be positive, got {lr}")));
        }
        if !(0.0..1.0).contains(&momentum) {
            return Err(Error::Param(format!(
                "momentum must be in [0,1), got {momentum}"
            )));
        }
        Ok(SgdState {
            velocity: param_sizes.iter().map(|&n| vec![0.0; n]).collect(),
            lr,
            momentum,
        })
    }

    /// Applies one update step: v <- momentum*v + g; p <- p - lr*v.
    pub fn step(&mut self, params: &mut [&mut [f64]], grads: &[&[f64]]) -> Result<()> {
        if params.len() != self.velocity.len() || grads.len() != self.velocity.len() {
            return Err(Error::Dim(format!(
                "optimizer holds {} parameters, got {} params / {} grads",
                self.velocity.len(),
                params.len(),
                grads.len()
            )));
        }
        for ((p, g), v) in params.iter_mut().zip(grads).zip(self.velocity.iter_mut()) {
            if p.len() != v.len() || g.len() != v.len() {
                return Err(Error::Dim(format!(
                    "parameter/gradient length mismatch: param {}, grad {}, state {}",
                    p.len(),
                    g.len(),
                    v.len()
                )));
            }
            sgd_update(p, g, v, self.lr, self.momentum);
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn rejects_bad_hyperparameters() {
        assert!(SgdState::new(&[2], 0.0, 0.9).is_err());
        assert!(SgdState::new(&[2], 0.1, 1.0).is_err());
        assert!(SgdState::new(&[2], 0.1, -0.1).is_err());
    }

    #[test]
    fn rejects_shape_mismatch() {
        let mut s = SgdState::new(&[2], 0.1, 0.0).unwrap();
        let mut p = vec![1.0, 2.0, 3.0];
        let g = vec![0.0, 0.0, 0.0];
        assert!(matches!(
            s.step(&mut [&mut p], &[&g]),
            Err(Error::Dim(_))
        ));
    }
}
