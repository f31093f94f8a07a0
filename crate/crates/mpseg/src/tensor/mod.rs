//! Minimal dense-tensor engine with reverse-mode differentiation.
//!
//! Supplies exactly the operators the encoder-decoder architecture needs:
//! 3x3 same-padding convolution, 2x2 max pooling, bilinear 2x upsampling,
//! batch normalization, ReLU, channel softmax, and the pixel classification
//! loss. Forward passes are recorded on a [`Tape`] and replayed in reverse
//! for gradients.

mod gradcheck;
pub mod ops;
mod serialize;
mod sgd;
mod tape;

pub use gradcheck::gradient_check;
pub use ops::{BnCache, BnMode, BnState};
pub use serialize::{read_model_file, write_model_file, ModelFile, NamedTensor};
pub use sgd::SgdState;
pub use tape::{Tape, ValId};

use crate::error::{Error, Result};

/// Dense N-dimensional array of f64 values in row-major order, with an
/// optional gradient slot of the same shape.
#[derive(Debug, Clone, PartialEq)]
pub struct Tensor {
    shape: Vec<usize>,
    data: Vec<f64>,
    grad: Option<Vec<f64>>,
    requires_grad: bool,
}

impl Tensor {
    /// A tensor filled with zeros.
    pub fn zeros(shape: &[usize]) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![0.0; n],
            grad: None,
            requires_grad: false,
        }
    }

    /// A tensor filled with a constant.
    pub fn filled(shape: &[usize], value: f64) -> Self {
        let n = shape.iter().product();
        Tensor {
            shape: shape.to_vec(),
            data: vec![value; n],
            grad: None,
            requires_grad: false,
        }
    }

    /// Builds a tensor from raw row-major data.
    pub fn from_vec(shape: &[usize], data: Vec<f64>) -> Result<Self> {
        let n: usize = shape.iter().product();
        if shape.iter().any(|&d| d == 0) {
            return Err(Error::Dim(format!("zero dimension in shape {shape:?}")));
        }
        if n != data.len() {
            return Err(Error::Dim(format!(
                "shape {shape:?} implies {n} values, got {}",
                data.len()
            )));
        }
        Ok(Tensor {
            shape: shape.to_vec(),
            data,
            grad: None,
            requires_grad: false,
        })
    }

    pub fn shape(&self) -> &[usize] {
        &self.shape
    }

    pub fn numel(&self) -> usize {
        self.data.len()
    }

    pub fn data(&self) -> &[f64] {
        &self.data
    }

    pub fn data_mut(&mut self) -> &mut [f64] {
        &mut self.data
    }

    pub fn into_data(self) -> Vec<f64> {
        self.data
    }

    pub fn requires_grad(&self) -> bool {
        self.requires_grad
    }

    /// Marks the tensor as a differentiation target.
    pub fn with_grad(mut self) -> Self {
        self.requires_grad = true;
        self
    }

    /// The gradient accumulated by the last backward pass, if any.
    pub fn grad(&self) -> Option<&[f64]> {
        self.grad.as_deref()
    }

    pub(crate) fn set_grad(&mut self, grad: Vec<f64>) {
        debug_assert_eq!(grad.len(), self.data.len());
        self.grad = Some(grad);
    }

    /// Errors if any value is NaN or infinite.
    pub fn validate_finite(&self, context: &'static str) -> Result<()> {
        if self.data.iter().all(|v| v.is_finite()) {
            Ok(())
        } else {
            Err(Error::NonFinite(context))
        }
    }

    /// Interprets the tensor as `[C, H, W]`.
    pub fn as_chw(&self) -> Result<(usize, usize, usize)> {
        match self.shape[..] {
            [c, h, w] => Ok((c, h, w)),
            _ => Err(Error::Dim(format!(
                "expected rank-3 [C,H,W] tensor, got shape {:?}",
                self.shape
            ))),
        }
    }
}

pub(crate) fn all_finite(values: &[f64]) -> bool {
    values.iter().all(|v| v.is_finite())
}
