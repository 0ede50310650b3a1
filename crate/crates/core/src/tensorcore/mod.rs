//! Dense numeric kernel with hand-written forward and backward passes.
//!
//! Everything here is generic over [`Scalar`](crate::Scalar): training runs in
//! `f32`, while the finite-difference checks run the same code in `f64`.

mod adam;
mod init;
mod linear;
mod loss;
mod lstm;
mod mix;
mod tensor;

pub use adam::{AdamConfig, AdamState};
pub use init::{seeded_rng, xavier_uniform, Rng};
pub use linear::{linear_backward, linear_forward, Linear, LinearGrads};
pub use loss::{log_softmax_rows, mse, softmax_rows, softmax_xent};
pub use lstm::{lstm_step, LstmParams, LstmStepCache, LstmTrace, SeqLayout};
pub use mix::{scalar_mix, scalar_mix_backward, softmax, MixGrads, ScalarMixParams};
pub use tensor::Tensor2D;

use crate::scalar::Scalar;

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum TensorError {
    #[error("shape mismatch in {op}: {detail}")]
    Shape { op: &'static str, detail: String },
    #[error("non-finite value in {op}: {detail}")]
    NonFinite { op: &'static str, detail: String },
    #[error("label {label} out of range for {classes} classes")]
    LabelOutOfRange { label: usize, classes: usize },
    #[error("invalid argument to {op}: {detail}")]
    Invalid { op: &'static str, detail: String },
}

/// Elementwise `max(0, x)`.
pub fn relu<T: Scalar>(x: &Tensor2D<T>) -> Tensor2D<T> {
    x.map(|v| if v > T::zero() { v } else { T::zero() })
}

/// Gradient of [`relu`]; the subgradient at exactly 0 is 0.
pub fn relu_backward<T: Scalar>(x: &Tensor2D<T>, dy: &Tensor2D<T>) -> Result<Tensor2D<T>, TensorError> {
    if x.shape() != dy.shape() {
        return Err(TensorError::Shape {
            op: "relu_backward",
            detail: format!("{:?} vs {:?}", x.shape(), dy.shape()),
        });
    }
    let data = x
        .data()
        .iter()
        .zip(dy.data())
        .map(|(&xv, &g)| if xv > T::zero() { g } else { T::zero() })
        .collect();
    Tensor2D::from_vec(x.rows(), x.cols(), data)
}

/// A collection of trainable parameter buffers.
///
/// Gradients are represented by a value of the same type, so `slices` of a
/// model and of its gradient line up one-to-one.
pub trait ParamSet<T: Scalar> {
    fn slices(&self) -> Vec<&[T]>;
    fn slices_mut(&mut self) -> Vec<&mut [T]>;
    fn zeros_like(&self) -> Self;

    fn num_params(&self) -> usize {
        self.slices().iter().map(|s| s.len()).sum()
    }

    fn all_finite(&self) -> bool {
        self.slices().iter().all(|s| s.iter().all(|v| v.is_finite()))
    }
}

impl<T: Scalar, P: ParamSet<T>> ParamSet<T> for Vec<P> {
    fn slices(&self) -> Vec<&[T]> {
        self.iter().flat_map(|p| p.slices()).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.iter_mut().flat_map(|p| p.slices_mut()).collect()
    }

    fn zeros_like(&self) -> Self {
        self.iter().map(|p| p.zeros_like()).collect()
    }
}

impl<T: Scalar, P: ParamSet<T>> ParamSet<T> for Option<P> {
    fn slices(&self) -> Vec<&[T]> {
        self.as_ref().map_or_else(Vec::new, |p| p.slices())
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.as_mut().map_or_else(Vec::new, |p| p.slices_mut())
    }

    fn zeros_like(&self) -> Self {
        self.as_ref().map(|p| p.zeros_like())
    }
}
