use serde::{Deserialize, Serialize};

use super::{xavier_uniform, ParamSet, Rng, Tensor2D, TensorError};
use crate::scalar::Scalar;

/// Affine map `y = xW + b` with `W: d×k`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Linear<T> {
    pub weight: Tensor2D<T>,
    pub bias: Vec<T>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LinearGrads<T> {
    pub dx: Tensor2D<T>,
    pub dw: Tensor2D<T>,
    pub db: Vec<T>,
}

pub fn linear_forward<T: Scalar>(
    x: &Tensor2D<T>,
    w: &Tensor2D<T>,
    b: &[T],
) -> Result<Tensor2D<T>, TensorError> {
    if b.len() != w.cols() {
        return Err(TensorError::Shape {
            op: "linear_forward",
            detail: format!("bias of {} for {} outputs", b.len(), w.cols()),
        });
    }
    let mut y = x.matmul(w)?;
    y.add_row_vector(b)?;
    Ok(y)
}

pub fn linear_backward<T: Scalar>(
    x: &Tensor2D<T>,
    w: &Tensor2D<T>,
    dy: &Tensor2D<T>,
) -> Result<LinearGrads<T>, TensorError> {
    if dy.rows() != x.rows() || dy.cols() != w.cols() || x.cols() != w.rows() {
        return Err(TensorError::Shape {
            op: "linear_backward",
            detail: format!("x {:?}, w {:?}, dy {:?}", x.shape(), w.shape(), dy.shape()),
        });
    }
    Ok(LinearGrads { dx: dy.matmul_nt(w)?, dw: x.matmul_tn(dy)?, db: dy.column_sums() })
}

impl<T: Scalar> Linear<T> {
    pub fn new(rng: &mut Rng, input: usize, output: usize) -> Self {
        Self { weight: xavier_uniform(rng, input, output), bias: vec![T::zero(); output] }
    }

    pub fn input_dim(&self) -> usize {
        self.weight.rows()
    }

    pub fn output_dim(&self) -> usize {
        self.weight.cols()
    }

    pub fn forward(&self, x: &Tensor2D<T>) -> Result<Tensor2D<T>, TensorError> {
        linear_forward(x, &self.weight, &self.bias)
    }

    /// Accumulates parameter gradients into `grad` and returns `∂L/∂x`.
    pub fn backward(
        &self,
        x: &Tensor2D<T>,
        dy: &Tensor2D<T>,
        grad: &mut Linear<T>,
    ) -> Result<Tensor2D<T>, TensorError> {
        grad.weight.add_matmul_tn(x, dy)?;
        for (g, s) in grad.bias.iter_mut().zip(dy.column_sums()) {
            *g += s;
        }
        dy.matmul_nt(&self.weight)
    }

    pub fn cast<U: Scalar>(&self) -> Linear<U> {
        Linear { weight: self.weight.cast(), bias: self.bias.iter().map(|&b| U::of(b.as_f64())).collect() }
    }
}

impl<T: Scalar> ParamSet<T> for Linear<T> {
    fn slices(&self) -> Vec<&[T]> {
        vec![self.weight.data(), &self.bias]
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.weight.data_mut(), &mut self.bias]
    }

    fn zeros_like(&self) -> Self {
        Self { weight: Tensor2D::zeros(self.weight.rows(), self.weight.cols()), bias: vec![T::zero(); self.bias.len()] }
    }
}
