use serde::{Deserialize, Serialize};

use super::{ParamSet, Tensor2D, TensorError};
use crate::scalar::Scalar;

/// Softmax-normalised layer weights `s` and a global scale `gamma`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScalarMixParams<T> {
    pub s: Vec<T>,
    pub gamma: T,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MixGrads<T> {
    pub ds: Vec<T>,
    pub dgamma: T,
    pub dlayers: Vec<Tensor2D<T>>,
}

pub fn softmax<T: Scalar>(s: &[T]) -> Vec<T> {
    let max = s.iter().copied().fold(T::neg_infinity(), T::max);
    let e: Vec<T> = s.iter().map(|&v| (v - max).exp()).collect();
    let z: T = e.iter().copied().sum();
    e.into_iter().map(|v| v / z).collect()
}

impl<T: Scalar> ScalarMixParams<T> {
    /// `s = 0`, `gamma = 1`: uniform weights.
    pub fn new(num_layers: usize) -> Self {
        Self { s: vec![T::zero(); num_layers], gamma: T::one() }
    }

    pub fn weights(&self) -> Vec<T> {
        softmax(&self.s)
    }

    pub fn num_layers(&self) -> usize {
        self.s.len()
    }
}

impl<T: Scalar> ParamSet<T> for ScalarMixParams<T> {
    fn slices(&self) -> Vec<&[T]> {
        vec![&self.s, std::slice::from_ref(&self.gamma)]
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![&mut self.s, std::slice::from_mut(&mut self.gamma)]
    }

    fn zeros_like(&self) -> Self {
        Self { s: vec![T::zero(); self.s.len()], gamma: T::zero() }
    }
}

fn check_layers<T: Scalar>(layers: &[&Tensor2D<T>], params: &ScalarMixParams<T>) -> Result<(), TensorError> {
    if layers.len() != params.s.len() || layers.is_empty() {
        return Err(TensorError::Shape {
            op: "scalar_mix",
            detail: format!("{} layers for {} mixing weights", layers.len(), params.s.len()),
        });
    }
    let shape = layers[0].shape();
    if layers.iter().any(|l| l.shape() != shape) {
        return Err(TensorError::Shape { op: "scalar_mix", detail: "layers differ in shape".into() });
    }
    Ok(())
}

/// `gamma · Σ_ℓ softmax(s)_ℓ · h_ℓ`
pub fn scalar_mix<T: Scalar>(
    layers: &[&Tensor2D<T>],
    params: &ScalarMixParams<T>,
) -> Result<Tensor2D<T>, TensorError> {
    check_layers(layers, params)?;
    let w = params.weights();
    let (r, c) = layers[0].shape();
    let mut out = Tensor2D::zeros(r, c);
    for (layer, &wl) in layers.iter().zip(&w) {
        let coef = params.gamma * wl;
        for (o, &h) in out.data_mut().iter_mut().zip(layer.data()) {
            *o += coef * h;
        }
    }
    Ok(out)
}

pub fn scalar_mix_backward<T: Scalar>(
    layers: &[&Tensor2D<T>],
    params: &ScalarMixParams<T>,
    dout: &Tensor2D<T>,
) -> Result<MixGrads<T>, TensorError> {
    check_layers(layers, params)?;
    if dout.shape() != layers[0].shape() {
        return Err(TensorError::Shape { op: "scalar_mix_backward", detail: "dout shape".into() });
    }
    let w = params.weights();
    // dot(dout, h_ℓ) per layer
    let dots: Vec<T> = layers
        .iter()
        .map(|l| l.data().iter().zip(dout.data()).map(|(&h, &g)| h * g).sum())
        .collect();
    let dgamma: T = w.iter().zip(&dots).map(|(&wl, &d)| wl * d).sum();
    let dw: Vec<T> = dots.iter().map(|&d| params.gamma * d).collect();
    let avg: T = w.iter().zip(&dw).map(|(&wl, &g)| wl * g).sum();
    let ds = w.iter().zip(&dw).map(|(&wl, &g)| wl * (g - avg)).collect();
    let dlayers = w.iter().map(|&wl| dout.map(|g| g * params.gamma * wl)).collect();
    Ok(MixGrads { ds, dgamma, dlayers })
}
