use serde::{Deserialize, Serialize};

use super::TensorError;
use crate::scalar::Scalar;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct AdamConfig {
    pub beta1: f64,
    pub beta2: f64,
    pub eps: f64,
}

impl Default for AdamConfig {
    fn default() -> Self {
        Self { beta1: 0.9, beta2: 0.999, eps: 1e-8 }
    }
}

/// First/second moment accumulators, one buffer per parameter slice.
#[derive(Debug, Clone, PartialEq)]
pub struct AdamState<T> {
    pub m: Vec<Vec<T>>,
    pub v: Vec<Vec<T>>,
    pub t: u64,
    pub config: AdamConfig,
}

impl<T: Scalar> AdamState<T> {
    pub fn new(shapes: &[&[T]], config: AdamConfig) -> Self {
        let m: Vec<Vec<T>> = shapes.iter().map(|s| vec![T::zero(); s.len()]).collect();
        Self { v: m.clone(), m, t: 0, config }
    }

    /// One bias-corrected Adam step.
    ///
    /// Gradients are validated before any buffer is touched, so a rejected
    /// step leaves parameters, moments and `t` unchanged.
    pub fn update(&mut self, params: Vec<&mut [T]>, grads: &[&[T]], lr: f64) -> Result<(), TensorError> {
        if params.len() != self.m.len() || grads.len() != self.m.len() {
            return Err(TensorError::Shape {
                op: "adam_update",
                detail: format!("{} params / {} grads for {} buffers", params.len(), grads.len(), self.m.len()),
            });
        }
        for (i, (p, g)) in params.iter().zip(grads).enumerate() {
            if p.len() != self.m[i].len() || g.len() != p.len() {
                return Err(TensorError::Shape {
                    op: "adam_update",
                    detail: format!("buffer {i}: param {} grad {} state {}", p.len(), g.len(), self.m[i].len()),
                });
            }
        }
        if !(lr > 0.0 && lr.is_finite()) {
            return Err(TensorError::Invalid { op: "adam_update", detail: format!("learning rate {lr}") });
        }
        if let Some((i, j)) = grads
            .iter()
            .enumerate()
            .find_map(|(i, g)| g.iter().position(|v| !v.is_finite()).map(|j| (i, j)))
        {
            return Err(TensorError::NonFinite {
                op: "adam_update",
                detail: format!("gradient buffer {i} entry {j}"),
            });
        }

        self.t += 1;
        let AdamConfig { beta1, beta2, eps } = self.config;
        let bc1 = 1.0 - beta1.powi(self.t as i32);
        let bc2 = 1.0 - beta2.powi(self.t as i32);
        let (b1, b2) = (T::of(beta1), T::of(beta2));
        let (one_b1, one_b2) = (T::of(1.0 - beta1), T::of(1.0 - beta2));
        let (inv_bc1, inv_bc2) = (T::of(1.0 / bc1), T::of(1.0 / bc2));
        let (lr, eps) = (T::of(lr), T::of(eps));
        for (((p, g), m), v) in params.into_iter().zip(grads).zip(&mut self.m).zip(&mut self.v) {
            for (((pv, &gv), mv), vv) in p.iter_mut().zip(g.iter()).zip(m.iter_mut()).zip(v.iter_mut()) {
                *mv = b1 * *mv + one_b1 * gv;
                *vv = b2 * *vv + one_b2 * gv * gv;
                let m_hat = *mv * inv_bc1;
                let v_hat = *vv * inv_bc2;
                *pv -= lr * m_hat / (v_hat.sqrt() + eps);
            }
        }
        Ok(())
    }
}
