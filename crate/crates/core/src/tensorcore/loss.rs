use super::{Tensor2D, TensorError};
use crate::scalar::Scalar;

/// Row-wise log-softmax, stabilised by subtracting the row max.
pub fn log_softmax_rows<T: Scalar>(logits: &Tensor2D<T>) -> Tensor2D<T> {
    let mut out = logits.clone();
    for r in 0..out.rows() {
        let row = out.row_mut(r);
        let max = row.iter().copied().fold(T::neg_infinity(), T::max);
        let sum: T = row.iter().map(|&v| (v - max).exp()).sum();
        let lse = max + sum.ln();
        for v in row.iter_mut() {
            *v = *v - lse;
        }
    }
    out
}

pub fn softmax_rows<T: Scalar>(logits: &Tensor2D<T>) -> Tensor2D<T> {
    log_softmax_rows(logits).map(|v| v.exp())
}

/// Mean softmax cross-entropy over rows and its gradient `(softmax − onehot) / n`.
pub fn softmax_xent<T: Scalar>(
    logits: &Tensor2D<T>,
    gold: &[usize],
) -> Result<(f64, Tensor2D<T>), TensorError> {
    let (n, k) = logits.shape();
    if k < 2 {
        return Err(TensorError::Invalid { op: "softmax_xent", detail: format!("need at least 2 classes, got {k}") });
    }
    if gold.len() != n {
        return Err(TensorError::Shape {
            op: "softmax_xent",
            detail: format!("{} gold labels for {n} rows", gold.len()),
        });
    }
    if let Some(&bad) = gold.iter().find(|&&g| g >= k) {
        return Err(TensorError::LabelOutOfRange { label: bad, classes: k });
    }
    if n == 0 {
        return Ok((0.0, Tensor2D::zeros(0, k)));
    }
    logits.check_finite("softmax_xent")?;
    let logp = log_softmax_rows(logits);
    let inv_n = T::one() / T::of(n as f64);
    let mut total = 0.0f64;
    let mut grad = logp.map(|v| v.exp());
    for (r, &g) in gold.iter().enumerate() {
        total -= logp.get(r, g).as_f64();
        let row = grad.row_mut(r);
        row[g] -= T::one();
        for v in row.iter_mut() {
            *v *= inv_n;
        }
    }
    Ok((total / n as f64, grad))
}

/// Mean squared error `mean (p − g)²` and its gradient `2 (p − g) / n`.
pub fn mse<T: Scalar>(pred: &[T], gold: &[T]) -> Result<(f64, Vec<T>), TensorError> {
    if pred.len() != gold.len() {
        return Err(TensorError::Shape {
            op: "mse",
            detail: format!("{} predictions vs {} targets", pred.len(), gold.len()),
        });
    }
    if pred.iter().chain(gold).any(|v| !v.is_finite()) {
        return Err(TensorError::NonFinite { op: "mse", detail: "input contains NaN/Inf".into() });
    }
    let n = pred.len();
    if n == 0 {
        return Ok((0.0, Vec::new()));
    }
    let scale = T::of(2.0 / n as f64);
    let mut total = 0.0f64;
    let grad = pred
        .iter()
        .zip(gold)
        .map(|(&p, &g)| {
            let d = p - g;
            total += d.as_f64() * d.as_f64();
            scale * d
        })
        .collect();
    Ok((total / n as f64, grad))
}
