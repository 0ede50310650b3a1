//! LSTM cell with backpropagation through time over packed sequences.
//!
//! Gate columns are ordered `[i, f, g, o]`:
//! `i, f, o = σ(·)`, `g = tanh(·)`, `c = f∘c_prev + i∘g`, `h = o∘tanh(c)`.
//!
//! Variable-length batches are packed: sequences are sorted by length
//! (longest first), so at step `t` the still-active sequences are a prefix of
//! the batch and no padding ever reaches a valid position.

use serde::{Deserialize, Serialize};

use super::{xavier_uniform, ParamSet, Rng, Tensor2D, TensorError};
use crate::scalar::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LstmParams<T> {
    /// `input × 4H`
    pub w_ih: Tensor2D<T>,
    /// `H × 4H`
    pub w_hh: Tensor2D<T>,
    /// `4H`
    pub bias: Vec<T>,
}

impl<T: Scalar> LstmParams<T> {
    /// Xavier-uniform weights, zero biases except the forget gate at 1.0.
    pub fn new(rng: &mut Rng, input: usize, hidden: usize) -> Self {
        let w_ih = xavier_uniform(rng, input, 4 * hidden);
        let w_hh = xavier_uniform(rng, hidden, 4 * hidden);
        let mut bias = vec![T::zero(); 4 * hidden];
        for b in &mut bias[hidden..2 * hidden] {
            *b = T::one();
        }
        Self { w_ih, w_hh, bias }
    }

    pub fn zeros(input: usize, hidden: usize) -> Self {
        Self {
            w_ih: Tensor2D::zeros(input, 4 * hidden),
            w_hh: Tensor2D::zeros(hidden, 4 * hidden),
            bias: vec![T::zero(); 4 * hidden],
        }
    }

    pub fn input_dim(&self) -> usize {
        self.w_ih.rows()
    }

    pub fn hidden_dim(&self) -> usize {
        self.w_hh.rows()
    }

    pub fn count(input: usize, hidden: usize) -> usize {
        4 * hidden * (input + hidden) + 4 * hidden
    }

    /// Runs one step; rows of `x`, `h_prev` and `c_prev` are independent sequences.
    pub fn step(
        &self,
        x: &Tensor2D<T>,
        h_prev: &Tensor2D<T>,
        c_prev: &Tensor2D<T>,
    ) -> Result<(Tensor2D<T>, Tensor2D<T>, LstmStepCache<T>), TensorError> {
        let hd = self.hidden_dim();
        if x.cols() != self.input_dim()
            || h_prev.shape() != (x.rows(), hd)
            || c_prev.shape() != (x.rows(), hd)
        {
            return Err(TensorError::Shape {
                op: "lstm_step",
                detail: format!(
                    "x {:?}, h {:?}, c {:?} for input {} hidden {hd}",
                    x.shape(),
                    h_prev.shape(),
                    c_prev.shape(),
                    self.input_dim()
                ),
            });
        }
        let mut z = x.matmul(&self.w_ih)?;
        z.add_matmul_nn(h_prev, &self.w_hh)?;
        z.add_row_vector(&self.bias)?;
        let (h, c, gates, tanh_c) = self.cell(z, c_prev);
        h.check_finite("lstm_step")?;
        let cache = LstmStepCache { x: x.clone(), h_prev: h_prev.clone(), c_prev: c_prev.clone(), gates, tanh_c };
        Ok((h, c, cache))
    }

    /// Gate activations and state update from pre-activations `z`.
    fn cell(
        &self,
        z: Tensor2D<T>,
        c_prev: &Tensor2D<T>,
    ) -> (Tensor2D<T>, Tensor2D<T>, Tensor2D<T>, Tensor2D<T>) {
        let hd = self.hidden_dim();
        let n = z.rows();
        let mut gates = z;
        let mut c = Tensor2D::zeros(n, hd);
        let mut tanh_c = Tensor2D::zeros(n, hd);
        let mut h = Tensor2D::zeros(n, hd);
        for r in 0..n {
            let gr = gates.row_mut(r);
            for j in 0..hd {
                gr[j] = sigmoid(gr[j]);
                gr[hd + j] = sigmoid(gr[hd + j]);
                gr[2 * hd + j] = gr[2 * hd + j].tanh();
                gr[3 * hd + j] = sigmoid(gr[3 * hd + j]);
            }
            let gr = gates.row(r);
            let cp = c_prev.row(r);
            let (cr, tr, hr) = (c.row_mut(r), tanh_c.row_mut(r), h.row_mut(r));
            for j in 0..hd {
                let cv = gr[hd + j] * cp[j] + gr[j] * gr[2 * hd + j];
                cr[j] = cv;
                tr[j] = cv.tanh();
                hr[j] = gr[3 * hd + j] * tr[j];
            }
        }
        (h, c, gates, tanh_c)
    }

    /// Returns `(dz, dc_prev)` for one step.
    fn cell_backward(
        &self,
        cache: &LstmStepCache<T>,
        dh: &Tensor2D<T>,
        dc: &Tensor2D<T>,
    ) -> (Tensor2D<T>, Tensor2D<T>) {
        let hd = self.hidden_dim();
        let n = cache.gates.rows();
        let mut dz = Tensor2D::zeros(n, 4 * hd);
        let mut dc_prev = Tensor2D::zeros(n, hd);
        for r in 0..n {
            let g = cache.gates.row(r);
            let tc = cache.tanh_c.row(r);
            let cp = cache.c_prev.row(r);
            let (dhr, dcr) = (dh.row(r), dc.row(r));
            let dzr = dz.row_mut(r);
            let mut dcp = vec![T::zero(); hd];
            for j in 0..hd {
                let (i, f, gg, o) = (g[j], g[hd + j], g[2 * hd + j], g[3 * hd + j]);
                let dct = dcr[j] + dhr[j] * o * (T::one() - tc[j] * tc[j]);
                let d_o = dhr[j] * tc[j];
                let d_i = dct * gg;
                let d_g = dct * i;
                let d_f = dct * cp[j];
                dcp[j] = dct * f;
                dzr[j] = d_i * i * (T::one() - i);
                dzr[hd + j] = d_f * f * (T::one() - f);
                dzr[2 * hd + j] = d_g * (T::one() - gg * gg);
                dzr[3 * hd + j] = d_o * o * (T::one() - o);
            }
            dc_prev.row_mut(r).copy_from_slice(&dcp);
        }
        (dz, dc_prev)
    }

    /// Backward through one step. Accumulates parameter gradients into `grad`
    /// and returns `(dx, dh_prev, dc_prev)`.
    pub fn step_backward(
        &self,
        cache: &LstmStepCache<T>,
        dh: &Tensor2D<T>,
        dc: &Tensor2D<T>,
        grad: &mut LstmParams<T>,
    ) -> Result<(Tensor2D<T>, Tensor2D<T>, Tensor2D<T>), TensorError> {
        let (dz, dc_prev) = self.cell_backward(cache, dh, dc);
        grad.w_ih.add_matmul_tn(&cache.x, &dz)?;
        grad.w_hh.add_matmul_tn(&cache.h_prev, &dz)?;
        for (b, s) in grad.bias.iter_mut().zip(dz.column_sums()) {
            *b += s;
        }
        let dx = dz.matmul_nt(&self.w_ih)?;
        let dh_prev = dz.matmul_nt(&self.w_hh)?;
        Ok((dx, dh_prev, dc_prev))
    }

    /// Runs the cell over packed steps; `xs[t]` has one row per sequence still
    /// active at step `t`, and row counts never increase with `t`.
    pub fn forward_steps(&self, xs: &[Tensor2D<T>]) -> Result<(Vec<Tensor2D<T>>, LstmTrace<T>), TensorError> {
        let hd = self.hidden_dim();
        let mut hs = Vec::with_capacity(xs.len());
        let mut caches = Vec::with_capacity(xs.len());
        let mut h = Tensor2D::zeros(xs.first().map_or(0, |x| x.rows()), hd);
        let mut c = h.clone();
        for x in xs {
            let n = x.rows();
            if n > h.rows() {
                return Err(TensorError::Shape { op: "lstm_forward", detail: "active rows increased".into() });
            }
            let (hp, cp) = if n == h.rows() { (h, c) } else { (h.slice_rows(0, n), c.slice_rows(0, n)) };
            let (hn, cn, cache) = self.step(x, &hp, &cp)?;
            hs.push(hn.clone());
            caches.push(cache);
            h = hn;
            c = cn;
        }
        Ok((hs, LstmTrace { steps: caches, input: None }))
    }

    /// BPTT over a trace from [`forward_steps`](Self::forward_steps).
    pub fn backward_steps(
        &self,
        trace: &LstmTrace<T>,
        dhs: &[Tensor2D<T>],
        grad: &mut LstmParams<T>,
    ) -> Result<Vec<Tensor2D<T>>, TensorError> {
        let hd = self.hidden_dim();
        let steps = trace.steps.len();
        if dhs.len() != steps {
            return Err(TensorError::Shape { op: "lstm_backward", detail: format!("{} grads for {steps} steps", dhs.len()) });
        }
        let mut dxs = vec![Tensor2D::zeros(0, 0); steps];
        let mut dh_next = Tensor2D::<T>::zeros(0, hd);
        let mut dc_next = Tensor2D::<T>::zeros(0, hd);
        for t in (0..steps).rev() {
            let cache = &trace.steps[t];
            let n = cache.gates.rows();
            let mut dh = dhs[t].clone();
            if dh.shape() != (n, hd) {
                return Err(TensorError::Shape { op: "lstm_backward", detail: format!("step {t} grad {:?}", dh.shape()) });
            }
            let mut dc = Tensor2D::zeros(n, hd);
            for r in 0..dh_next.rows() {
                for (a, &b) in dh.row_mut(r).iter_mut().zip(dh_next.row(r)) {
                    *a += b;
                }
                dc.row_mut(r).copy_from_slice(dc_next.row(r));
            }
            let (dx, dhp, dcp) = self.step_backward(cache, &dh, &dc, grad)?;
            dxs[t] = dx;
            dh_next = dhp;
            dc_next = dcp;
        }
        Ok(dxs)
    }

    /// Runs one direction over token rows grouped into sequences by `layout`.
    /// The input projection is computed for all tokens in one product.
    pub fn forward_tokens(
        &self,
        layout: &SeqLayout,
        x: &Tensor2D<T>,
        reverse: bool,
    ) -> Result<(Tensor2D<T>, LstmTrace<T>), TensorError> {
        let hd = self.hidden_dim();
        if x.cols() != self.input_dim() || x.rows() < layout.num_tokens() {
            return Err(TensorError::Shape {
                op: "lstm_forward",
                detail: format!("x {:?} for input {} over {} tokens", x.shape(), self.input_dim(), layout.num_tokens()),
            });
        }
        let zs = layout.to_steps(&x.matmul(&self.w_ih)?, reverse);
        let mut hs = Vec::with_capacity(zs.len());
        let mut steps = Vec::with_capacity(zs.len());
        let mut h = Tensor2D::zeros(zs.first().map_or(0, |z| z.rows()), hd);
        let mut c = h.clone();
        for mut z in zs {
            let n = z.rows();
            let (hp, cp) = if n == h.rows() { (h, c) } else { (h.slice_rows(0, n), c.slice_rows(0, n)) };
            z.add_matmul_nn(&hp, &self.w_hh)?;
            z.add_row_vector(&self.bias)?;
            let (hn, cn, gates, tanh_c) = self.cell(z, &cp);
            hn.check_finite("lstm_forward")?;
            hs.push(hn.clone());
            steps.push(LstmStepCache { x: Tensor2D::zeros(n, 0), h_prev: hp, c_prev: cp, gates, tanh_c });
            h = hn;
            c = cn;
        }
        Ok((layout.from_steps(&hs, hd, reverse), LstmTrace { steps, input: Some(x.clone()) }))
    }

    pub fn backward_tokens(
        &self,
        layout: &SeqLayout,
        trace: &LstmTrace<T>,
        dout: &Tensor2D<T>,
        reverse: bool,
        grad: &mut LstmParams<T>,
    ) -> Result<Tensor2D<T>, TensorError> {
        let hd = self.hidden_dim();
        let input = trace.input.as_ref().ok_or_else(|| TensorError::Invalid {
            op: "lstm_backward",
            detail: "trace was not produced by forward_tokens".into(),
        })?;
        let dhs = layout.to_steps(dout, reverse);
        if dhs.len() != trace.steps.len() {
            return Err(TensorError::Shape { op: "lstm_backward", detail: "layout does not match trace".into() });
        }
        let mut dzs = vec![Tensor2D::zeros(0, 0); dhs.len()];
        let mut dh_next = Tensor2D::<T>::zeros(0, hd);
        let mut dc_next = Tensor2D::<T>::zeros(0, hd);
        for (t, mut dh) in dhs.into_iter().enumerate().rev() {
            let cache = &trace.steps[t];
            let n = cache.gates.rows();
            if dh.shape() != (n, hd) {
                return Err(TensorError::Shape { op: "lstm_backward", detail: format!("step {t} grad {:?}", dh.shape()) });
            }
            let mut dc = Tensor2D::zeros(n, hd);
            for r in 0..dh_next.rows() {
                for (a, &b) in dh.row_mut(r).iter_mut().zip(dh_next.row(r)) {
                    *a += b;
                }
                dc.row_mut(r).copy_from_slice(dc_next.row(r));
            }
            let (dz, dcp) = self.cell_backward(cache, &dh, &dc);
            grad.w_hh.add_matmul_tn(&cache.h_prev, &dz)?;
            for (b, s) in grad.bias.iter_mut().zip(dz.column_sums()) {
                *b += s;
            }
            dh_next = if t > 0 { dz.matmul_nt(&self.w_hh)? } else { Tensor2D::zeros(0, hd) };
            dc_next = dcp;
            dzs[t] = dz;
        }
        let dz_all = layout.from_steps(&dzs, 4 * hd, reverse);
        let mut rows = input.clone();
        if rows.rows() != dz_all.rows() {
            rows = rows.slice_rows(0, dz_all.rows());
        }
        grad.w_ih.add_matmul_tn(&rows, &dz_all)?;
        let mut dx = dz_all.matmul_nt(&self.w_ih)?;
        if dx.rows() < input.rows() {
            let mut full = Tensor2D::zeros(input.rows(), input.cols());
            for r in 0..dx.rows() {
                full.row_mut(r).copy_from_slice(dx.row(r));
            }
            dx = full;
        }
        Ok(dx)
    }

    pub fn cast<U: Scalar>(&self) -> LstmParams<U> {
        LstmParams {
            w_ih: self.w_ih.cast(),
            w_hh: self.w_hh.cast(),
            bias: self.bias.iter().map(|&b| U::of(b.as_f64())).collect(),
        }
    }
}

impl<T: Scalar> ParamSet<T> for LstmParams<T> {
    fn slices(&self) -> Vec<&[T]> {
        vec![self.w_ih.data(), self.w_hh.data(), &self.bias]
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        vec![self.w_ih.data_mut(), self.w_hh.data_mut(), &mut self.bias]
    }

    fn zeros_like(&self) -> Self {
        Self::zeros(self.input_dim(), self.hidden_dim())
    }
}

/// Single LSTM step from zero-initialised or given state.
pub fn lstm_step<T: Scalar>(
    x: &Tensor2D<T>,
    h_prev: &Tensor2D<T>,
    c_prev: &Tensor2D<T>,
    params: &LstmParams<T>,
) -> Result<(Tensor2D<T>, Tensor2D<T>), TensorError> {
    params.step(x, h_prev, c_prev).map(|(h, c, _)| (h, c))
}

#[derive(Debug, Clone)]
pub struct LstmStepCache<T> {
    x: Tensor2D<T>,
    h_prev: Tensor2D<T>,
    c_prev: Tensor2D<T>,
    /// activated gates `[i, f, g, o]`
    gates: Tensor2D<T>,
    tanh_c: Tensor2D<T>,
}

#[derive(Debug, Clone)]
pub struct LstmTrace<T> {
    steps: Vec<LstmStepCache<T>>,
    /// token-major input, kept by the token-level path
    input: Option<Tensor2D<T>>,
}

#[inline]
fn sigmoid<T: Scalar>(x: T) -> T {
    if x >= T::zero() {
        T::one() / (T::one() + (-x).exp())
    } else {
        let e = x.exp();
        e / (T::one() + e)
    }
}

/// Maps token rows (sequences stored contiguously) to packed time steps.
#[derive(Debug, Clone, PartialEq)]
pub struct SeqLayout {
    starts: Vec<usize>,
    lens: Vec<usize>,
    /// sequence indices sorted by length, longest first (stable)
    order: Vec<usize>,
    active: Vec<usize>,
    total: usize,
}

impl SeqLayout {
    /// `segments[i] = (first token row, length)`.
    pub fn new(segments: &[(usize, usize)]) -> Self {
        let starts: Vec<usize> = segments.iter().map(|s| s.0).collect();
        let lens: Vec<usize> = segments.iter().map(|s| s.1).collect();
        let mut order: Vec<usize> = (0..segments.len()).collect();
        order.sort_by(|&a, &b| lens[b].cmp(&lens[a]));
        let max_len = lens.iter().copied().max().unwrap_or(0);
        let active = (0..max_len).map(|t| lens.iter().filter(|&&l| l > t).count()).collect();
        let total = segments.iter().map(|&(s, l)| s + l).max().unwrap_or(0);
        Self { starts, lens, order, active, total }
    }

    /// Layout for consecutive sequences of the given lengths.
    pub fn contiguous(lens: &[usize]) -> Self {
        let mut off = 0;
        let segs: Vec<(usize, usize)> = lens
            .iter()
            .map(|&l| {
                let s = (off, l);
                off += l;
                s
            })
            .collect();
        Self::new(&segs)
    }

    pub fn num_steps(&self) -> usize {
        self.active.len()
    }

    pub fn num_tokens(&self) -> usize {
        self.total
    }

    fn token_row(&self, rank: usize, t: usize, reverse: bool) -> usize {
        let s = self.order[rank];
        let pos = if reverse { self.lens[s] - 1 - t } else { t };
        self.starts[s] + pos
    }

    pub fn to_steps<T: Scalar>(&self, x: &Tensor2D<T>, reverse: bool) -> Vec<Tensor2D<T>> {
        self.active
            .iter()
            .enumerate()
            .map(|(t, &n)| {
                let idx: Vec<usize> = (0..n).map(|r| self.token_row(r, t, reverse)).collect();
                x.gather_rows(&idx)
            })
            .collect()
    }

    pub fn from_steps<T: Scalar>(&self, steps: &[Tensor2D<T>], cols: usize, reverse: bool) -> Tensor2D<T> {
        let mut out = Tensor2D::zeros(self.total, cols);
        for (t, step) in steps.iter().enumerate() {
            for r in 0..step.rows() {
                out.row_mut(self.token_row(r, t, reverse)).copy_from_slice(step.row(r));
            }
        }
        out
    }
}

trait AddMatmul<T> {
    fn add_matmul_nn(&mut self, a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<(), TensorError>;
}

impl<T: Scalar> AddMatmul<T> for Tensor2D<T> {
    fn add_matmul_nn(&mut self, a: &Tensor2D<T>, b: &Tensor2D<T>) -> Result<(), TensorError> {
        let prod = a.matmul(b)?;
        self.add_assign(&prod)
    }
}
