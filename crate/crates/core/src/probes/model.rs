use serde::{Deserialize, Serialize};

use super::{Arch, Head, InputSource, ProbeConfig, BILSTM_HIDDEN, BILSTM_LAYERS, LSTM_HIDDEN, MLP_HIDDEN};
use crate::tensorcore::{
    relu, relu_backward, scalar_mix, scalar_mix_backward, seeded_rng, Linear, LstmParams, LstmTrace, ParamSet,
    ScalarMixParams, SeqLayout, Tensor2D, TensorError,
};
use crate::Scalar;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Encoder<T> {
    None,
    Lstm(LstmParams<T>),
    /// `[forward, backward]` per layer.
    BiLstm(Vec<[LstmParams<T>; 2]>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub enum Readout<T> {
    Linear(Linear<T>),
    Mlp { hidden: Linear<T>, out: Linear<T> },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeParams<T> {
    pub mix: Option<ScalarMixParams<T>>,
    pub encoder: Encoder<T>,
    pub readout: Readout<T>,
}

impl<T: Scalar> ParamSet<T> for ProbeParams<T> {
    fn slices(&self) -> Vec<&[T]> {
        let mut v = self.mix.slices();
        match &self.encoder {
            Encoder::None => {}
            Encoder::Lstm(p) => v.extend(p.slices()),
            Encoder::BiLstm(layers) => {
                for [f, b] in layers {
                    v.extend(f.slices());
                    v.extend(b.slices());
                }
            }
        }
        match &self.readout {
            Readout::Linear(l) => v.extend(l.slices()),
            Readout::Mlp { hidden, out } => {
                v.extend(hidden.slices());
                v.extend(out.slices());
            }
        }
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = self.mix.slices_mut();
        match &mut self.encoder {
            Encoder::None => {}
            Encoder::Lstm(p) => v.extend(p.slices_mut()),
            Encoder::BiLstm(layers) => {
                for [f, b] in layers {
                    v.extend(f.slices_mut());
                    v.extend(b.slices_mut());
                }
            }
        }
        match &mut self.readout {
            Readout::Linear(l) => v.extend(l.slices_mut()),
            Readout::Mlp { hidden, out } => {
                v.extend(hidden.slices_mut());
                v.extend(out.slices_mut());
            }
        }
        v
    }

    fn zeros_like(&self) -> Self {
        Self {
            mix: self.mix.zeros_like(),
            encoder: match &self.encoder {
                Encoder::None => Encoder::None,
                Encoder::Lstm(p) => Encoder::Lstm(p.zeros_like()),
                Encoder::BiLstm(layers) => {
                    Encoder::BiLstm(layers.iter().map(|[f, b]| [f.zeros_like(), b.zeros_like()]).collect())
                }
            },
            readout: match &self.readout {
                Readout::Linear(l) => Readout::Linear(l.zeros_like()),
                Readout::Mlp { hidden, out } => Readout::Mlp { hidden: hidden.zeros_like(), out: out.zeros_like() },
            },
        }
    }
}

/// Which encoded rows the readout scores.
#[derive(Debug, Clone, PartialEq)]
pub enum Targets {
    Tokens(Vec<usize>),
    Pairs(Vec<(usize, usize)>),
}

impl Targets {
    pub fn len(&self) -> usize {
        match self {
            Targets::Tokens(t) => t.len(),
            Targets::Pairs(p) => p.len(),
        }
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// A minibatch of token rows.
#[derive(Debug, Clone)]
pub struct ProbeInput<T> {
    /// One `N × d` matrix per input layer: a single entry for a fixed-layer
    /// probe, all layers (in order) for a scalar-mix probe.
    pub layers: Vec<Tensor2D<T>>,
    /// `(first row, length)` of each sentence; required by recurrent archs,
    /// which must see every token row inside some segment.
    pub segments: Vec<(usize, usize)>,
    pub targets: Targets,
}

#[derive(Debug)]
pub struct ProbeCache<T> {
    mixed: Tensor2D<T>,
    layout: Option<SeqLayout>,
    lstm: Option<LstmTrace<T>>,
    /// per BiLSTM layer: input, forward trace, backward trace
    bilstm: Vec<(Tensor2D<T>, LstmTrace<T>, LstmTrace<T>)>,
    encoded: Tensor2D<T>,
    pair_parts: Option<(Tensor2D<T>, Tensor2D<T>)>,
    features: Tensor2D<T>,
    hidden_pre: Option<Tensor2D<T>>,
    hidden_act: Option<Tensor2D<T>>,
}

impl<T> ProbeCache<T> {
    /// MLP hidden pre-activations (input to the ReLU), if the readout has one.
    pub fn hidden_pre(&self) -> Option<&Tensor2D<T>> {
        self.hidden_pre.as_ref()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ProbeModel<T> {
    pub config: ProbeConfig,
    /// Representation width `d`.
    pub input_dim: usize,
    pub params: ProbeParams<T>,
}

impl<T: Scalar> ProbeModel<T> {
    pub fn new(config: ProbeConfig, input_dim: usize, seed: u64) -> Result<Self, TensorError> {
        config.validate()?;
        let mut rng = seeded_rng(seed);
        let mix = match config.input {
            InputSource::ScalarMix(l) => Some(ScalarMixParams::new(l)),
            InputSource::Layer(_) => None,
        };
        let encoder = match config.arch {
            Arch::Linear | Arch::Mlp1024 => Encoder::None,
            Arch::Lstm200Linear => Encoder::Lstm(LstmParams::new(&mut rng, input_dim, LSTM_HIDDEN)),
            Arch::Bilstm512Mlp1024 => Encoder::BiLstm(
                (0..BILSTM_LAYERS)
                    .map(|l| {
                        let i = if l == 0 { input_dim } else { 2 * BILSTM_HIDDEN };
                        [LstmParams::new(&mut rng, i, BILSTM_HIDDEN), LstmParams::new(&mut rng, i, BILSTM_HIDDEN)]
                    })
                    .collect(),
            ),
        };
        let f = config.feature_dim(input_dim);
        let k = config.head.output_dim();
        let readout = match config.arch {
            Arch::Linear | Arch::Lstm200Linear => Readout::Linear(Linear::new(&mut rng, f, k)),
            Arch::Mlp1024 | Arch::Bilstm512Mlp1024 => Readout::Mlp {
                hidden: Linear::new(&mut rng, f, MLP_HIDDEN),
                out: Linear::new(&mut rng, MLP_HIDDEN, k),
            },
        };
        Ok(Self { config, input_dim, params: ProbeParams { mix, encoder, readout } })
    }

    pub fn num_parameters(&self) -> usize {
        self.params.num_params()
    }

    /// Layer indices this probe reads from a store.
    pub fn input_layers(&self) -> Vec<usize> {
        match self.config.input {
            InputSource::Layer(l) => vec![l],
            InputSource::ScalarMix(n) => (0..n).collect(),
        }
    }

    pub fn mix_weights(&self) -> Option<Vec<T>> {
        self.params.mix.as_ref().map(ScalarMixParams::weights)
    }

    fn check_input(&self, input: &ProbeInput<T>) -> Result<usize, TensorError> {
        let want = self.input_layers().len();
        if input.layers.len() != want {
            return Err(TensorError::Shape { op: "probe_forward", detail: format!("{} input layers, probe reads {want}", input.layers.len()) });
        }
        let (n, d) = input.layers[0].shape();
        if d != self.input_dim || input.layers.iter().any(|l| l.shape() != (n, d)) {
            return Err(TensorError::Shape {
                op: "probe_forward",
                detail: format!("input width {d}, probe expects {}", self.input_dim),
            });
        }
        let in_range = |i: usize| i < n;
        let ok = match &input.targets {
            Targets::Tokens(t) => !self.config.pairwise && t.iter().all(|&i| in_range(i)),
            Targets::Pairs(p) => self.config.pairwise && p.iter().all(|&(a, b)| in_range(a) && in_range(b)),
        };
        if !ok {
            return Err(TensorError::Invalid { op: "probe_forward", detail: "targets do not match the probe or rows".into() });
        }
        if self.config.arch.is_recurrent() {
            let covered: usize = input.segments.iter().map(|s| s.1).sum();
            if covered != n || input.segments.iter().any(|&(s, l)| s + l > n) {
                return Err(TensorError::Invalid { op: "probe_forward", detail: "segments must tile all token rows".into() });
            }
        }
        Ok(n)
    }

    /// Outputs one row per target: `k` logits, or a single regression value.
    pub fn forward(&self, input: &ProbeInput<T>) -> Result<(Tensor2D<T>, ProbeCache<T>), TensorError> {
        self.check_input(input)?;
        let mixed = match &self.params.mix {
            Some(mix) => scalar_mix(&input.layers.iter().collect::<Vec<_>>(), mix)?,
            None => input.layers[0].clone(),
        };
        let mut cache = ProbeCache {
            mixed,
            layout: None,
            lstm: None,
            bilstm: Vec::new(),
            encoded: Tensor2D::zeros(0, 0),
            pair_parts: None,
            features: Tensor2D::zeros(0, 0),
            hidden_pre: None,
            hidden_act: None,
        };
        cache.encoded = match &self.params.encoder {
            Encoder::None => cache.mixed.clone(),
            Encoder::Lstm(p) => {
                let layout = SeqLayout::new(&input.segments);
                let (h, trace) = p.forward_tokens(&layout, &cache.mixed, false)?;
                cache.lstm = Some(trace);
                cache.layout = Some(layout);
                h
            }
            Encoder::BiLstm(layers) => {
                let layout = SeqLayout::new(&input.segments);
                let mut x = cache.mixed.clone();
                for [f, b] in layers {
                    let (hf, tf) = f.forward_tokens(&layout, &x, false)?;
                    let (hb, tb) = b.forward_tokens(&layout, &x, true)?;
                    let next = Tensor2D::hstack(&[&hf, &hb])?;
                    cache.bilstm.push((x, tf, tb));
                    x = next;
                }
                cache.layout = Some(layout);
                x
            }
        };
        cache.features = match &input.targets {
            Targets::Tokens(idx) => cache.encoded.gather_rows(idx),
            Targets::Pairs(pairs) => {
                let a = cache.encoded.gather_rows(&pairs.iter().map(|p| p.0).collect::<Vec<_>>());
                let b = cache.encoded.gather_rows(&pairs.iter().map(|p| p.1).collect::<Vec<_>>());
                let prod = Tensor2D::from_vec(
                    a.rows(),
                    a.cols(),
                    a.data().iter().zip(b.data()).map(|(&x, &y)| x * y).collect(),
                )?;
                let f = Tensor2D::hstack(&[&a, &b, &prod])?;
                cache.pair_parts = Some((a, b));
                f
            }
        };
        let out = match &self.params.readout {
            Readout::Linear(l) => l.forward(&cache.features)?,
            Readout::Mlp { hidden, out } => {
                let pre = hidden.forward(&cache.features)?;
                let act = relu(&pre);
                let o = out.forward(&act)?;
                cache.hidden_pre = Some(pre);
                cache.hidden_act = Some(act);
                o
            }
        };
        out.check_finite("probe_forward")?;
        Ok((out, cache))
    }

    /// Accumulates `∂L/∂θ` into `grad` given `∂L/∂output`.
    pub fn backward(
        &self,
        input: &ProbeInput<T>,
        cache: &ProbeCache<T>,
        dout: &Tensor2D<T>,
        grad: &mut ProbeParams<T>,
    ) -> Result<(), TensorError> {
        let dfeat = match (&self.params.readout, &mut grad.readout) {
            (Readout::Linear(l), Readout::Linear(g)) => l.backward(&cache.features, dout, g)?,
            (Readout::Mlp { hidden, out }, Readout::Mlp { hidden: gh, out: go }) => {
                let act = cache.hidden_act.as_ref().expect("mlp cache");
                let pre = cache.hidden_pre.as_ref().expect("mlp cache");
                let dact = out.backward(act, dout, go)?;
                let dpre = relu_backward(pre, &dact)?;
                hidden.backward(&cache.features, &dpre, gh)?
            }
            _ => return Err(TensorError::Invalid { op: "probe_backward", detail: "gradient structure differs".into() }),
        };

        let (n, enc_dim) = cache.encoded.shape();
        let mut denc = Tensor2D::zeros(n, enc_dim);
        match &input.targets {
            Targets::Tokens(idx) => {
                for (r, &i) in idx.iter().enumerate() {
                    for (a, &g) in denc.row_mut(i).iter_mut().zip(dfeat.row(r)) {
                        *a += g;
                    }
                }
            }
            Targets::Pairs(pairs) => {
                let (a, b) = cache.pair_parts.as_ref().expect("pair cache");
                for (r, &(i, j)) in pairs.iter().enumerate() {
                    let g = dfeat.row(r);
                    let (ga, rest) = g.split_at(enc_dim);
                    let (gb, gp) = rest.split_at(enc_dim);
                    let (ar, br) = (a.row(r), b.row(r));
                    for c in 0..enc_dim {
                        let di = ga[c] + gp[c] * br[c];
                        let dj = gb[c] + gp[c] * ar[c];
                        denc.row_mut(i)[c] += di;
                        denc.row_mut(j)[c] += dj;
                    }
                }
            }
        }

        let need_input_grad = self.params.mix.is_some();
        let dmixed = match (&self.params.encoder, &mut grad.encoder) {
            (Encoder::None, Encoder::None) => denc,
            (Encoder::Lstm(p), Encoder::Lstm(g)) => {
                let layout = cache.layout.as_ref().expect("layout");
                p.backward_tokens(layout, cache.lstm.as_ref().expect("trace"), &denc, false, g)?
            }
            (Encoder::BiLstm(layers), Encoder::BiLstm(glayers)) => {
                let layout = cache.layout.as_ref().expect("layout");
                let mut d = denc;
                for (l, ([f, b], [gf, gb])) in layers.iter().zip(glayers.iter_mut()).enumerate().rev() {
                    let (_, tf, tb) = &cache.bilstm[l];
                    let h = f.hidden_dim();
                    let dxf = f.backward_tokens(layout, tf, &d.slice_cols(0, h), false, gf)?;
                    let dxb = b.backward_tokens(layout, tb, &d.slice_cols(h, h), true, gb)?;
                    d = dxf;
                    d.add_assign(&dxb)?;
                    if l == 0 && !need_input_grad {
                        break;
                    }
                }
                d
            }
            _ => return Err(TensorError::Invalid { op: "probe_backward", detail: "gradient structure differs".into() }),
        };

        if let (Some(mix), Some(gmix)) = (&self.params.mix, &mut grad.mix) {
            let g = scalar_mix_backward(&input.layers.iter().collect::<Vec<_>>(), mix, &dmixed)?;
            for (a, b) in gmix.s.iter_mut().zip(g.ds) {
                *a += b;
            }
            gmix.gamma += g.dgamma;
        }
        Ok(())
    }

    pub fn cast<U: Scalar>(&self) -> ProbeModel<U> {
        let mut out = ProbeModel::<U> {
            config: self.config,
            input_dim: self.input_dim,
            params: ProbeParams {
                mix: self.params.mix.as_ref().map(|m| ScalarMixParams {
                    s: m.s.iter().map(|&v| U::of(v.as_f64())).collect(),
                    gamma: U::of(m.gamma.as_f64()),
                }),
                encoder: match &self.params.encoder {
                    Encoder::None => Encoder::None,
                    Encoder::Lstm(p) => Encoder::Lstm(p.cast()),
                    Encoder::BiLstm(l) => Encoder::BiLstm(l.iter().map(|[f, b]| [f.cast(), b.cast()]).collect()),
                },
                readout: match &self.params.readout {
                    Readout::Linear(l) => Readout::Linear(l.cast()),
                    Readout::Mlp { hidden, out } => Readout::Mlp { hidden: hidden.cast(), out: out.cast() },
                },
            },
        };
        out.config = self.config;
        out
    }

    pub fn head(&self) -> Head {
        self.config.head
    }
}
