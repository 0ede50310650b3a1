//! Probe architectures over frozen representations.
//!
//! A probe reads one stored layer (or a learned scalar mix of all layers),
//! optionally contextualizes whole sentences with a task-trained recurrent
//! encoder, gathers the target tokens (or `[w1, w2, w1⊙w2]` pair features)
//! and classifies or regresses them.

mod model;

pub use model::{ProbeCache, ProbeInput, ProbeModel, ProbeParams, Readout, Targets, Encoder};

use serde::{Deserialize, Serialize};

use crate::tensorcore::{LstmParams, TensorError};
use crate::Scalar;

pub const MLP_HIDDEN: usize = 1024;
pub const LSTM_HIDDEN: usize = 200;
pub const BILSTM_HIDDEN: usize = 512;
pub const BILSTM_LAYERS: usize = 2;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Arch {
    Linear,
    Mlp1024,
    Lstm200Linear,
    Bilstm512Mlp1024,
}

impl Arch {
    pub fn is_recurrent(self) -> bool {
        matches!(self, Arch::Lstm200Linear | Arch::Bilstm512Mlp1024)
    }

    pub fn name(self) -> &'static str {
        match self {
            Arch::Linear => "linear",
            Arch::Mlp1024 => "mlp1024",
            Arch::Lstm200Linear => "lstm200_linear",
            Arch::Bilstm512Mlp1024 => "bilstm512_mlp1024",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        [Arch::Linear, Arch::Mlp1024, Arch::Lstm200Linear, Arch::Bilstm512Mlp1024]
            .into_iter()
            .find(|a| a.name() == s || (s == "mlp" && *a == Arch::Mlp1024) || (s == "lstm" && *a == Arch::Lstm200Linear))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InputSource {
    Layer(usize),
    /// Learned softmax mix over this many layers.
    ScalarMix(usize),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Head {
    Classify(usize),
    Regress,
}

impl Head {
    pub fn output_dim(self) -> usize {
        match self {
            Head::Classify(k) => k,
            Head::Regress => 1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ProbeConfig {
    pub arch: Arch,
    pub input: InputSource,
    pub head: Head,
    /// Targets are token pairs fed as `[w1, w2, w1⊙w2]`.
    pub pairwise: bool,
}

impl ProbeConfig {
    pub fn new(arch: Arch, input: InputSource, head: Head) -> Self {
        Self { arch, input, head, pairwise: false }
    }

    pub fn pairwise(mut self, pairwise: bool) -> Self {
        self.pairwise = pairwise;
        self
    }

    pub fn validate(&self) -> Result<(), TensorError> {
        let bad = |detail: String| Err(TensorError::Invalid { op: "probe_config", detail });
        if self.pairwise && self.arch.is_recurrent() {
            return bad(format!("{} cannot probe token pairs", self.arch.name()));
        }
        if let Head::Classify(k) = self.head {
            if k < 2 {
                return bad(format!("classification needs at least 2 classes, got {k}"));
            }
        }
        if let InputSource::ScalarMix(0) = self.input {
            return bad("scalar mix over zero layers".into());
        }
        Ok(())
    }

    /// Width of the vector the readout sees for one target.
    pub fn feature_dim(&self, d: usize) -> usize {
        let enc = match self.arch {
            Arch::Linear | Arch::Mlp1024 => d,
            Arch::Lstm200Linear => LSTM_HIDDEN,
            Arch::Bilstm512Mlp1024 => 2 * BILSTM_HIDDEN,
        };
        if self.pairwise {
            3 * enc
        } else {
            enc
        }
    }
}

/// `[w1, w2, w1 ⊙ w2]`
pub fn build_pairwise_features<T: Scalar>(w1: &[T], w2: &[T]) -> Result<Vec<T>, TensorError> {
    if w1.len() != w2.len() {
        return Err(TensorError::Shape {
            op: "build_pairwise_features",
            detail: format!("{} vs {}", w1.len(), w2.len()),
        });
    }
    let mut out = Vec::with_capacity(3 * w1.len());
    out.extend_from_slice(w1);
    out.extend_from_slice(w2);
    out.extend(w1.iter().zip(w2).map(|(&a, &b)| a * b));
    Ok(out)
}

/// Exact trainable-parameter count for a probe over `d`-dimensional inputs
/// with `k` outputs (`k` is ignored for regression heads).
pub fn count_parameters(config: &ProbeConfig, d: usize, k: usize) -> usize {
    let out = match config.head {
        Head::Classify(_) => k,
        Head::Regress => 1,
    };
    let linear = |i: usize, o: usize| i * o + o;
    let f = config.feature_dim(d);
    let body = match config.arch {
        Arch::Linear => linear(f, out),
        Arch::Mlp1024 => linear(f, MLP_HIDDEN) + linear(MLP_HIDDEN, out),
        Arch::Lstm200Linear => LstmParams::<f32>::count(d, LSTM_HIDDEN) + linear(f, out),
        Arch::Bilstm512Mlp1024 => {
            let first = 2 * LstmParams::<f32>::count(d, BILSTM_HIDDEN);
            let rest = (BILSTM_LAYERS - 1) * 2 * LstmParams::<f32>::count(2 * BILSTM_HIDDEN, BILSTM_HIDDEN);
            first + rest + linear(f, MLP_HIDDEN) + linear(MLP_HIDDEN, out)
        }
    };
    let mix = match config.input {
        InputSource::ScalarMix(l) => l + 1,
        InputSource::Layer(_) => 0,
    };
    body + mix
}
