//! Probing harness for frozen contextual word representations.
//!
//! The pipeline: corpora are parsed and compiled into probing datasets
//! ([`ingest`]), per-layer token vectors are read from CWRS stores
//! ([`reprstore`]), probes are trained per layer ([`probes`], [`trainer`]) and
//! scored ([`metrics`]), and results are emitted as tables and heatmaps
//! ([`report`]). [`bilmprobe`] retrains language-model softmaxes over frozen
//! layers, and [`minictx`] is a small trainable contextualizer for
//! pretraining-transfer experiments.
//!
//! Numeric code is generic over [`Scalar`]; the aliases below fix the
//! precision used in practice.

pub mod bilmprobe;
pub mod checkpoint;
pub mod ingest;
pub mod metrics;
pub mod minictx;
pub mod probes;
pub mod report;
pub mod reprstore;
pub mod scalar;
pub mod tensorcore;
pub mod trainer;

pub use scalar::Scalar;

/// Training precision.
pub type Tensor = tensorcore::Tensor2D<f32>;
/// Gradient-check precision.
pub type Tensor64 = tensorcore::Tensor2D<f64>;
pub type ProbeModel = probes::ProbeModel<f32>;
pub type ProbeModel64 = probes::ProbeModel<f64>;
pub type Contextualizer = minictx::Contextualizer<f32>;
pub type Contextualizer64 = minictx::Contextualizer<f64>;
pub type AdamState = tensorcore::AdamState<f32>;
pub type ScalarMix = tensorcore::ScalarMixParams<f32>;
