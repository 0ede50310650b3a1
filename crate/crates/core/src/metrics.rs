//! Task metrics on a 0–100 scale (perplexity excepted).

use std::collections::{BTreeMap, HashSet};

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error, Clone, PartialEq)]
pub enum MetricError {
    #[error("no instances to score")]
    Empty,
    #[error("length mismatch: {0}")]
    Length(String),
    #[error("zero variance in {0}; Pearson r is undefined")]
    ZeroVariance(&'static str),
    #[error("non-finite input: {0}")]
    NonFinite(String),
    #[error("metric {metric} cannot score a {kind} dataset")]
    Unsupported { metric: String, kind: String },
}

/// Which primary metric a task reports.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case")]
pub enum Metric {
    Accuracy,
    SpanF1,
    /// Token-level Fβ over the `positive` label.
    FBeta { beta: f64, positive: String },
    Pearson,
}

impl Metric {
    pub fn name(&self) -> String {
        match self {
            Metric::Accuracy => "accuracy".into(),
            Metric::SpanF1 => "span_f1".into(),
            Metric::FBeta { beta, .. } => format!("f{beta}"),
            Metric::Pearson => "pearson_r".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricReport {
    pub metric_name: String,
    pub value: f64,
    pub n: usize,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub breakdown: Option<BTreeMap<String, f64>>,
}

impl MetricReport {
    fn new(metric_name: &str, value: f64, n: usize) -> Self {
        Self { metric_name: metric_name.into(), value, n, breakdown: None }
    }
}

/// `100 · correct / n`.
pub fn accuracy<L: PartialEq>(preds: &[L], golds: &[L]) -> Result<MetricReport, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::Length(format!("{} predictions vs {} golds", preds.len(), golds.len())));
    }
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let correct = preds.iter().zip(golds).filter(|(p, g)| p == g).count();
    Ok(MetricReport::new("accuracy", 100.0 * correct as f64 / preds.len() as f64, preds.len()))
}

/// A labelled span `[start, end)` within one sentence.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Span {
    pub label: String,
    pub start: usize,
    pub end: usize,
}

fn split_tag(tag: &str) -> (char, &str) {
    if tag == "O" || tag.is_empty() {
        return ('O', "");
    }
    match tag.split_once('-') {
        Some((p, ty)) if p == "B" || p == "I" => (p.chars().next().unwrap(), ty),
        // bare labels (IO tagging) behave like I-
        _ => ('I', tag),
    }
}

/// Decodes spans with the usual shared-task repair: an `I-X` that follows
/// `O` or a different type opens a new span.
pub fn bio_spans<S: AsRef<str>>(tags: &[S]) -> Vec<Span> {
    let mut spans = Vec::new();
    let mut open: Option<(String, usize)> = None;
    for (i, tag) in tags.iter().enumerate() {
        let (prefix, ty) = split_tag(tag.as_ref());
        let continues = prefix == 'I' && open.as_ref().is_some_and(|(t, _)| t == ty);
        if continues {
            continue;
        }
        if let Some((label, start)) = open.take() {
            spans.push(Span { label, start, end: i });
        }
        if prefix != 'O' {
            open = Some((ty.to_string(), i));
        }
    }
    if let Some((label, start)) = open {
        spans.push(Span { label, start, end: tags.len() });
    }
    spans
}

/// Exact-match span F1 over a corpus of sentences.
///
/// Both sides empty scores 100; exactly one side empty scores 0.
pub fn span_f1<S: AsRef<str>>(preds: &[Vec<S>], golds: &[Vec<S>]) -> Result<MetricReport, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::Length(format!("{} predicted vs {} gold sentences", preds.len(), golds.len())));
    }
    let (mut n_pred, mut n_gold, mut n_match, mut n_tok) = (0usize, 0usize, 0usize, 0usize);
    for (i, (p, g)) in preds.iter().zip(golds).enumerate() {
        if p.len() != g.len() {
            return Err(MetricError::Length(format!("sentence {i}: {} vs {} tags", p.len(), g.len())));
        }
        n_tok += p.len();
        let ps: HashSet<Span> = bio_spans(p).into_iter().collect();
        let gs: HashSet<Span> = bio_spans(g).into_iter().collect();
        n_pred += ps.len();
        n_gold += gs.len();
        n_match += ps.intersection(&gs).count();
    }
    let value = if n_pred == 0 && n_gold == 0 {
        100.0
    } else if n_pred == 0 || n_gold == 0 || n_match == 0 {
        0.0
    } else {
        let p = n_match as f64 / n_pred as f64;
        let r = n_match as f64 / n_gold as f64;
        100.0 * 2.0 * p * r / (p + r)
    };
    let mut rep = MetricReport::new("span_f1", value, n_tok);
    rep.breakdown = Some(BTreeMap::from([
        ("pred_spans".to_string(), n_pred as f64),
        ("gold_spans".to_string(), n_gold as f64),
        ("matched_spans".to_string(), n_match as f64),
    ]));
    Ok(rep)
}

/// Fβ over the positive class: `(1+β²)PR / (β²P + R)`.
pub fn f_beta_tokens(preds: &[bool], golds: &[bool], beta: f64) -> Result<MetricReport, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::Length(format!("{} predictions vs {} golds", preds.len(), golds.len())));
    }
    let tp = preds.iter().zip(golds).filter(|(&p, &g)| p && g).count() as f64;
    let fp = preds.iter().zip(golds).filter(|(&p, &g)| p && !g).count() as f64;
    let fneg = preds.iter().zip(golds).filter(|(&p, &g)| !p && g).count() as f64;
    let value = if tp + fp == 0.0 && tp + fneg == 0.0 {
        100.0
    } else if tp == 0.0 {
        0.0
    } else {
        let p = tp / (tp + fp);
        let r = tp / (tp + fneg);
        let b2 = beta * beta;
        100.0 * (1.0 + b2) * p * r / (b2 * p + r)
    };
    Ok(MetricReport::new(&format!("f{beta}"), value, preds.len()))
}

/// Pearson correlation reported as `r × 100`.
pub fn pearson_r(preds: &[f64], golds: &[f64]) -> Result<MetricReport, MetricError> {
    if preds.len() != golds.len() {
        return Err(MetricError::Length(format!("{} predictions vs {} golds", preds.len(), golds.len())));
    }
    if preds.len() < 2 {
        return Err(MetricError::Empty);
    }
    if preds.iter().chain(golds).any(|v| !v.is_finite()) {
        return Err(MetricError::NonFinite("pearson input".into()));
    }
    let n = preds.len() as f64;
    let mp = preds.iter().sum::<f64>() / n;
    let mg = golds.iter().sum::<f64>() / n;
    let (mut sxy, mut sxx, mut syy) = (0.0, 0.0, 0.0);
    for (&p, &g) in preds.iter().zip(golds) {
        let (dp, dg) = (p - mp, g - mg);
        sxy += dp * dg;
        sxx += dp * dp;
        syy += dg * dg;
    }
    if sxx == 0.0 {
        return Err(MetricError::ZeroVariance("predictions"));
    }
    if syy == 0.0 {
        return Err(MetricError::ZeroVariance("golds"));
    }
    let r = (sxy / (sxx.sqrt() * syy.sqrt())).clamp(-1.0, 1.0);
    Ok(MetricReport::new("pearson_r", 100.0 * r, preds.len()))
}

/// `exp(mean_nll)`.
pub fn perplexity(mean_nll: f64) -> f64 {
    mean_nll.exp()
}

/// Token-weighted perplexity from per-token negative log-likelihoods.
pub fn perplexity_from_nlls(nlls: &[f64]) -> Result<f64, MetricError> {
    if nlls.is_empty() {
        return Err(MetricError::Empty);
    }
    Ok(perplexity(nlls.iter().sum::<f64>() / nlls.len() as f64))
}
