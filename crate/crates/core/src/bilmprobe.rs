//! Language modelling as a probe: next- and previous-token softmax heads
//! retrained over one frozen layer, scored by perplexity.

use std::collections::HashMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::metrics::{perplexity_from_nlls, MetricError};
use crate::reprstore::{ReprStore, StoreError};
use crate::tensorcore::{log_softmax_rows, seeded_rng, softmax_xent, AdamConfig, AdamState, Linear, ParamSet, Tensor2D, TensorError};
use crate::trainer::{EarlyStopping, TrainConfig, TrainError};

pub const UNK: &str = "<unk>";
pub const DEFAULT_VOCAB_SIZE: usize = 10_000;

#[derive(Debug, thiserror::Error)]
pub enum BilmError {
    #[error("need at least 2 sentences to split, got {0}")]
    TooFewSentences(usize),
    #[error("sentence {sent}: corpus has {corpus} tokens, store has {store}")]
    Alignment { sent: usize, corpus: usize, store: usize },
    #[error("no evaluation pairs")]
    EmptyEval,
    #[error("no training pairs")]
    EmptyTrain,
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

/// Train-frequency-ordered vocabulary; id 0 is [`UNK`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(from = "Vec<String>", into = "Vec<String>")]
pub struct LmVocab {
    tokens: Vec<String>,
    index: HashMap<String, usize>,
}

impl From<Vec<String>> for LmVocab {
    fn from(tokens: Vec<String>) -> Self {
        Self::from_tokens(tokens)
    }
}

impl From<LmVocab> for Vec<String> {
    fn from(v: LmVocab) -> Self {
        v.tokens
    }
}

impl LmVocab {
    /// Most frequent types first (ties by token string), at most `max_size`
    /// entries including UNK.
    pub fn build<'a>(sentences: impl IntoIterator<Item = &'a [String]>, max_size: usize) -> Self {
        let mut counts: HashMap<&str, usize> = HashMap::new();
        for s in sentences {
            for t in s {
                if t != UNK {
                    *counts.entry(t.as_str()).or_default() += 1;
                }
            }
        }
        let mut types: Vec<(&str, usize)> = counts.into_iter().collect();
        types.sort_by(|a, b| b.1.cmp(&a.1).then(a.0.cmp(b.0)));
        let keep = max_size.max(1) - 1;
        let tokens: Vec<String> =
            std::iter::once(UNK.to_string()).chain(types.into_iter().take(keep).map(|(t, _)| t.to_string())).collect();
        Self::from_tokens(tokens)
    }

    fn from_tokens(tokens: Vec<String>) -> Self {
        let index = tokens.iter().enumerate().map(|(i, t)| (t.clone(), i)).collect();
        Self { tokens, index }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    pub fn id(&self, token: &str) -> usize {
        self.index.get(token).copied().unwrap_or(0)
    }

    pub fn token(&self, id: usize) -> &str {
        &self.tokens[id]
    }

    pub fn tokens(&self) -> &[String] {
        &self.tokens
    }
}

/// Seeded sentence-level 80/20 split; returns sorted `(train, eval)` ids.
pub fn split_corpus(num_sentences: usize, seed: u64) -> Result<(Vec<usize>, Vec<usize>), BilmError> {
    if num_sentences < 2 {
        return Err(BilmError::TooFewSentences(num_sentences));
    }
    let mut ids: Vec<usize> = (0..num_sentences).collect();
    ids.shuffle(&mut seeded_rng(seed));
    let n_train = num_sentences * 4 / 5;
    let mut eval = ids.split_off(n_train);
    ids.sort_unstable();
    eval.sort_unstable();
    Ok((ids, eval))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Direction {
    /// position t predicts token t+1
    Forward,
    /// position t predicts token t−1
    Backward,
}

/// Feature rows and target ids for one direction over a set of sentences.
struct Pairs {
    x: Tensor2D<f32>,
    y: Vec<usize>,
}

fn check_alignment(store: &ReprStore, corpus: &[Vec<String>], sents: &[usize]) -> Result<(), BilmError> {
    let counts = store.token_counts();
    for &s in sents {
        let store_len = counts.get(s).copied().unwrap_or(0);
        let corpus_len = corpus.get(s).map_or(0, Vec::len);
        if s >= counts.len() || s >= corpus.len() || store_len != corpus_len {
            return Err(BilmError::Alignment { sent: s, corpus: corpus_len, store: store_len });
        }
    }
    Ok(())
}

fn pairs(
    store: &ReprStore,
    layer: usize,
    corpus: &[Vec<String>],
    sents: &[usize],
    vocab: &LmVocab,
    dir: Direction,
) -> Result<Pairs, BilmError> {
    let d = store.dim();
    let mut data = Vec::new();
    let mut y = Vec::new();
    for &s in sents {
        let toks = &corpus[s];
        if toks.len() < 2 {
            continue;
        }
        let h = store.get_layer(s, layer)?;
        for t in 0..toks.len() {
            let target = match dir {
                Direction::Forward if t + 1 < toks.len() => t + 1,
                Direction::Backward if t > 0 => t - 1,
                _ => continue,
            };
            data.extend_from_slice(h.row(t));
            y.push(vocab.id(&toks[target]));
        }
    }
    Ok(Pairs { x: Tensor2D::from_vec(y.len(), d, data)?, y })
}

fn nlls(head: &Linear<f32>, p: &Pairs) -> Result<Vec<f64>, BilmError> {
    let mut out = Vec::with_capacity(p.y.len());
    for start in (0..p.y.len()).step_by(1024) {
        let n = (p.y.len() - start).min(1024);
        let logp = log_softmax_rows(&head.forward(&p.x.slice_rows(start, n))?);
        out.extend(p.y[start..start + n].iter().enumerate().map(|(r, &g)| -(logp.get(r, g) as f64)));
    }
    Ok(out)
}

fn train_head(train: &Pairs, dev: &Pairs, v: usize, cfg: &TrainConfig, seed: u64) -> Result<(Linear<f32>, usize), BilmError> {
    if train.y.is_empty() {
        return Err(BilmError::EmptyTrain);
    }
    let mut head = Linear::<f32>::new(&mut seeded_rng(seed), train.x.cols(), v);
    let mut adam = AdamState::new(&head.slices(), AdamConfig::default());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = head.clone();
    let mut order: Vec<usize> = (0..train.y.len()).collect();
    let mut rng = seeded_rng(seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        for batch in order.chunks(cfg.batch_size) {
            let x = train.x.gather_rows(batch);
            let gold: Vec<usize> = batch.iter().map(|&i| train.y[i]).collect();
            let (loss, dy) = softmax_xent(&head.forward(&x)?, &gold)?;
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch }.into());
            }
            let mut grad = head.zeros_like();
            head.backward(&x, &dy, &mut grad)?;
            adam.update(head.slices_mut(), &grad.slices(), cfg.lr)?;
        }
        let dev_ppl = perplexity_from_nlls(&nlls(&head, dev)?)?;
        log::debug!("lm head epoch {epoch}: dev ppl {dev_ppl:.4}");
        let (improved, stop) = stopper.observe(epoch, -dev_ppl);
        if improved {
            best = head.clone();
        }
        if stop {
            break;
        }
    }
    Ok((best, stopper.best_epoch()))
}

#[derive(Debug, Clone, PartialEq)]
pub struct BilmHeads {
    pub layer: usize,
    pub forward: Linear<f32>,
    pub backward: Linear<f32>,
    pub best_epochs: (usize, usize),
}

/// Trains independent forward and backward heads on `train` sentences, with
/// early stopping on a seeded 10% of them.
pub fn train_lm_heads(
    store: &ReprStore,
    layer: usize,
    corpus: &[Vec<String>],
    train: &[usize],
    vocab: &LmVocab,
    cfg: &TrainConfig,
) -> Result<BilmHeads, BilmError> {
    cfg.validate()?;
    check_alignment(store, corpus, train)?;
    if layer >= store.num_layers() {
        return Err(TrainError::Dimension(format!("layer {layer} of a {}-layer store", store.num_layers())).into());
    }
    let mut fit = train.to_vec();
    fit.shuffle(&mut seeded_rng(cfg.seed ^ 0xDE5));
    let n_dev = fit.len() / 10;
    let mut dev = if n_dev == 0 { fit.clone() } else { fit.split_off(fit.len() - n_dev) };
    fit.sort_unstable();
    dev.sort_unstable();
    let mut heads = Vec::new();
    for (k, dir) in [Direction::Forward, Direction::Backward].into_iter().enumerate() {
        let tr = pairs(store, layer, corpus, &fit, vocab, dir)?;
        let dv = pairs(store, layer, corpus, &dev, vocab, dir)?;
        let dv = if dv.y.is_empty() { pairs(store, layer, corpus, &fit, vocab, dir)? } else { dv };
        heads.push(train_head(&tr, &dv, vocab.len(), cfg, cfg.seed ^ (k as u64 + 1))?);
    }
    let (backward, be) = heads.pop().unwrap();
    let (forward, fe) = heads.pop().unwrap();
    Ok(BilmHeads { layer, forward, backward, best_epochs: (fe, be) })
}

/// Mean of the forward and backward perplexities.
pub fn average_perplexity(forward: f64, backward: f64) -> f64 {
    (forward + backward) / 2.0
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilmEval {
    pub fwd_ppl: f64,
    pub bwd_ppl: f64,
    pub avg_ppl: f64,
    pub fwd_nlls: Vec<f64>,
    pub bwd_nlls: Vec<f64>,
    /// Share of eval tokens mapped to UNK.
    pub oov_rate: f64,
}

pub fn eval_bilm(
    heads: &BilmHeads,
    store: &ReprStore,
    corpus: &[Vec<String>],
    eval: &[usize],
    vocab: &LmVocab,
) -> Result<BilmEval, BilmError> {
    check_alignment(store, corpus, eval)?;
    let f = pairs(store, heads.layer, corpus, eval, vocab, Direction::Forward)?;
    let b = pairs(store, heads.layer, corpus, eval, vocab, Direction::Backward)?;
    if f.y.is_empty() {
        return Err(BilmError::EmptyEval);
    }
    let fwd_nlls = nlls(&heads.forward, &f)?;
    let bwd_nlls = nlls(&heads.backward, &b)?;
    let fwd_ppl = perplexity_from_nlls(&fwd_nlls)?;
    let bwd_ppl = perplexity_from_nlls(&bwd_nlls)?;
    let total: usize = eval.iter().map(|&s| corpus[s].len()).sum();
    let unk: usize = eval.iter().flat_map(|&s| &corpus[s]).filter(|t| vocab.id(t) == 0).count();
    Ok(BilmEval {
        fwd_ppl,
        bwd_ppl,
        avg_ppl: average_perplexity(fwd_ppl, bwd_ppl),
        fwd_nlls,
        bwd_nlls,
        oov_rate: if total == 0 { 0.0 } else { unk as f64 / total as f64 },
    })
}

/// One row of the per-layer perplexity curve.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilmLayerReport {
    pub layer: usize,
    pub fwd_ppl: f64,
    pub bwd_ppl: f64,
    pub avg_ppl: f64,
    #[serde(rename = "V")]
    pub vocab_size: usize,
    pub oov_rate: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BilmReport {
    pub representation: String,
    pub seed: u64,
    /// Out-of-vocabulary tokens are scored as the ordinary UNK class.
    pub unk_note: String,
    pub layers: Vec<BilmLayerReport>,
}

/// Splits the corpus 80/20, builds the vocabulary on the train part and
/// probes every store layer.
pub fn bilm_probe(
    store: &ReprStore,
    corpus: &[Vec<String>],
    vocab_size: usize,
    cfg: &TrainConfig,
) -> Result<BilmReport, BilmError> {
    let (train, eval) = split_corpus(corpus.len(), cfg.seed)?;
    check_alignment(store, corpus, &(0..corpus.len()).collect::<Vec<_>>())?;
    let vocab = LmVocab::build(train.iter().map(|&s| corpus[s].as_slice()), vocab_size);
    let mut layers = Vec::new();
    for layer in 0..store.num_layers() {
        let heads = train_lm_heads(store, layer, corpus, &train, &vocab, &TrainConfig { seed: cfg.seed ^ layer as u64, ..*cfg })?;
        let e = eval_bilm(&heads, store, corpus, &eval, &vocab)?;
        layers.push(BilmLayerReport {
            layer,
            fwd_ppl: e.fwd_ppl,
            bwd_ppl: e.bwd_ppl,
            avg_ppl: e.avg_ppl,
            vocab_size: vocab.len(),
            oov_rate: e.oov_rate,
        });
    }
    Ok(BilmReport {
        representation: store.header().model_name.clone(),
        seed: cfg.seed,
        unk_note: "out-of-vocabulary tokens are evaluated as the UNK class".into(),
        layers,
    })
}
