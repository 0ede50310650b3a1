//! A small bidirectional LSTM contextualizer for pretrain-freeze-probe
//! experiments.
//!
//! Two separate direction stacks (forward: E→H→H, backward likewise) over
//! word embeddings. Dumped layers: 0 = `[e; e]`, 1 = `[f1; b1]`, 2 = `[f2; b2]`,
//! all `2H` wide.

use std::collections::BTreeMap;
use std::hash::{Hash, Hasher};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::bilmprobe::LmVocab;
use crate::ingest::{Gold, Target, TaskDataset, OOV_LABEL};
use crate::metrics::{perplexity, MetricError};
use crate::probes::{build_pairwise_features, Arch};
use crate::reprstore::{encode_store, ReprStore, SentenceBlock, StoreError, StoreHeader};
use crate::tensorcore::{
    log_softmax_rows, mse, seeded_rng, softmax_xent, xavier_uniform, AdamConfig, AdamState, Linear, LstmParams,
    LstmTrace, ParamSet, SeqLayout, Tensor2D, TensorError,
};
use crate::trainer::{score_predictions, sweep_layers, EarlyStopping, EpochRecord, Prediction, TrainConfig, TrainError};
use crate::Scalar;

pub const MODEL_NAME: &str = "minictx-v1";
pub const RECURRENT_LAYERS: usize = 2;
/// Stored layers: the duplicated embedding plus each recurrent layer.
pub const STORE_LAYERS: usize = RECURRENT_LAYERS + 1;

#[derive(Debug, thiserror::Error)]
pub enum CtxError {
    #[error("embedding dim {embed} must equal hidden size {hidden} for the [e; e] layer-0 convention")]
    DimMismatch { embed: usize, hidden: usize },
    #[error("invalid contextualizer setup: {0}")]
    Config(String),
    #[error(transparent)]
    Train(#[from] TrainError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtxConfig {
    pub vocab: LmVocab,
    pub embed_dim: usize,
    /// Per direction; dumped layers are `2 · hidden` wide.
    pub hidden: usize,
    pub seed: u64,
}

impl CtxConfig {
    pub fn new(vocab: LmVocab, seed: u64) -> Self {
        Self { vocab, embed_dim: 128, hidden: 128, seed }
    }

    pub fn validate(&self) -> Result<(), CtxError> {
        if self.embed_dim != self.hidden {
            return Err(CtxError::DimMismatch { embed: self.embed_dim, hidden: self.hidden });
        }
        if self.hidden == 0 || self.vocab.is_empty() {
            return Err(CtxError::Config("hidden size and vocabulary must be non-empty".into()));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CtxParams<T> {
    /// `V × E`
    pub embedding: Tensor2D<T>,
    pub forward: Vec<LstmParams<T>>,
    pub backward: Vec<LstmParams<T>>,
}

impl<T: Scalar> ParamSet<T> for CtxParams<T> {
    fn slices(&self) -> Vec<&[T]> {
        let mut v = vec![self.embedding.data()];
        v.extend(self.forward.slices());
        v.extend(self.backward.slices());
        v
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        let mut v = vec![self.embedding.data_mut()];
        v.extend(self.forward.slices_mut());
        v.extend(self.backward.slices_mut());
        v
    }

    fn zeros_like(&self) -> Self {
        Self {
            embedding: Tensor2D::zeros(self.embedding.rows(), self.embedding.cols()),
            forward: self.forward.zeros_like(),
            backward: self.backward.zeros_like(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contextualizer<T> {
    pub config: CtxConfig,
    pub params: CtxParams<T>,
}

struct CtxTrace<T> {
    ids: Vec<usize>,
    layout: SeqLayout,
    emb: Tensor2D<T>,
    fwd: Vec<(Tensor2D<T>, LstmTrace<T>)>,
    bwd: Vec<(Tensor2D<T>, LstmTrace<T>)>,
}

/// A seeded, untrained contextualizer.
pub fn init_contextualizer<T: Scalar>(config: CtxConfig) -> Result<Contextualizer<T>, CtxError> {
    config.validate()?;
    let mut rng = seeded_rng(config.seed);
    let (e, h) = (config.embed_dim, config.hidden);
    let embedding = xavier_uniform(&mut rng, config.vocab.len(), e);
    let stack = |rng: &mut _| (0..RECURRENT_LAYERS).map(|l| LstmParams::new(rng, if l == 0 { e } else { h }, h)).collect();
    let forward = stack(&mut rng);
    let backward = stack(&mut rng);
    Ok(Contextualizer { config, params: CtxParams { embedding, forward, backward } })
}

impl<T: Scalar> Contextualizer<T> {
    pub fn hidden(&self) -> usize {
        self.config.hidden
    }

    pub fn token_ids(&self, sentence: &[String]) -> Vec<usize> {
        sentence.iter().map(|t| self.config.vocab.id(t)).collect()
    }

    fn encode(&self, sentences: &[Vec<usize>]) -> Result<(Vec<Tensor2D<T>>, CtxTrace<T>), TensorError> {
        let lens: Vec<usize> = sentences.iter().map(Vec::len).collect();
        let layout = SeqLayout::contiguous(&lens);
        let ids: Vec<usize> = sentences.iter().flatten().copied().collect();
        let emb = self.params.embedding.gather_rows(&ids);
        let mut fwd = Vec::new();
        let mut bwd = Vec::new();
        let mut f_in = emb.clone();
        let mut b_in = emb.clone();
        let mut layers = vec![Tensor2D::hstack(&[&emb, &emb])?];
        for (pf, pb) in self.params.forward.iter().zip(&self.params.backward) {
            let (f, tf) = pf.forward_tokens(&layout, &f_in, false)?;
            let (b, tb) = pb.forward_tokens(&layout, &b_in, true)?;
            layers.push(Tensor2D::hstack(&[&f, &b])?);
            fwd.push((f_in, tf));
            bwd.push((b_in, tb));
            f_in = f;
            b_in = b;
        }
        Ok((layers, CtxTrace { ids, layout, emb, fwd, bwd }))
    }

    /// Gradients of the top forward and backward outputs into `grad`.
    fn backward(
        &self,
        trace: &CtxTrace<T>,
        d_top_f: Tensor2D<T>,
        d_top_b: Tensor2D<T>,
        grad: &mut CtxParams<T>,
    ) -> Result<(), TensorError> {
        let mut df = d_top_f;
        let mut db = d_top_b;
        for l in (0..RECURRENT_LAYERS).rev() {
            df = self.params.forward[l].backward_tokens(&trace.layout, &trace.fwd[l].1, &df, false, &mut grad.forward[l])?;
            db = self.params.backward[l].backward_tokens(&trace.layout, &trace.bwd[l].1, &db, true, &mut grad.backward[l])?;
        }
        df.add_assign(&db)?;
        debug_assert_eq!(df.rows(), trace.emb.rows());
        for (r, &id) in trace.ids.iter().enumerate() {
            for (g, &v) in grad.embedding.row_mut(id).iter_mut().zip(df.row(r)) {
                *g += v;
            }
        }
        Ok(())
    }

    /// The three stored layers for each sentence (`T × 2H` each).
    pub fn represent(&self, sentences: &[Vec<String>]) -> Result<Vec<Vec<Tensor2D<T>>>, CtxError> {
        let mut out = Vec::with_capacity(sentences.len());
        for chunk in sentences.chunks(64) {
            let ids: Vec<Vec<usize>> = chunk.iter().map(|s| self.token_ids(s)).collect();
            let (layers, _) = self.encode(&ids)?;
            let mut off = 0;
            for s in &ids {
                out.push(layers.iter().map(|m| m.slice_rows(off, s.len())).collect());
                off += s.len();
            }
        }
        Ok(out)
    }

    /// Order-sensitive hash of every parameter bit pattern.
    pub fn checksum(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        for s in self.params.slices() {
            s.len().hash(&mut h);
            for v in s {
                v.as_f64().to_bits().hash(&mut h);
            }
        }
        h.finish()
    }
}

/// Encodes every sentence with the frozen contextualizer into CWRS bytes.
pub fn freeze_and_dump(ctx: &Contextualizer<f32>, sentences: &[Vec<String>]) -> Result<Vec<u8>, CtxError> {
    if sentences.iter().any(Vec::is_empty) {
        return Err(CtxError::Config("cannot dump an empty sentence".into()));
    }
    let blocks: Vec<SentenceBlock> =
        ctx.represent(sentences)?.iter().map(|l| SentenceBlock::from_layers(l)).collect::<Result<_, _>>()?;
    let header = StoreHeader::new(MODEL_NAME, STORE_LAYERS, 2 * ctx.hidden(), sentences.len());
    Ok(encode_store(&header, &blocks)?)
}

pub fn dump_store(ctx: &Contextualizer<f32>, sentences: &[Vec<String>]) -> Result<ReprStore, CtxError> {
    Ok(ReprStore::from_bytes(freeze_and_dump(ctx, sentences)?)?)
}

#[derive(Debug, Clone, PartialEq)]
pub enum Objective {
    /// Next-token prediction from the top forward layer and previous-token
    /// prediction from the top backward layer.
    Bilm { corpus: Vec<Vec<String>> },
    /// A task head over the top layer `[f2; b2]`; pairwise tasks use
    /// `[w1, w2, w1⊙w2]` features.
    Supervised { dataset: TaskDataset },
}

#[derive(Debug, Clone, PartialEq)]
pub struct PretrainSpec {
    pub name: String,
    pub objective: Objective,
    pub train: TrainConfig,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct PretrainLog {
    pub spec: String,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    /// Training-split score of the kept parameters: perplexity for the BiLM
    /// objective, the task metric otherwise.
    pub train_score: Option<f64>,
}

#[derive(Debug, Clone)]
enum Head<T> {
    Bilm { fwd: Linear<T>, bwd: Linear<T> },
    Task { linear: Linear<T>, pairwise: bool, regress: bool },
}

impl<T: Scalar> ParamSet<T> for Head<T> {
    fn slices(&self) -> Vec<&[T]> {
        match self {
            Head::Bilm { fwd, bwd } => fwd.slices().into_iter().chain(bwd.slices()).collect(),
            Head::Task { linear, .. } => linear.slices(),
        }
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        match self {
            Head::Bilm { fwd, bwd } => fwd.slices_mut().into_iter().chain(bwd.slices_mut()).collect(),
            Head::Task { linear, .. } => linear.slices_mut(),
        }
    }

    fn zeros_like(&self) -> Self {
        match self {
            Head::Bilm { fwd, bwd } => Head::Bilm { fwd: fwd.zeros_like(), bwd: bwd.zeros_like() },
            Head::Task { linear, pairwise, regress } => {
                Head::Task { linear: linear.zeros_like(), pairwise: *pairwise, regress: *regress }
            }
        }
    }
}

#[derive(Debug, Clone)]
struct Both<T> {
    ctx: CtxParams<T>,
    head: Head<T>,
}

impl<T: Scalar> ParamSet<T> for Both<T> {
    fn slices(&self) -> Vec<&[T]> {
        self.ctx.slices().into_iter().chain(self.head.slices()).collect()
    }

    fn slices_mut(&mut self) -> Vec<&mut [T]> {
        self.ctx.slices_mut().into_iter().chain(self.head.slices_mut()).collect()
    }

    fn zeros_like(&self) -> Self {
        Self { ctx: self.ctx.zeros_like(), head: self.head.zeros_like() }
    }
}

/// One training sentence: token ids plus its supervised instances.
#[derive(Debug, Clone)]
struct Unit {
    sent: usize,
    ids: Vec<usize>,
    /// (target, class id or OOV, gold)
    items: Vec<(Target, usize, Gold)>,
}

struct Task<'a> {
    dataset: Option<&'a TaskDataset>,
    train: Vec<Unit>,
    dev: Vec<Unit>,
}

fn units_for(ctx: &Contextualizer<f32>, dataset: &TaskDataset, sents: &[usize]) -> Vec<Unit> {
    let keep: std::collections::BTreeSet<usize> = sents.iter().copied().collect();
    let mut by_sent: BTreeMap<usize, Vec<(Target, usize, Gold)>> = BTreeMap::new();
    for inst in &dataset.instances {
        if keep.contains(&inst.sent_id) {
            let class = match &inst.gold {
                Gold::Label(l) => dataset.label_id(l),
                Gold::Value(_) => OOV_LABEL,
            };
            by_sent.entry(inst.sent_id).or_default().push((inst.target, class, inst.gold.clone()));
        }
    }
    by_sent
        .into_iter()
        .map(|(sent, items)| Unit { sent, ids: ctx.token_ids(&dataset.sentences[sent]), items })
        .collect()
}

fn carve(ids: &[usize], seed: u64) -> (Vec<usize>, Vec<usize>) {
    let mut fit = ids.to_vec();
    fit.shuffle(&mut seeded_rng(seed ^ 0xDE5));
    let n_dev = fit.len() / 10;
    let mut dev = if n_dev == 0 { fit.clone() } else { fit.split_off(fit.len() - n_dev) };
    fit.sort_unstable();
    dev.sort_unstable();
    (fit, dev)
}

/// Head forward and backward over a batch of units.
struct HeadPass<T> {
    loss: f64,
    d_f: Tensor2D<T>,
    d_b: Tensor2D<T>,
    head_grad: Head<T>,
    /// per-item output rows (logits or regression value)
    outputs: Tensor2D<T>,
    /// per-pair NLLs for the BiLM objective (fwd then bwd)
    nlls: (Vec<f64>, Vec<f64>),
}

fn head_pass<T: Scalar>(
    head: &Head<T>,
    top: &Tensor2D<T>,
    units: &[&Unit],
    hidden: usize,
) -> Result<HeadPass<T>, CtxError> {
    let n = top.rows();
    let mut d_top = Tensor2D::<T>::zeros(n, 2 * hidden);
    let mut head_grad = head.zeros_like();
    let mut loss = 0.0;
    let mut outputs = Tensor2D::zeros(0, 0);
    let mut nlls = (Vec::new(), Vec::new());
    let mut starts = Vec::with_capacity(units.len());
    let mut off = 0;
    for u in units {
        starts.push(off);
        off += u.ids.len();
    }
    match (head, &mut head_grad) {
        (Head::Bilm { fwd, bwd }, Head::Bilm { fwd: gf, bwd: gb }) => {
            let f_top = top.slice_cols(0, hidden);
            let b_top = top.slice_cols(hidden, hidden);
            for (k, (lin, glin, src)) in [(fwd, gf, &f_top), (bwd, gb, &b_top)].into_iter().enumerate() {
                let mut rows = Vec::new();
                let mut gold = Vec::new();
                for (u, &s) in units.iter().zip(&starts) {
                    for t in 0..u.ids.len() {
                        let target = if k == 0 { t + 1 } else { t.wrapping_sub(1) };
                        if target < u.ids.len() {
                            rows.push(s + t);
                            gold.push(u.ids[target]);
                        }
                    }
                }
                if rows.is_empty() {
                    continue;
                }
                let x = src.gather_rows(&rows);
                let logits = lin.forward(&x)?;
                let logp = log_softmax_rows(&logits);
                let nll: Vec<f64> = gold.iter().enumerate().map(|(r, &g)| -logp.get(r, g).as_f64()).collect();
                let (l, dy) = softmax_xent(&logits, &gold)?;
                loss += l;
                let dx = lin.backward(&x, &dy, glin)?;
                for (r, &row) in rows.iter().enumerate() {
                    let dst = &mut d_top.row_mut(row)[k * hidden..(k + 1) * hidden];
                    for (a, &b) in dst.iter_mut().zip(dx.row(r)) {
                        *a += b;
                    }
                }
                if k == 0 {
                    nlls.0 = nll;
                } else {
                    nlls.1 = nll;
                }
            }
        }
        (Head::Task { linear, pairwise, regress }, Head::Task { linear: glin, .. }) => {
            let mut feats = Vec::new();
            let mut refs = Vec::new();
            let mut classes = Vec::new();
            let mut values = Vec::new();
            for (u, &s) in units.iter().zip(&starts) {
                for (target, class, gold) in &u.items {
                    let (a, b) = match *target {
                        Target::Token(i) => (s + i, s + i),
                        Target::Pair(i, j) => (s + i, s + j),
                    };
                    if *pairwise {
                        feats.extend(build_pairwise_features(top.row(a), top.row(b))?);
                    } else {
                        feats.extend_from_slice(top.row(a));
                    }
                    refs.push((a, b));
                    classes.push(*class);
                    values.push(match gold {
                        Gold::Value(v) => T::of(*v),
                        Gold::Label(_) => T::zero(),
                    });
                }
            }
            let width = if *pairwise { 6 * hidden } else { 2 * hidden };
            let x = Tensor2D::from_vec(refs.len(), width, feats)?;
            let y = linear.forward(&x)?;
            let dy = if *regress {
                let (l, g) = mse(y.data(), &values)?;
                loss = l;
                Tensor2D::from_vec(g.len(), 1, g)?
            } else {
                // OOV golds (dev only) never reach training
                let trainable: Vec<usize> = classes.iter().map(|&c| if c == OOV_LABEL { 0 } else { c }).collect();
                let (l, g) = softmax_xent(&y, &trainable)?;
                loss = l;
                g
            };
            let dx = linear.backward(&x, &dy, glin)?;
            let d = 2 * hidden;
            for (r, &(a, b)) in refs.iter().enumerate() {
                let g = dx.row(r);
                if *pairwise {
                    let (ra, rb) = (top.row(a).to_vec(), top.row(b).to_vec());
                    for c in 0..d {
                        let da = g[c] + g[2 * d + c] * rb[c];
                        let db = g[d + c] + g[2 * d + c] * ra[c];
                        d_top.row_mut(a)[c] += da;
                        d_top.row_mut(b)[c] += db;
                    }
                } else {
                    for (acc, &v) in d_top.row_mut(a).iter_mut().zip(g) {
                        *acc += v;
                    }
                }
            }
            outputs = y;
        }
        _ => unreachable!("gradient head mirrors the head"),
    }
    Ok(HeadPass {
        loss,
        d_f: d_top.slice_cols(0, hidden),
        d_b: d_top.slice_cols(hidden, hidden),
        head_grad,
        outputs,
        nlls,
    })
}

/// Score of a unit set: negative average perplexity for the BiLM objective,
/// the task metric otherwise (`None` if undefined).
fn score(
    ctx: &Contextualizer<f32>,
    head: &Head<f32>,
    task: &Task,
    units: &[Unit],
) -> Result<Option<f64>, CtxError> {
    let mut fwd = Vec::new();
    let mut bwd = Vec::new();
    let mut preds = Vec::new();
    for chunk in units.chunks(64) {
        let refs: Vec<&Unit> = chunk.iter().collect();
        let ids: Vec<Vec<usize>> = chunk.iter().map(|u| u.ids.clone()).collect();
        let (layers, _) = ctx.encode(&ids)?;
        let pass = head_pass(head, &layers[STORE_LAYERS - 1], &refs, ctx.hidden())?;
        fwd.extend(pass.nlls.0);
        bwd.extend(pass.nlls.1);
        if let (Some(ds), Head::Task { regress, .. }) = (task.dataset, head) {
            let argmax = pass.outputs.argmax_rows();
            let mut r = 0;
            for u in chunk {
                for (target, _, gold) in &u.items {
                    let pred = if *regress {
                        Gold::Value(pass.outputs.get(r, 0) as f64)
                    } else {
                        Gold::Label(ds.label_vocab[argmax[r]].clone())
                    };
                    preds.push(Prediction { sent_id: u.sent, target: *target, gold: gold.clone(), pred });
                    r += 1;
                }
            }
        }
    }
    match task.dataset {
        None => {
            let mean = |v: &[f64]| v.iter().sum::<f64>() / v.len().max(1) as f64;
            Ok(Some(-(perplexity(mean(&fwd)) + perplexity(mean(&bwd))) / 2.0))
        }
        Some(ds) => match score_predictions(&ds.metric, ds.kind, &preds) {
            Ok(r) => Ok(Some(r.value)),
            Err(MetricError::ZeroVariance(_)) => Ok(None),
            Err(e) => Err(e.into()),
        },
    }
}

/// Jointly trains embeddings, recurrent layers and a disposable head, with
/// early stopping on held-out data; the head is dropped afterwards.
pub fn pretrain(ctx: &Contextualizer<f32>, spec: &PretrainSpec) -> Result<(Contextualizer<f32>, PretrainLog), CtxError> {
    let cfg = spec.train;
    let mut log = PretrainLog { spec: spec.name.clone(), best_epoch: 0, history: Vec::new(), train_score: None };
    if cfg.max_epochs == 0 {
        return Ok((ctx.clone(), log));
    }
    cfg.validate()?;
    let h = ctx.hidden();
    let mut rng = seeded_rng(cfg.seed);
    let (task, head) = match &spec.objective {
        Objective::Bilm { corpus } => {
            let all: Vec<usize> = (0..corpus.len()).filter(|&s| corpus[s].len() >= 2).collect();
            let (fit, dev) = carve(&all, cfg.seed);
            let unit = |s: usize| Unit { sent: s, ids: ctx.token_ids(&corpus[s]), items: Vec::new() };
            let v = ctx.config.vocab.len();
            let head = Head::Bilm { fwd: Linear::new(&mut rng, h, v), bwd: Linear::new(&mut rng, h, v) };
            (Task { dataset: None, train: fit.into_iter().map(unit).collect(), dev: dev.into_iter().map(unit).collect() }, head)
        }
        Objective::Supervised { dataset } => {
            let regress = dataset.kind.is_regression();
            let pairwise = dataset.kind.is_pairwise();
            let k = if regress { 1 } else { dataset.num_classes() };
            if !regress && k < 2 {
                return Err(CtxError::Config(format!("task {} has {k} labels", dataset.name)));
            }
            let width = if pairwise { 6 * h } else { 2 * h };
            let (fit, dev) = if dataset.splits.dev.is_empty() {
                carve(&dataset.splits.train, cfg.seed)
            } else {
                (dataset.splits.train.clone(), dataset.splits.dev.clone())
            };
            let head = Head::Task { linear: Linear::new(&mut rng, width, k), pairwise, regress };
            (Task { dataset: Some(dataset), train: units_for(ctx, dataset, &fit), dev: units_for(ctx, dataset, &dev) }, head)
        }
    };
    if task.train.is_empty() {
        return Err(TrainError::EmptyTrain.into());
    }

    let mut params = Both { ctx: ctx.params.clone(), head };
    let mut adam = AdamState::new(&params.slices(), AdamConfig::default());
    let mut stopper = EarlyStopping::new(cfg.patience);
    let mut best = params.clone();
    let mut order: Vec<usize> = (0..task.train.len()).collect();
    let mut model = ctx.clone();
    for epoch in 1..=cfg.max_epochs {
        order.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut batches = 0usize;
        for batch in order.chunks(cfg.batch_size) {
            let units: Vec<&Unit> = batch.iter().map(|&i| &task.train[i]).collect();
            let ids: Vec<Vec<usize>> = units.iter().map(|u| u.ids.clone()).collect();
            model.params = params.ctx.clone();
            let (layers, trace) = model.encode(&ids)?;
            let pass = head_pass(&params.head, &layers[STORE_LAYERS - 1], &units, h)?;
            if !pass.loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch }.into());
            }
            loss_sum += pass.loss;
            batches += 1;
            let mut grad = Both { ctx: params.ctx.zeros_like(), head: pass.head_grad };
            model.backward(&trace, pass.d_f, pass.d_b, &mut grad.ctx)?;
            adam.update(params.slices_mut(), &grad.slices(), cfg.lr)?;
        }
        model.params = params.ctx.clone();
        let dev_metric = score(&model, &params.head, &task, &task.dev)?;
        let shown = match task.dataset {
            None => dev_metric.map(|v| -v),
            Some(_) => dev_metric,
        };
        log.history.push(EpochRecord { epoch, train_loss: loss_sum / batches.max(1) as f64, dev_metric: shown });
        let (improved, stop) = stopper.observe(epoch, dev_metric.unwrap_or(f64::NEG_INFINITY));
        if improved {
            best = params.clone();
        }
        if stop {
            break;
        }
    }
    model.params = best.ctx.clone();
    let train_score = score(&model, &best.head, &task, &task.train)?;
    log.train_score = match task.dataset {
        None => train_score.map(|v| -v),
        Some(_) => train_score,
    };
    log.best_epoch = stopper.best_epoch();
    Ok((model, log))
}

/// Layer columns of the transfer matrix: 0, 1, 2 and the scalar mix.
pub const TRANSFER_COLUMNS: [&str; 4] = ["0", "1", "2", "mix"];

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferRow {
    pub pretraining: String,
    /// Mean over target tasks, per layer column.
    pub average: Vec<f64>,
    /// Per target task, per layer column.
    pub per_task: BTreeMap<String, Vec<f64>>,
    pub checksum: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub log: Option<PretrainLog>,
}

impl TransferRow {
    /// Mean over the per-layer columns; the mix column is left out.
    pub fn layer_average(&self) -> f64 {
        let layers = &self.average[..STORE_LAYERS.min(self.average.len())];
        layers.iter().sum::<f64>() / layers.len() as f64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransferMatrix {
    pub columns: Vec<String>,
    pub arch: String,
    /// Metrics of different kinds are averaged as raw 0–100 values.
    pub aggregation: String,
    pub rows: Vec<TransferRow>,
}

fn probe_row(
    name: &str,
    ctx: &Contextualizer<f32>,
    log: Option<PretrainLog>,
    targets: &[TaskDataset],
    arch: Arch,
    cfg: &TrainConfig,
) -> Result<TransferRow, CtxError> {
    let before = ctx.checksum();
    let store = dump_store(ctx, &targets[0].sentences)?;
    let mut per_task = BTreeMap::new();
    for t in targets {
        let sweep = sweep_layers(t, &store, arch, cfg, 1)?;
        per_task.insert(t.name.clone(), sweep.row());
    }
    if ctx.checksum() != before {
        return Err(CtxError::Config("contextualizer changed while probing".into()));
    }
    let cols = TRANSFER_COLUMNS.len();
    let average =
        (0..cols).map(|c| per_task.values().map(|r: &Vec<f64>| r[c]).sum::<f64>() / per_task.len() as f64).collect();
    Ok(TransferRow { pretraining: name.to_string(), average, per_task, checksum: before, log })
}

/// Pretrains one contextualizer per spec (all from the same seeded init),
/// dumps each over the shared target sentences and sweeps every target task.
/// The first row is the untrained baseline.
pub fn transfer_matrix(
    base: &CtxConfig,
    specs: &[PretrainSpec],
    targets: &[TaskDataset],
    arch: Arch,
    cfg: &TrainConfig,
    jobs: usize,
) -> Result<TransferMatrix, CtxError> {
    let first = targets.first().ok_or_else(|| CtxError::Config("no target tasks".into()))?;
    if targets.iter().any(|t| t.sentences != first.sentences) {
        return Err(CtxError::Config("target tasks must share their sentences".into()));
    }
    let init = init_contextualizer::<f32>(base.clone())?;
    let job = |k: usize| -> Result<TransferRow, CtxError> {
        if k == 0 {
            probe_row("untrained", &init, None, targets, arch, cfg)
        } else {
            let spec = &specs[k - 1];
            let (ctx, log) = pretrain(&init, spec)?;
            probe_row(&spec.name, &ctx, Some(log), targets, arch, cfg)
        }
    };
    let n = specs.len() + 1;
    let mut rows: Vec<Option<Result<TransferRow, CtxError>>> = (0..n).map(|_| None).collect();
    if jobs <= 1 {
        for (k, slot) in rows.iter_mut().enumerate() {
            *slot = Some(job(k));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut rows);
        std::thread::scope(|s| {
            for _ in 0..jobs.min(n) {
                s.spawn(|| loop {
                    let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if k >= n {
                        break;
                    }
                    let r = job(k);
                    slots.lock().unwrap()[k] = Some(r);
                });
            }
        });
    }
    let rows = rows.into_iter().map(|r| r.expect("every job ran")).collect::<Result<Vec<_>, _>>()?;
    Ok(TransferMatrix {
        columns: TRANSFER_COLUMNS.iter().map(|c| c.to_string()).collect(),
        arch: arch.name().into(),
        aggregation: "mean of raw 0-100 metric values across target tasks".into(),
        rows,
    })
}
