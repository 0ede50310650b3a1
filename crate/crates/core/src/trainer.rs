//! Probe training with Adam and dev-metric early stopping, evaluation, and
//! layerwise sweeps.

use std::collections::BTreeMap;

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use crate::ingest::{Gold, Split, Target, TaskDataset, TaskKind, OOV_LABEL};
use crate::metrics::{self, Metric, MetricError, MetricReport};
use crate::probes::{Arch, Head, InputSource, ProbeConfig, ProbeInput, ProbeModel, Targets};
use crate::reprstore::{ReprStore, StoreError};
use crate::tensorcore::{mse, seeded_rng, softmax_xent, AdamConfig, AdamState, ParamSet, Tensor2D, TensorError};

#[derive(Debug, thiserror::Error)]
pub enum TrainError {
    #[error("train split has no instances")]
    EmptyTrain,
    #[error("{split:?} split has no instances")]
    EmptySplit { split: Split },
    #[error("dimension mismatch: {0}")]
    Dimension(String),
    #[error("non-finite training loss at epoch {epoch}")]
    NonFiniteLoss { epoch: usize },
    #[error("invalid training configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error(transparent)]
    Tensor(#[from] TensorError),
    #[error(transparent)]
    Metric(#[from] MetricError),
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub lr: f64,
    pub max_epochs: usize,
    pub patience: usize,
    /// Instances per minibatch; sentences per minibatch for recurrent probes.
    pub batch_size: usize,
    pub seed: u64,
}

impl Default for TrainConfig {
    fn default() -> Self {
        Self { lr: 0.001, max_epochs: 50, patience: 3, batch_size: 32, seed: 0 }
    }
}

impl TrainConfig {
    pub fn with_seed(seed: u64) -> Self {
        Self { seed, ..Self::default() }
    }

    pub fn validate(&self) -> Result<(), TrainError> {
        if !(self.lr > 0.0 && self.lr.is_finite()) {
            return Err(TrainError::Config(format!("learning rate {} must be positive", self.lr)));
        }
        if self.batch_size == 0 {
            return Err(TrainError::Config("batch size must be at least 1".into()));
        }
        if self.max_epochs == 0 || self.patience >= self.max_epochs {
            return Err(TrainError::Config(format!(
                "patience {} must be below max_epochs {}",
                self.patience, self.max_epochs
            )));
        }
        Ok(())
    }
}

/// Stops after `patience` consecutive epochs without a strict improvement.
#[derive(Debug, Clone)]
pub struct EarlyStopping {
    patience: usize,
    best: f64,
    best_epoch: usize,
    bad_epochs: usize,
}

impl EarlyStopping {
    pub fn new(patience: usize) -> Self {
        Self { patience, best: f64::NEG_INFINITY, best_epoch: 0, bad_epochs: 0 }
    }

    /// Records a 1-based epoch's dev score. Returns `(improved, stop)`.
    pub fn observe(&mut self, epoch: usize, score: f64) -> (bool, bool) {
        if self.best_epoch == 0 || score > self.best {
            self.best = score;
            self.best_epoch = epoch;
            self.bad_epochs = 0;
            (true, false)
        } else {
            self.bad_epochs += 1;
            (false, self.bad_epochs >= self.patience)
        }
    }

    pub fn best_epoch(&self) -> usize {
        self.best_epoch
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    /// `None` when the dev metric is undefined (e.g. constant predictions
    /// under Pearson); such epochs never count as improvements.
    pub dev_metric: Option<f64>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DevSource {
    Provided,
    /// Seeded 10% of the train sentences.
    Carved,
    /// Too few sentences to carve; selection ran on train.
    Train,
}

#[derive(Debug, Clone)]
pub struct TrainedProbe {
    pub model: ProbeModel<f32>,
    pub best_epoch: usize,
    pub history: Vec<EpochRecord>,
    pub config: TrainConfig,
    pub dev_source: DevSource,
    pub label_vocab: Vec<String>,
    pub metric: Metric,
    pub kind: TaskKind,
}

/// One scored instance.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Prediction {
    pub sent_id: usize,
    pub target: Target,
    pub gold: Gold,
    pub pred: Gold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum LayerSel {
    Layer(usize),
    Mix(MixTag),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MixTag {
    Mix,
}

impl LayerSel {
    pub fn label(&self) -> String {
        match self {
            LayerSel::Layer(l) => l.to_string(),
            LayerSel::Mix(_) => "mix".into(),
        }
    }
}

/// Per-run result record, serialized as the run's metric JSON.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunReport {
    pub task: String,
    pub representation: String,
    pub arch: String,
    pub layer: LayerSel,
    pub metric_name: String,
    pub value: f64,
    pub n: usize,
    pub seed: u64,
    pub best_epoch: usize,
    pub early_stopping: String,
    pub dev_source: DevSource,
    pub history: Vec<EpochRecord>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mix_weights: Option<Vec<f64>>,
}

#[derive(Debug, Clone)]
struct Item {
    sent: usize,
    target: Target,
    gold: Gold,
    class: usize,
    value: f64,
}

/// Store layers of the sentences a run touches, loaded once.
struct LayerCache {
    layers: Vec<usize>,
    sentences: BTreeMap<usize, Vec<Tensor2D<f32>>>,
}

impl LayerCache {
    fn load(store: &ReprStore, layers: Vec<usize>, sents: impl Iterator<Item = usize>) -> Result<Self, StoreError> {
        let mut sentences = BTreeMap::new();
        for s in sents {
            if !sentences.contains_key(&s) {
                let t: Result<Vec<_>, _> = layers.iter().map(|&l| store.get_layer(s, l)).collect();
                sentences.insert(s, t?);
            }
        }
        Ok(Self { layers, sentences })
    }

    fn get(&self, sent: usize) -> &[Tensor2D<f32>] {
        &self.sentences[&sent]
    }
}

/// Builds the probe configuration a dataset needs.
pub fn probe_config_for(dataset: &TaskDataset, arch: Arch, input: InputSource) -> ProbeConfig {
    let head = if dataset.kind.is_regression() { Head::Regress } else { Head::Classify(dataset.num_classes()) };
    ProbeConfig::new(arch, input, head).pairwise(dataset.kind.is_pairwise())
}

fn check_compatible(dataset: &TaskDataset, store: &ReprStore, config: &ProbeConfig) -> Result<(), TrainError> {
    let layers = store.num_layers();
    match config.input {
        InputSource::Layer(l) if l >= layers => {
            return Err(TrainError::Dimension(format!("layer {l} requested from a {layers}-layer store")))
        }
        InputSource::ScalarMix(n) if n != layers => {
            return Err(TrainError::Dimension(format!("mix over {n} layers, store has {layers}")))
        }
        _ => {}
    }
    let counts = store.token_counts();
    for inst in &dataset.instances {
        let t = *counts.get(inst.sent_id).ok_or_else(|| {
            TrainError::Dimension(format!("sentence {} not in a {}-sentence store", inst.sent_id, counts.len()))
        })?;
        if let Some(toks) = dataset.sentences.get(inst.sent_id) {
            if toks.len() != t {
                return Err(TrainError::Dimension(format!(
                    "sentence {} has {} tokens, store has {t}",
                    inst.sent_id,
                    toks.len()
                )));
            }
        }
        let (a, b) = match inst.target {
            Target::Token(i) => (i, i),
            Target::Pair(i, j) => (i, j),
        };
        if a >= t || b >= t {
            return Err(TrainError::Dimension(format!("target {:?} outside sentence {}", inst.target, inst.sent_id)));
        }
    }
    Ok(())
}

fn items_for(dataset: &TaskDataset, sents: &[usize]) -> Vec<Item> {
    dataset
        .instances
        .iter()
        .filter(|i| sents.binary_search(&i.sent_id).is_ok())
        .map(|i| {
            let (class, value) = match &i.gold {
                Gold::Label(l) => (dataset.label_id(l), f64::NAN),
                Gold::Value(v) => (OOV_LABEL, *v),
            };
            Item { sent: i.sent_id, target: i.target, gold: i.gold.clone(), class, value }
        })
        .collect()
}

/// Consecutive runs of items from the same sentence.
fn group_by_sentence(items: &[Item]) -> Vec<Vec<usize>> {
    let mut groups: Vec<Vec<usize>> = Vec::new();
    for (k, it) in items.iter().enumerate() {
        match groups.last_mut() {
            Some(g) if items[g[0]].sent == it.sent => g.push(k),
            _ => groups.push(vec![k]),
        }
    }
    groups
}

/// Assembles probe input for a batch. Non-recurrent probes see only target
/// rows; recurrent probes see whole sentences.
fn build_input(cache: &LayerCache, items: &[Item], batch: &[usize], recurrent: bool) -> ProbeInput<f32> {
    let nl = cache.layers.len();
    let d = cache.get(items[batch[0]].sent)[0].cols();
    let mut rows: Vec<Vec<f32>> = vec![Vec::new(); nl];
    let mut segments = Vec::new();
    let mut tokens = Vec::new();
    let mut pairs = Vec::new();
    let mut n = 0usize;
    if recurrent {
        let mut offsets: BTreeMap<usize, usize> = BTreeMap::new();
        for &k in batch {
            let it = &items[k];
            let start = *offsets.entry(it.sent).or_insert_with(|| {
                let layers = cache.get(it.sent);
                let t = layers[0].rows();
                for (dst, src) in rows.iter_mut().zip(layers) {
                    dst.extend_from_slice(src.data());
                }
                segments.push((n, t));
                n += t;
                n - t
            });
            match it.target {
                Target::Token(i) => tokens.push(start + i),
                Target::Pair(i, j) => pairs.push((start + i, start + j)),
            }
        }
    } else {
        for &k in batch {
            let it = &items[k];
            let layers = cache.get(it.sent);
            let mut push = |i: usize| {
                for (dst, src) in rows.iter_mut().zip(layers) {
                    dst.extend_from_slice(src.row(i));
                }
                n += 1;
                n - 1
            };
            match it.target {
                Target::Token(i) => tokens.push(push(i)),
                Target::Pair(i, j) => {
                    let a = push(i);
                    let b = push(j);
                    pairs.push((a, b));
                }
            }
        }
    }
    let layers = rows.into_iter().map(|r| Tensor2D::from_vec(n, d, r).expect("row-major batch")).collect();
    let targets = if pairs.is_empty() { Targets::Tokens(tokens) } else { Targets::Pairs(pairs) };
    ProbeInput { layers, segments, targets }
}

/// Batches of item indices. Recurrent probes batch whole sentences.
fn batches(units: &[Vec<usize>], batch_size: usize) -> Vec<Vec<usize>> {
    units.chunks(batch_size).map(|c| c.iter().flatten().copied().collect()).collect()
}

fn predict(
    model: &ProbeModel<f32>,
    cache: &LayerCache,
    items: &[Item],
    label_vocab: &[String],
) -> Result<Vec<Prediction>, TrainError> {
    let recurrent = model.config.arch.is_recurrent();
    let units: Vec<Vec<usize>> =
        if recurrent { group_by_sentence(items) } else { (0..items.len()).map(|k| vec![k]).collect() };
    let size = if recurrent { 64 } else { 512 };
    let mut out = Vec::with_capacity(items.len());
    for batch in batches(&units, size) {
        let input = build_input(cache, items, &batch, recurrent);
        let (y, _) = model.forward(&input)?;
        let classes = y.argmax_rows();
        for (r, &k) in batch.iter().enumerate() {
            let it = &items[k];
            let pred = match model.config.head {
                Head::Regress => Gold::Value(y.get(r, 0) as f64),
                Head::Classify(_) => Gold::Label(label_vocab[classes[r]].clone()),
            };
            out.push(Prediction { sent_id: it.sent, target: it.target, gold: it.gold.clone(), pred });
        }
    }
    Ok(out)
}

fn label_of(g: &Gold) -> Option<&str> {
    match g {
        Gold::Label(l) => Some(l),
        Gold::Value(_) => None,
    }
}

/// Scores predictions with a task metric.
pub fn score_predictions(metric: &Metric, kind: TaskKind, preds: &[Prediction]) -> Result<MetricReport, MetricError> {
    if preds.is_empty() {
        return Err(MetricError::Empty);
    }
    let unsupported = || MetricError::Unsupported { metric: metric.name(), kind: format!("{kind:?}") };
    let labels = || -> Result<(Vec<&str>, Vec<&str>), MetricError> {
        let p: Option<Vec<&str>> = preds.iter().map(|p| label_of(&p.pred)).collect();
        let g: Option<Vec<&str>> = preds.iter().map(|p| label_of(&p.gold)).collect();
        p.zip(g).ok_or_else(unsupported)
    };
    match metric {
        Metric::Accuracy => {
            let (p, g) = labels()?;
            metrics::accuracy(&p, &g)
        }
        Metric::SpanF1 => {
            let (p, g) = labels()?;
            let mut ps: Vec<Vec<&str>> = Vec::new();
            let mut gs: Vec<Vec<&str>> = Vec::new();
            for (k, pr) in preds.iter().enumerate() {
                if k == 0 || preds[k - 1].sent_id != pr.sent_id {
                    ps.push(Vec::new());
                    gs.push(Vec::new());
                }
                ps.last_mut().unwrap().push(p[k]);
                gs.last_mut().unwrap().push(g[k]);
            }
            metrics::span_f1(&ps, &gs)
        }
        Metric::FBeta { beta, positive } => {
            let (p, g) = labels()?;
            let p: Vec<bool> = p.iter().map(|l| l == positive).collect();
            let g: Vec<bool> = g.iter().map(|l| l == positive).collect();
            metrics::f_beta_tokens(&p, &g, *beta)
        }
        Metric::Pearson => {
            let vals = |f: fn(&Prediction) -> &Gold| -> Result<Vec<f64>, MetricError> {
                preds
                    .iter()
                    .map(|p| match f(p) {
                        Gold::Value(v) => Ok(*v),
                        Gold::Label(_) => Err(unsupported()),
                    })
                    .collect()
            };
            metrics::pearson_r(&vals(|p| &p.pred)?, &vals(|p| &p.gold)?)
        }
    }
}

fn dev_sentences(dataset: &TaskDataset, seed: u64) -> (Vec<usize>, Vec<usize>, DevSource) {
    let train = dataset.splits.train.clone();
    if !dataset.splits.dev.is_empty() {
        return (train, dataset.splits.dev.clone(), DevSource::Provided);
    }
    let n_dev = train.len() / 10;
    if n_dev == 0 {
        return (train.clone(), train, DevSource::Train);
    }
    let mut shuffled = train;
    shuffled.shuffle(&mut seeded_rng(seed ^ 0xDE5));
    let mut dev = shuffled.split_off(shuffled.len() - n_dev);
    shuffled.sort_unstable();
    dev.sort_unstable();
    (shuffled, dev, DevSource::Carved)
}

fn dev_score(metric: &Metric, kind: TaskKind, preds: &[Prediction]) -> Result<Option<f64>, TrainError> {
    match score_predictions(metric, kind, preds) {
        Ok(r) => Ok(Some(r.value)),
        Err(MetricError::ZeroVariance(_)) => Ok(None),
        Err(e) => Err(e.into()),
    }
}

/// Trains a probe on the train split with early stopping on the dev metric and
/// returns the parameters of the best dev epoch.
pub fn train_probe(
    dataset: &TaskDataset,
    store: &ReprStore,
    probe: ProbeConfig,
    config: &TrainConfig,
) -> Result<TrainedProbe, TrainError> {
    config.validate()?;
    probe.validate()?;
    check_compatible(dataset, store, &probe)?;
    if dataset.kind.is_regression() != matches!(probe.head, Head::Regress) {
        return Err(TrainError::Config("probe head does not match the task kind".into()));
    }
    if let Head::Classify(k) = probe.head {
        if k != dataset.num_classes() {
            return Err(TrainError::Config(format!("{k} outputs for {} labels", dataset.num_classes())));
        }
    }
    if probe.pairwise != dataset.kind.is_pairwise() {
        return Err(TrainError::Config("pairwise probe required exactly for pairwise tasks".into()));
    }

    let (train_sents, dev_sents, dev_source) = dev_sentences(dataset, config.seed);
    let train_items = items_for(dataset, &train_sents);
    if train_items.is_empty() {
        return Err(TrainError::EmptyTrain);
    }
    if let Some(bad) = train_items.iter().find(|i| i.class == OOV_LABEL && !dataset.kind.is_regression()) {
        return Err(TrainError::Config(format!("train label {:?} missing from the label vocabulary", bad.gold)));
    }
    let dev_items = items_for(dataset, &dev_sents);

    let mut model = ProbeModel::<f32>::new(probe, store.dim(), config.seed)?;
    let layers = model.input_layers();
    let cache = LayerCache::load(store, layers, train_items.iter().chain(&dev_items).map(|i| i.sent))?;

    let recurrent = probe.arch.is_recurrent();
    let mut units: Vec<Vec<usize>> = if recurrent {
        group_by_sentence(&train_items)
    } else {
        (0..train_items.len()).map(|k| vec![k]).collect()
    };
    let mut rng = seeded_rng(config.seed.wrapping_add(0x9E37_79B9_7F4A_7C15));
    let mut adam = AdamState::new(&model.params.slices(), AdamConfig::default());
    let mut stopper = EarlyStopping::new(config.patience);
    let mut best = model.clone();
    let mut history = Vec::new();

    for epoch in 1..=config.max_epochs {
        units.shuffle(&mut rng);
        let mut loss_sum = 0.0;
        let mut count = 0usize;
        for batch in batches(&units, config.batch_size) {
            let input = build_input(&cache, &train_items, &batch, recurrent);
            let (y, fwd) = model.forward(&input)?;
            let (loss, dy) = match probe.head {
                Head::Classify(_) => {
                    let gold: Vec<usize> = batch.iter().map(|&k| train_items[k].class).collect();
                    softmax_xent(&y, &gold)?
                }
                Head::Regress => {
                    let gold: Vec<f32> = batch.iter().map(|&k| train_items[k].value as f32).collect();
                    let (l, g) = mse(y.data(), &gold)?;
                    (l, Tensor2D::from_vec(g.len(), 1, g)?)
                }
            };
            if !loss.is_finite() {
                return Err(TrainError::NonFiniteLoss { epoch });
            }
            loss_sum += loss * batch.len() as f64;
            count += batch.len();
            let mut grad = model.params.zeros_like();
            model.backward(&input, &fwd, &dy, &mut grad)?;
            adam.update(model.params.slices_mut(), &grad.slices(), config.lr)?;
        }
        let dev_metric = if dev_items.is_empty() {
            None
        } else {
            dev_score(&dataset.metric, dataset.kind, &predict(&model, &cache, &dev_items, &dataset.label_vocab)?)?
        };
        let train_loss = loss_sum / count as f64;
        log::debug!("epoch {epoch}: train loss {train_loss:.5}, dev {dev_metric:?}");
        history.push(EpochRecord { epoch, train_loss, dev_metric });
        let (improved, stop) = stopper.observe(epoch, dev_metric.unwrap_or(f64::NEG_INFINITY));
        if improved {
            best = model.clone();
        }
        if stop {
            break;
        }
    }

    Ok(TrainedProbe {
        model: best,
        best_epoch: stopper.best_epoch(),
        history,
        config: *config,
        dev_source,
        label_vocab: dataset.label_vocab.clone(),
        metric: dataset.metric.clone(),
        kind: dataset.kind,
    })
}

/// Scores a trained probe on one split; returns the report and the per-instance
/// predictions it was computed from.
pub fn evaluate(
    trained: &TrainedProbe,
    dataset: &TaskDataset,
    split: Split,
    store: &ReprStore,
) -> Result<(MetricReport, Vec<Prediction>), TrainError> {
    check_compatible(dataset, store, &trained.model.config)?;
    let items = items_for(dataset, dataset.splits.get(split));
    if items.is_empty() {
        return Err(TrainError::EmptySplit { split });
    }
    let cache = LayerCache::load(store, trained.model.input_layers(), items.iter().map(|i| i.sent))?;
    let preds = predict(&trained.model, &cache, &items, &trained.label_vocab)?;
    let report = score_predictions(&trained.metric, trained.kind, &preds)?;
    Ok((report, preds))
}

/// Trains on train, selects on dev and reports the test metric.
pub fn run_probe(
    dataset: &TaskDataset,
    store: &ReprStore,
    arch: Arch,
    input: InputSource,
    config: &TrainConfig,
) -> Result<(RunReport, TrainedProbe), TrainError> {
    let probe = probe_config_for(dataset, arch, input);
    let trained = train_probe(dataset, store, probe, config)?;
    let eval_split = if dataset.splits.test.is_empty() { Split::Dev } else { Split::Test };
    let (report, _) = evaluate(&trained, dataset, eval_split, store)?;
    let layer = match input {
        InputSource::Layer(l) => LayerSel::Layer(l),
        InputSource::ScalarMix(_) => LayerSel::Mix(MixTag::Mix),
    };
    let run = RunReport {
        task: dataset.name.clone(),
        representation: store.header().model_name.clone(),
        arch: arch.name().into(),
        layer,
        metric_name: report.metric_name,
        value: report.value,
        n: report.n,
        seed: config.seed,
        best_epoch: trained.best_epoch,
        early_stopping: format!("dev {}", dataset.metric.name()),
        dev_source: trained.dev_source,
        history: trained.history.clone(),
        mix_weights: trained.model.mix_weights().map(|w| w.iter().map(|&v| v as f64).collect()),
    };
    Ok((run, trained))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepResult {
    /// Ascending layer index.
    pub layers: Vec<RunReport>,
    pub mix: RunReport,
}

impl SweepResult {
    /// Per-layer values followed by the mix value.
    pub fn row(&self) -> Vec<f64> {
        self.layers.iter().chain(std::iter::once(&self.mix)).map(|r| r.value).collect()
    }
}

/// One probe per store layer plus a scalar-mix probe. Layer `l` trains with
/// seed `seed ^ l`, the mix with `seed ^ L`, so results do not depend on the
/// order or parallelism of the jobs.
pub fn sweep_layers(
    dataset: &TaskDataset,
    store: &ReprStore,
    arch: Arch,
    config: &TrainConfig,
    jobs: usize,
) -> Result<SweepResult, TrainError> {
    let l = store.num_layers();
    if l == 0 {
        return Err(TrainError::Dimension("store has no layers".into()));
    }
    let inputs: Vec<InputSource> =
        (0..l).map(InputSource::Layer).chain(std::iter::once(InputSource::ScalarMix(l))).collect();
    let run = |k: usize| {
        let cfg = TrainConfig { seed: config.seed ^ k as u64, ..*config };
        run_probe(dataset, store, arch, inputs[k], &cfg).map(|r| r.0)
    };
    let jobs = jobs.max(1);
    let mut results: Vec<Option<Result<RunReport, TrainError>>> = (0..inputs.len()).map(|_| None).collect();
    if jobs == 1 {
        for (k, slot) in results.iter_mut().enumerate() {
            *slot = Some(run(k));
        }
    } else {
        let next = std::sync::atomic::AtomicUsize::new(0);
        let slots = std::sync::Mutex::new(&mut results);
        std::thread::scope(|s| {
            for _ in 0..jobs.min(inputs.len()) {
                s.spawn(|| loop {
                    let k = next.fetch_add(1, std::sync::atomic::Ordering::SeqCst);
                    if k >= inputs.len() {
                        break;
                    }
                    let r = run(k);
                    slots.lock().unwrap()[k] = Some(r);
                });
            }
        });
    }
    let mut reports = Vec::with_capacity(inputs.len());
    for r in results {
        reports.push(r.expect("every job ran")?);
    }
    let mix = reports.pop().expect("mix run");
    Ok(SweepResult { layers: reports, mix })
}
