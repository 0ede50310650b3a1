use std::collections::{BTreeMap, BTreeSet};
use std::io::{BufRead, Write};

use rand::seq::SliceRandom;
use serde::{Deserialize, Serialize};

use super::IngestError;
use crate::metrics::Metric;
use crate::tensorcore::seeded_rng;

/// Label id assigned to dev/test labels never seen in train; no model can
/// predict it, so such instances always score as wrong.
pub const OOV_LABEL: usize = usize::MAX;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TaskKind {
    TokenLabeling,
    Segmentation,
    SparseLabeling,
    SparseRegression,
    PairwisePrediction,
    PairwiseClassification,
}

impl TaskKind {
    pub fn is_pairwise(self) -> bool {
        matches!(self, TaskKind::PairwisePrediction | TaskKind::PairwiseClassification)
    }

    pub fn is_regression(self) -> bool {
        self == TaskKind::SparseRegression
    }

    pub fn default_metric(self) -> Metric {
        match self {
            TaskKind::Segmentation => Metric::SpanF1,
            TaskKind::SparseRegression => Metric::Pearson,
            _ => Metric::Accuracy,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Target {
    Token(usize),
    Pair(usize, usize),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum Gold {
    Value(f64),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Instance {
    pub sent_id: usize,
    pub target: Target,
    pub gold: Gold,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Dev,
    Test,
}

/// Sentence ids per partition, each sorted ascending.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Splits {
    pub train: Vec<usize>,
    pub dev: Vec<usize>,
    pub test: Vec<usize>,
}

impl Splits {
    pub fn get(&self, split: Split) -> &[usize] {
        match split {
            Split::Train => &self.train,
            Split::Dev => &self.dev,
            Split::Test => &self.test,
        }
    }

    pub fn of(&self, sent: usize) -> Option<Split> {
        [Split::Train, Split::Dev, Split::Test].into_iter().find(|&s| self.get(s).binary_search(&sent).is_ok())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub enum SplitPolicy {
    /// One split per sentence, e.g. from the corpus's own train/dev/test files.
    Provided(Vec<Split>),
    /// Seeded sentence-level shuffle; dev and test each take
    /// `floor(n · percent / 100)` sentences, train the rest.
    Random { seed: u64, dev_percent: usize, test_percent: usize },
}

impl SplitPolicy {
    pub fn standard(seed: u64) -> Self {
        SplitPolicy::Random { seed, dev_percent: 10, test_percent: 10 }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct TaskDataset {
    pub name: String,
    pub kind: TaskKind,
    pub metric: Metric,
    /// Tokens of every corpus sentence; `sent_id` indexes this list and the
    /// matching representation store.
    pub sentences: Vec<Vec<String>>,
    /// Sorted by sentence id, then target position.
    pub instances: Vec<Instance>,
    /// Derived from the train split only.
    pub label_vocab: Vec<String>,
    pub splits: Splits,
    pub metadata: BTreeMap<String, String>,
}

impl TaskDataset {
    pub fn new(name: impl Into<String>, kind: TaskKind, sentences: Vec<Vec<String>>, instances: Vec<Instance>) -> Self {
        Self {
            name: name.into(),
            kind,
            metric: kind.default_metric(),
            sentences,
            instances,
            label_vocab: Vec::new(),
            splits: Splits::default(),
            metadata: BTreeMap::new(),
        }
    }

    pub fn num_sentences(&self) -> usize {
        self.sentences.len()
    }

    pub fn num_classes(&self) -> usize {
        self.label_vocab.len()
    }

    pub fn instances_in(&self, split: Split) -> impl Iterator<Item = &Instance> + '_ {
        let ids = self.splits.get(split);
        self.instances.iter().filter(move |i| ids.binary_search(&i.sent_id).is_ok())
    }

    /// Vocabulary index, or [`OOV_LABEL`].
    pub fn label_id(&self, label: &str) -> usize {
        self.label_vocab.binary_search_by(|l| l.as_str().cmp(label)).unwrap_or(OOV_LABEL)
    }

    pub fn label_name(&self, id: usize) -> &str {
        self.label_vocab.get(id).map_or("<oov>", String::as_str)
    }

    /// Rebuilds `label_vocab` from the train split's labels.
    pub fn rebuild_vocab(&mut self) {
        if self.kind.is_regression() {
            self.label_vocab.clear();
            return;
        }
        let train = &self.splits.train;
        let vocab: BTreeSet<&str> = self
            .instances
            .iter()
            .filter(|i| train.binary_search(&i.sent_id).is_ok())
            .filter_map(|i| match &i.gold {
                Gold::Label(l) => Some(l.as_str()),
                Gold::Value(_) => None,
            })
            .collect();
        self.label_vocab = vocab.into_iter().map(str::to_string).collect();
    }

    pub fn sort_instances(&mut self) {
        self.instances.sort_by(|a, b| a.sent_id.cmp(&b.sent_id).then(a.target.cmp(&b.target)));
    }
}

/// Assigns sentences to train/dev/test and derives the label vocabulary.
pub fn split_dataset(mut dataset: TaskDataset, policy: &SplitPolicy) -> Result<TaskDataset, IngestError> {
    let n = dataset.num_sentences();
    let mut splits = Splits::default();
    match policy {
        SplitPolicy::Provided(tags) => {
            if tags.len() != n {
                return Err(IngestError::Policy(format!("{} split tags for {n} sentences", tags.len())));
            }
            for (id, tag) in tags.iter().enumerate() {
                match tag {
                    Split::Train => splits.train.push(id),
                    Split::Dev => splits.dev.push(id),
                    Split::Test => splits.test.push(id),
                }
            }
        }
        SplitPolicy::Random { seed, dev_percent, test_percent } => {
            if dev_percent + test_percent > 100 {
                return Err(IngestError::Policy("dev + test exceed 100%".into()));
            }
            let mut ids: Vec<usize> = (0..n).collect();
            ids.shuffle(&mut seeded_rng(*seed));
            let n_dev = n * dev_percent / 100;
            let n_test = n * test_percent / 100;
            splits.dev = ids[..n_dev].to_vec();
            splits.test = ids[n_dev..n_dev + n_test].to_vec();
            splits.train = ids[n_dev + n_test..].to_vec();
            splits.train.sort_unstable();
            splits.dev.sort_unstable();
            splits.test.sort_unstable();
        }
    }
    if splits.train.is_empty() {
        return Err(IngestError::EmptyTrain);
    }
    dataset.splits = splits;
    dataset.rebuild_vocab();
    Ok(dataset)
}

#[derive(Debug, Serialize, Deserialize)]
struct SentenceRecord {
    sent_id: usize,
    kind: TaskKind,
    split: Option<Split>,
    tokens: Vec<String>,
    instances: Vec<InstanceRecord>,
}

#[derive(Debug, Serialize, Deserialize)]
struct InstanceRecord {
    target: Target,
    gold: Gold,
}

/// Sidecar written next to the JSONL records.
#[derive(Debug, Serialize, Deserialize)]
struct VocabFile {
    name: String,
    kind: TaskKind,
    metric: Metric,
    num_sentences: usize,
    label_vocab: Vec<String>,
    #[serde(default)]
    metadata: BTreeMap<String, String>,
}

/// Writes one JSONL record per sentence to `records` and the vocabulary
/// sidecar (JSON) to `vocab`.
pub fn write_dataset<W: Write, V: Write>(dataset: &TaskDataset, records: &mut W, vocab: &mut V) -> Result<(), IngestError> {
    let mut by_sent: Vec<Vec<InstanceRecord>> = (0..dataset.num_sentences()).map(|_| Vec::new()).collect();
    for i in &dataset.instances {
        by_sent[i.sent_id].push(InstanceRecord { target: i.target, gold: i.gold.clone() });
    }
    for (sent_id, instances) in by_sent.into_iter().enumerate() {
        let rec = SentenceRecord {
            sent_id,
            kind: dataset.kind,
            split: dataset.splits.of(sent_id),
            tokens: dataset.sentences[sent_id].clone(),
            instances,
        };
        serde_json::to_writer(&mut *records, &rec).map_err(|e| IngestError::Format(e.to_string()))?;
        records.write_all(b"\n")?;
    }
    let side = VocabFile {
        name: dataset.name.clone(),
        kind: dataset.kind,
        metric: dataset.metric.clone(),
        num_sentences: dataset.num_sentences(),
        label_vocab: dataset.label_vocab.clone(),
        metadata: dataset.metadata.clone(),
    };
    serde_json::to_writer_pretty(&mut *vocab, &side).map_err(|e| IngestError::Format(e.to_string()))?;
    vocab.write_all(b"\n")?;
    Ok(())
}

pub fn read_dataset<R: BufRead>(records: R, vocab_json: &str) -> Result<TaskDataset, IngestError> {
    let side: VocabFile = serde_json::from_str(vocab_json).map_err(|e| IngestError::Format(format!("vocab: {e}")))?;
    let mut sentences = vec![Vec::new(); side.num_sentences];
    let mut instances = Vec::new();
    let mut splits = Splits::default();
    for (i, line) in records.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: SentenceRecord =
            serde_json::from_str(&line).map_err(|e| IngestError::Format(format!("line {}: {e}", i + 1)))?;
        if rec.sent_id >= side.num_sentences {
            return Err(IngestError::Format(format!("line {}: sent_id {} out of range", i + 1, rec.sent_id)));
        }
        if rec.kind != side.kind {
            return Err(IngestError::Format(format!("line {}: kind differs from sidecar", i + 1)));
        }
        match rec.split {
            Some(Split::Train) => splits.train.push(rec.sent_id),
            Some(Split::Dev) => splits.dev.push(rec.sent_id),
            Some(Split::Test) => splits.test.push(rec.sent_id),
            None => {}
        }
        sentences[rec.sent_id] = rec.tokens;
        instances.extend(
            rec.instances.into_iter().map(|r| Instance { sent_id: rec.sent_id, target: r.target, gold: r.gold }),
        );
    }
    splits.train.sort_unstable();
    splits.dev.sort_unstable();
    splits.test.sort_unstable();
    let mut ds = TaskDataset::new(side.name, side.kind, sentences, instances);
    ds.metric = side.metric;
    ds.label_vocab = side.label_vocab;
    ds.splits = splits;
    ds.metadata = side.metadata;
    ds.sort_instances();
    Ok(ds)
}
