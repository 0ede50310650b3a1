//! Corpus parsers and probing-task compilers.
//!
//! Token indices are 0-based everywhere except `dep_heads`, which keeps the
//! CoNLL convention (1-based, 0 = root).

mod columns;
mod compile;
mod conllu;
mod dataset;
mod jsonl;
mod ptb;
mod sdp;

pub use columns::{parse_conll_columns, ColumnSchema, Separator};
pub use compile::{
    compile_coref_arc_prediction, compile_dep_arc_classification, compile_dep_arc_prediction, compile_sparse_task,
    compile_token_task, compile_token_task_filtered, ArcSource, LabelSource, SentenceFilter, TargetKind,
};
pub use conllu::parse_conllu;
pub use dataset::{
    read_dataset, split_dataset, write_dataset, Gold, Instance, Split, SplitPolicy, Splits, TaskDataset, TaskKind,
    Target, OOV_LABEL,
};
pub use jsonl::parse_jsonl;
pub use ptb::{derive_ancestor_labels, parse_ptb_trees, Tree};
pub use sdp::parse_sdp;

use serde::{Deserialize, Serialize};

#[derive(Debug, thiserror::Error)]
pub enum IngestError {
    #[error("line {line}: {msg}")]
    Parse { line: usize, msg: String },
    #[error("offset {offset}: {msg}")]
    Bracket { offset: usize, msg: String },
    #[error("sentence {sent}: {msg}")]
    Invalid { sent: usize, msg: String },
    #[error("sentence {sent}: missing {what}")]
    Missing { sent: usize, what: &'static str },
    #[error("empty train split")]
    EmptyTrain,
    #[error("split policy: {0}")]
    Policy(String),
    #[error("dataset file: {0}")]
    Format(String),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SemArc {
    pub head: usize,
    pub dep: usize,
    pub label: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum SparseGold {
    Value(f64),
    Label(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SparseTarget {
    pub index: usize,
    pub gold: SparseGold,
}

/// One tokenized sentence plus whichever gold annotations its source carries.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct AnnotatedSentence {
    pub tokens: Vec<String>,
    pub upos: Option<Vec<String>>,
    pub xpos: Option<Vec<String>>,
    /// 1-based head per token, 0 for the root.
    pub dep_heads: Option<Vec<usize>>,
    pub dep_labels: Option<Vec<String>>,
    pub tree: Option<Tree>,
    pub semgraph: Option<Vec<SemArc>>,
    /// Coreference clusters, each mention reduced to one token index.
    pub clusters: Option<Vec<Vec<usize>>>,
    /// Per-token column labels (BIO/IO tags, semantic tags, GED labels).
    pub bio: Option<Vec<String>>,
    pub sparse_targets: Option<Vec<SparseTarget>>,
    /// Whether the sentence contains a coordination construction.
    pub coordination: Option<bool>,
}

impl AnnotatedSentence {
    pub fn new(tokens: Vec<String>) -> Self {
        Self { tokens, ..Default::default() }
    }

    pub fn len(&self) -> usize {
        self.tokens.len()
    }

    pub fn is_empty(&self) -> bool {
        self.tokens.is_empty()
    }

    /// Checks index ranges, self-heads and cluster disjointness.
    pub fn validate(&self, sent: usize) -> Result<(), IngestError> {
        let n = self.len();
        let bad = |msg: String| IngestError::Invalid { sent, msg };
        for (name, col) in [("upos", &self.upos), ("xpos", &self.xpos), ("dep_labels", &self.dep_labels), ("bio", &self.bio)] {
            if let Some(c) = col {
                if c.len() != n {
                    return Err(bad(format!("{name} has {} entries for {n} tokens", c.len())));
                }
            }
        }
        if let Some(heads) = &self.dep_heads {
            if heads.len() != n {
                return Err(bad(format!("dep_heads has {} entries for {n} tokens", heads.len())));
            }
            for (i, &h) in heads.iter().enumerate() {
                if h > n {
                    return Err(bad(format!("token {} has head {h} beyond sentence length", i + 1)));
                }
                if h == i + 1 {
                    return Err(bad(format!("token {} is its own head", i + 1)));
                }
            }
        }
        if let Some(arcs) = &self.semgraph {
            if let Some(a) = arcs.iter().find(|a| a.head >= n || a.dep >= n) {
                return Err(bad(format!("semantic arc {}->{} out of range", a.head, a.dep)));
            }
        }
        if let Some(clusters) = &self.clusters {
            let mut seen = vec![false; n];
            for c in clusters {
                for &i in c {
                    if i >= n {
                        return Err(bad(format!("cluster index {i} out of range")));
                    }
                    if seen[i] {
                        return Err(bad(format!("token {i} appears in more than one cluster mention")));
                    }
                    seen[i] = true;
                }
            }
        }
        if let Some(targets) = &self.sparse_targets {
            if let Some(t) = targets.iter().find(|t| t.index >= n) {
                return Err(bad(format!("target index {} out of range", t.index)));
            }
        }
        Ok(())
    }
}
