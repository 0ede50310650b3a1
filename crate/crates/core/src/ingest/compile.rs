//! Compilers from annotated corpora to probing datasets.

use rand::Rng;

use super::{
    derive_ancestor_labels, AnnotatedSentence, Gold, IngestError, Instance, SparseGold, TaskDataset, TaskKind, Target,
};
use crate::tensorcore::seeded_rng;

pub const POSITIVE: &str = "true";
pub const NEGATIVE: &str = "false";

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LabelSource {
    Xpos,
    Upos,
    /// 1 = parent, 2 = grandparent, 3 = great-grandparent
    Ancestor(usize),
    /// Column labels read as atomic token classes (semantic tags, GED).
    Semtag,
    /// Column labels as BIO/IO segmentation tags.
    Bio,
}

impl LabelSource {
    fn name(self) -> &'static str {
        match self {
            LabelSource::Xpos => "xpos",
            LabelSource::Upos => "upos",
            LabelSource::Ancestor(1) => "parent",
            LabelSource::Ancestor(2) => "gparent",
            LabelSource::Ancestor(_) => "ggparent",
            LabelSource::Semtag => "semtag",
            LabelSource::Bio => "bio",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SentenceFilter {
    All,
    /// Keep only sentences with a coordination construction: the explicit
    /// flag when present, otherwise any non-`O` column label.
    CoordinationOnly,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TargetKind {
    Classification,
    Regression,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ArcSource {
    Syntactic,
    Semantic,
}

fn tokens_of(corpus: &[AnnotatedSentence]) -> Vec<Vec<String>> {
    corpus.iter().map(|s| s.tokens.clone()).collect()
}

pub fn compile_token_task(corpus: &[AnnotatedSentence], source: LabelSource) -> Result<TaskDataset, IngestError> {
    compile_token_task_filtered(corpus, source, SentenceFilter::All)
}

/// One instance per token. `Bio` yields a segmentation dataset whose classes
/// are the raw tags; every other source yields token labeling.
pub fn compile_token_task_filtered(
    corpus: &[AnnotatedSentence],
    source: LabelSource,
    filter: SentenceFilter,
) -> Result<TaskDataset, IngestError> {
    let kind = if source == LabelSource::Bio { TaskKind::Segmentation } else { TaskKind::TokenLabeling };
    let mut instances = Vec::new();
    for (sid, s) in corpus.iter().enumerate() {
        let labels: Vec<String> = match source {
            LabelSource::Xpos => s.xpos.clone().ok_or(IngestError::Missing { sent: sid, what: "xpos" })?,
            LabelSource::Upos => s.upos.clone().ok_or(IngestError::Missing { sent: sid, what: "upos" })?,
            LabelSource::Ancestor(k) => derive_ancestor_labels(s, k).map_err(|e| match e {
                IngestError::Missing { what, .. } => IngestError::Missing { sent: sid, what },
                IngestError::Invalid { msg, .. } => IngestError::Invalid { sent: sid, msg },
                other => other,
            })?,
            LabelSource::Semtag | LabelSource::Bio => {
                s.bio.clone().ok_or(IngestError::Missing { sent: sid, what: "column labels" })?
            }
        };
        if labels.len() != s.len() {
            return Err(IngestError::Invalid { sent: sid, msg: format!("{} labels for {} tokens", labels.len(), s.len()) });
        }
        if filter == SentenceFilter::CoordinationOnly {
            let keep = s.coordination.unwrap_or_else(|| labels.iter().any(|l| l != "O"));
            if !keep {
                continue;
            }
        }
        instances.extend(
            labels
                .into_iter()
                .enumerate()
                .map(|(i, l)| Instance { sent_id: sid, target: Target::Token(i), gold: Gold::Label(l) }),
        );
    }
    let mut ds = TaskDataset::new(source.name(), kind, tokens_of(corpus), instances);
    if filter == SentenceFilter::CoordinationOnly {
        ds.metadata.insert("sentence_filter".into(), "coordination_only".into());
    }
    Ok(ds)
}

/// Regression gold range for event factuality.
const FACTUALITY_RANGE: (f64, f64) = (-3.0, 3.0);

/// One instance per annotated target index.
pub fn compile_sparse_task(corpus: &[AnnotatedSentence], kind: TargetKind) -> Result<TaskDataset, IngestError> {
    let mut instances = Vec::new();
    for (sid, s) in corpus.iter().enumerate() {
        let Some(targets) = &s.sparse_targets else { continue };
        for t in targets {
            let gold = match (&t.gold, kind) {
                (SparseGold::Label(l), TargetKind::Classification) => Gold::Label(l.clone()),
                (SparseGold::Value(v), TargetKind::Regression) => {
                    if !v.is_finite() {
                        return Err(IngestError::Invalid { sent: sid, msg: format!("non-finite gold {v}") });
                    }
                    if *v < FACTUALITY_RANGE.0 || *v > FACTUALITY_RANGE.1 {
                        log::warn!("sentence {sid} target {}: gold {v} outside [-3, 3]; kept", t.index);
                    }
                    Gold::Value(*v)
                }
                (SparseGold::Value(v), TargetKind::Classification) => Gold::Label(v.to_string()),
                (SparseGold::Label(l), TargetKind::Regression) => {
                    return Err(IngestError::Invalid { sent: sid, msg: format!("label {l:?} in a regression task") })
                }
            };
            instances.push(Instance { sent_id: sid, target: Target::Token(t.index), gold });
        }
    }
    let (name, task_kind) = match kind {
        TargetKind::Classification => ("sparse_labeling", TaskKind::SparseLabeling),
        TargetKind::Regression => ("sparse_regression", TaskKind::SparseRegression),
    };
    let mut ds = TaskDataset::new(name, task_kind, tokens_of(corpus), instances);
    ds.sort_instances();
    Ok(ds)
}

/// Gold arcs of one sentence as `(head, dependent, label)`, 0-based.
fn gold_arcs(s: &AnnotatedSentence, sid: usize, source: ArcSource) -> Result<Vec<(usize, usize, String)>, IngestError> {
    match source {
        ArcSource::Syntactic => {
            let heads = s.dep_heads.as_ref().ok_or(IngestError::Missing { sent: sid, what: "dependency heads" })?;
            let labels = s.dep_labels.as_ref().ok_or(IngestError::Missing { sent: sid, what: "dependency labels" })?;
            Ok(heads
                .iter()
                .zip(labels)
                .enumerate()
                .filter(|(_, (&h, _))| h != 0)
                .map(|(i, (&h, l))| (h - 1, i, l.clone()))
                .collect())
        }
        ArcSource::Semantic => {
            let g = s.semgraph.as_ref().ok_or(IngestError::Missing { sent: sid, what: "semantic graph" })?;
            Ok(g.iter().map(|a| (a.head, a.dep, a.label.clone())).collect())
        }
    }
}

fn arc_task_name(source: ArcSource, suffix: &str) -> String {
    match source {
        ArcSource::Syntactic => format!("syn_arc_{suffix}"),
        ArcSource::Semantic => format!("sem_arc_{suffix}"),
    }
}

/// One labelled instance per gold arc. Root attachments have no head token
/// and are skipped.
pub fn compile_dep_arc_classification(
    corpus: &[AnnotatedSentence],
    source: ArcSource,
) -> Result<TaskDataset, IngestError> {
    let mut instances = Vec::new();
    for (sid, s) in corpus.iter().enumerate() {
        for (h, m, l) in gold_arcs(s, sid, source)? {
            instances.push(Instance { sent_id: sid, target: Target::Pair(h, m), gold: Gold::Label(l) });
        }
    }
    let mut ds = TaskDataset::new(arc_task_name(source, "classification"), TaskKind::PairwiseClassification, tokens_of(corpus), instances);
    ds.sort_instances();
    Ok(ds)
}

/// Balanced arc existence: each gold `(head, mod)` is paired with one
/// negative `(rand, mod)`, where `rand` is a uniformly drawn token that is
/// neither `mod` nor any gold head of `mod`. Positives without an eligible
/// negative are dropped.
pub fn compile_dep_arc_prediction(
    corpus: &[AnnotatedSentence],
    source: ArcSource,
    seed: u64,
) -> Result<TaskDataset, IngestError> {
    let mut rng = seeded_rng(seed);
    let mut instances = Vec::new();
    let mut dropped = 0usize;
    for (sid, s) in corpus.iter().enumerate() {
        let mut arcs = gold_arcs(s, sid, source)?;
        arcs.sort_by(|a, b| (a.1, a.0).cmp(&(b.1, b.0)));
        let n = s.len();
        for (h, m, _) in &arcs {
            let eligible: Vec<usize> =
                (0..n).filter(|&j| j != *m && !arcs.iter().any(|(hh, mm, _)| mm == m && *hh == j)).collect();
            if eligible.is_empty() {
                log::info!("sentence {sid}: no negative head for dependent {m}; dropping arc {h}->{m}");
                dropped += 1;
                continue;
            }
            let r = eligible[rng.gen_range(0..eligible.len())];
            instances.push(Instance { sent_id: sid, target: Target::Pair(*h, *m), gold: Gold::Label(POSITIVE.into()) });
            instances.push(Instance { sent_id: sid, target: Target::Pair(r, *m), gold: Gold::Label(NEGATIVE.into()) });
        }
    }
    let mut ds = TaskDataset::new(arc_task_name(source, "prediction"), TaskKind::PairwisePrediction, tokens_of(corpus), instances);
    ds.metadata.insert("dropped_positives".into(), dropped.to_string());
    ds.metadata.insert("seed".into(), seed.to_string());
    Ok(ds)
}

/// Balanced coreference arcs: positives are ordered same-cluster pairs
/// `(a, b)` with `a < b`; each gets one negative `(r, b)` where `r < b` is a
/// mention token of a different cluster.
pub fn compile_coref_arc_prediction(corpus: &[AnnotatedSentence], seed: u64) -> Result<TaskDataset, IngestError> {
    let mut rng = seeded_rng(seed);
    let mut instances = Vec::new();
    let mut dropped = 0usize;
    for (sid, s) in corpus.iter().enumerate() {
        let clusters = s.clusters.as_ref().ok_or(IngestError::Missing { sent: sid, what: "coreference clusters" })?;
        let mut cluster_of = vec![None; s.len()];
        for (c, members) in clusters.iter().enumerate() {
            for &t in members {
                if t >= s.len() {
                    return Err(IngestError::Invalid { sent: sid, msg: format!("mention {t} out of range") });
                }
                cluster_of[t] = Some(c);
            }
        }
        let mut positives = Vec::new();
        for members in clusters {
            let mut m = members.clone();
            m.sort_unstable();
            for (i, &a) in m.iter().enumerate() {
                for &b in &m[i + 1..] {
                    positives.push((a, b));
                }
            }
        }
        positives.sort_unstable_by_key(|&(a, b)| (b, a));
        for (a, b) in positives {
            let own = cluster_of[b];
            let eligible: Vec<usize> = (0..b).filter(|&r| cluster_of[r].is_some() && cluster_of[r] != own).collect();
            if eligible.is_empty() {
                dropped += 1;
                continue;
            }
            let r = eligible[rng.gen_range(0..eligible.len())];
            instances.push(Instance { sent_id: sid, target: Target::Pair(a, b), gold: Gold::Label(POSITIVE.into()) });
            instances.push(Instance { sent_id: sid, target: Target::Pair(r, b), gold: Gold::Label(NEGATIVE.into()) });
        }
    }
    let mut ds = TaskDataset::new("coref_arc_prediction", TaskKind::PairwisePrediction, tokens_of(corpus), instances);
    ds.metadata.insert("dropped_positives".into(), dropped.to_string());
    ds.metadata.insert("seed".into(), seed.to_string());
    ds.metadata.insert("mention_token".into(), "final".into());
    Ok(ds)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::ingest::{parse_conllu, parse_ptb_trees, SparseTarget};

    fn sent(tokens: &[&str]) -> AnnotatedSentence {
        AnnotatedSentence::new(tokens.iter().map(|t| t.to_string()).collect())
    }

    #[test]
    fn token_task_one_instance_per_token() {
        let corpus = parse_ptb_trees("(S (NP (DT the) (NN cat)) (VP (VBD sat)))").unwrap();
        let ds = compile_token_task(&corpus, LabelSource::Xpos).unwrap();
        assert_eq!(ds.instances.len(), 3);
        let ds = compile_token_task(&corpus, LabelSource::Ancestor(1)).unwrap();
        assert_eq!(ds.instances[2].gold, Gold::Label("VP".into()));
    }

    #[test]
    fn empty_corpus() {
        let ds = compile_token_task(&[], LabelSource::Xpos).unwrap();
        assert!(ds.instances.is_empty());
        assert!(ds.label_vocab.is_empty());
    }

    #[test]
    fn missing_labels_name_the_sentence() {
        let corpus = vec![sent(&["a"])];
        match compile_token_task(&corpus, LabelSource::Upos).unwrap_err() {
            IngestError::Missing { sent, .. } => assert_eq!(sent, 0),
            e => panic!("{e:?}"),
        }
    }

    #[test]
    fn bio_source_is_segmentation_and_coordination_filter() {
        let mut a = sent(&["x", "and", "y"]);
        a.bio = Some(vec!["I".into(), "O".into(), "I".into()]);
        let mut b = sent(&["z"]);
        b.bio = Some(vec!["O".into()]);
        let ds = compile_token_task_filtered(&[a, b], LabelSource::Bio, SentenceFilter::CoordinationOnly).unwrap();
        assert_eq!(ds.kind, TaskKind::Segmentation);
        assert_eq!(ds.instances.len(), 3);
        assert!(ds.instances.iter().all(|i| i.sent_id == 0));
    }

    #[test]
    fn sparse_targets() {
        let mut s = sent(&["I", "sat", "on", "the", "mat", "in", "a", "red", "hat", "."]);
        s.sparse_targets = Some(vec![
            SparseTarget { index: 2, gold: SparseGold::Label("p.Locus".into()) },
            SparseTarget { index: 5, gold: SparseGold::Label("p.Locus".into()) },
        ]);
        let ds = compile_sparse_task(&[s], TargetKind::Classification).unwrap();
        assert_eq!(ds.instances.len(), 2);
        assert!(compile_sparse_task(&[sent(&["a"])], TargetKind::Classification).unwrap().instances.is_empty());

        let mut ef = sent(&["a", "b", "c"]);
        ef.sparse_targets = Some(
            [3.0, -3.0, 0.0].iter().enumerate().map(|(i, &v)| SparseTarget { index: i, gold: SparseGold::Value(v) }).collect(),
        );
        let ds = compile_sparse_task(&[ef], TargetKind::Regression).unwrap();
        let golds: Vec<_> = ds.instances.iter().map(|i| i.gold.clone()).collect();
        assert_eq!(golds, vec![Gold::Value(3.0), Gold::Value(-3.0), Gold::Value(0.0)]);
    }

    #[test]
    fn arc_classification_skips_root() {
        let corpus = parse_conllu("1\tJo\t_\t_\t_\t_\t2\tnsubj\t_\t_\n2\tleft\t_\t_\t_\t_\t0\troot\t_\t_\n").unwrap();
        let ds = compile_dep_arc_classification(&corpus, ArcSource::Syntactic).unwrap();
        assert_eq!(ds.instances, vec![Instance { sent_id: 0, target: Target::Pair(1, 0), gold: Gold::Label("nsubj".into()) }]);
    }

    #[test]
    fn two_token_arc_is_dropped() {
        let corpus = parse_conllu("1\tJo\t_\t_\t_\t_\t2\tnsubj\t_\t_\n2\tleft\t_\t_\t_\t_\t0\troot\t_\t_\n").unwrap();
        let ds = compile_dep_arc_prediction(&corpus, ArcSource::Syntactic, 7).unwrap();
        assert!(ds.instances.is_empty());
        assert_eq!(ds.metadata["dropped_positives"], "1");
    }

    #[test]
    fn arc_prediction_balanced_and_deterministic() {
        let text = "1\ta\t_\t_\t_\t_\t2\tdet\t_\t_\n2\tb\t_\t_\t_\t_\t3\tnsubj\t_\t_\n3\tc\t_\t_\t_\t_\t0\troot\t_\t_\n4\td\t_\t_\t_\t_\t3\tobj\t_\t_\n5\te\t_\t_\t_\t_\t4\tamod\t_\t_\n";
        let corpus = parse_conllu(text).unwrap();
        let a = compile_dep_arc_prediction(&corpus, ArcSource::Syntactic, 7).unwrap();
        let b = compile_dep_arc_prediction(&corpus, ArcSource::Syntactic, 7).unwrap();
        assert_eq!(a, b);
        let pos = a.instances.iter().filter(|i| i.gold == Gold::Label(POSITIVE.into())).count();
        assert_eq!(pos, 4);
        assert_eq!(a.instances.len(), 8);
    }

    #[test]
    fn coref_single_cluster_drops_everything() {
        let mut s = sent(&["a", "b", "c"]);
        s.clusters = Some(vec![vec![0, 2]]);
        let ds = compile_coref_arc_prediction(&[s], 1).unwrap();
        assert!(ds.instances.is_empty());
    }

    #[test]
    fn coref_two_clusters() {
        let mut s = sent(&["a", "b", "c", "d", "e", "f", "g"]);
        s.clusters = Some(vec![vec![1, 4], vec![2, 6]]);
        let ds = compile_coref_arc_prediction(&[s], 5).unwrap();
        let positives: Vec<Target> =
            ds.instances.iter().filter(|i| i.gold == Gold::Label(POSITIVE.into())).map(|i| i.target).collect();
        assert_eq!(positives, vec![Target::Pair(1, 4), Target::Pair(2, 6)]);
        for neg in ds.instances.iter().filter(|i| i.gold == Gold::Label(NEGATIVE.into())) {
            let Target::Pair(r, b) = neg.target else { panic!() };
            assert!(r < b);
            let foreign = if b == 4 { [2usize, 6] } else { [1, 4] };
            assert!(foreign.contains(&r));
        }
    }
}
