use serde::Deserialize;

use super::{AnnotatedSentence, IngestError, SparseTarget};

#[derive(Debug, Deserialize)]
#[serde(untagged)]
enum Mention {
    Token(usize),
    /// inclusive `[start, end]` span
    Span([usize; 2]),
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct Record {
    tokens: Vec<String>,
    #[serde(default)]
    clusters: Option<Vec<Vec<Mention>>>,
    #[serde(default)]
    targets: Option<Vec<(usize, super::SparseGold)>>,
    #[serde(default)]
    labels: Option<Vec<String>>,
    #[serde(default)]
    coordination: Option<bool>,
}

/// Reads one JSON object per line:
/// `{"tokens": [...], "clusters": [[i, [s, e], ...], ...], "targets": [[i, "label" | 1.5], ...],
///   "labels": [...], "coordination": bool}`; all keys but `tokens` optional.
///
/// Span mentions `[s, e]` are reduced to their final token `e`, and the
/// returned flag reports whether any reduction happened.
pub fn parse_jsonl(text: &str) -> Result<(Vec<AnnotatedSentence>, bool), IngestError> {
    let mut out = Vec::new();
    let mut reduced = false;
    for (i, line) in text.lines().enumerate() {
        if line.trim().is_empty() {
            continue;
        }
        let rec: Record =
            serde_json::from_str(line).map_err(|e| IngestError::Parse { line: i + 1, msg: e.to_string() })?;
        let mut s = AnnotatedSentence::new(rec.tokens);
        s.clusters = rec.clusters.map(|cs| {
            cs.into_iter()
                .map(|c| {
                    c.into_iter()
                        .map(|m| match m {
                            Mention::Token(t) => t,
                            Mention::Span([s, e]) => {
                                reduced |= s != e;
                                e
                            }
                        })
                        .collect()
                })
                .collect()
        });
        s.sparse_targets =
            rec.targets.map(|ts| ts.into_iter().map(|(index, gold)| SparseTarget { index, gold }).collect());
        s.bio = rec.labels;
        s.coordination = rec.coordination;
        s.validate(out.len()).map_err(|e| IngestError::Parse { line: i + 1, msg: e.to_string() })?;
        out.push(s);
    }
    Ok((out, reduced))
}
