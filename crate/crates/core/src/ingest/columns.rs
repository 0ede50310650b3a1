use serde::{Deserialize, Serialize};

use super::{AnnotatedSentence, IngestError};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Separator {
    Whitespace,
    Tab,
}

/// Which columns hold the token and the label.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct ColumnSchema {
    pub token_col: usize,
    pub label_col: usize,
    pub separator: Separator,
}

impl ColumnSchema {
    /// CoNLL-2000/2003 style: token first, label last (`label_col` of the
    /// given column count).
    pub fn first_and(label_col: usize) -> Self {
        Self { token_col: 0, label_col, separator: Separator::Whitespace }
    }
}

/// Parses column files (CoNLL-2000/2003, semantic tagging, GED). Labels are
/// kept verbatim in `bio`. `-DOCSTART-` lines are skipped.
pub fn parse_conll_columns(text: &str, schema: ColumnSchema) -> Result<Vec<AnnotatedSentence>, IngestError> {
    let mut out = Vec::new();
    let mut tokens = Vec::new();
    let mut labels = Vec::new();
    let mut width: Option<usize> = None;
    let flush = |tokens: &mut Vec<String>, labels: &mut Vec<String>, out: &mut Vec<AnnotatedSentence>| {
        if !tokens.is_empty() {
            let mut s = AnnotatedSentence::new(std::mem::take(tokens));
            s.bio = Some(std::mem::take(labels));
            out.push(s);
        }
    };
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            flush(&mut tokens, &mut labels, &mut out);
            continue;
        }
        if line.starts_with("-DOCSTART-") {
            flush(&mut tokens, &mut labels, &mut out);
            continue;
        }
        let cols: Vec<&str> = match schema.separator {
            Separator::Whitespace => line.split_whitespace().collect(),
            Separator::Tab => line.split('\t').collect(),
        };
        let w = *width.get_or_insert(cols.len());
        if cols.len() != w {
            return Err(IngestError::Parse {
                line: i + 1,
                msg: format!("ragged row: {} columns, earlier rows have {w}", cols.len()),
            });
        }
        let need = schema.token_col.max(schema.label_col) + 1;
        if cols.len() < need {
            return Err(IngestError::Parse { line: i + 1, msg: format!("{} columns, schema needs {need}", cols.len()) });
        }
        tokens.push(cols[schema.token_col].to_string());
        labels.push(cols[schema.label_col].to_string());
    }
    flush(&mut tokens, &mut labels, &mut out);
    Ok(out)
}
