use super::{AnnotatedSentence, IngestError};

/// Parses 10-column CoNLL-U. Multiword-token ranges (`1-2`) and empty nodes
/// (`1.1`) are skipped.
pub fn parse_conllu(text: &str) -> Result<Vec<AnnotatedSentence>, IngestError> {
    let mut out = Vec::new();
    let mut rows: Vec<(usize, Vec<&str>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line_no = i + 1;
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !rows.is_empty() {
                out.push(build(std::mem::take(&mut rows), out.len())?);
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = if line.contains('\t') { line.split('\t').collect() } else { line.split_whitespace().collect() };
        if cols.len() != 10 {
            return Err(IngestError::Parse { line: line_no, msg: format!("expected 10 columns, found {}", cols.len()) });
        }
        if cols[0].contains('-') || cols[0].contains('.') {
            continue;
        }
        rows.push((line_no, cols));
    }
    if !rows.is_empty() {
        out.push(build(rows, out.len())?);
    }
    Ok(out)
}

fn build(rows: Vec<(usize, Vec<&str>)>, sent: usize) -> Result<AnnotatedSentence, IngestError> {
    let mut s = AnnotatedSentence::default();
    let (mut upos, mut xpos, mut heads, mut labels) = (Vec::new(), Vec::new(), Vec::new(), Vec::new());
    for (k, (line, cols)) in rows.iter().enumerate() {
        let id: usize = cols[0]
            .parse()
            .map_err(|_| IngestError::Parse { line: *line, msg: format!("non-integer token id {:?}", cols[0]) })?;
        if id != k + 1 {
            return Err(IngestError::Parse { line: *line, msg: format!("token id {id} out of sequence") });
        }
        let head: usize = cols[6]
            .parse()
            .map_err(|_| IngestError::Parse { line: *line, msg: format!("non-integer head {:?}", cols[6]) })?;
        s.tokens.push(cols[1].to_string());
        upos.push(cols[3].to_string());
        xpos.push(cols[4].to_string());
        heads.push(head);
        labels.push(cols[7].to_string());
    }
    s.upos = Some(upos);
    s.xpos = Some(xpos);
    s.dep_heads = Some(heads);
    s.dep_labels = Some(labels);
    s.validate(sent).map_err(|e| IngestError::Parse { line: rows[0].0, msg: e.to_string() })?;
    Ok(s)
}
