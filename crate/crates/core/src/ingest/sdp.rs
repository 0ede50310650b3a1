use super::{AnnotatedSentence, IngestError, SemArc};

const FIXED_COLS: usize = 7;

/// Parses the SemEval-2015 SDP format:
/// `id form lemma pos top pred frame arg_1 .. arg_p`, one argument column per
/// predicate (tokens whose `pred` flag is `+`, in sentence order).
pub fn parse_sdp(text: &str) -> Result<Vec<AnnotatedSentence>, IngestError> {
    let mut out = Vec::new();
    let mut rows: Vec<(usize, Vec<&str>)> = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = raw.trim_end_matches('\r');
        if line.trim().is_empty() {
            if !rows.is_empty() {
                out.push(build(std::mem::take(&mut rows))?);
            }
            continue;
        }
        if line.starts_with('#') {
            continue;
        }
        let cols: Vec<&str> = if line.contains('\t') { line.split('\t').collect() } else { line.split_whitespace().collect() };
        if cols.len() < FIXED_COLS {
            return Err(IngestError::Parse { line: i + 1, msg: format!("{} columns, need at least {FIXED_COLS}", cols.len()) });
        }
        rows.push((i + 1, cols));
    }
    if !rows.is_empty() {
        out.push(build(rows)?);
    }
    Ok(out)
}

fn build(rows: Vec<(usize, Vec<&str>)>) -> Result<AnnotatedSentence, IngestError> {
    let preds: Vec<usize> = rows.iter().enumerate().filter(|(_, (_, c))| c[5] == "+").map(|(i, _)| i).collect();
    let mut s = AnnotatedSentence::new(rows.iter().map(|(_, c)| c[1].to_string()).collect());
    s.xpos = Some(rows.iter().map(|(_, c)| c[3].to_string()).collect());
    let mut arcs = Vec::new();
    for (dep, (line, cols)) in rows.iter().enumerate() {
        let args = &cols[FIXED_COLS..];
        if args.len() != preds.len() {
            return Err(IngestError::Parse {
                line: *line,
                msg: format!("{} argument columns for {} predicates", args.len(), preds.len()),
            });
        }
        for (p, cell) in args.iter().enumerate() {
            if *cell != "_" {
                arcs.push(SemArc { head: preds[p], dep, label: cell.to_string() });
            }
        }
    }
    s.semgraph = Some(arcs);
    Ok(s)
}
