//! Independent re-implementations used to cross-check the library.

use std::collections::{BTreeSet, HashSet};
use std::path::Path;

use probekit::ingest::{
    compile_coref_arc_prediction, compile_dep_arc_prediction, AnnotatedSentence, ArcSource, Gold, SemArc, Target,
};
use probekit::metrics::{accuracy, f_beta_tokens, pearson_r, perplexity_from_nlls, span_f1};
use probekit::reprstore::{encode_store, write_store_file, ReprStore, SentenceBlock, StoreError, StoreHeader};
use probekit::tensorcore::Rng;
use rand::Rng as _;

// ---- stores ----

fn random_value(rng: &mut Rng) -> f32 {
    match rng.gen_range(0..10) {
        0 => -0.0,
        1 => f32::MIN_POSITIVE / 8.0,
        2 => f32::MAX,
        3 => rng.gen_range(-1e-30..1e-30),
        _ => rng.gen_range(-1e3..1e3),
    }
}

pub fn random_store(rng: &mut Rng) -> (StoreHeader, Vec<SentenceBlock>) {
    let layers = rng.gen_range(1..5);
    let dim = rng.gen_range(1..9);
    let n = rng.gen_range(0..7);
    let blocks: Vec<SentenceBlock> = (0..n)
        .map(|_| {
            let t = rng.gen_range(0..6);
            let data = (0..layers * t * dim).map(|_| random_value(rng)).collect();
            SentenceBlock::new(layers, t, dim, data).unwrap()
        })
        .collect();
    let name: String = (0..rng.gen_range(1..12)).map(|_| rng.gen_range('a'..='z')).collect();
    (StoreHeader::new(format!("{name}-\"ü\""), layers, dim, n), blocks)
}

/// Writes a random store, reads it back and re-encodes what was read.
pub fn store_round_trip(rng: &mut Rng, dir: &Path, k: usize) -> Result<(), String> {
    let (header, blocks) = random_store(rng);
    let path = dir.join(format!("rt{k}.cwrs"));
    write_store_file(&path, &header, &blocks).map_err(|e| e.to_string())?;
    let on_disk = std::fs::read(&path).map_err(|e| e.to_string())?;
    let store = ReprStore::open(&path).map_err(|e| e.to_string())?;
    if store.header() != &header {
        return Err(format!("store {k}: header changed"));
    }
    let back: Vec<SentenceBlock> =
        (0..store.num_sentences()).map(|s| store.sentence_block(s)).collect::<Result<_, _>>().map_err(|e| e.to_string())?;
    for (s, (a, b)) in blocks.iter().zip(&back).enumerate() {
        let same = a.num_tokens == b.num_tokens
            && a.data().iter().zip(b.data()).all(|(x, y)| x.to_bits() == y.to_bits())
            && a.data().len() == b.data().len();
        if !same {
            return Err(format!("store {k}: sentence {s} differs"));
        }
    }
    let again = encode_store(store.header(), &back).map_err(|e| e.to_string())?;
    if again != on_disk {
        return Err(format!("store {k}: re-encoded bytes differ"));
    }
    Ok(())
}

fn good_store_bytes() -> Vec<u8> {
    let blocks = vec![
        SentenceBlock::new(2, 3, 2, (0..12).map(|v| v as f32).collect()).unwrap(),
        SentenceBlock::new(2, 1, 2, vec![1.0; 4]).unwrap(),
    ];
    encode_store(&StoreHeader::new("m", 2, 2, 2), &blocks).unwrap()
}

fn with_header(json: &str) -> Vec<u8> {
    let mut b = b"CWRSTOR1".to_vec();
    b.extend_from_slice(&(json.len() as u32).to_le_bytes());
    b.extend_from_slice(json.as_bytes());
    b
}

/// Malformed inputs paired with the rejection each must produce.
pub fn malformed_stores() -> Vec<(&'static str, Vec<u8>, fn(&StoreError) -> bool)> {
    let good = good_store_bytes();
    let mut bad_magic = good.clone();
    bad_magic[0] = b'X';
    let truncated = good[..good.len() - 3].to_vec();
    let mut trailing = good.clone();
    trailing.extend_from_slice(&[0, 0, 0, 0]);
    let mut missing_sentence = good.clone();
    missing_sentence.truncate(good.len() - (4 + 4 * 4));
    let header_only = |v: u32| {
        format!(r#"{{"version":{v},"model_name":"m","num_layers":1,"dim":1,"num_sentences":0,"dtype":"f32","byte_order":"LE"}}"#)
    };
    vec![
        ("bad magic", bad_magic, |e| matches!(e, StoreError::BadMagic)),
        ("empty file", Vec::new(), |e| matches!(e, StoreError::BadMagic)),
        ("truncated block", truncated, |e| matches!(e, StoreError::Truncated { .. })),
        ("truncated header length", b"CWRSTOR1\x05".to_vec(), |e| matches!(e, StoreError::Truncated { .. })),
        ("trailing bytes", trailing, |e| matches!(e, StoreError::Inconsistent(_))),
        ("missing sentence", missing_sentence, |e| matches!(e, StoreError::Inconsistent(_))),
        ("header not json", with_header("{not json"), |e| matches!(e, StoreError::Header(_))),
        ("unknown dtype", with_header(&header_only(1).replace("f32", "f16")), |e| matches!(e, StoreError::Header(_))),
        ("version 2", with_header(&header_only(2)), |e| matches!(e, StoreError::Unsupported { .. })),
        ("zero dim", with_header(&header_only(1).replace(r#""dim":1"#, r#""dim":0"#)), |e| {
            matches!(e, StoreError::Dimension(_))
        }),
    ]
}

pub fn check_malformed_stores() -> Result<usize, String> {
    let cases = malformed_stores();
    for (name, bytes, ok) in &cases {
        match ReprStore::from_bytes(bytes.clone()) {
            Ok(_) => return Err(format!("{name}: accepted")),
            Err(e) if !ok(&e) => return Err(format!("{name}: wrong error {e:?}")),
            Err(_) => {}
        }
    }
    match ReprStore::open(Path::new("/nonexistent/dir/x.cwrs")) {
        Err(StoreError::Io { .. }) => {}
        other => return Err(format!("missing file: {other:?}")),
    }
    let store = ReprStore::from_bytes(good_store_bytes()).unwrap();
    if !matches!(store.get_layer(2, 0), Err(StoreError::Index { .. }))
        || !matches!(store.get_layer(0, 2), Err(StoreError::Index { .. }))
    {
        return Err("out-of-range access not rejected".into());
    }
    Ok(cases.len() + 2)
}

// ---- arc compilers ----

fn words(n: usize) -> Vec<String> {
    (0..n).map(|i| format!("t{i}")).collect()
}

/// A random projective-or-not tree: every token but one attaches to an
/// earlier-visited token, the first visited is the root.
pub fn random_dep_sentence(rng: &mut Rng) -> AnnotatedSentence {
    let n = rng.gen_range(1..12);
    let mut order: Vec<usize> = (0..n).collect();
    for i in (1..n).rev() {
        order.swap(i, rng.gen_range(0..=i));
    }
    let mut heads = vec![0usize; n];
    for k in 1..n {
        heads[order[k]] = order[rng.gen_range(0..k)] + 1;
    }
    let mut s = AnnotatedSentence::new(words(n));
    s.dep_labels = Some((0..n).map(|i| if heads[i] == 0 { "root".into() } else { "dep".into() }).collect());
    s.dep_heads = Some(heads);
    s
}

/// Random semantic graph; tokens may have several heads or none.
pub fn random_sem_sentence(rng: &mut Rng) -> AnnotatedSentence {
    let n = rng.gen_range(1..10);
    let mut arcs = BTreeSet::new();
    for _ in 0..rng.gen_range(0..2 * n) {
        let (h, d) = (rng.gen_range(0..n), rng.gen_range(0..n));
        if h != d {
            arcs.insert((h, d));
        }
    }
    let mut s = AnnotatedSentence::new(words(n));
    s.semgraph = Some(arcs.into_iter().map(|(head, dep)| SemArc { head, dep, label: "ARG".into() }).collect());
    s
}

pub fn random_coref_sentence(rng: &mut Rng) -> AnnotatedSentence {
    let n = rng.gen_range(1..16);
    let mut clusters: Vec<Vec<usize>> = vec![Vec::new(); rng.gen_range(1..5)];
    for t in 0..n {
        if rng.gen_bool(0.5) {
            let c = rng.gen_range(0..clusters.len());
            clusters[c].push(t);
        }
    }
    clusters.retain(|c| !c.is_empty());
    let mut s = AnnotatedSentence::new(words(n));
    s.clusters = Some(clusters);
    s
}

#[derive(Debug, Default, Clone, Copy)]
pub struct Balance {
    pub positives: usize,
    pub negatives: usize,
    pub dropped: usize,
}

fn pair(i: &probekit::ingest::Instance) -> (usize, usize) {
    match i.target {
        Target::Pair(a, b) => (a, b),
        Target::Token(_) => panic!("token target in an arc task"),
    }
}

fn is_label(g: &Gold, l: &str) -> bool {
    matches!(g, Gold::Label(x) if x == l)
}

/// Re-scans a compiled head-selection dataset against the raw gold arcs.
pub fn check_head_arcs(corpus: &[AnnotatedSentence], source: ArcSource, seed: u64) -> Result<Balance, String> {
    let ds = compile_dep_arc_prediction(corpus, source, seed).map_err(|e| e.to_string())?;
    let mut b = Balance::default();
    for (sid, s) in corpus.iter().enumerate() {
        let n = s.len();
        let gold: HashSet<(usize, usize)> = match source {
            ArcSource::Syntactic => s
                .dep_heads
                .as_ref()
                .unwrap()
                .iter()
                .enumerate()
                .filter(|(_, &h)| h > 0)
                .map(|(m, &h)| (h - 1, m))
                .collect(),
            ArcSource::Semantic => s.semgraph.as_ref().unwrap().iter().map(|a| (a.head, a.dep)).collect(),
        };
        let mine: Vec<_> = ds.instances.iter().filter(|i| i.sent_id == sid).collect();
        let pos: Vec<(usize, usize)> = mine.iter().filter(|i| is_label(&i.gold, "true")).map(|i| pair(i)).collect();
        let neg: Vec<(usize, usize)> = mine.iter().filter(|i| is_label(&i.gold, "false")).map(|i| pair(i)).collect();
        if pos.len() + neg.len() != mine.len() {
            return Err(format!("sentence {sid}: labels other than true/false"));
        }
        if pos.len() != neg.len() {
            return Err(format!("sentence {sid}: {} positives, {} negatives", pos.len(), neg.len()));
        }
        for p in &pos {
            if !gold.contains(p) {
                return Err(format!("sentence {sid}: positive {p:?} is not a gold arc"));
            }
        }
        for &(r, m) in &neg {
            if r == m || r >= n || gold.contains(&(r, m)) {
                return Err(format!("sentence {sid}: negative ({r}, {m}) violates the constraints"));
            }
        }
        // every positive is paired with a negative on the same dependent
        let mut pm: Vec<usize> = pos.iter().map(|p| p.1).collect();
        let mut nm: Vec<usize> = neg.iter().map(|p| p.1).collect();
        pm.sort_unstable();
        nm.sort_unstable();
        if pm != nm {
            return Err(format!("sentence {sid}: negatives do not mirror the dependents of positives"));
        }
        // a positive is dropped only when its dependent has no eligible head
        let expected: usize = gold
            .iter()
            .filter(|&&(_, m)| (0..n).any(|r| r != m && !gold.contains(&(r, m))))
            .count();
        if pos.len() != expected {
            return Err(format!("sentence {sid}: {} positives kept, {expected} expected", pos.len()));
        }
        b.positives += pos.len();
        b.negatives += neg.len();
        b.dropped += gold.len() - pos.len();
    }
    let recorded: usize = ds.metadata.get("dropped_positives").and_then(|v| v.parse().ok()).unwrap_or(usize::MAX);
    if recorded != b.dropped {
        return Err(format!("metadata records {recorded} dropped positives, rescan finds {}", b.dropped));
    }
    Ok(b)
}

pub fn check_coref_arcs(corpus: &[AnnotatedSentence], seed: u64) -> Result<Balance, String> {
    let ds = compile_coref_arc_prediction(corpus, seed).map_err(|e| e.to_string())?;
    let mut b = Balance::default();
    for (sid, s) in corpus.iter().enumerate() {
        let clusters = s.clusters.as_ref().unwrap();
        let cluster = |t: usize| clusters.iter().position(|c| c.contains(&t));
        let mine: Vec<_> = ds.instances.iter().filter(|i| i.sent_id == sid).collect();
        let pos: Vec<(usize, usize)> = mine.iter().filter(|i| is_label(&i.gold, "true")).map(|i| pair(i)).collect();
        let neg: Vec<(usize, usize)> = mine.iter().filter(|i| is_label(&i.gold, "false")).map(|i| pair(i)).collect();
        if pos.len() != neg.len() || pos.len() + neg.len() != mine.len() {
            return Err(format!("sentence {sid}: {} positives, {} negatives", pos.len(), neg.len()));
        }
        for &(a, bb) in &pos {
            if !(a < bb && cluster(a).is_some() && cluster(a) == cluster(bb)) {
                return Err(format!("sentence {sid}: positive ({a}, {bb}) is not an ordered same-cluster pair"));
            }
        }
        for &(r, bb) in &neg {
            if !(r < bb && cluster(r).is_some() && cluster(bb).is_some() && cluster(r) != cluster(bb)) {
                return Err(format!("sentence {sid}: negative ({r}, {bb}) violates the constraints"));
            }
        }
        let all_pos: usize = clusters.iter().map(|c| c.len() * (c.len() - 1) / 2).sum();
        let expected: usize = clusters
            .iter()
            .flat_map(|c| c.iter().map(move |&x| (c, x)))
            .map(|(c, x)| {
                let earlier_same = c.iter().filter(|&&y| y < x).count();
                let has_neg = (0..x).any(|r| cluster(r).is_some() && !c.contains(&r));
                if has_neg {
                    earlier_same
                } else {
                    0
                }
            })
            .sum();
        if pos.len() != expected {
            return Err(format!("sentence {sid}: {} positives kept, {expected} expected", pos.len()));
        }
        b.positives += pos.len();
        b.negatives += neg.len();
        b.dropped += all_pos - pos.len();
    }
    Ok(b)
}

/// Compiles `n` random fixtures of each arc family and checks balance and
/// the negative-sampling constraints.
pub fn arc_balance(seed: u64, n: usize) -> Result<Balance, String> {
    let mut rng = probekit::tensorcore::seeded_rng(seed);
    let mut total = Balance::default();
    for k in 0..n {
        let corpus: Vec<AnnotatedSentence> = (0..rng.gen_range(1..4)).map(|_| random_dep_sentence(&mut rng)).collect();
        let a = check_head_arcs(&corpus, ArcSource::Syntactic, k as u64).map_err(|e| format!("dep fixture {k}: {e}"))?;
        let corpus: Vec<AnnotatedSentence> = (0..rng.gen_range(1..4)).map(|_| random_sem_sentence(&mut rng)).collect();
        let b = check_head_arcs(&corpus, ArcSource::Semantic, k as u64).map_err(|e| format!("sem fixture {k}: {e}"))?;
        let corpus: Vec<AnnotatedSentence> =
            (0..rng.gen_range(1..4)).map(|_| random_coref_sentence(&mut rng)).collect();
        let c = check_coref_arcs(&corpus, k as u64).map_err(|e| format!("coref fixture {k}: {e}"))?;
        for x in [a, b, c] {
            total.positives += x.positives;
            total.negatives += x.negatives;
            total.dropped += x.dropped;
        }
    }
    Ok(total)
}

// ---- metrics ----

/// Chunks by definition: `[i, j)` of type X is a chunk when position `i`
/// opens an X chunk, every later position continues it and `j` does not.
pub fn brute_spans(tags: &[&str]) -> BTreeSet<(String, usize, usize)> {
    let parse = |t: &str| -> (char, String) {
        if t == "O" {
            ('O', String::new())
        } else if let Some(x) = t.strip_prefix("B-") {
            ('B', x.into())
        } else if let Some(x) = t.strip_prefix("I-") {
            ('I', x.into())
        } else {
            ('I', t.into())
        }
    };
    let n = tags.len();
    let p: Vec<(char, String)> = tags.iter().map(|t| parse(t)).collect();
    let inside = |k: usize, x: &str| p[k].0 != 'O' && p[k].1 == x;
    let mut out = BTreeSet::new();
    for i in 0..n {
        for j in i + 1..=n {
            let x = p[i].1.as_str();
            if p[i].0 == 'O' {
                continue;
            }
            let opens = p[i].0 == 'B' || i == 0 || !inside(i - 1, x);
            let continues = (i + 1..j).all(|k| p[k].0 == 'I' && p[k].1 == x);
            let closes = j == n || !(p[j].0 == 'I' && p[j].1 == x);
            if opens && continues && closes {
                out.insert((x.to_string(), i, j));
            }
        }
    }
    out
}

pub fn brute_f1(preds: &[Vec<&str>], golds: &[Vec<&str>]) -> f64 {
    let (mut np, mut ng, mut nm) = (0.0, 0.0, 0.0);
    for (p, g) in preds.iter().zip(golds) {
        let (ps, gs) = (brute_spans(p), brute_spans(g));
        np += ps.len() as f64;
        ng += gs.len() as f64;
        nm += ps.intersection(&gs).count() as f64;
    }
    if np == 0.0 && ng == 0.0 {
        return 100.0;
    }
    if nm == 0.0 {
        return 0.0;
    }
    let (p, r) = (nm / np, nm / ng);
    100.0 * 2.0 * p * r / (p + r)
}

const TAGS: [&str; 7] = ["O", "B-A", "I-A", "B-B", "I-B", "A", "O"];

pub fn random_tags(rng: &mut Rng, n: usize) -> Vec<&'static str> {
    (0..n).map(|_| TAGS[rng.gen_range(0..TAGS.len())]).collect()
}

/// Largest absolute deviation between library metrics and the oracles over
/// `n` random fixtures per metric.
pub fn metric_deviation(seed: u64, n: usize) -> Result<f64, String> {
    let mut rng = probekit::tensorcore::seeded_rng(seed);
    let mut worst: f64 = 0.0;
    let mut note = |lib: f64, oracle: f64| worst = worst.max((lib - oracle).abs());
    for _ in 0..n {
        let k = rng.gen_range(1..5);
        let lens: Vec<usize> = (0..k).map(|_| rng.gen_range(0..10)).collect();
        let golds: Vec<Vec<&str>> = lens.iter().map(|&l| random_tags(&mut rng, l)).collect();
        let preds: Vec<Vec<&str>> = golds
            .iter()
            .map(|g| g.iter().map(|&t| if rng.gen_bool(0.7) { t } else { TAGS[rng.gen_range(0..TAGS.len())] }).collect())
            .collect();
        let lib = span_f1(&preds, &golds).map_err(|e| e.to_string())?.value;
        note(lib, brute_f1(&preds, &golds));

        let m = rng.gen_range(1..40);
        let g: Vec<u8> = (0..m).map(|_| rng.gen_range(0..3)).collect();
        let p: Vec<u8> = (0..m).map(|_| rng.gen_range(0..3)).collect();
        let hits = g.iter().zip(&p).filter(|(a, b)| a == b).count();
        note(accuracy(&p, &g).map_err(|e| e.to_string())?.value, 100.0 * hits as f64 / m as f64);

        let gb: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.4)).collect();
        let pb: Vec<bool> = (0..m).map(|_| rng.gen_bool(0.4)).collect();
        let beta: f64 = [0.5, 1.0, 2.0][rng.gen_range(0..3)];
        note(f_beta_tokens(&pb, &gb, beta).map_err(|e| e.to_string())?.value, fbeta_oracle(&pb, &gb, beta));

        let x: Vec<f64> = (0..m + 2).map(|_| rng.gen_range(-3.0..3.0)).collect();
        let y: Vec<f64> = x.iter().map(|v| 0.5 * v + rng.gen_range(-2.0..2.0)).collect();
        note(pearson_r(&x, &y).map_err(|e| e.to_string())?.value, pearson_oracle(&x, &y));

        let nll: Vec<f64> = (0..m).map(|_| rng.gen_range(0.0..6.0)).collect();
        let probs: Vec<f64> = nll.iter().map(|v| (-v).exp()).collect();
        let geo = probs.iter().map(|p| p.powf(-1.0 / m as f64)).product::<f64>();
        let lib = perplexity_from_nlls(&nll).map_err(|e| e.to_string())?;
        note(lib / geo - 1.0, 0.0);
    }
    Ok(worst)
}

fn fbeta_oracle(p: &[bool], g: &[bool], beta: f64) -> f64 {
    let count = |f: &dyn Fn(bool, bool) -> bool| p.iter().zip(g).filter(|(&a, &b)| f(a, b)).count() as f64;
    let tp = count(&|a, b| a && b);
    let npred = count(&|a, _| a);
    let ngold = count(&|_, b| b);
    if npred == 0.0 && ngold == 0.0 {
        return 100.0;
    }
    if tp == 0.0 {
        return 0.0;
    }
    let b2 = beta * beta;
    100.0 * (1.0 + b2) * tp / (b2 * ngold + npred)
}

/// Two-pass textbook formula via covariance and standard deviations.
pub fn pearson_oracle(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let cov: f64 = x.iter().zip(y).map(|(a, b)| (a - mx) * (b - my)).sum::<f64>() / n;
    let sx = (x.iter().map(|a| (a - mx).powi(2)).sum::<f64>() / n).sqrt();
    let sy = (y.iter().map(|b| (b - my).powi(2)).sum::<f64>() / n).sqrt();
    100.0 * cov / (sx * sy)
}

// ---- language modelling ----

/// Forward and backward perplexity of maximum-likelihood unigram models fit
/// on the train sentences of the probe's split and scored on its eval
/// sentences. Forward targets are tokens 1.., backward targets ..T-1.
pub fn unigram_perplexities(corpus: &[Vec<String>], seed: u64) -> (f64, f64) {
    let (train, eval) = probekit::bilmprobe::split_corpus(corpus.len(), seed).unwrap();
    let score = |targets: &dyn Fn(&[String]) -> &[String]| {
        let mut counts = std::collections::HashMap::<&str, f64>::new();
        let mut total = 0.0;
        for &s in &train {
            for t in targets(&corpus[s]) {
                *counts.entry(t.as_str()).or_default() += 1.0;
                total += 1.0;
            }
        }
        let (mut nll, mut n) = (0.0, 0.0);
        for &s in &eval {
            for t in targets(&corpus[s]) {
                let c = counts.get(t.as_str()).copied().expect("eval type unseen in train");
                nll -= (c / total).ln();
                n += 1.0;
            }
        }
        (nll / n).exp()
    };
    (score(&|s| &s[1..]), score(&|s| &s[..s.len() - 1]))
}
