#![allow(dead_code)]

pub mod grad;
pub mod oracles;

use probekit::ingest::{split_dataset, Gold, Instance, SplitPolicy, Target, TaskDataset, TaskKind};
use probekit::reprstore::{encode_store, ReprStore, SentenceBlock, StoreHeader};
use probekit::tensorcore::{seeded_rng, Rng, Tensor2D};
use rand::Rng as _;
use rand_distr::{Distribution, StandardNormal};

pub fn gaussian(rng: &mut Rng, n: usize) -> Vec<f32> {
    (0..n).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn store_from(name: &str, sentences: &[Vec<Tensor2D<f32>>]) -> ReprStore {
    let l = sentences[0].len();
    let d = sentences[0][0].cols();
    let blocks: Vec<SentenceBlock> = sentences.iter().map(|s| SentenceBlock::from_layers(s).unwrap()).collect();
    let header = StoreHeader::new(name, l, d, blocks.len());
    ReprStore::from_bytes(encode_store(&header, &blocks).unwrap()).unwrap()
}

/// Each sentence alternates two permutation chains, `x[t+1] = perm(x[t-1])`,
/// so the label at `t ≥ 1` (class of the next token) is recoverable from the left
/// context but independent of the current token alone. One frozen layer of
/// type embeddings.
pub fn next_token_task(seed: u64, n_sent: usize, len: usize) -> (TaskDataset, ReprStore) {
    const TYPES: usize = 12;
    const CLASSES: usize = 4;
    const DIM: usize = 16;
    let mut rng = seeded_rng(seed);
    let emb: Vec<Vec<f32>> = (0..TYPES).map(|_| gaussian(&mut rng, DIM)).collect();
    let perm: Vec<usize> = (0..TYPES).map(|i| (5 * i + 7) % TYPES).collect();
    let mut sentences = Vec::new();
    let mut instances = Vec::new();
    let mut layers = Vec::new();
    for s in 0..n_sent {
        let mut x = vec![rng.gen_range(0..TYPES), rng.gen_range(0..TYPES)];
        while x.len() < len + 1 {
            let prev = x[x.len() - 2];
            x.push(perm[prev]);
        }
        for t in 1..len {
            instances.push(Instance {
                sent_id: s,
                target: Target::Token(t),
                gold: Gold::Label(format!("c{}", x[t + 1] % CLASSES)),
            });
        }
        sentences.push(x[..len].iter().map(|v| format!("w{v}")).collect());
        let rows: Vec<f32> = x[..len].iter().flat_map(|&v| emb[v].iter().copied()).collect();
        layers.push(vec![Tensor2D::from_vec(len, DIM, rows).unwrap()]);
    }
    let ds = TaskDataset::new("next-class", TaskKind::SparseLabeling, sentences, instances);
    let ds = split_dataset(ds, &SplitPolicy::standard(seed)).unwrap();
    (ds, store_from("synthetic-next", &layers))
}

/// Three layers; only layer 1 carries the label (class prototype plus small
/// noise). Layers 0 and 2 are independent Gaussian noise.
pub fn layer_signal_task(seed: u64, n_sent: usize, len: usize, signal_noise: f32, noise: f32) -> (TaskDataset, ReprStore) {
    const CLASSES: usize = 4;
    const DIM: usize = 16;
    let mut rng = seeded_rng(seed);
    let protos: Vec<Vec<f32>> = (0..CLASSES).map(|_| gaussian(&mut rng, DIM)).collect();
    let mut sentences = Vec::new();
    let mut instances = Vec::new();
    let mut blocks = Vec::new();
    for s in 0..n_sent {
        let labels: Vec<usize> = (0..len).map(|_| rng.gen_range(0..CLASSES)).collect();
        let l0: Vec<f32> = gaussian(&mut rng, len * DIM).into_iter().map(|v| noise * v).collect();
        let mut l1 = Vec::with_capacity(len * DIM);
        for &c in &labels {
            let noise = gaussian(&mut rng, DIM);
            l1.extend(protos[c].iter().zip(noise).map(|(p, e)| p + signal_noise * e));
        }
        let l2: Vec<f32> = gaussian(&mut rng, len * DIM).into_iter().map(|v| noise * v).collect();
        blocks.push(
            [l0, l1, l2].into_iter().map(|v| Tensor2D::from_vec(len, DIM, v).unwrap()).collect::<Vec<_>>(),
        );
        for (t, &c) in labels.iter().enumerate() {
            instances.push(Instance { sent_id: s, target: Target::Token(t), gold: Gold::Label(format!("L{c}")) });
        }
        sentences.push((0..len).map(|t| format!("tok{t}")).collect());
    }
    let ds = TaskDataset::new("layer-signal", TaskKind::TokenLabeling, sentences, instances);
    let ds = split_dataset(ds, &SplitPolicy::standard(seed)).unwrap();
    (ds, store_from("synthetic-layers", &blocks))
}

/// Windows of a fixed cycle over `types` word types: every type fixes both its
/// successor and its predecessor. One layer of per-type Gaussian embeddings.
pub fn cyclic_corpus(seed: u64, types: usize, n_sent: usize, len: usize) -> (Vec<Vec<String>>, ReprStore) {
    const DIM: usize = 16;
    let mut rng = seeded_rng(seed);
    let emb: Vec<Vec<f32>> = (0..types).map(|_| gaussian(&mut rng, DIM)).collect();
    let mut corpus = Vec::new();
    let mut layers = Vec::new();
    for _ in 0..n_sent {
        let start = rng.gen_range(0..types);
        let ids: Vec<usize> = (0..len).map(|i| (start + i) % types).collect();
        corpus.push(ids.iter().map(|i| format!("w{i}")).collect());
        let rows: Vec<f32> = ids.iter().flat_map(|&i| emb[i].iter().copied()).collect();
        layers.push(vec![Tensor2D::from_vec(len, DIM, rows).unwrap()]);
    }
    (corpus, store_from("synthetic-cycle", &layers))
}

/// I.i.d. Zipf-distributed tokens with pure-noise representations.
pub fn zipf_noise_corpus(seed: u64, types: usize, n_sent: usize, len: usize) -> (Vec<Vec<String>>, ReprStore) {
    const DIM: usize = 16;
    let mut rng = seeded_rng(seed);
    let weights: Vec<f64> = (1..=types).map(|r| 1.0 / r as f64).collect();
    let dist = rand::distributions::WeightedIndex::new(&weights).unwrap();
    let mut corpus = Vec::new();
    let mut layers = Vec::new();
    for _ in 0..n_sent {
        corpus.push((0..len).map(|_| format!("z{}", dist.sample(&mut rng))).collect());
        layers.push(vec![Tensor2D::from_vec(len, DIM, gaussian(&mut rng, len * DIM)).unwrap()]);
    }
    (corpus, store_from("synthetic-noise", &layers))
}

/// Plain words interleaved with rare marker tokens; the label at `t` is the
/// type of the most recent marker strictly before `t` ("none" if there is
/// none). With `coarse`, only the marker type's parity is labelled.
pub fn marker_task(seed: u64, n_sent: usize, len: usize, coarse: bool) -> TaskDataset {
    const WORDS: usize = 10;
    const MARKERS: usize = 4;
    let mut rng = seeded_rng(seed);
    let mut sentences = Vec::new();
    let mut instances = Vec::new();
    for s in 0..n_sent {
        let mut last: Option<usize> = None;
        let mut sent = Vec::with_capacity(len);
        for t in 0..len {
            let label = match last {
                None => "none".to_string(),
                Some(m) if coarse => format!("p{}", m % 2),
                Some(m) => format!("m{m}"),
            };
            instances.push(Instance { sent_id: s, target: Target::Token(t), gold: Gold::Label(label) });
            if rng.gen_bool(0.15) {
                let m = rng.gen_range(0..MARKERS);
                last = Some(m);
                sent.push(format!("m{m}"));
            } else {
                sent.push(format!("w{}", rng.gen_range(0..WORDS)));
            }
        }
        sentences.push(sent);
    }
    let name = if coarse { "marker-parity" } else { "last-marker" };
    let ds = TaskDataset::new(name, TaskKind::TokenLabeling, sentences, instances);
    split_dataset(ds, &SplitPolicy::standard(seed)).unwrap()
}
