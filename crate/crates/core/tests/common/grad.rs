//! Central finite differences against the hand-written backward passes, in f64.

use probekit::probes::{Arch, Head, InputSource, ProbeConfig, ProbeInput, ProbeModel, Targets};
use probekit::tensorcore::{
    linear_backward, linear_forward, mse, relu, relu_backward, scalar_mix, scalar_mix_backward, softmax_xent,
    LstmParams, ParamSet, Rng, ScalarMixParams, SeqLayout, Tensor2D,
};
use rand::seq::SliceRandom;
use rand::Rng as _;

pub const STEP: f64 = 1e-5;
pub const TOLERANCE: f64 = 1e-4;

/// `|a − n| / max(|a|, |n|, 1e-6)`; the floor keeps gradients that are zero
/// up to rounding from producing meaningless ratios.
pub fn rel_err(a: f64, n: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(1e-6)
}

fn numeric(theta: &[f64], f: &dyn Fn(&[f64]) -> f64, coords: &[usize]) -> Vec<f64> {
    let mut t = theta.to_vec();
    coords
        .iter()
        .map(|&i| {
            let orig = t[i];
            t[i] = orig + STEP;
            let up = f(&t);
            t[i] = orig - STEP;
            let down = f(&t);
            t[i] = orig;
            (up - down) / (2.0 * STEP)
        })
        .collect()
}

/// Max relative error over all coordinates of `theta`.
fn compare(theta: &[f64], analytic: &[f64], f: &dyn Fn(&[f64]) -> f64) -> f64 {
    assert_eq!(theta.len(), analytic.len());
    let coords: Vec<usize> = (0..theta.len()).collect();
    let num = numeric(theta, f, &coords);
    coords.iter().map(|&i| rel_err(analytic[i], num[i])).fold(0.0, f64::max)
}

fn uniform(rng: &mut Rng, n: usize, scale: f64) -> Vec<f64> {
    (0..n).map(|_| rng.gen_range(-scale..scale)).collect()
}

fn tensor(rows: usize, cols: usize, v: &[f64]) -> Tensor2D<f64> {
    Tensor2D::from_vec(rows, cols, v.to_vec()).unwrap()
}

/// Contracts an output with fixed random weights so every output coordinate
/// gets a distinct upstream gradient.
fn contract(y: &Tensor2D<f64>, r: &[f64]) -> f64 {
    y.data().iter().zip(r).map(|(a, b)| a * b).sum()
}

pub fn linear(rng: &mut Rng) -> f64 {
    let (n, d, k) = (rng.gen_range(1..5), rng.gen_range(1..6), rng.gen_range(1..6));
    let theta = uniform(rng, n * d + d * k + k, 1.0);
    let r = uniform(rng, n * k, 1.0);
    let split = |t: &[f64]| (tensor(n, d, &t[..n * d]), tensor(d, k, &t[n * d..n * d + d * k]), t[n * d + d * k..].to_vec());
    let f = |t: &[f64]| {
        let (x, w, b) = split(t);
        contract(&linear_forward(&x, &w, &b).unwrap(), &r)
    };
    let (x, w, _) = split(&theta);
    let g = linear_backward(&x, &w, &tensor(n, k, &r)).unwrap();
    let analytic: Vec<f64> = g.dx.data().iter().chain(g.dw.data()).chain(&g.db).copied().collect();
    compare(&theta, &analytic, &f)
}

pub fn relu_check(rng: &mut Rng) -> f64 {
    let (n, d) = (rng.gen_range(1..5), rng.gen_range(1..8));
    // keep inputs away from the kink at zero
    let theta: Vec<f64> = uniform(rng, n * d, 1.0).into_iter().map(|v| if v.abs() < 0.01 { v + 0.05 } else { v }).collect();
    let r = uniform(rng, n * d, 1.0);
    let f = |t: &[f64]| contract(&relu(&tensor(n, d, t)), &r);
    let g = relu_backward(&tensor(n, d, &theta), &tensor(n, d, &r)).unwrap();
    compare(&theta, g.data(), &f)
}

pub fn softmax_ce(rng: &mut Rng) -> f64 {
    let (n, k) = (rng.gen_range(1..6), rng.gen_range(2..7));
    let theta = uniform(rng, n * k, 3.0);
    let gold: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
    let f = |t: &[f64]| softmax_xent(&tensor(n, k, t), &gold).unwrap().0;
    let (_, g) = softmax_xent(&tensor(n, k, &theta), &gold).unwrap();
    compare(&theta, g.data(), &f)
}

pub fn mse_check(rng: &mut Rng) -> f64 {
    let n = rng.gen_range(1..10);
    let theta = uniform(rng, n, 3.0);
    let gold = uniform(rng, n, 3.0);
    let f = |t: &[f64]| mse(t, &gold).unwrap().0;
    let (_, g) = mse(&theta, &gold).unwrap();
    compare(&theta, &g, &f)
}

fn lstm_from(t: &[f64], input: usize, hidden: usize) -> LstmParams<f64> {
    let mut p = LstmParams::<f64>::zeros(input, hidden);
    let mut off = 0;
    for s in p.slices_mut() {
        s.copy_from_slice(&t[off..off + s.len()]);
        off += s.len();
    }
    p
}

/// Three packed steps; active rows never increase.
pub fn lstm_steps(rng: &mut Rng) -> f64 {
    let (input, hidden) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let mut rows = [rng.gen_range(1..4), 0, 0];
    rows[1] = rng.gen_range(1..=rows[0]);
    rows[2] = rng.gen_range(1..=rows[1]);
    let np = LstmParams::<f64>::count(input, hidden);
    let nx: usize = rows.iter().map(|r| r * input).sum();
    let theta = uniform(rng, np + nx, 1.0);
    let r: Vec<Vec<f64>> = rows.iter().map(|&n| uniform(rng, n * hidden, 1.0)).collect();
    let xs_of = |t: &[f64]| {
        let mut off = np;
        rows.iter()
            .map(|&n| {
                let x = tensor(n, input, &t[off..off + n * input]);
                off += n * input;
                x
            })
            .collect::<Vec<_>>()
    };
    let f = |t: &[f64]| {
        let p = lstm_from(&t[..np], input, hidden);
        let (hs, _) = p.forward_steps(&xs_of(t)).unwrap();
        hs.iter().zip(&r).map(|(h, rr)| contract(h, rr)).sum()
    };
    let p = lstm_from(&theta[..np], input, hidden);
    let (_, trace) = p.forward_steps(&xs_of(&theta)).unwrap();
    let dhs: Vec<Tensor2D<f64>> = rows.iter().zip(&r).map(|(&n, rr)| tensor(n, hidden, rr)).collect();
    let mut grad = p.zeros_like();
    let dxs = p.backward_steps(&trace, &dhs, &mut grad).unwrap();
    let mut analytic: Vec<f64> = grad.slices().concat();
    for dx in &dxs {
        analytic.extend_from_slice(dx.data());
    }
    compare(&theta, &analytic, &f)
}

/// Token-level path: sequences of mixed lengths in either direction.
pub fn lstm_tokens(rng: &mut Rng) -> f64 {
    let (input, hidden) = (rng.gen_range(1..5), rng.gen_range(1..5));
    let lens: Vec<usize> = (0..rng.gen_range(1..4)).map(|_| rng.gen_range(1..4)).collect();
    let reverse = rng.gen_bool(0.5);
    let layout = SeqLayout::contiguous(&lens);
    let n: usize = lens.iter().sum();
    let np = LstmParams::<f64>::count(input, hidden);
    let theta = uniform(rng, np + n * input, 1.0);
    let r = uniform(rng, n * hidden, 1.0);
    let f = |t: &[f64]| {
        let p = lstm_from(&t[..np], input, hidden);
        let (h, _) = p.forward_tokens(&layout, &tensor(n, input, &t[np..]), reverse).unwrap();
        contract(&h, &r)
    };
    let p = lstm_from(&theta[..np], input, hidden);
    let (_, trace) = p.forward_tokens(&layout, &tensor(n, input, &theta[np..]), reverse).unwrap();
    let mut grad = p.zeros_like();
    let dx = p.backward_tokens(&layout, &trace, &tensor(n, hidden, &r), reverse, &mut grad).unwrap();
    let mut analytic: Vec<f64> = grad.slices().concat();
    analytic.extend_from_slice(dx.data());
    compare(&theta, &analytic, &f)
}

pub fn mix(rng: &mut Rng) -> f64 {
    let (l, n, d) = (rng.gen_range(1..5), rng.gen_range(1..4), rng.gen_range(1..5));
    let theta = uniform(rng, l + 1 + l * n * d, 2.0);
    let r = uniform(rng, n * d, 1.0);
    let split = |t: &[f64]| {
        let params = ScalarMixParams { s: t[..l].to_vec(), gamma: t[l] };
        let layers: Vec<Tensor2D<f64>> =
            (0..l).map(|j| tensor(n, d, &t[l + 1 + j * n * d..l + 1 + (j + 1) * n * d])).collect();
        (params, layers)
    };
    let f = |t: &[f64]| {
        let (p, layers) = split(t);
        contract(&scalar_mix(&layers.iter().collect::<Vec<_>>(), &p).unwrap(), &r)
    };
    let (p, layers) = split(&theta);
    let g = scalar_mix_backward(&layers.iter().collect::<Vec<_>>(), &p, &tensor(n, d, &r)).unwrap();
    let mut analytic = g.ds.clone();
    analytic.push(g.dgamma);
    for dl in &g.dlayers {
        analytic.extend_from_slice(dl.data());
    }
    compare(&theta, &analytic, &f)
}

/// Whole-probe check on a random sample of parameter coordinates (the fixed
/// architecture sizes make exhaustive differences too slow).
pub fn probe(rng: &mut Rng, arch: Arch, mixed: bool, pairwise: bool, coords: usize) -> f64 {
    let d = rng.gen_range(2..5);
    let lens: Vec<usize> = (0..rng.gen_range(1..3)).map(|_| rng.gen_range(1..4)).collect();
    let n: usize = lens.iter().sum();
    let num_layers = 3;
    let input = if mixed { InputSource::ScalarMix(num_layers) } else { InputSource::Layer(0) };
    let head = if rng.gen_bool(0.5) { Head::Classify(3) } else { Head::Regress };
    let cfg = ProbeConfig::new(arch, input, head).pairwise(pairwise);
    let mut model = ProbeModel::<f64>::new(cfg, d, rng.gen()).unwrap();
    if let Some(m) = model.params.mix.as_mut() {
        m.s = uniform(rng, num_layers, 1.0);
        m.gamma = 1.3;
    }
    let used = if mixed { num_layers } else { 1 };
    let layers: Vec<Tensor2D<f64>> = (0..used).map(|_| tensor(n, d, &uniform(rng, n * d, 1.0))).collect();
    let mut segments = Vec::new();
    let mut off = 0;
    for &l in &lens {
        segments.push((off, l));
        off += l;
    }
    let targets = if pairwise {
        Targets::Pairs((0..3).map(|_| (rng.gen_range(0..n), rng.gen_range(0..n))).collect())
    } else {
        Targets::Tokens((0..n).filter(|_| rng.gen_bool(0.7)).chain(std::iter::once(n - 1)).collect())
    };
    let input = ProbeInput { layers, segments, targets };
    let (y, cache) = model.forward(&input).unwrap();
    let r = uniform(rng, y.rows() * y.cols(), 1.0);
    let mut grad = model.params.zeros_like();
    model.backward(&input, &cache, &tensor(y.rows(), y.cols(), &r), &mut grad).unwrap();
    let analytic: Vec<f64> = grad.slices().concat();

    let sizes: Vec<usize> = model.params.slices().iter().map(|s| s.len()).collect();
    let total: usize = sizes.iter().sum();
    let mut picks: Vec<usize> = (0..total).collect();
    picks.shuffle(rng);
    picks.truncate(coords);
    // always include the mix weights and gamma when present
    if mixed {
        picks.extend(0..num_layers + 1);
    }
    let theta: Vec<f64> = model.params.slices().concat();
    let signs = |c: &probekit::probes::ProbeCache<f64>| -> Vec<bool> {
        c.hidden_pre().map_or_else(Vec::new, |h| h.data().iter().map(|&v| v > 0.0).collect())
    };
    let base = signs(&cache);
    let eval = |t: &[f64]| {
        let mut m = model.clone();
        let mut off = 0;
        for s in m.params.slices_mut() {
            s.copy_from_slice(&t[off..off + s.len()]);
            off += s.len();
        }
        let (y, c) = m.forward(&input).unwrap();
        (contract(&y, &r), signs(&c) == base)
    };
    // Coordinates whose perturbation flips a ReLU input sit on a kink, where
    // the loss is not differentiable; they are skipped.
    let mut worst: f64 = 0.0;
    let mut checked = 0;
    let mut t = theta.clone();
    for &i in &picks {
        let orig = t[i];
        t[i] = orig + STEP;
        let (up, up_ok) = eval(&t);
        t[i] = orig - STEP;
        let (down, down_ok) = eval(&t);
        t[i] = orig;
        if up_ok && down_ok {
            checked += 1;
            worst = worst.max(rel_err(analytic[i], (up - down) / (2.0 * STEP)));
        }
    }
    assert!(checked * 4 >= picks.len() * 3, "only {checked} of {} coordinates away from kinks", picks.len());
    worst
}
