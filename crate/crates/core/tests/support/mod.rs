//! Independent reference implementations used as test oracles, plus shared
//! fixtures and the checks reused by the acceptance suite.
#![allow(dead_code)]

use eend_vib::data_sim::Conversation;
use eend_vib::losses::LossWeights;
use eend_vib::model::{reparameterize, EendEda, ModelConfig};
use eend_vib::pipeline::{conversation_gradients, train_stage, TrainConfig, TrainOutputs};
use eend_vib::{Graph, SeededRng, Tensor};
use statrs::distribution::{ContinuousCDF, Normal};

/// Every permutation of `0..n` (Heap's algorithm).
pub fn heap_permutations(n: usize) -> Vec<Vec<usize>> {
    fn go(k: usize, a: &mut Vec<usize>, out: &mut Vec<Vec<usize>>) {
        if k <= 1 {
            out.push(a.clone());
            return;
        }
        for i in 0..k - 1 {
            go(k - 1, a, out);
            if k % 2 == 0 {
                a.swap(i, k - 1);
            } else {
                a.swap(0, k - 1);
            }
        }
        go(k - 1, a, out);
    }
    let mut a: Vec<usize> = (0..n).collect();
    let mut out = Vec::new();
    go(n, &mut a, &mut out);
    out
}

fn bce_ref(y: f64, p: f64) -> f64 {
    if y == 1.0 {
        -p.ln()
    } else {
        -(1.0 - p).ln()
    }
}

/// Minimum mean BCE over all row assignments; row `s` of `p` is scored
/// against label row `perm[s]`.
pub fn brute_force_pit(p: &[Vec<f64>], y: &[Vec<f64>]) -> (f64, Vec<usize>) {
    let (s, t) = (p.len(), p[0].len());
    let mut best = (f64::INFINITY, Vec::new());
    for perm in heap_permutations(s) {
        let mut total = 0.0;
        for (i, &r) in perm.iter().enumerate() {
            for k in 0..t {
                total += bce_ref(y[r][k], p[i][k]);
            }
        }
        let v = total / (s * t) as f64;
        if v < best.0 {
            best = (v, perm);
        }
    }
    best
}

pub fn matmul_ref(a: &[Vec<f64>], b: &[Vec<f64>]) -> Vec<Vec<f64>> {
    let (n, k, m) = (a.len(), b.len(), b[0].len());
    let mut c = vec![vec![0.0; m]; n];
    for i in 0..n {
        for j in 0..m {
            for l in 0..k {
                c[i][j] += a[i][l] * b[l][j];
            }
        }
    }
    c
}

/// Stratified Monte-Carlo estimate of `KL(N(mu, sigma²) || N(0, 1))` as
/// `E_q[log q(z) - log p(z)]`: one uniform draw per equal-probability stratum,
/// mapped through the normal quantile function.
pub fn kld_monte_carlo(mu: f64, sigma: f64, n: usize, rng: &mut SeededRng) -> f64 {
    let std = Normal::standard();
    let mut acc = 0.0;
    for i in 0..n {
        let u = (i as f64 + rng.uniform(0.0, 1.0)) / n as f64;
        let eps = std.inverse_cdf(u.clamp(1e-300, 1.0 - 1e-16));
        let z = mu + sigma * eps;
        let log_q = -sigma.ln() - 0.5 * eps * eps;
        let log_p = -0.5 * z * z;
        acc += log_q - log_p;
    }
    acc / n as f64
}

/// Scored totals in seconds.
#[derive(Clone, Copy, Debug, Default, PartialEq)]
pub struct FrameDer {
    pub missed: f64,
    pub false_alarm: f64,
    pub confusion: f64,
    pub scored: f64,
}

impl FrameDer {
    pub fn der(&self) -> f64 {
        (self.missed + self.false_alarm + self.confusion) / self.scored
    }
}

/// `(speaker, onset, offset)`.
pub type Seg = (String, f64, f64);

fn names(segs: &[Seg]) -> Vec<String> {
    let mut v: Vec<String> = segs.iter().map(|s| s.0.clone()).collect();
    v.sort();
    v.dedup();
    v
}

fn active(segs: &[Seg], name: &str, t: f64) -> bool {
    segs.iter().any(|s| s.0 == name && s.1 <= t && t < s.2)
}

/// Best total overlap of an injective partial map from rows to columns.
fn best_assignment(c: &[Vec<usize>]) -> usize {
    fn go(r: usize, c: &[Vec<usize>], used: &mut Vec<bool>) -> usize {
        if r == c.len() {
            return 0;
        }
        let mut best = go(r + 1, c, used);
        for h in 0..used.len() {
            if !used[h] {
                used[h] = true;
                best = best.max(c[r][h] + go(r + 1, c, used));
                used[h] = false;
            }
        }
        best
    }
    let cols = c.first().map_or(0, Vec::len);
    go(0, c, &mut vec![false; cols])
}

/// Brute-force DER on a grid of `step`-second frames, each scored at its
/// centre. Frames within `collar` of any reference boundary are ignored, as
/// are overlapped reference frames when `score_overlap` is false.
pub fn frame_der(
    reference: &[Seg],
    hyp: &[Seg],
    collar: f64,
    score_overlap: bool,
    step: f64,
) -> FrameDer {
    let refs = names(reference);
    let hyps = names(hyp);
    let end = reference.iter().chain(hyp).map(|s| s.2).fold(0.0, f64::max);
    let n_frames = (end / step).ceil() as usize + 1;
    let boundaries: Vec<f64> = reference.iter().flat_map(|s| [s.1, s.2]).collect();
    let mut frames = Vec::new();
    for k in 0..n_frames {
        let t = (k as f64 + 0.5) * step;
        if boundaries.iter().any(|b| (t - b).abs() < collar) {
            continue;
        }
        let ra: Vec<bool> = refs.iter().map(|r| active(reference, r, t)).collect();
        if !score_overlap && ra.iter().filter(|&&a| a).count() > 1 {
            continue;
        }
        let ha: Vec<bool> = hyps.iter().map(|h| active(hyp, h, t)).collect();
        frames.push((ra, ha));
    }
    let mut co = vec![vec![0usize; hyps.len()]; refs.len()];
    for (ra, ha) in &frames {
        for (r, &a) in ra.iter().enumerate() {
            for (h, &b) in ha.iter().enumerate() {
                if a && b {
                    co[r][h] += 1;
                }
            }
        }
    }
    let correct = best_assignment(&co);
    let mut out = FrameDer::default();
    let mut min_sum = 0usize;
    for (ra, ha) in &frames {
        let nr = ra.iter().filter(|&&a| a).count();
        let nh = ha.iter().filter(|&&a| a).count();
        out.missed += nr.saturating_sub(nh) as f64 * step;
        out.false_alarm += nh.saturating_sub(nr) as f64 * step;
        min_sum += nr.min(nh);
        out.scored += nr as f64 * step;
    }
    out.confusion = (min_sum - correct) as f64 * step;
    out
}

/// Best total overlap by exhaustive search: the reference for speaker
/// mapping.
pub fn best_mapping_total(overlap: &[Vec<f64>]) -> f64 {
    fn go(r: usize, c: &[Vec<f64>], used: &mut Vec<bool>) -> f64 {
        if r == c.len() {
            return 0.0;
        }
        let mut best = go(r + 1, c, used);
        for h in 0..used.len() {
            if !used[h] {
                used[h] = true;
                best = best.max(c[r][h] + go(r + 1, c, used));
                used[h] = false;
            }
        }
        best
    }
    let cols = overlap.first().map_or(0, Vec::len);
    go(0, overlap, &mut vec![false; cols])
}

/// Non-touching segments on a `1/100 s` grid: `2k` distinct sorted frame
/// positions below `span` paired up.
pub fn grid_segments(rng: &mut SeededRng, name: &str, k: usize, span: usize) -> Vec<Seg> {
    let mut pos = Vec::new();
    while pos.len() < 2 * k {
        let p = rng.below(span);
        if !pos.contains(&p) {
            pos.push(p);
        }
    }
    pos.sort_unstable();
    pos.chunks(2)
        .map(|c| (name.to_string(), c[0] as f64 / 100.0, c[1] as f64 / 100.0))
        .collect()
}

/// A random scoring case: reference speakers with 1-5 turns each and a
/// hypothesis built from jittered, relabelled copies plus strays.
pub fn random_scoring_case(rng: &mut SeededRng, n_ref: usize) -> (Vec<Seg>, Vec<Seg>) {
    let span = 3000;
    let mut reference = Vec::new();
    for r in 0..n_ref {
        let k = 1 + rng.below(5);
        reference.extend(grid_segments(rng, &format!("ref{r}"), k, span));
    }
    let n_hyp = 1 + rng.below(n_ref + 2);
    let mut hyp = Vec::new();
    for h in 0..n_hyp {
        let name = format!("hyp{h}");
        if h < n_ref && rng.bernoulli(0.7) {
            let src = format!("ref{}", rng.below(n_ref));
            let mut pos: Vec<usize> = reference
                .iter()
                .filter(|s| s.0 == src)
                .flat_map(|s| [s.1, s.2])
                .map(|t| {
                    let jitter = rng.below(81) as i64 - 40;
                    ((t * 100.0).round() as i64 + jitter).clamp(0, span as i64) as usize
                })
                .collect();
            pos.sort_unstable();
            pos.dedup();
            if pos.len() % 2 == 1 {
                pos.pop();
            }
            hyp.extend(
                pos.chunks(2)
                    .map(|c| (name.clone(), c[0] as f64 / 100.0, c[1] as f64 / 100.0)),
            );
        } else {
            let k = 1 + rng.below(4);
            hyp.extend(grid_segments(rng, &name, k, span));
        }
    }
    (reference, hyp)
}

/// A small architecture for fast tests.
pub fn tiny_model_config(feat_dim: usize, dim: usize) -> ModelConfig {
    ModelConfig {
        feat_dim,
        model_dim: dim,
        n_blocks: 1,
        n_heads: 2,
        ffn_dim: 2 * dim,
        max_attractors: 3,
        ..ModelConfig::default()
    }
}

pub fn rows(t: &Tensor) -> Vec<Vec<f64>> {
    t.to_rows()
}

/// `|a - n| / max(|a|, |n|)`, or the absolute difference once both fall
/// below `floor`.
pub fn rel_err(a: f64, n: f64, floor: f64) -> f64 {
    (a - n).abs() / a.abs().max(n.abs()).max(floor)
}

/// `T = 8`, two speakers, each active somewhere.
pub fn tiny_conversation(rng: &mut SeededRng, feat_dim: usize) -> Conversation {
    let t = 8;
    let x = Tensor::new(
        vec![t, feat_dim],
        (0..t * feat_dim).map(|_| rng.normal()).collect(),
    )
    .unwrap();
    let mut y = vec![0.0; 2 * t];
    for v in y.iter_mut() {
        *v = if rng.bernoulli(0.5) { 1.0 } else { 0.0 };
    }
    y[0] = 1.0;
    y[t + t - 1] = 1.0;
    Conversation::new(
        "tiny",
        x,
        Tensor::new(vec![2, t], y).unwrap(),
        vec!["a".into(), "b".into()],
    )
    .unwrap()
}

pub fn objective_config(weights: LossWeights) -> TrainConfig {
    TrainConfig {
        weights,
        augment_rotation: false,
        ..TrainConfig::default()
    }
}

/// Step of the fourth-order central stencil used on whole objectives. The
/// loss carries roughly 1e-13 of rounding noise, which swamps a plain
/// central difference at small steps.
const OBJ_H: f64 = 1e-3;
/// Gradients smaller than this are compared in absolute terms.
const OBJ_FLOOR: f64 = 1e-4;

/// Worst relative error over `n` randomly chosen scalar parameters, with a
/// description of where it occurred.
pub fn objective_gradcheck(
    model: &EendEda,
    conv: &Conversation,
    cfg: &TrainConfig,
    n: usize,
    seed: u64,
) -> (f64, String) {
    let loss = |m: &EendEda| {
        conversation_gradients(m, conv, cfg, &mut SeededRng::new(seed))
            .unwrap()
            .1
            .total
    };
    let (grads, _) = conversation_gradients(model, conv, cfg, &mut SeededRng::new(seed)).unwrap();
    let names: Vec<(String, usize)> = model
        .params()
        .iter()
        .map(|(k, t)| (k.clone(), t.len()))
        .collect();
    let total: usize = names.iter().map(|(_, l)| l).sum();
    let mut pick = SeededRng::new(seed ^ 0xabc);
    let mut worst = (0.0, String::new());
    for _ in 0..n {
        let mut flat = pick.below(total);
        let (name, idx) = names
            .iter()
            .find_map(|(k, l)| {
                if flat < *l {
                    Some((k.clone(), flat))
                } else {
                    flat -= l;
                    None
                }
            })
            .unwrap();
        let at = |d: f64| {
            let mut m = model.clone();
            m.params_mut().get_mut(&name).unwrap().data_mut()[idx] += d;
            loss(&m)
        };
        let numeric = (8.0 * (at(OBJ_H) - at(-OBJ_H)) - (at(2.0 * OBJ_H) - at(-2.0 * OBJ_H)))
            / (12.0 * OBJ_H);
        let analytic = grads.get(&name).unwrap().data()[idx];
        let err = rel_err(analytic, numeric, OBJ_FLOOR);
        if err >= worst.0 {
            worst = (
                err,
                format!("{name}[{idx}]: analytic {analytic:e} numeric {numeric:e}"),
            );
        }
    }
    worst
}

pub fn five_step_data(rng: &mut SeededRng) -> Vec<Conversation> {
    (0..5).map(|_| tiny_conversation(rng, 4)).collect()
}

/// With both bottlenecks off, the stochastic path must reproduce the
/// deterministic model bit for bit: forward pass, losses and five training
/// steps.
pub fn assert_baseline_reduction(seed: u64) {
    let mut rng = SeededRng::new(seed);
    let mut model = EendEda::new(tiny_model_config(4, 8), &mut rng).unwrap();
    model.set_vib(false, false);
    let data = five_step_data(&mut rng);

    for conv in &data {
        let mut g = Graph::new();
        let b = model.bind_constants(&mut g);
        let x = g.constant(conv.x.clone());
        let (p_det, q_det) = model.forward_deterministic(&mut g, &b, x, 3, 2).unwrap();
        let enc = model.encode(&mut g, &b, x, 3, None).unwrap();
        let mut r = SeededRng::new(0);
        let zt = reparameterize(&mut g, &enc.frames, &mut r).unwrap();
        let zs = reparameterize(&mut g, &enc.attractor_enc, &mut r).unwrap();
        let zs_valid = g.slice_rows(zs, 0, 2).unwrap();
        let (p, _) = model
            .outputs_from_latents(&mut g, &b, zt, zs_valid)
            .unwrap();
        let q = model.attractor_existence(&mut g, &b, zs).unwrap();
        assert_eq!(g.value(p).data(), g.value(p_det).data());
        assert_eq!(g.value(q).data(), g.value(q_det).data());
    }

    let base = TrainConfig {
        epochs: 1,
        batch_size: 1,
        ..TrainConfig::default()
    };
    let det = TrainConfig {
        deterministic_baseline: true,
        ..base.clone()
    };
    let a = train_stage(model.clone(), &data, &base, TrainOutputs::default()).unwrap();
    let b = train_stage(model, &data, &det, TrainOutputs::default()).unwrap();
    assert_eq!(a.log.len(), 5);
    for (ra, rb) in a.log.iter().zip(&b.log) {
        assert_eq!(ra.total.to_bits(), rb.total.to_bits());
        assert_eq!(ra.l_d.to_bits(), rb.l_d.to_bits());
        assert_eq!(ra.l_a.to_bits(), rb.l_a.to_bits());
    }
    assert_eq!(a.history[0].params, b.history[0].params);
}
