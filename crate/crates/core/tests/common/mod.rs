//! Brute-force oracles and random instance builders shared by the
//! integration tests and the acceptance harness. Nothing here calls the
//! library code it is meant to check.
#![allow(dead_code)]

use rand::Rng;
use rand_chacha::ChaCha8Rng;
use tailseg_core::autodiff::Tape;
use tailseg_core::loss::{feature_loss_graph, seg_ce_graph, LossConfig};
use tailseg_core::model::{backbone_graph, classifier_graph, BackboneParams, ClassifierParams, INPUT_DIM};
use tailseg_core::Tensor;

pub fn random_tensor(rng: &mut ChaCha8Rng, rows: usize, cols: usize, lo: f64, hi: f64) -> Tensor {
    let data = (0..rows * cols).map(|_| rng.random_range(lo..hi)).collect();
    Tensor::new(rows, cols, data).unwrap()
}

/// Row-stochastic matrix with a random sharpness per row, so some rows are
/// confident and others nearly flat.
pub fn random_probs(rng: &mut ChaCha8Rng, n: usize, c: usize) -> Tensor {
    let mut t = Tensor::zeros(n, c);
    for r in 0..n {
        let sharp = rng.random_range(0.5..10.0);
        let row = t.row_mut(r);
        for v in row.iter_mut() {
            *v = (sharp * rng.random::<f64>()).exp();
        }
        let s: f64 = row.iter().sum();
        row.iter_mut().for_each(|v| *v /= s);
    }
    t
}

/// A random non-empty subset of `0..n`, ascending.
pub fn random_subset(rng: &mut ChaCha8Rng, n: usize, keep: f64) -> Vec<usize> {
    let mut rows: Vec<usize> = (0..n).filter(|_| rng.random_bool(keep)).collect();
    if rows.is_empty() {
        rows.push(rng.random_range(0..n));
    }
    rows
}

/// Imbalance ratios `≥ 1` with at least one class at exactly 1.
pub fn random_ratios(rng: &mut ChaCha8Rng, c: usize) -> Vec<f64> {
    let mut r: Vec<f64> = (0..c).map(|_| rng.random_range(1.0..60.0)).collect();
    r[rng.random_range(0..c)] = 1.0;
    r
}

#[derive(Debug, Clone, Copy)]
pub struct SelectParams {
    pub window: f64,
    pub floor: f64,
    pub beta: f64,
    /// `None` makes every class eligible for round two.
    pub tail_fraction: Option<f64>,
    pub tail_tolerant: bool,
}

fn first_argmax(row: &[f64]) -> usize {
    let mut best = 0;
    for c in 1..row.len() {
        if row[c] > row[best] {
            best = c;
        }
    }
    best
}

/// Two-round selection as a plain double loop. Returns
/// `(point, class, is_round_two)` sorted by point.
pub fn select_oracle(
    p: &Tensor,
    candidates: &[usize],
    ratios: &[f64],
    sp: &SelectParams,
    two_round: bool,
) -> Vec<(usize, usize, bool)> {
    let c = p.cols();
    let mut cer = vec![0.0; c];
    for k in 0..c {
        let mut m = f64::NEG_INFINITY;
        for &i in candidates {
            m = m.max(p.get(i, k));
        }
        cer[k] = (m - sp.window).max(sp.floor);
    }

    let mut out = Vec::new();
    let mut remaining = Vec::new();
    for &i in candidates {
        let mut best: Option<usize> = None;
        for k in 0..c {
            if p.get(i, k) > cer[k] {
                if best.is_none() || p.get(i, k) > p.get(i, best.unwrap()) {
                    best = Some(k);
                }
            }
        }
        match best {
            Some(k) => out.push((i, k, false)),
            None => remaining.push(i),
        }
    }
    if !two_round || remaining.is_empty() {
        return out;
    }

    // Eligible classes: repeatedly take the least-predicted class, the higher
    // id winning ties.
    let mut tail = vec![false; c];
    match sp.tail_fraction {
        None => tail.iter_mut().for_each(|t| *t = true),
        Some(f) => {
            let mut counts = vec![0usize; c];
            for &i in candidates {
                counts[first_argmax(p.row(i))] += 1;
            }
            let take = ((c as f64 * f).ceil() as usize).clamp(1, c);
            for _ in 0..take {
                let mut pick = None;
                for k in (0..c).rev() {
                    if tail[k] {
                        continue;
                    }
                    if pick.is_none_or(|q: usize| counts[k] < counts[q]) {
                        pick = Some(k);
                    }
                }
                tail[pick.unwrap()] = true;
            }
        }
    }

    let rho_max = ratios.iter().copied().fold(1.0, f64::max);
    let mut uncer = vec![0.0; c];
    for k in 0..c {
        let bound = if sp.tail_tolerant {
            (ratios[k] / rho_max).powf(sp.beta)
        } else {
            (1.0 / ratios[k]).powf(sp.beta)
        };
        let mut m = f64::NEG_INFINITY;
        for &i in &remaining {
            m = m.max(p.get(i, k));
        }
        uncer[k] = m.min(bound);
    }
    for &i in &remaining {
        let k = first_argmax(p.row(i));
        if tail[k] && p.get(i, k) > uncer[k] {
            out.push((i, k, true));
        }
    }
    out.sort_by_key(|e| e.0);
    out
}

#[derive(Debug, Clone, PartialEq)]
pub struct MetricsOracle {
    pub iou: Vec<Option<f64>>,
    pub miou: f64,
    pub oa: f64,
    /// Mean IoU per group index (0 head, 1 waist, 2 tail).
    pub groups: [Option<f64>; 3],
}

/// Counts TP/FP/FN point by point. `group_of[c]` is 0, 1 or 2.
pub fn metrics_oracle(pred: &[usize], truth: &[usize], classes: usize, group_of: &[usize]) -> MetricsOracle {
    let mut iou = Vec::with_capacity(classes);
    for k in 0..classes {
        let (mut tp, mut fp, mut fn_) = (0u64, 0u64, 0u64);
        for (&p, &t) in pred.iter().zip(truth) {
            match (p == k, t == k) {
                (true, true) => tp += 1,
                (true, false) => fp += 1,
                (false, true) => fn_ += 1,
                _ => {}
            }
        }
        let d = tp + fp + fn_;
        iou.push((d > 0).then(|| tp as f64 / d as f64));
    }
    let avg = |ks: &mut dyn Iterator<Item = usize>| {
        let (mut s, mut n) = (0.0, 0);
        for k in ks {
            if let Some(v) = iou[k] {
                s += v;
                n += 1;
            }
        }
        (n > 0).then(|| s / n as f64)
    };
    let correct = pred.iter().zip(truth).filter(|(p, t)| p == t).count();
    MetricsOracle {
        miou: avg(&mut (0..classes)).unwrap_or(0.0),
        oa: correct as f64 / pred.len() as f64,
        groups: [0, 1, 2].map(|g| avg(&mut (0..classes).filter(|&k| group_of[k] == g))),
        iou: iou.clone(),
    }
}

/// `(point, class)` pairs over a random subset of rows.
pub fn random_targets(rng: &mut ChaCha8Rng, n: usize, c: usize, keep: f64) -> Vec<(usize, usize)> {
    random_subset(rng, n, keep)
        .into_iter()
        .map(|i| (i, rng.random_range(0..c)))
        .collect()
}

/// A feature-step graph: trainable backbone, frozen classifier, focal term on
/// pseudo targets plus cross-entropy on all targets. Redrawn until no ReLU
/// input sits within `margin` of its kink. Returns the tape and its inputs.
pub fn feature_instance(rng: &mut ChaCha8Rng, margin: f64) -> (Tape, Vec<Tensor>) {
    loop {
        let n = rng.random_range(4..=64);
        let c = rng.random_range(2..=5);
        let h = rng.random_range(2..=16);
        let x = random_tensor(rng, n, INPUT_DIM, -1.0, 1.0);
        let backbone = BackboneParams::init(h, rng);
        let classifier = ClassifierParams::init(h, c, rng);
        let seg = random_targets(rng, n, c, 0.4);
        let pseudo = random_targets(rng, n, c, 0.5);
        let gammas: Vec<f64> = (0..c)
            .map(|_| if rng.random_bool(0.2) { 0.0 } else { rng.random_range(0.0..5.0) })
            .collect();
        let cfg = LossConfig {
            alpha: rng.random_range(0.1..1.0),
            ..LossConfig::default()
        };
        let mut tape = Tape::new();
        let xin = tape.input(x.clone()).unwrap();
        let b = backbone_graph(&mut tape, &backbone, xin, true).unwrap();
        let k = classifier_graph(&mut tape, &classifier, b.features, false).unwrap();
        feature_loss_graph(&mut tape, k.logits, &seg, &pseudo, &cfg, &gammas).unwrap();
        if tape.min_relu_margin() > margin {
            return (tape, vec![x]);
        }
    }
}

/// A classifier-step graph: fixed non-negative features, trainable linear
/// head, cross-entropy on random targets.
pub fn classifier_instance(rng: &mut ChaCha8Rng) -> (Tape, Vec<Tensor>) {
    let n = rng.random_range(4..=64);
    let c = rng.random_range(2..=5);
    let h = rng.random_range(2..=16);
    let feats = random_tensor(rng, n, h, 0.0, 2.0);
    let classifier = ClassifierParams::init(h, c, rng);
    let targets = random_targets(rng, n, c, 0.5);
    let mut tape = Tape::new();
    let f = tape.input(feats.clone()).unwrap();
    let k = classifier_graph(&mut tape, &classifier, f, true).unwrap();
    seg_ce_graph(&mut tape, k.logits, &targets).unwrap();
    (tape, vec![feats])
}
