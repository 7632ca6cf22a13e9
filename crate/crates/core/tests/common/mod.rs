//! Independent reference implementations used by the integration tests.
#![allow(dead_code)]

use ndarray::{Array1, Array2};
use popusense::pdc::{ImageBatch, ModelParams};
use popusense::train::{LossKind, Pipeline};
use rand::Rng;

/// Dense `act(Dv^-1/2 H W De^-1 H^T Dv^-1/2 X Theta + b)` built from explicit
/// matrices, with repeated members collapsed.
pub fn dense_hgconv(
    x: &Array2<f64>,
    edges: &[Vec<usize>],
    weights: &[f64],
    theta: &Array2<f64>,
    bias: &Array1<f64>,
    relu: bool,
) -> Array2<f64> {
    let n = x.nrows();
    let m = edges.len();
    let mut h = Array2::<f64>::zeros((n, m));
    for (e, members) in edges.iter().enumerate() {
        for &v in members {
            h[[v, e]] = 1.0;
        }
    }
    let w = Array2::from_diag(&Array1::from(weights.to_vec()));
    let dv = h.dot(&Array1::from(weights.to_vec()));
    let de = h.sum_axis(ndarray::Axis(0));
    let dv_is = Array2::from_diag(&dv.mapv(|d| 1.0 / d.sqrt()));
    let de_inv = Array2::from_diag(&de.mapv(|d| 1.0 / d));
    let p = dv_is.dot(&h).dot(&w).dot(&de_inv).dot(&h.t()).dot(&dv_is);
    let mut y = p.dot(x).dot(theta) + bias;
    if relu {
        y.mapv_inplace(|v| v.max(0.0));
    }
    y
}

/// Random hypergraph on `n` vertices in which every vertex is covered.
pub fn random_edges(rng: &mut impl Rng, n: usize) -> (Vec<Vec<usize>>, Vec<f64>) {
    let m = rng.random_range(1..=n + 2);
    let mut edges: Vec<Vec<usize>> = (0..m)
        .map(|_| {
            let size = rng.random_range(1..=n);
            (0..size).map(|_| rng.random_range(0..n)).collect()
        })
        .collect();
    for v in 0..n {
        if !edges.iter().any(|e| e.contains(&v)) {
            let e = rng.random_range(0..edges.len());
            edges[e].push(v);
        }
    }
    let weights = edges.iter().map(|_| rng.random_range(0.1..3.0)).collect();
    (edges, weights)
}

pub fn random_matrix(rng: &mut impl Rng, r: usize, c: usize) -> Array2<f64> {
    Array2::from_shape_fn((r, c), |_| rng.random_range(-1.0..1.0))
}

/// `max |a - b| / max(1, max |b|)`.
pub fn max_rel_err(a: &Array2<f64>, b: &Array2<f64>) -> f64 {
    let scale = b.iter().fold(1.0f64, |m, v| m.max(v.abs()));
    a.iter().zip(b.iter()).fold(0.0f64, |m, (x, y)| m.max((x - y).abs())) / scale
}

/// `||a - b|| / max(||a||, ||b||)`, zero when both vanish.
pub fn vec_rel_err(a: &[f64], b: &[f64]) -> f64 {
    let norm = |v: &[f64]| v.iter().map(|x| x * x).sum::<f64>().sqrt();
    let diff: Vec<f64> = a.iter().zip(b).map(|(x, y)| x - y).collect();
    let scale = norm(a).max(norm(b));
    if scale == 0.0 {
        0.0
    } else {
        norm(&diff) / scale
    }
}

/// `(2 * wins + ties, positives, negatives)` by enumerating every pair.
pub fn brute_pairs(scores: &[f64], labels: &[bool]) -> (u128, u64, u64) {
    let mut doubled = 0u128;
    let (mut p, mut n) = (0u64, 0u64);
    for (i, &li) in labels.iter().enumerate() {
        if li {
            p += 1;
        } else {
            n += 1;
        }
        for (j, &lj) in labels.iter().enumerate() {
            if li && !lj {
                if scores[i] > scores[j] {
                    doubled += 2;
                } else if scores[i] == scores[j] {
                    doubled += 1;
                }
            }
        }
    }
    (doubled, p, n)
}

pub fn brute_auroc(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let (d, p, n) = brute_pairs(scores, labels);
    (p > 0 && n > 0).then(|| d as f64 / (2 * p * n) as f64)
}

/// Precision-recall staircase with ties resolved by original position: item
/// `j` ranks ahead of `i` if its score is higher, or equal with `j < i`.
pub fn brute_ap(scores: &[f64], labels: &[bool]) -> Option<f64> {
    let p = labels.iter().filter(|&&l| l).count();
    if p == 0 {
        return None;
    }
    let ahead = |j: usize, i: usize| scores[j] > scores[i] || (scores[j] == scores[i] && j < i);
    let mut total = 0.0;
    for i in (0..scores.len()).filter(|&i| labels[i]) {
        let rank = 1 + (0..scores.len()).filter(|&j| ahead(j, i)).count();
        let tp = 1 + (0..scores.len()).filter(|&j| labels[j] && ahead(j, i)).count();
        total += tp as f64 / rank as f64;
    }
    Some(total / p as f64)
}

/// Dice maximized over 101 thresholds evenly spaced on `[min, max]`.
pub fn brute_best_dice(scores: &[f64], truth: &[bool]) -> Option<f64> {
    let t_count = truth.iter().filter(|&&b| b).count();
    if t_count == 0 {
        return None;
    }
    let lo = scores.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = scores.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut best = 0.0f64;
    for i in 0..=100 {
        let t = if i == 100 { hi } else { lo + (hi - lo) * i as f64 / 100.0 };
        let pred = scores.iter().filter(|&&s| s >= t).count();
        let hit = scores.iter().zip(truth).filter(|&(&s, &m)| s >= t && m).count();
        best = best.max(2.0 * hit as f64 / (pred + t_count) as f64);
    }
    Some(best)
}

/// Small score vector drawn from a coarse grid so ties are common.
pub fn random_scored(rng: &mut impl Rng, max_len: usize) -> (Vec<f64>, Vec<bool>) {
    let n = rng.random_range(1..=max_len);
    let levels = rng.random_range(1..=6);
    let scores = (0..n).map(|_| rng.random_range(0..levels) as f64 / 4.0).collect();
    let labels = (0..n).map(|_| rng.random_bool(0.5)).collect();
    (scores, labels)
}

/// Fresh models have all-zero biases, so a channel fed by dead units sits
/// exactly on a relu kink. Small random biases move finite-difference checks
/// to a differentiable point.
pub fn jitter_biases(m: &mut ModelParams, rng: &mut impl Rng) {
    let is_bias: Vec<bool> = m.blocks().iter().map(|b| b.name.ends_with(".bias")).collect();
    for (block, bias) in m.blocks_mut().into_iter().zip(is_bias) {
        if bias {
            block.iter_mut().for_each(|v| *v = rng.random_range(-0.02..0.02));
        }
    }
}

/// Central difference of `f` at step `h`, or `None` when the estimate at
/// `h / 2` disagrees beyond roundoff: a relu kink lies inside the stencil
/// and the difference quotient says nothing about the derivative there.
pub fn smooth_central_difference(f: impl Fn(f64) -> f64, h: f64) -> Option<f64> {
    let full = (f(h) - f(-h)) / (2.0 * h);
    let half = (f(h / 2.0) - f(-h / 2.0)) / h;
    ((full - half).abs() <= 1e-9 + 1e-6 * full.abs()).then_some(full)
}

pub struct GradCheck {
    pub rel_err: f64,
    pub checked: usize,
    pub kinked: usize,
}

/// Compares `per_block` random coordinates of every model and refiner
/// parameter block with kink-aware central differences of the loss.
pub fn check_pipeline_gradients(
    base: &Pipeline,
    x: &ImageBatch,
    kind: LossKind,
    per_block: usize,
    h: f64,
    rng: &mut impl Rng,
) -> GradCheck {
    let (_, grads) = base.loss_and_gradients(x, kind).unwrap();
    let model: Vec<Vec<f64>> = grads.model.blocks().iter().map(|b| b.data.to_vec()).collect();
    let refiner: Vec<Vec<f64>> =
        grads.refiner.as_ref().map(|r| r.blocks().iter().map(|b| b.data.to_vec()).collect()).unwrap_or_default();
    let (mut analytic, mut numeric, mut kinked) = (Vec::new(), Vec::new(), 0);
    for (in_refiner, blocks) in [(false, &model), (true, &refiner)] {
        for (bi, g) in blocks.iter().enumerate() {
            for _ in 0..per_block.min(g.len()) {
                let i = rng.random_range(0..g.len());
                let at = |step: f64| {
                    let mut p = base.clone();
                    if in_refiner {
                        p.popusense.as_mut().unwrap().refiner.blocks_mut()[bi][i] += step;
                    } else {
                        p.model.blocks_mut()[bi][i] += step;
                    }
                    p.loss_and_gradients(x, kind).unwrap().0
                };
                match smooth_central_difference(at, h) {
                    Some(fd) => {
                        analytic.push(g[i]);
                        numeric.push(fd);
                    }
                    None => kinked += 1,
                }
            }
        }
    }
    GradCheck { rel_err: vec_rel_err(&analytic, &numeric), checked: analytic.len(), kinked }
}
