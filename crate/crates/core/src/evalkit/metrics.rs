//! Ranking and segmentation metrics with fixed tie rules.

use ndarray::Array2;

use crate::error::{Error, Result};

/// Number of thresholds in the Dice sweep, spaced evenly over `[min, max]`.
pub const DICE_SWEEP_POINTS: usize = 101;

/// Scores with binary labels (`true` = anomalous).
#[derive(Debug, Clone, PartialEq)]
pub struct ScoredSet {
    scores: Vec<f64>,
    labels: Vec<bool>,
}

impl ScoredSet {
    pub fn new(scores: Vec<f64>, labels: Vec<bool>) -> Result<Self> {
        if scores.len() != labels.len() {
            return Err(Error::ShapeMismatch(format!("{} scores vs {} labels", scores.len(), labels.len())));
        }
        Ok(Self { scores, labels })
    }

    pub fn scores(&self) -> &[f64] {
        &self.scores
    }

    pub fn labels(&self) -> &[bool] {
        &self.labels
    }

    pub fn len(&self) -> usize {
        self.scores.len()
    }

    pub fn is_empty(&self) -> bool {
        self.scores.is_empty()
    }

    pub fn positives(&self) -> usize {
        self.labels.iter().filter(|&&l| l).count()
    }

    pub fn negatives(&self) -> usize {
        self.len() - self.positives()
    }
}

/// Mann-Whitney pair count: `(2 * wins + ties, positives, negatives)` over
/// all positive/negative pairs.
pub fn auroc_pair_count(s: &ScoredSet) -> (u128, u64, u64) {
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s.scores[a].total_cmp(&s.scores[b]));
    let mut doubled = 0u128;
    let mut neg_below = 0u128;
    let mut i = 0;
    while i < idx.len() {
        let mut j = i;
        let (mut pos, mut neg) = (0u128, 0u128);
        while j < idx.len() && s.scores[idx[j]].total_cmp(&s.scores[idx[i]]).is_eq() {
            if s.labels[idx[j]] {
                pos += 1;
            } else {
                neg += 1;
            }
            j += 1;
        }
        doubled += 2 * pos * neg_below + pos * neg;
        neg_below += neg;
        i = j;
    }
    (doubled, s.positives() as u64, s.negatives() as u64)
}

/// `P(pos > neg) + P(pos == neg) / 2`.
pub fn auroc(s: &ScoredSet) -> Result<f64> {
    let (doubled, p, n) = auroc_pair_count(s);
    if p == 0 || n == 0 {
        return Err(Error::SingleClass);
    }
    Ok(doubled as f64 / (2 * p as u128 * n as u128) as f64)
}

/// Mean precision at each positive's rank. Ranking is by descending score;
/// equal scores keep their original order.
pub fn average_precision(s: &ScoredSet) -> Result<f64> {
    let p = s.positives();
    if p == 0 {
        return Err(Error::NoPositives);
    }
    let mut idx: Vec<usize> = (0..s.len()).collect();
    idx.sort_by(|&a, &b| s.scores[b].total_cmp(&s.scores[a]));
    let mut tp = 0usize;
    let mut sum = 0.0;
    for (rank, &i) in idx.iter().enumerate() {
        if s.labels[i] {
            tp += 1;
            sum += tp as f64 / (rank + 1) as f64;
        }
    }
    Ok(sum / p as f64)
}

fn check_pairs(maps: &[Array2<f64>], masks: &[Array2<bool>]) -> Result<()> {
    if maps.len() != masks.len() {
        return Err(Error::ShapeMismatch(format!("{} maps vs {} masks", maps.len(), masks.len())));
    }
    for (m, k) in maps.iter().zip(masks) {
        if m.dim() != k.dim() {
            return Err(Error::ShapeMismatch(format!("map {:?} vs mask {:?}", m.dim(), k.dim())));
        }
    }
    Ok(())
}

/// AUROC over every pixel of every map, pooled.
pub fn pixel_auroc(maps: &[Array2<f64>], masks: &[Array2<bool>]) -> Result<f64> {
    check_pairs(maps, masks)?;
    let scores = maps.iter().flat_map(|m| m.iter().copied()).collect();
    let labels = masks.iter().flat_map(|m| m.iter().copied()).collect();
    auroc(&ScoredSet::new(scores, labels)?)
}

/// Threshold `i` of the sweep over `[lo, hi]`; the last one is exactly `hi`.
pub fn sweep_threshold(lo: f64, hi: f64, i: usize) -> f64 {
    if i + 1 == DICE_SWEEP_POINTS {
        hi
    } else {
        lo + (hi - lo) * i as f64 / (DICE_SWEEP_POINTS - 1) as f64
    }
}

/// Best pooled Dice of `{score >= t}` against the masks over the threshold sweep.
pub fn best_dice(maps: &[Array2<f64>], masks: &[Array2<bool>]) -> Result<f64> {
    check_pairs(maps, masks)?;
    let truth = masks.iter().flat_map(|m| m.iter()).filter(|&&b| b).count();
    if truth == 0 {
        return Err(Error::EmptyMasks);
    }
    let mut pixels: Vec<(f64, bool)> =
        maps.iter().zip(masks).flat_map(|(m, k)| m.iter().copied().zip(k.iter().copied())).collect();
    // Descending scores; walking the thresholds from high to low only ever
    // adds pixels to the predicted set.
    pixels.sort_by(|a, b| b.0.total_cmp(&a.0));
    let lo = pixels.last().map(|p| p.0).unwrap_or(0.0);
    let hi = pixels[0].0;
    let (mut taken, mut hits, mut best) = (0usize, 0usize, 0.0f64);
    for i in (0..DICE_SWEEP_POINTS).rev() {
        let t = sweep_threshold(lo, hi, i);
        while taken < pixels.len() && pixels[taken].0 >= t {
            hits += usize::from(pixels[taken].1);
            taken += 1;
        }
        best = best.max(2.0 * hits as f64 / (taken + truth) as f64);
    }
    Ok(best)
}
