//! Repeat factor sampling for long-tailed multi-label data.

use crate::rng::RngStream;

/// Per-class repeat factor `max(1, √(t / f_c))` where `f_c` is the fraction
/// of samples containing class `c`. Classes with no positives get 1.
pub fn class_repeat_factors(labels: &[Vec<u8>], threshold: f64) -> Vec<f64> {
    let n = labels.len();
    let c = labels.first().map_or(0, Vec::len);
    let mut pos = vec![0usize; c];
    for row in labels {
        for (p, &y) in pos.iter_mut().zip(row) {
            *p += usize::from(y != 0);
        }
    }
    pos.into_iter()
        .map(|p| {
            if p == 0 {
                1.0
            } else {
                let f = p as f64 / n as f64;
                (threshold / f).sqrt().max(1.0)
            }
        })
        .collect()
}

/// Per-sample factor: the maximum class factor over its positive labels, 1 if none.
pub fn repeat_factors(labels: &[Vec<u8>], threshold: f64) -> Vec<f64> {
    let per_class = class_repeat_factors(labels, threshold);
    labels
        .iter()
        .map(|row| {
            row.iter()
                .zip(&per_class)
                .filter(|(&y, _)| y != 0)
                .map(|(_, &r)| r)
                .fold(1.0, f64::max)
        })
        .collect()
}

/// Stochastic rounding: `⌊r⌋` copies plus one more with probability `r − ⌊r⌋`.
pub fn draw_multiplicity(r: f64, rng: &mut RngStream) -> usize {
    let base = r.floor();
    let extra = rng.bernoulli(r - base);
    base as usize + usize::from(extra)
}

/// Expanded, shuffled index list for one epoch.
pub fn epoch_indices(factors: &[f64], rng: &mut RngStream) -> Vec<usize> {
    let mut idx = Vec::new();
    for (i, &r) in factors.iter().enumerate() {
        let k = draw_multiplicity(r, rng);
        idx.extend(std::iter::repeat_n(i, k));
    }
    rng.shuffle(&mut idx);
    idx
}
