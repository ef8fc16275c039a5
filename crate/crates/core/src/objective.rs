//! Multi-label focal loss with per-class prevalence weights.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

const P_MIN: f64 = 1e-12;

#[derive(Clone, Debug, PartialEq)]
pub struct FocalLossConfig {
    pub gamma: f64,
    /// Weight on the positive term of each class; the negative term gets `1 − α_c`.
    pub alpha: Vec<f64>,
}

impl FocalLossConfig {
    pub fn uniform(gamma: f64, alpha: f64, classes: usize) -> Self {
        Self {
            gamma,
            alpha: vec![alpha; classes],
        }
    }
}

/// Mean focal loss over all `B·C` entries and its gradient with respect to
/// the probabilities. Probabilities are clamped to `[1e-12, 1 − 1e-12]`.
pub fn focal_loss(probs: &Tensor, labels: &[u8], cfg: &FocalLossConfig) -> Result<(f64, Tensor)> {
    let c = probs.cols();
    if labels.len() != probs.len() || cfg.alpha.len() != c {
        return Err(Error::shape("focal_loss", probs.shape(), &[labels.len(), cfg.alpha.len()]));
    }
    let n = probs.len() as f64;
    let g = cfg.gamma;
    let mut loss = 0.0;
    let mut grad = vec![0.0; probs.len()];
    for (i, (&p_raw, &y)) in probs.data().iter().zip(labels).enumerate() {
        let p = p_raw.clamp(P_MIN, 1.0 - P_MIN);
        let a = cfg.alpha[i % c];
        // Write both branches as a·(1−q)^γ·(−ln q) with q the probability of the true label.
        let (w, q, sign) = if y != 0 { (a, p, 1.0) } else { (1.0 - a, 1.0 - p, -1.0) };
        let one_minus = 1.0 - q;
        let focus = if g == 0.0 { 1.0 } else { one_minus.powf(g) };
        loss += w * focus * (-q.ln());
        // d/dq [ (1−q)^γ (−ln q) ] = −γ(1−q)^(γ−1)(−ln q) − (1−q)^γ / q
        let dfocus = if g == 0.0 { 0.0 } else { g * one_minus.powf(g - 1.0) };
        let dq = w * (dfocus * q.ln() - focus / q);
        let inside = p_raw > P_MIN && p_raw < 1.0 - P_MIN;
        grad[i] = if inside { sign * dq / n } else { 0.0 };
    }
    Ok((loss / n, Tensor::new(probs.shape(), grad)?))
}

/// Mean binary cross-entropy, used as a reference for the `γ = 0` reduction.
pub fn binary_cross_entropy(probs: &Tensor, labels: &[u8]) -> f64 {
    let n = probs.len() as f64;
    probs
        .data()
        .iter()
        .zip(labels)
        .map(|(&p, &y)| {
            let p = p.clamp(P_MIN, 1.0 - P_MIN);
            if y != 0 {
                -p.ln()
            } else {
                -(1.0 - p).ln()
            }
        })
        .sum::<f64>()
        / n
}

/// `α_c = clamp(1 − prevalence_c, floor, ceil)` over an `N×C` multi-hot matrix.
pub fn prevalence_weights(labels: &[Vec<u8>], floor: f64, ceil: f64) -> Result<Vec<f64>> {
    let n = labels.len();
    if n == 0 {
        return Err(Error::Data("prevalence weights need at least one sample".into()));
    }
    let c = labels[0].len();
    let mut pos = vec![0usize; c];
    for row in labels {
        if row.len() != c {
            return Err(Error::Data("ragged label matrix".into()));
        }
        for (p, &y) in pos.iter_mut().zip(row) {
            *p += usize::from(y != 0);
        }
    }
    Ok(pos
        .into_iter()
        .map(|p| (1.0 - p as f64 / n as f64).clamp(floor, ceil))
        .collect())
}

#[cfg(test)]
mod tests {
    use super::*;

    fn scalar(p: f64, y: u8, gamma: f64, alpha: f64) -> f64 {
        let probs = Tensor::new(&[1, 1], vec![p]).unwrap();
        focal_loss(&probs, &[y], &FocalLossConfig::uniform(gamma, alpha, 1)).unwrap().0
    }

    #[test]
    fn gamma_zero_is_half_bce() {
        let probs = Tensor::new(&[2, 3], vec![0.1, 0.7, 0.5, 0.95, 0.2, 0.33]).unwrap();
        let labels = [1, 0, 1, 1, 0, 0];
        let (l, _) = focal_loss(&probs, &labels, &FocalLossConfig::uniform(0.0, 0.5, 3)).unwrap();
        assert!((l - 0.5 * binary_cross_entropy(&probs, &labels)).abs() < 1e-12);
    }

    #[test]
    fn scalar_case() {
        assert!((scalar(0.5, 1, 2.0, 1.0) - 0.25 * 2f64.ln()).abs() < 1e-12);
    }

    #[test]
    fn focusing_downweights_easy() {
        let r2 = scalar(0.9, 1, 2.0, 1.0) / scalar(0.6, 1, 2.0, 1.0);
        let r0 = scalar(0.9, 1, 0.0, 1.0) / scalar(0.6, 1, 0.0, 1.0);
        // (0.1² / 0.4²) = 1/16 of the plain ratio
        assert!((r2 / r0 - 1.0 / 16.0).abs() < 1e-12);
        assert!(r2 < r0 / 10.0);
    }

    #[test]
    fn clamps_extremes() {
        assert!(scalar(0.0, 1, 2.0, 1.0).is_finite());
        assert!(scalar(1.0, 0, 2.0, 0.5).is_finite());
    }

    #[test]
    fn prevalence_examples() {
        let half: Vec<Vec<u8>> = (0..10).map(|i| vec![u8::from(i % 2 == 0)]).collect();
        assert_eq!(prevalence_weights(&half, 0.05, 0.95).unwrap(), vec![0.5]);
        let rare: Vec<Vec<u8>> = (0..100).map(|i| vec![u8::from(i == 0)]).collect();
        assert_eq!(prevalence_weights(&rare, 0.05, 0.95).unwrap(), vec![0.95]);
        let all: Vec<Vec<u8>> = (0..4).map(|_| vec![1]).collect();
        assert_eq!(prevalence_weights(&all, 0.05, 0.95).unwrap(), vec![0.05]);
    }
}
