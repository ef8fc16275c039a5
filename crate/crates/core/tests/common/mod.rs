#![allow(dead_code)]

use molre::objective::{focal_loss, FocalLossConfig};
use molre::pipeline::{Mode, Model, ModelSpec};
use molre::tensor::{relative_error, Tensor};
use molre::RngStream;

pub fn small_spec(mode: Mode, d: usize, classes: usize, k: usize, rank: usize, hidden: usize) -> ModelSpec {
    ModelSpec {
        mode,
        in_channels: 3,
        feature_dim: d,
        classes,
        experts: k,
        rank,
        expert_scaling: 2.0,
        router_hidden: hidden,
        lora_rank: rank,
        lora_alpha: 2.0 * rank as f64,
        classifier_bias: true,
        backbone_seed: 7,
    }
}

/// Replaces every trainable tensor by Gaussian values so no gradient path is trivially zero.
pub fn randomize(model: &mut Model, std: f64, rng: &mut RngStream) {
    for p in model.params_mut() {
        for v in p.tensor.data_mut() {
            *v = std * rng.normal();
        }
    }
}

pub fn random_labels(n: usize, rng: &mut RngStream) -> Vec<u8> {
    (0..n).map(|_| u8::from(rng.bernoulli(0.4))).collect()
}

fn loss(model: &Model, trunk: &Tensor, batch: usize, slices: usize, y: &[u8], focal: &FocalLossConfig) -> f64 {
    let pass = model.forward_trunk(trunk.clone(), batch, slices).unwrap();
    focal_loss(&pass.probs, y, focal).unwrap().0
}

/// Worst relative error, over all trainable tensors, between the analytic
/// gradient and a central finite difference of the focal loss.
pub fn worst_param_grad_error(model: &mut Model, trunk: &Tensor, batch: usize, slices: usize, y: &[u8]) -> (String, f64) {
    let focal = FocalLossConfig {
        gamma: 2.0,
        alpha: (0..model.spec.classes).map(|c| 0.2 + 0.6 * c as f64 / model.spec.classes as f64).collect(),
    };
    let pass = model.forward_trunk(trunk.clone(), batch, slices).unwrap();
    let (_, g) = focal_loss(&pass.probs, y, &focal).unwrap();
    model.zero_grad();
    model.backward(&pass, &g, 0.0).unwrap();
    let analytic: Vec<(String, Vec<f64>)> = model
        .params()
        .iter()
        .map(|(n, _, t)| (n.clone(), t.grad().expect("gradient present").to_vec()))
        .collect();
    let mut worst = (String::new(), 0.0);
    for (idx, (name, ana)) in analytic.iter().enumerate() {
        // A step that straddles a ReLU kink in the router breaks the central
        // difference. A real gradient bug disagrees at every step size.
        let mut best = f64::INFINITY;
        for eps in [1e-5, 1e-6, 1e-7] {
            let mut numeric = vec![0.0; ana.len()];
            for (i, slot) in numeric.iter_mut().enumerate() {
                let orig = model.params()[idx].2.data()[i];
                model.params_mut()[idx].tensor.data_mut()[i] = orig + eps;
                let lp = loss(model, trunk, batch, slices, y, &focal);
                model.params_mut()[idx].tensor.data_mut()[i] = orig - eps;
                let lm = loss(model, trunk, batch, slices, y, &focal);
                model.params_mut()[idx].tensor.data_mut()[i] = orig;
                *slot = (lp - lm) / (2.0 * eps);
            }
            best = best.min(relative_error(ana, &numeric));
            if best < 1e-6 {
                break;
            }
        }
        if best > worst.1 {
            worst = (name.clone(), best);
        }
    }
    worst
}

/// O(n²) pair count: P(score_pos > score_neg) + ½·P(tie).
pub fn brute_auc(scores: &[f64], labels: &[u8]) -> Option<f64> {
    let (mut num, mut pairs) = (0.0, 0.0);
    for (i, &si) in scores.iter().enumerate() {
        if labels[i] != 1 {
            continue;
        }
        for (j, &sj) in scores.iter().enumerate() {
            if labels[j] != 0 {
                continue;
            }
            pairs += 1.0;
            if si > sj {
                num += 1.0;
            } else if si == sj {
                num += 0.5;
            }
        }
    }
    (pairs > 0.0).then(|| num / pairs)
}
