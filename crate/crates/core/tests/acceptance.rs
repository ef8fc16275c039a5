//! Acceptance suite. Prints one PASS/FAIL line per criterion and exits
//! non-zero if any criterion fails. Pass criterion numbers as arguments to
//! run a subset, e.g. `cargo test --test acceptance -- 1 2 5`.

mod common;

use std::time::Instant;

use common::{brute_auc, random_labels, randomize, small_spec, worst_param_grad_error};
use molre::adapters::{lora_forward, molre_forward, router_forward, ExpertBank, LoraAdapter, MolreLayer, Router};
use molre::checkpoint::{Checkpoint, Container};
use molre::cli::cmd_count_params;
use molre::data::augment::{augment, mirror, AugmentConfig};
use molre::data::{assign_splits, resample, synth_dataset, Split, VolumeSample, DEFAULT_WINDOWS};
use molre::experiment::{mean_test_auc, Comparison};
use molre::metrics::{auc, millions_up};
use molre::objective::{binary_cross_entropy, focal_loss, FocalLossConfig};
use molre::pipeline::{forward_2d, AttentionPooler, Backbone, Mode, Model};
use molre::sampler::{class_repeat_factors, draw_multiplicity, repeat_factors};
use molre::tensor::Tensor;
use molre::train::{cache_trunks, mean_auc, train, EpochRecord, Preprocess, TrainObserver, TrainState};
use molre::{RngStream, RunConfig};

type Outcome = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn formula(d: usize, d_out: usize, k: usize, r: usize, d_h: usize) -> usize {
    k * (r * d + d_out * r) + (d_h * d + d_h) + (k * d_h + k)
}

fn c1_param_counts() -> Outcome {
    let t0 = Instant::now();
    let mut got = Vec::new();
    for (d, want, table) in [(768, 272_134, 0.28), (1024, 362_246, 0.37), (1152, 407_302, 0.41)] {
        let cfg = RunConfig::from_toml_with_overrides(
            &format!("feature_dim = {d}\nexperts = 6\nrank = 8\nrouter_hidden = 256\n"),
            &[],
        )
        .map_err(|e| e.to_string())?;
        let n = cmd_count_params(&cfg).map_err(|e| e.to_string())?.molre_total();
        ensure(n == want && n == formula(d, d, 6, 8, 256), || format!("d={d}: {n} != {want}"))?;
        ensure(millions_up(n) == table, || format!("d={d}: {n} does not round to {table}M"))?;
        got.push(n);
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 1.0, || format!("took {secs:.2}s"))?;
    Ok(format!("{got:?} → 0.28M/0.37M/0.41M in {secs:.3}s"))
}

fn c2_budget() -> Outcome {
    let n: u64 = 272_134;
    // n / 86.6e6 < 0.005  ⇔  n·1000 < 5·86.6e6
    ensure(n * 1000 < 433_000_000, || format!("{n} / 86.6e6 ≥ 0.005"))?;
    Ok(format!("{n} / 86.6e6 = {:.5}", n as f64 / 86.6e6))
}

fn c3_gradients() -> Outcome {
    let t0 = Instant::now();
    let mut rng = RngStream::new(303, 0);
    let configs = 24;
    let mut worst = (String::new(), 0.0);
    for i in 0..configs {
        let d = 2 + rng.below(15);
        let s = 1 + rng.below(4);
        let c = 1 + rng.below(5);
        let b = 1 + rng.below(3);
        let k = 1 + rng.below(6);
        let rank = (1 + rng.below(4)).min(d);
        let hidden = 2 + rng.below(8);
        let mut model = Model::build(&small_spec(Mode::Molre, d, c, k, rank, hidden), i).map_err(|e| e.to_string())?;
        randomize(&mut model, 0.25, &mut rng);
        let trunk = Tensor::randn(&[b * s, model.backbone.trunk_dim()], 1.0, &mut rng);
        let y = random_labels(b * c, &mut rng);
        let (name, err) = worst_param_grad_error(&mut model, &trunk, b, s, &y);
        ensure(err < 1e-4, || format!("config {i} (d={d} S={s} C={c}): {name} relative error {err:e}"))?;
        if err > worst.1 {
            worst = (name, err);
        }
    }
    let secs = t0.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1}s"))?;
    Ok(format!("{configs} configs, worst {} rel err {:.2e}, {secs:.1}s", worst.0, worst.1))
}

fn rand_router(d: usize, hidden: usize, k: usize, std: f64, rng: &mut RngStream) -> Router {
    let mut r = Router::new(d, hidden, k).unwrap();
    r.w1 = Tensor::randn(&[hidden, d], std, rng);
    r.b1 = Tensor::randn(&[hidden], std, rng);
    r.w2 = Tensor::randn(&[k, hidden], std, rng);
    r.b2 = Tensor::randn(&[k], std, rng);
    r
}

fn c4_lora_equivalence() -> Outcome {
    let mut rng = RngStream::new(404, 0);
    let mut worst = 0.0f64;
    for _ in 0..100 {
        let d = 1 + rng.below(16);
        let d_out = 1 + rng.below(16);
        let rank = (1 + rng.below(8)).min(d).min(d_out);
        let alpha = 2.0 * rank as f64;
        let w0 = Tensor::randn(&[d_out, d], 1.0, &mut rng);
        let mut lora = LoraAdapter::new(d, d_out, rank, alpha).unwrap();
        lora.a = Tensor::randn(&[rank, d], 1.0, &mut rng);
        lora.b = Tensor::randn(&[d_out, rank], 1.0, &mut rng);
        let mut bank = ExpertBank::new(1, d, d_out, rank).unwrap();
        bank.experts[0].a = lora.a.clone();
        bank.experts[0].b = lora.b.clone();
        let layer = MolreLayer::new(w0.clone(), bank, rand_router(d, 8, 1, 1.0, &mut rng), alpha / rank as f64).unwrap();
        let x = Tensor::randn(&[1 + rng.below(6), d], 1.0, &mut rng);
        let diff = molre_forward(&layer, &x).unwrap().max_abs_diff(&lora_forward(&lora, &w0, &x).unwrap());
        worst = worst.max(diff);
    }
    ensure(worst <= 1e-12, || format!("max |Δ| = {worst:e}"))?;
    Ok(format!("100 instances, max |Δ| = {worst:e}"))
}

fn c5_zero_init() -> Outcome {
    let mut rng = RngStream::new(505, 0);
    for i in 0..10u64 {
        let d = 4 + rng.below(29);
        let mut spec = small_spec(Mode::Molre, d, 1 + rng.below(6), 1 + rng.below(6), 8.min(d), 16);
        spec.in_channels = 3;
        let model = Model::build(&spec, i).map_err(|e| e.to_string())?;
        let Backbone::Slice(stub) = &model.backbone else { unreachable!() };
        let mut pooler = AttentionPooler::new(d);
        pooler.q = Tensor::randn(&[d], 0.3, &mut rng);
        let x = Tensor::from_fn(&[2, 3, 1 + rng.below(4), 16, 16], |_| rng.uniform());
        let with = forward_2d(stub, model.molre.as_ref(), &pooler, &model.head, &x).unwrap();
        let without = forward_2d(stub, None, &pooler, &model.head, &x).unwrap();
        let diff = with.max_abs_diff(&without);
        ensure(diff == 0.0, || format!("instance {i}: max |Δ| = {diff:e}"))?;
    }
    Ok("10 instances, max |Δ| = 0".into())
}

fn c6_gate_simplex() -> Outcome {
    let mut rng = RngStream::new(606, 0);
    let mut worst = 0.0f64;
    let mut min_gate = f64::INFINITY;
    for _ in 0..10_000 {
        let d = 1 + rng.below(24);
        let k = 1 + rng.below(8);
        let std = [0.01, 1.0, 10.0, 100.0][rng.below(4)];
        let r = rand_router(d, 1 + rng.below(16), k, std, &mut rng);
        let g = router_forward(&r, &Tensor::randn(&[1, d], std, &mut rng)).unwrap();
        min_gate = min_gate.min(g.data().iter().copied().fold(f64::INFINITY, f64::min));
        worst = worst.max((g.data().iter().sum::<f64>() - 1.0).abs());
    }
    ensure(min_gate >= 0.0 && worst < 1e-9, || format!("min gate {min_gate:e}, max |Σ−1| {worst:e}"))?;
    Ok(format!("10000 evals, min gate {min_gate:.1e}, max |Σ−1| = {worst:.1e}"))
}

fn c7_auc_oracle() -> Outcome {
    let mut rng = RngStream::new(707, 0);
    let mut worst = 0.0f64;
    let mut ties = 0;
    for _ in 0..1000 {
        let n = 1 + rng.below(200);
        let levels = 1 + rng.below(30);
        let scores: Vec<f64> = (0..n).map(|_| rng.below(levels) as f64 / levels as f64).collect();
        let labels: Vec<u8> = (0..n).map(|_| u8::from(rng.bernoulli(0.3))).collect();
        ties += usize::from(levels < n);
        match (auc(&scores, &labels).map_err(|e| e.to_string())?, brute_auc(&scores, &labels)) {
            (Some(a), Some(b)) => worst = worst.max((a - b).abs()),
            (None, None) => {}
            (a, b) => return Err(format!("definedness differs: {a:?} vs {b:?}")),
        }
    }
    ensure(worst <= 1e-12, || format!("max |Δ| = {worst:e}"))?;
    Ok(format!("1000 instances ({ties} with ties), max |Δ| = {worst:e}"))
}

fn c8_focal() -> Outcome {
    let mut rng = RngStream::new(808, 0);
    let mut worst = 0.0f64;
    for _ in 0..200 {
        let (b, c) = (1 + rng.below(6), 1 + rng.below(8));
        let p = Tensor::from_fn(&[b, c], |_| rng.uniform_in(1e-6, 1.0 - 1e-6));
        let y = random_labels(b * c, &mut rng);
        let (l, _) = focal_loss(&p, &y, &FocalLossConfig::uniform(0.0, 0.5, c)).unwrap();
        worst = worst.max((l - 0.5 * binary_cross_entropy(&p, &y)).abs());
    }
    let (scalar, _) = focal_loss(&Tensor::new(&[1, 1], vec![0.5]).unwrap(), &[1], &FocalLossConfig::uniform(2.0, 1.0, 1)).unwrap();
    let scalar_err = (scalar - 0.25 * std::f64::consts::LN_2).abs();
    ensure(worst <= 1e-12 && scalar_err <= 1e-12, || format!("half-BCE err {worst:e}, scalar err {scalar_err:e}"))?;
    Ok(format!("γ=0 vs ½BCE max |Δ| {worst:.1e}; scalar {scalar:.15} (|Δ| {scalar_err:.1e})"))
}

fn c9_rfs() -> Outcome {
    let t = 0.01;
    // 10,000 samples: class 0 in 50%, class 1 in 0.25%, class 2 in 0.04%, class 3 in 1%
    let n = 10_000;
    let labels: Vec<Vec<u8>> = (0..n)
        .map(|i| vec![u8::from(i % 2 == 0), u8::from(i % 400 == 1), u8::from(i % 2500 == 3), u8::from(i % 100 == 5)])
        .collect();
    let per_class = class_repeat_factors(&labels, t);
    let want = [1.0, (t / 0.0025f64).sqrt(), (t / 0.0004f64).sqrt(), 1.0];
    for (c, (&g, &w)) in per_class.iter().zip(&want).enumerate() {
        ensure((g - w).abs() < 1e-12, || format!("class {c}: r = {g}, want {w}"))?;
    }
    let per_sample = repeat_factors(&labels, t);
    let sample3 = per_sample[3];
    ensure(sample3 == want[2], || format!("sample with classes {{2, 3}}: r = {sample3}, want {}", want[2]))?;
    ensure(per_sample[0] == 1.0 && per_sample[1] == want[1], || "single-class samples wrong".into())?;
    let mut rng = RngStream::new(909, 0);
    let mut worst = 0.0f64;
    for r in [1.0, 1.25, 2.0, 2.5, 3.7, 5.0] {
        let mean = (0..10_000).map(|_| draw_multiplicity(r, &mut rng)).sum::<usize>() as f64 / 10_000.0;
        worst = worst.max((mean - r).abs());
    }
    ensure(worst <= 0.05, || format!("stochastic rounding off by {worst}"))?;
    Ok(format!("class factors {:?}, max-rule ok, rounding max |mean−r| = {worst:.4}", per_class.iter().map(|r| (r * 1000.0).round() / 1000.0).collect::<Vec<_>>()))
}

struct Trail {
    cfg: RunConfig,
    bytes: Vec<Vec<u8>>,
    best: Vec<(usize, f64)>,
}

impl TrainObserver for Trail {
    fn on_epoch(&mut self, _r: &EpochRecord, model: &Model, state: &TrainState) -> molre::Result<()> {
        let ck = Checkpoint {
            config: self.cfg.clone(),
            model: model.clone(),
            state: state.clone(),
        };
        self.bytes.push(ck.to_container().encode());
        Ok(())
    }

    fn on_best(&mut self, r: &EpochRecord, _m: &Model, _s: &TrainState) -> molre::Result<()> {
        self.best.push((r.epoch, r.val_mean_auc));
        Ok(())
    }
}

fn c10_protocol() -> Outcome {
    let err = |e: molre::Error| e.to_string();
    let mut cfg = RunConfig::from_toml_with_overrides(
        "feature_dim = 16\nexperts = 3\nrank = 4\nrouter_hidden = 16\nslices = 4\nheight = 16\nwidth = 16\n\
         n_samples = 80\naugment = false\nprevalence_min = 0.1\n",
        &[],
    )
    .map_err(err)?;
    let vols = synth_dataset(cfg.n_samples, &cfg.synth_config()).map_err(err)?;
    let split = assign_splits(vols.len(), 0.7, 0.3, 1);
    let (tr, va): (Vec<VolumeSample>, Vec<VolumeSample>) = {
        let (a, b): (Vec<_>, Vec<_>) = vols.into_iter().zip(split).partition(|(_, s)| *s == Split::Train);
        (a.into_iter().map(|x| x.0).collect(), b.into_iter().map(|x| x.0).collect())
    };
    let probe = Model::build(&cfg.model_spec(), 0).map_err(err)?;
    let pre = Preprocess::from_config(&cfg, false);
    let (tr, va) = (cache_trunks(&probe, &tr, &pre).map_err(err)?, cache_trunks(&probe, &va, &pre).map_err(err)?);

    // constant validation AUC: zero learning rates and no decay leave the model fixed
    let mut frozen = cfg.clone();
    frozen.lr_head = 0.0;
    frozen.lr_adapter = 0.0;
    frozen.weight_decay = 0.0;
    let out = train(Model::build(&cfg.model_spec(), 1).map_err(err)?, &tr, &va, &frozen, None, &mut ()).map_err(err)?;
    let stop = out.history.len();
    ensure(stop == cfg.min_epochs + cfg.patience, || format!("stopped at {stop}"))?;
    ensure(out.state.early.best_epoch == 1, || format!("best epoch {}", out.state.early.best_epoch))?;

    // best checkpoint is the reported one
    cfg.max_epochs = 30;
    let mut trail = Trail {
        cfg: cfg.clone(),
        bytes: Vec::new(),
        best: Vec::new(),
    };
    let out = train(Model::build(&cfg.model_spec(), 2).map_err(err)?, &tr, &va, &cfg, None, &mut trail).map_err(err)?;
    let (best_epoch, best_auc) = *trail.best.last().unwrap();
    ensure(best_epoch == out.state.early.best_epoch, || "best epoch mismatch".into())?;
    let reported = mean_auc(&out.best, &va, 64).map_err(err)?;
    ensure(reported == best_auc, || format!("best model AUC {reported} != logged {best_auc}"))?;

    // resume from every checkpoint of the trail is bitwise
    let epochs = trail.bytes.len();
    for e in 1..epochs {
        let ck = Checkpoint::from_container(&Container::decode(&trail.bytes[e - 1], "mem".as_ref()).map_err(err)?).map_err(err)?;
        let mut next = cfg.clone();
        next.max_epochs = e + 1;
        let mut t2 = Trail {
            cfg: cfg.clone(),
            bytes: Vec::new(),
            best: Vec::new(),
        };
        train(ck.model, &tr, &va, &next, Some(ck.state), &mut t2).map_err(err)?;
        ensure(t2.bytes[0] == trail.bytes[e], || format!("resume at epoch {e} diverged"))?;
    }
    Ok(format!(
        "constant AUC stops at {stop} (best 1); best epoch {best_epoch} AUC reproduced exactly; {} resumes bitwise",
        epochs - 1
    ))
}

fn c11_directional() -> Outcome {
    let t0 = Instant::now();
    let base = RunConfig::from_toml_with_overrides(
        "slices = 16\nheight = 32\nwidth = 32\nprevalence_min = 0.02\naugment = false\n",
        &[],
    )
    .map_err(|e| e.to_string())?;
    let cmp = Comparison {
        base,
        n_train: 2000,
        n_val: 400,
        n_test: 400,
        modes: vec![Mode::BaselineFrozen, Mode::Lora, Mode::Molre],
        seeds: (0..5).collect(),
    };
    let results = cmp.run(|_| {}).map_err(|e| e.to_string())?;
    let means = mean_test_auc(&results);
    let get = |m: Mode| means.iter().find(|(x, _)| *x == m).map(|x| x.1).unwrap();
    let (b, l, m) = (get(Mode::BaselineFrozen), get(Mode::Lora), get(Mode::Molre));
    let detail = format!("mean test AUC molre {m:.4}, lora {l:.4}, baseline-frozen {b:.4}; {:.0}s", t0.elapsed().as_secs_f64());
    ensure(m >= l && l >= b && m >= b, || detail.clone())?;
    Ok(detail)
}

fn c12_preprocessing() -> Outcome {
    for w in DEFAULT_WINDOWS {
        let mid = (w.lo + w.hi) / 2.0;
        ensure(w.apply(w.lo) == 0.0 && w.apply(w.hi) == 1.0 && w.apply(mid) == 0.5, || format!("window {w:?}"))?;
        ensure(w.apply(w.lo - 500.0) == 0.0 && w.apply(w.hi + 500.0) == 1.0, || format!("clamp {w:?}"))?;
    }
    let mut rng = RngStream::new(1212, 0);
    let mut worst = 0.0f64;
    for _ in 0..50 {
        let dims = [2 + rng.below(8), 2 + rng.below(10), 2 + rng.below(10)];
        let spacing = [rng.uniform_in(0.4, 1.5), rng.uniform_in(0.4, 1.5), rng.uniform_in(1.0, 6.0)];
        let target = [rng.uniform_in(0.3, 2.0), rng.uniform_in(0.3, 2.0), rng.uniform_in(0.5, 6.0)];
        let c: Vec<f64> = (0..4).map(|_| rng.uniform_in(-50.0, 50.0)).collect();
        let f = |x: f64, y: f64, z: f64| c[0] + c[1] * x + c[2] * y + c[3] * z;
        let [s, h, w] = dims;
        let vox = Tensor::from_fn(&dims, |i| {
            f((i % w) as f64 * spacing[0], ((i / w) % h) as f64 * spacing[1], (i / (h * w)) as f64 * spacing[2])
        });
        let _ = s;
        let out = resample(&VolumeSample::new(vox, spacing, vec![], "a", 0).unwrap(), target).map_err(|e| e.to_string())?;
        let [so, ho, wo] = out.dims();
        for i in 0..so * ho * wo {
            let want = f((i % wo) as f64 * target[0], ((i / wo) % ho) as f64 * target[1], (i / (ho * wo)) as f64 * target[2]);
            worst = worst.max((out.voxels.data()[i] - want).abs());
        }
    }
    ensure(worst < 1e-9, || format!("affine resampling error {worst:e}"))?;
    let vox = Tensor::randn(&[5, 9, 7], 300.0, &mut rng);
    let v = VolumeSample::new(vox.clone(), [0.8, 0.8, 4.0], vec![0], "a", 0).unwrap();
    let out = augment(&v, &AugmentConfig::identity(), &mut rng).map_err(|e| e.to_string())?;
    ensure(out.voxels.data() == vox.data(), || "identity augmentation changed voxels".into())?;
    for axis in 0..3 {
        let twice = mirror(&mirror(vox.data(), [5, 9, 7], axis), [5, 9, 7], axis);
        ensure(twice == vox.data(), || format!("double mirror on axis {axis}"))?;
    }
    Ok(format!("windows exact; affine resampling max err {worst:.1e}; identity augment and double mirror exact"))
}

fn main() {
    let only: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let criteria: [(usize, &str, fn() -> Outcome); 12] = [
        (1, "parameter-count reproduction", c1_param_counts),
        (2, "sub-0.5% budget", c2_budget),
        (3, "gradient suite", c3_gradients),
        (4, "LoRA equivalence", c4_lora_equivalence),
        (5, "zero-init transparency", c5_zero_init),
        (6, "gate simplex", c6_gate_simplex),
        (7, "AUC oracle", c7_auc_oracle),
        (8, "focal-loss reductions", c8_focal),
        (9, "RFS behavior", c9_rfs),
        (10, "protocol fidelity", c10_protocol),
        (11, "directional end-to-end", c11_directional),
        (12, "preprocessing exactness", c12_preprocessing),
    ];
    let mut failed = 0;
    for (n, name, f) in criteria {
        if !only.is_empty() && !only.contains(&n) {
            continue;
        }
        match f() {
            Ok(detail) => println!("PASS {n:>2}. {name}: {detail}"),
            Err(detail) => {
                failed += 1;
                println!("FAIL {n:>2}. {name}: {detail}");
            }
        }
    }
    if failed > 0 {
        std::process::exit(1);
    }
}
