//! Side-by-side training of several modes on one synthetic dataset.

use std::collections::BTreeMap;

use crate::config::RunConfig;
use crate::data::{assign_splits, synth_dataset, Split, VolumeSample};
use crate::error::Result;
use crate::pipeline::{Mode, Model};
use crate::train::{cache_trunks, evaluate, train, CachedTrunks, Preprocess};

#[derive(Clone, Debug)]
pub struct Comparison {
    /// Shared settings; `mode` and `seed` are replaced per run.
    pub base: RunConfig,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
    pub modes: Vec<Mode>,
    pub seeds: Vec<u64>,
}

#[derive(Clone, Debug, PartialEq)]
pub struct RunResult {
    pub mode: Mode,
    pub seed: u64,
    pub epochs: usize,
    pub best_epoch: usize,
    pub val_auc: f64,
    pub test_auc: f64,
}

struct Splits {
    train: CachedTrunks,
    val: CachedTrunks,
    test: CachedTrunks,
}

fn cache(model: &Model, parts: &[Vec<VolumeSample>; 3], pre: &Preprocess) -> Result<Splits> {
    Ok(Splits {
        train: cache_trunks(model, &parts[0], pre)?,
        val: cache_trunks(model, &parts[1], pre)?,
        test: cache_trunks(model, &parts[2], pre)?,
    })
}

impl Comparison {
    /// Trains every `(mode, seed)` pair and evaluates its best checkpoint on the test split.
    /// Augmentation is disabled so frozen trunk features can be computed once.
    pub fn run(&self, mut progress: impl FnMut(&RunResult)) -> Result<Vec<RunResult>> {
        let mut base = self.base.clone();
        base.augment = false;
        let n = self.n_train + self.n_val + self.n_test;
        let volumes = synth_dataset(n, &base.synth_config())?;
        let split = assign_splits(n, self.n_train as f64 / n as f64, self.n_val as f64 / n as f64, base.data_seed);
        let mut parts: [Vec<VolumeSample>; 3] = Default::default();
        for (v, s) in volumes.into_iter().zip(split) {
            let k = match s {
                Split::Train => 0,
                Split::Val => 1,
                Split::Test => 2,
            };
            parts[k].push(v);
        }
        let pre = Preprocess::from_config(&base, false);
        let names: Vec<String> = (0..base.classes).map(|c| c.to_string()).collect();
        let mut cached: BTreeMap<bool, Splits> = BTreeMap::new();
        let mut out = Vec::new();
        for &mode in &self.modes {
            let mut cfg = base.clone();
            cfg.mode = mode;
            if let std::collections::btree_map::Entry::Vacant(e) = cached.entry(mode.is_volumetric()) {
                let probe = Model::build(&cfg.model_spec(), 0)?;
                e.insert(cache(&probe, &parts, &pre)?);
            }
            let data = &cached[&mode.is_volumetric()];
            for &seed in &self.seeds {
                cfg.seed = seed;
                let model = Model::build(&cfg.model_spec(), seed)?;
                let outcome = train(model, &data.train, &data.val, &cfg, None, &mut ())?;
                let report = evaluate(&outcome.best, &data.test, &names, "test", 256)?;
                let r = RunResult {
                    mode,
                    seed,
                    epochs: outcome.state.epoch,
                    best_epoch: outcome.state.early.best_epoch,
                    val_auc: outcome.state.early.best_auc,
                    test_auc: report.mean_auc,
                };
                progress(&r);
                out.push(r);
            }
        }
        Ok(out)
    }
}

/// Mean test AUC per mode, in first-seen order.
pub fn mean_test_auc(results: &[RunResult]) -> Vec<(Mode, f64)> {
    let mut modes: Vec<Mode> = Vec::new();
    for r in results {
        if !modes.contains(&r.mode) {
            modes.push(r.mode);
        }
    }
    modes
        .into_iter()
        .map(|m| {
            let v: Vec<f64> = results.iter().filter(|r| r.mode == m).map(|r| r.test_auc).collect();
            (m, v.iter().sum::<f64>() / v.len() as f64)
        })
        .collect()
}
