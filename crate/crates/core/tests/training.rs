use std::path::Path;

use molre::checkpoint::{Checkpoint, Container};
use molre::config::RunConfig;
use molre::data::{assign_splits, synth_dataset, Split};
use molre::train::{cache_trunks, mean_auc, train, CachedTrunks, EpochRecord, Preprocess, TrainObserver, TrainState};
use molre::{Mode, Model};

fn tiny_config(mode: Mode) -> RunConfig {
    RunConfig::from_toml_with_overrides(
        &format!(
            "mode = \"{mode}\"\nfeature_dim = 12\nexperts = 3\nrank = 2\nalpha = 4.0\nrouter_hidden = 8\n\
             classes = 4\nslices = 4\nheight = 16\nwidth = 16\nn_samples = 60\nbatch_size = 8\n\
             augment = false\nprevalence_max = 0.5\nprevalence_min = 0.2\nmin_epochs = 3\npatience = 2\nmax_epochs = 6\n"
        ),
        &[],
    )
    .unwrap()
}

fn data(cfg: &RunConfig) -> (CachedTrunks, CachedTrunks) {
    let vols = synth_dataset(cfg.n_samples, &cfg.synth_config()).unwrap();
    let split = assign_splits(vols.len(), 0.7, 0.3, 1);
    let (tr, va): (Vec<_>, Vec<_>) = vols.into_iter().zip(split).partition(|(_, s)| *s == Split::Train);
    let probe = Model::build(&cfg.model_spec(), 0).unwrap();
    let pre = Preprocess::from_config(cfg, false);
    let tr: Vec<_> = tr.into_iter().map(|(v, _)| v).collect();
    let va: Vec<_> = va.into_iter().map(|(v, _)| v).collect();
    (cache_trunks(&probe, &tr, &pre).unwrap(), cache_trunks(&probe, &va, &pre).unwrap())
}

#[derive(Default)]
struct Snapshots {
    bytes: Vec<Vec<u8>>,
    best: Vec<usize>,
    cfg: Option<RunConfig>,
}

impl TrainObserver for Snapshots {
    fn on_epoch(&mut self, _r: &EpochRecord, model: &Model, state: &TrainState) -> molre::Result<()> {
        let ck = Checkpoint {
            config: self.cfg.clone().unwrap(),
            model: model.clone(),
            state: state.clone(),
        };
        self.bytes.push(ck.to_container().encode());
        Ok(())
    }

    fn on_best(&mut self, r: &EpochRecord, _m: &Model, _s: &TrainState) -> molre::Result<()> {
        self.best.push(r.epoch);
        Ok(())
    }
}

fn params(m: &Model) -> Vec<Vec<u64>> {
    m.params().iter().map(|(_, _, t)| t.data().iter().map(|v| v.to_bits()).collect()).collect()
}

#[test]
fn frozen_learning_rate_stops_at_min_plus_patience() {
    let mut cfg = tiny_config(Mode::Molre);
    cfg.min_epochs = 20;
    cfg.patience = 5;
    cfg.max_epochs = 100;
    cfg.lr_head = 0.0;
    cfg.lr_adapter = 0.0;
    cfg.weight_decay = 0.0;
    let (tr, va) = data(&cfg);
    let model = Model::build(&cfg.model_spec(), 3).unwrap();
    let out = train(model, &tr, &va, &cfg, None, &mut ()).unwrap();
    assert_eq!(out.history.len(), 25);
    assert!(out.history.last().unwrap().stop);
    assert_eq!(out.state.early.best_epoch, 1);
    assert!(out.history.windows(2).all(|w| w[0].val_mean_auc == w[1].val_mean_auc));
}

#[test]
fn best_model_reproduces_logged_auc() {
    let cfg = tiny_config(Mode::Molre);
    let (tr, va) = data(&cfg);
    let out = train(Model::build(&cfg.model_spec(), 1).unwrap(), &tr, &va, &cfg, None, &mut ()).unwrap();
    let best = &out.history[out.state.early.best_epoch - 1];
    assert_eq!(mean_auc(&out.best, &va, 64).unwrap(), best.val_mean_auc);
    assert_eq!(out.state.early.best_auc, out.history.iter().map(|r| r.val_mean_auc).fold(f64::NEG_INFINITY, f64::max));
}

#[test]
fn resume_from_checkpoint_is_bitwise() {
    for mode in [Mode::Lora, Mode::Molre, Mode::Molre3d, Mode::BaselineFrozen] {
        let mut cfg = tiny_config(mode);
        cfg.min_epochs = 6;
        let (tr, va) = data(&cfg);
        let mut full = Snapshots {
            cfg: Some(cfg.clone()),
            ..Default::default()
        };
        let out = train(Model::build(&cfg.model_spec(), 4).unwrap(), &tr, &va, &cfg, None, &mut full).unwrap();
        assert_eq!(full.bytes.len(), 6);
        for e in [1usize, 3] {
            let ck = Checkpoint::from_container(&Container::decode(&full.bytes[e - 1], Path::new("mem")).unwrap()).unwrap();
            let mut cfg_e = cfg.clone();
            cfg_e.max_epochs = e + 1;
            let mut resumed = Snapshots {
                cfg: Some(cfg.clone()),
                ..Default::default()
            };
            train(ck.model, &tr, &va, &cfg_e, Some(ck.state), &mut resumed).unwrap();
            assert_eq!(resumed.bytes[0], full.bytes[e], "{mode}: epoch {} differs after resuming at {e}", e + 1);
        }
        let last = Checkpoint::from_container(&Container::decode(full.bytes.last().unwrap(), Path::new("m")).unwrap()).unwrap();
        assert_eq!(params(&last.model), params(&out.last));
    }
}

#[test]
fn training_never_touches_frozen_tensors() {
    let cfg = tiny_config(Mode::Molre);
    let (tr, va) = data(&cfg);
    let model = Model::build(&cfg.model_spec(), 2).unwrap();
    let before: Vec<Vec<f64>> = model.frozen_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
    let out = train(model, &tr, &va, &cfg, None, &mut ()).unwrap();
    let after: Vec<Vec<f64>> = out.last.frozen_tensors().iter().map(|(_, t)| t.data().to_vec()).collect();
    assert_eq!(before, after);
    let init = Model::build(&cfg.model_spec(), 2).unwrap();
    assert_ne!(params(&init), params(&out.last));
}

#[test]
fn identical_seeds_identical_histories() {
    let cfg = tiny_config(Mode::Molre);
    let (tr, va) = data(&cfg);
    let a = train(Model::build(&cfg.model_spec(), 8).unwrap(), &tr, &va, &cfg, None, &mut ()).unwrap();
    let b = train(Model::build(&cfg.model_spec(), 8).unwrap(), &tr, &va, &cfg, None, &mut ()).unwrap();
    assert_eq!(a.history, b.history);
    assert_eq!(params(&a.best), params(&b.best));
}
