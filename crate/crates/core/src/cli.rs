//! Command-line surface: `synth`, `train`, `eval`, `count-params`.

use std::fs::{self, File, OpenOptions};
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand};

use crate::checkpoint::Checkpoint;
use crate::config::RunConfig;
use crate::data::io::{write_manifest, write_volume, Dataset, Manifest, ManifestEntry, PrevalenceRow, VOLUME_VERSION};
use crate::data::{assign_splits, synth_dataset, Split};
use crate::error::{Error, Result};
use crate::metrics::{param_report, MetricsReport, ParamTable};
use crate::pipeline::Model;
use crate::train::{
    cache_trunks, evaluate, load_split, train, EpochRecord, Preprocess, TrainObserver, TrainOutcome, TrainState,
    TrunkSource, VolumeSource,
};

pub const LOCK_FILE: &str = "run.lock";
pub const METRICS_FILE: &str = "metrics.jsonl";
pub const LAST_CKPT: &str = "last.ckpt";
pub const BEST_CKPT: &str = "best.ckpt";

#[derive(Parser, Debug)]
#[command(name = "molre", version, about = "Mixture of low-rank experts: data, training and evaluation")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Args, Debug, Clone, Default)]
pub struct Common {
    /// TOML config file
    #[arg(long, global = true)]
    pub config: Option<PathBuf>,
    /// Override a config key, e.g. `--set experts=4` (repeatable)
    #[arg(long = "set", value_name = "K=V", global = true)]
    pub set: Vec<String>,
    /// Seed (training seed; the data seed for `synth`)
    #[arg(long, global = true)]
    pub seed: Option<u64>,
    /// Output directory
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,
}

#[derive(Subcommand, Debug)]
pub enum Command {
    /// Generate a synthetic dataset
    Synth {
        #[command(flatten)]
        common: Common,
    },
    /// Train a model on a dataset
    Train {
        #[command(flatten)]
        common: Common,
        /// Continue from `last.ckpt` in the run directory
        #[arg(long)]
        resume: bool,
    },
    /// Evaluate a checkpoint on a split
    Eval {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        checkpoint: PathBuf,
        #[arg(long, default_value = "test")]
        split: Split,
        /// Dataset directory (defaults to the one recorded in the checkpoint)
        #[arg(long)]
        data: Option<PathBuf>,
    },
    /// Print the parameter table of a configuration
    CountParams {
        #[command(flatten)]
        common: Common,
    },
}

impl Common {
    pub fn config(&self) -> Result<RunConfig> {
        RunConfig::load(self.config.as_deref(), &self.set)
    }
}

fn class_names(classes: usize) -> Vec<String> {
    (0..classes).map(|c| format!("class_{c:02}")).collect()
}

/// Writes `n_samples` volumes plus `manifest.json` under `out`.
pub fn cmd_synth(cfg: &RunConfig, out: &Path) -> Result<Manifest> {
    let sc = cfg.synth_config();
    let samples = synth_dataset(cfg.n_samples, &sc)?;
    let n = samples.len();
    let split = assign_splits(n, cfg.train_fraction, cfg.val_fraction, sc.seed);
    let vol_dir = out.join("volumes");
    fs::create_dir_all(&vol_dir).map_err(|e| Error::io(&vol_dir, e))?;
    let mut entries = Vec::with_capacity(n);
    for (i, s) in samples.iter().enumerate() {
        let file = format!("volumes/{}.mlrv", s.sample_id);
        write_volume(&out.join(&file), s)?;
        entries.push(ManifestEntry {
            id: s.sample_id.clone(),
            split: split[i],
            labels: s.labels.clone(),
            file,
            stream_id: s.stream_id,
        });
    }
    let classes = class_names(cfg.classes);
    let prevalence = classes
        .iter()
        .enumerate()
        .map(|(c, name)| {
            let positives = samples.iter().filter(|s| s.labels[c] == 1).count();
            PrevalenceRow {
                class: name.clone(),
                positives,
                fraction: positives as f64 / n.max(1) as f64,
                configured: sc.prevalence[c],
            }
        })
        .collect();
    let manifest = Manifest {
        version: VOLUME_VERSION,
        seed: sc.seed,
        dims: [sc.slices, sc.height, sc.width],
        spacing: sc.spacing,
        classes,
        prevalence,
        samples: entries,
    };
    write_manifest(out, &manifest)?;
    Ok(manifest)
}

/// Exclusive ownership of a run directory; released on drop.
pub struct RunLock {
    path: PathBuf,
}

impl RunLock {
    pub fn acquire(run_dir: &Path) -> Result<Self> {
        fs::create_dir_all(run_dir).map_err(|e| Error::io(run_dir, e))?;
        let path = run_dir.join(LOCK_FILE);
        let mut f = OpenOptions::new().write(true).create_new(true).open(&path).map_err(|e| {
            if e.kind() == std::io::ErrorKind::AlreadyExists {
                Error::Data(format!("{} is locked by another training process", run_dir.display()))
            } else {
                Error::io(&path, e)
            }
        })?;
        let _ = writeln!(f, "{}", std::process::id());
        Ok(Self { path })
    }
}

impl Drop for RunLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.path);
    }
}

struct RunWriter {
    dir: PathBuf,
    config: RunConfig,
    log: File,
}

impl RunWriter {
    fn checkpoint(&self, model: &Model, state: &TrainState, name: &str) -> Result<()> {
        Checkpoint {
            config: self.config.clone(),
            model: model.clone(),
            state: state.clone(),
        }
        .save(&self.dir.join(name))
    }
}

impl TrainObserver for RunWriter {
    fn on_epoch(&mut self, record: &EpochRecord, model: &Model, state: &TrainState) -> Result<()> {
        let path = self.dir.join(METRICS_FILE);
        writeln!(self.log, "{}", record.to_json()).map_err(|e| Error::io(&path, e))?;
        self.log.flush().map_err(|e| Error::io(&path, e))?;
        self.checkpoint(model, state, LAST_CKPT)
    }

    fn on_best(&mut self, _record: &EpochRecord, model: &Model, state: &TrainState) -> Result<()> {
        self.checkpoint(model, state, BEST_CKPT)
    }
}

fn check_dataset(cfg: &RunConfig, ds: &Dataset) -> Result<()> {
    if ds.manifest.classes.len() != cfg.classes {
        return Err(Error::Data(format!(
            "dataset has {} classes, config expects {}",
            ds.manifest.classes.len(),
            cfg.classes
        )));
    }
    Ok(())
}

/// Trains into `run_dir`, writing `metrics.jsonl`, `last.ckpt` and `best.ckpt`.
pub fn cmd_train(cfg: &RunConfig, run_dir: &Path, resume: bool) -> Result<TrainOutcome> {
    let ds = Dataset::open(&cfg.data_dir)?;
    check_dataset(cfg, &ds)?;
    let _lock = RunLock::acquire(run_dir)?;
    let (model, state) = if resume {
        let ck = Checkpoint::load(&run_dir.join(LAST_CKPT))?;
        let mut saved = ck.config.clone();
        saved.max_epochs = cfg.max_epochs;
        saved.run_dir = cfg.run_dir.clone();
        saved.data_dir = cfg.data_dir.clone();
        if saved != *cfg {
            return Err(Error::Config("config differs from the checkpoint being resumed".into()));
        }
        (ck.model, Some(ck.state))
    } else {
        (Model::build(&cfg.model_spec(), cfg.seed)?, None)
    };
    let cfg_path = run_dir.join("config.toml");
    fs::write(&cfg_path, cfg.to_toml()).map_err(|e| Error::io(&cfg_path, e))?;
    let log_path = run_dir.join(METRICS_FILE);
    let log = OpenOptions::new()
        .create(true)
        .append(resume)
        .write(true)
        .truncate(!resume)
        .open(&log_path)
        .map_err(|e| Error::io(&log_path, e))?;

    let train_vols = load_split(&ds, Split::Train)?;
    let val_vols = load_split(&ds, Split::Val)?;
    let val = cache_trunks(&model, &val_vols, &Preprocess::from_config(cfg, false))?;
    let mut writer = RunWriter {
        dir: run_dir.to_path_buf(),
        config: cfg.clone(),
        log,
    };
    if cfg.augment {
        let src = VolumeSource {
            volumes: Arc::new(train_vols),
            preprocess: Preprocess::from_config(cfg, true),
        };
        train(model, &src, &val, cfg, state, &mut writer)
    } else {
        let src = cache_trunks(&model, &train_vols, &Preprocess::from_config(cfg, false))?;
        train(model, &src, &val, cfg, state, &mut writer)
    }
}

/// Evaluates a checkpoint on one split and writes the report into `out`.
pub fn cmd_eval(checkpoint: &Path, split: Split, data: Option<&Path>, out: &Path) -> Result<MetricsReport> {
    let ck = Checkpoint::load(checkpoint)?;
    let ds = Dataset::open(data.unwrap_or(&ck.config.data_dir))?;
    check_dataset(&ck.config, &ds)?;
    let vols = load_split(&ds, split)?;
    if vols.is_empty() {
        return Err(Error::Data(format!("split {split} is empty")));
    }
    let src = cache_trunks(&ck.model, &vols, &Preprocess::from_config(&ck.config, false))?;
    let report = evaluate(&ck.model, &src as &dyn TrunkSource, &ds.manifest.classes, &split.to_string(), 64)?;
    report.write(out)?;
    Ok(report)
}

pub fn cmd_count_params(cfg: &RunConfig) -> Result<ParamTable> {
    Ok(param_report(&Model::build(&cfg.model_spec(), cfg.seed)?))
}

fn run(cli: Cli) -> Result<()> {
    match cli.command {
        Command::Synth { common } => {
            let mut cfg = common.config()?;
            if let Some(s) = common.seed {
                cfg.data_seed = s;
            }
            let out = common.out.unwrap_or(cfg.data_dir.clone());
            let m = cmd_synth(&cfg, &out)?;
            println!("wrote {} volumes and manifest to {}", m.samples.len(), out.display());
        }
        Command::Train { common, resume } => {
            let mut cfg = common.config()?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            if let Some(o) = common.out {
                cfg.run_dir = o;
            }
            let run_dir = cfg.run_dir.clone();
            let outcome = cmd_train(&cfg, &run_dir, resume)?;
            let es = &outcome.state.early;
            println!(
                "stopped after epoch {}; best epoch {} (val mean AUC {:.4}); checkpoints in {}",
                outcome.state.epoch,
                es.best_epoch,
                es.best_auc,
                run_dir.display()
            );
        }
        Command::Eval {
            common,
            checkpoint,
            split,
            data,
        } => {
            let out = common
                .out
                .unwrap_or_else(|| checkpoint.parent().unwrap_or(Path::new(".")).join("eval"));
            let r = cmd_eval(&checkpoint, split, data.as_deref(), &out)?;
            print!("{}", r.per_class_tsv());
            println!("mean AUC {:.4} ± {:.4}; report in {}", r.mean_auc, r.std_auc, out.display());
        }
        Command::CountParams { common } => {
            let mut cfg = common.config()?;
            if let Some(s) = common.seed {
                cfg.seed = s;
            }
            let table = cmd_count_params(&cfg)?;
            print!("{}", table.render());
            if let Some(out) = common.out {
                fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
                let p = out.join("params.tsv");
                fs::write(&p, table.render()).map_err(|e| Error::io(&p, e))?;
            }
        }
    }
    Ok(())
}

/// Parses `args`, runs the command and returns the process exit code.
pub fn main_with<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let _ = e.print();
            return if e.use_stderr() { 2 } else { 0 };
        }
    };
    match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    }
}
