//! Epoch loop: repeat-factor resampling, minibatch focal-loss training with
//! AdamW, validation AUC, early stopping and best-checkpoint selection.

use std::sync::Arc;

use crate::config::RunConfig;
use crate::data::io::Dataset;
use crate::data::{augment, hu_window, resample, AugmentConfig, Split, VolumeSample, WindowSpec};
use crate::error::{Error, Result};
use crate::metrics::{aggregate, per_class_auc, MetricsReport, param_report};
use crate::objective::{focal_loss, prevalence_weights, FocalLossConfig};
use crate::optim::{clip_grad_norm, OptimizerState};
use crate::par::par_map;
use crate::pipeline::Model;
use crate::rng::RngStream;
use crate::sampler::{epoch_indices, repeat_factors};
use crate::tensor::Tensor;

const EPOCH_TAG: u64 = 0xE90C;
const AUG_TAG: u64 = 0xA06;

/// Stream driving resampling and shuffling in `epoch`.
pub fn epoch_stream(seed: u64, epoch: usize) -> RngStream {
    RngStream::keyed(seed, &[EPOCH_TAG, epoch as u64])
}

/// Early stopping bookkeeping.
///
/// Training stops after epoch `e` once `e ≥ min_epochs` and at least
/// `patience` epochs have passed since the later of the best epoch and
/// `min_epochs`.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStopState {
    pub best_auc: f64,
    pub best_epoch: usize,
    pub since_improvement: usize,
    pub min_epochs: usize,
    pub patience: usize,
}

impl EarlyStopState {
    pub fn new(min_epochs: usize, patience: usize) -> Self {
        Self {
            best_auc: f64::NEG_INFINITY,
            best_epoch: 0,
            since_improvement: 0,
            min_epochs,
            patience,
        }
    }

    /// Records the validation AUC of `epoch` (1-based); returns true on strict improvement.
    pub fn update(&mut self, epoch: usize, auc: f64) -> bool {
        if auc > self.best_auc {
            self.best_auc = auc;
            self.best_epoch = epoch;
            self.since_improvement = 0;
            true
        } else {
            self.since_improvement = epoch - self.best_epoch;
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.min_epochs && epoch - self.best_epoch.max(self.min_epochs) >= self.patience
    }
}

/// Supplies frozen-trunk features for training and evaluation.
pub trait TrunkSource: Sync {
    fn len(&self) -> usize;

    fn is_empty(&self) -> bool {
        self.len() == 0
    }

    fn labels(&self, i: usize) -> &[u8];

    /// Trunk rows of sample `i` as seen in `epoch` (augmentation may differ per epoch).
    fn trunk(&self, model: &Model, i: usize, epoch: usize) -> Result<Tensor>;
}

/// Precomputed, unaugmented trunk features.
#[derive(Clone, Debug)]
pub struct CachedTrunks {
    pub trunks: Vec<Tensor>,
    pub labels: Vec<Vec<u8>>,
}

impl TrunkSource for CachedTrunks {
    fn len(&self) -> usize {
        self.trunks.len()
    }

    fn labels(&self, i: usize) -> &[u8] {
        &self.labels[i]
    }

    fn trunk(&self, _model: &Model, i: usize, _epoch: usize) -> Result<Tensor> {
        Ok(self.trunks[i].clone())
    }
}

/// Loads a volume into model input: resample → (augment) → HU windows.
#[derive(Clone, Debug)]
pub struct Preprocess {
    pub target_spacing: [f64; 3],
    pub windows: Vec<WindowSpec>,
    pub augment: Option<AugmentConfig>,
    pub seed: u64,
}

impl Preprocess {
    pub fn from_config(cfg: &RunConfig, train: bool) -> Self {
        Self {
            target_spacing: cfg.target_spacing,
            windows: cfg.windows(),
            augment: (train && cfg.augment).then(|| cfg.augment_config()),
            seed: cfg.seed,
        }
    }

    /// `[1, M, S, H, W]` model input.
    pub fn input(&self, v: &VolumeSample, epoch: usize) -> Result<Tensor> {
        let mut v = resample(v, self.target_spacing)?;
        if let Some(aug) = &self.augment {
            let mut rng = RngStream::keyed(self.seed, &[AUG_TAG, epoch as u64, v.stream_id]);
            v = augment(&v, aug, &mut rng)?;
        }
        let x = hu_window(&v, &self.windows);
        let shape = x.shape().to_vec();
        x.reshape(&[1, shape[0], shape[1], shape[2], shape[3]])
    }
}

/// Volumes that are preprocessed (and possibly augmented) on every access.
pub struct VolumeSource {
    pub volumes: Arc<Vec<VolumeSample>>,
    pub preprocess: Preprocess,
}

impl TrunkSource for VolumeSource {
    fn len(&self) -> usize {
        self.volumes.len()
    }

    fn labels(&self, i: usize) -> &[u8] {
        &self.volumes[i].labels
    }

    fn trunk(&self, model: &Model, i: usize, epoch: usize) -> Result<Tensor> {
        model.trunk(&self.preprocess.input(&self.volumes[i], epoch)?)
    }
}

/// Computes every trunk once, in parallel; results are order-independent.
pub fn cache_trunks(model: &Model, volumes: &[VolumeSample], pre: &Preprocess) -> Result<CachedTrunks> {
    let trunks = par_map(volumes.len(), |i| pre.input(&volumes[i], 0).and_then(|x| model.trunk(&x)));
    Ok(CachedTrunks {
        trunks: trunks.into_iter().collect::<Result<_>>()?,
        labels: volumes.iter().map(|v| v.labels.clone()).collect(),
    })
}

/// Loads one split of an on-disk dataset.
pub fn load_split(ds: &Dataset, split: Split) -> Result<Vec<VolumeSample>> {
    ds.manifest.entries(split).map(|e| ds.load(e)).collect()
}

fn stack(trunks: &[Tensor]) -> Result<(Tensor, usize)> {
    let rows = trunks[0].rows();
    let cols = trunks[0].cols();
    let mut data = Vec::with_capacity(trunks.len() * rows * cols);
    for t in trunks {
        if t.shape() != [rows, cols] {
            return Err(Error::shape("batch", t.shape(), &[rows, cols]));
        }
        data.extend_from_slice(t.data());
    }
    Ok((Tensor::new(&[trunks.len() * rows, cols], data)?, rows))
}

/// Sigmoid outputs for every sample of `src`, in order.
pub fn predict(model: &Model, src: &dyn TrunkSource, batch_size: usize) -> Result<Vec<Vec<f64>>> {
    let mut out = Vec::with_capacity(src.len());
    let idx: Vec<usize> = (0..src.len()).collect();
    for chunk in idx.chunks(batch_size.max(1)) {
        let trunks = chunk.iter().map(|&i| src.trunk(model, i, 0)).collect::<Result<Vec<_>>>()?;
        let (x, rows) = stack(&trunks)?;
        let pass = model.forward_trunk(x, chunk.len(), rows)?;
        for b in 0..chunk.len() {
            out.push(pass.probs.row(b).to_vec());
        }
    }
    Ok(out)
}

pub fn mean_auc(model: &Model, src: &dyn TrunkSource, batch_size: usize) -> Result<f64> {
    let probs = predict(model, src, batch_size)?;
    let labels: Vec<Vec<u8>> = (0..src.len()).map(|i| src.labels(i).to_vec()).collect();
    let names: Vec<String> = (0..model.spec.classes).map(|c| c.to_string()).collect();
    let per = per_class_auc(&probs, &labels, &names)?;
    Ok(aggregate(&per.iter().map(|c| c.auc).collect::<Vec<_>>())?.mean)
}

pub fn evaluate(model: &Model, src: &dyn TrunkSource, names: &[String], split: &str, batch_size: usize) -> Result<MetricsReport> {
    let probs = predict(model, src, batch_size)?;
    let labels: Vec<Vec<u8>> = (0..src.len()).map(|i| src.labels(i).to_vec()).collect();
    MetricsReport::build(split, per_class_auc(&probs, &labels, names)?, param_report(model))
}

#[derive(Clone, Debug, PartialEq)]
pub struct EpochRecord {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_mean_auc: f64,
    pub lr_head: f64,
    pub lr_adapter: f64,
    pub steps: u64,
    pub improved: bool,
    pub best_epoch: usize,
    pub stop: bool,
}

impl EpochRecord {
    pub fn to_json(&self) -> serde_json::Value {
        serde_json::json!({
            "epoch": self.epoch,
            "train_loss": self.train_loss,
            "val_mean_auc": self.val_mean_auc,
            "lr_head": self.lr_head,
            "lr_adapter": self.lr_adapter,
            "steps": self.steps,
            "improved": self.improved,
            "best_epoch": self.best_epoch,
            "stop": self.stop,
        })
    }
}

/// Resumable state of a run.
#[derive(Clone, Debug, PartialEq)]
pub struct TrainState {
    pub optimizer: OptimizerState,
    /// Completed epochs.
    pub epoch: usize,
    pub early: EarlyStopState,
    pub focal: FocalLossConfig,
}

impl TrainState {
    pub fn new(cfg: &RunConfig, train_labels: &[Vec<u8>]) -> Result<Self> {
        let alpha = prevalence_weights(train_labels, cfg.weight_floor, cfg.weight_ceil)?;
        Ok(Self {
            optimizer: OptimizerState::new(cfg.optimizer()),
            epoch: 0,
            early: EarlyStopState::new(cfg.min_epochs, cfg.patience),
            focal: cfg.focal(alpha),
        })
    }
}

/// Called after every epoch with the current model and state, and with the
/// best model whenever it improves.
pub trait TrainObserver {
    fn on_epoch(&mut self, _record: &EpochRecord, _model: &Model, _state: &TrainState) -> Result<()> {
        Ok(())
    }

    fn on_best(&mut self, _record: &EpochRecord, _model: &Model, _state: &TrainState) -> Result<()> {
        Ok(())
    }
}

impl TrainObserver for () {}

pub struct TrainOutcome {
    pub best: Model,
    pub last: Model,
    pub state: TrainState,
    pub history: Vec<EpochRecord>,
}

fn param_norms(model: &Model) -> String {
    model
        .params()
        .iter()
        .map(|(n, _, t)| format!("{n}={:.3e}", t.data().iter().map(|v| v * v).sum::<f64>().sqrt()))
        .collect::<Vec<_>>()
        .join(", ")
}

/// One epoch of minibatch updates; returns the mean training loss.
pub fn train_epoch(
    model: &mut Model,
    state: &mut TrainState,
    src: &dyn TrunkSource,
    cfg: &RunConfig,
    epoch: usize,
) -> Result<f64> {
    let labels: Vec<Vec<u8>> = (0..src.len()).map(|i| src.labels(i).to_vec()).collect();
    let factors = repeat_factors(&labels, cfg.rfs_threshold);
    let mut rng = epoch_stream(cfg.seed, epoch);
    let order = epoch_indices(&factors, &mut rng);
    let mut total = 0.0;
    let mut batches = 0usize;
    for (bi, chunk) in order.chunks(cfg.batch_size).enumerate() {
        let trunks = chunk.iter().map(|&i| src.trunk(model, i, epoch)).collect::<Result<Vec<_>>>()?;
        let (x, rows) = stack(&trunks)?;
        let pass = model.forward_trunk(x, chunk.len(), rows)?;
        let y: Vec<u8> = chunk.iter().flat_map(|&i| labels[i].iter().copied()).collect();
        let (loss, g_probs) = focal_loss(&pass.probs, &y, &state.focal)?;
        model.zero_grad();
        let aux = model.backward(&pass, &g_probs, cfg.load_balance_weight)?;
        let loss = loss + aux;
        if !loss.is_finite() {
            return Err(Error::Numerical(format!(
                "non-finite loss {loss} at epoch {epoch}, batch {bi}; parameter norms: {}",
                param_norms(model)
            )));
        }
        let mut params = model.params_mut();
        clip_grad_norm(&mut params, cfg.grad_clip);
        state.optimizer.step(&mut params)?;
        total += loss;
        batches += 1;
    }
    Ok(total / batches.max(1) as f64)
}

/// Runs (or resumes) training until early stopping or `max_epochs`.
pub fn train(
    mut model: Model,
    train_src: &dyn TrunkSource,
    val_src: &dyn TrunkSource,
    cfg: &RunConfig,
    resume: Option<TrainState>,
    observer: &mut dyn TrainObserver,
) -> Result<TrainOutcome> {
    if train_src.is_empty() || val_src.is_empty() {
        return Err(Error::Data("training and validation splits must be non-empty".into()));
    }
    let mut state = match resume {
        Some(s) => s,
        None => {
            let labels: Vec<Vec<u8>> = (0..train_src.len()).map(|i| train_src.labels(i).to_vec()).collect();
            TrainState::new(cfg, &labels)?
        }
    };
    let mut best = model.clone();
    let mut history = Vec::new();
    if state.early.should_stop(state.epoch) {
        return Ok(TrainOutcome {
            last: model,
            best,
            state,
            history,
        });
    }
    while state.epoch < cfg.max_epochs {
        let epoch = state.epoch + 1;
        let train_loss = train_epoch(&mut model, &mut state, train_src, cfg, epoch)?;
        let val = mean_auc(&model, val_src, cfg.batch_size.max(32))?;
        let improved = state.early.update(epoch, val);
        state.epoch = epoch;
        let stop = state.early.should_stop(epoch) || epoch == cfg.max_epochs;
        let record = EpochRecord {
            epoch,
            train_loss,
            val_mean_auc: val,
            lr_head: cfg.lr_head,
            lr_adapter: cfg.lr_adapter,
            steps: state.optimizer.step,
            improved,
            best_epoch: state.early.best_epoch,
            stop,
        };
        if improved {
            best = model.clone();
            observer.on_best(&record, &model, &state)?;
        }
        observer.on_epoch(&record, &model, &state)?;
        history.push(record);
        if stop {
            break;
        }
    }
    Ok(TrainOutcome {
        best,
        last: model,
        state,
        history,
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn constant_auc_stops_at_min_plus_patience() {
        let mut es = EarlyStopState::new(20, 5);
        let mut stop_at = None;
        for e in 1..=100 {
            es.update(e, 0.7);
            if es.should_stop(e) {
                stop_at = Some(e);
                break;
            }
        }
        assert_eq!(stop_at, Some(25));
        assert_eq!(es.best_epoch, 1);
    }

    #[test]
    fn improving_auc_never_stops() {
        let mut es = EarlyStopState::new(20, 5);
        for e in 1..=100 {
            es.update(e, e as f64 / 1000.0);
            assert!(!es.should_stop(e));
        }
    }

    #[test]
    fn late_improvement_extends() {
        let mut es = EarlyStopState::new(20, 5);
        for e in 1..=30 {
            es.update(e, if e == 22 { 0.9 } else { 0.5 });
            if e < 27 {
                assert!(!es.should_stop(e), "stopped at {e}");
            }
        }
        assert!(es.should_stop(27));
    }

    #[test]
    fn never_before_min_epochs() {
        let mut es = EarlyStopState::new(20, 1);
        for e in 1..20 {
            es.update(e, 1.0 - e as f64 * 0.01);
            assert!(!es.should_stop(e));
        }
    }
}
