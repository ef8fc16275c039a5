//! Run configuration: one flat TOML table, validated on load, with
//! `key=value` overrides.

use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::data::augment::AugmentConfig;
use crate::data::synth::{long_tail_prevalence, SynthConfig};
use crate::data::WindowSpec;
use crate::error::{Error, Result};
use crate::objective::FocalLossConfig;
use crate::optim::AdamWConfig;
use crate::pipeline::{Mode, ModelSpec};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RunConfig {
    pub mode: Mode,

    // adapters
    pub experts: usize,
    pub rank: usize,
    pub alpha: f64,
    /// Expert scaling `s`; defaults to `alpha / rank`.
    pub expert_scaling: Option<f64>,
    pub router_hidden: usize,
    pub load_balance_weight: f64,

    // model
    pub feature_dim: usize,
    pub classes: usize,
    pub channels: usize,
    pub classifier_bias: bool,
    pub backbone_seed: u64,

    // volumes
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    pub source_spacing: [f64; 3],
    pub target_spacing: [f64; 3],
    pub hu_windows: Vec<[f64; 2]>,

    // loss
    pub gamma: f64,
    pub weight_floor: f64,
    pub weight_ceil: f64,

    // optimizer
    pub lr_head: f64,
    pub lr_adapter: f64,
    pub weight_decay: f64,
    pub beta1: f64,
    pub beta2: f64,
    pub adam_eps: f64,
    pub batch_size: usize,
    pub grad_clip: f64,

    // sampling and schedule
    pub rfs_threshold: f64,
    pub min_epochs: usize,
    pub patience: usize,
    pub max_epochs: usize,

    // augmentation
    pub augment: bool,
    pub elastic_alpha: [f64; 2],
    pub elastic_sigma: [f64; 2],
    pub rotation: [f64; 2],
    pub scale: [f64; 2],
    pub brightness: [f64; 2],
    pub noise_variance: [f64; 2],
    pub mirror_prob: f64,

    // synthetic data
    pub n_samples: usize,
    pub train_fraction: f64,
    pub val_fraction: f64,
    pub prevalence_max: f64,
    pub prevalence_min: f64,
    pub data_seed: u64,

    pub seed: u64,
    pub data_dir: PathBuf,
    pub run_dir: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        let aug = AugmentConfig::default();
        Self {
            mode: Mode::Molre,
            experts: 6,
            rank: 8,
            alpha: 16.0,
            expert_scaling: None,
            router_hidden: 256,
            load_balance_weight: 0.0,
            feature_dim: 64,
            classes: 12,
            channels: 3,
            classifier_bias: true,
            backbone_seed: 2024,
            slices: 32,
            height: 64,
            width: 64,
            source_spacing: [1.0, 1.0, 4.0],
            target_spacing: [1.0, 1.0, 4.0],
            hu_windows: vec![[0.0, 80.0], [-20.0, 180.0], [-800.0, 2000.0]],
            gamma: 2.0,
            weight_floor: 0.05,
            weight_ceil: 0.95,
            lr_head: 1e-3,
            lr_adapter: 1e-4,
            weight_decay: 0.01,
            beta1: 0.9,
            beta2: 0.999,
            adam_eps: 1e-8,
            batch_size: 8,
            grad_clip: 5.0,
            rfs_threshold: 0.01,
            min_epochs: 20,
            patience: 5,
            max_epochs: 100,
            augment: true,
            elastic_alpha: aug.elastic_alpha,
            elastic_sigma: aug.elastic_sigma,
            rotation: aug.rotation,
            scale: aug.scale,
            brightness: aug.brightness,
            noise_variance: aug.noise_variance,
            mirror_prob: 0.5,
            n_samples: 1000,
            train_fraction: 0.8,
            val_fraction: 0.1,
            prevalence_max: 0.4,
            prevalence_min: 0.005,
            data_seed: 1,
            seed: 0,
            data_dir: PathBuf::from("data"),
            run_dir: PathBuf::from("runs/default"),
        }
    }
}

fn parse_value(raw: &str) -> toml::Value {
    let doc = format!("v = {raw}");
    match toml::from_str::<toml::Table>(&doc) {
        Ok(mut t) => t.remove("v").unwrap_or_else(|| toml::Value::String(raw.into())),
        Err(_) => toml::Value::String(raw.into()),
    }
}

impl RunConfig {
    /// Parses TOML text, applies `key=value` overrides, and validates.
    pub fn from_toml_with_overrides(text: &str, overrides: &[String]) -> Result<Self> {
        let mut table: toml::Table = toml::from_str(text).map_err(|e| Error::Config(e.to_string()))?;
        for ov in overrides {
            let (k, v) = ov
                .split_once('=')
                .ok_or_else(|| Error::Config(format!("override `{ov}` is not key=value")))?;
            table.insert(k.trim().to_string(), parse_value(v.trim()));
        }
        let cfg: RunConfig = toml::Value::Table(table)
            .try_into()
            .map_err(|e: toml::de::Error| Error::Config(e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn load(path: Option<&Path>, overrides: &[String]) -> Result<Self> {
        let text = match path {
            Some(p) => fs::read_to_string(p).map_err(|e| Error::Config(format!("{}: {e}", p.display())))?,
            None => String::new(),
        };
        Self::from_toml_with_overrides(&text, overrides)
    }

    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    pub fn expert_scaling(&self) -> f64 {
        self.expert_scaling.unwrap_or(self.alpha / self.rank as f64)
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |m: String| Err(Error::Config(m));
        if matches!(self.mode, Mode::Molre | Mode::Molre3d) && self.experts == 0 {
            return bad("molre modes need experts >= 1".into());
        }
        if self.rank == 0 || self.rank > self.feature_dim {
            return bad(format!("rank {} must be in 1..={}", self.rank, self.feature_dim));
        }
        if !(self.alpha > 0.0) || self.expert_scaling.is_some_and(|s| !(s > 0.0)) {
            return bad("alpha and expert_scaling must be positive".into());
        }
        if self.router_hidden == 0 || self.feature_dim == 0 || self.classes == 0 {
            return bad("router_hidden, feature_dim and classes must be positive".into());
        }
        if self.channels != self.hu_windows.len() {
            return bad(format!(
                "channels ({}) must equal the number of HU windows ({})",
                self.channels,
                self.hu_windows.len()
            ));
        }
        for w in &self.hu_windows {
            WindowSpec::new(w[0], w[1])?;
        }
        if self.slices == 0 || self.height < 8 || self.width < 8 {
            return bad("volume must be at least 1×8×8".into());
        }
        if self.gamma < 0.0 || !(0.0 < self.weight_floor && self.weight_floor <= self.weight_ceil && self.weight_ceil <= 1.0) {
            return bad("need gamma >= 0 and 0 < weight_floor <= weight_ceil <= 1".into());
        }
        if !(self.lr_head > 0.0 && self.lr_adapter > 0.0) || self.weight_decay < 0.0 {
            return bad("learning rates must be positive and weight decay nonnegative".into());
        }
        if !(0.0..1.0).contains(&self.beta1) || !(0.0..1.0).contains(&self.beta2) || !(self.adam_eps > 0.0) {
            return bad("betas must lie in [0, 1) and eps must be positive".into());
        }
        if self.batch_size == 0 || self.grad_clip < 0.0 {
            return bad("batch_size must be positive and grad_clip nonnegative".into());
        }
        if !(self.rfs_threshold > 0.0 && self.rfs_threshold <= 1.0) {
            return bad("rfs_threshold must lie in (0, 1]".into());
        }
        if self.max_epochs == 0 {
            return bad("max_epochs must be positive".into());
        }
        if self.load_balance_weight < 0.0 {
            return bad("load_balance_weight must be nonnegative".into());
        }
        self.augment_config().validate()?;
        if !(self.train_fraction > 0.0 && self.val_fraction > 0.0 && self.train_fraction + self.val_fraction <= 1.0) {
            return bad("train_fraction and val_fraction must be positive and sum to at most 1".into());
        }
        if !(0.0 < self.prevalence_min && self.prevalence_min <= self.prevalence_max && self.prevalence_max <= 1.0) {
            return bad("need 0 < prevalence_min <= prevalence_max <= 1".into());
        }
        crate::data::check_spacing(self.source_spacing)?;
        crate::data::check_spacing(self.target_spacing)?;
        Ok(())
    }

    pub fn model_spec(&self) -> ModelSpec {
        ModelSpec {
            mode: self.mode,
            in_channels: self.channels,
            feature_dim: self.feature_dim,
            classes: self.classes,
            experts: self.experts,
            rank: self.rank,
            expert_scaling: self.expert_scaling(),
            router_hidden: self.router_hidden,
            lora_rank: self.rank,
            lora_alpha: self.alpha,
            classifier_bias: self.classifier_bias,
            backbone_seed: self.backbone_seed,
        }
    }

    pub fn windows(&self) -> Vec<WindowSpec> {
        self.hu_windows.iter().map(|w| WindowSpec { lo: w[0], hi: w[1] }).collect()
    }

    pub fn augment_config(&self) -> AugmentConfig {
        AugmentConfig {
            elastic_alpha: self.elastic_alpha,
            elastic_sigma: self.elastic_sigma,
            rotation: self.rotation,
            scale: self.scale,
            brightness: self.brightness,
            noise_variance: self.noise_variance,
            mirror_prob: [self.mirror_prob; 3],
        }
    }

    pub fn optimizer(&self) -> AdamWConfig {
        AdamWConfig {
            lr_head: self.lr_head,
            lr_adapter: self.lr_adapter,
            weight_decay: self.weight_decay,
            beta1: self.beta1,
            beta2: self.beta2,
            eps: self.adam_eps,
        }
    }

    pub fn synth_config(&self) -> SynthConfig {
        SynthConfig {
            slices: self.slices,
            height: self.height,
            width: self.width,
            spacing: self.source_spacing,
            prevalence: long_tail_prevalence(self.classes, self.prevalence_max, self.prevalence_min),
            seed: self.data_seed,
        }
    }

    pub fn focal(&self, alpha: Vec<f64>) -> FocalLossConfig {
        FocalLossConfig {
            gamma: self.gamma,
            alpha,
        }
    }
}
