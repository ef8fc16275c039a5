//! Volumes, CT preprocessing, augmentation, a synthetic study generator and
//! the on-disk dataset format.

pub mod augment;
pub mod io;
pub mod preprocess;
pub mod synth;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

pub use augment::{augment, AugmentConfig};
pub use preprocess::{hu_window, resample, WindowSpec, DEFAULT_WINDOWS};
pub use synth::{synth_dataset, SynthConfig};

/// HU assigned to voxels sampled outside the field of view.
pub const AIR_HU: f64 = -1000.0;

/// One study: an `S×H×W` grid of HU values.
///
/// `spacing` is `(x, y, z)` in millimetres, i.e. `(W, H, S)` axis order.
#[derive(Clone, Debug, PartialEq)]
pub struct VolumeSample {
    pub voxels: Tensor,
    pub spacing: [f64; 3],
    pub labels: Vec<u8>,
    pub sample_id: String,
    pub stream_id: u64,
}

impl VolumeSample {
    pub fn new(voxels: Tensor, spacing: [f64; 3], labels: Vec<u8>, sample_id: impl Into<String>, stream_id: u64) -> Result<Self> {
        if voxels.shape().len() != 3 {
            return Err(Error::shape("volume", voxels.shape(), &[0, 0, 0]));
        }
        check_spacing(spacing)?;
        if !voxels.is_finite() {
            return Err(Error::Data("volume contains non-finite voxels".into()));
        }
        Ok(Self {
            voxels,
            spacing,
            labels,
            sample_id: sample_id.into(),
            stream_id,
        })
    }

    /// `[S, H, W]`.
    pub fn dims(&self) -> [usize; 3] {
        let s = self.voxels.shape();
        [s[0], s[1], s[2]]
    }
}

pub(crate) fn check_spacing(spacing: [f64; 3]) -> Result<()> {
    if spacing.iter().all(|&s| s > 0.0 && s.is_finite()) {
        Ok(())
    } else {
        Err(Error::Data(format!("spacing must be positive, got {spacing:?}")))
    }
}

const SPLIT_TAG: u64 = 0x5B17;

/// Random disjoint train/val/test assignment of `n` samples with
/// `round(n·train)` train and `round(n·val)` val members.
pub fn assign_splits(n: usize, train: f64, val: f64, seed: u64) -> Vec<Split> {
    let n_train = ((train * n as f64).round() as usize).min(n);
    let n_val = ((val * n as f64).round() as usize).min(n - n_train);
    let mut order: Vec<usize> = (0..n).collect();
    RngStream::keyed(seed, &[SPLIT_TAG]).shuffle(&mut order);
    let mut split = vec![Split::Test; n];
    for (rank, &i) in order.iter().enumerate() {
        if rank < n_train {
            split[i] = Split::Train;
        } else if rank < n_train + n_val {
            split[i] = Split::Val;
        }
    }
    split
}

/// Dataset split tag.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

impl std::str::FromStr for Split {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "train" => Ok(Split::Train),
            "val" | "validation" => Ok(Split::Val),
            "test" => Ok(Split::Test),
            other => Err(Error::Config(format!("unknown split `{other}`"))),
        }
    }
}

impl std::fmt::Display for Split {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Split::Train => "train",
            Split::Val => "val",
            Split::Test => "test",
        })
    }
}
