use serde::{Deserialize, Serialize};

use super::{check_spacing, VolumeSample};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Linear HU window `[lo, hi] → [0, 1]` with clamping.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct WindowSpec {
    pub lo: f64,
    pub hi: f64,
}

impl WindowSpec {
    pub fn new(lo: f64, hi: f64) -> Result<Self> {
        if !(lo < hi) {
            return Err(Error::Config(format!("window needs lo < hi, got [{lo}, {hi}]")));
        }
        Ok(Self { lo, hi })
    }

    #[inline]
    pub fn apply(&self, hu: f64) -> f64 {
        ((hu - self.lo) / (self.hi - self.lo)).clamp(0.0, 1.0)
    }
}

/// Brain, subdural and bone windows.
pub const DEFAULT_WINDOWS: [WindowSpec; 3] = [
    WindowSpec { lo: 0.0, hi: 80.0 },
    WindowSpec { lo: -20.0, hi: 180.0 },
    WindowSpec { lo: -800.0, hi: 2000.0 },
];

/// Stacks one windowed channel per window: `[W, S, H, W]`.
pub fn hu_window(v: &VolumeSample, windows: &[WindowSpec]) -> Tensor {
    let n = v.voxels.len();
    let mut out = Vec::with_capacity(windows.len() * n);
    for w in windows {
        out.extend(v.voxels.data().iter().map(|&hu| w.apply(hu)));
    }
    let [s, h, wd] = v.dims();
    Tensor::from_vec_unchecked(&[windows.len(), s, h, wd], out)
}

/// Trilinear sample at fractional voxel coordinates `(z, y, x)`.
/// Coordinates outside `[0, n−1]` (beyond a small tolerance) return `fill`.
pub fn sample_trilinear(vox: &[f64], dims: [usize; 3], pos: [f64; 3], fill: f64) -> f64 {
    const TOL: f64 = 1e-9;
    let mut base = [0usize; 3];
    let mut frac = [0f64; 3];
    for a in 0..3 {
        let n = dims[a];
        let p = pos[a];
        if !(p >= -TOL && p <= (n - 1) as f64 + TOL) {
            return fill;
        }
        let p = p.clamp(0.0, (n - 1) as f64);
        let i0 = (p.floor() as usize).min(n - 1);
        base[a] = i0;
        frac[a] = p - i0 as f64;
    }
    let [s, h, w] = dims;
    let _ = s;
    let idx = |z: usize, y: usize, x: usize| (z * h + y) * w + x;
    let step = |a: usize| usize::from(base[a] + 1 < dims[a]);
    let (z0, y0, x0) = (base[0], base[1], base[2]);
    let (z1, y1, x1) = (z0 + step(0), y0 + step(1), x0 + step(2));
    let [tz, ty, tx] = frac;
    let lerp = |a: f64, b: f64, t: f64| if t == 0.0 { a } else { a + t * (b - a) };
    let c00 = lerp(vox[idx(z0, y0, x0)], vox[idx(z0, y0, x1)], tx);
    let c01 = lerp(vox[idx(z0, y1, x0)], vox[idx(z0, y1, x1)], tx);
    let c10 = lerp(vox[idx(z1, y0, x0)], vox[idx(z1, y0, x1)], tx);
    let c11 = lerp(vox[idx(z1, y1, x0)], vox[idx(z1, y1, x1)], tx);
    lerp(lerp(c00, c01, ty), lerp(c10, c11, ty), tz)
}

/// Trilinear resampling onto a new voxel spacing `(x, y, z)` mm.
///
/// Output voxel `j` along an axis sits at physical offset `j·target` from the
/// first input voxel; the output length is the largest count that stays
/// inside the input extent.
pub fn resample(v: &VolumeSample, target: [f64; 3]) -> Result<VolumeSample> {
    check_spacing(v.spacing)?;
    check_spacing(target)?;
    if v.spacing == target {
        return Ok(v.clone());
    }
    let dims = v.dims();
    // axis order (z, y, x) ↔ spacing index (2, 1, 0)
    let ratio = [target[2] / v.spacing[2], target[1] / v.spacing[1], target[0] / v.spacing[0]];
    let mut out_dims = [0usize; 3];
    for a in 0..3 {
        let extent = (dims[a] - 1) as f64 / ratio[a];
        out_dims[a] = (extent + 1e-9).floor() as usize + 1;
    }
    let [so, ho, wo] = out_dims;
    let mut out = Vec::with_capacity(so * ho * wo);
    for z in 0..so {
        for y in 0..ho {
            for x in 0..wo {
                let pos = [z as f64 * ratio[0], y as f64 * ratio[1], x as f64 * ratio[2]];
                out.push(sample_trilinear(v.voxels.data(), dims, pos, f64::NAN));
            }
        }
    }
    if out.iter().any(|x| x.is_nan()) {
        return Err(Error::Data("resample produced out-of-field samples".into()));
    }
    Ok(VolumeSample {
        voxels: Tensor::new(&out_dims, out)?,
        spacing: target,
        labels: v.labels.clone(),
        sample_id: v.sample_id.clone(),
        stream_id: v.stream_id,
    })
}
