//! Spatial and intensity augmentation of HU volumes.
//!
//! Order: elastic → rotation → anisotropic scaling (composed into a single
//! trilinear warp) → brightness → Gaussian noise → per-axis mirroring.
//! All draws come from the caller's stream, so results depend only on that
//! stream and the input.

use serde::{Deserialize, Serialize};

use super::preprocess::sample_trilinear;
use super::{VolumeSample, AIR_HU};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct AugmentConfig {
    pub elastic_alpha: [f64; 2],
    pub elastic_sigma: [f64; 2],
    /// Radians, per axis.
    pub rotation: [f64; 2],
    pub scale: [f64; 2],
    pub brightness: [f64; 2],
    pub noise_variance: [f64; 2],
    /// Mirror probability for the `(x, y, z)` axes.
    pub mirror_prob: [f64; 3],
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            elastic_alpha: [0.0, 200.0],
            elastic_sigma: [10.0, 13.0],
            rotation: [-0.1, 0.1],
            scale: [0.85, 1.15],
            brightness: [0.99, 1.01],
            noise_variance: [0.0, 0.03],
            mirror_prob: [0.5; 3],
        }
    }
}

impl AugmentConfig {
    /// Every range collapsed to its no-op value.
    pub fn identity() -> Self {
        Self {
            elastic_alpha: [0.0, 0.0],
            elastic_sigma: [10.0, 10.0],
            rotation: [0.0, 0.0],
            scale: [1.0, 1.0],
            brightness: [1.0, 1.0],
            noise_variance: [0.0, 0.0],
            mirror_prob: [0.0; 3],
        }
    }

    pub fn validate(&self) -> Result<()> {
        let ranges = [
            ("elastic_alpha", self.elastic_alpha),
            ("elastic_sigma", self.elastic_sigma),
            ("rotation", self.rotation),
            ("scale", self.scale),
            ("brightness", self.brightness),
            ("noise_variance", self.noise_variance),
        ];
        for (name, [lo, hi]) in ranges {
            if !(lo <= hi) {
                return Err(Error::Config(format!("augment {name}: low {lo} > high {hi}")));
            }
        }
        if self.elastic_alpha[0] < 0.0 || self.noise_variance[0] < 0.0 {
            return Err(Error::Config("elastic alpha and noise variance must be nonnegative".into()));
        }
        if self.elastic_sigma[0] <= 0.0 || self.scale[0] <= 0.0 {
            return Err(Error::Config("elastic sigma and scale must be positive".into()));
        }
        if self.mirror_prob.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("mirror probabilities must lie in [0, 1]".into()));
        }
        Ok(())
    }
}

/// Concrete parameters drawn for one sample.
#[derive(Clone, Debug, PartialEq)]
pub struct AugmentDraw {
    pub alpha: f64,
    pub sigma: f64,
    /// `(θx, θy, θz)`.
    pub angles: [f64; 3],
    /// `(x, y, z)` scale factors.
    pub scales: [f64; 3],
    pub brightness: f64,
    pub noise_variance: f64,
    /// `(x, y, z)`.
    pub mirror: [bool; 3],
}

impl AugmentDraw {
    pub fn sample(cfg: &AugmentConfig, rng: &mut RngStream) -> Self {
        let mut u = |r: [f64; 2]| rng.uniform_in(r[0], r[1]);
        let alpha = u(cfg.elastic_alpha);
        let sigma = u(cfg.elastic_sigma);
        let angles = [u(cfg.rotation), u(cfg.rotation), u(cfg.rotation)];
        let scales = [u(cfg.scale), u(cfg.scale), u(cfg.scale)];
        let brightness = u(cfg.brightness);
        let noise_variance = u(cfg.noise_variance);
        let mirror = [
            rng.bernoulli(cfg.mirror_prob[0]),
            rng.bernoulli(cfg.mirror_prob[1]),
            rng.bernoulli(cfg.mirror_prob[2]),
        ];
        Self {
            alpha,
            sigma,
            angles,
            scales,
            brightness,
            noise_variance,
            mirror,
        }
    }

    fn has_warp(&self) -> bool {
        self.alpha != 0.0 || self.angles.iter().any(|&a| a != 0.0) || self.scales.iter().any(|&s| s != 1.0)
    }
}

pub fn augment(v: &VolumeSample, cfg: &AugmentConfig, rng: &mut RngStream) -> Result<VolumeSample> {
    cfg.validate()?;
    let draw = AugmentDraw::sample(cfg, rng);
    apply(v, &draw, rng)
}

/// Applies already drawn parameters; `rng` supplies the elastic field and noise.
pub fn apply(v: &VolumeSample, draw: &AugmentDraw, rng: &mut RngStream) -> Result<VolumeSample> {
    let dims = v.dims();
    let mut vox = v.voxels.data().to_vec();

    if draw.has_warp() {
        vox = warp(&vox, dims, v.spacing, draw, rng);
    }
    if draw.brightness != 1.0 {
        vox.iter_mut().for_each(|x| *x *= draw.brightness);
    }
    if draw.noise_variance > 0.0 {
        let sd = draw.noise_variance.sqrt();
        vox.iter_mut().for_each(|x| *x += sd * rng.normal());
    }
    // mirror flags are (x, y, z) ↔ grid axes (2, 1, 0)
    for (flag, axis) in draw.mirror.iter().zip([2usize, 1, 0]) {
        if *flag {
            vox = mirror(&vox, dims, axis);
        }
    }

    Ok(VolumeSample {
        voxels: Tensor::new(&dims, vox)?,
        spacing: v.spacing,
        labels: v.labels.clone(),
        sample_id: v.sample_id.clone(),
        stream_id: v.stream_id,
    })
}

/// Reverses the grid along `axis` (0 = slices, 1 = rows, 2 = columns).
pub fn mirror(vox: &[f64], dims: [usize; 3], axis: usize) -> Vec<f64> {
    let [s, h, w] = dims;
    let mut out = vec![0.0; vox.len()];
    for z in 0..s {
        for y in 0..h {
            for x in 0..w {
                let (sz, sy, sx) = match axis {
                    0 => (s - 1 - z, y, x),
                    1 => (z, h - 1 - y, x),
                    _ => (z, y, w - 1 - x),
                };
                out[(z * h + y) * w + x] = vox[(sz * h + sy) * w + sx];
            }
        }
    }
    out
}

fn gaussian_kernel(sigma: f64) -> Vec<f64> {
    let radius = (3.0 * sigma).ceil() as isize;
    let k: Vec<f64> = (-radius..=radius)
        .map(|i| (-(i * i) as f64 / (2.0 * sigma * sigma)).exp())
        .collect();
    let sum: f64 = k.iter().sum();
    k.into_iter().map(|v| v / sum).collect()
}

/// Separable Gaussian blur with edge clamping.
fn smooth(field: &mut [f64], dims: [usize; 3], sigma: f64) {
    let k = gaussian_kernel(sigma);
    let r = (k.len() / 2) as isize;
    let [s, h, w] = dims;
    let strides = [h * w, w, 1];
    let mut tmp = vec![0.0; field.len()];
    for axis in 0..3 {
        let n = dims[axis] as isize;
        let stride = strides[axis];
        for (i, out) in tmp.iter_mut().enumerate() {
            let coord = (i / stride) % dims[axis];
            let base = i - coord * stride;
            let mut acc = 0.0;
            for (j, kv) in k.iter().enumerate() {
                let c = (coord as isize + j as isize - r).clamp(0, n - 1) as usize;
                acc += kv * field[base + c * stride];
            }
            *out = acc;
        }
        field.copy_from_slice(&tmp);
    }
    let _ = s;
}

fn rotation_matrix(angles: [f64; 3]) -> [[f64; 3]; 3] {
    // Rotations about x, y, z applied in that order, acting on (x, y, z) vectors.
    let (sx, cx) = angles[0].sin_cos();
    let (sy, cy) = angles[1].sin_cos();
    let (sz, cz) = angles[2].sin_cos();
    let rx = [[1.0, 0.0, 0.0], [0.0, cx, -sx], [0.0, sx, cx]];
    let ry = [[cy, 0.0, sy], [0.0, 1.0, 0.0], [-sy, 0.0, cy]];
    let rz = [[cz, -sz, 0.0], [sz, cz, 0.0], [0.0, 0.0, 1.0]];
    mat_mul(rz, mat_mul(ry, rx))
}

fn mat_mul(a: [[f64; 3]; 3], b: [[f64; 3]; 3]) -> [[f64; 3]; 3] {
    let mut c = [[0.0; 3]; 3];
    for i in 0..3 {
        for j in 0..3 {
            c[i][j] = (0..3).map(|k| a[i][k] * b[k][j]).sum();
        }
    }
    c
}

/// Output voxel → (scale⁻¹) → (rotation⁻¹) → elastic displacement → input.
fn warp(vox: &[f64], dims: [usize; 3], spacing: [f64; 3], draw: &AugmentDraw, rng: &mut RngStream) -> Vec<f64> {
    let [s, h, w] = dims;
    let n = s * h * w;
    let field = if draw.alpha != 0.0 {
        let mut comps = Vec::with_capacity(3);
        for _ in 0..3 {
            let mut f: Vec<f64> = (0..n).map(|_| rng.uniform_in(-1.0, 1.0)).collect();
            smooth(&mut f, dims, draw.sigma);
            f.iter_mut().for_each(|v| *v *= draw.alpha);
            comps.push(f);
        }
        Some(comps)
    } else {
        None
    };

    // physical coordinates (x, y, z) in mm, centred on the grid centre
    let centre = [
        (w - 1) as f64 * spacing[0] / 2.0,
        (h - 1) as f64 * spacing[1] / 2.0,
        (s - 1) as f64 * spacing[2] / 2.0,
    ];
    let rot = rotation_matrix(draw.angles);
    let mut out = vec![AIR_HU; n];
    for z in 0..s {
        for y in 0..h {
            for x in 0..w {
                let p = [
                    x as f64 * spacing[0] - centre[0],
                    y as f64 * spacing[1] - centre[1],
                    z as f64 * spacing[2] - centre[2],
                ];
                let q = [p[0] / draw.scales[0], p[1] / draw.scales[1], p[2] / draw.scales[2]];
                // R⁻¹ = Rᵀ
                let r = [
                    rot[0][0] * q[0] + rot[1][0] * q[1] + rot[2][0] * q[2],
                    rot[0][1] * q[0] + rot[1][1] * q[1] + rot[2][1] * q[2],
                    rot[0][2] * q[0] + rot[1][2] * q[1] + rot[2][2] * q[2],
                ];
                let mut idx = [
                    (r[2] + centre[2]) / spacing[2],
                    (r[1] + centre[1]) / spacing[1],
                    (r[0] + centre[0]) / spacing[0],
                ];
                if let Some(f) = &field {
                    // displacement in voxel units, (x, y, z) components
                    let dx = sample_trilinear(&f[0], dims, idx, 0.0);
                    let dy = sample_trilinear(&f[1], dims, idx, 0.0);
                    let dz = sample_trilinear(&f[2], dims, idx, 0.0);
                    idx = [idx[0] + dz, idx[1] + dy, idx[2] + dx];
                }
                out[(z * h + y) * w + x] = sample_trilinear(vox, dims, idx, AIR_HU);
            }
        }
    }
    out
}

#[cfg(test)]
mod tests {
    use super::*;

    fn sample(dims: [usize; 3]) -> VolumeSample {
        let mut rng = RngStream::new(3, 3);
        let t = Tensor::from_fn(&dims, |_| 40.0 + 20.0 * rng.normal());
        VolumeSample::new(t, [1.0, 1.0, 4.0], vec![1, 0], "a", 3).unwrap()
    }

    #[test]
    fn identity_config_is_exact() {
        let v = sample([4, 10, 12]);
        let out = augment(&v, &AugmentConfig::identity(), &mut RngStream::new(1, 2)).unwrap();
        assert_eq!(out, v);
    }

    #[test]
    fn double_mirror_x() {
        let v = sample([3, 5, 7]);
        let cfg = AugmentConfig {
            mirror_prob: [1.0, 0.0, 0.0],
            ..AugmentConfig::identity()
        };
        let once = augment(&v, &cfg, &mut RngStream::new(0, 0)).unwrap();
        assert_ne!(once, v);
        assert_eq!(once.voxels.data()[0], v.voxels.data()[6]);
        let twice = augment(&once, &cfg, &mut RngStream::new(0, 1)).unwrap();
        assert_eq!(twice, v);
    }

    #[test]
    fn brightness_on_constant() {
        let v = VolumeSample::new(Tensor::full(&[2, 3, 3], 100.0), [1.0, 1.0, 4.0], vec![], "c", 0).unwrap();
        let cfg = AugmentConfig {
            brightness: [1.01, 1.01],
            ..AugmentConfig::identity()
        };
        let out = augment(&v, &cfg, &mut RngStream::new(0, 0)).unwrap();
        assert!(out.voxels.data().iter().all(|&x| (x - 101.0).abs() < 1e-12));
    }

    #[test]
    fn default_ranges_valid_and_finite() {
        let cfg = AugmentConfig::default();
        cfg.validate().unwrap();
        let v = sample([6, 16, 16]);
        let out = augment(&v, &cfg, &mut RngStream::new(9, 9)).unwrap();
        assert_eq!(out.dims(), v.dims());
        assert!(out.voxels.is_finite());
    }

    #[test]
    fn draws_respect_ranges() {
        let cfg = AugmentConfig::default();
        let mut rng = RngStream::new(4, 4);
        for _ in 0..200 {
            let d = AugmentDraw::sample(&cfg, &mut rng);
            assert!((0.0..=200.0).contains(&d.alpha));
            assert!((10.0..=13.0).contains(&d.sigma));
            assert!(d.angles.iter().all(|a| (-0.1..=0.1).contains(a)));
            assert!(d.scales.iter().all(|s| (0.85..=1.15).contains(s)));
            assert!((0.99..=1.01).contains(&d.brightness));
            assert!((0.0..=0.03).contains(&d.noise_variance));
        }
    }

    #[test]
    fn invalid_config_rejected() {
        let cfg = AugmentConfig {
            scale: [1.2, 0.9],
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
        let cfg = AugmentConfig {
            mirror_prob: [1.5, 0.0, 0.0],
            ..AugmentConfig::default()
        };
        assert!(cfg.validate().is_err());
    }

    #[test]
    fn small_rotation_keeps_centre() {
        let dims = [1, 9, 9];
        let t = Tensor::from_fn(&dims, |i| if i == 40 { 500.0 } else { 0.0 });
        let v = VolumeSample::new(t, [1.0, 1.0, 1.0], vec![], "r", 0).unwrap();
        let draw = AugmentDraw {
            alpha: 0.0,
            sigma: 10.0,
            angles: [0.0, 0.0, 0.05],
            scales: [1.0; 3],
            brightness: 1.0,
            noise_variance: 0.0,
            mirror: [false; 3],
        };
        let out = apply(&v, &draw, &mut RngStream::new(0, 0)).unwrap();
        assert!((out.voxels.data()[40] - 500.0).abs() < 1e-9);
    }
}
