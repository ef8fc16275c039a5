//! Synthetic head-CT-like studies with planted findings.
//!
//! Each class is an archetype with a shape family, an HU range, a preferred
//! slice band and a preferred in-plane direction. Labels are independent
//! Bernoulli draws with a long-tailed prevalence profile; labels and voxels
//! use separate keyed streams so labels can be drawn without rendering.

use super::{VolumeSample, AIR_HU};
use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::Tensor;

const LABEL_TAG: u64 = 0x1AB;
const VOXEL_TAG: u64 = 0x70C;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Shape {
    /// Ellipsoidal hyperdense blob.
    Blob,
    /// Hypodense wedge reaching in from the cortex.
    Wedge,
    /// Thin hyperdense crescent just inside the skull.
    Crescent,
    /// Diffuse high-frequency texture shift.
    Texture,
}

#[derive(Clone, Debug, PartialEq)]
pub struct Archetype {
    pub name: String,
    pub shape: Shape,
    /// Fraction of the slice axis.
    pub band_centre: f64,
    pub band_half_width: f64,
    /// Preferred in-plane direction, radians.
    pub angle: f64,
    /// Size as a fraction of the in-plane head radius.
    pub size: [f64; 2],
    /// Absolute HU for hyperdense shapes, HU offset for the others.
    pub hu: [f64; 2],
}

impl Archetype {
    pub fn for_class(c: usize) -> Self {
        let golden = 0.618_033_988_75;
        let band_centre = 0.15 + 0.7 * ((c as f64 * golden) % 1.0);
        let angle = c as f64 * 2.399_963_229_7;
        let variant = (c / 4) % 3;
        let (shape, size, hu) = match c % 4 {
            0 => (Shape::Blob, [0.12 + 0.04 * variant as f64, 0.22 + 0.04 * variant as f64], [[62.0, 72.0], [75.0, 90.0], [52.0, 60.0]][variant]),
            1 => (Shape::Wedge, [0.35, 0.5], [[-14.0, -10.0], [-20.0, -16.0], [-9.0, -6.0]][variant]),
            2 => (Shape::Crescent, [0.06, 0.1], [[60.0, 70.0], [70.0, 80.0], [55.0, 62.0]][variant]),
            _ => (Shape::Texture, [0.0, 0.0], [[8.0, 12.0], [14.0, 18.0], [5.0, 7.0]][variant]),
        };
        let kind = ["blob", "wedge", "crescent", "texture"][c % 4];
        Self {
            name: format!("finding_{c:02}_{kind}"),
            shape,
            band_centre,
            band_half_width: 0.1,
            angle,
            size,
            hu,
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct SynthConfig {
    pub slices: usize,
    pub height: usize,
    pub width: usize,
    /// `(x, y, z)` mm.
    pub spacing: [f64; 3],
    pub prevalence: Vec<f64>,
    pub seed: u64,
}

/// Geometric profile from `max` (class 0) down to `min` (last class).
pub fn long_tail_prevalence(classes: usize, max: f64, min: f64) -> Vec<f64> {
    if classes == 1 {
        return vec![max];
    }
    (0..classes)
        .map(|c| max * (min / max).powf(c as f64 / (classes - 1) as f64))
        .collect()
}

impl SynthConfig {
    pub fn classes(&self) -> usize {
        self.prevalence.len()
    }

    pub fn validate(&self) -> Result<()> {
        if self.prevalence.is_empty() {
            return Err(Error::Config("synthetic data needs at least one class".into()));
        }
        if self.prevalence.iter().any(|p| !(0.0..=1.0).contains(p)) {
            return Err(Error::Config("class prevalences must lie in [0, 1]".into()));
        }
        if self.slices == 0 || self.height < 8 || self.width < 8 {
            return Err(Error::Config("volume must be at least 1×8×8".into()));
        }
        super::check_spacing(self.spacing)
    }

    pub fn archetypes(&self) -> Vec<Archetype> {
        (0..self.classes()).map(Archetype::for_class).collect()
    }

    pub fn labels_for(&self, index: usize) -> Vec<u8> {
        let mut rng = RngStream::keyed(self.seed, &[LABEL_TAG, index as u64]);
        self.prevalence.iter().map(|&p| u8::from(rng.bernoulli(p))).collect()
    }

    pub fn sample_id(index: usize) -> String {
        format!("s{index:06}")
    }

    pub fn generate(&self, index: usize) -> Result<VolumeSample> {
        self.generate_with_labels(index, self.labels_for(index))
    }

    /// Renders study `index` with the given findings instead of drawn ones.
    pub fn generate_with_labels(&self, index: usize, labels: Vec<u8>) -> Result<VolumeSample> {
        if labels.len() != self.classes() {
            return Err(Error::shape("synth labels", &[labels.len()], &[self.classes()]));
        }
        let mut rng = RngStream::keyed(self.seed, &[VOXEL_TAG, index as u64]);
        let vox = render(self, &labels, &mut rng);
        VolumeSample::new(
            Tensor::new(&[self.slices, self.height, self.width], vox)?,
            self.spacing,
            labels,
            Self::sample_id(index),
            index as u64,
        )
    }
}

pub fn synth_dataset(n: usize, cfg: &SynthConfig) -> Result<Vec<VolumeSample>> {
    cfg.validate()?;
    crate::par::par_map(n, |i| cfg.generate(i)).into_iter().collect()
}

struct Head {
    cx: f64,
    cy: f64,
    rx: f64,
    ry: f64,
    phase: [f64; 4],
}

impl Head {
    /// In-plane radius multiplier for slice `z`.
    fn taper(&self, z: usize, slices: usize) -> f64 {
        let t = (z as f64 + 0.5) / slices as f64 - 0.45;
        (1.0 - t * t / 0.36).max(0.2).sqrt()
    }

    /// Normalized radius and polar angle of voxel `(x, y)` on slice `z`.
    fn polar(&self, x: usize, y: usize, z: usize, slices: usize) -> (f64, f64) {
        let k = self.taper(z, slices);
        let dx = (x as f64 - self.cx) / (self.rx * k);
        let dy = (y as f64 - self.cy) / (self.ry * k);
        ((dx * dx + dy * dy).sqrt(), dy.atan2(dx))
    }
}

fn angle_diff(a: f64, b: f64) -> f64 {
    let d = (a - b).rem_euclid(std::f64::consts::TAU);
    d.min(std::f64::consts::TAU - d)
}

struct Finding {
    shape: Shape,
    z_centre: f64,
    z_half: f64,
    angle: f64,
    radial: f64,
    size: f64,
    hu: f64,
}

fn render(cfg: &SynthConfig, labels: &[u8], rng: &mut RngStream) -> Vec<f64> {
    let (s, h, w) = (cfg.slices, cfg.height, cfg.width);
    let head = Head {
        cx: (w as f64 - 1.0) / 2.0 + rng.uniform_in(-1.0, 1.0),
        cy: (h as f64 - 1.0) / 2.0 + rng.uniform_in(-1.0, 1.0),
        rx: 0.40 * w as f64 * rng.uniform_in(0.95, 1.05),
        ry: 0.44 * h as f64 * rng.uniform_in(0.95, 1.05),
        phase: [
            rng.uniform_in(0.0, 6.3),
            rng.uniform_in(0.0, 6.3),
            rng.uniform_in(0.0, 6.3),
            rng.uniform_in(0.0, 6.3),
        ],
    };
    let skull = (2.5 / head.rx.min(head.ry)).max(0.06);

    let findings: Vec<Finding> = cfg
        .archetypes()
        .into_iter()
        .zip(labels)
        .filter(|(_, &y)| y != 0)
        .map(|(a, _)| Finding {
            shape: a.shape,
            z_centre: (a.band_centre + rng.uniform_in(-a.band_half_width, a.band_half_width)) * s as f64,
            z_half: match a.shape {
                Shape::Blob => 1.2,
                Shape::Wedge => 2.0,
                _ => 2.5,
            },
            angle: a.angle + rng.uniform_in(-0.3, 0.3),
            radial: rng.uniform_in(0.3, 0.6),
            size: rng.uniform_in(a.size[0], a.size[1]),
            hu: rng.uniform_in(a.hu[0], a.hu[1]),
        })
        .collect();

    let mut vox = vec![0.0; s * h * w];
    for z in 0..s {
        let zf = (z as f64 + 0.5) / s as f64;
        for y in 0..h {
            for x in 0..w {
                let (r, theta) = head.polar(x, y, z, s);
                let noise = rng.normal();
                let v = if r > 1.0 {
                    AIR_HU + 5.0 * noise
                } else if r > 1.0 - skull {
                    1200.0 + 150.0 * noise
                } else {
                    let (xf, yf) = (x as f64 / w as f64, y as f64 / h as f64);
                    let tex = (6.0 * xf + head.phase[0]).sin() * (5.0 * yf + head.phase[1]).sin()
                        + 0.5 * (11.0 * xf + 3.0 * zf + head.phase[2]).cos();
                    let mut v = 32.0 + 3.0 * tex + 3.0 * noise;
                    let ventricle = ((x as f64 - head.cx) / (0.12 * head.rx)).powi(2)
                        + ((y as f64 - head.cy) / (0.22 * head.ry)).powi(2);
                    if (0.35..0.6).contains(&zf) && ventricle < 1.0 {
                        v = 6.0 + 2.0 * noise;
                    }
                    for f in &findings {
                        if (z as f64 + 0.5 - f.z_centre).abs() > f.z_half {
                            continue;
                        }
                        match f.shape {
                            Shape::Blob => {
                                let bx = head.cx + f.radial * head.rx * f.angle.cos();
                                let by = head.cy + f.radial * head.ry * f.angle.sin();
                                let rad = f.size * head.rx.min(head.ry);
                                let d = ((x as f64 - bx).powi(2) + (y as f64 - by).powi(2)).sqrt();
                                if d < rad {
                                    v = f.hu + 3.0 * noise;
                                }
                            }
                            Shape::Wedge => {
                                if angle_diff(theta, f.angle) < f.size && r > 0.4 {
                                    v += f.hu;
                                }
                            }
                            Shape::Crescent => {
                                let inner = 1.0 - skull - f.size;
                                if r > inner && angle_diff(theta, f.angle) < 0.9 {
                                    v = f.hu + 3.0 * noise;
                                }
                            }
                            Shape::Texture => {
                                v += f.hu * (2.1 * x as f64).sin() * (1.7 * y as f64).sin();
                            }
                        }
                    }
                    v
                };
                vox[(z * h + y) * w + x] = v as f32 as f64;
            }
        }
    }
    vox
}
