//! Deterministic frozen feature extractors standing in for pretrained
//! backbones: a 2D slice encoder and a 3D volume encoder. Both are small
//! strided conv stacks with ReLU, a global average pool and a final linear
//! projection to the feature dimension `d`.

use crate::error::{Error, Result};
use crate::rng::RngStream;
use crate::tensor::{linear, Tensor};

const SLICE_CHANNELS: [usize; 3] = [8, 16, 32];
const VOLUME_CHANNELS: [usize; 2] = [8, 16];

/// 3×3 (or 3×3×3) convolution, stride 2, zero padding 1, followed by ReLU.
#[derive(Clone, Debug)]
pub struct Conv {
    pub weight: Tensor,
    pub bias: Tensor,
}

impl Conv {
    fn new(c_in: usize, c_out: usize, taps: usize, rng: &mut RngStream) -> Self {
        let fan_in = c_in * taps;
        Self {
            weight: Tensor::randn(&[c_out, fan_in], (2.0 / fan_in as f64).sqrt(), rng),
            bias: Tensor::from_fn(&[c_out], |_| 0.05 * rng.normal()),
        }
    }

    fn c_out(&self) -> usize {
        self.weight.rows()
    }

    fn forward_2d(&self, input: &[f64], c_in: usize, h: usize, w: usize) -> (Vec<f64>, usize, usize) {
        let (ho, wo) = ((h - 1) / 2 + 1, (w - 1) / 2 + 1);
        let c_out = self.c_out();
        let mut out = vec![0.0; c_out * ho * wo];
        let wt = self.weight.data();
        for co in 0..c_out {
            let kernel = &wt[co * c_in * 9..(co + 1) * c_in * 9];
            let b = self.bias.data()[co];
            for oy in 0..ho {
                for ox in 0..wo {
                    let mut acc = b;
                    for ci in 0..c_in {
                        let plane = &input[ci * h * w..(ci + 1) * h * w];
                        for ky in 0..3 {
                            let iy = (2 * oy + ky) as isize - 1;
                            if iy < 0 || iy >= h as isize {
                                continue;
                            }
                            for kx in 0..3 {
                                let ix = (2 * ox + kx) as isize - 1;
                                if ix < 0 || ix >= w as isize {
                                    continue;
                                }
                                acc += kernel[ci * 9 + ky * 3 + kx] * plane[iy as usize * w + ix as usize];
                            }
                        }
                    }
                    out[(co * ho + oy) * wo + ox] = acc.max(0.0);
                }
            }
        }
        (out, ho, wo)
    }

    fn forward_3d(
        &self,
        input: &[f64],
        c_in: usize,
        dims: [usize; 3],
    ) -> (Vec<f64>, [usize; 3]) {
        let [s, h, w] = dims;
        let out_dims = [(s - 1) / 2 + 1, (h - 1) / 2 + 1, (w - 1) / 2 + 1];
        let [so, ho, wo] = out_dims;
        let c_out = self.c_out();
        let vol = s * h * w;
        let mut out = vec![0.0; c_out * so * ho * wo];
        let wt = self.weight.data();
        for co in 0..c_out {
            let kernel = &wt[co * c_in * 27..(co + 1) * c_in * 27];
            let b = self.bias.data()[co];
            for oz in 0..so {
                for oy in 0..ho {
                    for ox in 0..wo {
                        let mut acc = b;
                        for ci in 0..c_in {
                            let grid = &input[ci * vol..(ci + 1) * vol];
                            for kz in 0..3 {
                                let iz = (2 * oz + kz) as isize - 1;
                                if iz < 0 || iz >= s as isize {
                                    continue;
                                }
                                for ky in 0..3 {
                                    let iy = (2 * oy + ky) as isize - 1;
                                    if iy < 0 || iy >= h as isize {
                                        continue;
                                    }
                                    for kx in 0..3 {
                                        let ix = (2 * ox + kx) as isize - 1;
                                        if ix < 0 || ix >= w as isize {
                                            continue;
                                        }
                                        let v = grid[(iz as usize * h + iy as usize) * w + ix as usize];
                                        acc += kernel[ci * 27 + (kz * 3 + ky) * 3 + kx] * v;
                                    }
                                }
                            }
                        }
                        out[((co * so + oz) * ho + oy) * wo + ox] = acc.max(0.0);
                    }
                }
            }
        }
        (out, out_dims)
    }
}

fn volume_dims(x: &Tensor, channels: usize, op: &'static str) -> Result<[usize; 5]> {
    match *x.shape() {
        [b, m, s, h, w] if m == channels => Ok([b, m, s, h, w]),
        _ => Err(Error::shape(op, x.shape(), &[0, channels, 0, 0, 0])),
    }
}

/// Frozen per-slice encoder: `M×H×W → d`.
#[derive(Clone, Debug)]
pub struct SliceBackbone {
    pub convs: Vec<Conv>,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    in_channels: usize,
    seed: u64,
}

impl SliceBackbone {
    pub fn new(in_channels: usize, d: usize, seed: u64) -> Self {
        let mut rng = RngStream::keyed(seed, &[0x2D]);
        let mut convs = Vec::new();
        let mut c = in_channels;
        for &co in &SLICE_CHANNELS {
            convs.push(Conv::new(c, co, 9, &mut rng));
            c = co;
        }
        let proj_w = Tensor::randn(&[d, c], (1.0 / c as f64).sqrt(), &mut rng);
        let proj_b = Tensor::zeros(&[d]);
        Self {
            convs,
            proj_w,
            proj_b,
            in_channels,
            seed,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn feature_dim(&self) -> usize {
        self.proj_w.rows()
    }

    /// Width of the pooled conv output fed to the final projection.
    pub fn trunk_dim(&self) -> usize {
        self.proj_w.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum::<usize>()
            + self.proj_w.len()
            + self.proj_b.len()
    }

    /// Frozen conv trunk on one `M×H×W` slice, globally average pooled.
    pub fn trunk_slice(&self, slice: &[f64], h: usize, w: usize) -> Vec<f64> {
        let mut buf = slice.to_vec();
        let (mut c, mut hh, mut ww) = (self.in_channels, h, w);
        for conv in &self.convs {
            let (out, ho, wo) = conv.forward_2d(&buf, c, hh, ww);
            buf = out;
            c = conv.c_out();
            hh = ho;
            ww = wo;
        }
        let area = (hh * ww) as f64;
        (0..c)
            .map(|ci| buf[ci * hh * ww..(ci + 1) * hh * ww].iter().sum::<f64>() / area)
            .collect()
    }

    /// Pooled trunk features for every slice, rows ordered `b·S + s`.
    pub fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        let [b, m, s, h, w] = volume_dims(x, self.in_channels, "extract_slice_features")?;
        let c = self.trunk_dim();
        let mut out = Vec::with_capacity(b * s * c);
        let mut slice = vec![0.0; m * h * w];
        for bi in 0..b {
            for si in 0..s {
                for mi in 0..m {
                    let src = (((bi * m + mi) * s + si) * h) * w;
                    slice[mi * h * w..(mi + 1) * h * w].copy_from_slice(&x.data()[src..src + h * w]);
                }
                out.extend(self.trunk_slice(&slice, h, w));
            }
        }
        Tensor::new(&[b * s, c], out)
    }

    /// Final frozen projection; no adapter.
    pub fn project(&self, trunk: &Tensor) -> Result<Tensor> {
        linear(trunk, &self.proj_w, Some(&self.proj_b))
    }

    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            v.push((format!("backbone.conv{i}.weight"), &c.weight));
            v.push((format!("backbone.conv{i}.bias"), &c.bias));
        }
        v.push(("backbone.proj.weight".into(), &self.proj_w));
        v.push(("backbone.proj.bias".into(), &self.proj_b));
        v
    }
}

/// Frozen volume encoder: `M×S×H×W → d`, mean over the spatial grid.
#[derive(Clone, Debug)]
pub struct VolumeBackbone {
    pub convs: Vec<Conv>,
    pub proj_w: Tensor,
    pub proj_b: Tensor,
    in_channels: usize,
    seed: u64,
}

impl VolumeBackbone {
    pub fn new(in_channels: usize, d: usize, seed: u64) -> Self {
        let mut rng = RngStream::keyed(seed, &[0x3D]);
        let mut convs = Vec::new();
        let mut c = in_channels;
        for &co in &VOLUME_CHANNELS {
            convs.push(Conv::new(c, co, 27, &mut rng));
            c = co;
        }
        let proj_w = Tensor::randn(&[d, c], (1.0 / c as f64).sqrt(), &mut rng);
        let proj_b = Tensor::zeros(&[d]);
        Self {
            convs,
            proj_w,
            proj_b,
            in_channels,
            seed,
        }
    }

    pub fn in_channels(&self) -> usize {
        self.in_channels
    }

    pub fn feature_dim(&self) -> usize {
        self.proj_w.rows()
    }

    pub fn trunk_dim(&self) -> usize {
        self.proj_w.cols()
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    pub fn num_params(&self) -> usize {
        self.convs.iter().map(|c| c.weight.len() + c.bias.len()).sum::<usize>()
            + self.proj_w.len()
            + self.proj_b.len()
    }

    pub fn trunk_volume(&self, volume: &[f64], dims: [usize; 3]) -> Vec<f64> {
        let mut buf = volume.to_vec();
        let (mut c, mut d) = (self.in_channels, dims);
        for conv in &self.convs {
            let (out, od) = conv.forward_3d(&buf, c, d);
            buf = out;
            c = conv.c_out();
            d = od;
        }
        let n = d.iter().product::<usize>();
        (0..c)
            .map(|ci| buf[ci * n..(ci + 1) * n].iter().sum::<f64>() / n as f64)
            .collect()
    }

    /// One pooled row per volume.
    pub fn trunk(&self, x: &Tensor) -> Result<Tensor> {
        let [b, m, s, h, w] = volume_dims(x, self.in_channels, "volume_features")?;
        let per = m * s * h * w;
        let mut out = Vec::with_capacity(b * self.trunk_dim());
        for bi in 0..b {
            out.extend(self.trunk_volume(&x.data()[bi * per..(bi + 1) * per], [s, h, w]));
        }
        Tensor::new(&[b, self.trunk_dim()], out)
    }

    pub fn project(&self, trunk: &Tensor) -> Result<Tensor> {
        linear(trunk, &self.proj_w, Some(&self.proj_b))
    }

    pub fn frozen_tensors(&self) -> Vec<(String, &Tensor)> {
        let mut v = Vec::new();
        for (i, c) in self.convs.iter().enumerate() {
            v.push((format!("backbone3d.conv{i}.weight"), &c.weight));
            v.push((format!("backbone3d.conv{i}.bias"), &c.bias));
        }
        v.push(("backbone3d.proj.weight".into(), &self.proj_w));
        v.push(("backbone3d.proj.bias".into(), &self.proj_b));
        v
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn same_seed_same_features() {
        let a = SliceBackbone::new(3, 8, 5);
        let b = SliceBackbone::new(3, 8, 5);
        let mut rng = RngStream::new(1, 1);
        let x = Tensor::randn(&[1, 3, 2, 9, 7], 1.0, &mut rng);
        assert_eq!(a.trunk(&x).unwrap(), b.trunk(&x).unwrap());
    }

    #[test]
    fn channel_mismatch() {
        let a = SliceBackbone::new(3, 8, 5);
        assert!(a.trunk(&Tensor::zeros(&[1, 2, 1, 8, 8])).is_err());
        let v = VolumeBackbone::new(3, 8, 5);
        assert!(v.trunk(&Tensor::zeros(&[1, 1, 4, 8, 8])).is_err());
    }

    #[test]
    fn constant_volume_is_deterministic() {
        let v = VolumeBackbone::new(3, 6, 2);
        let x = Tensor::full(&[1, 3, 4, 8, 8], 0.5);
        let a = v.project(&v.trunk(&x).unwrap()).unwrap();
        let b = v.project(&v.trunk(&x).unwrap()).unwrap();
        assert_eq!(a, b);
        assert!(a.is_finite());
    }

    #[test]
    fn spatially_sensitive() {
        let bb = SliceBackbone::new(1, 4, 3);
        let mut a = vec![0.0; 16 * 16];
        let mut b = vec![0.0; 16 * 16];
        a[3 * 16 + 3] = 1.0;
        b[12 * 16 + 12] = 1.0;
        assert_ne!(bb.trunk_slice(&a, 16, 16), bb.trunk_slice(&b, 16, 16));
    }
}
