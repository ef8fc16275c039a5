//! WebAssembly bindings for the static demo page in `www/`.

use molre::adapters::{router_forward, Router};
use molre::data::synth::{long_tail_prevalence, Archetype, SynthConfig};
use molre::data::DEFAULT_WINDOWS;
use molre::objective::{focal_loss, FocalLossConfig};
use molre::tensor::Tensor;
use molre::RngStream;
use wasm_bindgen::prelude::*;

const PALETTE: [[f64; 3]; 8] = [
    [230.0, 80.0, 60.0],
    [60.0, 140.0, 230.0],
    [80.0, 190.0, 90.0],
    [240.0, 190.0, 50.0],
    [160.0, 90.0, 210.0],
    [40.0, 200.0, 200.0],
    [240.0, 120.0, 190.0],
    [140.0, 140.0, 140.0],
];

pub const MAX_EXPERTS: usize = PALETTE.len();
pub const SLICE_CLASSES: usize = 12;

fn js(e: molre::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// Router over 2-D inputs with He-scaled random weights multiplied by `sharpness`.
pub fn demo_router(experts: usize, hidden: usize, sharpness: f64, seed: u64) -> molre::Result<Router> {
    let mut rng = RngStream::new(seed, 0x6A7E);
    let mut r = Router::new(2, hidden, experts)?;
    r.w1 = Tensor::randn(&[hidden, 2], sharpness * 1.0f64.sqrt(), &mut rng);
    r.b1 = Tensor::randn(&[hidden], sharpness * 0.5, &mut rng);
    r.w2 = Tensor::randn(&[experts, hidden], sharpness * (2.0 / hidden as f64).sqrt(), &mut rng);
    Ok(r)
}

/// RGBA image of the gate distribution over `[-extent, extent]²`; each pixel
/// blends the expert colours by gate weight.
#[wasm_bindgen]
pub fn gate_map(experts: usize, hidden: usize, sharpness: f64, seed: u64, size: usize, extent: f64) -> Result<Vec<u8>, JsError> {
    if experts == 0 || experts > MAX_EXPERTS || size == 0 {
        return Err(JsError::new(&format!("experts must be 1..={MAX_EXPERTS} and size positive")));
    }
    let r = demo_router(experts, hidden.max(1), sharpness, seed).map_err(js)?;
    let step = 2.0 * extent / (size.max(2) - 1) as f64;
    let x = Tensor::from_fn(&[size * size, 2], |i| {
        let (p, axis) = (i / 2, i % 2);
        let (row, col) = (p / size, p % size);
        if axis == 0 {
            -extent + col as f64 * step
        } else {
            extent - row as f64 * step
        }
    });
    let g = router_forward(&r, &x).map_err(js)?;
    let mut out = Vec::with_capacity(size * size * 4);
    for p in 0..size * size {
        let mut rgb = [0.0; 3];
        for (k, &w) in g.row(p).iter().enumerate() {
            for c in 0..3 {
                rgb[c] += w * PALETTE[k][c];
            }
        }
        out.extend(rgb.iter().map(|&v| v.round().clamp(0.0, 255.0) as u8));
        out.push(255);
    }
    Ok(out)
}

/// Gate vector of the demo router at one point.
#[wasm_bindgen]
pub fn gates_at(experts: usize, hidden: usize, sharpness: f64, seed: u64, x: f64, y: f64) -> Result<Vec<f64>, JsError> {
    let r = demo_router(experts, hidden.max(1), sharpness, seed).map_err(js)?;
    Ok(router_forward(&r, &Tensor::new(&[1, 2], vec![x, y]).map_err(js)?).map_err(js)?.into_data())
}

#[wasm_bindgen]
pub fn expert_color(k: usize) -> String {
    let [r, g, b] = PALETTE[k % PALETTE.len()];
    format!("rgb({r}, {g}, {b})")
}

/// Names of the synthetic finding classes, one per line.
#[wasm_bindgen]
pub fn class_names() -> String {
    (0..SLICE_CLASSES).map(|c| Archetype::for_class(c).name).collect::<Vec<_>>().join("\n")
}

fn slice_config(slices: usize, size: usize, seed: u64) -> SynthConfig {
    SynthConfig {
        slices,
        height: size,
        width: size,
        spacing: [1.0, 1.0, 4.0],
        prevalence: long_tail_prevalence(SLICE_CLASSES, 0.4, 0.005),
        seed,
    }
}

/// One slice of a synthetic study with the findings in `mask` (bit `c` =
/// class `c`), as RGBA. `window` 0–2 picks a single HU window in grey;
/// 3 shows the three windows as RGB.
#[wasm_bindgen]
pub fn synth_slice(mask: u32, slice: usize, window: usize, seed: u64, slices: usize, size: usize) -> Result<Vec<u8>, JsError> {
    let cfg = slice_config(slices.max(1), size.max(8), seed);
    let labels = (0..SLICE_CLASSES).map(|c| u8::from(mask >> c & 1 == 1)).collect();
    let v = cfg.generate_with_labels(0, labels).map_err(js)?;
    let [s, h, w] = v.dims();
    let z = slice.min(s - 1);
    let plane = &v.voxels.data()[z * h * w..(z + 1) * h * w];
    let mut out = Vec::with_capacity(h * w * 4);
    for &hu in plane {
        let px = |wi: usize| (255.0 * DEFAULT_WINDOWS[wi].apply(hu)).round() as u8;
        if window < 3 {
            let g = px(window);
            out.extend([g, g, g]);
        } else {
            out.extend([px(0), px(1), px(2)]);
        }
        out.push(255);
    }
    Ok(out)
}

/// Focal loss of a single prediction `p` on `n` evenly spaced points in
/// `(0, 1)`: the first `n` values for a positive label, the next `n` for a negative one.
#[wasm_bindgen]
pub fn focal_curve(gamma: f64, alpha: f64, n: usize) -> Result<Vec<f64>, JsError> {
    let cfg = FocalLossConfig::uniform(gamma, alpha, 1);
    let mut out = vec![0.0; 2 * n];
    for i in 0..n {
        let p = (i as f64 + 0.5) / n as f64;
        let probs = Tensor::new(&[1, 1], vec![p]).map_err(js)?;
        out[i] = focal_loss(&probs, &[1], &cfg).map_err(js)?.0;
        out[n + i] = focal_loss(&probs, &[0], &cfg).map_err(js)?.0;
    }
    Ok(out)
}
