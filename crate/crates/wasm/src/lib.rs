//! WebAssembly bindings for the static demo page in `www/`.

use dspl_core::deform::{deform_conv2d, DeformableConvSpec};
use dspl_core::phantom::{generate_scene, PhantomConfig};
use dspl_core::spl::spl_weight;
use dspl_core::Tensor;
use wasm_bindgen::prelude::*;

fn js(e: dspl_core::Error) -> JsError {
    JsError::new(&e.to_string())
}

/// A rendered phantom scene.
#[wasm_bindgen]
pub struct Phantom {
    size: usize,
    pixels: Vec<f64>,
    annotations: Vec<f64>,
}

#[wasm_bindgen]
impl Phantom {
    #[wasm_bindgen(constructor)]
    pub fn new(seed: u32, size: usize, noise: f64, mimics: usize) -> Result<Phantom, JsError> {
        let config = PhantomConfig {
            height: size,
            width: size,
            noise,
            mimics,
            ..PhantomConfig::default()
        };
        config.validate().map_err(js)?;
        let scene = generate_scene(seed as u64, &config).map_err(js)?;
        let annotations = scene
            .annotations
            .iter()
            .zip(&scene.difficulty)
            .flat_map(|(a, d)| {
                [
                    a.center_y,
                    a.center_x,
                    a.diameter,
                    a.ignore as u8 as f64,
                    d.is_hard() as u8 as f64,
                ]
            })
            .collect();
        Ok(Phantom {
            size,
            pixels: scene.image.data().to_vec(),
            annotations,
        })
    }

    #[wasm_bindgen(getter)]
    pub fn size(&self) -> usize {
        self.size
    }

    /// Row-major intensities in `[0, 1]`.
    pub fn pixels(&self) -> Vec<f64> {
        self.pixels.clone()
    }

    /// Five numbers per nodule: y, x, diameter, ignore, hard.
    pub fn annotations(&self) -> Vec<f64> {
        self.annotations.clone()
    }
}

/// Offset of tap `(dy, dx)` that scales the 3x3 grid by `dilation` and rotates it by `angle`.
fn tap_offset(dy: f64, dx: f64, dilation: f64, angle: f64) -> (f64, f64) {
    let (s, c) = angle.sin_cos();
    let (ry, rx) = (dilation * (c * dy + s * dx), dilation * (-s * dy + c * dx));
    (ry - dy, rx - dx)
}

const GRID: [(f64, f64); 9] = [
    (-1.0, -1.0),
    (-1.0, 0.0),
    (-1.0, 1.0),
    (0.0, -1.0),
    (0.0, 0.0),
    (0.0, 1.0),
    (1.0, -1.0),
    (1.0, 0.0),
    (1.0, 1.0),
];

/// The nine sampling positions around `(cy, cx)` as `y0, x0, y1, x1, ...`.
#[wasm_bindgen]
pub fn sampling_points(cy: f64, cx: f64, dilation: f64, angle: f64) -> Vec<f64> {
    GRID.iter()
        .flat_map(|&(dy, dx)| {
            let (oy, ox) = tap_offset(dy, dx, dilation, angle);
            [cy + dy + oy, cx + dx + ox]
        })
        .collect()
}

/// Center-surround response of a 3x3 deformable convolution whose offsets
/// stretch and rotate every receptive field the same way.
#[wasm_bindgen]
pub fn blob_response(pixels: &[f64], size: usize, dilation: f64, angle: f64) -> Result<Vec<f64>, JsError> {
    let input = Tensor::new(&[1, 1, size, size], pixels.to_vec()).map_err(js)?;
    let kernel: Vec<f64> = GRID
        .iter()
        .map(|&(dy, dx)| if dy == 0.0 && dx == 0.0 { 1.0 } else { -0.125 })
        .collect();
    let weight = Tensor::new(&[1, 1, 3, 3], kernel).map_err(js)?;
    let spec = DeformableConvSpec::new(weight, vec![0.0], 1, 1).map_err(js)?;
    let plane = size * size;
    let mut field = vec![0.0; 18 * plane];
    for (k, &(dy, dx)) in GRID.iter().enumerate() {
        let (oy, ox) = tap_offset(dy, dx, dilation, angle);
        field[2 * k * plane..(2 * k + 1) * plane].fill(oy);
        field[(2 * k + 1) * plane..(2 * k + 2) * plane].fill(ox);
    }
    let offsets = Tensor::new(&[1, 18, size, size], field).map_err(js)?;
    let out = deform_conv2d(&input, &spec, &offsets).map_err(js)?;
    Ok(out.data().to_vec())
}

/// Self-paced weights `v(L)` at `n` evenly spaced losses in `[0, l_max]`.
#[wasm_bindgen]
pub fn spl_curve(lambda: f64, q: f64, l_max: f64, n: usize) -> Result<Vec<f64>, JsError> {
    if n < 2 || l_max.is_nan() || l_max <= 0.0 {
        return Err(JsError::new("need n >= 2 and l_max > 0"));
    }
    (0..n)
        .map(|i| spl_weight(l_max * i as f64 / (n - 1) as f64, lambda, q).map_err(js))
        .collect()
}
