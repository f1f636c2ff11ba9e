//! Deformable 2D convolution.
//!
//! Every kernel tap `p_n` of the regular grid is displaced by a learned
//! fractional offset before sampling the input, so an output location
//! `p_0` reads `x(p_0 + p_n + dp_n)` through bilinear interpolation. With all
//! offsets zero the operator reduces to [`crate::conv::conv2d`] bit for bit.
//!
//! Offset channel layout: for tap `k` (row-major over the kernel, `dy`
//! outer), channel `2k` holds the vertical and `2k + 1` the horizontal
//! displacement, in input pixels.

use rand::Rng;

use crate::conv::{gemm_forward, ConvGeom};
use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Bilinear read of one plane at a fractional point.
///
/// Corners outside the plane read as zero. Returns the value and its partial
/// derivatives in `y` and `x`. The derivative uses the floor cell of the point,
/// i.e. the one-sided derivative from above on lattice lines.
#[inline]
pub(crate) fn sample_plane(plane: &[f64], h: usize, w: usize, py: f64, px: f64) -> (f64, f64, f64) {
    let y0f = py.floor();
    let x0f = px.floor();
    let ly = py - y0f;
    let lx = px - x0f;
    let (hy, hx) = (1.0 - ly, 1.0 - lx);
    let (y0, x0) = (y0f as isize, x0f as isize);
    let read = |y: isize, x: isize| -> f64 {
        if y < 0 || x < 0 || y >= h as isize || x >= w as isize {
            0.0
        } else {
            plane[y as usize * w + x as usize]
        }
    };
    let v00 = read(y0, x0);
    let v01 = read(y0, x0 + 1);
    let v10 = read(y0 + 1, x0);
    let v11 = read(y0 + 1, x0 + 1);
    // Zero-weight corners are skipped so lattice points return the stored value exactly.
    let mut value = hy * hx * v00;
    if lx != 0.0 {
        value += hy * lx * v01;
    }
    if ly != 0.0 {
        value += ly * hx * v10;
        if lx != 0.0 {
            value += ly * lx * v11;
        }
    }
    let dy = hx * (v10 - v00) + lx * (v11 - v01);
    let dx = hy * (v01 - v00) + ly * (v11 - v10);
    (value, dy, dx)
}

/// Value-only variant of [`sample_plane`].
#[inline]
pub(crate) fn sample_value(plane: &[f64], h: usize, w: usize, py: f64, px: f64) -> f64 {
    let y0f = py.floor();
    let x0f = px.floor();
    let ly = py - y0f;
    let lx = px - x0f;
    let (y0, x0) = (y0f as isize, x0f as isize);
    let inside = |y: isize, x: isize| y >= 0 && x >= 0 && y < h as isize && x < w as isize;
    let read = |y: isize, x: isize| {
        if inside(y, x) {
            plane[y as usize * w + x as usize]
        } else {
            0.0
        }
    };
    let mut value = (1.0 - ly) * (1.0 - lx) * read(y0, x0);
    if lx != 0.0 {
        value += (1.0 - ly) * lx * read(y0, x0 + 1);
    }
    if ly != 0.0 {
        value += ly * (1.0 - lx) * read(y0 + 1, x0);
        if lx != 0.0 {
            value += ly * lx * read(y0 + 1, x0 + 1);
        }
    }
    value
}

/// Scatter `grad` onto the four corners of the cell containing `(py, px)`.
#[inline]
pub(crate) fn scatter_plane(dplane: &mut [f64], h: usize, w: usize, py: f64, px: f64, grad: f64) {
    let y0f = py.floor();
    let x0f = px.floor();
    let ly = py - y0f;
    let lx = px - x0f;
    let (y0, x0) = (y0f as isize, x0f as isize);
    let corners = [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x0 + 1, (1.0 - ly) * lx),
        (y0 + 1, x0, ly * (1.0 - lx)),
        (y0 + 1, x0 + 1, ly * lx),
    ];
    for (y, x, wgt) in corners {
        if wgt != 0.0 && y >= 0 && x >= 0 && y < h as isize && x < w as isize {
            dplane[y as usize * w + x as usize] += wgt * grad;
        }
    }
}

/// Result of [`bilinear_sample`].
#[derive(Clone, Debug, PartialEq)]
pub struct BilinearSample {
    /// One interpolated value per channel.
    pub values: Vec<f64>,
    /// `d value / d p_y` per channel.
    pub d_dy: Vec<f64>,
    /// `d value / d p_x` per channel.
    pub d_dx: Vec<f64>,
    /// In-bounds map positions with their interpolation weight, i.e.
    /// `d value_c / d map[c, y, x]` (the same for every channel).
    pub weights: Vec<(usize, usize, f64)>,
}

/// Bilinearly sample a `[C, H, W]` map at the fractional point `(y, x)`.
pub fn bilinear_sample(map: &Tensor, y: f64, x: f64) -> Result<BilinearSample> {
    let [c, h, w] = *map.shape() else {
        return Err(Error::shape(
            "bilinear_sample",
            format!("expected CHW, got {:?}", map.shape()),
        ));
    };
    if !y.is_finite() || !x.is_finite() || !map.is_finite() {
        return Err(Error::NonFinite("bilinear_sample input"));
    }
    let mut out = BilinearSample {
        values: Vec::with_capacity(c),
        d_dy: Vec::with_capacity(c),
        d_dx: Vec::with_capacity(c),
        weights: Vec::new(),
    };
    for ch in 0..c {
        let plane = &map.data()[ch * h * w..(ch + 1) * h * w];
        let (v, dy, dx) = sample_plane(plane, h, w, y, x);
        out.values.push(v);
        out.d_dy.push(dy);
        out.d_dx.push(dx);
    }
    let (y0, x0) = (y.floor(), x.floor());
    let (ly, lx) = (y - y0, x - x0);
    for (yy, xx, wgt) in [
        (y0, x0, (1.0 - ly) * (1.0 - lx)),
        (y0, x0 + 1.0, (1.0 - ly) * lx),
        (y0 + 1.0, x0, ly * (1.0 - lx)),
        (y0 + 1.0, x0 + 1.0, ly * lx),
    ] {
        if wgt != 0.0 && yy >= 0.0 && xx >= 0.0 && yy < h as f64 && xx < w as f64 {
            out.weights.push((yy as usize, xx as usize, wgt));
        }
    }
    Ok(out)
}

/// Fill `cols` with deformed patches of one image.
///
/// `offsets` is the `[2K, out_h, out_w]` slice belonging to the same image.
pub(crate) fn deform_im2col(g: &ConvGeom, image: &[f64], offsets: &[f64], cols: &mut [f64]) {
    let k_taps = g.taps();
    let pix = g.out_pixels();
    let plane_len = g.height * g.width;
    for c in 0..g.in_channels {
        let plane = &image[c * plane_len..(c + 1) * plane_len];
        for k in 0..k_taps {
            let (ky, kx) = (k / g.kernel_w, k % g.kernel_w);
            let off_y = &offsets[2 * k * pix..(2 * k + 1) * pix];
            let off_x = &offsets[(2 * k + 1) * pix..(2 * k + 2) * pix];
            let dst = &mut cols[(c * k_taps + k) * pix..(c * k_taps + k + 1) * pix];
            for oy in 0..g.out_h {
                let base_y = (oy * g.stride + ky) as f64 - g.padding as f64;
                for ox in 0..g.out_w {
                    let base_x = (ox * g.stride + kx) as f64 - g.padding as f64;
                    let i = oy * g.out_w + ox;
                    dst[i] = sample_value(plane, g.height, g.width, base_y + off_y[i], base_x + off_x[i]);
                }
            }
        }
    }
}

/// Push a column gradient through the sampling step of one image.
pub(crate) fn deform_col2im(
    g: &ConvGeom,
    image: &[f64],
    offsets: &[f64],
    dcols: &[f64],
    mut dimage: Option<&mut [f64]>,
    mut doffsets: Option<&mut [f64]>,
) {
    let k_taps = g.taps();
    let pix = g.out_pixels();
    let plane_len = g.height * g.width;
    for c in 0..g.in_channels {
        let plane = &image[c * plane_len..(c + 1) * plane_len];
        for k in 0..k_taps {
            let (ky, kx) = (k / g.kernel_w, k % g.kernel_w);
            let src = &dcols[(c * k_taps + k) * pix..(c * k_taps + k + 1) * pix];
            for oy in 0..g.out_h {
                let base_y = (oy * g.stride + ky) as f64 - g.padding as f64;
                for ox in 0..g.out_w {
                    let i = oy * g.out_w + ox;
                    let gval = src[i];
                    if gval == 0.0 {
                        continue;
                    }
                    let base_x = (ox * g.stride + kx) as f64 - g.padding as f64;
                    let py = base_y + offsets[2 * k * pix + i];
                    let px = base_x + offsets[(2 * k + 1) * pix + i];
                    if let Some(doff) = doffsets.as_deref_mut() {
                        let (_, dy, dx) = sample_plane(plane, g.height, g.width, py, px);
                        doff[2 * k * pix + i] += gval * dy;
                        doff[(2 * k + 1) * pix + i] += gval * dx;
                    }
                    if let Some(dimg) = dimage.as_deref_mut() {
                        scatter_plane(
                            &mut dimg[c * plane_len..(c + 1) * plane_len],
                            g.height,
                            g.width,
                            py,
                            px,
                            gval,
                        );
                    }
                }
            }
        }
    }
}

/// Check an offset field against a convolution geometry.
pub(crate) fn check_offsets(g: &ConvGeom, offsets: &[usize]) -> Result<()> {
    let expect = [g.batch, 2 * g.taps(), g.out_h, g.out_w];
    if offsets != expect {
        return Err(Error::shape(
            "deform_conv2d",
            format!("offset field is {offsets:?}, expected {expect:?}"),
        ));
    }
    Ok(())
}

/// Weights of one deformable convolution plus its offset predictor.
#[derive(Clone, Debug, PartialEq)]
pub struct DeformableConvSpec {
    /// `[C_out, C_in, kh, kw]`.
    pub weight: Tensor,
    pub bias: Vec<f64>,
    /// `[2 * kh * kw, C_in, kh, kw]`; zero at initialization.
    pub offset_weight: Tensor,
    pub offset_bias: Vec<f64>,
    pub stride: usize,
    pub padding: usize,
}

impl DeformableConvSpec {
    /// Wrap main weights with a zero-initialized offset predictor.
    pub fn new(weight: Tensor, bias: Vec<f64>, stride: usize, padding: usize) -> Result<Self> {
        let [_, cin, kh, kw] = *weight.shape() else {
            return Err(Error::shape("deformable spec", format!("weight {:?}", weight.shape())));
        };
        let taps = kh * kw;
        let spec = Self {
            offset_weight: Tensor::zeros(&[2 * taps, cin, kh, kw]),
            offset_bias: vec![0.0; 2 * taps],
            weight,
            bias,
            stride,
            padding,
        };
        spec.validate()?;
        Ok(spec)
    }

    /// He-normal main weights, zero bias, zero offset predictor.
    pub fn init<R: Rng + ?Sized>(
        in_channels: usize,
        out_channels: usize,
        kernel: usize,
        stride: usize,
        padding: usize,
        rng: &mut R,
    ) -> Result<Self> {
        let fan_in = (in_channels * kernel * kernel) as f64;
        let weight = Tensor::randn(&[out_channels, in_channels, kernel, kernel], (2.0 / fan_in).sqrt(), rng);
        Self::new(weight, vec![0.0; out_channels], stride, padding)
    }

    pub fn validate(&self) -> Result<()> {
        let [cout, cin, kh, kw] = *self.weight.shape() else {
            return Err(Error::shape("deformable spec", "weight must be rank 4"));
        };
        if self.bias.len() != cout {
            return Err(Error::shape("deformable spec", "bias length != out channels"));
        }
        let expect = [2 * kh * kw, cin, kh, kw];
        if self.offset_weight.shape() != expect {
            return Err(Error::shape(
                "deformable spec",
                format!("offset weight {:?}, expected {expect:?}", self.offset_weight.shape()),
            ));
        }
        if self.offset_bias.len() != 2 * kh * kw {
            return Err(Error::shape("deformable spec", "offset bias length != 2 * taps"));
        }
        Ok(())
    }

    /// The regular sampling grid, centered at zero, row-major with `dy` outer.
    pub fn kernel_grid(&self) -> Vec<(isize, isize)> {
        let (kh, kw) = (self.weight.shape()[2] as isize, self.weight.shape()[3] as isize);
        let mut grid = Vec::with_capacity((kh * kw) as usize);
        for dy in -(kh / 2)..=kh / 2 {
            for dx in -(kw / 2)..=kw / 2 {
                grid.push((dy, dx));
            }
        }
        grid
    }
}

/// Offsets predicted from the input by the spec's auxiliary convolution.
pub fn offset_predictor(input: &Tensor, spec: &DeformableConvSpec) -> Result<Tensor> {
    spec.validate()?;
    crate::conv::conv2d(
        input,
        &spec.offset_weight,
        Some(&spec.offset_bias),
        spec.stride,
        spec.padding,
    )
}

/// Deformable convolution forward pass with an explicit offset field.
pub fn deform_conv2d(input: &Tensor, spec: &DeformableConvSpec, offsets: &Tensor) -> Result<Tensor> {
    spec.validate()?;
    let g = ConvGeom::new(input.shape(), spec.weight.shape(), spec.stride, spec.padding)?;
    check_offsets(&g, offsets.shape())?;
    if !input.is_finite() || !offsets.is_finite() {
        return Err(Error::NonFinite("deform_conv2d input"));
    }
    let in_per = g.in_channels * g.height * g.width;
    let off_per = 2 * g.taps() * g.out_pixels();
    let out_per = g.out_channels * g.out_pixels();
    let mut cols = vec![0.0; g.col_rows() * g.out_pixels()];
    let mut out = vec![0.0; g.batch * out_per];
    for n in 0..g.batch {
        deform_im2col(
            &g,
            &input.data()[n * in_per..(n + 1) * in_per],
            &offsets.data()[n * off_per..(n + 1) * off_per],
            &mut cols,
        );
        gemm_forward(
            &g,
            spec.weight.data(),
            Some(&spec.bias),
            &cols,
            &mut out[n * out_per..(n + 1) * out_per],
        );
    }
    let out = Tensor::new(&g.out_shape(), out)?;
    if !out.is_finite() {
        return Err(Error::NonFinite("deform_conv2d"));
    }
    Ok(out)
}

#[cfg(test)]
mod tests {
    use rand::SeedableRng;
    use rand_chacha::ChaCha8Rng;

    use super::*;
    use crate::conv::conv2d;

    #[test]
    fn integer_point_reads_the_grid() {
        let map = Tensor::new(&[2, 3, 4], (0..24).map(|v| v as f64 * 1.5).collect()).unwrap();
        let s = bilinear_sample(&map, 1.0, 2.0).unwrap();
        assert_eq!(s.values, vec![map.data()[6], map.data()[18]]);
        assert_eq!(s.weights, vec![(1, 2, 1.0)]);
    }

    #[test]
    fn cell_center_is_mean_of_corners() {
        let map = Tensor::new(&[1, 2, 2], vec![0.0, 1.0, 2.0, 3.0]).unwrap();
        let s = bilinear_sample(&map, 0.5, 0.5).unwrap();
        assert_eq!(s.values, vec![1.5]);
    }

    #[test]
    fn far_outside_reads_zero() {
        let map = Tensor::full(&[3, 4, 4], 7.0);
        let s = bilinear_sample(&map, -5.3, 12.1).unwrap();
        assert_eq!(s.values, vec![0.0; 3]);
        assert!(s.weights.is_empty());
    }

    #[test]
    fn partial_derivatives_match_probe() {
        let mut rng = ChaCha8Rng::seed_from_u64(11);
        let map = Tensor::uniform(&[3, 4, 4], -1.0, 1.0, &mut rng);
        let (y, x) = (1.25, 1.75);
        let s = bilinear_sample(&map, y, x).unwrap();
        let h = 1e-6;
        for c in 0..3 {
            let up = bilinear_sample(&map, y + h, x).unwrap().values[c];
            let dn = bilinear_sample(&map, y - h, x).unwrap().values[c];
            assert!(((up - dn) / (2.0 * h) - s.d_dy[c]).abs() < 1e-6);
            let rt = bilinear_sample(&map, y, x + h).unwrap().values[c];
            let lt = bilinear_sample(&map, y, x - h).unwrap().values[c];
            assert!(((rt - lt) / (2.0 * h) - s.d_dx[c]).abs() < 1e-6);
        }
    }

    #[test]
    fn fresh_spec_predicts_zero_offsets_and_matches_conv() {
        let mut rng = ChaCha8Rng::seed_from_u64(5);
        let spec = DeformableConvSpec::init(2, 3, 3, 1, 1, &mut rng).unwrap();
        let x = Tensor::randn(&[2, 2, 6, 5], 1.0, &mut rng);
        let off = offset_predictor(&x, &spec).unwrap();
        assert_eq!(off.shape(), &[2, 18, 6, 5]);
        assert!(off.data().iter().all(|&v| v == 0.0));
        let y = deform_conv2d(&x, &spec, &off).unwrap();
        let z = conv2d(&x, &spec.weight, Some(&spec.bias), 1, 1).unwrap();
        assert_eq!(y, z);
    }

    #[test]
    fn grid_is_centered_row_major() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = DeformableConvSpec::init(1, 1, 3, 1, 1, &mut rng).unwrap();
        let grid = spec.kernel_grid();
        assert_eq!(grid.len(), 9);
        assert_eq!(grid[0], (-1, -1));
        assert_eq!(grid[1], (-1, 0));
        assert_eq!(grid[4], (0, 0));
        assert_eq!(grid[8], (1, 1));
    }

    #[test]
    fn offset_shape_is_checked() {
        let mut rng = ChaCha8Rng::seed_from_u64(0);
        let spec = DeformableConvSpec::init(1, 1, 3, 1, 1, &mut rng).unwrap();
        let x = Tensor::zeros(&[1, 1, 5, 5]);
        let bad = Tensor::zeros(&[1, 9, 5, 5]);
        assert!(matches!(deform_conv2d(&x, &spec, &bad), Err(Error::Shape { .. })));
    }
}
