//! Standard 2D convolution kernels (im2col + row-major GEMM).
//!
//! The deformable kernels in [`crate::deform`] share the GEMM half of this
//! module, so a deformable layer with zero offsets produces exactly the same
//! bits as the standard layer.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Resolved geometry of one convolution call.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct ConvGeom {
    pub batch: usize,
    pub in_channels: usize,
    pub height: usize,
    pub width: usize,
    pub out_channels: usize,
    pub kernel_h: usize,
    pub kernel_w: usize,
    pub stride: usize,
    pub padding: usize,
    pub out_h: usize,
    pub out_w: usize,
}

impl ConvGeom {
    pub fn new(input: &[usize], weight: &[usize], stride: usize, padding: usize) -> Result<Self> {
        let [batch, in_channels, height, width] = *input else {
            return Err(Error::shape("conv2d", format!("input must be NCHW, got {input:?}")));
        };
        let [out_channels, wc, kernel_h, kernel_w] = *weight else {
            return Err(Error::shape("conv2d", format!("weight must be rank 4, got {weight:?}")));
        };
        if wc != in_channels {
            return Err(Error::shape(
                "conv2d",
                format!("input has {in_channels} channels, weight expects {wc}"),
            ));
        }
        if kernel_h % 2 == 0 || kernel_w % 2 == 0 {
            return Err(Error::invalid(format!(
                "conv2d kernel must be odd, got {kernel_h}x{kernel_w}"
            )));
        }
        if stride == 0 {
            return Err(Error::invalid("conv2d stride must be >= 1"));
        }
        let (ph, pw) = (height + 2 * padding, width + 2 * padding);
        if ph < kernel_h || pw < kernel_w {
            return Err(Error::shape(
                "conv2d",
                format!("kernel {kernel_h}x{kernel_w} larger than padded input {ph}x{pw}"),
            ));
        }
        Ok(Self {
            batch,
            in_channels,
            height,
            width,
            out_channels,
            kernel_h,
            kernel_w,
            stride,
            padding,
            out_h: (ph - kernel_h) / stride + 1,
            out_w: (pw - kernel_w) / stride + 1,
        })
    }

    pub fn taps(&self) -> usize {
        self.kernel_h * self.kernel_w
    }

    /// Rows of the column matrix: one per (input channel, tap).
    pub fn col_rows(&self) -> usize {
        self.in_channels * self.taps()
    }

    pub fn out_pixels(&self) -> usize {
        self.out_h * self.out_w
    }

    pub fn out_shape(&self) -> [usize; 4] {
        [self.batch, self.out_channels, self.out_h, self.out_w]
    }
}

/// Output columns `[lo, hi)` whose input column `ox * stride + k - padding`
/// falls inside `[0, width)`.
#[inline]
fn valid_cols(g: &ConvGeom, k: usize) -> (usize, usize) {
    let (s, p) = (g.stride, g.padding);
    // ox * s + k >= p  and  ox * s + k < width + p
    let lo = if k >= p { 0 } else { (p - k).div_ceil(s) };
    let hi = if g.width + p > k {
        (g.width + p - k).div_ceil(s)
    } else {
        0
    };
    (lo.min(g.out_w), hi.min(g.out_w).max(lo.min(g.out_w)))
}

/// Fill `cols` (`col_rows x out_pixels`) with the zero-padded patches of one image.
pub(crate) fn im2col(g: &ConvGeom, image: &[f64], cols: &mut [f64]) {
    let pix = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &image[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let dst = &mut cols[row * pix..(row + 1) * pix];
                let (lo, hi) = valid_cols(g, kx);
                for oy in 0..g.out_h {
                    let line = &mut dst[oy * g.out_w..(oy + 1) * g.out_w];
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        line.fill(0.0);
                        continue;
                    }
                    let src = &plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    line[..lo].fill(0.0);
                    line[hi..].fill(0.0);
                    if lo < hi {
                        let ix0 = lo * g.stride + kx - g.padding;
                        if g.stride == 1 {
                            line[lo..hi].copy_from_slice(&src[ix0..ix0 + (hi - lo)]);
                        } else {
                            for (i, out) in line[lo..hi].iter_mut().enumerate() {
                                *out = src[ix0 + i * g.stride];
                            }
                        }
                    }
                }
            }
        }
    }
}

/// Scatter-add a column-gradient matrix back onto an image gradient.
pub(crate) fn col2im(g: &ConvGeom, dcols: &[f64], dimage: &mut [f64]) {
    let pix = g.out_pixels();
    for c in 0..g.in_channels {
        let plane = &mut dimage[c * g.height * g.width..(c + 1) * g.height * g.width];
        for ky in 0..g.kernel_h {
            for kx in 0..g.kernel_w {
                let row = (c * g.kernel_h + ky) * g.kernel_w + kx;
                let src = &dcols[row * pix..(row + 1) * pix];
                let (lo, hi) = valid_cols(g, kx);
                if lo >= hi {
                    continue;
                }
                let ix0 = lo * g.stride + kx - g.padding;
                for oy in 0..g.out_h {
                    let iy = (oy * g.stride + ky) as isize - g.padding as isize;
                    if iy < 0 || iy >= g.height as isize {
                        continue;
                    }
                    let dst = &mut plane[iy as usize * g.width..(iy as usize + 1) * g.width];
                    let line = &src[oy * g.out_w + lo..oy * g.out_w + hi];
                    if g.stride == 1 {
                        for (d, s) in dst[ix0..ix0 + (hi - lo)].iter_mut().zip(line) {
                            *d += s;
                        }
                    } else {
                        for (i, s) in line.iter().enumerate() {
                            dst[ix0 + i * g.stride] += s;
                        }
                    }
                }
            }
        }
    }
}

/// Pixel tile width; a tile of every output row stays in L1 while the
/// column rows stream through.
const TILE: usize = 256;

/// `out[co, :] = bias[co] + sum_r weight[co, r] * cols[r, :]` for one image.
pub(crate) fn gemm_forward(g: &ConvGeom, weight: &[f64], bias: Option<&[f64]>, cols: &[f64], out: &mut [f64]) {
    let rows = g.col_rows();
    let pix = g.out_pixels();
    for co in 0..g.out_channels {
        out[co * pix..(co + 1) * pix].fill(bias.map_or(0.0, |b| b[co]));
    }
    for t0 in (0..pix).step_by(TILE) {
        let t1 = (t0 + TILE).min(pix);
        for co in 0..g.out_channels {
            let dst = &mut out[co * pix + t0..co * pix + t1];
            let wrow = &weight[co * rows..(co + 1) * rows];
            for (r, &wv) in wrow.iter().enumerate() {
                let src = &cols[r * pix + t0..r * pix + t1];
                for (d, s) in dst.iter_mut().zip(src) {
                    *d += wv * s;
                }
            }
        }
    }
}

/// Accumulate weight/bias gradients and produce the column gradient for one image.
pub(crate) fn gemm_backward(
    g: &ConvGeom,
    weight: &[f64],
    cols: &[f64],
    dout: &[f64],
    mut dweight: Option<&mut [f64]>,
    dbias: Option<&mut [f64]>,
    mut dcols: Option<&mut [f64]>,
) {
    let rows = g.col_rows();
    let pix = g.out_pixels();
    if let Some(db) = dbias {
        for co in 0..g.out_channels {
            db[co] += dout[co * pix..(co + 1) * pix].iter().sum::<f64>();
        }
    }
    for t0 in (0..pix).step_by(TILE) {
        let t1 = (t0 + TILE).min(pix);
        if let Some(dw) = dweight.as_deref_mut() {
            for co in 0..g.out_channels {
                let dy = &dout[co * pix + t0..co * pix + t1];
                for r in 0..rows {
                    let src = &cols[r * pix + t0..r * pix + t1];
                    dw[co * rows + r] += dot(dy, src);
                }
            }
        }
        if let Some(dc) = dcols.as_deref_mut() {
            for r in 0..rows {
                let dst = &mut dc[r * pix + t0..r * pix + t1];
                let w0 = weight[r];
                for (d, s) in dst.iter_mut().zip(&dout[t0..t1]) {
                    *d = w0 * s;
                }
                for co in 1..g.out_channels {
                    let wv = weight[co * rows + r];
                    let dy = &dout[co * pix + t0..co * pix + t1];
                    for (d, s) in dst.iter_mut().zip(dy) {
                        *d += wv * s;
                    }
                }
            }
        }
    }
}

/// Dot product with four independent accumulators.
#[inline]
fn dot(a: &[f64], b: &[f64]) -> f64 {
    let mut acc = [0.0; 4];
    let ca = a.chunks_exact(4);
    let cb = b.chunks_exact(4);
    let tail: f64 = ca.remainder().iter().zip(cb.remainder()).map(|(x, y)| x * y).sum();
    for (x, y) in ca.zip(cb) {
        for k in 0..4 {
            acc[k] += x[k] * y[k];
        }
    }
    (acc[0] + acc[1]) + (acc[2] + acc[3]) + tail
}

/// Convolution forward pass without graph bookkeeping.
pub fn conv2d(input: &Tensor, weight: &Tensor, bias: Option<&[f64]>, stride: usize, padding: usize) -> Result<Tensor> {
    let g = ConvGeom::new(input.shape(), weight.shape(), stride, padding)?;
    if let Some(b) = bias {
        if b.len() != g.out_channels {
            return Err(Error::shape(
                "conv2d",
                format!("bias has {} entries for {} output channels", b.len(), g.out_channels),
            ));
        }
    }
    if !input.is_finite() || !weight.is_finite() {
        return Err(Error::NonFinite("conv2d input"));
    }
    let in_per = g.in_channels * g.height * g.width;
    let out_per = g.out_channels * g.out_pixels();
    let mut out = vec![0.0; g.batch * out_per];
    let mut cols = vec![0.0; g.col_rows() * g.out_pixels()];
    for n in 0..g.batch {
        im2col(&g, &input.data()[n * in_per..(n + 1) * in_per], &mut cols);
        gemm_forward(&g, weight.data(), bias, &cols, &mut out[n * out_per..(n + 1) * out_per]);
    }
    Tensor::new(&g.out_shape(), out)
}
