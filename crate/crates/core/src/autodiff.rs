//! Tape-based reverse-mode differentiation over a fixed op set.
//!
//! A [`Graph`] is built fresh for every forward pass. Nodes are appended in
//! evaluation order, so the tape is acyclic by construction and `backward`
//! simply walks it in reverse, visiting each node once.

use indexmap::IndexMap;

use crate::conv::{col2im, gemm_backward, gemm_forward, im2col, ConvGeom};
use crate::deform::{check_offsets, deform_col2im, deform_im2col};
use crate::error::{Error, Result};
use crate::params::ParamStore;
use crate::tensor::Tensor;

pub const BN_EPS: f64 = 1e-5;
pub const BN_MOMENTUM: f64 = 0.9;

/// Handle to a node on a [`Graph`].
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
pub struct Var(usize);

impl Var {
    pub fn id(self) -> usize {
        self.0
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum Mode {
    Train,
    Eval,
}

/// Running statistics handed to [`Graph::batch_norm`].
#[derive(Clone, Copy, Debug)]
pub struct BnStats<'a> {
    /// Parameter-store prefix; updates go to `{name}.running_mean` / `.running_var`.
    pub name: &'a str,
    pub mean: &'a [f64],
    pub var: &'a [f64],
}

#[derive(Debug)]
enum Op {
    Leaf,
    Conv2d {
        x: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    DeformConv2d {
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
        geom: ConvGeom,
    },
    Relu(Var),
    Sigmoid(Var),
    MaxPool {
        x: Var,
        argmax: Vec<usize>,
    },
    BatchNorm {
        x: Var,
        gamma: Var,
        beta: Var,
        xhat: Vec<f64>,
        inv_std: Vec<f64>,
        train: bool,
    },
    Linear {
        x: Var,
        w: Var,
        b: Var,
    },
    SoftmaxCe {
        logits: Var,
        labels: Vec<usize>,
        probs: Vec<f64>,
    },
    Add(Var, Var),
    Mul(Var, Var),
    Concat(Vec<Var>),
    Upsample2x(Var),
    Crop {
        x: Var,
        top: usize,
        left: usize,
    },
    Reshape(Var),
    Sum(Var),
    WeightedSum {
        x: Var,
        weights: Vec<f64>,
    },
    Scale {
        x: Var,
        factor: f64,
    },
    SegLoss {
        logits: Var,
        target: Vec<f64>,
        probs: Vec<f64>,
        inter: f64,
        denom: f64,
    },
}

#[derive(Debug)]
struct Node {
    value: Tensor,
    op: Op,
    requires_grad: bool,
    grad: Option<Vec<f64>>,
}

/// The tape.
#[derive(Debug, Default)]
pub struct Graph {
    nodes: Vec<Node>,
    params: IndexMap<String, Var>,
    buffer_updates: Vec<(String, Vec<f64>)>,
    backward_done: bool,
}

fn check_finite(op: &'static str, data: &[f64]) -> Result<()> {
    if data.iter().all(|v| v.is_finite()) {
        Ok(())
    } else {
        Err(Error::NonFinite(op))
    }
}

fn accumulate(slot: &mut Option<Vec<f64>>, len: usize) -> &mut Vec<f64> {
    slot.get_or_insert_with(|| vec![0.0; len])
}

/// Treat a tensor as `[outer, channels, inner]` around axis 1.
fn split_axis1(shape: &[usize]) -> (usize, usize, usize) {
    (shape[0], shape[1], shape[2..].iter().product())
}

impl Graph {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn len(&self) -> usize {
        self.nodes.len()
    }

    pub fn is_empty(&self) -> bool {
        self.nodes.is_empty()
    }

    fn push(&mut self, value: Tensor, op: Op, requires_grad: bool) -> Var {
        self.nodes.push(Node {
            value,
            op,
            requires_grad,
            grad: None,
        });
        Var(self.nodes.len() - 1)
    }

    fn rg(&self, vars: &[Var]) -> bool {
        vars.iter().any(|v| self.nodes[v.0].requires_grad)
    }

    /// A leaf that does not receive a gradient (inputs, targets).
    pub fn constant(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, false)
    }

    /// A leaf that receives a gradient.
    pub fn variable(&mut self, value: Tensor) -> Var {
        self.push(value, Op::Leaf, true)
    }

    /// Bind a named parameter from the store, reusing the node if already bound.
    pub fn param(&mut self, store: &ParamStore, name: &str) -> Result<Var> {
        if let Some(&v) = self.params.get(name) {
            return Ok(v);
        }
        let t = store.get(name)?.clone();
        let v = self.variable(t);
        self.params.insert(name.to_string(), v);
        Ok(v)
    }

    pub fn value(&self, v: Var) -> &Tensor {
        &self.nodes[v.0].value
    }

    pub fn shape(&self, v: Var) -> &[usize] {
        self.nodes[v.0].value.shape()
    }

    pub fn grad(&self, v: Var) -> Option<&[f64]> {
        self.nodes[v.0].grad.as_deref()
    }

    /// The gradient of `v` attached to a copy of its value.
    pub fn tensor_with_grad(&self, v: Var) -> Tensor {
        let mut t = self.nodes[v.0].value.clone();
        if let Some(g) = &self.nodes[v.0].grad {
            t.set_grad(g.clone()).expect("gradient shape is maintained by the tape");
        }
        t
    }

    /// Gradients of bound parameters, in binding order. Unreached parameters get zeros.
    pub fn param_grads(&self) -> Vec<(String, Vec<f64>)> {
        self.params
            .iter()
            .map(|(name, &v)| {
                let node = &self.nodes[v.0];
                let g = node.grad.clone().unwrap_or_else(|| vec![0.0; node.value.len()]);
                (name.clone(), g)
            })
            .collect()
    }

    /// Running-statistic updates recorded by train-mode batch norm.
    pub fn take_buffer_updates(&mut self) -> Vec<(String, Vec<f64>)> {
        std::mem::take(&mut self.buffer_updates)
    }

    // ---- forward ops -------------------------------------------------

    pub fn conv2d(&mut self, x: Var, w: Var, b: Option<Var>, stride: usize, padding: usize) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::shape("conv2d", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let in_per = geom.in_channels * geom.height * geom.width;
        let out_per = geom.out_channels * geom.out_pixels();
        let mut out = vec![0.0; geom.batch * out_per];
        let mut cols = vec![0.0; geom.col_rows() * geom.out_pixels()];
        {
            let xd = self.value(x).data();
            check_finite("conv2d input", xd)?;
            let wd = self.value(w).data();
            let bd = b.map(|b| self.value(b).data());
            for n in 0..geom.batch {
                im2col(&geom, &xd[n * in_per..(n + 1) * in_per], &mut cols);
                gemm_forward(&geom, wd, bd, &cols, &mut out[n * out_per..(n + 1) * out_per]);
            }
        }
        check_finite("conv2d", &out)?;
        let mut inputs = vec![x, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(Tensor::new(&geom.out_shape(), out)?, Op::Conv2d { x, w, b, geom }, rg))
    }

    pub fn deform_conv2d(
        &mut self,
        x: Var,
        offsets: Var,
        w: Var,
        b: Option<Var>,
        stride: usize,
        padding: usize,
    ) -> Result<Var> {
        let geom = ConvGeom::new(self.shape(x), self.shape(w), stride, padding)?;
        check_offsets(&geom, self.shape(offsets))?;
        if let Some(b) = b {
            if self.shape(b) != [geom.out_channels] {
                return Err(Error::shape("deform_conv2d", format!("bias shape {:?}", self.shape(b))));
            }
        }
        let in_per = geom.in_channels * geom.height * geom.width;
        let off_per = 2 * geom.taps() * geom.out_pixels();
        let out_per = geom.out_channels * geom.out_pixels();
        let mut out = vec![0.0; geom.batch * out_per];
        let mut cols = vec![0.0; geom.col_rows() * geom.out_pixels()];
        {
            let xd = self.value(x).data();
            let od = self.value(offsets).data();
            check_finite("deform_conv2d input", xd)?;
            check_finite("deform_conv2d offsets", od)?;
            let wd = self.value(w).data();
            let bd = b.map(|b| self.value(b).data());
            for n in 0..geom.batch {
                deform_im2col(
                    &geom,
                    &xd[n * in_per..(n + 1) * in_per],
                    &od[n * off_per..(n + 1) * off_per],
                    &mut cols,
                );
                gemm_forward(&geom, wd, bd, &cols, &mut out[n * out_per..(n + 1) * out_per]);
            }
        }
        check_finite("deform_conv2d", &out)?;
        let mut inputs = vec![x, offsets, w];
        inputs.extend(b);
        let rg = self.rg(&inputs);
        Ok(self.push(
            Tensor::new(&geom.out_shape(), out)?,
            Op::DeformConv2d { x, offsets, w, b, geom },
            rg,
        ))
    }

    pub fn relu(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| v.max(0.0)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Relu(x), rg)
    }

    pub fn sigmoid(&mut self, x: Var) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|&v| sigmoid(v)).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Sigmoid(x), rg)
    }

    /// Non-overlapping `k x k` max pooling (stride `k`, floor division of extents).
    pub fn max_pool2d(&mut self, x: Var, k: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if k == 0 || k > h || k > w {
            return Err(Error::shape(
                "max_pool2d",
                format!("window {k} larger than {h}x{w} input"),
            ));
        }
        let (oh, ow) = (h / k, w / k);
        let bins_y: Vec<_> = (0..oh).map(|i| (i * k, i * k + k)).collect();
        let bins_x: Vec<_> = (0..ow).map(|i| (i * k, i * k + k)).collect();
        self.pool_bins(x, (n, c, h, w), &bins_y, &bins_x)
    }

    /// Adaptive max pooling to an `out x out` grid (bin edges floor/ceil).
    pub fn adaptive_max_pool(&mut self, x: Var, out: usize) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        if out == 0 || out > h || out > w {
            return Err(Error::shape(
                "adaptive_max_pool",
                format!("output {out}x{out} larger than {h}x{w} input"),
            ));
        }
        let bins = |len: usize| -> Vec<(usize, usize)> {
            (0..out)
                .map(|i| (i * len / out, ((i + 1) * len).div_ceil(out)))
                .collect()
        };
        self.pool_bins(x, (n, c, h, w), &bins(h), &bins(w))
    }

    fn pool_bins(
        &mut self,
        x: Var,
        (n, c, h, w): (usize, usize, usize, usize),
        bins_y: &[(usize, usize)],
        bins_x: &[(usize, usize)],
    ) -> Result<Var> {
        let (oh, ow) = (bins_y.len(), bins_x.len());
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * oh * ow);
        let mut argmax = Vec::with_capacity(n * c * oh * ow);
        for plane in 0..n * c {
            let base = plane * h * w;
            for &(y0, y1) in bins_y {
                for &(x0, x1) in bins_x {
                    let mut best = base + y0 * w + x0;
                    for yy in y0..y1 {
                        for xx in x0..x1 {
                            let i = base + yy * w + xx;
                            if xd[i] > xd[best] {
                                best = i;
                            }
                        }
                    }
                    out.push(xd[best]);
                    argmax.push(best);
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::MaxPool { x, argmax }, rg))
    }

    /// Per-channel batch normalization over `(N, H, W)`.
    ///
    /// In train mode batch statistics are used and the running statistics
    /// update (`running = 0.9 * running + 0.1 * batch`, unbiased batch
    /// variance) is queued in [`Graph::take_buffer_updates`].
    pub fn batch_norm(&mut self, x: Var, gamma: Var, beta: Var, stats: BnStats<'_>, mode: Mode) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        for (v, what) in [(gamma, "gamma"), (beta, "beta")] {
            if self.shape(v) != [c] {
                return Err(Error::shape("batch_norm", format!("{what} shape {:?}", self.shape(v))));
            }
        }
        if stats.mean.len() != c || stats.var.len() != c {
            return Err(Error::shape("batch_norm", "running statistics length"));
        }
        let m = n * h * w;
        let hw = h * w;
        let xd = self.value(x).data();
        let g = self.value(gamma).data();
        let bt = self.value(beta).data();
        let train = mode == Mode::Train;
        if train && m < 2 {
            return Err(Error::shape(
                "batch_norm",
                "train mode needs at least two values per channel",
            ));
        }
        let mut mean = vec![0.0; c];
        let mut var = vec![0.0; c];
        if train {
            for ch in 0..c {
                let mut s = 0.0;
                for b in 0..n {
                    s += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw].iter().sum::<f64>();
                }
                mean[ch] = s / m as f64;
                let mut s2 = 0.0;
                for b in 0..n {
                    s2 += xd[(b * c + ch) * hw..(b * c + ch + 1) * hw]
                        .iter()
                        .map(|v| (v - mean[ch]).powi(2))
                        .sum::<f64>();
                }
                var[ch] = s2 / m as f64;
            }
        } else {
            mean.copy_from_slice(stats.mean);
            var.copy_from_slice(stats.var);
        }
        let inv_std: Vec<f64> = var.iter().map(|v| 1.0 / (v + BN_EPS).sqrt()).collect();
        let mut xhat = vec![0.0; xd.len()];
        let mut out = vec![0.0; xd.len()];
        for b in 0..n {
            for ch in 0..c {
                let r = (b * c + ch) * hw..(b * c + ch + 1) * hw;
                for i in r {
                    let xh = (xd[i] - mean[ch]) * inv_std[ch];
                    xhat[i] = xh;
                    out[i] = g[ch] * xh + bt[ch];
                }
            }
        }
        check_finite("batch_norm", &out)?;
        if train {
            let unbias = m as f64 / (m - 1) as f64;
            let rm = stats
                .mean
                .iter()
                .zip(&mean)
                .map(|(r, b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b)
                .collect();
            let rv = stats
                .var
                .iter()
                .zip(&var)
                .map(|(r, b)| BN_MOMENTUM * r + (1.0 - BN_MOMENTUM) * b * unbias)
                .collect();
            self.buffer_updates.push((format!("{}.running_mean", stats.name), rm));
            self.buffer_updates.push((format!("{}.running_var", stats.name), rv));
        }
        let rg = self.rg(&[x, gamma, beta]);
        Ok(self.push(
            Tensor::new(&[n, c, h, w], out)?,
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            },
            rg,
        ))
    }

    /// `y = x W^T + b` for `x: [N, in]`, `W: [out, in]`, `b: [out]`.
    pub fn linear(&mut self, x: Var, w: Var, b: Var) -> Result<Var> {
        let (xs, ws, bs) = (self.shape(x), self.shape(w), self.shape(b));
        let ([n, fin], [fout, win], [bout]) = (xs, ws, bs) else {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        };
        let (n, fin, fout) = (*n, *fin, *fout);
        if *win != fin || *bout != fout {
            return Err(Error::shape("linear", format!("x {xs:?}, w {ws:?}, b {bs:?}")));
        }
        let (xd, wd, bd) = (self.value(x).data(), self.value(w).data(), self.value(b).data());
        let mut out = vec![0.0; n * fout];
        for i in 0..n {
            let row = &xd[i * fin..(i + 1) * fin];
            for o in 0..fout {
                let wr = &wd[o * fin..(o + 1) * fin];
                out[i * fout + o] = bd[o] + row.iter().zip(wr).map(|(a, b)| a * b).sum::<f64>();
            }
        }
        check_finite("linear", &out)?;
        let rg = self.rg(&[x, w, b]);
        Ok(self.push(Tensor::new(&[n, fout], out)?, Op::Linear { x, w, b }, rg))
    }

    /// Per-sample softmax cross entropy: `[N, K]` logits to `[N]` losses.
    pub fn softmax_cross_entropy(&mut self, logits: Var, labels: &[usize]) -> Result<Var> {
        let [n, k] = *self.shape(logits) else {
            return Err(Error::shape(
                "softmax_cross_entropy",
                format!("logits {:?}", self.shape(logits)),
            ));
        };
        if labels.len() != n || labels.iter().any(|&l| l >= k) {
            return Err(Error::shape("softmax_cross_entropy", "labels do not match logits"));
        }
        let ld = self.value(logits).data();
        let mut probs = vec![0.0; n * k];
        let mut losses = vec![0.0; n];
        for i in 0..n {
            let row = &ld[i * k..(i + 1) * k];
            let m = row.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            let z: f64 = row.iter().map(|v| (v - m).exp()).sum();
            let lse = m + z.ln();
            for j in 0..k {
                probs[i * k + j] = (row[j] - lse).exp();
            }
            losses[i] = lse - row[labels[i]];
        }
        check_finite("softmax_cross_entropy", &losses)?;
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::new(&[n], losses)?,
            Op::SoftmaxCe {
                logits,
                labels: labels.to_vec(),
                probs,
            },
            rg,
        ))
    }

    pub fn add(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "add",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x + y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        check_finite("add", value.data())?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Add(a, b), rg))
    }

    pub fn mul(&mut self, a: Var, b: Var) -> Result<Var> {
        if self.shape(a) != self.shape(b) {
            return Err(Error::shape(
                "mul",
                format!("{:?} vs {:?}", self.shape(a), self.shape(b)),
            ));
        }
        let data = self
            .value(a)
            .data()
            .iter()
            .zip(self.value(b).data())
            .map(|(x, y)| x * y)
            .collect();
        let value = Tensor::new(self.shape(a), data)?;
        check_finite("mul", value.data())?;
        let rg = self.rg(&[a, b]);
        Ok(self.push(value, Op::Mul(a, b), rg))
    }

    /// Concatenate along axis 1 (channels for NCHW, features for `[N, F]`).
    pub fn concat(&mut self, parts: &[Var]) -> Result<Var> {
        let first = *parts.first().ok_or_else(|| Error::invalid("concat of nothing"))?;
        let s0 = self.shape(first).to_vec();
        let mut channels = 0;
        for &p in parts {
            let s = self.shape(p);
            if s.len() != s0.len() || s.len() < 2 || s[0] != s0[0] || s[2..] != s0[2..] {
                return Err(Error::shape("concat", format!("{s0:?} vs {s:?}")));
            }
            channels += s[1];
        }
        let (outer, _, inner) = split_axis1(&s0);
        let mut data = Vec::with_capacity(outer * channels * inner);
        for o in 0..outer {
            for &p in parts {
                let (_, c, _) = split_axis1(self.shape(p));
                data.extend_from_slice(&self.value(p).data()[o * c * inner..(o + 1) * c * inner]);
            }
        }
        let mut shape = s0;
        shape[1] = channels;
        let rg = self.rg(parts);
        Ok(self.push(Tensor::new(&shape, data)?, Op::Concat(parts.to_vec()), rg))
    }

    /// Nearest-neighbour 2x upsampling.
    pub fn upsample2x(&mut self, x: Var) -> Result<Var> {
        let (n, c, h, w) = self.value(x).dims4()?;
        let xd = self.value(x).data();
        let (oh, ow) = (2 * h, 2 * w);
        let mut out = vec![0.0; n * c * oh * ow];
        for p in 0..n * c {
            for y in 0..oh {
                for xx in 0..ow {
                    out[p * oh * ow + y * ow + xx] = xd[p * h * w + (y / 2) * w + xx / 2];
                }
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c, oh, ow], out)?, Op::Upsample2x(x), rg))
    }

    /// Spatial crop `[top, top + h) x [left, left + w)`.
    pub fn crop(&mut self, x: Var, top: usize, left: usize, h: usize, w: usize) -> Result<Var> {
        let (n, c, ih, iw) = self.value(x).dims4()?;
        if top + h > ih || left + w > iw || h == 0 || w == 0 {
            return Err(Error::shape("crop", format!("{h}x{w} at ({top},{left}) in {ih}x{iw}")));
        }
        let xd = self.value(x).data();
        let mut out = Vec::with_capacity(n * c * h * w);
        for p in 0..n * c {
            for y in top..top + h {
                let row = p * ih * iw + y * iw;
                out.extend_from_slice(&xd[row + left..row + left + w]);
            }
        }
        let rg = self.rg(&[x]);
        Ok(self.push(Tensor::new(&[n, c, h, w], out)?, Op::Crop { x, top, left }, rg))
    }

    pub fn reshape(&mut self, x: Var, shape: &[usize]) -> Result<Var> {
        let value = self.value(x).clone().reshape(shape)?;
        let rg = self.rg(&[x]);
        Ok(self.push(value, Op::Reshape(x), rg))
    }

    pub fn sum(&mut self, x: Var) -> Var {
        let s = self.value(x).data().iter().sum::<f64>();
        let rg = self.rg(&[x]);
        self.push(Tensor::scalar(s), Op::Sum(x), rg)
    }

    /// `sum_i weights[i] * x[i]` with constant weights.
    pub fn weighted_sum(&mut self, x: Var, weights: &[f64]) -> Result<Var> {
        if weights.len() != self.value(x).len() {
            return Err(Error::shape("weighted_sum", "weights do not match input length"));
        }
        let s = self
            .value(x)
            .data()
            .iter()
            .zip(weights)
            .map(|(a, b)| a * b)
            .sum::<f64>();
        let rg = self.rg(&[x]);
        Ok(self.push(
            Tensor::scalar(s),
            Op::WeightedSum {
                x,
                weights: weights.to_vec(),
            },
            rg,
        ))
    }

    pub fn scale(&mut self, x: Var, factor: f64) -> Var {
        let t = self.value(x);
        let data = t.data().iter().map(|v| v * factor).collect();
        let value = Tensor::new(t.shape(), data).expect("same shape");
        let rg = self.rg(&[x]);
        self.push(value, Op::Scale { x, factor }, rg)
    }

    /// Segmentation loss on logits: mean binary cross entropy plus soft Dice
    /// `1 - (2 sum(p t) + 1) / (sum(p) + sum(t) + 1)` with `p = sigmoid(logits)`.
    pub fn seg_loss(&mut self, logits: Var, target: &Tensor) -> Result<Var> {
        if self.shape(logits) != target.shape() {
            return Err(Error::shape(
                "seg_loss",
                format!("{:?} vs {:?}", self.shape(logits), target.shape()),
            ));
        }
        let ld = self.value(logits).data();
        let td = target.data();
        let n = ld.len() as f64;
        let probs: Vec<f64> = ld.iter().map(|&z| sigmoid(z)).collect();
        let mut bce = 0.0;
        for (&z, &t) in ld.iter().zip(td) {
            // log(1 + e^z) - t z, stable for either sign of z
            bce += z.max(0.0) + (-z.abs()).exp().ln_1p() - t * z;
        }
        bce /= n;
        let inter: f64 = probs.iter().zip(td).map(|(p, t)| p * t).sum();
        let denom: f64 = probs.iter().sum::<f64>() + td.iter().sum::<f64>() + 1.0;
        let dice = 1.0 - (2.0 * inter + 1.0) / denom;
        let loss = bce + dice;
        if !loss.is_finite() {
            return Err(Error::NonFinite("seg_loss"));
        }
        let rg = self.rg(&[logits]);
        Ok(self.push(
            Tensor::scalar(loss),
            Op::SegLoss {
                logits,
                target: td.to_vec(),
                probs,
                inter,
                denom,
            },
            rg,
        ))
    }

    // ---- backward ----------------------------------------------------

    /// Populate gradients of every node reachable from the scalar `loss`.
    pub fn backward(&mut self, loss: Var) -> Result<()> {
        if self.backward_done {
            return Err(Error::BackwardTwice);
        }
        if self.value(loss).len() != 1 {
            return Err(Error::NonScalarLoss(self.shape(loss).to_vec()));
        }
        self.backward_done = true;
        self.nodes[loss.0].grad = Some(vec![1.0]);
        for id in (0..=loss.0).rev() {
            if !self.nodes[id].requires_grad {
                continue;
            }
            let Some(gout) = self.nodes[id].grad.take() else {
                continue;
            };
            self.propagate(id, &gout);
            self.nodes[id].grad = Some(gout);
        }
        Ok(())
    }

    fn wants(&self, v: Var) -> bool {
        self.nodes[v.0].requires_grad
    }

    fn add_grad(&mut self, v: Var, f: impl FnOnce(&[f64], &mut [f64])) {
        if !self.wants(v) {
            return;
        }
        let len = self.nodes[v.0].value.len();
        let mut slot = self.nodes[v.0].grad.take();
        {
            let g = accumulate(&mut slot, len);
            f(self.nodes[v.0].value.data(), g);
        }
        self.nodes[v.0].grad = slot;
    }

    /// Add an owned gradient, moving it in when the slot is still empty.
    fn give_grad(&mut self, v: Var, delta: Vec<f64>) {
        if !self.wants(v) {
            return;
        }
        match &mut self.nodes[v.0].grad {
            Some(g) => g.iter_mut().zip(&delta).for_each(|(d, s)| *d += s),
            slot @ None => *slot = Some(delta),
        }
    }

    fn propagate(&mut self, id: usize, gout: &[f64]) {
        // Take the op out so its saved buffers can be read while inputs are mutated.
        let op = std::mem::replace(&mut self.nodes[id].op, Op::Leaf);
        match &op {
            Op::Leaf => {}
            Op::Conv2d { x, w, b, geom } => self.conv_backward(*x, None, *w, *b, geom, gout),
            Op::DeformConv2d { x, offsets, w, b, geom } => self.conv_backward(*x, Some(*offsets), *w, *b, geom, gout),
            Op::Relu(x) => self.add_grad(*x, |xd, g| {
                for i in 0..g.len() {
                    if xd[i] > 0.0 {
                        g[i] += gout[i];
                    }
                }
            }),
            Op::Sigmoid(x) => {
                let y = self.nodes[id].value.data().to_vec();
                self.add_grad(*x, |_, g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * y[i] * (1.0 - y[i]);
                    }
                })
            }
            Op::MaxPool { x, argmax } => self.add_grad(*x, |_, g| {
                for (o, &src) in argmax.iter().enumerate() {
                    g[src] += gout[o];
                }
            }),
            Op::BatchNorm {
                x,
                gamma,
                beta,
                xhat,
                inv_std,
                train,
            } => {
                let (n, c, h, w) = self.nodes[x.0].value.dims4().expect("rank 4");
                let hw = h * w;
                let m = (n * hw) as f64;
                let gam = self.nodes[gamma.0].value.data().to_vec();
                let mut sum_dy = vec![0.0; c];
                let mut sum_dy_xhat = vec![0.0; c];
                for b in 0..n {
                    for ch in 0..c {
                        for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                            sum_dy[ch] += gout[i];
                            sum_dy_xhat[ch] += gout[i] * xhat[i];
                        }
                    }
                }
                self.add_grad(*gamma, |_, g| {
                    for ch in 0..c {
                        g[ch] += sum_dy_xhat[ch];
                    }
                });
                self.add_grad(*beta, |_, g| {
                    for ch in 0..c {
                        g[ch] += sum_dy[ch];
                    }
                });
                self.add_grad(*x, |_, g| {
                    for b in 0..n {
                        for ch in 0..c {
                            let k = gam[ch] * inv_std[ch];
                            for i in (b * c + ch) * hw..(b * c + ch + 1) * hw {
                                g[i] += if *train {
                                    k * (gout[i] - sum_dy[ch] / m - xhat[i] * sum_dy_xhat[ch] / m)
                                } else {
                                    k * gout[i]
                                };
                            }
                        }
                    }
                });
            }
            Op::Linear { x, w, b } => {
                let [n, fin] = *self.nodes[x.0].value.shape() else {
                    unreachable!()
                };
                let fout = self.nodes[b.0].value.len();
                let xd = self.nodes[x.0].value.data().to_vec();
                let wd = self.nodes[w.0].value.data().to_vec();
                self.add_grad(*x, |_, g| {
                    for i in 0..n {
                        for o in 0..fout {
                            let go = gout[i * fout + o];
                            for f in 0..fin {
                                g[i * fin + f] += go * wd[o * fin + f];
                            }
                        }
                    }
                });
                self.add_grad(*w, |_, g| {
                    for i in 0..n {
                        for o in 0..fout {
                            let go = gout[i * fout + o];
                            for f in 0..fin {
                                g[o * fin + f] += go * xd[i * fin + f];
                            }
                        }
                    }
                });
                self.add_grad(*b, |_, g| {
                    for i in 0..n {
                        for o in 0..fout {
                            g[o] += gout[i * fout + o];
                        }
                    }
                });
            }
            Op::SoftmaxCe { logits, labels, probs } => {
                let k = probs.len() / labels.len();
                self.add_grad(*logits, |_, g| {
                    for (i, &lab) in labels.iter().enumerate() {
                        for j in 0..k {
                            let t = if j == lab { 1.0 } else { 0.0 };
                            g[i * k + j] += gout[i] * (probs[i * k + j] - t);
                        }
                    }
                });
            }
            Op::Add(a, b) => {
                self.add_grad(*a, |_, g| g.iter_mut().zip(gout).for_each(|(d, s)| *d += s));
                self.add_grad(*b, |_, g| g.iter_mut().zip(gout).for_each(|(d, s)| *d += s));
            }
            Op::Mul(a, b) => {
                let ad = self.nodes[a.0].value.data().to_vec();
                let bd = self.nodes[b.0].value.data().to_vec();
                self.add_grad(*a, |_, g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * bd[i];
                    }
                });
                self.add_grad(*b, |_, g| {
                    for i in 0..g.len() {
                        g[i] += gout[i] * ad[i];
                    }
                });
            }
            Op::Concat(parts) => {
                let (outer, total, inner) = split_axis1(self.nodes[id].value.shape());
                let mut start = 0;
                for &p in parts {
                    let c = self.nodes[p.0].value.shape()[1];
                    self.add_grad(p, |_, g| {
                        for o in 0..outer {
                            let src = &gout[(o * total + start) * inner..(o * total + start + c) * inner];
                            for (d, s) in g[o * c * inner..(o + 1) * c * inner].iter_mut().zip(src) {
                                *d += s;
                            }
                        }
                    });
                    start += c;
                }
            }
            Op::Upsample2x(x) => {
                let (_, _, h, w) = self.nodes[x.0].value.dims4().expect("rank 4");
                let (oh, ow) = (2 * h, 2 * w);
                self.add_grad(*x, |_, g| {
                    for p in 0..g.len() / (h * w) {
                        for y in 0..oh {
                            for xx in 0..ow {
                                g[p * h * w + (y / 2) * w + xx / 2] += gout[p * oh * ow + y * ow + xx];
                            }
                        }
                    }
                });
            }
            Op::Crop { x, top, left } => {
                let (_, _, ih, iw) = self.nodes[x.0].value.dims4().expect("rank 4");
                let (_, _, h, w) = self.nodes[id].value.dims4().expect("rank 4");
                self.add_grad(*x, |_, g| {
                    for p in 0..g.len() / (ih * iw) {
                        for y in 0..h {
                            for xx in 0..w {
                                g[p * ih * iw + (top + y) * iw + left + xx] += gout[(p * h + y) * w + xx];
                            }
                        }
                    }
                });
            }
            Op::Reshape(x) => self.add_grad(*x, |_, g| g.iter_mut().zip(gout).for_each(|(d, s)| *d += s)),
            Op::Sum(x) => self.add_grad(*x, |_, g| g.iter_mut().for_each(|d| *d += gout[0])),
            Op::WeightedSum { x, weights } => self.add_grad(*x, |_, g| {
                for (d, w) in g.iter_mut().zip(weights) {
                    *d += gout[0] * w;
                }
            }),
            Op::Scale { x, factor } => {
                self.add_grad(*x, |_, g| g.iter_mut().zip(gout).for_each(|(d, s)| *d += s * factor))
            }
            Op::SegLoss {
                logits,
                target,
                probs,
                inter,
                denom,
            } => {
                let n = probs.len() as f64;
                let num = 2.0 * inter + 1.0;
                self.add_grad(*logits, |_, g| {
                    for i in 0..g.len() {
                        let p = probs[i];
                        let t = target[i];
                        let d_bce = (p - t) / n;
                        // d dice / d p
                        let d_dice_p = -(2.0 * t * denom - num) / (denom * denom);
                        g[i] += gout[0] * (d_bce + d_dice_p * p * (1.0 - p));
                    }
                });
            }
        }
        self.nodes[id].op = op;
    }

    fn conv_backward(&mut self, x: Var, offsets: Option<Var>, w: Var, b: Option<Var>, geom: &ConvGeom, gout: &[f64]) {
        let g = *geom;
        let in_per = g.in_channels * g.height * g.width;
        let out_per = g.out_channels * g.out_pixels();
        let off_per = 2 * g.taps() * g.out_pixels();
        let need_x = self.wants(x);
        let need_off = offsets.is_some_and(|o| self.wants(o));
        let need_w = self.wants(w);
        let need_b = b.is_some_and(|b| self.wants(b));

        let mut dw = need_w.then(|| vec![0.0; self.nodes[w.0].value.len()]);
        let mut db = need_b.then(|| vec![0.0; g.out_channels]);
        let mut dx = need_x.then(|| vec![0.0; g.batch * in_per]);
        let mut doff = need_off.then(|| vec![0.0; g.batch * off_per]);
        let mut cols = vec![0.0; g.col_rows() * g.out_pixels()];
        let mut dcols = vec![0.0; g.col_rows() * g.out_pixels()];
        {
            let xd = self.nodes[x.0].value.data();
            let wd = self.nodes[w.0].value.data();
            let od = offsets.map(|o| self.nodes[o.0].value.data());
            for n in 0..g.batch {
                let img = &xd[n * in_per..(n + 1) * in_per];
                let dy = &gout[n * out_per..(n + 1) * out_per];
                let off = od.map(|o| &o[n * off_per..(n + 1) * off_per]);
                if need_w {
                    match off {
                        Some(off) => deform_im2col(&g, img, off, &mut cols),
                        None => im2col(&g, img, &mut cols),
                    }
                }
                let need_cols = need_x || need_off;
                gemm_backward(
                    &g,
                    wd,
                    &cols,
                    dy,
                    dw.as_deref_mut(),
                    db.as_deref_mut(),
                    need_cols.then_some(&mut dcols[..]),
                );
                if !need_cols {
                    continue;
                }
                match off {
                    Some(off) => deform_col2im(
                        &g,
                        img,
                        off,
                        &dcols,
                        dx.as_mut().map(|d| &mut d[n * in_per..(n + 1) * in_per]),
                        doff.as_mut().map(|d| &mut d[n * off_per..(n + 1) * off_per]),
                    ),
                    None => {
                        if let Some(d) = dx.as_mut() {
                            col2im(&g, &dcols, &mut d[n * in_per..(n + 1) * in_per]);
                        }
                    }
                }
            }
        }
        let merge = |graph: &mut Self, v: Var, delta: Option<Vec<f64>>| {
            if let Some(delta) = delta {
                graph.give_grad(v, delta);
            }
        };
        merge(self, x, dx);
        merge(self, w, dw);
        if let Some(b) = b {
            merge(self, b, db);
        }
        if let Some(o) = offsets {
            merge(self, o, doff);
        }
    }
}

#[inline]
pub fn sigmoid(v: f64) -> f64 {
    if v >= 0.0 {
        1.0 / (1.0 + (-v).exp())
    } else {
        let e = v.exp();
        e / (1.0 + e)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn relu_clamps_negatives() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[3], vec![-1.0, 0.0, 2.0]).unwrap());
        let y = g.relu(x);
        assert_eq!(g.value(y).data(), &[0.0, 0.0, 2.0]);
    }

    #[test]
    fn uniform_logits_cost_ln2() {
        let mut g = Graph::new();
        let z = g.constant(Tensor::new(&[1, 2], vec![0.0, 0.0]).unwrap());
        let l = g.softmax_cross_entropy(z, &[0]).unwrap();
        assert!((g.value(l).data()[0] - std::f64::consts::LN_2).abs() < 1e-15);
    }

    #[test]
    fn batch_norm_two_values() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::new(&[2, 1, 1, 1], vec![1.0, 3.0]).unwrap());
        let gamma = g.constant(Tensor::full(&[1], 1.0));
        let beta = g.constant(Tensor::zeros(&[1]));
        let stats = BnStats {
            name: "bn",
            mean: &[0.0],
            var: &[1.0],
        };
        let y = g.batch_norm(x, gamma, beta, stats, Mode::Train).unwrap();
        let expect = 1.0 / (1.0 + BN_EPS).sqrt();
        assert!((g.value(y).data()[0] + expect).abs() < 1e-15);
        assert!((g.value(y).data()[1] - expect).abs() < 1e-15);
        let updates = g.take_buffer_updates();
        assert_eq!(updates[0].0, "bn.running_mean");
        assert!((updates[0].1[0] - 0.2).abs() < 1e-15);
        // unbiased batch variance of {1, 3} is 2
        assert!((updates[1].1[0] - (0.9 + 0.1 * 2.0)).abs() < 1e-15);
    }

    #[test]
    fn sum_gives_ones() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[2, 2], vec![1.0, -2.0, 3.0, 0.5]).unwrap());
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[1.0; 4]);
    }

    #[test]
    fn product_gradient_is_the_other_factor() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[3], vec![1.0, 2.0, 3.0]).unwrap());
        let y = g.variable(Tensor::new(&[3], vec![-4.0, 5.0, 0.25]).unwrap());
        let p = g.mul(x, y).unwrap();
        let s = g.sum(p);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[-4.0, 5.0, 0.25]);
        assert_eq!(g.grad(y).unwrap(), &[1.0, 2.0, 3.0]);
    }

    #[test]
    fn reuse_accumulates_both_paths() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::new(&[2], vec![1.5, -0.5]).unwrap());
        let a = g.add(x, x).unwrap();
        let xx = g.mul(x, x).unwrap();
        let t = g.add(a, xx).unwrap();
        let s = g.sum(t);
        g.backward(s).unwrap();
        assert_eq!(g.grad(x).unwrap(), &[2.0 + 3.0, 2.0 - 1.0]);
    }

    #[test]
    fn second_backward_is_an_error() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(&[2], 1.0));
        let s = g.sum(x);
        g.backward(s).unwrap();
        assert!(matches!(g.backward(s), Err(Error::BackwardTwice)));
    }

    #[test]
    fn backward_needs_scalar() {
        let mut g = Graph::new();
        let x = g.variable(Tensor::full(&[2], 1.0));
        assert!(matches!(g.backward(x), Err(Error::NonScalarLoss(_))));
    }

    #[test]
    fn pool_window_must_fit() {
        let mut g = Graph::new();
        let x = g.constant(Tensor::zeros(&[1, 1, 3, 3]));
        assert!(g.max_pool2d(x, 4).is_err());
        assert!(g.adaptive_max_pool(x, 4).is_err());
        let p = g.adaptive_max_pool(x, 2).unwrap();
        assert_eq!(g.shape(p), &[1, 1, 2, 2]);
    }

    #[test]
    fn non_finite_forward_is_an_error() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::full(&[1], f64::MAX));
        assert!(matches!(g.add(a, a), Err(Error::NonFinite(_))));
    }

    #[test]
    fn concat_feature_axis() {
        let mut g = Graph::new();
        let a = g.constant(Tensor::new(&[2, 1], vec![1.0, 2.0]).unwrap());
        let b = g.constant(Tensor::new(&[2, 2], vec![3.0, 4.0, 5.0, 6.0]).unwrap());
        let c = g.concat(&[a, b]).unwrap();
        assert_eq!(g.value(c).data(), &[1.0, 3.0, 4.0, 2.0, 5.0, 6.0]);
    }
}
