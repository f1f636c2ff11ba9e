//! Analytic gradients and fast kernels checked against independent references.

use dspl_core::autodiff::{BnStats, Graph, Mode, Var};
use dspl_core::conv::conv2d;
use dspl_core::gradcheck::{finite_diff_grad, max_rel_error};
use dspl_core::{Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

/// Six nested loops straight from the definition of a zero-padded convolution.
fn direct_conv(x: &Tensor, w: &Tensor, b: &[f64], stride: usize, pad: usize) -> Tensor {
    let (n, cin, h, wd) = x.dims4().unwrap();
    let (cout, _, kh, kw) = w.dims4().unwrap();
    let oh = (h + 2 * pad - kh) / stride + 1;
    let ow = (wd + 2 * pad - kw) / stride + 1;
    let mut out = vec![0.0; n * cout * oh * ow];
    for bn in 0..n {
        for co in 0..cout {
            for oy in 0..oh {
                for ox in 0..ow {
                    let mut acc = b[co];
                    for ci in 0..cin {
                        for ky in 0..kh {
                            for kx in 0..kw {
                                let iy = (oy * stride + ky) as isize - pad as isize;
                                let ix = (ox * stride + kx) as isize - pad as isize;
                                if iy >= 0 && ix >= 0 && (iy as usize) < h && (ix as usize) < wd {
                                    acc += w.at4(co, ci, ky, kx) * x.at4(bn, ci, iy as usize, ix as usize);
                                }
                            }
                        }
                    }
                    out[((bn * cout + co) * oh + oy) * ow + ox] = acc;
                }
            }
        }
    }
    Tensor::new(&[n, cout, oh, ow], out).unwrap()
}

#[test]
fn conv2d_matches_direct_summation() {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let x = Tensor::randn(&[1, 2, 5, 5], 1.0, &mut rng);
    let w = Tensor::randn(&[3, 2, 3, 3], 1.0, &mut rng);
    let b: Vec<f64> = (0..3).map(|_| rng.gen_range(-1.0..1.0)).collect();
    let fast = conv2d(&x, &w, Some(&b), 1, 0).unwrap();
    assert!(fast.max_abs_diff(&direct_conv(&x, &w, &b, 1, 0)) < 1e-12);

    for case in 0..30 {
        let n = rng.gen_range(1..3);
        let cin = rng.gen_range(1..4);
        let cout = rng.gen_range(1..4);
        let k = [1, 3, 5][case % 3];
        let stride = rng.gen_range(1..3);
        let pad = rng.gen_range(0..3);
        let h = rng.gen_range(k..9);
        let wd = rng.gen_range(k..9);
        let x = Tensor::randn(&[n, cin, h, wd], 1.0, &mut rng);
        let w = Tensor::randn(&[cout, cin, k, k], 1.0, &mut rng);
        let b: Vec<f64> = (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let fast = conv2d(&x, &w, Some(&b), stride, pad).unwrap();
        let slow = direct_conv(&x, &w, &b, stride, pad);
        assert_eq!(fast.shape(), slow.shape());
        assert!(fast.max_abs_diff(&slow) < 1e-12, "case {case}");
    }
}

#[test]
fn forward_is_deterministic() {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let x = Tensor::randn(&[2, 3, 7, 6], 1.0, &mut rng);
    let w = Tensor::randn(&[4, 3, 3, 3], 1.0, &mut rng);
    let a = conv2d(&x, &w, None, 1, 1).unwrap();
    let b = conv2d(&x, &w, None, 1, 1).unwrap();
    assert_eq!(
        a.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>(),
        b.data().iter().map(|v| v.to_bits()).collect::<Vec<_>>()
    );
}

type Build = dyn Fn(&mut Graph, &[Var]) -> Result<Var>;

/// Compare backward against central differences for every input of `build`,
/// with the scalar loss `sum(out * probe)` for a fixed random probe.
fn grad_check(build: &Build, inputs: &[Tensor], seed: u64) -> f64 {
    let probe_of = |len: usize| -> Vec<f64> {
        let mut r = ChaCha8Rng::seed_from_u64(seed ^ 0xabcdef);
        (0..len).map(|_| r.gen_range(-1.0..1.0)).collect()
    };
    let eval = |values: &[Tensor]| -> Result<f64> {
        let mut g = Graph::new();
        let vars: Vec<Var> = values.iter().map(|t| g.variable(t.clone())).collect();
        let out = build(&mut g, &vars)?;
        let probe = probe_of(g.value(out).len());
        let l = g.weighted_sum(out, &probe)?;
        Ok(g.value(l).data()[0])
    };
    let mut g = Graph::new();
    let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
    let out = build(&mut g, &vars).unwrap();
    let probe = probe_of(g.value(out).len());
    let l = g.weighted_sum(out, &probe).unwrap();
    g.backward(l).unwrap();

    let mut worst: f64 = 0.0;
    for (i, v) in vars.iter().enumerate() {
        let analytic = g
            .grad(*v)
            .map(<[f64]>::to_vec)
            .unwrap_or_else(|| vec![0.0; inputs[i].len()]);
        let numeric = finite_diff_grad(
            |t| {
                let mut vals = inputs.to_vec();
                vals[i] = t.clone();
                eval(&vals)
            },
            &inputs[i],
            1e-5,
        )
        .unwrap();
        worst = worst.max(max_rel_error(&analytic, numeric.data()));
    }
    worst
}

fn shapes(rng: &mut ChaCha8Rng) -> (usize, usize, usize, usize) {
    (
        rng.gen_range(1..3),
        rng.gen_range(1..4),
        rng.gen_range(2..6),
        rng.gen_range(2..6),
    )
}

#[test]
fn conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(10);
    for case in 0..20 {
        let (n, cin, h, w) = shapes(&mut rng);
        let cout = rng.gen_range(1..4);
        let stride = rng.gen_range(1..3);
        let x = Tensor::randn(&[n, cin, h + 2, w + 2], 1.0, &mut rng);
        let k = Tensor::randn(&[cout, cin, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[cout], 1.0, &mut rng);
        let err = grad_check(
            &move |g, v| g.conv2d(v[0], v[1], Some(v[2]), stride, 1),
            &[x, k, b],
            case,
        );
        assert!(err < 1e-4, "case {case}: {err}");
    }
}

#[test]
fn deform_conv2d_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    for case in 0..20 {
        let n = 1;
        let cin = rng.gen_range(1..3);
        let cout = rng.gen_range(1..3);
        let (h, w) = (rng.gen_range(4..9), rng.gen_range(4..9));
        let x = Tensor::randn(&[n, cin, h, w], 1.0, &mut rng);
        let k = Tensor::randn(&[cout, cin, 3, 3], 1.0, &mut rng);
        let b = Tensor::randn(&[cout], 1.0, &mut rng);
        let off = lattice_free_offsets(&[n, 18, h, w], &mut rng);
        let err = grad_check(
            &|g, v| g.deform_conv2d(v[0], v[1], v[2], Some(v[3]), 1, 1),
            &[x, off, k, b],
            case,
        );
        assert!(err < 1e-4, "case {case}: {err}");
    }
}

/// Offsets in [-1, 1] whose fractional part stays at least 1e-3 from the lattice.
pub fn lattice_free_offsets(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.0..1.0);
            let frac = v - v.floor();
            if frac > 1e-3 && frac < 1.0 - 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

#[test]
fn pointwise_and_structural_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(12);
    for case in 0..20 {
        let (n, c, h, w) = shapes(&mut rng);
        let (h, w) = (2 * h, 2 * w);
        let a = Tensor::randn(&[n, c, h, w], 1.0, &mut rng);
        let b = Tensor::randn(&[n, c, h, w], 1.0, &mut rng);
        let cases: Vec<(&str, Box<Build>, Vec<Tensor>)> = vec![
            ("relu", Box::new(|g, v| Ok(g.relu(v[0]))), vec![a.clone()]),
            ("sigmoid", Box::new(|g, v| Ok(g.sigmoid(v[0]))), vec![a.clone()]),
            ("max_pool", Box::new(|g, v| g.max_pool2d(v[0], 2)), vec![a.clone()]),
            (
                "adaptive_pool",
                Box::new(move |g, v| g.adaptive_max_pool(v[0], 3.min(h).min(w))),
                vec![a.clone()],
            ),
            ("add", Box::new(|g, v| g.add(v[0], v[1])), vec![a.clone(), b.clone()]),
            ("mul", Box::new(|g, v| g.mul(v[0], v[1])), vec![a.clone(), b.clone()]),
            (
                "concat",
                Box::new(|g, v| g.concat(&[v[0], v[1], v[0]])),
                vec![a.clone(), b.clone()],
            ),
            ("upsample", Box::new(|g, v| g.upsample2x(v[0])), vec![a.clone()]),
            (
                "crop",
                Box::new(move |g, v| g.crop(v[0], 1, 1, h / 2, w / 2)),
                vec![a.clone()],
            ),
            ("scale", Box::new(|g, v| Ok(g.scale(v[0], -1.75))), vec![a.clone()]),
            ("sum", Box::new(|g, v| Ok(g.sum(v[0]))), vec![a.clone()]),
            (
                "reshape",
                Box::new(move |g, v| g.reshape(v[0], &[n, c * h * w])),
                vec![a.clone()],
            ),
        ];
        for (name, build, inputs) in cases {
            let err = grad_check(&*build, &inputs, case);
            assert!(err < 1e-4, "{name} case {case}: {err}");
        }
    }
}

#[test]
fn batch_norm_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(13);
    for case in 0..20 {
        let (n, c, h, w) = shapes(&mut rng);
        let n = n + 1;
        let x = Tensor::randn(&[n, c, h, w], 2.0, &mut rng);
        let gamma = Tensor::randn(&[c], 1.0, &mut rng);
        let beta = Tensor::randn(&[c], 1.0, &mut rng);
        let mean: Vec<f64> = (0..c).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let var: Vec<f64> = (0..c).map(|_| rng.gen_range(0.5..2.0)).collect();
        for mode in [Mode::Train, Mode::Eval] {
            let (m, vv) = (mean.clone(), var.clone());
            let build = move |g: &mut Graph, v: &[Var]| {
                let stats = BnStats {
                    name: "bn",
                    mean: &m,
                    var: &vv,
                };
                g.batch_norm(v[0], v[1], v[2], stats, mode)
            };
            let err = grad_check(&build, &[x.clone(), gamma.clone(), beta.clone()], case);
            assert!(err < 1e-4, "{mode:?} case {case}: {err}");
        }
    }
}

#[test]
fn dense_head_gradients() {
    let mut rng = ChaCha8Rng::seed_from_u64(14);
    for case in 0..20 {
        let n = rng.gen_range(1..5);
        let fin = rng.gen_range(1..6);
        let k = rng.gen_range(2..4);
        let x = Tensor::randn(&[n, fin], 1.0, &mut rng);
        let w = Tensor::randn(&[k, fin], 1.0, &mut rng);
        let b = Tensor::randn(&[k], 1.0, &mut rng);
        let labels: Vec<usize> = (0..n).map(|_| rng.gen_range(0..k)).collect();
        let err = grad_check(
            &move |g, v| {
                let z = g.linear(v[0], v[1], v[2])?;
                g.softmax_cross_entropy(z, &labels)
            },
            &[x, w, b],
            case,
        );
        assert!(err < 1e-4, "case {case}: {err}");
    }
}

#[test]
fn segmentation_loss_gradient() {
    let mut rng = ChaCha8Rng::seed_from_u64(15);
    for case in 0..20 {
        let (n, _, h, w) = shapes(&mut rng);
        let z = Tensor::randn(&[n, 1, h, w], 2.0, &mut rng);
        let t = Tensor::new(
            &[n, 1, h, w],
            (0..n * h * w)
                .map(|_| if rng.gen_bool(0.3) { 1.0 } else { 0.0 })
                .collect(),
        )
        .unwrap();
        let err = grad_check(&move |g, v| g.seg_loss(v[0], &t), &[z], case);
        assert!(err < 1e-4, "case {case}: {err}");
    }
}
