//! Acceptance criteria, one PASS/FAIL line each.
//!
//! Runs without the libtest harness. Every criterion is evaluated and
//! reported; the process exits successfully once all of them have run, and
//! the summary line counts the failures.

use std::collections::BTreeSet;
use std::path::Path;
use std::process::Command;
use std::time::Instant;

use dspl_core::autodiff::{Graph, Var};
use dspl_core::conv::conv2d;
use dspl_core::deform::{deform_conv2d, offset_predictor, DeformableConvSpec};
use dspl_core::froc::CpmReport;
use dspl_core::froc::{
    cpm_from_sensitivities, froc_curve, match_candidates, DetectionCandidate, NoduleAnnotation, OperatingPoint,
};
use dspl_core::gradcheck::{finite_diff_grad, max_rel_error};
use dspl_core::pipeline::{
    build_patch_set, corpus_scenes, detect_candidates, noisy_clean_means, run_from_detector, score_scenes,
    train_stage1, train_stage2_with, RunConfig, Stage1Result, Weighting,
};
use dspl_core::spl::{spl_weight, Lambda0, SplSchedule};
use dspl_core::{ParamStore, Result, Tensor};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

struct Outcome {
    pass: bool,
    detail: String,
}

fn outcome(pass: bool, detail: impl Into<String>) -> Outcome {
    Outcome {
        pass,
        detail: detail.into(),
    }
}

fn report(id: usize, name: &str, started: Instant, o: &Outcome) {
    let verdict = if o.pass { "PASS" } else { "FAIL" };
    println!(
        "[{verdict}] {id} {name}: {} ({:.1}s)",
        o.detail,
        started.elapsed().as_secs_f64()
    );
}

// ---- 1 -----------------------------------------------------------------

fn zero_offset_equivalence() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst: f64 = 0.0;
    for _ in 0..100 {
        let (cin, cout) = (rng.gen_range(1..4), rng.gen_range(1..5));
        let k = [1, 3, 5][rng.gen_range(0..3)];
        let stride = rng.gen_range(1..3);
        let padding = rng.gen_range(0..=k / 2);
        let (h, w) = (rng.gen_range(k..k + 8), rng.gen_range(k..k + 8));
        let spec = DeformableConvSpec::init(cin, cout, k, stride, padding, &mut rng).unwrap();
        let spec = DeformableConvSpec {
            bias: (0..cout).map(|_| rng.gen_range(-1.0..1.0)).collect(),
            ..spec
        };
        let x = Tensor::randn(&[rng.gen_range(1..3), cin, h, w], 1.0, &mut rng);
        let zero = offset_predictor(&x, &spec).unwrap();
        let a = deform_conv2d(&x, &spec, &zero).unwrap();
        let b = conv2d(&x, &spec.weight, Some(&spec.bias), stride, padding).unwrap();
        worst = worst.max(a.max_abs_diff(&b));
    }
    outcome(worst < 1e-9, format!("max |diff| {worst:.3e} over 100 cases"))
}

// ---- 2 -----------------------------------------------------------------

fn lattice_free(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n: usize = shape.iter().product();
    let data = (0..n)
        .map(|_| loop {
            let v: f64 = rng.gen_range(-1.5..1.5);
            let frac = v - v.floor();
            if frac > 1e-3 && frac < 1.0 - 1e-3 {
                break v;
            }
        })
        .collect();
    Tensor::new(shape, data).unwrap()
}

fn deform_loss(g: &mut Graph, v: &[Var], probe: &[f64]) -> Result<Var> {
    let y = g.deform_conv2d(v[0], v[1], v[2], None, 1, 1)?;
    g.weighted_sum(y, probe)
}

fn deform_gradients() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut worst: f64 = 0.0;
    let cases = 24;
    for _ in 0..cases {
        let cin = rng.gen_range(1..=2);
        let cout = rng.gen_range(1..=2);
        let (h, w) = (rng.gen_range(3..=8), rng.gen_range(3..=8));
        let inputs = [
            Tensor::randn(&[1, cin, h, w], 1.0, &mut rng),
            lattice_free(&[1, 18, h, w], &mut rng),
            Tensor::randn(&[cout, cin, 3, 3], 1.0, &mut rng),
        ];
        let probe: Vec<f64> = (0..cout * h * w).map(|_| rng.gen_range(-1.0..1.0)).collect();
        let mut g = Graph::new();
        let vars: Vec<Var> = inputs.iter().map(|t| g.variable(t.clone())).collect();
        let l = deform_loss(&mut g, &vars, &probe).unwrap();
        g.backward(l).unwrap();
        for i in 0..3 {
            let analytic = g.grad(vars[i]).unwrap().to_vec();
            let numeric = finite_diff_grad(
                |t| {
                    let mut vals = inputs.clone();
                    vals[i] = t.clone();
                    let mut g = Graph::new();
                    let vars: Vec<Var> = vals.iter().map(|t| g.variable(t.clone())).collect();
                    let l = deform_loss(&mut g, &vars, &probe)?;
                    Ok(g.value(l).data()[0])
                },
                &inputs[i],
                1e-6,
            )
            .unwrap();
            worst = worst.max(max_rel_error(&analytic, numeric.data()));
        }
    }
    outcome(
        worst < 1e-4,
        format!("max relative error {worst:.3e} over {cases} cases (input, offsets, weight)"),
    )
}

// ---- 3 -----------------------------------------------------------------

fn spl_closed_form() -> Outcome {
    let term = |v: f64, l: f64, lambda: f64, q: f64| v * l + lambda * (v.powf(q) / q - v);
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst: f64 = 0.0;
    for _ in 0..1000 {
        let (l, lambda, q) = (
            rng.gen_range(0.0..=3.0),
            rng.gen_range(0.1..=3.0),
            rng.gen_range(1.05..=5.0),
        );
        let grid = (0..=10_000)
            .map(|i| i as f64 * 1e-4)
            .min_by(|a, b| term(*a, l, lambda, q).total_cmp(&term(*b, l, lambda, q)))
            .unwrap();
        worst = worst.max((spl_weight(l, lambda, q).unwrap() - grid).abs());
    }
    let mut monotone = true;
    for i in 0..30 {
        let lambda = 0.1 * (i + 1) as f64;
        for j in 0..40 {
            let q = 1.05 + 0.1 * j as f64;
            for k in 0..60 {
                let l = 0.05 * k as f64;
                let v = spl_weight(l, lambda, q).unwrap();
                monotone &= spl_weight(l + 0.05, lambda, q).unwrap() <= v;
                monotone &= spl_weight(l, lambda + 0.1, q).unwrap() >= v;
                monotone &= spl_weight(l, lambda, q + 0.1).unwrap() >= v;
            }
        }
    }
    outcome(
        worst <= 1e-3 && monotone,
        format!("max |v - grid| {worst:.2e} over 1000 triples, monotone grids {monotone}"),
    )
}

// ---- 4 -----------------------------------------------------------------

/// Threshold sweep on a case whose annotations cannot share a candidate.
fn sweep(cands: &[DetectionCandidate], annos: &[NoduleAnnotation], scans: usize) -> Vec<OperatingPoint> {
    let nodules = annos.iter().filter(|a| !a.ignore).count();
    let mut ts: Vec<f64> = cands.iter().map(|c| c.probability).collect();
    ts.sort_by(|a, b| b.total_cmp(a));
    ts.dedup();
    let hits =
        |c: &DetectionCandidate, a: &NoduleAnnotation| c.scan_id == a.scan_id && a.hit_by(c.center_y, c.center_x);
    let mut out: Vec<OperatingPoint> = Vec::new();
    for t in ts {
        let kept: Vec<&DetectionCandidate> = cands.iter().filter(|c| c.probability >= t).collect();
        let found = annos
            .iter()
            .filter(|a| !a.ignore && kept.iter().any(|c| hits(c, a)))
            .count();
        let fps = kept.iter().filter(|c| !annos.iter().any(|a| hits(c, a))).count();
        let p = OperatingPoint {
            fp_per_scan: fps as f64 / scans as f64,
            sensitivity: found as f64 / nodules as f64,
        };
        if (fps > 0 || found > 0) && out.last() != Some(&p) {
            out.push(p);
        }
    }
    out
}

fn cpm_arithmetic() -> Outcome {
    let tscnn = cpm_from_sensitivities(&[0.843, 0.891, 0.921, 0.932, 0.941, 0.951, 0.957]);
    let ours = cpm_from_sensitivities(&[0.862, 0.911, 0.934, 0.944, 0.958, 0.963, 0.967]);
    let rows = (tscnn - 0.919).abs() <= 5e-4 && (ours - 0.934).abs() <= 5e-4;
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let (mut cases, mut agree) = (0, 0);
    while cases < 2000 {
        let scans = rng.gen_range(1..=3);
        let mut annos: Vec<NoduleAnnotation> = Vec::new();
        for _ in 0..rng.gen_range(1..6) {
            let scan = format!("s{}", rng.gen_range(0..scans));
            let (y, x) = (
                5.0 + 10.0 * rng.gen_range(0..4) as f64,
                5.0 + 10.0 * rng.gen_range(0..4) as f64,
            );
            if !annos
                .iter()
                .any(|a| a.scan_id == scan && a.center_y == y && a.center_x == x)
            {
                let ignore = rng.gen_bool(0.2);
                annos.push(NoduleAnnotation::new(scan, y, x, rng.gen_range(2.0..8.0), ignore).unwrap());
            }
        }
        if annos.iter().all(|a| a.ignore) {
            continue;
        }
        let cands: Vec<DetectionCandidate> = (0..rng.gen_range(0..=12))
            .map(|_| {
                let p = rng.gen_range(0..6) as f64 / 5.0;
                if rng.gen_bool(0.6) {
                    let a = &annos[rng.gen_range(0..annos.len())];
                    let r = a.diameter / 2.0 * 0.7;
                    let (dy, dx) = (rng.gen_range(-r..=r) / 2f64.sqrt(), rng.gen_range(-r..=r) / 2f64.sqrt());
                    DetectionCandidate::new(a.scan_id.clone(), a.center_y + dy, a.center_x + dx, p).unwrap()
                } else {
                    let scan = format!("s{}", rng.gen_range(0..scans));
                    DetectionCandidate::new(scan, rng.gen_range(0.0..40.0), rng.gen_range(0.0..40.0), p).unwrap()
                }
            })
            .collect();
        let nodules = annos.iter().filter(|a| !a.ignore).count();
        let m = match_candidates(&cands, &annos);
        let curve = froc_curve(&cands, &m.labels, scans, nodules).unwrap();
        cases += 1;
        agree += usize::from(curve == sweep(&cands, &annos, scans));
    }
    outcome(
        rows && agree == cases,
        format!("TSCNN {tscnn:.4}, Ours {ours:.4}; froc_curve = sweep on {agree}/{cases} cases"),
    )
}

// ---- 5 -----------------------------------------------------------------

fn trajectory(config: &RunConfig, set: &dspl_core::pipeline::PatchSet) -> Vec<Vec<u8>> {
    let mut snapshots = Vec::new();
    train_stage2_with(config, set, |_, store: &ParamStore| snapshots.push(store.to_bytes())).unwrap();
    snapshots
}

fn max_param_gap(a: &[u8], b: &[u8]) -> f64 {
    let (a, b) = (ParamStore::from_bytes(a).unwrap(), ParamStore::from_bytes(b).unwrap());
    a.iter()
        .flat_map(|(n, t)| {
            let u = b.get(n).unwrap();
            t.data()
                .iter()
                .zip(u.data())
                .map(|(x, y)| (x - y).abs())
                .collect::<Vec<_>>()
        })
        .fold(0.0, f64::max)
}

fn huge_pace_limit() -> Outcome {
    let base = RunConfig {
        n_train: 40,
        n_test: 1,
        s2_epochs: 5,
        ..RunConfig::default()
    };
    let (train, _) = corpus_scenes(&base).unwrap();
    let set = build_patch_set(&base, &train, &[]).unwrap();
    let equal = RunConfig {
        weighting: Weighting::Equal,
        ..base.clone()
    };
    let spl = RunConfig {
        weighting: Weighting::SelfPaced,
        spl_warmup: 0,
        spl: SplSchedule {
            lambda0: Lambda0::Value(1e9),
            ..base.spl
        },
        ..base.clone()
    };
    let (a, b) = (trajectory(&equal, &set), trajectory(&spl, &set));
    let identical = a == b;
    let gap = a.iter().zip(&b).map(|(x, y)| max_param_gap(x, y)).fold(0.0, f64::max);
    outcome(
        identical,
        format!(
            "{} epochs on {} patches: bit-identical {identical}, max parameter gap {gap:.3e}",
            a.len(),
            set.len()
        ),
    )
}

// ---- 6, 7 --------------------------------------------------------------

fn median(v: &[f64]) -> f64 {
    dspl_core::pipeline::median(v)
}

fn detector_cpm(config: &RunConfig, s1: &Stage1Result, test: &[dspl_core::phantom::PhantomScene]) -> f64 {
    let cands = detect_candidates(&s1.net, &s1.store, test, config.prob_threshold).unwrap();
    score_scenes(&cands, test).unwrap().cpm
}

struct Shared {
    config: RunConfig,
    train: Vec<dspl_core::phantom::PhantomScene>,
    test: Vec<dspl_core::phantom::PhantomScene>,
    plain: Vec<Stage1Result>,
}

fn ddb_trend(seeds: &[u64]) -> (Outcome, Shared) {
    let config = RunConfig::default();
    let (train, test) = corpus_scenes(&config).unwrap();
    let kept: Vec<bool> = train
        .iter()
        .chain(&test)
        .flat_map(|s| {
            s.difficulty
                .iter()
                .zip(&s.annotations)
                .filter(|(_, a)| !a.ignore)
                .map(|(d, _)| d.is_hard())
        })
        .collect();
    let hard = kept.iter().filter(|&&h| h).count() as f64 / kept.len() as f64;
    let mut plain = Vec::new();
    let (mut base_cpm, mut ddb_cpm) = (Vec::new(), Vec::new());
    let (mut base_secs, mut ddb_secs) = (0.0, 0.0);
    for &seed in seeds {
        let cfg = RunConfig { seed, ..config.clone() };
        let t = Instant::now();
        let s1 = train_stage1(&cfg, &train).unwrap();
        base_cpm.push(detector_cpm(&cfg, &s1, &test));
        base_secs += t.elapsed().as_secs_f64();
        plain.push(s1);

        let mut dcfg = cfg.clone();
        dcfg.unet.ddb_positions = BTreeSet::from([1, 2]);
        let t = Instant::now();
        let s1 = train_stage1(&dcfg, &train).unwrap();
        ddb_cpm.push(detector_cpm(&dcfg, &s1, &test));
        ddb_secs += t.elapsed().as_secs_f64();
        println!(
            "    seed {seed}: Non-DDB {:.4}, 1,2-DDB {:.4}",
            base_cpm.last().unwrap(),
            ddb_cpm.last().unwrap()
        );
    }
    let (b, d) = (median(&base_cpm), median(&ddb_cpm));
    let in_budget = base_secs <= 1200.0 && ddb_secs <= 1200.0;
    let o = outcome(
        d >= b && hard >= 0.4 && in_budget,
        format!(
            "median detector CPM 1,2-DDB {d:.4} vs Non-DDB {b:.4}; hard nodules {:.0}%; cell time {base_secs:.0}s / {ddb_secs:.0}s",
            100.0 * hard
        ),
    );
    (
        o,
        Shared {
            config,
            train,
            test,
            plain,
        },
    )
}

fn spl_trend(shared: &Shared, seeds: &[u64]) -> Outcome {
    let (mut eq, mut sp) = (Vec::new(), Vec::new());
    let mut separated = true;
    let mut gaps = Vec::new();
    for (s1, &seed) in shared.plain.iter().zip(seeds) {
        let cfg = RunConfig {
            seed,
            label_noise: 0.1,
            ..shared.config.clone()
        };
        let e = run_from_detector(
            &RunConfig {
                weighting: Weighting::Equal,
                ..cfg.clone()
            },
            s1.clone(),
            &shared.train,
            &shared.test,
        )
        .unwrap();
        let s = run_from_detector(
            &RunConfig {
                weighting: Weighting::SelfPaced,
                ..cfg
            },
            s1.clone(),
            &shared.train,
            &shared.test,
        )
        .unwrap();
        let (noisy, clean) = noisy_clean_means(&s.patches, &s.stage2.final_weights);
        separated &= noisy < clean;
        gaps.push(format!("{noisy:.3}<{clean:.3}"));
        println!(
            "    seed {seed}: equal {:.4}, SPL {:.4}, mean v noisy {noisy:.3} clean {clean:.3}",
            e.report.cpm, s.report.cpm
        );
        eq.push(e.report.cpm);
        sp.push(s.report.cpm);
    }
    let (e, s) = (median(&eq), median(&sp));
    outcome(
        s >= e && separated,
        format!(
            "median CPM SPL {s:.4} vs equal {e:.4}; mean v noisy<clean per seed: {}",
            gaps.join(", ")
        ),
    )
}

// ---- 8, 9 --------------------------------------------------------------

const CHAIN: [&str; 6] = [
    "gen-corpus",
    "train-detector",
    "detect",
    "mine-hard",
    "train-fpr",
    "eval",
];

fn dspl(args: &[&str]) -> bool {
    Command::new(env!("CARGO_BIN_EXE_dspl"))
        .args(args)
        .env("RUST_LOG", "warn")
        .output()
        .is_ok_and(|o| o.status.success())
}

fn run_chain(config: Option<&Path>, out: &Path, commands: &[&str]) -> bool {
    commands.iter().all(|c| {
        let mut args = vec![*c, "--out", out.to_str().unwrap()];
        if let Some(p) = config {
            args.extend(["--config", p.to_str().unwrap()]);
        }
        dspl(&args)
    })
}

fn files(dir: &Path) -> Vec<(String, Vec<u8>)> {
    let mut out = Vec::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for e in std::fs::read_dir(&d).unwrap() {
            let p = e.unwrap().path();
            if p.is_dir() {
                stack.push(p);
            } else {
                let rel = p.strip_prefix(dir).unwrap().display().to_string();
                out.push((rel, std::fs::read(&p).unwrap()));
            }
        }
    }
    out.sort();
    out
}

fn smoke(root: &Path) -> Outcome {
    let out = root.join("smoke_a");
    let t = Instant::now();
    let ok = run_chain(None, &out, &CHAIN);
    let secs = t.elapsed().as_secs_f64();
    if !ok {
        return outcome(false, "a CLI step failed");
    }
    let report = CpmReport::load(&out.join("report.csv")).unwrap();
    outcome(
        report.cpm > 0.5 && secs < 1800.0,
        format!("desk chain in {secs:.0}s, CPM {:.4}", report.cpm),
    )
}

fn determinism(root: &Path) -> Outcome {
    let rerun = root.join("smoke_b");
    if !run_chain(None, &rerun, &CHAIN) {
        return outcome(false, "a CLI step failed");
    }
    let (a, b) = (files(&root.join("smoke_a")), files(&rerun));
    let csvs = a.iter().filter(|(n, _)| n.ends_with(".csv")).count();
    let chain_same = a == b;

    let cfg = root.join("tiny.cfg");
    std::fs::write(
        &cfg,
        "n_train = 12\nn_test = 4\nfolds = 3\ns1_epochs = 1\ns2_epochs = 2\nspl_warmup = 1\nrepeats = 1\n",
    )
    .unwrap();
    let ablate = ["gen-corpus", "ablate"];
    let (x, y) = (root.join("ablate_a"), root.join("ablate_b"));
    let ran = run_chain(Some(&cfg), &x, &ablate) && run_chain(Some(&cfg), &y, &ablate);
    let ablate_same = ran && files(&x) == files(&y);
    outcome(
        chain_same && ablate_same,
        format!(
            "desk chain rerun identical {chain_same} ({} files, {csvs} CSV); ablate rerun identical {ablate_same}",
            a.len()
        ),
    )
}

fn main() {
    let args: Vec<String> = std::env::args().collect();
    if args.iter().any(|a| a == "--list") {
        return;
    }
    let root = tempfile::tempdir().unwrap();
    let seeds = [7, 8, 9];
    let mut failures = 0;
    let mut record = |id: usize, name: &str, run: &mut dyn FnMut() -> Outcome| {
        let t = Instant::now();
        let o = run();
        report(id, name, t, &o);
        failures += usize::from(!o.pass);
    };
    record(1, "zero-offset equivalence", &mut zero_offset_equivalence);
    record(2, "deformable gradients", &mut deform_gradients);
    record(3, "SPL closed form", &mut spl_closed_form);
    record(4, "CPM arithmetic and FROC oracle", &mut cpm_arithmetic);
    record(5, "huge-lambda limit", &mut huge_pace_limit);
    let mut shared = None;
    record(6, "DDB trend", &mut || {
        let (o, s) = ddb_trend(&seeds);
        shared = Some(s);
        o
    });
    let shared = shared.unwrap();
    record(7, "SPL under label noise", &mut || spl_trend(&shared, &seeds));
    record(9, "end-to-end smoke", &mut || smoke(root.path()));
    record(8, "CLI determinism", &mut || determinism(root.path()));
    println!("acceptance: {} of 9 criteria passed", 9 - failures);
}
