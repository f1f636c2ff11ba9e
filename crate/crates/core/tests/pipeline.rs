//! End-to-end behaviour of the two-stage pipeline on tiny corpora.

use dspl_core::froc::{
    read_annotations, read_candidates, write_annotations, write_candidates, CpmReport, DetectionCandidate,
};
use dspl_core::phantom::generate_scene;
use dspl_core::pipeline::{
    ablation_csv, build_patch_set, corpus_scenes, run_ablation, run_pipeline, scene_annotations, score_scenes,
    select_hard_negatives, train_stage1, train_stage2, EarlyStop, RunConfig, Weighting,
};
use proptest::prelude::*;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

fn tiny() -> RunConfig {
    RunConfig {
        n_train: 20,
        n_test: 8,
        s1_epochs: 4,
        s2_epochs: 3,
        spl_warmup: 1,
        folds: 4,
        hard_top_n: 20,
        ..RunConfig::default()
    }
}

#[test]
fn detector_learns_on_a_tiny_corpus() {
    let cfg = RunConfig { s1_epochs: 6, ..tiny() };
    let (train, _) = corpus_scenes(&cfg).unwrap();
    let r = train_stage1(&cfg, &train).unwrap();
    let first = r.log[0].val_dice;
    let best = r.log.iter().map(|e| e.val_dice).fold(0.0, f64::max);
    assert!(best > first, "dice {first} -> {best}");
    assert!(r.log[r.log.len() - 1].train_loss < r.log[0].train_loss);
}

#[test]
fn training_is_deterministic() {
    let cfg = RunConfig { s1_epochs: 2, ..tiny() };
    let (train, _) = corpus_scenes(&cfg).unwrap();
    let a = train_stage1(&cfg, &train).unwrap();
    let b = train_stage1(&cfg, &train).unwrap();
    assert_eq!(a.store.to_bytes(), b.store.to_bytes());
    let set = build_patch_set(&cfg, &train, &[]).unwrap();
    let x = train_stage2(&cfg, &set).unwrap();
    let y = train_stage2(&cfg, &set).unwrap();
    assert_eq!(x.store.to_bytes(), y.store.to_bytes());
    assert_eq!(x.final_weights, y.final_weights);
}

#[test]
fn hard_mining_keeps_the_most_confident_false_positives() {
    let mut scene = generate_scene(1, &tiny().phantom).unwrap();
    scene.set_scan_id("a");
    let mut cands: Vec<DetectionCandidate> = scene
        .annotations
        .iter()
        .map(|a| DetectionCandidate::new("a", a.center_y, a.center_x, 0.99).unwrap())
        .collect();
    let mut fps = Vec::new();
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    while fps.len() < 12 {
        let (y, x) = (rng.gen_range(0.0..64.0), rng.gen_range(0.0..64.0));
        if scene.annotations.iter().all(|a| !a.hit_by(y, x)) {
            fps.push(DetectionCandidate::new("a", y, x, (fps.len() + 1) as f64 / 20.0).unwrap());
        }
    }
    cands.extend(fps.iter().cloned());
    let hard = select_hard_negatives(&cands, &[scene], 5);
    let expect: Vec<DetectionCandidate> = fps.iter().rev().take(5).cloned().collect();
    assert_eq!(hard, expect);
}

#[test]
fn perfect_and_random_detectors_bracket_the_score() {
    let (_, test) = corpus_scenes(&tiny()).unwrap();
    let perfect: Vec<DetectionCandidate> = scene_annotations(&test)
        .iter()
        .filter(|a| !a.ignore)
        .map(|a| DetectionCandidate::new(a.scan_id.clone(), a.center_y, a.center_x, 1.0).unwrap())
        .collect();
    assert_eq!(score_scenes(&perfect, &test).unwrap().cpm, 1.0);

    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let random: Vec<DetectionCandidate> = test
        .iter()
        .flat_map(|s| {
            (0..50)
                .map(|_| {
                    DetectionCandidate::new(
                        s.id.clone(),
                        rng.gen_range(0.0..64.0),
                        rng.gen_range(0.0..64.0),
                        rng.gen(),
                    )
                    .unwrap()
                })
                .collect::<Vec<_>>()
        })
        .collect();
    assert!(score_scenes(&random, &test).unwrap().cpm < 0.1);
}

#[test]
fn report_is_reproducible_from_csv_files() {
    let cfg = RunConfig { s1_epochs: 2, ..tiny() };
    let (train, test) = corpus_scenes(&cfg).unwrap();
    let out = run_pipeline(&cfg, &train, &test).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let (cpath, apath, rpath) = (
        dir.path().join("c.csv"),
        dir.path().join("a.csv"),
        dir.path().join("r.csv"),
    );
    write_candidates(&cpath, &out.scored).unwrap();
    write_annotations(&apath, &scene_annotations(&test)).unwrap();
    out.report.save(&rpath).unwrap();
    let cands = read_candidates(&cpath).unwrap();
    let annos = read_annotations(&apath).unwrap();
    let again = dspl_core::froc::score(&cands, &annos, test.len()).unwrap();
    assert_eq!(again, out.report);
    assert_eq!(CpmReport::load(&rpath).unwrap(), out.report);
}

#[test]
fn label_noise_flips_the_requested_share() {
    let cfg = RunConfig {
        label_noise: 0.1,
        ..tiny()
    };
    let (train, _) = corpus_scenes(&cfg).unwrap();
    let clean = build_patch_set(
        &RunConfig {
            label_noise: 0.0,
            ..cfg.clone()
        },
        &train,
        &[],
    )
    .unwrap();
    let noisy = build_patch_set(&cfg, &train, &[]).unwrap();
    let flipped = noisy.noisy.iter().filter(|&&n| n).count();
    assert_eq!(flipped, (0.1 * noisy.len() as f64).round() as usize);
    for i in 0..noisy.len() {
        assert_eq!(noisy.noisy[i], noisy.data.labels[i] != clean.data.labels[i]);
    }
}

#[test]
fn ablation_covers_every_cell() {
    let cfg = RunConfig {
        s1_epochs: 1,
        s2_epochs: 2,
        repeats: 1,
        n_train: 12,
        n_test: 4,
        folds: 3,
        ..tiny()
    };
    let (train, test) = corpus_scenes(&cfg).unwrap();
    let cells = run_ablation(&cfg, &train, &test, |_| {}).unwrap();
    let labels: Vec<(String, Weighting)> = cells.iter().map(|c| (c.ddb.clone(), c.weighting)).collect();
    let ddb = ["Non-DDB", "1-DDB", "1,2-DDB", "1,2,3-DDB"];
    let expect: Vec<(String, Weighting)> = ddb
        .iter()
        .flat_map(|d| [(d.to_string(), Weighting::Equal), (d.to_string(), Weighting::SelfPaced)])
        .collect();
    assert_eq!(labels, expect);
    assert!(cells
        .windows(2)
        .all(|w| w[0].ddb != w[1].ddb || w[0].params == w[1].params));
    assert!(cells[2].params > cells[0].params);
    let csv = ablation_csv(&cells);
    assert_eq!(csv.lines().count(), 9);

    let baseline = RunConfig {
        weighting: Weighting::Equal,
        ..cfg.clone()
    };
    let plain = run_pipeline(&baseline, &train, &test).unwrap();
    assert_eq!(cells[0].cpms, vec![plain.report.cpm]);
}

proptest! {
    #[test]
    fn early_stop_trains_exactly_patience_past_the_best(
        values in prop::collection::vec(0.0f64..1.0, 1..40),
        patience in 1usize..8,
    ) {
        let mut stop = EarlyStop::new(patience);
        let mut last = 0;
        for (i, &v) in values.iter().enumerate() {
            stop.observe(i + 1, v);
            last = i + 1;
            if stop.should_stop(last) {
                break;
            }
        }
        prop_assert!(last <= stop.best_epoch + patience);
        prop_assert!(last >= values.len().min(stop.best_epoch + patience));
    }
}
