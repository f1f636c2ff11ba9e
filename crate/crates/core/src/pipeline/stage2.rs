use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::{RunConfig, Weighting};
use crate::blocks::{build_fpr_cnn, FprCnn};
use crate::error::{Error, Result};
use crate::froc::DetectionCandidate;
use crate::optim::{Optimizer, Sgd};
use crate::params::ParamStore;
use crate::phantom::{extract_patches, PhantomScene};
use crate::spl::{evaluate_losses, spl_train_epoch, weighted_epoch, EpochStats, LabeledSet, SplState};
use crate::tensor::Tensor;

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum PatchSource {
    Nodule,
    Background,
    HardNegative,
}

/// Stage-2 training patches with their provenance and noise flags.
#[derive(Clone, Debug, PartialEq)]
pub struct PatchSet {
    pub data: LabeledSet,
    pub source: Vec<PatchSource>,
    /// Whether the label was flipped by noise injection.
    pub noisy: Vec<bool>,
}

impl PatchSet {
    pub fn len(&self) -> usize {
        self.data.len()
    }

    pub fn is_empty(&self) -> bool {
        self.data.is_empty()
    }
}

fn random_background(scene: &PhantomScene, config: &RunConfig, rng: &mut ChaCha8Rng) -> Option<(f64, f64)> {
    let p = &config.phantom;
    let (cy, cx, ay, ax) = p.lung_ellipse();
    for _ in 0..100 {
        let y = (cy + rng.gen_range(-ay..ay)).round();
        let x = (cx + rng.gen_range(-ax..ax)).round();
        let clear = scene
            .annotations
            .iter()
            .all(|a| (a.center_y - y).hypot(a.center_x - x) > a.diameter);
        if p.in_lung(y, x, 1.0) && clear {
            return Some((y, x));
        }
    }
    None
}

/// Nodule patches (plus jittered copies), random lung background and the
/// mined hard negatives, followed by seeded label noise.
pub fn build_patch_set(config: &RunConfig, scenes: &[PhantomScene], hard: &[DetectionCandidate]) -> Result<PatchSet> {
    let mut rng = ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0002);
    let size = config.fpr.patch;
    let mut parts: Vec<Tensor> = Vec::new();
    let mut labels = Vec::new();
    let mut source = Vec::new();
    for scene in scenes {
        let mut centers = Vec::new();
        let mut kinds = Vec::new();
        for a in scene.annotations.iter().filter(|a| !a.ignore) {
            centers.push((a.center_y, a.center_x));
            kinds.push(PatchSource::Nodule);
            let r = a.diameter / 4.0;
            for _ in 0..config.pos_jitter {
                centers.push((a.center_y + rng.gen_range(-r..=r), a.center_x + rng.gen_range(-r..=r)));
                kinds.push(PatchSource::Nodule);
            }
        }
        for _ in 0..config.neg_per_scene {
            if let Some(c) = random_background(scene, config, &mut rng) {
                centers.push(c);
                kinds.push(PatchSource::Background);
            }
        }
        for h in hard.iter().filter(|h| h.scan_id == scene.id) {
            centers.push((h.center_y, h.center_x));
            kinds.push(PatchSource::HardNegative);
        }
        if centers.is_empty() {
            continue;
        }
        let (p, l) = extract_patches(scene, &centers, size)?;
        parts.push(p);
        labels.extend(l);
        source.extend(kinds);
    }
    if parts.is_empty() {
        return Err(Error::invalid("no stage-2 training patches"));
    }
    let inputs = Tensor::stack(&parts)?;
    let n = labels.len();
    let mut noisy = vec![false; n];
    let flips = (config.label_noise * n as f64).round() as usize;
    let mut order: Vec<usize> = (0..n).collect();
    order.shuffle(&mut ChaCha8Rng::seed_from_u64(config.seed ^ 0x5eed_0003));
    for &i in &order[..flips] {
        labels[i] = 1 - labels[i];
        noisy[i] = true;
    }
    Ok(PatchSet {
        data: LabeledSet::new(inputs, labels)?,
        source,
        noisy,
    })
}

pub struct Stage2Result {
    pub net: FprCnn,
    pub store: ParamStore,
    pub log: Vec<EpochStats>,
    /// Per-sample weights of the last epoch (all ones without self-pacing).
    pub final_weights: Vec<f64>,
}

pub fn spl_log_csv(log: &[EpochStats]) -> String {
    let mut s = format!("{}\n", crate::spl::EPOCH_STATS_HEADER);
    for e in log {
        let _ = writeln!(s, "{}", e.csv_row());
    }
    s
}

pub const SAMPLE_WEIGHTS_HEADER: &str = "index,label,noisy,v";

pub fn sample_weights_csv(set: &PatchSet, weights: &[f64]) -> String {
    let mut s = format!("{SAMPLE_WEIGHTS_HEADER}\n");
    for (i, v) in weights.iter().enumerate() {
        let _ = writeln!(s, "{i},{},{},{v}", set.data.labels[i], u8::from(set.noisy[i]));
    }
    s
}

/// Mean weight of the noisy and of the clean samples.
pub fn noisy_clean_means(set: &PatchSet, weights: &[f64]) -> (f64, f64) {
    let mean = |want: bool| {
        let v: Vec<f64> = weights
            .iter()
            .zip(&set.noisy)
            .filter(|(_, &n)| n == want)
            .map(|(w, _)| *w)
            .collect();
        v.iter().sum::<f64>() / v.len().max(1) as f64
    };
    (mean(true), mean(false))
}

fn batch_seed(config: &RunConfig, epoch: usize) -> u64 {
    config.seed.wrapping_mul(0x9e37_79b9).wrapping_add(epoch as u64)
}

/// Train the classifier, calling `observe` with the parameters after every epoch.
pub fn train_stage2_with(
    config: &RunConfig,
    set: &PatchSet,
    mut observe: impl FnMut(&EpochStats, &ParamStore),
) -> Result<Stage2Result> {
    config.validate()?;
    let positives = set.data.labels.iter().filter(|&&l| l == 1).count();
    if positives == 0 || positives == set.len() {
        return Err(Error::invalid("stage-2 training needs both classes"));
    }
    let (net, mut store) = build_fpr_cnn(&config.fpr, config.seed)?;
    let mut opt = Sgd::new(config.s2_lr, config.s2_momentum);
    let mut state = SplState::new(config.spl)?;
    let ones = vec![1.0; set.len()];
    let mut log = Vec::with_capacity(config.s2_epochs);
    for epoch in 0..config.s2_epochs {
        let seed = batch_seed(config, epoch);
        let paced = config.weighting == Weighting::SelfPaced && epoch >= config.spl_warmup;
        let stats = match paced {
            true => EpochStats {
                epoch,
                ..spl_train_epoch(&net, &mut store, &set.data, &mut state, &mut opt, config.s2_batch, seed)?
            },
            false => {
                let losses = evaluate_losses(&net, &store, &set.data)?;
                weighted_epoch(&net, &mut store, &set.data, &ones, &mut opt, config.s2_batch, seed)?;
                EpochStats {
                    epoch,
                    lambda: f64::INFINITY,
                    q: f64::INFINITY,
                    mean_loss: losses.iter().sum::<f64>() / losses.len() as f64,
                    active_fraction: 1.0,
                }
            }
        };
        if !stats.mean_loss.is_finite() {
            return Err(Error::Diverged {
                epoch,
                loss: stats.mean_loss,
            });
        }
        log::info!(
            "stage2 epoch {epoch}: loss {:.4} active {:.3} lambda {:.4}",
            stats.mean_loss,
            stats.active_fraction,
            stats.lambda
        );
        observe(&stats, &store);
        log.push(stats);
        opt.set_learning_rate(opt.learning_rate() * config.s2_lr_decay);
    }
    let final_weights = if state.v.is_empty() { ones } else { state.v };
    Ok(Stage2Result {
        net,
        store,
        log,
        final_weights,
    })
}

pub fn train_stage2(config: &RunConfig, set: &PatchSet) -> Result<Stage2Result> {
    train_stage2_with(config, set, |_, _| {})
}
