use std::fmt::Write as _;

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use super::config::RunConfig;
use super::detect::probability_maps;
use crate::autodiff::{Graph, Mode};
use crate::blocks::{build_unet, UNet};
use crate::error::{Error, Result};
use crate::optim::{Adam, Optimizer};
use crate::params::ParamStore;
use crate::phantom::{split_folds, PhantomScene};
use crate::tensor::Tensor;

/// `[N, 1, H, W]` batch from `[1, H, W]` images.
pub fn image_batch(images: &[&Tensor]) -> Result<Tensor> {
    let first = images.first().ok_or_else(|| Error::invalid("empty image batch"))?;
    let [1, h, w] = *first.shape() else {
        return Err(Error::shape(
            "image_batch",
            format!("expected [1,H,W], got {:?}", first.shape()),
        ));
    };
    let mut data = Vec::with_capacity(images.len() * h * w);
    for im in images {
        if im.shape() != first.shape() {
            return Err(Error::shape("image_batch", "images differ in size"));
        }
        data.extend_from_slice(im.data());
    }
    Tensor::new(&[images.len(), 1, h, w], data)
}

/// Patience-based early termination on a metric to maximize.
///
/// Epochs are numbered from 1. Once the best epoch is `e`, training stops
/// after epoch `e + patience` unless a later epoch strictly improves.
#[derive(Clone, Debug, PartialEq)]
pub struct EarlyStop {
    pub patience: usize,
    pub best: f64,
    pub best_epoch: usize,
}

impl EarlyStop {
    pub fn new(patience: usize) -> Self {
        Self {
            patience,
            best: f64::NEG_INFINITY,
            best_epoch: 0,
        }
    }

    /// Record the metric of `epoch`; returns whether it is a new best.
    pub fn observe(&mut self, epoch: usize, value: f64) -> bool {
        if value > self.best {
            self.best = value;
            self.best_epoch = epoch;
            true
        } else {
            false
        }
    }

    pub fn should_stop(&self, epoch: usize) -> bool {
        epoch >= self.best_epoch + self.patience
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct Stage1Epoch {
    pub epoch: usize,
    pub train_loss: f64,
    pub val_dice: f64,
    pub best_epoch: usize,
}

pub const STAGE1_LOG_HEADER: &str = "epoch,train_loss,val_dice,best_epoch";

pub fn stage1_log_csv(log: &[Stage1Epoch]) -> String {
    let mut s = format!("{STAGE1_LOG_HEADER}\n");
    for e in log {
        let _ = writeln!(s, "{},{},{},{}", e.epoch, e.train_loss, e.val_dice, e.best_epoch);
    }
    s
}

#[derive(Clone)]
pub struct Stage1Result {
    pub net: UNet,
    /// Parameters of the best validation epoch.
    pub store: ParamStore,
    pub log: Vec<Stage1Epoch>,
    pub best_epoch: usize,
}

/// Global soft Dice between probability maps and binary masks.
pub fn soft_dice(probs: &[Tensor], masks: &[Tensor]) -> f64 {
    let (mut inter, mut total) = (0.0, 0.0);
    for (p, m) in probs.iter().zip(masks) {
        for (a, b) in p.data().iter().zip(m.data()) {
            inter += a * b;
            total += a + b;
        }
    }
    (2.0 * inter + 1.0) / (total + 1.0)
}

fn crop(t: &Tensor, top: usize, left: usize, size: usize) -> Tensor {
    let w = t.shape()[2];
    let mut data = Vec::with_capacity(size * size);
    for y in top..top + size {
        data.extend_from_slice(&t.data()[y * w + left..y * w + left + size]);
    }
    Tensor::new(&[1, size, size], data).expect("crop within bounds")
}

/// Half of the crops contain a nodule, the rest are placed uniformly.
fn sample_crop(scene: &PhantomScene, mask: &Tensor, size: usize, rng: &mut ChaCha8Rng) -> (Tensor, Tensor) {
    let (h, w) = (scene.height(), scene.width());
    if size == 0 || size == h {
        return (scene.image.clone(), mask.clone());
    }
    let span = (h - size) as f64;
    let (top, left) = match scene.annotations.as_slice() {
        [] => (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)),
        annos if rng.gen_bool(0.5) => {
            let a = &annos[rng.gen_range(0..annos.len())];
            let jitter = size as f64 / 4.0;
            let place = |c: f64, r: &mut ChaCha8Rng| {
                (c - size as f64 / 2.0 + r.gen_range(-jitter..=jitter))
                    .round()
                    .clamp(0.0, span) as usize
            };
            (place(a.center_y, rng), place(a.center_x, rng))
        }
        _ => (rng.gen_range(0..=h - size), rng.gen_range(0..=w - size)),
    };
    (crop(&scene.image, top, left, size), crop(mask, top, left, size))
}

/// Train the detector with Adam on BCE + soft Dice, keeping the checkpoint
/// with the best validation Dice and stopping `patience` epochs after it.
pub fn train_stage1(config: &RunConfig, scenes: &[PhantomScene]) -> Result<Stage1Result> {
    config.validate()?;
    let ids: Vec<String> = scenes.iter().map(|s| s.id.clone()).collect();
    let folds = split_folds(&ids, config.folds, config.seed)?;
    let val_ids = folds.fold(0);
    let (val, train): (Vec<&PhantomScene>, Vec<&PhantomScene>) = scenes.iter().partition(|s| val_ids.contains(&s.id));
    let val_owned: Vec<PhantomScene> = val.iter().map(|s| (*s).clone()).collect();
    let val_masks: Vec<Tensor> = val_owned.iter().map(PhantomScene::nodule_mask).collect();
    let train_masks: Vec<Tensor> = train.iter().map(|s| s.nodule_mask()).collect();

    let (net, mut store) = build_unet(&config.unet, config.seed)?;
    let mut opt = Adam::new(config.s1_lr);
    let mut stop = EarlyStop::new(config.patience);
    let mut best_store = store.clone();
    let mut log = Vec::new();

    for epoch in 1..=config.s1_epochs {
        let mut rng = ChaCha8Rng::seed_from_u64(config.seed.wrapping_mul(1_000_003).wrapping_add(epoch as u64));
        let mut order: Vec<usize> = (0..train.len()).collect();
        order.shuffle(&mut rng);
        let mut batches: Vec<&[usize]> = order.chunks(config.s1_batch).collect();
        if batches.len() > 1 && batches.last().is_some_and(|b| b.len() == 1) {
            batches.pop();
        }
        let mut total = 0.0;
        for rows in &batches {
            let crops: Vec<(Tensor, Tensor)> = rows
                .iter()
                .map(|&i| sample_crop(train[i], &train_masks[i], config.s1_crop, &mut rng))
                .collect();
            let x = image_batch(&crops.iter().map(|c| &c.0).collect::<Vec<_>>())?;
            let y = image_batch(&crops.iter().map(|c| &c.1).collect::<Vec<_>>())?;
            let mut g = Graph::new();
            let xv = g.constant(x);
            let step = net
                .forward(&mut g, &store, xv, Mode::Train)
                .and_then(|z| g.seg_loss(z, &y));
            let loss = match step {
                Ok(l) => l,
                Err(Error::NonFinite(_)) => return Err(Error::Diverged { epoch, loss: f64::NAN }),
                Err(e) => return Err(e),
            };
            let value = g.value(loss).data()[0];
            if !value.is_finite() {
                return Err(Error::Diverged { epoch, loss: value });
            }
            total += value;
            g.backward(loss)?;
            let grads = g.param_grads();
            store.apply_buffer_updates(g.take_buffer_updates())?;
            opt.step(&mut store, &grads)?;
        }
        let probs = probability_maps(&net, &store, &val_owned)?;
        let dice = soft_dice(&probs, &val_masks);
        if stop.observe(epoch, dice) {
            best_store = store.clone();
        }
        let train_loss = total / batches.len().max(1) as f64;
        log::info!("stage1 epoch {epoch}: loss {train_loss:.4} val dice {dice:.4}");
        log.push(Stage1Epoch {
            epoch,
            train_loss,
            val_dice: dice,
            best_epoch: stop.best_epoch,
        });
        if stop.should_stop(epoch) {
            break;
        }
    }
    Ok(Stage1Result {
        net,
        store: best_store,
        log,
        best_epoch: stop.best_epoch,
    })
}
