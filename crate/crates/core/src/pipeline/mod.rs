//! The two-stage detector: configuration, U-Net training with early
//! termination, candidate extraction, hard mining, self-paced classifier
//! training, FROC evaluation and the DDB x weighting ablation.

mod ablation;
mod config;
mod detect;
mod evaluate;
mod stage1;
mod stage2;

pub use ablation::{ablation_csv, ablation_table, median, run_ablation, AblationCell, ABLATION_DDB, ABLATION_HEADER};
pub use config::{RunConfig, Weighting};
pub use detect::{
    candidates_from_map, components, detect_candidates, hard_mine, probability_maps, select_hard_negatives, Component,
};
pub use evaluate::{rescore, scene_annotations, score_scenes};
pub use stage1::{
    image_batch, soft_dice, stage1_log_csv, train_stage1, EarlyStop, Stage1Epoch, Stage1Result, STAGE1_LOG_HEADER,
};
pub use stage2::{
    build_patch_set, noisy_clean_means, sample_weights_csv, spl_log_csv, train_stage2, train_stage2_with, PatchSet,
    PatchSource, Stage2Result, SAMPLE_WEIGHTS_HEADER,
};

use crate::error::Result;
use crate::froc::{CpmReport, DetectionCandidate};
use crate::phantom::{generate_corpus, PhantomScene};

/// Generate the corpus of a config in memory, split into train and test scenes.
pub fn corpus_scenes(config: &RunConfig) -> Result<(Vec<PhantomScene>, Vec<PhantomScene>)> {
    let mut all = generate_corpus(config.n_train + config.n_test, config.corpus_seed, &config.phantom)?;
    let test = all.split_off(config.n_train);
    Ok((all, test))
}

pub struct PipelineOutcome {
    pub stage1: Stage1Result,
    pub hard_negatives: Vec<DetectionCandidate>,
    pub patches: PatchSet,
    pub stage2: Stage2Result,
    /// Stage-1 candidates on the test scenes.
    pub candidates: Vec<DetectionCandidate>,
    /// The same candidates with stage-2 probabilities.
    pub scored: Vec<DetectionCandidate>,
    pub report: CpmReport,
}

/// Stage 2 onwards, given a trained detector.
pub fn run_from_detector(
    config: &RunConfig,
    stage1: Stage1Result,
    train: &[PhantomScene],
    test: &[PhantomScene],
) -> Result<PipelineOutcome> {
    let hard_negatives = hard_mine(
        &stage1.net,
        &stage1.store,
        train,
        config.hard_top_n,
        config.prob_threshold,
    )?;
    let patches = build_patch_set(config, train, &hard_negatives)?;
    let stage2 = train_stage2(config, &patches)?;
    let candidates = detect_candidates(&stage1.net, &stage1.store, test, config.prob_threshold)?;
    let scored = rescore(&stage2.net, &stage2.store, test, &candidates)?;
    let report = score_scenes(&scored, test)?;
    Ok(PipelineOutcome {
        stage1,
        hard_negatives,
        patches,
        stage2,
        candidates,
        scored,
        report,
    })
}

/// Train both stages on `train` and score on `test`.
pub fn run_pipeline(config: &RunConfig, train: &[PhantomScene], test: &[PhantomScene]) -> Result<PipelineOutcome> {
    let stage1 = train_stage1(config, train)?;
    run_from_detector(config, stage1, train, test)
}
