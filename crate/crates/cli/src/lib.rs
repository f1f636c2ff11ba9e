//! Subcommands of the `dspl` binary.
//!
//! Every command works inside one run directory (`--out`, or the `out` key
//! of the config):
//!
//! ```text
//! corpus/                 gen-corpus
//! detector.dspl/.txt      train-detector (+ detector_log.csv)
//! candidates.csv          detect (test scenes)
//! hard_negatives.csv      mine-hard (train scenes)
//! fpr.dspl/.txt           train-fpr (+ spl_log.csv, sample_weights.csv)
//! scored_candidates.csv   eval (+ report.csv)
//! ablation.csv            ablate
//! ```

use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand};
use dspl_core::blocks::{build_fpr_cnn, build_unet, FprCnn, UNet};
use dspl_core::froc::{read_candidates, write_candidates, DetectionCandidate};
use dspl_core::phantom::{generate_corpus, write_corpus, Corpus, PhantomScene};
use dspl_core::pipeline::{
    ablation_csv, ablation_table, build_patch_set, detect_candidates, hard_mine, rescore, run_ablation,
    sample_weights_csv, score_scenes, spl_log_csv, stage1_log_csv, train_stage1, train_stage2, RunConfig,
};
use dspl_core::{Error, ParamStore, Result};

#[derive(Debug, Parser)]
#[command(name = "dspl", version, about = "Two-stage nodule detection on synthetic phantoms")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Generate the phantom corpus (`--seed` sets the corpus seed).
    GenCorpus(Common),
    /// Train the stage-1 U-Net on the training scenes.
    TrainDetector(Common),
    /// Detect candidates on the test scenes.
    Detect(Common),
    /// Collect the detector's most confident false positives on the training scenes.
    MineHard(Common),
    /// Train the stage-2 false-positive classifier.
    TrainFpr(Common),
    /// Rescore the test candidates and write the FROC/CPM report.
    Eval(Common),
    /// DDB x weighting ablation over `repeats` seeds.
    Ablate(Common),
}

#[derive(Debug, Args)]
pub struct Common {
    /// Config file (`key = value` lines); defaults apply otherwise.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run directory; overrides the config's `out`.
    #[arg(long)]
    pub out: Option<PathBuf>,
}

impl Command {
    fn common(&self) -> &Common {
        match self {
            Command::GenCorpus(c)
            | Command::TrainDetector(c)
            | Command::Detect(c)
            | Command::MineHard(c)
            | Command::TrainFpr(c)
            | Command::Eval(c)
            | Command::Ablate(c) => c,
        }
    }
}

/// The effective config of a command.
pub fn resolve_config(command: &Command) -> Result<RunConfig> {
    let c = command.common();
    let mut config = match &c.config {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = c.seed {
        match command {
            Command::GenCorpus(_) => config.corpus_seed = seed,
            _ => config.seed = seed,
        }
    }
    if let Some(out) = &c.out {
        config.out = out.clone();
    }
    config.validate()?;
    Ok(config)
}

fn write(path: &Path, text: &str) -> Result<()> {
    std::fs::write(path, text).map_err(|e| Error::io(path, e))
}

fn corpus_dir(config: &RunConfig) -> PathBuf {
    config.out.join("corpus")
}

fn load_split(config: &RunConfig, ids: &[String]) -> Result<Vec<PhantomScene>> {
    let corpus = Corpus::open(&corpus_dir(config))?;
    let have = corpus.manifest.len();
    let need = config.n_train + config.n_test;
    if have < need {
        return Err(Error::invalid(format!(
            "corpus has {have} scenes, config needs {need}; rerun gen-corpus"
        )));
    }
    ids.iter().map(|id| corpus.load_scene(id)).collect()
}

fn load_detector(config: &RunConfig) -> Result<(UNet, ParamStore)> {
    let (net, fresh) = build_unet(&config.unet, config.seed)?;
    let store = load_matching(&config.out.join("detector.dspl"), &fresh)?;
    Ok((net, store))
}

fn load_fpr(config: &RunConfig) -> Result<(FprCnn, ParamStore)> {
    let (net, fresh) = build_fpr_cnn(&config.fpr, config.seed)?;
    let store = load_matching(&config.out.join("fpr.dspl"), &fresh)?;
    Ok((net, store))
}

/// Load a checkpoint and check it has the layout the config describes.
fn load_matching(path: &Path, fresh: &ParamStore) -> Result<ParamStore> {
    let store = ParamStore::load(path)?;
    let same = store.len() == fresh.len()
        && fresh
            .iter()
            .all(|(name, t)| store.get(name).is_ok_and(|s| s.shape() == t.shape()));
    if !same {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: "checkpoint does not match the configured architecture".into(),
        });
    }
    Ok(store)
}

/// The sidecar leaves out `out` so that a run directory does not depend on its own path.
fn sidecar(description: String, config: &RunConfig) -> String {
    let text: String = config
        .to_text()
        .lines()
        .filter(|l| !l.starts_with("out ="))
        .map(|l| format!("{l}\n"))
        .collect();
    format!("{description}\n# config\n{text}")
}

pub fn gen_corpus(config: &RunConfig) -> Result<String> {
    let scenes = generate_corpus(config.n_train + config.n_test, config.corpus_seed, &config.phantom)?;
    let dir = corpus_dir(config);
    let corpus = write_corpus(&dir, &scenes)?;
    let nodules = corpus.annotations.iter().filter(|a| !a.ignore).count();
    let hard: usize = corpus.manifest.iter().map(|r| r.juxta_vascular + r.spiculated).sum();
    Ok(format!(
        "wrote {} scenes to {} ({nodules} nodules, {hard} hard)",
        scenes.len(),
        dir.display()
    ))
}

pub fn train_detector(config: &RunConfig) -> Result<String> {
    let train = load_split(config, &config.train_ids())?;
    let r = train_stage1(config, &train)?;
    r.store.save(&config.out.join("detector.dspl"))?;
    write(
        &config.out.join("detector.txt"),
        &sidecar(r.net.describe(&r.store), config),
    )?;
    write(&config.out.join("detector_log.csv"), &stage1_log_csv(&r.log))?;
    let best = &r.log[r.best_epoch - 1];
    Ok(format!(
        "trained {} epochs, best validation Dice {:.4} at epoch {}",
        r.log.len(),
        best.val_dice,
        r.best_epoch
    ))
}

pub fn detect(config: &RunConfig) -> Result<String> {
    let test = load_split(config, &config.test_ids())?;
    let (net, store) = load_detector(config)?;
    let cands = detect_candidates(&net, &store, &test, config.prob_threshold)?;
    write_candidates(&config.out.join("candidates.csv"), &cands)?;
    let report = score_scenes(&cands, &test)?;
    Ok(format!(
        "{} candidates on {} scenes, detector CPM {:.4}",
        cands.len(),
        test.len(),
        report.cpm
    ))
}

pub fn mine_hard(config: &RunConfig) -> Result<String> {
    let train = load_split(config, &config.train_ids())?;
    let (net, store) = load_detector(config)?;
    let hard = hard_mine(&net, &store, &train, config.hard_top_n, config.prob_threshold)?;
    write_candidates(&config.out.join("hard_negatives.csv"), &hard)?;
    Ok(format!("{} hard negatives", hard.len()))
}

pub fn train_fpr(config: &RunConfig) -> Result<String> {
    let train = load_split(config, &config.train_ids())?;
    let hard_path = config.out.join("hard_negatives.csv");
    let hard: Vec<DetectionCandidate> = if hard_path.exists() {
        read_candidates(&hard_path)?
    } else {
        log::warn!("{} not found, training without hard negatives", hard_path.display());
        Vec::new()
    };
    let set = build_patch_set(config, &train, &hard)?;
    let r = train_stage2(config, &set)?;
    r.store.save(&config.out.join("fpr.dspl"))?;
    write(&config.out.join("fpr.txt"), &sidecar(r.net.describe(&r.store), config))?;
    write(&config.out.join("spl_log.csv"), &spl_log_csv(&r.log))?;
    write(
        &config.out.join("sample_weights.csv"),
        &sample_weights_csv(&set, &r.final_weights),
    )?;
    let last = r.log.last().map_or(f64::NAN, |e| e.mean_loss);
    Ok(format!("trained on {} patches, final mean loss {last:.4}", set.len()))
}

pub fn eval(config: &RunConfig) -> Result<String> {
    let test = load_split(config, &config.test_ids())?;
    let cands = read_candidates(&config.out.join("candidates.csv"))?;
    let (net, store) = load_fpr(config)?;
    let scored = rescore(&net, &store, &test, &cands)?;
    write_candidates(&config.out.join("scored_candidates.csv"), &scored)?;
    let report = score_scenes(&scored, &test)?;
    report.save(&config.out.join("report.csv"))?;
    let rates: Vec<String> = report.sensitivities.iter().map(|s| format!("{s:.4}")).collect();
    Ok(format!("sensitivities {}\nCPM {:.4}", rates.join(" "), report.cpm))
}

pub fn ablate(config: &RunConfig) -> Result<String> {
    let train = load_split(config, &config.train_ids())?;
    let test = load_split(config, &config.test_ids())?;
    let cells = run_ablation(config, &train, &test, |line| log::info!("{line}"))?;
    write(&config.out.join("ablation.csv"), &ablation_csv(&cells))?;
    Ok(ablation_table(&cells))
}

/// Run one command and return its summary.
pub fn run(command: &Command) -> Result<String> {
    let config = resolve_config(command)?;
    std::fs::create_dir_all(&config.out).map_err(|e| Error::io(&config.out, e))?;
    match command {
        Command::GenCorpus(_) => gen_corpus(&config),
        Command::TrainDetector(_) => train_detector(&config),
        Command::Detect(_) => detect(&config),
        Command::MineHard(_) => mine_hard(&config),
        Command::TrainFpr(_) => train_fpr(&config),
        Command::Eval(_) => eval(&config),
        Command::Ablate(_) => ablate(&config),
    }
}
