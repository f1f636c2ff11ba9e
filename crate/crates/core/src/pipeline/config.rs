use std::fmt::Write as _;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use crate::blocks::{ddb_label, parse_ddb_positions, BlockConfig, FprConfig};
use crate::error::{Error, Result};
use crate::phantom::PhantomConfig;
use crate::spl::{Lambda0, SplSchedule};

/// How stage-2 samples are weighted.
#[derive(Clone, Copy, Debug, PartialEq)]
pub enum Weighting {
    Equal,
    SelfPaced,
}

impl FromStr for Weighting {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s.trim() {
            "equal-weight" | "equal" => Ok(Weighting::Equal),
            "spl" => Ok(Weighting::SelfPaced),
            other => Err(Error::invalid(format!(
                "weighting must be `spl` or `equal-weight`, got `{other}`"
            ))),
        }
    }
}

impl std::fmt::Display for Weighting {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Weighting::Equal => "equal-weight",
            Weighting::SelfPaced => "spl",
        })
    }
}

/// Everything that determines a run.
#[derive(Clone, Debug, PartialEq)]
pub struct RunConfig {
    pub name: String,
    /// Seeds model initialization, batching and label noise.
    pub seed: u64,
    pub corpus_seed: u64,
    pub n_train: usize,
    pub n_test: usize,
    pub phantom: PhantomConfig,

    pub unet: BlockConfig,
    pub s1_lr: f64,
    pub s1_batch: usize,
    pub s1_epochs: usize,
    pub patience: usize,
    /// Side of the square training crops; 0 trains on whole images.
    pub s1_crop: usize,
    /// Stage-1 validation takes one of this many folds of the training scenes.
    pub folds: usize,
    pub prob_threshold: f64,

    pub fpr: FprConfig,
    pub s2_lr: f64,
    pub s2_momentum: f64,
    pub s2_lr_decay: f64,
    pub s2_batch: usize,
    pub s2_epochs: usize,
    pub weighting: Weighting,
    pub spl: SplSchedule,
    /// Equal-weight epochs before self-pacing starts.
    pub spl_warmup: usize,
    pub label_noise: f64,
    pub hard_top_n: usize,
    /// Jittered copies per annotated nodule in the stage-2 training set.
    pub pos_jitter: usize,
    /// Random background patches per training scene.
    pub neg_per_scene: usize,

    pub repeats: usize,
    pub out: PathBuf,
}

impl Default for RunConfig {
    fn default() -> Self {
        Self {
            name: "desk".into(),
            seed: 7,
            corpus_seed: 2024,
            n_train: 200,
            n_test: 100,
            phantom: PhantomConfig {
                height: 64,
                width: 64,
                diameter_max: 12.0,
                vessels: 3,
                ..PhantomConfig::default()
            },
            unet: BlockConfig {
                growth: 4,
                levels: 2,
                base_channels: 4,
                ..BlockConfig::default()
            },
            s1_lr: 3e-3,
            s1_batch: 8,
            s1_epochs: 15,
            patience: 5,
            s1_crop: 32,
            folds: 5,
            prob_threshold: 0.3,
            fpr: FprConfig {
                patch: 32,
                stem_channels: 8,
                growth: 8,
            },
            s2_lr: 0.01,
            s2_momentum: 0.9,
            s2_lr_decay: 0.9,
            s2_batch: 16,
            s2_epochs: 20,
            weighting: Weighting::SelfPaced,
            spl: SplSchedule {
                lambda0: Lambda0::Percentile(70.0),
                gamma: 1.3,
                ..SplSchedule::default()
            },
            spl_warmup: 3,
            label_noise: 0.0,
            hard_top_n: 200,
            pos_jitter: 1,
            neg_per_scene: 2,
            repeats: 3,
            out: PathBuf::from("run"),
        }
    }
}

fn num<T: FromStr>(key: &str, v: &str) -> Result<T> {
    v.parse()
        .map_err(|_| Error::invalid(format!("`{key}`: cannot parse `{v}`")))
}

impl RunConfig {
    fn set(&mut self, key: &str, v: &str) -> Result<()> {
        match key {
            "name" => self.name = v.to_string(),
            "seed" => self.seed = num(key, v)?,
            "corpus_seed" => self.corpus_seed = num(key, v)?,
            "n_train" => self.n_train = num(key, v)?,
            "n_test" => self.n_test = num(key, v)?,
            "image_size" => {
                let s: usize = num(key, v)?;
                self.phantom.height = s;
                self.phantom.width = s;
            }
            "nodules_min" => self.phantom.nodules_min = num(key, v)?,
            "nodules_max" => self.phantom.nodules_max = num(key, v)?,
            "diameter_min" => self.phantom.diameter_min = num(key, v)?,
            "diameter_max" => self.phantom.diameter_max = num(key, v)?,
            "frac_juxta" => self.phantom.frac_juxta = num(key, v)?,
            "frac_spiculated" => self.phantom.frac_spiculated = num(key, v)?,
            "frac_ignore" => self.phantom.frac_ignore = num(key, v)?,
            "vessels" => self.phantom.vessels = num(key, v)?,
            "mimics" => self.phantom.mimics = num(key, v)?,
            "contrast_min" => self.phantom.contrast_min = num(key, v)?,
            "contrast_max" => self.phantom.contrast_max = num(key, v)?,
            "noise" => self.phantom.noise = num(key, v)?,
            "levels" => self.unet.levels = num(key, v)?,
            "base_channels" => self.unet.base_channels = num(key, v)?,
            "growth" => self.unet.growth = num(key, v)?,
            "ddb" => self.unet.ddb_positions = parse_ddb_positions(v)?,
            "s1_lr" => self.s1_lr = num(key, v)?,
            "s1_batch" => self.s1_batch = num(key, v)?,
            "s1_epochs" => self.s1_epochs = num(key, v)?,
            "patience" => self.patience = num(key, v)?,
            "s1_crop" => self.s1_crop = num(key, v)?,
            "folds" => self.folds = num(key, v)?,
            "prob_threshold" => self.prob_threshold = num(key, v)?,
            "patch" => self.fpr.patch = num(key, v)?,
            "fpr_stem" => self.fpr.stem_channels = num(key, v)?,
            "fpr_growth" => self.fpr.growth = num(key, v)?,
            "s2_lr" => self.s2_lr = num(key, v)?,
            "s2_momentum" => self.s2_momentum = num(key, v)?,
            "s2_lr_decay" => self.s2_lr_decay = num(key, v)?,
            "s2_batch" => self.s2_batch = num(key, v)?,
            "s2_epochs" => self.s2_epochs = num(key, v)?,
            "weighting" => self.weighting = v.parse()?,
            "spl_lambda0" => self.spl.lambda0 = v.parse::<Lambda0>()?,
            "spl_gamma" => self.spl.gamma = num(key, v)?,
            "spl_q0" => self.spl.q0 = num(key, v)?,
            "spl_mu" => self.spl.mu = num(key, v)?,
            "spl_q_min" => self.spl.q_min = num(key, v)?,
            "spl_warmup" => self.spl_warmup = num(key, v)?,
            "label_noise" => self.label_noise = num(key, v)?,
            "hard_top_n" => self.hard_top_n = num(key, v)?,
            "pos_jitter" => self.pos_jitter = num(key, v)?,
            "neg_per_scene" => self.neg_per_scene = num(key, v)?,
            "repeats" => self.repeats = num(key, v)?,
            "out" => self.out = PathBuf::from(v),
            _ => return Err(Error::invalid(format!("unknown key `{key}`"))),
        }
        Ok(())
    }

    /// Parse `key = value` lines over the defaults. `#` starts a comment.
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        let mut cfg = RunConfig::default();
        for (i, raw) in text.lines().enumerate() {
            let line = raw.split('#').next().unwrap_or("").trim();
            if line.is_empty() {
                continue;
            }
            let fail = |msg: String| Error::Parse {
                path: path.display().to_string(),
                line: i + 1,
                msg,
            };
            let (key, value) = line
                .split_once('=')
                .ok_or_else(|| fail("expected `key = value`".into()))?;
            cfg.set(key.trim(), value.trim()).map_err(|e| fail(e.to_string()))?;
        }
        cfg.validate().map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: 0,
            msg: e.to_string(),
        })?;
        Ok(cfg)
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::parse(&text, path)
    }

    pub fn validate(&self) -> Result<()> {
        self.phantom.validate()?;
        self.unet.validate()?;
        self.spl.validate()?;
        if self.phantom.height != self.phantom.width {
            return Err(Error::invalid("images must be square"));
        }
        let div = 1 << self.unet.levels;
        if !self.phantom.height.is_multiple_of(div) {
            return Err(Error::invalid(format!("image_size must be divisible by {div}")));
        }
        if self.s1_crop != 0 && (!self.s1_crop.is_multiple_of(div) || self.s1_crop > self.phantom.height) {
            return Err(Error::invalid(format!(
                "s1_crop must be 0 or a multiple of {div} within the image"
            )));
        }
        if self.n_train < self.folds || self.folds < 2 {
            return Err(Error::invalid("need 2 <= folds <= n_train"));
        }
        if self.n_test == 0 {
            return Err(Error::invalid("n_test must be >= 1"));
        }
        if !(self.prob_threshold > 0.0 && self.prob_threshold < 1.0) {
            return Err(Error::invalid("prob_threshold must be in (0, 1)"));
        }
        if !(0.0..0.5).contains(&self.label_noise) {
            return Err(Error::invalid("label_noise must be in [0, 0.5)"));
        }
        if self.s1_batch < 2 || self.s2_batch < 2 {
            return Err(Error::invalid("batch sizes must be >= 2 (batch norm)"));
        }
        if !(self.s1_lr > 0.0 && self.s2_lr > 0.0 && self.s2_lr_decay > 0.0) {
            return Err(Error::invalid("learning rates and decay must be > 0"));
        }
        if self.repeats == 0 {
            return Err(Error::invalid("repeats must be >= 1"));
        }
        Ok(())
    }

    pub fn to_text(&self) -> String {
        let p = &self.phantom;
        let s = &self.spl;
        let mut t = String::new();
        let mut kv = |k: &str, v: &dyn std::fmt::Display| {
            let _ = writeln!(t, "{k} = {v}");
        };
        kv("name", &self.name);
        kv("seed", &self.seed);
        kv("corpus_seed", &self.corpus_seed);
        kv("n_train", &self.n_train);
        kv("n_test", &self.n_test);
        kv("image_size", &p.height);
        kv("nodules_min", &p.nodules_min);
        kv("nodules_max", &p.nodules_max);
        kv("diameter_min", &p.diameter_min);
        kv("diameter_max", &p.diameter_max);
        kv("frac_juxta", &p.frac_juxta);
        kv("frac_spiculated", &p.frac_spiculated);
        kv("frac_ignore", &p.frac_ignore);
        kv("vessels", &p.vessels);
        kv("mimics", &p.mimics);
        kv("contrast_min", &p.contrast_min);
        kv("contrast_max", &p.contrast_max);
        kv("noise", &p.noise);
        kv("levels", &self.unet.levels);
        kv("base_channels", &self.unet.base_channels);
        kv("growth", &self.unet.growth);
        kv("ddb", &ddb_label(&self.unet.ddb_positions));
        kv("s1_lr", &self.s1_lr);
        kv("s1_batch", &self.s1_batch);
        kv("s1_epochs", &self.s1_epochs);
        kv("patience", &self.patience);
        kv("s1_crop", &self.s1_crop);
        kv("folds", &self.folds);
        kv("prob_threshold", &self.prob_threshold);
        kv("patch", &self.fpr.patch);
        kv("fpr_stem", &self.fpr.stem_channels);
        kv("fpr_growth", &self.fpr.growth);
        kv("s2_lr", &self.s2_lr);
        kv("s2_momentum", &self.s2_momentum);
        kv("s2_lr_decay", &self.s2_lr_decay);
        kv("s2_batch", &self.s2_batch);
        kv("s2_epochs", &self.s2_epochs);
        kv("weighting", &self.weighting);
        kv("spl_lambda0", &s.lambda0);
        kv("spl_gamma", &s.gamma);
        kv("spl_q0", &s.q0);
        kv("spl_mu", &s.mu);
        kv("spl_q_min", &s.q_min);
        kv("spl_warmup", &self.spl_warmup);
        kv("label_noise", &self.label_noise);
        kv("hard_top_n", &self.hard_top_n);
        kv("pos_jitter", &self.pos_jitter);
        kv("neg_per_scene", &self.neg_per_scene);
        kv("repeats", &self.repeats);
        kv("out", &self.out.display());
        t
    }

    /// Training scene ids come first in the corpus, test ids after them.
    pub fn train_ids(&self) -> Vec<String> {
        (0..self.n_train).map(crate::phantom::scene_name).collect()
    }

    pub fn test_ids(&self) -> Vec<String> {
        (self.n_train..self.n_train + self.n_test)
            .map(crate::phantom::scene_name)
            .collect()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn text_round_trip() {
        let mut c = RunConfig::default();
        c.unet.ddb_positions = [1, 2].into();
        c.weighting = Weighting::Equal;
        c.spl.lambda0 = Lambda0::Value(1e9);
        let back = RunConfig::parse(&c.to_text(), Path::new("c.cfg")).unwrap();
        assert_eq!(back, c);
    }

    #[test]
    fn comments_and_unknown_keys() {
        let ok = RunConfig::parse("# header\nseed = 3 # trailing\n\n", Path::new("c")).unwrap();
        assert_eq!(ok.seed, 3);
        let err = RunConfig::parse("seed = 3\nsede = 4\n", Path::new("c")).unwrap_err();
        assert!(matches!(err, Error::Parse { line: 2, .. }), "{err}");
        assert!(RunConfig::parse("seed 3", Path::new("c")).is_err());
        assert!(RunConfig::parse("weighting = sometimes", Path::new("c")).is_err());
    }

    #[test]
    fn validation() {
        assert!(RunConfig::parse("image_size = 66", Path::new("c")).is_err());
        assert!(RunConfig::parse("label_noise = 0.7", Path::new("c")).is_err());
        assert!(RunConfig::parse("s1_crop = 30", Path::new("c")).is_err());
    }
}
