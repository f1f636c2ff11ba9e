use std::collections::BTreeSet;
use std::fmt::Write as _;
use std::time::Instant;

use super::config::{RunConfig, Weighting};
use super::{run_from_detector, train_stage1};
use crate::blocks::ddb_label;
use crate::error::Result;
use crate::phantom::PhantomScene;

/// Deformable-block prefixes compared by the ablation.
pub const ABLATION_DDB: [&[usize]; 4] = [&[], &[1], &[1, 2], &[1, 2, 3]];

#[derive(Clone, Debug, PartialEq)]
pub struct AblationCell {
    pub ddb: String,
    pub weighting: Weighting,
    /// One CPM per repeat seed.
    pub cpms: Vec<f64>,
    pub median_cpm: f64,
    /// Trainable parameters of detector plus classifier.
    pub params: usize,
    pub runtime_s: f64,
}

pub fn median(values: &[f64]) -> f64 {
    let mut v = values.to_vec();
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        f64::NAN
    } else if n % 2 == 1 {
        v[n / 2]
    } else {
        (v[n / 2 - 1] + v[n / 2]) / 2.0
    }
}

/// Every DDB prefix crossed with equal and self-paced weighting, over
/// `config.repeats` seeds starting at `config.seed`. The detector of a
/// (DDB, seed) pair is shared by both weightings; its training time is
/// charged to both cells.
pub fn run_ablation(
    config: &RunConfig,
    train: &[PhantomScene],
    test: &[PhantomScene],
    mut progress: impl FnMut(&str),
) -> Result<Vec<AblationCell>> {
    let weightings = [Weighting::Equal, Weighting::SelfPaced];
    let mut cells = Vec::new();
    for ddb in ABLATION_DDB {
        let positions: BTreeSet<usize> = ddb.iter().copied().collect();
        let label = ddb_label(&positions);
        let mut cpms = [Vec::new(), Vec::new()];
        let mut secs = [0.0; 2];
        let mut params = [0; 2];
        for r in 0..config.repeats {
            let mut cfg = config.clone();
            cfg.unet.ddb_positions = positions.clone();
            cfg.seed = config.seed + r as u64;
            let t0 = Instant::now();
            let stage1 = train_stage1(&cfg, train)?;
            let s1_time = t0.elapsed().as_secs_f64();
            for (k, w) in weightings.iter().enumerate() {
                cfg.weighting = *w;
                let t1 = Instant::now();
                let out = run_from_detector(&cfg, stage1.clone(), train, test)?;
                secs[k] += s1_time + t1.elapsed().as_secs_f64();
                params[k] = out.stage1.store.count_trainable() + out.stage2.store.count_trainable();
                progress(&format!("{label} {w} seed {}: CPM {:.4}", cfg.seed, out.report.cpm));
                cpms[k].push(out.report.cpm);
            }
        }
        for (k, w) in weightings.iter().enumerate() {
            cells.push(AblationCell {
                ddb: label.clone(),
                weighting: *w,
                median_cpm: median(&cpms[k]),
                cpms: cpms[k].clone(),
                params: params[k],
                runtime_s: secs[k] / config.repeats as f64,
            });
        }
    }
    Ok(cells)
}

pub const ABLATION_HEADER: &str = "ddb,weighting,median_cpm,cpms,params";

/// Deterministic table; wall-clock times are left to [`ablation_table`].
pub fn ablation_csv(cells: &[AblationCell]) -> String {
    let mut s = format!("{ABLATION_HEADER}\n");
    for c in cells {
        let cpms: Vec<String> = c.cpms.iter().map(f64::to_string).collect();
        let _ = writeln!(
            s,
            "{},{},{},{},{}",
            c.ddb,
            c.weighting,
            c.median_cpm,
            cpms.join(";"),
            c.params
        );
    }
    s
}

pub fn ablation_table(cells: &[AblationCell]) -> String {
    let mut s = String::new();
    let _ = writeln!(
        s,
        "{:<12} {:<13} {:>10} {:>9} {:>12}",
        "Model", "Weighting", "CPM", "Params", "Time/run (s)"
    );
    for c in cells {
        let _ = writeln!(
            s,
            "{:<12} {:<13} {:>10.4} {:>9} {:>12.1}",
            c.ddb,
            c.weighting.to_string(),
            c.median_cpm,
            c.params,
            c.runtime_s
        );
    }
    s
}
