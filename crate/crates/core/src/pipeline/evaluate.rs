use std::collections::HashMap;

use crate::blocks::FprCnn;
use crate::error::{Error, Result};
use crate::froc::{score, CpmReport, DetectionCandidate, NoduleAnnotation};
use crate::params::ParamStore;
use crate::phantom::{extract_patches, PhantomScene};

const RESCORE_CHUNK: usize = 64;

/// Replace each candidate's probability with the classifier's.
pub fn rescore(
    net: &FprCnn,
    store: &ParamStore,
    scenes: &[PhantomScene],
    cands: &[DetectionCandidate],
) -> Result<Vec<DetectionCandidate>> {
    let by_id: HashMap<&str, &PhantomScene> = scenes.iter().map(|s| (s.id.as_str(), s)).collect();
    let mut out = Vec::with_capacity(cands.len());
    for chunk in cands.chunks(RESCORE_CHUNK) {
        let mut patches = Vec::with_capacity(chunk.len());
        for c in chunk {
            let scene = by_id
                .get(c.scan_id.as_str())
                .ok_or_else(|| Error::invalid(format!("candidate for unknown scan `{}`", c.scan_id)))?;
            patches.push(extract_patches(scene, &[(c.center_y, c.center_x)], net.config.patch)?.0);
        }
        let probs = net.predict(store, &crate::tensor::Tensor::stack(&patches)?)?;
        for (c, p) in chunk.iter().zip(probs) {
            out.push(DetectionCandidate {
                probability: p.clamp(0.0, 1.0),
                ..c.clone()
            });
        }
    }
    Ok(out)
}

pub fn scene_annotations(scenes: &[PhantomScene]) -> Vec<NoduleAnnotation> {
    scenes.iter().flat_map(|s| s.annotations.iter().cloned()).collect()
}

/// FROC scoring of candidates over the given scenes.
pub fn score_scenes(cands: &[DetectionCandidate], scenes: &[PhantomScene]) -> Result<CpmReport> {
    score(cands, &scene_annotations(scenes), scenes.len())
}
