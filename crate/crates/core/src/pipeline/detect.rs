use super::stage1::image_batch;
use crate::blocks::UNet;
use crate::error::{Error, Result};
use crate::froc::{candidate_order, match_candidates, DetectionCandidate, MatchLabel};
use crate::params::ParamStore;
use crate::phantom::PhantomScene;
use crate::tensor::Tensor;

/// A 4-connected region of above-threshold pixels.
#[derive(Clone, Debug, PartialEq)]
pub struct Component {
    /// Probability-weighted centroid.
    pub center_y: f64,
    pub center_x: f64,
    pub max_probability: f64,
    pub mean_probability: f64,
    pub pixels: usize,
}

/// Components of `prob > threshold`, in row-major order of their first pixel.
pub fn components(prob: &[f64], h: usize, w: usize, threshold: f64) -> Result<Vec<Component>> {
    if prob.len() != h * w {
        return Err(Error::shape("components", format!("{} values for {h}x{w}", prob.len())));
    }
    if !(threshold > 0.0 && threshold < 1.0) {
        return Err(Error::invalid("threshold must be in (0, 1)"));
    }
    let mut seen = vec![false; h * w];
    let mut out = Vec::new();
    let mut stack = Vec::new();
    for start in 0..h * w {
        if seen[start] || prob[start] <= threshold {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let (mut sw, mut sy, mut sx, mut mx, mut n) = (0.0, 0.0, 0.0, 0.0f64, 0);
        while let Some(i) = stack.pop() {
            let (y, x) = (i / w, i % w);
            let p = prob[i];
            sw += p;
            sy += p * y as f64;
            sx += p * x as f64;
            mx = mx.max(p);
            n += 1;
            let mut visit = |j: usize| {
                if !seen[j] && prob[j] > threshold {
                    seen[j] = true;
                    stack.push(j);
                }
            };
            if y > 0 {
                visit(i - w);
            }
            if y + 1 < h {
                visit(i + w);
            }
            if x > 0 {
                visit(i - 1);
            }
            if x + 1 < w {
                visit(i + 1);
            }
        }
        out.push(Component {
            center_y: sy / sw,
            center_x: sx / sw,
            max_probability: mx,
            mean_probability: sw / n as f64,
            pixels: n,
        });
    }
    Ok(out)
}

/// One candidate per component of a `[1, H, W]` probability map, scored by
/// the component's mean probability.
pub fn candidates_from_map(scan_id: &str, map: &Tensor, threshold: f64) -> Result<Vec<DetectionCandidate>> {
    let (h, w) = match map.shape() {
        [1, h, w] | [1, 1, h, w] => (*h, *w),
        s => {
            return Err(Error::shape(
                "candidates_from_map",
                format!("expected [1,H,W], got {s:?}"),
            ))
        }
    };
    components(map.data(), h, w, threshold)?
        .into_iter()
        .map(|c| DetectionCandidate::new(scan_id, c.center_y, c.center_x, c.mean_probability))
        .collect()
}

const PREDICT_CHUNK: usize = 8;

/// Eval-mode probability maps, one `[1, H, W]` tensor per scene.
pub fn probability_maps(net: &UNet, store: &ParamStore, scenes: &[PhantomScene]) -> Result<Vec<Tensor>> {
    let mut maps = Vec::with_capacity(scenes.len());
    for chunk in scenes.chunks(PREDICT_CHUNK) {
        let images: Vec<&Tensor> = chunk.iter().map(|s| &s.image).collect();
        let probs = net.predict(store, &image_batch(&images)?)?;
        let n = chunk.len();
        for i in 0..n {
            let m = probs.slice_batch(i, i + 1);
            let (_, _, h, w) = m.dims4()?;
            maps.push(m.reshape(&[1, h, w])?);
        }
    }
    Ok(maps)
}

pub fn detect_candidates(
    net: &UNet,
    store: &ParamStore,
    scenes: &[PhantomScene],
    threshold: f64,
) -> Result<Vec<DetectionCandidate>> {
    let maps = probability_maps(net, store, scenes)?;
    let mut out = Vec::new();
    for (scene, map) in scenes.iter().zip(&maps) {
        out.extend(candidates_from_map(&scene.id, map, threshold)?);
    }
    Ok(out)
}

/// The `top_n` most probable false positives among `cands`.
pub fn select_hard_negatives(
    cands: &[DetectionCandidate],
    scenes: &[PhantomScene],
    top_n: usize,
) -> Vec<DetectionCandidate> {
    let annos: Vec<_> = scenes.iter().flat_map(|s| s.annotations.iter().cloned()).collect();
    let m = match_candidates(cands, &annos);
    let mut fps: Vec<DetectionCandidate> = cands
        .iter()
        .zip(&m.labels)
        .filter(|(_, l)| **l == MatchLabel::Fp)
        .map(|(c, _)| c.clone())
        .collect();
    fps.sort_by(candidate_order);
    if fps.len() < top_n {
        log::warn!("only {} false positives available, {top_n} requested", fps.len());
    }
    fps.truncate(top_n);
    fps
}

/// Run the detector and keep its most confident false positives.
pub fn hard_mine(
    net: &UNet,
    store: &ParamStore,
    scenes: &[PhantomScene],
    top_n: usize,
    threshold: f64,
) -> Result<Vec<DetectionCandidate>> {
    let cands = detect_candidates(net, store, scenes, threshold)?;
    Ok(select_hard_negatives(&cands, scenes, top_n))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_map() {
        assert!(components(&[0.0; 16], 4, 4, 0.5).unwrap().is_empty());
    }

    #[test]
    fn blob_centroid() {
        #[rustfmt::skip]
        let p = [
            0.0, 0.0, 0.0, 0.0,
            0.0, 0.6, 0.9, 0.0,
            0.0, 0.0, 0.8, 0.0,
            0.0, 0.0, 0.0, 0.0,
        ];
        let c = components(&p, 4, 4, 0.5).unwrap();
        assert_eq!(c.len(), 1);
        let s = 0.6 + 0.9 + 0.8;
        assert!((c[0].center_y - (0.6 + 0.9 + 2.0 * 0.8) / s).abs() < 1e-12);
        assert!((c[0].center_x - (0.6 + 2.0 * 0.9 + 2.0 * 0.8) / s).abs() < 1e-12);
        assert_eq!(c[0].max_probability, 0.9);
        assert!((c[0].mean_probability - s / 3.0).abs() < 1e-12);
        assert_eq!(c[0].pixels, 3);
    }

    #[test]
    fn capped_blobs_keep_distinct_scores() {
        #[rustfmt::skip]
        let p = [
            0.7, 0.7, 0.0, 0.7,
            0.7, 0.7, 0.0, 0.4,
            0.0, 0.0, 0.0, 0.0,
        ];
        let map = Tensor::new(&[1, 3, 4], p.to_vec()).unwrap();
        let c = candidates_from_map("s", &map, 0.3).unwrap();
        assert_eq!(c.len(), 2);
        assert!(c[0].probability > c[1].probability);
    }

    #[test]
    fn diagonal_neighbours_are_separate() {
        let p = [0.9, 0.0, 0.0, 0.9];
        assert_eq!(components(&p, 2, 2, 0.5).unwrap().len(), 2);
    }
}
