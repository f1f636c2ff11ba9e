//! Synthetic lung-field phantoms with easy, juxta-vascular and spiculated
//! nodules, plus patch extraction, fold splitting and on-disk corpora.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::fmt;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};

use crate::error::{Error, Result};
use crate::froc::{read_annotations, write_annotations, NoduleAnnotation};
use crate::tensor::Tensor;

pub const MAGIC: &[u8; 5] = b"PHNT1";
const PLACEMENT_TRIES: usize = 100;
/// Diameters below this are emitted as ignore regions.
pub const TINY_DIAMETER: f64 = 5.0;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub enum Difficulty {
    Easy,
    JuxtaVascular,
    Spiculated,
}

impl Difficulty {
    pub fn is_hard(self) -> bool {
        self != Difficulty::Easy
    }
}

impl fmt::Display for Difficulty {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Difficulty::Easy => "easy",
            Difficulty::JuxtaVascular => "juxta_vascular",
            Difficulty::Spiculated => "spiculated",
        })
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomConfig {
    pub height: usize,
    pub width: usize,
    pub nodules_min: usize,
    pub nodules_max: usize,
    pub diameter_min: f64,
    pub diameter_max: f64,
    pub frac_juxta: f64,
    pub frac_spiculated: f64,
    /// Probability that a nodule is tiny and flagged as an ignore region.
    pub frac_ignore: f64,
    pub vessels: usize,
    /// Vessel cross-sections: round bright spots that are not nodules.
    pub mimics: usize,
    pub contrast_min: f64,
    pub contrast_max: f64,
    pub noise: f64,
}

impl Default for PhantomConfig {
    fn default() -> Self {
        Self {
            height: 128,
            width: 128,
            nodules_min: 1,
            nodules_max: 3,
            diameter_min: 4.0,
            diameter_max: 16.0,
            frac_juxta: 0.25,
            frac_spiculated: 0.25,
            frac_ignore: 0.1,
            vessels: 4,
            mimics: 4,
            contrast_min: 0.3,
            contrast_max: 0.55,
            noise: 0.04,
        }
    }
}

impl PhantomConfig {
    pub fn validate(&self) -> Result<()> {
        if self.height < 64 || self.width < 64 {
            return Err(Error::invalid("phantom images must be at least 64x64"));
        }
        if self.nodules_min > self.nodules_max {
            return Err(Error::invalid("nodules_min exceeds nodules_max"));
        }
        if !(self.diameter_min > 0.0 && self.diameter_min <= self.diameter_max) {
            return Err(Error::invalid("need 0 < diameter_min <= diameter_max"));
        }
        let fracs = [self.frac_juxta, self.frac_spiculated, self.frac_ignore];
        if fracs.iter().any(|f| !(0.0..=1.0).contains(f)) || self.frac_juxta + self.frac_spiculated > 1.0 {
            return Err(Error::invalid(
                "difficulty fractions must lie in [0, 1] and sum to at most 1",
            ));
        }
        if !(0.0 < self.contrast_min && self.contrast_min <= self.contrast_max && self.contrast_max <= 1.0) {
            return Err(Error::invalid("need 0 < contrast_min <= contrast_max <= 1"));
        }
        if !(self.noise >= 0.0) {
            return Err(Error::invalid("noise must be >= 0"));
        }
        Ok(())
    }

    /// Lung-field ellipse as (center y, center x, semi-axis y, semi-axis x).
    pub fn lung_ellipse(&self) -> (f64, f64, f64, f64) {
        let (h, w) = (self.height as f64, self.width as f64);
        ((h - 1.0) / 2.0, (w - 1.0) / 2.0, 0.42 * h, 0.40 * w)
    }

    /// Ellipse membership, with the axes scaled by `shrink`.
    pub fn in_lung(&self, y: f64, x: f64, shrink: f64) -> bool {
        let (cy, cx, ay, ax) = self.lung_ellipse();
        ((y - cy) / (ay * shrink)).powi(2) + ((x - cx) / (ax * shrink)).powi(2) <= 1.0
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct PhantomScene {
    pub id: String,
    /// `[1, H, W]`, values in `[0, 1]`.
    pub image: Tensor,
    pub annotations: Vec<NoduleAnnotation>,
    /// One tag per annotation.
    pub difficulty: Vec<Difficulty>,
    pub seed: u64,
}

impl PhantomScene {
    pub fn height(&self) -> usize {
        self.image.shape()[1]
    }

    pub fn width(&self) -> usize {
        self.image.shape()[2]
    }

    pub fn set_scan_id(&mut self, id: &str) {
        self.id = id.to_string();
        for a in &mut self.annotations {
            a.scan_id = id.to_string();
        }
    }

    pub fn pixel(&self, y: usize, x: usize) -> f64 {
        self.image.data()[y * self.width() + x]
    }

    /// Binary target with a disc per annotated nodule (ignored ones included).
    pub fn nodule_mask(&self) -> Tensor {
        nodule_mask(&self.annotations, self.height(), self.width())
    }
}

pub fn nodule_mask(annos: &[NoduleAnnotation], h: usize, w: usize) -> Tensor {
    let mut m = Tensor::zeros(&[1, h, w]);
    let d = m.data_mut();
    for a in annos {
        let r = a.diameter / 2.0;
        let y0 = (a.center_y - r).floor().max(0.0) as usize;
        let x0 = (a.center_x - r).floor().max(0.0) as usize;
        let y1 = ((a.center_y + r).ceil() as usize).min(h - 1);
        let x1 = ((a.center_x + r).ceil() as usize).min(w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                if a.hit_by(y as f64, x as f64) {
                    d[y * w + x] = 1.0;
                }
            }
        }
    }
    m
}

struct Canvas {
    h: usize,
    w: usize,
    px: Vec<f64>,
}

impl Canvas {
    fn blur(&mut self, passes: usize) {
        for _ in 0..passes {
            let src = self.px.clone();
            for y in 0..self.h {
                for x in 0..self.w {
                    let (mut s, mut n) = (0.0, 0.0);
                    for yy in y.saturating_sub(1)..=(y + 1).min(self.h - 1) {
                        for xx in x.saturating_sub(1)..=(x + 1).min(self.w - 1) {
                            s += src[yy * self.w + xx];
                            n += 1.0;
                        }
                    }
                    self.px[y * self.w + x] = s / n;
                }
            }
        }
    }

    /// Raise pixels towards `value` with a soft disc of the given radius.
    fn stamp_disc(&mut self, cy: f64, cx: f64, radius: f64, value: f64) {
        let reach = radius + 1.0;
        let y0 = (cy - reach).floor().max(0.0) as usize;
        let x0 = (cx - reach).floor().max(0.0) as usize;
        let y1 = ((cy + reach).ceil().max(0.0) as usize).min(self.h - 1);
        let x1 = ((cx + reach).ceil().max(0.0) as usize).min(self.w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let d = (y as f64 - cy).hypot(x as f64 - cx);
                let cover = (radius + 0.5 - d).clamp(0.0, 1.0);
                let p = &mut self.px[y * self.w + x];
                *p = p.max(value * cover + *p * (1.0 - cover));
            }
        }
    }
}

struct Nodule {
    cy: f64,
    cx: f64,
    r0: f64,
    /// Spiculation frequency and phase; `None` for round nodules.
    spikes: Option<(f64, f64)>,
    contrast: f64,
}

impl Nodule {
    fn radius_at(&self, theta: f64) -> f64 {
        match self.spikes {
            Some((k, phi)) => self.r0 * (1.0 + 0.3 * (k * theta + phi).sin()),
            None => self.r0,
        }
    }

    fn paint(&self, c: &mut Canvas) {
        let reach = 1.3 * self.r0 + 3.0;
        let y0 = (self.cy - reach).floor().max(0.0) as usize;
        let x0 = (self.cx - reach).floor().max(0.0) as usize;
        let y1 = ((self.cy + reach).ceil() as usize).min(c.h - 1);
        let x1 = ((self.cx + reach).ceil() as usize).min(c.w - 1);
        for y in y0..=y1 {
            for x in x0..=x1 {
                let (dy, dx) = (y as f64 - self.cy, x as f64 - self.cx);
                let rho = dy.hypot(dx) / self.radius_at(dy.atan2(dx));
                let v = self.contrast * (-1.5 * rho.powi(4)).exp();
                let p = &mut c.px[y * c.w + x];
                *p = p.max(*p + v * (1.0 - *p));
            }
        }
    }
}

fn random_walk_vessel(rng: &mut ChaCha8Rng, config: &PhantomConfig) -> (Vec<(f64, f64)>, f64) {
    let (cy, cx, ay, ax) = config.lung_ellipse();
    let (y, x) = loop {
        let y = cy + rng.gen_range(-ay..ay);
        let x = cx + rng.gen_range(-ax..ax);
        if config.in_lung(y, x, 0.9) {
            break (y, x);
        }
    };
    let width = rng.gen_range(2.0..4.0);
    let steps = rng.gen_range(config.height / 4..config.height / 2);
    let mut heading = rng.gen_range(0.0..2.0 * PI);
    let mut path = vec![(y, x)];
    let (mut y, mut x) = (y, x);
    for _ in 0..steps {
        heading += rng.gen_range(-0.3..0.3);
        let (ny, nx) = (y + heading.sin(), x + heading.cos());
        if !config.in_lung(ny, nx, 0.95) {
            heading += PI / 2.0;
            continue;
        }
        (y, x) = (ny, nx);
        path.push((y, x));
    }
    (path, width)
}

/// Render one scene. Regeneration from the same `(seed, config)` is bit-identical.
pub fn generate_scene(seed: u64, config: &PhantomConfig) -> Result<PhantomScene> {
    config.validate()?;
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let (h, w) = (config.height, config.width);
    let unit = Normal::new(0.0, 1.0).expect("unit normal");

    let mut canvas = Canvas {
        h,
        w,
        px: (0..h * w).map(|_| unit.sample(&mut rng)).collect(),
    };
    canvas.blur(3);
    for y in 0..h {
        for x in 0..w {
            let t = &mut canvas.px[y * w + x];
            let lung = config.in_lung(y as f64, x as f64, 1.0);
            *t = if lung { 0.12 + 0.08 * *t } else { 0.55 + 0.1 * *t };
        }
    }

    let mut vessels = Vec::with_capacity(config.vessels);
    for _ in 0..config.vessels {
        let (path, width) = random_walk_vessel(&mut rng, config);
        let value = rng.gen_range(0.45..0.6);
        for &(y, x) in &path {
            canvas.stamp_disc(y, x, width / 2.0, value);
        }
        vessels.push(path);
    }

    let count = rng.gen_range(config.nodules_min..=config.nodules_max);
    let mut nodules: Vec<Nodule> = Vec::with_capacity(count);
    let mut difficulty = Vec::with_capacity(count);
    let mut ignore = Vec::with_capacity(count);
    for _ in 0..count {
        let tiny = config.diameter_min < TINY_DIAMETER && rng.gen_bool(config.frac_ignore);
        let u: f64 = rng.gen();
        let kind =
            if tiny || u >= config.frac_juxta + config.frac_spiculated || vessels.is_empty() && u < config.frac_juxta {
                Difficulty::Easy
            } else if u < config.frac_juxta {
                Difficulty::JuxtaVascular
            } else {
                Difficulty::Spiculated
            };
        let diameter = if tiny {
            rng.gen_range(config.diameter_min..TINY_DIAMETER)
        } else {
            rng.gen_range(config.diameter_min.max(TINY_DIAMETER.min(config.diameter_max))..=config.diameter_max)
        };
        let r0 = diameter / 2.0;
        let mut placed = None;
        for _ in 0..PLACEMENT_TRIES {
            let (cy, cx) = if kind == Difficulty::JuxtaVascular {
                let path = vessels.choose(&mut rng).expect("vessels present");
                let &(vy, vx) = path.choose(&mut rng).expect("non-empty path");
                let (a, d) = (rng.gen_range(0.0..2.0 * PI), rng.gen_range(0.0..=2.0));
                (vy + d * a.sin(), vx + d * a.cos())
            } else {
                let (ey, ex, ay, ax) = config.lung_ellipse();
                (ey + rng.gen_range(-ay..ay), ex + rng.gen_range(-ax..ax))
            };
            let inside = config.in_lung(cy, cx, 1.0 - (r0 + 1.0) / config.lung_ellipse().3);
            let clear = nodules.iter().all(|n| (n.cy - cy).hypot(n.cx - cx) > n.r0 + r0 + 2.0);
            let isolated = kind == Difficulty::JuxtaVascular
                || vessels
                    .iter()
                    .flatten()
                    .all(|&(vy, vx)| (vy - cy).hypot(vx - cx) > r0 + 1.0);
            if inside && clear && isolated {
                placed = Some((cy, cx));
                break;
            }
        }
        let (cy, cx) = placed.ok_or(Error::Placement { tries: PLACEMENT_TRIES })?;
        let spikes =
            (kind == Difficulty::Spiculated).then(|| (rng.gen_range(5..=9) as f64, rng.gen_range(0.0..2.0 * PI)));
        let contrast = rng.gen_range(config.contrast_min..=config.contrast_max);
        nodules.push(Nodule {
            cy,
            cx,
            r0,
            spikes,
            contrast,
        });
        difficulty.push(kind);
        ignore.push(tiny);
    }
    for _ in 0..config.mimics {
        let radius = rng.gen_range(1.5..3.5);
        let value = rng.gen_range(0.45..0.6);
        for _ in 0..PLACEMENT_TRIES {
            let (ey, ex, ay, ax) = config.lung_ellipse();
            let (y, x) = (ey + rng.gen_range(-ay..ay), ex + rng.gen_range(-ax..ax));
            let clear = nodules
                .iter()
                .all(|n| (n.cy - y).hypot(n.cx - x) > 1.3 * n.r0 + radius + 2.0);
            if config.in_lung(y, x, 0.9) && clear {
                canvas.stamp_disc(y, x, radius, value);
                break;
            }
        }
    }
    for n in &nodules {
        n.paint(&mut canvas);
    }
    if config.noise > 0.0 {
        for p in &mut canvas.px {
            *p += config.noise * unit.sample(&mut rng);
        }
    }
    for p in &mut canvas.px {
        *p = p.clamp(0.0, 1.0);
    }

    let scan_id = format!("{seed:016x}");
    let annotations = nodules
        .iter()
        .zip(&ignore)
        .map(|(n, &ig)| NoduleAnnotation::new(scan_id.as_str(), n.cy, n.cx, 2.0 * n.r0, ig))
        .collect::<Result<Vec<_>>>()?;
    Ok(PhantomScene {
        id: scan_id,
        image: Tensor::new(&[1, h, w], canvas.px)?,
        annotations,
        difficulty,
        seed,
    })
}

/// Crops of `size x size` around each center (rounded), zero-padded outside
/// the image. A crop is labeled 1 iff its center hits a non-ignored nodule.
pub fn extract_patches(scene: &PhantomScene, centers: &[(f64, f64)], size: usize) -> Result<(Tensor, Vec<usize>)> {
    if size == 0 || !size.is_multiple_of(2) {
        return Err(Error::invalid(format!("patch size must be even, got {size}")));
    }
    let (h, w) = (scene.height() as isize, scene.width() as isize);
    let mut data = vec![0.0; centers.len() * size * size];
    let mut labels = Vec::with_capacity(centers.len());
    for (i, &(cy, cx)) in centers.iter().enumerate() {
        if !cy.is_finite() || !cx.is_finite() {
            return Err(Error::invalid("patch center must be finite"));
        }
        let top = cy.round() as isize - (size / 2) as isize;
        let left = cx.round() as isize - (size / 2) as isize;
        let patch = &mut data[i * size * size..(i + 1) * size * size];
        for py in 0..size as isize {
            let y = top + py;
            if !(0..h).contains(&y) {
                continue;
            }
            for px in 0..size as isize {
                let x = left + px;
                if (0..w).contains(&x) {
                    patch[(py * size as isize + px) as usize] = scene.pixel(y as usize, x as usize);
                }
            }
        }
        let positive = scene.annotations.iter().any(|a| !a.ignore && a.hit_by(cy, cx));
        labels.push(usize::from(positive));
    }
    Ok((Tensor::new(&[centers.len(), 1, size, size], data)?, labels))
}

#[derive(Clone, Debug, PartialEq)]
pub struct FoldSplit {
    pub k: usize,
    pub assignment: BTreeMap<String, usize>,
}

impl FoldSplit {
    /// Members of fold `i`, in id order.
    pub fn fold(&self, i: usize) -> Vec<String> {
        self.assignment
            .iter()
            .filter(|(_, &f)| f == i)
            .map(|(s, _)| s.clone())
            .collect()
    }

    pub fn sizes(&self) -> Vec<usize> {
        (0..self.k)
            .map(|i| self.assignment.values().filter(|&&f| f == i).count())
            .collect()
    }
}

/// Seeded shuffle followed by round-robin assignment.
pub fn split_folds(scene_ids: &[String], k: usize, seed: u64) -> Result<FoldSplit> {
    if k < 2 {
        return Err(Error::invalid("need at least two folds"));
    }
    if k > scene_ids.len() {
        return Err(Error::invalid(format!("{k} folds for {} scenes", scene_ids.len())));
    }
    let mut ids = scene_ids.to_vec();
    ids.sort();
    ids.dedup();
    if ids.len() != scene_ids.len() {
        return Err(Error::invalid("duplicate scene ids"));
    }
    ids.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Ok(FoldSplit {
        k,
        assignment: ids.into_iter().enumerate().map(|(i, s)| (s, i % k)).collect(),
    })
}

/// Raw image layout: `PHNT1`, height and width as `u32` LE, then `f64` LE
/// pixels in row-major order.
pub fn write_image(path: &Path, image: &Tensor) -> Result<()> {
    let (h, w) = match image.shape() {
        [1, h, w] | [h, w] => (*h, *w),
        s => return Err(Error::shape("write_image", format!("expected [1,H,W], got {s:?}"))),
    };
    let file = std::fs::File::create(path).map_err(|e| Error::io(path, e))?;
    let mut out = BufWriter::new(file);
    let io = |e| Error::io(path, e);
    out.write_all(MAGIC).map_err(io)?;
    out.write_all(&(h as u32).to_le_bytes()).map_err(io)?;
    out.write_all(&(w as u32).to_le_bytes()).map_err(io)?;
    for v in image.data() {
        out.write_all(&v.to_le_bytes()).map_err(io)?;
    }
    out.flush().map_err(io)
}

pub fn read_image(path: &Path) -> Result<Tensor> {
    let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
    let bad = |msg: &str| Error::Format {
        path: path.to_path_buf(),
        msg: msg.to_string(),
    };
    if bytes.len() < 13 || &bytes[..5] != MAGIC {
        return Err(bad("missing PHNT1 header"));
    }
    let h = u32::from_le_bytes(bytes[5..9].try_into().expect("4 bytes")) as usize;
    let w = u32::from_le_bytes(bytes[9..13].try_into().expect("4 bytes")) as usize;
    let body = &bytes[13..];
    if body.len() != h * w * 8 {
        return Err(bad(&format!("payload of {} bytes for a {h}x{w} image", body.len())));
    }
    let data: Vec<f64> = body
        .chunks_exact(8)
        .map(|c| f64::from_le_bytes(c.try_into().expect("8 bytes")))
        .collect();
    if data.iter().any(|v| !v.is_finite()) {
        return Err(bad("non-finite pixel"));
    }
    Tensor::new(&[1, h, w], data)
}

pub fn scene_name(index: usize) -> String {
    format!("scene_{index:04}")
}

/// Per-scene seed derived from the corpus seed.
pub fn scene_seed(corpus_seed: u64, index: usize) -> u64 {
    corpus_seed ^ index as u64
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct ManifestRow {
    pub scene_id: String,
    pub seed: u64,
    pub easy: usize,
    pub juxta_vascular: usize,
    pub spiculated: usize,
}

pub const MANIFEST_HEADER: &str = "scene_id,seed,easy,juxta_vascular,spiculated";

/// A directory of scenes: `images/<scene>.phnt`, `annotations.csv` and
/// `manifest.csv`.
#[derive(Clone, Debug)]
pub struct Corpus {
    pub dir: PathBuf,
    pub manifest: Vec<ManifestRow>,
    pub annotations: Vec<NoduleAnnotation>,
}

const SCENE_ATTEMPTS: u64 = 8;

/// Scenes `scene_0000..`. A scene whose nodules cannot be placed is redrawn
/// from `scene_seed ^ (attempt << 32)`; the seed used is kept on the scene.
pub fn generate_corpus(n_scenes: usize, seed: u64, config: &PhantomConfig) -> Result<Vec<PhantomScene>> {
    (0..n_scenes)
        .map(|i| {
            let base = scene_seed(seed, i);
            let mut attempt = 0;
            let mut s = loop {
                match generate_scene(base ^ (attempt << 32), config) {
                    Err(Error::Placement { .. }) if attempt + 1 < SCENE_ATTEMPTS => attempt += 1,
                    other => break other?,
                }
            };
            s.set_scan_id(&scene_name(i));
            Ok(s)
        })
        .collect()
}

fn manifest_row(scene_id: &str, scene: &PhantomScene) -> ManifestRow {
    let count = |d| {
        scene
            .difficulty
            .iter()
            .zip(&scene.annotations)
            .filter(|(k, a)| **k == d && !a.ignore)
            .count()
    };
    ManifestRow {
        scene_id: scene_id.to_string(),
        seed: scene.seed,
        easy: count(Difficulty::Easy),
        juxta_vascular: count(Difficulty::JuxtaVascular),
        spiculated: count(Difficulty::Spiculated),
    }
}

pub fn write_corpus(dir: &Path, scenes: &[PhantomScene]) -> Result<Corpus> {
    let images = dir.join("images");
    std::fs::create_dir_all(&images).map_err(|e| Error::io(&images, e))?;
    let mut manifest = Vec::with_capacity(scenes.len());
    let mut annotations = Vec::new();
    let mut text = format!("{MANIFEST_HEADER}\n");
    for (i, s) in scenes.iter().enumerate() {
        let id = scene_name(i);
        write_image(&images.join(format!("{id}.phnt")), &s.image)?;
        let row = manifest_row(&id, s);
        text.push_str(&format!(
            "{},{},{},{},{}\n",
            row.scene_id, row.seed, row.easy, row.juxta_vascular, row.spiculated
        ));
        manifest.push(row);
        annotations.extend(s.annotations.iter().cloned().map(|mut a| {
            a.scan_id = id.clone();
            a
        }));
    }
    let mpath = dir.join("manifest.csv");
    std::fs::write(&mpath, text).map_err(|e| Error::io(&mpath, e))?;
    write_annotations(&dir.join("annotations.csv"), &annotations)?;
    Ok(Corpus {
        dir: dir.to_path_buf(),
        manifest,
        annotations,
    })
}

impl Corpus {
    pub fn open(dir: &Path) -> Result<Self> {
        let mpath = dir.join("manifest.csv");
        let text = std::fs::read_to_string(&mpath).map_err(|e| Error::io(&mpath, e))?;
        let mut lines = text.lines();
        if lines.next() != Some(MANIFEST_HEADER) {
            return Err(Error::Format {
                path: mpath,
                msg: format!("expected header `{MANIFEST_HEADER}`"),
            });
        }
        let mut manifest = Vec::new();
        for (i, line) in lines.enumerate().filter(|(_, l)| !l.trim().is_empty()) {
            let f: Vec<&str> = line.split(',').map(str::trim).collect();
            let parse_err = || Error::Parse {
                path: mpath.display().to_string(),
                line: i + 2,
                msg: "expected scene_id,seed,easy,juxta_vascular,spiculated".into(),
            };
            let [id, seed, e, j, s] = f.as_slice() else {
                return Err(parse_err());
            };
            let n = |v: &str| v.parse::<usize>().map_err(|_| parse_err());
            manifest.push(ManifestRow {
                scene_id: id.to_string(),
                seed: seed.parse().map_err(|_| parse_err())?,
                easy: n(e)?,
                juxta_vascular: n(j)?,
                spiculated: n(s)?,
            });
        }
        let annotations = read_annotations(&dir.join("annotations.csv"))?;
        Ok(Self {
            dir: dir.to_path_buf(),
            manifest,
            annotations,
        })
    }

    pub fn scene_ids(&self) -> Vec<String> {
        self.manifest.iter().map(|r| r.scene_id.clone()).collect()
    }

    pub fn annotations_for(&self, scene_id: &str) -> Vec<NoduleAnnotation> {
        self.annotations
            .iter()
            .filter(|a| a.scan_id == scene_id)
            .cloned()
            .collect()
    }

    pub fn image_path(&self, scene_id: &str) -> PathBuf {
        self.dir.join("images").join(format!("{scene_id}.phnt"))
    }

    /// Load a scene; difficulty tags are not stored on disk and come back as `Easy`.
    pub fn load_scene(&self, scene_id: &str) -> Result<PhantomScene> {
        let row = self
            .manifest
            .iter()
            .find(|r| r.scene_id == scene_id)
            .ok_or_else(|| Error::invalid(format!("unknown scene `{scene_id}`")))?;
        let annotations = self.annotations_for(scene_id);
        Ok(PhantomScene {
            id: scene_id.to_string(),
            image: read_image(&self.image_path(scene_id))?,
            difficulty: vec![Difficulty::Easy; annotations.len()],
            annotations,
            seed: row.seed,
        })
    }
}
