//! LUNA16-style candidate matching, FROC curves and the competition
//! performance metric (mean sensitivity at seven false-positive rates).

use std::cmp::Ordering;
use std::collections::HashSet;
use std::fmt::Write as _;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// False positives per scan at which sensitivity is read off.
pub const FP_RATES: [f64; 7] = [0.125, 0.25, 0.5, 1.0, 2.0, 4.0, 8.0];

#[derive(Clone, Debug, PartialEq)]
pub struct NoduleAnnotation {
    pub scan_id: String,
    pub center_y: f64,
    pub center_x: f64,
    pub diameter: f64,
    /// Counts as neither a hit nor a false positive.
    pub ignore: bool,
}

impl NoduleAnnotation {
    pub fn new(scan_id: impl Into<String>, center_y: f64, center_x: f64, diameter: f64, ignore: bool) -> Result<Self> {
        if !(diameter > 0.0) || !diameter.is_finite() {
            return Err(Error::invalid(format!(
                "annotation diameter must be > 0, got {diameter}"
            )));
        }
        if !center_y.is_finite() || !center_x.is_finite() {
            return Err(Error::invalid("annotation center must be finite"));
        }
        Ok(Self {
            scan_id: scan_id.into(),
            center_y,
            center_x,
            diameter,
            ignore,
        })
    }

    /// Whether a point lies within the annotation radius (boundary included).
    pub fn hit_by(&self, y: f64, x: f64) -> bool {
        self.distance(y, x) <= self.diameter / 2.0
    }

    fn distance(&self, y: f64, x: f64) -> f64 {
        (self.center_y - y).hypot(self.center_x - x)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct DetectionCandidate {
    pub scan_id: String,
    pub center_y: f64,
    pub center_x: f64,
    pub probability: f64,
}

impl DetectionCandidate {
    pub fn new(scan_id: impl Into<String>, center_y: f64, center_x: f64, probability: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&probability) {
            return Err(Error::invalid(format!(
                "candidate probability {probability} outside [0, 1]"
            )));
        }
        if !center_y.is_finite() || !center_x.is_finite() {
            return Err(Error::invalid("candidate center must be finite"));
        }
        Ok(Self {
            scan_id: scan_id.into(),
            center_y,
            center_x,
            probability,
        })
    }
}

/// Probability descending, then scan id, then coordinates.
pub fn candidate_order(a: &DetectionCandidate, b: &DetectionCandidate) -> Ordering {
    b.probability
        .total_cmp(&a.probability)
        .then_with(|| a.scan_id.cmp(&b.scan_id))
        .then_with(|| a.center_y.total_cmp(&b.center_y))
        .then_with(|| a.center_x.total_cmp(&b.center_x))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MatchLabel {
    /// First hit on the annotation with this index.
    Tp(usize),
    Fp,
    Ignored,
}

#[derive(Clone, Debug, PartialEq)]
pub struct MatchResult {
    /// One label per candidate, in input order.
    pub labels: Vec<MatchLabel>,
    /// One flag per annotation, in input order.
    pub hit: Vec<bool>,
}

impl MatchResult {
    /// Number of non-ignored annotations that were hit.
    pub fn nodules_found(&self, annos: &[NoduleAnnotation]) -> usize {
        self.hit.iter().zip(annos).filter(|(h, a)| **h && !a.ignore).count()
    }
}

/// Label each candidate against the annotations of its scan.
///
/// Candidates are visited from most to least probable, so the strongest
/// candidate inside a nodule is its hit and weaker ones are duplicates.
pub fn match_candidates(cands: &[DetectionCandidate], annos: &[NoduleAnnotation]) -> MatchResult {
    let mut order: Vec<usize> = (0..cands.len()).collect();
    order.sort_by(|&a, &b| candidate_order(&cands[a], &cands[b]).then(a.cmp(&b)));

    let mut seen = HashSet::new();
    for c in cands {
        if !seen.insert((
            c.scan_id.as_str(),
            c.center_y.to_bits(),
            c.center_x.to_bits(),
            c.probability.to_bits(),
        )) {
            log::warn!(
                "duplicate candidate {} ({}, {}) p={}",
                c.scan_id,
                c.center_y,
                c.center_x,
                c.probability
            );
        }
    }

    let mut labels = vec![MatchLabel::Fp; cands.len()];
    let mut hit = vec![false; annos.len()];
    for i in order {
        let c = &cands[i];
        let nearest = |want_ignore: bool| {
            annos
                .iter()
                .enumerate()
                .filter(|(_, a)| a.ignore == want_ignore && a.scan_id == c.scan_id && a.hit_by(c.center_y, c.center_x))
                .min_by(|(ia, a), (ib, b)| {
                    a.distance(c.center_y, c.center_x)
                        .total_cmp(&b.distance(c.center_y, c.center_x))
                        .then(ia.cmp(ib))
                })
                .map(|(j, _)| j)
        };
        labels[i] = if let Some(j) = nearest(false) {
            if hit[j] {
                MatchLabel::Ignored
            } else {
                hit[j] = true;
                MatchLabel::Tp(j)
            }
        } else if let Some(j) = nearest(true) {
            hit[j] = true;
            MatchLabel::Ignored
        } else {
            MatchLabel::Fp
        };
    }
    MatchResult { labels, hit }
}

#[derive(Clone, Copy, Debug, PartialEq)]
pub struct OperatingPoint {
    pub fp_per_scan: f64,
    pub sensitivity: f64,
}

/// One operating point per distinct probability among scored candidates.
///
/// A point at threshold `t` counts every non-ignored candidate with
/// probability `>= t`. Both coordinates are non-decreasing along the curve.
pub fn froc_curve(
    cands: &[DetectionCandidate],
    labels: &[MatchLabel],
    n_scans: usize,
    n_nodules: usize,
) -> Result<Vec<OperatingPoint>> {
    if cands.len() != labels.len() {
        return Err(Error::shape("froc_curve", "one label per candidate required"));
    }
    if n_scans == 0 || n_nodules == 0 {
        return Err(Error::invalid("froc_curve needs at least one scan and one nodule"));
    }
    let mut scored: Vec<(&DetectionCandidate, MatchLabel)> = cands
        .iter()
        .zip(labels)
        .filter(|(_, l)| **l != MatchLabel::Ignored)
        .map(|(c, l)| (c, *l))
        .collect();
    scored.sort_by(|a, b| candidate_order(a.0, b.0));

    let mut points = Vec::new();
    let (mut fp, mut tp) = (0usize, 0usize);
    for (k, (c, label)) in scored.iter().enumerate() {
        match label {
            MatchLabel::Tp(_) => tp += 1,
            _ => fp += 1,
        }
        let last_of_tie = scored
            .get(k + 1)
            .is_none_or(|(next, _)| next.probability != c.probability);
        if last_of_tie {
            points.push(OperatingPoint {
                fp_per_scan: fp as f64 / n_scans as f64,
                sensitivity: tp as f64 / n_nodules as f64,
            });
        }
    }
    Ok(points)
}

/// Sensitivity of the last point with `fp_per_scan <= fp_rate`, or 0.
pub fn sensitivity_at(curve: &[OperatingPoint], fp_rate: f64) -> f64 {
    curve
        .iter()
        .take_while(|p| p.fp_per_scan <= fp_rate)
        .last()
        .map_or(0.0, |p| p.sensitivity)
}

#[derive(Clone, Debug, PartialEq)]
pub struct CpmReport {
    pub operating_points: Vec<OperatingPoint>,
    pub sensitivities: [f64; 7],
    pub cpm: f64,
}

pub fn cpm(curve: &[OperatingPoint]) -> CpmReport {
    let sensitivities = FP_RATES.map(|r| sensitivity_at(curve, r));
    CpmReport {
        operating_points: curve.to_vec(),
        sensitivities,
        cpm: cpm_from_sensitivities(&sensitivities),
    }
}

pub fn cpm_from_sensitivities(sensitivities: &[f64; 7]) -> f64 {
    sensitivities.iter().sum::<f64>() / 7.0
}

/// Match, build the curve and score in one call.
///
/// `n_scans` counts every evaluated scan, including scans without candidates.
pub fn score(cands: &[DetectionCandidate], annos: &[NoduleAnnotation], n_scans: usize) -> Result<CpmReport> {
    let n_nodules = annos.iter().filter(|a| !a.ignore).count();
    let m = match_candidates(cands, annos);
    Ok(cpm(&froc_curve(cands, &m.labels, n_scans, n_nodules)?))
}

pub const ANNOTATION_HEADER: [&str; 5] = ["scan_id", "center_y", "center_x", "diameter", "ignore"];
pub const CANDIDATE_HEADER: [&str; 4] = ["scan_id", "center_y", "center_x", "probability"];

#[derive(Serialize, Deserialize)]
struct AnnotationRow {
    scan_id: String,
    center_y: f64,
    center_x: f64,
    diameter: f64,
    ignore: u8,
}

#[derive(Serialize, Deserialize)]
struct CandidateRow {
    scan_id: String,
    center_y: f64,
    center_x: f64,
    probability: f64,
}

fn csv_error(path: &Path, e: csv::Error) -> Error {
    let line = e.position().map_or(0, |p| p.line() as usize);
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}

fn check_header(path: &Path, reader: &mut csv::Reader<std::fs::File>, want: &[&str]) -> Result<()> {
    let header = reader.headers().map_err(|e| csv_error(path, e))?;
    if header.iter().ne(want.iter().copied()) {
        return Err(Error::Format {
            path: path.to_path_buf(),
            msg: format!("expected header `{}`", want.join(",")),
        });
    }
    Ok(())
}

fn open_csv(path: &Path) -> Result<csv::Reader<std::fs::File>> {
    let file = std::fs::File::open(path).map_err(|e| Error::io(path, e))?;
    Ok(csv::ReaderBuilder::new().trim(csv::Trim::All).from_reader(file))
}

fn parse_error(path: &Path, line: usize, e: Error) -> Error {
    Error::Parse {
        path: path.display().to_string(),
        line,
        msg: e.to_string(),
    }
}

pub fn read_annotations(path: &Path) -> Result<Vec<NoduleAnnotation>> {
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &ANNOTATION_HEADER)?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<AnnotationRow>().enumerate() {
        let r = row.map_err(|e| csv_error(path, e))?;
        if r.ignore > 1 {
            return Err(parse_error(path, i + 2, Error::invalid("ignore must be 0 or 1")));
        }
        let a = NoduleAnnotation::new(r.scan_id, r.center_y, r.center_x, r.diameter, r.ignore == 1)
            .map_err(|e| parse_error(path, i + 2, e))?;
        out.push(a);
    }
    Ok(out)
}

pub fn read_candidates(path: &Path) -> Result<Vec<DetectionCandidate>> {
    let mut reader = open_csv(path)?;
    check_header(path, &mut reader, &CANDIDATE_HEADER)?;
    let mut out = Vec::new();
    for (i, row) in reader.deserialize::<CandidateRow>().enumerate() {
        let r = row.map_err(|e| csv_error(path, e))?;
        let c = DetectionCandidate::new(r.scan_id, r.center_y, r.center_x, r.probability)
            .map_err(|e| parse_error(path, i + 2, e))?;
        out.push(c);
    }
    Ok(out)
}

fn write_rows<T: Serialize>(path: &Path, rows: impl IntoIterator<Item = T>, header: &[&str]) -> Result<()> {
    let mut w = csv::WriterBuilder::new()
        .has_headers(false)
        .from_path(path)
        .map_err(|e| csv_error(path, e))?;
    w.write_record(header).map_err(|e| csv_error(path, e))?;
    for r in rows {
        w.serialize(r).map_err(|e| csv_error(path, e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

pub fn write_annotations(path: &Path, annos: &[NoduleAnnotation]) -> Result<()> {
    let rows = annos.iter().map(|a| AnnotationRow {
        scan_id: a.scan_id.clone(),
        center_y: a.center_y,
        center_x: a.center_x,
        diameter: a.diameter,
        ignore: u8::from(a.ignore),
    });
    write_rows(path, rows, &ANNOTATION_HEADER)
}

pub fn write_candidates(path: &Path, cands: &[DetectionCandidate]) -> Result<()> {
    let rows = cands.iter().map(|c| CandidateRow {
        scan_id: c.scan_id.clone(),
        center_y: c.center_y,
        center_x: c.center_x,
        probability: c.probability,
    });
    write_rows(path, rows, &CANDIDATE_HEADER)
}

impl CpmReport {
    /// Report layout:
    ///
    /// ```text
    /// kind,fp_per_scan,sensitivity
    /// point,<fp>,<sens>        one row per operating point
    /// rate,<C>,<sens>          one row per fixed rate in FP_RATES
    /// CPM,<value>
    /// ```
    pub fn to_csv(&self) -> String {
        let mut s = String::from("kind,fp_per_scan,sensitivity\n");
        for p in &self.operating_points {
            let _ = writeln!(s, "point,{},{}", p.fp_per_scan, p.sensitivity);
        }
        for (r, v) in FP_RATES.iter().zip(&self.sensitivities) {
            let _ = writeln!(s, "rate,{r},{v}");
        }
        let _ = writeln!(s, "CPM,{}", self.cpm);
        s
    }

    pub fn from_csv(text: &str, path: &Path) -> Result<Self> {
        let fail = |line: usize, msg: &str| Error::Parse {
            path: path.display().to_string(),
            line,
            msg: msg.to_string(),
        };
        let mut lines = text.lines().enumerate();
        match lines.next() {
            Some((_, "kind,fp_per_scan,sensitivity")) => {}
            _ => return Err(fail(1, "missing report header")),
        }
        let num = |line: usize, s: &str| s.trim().parse::<f64>().map_err(|_| fail(line, "bad number"));
        let mut points = Vec::new();
        let mut rates = Vec::new();
        let mut cpm_value = None;
        for (i, line) in lines {
            let n = i + 1;
            let fields: Vec<&str> = line.split(',').collect();
            match fields.as_slice() {
                ["point", fp, s] => points.push(OperatingPoint {
                    fp_per_scan: num(n, fp)?,
                    sensitivity: num(n, s)?,
                }),
                ["rate", _, s] => rates.push(num(n, s)?),
                ["CPM", v] => cpm_value = Some(num(n, v)?),
                [""] => {}
                _ => return Err(fail(n, "unrecognized report row")),
            }
        }
        let sensitivities: [f64; 7] = rates.try_into().map_err(|_| fail(0, "expected seven rate rows"))?;
        Ok(CpmReport {
            operating_points: points,
            sensitivities,
            cpm: cpm_value.ok_or_else(|| fail(0, "missing CPM row"))?,
        })
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        std::fs::write(path, self.to_csv()).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_csv(&text, path)
    }
}
