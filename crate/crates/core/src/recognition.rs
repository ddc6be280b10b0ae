//! Landmark recognition on top of retrieval: kNN label voting,
//! non-landmark filtering, confidence grading, and grade-based rescoring.
//!
//! Recognition predicts a label for each test image by voting over its
//! top-5 retrieved neighbors. Two filters demote likely non-landmarks: a
//! detector filter (object classes with score/area conditions) and a
//! similarity filter (too close to seed non-landmark images). Predictions
//! are then graded A1-A4 (retrieval confidence) x B1/B2 (classifier
//! agreement) and rescored so that grade bands order the whole submission:
//! every A1B1 image outranks every A1B2 image, and so on. A final frequency
//! heuristic boosts labels that are common among the most trusted band.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::features::dot;
use crate::store::text::{csv_error, expect_csv_header, open_csv};
use crate::store::{Detection, EmbeddingSet, ImageId, LabelMap};

/// Retrieval-confidence grade, best to worst.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradeA {
    A1,
    A2,
    A3,
    A4,
}

/// Classifier-agreement grade: B1 when an image classifier predicts the
/// same label as retrieval, otherwise (or with no classifier) B2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum GradeB {
    B1,
    B2,
}

/// Combined grade. Ordering is total: A1B1 > A1B2 > A2B1 > ... > A4B2.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub struct Grade {
    pub a: GradeA,
    pub b: GradeB,
}

impl Grade {
    pub const fn new(a: GradeA, b: GradeB) -> Self {
        Grade { a, b }
    }

    /// All grades, best first.
    pub const ALL: [Grade; 8] = [
        Grade::new(GradeA::A1, GradeB::B1),
        Grade::new(GradeA::A1, GradeB::B2),
        Grade::new(GradeA::A2, GradeB::B1),
        Grade::new(GradeA::A2, GradeB::B2),
        Grade::new(GradeA::A3, GradeB::B1),
        Grade::new(GradeA::A3, GradeB::B2),
        Grade::new(GradeA::A4, GradeB::B1),
        Grade::new(GradeA::A4, GradeB::B2),
    ];

    /// Position in the best-first order: A1B1 is 0, A4B2 is 7.
    fn position(self) -> usize {
        let a = match self.a {
            GradeA::A1 => 0,
            GradeA::A2 => 1,
            GradeA::A3 => 2,
            GradeA::A4 => 3,
        };
        let b = match self.b {
            GradeB::B1 => 0,
            GradeB::B2 => 1,
        };
        a * 2 + b
    }

    /// Additive band offset used by [`rescore`]: A1B1 gets 7.0 down to
    /// A4B2 at 0.0, one unit apart.
    pub fn band_offset(self) -> f64 {
        7.0 - self.position() as f64
    }
}

impl PartialOrd for Grade {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Grade {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        // Lower position = better grade = greater in this ordering.
        other.position().cmp(&self.position())
    }
}

impl fmt::Display for Grade {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let a = match self.a {
            GradeA::A1 => "A1",
            GradeA::A2 => "A2",
            GradeA::A3 => "A3",
            GradeA::A4 => "A4",
        };
        let b = match self.b {
            GradeB::B1 => "B1",
            GradeB::B2 => "B2",
        };
        write!(f, "{a}{b}")
    }
}

impl FromStr for Grade {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        let a = match s.get(0..2) {
            Some("A1") => GradeA::A1,
            Some("A2") => GradeA::A2,
            Some("A3") => GradeA::A3,
            Some("A4") => GradeA::A4,
            _ => return Err(Error::validation(format!("bad grade {s:?}"))),
        };
        let b = match s.get(2..) {
            Some("B1") => GradeB::B1,
            Some("B2") => GradeB::B2,
            _ => return Err(Error::validation(format!("bad grade {s:?}"))),
        };
        Ok(Grade::new(a, b))
    }
}

/// One recognition prediction: a label with a finite score, optionally
/// graded.
#[derive(Debug, Clone, PartialEq)]
pub struct Prediction {
    pub image: ImageId,
    pub label: String,
    pub score: f64,
    pub grade: Option<Grade>,
}

impl Prediction {
    pub fn new(image: ImageId, label: impl Into<String>, score: f64) -> Result<Self> {
        let label = label.into();
        if label.is_empty() {
            return Err(Error::validation(format!("empty label for {image}")));
        }
        if !score.is_finite() {
            return Err(Error::validation(format!(
                "non-finite score {score} for {image}"
            )));
        }
        Ok(Prediction {
            image,
            label,
            score,
            grade: None,
        })
    }
}

/// Enforces the voting preconditions shared by [`vote_top5`] and
/// [`grade_a`]: 1..=5 hits, every hit labeled.
fn check_vote_hits<'a>(
    hits: &'a [(ImageId, f32)],
    labels: &'a LabelMap,
) -> Result<Vec<(&'a ImageId, &'a str, f64)>> {
    if hits.is_empty() || hits.len() > 5 {
        return Err(Error::validation(format!(
            "voting needs 1 to 5 hits, got {}",
            hits.len()
        )));
    }
    hits.iter()
        .map(|(id, score)| {
            let label = labels
                .get(id)
                .ok_or_else(|| Error::validation(format!("hit {id} has no label")))?;
            Ok((id, label, f64::from(*score)))
        })
        .collect()
}

/// Majority vote over the top-5 retrieved neighbors.
///
/// The winning label has the highest hit count; count ties go to the label
/// whose best hit scores higher, then to the lexicographically smaller
/// label. The returned score is the best hit score of the winning label.
pub fn vote_top5(hits: &[(ImageId, f32)], labels: &LabelMap) -> Result<(String, f64)> {
    let entries = check_vote_hits(hits, labels)?;
    // label -> (count, best score), in first-appearance order.
    let mut tally: IndexMap<&str, (usize, f64)> = IndexMap::new();
    for (_, label, score) in &entries {
        let e = tally.entry(label).or_insert((0, f64::NEG_INFINITY));
        e.0 += 1;
        if *score > e.1 {
            e.1 = *score;
        }
    }
    let (label, (_, best)) = tally
        .iter()
        .max_by(|(la, (ca, sa)), (lb, (cb, sb))| {
            ca.cmp(cb)
                .then_with(|| sa.partial_cmp(sb).unwrap_or(std::cmp::Ordering::Equal))
                // max_by keeps the *later* of equal elements; order labels so
                // the lexicographically smaller one compares greater.
                .then_with(|| lb.cmp(la))
        })
        .expect("tally nonempty");
    Ok(((*label).to_string(), *best))
}

/// Number of distinct labels among the hits.
pub fn distinct_labels(hits: &[(ImageId, f32)], labels: &LabelMap) -> Result<usize> {
    let entries = check_vote_hits(hits, labels)?;
    let set: BTreeSet<&str> = entries.iter().map(|(_, l, _)| *l).collect();
    Ok(set.len())
}

/// Retrieval-based recognition rule: predict only when the neighborhood is
/// clean — at most two distinct labels and a best score above `threshold`
/// (strict). Returns `None` when the image should not receive a prediction
/// from retrieval alone.
pub fn retrieval_recognize(
    hits: &[(ImageId, f32)],
    labels: &LabelMap,
    threshold: f64,
) -> Result<Option<(String, f64)>> {
    let entries = check_vote_hits(hits, labels)?;
    let distinct: BTreeSet<&str> = entries.iter().map(|(_, l, _)| *l).collect();
    let max_score = entries
        .iter()
        .map(|(_, _, s)| *s)
        .fold(f64::NEG_INFINITY, f64::max);
    if distinct.len() <= 2 && max_score > threshold {
        Ok(Some(vote_top5(hits, labels)?))
    } else {
        Ok(None)
    }
}

/// Detector classes that imply a landmark scene vs. classes too ambiguous
/// to act on. Any class in neither set is treated as non-landmark evidence.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClassPartition {
    pub landmark: BTreeSet<String>,
    pub uncertain: BTreeSet<String>,
}

impl Default for ClassPartition {
    fn default() -> Self {
        let landmark = ["Building", "Tower", "Castle", "Sculpture", "Skyscraper"];
        let uncertain = [
            "House",
            "Tree",
            "Palm tree",
            "Watercraft",
            "Aircraft",
            "Swimming pool",
            "Fountain",
        ];
        ClassPartition {
            landmark: landmark.iter().map(|s| s.to_string()).collect(),
            uncertain: uncertain.iter().map(|s| s.to_string()).collect(),
        }
    }
}

impl ClassPartition {
    pub fn validate(&self) -> Result<()> {
        if let Some(both) = self.landmark.intersection(&self.uncertain).next() {
            return Err(Error::validation(format!(
                "class {both:?} is both landmark and uncertain"
            )));
        }
        Ok(())
    }
}

/// Thresholds for the two non-landmark filters.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FilterParams {
    /// Detector score a non-landmark object must exceed (strict).
    pub det_score_threshold: f32,
    /// Fraction of the image a non-landmark box must cover (strict).
    pub area_ratio_threshold: f32,
    /// Similarity-to-seeds threshold of the second filter stage (strict).
    pub sim_threshold: f32,
    /// How many best seed similarities are considered (their minimum is
    /// compared against `sim_threshold`).
    pub sim_topk: usize,
}

impl Default for FilterParams {
    fn default() -> Self {
        FilterParams {
            det_score_threshold: 0.3,
            area_ratio_threshold: 0.6,
            sim_threshold: 0.85,
            sim_topk: 3,
        }
    }
}

impl FilterParams {
    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("det_score_threshold", self.det_score_threshold),
            ("area_ratio_threshold", self.area_ratio_threshold),
            ("sim_threshold", self.sim_threshold),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} {v} outside [0, 1]")));
            }
        }
        if self.sim_topk == 0 {
            return Err(Error::validation("sim_topk must be at least 1"));
        }
        Ok(())
    }
}

/// Outcome of the detector filter for one image.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DetectorVerdict {
    /// A landmark-class object was detected; never filtered.
    Landmark,
    /// A confident, large, non-landmark object dominates the image.
    NonLandmarkCandidate,
    /// No decisive evidence either way.
    Unknown,
}

/// Applies the detector filter rules to one image's detections.
///
/// Landmark classes win outright (any score). Otherwise an object whose
/// class is neither landmark nor uncertain flags the image as a
/// non-landmark candidate if its score exceeds `det_score_threshold` and
/// its box covers more than `area_ratio_threshold` of the image.
pub fn detector_filter(
    detections: &[Detection],
    partition: &ClassPartition,
    params: &FilterParams,
) -> DetectorVerdict {
    if detections.iter().any(|d| partition.landmark.contains(&d.class)) {
        return DetectorVerdict::Landmark;
    }
    let candidate = detections.iter().any(|d| {
        !partition.uncertain.contains(&d.class)
            && d.score > params.det_score_threshold
            && d.area_ratio() > params.area_ratio_threshold
    });
    if candidate {
        DetectorVerdict::NonLandmarkCandidate
    } else {
        DetectorVerdict::Unknown
    }
}

/// Flags test images that look too similar to known non-landmark seed
/// images: an image is filtered when the minimum of its `sim_topk` best
/// seed similarities exceeds `sim_threshold` (strict).
///
/// Requires at least `sim_topk` seeds — with fewer seeds the "top-k"
/// statistic is undefined, which is reported as an error rather than
/// silently weakening the filter.
pub fn similarity_filter(
    test: &EmbeddingSet,
    seeds: &EmbeddingSet,
    params: &FilterParams,
) -> Result<BTreeSet<ImageId>> {
    params.validate()?;
    if seeds.len() < params.sim_topk {
        return Err(Error::validation(format!(
            "similarity filter needs at least {} seed images, got {}",
            params.sim_topk,
            seeds.len()
        )));
    }
    if test.dim() != seeds.dim() {
        return Err(Error::validation(format!(
            "test dimension {} != seed dimension {}",
            test.dim(),
            seeds.dim()
        )));
    }
    let mut filtered = BTreeSet::new();
    for (id, v) in test.iter() {
        let mut sims: Vec<f32> = seeds.iter().map(|(_, s)| dot(v, s)).collect();
        sims.sort_by(|a, b| b.partial_cmp(a).unwrap_or(std::cmp::Ordering::Equal));
        let kth_best = sims[params.sim_topk - 1];
        if kth_best > params.sim_threshold {
            filtered.insert(id.clone());
        }
    }
    Ok(filtered)
}

/// Retrieval-confidence grade of a top-5 neighborhood.
///
/// With at most two distinct labels: A1 if every hit of the predicted label
/// scores above `a1_min` (strict), else A2 if the best hit of the predicted
/// label scores above `a2_max` (strict), else A3. A4 marks the fully
/// ambiguous case: exactly five hits, five distinct labels. Everything else
/// is A3.
pub fn grade_a(
    hits: &[(ImageId, f32)],
    labels: &LabelMap,
    a1_min: f64,
    a2_max: f64,
) -> Result<GradeA> {
    let entries = check_vote_hits(hits, labels)?;
    let distinct: BTreeSet<&str> = entries.iter().map(|(_, l, _)| *l).collect();
    if distinct.len() <= 2 {
        let (label, _) = vote_top5(hits, labels)?;
        let scores: Vec<f64> = entries
            .iter()
            .filter(|(_, l, _)| *l == label)
            .map(|(_, _, s)| *s)
            .collect();
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min > a1_min {
            Ok(GradeA::A1)
        } else if max > a2_max {
            Ok(GradeA::A2)
        } else {
            Ok(GradeA::A3)
        }
    } else if hits.len() == 5 && distinct.len() == 5 {
        Ok(GradeA::A4)
    } else {
        Ok(GradeA::A3)
    }
}

/// Classifier-agreement grade: B1 only when a classifier prediction exists
/// and names the same label as retrieval.
pub fn grade_b(retrieval: &Prediction, classifier: Option<&Prediction>) -> GradeB {
    match classifier {
        Some(c) if c.label == retrieval.label => GradeB::B1,
        _ => GradeB::B2,
    }
}

/// Shrink factor keeping each rescored band strictly below the next offset.
pub const RESCORE_EPS: f64 = 1e-6;

/// Band offset for images flagged as non-landmarks: one full band below the
/// worst grade band (A4B2 at 0.0), keeping scores finite for serialization.
pub const FILTERED_BAND_OFFSET: f64 = -1.0;

/// Squashes a base similarity score into the band starting at `offset`:
/// `offset + (base + 1) / 2 * (1 - 1e-6)`. The squashed term lies in
/// `[0, 1)`, so bands at consecutive integer offsets never overlap. Base
/// scores are expected in `[-1, 1]`; values outside (f32 rounding overshoot)
/// are clamped.
pub fn rescore_banded(offset: f64, base_score: f64) -> f64 {
    let base = base_score.clamp(-1.0, 1.0);
    offset + (base + 1.0) / 2.0 * (1.0 - RESCORE_EPS)
}

/// Grade-based rescoring: the grade picks the integer band, the base score
/// orders images within the band.
pub fn rescore(grade: Grade, base_score: f64) -> f64 {
    rescore_banded(grade.band_offset(), base_score)
}

/// Occurrences of each label among the given predictions.
pub fn label_counts(predictions: &[Prediction]) -> BTreeMap<String, usize> {
    let mut counts = BTreeMap::new();
    for p in predictions {
        *counts.entry(p.label.clone()).or_insert(0) += 1;
    }
    counts
}

/// Labels appearing strictly more than `min_count` times among the given
/// predictions (callers restrict the input to the trusted A1B1 band).
pub fn frequent_set(predictions: &[Prediction], min_count: usize) -> BTreeSet<String> {
    label_counts(predictions)
        .into_iter()
        .filter(|(_, c)| *c > min_count)
        .map(|(l, _)| l)
        .collect()
}

/// Which graded predictions the frequency boost applies to.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencyMode {
    /// Boost A1/A2 predictions of frequent labels to `8 + c/(c+1)`.
    StageA1A2,
    /// Boost A1-A3 predictions of frequent labels to
    /// `8 + band_offset + c/(c+1)`, preserving band order above everything
    /// unboosted.
    Extended,
}

/// Applies the frequency boost in place. `w` is the frequent-label set,
/// `counts` the label occurrence counts it was derived from (every label in
/// `w` must have a count). Ungraded predictions are never touched.
pub fn frequency_rescore(
    predictions: &mut [Prediction],
    w: &BTreeSet<String>,
    counts: &BTreeMap<String, usize>,
    mode: FrequencyMode,
) -> Result<()> {
    for label in w {
        if !counts.contains_key(label) {
            return Err(Error::validation(format!(
                "frequent label {label:?} has no count"
            )));
        }
    }
    for p in predictions.iter_mut() {
        let Some(grade) = p.grade else { continue };
        if !w.contains(&p.label) {
            continue;
        }
        let c = counts[&p.label] as f64;
        match mode {
            FrequencyMode::StageA1A2 => {
                if matches!(grade.a, GradeA::A1 | GradeA::A2) {
                    p.score = 8.0 + c / (c + 1.0);
                }
            }
            FrequencyMode::Extended => {
                if matches!(grade.a, GradeA::A1 | GradeA::A2 | GradeA::A3) {
                    p.score = 8.0 + grade.band_offset() + c / (c + 1.0);
                }
            }
        }
    }
    Ok(())
}

// ---------------------------------------------------------------------------
// Text formats owned by recognition: classifier predictions, graded
// prediction dumps, the recognition submission, and the filter report.
// ---------------------------------------------------------------------------

/// Loads classifier predictions (`id,label,score`).
pub fn load_classifier_predictions(path: &Path) -> Result<IndexMap<ImageId, Prediction>> {
    let mut reader = open_csv(path)?;
    expect_csv_header(&mut reader, path, &["id", "label", "score"])?;
    let mut map = IndexMap::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let offset = record.position().map_or(0, csv::Position::byte);
        if record.len() != 3 {
            return Err(Error::format(
                path,
                offset,
                format!("expected 3 fields, got {}", record.len()),
            ));
        }
        let id = ImageId::new(&record[0]).map_err(|e| Error::format(path, offset, e.to_string()))?;
        let score: f64 = record[2]
            .parse()
            .map_err(|e| Error::format(path, offset, format!("bad score {:?}: {e}", &record[2])))?;
        let pred = Prediction::new(id.clone(), record[1].to_string(), score)
            .map_err(|e| Error::format(path, offset, e.to_string()))?;
        if map.insert(id.clone(), pred).is_some() {
            return Err(Error::format(path, offset, format!("duplicate image id {id}")));
        }
    }
    Ok(map)
}

/// Saves classifier predictions as `id,label,score`.
pub fn save_classifier_predictions(predictions: &[Prediction], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, &e))?;
    w.write_record(["id", "label", "score"]).map_err(|e| csv_error(path, &e))?;
    for p in predictions {
        w.write_record([p.image.as_str(), &p.label, &p.score.to_string()])
            .map_err(|e| csv_error(path, &e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Saves predictions as `id,label,score,grade` (empty grade column for
/// ungraded entries).
pub fn save_predictions(predictions: &[Prediction], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, &e))?;
    w.write_record(["id", "label", "score", "grade"])
        .map_err(|e| csv_error(path, &e))?;
    for p in predictions {
        let grade = p.grade.map(|g| g.to_string()).unwrap_or_default();
        w.write_record([p.image.as_str(), &p.label, &p.score.to_string(), &grade])
            .map_err(|e| csv_error(path, &e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads predictions written by [`save_predictions`].
pub fn load_predictions(path: &Path) -> Result<Vec<Prediction>> {
    let mut reader = open_csv(path)?;
    expect_csv_header(&mut reader, path, &["id", "label", "score", "grade"])?;
    let mut out = Vec::new();
    let mut seen: BTreeSet<ImageId> = BTreeSet::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let offset = record.position().map_or(0, csv::Position::byte);
        if record.len() != 4 {
            return Err(Error::format(
                path,
                offset,
                format!("expected 4 fields, got {}", record.len()),
            ));
        }
        let id = ImageId::new(&record[0]).map_err(|e| Error::format(path, offset, e.to_string()))?;
        if !seen.insert(id.clone()) {
            return Err(Error::format(path, offset, format!("duplicate image id {id}")));
        }
        let score: f64 = record[2]
            .parse()
            .map_err(|e| Error::format(path, offset, format!("bad score {:?}: {e}", &record[2])))?;
        let mut pred = Prediction::new(id, record[1].to_string(), score)
            .map_err(|e| Error::format(path, offset, e.to_string()))?;
        if !record[3].is_empty() {
            pred.grade = Some(
                record[3]
                    .parse()
                    .map_err(|e: Error| Error::format(path, offset, e.to_string()))?,
            );
        }
        out.push(pred);
    }
    Ok(out)
}

/// Writes the recognition submission: header `id,landmarks`, value
/// `"<label> <score>"` or empty for images without a prediction.
pub fn write_recognition_submission(
    rows: &[(ImageId, Option<(String, f64)>)],
    path: &Path,
) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, &e))?;
    w.write_record(["id", "landmarks"]).map_err(|e| csv_error(path, &e))?;
    for (id, value) in rows {
        let cell = match value {
            Some((label, score)) => format!("{label} {score}"),
            None => String::new(),
        };
        w.write_record([id.as_str(), &cell]).map_err(|e| csv_error(path, &e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Which filter stage removed an image.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum FilterStage {
    Detector,
    Similarity,
}

impl fmt::Display for FilterStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            FilterStage::Detector => f.write_str("detector"),
            FilterStage::Similarity => f.write_str("similarity"),
        }
    }
}

/// One row of the filter report.
#[derive(Debug, Clone, PartialEq)]
pub struct FilterRecord {
    pub id: ImageId,
    pub stage: FilterStage,
    pub reason: String,
}

/// Writes the filter report (`id,stage,reason`).
pub fn write_filter_report(records: &[FilterRecord], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, &e))?;
    w.write_record(["id", "stage", "reason"]).map_err(|e| csv_error(path, &e))?;
    for r in records {
        w.write_record([r.id.as_str(), &r.stage.to_string(), &r.reason])
            .map_err(|e| csv_error(path, &e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads a filter report written by [`write_filter_report`].
pub fn load_filter_report(path: &Path) -> Result<Vec<FilterRecord>> {
    let mut reader = open_csv(path)?;
    expect_csv_header(&mut reader, path, &["id", "stage", "reason"])?;
    let mut out = Vec::new();
    for record in reader.records() {
        let record = record.map_err(|e| csv_error(path, &e))?;
        let offset = record.position().map_or(0, csv::Position::byte);
        if record.len() != 3 {
            return Err(Error::format(
                path,
                offset,
                format!("expected 3 fields, got {}", record.len()),
            ));
        }
        let id = ImageId::new(&record[0]).map_err(|e| Error::format(path, offset, e.to_string()))?;
        let stage = match &record[1] {
            "detector" => FilterStage::Detector,
            "similarity" => FilterStage::Similarity,
            other => {
                return Err(Error::format(path, offset, format!("unknown stage {other:?}")))
            }
        };
        out.push(FilterRecord {
            id,
            stage,
            reason: record[2].to_string(),
        });
    }
    Ok(out)
}
