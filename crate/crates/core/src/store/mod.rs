//! Data model and persistence for descriptor stores, labels, and detections.
//!
//! Two binary container formats live here: `EMB1` holds one fixed-dimension
//! global descriptor per image, `LOC1` holds a variable-length sequence of
//! local descriptors per image. Both are little-endian, preserve entry order
//! exactly, and round-trip bit-for-bit (see `docs/formats.md` for the byte
//! layouts). Text-side inputs are the labels CSV (`id,landmark_id`) and the
//! detections JSONL produced by an object detector.

mod binary;
pub(crate) mod text;
pub(crate) mod wire;

pub use text::{load_detections, load_labels, save_detections, save_labels};

use std::fmt;

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};

/// Identifier of a single image.
///
/// Nonempty, contains no whitespace, and unique within any one collection.
/// Ordering is plain lexicographic byte order; every ranking in the crate
/// breaks score ties by ascending id, so this ordering is load-bearing.
#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct ImageId(String);

impl ImageId {
    pub fn new(id: impl Into<String>) -> Result<Self> {
        let id = id.into();
        if id.is_empty() {
            return Err(Error::validation("image id must be nonempty"));
        }
        if id.chars().any(char::is_whitespace) {
            return Err(Error::validation(format!(
                "image id {id:?} must not contain whitespace"
            )));
        }
        Ok(ImageId(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for ImageId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for ImageId {
    type Error = Error;

    fn try_from(value: String) -> Result<Self> {
        ImageId::new(value)
    }
}

impl From<ImageId> for String {
    fn from(id: ImageId) -> String {
        id.0
    }
}

/// A set of fixed-dimension global descriptors, one per image.
///
/// Entry order is insertion order and survives save/load unchanged; all
/// values are finite and all ids unique. `dim` is fixed at construction and
/// may not be zero.
#[derive(Debug, Clone, PartialEq)]
pub struct EmbeddingSet {
    dim: usize,
    entries: IndexMap<ImageId, Vec<f32>>,
}

impl EmbeddingSet {
    /// Creates an empty set of `dim`-dimensional descriptors.
    ///
    /// # Panics
    /// Panics if `dim` is zero; a zero-dimensional descriptor store is a
    /// programming error, not a data error.
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "descriptor dimension must be positive");
        EmbeddingSet {
            dim,
            entries: IndexMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts a descriptor, rejecting wrong dimension, non-finite values,
    /// and duplicate ids.
    pub fn insert(&mut self, id: ImageId, values: Vec<f32>) -> Result<()> {
        if values.len() != self.dim {
            return Err(Error::validation(format!(
                "descriptor for {id} has dimension {}, set dimension is {}",
                values.len(),
                self.dim
            )));
        }
        if let Some(i) = values.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "descriptor for {id} has non-finite value at component {i}"
            )));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::validation(format!("duplicate image id {id}")));
        }
        self.entries.insert(id, values);
        Ok(())
    }

    pub fn get(&self, id: &ImageId) -> Option<&[f32]> {
        self.entries.get(id).map(Vec::as_slice)
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn get_index(&self, index: usize) -> Option<(&ImageId, &[f32])> {
        self.entries
            .get_index(index)
            .map(|(id, v)| (id, v.as_slice()))
    }

    pub fn ids(&self) -> impl Iterator<Item = &ImageId> + '_ {
        self.entries.keys()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, &[f32])> + '_ {
        self.entries.iter().map(|(id, v)| (id, v.as_slice()))
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        binary::save_embeddings(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        binary::load_embeddings(path)
    }
}

/// A set of per-image local descriptor sequences.
///
/// Every local descriptor in the set shares one dimension; an image may have
/// zero points. Points are stored flattened per image, in order.
#[derive(Debug, Clone, PartialEq)]
pub struct LocalDescriptorSet {
    dim: usize,
    entries: IndexMap<ImageId, Vec<f32>>,
}

impl LocalDescriptorSet {
    /// Creates an empty set of `dim`-dimensional local descriptors.
    ///
    /// # Panics
    /// Panics if `dim` is zero.
    pub fn new(dim: usize) -> Self {
        assert!(dim > 0, "descriptor dimension must be positive");
        LocalDescriptorSet {
            dim,
            entries: IndexMap::new(),
        }
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of images (not points).
    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    /// Inserts the flattened points for one image (`flat.len()` must be a
    /// multiple of the set dimension).
    pub fn insert(&mut self, id: ImageId, flat: Vec<f32>) -> Result<()> {
        if !flat.len().is_multiple_of(self.dim) {
            return Err(Error::validation(format!(
                "local descriptors for {id} have {} values, not a multiple of dimension {}",
                flat.len(),
                self.dim
            )));
        }
        if let Some(i) = flat.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "local descriptors for {id} have a non-finite value at component {i}"
            )));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::validation(format!("duplicate image id {id}")));
        }
        self.entries.insert(id, flat);
        Ok(())
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.entries.contains_key(id)
    }

    /// Number of points stored for `id` (zero if the image is absent).
    pub fn point_count(&self, id: &ImageId) -> usize {
        self.entries.get(id).map_or(0, |f| f.len() / self.dim)
    }

    /// Iterates the points of one image, in stored order.
    pub fn points(&self, id: &ImageId) -> impl Iterator<Item = &[f32]> + '_ {
        self.entries
            .get(id)
            .map(|f| f.chunks_exact(self.dim))
            .into_iter()
            .flatten()
    }

    pub fn ids(&self) -> impl Iterator<Item = &ImageId> + '_ {
        self.entries.keys()
    }

    /// Iterates `(id, flattened points)` in stored order.
    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, &[f32])> + '_ {
        self.entries.iter().map(|(id, v)| (id, v.as_slice()))
    }

    /// Total number of points across all images.
    pub fn total_points(&self) -> usize {
        self.entries.values().map(|f| f.len() / self.dim).sum()
    }

    pub fn save(&self, path: &std::path::Path) -> Result<()> {
        binary::save_local_descriptors(self, path)
    }

    pub fn load(path: &std::path::Path) -> Result<Self> {
        binary::load_local_descriptors(path)
    }
}

/// Image id to landmark label, insertion-ordered.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct LabelMap {
    entries: IndexMap<ImageId, String>,
}

impl LabelMap {
    pub fn new() -> Self {
        LabelMap::default()
    }

    /// Inserts a label, rejecting duplicate ids and empty labels.
    pub fn insert(&mut self, id: ImageId, label: impl Into<String>) -> Result<()> {
        let label = label.into();
        if label.is_empty() {
            return Err(Error::validation(format!("empty label for image {id}")));
        }
        if self.entries.contains_key(&id) {
            return Err(Error::validation(format!("duplicate image id {id}")));
        }
        self.entries.insert(id, label);
        Ok(())
    }

    pub fn get(&self, id: &ImageId) -> Option<&str> {
        self.entries.get(id).map(String::as_str)
    }

    pub fn contains(&self, id: &ImageId) -> bool {
        self.entries.contains_key(id)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, &str)> + '_ {
        self.entries.iter().map(|(id, l)| (id, l.as_str()))
    }
}

/// One detected object in an image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Detection {
    /// Detector class name, e.g. "Building" or "Car".
    pub class: String,
    /// Detector confidence in `[0, 1]`.
    pub score: f32,
    /// Normalized box `[x0, y0, x1, y1]`, each coordinate in `[0, 1]`,
    /// with `x0 <= x1` and `y0 <= y1`.
    #[serde(rename = "box")]
    pub bbox: [f32; 4],
}

impl Detection {
    /// Checks the score/box invariants; `context` names the offending image
    /// in error messages.
    pub fn validate(&self, context: &str) -> Result<()> {
        if !self.score.is_finite() || !(0.0..=1.0).contains(&self.score) {
            return Err(Error::validation(format!(
                "detection for {context}: score {} outside [0, 1]",
                self.score
            )));
        }
        let [x0, y0, x1, y1] = self.bbox;
        for c in self.bbox {
            if !c.is_finite() || !(0.0..=1.0).contains(&c) {
                return Err(Error::validation(format!(
                    "detection for {context}: box coordinate {c} outside [0, 1]"
                )));
            }
        }
        if x0 > x1 || y0 > y1 {
            return Err(Error::validation(format!(
                "detection for {context}: degenerate box [{x0}, {y0}, {x1}, {y1}]"
            )));
        }
        Ok(())
    }

    /// Fraction of the image area covered by the box.
    pub fn area_ratio(&self) -> f32 {
        let [x0, y0, x1, y1] = self.bbox;
        (x1 - x0) * (y1 - y0)
    }
}

/// Per-image detector output, insertion-ordered.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct DetectionMap {
    entries: IndexMap<ImageId, Vec<Detection>>,
}

impl DetectionMap {
    pub fn new() -> Self {
        DetectionMap::default()
    }

    /// Inserts the detections of one image after validating each box.
    pub fn insert(&mut self, id: ImageId, objects: Vec<Detection>) -> Result<()> {
        for d in &objects {
            d.validate(id.as_str())?;
        }
        if self.entries.contains_key(&id) {
            return Err(Error::validation(format!("duplicate image id {id}")));
        }
        self.entries.insert(id, objects);
        Ok(())
    }

    /// Detections for `id`; an absent image yields an empty slice.
    pub fn get(&self, id: &ImageId) -> &[Detection] {
        self.entries.get(id).map_or(&[], Vec::as_slice)
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, &[Detection])> + '_ {
        self.entries.iter().map(|(id, v)| (id, v.as_slice()))
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn image_id_rejects_empty_and_whitespace() {
        assert!(ImageId::new("abc123").is_ok());
        assert!(ImageId::new("").is_err());
        assert!(ImageId::new("a b").is_err());
        assert!(ImageId::new("a\tb").is_err());
        assert!(ImageId::new("a\n").is_err());
    }

    #[test]
    fn embedding_set_enforces_dimension_and_uniqueness() {
        let mut set = EmbeddingSet::new(2);
        set.insert(ImageId::new("a").unwrap(), vec![1.0, 0.0]).unwrap();
        assert!(set.insert(ImageId::new("b").unwrap(), vec![1.0]).is_err());
        assert!(set
            .insert(ImageId::new("a").unwrap(), vec![0.0, 1.0])
            .is_err());
        assert!(set
            .insert(ImageId::new("c").unwrap(), vec![f32::NAN, 0.0])
            .is_err());
        assert_eq!(set.len(), 1);
        assert_eq!(set.get(&ImageId::new("a").unwrap()), Some(&[1.0, 0.0][..]));
    }

    #[test]
    fn embedding_set_preserves_insertion_order() {
        let mut set = EmbeddingSet::new(1);
        for name in ["z", "a", "m"] {
            set.insert(ImageId::new(name).unwrap(), vec![0.5]).unwrap();
        }
        let ids: Vec<&str> = set.ids().map(ImageId::as_str).collect();
        assert_eq!(ids, vec!["z", "a", "m"]);
    }

    #[test]
    fn local_descriptor_set_counts_points() {
        let mut set = LocalDescriptorSet::new(2);
        let a = ImageId::new("a").unwrap();
        let b = ImageId::new("b").unwrap();
        set.insert(a.clone(), vec![1.0, 0.0, 0.0, 1.0, 0.5, 0.5])
            .unwrap();
        set.insert(b.clone(), vec![]).unwrap();
        assert_eq!(set.point_count(&a), 3);
        assert_eq!(set.point_count(&b), 0);
        assert_eq!(set.total_points(), 3);
        let pts: Vec<&[f32]> = set.points(&a).collect();
        assert_eq!(pts[1], &[0.0, 1.0]);
        // Ragged input (not a multiple of dim) is rejected.
        assert!(set
            .insert(ImageId::new("c").unwrap(), vec![1.0, 2.0, 3.0])
            .is_err());
    }

    #[test]
    fn detection_validation() {
        let ok = Detection {
            class: "Building".into(),
            score: 0.9,
            bbox: [0.1, 0.1, 0.9, 0.8],
        };
        assert!(ok.validate("img").is_ok());
        assert!((ok.area_ratio() - 0.8 * 0.7).abs() < 1e-6);

        let inverted = Detection {
            bbox: [0.5, 0.5, 0.2, 0.9],
            ..ok.clone()
        };
        let err = inverted.validate("img42").unwrap_err();
        assert!(err.to_string().contains("img42"));

        let bad_score = Detection {
            score: 1.5,
            ..ok.clone()
        };
        assert!(bad_score.validate("img").is_err());

        let bad_coord = Detection {
            bbox: [-0.1, 0.0, 0.5, 0.5],
            ..ok
        };
        assert!(bad_coord.validate("img").is_err());
    }

    #[test]
    fn detection_map_get_missing_is_empty() {
        let map = DetectionMap::new();
        assert!(map.get(&ImageId::new("nope").unwrap()).is_empty());
    }

    #[test]
    fn label_map_rejects_duplicates() {
        let mut map = LabelMap::new();
        map.insert(ImageId::new("a").unwrap(), "7").unwrap();
        assert!(map.insert(ImageId::new("a").unwrap(), "8").is_err());
        assert_eq!(map.get(&ImageId::new("a").unwrap()), Some("7"));
    }
}
