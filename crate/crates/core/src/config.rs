//! Pipeline configuration: one JSON document describing inputs, stage
//! toggles and thresholds.
//!
//! Every numeric default mirrors the production constants baked into the
//! stage modules (PCA to 512 dims, 512 IVF centers with 20 probes,
//! neighbor depth 300, expansion schedules 10/20 and 3/6, recognition
//! thresholds 0.85/0.9, filter thresholds 0.3/0.6, vote over 5
//! neighbors). A run writes its effective config next to its outputs, and
//! a resumed run refuses to proceed if that snapshot differs.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::recognition::{ClassPartition, FilterParams, FrequencyMode};
use crate::rerank::RerankParams;

/// Dimensionality reduction applied to the concatenated descriptors.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PcaConfig {
    pub enabled: bool,
    pub out_dim: usize,
    pub whiten: bool,
}

impl Default for PcaConfig {
    fn default() -> Self {
        PcaConfig { enabled: true, out_dim: 512, whiten: true }
    }
}

/// Global-descriptor index used for every neighbor search.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct IvfConfig {
    /// Bypass the index and scan the whole gallery.
    pub exact: bool,
    pub centers: usize,
    pub nprobe: usize,
    pub max_iters: usize,
}

impl Default for IvfConfig {
    fn default() -> Self {
        IvfConfig { exact: false, centers: 512, nprobe: 20, max_iters: 25 }
    }
}

/// Which verification signal marks a neighbor as trusted.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VerifierKind {
    /// No verification: nothing is trusted, expansion stays at its base
    /// schedule length.
    None,
    /// Same gallery label on both sides.
    Labels,
    /// Local-descriptor match count at least `min_matches`.
    Local,
    /// Either signal; requested signals whose inputs are missing are
    /// dropped.
    LabelsOrLocal,
}

/// Expansion and reranking stage.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RerankConfig {
    pub dba: bool,
    pub qe: bool,
    /// Neighbors fetched per expansion and verified per final list.
    pub depth: usize,
    pub dba_base: usize,
    pub dba_cap: usize,
    pub qe_base: usize,
    pub qe_cap: usize,
    /// Give the expanded image weight 1.0 outside the schedule instead of
    /// occupying the first slot.
    pub self_outside: bool,
    pub verifier: VerifierKind,
    /// Local matches needed to call a pair verified.
    pub min_matches: u32,
    /// Similarity floor for counting one local-descriptor match.
    pub local_sim_threshold: f32,
    /// k-means centers of the local-descriptor index.
    pub local_centers: usize,
    pub local_nprobe: usize,
    pub local_max_iters: usize,
    /// Stable-partition gallery images sharing the query's predicted label
    /// to the front of the final ranking.
    pub category_promote: bool,
}

impl Default for RerankConfig {
    fn default() -> Self {
        RerankConfig {
            dba: true,
            qe: true,
            depth: 300,
            dba_base: 10,
            dba_cap: 20,
            qe_base: 3,
            qe_cap: 6,
            self_outside: false,
            verifier: VerifierKind::LabelsOrLocal,
            min_matches: 10,
            local_sim_threshold: 0.85,
            local_centers: 64,
            local_nprobe: 8,
            local_max_iters: 15,
            category_promote: true,
        }
    }
}

impl RerankConfig {
    pub fn to_params(&self) -> RerankParams {
        RerankParams {
            neighbor_depth: self.depth,
            dba_base: self.dba_base,
            dba_cap: self.dba_cap,
            qe_base: self.qe_base,
            qe_cap: self.qe_cap,
            self_outside: self.self_outside,
        }
    }
}

/// Frequency-heuristic setting of the recognition arm.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FrequencySetting {
    Off,
    StageA1A2,
    Extended,
}

impl FrequencySetting {
    pub fn mode(self) -> Option<FrequencyMode> {
        match self {
            FrequencySetting::Off => None,
            FrequencySetting::StageA1A2 => Some(FrequencyMode::StageA1A2),
            FrequencySetting::Extended => Some(FrequencyMode::Extended),
        }
    }
}

/// Recognition arm: voting, grading, rescoring.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct RecognitionConfig {
    pub enabled: bool,
    /// Neighbors voted over (at most 5).
    pub vote_k: usize,
    /// Best-hit score a neighborhood must exceed before retrieval predicts.
    pub retrieval_threshold: f64,
    /// A1 needs every predicted-label hit above this.
    pub a1_min_score: f64,
    /// A2 needs the best predicted-label hit above this.
    pub a2_max_score: f64,
    pub frequency: FrequencySetting,
    /// A label must appear strictly more often than this in the top band
    /// to be boosted.
    pub frequency_min_count: usize,
}

impl Default for RecognitionConfig {
    fn default() -> Self {
        RecognitionConfig {
            enabled: true,
            vote_k: 5,
            retrieval_threshold: 0.85,
            a1_min_score: 0.9,
            a2_max_score: 0.85,
            frequency: FrequencySetting::StageA1A2,
            frequency_min_count: 5,
        }
    }
}

/// Non-landmark filtering.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct FilterConfig {
    pub enabled: bool,
    pub det_score_threshold: f32,
    pub area_ratio_threshold: f32,
    pub sim_threshold: f32,
    pub sim_topk: usize,
    pub landmark_classes: Vec<String>,
    pub uncertain_classes: Vec<String>,
}

impl Default for FilterConfig {
    fn default() -> Self {
        let partition = ClassPartition::default();
        FilterConfig {
            enabled: true,
            det_score_threshold: 0.3,
            area_ratio_threshold: 0.6,
            sim_threshold: 0.85,
            sim_topk: 3,
            landmark_classes: partition.landmark.into_iter().collect(),
            uncertain_classes: partition.uncertain.into_iter().collect(),
        }
    }
}

impl FilterConfig {
    pub fn to_params(&self) -> FilterParams {
        FilterParams {
            det_score_threshold: self.det_score_threshold,
            area_ratio_threshold: self.area_ratio_threshold,
            sim_threshold: self.sim_threshold,
            sim_topk: self.sim_topk,
        }
    }

    pub fn to_partition(&self) -> ClassPartition {
        ClassPartition {
            landmark: self.landmark_classes.iter().cloned().collect(),
            uncertain: self.uncertain_classes.iter().cloned().collect(),
        }
    }
}

/// The whole run: inputs, outputs, stage knobs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct PipelineConfig {
    /// One embedding file per model, gallery side. Concatenated in order.
    pub gallery_embeddings: Vec<PathBuf>,
    /// One embedding file per model, query side (same order and count).
    pub query_embeddings: Vec<PathBuf>,
    /// One embedding file per model of known non-landmark seed images
    /// (similarity filter); empty disables that filter stage.
    pub seed_embeddings: Vec<PathBuf>,
    pub gallery_locals: Option<PathBuf>,
    pub query_locals: Option<PathBuf>,
    /// Gallery labels CSV; required for the recognition arm.
    pub labels: Option<PathBuf>,
    /// Query detections JSONL (detector filter).
    pub detections: Option<PathBuf>,
    /// Query classifier predictions CSV (B1/B2 grading).
    pub classifier: Option<PathBuf>,
    pub truth_recognition: Option<PathBuf>,
    pub truth_retrieval: Option<PathBuf>,
    /// Every stage artifact lands here.
    pub out_dir: PathBuf,
    pub pca: PcaConfig,
    pub ivf: IvfConfig,
    pub rerank: RerankConfig,
    pub recognition: RecognitionConfig,
    pub filter: FilterConfig,
    /// Gallery ids per row of the retrieval submission.
    pub submission_k: usize,
    pub seed: u64,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            gallery_embeddings: Vec::new(),
            query_embeddings: Vec::new(),
            seed_embeddings: Vec::new(),
            gallery_locals: None,
            query_locals: None,
            labels: None,
            detections: None,
            classifier: None,
            truth_recognition: None,
            truth_retrieval: None,
            out_dir: PathBuf::from("out"),
            pca: PcaConfig::default(),
            ivf: IvfConfig::default(),
            rerank: RerankConfig::default(),
            recognition: RecognitionConfig::default(),
            filter: FilterConfig::default(),
            submission_k: 100,
            seed: 42,
        }
    }
}

impl PipelineConfig {
    /// Checks internal consistency. File existence is checked when stages
    /// open their inputs, not here.
    pub fn validate(&self) -> Result<()> {
        if self.gallery_embeddings.is_empty() {
            return Err(Error::validation("config needs at least one gallery embedding file"));
        }
        if self.query_embeddings.is_empty() {
            return Err(Error::validation("config needs at least one query embedding file"));
        }
        if self.gallery_embeddings.len() != self.query_embeddings.len() {
            return Err(Error::validation(format!(
                "{} gallery embedding files vs {} query embedding files; \
                 each model needs both sides",
                self.gallery_embeddings.len(),
                self.query_embeddings.len()
            )));
        }
        if !self.seed_embeddings.is_empty()
            && self.seed_embeddings.len() != self.gallery_embeddings.len()
        {
            return Err(Error::validation(format!(
                "{} seed embedding files vs {} models",
                self.seed_embeddings.len(),
                self.gallery_embeddings.len()
            )));
        }
        if self.out_dir.as_os_str().is_empty() {
            return Err(Error::validation("out_dir must not be empty"));
        }
        if self.pca.enabled && self.pca.out_dim == 0 {
            return Err(Error::validation("pca.out_dim must be positive"));
        }
        if !self.ivf.exact {
            if self.ivf.centers == 0 || self.ivf.max_iters == 0 {
                return Err(Error::validation("ivf.centers and ivf.max_iters must be positive"));
            }
            if self.ivf.nprobe == 0 || self.ivf.nprobe > self.ivf.centers {
                return Err(Error::validation(format!(
                    "ivf.nprobe {} outside 1..={}",
                    self.ivf.nprobe, self.ivf.centers
                )));
            }
        }
        self.rerank.to_params().validate()?;
        if self.rerank.local_centers == 0
            || self.rerank.local_nprobe == 0
            || self.rerank.local_max_iters == 0
        {
            return Err(Error::validation(
                "rerank.local_centers, local_nprobe and local_max_iters must be positive",
            ));
        }
        if !(0.0..=1.0).contains(&self.rerank.local_sim_threshold) {
            return Err(Error::validation(format!(
                "rerank.local_sim_threshold {} outside [0, 1]",
                self.rerank.local_sim_threshold
            )));
        }
        if self.rerank.verifier == VerifierKind::Local
            && (self.gallery_locals.is_none() || self.query_locals.is_none())
        {
            return Err(Error::validation(
                "verifier \"local\" needs gallery_locals and query_locals",
            ));
        }
        if self.recognition.enabled {
            if self.labels.is_none() {
                return Err(Error::validation("recognition needs a labels file"));
            }
            if self.recognition.vote_k == 0 || self.recognition.vote_k > 5 {
                return Err(Error::validation(format!(
                    "recognition.vote_k {} outside 1..=5",
                    self.recognition.vote_k
                )));
            }
            for (name, v) in [
                ("retrieval_threshold", self.recognition.retrieval_threshold),
                ("a1_min_score", self.recognition.a1_min_score),
                ("a2_max_score", self.recognition.a2_max_score),
            ] {
                if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                    return Err(Error::validation(format!(
                        "recognition.{name} {v} outside [0, 1]"
                    )));
                }
            }
        }
        if self.filter.enabled {
            self.filter.to_params().validate()?;
            self.filter.to_partition().validate()?;
            if self.detections.is_none() && self.seed_embeddings.is_empty() {
                return Err(Error::validation(
                    "filtering is enabled but neither detections nor seed_embeddings are set",
                ));
            }
        }
        if self.submission_k == 0 {
            return Err(Error::validation("submission_k must be positive"));
        }
        Ok(())
    }

    /// Reads a config, resolving every relative path against the config
    /// file's directory.
    pub fn load(path: &Path) -> Result<PipelineConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        let mut config: PipelineConfig = serde_json::from_str(&text).map_err(|e| {
            Error::format(path, 0, format!("bad config: {e}"))
        })?;
        if let Some(base) = path.parent() {
            config.resolve_relative(base);
        }
        Ok(config)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::validation(format!("config not serializable: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    /// Makes every relative path absolute with respect to `base`.
    pub fn resolve_relative(&mut self, base: &Path) {
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&p);
            }
        };
        for p in self
            .gallery_embeddings
            .iter_mut()
            .chain(self.query_embeddings.iter_mut())
            .chain(self.seed_embeddings.iter_mut())
        {
            fix(p);
        }
        for p in [
            &mut self.gallery_locals,
            &mut self.query_locals,
            &mut self.labels,
            &mut self.detections,
            &mut self.classifier,
            &mut self.truth_recognition,
            &mut self.truth_retrieval,
        ]
        .into_iter()
        .flatten()
        {
            fix(p);
        }
        fix(&mut self.out_dir);
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn defaults_mirror_production_constants() {
        let c = PipelineConfig::default();
        assert_eq!(c.pca.out_dim, 512);
        assert!(c.pca.whiten);
        assert_eq!(c.ivf.centers, 512);
        assert_eq!(c.ivf.nprobe, 20);
        assert_eq!(c.rerank.depth, 300);
        assert_eq!((c.rerank.dba_base, c.rerank.dba_cap), (10, 20));
        assert_eq!((c.rerank.qe_base, c.rerank.qe_cap), (3, 6));
        assert_eq!(c.rerank.min_matches, 10);
        assert_eq!(c.recognition.vote_k, 5);
        assert_eq!(c.recognition.retrieval_threshold, 0.85);
        assert_eq!(c.recognition.a1_min_score, 0.9);
        assert_eq!(c.recognition.a2_max_score, 0.85);
        assert_eq!(c.recognition.frequency_min_count, 5);
        assert_eq!(c.filter.det_score_threshold, 0.3);
        assert_eq!(c.filter.area_ratio_threshold, 0.6);
        assert_eq!(c.filter.sim_threshold, 0.85);
        assert_eq!(c.filter.sim_topk, 3);
        assert_eq!(c.submission_k, 100);
        assert!(c.filter.landmark_classes.contains(&"Tower".to_string()));
        assert!(c.filter.uncertain_classes.contains(&"Palm tree".to_string()));
    }

    #[test]
    fn json_roundtrip_preserves_everything() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("config.json");
        let mut c = PipelineConfig {
            gallery_embeddings: vec![PathBuf::from("/abs/g0.emb1")],
            query_embeddings: vec![PathBuf::from("/abs/q0.emb1")],
            labels: Some(PathBuf::from("/abs/labels.csv")),
            out_dir: PathBuf::from("/abs/run"),
            ..PipelineConfig::default()
        };
        c.recognition.frequency = FrequencySetting::Extended;
        c.rerank.verifier = VerifierKind::Local;
        c.save(&path).unwrap();
        let loaded = PipelineConfig::load(&path).unwrap();
        assert_eq!(loaded, c);
    }

    #[test]
    fn unknown_keys_are_rejected() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(&path, r#"{"gallery_embedings": ["typo.emb1"]}"#).unwrap();
        let err = PipelineConfig::load(&path).unwrap_err();
        assert!(err.to_string().contains("gallery_embedings"), "{err}");

        std::fs::write(&path, r#"{"pca": {"out_dims": 64}}"#).unwrap();
        assert!(PipelineConfig::load(&path).is_err());
    }

    #[test]
    fn partial_config_fills_defaults() {
        let dir = tempfile::TempDir::new().unwrap();
        let path = dir.path().join("config.json");
        std::fs::write(
            &path,
            r#"{
                "gallery_embeddings": ["g.emb1"],
                "query_embeddings": ["q.emb1"],
                "out_dir": "run",
                "recognition": {"enabled": false},
                "filter": {"enabled": false}
            }"#,
        )
        .unwrap();
        let c = PipelineConfig::load(&path).unwrap();
        assert!(!c.recognition.enabled);
        assert_eq!(c.recognition.vote_k, 5); // untouched default
        assert_eq!(c.ivf.nprobe, 20);
        // Relative paths resolved against the config directory.
        assert_eq!(c.gallery_embeddings[0], dir.path().join("g.emb1"));
        assert_eq!(c.out_dir, dir.path().join("run"));
        assert!(c.validate().is_ok());
    }

    #[test]
    fn validation_rejects_inconsistencies() {
        let base = PipelineConfig {
            gallery_embeddings: vec![PathBuf::from("g.emb1")],
            query_embeddings: vec![PathBuf::from("q.emb1")],
            labels: Some(PathBuf::from("labels.csv")),
            detections: Some(PathBuf::from("det.jsonl")),
            ..PipelineConfig::default()
        };
        assert!(base.validate().is_ok());

        let mut c = base.clone();
        c.gallery_embeddings.clear();
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.query_embeddings.push(PathBuf::from("extra.emb1"));
        assert!(c.validate().is_err()); // model count mismatch

        let mut c = base.clone();
        c.ivf.nprobe = 1000;
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.recognition.vote_k = 6;
        assert!(c.validate().is_err());

        let mut c = base.clone();
        c.labels = None;
        assert!(c.validate().is_err()); // recognition without labels
        c.recognition.enabled = false;
        assert!(c.validate().is_ok());

        let mut c = base.clone();
        c.detections = None;
        assert!(c.validate().is_err()); // filter with no signal
        c.filter.enabled = false;
        assert!(c.validate().is_ok());

        let mut c = base.clone();
        c.rerank.verifier = VerifierKind::Local;
        assert!(c.validate().is_err()); // local verifier without locals

        let mut c = base.clone();
        c.filter.uncertain_classes.push("Tower".into());
        assert!(c.validate().is_err()); // class in both sets
    }
}
