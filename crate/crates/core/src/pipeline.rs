//! End-to-end batch pipeline: from per-model embedding files to ranked
//! retrieval lists, graded recognition predictions and submission files.
//!
//! The pipeline is a fixed sequence of stages. Every stage reads its
//! inputs from files (original inputs or artifacts of earlier stages) and
//! writes its outputs into the configured output directory, so a run can
//! be resumed: a stage whose outputs already exist is skipped. To keep
//! resumption honest, the effective configuration is snapshotted into the
//! output directory on the first run and later runs refuse to mix
//! artifacts produced under a different configuration.
//!
//! Stage order (conditional stages in parentheses):
//!
//! 1.  `concat` — per-model descriptors are l2-normalized, concatenated
//!     and renormalized; gallery / query / seed sides.
//! 2.  (`pca`) — rotation fitted on the gallery, applied to all sides.
//! 3.  (`index`) — coarse k-means + inverted file over the gallery.
//! 4.  `search_initial` — queries against the unexpanded gallery.
//! 5.  (`matches`) — local-descriptor index and match counts, for
//!     verification.
//! 6.  (`dba`) — gallery descriptors replaced by verified-weighted
//!     aggregates; the inverted file is rebuilt on the same centroids.
//! 7.  (`qe`) — query descriptors expanded against the augmented gallery.
//! 8.  `search_final` — final search plus verification-first reordering
//!     of the top of each list.
//! 9.  (`recognize`) — neighbor vote over labeled hits, graded by
//!     neighborhood purity and classifier agreement.
//! 10. (`filter`) — detector and seed-similarity filters flag probable
//!     non-landmark queries.
//! 11. (`rescore`) — grade-band rescoring, demotion of filtered
//!     predictions, frequency boost of often-predicted labels.
//! 12. (`promote`) — gallery images sharing the predicted label move to
//!     the front of each ranking.
//! 13. `submissions` — retrieval and recognition submission files.
//! 14. (`evaluate`) — ranking and recognition quality against ground
//!     truth.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};
use std::slice::from_ref;
use std::time::{Duration, Instant};

use indexmap::IndexMap;
use serde::{Deserialize, Serialize};

use crate::config::{PipelineConfig, VerifierKind};
use crate::error::{Error, Result};
use crate::eval::{gap, map_at_k, GroundTruth};
use crate::features::{concat_normalized, PcaModel};
use crate::localmatch::{
    load_matches, match_batch, match_results_by_query, save_matches, MatchResult,
};
use crate::recognition::{
    detector_filter, frequency_rescore, frequent_set, grade_a, grade_b, label_counts,
    load_classifier_predictions, load_filter_report, load_predictions, rescore, rescore_banded,
    retrieval_recognize, save_predictions, similarity_filter, write_filter_report,
    write_recognition_submission, ClassPartition, DetectorVerdict, FilterParams, FilterRecord,
    FilterStage, FrequencyMode, Grade, GradeA, GradeB, Prediction, FILTERED_BAND_OFFSET,
};
use crate::rerank::{
    category_promote, run_dba, run_qe, verify_neighbors, AcceptNone, AnyVerifier, LabelVerifier,
    LocalMatchVerifier, Verifier,
};
use crate::search::ivf::IvfIndex;
use crate::search::kmeans::kmeans_fit;
use crate::search::{
    load_rankings, save_rankings, search_batch, write_retrieval_submission, ExactSearcher,
    IvfSearcher, NeighborSearch, RankedList,
};
use crate::store::{
    load_detections, load_labels, DetectionMap, EmbeddingSet, ImageId, LabelMap,
    LocalDescriptorSet,
};

/// The labeled hits a query's vote runs over: the first `vote_k` hits of
/// its ranking that carry a gallery label.
fn labeled_hits(list: &RankedList, labels: &LabelMap, vote_k: usize) -> Vec<(ImageId, f32)> {
    list.hits
        .iter()
        .filter(|(id, _)| labels.get(id).is_some())
        .take(vote_k)
        .cloned()
        .collect()
}

/// Votes over every ranking and returns one ungraded prediction per query
/// whose labeled neighborhood passes the purity-and-score gate.
pub fn recognize_rankings(
    lists: &[RankedList],
    labels: &LabelMap,
    vote_k: usize,
    threshold: f64,
) -> Result<Vec<Prediction>> {
    if vote_k == 0 || vote_k > 5 {
        return Err(Error::validation(format!("vote_k {vote_k} outside 1..=5")));
    }
    let mut predictions = Vec::new();
    for list in lists {
        let hits = labeled_hits(list, labels, vote_k);
        if hits.is_empty() {
            continue;
        }
        if let Some((label, score)) = retrieval_recognize(&hits, labels, threshold)? {
            predictions.push(Prediction::new(list.query.clone(), label, score)?);
        }
    }
    Ok(predictions)
}

/// Attaches grades to predictions: neighborhood purity (A) from the same
/// rankings the vote used, classifier agreement (B).
pub fn grade_predictions(
    predictions: &mut [Prediction],
    lists: &[RankedList],
    labels: &LabelMap,
    classifier: &IndexMap<ImageId, Prediction>,
    vote_k: usize,
    a1_min: f64,
    a2_max: f64,
) -> Result<()> {
    let by_query: IndexMap<&ImageId, &RankedList> =
        lists.iter().map(|l| (&l.query, l)).collect();
    for p in predictions {
        let list = by_query
            .get(&p.image)
            .ok_or_else(|| Error::validation(format!("no ranking for predicted image {}", p.image)))?;
        let hits = labeled_hits(list, labels, vote_k);
        let a = grade_a(&hits, labels, a1_min, a2_max)?;
        let b = grade_b(p, classifier.get(&p.image));
        p.grade = Some(Grade::new(a, b));
    }
    Ok(())
}

/// Runs the detector and seed-similarity filters over the query set and
/// reports every flagged query. Either signal may be absent.
pub fn filter_queries(
    queries: &EmbeddingSet,
    detections: Option<&DetectionMap>,
    seeds: Option<&EmbeddingSet>,
    partition: &ClassPartition,
    params: &FilterParams,
) -> Result<Vec<FilterRecord>> {
    let mut records = Vec::new();
    if let Some(detections) = detections {
        for id in queries.ids() {
            let dets = detections.get(id);
            if detector_filter(dets, partition, params) == DetectorVerdict::NonLandmarkCandidate {
                let offender = dets
                    .iter()
                    .filter(|d| {
                        !partition.uncertain.contains(&d.class)
                            && !partition.landmark.contains(&d.class)
                            && d.score > params.det_score_threshold
                            && d.area_ratio() > params.area_ratio_threshold
                    })
                    .max_by(|a, b| {
                        a.score.partial_cmp(&b.score).unwrap_or(std::cmp::Ordering::Equal)
                    })
                    .expect("verdict implies a qualifying detection");
                records.push(FilterRecord {
                    id: id.clone(),
                    stage: FilterStage::Detector,
                    reason: format!(
                        "{} score {:.3} covers {:.3} of image",
                        offender.class,
                        offender.score,
                        offender.area_ratio()
                    ),
                });
            }
        }
    }
    if let Some(seeds) = seeds {
        let caught = similarity_filter(queries, seeds, params)?;
        for id in caught {
            records.push(FilterRecord {
                id,
                stage: FilterStage::Similarity,
                reason: format!(
                    "top-{} similarity to non-landmark seeds above {}",
                    params.sim_topk, params.sim_threshold
                ),
            });
        }
    }
    Ok(records)
}

/// Final confidence assembly: graded predictions are rescored into their
/// grade bands, filtered ones are demoted below every band, and (when a
/// frequency mode is set) often-predicted trusted labels are boosted above
/// all bands. Prediction order is preserved.
pub fn rescore_predictions(
    predictions: &mut [Prediction],
    filtered_ids: &BTreeSet<ImageId>,
    frequency: Option<FrequencyMode>,
    frequency_min_count: usize,
) -> Result<()> {
    let mut kept: Vec<Prediction> = Vec::new();
    let mut demoted: Vec<Prediction> = Vec::new();
    for p in predictions.iter() {
        if filtered_ids.contains(&p.image) {
            demoted.push(p.clone());
        } else {
            kept.push(p.clone());
        }
    }

    // Frequency statistics come from the most trusted band only, before
    // any boosting.
    let top_band: Vec<Prediction> = kept
        .iter()
        .filter(|p| p.grade == Some(Grade::new(GradeA::A1, GradeB::B1)))
        .cloned()
        .collect();
    let frequent = frequent_set(&top_band, frequency_min_count);
    let counts = label_counts(&top_band);

    for p in &mut kept {
        let grade = p
            .grade
            .ok_or_else(|| Error::validation(format!("{} has no grade", p.image)))?;
        p.score = rescore(grade, p.score);
    }
    if let Some(mode) = frequency {
        frequency_rescore(&mut kept, &frequent, &counts, mode)?;
    }
    for p in &mut demoted {
        p.score = rescore_banded(FILTERED_BAND_OFFSET, p.score);
    }

    let mut by_image: IndexMap<ImageId, Prediction> = IndexMap::new();
    for p in kept.into_iter().chain(demoted) {
        by_image.insert(p.image.clone(), p);
    }
    for p in predictions {
        *p = by_image.swap_remove(&p.image).expect("every prediction processed once");
    }
    Ok(())
}

/// Fixed artifact locations inside the output directory.
#[derive(Debug, Clone)]
pub struct OutPaths {
    pub dir: PathBuf,
    /// Effective configuration of the run that owns this directory.
    pub config_snapshot: PathBuf,
    pub concat_gallery: PathBuf,
    pub concat_query: PathBuf,
    pub concat_seeds: PathBuf,
    pub pca_model: PathBuf,
    pub gallery_pca: PathBuf,
    pub query_pca: PathBuf,
    pub seeds_pca: PathBuf,
    pub ivf: PathBuf,
    pub rankings_initial: PathBuf,
    pub local_ivf: PathBuf,
    pub matches_gallery: PathBuf,
    pub matches_query: PathBuf,
    pub gallery_dba: PathBuf,
    pub ivf_dba: PathBuf,
    pub query_qe: PathBuf,
    pub rankings_final: PathBuf,
    pub predictions_graded: PathBuf,
    pub filter_report: PathBuf,
    pub predictions: PathBuf,
    pub rankings_promoted: PathBuf,
    pub submission_retrieval: PathBuf,
    pub submission_recognition: PathBuf,
    pub metrics: PathBuf,
}

impl OutPaths {
    pub fn new(dir: &Path) -> OutPaths {
        let p = |name: &str| dir.join(name);
        OutPaths {
            dir: dir.to_path_buf(),
            config_snapshot: p("config.json"),
            concat_gallery: p("concat_gallery.emb1"),
            concat_query: p("concat_query.emb1"),
            concat_seeds: p("concat_seeds.emb1"),
            pca_model: p("pca.pca1"),
            gallery_pca: p("gallery_pca.emb1"),
            query_pca: p("query_pca.emb1"),
            seeds_pca: p("seeds_pca.emb1"),
            ivf: p("ivf.ivf1"),
            rankings_initial: p("rankings_initial.csv"),
            local_ivf: p("local_ivf.ivf1"),
            matches_gallery: p("matches_gallery.csv"),
            matches_query: p("matches_query.csv"),
            gallery_dba: p("gallery_dba.emb1"),
            ivf_dba: p("ivf_dba.ivf1"),
            query_qe: p("query_qe.emb1"),
            rankings_final: p("rankings_final.csv"),
            predictions_graded: p("predictions_graded.csv"),
            filter_report: p("filter_report.csv"),
            predictions: p("predictions.csv"),
            rankings_promoted: p("rankings_promoted.csv"),
            submission_retrieval: p("submission_retrieval.csv"),
            submission_recognition: p("submission_recognition.csv"),
            metrics: p("metrics.json"),
        }
    }
}

/// How one stage went.
#[derive(Debug, Clone)]
pub struct StageReport {
    pub name: &'static str,
    pub skipped: bool,
    pub duration: Duration,
}

/// Per-stage timing of a whole run.
#[derive(Debug, Clone, Default)]
pub struct PipelineReport {
    pub stages: Vec<StageReport>,
}

impl PipelineReport {
    pub fn format(&self) -> String {
        let mut out = String::new();
        for s in &self.stages {
            if s.skipped {
                out.push_str(&format!("{:<16} skipped (outputs exist)\n", s.name));
            } else {
                out.push_str(&format!(
                    "{:<16} {:>9.3}s\n",
                    s.name,
                    s.duration.as_secs_f64()
                ));
            }
        }
        out
    }
}

/// Quality numbers of a finished run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Metrics {
    /// Micro average precision over all recognition predictions pooled, or
    /// `None` without recognition ground truth.
    pub gap: Option<f64>,
    /// Mean average precision at `k` over retrieval ground-truth queries,
    /// or `None` without retrieval ground truth.
    pub map_at_k: Option<f64>,
    pub k: usize,
}

impl Metrics {
    pub fn save(&self, path: &Path) -> Result<()> {
        let text = serde_json::to_string_pretty(self)
            .map_err(|e| Error::validation(format!("metrics not serializable: {e}")))?;
        std::fs::write(path, text + "\n").map_err(|e| Error::io(path, e))
    }

    pub fn load(path: &Path) -> Result<Metrics> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        serde_json::from_str(&text).map_err(|e| Error::format(path, 0, format!("bad metrics: {e}")))
    }
}

/// A configured, runnable pipeline.
pub struct Pipeline {
    config: PipelineConfig,
    paths: OutPaths,
}

impl Pipeline {
    /// Resolves relative paths against the current directory, validates the
    /// configuration and fixes the artifact layout.
    pub fn new(mut config: PipelineConfig) -> Result<Pipeline> {
        let cwd = std::env::current_dir().map_err(|e| Error::io(".", e))?;
        config.resolve_relative(&cwd);
        config.validate()?;
        let paths = OutPaths::new(&config.out_dir);
        Ok(Pipeline { config, paths })
    }

    pub fn config(&self) -> &PipelineConfig {
        &self.config
    }

    pub fn paths(&self) -> &OutPaths {
        &self.paths
    }

    /// Runs every applicable stage, skipping those whose outputs exist.
    pub fn run(&self) -> Result<PipelineReport> {
        std::fs::create_dir_all(&self.paths.dir).map_err(|e| Error::io(&self.paths.dir, e))?;
        self.check_snapshot()?;

        let mut report = PipelineReport::default();
        let p = &self.paths;
        let c = &self.config;

        let mut concat_outs = vec![p.concat_gallery.clone(), p.concat_query.clone()];
        if self.has_seeds() {
            concat_outs.push(p.concat_seeds.clone());
        }
        self.run_stage(&mut report, "concat", &concat_outs, || self.do_concat())?;

        if c.pca.enabled {
            let mut outs = vec![p.pca_model.clone(), p.gallery_pca.clone(), p.query_pca.clone()];
            if self.has_seeds() {
                outs.push(p.seeds_pca.clone());
            }
            self.run_stage(&mut report, "pca", &outs, || self.do_pca())?;
        }

        if !c.ivf.exact {
            self.run_stage(&mut report, "index", from_ref(&p.ivf), || self.do_index())?;
        }

        self.run_stage(&mut report, "search_initial", from_ref(&p.rankings_initial), || {
            self.do_search_initial()
        })?;

        if self.has_local_matching() {
            let mut outs = vec![p.local_ivf.clone()];
            if c.rerank.dba {
                outs.push(p.matches_gallery.clone());
            }
            if c.query_locals.is_some() {
                outs.push(p.matches_query.clone());
            }
            self.run_stage(&mut report, "matches", &outs, || self.do_matches())?;
        }

        if c.rerank.dba {
            let mut outs = vec![p.gallery_dba.clone()];
            if !c.ivf.exact {
                outs.push(p.ivf_dba.clone());
            }
            self.run_stage(&mut report, "dba", &outs, || self.do_dba())?;
        }

        if c.rerank.qe {
            self.run_stage(&mut report, "qe", from_ref(&p.query_qe), || self.do_qe())?;
        }

        self.run_stage(&mut report, "search_final", from_ref(&p.rankings_final), || {
            self.do_search_final()
        })?;

        if c.recognition.enabled {
            self.run_stage(&mut report, "recognize", from_ref(&p.predictions_graded), || {
                self.do_recognize()
            })?;
        }

        if c.filter.enabled {
            self.run_stage(&mut report, "filter", from_ref(&p.filter_report), || {
                self.do_filter()
            })?;
        }

        if c.recognition.enabled {
            self.run_stage(&mut report, "rescore", from_ref(&p.predictions), || {
                self.do_rescore()
            })?;
        }

        if c.rerank.category_promote && c.recognition.enabled {
            self.run_stage(&mut report, "promote", from_ref(&p.rankings_promoted), || {
                self.do_promote()
            })?;
        }

        let sub_outs = [p.submission_retrieval.clone(), p.submission_recognition.clone()];
        self.run_stage(&mut report, "submissions", &sub_outs, || self.do_submissions())?;

        if c.truth_recognition.is_some() || c.truth_retrieval.is_some() {
            self.run_stage(&mut report, "evaluate", from_ref(&p.metrics), || {
                self.do_evaluate()
            })?;
        }

        Ok(report)
    }

    // ----- gating helpers --------------------------------------------------

    fn has_seeds(&self) -> bool {
        !self.config.seed_embeddings.is_empty()
    }

    fn wants_label_signal(&self) -> bool {
        matches!(
            self.config.rerank.verifier,
            VerifierKind::Labels | VerifierKind::LabelsOrLocal
        )
    }

    fn wants_local_signal(&self) -> bool {
        matches!(
            self.config.rerank.verifier,
            VerifierKind::Local | VerifierKind::LabelsOrLocal
        )
    }

    /// Local matching is possible when requested and gallery-side local
    /// descriptors exist; a missing signal degrades instead of failing.
    fn has_local_matching(&self) -> bool {
        self.wants_local_signal() && self.config.gallery_locals.is_some()
    }

    fn k_search(&self) -> usize {
        self.config.submission_k.max(self.config.rerank.depth)
    }

    /// Post-concat (and post-rotation, when enabled) descriptor files.
    fn processed_gallery(&self) -> &PathBuf {
        if self.config.pca.enabled { &self.paths.gallery_pca } else { &self.paths.concat_gallery }
    }

    fn processed_query(&self) -> &PathBuf {
        if self.config.pca.enabled { &self.paths.query_pca } else { &self.paths.concat_query }
    }

    fn processed_seeds(&self) -> &PathBuf {
        if self.config.pca.enabled { &self.paths.seeds_pca } else { &self.paths.concat_seeds }
    }

    /// Gallery actually searched in the final stage.
    fn effective_gallery(&self) -> &PathBuf {
        if self.config.rerank.dba { &self.paths.gallery_dba } else { self.processed_gallery() }
    }

    fn effective_query(&self) -> &PathBuf {
        if self.config.rerank.qe { &self.paths.query_qe } else { self.processed_query() }
    }

    fn effective_index(&self) -> &PathBuf {
        if self.config.rerank.dba { &self.paths.ivf_dba } else { &self.paths.ivf }
    }

    // ----- run machinery ---------------------------------------------------

    fn check_snapshot(&self) -> Result<()> {
        let path = &self.paths.config_snapshot;
        if path.exists() {
            let previous = PipelineConfig::load(path)?;
            if previous != self.config {
                return Err(Error::validation(format!(
                    "{} holds artifacts of a different configuration; delete the \
                     directory or choose another out_dir",
                    self.paths.dir.display()
                )));
            }
            Ok(())
        } else {
            self.config.save(path)
        }
    }

    fn run_stage(
        &self,
        report: &mut PipelineReport,
        name: &'static str,
        outputs: &[PathBuf],
        stage: impl FnOnce() -> Result<()>,
    ) -> Result<()> {
        if !outputs.is_empty() && outputs.iter().all(|p| p.exists()) {
            report.stages.push(StageReport { name, skipped: true, duration: Duration::ZERO });
            return Ok(());
        }
        let start = Instant::now();
        stage().map_err(|e| Error::Stage {
            stage: name.to_string(),
            digest: self.input_digest(),
            source: Box::new(e),
        })?;
        report.stages.push(StageReport { name, skipped: false, duration: start.elapsed() });
        Ok(())
    }

    /// Digest over all configured input files, computed when a stage fails
    /// so the error can be correlated with the exact inputs.
    fn input_digest(&self) -> String {
        use sha2::{Digest, Sha256};
        let mut hasher = Sha256::new();
        let c = &self.config;
        let inputs = c
            .gallery_embeddings
            .iter()
            .chain(c.query_embeddings.iter())
            .chain(c.seed_embeddings.iter())
            .chain(c.gallery_locals.iter())
            .chain(c.query_locals.iter())
            .chain(c.labels.iter())
            .chain(c.detections.iter())
            .chain(c.classifier.iter())
            .chain(c.truth_recognition.iter())
            .chain(c.truth_retrieval.iter());
        for path in inputs {
            hasher.update(path.to_string_lossy().as_bytes());
            hasher.update([0u8]);
            if let Ok(bytes) = std::fs::read(path) {
                hasher.update(&bytes);
            }
            hasher.update([0xffu8]);
        }
        let digest = hasher.finalize();
        digest.iter().take(6).map(|b| format!("{b:02x}")).collect()
    }

    /// Searcher over `gallery`, brute force or via the index at
    /// `index_path`; `slot` keeps a loaded index alive for the caller.
    fn make_searcher<'a>(
        &self,
        gallery: &'a EmbeddingSet,
        slot: &'a mut Option<IvfIndex>,
        index_path: &Path,
        exclude_self: bool,
    ) -> Result<Box<dyn NeighborSearch + 'a>> {
        if self.config.ivf.exact {
            Ok(Box::new(ExactSearcher { gallery, exclude_self }))
        } else {
            let index = IvfIndex::load(index_path)?;
            let nprobe = self.config.ivf.nprobe.min(index.k());
            *slot = Some(index);
            let index = slot.as_ref().expect("just stored");
            Ok(Box::new(IvfSearcher { index, nprobe, exclude_self }))
        }
    }

    /// Gallery-side label map, when label verification is requested and a
    /// labels file is configured.
    fn verify_labels(&self) -> Result<Option<LabelMap>> {
        match (&self.config.labels, self.wants_label_signal()) {
            (Some(path), true) => Ok(Some(load_labels(path)?)),
            _ => Ok(None),
        }
    }

    /// Match counts for one side, when local verification is active and the
    /// matches artifact was produced.
    fn verify_matches(&self, path: &Path) -> Result<Option<IndexMap<ImageId, MatchResult>>> {
        if self.has_local_matching() && path.exists() {
            Ok(Some(match_results_by_query(load_matches(path)?)))
        } else {
            Ok(None)
        }
    }

    // ----- stages ----------------------------------------------------------

    fn do_concat(&self) -> Result<()> {
        let jobs: [(&[PathBuf], &PathBuf); 3] = [
            (&self.config.gallery_embeddings, &self.paths.concat_gallery),
            (&self.config.query_embeddings, &self.paths.concat_query),
            (&self.config.seed_embeddings, &self.paths.concat_seeds),
        ];
        for (inputs, out) in jobs {
            if inputs.is_empty() {
                continue; // seeds are optional
            }
            let sets = inputs.iter().map(|p| EmbeddingSet::load(p)).collect::<Result<Vec<_>>>()?;
            concat_normalized(&sets)?.save(out)?;
        }
        Ok(())
    }

    fn do_pca(&self) -> Result<()> {
        let gallery = EmbeddingSet::load(&self.paths.concat_gallery)?;
        let model = PcaModel::fit(&gallery, self.config.pca.out_dim, self.config.pca.whiten)?;
        model.save(&self.paths.pca_model)?;
        model.apply_set(&gallery)?.save(&self.paths.gallery_pca)?;
        let query = EmbeddingSet::load(&self.paths.concat_query)?;
        model.apply_set(&query)?.save(&self.paths.query_pca)?;
        if self.has_seeds() {
            let seeds = EmbeddingSet::load(&self.paths.concat_seeds)?;
            model.apply_set(&seeds)?.save(&self.paths.seeds_pca)?;
        }
        Ok(())
    }

    fn do_index(&self) -> Result<()> {
        let gallery = EmbeddingSet::load(self.processed_gallery())?;
        let points: Vec<&[f32]> = gallery.iter().map(|(_, v)| v).collect();
        let k = self.config.ivf.centers.min(points.len());
        let centroids =
            kmeans_fit(&points, gallery.dim(), k, self.config.ivf.max_iters, self.config.seed)?;
        IvfIndex::build_from_embeddings(&gallery, centroids)?.save(&self.paths.ivf)
    }

    fn do_search_initial(&self) -> Result<()> {
        let gallery = EmbeddingSet::load(self.processed_gallery())?;
        let queries = EmbeddingSet::load(self.processed_query())?;
        let mut slot = None;
        let searcher = self.make_searcher(&gallery, &mut slot, &self.paths.ivf, false)?;
        let lists = search_batch(searcher.as_ref(), &queries, self.k_search())?;
        save_rankings(&lists, &self.paths.rankings_initial)
    }

    fn do_matches(&self) -> Result<()> {
        let gallery_path = self.config.gallery_locals.as_ref().expect("gated on gallery_locals");
        let gallery = LocalDescriptorSet::load(gallery_path)?;
        let points: Vec<&[f32]> = gallery
            .iter()
            .flat_map(|(_, flat)| flat.chunks_exact(gallery.dim()))
            .collect();
        if points.is_empty() {
            return Err(Error::validation(format!(
                "{} holds no local descriptors",
                gallery_path.display()
            )));
        }
        let r = &self.config.rerank;
        let k = r.local_centers.min(points.len());
        let centroids = kmeans_fit(&points, gallery.dim(), k, r.local_max_iters, self.config.seed)?;
        drop(points);
        let index = IvfIndex::build_from_locals(&gallery, centroids)?;
        index.save(&self.paths.local_ivf)?;
        let nprobe = r.local_nprobe.min(index.k());
        if self.config.rerank.dba {
            let results = match_batch(&gallery, &index, nprobe, r.local_sim_threshold, true)?;
            save_matches(&results, &self.paths.matches_gallery)?;
        }
        if let Some(query_path) = &self.config.query_locals {
            let queries = LocalDescriptorSet::load(query_path)?;
            let results = match_batch(&queries, &index, nprobe, r.local_sim_threshold, false)?;
            save_matches(&results, &self.paths.matches_query)?;
        }
        Ok(())
    }

    fn do_dba(&self) -> Result<()> {
        let gallery = EmbeddingSet::load(self.processed_gallery())?;
        let labels = self.verify_labels()?;
        let matches = self.verify_matches(&self.paths.matches_gallery)?;
        let label_v = labels
            .as_ref()
            .map(|l| LabelVerifier { query_labels: l, candidate_labels: l });
        let local_v = matches.as_ref().map(|m| LocalMatchVerifier {
            results: m,
            min_matches: self.config.rerank.min_matches,
        });
        let mut parts: Vec<&dyn Verifier> = Vec::new();
        if let Some(v) = &label_v {
            parts.push(v);
        }
        if let Some(v) = &local_v {
            parts.push(v);
        }
        let any = AnyVerifier(parts);
        let verifier: &dyn Verifier = if any.0.is_empty() { &AcceptNone } else { &any };

        let mut slot = None;
        let searcher = self.make_searcher(&gallery, &mut slot, &self.paths.ivf, true)?;
        let expanded =
            run_dba(&gallery, searcher.as_ref(), verifier, &self.config.rerank.to_params())?;
        drop(searcher);
        expanded.save(&self.paths.gallery_dba)?;
        if !self.config.ivf.exact {
            let centroids = slot.expect("index loaded when not exact").centroids().clone();
            IvfIndex::build_from_embeddings(&expanded, centroids)?.save(&self.paths.ivf_dba)?;
        }
        Ok(())
    }

    /// Query-side verification never sees labels (queries are unlabeled at
    /// inference), so only local matches can verify.
    fn query_verifier<'a>(
        &self,
        matches: &'a Option<IndexMap<ImageId, MatchResult>>,
    ) -> Box<dyn Verifier + 'a> {
        match matches {
            Some(m) => Box::new(LocalMatchVerifier {
                results: m,
                min_matches: self.config.rerank.min_matches,
            }),
            None => Box::new(AcceptNone),
        }
    }

    fn do_qe(&self) -> Result<()> {
        let gallery = EmbeddingSet::load(self.effective_gallery())?;
        let queries = EmbeddingSet::load(self.processed_query())?;
        let matches = self.verify_matches(&self.paths.matches_query)?;
        let verifier = self.query_verifier(&matches);
        let mut slot = None;
        let searcher = self.make_searcher(&gallery, &mut slot, self.effective_index(), false)?;
        let expanded = run_qe(
            &queries,
            &gallery,
            searcher.as_ref(),
            verifier.as_ref(),
            &self.config.rerank.to_params(),
        )?;
        expanded.save(&self.paths.query_qe)
    }

    fn do_search_final(&self) -> Result<()> {
        let r = &self.config.rerank;
        let lists = if r.dba || r.qe {
            let gallery = EmbeddingSet::load(self.effective_gallery())?;
            let queries = EmbeddingSet::load(self.effective_query())?;
            let mut slot = None;
            let searcher = self.make_searcher(&gallery, &mut slot, self.effective_index(), false)?;
            search_batch(searcher.as_ref(), &queries, self.k_search())?
        } else {
            load_rankings(&self.paths.rankings_initial)?
        };
        let matches = self.verify_matches(&self.paths.matches_query)?;
        let verifier = self.query_verifier(&matches);
        let reordered: Vec<RankedList> = lists
            .into_iter()
            .map(|list| {
                let head_len = r.depth.min(list.hits.len());
                let head = RankedList::new(list.query.clone(), list.hits[..head_len].to_vec());
                let (mut part, _) = verify_neighbors(&head, verifier.as_ref());
                part.hits.extend_from_slice(&list.hits[head_len..]);
                part
            })
            .collect();
        save_rankings(&reordered, &self.paths.rankings_final)
    }

    fn do_recognize(&self) -> Result<()> {
        let labels_path = self.config.labels.as_ref().expect("validated");
        let labels = load_labels(labels_path)?;
        let classifier = match &self.config.classifier {
            Some(path) => load_classifier_predictions(path)?,
            None => IndexMap::new(),
        };
        let lists = load_rankings(&self.paths.rankings_final)?;
        let rc = &self.config.recognition;
        let mut predictions =
            recognize_rankings(&lists, &labels, rc.vote_k, rc.retrieval_threshold)?;
        grade_predictions(
            &mut predictions,
            &lists,
            &labels,
            &classifier,
            rc.vote_k,
            rc.a1_min_score,
            rc.a2_max_score,
        )?;
        save_predictions(&predictions, &self.paths.predictions_graded)
    }

    fn do_filter(&self) -> Result<()> {
        let params = self.config.filter.to_params();
        let partition = self.config.filter.to_partition();
        // Pre-expansion query descriptors: expansion mixes in gallery
        // content, which would dilute similarity to the seed images.
        let queries = EmbeddingSet::load(self.processed_query())?;
        let detections = match &self.config.detections {
            Some(path) => Some(load_detections(path)?),
            None => None,
        };
        let seeds = if self.has_seeds() {
            Some(EmbeddingSet::load(self.processed_seeds())?)
        } else {
            None
        };
        let records =
            filter_queries(&queries, detections.as_ref(), seeds.as_ref(), &partition, &params)?;
        write_filter_report(&records, &self.paths.filter_report)
    }

    fn do_rescore(&self) -> Result<()> {
        let mut predictions = load_predictions(&self.paths.predictions_graded)?;
        let filtered_ids: BTreeSet<ImageId> = if self.paths.filter_report.exists() {
            load_filter_report(&self.paths.filter_report)?
                .into_iter()
                .map(|r| r.id)
                .collect()
        } else {
            BTreeSet::new()
        };
        rescore_predictions(
            &mut predictions,
            &filtered_ids,
            self.config.recognition.frequency.mode(),
            self.config.recognition.frequency_min_count,
        )?;
        save_predictions(&predictions, &self.paths.predictions)
    }

    fn do_promote(&self) -> Result<()> {
        let labels_path = self.config.labels.as_ref().expect("validated");
        let labels = load_labels(labels_path)?;
        let lists = load_rankings(&self.paths.rankings_final)?;
        let predictions = load_predictions(&self.paths.predictions)?;
        let filtered_ids: BTreeSet<ImageId> = if self.paths.filter_report.exists() {
            load_filter_report(&self.paths.filter_report)?
                .into_iter()
                .map(|r| r.id)
                .collect()
        } else {
            BTreeSet::new()
        };
        // Predictions demoted by the filters describe probable
        // non-landmarks; their labels must not reorder retrieval.
        let by_image: IndexMap<&ImageId, &str> = predictions
            .iter()
            .filter(|p| !filtered_ids.contains(&p.image))
            .map(|p| (&p.image, p.label.as_str()))
            .collect();
        let promoted: Vec<RankedList> = lists
            .iter()
            .map(|list| category_promote(list, &labels, by_image.get(&list.query).copied()))
            .collect();
        save_rankings(&promoted, &self.paths.rankings_promoted)
    }

    fn do_submissions(&self) -> Result<()> {
        let ranking_source = if self.config.rerank.category_promote && self.config.recognition.enabled
        {
            &self.paths.rankings_promoted
        } else {
            &self.paths.rankings_final
        };
        let lists = load_rankings(ranking_source)?;
        write_retrieval_submission(&lists, self.config.submission_k, &self.paths.submission_retrieval)?;

        let queries = EmbeddingSet::load(self.processed_query())?;
        let by_image: IndexMap<ImageId, Prediction> = if self.paths.predictions.exists() {
            load_predictions(&self.paths.predictions)?
                .into_iter()
                .map(|p| (p.image.clone(), p))
                .collect()
        } else {
            IndexMap::new()
        };
        let rows: Vec<(ImageId, Option<(String, f64)>)> = queries
            .ids()
            .map(|id| {
                let cell = by_image.get(id).map(|p| (p.label.clone(), p.score));
                (id.clone(), cell)
            })
            .collect();
        write_recognition_submission(&rows, &self.paths.submission_recognition)
    }

    fn do_evaluate(&self) -> Result<()> {
        let mut truth = GroundTruth::new();
        if let Some(path) = &self.config.truth_recognition {
            truth.load_recognition(path)?;
        }
        if let Some(path) = &self.config.truth_retrieval {
            truth.load_retrieval(path)?;
        }

        let gap_value = if self.config.truth_recognition.is_some() {
            let predictions = if self.paths.predictions.exists() {
                load_predictions(&self.paths.predictions)?
            } else {
                Vec::new()
            };
            Some(gap(&predictions, &truth)?)
        } else {
            None
        };

        let map_value = if self.config.truth_retrieval.is_some() {
            let source = if self.config.rerank.category_promote && self.config.recognition.enabled {
                &self.paths.rankings_promoted
            } else {
                &self.paths.rankings_final
            };
            let lists: Vec<RankedList> = load_rankings(source)?
                .into_iter()
                .filter(|l| truth.retrieval.contains_key(&l.query))
                .collect();
            Some(map_at_k(&lists, &truth, self.config.submission_k)?)
        } else {
            None
        };

        Metrics { gap: gap_value, map_at_k: map_value, k: self.config.submission_k }
            .save(&self.paths.metrics)
    }
}
