//! Evaluation: GAP (micro average precision) for recognition, mAP@k for
//! retrieval, and a cumulative ablation harness.
//!
//! GAP pools every prediction into one globally ranked list (score
//! descending, ties by ascending id) and averages precision at each
//! correct prediction over the number of labeled truth images — so a
//! wrong-but-confident prediction drags down everything ranked below it,
//! which is exactly what grade-based rescoring attacks. mAP@k is the
//! per-query average precision truncated at rank k, averaged over
//! queries.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use indexmap::IndexMap;

use crate::error::{Error, Result};
use crate::features::{concat_descriptors, PcaModel};
use crate::localmatch::{match_batch, match_results_by_query};
use crate::recognition::Prediction;
use crate::rerank::{run_dba, run_qe, verify_neighbors, AcceptNone, LocalMatchVerifier, RerankParams};
use crate::search::kmeans::kmeans_fit;
use crate::search::ivf::IvfIndex;
use crate::search::{search_batch, ExactSearcher, RankedList};
use crate::store::text::{csv_error, expect_csv_header, open_csv};
use crate::store::{EmbeddingSet, ImageId, LocalDescriptorSet};

/// Truth for both tracks: recognition labels (a `None` label marks an
/// explicit distractor; images absent from the map are also distractors)
/// and per-query relevant gallery sets for retrieval.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct GroundTruth {
    pub recognition: IndexMap<ImageId, Option<String>>,
    pub retrieval: IndexMap<ImageId, BTreeSet<ImageId>>,
}

impl GroundTruth {
    pub fn new() -> Self {
        GroundTruth::default()
    }

    pub fn insert_recognition(&mut self, id: ImageId, label: Option<String>) -> Result<()> {
        if let Some(l) = &label {
            if l.is_empty() {
                return Err(Error::validation(format!(
                    "empty truth label for {id}; use an absent label for distractors"
                )));
            }
        }
        if self.recognition.contains_key(&id) {
            return Err(Error::validation(format!("duplicate truth entry for {id}")));
        }
        self.recognition.insert(id, label);
        Ok(())
    }

    pub fn insert_retrieval(&mut self, id: ImageId, relevant: BTreeSet<ImageId>) -> Result<()> {
        if relevant.is_empty() {
            return Err(Error::validation(format!(
                "query {id} has an empty relevant set; its AP would be undefined"
            )));
        }
        if self.retrieval.contains_key(&id) {
            return Err(Error::validation(format!("duplicate truth entry for {id}")));
        }
        self.retrieval.insert(id, relevant);
        Ok(())
    }

    /// Number of truth images that carry a label (the GAP denominator).
    pub fn labeled_count(&self) -> usize {
        self.recognition.values().filter(|v| v.is_some()).count()
    }

    /// Saves recognition truth as `id,landmark_id` (empty cell for
    /// distractors).
    pub fn save_recognition(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, &e))?;
        w.write_record(["id", "landmark_id"]).map_err(|e| csv_error(path, &e))?;
        for (id, label) in &self.recognition {
            w.write_record([id.as_str(), label.as_deref().unwrap_or("")])
                .map_err(|e| csv_error(path, &e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Saves retrieval truth as `id,images` (space-separated relevant ids).
    pub fn save_retrieval(&self, path: &Path) -> Result<()> {
        let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, &e))?;
        w.write_record(["id", "images"]).map_err(|e| csv_error(path, &e))?;
        for (id, relevant) in &self.retrieval {
            let cell = relevant
                .iter()
                .map(ImageId::as_str)
                .collect::<Vec<_>>()
                .join(" ");
            w.write_record([id.as_str(), &cell]).map_err(|e| csv_error(path, &e))?;
        }
        w.flush().map_err(|e| Error::io(path, e))
    }

    /// Loads recognition truth written by [`GroundTruth::save_recognition`]
    /// into this value.
    pub fn load_recognition(&mut self, path: &Path) -> Result<()> {
        let mut reader = open_csv(path)?;
        expect_csv_header(&mut reader, path, &["id", "landmark_id"])?;
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(path, &e))?;
            let offset = record.position().map_or(0, csv::Position::byte);
            if record.len() != 2 {
                return Err(Error::format(
                    path,
                    offset,
                    format!("expected 2 fields, got {}", record.len()),
                ));
            }
            let id =
                ImageId::new(&record[0]).map_err(|e| Error::format(path, offset, e.to_string()))?;
            let label = (!record[1].is_empty()).then(|| record[1].to_string());
            self.insert_recognition(id, label)
                .map_err(|e| Error::format(path, offset, e.to_string()))?;
        }
        Ok(())
    }

    /// Loads retrieval truth written by [`GroundTruth::save_retrieval`]
    /// into this value.
    pub fn load_retrieval(&mut self, path: &Path) -> Result<()> {
        let mut reader = open_csv(path)?;
        expect_csv_header(&mut reader, path, &["id", "images"])?;
        for record in reader.records() {
            let record = record.map_err(|e| csv_error(path, &e))?;
            let offset = record.position().map_or(0, csv::Position::byte);
            if record.len() != 2 {
                return Err(Error::format(
                    path,
                    offset,
                    format!("expected 2 fields, got {}", record.len()),
                ));
            }
            let id =
                ImageId::new(&record[0]).map_err(|e| Error::format(path, offset, e.to_string()))?;
            let mut relevant = BTreeSet::new();
            for token in record[1].split_whitespace() {
                let rid = ImageId::new(token)
                    .map_err(|e| Error::format(path, offset, e.to_string()))?;
                if !relevant.insert(rid) {
                    return Err(Error::format(
                        path,
                        offset,
                        format!("duplicate relevant id {token:?} for query {id}"),
                    ));
                }
            }
            self.insert_retrieval(id, relevant)
                .map_err(|e| Error::format(path, offset, e.to_string()))?;
        }
        Ok(())
    }
}

/// Sorts prediction indices into the global GAP ranking: score descending,
/// ties by ascending image id.
fn gap_order(predictions: &[Prediction]) -> Vec<usize> {
    let mut order: Vec<usize> = (0..predictions.len()).collect();
    order.sort_by(|&a, &b| {
        let (pa, pb) = (&predictions[a], &predictions[b]);
        pb.score
            .partial_cmp(&pa.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| pa.image.cmp(&pb.image))
    });
    order
}

/// Global average precision (micro-AP) of pooled recognition predictions.
///
/// Predictions are ranked globally by score (ties by ascending id);
/// `GAP = (1/M) Σ_i precision@i · rel(i)` where `rel(i)` is 1 when the
/// prediction's label equals the truth label of its image and `M` is the
/// number of truth images that have a label. Predictions for distractors
/// or unknown images count as wrong.
pub fn gap(predictions: &[Prediction], truth: &GroundTruth) -> Result<f64> {
    let mut seen: BTreeSet<&ImageId> = BTreeSet::new();
    for p in predictions {
        if !seen.insert(&p.image) {
            return Err(Error::validation(format!(
                "multiple predictions for image {}",
                p.image
            )));
        }
    }
    let m = truth.labeled_count();
    if m == 0 {
        return Err(Error::validation(
            "ground truth has no labeled images; GAP is undefined",
        ));
    }
    let mut correct = 0usize;
    let mut total = 0.0f64;
    for (rank0, &i) in gap_order(predictions).iter().enumerate() {
        let p = &predictions[i];
        let rel = matches!(
            truth.recognition.get(&p.image),
            Some(Some(label)) if *label == p.label
        );
        if rel {
            correct += 1;
            total += correct as f64 / (rank0 + 1) as f64;
        }
    }
    Ok(total / m as f64)
}

/// Mean average precision at rank `k` over the truth queries.
///
/// Each list is consumed in its stored order (the order *is* the ranking).
/// `AP@k = (1/min(|relevant|, k)) Σ_{i≤k} precision@i · rel(i)`; a truth
/// query with no result list scores 0. Every result list must belong to a
/// truth query.
pub fn map_at_k(results: &[RankedList], truth: &GroundTruth, k: usize) -> Result<f64> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if truth.retrieval.is_empty() {
        return Err(Error::validation(
            "ground truth has no retrieval queries; mAP is undefined",
        ));
    }
    let mut by_query: BTreeMap<&ImageId, &RankedList> = BTreeMap::new();
    for list in results {
        if by_query.insert(&list.query, list).is_some() {
            return Err(Error::validation(format!(
                "multiple result lists for query {}",
                list.query
            )));
        }
        if !truth.retrieval.contains_key(&list.query) {
            return Err(Error::validation(format!(
                "result list for query {} has no truth entry",
                list.query
            )));
        }
        let mut ids: BTreeSet<&ImageId> = BTreeSet::new();
        for (id, _) in &list.hits {
            if !ids.insert(id) {
                return Err(Error::validation(format!(
                    "query {} ranks gallery image {id} twice",
                    list.query
                )));
            }
        }
    }
    let mut total = 0.0f64;
    for (query, relevant) in &truth.retrieval {
        let ap = match by_query.get(query) {
            None => 0.0,
            Some(list) => {
                let denom = relevant.len().min(k) as f64;
                let mut correct = 0usize;
                let mut sum = 0.0f64;
                for (rank0, (id, _)) in list.hits.iter().take(k).enumerate() {
                    if relevant.contains(id) {
                        correct += 1;
                        sum += correct as f64 / (rank0 + 1) as f64;
                    }
                }
                sum / denom
            }
        };
        total += ap;
    }
    Ok(total / truth.retrieval.len() as f64)
}

/// Cumulative pipeline stages of the ablation, in pipeline order. Each
/// stage includes everything before it: `DbaAqe` means concat + PCA +
/// DBA + QE.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AblationStage {
    /// First model's descriptors alone, l2-normalized.
    Baseline,
    /// All models concatenated, PCA-reduced and whitened.
    ConcatPca,
    /// Plus weighted database-side and query-side expansion.
    DbaAqe,
    /// Plus local-match verification reordering of the final lists.
    Rerank,
}

impl fmt::Display for AblationStage {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            AblationStage::Baseline => "baseline",
            AblationStage::ConcatPca => "concat_pca",
            AblationStage::DbaAqe => "dba_aqe",
            AblationStage::Rerank => "rerank",
        };
        f.write_str(s)
    }
}

impl FromStr for AblationStage {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "baseline" => Ok(AblationStage::Baseline),
            "concat_pca" => Ok(AblationStage::ConcatPca),
            "dba_aqe" => Ok(AblationStage::DbaAqe),
            "rerank" => Ok(AblationStage::Rerank),
            other => Err(Error::validation(format!(
                "unknown ablation stage {other:?} (expected baseline, concat_pca, dba_aqe or rerank)"
            ))),
        }
    }
}

/// In-memory dataset the ablation runs over: one embedding set per model
/// for both sides, optional local descriptors (required by the rerank
/// stage), and retrieval truth.
pub struct AblationInputs<'a> {
    pub gallery_models: &'a [EmbeddingSet],
    pub query_models: &'a [EmbeddingSet],
    pub gallery_locals: Option<&'a LocalDescriptorSet>,
    pub query_locals: Option<&'a LocalDescriptorSet>,
    pub truth: &'a GroundTruth,
}

/// Knobs of the ablation stages.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationParams {
    /// PCA output dimension for the concat stage.
    pub pca_out_dim: usize,
    pub whiten: bool,
    /// Expansion schedule and neighbor depth for DBA/QE and the rerank
    /// verification depth.
    pub rerank: RerankParams,
    /// Local matches required to call a candidate verified.
    pub min_matches: u32,
    /// Similarity floor for counting a local-descriptor match.
    pub local_sim_threshold: f32,
    /// k-means centers of the local-descriptor index (clamped to the number
    /// of points).
    pub local_centers: usize,
    /// Probed centers per local-descriptor lookup (clamped to centers).
    pub local_nprobe: usize,
    /// k-means iteration budget for the local index.
    pub kmeans_iters: usize,
    /// Rank cutoff of the reported metric.
    pub map_k: usize,
    pub seed: u64,
}

impl Default for AblationParams {
    fn default() -> Self {
        AblationParams {
            pca_out_dim: 512,
            whiten: true,
            rerank: RerankParams::default(),
            min_matches: 10,
            local_sim_threshold: 0.85,
            local_centers: 64,
            local_nprobe: 8,
            kmeans_iters: 15,
            map_k: 100,
            seed: 42,
        }
    }
}

/// One report row: a stage and its mAP@k.
#[derive(Debug, Clone, PartialEq)]
pub struct AblationRow {
    pub stage: AblationStage,
    pub map_at_k: f64,
}

/// Runs the requested stages cumulatively and reports mAP@k per stage.
///
/// Stage states build on each other in pipeline order regardless of the
/// order requested; each stage is computed once. Search is exact
/// throughout — the ablation measures descriptor and reranking quality,
/// not index recall.
pub fn ablation_run(
    inputs: &AblationInputs,
    stages: &[AblationStage],
    params: &AblationParams,
) -> Result<Vec<AblationRow>> {
    if stages.is_empty() {
        return Err(Error::validation("ablation needs at least one stage"));
    }
    params.rerank.validate()?;
    if params.map_k == 0 {
        return Err(Error::validation("map_k must be at least 1"));
    }
    if inputs.gallery_models.is_empty() {
        return Err(Error::validation("ablation needs at least one model"));
    }
    if inputs.gallery_models.len() != inputs.query_models.len() {
        return Err(Error::validation(format!(
            "{} gallery model sets vs {} query model sets",
            inputs.gallery_models.len(),
            inputs.query_models.len()
        )));
    }
    for (i, (g, q)) in inputs
        .gallery_models
        .iter()
        .zip(inputs.query_models)
        .enumerate()
    {
        if g.dim() != q.dim() {
            return Err(Error::validation(format!(
                "model {i}: gallery dimension {} != query dimension {}",
                g.dim(),
                q.dim()
            )));
        }
    }
    let deepest = *stages.iter().max().expect("stages nonempty");
    if deepest >= AblationStage::Rerank
        && (inputs.gallery_locals.is_none() || inputs.query_locals.is_none())
    {
        return Err(Error::validation(
            "rerank stage needs local descriptors for both gallery and queries",
        ));
    }

    let mut metrics: BTreeMap<AblationStage, f64> = BTreeMap::new();
    let depth = params.map_k.max(params.rerank.neighbor_depth);
    // Queries without retrieval truth (distractors) are searched like any
    // other but excluded from the metric.
    let keep_truth = |lists: Vec<RankedList>| -> Vec<RankedList> {
        lists
            .into_iter()
            .filter(|l| inputs.truth.retrieval.contains_key(&l.query))
            .collect()
    };

    if stages.contains(&AblationStage::Baseline) {
        let g = concat_descriptors(&inputs.gallery_models[..1])?;
        let q = concat_descriptors(&inputs.query_models[..1])?;
        let lists = keep_truth(search_batch(
            &ExactSearcher { gallery: &g, exclude_self: false },
            &q,
            params.map_k,
        )?);
        metrics.insert(AblationStage::Baseline, map_at_k(&lists, inputs.truth, params.map_k)?);
    }

    if deepest >= AblationStage::ConcatPca {
        let g_cat = concat_descriptors(inputs.gallery_models)?;
        let q_cat = concat_descriptors(inputs.query_models)?;
        let pca = PcaModel::fit(&g_cat, params.pca_out_dim, params.whiten)?;
        let g1 = pca.apply_set(&g_cat)?;
        let q1 = pca.apply_set(&q_cat)?;
        if stages.contains(&AblationStage::ConcatPca) {
            let lists = keep_truth(search_batch(
                &ExactSearcher { gallery: &g1, exclude_self: false },
                &q1,
                params.map_k,
            )?);
            metrics.insert(AblationStage::ConcatPca, map_at_k(&lists, inputs.truth, params.map_k)?);
        }

        if deepest >= AblationStage::DbaAqe {
            // Expansion without a verification signal: nothing is verified,
            // so the weight schedule stays at its base length.
            let g2 = run_dba(
                &g1,
                &ExactSearcher { gallery: &g1, exclude_self: true },
                &AcceptNone,
                &params.rerank,
            )?;
            let q2 = run_qe(
                &q1,
                &g2,
                &ExactSearcher { gallery: &g2, exclude_self: false },
                &AcceptNone,
                &params.rerank,
            )?;
            let lists = keep_truth(search_batch(
                &ExactSearcher { gallery: &g2, exclude_self: false },
                &q2,
                depth,
            )?);
            if stages.contains(&AblationStage::DbaAqe) {
                metrics.insert(AblationStage::DbaAqe, map_at_k(&lists, inputs.truth, params.map_k)?);
            }

            if deepest >= AblationStage::Rerank {
                let gallery_locals = inputs.gallery_locals.expect("checked above");
                let query_locals = inputs.query_locals.expect("checked above");
                let dim = gallery_locals.dim();
                let points: Vec<&[f32]> = gallery_locals
                    .iter()
                    .flat_map(|(_, flat)| flat.chunks_exact(dim))
                    .collect();
                let k = params.local_centers.clamp(1, points.len());
                let centroids = kmeans_fit(
                    &points,
                    gallery_locals.dim(),
                    k,
                    params.kmeans_iters,
                    params.seed,
                )?;
                let index = IvfIndex::build_from_locals(gallery_locals, centroids)?;
                let nprobe = params.local_nprobe.clamp(1, index.k());
                let matches = match_batch(
                    query_locals,
                    &index,
                    nprobe,
                    params.local_sim_threshold,
                    false,
                )?;
                let by_query = match_results_by_query(matches);
                let verifier = LocalMatchVerifier {
                    results: &by_query,
                    min_matches: params.min_matches,
                };
                let reranked: Vec<RankedList> = lists
                    .iter()
                    .map(|l| verify_neighbors(l, &verifier).0)
                    .collect();
                metrics.insert(
                    AblationStage::Rerank,
                    map_at_k(&reranked, inputs.truth, params.map_k)?,
                );
            }
        }
    }

    Ok(stages
        .iter()
        .map(|s| AblationRow { stage: *s, map_at_k: metrics[s] })
        .collect())
}

/// Writes ablation rows as `stage,map_at_k`.
pub fn write_ablation_csv(rows: &[AblationRow], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, &e))?;
    w.write_record(["stage", "map_at_k"]).map_err(|e| csv_error(path, &e))?;
    for row in rows {
        w.write_record([row.stage.to_string(), format!("{:.6}", row.map_at_k)])
            .map_err(|e| csv_error(path, &e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Renders ablation rows as an aligned plain-text table.
pub fn format_ablation_table(rows: &[AblationRow]) -> String {
    let width = rows
        .iter()
        .map(|r| r.stage.to_string().len())
        .chain(["stage".len()])
        .max()
        .unwrap_or(5);
    let mut out = format!("{:width$}  map@k\n", "stage");
    for row in rows {
        out.push_str(&format!("{:width$}  {:.6}\n", row.stage.to_string(), row.map_at_k));
    }
    out
}
