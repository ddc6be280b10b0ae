//! Local-descriptor matching between a query image and indexed gallery
//! points, used as a cheap verification signal (no geometric model is run).
//!
//! Each query point probes the nearest `nprobe` centroid lists of a local
//! IVF index and claims its single best-scoring indexed point; if that best
//! similarity reaches `sim_threshold`, the owning gallery image earns one
//! match. An image's match count against the query is then compared to a
//! minimum to decide whether the pair is "verified".

use std::collections::BTreeMap;
use std::path::Path;

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::dot;
use crate::search::IvfIndex;
use crate::store::text::{csv_error, expect_csv_header, open_csv};
use crate::store::{ImageId, LocalDescriptorSet};

/// Per-gallery-image match counts for one query image. Iteration order is
/// ascending candidate id (BTreeMap), so exports are deterministic.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchResult {
    pub query: ImageId,
    counts: BTreeMap<ImageId, u32>,
}

impl MatchResult {
    pub fn new(query: ImageId) -> Self {
        MatchResult {
            query,
            counts: BTreeMap::new(),
        }
    }

    /// Match count for `candidate` (zero if it never won a point).
    pub fn count(&self, candidate: &ImageId) -> u32 {
        self.counts.get(candidate).copied().unwrap_or(0)
    }

    pub fn is_empty(&self) -> bool {
        self.counts.is_empty()
    }

    /// Total matches across all candidates (at most the query point count).
    pub fn total(&self) -> u32 {
        self.counts.values().sum()
    }

    pub fn iter(&self) -> impl Iterator<Item = (&ImageId, u32)> + '_ {
        self.counts.iter().map(|(id, &c)| (id, c))
    }

    fn add(&mut self, candidate: &ImageId) {
        *self.counts.entry(candidate.clone()).or_insert(0) += 1;
    }
}

/// `true` when `candidate` accumulated at least `min_matches` matches.
/// `min_matches == 0` accepts every pair.
pub fn verify_pair(result: &MatchResult, candidate: &ImageId, min_matches: u32) -> bool {
    result.count(candidate) >= min_matches
}

/// Matches one query image's local points against the index.
///
/// `exclude` drops one owning image from consideration (used when the query
/// itself is part of the index, e.g. gallery-vs-gallery verification).
/// Ties for a point's best match go to the lower owner id, then the lower
/// point index, so results are reproducible.
pub fn match_images(
    query: &ImageId,
    points: &[&[f32]],
    index: &IvfIndex,
    nprobe: usize,
    sim_threshold: f32,
    exclude: Option<&ImageId>,
) -> Result<MatchResult> {
    if !(0.0..=1.0).contains(&sim_threshold) {
        return Err(Error::validation(format!(
            "sim_threshold {sim_threshold} outside [0, 1]"
        )));
    }
    let mut result = MatchResult::new(query.clone());
    let dim = index.dim();
    for p in points {
        if p.len() != dim {
            return Err(Error::validation(format!(
                "query point has dimension {}, index has {dim}",
                p.len()
            )));
        }
        let probes = index.probe_order(p, nprobe)?;
        let mut best: Option<(f32, &ImageId, u32)> = None;
        for c in probes {
            for (_, owner, pi, v) in index.list_entries(c) {
                if exclude == Some(owner) {
                    continue;
                }
                let score = dot(p, v);
                let better = match &best {
                    None => true,
                    Some((bs, bo, bp)) => {
                        score > *bs
                            || (score == *bs
                                && (owner < *bo || (owner == *bo && pi < *bp)))
                    }
                };
                if better {
                    best = Some((score, owner, pi));
                }
            }
        }
        if let Some((score, owner, _)) = best {
            if score >= sim_threshold {
                result.add(owner);
            }
        }
    }
    Ok(result)
}

/// Matches every image of `queries` (parallel, order-preserving). With
/// `exclude_self`, each query's own id is excluded from the index side.
pub fn match_batch(
    queries: &LocalDescriptorSet,
    index: &IvfIndex,
    nprobe: usize,
    sim_threshold: f32,
    exclude_self: bool,
) -> Result<Vec<MatchResult>> {
    queries
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(id, _)| {
            let points: Vec<&[f32]> = queries.points(id).collect();
            let exclude = exclude_self.then_some(*id);
            match_images(id, &points, index, nprobe, sim_threshold, exclude)
        })
        .collect()
}

/// Indexes match results by query id, as verification wants them.
pub fn match_results_by_query(results: Vec<MatchResult>) -> IndexMap<ImageId, MatchResult> {
    results.into_iter().map(|r| (r.query.clone(), r)).collect()
}

/// Writes match counts as `query_id,candidate_id,matches` rows (queries in
/// input order, candidates in ascending id order). Queries with no matches
/// produce no rows; a missing query reads back as "zero matches", which is
/// exactly how verification treats it.
pub fn save_matches(results: &[MatchResult], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, &e))?;
    w.write_record(["query_id", "candidate_id", "matches"])
        .map_err(|e| csv_error(path, &e))?;
    for r in results {
        for (candidate, count) in r.iter() {
            w.write_record([r.query.as_str(), candidate.as_str(), &count.to_string()])
                .map_err(|e| csv_error(path, &e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads match counts written by [`save_matches`].
pub fn load_matches(path: &Path) -> Result<Vec<MatchResult>> {
    let mut reader = open_csv(path)?;
    expect_csv_header(&mut reader, path, &["query_id", "candidate_id", "matches"])?;
    let mut results: Vec<MatchResult> = Vec::new();
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
        let query =
            ImageId::new(&record[0]).map_err(|e| Error::format(path, offset, e.to_string()))?;
        let candidate =
            ImageId::new(&record[1]).map_err(|e| Error::format(path, offset, e.to_string()))?;
        let count: u32 = record[2]
            .parse()
            .map_err(|e| Error::format(path, offset, format!("bad count {:?}: {e}", &record[2])))?;
        match results.last_mut() {
            Some(last) if last.query == query => {
                last.counts.insert(candidate, count);
            }
            _ => {
                let mut r = MatchResult::new(query);
                r.counts.insert(candidate, count);
                results.push(r);
            }
        }
    }
    Ok(results)
}
