//! Nearest-neighbor search over unit-normalized descriptors.
//!
//! Scoring is inner product (cosine similarity on unit vectors); candidate
//! assignment to clusters uses Euclidean distance. Every ranking produced by
//! this module is sorted by descending score with ties broken by ascending
//! image id, so results are total-ordered and reproducible.

pub mod ivf;
pub mod kmeans;

pub use ivf::IvfIndex;
pub use kmeans::{kmeans_fit, Centroids};

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::dot;
use crate::store::text::{csv_error, expect_csv_header, open_csv};
use crate::store::{EmbeddingSet, ImageId};

/// Ranked retrieval result for one query: `(gallery id, score)` pairs in
/// descending score order, ascending id on ties.
#[derive(Debug, Clone, PartialEq)]
pub struct RankedList {
    pub query: ImageId,
    pub hits: Vec<(ImageId, f32)>,
}

impl RankedList {
    pub fn new(query: ImageId, hits: Vec<(ImageId, f32)>) -> Self {
        RankedList { query, hits }
    }

    pub fn len(&self) -> usize {
        self.hits.len()
    }

    pub fn is_empty(&self) -> bool {
        self.hits.is_empty()
    }

    /// The first `k` hits (fewer if the list is shorter).
    pub fn top(&self, k: usize) -> &[(ImageId, f32)] {
        &self.hits[..self.hits.len().min(k)]
    }

    pub fn ids(&self) -> impl Iterator<Item = &ImageId> + '_ {
        self.hits.iter().map(|(id, _)| id)
    }
}

/// Sorts scored candidates into canonical rank order: descending score,
/// ascending id on ties. Scores must be finite.
pub fn sort_ranked(items: &mut [(ImageId, f32)]) {
    items.sort_by(|(ida, sa), (idb, sb)| {
        sb.partial_cmp(sa)
            .unwrap_or(Ordering::Equal)
            .then_with(|| ida.cmp(idb))
    });
}

/// Max-heap element that surfaces the *worst* kept hit at the top: lower
/// score is "greater", and among equal scores the larger id is "greater"
/// (evicted first), which keeps the ascending-id tie rule.
struct HeapHit<'a> {
    score: f32,
    id: &'a ImageId,
}

impl PartialEq for HeapHit<'_> {
    fn eq(&self, other: &Self) -> bool {
        self.score == other.score && self.id == other.id
    }
}

impl Eq for HeapHit<'_> {}

impl PartialOrd for HeapHit<'_> {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for HeapHit<'_> {
    fn cmp(&self, other: &Self) -> Ordering {
        other
            .score
            .partial_cmp(&self.score)
            .unwrap_or(Ordering::Equal)
            .then_with(|| self.id.cmp(other.id))
    }
}

/// Exact top-`k` retrieval of `query` against every gallery descriptor.
///
/// With `exclude_self` set, a gallery entry whose id equals `query_id` is
/// skipped (used when a set is searched against itself). Returns
/// `min(k, candidates)` hits.
pub fn knn_exact(
    query_id: &ImageId,
    query: &[f32],
    gallery: &EmbeddingSet,
    k: usize,
    exclude_self: bool,
) -> Result<RankedList> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if query.len() != gallery.dim() {
        return Err(Error::validation(format!(
            "query has dimension {}, gallery has {}",
            query.len(),
            gallery.dim()
        )));
    }
    let mut heap: BinaryHeap<HeapHit<'_>> = BinaryHeap::with_capacity(k + 1);
    for (id, v) in gallery.iter() {
        if exclude_self && id == query_id {
            continue;
        }
        let hit = HeapHit {
            score: dot(query, v),
            id,
        };
        if heap.len() < k {
            heap.push(hit);
        } else if hit.cmp(heap.peek().expect("nonempty")) == Ordering::Less {
            heap.pop();
            heap.push(hit);
        }
    }
    let hits = heap
        .into_sorted_vec()
        .into_iter()
        .map(|h| (h.id.clone(), h.score))
        .collect();
    Ok(RankedList::new(query_id.clone(), hits))
}

/// Exact retrieval for every query in a set, parallel over queries; output
/// order follows the query set.
pub fn knn_exact_batch(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    k: usize,
    exclude_self: bool,
) -> Result<Vec<RankedList>> {
    queries
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(id, v)| knn_exact(id, v, gallery, k, exclude_self))
        .collect()
}

/// A retrieval backend: given a query descriptor, produce a ranked list.
/// Implementations must be deterministic and shareable across threads.
pub trait NeighborSearch: Sync {
    fn neighbors(&self, query_id: &ImageId, vector: &[f32], k: usize) -> Result<RankedList>;
}

/// Brute-force backend over a gallery set.
pub struct ExactSearcher<'a> {
    pub gallery: &'a EmbeddingSet,
    pub exclude_self: bool,
}

impl NeighborSearch for ExactSearcher<'_> {
    fn neighbors(&self, query_id: &ImageId, vector: &[f32], k: usize) -> Result<RankedList> {
        knn_exact(query_id, vector, self.gallery, k, self.exclude_self)
    }
}

/// Inverted-file backend probing `nprobe` centroid lists per query.
pub struct IvfSearcher<'a> {
    pub index: &'a IvfIndex,
    pub nprobe: usize,
    pub exclude_self: bool,
}

impl NeighborSearch for IvfSearcher<'_> {
    fn neighbors(&self, query_id: &ImageId, vector: &[f32], k: usize) -> Result<RankedList> {
        let exclude = self.exclude_self.then_some(query_id);
        let hits = self.index.search(vector, self.nprobe, k, exclude)?;
        Ok(RankedList::new(query_id.clone(), hits))
    }
}

/// Runs a backend over every query in a set (parallel, order-preserving).
pub fn search_batch(
    searcher: &dyn NeighborSearch,
    queries: &EmbeddingSet,
    k: usize,
) -> Result<Vec<RankedList>> {
    queries
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(id, v)| searcher.neighbors(id, v, k))
        .collect()
}

/// Writes ranked lists as `query_id,gallery_id,score` rows, grouped by query
/// in list order. Float scores use the shortest round-trip decimal form, so
/// save → load → save is byte-identical.
pub fn save_rankings(lists: &[RankedList], path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, &e))?;
    w.write_record(["query_id", "gallery_id", "score"])
        .map_err(|e| csv_error(path, &e))?;
    for list in lists {
        for (id, score) in &list.hits {
            w.write_record([list.query.as_str(), id.as_str(), &score.to_string()])
                .map_err(|e| csv_error(path, &e))?;
        }
    }
    w.flush().map_err(|e| Error::io(path, e))
}

/// Loads ranked lists written by [`save_rankings`]. Consecutive rows sharing
/// a query id form one list; a query id may not reappear after a different
/// query started (that would mean the file was not grouped).
pub fn load_rankings(path: &Path) -> Result<Vec<RankedList>> {
    let mut reader = open_csv(path)?;
    expect_csv_header(&mut reader, path, &["query_id", "gallery_id", "score"])?;
    let mut lists: Vec<RankedList> = Vec::new();
    let mut seen: std::collections::BTreeSet<ImageId> = std::collections::BTreeSet::new();
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
        let query = ImageId::new(&record[0]).map_err(|e| Error::format(path, offset, e.to_string()))?;
        let hit_id = ImageId::new(&record[1]).map_err(|e| Error::format(path, offset, e.to_string()))?;
        let score: f32 = record[2]
            .parse()
            .map_err(|e| Error::format(path, offset, format!("bad score {:?}: {e}", &record[2])))?;
        if !score.is_finite() {
            return Err(Error::format(path, offset, format!("non-finite score {score}")));
        }
        match lists.last_mut() {
            Some(last) if last.query == query => last.hits.push((hit_id, score)),
            _ => {
                if !seen.insert(query.clone()) {
                    return Err(Error::format(
                        path,
                        offset,
                        format!("rows for query {query} are not contiguous"),
                    ));
                }
                lists.push(RankedList::new(query, vec![(hit_id, score)]));
            }
        }
    }
    Ok(lists)
}

/// Writes the retrieval submission: header `id,images`, one row per query,
/// value = the top `k` gallery ids space-separated.
pub fn write_retrieval_submission(lists: &[RankedList], k: usize, path: &Path) -> Result<()> {
    let mut w = csv::Writer::from_path(path).map_err(|e| csv_error(path, &e))?;
    w.write_record(["id", "images"]).map_err(|e| csv_error(path, &e))?;
    for list in lists {
        let images: Vec<&str> = list.top(k).iter().map(|(id, _)| id.as_str()).collect();
        w.write_record([list.query.as_str(), &images.join(" ")])
            .map_err(|e| csv_error(path, &e))?;
    }
    w.flush().map_err(|e| Error::io(path, e))
}
