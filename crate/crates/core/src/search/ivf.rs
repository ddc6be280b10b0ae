//! Inverted-file (IVF) approximate nearest-neighbor index.
//!
//! Points are partitioned into per-centroid posting lists by Euclidean
//! nearest centroid. A query ranks the `nprobe` nearest centroids, scans
//! only their lists, scores candidates by inner product, keeps the best
//! point per owning image, and returns the canonical ranking. The `IVF1`
//! file layout is documented in `docs/formats.md` and round-trips
//! bit-for-bit.

use std::path::Path;

use rayon::prelude::*;

use super::kmeans::Centroids;
use crate::error::{Error, Result};
use crate::features::dot;
use crate::store::wire::{Reader, Writer};
use crate::store::{EmbeddingSet, ImageId, LocalDescriptorSet};

const IVF1_MAGIC: &[u8; 4] = b"IVF1";

/// One centroid's posting list: parallel arrays of owning image id, point
/// index within the owner, and the point vector itself.
#[derive(Debug, Clone, Default, PartialEq)]
struct PostingList {
    owners: Vec<ImageId>,
    point_indices: Vec<u32>,
    data: Vec<f32>,
}

/// IVF index over global descriptors (one point per image) or local
/// descriptors (many points per image).
#[derive(Debug, Clone, PartialEq)]
pub struct IvfIndex {
    centroids: Centroids,
    lists: Vec<PostingList>,
}

impl IvfIndex {
    /// Builds an index over one point per image.
    pub fn build_from_embeddings(set: &EmbeddingSet, centroids: Centroids) -> Result<IvfIndex> {
        if set.dim() != centroids.dim() {
            return Err(Error::validation(format!(
                "descriptor dimension {} does not match centroid dimension {}",
                set.dim(),
                centroids.dim()
            )));
        }
        let entries: Vec<(&ImageId, u32, &[f32])> =
            set.iter().map(|(id, v)| (id, 0u32, v)).collect();
        Ok(Self::build(centroids, &entries))
    }

    /// Builds an index over every local descriptor point; `point_indices`
    /// record each point's position within its image.
    pub fn build_from_locals(set: &LocalDescriptorSet, centroids: Centroids) -> Result<IvfIndex> {
        if set.dim() != centroids.dim() {
            return Err(Error::validation(format!(
                "descriptor dimension {} does not match centroid dimension {}",
                set.dim(),
                centroids.dim()
            )));
        }
        let dim = set.dim();
        let mut entries: Vec<(&ImageId, u32, &[f32])> = Vec::with_capacity(set.total_points());
        for (id, flat) in set.iter() {
            for (i, p) in flat.chunks_exact(dim).enumerate() {
                entries.push((id, i as u32, p));
            }
        }
        Ok(Self::build(centroids, &entries))
    }

    fn build(centroids: Centroids, entries: &[(&ImageId, u32, &[f32])]) -> IvfIndex {
        // Parallel assignment, then sequential scatter in input order so the
        // posting layout is independent of thread count.
        let assignments: Vec<usize> = entries
            .par_iter()
            .map(|(_, _, p)| centroids.nearest(p).0)
            .collect();
        let mut lists = vec![PostingList::default(); centroids.k()];
        for ((id, point_idx, p), &c) in entries.iter().zip(&assignments) {
            let list = &mut lists[c];
            list.owners.push((*id).clone());
            list.point_indices.push(*point_idx);
            list.data.extend_from_slice(p);
        }
        IvfIndex { centroids, lists }
    }

    pub fn centroids(&self) -> &Centroids {
        &self.centroids
    }

    pub fn k(&self) -> usize {
        self.centroids.k()
    }

    pub fn dim(&self) -> usize {
        self.centroids.dim()
    }

    /// Number of posting entries in centroid list `c`.
    pub fn list_len(&self, c: usize) -> usize {
        self.lists[c].owners.len()
    }

    /// Total number of indexed points across all lists.
    pub fn num_points(&self) -> usize {
        self.lists.iter().map(|l| l.owners.len()).sum()
    }

    /// Iterates every posting entry as `(centroid, owner, point_index,
    /// vector)` in storage order.
    pub fn iter_entries(&self) -> impl Iterator<Item = (usize, &ImageId, u32, &[f32])> + '_ {
        (0..self.lists.len()).flat_map(move |c| self.list_entries(c))
    }

    /// Iterates the posting entries of centroid list `c` in storage order.
    pub fn list_entries(&self, c: usize) -> impl Iterator<Item = (usize, &ImageId, u32, &[f32])> + '_ {
        let dim = self.dim();
        let list = &self.lists[c];
        list.owners
            .iter()
            .zip(&list.point_indices)
            .zip(list.data.chunks_exact(dim))
            .map(move |((owner, &pi), v)| (c, owner, pi, v))
    }

    /// Centroid indices to probe for `query`, nearest first.
    pub fn probe_order(&self, query: &[f32], nprobe: usize) -> Result<Vec<usize>> {
        if nprobe == 0 || nprobe > self.k() {
            return Err(Error::validation(format!(
                "nprobe {nprobe} outside [1, {}]",
                self.k()
            )));
        }
        if query.len() != self.dim() {
            return Err(Error::validation(format!(
                "query has dimension {}, index has {}",
                query.len(),
                self.dim()
            )));
        }
        Ok(self.centroids.nearest_n(query, nprobe))
    }

    /// Scores the candidates in `probe` lists against `query`, keeping the
    /// best point per owning image, and returns the top `k` in canonical
    /// order. `exclude` drops one owner id (self-match suppression).
    pub fn search(
        &self,
        query: &[f32],
        nprobe: usize,
        k: usize,
        exclude: Option<&ImageId>,
    ) -> Result<Vec<(ImageId, f32)>> {
        if k == 0 {
            return Err(Error::validation("k must be at least 1"));
        }
        let probes = self.probe_order(query, nprobe)?;
        let mut best: indexmap::IndexMap<&ImageId, f32> = indexmap::IndexMap::new();
        for c in probes {
            let list = &self.lists[c];
            for (owner, v) in list.owners.iter().zip(list.data.chunks_exact(self.dim())) {
                if exclude == Some(owner) {
                    continue;
                }
                let score = dot(query, v);
                best.entry(owner)
                    .and_modify(|s| {
                        if score > *s {
                            *s = score;
                        }
                    })
                    .or_insert(score);
            }
        }
        let mut hits: Vec<(ImageId, f32)> = best
            .into_iter()
            .map(|(id, score)| (id.clone(), score))
            .collect();
        super::sort_ranked(&mut hits);
        hits.truncate(k);
        Ok(hits)
    }

    /// Serializes to `IVF1` (see `docs/formats.md`).
    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::create(path)?;
        w.magic(IVF1_MAGIC)?;
        w.u32(self.k() as u32)?;
        w.u32(self.dim() as u32)?;
        w.f64(self.centroids.inertia())?;
        w.f32_slice(self.centroids.data())?;
        for list in &self.lists {
            let count: u32 = list
                .owners
                .len()
                .try_into()
                .map_err(|_| Error::validation("posting list too large for u32 count"))?;
            w.u32(count)?;
            for ((owner, &pi), v) in list
                .owners
                .iter()
                .zip(&list.point_indices)
                .zip(list.data.chunks_exact(self.dim()))
            {
                w.short_string(owner.as_str())?;
                w.u32(pi)?;
                w.f32_slice(v)?;
            }
        }
        w.finish()
    }

    pub fn load(path: &Path) -> Result<IvfIndex> {
        let mut r = Reader::open(path)?;
        r.magic(IVF1_MAGIC, "IVF index")?;
        let k = r.u32()? as usize;
        let dim = r.u32()? as usize;
        if k == 0 || dim == 0 {
            return Err(r.error_at(4, format!("invalid shape: k={k}, dim={dim}")));
        }
        let inertia = r.f64()?;
        if !inertia.is_finite() || inertia < 0.0 {
            return Err(r.error_at(12, format!("invalid inertia {inertia}")));
        }
        let centroid_data = r.f32_vec(k * dim)?;
        let centroids = Centroids::from_vectors(dim, centroid_data, inertia)
            .map_err(|e| r.error(e.to_string()))?;
        let mut lists = Vec::with_capacity(k);
        for _ in 0..k {
            let count = r.u32()? as usize;
            let mut list = PostingList::default();
            for _ in 0..count {
                let entry_start = r.offset();
                let owner = r.short_string()?;
                let owner =
                    ImageId::new(owner).map_err(|e| r.error_at(entry_start, e.to_string()))?;
                let pi = r.u32()?;
                let v = r.f32_vec(dim)?;
                if let Some(i) = v.iter().position(|x| !x.is_finite()) {
                    return Err(
                        r.error_at(entry_start, format!("non-finite value at component {i}"))
                    );
                }
                list.owners.push(owner);
                list.point_indices.push(pi);
                list.data.extend_from_slice(&v);
            }
            lists.push(list);
        }
        r.expect_eof()?;
        Ok(IvfIndex { centroids, lists })
    }
}
