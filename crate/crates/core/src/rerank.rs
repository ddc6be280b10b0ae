//! Verification-weighted database augmentation (DBA) and query expansion
//! (QE), plus same-category promotion of ranked lists.
//!
//! Both DBA and QE aggregate an image's descriptor with its top retrieved
//! neighbors using linearly decaying weights. Verified neighbors (same
//! landmark according to a [`Verifier`]) are stably moved to the front of
//! the neighbor list first, so trusted images receive the largest weights.
//! With `M` verified neighbors the weight count is
//!
//! ```text
//! N = base          if M <= base
//! N = min(M, cap)   otherwise
//! weight(x) = (N - x) / N   for x = 0..N
//! ```
//!
//! DBA defaults to base 10 / cap 20, QE to base 3 / cap 6. By default the
//! image's own descriptor occupies weight slot 0 (weight 1.0) and neighbors
//! fill the remaining slots; the `self_outside` switch instead gives the own
//! descriptor weight 1.0 *in addition to* `N` weighted neighbors.

use indexmap::IndexMap;
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::features::l2_normalize;
use crate::localmatch::{verify_pair, MatchResult};
use crate::search::{NeighborSearch, RankedList};
use crate::store::{EmbeddingSet, ImageId, LabelMap};

/// Tuning for DBA/QE (neighbor depth, weight schedules, self placement).
#[derive(Debug, Clone, PartialEq)]
pub struct RerankParams {
    /// How many neighbors to retrieve before verification.
    pub neighbor_depth: usize,
    pub dba_base: usize,
    pub dba_cap: usize,
    pub qe_base: usize,
    pub qe_cap: usize,
    /// When set, the own descriptor is weighted 1.0 outside the schedule
    /// instead of occupying slot 0.
    pub self_outside: bool,
}

impl Default for RerankParams {
    fn default() -> Self {
        RerankParams {
            neighbor_depth: 300,
            dba_base: 10,
            dba_cap: 20,
            qe_base: 3,
            qe_cap: 6,
            self_outside: false,
        }
    }
}

impl RerankParams {
    pub fn validate(&self) -> Result<()> {
        if self.neighbor_depth == 0 {
            return Err(Error::validation("neighbor_depth must be at least 1"));
        }
        for (name, base, cap) in [
            ("dba", self.dba_base, self.dba_cap),
            ("qe", self.qe_base, self.qe_cap),
        ] {
            if base == 0 {
                return Err(Error::validation(format!("{name}_base must be at least 1")));
            }
            if cap < base {
                return Err(Error::validation(format!(
                    "{name}_cap {cap} must be >= {name}_base {base}"
                )));
            }
        }
        Ok(())
    }
}

/// The linearly decaying weight schedule for `m` verified neighbors.
pub fn expansion_weights(m: usize, base: usize, cap: usize) -> Vec<f64> {
    let n = if m <= base { base } else { m.min(cap) };
    (0..n).map(|x| (n - x) as f64 / n as f64).collect()
}

/// DBA schedule: base 10, cap 20.
pub fn dba_weights(m: usize, params: &RerankParams) -> Vec<f64> {
    expansion_weights(m, params.dba_base, params.dba_cap)
}

/// QE schedule: base 3, cap 6.
pub fn qe_weights(m: usize, params: &RerankParams) -> Vec<f64> {
    expansion_weights(m, params.qe_base, params.qe_cap)
}

/// Decides whether a retrieved candidate shows the same landmark as the
/// query. Implementations must be deterministic and thread-safe.
pub trait Verifier: Sync {
    fn verify(&self, query: &ImageId, candidate: &ImageId) -> bool;
}

impl<F: Fn(&ImageId, &ImageId) -> bool + Sync> Verifier for F {
    fn verify(&self, query: &ImageId, candidate: &ImageId) -> bool {
        self(query, candidate)
    }
}

/// Accepts every pair.
pub struct AcceptAll;

impl Verifier for AcceptAll {
    fn verify(&self, _: &ImageId, _: &ImageId) -> bool {
        true
    }
}

/// Rejects every pair (plain unverified expansion).
pub struct AcceptNone;

impl Verifier for AcceptNone {
    fn verify(&self, _: &ImageId, _: &ImageId) -> bool {
        false
    }
}

/// Verifies a pair when both sides carry the same label. The query and
/// candidate sides may come from different sources (e.g. classifier
/// predictions for queries, ground-truth labels for the gallery).
pub struct LabelVerifier<'a> {
    pub query_labels: &'a LabelMap,
    pub candidate_labels: &'a LabelMap,
}

impl Verifier for LabelVerifier<'_> {
    fn verify(&self, query: &ImageId, candidate: &ImageId) -> bool {
        match (self.query_labels.get(query), self.candidate_labels.get(candidate)) {
            (Some(a), Some(b)) => a == b,
            _ => false,
        }
    }
}

/// Verifies a pair when the query's local-match count against the candidate
/// reaches `min_matches`.
pub struct LocalMatchVerifier<'a> {
    pub results: &'a IndexMap<ImageId, MatchResult>,
    pub min_matches: u32,
}

impl Verifier for LocalMatchVerifier<'_> {
    fn verify(&self, query: &ImageId, candidate: &ImageId) -> bool {
        self.results
            .get(query)
            .is_some_and(|r| verify_pair(r, candidate, self.min_matches))
    }
}

/// Verified if any inner verifier accepts.
pub struct AnyVerifier<'a>(pub Vec<&'a dyn Verifier>);

impl Verifier for AnyVerifier<'_> {
    fn verify(&self, query: &ImageId, candidate: &ImageId) -> bool {
        self.0.iter().any(|v| v.verify(query, candidate))
    }
}

/// Verified only if all inner verifiers accept.
pub struct AllVerifier<'a>(pub Vec<&'a dyn Verifier>);

impl Verifier for AllVerifier<'_> {
    fn verify(&self, query: &ImageId, candidate: &ImageId) -> bool {
        self.0.iter().all(|v| v.verify(query, candidate))
    }
}

/// Stable-partitions a ranked list so verified hits come first (verified
/// block and unverified block each keep their internal order). Returns the
/// reordered list and `M`, the number of verified hits.
pub fn verify_neighbors(ranked: &RankedList, verifier: &dyn Verifier) -> (RankedList, usize) {
    let mut verified = Vec::new();
    let mut rest = Vec::new();
    for hit in &ranked.hits {
        if verifier.verify(&ranked.query, &hit.0) {
            verified.push(hit.clone());
        } else {
            rest.push(hit.clone());
        }
    }
    let m = verified.len();
    verified.extend(rest);
    (RankedList::new(ranked.query.clone(), verified), m)
}

/// Weighted sum of descriptors followed by l2 normalization. Lengths must
/// match exactly; accumulation is in f64.
pub fn aggregate(descriptors: &[&[f32]], weights: &[f64]) -> Result<Vec<f32>> {
    if descriptors.is_empty() {
        return Err(Error::validation("aggregate requires at least one descriptor"));
    }
    if descriptors.len() != weights.len() {
        return Err(Error::validation(format!(
            "{} descriptors but {} weights",
            descriptors.len(),
            weights.len()
        )));
    }
    let dim = descriptors[0].len();
    let mut sum = vec![0.0f64; dim];
    for (d, &w) in descriptors.iter().zip(weights) {
        if d.len() != dim {
            return Err(Error::validation(format!(
                "descriptor dimension {} != {dim}",
                d.len()
            )));
        }
        for (s, &x) in sum.iter_mut().zip(*d) {
            *s += w * f64::from(x);
        }
    }
    let as_f32: Vec<f32> = sum.iter().map(|&x| x as f32).collect();
    Ok(l2_normalize(&as_f32))
}

/// Expands one descriptor with its verified-reordered neighbors under the
/// given weight schedule.
fn expand_one(
    own: &[f32],
    neighbors: &RankedList,
    gallery: &EmbeddingSet,
    weights: &[f64],
    self_outside: bool,
) -> Result<Vec<f32>> {
    let mut descriptors: Vec<&[f32]> = Vec::with_capacity(weights.len() + 1);
    let mut used_weights: Vec<f64> = Vec::with_capacity(weights.len() + 1);
    if self_outside {
        descriptors.push(own);
        used_weights.push(1.0);
        for (hit, &w) in neighbors.hits.iter().zip(weights) {
            let v = gallery.get(&hit.0).ok_or_else(|| {
                Error::validation(format!("neighbor {} missing from gallery", hit.0))
            })?;
            descriptors.push(v);
            used_weights.push(w);
        }
    } else {
        descriptors.push(own);
        used_weights.push(weights[0]);
        for (hit, &w) in neighbors.hits.iter().zip(&weights[1..]) {
            let v = gallery.get(&hit.0).ok_or_else(|| {
                Error::validation(format!("neighbor {} missing from gallery", hit.0))
            })?;
            descriptors.push(v);
            used_weights.push(w);
        }
    }
    aggregate(&descriptors, &used_weights)
}

/// Database-side augmentation: every gallery descriptor is replaced by the
/// weighted aggregate of itself and its verified-first neighbors (searched
/// within the same gallery, self excluded). Parallel over images; output
/// order matches the input set.
pub fn run_dba(
    gallery: &EmbeddingSet,
    searcher: &dyn NeighborSearch,
    verifier: &dyn Verifier,
    params: &RerankParams,
) -> Result<EmbeddingSet> {
    params.validate()?;
    let expanded: Vec<(ImageId, Vec<f32>)> = gallery
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(id, own)| {
            let ranked = searcher.neighbors(id, own, params.neighbor_depth)?;
            let (reordered, m) = verify_neighbors(&ranked, verifier);
            let weights = dba_weights(m, params);
            let v = expand_one(own, &reordered, gallery, &weights, params.self_outside)?;
            Ok(((*id).clone(), v))
        })
        .collect::<Result<_>>()?;
    let mut out = EmbeddingSet::new(gallery.dim());
    for (id, v) in expanded {
        out.insert(id, v)?;
    }
    Ok(out)
}

/// Query-side expansion against a (typically augmented) gallery. Queries
/// are not part of the gallery, so no self-exclusion applies on the search.
pub fn run_qe(
    queries: &EmbeddingSet,
    gallery: &EmbeddingSet,
    searcher: &dyn NeighborSearch,
    verifier: &dyn Verifier,
    params: &RerankParams,
) -> Result<EmbeddingSet> {
    params.validate()?;
    if queries.dim() != gallery.dim() {
        return Err(Error::validation(format!(
            "query dimension {} != gallery dimension {}",
            queries.dim(),
            gallery.dim()
        )));
    }
    let expanded: Vec<(ImageId, Vec<f32>)> = queries
        .iter()
        .collect::<Vec<_>>()
        .par_iter()
        .map(|(id, own)| {
            let ranked = if gallery.is_empty() {
                RankedList::new((*id).clone(), Vec::new())
            } else {
                searcher.neighbors(id, own, params.neighbor_depth)?
            };
            let (reordered, m) = verify_neighbors(&ranked, verifier);
            let weights = qe_weights(m, params);
            let v = expand_one(own, &reordered, gallery, &weights, params.self_outside)?;
            Ok(((*id).clone(), v))
        })
        .collect::<Result<_>>()?;
    let mut out = EmbeddingSet::new(queries.dim());
    for (id, v) in expanded {
        out.insert(id, v)?;
    }
    Ok(out)
}

/// Stable-partitions a ranked list so hits sharing the query's (predicted)
/// category come first; scores are untouched. With no query label the list
/// is returned unchanged.
pub fn category_promote(
    ranked: &RankedList,
    gallery_labels: &LabelMap,
    query_label: Option<&str>,
) -> RankedList {
    let Some(label) = query_label else {
        return ranked.clone();
    };
    let mut same = Vec::new();
    let mut rest = Vec::new();
    for hit in &ranked.hits {
        if gallery_labels.get(&hit.0) == Some(label) {
            same.push(hit.clone());
        } else {
            rest.push(hit.clone());
        }
    }
    same.extend(rest);
    RankedList::new(ranked.query.clone(), same)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::search::ExactSearcher;
    use proptest::prelude::*;
    use rand::{Rng, SeedableRng};
    use rand_chacha::ChaCha8Rng;

    fn id(s: &str) -> ImageId {
        ImageId::new(s).unwrap()
    }

    /// Independent restatement of the schedule rule, straight from the
    /// piecewise definition.
    fn weights_oracle(m: usize, base: usize, cap: usize) -> Vec<f64> {
        let n = if m <= base {
            base
        } else if m < cap {
            m
        } else {
            cap
        };
        let mut out = Vec::new();
        for x in 0..n {
            out.push((n as f64 - x as f64) / n as f64);
        }
        out
    }

    #[test]
    fn dba_weight_examples() {
        let p = RerankParams::default();
        let w5 = dba_weights(5, &p);
        assert_eq!(w5.len(), 10);
        assert_eq!(w5[0], 1.0);
        assert_eq!(w5[9], 0.1);
        assert_eq!(w5, weights_oracle(5, 10, 20));

        let w15 = dba_weights(15, &p);
        assert_eq!(w15.len(), 15);
        assert_eq!(w15[1], 14.0 / 15.0);
        assert_eq!(w15, weights_oracle(15, 10, 20));

        let w30 = dba_weights(30, &p);
        assert_eq!(w30.len(), 20);
        assert_eq!(w30[19], 1.0 / 20.0);
        assert_eq!(w30, weights_oracle(30, 10, 20));
    }

    #[test]
    fn qe_weight_examples() {
        let p = RerankParams::default();
        assert_eq!(qe_weights(2, &p), vec![1.0, 2.0 / 3.0, 1.0 / 3.0]);
        assert_eq!(qe_weights(2, &p), weights_oracle(2, 3, 6));
        assert_eq!(qe_weights(5, &p).len(), 5);
        assert_eq!(qe_weights(5, &p), weights_oracle(5, 3, 6));
        assert_eq!(qe_weights(10, &p).len(), 6);
        assert_eq!(qe_weights(10, &p), weights_oracle(10, 3, 6));
    }

    #[test]
    fn weight_schedules_decay_strictly_within_unit_interval() {
        for m in 0..60 {
            for (base, cap) in [(10usize, 20usize), (3, 6), (1, 1), (4, 9)] {
                let w = expansion_weights(m, base, cap);
                assert_eq!(w, weights_oracle(m, base, cap), "m={m} base={base} cap={cap}");
                assert!(w.len() >= base.min(cap));
                assert!(w.len() <= cap);
                assert_eq!(w[0], 1.0);
                for pair in w.windows(2) {
                    assert!(pair[0] > pair[1]);
                }
                for &x in &w {
                    assert!(x > 0.0 && x <= 1.0);
                }
            }
        }
    }

    #[test]
    fn verify_neighbors_moves_verified_to_front_stably() {
        let ranked = RankedList::new(
            id("q"),
            vec![(id("a"), 0.9), (id("b"), 0.8), (id("c"), 0.7)],
        );
        let accept_c = |_: &ImageId, cand: &ImageId| cand == &id("c");
        let (out, m) = verify_neighbors(&ranked, &accept_c);
        assert_eq!(m, 1);
        let ids: Vec<&str> = out.hits.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, vec!["c", "a", "b"]);
        // Scores travel with their ids.
        assert_eq!(out.hits[0].1, 0.7);

        let (all, m_all) = verify_neighbors(&ranked, &AcceptAll);
        assert_eq!(m_all, 3);
        assert_eq!(all.hits, ranked.hits);

        let (none, m_none) = verify_neighbors(&ranked, &AcceptNone);
        assert_eq!(m_none, 0);
        assert_eq!(none.hits, ranked.hits);
    }

    #[test]
    fn aggregate_single_unit_descriptor_unchanged() {
        let d: &[f32] = &[0.6, 0.8];
        let out = aggregate(&[d], &[1.0]).unwrap();
        assert_eq!(out, vec![0.6, 0.8]);
    }

    #[test]
    fn aggregate_orthogonal_pair_hand_normalized() {
        let a: &[f32] = &[1.0, 0.0];
        let b: &[f32] = &[0.0, 1.0];
        let out = aggregate(&[a, b], &[1.0, 0.5]).unwrap();
        // Sum is (1, 0.5); norm sqrt(1.25).
        let norm = 1.25f64.sqrt();
        assert!((f64::from(out[0]) - 1.0 / norm).abs() < 1e-6);
        assert!((f64::from(out[1]) - 0.5 / norm).abs() < 1e-6);
    }

    #[test]
    fn aggregate_identical_descriptors_keep_direction() {
        let d: &[f32] = &[0.0, 1.0];
        let out = aggregate(&[d, d, d], &[1.0, 0.5, 0.25]).unwrap();
        assert_eq!(out, vec![0.0, 1.0]);
    }

    #[test]
    fn aggregate_rejects_bad_shapes() {
        let d: &[f32] = &[1.0, 0.0];
        let short: &[f32] = &[1.0];
        assert!(aggregate(&[], &[]).is_err());
        assert!(aggregate(&[d], &[1.0, 0.5]).is_err());
        assert!(aggregate(&[d, short], &[1.0, 0.5]).is_err());
    }

    fn unit_set(rows: &[(&str, Vec<f32>)]) -> EmbeddingSet {
        let mut set = EmbeddingSet::new(rows[0].1.len());
        for (name, v) in rows {
            set.insert(id(name), l2_normalize(v)).unwrap();
        }
        set
    }

    #[test]
    fn dba_on_singleton_gallery_is_identity() {
        let gallery = unit_set(&[("only", vec![3.0, 4.0])]);
        let searcher = ExactSearcher {
            gallery: &gallery,
            exclude_self: true,
        };
        let out = run_dba(&gallery, &searcher, &AcceptAll, &RerankParams::default()).unwrap();
        assert_eq!(out.get(&id("only")).unwrap(), gallery.get(&id("only")).unwrap());
    }

    #[test]
    fn dba_on_identical_cluster_preserves_direction() {
        let gallery = unit_set(&[
            ("a", vec![1.0, 0.0]),
            ("b", vec![1.0, 0.0]),
            ("c", vec![1.0, 0.0]),
        ]);
        let searcher = ExactSearcher {
            gallery: &gallery,
            exclude_self: true,
        };
        let out = run_dba(&gallery, &searcher, &AcceptAll, &RerankParams::default()).unwrap();
        for (_, v) in out.iter() {
            assert!((v[0] - 1.0).abs() < 1e-6);
            assert!(v[1].abs() < 1e-6);
        }
    }

    /// Mean cosine similarity between same-cluster members.
    fn intra_cluster_similarity(set: &EmbeddingSet, labels: &LabelMap) -> f64 {
        let mut total = 0.0f64;
        let mut pairs = 0usize;
        let entries: Vec<_> = set.iter().collect();
        for i in 0..entries.len() {
            for j in (i + 1)..entries.len() {
                if labels.get(entries[i].0) == labels.get(entries[j].0) {
                    total += f64::from(crate::features::dot(entries[i].1, entries[j].1));
                    pairs += 1;
                }
            }
        }
        total / pairs as f64
    }

    #[test]
    fn dba_tightens_noisy_clusters() {
        let mut rng = ChaCha8Rng::seed_from_u64(17);
        let dim = 16;
        let mut gallery = EmbeddingSet::new(dim);
        let mut labels = LabelMap::new();
        for cluster in 0..3 {
            let center: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            for i in 0..8 {
                let noisy: Vec<f32> = center
                    .iter()
                    .map(|&c| c + rng.random_range(-0.4f32..0.4))
                    .collect();
                let name = format!("c{cluster}_{i}");
                gallery.insert(id(&name), l2_normalize(&noisy)).unwrap();
                labels.insert(id(&name), format!("L{cluster}")).unwrap();
            }
        }
        let before = intra_cluster_similarity(&gallery, &labels);
        let searcher = ExactSearcher {
            gallery: &gallery,
            exclude_self: true,
        };
        let verifier = LabelVerifier {
            query_labels: &labels,
            candidate_labels: &labels,
        };
        let out = run_dba(&gallery, &searcher, &verifier, &RerankParams::default()).unwrap();
        let after = intra_cluster_similarity(&out, &labels);
        assert!(
            after > before,
            "intra-cluster similarity should rise: {before} -> {after}"
        );
    }

    #[test]
    fn qe_with_empty_gallery_returns_queries_unchanged() {
        let queries = unit_set(&[("q1", vec![1.0, 0.0]), ("q2", vec![0.0, 1.0])]);
        let gallery = EmbeddingSet::new(2);
        let searcher = ExactSearcher {
            gallery: &gallery,
            exclude_self: false,
        };
        let out = run_qe(&queries, &gallery, &searcher, &AcceptAll, &RerankParams::default())
            .unwrap();
        assert_eq!(out, queries);
    }

    #[test]
    fn qe_with_no_verified_neighbors_uses_top_raw_neighbors() {
        // Gallery with 5 distinct-score neighbors of the query direction.
        let gallery = unit_set(&[
            ("n1", vec![1.0, 0.1]),
            ("n2", vec![1.0, 0.3]),
            ("n3", vec![1.0, 0.6]),
            ("n4", vec![0.3, 1.0]),
            ("n5", vec![0.0, 1.0]),
        ]);
        let queries = unit_set(&[("q", vec![1.0, 0.0])]);
        let searcher = ExactSearcher {
            gallery: &gallery,
            exclude_self: false,
        };
        let params = RerankParams::default();
        let out = run_qe(&queries, &gallery, &searcher, &AcceptNone, &params).unwrap();

        // Oracle: with M = 0 the schedule has N = 3 slots; slot 0 is the
        // query itself, slots 1-2 the two best raw neighbors.
        let ranked = crate::search::knn_exact(
            &id("q"),
            queries.get(&id("q")).unwrap(),
            &gallery,
            params.neighbor_depth,
            false,
        )
        .unwrap();
        let n1 = gallery.get(&ranked.hits[0].0).unwrap();
        let n2 = gallery.get(&ranked.hits[1].0).unwrap();
        let expect = aggregate(
            &[queries.get(&id("q")).unwrap(), n1, n2],
            &[1.0, 2.0 / 3.0, 1.0 / 3.0],
        )
        .unwrap();
        assert_eq!(out.get(&id("q")).unwrap(), expect.as_slice());
    }

    #[test]
    fn qe_moves_queries_toward_their_cluster() {
        let mut rng = ChaCha8Rng::seed_from_u64(23);
        let dim = 12;
        let mut gallery = EmbeddingSet::new(dim);
        let mut g_labels = LabelMap::new();
        let mut q_labels = LabelMap::new();
        let mut queries = EmbeddingSet::new(dim);
        let mut centers = Vec::new();
        for cluster in 0..3 {
            let center: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
            let center = l2_normalize(&center);
            for i in 0..6 {
                let noisy: Vec<f32> = center
                    .iter()
                    .map(|&c| c + rng.random_range(-0.3f32..0.3))
                    .collect();
                let name = format!("g{cluster}_{i}");
                gallery.insert(id(&name), l2_normalize(&noisy)).unwrap();
                g_labels.insert(id(&name), format!("L{cluster}")).unwrap();
            }
            let noisy: Vec<f32> = center
                .iter()
                .map(|&c| c + rng.random_range(-0.5f32..0.5))
                .collect();
            let qname = format!("q{cluster}");
            queries.insert(id(&qname), l2_normalize(&noisy)).unwrap();
            q_labels.insert(id(&qname), format!("L{cluster}")).unwrap();
            centers.push(center);
        }
        let searcher = ExactSearcher {
            gallery: &gallery,
            exclude_self: false,
        };
        let verifier = LabelVerifier {
            query_labels: &q_labels,
            candidate_labels: &g_labels,
        };
        let out = run_qe(&queries, &gallery, &searcher, &verifier, &RerankParams::default())
            .unwrap();
        for (cluster, center) in centers.iter().enumerate() {
            let qid = id(&format!("q{cluster}"));
            let before = crate::features::dot(queries.get(&qid).unwrap(), center);
            let after = crate::features::dot(out.get(&qid).unwrap(), center);
            assert!(
                after >= before - 1e-6,
                "cluster {cluster}: similarity to center fell {before} -> {after}"
            );
        }
    }

    #[test]
    fn self_outside_adds_own_descriptor_beyond_schedule() {
        let gallery = unit_set(&[
            ("n1", vec![1.0, 0.2]),
            ("n2", vec![1.0, 0.4]),
            ("n3", vec![0.2, 1.0]),
        ]);
        let queries = unit_set(&[("q", vec![1.0, 0.0])]);
        let searcher = ExactSearcher {
            gallery: &gallery,
            exclude_self: false,
        };
        let params = RerankParams {
            self_outside: true,
            ..RerankParams::default()
        };
        let out = run_qe(&queries, &gallery, &searcher, &AcceptNone, &params).unwrap();

        let ranked = crate::search::knn_exact(
            &id("q"),
            queries.get(&id("q")).unwrap(),
            &gallery,
            params.neighbor_depth,
            false,
        )
        .unwrap();
        // N = 3 neighbor slots plus the query at weight 1.0.
        let expect = aggregate(
            &[
                queries.get(&id("q")).unwrap(),
                gallery.get(&ranked.hits[0].0).unwrap(),
                gallery.get(&ranked.hits[1].0).unwrap(),
                gallery.get(&ranked.hits[2].0).unwrap(),
            ],
            &[1.0, 1.0, 2.0 / 3.0, 1.0 / 3.0],
        )
        .unwrap();
        assert_eq!(out.get(&id("q")).unwrap(), expect.as_slice());
    }

    #[test]
    fn category_promote_moves_matching_labels_forward() {
        let mut labels = LabelMap::new();
        labels.insert(id("x"), "L1").unwrap();
        labels.insert(id("y"), "L2").unwrap();
        labels.insert(id("z"), "L1").unwrap();
        let ranked = RankedList::new(
            id("q"),
            vec![(id("y"), 0.9), (id("x"), 0.8), (id("z"), 0.7)],
        );
        let promoted = category_promote(&ranked, &labels, Some("L1"));
        let ids: Vec<&str> = promoted.hits.iter().map(|(i, _)| i.as_str()).collect();
        assert_eq!(ids, vec!["x", "z", "y"]);
        assert_eq!(promoted.hits[0].1, 0.8); // scores ride along

        // No query label: unchanged.
        assert_eq!(category_promote(&ranked, &labels, None), ranked);
        // Label matching nothing: unchanged order.
        assert_eq!(category_promote(&ranked, &labels, Some("L9")).hits, ranked.hits);
    }

    #[test]
    fn invalid_params_rejected() {
        let bad_depth = RerankParams {
            neighbor_depth: 0,
            ..RerankParams::default()
        };
        assert!(bad_depth.validate().is_err());
        let bad_cap = RerankParams {
            qe_cap: 2,
            qe_base: 3,
            ..RerankParams::default()
        };
        assert!(bad_cap.validate().is_err());
        let bad_base = RerankParams {
            dba_base: 0,
            ..RerankParams::default()
        };
        assert!(bad_base.validate().is_err());
    }

    proptest! {
        #[test]
        fn verify_neighbors_is_stable_permutation(
            names in proptest::collection::vec("[a-e][0-9]", 0..12),
        ) {
            let hits: Vec<(ImageId, f32)> = names
                .iter()
                .enumerate()
                .filter_map(|(i, n)| {
                    // Skip duplicate ids to satisfy the ranked-list contract.
                    if names[..i].contains(n) { None } else {
                        Some((ImageId::new(n.clone()).unwrap(), 1.0 - i as f32 * 0.01))
                    }
                })
                .collect();
            let ranked = RankedList::new(ImageId::new("q").unwrap(), hits.clone());
            let accept_a = |_: &ImageId, c: &ImageId| c.as_str().starts_with('a');
            let (out, m) = verify_neighbors(&ranked, &accept_a);

            // Same multiset of hits.
            let mut a = out.hits.clone();
            let mut b = hits.clone();
            a.sort_by(|x, y| x.0.cmp(&y.0));
            b.sort_by(|x, y| x.0.cmp(&y.0));
            prop_assert_eq!(a, b);

            // Verified prefix, unverified suffix, both order-preserving.
            for (i, (hit_id, _)) in out.hits.iter().enumerate() {
                prop_assert_eq!(hit_id.as_str().starts_with('a'), i < m);
            }
            let orig_order: Vec<&(ImageId, f32)> = hits
                .iter()
                .filter(|(i, _)| i.as_str().starts_with('a'))
                .collect();
            let new_order: Vec<&(ImageId, f32)> = out.hits[..m].iter().collect();
            prop_assert_eq!(orig_order, new_order);
        }

        #[test]
        fn aggregate_output_is_unit_norm(
            dim in 1usize..5,
            k in 1usize..5,
            seed in 0u64..1000,
        ) {
            let mut rng = ChaCha8Rng::seed_from_u64(seed);
            let descriptors: Vec<Vec<f32>> = (0..k)
                .map(|_| (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect())
                .collect();
            let refs: Vec<&[f32]> = descriptors.iter().map(Vec::as_slice).collect();
            let weights: Vec<f64> = (0..k).map(|_| rng.random_range(0.01..1.0)).collect();
            let out = aggregate(&refs, &weights).unwrap();
            let norm: f64 = out.iter().map(|&x| f64::from(x).powi(2)).sum::<f64>().sqrt();
            // The weighted sum can cancel to zero; otherwise unit norm.
            prop_assert!(norm < 1e-6 || (norm - 1.0).abs() < 1e-5);
        }
    }
}
