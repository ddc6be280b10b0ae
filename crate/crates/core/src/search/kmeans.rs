//! Seeded k-means (k-means++ initialization, Lloyd iterations).
//!
//! All randomness comes from the caller's seed, assignments are computed in
//! parallel but consumed in input order, and centroid updates accumulate
//! sequentially — so the same seed yields bit-identical centroids for any
//! worker count.

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;

use crate::error::{Error, Result};

/// Squared Euclidean distance.
fn dist2(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        let d = a[i] - b[i];
        acc += d * d;
    }
    acc
}

/// A fitted set of cluster centers plus the final within-cluster sum of
/// squared distances (inertia).
#[derive(Debug, Clone, PartialEq)]
pub struct Centroids {
    dim: usize,
    data: Vec<f32>,
    inertia: f64,
}

impl Centroids {
    /// Wraps raw centroid vectors (`data.len()` must be a positive multiple
    /// of `dim`). Used by index loaders and tests; `kmeans_fit` is the
    /// normal constructor.
    pub fn from_vectors(dim: usize, data: Vec<f32>, inertia: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::validation("centroid dimension must be positive"));
        }
        if data.is_empty() || !data.len().is_multiple_of(dim) {
            return Err(Error::validation(format!(
                "centroid data length {} is not a positive multiple of dim {dim}",
                data.len()
            )));
        }
        if let Some(i) = data.iter().position(|v| !v.is_finite()) {
            return Err(Error::validation(format!(
                "centroid data has non-finite value at index {i}"
            )));
        }
        Ok(Centroids { dim, data, inertia })
    }

    pub fn k(&self) -> usize {
        self.data.len() / self.dim
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn center(&self, i: usize) -> &[f32] {
        &self.data[i * self.dim..(i + 1) * self.dim]
    }

    pub fn data(&self) -> &[f32] {
        &self.data
    }

    pub fn inertia(&self) -> f64 {
        self.inertia
    }

    /// Index and squared distance of the nearest center (ties go to the
    /// lowest index).
    pub fn nearest(&self, point: &[f32]) -> (usize, f32) {
        debug_assert_eq!(point.len(), self.dim);
        let mut best = (0usize, f32::INFINITY);
        for i in 0..self.k() {
            let d = dist2(point, self.center(i));
            if d < best.1 {
                best = (i, d);
            }
        }
        best
    }

    /// Center indices ordered by ascending squared distance (ties by
    /// ascending index); the first `n` entries are the probe set.
    pub fn nearest_n(&self, point: &[f32], n: usize) -> Vec<usize> {
        let mut order: Vec<(usize, f32)> = (0..self.k())
            .map(|i| (i, dist2(point, self.center(i))))
            .collect();
        order.sort_by(|(ia, da), (ib, db)| {
            da.partial_cmp(db)
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(ia.cmp(ib))
        });
        order.truncate(n);
        order.into_iter().map(|(i, _)| i).collect()
    }
}

fn assign_all(points: &[&[f32]], centroids: &Centroids) -> Vec<u32> {
    points
        .par_iter()
        .map(|p| centroids.nearest(p).0 as u32)
        .collect()
}

/// k-means++ seeding: first center uniform, each next center sampled with
/// probability proportional to squared distance from the chosen set. If all
/// remaining distances are zero (fewer distinct points than k), the
/// lowest-index point not already chosen is taken.
fn seed_centers(points: &[&[f32]], dim: usize, k: usize, rng: &mut ChaCha8Rng) -> Vec<f32> {
    let n = points.len();
    let mut chosen_idx: Vec<usize> = Vec::with_capacity(k);
    let mut centers = Vec::with_capacity(k * dim);
    let first = rng.random_range(0..n);
    chosen_idx.push(first);
    centers.extend_from_slice(points[first]);

    let mut d2: Vec<f64> = points
        .iter()
        .map(|p| f64::from(dist2(p, points[first])))
        .collect();
    while chosen_idx.len() < k {
        let total: f64 = d2.iter().sum();
        let next = if total > 0.0 {
            let dist = WeightedIndex::new(d2.iter().copied()).expect("positive total weight");
            dist.sample(rng)
        } else {
            (0..n)
                .find(|i| !chosen_idx.contains(i))
                .expect("n >= k guarantees an unchosen point")
        };
        chosen_idx.push(next);
        centers.extend_from_slice(points[next]);
        for (i, p) in points.iter().enumerate() {
            d2[i] = d2[i].min(f64::from(dist2(p, points[next])));
        }
    }
    centers
}

/// Recomputes each center as the mean of its assigned points. Empty clusters
/// steal the point currently farthest from its own center (ties to the
/// lowest point index), which keeps total inertia non-increasing.
fn update_centers(
    points: &[&[f32]],
    dim: usize,
    k: usize,
    assign: &mut [u32],
    centers: &mut [f32],
) {
    let mut sums = vec![0.0f64; k * dim];
    let mut counts = vec![0u64; k];
    for (p, &a) in points.iter().zip(assign.iter()) {
        let a = a as usize;
        counts[a] += 1;
        let row = &mut sums[a * dim..(a + 1) * dim];
        for (s, &x) in row.iter_mut().zip(*p) {
            *s += f64::from(x);
        }
    }
    for c in 0..k {
        if counts[c] == 0 {
            continue;
        }
        let inv = 1.0 / counts[c] as f64;
        for d in 0..dim {
            centers[c * dim + d] = (sums[c * dim + d] * inv) as f32;
        }
    }
    // Repair empty clusters deterministically.
    for c in 0..k {
        if counts[c] > 0 {
            continue;
        }
        let mut far = (0usize, -1.0f32);
        for (i, p) in points.iter().enumerate() {
            let a = assign[i] as usize;
            if counts[a] <= 1 {
                continue; // do not empty another cluster
            }
            let d = dist2(p, &centers[a * dim..(a + 1) * dim]);
            if d > far.1 {
                far = (i, d);
            }
        }
        let (i, _) = far;
        counts[assign[i] as usize] -= 1;
        assign[i] = c as u32;
        counts[c] = 1;
        centers[c * dim..(c + 1) * dim].copy_from_slice(points[i]);
    }
}

/// Fits `k` centers to `points` with at most `max_iters` Lloyd iterations.
///
/// Requires `1 <= k <= points.len()` and `max_iters >= 1`. Deterministic in
/// `seed`; thread count never changes the result. Inertia (stored on the
/// returned [`Centroids`]) is non-increasing in `max_iters` for a fixed
/// seed.
pub fn kmeans_fit(
    points: &[&[f32]],
    dim: usize,
    k: usize,
    max_iters: usize,
    seed: u64,
) -> Result<Centroids> {
    if k == 0 {
        return Err(Error::validation("k must be at least 1"));
    }
    if points.len() < k {
        return Err(Error::validation(format!(
            "cannot fit {k} clusters to {} points",
            points.len()
        )));
    }
    if max_iters == 0 {
        return Err(Error::validation("max_iters must be at least 1"));
    }
    if let Some(p) = points.iter().find(|p| p.len() != dim) {
        return Err(Error::validation(format!(
            "point has dimension {}, expected {dim}",
            p.len()
        )));
    }

    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut centers = seed_centers(points, dim, k, &mut rng);
    let mut centroids = Centroids::from_vectors(dim, centers.clone(), 0.0)?;
    let mut assign = assign_all(points, &centroids);

    for _ in 0..max_iters {
        update_centers(points, dim, k, &mut assign, &mut centers);
        centroids.data.copy_from_slice(&centers);
        let new_assign = assign_all(points, &centroids);
        let converged = new_assign == assign;
        assign = new_assign;
        if converged {
            break;
        }
    }

    let mut inertia = 0.0f64;
    for (p, &a) in points.iter().zip(assign.iter()) {
        inertia += f64::from(dist2(p, centroids.center(a as usize)));
    }
    centroids.inertia = inertia;
    Ok(centroids)
}
