//! Descriptor post-processing: l2 normalization, multi-model concatenation,
//! and PCA with optional whitening.
//!
//! Concatenation l2-normalizes each model's descriptor before joining them
//! so every model contributes equally regardless of its native scale. PCA is
//! fit on the concatenated gallery: components are ordered by descending
//! eigenvalue, whitening divides each projected coordinate by
//! `sqrt(eigenvalue + 1e-9)`, and projected vectors are l2-normalized again
//! before use. All fitting math runs in f64; the stored model is f32.

use std::path::Path;

use nalgebra::{DMatrix, SymmetricEigen};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::store::wire::{Reader, Writer};
use crate::store::{EmbeddingSet, ImageId};

/// Guard added to eigenvalues before the whitening division so
/// zero-variance components map to zero instead of infinity.
pub const WHITEN_EPS: f64 = 1e-9;

const PCA1_MAGIC: &[u8; 4] = b"PCA1";

/// Inner product of two equal-length vectors (f32 accumulation, sequential,
/// so results are identical across runs and thread counts).
pub fn dot(a: &[f32], b: &[f32]) -> f32 {
    debug_assert_eq!(a.len(), b.len());
    let mut acc = 0.0f32;
    for i in 0..a.len() {
        acc += a[i] * b[i];
    }
    acc
}

/// Returns `v` scaled to unit Euclidean norm. The zero vector is returned
/// unchanged (there is no meaningful direction to keep).
pub fn l2_normalize(v: &[f32]) -> Vec<f32> {
    let mut out = v.to_vec();
    l2_normalize_in_place(&mut out);
    out
}

pub fn l2_normalize_in_place(v: &mut [f32]) {
    let norm_sq: f64 = v.iter().map(|&x| f64::from(x) * f64::from(x)).sum();
    if norm_sq == 0.0 {
        return;
    }
    let inv = 1.0 / norm_sq.sqrt();
    for x in v.iter_mut() {
        *x = (f64::from(*x) * inv) as f32;
    }
}

/// Concatenates per-model descriptor sets into one set of dimension
/// `sum(dims)`, l2-normalizing each model's part first.
///
/// All sets must cover exactly the same image ids; output entry order
/// follows the first set. The concatenated vector is *not* re-normalized as
/// a whole — downstream PCA re-centers anyway and the per-part norms carry
/// no information once each part is unit length.
pub fn concat_descriptors(sets: &[EmbeddingSet]) -> Result<EmbeddingSet> {
    if sets.is_empty() {
        return Err(Error::validation("concat requires at least one descriptor set"));
    }
    let first = &sets[0];
    for (i, set) in sets.iter().enumerate().skip(1) {
        if set.len() != first.len() {
            return Err(Error::validation(format!(
                "descriptor set {i} has {} entries, set 0 has {}",
                set.len(),
                first.len()
            )));
        }
        if let Some(missing) = first.ids().find(|id| !set.contains(id)) {
            return Err(Error::validation(format!(
                "descriptor set {i} is missing image {missing}"
            )));
        }
    }
    let out_dim: usize = sets.iter().map(EmbeddingSet::dim).sum();
    let mut out = EmbeddingSet::new(out_dim);
    for (id, _) in first.iter() {
        let mut joined = Vec::with_capacity(out_dim);
        for set in sets {
            let part = set.get(id).expect("id coverage checked above");
            joined.extend_from_slice(&l2_normalize(part));
        }
        out.insert(id.clone(), joined)?;
    }
    Ok(out)
}

/// [`concat_descriptors`] followed by l2-normalization of the joined
/// vector, so dot products of the result are cosines.
///
/// Each model part being unit length, the joined norm is a constant
/// `sqrt(#models)`; dividing it out rescales every vector equally, which
/// leaves rankings and any whitened rotation of the data unchanged while
/// keeping absolute similarity thresholds meaningful.
pub fn concat_normalized(sets: &[EmbeddingSet]) -> Result<EmbeddingSet> {
    let joined = concat_descriptors(sets)?;
    let mut out = EmbeddingSet::new(joined.dim());
    for (id, v) in joined.iter() {
        out.insert(id.clone(), l2_normalize(v))?;
    }
    Ok(out)
}

/// A fitted PCA rotation (plus optional whitening).
///
/// `basis` is row-major `in_dim x out_dim`: column `j` is the j-th principal
/// direction, unit length, ordered by descending eigenvalue. The sign of
/// each column is fixed so its largest-magnitude entry is positive (lowest
/// index wins magnitude ties), making fits reproducible.
#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    in_dim: usize,
    out_dim: usize,
    whiten: bool,
    mean: Vec<f32>,
    basis: Vec<f32>,
    eigenvalues: Vec<f32>,
}

impl PcaModel {
    /// Fits PCA on all descriptors of `set`.
    ///
    /// Uses the population covariance (divide by `n`). With `n` samples the
    /// covariance has rank at most `n - 1` (centering removes one degree of
    /// freedom), so `out_dim` must satisfy
    /// `1 <= out_dim <= min(dim, n - 1)`.
    pub fn fit(set: &EmbeddingSet, out_dim: usize, whiten: bool) -> Result<PcaModel> {
        let n = set.len();
        let dim = set.dim();
        if n < 2 {
            return Err(Error::validation(format!(
                "PCA needs at least 2 descriptors, got {n}"
            )));
        }
        let achievable = dim.min(n - 1);
        if out_dim == 0 || out_dim > achievable {
            return Err(Error::validation(format!(
                "out_dim {out_dim} outside achievable range [1, {achievable}] \
                 (dim {dim}, {n} samples)"
            )));
        }

        let mut mean = vec![0.0f64; dim];
        for (_, v) in set.iter() {
            for (m, &x) in mean.iter_mut().zip(v) {
                *m += f64::from(x);
            }
        }
        for m in &mut mean {
            *m /= n as f64;
        }

        // Centered data matrix (n x dim), then population covariance
        // C = X^T X / n.
        let mut x = DMatrix::<f64>::zeros(n, dim);
        for (row, (_, v)) in set.iter().enumerate() {
            for (col, &val) in v.iter().enumerate() {
                x[(row, col)] = f64::from(val) - mean[col];
            }
        }
        let cov = x.tr_mul(&x) / n as f64;

        let eig = SymmetricEigen::new(cov);
        // Order components by descending eigenvalue; equal eigenvalues keep
        // their decomposition order so fits are deterministic.
        let mut order: Vec<usize> = (0..dim).collect();
        order.sort_by(|&a, &b| {
            eig.eigenvalues[b]
                .partial_cmp(&eig.eigenvalues[a])
                .unwrap_or(std::cmp::Ordering::Equal)
                .then(a.cmp(&b))
        });

        let mut basis = vec![0.0f32; dim * out_dim];
        let mut eigenvalues = vec![0.0f32; out_dim];
        for (j, &src) in order.iter().take(out_dim).enumerate() {
            // Tiny negative eigenvalues are numerical noise on rank-deficient
            // covariances; clamp to zero.
            eigenvalues[j] = eig.eigenvalues[src].max(0.0) as f32;
            let col = eig.eigenvectors.column(src);
            let mut best_idx = 0usize;
            let mut best_abs = f64::NEG_INFINITY;
            for (i, &val) in col.iter().enumerate() {
                if val.abs() > best_abs {
                    best_abs = val.abs();
                    best_idx = i;
                }
            }
            let flip = if col[best_idx] < 0.0 { -1.0 } else { 1.0 };
            for (i, &val) in col.iter().enumerate() {
                basis[i * out_dim + j] = (val * flip) as f32;
            }
        }

        Ok(PcaModel {
            in_dim: dim,
            out_dim,
            whiten,
            mean: mean.iter().map(|&m| m as f32).collect(),
            basis,
            eigenvalues,
        })
    }

    pub fn in_dim(&self) -> usize {
        self.in_dim
    }

    pub fn out_dim(&self) -> usize {
        self.out_dim
    }

    pub fn whiten(&self) -> bool {
        self.whiten
    }

    pub fn mean(&self) -> &[f32] {
        &self.mean
    }

    pub fn eigenvalues(&self) -> &[f32] {
        &self.eigenvalues
    }

    /// Entry `(i, j)` of the basis (input component `i`, output component `j`).
    pub fn basis_entry(&self, i: usize, j: usize) -> f32 {
        self.basis[i * self.out_dim + j]
    }

    /// Centers, rotates, and (if enabled) whitens `v` — without the final
    /// l2 normalization. Projections of the training set average to zero.
    pub fn project(&self, v: &[f32]) -> Result<Vec<f32>> {
        if v.len() != self.in_dim {
            return Err(Error::validation(format!(
                "vector has dimension {}, model expects {}",
                v.len(),
                self.in_dim
            )));
        }
        let mut out = vec![0.0f64; self.out_dim];
        for (i, &x) in v.iter().enumerate() {
            let centered = f64::from(x) - f64::from(self.mean[i]);
            let row = &self.basis[i * self.out_dim..(i + 1) * self.out_dim];
            for (j, &b) in row.iter().enumerate() {
                out[j] += centered * f64::from(b);
            }
        }
        if self.whiten {
            for (j, y) in out.iter_mut().enumerate() {
                *y /= (f64::from(self.eigenvalues[j]) + WHITEN_EPS).sqrt();
            }
        }
        Ok(out.iter().map(|&y| y as f32).collect())
    }

    /// Projects and l2-normalizes `v`. This is the transform applied to
    /// every descriptor entering the search index.
    pub fn apply(&self, v: &[f32]) -> Result<Vec<f32>> {
        Ok(l2_normalize(&self.project(v)?))
    }

    /// Applies the model to a whole set in parallel; entry order is
    /// preserved, so output files are identical for any worker count.
    pub fn apply_set(&self, set: &EmbeddingSet) -> Result<EmbeddingSet> {
        if set.dim() != self.in_dim {
            return Err(Error::validation(format!(
                "set has dimension {}, model expects {}",
                set.dim(),
                self.in_dim
            )));
        }
        let entries: Vec<(ImageId, Vec<f32>)> = set
            .iter()
            .collect::<Vec<_>>()
            .par_iter()
            .map(|(id, v)| Ok(((*id).clone(), self.apply(v)?)))
            .collect::<Result<_>>()?;
        let mut out = EmbeddingSet::new(self.out_dim);
        for (id, v) in entries {
            out.insert(id, v)?;
        }
        Ok(out)
    }

    pub fn save(&self, path: &Path) -> Result<()> {
        let mut w = Writer::create(path)?;
        w.magic(PCA1_MAGIC)?;
        w.u32(self.in_dim as u32)?;
        w.u32(self.out_dim as u32)?;
        w.u8(u8::from(self.whiten))?;
        w.f32_slice(&self.mean)?;
        w.f32_slice(&self.basis)?;
        w.f32_slice(&self.eigenvalues)?;
        w.finish()
    }

    pub fn load(path: &Path) -> Result<PcaModel> {
        let mut r = Reader::open(path)?;
        r.magic(PCA1_MAGIC, "PCA model")?;
        let in_dim = r.u32()? as usize;
        let out_dim = r.u32()? as usize;
        if in_dim == 0 || out_dim == 0 || out_dim > in_dim {
            return Err(r.error_at(4, format!("invalid dimensions {in_dim} -> {out_dim}")));
        }
        let whiten_offset = r.offset();
        let whiten = match r.u8()? {
            0 => false,
            1 => true,
            other => {
                return Err(r.error_at(whiten_offset, format!("whiten flag must be 0 or 1, got {other}")))
            }
        };
        let mean = r.f32_vec(in_dim)?;
        let basis = r.f32_vec(in_dim * out_dim)?;
        let eigenvalues = r.f32_vec(out_dim)?;
        r.expect_eof()?;
        Ok(PcaModel {
            in_dim,
            out_dim,
            whiten,
            mean,
            basis,
            eigenvalues,
        })
    }
}
