//! Synthetic benchmark generator.
//!
//! Builds a fully labeled retrieval-and-recognition dataset from seeded
//! Gaussian clusters: one unit-norm center per landmark label (and per
//! non-landmark distractor cluster), `num_models` independent embedding
//! sets standing in for an ensemble of feature extractors, matching local
//! descriptors drawn from shared per-cluster "visual words", object
//! detections, classifier predictions, non-landmark seed images, and
//! ground truth for both tracks.
//!
//! Distractor clusters come in two kinds: *confusable* clusters sit close
//! to a landmark center (their queries retrieve that landmark with
//! convincing scores and pollute the pooled prediction list — exactly what
//! the non-landmark filters exist to cut), while *far* clusters are
//! independent directions. Non-landmark seed images are drawn from far
//! clusters only, so the similarity filter never fires on real landmark
//! queries.
//!
//! Generation is strictly sequential from one seeded stream, so equal
//! parameters give bit-identical files on any machine or thread count.

use std::path::{Path, PathBuf};

use indexmap::IndexMap;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::StandardNormal;

use crate::error::{Error, Result};
use crate::eval::GroundTruth;
use crate::features::l2_normalize_in_place;
use crate::recognition::{save_classifier_predictions, ClassPartition, Prediction};
use crate::store::{
    save_detections, save_labels, Detection, DetectionMap, EmbeddingSet, ImageId, LabelMap,
    LocalDescriptorSet,
};

/// Offset applied to a landmark center to place a confusable distractor
/// cluster (center similarity ≈ 1/√(1+offset²) ≈ 0.89).
const CONFUSABLE_OFFSET: f32 = 0.5;

/// Shape of the generated dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthParams {
    /// Landmark labels.
    pub n_labels: usize,
    /// Gallery images per label.
    pub images_per_label: usize,
    /// Non-landmark gallery images, spread round-robin over the distractor
    /// clusters.
    pub distractors: usize,
    /// Global descriptor dimension.
    pub dim: usize,
    /// Per-coordinate standard deviation of the Gaussian drawn around each
    /// cluster center before renormalization.
    pub noise: f32,
    pub seed: u64,
    /// Independent embedding sets (simulated model ensemble).
    pub num_models: usize,
    /// Held-out query images per label.
    pub queries_per_label: usize,
    /// Non-landmark query images.
    pub distractor_queries: usize,
    /// Non-landmark cluster count.
    pub distractor_clusters: usize,
    /// Fraction of distractor clusters placed next to a landmark center.
    pub confusable_frac: f64,
    /// Known non-landmark seed images (for the similarity filter), drawn
    /// from far clusters only.
    pub seed_images: usize,
    /// Local descriptors per image.
    pub points_per_image: usize,
    /// Local descriptor dimension.
    pub local_dim: usize,
    /// Per-coordinate noise of local descriptors around their word.
    pub local_noise: f32,
    /// Fraction of distractor queries that get a detector-catchable
    /// detection (confident large non-landmark object).
    pub detector_catch: f64,
    /// Probability that the simulated classifier names the correct label
    /// on a landmark query.
    pub classifier_accuracy: f64,
}

impl Default for SynthParams {
    fn default() -> Self {
        SynthParams {
            n_labels: 50,
            images_per_label: 20,
            distractors: 500,
            dim: 64,
            noise: 0.15,
            seed: 42,
            num_models: 2,
            queries_per_label: 4,
            distractor_queries: 250,
            distractor_clusters: 10,
            confusable_frac: 0.5,
            seed_images: 12,
            points_per_image: 12,
            local_dim: 32,
            local_noise: 0.05,
            detector_catch: 0.6,
            classifier_accuracy: 0.8,
        }
    }
}

impl SynthParams {
    /// Number of confusable distractor clusters.
    fn confusable_count(&self) -> usize {
        ((self.confusable_frac * self.distractor_clusters as f64).round() as usize)
            .min(self.distractor_clusters)
    }

    pub fn validate(&self) -> Result<()> {
        for (name, v) in [
            ("n_labels", self.n_labels),
            ("images_per_label", self.images_per_label),
            ("dim", self.dim),
            ("num_models", self.num_models),
            ("points_per_image", self.points_per_image),
            ("local_dim", self.local_dim),
        ] {
            if v == 0 {
                return Err(Error::validation(format!("{name} must be positive")));
            }
        }
        for (name, v) in [("noise", self.noise), ("local_noise", self.local_noise)] {
            if !v.is_finite() || v < 0.0 {
                return Err(Error::validation(format!("{name} {v} must be finite and >= 0")));
            }
        }
        for (name, v) in [
            ("confusable_frac", self.confusable_frac),
            ("detector_catch", self.detector_catch),
            ("classifier_accuracy", self.classifier_accuracy),
        ] {
            if !v.is_finite() || !(0.0..=1.0).contains(&v) {
                return Err(Error::validation(format!("{name} {v} outside [0, 1]")));
            }
        }
        let needs_clusters = self.distractors + self.distractor_queries + self.seed_images > 0;
        if needs_clusters && self.distractor_clusters == 0 {
            return Err(Error::validation(
                "distractor_clusters must be positive when distractor images are requested",
            ));
        }
        if self.seed_images > 0 && self.confusable_count() == self.distractor_clusters {
            return Err(Error::validation(
                "seed images need at least one far (non-confusable) distractor cluster; \
                 lower confusable_frac or distractor_clusters",
            ));
        }
        Ok(())
    }
}

/// Everything the generator produces, in memory.
#[derive(Debug, Clone)]
pub struct SynthDataset {
    /// One gallery embedding set per model.
    pub gallery_models: Vec<EmbeddingSet>,
    /// One query embedding set per model (landmark + distractor queries).
    pub query_models: Vec<EmbeddingSet>,
    /// One seed embedding set per model (known non-landmark images).
    pub seed_models: Vec<EmbeddingSet>,
    pub gallery_locals: LocalDescriptorSet,
    pub query_locals: LocalDescriptorSet,
    /// Labels of the landmark gallery images (distractors are unlabeled).
    pub labels: LabelMap,
    /// Detections for query images.
    pub detections: DetectionMap,
    /// Simulated classifier predictions for query images.
    pub classifier: Vec<Prediction>,
    pub truth: GroundTruth,
}

/// File names of a written dataset.
#[derive(Debug, Clone, PartialEq)]
pub struct SynthPaths {
    pub gallery_models: Vec<PathBuf>,
    pub query_models: Vec<PathBuf>,
    pub seed_models: Vec<PathBuf>,
    pub gallery_locals: PathBuf,
    pub query_locals: PathBuf,
    pub labels: PathBuf,
    pub detections: PathBuf,
    pub classifier: PathBuf,
    pub truth_recognition: PathBuf,
    pub truth_retrieval: PathBuf,
}

impl SynthPaths {
    pub fn new(dir: &Path, num_models: usize) -> SynthPaths {
        let per_model = |stem: &str| -> Vec<PathBuf> {
            (0..num_models)
                .map(|m| dir.join(format!("model_{m}_{stem}.emb1")))
                .collect()
        };
        SynthPaths {
            gallery_models: per_model("gallery"),
            query_models: per_model("query"),
            seed_models: per_model("seeds"),
            gallery_locals: dir.join("gallery_locals.loc1"),
            query_locals: dir.join("query_locals.loc1"),
            labels: dir.join("labels.csv"),
            detections: dir.join("detections.jsonl"),
            classifier: dir.join("classifier.csv"),
            truth_recognition: dir.join("truth_recognition.csv"),
            truth_retrieval: dir.join("truth_retrieval.csv"),
        }
    }
}

fn gaussian_vec(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    (0..dim).map(|_| rng.sample::<f32, _>(StandardNormal)).collect()
}

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let mut v = gaussian_vec(rng, dim);
    l2_normalize_in_place(&mut v);
    v
}

/// Unit vector near `center`: `normalize(center + sigma * N(0, I))`.
fn jitter(rng: &mut ChaCha8Rng, center: &[f32], sigma: f32) -> Vec<f32> {
    let mut v: Vec<f32> = if sigma == 0.0 {
        center.to_vec()
    } else {
        center
            .iter()
            .map(|c| c + sigma * rng.sample::<f32, _>(StandardNormal))
            .collect()
    };
    l2_normalize_in_place(&mut v);
    v
}

/// A centered axis-aligned box covering `area` of the unit frame.
fn centered_box(area: f32) -> [f32; 4] {
    let half = area.sqrt().clamp(0.0, 1.0) / 2.0;
    [0.5 - half, 0.5 - half, 0.5 + half, 0.5 + half]
}

fn label_name(l: usize) -> String {
    format!("L{l:03}")
}

/// Generates the dataset. Deterministic in `params` (including the seed).
pub fn generate(params: &SynthParams) -> Result<SynthDataset> {
    params.validate()?;
    let rng = &mut ChaCha8Rng::seed_from_u64(params.seed);
    let p = params;
    let classes = ClassPartition::default();
    let landmark_classes: Vec<&String> = classes.landmark.iter().collect();
    let uncertain_classes: Vec<&String> = classes.uncertain.iter().collect();
    let nonlandmark_classes = ["Car", "Person", "Dog", "Food", "Furniture", "Clothing"];
    let confusable = p.confusable_count();
    let far_clusters: Vec<usize> = (confusable..p.distractor_clusters).collect();

    // 1. Landmark centers, per model.
    let mut centers: Vec<Vec<Vec<f32>>> = Vec::with_capacity(p.num_models);
    for _ in 0..p.num_models {
        centers.push((0..p.n_labels).map(|_| random_unit(rng, p.dim)).collect());
    }

    // 2. Distractor cluster centers, per model. Confusable clusters lean on
    // the same target label in every model.
    let mut dcenters: Vec<Vec<Vec<f32>>> = Vec::with_capacity(p.num_models);
    for model_centers in centers.iter().take(p.num_models) {
        let mut row = Vec::with_capacity(p.distractor_clusters);
        for c in 0..p.distractor_clusters {
            if c < confusable {
                let target = &model_centers[c % p.n_labels];
                let mut v: Vec<f32> = {
                    let dir = random_unit(rng, p.dim);
                    target
                        .iter()
                        .zip(&dir)
                        .map(|(t, d)| t + CONFUSABLE_OFFSET * d)
                        .collect()
                };
                l2_normalize_in_place(&mut v);
                row.push(v);
            } else {
                row.push(random_unit(rng, p.dim));
            }
        }
        dcenters.push(row);
    }

    // 3. Local visual words, shared within a label / distractor cluster.
    let label_words: Vec<Vec<Vec<f32>>> = (0..p.n_labels)
        .map(|_| (0..p.points_per_image).map(|_| random_unit(rng, p.local_dim)).collect())
        .collect();
    let cluster_words: Vec<Vec<Vec<f32>>> = (0..p.distractor_clusters)
        .map(|_| (0..p.points_per_image).map(|_| random_unit(rng, p.local_dim)).collect())
        .collect();

    let mut gallery_models: Vec<EmbeddingSet> =
        (0..p.num_models).map(|_| EmbeddingSet::new(p.dim)).collect();
    let mut query_models: Vec<EmbeddingSet> =
        (0..p.num_models).map(|_| EmbeddingSet::new(p.dim)).collect();
    let mut seed_models: Vec<EmbeddingSet> =
        (0..p.num_models).map(|_| EmbeddingSet::new(p.dim)).collect();
    let mut gallery_locals = LocalDescriptorSet::new(p.local_dim);
    let mut query_locals = LocalDescriptorSet::new(p.local_dim);
    let mut labels = LabelMap::new();
    let mut detections = DetectionMap::new();
    let mut classifier = Vec::new();
    let mut truth = GroundTruth::new();

    let local_flat = |rng: &mut ChaCha8Rng, words: &[Vec<f32>], sigma: f32| -> Vec<f32> {
        let mut flat = Vec::with_capacity(words.len() * p.local_dim);
        for w in words {
            flat.extend(jitter(rng, w, sigma));
        }
        flat
    };

    // 4. Landmark gallery images.
    let mut label_gallery_ids: Vec<Vec<ImageId>> = vec![Vec::new(); p.n_labels];
    for l in 0..p.n_labels {
        for i in 0..p.images_per_label {
            let id = ImageId::new(format!("g{l:03}_{i:03}"))?;
            for m in 0..p.num_models {
                let v = jitter(rng, &centers[m][l], p.noise);
                gallery_models[m].insert(id.clone(), v)?;
            }
            gallery_locals.insert(id.clone(), local_flat(rng, &label_words[l], p.local_noise))?;
            labels.insert(id.clone(), label_name(l))?;
            label_gallery_ids[l].push(id);
        }
    }

    // 5. Distractor gallery images.
    for j in 0..p.distractors {
        let c = j % p.distractor_clusters;
        let id = ImageId::new(format!("d{c:02}_{j:04}"))?;
        for m in 0..p.num_models {
            let v = jitter(rng, &dcenters[m][c], p.noise);
            gallery_models[m].insert(id.clone(), v)?;
        }
        gallery_locals.insert(id, local_flat(rng, &cluster_words[c], p.local_noise))?;
    }

    // 6. Landmark queries.
    for l in 0..p.n_labels {
        for qi in 0..p.queries_per_label {
            let id = ImageId::new(format!("q{l:03}_{qi:02}"))?;
            for m in 0..p.num_models {
                let v = jitter(rng, &centers[m][l], p.noise);
                query_models[m].insert(id.clone(), v)?;
            }
            query_locals.insert(id.clone(), local_flat(rng, &label_words[l], p.local_noise))?;
            truth.insert_recognition(id.clone(), Some(label_name(l)))?;
            truth.insert_retrieval(id.clone(), label_gallery_ids[l].iter().cloned().collect())?;

            // Detections: landmark or uncertain classes only, so the
            // detector filter never flags a real landmark query.
            let objects = if rng.random_bool(0.7) {
                let class = landmark_classes[rng.random_range(0..landmark_classes.len())];
                vec![Detection {
                    class: class.clone(),
                    score: rng.random_range(0.3..0.95),
                    bbox: centered_box(rng.random_range(0.1..0.6)),
                }]
            } else if rng.random_bool(0.5) {
                let class = uncertain_classes[rng.random_range(0..uncertain_classes.len())];
                vec![Detection {
                    class: class.clone(),
                    score: rng.random_range(0.2..0.9),
                    bbox: centered_box(rng.random_range(0.1..0.9)),
                }]
            } else {
                Vec::new()
            };
            detections.insert(id.clone(), objects)?;

            let predicted = if rng.random_bool(p.classifier_accuracy) {
                label_name(l)
            } else {
                label_name(rng.random_range(0..p.n_labels))
            };
            classifier.push(Prediction::new(id, predicted, rng.random_range(0.5..0.99))?);
        }
    }

    // 7. Distractor queries.
    for j in 0..p.distractor_queries {
        let c = j % p.distractor_clusters;
        let id = ImageId::new(format!("x{c:02}_{j:04}"))?;
        for m in 0..p.num_models {
            let v = jitter(rng, &dcenters[m][c], p.noise);
            query_models[m].insert(id.clone(), v)?;
        }
        query_locals.insert(id.clone(), local_flat(rng, &cluster_words[c], p.local_noise))?;
        truth.insert_recognition(id.clone(), None)?;

        let objects = if rng.random_bool(p.detector_catch) {
            // Confident, frame-filling non-landmark object.
            let class = nonlandmark_classes[rng.random_range(0..nonlandmark_classes.len())];
            vec![Detection {
                class: (*class).into(),
                score: rng.random_range(0.35..0.95),
                bbox: centered_box(rng.random_range(0.65..0.92)),
            }]
        } else if rng.random_bool(0.5) {
            // Uncertain class: detector stays silent however big the box.
            let class = uncertain_classes[rng.random_range(0..uncertain_classes.len())];
            vec![Detection {
                class: class.clone(),
                score: rng.random_range(0.3..0.95),
                bbox: centered_box(rng.random_range(0.5..0.9)),
            }]
        } else {
            // Non-landmark object, but too small or too unsure to act on.
            let class = nonlandmark_classes[rng.random_range(0..nonlandmark_classes.len())];
            vec![Detection {
                class: (*class).into(),
                score: rng.random_range(0.05..0.25),
                bbox: centered_box(rng.random_range(0.1..0.5)),
            }]
        };
        detections.insert(id.clone(), objects)?;

        classifier.push(Prediction::new(
            id,
            label_name(rng.random_range(0..p.n_labels)),
            rng.random_range(0.1..0.6),
        )?);
    }

    // 8. Non-landmark seed images, far clusters only.
    for s in 0..p.seed_images {
        let c = far_clusters[s % far_clusters.len()];
        let id = ImageId::new(format!("s{c:02}_{s:03}"))?;
        for m in 0..p.num_models {
            let v = jitter(rng, &dcenters[m][c], p.noise);
            seed_models[m].insert(id.clone(), v)?;
        }
    }

    Ok(SynthDataset {
        gallery_models,
        query_models,
        seed_models,
        gallery_locals,
        query_locals,
        labels,
        detections,
        classifier,
        truth,
    })
}

/// Writes every dataset file under `dir` (created if missing) and returns
/// the paths.
pub fn write_dataset(dataset: &SynthDataset, dir: &Path) -> Result<SynthPaths> {
    std::fs::create_dir_all(dir).map_err(|e| Error::io(dir, e))?;
    let paths = SynthPaths::new(dir, dataset.gallery_models.len());
    for (set, path) in dataset.gallery_models.iter().zip(&paths.gallery_models) {
        set.save(path)?;
    }
    for (set, path) in dataset.query_models.iter().zip(&paths.query_models) {
        set.save(path)?;
    }
    for (set, path) in dataset.seed_models.iter().zip(&paths.seed_models) {
        set.save(path)?;
    }
    dataset.gallery_locals.save(&paths.gallery_locals)?;
    dataset.query_locals.save(&paths.query_locals)?;
    save_labels(&dataset.labels, &paths.labels)?;
    save_detections(&dataset.detections, &paths.detections)?;
    save_classifier_predictions(&dataset.classifier, &paths.classifier)?;
    dataset.truth.save_recognition(&paths.truth_recognition)?;
    dataset.truth.save_retrieval(&paths.truth_retrieval)?;
    Ok(paths)
}

/// Loads the per-model embedding files of a written dataset back as one
/// `Vec` (helper shared by the CLI and tests).
pub fn load_model_sets(paths: &[PathBuf]) -> Result<Vec<EmbeddingSet>> {
    paths.iter().map(|p| EmbeddingSet::load(p)).collect()
}

/// Convenience map of classifier predictions keyed by image.
pub fn classifier_by_image(predictions: &[Prediction]) -> IndexMap<ImageId, Prediction> {
    predictions
        .iter()
        .map(|p| (p.image.clone(), p.clone()))
        .collect()
}
