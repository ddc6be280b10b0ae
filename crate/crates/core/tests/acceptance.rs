//! Acceptance suite: one test per release criterion, each printing a
//! `[criterion N] ...: PASS` line (visible with `--nocapture`).
//!
//! Every expected value is produced by an independent straight-line
//! reference implementation inside this file, never by the code under
//! test.

use std::collections::{BTreeMap, BTreeSet};
use std::path::PathBuf;
use std::sync::OnceLock;

use rand::prelude::*;
use rand_chacha::ChaCha8Rng;

use landrank::config::PipelineConfig;
use landrank::eval::{
    ablation_run, gap, map_at_k, AblationInputs, AblationParams, AblationStage, GroundTruth,
};
use landrank::features::{concat_normalized, PcaModel};
use landrank::pipeline::{
    filter_queries, grade_predictions, recognize_rankings, rescore_predictions, Pipeline,
};
use landrank::recognition::{
    grade_a, grade_b, rescore, ClassPartition, FilterParams, FrequencyMode, Grade, GradeA, GradeB,
    Prediction,
};
use landrank::rerank::{dba_weights, qe_weights, run_dba, run_qe, AcceptNone, RerankParams};
use landrank::search::ivf::IvfIndex;
use landrank::search::kmeans::kmeans_fit;
use landrank::search::{knn_exact, search_batch, ExactSearcher, RankedList};
use landrank::store::{EmbeddingSet, ImageId, LabelMap};
use landrank::synth::{classifier_by_image, generate, write_dataset, SynthDataset, SynthParams};

fn id(s: &str) -> ImageId {
    ImageId::new(s).unwrap()
}

/// The seeded benchmark dataset shared by the expensive criteria.
fn benchmark() -> &'static SynthDataset {
    static DATA: OnceLock<SynthDataset> = OnceLock::new();
    DATA.get_or_init(|| generate(&SynthParams::default()).expect("benchmark generation"))
}

// ---------------------------------------------------------------------------
// Criterion 1: expansion weight schedules
// ---------------------------------------------------------------------------

/// Straight-line restatement of the schedule: keep the base length while
/// verified neighbors are scarce, follow them up to the cap otherwise;
/// weights fall linearly from 1 to 1/N.
fn reference_schedule(m: usize, base: usize, cap: usize) -> Vec<f64> {
    let n = if m <= base { base } else { m.min(cap) };
    (0..n).map(|x| (n - x) as f64 / n as f64).collect()
}

#[test]
fn criterion_1_weight_schedules() {
    let params = RerankParams::default();

    // Spot values for the schedule length N as a function of M.
    for (m, n) in [(0, 10), (5, 10), (10, 10), (11, 11), (15, 15), (20, 20), (30, 20)] {
        assert_eq!(dba_weights(m, &params).len(), n, "dba length at M={m}");
    }
    for (m, n) in [(0, 3), (2, 3), (3, 3), (4, 4), (6, 6), (10, 6)] {
        assert_eq!(qe_weights(m, &params).len(), n, "qe length at M={m}");
    }

    // Literal weight tables (every value is an exactly-parsed decimal).
    assert_eq!(
        dba_weights(5, &params),
        vec![1.0, 0.9, 0.8, 0.7, 0.6, 0.5, 0.4, 0.3, 0.2, 0.1]
    );
    assert_eq!(qe_weights(2, &params), vec![1.0, 2.0 / 3.0, 1.0 / 3.0]);
    assert_eq!(qe_weights(4, &params), vec![1.0, 0.75, 0.5, 0.25]);
    assert_eq!(
        dba_weights(30, &params),
        (0..20).map(|x| (20 - x) as f64 / 20.0).collect::<Vec<_>>()
    );

    // Full sweep against the reference, tolerance zero.
    for m in 0..=50 {
        assert_eq!(dba_weights(m, &params), reference_schedule(m, 10, 20), "dba at M={m}");
        assert_eq!(qe_weights(m, &params), reference_schedule(m, 3, 6), "qe at M={m}");
    }

    println!("[criterion 1] expansion weight schedules: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 2: exact search vs full-sort oracle; full-probe IVF vs exact
// ---------------------------------------------------------------------------

fn random_unit(rng: &mut ChaCha8Rng, dim: usize) -> Vec<f32> {
    let mut v: Vec<f32> = (0..dim).map(|_| rng.random_range(-1.0f32..1.0)).collect();
    let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-9);
    v.iter_mut().for_each(|x| *x /= norm);
    v
}

/// Full sort by (score desc, id asc), truncated to k.
fn oracle_knn(
    query_id: &ImageId,
    query: &[f32],
    gallery: &EmbeddingSet,
    k: usize,
    exclude_self: bool,
) -> Vec<(ImageId, f32)> {
    let mut scored: Vec<(ImageId, f32)> = gallery
        .iter()
        .filter(|(gid, _)| !(exclude_self && *gid == query_id))
        .map(|(gid, v)| {
            let s: f32 = v.iter().zip(query).map(|(a, b)| a * b).sum();
            (gid.clone(), s)
        })
        .collect();
    scored.sort_by(|a, b| {
        b.1.partial_cmp(&a.1).unwrap_or(std::cmp::Ordering::Equal).then_with(|| a.0.cmp(&b.0))
    });
    scored.truncate(k);
    scored
}

#[test]
fn criterion_2_search_oracle_equivalence() {
    let mut rng = ChaCha8Rng::seed_from_u64(0xACCE55);
    for instance in 0..200 {
        let dim = rng.random_range(2..=64);
        let n = rng.random_range(5..=1000);
        let mut gallery = EmbeddingSet::new(dim);
        let mut duplicate_of: Option<Vec<f32>> = None;
        for i in 0..n {
            // A sprinkle of duplicate vectors exercises the id tie-break.
            let v = if i % 17 == 3 && duplicate_of.is_some() {
                duplicate_of.clone().unwrap()
            } else {
                let v = random_unit(&mut rng, dim);
                duplicate_of = Some(v.clone());
                v
            };
            gallery.insert(id(&format!("g{i:04}")), v).unwrap();
        }
        let k = rng.random_range(1..=n + 2);
        let exclude = rng.random_bool(0.5);
        for q in 0..5 {
            // Half the queries are gallery members (self-exclusion path).
            let (qid, qvec) = if rng.random_bool(0.5) {
                let i = rng.random_range(0..n);
                let (gid, v) = gallery.get_index(i).unwrap();
                (gid.clone(), v.to_vec())
            } else {
                (id(&format!("q{instance}_{q}")), random_unit(&mut rng, dim))
            };
            let got = knn_exact(&qid, &qvec, &gallery, k, exclude).unwrap();
            let want = oracle_knn(&qid, &qvec, &gallery, k, exclude);
            assert_eq!(got.hits, want, "instance {instance} query {q}");
        }
    }

    // Probing every list makes the inverted file exhaustive.
    for instance in 0..20 {
        let dim = rng.random_range(2..=32);
        let n = rng.random_range(20..=300);
        let mut gallery = EmbeddingSet::new(dim);
        for i in 0..n {
            gallery.insert(id(&format!("g{i:04}")), random_unit(&mut rng, dim)).unwrap();
        }
        let points: Vec<&[f32]> = gallery.iter().map(|(_, v)| v).collect();
        let centers = rng.random_range(1..=16.min(n));
        let centroids = kmeans_fit(&points, dim, centers, 5, instance as u64).unwrap();
        let index = IvfIndex::build_from_embeddings(&gallery, centroids).unwrap();
        for q in 0..10 {
            let qvec = random_unit(&mut rng, dim);
            let qid = id(&format!("q{q}"));
            let got = index.search(&qvec, centers, 10, None).unwrap();
            let want = knn_exact(&qid, &qvec, &gallery, 10, false).unwrap();
            assert_eq!(got, want.hits, "ivf instance {instance} query {q}");
        }
    }

    println!("[criterion 2] search oracle equivalence: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 3: IVF recall on clustered data
// ---------------------------------------------------------------------------

#[test]
fn criterion_3_ivf_recall() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x1F5);
    let dim = 64;
    let n_clusters = 250;
    let n_points = 10_000;
    let sigma = 0.08f32;

    let clusters: Vec<Vec<f32>> = (0..n_clusters).map(|_| random_unit(&mut rng, dim)).collect();
    let sample = |rng: &mut ChaCha8Rng, c: &[f32]| -> Vec<f32> {
        let mut v: Vec<f32> = c
            .iter()
            .map(|x| x + sigma * rng.sample::<f32, _>(rand_distr::StandardNormal))
            .collect();
        let norm = v.iter().map(|x| x * x).sum::<f32>().sqrt().max(1e-9);
        v.iter_mut().for_each(|x| *x /= norm);
        v
    };

    let mut gallery = EmbeddingSet::new(dim);
    for i in 0..n_points {
        let v = sample(&mut rng, &clusters[i % n_clusters]);
        gallery.insert(id(&format!("p{i:05}")), v).unwrap();
    }
    let points: Vec<&[f32]> = gallery.iter().map(|(_, v)| v).collect();
    let centroids = kmeans_fit(&points, dim, 512, 10, 7).unwrap();
    drop(points);
    let index = IvfIndex::build_from_embeddings(&gallery, centroids).unwrap();

    let mut recall_sum = 0.0;
    let n_queries = 100;
    for q in 0..n_queries {
        let qvec = sample(&mut rng, &clusters[q % n_clusters]);
        let qid = id(&format!("q{q}"));
        let exact: BTreeSet<ImageId> = knn_exact(&qid, &qvec, &gallery, 10, false)
            .unwrap()
            .hits
            .into_iter()
            .map(|(i, _)| i)
            .collect();
        let approx = index.search(&qvec, 20, 10, None).unwrap();
        let hit = approx.iter().filter(|(i, _)| exact.contains(i)).count();
        recall_sum += hit as f64 / 10.0;
    }
    let recall = recall_sum / n_queries as f64;
    assert!(recall >= 0.95, "recall@10 {recall:.4} below 0.95");

    println!("[criterion 3] ivf recall@10 {recall:.4} >= 0.95: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 4: metric oracles and score-transform invariance
// ---------------------------------------------------------------------------

/// Brute-force micro average precision: pool, sort by (score desc, id asc),
/// sum precision at relevant ranks, divide by the labeled truth count.
fn oracle_gap(predictions: &[Prediction], truth: &GroundTruth) -> f64 {
    let mut rows: Vec<(&Prediction, bool)> = predictions
        .iter()
        .map(|p| {
            let rel = matches!(truth.recognition.get(&p.image), Some(Some(l)) if *l == p.label);
            (p, rel)
        })
        .collect();
    rows.sort_by(|a, b| {
        b.0.score
            .partial_cmp(&a.0.score)
            .unwrap_or(std::cmp::Ordering::Equal)
            .then_with(|| a.0.image.cmp(&b.0.image))
    });
    let m = truth.recognition.values().filter(|v| v.is_some()).count();
    let mut correct = 0usize;
    let mut total = 0.0;
    for (i, (_, rel)) in rows.iter().enumerate() {
        if *rel {
            correct += 1;
            total += correct as f64 / (i + 1) as f64;
        }
    }
    total / m as f64
}

/// Brute-force mean AP@k over the truth queries.
fn oracle_map(results: &[RankedList], truth: &GroundTruth, k: usize) -> f64 {
    let by_query: BTreeMap<&ImageId, &RankedList> =
        results.iter().map(|l| (&l.query, l)).collect();
    let mut total = 0.0;
    for (query, relevant) in &truth.retrieval {
        let denom = relevant.len().min(k) as f64;
        let ap = match by_query.get(query) {
            None => 0.0,
            Some(list) => {
                let mut correct = 0usize;
                let mut sum = 0.0;
                for (i, (hit, _)) in list.hits.iter().take(k).enumerate() {
                    if relevant.contains(hit) {
                        correct += 1;
                        sum += correct as f64 / (i + 1) as f64;
                    }
                }
                sum / denom
            }
        };
        total += ap;
    }
    total / truth.retrieval.len() as f64
}

#[test]
fn criterion_4_metric_oracles() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6A9);

    for instance in 0..200 {
        // Recognition side.
        let n_images = rng.random_range(2..=60);
        let n_labels = rng.random_range(1..=6);
        let mut truth = GroundTruth::new();
        let mut labeled = 0;
        for i in 0..n_images {
            let label = if rng.random_bool(0.7) || (i == n_images - 1 && labeled == 0) {
                labeled += 1;
                Some(format!("L{}", rng.random_range(0..n_labels)))
            } else {
                None
            };
            truth.insert_recognition(id(&format!("t{i:03}")), label).unwrap();
        }
        let mut predictions = Vec::new();
        for i in 0..n_images {
            if rng.random_bool(0.8) {
                // Quantized scores create plenty of ties.
                let score = f64::from(rng.random_range(0..8)) / 8.0;
                let image = if rng.random_bool(0.9) {
                    id(&format!("t{i:03}"))
                } else {
                    id(&format!("unknown{i:03}")) // not in the truth at all
                };
                predictions
                    .push(Prediction::new(image, format!("L{}", rng.random_range(0..n_labels)), score).unwrap());
            }
        }
        let got = gap(&predictions, &truth).unwrap();
        let want = oracle_gap(&predictions, &truth);
        assert!((got - want).abs() <= 1e-12, "gap instance {instance}: {got} vs {want}");

        // Ten order-preserving transforms leave the metric unchanged.
        if instance < 10 {
            for t in 0..10 {
                let a = rng.random_range(0.2..3.0);
                let b = rng.random_range(-2.0..2.0);
                let transformed: Vec<Prediction> = predictions
                    .iter()
                    .map(|p| {
                        let x = p.score;
                        let y = match t % 5 {
                            0 => a * x + b,
                            1 => a * x.powi(3) + b,
                            2 => (a * x).exp() + b,
                            3 => x.atan() * a + b,
                            _ => x.asinh() * a + b,
                        };
                        Prediction::new(p.image.clone(), p.label.clone(), y).unwrap()
                    })
                    .collect();
                let after = gap(&transformed, &truth).unwrap();
                assert!(
                    (after - got).abs() <= 1e-12,
                    "transform {t} changed gap: {got} vs {after}"
                );
            }
        }
    }

    for instance in 0..200 {
        // Retrieval side.
        let n_gallery = rng.random_range(3..=40);
        let gallery_ids: Vec<ImageId> = (0..n_gallery).map(|i| id(&format!("g{i:03}"))).collect();
        let n_queries = rng.random_range(1..=10);
        let mut truth = GroundTruth::new();
        for q in 0..n_queries {
            let mut relevant = BTreeSet::new();
            for g in &gallery_ids {
                if rng.random_bool(0.3) {
                    relevant.insert(g.clone());
                }
            }
            if relevant.is_empty() {
                relevant.insert(gallery_ids[0].clone());
            }
            truth.insert_retrieval(id(&format!("q{q:02}")), relevant).unwrap();
        }
        let mut results = Vec::new();
        for q in 0..n_queries {
            if rng.random_bool(0.85) {
                let mut order = gallery_ids.clone();
                order.shuffle(&mut rng);
                order.truncate(rng.random_range(1..=n_gallery));
                let hits: Vec<(ImageId, f32)> =
                    order.into_iter().enumerate().map(|(i, g)| (g, 1.0 - i as f32 * 0.01)).collect();
                results.push(RankedList::new(id(&format!("q{q:02}")), hits));
            }
        }
        let k = rng.random_range(1..=15);
        let got = map_at_k(&results, &truth, k).unwrap();
        let want = oracle_map(&results, &truth, k);
        assert!((got - want).abs() <= 1e-12, "map instance {instance}: {got} vs {want}");
    }

    println!("[criterion 4] metric oracles within 1e-12: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 5: staged ablation on the seeded benchmark
// ---------------------------------------------------------------------------

#[test]
fn criterion_5_ablation_monotonicity() {
    let data = benchmark();
    let inputs = AblationInputs {
        gallery_models: &data.gallery_models,
        query_models: &data.query_models,
        gallery_locals: Some(&data.gallery_locals),
        query_locals: Some(&data.query_locals),
        truth: &data.truth,
    };
    let params = AblationParams {
        pca_out_dim: 64,
        min_matches: 1,
        ..AblationParams::default()
    };
    let stages = [
        AblationStage::Baseline,
        AblationStage::ConcatPca,
        AblationStage::DbaAqe,
        AblationStage::Rerank,
    ];
    let rows = ablation_run(&inputs, &stages, &params).unwrap();
    let score = |stage: AblationStage| {
        rows.iter().find(|r| r.stage == stage).map(|r| r.map_at_k).unwrap()
    };
    let baseline = score(AblationStage::Baseline);
    let dba_qe = score(AblationStage::DbaAqe);
    let full = score(AblationStage::Rerank);

    assert!(
        dba_qe >= baseline + 0.02,
        "expansion gain too small: baseline {baseline:.4}, +dba/qe {dba_qe:.4}"
    );
    assert!(full > baseline, "full pipeline {full:.4} not above baseline {baseline:.4}");

    println!(
        "[criterion 5] ablation baseline {baseline:.4} < +dba/qe {dba_qe:.4} (margin >= 0.02), \
         baseline < full {full:.4}: PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 6: grading, band rescoring, filter effect on the benchmark
// ---------------------------------------------------------------------------

/// Straight-line vote: count per label; winner by count, then best score,
/// then lexicographically smaller label.
fn reference_vote(hits: &[(ImageId, f32)], labels: &LabelMap) -> (String, f64) {
    let mut count: BTreeMap<&str, usize> = BTreeMap::new();
    let mut best: BTreeMap<&str, f64> = BTreeMap::new();
    for (hit, score) in hits {
        let label = labels.get(hit).unwrap();
        *count.entry(label).or_default() += 1;
        let e = best.entry(label).or_insert(f64::NEG_INFINITY);
        if f64::from(*score) > *e {
            *e = f64::from(*score);
        }
    }
    let mut ordered: Vec<&str> = count.keys().copied().collect();
    ordered.sort_by(|a, b| {
        count[b]
            .cmp(&count[a])
            .then_with(|| best[b].partial_cmp(&best[a]).unwrap())
            .then_with(|| a.cmp(b))
    });
    let winner = ordered[0];
    (winner.to_string(), best[winner])
}

/// Straight-line restatement of the neighborhood-purity grade.
fn reference_grade_a(hits: &[(ImageId, f32)], labels: &LabelMap, a1: f64, a2: f64) -> GradeA {
    let distinct: BTreeSet<&str> = hits.iter().map(|(h, _)| labels.get(h).unwrap()).collect();
    if distinct.len() <= 2 {
        let (winner, _) = reference_vote(hits, labels);
        let scores: Vec<f64> = hits
            .iter()
            .filter(|(h, _)| labels.get(h).unwrap() == winner)
            .map(|(_, s)| f64::from(*s))
            .collect();
        let min = scores.iter().cloned().fold(f64::INFINITY, f64::min);
        let max = scores.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        if min > a1 {
            GradeA::A1
        } else if max > a2 {
            GradeA::A2
        } else {
            GradeA::A3
        }
    } else if hits.len() == 5 && distinct.len() == 5 {
        GradeA::A4
    } else {
        GradeA::A3
    }
}

#[test]
fn criterion_6_grading_and_rescoring() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x6BADE);

    // Rescored order respects the grade total order for any base scores.
    let grades = Grade::ALL;
    for _ in 0..1000 {
        let ga = grades[rng.random_range(0..grades.len())];
        let gb = grades[rng.random_range(0..grades.len())];
        let sa = rng.random_range(-1.0..=1.0);
        let sb = rng.random_range(-1.0..=1.0);
        let ra = rescore(ga, sa);
        let rb = rescore(gb, sb);
        match ga.cmp(&gb) {
            std::cmp::Ordering::Greater => assert!(ra > rb, "{ga} {sa} vs {gb} {sb}"),
            std::cmp::Ordering::Less => assert!(ra < rb, "{ga} {sa} vs {gb} {sb}"),
            std::cmp::Ordering::Equal => {}
        }
    }

    // Grading agrees with the straight-line reference on 1000 random
    // neighborhoods.
    for instance in 0..1000 {
        let n_hits = rng.random_range(1..=5);
        let n_labels = rng.random_range(1..=5);
        let mut labels = LabelMap::new();
        let mut hits = Vec::new();
        for i in 0..n_hits {
            let hit = id(&format!("h{instance}_{i}"));
            labels.insert(hit.clone(), format!("L{}", rng.random_range(0..n_labels))).unwrap();
            hits.push((hit, rng.random_range(0.0f32..1.0)));
        }
        let a1 = 0.9;
        let a2 = 0.85;
        let got = grade_a(&hits, &labels, a1, a2).unwrap();
        let want = reference_grade_a(&hits, &labels, a1, a2);
        assert_eq!(got, want, "instance {instance}: hits {hits:?}");

        let (label, score) = reference_vote(&hits, &labels);
        let prediction = Prediction::new(id("query"), label.clone(), score).unwrap();
        let classifier = match rng.random_range(0..3) {
            0 => None,
            1 => Some(Prediction::new(id("query"), label.clone(), 0.5).unwrap()),
            _ => Some(Prediction::new(id("query"), format!("{label}_other"), 0.5).unwrap()),
        };
        let got_b = grade_b(&prediction, classifier.as_ref());
        let want_b = match &classifier {
            Some(c) if c.label == prediction.label => GradeB::B1,
            _ => GradeB::B2,
        };
        assert_eq!(got_b, want_b);
    }

    // Filtering distractor queries on the benchmark strictly increases the
    // pooled average precision.
    let data = benchmark();
    let gallery = concat_normalized(&data.gallery_models).unwrap();
    let queries = concat_normalized(&data.query_models).unwrap();
    let seeds = concat_normalized(&data.seed_models).unwrap();
    let pca = PcaModel::fit(&gallery, 64, true).unwrap();
    let gallery = pca.apply_set(&gallery).unwrap();
    let queries = pca.apply_set(&queries).unwrap();
    let seeds = pca.apply_set(&seeds).unwrap();

    let params = RerankParams::default();
    let dba = {
        let searcher = ExactSearcher { gallery: &gallery, exclude_self: true };
        run_dba(&gallery, &searcher, &AcceptNone, &params).unwrap()
    };
    let expanded_queries = {
        let searcher = ExactSearcher { gallery: &dba, exclude_self: false };
        run_qe(&queries, &dba, &searcher, &AcceptNone, &params).unwrap()
    };
    let lists = {
        let searcher = ExactSearcher { gallery: &dba, exclude_self: false };
        search_batch(&searcher, &expanded_queries, params.neighbor_depth).unwrap()
    };

    let mut predictions = recognize_rankings(&lists, &data.labels, 5, 0.85).unwrap();
    let classifier = classifier_by_image(&data.classifier);
    grade_predictions(&mut predictions, &lists, &data.labels, &classifier, 5, 0.9, 0.85).unwrap();

    let mut plain = predictions.clone();
    rescore_predictions(&mut plain, &BTreeSet::new(), Some(FrequencyMode::StageA1A2), 5).unwrap();
    let gap_plain = gap(&plain, &data.truth).unwrap();

    let filter_params = FilterParams { sim_threshold: 0.3, ..FilterParams::default() };
    let records = filter_queries(
        &queries,
        Some(&data.detections),
        Some(&seeds),
        &ClassPartition::default(),
        &filter_params,
    )
    .unwrap();
    let filtered_ids: BTreeSet<ImageId> = records.into_iter().map(|r| r.id).collect();
    assert!(!filtered_ids.is_empty(), "filters caught nothing");
    let mut filtered = predictions.clone();
    rescore_predictions(&mut filtered, &filtered_ids, Some(FrequencyMode::StageA1A2), 5).unwrap();
    let gap_filtered = gap(&filtered, &data.truth).unwrap();

    assert!(
        gap_filtered > gap_plain,
        "filtering did not increase gap: {gap_plain:.4} -> {gap_filtered:.4}"
    );

    println!(
        "[criterion 6] grading matches reference; bands ordered; filtering raises gap \
         {gap_plain:.4} -> {gap_filtered:.4}: PASS"
    );
}

// ---------------------------------------------------------------------------
// Criterion 7: rotation properties
// ---------------------------------------------------------------------------

#[test]
fn criterion_7_pca_properties() {
    let mut rng = ChaCha8Rng::seed_from_u64(0x9CA);
    let in_dim = 32;
    let n = 300;
    let mut set = EmbeddingSet::new(in_dim);
    for i in 0..n {
        // Anisotropic data: coordinate j scaled by 1/(j+1).
        let v: Vec<f32> = (0..in_dim)
            .map(|j| rng.random_range(-1.0f32..1.0) / (j + 1) as f32 + 0.1)
            .collect();
        set.insert(id(&format!("x{i:03}")), v).unwrap();
    }

    // Orthonormal basis.
    let out_dim = 16;
    let model = PcaModel::fit(&set, out_dim, true).unwrap();
    for a in 0..out_dim {
        for b in 0..out_dim {
            let dot: f64 = (0..in_dim)
                .map(|i| f64::from(model.basis_entry(i, a)) * f64::from(model.basis_entry(i, b)))
                .sum();
            let want = if a == b { 1.0 } else { 0.0 };
            assert!((dot - want).abs() <= 1e-5, "basis column {a}x{b}: {dot}");
        }
    }

    // Whitened training covariance is the identity.
    let projected: Vec<Vec<f64>> = set
        .iter()
        .map(|(_, v)| model.project(v).unwrap().iter().map(|&x| f64::from(x)).collect())
        .collect();
    let mean: Vec<f64> = (0..out_dim)
        .map(|j| projected.iter().map(|p| p[j]).sum::<f64>() / n as f64)
        .collect();
    for a in 0..out_dim {
        for b in 0..out_dim {
            let cov: f64 = projected
                .iter()
                .map(|p| (p[a] - mean[a]) * (p[b] - mean[b]))
                .sum::<f64>()
                / n as f64;
            let want = if a == b { 1.0 } else { 0.0 };
            assert!((cov - want).abs() <= 1e-3, "covariance {a}x{b}: {cov}");
        }
    }

    // A full-rank rotation without whitening preserves pairwise distances.
    let full = PcaModel::fit(&set, in_dim, false).unwrap();
    let original: Vec<&[f32]> = set.iter().map(|(_, v)| v).collect();
    let rotated: Vec<Vec<f32>> = original.iter().map(|v| full.project(v).unwrap()).collect();
    let dist = |a: &[f32], b: &[f32]| -> f64 {
        a.iter()
            .zip(b)
            .map(|(x, y)| (f64::from(*x) - f64::from(*y)).powi(2))
            .sum::<f64>()
            .sqrt()
    };
    for i in (0..n).step_by(7) {
        for j in (i + 1..n).step_by(11) {
            let before = dist(original[i], original[j]);
            let after = dist(&rotated[i], &rotated[j]);
            assert!(
                (before - after).abs() <= 1e-5,
                "distance {i},{j}: {before} vs {after}"
            );
        }
    }

    println!("[criterion 7] rotation orthonormal, whitening unit-covariance, distances kept: PASS");
}

// ---------------------------------------------------------------------------
// Criterion 8: determinism across runs and worker counts; format fidelity
// ---------------------------------------------------------------------------

fn determinism_config(data_dir: &std::path::Path, out_dir: PathBuf) -> PipelineConfig {
    let params = SynthParams {
        n_labels: 6,
        images_per_label: 4,
        distractors: 24,
        dim: 16,
        noise: 0.08,
        seed: 7,
        num_models: 2,
        queries_per_label: 2,
        distractor_queries: 12,
        distractor_clusters: 3,
        confusable_frac: 0.34,
        seed_images: 4,
        points_per_image: 6,
        local_dim: 8,
        local_noise: 0.05,
        detector_catch: 0.7,
        classifier_accuracy: 0.8,
    };
    let dataset = generate(&params).unwrap();
    let paths = write_dataset(&dataset, data_dir).unwrap();
    let mut c = PipelineConfig {
        gallery_embeddings: paths.gallery_models,
        query_embeddings: paths.query_models,
        seed_embeddings: paths.seed_models,
        gallery_locals: Some(paths.gallery_locals),
        query_locals: Some(paths.query_locals),
        labels: Some(paths.labels),
        detections: Some(paths.detections),
        classifier: Some(paths.classifier),
        out_dir,
        ..PipelineConfig::default()
    };
    c.pca.out_dim = 8;
    c.ivf.centers = 8;
    c.ivf.nprobe = 8;
    c.ivf.max_iters = 5;
    c.rerank.depth = 40;
    c.rerank.min_matches = 1;
    c.rerank.local_centers = 8;
    c.rerank.local_nprobe = 4;
    c.rerank.local_max_iters = 5;
    c.filter.sim_threshold = 0.3;
    c.submission_k = 10;
    c
}

#[test]
fn criterion_8_determinism_and_formats() {
    let dir = tempfile::TempDir::new().unwrap();
    let data_dir = dir.path().join("data");

    let run = |out: &str, threads: Option<usize>| -> (Vec<u8>, Vec<u8>) {
        let config = determinism_config(&data_dir, dir.path().join(out));
        let pipeline = Pipeline::new(config).unwrap();
        let go = || pipeline.run().unwrap();
        match threads {
            Some(t) => rayon::ThreadPoolBuilder::new()
                .num_threads(t)
                .build()
                .unwrap()
                .install(go),
            None => go(),
        };
        (
            std::fs::read(&pipeline.paths().submission_retrieval).unwrap(),
            std::fs::read(&pipeline.paths().submission_recognition).unwrap(),
        )
    };

    let first = run("out_a", None);
    let second = run("out_b", None);
    assert_eq!(first, second, "two identical runs diverged");
    let single = run("out_1t", Some(1));
    let eight = run("out_8t", Some(8));
    assert_eq!(single, eight, "1-thread and 8-thread runs diverged");
    assert_eq!(first, single, "thread-scoped runs diverged from default");

    // Binary stores roundtrip bit-exactly.
    let out_a = dir.path().join("out_a");
    let emb_bytes = std::fs::read(out_a.join("gallery_pca.emb1")).unwrap();
    let emb = EmbeddingSet::load(&out_a.join("gallery_pca.emb1")).unwrap();
    let copy = dir.path().join("copy.emb1");
    emb.save(&copy).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), emb_bytes, "embedding store roundtrip");

    let pca_bytes = std::fs::read(out_a.join("pca.pca1")).unwrap();
    let pca = PcaModel::load(&out_a.join("pca.pca1")).unwrap();
    let copy = dir.path().join("copy.pca1");
    pca.save(&copy).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), pca_bytes, "rotation store roundtrip");

    let ivf_bytes = std::fs::read(out_a.join("ivf.ivf1")).unwrap();
    let ivf = IvfIndex::load(&out_a.join("ivf.ivf1")).unwrap();
    let copy = dir.path().join("copy.ivf1");
    ivf.save(&copy).unwrap();
    assert_eq!(std::fs::read(&copy).unwrap(), ivf_bytes, "index store roundtrip");

    println!("[criterion 8] determinism across runs and worker counts; formats roundtrip: PASS");
}
