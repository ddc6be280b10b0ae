//! Command-line front end: stage tools, the end-to-end pipeline runner,
//! the synthetic benchmark generator and the ablation harness.
//!
//! Exit codes: 0 success, 1 validation/format error in inputs or flags,
//! 2 runtime failure (I/O, stage failure).

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use indexmap::IndexMap;

use landrank::config::{FrequencySetting, PipelineConfig};
use landrank::error::{Error, Result};
use landrank::eval::{
    ablation_run, format_ablation_table, gap, map_at_k, write_ablation_csv, AblationInputs,
    AblationParams, AblationStage, GroundTruth,
};
use landrank::features::{concat_normalized, PcaModel};
use landrank::localmatch::{load_matches, match_results_by_query};
use landrank::pipeline::{
    filter_queries, grade_predictions, recognize_rankings, rescore_predictions, Metrics, Pipeline,
};
use landrank::recognition::{
    load_classifier_predictions, load_filter_report, load_predictions, save_predictions,
    write_filter_report, ClassPartition, FilterParams,
};
use landrank::rerank::{
    run_dba, run_qe, AcceptNone, LabelVerifier, LocalMatchVerifier, RerankParams, Verifier,
};
use landrank::search::ivf::IvfIndex;
use landrank::search::kmeans::kmeans_fit;
use landrank::search::{
    save_rankings, search_batch, ExactSearcher, IvfSearcher, NeighborSearch,
};
use landrank::store::{load_detections, load_labels, EmbeddingSet, LocalDescriptorSet};
use landrank::synth::{generate, write_dataset, SynthParams, SynthPaths};

#[derive(Parser)]
#[command(
    name = "landrank",
    version,
    about = "Batch landmark retrieval and recognition over precomputed descriptors"
)]
struct Cli {
    /// Worker threads for parallel stages (0 = one per core). Results are
    /// identical for every thread count.
    #[arg(long, global = true, default_value_t = 0)]
    threads: usize,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Generate a synthetic benchmark dataset plus a ready-to-run config
    Synth(SynthArgs),
    /// Concatenate per-model embedding files into one normalized set
    Concat(ConcatArgs),
    /// Fit a PCA (optionally whitening) rotation on gallery embeddings
    PcaFit(PcaFitArgs),
    /// Apply a fitted rotation to an embedding file
    PcaApply(PcaApplyArgs),
    /// Cluster descriptors and build an inverted-file index
    IvfBuild(IvfBuildArgs),
    /// Rank gallery neighbors for every query
    Search(SearchArgs),
    /// Replace gallery descriptors by verified-weighted neighbor aggregates
    Dba(DbaArgs),
    /// Expand query descriptors against a gallery
    Qe(QeArgs),
    /// Vote landmark predictions from ranked neighbor lists
    Recognize(RecognizeArgs),
    /// Flag probable non-landmark queries via detections and seed images
    Filter(FilterArgs),
    /// Attach confidence grades to predictions
    Grade(GradeArgs),
    /// Rescore predictions into grade bands, demoting filtered ones
    Rescore(RescoreArgs),
    /// Score predictions and rankings against ground truth
    Evaluate(EvaluateArgs),
    /// Run every stage end to end from a config file
    Pipeline(PipelineArgs),
    /// Measure the contribution of each pipeline stage
    Ablate(AblateArgs),
}

#[derive(Args)]
struct SynthArgs {
    /// Directory receiving the dataset files and config.json
    #[arg(long)]
    out: PathBuf,
    /// Landmark labels
    #[arg(long, default_value_t = 50)]
    labels: usize,
    /// Gallery images per label
    #[arg(long, default_value_t = 20)]
    images_per_label: usize,
    /// Non-landmark gallery images
    #[arg(long, default_value_t = 500)]
    distractors: usize,
    /// Held-out query images per label
    #[arg(long, default_value_t = 4)]
    queries_per_label: usize,
    /// Non-landmark query images
    #[arg(long, default_value_t = 250)]
    distractor_queries: usize,
    /// Descriptor dimension per model
    #[arg(long, default_value_t = 64)]
    dim: usize,
    /// Cluster noise (per-coordinate standard deviation)
    #[arg(long, default_value_t = 0.15)]
    noise: f32,
    /// Simulated model count
    #[arg(long, default_value_t = 2)]
    models: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct ConcatArgs {
    /// Per-model embedding files, one per model, same image ids
    #[arg(long, num_args = 1.., required = true)]
    inputs: Vec<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PcaFitArgs {
    /// Gallery embeddings; the rotation is always fitted on the gallery
    #[arg(long)]
    gallery: PathBuf,
    /// Output model file
    #[arg(long)]
    out: PathBuf,
    /// Output dimension
    #[arg(long, default_value_t = 512)]
    dim: usize,
    /// Skip variance whitening
    #[arg(long)]
    no_whiten: bool,
}

#[derive(Args)]
struct PcaApplyArgs {
    /// Fitted model file
    #[arg(long)]
    model: PathBuf,
    /// Embeddings to transform
    #[arg(long)]
    input: PathBuf,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IvfBuildArgs {
    /// Global embedding file to index
    #[arg(long, conflicts_with = "locals")]
    embeddings: Option<PathBuf>,
    /// Local descriptor file to index
    #[arg(long)]
    locals: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
    /// Coarse cluster count (clamped to the number of points)
    #[arg(long, default_value_t = 512)]
    centers: usize,
    /// k-means iteration budget
    #[arg(long, default_value_t = 25)]
    max_iters: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
}

#[derive(Args)]
struct SearchArgs {
    /// Query embedding file
    #[arg(long)]
    queries: PathBuf,
    /// Gallery embedding file for brute-force search
    #[arg(long, conflicts_with = "index")]
    gallery: Option<PathBuf>,
    /// Inverted-file index for approximate search
    #[arg(long)]
    index: Option<PathBuf>,
    /// Neighbors per query
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Probed centers per query (index mode)
    #[arg(long, default_value_t = 20)]
    nprobe: usize,
    /// Drop a gallery hit whose id equals the query id
    #[arg(long)]
    exclude_self: bool,
    /// Output rankings CSV
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DbaArgs {
    /// Gallery embedding file to augment
    #[arg(long)]
    gallery: PathBuf,
    /// Output embedding file
    #[arg(long)]
    out: PathBuf,
    /// Inverted-file index over the gallery (brute force when absent)
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    nprobe: usize,
    /// Gallery labels; same-label neighbors count as verified
    #[arg(long)]
    labels: Option<PathBuf>,
    /// Gallery self-match counts; enough matches count as verified
    #[arg(long)]
    matches: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    min_matches: u32,
    /// Neighbors retrieved before verification
    #[arg(long, default_value_t = 300)]
    depth: usize,
    /// Aggregated neighbors without verification
    #[arg(long, default_value_t = 10)]
    base: usize,
    /// Aggregated neighbors cap with verification
    #[arg(long, default_value_t = 20)]
    cap: usize,
    /// Weight the own descriptor 1.0 outside the schedule
    #[arg(long)]
    self_outside: bool,
}

#[derive(Args)]
struct QeArgs {
    /// Query embedding file to expand
    #[arg(long)]
    queries: PathBuf,
    /// Gallery embedding file searched for expansion neighbors
    #[arg(long)]
    gallery: PathBuf,
    /// Output embedding file
    #[arg(long)]
    out: PathBuf,
    /// Inverted-file index over the gallery (brute force when absent)
    #[arg(long)]
    index: Option<PathBuf>,
    #[arg(long, default_value_t = 20)]
    nprobe: usize,
    /// Query-to-gallery match counts; enough matches count as verified
    #[arg(long)]
    matches: Option<PathBuf>,
    #[arg(long, default_value_t = 10)]
    min_matches: u32,
    /// Neighbors retrieved before verification
    #[arg(long, default_value_t = 300)]
    depth: usize,
    /// Aggregated neighbors without verification
    #[arg(long, default_value_t = 3)]
    base: usize,
    /// Aggregated neighbors cap with verification
    #[arg(long, default_value_t = 6)]
    cap: usize,
    /// Weight the own descriptor 1.0 outside the schedule
    #[arg(long)]
    self_outside: bool,
}

#[derive(Args)]
struct RecognizeArgs {
    /// Rankings CSV from `search`
    #[arg(long)]
    rankings: PathBuf,
    /// Gallery labels CSV
    #[arg(long)]
    labels: PathBuf,
    /// Output predictions CSV (ungraded)
    #[arg(long)]
    out: PathBuf,
    /// Labeled neighbors voted over (at most 5)
    #[arg(long, default_value_t = 5)]
    vote_k: usize,
    /// Best-hit score the neighborhood must exceed
    #[arg(long, default_value_t = 0.85)]
    threshold: f64,
}

#[derive(Args)]
struct FilterArgs {
    /// Query embedding file (defines which images are checked)
    #[arg(long)]
    queries: PathBuf,
    /// Detections JSONL for the detector filter
    #[arg(long)]
    detections: Option<PathBuf>,
    /// Known non-landmark seed embeddings for the similarity filter
    #[arg(long)]
    seeds: Option<PathBuf>,
    /// Output filter report CSV
    #[arg(long)]
    out: PathBuf,
    /// Detection score threshold
    #[arg(long, default_value_t = 0.3)]
    det_score: f32,
    /// Detection box area ratio threshold
    #[arg(long, default_value_t = 0.6)]
    area_ratio: f32,
    /// Seed similarity threshold
    #[arg(long, default_value_t = 0.85)]
    sim_threshold: f32,
    /// Seed similarities that must all exceed the threshold
    #[arg(long, default_value_t = 3)]
    sim_topk: usize,
}

#[derive(Args)]
struct GradeArgs {
    /// Predictions CSV to grade
    #[arg(long)]
    predictions: PathBuf,
    /// Rankings CSV the predictions were voted from
    #[arg(long)]
    rankings: PathBuf,
    /// Gallery labels CSV
    #[arg(long)]
    labels: PathBuf,
    /// Classifier predictions CSV for agreement grading
    #[arg(long)]
    classifier: Option<PathBuf>,
    /// Output predictions CSV (graded)
    #[arg(long)]
    out: PathBuf,
    /// Labeled neighbors inspected (at most 5)
    #[arg(long, default_value_t = 5)]
    vote_k: usize,
    /// Every predicted-label hit above this: top grade
    #[arg(long, default_value_t = 0.9)]
    a1_min: f64,
    /// Best predicted-label hit above this: second grade
    #[arg(long, default_value_t = 0.85)]
    a2_max: f64,
}

#[derive(Clone, Copy, ValueEnum)]
enum FrequencyArg {
    Off,
    StageA1a2,
    Extended,
}

impl FrequencyArg {
    fn setting(self) -> FrequencySetting {
        match self {
            FrequencyArg::Off => FrequencySetting::Off,
            FrequencyArg::StageA1a2 => FrequencySetting::StageA1A2,
            FrequencyArg::Extended => FrequencySetting::Extended,
        }
    }
}

#[derive(Args)]
struct RescoreArgs {
    /// Graded predictions CSV
    #[arg(long)]
    predictions: PathBuf,
    /// Output predictions CSV with final confidences
    #[arg(long)]
    out: PathBuf,
    /// Filter report; listed images are demoted below every grade band
    #[arg(long)]
    filter_report: Option<PathBuf>,
    /// Frequency boost of often-predicted trusted labels
    #[arg(long, value_enum, default_value_t = FrequencyArg::StageA1a2)]
    frequency: FrequencyArg,
    /// A label must appear strictly more often than this to be boosted
    #[arg(long, default_value_t = 5)]
    min_count: usize,
}

#[derive(Args)]
struct EvaluateArgs {
    /// Predictions CSV (needs --truth-recognition)
    #[arg(long, requires = "truth_recognition")]
    predictions: Option<PathBuf>,
    /// Recognition ground truth CSV
    #[arg(long)]
    truth_recognition: Option<PathBuf>,
    /// Rankings CSV (needs --truth-retrieval); rows for queries without
    /// ground truth are ignored
    #[arg(long, requires = "truth_retrieval")]
    rankings: Option<PathBuf>,
    /// Retrieval ground truth CSV
    #[arg(long)]
    truth_retrieval: Option<PathBuf>,
    /// Rank cutoff of the retrieval metric
    #[arg(long, default_value_t = 100)]
    k: usize,
    /// Also write the numbers as JSON
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct PipelineArgs {
    /// Pipeline configuration JSON
    #[arg(long)]
    config: PathBuf,
}

#[derive(Args)]
struct AblateArgs {
    /// Per-model gallery embedding files
    #[arg(long, num_args = 1.., required = true)]
    gallery: Vec<PathBuf>,
    /// Per-model query embedding files (same order)
    #[arg(long, num_args = 1.., required = true)]
    queries: Vec<PathBuf>,
    /// Gallery local descriptors (for the rerank stage)
    #[arg(long, requires = "query_locals")]
    gallery_locals: Option<PathBuf>,
    /// Query local descriptors (for the rerank stage)
    #[arg(long, requires = "gallery_locals")]
    query_locals: Option<PathBuf>,
    /// Retrieval ground truth CSV
    #[arg(long)]
    truth_retrieval: PathBuf,
    /// Stages to report: baseline, concat_pca, dba_aqe, rerank
    #[arg(long, value_delimiter = ',', default_values_t = [
        "baseline".to_string(),
        "concat_pca".to_string(),
        "dba_aqe".to_string(),
        "rerank".to_string(),
    ])]
    stages: Vec<String>,
    /// PCA output dimension of the concat stage
    #[arg(long, default_value_t = 512)]
    pca_dim: usize,
    /// Local matches required for verification in the rerank stage
    #[arg(long, default_value_t = 10)]
    min_matches: u32,
    /// Rank cutoff of the reported metric
    #[arg(long, default_value_t = 100)]
    k: usize,
    #[arg(long, default_value_t = 42)]
    seed: u64,
    /// Also write the rows as CSV
    #[arg(long)]
    out: Option<PathBuf>,
}

fn main() {
    let cli = match Cli::try_parse() {
        Ok(cli) => cli,
        Err(e) => {
            // Help and version requests are successes; anything else is a
            // usage problem the caller can fix.
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            std::process::exit(code);
        }
    };
    let code = match run(cli) {
        Ok(()) => 0,
        Err(e) => {
            eprintln!("error: {e}");
            e.exit_code()
        }
    };
    std::process::exit(code);
}

fn run(cli: Cli) -> Result<()> {
    if cli.threads > 0 {
        let pool = rayon::ThreadPoolBuilder::new()
            .num_threads(cli.threads)
            .build()
            .map_err(|e| Error::validation(format!("cannot build thread pool: {e}")))?;
        pool.install(|| dispatch(cli.command))
    } else {
        dispatch(cli.command)
    }
}

fn dispatch(command: Command) -> Result<()> {
    match command {
        Command::Synth(args) => cmd_synth(args),
        Command::Concat(args) => cmd_concat(args),
        Command::PcaFit(args) => cmd_pca_fit(args),
        Command::PcaApply(args) => cmd_pca_apply(args),
        Command::IvfBuild(args) => cmd_ivf_build(args),
        Command::Search(args) => cmd_search(args),
        Command::Dba(args) => cmd_dba(args),
        Command::Qe(args) => cmd_qe(args),
        Command::Recognize(args) => cmd_recognize(args),
        Command::Filter(args) => cmd_filter(args),
        Command::Grade(args) => cmd_grade(args),
        Command::Rescore(args) => cmd_rescore(args),
        Command::Evaluate(args) => cmd_evaluate(args),
        Command::Pipeline(args) => cmd_pipeline(args),
        Command::Ablate(args) => cmd_ablate(args),
    }
}

fn cmd_synth(args: SynthArgs) -> Result<()> {
    let params = SynthParams {
        n_labels: args.labels,
        images_per_label: args.images_per_label,
        distractors: args.distractors,
        queries_per_label: args.queries_per_label,
        distractor_queries: args.distractor_queries,
        dim: args.dim,
        noise: args.noise,
        num_models: args.models,
        seed: args.seed,
        ..SynthParams::default()
    };
    let dataset = generate(&params)?;
    write_dataset(&dataset, &args.out)?;

    // A config wired to the generated files, with index and threshold
    // settings sized for this benchmark. Paths are relative to the config
    // file, so the directory can be moved freely.
    let rel = SynthPaths::new(Path::new(""), params.num_models);
    let mut config = PipelineConfig {
        gallery_embeddings: rel.gallery_models,
        query_embeddings: rel.query_models,
        seed_embeddings: rel.seed_models,
        gallery_locals: Some(rel.gallery_locals),
        query_locals: Some(rel.query_locals),
        labels: Some(rel.labels),
        detections: Some(rel.detections),
        classifier: Some(rel.classifier),
        truth_recognition: Some(rel.truth_recognition),
        truth_retrieval: Some(rel.truth_retrieval),
        out_dir: PathBuf::from("run"),
        ..PipelineConfig::default()
    };
    let gallery_size = params.n_labels * params.images_per_label + params.distractors;
    // The rotation rank is limited by the concatenated dimension and by the
    // gallery sample count; staying at half the sample count keeps the
    // whitened tail directions from being pure noise on small galleries.
    config.pca.out_dim = 64
        .min(params.dim * params.num_models)
        .min((gallery_size / 2).max(1));
    config.ivf.centers = 128.min(gallery_size);
    config.ivf.nprobe = 20.min(config.ivf.centers);
    config.rerank.min_matches = 1;
    config.filter.sim_threshold = 0.3;
    let config_path = args.out.join("config.json");
    config.save(&config_path)?;

    let queries = params.n_labels * params.queries_per_label + params.distractor_queries;
    println!(
        "wrote {} gallery / {queries} query images over {} models to {}",
        gallery_size,
        params.num_models,
        args.out.display()
    );
    println!("run: landrank pipeline --config {}", config_path.display());
    Ok(())
}

fn cmd_concat(args: ConcatArgs) -> Result<()> {
    let sets = args
        .inputs
        .iter()
        .map(|p| EmbeddingSet::load(p))
        .collect::<Result<Vec<_>>>()?;
    let joined = concat_normalized(&sets)?;
    joined.save(&args.out)?;
    println!("{} images, {} dims -> {}", joined.len(), joined.dim(), args.out.display());
    Ok(())
}

fn cmd_pca_fit(args: PcaFitArgs) -> Result<()> {
    let gallery = EmbeddingSet::load(&args.gallery)?;
    let model = PcaModel::fit(&gallery, args.dim, !args.no_whiten)?;
    model.save(&args.out)?;
    println!(
        "fitted {} -> {} dims (whiten: {}) on {} images",
        model.in_dim(),
        model.out_dim(),
        model.whiten(),
        gallery.len()
    );
    Ok(())
}

fn cmd_pca_apply(args: PcaApplyArgs) -> Result<()> {
    let model = PcaModel::load(&args.model)?;
    let set = EmbeddingSet::load(&args.input)?;
    let projected = model.apply_set(&set)?;
    projected.save(&args.out)?;
    println!("{} images -> {} dims", projected.len(), projected.dim());
    Ok(())
}

fn cmd_ivf_build(args: IvfBuildArgs) -> Result<()> {
    let index = match (&args.embeddings, &args.locals) {
        (Some(path), None) => {
            let set = EmbeddingSet::load(path)?;
            let points: Vec<&[f32]> = set.iter().map(|(_, v)| v).collect();
            let k = args.centers.min(points.len());
            let centroids = kmeans_fit(&points, set.dim(), k, args.max_iters, args.seed)?;
            IvfIndex::build_from_embeddings(&set, centroids)?
        }
        (None, Some(path)) => {
            let set = LocalDescriptorSet::load(path)?;
            let points: Vec<&[f32]> = set
                .iter()
                .flat_map(|(_, flat)| flat.chunks_exact(set.dim()))
                .collect();
            let k = args.centers.min(points.len());
            let centroids = kmeans_fit(&points, set.dim(), k, args.max_iters, args.seed)?;
            IvfIndex::build_from_locals(&set, centroids)?
        }
        _ => {
            return Err(Error::validation(
                "pass exactly one of --embeddings or --locals",
            ))
        }
    };
    index.save(&args.out)?;
    println!(
        "{} points in {} lists of dim {}",
        index.num_points(),
        index.k(),
        index.dim()
    );
    Ok(())
}

enum SearchBackend {
    Exact(EmbeddingSet),
    Index(IvfIndex),
}

fn cmd_search(args: SearchArgs) -> Result<()> {
    let queries = EmbeddingSet::load(&args.queries)?;
    let backend = match (&args.gallery, &args.index) {
        (Some(path), None) => SearchBackend::Exact(EmbeddingSet::load(path)?),
        (None, Some(path)) => SearchBackend::Index(IvfIndex::load(path)?),
        _ => {
            return Err(Error::validation(
                "pass exactly one of --gallery or --index",
            ))
        }
    };
    let searcher: Box<dyn NeighborSearch> = match &backend {
        SearchBackend::Exact(gallery) => {
            Box::new(ExactSearcher { gallery, exclude_self: args.exclude_self })
        }
        SearchBackend::Index(index) => Box::new(IvfSearcher {
            index,
            nprobe: args.nprobe.min(index.k()),
            exclude_self: args.exclude_self,
        }),
    };
    let lists = search_batch(searcher.as_ref(), &queries, args.k)?;
    save_rankings(&lists, &args.out)?;
    println!("ranked {} queries at depth {}", lists.len(), args.k);
    Ok(())
}

/// Builds the strongest verifier the given signal files allow.
struct VerifierParts {
    labels: Option<landrank::store::LabelMap>,
    matches: Option<IndexMap<landrank::store::ImageId, landrank::localmatch::MatchResult>>,
    min_matches: u32,
}

impl VerifierParts {
    fn load(
        labels: Option<&PathBuf>,
        matches: Option<&PathBuf>,
        min_matches: u32,
    ) -> Result<VerifierParts> {
        Ok(VerifierParts {
            labels: labels.map(|p| load_labels(p)).transpose()?,
            matches: matches
                .map(|p| Ok::<_, Error>(match_results_by_query(load_matches(p)?)))
                .transpose()?,
            min_matches,
        })
    }

    fn build(&self) -> Box<dyn Verifier + '_> {
        let mut owned: Vec<Box<dyn Verifier + '_>> = Vec::new();
        if let Some(l) = &self.labels {
            owned.push(Box::new(LabelVerifier { query_labels: l, candidate_labels: l }));
        }
        if let Some(m) = &self.matches {
            owned.push(Box::new(LocalMatchVerifier {
                results: m,
                min_matches: self.min_matches,
            }));
        }
        if owned.is_empty() {
            return Box::new(AcceptNone);
        }
        Box::new(OwnedAny(owned))
    }
}

/// Any-of verifier owning its parts (the library combinator borrows them).
struct OwnedAny<'a>(Vec<Box<dyn Verifier + 'a>>);

impl Verifier for OwnedAny<'_> {
    fn verify(
        &self,
        query: &landrank::store::ImageId,
        candidate: &landrank::store::ImageId,
    ) -> bool {
        self.0.iter().any(|v| v.verify(query, candidate))
    }
}

fn gallery_searcher<'a>(
    gallery: &'a EmbeddingSet,
    index: &'a Option<IvfIndex>,
    nprobe: usize,
    exclude_self: bool,
) -> Box<dyn NeighborSearch + 'a> {
    match index {
        Some(index) => Box::new(IvfSearcher {
            index,
            nprobe: nprobe.min(index.k()),
            exclude_self,
        }),
        None => Box::new(ExactSearcher { gallery, exclude_self }),
    }
}

fn cmd_dba(args: DbaArgs) -> Result<()> {
    let gallery = EmbeddingSet::load(&args.gallery)?;
    let parts = VerifierParts::load(args.labels.as_ref(), args.matches.as_ref(), args.min_matches)?;
    let verifier = parts.build();
    let index = args.index.as_ref().map(|p| IvfIndex::load(p)).transpose()?;
    let searcher = gallery_searcher(&gallery, &index, args.nprobe, true);
    let params = RerankParams {
        neighbor_depth: args.depth,
        dba_base: args.base,
        dba_cap: args.cap,
        self_outside: args.self_outside,
        ..RerankParams::default()
    };
    let expanded = run_dba(&gallery, searcher.as_ref(), verifier.as_ref(), &params)?;
    expanded.save(&args.out)?;
    println!("augmented {} gallery descriptors", expanded.len());
    Ok(())
}

fn cmd_qe(args: QeArgs) -> Result<()> {
    let queries = EmbeddingSet::load(&args.queries)?;
    let gallery = EmbeddingSet::load(&args.gallery)?;
    let parts = VerifierParts::load(None, args.matches.as_ref(), args.min_matches)?;
    let verifier = parts.build();
    let index = args.index.as_ref().map(|p| IvfIndex::load(p)).transpose()?;
    let searcher = gallery_searcher(&gallery, &index, args.nprobe, false);
    let params = RerankParams {
        neighbor_depth: args.depth,
        qe_base: args.base,
        qe_cap: args.cap,
        self_outside: args.self_outside,
        ..RerankParams::default()
    };
    let expanded = run_qe(&queries, &gallery, searcher.as_ref(), verifier.as_ref(), &params)?;
    expanded.save(&args.out)?;
    println!("expanded {} query descriptors", expanded.len());
    Ok(())
}

fn cmd_recognize(args: RecognizeArgs) -> Result<()> {
    let lists = landrank::search::load_rankings(&args.rankings)?;
    let labels = load_labels(&args.labels)?;
    let predictions = recognize_rankings(&lists, &labels, args.vote_k, args.threshold)?;
    save_predictions(&predictions, &args.out)?;
    println!("predicted {} of {} queries", predictions.len(), lists.len());
    Ok(())
}

fn cmd_filter(args: FilterArgs) -> Result<()> {
    if args.detections.is_none() && args.seeds.is_none() {
        return Err(Error::validation("pass --detections and/or --seeds"));
    }
    let queries = EmbeddingSet::load(&args.queries)?;
    let detections = args.detections.as_ref().map(|p| load_detections(p)).transpose()?;
    let seeds = args.seeds.as_ref().map(|p| EmbeddingSet::load(p)).transpose()?;
    let params = FilterParams {
        det_score_threshold: args.det_score,
        area_ratio_threshold: args.area_ratio,
        sim_threshold: args.sim_threshold,
        sim_topk: args.sim_topk,
    };
    params.validate()?;
    let records = filter_queries(
        &queries,
        detections.as_ref(),
        seeds.as_ref(),
        &ClassPartition::default(),
        &params,
    )?;
    write_filter_report(&records, &args.out)?;
    println!("flagged {} of {} queries", records.len(), queries.len());
    Ok(())
}

fn cmd_grade(args: GradeArgs) -> Result<()> {
    let mut predictions = load_predictions(&args.predictions)?;
    let lists = landrank::search::load_rankings(&args.rankings)?;
    let labels = load_labels(&args.labels)?;
    let classifier = match &args.classifier {
        Some(path) => load_classifier_predictions(path)?,
        None => IndexMap::new(),
    };
    grade_predictions(
        &mut predictions,
        &lists,
        &labels,
        &classifier,
        args.vote_k,
        args.a1_min,
        args.a2_max,
    )?;
    save_predictions(&predictions, &args.out)?;
    println!("graded {} predictions", predictions.len());
    Ok(())
}

fn cmd_rescore(args: RescoreArgs) -> Result<()> {
    let mut predictions = load_predictions(&args.predictions)?;
    let filtered: BTreeSet<_> = match &args.filter_report {
        Some(path) => load_filter_report(path)?.into_iter().map(|r| r.id).collect(),
        None => BTreeSet::new(),
    };
    rescore_predictions(
        &mut predictions,
        &filtered,
        args.frequency.setting().mode(),
        args.min_count,
    )?;
    save_predictions(&predictions, &args.out)?;
    println!("rescored {} predictions ({} demoted)", predictions.len(), filtered.len());
    Ok(())
}

fn cmd_evaluate(args: EvaluateArgs) -> Result<()> {
    if args.predictions.is_none() && args.rankings.is_none() {
        return Err(Error::validation(
            "pass --predictions/--truth-recognition and/or --rankings/--truth-retrieval",
        ));
    }
    let mut truth = GroundTruth::new();
    if let Some(path) = &args.truth_recognition {
        truth.load_recognition(path)?;
    }
    if let Some(path) = &args.truth_retrieval {
        truth.load_retrieval(path)?;
    }

    let mut gap_value = None;
    if let Some(path) = &args.predictions {
        let predictions = load_predictions(path)?;
        let value = gap(&predictions, &truth)?;
        println!("gap      {value:.6}");
        gap_value = Some(value);
    }
    let mut map_value = None;
    if let Some(path) = &args.rankings {
        let lists: Vec<_> = landrank::search::load_rankings(path)?
            .into_iter()
            .filter(|l| truth.retrieval.contains_key(&l.query))
            .collect();
        let value = map_at_k(&lists, &truth, args.k)?;
        println!("map@{:<4} {value:.6}", args.k);
        map_value = Some(value);
    }
    if let Some(path) = &args.out {
        Metrics { gap: gap_value, map_at_k: map_value, k: args.k }.save(path)?;
    }
    Ok(())
}

fn cmd_pipeline(args: PipelineArgs) -> Result<()> {
    let config = PipelineConfig::load(&args.config)?;
    let pipeline = Pipeline::new(config)?;
    let report = pipeline.run()?;
    print!("{}", report.format());
    let metrics_path = &pipeline.paths().metrics;
    if metrics_path.exists() {
        let metrics = Metrics::load(metrics_path)?;
        if let Some(v) = metrics.gap {
            println!("gap      {v:.6}");
        }
        if let Some(v) = metrics.map_at_k {
            println!("map@{:<4} {v:.6}", metrics.k);
        }
    }
    Ok(())
}

fn cmd_ablate(args: AblateArgs) -> Result<()> {
    let stages: Vec<AblationStage> = args
        .stages
        .iter()
        .map(|s| s.parse())
        .collect::<Result<_>>()?;
    let gallery_models = args
        .gallery
        .iter()
        .map(|p| EmbeddingSet::load(p))
        .collect::<Result<Vec<_>>>()?;
    let query_models = args
        .queries
        .iter()
        .map(|p| EmbeddingSet::load(p))
        .collect::<Result<Vec<_>>>()?;
    let gallery_locals =
        args.gallery_locals.as_ref().map(|p| LocalDescriptorSet::load(p)).transpose()?;
    let query_locals =
        args.query_locals.as_ref().map(|p| LocalDescriptorSet::load(p)).transpose()?;
    let mut truth = GroundTruth::new();
    truth.load_retrieval(&args.truth_retrieval)?;

    let inputs = AblationInputs {
        gallery_models: &gallery_models,
        query_models: &query_models,
        gallery_locals: gallery_locals.as_ref(),
        query_locals: query_locals.as_ref(),
        truth: &truth,
    };
    let params = AblationParams {
        pca_out_dim: args.pca_dim,
        min_matches: args.min_matches,
        map_k: args.k,
        seed: args.seed,
        ..AblationParams::default()
    };
    let rows = ablation_run(&inputs, &stages, &params)?;
    print!("{}", format_ablation_table(&rows));
    if let Some(path) = &args.out {
        write_ablation_csv(&rows, path)?;
    }
    Ok(())
}
