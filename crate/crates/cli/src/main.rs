mod config;

use std::collections::BTreeSet;
use std::fs;
use std::path::{Path, PathBuf};

use anyhow::{bail, Context, Result};
use clap::{ArgAction, Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use segvlad_core::aggregate::{AggregationMethod, DescriptorSet};
use segvlad_core::dimred::PcaModel;
use segvlad_core::evalbench::{
    ablate, account_storage_time, build_vocabulary, make_gt, read_pairs_csv, recall_at_k,
    synth_generate, time_queries, write_synth, ConfigSnapshot, GroundTruth, GtMode, RunConfig,
    SynthSpec,
};
use segvlad_core::io::{load_manifest, write_masks, DatasetManifest, Split};
use segvlad_core::pipeline::{
    apply_pca, cull_descriptor_set, describe_split, fit_pca, run_queries, to_descriptor_set,
    DescribeConfig, QueryResult, DEFAULT_K_PRIME, DEFAULT_ORDER,
};
use segvlad_core::retrieval::{build_index, FlatIndex, RankingMethod};
use segvlad_core::seggraph::patchify;
use segvlad_core::vocab::{VocabSource, Vocabulary};

/// Segment-level visual place recognition.
///
/// Every subcommand also accepts `--config FILE`: a JSON object whose keys
/// are that subcommand's flag names. Flags on the command line win.
#[derive(Parser)]
#[command(name = "segvlad", version, args_override_self = true)]
struct Cli {
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Cluster sampled feature cells into a VLAD vocabulary.
    BuildVocab(BuildVocabArgs),
    /// Compute SuperSegment descriptors for one split of a manifest.
    Describe(DescribeArgs),
    /// Build a flat index from descriptor sets, optionally with PCA.
    Index(IndexArgs),
    /// Drop database SuperSegments that overlap a larger kept one.
    Filter(FilterArgs),
    /// Rank database images for every query image.
    Query(QueryArgs),
    /// Recall@K plus storage and timing accounting.
    Eval(EvalArgs),
    /// Write a uniform patch mask file.
    Patchify(PatchifyArgs),
    /// Generate the planted-overlap synthetic dataset.
    Synth(SynthArgs),
    /// Recall over an order x method grid.
    Ablate(AblateArgs),
}

#[derive(Clone, Copy, ValueEnum)]
enum SplitArg {
    Reference,
    Query,
}

impl From<SplitArg> for Split {
    fn from(s: SplitArg) -> Split {
        match s {
            SplitArg::Reference => Split::Reference,
            SplitArg::Query => Split::Query,
        }
    }
}

#[derive(Clone, Copy, ValueEnum)]
enum SourceArg {
    Map,
    Domain,
}

impl From<SourceArg> for VocabSource {
    fn from(s: SourceArg) -> VocabSource {
        match s {
            SourceArg::Map => VocabSource::Map,
            SourceArg::Domain => VocabSource::Domain,
        }
    }
}

#[derive(Args)]
struct BuildVocabArgs {
    /// Manifest to sample from; with `--source domain` every image is used.
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, default_value_t = 32)]
    clusters: usize,
    #[arg(long, value_enum, default_value = "map")]
    source: SourceArg,
    #[arg(long, default_value_t = 256)]
    samples_per_image: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    /// Output stem; writes STEM.svt and STEM.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct DescribeArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long, value_enum, default_value = "reference")]
    split: SplitArg,
    #[arg(long, default_value_t = DEFAULT_ORDER)]
    order: u32,
    /// segvlad, sap, gap, gem, gem<p> or global_vlad.
    #[arg(long, default_value = "segvlad")]
    method: AggregationMethod,
    /// Vocabulary stem, required by segvlad and global_vlad.
    #[arg(long)]
    vocab: Option<PathBuf>,
    /// Use uniform square patches of this size instead of segments.
    #[arg(long)]
    patch_size: Option<u32>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct IndexArgs {
    /// Descriptor set stems; may be repeated or comma separated.
    #[arg(long, required = true, value_delimiter = ',', action = ArgAction::Set, num_args = 1..)]
    descriptors: Vec<PathBuf>,
    /// Fit PCA to this many dimensions on the indexed descriptors.
    #[arg(long, requires = "pca_out")]
    pca_dim: Option<usize>,
    #[arg(long)]
    whiten: bool,
    /// Where to save the fitted PCA model.
    #[arg(long)]
    pca_out: Option<PathBuf>,
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct FilterArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    descriptors: PathBuf,
    #[arg(long, value_enum, default_value = "reference")]
    split: SplitArg,
    /// IOU threshold ψ in [0, 1].
    #[arg(long)]
    iou_threshold: f64,
    /// Patch size used when describing, if any.
    #[arg(long)]
    patch_size: Option<u32>,
    #[arg(long)]
    out: PathBuf,
    /// Cull report path; defaults to OUT.cull.json.
    #[arg(long)]
    report: Option<PathBuf>,
}

#[derive(Args)]
struct QueryArgs {
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    /// PCA model stem applied to the queries.
    #[arg(long)]
    pca: Option<PathBuf>,
    #[arg(long, default_value_t = DEFAULT_K_PRIME)]
    k_prime: usize,
    #[arg(long, default_value_t = 5)]
    top_k: usize,
    /// weighted, maxseg or maxsim.
    #[arg(long, default_value = "weighted")]
    ranking: RankingMethod,
    /// Output stem for STEM.json and STEM.csv; CSV goes to stdout otherwise.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
#[group(id = "gt", required = true, multiple = false, args = ["radius", "frame_radius", "pairs"])]
struct GtArgs {
    /// Ground truth: references within this distance of the query position.
    #[arg(long)]
    radius: Option<f64>,
    /// Ground truth: references within this many frames of the query.
    #[arg(long)]
    frame_radius: Option<u64>,
    /// Ground truth: CSV of query_id,reference_id pairs.
    #[arg(long)]
    pairs: Option<PathBuf>,
}

impl GtArgs {
    fn ground_truth(&self, manifest: &DatasetManifest) -> Result<GroundTruth> {
        let mode = match (self.radius, self.frame_radius, &self.pairs) {
            (Some(r), _, _) => GtMode::MetricRadius(r),
            (_, Some(f), _) => GtMode::FrameRadius(f),
            (_, _, Some(p)) => GtMode::Pairs(read_pairs_csv(p)?),
            _ => bail!("one of --radius, --frame-radius or --pairs is required"),
        };
        Ok(make_gt(manifest, &mode)?)
    }
}

#[derive(Args)]
struct EvalArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[arg(long)]
    index: PathBuf,
    #[arg(long)]
    queries: PathBuf,
    #[arg(long)]
    pca: Option<PathBuf>,
    #[command(flatten)]
    gt: GtArgs,
    #[arg(long, default_value = "1,5", value_delimiter = ',', action = ArgAction::Set, num_args = 1..)]
    ks: Vec<usize>,
    #[arg(long, default_value_t = DEFAULT_K_PRIME)]
    k_prime: usize,
    #[arg(long, default_value = "weighted")]
    ranking: RankingMethod,
    /// Repeat every query this many times (at least 32) and report the
    /// median time; 0 times a single run.
    #[arg(long, default_value_t = 0)]
    timing_reps: usize,
    /// Output stem: STEM.json, STEM.csv, STEM.queries.csv, STEM.storage.json.
    #[arg(long)]
    out: PathBuf,
}

#[derive(Args)]
struct PatchifyArgs {
    #[arg(long)]
    height: u32,
    #[arg(long)]
    width: u32,
    #[arg(long)]
    patch_size: u32,
    /// Mask file to write.
    #[arg(long)]
    out: Option<PathBuf>,
}

#[derive(Args)]
struct SynthArgs {
    #[arg(long)]
    out: PathBuf,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long)]
    num_refs: Option<usize>,
    #[arg(long)]
    num_queries: Option<usize>,
    #[arg(long)]
    segments_per_image: Option<usize>,
    #[arg(long)]
    overlap_fraction: Option<f64>,
    #[arg(long)]
    distractor_strength: Option<f64>,
    #[arg(long)]
    distractor_blobs: Option<usize>,
    #[arg(long)]
    feature_dim: Option<usize>,
    #[arg(long)]
    noise: Option<f64>,
}

#[derive(Args)]
struct AblateArgs {
    #[arg(long)]
    manifest: PathBuf,
    #[command(flatten)]
    gt: GtArgs,
    #[arg(long, default_value = "0,1,2,3", value_delimiter = ',', action = ArgAction::Set, num_args = 1..)]
    orders: Vec<u32>,
    #[arg(long, default_value = "segvlad", value_delimiter = ',', action = ArgAction::Set, num_args = 1..)]
    methods: Vec<AggregationMethod>,
    /// Shared vocabulary stem; built from the references when absent.
    #[arg(long)]
    vocab: Option<PathBuf>,
    #[arg(long, default_value_t = 32)]
    clusters: usize,
    #[arg(long, default_value_t = 256)]
    samples_per_image: usize,
    #[arg(long, default_value_t = 0)]
    seed: u64,
    #[arg(long)]
    patch_size: Option<u32>,
    #[arg(long)]
    pca_dim: Option<usize>,
    #[arg(long)]
    whiten: bool,
    #[arg(long)]
    iou_threshold: Option<f64>,
    #[arg(long, default_value_t = DEFAULT_K_PRIME)]
    k_prime: usize,
    #[arg(long, default_value = "1,5", value_delimiter = ',', action = ArgAction::Set, num_args = 1..)]
    ks: Vec<usize>,
    #[arg(long, default_value = "weighted")]
    ranking: RankingMethod,
    /// Output stem: STEM.json and STEM.csv.
    #[arg(long)]
    out: PathBuf,
}

fn with_ext(stem: &Path, ext: &str) -> PathBuf {
    let mut s = stem.as_os_str().to_owned();
    s.push(".");
    s.push(ext);
    PathBuf::from(s)
}

fn write(path: &Path, text: &str) -> Result<()> {
    if let Some(dir) = path.parent().filter(|d| !d.as_os_str().is_empty()) {
        fs::create_dir_all(dir).with_context(|| format!("creating {}", dir.display()))?;
    }
    fs::write(path, text).with_context(|| format!("writing {}", path.display()))
}

fn manifest(path: &Path) -> Result<DatasetManifest> {
    load_manifest(path).with_context(|| format!("loading manifest {}", path.display()))
}

fn descriptors(stem: &Path) -> Result<DescriptorSet> {
    DescriptorSet::load(stem).with_context(|| format!("loading descriptors {}", stem.display()))
}

fn index(stem: &Path) -> Result<FlatIndex> {
    FlatIndex::load(stem).with_context(|| format!("loading index {}", stem.display()))
}

fn queries_with_pca(stem: &Path, pca: Option<&Path>) -> Result<(DescriptorSet, Option<PcaModel>)> {
    let set = descriptors(stem)?;
    match pca {
        Some(p) => {
            let model = PcaModel::load(p).with_context(|| format!("loading PCA {}", p.display()))?;
            Ok((apply_pca(&set, &model)?, Some(model)))
        }
        None => Ok((set, None)),
    }
}

/// Image ids of a descriptor set in order of first appearance.
fn image_ids(set: &DescriptorSet) -> Vec<String> {
    let mut seen = BTreeSet::new();
    set.provenance
        .iter()
        .filter(|p| seen.insert(p.image_id.as_str()))
        .map(|p| p.image_id.clone())
        .collect()
}

fn build_vocab(a: BuildVocabArgs) -> Result<()> {
    let m = manifest(&a.manifest)?;
    let vocab = build_vocabulary(&m, a.source.into(), a.clusters, a.samples_per_image, a.seed)?;
    vocab.save(&a.out)?;
    println!("vocabulary: {} clusters x {} dims -> {}", vocab.num_clusters(), vocab.dim(), a.out.display());
    Ok(())
}

fn describe(a: DescribeArgs) -> Result<()> {
    let m = manifest(&a.manifest)?;
    let vocab = match &a.vocab {
        Some(p) => Some(Vocabulary::load(p).with_context(|| format!("loading vocabulary {}", p.display()))?),
        None => None,
    };
    if a.method.needs_vocabulary() && vocab.is_none() {
        bail!("--method {} needs --vocab", a.method);
    }
    let cfg = DescribeConfig {
        order: a.order,
        method: a.method,
        patch_size: a.patch_size,
    };
    let set = to_descriptor_set(&describe_split(&m, a.split.into(), &cfg, vocab.as_ref())?, &cfg)?;
    set.save(&a.out)?;
    println!("descriptors: {} x {} -> {}", set.len(), set.dim(), a.out.display());
    Ok(())
}

fn build(a: IndexArgs) -> Result<()> {
    let mut sets = a.descriptors.iter().map(|p| descriptors(p)).collect::<Result<Vec<_>>>()?;
    if let Some(d) = a.pca_dim {
        let all = DescriptorSet::concat(&sets)?;
        let model = fit_pca(&all, d, a.whiten)?;
        model.save(a.pca_out.as_ref().expect("clap requires --pca-out"))?;
        sets = vec![apply_pca(&all, &model)?];
    }
    let idx = build_index(&sets)?;
    idx.save(&a.out)?;
    println!(
        "index: {} descriptors x {} dims over {} images -> {}",
        idx.len(),
        idx.dim(),
        idx.images().len(),
        a.out.display()
    );
    Ok(())
}

fn filter(a: FilterArgs) -> Result<()> {
    let m = manifest(&a.manifest)?;
    let set = descriptors(&a.descriptors)?;
    let (kept, report) = cull_descriptor_set(&m, a.split.into(), &set, a.iou_threshold, a.patch_size)?;
    kept.save(&a.out)?;
    let report_path = a.report.unwrap_or_else(|| with_ext(&a.out, "cull.json"));
    report.save(&report_path)?;
    println!(
        "kept {} of {} SuperSegments ({:.4}) at psi={} -> {}",
        report.kept,
        report.total,
        report.retention_ratio,
        report.threshold,
        a.out.display()
    );
    Ok(())
}

fn rankings_csv(results: &[QueryResult], top_k: usize) -> String {
    let mut out = String::from("query_id,rank,image_id,score\n");
    for r in results {
        for (i, e) in r.ranking.top(top_k).iter().enumerate() {
            out.push_str(&format!("{},{},{},{}\n", r.query_id, i + 1, e.image_id, e.score));
        }
    }
    out
}

fn query(a: QueryArgs) -> Result<()> {
    let idx = index(&a.index)?;
    let (queries, _) = queries_with_pca(&a.queries, a.pca.as_deref())?;
    let ids = image_ids(&queries);
    let mut results = run_queries(&idx, &queries, &ids, a.k_prime, a.ranking)?;
    for r in &mut results {
        r.ranking.entries.truncate(a.top_k);
    }
    let csv = rankings_csv(&results, a.top_k);
    match &a.out {
        Some(stem) => {
            write(&with_ext(stem, "json"), &serde_json::to_string_pretty(&results)?)?;
            write(&with_ext(stem, "csv"), &csv)?;
            println!("{} queries ranked -> {}", results.len(), stem.display());
        }
        None => print!("{csv}"),
    }
    Ok(())
}

fn eval(a: EvalArgs) -> Result<()> {
    let m = manifest(&a.manifest)?;
    let gt = a.gt.ground_truth(&m)?;
    let idx = index(&a.index)?;
    let (queries, pca) = queries_with_pca(&a.queries, a.pca.as_deref())?;
    let ids: Vec<String> = m.entries(Split::Query).iter().map(|e| e.image_id.clone()).collect();
    let results = run_queries(&idx, &queries, &ids, a.k_prime, a.ranking)?;
    let first = idx.provenance().first();
    let snapshot = ConfigSnapshot {
        order: first.map(|p| p.order),
        method: first.map(|p| p.method.to_string()),
        clusters: None,
        pca_dim: pca.as_ref().map(PcaModel::dim),
        iou_threshold: None,
        k_prime: Some(a.k_prime),
        ranking: Some(a.ranking.to_string()),
    };
    let report = recall_at_k(&results, &gt, &a.ks, snapshot)?;
    report.save(&a.out)?;
    let per_query_ms: Vec<f64> = if a.timing_reps > 0 {
        time_queries(&idx, &queries, &ids, a.k_prime, a.ranking, a.timing_reps)?
    } else {
        results.iter().map(|r| r.elapsed_ms).collect()
    };
    let storage = account_storage_time(&idx, &per_query_ms)?;
    write(&with_ext(&a.out, "storage.json"), &serde_json::to_string_pretty(&storage)?)?;
    let recalls: Vec<String> = report
        .ks
        .iter()
        .zip(&report.recall)
        .map(|(k, r)| format!("R@{k}={r:.4}"))
        .collect();
    println!(
        "{} queries: {} | {} bytes, {:.3} ms/query",
        report.num_queries,
        recalls.join(" "),
        storage.total_bytes,
        storage.mean_query_ms
    );
    Ok(())
}

fn patch(a: PatchifyArgs) -> Result<()> {
    let (masks, _) = patchify(a.height, a.width, a.patch_size)?;
    if let Some(out) = &a.out {
        write_masks(out, &masks)?;
    }
    println!("{}", json!({"height": a.height, "width": a.width, "patch_size": a.patch_size, "segments": masks.len()}));
    Ok(())
}

fn synth(a: SynthArgs) -> Result<()> {
    let d = SynthSpec::default();
    let spec = SynthSpec {
        seed: a.seed.unwrap_or(d.seed),
        num_refs: a.num_refs.unwrap_or(d.num_refs),
        num_queries: a.num_queries.unwrap_or(d.num_queries),
        segments_per_image: a.segments_per_image.unwrap_or(d.segments_per_image),
        overlap_fraction: a.overlap_fraction.unwrap_or(d.overlap_fraction),
        distractor_strength: a.distractor_strength.unwrap_or(d.distractor_strength),
        distractor_blobs: a.distractor_blobs.unwrap_or(d.distractor_blobs),
        feature_dim: a.feature_dim.unwrap_or(d.feature_dim),
        noise: a.noise.unwrap_or(d.noise),
        ..d
    };
    let ds = synth_generate(&spec)?;
    let path = write_synth(&ds, &a.out)?;
    println!(
        "{} references, {} queries -> {}",
        ds.references.len(),
        ds.queries.len(),
        path.display()
    );
    Ok(())
}

fn ablation(a: AblateArgs) -> Result<()> {
    let m = manifest(&a.manifest)?;
    let gt = a.gt.ground_truth(&m)?;
    let vocab = match &a.vocab {
        Some(p) => Some(Vocabulary::load(p).with_context(|| format!("loading vocabulary {}", p.display()))?),
        None => None,
    };
    let base = RunConfig {
        patch_size: a.patch_size,
        clusters: vocab.as_ref().map_or(a.clusters, Vocabulary::num_clusters),
        vocab_samples_per_image: a.samples_per_image,
        seed: a.seed,
        pca_dim: a.pca_dim,
        whiten: a.whiten,
        iou_threshold: a.iou_threshold,
        k_prime: a.k_prime,
        ks: a.ks.clone(),
        ranking: a.ranking,
        ..RunConfig::default()
    };
    let rows = ablate(&m, &gt, &base, &a.orders, &a.methods, vocab.as_ref())?;
    write(&with_ext(&a.out, "json"), &serde_json::to_string_pretty(&rows)?)?;
    let mut csv = String::from("order,method");
    for k in &a.ks {
        csv.push_str(&format!(",r@{k}"));
    }
    csv.push('\n');
    for r in &rows {
        csv.push_str(&format!("{},{}", r.order, r.method));
        for v in &r.report.recall {
            csv.push_str(&format!(",{v}"));
        }
        csv.push('\n');
    }
    write(&with_ext(&a.out, "csv"), &csv)?;
    print!("{csv}");
    Ok(())
}

fn main() -> Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("warn")).init();
    let args = config::expand_args(std::env::args_os().collect())?;
    match Cli::parse_from(args).command {
        Command::BuildVocab(a) => build_vocab(a),
        Command::Describe(a) => describe(a),
        Command::Index(a) => build(a),
        Command::Filter(a) => filter(a),
        Command::Query(a) => query(a),
        Command::Eval(a) => eval(a),
        Command::Patchify(a) => patch(a),
        Command::Synth(a) => synth(a),
        Command::Ablate(a) => ablation(a),
    }
}
