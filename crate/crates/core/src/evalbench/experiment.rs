//! End-to-end runs: vocabulary, description, optional PCA and culling,
//! indexing, querying and recall.

use std::collections::HashSet;

use rand::seq::index::sample;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use super::{recall_at_k, ConfigSnapshot, GroundTruth, RecallReport};
use crate::aggregate::{AggregationMethod, DescriptorSet, Provenance};
use crate::error::Result;
use crate::filtering::{cull_by_iou, CullReport};
use crate::io::{read_features, DatasetManifest, Split};
use crate::matrix::{l2_normalize_f64, Matrix};
use crate::pipeline::{
    apply_pca, describe_split, fit_pca, run_queries, to_descriptor_set, DescribeConfig, DescribedImage,
    DEFAULT_K_PRIME, DEFAULT_ORDER,
};
use crate::retrieval::{build_index, FlatIndex, RankingMethod};
use crate::vocab::{kmeans_fit, sample_for_vocab, KMeansConfig, VocabSource, Vocabulary};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct RunConfig {
    pub order: u32,
    pub method: AggregationMethod,
    pub patch_size: Option<u32>,
    pub clusters: usize,
    pub vocab_source: VocabSource,
    pub vocab_samples_per_image: usize,
    pub seed: u64,
    pub pca_dim: Option<usize>,
    pub whiten: bool,
    pub iou_threshold: Option<f64>,
    pub k_prime: usize,
    pub ks: Vec<usize>,
    pub ranking: RankingMethod,
}

impl Default for RunConfig {
    fn default() -> Self {
        RunConfig {
            order: DEFAULT_ORDER,
            method: AggregationMethod::Segvlad,
            patch_size: None,
            clusters: 32,
            vocab_source: VocabSource::Map,
            vocab_samples_per_image: 256,
            seed: 0,
            pca_dim: None,
            whiten: false,
            iou_threshold: None,
            k_prime: DEFAULT_K_PRIME,
            ks: vec![1, 5],
            ranking: RankingMethod::Weighted,
        }
    }
}

impl RunConfig {
    pub fn describe(&self) -> DescribeConfig {
        DescribeConfig {
            order: self.order,
            method: self.method,
            patch_size: self.patch_size,
        }
    }

    pub fn snapshot(&self) -> ConfigSnapshot {
        ConfigSnapshot {
            order: Some(self.order),
            method: Some(match self.patch_size {
                Some(p) => format!("{}+patch{p}", self.method),
                None => self.method.to_string(),
            }),
            clusters: self.method.needs_vocabulary().then_some(self.clusters),
            pca_dim: self.pca_dim,
            iou_threshold: self.iou_threshold,
            k_prime: Some(self.k_prime),
            ranking: Some(self.ranking.to_string()),
        }
    }
}

/// Samples feature cells from `sample_from` (the evaluated manifest for a
/// map vocabulary, a separate manifest for a domain one) and clusters them.
pub fn build_vocabulary(
    sample_from: &DatasetManifest,
    source: VocabSource,
    clusters: usize,
    per_image: usize,
    seed: u64,
) -> Result<Vocabulary> {
    let sample = sample_for_vocab(sample_from, source, per_image, seed)?;
    Ok(kmeans_fit(&sample, &KMeansConfig::new(clusters, seed), source)?.vocabulary)
}

#[derive(Debug, Clone)]
pub struct ExperimentOutput {
    pub report: RecallReport,
    pub index: FlatIndex,
    pub queries: DescriptorSet,
    pub query_ids: Vec<String>,
    pub cull: Option<CullReport>,
}

fn cull_database(images: &mut [DescribedImage], psi: f64) -> Result<CullReport> {
    let input: Vec<_> = images
        .iter()
        .map(|img| {
            let d = &img.description;
            (img.image_id.clone(), d.segment_ids.clone(), d.supersegments.clone())
        })
        .collect();
    let report = cull_by_iou(&input, psi)?;
    for (img, cull) in images.iter_mut().zip(&report.images) {
        let keep: HashSet<u32> = cull.kept_ids.iter().copied().collect();
        let d = &mut img.description;
        let rows: Vec<usize> = (0..d.segment_ids.len())
            .filter(|&i| keep.contains(&d.segment_ids[i]))
            .collect();
        d.descriptors = d.descriptors.select_rows(&rows);
        d.supersegments = d.supersegments.select_rows(&rows);
        d.segment_ids = rows.iter().map(|&i| d.segment_ids[i]).collect();
    }
    Ok(report)
}

/// Runs the whole pipeline. When the method needs a vocabulary and none is
/// given, a map vocabulary is built from the references.
pub fn run_experiment(
    manifest: &DatasetManifest,
    gt: &GroundTruth,
    cfg: &RunConfig,
    vocab: Option<&Vocabulary>,
) -> Result<ExperimentOutput> {
    let built;
    let vocab = match vocab {
        Some(v) => Some(v),
        None if cfg.method.needs_vocabulary() => {
            built = build_vocabulary(
                manifest,
                VocabSource::Map,
                cfg.clusters,
                cfg.vocab_samples_per_image,
                cfg.seed,
            )?;
            Some(&built)
        }
        None => None,
    };
    let dcfg = cfg.describe();
    let mut db = describe_split(manifest, Split::Reference, &dcfg, vocab)?;
    let cull = match cfg.iou_threshold {
        Some(psi) => Some(cull_database(&mut db, psi)?),
        None => None,
    };
    let mut db_set = to_descriptor_set(&db, &dcfg)?;
    let mut q_set = to_descriptor_set(&describe_split(manifest, Split::Query, &dcfg, vocab)?, &dcfg)?;
    if let Some(d) = cfg.pca_dim {
        let model = fit_pca(&db_set, d, cfg.whiten)?;
        db_set = apply_pca(&db_set, &model)?;
        q_set = apply_pca(&q_set, &model)?;
    }
    let index = build_index(&[db_set])?;
    let query_ids: Vec<String> = manifest
        .entries(Split::Query)
        .iter()
        .map(|e| e.image_id.clone())
        .collect();
    let results = run_queries(&index, &q_set, &query_ids, cfg.k_prime, cfg.ranking)?;
    let report = recall_at_k(&results, gt, &cfg.ks, cfg.snapshot())?;
    Ok(ExperimentOutput {
        report,
        index,
        queries: q_set,
        query_ids,
        cull,
    })
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AblationRow {
    pub order: u32,
    pub method: AggregationMethod,
    pub report: RecallReport,
}

/// Order x method grid sharing one vocabulary.
pub fn ablate(
    manifest: &DatasetManifest,
    gt: &GroundTruth,
    base: &RunConfig,
    orders: &[u32],
    methods: &[AggregationMethod],
    vocab: Option<&Vocabulary>,
) -> Result<Vec<AblationRow>> {
    let built;
    let vocab = match vocab {
        Some(v) => Some(v),
        None if methods.iter().any(AggregationMethod::needs_vocabulary) => {
            built = build_vocabulary(
                manifest,
                base.vocab_source,
                base.clusters,
                base.vocab_samples_per_image,
                base.seed,
            )?;
            Some(&built)
        }
        None => None,
    };
    let mut rows = Vec::new();
    for &method in methods {
        for &order in orders {
            let cfg = RunConfig {
                order,
                method,
                ..base.clone()
            };
            let out = run_experiment(manifest, gt, &cfg, vocab)?;
            rows.push(AblationRow {
                order,
                method,
                report: out.report,
            });
        }
    }
    Ok(rows)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct LocalBaselineConfig {
    /// Cells sampled per image; `None` keeps every cell.
    pub per_image_samples: Option<usize>,
    pub seed: u64,
    pub k_prime: usize,
    pub ks: Vec<usize>,
    pub ranking: RankingMethod,
}

impl Default for LocalBaselineConfig {
    fn default() -> Self {
        LocalBaselineConfig {
            per_image_samples: None,
            seed: 0,
            k_prime: DEFAULT_K_PRIME,
            ks: vec![1, 5],
            ranking: RankingMethod::Weighted,
        }
    }
}

fn local_descriptors(
    manifest: &DatasetManifest,
    split: Split,
    per_image: Option<usize>,
    rng: &mut ChaCha8Rng,
) -> Result<DescriptorSet> {
    let entries = manifest.entries(split);
    let maps = entries
        .par_iter()
        .map(|e| read_features(manifest.resolve(&e.feature_path)))
        .collect::<Result<Vec<_>>>()?;
    let mut sets = Vec::with_capacity(entries.len());
    for (e, fm) in entries.iter().zip(maps) {
        let n = fm.num_cells();
        let mut idx: Vec<usize> = match per_image {
            Some(k) if k < n => sample(rng, n, k).into_vec(),
            _ => (0..n).collect(),
        };
        idx.sort_unstable();
        let mut data = Vec::with_capacity(idx.len() * fm.dim());
        for &i in &idx {
            let mut v: Vec<f64> = fm.cells.row(i).iter().map(|&x| f64::from(x)).collect();
            l2_normalize_f64(&mut v);
            data.extend(v.into_iter().map(|x| x as f32));
        }
        let provenance = idx
            .iter()
            .map(|&i| Provenance {
                image_id: e.image_id.clone(),
                segment_id: i as u32,
                order: 0,
                method: AggregationMethod::Sap,
            })
            .collect();
        sets.push(DescriptorSet::new(
            Matrix::from_vec(idx.len(), fm.dim(), data)?,
            provenance,
        )?);
    }
    if sets.is_empty() {
        return Ok(DescriptorSet::empty(0));
    }
    DescriptorSet::concat(&sets)
}

/// Raw L2-normalized feature cells used as segment descriptors.
pub fn local_feature_baseline(
    manifest: &DatasetManifest,
    gt: &GroundTruth,
    cfg: &LocalBaselineConfig,
) -> Result<RecallReport> {
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let db = local_descriptors(manifest, Split::Reference, cfg.per_image_samples, &mut rng)?;
    let q = local_descriptors(manifest, Split::Query, cfg.per_image_samples, &mut rng)?;
    let index = build_index(&[db])?;
    let query_ids: Vec<String> = manifest
        .entries(Split::Query)
        .iter()
        .map(|e| e.image_id.clone())
        .collect();
    let results = run_queries(&index, &q, &query_ids, cfg.k_prime, cfg.ranking)?;
    let snapshot = ConfigSnapshot {
        order: None,
        method: Some("local".into()),
        clusters: None,
        pca_dim: None,
        iou_threshold: None,
        k_prime: Some(cfg.k_prime),
        ranking: Some(cfg.ranking.to_string()),
    };
    recall_at_k(&results, gt, &cfg.ks, snapshot)
}
