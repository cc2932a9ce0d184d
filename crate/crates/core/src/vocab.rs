//! VLAD vocabulary: k-means++ seeded Lloyd clustering and hard assignment.

use std::path::Path;

use rand::seq::index::sample;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_features, read_tensor, write_tensor, DatasetManifest, Split, TensorFile};
use crate::matrix::Matrix;

/// Where the clustering sample came from.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum VocabSource {
    /// Reference (database) images of the evaluated map.
    Map,
    /// Images from the same domain, supplied by a separate manifest.
    Domain,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Vocabulary {
    centers: Matrix,
    pub source: VocabSource,
    pub seed: u64,
}

#[derive(Debug, Serialize, Deserialize)]
struct VocabMeta {
    source: VocabSource,
    seed: u64,
    clusters: usize,
    dim: usize,
}

impl Vocabulary {
    pub fn new(centers: Matrix, source: VocabSource, seed: u64) -> Result<Self> {
        if centers.rows() == 0 || centers.cols() == 0 {
            return Err(Error::InvalidArgument(
                "vocabulary needs at least one center of positive dimension".into(),
            ));
        }
        if centers.as_slice().iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFinite);
        }
        for i in 0..centers.rows() {
            for j in i + 1..centers.rows() {
                if centers.row(i) == centers.row(j) {
                    return Err(Error::InvalidArgument(format!(
                        "centers {i} and {j} are identical"
                    )));
                }
            }
        }
        Ok(Vocabulary {
            centers,
            source,
            seed,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.centers.rows()
    }

    pub fn dim(&self) -> usize {
        self.centers.cols()
    }

    pub fn centers(&self) -> &Matrix {
        &self.centers
    }

    pub fn center(&self, k: usize) -> &[f32] {
        self.centers.row(k)
    }

    /// Writes `<stem>.svt` (centers) and `<stem>.json` (metadata).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        write_tensor(stem.with_extension("svt"), &TensorFile::from_matrix(&self.centers))?;
        let meta = VocabMeta {
            source: self.source,
            seed: self.seed,
            clusters: self.num_clusters(),
            dim: self.dim(),
        };
        let json = serde_json::to_vec_pretty(&meta)?;
        let path = stem.with_extension("json");
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let centers = read_tensor(stem.with_extension("svt"))?.to_matrix()?;
        let path = stem.with_extension("json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: VocabMeta = serde_json::from_slice(&bytes)?;
        if meta.clusters != centers.rows() || meta.dim != centers.cols() {
            return Err(Error::DimMismatch(format!(
                "vocabulary metadata says {}x{}, centers are {}x{}",
                meta.clusters,
                meta.dim,
                centers.rows(),
                centers.cols()
            )));
        }
        Vocabulary::new(centers, meta.source, meta.seed)
    }
}

#[derive(Debug, Clone)]
pub struct KMeansConfig {
    pub clusters: usize,
    pub seed: u64,
    pub max_iters: usize,
    /// Stop once the total center shift, relative to the total center norm,
    /// falls below this.
    pub tol: f64,
}

impl KMeansConfig {
    pub fn new(clusters: usize, seed: u64) -> Self {
        KMeansConfig {
            clusters,
            seed,
            max_iters: 100,
            tol: 1e-4,
        }
    }
}

#[derive(Debug, Clone)]
pub struct KMeansFit {
    pub vocabulary: Vocabulary,
    /// Within-cluster sum of squares after each assignment step.
    pub inertia_history: Vec<f64>,
    pub iterations: usize,
}

fn sq_dist(a: &[f32], c: &[f64]) -> f64 {
    a.iter()
        .zip(c)
        .map(|(&x, &y)| {
            let d = f64::from(x) - y;
            d * d
        })
        .sum()
}

fn nearest(point: &[f32], centers: &[f64], dim: usize) -> (u32, f64) {
    let mut best = (0u32, f64::INFINITY);
    for (k, c) in centers.chunks_exact(dim).enumerate() {
        let d = sq_dist(point, c);
        if d < best.1 {
            best = (k as u32, d);
        }
    }
    best
}

fn kmeans_pp(points: &Matrix, clusters: usize, rng: &mut ChaCha8Rng) -> Result<Vec<f64>> {
    let dim = points.cols();
    let n = points.rows();
    let to_f64 = |i: usize| points.row(i).iter().map(|&v| f64::from(v)).collect::<Vec<_>>();
    let mut centers = to_f64(rng.random_range(0..n));
    let mut dists: Vec<f64> = (0..n).map(|i| sq_dist(points.row(i), &centers)).collect();
    for _ in 1..clusters {
        let total: f64 = dists.iter().sum();
        if total <= 0.0 {
            return Err(Error::InvalidArgument(format!(
                "fewer than {clusters} distinct points"
            )));
        }
        let target = rng.random::<f64>() * total;
        let mut acc = 0.0;
        let mut pick = None;
        for (i, &d) in dists.iter().enumerate() {
            acc += d;
            if d > 0.0 && acc > target {
                pick = Some(i);
                break;
            }
        }
        let pick = pick.unwrap_or_else(|| dists.iter().rposition(|&d| d > 0.0).unwrap());
        let c = to_f64(pick);
        for (i, d) in dists.iter_mut().enumerate() {
            *d = d.min(sq_dist(points.row(i), &c));
        }
        centers.extend(c);
    }
    debug_assert_eq!(centers.len(), clusters * dim);
    Ok(centers)
}

/// Lloyd iterations from a k-means++ start. Deterministic for a fixed input
/// and seed; the assignment step runs in parallel but every reduction is
/// sequential in point order.
pub fn kmeans_fit(features: &Matrix, cfg: &KMeansConfig, source: VocabSource) -> Result<KMeansFit> {
    let (n, dim, k) = (features.rows(), features.cols(), cfg.clusters);
    if k == 0 || dim == 0 {
        return Err(Error::InvalidArgument(
            "need at least one cluster and one dimension".into(),
        ));
    }
    if n < k {
        return Err(Error::TooFewPoints {
            points: n,
            clusters: k,
        });
    }
    if features.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed);
    let mut centers = kmeans_pp(features, k, &mut rng)?;
    let mut history = Vec::new();
    let mut iterations = 0;
    for _ in 0..cfg.max_iters {
        iterations += 1;
        let assign: Vec<(u32, f64)> = (0..n)
            .into_par_iter()
            .map(|i| nearest(features.row(i), &centers, dim))
            .collect();
        history.push(assign.iter().map(|a| a.1).sum());

        let mut sums = vec![0.0f64; k * dim];
        let mut counts = vec![0usize; k];
        for (i, &(c, _)) in assign.iter().enumerate() {
            let c = c as usize;
            counts[c] += 1;
            for (s, &v) in sums[c * dim..(c + 1) * dim].iter_mut().zip(features.row(i)) {
                *s += f64::from(v);
            }
        }
        let mut next = centers.clone();
        let mut dists: Vec<f64> = assign.iter().map(|a| a.1).collect();
        for c in 0..k {
            let block = &mut next[c * dim..(c + 1) * dim];
            if counts[c] > 0 {
                for (dst, s) in block.iter_mut().zip(&sums[c * dim..(c + 1) * dim]) {
                    *dst = s / counts[c] as f64;
                }
            } else {
                // reseed at the point farthest from its current center
                let far = (0..n)
                    .max_by(|&a, &b| dists[a].total_cmp(&dists[b]).then(b.cmp(&a)))
                    .unwrap();
                for (dst, &v) in block.iter_mut().zip(features.row(far)) {
                    *dst = f64::from(v);
                }
                dists[far] = 0.0;
            }
        }
        let shift: f64 = next.iter().zip(&centers).map(|(a, b)| (a - b) * (a - b)).sum();
        let norm: f64 = centers.iter().map(|a| a * a).sum();
        centers = next;
        if shift.sqrt() <= cfg.tol * norm.sqrt().max(f64::MIN_POSITIVE) {
            break;
        }
    }
    let centers = Matrix::from_vec(k, dim, centers.iter().map(|&v| v as f32).collect())?;
    Ok(KMeansFit {
        vocabulary: Vocabulary::new(centers, source, cfg.seed)?,
        inertia_history: history,
        iterations,
    })
}

/// Nearest center per feature row; ties go to the smallest cluster index.
pub fn assign_hard(features: &Matrix, vocab: &Vocabulary) -> Result<Vec<u32>> {
    if features.cols() != vocab.dim() {
        return Err(Error::DimMismatch(format!(
            "features have {} dims, vocabulary {}",
            features.cols(),
            vocab.dim()
        )));
    }
    let centers: Vec<f64> = vocab
        .centers()
        .as_slice()
        .iter()
        .map(|&v| f64::from(v))
        .collect();
    let dim = vocab.dim();
    Ok((0..features.rows())
        .into_par_iter()
        .map(|i| nearest(features.row(i), &centers, dim).0)
        .collect())
}

/// Random feature cells for vocabulary construction: `per_image` cells
/// without replacement from each selected image, in manifest order.
///
/// `Map` samples the reference split only; `Domain` samples every image of
/// the (domain) manifest it is given.
pub fn sample_for_vocab(
    manifest: &DatasetManifest,
    source: VocabSource,
    per_image: usize,
    seed: u64,
) -> Result<Matrix> {
    let entries: Vec<_> = match source {
        VocabSource::Map => manifest.entries(Split::Reference).iter().collect(),
        VocabSource::Domain => manifest
            .reference_entries
            .iter()
            .chain(&manifest.query_entries)
            .collect(),
    };
    if entries.is_empty() {
        return Err(Error::Manifest(format!("no images to sample for a {source:?} vocabulary")));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut parts = Vec::with_capacity(entries.len());
    for e in entries {
        let fm = read_features(manifest.resolve(&e.feature_path))?;
        let n = fm.num_cells();
        let mut idx = sample(&mut rng, n, per_image.min(n)).into_vec();
        idx.sort_unstable();
        parts.push(fm.cells.select_rows(&idx));
    }
    let refs: Vec<&Matrix> = parts.iter().collect();
    Matrix::vstack(&refs)
}
