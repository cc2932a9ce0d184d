//! PCA projection of descriptors.

use std::path::Path;

use nalgebra::{DMatrix, DVector, SymmetricEigen};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor, TensorFile};
use crate::matrix::{l2_normalize_f64, Matrix};

pub const DEFAULT_PCA_DIM: usize = 1024;

/// Above this input dimension the covariance is never formed.
pub const DENSE_EIGEN_LIMIT: usize = 4096;

const ITERATIVE_SEED: u64 = 0x5eed;
const ITERATIVE_TOL: f64 = 1e-6;
const ITERATIVE_MAX_ITERS: usize = 1000;
const RANK_TOL: f64 = 1e-9;

#[derive(Debug, Clone, PartialEq)]
pub struct PcaModel {
    pub mean: Vec<f32>,
    /// `d x D`, orthonormal rows by descending explained variance.
    pub components: Matrix,
    pub explained_variance: Vec<f64>,
    pub whiten: bool,
}

#[derive(Debug, Serialize, Deserialize)]
struct PcaMeta {
    d: usize,
    input_dim: usize,
    whiten: bool,
    explained_variance: Vec<f64>,
}

impl PcaModel {
    pub fn dim(&self) -> usize {
        self.components.rows()
    }

    pub fn input_dim(&self) -> usize {
        self.mean.len()
    }

    /// Writes `<stem>.mean.svt`, `<stem>.components.svt` and `<stem>.json`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        let mean = Matrix::from_vec(1, self.mean.len(), self.mean.clone())?;
        write_tensor(stem.with_extension("mean.svt"), &TensorFile::from_matrix(&mean))?;
        write_tensor(
            stem.with_extension("components.svt"),
            &TensorFile::from_matrix(&self.components),
        )?;
        let meta = PcaMeta {
            d: self.dim(),
            input_dim: self.input_dim(),
            whiten: self.whiten,
            explained_variance: self.explained_variance.clone(),
        };
        let path = stem.with_extension("json");
        std::fs::write(&path, serde_json::to_vec_pretty(&meta)?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let path = stem.with_extension("json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        let meta: PcaMeta = serde_json::from_slice(&bytes)?;
        let mean = read_tensor(stem.with_extension("mean.svt"))?.to_matrix()?.into_vec();
        let components = read_tensor(stem.with_extension("components.svt"))?.to_matrix()?;
        if components.rows() != meta.d
            || components.cols() != meta.input_dim
            || mean.len() != meta.input_dim
            || meta.explained_variance.len() != meta.d
        {
            return Err(Error::Malformed(format!(
                "PCA files at {} disagree on dimensions",
                stem.display()
            )));
        }
        Ok(PcaModel {
            mean,
            components,
            explained_variance: meta.explained_variance,
            whiten: meta.whiten,
        })
    }
}

fn centered(x: &Matrix) -> (Vec<f64>, DMatrix<f64>) {
    let (m, n) = (x.rows(), x.cols());
    let mut mean = vec![0.0f64; n];
    for row in x.iter_rows() {
        for (a, &v) in mean.iter_mut().zip(row) {
            *a += f64::from(v);
        }
    }
    mean.iter_mut().for_each(|a| *a /= m as f64);
    let xc = DMatrix::from_fn(m, n, |i, j| f64::from(x.row(i)[j]) - mean[j]);
    (mean, xc)
}

/// Flips `v` so its largest-magnitude entry (first on ties) is positive.
fn fix_sign(v: &mut [f64]) {
    let mut best = 0;
    for (i, x) in v.iter().enumerate() {
        if x.abs() > v[best].abs() {
            best = i;
        }
    }
    if v[best] < 0.0 {
        v.iter_mut().for_each(|x| *x = -*x);
    }
}

/// Eigenpairs sorted by descending eigenvalue, ties by original index.
fn sorted_eigen(eig: SymmetricEigen<f64, nalgebra::Dyn>) -> Vec<(f64, Vec<f64>)> {
    let mut idx: Vec<usize> = (0..eig.eigenvalues.len()).collect();
    idx.sort_by(|&a, &b| eig.eigenvalues[b].total_cmp(&eig.eigenvalues[a]).then(a.cmp(&b)));
    idx.into_iter()
        .map(|i| (eig.eigenvalues[i], eig.eigenvectors.column(i).iter().copied().collect()))
        .collect()
}

fn dense_eigen(xc: &DMatrix<f64>, denom: f64) -> Vec<(f64, Vec<f64>)> {
    let cov = (xc.transpose() * xc) / denom;
    sorted_eigen(SymmetricEigen::new(cov))
}

/// Top-`k` eigenpairs of `xcᵀxc / denom` by orthogonal iteration with a
/// Rayleigh-Ritz rotation; stops once every Ritz residual
/// `|C v - λ v|` is below the tolerance relative to the top eigenvalue.
fn iterative_eigen(xc: &DMatrix<f64>, denom: f64, k: usize) -> Vec<(f64, Vec<f64>)> {
    let n = xc.ncols();
    let width = (k + 8).min(n);
    let mut rng = ChaCha8Rng::seed_from_u64(ITERATIVE_SEED);
    let q0 = DMatrix::from_fn(n, width, |_, _| StandardNormal.sample(&mut rng));
    let mut q = q0.qr().q();
    let mut out = Vec::new();
    for it in 0..ITERATIVE_MAX_ITERS {
        let z = xc.transpose() * (xc * &q) / denom;
        let ritz = sorted_eigen(SymmetricEigen::new(q.transpose() * &z));
        let scale = ritz.first().map_or(0.0, |r| r.0.abs()).max(f64::MIN_POSITIVE);
        let mut converged = true;
        out.clear();
        for (val, w) in ritz.into_iter().take(k) {
            let w = DVector::from_vec(w);
            let v = &q * &w;
            let residual = (&z * &w - &v * val).norm();
            converged &= residual <= ITERATIVE_TOL * scale;
            out.push((val, v.iter().copied().collect()));
        }
        if converged {
            log::debug!("subspace iteration converged after {it} steps");
            return out;
        }
        q = z.qr().q();
    }
    log::warn!("subspace iteration hit {ITERATIVE_MAX_ITERS} steps without converging");
    out
}

/// Fits `d` principal directions of the row descriptors.
pub fn pca_fit(descriptors: &Matrix, d: usize, whiten: bool) -> Result<PcaModel> {
    let (m, n) = (descriptors.rows(), descriptors.cols());
    if d == 0 || d > n {
        return Err(Error::InvalidArgument(format!(
            "PCA target dimension {d} must be in 1..={n}"
        )));
    }
    if m < d {
        return Err(Error::InvalidArgument(format!(
            "PCA to {d} dims needs at least {d} descriptors, got {m}"
        )));
    }
    if descriptors.as_slice().iter().any(|v| !v.is_finite()) {
        return Err(Error::NonFinite);
    }
    let (mean, xc) = centered(descriptors);
    let denom = if m > 1 { (m - 1) as f64 } else { 1.0 };
    let pairs = if n <= DENSE_EIGEN_LIMIT {
        dense_eigen(&xc, denom)
    } else {
        iterative_eigen(&xc, denom, d)
    };
    let top = pairs.first().map_or(0.0, |p| p.0);
    let tol = RANK_TOL * top.max(0.0);
    let rank = pairs.iter().filter(|p| top > 0.0 && p.0 > tol).count();
    if rank < d {
        return Err(Error::RankDeficient { rank, requested: d });
    }
    let mut components = Matrix::zeros(d, n);
    let mut explained_variance = Vec::with_capacity(d);
    for (i, (val, mut v)) in pairs.into_iter().take(d).enumerate() {
        let norm = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        v.iter_mut().for_each(|x| *x /= norm);
        fix_sign(&mut v);
        for (c, x) in components.row_mut(i).iter_mut().zip(v) {
            *c = x as f32;
        }
        explained_variance.push(val);
    }
    Ok(PcaModel {
        mean: mean.into_iter().map(|v| v as f32).collect(),
        components,
        explained_variance,
        whiten,
    })
}

/// Projection before normalization, in `f64`.
pub fn pca_project(model: &PcaModel, x: &[f32]) -> Result<Vec<f64>> {
    if x.len() != model.input_dim() {
        return Err(Error::DimMismatch(format!(
            "descriptor has {} dims, PCA expects {}",
            x.len(),
            model.input_dim()
        )));
    }
    let centered: Vec<f64> = x
        .iter()
        .zip(&model.mean)
        .map(|(&a, &m)| f64::from(a) - f64::from(m))
        .collect();
    Ok(model
        .components
        .iter_rows()
        .zip(&model.explained_variance)
        .map(|(c, &var)| {
            let y: f64 = c.iter().zip(&centered).map(|(&c, &x)| f64::from(c) * x).sum();
            if model.whiten {
                y / var.sqrt()
            } else {
                y
            }
        })
        .collect())
}

/// Projects, optionally whitens and L2-normalizes one descriptor.
pub fn pca_transform(model: &PcaModel, x: &[f32]) -> Result<Vec<f32>> {
    let mut y = pca_project(model, x)?;
    l2_normalize_f64(&mut y);
    Ok(y.into_iter().map(|v| v as f32).collect())
}

/// Transforms every row. All-zero rows (empty SuperSegments) stay zero so
/// they remain excluded from the index.
pub fn pca_transform_rows(model: &PcaModel, x: &Matrix) -> Result<Matrix> {
    use rayon::prelude::*;
    let rows: Vec<Vec<f32>> = (0..x.rows())
        .into_par_iter()
        .map(|i| {
            let r = x.row(i);
            if r.iter().all(|&v| v == 0.0) {
                Ok(vec![0.0; model.dim()])
            } else {
                pca_transform(model, r)
            }
        })
        .collect::<Result<_>>()?;
    let data = rows.into_iter().flatten().collect();
    Matrix::from_vec(x.rows(), model.dim(), data)
}
