//! Factorized feature aggregation.
//!
//! Every descriptor type is a binary row-selection product `F = 1(R · M) · T`
//! where `R` is the adjacency reach, `M` the cell masks and `T` a per-cell
//! feature matrix. The methods differ only in `T` and in the normalization
//! applied to `F`:
//!
//! - VLAD: `T` holds each cell's residual to its hard-assigned center,
//!   placed in that center's block of a `C·D` row; blocks are L2-normalized
//!   individually, then the whole vector.
//! - SAP / GAP: `T` is the raw feature; rows are divided by the cell count.
//! - GeM: `T` is the elementwise `p`-th power; the mean is raised to `1/p`.
//!
//! Sums run in `f64` in ascending cell order, so results do not depend on
//! how work is scheduled.

use std::fmt;
use std::path::Path;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{read_tensor, write_tensor, TensorFile};
use crate::matrix::{l2_normalize_f64, Matrix, SparseBinaryMatrix};
use crate::vocab::{assign_hard, Vocabulary};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum AggregationMethod {
    Segvlad,
    Sap,
    Gap,
    Gem(f64),
    GlobalVlad,
}

impl fmt::Display for AggregationMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            AggregationMethod::Segvlad => write!(f, "segvlad"),
            AggregationMethod::Sap => write!(f, "sap"),
            AggregationMethod::Gap => write!(f, "gap"),
            AggregationMethod::Gem(p) => write!(f, "gem{p}"),
            AggregationMethod::GlobalVlad => write!(f, "global_vlad"),
        }
    }
}

impl std::str::FromStr for AggregationMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "segvlad" => Ok(AggregationMethod::Segvlad),
            "sap" => Ok(AggregationMethod::Sap),
            "gap" => Ok(AggregationMethod::Gap),
            "global_vlad" | "globalvlad" => Ok(AggregationMethod::GlobalVlad),
            _ => match s.strip_prefix("gem") {
                Some("") => Ok(AggregationMethod::Gem(3.0)),
                Some(p) => p
                    .trim_start_matches(['=', ':'])
                    .parse()
                    .map(AggregationMethod::Gem)
                    .map_err(|_| Error::InvalidArgument(format!("bad GeM exponent in {s:?}"))),
                None => Err(Error::InvalidArgument(format!("unknown aggregation method {s:?}"))),
            },
        }
    }
}

impl AggregationMethod {
    /// Whether the method describes the whole image with one vector.
    pub fn is_global(&self) -> bool {
        matches!(self, AggregationMethod::Gap | AggregationMethod::GlobalVlad)
    }

    pub fn needs_vocabulary(&self) -> bool {
        matches!(self, AggregationMethod::Segvlad | AggregationMethod::GlobalVlad)
    }
}

/// Per-cell hard assignment and residual `f_p - c_{α_p}`; the per-cluster
/// residual matrices `T^k` are the rows with `assignment == k`.
#[derive(Debug, Clone)]
pub struct ResidualBlocks {
    pub assignment: Vec<u32>,
    pub residuals: Matrix,
    pub counts: Vec<usize>,
}

impl ResidualBlocks {
    pub fn new(features: &Matrix, vocab: &Vocabulary) -> Result<Self> {
        let assignment = assign_hard(features, vocab)?;
        let mut residuals = Matrix::zeros(features.rows(), features.cols());
        let mut counts = vec![0; vocab.num_clusters()];
        for (p, &k) in assignment.iter().enumerate() {
            counts[k as usize] += 1;
            let c = vocab.center(k as usize);
            for ((r, &f), &c) in residuals.row_mut(p).iter_mut().zip(features.row(p)).zip(c) {
                *r = f - c;
            }
        }
        Ok(ResidualBlocks {
            assignment,
            residuals,
            counts,
        })
    }

    pub fn num_clusters(&self) -> usize {
        self.counts.len()
    }

    /// `T^k` as a full `N x D` matrix with zero rows for non-members.
    pub fn block(&self, k: usize) -> Matrix {
        let mut t = Matrix::zeros(self.residuals.rows(), self.residuals.cols());
        for (p, &a) in self.assignment.iter().enumerate() {
            if a as usize == k {
                t.row_mut(p).copy_from_slice(self.residuals.row(p));
            }
        }
        t
    }

    /// Cluster membership as a `C x N` binary matrix.
    pub fn membership(&self) -> SparseBinaryMatrix {
        let mut rows = vec![Vec::new(); self.num_clusters()];
        for (p, &k) in self.assignment.iter().enumerate() {
            rows[k as usize].push(p as u32);
        }
        SparseBinaryMatrix::from_rows(self.assignment.len(), rows).expect("cells in range")
    }
}

/// Sums `width`-wide contributions of the selected cells for every row,
/// in ascending cell order.
fn accumulate(
    rows: &SparseBinaryMatrix,
    width: usize,
    mut add: impl FnMut(usize, &mut [f64]),
) -> Vec<Vec<f64>> {
    rows.rows()
        .iter()
        .map(|cells| {
            let mut acc = vec![0.0f64; width];
            for &p in cells {
                add(p as usize, &mut acc);
            }
            acc
        })
        .collect()
}

fn to_matrix(rows: Vec<Vec<f64>>, width: usize) -> Matrix {
    let n = rows.len();
    let data = rows.into_iter().flatten().map(|v| v as f32).collect();
    Matrix::from_vec(n, width, data).expect("consistent widths")
}

fn check_cells(masks: &SparseBinaryMatrix, features: &Matrix) -> Result<()> {
    if masks.ncols() != features.rows() {
        return Err(Error::DimMismatch(format!(
            "masks span {} cells but there are {} feature rows",
            masks.ncols(),
            features.rows()
        )));
    }
    Ok(())
}

/// `F = 1(reach · M) · T` without normalization.
pub fn aggregate_factorized(
    reach: &SparseBinaryMatrix,
    masks: &SparseBinaryMatrix,
    t: &Matrix,
) -> Result<Matrix> {
    if reach.nrows() != reach.ncols() {
        return Err(Error::DimMismatch(format!(
            "reach matrix must be square, got {}x{}",
            reach.nrows(),
            reach.ncols()
        )));
    }
    check_cells(masks, t)?;
    let supersegments = reach.binary_product(masks)?;
    let d = t.cols();
    let sums = accumulate(&supersegments, d, |p, acc| {
        for (a, &v) in acc.iter_mut().zip(t.row(p)) {
            *a += f64::from(v);
        }
    });
    Ok(to_matrix(sums, d))
}

/// Intra-normalizes each `dim`-wide block, then the whole vector.
fn normalize_vlad(v: &mut [f64], dim: usize) {
    for block in v.chunks_exact_mut(dim) {
        l2_normalize_f64(block);
    }
    l2_normalize_f64(v);
}

fn warn_empty(masks: &SparseBinaryMatrix) {
    for (s, r) in masks.rows().iter().enumerate() {
        if r.is_empty() {
            log::warn!("SuperSegment {s} has no cells; emitting a zero descriptor");
        }
    }
}

/// VLAD descriptors of dim `C·D` for every SuperSegment row.
pub fn vlad_descriptors(
    supersegments: &SparseBinaryMatrix,
    features: &Matrix,
    vocab: &Vocabulary,
) -> Result<Matrix> {
    check_cells(supersegments, features)?;
    let blocks = ResidualBlocks::new(features, vocab)?;
    vlad_from_residuals(supersegments, &blocks)
}

pub fn vlad_from_residuals(
    supersegments: &SparseBinaryMatrix,
    blocks: &ResidualBlocks,
) -> Result<Matrix> {
    check_cells(supersegments, &blocks.residuals)?;
    warn_empty(supersegments);
    let d = blocks.residuals.cols();
    let width = blocks.num_clusters() * d;
    let mut sums = accumulate(supersegments, width, |p, acc| {
        let k = blocks.assignment[p] as usize;
        for (a, &r) in acc[k * d..(k + 1) * d].iter_mut().zip(blocks.residuals.row(p)) {
            *a += f64::from(r);
        }
    });
    for v in sums.iter_mut() {
        normalize_vlad(v, d);
    }
    Ok(to_matrix(sums, width))
}

/// Whole-image VLAD computed for all clusters at once by using cluster
/// membership as the mask matrix: row `k` of `M' · T` is block `k`.
pub fn global_vlad_single_shot(features: &Matrix, vocab: &Vocabulary) -> Result<Vec<f32>> {
    if features.rows() == 0 {
        return Err(Error::InvalidArgument("empty feature map".into()));
    }
    let blocks = ResidualBlocks::new(features, vocab)?;
    let d = features.cols();
    let mut v: Vec<f64> = accumulate(&blocks.membership(), d, |p, acc| {
        for (a, &r) in acc.iter_mut().zip(blocks.residuals.row(p)) {
            *a += f64::from(r);
        }
    })
    .into_iter()
    .flatten()
    .collect();
    normalize_vlad(&mut v, d);
    Ok(v.into_iter().map(|x| x as f32).collect())
}

/// Segment average pooling: per-row mean of features, L2-normalized.
pub fn sap_descriptors(supersegments: &SparseBinaryMatrix, features: &Matrix) -> Result<Matrix> {
    check_cells(supersegments, features)?;
    warn_empty(supersegments);
    let d = features.cols();
    let mut sums = accumulate(supersegments, d, |p, acc| {
        for (a, &v) in acc.iter_mut().zip(features.row(p)) {
            *a += f64::from(v);
        }
    });
    for (v, cells) in sums.iter_mut().zip(supersegments.rows()) {
        if !cells.is_empty() {
            let n = cells.len() as f64;
            v.iter_mut().for_each(|x| *x /= n);
        }
        l2_normalize_f64(v);
    }
    Ok(to_matrix(sums, d))
}

/// Global average pooling: SAP over a single all-ones mask.
pub fn gap_descriptor(features: &Matrix) -> Vec<f32> {
    let all = SparseBinaryMatrix::all_ones_row(features.rows());
    sap_descriptors(&all, features)
        .expect("all-ones mask matches the feature rows")
        .into_vec()
}

/// Generalized mean pooling with exponent `p >= 1`. Negative features are
/// only allowed for integer `p`; odd roots of negative means keep their sign.
pub fn gem_descriptors(
    supersegments: &SparseBinaryMatrix,
    features: &Matrix,
    p: f64,
) -> Result<Matrix> {
    if !(p.is_finite() && p >= 1.0) {
        return Err(Error::InvalidArgument(format!("GeM exponent must be >= 1, got {p}")));
    }
    check_cells(supersegments, features)?;
    let integer = p.fract() == 0.0;
    if !integer && features.as_slice().iter().any(|&v| v < 0.0) {
        return Err(Error::InvalidArgument(format!(
            "GeM with fractional p = {p} needs non-negative features"
        )));
    }
    warn_empty(supersegments);
    let d = features.cols();
    let pow = |x: f64| if integer { x.powi(p as i32) } else { x.powf(p) };
    let mut sums = accumulate(supersegments, d, |cell, acc| {
        for (a, &v) in acc.iter_mut().zip(features.row(cell)) {
            *a += pow(f64::from(v));
        }
    });
    for (v, cells) in sums.iter_mut().zip(supersegments.rows()) {
        if !cells.is_empty() {
            let n = cells.len() as f64;
            for x in v.iter_mut() {
                let m = *x / n;
                *x = if p == 1.0 {
                    m
                } else if m < 0.0 {
                    -(-m).powf(1.0 / p)
                } else {
                    m.powf(1.0 / p)
                };
            }
        }
        l2_normalize_f64(v);
    }
    Ok(to_matrix(sums, d))
}

/// Where a descriptor came from.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Provenance {
    pub image_id: String,
    pub segment_id: u32,
    pub order: u32,
    pub method: AggregationMethod,
}

/// Descriptor rows with one provenance record per row.
#[derive(Debug, Clone, PartialEq)]
pub struct DescriptorSet {
    pub descriptors: Matrix,
    pub provenance: Vec<Provenance>,
}

impl DescriptorSet {
    pub fn new(descriptors: Matrix, provenance: Vec<Provenance>) -> Result<Self> {
        if descriptors.rows() != provenance.len() {
            return Err(Error::DimMismatch(format!(
                "{} descriptors but {} provenance records",
                descriptors.rows(),
                provenance.len()
            )));
        }
        Ok(DescriptorSet {
            descriptors,
            provenance,
        })
    }

    pub fn empty(dim: usize) -> Self {
        DescriptorSet {
            descriptors: Matrix::zeros(0, dim),
            provenance: Vec::new(),
        }
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.descriptors.cols()
    }

    pub fn concat(sets: &[DescriptorSet]) -> Result<DescriptorSet> {
        let mats: Vec<&Matrix> = sets.iter().map(|s| &s.descriptors).collect();
        let descriptors = Matrix::vstack(&mats)?;
        let provenance = sets.iter().flat_map(|s| s.provenance.iter().cloned()).collect();
        DescriptorSet::new(descriptors, provenance)
    }

    /// Rows of images in `image_order`, grouped per image.
    pub fn rows_of(&self, image_id: &str) -> Vec<usize> {
        self.provenance
            .iter()
            .enumerate()
            .filter(|(_, p)| p.image_id == image_id)
            .map(|(i, _)| i)
            .collect()
    }

    pub fn select(&self, rows: &[usize]) -> DescriptorSet {
        DescriptorSet {
            descriptors: self.descriptors.select_rows(rows),
            provenance: rows.iter().map(|&i| self.provenance[i].clone()).collect(),
        }
    }

    /// Writes `<stem>.svt` (rows) and `<stem>.json` (provenance table).
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        write_tensor(stem.with_extension("svt"), &TensorFile::from_matrix(&self.descriptors))?;
        let path = stem.with_extension("json");
        let json = serde_json::to_vec_pretty(&self.provenance)?;
        std::fs::write(&path, json).map_err(|e| Error::io(&path, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let stem = stem.as_ref();
        let descriptors = read_tensor(stem.with_extension("svt"))?.to_matrix()?;
        let path = stem.with_extension("json");
        let bytes = std::fs::read(&path).map_err(|e| Error::io(&path, e))?;
        DescriptorSet::new(descriptors, serde_json::from_slice(&bytes)?)
    }
}
