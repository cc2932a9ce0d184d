//! Dense row-major matrices and sparse binary row sets.
//!
//! Segment masks on the feature grid and adjacency reach sets are both
//! binary, so they are kept as sorted column-index lists per row. Dense
//! data (features, residuals, descriptors) lives in [`Matrix`].

use crate::error::{Error, Result};

/// Row-major `f32` matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct Matrix {
    rows: usize,
    cols: usize,
    data: Vec<f32>,
}

impl Matrix {
    pub fn zeros(rows: usize, cols: usize) -> Self {
        Matrix {
            rows,
            cols,
            data: vec![0.0; rows * cols],
        }
    }

    pub fn from_vec(rows: usize, cols: usize, data: Vec<f32>) -> Result<Self> {
        if data.len() != rows * cols {
            return Err(Error::DimMismatch(format!(
                "{} values for a {rows}x{cols} matrix",
                data.len()
            )));
        }
        Ok(Matrix { rows, cols, data })
    }

    pub fn from_rows<R: AsRef<[f32]>>(rows: &[R]) -> Result<Self> {
        let cols = rows.first().map_or(0, |r| r.as_ref().len());
        let mut data = Vec::with_capacity(rows.len() * cols);
        for (i, r) in rows.iter().enumerate() {
            let r = r.as_ref();
            if r.len() != cols {
                return Err(Error::DimMismatch(format!(
                    "row {i} has {} columns, expected {cols}",
                    r.len()
                )));
            }
            data.extend_from_slice(r);
        }
        Ok(Matrix {
            rows: rows.len(),
            cols,
            data,
        })
    }

    pub fn rows(&self) -> usize {
        self.rows
    }

    pub fn cols(&self) -> usize {
        self.cols
    }

    pub fn as_slice(&self) -> &[f32] {
        &self.data
    }

    pub fn into_vec(self) -> Vec<f32> {
        self.data
    }

    pub fn row(&self, i: usize) -> &[f32] {
        &self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn row_mut(&mut self, i: usize) -> &mut [f32] {
        &mut self.data[i * self.cols..(i + 1) * self.cols]
    }

    pub fn iter_rows(&self) -> impl ExactSizeIterator<Item = &[f32]> + '_ {
        (0..self.rows).map(move |i| self.row(i))
    }

    /// New matrix holding the listed rows in the given order.
    pub fn select_rows(&self, idx: &[usize]) -> Matrix {
        let mut data = Vec::with_capacity(idx.len() * self.cols);
        for &i in idx {
            data.extend_from_slice(self.row(i));
        }
        Matrix {
            rows: idx.len(),
            cols: self.cols,
            data,
        }
    }

    /// Stacks matrices vertically; all must share a column count.
    pub fn vstack(parts: &[&Matrix]) -> Result<Matrix> {
        let cols = parts.first().map_or(0, |m| m.cols);
        let mut data = Vec::new();
        let mut rows = 0;
        for m in parts {
            if m.cols != cols {
                return Err(Error::DimMismatch(format!(
                    "cannot stack {} columns onto {cols}",
                    m.cols
                )));
            }
            data.extend_from_slice(&m.data);
            rows += m.rows;
        }
        Ok(Matrix { rows, cols, data })
    }
}

/// Euclidean norm accumulated in double precision.
pub fn l2_norm(v: &[f32]) -> f64 {
    v.iter().map(|&x| f64::from(x) * f64::from(x)).sum::<f64>().sqrt()
}

/// Normalizes in place; zero vectors are left untouched.
pub fn l2_normalize_f64(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        for x in v.iter_mut() {
            *x /= n;
        }
    }
}

pub fn dot(a: &[f32], b: &[f32]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(&x, &y)| f64::from(x) * f64::from(y))
        .sum()
}

/// Binary matrix stored as one sorted, duplicate-free list of column
/// indices per row.
#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct SparseBinaryMatrix {
    ncols: usize,
    rows: Vec<Vec<u32>>,
}

impl SparseBinaryMatrix {
    pub fn new(ncols: usize) -> Self {
        SparseBinaryMatrix {
            ncols,
            rows: Vec::new(),
        }
    }

    /// Builds from arbitrary index lists; indices are sorted and deduplicated.
    pub fn from_rows(ncols: usize, rows: Vec<Vec<u32>>) -> Result<Self> {
        let mut out = SparseBinaryMatrix::new(ncols);
        for r in rows {
            out.push_row(r)?;
        }
        Ok(out)
    }

    pub fn from_dense(ncols: usize, dense: &[Vec<bool>]) -> Result<Self> {
        let rows = dense
            .iter()
            .map(|r| {
                if r.len() != ncols {
                    return Err(Error::DimMismatch(format!(
                        "dense row of length {} for {ncols} columns",
                        r.len()
                    )));
                }
                Ok(r.iter()
                    .enumerate()
                    .filter(|(_, &b)| b)
                    .map(|(i, _)| i as u32)
                    .collect())
            })
            .collect::<Result<Vec<Vec<u32>>>>()?;
        Ok(SparseBinaryMatrix { ncols, rows })
    }

    pub fn identity(n: usize) -> Self {
        SparseBinaryMatrix {
            ncols: n,
            rows: (0..n as u32).map(|i| vec![i]).collect(),
        }
    }

    /// A single row covering every column.
    pub fn all_ones_row(ncols: usize) -> Self {
        SparseBinaryMatrix {
            ncols,
            rows: vec![(0..ncols as u32).collect()],
        }
    }

    pub fn push_row(&mut self, mut row: Vec<u32>) -> Result<()> {
        row.sort_unstable();
        row.dedup();
        if let Some(&last) = row.last() {
            if last as usize >= self.ncols {
                return Err(Error::DimMismatch(format!(
                    "column {last} out of range for {} columns",
                    self.ncols
                )));
            }
        }
        self.rows.push(row);
        Ok(())
    }

    pub fn nrows(&self) -> usize {
        self.rows.len()
    }

    pub fn ncols(&self) -> usize {
        self.ncols
    }

    pub fn row(&self, i: usize) -> &[u32] {
        &self.rows[i]
    }

    pub fn rows(&self) -> &[Vec<u32>] {
        &self.rows
    }

    pub fn row_count(&self, i: usize) -> usize {
        self.rows[i].len()
    }

    pub fn contains(&self, i: usize, j: usize) -> bool {
        self.rows[i].binary_search(&(j as u32)).is_ok()
    }

    pub fn to_dense(&self) -> Vec<Vec<bool>> {
        self.rows
            .iter()
            .map(|r| {
                let mut d = vec![false; self.ncols];
                for &j in r {
                    d[j as usize] = true;
                }
                d
            })
            .collect()
    }

    pub fn select_rows(&self, idx: &[usize]) -> SparseBinaryMatrix {
        SparseBinaryMatrix {
            ncols: self.ncols,
            rows: idx.iter().map(|&i| self.rows[i].clone()).collect(),
        }
    }

    /// Binarized product `1(self · rhs)`: row `i` of the result is the union
    /// of the `rhs` rows selected by row `i` of `self`.
    pub fn binary_product(&self, rhs: &SparseBinaryMatrix) -> Result<SparseBinaryMatrix> {
        if self.ncols != rhs.nrows() {
            return Err(Error::DimMismatch(format!(
                "binary product of {}x{} by {}x{}",
                self.nrows(),
                self.ncols,
                rhs.nrows(),
                rhs.ncols
            )));
        }
        let mut seen = vec![false; rhs.ncols];
        let mut out = SparseBinaryMatrix::new(rhs.ncols);
        for row in &self.rows {
            let mut acc = Vec::new();
            for &k in row {
                for &j in rhs.row(k as usize) {
                    if !seen[j as usize] {
                        seen[j as usize] = true;
                        acc.push(j);
                    }
                }
            }
            for &j in &acc {
                seen[j as usize] = false;
            }
            acc.sort_unstable();
            out.rows.push(acc);
        }
        Ok(out)
    }
}

/// Size of the intersection of two sorted index lists.
pub fn intersection_count(a: &[u32], b: &[u32]) -> usize {
    let (mut i, mut j, mut n) = (0, 0, 0);
    while i < a.len() && j < b.len() {
        match a[i].cmp(&b[j]) {
            std::cmp::Ordering::Less => i += 1,
            std::cmp::Ordering::Greater => j += 1,
            std::cmp::Ordering::Equal => {
                n += 1;
                i += 1;
                j += 1;
            }
        }
    }
    n
}
