use std::path::Path;

use super::{read_tensor, write_tensor, TensorData, TensorFile};
use crate::error::{Error, Result};
use crate::matrix::Matrix;

/// Dense feature grid of one image, stored on disk as an f32 tensor with
/// dims `[grid_h, grid_w, dim]`. Cell `(u, v)` is row `v * grid_w + u`.
#[derive(Debug, Clone, PartialEq)]
pub struct FeatureMap {
    pub grid_w: usize,
    pub grid_h: usize,
    pub cells: Matrix,
}

impl FeatureMap {
    pub fn new(grid_w: usize, grid_h: usize, cells: Matrix) -> Result<Self> {
        if cells.rows() != grid_w * grid_h {
            return Err(Error::DimMismatch(format!(
                "{} feature rows for a {grid_w}x{grid_h} grid",
                cells.rows()
            )));
        }
        Ok(FeatureMap {
            grid_w,
            grid_h,
            cells,
        })
    }

    pub fn dim(&self) -> usize {
        self.cells.cols()
    }

    pub fn num_cells(&self) -> usize {
        self.cells.rows()
    }

    pub fn to_tensor(&self) -> TensorFile {
        TensorFile {
            dims: vec![self.grid_h as u64, self.grid_w as u64, self.dim() as u64],
            data: TensorData::F32(self.cells.as_slice().to_vec()),
        }
    }

    pub fn from_tensor(t: &TensorFile) -> Result<Self> {
        let values = t
            .as_f32()
            .ok_or_else(|| Error::Malformed("feature tensor must be f32".into()))?;
        let [h, w, d] = t.dims[..] else {
            return Err(Error::DimMismatch(format!(
                "feature tensor must be [H, W, D], got {:?}",
                t.dims
            )));
        };
        let (h, w, d) = (h as usize, w as usize, d as usize);
        FeatureMap::new(w, h, Matrix::from_vec(w * h, d, values.to_vec())?)
    }
}

pub fn read_features(path: impl AsRef<Path>) -> Result<FeatureMap> {
    FeatureMap::from_tensor(&read_tensor(path)?)
}

pub fn write_features(path: impl AsRef<Path>, features: &FeatureMap) -> Result<()> {
    write_tensor(path, &features.to_tensor())
}
