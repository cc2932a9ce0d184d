//! Greedy IOU culling of database SuperSegments.

use std::path::Path;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::matrix::SparseBinaryMatrix;
use crate::seggraph::iou_sorted;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageCull {
    pub image_id: String,
    pub kept_ids: Vec<u32>,
    pub removed_ids: Vec<u32>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CullReport {
    pub threshold: f64,
    pub images: Vec<ImageCull>,
    pub total: usize,
    pub kept: usize,
    pub retention_ratio: f64,
}

impl CullReport {
    pub fn kept_for(&self, image_id: &str) -> Option<&[u32]> {
        self.images
            .iter()
            .find(|c| c.image_id == image_id)
            .map(|c| c.kept_ids.as_slice())
    }

    pub fn save(&self, path: impl AsRef<Path>) -> Result<()> {
        let path = path.as_ref();
        std::fs::write(path, serde_json::to_vec_pretty(self)?).map_err(|e| Error::io(path, e))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let bytes = std::fs::read(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_slice(&bytes)?)
    }
}

fn check_threshold(psi: f64) -> Result<()> {
    if !(0.0..=1.0).contains(&psi) {
        return Err(Error::InvalidArgument(format!("IOU threshold {psi} outside [0, 1]")));
    }
    Ok(())
}

/// Culling order: descending cell area, ties by ascending segment id.
pub fn cull_order(masks: &SparseBinaryMatrix) -> Vec<usize> {
    let mut order: Vec<usize> = (0..masks.nrows()).collect();
    order.sort_by(|&a, &b| masks.row_count(b).cmp(&masks.row_count(a)).then(a.cmp(&b)));
    order
}

/// Keep flags for the rows of one image's SuperSegment masks.
pub fn cull_masks(masks: &SparseBinaryMatrix, psi: f64) -> Result<Vec<bool>> {
    check_threshold(psi)?;
    let mut keep = vec![false; masks.nrows()];
    let mut kept: Vec<usize> = Vec::new();
    for i in cull_order(masks) {
        if kept.iter().all(|&j| iou_sorted(masks.row(i), masks.row(j)) <= psi) {
            keep[i] = true;
            kept.push(i);
        }
    }
    Ok(keep)
}

/// Culls each image independently. `segment_ids[i]` labels row `i` of the
/// matching mask matrix.
pub fn cull_by_iou(
    images: &[(String, Vec<u32>, SparseBinaryMatrix)],
    psi: f64,
) -> Result<CullReport> {
    check_threshold(psi)?;
    let culls = images
        .par_iter()
        .map(|(image_id, ids, masks)| {
            if ids.len() != masks.nrows() {
                return Err(Error::DimMismatch(format!(
                    "{image_id}: {} segment ids for {} masks",
                    ids.len(),
                    masks.nrows()
                )));
            }
            let keep = cull_masks(masks, psi)?;
            let (mut kept_ids, mut removed_ids) = (Vec::new(), Vec::new());
            for (&id, k) in ids.iter().zip(keep) {
                if k {
                    kept_ids.push(id);
                } else {
                    removed_ids.push(id);
                }
            }
            Ok(ImageCull {
                image_id: image_id.clone(),
                kept_ids,
                removed_ids,
            })
        })
        .collect::<Result<Vec<_>>>()?;
    let total = images.iter().map(|(_, ids, _)| ids.len()).sum();
    let kept = culls.iter().map(|c| c.kept_ids.len()).sum();
    Ok(CullReport {
        threshold: psi,
        images: culls,
        total,
        kept,
        retention_ratio: if total == 0 { 1.0 } else { kept as f64 / total as f64 },
    })
}
