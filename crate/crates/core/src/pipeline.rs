//! Per-image and per-split descriptor extraction, and query runs.

use std::collections::{BTreeMap, HashSet};
use std::time::Instant;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{
    gap_descriptor, gem_descriptors, global_vlad_single_shot, sap_descriptors, vlad_descriptors,
    AggregationMethod, DescriptorSet, Provenance,
};
use crate::dimred::{pca_fit, pca_transform_rows, PcaModel};
use crate::error::{Error, Result};
use crate::filtering::{cull_by_iou, CullReport};
use crate::io::{read_features, read_masks, DatasetManifest, FeatureMap, SegmentMaskSet, Split};
use crate::matrix::{Matrix, SparseBinaryMatrix};
use crate::retrieval::{rank, search, FlatIndex, ImageRanking, RankingMethod};
use crate::seggraph::{centroids, delaunay_adjacency, downsample_masks, expand_masks, patchify};
use crate::vocab::Vocabulary;

pub const DEFAULT_ORDER: u32 = 3;
pub const DEFAULT_K_PRIME: usize = 50;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DescribeConfig {
    pub order: u32,
    pub method: AggregationMethod,
    /// Replace the image's segments with uniform square patches of this
    /// many pixels.
    #[serde(default)]
    pub patch_size: Option<u32>,
}

impl Default for DescribeConfig {
    fn default() -> Self {
        DescribeConfig {
            order: DEFAULT_ORDER,
            method: AggregationMethod::Segvlad,
            patch_size: None,
        }
    }
}

/// Descriptors of one image, with the SuperSegment cell masks they came from.
#[derive(Debug, Clone, PartialEq)]
pub struct ImageDescription {
    pub segment_ids: Vec<u32>,
    pub supersegments: SparseBinaryMatrix,
    pub descriptors: Matrix,
}

fn require_vocab(vocab: Option<&Vocabulary>, method: AggregationMethod) -> Result<&Vocabulary> {
    vocab.ok_or_else(|| Error::InvalidArgument(format!("{method} aggregation needs a vocabulary")))
}

/// SuperSegment cell masks of one image and the segment id of each row.
/// Empty segments are dropped; with `patch_size` the segments are replaced
/// by uniform patches.
pub fn supersegment_masks(
    masks: &SegmentMaskSet,
    grid_w: usize,
    grid_h: usize,
    order: u32,
    patch_size: Option<u32>,
) -> Result<(Vec<u32>, SparseBinaryMatrix)> {
    let (segments, segment_ids, graph) = match patch_size {
        Some(p) => {
            let (set, graph) = patchify(masks.height, masks.width, p)?;
            let ids = (0..set.len() as u32).collect();
            (set, ids, graph)
        }
        None => {
            let mut kept = SegmentMaskSet::new(masks.height, masks.width);
            let mut ids = Vec::new();
            for (i, seg) in masks.segments.iter().enumerate() {
                if seg.is_empty() {
                    log::warn!("dropping empty segment {i}");
                } else {
                    kept.segments.push(seg.clone());
                    ids.push(i as u32);
                }
            }
            let graph = delaunay_adjacency(&centroids(&kept)?);
            (kept, ids, graph)
        }
    };
    let cell_masks = downsample_masks(&segments, grid_w, grid_h)?;
    Ok((segment_ids, expand_masks(&graph, &cell_masks, order)?.masks))
}

pub fn describe_image(
    masks: &SegmentMaskSet,
    features: &FeatureMap,
    cfg: &DescribeConfig,
    vocab: Option<&Vocabulary>,
) -> Result<ImageDescription> {
    let cells = &features.cells;
    if cfg.method.is_global() {
        let v = match cfg.method {
            AggregationMethod::Gap => gap_descriptor(cells),
            _ => global_vlad_single_shot(cells, require_vocab(vocab, cfg.method)?)?,
        };
        return Ok(ImageDescription {
            segment_ids: vec![0],
            supersegments: SparseBinaryMatrix::all_ones_row(features.num_cells()),
            descriptors: Matrix::from_vec(1, v.len(), v)?,
        });
    }

    let (segment_ids, supersegments) =
        supersegment_masks(masks, features.grid_w, features.grid_h, cfg.order, cfg.patch_size)?;
    let descriptors = match cfg.method {
        AggregationMethod::Segvlad => {
            vlad_descriptors(&supersegments, cells, require_vocab(vocab, cfg.method)?)?
        }
        AggregationMethod::Sap => sap_descriptors(&supersegments, cells)?,
        AggregationMethod::Gem(p) => gem_descriptors(&supersegments, cells, p)?,
        AggregationMethod::Gap | AggregationMethod::GlobalVlad => unreachable!(),
    };
    Ok(ImageDescription {
        segment_ids,
        supersegments,
        descriptors,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct DescribedImage {
    pub image_id: String,
    pub description: ImageDescription,
}

/// Describes every image of a split, in manifest order.
pub fn describe_split(
    manifest: &DatasetManifest,
    split: Split,
    cfg: &DescribeConfig,
    vocab: Option<&Vocabulary>,
) -> Result<Vec<DescribedImage>> {
    manifest
        .entries(split)
        .par_iter()
        .map(|e| {
            let masks = read_masks(manifest.resolve(&e.mask_path))?;
            let features = read_features(manifest.resolve(&e.feature_path))?;
            let description = describe_image(&masks, &features, cfg, vocab)
                .map_err(|err| Error::InvalidArgument(format!("{}: {err}", e.image_id)))?;
            Ok(DescribedImage {
                image_id: e.image_id.clone(),
                description,
            })
        })
        .collect()
}

pub fn to_descriptor_set(images: &[DescribedImage], cfg: &DescribeConfig) -> Result<DescriptorSet> {
    let sets = images
        .iter()
        .map(|img| {
            let d = &img.description;
            DescriptorSet::new(
                d.descriptors.clone(),
                d.segment_ids
                    .iter()
                    .map(|&segment_id| Provenance {
                        image_id: img.image_id.clone(),
                        segment_id,
                        order: cfg.order,
                        method: cfg.method,
                    })
                    .collect(),
            )
        })
        .collect::<Result<Vec<_>>>()?;
    if sets.is_empty() {
        return Ok(DescriptorSet::empty(0));
    }
    DescriptorSet::concat(&sets)
}

/// Fits PCA on the nonzero rows of a database descriptor set.
pub fn fit_pca(set: &DescriptorSet, d: usize, whiten: bool) -> Result<PcaModel> {
    let rows: Vec<usize> = (0..set.len())
        .filter(|&i| set.descriptors.row(i).iter().any(|&v| v != 0.0))
        .collect();
    pca_fit(&set.descriptors.select_rows(&rows), d, whiten)
}

pub fn apply_pca(set: &DescriptorSet, model: &PcaModel) -> Result<DescriptorSet> {
    DescriptorSet::new(pca_transform_rows(model, &set.descriptors)?, set.provenance.clone())
}

/// Applies IOU culling to the rows of a described split. SuperSegment masks
/// are rebuilt from the manifest using the order recorded in each row's
/// provenance; `patch_size` must match the one used for description.
pub fn cull_descriptor_set(
    manifest: &DatasetManifest,
    split: Split,
    set: &DescriptorSet,
    psi: f64,
    patch_size: Option<u32>,
) -> Result<(DescriptorSet, CullReport)> {
    let mut rows_by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in set.provenance.iter().enumerate() {
        rows_by_image.entry(p.image_id.as_str()).or_default().push(i);
    }
    for id in rows_by_image.keys() {
        if manifest.entry(split, id).is_none() {
            return Err(Error::InvalidArgument(format!("{id} is not in the {split:?} split")));
        }
    }
    let inputs = manifest
        .entries(split)
        .par_iter()
        .filter_map(|e| rows_by_image.get(e.image_id.as_str()).map(|rows| (e, rows)))
        .map(|(e, rows)| {
            let mut rows = rows.clone();
            rows.sort_by_key(|&r| set.provenance[r].segment_id);
            let first = &set.provenance[rows[0]];
            if rows.iter().any(|&r| {
                let p = &set.provenance[r];
                p.order != first.order || p.method != first.method
            }) {
                return Err(Error::InvalidArgument(format!(
                    "{}: rows mix orders or methods",
                    e.image_id
                )));
            }
            let (ids, masks) = if first.method.is_global() {
                (vec![0], SparseBinaryMatrix::all_ones_row(1))
            } else {
                let masks = read_masks(manifest.resolve(&e.mask_path))?;
                let features = read_features(manifest.resolve(&e.feature_path))?;
                supersegment_masks(&masks, features.grid_w, features.grid_h, first.order, patch_size)?
            };
            let pos: BTreeMap<u32, usize> = ids.iter().enumerate().map(|(i, &id)| (id, i)).collect();
            let selected = rows
                .iter()
                .map(|&r| {
                    let id = set.provenance[r].segment_id;
                    pos.get(&id).copied().ok_or_else(|| {
                        Error::InvalidArgument(format!("{}: no segment {id} in the mask file", e.image_id))
                    })
                })
                .collect::<Result<Vec<_>>>()?;
            let row_ids = rows.iter().map(|&r| set.provenance[r].segment_id).collect();
            Ok((e.image_id.clone(), row_ids, masks.select_rows(&selected)))
        })
        .collect::<Result<Vec<_>>>()?;
    let report = cull_by_iou(&inputs, psi)?;
    let kept: HashSet<(&str, u32)> = report
        .images
        .iter()
        .flat_map(|c| c.kept_ids.iter().map(move |&id| (c.image_id.as_str(), id)))
        .collect();
    let rows: Vec<usize> = (0..set.len())
        .filter(|&i| {
            let p = &set.provenance[i];
            kept.contains(&(p.image_id.as_str(), p.segment_id))
        })
        .collect();
    Ok((set.select(&rows), report))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QueryResult {
    pub query_id: String,
    pub ranking: ImageRanking,
    /// Search plus ranking time, excluding description.
    pub elapsed_ms: f64,
}

/// Searches each query image's descriptors and ranks database images.
/// `query_ids` fixes the output order; images without descriptors get an
/// empty ranking.
pub fn run_queries(
    index: &FlatIndex,
    queries: &DescriptorSet,
    query_ids: &[String],
    k_prime: usize,
    ranking: RankingMethod,
) -> Result<Vec<QueryResult>> {
    let mut rows_by_image: BTreeMap<&str, Vec<usize>> = BTreeMap::new();
    for (i, p) in queries.provenance.iter().enumerate() {
        rows_by_image.entry(p.image_id.as_str()).or_default().push(i);
    }
    query_ids
        .par_iter()
        .map(|qid| {
            let rows = rows_by_image.get(qid.as_str()).cloned().unwrap_or_default();
            let q = queries.descriptors.select_rows(&rows);
            let start = Instant::now();
            let hits = search(index, &q, k_prime)?;
            let ranking = rank(&hits, ranking);
            Ok(QueryResult {
                query_id: qid.clone(),
                ranking,
                elapsed_ms: start.elapsed().as_secs_f64() * 1e3,
            })
        })
        .collect()
}
