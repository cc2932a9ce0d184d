//! Planted-overlap synthetic datasets.
//!
//! References tile the image with a grid of square segments, each filled
//! with noisy copies of one prototype feature. A query copies a column-major
//! block of segments from its target reference verbatim. The rest of the
//! query is covered by a few large segments whose cells are copied from a
//! different (distractor) reference, or filled with query-only clutter.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};

use rand::seq::index::sample;
use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};

use super::{csv_err, into_string, GroundTruth};
use crate::error::{Error, Result};
use crate::io::{
    save_manifest, write_features, write_masks, DatasetManifest, FeatureMap, ManifestEntry, RleMask,
    SegmentMaskSet,
};
use crate::matrix::Matrix;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SynthSpec {
    pub num_refs: usize,
    pub num_queries: usize,
    pub segments_per_image: usize,
    pub overlap_fraction: f64,
    /// Fraction of non-planted segment positions copied from the distractor
    /// reference; the rest is clutter.
    pub distractor_strength: f64,
    pub seed: u64,
    pub feature_dim: usize,
    /// Prototype pool size; 0 means four per segment slot.
    pub prototypes: usize,
    /// Norm scale of the per-cell noise added to prototypes.
    pub noise: f64,
    pub distractor_blobs: usize,
    /// Feature cells along one side of a segment.
    pub segment_cells: usize,
    /// Pixels along one side of a feature cell.
    pub cell_pixels: u32,
}

impl Default for SynthSpec {
    fn default() -> Self {
        SynthSpec {
            num_refs: 64,
            num_queries: 32,
            segments_per_image: 64,
            overlap_fraction: 0.3,
            distractor_strength: 0.4,
            seed: 42,
            feature_dim: 32,
            prototypes: 0,
            noise: 0.1,
            distractor_blobs: 8,
            segment_cells: 2,
            cell_pixels: 4,
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthImage {
    pub image_id: String,
    pub masks: SegmentMaskSet,
    pub features: FeatureMap,
    pub frame_index: i64,
    pub position: [f64; 2],
}

#[derive(Debug, Clone, PartialEq)]
pub struct SynthDataset {
    pub spec: SynthSpec,
    pub references: Vec<SynthImage>,
    pub queries: Vec<SynthImage>,
    /// Reference index each query was planted from.
    pub targets: Vec<usize>,
    pub distractors: Vec<Option<usize>>,
}

struct Layout {
    gx: usize,
    sc: usize,
    gw: usize,
    gh: usize,
    px: u32,
    segments: usize,
}

impl Layout {
    fn new(spec: &SynthSpec) -> Self {
        let s = spec.segments_per_image;
        let gx = (s as f64).sqrt().ceil() as usize;
        let gy = s.div_ceil(gx);
        let sc = spec.segment_cells;
        Layout {
            gx,
            sc,
            gw: gx * sc,
            gh: gy * sc,
            px: spec.cell_pixels,
            segments: s,
        }
    }

    fn width(&self) -> u32 {
        self.gw as u32 * self.px
    }

    fn height(&self) -> u32 {
        self.gh as u32 * self.px
    }

    /// Feature cells of segment slot `s`, row-major.
    fn cells(&self, s: usize) -> Vec<usize> {
        let (col, row) = (s % self.gx, s / self.gx);
        (0..self.sc)
            .flat_map(|dy| (0..self.sc).map(move |dx| (row * self.sc + dy) * self.gw + col * self.sc + dx))
            .collect()
    }

    fn pixels(&self, slots: &[usize]) -> RleMask {
        let w = self.width();
        let mut px: Vec<u32> = Vec::new();
        for &s in slots {
            for c in self.cells(s) {
                let (cx, cy) = ((c % self.gw) as u32, (c / self.gw) as u32);
                for y in cy * self.px..(cy + 1) * self.px {
                    px.extend((cx * self.px..(cx + 1) * self.px).map(|x| y * w + x));
                }
            }
        }
        px.sort_unstable();
        RleMask::from_pixels(px)
    }

    /// Slots ordered by column, then row.
    fn column_major(&self) -> Vec<usize> {
        let mut slots: Vec<usize> = (0..self.segments).collect();
        slots.sort_by_key(|&s| (s % self.gx, s / self.gx));
        slots
    }
}

fn unit(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    loop {
        let v: Vec<f64> = (0..d).map(|_| StandardNormal.sample(&mut *rng)).collect();
        let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
        if n > 1e-9 {
            return v.iter().map(|x| (x / n) as f32).collect();
        }
    }
}

fn noisy(rng: &mut ChaCha8Rng, proto: &[f32], noise: f64) -> Vec<f32> {
    let sigma = noise / (proto.len() as f64).sqrt();
    let v: Vec<f64> = proto
        .iter()
        .map(|&p| {
            let z: f64 = StandardNormal.sample(&mut *rng);
            f64::from(p) + sigma * z
        })
        .collect();
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    v.iter().map(|x| (x / n) as f32).collect()
}

fn fill_slot(cells: &mut Matrix, layout: &Layout, s: usize, rng: &mut ChaCha8Rng, proto: &[f32], noise: f64) {
    for c in layout.cells(s) {
        cells.row_mut(c).copy_from_slice(&noisy(rng, proto, noise));
    }
}

fn copy_slot(dst: &mut Matrix, src: &Matrix, layout: &Layout, s: usize) {
    for c in layout.cells(s) {
        dst.row_mut(c).copy_from_slice(src.row(c));
    }
}

pub fn synth_generate(spec: &SynthSpec) -> Result<SynthDataset> {
    let s = spec.segments_per_image;
    if !(spec.overlap_fraction > 0.0 && spec.overlap_fraction <= 1.0) {
        return Err(Error::InvalidArgument(format!(
            "overlap_fraction {} outside (0, 1]",
            spec.overlap_fraction
        )));
    }
    if !(0.0..=1.0).contains(&spec.distractor_strength) {
        return Err(Error::InvalidArgument("distractor_strength outside [0, 1]".into()));
    }
    if s == 0 || spec.num_refs == 0 || spec.feature_dim == 0 || spec.segment_cells == 0 || spec.cell_pixels == 0 {
        return Err(Error::InvalidArgument("synthetic sizes must be positive".into()));
    }
    if spec.num_queries > spec.num_refs {
        return Err(Error::InvalidArgument(format!(
            "{} queries need as many distinct targets, only {} references",
            spec.num_queries, spec.num_refs
        )));
    }
    if spec.distractor_strength > 0.0 && spec.num_refs < 2 {
        return Err(Error::InvalidArgument("distractors need at least two references".into()));
    }
    let planted = ((spec.overlap_fraction * s as f64).round() as usize).max(1);
    if planted > s {
        return Err(Error::InvalidArgument(format!(
            "{planted} planted segments exceed {s} segments per image"
        )));
    }

    let layout = Layout::new(spec);
    let mut rng = ChaCha8Rng::seed_from_u64(spec.seed);
    let d = spec.feature_dim;
    let pool = if spec.prototypes == 0 { 4 * s } else { spec.prototypes };
    let prototypes: Vec<Vec<f32>> = (0..pool).map(|_| unit(&mut rng, d)).collect();
    let (w, h) = (layout.width(), layout.height());
    let ncells = layout.gw * layout.gh;

    let slot_masks: Vec<RleMask> = (0..s).map(|k| layout.pixels(&[k])).collect();
    let mut references = Vec::with_capacity(spec.num_refs);
    for j in 0..spec.num_refs {
        let mut cells = Matrix::zeros(ncells, d);
        // cells outside every slot (non-square layouts) get clutter
        for c in 0..ncells {
            cells.row_mut(c).copy_from_slice(&unit(&mut rng, d));
        }
        for k in 0..s {
            let p = rng.random_range(0..pool);
            fill_slot(&mut cells, &layout, k, &mut rng, &prototypes[p], spec.noise);
        }
        let mut masks = SegmentMaskSet::new(h, w);
        masks.segments = slot_masks.clone();
        references.push(SynthImage {
            image_id: format!("r{j:04}"),
            masks,
            features: FeatureMap::new(layout.gw, layout.gh, cells)?,
            frame_index: j as i64,
            position: [10.0 * j as f64, 0.0],
        });
    }

    let mut order: Vec<usize> = (0..spec.num_refs).collect();
    order.shuffle(&mut rng);
    let targets: Vec<usize> = order[..spec.num_queries].to_vec();
    let col_major = layout.column_major();
    let (planted_slots, rest) = col_major.split_at(planted);
    let mut planted_sorted = planted_slots.to_vec();
    planted_sorted.sort_unstable();
    let blobs = spec.distractor_blobs.max(1).min(rest.len().max(1));
    let blob_slots: Vec<&[usize]> = if rest.is_empty() {
        Vec::new()
    } else {
        (0..blobs)
            .map(|b| &rest[b * rest.len() / blobs..(b + 1) * rest.len() / blobs])
            .collect()
    };

    let mut queries = Vec::with_capacity(spec.num_queries);
    let mut distractors = Vec::with_capacity(spec.num_queries);
    for (i, &t) in targets.iter().enumerate() {
        let distractor = if spec.distractor_strength > 0.0 {
            let mut r = rng.random_range(0..spec.num_refs - 1);
            if r >= t {
                r += 1;
            }
            Some(r)
        } else {
            None
        };
        let target = &references[t].features.cells;
        let mut cells = target.clone();
        let copied = match distractor {
            Some(_) => (spec.distractor_strength * rest.len() as f64).round() as usize,
            None => 0,
        };
        let mut from_distractor = vec![false; rest.len()];
        for i in sample(&mut rng, rest.len(), copied) {
            from_distractor[i] = true;
        }
        for (&k, &copy) in rest.iter().zip(&from_distractor) {
            match distractor.filter(|_| copy) {
                Some(r) => copy_slot(&mut cells, &references[r].features.cells, &layout, k),
                None => {
                    let clutter = unit(&mut rng, d);
                    fill_slot(&mut cells, &layout, k, &mut rng, &clutter, spec.noise);
                }
            }
        }
        let mut masks = SegmentMaskSet::new(h, w);
        masks.segments = planted_sorted.iter().map(|&k| slot_masks[k].clone()).collect();
        masks.segments.extend(blob_slots.iter().map(|b| layout.pixels(b)));
        queries.push(SynthImage {
            image_id: format!("q{i:04}"),
            masks,
            features: FeatureMap::new(layout.gw, layout.gh, cells)?,
            frame_index: t as i64,
            position: references[t].position,
        });
        distractors.push(distractor);
    }
    Ok(SynthDataset {
        spec: spec.clone(),
        references,
        queries,
        targets,
        distractors,
    })
}

fn entry(img: &SynthImage, dir: &str) -> ManifestEntry {
    ManifestEntry {
        image_id: img.image_id.clone(),
        mask_path: PathBuf::from(format!("{dir}/{}.svm", img.image_id)),
        feature_path: PathBuf::from(format!("{dir}/{}.svt", img.image_id)),
        position: Some(img.position),
        frame_index: Some(img.frame_index),
    }
}

impl SynthDataset {
    pub fn manifest(&self) -> DatasetManifest {
        DatasetManifest {
            name: format!("synth-seed{}", self.spec.seed),
            reference_entries: self.references.iter().map(|r| entry(r, "references")).collect(),
            query_entries: self.queries.iter().map(|q| entry(q, "queries")).collect(),
            base_dir: PathBuf::new(),
        }
    }

    pub fn ground_truth(&self) -> GroundTruth {
        let matches: BTreeMap<String, BTreeSet<String>> = self
            .queries
            .iter()
            .zip(&self.targets)
            .map(|(q, &t)| (q.image_id.clone(), BTreeSet::from([self.references[t].image_id.clone()])))
            .collect();
        GroundTruth { matches }
    }

    pub fn pairs_csv(&self) -> Result<String> {
        let mut w = csv::Writer::from_writer(Vec::new());
        w.write_record(["query_id", "reference_id"]).map_err(csv_err)?;
        for (q, &t) in self.queries.iter().zip(&self.targets) {
            w.write_record([&q.image_id, &self.references[t].image_id]).map_err(csv_err)?;
        }
        into_string(w)
    }
}

/// Writes masks, features, `manifest.json`, `gt_pairs.csv` and `spec.json`
/// under `dir`; returns the manifest path.
pub fn write_synth(ds: &SynthDataset, dir: impl AsRef<Path>) -> Result<PathBuf> {
    let dir = dir.as_ref();
    for (imgs, sub) in [(&ds.references, "references"), (&ds.queries, "queries")] {
        for img in imgs {
            write_masks(dir.join(sub).join(format!("{}.svm", img.image_id)), &img.masks)?;
            write_features(dir.join(sub).join(format!("{}.svt", img.image_id)), &img.features)?;
        }
    }
    let path = dir.join("manifest.json");
    save_manifest(&path, &ds.manifest())?;
    let pairs = dir.join("gt_pairs.csv");
    std::fs::write(&pairs, ds.pairs_csv()?).map_err(|e| Error::io(&pairs, e))?;
    let spec = dir.join("spec.json");
    std::fs::write(&spec, serde_json::to_vec_pretty(&ds.spec)?).map_err(|e| Error::io(&spec, e))?;
    Ok(path)
}
