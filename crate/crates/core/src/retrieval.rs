//! Exact flat segment index, top-K′ search and image ranking.

use std::cmp::Ordering;
use std::collections::BTreeMap;
use std::fmt;
use std::path::Path;
use std::sync::Arc;

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::aggregate::{AggregationMethod, DescriptorSet, Provenance};
use crate::dimred::{pca_transform, PcaModel};
use crate::error::{Error, Result};
use crate::io::{write_tensor, FeatureMap, RleMask, SegmentMaskSet, TensorFile};
use crate::matrix::{l2_norm, Matrix};
use crate::pipeline::{describe_image, DescribeConfig};
use crate::vocab::Vocabulary;

const NORM_TOL: f64 = 1e-3;
const QUERY_BLOCK: usize = 16;

/// Database descriptors in `(image_id, segment_id)` order.
#[derive(Debug, Clone, PartialEq)]
pub struct FlatIndex {
    matrix: Matrix,
    provenance: Vec<Provenance>,
    images: Arc<[String]>,
    row_image: Vec<u32>,
}

impl FlatIndex {
    fn from_sorted(matrix: Matrix, provenance: Vec<Provenance>) -> Result<Self> {
        if matrix.rows() != provenance.len() {
            return Err(Error::DimMismatch(format!(
                "{} index rows but {} provenance records",
                matrix.rows(),
                provenance.len()
            )));
        }
        for w in provenance.windows(2) {
            let (a, b) = (&w[0], &w[1]);
            match (a.image_id.as_str(), a.segment_id).cmp(&(b.image_id.as_str(), b.segment_id)) {
                Ordering::Less => {}
                Ordering::Equal => {
                    return Err(Error::Malformed(format!(
                        "duplicate descriptor for image {} segment {}",
                        a.image_id, a.segment_id
                    )))
                }
                Ordering::Greater => {
                    return Err(Error::Malformed("index rows are not sorted".into()))
                }
            }
        }
        let mut images: Vec<String> = Vec::new();
        let mut row_image = Vec::with_capacity(provenance.len());
        for p in &provenance {
            if images.last() != Some(&p.image_id) {
                images.push(p.image_id.clone());
            }
            row_image.push((images.len() - 1) as u32);
        }
        Ok(FlatIndex {
            matrix,
            provenance,
            images: images.into(),
            row_image,
        })
    }

    pub fn len(&self) -> usize {
        self.provenance.len()
    }

    pub fn is_empty(&self) -> bool {
        self.provenance.is_empty()
    }

    pub fn dim(&self) -> usize {
        self.matrix.cols()
    }

    pub fn matrix(&self) -> &Matrix {
        &self.matrix
    }

    pub fn provenance(&self) -> &[Provenance] {
        &self.provenance
    }

    /// Distinct image ids, sorted.
    pub fn images(&self) -> &[String] {
        &self.images
    }

    pub fn image_of_row(&self, row: usize) -> u32 {
        self.row_image[row]
    }

    pub fn provenance_json(&self) -> Result<Vec<u8>> {
        Ok(serde_json::to_vec_pretty(&self.provenance)?)
    }

    /// Writes `<stem>.svt` and `<stem>.json`.
    pub fn save(&self, stem: impl AsRef<Path>) -> Result<()> {
        let stem = stem.as_ref();
        write_tensor(stem.with_extension("svt"), &TensorFile::from_matrix(&self.matrix))?;
        let path = stem.with_extension("json");
        std::fs::write(&path, self.provenance_json()?).map_err(|e| Error::io(&path, e))
    }

    pub fn load(stem: impl AsRef<Path>) -> Result<Self> {
        let set = DescriptorSet::load(stem)?;
        FlatIndex::from_sorted(set.descriptors, set.provenance)
    }
}

/// Stacks descriptor sets into an index. Zero rows are dropped; every other
/// row must be unit length.
pub fn build_index(sets: &[DescriptorSet]) -> Result<FlatIndex> {
    let mut dim = None;
    for s in sets.iter().filter(|s| !s.is_empty()) {
        match dim {
            None => dim = Some(s.dim()),
            Some(d) if d != s.dim() => {
                return Err(Error::DimMismatch(format!(
                    "descriptor sets of dims {d} and {}",
                    s.dim()
                )))
            }
            _ => {}
        }
    }
    let dim = dim.unwrap_or(0);
    let mut rows: Vec<(&Provenance, &[f32])> = Vec::new();
    let mut excluded = 0usize;
    for s in sets {
        for (p, r) in s.provenance.iter().zip(s.descriptors.iter_rows()) {
            let n = l2_norm(r);
            if n == 0.0 {
                excluded += 1;
                continue;
            }
            if !n.is_finite() || (n - 1.0).abs() > NORM_TOL {
                return Err(Error::InvalidArgument(format!(
                    "descriptor for image {} segment {} has norm {n}",
                    p.image_id, p.segment_id
                )));
            }
            rows.push((p, r));
        }
    }
    if excluded > 0 {
        log::warn!("excluded {excluded} zero descriptors from the index");
    }
    rows.sort_by(|a, b| {
        (a.0.image_id.as_str(), a.0.segment_id).cmp(&(b.0.image_id.as_str(), b.0.segment_id))
    });
    let mut data = Vec::with_capacity(rows.len() * dim);
    for (_, r) in &rows {
        data.extend_from_slice(r);
    }
    let matrix = Matrix::from_vec(rows.len(), dim, data)?;
    FlatIndex::from_sorted(matrix, rows.into_iter().map(|(p, _)| p.clone()).collect())
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Hit {
    pub row_id: u32,
    /// Position in the index's sorted image table.
    pub image: u32,
    pub similarity: f64,
}

/// Orders hits by descending similarity, then ascending row.
pub fn hit_order(a: &Hit, b: &Hit) -> Ordering {
    b.similarity
        .total_cmp(&a.similarity)
        .then(a.row_id.cmp(&b.row_id))
}

/// Top-K′ hits for each query segment.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentHitList {
    pub images: Arc<[String]>,
    pub segments: Vec<Vec<Hit>>,
}

impl SegmentHitList {
    pub fn total_hits(&self) -> usize {
        self.segments.iter().map(Vec::len).sum()
    }
}

fn dot_f64(a: &[f32], b: &[f32]) -> f64 {
    a.iter().zip(b).map(|(&x, &y)| f64::from(x) * f64::from(y)).sum()
}

fn top_k(scores: Vec<f64>, index: &FlatIndex, k: usize) -> Vec<Hit> {
    let mut hits: Vec<Hit> = scores
        .into_iter()
        .enumerate()
        .map(|(r, similarity)| Hit {
            row_id: r as u32,
            image: index.row_image[r],
            similarity,
        })
        .collect();
    if hits.len() > k {
        hits.select_nth_unstable_by(k - 1, hit_order);
        hits.truncate(k);
    }
    hits.sort_by(hit_order);
    hits
}

/// Exact top-`k_prime` inner-product search. Queries are processed in
/// blocks so each index row is read once per block.
pub fn search(index: &FlatIndex, queries: &Matrix, k_prime: usize) -> Result<SegmentHitList> {
    if k_prime == 0 {
        return Err(Error::InvalidArgument("K′ must be at least 1".into()));
    }
    if queries.rows() > 0 && queries.cols() != index.dim() && !index.is_empty() {
        return Err(Error::DimMismatch(format!(
            "query dim {} but index dim {}",
            queries.cols(),
            index.dim()
        )));
    }
    let starts: Vec<usize> = (0..queries.rows()).step_by(QUERY_BLOCK).collect();
    let blocks: Vec<Vec<Vec<Hit>>> = starts
        .par_iter()
        .map(|&start| {
            let end = (start + QUERY_BLOCK).min(queries.rows());
            let live: Vec<usize> = (start..end)
                .filter(|&q| {
                    let zero = queries.row(q).iter().all(|&v| v == 0.0);
                    if zero {
                        log::warn!("query segment {q} has a zero descriptor; no hits");
                    }
                    !zero
                })
                .collect();
            let mut scores = vec![Vec::with_capacity(index.len()); live.len()];
            for row in index.matrix.iter_rows() {
                for (s, &q) in scores.iter_mut().zip(&live) {
                    s.push(dot_f64(queries.row(q), row));
                }
            }
            let mut out = vec![Vec::new(); end - start];
            for (s, &q) in scores.into_iter().zip(&live) {
                out[q - start] = top_k(s, index, k_prime);
            }
            out
        })
        .collect();
    Ok(SegmentHitList {
        images: index.images.clone(),
        segments: blocks.into_iter().flatten().collect(),
    })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum RankingMethod {
    Weighted,
    Maxseg,
    Maxsim,
}

impl fmt::Display for RankingMethod {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            RankingMethod::Weighted => "weighted",
            RankingMethod::Maxseg => "maxseg",
            RankingMethod::Maxsim => "maxsim",
        })
    }
}

impl std::str::FromStr for RankingMethod {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "weighted" => Ok(RankingMethod::Weighted),
            "maxseg" => Ok(RankingMethod::Maxseg),
            "maxsim" => Ok(RankingMethod::Maxsim),
            _ => Err(Error::InvalidArgument(format!("unknown ranking {s:?}"))),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RankedImage {
    pub image_id: String,
    pub score: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ImageRanking {
    pub method: RankingMethod,
    pub entries: Vec<RankedImage>,
}

impl ImageRanking {
    pub fn top(&self, k: usize) -> &[RankedImage] {
        &self.entries[..k.min(self.entries.len())]
    }

    /// Zero-based rank of `image_id`.
    pub fn position(&self, image_id: &str) -> Option<usize> {
        self.entries.iter().position(|e| e.image_id == image_id)
    }
}

/// Per-image similarities, sorted so sums do not depend on hit order.
fn per_image_similarities(hits: &SegmentHitList) -> BTreeMap<u32, Vec<f64>> {
    let mut by_image: BTreeMap<u32, Vec<f64>> = BTreeMap::new();
    for h in hits.segments.iter().flatten() {
        by_image.entry(h.image).or_default().push(h.similarity);
    }
    for v in by_image.values_mut() {
        v.sort_by(f64::total_cmp);
    }
    by_image
}

fn finish(hits: &SegmentHitList, method: RankingMethod, mut scored: Vec<(u32, f64, f64)>) -> ImageRanking {
    // (image, primary score, secondary score); image index order is id order
    scored.sort_by(|a, b| {
        b.1.total_cmp(&a.1)
            .then(b.2.total_cmp(&a.2))
            .then(a.0.cmp(&b.0))
    });
    ImageRanking {
        method,
        entries: scored
            .into_iter()
            .map(|(i, score, _)| RankedImage {
                image_id: hits.images[i as usize].clone(),
                score,
            })
            .collect(),
    }
}

/// Sum of all hit similarities per image, duplicates included.
pub fn rank_weighted(hits: &SegmentHitList) -> ImageRanking {
    let scored = per_image_similarities(hits)
        .into_iter()
        .map(|(i, v)| (i, v.iter().sum(), 0.0))
        .collect();
    finish(hits, RankingMethod::Weighted, scored)
}

/// Count of query segments whose best hit lands in each image. Equal
/// counts fall back to the image's summed similarity over all hits.
pub fn rank_maxseg(hits: &SegmentHitList) -> ImageRanking {
    let mut counts: BTreeMap<u32, usize> = BTreeMap::new();
    for seg in &hits.segments {
        if let Some(best) = seg.iter().min_by(|a, b| hit_order(a, b)) {
            *counts.entry(best.image).or_default() += 1;
        }
    }
    let sums = per_image_similarities(hits);
    let scored = counts
        .into_iter()
        .map(|(i, c)| (i, c as f64, sums[&i].iter().sum()))
        .collect();
    finish(hits, RankingMethod::Maxseg, scored)
}

/// Best single similarity per image.
pub fn rank_maxsim(hits: &SegmentHitList) -> ImageRanking {
    let scored = per_image_similarities(hits)
        .into_iter()
        .map(|(i, v)| (i, *v.last().expect("nonempty"), 0.0))
        .collect();
    finish(hits, RankingMethod::Maxsim, scored)
}

pub fn rank(hits: &SegmentHitList, method: RankingMethod) -> ImageRanking {
    match method {
        RankingMethod::Weighted => rank_weighted(hits),
        RankingMethod::Maxseg => rank_maxseg(hits),
        RankingMethod::Maxsim => rank_maxsim(hits),
    }
}

/// Descriptor of a user-drawn object mask, appended to the image's
/// segments as an extra node so it picks up Delaunay neighbors.
pub fn object_descriptor(
    masks: &SegmentMaskSet,
    features: &FeatureMap,
    ooi: &RleMask,
    vocab: &Vocabulary,
    order: u32,
) -> Result<Vec<f32>> {
    if ooi.is_empty() {
        return Err(Error::InvalidArgument("object mask is empty".into()));
    }
    let mut with_ooi = masks.clone();
    with_ooi.segments.push(ooi.clone());
    with_ooi.validate()?;
    let cfg = DescribeConfig {
        order,
        method: AggregationMethod::Segvlad,
        patch_size: None,
    };
    let d = describe_image(&with_ooi, features, &cfg, Some(vocab))?;
    let last = d.descriptors.rows() - 1;
    debug_assert_eq!(d.segment_ids[last] as usize, masks.len());
    Ok(d.descriptors.row(last).to_vec())
}

/// Ranks database images for a single object-of-interest descriptor.
#[allow(clippy::too_many_arguments)]
pub fn query_object_instance(
    masks: &SegmentMaskSet,
    features: &FeatureMap,
    ooi: &RleMask,
    vocab: &Vocabulary,
    order: u32,
    pca: Option<&PcaModel>,
    index: &FlatIndex,
    k_prime: usize,
) -> Result<ImageRanking> {
    let mut v = object_descriptor(masks, features, ooi, vocab, order)?;
    if let Some(model) = pca {
        v = pca_transform(model, &v)?;
    }
    let q = Matrix::from_vec(1, v.len(), v)?;
    Ok(rank_weighted(&search(index, &q, k_prime)?))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::aggregate::AggregationMethod;

    fn prov(image: &str, seg: u32) -> Provenance {
        Provenance {
            image_id: image.into(),
            segment_id: seg,
            order: 1,
            method: AggregationMethod::Segvlad,
        }
    }

    fn set(rows: &[(&str, u32, [f32; 2])]) -> DescriptorSet {
        DescriptorSet::new(
            Matrix::from_rows(&rows.iter().map(|r| r.2.to_vec()).collect::<Vec<_>>()).unwrap(),
            rows.iter().map(|r| prov(r.0, r.1)).collect(),
        )
        .unwrap()
    }

    fn hits(images: &[&str], segs: Vec<Vec<(u32, f64)>>) -> SegmentHitList {
        let mut row = 0;
        SegmentHitList {
            images: images.iter().map(|s| s.to_string()).collect::<Vec<_>>().into(),
            segments: segs
                .into_iter()
                .map(|s| {
                    s.into_iter()
                        .map(|(image, similarity)| {
                            row += 1;
                            Hit { row_id: row, image, similarity }
                        })
                        .collect()
                })
                .collect(),
        }
    }

    #[test]
    fn index_orders_rows_and_drops_zero() {
        let a = set(&[("c", 1, [1.0, 0.0]), ("a", 2, [0.0, 1.0]), ("a", 0, [0.0, 0.0])]);
        let b = set(&[("b", 0, [0.6, 0.8]), ("a", 1, [0.8, 0.6])]);
        let idx = build_index(&[a, b]).unwrap();
        let order: Vec<(String, u32)> =
            idx.provenance().iter().map(|p| (p.image_id.clone(), p.segment_id)).collect();
        assert_eq!(
            order,
            vec![("a".into(), 1), ("a".into(), 2), ("b".into(), 0), ("c".into(), 1)]
        );
        assert_eq!(idx.images(), &["a".to_string(), "b".into(), "c".into()]);
        let bad = DescriptorSet::new(Matrix::from_rows(&[vec![1.0f32, 0.0, 0.0]]).unwrap(), vec![prov("z", 0)])
            .unwrap();
        assert!(build_index(&[set(&[("a", 0, [1.0, 0.0])]), bad]).is_err());
        assert!(build_index(&[set(&[("a", 0, [2.0, 0.0])])]).is_err());
        assert!(build_index(&[set(&[("a", 0, [1.0, 0.0]), ("a", 0, [0.0, 1.0])])]).is_err());
    }

    #[test]
    fn search_exact_and_ties() {
        let idx = build_index(&[set(&[("a", 0, [1.0, 0.0]), ("b", 0, [1.0, 0.0]), ("c", 0, [0.0, 1.0])])])
            .unwrap();
        let q = Matrix::from_rows(&[vec![0.0f32, 1.0], vec![1.0, 0.0], vec![0.0, 0.0]]).unwrap();
        let h = search(&idx, &q, 2).unwrap();
        assert_eq!(h.segments[0][0].row_id, 2);
        assert_eq!(h.segments[0][0].similarity, 1.0);
        assert_eq!(h.segments[0][1].row_id, 0);
        assert_eq!(
            h.segments[1].iter().map(|h| h.row_id).collect::<Vec<_>>(),
            vec![0, 1]
        );
        assert!(h.segments[2].is_empty());
        assert!(search(&idx, &q, 0).is_err());
        assert!(search(&idx, &Matrix::zeros(1, 3), 1).is_err());
    }

    #[test]
    fn index_save_load_round_trip() {
        let idx = build_index(&[set(&[("b", 0, [0.6, 0.8]), ("a", 1, [0.8, 0.6])])]).unwrap();
        let dir = tempfile::tempdir().unwrap();
        idx.save(dir.path().join("index")).unwrap();
        assert_eq!(FlatIndex::load(dir.path().join("index")).unwrap(), idx);
    }

    #[test]
    fn weighted_hand_case() {
        let h = hits(&["A", "B"], vec![vec![(0, 0.9), (1, 0.8)], vec![(1, 0.7), (0, 0.1)]]);
        let r = rank_weighted(&h);
        assert_eq!(r.entries[0].image_id, "B");
        assert!((r.entries[0].score - 1.5).abs() < 1e-12);
        assert!((r.entries[1].score - 1.0).abs() < 1e-12);
    }

    #[test]
    fn maxseg_and_maxsim() {
        let h = hits(
            &["A", "B", "C"],
            vec![vec![(0, 0.9), (1, 0.5)], vec![(0, 0.8)], vec![(1, 0.95), (2, 0.1)]],
        );
        let r = rank_maxseg(&h);
        assert_eq!(r.entries.iter().map(|e| e.image_id.as_str()).collect::<Vec<_>>(), vec!["A", "B"]);
        assert_eq!(r.entries[0].score, 2.0);

        let h = hits(&["D", "E"], vec![vec![(0, 0.99), (1, 0.5)], vec![(1, 0.5), (1, 0.5)]]);
        assert_eq!(rank_maxsim(&h).entries[0].image_id, "D");
        assert_eq!(rank_weighted(&h).entries[0].image_id, "E");
        let h = hits(&["x", "y", "z"], vec![vec![(2, 0.5), (0, 0.5), (1, 0.5)]]);
        let names: Vec<_> = rank_maxsim(&h).entries.into_iter().map(|e| e.image_id).collect();
        assert_eq!(names, vec!["x", "y", "z"]);
    }

    #[test]
    fn ranking_names_parse() {
        for m in [RankingMethod::Weighted, RankingMethod::Maxseg, RankingMethod::Maxsim] {
            assert_eq!(m.to_string().parse::<RankingMethod>().unwrap(), m);
        }
        assert!("sum".parse::<RankingMethod>().is_err());
    }

    fn scene() -> (SegmentMaskSet, FeatureMap, Vocabulary) {
        use crate::vocab::VocabSource;
        let mut masks = SegmentMaskSet::new(8, 8);
        for (qx, qy) in [(0u32, 0u32), (1, 0), (0, 1), (1, 1)] {
            masks.segments.push(RleMask::from_pixels(
                (0..4u32).flat_map(|y| (0..4u32).map(move |x| (qy * 4 + y) * 8 + qx * 4 + x)),
            ));
        }
        let cells = Matrix::from_vec(16, 2, (0..32).map(|i| ((i * 7) % 5) as f32 - 2.0).collect()).unwrap();
        let vocab = Vocabulary::new(
            Matrix::from_rows(&[vec![1.0f32, 0.0], vec![-1.0, 0.5]]).unwrap(),
            VocabSource::Map,
            0,
        )
        .unwrap();
        (masks, FeatureMap::new(4, 4, cells).unwrap(), vocab)
    }

    #[test]
    fn object_equal_to_segment_matches_its_descriptor() {
        let (masks, features, vocab) = scene();
        let cfg = DescribeConfig { order: 1, method: AggregationMethod::Segvlad, patch_size: None };
        let d = describe_image(&masks, &features, &cfg, Some(&vocab)).unwrap();
        let v = object_descriptor(&masks, &features, &masks.segments[2], &vocab, 1).unwrap();
        assert_eq!(d.descriptors.row(2), &v[..]);
        assert!(object_descriptor(&masks, &features, &RleMask::empty(), &vocab, 1).is_err());
    }

    #[test]
    fn object_order_changes_descriptor() {
        let (masks, features, vocab) = scene();
        let ooi = RleMask::from_pixels([0u32, 1, 8, 9]);
        let a = object_descriptor(&masks, &features, &ooi, &vocab, 0).unwrap();
        let b = object_descriptor(&masks, &features, &ooi, &vocab, 3).unwrap();
        assert_ne!(a, b);
    }
}
