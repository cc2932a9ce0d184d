use std::collections::BTreeSet;
use std::sync::Arc;

use proptest::prelude::*;

use segvlad_core::aggregate::vlad_descriptors;
use segvlad_core::dimred::{pca_fit, pca_transform_rows};
use segvlad_core::filtering::{cull_masks, cull_order};
use segvlad_core::io::{
    decode_masks, decode_tensor, encode_masks, encode_tensor, RleMask, SegmentMaskSet, TensorData,
    TensorFile,
};
use segvlad_core::matrix::{l2_norm, Matrix, SparseBinaryMatrix};
use segvlad_core::retrieval::{rank, Hit, RankingMethod, SegmentHitList};
use segvlad_core::seggraph::{delaunay_adjacency, expand_masks, iou_sorted, Point, SegmentGraph};
use segvlad_core::vocab::{kmeans_fit, KMeansConfig, VocabSource, Vocabulary};

fn cell_sets(max_rows: usize, ncols: usize) -> impl Strategy<Value = Vec<Vec<u32>>> {
    prop::collection::vec(
        prop::collection::btree_set(0..ncols as u32, 0..ncols.min(24)).prop_map(|s| s.into_iter().collect()),
        1..=max_rows,
    )
}

fn symmetric_graph(n: usize, bits: &[bool]) -> SegmentGraph {
    let mut adj = vec![vec![false; n]; n];
    let mut k = 0;
    for i in 0..n {
        for j in i + 1..n {
            let on = bits.get(k).copied().unwrap_or(false);
            adj[i][j] = on;
            adj[j][i] = on;
            k += 1;
        }
    }
    SegmentGraph {
        adjacency: SparseBinaryMatrix::from_dense(n, &adj).unwrap(),
        centroids: vec![Point::new(0.0, 0.0); n],
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn tensor_round_trip(rows in 0usize..6, cols in 0usize..6, seed in any::<u64>()) {
        let data: Vec<f32> = (0..rows * cols)
            .map(|i| f32::from_bits((seed as u32).wrapping_mul(2654435761).wrapping_add(i as u32)))
            .collect();
        let t = TensorFile::new(vec![rows as u64, cols as u64], TensorData::F32(data)).unwrap();
        prop_assert_eq!(decode_tensor(&encode_tensor(&t).unwrap()).unwrap(), t);
    }

    #[test]
    fn mask_round_trip(h in 1u32..20, w in 1u32..20, sets in cell_sets(6, 400)) {
        let total = h * w;
        let mut m = SegmentMaskSet::new(h, w);
        m.segments = sets
            .iter()
            .map(|s| RleMask::from_pixels(s.iter().copied().filter(|&p| p < total)))
            .collect();
        let back = decode_masks(&encode_masks(&m).unwrap()).unwrap();
        prop_assert_eq!(&back, &m);
        for (a, b) in back.segments.iter().zip(&sets) {
            let want: Vec<u32> = b.iter().copied().filter(|&p| p < total).collect();
            prop_assert_eq!(a.pixels().collect::<Vec<_>>(), want);
        }
    }

    #[test]
    fn expansion_nested_and_grounded(
        sets in cell_sets(8, 64),
        bits in prop::collection::vec(any::<bool>(), 28),
    ) {
        let n = sets.len();
        let m = SparseBinaryMatrix::from_rows(64, sets).unwrap();
        let g = symmetric_graph(n, &bits);
        let mut prev = expand_masks(&g, &m, 0).unwrap().masks;
        prop_assert_eq!(&prev, &m);
        for o in 1..=4 {
            let cur = expand_masks(&g, &m, o).unwrap().masks;
            for s in 0..n {
                let hi: BTreeSet<u32> = cur.row(s).iter().copied().collect();
                prop_assert!(prev.row(s).iter().all(|c| hi.contains(c)));
                // every cell comes from some segment mask
                prop_assert!(cur.row(s).iter().all(|&c| (0..n).any(|t| m.contains(t, c as usize))));
            }
            prev = cur;
        }
    }

    #[test]
    fn delaunay_graph_symmetric_and_connected(
        pts in prop::collection::vec((0i32..50, 0i32..50), 2..20),
    ) {
        let points: Vec<Point> = pts.iter().map(|&(x, y)| Point::new(f64::from(x), f64::from(y))).collect();
        let g = delaunay_adjacency(&points);
        let n = points.len();
        for i in 0..n {
            prop_assert!(!g.neighbors(i).contains(&(i as u32)));
            for &j in g.neighbors(i) {
                prop_assert!(g.neighbors(j as usize).contains(&(i as u32)));
            }
        }
        let mut seen = vec![false; n];
        let mut stack = vec![0usize];
        seen[0] = true;
        while let Some(u) = stack.pop() {
            for &v in g.neighbors(u) {
                if !seen[v as usize] {
                    seen[v as usize] = true;
                    stack.push(v as usize);
                }
            }
        }
        prop_assert!(seen.iter().all(|&s| s));
    }

    #[test]
    fn vlad_rows_unit_or_zero(
        sets in cell_sets(6, 32),
        feats in prop::collection::vec(-1.0f32..1.0, 32 * 4),
        centers in prop::collection::vec(-1.0f32..1.0, 3 * 4),
    ) {
        let m = SparseBinaryMatrix::from_rows(32, sets).unwrap();
        let vocab = Vocabulary::new(Matrix::from_vec(3, 4, centers).unwrap(), VocabSource::Map, 0).unwrap();
        let v = vlad_descriptors(&m, &Matrix::from_vec(32, 4, feats).unwrap(), &vocab).unwrap();
        for (s, row) in v.iter_rows().enumerate() {
            let norm = l2_norm(row);
            if m.row(s).is_empty() {
                prop_assert_eq!(norm, 0.0);
            } else {
                prop_assert!((norm - 1.0).abs() < 1e-5, "norm {}", norm);
            }
        }
    }

    #[test]
    fn ranking_ignores_hit_order(
        raw in prop::collection::vec(prop::collection::vec((0u32..30, 1u32..64), 0..8), 0..8),
        perm_seed in any::<u64>(),
    ) {
        let images: Arc<[String]> = (0..5).map(|i| format!("i{i}")).collect();
        let segments: Vec<Vec<Hit>> = raw
            .iter()
            .map(|seg| {
                let rows: BTreeSet<u32> = seg.iter().map(|h| h.0).collect();
                rows.into_iter()
                    .zip(seg.iter().map(|h| h.1))
                    .map(|(r, s)| Hit { row_id: r, image: r % 5, similarity: f64::from(s) / 64.0 })
                    .collect()
            })
            .collect();
        let hits = SegmentHitList { images: images.clone(), segments };
        let mut shuffled = hits.clone();
        let mut state = perm_seed;
        for seg in shuffled.segments.iter_mut() {
            for i in (1..seg.len()).rev() {
                state = state.wrapping_mul(6364136223846793005).wrapping_add(1442695040888963407);
                seg.swap(i, (state >> 33) as usize % (i + 1));
            }
        }
        shuffled.segments.reverse();
        for method in [RankingMethod::Weighted, RankingMethod::Maxseg, RankingMethod::Maxsim] {
            prop_assert_eq!(rank(&hits, method), rank(&shuffled, method));
        }
    }

    #[test]
    fn culling_bound_and_largest_kept(sets in cell_sets(10, 48), psi in 0.0f64..=1.0) {
        let m = SparseBinaryMatrix::from_rows(48, sets).unwrap();
        let keep = cull_masks(&m, psi).unwrap();
        prop_assert!(keep[cull_order(&m)[0]]);
        for i in 0..m.nrows() {
            for j in i + 1..m.nrows() {
                if keep[i] && keep[j] {
                    prop_assert!(iou_sorted(m.row(i), m.row(j)) <= psi);
                }
            }
            // a dropped segment overlaps some kept one beyond psi
            if !keep[i] {
                prop_assert!((0..m.nrows()).any(|j| keep[j] && iou_sorted(m.row(i), m.row(j)) > psi));
            }
        }
    }

    #[test]
    fn pca_rows_unit_or_zero(data in prop::collection::vec(-1.0f32..1.0, 40 * 6), zero_row in 0usize..40) {
        let mut x = Matrix::from_vec(40, 6, data).unwrap();
        let model = pca_fit(&x, 3, false).unwrap();
        x.row_mut(zero_row).fill(0.0);
        let y = pca_transform_rows(&model, &x).unwrap();
        prop_assert_eq!(y.cols(), 3);
        prop_assert!(y.row(zero_row).iter().all(|&v| v == 0.0));
        for (i, row) in y.iter_rows().enumerate() {
            let n = l2_norm(row);
            prop_assert!(i == zero_row || n == 0.0 || (n - 1.0).abs() < 1e-5);
        }
    }

    #[test]
    fn kmeans_inertia_non_increasing(data in prop::collection::vec(-5.0f32..5.0, 60 * 3), seed in any::<u64>()) {
        let x = Matrix::from_vec(60, 3, data).unwrap();
        let fit = kmeans_fit(&x, &KMeansConfig::new(4, seed), VocabSource::Map).unwrap();
        for w in fit.inertia_history.windows(2) {
            prop_assert!(w[1] <= w[0] * (1.0 + 1e-12), "{:?}", fit.inertia_history);
        }
    }
}
