//! End-to-end acceptance suite. Runs without the libtest harness so every
//! criterion prints one PASS/FAIL line; the process exits non-zero when any
//! criterion fails.

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::panic;
use std::path::Path;
use std::sync::Arc;
use std::time::{Duration, Instant};

use rand::seq::SliceRandom;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use segvlad_core::aggregate::{
    aggregate_factorized, gap_descriptor, gem_descriptors, global_vlad_single_shot,
    sap_descriptors, vlad_descriptors,
};
use segvlad_core::evalbench::{
    local_feature_baseline, run_experiment, synth_generate, write_synth, LocalBaselineConfig,
    RunConfig, SynthSpec,
};
use segvlad_core::filtering::cull_masks;
use segvlad_core::io::load_manifest;
use segvlad_core::matrix::{Matrix, SparseBinaryMatrix};
use segvlad_core::retrieval::{
    build_index, rank_maxseg, rank_maxsim, rank_weighted, search, Hit, ImageRanking,
    SegmentHitList,
};
use segvlad_core::aggregate::{AggregationMethod, DescriptorSet, Provenance};
use segvlad_core::seggraph::{
    delaunay_adjacency, expand_masks, patchify, reach_matrix, triangulate, Point, SegmentGraph,
};
use segvlad_core::vocab::{VocabSource, Vocabulary};

type Outcome = Result<String, String>;

macro_rules! ensure {
    ($cond:expr, $($arg:tt)*) => {
        if !$cond {
            return Err(format!($($arg)*));
        }
    };
}

// ---------------------------------------------------------------- oracles

fn rand_subset(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<u32> {
    (0..n as u32).filter(|_| rng.random_bool(p)).collect()
}

fn graph_from_dense(adj: &[Vec<bool>]) -> SegmentGraph {
    let n = adj.len();
    SegmentGraph {
        adjacency: SparseBinaryMatrix::from_dense(n, adj).unwrap(),
        centroids: vec![Point::new(0.0, 0.0); n],
    }
}

fn random_graph(rng: &mut ChaCha8Rng, n: usize, p: f64) -> Vec<Vec<bool>> {
    let mut adj = vec![vec![false; n]; n];
    for i in 0..n {
        for j in i + 1..n {
            if rng.random_bool(p) {
                adj[i][j] = true;
                adj[j][i] = true;
            }
        }
    }
    adj
}

/// Segments within `order` hops by breadth-first search.
fn within_hops(adj: &[Vec<bool>], s: usize, order: u32) -> BTreeSet<usize> {
    let mut dist = vec![u32::MAX; adj.len()];
    dist[s] = 0;
    let mut queue = VecDeque::from([s]);
    while let Some(u) = queue.pop_front() {
        if dist[u] == order {
            continue;
        }
        for v in 0..adj.len() {
            if adj[u][v] && dist[v] == u32::MAX {
                dist[v] = dist[u] + 1;
                queue.push_back(v);
            }
        }
    }
    (0..adj.len()).filter(|&v| dist[v] != u32::MAX).collect()
}

fn oracle_supersegments(adj: &[Vec<bool>], masks: &[Vec<u32>], order: u32) -> Vec<Vec<u32>> {
    (0..masks.len())
        .map(|s| {
            let cells: BTreeSet<u32> = within_hops(adj, s, order)
                .into_iter()
                .flat_map(|t| masks[t].iter().copied())
                .collect();
            cells.into_iter().collect()
        })
        .collect()
}

fn normalize(v: &mut [f64]) {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter_mut().for_each(|x| *x /= n);
    }
}

fn nearest_center(x: &[f32], centers: &[Vec<f32>]) -> usize {
    let mut best = (f64::INFINITY, 0);
    for (k, c) in centers.iter().enumerate() {
        let d: f64 = x
            .iter()
            .zip(c)
            .map(|(&a, &b)| (f64::from(a) - f64::from(b)).powi(2))
            .sum();
        if d < best.0 {
            best = (d, k);
        }
    }
    best.1
}

fn oracle_vlad(cells: &[u32], feats: &[Vec<f32>], centers: &[Vec<f32>]) -> Vec<f64> {
    let d = feats.first().map_or(0, Vec::len);
    let mut v = vec![0.0; centers.len() * d];
    for &c in cells {
        let x = &feats[c as usize];
        let k = nearest_center(x, centers);
        for j in 0..d {
            v[k * d + j] += f64::from(x[j]) - f64::from(centers[k][j]);
        }
    }
    for block in v.chunks_mut(d) {
        normalize(block);
    }
    normalize(&mut v);
    v
}

fn oracle_gem(cells: &[u32], feats: &[Vec<f32>], p: f64) -> Vec<f64> {
    let d = feats[0].len();
    let mut v = vec![0.0; d];
    if !cells.is_empty() {
        for (j, out) in v.iter_mut().enumerate() {
            let m = cells
                .iter()
                .map(|&c| f64::from(feats[c as usize][j]).powf(p))
                .sum::<f64>()
                / cells.len() as f64;
            *out = m.signum() * m.abs().powf(1.0 / p);
        }
    }
    normalize(&mut v);
    v
}

fn oracle_sum(cells: &[u32], feats: &[Vec<f32>]) -> Vec<f64> {
    let mut v = vec![0.0; feats[0].len()];
    for &c in cells {
        for (a, &x) in v.iter_mut().zip(&feats[c as usize]) {
            *a += f64::from(x);
        }
    }
    v
}

/// Largest elementwise error relative to the largest reference magnitude.
fn rel_err(got: &[f32], want: &[f64]) -> f64 {
    let scale = want.iter().fold(0.0f64, |m, x| m.max(x.abs()));
    let err = got
        .iter()
        .zip(want)
        .fold(0.0f64, |m, (&g, &w)| m.max((f64::from(g) - w).abs()));
    if scale == 0.0 {
        err
    } else {
        err / scale
    }
}

// ---------------------------------------------------------------- criteria

fn factorized_aggregation() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(1);
    let mut worst = 0.0f64;
    let mut checked = 0usize;
    for _ in 0..200 {
        let s = rng.random_range(1..=8);
        let n = rng.random_range(1..=64);
        let d = rng.random_range(1..=8);
        let c = rng.random_range(1..=4);
        let order = rng.random_range(0..=3);
        let adj = random_graph(&mut rng, s, 0.35);
        let density = rng.random_range(0.02..0.4);
        let masks: Vec<Vec<u32>> = (0..s).map(|_| rand_subset(&mut rng, n, density)).collect();
        let feats: Vec<Vec<f32>> = (0..n)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let centers: Vec<Vec<f32>> = (0..c)
            .map(|_| (0..d).map(|_| rng.random_range(-1.0f32..1.0)).collect())
            .collect();
        let t = Matrix::from_rows(&feats).unwrap();
        let vocab =
            Vocabulary::new(Matrix::from_rows(&centers).unwrap(), VocabSource::Map, 0).unwrap();
        let m = SparseBinaryMatrix::from_rows(n, masks.clone()).unwrap();
        let graph = graph_from_dense(&adj);
        let ss = expand_masks(&graph, &m, order).unwrap().masks;
        let want_ss = oracle_supersegments(&adj, &masks, order);
        ensure!(ss.rows() == want_ss.as_slice(), "SuperSegment cells differ from the hop oracle");

        let mut check = |name: &str, got: &Matrix, want: &[Vec<f64>]| -> Result<(), String> {
            ensure!(got.rows() == want.len(), "{name}: {} rows, want {}", got.rows(), want.len());
            for (i, w) in want.iter().enumerate() {
                let e = rel_err(got.row(i), w);
                worst = worst.max(e);
                checked += 1;
                ensure!(e <= 1e-6, "{name} row {i}: relative error {e:.3e}");
            }
            Ok(())
        };

        let raw = aggregate_factorized(&reach_matrix(&graph, order), &m, &t).unwrap();
        let want: Vec<Vec<f64>> = want_ss.iter().map(|r| oracle_sum(r, &feats)).collect();
        check("factorized sum", &raw, &want)?;

        let vlad = vlad_descriptors(&ss, &t, &vocab).unwrap();
        let want: Vec<Vec<f64>> = want_ss.iter().map(|r| oracle_vlad(r, &feats, &centers)).collect();
        check("segvlad", &vlad, &want)?;

        let sap = sap_descriptors(&ss, &t).unwrap();
        let want: Vec<Vec<f64>> = want_ss.iter().map(|r| oracle_gem(r, &feats, 1.0)).collect();
        check("sap", &sap, &want)?;

        for p in [1.0, 3.0] {
            let gem = gem_descriptors(&ss, &t, p).unwrap();
            let want: Vec<Vec<f64>> = want_ss.iter().map(|r| oracle_gem(r, &feats, p)).collect();
            check(&format!("gem p={p}"), &gem, &want)?;
        }

        let all: Vec<u32> = (0..n as u32).collect();
        let gap = Matrix::from_vec(1, d, gap_descriptor(&t)).unwrap();
        check("gap", &gap, &[oracle_gem(&all, &feats, 1.0)])?;

        let global = Matrix::from_vec(1, c * d, global_vlad_single_shot(&t, &vocab).unwrap()).unwrap();
        check("global_vlad", &global, &[oracle_vlad(&all, &feats, &centers)])?;
    }
    Ok(format!("200 instances, {checked} descriptors, worst relative error {worst:.2e}"))
}

fn expansion_semantics() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    for case in 0..100 {
        let s = rng.random_range(1..=12);
        let n = rng.random_range(1..=100);
        let masks: Vec<Vec<u32>> = (0..s).map(|_| rand_subset(&mut rng, n, 0.1)).collect();
        let m = SparseBinaryMatrix::from_rows(n, masks).unwrap();
        let adj = random_graph(&mut rng, s, 0.3);
        let graph = graph_from_dense(&adj);
        let zero = expand_masks(&graph, &m, 0).unwrap().masks;
        ensure!(zero == m, "case {case}: order 0 is not the identity");
        let mut prev = zero;
        for o in 1..=3 {
            let cur = expand_masks(&graph, &m, o).unwrap().masks;
            for i in 0..s {
                let hi: BTreeSet<u32> = cur.row(i).iter().copied().collect();
                ensure!(
                    prev.row(i).iter().all(|c| hi.contains(c)),
                    "case {case}: row {i} at order {} not inside order {o}",
                    o - 1
                );
            }
            prev = cur;
        }
    }
    // chain 0-1-...-(n-1) with singleton masks: row s spans [s-o, s+o]
    for n in 1..=9usize {
        let mut adj = vec![vec![false; n]; n];
        for i in 1..n {
            adj[i - 1][i] = true;
            adj[i][i - 1] = true;
        }
        let graph = graph_from_dense(&adj);
        let m = SparseBinaryMatrix::identity(n);
        for o in 0..=n as u32 + 1 {
            let ss = expand_masks(&graph, &m, o).unwrap().masks;
            for s in 0..n {
                let lo = s.saturating_sub(o as usize);
                let hi = (s + o as usize).min(n - 1);
                let want: Vec<u32> = (lo as u32..=hi as u32).collect();
                ensure!(ss.row(s) == want.as_slice(), "chain n={n} o={o} row {s}: {:?}", ss.row(s));
            }
        }
    }
    Ok("100 random sets: order 0 identity, nesting over orders 0..3; chain closed forms n<=9".into())
}

fn orient(a: Point, b: Point, c: Point) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

/// Andrew's monotone chain; number of strict hull vertices.
fn hull_size(pts: &[Point]) -> usize {
    let mut p = pts.to_vec();
    p.sort_by(|a, b| a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y)));
    let chain = |iter: &mut dyn Iterator<Item = Point>| {
        let mut h: Vec<Point> = Vec::new();
        for q in iter {
            while h.len() >= 2 && orient(h[h.len() - 2], h[h.len() - 1], q) <= 0.0 {
                h.pop();
            }
            h.push(q);
        }
        h.len() - 1
    };
    chain(&mut p.iter().copied()) + chain(&mut p.iter().rev().copied())
}

/// Signed in-circle determinant for counter-clockwise `a, b, c`; positive
/// when `d` is inside.
fn in_circle(a: Point, b: Point, c: Point, d: Point) -> f64 {
    let r = |p: Point| {
        let (x, y) = (p.x - d.x, p.y - d.y);
        (x, y, x * x + y * y)
    };
    let (ax, ay, aw) = r(a);
    let (bx, by, bw) = r(b);
    let (cx, cy, cw) = r(c);
    ax * (by * cw - bw * cy) - ay * (bx * cw - bw * cx) + aw * (bx * cy - by * cx)
}

fn general_position(rng: &mut ChaCha8Rng, n: usize) -> Vec<Point> {
    'retry: loop {
        let pts: Vec<Point> = (0..n)
            .map(|_| Point::new(rng.random_range(0.0..1000.0), rng.random_range(0.0..1000.0)))
            .collect();
        for i in 0..n {
            for j in i + 1..n {
                for k in j + 1..n {
                    if orient(pts[i], pts[j], pts[k]).abs() < 1e-3 {
                        continue 'retry;
                    }
                }
            }
        }
        return pts;
    }
}

fn delaunay_correctness() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut triangles = 0usize;
    for case in 0..500 {
        let n = rng.random_range(3..=12);
        let pts = general_position(&mut rng, n);
        let tri = triangulate(&pts);
        let h = hull_size(&pts);
        ensure!(
            tri.edges.len() == 3 * n - 3 - h,
            "case {case}: {} edges, want 3n-3-h = {}",
            tri.edges.len(),
            3 * n - 3 - h
        );
        ensure!(tri.triangles.len() == 2 * n - 2 - h, "case {case}: triangle count");
        for t in &tri.triangles {
            let (a, b, c) = (pts[t[0]], pts[t[1]], pts[t[2]]);
            ensure!(orient(a, b, c) > 0.0, "case {case}: triangle {t:?} not counter-clockwise");
            for (q, &p) in pts.iter().enumerate() {
                if t.contains(&q) {
                    continue;
                }
                let det = in_circle(a, b, c, p);
                ensure!(det <= 1e-6, "case {case}: point {q} inside circumcircle of {t:?} ({det})");
            }
            triangles += 1;
        }
        // the adjacency built on top carries exactly the triangulation edges
        let g = delaunay_adjacency(&pts);
        ensure!(g.edge_count() == tri.edges.len(), "case {case}: adjacency edge count");
    }
    Ok(format!("500 point sets, {triangles} triangles empty-circumcircle, edges = 3n-3-h"))
}

fn unit_row(rng: &mut ChaCha8Rng, d: usize) -> Vec<f32> {
    let mut v: Vec<f64> = (0..d).map(|_| rng.random_range(-1.0..1.0)).collect();
    normalize(&mut v);
    v.into_iter().map(|x| x as f32).collect()
}

fn search_vs_scan() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    let mut ties = 0usize;
    let mut compared = 0usize;
    for case in 0..50 {
        let r = if case % 10 == 0 { 10_000 } else { rng.random_range(1..=3000) };
        let d = rng.random_range(2..=64);
        let images = rng.random_range(1..=40).min(r);
        let mut rows: Vec<Vec<f32>> = Vec::with_capacity(r);
        for i in 0..r {
            // a quarter of the rows repeat an earlier one to force exact ties
            if i > 0 && rng.random_bool(0.25) {
                let j = rng.random_range(0..i);
                rows.push(rows[j].clone());
            } else {
                rows.push(unit_row(&mut rng, d));
            }
        }
        let mut order: Vec<usize> = (0..r).collect();
        order.shuffle(&mut rng);
        let provenance: Vec<Provenance> = order
            .iter()
            .map(|&i| Provenance {
                image_id: format!("img{:03}", i % images),
                segment_id: (i / images) as u32,
                order: 0,
                method: AggregationMethod::Segvlad,
            })
            .collect();
        let shuffled: Vec<&Vec<f32>> = order.iter().map(|&i| &rows[i]).collect();
        let set = DescriptorSet::new(Matrix::from_rows(&shuffled).unwrap(), provenance).unwrap();
        let index = build_index(&[set]).unwrap();

        let nq = 20;
        let qrows: Vec<Vec<f32>> = (0..nq)
            .map(|q| if q % 4 == 0 { rows[rng.random_range(0..r)].clone() } else { unit_row(&mut rng, d) })
            .collect();
        let k = rng.random_range(1..=60);
        let got = search(&index, &Matrix::from_rows(&qrows).unwrap(), k).unwrap();
        ensure!(got.segments.len() == nq, "case {case}: {} hit lists", got.segments.len());

        // exhaustive scan over the index rows, each labelled by its provenance
        let images_sorted: Vec<String> = {
            let s: BTreeSet<String> = index.provenance().iter().map(|p| p.image_id.clone()).collect();
            s.into_iter().collect()
        };
        ensure!(index.images() == images_sorted.as_slice(), "case {case}: image table");
        for w in index.provenance().windows(2) {
            ensure!(
                (&w[0].image_id, w[0].segment_id) < (&w[1].image_id, w[1].segment_id),
                "case {case}: index rows not in (image, segment) order"
            );
        }
        for (q, qv) in qrows.iter().enumerate() {
            let mut scan: Vec<(f64, usize)> = (0..index.len())
                .map(|row| {
                    let s: f64 = qv
                        .iter()
                        .zip(index.matrix().row(row))
                        .map(|(&a, &b)| f64::from(a) * f64::from(b))
                        .sum();
                    (s, row)
                })
                .collect();
            scan.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
            scan.truncate(k);
            let hits = &got.segments[q];
            ensure!(hits.len() == scan.len(), "case {case} query {q}: {} hits", hits.len());
            for (h, &(s, row)) in hits.iter().zip(&scan) {
                ensure!(
                    h.row_id as usize == row && h.similarity == s,
                    "case {case} query {q}: hit ({}, {}) vs scan ({row}, {s})",
                    h.row_id,
                    h.similarity
                );
                let img = &index.provenance()[row].image_id;
                ensure!(&got.images[h.image as usize] == img, "case {case}: hit image label");
            }
            ties += scan.windows(2).filter(|w| w[0].0 == w[1].0).count();
            compared += 1;
        }
    }
    ensure!(ties > 0, "no tied scores were exercised");
    Ok(format!("50 indices (R up to 10000), {compared} queries, {ties} tied adjacent hits"))
}

fn random_hits(rng: &mut ChaCha8Rng, scale: f64) -> SegmentHitList {
    let n_images = rng.random_range(1..=12);
    let images: Arc<[String]> = (0..n_images).map(|i| format!("db{i:02}")).collect();
    let n_rows = 40u32;
    let image_of_row: Vec<u32> = (0..n_rows).map(|_| rng.random_range(0..n_images) as u32).collect();
    let n_seg = rng.random_range(0..=10);
    let segments = (0..n_seg)
        .map(|_| {
            let k = rng.random_range(0..=8);
            let mut rows: Vec<u32> = (0..n_rows).collect();
            rows.shuffle(rng);
            let mut hits: Vec<Hit> = rows[..k]
                .iter()
                .map(|&row| {
                    Hit {
                        row_id: row,
                        image: image_of_row[row as usize],
                        // dyadic values: sums are exact in any order
                        similarity: f64::from(rng.random_range(1..=32u32)) / 32.0 * scale,
                    }
                })
                .collect();
            hits.shuffle(rng);
            hits
        })
        .collect();
    SegmentHitList { images, segments }
}

/// Expected ranking from per-image scores: descending primary, then
/// descending secondary, then image table order.
fn oracle_ranking(images: &[String], scores: BTreeMap<u32, (f64, f64)>) -> Vec<(String, f64)> {
    let mut v: Vec<(u32, f64, f64)> = scores.into_iter().map(|(i, (a, b))| (i, a, b)).collect();
    v.sort_by(|x, y| y.1.total_cmp(&x.1).then(y.2.total_cmp(&x.2)).then(x.0.cmp(&y.0)));
    v.into_iter().map(|(i, a, _)| (images[i as usize].clone(), a)).collect()
}

fn as_pairs(r: &ImageRanking) -> Vec<(String, f64)> {
    r.entries.iter().map(|e| (e.image_id.clone(), e.score)).collect()
}

fn ranking_oracles() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    for case in 0..200 {
        let hits = random_hits(&mut rng, 1.0);
        let mut sum: BTreeMap<u32, f64> = BTreeMap::new();
        let mut max: BTreeMap<u32, f64> = BTreeMap::new();
        for h in hits.segments.iter().flatten() {
            *sum.entry(h.image).or_default() += h.similarity;
            let m = max.entry(h.image).or_insert(f64::NEG_INFINITY);
            *m = m.max(h.similarity);
        }
        let mut count: BTreeMap<u32, f64> = BTreeMap::new();
        for seg in &hits.segments {
            let best = seg.iter().fold(None::<&Hit>, |b, h| match b {
                Some(b) if b.similarity > h.similarity
                    || (b.similarity == h.similarity && b.row_id < h.row_id) => Some(b),
                _ => Some(h),
            });
            if let Some(b) = best {
                *count.entry(b.image).or_default() += 1.0;
            }
        }
        let want_w = oracle_ranking(&hits.images, sum.iter().map(|(&i, &s)| (i, (s, 0.0))).collect());
        let want_s = oracle_ranking(&hits.images, count.iter().map(|(&i, &c)| (i, (c, sum[&i]))).collect());
        let want_m = oracle_ranking(&hits.images, max.iter().map(|(&i, &m)| (i, (m, 0.0))).collect());
        ensure!(as_pairs(&rank_weighted(&hits)) == want_w, "case {case}: weighted ranking");
        ensure!(as_pairs(&rank_maxseg(&hits)) == want_s, "case {case}: maxseg ranking");
        ensure!(as_pairs(&rank_maxsim(&hits)) == want_m, "case {case}: maxsim ranking");

        for factor in [0.25, 2.0, 3.0, 1000.0] {
            let mut scaled = hits.clone();
            scaled.segments.iter_mut().flatten().for_each(|h| h.similarity *= factor);
            for (name, f) in [
                ("weighted", rank_weighted as fn(&SegmentHitList) -> ImageRanking),
                ("maxseg", rank_maxseg),
                ("maxsim", rank_maxsim),
            ] {
                let a = f(&hits);
                let b = f(&scaled);
                let ids = |r: &ImageRanking| r.entries.iter().map(|e| e.image_id.clone()).collect::<Vec<_>>();
                ensure!(ids(&a) == ids(&b), "case {case}: {name} order changes under scaling by {factor}");
            }
        }
    }
    Ok("200 hit lists match sum/count/max oracles; order invariant under scaling".into())
}

fn random_supersegments(rng: &mut ChaCha8Rng) -> SparseBinaryMatrix {
    let (gw, gh) = (16u32, 16u32);
    let n = rng.random_range(2..=14);
    let rows = (0..n)
        .map(|_| {
            let (w, h) = (rng.random_range(2..=9), rng.random_range(2..=9));
            let (x0, y0) = (rng.random_range(0..=gw - w), rng.random_range(0..=gh - h));
            let mut cells: Vec<u32> = (y0..y0 + h)
                .flat_map(|y| (x0..x0 + w).map(move |x| y * gw + x))
                .collect();
            cells.sort_unstable();
            cells
        })
        .collect();
    SparseBinaryMatrix::from_rows((gw * gh) as usize, rows).unwrap()
}

fn iou(a: &[u32], b: &[u32]) -> f64 {
    let sa: BTreeSet<u32> = a.iter().copied().collect();
    let inter = b.iter().filter(|c| sa.contains(c)).count();
    let union = a.len() + b.len() - inter;
    if union == 0 { 0.0 } else { inter as f64 / union as f64 }
}

fn kept_set(keep: &[bool]) -> BTreeSet<usize> {
    keep.iter().enumerate().filter(|(_, &k)| k).map(|(i, _)| i).collect()
}

/// Three masks on which greedy culling keeps {A, C} at 0.3 but {A, B} at 0.5.
fn greedy_counterexample() -> (SparseBinaryMatrix, f64, f64) {
    let a: Vec<u32> = (0..5).chain(20..25).collect();
    let b: Vec<u32> = (0..9).collect();
    let c: Vec<u32> = (3..11).collect();
    (SparseBinaryMatrix::from_rows(32, vec![a, b, c]).unwrap(), 0.3, 0.5)
}

fn iou_culling() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let grid = [0.0, 0.1, 0.2, 0.3, 0.4, 0.5, 0.6, 0.7, 0.8, 0.9, 1.0];
    let mut violations: Vec<String> = Vec::new();
    let mut pairs = 0usize;
    for case in 0..100 {
        let ss = random_supersegments(&mut rng);
        let kept: Vec<BTreeSet<usize>> = grid
            .iter()
            .map(|&psi| kept_set(&cull_masks(&ss, psi).unwrap()))
            .collect();
        for (&psi, k) in grid.iter().zip(&kept) {
            ensure!(!k.is_empty(), "case {case}: nothing kept at psi={psi}");
            for &i in k {
                for &j in k {
                    if i < j {
                        let v = iou(ss.row(i), ss.row(j));
                        ensure!(v <= psi, "case {case}: kept pair ({i},{j}) IOU {v:.3} > psi={psi}");
                        pairs += 1;
                    }
                }
            }
        }
        ensure!(kept[grid.len() - 1].len() == ss.nrows(), "case {case}: psi=1 dropped segments");
        for a in 0..grid.len() {
            for b in a + 1..grid.len() {
                if !kept[a].is_subset(&kept[b]) {
                    violations.push(format!("case {case} psi {}->{}", grid[a], grid[b]));
                }
            }
        }
    }
    let bound = format!("pairwise IOU <= psi holds ({pairs} kept pairs), psi=1 keeps all");
    let (ss, lo, hi) = greedy_counterexample();
    let (k_lo, k_hi) = (
        kept_set(&cull_masks(&ss, lo).unwrap()),
        kept_set(&cull_masks(&ss, hi).unwrap()),
    );
    ensure!(
        violations.is_empty() && k_lo.is_subset(&k_hi),
        "{bound}; psi monotonicity violated: kept(psi1) not inside kept(psi2) in {} of {} \
         threshold pairs (first: {}); 3-mask case keeps {k_lo:?} at {lo} but {k_hi:?} at {hi}",
        violations.len(),
        100 * grid.len() * (grid.len() - 1) / 2,
        violations.first().map_or("-", String::as_str)
    );
    Ok(format!("{bound}; kept sets nested across {} thresholds", grid.len()))
}

fn patch_counts() -> Outcome {
    let mut got = Vec::new();
    for (p, want) in [(16u32, 256usize), (32, 64), (64, 16), (128, 4)] {
        let (masks, graph) = patchify(256, 256, p).map_err(|e| e.to_string())?;
        ensure!(masks.len() == want, "patch {p}: {} segments, want {want}", masks.len());
        ensure!(graph.num_segments() == want, "patch {p}: graph size");
        got.push(format!("{p}px={}", masks.len()));
    }
    Ok(format!("256x256: {}", got.join(" ")))
}

struct Synth {
    _dir: tempfile::TempDir,
    manifest: segvlad_core::io::DatasetManifest,
    gt: segvlad_core::evalbench::GroundTruth,
}

fn synth_dataset() -> Synth {
    let ds = synth_generate(&SynthSpec::default()).unwrap();
    let dir = tempfile::tempdir().unwrap();
    let path = write_synth(&ds, dir.path()).unwrap();
    Synth {
        manifest: load_manifest(&path).unwrap(),
        gt: ds.ground_truth(),
        _dir: dir,
    }
}

fn run(s: &Synth, cfg: &RunConfig) -> segvlad_core::evalbench::RecallReport {
    run_experiment(&s.manifest, &s.gt, cfg, None).unwrap().report
}

fn synthetic_separation(s: &Synth) -> Outcome {
    let start = Instant::now();
    let seg = run(s, &RunConfig { order: 1, ..RunConfig::default() });
    let global = run(
        s,
        &RunConfig {
            order: 0,
            method: AggregationMethod::GlobalVlad,
            ..RunConfig::default()
        },
    );
    let local = local_feature_baseline(&s.manifest, &s.gt, &LocalBaselineConfig::default()).unwrap();
    let elapsed = start.elapsed();
    let (r_seg, r_glob, r_loc) = (seg.at(1).unwrap(), global.at(1).unwrap(), local.at(1).unwrap());
    let summary = format!(
        "R@1 segvlad={r_seg:.3} global_vlad={r_glob:.3} local={r_loc:.3} in {:.1}s",
        elapsed.as_secs_f64()
    );
    ensure!(r_seg == 1.0, "SegVLAD R@1 below 1: {summary}");
    ensure!(r_glob <= 0.7, "GlobalVLAD R@1 above 0.7: {summary}");
    ensure!(r_loc <= r_seg, "local baseline beats SegVLAD: {summary}");
    ensure!(elapsed < Duration::from_secs(60), "too slow: {summary}");
    Ok(summary)
}

fn order_trend(s: &Synth) -> Outcome {
    let r0 = run(s, &RunConfig { order: 0, ..RunConfig::default() }).at(5).unwrap();
    let r1 = run(s, &RunConfig { order: 1, ..RunConfig::default() }).at(5).unwrap();
    ensure!(r1 >= r0, "R@5 o=1 {r1:.3} < o=0 {r0:.3}");
    Ok(format!("R@5 o=0 {r0:.3}, o=1 {r1:.3}"))
}

fn pipeline_files(out: &Path) -> Vec<u8> {
    let ds = synth_generate(&SynthSpec::default()).unwrap();
    let manifest = load_manifest(write_synth(&ds, out.join("data")).unwrap()).unwrap();
    let cfg = RunConfig {
        order: 1,
        pca_dim: Some(64),
        iou_threshold: Some(0.4),
        seed: 7,
        ..RunConfig::default()
    };
    let res = run_experiment(&manifest, &ds.ground_truth(), &cfg, None).unwrap();
    res.report.save(out.join("report")).unwrap();
    res.index.save(out.join("index")).unwrap();
    res.cull.unwrap().save(out.join("cull.json")).unwrap();
    let mut bytes = Vec::new();
    for f in ["report.json", "report.csv", "report.queries.csv", "cull.json", "index.svt", "index.json"] {
        bytes.extend(std::fs::read(out.join(f)).unwrap());
    }
    bytes
}

fn determinism() -> Outcome {
    let (a, b) = (tempfile::tempdir().unwrap(), tempfile::tempdir().unwrap());
    let first = pipeline_files(a.path());
    let second = pipeline_files(b.path());
    ensure!(first == second, "reports differ between identical runs");
    Ok(format!("{} bytes of reports, index and cull output identical", first.len()))
}

// ---------------------------------------------------------------- driver

fn main() {
    let synth = synth_dataset();
    let criteria: Vec<(&str, Option<Duration>, Box<dyn Fn() -> Outcome + '_>)> = vec![
        ("factorized aggregation = naive oracle", Some(Duration::from_secs(10)), Box::new(factorized_aggregation)),
        ("SuperSegment expansion semantics", Some(Duration::from_secs(5)), Box::new(expansion_semantics)),
        ("Delaunay correctness", Some(Duration::from_secs(30)), Box::new(delaunay_correctness)),
        ("exact search = exhaustive scan", Some(Duration::from_secs(20)), Box::new(search_vs_scan)),
        ("rankings = accumulation oracles", Some(Duration::from_secs(5)), Box::new(ranking_oracles)),
        ("IOU culling", None, Box::new(iou_culling)),
        ("patch baseline segment counts", None, Box::new(patch_counts)),
        ("synthetic separation", Some(Duration::from_secs(60)), Box::new(|| synthetic_separation(&synth))),
        ("order ablation direction", None, Box::new(|| order_trend(&synth))),
        ("determinism", None, Box::new(determinism)),
    ];
    let mut failed = 0;
    for (name, limit, f) in criteria {
        let start = Instant::now();
        let outcome = panic::catch_unwind(panic::AssertUnwindSafe(|| f()))
            .unwrap_or_else(|_| Err("panicked".into()));
        let elapsed = start.elapsed();
        let outcome = match (outcome, limit) {
            (Ok(_), Some(l)) if elapsed > l => Err(format!("took {elapsed:.1?}, limit {l:?}")),
            (o, _) => o,
        };
        match outcome {
            Ok(msg) => println!("PASS  {name}: {msg} [{elapsed:.2?}]"),
            Err(msg) => {
                failed += 1;
                println!("FAIL  {name}: {msg} [{elapsed:.2?}]");
            }
        }
    }
    if failed > 0 {
        println!("{failed} acceptance criteria failed");
        std::process::exit(1);
    }
    println!("all acceptance criteria passed");
}
