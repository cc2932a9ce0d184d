//! Per-image segment graphs and SuperSegment mask expansion.
//!
//! Segments are connected through a Delaunay triangulation of their pixel
//! centroids. A SuperSegment of order `o` is the union of a segment with
//! every segment within `o` graph hops, computed as the binarized product
//! `1((A + I)^o · M)` of the adjacency reach and the cell masks.

mod delaunay;
mod predicates;

pub use delaunay::{triangulate, Triangulation};
pub use predicates::{incircle, orient2d};

use std::collections::HashMap;

use crate::error::{Error, Result};
use crate::io::{RleMask, SegmentMaskSet};
use crate::matrix::{intersection_count, SparseBinaryMatrix};

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point {
    pub x: f64,
    pub y: f64,
}

impl Point {
    pub fn new(x: f64, y: f64) -> Self {
        Point { x, y }
    }
}

/// Symmetric segment adjacency (zero diagonal) plus the pixel centroids it
/// was built from.
#[derive(Debug, Clone, PartialEq)]
pub struct SegmentGraph {
    pub adjacency: SparseBinaryMatrix,
    pub centroids: Vec<Point>,
}

impl SegmentGraph {
    pub fn num_segments(&self) -> usize {
        self.adjacency.nrows()
    }

    pub fn edge_count(&self) -> usize {
        self.adjacency.rows().iter().map(Vec::len).sum::<usize>() / 2
    }

    pub fn neighbors(&self, s: usize) -> &[u32] {
        self.adjacency.row(s)
    }

    fn from_edges(n: usize, edges: impl IntoIterator<Item = (usize, usize)>, centroids: Vec<Point>) -> Self {
        let mut rows = vec![Vec::new(); n];
        for (i, j) in edges {
            if i != j {
                rows[i].push(j as u32);
                rows[j].push(i as u32);
            }
        }
        SegmentGraph {
            adjacency: SparseBinaryMatrix::from_rows(n, rows).expect("edge endpoints in range"),
            centroids,
        }
    }
}

/// SuperSegment masks on the feature grid.
#[derive(Debug, Clone, PartialEq)]
pub struct SuperSegmentMaskSet {
    pub masks: SparseBinaryMatrix,
    pub order: u32,
}

/// Mean pixel coordinate `(x = column, y = row)` of every segment.
pub fn centroids(masks: &SegmentMaskSet) -> Result<Vec<Point>> {
    let w = u64::from(masks.width);
    masks
        .segments
        .iter()
        .enumerate()
        .map(|(i, seg)| {
            if seg.is_empty() || w == 0 {
                return Err(Error::EmptySegment(i));
            }
            let (mut sx, mut sy, mut n) = (0u64, 0u64, 0u64);
            for &(start, len) in seg.runs() {
                for p in u64::from(start)..u64::from(start) + u64::from(len) {
                    sx += p % w;
                    sy += p / w;
                }
                n += u64::from(len);
            }
            Ok(Point::new(sx as f64 / n as f64, sy as f64 / n as f64))
        })
        .collect()
}

/// Segment graph from Delaunay edges between centroids.
///
/// Coincident centroids (e.g. duplicated masks) are triangulated once; the
/// copies are joined to each other and share the representative's
/// neighbors.
pub fn delaunay_adjacency(points: &[Point]) -> SegmentGraph {
    let mut rep_of: HashMap<(u64, u64), usize> = HashMap::new();
    let mut uniques: Vec<Point> = Vec::new();
    let mut members: Vec<Vec<usize>> = Vec::new();
    for (i, p) in points.iter().enumerate() {
        // normalize -0.0 so it coincides with 0.0
        let key = ((p.x + 0.0).to_bits(), (p.y + 0.0).to_bits());
        let u = *rep_of.entry(key).or_insert_with(|| {
            uniques.push(*p);
            members.push(Vec::new());
            uniques.len() - 1
        });
        members[u].push(i);
    }
    let tri = triangulate(&uniques);
    let mut edges = Vec::new();
    for group in &members {
        for (k, &i) in group.iter().enumerate() {
            for &j in &group[k + 1..] {
                edges.push((i, j));
            }
        }
    }
    for &(u, v) in &tri.edges {
        for &i in &members[u] {
            for &j in &members[v] {
                edges.push((i, j));
            }
        }
    }
    SegmentGraph::from_edges(points.len(), edges, points.to_vec())
}

/// Pools full-resolution masks onto a `grid_w x grid_h` cell grid. A cell is
/// set when any pixel mapping to it belongs to the segment.
pub fn downsample_masks(
    masks: &SegmentMaskSet,
    grid_w: usize,
    grid_h: usize,
) -> Result<SparseBinaryMatrix> {
    let (w, h) = (masks.width as usize, masks.height as usize);
    if grid_w == 0 || grid_h == 0 || grid_w > w || grid_h > h {
        return Err(Error::InvalidArgument(format!(
            "grid {grid_w}x{grid_h} does not fit image {w}x{h}"
        )));
    }
    let col_cell: Vec<u32> = (0..w).map(|x| (x * grid_w / w) as u32).collect();
    let row_cell: Vec<u32> = (0..h).map(|y| (y * grid_h / h) as u32).collect();
    let mut out = SparseBinaryMatrix::new(grid_w * grid_h);
    let mut seen = vec![false; grid_w * grid_h];
    for (i, seg) in masks.segments.iter().enumerate() {
        let mut cells = Vec::new();
        for p in seg.pixels() {
            let (x, y) = (p as usize % w, p as usize / w);
            let c = row_cell[y] as usize * grid_w + col_cell[x] as usize;
            if !seen[c] {
                seen[c] = true;
                cells.push(c as u32);
            }
        }
        for &c in &cells {
            seen[c as usize] = false;
        }
        if cells.is_empty() {
            log::warn!("segment {i} is empty after downsampling");
        }
        out.push_row(cells)?;
    }
    Ok(out)
}

/// Binarized `(A + I)^order`: row `s` lists every segment within `order`
/// hops of `s`, including `s` itself.
pub fn reach_matrix(graph: &SegmentGraph, order: u32) -> SparseBinaryMatrix {
    let n = graph.num_segments();
    let with_self = SparseBinaryMatrix::from_rows(
        n,
        (0..n)
            .map(|s| {
                let mut r = graph.neighbors(s).to_vec();
                r.push(s as u32);
                r
            })
            .collect(),
    )
    .expect("adjacency indices in range");
    let mut reach = SparseBinaryMatrix::identity(n);
    for _ in 0..order {
        let next = with_self
            .binary_product(&reach)
            .expect("square operands");
        if next == reach {
            break;
        }
        reach = next;
    }
    reach
}

/// SuperSegment masks `1((A + I)^order · M)` for cell masks `M`.
pub fn expand_masks(
    graph: &SegmentGraph,
    masks: &SparseBinaryMatrix,
    order: u32,
) -> Result<SuperSegmentMaskSet> {
    if graph.num_segments() != masks.nrows() {
        return Err(Error::DimMismatch(format!(
            "graph has {} segments but {} masks were given",
            graph.num_segments(),
            masks.nrows()
        )));
    }
    let reach = reach_matrix(graph, order);
    Ok(SuperSegmentMaskSet {
        masks: reach.binary_product(masks)?,
        order,
    })
}

/// Uniform square patches tiling an image, in row-major patch order, with a
/// 4-neighborhood grid graph.
pub fn patchify(height: u32, width: u32, patch: u32) -> Result<(SegmentMaskSet, SegmentGraph)> {
    if patch == 0 {
        return Err(Error::InvalidArgument("patch size must be at least 1".into()));
    }
    let rows = height.div_ceil(patch);
    let cols = width.div_ceil(patch);
    let mut set = SegmentMaskSet::new(height, width);
    for pr in 0..rows {
        for pc in 0..cols {
            let (x0, x1) = (pc * patch, ((pc + 1) * patch).min(width));
            let (y0, y1) = (pr * patch, ((pr + 1) * patch).min(height));
            let runs: Vec<(u32, u32)> = (y0..y1).map(|y| (y * width + x0, x1 - x0)).collect();
            set.segments
                .push(RleMask::from_runs(runs, set.pixel_count())?);
        }
    }
    let id = |r: u32, c: u32| (r * cols + c) as usize;
    let mut edges = Vec::new();
    for r in 0..rows {
        for c in 0..cols {
            if c + 1 < cols {
                edges.push((id(r, c), id(r, c + 1)));
            }
            if r + 1 < rows {
                edges.push((id(r, c), id(r + 1, c)));
            }
        }
    }
    let cents = centroids(&set)?;
    let n = set.len();
    Ok((set, SegmentGraph::from_edges(n, edges, cents)))
}

/// A binary mask over a grid of `grid_len` cells, as sorted cell indices.
#[derive(Debug, Clone, Copy)]
pub struct CellMask<'a> {
    pub grid_len: usize,
    pub cells: &'a [u32],
}

impl SparseBinaryMatrix {
    pub fn mask(&self, i: usize) -> CellMask<'_> {
        CellMask {
            grid_len: self.ncols(),
            cells: self.row(i),
        }
    }
}

/// Intersection over union; two empty masks give 0.
pub fn mask_iou(a: CellMask<'_>, b: CellMask<'_>) -> Result<f64> {
    if a.grid_len != b.grid_len {
        return Err(Error::DimMismatch(format!(
            "masks on grids of {} and {} cells",
            a.grid_len, b.grid_len
        )));
    }
    Ok(iou_sorted(a.cells, b.cells))
}

pub fn iou_sorted(a: &[u32], b: &[u32]) -> f64 {
    let inter = intersection_count(a, b);
    let union = a.len() + b.len() - inter;
    if union == 0 {
        0.0
    } else {
        inter as f64 / union as f64
    }
}
