//! Incremental Bowyer-Watson triangulation.
//!
//! The unbounded exterior is covered by ghost triangles `(a, b, GHOST)` where
//! `a -> b` runs clockwise along the hull, so the exterior lies to the left.
//! A point conflicts with a ghost triangle when it is strictly left of
//! `a -> b`, or on the open segment `ab`. This removes the need for a
//! super-triangle and keeps the hull complete.

use std::cmp::Ordering;
use std::collections::{BTreeMap, HashSet};

use super::predicates::{incircle, orient2d};
use super::Point;

const GHOST: usize = usize::MAX;

#[derive(Debug, Clone, PartialEq, Eq, Default)]
pub struct Triangulation {
    /// Counter-clockwise triangles over input point indices.
    pub triangles: Vec<[usize; 3]>,
    /// Undirected edges `(i, j)` with `i < j`, sorted.
    pub edges: Vec<(usize, usize)>,
    /// Points on the convex hull boundary, sorted.
    pub hull: Vec<usize>,
}

fn lex(a: Point, b: Point) -> Ordering {
    a.x.total_cmp(&b.x).then(a.y.total_cmp(&b.y))
}

/// Delaunay triangulation of distinct points.
///
/// Fewer than three points, or all points on one line, yield no triangles
/// and a chain of edges in coordinate order. Cocircular configurations are
/// resolved by preferring the diagonal with the smaller sorted index pair.
pub fn triangulate(points: &[Point]) -> Triangulation {
    let mut order: Vec<usize> = (0..points.len()).collect();
    order.sort_by(|&i, &j| lex(points[i], points[j]).then(i.cmp(&j)));

    let first_turn = (2..order.len()).find(|&k| {
        orient2d(points[order[0]], points[order[1]], points[order[k]]) != Ordering::Equal
    });
    let Some(k) = first_turn else {
        let edges = order
            .windows(2)
            .map(|w| (w[0].min(w[1]), w[0].max(w[1])))
            .collect::<Vec<_>>();
        let mut edges = edges;
        edges.sort_unstable();
        let mut hull = order.clone();
        hull.sort_unstable();
        return Triangulation {
            triangles: Vec::new(),
            edges,
            hull,
        };
    };

    let mut bw = BowyerWatson::new(points, order[0], order[1], order[k]);
    for (pos, &v) in order.iter().enumerate().skip(2) {
        if pos != k {
            bw.insert(v);
        }
    }
    bw.finish()
}

struct BowyerWatson<'a> {
    points: &'a [Point],
    tris: Vec<[usize; 3]>,
}

impl<'a> BowyerWatson<'a> {
    fn new(points: &'a [Point], a: usize, b: usize, c: usize) -> Self {
        let (a, b, c) = if orient2d(points[a], points[b], points[c]) == Ordering::Greater {
            (a, b, c)
        } else {
            (a, c, b)
        };
        BowyerWatson {
            points,
            tris: vec![[a, b, c], [b, a, GHOST], [c, b, GHOST], [a, c, GHOST]],
        }
    }

    fn conflicts(&self, t: &[usize; 3], v: usize) -> bool {
        let p = self.points[v];
        if t[2] == GHOST {
            let (a, b) = (self.points[t[0]], self.points[t[1]]);
            match orient2d(a, b, p) {
                Ordering::Greater => true,
                Ordering::Less => false,
                Ordering::Equal => strictly_between(a, b, p),
            }
        } else {
            incircle(self.points[t[0]], self.points[t[1]], self.points[t[2]], p)
                == Ordering::Greater
        }
    }

    fn insert(&mut self, v: usize) {
        let (bad, keep): (Vec<[usize; 3]>, Vec<[usize; 3]>) =
            self.tris.iter().partition(|t| self.conflicts(t, v));
        debug_assert!(!bad.is_empty(), "point {v} conflicts with nothing");
        let directed: HashSet<(usize, usize)> = bad
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .collect();
        let mut tris = keep;
        for t in &bad {
            for (a, b) in [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])] {
                if directed.contains(&(b, a)) {
                    continue;
                }
                tris.push(if a == GHOST {
                    [b, v, GHOST]
                } else if b == GHOST {
                    [v, a, GHOST]
                } else {
                    [a, b, v]
                });
            }
        }
        self.tris = tris;
    }

    fn finish(self) -> Triangulation {
        let mut hull: Vec<usize> = self
            .tris
            .iter()
            .filter(|t| t[2] == GHOST)
            .flat_map(|t| [t[0], t[1]])
            .collect();
        hull.sort_unstable();
        hull.dedup();
        let mut triangles: Vec<[usize; 3]> =
            self.tris.into_iter().filter(|t| t[2] != GHOST).collect();
        resolve_cocircular(self.points, &mut triangles);
        let mut edges: Vec<(usize, usize)> = triangles
            .iter()
            .flat_map(|t| [(t[0], t[1]), (t[1], t[2]), (t[2], t[0])])
            .map(|(a, b)| (a.min(b), a.max(b)))
            .collect();
        edges.sort_unstable();
        edges.dedup();
        for t in triangles.iter_mut() {
            canonical_rotation(t);
        }
        triangles.sort_unstable();
        Triangulation {
            triangles,
            edges,
            hull,
        }
    }
}

fn strictly_between(a: Point, b: Point, p: Point) -> bool {
    let inside = |lo: f64, hi: f64, v: f64| (lo < v && v < hi) || (hi < v && v < lo);
    if a.x != b.x {
        inside(a.x, b.x, p.x)
    } else {
        inside(a.y, b.y, p.y)
    }
}

fn canonical_rotation(t: &mut [usize; 3]) {
    let m = (0..3).min_by_key(|&i| t[i]).unwrap();
    t.rotate_left(m);
}

/// Flips interior edges whose two triangles are cocircular until every such
/// edge is the smaller of its two possible diagonals. Each flip replaces an
/// edge by a strictly smaller one, so this terminates.
fn resolve_cocircular(points: &[Point], tris: &mut [[usize; 3]]) {
    loop {
        let mut by_edge: BTreeMap<(usize, usize), Vec<(usize, usize)>> = BTreeMap::new();
        for (ti, t) in tris.iter().enumerate() {
            for e in 0..3 {
                let (a, b) = (t[e], t[(e + 1) % 3]);
                by_edge.entry((a.min(b), a.max(b))).or_default().push((ti, e));
            }
        }
        let mut flipped = false;
        for (&(lo, hi), owners) in &by_edge {
            let [(t1, e1), (t2, e2)] = owners[..] else {
                continue;
            };
            let (a, b, c) = (tris[t1][e1], tris[t1][(e1 + 1) % 3], tris[t1][(e1 + 2) % 3]);
            let d = tris[t2][(e2 + 2) % 3];
            let diag = (c.min(d), c.max(d));
            if diag >= (lo, hi) {
                continue;
            }
            if incircle(points[a], points[b], points[c], points[d]) != Ordering::Equal {
                continue;
            }
            tris[t1] = [a, d, c];
            tris[t2] = [d, b, c];
            flipped = true;
            break;
        }
        if !flipped {
            return;
        }
    }
}
