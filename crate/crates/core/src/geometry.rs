//! Exact region-merging geometry: rectangle overlap, adjacency matrices,
//! connected components and convex hulls.
//!
//! All coordinates are integers and every predicate is evaluated exactly in
//! `i64`/`i128`; nothing here uses floating point.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::imaging::Rect;

/// Integer point in pixel-boundary coordinates.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Point {
    pub x: i64,
    pub y: i64,
}

impl Point {
    pub const fn new(x: i64, y: i64) -> Self {
        Point { x, y }
    }
}

impl From<(i64, i64)> for Point {
    fn from((x, y): (i64, i64)) -> Self {
        Point { x, y }
    }
}

/// Twice the signed area of triangle `(a, b, c)`; positive when `c` lies to
/// the left of `a -> b`.
#[inline]
pub fn orient(a: Point, b: Point, c: Point) -> i128 {
    let abx = i128::from(b.x - a.x);
    let aby = i128::from(b.y - a.y);
    let acx = i128::from(c.x - a.x);
    let acy = i128::from(c.y - a.y);
    abx * acy - aby * acx
}

/// Simple polygon with vertices in counter-clockwise order (positive signed area).
#[derive(Clone, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(try_from = "Vec<Point>", into = "Vec<Point>")]
pub struct Polygon {
    vertices: Vec<Point>,
}

impl Polygon {
    /// Validates vertex count, distinctness and orientation. Reverses
    /// clockwise input so the stored order is always counter-clockwise.
    pub fn new(mut vertices: Vec<Point>) -> Result<Self> {
        if vertices.len() < 3 {
            return Err(Error::Validation(format!(
                "polygon needs at least 3 vertices, got {}",
                vertices.len()
            )));
        }
        let n = vertices.len();
        for i in 0..n {
            if vertices[i] == vertices[(i + 1) % n] {
                return Err(Error::Validation("polygon has repeated consecutive vertices".into()));
            }
        }
        let area2 = signed_area2(&vertices);
        if area2 == 0 {
            return Err(Error::Validation("polygon has zero area".into()));
        }
        if area2 < 0 {
            vertices.reverse();
        }
        Ok(Polygon { vertices })
    }

    /// Axis-aligned rectangle as a polygon.
    pub fn from_rect(r: &Rect) -> Self {
        Polygon {
            vertices: r.corners().iter().map(|&c| c.into()).collect(),
        }
    }

    pub fn vertices(&self) -> &[Point] {
        &self.vertices
    }

    /// Twice the (positive) enclosed area.
    pub fn area2(&self) -> i128 {
        signed_area2(&self.vertices)
    }

    pub fn area(&self) -> f64 {
        self.area2() as f64 / 2.0
    }

    /// True when every turn is a strict left turn.
    pub fn is_strictly_convex(&self) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| {
            orient(
                self.vertices[i],
                self.vertices[(i + 1) % n],
                self.vertices[(i + 2) % n],
            ) > 0
        })
    }

    /// Inclusive bounding box `(min_x, min_y, max_x, max_y)`.
    pub fn bbox(&self) -> (i64, i64, i64, i64) {
        let mut b = (i64::MAX, i64::MAX, i64::MIN, i64::MIN);
        for p in &self.vertices {
            b.0 = b.0.min(p.x);
            b.1 = b.1.min(p.y);
            b.2 = b.2.max(p.x);
            b.3 = b.3.max(p.y);
        }
        b
    }

    /// Smallest pixel rectangle containing the polygon, clipped to the image.
    pub fn pixel_bounds(&self, width: u32, height: u32) -> Option<Rect> {
        let (x0, y0, x1, y1) = self.bbox();
        let clamp = |v: i64, hi: u32| v.clamp(0, i64::from(hi)) as u32;
        let r = Rect {
            x0: clamp(x0, width),
            y0: clamp(y0, height),
            x1: clamp(x1, width),
            y1: clamp(y1, height),
        };
        r.is_valid().then_some(r)
    }

    /// Point-in-polygon for a convex polygon, boundary inclusive, exact.
    pub fn convex_contains(&self, p: Point) -> bool {
        let n = self.vertices.len();
        (0..n).all(|i| orient(self.vertices[i], self.vertices[(i + 1) % n], p) >= 0)
    }

    /// Point-in-polygon for any simple polygon, boundary inclusive, exact.
    pub fn contains(&self, p: Point) -> bool {
        let n = self.vertices.len();
        let mut inside = false;
        for i in 0..n {
            let a = self.vertices[i];
            let b = self.vertices[(i + 1) % n];
            if on_segment(a, b, p) {
                return true;
            }
            if (a.y > p.y) != (b.y > p.y) {
                // Crossing x of the edge at height p.y compared against p.x,
                // multiplied through by (b.y - a.y) to stay in integers.
                let lhs = i128::from(p.x - a.x) * i128::from(b.y - a.y);
                let rhs = i128::from(b.x - a.x) * i128::from(p.y - a.y);
                let crosses = if b.y > a.y { lhs < rhs } else { lhs > rhs };
                if crosses {
                    inside = !inside;
                }
            }
        }
        inside
    }

    /// Scales every vertex by `k`; used for half-pixel exact tests.
    pub(crate) fn scaled(&self, k: i64) -> Polygon {
        Polygon {
            vertices: self.vertices.iter().map(|p| Point::new(p.x * k, p.y * k)).collect(),
        }
    }
}

impl TryFrom<Vec<Point>> for Polygon {
    type Error = Error;

    fn try_from(v: Vec<Point>) -> Result<Self> {
        Polygon::new(v)
    }
}

impl From<Polygon> for Vec<Point> {
    fn from(p: Polygon) -> Self {
        p.vertices
    }
}

fn signed_area2(v: &[Point]) -> i128 {
    let n = v.len();
    (0..n)
        .map(|i| {
            let a = v[i];
            let b = v[(i + 1) % n];
            i128::from(a.x) * i128::from(b.y) - i128::from(b.x) * i128::from(a.y)
        })
        .sum()
}

fn on_segment(a: Point, b: Point, p: Point) -> bool {
    orient(a, b, p) == 0
        && p.x >= a.x.min(b.x)
        && p.x <= a.x.max(b.x)
        && p.y >= a.y.min(b.y)
        && p.y <= a.y.max(b.y)
}

/// True iff the two rectangles share positive area. Touching edges or
/// corners do not count.
pub fn rects_overlap(a: &Rect, b: &Rect) -> bool {
    a.x0 < b.x1 && b.x0 < a.x1 && a.y0 < b.y1 && b.y0 < a.y1
}

/// Symmetric boolean matrix with a false diagonal.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct AdjacencyMatrix {
    n: usize,
    bits: Vec<bool>,
}

impl AdjacencyMatrix {
    pub fn empty(n: usize) -> Self {
        AdjacencyMatrix {
            n,
            bits: vec![false; n * n],
        }
    }

    pub fn len(&self) -> usize {
        self.n
    }

    pub fn is_empty(&self) -> bool {
        self.n == 0
    }

    pub fn get(&self, i: usize, j: usize) -> bool {
        self.bits[i * self.n + j]
    }

    /// Sets both `(i, j)` and `(j, i)`. Self-loops are ignored.
    pub fn connect(&mut self, i: usize, j: usize) {
        if i != j {
            self.bits[i * self.n + j] = true;
            self.bits[j * self.n + i] = true;
        }
    }

    pub fn neighbors(&self, i: usize) -> impl Iterator<Item = usize> + '_ {
        let row = &self.bits[i * self.n..(i + 1) * self.n];
        row.iter().enumerate().filter_map(|(j, &b)| b.then_some(j))
    }
}

/// Overlap graph of `regions`.
pub fn build_adjacency(regions: &[Rect]) -> AdjacencyMatrix {
    let mut adj = AdjacencyMatrix::empty(regions.len());
    for i in 0..regions.len() {
        for j in i + 1..regions.len() {
            if rects_overlap(&regions[i], &regions[j]) {
                adj.connect(i, j);
            }
        }
    }
    adj
}

/// Connected components as sorted index lists, ordered by smallest member.
pub fn connected_components(adj: &AdjacencyMatrix) -> Vec<Vec<usize>> {
    let n = adj.len();
    let mut seen = vec![false; n];
    let mut components = Vec::new();
    let mut stack = Vec::new();
    for start in 0..n {
        if seen[start] {
            continue;
        }
        seen[start] = true;
        stack.push(start);
        let mut members = Vec::new();
        while let Some(v) = stack.pop() {
            members.push(v);
            for w in adj.neighbors(v) {
                if !seen[w] {
                    seen[w] = true;
                    stack.push(w);
                }
            }
        }
        members.sort_unstable();
        components.push(members);
    }
    components
}

/// Strictly convex counter-clockwise hull (Andrew's monotone chain), starting
/// at the lexicographically smallest `(x, y)` vertex. Collinear boundary
/// points are dropped.
pub fn convex_hull(points: &[Point]) -> Result<Polygon> {
    let mut pts: Vec<Point> = points.to_vec();
    pts.sort_unstable();
    pts.dedup();
    if pts.len() < 3 {
        return Err(Error::DegenerateHull(points.len()));
    }
    let mut hull: Vec<Point> = Vec::with_capacity(pts.len() * 2);
    for &p in &pts {
        while hull.len() >= 2 && orient(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    let lower_len = hull.len() + 1;
    for &p in pts.iter().rev().skip(1) {
        while hull.len() >= lower_len && orient(hull[hull.len() - 2], hull[hull.len() - 1], p) <= 0 {
            hull.pop();
        }
        hull.push(p);
    }
    hull.pop();
    if hull.len() < 3 {
        return Err(Error::DegenerateHull(points.len()));
    }
    Ok(Polygon { vertices: hull })
}

/// Hull of all corners of `rects`.
pub fn hull_of_rects<'a>(rects: impl IntoIterator<Item = &'a Rect>) -> Result<Polygon> {
    let corners: Vec<Point> = rects
        .into_iter()
        .flat_map(|r| r.corners().map(Point::from))
        .collect();
    convex_hull(&corners)
}
