//! Two-zone triangulated meshes and barycentric projection.
//!
//! `build_mesh` triangulates a fine inner zone covering the convex hull of
//! the observation sites (dilated by a small buffer) and a coarser extension
//! ring around it, so the field model sees a boundary far from the data.
//! Construction seeds hexagonal lattices in both zones, runs an incremental
//! Delaunay triangulation with exact orientation/in-circle predicates, then
//! refines by circumcenter insertion until every triangle meets the minimum
//! angle bound and the per-zone edge length limits. The whole pipeline is
//! deterministic: no randomness, ties broken by index.
//!
//! Coordinates are treated as planar throughout; geographic inputs are used
//! as-is in degree units.

use std::collections::HashMap;
use std::io::{BufRead, Write};

use robust::{incircle, orient2d, Coord};

use crate::error::{Error, Result};
use crate::sparse::SparseRows;

/// Default minimum-angle quality bound for refinement, degrees.
pub const DEFAULT_QUALITY_ANGLE_DEG: f64 = 20.0;

/// Coincidence tolerance between mesh vertices.
const VERTEX_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Point2D {
    pub x: f64,
    pub y: f64,
}

impl Point2D {
    pub fn new(x: f64, y: f64) -> Self {
        Point2D { x, y }
    }

    pub fn dist(&self, other: &Point2D) -> f64 {
        (self.x - other.x).hypot(self.y - other.y)
    }

    fn coord(&self) -> Coord<f64> {
        Coord {
            x: self.x,
            y: self.y,
        }
    }
}

/// Conforming triangulation with per-vertex inner-zone flags.
/// All triangles are positively oriented (counterclockwise).
#[derive(Debug, Clone)]
pub struct TriangulatedMesh {
    vertices: Vec<Point2D>,
    triangles: Vec<[usize; 3]>,
    inner: Vec<bool>,
}

/// Summary statistics of a mesh.
#[derive(Debug, Clone, Copy)]
pub struct MeshStats {
    pub n_vertices: usize,
    pub n_triangles: usize,
    pub min_angle_deg: f64,
    pub max_edge: f64,
}

/// Sparse barycentric interpolation weights from mesh vertices to points.
/// Each row has at most 3 nonzero weights in `[0, 1]` summing to one.
#[derive(Debug, Clone)]
pub struct Projector {
    weights: SparseRows,
}

impl Projector {
    pub fn nrows(&self) -> usize {
        self.weights.nrows()
    }

    pub fn ncols(&self) -> usize {
        self.weights.ncols()
    }

    pub fn row(&self, i: usize) -> &[(usize, f64)] {
        self.weights.row(i)
    }

    pub fn as_rows(&self) -> &SparseRows {
        &self.weights
    }

    /// Interpolates vertex values to the projected points.
    pub fn apply(&self, vertex_values: &[f64]) -> Vec<f64> {
        self.weights.mul_vec(vertex_values)
    }
}

impl TriangulatedMesh {
    /// Validates and wraps raw mesh data: indices in range, positive
    /// orientation, conforming edges (each edge in one or two triangles),
    /// no coincident vertices.
    pub fn new(
        vertices: Vec<Point2D>,
        triangles: Vec<[usize; 3]>,
        inner: Vec<bool>,
    ) -> Result<Self> {
        if inner.len() != vertices.len() {
            return Err(Error::dimension(format!(
                "inner flags ({}) do not match vertex count ({})",
                inner.len(),
                vertices.len()
            )));
        }
        let n = vertices.len();
        for (t, tri) in triangles.iter().enumerate() {
            for &v in tri {
                if v >= n {
                    return Err(Error::data(format!(
                        "triangle {t} references vertex {v} outside 0..{n}"
                    )));
                }
            }
            let [a, b, c] = *tri;
            if a == b || b == c || a == c {
                return Err(Error::data(format!("triangle {t} repeats a vertex")));
            }
            if orient2d(
                vertices[a].coord(),
                vertices[b].coord(),
                vertices[c].coord(),
            ) <= 0.0
            {
                return Err(Error::data(format!(
                    "triangle {t} is not positively oriented"
                )));
            }
        }
        // conformity: undirected edge shared by at most two triangles
        let mut edge_count: HashMap<(usize, usize), usize> = HashMap::new();
        for tri in &triangles {
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let key = (a.min(b), a.max(b));
                *edge_count.entry(key).or_insert(0) += 1;
            }
        }
        if let Some((edge, &cnt)) = edge_count.iter().find(|&(_, &c)| c > 2) {
            return Err(Error::data(format!(
                "edge {edge:?} is shared by {cnt} triangles; mesh is not conforming"
            )));
        }
        // coincident vertices
        let mut order: Vec<usize> = (0..n).collect();
        order.sort_by(|&i, &j| {
            vertices[i]
                .x
                .total_cmp(&vertices[j].x)
                .then(vertices[i].y.total_cmp(&vertices[j].y))
        });
        for w in 0..n.saturating_sub(1) {
            let (i, j) = (order[w], order[w + 1]);
            if vertices[i].dist(&vertices[j]) < VERTEX_TOL {
                return Err(Error::data(format!(
                    "vertices {i} and {j} coincide within {VERTEX_TOL}"
                )));
            }
        }
        Ok(TriangulatedMesh {
            vertices,
            triangles,
            inner,
        })
    }

    pub fn n_vertices(&self) -> usize {
        self.vertices.len()
    }

    pub fn n_triangles(&self) -> usize {
        self.triangles.len()
    }

    pub fn vertex(&self, i: usize) -> Point2D {
        self.vertices[i]
    }

    pub fn vertices(&self) -> &[Point2D] {
        &self.vertices
    }

    pub fn triangle(&self, t: usize) -> [usize; 3] {
        self.triangles[t]
    }

    pub fn triangles(&self) -> &[[usize; 3]] {
        &self.triangles
    }

    pub fn is_inner(&self, v: usize) -> bool {
        self.inner[v]
    }

    pub fn stats(&self) -> MeshStats {
        let mut min_angle = f64::INFINITY;
        let mut max_edge = 0.0f64;
        for tri in &self.triangles {
            min_angle = min_angle.min(triangle_min_angle_deg(
                self.vertices[tri[0]],
                self.vertices[tri[1]],
                self.vertices[tri[2]],
            ));
            for k in 0..3 {
                let e = self.vertices[tri[k]].dist(&self.vertices[tri[(k + 1) % 3]]);
                max_edge = max_edge.max(e);
            }
        }
        MeshStats {
            n_vertices: self.vertices.len(),
            n_triangles: self.triangles.len(),
            min_angle_deg: min_angle,
            max_edge,
        }
    }

    /// Barycentric weights of `p` in the lowest-index triangle containing it,
    /// or `None` when `p` lies outside the triangulation. Weights are clamped
    /// to `[0, 1]`, renormalized to unit sum, and zero entries are dropped.
    pub fn locate_weights(&self, p: Point2D) -> Option<Vec<(usize, f64)>> {
        const EDGE_TOL: f64 = 1e-12;
        for tri in &self.triangles {
            let (a, b, c) = (
                self.vertices[tri[0]],
                self.vertices[tri[1]],
                self.vertices[tri[2]],
            );
            let area = cross(a, b, c);
            let la = cross(p, b, c) / area;
            let lb = cross(a, p, c) / area;
            let lc = cross(a, b, p) / area;
            if la >= -EDGE_TOL && lb >= -EDGE_TOL && lc >= -EDGE_TOL {
                let mut lam = [la.clamp(0.0, 1.0), lb.clamp(0.0, 1.0), lc.clamp(0.0, 1.0)];
                let s: f64 = lam.iter().sum();
                for l in &mut lam {
                    *l /= s;
                }
                let mut row: Vec<(usize, f64)> = tri
                    .iter()
                    .zip(lam)
                    .filter(|&(_, l)| l > 1e-14)
                    .map(|(&v, l)| (v, l))
                    .collect();
                row.sort_unstable_by_key(|&(v, _)| v);
                return Some(row);
            }
        }
        None
    }

    /// True when `p` lies inside a triangle whose three vertices are all in
    /// the inner zone.
    pub fn in_inner_region(&self, p: Point2D) -> bool {
        match self.locate_weights(p) {
            Some(row) => row.iter().all(|&(v, _)| self.inner[v]),
            None => false,
        }
    }

    /// Plain text export: header `vertices N triangles M`, then `N` lines
    /// `x y inner_flag`, then `M` lines of zero-based `i j k`.
    pub fn write_text(&self, w: &mut impl Write) -> Result<()> {
        writeln!(
            w,
            "vertices {} triangles {}",
            self.vertices.len(),
            self.triangles.len()
        )?;
        for (v, p) in self.vertices.iter().enumerate() {
            writeln!(w, "{} {} {}", p.x, p.y, u8::from(self.inner[v]))?;
        }
        for tri in &self.triangles {
            writeln!(w, "{} {} {}", tri[0], tri[1], tri[2])?;
        }
        Ok(())
    }

    /// Reads the format produced by [`TriangulatedMesh::write_text`],
    /// revalidating all mesh invariants.
    pub fn read_text(r: &mut impl BufRead) -> Result<Self> {
        let mut lines = r.lines();
        let header = lines
            .next()
            .ok_or_else(|| Error::data("mesh file is empty".to_string()))??;
        let toks: Vec<&str> = header.split_whitespace().collect();
        if toks.len() != 4 || toks[0] != "vertices" || toks[2] != "triangles" {
            return Err(Error::data(format!(
                "bad mesh header {header:?}; expected `vertices N triangles M`"
            )));
        }
        let n: usize = toks[1]
            .parse()
            .map_err(|_| Error::data(format!("bad vertex count {:?}", toks[1])))?;
        let m: usize = toks[3]
            .parse()
            .map_err(|_| Error::data(format!("bad triangle count {:?}", toks[3])))?;
        let mut vertices = Vec::with_capacity(n);
        let mut inner = Vec::with_capacity(n);
        for k in 0..n {
            let line = lines
                .next()
                .ok_or_else(|| Error::data(format!("mesh file ends before vertex {k}")))??;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::data(format!("bad vertex line {k}: {line:?}")));
            }
            let x: f64 = parts[0]
                .parse()
                .map_err(|_| Error::data(format!("bad x coordinate on vertex line {k}")))?;
            let y: f64 = parts[1]
                .parse()
                .map_err(|_| Error::data(format!("bad y coordinate on vertex line {k}")))?;
            let flag = match parts[2] {
                "0" => false,
                "1" => true,
                other => {
                    return Err(Error::data(format!(
                        "bad inner flag {other:?} on vertex line {k}"
                    )))
                }
            };
            vertices.push(Point2D::new(x, y));
            inner.push(flag);
        }
        let mut triangles = Vec::with_capacity(m);
        for k in 0..m {
            let line = lines
                .next()
                .ok_or_else(|| Error::data(format!("mesh file ends before triangle {k}")))??;
            let parts: Vec<&str> = line.split_whitespace().collect();
            if parts.len() != 3 {
                return Err(Error::data(format!("bad triangle line {k}: {line:?}")));
            }
            let mut tri = [0usize; 3];
            for (slot, tok) in tri.iter_mut().zip(&parts) {
                *slot = tok
                    .parse()
                    .map_err(|_| Error::data(format!("bad index on triangle line {k}")))?;
            }
            triangles.push(tri);
        }
        TriangulatedMesh::new(vertices, triangles, inner)
    }
}

/// Strict barycentric projection: every point must fall inside the mesh.
/// The failing point index is named otherwise.
pub fn barycentric_projector(mesh: &TriangulatedMesh, points: &[Point2D]) -> Result<Projector> {
    let mut rows = SparseRows::new(mesh.n_vertices());
    for (k, p) in points.iter().enumerate() {
        match mesh.locate_weights(*p) {
            Some(row) => rows.push_row(row),
            None => {
                return Err(Error::data(format!(
                    "point {k} at ({}, {}) lies outside the triangulation",
                    p.x, p.y
                )))
            }
        }
    }
    Ok(Projector { weights: rows })
}

fn cross(a: Point2D, b: Point2D, c: Point2D) -> f64 {
    (b.x - a.x) * (c.y - a.y) - (b.y - a.y) * (c.x - a.x)
}

fn triangle_min_angle_deg(a: Point2D, b: Point2D, c: Point2D) -> f64 {
    let angle = |v: Point2D, p: Point2D, q: Point2D| -> f64 {
        let (ux, uy) = (p.x - v.x, p.y - v.y);
        let (wx, wy) = (q.x - v.x, q.y - v.y);
        let dot = ux * wx + uy * wy;
        let nu = ux.hypot(uy);
        let nw = wx.hypot(wy);
        (dot / (nu * nw)).clamp(-1.0, 1.0).acos()
    };
    let r1 = angle(a, b, c);
    let r2 = angle(b, c, a);
    let r3 = std::f64::consts::PI - r1 - r2;
    r1.min(r2).min(r3).to_degrees()
}

fn circumcenter(a: Point2D, b: Point2D, c: Point2D) -> Option<Point2D> {
    let d = 2.0 * cross(a, b, c);
    if d.abs() < 1e-300 {
        return None;
    }
    let a2 = a.x * a.x + a.y * a.y;
    let b2 = b.x * b.x + b.y * b.y;
    let c2 = c.x * c.x + c.y * c.y;
    let ux = (a2 * (b.y - c.y) + b2 * (c.y - a.y) + c2 * (a.y - b.y)) / d;
    let uy = (a2 * (c.x - b.x) + b2 * (a.x - c.x) + c2 * (b.x - a.x)) / d;
    Some(Point2D::new(ux, uy))
}

// ---------------------------------------------------------------------------
// convex polygon helpers

/// Convex hull, counterclockwise, Andrew's monotone chain. Returns indices
/// into `points`.
fn convex_hull(points: &[Point2D]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..points.len()).collect();
    idx.sort_by(|&i, &j| {
        points[i]
            .x
            .total_cmp(&points[j].x)
            .then(points[i].y.total_cmp(&points[j].y))
    });
    let build = |iter: &mut dyn Iterator<Item = usize>| -> Vec<usize> {
        let mut out: Vec<usize> = Vec::new();
        for i in iter {
            while out.len() >= 2 {
                let a = points[out[out.len() - 2]];
                let b = points[out[out.len() - 1]];
                if cross(a, b, points[i]) <= 0.0 {
                    out.pop();
                } else {
                    break;
                }
            }
            out.push(i);
        }
        out
    };
    let mut lower = build(&mut idx.iter().copied());
    let mut upper = build(&mut idx.iter().rev().copied());
    lower.pop();
    upper.pop();
    lower.append(&mut upper);
    lower
}

/// Offsets a counterclockwise convex polygon outward by `d`.
fn dilate_convex(poly: &[Point2D], d: f64) -> Vec<Point2D> {
    let n = poly.len();
    let mut out = Vec::with_capacity(n);
    for i in 0..n {
        let prev = poly[(i + n - 1) % n];
        let cur = poly[i];
        let next = poly[(i + 1) % n];
        // outward normals of the two incident edges
        let norm = |p: Point2D, q: Point2D| -> (f64, f64) {
            let (dx, dy) = (q.x - p.x, q.y - p.y);
            let len = dx.hypot(dy);
            (dy / len, -dx / len)
        };
        let (n1x, n1y) = norm(prev, cur);
        let (n2x, n2y) = norm(cur, next);
        // intersection of the two offset edge lines through cur
        let den = n1x * n2y - n1y * n2x;
        if den.abs() < 1e-12 {
            out.push(Point2D::new(cur.x + d * n1x, cur.y + d * n1y));
        } else {
            // solve n1 . (p - cur) = d, n2 . (p - cur) = d
            let px = (d * n2y - d * n1y) / den;
            let py = (d * n1x - d * n2x) / den;
            out.push(Point2D::new(cur.x + px, cur.y + py));
        }
    }
    out
}

/// Signed distance of `p` to the counterclockwise convex polygon boundary:
/// positive inside. Exact for the interior test used here.
fn convex_signed_depth(poly: &[Point2D], p: Point2D) -> f64 {
    let n = poly.len();
    let mut depth = f64::INFINITY;
    for i in 0..n {
        let a = poly[i];
        let b = poly[(i + 1) % n];
        let len = a.dist(&b);
        depth = depth.min(cross(a, b, p) / len);
    }
    depth
}

fn convex_contains(poly: &[Point2D], p: Point2D, tol: f64) -> bool {
    convex_signed_depth(poly, p) >= -tol
}

// ---------------------------------------------------------------------------
// incremental Delaunay triangulation

const NO_TRI: usize = usize::MAX;

#[derive(Debug, Clone, Copy)]
struct Tri {
    v: [usize; 3],
    /// neighbor across the edge opposite vertex k
    n: [usize; 3],
    alive: bool,
}

struct Delaunay {
    points: Vec<Point2D>,
    tris: Vec<Tri>,
    stamp: Vec<u32>,
    generation: u32,
    last_alive: usize,
}

impl Delaunay {
    /// Starts with a super-triangle comfortably containing `span` around
    /// center `c`.
    fn new(c: Point2D, span: f64) -> Self {
        let r = span * 16.0;
        let points = vec![
            Point2D::new(c.x - 2.0 * r, c.y - r),
            Point2D::new(c.x + 2.0 * r, c.y - r),
            Point2D::new(c.x, c.y + 2.0 * r),
        ];
        let tris = vec![Tri {
            v: [0, 1, 2],
            n: [NO_TRI; 3],
            alive: true,
        }];
        Delaunay {
            points,
            tris,
            stamp: vec![0],
            generation: 0,
            last_alive: 0,
        }
    }

    fn orient(&self, a: usize, b: usize, c: usize) -> f64 {
        orient2d(
            self.points[a].coord(),
            self.points[b].coord(),
            self.points[c].coord(),
        )
    }

    fn in_circle(&self, t: usize, p: usize) -> bool {
        let [a, b, c] = self.tris[t].v;
        incircle(
            self.points[a].coord(),
            self.points[b].coord(),
            self.points[c].coord(),
            self.points[p].coord(),
        ) > 0.0
    }

    /// Walks from the last inserted region toward the triangle containing
    /// point index `p`; falls back to a linear scan if walking stalls.
    fn locate(&self, p: usize) -> Option<usize> {
        let mut t = self.last_alive;
        if !self.tris.get(t).map(|x| x.alive).unwrap_or(false) {
            t = self.tris.iter().position(|x| x.alive)?;
        }
        let mut steps = 0usize;
        let limit = 4 * self.tris.len() + 16;
        'walk: loop {
            steps += 1;
            if steps > limit {
                break;
            }
            let tri = self.tris[t];
            for k in 0..3 {
                let a = tri.v[(k + 1) % 3];
                let b = tri.v[(k + 2) % 3];
                if self.orient(a, b, p) < 0.0 {
                    match tri.n[k] {
                        NO_TRI => break 'walk,
                        next => {
                            t = next;
                            continue 'walk;
                        }
                    }
                }
            }
            return Some(t);
        }
        // fallback: exhaustive containment scan
        (0..self.tris.len()).find(|&t| {
            self.tris[t].alive
                && (0..3).all(|k| {
                    let a = self.tris[t].v[(k + 1) % 3];
                    let b = self.tris[t].v[(k + 2) % 3];
                    self.orient(a, b, p) >= 0.0
                })
        })
    }

    fn mark(&mut self, t: usize) {
        self.stamp[t] = self.generation;
    }

    fn marked(&self, t: usize) -> bool {
        self.stamp[t] == self.generation
    }

    /// Inserts the point with vertex index `p` (already pushed to
    /// `self.points`). Returns false if insertion had to be abandoned.
    fn insert(&mut self, p: usize) -> bool {
        let Some(t0) = self.locate(p) else {
            return false;
        };
        self.generation = self.generation.wrapping_add(1);
        // cavity: the containing triangle plus every reachable triangle
        // whose circumcircle strictly contains p
        let mut cavity: Vec<usize> = Vec::new();
        let mut stack = vec![t0];
        self.mark(t0);
        while let Some(t) = stack.pop() {
            cavity.push(t);
            for k in 0..3 {
                let nb = self.tris[t].n[k];
                if nb != NO_TRI && !self.marked(nb) && self.in_circle(nb, p) {
                    self.mark(nb);
                    stack.push(nb);
                }
            }
        }
        // collect boundary edges (a, b, outside-neighbor); absorb neighbors
        // across edges collinear with p so no degenerate fan triangle forms
        loop {
            let mut grew = false;
            let cavity_snapshot = cavity.clone();
            for &t in &cavity_snapshot {
                for k in 0..3 {
                    let nb = self.tris[t].n[k];
                    if nb != NO_TRI && self.marked(nb) {
                        continue;
                    }
                    let a = self.tris[t].v[(k + 1) % 3];
                    let b = self.tris[t].v[(k + 2) % 3];
                    if self.orient(a, b, p) == 0.0 {
                        if nb == NO_TRI {
                            return false;
                        }
                        self.mark(nb);
                        cavity.push(nb);
                        grew = true;
                    }
                }
            }
            if !grew {
                break;
            }
        }
        let mut boundary: Vec<(usize, usize, usize)> = Vec::new();
        for &t in &cavity {
            for k in 0..3 {
                let nb = self.tris[t].n[k];
                if nb == NO_TRI || !self.marked(nb) {
                    let a = self.tris[t].v[(k + 1) % 3];
                    let b = self.tris[t].v[(k + 2) % 3];
                    boundary.push((a, b, nb));
                }
            }
        }
        for &t in &cavity {
            self.tris[t].alive = false;
        }
        // fan: one new triangle per boundary edge
        let mut edge_link: HashMap<(usize, usize), (usize, usize)> = HashMap::new();
        for &(a, b, outside) in &boundary {
            let id = self.tris.len();
            // boundary edges come out oriented with the cavity (and p) on
            // the left, so (a, b, p) is counterclockwise
            debug_assert!(self.orient(a, b, p) > 0.0);
            self.tris.push(Tri {
                v: [a, b, p],
                n: [NO_TRI, NO_TRI, outside],
                alive: true,
            });
            self.stamp.push(0);
            if outside != NO_TRI {
                let side = (0..3)
                    .find(|&s| {
                        let oa = self.tris[outside].v[(s + 1) % 3];
                        let ob = self.tris[outside].v[(s + 2) % 3];
                        (oa == a && ob == b) || (oa == b && ob == a)
                    })
                    .expect("outside neighbor must share the boundary edge");
                self.tris[outside].n[side] = id;
            }
            // link the two p-edges with sibling fan triangles
            for (s, other) in [(0usize, b), (1usize, a)] {
                let key = (other.min(p), other.max(p));
                match edge_link.remove(&key) {
                    Some((tid, tside)) => {
                        self.tris[id].n[s] = tid;
                        self.tris[tid].n[tside] = id;
                    }
                    None => {
                        edge_link.insert(key, (id, s));
                    }
                }
            }
            self.last_alive = id;
        }
        true
    }

    fn push_point(&mut self, p: Point2D) -> usize {
        self.points.push(p);
        self.points.len() - 1
    }
}

// ---------------------------------------------------------------------------
// mesh construction

fn validate_points(points: &[Point2D]) -> Result<()> {
    for (k, p) in points.iter().enumerate() {
        if !p.x.is_finite() || !p.y.is_finite() {
            return Err(Error::data(format!(
                "point {k} has non-finite coordinates ({}, {})",
                p.x, p.y
            )));
        }
    }
    if points.len() < 3 {
        return Err(Error::data(format!(
            "mesh needs at least 3 points, got {}",
            points.len()
        )));
    }
    for i in 0..points.len() {
        for j in (i + 1)..points.len() {
            if points[i].dist(&points[j]) < VERTEX_TOL {
                return Err(Error::data(format!(
                    "points {i} and {j} coincide; degenerate input"
                )));
            }
        }
    }
    Ok(())
}

/// Plain Delaunay triangulation of the given points, kept exactly as
/// supplied (vertex `i` is `points[i]`), with every vertex flagged inner.
/// For custom vertex layouts; `build_mesh` handles the two-zone survey
/// workflow.
pub fn triangulate(points: &[Point2D]) -> Result<TriangulatedMesh> {
    validate_points(points)?;
    if convex_hull(points).len() < 3 {
        return Err(Error::data(
            "points are collinear; cannot build a two-dimensional mesh".to_string(),
        ));
    }
    let (mut xmin, mut xmax, mut ymin, mut ymax) =
        (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
    for p in points {
        xmin = xmin.min(p.x);
        xmax = xmax.max(p.x);
        ymin = ymin.min(p.y);
        ymax = ymax.max(p.y);
    }
    let c = Point2D::new((xmin + xmax) / 2.0, (ymin + ymax) / 2.0);
    let span = (xmax - xmin).hypot(ymax - ymin).max(1.0);
    let mut dt = Delaunay::new(c, span);
    for &p in points {
        let id = dt.push_point(p);
        if !dt.insert(id) {
            return Err(Error::numerical(format!(
                "triangulation failed while inserting point ({}, {})",
                p.x, p.y
            )));
        }
    }
    let vertices: Vec<Point2D> = dt.points[3..].to_vec();
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for t in 0..dt.tris.len() {
        let tri = dt.tris[t];
        if !tri.alive || tri.v.iter().any(|&v| v < 3) {
            continue;
        }
        triangles.push([tri.v[0] - 3, tri.v[1] - 3, tri.v[2] - 3]);
    }
    for tri in &mut triangles {
        let (pa, pb, pc) = (vertices[tri[0]], vertices[tri[1]], vertices[tri[2]]);
        if cross(pa, pb, pc) < 0.0 {
            tri.swap(1, 2);
        }
        let k = (0..3).min_by_key(|&k| tri[k]).unwrap();
        tri.rotate_left(k);
    }
    triangles.sort_unstable();
    let n = vertices.len();
    TriangulatedMesh::new(vertices, triangles, vec![true; n])
}

/// Builds a two-zone refined triangulation around `points`.
///
/// The inner zone covers the convex hull of `points` dilated by
/// `max_edge_inner`; the extension ring reaches a further
/// `extension_margin` outward and is meshed at the coarser
/// `max_edge_outer`. Refinement enforces a 20 degree minimum angle.
pub fn build_mesh(
    points: &[Point2D],
    max_edge_inner: f64,
    max_edge_outer: f64,
    extension_margin: f64,
) -> Result<TriangulatedMesh> {
    build_mesh_with_quality(
        points,
        max_edge_inner,
        max_edge_outer,
        extension_margin,
        DEFAULT_QUALITY_ANGLE_DEG,
    )
}

/// [`build_mesh`] with an explicit minimum-angle quality bound in degrees.
pub fn build_mesh_with_quality(
    points: &[Point2D],
    max_edge_inner: f64,
    max_edge_outer: f64,
    extension_margin: f64,
    quality_angle_deg: f64,
) -> Result<TriangulatedMesh> {
    validate_points(points)?;
    for (name, v) in [
        ("max_edge_inner", max_edge_inner),
        ("max_edge_outer", max_edge_outer),
    ] {
        if !(v > 0.0) || !v.is_finite() {
            return Err(Error::data(format!("{name} must be positive, got {v}")));
        }
    }
    if !(extension_margin >= 0.0) || !extension_margin.is_finite() {
        return Err(Error::data(format!(
            "extension_margin must be nonnegative, got {extension_margin}"
        )));
    }
    let hull_idx = convex_hull(points);
    if hull_idx.len() < 3 {
        return Err(Error::data(
            "points are collinear; cannot build a two-dimensional mesh".to_string(),
        ));
    }
    let hull: Vec<Point2D> = hull_idx.iter().map(|&i| points[i]).collect();
    let buffer = max_edge_inner;
    let inner_poly = dilate_convex(&hull, buffer);
    let outer_poly = dilate_convex(&hull, buffer + extension_margin);

    // seed vertices: stations, zone boundaries, hexagonal lattices
    let mut seeds: Vec<Point2D> = points.to_vec();
    let mut guard: Vec<Point2D> = points.to_vec();
    let add_boundary = |poly: &[Point2D], spacing: f64, seeds: &mut Vec<Point2D>| {
        let npoly = poly.len();
        for i in 0..npoly {
            let a = poly[i];
            let b = poly[(i + 1) % npoly];
            let len = a.dist(&b);
            let steps = (len / spacing).ceil().max(1.0) as usize;
            for s in 0..steps {
                let f = s as f64 / steps as f64;
                seeds.push(Point2D::new(a.x + f * (b.x - a.x), a.y + f * (b.y - a.y)));
            }
        }
    };
    add_boundary(&inner_poly, max_edge_inner, &mut seeds);
    if extension_margin > 0.0 {
        add_boundary(&outer_poly, max_edge_outer, &mut seeds);
    }
    guard.extend_from_slice(&seeds[points.len()..]);

    let hex_lattice = |poly: &[Point2D],
                       spacing: f64,
                       keep: &dyn Fn(Point2D) -> bool,
                       guard: &[Point2D],
                       clearance: f64|
     -> Vec<Point2D> {
        let (mut xmin, mut xmax, mut ymin, mut ymax) =
            (f64::INFINITY, f64::NEG_INFINITY, f64::INFINITY, f64::NEG_INFINITY);
        for p in poly {
            xmin = xmin.min(p.x);
            xmax = xmax.max(p.x);
            ymin = ymin.min(p.y);
            ymax = ymax.max(p.y);
        }
        let dy = spacing * 3f64.sqrt() / 2.0;
        let mut out = Vec::new();
        let nrows = ((ymax - ymin) / dy).ceil() as i64 + 1;
        for r in 0..nrows {
            let y = ymin + r as f64 * dy;
            let x0 = if r % 2 == 0 { xmin } else { xmin + spacing / 2.0 };
            let ncols = ((xmax - x0) / spacing).ceil() as i64 + 1;
            for c in 0..ncols {
                let p = Point2D::new(x0 + c as f64 * spacing, y);
                if keep(p) && guard.iter().all(|g| g.dist(&p) >= clearance) {
                    out.push(p);
                }
            }
        }
        out
    };

    let ilat = hex_lattice(
        &inner_poly,
        max_edge_inner * 0.9,
        &|p| convex_contains(&inner_poly, p, -0.25 * max_edge_inner),
        &guard,
        0.4 * max_edge_inner,
    );
    seeds.extend_from_slice(&ilat);
    guard.extend_from_slice(&ilat);
    if extension_margin > 0.0 {
        let olat = hex_lattice(
            &outer_poly,
            max_edge_outer * 0.9,
            &|p| {
                convex_contains(&outer_poly, p, -0.3 * max_edge_outer)
                    && !convex_contains(&inner_poly, p, 0.3 * max_edge_outer)
            },
            &guard,
            0.4 * max_edge_outer,
        );
        seeds.extend_from_slice(&olat);
    }

    // triangulate the seeds
    let (mut cx, mut cy, mut span) = (0.0, 0.0, 0.0f64);
    for p in &outer_poly {
        cx += p.x;
        cy += p.y;
    }
    cx /= outer_poly.len() as f64;
    cy /= outer_poly.len() as f64;
    for p in &outer_poly {
        span = span.max(p.dist(&Point2D::new(cx, cy)));
    }
    let mut dt = Delaunay::new(Point2D::new(cx, cy), span.max(1.0));
    for &p in &seeds {
        let id = dt.push_point(p);
        if !dt.insert(id) {
            return Err(Error::numerical(format!(
                "triangulation failed while inserting seed point ({}, {})",
                p.x, p.y
            )));
        }
    }

    // refinement: circumcenter (or midpoint) insertion until quality and
    // per-zone size bounds hold
    let is_inner_vertex =
        |dt: &Delaunay, v: usize| convex_contains(&inner_poly, dt.points[v], VERTEX_TOL);
    let domain_tri = |dt: &Delaunay, t: usize| -> bool {
        let tri = dt.tris[t];
        if !tri.alive || tri.v.iter().any(|&v| v < 3) {
            return false;
        }
        let c = Point2D::new(
            (dt.points[tri.v[0]].x + dt.points[tri.v[1]].x + dt.points[tri.v[2]].x) / 3.0,
            (dt.points[tri.v[0]].y + dt.points[tri.v[1]].y + dt.points[tri.v[2]].y) / 3.0,
        );
        convex_contains(&outer_poly, c, 1e-9)
    };

    let severity_of = |dt: &Delaunay, t: usize| -> f64 {
        let [a, b, c] = dt.tris[t].v;
        let (pa, pb, pc) = (dt.points[a], dt.points[b], dt.points[c]);
        let mut severity = 0.0f64;
        let angle = triangle_min_angle_deg(pa, pb, pc);
        if angle < quality_angle_deg {
            severity = severity.max(quality_angle_deg / angle.max(1e-6));
        }
        for (u, v) in [(a, b), (b, c), (c, a)] {
            let limit = if is_inner_vertex(dt, u) && is_inner_vertex(dt, v) {
                max_edge_inner
            } else {
                max_edge_outer
            };
            let len = dt.points[u].dist(&dt.points[v]);
            if len > limit * 1.02 {
                severity = severity.max(len / limit);
            }
        }
        severity
    };
    let tri_key = |dt: &Delaunay, t: usize| -> (usize, usize, usize) {
        let [a, b, c] = dt.tris[t].v;
        (a.min(b).min(c), a.max(b).max(c), a + b + c)
    };

    let max_refine = 20 * seeds.len() + 1000;
    let min_sep = 0.05 * max_edge_inner.min(max_edge_outer);
    let mut inserted = 0usize;
    let mut abandoned: Vec<(usize, usize, usize)> = Vec::new();
    'refine: for _sweep in 0..60 {
        // batch all current violations worst-first, then revisit survivors
        let mut viols: Vec<(f64, usize)> = (0..dt.tris.len())
            .filter(|&t| domain_tri(&dt, t) && !abandoned.contains(&tri_key(&dt, t)))
            .filter_map(|t| {
                let s = severity_of(&dt, t);
                (s > 0.0).then_some((s, t))
            })
            .collect();
        if viols.is_empty() {
            break;
        }
        viols.sort_by(|x, y| y.0.total_cmp(&x.0).then(x.1.cmp(&y.1)));
        let mut progressed = false;
        for (_, t) in viols {
            if !dt.tris[t].alive || severity_of(&dt, t) <= 0.0 {
                continue;
            }
            if inserted >= max_refine {
                break 'refine;
            }
            let key = tri_key(&dt, t);
            let [a, b, c] = dt.tris[t].v;
            let (pa, pb, pc) = (dt.points[a], dt.points[b], dt.points[c]);
            let mut candidates = Vec::new();
            if let Some(cc) = circumcenter(pa, pb, pc) {
                if convex_contains(&outer_poly, cc, -1e-9) {
                    candidates.push(cc);
                }
            }
            let mut edges = [(pa, pb), (pb, pc), (pc, pa)];
            edges.sort_by(|e1, e2| e2.0.dist(&e2.1).total_cmp(&e1.0.dist(&e1.1)));
            for (u, v) in edges {
                candidates.push(Point2D::new((u.x + v.x) / 2.0, (u.y + v.y) / 2.0));
            }
            let chosen = candidates
                .into_iter()
                .find(|cand| dt.points[3..].iter().all(|q| q.dist(cand) >= min_sep));
            match chosen {
                Some(p) => {
                    let id = dt.push_point(p);
                    if dt.insert(id) {
                        progressed = true;
                    } else {
                        dt.points.pop();
                        abandoned.push(key);
                    }
                }
                None => {
                    abandoned.push(key);
                }
            }
            inserted += 1;
        }
        if !progressed {
            break;
        }
    }

    // compact: drop super vertices and non-domain triangles
    let mut vertices: Vec<Point2D> = dt.points[3..].to_vec();
    let mut used = vec![false; vertices.len()];
    let mut triangles: Vec<[usize; 3]> = Vec::new();
    for t in 0..dt.tris.len() {
        if !domain_tri(&dt, t) {
            continue;
        }
        let [a, b, c] = dt.tris[t].v;
        let tri = [a - 3, b - 3, c - 3];
        for &v in &tri {
            used[v] = true;
        }
        triangles.push(tri);
    }
    // drop unused vertices (lattice points swallowed by no triangle)
    let mut remap = vec![usize::MAX; vertices.len()];
    let mut keep: Vec<Point2D> = Vec::new();
    for (v, &u) in used.iter().enumerate() {
        if u || v < points.len() {
            remap[v] = keep.len();
            keep.push(vertices[v]);
        }
    }
    vertices = keep;
    for tri in &mut triangles {
        for v in tri.iter_mut() {
            *v = remap[*v];
        }
    }
    // canonical form: counterclockwise, smallest vertex first, sorted list
    for tri in &mut triangles {
        let (pa, pb, pc) = (
            vertices[tri[0]],
            vertices[tri[1]],
            vertices[tri[2]],
        );
        if cross(pa, pb, pc) < 0.0 {
            tri.swap(1, 2);
        }
        let k = (0..3).min_by_key(|&k| tri[k]).unwrap();
        tri.rotate_left(k);
    }
    triangles.sort_unstable();

    let inner_flags: Vec<bool> = vertices
        .iter()
        .map(|p| convex_contains(&inner_poly, *p, VERTEX_TOL))
        .collect();
    TriangulatedMesh::new(vertices, triangles, inner_flags)
}

#[cfg(test)]
mod tests {
    use super::*;
    use rand::rngs::StdRng;
    use rand::{Rng, SeedableRng};

    fn scatter(n: usize, w: f64, h: f64, seed: u64) -> Vec<Point2D> {
        let mut rng = StdRng::seed_from_u64(seed);
        (0..n)
            .map(|_| Point2D::new(rng.random_range(0.0..w), rng.random_range(0.0..h)))
            .collect()
    }

    fn check_wholeness(mesh: &TriangulatedMesh) {
        // positive orientation
        for t in 0..mesh.n_triangles() {
            let [a, b, c] = mesh.triangle(t);
            assert!(
                cross(mesh.vertex(a), mesh.vertex(b), mesh.vertex(c)) > 0.0,
                "triangle {t} not counterclockwise"
            );
        }
        // conforming: interior edges in exactly 2 triangles, boundary in 1
        let mut counts: HashMap<(usize, usize), usize> = HashMap::new();
        for t in 0..mesh.n_triangles() {
            let tri = mesh.triangle(t);
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                *counts.entry((a.min(b), a.max(b))).or_insert(0) += 1;
            }
        }
        for (&edge, &c) in &counts {
            assert!(c == 1 || c == 2, "edge {edge:?} in {c} triangles");
        }
    }

    #[test]
    fn small_mesh_covers_points_and_refines() {
        let pts = scatter(12, 4.0, 3.0, 42);
        let mesh = build_mesh(&pts, 0.8, 1.6, 1.5).unwrap();
        check_wholeness(&mesh);
        let stats = mesh.stats();
        assert!(stats.min_angle_deg >= 20.0 - 1e-9, "min angle {}", stats.min_angle_deg);
        // stations are mesh vertices 0..n and flagged inner
        for (k, p) in pts.iter().enumerate() {
            assert!(mesh.vertex(k).dist(p) < 1e-12);
            assert!(mesh.is_inner(k), "station {k} not inner");
            assert!(mesh.in_inner_region(*p), "station {k} outside inner region");
        }
        // inner edges respect the inner bound
        for t in 0..mesh.n_triangles() {
            let tri = mesh.triangle(t);
            for k in 0..3 {
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                let len = mesh.vertex(a).dist(&mesh.vertex(b));
                if mesh.is_inner(a) && mesh.is_inner(b) {
                    assert!(len <= 0.8 * 1.02 + 1e-9, "inner edge of length {len}");
                } else {
                    assert!(len <= 1.6 * 1.02 + 1e-9, "outer edge of length {len}");
                }
            }
        }
    }

    #[test]
    fn deterministic_construction() {
        let pts = scatter(20, 5.0, 5.0, 7);
        let m1 = build_mesh(&pts, 0.9, 1.8, 2.0).unwrap();
        let m2 = build_mesh(&pts, 0.9, 1.8, 2.0).unwrap();
        assert_eq!(m1.n_vertices(), m2.n_vertices());
        assert_eq!(m1.triangles(), m2.triangles());
        for v in 0..m1.n_vertices() {
            assert_eq!(m1.vertex(v), m2.vertex(v));
        }
    }

    #[test]
    fn extension_ring_present() {
        let pts = scatter(15, 4.0, 4.0, 3);
        let margin = 2.5;
        let mesh = build_mesh(&pts, 0.8, 1.5, margin).unwrap();
        let outer_count = (0..mesh.n_vertices()).filter(|&v| !mesh.is_inner(v)).count();
        assert!(outer_count > 0, "no extension-ring vertices");
        // ring reaches at least the margin beyond the inner zone
        let far = mesh
            .vertices()
            .iter()
            .map(|p| p.x)
            .fold(f64::NEG_INFINITY, f64::max);
        assert!(far >= 4.0 + margin - 0.5, "outer extent {far}");
    }

    #[test]
    fn degenerate_inputs_rejected() {
        let line: Vec<Point2D> = (0..5).map(|i| Point2D::new(i as f64, 2.0 * i as f64)).collect();
        let err = build_mesh(&line, 0.5, 1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("collinear"), "{err}");

        let dup = vec![
            Point2D::new(0.0, 0.0),
            Point2D::new(1.0, 0.0),
            Point2D::new(1.0, 0.0),
            Point2D::new(0.0, 1.0),
        ];
        let err = build_mesh(&dup, 0.5, 1.0, 1.0).unwrap_err();
        assert!(err.to_string().contains("coincide"), "{err}");

        assert!(build_mesh(&scatter(5, 1.0, 1.0, 1), -0.5, 1.0, 1.0).is_err());
        assert!(build_mesh(&scatter(2, 1.0, 1.0, 1), 0.5, 1.0, 1.0).is_err());
    }

    #[test]
    fn projector_rows_are_barycentric() {
        let pts = scatter(10, 3.0, 3.0, 11);
        let mesh = build_mesh(&pts, 0.7, 1.4, 1.0).unwrap();
        let mut rng = StdRng::seed_from_u64(5);
        let queries: Vec<Point2D> = (0..40)
            .map(|_| Point2D::new(rng.random_range(0.5..2.5), rng.random_range(0.5..2.5)))
            .collect();
        let proj = barycentric_projector(&mesh, &queries).unwrap();
        for i in 0..proj.nrows() {
            let row = proj.row(i);
            assert!(row.len() <= 3);
            let sum: f64 = row.iter().map(|&(_, w)| w).sum();
            assert!((sum - 1.0).abs() <= 1e-12, "row {i} sums to {sum}");
            for &(_, w) in row {
                assert!((0.0..=1.0).contains(&w));
            }
        }
        // interpolation reproduces affine functions exactly
        let plane: Vec<f64> = mesh.vertices().iter().map(|p| 2.0 * p.x - 0.5 * p.y + 1.0).collect();
        let interp = proj.apply(&plane);
        for (q, v) in queries.iter().zip(interp) {
            let expect = 2.0 * q.x - 0.5 * q.y + 1.0;
            assert!((v - expect).abs() < 1e-9, "{v} vs {expect}");
        }
    }

    #[test]
    fn projector_vertex_hit_is_single_weight() {
        let pts = scatter(8, 3.0, 3.0, 19);
        let mesh = build_mesh(&pts, 0.8, 1.6, 1.0).unwrap();
        let proj = barycentric_projector(&mesh, &[mesh.vertex(4)]).unwrap();
        let row = proj.row(0);
        assert_eq!(row.len(), 1);
        assert_eq!(row[0].0, 4);
        assert_eq!(row[0].1, 1.0);
    }

    #[test]
    fn projector_outside_point_rejected() {
        let pts = scatter(8, 3.0, 3.0, 23);
        let mesh = build_mesh(&pts, 0.8, 1.6, 1.0).unwrap();
        let err = barycentric_projector(&mesh, &[Point2D::new(500.0, 500.0)]).unwrap_err();
        assert!(err.to_string().contains("point 0"), "{err}");
    }

    #[test]
    fn text_round_trip_is_identical() {
        let vertices = vec![
            Point2D::new(0.0, 0.0),
            Point2D::new(1.0, 0.0),
            Point2D::new(1.0, 1.0),
            Point2D::new(0.0, 1.0),
        ];
        let triangles = vec![[0, 1, 2], [0, 2, 3]];
        let mesh = TriangulatedMesh::new(vertices, triangles, vec![true, true, false, false])
            .unwrap();
        let mut buf = Vec::new();
        mesh.write_text(&mut buf).unwrap();
        let text = String::from_utf8(buf.clone()).unwrap();
        assert!(text.starts_with("vertices 4 triangles 2\n"), "{text}");
        let back = TriangulatedMesh::read_text(&mut &buf[..]).unwrap();
        assert_eq!(back.n_vertices(), 4);
        assert_eq!(back.triangles(), mesh.triangles());
        for v in 0..4 {
            assert_eq!(back.vertex(v), mesh.vertex(v));
            assert_eq!(back.is_inner(v), mesh.is_inner(v));
        }
        let mut buf2 = Vec::new();
        back.write_text(&mut buf2).unwrap();
        assert_eq!(buf, buf2);
    }

    #[test]
    fn read_rejects_malformed() {
        let bad = b"vertices 2 triangles 1\n0 0 1\n1 0 1\n0 1 5\n";
        assert!(TriangulatedMesh::read_text(&mut &bad[..]).is_err());
        let bad2 = b"tris 1\n";
        assert!(TriangulatedMesh::read_text(&mut &bad2[..]).is_err());
    }

    #[test]
    fn triangulate_keeps_vertices_verbatim() {
        let pts = vec![
            Point2D::new(0.0, 0.0),
            Point2D::new(1.0, 0.0),
            Point2D::new(1.0, 1.0),
            Point2D::new(0.0, 1.0),
        ];
        let mesh = triangulate(&pts).unwrap();
        assert_eq!(mesh.n_vertices(), 4);
        assert_eq!(mesh.n_triangles(), 2);
        for (k, p) in pts.iter().enumerate() {
            assert_eq!(mesh.vertex(k).dist(p), 0.0);
            assert!(mesh.is_inner(k));
        }
    }

    #[test]
    fn triangulate_scatter_is_conforming_and_delaunay() {
        let pts = scatter(60, 4.0, 3.0, 7);
        let mesh = triangulate(&pts).unwrap();
        check_wholeness(&mesh);
        assert_eq!(mesh.n_vertices(), 60);
        // empty circumcircle property against every non-member vertex
        for t in 0..mesh.n_triangles() {
            let [a, b, c] = mesh.triangle(t);
            let cc = circumcenter(mesh.vertex(a), mesh.vertex(b), mesh.vertex(c)).unwrap();
            let r2 = cc.dist(&mesh.vertex(a)).powi(2);
            for v in 0..mesh.n_vertices() {
                if v == a || v == b || v == c {
                    continue;
                }
                let d2 = cc.dist(&mesh.vertex(v)).powi(2);
                assert!(d2 >= r2 * (1.0 - 1e-9), "vertex {v} inside circumcircle of {t}");
            }
        }
    }

    #[test]
    fn triangulate_rejects_bad_input() {
        let line: Vec<Point2D> = (0..5).map(|k| Point2D::new(k as f64, 2.0 * k as f64)).collect();
        assert!(triangulate(&line).is_err());
        assert!(triangulate(&line[..2]).is_err());
        let dup = vec![
            Point2D::new(0.0, 0.0),
            Point2D::new(1.0, 0.0),
            Point2D::new(0.0, 1.0),
            Point2D::new(1e-12, 0.0),
        ];
        assert!(triangulate(&dup).is_err());
    }

    #[test]
    fn station_scale_mesh_order_of_magnitude() {
        // ~91 sites at survey scale with typical sizing produces a mesh on
        // the order of two thousand triangles
        let pts = scatter(91, 14.0, 15.0, 91);
        let mesh = build_mesh(&pts, 0.55, 1.5, 3.0).unwrap();
        check_wholeness(&mesh);
        let n = mesh.n_triangles();
        assert!(
            (1000..=4000).contains(&n),
            "expected order-2000 triangles, got {n}"
        );
        let stats = mesh.stats();
        assert!(stats.min_angle_deg >= 20.0 - 1e-9, "min angle {}", stats.min_angle_deg);
    }
}
