use serde::{Deserialize, Serialize};

use super::flatten::FlattenedFrame;
use crate::error::{Error, Result};
use crate::geom::{self, P2, P3};
use crate::mesh::{
    boundary_loops, boundary_loops_with, point_to_point_geodesic, ClosestPointIndex, GeodesicOptions, GeodesicPath, InletRule,
    MeshLocation, Topology, TriMeshFrame,
};

/// Barycentric slack when locating lattice points in parameter triangles.
const INSIDE_TOL: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum SurfaceLabel {
    Outer,
    Inner,
    Lumen,
}

impl SurfaceLabel {
    pub const ALL: [SurfaceLabel; 3] = [SurfaceLabel::Outer, SurfaceLabel::Inner, SurfaceLabel::Lumen];

    pub fn name(self) -> &'static str {
        match self {
            SurfaceLabel::Outer => "outer",
            SurfaceLabel::Inner => "inner",
            SurfaceLabel::Lumen => "lumen",
        }
    }
}

/// An n×m lattice of surface points; u = i/n runs around the tube (periodic),
/// v = j/(m − 1) from inlet to outlet.
#[derive(Debug, Clone, PartialEq)]
pub struct GridMesh {
    pub n: usize,
    pub m: usize,
    /// Row-major by station: index `j * n + i`.
    pub points: Vec<P3>,
    pub frame_index: usize,
    pub surface: SurfaceLabel,
}

impl GridMesh {
    /// Node (i, j) with i wrapping around the seam.
    pub fn at(&self, i: usize, j: usize) -> P3 {
        self.points[j * self.n + i % self.n]
    }

    pub fn row(&self, j: usize) -> &[P3] {
        &self.points[j * self.n..(j + 1) * self.n]
    }

    /// Bilinear interpolation at (u, v); u is periodic, v clamped to [0, 1].
    pub fn interpolate(&self, u: f64, v: f64) -> P3 {
        let x = u.rem_euclid(1.0) * self.n as f64;
        let y = v.clamp(0.0, 1.0) * (self.m - 1) as f64;
        let i = (x.floor() as usize).min(self.n - 1);
        let j = (y.floor() as usize).min(self.m - 2);
        let (fx, fy) = (x - i as f64, y - j as f64);
        let lerp = |a: P3, b: P3, t: f64| a + (b - a) * t;
        let lo = lerp(self.at(i, j), self.at(i + 1, j), fx);
        let hi = lerp(self.at(i, j + 1), self.at(i + 1, j + 1), fx);
        lerp(lo, hi, fy)
    }

    /// The lattice as a triangulated tube with the same orientation as the source.
    pub fn to_mesh(&self) -> TriMeshFrame {
        TriMeshFrame::new(self.points.clone(), lattice_triangles(self.n, self.m)).with_frame(self.frame_index, 0.0)
    }

    /// Volume enclosed by the lattice tube closed with fan caps on the first
    /// and last rows; matches `to_mesh().enclosed_volume()`.
    pub fn enclosed_volume(&self) -> f64 {
        lattice_volume(&self.points, self.n, self.m)
    }

    /// Resamples rows onto `m` stations evenly spaced over `[lo, hi]` in v.
    pub fn restrict_v(&self, lo: f64, hi: f64, m: usize) -> GridMesh {
        let points = (0..m)
            .flat_map(|j| {
                let v = lo + (hi - lo) * j as f64 / (m - 1) as f64;
                (0..self.n).map(move |i| self.interpolate(i as f64 / self.n as f64, v))
            })
            .collect();
        GridMesh { m, points, ..self.clone() }
    }

    /// Largest coefficient of variation of neighbour spacing over all rows
    /// and over all columns, as `(rows, columns)`.
    pub fn spacing_cv(&self) -> (f64, f64) {
        let cv = |d: &[f64]| {
            let n = d.len() as f64;
            let mean = d.iter().sum::<f64>() / n;
            let var = d.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / n;
            if mean > 0.0 {
                var.sqrt() / mean
            } else {
                0.0
            }
        };
        let rows = (0..self.m)
            .map(|j| cv(&(0..self.n).map(|i| (self.at(i + 1, j) - self.at(i, j)).norm()).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        let cols = (0..self.n)
            .map(|i| cv(&(0..self.m - 1).map(|j| (self.at(i, j + 1) - self.at(i, j)).norm()).collect::<Vec<_>>()))
            .fold(0.0, f64::max);
        (rows, cols)
    }
}

/// Triangles of an n×m periodic lattice stored row by row. Diagonals alternate
/// in a checkerboard so the tessellation has no handedness.
pub fn lattice_triangles(n: usize, m: usize) -> Vec<[usize; 3]> {
    let idx = |i: usize, j: usize| j * n + i % n;
    let mut triangles = Vec::with_capacity(2 * n * m.saturating_sub(1));
    for j in 0..m.saturating_sub(1) {
        for i in 0..n {
            if (i + j) % 2 == 0 {
                triangles.push([idx(i, j), idx(i + 1, j), idx(i + 1, j + 1)]);
                triangles.push([idx(i, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            } else {
                triangles.push([idx(i, j), idx(i + 1, j), idx(i, j + 1)]);
                triangles.push([idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)]);
            }
        }
    }
    triangles
}

/// Capped volume of a lattice tube given as `m` rows of `n` points.
pub fn lattice_volume(points: &[P3], n: usize, m: usize) -> f64 {
    let origin = geom::centroid(points.iter().copied());
    let rel = |k: usize| P3::from(points[k] - origin);
    let mut vol = 0.0;
    for t in lattice_triangles(n, m) {
        vol += geom::signed_tet_volume(&rel(t[0]), &rel(t[1]), &rel(t[2]));
    }
    for (j, forward) in [(0, false), (m - 1, true)] {
        let c = P3::from(geom::centroid((0..n).map(|i| points[j * n + i])) - origin);
        for i in 0..n {
            let (a, b) = (rel(j * n + i), rel(j * n + (i + 1) % n));
            vol += if forward { geom::signed_tet_volume(&c, &a, &b) } else { geom::signed_tet_volume(&c, &b, &a) };
        }
    }
    vol
}

/// Uniform bucket grid over the parameter triangles.
struct UvIndex<'a> {
    flat: &'a FlattenedFrame,
    res: usize,
    cells: Vec<Vec<usize>>,
}

impl<'a> UvIndex<'a> {
    fn new(flat: &'a FlattenedFrame) -> Self {
        let nt = flat.cut.mesh.triangles.len();
        let res = ((nt as f64).sqrt().ceil() as usize).clamp(1, 512);
        let mut cells = vec![Vec::new(); res * res];
        let cell = |x: f64| ((x * res as f64).floor().max(0.0) as usize).min(res - 1);
        for (f, t) in flat.cut.mesh.triangles.iter().enumerate() {
            let pts = t.map(|v| flat.uv[v]);
            let (x0, x1) = min_max(pts.iter().map(|p| p.x));
            let (y0, y1) = min_max(pts.iter().map(|p| p.y));
            let pad = 2.0 * INSIDE_TOL;
            for cy in cell(y0 - pad)..=cell(y1 + pad) {
                for cx in cell(x0 - pad)..=cell(x1 + pad) {
                    cells[cy * res + cx].push(f);
                }
            }
        }
        UvIndex { flat, res, cells }
    }

    /// Containing triangle and barycentric weights, preferring the most interior hit.
    fn locate(&self, p: &P2) -> Option<(usize, [f64; 3])> {
        let cell = |x: f64| ((x * self.res as f64).floor().max(0.0) as usize).min(self.res - 1);
        let mut best: Option<(usize, [f64; 3], f64)> = None;
        for &f in &self.cells[cell(p.y) * self.res + cell(p.x)] {
            let t = self.flat.cut.mesh.triangles[f];
            let Some(b) = barycentric_2d(p, &self.flat.uv[t[0]], &self.flat.uv[t[1]], &self.flat.uv[t[2]]) else {
                continue;
            };
            let worst = b[0].min(b[1]).min(b[2]);
            if worst >= -INSIDE_TOL && best.is_none_or(|(_, _, w)| worst > w) {
                best = Some((f, b, worst));
            }
        }
        best.map(|(f, b, _)| (f, b))
    }
}

fn min_max(it: impl Iterator<Item = f64>) -> (f64, f64) {
    it.fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), x| (lo.min(x), hi.max(x)))
}

fn barycentric_2d(p: &P2, a: &P2, b: &P2, c: &P2) -> Option<[f64; 3]> {
    let v0 = b - a;
    let v1 = c - a;
    let v2 = p - a;
    let den = v0.perp(&v1);
    if den.abs() <= f64::MIN_POSITIVE {
        return None;
    }
    let l1 = v2.perp(&v1) / den;
    let l2 = v0.perp(&v2) / den;
    Some([1.0 - l1 - l2, l1, l2])
}

/// Samples the flattened surface on the lattice (i/n, j/(m − 1)).
pub fn resample_grid(flat: &FlattenedFrame, n: usize, m: usize, surface: SurfaceLabel) -> Result<GridMesh> {
    if n < 3 || m < 2 {
        return Err(Error::Invalid(format!("grid {n}x{m} is too small (need n >= 3, m >= 2)")));
    }
    let index = UvIndex::new(flat);
    let mesh = &flat.cut.mesh;
    let mut points = Vec::with_capacity(n * m);
    for j in 0..m {
        let v = j as f64 / (m - 1) as f64;
        for i in 0..n {
            let u = i as f64 / n as f64;
            let (f, b) = index.locate(&P2::new(u, v)).ok_or(Error::OutsideDomain { u, v })?;
            let t = mesh.triangles[f];
            let b = b.map(|x| x.max(0.0));
            let s = b[0] + b[1] + b[2];
            let p =
                mesh.vertices[t[0]].coords * (b[0] / s) + mesh.vertices[t[1]].coords * (b[1] / s) + mesh.vertices[t[2]].coords * (b[2] / s);
            points.push(P3::from(p));
        }
    }
    Ok(GridMesh { n, m, points, frame_index: mesh.frame_index, surface })
}

/// Inner grid obtained by snapping every outer node to its closest inner surface point.
#[derive(Debug, Clone)]
pub struct Projection {
    pub grid: GridMesh,
    /// Nodes whose projection distance exceeded the layer-thickness bound.
    pub flagged: Vec<usize>,
}

pub fn project_to_inner(outer: &GridMesh, inner: &TriMeshFrame, max_distance: f64) -> Projection {
    let index = ClosestPointIndex::new(inner);
    let mut flagged = Vec::new();
    let mut hint = None;
    let mut points = outer
        .points
        .iter()
        .enumerate()
        .map(|(k, p)| {
            let c = index.closest_near(p, hint);
            hint = Some(c.face);
            if c.distance > max_distance {
                flagged.push(k);
            }
            c.point
        })
        .collect::<Vec<P3>>();
    // End rows go to the inner rims; a closest point on a flaring wall lands short of them.
    let n = outer.n;
    let inlet_centre = geom::centroid(outer.row(0).iter().copied());
    if let Ok((inlet, outlet)) = boundary_loops(inner, InletRule::Nearest(inlet_centre.into())) {
        for (j, rim) in [(0, &inlet), (outer.m - 1, &outlet)] {
            for i in 0..n {
                let k = j * n + i;
                points[k] = closest_on_loop(inner, &rim.vertices, &outer.points[k]).position(inner);
            }
        }
    }
    Projection { grid: GridMesh { points, frame_index: inner.frame_index, surface: SurfaceLabel::Inner, ..outer.clone() }, flagged }
}

/// Seam for the lumen: the outer seam endpoints moved to the closest lumen
/// boundary points, joined by the shortest geodesic between them.
pub fn align_lumen_seam(lumen: &TriMeshFrame, outer_seam: &GeodesicPath, opts: &GeodesicOptions) -> Result<GeodesicPath> {
    let topo = Topology::new(lumen);
    let start = outer_seam.start().position;
    let end = outer_seam.end().position;
    let (inlet, outlet) = boundary_loops_with(lumen, &topo, InletRule::Nearest(start.coords.into()))?;
    let from = closest_on_loop(lumen, &inlet.vertices, &start);
    let to = closest_on_loop(lumen, &outlet.vertices, &end);
    point_to_point_geodesic(lumen, &topo, from, to, opts)
}

/// Closest point of a closed boundary polyline; exact ties go to the edge with
/// the lowest vertex indices.
pub(crate) fn closest_on_loop(mesh: &TriMeshFrame, lp: &[usize], p: &P3) -> MeshLocation {
    let n = lp.len();
    let mut best: Option<(f64, (usize, usize), MeshLocation)> = None;
    for k in 0..n {
        let (a, b) = (lp[k], lp[(k + 1) % n]);
        let t = geom::closest_param_on_segment(p, &mesh.vertices[a], &mesh.vertices[b]);
        let loc = MeshLocation::on_edge(a, b, t);
        let d = (loc.position(mesh) - p).norm();
        let key = (a.min(b), a.max(b));
        let better = match &best {
            None => true,
            Some((bd, bk, _)) => d < *bd - 1e-12 * bd.max(1e-300) || ((d - bd).abs() <= 1e-12 * bd.max(1e-300) && key < *bk),
        };
        if better {
            best = Some((d, key, loc));
        }
    }
    best.map(|b| b.2).expect("boundary loop is not empty")
}
