//! Cross-section planes from the grid, planar contours and the check that
//! neighbouring sections do not cross inside the tube.

use std::collections::{HashMap, HashSet};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, P2, P3, V3};
use crate::mesh::TriMeshFrame;
use crate::parameterize::{GridMesh, SurfaceLabel};

/// Default number of arc-length samples per contour.
pub const CONTOUR_SAMPLES: usize = 100;

/// Plane of station `station` with an in-plane frame. The x-axis points from
/// the origin toward the u = 0 point of the row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SectionPlane {
    pub station: usize,
    pub origin: P3,
    /// Unit normal, pointing toward increasing v.
    pub normal: V3,
    pub x_axis: V3,
    pub y_axis: V3,
    /// Surface points defining the plane: G(0, v), G(1/3, v), G(2/3, v).
    pub defining: [P3; 3],
}

impl SectionPlane {
    /// Plane through three points with the normal turned toward `forward`.
    pub fn through(station: usize, defining: [P3; 3], forward: &V3) -> Result<Self> {
        let [a, b, c] = defining;
        let cross = geom::triangle_normal(&a, &b, &c);
        let scale = (b - a).norm().max((c - a).norm()).max((c - b).norm());
        if !(cross.norm() > 1e-12 * scale * scale) {
            return Err(Error::CollinearPlane(station));
        }
        let mut normal = cross.normalize();
        if normal.dot(forward) < 0.0 {
            normal = -normal;
        }
        let origin = geom::centroid(defining.iter().copied());
        Ok(Self::with_frame(station, origin, normal, a, defining))
    }

    /// Plane through `origin` with the given normal; `toward` fixes the x-axis.
    pub fn with_frame(station: usize, origin: P3, normal: V3, toward: P3, defining: [P3; 3]) -> Self {
        let normal = normal.normalize();
        let d = toward - origin;
        let mut x = d - normal * d.dot(&normal);
        if x.norm() <= 1e-12 * d.norm().max(1e-300) {
            x = geom::any_orthogonal(&normal);
        }
        let x_axis = x.normalize();
        let y_axis = normal.cross(&x_axis);
        SectionPlane { station, origin, normal, x_axis, y_axis, defining }
    }

    pub fn signed_distance(&self, p: &P3) -> f64 {
        (p - self.origin).dot(&self.normal)
    }

    pub fn to_plane(&self, p: &P3) -> P2 {
        let d = p - self.origin;
        P2::new(d.dot(&self.x_axis), d.dot(&self.y_axis))
    }

    pub fn to_space(&self, q: &P2) -> P3 {
        self.origin + self.x_axis * q.x + self.y_axis * q.y
    }
}

fn row_centroid(grid: &GridMesh, j: usize) -> P3 {
    geom::centroid(grid.row(j).iter().copied())
}

/// Direction of increasing v at station `j`, from neighbouring row centroids.
fn forward_at(grid: &GridMesh, j: usize) -> V3 {
    let lo = j.saturating_sub(1);
    let hi = (j + 1).min(grid.m - 1);
    row_centroid(grid, hi) - row_centroid(grid, lo)
}

/// One plane per station through G(0, v), G(1/3, v) and G(2/3, v).
pub fn section_planes(grid: &GridMesh) -> Result<Vec<SectionPlane>> {
    if grid.m < 2 {
        return Err(Error::Invalid("grid needs at least two stations".into()));
    }
    (0..grid.m)
        .map(|j| {
            let v = j as f64 / (grid.m - 1) as f64;
            let defining = [grid.at(0, j), grid.interpolate(1.0 / 3.0, v), grid.interpolate(2.0 / 3.0, v)];
            SectionPlane::through(j, defining, &forward_at(grid, j))
        })
        .collect()
}

/// Control family: planes through the row centroids, perpendicular to the
/// centroid polyline, between the two end planes of the grid family. These
/// can cross inside a bent tube.
pub fn centerline_planes(grid: &GridMesh) -> Result<Vec<SectionPlane>> {
    let ends = section_planes(grid)?;
    (0..grid.m)
        .map(|j| {
            if j == 0 || j == grid.m - 1 {
                return Ok(ends[j]);
            }
            let t = forward_at(grid, j);
            if t.norm() <= f64::MIN_POSITIVE {
                return Err(Error::CollinearPlane(j));
            }
            let v = j as f64 / (grid.m - 1) as f64;
            let defining = [grid.at(0, j), grid.interpolate(1.0 / 3.0, v), grid.interpolate(2.0 / 3.0, v)];
            Ok(SectionPlane::with_frame(j, row_centroid(grid, j), t, grid.at(0, j), defining))
        })
        .collect()
}

/// A closed planar cross-section, counterclockwise about the plane normal and
/// starting at the seam anchor.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Contour {
    pub station: usize,
    pub frame_index: usize,
    pub surface: SurfaceLabel,
    pub plane: SectionPlane,
    /// Arc-length samples in the plane frame; the closing segment is implicit.
    pub points: Vec<P2>,
    /// Contour point nearest the u = 0 grid node, in space.
    pub anchor: P3,
    /// Non-adjacent parts of the contour touch (a collapsed lumen).
    pub self_touching: bool,
}

impl Contour {
    pub fn area(&self) -> f64 {
        contour_area(&self.points)
    }

    pub fn perimeter(&self) -> f64 {
        closed_length(&self.points)
    }

    pub fn points_3d(&self) -> Vec<P3> {
        self.points.iter().map(|q| self.plane.to_space(q)).collect()
    }
}

/// Absolute shoelace area of a closed polyline.
pub fn contour_area(points: &[P2]) -> f64 {
    geom::polygon_signed_area(points).abs()
}

fn closed_length(points: &[P2]) -> f64 {
    let n = points.len();
    (0..n).map(|i| (points[(i + 1) % n] - points[i]).norm()).sum()
}

/// Raw plane-mesh intersection: closed loops of points in space.
fn intersection_loops(mesh: &TriMeshFrame, plane: &SectionPlane) -> Result<Vec<Vec<P3>>> {
    let d: Vec<f64> = mesh.vertices.iter().map(|p| plane.signed_distance(p)).collect();
    // Vertices on the plane count as positive, so crossings are edge interiors.
    let side = |v: usize| d[v] >= 0.0;
    let key = |a: usize, b: usize| (a.min(b), a.max(b));
    let mut ends: HashMap<(usize, usize), Vec<(usize, usize)>> = HashMap::new();
    let mut order: Vec<(usize, usize)> = Vec::new();
    for t in &mesh.triangles {
        if side(t[0]) == side(t[1]) && side(t[1]) == side(t[2]) {
            continue;
        }
        let mut crossing = [(0, 0); 2];
        let mut count = 0;
        for q in 0..3 {
            let (a, b) = (t[q], t[(q + 1) % 3]);
            if side(a) != side(b) && count < 2 {
                crossing[count] = key(a, b);
                count += 1;
            }
        }
        for (e, other) in [(crossing[0], crossing[1]), (crossing[1], crossing[0])] {
            let list = ends.entry(e).or_default();
            if list.is_empty() {
                order.push(e);
            }
            list.push(other);
        }
    }
    let point = |(a, b): (usize, usize)| {
        let t = d[a] / (d[a] - d[b]);
        mesh.vertices[a] + (mesh.vertices[b] - mesh.vertices[a]) * t
    };
    let mut used: HashSet<(usize, usize)> = HashSet::new();
    let mut loops = Vec::new();
    let mut open = 0;
    for &start in &order {
        if used.contains(&start) {
            continue;
        }
        // Walk to one end first so open chains are traversed whole.
        let mut first = start;
        let mut prev: Option<(usize, usize)> = None;
        loop {
            let next = ends[&first].iter().copied().find(|&e| Some(e) != prev);
            match next {
                Some(e) if ends[&first].len() == 2 && e != start => {
                    prev = Some(first);
                    first = e;
                }
                _ => break,
            }
        }
        let closed = ends[&first].len() == 2;
        let (mut cur, mut prev) = (if closed { start } else { first }, None);
        let mut chain = Vec::new();
        loop {
            used.insert(cur);
            chain.push(point(cur));
            let next = ends[&cur].iter().copied().find(|&e| Some(e) != prev && !used.contains(&e));
            match next {
                Some(e) => {
                    prev = Some(cur);
                    cur = e;
                }
                None => break,
            }
        }
        if closed && chain.len() >= 3 {
            loops.push(chain);
        } else {
            open += 1;
        }
    }
    if loops.is_empty() {
        return Err(Error::OpenContour(plane.station));
    }
    if open > 0 {
        log::debug!("station {}: {open} open intersection chains ignored", plane.station);
    }
    Ok(loops)
}

fn distance_to_closed(p: &P3, pts: &[P3]) -> (f64, usize, f64) {
    let n = pts.len();
    let mut best = (f64::INFINITY, 0, 0.0);
    for i in 0..n {
        let (a, b) = (pts[i], pts[(i + 1) % n]);
        let t = geom::closest_param_on_segment(p, &a, &b);
        let dist = (a + (b - a) * t - p).norm();
        if dist < best.0 {
            best = (dist, i, t);
        }
    }
    best
}

/// Resamples a closed polyline to `count` points evenly spaced in arc length,
/// starting at its first vertex.
pub fn resample_closed(points: &[P2], count: usize) -> Vec<P2> {
    let n = points.len();
    let total = closed_length(points);
    if n == 0 || total <= 0.0 {
        return vec![points.first().copied().unwrap_or(P2::origin()); count];
    }
    let mut out = Vec::with_capacity(count);
    let (mut seg, mut seg_start) = (0, 0.0);
    for k in 0..count {
        let s = total * k as f64 / count as f64;
        loop {
            let len = (points[(seg + 1) % n] - points[seg]).norm();
            if s <= seg_start + len || seg == n - 1 {
                let t = if len > 0.0 { ((s - seg_start) / len).clamp(0.0, 1.0) } else { 0.0 };
                out.push(points[seg] + (points[(seg + 1) % n] - points[seg]) * t);
                break;
            }
            seg_start += len;
            seg += 1;
        }
    }
    out
}

/// True when two non-neighbouring segments come closer than `tol`.
fn touches_itself(points: &[P2], tol: f64) -> bool {
    let n = points.len();
    let seg_dist = |i: usize, j: usize| {
        let (a, b) = (points[i], points[(i + 1) % n]);
        let (c, d) = (points[j], points[(j + 1) % n]);
        if segments_cross(&a, &b, &c, &d) {
            return 0.0;
        }
        [point_segment(&a, &c, &d), point_segment(&b, &c, &d), point_segment(&c, &a, &b), point_segment(&d, &a, &b)]
            .into_iter()
            .fold(f64::INFINITY, f64::min)
    };
    for i in 0..n {
        for j in i + 2..n {
            if i == 0 && j == n - 1 {
                continue;
            }
            if seg_dist(i, j) < tol {
                return true;
            }
        }
    }
    false
}

fn point_segment(p: &P2, a: &P2, b: &P2) -> f64 {
    let ab = b - a;
    let len2 = ab.norm_squared();
    let t = if len2 > 0.0 { ((p - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
    (a + ab * t - p).norm()
}

fn segments_cross(a: &P2, b: &P2, c: &P2, d: &P2) -> bool {
    let o = |p: &P2, q: &P2, r: &P2| (q - p).perp(&(r - p));
    let (d1, d2) = (o(a, b, c), o(a, b, d));
    let (d3, d4) = (o(c, d, a), o(c, d, b));
    d1 * d2 < 0.0 && d3 * d4 < 0.0
}

/// Intersects the mesh with a section plane. When the plane cuts several
/// loops the one passing closest to the defining points is kept. The result
/// is counterclockwise, starts at the seam anchor and has `samples` points.
pub fn extract_contour(mesh: &TriMeshFrame, plane: &SectionPlane, surface: SurfaceLabel, samples: usize) -> Result<Contour> {
    let loops = match intersection_loops(mesh, plane) {
        Ok(l) => l,
        // A plane lying on a planar boundary loop only touches the surface;
        // nudge it into the tube either way.
        Err(e) => {
            let delta = 1e-7 * mesh.bounding_diagonal();
            [delta, -delta]
                .into_iter()
                .find_map(|s| {
                    let shifted = SectionPlane { origin: plane.origin + plane.normal * s, ..*plane };
                    intersection_loops(mesh, &shifted).ok()
                })
                .ok_or(e)?
        }
    };
    let score = |pts: &[P3]| plane.defining.iter().map(|p| distance_to_closed(p, pts).0).sum::<f64>();
    let chosen = match loops.as_slice() {
        [only] => only,
        _ => loops.iter().map(|l| (score(l), l)).min_by(|a, b| a.0.total_cmp(&b.0)).map(|(_, l)| l).expect("at least one loop"),
    };
    let (_, seg, t) = distance_to_closed(&plane.defining[0], chosen);
    let n = chosen.len();
    let anchor = chosen[seg] + (chosen[(seg + 1) % n] - chosen[seg]) * t;
    let mut flat: Vec<P2> = chosen.iter().map(|p| plane.to_plane(p)).collect();
    // Start at the anchor.
    let mut ring = vec![plane.to_plane(&anchor)];
    ring.extend(flat.drain(seg + 1..));
    ring.extend(flat.drain(..=seg));
    if geom::polygon_signed_area(&ring) < 0.0 {
        ring[1..].reverse();
    }
    ring.dedup_by(|a, b| (*a - *b).norm() == 0.0);
    let perimeter = closed_length(&ring);
    let points = resample_closed(&ring, samples.max(3));
    let spacing = perimeter / points.len() as f64;
    let self_touching = touches_itself(&points, 0.01 * spacing);
    Ok(Contour { station: plane.station, frame_index: mesh.frame_index, surface, plane: *plane, points, anchor, self_touching })
}

/// Contours of one surface at every plane.
pub fn extract_contours(mesh: &TriMeshFrame, planes: &[SectionPlane], surface: SurfaceLabel, samples: usize) -> Result<Vec<Contour>> {
    planes.iter().map(|p| extract_contour(mesh, p, surface, samples)).collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Crossing {
    /// A point of contour j lies beyond plane j + 1.
    Forward,
    /// A point of contour j + 1 lies behind plane j.
    Backward,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Violation {
    pub frame: usize,
    /// Lower station of the offending pair.
    pub station: usize,
    pub kind: Crossing,
    pub points: usize,
    /// Largest distance past the other plane.
    pub depth: f64,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct NonIntersectionReport {
    pub pairs_checked: usize,
    pub violations: Vec<Violation>,
}

impl NonIntersectionReport {
    pub fn passed(&self) -> bool {
        self.violations.is_empty()
    }

    pub fn merge(&mut self, other: NonIntersectionReport) {
        self.pairs_checked += other.pairs_checked;
        self.violations.extend(other.violations);
    }
}

/// Checks adjacent contours of one frame against each other's planes. Points
/// within `tolerance` of the other plane are not counted.
pub fn validate_nonintersection(contours: &[Contour], tolerance: f64) -> NonIntersectionReport {
    let mut report = NonIntersectionReport::default();
    for w in contours.windows(2) {
        let (lo, hi) = (&w[0], &w[1]);
        report.pairs_checked += 1;
        let check = |c: &Contour, plane: &SectionPlane, sign: f64| {
            let beyond: Vec<f64> = c.points_3d().iter().map(|p| sign * plane.signed_distance(p)).filter(|&s| s > tolerance).collect();
            (beyond.len(), beyond.into_iter().fold(0.0, f64::max))
        };
        for (kind, (count, depth)) in [(Crossing::Forward, check(lo, &hi.plane, 1.0)), (Crossing::Backward, check(hi, &lo.plane, -1.0))] {
            if count > 0 {
                report.violations.push(Violation { frame: lo.frame_index, station: lo.station, kind, points: count, depth });
            }
        }
    }
    report
}

/// Sum of contour area times the spacing between plane origins (trapezoids).
pub fn sectioned_volume(contours: &[Contour]) -> f64 {
    contours.windows(2).map(|w| 0.5 * (w[0].area() + w[1].area()) * (w[1].plane.origin - w[0].plane.origin).norm()).sum()
}
