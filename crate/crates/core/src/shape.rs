//! Shape measures over the parameterized sequence: mean and radial curvature
//! images, per-pixel normalization, strain energy and contour PCA.

use log::warn;
use nalgebra::{DMatrix, Matrix2, Vector2};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, P2, P3, V3};
use crate::mesh::{Topology, TriMeshFrame};
use crate::parameterize::GridMesh;
use crate::sections::Contour;
use crate::temporal::CyclePhaseMap;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum CurvatureKind {
    Mean,
    Radial,
}

/// Curvature sampled on the grid nodes, 1/mm.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureImage {
    pub kind: CurvatureKind,
    pub n: usize,
    pub m: usize,
    pub frame_index: usize,
    /// Row-major by station: `values[j * n + i]`.
    pub values: Vec<f64>,
    /// Rows whose values are copied or missing rather than measured.
    pub flagged_rows: Vec<bool>,
}

impl CurvatureImage {
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.values[j * self.n + i]
    }
}

/// Signed mean curvature per vertex from the cotangent Laplacian with mixed
/// Voronoi areas; positive where the surface bends away from its normals,
/// as on a sphere with outward normals. Boundary vertices are marked.
pub fn mean_curvature_mesh(mesh: &TriMeshFrame) -> (Vec<f64>, Vec<bool>) {
    let nv = mesh.vertices.len();
    let mut lap = vec![V3::zeros(); nv];
    let mut area = vec![0.0; nv];
    for t in &mesh.triangles {
        let p = [mesh.vertices[t[0]], mesh.vertices[t[1]], mesh.vertices[t[2]]];
        let tri_area = geom::triangle_area(&p[0], &p[1], &p[2]);
        if tri_area <= 0.0 {
            continue;
        }
        let cot: [f64; 3] = std::array::from_fn(|k| geom::cot_at(&p[k], &p[(k + 1) % 3], &p[(k + 2) % 3]));
        let obtuse = (0..3).find(|&k| cot[k] < 0.0);
        for k in 0..3 {
            let (a, b) = ((k + 1) % 3, (k + 2) % 3);
            lap[t[k]] += (p[a] - p[k]) * cot[b] + (p[b] - p[k]) * cot[a];
            area[t[k]] += match obtuse {
                None => ((p[k] - p[a]).norm_squared() * cot[b] + (p[k] - p[b]).norm_squared() * cot[a]) / 8.0,
                Some(o) if o == k => tri_area / 2.0,
                Some(_) => tri_area / 4.0,
            };
        }
    }
    let normals = mesh.vertex_normals();
    let topo = Topology::new(mesh);
    let mut boundary = vec![false; nv];
    for (e, &[a, b]) in topo.edges.iter().enumerate() {
        if topo.is_boundary_edge(e) {
            boundary[a] = true;
            boundary[b] = true;
        }
    }
    let h = (0..nv)
        .map(|v| {
            if area[v] <= 0.0 {
                return 0.0;
            }
            // Δx = −2H n.
            let k = lap[v] / (2.0 * area[v]);
            let h = 0.5 * k.norm();
            if k.dot(&normals[v]) > 0.0 {
                -h
            } else {
                h
            }
        })
        .collect();
    (h, boundary)
}

/// Mean curvature on the grid nodes; the first and last rows repeat their
/// interior neighbours and are flagged.
pub fn mean_curvature(grid: &GridMesh) -> CurvatureImage {
    let (h, _) = mean_curvature_mesh(&grid.to_mesh());
    let (n, m) = (grid.n, grid.m);
    let mut values = h;
    let mut flagged_rows = vec![false; m];
    if m >= 3 {
        for (dst, src) in [(0, 1), (m - 1, m - 2)] {
            let row: Vec<f64> = values[src * n..(src + 1) * n].to_vec();
            values[dst * n..(dst + 1) * n].copy_from_slice(&row);
            flagged_rows[dst] = true;
        }
    } else {
        flagged_rows.iter_mut().for_each(|f| *f = true);
    }
    CurvatureImage { kind: CurvatureKind::Mean, n, m, frame_index: grid.frame_index, values, flagged_rows }
}

/// Signed planar curvature at each sample of a closed curve from the circle
/// through the samples `stencil` steps to either side; positive on convex
/// parts of a counterclockwise curve.
pub fn contour_curvature(points: &[P2], stencil: usize) -> Vec<f64> {
    let n = points.len();
    let w = stencil.max(1);
    (0..n)
        .map(|k| {
            let (a, b, c) = (points[(k + n - w % n) % n], points[k], points[(k + w) % n]);
            let (ab, bc, ac) = ((b - a).norm(), (c - b).norm(), (c - a).norm());
            let denom = ab * bc * ac;
            if denom <= 0.0 {
                0.0
            } else {
                2.0 * (b - a).perp(&(c - b)) / denom
            }
        })
        .collect()
}

/// Stencil half-width for contours resampled from an `n`-gon: each side
/// spans about three polygon edges so the circle sees the polygon's turning
/// rather than single corners.
pub fn default_stencil(samples: usize, n: usize) -> usize {
    (3 * samples).div_ceil(n.max(1)).max(1)
}

/// Radial curvature of each station's contour, carried to the grid columns
/// through the closest contour point to each projected grid node.
/// `contours[j]` must be the contour at station j.
pub fn radial_curvature_image(grid: &GridMesh, contours: &[Contour], stencil: usize) -> CurvatureImage {
    let (n, m) = (grid.n, grid.m);
    let mut values = vec![0.0; n * m];
    let mut flagged_rows = vec![false; m];
    for j in 0..m {
        let Some(c) = contours.iter().find(|c| c.station == j) else {
            flagged_rows[j] = true;
            continue;
        };
        let spacing = c.perimeter() / c.points.len().max(1) as f64;
        if c.points.len() < 3 || !(c.area().abs() > spacing * spacing * 1e-6) {
            warn!("station {j}: collapsed contour, radial curvature row flagged");
            flagged_rows[j] = true;
            continue;
        }
        let kappa = contour_curvature(&c.points, stencil);
        let np = c.points.len();
        for i in 0..n {
            let q = c.plane.to_plane(&grid.at(i, j));
            let (mut best, mut value) = (f64::INFINITY, 0.0);
            for k in 0..np {
                let (a, b) = (c.points[k], c.points[(k + 1) % np]);
                let ab = b - a;
                let len2 = ab.norm_squared();
                let t = if len2 > 0.0 { ((q - a).dot(&ab) / len2).clamp(0.0, 1.0) } else { 0.0 };
                let d = (a + ab * t - q).norm_squared();
                if d < best {
                    best = d;
                    value = kappa[k] * (1.0 - t) + kappa[(k + 1) % np] * t;
                }
            }
            values[j * n + i] = value;
        }
    }
    CurvatureImage { kind: CurvatureKind::Radial, n, m, frame_index: grid.frame_index, values, flagged_rows }
}

/// A curvature stack rescaled per pixel to [0, 1] over the cycle.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NormalizedStack {
    pub n: usize,
    pub m: usize,
    /// One image per frame, row-major by station.
    pub frames: Vec<Vec<f64>>,
    /// Pixels that never change; they read 0.5.
    pub constant: Vec<bool>,
}

pub fn normalize_per_pixel(stack: &[CurvatureImage]) -> Result<NormalizedStack> {
    let Some(first) = stack.first() else {
        return Err(Error::Invalid("empty curvature stack".into()));
    };
    let (n, m) = (first.n, first.m);
    if stack.iter().any(|c| c.n != n || c.m != m) {
        return Err(Error::Invalid("curvature images differ in size".into()));
    }
    let cells = n * m;
    let mut lo = vec![f64::INFINITY; cells];
    let mut hi = vec![f64::NEG_INFINITY; cells];
    for c in stack {
        for (p, &v) in c.values.iter().enumerate() {
            lo[p] = lo[p].min(v);
            hi[p] = hi[p].max(v);
        }
    }
    let constant: Vec<bool> = (0..cells).map(|p| hi[p] - lo[p] <= 1e-12 * hi[p].abs().max(lo[p].abs()).max(1e-300)).collect();
    let frames = stack
        .iter()
        .map(|c| (0..cells).map(|p| if constant[p] { 0.5 } else { (c.values[p] - lo[p]) / (hi[p] - lo[p]) }).collect())
        .collect();
    Ok(NormalizedStack { n, m, frames, constant })
}

/// Principal stretches and strain energy per quad cell relative to a
/// reference frame.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StrainField {
    pub n: usize,
    /// Cells along the tube (stations − 1).
    pub m: usize,
    pub frame_index: usize,
    /// Larger stretch per cell, `[j * n + i]`.
    pub lambda1: Vec<f64>,
    pub lambda2: Vec<f64>,
    /// (λ₁ − 1)² + (λ₂ − 1)².
    pub energy: Vec<f64>,
    /// Cells whose reference quad is degenerate; their energy reads 0.
    pub flagged: Vec<bool>,
}

/// Corner nodes of cell (i, j) in lattice order and the shared diagonal as
/// positions into that list.
fn cell_corners(n: usize, i: usize, j: usize) -> ([usize; 4], (usize, usize)) {
    let idx = |i: usize, j: usize| j * n + i % n;
    let corners = [idx(i, j), idx(i + 1, j), idx(i + 1, j + 1), idx(i, j + 1)];
    let diagonal = if (i + j) % 2 == 0 { (0, 2) } else { (1, 3) };
    (corners, diagonal)
}

/// The quad developed isometrically into the plane: each triangle keeps its
/// edge lengths and the two sit on opposite sides of the shared diagonal.
fn develop_quad(p: &[P3; 4], diagonal: (usize, usize)) -> Option<[Vector2<f64>; 4]> {
    let (a, b) = diagonal;
    let axis = p[b] - p[a];
    let len = axis.norm();
    if len <= 0.0 {
        return None;
    }
    let e = axis / len;
    let mut out = [Vector2::zeros(); 4];
    out[b] = Vector2::new(len, 0.0);
    let others: Vec<usize> = (0..4).filter(|&k| k != a && k != b).collect();
    for (side, &k) in [1.0, -1.0].iter().zip(&others) {
        let d = p[k] - p[a];
        let x = d.dot(&e);
        let y = (d - e * x).norm();
        out[k] = Vector2::new(x, side * y);
    }
    Some(out)
}

fn cell_stretches(reference: &[P3; 4], current: &[P3; 4], diagonal: (usize, usize)) -> Option<(f64, f64)> {
    let r = develop_quad(reference, diagonal)?;
    let c = develop_quad(current, diagonal)?;
    let rc = r.iter().sum::<Vector2<f64>>() / 4.0;
    let cc = c.iter().sum::<Vector2<f64>>() / 4.0;
    let mut rr = Matrix2::zeros();
    let mut cr = Matrix2::zeros();
    for k in 0..4 {
        let (x, y) = (r[k] - rc, c[k] - cc);
        rr += x * x.transpose();
        cr += y * x.transpose();
    }
    let scale = rr.trace();
    if !(scale > 0.0) || rr.determinant() <= 1e-12 * scale * scale {
        return None;
    }
    let f = cr * rr.try_inverse()?;
    let sv = f.svd(false, false).singular_values;
    Some((sv[0].max(sv[1]), sv[0].min(sv[1])))
}

/// Strain of `current` against `reference`, cell by cell.
pub fn strain_energy(current: &GridMesh, reference: &GridMesh) -> Result<StrainField> {
    if current.n != reference.n || current.m != reference.m {
        return Err(Error::Invalid(format!(
            "strain needs equal grids, got {}x{} and {}x{}",
            current.n, current.m, reference.n, reference.m
        )));
    }
    let (n, cells_m) = (current.n, current.m.saturating_sub(1));
    let cells: Vec<(f64, f64, bool)> = (0..n * cells_m)
        .into_par_iter()
        .map(|c| {
            let (i, j) = (c % n, c / n);
            let (idx, diagonal) = cell_corners(n, i, j);
            let rp = idx.map(|k| reference.points[k]);
            let cp = idx.map(|k| current.points[k]);
            match cell_stretches(&rp, &cp, diagonal) {
                Some((l1, l2)) => (l1, l2, false),
                None => (1.0, 1.0, true),
            }
        })
        .collect();
    let flagged: Vec<bool> = cells.iter().map(|c| c.2).collect();
    if let Some(p) = flagged.iter().position(|&f| f) {
        warn!("degenerate reference cell ({}, {}) and {} more", p % n, p / n, flagged.iter().filter(|&&f| f).count() - 1);
    }
    Ok(StrainField {
        n,
        m: cells_m,
        frame_index: current.frame_index,
        lambda1: cells.iter().map(|c| c.0).collect(),
        lambda2: cells.iter().map(|c| c.1).collect(),
        energy: cells.iter().map(|c| (c.0 - 1.0).powi(2) + (c.1 - 1.0).powi(2)).collect(),
        flagged,
    })
}

/// Strain of every frame against the given reference frame.
pub fn strain_sequence(frames: &[GridMesh], reference: usize) -> Result<Vec<StrainField>> {
    let r = frames.get(reference).ok_or_else(|| Error::Invalid(format!("no reference frame {reference}")))?;
    frames.iter().map(|f| strain_energy(f, r)).collect()
}

/// Energies rescaled to [0, 1], either by the largest value of the whole
/// sequence or by each frame's own largest value.
pub fn normalize_energy(fields: &[StrainField], per_frame: bool) -> Vec<Vec<f64>> {
    let peak = |f: &StrainField| f.energy.iter().copied().fold(0.0, f64::max);
    let global = fields.iter().map(peak).fold(0.0, f64::max);
    fields
        .iter()
        .map(|f| {
            let s = if per_frame { peak(f) } else { global };
            f.energy.iter().map(|e| if s > 0.0 { e / s } else { 0.0 }).collect()
        })
        .collect()
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Expansion,
    Contraction,
}

impl Phase {
    pub fn name(self) -> &'static str {
        match self {
            Phase::Expansion => "expansion",
            Phase::Contraction => "contraction",
        }
    }
}

/// Phase of a source frame: expansion runs from the minimum-volume frame up
/// to (but excluding) the maximum-volume frame.
pub fn phase_of(map: &CyclePhaseMap, frame: usize) -> Phase {
    let t = map.frame_count;
    let since_min = (frame + t - map.min_index) % t;
    let rise = (map.max_index + t - map.min_index) % t;
    if since_min < rise {
        Phase::Expansion
    } else {
        Phase::Contraction
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeMode {
    /// Unit vector over the stacked (x, y) sample coordinates.
    pub vector: Vec<f64>,
    pub variance: f64,
    /// Share of the total variance.
    pub share: f64,
    /// One-standard-deviation displacement of every sample.
    pub displacement: Vec<P2>,
}

impl ShapeMode {
    /// Unit direction and length of each sample's displacement.
    pub fn directions(&self) -> Vec<(P2, f64)> {
        self.displacement
            .iter()
            .map(|d| {
                let len = d.coords.norm();
                (if len > 0.0 { P2::from(d.coords / len) } else { P2::origin() }, len)
            })
            .collect()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ShapeModes {
    pub station: Option<usize>,
    pub phase: Option<Phase>,
    pub samples: usize,
    pub count: usize,
    /// Mean of the centred contours.
    pub mean: Vec<P2>,
    pub modes: Vec<ShapeMode>,
    pub total_variance: f64,
}

impl ShapeModes {
    /// Mean contour plus the weighted modes.
    pub fn reconstruct(&self, weights: &[f64]) -> Vec<P2> {
        let mut out = self.mean.clone();
        for (mode, w) in self.modes.iter().zip(weights) {
            for (k, p) in out.iter_mut().enumerate() {
                p.x += w * mode.vector[2 * k];
                p.y += w * mode.vector[2 * k + 1];
            }
        }
        out
    }

    /// Mode weights of a contour after centring it.
    pub fn project(&self, points: &[P2]) -> Vec<f64> {
        let centred = centre(points);
        self.modes
            .iter()
            .map(|mode| {
                centred
                    .iter()
                    .zip(&self.mean)
                    .enumerate()
                    .map(|(k, (p, q))| (p.x - q.x) * mode.vector[2 * k] + (p.y - q.y) * mode.vector[2 * k + 1])
                    .sum()
            })
            .collect()
    }
}

/// Translates a contour so its sample mean sits at the origin.
pub fn centre(points: &[P2]) -> Vec<P2> {
    let c = points.iter().fold(V2Sum::default(), |s, p| s.add(p)).mean();
    points.iter().map(|p| P2::from(p.coords - c)).collect()
}

#[derive(Default)]
struct V2Sum(f64, f64, usize);

impl V2Sum {
    fn add(self, p: &P2) -> Self {
        V2Sum(self.0 + p.x, self.1 + p.y, self.2 + 1)
    }

    fn mean(&self) -> Vector2<f64> {
        if self.2 == 0 {
            Vector2::zeros()
        } else {
            Vector2::new(self.0, self.1) / self.2 as f64
        }
    }
}

/// Linear PCA of equally sampled, seam-aligned contours after removing their
/// centroids. Up to `modes` modes with nonzero variance are kept.
pub fn contour_pca(contours: &[Vec<P2>], modes: usize) -> Result<ShapeModes> {
    let count = contours.len();
    if count < 3 {
        return Err(Error::Invalid(format!("contour PCA needs at least 3 contours, got {count}")));
    }
    let samples = contours[0].len();
    if samples < 3 || contours.iter().any(|c| c.len() != samples) {
        return Err(Error::Invalid("contours must share a sample count of at least 3".into()));
    }
    let centred: Vec<Vec<P2>> = contours.iter().map(|c| centre(c)).collect();
    let dim = 2 * samples;
    let mut mean = vec![0.0; dim];
    for c in &centred {
        for (k, p) in c.iter().enumerate() {
            mean[2 * k] += p.x / count as f64;
            mean[2 * k + 1] += p.y / count as f64;
        }
    }
    let data = DMatrix::from_fn(count, dim, |r, col| {
        let p = centred[r][col / 2];
        (if col % 2 == 0 { p.x } else { p.y }) - mean[col]
    });
    let svd = data.svd(false, true);
    let v_t = svd.v_t.expect("right singular vectors requested");
    let variances: Vec<f64> = svd.singular_values.iter().map(|s| s * s / (count - 1) as f64).collect();
    let total: f64 = variances.iter().sum();
    let mut order: Vec<usize> = (0..variances.len()).collect();
    order.sort_by(|&a, &b| variances[b].total_cmp(&variances[a]));
    // Rounding in the mean leaves residues far below any real variation.
    let size: f64 = mean.iter().map(|x| x * x).sum::<f64>() / samples as f64;
    let tiny = 1e-24 * size.max(f64::MIN_POSITIVE);
    let available: Vec<usize> = order.into_iter().filter(|&k| variances[k] > tiny).collect();
    let total = if available.is_empty() { 0.0 } else { total };
    if modes > available.len() {
        warn!("requested {modes} shape modes, only {} available", available.len());
    }
    let mean_points: Vec<P2> = (0..samples).map(|k| P2::new(mean[2 * k], mean[2 * k + 1])).collect();
    let modes = available
        .into_iter()
        .take(modes)
        .map(|k| {
            let mut vector: Vec<f64> = v_t.row(k).iter().copied().collect();
            // Orient each mode to push the mean contour outward on balance.
            let outward: f64 = mean_points.iter().enumerate().map(|(s, p)| p.x * vector[2 * s] + p.y * vector[2 * s + 1]).sum();
            if outward < 0.0 {
                vector.iter_mut().for_each(|x| *x = -*x);
            }
            let sd = variances[k].sqrt();
            let displacement = (0..samples).map(|s| P2::new(vector[2 * s] * sd, vector[2 * s + 1] * sd)).collect();
            ShapeMode { vector, variance: variances[k], share: variances[k] / total, displacement }
        })
        .collect::<Vec<_>>();
    Ok(ShapeModes { station: None, phase: None, samples, count, mean: mean_points, modes, total_variance: total })
}

/// PCA of one station's contours split by cycle phase.
pub fn contour_pca_by_phase(contours: &[&Contour], map: &CyclePhaseMap, modes: usize) -> Vec<Result<ShapeModes>> {
    [Phase::Expansion, Phase::Contraction]
        .into_iter()
        .map(|phase| {
            let group: Vec<Vec<P2>> = contours.iter().filter(|c| phase_of(map, c.frame_index) == phase).map(|c| c.points.clone()).collect();
            let station = contours.first().map(|c| c.station);
            contour_pca(&group, modes).map(|mut s| {
                s.station = station;
                s.phase = Some(phase);
                s
            })
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mesh::test_shapes;
    use crate::parameterize::SurfaceLabel;
    use crate::sections::{extract_contours, section_planes, CONTOUR_SAMPLES};
    use crate::temporal::align_cycle_by_volume;
    use nalgebra::{Rotation3, Vector3};
    use std::f64::consts::PI;

    fn lattice(n: usize, m: usize, f: impl Fn(f64, f64) -> P3) -> GridMesh {
        let points =
            (0..m).flat_map(|j| (0..n).map(move |i| (i, j))).map(|(i, j)| f(i as f64 / n as f64, j as f64 / (m - 1) as f64)).collect();
        GridMesh { n, m, points, frame_index: 0, surface: SurfaceLabel::Outer }
    }

    fn circle(r: f64, samples: usize, phase: f64) -> Vec<P2> {
        (0..samples)
            .map(|k| {
                let a = 2.0 * PI * k as f64 / samples as f64 + phase;
                P2::new(r * a.cos(), r * a.sin())
            })
            .collect()
    }

    #[test]
    fn sphere_band_mean_curvature() {
        let r = 1.5;
        let g = lattice(96, 60, |u, v| {
            let (th, lat) = (2.0 * PI * u, -1.0 + 2.0 * v);
            P3::new(r * lat.cos() * th.cos(), r * lat.cos() * th.sin(), r * lat.sin())
        });
        let img = mean_curvature(&g);
        assert!(img.flagged_rows[0] && img.flagged_rows[59]);
        for j in 1..59 {
            for i in 0..96 {
                assert!((img.get(i, j) * r - 1.0).abs() < 0.02, "({i},{j}) {}", img.get(i, j));
            }
        }
    }

    #[test]
    fn icosphere_mean_curvature() {
        let r = 2.0;
        let (h, boundary) = mean_curvature_mesh(&test_shapes::icosphere(r, 4));
        assert!(boundary.iter().all(|b| !b));
        for v in h {
            assert!((v * r - 1.0).abs() < 0.02, "{v}");
        }
    }

    #[test]
    fn cylinder_and_plane_mean_curvature() {
        let r = 0.4;
        let g = lattice(80, 50, |u, v| {
            let th = 2.0 * PI * u;
            P3::new(r * th.cos(), r * th.sin(), 3.0 * v)
        });
        let img = mean_curvature(&g);
        for j in 1..49 {
            for i in 0..80 {
                assert!((img.get(i, j) * 2.0 * r - 1.0).abs() < 0.02, "{}", img.get(i, j));
            }
        }
        let flat = TriMeshFrame::new(
            (0..10).flat_map(|j| (0..10).map(move |i| P3::new(i as f64 * 0.1, j as f64 * 0.13, 0.0))).collect(),
            crate::parameterize::lattice_triangles(10, 10)
                .into_iter()
                .filter(|t| !(t.iter().any(|&k| k % 10 == 0) && t.iter().any(|&k| k % 10 == 9)))
                .collect(),
        );
        let (h, boundary) = mean_curvature_mesh(&flat);
        assert_eq!(boundary.iter().filter(|&&b| !b).count(), 64);
        assert!(h.iter().zip(&boundary).all(|(v, b)| *b || v.abs() < 1e-6));
    }

    #[test]
    fn circle_curvature_and_convergence() {
        let r = 0.7;
        let k = contour_curvature(&circle(r, 100, 0.3), 1);
        assert!(k.iter().all(|v| (v * r - 1.0).abs() < 0.02));
        // Error on a polygonal section halves or better as spacing halves.
        let err = |samples: usize| {
            let ring = crate::sections::resample_closed(&circle(r, 60, 0.0), samples);
            let k = contour_curvature(&ring, samples / 25);
            k.iter().map(|v| (v * r - 1.0).abs()).fold(0.0, f64::max)
        };
        let poly = |sides: usize| {
            let ring = crate::sections::resample_closed(&circle(r, sides, 0.0), 100);
            contour_curvature(&ring, 4).iter().map(|v| (v * r - 1.0).abs()).fold(0.0, f64::max)
        };
        assert!(poly(80) <= 0.5 * poly(40), "{} {}", poly(40), poly(80));
        let _ = err;
    }

    #[test]
    fn ellipse_curvature_ratio() {
        let (a, b) = (2.0, 1.0);
        let dense: Vec<P2> = (0..20000)
            .map(|k| {
                let t = 2.0 * PI * k as f64 / 20000.0;
                P2::new(a * t.cos(), b * t.sin())
            })
            .collect();
        let ring = crate::sections::resample_closed(&dense, CONTOUR_SAMPLES);
        let k = contour_curvature(&ring, 1);
        let (lo, hi) = k.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
        assert!((hi / lo / 8.0 - 1.0).abs() < 0.05, "{}", hi / lo);
    }

    fn radial_image(grid: &GridMesh, stencil: usize) -> CurvatureImage {
        let planes = section_planes(grid).unwrap();
        let contours = extract_contours(&grid.to_mesh(), &planes, SurfaceLabel::Outer, CONTOUR_SAMPLES).unwrap();
        radial_curvature_image(grid, &contours, stencil)
    }

    #[test]
    fn bend_does_not_change_radial_curvature() {
        let (n, m) = (80, 40);
        let r = |v: f64| 0.5 - 0.25 * v;
        let straight = lattice(n, m, |u, v| {
            let th = 2.0 * PI * u;
            P3::new(r(v) * th.cos(), r(v) * th.sin(), 3.0 * v)
        });
        // Bend the centreline into a half circle of radius 3/π; sections stay
        // perpendicular to it.
        let rb = 3.0 / PI;
        let bent = lattice(n, m, |u, v| {
            let (th, phi) = (2.0 * PI * u, PI * v);
            let rho = rb + r(v) * th.cos();
            P3::new(rho * phi.cos(), r(v) * th.sin(), rho * phi.sin())
        });
        let a = radial_image(&straight, 1);
        let b = radial_image(&bent, 1);
        for (x, y) in a.values.iter().zip(&b.values) {
            assert!((x - y).abs() / x.abs() < 0.01, "{x} {y}");
        }
        let c = radial_image(&straight, default_stencil(CONTOUR_SAMPLES, n));
        for j in 0..m {
            for i in 0..n {
                assert!((c.get(i, j) * r(j as f64 / (m - 1) as f64) - 1.0).abs() < 0.02, "({i},{j})");
            }
        }
    }

    #[test]
    fn collapsed_section_flags_its_row() {
        let g = lattice(16, 5, |u, v| {
            let th = 2.0 * PI * u;
            P3::new(th.cos(), th.sin(), v)
        });
        let planes = section_planes(&g).unwrap();
        let mut contours = extract_contours(&g.to_mesh(), &planes, SurfaceLabel::Outer, 40).unwrap();
        contours[2].points.iter_mut().for_each(|p| *p = P2::new(0.0, 0.0));
        let img = radial_curvature_image(&g, &contours, 1);
        assert!(img.flagged_rows[2]);
        assert_eq!(img.flagged_rows.iter().filter(|&&f| f).count(), 1);
    }

    #[test]
    fn per_pixel_normalization() {
        let frames: Vec<CurvatureImage> = (0..20)
            .map(|k| {
                let s = (2.0 * PI * k as f64 / 20.0).sin();
                CurvatureImage {
                    kind: CurvatureKind::Radial,
                    n: 2,
                    m: 1,
                    frame_index: k,
                    values: vec![3.0 + s, 1.0],
                    flagged_rows: vec![false],
                }
            })
            .collect();
        let norm = normalize_per_pixel(&frames).unwrap();
        let px: Vec<f64> = norm.frames.iter().map(|f| f[0]).collect();
        assert_eq!(px.iter().copied().fold(f64::INFINITY, f64::min), 0.0);
        assert_eq!(px.iter().copied().fold(0.0, f64::max), 1.0);
        assert!(!norm.constant[0] && norm.constant[1]);
        assert!(norm.frames.iter().all(|f| f[1] == 0.5));
    }

    #[test]
    fn synchronized_tube_peaks_together() {
        let stack: Vec<CurvatureImage> = (0..12)
            .map(|k| {
                let s = 1.0 + 0.2 * (2.0 * PI * k as f64 / 12.0).cos();
                let mut g = lattice(24, 6, |u, v| {
                    let th = 2.0 * PI * u;
                    let r = s * (0.5 + 0.2 * v);
                    P3::new(r * th.cos(), 0.6 * r * th.sin(), 2.0 * v)
                });
                g.frame_index = k;
                radial_image(&g, 1)
            })
            .collect();
        let norm = normalize_per_pixel(&stack).unwrap();
        // Smallest section, largest curvature: frame 6 everywhere.
        for p in 0..24 * 6 {
            assert!((norm.frames[6][p] - 1.0).abs() < 1e-9, "pixel {p}");
        }
    }

    fn tube_grid(n: usize, m: usize, r: impl Fn(f64) -> f64) -> GridMesh {
        lattice(n, m, |u, v| {
            let th = 2.0 * PI * u;
            P3::new(r(v) * th.cos(), r(v) * th.sin(), 2.0 * v)
        })
    }

    #[test]
    fn strain_of_identity_scale_and_rigid_motion() {
        let reference = tube_grid(40, 20, |v| 0.5 - 0.2 * v);
        let id = strain_energy(&reference, &reference).unwrap();
        assert!(id.energy.iter().all(|&e| e < 1e-12));
        let scaled = GridMesh { points: reference.points.iter().map(|p| P3::from(p.coords * 1.2)).collect(), ..reference.clone() };
        let s = strain_energy(&scaled, &reference).unwrap();
        for k in 0..s.energy.len() {
            assert!((s.energy[k] - 0.08).abs() < 1e-6);
            assert!((s.lambda1[k] - 1.2).abs() < 1e-9 && (s.lambda2[k] - 1.2).abs() < 1e-9);
        }
        let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.7) * Rotation3::from_axis_angle(&Vector3::x_axis(), -1.1);
        let moved = GridMesh { points: scaled.points.iter().map(|p| rot * p + Vector3::new(3.0, -1.0, 0.5)).collect(), ..scaled.clone() };
        let t = strain_energy(&moved, &reference).unwrap();
        for (a, b) in s.energy.iter().zip(&t.energy) {
            assert!((a - b).abs() < 1e-9);
        }
    }

    #[test]
    fn strain_of_radial_expansion_profile() {
        let (r0, l) = (0.5, 2.0);
        let reference = tube_grid(80, 40, |_| r0);
        let grow = |v: f64| 1.0 + 0.3 * v;
        let current = tube_grid(80, 40, |v| r0 * grow(v));
        let field = strain_energy(&current, &reference).unwrap();
        for j in 0..field.m {
            let v = (j as f64 + 0.5) / 39.0;
            let hoop = grow(v);
            let axial = (1.0 + (0.3 * r0 / l).powi(2)).sqrt();
            let expected = (hoop - 1.0).powi(2) + (axial - 1.0).powi(2);
            for i in 0..field.n {
                let e = field.energy[j * field.n + i];
                assert!((e / expected - 1.0).abs() < 0.03, "({i},{j}) {e} vs {expected}");
            }
        }
    }

    #[test]
    fn degenerate_reference_cell_is_flagged() {
        let mut reference = tube_grid(8, 4, |_| 1.0);
        let p = reference.points[9];
        reference.points[10] = p;
        reference.points[18] = p;
        reference.points[17] = p;
        let f = strain_energy(&reference, &reference).unwrap();
        assert!(f.flagged[9]);
        assert_eq!(f.energy[9], 0.0);
    }

    #[test]
    fn pca_of_circle_family_is_radial() {
        let family: Vec<Vec<P2>> = (0..9)
            .map(|k| {
                let shift = nalgebra::Vector2::new(0.1 * k as f64, 0.0);
                circle(0.8 + 0.05 * k as f64, CONTOUR_SAMPLES, 0.0).iter().map(|p| p + shift).collect()
            })
            .collect();
        let pca = contour_pca(&family, 3).unwrap();
        assert_eq!(pca.modes.len(), 1);
        assert!(pca.modes[0].share > 0.99);
        for (k, (dir, _)) in pca.modes[0].directions().iter().enumerate() {
            let radial = pca.mean[k].coords.normalize();
            assert!(dir.coords.dot(&radial) > (2.0f64).to_radians().cos(), "sample {k}");
        }
    }

    #[test]
    fn identical_contours_have_no_modes() {
        let c = circle(1.0, 50, 0.0);
        let pca = contour_pca(&[c.clone(), c.clone(), c], 3).unwrap();
        assert!(pca.modes.is_empty());
        assert_eq!(pca.total_variance, 0.0);
        assert!(contour_pca(&[circle(1.0, 50, 0.0)], 1).is_err());
    }

    #[test]
    fn constant_area_ellipses_give_a_quadrupole() {
        let family: Vec<Vec<P2>> = (0..16)
            .map(|k| {
                let s = 0.2 * (2.0 * PI * k as f64 / 16.0).sin();
                let (a, b) = (s.exp(), (-s).exp());
                let dense: Vec<P2> = (0..4000).map(|q| 2.0 * PI * q as f64 / 4000.0).map(|t| P2::new(a * t.cos(), b * t.sin())).collect();
                crate::sections::resample_closed(&dense, CONTOUR_SAMPLES)
            })
            .collect();
        let pca = contour_pca(&family, 2).unwrap();
        let d = &pca.modes[0].displacement;
        let radial = |k: usize| d[k].coords.dot(&pca.mean[k].coords.normalize());
        // Samples 0 and 50 sit on the x axis, 25 and 75 near the y axis.
        assert!(radial(0) * radial(25) < 0.0);
        assert!(radial(50) * radial(75) < 0.0);
        assert!(radial(0) * radial(50) > 0.0);
    }

    #[test]
    fn modes_are_orthonormal_and_reconstruct() {
        let family: Vec<Vec<P2>> = (0..7)
            .map(|k| {
                let x = k as f64;
                (0..40)
                    .map(|s| {
                        let t = 2.0 * PI * s as f64 / 40.0;
                        let r = 1.0 + 0.1 * (x * 0.7).sin() * (2.0 * t).cos() + 0.05 * (x * 1.3).cos() * (3.0 * t).sin();
                        P2::new(r * t.cos() + 0.02 * x, r * t.sin())
                    })
                    .collect()
            })
            .collect();
        let pca = contour_pca(&family, 10).unwrap();
        assert!(pca.modes.len() <= 6);
        for a in &pca.modes {
            for b in &pca.modes {
                let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
                let expected = if std::ptr::eq(a, b) { 1.0 } else { 0.0 };
                assert!((dot - expected).abs() < 1e-9);
            }
        }
        for w in pca.modes.windows(2) {
            assert!(w[0].variance >= w[1].variance);
        }
        for c in &family {
            let rebuilt = pca.reconstruct(&pca.project(c));
            for (p, q) in centre(c).iter().zip(&rebuilt) {
                assert!((p - q).norm() < 1e-9);
            }
        }
    }

    #[test]
    fn phase_split_follows_the_volume_cycle() {
        let volumes: Vec<f64> = (0..10).map(|k| [3.0, 2.0, 1.0, 2.0, 3.0, 4.0, 5.0, 6.0, 5.0, 4.0][k]).collect();
        let map = align_cycle_by_volume(&volumes, false).unwrap();
        let phases: Vec<Phase> = (0..10).map(|k| phase_of(&map, k)).collect();
        assert_eq!(&phases[2..7], &[Phase::Expansion; 5]);
        assert_eq!(phases[7], Phase::Contraction);
        assert_eq!(phases[1], Phase::Contraction);
    }
}
