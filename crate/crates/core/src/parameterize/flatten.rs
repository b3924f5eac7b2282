use log::warn;

use super::cut::{arc_fractions, CutMesh};
use crate::error::{Error, Result};
use crate::geom::{self, P2};
use crate::linalg::{self, CsrMatrix};

/// Relative residual at which the flattening solve stops.
const SOLVE_TOL: f64 = 1e-10;
/// Weights more negative than this multiple of the row mean are clamped.
const NEGATIVE_CLAMP: f64 = 10.0;

/// Per-vertex unit-square coordinates of a cut mesh.
#[derive(Debug, Clone)]
pub struct FlattenedFrame {
    pub cut: CutMesh,
    pub uv: Vec<P2>,
    /// Parameter triangles whose orientation disagrees with the surface.
    pub flipped: Vec<usize>,
    /// Weights that hit the negative clamp.
    pub clamped_weights: usize,
}

impl FlattenedFrame {
    pub fn signed_uv_area(&self, f: usize) -> f64 {
        let t = self.cut.mesh.triangles[f];
        let (a, b, c) = (self.uv[t[0]], self.uv[t[1]], self.uv[t[2]]);
        0.5 * ((b - a).perp(&(c - a)))
    }
}

/// Maps a cut tube onto the unit square with area-weighted (authalic) weights.
///
/// The seam copies go to u = 0 and u = 1, inlet and outlet to v = 0 and v = 1,
/// each side parameterized by arc length.
pub fn flatten_to_unit_square(cut: CutMesh) -> Result<FlattenedFrame> {
    let mesh = &cut.mesh;
    let nv = mesh.vertices.len();
    let mut fixed: Vec<Option<P2>> = vec![None; nv];
    let pos = |v: &usize| mesh.vertices[*v];

    let seam_v = arc_fractions(cut.seam_left.iter().map(pos));
    for (i, &v) in seam_v.iter().enumerate() {
        fixed[cut.seam_left[i]] = Some(P2::new(1.0, v));
        fixed[cut.seam_right[i]] = Some(P2::new(0.0, v));
    }
    let inlet_u = arc_fractions(cut.inlet.iter().map(pos));
    for (&v, &u) in cut.inlet.iter().zip(&inlet_u) {
        fixed[v] = Some(P2::new(u, 0.0));
    }
    let outlet_u = arc_fractions(cut.outlet.iter().map(pos));
    for (&v, &u) in cut.outlet.iter().zip(&outlet_u) {
        fixed[v] = Some(P2::new(1.0 - u, 1.0));
    }

    // w[i] lists (j, weight) for the directed pair i -> j.
    let mut w: Vec<Vec<(usize, f64)>> = vec![Vec::new(); nv];
    let mut add = |i: usize, j: usize, val: f64| match w[i].iter_mut().find(|e| e.0 == j) {
        Some(e) => e.1 += val,
        None => w[i].push((j, val)),
    };
    for t in &mesh.triangles {
        for q in 0..3 {
            let (i, j, k) = (t[q], t[(q + 1) % 3], t[(q + 2) % 3]);
            let (xi, xj, xk) = (mesh.vertices[i], mesh.vertices[j], mesh.vertices[k]);
            let len2 = (xi - xj).norm_squared();
            if len2 <= 0.0 {
                continue;
            }
            // Authalic weight: cotangents of the angles at the neighbour.
            add(i, j, geom::cot_at(&xj, &xi, &xk) / len2);
            add(j, i, geom::cot_at(&xi, &xj, &xk) / len2);
        }
    }

    let unknown: Vec<Option<usize>> = {
        let mut next = 0;
        fixed
            .iter()
            .map(|f| {
                if f.is_some() {
                    None
                } else {
                    next += 1;
                    Some(next - 1)
                }
            })
            .collect()
    };
    let n = unknown.iter().flatten().count();
    let mut clamped = 0;
    let mut trip = Vec::new();
    let mut rhs = [vec![0.0; n], vec![0.0; n]];
    for i in 0..nv {
        let Some(r) = unknown[i] else { continue };
        let row = &mut w[i];
        if row.is_empty() {
            return Err(Error::SingularSystem(i));
        }
        let mean = row.iter().map(|e| e.1).sum::<f64>() / row.len() as f64;
        let bound = -NEGATIVE_CLAMP * mean.abs();
        for e in row.iter_mut() {
            if e.1 < bound {
                e.1 = bound;
                clamped += 1;
            }
        }
        let diag: f64 = row.iter().map(|e| e.1).sum();
        if !(diag.is_finite() && diag > 0.0) {
            return Err(Error::SingularSystem(i));
        }
        trip.push((r, r, diag));
        for &(j, wij) in row.iter() {
            match (unknown[j], fixed[j]) {
                (Some(c), _) => trip.push((r, c, -wij)),
                (None, Some(p)) => {
                    rhs[0][r] += wij * p.x;
                    rhs[1][r] += wij * p.y;
                }
                (None, None) => unreachable!(),
            }
        }
    }
    if clamped > 0 {
        warn!("clamped {clamped} negative flattening weights");
    }
    let a = CsrMatrix::from_triplets(n, trip);
    let mut x = [vec![0.5; n], vec![0.5; n]];
    linalg::solve(&a, &rhs, &mut x, SOLVE_TOL, 20 * n.max(100))?;

    let uv: Vec<P2> = (0..nv)
        .map(|i| match (fixed[i], unknown[i]) {
            (Some(p), _) => p,
            (None, Some(r)) => P2::new(x[0][r], x[1][r]),
            (None, None) => unreachable!(),
        })
        .collect();
    let mut flat = FlattenedFrame { cut, uv, flipped: Vec::new(), clamped_weights: clamped };
    flat.flipped = (0..flat.cut.mesh.triangles.len()).filter(|&f| flat.signed_uv_area(f) <= 0.0).collect();
    if !flat.flipped.is_empty() {
        warn!("{} flipped parameter triangles", flat.flipped.len());
    }
    Ok(flat)
}
