use crate::geom::{self, P3};

use super::TriMeshFrame;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ClosestPoint {
    pub face: usize,
    pub barycentric: [f64; 3],
    pub point: P3,
    pub distance: f64,
}

/// Uniform-grid acceleration structure for closest-point queries on a triangle mesh.
pub struct ClosestPointIndex<'a> {
    mesh: &'a TriMeshFrame,
    origin: P3,
    cell: f64,
    dims: [usize; 3],
    starts: Vec<u32>,
    items: Vec<u32>,
    /// Bounding sphere per face: centroid and radius.
    spheres: Vec<(P3, f64)>,
}

impl<'a> ClosestPointIndex<'a> {
    pub fn new(mesh: &'a TriMeshFrame) -> Self {
        let (lo, hi) = mesh.bounding_box();
        let ext = hi - lo;
        let nf = mesh.triangles.len().max(1);
        let mean_edge = mesh.triangles.iter().map(|t| (mesh.vertices[t[1]] - mesh.vertices[t[0]]).norm()).sum::<f64>() / nf as f64;
        let mut cell = (2.0 * mean_edge).max(ext.max() / 64.0).max(1e-9);
        if !cell.is_finite() {
            cell = 1.0;
        }
        let dims = [
            ((ext.x / cell).floor() as usize + 1).min(256),
            ((ext.y / cell).floor() as usize + 1).min(256),
            ((ext.z / cell).floor() as usize + 1).min(256),
        ];
        let ncell = dims[0] * dims[1] * dims[2];
        let mut counts = vec![0u32; ncell + 1];
        let range = |t: &[usize; 3]| {
            let mut a = [usize::MAX; 3];
            let mut b = [0usize; 3];
            for &v in t {
                let c = cell_of(&mesh.vertices[v], &lo, cell, &dims);
                for k in 0..3 {
                    a[k] = a[k].min(c[k]);
                    b[k] = b[k].max(c[k]);
                }
            }
            (a, b)
        };
        for t in &mesh.triangles {
            let (a, b) = range(t);
            for z in a[2]..=b[2] {
                for y in a[1]..=b[1] {
                    for x in a[0]..=b[0] {
                        counts[(z * dims[1] + y) * dims[0] + x + 1] += 1;
                    }
                }
            }
        }
        for i in 1..counts.len() {
            counts[i] += counts[i - 1];
        }
        let mut fill = counts.clone();
        let mut items = vec![0u32; counts[ncell] as usize];
        for (f, t) in mesh.triangles.iter().enumerate() {
            let (a, b) = range(t);
            for z in a[2]..=b[2] {
                for y in a[1]..=b[1] {
                    for x in a[0]..=b[0] {
                        let c = (z * dims[1] + y) * dims[0] + x;
                        items[fill[c] as usize] = f as u32;
                        fill[c] += 1;
                    }
                }
            }
        }
        let spheres = mesh
            .triangles
            .iter()
            .map(|t| {
                let v = t.map(|i| mesh.vertices[i]);
                let c = P3::from((v[0].coords + v[1].coords + v[2].coords) / 3.0);
                (c, v.iter().map(|q| (q - c).norm()).fold(0.0, f64::max))
            })
            .collect();
        ClosestPointIndex { mesh, origin: lo, cell, dims, starts: counts, items, spheres }
    }

    pub fn closest(&self, p: &P3) -> ClosestPoint {
        self.closest_near(p, None)
    }

    /// Same answer as `closest`; a face near the answer, such as the result
    /// for a neighbouring query, tightens the search from the start.
    pub fn closest_near(&self, p: &P3, hint: Option<usize>) -> ClosestPoint {
        let c = cell_of(p, &self.origin, self.cell, &self.dims);
        let mut best = ClosestPoint { face: usize::MAX, barycentric: [0.0; 3], point: *p, distance: f64::INFINITY };
        if let Some(f) = hint.filter(|&f| f < self.mesh.triangles.len()) {
            let t = self.mesh.triangles[f];
            let (q, w) =
                geom::closest_point_on_triangle(p, &self.mesh.vertices[t[0]], &self.mesh.vertices[t[1]], &self.mesh.vertices[t[2]]);
            best = ClosestPoint { face: f, barycentric: w, point: q, distance: (q - p).norm() };
        }
        let max_ring = self.dims.iter().copied().max().unwrap_or(1);
        for ring in 0..=max_ring {
            let r = ring as isize;
            let lo = [c[0] as isize - r, c[1] as isize - r, c[2] as isize - r];
            let hi = [c[0] as isize + r, c[1] as isize + r, c[2] as isize + r];
            for z in lo[2].max(0)..=hi[2].min(self.dims[2] as isize - 1) {
                for y in lo[1].max(0)..=hi[1].min(self.dims[1] as isize - 1) {
                    for x in lo[0].max(0)..=hi[0].min(self.dims[0] as isize - 1) {
                        let on_shell = x == lo[0] || x == hi[0] || y == lo[1] || y == hi[1] || z == lo[2] || z == hi[2];
                        if !on_shell {
                            continue;
                        }
                        if self.cell_distance(p, [x as usize, y as usize, z as usize]) > best.distance {
                            continue;
                        }
                        let ci = (z as usize * self.dims[1] + y as usize) * self.dims[0] + x as usize;
                        for &f in &self.items[self.starts[ci] as usize..self.starts[ci + 1] as usize] {
                            let (centre, radius) = self.spheres[f as usize];
                            if (centre - p).norm() - radius > best.distance {
                                continue;
                            }
                            let t = self.mesh.triangles[f as usize];
                            let (q, w) = geom::closest_point_on_triangle(
                                p,
                                &self.mesh.vertices[t[0]],
                                &self.mesh.vertices[t[1]],
                                &self.mesh.vertices[t[2]],
                            );
                            let d = (q - p).norm();
                            // Lowest face index wins ties so results do not depend on cell order.
                            if d < best.distance || (d == best.distance && (f as usize) < best.face) {
                                best = ClosestPoint { face: f as usize, barycentric: w, point: q, distance: d };
                            }
                        }
                    }
                }
            }
            if best.distance <= ring as f64 * self.cell {
                break;
            }
        }
        best
    }
}

impl ClosestPointIndex<'_> {
    /// Distance from `p` to the box of cell `c`; the edge cells extend to infinity.
    fn cell_distance(&self, p: &P3, c: [usize; 3]) -> f64 {
        let mut d2 = 0.0;
        for k in 0..3 {
            let lo = self.origin[k] + c[k] as f64 * self.cell;
            let hi = lo + self.cell;
            let gap = if c[k] > 0 && p[k] < lo {
                lo - p[k]
            } else if c[k] + 1 < self.dims[k] && p[k] > hi {
                p[k] - hi
            } else {
                0.0
            };
            d2 += gap * gap;
        }
        d2.sqrt()
    }
}

fn cell_of(p: &P3, origin: &P3, cell: f64, dims: &[usize; 3]) -> [usize; 3] {
    let mut c = [0usize; 3];
    for k in 0..3 {
        let x = ((p[k] - origin[k]) / cell).floor();
        c[k] = if x.is_nan() || x < 0.0 { 0 } else { (x as usize).min(dims[k] - 1) };
    }
    c
}
