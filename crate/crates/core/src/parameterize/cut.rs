use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::geom::P3;
use crate::mesh::{GeodesicPath, MeshLocation, Topology, TriMeshFrame};

/// Seam parameters closer than this to an edge end snap onto the vertex.
const SNAP: f64 = 1e-6;

/// A tube opened into a disk along a seam.
///
/// The disk boundary, as the faces traverse it, runs along the inlet from
/// `seam_right[0]` to `seam_left[0]`, up the left seam copy, back along the
/// outlet and down the right seam copy.
#[derive(Debug, Clone)]
pub struct CutMesh {
    pub mesh: TriMeshFrame,
    /// Seam vertices kept by the faces left of the seam (u = 1 side), inlet to outlet.
    pub seam_left: Vec<usize>,
    /// Duplicates used by the faces right of the seam (u = 0 side).
    pub seam_right: Vec<usize>,
    /// Inlet boundary from `seam_right[0]` to `seam_left[0]`, inclusive.
    pub inlet: Vec<usize>,
    /// Outlet boundary from `seam_left[last]` to `seam_right[last]`, inclusive.
    pub outlet: Vec<usize>,
}

/// Splits the faces crossed by the seam, then duplicates the seam vertices so
/// the tube becomes a topological disk.
pub fn cut_along_geodesic(mesh: &TriMeshFrame, seam: &GeodesicPath) -> Result<CutMesh> {
    let topo = Topology::new(mesh);
    let cycles = topo.boundary_cycles(mesh)?;
    if cycles.len() != 2 {
        return Err(Error::Topology(format!("{} boundary loops, expected 2", cycles.len())));
    }

    let mut verts = mesh.vertices.clone();
    let mut tris = mesh.triangles.clone();
    let mut vfaces = topo.vertex_faces.clone();
    let mut inserted: BTreeMap<(usize, usize), Vec<(f64, usize)>> = BTreeMap::new();
    let mut chain: Vec<usize> = Vec::with_capacity(seam.points.len());
    for p in &seam.points {
        let v = match p.location {
            MeshLocation::Vertex(v) => v,
            MeshLocation::Edge { a, t, .. } if t < SNAP => a,
            MeshLocation::Edge { b, t, .. } if t > 1.0 - SNAP => b,
            MeshLocation::Edge { a, b, t } => {
                let (lo, hi, t) = if a < b { (a, b, t) } else { (b, a, 1.0 - t) };
                let list = inserted.entry((lo, hi)).or_default();
                if let Some(&(_, w)) = list.iter().find(|(s, _)| (s - t).abs() < SNAP) {
                    w
                } else {
                    // The edge may already be split; find the piece holding t.
                    let (mut from, mut from_t, mut to, mut to_t) = (lo, 0.0, hi, 1.0);
                    for &(s, w) in list.iter() {
                        if s < t && s > from_t {
                            from = w;
                            from_t = s;
                        }
                        if s > t && s < to_t {
                            to = w;
                            to_t = s;
                        }
                    }
                    let pos = verts[lo] + (verts[hi] - verts[lo]) * t;
                    let nv = verts.len();
                    verts.push(pos);
                    vfaces.push(Vec::new());
                    split_edge(&mut tris, &mut vfaces, from, to, nv)?;
                    list.push((t, nv));
                    nv
                }
            }
        };
        if chain.last() != Some(&v) {
            chain.push(v);
        }
    }
    if chain.len() < 2 {
        return Err(Error::Invalid("seam has fewer than two distinct points".into()));
    }
    {
        let mut seen = chain.clone();
        seen.sort_unstable();
        if let Some(w) = seen.windows(2).find(|w| w[0] == w[1]) {
            let face = vfaces[w[0]].first().copied().unwrap_or(0);
            return Err(Error::SeamSelfIntersection(face));
        }
    }

    let split = TriMeshFrame { vertices: verts, triangles: tris, ..mesh.clone() };
    let topo = Topology::new(&split);
    let cycles = topo.boundary_cycles(&split)?;
    let on_loop = |v: usize| cycles.iter().position(|c| c.contains(&v));
    let k = chain.len() - 1;
    let (Some(l0), Some(l1)) = (on_loop(chain[0]), on_loop(chain[k])) else {
        return Err(Error::Invalid("seam endpoints are not on the boundary".into()));
    };
    if l0 == l1 {
        return Err(Error::Invalid("seam starts and ends on the same boundary loop".into()));
    }
    if let Some(&v) = chain[1..k].iter().find(|&&v| on_loop(v).is_some()) {
        return Err(Error::Invalid(format!("seam touches the boundary at interior vertex {v}")));
    }
    for w in chain.windows(2) {
        if topo.edge_between(w[0], w[1]).is_none() {
            return Err(Error::Invalid(format!("seam points {} and {} share no edge after splitting", w[0], w[1])));
        }
    }

    // Faces right of the seam at every seam vertex.
    let directed_face = |a: usize, b: usize| -> Option<usize> {
        topo.vertex_faces[a].iter().copied().find(|&f| {
            let t = split.triangles[f];
            (0..3).any(|q| t[q] == a && t[(q + 1) % 3] == b)
        })
    };
    let mut right_sets = Vec::with_capacity(chain.len());
    for i in 0..=k {
        let v = chain[i];
        let (start, from) =
            if i < k { (directed_face(chain[i + 1], v), chain[i + 1]) } else { (directed_face(v, chain[k - 1]), chain[k - 1]) };
        let Some(mut f) = start else {
            return Err(Error::Invalid(format!("seam edge at vertex {v} lies on the boundary")));
        };
        let stop = if i > 0 && i < k { Some(chain[i - 1]) } else { None };
        let third = |f: usize, a: usize| -> usize {
            let t = split.triangles[f];
            t.iter().copied().find(|&x| x != v && x != a).unwrap()
        };
        let mut spoke = third(f, from);
        let mut faces = Vec::new();
        let limit = topo.vertex_faces[v].len();
        loop {
            faces.push(f);
            if Some(spoke) == stop {
                break;
            }
            let e = topo.edge_between(v, spoke).unwrap();
            match topo.other_face(e, f) {
                Some(g) if faces.len() <= limit => {
                    spoke = third(g, spoke);
                    f = g;
                }
                Some(_) => return Err(Error::Topology(format!("fan around seam vertex {v} does not close"))),
                None => {
                    if stop.is_some() {
                        return Err(Error::Invalid(format!("seam side walk at vertex {v} reached the boundary")));
                    }
                    break;
                }
            }
        }
        right_sets.push(faces);
    }

    let mut cut = split.clone();
    let mut seam_right = Vec::with_capacity(chain.len());
    for (i, faces) in right_sets.iter().enumerate() {
        let v = chain[i];
        let c = cut.vertices.len();
        cut.vertices.push(split.vertices[v]);
        for &f in faces {
            for x in cut.triangles[f].iter_mut() {
                if *x == v {
                    *x = c;
                }
            }
        }
        seam_right.push(c);
    }

    let topo = Topology::new(&cut);
    let cycles = topo.boundary_cycles(&cut)?;
    if cycles.len() != 1 {
        return Err(Error::Topology(format!("cut mesh has {} boundary loops, expected 1", cycles.len())));
    }
    let cycle = &cycles[0];
    let pos = cycle.iter().position(|&x| x == seam_right[0]).ok_or_else(|| bad_boundary("seam"))?;
    let ring: Vec<usize> = cycle[pos..].iter().chain(&cycle[..pos]).copied().collect();
    let left_at = ring.iter().position(|&x| x == chain[0]).ok_or_else(|| bad_boundary("inlet"))?;
    if ring.get(left_at..left_at + chain.len()) != Some(&chain[..]) {
        return Err(bad_boundary("left seam"));
    }
    let out_start = left_at + k;
    let right_end = ring.iter().position(|&x| x == seam_right[k]).ok_or_else(|| bad_boundary("outlet"))?;
    let tail: Vec<usize> = ring[right_end..].iter().copied().chain(std::iter::once(ring[0])).collect();
    let expected: Vec<usize> = seam_right.iter().rev().copied().collect();
    if tail != expected {
        return Err(bad_boundary("right seam"));
    }
    let inlet = ring[..=left_at].to_vec();
    let outlet = ring[out_start..=right_end].to_vec();
    Ok(CutMesh { mesh: cut, seam_left: chain, seam_right, inlet, outlet })
}

fn bad_boundary(part: &str) -> Error {
    Error::Topology(format!("unexpected {part} layout on the cut boundary"))
}

/// Inserts vertex `p` on edge (a, b), splitting every face that uses the edge.
fn split_edge(tris: &mut Vec<[usize; 3]>, vfaces: &mut [Vec<usize>], a: usize, b: usize, p: usize) -> Result<()> {
    let faces: Vec<usize> = vfaces[a].iter().copied().filter(|&f| tris[f].contains(&b)).collect();
    if faces.is_empty() {
        return Err(Error::Invalid(format!("no face uses edge ({a}, {b})")));
    }
    for f in faces {
        let t = tris[f];
        let q = (0..3).find(|&q| {
            let (x, y) = (t[q], t[(q + 1) % 3]);
            (x == a && y == b) || (x == b && y == a)
        });
        let Some(q) = q else { continue };
        let (x, y, z) = (t[q], t[(q + 1) % 3], t[(q + 2) % 3]);
        tris[f] = [x, p, z];
        let g = tris.len();
        tris.push([p, y, z]);
        if let Some(s) = vfaces[y].iter_mut().find(|s| **s == f) {
            *s = g;
        }
        vfaces[z].push(g);
        vfaces[p].push(f);
        vfaces[p].push(g);
    }
    Ok(())
}

/// Cumulative arc length along a vertex chain, normalized to [0, 1].
pub(crate) fn arc_fractions(points: impl Iterator<Item = P3>) -> Vec<f64> {
    let pts: Vec<P3> = points.collect();
    let mut acc = vec![0.0; pts.len()];
    for i in 1..pts.len() {
        acc[i] = acc[i - 1] + (pts[i] - pts[i - 1]).norm();
    }
    let total = *acc.last().unwrap_or(&0.0);
    if total > 0.0 {
        acc.iter_mut().for_each(|a| *a /= total);
    } else if pts.len() > 1 {
        let n = (pts.len() - 1) as f64;
        acc.iter_mut().enumerate().for_each(|(i, a)| *a = i as f64 / n);
    }
    acc
}
