//! Triangle-mesh substrate: topology checks, boundary loops, volumes and
//! discrete geodesics on tube-shaped surfaces.

mod geodesic;
mod spatial;

use std::collections::HashMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::{self, P3, V3};

pub use geodesic::{point_to_point_geodesic, shortest_boundary_geodesic, GeodesicOptions, GeodesicPath, MeshLocation, PathPoint};
pub use spatial::{ClosestPoint, ClosestPointIndex};

/// Area below which a triangle counts as degenerate (mm²).
pub const DEGENERATE_AREA: f64 = 1e-12;

const NO_FACE: usize = usize::MAX;

/// One time sample of one surface as an indexed triangle mesh.
#[derive(Debug, Clone, PartialEq)]
pub struct TriMeshFrame {
    pub vertices: Vec<P3>,
    pub triangles: Vec<[usize; 3]>,
    pub frame_index: usize,
    /// Seconds within the cycle.
    pub time: f64,
}

/// Edge/face adjacency for an indexed triangle mesh.
///
/// Edge `k` of face `f` runs from `triangles[f][k]` to `triangles[f][(k + 1) % 3]`.
#[derive(Debug, Clone)]
pub struct Topology {
    /// Undirected edges as (low, high) vertex pairs.
    pub edges: Vec<[usize; 2]>,
    /// Up to two incident faces per edge, `usize::MAX` when absent.
    pub edge_faces: Vec<[usize; 2]>,
    pub face_edges: Vec<[usize; 3]>,
    pub vertex_faces: Vec<Vec<usize>>,
    pub nonmanifold_edges: Vec<[usize; 2]>,
    /// Interior edges traversed in the same direction by both faces.
    pub misoriented_edges: Vec<[usize; 2]>,
    edge_index: HashMap<(usize, usize), usize>,
}

impl Topology {
    pub fn new(mesh: &TriMeshFrame) -> Self {
        let nv = mesh.vertices.len();
        let mut edges = Vec::new();
        let mut edge_faces: Vec<[usize; 2]> = Vec::new();
        let mut first_dir: Vec<bool> = Vec::new();
        let mut face_edges = Vec::with_capacity(mesh.triangles.len());
        let mut vertex_faces = vec![Vec::new(); nv];
        let mut nonmanifold_edges = Vec::new();
        let mut misoriented_edges = Vec::new();
        let mut edge_index = HashMap::with_capacity(mesh.triangles.len() * 2);
        for (f, tri) in mesh.triangles.iter().enumerate() {
            let mut fe = [0usize; 3];
            for k in 0..3 {
                let a = tri[k];
                let b = tri[(k + 1) % 3];
                vertex_faces[a].push(f);
                let key = (a.min(b), a.max(b));
                let forward = a < b;
                let e = *edge_index.entry(key).or_insert_with(|| {
                    edges.push([key.0, key.1]);
                    edge_faces.push([NO_FACE, NO_FACE]);
                    first_dir.push(forward);
                    edges.len() - 1
                });
                let slot = &mut edge_faces[e];
                if slot[0] == NO_FACE {
                    slot[0] = f;
                } else if slot[1] == NO_FACE {
                    slot[1] = f;
                    if first_dir[e] == forward {
                        misoriented_edges.push(edges[e]);
                    }
                } else {
                    nonmanifold_edges.push(edges[e]);
                }
                fe[k] = e;
            }
            face_edges.push(fe);
        }
        nonmanifold_edges.sort_unstable();
        nonmanifold_edges.dedup();
        Topology { edges, edge_faces, face_edges, vertex_faces, nonmanifold_edges, misoriented_edges, edge_index }
    }

    pub fn edge_between(&self, a: usize, b: usize) -> Option<usize> {
        self.edge_index.get(&(a.min(b), a.max(b))).copied()
    }

    pub fn is_boundary_edge(&self, e: usize) -> bool {
        self.edge_faces[e][1] == NO_FACE
    }

    /// The face across edge `e` from face `f`.
    pub fn other_face(&self, e: usize, f: usize) -> Option<usize> {
        let [a, b] = self.edge_faces[e];
        if a == f && b != NO_FACE {
            Some(b)
        } else if b == f {
            Some(a)
        } else {
            None
        }
    }

    pub fn faces_of_edge(&self, e: usize) -> impl Iterator<Item = usize> + '_ {
        self.edge_faces[e].iter().copied().filter(|&f| f != NO_FACE)
    }

    /// Boundary loops as closed vertex cycles, directed as the faces traverse them.
    pub fn boundary_cycles(&self, mesh: &TriMeshFrame) -> Result<Vec<Vec<usize>>> {
        let mut next: HashMap<usize, usize> = HashMap::new();
        let mut starts = Vec::new();
        for (f, tri) in mesh.triangles.iter().enumerate() {
            for k in 0..3 {
                if self.is_boundary_edge(self.face_edges[f][k]) {
                    let a = tri[k];
                    let b = tri[(k + 1) % 3];
                    if next.insert(a, b).is_some() {
                        return Err(Error::Topology(format!("boundary vertex {a} is shared by two boundary loops")));
                    }
                    starts.push(a);
                }
            }
        }
        starts.sort_unstable();
        let mut visited = vec![false; mesh.vertices.len()];
        let mut cycles = Vec::new();
        for &s in &starts {
            if visited[s] {
                continue;
            }
            let mut cycle = vec![s];
            visited[s] = true;
            let mut cur = s;
            loop {
                let n = *next.get(&cur).ok_or_else(|| Error::Topology(format!("open boundary chain at vertex {cur}")))?;
                if n == s {
                    break;
                }
                if visited[n] {
                    return Err(Error::Topology(format!("boundary loop revisits vertex {n}")));
                }
                visited[n] = true;
                cycle.push(n);
                cur = n;
            }
            cycles.push(cycle);
        }
        Ok(cycles)
    }
}

/// Topology check result for one frame.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct ValidationReport {
    pub frame_index: usize,
    pub vertex_count: usize,
    pub triangle_count: usize,
    pub boundary_loops: usize,
    pub components: usize,
    pub euler_characteristic: i64,
    pub degenerate_triangles: Vec<usize>,
    pub nonmanifold_edges: Vec<[usize; 2]>,
    pub misoriented_edges: usize,
    /// Capped signed volume is positive (outward normals).
    pub outward: bool,
    pub passed: bool,
}

impl ValidationReport {
    pub fn into_result(self) -> Result<Self> {
        if self.passed {
            return Ok(self);
        }
        let mut why = Vec::new();
        if self.boundary_loops != 2 {
            why.push(format!("{} boundary loops", self.boundary_loops));
        }
        if self.euler_characteristic != 0 {
            why.push(format!("Euler characteristic {}", self.euler_characteristic));
        }
        if self.components != 1 {
            why.push(format!("{} connected components", self.components));
        }
        if !self.nonmanifold_edges.is_empty() {
            why.push(format!("{} non-manifold edges", self.nonmanifold_edges.len()));
        }
        if !self.degenerate_triangles.is_empty() {
            why.push(format!("degenerate triangles {:?}", self.degenerate_triangles));
        }
        if self.misoriented_edges > 0 {
            why.push(format!("{} inconsistently oriented edges", self.misoriented_edges));
        }
        if !self.outward {
            why.push("inward-facing normals".to_string());
        }
        Err(Error::Topology(format!("frame {}: {}", self.frame_index, why.join(", "))))
    }
}

/// Checks that a frame is a connected, consistently oriented annulus.
pub fn validate_topology(mesh: &TriMeshFrame) -> Result<ValidationReport> {
    if mesh.vertices.is_empty() || mesh.triangles.is_empty() {
        return Err(Error::EmptyMesh);
    }
    if let Some(bad) = mesh.triangles.iter().flatten().find(|&&v| v >= mesh.vertices.len()) {
        return Err(Error::Topology(format!("vertex index {bad} out of range")));
    }
    let topo = Topology::new(mesh);
    let degenerate_triangles = mesh
        .triangles
        .iter()
        .enumerate()
        .filter(|(_, t)| t[0] == t[1] || t[1] == t[2] || t[0] == t[2] || mesh.triangle_area_of(t) <= DEGENERATE_AREA)
        .map(|(i, _)| i)
        .collect::<Vec<_>>();
    let used = {
        let mut used = vec![false; mesh.vertices.len()];
        mesh.triangles.iter().flatten().for_each(|&v| used[v] = true);
        used.iter().filter(|&&u| u).count()
    };
    let euler = used as i64 - topo.edges.len() as i64 + mesh.triangles.len() as i64;
    let boundary_loops = match topo.boundary_cycles(mesh) {
        Ok(c) => c.len(),
        Err(_) => usize::MAX,
    };
    let components = count_components(mesh, &topo);
    let outward = mesh.enclosed_volume() > 0.0;
    let passed = boundary_loops == 2
        && euler == 0
        && components == 1
        && degenerate_triangles.is_empty()
        && topo.nonmanifold_edges.is_empty()
        && topo.misoriented_edges.is_empty()
        && outward;
    Ok(ValidationReport {
        frame_index: mesh.frame_index,
        vertex_count: mesh.vertices.len(),
        triangle_count: mesh.triangles.len(),
        boundary_loops,
        components,
        euler_characteristic: euler,
        degenerate_triangles,
        nonmanifold_edges: topo.nonmanifold_edges.clone(),
        misoriented_edges: topo.misoriented_edges.len(),
        outward,
        passed,
    })
}

fn count_components(mesh: &TriMeshFrame, topo: &Topology) -> usize {
    let nf = mesh.triangles.len();
    let mut seen = vec![false; nf];
    let mut count = 0;
    let mut stack = Vec::new();
    for start in 0..nf {
        if seen[start] {
            continue;
        }
        count += 1;
        seen[start] = true;
        stack.push(start);
        while let Some(f) = stack.pop() {
            for &e in &topo.face_edges[f] {
                for g in topo.faces_of_edge(e) {
                    if !seen[g] {
                        seen[g] = true;
                        stack.push(g);
                    }
                }
            }
        }
    }
    count
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LoopLabel {
    Inlet,
    Outlet,
}

/// Ordered boundary vertices forming a closed polyline, directed as the faces traverse them.
#[derive(Debug, Clone, PartialEq)]
pub struct BoundaryLoop {
    pub vertices: Vec<usize>,
    pub label: LoopLabel,
}

impl BoundaryLoop {
    pub fn centroid(&self, mesh: &TriMeshFrame) -> P3 {
        geom::centroid(self.vertices.iter().map(|&v| mesh.vertices[v]))
    }

    /// Mean distance of the loop vertices from their centroid.
    pub fn mean_radius(&self, mesh: &TriMeshFrame) -> f64 {
        let c = self.centroid(mesh);
        self.vertices.iter().map(|&v| (mesh.vertices[v] - c).norm()).sum::<f64>() / self.vertices.len() as f64
    }

    pub fn length(&self, mesh: &TriMeshFrame) -> f64 {
        self.edges().map(|(a, b)| (mesh.vertices[b] - mesh.vertices[a]).norm()).sum()
    }

    /// Directed edges (a, b) of the loop, closing back to the first vertex.
    pub fn edges(&self) -> impl Iterator<Item = (usize, usize)> + '_ {
        let n = self.vertices.len();
        (0..n).map(move |i| (self.vertices[i], self.vertices[(i + 1) % n]))
    }

    pub fn contains(&self, v: usize) -> bool {
        self.vertices.contains(&v)
    }
}

/// How to decide which boundary loop is the inlet (ventricular end).
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum InletRule {
    /// The wider loop is the inlet; radii within 1% are an error.
    #[default]
    Wider,
    /// The narrower loop is the inlet.
    Narrower,
    /// The loop whose centroid is closest to the given point is the inlet.
    Nearest([f64; 3]),
}

/// Extracts and labels the two boundary loops of a tube.
pub fn boundary_loops(mesh: &TriMeshFrame, rule: InletRule) -> Result<(BoundaryLoop, BoundaryLoop)> {
    let topo = Topology::new(mesh);
    boundary_loops_with(mesh, &topo, rule)
}

pub fn boundary_loops_with(mesh: &TriMeshFrame, topo: &Topology, rule: InletRule) -> Result<(BoundaryLoop, BoundaryLoop)> {
    let cycles = topo.boundary_cycles(mesh)?;
    if cycles.len() != 2 {
        return Err(Error::Topology(format!("{} boundary loops, expected 2", cycles.len())));
    }
    let mut it = cycles.into_iter();
    let first = BoundaryLoop { vertices: it.next().unwrap(), label: LoopLabel::Inlet };
    let second = BoundaryLoop { vertices: it.next().unwrap(), label: LoopLabel::Outlet };
    let first_is_inlet = match rule {
        InletRule::Wider | InletRule::Narrower => {
            let r0 = first.mean_radius(mesh);
            let r1 = second.mean_radius(mesh);
            if (r0 - r1).abs() < 0.01 * r0.max(r1) {
                return Err(Error::AmbiguousLabeling(r0, r1));
            }
            (r0 > r1) == matches!(rule, InletRule::Wider)
        }
        InletRule::Nearest(p) => {
            let p = P3::new(p[0], p[1], p[2]);
            let d0 = (first.centroid(mesh) - p).norm();
            let d1 = (second.centroid(mesh) - p).norm();
            d0 <= d1
        }
    };
    let (mut inlet, mut outlet) = if first_is_inlet { (first, second) } else { (second, first) };
    inlet.label = LoopLabel::Inlet;
    outlet.label = LoopLabel::Outlet;
    Ok((inlet, outlet))
}

impl TriMeshFrame {
    pub fn new(vertices: Vec<P3>, triangles: Vec<[usize; 3]>) -> Self {
        TriMeshFrame { vertices, triangles, frame_index: 0, time: 0.0 }
    }

    pub fn with_frame(mut self, frame_index: usize, time: f64) -> Self {
        self.frame_index = frame_index;
        self.time = time;
        self
    }

    pub fn triangle_area_of(&self, t: &[usize; 3]) -> f64 {
        geom::triangle_area(&self.vertices[t[0]], &self.vertices[t[1]], &self.vertices[t[2]])
    }

    pub fn triangle_area(&self, f: usize) -> f64 {
        self.triangle_area_of(&self.triangles[f])
    }

    pub fn surface_area(&self) -> f64 {
        self.triangles.iter().map(|t| self.triangle_area_of(t)).sum()
    }

    pub fn bounding_box(&self) -> (P3, P3) {
        let mut lo = P3::new(f64::INFINITY, f64::INFINITY, f64::INFINITY);
        let mut hi = P3::new(f64::NEG_INFINITY, f64::NEG_INFINITY, f64::NEG_INFINITY);
        for p in &self.vertices {
            lo = lo.inf(p);
            hi = hi.sup(p);
        }
        (lo, hi)
    }

    pub fn bounding_diagonal(&self) -> f64 {
        let (lo, hi) = self.bounding_box();
        (hi - lo).norm()
    }

    pub fn mean_edge_length(&self) -> f64 {
        let topo = Topology::new(self);
        if topo.edges.is_empty() {
            return 0.0;
        }
        topo.edges.iter().map(|[a, b]| (self.vertices[*b] - self.vertices[*a]).norm()).sum::<f64>() / topo.edges.len() as f64
    }

    /// Signed enclosed volume, closing every boundary loop with a planar
    /// triangle fan from its centroid. Positive for outward normals.
    pub fn enclosed_volume(&self) -> f64 {
        let topo = Topology::new(self);
        let cycles = topo.boundary_cycles(self).unwrap_or_default();
        // Shift to the vertex centroid to limit cancellation.
        let origin = geom::centroid(self.vertices.iter().copied());
        let rel = |p: &P3| P3::from(p - origin);
        let mut vol = 0.0;
        for t in &self.triangles {
            vol += geom::signed_tet_volume(&rel(&self.vertices[t[0]]), &rel(&self.vertices[t[1]]), &rel(&self.vertices[t[2]]));
        }
        for cycle in &cycles {
            let c = rel(&geom::centroid(cycle.iter().map(|&v| self.vertices[v])));
            let n = cycle.len();
            for i in 0..n {
                let a = rel(&self.vertices[cycle[i]]);
                let b = rel(&self.vertices[cycle[(i + 1) % n]]);
                // The cap traverses each boundary edge opposite to the face that owns it.
                vol += geom::signed_tet_volume(&c, &b, &a);
            }
        }
        vol
    }

    /// Applies a rigid motion (or any affine map) to every vertex.
    pub fn transformed(&self, f: impl Fn(&P3) -> P3) -> Self {
        TriMeshFrame { vertices: self.vertices.iter().map(f).collect(), ..self.clone() }
    }

    pub fn flip_orientation(&mut self) {
        for t in &mut self.triangles {
            t.swap(1, 2);
        }
    }

    /// Makes the normals point outward if they consistently point inward.
    pub fn orient_outward(&mut self) -> bool {
        if self.enclosed_volume() < 0.0 {
            self.flip_orientation();
            true
        } else {
            false
        }
    }

    /// Removes degenerate triangles by collapsing their shortest edge.
    ///
    /// Only applied when the degenerate triangles make up less than 0.01% of
    /// the surface area; returns the number of collapsed edges.
    pub fn collapse_degenerate(&mut self) -> usize {
        let total = self.surface_area();
        let mut collapsed = 0;
        loop {
            let degenerate: Vec<usize> = (0..self.triangles.len())
                .filter(|&f| {
                    let t = self.triangles[f];
                    t[0] == t[1] || t[1] == t[2] || t[0] == t[2] || self.triangle_area(f) <= DEGENERATE_AREA
                })
                .collect();
            if degenerate.is_empty() {
                break;
            }
            let bad_area: f64 = degenerate.iter().map(|&f| self.triangle_area(f)).sum();
            if bad_area > 1e-4 * total {
                break;
            }
            let t = self.triangles[degenerate[0]];
            let (a, b) = (0..3)
                .map(|k| (t[k], t[(k + 1) % 3]))
                .filter(|(a, b)| a != b)
                .min_by(|x, y| {
                    let lx = (self.vertices[x.0] - self.vertices[x.1]).norm();
                    let ly = (self.vertices[y.0] - self.vertices[y.1]).norm();
                    lx.total_cmp(&ly)
                })
                .unwrap_or((t[0], t[1]));
            let (keep, drop) = (a.min(b), a.max(b));
            if keep != drop {
                let mid = P3::from((self.vertices[keep].coords + self.vertices[drop].coords) * 0.5);
                self.vertices[keep] = mid;
                for tri in &mut self.triangles {
                    for v in tri.iter_mut() {
                        if *v == drop {
                            *v = keep;
                        }
                    }
                }
            }
            self.triangles.retain(|t| t[0] != t[1] && t[1] != t[2] && t[0] != t[2]);
            collapsed += 1;
        }
        if collapsed > 0 {
            self.compact();
            log::warn!("frame {}: collapsed {collapsed} degenerate triangle edge(s)", self.frame_index);
        }
        collapsed
    }

    /// Drops unreferenced vertices and renumbers the rest in order.
    pub fn compact(&mut self) {
        let mut map = vec![usize::MAX; self.vertices.len()];
        let mut used = vec![false; self.vertices.len()];
        self.triangles.iter().flatten().for_each(|&v| used[v] = true);
        let mut verts = Vec::new();
        for (i, &u) in used.iter().enumerate() {
            if u {
                map[i] = verts.len();
                verts.push(self.vertices[i]);
            }
        }
        for t in &mut self.triangles {
            for v in t.iter_mut() {
                *v = map[*v];
            }
        }
        self.vertices = verts;
    }

    /// Area-weighted vertex normals (unit length).
    pub fn vertex_normals(&self) -> Vec<V3> {
        let mut n = vec![V3::zeros(); self.vertices.len()];
        for t in &self.triangles {
            let fnrm = geom::triangle_normal(&self.vertices[t[0]], &self.vertices[t[1]], &self.vertices[t[2]]);
            for &v in t {
                n[v] += fnrm;
            }
        }
        n.into_iter()
            .map(|v| {
                let l = v.norm();
                if l > 0.0 {
                    v / l
                } else {
                    v
                }
            })
            .collect()
    }
}

/// Volume of the layer between two nested tubes, both closed by planar end caps.
pub fn layer_volume(outer: &TriMeshFrame, inner: &TriMeshFrame) -> Result<f64> {
    let vo = outer.enclosed_volume();
    let vi = inner.enclosed_volume();
    let v = vo - vi;
    if v < -1e-9 * vo.abs().max(1e-12) {
        return Err(Error::Invalid(format!("negative layer volume {v:.6e}: surfaces are not nested or orientation is flipped")));
    }
    Ok(v)
}
