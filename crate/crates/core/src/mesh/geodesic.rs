//! Approximate shortest geodesics: Dijkstra over a Steiner-densified edge
//! graph, then straightening of the triangle strip the path runs through.

use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::f64::consts::PI;

use crate::error::{Error, Result};
use crate::geom::{self, P2, P3};

use super::{BoundaryLoop, Topology, TriMeshFrame};

/// Parameter distance from an edge end below which a crossing sits on the vertex.
const AT_VERTEX: f64 = 1e-9;

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct GeodesicOptions {
    /// Steiner points inserted on every edge.
    pub steiner_points: usize,
    /// Relative length change that ends straightening.
    pub tolerance: f64,
    pub max_sweeps: usize,
}

impl Default for GeodesicOptions {
    fn default() -> Self {
        GeodesicOptions { steiner_points: 3, tolerance: 1e-6, max_sweeps: 20_000 }
    }
}

/// A point on the mesh: a vertex or a position along an edge `(a, b)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub enum MeshLocation {
    Vertex(usize),
    /// `(1 - t) * a + t * b`, with `t` strictly inside (0, 1).
    Edge {
        a: usize,
        b: usize,
        t: f64,
    },
}

impl MeshLocation {
    pub fn position(&self, mesh: &TriMeshFrame) -> P3 {
        match *self {
            MeshLocation::Vertex(v) => mesh.vertices[v],
            MeshLocation::Edge { a, b, t } => mesh.vertices[a] + (mesh.vertices[b] - mesh.vertices[a]) * t,
        }
    }

    /// Normalizes edge locations that sit on an end vertex.
    pub fn on_edge(a: usize, b: usize, t: f64) -> Self {
        if t <= AT_VERTEX {
            MeshLocation::Vertex(a)
        } else if t >= 1.0 - AT_VERTEX {
            MeshLocation::Vertex(b)
        } else {
            MeshLocation::Edge { a, b, t }
        }
    }

    /// Barycentric coordinates within face `f` (which must contain the location).
    pub fn barycentric(&self, mesh: &TriMeshFrame, f: usize) -> [f64; 3] {
        let tri = mesh.triangles[f];
        let mut w = [0.0; 3];
        match *self {
            MeshLocation::Vertex(v) => {
                if let Some(k) = tri.iter().position(|&x| x == v) {
                    w[k] = 1.0;
                }
            }
            MeshLocation::Edge { a, b, t } => {
                for k in 0..3 {
                    if tri[k] == a {
                        w[k] = 1.0 - t;
                    } else if tri[k] == b {
                        w[k] = t;
                    }
                }
            }
        }
        w
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PathPoint {
    pub location: MeshLocation,
    pub position: P3,
}

/// A polyline on the surface from the inlet loop to the outlet loop.
///
/// Segment `i` (from `points[i]` to `points[i + 1]`) lies in face `faces[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct GeodesicPath {
    pub points: Vec<PathPoint>,
    pub faces: Vec<usize>,
    pub length: f64,
}

impl GeodesicPath {
    pub fn start(&self) -> &PathPoint {
        &self.points[0]
    }

    pub fn end(&self) -> &PathPoint {
        self.points.last().expect("geodesic path has at least two points")
    }

    pub fn positions(&self) -> Vec<P3> {
        self.points.iter().map(|p| p.position).collect()
    }

    /// Point `i` as a barycentric location on a triangle.
    pub fn barycentric(&self, mesh: &TriMeshFrame, i: usize) -> (usize, [f64; 3]) {
        let f = if i < self.faces.len() { self.faces[i] } else { self.faces[i - 1] };
        (f, self.points[i].location.barycentric(mesh, f))
    }
}

/// Shortest path from any point of the inlet loop to any point of the outlet loop.
pub fn shortest_boundary_geodesic(
    mesh: &TriMeshFrame,
    topo: &Topology,
    inlet: &BoundaryLoop,
    outlet: &BoundaryLoop,
    opts: &GeodesicOptions,
) -> Result<GeodesicPath> {
    let graph = SteinerGraph::new(mesh, topo, opts.steiner_points);
    let mut sources = Vec::new();
    let mut is_target = vec![false; graph.node_count()];
    for (lp, list) in [(inlet, Some(&mut sources)), (outlet, None)] {
        let mut nodes = Vec::new();
        for (a, b) in lp.edges() {
            nodes.push(a);
            let e = topo.edge_between(a, b).ok_or(Error::NoPath)?;
            nodes.extend(graph.edge_nodes(e));
        }
        match list {
            Some(s) => s.extend(nodes),
            None => nodes.into_iter().for_each(|n| is_target[n] = true),
        }
    }
    let search = graph.search(Seeds::Nodes(&sources), Goal::Nodes(&is_target), None);
    let (nodes, faces) = search.ok_or(Error::NoPath)?;
    let start = graph.end_from_node(nodes[0], faces[0], true);
    let end = graph.end_from_node(*nodes.last().unwrap(), *faces.last().unwrap(), true);
    let mut strip = Strip::from_graph_path(&graph, &nodes, &faces, start, end)?;
    strip.straighten(opts);
    Ok(strip.into_path())
}

/// Shortest path between two fixed surface locations.
pub fn point_to_point_geodesic(
    mesh: &TriMeshFrame,
    topo: &Topology,
    from: MeshLocation,
    to: MeshLocation,
    opts: &GeodesicOptions,
) -> Result<GeodesicPath> {
    let graph = SteinerGraph::new(mesh, topo, opts.steiner_points);
    let src = graph.virtual_node(from);
    let dst = graph.virtual_node(to);
    let (nodes, faces) = graph.search(Seeds::Location(&src), Goal::Location(&dst), Some(dst.position)).ok_or(Error::NoPath)?;
    let start = graph.end_from_location(from, faces[0]);
    let end = graph.end_from_location(to, *faces.last().unwrap());
    let mut strip = Strip::from_graph_path(&graph, &nodes, &faces, start, end)?;
    strip.straighten(opts);
    Ok(strip.into_path())
}

// ---------------------------------------------------------------------------
// Steiner graph search

#[derive(Debug, Clone, Copy)]
enum NodeKind {
    Vertex(usize),
    Steiner { edge: usize, t: f64 },
}

struct VirtualNode {
    position: P3,
    faces: Vec<usize>,
}

struct SteinerGraph<'a> {
    mesh: &'a TriMeshFrame,
    topo: &'a Topology,
    k: usize,
    positions: Vec<P3>,
}

enum Seeds<'s> {
    Nodes(&'s [usize]),
    Location(&'s VirtualNode),
}

enum Goal<'s> {
    Nodes(&'s [bool]),
    Location(&'s VirtualNode),
}

const VIRTUAL: usize = usize::MAX;

#[derive(PartialEq)]
struct Entry {
    key: f64,
    node: usize,
}

impl Eq for Entry {}

impl Ord for Entry {
    fn cmp(&self, other: &Self) -> Ordering {
        other.key.total_cmp(&self.key).then_with(|| other.node.cmp(&self.node))
    }
}

impl PartialOrd for Entry {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl<'a> SteinerGraph<'a> {
    fn new(mesh: &'a TriMeshFrame, topo: &'a Topology, k: usize) -> Self {
        let nv = mesh.vertices.len();
        let mut positions = Vec::with_capacity(nv + k * topo.edges.len());
        positions.extend_from_slice(&mesh.vertices);
        for &[a, b] in &topo.edges {
            let pa = mesh.vertices[a];
            let d = mesh.vertices[b] - pa;
            for s in 0..k {
                positions.push(pa + d * ((s + 1) as f64 / (k + 1) as f64));
            }
        }
        SteinerGraph { mesh, topo, k, positions }
    }

    fn node_count(&self) -> usize {
        self.positions.len()
    }

    fn kind(&self, n: usize) -> NodeKind {
        let nv = self.mesh.vertices.len();
        if n < nv {
            NodeKind::Vertex(n)
        } else {
            let r = n - nv;
            NodeKind::Steiner { edge: r / self.k, t: (r % self.k + 1) as f64 / (self.k + 1) as f64 }
        }
    }

    fn edge_nodes(&self, e: usize) -> impl Iterator<Item = usize> {
        let base = self.mesh.vertices.len() + e * self.k;
        base..base + self.k
    }

    fn incident_faces(&self, n: usize) -> &[usize] {
        match self.kind(n) {
            NodeKind::Vertex(v) => &self.topo.vertex_faces[v],
            NodeKind::Steiner { edge, .. } => {
                let ef = &self.topo.edge_faces[edge];
                if ef[1] == usize::MAX {
                    &ef[..1]
                } else {
                    &ef[..]
                }
            }
        }
    }

    fn for_face_nodes(&self, f: usize, mut visit: impl FnMut(usize)) {
        for &v in &self.mesh.triangles[f] {
            visit(v);
        }
        for &e in &self.topo.face_edges[f] {
            for n in self.edge_nodes(e) {
                visit(n);
            }
        }
    }

    fn virtual_node(&self, loc: MeshLocation) -> VirtualNode {
        let faces = match loc {
            MeshLocation::Vertex(v) => self.topo.vertex_faces[v].clone(),
            MeshLocation::Edge { a, b, .. } => match self.topo.edge_between(a, b) {
                Some(e) => self.topo.faces_of_edge(e).collect(),
                None => Vec::new(),
            },
        };
        VirtualNode { position: loc.position(self.mesh), faces }
    }

    /// Returns the node sequence (with `VIRTUAL` for virtual endpoints) and
    /// the face each hop runs through.
    fn search(&self, seeds: Seeds, goal: Goal, heuristic_target: Option<P3>) -> Option<(Vec<usize>, Vec<usize>)> {
        let n = self.node_count();
        let mut dist = vec![f64::INFINITY; n];
        let mut pred = vec![VIRTUAL; n];
        let mut pred_face = vec![usize::MAX; n];
        let mut done = vec![false; n];
        let mut heap = BinaryHeap::new();
        let h = |p: &P3| heuristic_target.map_or(0.0, |t| (p - t).norm());

        let mut best_goal = f64::INFINITY;
        let mut goal_pred = (VIRTUAL, usize::MAX);

        match seeds {
            Seeds::Nodes(list) => {
                for &s in list {
                    if dist[s] > 0.0 {
                        dist[s] = 0.0;
                        pred_face[s] = self.incident_faces(s)[0];
                        heap.push(Entry { key: h(&self.positions[s]), node: s });
                    }
                }
            }
            Seeds::Location(src) => {
                for &f in &src.faces {
                    self.for_face_nodes(f, |m| {
                        let d = (self.positions[m] - src.position).norm();
                        if d < dist[m] {
                            dist[m] = d;
                            pred[m] = VIRTUAL;
                            pred_face[m] = f;
                            heap.push(Entry { key: d + h(&self.positions[m]), node: m });
                        }
                    });
                    if let Goal::Location(dst) = &goal {
                        if dst.faces.contains(&f) {
                            let d = (dst.position - src.position).norm();
                            if d < best_goal {
                                best_goal = d;
                                goal_pred = (VIRTUAL, f);
                            }
                        }
                    }
                }
            }
        }

        let mut reached = None;
        while let Some(Entry { key, node }) = heap.pop() {
            if done[node] {
                continue;
            }
            if key >= best_goal {
                break;
            }
            done[node] = true;
            if let Goal::Nodes(targets) = &goal {
                if targets[node] {
                    reached = Some(node);
                    break;
                }
            }
            let d0 = dist[node];
            let p0 = self.positions[node];
            for &f in self.incident_faces(node) {
                self.for_face_nodes(f, |m| {
                    if done[m] {
                        return;
                    }
                    let d = d0 + (self.positions[m] - p0).norm();
                    if d < dist[m] {
                        dist[m] = d;
                        pred[m] = node;
                        pred_face[m] = f;
                        heap.push(Entry { key: d + h(&self.positions[m]), node: m });
                    }
                });
                if let Goal::Location(dst) = &goal {
                    if dst.faces.contains(&f) {
                        let d = d0 + (dst.position - p0).norm();
                        if d < best_goal {
                            best_goal = d;
                            goal_pred = (node, f);
                        }
                    }
                }
            }
        }

        let mut nodes = Vec::new();
        let mut faces = Vec::new();
        let mut cur = match goal {
            Goal::Nodes(_) => reached?,
            Goal::Location(_) => {
                if !best_goal.is_finite() {
                    return None;
                }
                nodes.push(VIRTUAL);
                faces.push(goal_pred.1);
                goal_pred.0
            }
        };
        while cur != VIRTUAL {
            nodes.push(cur);
            faces.push(pred_face[cur]);
            if dist[cur] == 0.0 && matches!(seeds, Seeds::Nodes(_)) {
                break;
            }
            cur = pred[cur];
        }
        if matches!(seeds, Seeds::Location(_)) {
            nodes.push(VIRTUAL);
        } else {
            // The seed node's own face entry is not a hop.
            faces.pop();
        }
        nodes.reverse();
        faces.reverse();
        if faces.is_empty() {
            // Seed node is itself a target: a zero-length hop inside one face.
            faces.push(self.incident_faces(nodes[0])[0]);
            nodes.push(nodes[0]);
        }
        Some((nodes, faces))
    }

    fn end_from_node(&self, n: usize, face: usize, slide: bool) -> End {
        match self.kind(n) {
            NodeKind::Steiner { edge, t } => {
                let [a, b] = self.topo.edges[edge];
                End { a, b, t, slide: slide && self.topo.is_boundary_edge(edge) }
            }
            NodeKind::Vertex(v) => self.end_at_vertex(v, face, slide),
        }
    }

    fn end_at_vertex(&self, v: usize, face: usize, slide: bool) -> End {
        if slide {
            let tri = self.mesh.triangles[face];
            for k in 0..3 {
                let e = self.topo.face_edges[face][k];
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                if self.topo.is_boundary_edge(e) && (a == v || b == v) {
                    let w = if a == v { b } else { a };
                    return End { a: v, b: w, t: 0.0, slide: true };
                }
            }
        }
        End { a: v, b: v, t: 0.0, slide: false }
    }

    fn end_from_location(&self, loc: MeshLocation, face: usize) -> End {
        match loc {
            MeshLocation::Vertex(v) => self.end_at_vertex(v, face, false),
            MeshLocation::Edge { a, b, t } => End { a, b, t, slide: false },
        }
    }

    fn location_of(&self, n: usize) -> MeshLocation {
        match self.kind(n) {
            NodeKind::Vertex(v) => MeshLocation::Vertex(v),
            NodeKind::Steiner { edge, t } => {
                let [a, b] = self.topo.edges[edge];
                MeshLocation::Edge { a, b, t }
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Strip straightening

#[derive(Debug, Clone, Copy)]
struct End {
    a: usize,
    b: usize,
    t: f64,
    slide: bool,
}

/// A crossing of edge (a, b) at parameter t.
#[derive(Debug, Clone, Copy)]
struct Cross {
    a: usize,
    b: usize,
    t: f64,
}

struct Portal {
    a: P2,
    b: P2,
    /// Apex of the face the path leaves through this edge.
    back: P2,
}

struct Unfolded {
    portals: Vec<Portal>,
    start: [P2; 2],
    end: [P2; 2],
}

fn cross2(u: &nalgebra::Vector2<f64>, v: &nalgebra::Vector2<f64>) -> f64 {
    u.x * v.y - u.y * v.x
}

/// Third triangle corner at distances `da`, `db` from `a`, `b`, placed on
/// the side opposite `away` (or to the left of a→b).
fn place_apex(a: &P2, b: &P2, da: f64, db: f64, away: Option<&P2>) -> P2 {
    let d = (b - a).norm();
    if d <= 0.0 {
        return *a;
    }
    let ex = (b - a) / d;
    let ey = nalgebra::Vector2::new(-ex.y, ex.x);
    let x = (da * da - db * db + d * d) / (2.0 * d);
    let y = (da * da - x * x).max(0.0).sqrt();
    let sign = match away {
        Some(o) if cross2(&ex, &(o - a)) > 0.0 => -1.0,
        _ => 1.0,
    };
    a + ex * x + ey * (sign * y)
}

struct Strip<'a> {
    mesh: &'a TriMeshFrame,
    topo: &'a Topology,
    faces: Vec<usize>,
    /// `cross[i]` separates `faces[i]` and `faces[i + 1]`.
    cross: Vec<Cross>,
    start: End,
    end: End,
}

impl<'a> Strip<'a> {
    fn from_graph_path(graph: &SteinerGraph<'a>, nodes: &[usize], hop_faces: &[usize], start: End, end: End) -> Result<Self> {
        let mut strip = Strip { mesh: graph.mesh, topo: graph.topo, faces: vec![hop_faces[0]], cross: Vec::new(), start, end };
        for i in 1..hop_faces.len() {
            let next = hop_faces[i];
            let cur = *strip.faces.last().unwrap();
            if cur == next {
                continue;
            }
            let loc = graph.location_of(nodes[i]);
            strip.connect(cur, next, loc)?;
        }
        Ok(strip)
    }

    /// Extends the strip from face `cur` to the adjacent face `next` through `loc`.
    fn connect(&mut self, cur: usize, next: usize, loc: MeshLocation) -> Result<()> {
        match loc {
            MeshLocation::Edge { a, b, t } => {
                let e = self.topo.edge_between(a, b).ok_or(Error::NoPath)?;
                if self.topo.other_face(e, cur) != Some(next) {
                    return Err(Error::Invalid(format!("faces {cur} and {next} do not share edge ({a}, {b})")));
                }
                self.cross.push(Cross { a, b, t });
                self.faces.push(next);
            }
            MeshLocation::Vertex(v) => {
                let steps = self
                    .fan_walk(v, cur, next, None)
                    .ok_or_else(|| Error::Invalid(format!("faces {cur} and {next} are not connected around vertex {v}")))?;
                for (w, f) in steps {
                    self.cross.push(Cross { a: v, b: w, t: 0.0 });
                    self.faces.push(f);
                }
            }
        }
        Ok(())
    }

    /// Walks around vertex `v` from face `from` to face `to`; returns the
    /// (far edge endpoint, entered face) steps. With `avoid`, the walk may not
    /// start through edge (v, avoid); otherwise the shorter direction wins.
    fn fan_walk(&self, v: usize, from: usize, to: usize, avoid: Option<usize>) -> Option<Vec<(usize, usize)>> {
        let spokes = |f: usize| -> [usize; 2] {
            let t = self.mesh.triangles[f];
            let k = t.iter().position(|&x| x == v).unwrap();
            [t[(k + 1) % 3], t[(k + 2) % 3]]
        };
        if !self.mesh.triangles[from].contains(&v) || !self.mesh.triangles[to].contains(&v) {
            return None;
        }
        let limit = self.topo.vertex_faces[v].len() + 1;
        let mut best: Option<Vec<(usize, usize)>> = None;
        for first in spokes(from) {
            if Some(first) == avoid {
                continue;
            }
            let mut steps = Vec::new();
            let mut face = from;
            let mut w = first;
            let mut ok = false;
            for _ in 0..limit {
                let e = self.topo.edge_between(v, w)?;
                let Some(g) = self.topo.other_face(e, face) else { break };
                steps.push((w, g));
                if g == to {
                    ok = true;
                    break;
                }
                let [s0, s1] = spokes(g);
                w = if s0 == w { s1 } else { s0 };
                face = g;
            }
            if ok && best.as_ref().is_none_or(|b| steps.len() < b.len()) {
                best = Some(steps);
            }
        }
        best
    }

    fn end_pos(&self, e: &End) -> P3 {
        let pa = self.mesh.vertices[e.a];
        pa + (self.mesh.vertices[e.b] - pa) * e.t
    }

    fn cross_pos(&self, c: &Cross) -> P3 {
        let pa = self.mesh.vertices[c.a];
        pa + (self.mesh.vertices[c.b] - pa) * c.t
    }

    /// Point `i` of the polyline: 0 is the start, `cross.len() + 1` the end.
    fn point(&self, i: usize) -> P3 {
        if i == 0 {
            self.end_pos(&self.start)
        } else if i <= self.cross.len() {
            self.cross_pos(&self.cross[i - 1])
        } else {
            self.end_pos(&self.end)
        }
    }

    fn length(&self) -> f64 {
        let n = self.cross.len() + 2;
        (0..n - 1).map(|i| (self.point(i + 1) - self.point(i)).norm()).sum()
    }

    /// Lays the strip out in the plane. Returns the unfolded `(a, b)` ends of
    /// every crossing edge and of the start and end edges.
    fn unfold(&self) -> Unfolded {
        let v = |i: usize| self.mesh.vertices[i];
        let t0 = self.mesh.triangles[self.faces[0]];
        let d01 = (v(t0[1]) - v(t0[0])).norm();
        let p0 = P2::new(0.0, 0.0);
        let p1 = P2::new(d01, 0.0);
        let p2 = place_apex(&p0, &p1, (v(t0[2]) - v(t0[0])).norm(), (v(t0[2]) - v(t0[1])).norm(), None);
        let mut coords = [(t0[0], p0), (t0[1], p1), (t0[2], p2)];
        let at = |coords: &[(usize, P2); 3], x: usize| coords.iter().find(|c| c.0 == x).map(|c| c.1);
        let start = [at(&coords, self.start.a).unwrap_or(p0), at(&coords, self.start.b).unwrap_or(p0)];
        let mut portals = Vec::with_capacity(self.cross.len());
        for (i, c) in self.cross.iter().enumerate() {
            let pa = at(&coords, c.a).unwrap_or(p0);
            let pb = at(&coords, c.b).unwrap_or(p0);
            let o = coords.iter().find(|x| x.0 != c.a && x.0 != c.b).map(|x| x.1).unwrap_or(p0);
            portals.push(Portal { a: pa, b: pb, back: o });
            let tn = self.mesh.triangles[self.faces[i + 1]];
            let cv = tn.iter().copied().find(|&x| x != c.a && x != c.b).unwrap_or(tn[0]);
            let pc = place_apex(&pa, &pb, (v(cv) - v(c.a)).norm(), (v(cv) - v(c.b)).norm(), Some(&o));
            coords = [(c.a, pa), (c.b, pb), (cv, pc)];
        }
        let end = [at(&coords, self.end.a).unwrap_or(p0), at(&coords, self.end.b).unwrap_or(p0)];
        Unfolded { portals, start, end }
    }

    /// Sets every crossing to the shortest path through the strip between
    /// the current endpoints. Returns the unfolding together with the first
    /// and last bend points (the far end when the path is straight).
    fn funnel(&mut self) -> (Unfolded, P2, P2) {
        let un = self.unfold();
        let lerp = |e: &[P2; 2], t: f64| e[0] + (e[1] - e[0]) * t;
        let s = lerp(&un.start, self.start.t);
        let e = lerp(&un.end, self.end.t);
        let n = un.portals.len();
        // Portal k (1..=n) is crossing k - 1; 0 and n + 1 are the endpoints.
        // Each side holds (point, portal index, is the crossing's `a` end).
        let side = |k: usize, left: bool| -> (P2, bool) {
            let p = &un.portals[k - 1];
            let fwd = nalgebra::center(&p.a, &p.b) - p.back;
            let a_left = cross2(&fwd, &(p.a - p.back)) > 0.0;
            if left == a_left {
                (p.a, true)
            } else {
                (p.b, false)
            }
        };
        let portal = |k: usize| -> (P2, P2) {
            if k == 0 {
                (s, s)
            } else if k == n + 1 {
                (e, e)
            } else {
                (side(k, true).0, side(k, false).0)
            }
        };
        let scale = (s - e).norm().max(1e-300);
        let same = |x: &P2, y: &P2| (x - y).norm() <= 1e-12 * scale;
        let mut bends: Vec<(P2, usize)> = vec![(s, 0)];
        let (mut apex, mut left, mut right) = (s, s, s);
        let (mut left_i, mut right_i) = (0usize, 0usize);
        let mut apex_i;
        let mut k = 1;
        while k <= n + 1 {
            let (l, r) = portal(k);
            if cross2(&(right - apex), &(r - apex)) >= 0.0 {
                if same(&apex, &right) || cross2(&(left - apex), &(r - apex)) < 0.0 {
                    right = r;
                    right_i = k;
                } else {
                    apex = left;
                    apex_i = left_i;
                    bends.push((apex, apex_i));
                    right = apex;
                    right_i = apex_i;
                    k = apex_i + 1;
                    continue;
                }
            }
            if cross2(&(left - apex), &(l - apex)) <= 0.0 {
                if same(&apex, &left) || cross2(&(right - apex), &(l - apex)) > 0.0 {
                    left = l;
                    left_i = k;
                } else {
                    apex = right;
                    apex_i = right_i;
                    bends.push((apex, apex_i));
                    left = apex;
                    left_i = apex_i;
                    k = apex_i + 1;
                    continue;
                }
            }
            k += 1;
        }
        bends.push((e, n + 1));

        for w in bends.windows(2) {
            let (pa, ia) = w[0];
            let (pb, ib) = w[1];
            let dir = pb - pa;
            for k in ia.max(1)..=ib.min(n) {
                let (l, _) = side(k, true);
                let (r, _) = side(k, false);
                let a_is_left = side(k, true).1;
                let t_left = if same(&l, &pa) || same(&l, &pb) {
                    0.0
                } else if same(&r, &pa) || same(&r, &pb) {
                    1.0
                } else {
                    let d = r - l;
                    let den = cross2(&dir, &d);
                    if den.abs() <= 1e-300 {
                        continue;
                    }
                    (cross2(&dir, &(pa - l)) / den).clamp(0.0, 1.0)
                };
                self.cross[k - 1].t = if a_is_left { t_left } else { 1.0 - t_left };
            }
        }
        // A bend may repeat an endpoint when the funnel opens at it.
        let first = bends.iter().map(|b| b.0).find(|p| !same(p, &s)).unwrap_or(e);
        let last = bends.iter().rev().map(|b| b.0).find(|p| !same(p, &e)).unwrap_or(s);
        (un, first, last)
    }

    /// Slides a free endpoint along its edge toward `target`. Returns the
    /// boundary vertex it is pushed against when the optimum lies past the edge.
    fn slide_end(&mut self, first: bool, edge: &[P2; 2], target: &P2) -> Option<usize> {
        let end = if first { &mut self.start } else { &mut self.end };
        if !end.slide {
            return None;
        }
        let ab = edge[1] - edge[0];
        let len2 = ab.norm_squared();
        if len2 <= 0.0 {
            return None;
        }
        let raw = (target - edge[0]).dot(&ab) / len2;
        end.t = raw.clamp(0.0, 1.0);
        if raw < -AT_VERTEX {
            Some(end.a)
        } else if raw > 1.0 + AT_VERTEX {
            Some(end.b)
        } else {
            None
        }
    }

    /// Moves a free endpoint pinned at boundary vertex `w` onto the next
    /// boundary edge around `w`, growing or trimming the strip by the fan in between.
    fn extend_end(&mut self, first: bool, w: usize) -> bool {
        let end = if first { self.start } else { self.end };
        let face = if first { self.faces[0] } else { *self.faces.last().unwrap() };
        let current = (end.a.min(end.b), end.a.max(end.b));
        let mut target = None;
        for &g in &self.topo.vertex_faces[w] {
            let tri = self.mesh.triangles[g];
            for k in 0..3 {
                let e = self.topo.face_edges[g][k];
                let (a, b) = (tri[k], tri[(k + 1) % 3]);
                if self.topo.is_boundary_edge(e) && (a == w || b == w) && (a.min(b), a.max(b)) != current {
                    target = Some((g, if a == w { b } else { a }));
                }
            }
        }
        let Some((g, w2)) = target else { return false };
        let new_end = End { a: w, b: w2, t: 0.0, slide: true };
        let touches = |c: &Cross| c.a == w || c.b == w;
        if first {
            // Undo an earlier extension when the strip already runs through g around w.
            let mut j = 0;
            while j < self.cross.len() && touches(&self.cross[j]) {
                if self.faces[j + 1] == g {
                    self.faces.drain(..=j);
                    self.cross.drain(..=j);
                    self.start = new_end;
                    return true;
                }
                j += 1;
            }
        } else {
            let n = self.cross.len();
            let mut j = 0;
            while j < n && touches(&self.cross[n - 1 - j]) {
                if self.faces[n - 1 - j] == g {
                    self.faces.truncate(n - j);
                    self.cross.truncate(n - 1 - j);
                    self.end = new_end;
                    return true;
                }
                j += 1;
            }
        }
        let steps = if g == face {
            Vec::new()
        } else {
            match self.fan_walk(w, face, g, None) {
                Some(s) => s,
                None => return false,
            }
        };
        if first {
            let mut faces = vec![g];
            let mut cross = Vec::new();
            for k in (0..steps.len()).rev() {
                cross.push(Cross { a: w, b: steps[k].0, t: 0.0 });
                faces.push(if k == 0 { face } else { steps[k - 1].1 });
            }
            faces.pop();
            faces.extend_from_slice(&self.faces);
            cross.extend_from_slice(&self.cross);
            self.faces = faces;
            self.cross = cross;
            self.start = new_end;
        } else {
            for (wk, fk) in steps {
                self.cross.push(Cross { a: w, b: wk, t: 0.0 });
                self.faces.push(fk);
            }
            self.end = new_end;
        }
        true
    }

    /// Alternates exact shortest paths through the strip with endpoint slides.
    fn straighten_strip(&mut self, opts: &GeodesicOptions) {
        let mut prev = f64::INFINITY;
        let mut extensions = 0usize;
        let max_extensions = 4 * self.mesh.vertices.len().isqrt() + 64;
        for _ in 0..opts.max_sweeps {
            let mut grew = false;
            let (un, first, _) = self.funnel();
            if let Some(w) = self.slide_end(true, &un.start, &first) {
                if extensions < max_extensions && self.extend_end(true, w) {
                    extensions += 1;
                    grew = true;
                }
            }
            let (un, _, last) = self.funnel();
            if let Some(w) = self.slide_end(false, &un.end, &last) {
                if extensions < max_extensions && self.extend_end(false, w) {
                    extensions += 1;
                    grew = true;
                }
            }
            let len = self.length();
            if !grew && (prev - len).abs() <= opts.tolerance * len.max(f64::MIN_POSITIVE) {
                break;
            }
            prev = len;
        }
        self.funnel();
    }

    fn straighten(&mut self, opts: &GeodesicOptions) {
        self.straighten_strip(opts);
        for _ in 0..32 {
            if !self.flip_vertex_runs() {
                break;
            }
            self.straighten_strip(opts);
        }
    }

    fn cross_vertex(&self, i: usize) -> Option<(usize, usize)> {
        let c = self.cross[i];
        if c.t <= AT_VERTEX {
            Some((c.a, c.b))
        } else if c.t >= 1.0 - AT_VERTEX {
            Some((c.b, c.a))
        } else {
            None
        }
    }

    fn is_boundary_vertex(&self, v: usize) -> bool {
        self.topo.vertex_faces[v]
            .iter()
            .any(|&f| self.topo.face_edges[f].iter().any(|&e| self.topo.is_boundary_edge(e) && self.topo.edges[e].contains(&v)))
    }

    /// Moves runs of crossings pinned at a vertex to the other side of it
    /// when that side subtends less than a straight angle.
    fn flip_vertex_runs(&mut self) -> bool {
        let mut i = 0;
        let mut flipped = false;
        while i < self.cross.len() {
            let Some((v, _)) = self.cross_vertex(i) else {
                i += 1;
                continue;
            };
            let r = i;
            let mut s = i;
            while s + 1 < self.cross.len() && self.cross_vertex(s + 1).map(|x| x.0) == Some(v) {
                s += 1;
            }
            i = s + 1;
            if self.is_boundary_vertex(v) {
                continue;
            }
            let pv = self.mesh.vertices[v];
            let p = self.point(r);
            let q = self.point(s + 2);
            if (p - pv).norm() < 1e-12 || (q - pv).norm() < 1e-12 {
                continue;
            }
            let far = |k: usize| self.cross_vertex(k).unwrap().1;
            let mut current = geom::angle_at(&pv, &p, &self.mesh.vertices[far(r)]);
            for k in r + 1..=s {
                current += geom::angle_at(&pv, &self.mesh.vertices[far(k - 1)], &self.mesh.vertices[far(k)]);
            }
            current += geom::angle_at(&pv, &self.mesh.vertices[far(s)], &q);
            let total: f64 = self.topo.vertex_faces[v]
                .iter()
                .map(|&f| {
                    let t = self.mesh.triangles[f];
                    let k = t.iter().position(|&x| x == v).unwrap();
                    geom::angle_at(&pv, &self.mesh.vertices[t[(k + 1) % 3]], &self.mesh.vertices[t[(k + 2) % 3]])
                })
                .sum();
            let other = total - current;
            if current <= PI + 1e-9 || other >= PI - 1e-9 {
                continue;
            }
            let from = self.faces[r];
            let to = self.faces[s + 1];
            let Some(steps) = self.fan_walk(v, from, to, Some(far(r))) else { continue };
            let new_cross: Vec<Cross> = steps.iter().map(|&(w, _)| Cross { a: v, b: w, t: 0.0 }).collect();
            let new_faces: Vec<usize> = steps.iter().map(|&(_, f)| f).collect();
            // new_faces ends with `to`, which already sits at index s + 1.
            self.cross.splice(r..=s, new_cross.iter().copied());
            self.faces.splice(r + 1..=s + 1, new_faces.iter().copied());
            flipped = true;
            i = r + new_cross.len();
        }
        flipped
    }

    fn into_path(self) -> GeodesicPath {
        let mut locs = Vec::with_capacity(self.cross.len() + 2);
        locs.push(MeshLocation::on_edge(self.start.a, self.start.b, self.start.t));
        for c in &self.cross {
            locs.push(MeshLocation::on_edge(c.a, c.b, c.t));
        }
        locs.push(MeshLocation::on_edge(self.end.a, self.end.b, self.end.t));

        let mut points: Vec<PathPoint> = Vec::with_capacity(locs.len());
        let mut faces = Vec::with_capacity(locs.len());
        for (i, loc) in locs.into_iter().enumerate() {
            let position = loc.position(self.mesh);
            if let Some(last) = points.last() {
                if last.location == loc || (last.position - position).norm() == 0.0 {
                    continue;
                }
                faces.push(self.faces[i - 1]);
            }
            points.push(PathPoint { location: loc, position });
        }
        if points.len() == 1 {
            points.push(points[0]);
            faces.push(self.faces[0]);
        }
        // Segment faces must contain both ends; repair where a merged run changed them.
        for i in 0..faces.len() {
            let f = faces[i];
            if !(contains(self.mesh, f, &points[i].location) && contains(self.mesh, f, &points[i + 1].location)) {
                if let Some(g) = self
                    .faces
                    .iter()
                    .copied()
                    .find(|&g| contains(self.mesh, g, &points[i].location) && contains(self.mesh, g, &points[i + 1].location))
                {
                    faces[i] = g;
                }
            }
        }
        let length = points.windows(2).map(|w| (w[1].position - w[0].position).norm()).sum();
        GeodesicPath { points, faces, length }
    }
}

fn contains(mesh: &TriMeshFrame, f: usize, loc: &MeshLocation) -> bool {
    let t = mesh.triangles[f];
    match *loc {
        MeshLocation::Vertex(v) => t.contains(&v),
        MeshLocation::Edge { a, b, .. } => t.contains(&a) && t.contains(&b),
    }
}
