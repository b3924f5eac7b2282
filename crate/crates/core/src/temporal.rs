//! Consistency over time: seam endpoint filtering, cycle alignment by volume
//! extrema and clipping the ventricular end to constant layer volume.

use log::warn;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::geom::P3;
use crate::mesh::{point_to_point_geodesic, GeodesicOptions, GeodesicPath, MeshLocation, Topology, TriMeshFrame};
use crate::parameterize::{closest_on_loop, lattice_volume, GridMesh, SurfaceLabel};

/// Relative tolerance under which two volumes count as the same extremum.
const VOLUME_TIE: f64 = 1e-9;

/// One surface over one cardiac cycle, uniformly spaced in time.
#[derive(Debug, Clone)]
pub struct SurfaceSequence {
    pub frames: Vec<GridMesh>,
    /// Cycle length in seconds.
    pub period: f64,
    pub surface: SurfaceLabel,
}

impl SurfaceSequence {
    pub const MIN_FRAMES: usize = 8;

    pub fn new(frames: Vec<GridMesh>, period: f64, surface: SurfaceLabel) -> Result<Self> {
        if frames.len() < Self::MIN_FRAMES {
            return Err(Error::Invalid(format!("{} frames, need at least {}", frames.len(), Self::MIN_FRAMES)));
        }
        if !(period > 0.0 && period.is_finite()) {
            return Err(Error::Invalid(format!("period {period} must be positive")));
        }
        let (n, m) = (frames[0].n, frames[0].m);
        if let Some(f) = frames.iter().find(|f| (f.n, f.m) != (n, m)) {
            return Err(Error::Invalid(format!("frame {} has a {}x{} grid, expected {n}x{m}", f.frame_index, f.n, f.m)));
        }
        Ok(SurfaceSequence { frames, period, surface })
    }

    pub fn len(&self) -> usize {
        self.frames.len()
    }

    pub fn is_empty(&self) -> bool {
        self.frames.is_empty()
    }

    /// Time step between frames in seconds.
    pub fn dt(&self) -> f64 {
        self.period / self.frames.len() as f64
    }

    pub fn volumes(&self) -> Vec<f64> {
        self.frames.par_iter().map(GridMesh::enclosed_volume).collect()
    }

    /// Frames in cycle order; frame indices are renumbered to match.
    pub fn reordered(&self, map: &CyclePhaseMap) -> SurfaceSequence {
        let frames = map.order().into_iter().enumerate().map(|(k, src)| GridMesh { frame_index: k, ..self.frames[src].clone() }).collect();
        SurfaceSequence { frames, ..self.clone() }
    }
}

fn loop_of(cycles: &[Vec<usize>], loc: &MeshLocation) -> Option<usize> {
    let v = match *loc {
        MeshLocation::Vertex(v) => v,
        MeshLocation::Edge { a, .. } => a,
    };
    cycles.iter().position(|c| c.contains(&v))
}

/// Replaces each seam endpoint by the boundary projection of the mean of its
/// own position and those of the two neighbouring frames (cyclic), then
/// recomputes the geodesic between the filtered endpoints. One pass.
pub fn stabilize_seam_endpoints(frames: &[TriMeshFrame], seams: &[GeodesicPath], opts: &GeodesicOptions) -> Result<Vec<GeodesicPath>> {
    if frames.len() != seams.len() {
        return Err(Error::Invalid(format!("{} frames but {} seams", frames.len(), seams.len())));
    }
    let t = frames.len();
    if t == 0 {
        return Ok(Vec::new());
    }
    let starts: Vec<P3> = seams.iter().map(|s| s.start().position).collect();
    let ends: Vec<P3> = seams.iter().map(|s| s.end().position).collect();
    let filtered = |pts: &[P3], k: usize| {
        let (prev, next) = ((k + t - 1) % t, (k + 1) % t);
        P3::from((pts[prev].coords + pts[k].coords + pts[next].coords) / 3.0)
    };
    (0..t)
        .into_par_iter()
        .map(|k| {
            let mesh = &frames[k];
            let seam = &seams[k];
            let topo = Topology::new(mesh);
            let cycles = topo.boundary_cycles(mesh)?;
            let project = |loc: &MeshLocation, target: P3| -> Result<MeshLocation> {
                let c =
                    loop_of(&cycles, loc).ok_or_else(|| Error::Invalid(format!("seam endpoint of frame {k} is not on the boundary")))?;
                Ok(closest_on_loop(mesh, &cycles[c], &target))
            };
            let from = project(&seam.start().location, filtered(&starts, k))?;
            let to = project(&seam.end().location, filtered(&ends, k))?;
            let tol = 1e-12 * mesh.bounding_diagonal();
            let unchanged = (from.position(mesh) - starts[k]).norm() <= tol && (to.position(mesh) - ends[k]).norm() <= tol;
            if unchanged {
                Ok(seam.clone())
            } else {
                point_to_point_geodesic(mesh, &topo, from, to, opts)
            }
        })
        .collect()
}

/// Maps source frames to normalized cycle time, with t = 0 at the minimum
/// volume and, for the two-segment warp, t = 0.5 at the maximum.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CyclePhaseMap {
    pub frame_count: usize,
    /// Source index of the minimum-volume frame.
    pub min_index: usize,
    /// Source index of the maximum-volume frame.
    pub max_index: usize,
    pub two_segment: bool,
    /// Normalized cycle time of every source frame.
    pub phase: Vec<f64>,
}

impl CyclePhaseMap {
    /// Position of a source frame after rotating the minimum to index 0.
    pub fn aligned_index(&self, source: usize) -> usize {
        (source + self.frame_count - self.min_index) % self.frame_count
    }

    /// Signed rotation applied to source indices.
    pub fn rotation(&self) -> isize {
        -(self.min_index as isize)
    }

    /// Source indices in cycle order.
    pub fn order(&self) -> Vec<usize> {
        (0..self.frame_count).map(|k| (k + self.min_index) % self.frame_count).collect()
    }

    /// Fraction of the cycle from the minimum to the maximum, before warping.
    pub fn expansion_fraction(&self) -> f64 {
        self.aligned_index(self.max_index) as f64 / self.frame_count as f64
    }
}

fn extremum(values: &[f64], better: impl Fn(f64, f64) -> bool) -> usize {
    let scale = values.iter().fold(0.0f64, |a, v| a.max(v.abs())).max(f64::MIN_POSITIVE);
    let mut best = 0;
    for (k, &v) in values.iter().enumerate().skip(1) {
        // Later frames must beat the current one by more than the tie width.
        if better(v, values[best]) && (v - values[best]).abs() > VOLUME_TIE * scale {
            best = k;
        }
    }
    best
}

/// Cycle alignment from per-frame volumes. Ties go to the earliest index.
pub fn align_cycle_by_volume(volumes: &[f64], two_segment: bool) -> Result<CyclePhaseMap> {
    let t = volumes.len();
    if t == 0 {
        return Err(Error::Invalid("no volumes to align".into()));
    }
    if let Some(k) = volumes.iter().position(|v| !v.is_finite()) {
        return Err(Error::Invalid(format!("volume of frame {k} is not finite")));
    }
    let min_index = extremum(volumes, |a, b| a < b);
    let max_index = extremum(volumes, |a, b| a > b);
    let mut map = CyclePhaseMap { frame_count: t, min_index, max_index, two_segment, phase: vec![0.0; t] };
    let peak = map.aligned_index(max_index);
    let warp = two_segment && peak > 0;
    if two_segment && !warp {
        warn!("volume series has no distinct maximum; using the linear phase map");
    }
    for src in 0..t {
        let k = map.aligned_index(src) as f64;
        map.phase[src] = if !warp {
            k / t as f64
        } else if k <= peak as f64 {
            0.5 * k / peak as f64
        } else {
            0.5 + 0.5 * (k - peak as f64) / (t - peak) as f64
        };
    }
    Ok(map)
}

/// Which end of the tube gives way when clipping.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ClipEnd {
    /// The ventricular end; the kept domain is [1 − v_c, 1].
    #[default]
    Inlet,
    /// The far end; the kept domain is [0, v_c].
    Outlet,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ClipOptions {
    pub end: ClipEnd,
    /// Relative volume error at which bisection stops.
    pub tolerance: f64,
    /// Samples of the kept fraction used to check monotonicity.
    pub monotone_samples: usize,
    /// Samples of the fallback scan when the volume is not monotone.
    pub scan_samples: usize,
}

impl Default for ClipOptions {
    fn default() -> Self {
        ClipOptions { end: ClipEnd::Inlet, tolerance: 1e-6, monotone_samples: 32, scan_samples: 2000 }
    }
}

#[derive(Debug, Clone)]
pub struct ClipResult {
    pub end: ClipEnd,
    /// Fraction of the v range kept in every frame.
    pub v_c: Vec<f64>,
    /// Frame with the smallest full layer volume; its v_c is 1.
    pub reference_frame: usize,
    pub target_volume: f64,
    /// Full layer volume of every frame before clipping.
    pub original_volumes: Vec<f64>,
    /// Layer volume of the resampled clipped grids.
    pub volumes: Vec<f64>,
    pub outer: Vec<GridMesh>,
    pub inner: Vec<GridMesh>,
    /// Frames whose volume curve was not monotone and needed the scan.
    pub scanned_frames: Vec<usize>,
}

impl ClipResult {
    /// Kept v interval of a frame.
    pub fn domain(&self, frame: usize) -> (f64, f64) {
        kept_range(self.end, self.v_c[frame])
    }

    /// Trimmed share of the v range per frame, in percent.
    pub fn trim_percent(&self) -> Vec<f64> {
        self.v_c.iter().map(|v| 100.0 * (1.0 - v)).collect()
    }

    /// (max − min) / min of the clipped layer volumes.
    pub fn volume_spread(&self) -> f64 {
        let lo = self.volumes.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = self.volumes.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        (hi - lo) / lo
    }
}

fn kept_range(end: ClipEnd, keep: f64) -> (f64, f64) {
    match end {
        ClipEnd::Inlet => (1.0 - keep, 1.0),
        ClipEnd::Outlet => (0.0, keep),
    }
}

/// Capped volume of the part of a lattice between `lo` and `hi` in v: the
/// original rows strictly inside plus interpolated rows at the cuts.
fn partial_volume(grid: &GridMesh, lo: f64, hi: f64) -> f64 {
    let m = grid.m;
    let station = |j: usize| j as f64 / (m - 1) as f64;
    let eps = 1e-12;
    let mut vs = vec![lo];
    vs.extend((0..m).map(station).filter(|&v| v > lo + eps && v < hi - eps));
    vs.push(hi);
    let n = grid.n;
    let points: Vec<P3> = vs.iter().flat_map(|&v| (0..n).map(move |i| grid.interpolate(i as f64 / n as f64, v))).collect();
    lattice_volume(&points, n, vs.len())
}

fn kept_layer_volume(outer: &GridMesh, inner: &GridMesh, end: ClipEnd, keep: f64) -> f64 {
    if keep <= 0.0 {
        return 0.0;
    }
    let (lo, hi) = kept_range(end, keep);
    partial_volume(outer, lo, hi) - partial_volume(inner, lo, hi)
}

/// Kept fraction whose layer volume equals `target`; the flag reports a
/// non-monotone volume curve that needed the fallback scan.
fn solve_keep(outer: &GridMesh, inner: &GridMesh, target: f64, opts: &ClipOptions) -> (f64, bool) {
    let g = |keep: f64| kept_layer_volume(outer, inner, opts.end, keep) - target;
    let samples: Vec<f64> = (0..=opts.monotone_samples.max(2)).map(|k| g(k as f64 / opts.monotone_samples.max(2) as f64)).collect();
    let slack = 1e-12 * target.abs().max(f64::MIN_POSITIVE);
    let monotone = samples.windows(2).all(|w| w[1] >= w[0] - slack);
    let (mut lo, mut hi, scanned) = if monotone {
        (0.0, 1.0, false)
    } else {
        // Walk down from the full domain to the first keep with too little volume.
        let steps = opts.scan_samples.max(2);
        let mut hi = 1.0;
        let mut lo = 0.0;
        for k in (0..steps).rev() {
            let keep = k as f64 / steps as f64;
            if g(keep) < 0.0 {
                lo = keep;
                break;
            }
            hi = keep;
        }
        (lo, hi, true)
    };
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        let r = g(mid);
        if r.abs() <= opts.tolerance * target || hi - lo < 1e-14 {
            return (mid, scanned);
        }
        if r < 0.0 {
            lo = mid;
        } else {
            hi = mid;
        }
    }
    (0.5 * (lo + hi), scanned)
}

/// Trims every frame so its layer volume equals the smallest one in the
/// cycle, then resamples the kept part onto the original number of stations.
pub fn clip_to_constant_volume(outer: &[GridMesh], inner: &[GridMesh], opts: &ClipOptions) -> Result<ClipResult> {
    if outer.len() != inner.len() || outer.is_empty() {
        return Err(Error::Invalid(format!("{} outer and {} inner frames", outer.len(), inner.len())));
    }
    for (k, (o, i)) in outer.iter().zip(inner).enumerate() {
        if (o.n, o.m) != (i.n, i.m) {
            return Err(Error::Invalid(format!("frame {k}: outer and inner grids differ in size")));
        }
    }
    let original: Vec<f64> = outer.par_iter().zip(inner).map(|(o, i)| o.enclosed_volume() - i.enclosed_volume()).collect();
    if let Some(k) = original.iter().position(|v| !(v.is_finite() && *v > 0.0)) {
        return Err(Error::Invalid(format!("frame {k}: layer volume {:.6e} is not positive; surfaces are not nested", original[k])));
    }
    let reference = extremum(&original, |a, b| a < b);
    let target = original[reference];

    let solved: Vec<Result<(f64, bool)>> = (0..outer.len())
        .into_par_iter()
        .map(|k| {
            if k == reference {
                return Ok((1.0, false));
            }
            if original[k] < target * (1.0 - opts.tolerance) {
                return Err(Error::ClipUnreachable { frame: k, volume: original[k], target });
            }
            Ok(solve_keep(&outer[k], &inner[k], target, opts))
        })
        .collect();
    let mut v_c = Vec::with_capacity(outer.len());
    let mut scanned_frames = Vec::new();
    for (k, r) in solved.into_iter().enumerate() {
        let (keep, scanned) = r?;
        if scanned {
            warn!("frame {k}: layer volume is not monotone in the clip parameter; used the fallback scan");
            scanned_frames.push(k);
        }
        v_c.push(keep);
    }

    let clipped: Vec<(GridMesh, GridMesh)> = (0..outer.len())
        .into_par_iter()
        .map(|k| {
            let (lo, hi) = kept_range(opts.end, v_c[k]);
            (outer[k].restrict_v(lo, hi, outer[k].m), inner[k].restrict_v(lo, hi, inner[k].m))
        })
        .collect();
    let volumes = clipped.iter().map(|(o, i)| o.enclosed_volume() - i.enclosed_volume()).collect();
    let (outer, inner) = clipped.into_iter().unzip();
    Ok(ClipResult {
        end: opts.end,
        v_c,
        reference_frame: reference,
        target_volume: target,
        original_volumes: original,
        volumes,
        outer,
        inner,
        scanned_frames,
    })
}
