//! The batch pipeline: validate, parameterize, align, clip, section and
//! analyze a dataset, then write tables, images and the summary report.

use std::path::{Path, PathBuf};

use log::{debug, info, warn};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::io::{self, Cohort, Config, Dataset, DatasetManifest};
use crate::kinematics::{self, AreaImage, ExpansionBand, GradientImage, PhaseRatios, WaveStats};
use crate::mesh::{
    boundary_loops_with, shortest_boundary_geodesic, validate_topology, GeodesicOptions, GeodesicPath, Topology, TriMeshFrame,
    ValidationReport,
};
use crate::parameterize::{align_lumen_seam, parameterize_with_seam, project_to_inner, seam_hausdorff, GridMesh, SurfaceLabel};
use crate::sections::{extract_contour, section_planes, validate_nonintersection, Contour, NonIntersectionReport};
use crate::shape::{self, CurvatureImage, NormalizedStack, ShapeModes, StrainField};
use crate::synth::{self, GeneratedSequence, TubeSpec};
use crate::temporal::{align_cycle_by_volume, clip_to_constant_volume, ClipOptions, ClipResult, CyclePhaseMap};

fn lap(clock: &mut std::time::Instant, what: &str) {
    debug!("{what}: {:.2} s", clock.elapsed().as_secs_f64());
    *clock = std::time::Instant::now();
}

/// Subject-level facts the analyses need besides the meshes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Subject {
    pub name: String,
    pub cohort: Cohort,
    /// Seconds.
    pub period: f64,
}

impl Subject {
    pub fn from_manifest(m: &DatasetManifest) -> Self {
        Subject { name: m.subject.clone(), cohort: m.cohort, period: m.period }
    }
}

/// Checks every frame; a frame whose only fault is inward orientation is
/// flipped in place.
pub fn validate_dataset(data: &mut Dataset) -> Result<Vec<(SurfaceLabel, ValidationReport)>> {
    let mut reports = Vec::new();
    for (label, frames) in
        [(SurfaceLabel::Outer, &mut data.outer), (SurfaceLabel::Inner, &mut data.inner), (SurfaceLabel::Lumen, &mut data.lumen)]
    {
        let checked: Vec<Result<ValidationReport>> = frames
            .par_iter_mut()
            .map(|mesh| {
                let frame_index = mesh.frame_index;
                let context = || format!("{} frame {}", label.name(), frame_index);
                let mut report = validate_topology(mesh).map_err(|e| e.in_stage("validate", context()))?;
                if !report.passed && !report.outward {
                    let mut flipped = mesh.clone();
                    flipped.flip_orientation();
                    let again = validate_topology(&flipped).map_err(|e| e.in_stage("validate", context()))?;
                    if again.passed {
                        warn!("{}: normals point inward; orientation flipped", context());
                        *mesh = flipped;
                        report = again;
                    }
                }
                report.into_result().map_err(|e| e.in_stage("validate", context()))
            })
            .collect();
        for r in checked {
            reports.push((label, r?));
        }
    }
    Ok(reports)
}

/// Grids of every requested surface plus parameterization diagnostics.
#[derive(Debug, Clone)]
pub struct Parameterized {
    pub outer: Vec<GridMesh>,
    pub inner: Option<Vec<GridMesh>>,
    pub lumen: Option<Vec<GridMesh>>,
    pub seams: Vec<GeodesicPath>,
    pub quality: Quality,
}

impl Parameterized {
    pub fn get(&self, label: SurfaceLabel) -> Option<&[GridMesh]> {
        match label {
            SurfaceLabel::Outer => Some(&self.outer),
            SurfaceLabel::Inner => self.inner.as_deref(),
            SurfaceLabel::Lumen => self.lumen.as_deref(),
        }
    }
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Quality {
    /// Largest seam-to-column Hausdorff distance over mean edge length.
    pub seam_hausdorff_edges: f64,
    /// Largest row and column spacing coefficients of variation.
    pub spacing_cv_rows: f64,
    pub spacing_cv_columns: f64,
    pub flipped_triangles: usize,
    pub clamped_weights: usize,
    pub projection_flagged_nodes: usize,
}

fn surface_seam(mesh: &TriMeshFrame, config: &Config, opts: &GeodesicOptions) -> Result<GeodesicPath> {
    let topo = Topology::new(mesh);
    let (inlet, outlet) = boundary_loops_with(mesh, &topo, config.inlet)?;
    shortest_boundary_geodesic(mesh, &topo, &inlet, &outlet, opts)
}

struct FrameGrid {
    grid: GridMesh,
    hausdorff_edges: f64,
    flipped: usize,
    clamped: usize,
}

fn grid_frame(mesh: &TriMeshFrame, seam: &GeodesicPath, config: &Config, label: SurfaceLabel) -> Result<FrameGrid> {
    let (flat, grid) = parameterize_with_seam(mesh, seam, config.grid_n, config.grid_m, label)?;
    let edge = mesh.mean_edge_length();
    Ok(FrameGrid { hausdorff_edges: seam_hausdorff(&grid, seam) / edge, flipped: flat.flipped.len(), clamped: flat.clamped_weights, grid })
}

/// Seams, temporal stabilization and per-frame flattening of every surface.
pub fn parameterize_dataset(data: &Dataset, config: &Config) -> Result<Parameterized> {
    let opts = GeodesicOptions::default();
    let mut clock = std::time::Instant::now();
    let outer = &data.outer;
    let raw: Vec<GeodesicPath> = outer
        .par_iter()
        .map(|m| surface_seam(m, config, &opts).map_err(|e| e.in_stage("geodesics", format!("outer frame {}", m.frame_index))))
        .collect::<Result<_>>()?;
    lap(&mut clock, "geodesics");
    let seams = crate::temporal::stabilize_seam_endpoints(outer, &raw, &opts).map_err(|e| e.in_stage("stabilize", "outer seams"))?;
    lap(&mut clock, "stabilize");
    let mut quality = Quality::default();
    let mut collect = |frames: Vec<FrameGrid>| -> Vec<GridMesh> {
        for f in &frames {
            quality.seam_hausdorff_edges = quality.seam_hausdorff_edges.max(f.hausdorff_edges);
            quality.flipped_triangles += f.flipped;
            quality.clamped_weights += f.clamped;
            let (r, c) = f.grid.spacing_cv();
            quality.spacing_cv_rows = quality.spacing_cv_rows.max(r);
            quality.spacing_cv_columns = quality.spacing_cv_columns.max(c);
        }
        frames.into_iter().map(|f| f.grid).collect()
    };
    let outer_frames: Vec<FrameGrid> = outer
        .par_iter()
        .zip(&seams)
        .map(|(m, s)| {
            grid_frame(m, s, config, SurfaceLabel::Outer).map_err(|e| e.in_stage("flatten", format!("outer frame {}", m.frame_index)))
        })
        .collect::<Result<_>>()?;
    let outer_grids = collect(outer_frames);
    lap(&mut clock, "flatten outer");
    let wants = |s| config.surfaces.contains(&s);
    let lumen = if wants(SurfaceLabel::Lumen) && !data.lumen.is_empty() {
        let frames: Vec<FrameGrid> = data
            .lumen
            .par_iter()
            .zip(&seams)
            .map(|(m, s)| {
                let context = || format!("lumen frame {}", m.frame_index);
                let seam = align_lumen_seam(m, s, &opts).map_err(|e| e.in_stage("geodesics", context()))?;
                grid_frame(m, &seam, config, SurfaceLabel::Lumen).map_err(|e| e.in_stage("flatten", context()))
            })
            .collect::<Result<_>>()?;
        let grids = collect(frames);
        lap(&mut clock, "flatten lumen");
        Some(grids)
    } else {
        None
    };
    let inner = if wants(SurfaceLabel::Inner) && !data.inner.is_empty() {
        let projected: Vec<_> =
            data.inner.par_iter().zip(&outer_grids).map(|(m, g)| project_to_inner(g, m, config.projection_max_distance)).collect();
        quality.projection_flagged_nodes = projected.iter().map(|p| p.flagged.len()).sum();
        if quality.projection_flagged_nodes > 0 {
            warn!(
                "{} inner grid nodes lie farther than {} mm from the outer grid",
                quality.projection_flagged_nodes, config.projection_max_distance
            );
        }
        Some(projected.into_iter().map(|p| p.grid).collect())
    } else {
        None
    };
    lap(&mut clock, "project inner");
    Ok(Parameterized { outer: outer_grids, inner, lumen, seams, quality })
}

/// Everything computed for one surface.
#[derive(Debug, Clone)]
pub struct SurfaceAnalysis {
    pub surface: SurfaceLabel,
    /// Stations × frames in cycle order (frame 0 at minimum volume).
    pub areas: AreaImage,
    pub peaks: Vec<Option<f64>>,
    pub bands: Vec<Option<ExpansionBand>>,
    pub gradient: GradientImage,
    pub wave: std::result::Result<WaveStats, String>,
    pub local_speeds: Vec<f64>,
    pub nonintersection: NonIntersectionReport,
    pub self_touching: usize,
    pub mean_curvature: NormalizedStack,
    pub radial_curvature: NormalizedStack,
    pub curvature_rows: Vec<CurvatureRow>,
    pub strain: Option<Vec<StrainField>>,
    pub modes: Vec<ShapeModes>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CurvatureRow {
    pub frame: usize,
    pub station: usize,
    pub mean_curvature: f64,
    pub radial_curvature: f64,
    pub flagged: bool,
}

#[derive(Debug, Clone)]
pub struct Analysis {
    pub subject: Subject,
    pub config: Config,
    pub frames: usize,
    pub volumes: Vec<(SurfaceLabel, Vec<f64>)>,
    pub phase_map: CyclePhaseMap,
    pub phases: PhaseRatios,
    pub clip: Option<ClipResult>,
    pub quality: Quality,
    pub surfaces: Vec<SurfaceAnalysis>,
}

fn contours_for_frame(
    mesh: &TriMeshFrame,
    grid: &GridMesh,
    label: SurfaceLabel,
    samples: usize,
    stations: &[usize],
) -> Result<Vec<Contour>> {
    let planes = section_planes(grid)?;
    stations.iter().map(|&j| extract_contour(mesh, &planes[j], label, samples)).collect()
}

/// Section contours of one surface at every station and frame, cut by the
/// planes of the reference grids.
fn section_surface(meshes: &[TriMeshFrame], planes_from: &[GridMesh], label: SurfaceLabel, config: &Config) -> Result<Vec<Vec<Contour>>> {
    let stations: Vec<usize> = (0..config.grid_m).collect();
    meshes
        .par_iter()
        .zip(planes_from)
        .map(|(mesh, grid)| {
            contours_for_frame(mesh, grid, label, config.contour_samples, &stations)
                .map_err(|e| e.in_stage("sections", format!("{} frame {}", label.name(), mesh.frame_index)))
        })
        .collect()
}

fn analyze_surface(
    label: SurfaceLabel,
    meshes: &[TriMeshFrame],
    grids: &[GridMesh],
    outer_grids: &[GridMesh],
    clipped: Option<&ClipResult>,
    map: &CyclePhaseMap,
    subject: &Subject,
    config: &Config,
) -> Result<SurfaceAnalysis> {
    let t = meshes.len();
    let m = config.grid_m;
    let order = map.order();
    let mut clock = std::time::Instant::now();
    let contours = section_surface(meshes, outer_grids, label, config)?;
    lap(&mut clock, "sections");
    let diagonal = meshes[0].bounding_diagonal();
    let mut nonintersection = NonIntersectionReport::default();
    for frame in &contours {
        nonintersection.merge(validate_nonintersection(frame, 1e-9 * diagonal));
    }
    let self_touching = contours.iter().flatten().filter(|c| c.self_touching).count();

    // Area image in cycle order.
    let table: Vec<Vec<Option<f64>>> = order.iter().map(|&k| contours[k].iter().map(|c| Some(c.area().abs())).collect()).collect();
    let depth = kinematics::station_depths(grids);
    let areas =
        kinematics::build_area_image(&table, depth, subject.period / t as f64).map_err(|e| e.in_stage("area image", label.name()))?;
    let peaks = kinematics::peak_times(&areas);
    let bands = kinematics::expansion_bands(&areas, &peaks);
    let gradient = kinematics::area_gradient_image(&areas);
    let (local_speeds, _) = kinematics::local_wave_speeds(&peaks, &areas.depth, t, areas.dt);
    let wave = kinematics::wave_speed_stats(&peaks, &areas.depth, t, areas.dt).map_err(|e| {
        warn!("{}: {e}", label.name());
        e.to_string()
    });

    lap(&mut clock, "kinematics");
    // Curvature stacks in cycle order.
    let stencil =
        if config.curvature_stencil > 0 { config.curvature_stencil } else { shape::default_stencil(config.contour_samples, config.grid_n) };
    let (mean, radial): (Vec<CurvatureImage>, Vec<CurvatureImage>) = order
        .par_iter()
        .map(|&k| (shape::mean_curvature(&grids[k]), shape::radial_curvature_image(&grids[k], &contours[k], stencil)))
        .unzip();
    let mut curvature_rows = Vec::with_capacity(t * m);
    for (a, (h, r)) in mean.iter().zip(&radial).enumerate() {
        for j in 0..m {
            let avg = |c: &CurvatureImage| (0..c.n).map(|i| c.get(i, j)).sum::<f64>() / c.n as f64;
            curvature_rows.push(CurvatureRow {
                frame: a,
                station: j,
                mean_curvature: avg(h),
                radial_curvature: avg(r),
                flagged: h.flagged_rows[j] || r.flagged_rows[j],
            });
        }
    }
    let mean_curvature = shape::normalize_per_pixel(&mean)?;
    let radial_curvature = shape::normalize_per_pixel(&radial)?;

    lap(&mut clock, "curvature");
    let strain = if label != SurfaceLabel::Lumen {
        let aligned: Vec<GridMesh> = order.iter().map(|&k| grids[k].clone()).collect();
        Some(shape::strain_sequence(&aligned, 0).map_err(|e| e.in_stage("strain", label.name()))?)
    } else {
        None
    };

    lap(&mut clock, "strain");
    // Contour PCA on the clipped domain when there is one.
    let stations: Vec<usize> =
        config.pca_stations.iter().map(|f| ((f.clamp(0.0, 1.0) * (m - 1) as f64).round() as usize).min(m - 1)).collect();
    let pca_contours: Vec<Vec<Contour>> = match clipped {
        Some(clip) => meshes
            .par_iter()
            .zip(&clip.outer)
            .map(|(mesh, grid)| {
                contours_for_frame(mesh, grid, label, config.contour_samples, &stations)
                    .map_err(|e| e.in_stage("sections", format!("clipped {} frame {}", label.name(), mesh.frame_index)))
            })
            .collect::<Result<_>>()?,
        None => contours.iter().map(|f| stations.iter().map(|&j| f[j].clone()).collect()).collect(),
    };
    let mut modes = Vec::new();
    for (s, _) in stations.iter().enumerate() {
        let group: Vec<&Contour> = pca_contours.iter().map(|f| &f[s]).collect();
        for result in shape::contour_pca_by_phase(&group, map, config.pca_modes) {
            match result {
                Ok(mut r) => {
                    r.station = Some(stations[s]);
                    modes.push(r);
                }
                Err(e) => warn!("{} station {}: {e}", label.name(), stations[s]),
            }
        }
    }

    lap(&mut clock, "shape modes");
    Ok(SurfaceAnalysis {
        surface: label,
        areas,
        peaks,
        bands,
        gradient,
        wave,
        local_speeds,
        nonintersection,
        self_touching,
        mean_curvature,
        radial_curvature,
        curvature_rows,
        strain,
        modes,
    })
}

/// Runs every analysis on a validated dataset.
pub fn analyze(data: &Dataset, subject: &Subject, config: &Config) -> Result<Analysis> {
    let frames = data.outer.len();
    info!("parameterizing {frames} frames");
    let grids = parameterize_dataset(data, config)?;
    let mut volumes = vec![(SurfaceLabel::Outer, grids.outer.iter().map(|g| g.enclosed_volume()).collect::<Vec<_>>())];
    for label in [SurfaceLabel::Inner, SurfaceLabel::Lumen] {
        if let Some(g) = grids.get(label) {
            volumes.push((label, g.iter().map(|g| g.enclosed_volume()).collect()));
        }
    }
    let phase_map = align_cycle_by_volume(&volumes[0].1, config.two_segment).map_err(|e| e.in_stage("align", "outer volumes"))?;
    let phases = kinematics::cycle_phase_ratios(&volumes[0].1, subject.period)?;
    let clip = match (config.clip, grids.inner.as_ref()) {
        (true, Some(inner)) => {
            let opts = ClipOptions { end: config.clip_end, ..ClipOptions::default() };
            Some(clip_to_constant_volume(&grids.outer, inner, &opts).map_err(|e| e.in_stage("clip", "layer volume"))?)
        }
        (true, None) => {
            warn!("clipping needs the inner surface; contour analysis stays Eulerian");
            None
        }
        _ => None,
    };
    let mut surfaces = Vec::new();
    for label in SurfaceLabel::ALL {
        let (Some(g), true) = (grids.get(label), config.surfaces.contains(&label)) else { continue };
        info!("analyzing {}", label.name());
        surfaces.push(analyze_surface(label, data.get(label), g, &grids.outer, clip.as_ref(), &phase_map, subject, config)?);
    }
    Ok(Analysis {
        subject: subject.clone(),
        config: config.clone(),
        frames,
        volumes,
        phase_map,
        phases,
        clip,
        quality: grids.quality,
        surfaces,
    })
}

// ---------------------------------------------------------------------------
// Summary and exports

/// The per-subject row of expansion and contraction timing and wave speeds.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Table1Row {
    pub expand_pct: f64,
    pub contract_pct: f64,
    pub ratio: f64,
    pub period_ms: f64,
    pub expand_ms: f64,
    pub contract_ms: f64,
    pub speed_min: Option<f64>,
    pub speed_max: Option<f64>,
    pub speed_avg: Option<f64>,
    pub speed_std: Option<f64>,
    pub speed_cycle: Option<f64>,
}

impl Table1Row {
    pub fn new(p: &PhaseRatios, wave: Option<&WaveStats>) -> Self {
        Table1Row {
            expand_pct: 100.0 * p.expand,
            contract_pct: 100.0 * p.contract,
            ratio: p.ratio,
            period_ms: 1e3 * p.period,
            expand_ms: 1e3 * p.expand_time,
            contract_ms: 1e3 * p.contract_time,
            speed_min: wave.map(|w| w.min),
            speed_max: wave.map(|w| w.max),
            speed_avg: wave.map(|w| w.avg),
            speed_std: wave.map(|w| w.std),
            speed_cycle: wave.map(|w| w.cycle),
        }
    }

    pub const HEADER: [&'static str; 11] = [
        "expand %",
        "contract %",
        "ratio",
        "period",
        "expand ms",
        "contract ms",
        "speed min",
        "speed max",
        "speed avg",
        "speed std",
        "speed cycle",
    ];

    /// The row as printable cells.
    pub fn cells(&self) -> Vec<String> {
        let speed = |v: Option<f64>| v.map_or("-".to_string(), |v| format!("{v:.4}"));
        vec![
            format!("{:.2}", self.expand_pct),
            format!("{:.2}", self.contract_pct),
            format!("{:.2}", self.ratio),
            format!("{:.0}", self.period_ms),
            format!("{:.0}", self.expand_ms),
            format!("{:.0}", self.contract_ms),
            speed(self.speed_min),
            speed(self.speed_max),
            speed(self.speed_avg),
            speed(self.speed_std),
            speed(self.speed_cycle),
        ]
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SurfaceSummary {
    pub surface: SurfaceLabel,
    pub wave: Option<WaveStats>,
    pub wave_error: Option<String>,
    pub flat_stations: usize,
    pub mean_p75_fraction: Option<f64>,
    pub mean_sigma_fraction: Option<f64>,
    pub flagged_bands: usize,
    pub contour_pairs_checked: usize,
    pub contour_violations: usize,
    pub self_touching_contours: usize,
    pub constant_curvature_pixels: usize,
    pub flagged_strain_cells: usize,
    pub shape_groups: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipSummary {
    pub end: crate::temporal::ClipEnd,
    pub reference_frame: usize,
    pub target_volume: f64,
    pub volume_spread: f64,
    pub min_kept_fraction: f64,
    pub scanned_frames: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Summary {
    pub subject: String,
    pub cohort: Cohort,
    pub frames: usize,
    pub period_s: f64,
    pub grid: [usize; 2],
    pub surfaces: Vec<SurfaceLabel>,
    pub eulerian_only: bool,
    pub min_volume_frame: usize,
    pub max_volume_frame: usize,
    pub table1: Table1Row,
    pub clip: Option<ClipSummary>,
    pub quality: Quality,
    pub per_surface: Vec<SurfaceSummary>,
    pub gray_cells: usize,
}

impl Analysis {
    pub fn surface(&self, label: SurfaceLabel) -> Option<&SurfaceAnalysis> {
        self.surfaces.iter().find(|s| s.surface == label)
    }

    pub fn summary(&self, gray_cells: usize) -> Summary {
        let outer_wave = self.surface(SurfaceLabel::Outer).and_then(|s| s.wave.as_ref().ok());
        let mean = |v: Vec<f64>| if v.is_empty() { None } else { Some(v.iter().sum::<f64>() / v.len() as f64) };
        Summary {
            subject: self.subject.name.clone(),
            cohort: self.subject.cohort,
            frames: self.frames,
            period_s: self.subject.period,
            grid: [self.config.grid_n, self.config.grid_m],
            surfaces: self.surfaces.iter().map(|s| s.surface).collect(),
            eulerian_only: self.clip.is_none(),
            min_volume_frame: self.phase_map.min_index,
            max_volume_frame: self.phase_map.max_index,
            table1: Table1Row::new(&self.phases, outer_wave),
            clip: self.clip.as_ref().map(|c| ClipSummary {
                end: c.end,
                reference_frame: c.reference_frame,
                target_volume: c.target_volume,
                volume_spread: c.volume_spread(),
                min_kept_fraction: c.v_c.iter().copied().fold(1.0, f64::min),
                scanned_frames: c.scanned_frames.len(),
            }),
            quality: self.quality.clone(),
            per_surface: self
                .surfaces
                .iter()
                .map(|s| SurfaceSummary {
                    surface: s.surface,
                    wave: s.wave.as_ref().ok().copied(),
                    wave_error: s.wave.as_ref().err().cloned(),
                    flat_stations: s.peaks.iter().filter(|p| p.is_none()).count(),
                    mean_p75_fraction: mean(s.bands.iter().flatten().map(|b| b.p75_fraction).collect()),
                    mean_sigma_fraction: mean(s.bands.iter().flatten().filter_map(|b| b.sigma_fraction).collect()),
                    flagged_bands: s.bands.iter().flatten().filter(|b| b.flagged).count(),
                    contour_pairs_checked: s.nonintersection.pairs_checked,
                    contour_violations: s.nonintersection.violations.len(),
                    self_touching_contours: s.self_touching,
                    constant_curvature_pixels: s.radial_curvature.constant.iter().filter(|&&c| c).count(),
                    flagged_strain_cells: s
                        .strain
                        .as_ref()
                        .map_or(0, |f| f.first().map_or(0, |f| f.flagged.iter().filter(|&&x| x).count())),
                    shape_groups: s.modes.len(),
                })
                .collect(),
            gray_cells,
        }
    }
}

#[derive(Serialize)]
struct VolumeRow {
    frame: usize,
    cycle_frame: usize,
    time_s: f64,
    phase: &'static str,
    outer_mm3: f64,
    inner_mm3: Option<f64>,
    lumen_mm3: Option<f64>,
}

#[derive(Serialize)]
struct ClipRow {
    frame: usize,
    kept_fraction: f64,
    trim_percent: f64,
    layer_volume_before_mm3: f64,
    layer_volume_after_mm3: f64,
}

#[derive(Serialize)]
struct AreaRow {
    station: usize,
    depth_mm: f64,
    frame: usize,
    time_s: f64,
    area_mm2: f64,
}

#[derive(Serialize)]
struct StationRow {
    station: usize,
    depth_mm: f64,
    peak_frame: Option<f64>,
    peak_time_s: Option<f64>,
    p75_start_frame: Option<f64>,
    p75_end_frame: Option<f64>,
    p75_fraction: Option<f64>,
    sigma_frames: Option<f64>,
    sigma_fraction: Option<f64>,
    fit_converged: bool,
    flagged: bool,
}

#[derive(Serialize)]
struct SpeedRow {
    index: usize,
    speed_mm_s: f64,
}

#[derive(Serialize)]
struct StrainRow {
    frame: usize,
    mean_energy: f64,
    max_energy: f64,
    flagged_cells: usize,
}

#[derive(Serialize)]
struct ModeRow {
    station: usize,
    phase: &'static str,
    contours: usize,
    mode: usize,
    variance: f64,
    share: f64,
    sample: usize,
    mean_x: f64,
    mean_y: f64,
    dx: f64,
    dy: f64,
    magnitude: f64,
}

const MODE_HEADER: &[&str] =
    &["station", "phase", "contours", "mode", "variance", "share", "sample", "mean_x", "mean_y", "dx", "dy", "magnitude"];
const SPEED_HEADER: &[&str] = &["index", "speed_mm_s"];
const VIOLATION_HEADER: &[&str] = &["frame", "station", "kind", "points", "depth"];

/// Writes tables, images and `summary.json`; returns the summary.
pub fn write_outputs(analysis: &Analysis, out: &Path) -> Result<Summary> {
    let config = &analysis.config;
    let t = analysis.frames;
    let dt = analysis.subject.period / t as f64;
    let map = &analysis.phase_map;
    let stage = |e: Error| e.in_stage("export", out.display().to_string());
    let mut gray = 0;

    let volume_of = |label: SurfaceLabel, k: usize| analysis.volumes.iter().find(|v| v.0 == label).map(|v| v.1[k]);
    let rows: Vec<VolumeRow> = (0..t)
        .map(|k| VolumeRow {
            frame: k,
            cycle_frame: map.aligned_index(k),
            time_s: k as f64 * dt,
            phase: shape::phase_of(map, k).name(),
            outer_mm3: volume_of(SurfaceLabel::Outer, k).unwrap_or(f64::NAN),
            inner_mm3: volume_of(SurfaceLabel::Inner, k),
            lumen_mm3: volume_of(SurfaceLabel::Lumen, k),
        })
        .collect();
    io::write_csv(&out.join("volumes.csv"), &rows).map_err(stage)?;
    if let Some(clip) = &analysis.clip {
        let rows: Vec<ClipRow> = (0..t)
            .map(|k| ClipRow {
                frame: k,
                kept_fraction: clip.v_c[k],
                trim_percent: 100.0 * (1.0 - clip.v_c[k]),
                layer_volume_before_mm3: clip.original_volumes[k],
                layer_volume_after_mm3: clip.volumes[k],
            })
            .collect();
        io::write_csv(&out.join("clip.csv"), &rows).map_err(stage)?;
    }

    for s in &analysis.surfaces {
        let dir = out.join(s.surface.name());
        let img = &s.areas;
        let (m, tf) = (img.stations, img.frames);
        let rows: Vec<AreaRow> = (0..m)
            .flat_map(|j| (0..tf).map(move |k| (j, k)))
            .map(|(j, k)| AreaRow { station: j, depth_mm: img.depth[j], frame: k, time_s: k as f64 * img.dt, area_mm2: img.get(j, k) })
            .collect();
        io::write_csv(&dir.join("area.csv"), &rows).map_err(stage)?;
        gray += io::render_matrix(&dir.join("area.png"), &img.data, m, tf, io::finite_range(&img.data), config.magnify, io::area_color)
            .map_err(stage)?;
        let g = &s.gradient;
        io::write_png(&dir.join("gradient.png"), m, tf, config.magnify, |r, c| {
            let i = r * tf + c;
            io::gradient_color(g.angle[i], g.magnitude[i])
        })
        .map_err(stage)?;

        let rows: Vec<StationRow> = (0..m)
            .map(|j| {
                let band = s.bands[j].as_ref();
                StationRow {
                    station: j,
                    depth_mm: img.depth[j],
                    peak_frame: s.peaks[j],
                    peak_time_s: s.peaks[j].map(|p| p * img.dt),
                    p75_start_frame: band.filter(|_| config.threshold.p75()).map(|b| b.p75_band.start),
                    p75_end_frame: band.filter(|_| config.threshold.p75()).map(|b| b.p75_band.end),
                    p75_fraction: band.filter(|_| config.threshold.p75()).map(|b| b.p75_fraction),
                    sigma_frames: band.filter(|_| config.threshold.gauss()).and_then(|b| b.fit.map(|f| f.sigma)),
                    sigma_fraction: band.filter(|_| config.threshold.gauss()).and_then(|b| b.sigma_fraction),
                    fit_converged: band.is_some_and(|b| b.fit.is_some()),
                    flagged: band.is_none_or(|b| b.flagged),
                }
            })
            .collect();
        io::write_csv(&dir.join("stations.csv"), &rows).map_err(stage)?;
        let rows: Vec<SpeedRow> = s.local_speeds.iter().enumerate().map(|(index, &speed_mm_s)| SpeedRow { index, speed_mm_s }).collect();
        io::write_csv_or_header(&dir.join("wave_speeds.csv"), SPEED_HEADER, &rows).map_err(stage)?;
        io::write_csv_or_header(&dir.join("nonintersection.csv"), VIOLATION_HEADER, &s.nonintersection.violations).map_err(stage)?;
        io::write_csv(&dir.join("curvature.csv"), &s.curvature_rows).map_err(stage)?;

        if let Some(fields) = &s.strain {
            let rows: Vec<StrainRow> = fields
                .iter()
                .enumerate()
                .map(|(k, f)| StrainRow {
                    frame: k,
                    mean_energy: f.energy.iter().sum::<f64>() / f.energy.len().max(1) as f64,
                    max_energy: f.energy.iter().copied().fold(0.0, f64::max),
                    flagged_cells: f.flagged.iter().filter(|&&x| x).count(),
                })
                .collect();
            io::write_csv(&dir.join("strain.csv"), &rows).map_err(stage)?;
        }

        let mut rows = Vec::new();
        for group in &s.modes {
            for (q, mode) in group.modes.iter().enumerate() {
                for (k, (d, mean)) in mode.displacement.iter().zip(&group.mean).enumerate() {
                    rows.push(ModeRow {
                        station: group.station.unwrap_or(0),
                        phase: group.phase.map_or("all", |p| p.name()),
                        contours: group.count,
                        mode: q + 1,
                        variance: mode.variance,
                        share: mode.share,
                        sample: k,
                        mean_x: mean.x,
                        mean_y: mean.y,
                        dx: d.x,
                        dy: d.y,
                        magnitude: d.coords.norm(),
                    });
                }
            }
        }
        io::write_csv_or_header(&dir.join("shape_modes.csv"), MODE_HEADER, &rows).map_err(stage)?;

        if config.frame_images {
            let frames_dir = dir.join("frames");
            let n = config.grid_n;
            let stacks = [("mean_curvature", &s.mean_curvature), ("radial_curvature", &s.radial_curvature)];
            for (name, stack) in stacks {
                for (k, values) in stack.frames.iter().enumerate() {
                    gray += io::render_matrix(
                        &frames_dir.join(format!("{name}_{k:03}.png")),
                        values,
                        stack.m,
                        n,
                        (0.0, 1.0),
                        config.magnify,
                        io::area_color,
                    )
                    .map_err(stage)?;
                }
            }
            if let Some(fields) = &s.strain {
                for per_frame in [false, true] {
                    let scaled = shape::normalize_energy(fields, per_frame);
                    let name = if per_frame { "strain_frame" } else { "strain_sequence" };
                    for (k, values) in scaled.iter().enumerate() {
                        gray += io::render_matrix(
                            &frames_dir.join(format!("{name}_{k:03}.png")),
                            values,
                            fields[k].m,
                            fields[k].n,
                            (0.0, 1.0),
                            config.magnify,
                            io::area_color,
                        )
                        .map_err(stage)?;
                    }
                }
            }
        }
    }
    if gray > 0 {
        warn!("{gray} image cells were undefined and drawn gray");
    }
    let summary = analysis.summary(gray);
    io::write_csv(&out.join("table1.csv"), &[summary.table1]).map_err(stage)?;
    io::write_json(&out.join("summary.json"), &summary).map_err(stage)?;
    Ok(summary)
}

/// Loads a manifest, runs every stage and writes the outputs.
pub fn run_pipeline(manifest: &Path, config: &Config, out: &Path) -> Result<Summary> {
    let mut clock = std::time::Instant::now();
    let m = DatasetManifest::load(manifest).map_err(|e| e.in_stage("ingest", manifest.display().to_string()))?;
    let mut data = io::ingest(&m, &config.surfaces).map_err(|e| e.in_stage("ingest", manifest.display().to_string()))?;
    lap(&mut clock, "ingest");
    validate_dataset(&mut data)?;
    lap(&mut clock, "validate");
    let analysis = analyze(&data, &Subject::from_manifest(&m), config)?;
    lap(&mut clock, "analyze");
    let summary = write_outputs(&analysis, out)?;
    lap(&mut clock, "export");
    Ok(summary)
}

/// Writes a synthetic dataset: one OBJ per surface and frame, the manifest
/// and the analytic oracle record. Returns the manifest path.
pub fn write_synthetic(spec: &TubeSpec, subject: &str, out: &Path) -> Result<(PathBuf, GeneratedSequence)> {
    let seq = synth::generate_sequence(spec)?;
    let mut files = io::SurfaceFiles::default();
    for label in SurfaceLabel::ALL {
        let list: Vec<PathBuf> = (0..spec.frames).map(|k| PathBuf::from(format!("meshes/{}_{k:03}.obj", label.name()))).collect();
        seq.surface(label).par_iter().zip(&list).try_for_each(|(mesh, rel)| io::write_mesh(&out.join(rel), mesh))?;
        match label {
            SurfaceLabel::Outer => files.outer = list,
            SurfaceLabel::Inner => files.inner = list,
            SurfaceLabel::Lumen => files.lumen = list,
        }
    }
    let manifest = DatasetManifest {
        subject: subject.to_string(),
        cohort: if spec.band.is_some() { Cohort::Banded } else { Cohort::Normal },
        period: spec.period,
        units: io::Units::Millimetre,
        surfaces: files,
    };
    let path = out.join("manifest.toml");
    manifest.save(&path)?;
    io::write_json(&out.join("oracle.json"), &seq.oracle)?;
    io::write_json(&out.join("spec.json"), spec)?;
    Ok((path, seq))
}

/// Dataset straight from a generated sequence, without files.
pub fn dataset_from(seq: &GeneratedSequence) -> Dataset {
    Dataset { outer: seq.outer.clone(), inner: seq.inner.clone(), lumen: seq.lumen.clone() }
}
