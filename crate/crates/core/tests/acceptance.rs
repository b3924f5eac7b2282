//! Acceptance criteria, one line each. Runs as a plain binary so the lines
//! always reach the test log.

use std::collections::BTreeMap;
use std::f64::consts::PI;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use nalgebra::{Rotation3, Vector3};
use tubekin::geom::{P2, P3};
use tubekin::io::Config;
use tubekin::kinematics::{expansion_band, fit_gaussian, row_peak};
use tubekin::mesh::InletRule;
use tubekin::parameterize::{GridMesh, SurfaceLabel};
use tubekin::pipeline::{self, dataset_from, parameterize_dataset};
use tubekin::sections::{centerline_planes, extract_contours, resample_closed, section_planes, validate_nonintersection};
use tubekin::shape::{contour_curvature, contour_pca, mean_curvature, radial_curvature_image, strain_energy};
use tubekin::synth::{self, Bend, Bump, Profile, TubeSpec};
use tubekin::temporal::{clip_to_constant_volume, ClipOptions};

/// Outcome of one criterion: pass flag and the measured values.
type Outcome = (bool, String);

fn lattice(n: usize, m: usize, f: impl Fn(f64, f64) -> P3) -> GridMesh {
    let points = (0..m).flat_map(|j| (0..n).map(move |i| (i, j))).map(|(i, j)| f(i as f64 / n as f64, j as f64 / (m - 1) as f64)).collect();
    GridMesh { n, m, points, frame_index: 0, surface: SurfaceLabel::Outer }
}

fn circle(r: f64, samples: usize) -> Vec<P2> {
    (0..samples).map(|k| 2.0 * PI * k as f64 / samples as f64).map(|a| P2::new(r * a.cos(), r * a.sin())).collect()
}

fn outer_only() -> Config {
    Config { surfaces: vec![SurfaceLabel::Outer], frame_images: false, ..Config::default() }
}

fn files(dir: &Path) -> BTreeMap<PathBuf, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![dir.to_path_buf()];
    while let Some(d) = stack.pop() {
        for entry in std::fs::read_dir(&d).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                out.insert(path.strip_prefix(dir).unwrap().to_path_buf(), std::fs::read(&path).unwrap());
            }
        }
    }
    out
}

struct FullRun {
    _dir: tempfile::TempDir,
    manifest: PathBuf,
    first: PathBuf,
    seconds: f64,
    summary: pipeline::Summary,
}

fn full_run() -> FullRun {
    let dir = tempfile::tempdir().unwrap();
    let (manifest, _) = pipeline::write_synthetic(&TubeSpec::default(), "synthetic", &dir.path().join("data")).unwrap();
    let first = dir.path().join("run1");
    let start = Instant::now();
    let summary = pipeline::run_pipeline(&manifest, &Config::default(), &first).unwrap();
    FullRun { seconds: start.elapsed().as_secs_f64(), _dir: dir, manifest, first, summary }
}

fn wave_speed(run: &FullRun) -> Outcome {
    let row = &run.summary.table1;
    let (avg, std) = (row.speed_avg.unwrap(), row.speed_std.unwrap());
    let err = (avg / 8.0 - 1.0).abs();
    (
        err < 0.05 && std < 0.1 * avg && run.seconds < 60.0,
        format!(
            "avg {avg:.4} mm/s (err {:.2}% < 5%), std {std:.4} ({:.1}% of avg < 10%), runtime {:.1} s < 60 s",
            100.0 * err,
            100.0 * std / avg,
            run.seconds
        ),
    )
}

fn table_format(run: &FullRun) -> Outcome {
    let text = std::fs::read_to_string(run.first.join("summary.json")).unwrap();
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    let keys: Vec<String> = value["table1"].as_object().unwrap().keys().cloned().collect();
    let mut expected = vec![
        "expand_pct",
        "contract_pct",
        "ratio",
        "period_ms",
        "expand_ms",
        "contract_ms",
        "speed_min",
        "speed_max",
        "speed_avg",
        "speed_std",
        "speed_cycle",
    ];
    expected.sort();
    let mut got: Vec<&str> = keys.iter().map(String::as_str).collect();
    got.sort();
    let fields_ok = got == expected;

    // Synchronous sinusoidal pulse: the volume curve is symmetric.
    let spec = TubeSpec { profile: Profile::Sinusoid, wave_speed: f64::INFINITY, frames: 200, ..TubeSpec::default() };
    let seq = synth::generate_sequence(&spec).unwrap();
    let subject = pipeline::Subject { name: "sinusoid".into(), cohort: tubekin::io::Cohort::Normal, period: spec.period };
    let analysis = pipeline::analyze(&dataset_from(&seq), &subject, &outer_only()).unwrap();
    let row = pipeline::Table1Row::new(&analysis.phases, None);
    let ok = fields_ok && (row.expand_pct - 50.0).abs() < 0.5 && (row.contract_pct - 50.0).abs() < 0.5 && (row.ratio - 1.0).abs() <= 0.01;
    (
        ok,
        format!(
            "table1 has exactly the 11 fields: {fields_ok}; sinusoid {:.2}%/{:.2}%, ratio {:.4} (1.00 ± 0.01)",
            row.expand_pct, row.contract_pct, row.ratio
        ),
    )
}

fn clip() -> Outcome {
    // Pure longitudinal change: the wave is switched off so the 20% comes from the stretch alone.
    let spec = TubeSpec { stretch: 0.2, depth: 0.0, frames: 40, ..TubeSpec::default() };
    let seq = synth::generate_sequence(&spec).unwrap();
    let config = Config { surfaces: vec![SurfaceLabel::Outer, SurfaceLabel::Inner], ..Config::default() };
    let grids = parameterize_dataset(&dataset_from(&seq), &config).unwrap();
    let result = clip_to_constant_volume(&grids.outer, grids.inner.as_ref().unwrap(), &ClipOptions::default()).unwrap();
    let before = &result.original_volumes;
    let lo = before.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = before.iter().copied().fold(0.0, f64::max);
    let min_frame = before.iter().enumerate().min_by(|a, b| a.1.total_cmp(b.1)).unwrap().0;
    let spread = result.volume_spread();
    let vc_ref = result.v_c[min_frame];
    (
        spread < 0.002 && vc_ref == 1.0 && result.reference_frame == min_frame,
        format!(
            "layer volume variation {:.1}% before, spread {:.4}% after (< 0.2%), v_c = {vc_ref} at min-volume frame {min_frame}",
            100.0 * (hi - lo) / lo,
            100.0 * spread
        ),
    )
}

fn parameterization() -> Outcome {
    let straight = TubeSpec { frames: 12, ..TubeSpec::default() };
    // Straight tubes are gated. Bends and flattened sections are measured
    // and printed only: an area-preserving map spaces rows unevenly there.
    let tubes = [
        ("pulsing taper", straight.clone(), true),
        ("static taper", TubeSpec { depth: 0.0, frames: 8, ..straight.clone() }, true),
        ("static cylinder", TubeSpec { depth: 0.0, frames: 8, outlet_radius: 0.49, wall_outlet: 0.08, ..straight.clone() }, true),
        ("ellipse 1.4:1", TubeSpec { section: synth::Section::Ellipse { a: 1.2, b: 0.85 }, ..straight.clone() }, false),
        ("bend pi/8", TubeSpec { bend: Some(Bend { angle: PI / 8.0, inner_wall_fixed: false }), ..straight.clone() }, false),
    ];
    let mut ok = true;
    let mut parts = Vec::new();
    for (name, spec, gated) in tubes {
        let seq = synth::generate_sequence(&spec).unwrap();
        let grids = parameterize_dataset(&dataset_from(&seq), &outer_only()).unwrap();
        let q = grids.quality;
        let pass = q.spacing_cv_rows < 0.10 && q.spacing_cv_columns < 0.10 && q.flipped_triangles == 0 && q.seam_hausdorff_edges < 1.0;
        if gated {
            ok &= pass;
        }
        parts.push(format!(
            "{name}{}: cv rows {:.3} cols {:.3}, flips {}, seam {:.3} edges",
            if gated { "" } else { " (info)" },
            q.spacing_cv_rows,
            q.spacing_cv_columns,
            q.flipped_triangles,
            q.seam_hausdorff_edges
        ));
    }
    (ok, format!("{} (limits 0.10, 0, 1.0)", parts.join("; ")))
}

fn nonintersection() -> Outcome {
    let spec = TubeSpec {
        inlet_radius: 0.3,
        outlet_radius: 0.3,
        wall_inlet: 0.05,
        wall_outlet: 0.05,
        length: 0.5 * PI,
        bend: Some(Bend { angle: PI, inner_wall_fixed: true }),
        bulge: Some(Bump { position: 0.5, amplitude: 1.0, width: 0.16 }),
        depth: 0.0,
        frames: 8,
        around: 120,
        along: 90,
        ..TubeSpec::default()
    };
    let seq = synth::generate_sequence(&spec).unwrap();
    // Both ends have the same radius, so name the inlet by position.
    let ring = &seq.outer[0].vertices[..spec.around];
    let c = ring.iter().fold(Vector3::zeros(), |acc, p| acc + p.coords) / spec.around as f64;
    let config = Config { inlet: InletRule::Nearest([c.x, c.y, c.z]), ..outer_only() };
    let grids = parameterize_dataset(&dataset_from(&seq), &config).unwrap();
    let (mut grid_violations, mut control_violations) = (0, 0);
    for (mesh, grid) in seq.outer.iter().zip(&grids.outer) {
        let tol = 1e-9 * mesh.bounding_diagonal();
        let planes = section_planes(grid).unwrap();
        let contours = extract_contours(mesh, &planes, SurfaceLabel::Outer, 100).unwrap();
        grid_violations += validate_nonintersection(&contours, tol).violations.len();
        // The generator's material rows are true cross-sections, so their
        // centroids trace the centreline.
        let material =
            GridMesh { n: spec.around, m: spec.along, points: mesh.vertices.clone(), frame_index: 0, surface: SurfaceLabel::Outer };
        let control = centerline_planes(&material).unwrap();
        let contours = extract_contours(mesh, &control, SurfaceLabel::Outer, 100).unwrap();
        control_violations += validate_nonintersection(&contours, tol).violations.len();
    }
    (
        grid_violations == 0 && control_violations >= 1,
        format!("grid planes {grid_violations} violations (need 0), centreline planes {control_violations} (need >= 1)"),
    )
}

fn curvature() -> Outcome {
    let r = 1.5;
    let sphere = lattice(96, 60, |u, v| {
        let (th, lat) = (2.0 * PI * u, -1.0 + 2.0 * v);
        P3::new(r * lat.cos() * th.cos(), r * lat.cos() * th.sin(), r * lat.sin())
    });
    let img = mean_curvature(&sphere);
    let interior = |img: &tubekin::shape::CurvatureImage, target: f64| {
        (1..img.m - 1).flat_map(|j| (0..img.n).map(move |i| (i, j))).map(|(i, j)| (img.get(i, j) / target - 1.0).abs()).fold(0.0, f64::max)
    };
    let sphere_err = interior(&img, 1.0 / r);
    let rc = 0.4;
    let cylinder = lattice(80, 50, |u, v| {
        let th = 2.0 * PI * u;
        P3::new(rc * th.cos(), rc * th.sin(), 3.0 * v)
    });
    let cyl_err = interior(&mean_curvature(&cylinder), 1.0 / (2.0 * rc));

    let dense: Vec<P2> = (0..20000).map(|k| 2.0 * PI * k as f64 / 20000.0).map(|t| P2::new(2.0 * t.cos(), t.sin())).collect();
    let k = contour_curvature(&resample_closed(&dense, 100), 1);
    let (lo, hi) = k.iter().fold((f64::INFINITY, 0.0f64), |(lo, hi), &v| (lo.min(v), hi.max(v)));
    let ratio = hi / lo;

    let (n, m) = (80, 40);
    let rad = |v: f64| 0.5 - 0.25 * v;
    let straight = lattice(n, m, |u, v| {
        let th = 2.0 * PI * u;
        P3::new(rad(v) * th.cos(), rad(v) * th.sin(), 3.0 * v)
    });
    let rb = 3.0 / PI;
    let bent = lattice(n, m, |u, v| {
        let (th, phi) = (2.0 * PI * u, PI * v);
        let rho = rb + rad(v) * th.cos();
        P3::new(rho * phi.cos(), rad(v) * th.sin(), rho * phi.sin())
    });
    let radial = |g: &GridMesh| {
        let contours = extract_contours(&g.to_mesh(), &section_planes(g).unwrap(), SurfaceLabel::Outer, 100).unwrap();
        radial_curvature_image(g, &contours, 1)
    };
    let (a, b) = (radial(&straight), radial(&bent));
    let bend_diff = a.values.iter().zip(&b.values).map(|(x, y)| (x - y).abs() / x.abs()).fold(0.0, f64::max);
    (
        sphere_err < 0.02 && cyl_err < 0.02 && (ratio / 8.0 - 1.0).abs() < 0.05 && bend_diff < 0.01,
        format!(
            "sphere H err {:.3}%, cylinder H err {:.3}% (< 2%); ellipse ratio {ratio:.3} (8 ± 5%); bent vs straight {:.3}% (< 1%)",
            100.0 * sphere_err,
            100.0 * cyl_err,
            100.0 * bend_diff
        ),
    )
}

fn strain() -> Outcome {
    let reference = lattice(40, 20, |u, v| {
        let (th, r) = (2.0 * PI * u, 0.5 - 0.2 * v);
        P3::new(r * th.cos(), r * th.sin(), 2.0 * v)
    });
    let identity = strain_energy(&reference, &reference).unwrap().energy.iter().copied().fold(0.0, f64::max);
    let scaled = GridMesh { points: reference.points.iter().map(|p| P3::from(p.coords * 1.2)).collect(), ..reference.clone() };
    let s = strain_energy(&scaled, &reference).unwrap();
    let scale_err = s.energy.iter().map(|e| (e - 0.08).abs()).fold(0.0, f64::max);
    let rot = Rotation3::from_axis_angle(&Vector3::y_axis(), 0.7) * Rotation3::from_axis_angle(&Vector3::x_axis(), -1.1);
    let moved = GridMesh { points: scaled.points.iter().map(|p| rot * p + Vector3::new(3.0, -1.0, 0.5)).collect(), ..scaled.clone() };
    let t = strain_energy(&moved, &reference).unwrap();
    let drift = s.energy.iter().zip(&t.energy).map(|(a, b)| (a - b).abs()).fold(0.0, f64::max);
    (
        identity < 1e-12 && scale_err < 1e-6 && drift < 1e-9,
        format!(
            "identity max E {identity:.1e} (< 1e-12); scale 1.2 max |E - 0.08| {scale_err:.1e} (< 1e-6); rigid drift {drift:.1e} (< 1e-9)"
        ),
    )
}

fn pca() -> Outcome {
    let family: Vec<Vec<P2>> = (0..9)
        .map(|k| {
            let shift = nalgebra::Vector2::new(0.1 * k as f64, -0.05 * k as f64);
            circle(0.8 + 0.05 * k as f64, 100).iter().map(|p| p + shift).collect()
        })
        .collect();
    let modes = contour_pca(&family, 3).unwrap();
    let first = &modes.modes[0];
    let worst = first
        .directions()
        .iter()
        .zip(&modes.mean)
        .map(|((dir, _), mean)| dir.coords.dot(&mean.coords.normalize()).clamp(-1.0, 1.0).acos().to_degrees())
        .fold(0.0, f64::max);
    // Orthonormality on a family with several modes.
    let rich: Vec<Vec<P2>> = (0..7)
        .map(|k| {
            let x = k as f64;
            (0..40)
                .map(|s| {
                    let t = 2.0 * PI * s as f64 / 40.0;
                    let r = 1.0 + 0.1 * (x * 0.7).sin() * (2.0 * t).cos() + 0.05 * (x * 1.3).cos() * (3.0 * t).sin();
                    P2::new(r * t.cos(), r * t.sin())
                })
                .collect()
        })
        .collect();
    let many = contour_pca(&rich, 6).unwrap();
    let mut ortho = 0.0f64;
    for (p, a) in many.modes.iter().enumerate() {
        for (q, b) in many.modes.iter().enumerate() {
            let dot: f64 = a.vector.iter().zip(&b.vector).map(|(x, y)| x * y).sum();
            ortho = ortho.max((dot - if p == q { 1.0 } else { 0.0 }).abs());
        }
    }
    (
        first.share > 0.99 && worst < 2.0 && ortho < 1e-9,
        format!(
            "mode 1 share {:.4}% (> 99%), worst angle to radial {worst:.3} deg (< 2); orthonormality error {ortho:.1e} over {} modes (< 1e-9)",
            100.0 * first.share,
            many.modes.len()
        ),
    )
}

fn expansion_bands() -> Outcome {
    let (t, sigma, mu) = (195usize, 20.0, 97.0);
    let row: Vec<f64> = (0..t).map(|k| 1.0 + 2.0 * (-0.5 * ((k as f64 - mu) / sigma).powi(2)).exp()).collect();
    let fit = fit_gaussian(&row, mu);
    let sigma_err = (fit.sigma / sigma - 1.0).abs();
    let (frames, base) = (200usize, 80.0);
    let triangle: Vec<f64> = (0..frames).map(|k| 0.5 + 0.5 * (1.0 - 2.0 * (k as f64 - 100.0).abs() / base).max(0.0)).collect();
    let band = expansion_band(&triangle, 0, row_peak(&triangle).unwrap());
    let width = band.p75_band.duration();
    (
        sigma_err < 0.02 && (width - base / 2.0).abs() <= 1.0,
        format!(
            "fitted sigma {:.4} vs 20 ({:.3}% < 2%); triangle 75% band {width:.2} frames vs {} ± 1",
            fit.sigma,
            100.0 * sigma_err,
            base / 2.0
        ),
    )
}

fn determinism(run: &FullRun) -> Outcome {
    let second = run.first.parent().unwrap().join("run2");
    pipeline::run_pipeline(&run.manifest, &Config::default(), &second).unwrap();
    let (a, b) = (files(&run.first), files(&second));
    let differing: Vec<_> = a.iter().filter(|(k, v)| b.get(*k) != Some(v)).map(|(k, _)| k.display().to_string()).collect();
    let same_set = a.len() == b.len();
    (
        same_set && differing.is_empty(),
        format!("{} files compared, {} differ{}", a.len(), differing.len(), if same_set { "" } else { ", file sets differ" }),
    )
}

fn main() -> ExitCode {
    let mut failed = 0;
    let mut report = |name: &str, outcome: std::thread::Result<Outcome>| {
        let (pass, detail) = outcome.unwrap_or_else(|e| {
            let msg = e.downcast_ref::<String>().cloned().or_else(|| e.downcast_ref::<&str>().map(|s| s.to_string()));
            (false, format!("panicked: {}", msg.unwrap_or_default()))
        });
        if !pass {
            failed += 1;
        }
        println!("{} {name}: {detail}", if pass { "PASS" } else { "FAIL" });
    };
    let run = catch_unwind(full_run);
    match &run {
        Ok(run) => {
            report("wave speed recovery", catch_unwind(AssertUnwindSafe(|| wave_speed(run))));
            report("summary table format and sinusoid split", catch_unwind(AssertUnwindSafe(|| table_format(run))));
        }
        Err(_) => {
            report("wave speed recovery", Ok((false, "full pipeline run failed".into())));
            report("summary table format and sinusoid split", Ok((false, "full pipeline run failed".into())));
        }
    }
    report("volume-preserving clip", catch_unwind(clip));
    report("parameterization quality", catch_unwind(parameterization));
    report("section non-intersection", catch_unwind(nonintersection));
    report("curvature oracles", catch_unwind(curvature));
    report("strain oracle", catch_unwind(strain));
    report("contour PCA oracle", catch_unwind(pca));
    report("expansion band oracle", catch_unwind(expansion_bands));
    match &run {
        Ok(run) => report("determinism", catch_unwind(AssertUnwindSafe(|| determinism(run)))),
        Err(_) => report("determinism", Ok((false, "full pipeline run failed".into()))),
    }
    println!("{} of 10 criteria passed", 10 - failed);
    if failed == 0 {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
