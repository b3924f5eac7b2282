use std::path::Path;

use tubekin::io::{self, Config, DatasetManifest};
use tubekin::parameterize::SurfaceLabel;
use tubekin::pipeline::{self, dataset_from, Subject};
use tubekin::synth::{self, TubeSpec};
use tubekin::Error;

fn small() -> TubeSpec {
    TubeSpec { frames: 16, around: 48, along: 30, ..TubeSpec::default() }
}

fn small_config() -> Config {
    Config { grid_n: 40, grid_m: 25, frame_images: false, ..Config::default() }
}

#[test]
fn synthetic_dataset_round_trips_bit_for_bit() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest_path, seq) = pipeline::write_synthetic(&small(), "roundtrip", dir.path()).unwrap();
    let manifest = DatasetManifest::load(&manifest_path).unwrap();
    let data = io::ingest(&manifest, &SurfaceLabel::ALL).unwrap();
    for label in SurfaceLabel::ALL {
        for (a, b) in data.get(label).iter().zip(seq.surface(label)) {
            assert_eq!(a.triangles, b.triangles);
            for (p, q) in a.vertices.iter().zip(&b.vertices) {
                assert_eq!(p.coords.map(f64::to_bits), q.coords.map(f64::to_bits));
            }
        }
    }
}

#[test]
fn manifest_problems_are_reported_with_context() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest_path, _) = pipeline::write_synthetic(&small(), "broken", dir.path()).unwrap();
    let mut manifest = DatasetManifest::load(&manifest_path).unwrap();
    manifest.surfaces.outer.pop();
    let err = io::ingest(&manifest, &SurfaceLabel::ALL).unwrap_err();
    assert!(err.to_string().contains("15") && err.to_string().contains("16"), "{err}");

    let mut manifest = DatasetManifest::load(&manifest_path).unwrap();
    let gone = manifest.surfaces.inner[3].clone();
    std::fs::remove_file(&gone).unwrap();
    let err = io::ingest(&manifest, &SurfaceLabel::ALL).unwrap_err();
    assert!(err.to_string().contains(&gone.display().to_string()), "{err}");
    // Skipping the inner surface sidesteps the missing file.
    manifest.surfaces.inner.clear();
    assert!(io::ingest(&manifest, &[SurfaceLabel::Outer]).is_ok());
}

#[test]
fn non_tube_frame_halts_in_validation_with_its_frame() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest_path, seq) = pipeline::write_synthetic(&small(), "cap", dir.path()).unwrap();
    // Close the outlet of frame 5 with a fan: one boundary loop left.
    let mut mesh = seq.outer[5].clone();
    let n = 48;
    let last = mesh.vertices.len() - n;
    let centre = mesh.vertices[last..].iter().fold(nalgebra::Vector3::zeros(), |a, p| a + p.coords) / n as f64;
    mesh.vertices.push(centre.into());
    let apex = mesh.vertices.len() - 1;
    for i in 0..n {
        mesh.triangles.push([last + i, last + (i + 1) % n, apex]);
    }
    let manifest = DatasetManifest::load(&manifest_path).unwrap();
    io::write_mesh(&manifest.surfaces.outer[5], &mesh).unwrap();
    let err = pipeline::run_pipeline(&manifest_path, &small_config(), &dir.path().join("out")).unwrap_err();
    match &err {
        Error::Stage { stage, context, .. } => {
            assert_eq!(*stage, "validate");
            assert!(context.contains("outer frame 5"), "{context}");
        }
        other => panic!("unexpected error {other}"),
    }
}

fn listing(dir: &Path) -> Vec<String> {
    let mut names: Vec<String> = std::fs::read_dir(dir).unwrap().map(|e| e.unwrap().file_name().to_string_lossy().into_owned()).collect();
    names.sort();
    names
}

#[test]
fn eulerian_only_and_outer_only_runs() {
    let dir = tempfile::tempdir().unwrap();
    let (manifest_path, _) = pipeline::write_synthetic(&small(), "subsets", &dir.path().join("data")).unwrap();

    let out = dir.path().join("eulerian");
    let config = Config { clip: false, ..small_config() };
    let summary = pipeline::run_pipeline(&manifest_path, &config, &out).unwrap();
    assert!(summary.eulerian_only && summary.clip.is_none());
    assert!(!out.join("clip.csv").exists());
    assert_eq!(listing(&out), ["inner", "lumen", "outer", "summary.json", "table1.csv", "volumes.csv"]);

    let out = dir.path().join("outer");
    let config = Config { surfaces: vec![SurfaceLabel::Outer], ..small_config() };
    let summary = pipeline::run_pipeline(&manifest_path, &config, &out).unwrap();
    assert_eq!(summary.surfaces, [SurfaceLabel::Outer]);
    // Clipping needs the inner wall.
    assert!(summary.eulerian_only);
    assert_eq!(listing(&out), ["outer", "summary.json", "table1.csv", "volumes.csv"]);
    assert_eq!(
        listing(&out.join("outer")),
        [
            "area.csv",
            "area.png",
            "curvature.csv",
            "gradient.png",
            "nonintersection.csv",
            "shape_modes.csv",
            "stations.csv",
            "strain.csv",
            "wave_speeds.csv"
        ]
    );

    let out = dir.path().join("full");
    let summary = pipeline::run_pipeline(&manifest_path, &small_config(), &out).unwrap();
    let clip = summary.clip.expect("clip with inner present");
    assert!(clip.volume_spread < 2e-3);
    let text = std::fs::read_to_string(out.join("clip.csv")).unwrap();
    assert!(text.starts_with("frame,kept_fraction,trim_percent,"));
    assert_eq!(text.lines().count(), 17);
}

#[test]
fn reversed_segment_reports_a_negative_speed() {
    let spec = TubeSpec { reversal: Some((0.4, 0.6)), frames: 60, ..small() };
    let seq = synth::generate_sequence(&spec).unwrap();
    let subject = Subject { name: "reversal".into(), cohort: io::Cohort::Normal, period: spec.period };
    let config = Config { surfaces: vec![SurfaceLabel::Outer], ..small_config() };
    let analysis = pipeline::analyze(&dataset_from(&seq), &subject, &config).unwrap();
    let wave = analysis.surfaces[0].wave.as_ref().unwrap();
    assert!(wave.min < 0.0, "{wave:?}");
    assert!(wave.max > 0.0);
}

#[test]
fn pulse_width_matches_the_analytic_share() {
    let spec = TubeSpec { frames: 60, ..small() };
    let seq = synth::generate_sequence(&spec).unwrap();
    let subject = Subject { name: "band".into(), cohort: io::Cohort::Normal, period: spec.period };
    let config = Config { surfaces: vec![SurfaceLabel::Outer], clip: false, ..small_config() };
    let analysis = pipeline::analyze(&dataset_from(&seq), &subject, &config).unwrap();
    let expected = synth::oracle_p75_fraction(&spec).unwrap();
    let bands: Vec<f64> = analysis.surfaces[0].bands.iter().flatten().map(|b| b.p75_fraction).collect();
    let mean = bands.iter().sum::<f64>() / bands.len() as f64;
    // One frame of sampling either side.
    assert!((mean - expected).abs() <= 2.0 / spec.frames as f64, "{mean} vs {expected}");
}

#[test]
fn grid_volumes_follow_the_oracle() {
    let spec = small();
    let seq = synth::generate_sequence(&spec).unwrap();
    let grids = pipeline::parameterize_dataset(&dataset_from(&seq), &small_config()).unwrap();
    for (k, g) in grids.outer.iter().enumerate() {
        let oracle = synth::oracle_volume(&spec, SurfaceLabel::Outer, spec.time(k));
        assert!((g.enclosed_volume() / oracle - 1.0).abs() < 0.02, "frame {k}: {} vs {oracle}", g.enclosed_volume());
    }
    let inner = grids.inner.as_ref().unwrap();
    for (k, g) in inner.iter().enumerate() {
        let oracle = synth::oracle_volume(&spec, SurfaceLabel::Inner, spec.time(k));
        assert!((g.enclosed_volume() / oracle - 1.0).abs() < 0.02, "frame {k}: {} vs {oracle}", g.enclosed_volume());
    }
}
