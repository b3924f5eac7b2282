use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = r#"
grid_n = 40
grid_m = 25
frame_images = false

[synth]
frames = 12
around = 48
along = 30
"#;

fn tubekin(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_tubekin")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = tubekin(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn synth_then_every_subcommand() {
    let dir = tempfile::tempdir().unwrap();
    let config = dir.path().join("run.toml");
    std::fs::write(&config, CONFIG).unwrap();
    let data = dir.path().join("data");
    ok(&["synth", "--config", s(&config), "--out", s(&data)]);
    let manifest = data.join("manifest.toml");
    assert!(manifest.exists() && data.join("oracle.json").exists());

    let text = ok(&["validate", "--manifest", s(&manifest), "--config", s(&config)]);
    assert!(text.contains("12 frames"), "{text}");

    let grids = dir.path().join("grids");
    ok(&["parameterize", "--manifest", s(&manifest), "--config", s(&config), "--out", s(&grids), "--surfaces", "inner"]);
    assert!(grids.join("grids/outer_011.obj").exists());
    assert!(grids.join("grids/inner_000.obj").exists());
    assert!(!grids.join("grids/lumen_000.obj").exists());
    assert!(grids.join("quality.json").exists());

    let out = dir.path().join("out");
    let table = ok(&[
        "analyze",
        "--manifest",
        s(&manifest),
        "--out",
        s(&out),
        "--grid",
        "40x25",
        "--no-clip",
        "--surfaces",
        "outer",
        "--threshold",
        "p75",
    ]);
    assert!(out.join("summary.json").exists() && out.join("outer/area.csv").exists());
    assert!(!out.join("clip.csv").exists());
    let report = ok(&["report", "--out", s(&out)]);
    assert_eq!(table, report);
    assert_eq!(report.lines().count(), 2);
}

#[test]
fn bad_arguments_fail_cleanly() {
    let dir = tempfile::tempdir().unwrap();
    let out = tubekin(&["analyze", "--manifest", "nowhere.toml", "--grid", "80by50", "--out", s(dir.path())]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error:"));

    let out = tubekin(&["validate", "--manifest", s(&dir.path().join("missing.toml"))]);
    assert!(!out.status.success());
    assert!(String::from_utf8_lossy(&out.stderr).contains("missing.toml"));

    let out = tubekin(&["analyze", "--surfaces", "skin"]);
    assert!(!out.status.success());
}
