use std::path::Path;
use std::process::{Command, Output};

fn serialreg(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_serialreg"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn code(out: &Output) -> i32 {
    out.status.code().expect("exited normally")
}

fn synth(dir: &Path, slices: usize) {
    let out = serialreg(&[
        "synth",
        "--out",
        dir.to_str().unwrap(),
        "--num-slices",
        &slices.to_string(),
        "--width",
        "128",
        "--height",
        "128",
        "--landmark-grid",
        "5",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn synth_register_warp_evaluate_round_trip() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3);
    for k in 0..3 {
        assert!(data.join(format!("slices/slice_{k:03}.png")).exists());
        assert!(data.join(format!("landmarks/slice_{k:03}.csv")).exists());
    }
    assert!(data.join("truth.json").exists());

    let run = tmp.path().join("run");
    let s = |p: &Path| p.to_str().unwrap().to_string();
    let out = serialreg(&[
        "register-sequence",
        "--out",
        &s(&run),
        "--input-dir",
        &s(&data.join("slices")),
        "--landmarks",
        &s(&data.join("landmarks")),
        "--raw-volume",
        "--spacing",
        "0.5,0.5,4",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(run.join("run.json").exists());
    assert!(run.join("pairs/slice_000__slice_001.transform.json").exists());
    assert!(run.join("metrics.json").exists());
    assert_eq!(std::fs::read(run.join("volume/volume.raw")).unwrap().len(), 128 * 128 * 3);
    let manifest = std::fs::read_to_string(run.join("volume/manifest.json")).unwrap();
    assert!(manifest.contains("\"spacing-unit\""));
    assert!(manifest.contains("\"0.5,0.5,4\""));
    assert!(!manifest.contains("workers"));

    let metrics_dir = tmp.path().join("metrics");
    let out = serialreg(&[
        "evaluate",
        "--run",
        &s(&run),
        "--landmarks",
        &s(&data.join("landmarks")),
        "--out",
        &s(&metrics_dir),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(
        std::fs::read(metrics_dir.join("metrics.json")).unwrap(),
        std::fs::read(run.join("metrics.json")).unwrap()
    );

    let legacy = tmp.path().join("legacy");
    let out = serialreg(&[
        "warp",
        "--run",
        &s(&run),
        "--out",
        &s(&legacy),
        "--input-dir",
        &s(&data.join("slices")),
        "--legacy-two-pass",
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(legacy.join("manifest.json")).unwrap();
    assert!(manifest.contains("\"export_mode\": \"legacy-two-pass\""));

    let one = tmp.path().join("one.png");
    let out = serialreg(&[
        "warp",
        "--run",
        &s(&run),
        "--out",
        &s(&one),
        "--slice",
        "slice_002",
        "--input-dir",
        &s(&data.join("slices")),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    assert!(one.exists());
}

#[test]
fn register_pair_with_config_file() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 2);
    let cfg = tmp.path().join("run.cfg");
    std::fs::write(&cfg, "# affine only\nbspline = false\nransac-seed = 11\n").unwrap();
    let out_dir = tmp.path().join("pair");
    let out = serialreg(&[
        "register-pair",
        "--fixed",
        data.join("slices/slice_000.png").to_str().unwrap(),
        "--moving",
        data.join("slices/slice_001.png").to_str().unwrap(),
        "--out",
        out_dir.to_str().unwrap(),
        "--config",
        cfg.to_str().unwrap(),
        "--ransac-seed",
        "12",
        "--warped",
        tmp.path().join("warped.png").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 0, "{}", String::from_utf8_lossy(&out.stderr));
    let t = std::fs::read_to_string(out_dir.join("slice_000__slice_001.transform.json")).unwrap();
    assert!(t.contains("\"status\": \"affine-only\""));
    assert!(t.contains("\"seed\": 12"));
    assert!(tmp.path().join("warped.png").exists());
    assert!(!out_dir.join("slice_000__slice_001.field.json").exists());
}

#[test]
fn invalid_input_exits_with_three() {
    let tmp = tempfile::tempdir().unwrap();
    let missing = tmp.path().join("missing.png");
    let m = missing.to_str().unwrap();
    let out = serialreg(&["register-pair", "--fixed", m, "--moving", m, "--out", "x"]);
    assert_eq!(code(&out), 3);

    let cfg = tmp.path().join("bad.cfg");
    std::fs::write(&cfg, "match-ratio = 0.9\nno-such-key = 1\n").unwrap();
    let out = serialreg(&["register-sequence", "--out", "x", "--config", cfg.to_str().unwrap()]);
    assert_eq!(code(&out), 3);
    assert!(String::from_utf8_lossy(&out.stderr).contains(":2:"));

    let out = serialreg(&["register-sequence", "--out", "x", m]);
    assert_eq!(code(&out), 3);
}

#[test]
fn chain_break_exits_with_two() {
    let tmp = tempfile::tempdir().unwrap();
    let data = tmp.path().join("data");
    synth(&data, 3);
    let blank = image_blank(&data.join("slices/slice_001.png"));
    let run = tmp.path().join("run");
    let slices = data.join("slices");
    let out = serialreg(&[
        "register-sequence",
        "--out",
        run.to_str().unwrap(),
        slices.join("slice_000.png").to_str().unwrap(),
        blank.to_str().unwrap(),
        slices.join("slice_002.png").to_str().unwrap(),
    ]);
    assert_eq!(code(&out), 2, "{}", String::from_utf8_lossy(&out.stderr));
    let manifest = std::fs::read_to_string(run.join("volume/manifest.json")).unwrap();
    assert!(manifest.contains("\"placed_count\": 1"));
}

// overwrites a slice PNG with a uniform grey image of the same size
fn image_blank(path: &Path) -> std::path::PathBuf {
    let blank = path.with_file_name("slice_001_blank.png");
    let img = serialreg::imaging::load_image(path, Default::default()).unwrap();
    let grey = serialreg::imaging::ScalarImage::constant(img.width(), img.height(), 0.5);
    serialreg::imaging::save_png(&grey, &blank).unwrap();
    std::fs::remove_file(path).unwrap();
    blank
}
