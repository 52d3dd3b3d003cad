use std::path::Path;
use std::process::{Command, Output};

const CAMERA: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/data/camera.png");

fn run(out: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_ebdeconv"))
        .arg("--out-dir")
        .arg(out)
        .args(args)
        .output()
        .unwrap()
}

fn json(path: &Path) -> serde_json::Value {
    serde_json::from_slice(&std::fs::read(path).unwrap()).unwrap()
}

#[test]
fn degrade_calibrate_deconvolve() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let o = run(d, &["degrade", "--image", CAMERA, "--crop", "32", "--family", "laplace", "--bsnr", "30", "--seed", "2"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["truth.npy", "observed.npy", "observed.png", "degrade.json"] {
        assert!(d.join(f).exists(), "{f}");
    }
    let sigma2 = json(&d.join("degrade.json"))["sigma2"].as_f64().unwrap();
    assert!(sigma2 > 0.0);

    let observed = d.join("observed.npy");
    let cal_dir = d.join("cal");
    let o = run(
        &cal_dir,
        &["calibrate", "--observed", observed.to_str().unwrap(), "--family", "laplace", "--iterations", "30", "--warmup", "10"],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let trace = std::fs::read_to_string(cal_dir.join("trace.csv")).unwrap();
    assert!(trace.starts_with("n,theta,alpha_1,sigma2,"));
    assert_eq!(trace.lines().count(), 31);

    let cal = cal_dir.join("calibration.json");
    let map_dir = d.join("map");
    let o = run(
        &map_dir,
        &["deconvolve", "--observed", observed.to_str().unwrap(), "--calibration", cal.to_str().unwrap(), "--truth", d.join("truth.npy").to_str().unwrap()],
    );
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(map_dir.join("map.npy").exists());
    assert!(json(&map_dir.join("deconvolve.json"))["psnr"].as_f64().unwrap() > 10.0);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["degrade", "--image", "/nonexistent.png"]);
    assert_eq!(o.status.code(), Some(2));
    let o = run(dir.path(), &["degrade", "--image", CAMERA, "--family", "moffat", "--alpha", "0.3"]);
    assert_eq!(o.status.code(), Some(2));

    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"schema_version": 99}"#).unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_ebdeconv"))
        .args(["--config", bad.to_str().unwrap(), "gradcheck"])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn validate_schedule_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let ok = run(dir.path(), &["validate-schedule", "--a", "0.9", "--b", "0.3"]);
    assert!(ok.status.success());
    let bad = run(dir.path(), &["validate-schedule", "--a", "0.8", "--b", "0.35"]);
    assert_eq!(bad.status.code(), Some(2));
    let inc = run(dir.path(), &["validate-schedule", "--a", "0.9", "--b", "0.4", "--c", "0.6", "--regime", "increasing-batch"]);
    assert!(inc.status.success(), "{}", String::from_utf8_lossy(&inc.stderr));
}

#[test]
fn gradcheck_passes_and_reports() {
    let dir = tempfile::tempdir().unwrap();
    let o = run(dir.path(), &["gradcheck", "--family", "moffat", "--size", "16"]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let r = json(&dir.path().join("gradcheck.json"));
    assert_eq!(r["pass"], serde_json::Value::Bool(true));
}
