use std::path::Path;
use std::process::{Command, Output};

const CONFIG: &str = concat!(env!("CARGO_MANIFEST_DIR"), "/../../configs/small.toml");

fn odtq(args: &[&str], out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_odtq"))
        .args(args)
        .args(["--config", CONFIG, "--threads", "1", "--out"])
        .arg(out)
        .output()
        .unwrap()
}

#[test]
fn calibrate_without_checkpoint_names_missing_file() {
    let dir = tempfile::tempdir().unwrap();
    let gen = odtq(&["generate"], dir.path());
    assert!(gen.status.success(), "{}", String::from_utf8_lossy(&gen.stderr));

    let out = odtq(&["run", "--stage", "calibrate"], dir.path());
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("uq.ckpt"), "stderr: {err}");
    assert!(!dir.path().join("calibration.json").exists());
}

#[test]
fn full_run_writes_report_near_target_coverage() {
    let dir = tempfile::tempdir().unwrap();
    let out = odtq(&["run"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let report = std::fs::read_to_string(dir.path().join("report.json")).unwrap();
    let picp: f64 = report
        .lines()
        .find_map(|l| l.trim().strip_prefix("\"picp\":"))
        .map(|v| v.trim().trim_end_matches(',').parse().unwrap())
        .expect("picp in report");
    // alpha = 0.1 in the bundled config
    assert!(picp >= 85.0, "picp {picp}");
    for f in ["policy.ckpt", "uq.ckpt", "calibration.json", "risk_curve.csv", "reward_curve.csv"] {
        assert!(dir.path().join(f).exists(), "missing {f}");
    }
}

#[test]
fn unknown_stage_is_rejected() {
    let dir = tempfile::tempdir().unwrap();
    let out = odtq(&["run", "--stage", "bogus"], dir.path());
    assert!(!out.status.success());
}
