use std::path::Path;
use std::process::{Command, Output};

fn diffenc(args: &[&str], dir: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_diffenc"))
        .args(args)
        .arg("--out-dir")
        .arg(dir)
        .output()
        .expect("binary runs")
}

fn rows(path: &Path) -> Vec<Vec<String>> {
    std::fs::read_to_string(path)
        .unwrap()
        .lines()
        .filter(|l| !l.starts_with('#'))
        .skip(1)
        .map(|l| l.split(',').map(str::to_string).collect())
        .collect()
}

#[test]
fn schedule_report_hits_configured_endpoints() {
    let dir = tempfile::tempdir().unwrap();
    let out = diffenc(&["schedule-report", "--lambda-max", "9.5", "--lambda-min", "-3.25", "--points", "11"], dir.path());
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = rows(&dir.path().join("schedule.csv"));
    assert_eq!(r.len(), 11);
    assert_eq!(r[0][1].parse::<f64>().unwrap(), 9.5);
    assert_eq!(r[10][1].parse::<f64>().unwrap(), -3.25);
    let text = std::fs::read_to_string(dir.path().join("schedule.csv")).unwrap();
    assert!(text.starts_with('#'), "artifact carries the config hash");
}

#[test]
fn config_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.toml");
    std::fs::write(&bad, "no_such_key = 1\n").unwrap();
    let out = diffenc(&["schedule-report", "--config", bad.to_str().unwrap()], dir.path());
    assert_eq!(out.status.code(), Some(2));

    let out = diffenc(&["schedule-report", "--lambda-max", "-6", "--lambda-min", "-5"], dir.path());
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("configuration"));

    let out = diffenc(&["eval"], dir.path());
    assert_eq!(out.status.code(), Some(2), "missing checkpoint");
}

#[test]
fn train_then_eval_sample_heatmap() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    let out = diffenc(&["train", "--steps", "20", "--encoder", "identity", "--n-mc", "2"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    for f in ["checkpoint.ckpt", "config.toml", "loss_curve.csv", "eval.csv"] {
        assert!(d.join(f).exists(), "{f} missing");
    }

    let out = diffenc(&["eval", "--n-mc", "2"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(d.join("eval_report.csv").exists());

    let out = diffenc(&["sample", "--steps", "16", "--n", "8"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert_eq!(rows(&d.join("samples.csv")).len(), 8 * 2);
    assert!(d.join("samples.pgm").exists());

    // The identity encoder does not move with t.
    let out = diffenc(&["heatmap", "--items", "3", "--intervals", "4"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    let r = rows(&d.join("heatmap.csv"));
    assert_eq!(r.len(), 3 * 4 * 2);
    assert!(r.iter().all(|row| row[4].parse::<f64>().unwrap() == 0.0));
}

#[test]
fn verify_quick_passes() {
    let dir = tempfile::tempdir().unwrap();
    let out = diffenc(&["verify", "--quick"], dir.path());
    assert_eq!(out.status.code(), Some(0), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(!rows(&dir.path().join("verify.csv")).is_empty());
}
