use std::path::Path;
use std::process::{Command, Output};

fn wats(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_wats")).args(args).output().unwrap()
}

fn write_trial_csv(path: &Path) {
    let mut text = String::from("subject_id,group,time,value\n");
    for g in 0..2 {
        for i in 0..12 {
            for t in 0..6 {
                let wiggle = ((i * 7 + t * 3) % 5) as f64 * 0.4;
                let slope = if g == 0 { -1.0 } else { -0.6 };
                text.push_str(&format!("s{g}-{i},{},{t},{:.2}\n", ["drug", "placebo"][g], 20.0 + i as f64 * 0.3 + slope * t as f64 + wiggle));
            }
        }
    }
    std::fs::write(path, text).unwrap();
}

#[test]
fn simulate_writes_tables() {
    let dir = tempfile::tempdir().unwrap();
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/smoke.json");
    let out = dir.path().join("out");
    let o = wats(&["--threads", "1", "simulate", "--config", config.to_str().unwrap(), "--reps", "3", "--seed", "5", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    for f in ["results.csv", "power_panels.csv", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seed"], 5);
    assert_eq!(manifest["config"]["reps"], 3);
}

#[test]
fn analyze_and_weights_write_reports() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("trial.csv");
    write_trial_csv(&csv);
    let out = dir.path().join("a");
    let o = wats(&["analyze", "--data", csv.to_str().unwrap(), "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    let report: serde_json::Value = serde_json::from_slice(&std::fs::read(out.join("report.json")).unwrap()).unwrap();
    assert_eq!(report["groups"], serde_json::json!(["drug", "placebo"]));
    assert!(out.join("weight_curve.csv").exists() && out.join("individual_wats.csv").exists());

    let out = dir.path().join("w");
    let o = wats(&["weights", "--data", csv.to_str().unwrap(), "--seed", "2", "--out-dir", out.to_str().unwrap()]);
    assert!(o.status.success(), "{}", String::from_utf8_lossy(&o.stderr));
    assert!(out.join("weights.json").exists());
}

#[test]
fn validate_reports_problems() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.csv");
    std::fs::write(&bad, "subject_id,group,time,value\na,x,0,1\na,x,0,2\n").unwrap();
    let o = wats(&["validate", "--data", bad.to_str().unwrap()]);
    assert!(!o.status.success());
    assert!(String::from_utf8_lossy(&o.stderr).contains("line 3"));
    assert!(!wats(&["validate"]).status.success());
    let config = Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs/quadratic_sweep.json");
    let o = wats(&["validate", "--config", config.to_str().unwrap()]);
    assert!(o.status.success());
    assert!(String::from_utf8_lossy(&o.stdout).contains("144 cells"));
}
