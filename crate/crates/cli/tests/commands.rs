use std::path::Path;
use std::process::Command;

use gridcox_cli::{report_variance_rows, variance_table};
use gridcox::spde::{marginal_variance, DomainKind};

fn gridcox() -> Command {
    Command::new(env!("CARGO_BIN_EXE_gridcox"))
}

fn run_ok(cmd: &mut Command) -> String {
    let out = cmd.output().unwrap();
    assert!(out.status.success(), "{:?}\nstderr: {}", out.status, String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn code(cmd: &mut Command) -> i32 {
    cmd.output().unwrap().status.code().unwrap()
}

fn write_truth(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("truth.json");
    std::fs::write(
        &p,
        r#"{"model": "m0", "arena": {"x0": 0, "y0": 0, "x1": 60, "y1": 60},
            "max_edge": 10, "margin": 10, "beta": -1.6,
            "omega": {"rho": 20, "s": 0.8, "phi": 1}, "field_seed": 3}"#,
    )
    .unwrap();
    p
}

fn small_config(dir: &Path) -> std::path::PathBuf {
    let p = dir.join("cfg.json");
    std::fs::write(
        &p,
        r#"{"meshes": {"max_edge": 12, "margin": 10, "p_theta": 6, "temporal_spacing": 30},
            "inference": {"max_evaluations": 30, "restarts": 0, "draws": 50, "permutations": 2000}}"#,
    )
    .unwrap();
    p
}

fn simulate(dir: &Path, seconds: &str) -> std::path::PathBuf {
    let truth = write_truth(dir);
    let session = dir.join("session.csv");
    run_ok(gridcox().args(["simulate", "--T", seconds, "--dt", "0.1", "--seed", "5"]).arg("--truth").arg(&truth).arg("--out").arg(&session));
    session
}

#[test]
fn print_defaults_round_trips() {
    let text = run_ok(gridcox().args(["config", "print-defaults"]));
    let cfg = gridcox::config::RunConfig::from_json(&text).unwrap();
    assert_eq!(cfg, gridcox::config::RunConfig::default());
    assert!(text.contains("\"mu_omega\""));
}

#[test]
fn check_variance_default_grid_passes() {
    let out = run_ok(gridcox().arg("check-variance"));
    assert_eq!(out.lines().count(), 1 + 54);
    let plane = out.lines().find(|l| l.starts_with("plane,1.0,1.0,")).unwrap();
    let v: f64 = plane.split(',').nth(3).unwrap().parse().unwrap();
    assert!((v - 1.0 / (4.0 * std::f64::consts::PI)).abs() < 1e-15);
}

#[test]
fn wrong_variance_formula_is_reported_with_exit_code_four() {
    let rows = variance_table(&[DomainKind::Circle], &[1.0], &[0.5], 1e-6, |d, k, p| {
        marginal_variance(d, k, p, 1.0).map(|v| v * 1.01)
    })
    .unwrap();
    let err = report_variance_rows(&rows, None).unwrap_err();
    assert_eq!(err.exit_code(), 4);
    assert_eq!(code(gridcox().args(["check-variance", "--tolerance", "1e-30"])), 4);
}

#[test]
fn validation_errors_exit_with_two() {
    let dir = tempfile::tempdir().unwrap();
    let bad = dir.path().join("bad.json");
    std::fs::write(&bad, r#"{"priors": {"unknown_key": 1}}"#).unwrap();
    let session = dir.path().join("s.csv");
    std::fs::write(&session, "time,x,y,theta,spike\n0,1,1,0,0\n1,2,2,0,0\n").unwrap();
    let out = gridcox().args(["fit", "--model", "m0"]).arg("--session").arg(&session).arg("--config").arg(&bad).arg("--out").arg(dir.path().join("o")).output().unwrap();
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("priors"));
    std::fs::write(&session, "time,x,y,theta,spike\n0,1,1,0,0\n0,2,2,0,0\n").unwrap();
    assert_eq!(code(gridcox().args(["ratemap", "--out", "x"]).arg("--session").arg(&session)), 2);
    assert_eq!(code(gridcox().args(["fit", "--model", "m9", "--session", "a", "--out", "b"])), 2);
}

#[test]
fn ratemap_outputs_satisfy_the_product_identity() {
    let dir = tempfile::tempdir().unwrap();
    let session = simulate(dir.path(), "120");
    let out = dir.path().join("rm");
    run_ok(gridcox().args(["ratemap", "--nx", "12", "--ny", "10"]).arg("--session").arg(&session).arg("--out").arg(&out));
    let read = |name: &str| -> Vec<f64> {
        let mut r = csv::Reader::from_path(out.join(name)).unwrap();
        r.records().map(|x| x.unwrap()[2].parse().unwrap()).collect()
    };
    let (t, g, v) = (read("rate_per_time.csv"), read("rate_per_length.csv"), read("speed.csv"));
    assert_eq!(t.len(), 120);
    for i in 0..t.len() {
        if v[i] > 1e-8 {
            assert!((t[i] - g[i] * v[i]).abs() <= 1e-10 * t[i].abs().max(1.0));
        }
    }
    let meta: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(out.join("metadata.json")).unwrap()).unwrap();
    assert_eq!(meta["bandwidth_cm"], 3.0);
    assert!(out.join("manifest.json").exists());
}

#[test]
fn pipeline_is_deterministic_end_to_end() {
    let dir = tempfile::tempdir().unwrap();
    let session = simulate(dir.path(), "300");
    assert!(dir.path().join("session.truth.csv").exists());
    assert!(dir.path().join("session.manifest.json").exists());
    let cfg = small_config(dir.path());
    let fit = |name: &str| {
        let out = dir.path().join(name);
        run_ok(gridcox().args(["fit", "--model", "m0", "--seed", "3"]).arg("--session").arg(&session).arg("--config").arg(&cfg).arg("--out").arg(&out));
        out
    };
    let (a, b) = (fit("fa"), fit("fb"));
    let la = std::fs::read(a.join("latent.csv")).unwrap();
    assert_eq!(la, std::fs::read(b.join("latent.csv")).unwrap());
    assert_eq!(std::fs::read(a.join("manifest.json")).unwrap(), std::fs::read(b.join("manifest.json")).unwrap());
    let manifest: serde_json::Value = serde_json::from_slice(&std::fs::read(a.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["seeds"]["search"], 3);
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    assert!(a.join("hyper.json").exists() && a.join("mesh/vertices.csv").exists());

    let cv = dir.path().join("cv");
    run_ok(
        gridcox()
            .args(["crossval", "--models", "m0,mxt", "--tau", "30", "--J", "500", "--K", "40"])
            .arg("--session")
            .arg(&session)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&cv),
    );
    let header = std::fs::read_to_string(cv.join("mean_difference.csv")).unwrap();
    assert!(header.starts_with("fold,interval,SE_mxt,DS_mxt\n"), "{header}");
    assert_eq!(header.lines().count(), 4);
    assert!(cv.join("interval_scores.csv").exists());
}

#[test]
fn single_model_crossval_has_no_difference_columns() {
    let dir = tempfile::tempdir().unwrap();
    let session = simulate(dir.path(), "200");
    let cfg = small_config(dir.path());
    let cv = dir.path().join("cv");
    run_ok(
        gridcox()
            .args(["crossval", "--model", "m0", "--tau", "40", "--J", "100", "--K", "20"])
            .arg("--session")
            .arg(&session)
            .arg("--config")
            .arg(&cfg)
            .arg("--out")
            .arg(&cv),
    );
    let text = std::fs::read_to_string(cv.join("p_value.csv")).unwrap();
    assert_eq!(text.trim(), "fold,interval");
}
