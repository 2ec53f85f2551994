//! End-to-end runs of the `mfsmp` binary.

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn mfsmp(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfsmp")).args(args).current_dir(cwd).env_remove("MFSMP_THREADS").output().unwrap()
}

fn config(name: &str) -> String {
    let p: PathBuf = [env!("CARGO_MANIFEST_DIR"), "..", "..", "configs", name].iter().collect();
    p.to_str().unwrap().to_string()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn json(o: &Output) -> serde_json::Value {
    serde_json::from_slice(&o.stdout).unwrap_or_else(|e| panic!("{e}: {}", stdout(o)))
}

#[test]
fn solve_e1_reaches_the_minimum() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfsmp(&["solve", &config("e1.json"), "--out", "out"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    let out = dir.path().join("out");
    let report: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("report.json")).unwrap()).unwrap();
    assert!((report["objective"].as_f64().unwrap() - 1.0).abs() <= 1e-8);
    assert_eq!(report["necessary_pass"], true);
    for f in ["control.csv", "trajectory.csv", "adjoint.csv", "necessary.json", "sufficiency.json", "manifest.json"] {
        assert!(out.join(f).exists(), "{f}");
    }
    assert!(!out.join("plot.csv").exists());
    let manifest: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config_sha256"].as_str().unwrap().len(), 64);
    // the adjoint at the root is E p(t_1) = 0 and q = E{-2w·w} = -2
    let adjoint = fs::read_to_string(out.join("adjoint.csv")).unwrap();
    assert_eq!(adjoint.lines().next(), Some("time,node_id,p_1,q^1_1"));
    assert!(adjoint.lines().nth(1).unwrap().starts_with("0,0,0,-2"), "{adjoint}");
}

#[test]
fn solve_is_reproducible_from_a_seed() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("prodcons.json");
    for out in ["a", "b"] {
        let o = mfsmp(&["solve", &cfg, "--out", out, "--seed", "11"], dir.path());
        assert_eq!(o.status.code(), Some(0), "{}", String::from_utf8_lossy(&o.stderr));
    }
    for f in ["report.json", "control.csv", "trajectory.csv", "adjoint.csv", "plot.csv", "necessary.json", "sufficiency.json"] {
        assert_eq!(fs::read(dir.path().join("a").join(f)).unwrap(), fs::read(dir.path().join("b").join(f)).unwrap(), "{f}");
    }
    let plot = fs::read_to_string(dir.path().join("a/plot.csv")).unwrap();
    assert_eq!(plot.lines().count(), 7);
}

#[test]
fn malformed_config_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("bad.json"), "{\"dims\": {\"n\": 1,\n").unwrap();
    let o = mfsmp(&["solve", "bad.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("line"));
    let o = mfsmp(&["solve", "missing.json"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn check_accepts_the_optimum_and_flags_a_perturbation() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = config("e1.json");
    fs::write(dir.path().join("opt.csv"), "time,node_id,u_1\n0,0,0\n").unwrap();
    let o = mfsmp(&["check", &cfg, "opt.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0), "{}", stdout(&o));

    fs::write(dir.path().join("pert.csv"), "time,node_id,u_1\n0,0,0.1\n").unwrap();
    let o = mfsmp(&["check", &cfg, "pert.csv"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    let v = json(&o);
    let nec = &v["reports"][0];
    assert_eq!(nec["name"], "necessary_condition");
    assert_eq!(nec["pass"], false);
    let worst = &nec["residuals"][0];
    assert_eq!(worst["level"], 0);
    assert_eq!(worst["node"], 0);
    // H_u = -4u = -0.4 and the worst vertex is v = -1
    assert!((worst["value"].as_f64().unwrap() - 0.44).abs() < 1e-12);
}

#[test]
fn control_of_the_wrong_shape_exits_2() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("wide.csv"), "time,node_id,u_1,u_2\n0,0,0,0\n").unwrap();
    let o = mfsmp(&["check", &config("e1.json"), "wide.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
    fs::write(dir.path().join("bad.csv"), "time,node_id,u_1\n0,0,abc\n").unwrap();
    let o = mfsmp(&["simulate", &config("e1.json"), "bad.csv"], dir.path());
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn simulate_reports_the_closed_form_cost() {
    let dir = tempfile::tempdir().unwrap();
    fs::write(dir.path().join("u.csv"), "time,node_id,u_1\n0,0,1\n").unwrap();
    let o = mfsmp(&["simulate", &config("e1.json"), "u.csv", "--out", "sim"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    assert_eq!(json(&o)["objective"], 3.0);
    let traj = fs::read_to_string(dir.path().join("sim/trajectory.csv")).unwrap();
    assert_eq!(traj, "time,node_id,parent_id,prob,x_1,u_1\n0,0,,1,0,1\n1,1,0,0.5,2,\n1,2,0,0.5,0,\n");
}

#[test]
fn prodcons_example_writes_plot_data() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfsmp(&["example", "prodcons", "--delta", "0.5", "--h", "0.5", "--N", "5", "--plot-data", "v.csv"], dir.path());
    assert_eq!(o.status.code(), Some(0));
    let text = stdout(&o);
    assert!(text.contains("0.750000") && text.contains("0.562500"), "{text}");
    let plot = fs::read_to_string(dir.path().join("v.csv")).unwrap();
    let rows: Vec<(f64, f64)> = plot
        .lines()
        .skip(1)
        .map(|l| {
            let (t, v) = l.split_once(',').unwrap();
            (t.parse().unwrap(), v.parse().unwrap())
        })
        .collect();
    assert_eq!(rows.len(), 6);
    assert!(rows.windows(2).all(|w| w[1].0 > w[0].0));
    assert!((rows[5].1 - 2f64.sqrt()).abs() < 1e-12);
    assert!((rows[4].1 - (1.0f64 / 0.375).sqrt()).abs() < 1e-12);
}

#[test]
fn injected_gradient_fault_fails_selftest() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfsmp(&["selftest", "--suite", "gradient", "--inject-fault", "grad-sign", "--report", "r.json"], dir.path());
    assert_eq!(o.status.code(), Some(1));
    assert!(stdout(&o).contains("[FAIL] 3."));
    let o = mfsmp(&["selftest", "--suite", "gradient", "--report", "r.json"], dir.path());
    assert_eq!(o.status.code(), Some(0));
}

#[test]
fn usage_errors_exit_2() {
    let dir = tempfile::tempdir().unwrap();
    assert_eq!(mfsmp(&["selftest", "--suite", "bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(mfsmp(&["selftest", "--inject-fault", "bogus"], dir.path()).status.code(), Some(2));
    assert_eq!(mfsmp(&["frobnicate"], dir.path()).status.code(), Some(2));
    assert_eq!(mfsmp(&["example", "prodcons", "--delta", "1.5"], dir.path()).status.code(), Some(2));
    let o = Command::new(env!("CARGO_BIN_EXE_mfsmp"))
        .args(["selftest", "--suite", "noise", "--report", "r.json"])
        .current_dir(dir.path())
        .env("MFSMP_THREADS", "zero")
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn thread_count_does_not_change_results() {
    let dir = tempfile::tempdir().unwrap();
    let run = |threads: &str, report: &str| {
        let o = Command::new(env!("CARGO_BIN_EXE_mfsmp"))
            .args(["selftest", "--suite", "duality", "--suite", "operator", "--report", report])
            .current_dir(dir.path())
            .env("MFSMP_THREADS", threads)
            .output()
            .unwrap();
        assert_eq!(o.status.code(), Some(0));
        fs::read(dir.path().join(report)).unwrap()
    };
    assert_eq!(run("1", "one.json"), run("3", "three.json"));
}
