use std::path::{Path, PathBuf};
use std::process::Command;

use prwb_cli::report::read_csv;

fn prwb(args: &[&str]) -> (i32, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_prwb")).args(args).output().expect("binary runs");
    (out.status.code().unwrap_or(-1), String::from_utf8_lossy(&out.stderr).into_owned())
}

fn path(dir: &Path, name: &str) -> PathBuf {
    dir.join(name)
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

const ZERO_COST: &str = r#"{"d":2,"n":2,"m":2,"omega":[0.5,0.5],"measures":[
 {"weights":[0.5,0.5],"support":[[1,1],[1,1]]},
 {"weights":[0.25,0.75],"support":[[1,1],[1,1]]}]}"#;

#[test]
fn solve_exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let zero = path(dir.path(), "zero.json");
    std::fs::write(&zero, ZERO_COST).unwrap();
    let report = path(dir.path(), "r.json");
    let input = format!("io.input={}", s(&zero));
    let (code, _) = prwb(&["solve", "--set", &input, "--set", "dims.k=1", "--out", s(&report)]);
    assert_eq!(code, 0);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["objective"].as_f64(), Some(0.0));

    let bad = path(dir.path(), "bad.json");
    std::fs::write(&bad, "{\"d\": 2, \"n\":").unwrap();
    let (code, err) = prwb(&["solve", "--set", &format!("io.input={}", s(&bad)), "--out", s(&report)]);
    assert_eq!(code, 1);
    assert!(err.contains("parse"), "{err}");

    let fixture = path(dir.path(), "fx.json");
    let (code, _) = prwb(&["gen-fixture", "--set", "dims.d=4", "--set", "dims.n=5", "--set", "dims.m=2", "--out", s(&fixture)]);
    assert_eq!(code, 0);
    let (code, _) = prwb(&[
        "solve",
        "--set",
        &format!("io.input={}", s(&fixture)),
        "--set",
        "dims.k=2",
        "--set",
        "solver.max_iter=1",
        "--out",
        s(&report),
    ]);
    assert_eq!(code, 2);
    let v: serde_json::Value = serde_json::from_str(&std::fs::read_to_string(&report).unwrap()).unwrap();
    assert_eq!(v["converged"].as_bool(), Some(false));
}

#[test]
fn bad_config_is_an_input_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "o.csv");
    assert_eq!(prwb(&["plateau", "--set", "solver.nope=1", "--out", s(&out)]).0, 1);
    assert_eq!(prwb(&["plateau", "--config", "/nonexistent.json", "--out", s(&out)]).0, 1);
    assert_eq!(prwb(&["plateau", "--set", "grid.k_list=[30]", "--out", s(&out)]).0, 1);
    assert_eq!(prwb(&["frobnicate", "--out", s(&out)]).0, 1);
}

#[test]
fn plateau_with_single_k_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.csv"), path(dir.path(), "b.csv"));
    let args = ["--set", "dims.d=6", "--set", "dims.n=5", "--set", "grid.k_list=[6]", "--set", "repeats=2"];
    for out in [&a, &b] {
        let mut full = vec!["plateau"];
        full.extend_from_slice(&args);
        full.extend_from_slice(&["--out", s(out)]);
        assert_eq!(prwb(&full).0, 0);
    }
    let rows = read_csv(&a).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.repeats == 2 && r.std >= 0.0));
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
}

#[test]
fn noise_at_zero_sigma_has_zero_error() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "n.csv");
    let code = prwb(&[
        "noise", "--set", "dims.d=6", "--set", "dims.n=5", "--set", "dims.k=2", "--set", "grid.sigma_list=[0]",
        "--set", "repeats=2", "--out", s(&out),
    ])
    .0;
    assert_eq!(code, 0);
    let rows = read_csv(&out).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.mean == 0.0));
}

#[test]
fn mee_handles_a_single_atom() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "m.csv");
    let code = prwb(&[
        "mee", "--set", "dims.d=4", "--set", "dims.m=2", "--set", "dims.k=2", "--set", "grid.n_list=[1]", "--set",
        "repeats=2", "--out", s(&out),
    ])
    .0;
    assert_eq!(code, 0);
    let rows = read_csv(&out).unwrap();
    assert_eq!(rows.len(), 2);
    assert!(rows.iter().all(|r| r.mean.is_finite()));
}

#[test]
fn timing_reports_one_row_per_solver() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "t.csv");
    let code = prwb(&[
        "timing", "--set", "dims.d=5", "--set", "dims.k=2", "--set", "grid.n_list=[4]", "--set", "repeats=1",
        "--out", s(&out),
    ])
    .0;
    assert_eq!(code, 0);
    let rows = read_csv(&out).unwrap();
    let solvers: Vec<&str> = rows.iter().map(|r| r.param.rsplit('=').next().unwrap()).collect();
    assert_eq!(solvers, ["IBP", "RBCD", "RGA-IBP"]);
}

#[test]
fn single_cluster_labels_are_zero() {
    let dir = tempfile::tempdir().unwrap();
    let out = path(dir.path(), "c.csv");
    let code = prwb(&[
        "cluster", "--set", "cluster.clusters=1", "--set", "dims.d=3", "--set", "dims.n=4", "--set",
        "cluster.n_support=4", "--set", "fixture.per_group=3", "--out", s(&out),
    ])
    .0;
    assert_eq!(code, 0);
    let labels = std::fs::read_to_string(path(dir.path(), "c.labels.csv")).unwrap();
    assert!(labels.lines().all(|l| l == "0"));
    assert_eq!(labels.lines().count(), 9);
    let rows = read_csv(&out).unwrap();
    assert!(rows.iter().any(|r| r.value_name == "ami"));
}

#[test]
fn cluster_reads_measure_and_label_files() {
    let dir = tempfile::tempdir().unwrap();
    let fx = path(dir.path(), "clusters.json");
    let set = ["--set", "fixture.kind=clusters", "--set", "dims.d=3", "--set", "dims.n=4", "--set", "fixture.per_group=4"];
    let mut args = vec!["gen-fixture"];
    args.extend_from_slice(&set);
    args.extend_from_slice(&["--out", s(&fx)]);
    assert_eq!(prwb(&args).0, 0);
    let out = path(dir.path(), "c.csv");
    let code = prwb(&[
        "cluster",
        "--set",
        &format!("io.input={}", s(&fx)),
        "--set",
        &format!("io.labels={}", s(&path(dir.path(), "clusters.labels.csv"))),
        "--set",
        "cluster.n_support=4",
        "--out",
        s(&out),
    ])
    .0;
    assert_eq!(code, 0);
    let rows = read_csv(&out).unwrap();
    let last = rows.last().unwrap();
    assert!(last.param.starts_with("final"));
    assert_eq!(last.mean, 1.0);
}

#[test]
fn gen_fixture_is_byte_identical_and_full_rank_when_asked() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (path(dir.path(), "a.json"), path(dir.path(), "b.json"));
    for out in [&a, &b] {
        let code = prwb(&[
            "gen-fixture", "--set", "dims.d=3", "--set", "dims.k_star=3", "--set", "dims.k=3", "--set", "dims.n=40",
            "--set", "seed=9", "--out", s(out),
        ])
        .0;
        assert_eq!(code, 0);
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let set = prwb_core::measures::load_measure_set(&a).unwrap();
    let x = set.measures()[0].support();
    let centered = x.clone() * x.transpose();
    let sv = centered.singular_values();
    assert!(sv.min() > 1e-6, "{sv}");
}
