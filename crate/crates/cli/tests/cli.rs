use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use serde_json::Value;

const CHAIN: &str = "variant = \"linear_svar\"\nb0 = [[0.0, 0.0, 0.0], [0.8, 0.0, 0.0], [0.0, 0.8, 0.0]]\n";

fn svarfm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_svarfm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = svarfm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8(out.stdout).unwrap()
}

fn write(dir: &Path, name: &str, text: &str) -> PathBuf {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

fn edges(doc: &Value) -> Vec<(u64, u64)> {
    let mut e: Vec<(u64, u64)> = doc["graph"]["edges"]
        .as_array()
        .unwrap()
        .iter()
        .map(|e| (e["source"].as_u64().unwrap(), e["target"].as_u64().unwrap()))
        .collect();
    e.sort();
    e
}

#[test]
fn simulate_intervene_discover_report() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "chain.toml", CHAIN);
    let panel = dir.path().join("obs.csv");
    ok(&["simulate", s(&spec), "--T", "400", "--seed", "3", "--out", s(&panel)]);
    let header = fs::read_to_string(&panel).unwrap().lines().next().unwrap().to_string();
    assert_eq!(header, "x0,x1,x2");

    let mut manifests = Vec::new();
    for target in ["x0", "x1", "x2"] {
        let out = dir.path().join(target);
        let printed = ok(&[
            "intervene", s(&spec), "--target", target, "--values", "2.0", "--M", "300", "--seed", "5", "--out", s(&out),
        ]);
        manifests.push(printed.trim().to_string());
    }
    let graph = dir.path().join("graph.json");
    let mut args = vec!["discover", "--obs", s(&panel), "--variant", "svar-fm", "--out", s(&graph)];
    for m in &manifests {
        args.extend(["--intv", m.as_str()]);
    }
    ok(&args);
    let doc: Value = serde_json::from_str(&fs::read_to_string(&graph).unwrap()).unwrap();
    // Total effects of a chain: x0 reaches x2 through x1.
    assert_eq!(edges(&doc), vec![(0, 1), (0, 2), (1, 2)]);

    let dot = ok(&["report", s(&graph), "--format", "dot"]);
    assert!(dot.contains("digraph"), "{dot}");
    let csv = ok(&["report", s(&graph), "--format", "csv"]);
    assert_eq!(csv.trim().lines().count(), 4, "{csv}");
}

#[test]
fn discover_queries_spec_and_projects() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "chain.toml", CHAIN);
    let panel = dir.path().join("obs.csv");
    ok(&["simulate", s(&spec), "--T", "300", "--out", s(&panel)]);
    let text = ok(&["discover", "--obs", s(&panel), "--spec", s(&spec), "--variant", "svar-fm-dag", "--M", "200"]);
    let doc: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["variant"], "svar_fm_dag");
    assert_eq!(edges(&doc), vec![(0, 1), (0, 2), (1, 2)]);
}

#[test]
fn discover_without_simulator_uses_var_surrogate() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(
        dir.path(),
        "lagged.toml",
        "variant = \"linear_svar\"\nb0 = [[0.0, 0.0], [0.0, 0.0]]\nlags = [[[0.5, 0.0], [0.6, 0.3]]]\n",
    );
    let panel = dir.path().join("obs.csv");
    ok(&["simulate", s(&spec), "--T", "1000", "--seed", "1", "--out", s(&panel)]);
    let text = ok(&["discover", "--obs", s(&panel), "--variant", "svar-fm", "--M", "200"]);
    let doc: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(edges(&doc), vec![(0, 1)]);
}

#[test]
fn score_variants_emit_scores() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "lorenz.toml", "variant = \"ode_system\"\n[system]\nkind = \"lorenz63\"\nsigma = 10.0\nrho = 28.0\nbeta = 2.6666666666666665\n");
    let panel = dir.path().join("obs.csv");
    ok(&["simulate", s(&spec), "--T", "1000", "--out", s(&panel)]);
    for variant in ["dyn1", "dyn2"] {
        let text = ok(&["discover", "--obs", s(&panel), "--variant", variant]);
        let doc: Value = serde_json::from_str(&text).unwrap();
        assert_eq!(doc["scores"].as_array().unwrap().len(), 3);
    }
}

#[test]
fn config_file_overrides_defaults() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "chain.toml", CHAIN);
    let panel = dir.path().join("obs.csv");
    ok(&["simulate", s(&spec), "--T", "300", "--out", s(&panel)]);
    let cfg = write(dir.path(), "cfg.toml", "[test]\nalpha = 1e-300\nb = 200\nm = 100\n");
    let text = ok(&["--config", s(&cfg), "discover", "--obs", s(&panel), "--spec", s(&spec), "--variant", "svar-fm"]);
    let doc: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["pairs"][0]["corrected_alpha"].as_f64().unwrap(), 1e-300 / 6.0);
}

#[test]
fn validation_errors_exit_with_2() {
    let dir = tempfile::tempdir().unwrap();
    let bad = write(dir.path(), "bad.toml", "variant = \"warp_drive\"\n");
    assert_eq!(svarfm(&["simulate", s(&bad)]).status.code(), Some(2));
    let spec = write(dir.path(), "chain.toml", CHAIN);
    assert_eq!(
        svarfm(&["intervene", s(&spec), "--target", "nope", "--values", "1", "--out", s(dir.path())]).status.code(),
        Some(2)
    );
    let panel = dir.path().join("obs.csv");
    ok(&["simulate", s(&spec), "--T", "100", "--out", s(&panel)]);
    assert_eq!(
        svarfm(&["discover", "--obs", s(&panel), "--alpha", "1.5", "--variant", "svar-fm"]).status.code(),
        Some(2)
    );
    let cfg = write(dir.path(), "cfg.toml", "[tset]\nalpha = 0.1\n");
    assert_eq!(svarfm(&["--config", s(&cfg), "report", s(&panel)]).status.code(), Some(2));
    assert_eq!(svarfm(&["bench", "atlantis"]).status.code(), Some(2));
}

#[test]
fn unconverged_projection_exits_with_3() {
    let dir = tempfile::tempdir().unwrap();
    let panel = dir.path().join("obs.csv");
    // Lag-one feedback between x0 and x1, read one step after the clamp,
    // shows up as a 2-cycle that one outer step cannot remove.
    let cycle = write(
        dir.path(),
        "cycle.toml",
        "variant = \"linear_svar\"\nb0 = [[0.0, 0.0, 0.0], [0.0, 0.0, 0.0], [0.0, 0.0, 0.0]]\nlags = [[[0.0, 0.6, 0.0], [0.6, 0.0, 0.0], [0.0, 0.0, 0.0]]]\n",
    );
    ok(&["simulate", s(&cycle), "--T", "300", "--out", s(&panel)]);
    let mut manifests = Vec::new();
    for target in ["x0", "x1", "x2"] {
        let out = dir.path().join(target);
        let printed = ok(&[
            "intervene", s(&cycle), "--target", target, "--values", "3.0", "--horizon", "1", "--M", "200", "--out", s(&out),
        ]);
        manifests.push(printed.trim().to_string());
    }
    let cfg = write(dir.path(), "cfg.toml", "[dag]\nmax_outer = 1\nh_tol = 1e-300\n[test]\nm = 100\nb = 200\n");
    let mut args = vec!["--config", s(&cfg), "discover", "--obs", s(&panel), "--variant", "svar-fm-dag"];
    for m in &manifests {
        args.extend(["--intv", m.as_str()]);
    }
    let out = svarfm(&args);
    assert_eq!(out.status.code(), Some(3), "{}", String::from_utf8_lossy(&out.stderr));
}

#[test]
fn flow_train_sample_ace() {
    let dir = tempfile::tempdir().unwrap();
    let mut csv = String::from("dose,y\n");
    for k in 0..1000 {
        let c = 3.0 * (k as f64 + 0.5) / 1000.0;
        csv.push_str(&format!("{c},{}\n", 2.0 * c));
    }
    let data = write(dir.path(), "data.csv", &csv);
    let model = dir.path().join("model.json");
    let report = ok(&["flow", "train", "--data", s(&data), "--x", "y", "--cond", "dose", "--steps", "3000", "--out", s(&model)]);
    let report: Value = serde_json::from_str(&report).unwrap();
    assert!(report["final_loss"].as_f64().unwrap() < report["initial_loss"].as_f64().unwrap());

    let samples = ok(&["flow", "sample", "--model", s(&model), "--cond", "1.5", "--n", "500"]);
    let ys: Vec<f64> = samples.lines().skip(1).map(|l| l.parse().unwrap()).collect();
    let mean = ys.iter().sum::<f64>() / ys.len() as f64;
    assert!((mean - 3.0).abs() < 0.3, "{mean}");

    let ace: Value = serde_json::from_str(&ok(&["flow", "ace", "--model", s(&model), "--hi", "2", "--lo", "1"])).unwrap();
    let point = ace["point"].as_f64().unwrap();
    assert!((1.6..=2.4).contains(&point), "{point}");
}

#[test]
fn sensitivity_and_bench_tables() {
    let dir = tempfile::tempdir().unwrap();
    let spec = write(dir.path(), "chain.toml", "variant = \"linear_svar\"\nb0 = [[0.0, 0.0], [0.7, 0.0]]\n");
    let graph = write(
        dir.path(),
        "g.json",
        r#"{"d": 2, "edges": [{"source": 0, "target": 1, "lag": 0, "weight": 0.7}], "dag_mode": false}"#,
    );
    let csv = ok(&["sensitivity", s(&spec), "--graph", s(&graph), "--M", "100", "--format", "csv"]);
    let row = csv.lines().find(|l| l.contains("b0_0_1")).expect("entry for the edge coefficient");
    assert!(row.starts_with("x0,x1,"), "{row}");

    let text = ok(&["bench", "macro", "--seeds", "2", "--M", "20", "--T", "192"]);
    let doc: Value = serde_json::from_str(&text).unwrap();
    assert_eq!(doc["schema"], "causalsim-bench-v1");
    assert_eq!(doc["seeds"], 2);
}
