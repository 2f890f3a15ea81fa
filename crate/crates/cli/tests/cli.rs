use std::path::Path;
use std::process::{Command, Output};

use relu_extract::network::{example_network, NetworkModel};

fn reluxt(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_reluxt"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn path(p: &Path) -> &str {
    p.to_str().unwrap()
}

// Small evaluation budgets keep the report steps quick.
const FAST_EVAL: [&str; 6] = [
    "--set",
    "eval.coverage_samples=20000",
    "--set",
    "eval.delta_samples=20000",
    "--set",
    "eval.activation_samples=20000",
];

#[test]
fn generate_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.txt");
    let b = dir.path().join("b.txt");
    for p in [&a, &b] {
        let o = reluxt(&["generate", "12-4-4-1", "--seed", "7", "--out", path(p)]);
        assert!(o.status.success(), "{o:?}");
    }
    assert_eq!(std::fs::read(&a).unwrap(), std::fs::read(&b).unwrap());
    let m = NetworkModel::load(&a).unwrap();
    assert_eq!(m.widths(), &[12, 4, 4, 1]);
}

#[test]
fn bad_architecture_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let o = reluxt(&["generate", "12-x-1", "--out", path(&dir.path().join("m.txt"))]);
    assert_eq!(o.status.code(), Some(2));
}

#[test]
fn config_overrides_and_errors() {
    let o = reluxt(&["config", "--set", "harvest.count=500"]);
    assert!(o.status.success());
    assert!(stdout(&o).contains("count = 500"));

    for bad in [
        vec!["config", "--set", "harvest.nope=1"],
        vec!["config", "--set", "filter.probe_step=-1"],
        vec!["config", "--set", "signs.mode=guess"],
        vec!["config", "--preset", "nonexistent"],
        vec!["config", "--set", "no-equals-sign"],
    ] {
        let o = reluxt(&bad);
        assert_eq!(o.status.code(), Some(2), "{bad:?}");
    }
}

#[test]
fn polytope_demo_on_the_worked_example() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("example.txt");
    example_network().save(&model).unwrap();
    let csv = dir.path().join("cells.csv");
    let o = reluxt(&[
        "demo",
        "polytopes",
        path(&model),
        "--out",
        path(&csv),
        "--low",
        "-100",
        "--high",
        "100",
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("18 cells"));
    let text = std::fs::read_to_string(&csv).unwrap();
    assert!(text.starts_with("cell,pattern,kind,index,s,t"));
}

#[test]
fn evaluating_a_model_against_itself() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.txt");
    let other = dir.path().join("other.txt");
    reluxt(&["generate", "6-4-3-1", "--seed", "2", "--out", path(&m)]);
    reluxt(&["generate", "6-5-3-1", "--seed", "2", "--out", path(&other)]);
    let mut args = vec!["evaluate", path(&m), path(&m)];
    args.extend(FAST_EVAL);
    let o = reluxt(&args);
    assert!(o.status.success(), "{o:?}");
    let s = stdout(&o);
    assert!(s.contains("model coverage 100.00%"), "{s}");
    assert!(s.contains("delta at eps=0.05"), "{s}");

    let o = reluxt(&["evaluate", path(&m), path(&other)]);
    assert!(!o.status.success());
}

#[test]
fn layer_by_layer_attack_and_report() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.txt");
    reluxt(&["generate", "6-5-4-1", "--seed", "3", "--out", path(&m)]);
    let small = ["--set", "harvest.count=200", "--set", "filter.probes=30"];

    let mut results = Vec::new();
    for layer in ["1", "2"] {
        let out = dir.path().join(format!("layer{layer}.json"));
        let mut args = vec!["attack", path(&m), "--layer", layer, "--out", path(&out)];
        args.extend(small);
        let o = reluxt(&args);
        assert!(o.status.success(), "{o:?}");
        assert!(stdout(&o).contains(&format!("layer {layer}: queries 2^")));
        results.push(out);
    }

    let last = dir.path().join("layer3.json");
    let o = reluxt(&[
        "attack",
        path(&m),
        "--layer",
        "3",
        "--stored",
        path(&results[0]),
        "--stored",
        path(&results[1]),
        "--out",
        path(&last),
    ]);
    assert!(o.status.success(), "{o:?}");
    assert!(stdout(&o).contains("layer 3: queries 2^0.00 (0)"));

    let model = dir.path().join("extracted.txt");
    let tsv = dir.path().join("report.tsv");
    let mut args = vec![
        "report",
        path(&m),
        path(&results[0]),
        path(&results[1]),
        path(&last),
        "--model",
        path(&model),
        "--tsv",
        path(&tsv),
    ];
    args.extend(FAST_EVAL);
    let o = reluxt(&args);
    assert!(o.status.success(), "{o:?}");
    let extracted = NetworkModel::load(&model).unwrap();
    assert_eq!(extracted.widths(), &[6, 5, 4, 1]);
    let rows = std::fs::read_to_string(&tsv).unwrap();
    let lines: Vec<&str> = rows.lines().collect();
    // Header, three layers, model coverage.
    assert_eq!(lines.len(), 5);
    assert!(lines[4].starts_with("model"));
}

#[test]
fn attack_without_a_deep_enough_prefix() {
    let dir = tempfile::tempdir().unwrap();
    let m = dir.path().join("m.txt");
    let shallow = dir.path().join("shallow.txt");
    reluxt(&["generate", "6-4-4-4-1", "--seed", "1", "--out", path(&m)]);
    reluxt(&["generate", "6-4-1", "--seed", "1", "--out", path(&shallow)]);
    let out = dir.path().join("r.json");
    let o = reluxt(&["attack", path(&m), "--layer", "3", "--prefix", path(&shallow), "--out", path(&out)]);
    assert_eq!(o.status.code(), Some(2), "{o:?}");

    let o = reluxt(&["attack", path(&m), "--layer", "4", "--out", path(&out)]);
    assert!(!o.status.success(), "output layer without --stored");
}
