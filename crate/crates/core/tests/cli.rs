use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use rand_distr::{Distribution, StandardNormal};

use threshflex::evaluation::sample_sd;
use threshflex::graph::{FeatureCurve, FeatureKind, Strategy, ThresholdGrid};
use threshflex::io::read_matrix_csv;
use threshflex::models::SubjectRecord;
use threshflex::plasmode::synth_correlation;
use threshflex::seed;

fn run(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_threshflex"))
        .args(args)
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> Output {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    out
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

/// Three subjects of 6-node time series plus a manifest.
fn toy_manifest(dir: &Path) -> std::path::PathBuf {
    let mut rng = seed::rng(3, &[]);
    let mut subjects = Vec::new();
    for i in 0..3 {
        let mut text = String::from("r1,r2,r3,r4,r5,r6\n");
        for _ in 0..25 {
            let common: f64 = StandardNormal.sample(&mut rng);
            let row: Vec<String> = (0..6)
                .map(|j| {
                    let e: f64 = StandardNormal.sample(&mut rng);
                    let load = if j < 3 { 1.0 } else { 0.2 };
                    format!("{}", load * common + e)
                })
                .collect();
            text.push_str(&row.join(","));
            text.push('\n');
        }
        fs::write(dir.join(format!("sub{i}.csv")), text).unwrap();
        subjects.push(serde_json::json!({"id": format!("sub{i}"), "path": format!("sub{i}.csv"), "outcome": i as f64}));
    }
    let path = dir.join("manifest.json");
    fs::write(&path, serde_json::json!({ "subjects": subjects }).to_string()).unwrap();
    path
}

#[test]
fn features_writes_one_curve_per_subject() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_manifest(dir.path());
    let out = dir.path().join("feat");
    ok(&["features", "--manifest", p(&manifest), "--out", p(&out), "--edges-at", "0.2"]);
    for i in 0..3 {
        let text = fs::read_to_string(out.join(format!("sub{i}.csv"))).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert!(lines[0].starts_with("# threshflex "));
        assert_eq!(lines[1], "threshold,cc");
        assert_eq!(lines.len() - 2, 101);
        let edges = fs::read_to_string(out.join(format!("sub{i}_edges.csv"))).unwrap();
        assert!(edges.starts_with("# threshflex ") && edges.lines().nth(1) == Some("source,target,weight"));
    }
    let json: serde_json::Value =
        serde_json::from_str(&fs::read_to_string(out.join("dataset.json")).unwrap()).unwrap();
    assert_eq!(json["records"].as_array().unwrap().len(), 3);
    assert!(json["_meta"]["config"].is_string());
}

#[test]
fn features_do_not_depend_on_threads() {
    let dir = tempfile::tempdir().unwrap();
    let manifest = toy_manifest(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["--threads", "1", "features", "--manifest", p(&manifest), "--out", p(&a), "--strategy", "density"]);
    ok(&["features", "--manifest", p(&manifest), "--out", p(&b), "--threads", "6", "--strategy", "density"]);
    for name in ["sub0.csv", "sub1.csv", "sub2.csv", "dataset.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
}

fn gaussian_dataset(dir: &Path, n: usize) -> (std::path::PathBuf, Vec<f64>) {
    let grid = ThresholdGrid::default();
    let mut rng = seed::rng(21, &[]);
    let mut y = Vec::new();
    let records: Vec<SubjectRecord> = (0..n)
        .map(|i| {
            let v: f64 = StandardNormal.sample(&mut rng);
            y.push(v);
            let (a, b) = ((i % 17) as f64 / 17.0, (i % 5) as f64 / 5.0);
            SubjectRecord {
                id: format!("s{i:04}"),
                curve: FeatureCurve::new(
                    grid.clone(),
                    grid.values()
                        .iter()
                        .enumerate()
                        .map(|(j, t)| a * (1.0 - t) + b * (3.0 * t).sin() + ((i * 7 + j) % 11) as f64 / 50.0)
                        .collect(),
                    FeatureKind::Cc,
                    Strategy::Weight,
                )
                .unwrap(),
                covariates: vec![],
                outcome: Some(v),
            }
        })
        .collect();
    let path = dir.join("dataset.json");
    fs::write(&path, serde_json::json!({ "records": records }).to_string()).unwrap();
    (path, y)
}

#[test]
fn cv_null_rmspe_tracks_sd() {
    let dir = tempfile::tempdir().unwrap();
    let (data, y) = gaussian_dataset(dir.path(), 200);
    let out = dir.path().join("perf.csv");
    ok(&["cv", "--dataset", p(&data), "--method", "null", "--repeats", "2", "--out", p(&out)]);
    let text = fs::read_to_string(&out).unwrap();
    let mut rdr = csv::ReaderBuilder::new().comment(Some(b'#')).from_reader(text.as_bytes());
    let headers = rdr.headers().unwrap().clone();
    let col = headers.iter().position(|h| h == "rmspe").unwrap();
    let mean_row = rdr
        .records()
        .map(Result::unwrap)
        .find(|r| &r[1] == "mean")
        .unwrap();
    let rmspe: f64 = mean_row[col].parse().unwrap();
    let sd = sample_sd(&y).unwrap();
    assert!((rmspe / sd - 1.0).abs() <= 0.15, "{rmspe} vs {sd}");
    assert_eq!(&mean_row[4], "NA");
}

#[test]
fn fit_writes_fit_and_curves() {
    let dir = tempfile::tempdir().unwrap();
    let (data, _) = gaussian_dataset(dir.path(), 60);
    let out = dir.path().join("fit");
    ok(&["fit", "--dataset", p(&data), "--method", "flex", "--out", p(&out)]);
    let fit: serde_json::Value = serde_json::from_str(&fs::read_to_string(out.join("fit.json")).unwrap()).unwrap();
    assert_eq!(fit["method"], "flex");
    assert!(fit["weight_function"]["gamma"].as_array().unwrap().len() == 28);
    for name in ["weight_function.csv", "standardized.csv"] {
        let text = fs::read_to_string(out.join(name)).unwrap();
        assert!(text.starts_with("# threshflex "));
        assert_eq!(text.lines().count(), 2 + 101);
    }
    let out = dir.path().join("opt");
    ok(&["fit", "--dataset", p(&data), "--method", "opt", "--out", p(&out)]);
    assert!(!out.join("standardized.csv").exists());
}

const SCENARIO: &str = r#"{
  "id": "det",
  "n": 30,
  "n_sim": 6,
  "ogm": {"kind": "universal", "r2_target": 0.6},
  "contamination": {"alpha": 0.15},
  "methods": ["flex", "opt", "avg", "null", "oracle"],
  "source": {"kind": "synthetic", "p": 12}
}"#;

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.json");
    fs::write(&cfg, SCENARIO).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--config", p(&cfg), "--out", p(&a), "--seed", "11"]);
    ok(&["simulate", "--config", p(&cfg), "--out", p(&b), "--seed", "11"]);
    for name in ["results.csv", "summary.csv", "weights.csv", "ledger.json"] {
        assert_eq!(fs::read(a.join(name)).unwrap(), fs::read(b.join(name)).unwrap(), "{name}");
    }
    let results = fs::read_to_string(a.join("results.csv")).unwrap();
    assert!(results.starts_with("# threshflex ") && results.contains("seed=11"));
    assert_eq!(results.lines().nth(1), Some("scenario,replicate,method,measure,value"));
    let c = dir.path().join("c");
    ok(&["simulate", "--config", p(&cfg), "--out", p(&c), "--seed", "12"]);
    assert_ne!(fs::read(a.join("results.csv")).unwrap(), fs::read(c.join("results.csv")).unwrap());
}

#[test]
fn contaminate_respects_alpha() {
    let dir = tempfile::tempdir().unwrap();
    let m = synth_correlation(10, 2, 0.5, &mut seed::rng(1, &[])).unwrap();
    let input = dir.path().join("m.csv");
    threshflex::io::write_matrix_csv(&input, &m, &threshflex::io::Provenance::new(None, b"")).unwrap();
    let out = dir.path().join("s.csv");
    ok(&["contaminate", "--input", p(&input), "--alpha", "0.3", "--delta", "1", "--out", p(&out), "--seed", "4"]);
    let s = read_matrix_csv(&out).unwrap();
    assert!((&s - &m).amax() <= 0.3);
    assert!(s.diagonal().iter().all(|&d| d == 1.0));
    let zero = dir.path().join("z.csv");
    ok(&["contaminate", "--input", p(&input), "--alpha", "0", "--out", p(&zero)]);
    assert_eq!(read_matrix_csv(&zero).unwrap(), m);
}

#[test]
fn exit_codes_and_error_json() {
    assert_eq!(run(&[]).status.code(), Some(2));
    assert_eq!(run(&["simulate"]).status.code(), Some(2));
    assert_eq!(run(&["cv", "--dataset", "x", "--manifest", "y", "--out", "z"]).status.code(), Some(2));
    assert_eq!(run(&["features", "--manifest", "m", "--out", "o", "--strategy", "nope"]).status.code(), Some(2));

    let dir = tempfile::tempdir().unwrap();
    let missing = dir.path().join("none.json");
    let out = run(&["simulate", "--config", p(&missing), "--out", p(dir.path()), "--error-json"]);
    assert_eq!(out.status.code(), Some(1));
    let err: serde_json::Value = serde_json::from_slice(out.stderr.trim_ascii()).unwrap();
    assert_eq!(err["error"], "io");
    assert!(err["message"].as_str().unwrap().contains("none.json"));

    let out = run(&["fit", "--dataset", p(&missing), "--method", "oracle", "--out", p(dir.path())]);
    assert_eq!(out.status.code(), Some(1));
    assert!(String::from_utf8_lossy(&out.stderr).starts_with("error: "));
}

#[test]
fn simulate_uses_scenario_seed_unless_overridden() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("scenario.json");
    fs::write(&cfg, SCENARIO.replace("\"n_sim\": 6", "\"n_sim\": 2, \"seed\": 31")).unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--config", p(&cfg), "--out", p(&a)]);
    ok(&["simulate", "--config", p(&cfg), "--out", p(&b), "--seed", "31"]);
    let results = fs::read(a.join("results.csv")).unwrap();
    assert!(String::from_utf8_lossy(&results).contains("seed=31"));
    assert_eq!(results, fs::read(b.join("results.csv")).unwrap());
}
