use std::path::Path;
use std::process::{Command, Output};

use lsvcmm::selection::SelectedModel;

fn lsvcmm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_lsvcmm")).args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) {
    let out = lsvcmm(args);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
}

fn read(p: impl AsRef<Path>) -> String {
    std::fs::read_to_string(p).unwrap()
}

fn s(p: &Path) -> &str {
    p.to_str().unwrap()
}

#[test]
fn simulate_is_reproducible() {
    let dir = tempfile::tempdir().unwrap();
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    ok(&["simulate", "--scenario", "regular-missing", "--seed", "7", "--out", s(&a)]);
    ok(&["--threads", "2", "simulate", "--scenario", "regular-missing", "--seed", "7", "--out", s(&b)]);
    for f in ["dataset.csv", "truth.csv", "simulation.json"] {
        assert_eq!(read(a.join(f)), read(b.join(f)), "{f}");
    }
    let c = dir.path().join("c");
    ok(&["simulate", "--seed", "8", "--out", s(&c)]);
    assert_ne!(read(a.join("dataset.csv")), read(c.join("dataset.csv")));
    // Without --seed a seed is drawn and recorded.
    let d = dir.path().join("d");
    ok(&["simulate", "--out", s(&d)]);
    let rec: serde_json::Value = serde_json::from_str(&read(d.join("simulation.json"))).unwrap();
    assert!(rec["seed"].is_u64());
}

#[test]
fn fit_and_bootstrap_are_deterministic_across_threads() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--n-subjects", "30", "--seed", "3", "--out", s(&sim)]);
    let data = sim.join("dataset.csv");
    let files = ["coefficients.csv", "path.csv", "model.json", "bands.csv", "pvalues.csv", "bootstrap.json"];
    let out = dir.path().join("fit");
    let mut snapshots = Vec::new();
    for threads in ["1", "3"] {
        ok(&[
            "--threads", threads, "fit", "--input", s(&data), "--covariates", "intercept,group", "--no-intercept",
            "--n-h", "3", "--n-lambda", "8", "--seed", "5", "--out", s(&out),
        ]);
        ok(&["--threads", threads, "bootstrap", "--model", s(&out.join("model.json")), "--n-boot", "100", "--out", s(&out)]);
        snapshots.push(files.map(|f| read(out.join(f))));
    }
    for (k, f) in files.iter().enumerate() {
        assert_eq!(snapshots[0][k], snapshots[1][k], "{f}");
    }
    let path = read(out.join("path.csv"));
    assert_eq!(path.lines().next().unwrap(), "h,lambda,df,ebic,selected");
    assert_eq!(path.lines().count(), 1 + 3 * 8);
    assert_eq!(path.lines().filter(|l| l.ends_with(",true")).count(), 1);

    // p < 0.05 exactly when some entry of the row excludes zero.
    let bands = read(out.join("bands.csv"));
    let pvalues = read(out.join("pvalues.csv"));
    for line in pvalues.lines().skip(1) {
        let f: Vec<&str> = line.split(',').collect();
        let p: f64 = f[1].parse().unwrap();
        let any = bands
            .lines()
            .skip(1)
            .map(|l| l.split(',').collect::<Vec<_>>())
            .filter(|b| b[0] == f[0])
            .any(|b| {
                let (lo, hi): (f64, f64) = (b[3].parse().unwrap(), b[4].parse().unwrap());
                assert_eq!(b[5] == "true", !(lo <= 0.0 && 0.0 <= hi));
                b[5] == "true"
            });
        assert_eq!(p < 0.05, any, "{line}");
    }
}

#[test]
fn model_json_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--n-subjects", "20", "--seed", "4", "--out", s(&sim)]);
    let out = dir.path().join("fit");
    ok(&[
        "fit", "--input", s(&sim.join("dataset.csv")), "--covariates", "intercept,group", "--no-intercept",
        "--h", "0.2", "--n-lambda", "5", "--out", s(&out),
    ]);
    let text = read(out.join("model.json"));
    let value: serde_json::Value = serde_json::from_str(&text).unwrap();
    assert!(value["seed"].is_u64(), "generated seed is recorded");
    assert_eq!(value["config"]["seed"], value["seed"]);
    let model: SelectedModel = serde_json::from_value(value["model"].clone()).unwrap();
    let again = serde_json::to_value(&model).unwrap();
    assert_eq!(again, value["model"]);
    let back: SelectedModel = serde_json::from_value(again).unwrap();
    assert_eq!(back, model);
}

#[test]
fn pointwise_means_on_a_toy_file() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("toy.csv");
    std::fs::write(
        &csv,
        "subject_id,time,response,group\n\
         a,0,1,0\na,1,2,0\nb,1,4,0\nb,0,3,0\n\
         c,0,10,1\nc,1,20,1\nd,0,12,1\nd,1,26,1\n",
    )
    .unwrap();
    let out = dir.path().join("fit");
    ok(&[
        "fit", "--input", s(&csv), "--covariates", "group", "--unpenalized", "intercept,group", "--family",
        "independent", "--h", "0.001", "--seed", "1", "--out", s(&out),
    ]);
    let coef = read(out.join("coefficients.csv"));
    let got: Vec<f64> = coef.lines().skip(1).map(|l| l.split(',').nth(2).unwrap().parse().unwrap()).collect();
    // Group 0 means 2 and 3, differences 11 - 2 and 23 - 3.
    let want = [2.0, 3.0, 9.0, 20.0];
    for (g, w) in got.iter().zip(want) {
        assert!((g - w).abs() < 1e-9, "{coef}");
    }
}

#[test]
fn input_errors_exit_with_code_two() {
    let dir = tempfile::tempdir().unwrap();
    let csv = dir.path().join("d.csv");
    std::fs::write(&csv, "subject_id,time,response,group\na,0,1,0\na,1,oops,0\n").unwrap();
    let out = dir.path().join("o");

    let r = lsvcmm(&["fit", "--input", s(&csv), "--covariates", "nope", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("'nope'"));

    let r = lsvcmm(&["fit", "--input", s(&csv), "--covariates", "group", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&r.stderr).contains("line 3"));

    let cfg = dir.path().join("c.json");
    std::fs::write(&cfg, r#"{"input": "x.csv", "columns": {"covariates": ["group"]}, "bogus": 1}"#).unwrap();
    let r = lsvcmm(&["fit", "--config", s(&cfg)]);
    assert_eq!(r.status.code(), Some(2));

    let r = lsvcmm(&["simulate", "--scenario", "nowhere", "--out", s(&out)]);
    assert_eq!(r.status.code(), Some(2));
}

#[test]
fn config_file_is_overridden_by_flags() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    ok(&["simulate", "--n-subjects", "20", "--seed", "9", "--out", s(&sim)]);
    let cfg = dir.path().join("run.json");
    let body = format!(
        r#"{{"input": "{}", "columns": {{"covariates": ["intercept", "group"], "add_intercept": false}},
            "h_grid": [0.2], "n_lambda": 4, "family": "independent", "seed": 11, "output_dir": "{}"}}"#,
        s(&sim.join("dataset.csv")),
        s(&dir.path().join("unused"))
    );
    std::fs::write(&cfg, body).unwrap();
    let out = dir.path().join("fit");
    ok(&["fit", "--config", s(&cfg), "--n-lambda", "3", "--out", s(&out)]);
    let value: serde_json::Value = serde_json::from_str(&read(out.join("model.json"))).unwrap();
    assert_eq!(value["seed"], 11);
    assert_eq!(value["config"]["n_lambda"], 3);
    assert_eq!(value["config"]["family"], "independent");
    assert_eq!(read(out.join("path.csv")).lines().count(), 1 + 3);
}

#[test]
fn bench_emits_one_row_per_cell() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("bench");
    ok(&["bench", "--axis", "sigma2", "--n-reps", "2", "--n-subjects", "30", "--seed", "1", "--out", s(&out)]);
    let text = read(out.join("results.csv"));
    let rows: Vec<&str> = text.lines().skip(1).collect();
    // Five default sigma2 values, three methods, two replicates.
    assert_eq!(rows.len(), 5 * 3 * 2);
    assert_eq!(
        text.lines().next().unwrap(),
        "method,axis,value,replicate,seed,mae,accuracy,tpr,fdr,error"
    );
    let again = dir.path().join("again");
    ok(&["--threads", "2", "bench", "--axis", "sigma2", "--n-reps", "2", "--n-subjects", "30", "--seed", "1", "--out", s(&again)]);
    assert_eq!(text, read(again.join("results.csv")));
}
