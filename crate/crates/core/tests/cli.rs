use std::path::{Path, PathBuf};
use std::process::Command;

use survfuse::cli::config::{ModelKind, RunConfig};
use survfuse::cli::pipeline::{cross_validate, load_model, read_table};
use survfuse::cli::{run, sweep};
use survfuse::ensemble::read_risks;
use survfuse::mtlr::predict_survival_curve;
use survfuse::survival::SurvivalRecord;

fn fixture(name: &str) -> String {
    format!("{}/tests/fixtures/{name}", env!("CARGO_MANIFEST_DIR"))
}

fn s(p: &Path) -> String {
    p.to_str().unwrap().to_string()
}

fn ok(args: &[&str]) {
    let mut full = vec!["survfuse"];
    full.extend_from_slice(args);
    assert_eq!(run(full), 0, "survfuse {}", args.join(" "));
}

fn code(args: &[&str]) -> i32 {
    let mut full = vec!["survfuse"];
    full.extend_from_slice(args);
    run(full)
}

fn json(path: impl AsRef<Path>) -> serde_json::Value {
    serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap()
}

fn csv_rows(path: impl AsRef<Path>) -> Vec<Vec<String>> {
    let mut r = csv::Reader::from_path(path).unwrap();
    r.records()
        .map(|x| x.unwrap().iter().map(String::from).collect())
        .collect()
}

fn tabular_args(extra: &[&str]) -> Vec<String> {
    let mut v: Vec<String> = extra.iter().map(|x| x.to_string()).collect();
    v.extend([
        "--ehr".into(),
        fixture("ehr.csv"),
        "--schema".into(),
        fixture("schema.json"),
    ]);
    v
}

fn ok_owned(args: Vec<String>) {
    let refs: Vec<&str> = args.iter().map(String::as_str).collect();
    ok(&refs);
}

#[test]
fn cox_training_reports_convergence_and_reproduces_from_resolved_config() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().join("cox");
    ok_owned(tabular_args(&[
        "train",
        "--model",
        "cox",
        "--out",
        &s(&out),
    ]));
    let metrics = json(out.join("metrics.json"));
    assert_eq!(metrics["converged"], true);
    assert!(metrics["c_index"].as_f64().unwrap() > 0.6);
    assert_eq!(metrics["n"], 60);

    let resolved = out.join("resolved_config.json");
    let again = dir.path().join("again");
    ok(&["train", "--config", &s(&resolved), "--out", &s(&again)]);
    assert_eq!(
        std::fs::read(out.join("cox.json")).unwrap(),
        std::fs::read(again.join("cox.json")).unwrap()
    );
}

#[test]
fn ingest_writes_encoding_and_report() {
    let dir = tempfile::tempdir().unwrap();
    ok_owned(tabular_args(&[
        "ingest",
        "--out",
        &s(dir.path()),
        "--policy",
        "drop",
    ]));
    let report = json(dir.path().join("ingest_report.json"));
    assert_eq!(report["rows"], 60);
    assert_eq!(report["dropped_columns"], serde_json::json!(["HPV"]));
    let records = csv_rows(dir.path().join("records.csv"));
    assert_eq!(records.len(), 60);
    assert_eq!(records[0].len(), 3 + 3);
}

#[test]
fn predict_round_trips_ids_and_evaluate_matches_training_metrics() {
    let dir = tempfile::tempdir().unwrap();
    let model = dir.path().join("mtlr");
    ok_owned(tabular_args(&[
        "train",
        "--model",
        "mtlr",
        "--epochs",
        "20",
        "--out",
        &s(&model),
    ]));
    let pred = dir.path().join("pred");
    ok_owned(tabular_args(&[
        "predict",
        "--model",
        &s(&model),
        "--out",
        &s(&pred),
    ]));
    let risks = read_risks(pred.join("risks.csv")).unwrap();
    let ids: Vec<String> = csv_rows(fixture("ehr.csv"))
        .into_iter()
        .map(|r| r[0].clone())
        .collect();
    assert_eq!(
        risks
            .iter()
            .map(|r| r.patient_id.clone())
            .collect::<Vec<_>>(),
        ids
    );
    assert_eq!(risks, read_risks(model.join("risks.csv")).unwrap());

    let eval = dir.path().join("eval");
    ok(&[
        "evaluate",
        "--risks",
        &s(&pred.join("risks.csv")),
        "--outcomes",
        &fixture("ehr.csv"),
        "--out",
        &s(&eval),
    ]);
    assert_eq!(
        json(eval.join("evaluation.json"))["c_index"],
        json(model.join("metrics.json"))["c_index"]
    );
    assert_eq!(json(model.join("metrics.json"))["model"], "mtlr");
    assert_eq!(csv_rows(model.join("loss.csv")).len(), 20);
}

/// Pair enumeration: `i` precedes `j` when `t_i < t_j` and `i` had the event.
fn brute_force_c(times: &[f64], events: &[bool], risks: &[f64]) -> (f64, u64) {
    let (mut num, mut pairs) = (0.0, 0u64);
    for i in 0..times.len() {
        for j in 0..times.len() {
            if events[i] && times[i] < times[j] {
                pairs += 1;
                num += if risks[i] > risks[j] {
                    1.0
                } else if risks[i] == risks[j] {
                    0.5
                } else {
                    0.0
                };
            }
        }
    }
    (num / pairs as f64, pairs)
}

#[test]
fn evaluate_matches_pair_enumeration_and_perfect_ranking() {
    let dir = tempfile::tempdir().unwrap();
    ok(&[
        "evaluate",
        "--risks",
        &fixture("eval25_risks.csv"),
        "--outcomes",
        &fixture("eval25_outcomes.csv"),
        "--out",
        &s(dir.path()),
    ]);
    let outcomes = csv_rows(fixture("eval25_outcomes.csv"));
    let risks = csv_rows(fixture("eval25_risks.csv"));
    let t: Vec<f64> = outcomes.iter().map(|r| r[1].parse().unwrap()).collect();
    let e: Vec<bool> = outcomes.iter().map(|r| r[2] == "1").collect();
    let r: Vec<f64> = risks.iter().map(|r| r[1].parse().unwrap()).collect();
    let (c, pairs) = brute_force_c(&t, &e, &r);
    let report = json(dir.path().join("evaluation.json"));
    assert_eq!(report["c_index"].as_f64().unwrap(), c);
    assert_eq!(report["comparable_pairs"].as_u64().unwrap(), pairs);

    // Risk = -time ranks every comparable pair correctly.
    let perfect = dir.path().join("perfect.csv");
    let mut text = String::from("PatientID,Risk\n");
    for (row, time) in outcomes.iter().zip(&t) {
        text.push_str(&format!("{},{}\n", row[0], -time));
    }
    std::fs::write(&perfect, text).unwrap();
    let out = dir.path().join("p");
    ok(&[
        "evaluate",
        "--risks",
        &s(&perfect),
        "--outcomes",
        &fixture("eval25_outcomes.csv"),
        "--out",
        &s(&out),
    ]);
    assert_eq!(json(out.join("evaluation.json"))["c_index"], 1.0);
}

#[test]
fn exit_codes_follow_error_class() {
    let dir = tempfile::tempdir().unwrap();
    let out = s(dir.path());
    let bin = env!("CARGO_BIN_EXE_survfuse");
    let o = Command::new(bin)
        .args(["train", "--model", "random-forest", "--out", &out])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"model":"cox","epochs":3}"#).unwrap();
    let o = Command::new(bin)
        .args(["train", "--config", &s(&cfg)])
        .output()
        .unwrap();
    assert_eq!(o.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&o.stderr).contains("Usage"));

    let missing = dir.path().join("nope.csv");
    assert_eq!(
        code(&[
            "train",
            "--ehr",
            &s(&missing),
            "--schema",
            &fixture("schema.json"),
            "--out",
            &out
        ]),
        3
    );

    // A single patient has no comparable pair.
    let risks = dir.path().join("one.csv");
    std::fs::write(&risks, "PatientID,Risk\nE00,1\n").unwrap();
    let outcomes = dir.path().join("one_outcome.csv");
    std::fs::write(&outcomes, "PatientID,Time,Event\nE00,3,1\n").unwrap();
    assert_eq!(
        code(&[
            "evaluate",
            "--risks",
            &s(&risks),
            "--outcomes",
            &s(&outcomes),
            "--out",
            &out
        ]),
        5
    );
}

#[test]
fn deep_fusion_desk_two_epochs_writes_checkpoint_and_trace() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    let cfg = dir.path().join("sim.json");
    std::fs::write(
        &cfg,
        r#"{"simulate":{"n":12,"beta_true":[1.0,0.5],"volumes":{"shape":[16,24,24]}},"fusion":{"train":{"batch_size":4}}}"#,
    )
    .unwrap();
    ok(&[
        "simulate",
        "--config",
        &s(&cfg),
        "--seed",
        "3",
        "--out",
        &s(&data),
    ]);
    let model = dir.path().join("fusion");
    ok(&[
        "train",
        "--config",
        &s(&cfg),
        "--model",
        "deep-fusion-v2",
        "--epochs",
        "2",
        "--ehr",
        &s(&data.join("ehr.csv")),
        "--schema",
        &s(&data.join("schema.json")),
        "--volumes",
        &s(&data.join("volumes")),
        "--bbox",
        &s(&data.join("bbox.csv")),
        "--out",
        &s(&model),
    ]);
    assert_eq!(csv_rows(model.join("loss.csv")).len(), 2);
    for f in [
        "fusion.json",
        "fusion.bin",
        "fusion.config.json",
        "model.json",
    ] {
        assert!(model.join(f).exists(), "{f}");
    }
    let pred = dir.path().join("pred");
    ok(&[
        "predict",
        "--model",
        &s(&model),
        "--ehr",
        &s(&data.join("ehr.csv")),
        "--volumes",
        &s(&data.join("volumes")),
        "--bbox",
        &s(&data.join("bbox.csv")),
        "--out",
        &s(&pred),
    ]);
    assert_eq!(
        read_risks(pred.join("risks.csv")).unwrap(),
        read_risks(model.join("risks.csv")).unwrap()
    );
}

fn strong_signal(dir: &Path) -> PathBuf {
    let data = dir.join("strong");
    let cfg = dir.join("strong.json");
    std::fs::write(
        &cfg,
        r#"{"simulate":{"n":150,"beta_true":[2.0,-1.0],"censored_fraction":0.2}}"#,
    )
    .unwrap();
    ok(&[
        "simulate",
        "--config",
        &s(&cfg),
        "--seed",
        "5",
        "--out",
        &s(&data),
    ]);
    data
}

fn sweep_config(data: &Path, out: &Path, c_reg: Vec<f64>) -> RunConfig {
    let mut cfg = RunConfig {
        model: ModelKind::Mtlr,
        seed: 11,
        out: out.to_path_buf(),
        ..RunConfig::default()
    };
    cfg.data.ehr = Some(data.join("ehr.csv"));
    cfg.data.schema = Some(data.join("schema.json"));
    cfg.mtlr.epochs = 30;
    cfg.sweep.c_reg = c_reg;
    cfg.sweep.lr = vec![0.05];
    cfg.sweep.folds = 3;
    cfg.resolve()
}

#[test]
fn sweep_ranks_light_regularization_first_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let data = strong_signal(dir.path());
    let cfg = sweep_config(&data, dir.path(), vec![1e6, 0.0]);
    let rows = sweep(&cfg).unwrap();
    assert_eq!(rows[0].c_reg, 0.0, "{rows:?}");
    assert!(rows[0].mean_c_index > rows[1].mean_c_index + 0.05);
    assert_eq!(sweep(&cfg).unwrap(), rows);

    let single = sweep_config(&data, dir.path(), vec![0.5]);
    let row = &sweep(&single).unwrap()[0];
    let (table, schema) = read_table(&single.data, None).unwrap();
    let mut direct = single.clone();
    direct.mtlr.c_reg = 0.5;
    direct.mtlr.lr = 0.05;
    let folds = cross_validate(ModelKind::Mtlr, &direct, &table, &schema, 3).unwrap();
    assert_eq!(row.mean_c_index, folds.iter().sum::<f64>() / 3.0);

    let empty = sweep_config(&data, dir.path(), vec![]);
    assert!(sweep(&empty).is_err());
}

#[test]
fn plots_match_model_curves_and_partial_effects_are_ordered() {
    let dir = tempfile::tempdir().unwrap();
    let data = strong_signal(dir.path());
    let ehr = s(&data.join("ehr.csv"));
    let schema = s(&data.join("schema.json"));
    let mtlr = dir.path().join("mtlr");
    ok(&[
        "train",
        "--model",
        "mtlr",
        "--epochs",
        "10",
        "--ehr",
        &ehr,
        "--schema",
        &schema,
        "--out",
        &s(&mtlr),
    ]);
    let plots = dir.path().join("plots");
    ok(&[
        "plot",
        "--model",
        &s(&mtlr),
        "--ehr",
        &ehr,
        "--out",
        &s(&plots),
    ]);

    let svg = std::fs::read_to_string(plots.join("curves.svg")).unwrap();
    assert!(svg.starts_with("<svg") && svg.trim_end().ends_with("</svg>"));
    assert_eq!(svg.matches("<path ").count(), 5);
    assert_eq!(
        std::fs::read_to_string(plots.join("km.svg"))
            .unwrap()
            .matches("<path ")
            .count(),
        1
    );

    let survfuse::cli::pipeline::TrainedModel::Mtlr(params) = load_model(&mtlr).unwrap() else {
        panic!("expected mtlr");
    };
    let encoded = csv_rows(mtlr.join("risks.csv"));
    let rows = csv_rows(plots.join("curves.csv"));
    let first = &encoded[0][0];
    let cfg: RunConfig = serde_json::from_value(json(mtlr.join("resolved_config.json"))).unwrap();
    let (dataset, _) = survfuse::cli::pipeline::load_dataset(&cfg.data, None, None).unwrap();
    let rec: &SurvivalRecord = dataset
        .records
        .iter()
        .find(|r| &r.patient_id == first)
        .unwrap();
    let curve = predict_survival_curve(&params, &rec.covariates).unwrap();
    let mine: Vec<(f64, f64)> = rows
        .iter()
        .filter(|r| &r[0] == first)
        .map(|r| (r[1].parse().unwrap(), r[2].parse().unwrap()))
        .collect();
    let want: Vec<(f64, f64)> = curve
        .times
        .iter()
        .copied()
        .zip(curve.probabilities.iter().copied())
        .collect();
    assert_eq!(mine, want);

    let cox = dir.path().join("cox");
    ok(&[
        "train",
        "--model",
        "cox",
        "--ehr",
        &ehr,
        "--schema",
        &schema,
        "--out",
        &s(&cox),
    ]);
    let pe = dir.path().join("pe");
    ok(&[
        "plot",
        "--model",
        &s(&cox),
        "--covariate",
        "x1",
        "--ehr",
        &ehr,
        "--out",
        &s(&pe),
    ]);
    let rows = csv_rows(pe.join("partial_effects.csv"));
    let curve = |name: &str| -> Vec<f64> {
        rows.iter()
            .filter(|r| r[0] == name)
            .map(|r| r[2].parse().unwrap())
            .collect()
    };
    let (lo, mid, hi) = (curve("x1=-1"), curve("x1=0"), curve("x1=1"));
    // x1 carries a positive coefficient: higher values survive worse.
    for i in 0..lo.len() {
        assert!(lo[i] >= mid[i] && mid[i] >= hi[i]);
    }
    assert!(lo.last() > hi.last());
    assert_eq!(
        std::fs::read_to_string(pe.join("partial_effects.svg"))
            .unwrap()
            .matches("<path ")
            .count(),
        3
    );
    assert_eq!(
        code(&[
            "plot",
            "--model",
            &s(&cox),
            "--covariate",
            "age",
            "--ehr",
            &ehr,
            "--out",
            &s(&pe)
        ]),
        3
    );
}

#[test]
fn ensemble_of_cox_and_mtlr_trains_and_predicts() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("ens.json");
    std::fs::write(
        &cfg,
        r#"{"model":"ensemble","mtlr":{"epochs":10},"ensemble":{"members":[{"model":"cox"},{"model":"mtlr"}]}}"#,
    )
    .unwrap();
    let out = dir.path().join("ens");
    let mut args = tabular_args(&["train", "--config", &s(&cfg), "--out", &s(&out)]);
    ok_owned(std::mem::take(&mut args));
    assert!(out.join("member0-cox/cox.json").exists());
    assert!(out.join("member1-mtlr/mtlr.json").exists());
    let pred = dir.path().join("pred");
    ok_owned(tabular_args(&[
        "predict",
        "--model",
        &s(&out),
        "--out",
        &s(&pred),
    ]));
    let risks = read_risks(pred.join("risks.csv")).unwrap();
    assert_eq!(risks, read_risks(out.join("risks.csv")).unwrap());
    let mean: f64 = risks.iter().map(|r| r.value).sum::<f64>() / risks.len() as f64;
    assert!(mean.abs() < 1e-12);

    // A member directory predicts on its own.
    let solo = dir.path().join("solo");
    ok_owned(tabular_args(&[
        "predict",
        "--model",
        &s(&out.join("member0-cox")),
        "--out",
        &s(&solo),
    ]));
}
