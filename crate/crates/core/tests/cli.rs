use std::path::Path;
use std::process::{Command, Output};

fn bin() -> Command {
    Command::new(env!("CARGO_BIN_EXE_noised-dst"))
}

fn run(args: &[&str]) -> Output {
    bin().args(args).output().expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = run(args);
    assert!(
        out.status.success(),
        "{args:?} failed: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn p(path: &Path) -> &str {
    path.to_str().unwrap()
}

#[test]
fn unknown_command_fails_with_usage() {
    let out = run(&["frobnicate"]);
    assert!(!out.status.success());
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("Usage"), "{err}");
    let out = run(&["evaluate", "--bogus"]);
    assert!(!out.status.success());
    let out = run(&["evaluate"]);
    assert!(!out.status.success());
}

#[test]
fn evaluate_prediction_fixture() {
    let dir = tempfile::tempdir().unwrap();
    let ont = dir.path().join("ontology.json");
    std::fs::write(&ont, r#"{"slots": {"hotel-area": ["north", "south"], "train-day": ["monday"]}}"#).unwrap();
    let pred = dir.path().join("p.jsonl");
    std::fs::write(
        &pred,
        concat!(
            r#"{"dialogue_id":"d1","turn":1,"pred":{"hotel-area":"north"},"gold":{"hotel-area":"north"}}"#,
            "\n",
            r#"{"dialogue_id":"d1","turn":2,"pred":{"hotel-area":"north"},"gold":{"hotel-area":"south","train-day":"monday"}}"#,
            "\n"
        ),
    )
    .unwrap();
    let out = ok(&["evaluate", "--pred", p(&pred), "--ontology", p(&ont)]);
    let v: serde_json::Value = serde_json::from_str(&out).unwrap();
    assert_eq!(v["joint"], 0.5);
    assert_eq!(v["slot"], 0.5);
    assert_eq!(v["per_turn"]["1"], 1.0);
    assert_eq!(v["per_turn"]["2"], 0.0);
    assert_eq!(v["momentum"]["wrong_pairs_total"], 1);
    assert_eq!(v["momentum"]["wrong_pairs_carried"], 1);
    assert_eq!(v["momentum"]["momentum_proportion"], 1.0);

    let m = ok(&["analyze-momentum", "--pred", p(&pred), "--ontology", p(&ont)]);
    let v: serde_json::Value = serde_json::from_str(&m).unwrap();
    assert_eq!(v["gold_pairs_total"], 2);
    assert_eq!(v["gold_pairs_carried"], 0);
}

#[test]
fn end_to_end_small_pipeline() {
    let dir = tempfile::tempdir().unwrap();
    let data = dir.path().join("data");
    ok(&[
        "generate-corpus",
        "--out",
        p(&data),
        "--n-dialogues",
        "16",
        "--n-slots",
        "3",
        "--values-per-slot",
        "3",
        "--seed",
        "4",
    ]);
    for f in ["ontology.json", "corpus.json", "train.json", "val.json", "test.json", "events.json"] {
        assert!(data.join(f).exists(), "{f}");
    }
    let cfg = dir.path().join("config.json");
    std::fs::write(
        &cfg,
        r#"{"epochs": 1, "batch_size": 4, "lr_encoder": 0.001, "lr_heads": 0.001,
            "encoder": {"n_layers": 1, "n_heads": 2, "d_model": 8, "d_ff": 16,
                        "max_len": 128, "dropout": 0.1}}"#,
    )
    .unwrap();
    let ck = dir.path().join("ck");
    let (ont, train, val) = (data.join("ontology.json"), data.join("train.json"), data.join("val.json"));
    let common = [
        "--config",
        p(&cfg),
        "--ontology",
        p(&ont),
        "--train",
        p(&train),
        "--val",
        p(&val),
    ];
    let mut args = vec!["train"];
    args.extend(common);
    args.extend(["--mode", "monet", "--noise-threshold", "0.4", "--temperature", "0.2", "--out", p(&ck)]);
    ok(&args);
    let best = ck.join("best");
    assert!(best.join("manifest.json").exists());
    assert!(ck.join("last/params.bin").exists());
    let manifest: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(best.join("manifest.json")).unwrap()).unwrap();
    assert_eq!(manifest["config"]["noise_threshold"], 0.4);
    assert_eq!(manifest["config"]["temperature"], 0.2);

    let test = data.join("test.json");
    let preds = dir.path().join("preds.jsonl");
    let report = ok(&[
        "evaluate",
        "--checkpoint",
        p(&best),
        "--corpus",
        p(&test),
        "--pred-out",
        p(&preds),
    ]);
    let v: serde_json::Value = serde_json::from_str(&report).unwrap();
    let joint = v["joint"].as_f64().unwrap();
    assert!((0.0..=1.0).contains(&joint));
    assert!(joint <= v["slot"].as_f64().unwrap());
    assert!(std::fs::read_to_string(&preds).unwrap().lines().count() > 0);

    let csv = ok(&[
        "probe-noise",
        "--checkpoint",
        p(&best),
        "--corpus",
        p(&test),
        "--ratios",
        "0,0.3,1.0",
    ]);
    let lines: Vec<&str> = csv.lines().collect();
    assert_eq!(lines[0], "ratio,joint_accuracy,mean_l2_distance");
    assert_eq!(lines.len(), 4);
    assert!(lines[1].ends_with(",0"), "{}", lines[1]);

    ok(&["analyze-momentum", "--checkpoint", p(&best), "--corpus", p(&test)]);

    let corpus: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(&test).unwrap()).unwrap();
    let id = corpus["dialogues"][0]["id"].as_str().unwrap().to_string();
    let ontology: serde_json::Value =
        serde_json::from_str(&std::fs::read_to_string(data.join("ontology.json")).unwrap()).unwrap();
    let slot = ontology["slots"].as_object().unwrap().keys().next().unwrap().clone();
    let att = ok(&[
        "visualize-attention",
        "--checkpoint",
        p(&best),
        "--corpus",
        p(&test),
        "--dialogue",
        &id,
        "--turn",
        "2",
        "--slot",
        &slot,
    ]);
    let v: serde_json::Value = serde_json::from_str(&att).unwrap();
    let scores: Vec<f64> = v["scores"]
        .as_array()
        .unwrap()
        .iter()
        .map(|x| x.as_f64().unwrap())
        .collect();
    assert_eq!(scores.len(), v["tokens"].as_array().unwrap().len());
    assert!((scores.iter().sum::<f64>() - 1.0).abs() < 1e-6);
    assert_eq!(v["slot"], slot.as_str());

    let sweep_out = dir.path().join("sweep.csv");
    let mut args = vec!["sweep-noise-threshold"];
    args.extend(common);
    args.extend(["--thresholds", "0,0.5", "--out", p(&sweep_out)]);
    ok(&args);
    let sweep = std::fs::read_to_string(&sweep_out).unwrap();
    assert_eq!(sweep.lines().count(), 3);
    assert!(sweep.starts_with("threshold,val_joint_accuracy\n0,"));

    let bad = run(&["train", "--ontology", p(&data.join("ontology.json")), "--train", p(&test), "--mode", "bert"]);
    assert!(!bad.status.success());
}
