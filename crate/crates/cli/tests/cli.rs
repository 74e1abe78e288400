// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

use circuitscope::ioi::Vocabulary;
use circuitscope::model::{ModelConfig, TrainConfig};
use circuitscope::report::{PipelineConfig, RunManifest, StageStatus};

fn tiny_config(dir: &Path) -> PathBuf {
    let cfg = PipelineConfig {
        model: ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 8,
            vocab_size: Vocabulary::ioi().len(),
            max_seq_len: 20,
        },
        dataset_size: 30,
        train_size: 20,
        train: TrainConfig {
            steps: 5,
            batch_size: 4,
            ..TrainConfig::default()
        },
        n_grid: vec![5, 20],
        ig_steps: 2,
        score_examples: 6,
        eval_examples: 6,
        influence_examples: 1,
        influence_n: 15,
        ..PipelineConfig::default()
    };
    let path = dir.join("config.json");
    fs::write(&path, serde_json::to_string_pretty(&cfg).unwrap()).unwrap();
    path
}

fn cli(args: &[&str], config: &Path, out: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_circuitscope"))
        .args(args)
        .arg("--config")
        .arg(config)
        .arg("--out")
        .arg(out)
        .output()
        .unwrap()
}

fn ok(o: &Output) {
    assert!(
        o.status.success(),
        "stdout:\n{}\nstderr:\n{}",
        String::from_utf8_lossy(&o.stdout),
        String::from_utf8_lossy(&o.stderr)
    );
}

#[test]
fn stage_commands_build_on_each_other() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    let copy = dir.path().join("copy.jsonl");

    let o = cli(
        &["generate", "--dataset-out", copy.to_str().unwrap()],
        &cfg,
        &out,
    );
    ok(&o);
    assert_eq!(
        fs::read(&copy).unwrap(),
        fs::read(out.join("dataset.jsonl")).unwrap()
    );
    assert!(!out.join("model.ckpt").exists());

    ok(&cli(&["train"], &cfg, &out));
    assert!(out.join("model.ckpt").exists());

    ok(&cli(
        &["select", "--methods", "eap", "--n-grid", "5"],
        &cfg,
        &out,
    ));
    let manifest = RunManifest::load(&out).unwrap();
    assert_eq!(
        manifest.stage("generate").unwrap().status,
        StageStatus::Reused
    );
    assert_eq!(manifest.stage("train").unwrap().status, StageStatus::Reused);
    assert_eq!(
        manifest.stage("select:eap").unwrap().status,
        StageStatus::Completed
    );
    assert!(manifest.stage("faithfulness").is_none());
    let circuit = fs::read_to_string(out.join("circuit-eap-5.json")).unwrap();
    let json: serde_json::Value = serde_json::from_str(&circuit).unwrap();
    let nodes = json["nodes"].as_array().unwrap();
    assert_eq!(nodes.first().unwrap(), "input");
    assert_eq!(nodes.last().unwrap(), "logits");

    ok(&cli(
        &["influence", "--methods", "eap", "--n-grid", "5"],
        &cfg,
        &out,
    ));
    for f in [
        "faithfulness.csv",
        "influence-eap.csv",
        "influence-eap.json",
        "trace-eap.json",
    ] {
        assert!(out.join(f).exists(), "{f}");
    }
    let csv = fs::read_to_string(out.join("influence-eap.csv")).unwrap();
    assert!(csv.starts_with("token,L0,L1\n"));
}

#[test]
fn pipeline_reruns_are_byte_identical_and_accept_a_dataset_file() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let (a, b) = (dir.path().join("a"), dir.path().join("b"));
    let flags = [
        "pipeline",
        "--methods",
        "eap,eap-ig",
        "--n-grid",
        "5,20",
        "--seed",
        "3",
    ];
    ok(&cli(&flags, &cfg, &a));
    ok(&cli(&flags, &cfg, &b));
    for f in [
        "faithfulness.csv",
        "influence-eap.csv",
        "influence-eap-ig.csv",
        "scores-eap.json",
    ] {
        assert_eq!(
            fs::read(a.join(f)).unwrap(),
            fs::read(b.join(f)).unwrap(),
            "{f}"
        );
    }
    let rows = fs::read_to_string(a.join("faithfulness.csv")).unwrap();
    assert_eq!(rows.lines().count(), 1 + 2 * 2);

    let c = dir.path().join("c");
    let data = a.join("dataset.jsonl");
    let o = cli(
        &[
            "generate",
            "--seed",
            "99",
            "--dataset-in",
            data.to_str().unwrap(),
        ],
        &cfg,
        &c,
    );
    ok(&o);
    assert_eq!(
        fs::read(c.join("dataset.jsonl")).unwrap(),
        fs::read(&data).unwrap()
    );
}

#[test]
fn invalid_input_exits_nonzero() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny_config(dir.path());
    let out = dir.path().join("out");
    for args in [
        &["pipeline", "--n-grid", "20,10"][..],
        &["pipeline", "--methods", "eap,nope"][..],
        &["score", "--neumann-k", "0"][..],
    ] {
        let o = cli(args, &cfg, &out);
        assert!(!o.status.success(), "{args:?} should fail");
        assert!(!o.stderr.is_empty());
    }
    let o = cli(&["generate"], &dir.path().join("missing.json"), &out);
    assert!(!o.status.success());
}
