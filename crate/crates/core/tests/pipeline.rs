// SPDX-License-Identifier: MIT OR Apache-2.0

use std::fs;
use std::path::Path;

use circuitscope::circuit::{Circuit, Method};
use circuitscope::ioi::Vocabulary;
use circuitscope::model::{ComputationalGraph, ModelConfig, TrainConfig};
use circuitscope::report::{
    circuit_file, influence_csv_file, load_influence_csv, parse_faithfulness_csv,
    parse_influence_tables_json, run_pipeline, trace_file, PipelineConfig, RunManifest,
    StageStatus, Stages, ThoughtProcess, FAITHFULNESS_FILE, MANIFEST_FILE,
};

fn tiny(out: &Path) -> PipelineConfig {
    PipelineConfig {
        model: ModelConfig {
            n_layers: 2,
            n_heads: 2,
            d_model: 8,
            d_head: 4,
            d_mlp: 8,
            vocab_size: Vocabulary::ioi().len(),
            max_seq_len: 20,
        },
        dataset_size: 40,
        train_size: 40,
        train: TrainConfig {
            steps: 10,
            batch_size: 4,
            ..TrainConfig::default()
        },
        n_grid: vec![5, 20, 60],
        ig_steps: 2,
        score_examples: 8,
        eval_examples: 8,
        influence_examples: 2,
        influence_n: 20,
        out_dir: out.to_path_buf(),
        ..PipelineConfig::default()
    }
}

fn read(dir: &Path, f: &str) -> Vec<u8> {
    fs::read(dir.join(f)).unwrap()
}

#[test]
fn pipeline_emits_every_artifact_and_resumes() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = tiny(dir.path());
    let bundle = run_pipeline(&cfg).unwrap();
    let graph = ComputationalGraph::build(&cfg.model);
    assert_eq!(graph.edges().len(), 46);

    for f in bundle.files() {
        assert!(f.exists(), "{f:?}");
    }
    let rows =
        parse_faithfulness_csv(&String::from_utf8(read(dir.path(), FAITHFULNESS_FILE)).unwrap())
            .unwrap();
    assert_eq!(rows.len(), cfg.methods.len() * cfg.n_grid.len());
    // n = 60 exceeds the 46 edges and is clamped.
    let last = rows.iter().find(|r| r.n_requested == 60).unwrap();
    assert_eq!(last.n_raw_edges, 46);
    assert!((last.faithfulness_normalized - 1.0).abs() < 1e-9);

    for m in Method::ALL {
        let text = String::from_utf8(read(dir.path(), &circuit_file(m, 20))).unwrap();
        let c = Circuit::from_json(&text, &graph).unwrap();
        assert_eq!(c.nodes.first().unwrap().to_string(), "input");
        assert_eq!(c.nodes.last().unwrap().to_string(), "logits");
        assert!(text.contains("\"faithfulness_normalized\""));

        let table = load_influence_csv(dir.path().join(influence_csv_file(m))).unwrap();
        assert_eq!(table.n_layers, 2);
        let all = parse_influence_tables_json(
            &String::from_utf8(read(dir.path(), &format!("influence-{m}.json"))).unwrap(),
        )
        .unwrap();
        assert_eq!(all.len(), 2);
        assert_eq!(table.tokens, all[0].tokens);
        let trace = ThoughtProcess::from_json(
            &String::from_utf8(read(dir.path(), &trace_file(m))).unwrap(),
        )
        .unwrap();
        assert_eq!(trace.layers.len(), 2);
        assert_eq!(trace.layers[0].top.len(), 3);
    }

    let manifest = RunManifest::load(dir.path()).unwrap();
    assert!(manifest
        .stages
        .iter()
        .all(|s| s.status == StageStatus::Completed));
    assert_eq!(manifest, bundle.manifest);

    // Resume reuses every stage and leaves every hash unchanged.
    let resumed = run_pipeline(&PipelineConfig {
        resume: true,
        ..cfg.clone()
    })
    .unwrap();
    assert!(resumed
        .manifest
        .stages
        .iter()
        .all(|s| s.status == StageStatus::Reused));
    assert_eq!(resumed.manifest.files, bundle.manifest.files);

    // A tampered output forces that stage, and only stages reading it, to rerun.
    let circuit20 = circuit_file(Method::Eap, 20);
    fs::write(dir.path().join(&circuit20), b"{}").unwrap();
    let again = run_pipeline(&PipelineConfig {
        resume: true,
        ..cfg.clone()
    })
    .unwrap();
    let status = |name: &str| again.manifest.stage(name).unwrap().status;
    assert_eq!(status("select:eap"), StageStatus::Completed);
    assert_eq!(status("score:eap"), StageStatus::Reused);
    assert_eq!(status("faithfulness"), StageStatus::Reused);
    assert_eq!(again.manifest.files, bundle.manifest.files);
}

#[test]
fn fresh_runs_are_byte_identical() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let cfg = PipelineConfig {
        methods: vec![Method::Eap],
        n_grid: vec![10],
        stages: Stages {
            influence: false,
            ..Stages::default()
        },
        ..tiny(a.path())
    };
    // Disabled influence outputs are absent, so the run must fail there.
    assert!(run_pipeline(&cfg).is_err());
    let failed = RunManifest::load(a.path()).unwrap();
    let last = failed.stages.last().unwrap();
    assert_eq!(last.name, "influence:eap");
    assert_eq!(last.status, StageStatus::Failed);
    assert!(last.error.is_some());

    let run = |dir: &Path| {
        let mut c = cfg.clone();
        c.out_dir = dir.to_path_buf();
        c.stages.influence = true;
        run_pipeline(&c).unwrap()
    };
    let ra = run(a.path());
    let rb = run(b.path());
    assert_eq!(ra.manifest.files, rb.manifest.files);
    for f in [
        FAITHFULNESS_FILE,
        "influence-eap.csv",
        "circuit-eap-10.json",
    ] {
        assert_eq!(read(a.path(), f), read(b.path(), f), "{f}");
    }
    assert!(a.path().join(MANIFEST_FILE).exists());
}

#[test]
fn rejects_invalid_configs() {
    let dir = tempfile::tempdir().unwrap();
    let base = tiny(dir.path());
    for bad in [
        PipelineConfig {
            n_grid: vec![20, 10],
            ..base.clone()
        },
        PipelineConfig {
            methods: vec![],
            ..base.clone()
        },
        PipelineConfig {
            dataset_size: 10,
            ..base.clone()
        },
    ] {
        assert!(run_pipeline(&bad).is_err());
    }
    let json = serde_json::to_string(&base).unwrap();
    assert_eq!(PipelineConfig::from_json(&json).unwrap(), base);
    assert!(PipelineConfig::from_json(r#"{"methods": ["eap", "eap"]}"#).is_err());
}
