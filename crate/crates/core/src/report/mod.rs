// SPDX-License-Identifier: MIT OR Apache-2.0

//! End-to-end pipeline, artifact formats and the thought-process trace.

mod export;
mod pipeline;
mod trace;

pub use export::{
    export_influence_csv, faithfulness_csv, file_sha256, influence_csv, influence_tables_json,
    load_influence_csv, parse_faithfulness_csv, parse_influence_csv, parse_influence_tables_json,
    sha256_hex, FaithfulnessRow,
};
pub use pipeline::{
    circuit_file, default_n_grid, influence_csv_file, influence_json_file, influence_tables,
    run_pipeline, scores_file, select_clamped, trace_file, InfluenceLoss, PipelineConfig,
    ReportBundle, RunManifest, Stage, StageRecord, StageStatus, Stages, TrainSummary, DATASET_FILE,
    FAITHFULNESS_FILE, MANIFEST_FILE, MODEL_FILE, TRAIN_DATASET_FILE, TRAIN_REPORT_FILE,
    TRAIN_SEED_OFFSET,
};
pub use trace::{
    infer_thought_process, LayerRanking, ThoughtProcess, TokenPeak, TokenScore, TRACE_DESCRIPTION,
};
