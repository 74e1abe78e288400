// SPDX-License-Identifier: MIT OR Apache-2.0

use std::collections::BTreeMap;
use std::fs;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use super::export::{
    faithfulness_csv, file_sha256, influence_csv, influence_tables_json, read_text, sha256_hex,
    write_file, FaithfulnessRow,
};
use super::trace::infer_thought_process;
use crate::circuit::{score, select_circuit, Circuit, EdgeScores, FaithfulnessEvaluator, Method};
use crate::error::{Error, Result};
use crate::influence::{self_influence_table, InfluenceOptions, InfluenceTable};
use crate::ioi::{generate, load_jsonl, save_jsonl, IoiExample, Variant, Vocabulary};
use crate::model::{
    mean_logit_diff, train_toy_model, ComputationalGraph, ModelConfig, ModelParams, Objective,
    TrainConfig,
};

/// The training corpus is generated from `seed + TRAIN_SEED_OFFSET`.
pub const TRAIN_SEED_OFFSET: u64 = 1000;

pub const DATASET_FILE: &str = "dataset.jsonl";
pub const TRAIN_DATASET_FILE: &str = "train.jsonl";
pub const MODEL_FILE: &str = "model.ckpt";
pub const TRAIN_REPORT_FILE: &str = "train-report.json";
pub const FAITHFULNESS_FILE: &str = "faithfulness.csv";
pub const MANIFEST_FILE: &str = "run-manifest.json";

pub fn scores_file(method: Method) -> String {
    format!("scores-{method}.json")
}

pub fn circuit_file(method: Method, n: usize) -> String {
    format!("circuit-{method}-{n}.json")
}

pub fn influence_csv_file(method: Method) -> String {
    format!("influence-{method}.csv")
}

pub fn influence_json_file(method: Method) -> String {
    format!("influence-{method}.json")
}

pub fn trace_file(method: Method) -> String {
    format!("trace-{method}.json")
}

/// `30, 40, ..., 100, 200, ..., 1000`.
pub fn default_n_grid() -> Vec<usize> {
    (3..=10)
        .map(|k| 10 * k)
        .chain((2..=10).map(|k| 100 * k))
        .collect()
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stages {
    pub generate: bool,
    pub train: bool,
    pub score: bool,
    pub select: bool,
    pub faithfulness: bool,
    pub influence: bool,
}

impl Default for Stages {
    fn default() -> Self {
        Stages {
            generate: true,
            train: true,
            score: true,
            select: true,
            faithfulness: true,
            influence: true,
        }
    }
}

/// Pipeline stages in execution order.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum Stage {
    Generate,
    Train,
    Score,
    Select,
    Faithfulness,
    Influence,
}

/// A disabled stage is not run; its outputs must already be in `out_dir`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct PipelineConfig {
    pub model: ModelConfig,
    pub dataset_size: usize,
    /// Read the evaluation dataset from this JSONL file instead of generating it.
    pub dataset_in: Option<PathBuf>,
    pub train_size: usize,
    pub seed: u64,
    pub train: TrainConfig,
    pub methods: Vec<Method>,
    pub n_grid: Vec<usize>,
    pub ig_steps: usize,
    /// The dataset is split in order into scoring, evaluation and influence batches.
    pub score_examples: usize,
    pub eval_examples: usize,
    pub influence_examples: usize,
    pub baseline: Variant,
    /// Circuit size used for self-influence.
    pub influence_n: usize,
    pub influence_loss: InfluenceLoss,
    pub influence: InfluenceOptions,
    pub trace_top_k: usize,
    pub out_dir: PathBuf,
    pub stages: Stages,
    /// End the run after this stage.
    pub stop_after: Option<Stage>,
    pub resume: bool,
}

impl Default for PipelineConfig {
    fn default() -> Self {
        PipelineConfig {
            model: ModelConfig::toy(Vocabulary::ioi().len()),
            dataset_size: 1000,
            dataset_in: None,
            train_size: 4000,
            seed: 0,
            train: TrainConfig::default(),
            methods: Method::ALL.to_vec(),
            n_grid: default_n_grid(),
            ig_steps: 5,
            score_examples: 64,
            eval_examples: 100,
            influence_examples: 3,
            baseline: Variant::Corrupted,
            influence_n: 100,
            influence_loss: InfluenceLoss::NegLogitDiff,
            influence: InfluenceOptions::default(),
            trace_top_k: 3,
            out_dir: PathBuf::from("out"),
            stages: Stages::default(),
            stop_after: None,
            resume: false,
        }
    }
}

impl PipelineConfig {
    pub fn from_json(text: &str) -> Result<Self> {
        let cfg: PipelineConfig = serde_json::from_str(text)?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        self.model.validate()?;
        let vocab = Vocabulary::ioi().len();
        if self.model.vocab_size != vocab {
            return Err(Error::Input(format!(
                "model vocabulary {} differs from the IOI vocabulary {vocab}",
                self.model.vocab_size
            )));
        }
        if self.methods.is_empty() {
            return Err(Error::Input("at least one method is required".into()));
        }
        for (i, m) in self.methods.iter().enumerate() {
            if self.methods[..i].contains(m) {
                return Err(Error::Input(format!("method `{m}` listed twice")));
            }
        }
        if self.n_grid.is_empty() || self.n_grid[0] == 0 {
            return Err(Error::Input("n-grid must be nonempty and positive".into()));
        }
        if self.n_grid.windows(2).any(|w| w[0] >= w[1]) {
            return Err(Error::Input("n-grid must be strictly increasing".into()));
        }
        if self.ig_steps == 0 || self.influence_n == 0 || self.trace_top_k == 0 {
            return Err(Error::Input(
                "ig steps, influence circuit size and trace top-k must be positive".into(),
            ));
        }
        if self.score_examples == 0 || self.eval_examples == 0 || self.influence_examples == 0 {
            return Err(Error::Input(
                "every dataset split needs at least one example".into(),
            ));
        }
        let needed = self.score_examples + self.eval_examples + self.influence_examples;
        if self.dataset_in.is_none() && needed > self.dataset_size {
            return Err(Error::Input(format!(
                "splits need {needed} examples but the dataset has {}",
                self.dataset_size
            )));
        }
        if self.train_size == 0 {
            return Err(Error::Input("training corpus is empty".into()));
        }
        if self.baseline == Variant::Clean {
            return Err(Error::Input("baseline must be a corrupted variant".into()));
        }
        if self.influence.damping.is_nan()
            || self.influence.damping < 0.0
            || self.influence.neumann_k == 0
        {
            return Err(Error::Input(
                "damping must be >= 0 and Neumann depth >= 1".into(),
            ));
        }
        Ok(())
    }

    pub fn score_batch<'a>(&self, data: &'a [IoiExample]) -> &'a [IoiExample] {
        &data[..self.score_examples]
    }

    pub fn eval_batch<'a>(&self, data: &'a [IoiExample]) -> &'a [IoiExample] {
        &data[self.score_examples..self.score_examples + self.eval_examples]
    }

    pub fn influence_batch<'a>(&self, data: &'a [IoiExample]) -> &'a [IoiExample] {
        let start = self.score_examples + self.eval_examples;
        &data[start..start + self.influence_examples]
    }
}

/// Per-example loss whose curvature and gradients define self-influence.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum InfluenceLoss {
    /// Cross-entropy toward the indirect object.
    CrossEntropy,
    /// Logit of the distractor minus logit of the indirect object.
    NegLogitDiff,
}

impl InfluenceLoss {
    pub fn objective(self, ex: &IoiExample) -> Objective {
        match self {
            InfluenceLoss::CrossEntropy => Objective::CrossEntropy {
                target: ex.target_id,
            },
            InfluenceLoss::NegLogitDiff => Objective::NegLogitDiff {
                target: ex.target_id,
                distractor: ex.distractor_id,
            },
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct TrainSummary {
    pub losses: Vec<f64>,
    pub clean_logit_diff: f64,
    pub corrupted_logit_diff: f64,
    pub corrupted_hard_logit_diff: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StageStatus {
    Completed,
    Reused,
    Disabled,
    Failed,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    pub status: StageStatus,
    pub fingerprint: String,
    pub outputs: BTreeMap<String, String>,
    pub error: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub config: PipelineConfig,
    pub stages: Vec<StageRecord>,
    /// Every emitted file with its sha256.
    pub files: BTreeMap<String, String>,
}

impl RunManifest {
    pub fn load(dir: impl AsRef<Path>) -> Result<Self> {
        Ok(serde_json::from_str(&read_text(
            dir.as_ref().join(MANIFEST_FILE),
        )?)?)
    }

    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct ReportBundle {
    pub out_dir: PathBuf,
    pub manifest: RunManifest,
}

impl ReportBundle {
    pub fn path(&self, file: &str) -> PathBuf {
        self.out_dir.join(file)
    }

    pub fn files(&self) -> Vec<PathBuf> {
        self.manifest
            .files
            .keys()
            .map(|f| self.out_dir.join(f))
            .collect()
    }
}

struct Runner {
    out: PathBuf,
    resume: bool,
    previous: Option<RunManifest>,
    manifest: RunManifest,
}

impl Runner {
    fn write_manifest(&self) -> Result<()> {
        let text = serde_json::to_string_pretty(&self.manifest)?;
        write_file(self.out.join(MANIFEST_FILE), text.as_bytes())
    }

    fn hashes(&self, files: &[String]) -> Result<BTreeMap<String, String>> {
        files
            .iter()
            .map(|f| Ok((f.clone(), file_sha256(self.out.join(f))?)))
            .collect()
    }

    fn stage<P: Serialize>(
        &mut self,
        name: &str,
        enabled: bool,
        params: &P,
        inputs: &[String],
        outputs: &[String],
        run: impl FnOnce(&Path) -> Result<()>,
    ) -> Result<()> {
        let input_hashes = self.hashes(inputs).map_err(|e| self.fail(name, "", e))?;
        let fingerprint =
            sha256_hex(serde_json::to_string(&(name, params, &input_hashes))?.as_bytes());
        let mut status = StageStatus::Completed;
        if !enabled {
            status = StageStatus::Disabled;
        } else if self.resume && self.reusable(name, &fingerprint) {
            status = StageStatus::Reused;
        } else if let Err(e) = run(&self.out) {
            return Err(self.fail(name, &fingerprint, e));
        }
        let outputs = self
            .hashes(outputs)
            .map_err(|e| self.fail(name, &fingerprint, e))?;
        self.manifest.files.extend(outputs.clone());
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            status,
            fingerprint,
            outputs,
            error: None,
        });
        self.write_manifest()
    }

    fn finish(self) -> ReportBundle {
        ReportBundle {
            out_dir: self.out,
            manifest: self.manifest,
        }
    }

    fn reusable(&self, name: &str, fingerprint: &str) -> bool {
        let Some(prev) = self.previous.as_ref().and_then(|m| m.stage(name)) else {
            return false;
        };
        matches!(prev.status, StageStatus::Completed | StageStatus::Reused)
            && prev.fingerprint == fingerprint
            && prev
                .outputs
                .iter()
                .all(|(f, h)| file_sha256(self.out.join(f)).is_ok_and(|now| &now == h))
    }

    fn fail(&mut self, name: &str, fingerprint: &str, e: Error) -> Error {
        self.manifest.stages.push(StageRecord {
            name: name.into(),
            status: StageStatus::Failed,
            fingerprint: fingerprint.into(),
            outputs: BTreeMap::new(),
            error: Some(e.to_string()),
        });
        let _ = self.write_manifest();
        Error::Stage {
            stage: name.into(),
            source: Box::new(e),
        }
    }
}

fn load_dataset(dir: &Path, file: &str) -> Result<Vec<IoiExample>> {
    load_jsonl(dir.join(file), &Vocabulary::ioi())
}

fn load_scores(dir: &Path, method: Method, graph: &ComputationalGraph) -> Result<EdgeScores> {
    EdgeScores::from_json(&read_text(dir.join(scores_file(method)))?, graph)
}

/// Selects at `min(n, |edges|)` edges while keeping the requested `n` on record.
pub fn select_clamped(
    scores: &EdgeScores,
    n: usize,
    graph: &ComputationalGraph,
) -> Result<Circuit> {
    let mut c = select_circuit(scores, n.min(graph.edges().len()), graph)?;
    c.n_requested = n;
    Ok(c)
}

/// Self-influence tables for `batch` on the clean sentences, one per example.
pub fn influence_tables(
    params: &ModelParams,
    circuit: &Circuit,
    batch: &[IoiExample],
    loss: InfluenceLoss,
    opts: &InfluenceOptions,
) -> Result<Vec<InfluenceTable>> {
    let vocab = Vocabulary::ioi();
    batch
        .iter()
        .map(|ex| {
            self_influence_table(
                params,
                circuit,
                &ex.clean_tokens,
                vocab.words(&ex.clean_tokens)?,
                &loss.objective(ex),
                opts,
            )
        })
        .collect()
}

/// Runs every stage in order, writing artifacts and `run-manifest.json` into
/// `config.out_dir`. With `resume`, a stage whose fingerprint (parameters and
/// input hashes) and output hashes match the previous manifest is skipped.
pub fn run_pipeline(config: &PipelineConfig) -> Result<ReportBundle> {
    config.validate()?;
    let out = config.out_dir.clone();
    fs::create_dir_all(&out).map_err(|e| Error::io(&out, e))?;
    let previous = if config.resume {
        RunManifest::load(&out).ok()
    } else {
        None
    };
    let mut r = Runner {
        out,
        resume: config.resume,
        previous,
        manifest: RunManifest {
            config: config.clone(),
            stages: Vec::new(),
            files: BTreeMap::new(),
        },
    };
    let vocab = Vocabulary::ioi();
    let st = &config.stages;
    let graph = ComputationalGraph::build(&config.model);

    let data_files = [DATASET_FILE.to_string(), TRAIN_DATASET_FILE.to_string()];
    let dataset_in_hash = match &config.dataset_in {
        Some(p) => Some(file_sha256(p).map_err(|e| r.fail("generate", "", e))?),
        None => None,
    };
    r.stage(
        "generate",
        st.generate,
        &(
            config.dataset_size,
            config.train_size,
            config.seed,
            &dataset_in_hash,
        ),
        &[],
        &data_files,
        |dir| {
            let data = match &config.dataset_in {
                Some(p) => {
                    let data = load_jsonl(p, &vocab)?;
                    let needed =
                        config.score_examples + config.eval_examples + config.influence_examples;
                    if data.len() < needed {
                        return Err(Error::Input(format!(
                            "splits need {needed} examples but {} holds {}",
                            p.display(),
                            data.len()
                        )));
                    }
                    data
                }
                None => generate(config.dataset_size, config.seed)?,
            };
            save_jsonl(dir.join(DATASET_FILE), &data, &vocab)?;
            let corpus = generate(
                config.train_size,
                config.seed.wrapping_add(TRAIN_SEED_OFFSET),
            )?;
            save_jsonl(dir.join(TRAIN_DATASET_FILE), &corpus, &vocab)
        },
    )?;
    if config.stop_after == Some(Stage::Generate) {
        return Ok(r.finish());
    }

    let split = (
        config.score_examples,
        config.eval_examples,
        config.influence_examples,
    );
    r.stage(
        "train",
        st.train,
        &(&config.model, &config.train, split),
        &data_files,
        &[MODEL_FILE.to_string(), TRAIN_REPORT_FILE.to_string()],
        |dir| {
            let corpus = load_dataset(dir, TRAIN_DATASET_FILE)?;
            let data = load_dataset(dir, DATASET_FILE)?;
            let (params, report) = train_toy_model(&corpus, &config.model, &config.train)?;
            params.save(dir.join(MODEL_FILE))?;
            let held = config.eval_batch(&data);
            let summary = TrainSummary {
                losses: report.losses,
                clean_logit_diff: mean_logit_diff(&params, held, Variant::Clean)?,
                corrupted_logit_diff: mean_logit_diff(&params, held, Variant::Corrupted)?,
                corrupted_hard_logit_diff: mean_logit_diff(&params, held, Variant::CorruptedHard)?,
            };
            write_file(
                dir.join(TRAIN_REPORT_FILE),
                serde_json::to_string_pretty(&summary)?.as_bytes(),
            )
        },
    )?;

    if config.stop_after == Some(Stage::Train) {
        return Ok(r.finish());
    }

    let model_inputs = [MODEL_FILE.to_string(), DATASET_FILE.to_string()];
    let mut params_cache: Option<ModelParams> = None;
    let mut params = |dir: &Path| -> Result<ModelParams> {
        if params_cache.is_none() {
            params_cache = Some(ModelParams::load(dir.join(MODEL_FILE))?);
        }
        Ok(params_cache.clone().expect("loaded above"))
    };

    for &method in &config.methods {
        r.stage(
            &format!("score:{method}"),
            st.score,
            &(method, config.ig_steps, split),
            &model_inputs,
            &[scores_file(method)],
            |dir| {
                let p = params(dir)?;
                let data = load_dataset(dir, DATASET_FILE)?;
                let s = score(
                    method,
                    &p,
                    &graph,
                    config.score_batch(&data),
                    config.ig_steps,
                )?;
                write_file(dir.join(scores_file(method)), s.to_json(&graph)?.as_bytes())
            },
        )?;
    }

    if config.stop_after == Some(Stage::Score) {
        return Ok(r.finish());
    }

    for &method in &config.methods {
        let mut inputs = model_inputs.to_vec();
        inputs.push(scores_file(method));
        let outputs: Vec<String> = config
            .n_grid
            .iter()
            .map(|&n| circuit_file(method, n))
            .collect();
        r.stage(
            &format!("select:{method}"),
            st.select,
            &(&config.n_grid, config.baseline, st.faithfulness, split),
            &inputs,
            &outputs,
            |dir| {
                let p = params(dir)?;
                let data = load_dataset(dir, DATASET_FILE)?;
                let scores = load_scores(dir, method, &graph)?;
                let evaluator = if st.faithfulness {
                    Some(FaithfulnessEvaluator::new(
                        &p,
                        &graph,
                        config.eval_batch(&data),
                        config.baseline,
                    )?)
                } else {
                    None
                };
                for &n in &config.n_grid {
                    let mut c = select_clamped(&scores, n, &graph)?;
                    if let Some(ev) = &evaluator {
                        let f = ev.evaluate(&c)?;
                        c.faithfulness_raw = Some(f.raw);
                        c.faithfulness_normalized = Some(f.normalized);
                    }
                    write_file(dir.join(circuit_file(method, n)), c.to_json()?.as_bytes())?;
                }
                Ok(())
            },
        )?;
    }

    if config.stop_after == Some(Stage::Select) {
        return Ok(r.finish());
    }

    let circuit_files: Vec<String> = config
        .methods
        .iter()
        .flat_map(|&m| config.n_grid.iter().map(move |&n| circuit_file(m, n)))
        .collect();
    r.stage(
        "faithfulness",
        st.faithfulness,
        &(),
        &circuit_files,
        &[FAITHFULNESS_FILE.to_string()],
        |dir| {
            let mut rows = Vec::new();
            for f in &circuit_files {
                let c = Circuit::from_json(&read_text(dir.join(f))?, &graph)?;
                let (Some(raw), Some(normalized), Some(method)) =
                    (c.faithfulness_raw, c.faithfulness_normalized, c.method)
                else {
                    return Err(Error::Input(format!("{f} carries no faithfulness values")));
                };
                rows.push(FaithfulnessRow {
                    method,
                    n_requested: c.n_requested,
                    n_raw_edges: c.raw_edges.len(),
                    n_pruned_edges: c.edges.len(),
                    n_nodes: c.nodes.len(),
                    faithfulness_raw: raw,
                    faithfulness_normalized: normalized,
                });
            }
            write_file(
                dir.join(FAITHFULNESS_FILE),
                faithfulness_csv(&rows)?.as_bytes(),
            )
        },
    )?;

    if config.stop_after == Some(Stage::Faithfulness) {
        return Ok(r.finish());
    }

    for &method in &config.methods {
        let mut inputs = model_inputs.to_vec();
        inputs.push(scores_file(method));
        let outputs = [
            influence_csv_file(method),
            influence_json_file(method),
            trace_file(method),
        ];
        r.stage(
            &format!("influence:{method}"),
            st.influence,
            &(
                &config.influence,
                config.influence_loss,
                config.influence_n,
                config.trace_top_k,
                split,
            ),
            &inputs,
            &outputs,
            |dir| {
                let p = params(dir)?;
                let data = load_dataset(dir, DATASET_FILE)?;
                let scores = load_scores(dir, method, &graph)?;
                let circuit = select_clamped(&scores, config.influence_n, &graph)?;
                let tables = influence_tables(
                    &p,
                    &circuit,
                    config.influence_batch(&data),
                    config.influence_loss,
                    &config.influence,
                )?;
                write_file(
                    dir.join(influence_csv_file(method)),
                    influence_csv(&tables[0])?.as_bytes(),
                )?;
                write_file(
                    dir.join(influence_json_file(method)),
                    influence_tables_json(&tables)?.as_bytes(),
                )?;
                let trace = infer_thought_process(&tables, config.trace_top_k)?;
                write_file(dir.join(trace_file(method)), trace.to_json()?.as_bytes())
            },
        )?;
    }

    Ok(r.finish())
}
