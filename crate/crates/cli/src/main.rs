// SPDX-License-Identifier: MIT OR Apache-2.0

use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::{Context, Result};
use circuitscope::circuit::Method;
use circuitscope::ioi::Variant;
use circuitscope::report::{run_pipeline, PipelineConfig, Stage, DATASET_FILE};
use clap::{Args, Parser, Subcommand};

/// Circuit discovery and layer-wise self-influence on a toy IOI transformer.
#[derive(Parser, Debug)]
#[command(name = "circuitscope", version)]
struct Cli {
    #[command(subcommand)]
    command: Command,
    #[command(flatten)]
    global: Global,
}

#[derive(Subcommand, Debug, Clone, Copy)]
enum Command {
    /// Write the evaluation dataset and the training corpus.
    Generate,
    /// Train the toy model (runs earlier stages if their outputs are stale).
    Train,
    /// Score every graph edge with each method.
    Score,
    /// Select circuits over the n-grid.
    Select,
    /// Aggregate faithfulness.csv.
    Faithfulness,
    /// Compute self-influence tables and thought-process traces.
    Influence,
    /// Run every stage.
    Pipeline,
}

impl Command {
    fn stop_after(self) -> Option<Stage> {
        match self {
            Command::Generate => Some(Stage::Generate),
            Command::Train => Some(Stage::Train),
            Command::Score => Some(Stage::Score),
            Command::Select => Some(Stage::Select),
            Command::Faithfulness => Some(Stage::Faithfulness),
            Command::Influence | Command::Pipeline => None,
        }
    }
}

#[derive(Args, Debug)]
struct Global {
    /// JSON file mirroring the pipeline configuration; flags override it.
    #[arg(long, global = true)]
    config: Option<PathBuf>,
    #[arg(long, global = true)]
    seed: Option<u64>,
    /// Output directory.
    #[arg(long, global = true)]
    out: Option<PathBuf>,
    /// Comma-separated subset of eap, eap-ig, eap-ig-kl.
    #[arg(long, global = true, value_delimiter = ',')]
    methods: Option<Vec<Method>>,
    /// Comma-separated, strictly increasing circuit sizes.
    #[arg(long, global = true, value_delimiter = ',')]
    n_grid: Option<Vec<usize>>,
    #[arg(long, global = true)]
    ig_steps: Option<usize>,
    #[arg(long, global = true)]
    damping: Option<f64>,
    #[arg(long, global = true)]
    neumann_k: Option<usize>,
    /// Reuse stages whose fingerprint and output hashes are unchanged.
    #[arg(long, global = true)]
    resume: bool,
    /// Patch non-circuit edges from the corrupted-hard sentences.
    #[arg(long, global = true)]
    corrupted_hard: bool,
    /// Read the evaluation dataset from this JSONL file.
    #[arg(long, global = true)]
    dataset_in: Option<PathBuf>,
    /// Copy the evaluation dataset to this path after the run.
    #[arg(long, global = true)]
    dataset_out: Option<PathBuf>,
}

fn build_config(cli: &Cli) -> Result<PipelineConfig> {
    let g = &cli.global;
    let mut cfg = match &g.config {
        Some(path) => {
            let text = std::fs::read_to_string(path)
                .with_context(|| format!("reading config {}", path.display()))?;
            PipelineConfig::from_json(&text)?
        }
        None => PipelineConfig::default(),
    };
    if let Some(s) = g.seed {
        cfg.seed = s;
    }
    if let Some(o) = &g.out {
        cfg.out_dir = o.clone();
    }
    if let Some(m) = &g.methods {
        cfg.methods = m.clone();
    }
    if let Some(n) = &g.n_grid {
        cfg.n_grid = n.clone();
    }
    if let Some(m) = g.ig_steps {
        cfg.ig_steps = m;
    }
    if let Some(d) = g.damping {
        cfg.influence.damping = d;
    }
    if let Some(k) = g.neumann_k {
        cfg.influence.neumann_k = k;
    }
    if g.corrupted_hard {
        cfg.baseline = Variant::CorruptedHard;
    }
    if let Some(p) = &g.dataset_in {
        cfg.dataset_in = Some(p.clone());
    }
    cfg.stop_after = cli.command.stop_after();
    // Single-stage commands build on outputs of earlier invocations.
    cfg.resume = g.resume || cfg.stop_after.is_some() || matches!(cli.command, Command::Influence);
    cfg.validate()?;
    Ok(cfg)
}

fn run(cli: &Cli) -> Result<()> {
    let cfg = build_config(cli)?;
    let bundle = run_pipeline(&cfg)?;
    for s in &bundle.manifest.stages {
        println!("{:<16} {:?}", s.name, s.status);
    }
    if let Some(dest) = &cli.global.dataset_out {
        let src = bundle.path(DATASET_FILE);
        std::fs::copy(&src, dest)
            .with_context(|| format!("copying {} to {}", src.display(), dest.display()))?;
    }
    println!("outputs in {}", bundle.out_dir.display());
    Ok(())
}

fn main() -> ExitCode {
    let cli = Cli::parse();
    match run(&cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::FAILURE
        }
    }
}
