//! `dpt`: run the dual pseudo training pipeline whole or one stage at a time.

use std::path::{Path, PathBuf};
use std::process::ExitCode;
use std::time::Instant;

use clap::{CommandFactory, FromArgMatches, Parser, Subcommand};
use dpt_core::data::write_class_points;
use dpt_core::diffusion::sample;
use dpt_core::error::ErrorCategory;
use dpt_core::pipeline::{
    paths, run_pipeline, run_step, sample_seed, RunConfig, RunContext, RunOptions, Step,
};
use dpt_core::rng::{derive_seed, tags};
use dpt_core::{Error, Result};
use serde_json::{json, Value};

const OUTPUT_ROOT_ENV: &str = "DPT_OUTPUT_ROOT";
const DEFAULT_OUTPUT_ROOT: &str = "runs";

#[derive(Debug, Parser)]
#[command(
    name = "dpt",
    version,
    about = "Dual pseudo training on synthetic mixtures"
)]
struct Cli {
    /// JSON run configuration; built-in defaults when omitted.
    #[arg(long, global = true)]
    config: Option<PathBuf>,

    /// Master seed, overriding the config.
    #[arg(long, global = true)]
    seed: Option<u64>,

    /// Root for run directories (falls back to the config's `output_dir`, then `runs`).
    #[arg(long, global = true, env = OUTPUT_ROOT_ENV)]
    output_root: Option<PathBuf>,

    /// Use this run directory instead of `<root>/<config hash>-seed<seed>`.
    #[arg(long, global = true)]
    run_dir: Option<PathBuf>,

    #[command(subcommand)]
    command: Command,
}

#[derive(Debug, Subcommand)]
enum Command {
    /// Draw the mixture, the labeled/unlabeled split and the held-out set.
    GenData,
    /// Train the self-supervised encoder on all items and the probe on the labeled ones.
    TrainClassifier,
    /// Label every item with the stage-1 probe.
    PseudoLabel,
    /// Train the conditional denoiser on the pseudo-labeled set.
    TrainDiffusion,
    /// Generate K points per class; with --class, write N points of one class instead.
    Sample {
        #[arg(long, requires = "n")]
        class: Option<usize>,
        #[arg(long, requires = "class")]
        n: Option<usize>,
        /// Denoiser checkpoint relative to the run directory.
        #[arg(long, default_value = paths::DENOISER)]
        model: String,
        /// Output CSV for --class sampling.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Retrain the probe on labeled plus generated points.
    RetrainProbe {
        /// Additional K values, e.g. 12,128,256,512,1280.
        #[arg(long, value_delimiter = ',')]
        k_grid: Option<Vec<usize>>,
    },
    /// Relabel, retrain the denoiser, resample and retrain the probe.
    Refine,
    /// Accuracy, per-class precision/recall deltas, Fréchet scores and bookkeeping checks.
    Evaluate {
        #[arg(long, value_delimiter = ',')]
        k_grid: Option<Vec<usize>>,
    },
    /// All stages in order, then the manifest.
    RunPipeline {
        #[arg(long, value_delimiter = ',')]
        k_grid: Option<Vec<usize>>,
        /// Keep steps whose outputs already exist in the run directory.
        #[arg(long)]
        reuse: bool,
    },
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::GenData => "gen-data",
            Command::TrainClassifier => "train-classifier",
            Command::PseudoLabel => "pseudo-label",
            Command::TrainDiffusion => "train-diffusion",
            Command::Sample { .. } => "sample",
            Command::RetrainProbe { .. } => "retrain-probe",
            Command::Refine => "refine",
            Command::Evaluate { .. } => "evaluate",
            Command::RunPipeline { .. } => "run-pipeline",
        }
    }

    fn k_grid(&self) -> Option<&Vec<usize>> {
        match self {
            Command::RetrainProbe { k_grid }
            | Command::Evaluate { k_grid }
            | Command::RunPipeline { k_grid, .. } => k_grid.as_ref(),
            _ => None,
        }
    }
}

fn seed_help() -> String {
    let mut text = String::from(
        "Seeds:\n  Every random stream is a ChaCha8 substream of the master seed, keyed by a fixed tag.\n  \
         mixture and heldout use mixture.seed when set, split uses split.seed when set.\n  \
         Sampling trajectory i of class y uses tag (y << 32 | i) under the diffusion-sample seed.\n\n  tag  stream\n",
    );
    for (name, tag) in tags::TABLE {
        text.push_str(&format!("  {tag:>3}  {name}\n"));
    }
    text.push_str(&format!(
        "\nOutput:\n  Artifacts go to <root>/<first 12 hex chars of the config hash>-seed<seed>.\n  \
         The root comes from --output-root, ${OUTPUT_ROOT_ENV}, the config's output_dir, or ./{DEFAULT_OUTPUT_ROOT}.\n\n\
         Exit codes:\n  0 success, 1 other failure, 2 missing artifact, 3 invalid config, 4 numeric failure.\n"
    ));
    text
}

fn exit_code(category: ErrorCategory) -> u8 {
    match category {
        ErrorCategory::MissingArtifact => 2,
        ErrorCategory::Config => 3,
        ErrorCategory::Numeric => 4,
        ErrorCategory::Other => 1,
    }
}

fn load_config(cli: &Cli) -> Result<RunConfig> {
    let mut cfg = match &cli.config {
        Some(path) => RunConfig::from_path(path)?,
        None => RunConfig::default(),
    };
    if let Some(seed) = cli.seed {
        cfg.seed = seed;
    }
    Ok(cfg)
}

/// The run directory is fixed before `--k-grid` is applied, so a K sweep
/// lands next to the stage-1/2 artifacts it reuses.
fn context(cli: &Cli) -> Result<RunContext> {
    let mut cfg = load_config(cli)?;
    let dir = match &cli.run_dir {
        Some(dir) => dir.clone(),
        None => {
            let root = cli
                .output_root
                .clone()
                .or_else(|| cfg.output_dir.clone())
                .unwrap_or_else(|| PathBuf::from(DEFAULT_OUTPUT_ROOT));
            cfg.run_dir(&root)?
        }
    };
    if let Some(grid) = cli.command.k_grid() {
        cfg.pipeline.k_grid = grid.clone();
    }
    RunContext::new(cfg, dir)
}

fn step_status(ctx: &RunContext, step: Step) -> Result<Value> {
    let summary = run_step(ctx, step)?;
    Ok(json!({ "artifacts": summary.artifacts, "metrics": summary.metrics }))
}

fn sample_class(
    ctx: &RunContext,
    class: usize,
    n: usize,
    model: &str,
    out: Option<&Path>,
) -> Result<Value> {
    let denoiser = ctx.load_denoiser(model)?;
    if class >= denoiser.num_classes() {
        return Err(Error::input(format!(
            "class {class} outside 0..{}",
            denoiser.num_classes()
        )));
    }
    // Same trajectories as the pipeline's S₂ for this class.
    let sched = ctx.cfg.diffusion.schedule()?;
    let guidance = &ctx.cfg.diffusion.guidance;
    let points = sample(
        &denoiser,
        Some(class),
        &sched,
        guidance,
        sample_seed(&ctx.cfg),
        n,
    )?;
    let path = match out {
        Some(p) => p.to_path_buf(),
        None => ctx.path(&format!("samples/class{class}_n{n}.csv")),
    };
    if let Some(parent) = path.parent() {
        std::fs::create_dir_all(parent)?;
    }
    write_class_points(std::fs::File::create(&path)?, class, &points)?;
    Ok(json!({ "class": class, "rows": points.len(), "output": path }))
}

fn execute(cli: &Cli) -> Result<(PathBuf, Value)> {
    let ctx = context(cli)?;
    let status = match &cli.command {
        Command::GenData => step_status(&ctx, Step::GenData)?,
        Command::TrainClassifier => step_status(&ctx, Step::TrainClassifier)?,
        Command::PseudoLabel => step_status(&ctx, Step::PseudoLabel)?,
        Command::TrainDiffusion => step_status(&ctx, Step::TrainDiffusion)?,
        Command::Sample {
            class: Some(c),
            n: Some(n),
            model,
            out,
        } => sample_class(&ctx, *c, *n, model, out.as_deref())?,
        Command::Sample { .. } => step_status(&ctx, Step::Sample)?,
        Command::RetrainProbe { .. } => step_status(&ctx, Step::RetrainProbe)?,
        Command::Refine => step_status(&ctx, Step::Refine)?,
        Command::Evaluate { .. } => step_status(&ctx, Step::Evaluate)?,
        Command::RunPipeline { reuse, .. } => {
            let manifest = run_pipeline(
                &ctx,
                RunOptions {
                    reuse_existing: *reuse,
                },
            )?;
            json!({
                "manifest": ctx.path(paths::MANIFEST),
                "artifacts": manifest.artifacts.len(),
                "checks_passed": manifest.checks_passed,
                "seed": ctx.cfg.seed,
                "sample_seed": derive_seed(ctx.cfg.seed, tags::DIFFUSION_SAMPLE),
            })
        }
    };
    Ok((ctx.dir.clone(), status))
}

fn main() -> ExitCode {
    let matches = Cli::command().after_long_help(seed_help()).get_matches();
    let cli = match Cli::from_arg_matches(&matches) {
        Ok(cli) => cli,
        Err(e) => e.exit(),
    };
    let started = Instant::now();
    match execute(&cli) {
        Ok((dir, detail)) => {
            let status = json!({
                "status": "ok",
                "command": cli.command.name(),
                "run_dir": dir,
                "wall_seconds": started.elapsed().as_secs_f64(),
                "result": detail,
            });
            println!("{status}");
            ExitCode::SUCCESS
        }
        Err(e) => {
            let category = e.category();
            let status = json!({
                "status": "error",
                "command": cli.command.name(),
                "category": category.as_str(),
                "message": e.to_string(),
            });
            println!("{status}");
            eprintln!("dpt {}: {e}", cli.command.name());
            ExitCode::from(exit_code(category))
        }
    }
}
