//! The subcommands, callable without going through argument parsing.

use std::path::{Path, PathBuf};

use cdcl_core::synth::write_dataset;

use crate::config::{load_config, ExperimentConfig};
use crate::error::CliError;
use crate::experiment::{experiment_dir, run_experiment, write_report, ExperimentReport, ExperimentSummary};
use crate::pipeline::{
    eval_run, load_or_generate, load_trained, run_manifest, train_run, RunMetrics, RunSpec, TrainOptions,
    CHECKPOINT_FILE,
};
use crate::tables::render_text;

pub const DEFAULT_OUT: &str = "cdcl-out";
pub const DATASET_DIR: &str = "dataset";
pub const RUNS_DIR: &str = "runs";

/// Options shared by every subcommand.
#[derive(Debug, Clone, Default)]
pub struct Options {
    pub config: Option<PathBuf>,
    pub seed: Option<u64>,
    pub fold: Option<usize>,
    /// Already resolved against `CDCL_LAB_OUT` by the argument parser.
    pub out: Option<PathBuf>,
    pub workers: usize,
    pub resume: bool,
    pub stop_after: Option<u64>,
}

/// A loaded configuration and the output root it resolves to.
#[derive(Debug, Clone)]
pub struct Context {
    pub cfg: ExperimentConfig,
    pub root: PathBuf,
    pub opts: Options,
}

impl Context {
    pub fn new(opts: &Options) -> Result<Self, CliError> {
        let mut cfg = match &opts.config {
            Some(p) => load_config(p)?,
            None => ExperimentConfig::default(),
        };
        if let Some(seed) = opts.seed {
            cfg.seed = seed;
        }
        let root = opts
            .out
            .clone()
            .or_else(|| cfg.out_dir.clone())
            .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT));
        Ok(Self {
            cfg,
            root,
            opts: opts.clone(),
        })
    }

    pub fn dataset_dir(&self) -> PathBuf {
        self.root.join(DATASET_DIR)
    }

    pub fn spec(&self) -> RunSpec {
        RunSpec {
            method: self.cfg.method,
            seed: self.cfg.seed,
            fold: self.opts.fold.unwrap_or(0),
            scenario: self.cfg.scenario,
        }
    }

    pub fn run_dir(&self, spec: &RunSpec) -> PathBuf {
        self.root.join(RUNS_DIR).join(spec.id())
    }
}

/// Writes the dataset of the configured generator. `--seed` selects the
/// generator seed here.
pub fn generate(ctx: &Context) -> Result<PathBuf, CliError> {
    let mut gen = ctx.cfg.generator.clone();
    if let Some(seed) = ctx.opts.seed {
        gen.seed = seed;
    }
    let dir = ctx.dataset_dir();
    let (m, samples) = cdcl_core::synth::generate_dataset(&gen)?;
    write_dataset(&dir, &m, &samples).map_err(|e| match e {
        cdcl_core::Error::Io(source) => CliError::io(&dir, source),
        other => other.into(),
    })?;
    println!(
        "wrote {} images ({} batches) to {}",
        samples.len(),
        gen.n_batches,
        dir.display()
    );
    Ok(dir)
}

/// Trains one run on the dataset under the output root, generating the
/// dataset first if it is missing.
pub fn train(ctx: &Context) -> Result<PathBuf, CliError> {
    let (base, samples) = load_or_generate(&ctx.cfg.generator, &ctx.dataset_dir())?;
    let spec = ctx.spec();
    let manifest = run_manifest(&ctx.cfg, &base, spec.fold, spec.scenario)?;
    let dir = ctx.run_dir(&spec);
    let opts = TrainOptions {
        resume: ctx.opts.resume,
        stop_after: ctx.opts.stop_after,
    };
    let out = train_run(&ctx.cfg, &spec, &manifest, &samples, &dir, opts)?;
    let status = if out.completed { "finished" } else { "stopped" };
    println!(
        "{}: {status} at iteration {} ({})",
        spec.id(),
        out.state.iteration,
        dir.display()
    );
    Ok(dir)
}

/// Evaluates the run selected by the configuration, `--seed` and `--fold`.
pub fn eval(ctx: &Context) -> Result<RunMetrics, CliError> {
    let spec = ctx.spec();
    let dir = ctx.run_dir(&spec);
    if !dir.join(CHECKPOINT_FILE).exists() {
        return Err(CliError::io(
            &dir.join(CHECKPOINT_FILE),
            std::io::Error::new(std::io::ErrorKind::NotFound, "no checkpoint; run `train` first"),
        ));
    }
    let trained = load_trained(&dir)?;
    if !trained.completed {
        log::warn!(
            "{}: evaluating an unfinished run (iteration {})",
            spec.id(),
            trained.state.iteration
        );
    }
    let (base, samples) = load_or_generate(&ctx.cfg.generator, &ctx.dataset_dir())?;
    let manifest = run_manifest(&ctx.cfg, &base, spec.fold, spec.scenario)?;
    let metrics = eval_run(&ctx.cfg, &spec, &manifest, &samples, &trained, &dir)?;
    for (k, v) in &metrics.metrics {
        println!("{k:24} {v:.4}");
    }
    for w in &metrics.warnings {
        println!("warning: {w}");
    }
    Ok(metrics)
}

pub fn experiment(ctx: &Context) -> Result<ExperimentSummary, CliError> {
    let summary = run_experiment(&ctx.cfg, &ctx.root, ctx.opts.workers, ctx.opts.resume)?;
    println!(
        "{}: {} cells, {} reused, {} failed",
        summary.dir.display(),
        summary.total,
        summary.skipped,
        summary.failed
    );
    if summary.failed > 0 {
        return Err(CliError::CellsFailed {
            failed: summary.failed,
            total: summary.total,
        });
    }
    Ok(summary)
}

/// Re-renders the report of an experiment directory; defaults to the one
/// belonging to the configuration.
pub fn report(ctx: &Context, dir: Option<&Path>) -> Result<ExperimentReport, CliError> {
    let dir = match dir {
        Some(d) => d.to_path_buf(),
        None => experiment_dir(&ctx.root, &ctx.cfg.config_hash()?),
    };
    let report = write_report(&dir)?;
    for subset in &report.subsets {
        println!("[{}]", subset.subset);
        print!("{}", render_text(&subset.methods));
    }
    Ok(report)
}
