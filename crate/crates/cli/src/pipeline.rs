//! One run end to end: dataset, training with checkpoints, evaluation.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use cdcl_core::eval::{evaluate, extract_embeddings, pca2d, EmbeddingTable, Provenance};
use cdcl_core::hash::sha256_hex;
use cdcl_core::ssl::{decode_checkpoint, encode_checkpoint, LogRecord, MethodLabel, RunState, StudentTeacher, Trainer};
use cdcl_core::synth::{
    generate_dataset, read_dataset, read_manifest, scenario_subsample, split_by_batch, write_dataset, DatasetManifest,
    GeneratorConfig, Sample, Scenario, Split,
};
use cdcl_core::views::DatasetIndex;
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;

pub const CHECKPOINT_FILE: &str = "checkpoint.bin";
pub const LOG_FILE: &str = "train_log.jsonl";
pub const RUN_FILE: &str = "run.json";
pub const METRICS_FILE: &str = "metrics.json";
pub const TRAIN_EMBEDDINGS_FILE: &str = "embeddings_train.csv";
pub const TEST_EMBEDDINGS_FILE: &str = "embeddings_test.csv";
pub const PCA_FILE: &str = "pca_test.csv";
pub const NONFINITE_FILE: &str = "nonfinite_dump.json";

/// Version of the per-run `metrics.json` layout.
pub const RUN_METRICS_VERSION: u32 = 1;

/// Writes `bytes` to a sibling temporary file and renames it into place.
pub fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let mut tmp = path.as_os_str().to_owned();
    tmp.push(".tmp");
    let tmp = PathBuf::from(tmp);
    fs::write(&tmp, bytes).map_err(|e| CliError::io(&tmp, e))?;
    fs::rename(&tmp, path).map_err(|e| CliError::io(path, e))
}

pub fn write_json<T: Serialize>(path: &Path, value: &T) -> Result<(), CliError> {
    let mut bytes = serde_json::to_vec_pretty(value)?;
    bytes.push(b'\n');
    write_atomic(path, &bytes)
}

pub fn read_json<T: for<'de> Deserialize<'de>>(path: &Path) -> Result<T, CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn create_dir(dir: &Path) -> Result<(), CliError> {
    fs::create_dir_all(dir).map_err(|e| CliError::io(dir, e))
}

/// Attaches the path to bare I/O errors raised by the core crate.
fn at(path: &Path) -> impl Fn(cdcl_core::Error) -> CliError + '_ {
    move |e| match e {
        cdcl_core::Error::Io(source) => CliError::io(path, source),
        other => other.into(),
    }
}

/// Identifies one training run.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RunSpec {
    pub method: MethodLabel,
    pub seed: u64,
    pub fold: usize,
    pub scenario: Option<Scenario>,
}

impl RunSpec {
    /// Directory name, e.g. `CDCL-s0-f2` or `CDCL-s0-f2-controls_only`.
    pub fn id(&self) -> String {
        let mut id = format!("{}-s{}-f{}", self.method, self.seed, self.fold);
        if let Some(s) = self.scenario {
            id.push('-');
            id.push_str(&s.label());
        }
        id
    }
}

/// Loads the dataset in `dir` if it was generated from `gen`, otherwise
/// generates and writes it.
pub fn load_or_generate(gen: &GeneratorConfig, dir: &Path) -> Result<(DatasetManifest, Vec<Sample>), CliError> {
    if dir.join(cdcl_core::synth::MANIFEST_FILE).exists() {
        let m = read_manifest(dir).map_err(at(dir))?;
        if m.config == *gen {
            return read_dataset(dir).map_err(at(dir));
        }
        log::info!("{}: generator settings changed, regenerating", dir.display());
    }
    let (m, samples) = generate_dataset(gen)?;
    write_dataset(dir, &m, &samples).map_err(at(dir))?;
    Ok((m, samples))
}

/// The dataset manifest with splits and the training subset of one run.
pub fn run_manifest(
    cfg: &ExperimentConfig,
    base: &DatasetManifest,
    fold: usize,
    scenario: Option<Scenario>,
) -> Result<DatasetManifest, CliError> {
    let f = &cfg.folds;
    if fold >= cfg.generator.n_batches {
        return Err(CliError::config(
            "fold",
            format!(
                "fold {fold} must be < generator.n_batches ({})",
                cfg.generator.n_batches
            ),
        ));
    }
    let m = split_by_batch(base, f.n_train, f.n_val, f.n_test, fold)?;
    Ok(match scenario {
        Some(s) => scenario_subsample(&m, s)?,
        None => m,
    })
}

/// Contents of `run.json`, written when training starts.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunRecord {
    pub spec: RunSpec,
    pub config_hash: String,
    pub dataset_hash: String,
    pub total_iters: u64,
}

#[derive(Debug, Clone, Copy, Default)]
pub struct TrainOptions {
    /// Continue from the run directory's checkpoint if there is one.
    pub resume: bool,
    /// Stop (with a checkpoint) once this iteration is reached.
    pub stop_after: Option<u64>,
}

#[derive(Debug, Clone)]
pub struct TrainOutcome {
    pub model: StudentTeacher,
    pub state: RunState,
    pub checkpoint_hash: String,
    pub completed: bool,
}

#[derive(Serialize)]
struct NonFiniteDump<'a> {
    iteration: u64,
    sample_ids: &'a [u64],
    detail: &'a str,
    run: &'a RunSpec,
    config_hash: &'a str,
    last_checkpoint_iteration: u64,
    last_log_record: Option<LogRecord>,
}

fn save_checkpoint(path: &Path, model: &StudentTeacher, state: &RunState) -> Result<String, CliError> {
    let bytes = encode_checkpoint(model, state)?;
    write_atomic(path, &bytes)?;
    Ok(sha256_hex(&bytes))
}

fn load_checkpoint(path: &Path) -> Result<(StudentTeacher, RunState, String), CliError> {
    let bytes = fs::read(path).map_err(|e| CliError::io(path, e))?;
    let (model, state) = decode_checkpoint(&bytes).map_err(at(path))?;
    Ok((model, state, sha256_hex(&bytes)))
}

/// Log records up to and including `iteration`.
fn kept_log(path: &Path, iteration: u64) -> Result<Vec<LogRecord>, CliError> {
    let file = match fs::File::open(path) {
        Ok(f) => f,
        Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(Vec::new()),
        Err(e) => return Err(CliError::io(path, e)),
    };
    let mut out = Vec::new();
    for line in BufReader::new(file).lines() {
        let line = line.map_err(|e| CliError::io(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: LogRecord = serde_json::from_str(&line)?;
        if rec.iter <= iteration {
            out.push(rec);
        }
    }
    Ok(out)
}

/// Trains `spec` into `run_dir`, writing a checkpoint every
/// `train.checkpoint_every` iterations and one log line per report.
pub fn train_run(
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    manifest: &DatasetManifest,
    samples: &[Sample],
    run_dir: &Path,
    opts: TrainOptions,
) -> Result<TrainOutcome, CliError> {
    create_dir(run_dir)?;
    let config_hash = cfg.config_hash()?;
    let record = RunRecord {
        spec: *spec,
        config_hash: config_hash.clone(),
        dataset_hash: manifest.config_hash.clone(),
        total_iters: cfg.train.total_iters,
    };
    let loss = cfg.loss_config_for(spec.method);
    let tc = cfg.train_config(spec.seed);
    let ckpt_path = run_dir.join(CHECKPOINT_FILE);
    let log_path = run_dir.join(LOG_FILE);

    let resumed = if opts.resume && ckpt_path.exists() {
        let previous: RunRecord = read_json(&run_dir.join(RUN_FILE))?;
        if previous != record {
            return Err(CliError::config(
                "resume",
                format!("{} was trained with a different configuration", run_dir.display()),
            ));
        }
        Some(load_checkpoint(&ckpt_path)?)
    } else {
        None
    };
    write_json(&run_dir.join(RUN_FILE), &record)?;

    let (model, state, mut checkpoint_hash) = match resumed {
        Some((model, state, hash)) => {
            log::info!("{}: resuming at iteration {}", spec.id(), state.iteration);
            (model, state, hash)
        }
        None => {
            let model = StudentTeacher::init(&cfg.arch_config(), loss.method, spec.seed)?;
            let state = RunState::new(&model, &loss, &tc)?;
            (model, state, String::new())
        }
    };
    let kept = kept_log(&log_path, state.iteration)?;
    let mut log = BufWriter::new(fs::File::create(&log_path).map_err(|e| CliError::io(&log_path, e))?);
    for rec in &kept {
        writeln!(log, "{}", serde_json::to_string(rec)?).map_err(|e| CliError::io(&log_path, e))?;
    }

    let index = DatasetIndex::training(manifest, samples);
    let mut trainer = Trainer::new(model, state, loss, tc, cfg.augment.clone(), index)?;
    let stop = opts.stop_after.unwrap_or(u64::MAX).min(cfg.train.total_iters);
    let every = cfg.train.checkpoint_every;
    let mut last_ckpt = trainer.state.iteration;
    let mut last_record = kept.last().copied();
    if checkpoint_hash.is_empty() {
        checkpoint_hash = save_checkpoint(&ckpt_path, &trainer.model, &trainer.state)?;
    }
    while trainer.state.iteration < stop {
        let next = ((trainer.state.iteration / every + 1) * every).min(stop);
        let mut io_err = None;
        let result = trainer.run_until(next, |rec| {
            last_record = Some(*rec);
            let line = serde_json::to_string(rec).expect("log records serialize");
            if let Err(e) = writeln!(log, "{line}") {
                io_err.get_or_insert(e);
            }
        });
        if let Some(e) = io_err {
            return Err(CliError::io(&log_path, e));
        }
        log.flush().map_err(|e| CliError::io(&log_path, e))?;
        match result {
            Ok(()) => {}
            Err(cdcl_core::Error::NonFiniteLoss {
                iteration,
                sample_ids,
                detail,
            }) => {
                let dump = run_dir.join(NONFINITE_FILE);
                write_json(
                    &dump,
                    &NonFiniteDump {
                        iteration,
                        sample_ids: &sample_ids,
                        detail: &detail,
                        run: spec,
                        config_hash: &config_hash,
                        last_checkpoint_iteration: last_ckpt,
                        last_log_record: last_record,
                    },
                )?;
                return Err(CliError::NonFiniteLoss { iteration, dump });
            }
            Err(e) => return Err(e.into()),
        }
        checkpoint_hash = save_checkpoint(&ckpt_path, &trainer.model, &trainer.state)?;
        last_ckpt = trainer.state.iteration;
    }
    for w in &trainer.state.warnings {
        log::warn!("{}: {w}", spec.id());
    }
    let completed = trainer.done();
    Ok(TrainOutcome {
        model: trainer.model,
        state: trainer.state,
        checkpoint_hash,
        completed,
    })
}

/// Contents of a run's `metrics.json`.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunMetrics {
    pub schema_version: u32,
    pub method: MethodLabel,
    pub seed: u64,
    pub fold: usize,
    pub scenario: Option<Scenario>,
    pub config_hash: String,
    pub dataset_hash: String,
    pub checkpoint_hash: String,
    pub iterations: u64,
    pub metrics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

/// Reference and held-out embedding tables: every image of the training
/// batches, and every image of the validation and test batches.
pub fn split_tables(
    model: &StudentTeacher,
    manifest: &DatasetManifest,
    samples: &[Sample],
    view_size: (usize, usize),
) -> Result<(EmbeddingTable, EmbeddingTable), CliError> {
    let all: Vec<&Sample> = samples.iter().collect();
    let table = extract_embeddings(model, &all, view_size)?;
    let train_batches: BTreeSet<u32> = manifest.batches_in(Split::Train).into_iter().collect();
    Ok((
        table.filter(|r| train_batches.contains(&r.batch_id)),
        table.filter(|r| !train_batches.contains(&r.batch_id)),
    ))
}

fn write_table(path: &Path, table: &EmbeddingTable) -> Result<(), CliError> {
    let mut buf = Vec::new();
    table.write_csv(&mut buf)?;
    write_atomic(path, &buf)
}

fn write_pca(path: &Path, table: &EmbeddingTable) -> Result<(), CliError> {
    let pca = pca2d(table.features())?;
    let mut w = csv::Writer::from_writer(Vec::new());
    let csv_err = |e: csv::Error| CliError::from(cdcl_core::Error::from(e));
    w.write_record([
        "sample_id",
        "batch_id",
        "treatment_id",
        "is_control",
        "moa_id",
        "pc1",
        "pc2",
    ])
    .map_err(csv_err)?;
    for (i, r) in table.rows().iter().enumerate() {
        let c = pca.coords.row(i);
        w.write_record([
            r.sample_id.to_string(),
            r.batch_id.to_string(),
            r.treatment_id.to_string(),
            u8::from(r.is_control).to_string(),
            r.moa_id.to_string(),
            format!("{:?}", c[0]),
            format!("{:?}", c[1]),
        ])
        .map_err(csv_err)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::io(path, e.into_error()))?;
    write_atomic(path, &bytes)
}

/// Extracts embeddings, computes every metric and writes the evaluation
/// artefacts into `run_dir`.
pub fn eval_run(
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    manifest: &DatasetManifest,
    samples: &[Sample],
    trained: &TrainOutcome,
    run_dir: &Path,
) -> Result<RunMetrics, CliError> {
    let (mut train, mut test) = split_tables(&trained.model, manifest, samples, cfg.augment.output_size)?;
    let provenance = Provenance {
        checkpoint_hash: trained.checkpoint_hash.clone(),
        dataset_hash: manifest.config_hash.clone(),
    };
    train.provenance = provenance.clone();
    test.provenance = provenance;
    write_table(&run_dir.join(TRAIN_EMBEDDINGS_FILE), &train)?;
    write_table(&run_dir.join(TEST_EMBEDDINGS_FILE), &test)?;
    if test.len() >= 2 {
        write_pca(&run_dir.join(PCA_FILE), &test)?;
    }

    let unseen: Option<BTreeSet<u32>> = manifest.train_treatments.as_ref().map(|keep| {
        (0..manifest.config.n_treatments as u32)
            .filter(|t| !keep.contains(t))
            .collect()
    });
    let outcome = evaluate(&train, &test, &cfg.eval, unseen.as_ref())?;
    let mut warnings = trained.state.warnings.clone();
    let c = trained.state.counters;
    if c.pairing_fallbacks > 0 {
        warnings.push(format!("{} same-image pairing fallbacks", c.pairing_fallbacks));
    }
    if c.barlow_constant_columns > 0 {
        warnings.push(format!("{} constant Barlow columns", c.barlow_constant_columns));
    }
    warnings.extend(outcome.warnings);
    let metrics = RunMetrics {
        schema_version: RUN_METRICS_VERSION,
        method: spec.method,
        seed: spec.seed,
        fold: spec.fold,
        scenario: spec.scenario,
        config_hash: cfg.config_hash()?,
        dataset_hash: manifest.config_hash.clone(),
        checkpoint_hash: trained.checkpoint_hash.clone(),
        iterations: trained.state.iteration,
        metrics: outcome.metrics,
        warnings,
    };
    write_json(&run_dir.join(METRICS_FILE), &metrics)?;
    Ok(metrics)
}

/// Loads the final checkpoint of a finished run for evaluation.
pub fn load_trained(run_dir: &Path) -> Result<TrainOutcome, CliError> {
    let (model, state, checkpoint_hash) = load_checkpoint(&run_dir.join(CHECKPOINT_FILE))?;
    let record: RunRecord = read_json(&run_dir.join(RUN_FILE))?;
    let completed = state.iteration >= record.total_iters;
    Ok(TrainOutcome {
        model,
        state,
        checkpoint_hash,
        completed,
    })
}
