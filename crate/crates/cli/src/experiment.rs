//! The experiment matrix: cells, the resumable run manifest, the worker
//! pool and the aggregated report.

use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::{Arc, Mutex, OnceLock};

use cdcl_core::eval::{MetricsReport, METRICS_SCHEMA_VERSION};
use cdcl_core::synth::{DatasetManifest, GeneratorConfig, Sample};
use serde::{Deserialize, Serialize};

use crate::config::ExperimentConfig;
use crate::error::CliError;
use crate::pipeline::{
    create_dir, eval_run, read_json, run_manifest, train_run, write_json, RunMetrics, RunSpec, TrainOptions,
    METRICS_FILE,
};
use crate::tables;

pub const MANIFEST_FILE: &str = "manifest.json";
pub const REPORT_FILE: &str = "report.json";
pub const CELLS_DIR: &str = "cells";
pub const DATASETS_DIR: &str = "datasets";

/// Label of the full-data subset in reports and table file names.
pub const FULL_DATA: &str = "full_data";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CellStatus {
    Pending,
    Done,
    Failed,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CellEntry {
    pub id: String,
    pub spec: RunSpec,
    pub status: CellStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit_code: Option<i32>,
}

/// `manifest.json` of an experiment directory, rewritten atomically after
/// every cell.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub schema_version: u32,
    pub config_hash: String,
    pub config: ExperimentConfig,
    pub cells: Vec<CellEntry>,
}

pub fn experiment_dir(root: &Path, config_hash: &str) -> PathBuf {
    root.join(format!("experiment-{}", &config_hash[..8]))
}

pub fn cells(cfg: &ExperimentConfig) -> Vec<RunSpec> {
    let mut out = Vec::new();
    for scenario in cfg.subsets() {
        for method in cfg.methods() {
            for seed in cfg.seeds() {
                for fold in cfg.folds_to_run() {
                    out.push(RunSpec {
                        method,
                        seed,
                        fold,
                        scenario,
                    });
                }
            }
        }
    }
    out
}

/// Generator settings of a matrix seed: the seed also fixes the dataset.
pub fn generator_for(cfg: &ExperimentConfig, seed: u64) -> GeneratorConfig {
    GeneratorConfig {
        seed,
        ..cfg.generator.clone()
    }
}

type Dataset = Arc<(DatasetManifest, Vec<Sample>)>;

/// Datasets shared by the workers, generated once per seed.
struct DatasetCache<'a> {
    cfg: &'a ExperimentConfig,
    dir: PathBuf,
    slots: BTreeMap<u64, OnceLock<Result<Dataset, String>>>,
}

impl<'a> DatasetCache<'a> {
    fn new(cfg: &'a ExperimentConfig, dir: PathBuf) -> Self {
        let slots = cfg.seeds().into_iter().map(|s| (s, OnceLock::new())).collect();
        Self { cfg, dir, slots }
    }

    fn get(&self, seed: u64) -> Result<Dataset, CliError> {
        let slot = &self.slots[&seed];
        slot.get_or_init(|| {
            let dir = self.dir.join(format!("s{seed}"));
            crate::pipeline::load_or_generate(&generator_for(self.cfg, seed), &dir)
                .map(Arc::new)
                .map_err(|e| e.to_string())
        })
        .clone()
        .map_err(|message| CliError::config("generator", message))
    }
}

fn run_cell(
    cfg: &ExperimentConfig,
    spec: &RunSpec,
    data: &Dataset,
    cell_dir: &Path,
    resume: bool,
) -> Result<RunMetrics, CliError> {
    let (base, samples) = &**data;
    let manifest = run_manifest(cfg, base, spec.fold, spec.scenario)?;
    let opts = TrainOptions {
        resume,
        stop_after: None,
    };
    let trained = train_run(cfg, spec, &manifest, samples, cell_dir, opts)?;
    eval_run(cfg, spec, &manifest, samples, &trained, cell_dir)
}

#[derive(Debug, Clone)]
pub struct ExperimentSummary {
    pub dir: PathBuf,
    pub total: usize,
    pub failed: usize,
    pub skipped: usize,
}

/// Runs every cell of the matrix on `workers` threads. With `resume`,
/// cells already marked done are skipped and interrupted cells continue
/// from their checkpoints. Failed cells do not stop the others.
pub fn run_experiment(
    cfg: &ExperimentConfig,
    root: &Path,
    workers: usize,
    resume: bool,
) -> Result<ExperimentSummary, CliError> {
    let hash = cfg.config_hash()?;
    let dir = experiment_dir(root, &hash);
    create_dir(&dir.join(CELLS_DIR))?;
    let manifest_path = dir.join(MANIFEST_FILE);

    let previous: Option<RunManifest> = if resume && manifest_path.exists() {
        let m: RunManifest = read_json(&manifest_path)?;
        if m.config_hash != hash {
            return Err(CliError::config(
                "resume",
                "experiment manifest belongs to another configuration",
            ));
        }
        Some(m)
    } else {
        None
    };
    let entries: Vec<CellEntry> = cells(cfg)
        .into_iter()
        .map(|spec| {
            let id = spec.id();
            let done = previous
                .as_ref()
                .is_some_and(|m| m.cells.iter().any(|c| c.id == id && c.status == CellStatus::Done))
                && dir.join(CELLS_DIR).join(&id).join(METRICS_FILE).exists();
            CellEntry {
                id,
                spec,
                status: if done { CellStatus::Done } else { CellStatus::Pending },
                error: None,
                exit_code: None,
            }
        })
        .collect();
    let skipped = entries.iter().filter(|c| c.status == CellStatus::Done).count();
    let manifest = Mutex::new(RunManifest {
        schema_version: METRICS_SCHEMA_VERSION,
        config_hash: hash.clone(),
        config: cfg.clone(),
        cells: entries,
    });
    write_json(&manifest_path, &*manifest.lock().expect("manifest lock"))?;

    let pending: Vec<usize> = {
        let m = manifest.lock().expect("manifest lock");
        (0..m.cells.len())
            .filter(|&i| m.cells[i].status != CellStatus::Done)
            .collect()
    };
    let cache = DatasetCache::new(cfg, dir.join(DATASETS_DIR));
    let next = AtomicUsize::new(0);
    let write_error = Mutex::new(None::<CliError>);
    std::thread::scope(|scope| {
        for _ in 0..workers.max(1).min(pending.len().max(1)) {
            scope.spawn(|| loop {
                let k = next.fetch_add(1, Ordering::SeqCst);
                let Some(&i) = pending.get(k) else { break };
                let (spec, id) = {
                    let m = manifest.lock().expect("manifest lock");
                    (m.cells[i].spec, m.cells[i].id.clone())
                };
                let cell_dir = dir.join(CELLS_DIR).join(&id);
                log::info!("cell {id}: start");
                let result = cache
                    .get(spec.seed)
                    .and_then(|data| run_cell(cfg, &spec, &data, &cell_dir, resume));
                let mut m = manifest.lock().expect("manifest lock");
                match result {
                    Ok(_) => {
                        log::info!("cell {id}: done");
                        m.cells[i].status = CellStatus::Done;
                    }
                    Err(e) => {
                        log::error!("cell {id}: {e}");
                        m.cells[i].status = CellStatus::Failed;
                        m.cells[i].exit_code = Some(e.exit_code());
                        m.cells[i].error = Some(e.to_string());
                    }
                }
                if let Err(e) = write_json(&manifest_path, &*m) {
                    write_error.lock().expect("error lock").get_or_insert(e);
                }
            });
        }
    });
    if let Some(e) = write_error.into_inner().expect("error lock") {
        return Err(e);
    }
    let manifest = manifest.into_inner().expect("manifest lock");
    let failed = manifest.cells.iter().filter(|c| c.status == CellStatus::Failed).count();
    write_report(&dir)?;
    Ok(ExperimentSummary {
        dir,
        total: manifest.cells.len(),
        failed,
        skipped,
    })
}

/// Metrics aggregated over seeds and folds for one data subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SubsetReport {
    pub subset: String,
    pub methods: Vec<MetricsReport>,
}

/// `report.json` of an experiment directory.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ExperimentReport {
    pub schema_version: u32,
    pub config_hash: String,
    pub cells_done: usize,
    pub cells_failed: usize,
    pub subsets: Vec<SubsetReport>,
}

pub fn subset_label(spec: &RunSpec) -> String {
    spec.scenario.map_or_else(|| FULL_DATA.to_string(), |s| s.label())
}

/// Aggregates the finished cells listed in the directory's manifest.
pub fn build_report(dir: &Path) -> Result<ExperimentReport, CliError> {
    let manifest: RunManifest = read_json(&dir.join(MANIFEST_FILE))?;
    let mut order: Vec<String> = Vec::new();
    let mut groups: BTreeMap<String, BTreeMap<String, Vec<BTreeMap<String, f64>>>> = BTreeMap::new();
    let mut method_order: Vec<String> = Vec::new();
    for cell in manifest.cells.iter().filter(|c| c.status == CellStatus::Done) {
        let run: RunMetrics = read_json(&dir.join(CELLS_DIR).join(&cell.id).join(METRICS_FILE))?;
        let subset = subset_label(&cell.spec);
        if !order.contains(&subset) {
            order.push(subset.clone());
        }
        let method = run.method.to_string();
        if !method_order.contains(&method) {
            method_order.push(method.clone());
        }
        groups
            .entry(subset)
            .or_default()
            .entry(method)
            .or_default()
            .push(run.metrics);
    }
    let subsets = order
        .into_iter()
        .map(|subset| {
            let by_method = &groups[&subset];
            let methods = method_order
                .iter()
                .filter_map(|m| {
                    by_method
                        .get(m)
                        .map(|runs| MetricsReport::aggregate(m, &manifest.config_hash, runs))
                })
                .collect();
            SubsetReport { subset, methods }
        })
        .collect();
    let count = |s: CellStatus| manifest.cells.iter().filter(|c| c.status == s).count();
    Ok(ExperimentReport {
        schema_version: METRICS_SCHEMA_VERSION,
        config_hash: manifest.config_hash.clone(),
        cells_done: count(CellStatus::Done),
        cells_failed: count(CellStatus::Failed),
        subsets,
    })
}

/// Writes `report.json` and one aligned-text and CSV table per subset.
pub fn write_report(dir: &Path) -> Result<ExperimentReport, CliError> {
    let report = build_report(dir)?;
    write_json(&dir.join(REPORT_FILE), &report)?;
    for subset in &report.subsets {
        let stem = if subset.subset == FULL_DATA {
            "table".to_string()
        } else {
            format!("table-{}", subset.subset)
        };
        tables::write_tables(dir, &stem, &subset.methods)?;
    }
    Ok(report)
}
