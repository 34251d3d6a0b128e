//! The full evaluation applied to one trained model.

use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use crate::error::Result;
use crate::eval::grit::grit;
use crate::eval::kbet::{kbet, KbetConfig};
use crate::eval::knn::{knn_accuracy, KnnConfig};
use crate::eval::moa::{moa_chance_rate, nsc_moa_1nn};
use crate::eval::probe::{linear_probe, ProbeConfig, ProbeOutcome};
use crate::eval::table::EmbeddingTable;
use crate::eval::znorm::znorm_whiten;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EvalConfig {
    pub knn: KnnConfig,
    pub kbet: KbetConfig,
    pub whiten: bool,
    pub probe: ProbeConfig,
}

impl Default for EvalConfig {
    fn default() -> Self {
        Self {
            knn: KnnConfig::default(),
            kbet: KbetConfig::default(),
            whiten: true,
            probe: ProbeConfig::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct EvalOutcome {
    pub metrics: BTreeMap<String, f64>,
    pub warnings: Vec<String>,
}

fn non_controls(t: &EmbeddingTable) -> EmbeddingTable {
    t.filter(|r| !r.is_control)
}

/// Metrics comparing reference rows (`train`) and held-out rows (`test`).
/// Accuracy metrics use non-control rows only; mixing and grit use every
/// row of the respective table. `unseen` lists treatments the model never
/// trained on, for a dedicated held-out accuracy.
pub fn evaluate(
    train: &EmbeddingTable,
    test: &EmbeddingTable,
    cfg: &EvalConfig,
    unseen: Option<&BTreeSet<u32>>,
) -> Result<EvalOutcome> {
    let mut out = EvalOutcome::default();
    let m = &mut out.metrics;
    let (train_nc, test_nc) = (non_controls(train), non_controls(test));

    m.insert("knn_acc".into(), knn_accuracy(&train_nc, &test_nc, cfg.knn)?);
    match linear_probe(&train_nc, &test_nc, cfg.probe)? {
        ProbeOutcome::Accuracy(a) => {
            m.insert("linear_acc".into(), a);
            m.insert("linear_probe_diverged".into(), 0.0);
        }
        ProbeOutcome::Diverged { epoch } => {
            m.insert("linear_probe_diverged".into(), 1.0);
            out.warnings.push(format!("linear probe diverged at epoch {epoch}"));
        }
    }
    m.insert("train_kbet".into(), kbet(train, &cfg.kbet)?.score);
    m.insert("test_kbet".into(), kbet(test, &cfg.kbet)?.score);
    for (name, table) in [("train_grit", train), ("test_grit", test)] {
        let g = grit(table)?;
        if g.excluded > 0 {
            out.warnings.push(format!("{name}: {} rows excluded", g.excluded));
        }
        m.insert(name.into(), g.score);
    }
    let unseen_rows = |t: &EmbeddingTable| unseen.map(|u| t.filter(|r| u.contains(&r.treatment_id)));
    if let Some(q) = unseen_rows(&test_nc).filter(|q| !q.is_empty()) {
        m.insert("unseen_knn_acc".into(), knn_accuracy(&train_nc, &q, cfg.knn)?);
    }

    let moa_table = if cfg.whiten {
        let (zt, zs) = (znorm_whiten(train)?, znorm_whiten(test)?);
        let (zt_nc, zs_nc) = (non_controls(&zt), non_controls(&zs));
        m.insert("znorm_knn_acc".into(), knn_accuracy(&zt_nc, &zs_nc, cfg.knn)?);
        m.insert("train_znorm_kbet".into(), kbet(&zt, &cfg.kbet)?.score);
        m.insert("test_znorm_kbet".into(), kbet(&zs, &cfg.kbet)?.score);
        m.insert("train_znorm_grit".into(), grit(&zt)?.score);
        m.insert("test_znorm_grit".into(), grit(&zs)?.score);
        if let Some(q) = unseen_rows(&zs_nc).filter(|q| !q.is_empty()) {
            m.insert("unseen_znorm_knn_acc".into(), knn_accuracy(&zt_nc, &q, cfg.knn)?);
        }
        zs
    } else {
        test.clone()
    };
    let n_treatments = non_controls(&moa_table)
        .rows()
        .iter()
        .map(|r| r.treatment_id)
        .collect::<BTreeSet<_>>()
        .len();
    if n_treatments >= 2 {
        m.insert("nsc_moa_acc".into(), nsc_moa_1nn(&moa_table)?);
        m.insert("nsc_moa_chance".into(), moa_chance_rate(&moa_table)?);
    }
    Ok(out)
}

/// Keys always present in an evaluation with whitening on.
pub const CORE_METRICS: &[&str] = &[
    "knn_acc",
    "linear_probe_diverged",
    "train_kbet",
    "test_kbet",
    "train_grit",
    "test_grit",
];

pub const WHITENED_METRICS: &[&str] = &[
    "znorm_knn_acc",
    "train_znorm_kbet",
    "test_znorm_kbet",
    "train_znorm_grit",
    "test_znorm_grit",
];

/// Keys present only under some conditions.
pub const OPTIONAL_METRICS: &[&str] = &[
    "linear_acc",
    "unseen_knn_acc",
    "unseen_znorm_knn_acc",
    "nsc_moa_acc",
    "nsc_moa_chance",
];
