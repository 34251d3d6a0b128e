//! Grit: replicate similarity z-scored against similarity to controls.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::table::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GritReport {
    pub score: f64,
    /// Rows whose control-correlation spread was below the threshold.
    pub excluded: usize,
    pub scored: usize,
}

const MIN_CONTROL_SPREAD: f64 = 1e-12;

/// Each row centred and scaled to unit norm, so Pearson correlation is a
/// dot product. Constant rows become zero and correlate 0 with everything.
fn standardized_rows(table: &EmbeddingTable) -> Vec<Vec<f64>> {
    (0..table.len())
        .map(|i| {
            let f = table.feature(i);
            let mean = f.iter().sum::<f64>() / f.len() as f64;
            let centered: Vec<f64> = f.iter().map(|v| v - mean).collect();
            let norm = centered.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                centered.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; f.len()]
            }
        })
        .collect()
}

fn corr(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Mean over non-control rows of the mean z-score of replicate
/// correlations, using each row's own correlations to all controls for the
/// mean and (population) standard deviation.
pub fn grit(table: &EmbeddingTable) -> Result<GritReport> {
    let controls: Vec<usize> = (0..table.len()).filter(|&i| table.rows()[i].is_control).collect();
    if controls.len() < 2 {
        return Err(Error::MissingControls(format!(
            "grit needs at least 2 control rows, found {}",
            controls.len()
        )));
    }
    let mut by_treatment: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows().iter().enumerate() {
        if !r.is_control {
            by_treatment.entry(r.treatment_id).or_default().push(i);
        }
    }
    if let Some((t, _)) = by_treatment.iter().find(|(_, idx)| idx.len() < 2) {
        return Err(Error::usage(format!("treatment {t} has fewer than 2 replicates")));
    }
    let z = standardized_rows(table);
    let mut total = 0.0;
    let mut scored = 0usize;
    let mut excluded = 0usize;
    for idx in by_treatment.values() {
        for &i in idx {
            let cs: Vec<f64> = controls.iter().map(|&c| corr(&z[i], &z[c])).collect();
            let mu = cs.iter().sum::<f64>() / cs.len() as f64;
            let sd = (cs.iter().map(|c| (c - mu) * (c - mu)).sum::<f64>() / cs.len() as f64).sqrt();
            if sd < MIN_CONTROL_SPREAD {
                excluded += 1;
                continue;
            }
            let reps: Vec<f64> = idx
                .iter()
                .filter(|&&j| j != i)
                .map(|&j| (corr(&z[i], &z[j]) - mu) / sd)
                .collect();
            total += reps.iter().sum::<f64>() / reps.len() as f64;
            scored += 1;
        }
    }
    if scored == 0 {
        return Err(Error::numeric("grit", "every row was excluded"));
    }
    Ok(GritReport {
        score: total / scored as f64,
        excluded,
        scored,
    })
}

pub fn grit_score(table: &EmbeddingTable) -> Result<f64> {
    Ok(grit(table)?.score)
}
