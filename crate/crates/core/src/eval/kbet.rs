//! k-BET: how often a row's neighbourhood has the global batch mix.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::chi2::chi2_sf;
use crate::eval::knn::{dot, unit_rows};
use crate::eval::table::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Distance {
    Euclidean,
    Cosine,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KbetConfig {
    pub k_fraction: f64,
    pub significance: f64,
    pub distance: Distance,
}

impl Default for KbetConfig {
    fn default() -> Self {
        Self {
            k_fraction: 0.005,
            significance: 0.05,
            distance: Distance::Euclidean,
        }
    }
}

impl KbetConfig {
    pub fn validate(&self) -> Result<()> {
        if !(self.k_fraction > 0.0 && self.k_fraction < 1.0) {
            return Err(Error::config("kbet.k_fraction", "must lie in (0, 1)"));
        }
        if !(self.significance > 0.0 && self.significance < 1.0) {
            return Err(Error::config("kbet.significance", "must lie in (0, 1)"));
        }
        Ok(())
    }

    /// Neighbourhood size for `n` rows over `n_batches` batches.
    pub fn k_for(&self, n: usize, n_batches: usize) -> usize {
        ((self.k_fraction * n as f64).round() as usize).max(n_batches)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct KbetReport {
    pub score: f64,
    pub k: usize,
    pub n_batches: usize,
    /// Batch terms whose expected count had to be floored.
    pub floored_expected: usize,
}

/// Floor on expected counts in the χ² statistic.
const EXPECTED_FLOOR: f64 = 1e-12;

pub fn kbet(table: &EmbeddingTable, cfg: &KbetConfig) -> Result<KbetReport> {
    cfg.validate()?;
    let n = table.len();
    let batches = table.batches();
    let nb = batches.len();
    if nb < 2 {
        return Ok(KbetReport {
            score: 1.0,
            k: 0,
            n_batches: nb,
            floored_expected: 0,
        });
    }
    let k = cfg.k_for(n, nb);
    if k >= n {
        return Err(Error::usage(format!(
            "k-BET neighbourhood of {k} needs more than {n} rows"
        )));
    }
    let slot: BTreeMap<u32, usize> = batches.iter().enumerate().map(|(i, &b)| (b, i)).collect();
    let label: Vec<usize> = table.rows().iter().map(|r| slot[&r.batch_id]).collect();
    let mut props = vec![0.0; nb];
    for &l in &label {
        props[l] += 1.0 / n as f64;
    }
    let unit = (cfg.distance == Distance::Cosine).then(|| unit_rows(table));
    let distance = |i: usize, j: usize| match &unit {
        Some(u) => 1.0 - dot(&u[i], &u[j]),
        None => table
            .feature(i)
            .iter()
            .zip(table.feature(j))
            .map(|(a, b)| (a - b) * (a - b))
            .sum::<f64>(),
    };
    let df = (nb - 1) as u32;
    let mut accepted = 0usize;
    let mut floored = 0usize;
    let mut dists: Vec<(f64, usize)> = Vec::with_capacity(n);
    for i in 0..n {
        dists.clear();
        dists.extend((0..n).filter(|&j| j != i).map(|j| (distance(i, j), j)));
        dists.select_nth_unstable_by(k - 1, |a, b| a.0.total_cmp(&b.0).then(a.1.cmp(&b.1)));
        let mut counts = vec![0.0; nb];
        for &(_, j) in &dists[..k] {
            counts[label[j]] += 1.0;
        }
        let mut stat = 0.0;
        for (obs, p) in counts.iter().zip(&props) {
            let mut exp = k as f64 * p;
            if exp < EXPECTED_FLOOR {
                exp = EXPECTED_FLOOR;
                floored += 1;
            }
            stat += (obs - exp) * (obs - exp) / exp;
        }
        if chi2_sf(stat, df)? > cfg.significance {
            accepted += 1;
        }
    }
    Ok(KbetReport {
        score: accepted as f64 / n as f64,
        k,
        n_batches: nb,
        floored_expected: floored,
    })
}

/// Mean acceptance rate of the per-row χ² test.
pub fn kbet_score(table: &EmbeddingTable, cfg: &KbetConfig) -> Result<f64> {
    Ok(kbet(table, cfg)?.score)
}
