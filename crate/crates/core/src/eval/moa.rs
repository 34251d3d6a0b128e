//! Not-same-compound nearest-neighbour mechanism-of-action retrieval.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::eval::knn::dot;

use crate::eval::table::EmbeddingTable;

/// One consensus profile per treatment.
#[derive(Debug, Clone, PartialEq)]
pub struct Consensus {
    pub treatment_id: u32,
    pub moa_id: u32,
    pub profile: Vec<f64>,
}

fn median(values: &mut [f64]) -> f64 {
    values.sort_by(f64::total_cmp);
    let n = values.len();
    if n % 2 == 1 {
        values[n / 2]
    } else {
        0.5 * (values[n / 2 - 1] + values[n / 2])
    }
}

/// Per-feature median over each non-control treatment's rows.
pub fn consensus_profiles(table: &EmbeddingTable) -> Vec<Consensus> {
    let mut groups: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
    for (i, r) in table.rows().iter().enumerate() {
        if !r.is_control {
            groups.entry(r.treatment_id).or_default().push(i);
        }
    }
    groups
        .into_iter()
        .map(|(t, idx)| {
            let profile = (0..table.dim())
                .map(|j| median(&mut idx.iter().map(|&i| table.feature(i)[j]).collect::<Vec<_>>()))
                .collect();
            Consensus {
                treatment_id: t,
                moa_id: table.rows()[idx[0]].moa_id,
                profile,
            }
        })
        .collect()
}

fn unit(v: &[f64]) -> Vec<f64> {
    let n = v.iter().map(|x| x * x).sum::<f64>().sqrt();
    if n > 0.0 {
        v.iter().map(|x| x / n).collect()
    } else {
        vec![0.0; v.len()]
    }
}

/// Fraction of treatments whose most cosine-similar other treatment
/// (ties to the lower treatment id) shares its MoA. Controls are skipped.
pub fn nsc_moa_1nn(table: &EmbeddingTable) -> Result<f64> {
    let cons = consensus_profiles(table);
    if cons.len() < 2 {
        return Err(Error::usage(format!(
            "MoA retrieval needs at least 2 treatments, found {}",
            cons.len()
        )));
    }
    let units: Vec<Vec<f64>> = cons.iter().map(|c| unit(&c.profile)).collect();
    let mut correct = 0;
    for (i, c) in cons.iter().enumerate() {
        let mut best: Option<(f64, usize)> = None;
        for (j, u) in units.iter().enumerate() {
            if j == i {
                continue;
            }
            let s = dot(&units[i], u);
            if best.is_none_or(|(bs, _)| s > bs) {
                best = Some((s, j));
            }
        }
        let (_, j) = best.expect("at least one other treatment");
        if cons[j].moa_id == c.moa_id {
            correct += 1;
        }
    }
    Ok(correct as f64 / cons.len() as f64)
}

/// Expected accuracy of a random other-treatment pick, from group sizes.
pub fn moa_chance_rate(table: &EmbeddingTable) -> Result<f64> {
    let cons = consensus_profiles(table);
    let n = cons.len();
    if n < 2 {
        return Err(Error::usage("MoA chance rate needs at least 2 treatments"));
    }
    let mut sizes: BTreeMap<u32, usize> = BTreeMap::new();
    for c in &cons {
        *sizes.entry(c.moa_id).or_default() += 1;
    }
    Ok(cons
        .iter()
        .map(|c| (sizes[&c.moa_id] - 1) as f64 / (n - 1) as f64)
        .sum::<f64>()
        / n as f64)
}
