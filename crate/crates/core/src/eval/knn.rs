//! Weighted k-nearest-neighbour classification by cosine similarity.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::table::EmbeddingTable;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct KnnConfig {
    pub k: usize,
    pub temperature: f64,
}

impl Default for KnnConfig {
    fn default() -> Self {
        Self {
            k: 20,
            temperature: 0.07,
        }
    }
}

/// Rows scaled to unit length; zero rows stay zero.
pub(crate) fn unit_rows(table: &EmbeddingTable) -> Vec<Vec<f64>> {
    (0..table.len())
        .map(|i| {
            let f = table.feature(i);
            let norm = f.iter().map(|v| v * v).sum::<f64>().sqrt();
            if norm > 0.0 {
                f.iter().map(|v| v / norm).collect()
            } else {
                vec![0.0; f.len()]
            }
        })
        .collect()
}

pub(crate) fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Predicted treatment for every test row. The `k` most similar train rows
/// (ties by lower row index) vote with weight `exp(sim / T)`; vote ties go
/// to the lowest treatment id.
pub fn knn_predict(train: &EmbeddingTable, test: &EmbeddingTable, cfg: KnnConfig) -> Result<Vec<u32>> {
    if cfg.k == 0 || cfg.k > train.len() {
        return Err(Error::usage(format!(
            "k = {} with {} reference rows",
            cfg.k,
            train.len()
        )));
    }
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!("feature dims {} and {}", train.dim(), test.dim())));
    }
    if !(cfg.temperature > 0.0) {
        return Err(Error::usage("k-NN temperature must be > 0"));
    }
    let tr = unit_rows(train);
    let te = unit_rows(test);
    let mut out = Vec::with_capacity(te.len());
    let mut sims: Vec<(f64, usize)> = Vec::with_capacity(tr.len());
    for q in &te {
        sims.clear();
        sims.extend(tr.iter().enumerate().map(|(i, r)| (dot(q, r), i)));
        sims.sort_by(|a, b| b.0.total_cmp(&a.0).then(a.1.cmp(&b.1)));
        let mut votes: BTreeMap<u32, f64> = BTreeMap::new();
        for &(s, i) in &sims[..cfg.k] {
            *votes.entry(train.rows()[i].treatment_id).or_default() += (s / cfg.temperature).exp();
        }
        let mut best = (u32::MAX, f64::NEG_INFINITY);
        for (label, w) in votes {
            if w > best.1 {
                best = (label, w);
            }
        }
        out.push(best.0);
    }
    Ok(out)
}

/// Fraction of test rows whose treatment is predicted correctly.
pub fn knn_accuracy(train: &EmbeddingTable, test: &EmbeddingTable, cfg: KnnConfig) -> Result<f64> {
    if test.is_empty() {
        return Err(Error::usage("k-NN accuracy of an empty test table"));
    }
    let pred = knn_predict(train, test, cfg)?;
    let correct = pred
        .iter()
        .zip(test.rows())
        .filter(|(p, r)| **p == r.treatment_id)
        .count();
    Ok(correct as f64 / test.len() as f64)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::table::RowMeta;
    use crate::tensor::Tensor;

    fn table(labels: &[u32], feats: Vec<f64>, dim: usize, id0: u64) -> EmbeddingTable {
        let rows = labels
            .iter()
            .enumerate()
            .map(|(i, &t)| RowMeta {
                sample_id: id0 + i as u64,
                batch_id: 0,
                treatment_id: t,
                is_control: false,
                moa_id: 0,
            })
            .collect();
        EmbeddingTable::new(rows, Tensor::matrix(labels.len(), dim, feats).unwrap()).unwrap()
    }

    #[test]
    fn nearest_copy_wins() {
        let train = table(&[3, 5, 8], vec![1., 0., 0., 1., -1., 0.], 2, 0);
        let test = table(&[5], vec![0., 2.], 2, 100);
        let cfg = KnnConfig {
            k: 1,
            ..Default::default()
        };
        assert_eq!(knn_accuracy(&train, &test, cfg).unwrap(), 1.0);
    }

    #[test]
    fn constant_train_labels() {
        let train = table(&[4, 4, 4], vec![1., 0., 0., 1., -1., 0.], 2, 0);
        let test = table(&[4, 1, 4, 2], vec![1., 1., 0., 1., 3., 1., -1., 2.], 2, 100);
        let cfg = KnnConfig {
            k: 2,
            ..Default::default()
        };
        assert_eq!(knn_accuracy(&train, &test, cfg).unwrap(), 0.5);
    }

    #[test]
    fn k_above_train_size_is_usage_error() {
        let train = table(&[0], vec![1.0], 1, 0);
        let test = table(&[0], vec![1.0], 1, 9);
        let cfg = KnnConfig {
            k: 2,
            ..Default::default()
        };
        assert!(matches!(knn_accuracy(&train, &test, cfg), Err(Error::Usage(_))));
    }
}
