//! Per-batch whitening against negative controls.

use std::collections::BTreeMap;

use crate::error::{Error, Result};
use crate::eval::table::EmbeddingTable;
use crate::tensor::Tensor;

/// Floor applied to control standard deviations.
pub const SIGMA_FLOOR: f64 = 1e-6;

#[derive(Debug, Clone, PartialEq)]
pub struct ZNormStats {
    pub eps: f64,
    /// batch id → (mean, floored std) over that batch's control rows.
    pub per_batch: BTreeMap<u32, (Vec<f64>, Vec<f64>)>,
    /// Number of (batch, feature) standard deviations that hit the floor.
    pub floored: usize,
}

impl ZNormStats {
    /// Population mean and standard deviation of each batch's controls.
    pub fn fit(table: &EmbeddingTable, eps: f64) -> Result<Self> {
        let dim = table.dim();
        let mut groups: BTreeMap<u32, Vec<usize>> = table.batches().into_iter().map(|b| (b, Vec::new())).collect();
        for (i, r) in table.rows().iter().enumerate() {
            if r.is_control {
                groups.get_mut(&r.batch_id).expect("batch listed").push(i);
            }
        }
        let mut per_batch = BTreeMap::new();
        let mut floored = 0;
        for (batch, idx) in groups {
            if idx.len() < 2 {
                return Err(Error::MissingControls(format!(
                    "batch {batch} has {} control rows, whitening needs at least 2",
                    idx.len()
                )));
            }
            let n = idx.len() as f64;
            let mut mean = vec![0.0; dim];
            for &i in &idx {
                for (m, v) in mean.iter_mut().zip(table.feature(i)) {
                    *m += v;
                }
            }
            mean.iter_mut().for_each(|m| *m /= n);
            let mut var = vec![0.0; dim];
            for &i in &idx {
                for ((s, v), m) in var.iter_mut().zip(table.feature(i)).zip(&mean) {
                    *s += (v - m) * (v - m);
                }
            }
            let std: Vec<f64> = var
                .iter()
                .map(|s| {
                    let sd = (s / n).sqrt();
                    if sd < eps {
                        floored += 1;
                        eps
                    } else {
                        sd
                    }
                })
                .collect();
            per_batch.insert(batch, (mean, std));
        }
        Ok(Self {
            eps,
            per_batch,
            floored,
        })
    }

    pub fn apply(&self, table: &EmbeddingTable) -> Result<EmbeddingTable> {
        let dim = table.dim();
        let mut data = Vec::with_capacity(table.len() * dim);
        for (i, r) in table.rows().iter().enumerate() {
            let (mean, std) = self
                .per_batch
                .get(&r.batch_id)
                .ok_or_else(|| Error::MissingControls(format!("no control statistics for batch {}", r.batch_id)))?;
            data.extend(
                table
                    .feature(i)
                    .iter()
                    .zip(mean)
                    .zip(std)
                    .map(|((v, m), s)| (v - m) / s),
            );
        }
        table.with_features(Tensor::from_vec(&[table.len(), dim], data)?)
    }
}

/// `(x − μ_b) / σ_b` per row, with statistics from its own batch's controls.
pub fn znorm_whiten(table: &EmbeddingTable) -> Result<EmbeddingTable> {
    ZNormStats::fit(table, SIGMA_FLOOR)?.apply(table)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::eval::table::RowMeta;

    fn row(id: u64, batch: u32, control: bool) -> RowMeta {
        RowMeta {
            sample_id: id,
            batch_id: batch,
            treatment_id: if control { 0 } else { 1 },
            is_control: control,
            moa_id: 0,
        }
    }

    #[test]
    fn forced_arithmetic() {
        let t = EmbeddingTable::new(
            vec![row(0, 0, true), row(1, 0, true), row(2, 0, false)],
            Tensor::matrix(3, 1, vec![1.0, 3.0, 4.0]).unwrap(),
        )
        .unwrap();
        let z = znorm_whiten(&t).unwrap();
        assert_eq!(z.feature(2), &[2.0]);
    }

    #[test]
    fn missing_controls_names_batch() {
        let t = EmbeddingTable::new(
            vec![row(0, 0, true), row(1, 0, true), row(2, 5, false), row(3, 5, true)],
            Tensor::zeros(&[4, 1]),
        )
        .unwrap();
        match znorm_whiten(&t) {
            Err(Error::MissingControls(m)) => assert!(m.contains("batch 5")),
            other => panic!("{other:?}"),
        }
    }

    #[test]
    fn constant_feature_is_floored() {
        let t = EmbeddingTable::new(
            vec![row(0, 0, true), row(1, 0, true), row(2, 0, false)],
            Tensor::matrix(3, 2, vec![1.0, 7.0, 2.0, 7.0, 3.0, 8.0]).unwrap(),
        )
        .unwrap();
        let stats = ZNormStats::fit(&t, SIGMA_FLOOR).unwrap();
        assert_eq!(stats.floored, 1);
        let z = stats.apply(&t).unwrap();
        assert!(z.features().is_finite());
        assert!((z.feature(2)[1] - 1.0 / SIGMA_FLOOR).abs() < 1e-6);
    }
}
