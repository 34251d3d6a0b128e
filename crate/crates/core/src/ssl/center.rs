//! Running centres subtracted from teacher outputs before sharpening.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CenterMode {
    /// One centre shared by all outputs.
    Global,
    /// One centre per domain (batch).
    PerDomain,
}

/// Key under which the global centre is stored.
const GLOBAL_KEY: u32 = 0;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CenterState {
    pub mode: CenterMode,
    pub dim: usize,
    pub momentum: f64,
    pub centers: BTreeMap<u32, Vec<f64>>,
}

impl CenterState {
    pub fn new(mode: CenterMode, dim: usize, momentum: f64) -> Result<Self> {
        if dim == 0 {
            return Err(Error::config("center.dim", "must be >= 1"));
        }
        if !(0.0..=1.0).contains(&momentum) {
            return Err(Error::config("loss.center_momentum", "must lie in [0, 1]"));
        }
        Ok(Self {
            mode,
            dim,
            momentum,
            centers: BTreeMap::new(),
        })
    }

    fn key(&self, domain: u32) -> u32 {
        match self.mode {
            CenterMode::Global => GLOBAL_KEY,
            CenterMode::PerDomain => domain,
        }
    }

    /// The centre applied to outputs from `domain`; zero until first update.
    pub fn center_for(&self, domain: u32) -> Vec<f64> {
        self.centers
            .get(&self.key(domain))
            .cloned()
            .unwrap_or_else(|| vec![0.0; self.dim])
    }

    /// One centre row per entry of `domains`.
    pub fn center_rows(&self, domains: &[u32]) -> Tensor {
        let mut data = Vec::with_capacity(domains.len() * self.dim);
        for &d in domains {
            data.extend(self.center_for(d));
        }
        Tensor::from_raw(&[domains.len(), self.dim], data)
    }

    /// EMA of the mean teacher output, per centre key present in `domains`.
    pub fn update(&mut self, outputs: &Tensor, domains: &[u32]) -> Result<()> {
        if outputs.rows() == 0 || outputs.rows() != domains.len() || outputs.cols() != self.dim {
            return Err(Error::Shape(format!(
                "center update: outputs {:?} with {} domain ids, dim {}",
                outputs.shape(),
                domains.len(),
                self.dim
            )));
        }
        let mut sums: BTreeMap<u32, (Vec<f64>, usize)> = BTreeMap::new();
        for (r, &d) in domains.iter().enumerate() {
            let entry = sums.entry(self.key(d)).or_insert_with(|| (vec![0.0; self.dim], 0));
            for (s, v) in entry.0.iter_mut().zip(outputs.row(r)) {
                *s += v;
            }
            entry.1 += 1;
        }
        let m = self.momentum;
        for (key, (sum, n)) in sums {
            let c = self.centers.entry(key).or_insert_with(|| vec![0.0; self.dim]);
            for (ci, s) in c.iter_mut().zip(sum) {
                *ci = m * *ci + (1.0 - m) * (s / n as f64);
            }
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn zero_momentum_replaces() {
        let mut c = CenterState::new(CenterMode::Global, 3, 0.0).unwrap();
        let v = Tensor::matrix(1, 3, vec![1.0, -2.0, 0.5]).unwrap();
        c.update(&v, &[4]).unwrap();
        assert_eq!(c.center_for(9), vec![1.0, -2.0, 0.5]);
    }

    #[test]
    fn per_domain_locality() {
        let mut c = CenterState::new(CenterMode::PerDomain, 2, 0.5).unwrap();
        c.update(&Tensor::matrix(1, 2, vec![2.0, 2.0]).unwrap(), &[1]).unwrap();
        let before = c.center_for(1);
        c.update(&Tensor::matrix(2, 2, vec![4.0, 0.0, 2.0, 2.0]).unwrap(), &[3, 3])
            .unwrap();
        assert_eq!(c.center_for(1), before);
        assert_eq!(c.center_for(3), vec![1.5, 0.5]);
        assert_eq!(c.center_for(7), vec![0.0, 0.0]);
    }

    #[test]
    fn two_step_recurrence() {
        let cm = 0.9;
        let mut c = CenterState::new(CenterMode::Global, 1, cm).unwrap();
        c.update(&Tensor::matrix(2, 1, vec![1.0, 3.0]).unwrap(), &[0, 1])
            .unwrap();
        c.update(&Tensor::matrix(1, 1, vec![-4.0]).unwrap(), &[5]).unwrap();
        let step1 = (1.0 - cm) * 2.0;
        let step2 = cm * step1 + (1.0 - cm) * -4.0;
        assert!((c.center_for(0)[0] - step2).abs() < 1e-15);
    }
}
