//! Linear probe: a softmax layer trained on frozen features.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::eval::table::EmbeddingTable;
use crate::nn::{mlp_forward, mlp_infer, MlpSpec};
use crate::optim::{adamw_step, AdamWConfig, OptState};
use crate::rng::{rng_for, stream};
use crate::ssl::loss::cross_entropy;
use crate::tape::Tape;
use crate::tensor::Tensor;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ProbeConfig {
    pub epochs: usize,
    pub lr: f64,
    pub weight_decay: f64,
    pub seed: u64,
}

impl Default for ProbeConfig {
    fn default() -> Self {
        Self {
            epochs: 200,
            lr: 0.01,
            weight_decay: 1e-4,
            seed: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ProbeOutcome {
    Accuracy(f64),
    /// The training loss became non-finite at this epoch.
    Diverged {
        epoch: usize,
    },
}

const PREFIX: &str = "probe";

/// Standardises with train statistics; constant features map to zero.
fn standardize(train: &Tensor, other: &Tensor) -> (Tensor, Tensor) {
    let (n, d) = (train.rows(), train.cols());
    let mut mean = vec![0.0; d];
    for i in 0..n {
        for (m, v) in mean.iter_mut().zip(train.row(i)) {
            *m += v / n as f64;
        }
    }
    let mut sd = vec![0.0; d];
    for i in 0..n {
        for ((s, v), m) in sd.iter_mut().zip(train.row(i)).zip(&mean) {
            *s += (v - m) * (v - m) / n as f64;
        }
    }
    sd.iter_mut().for_each(|s| *s = s.sqrt());
    let apply = |t: &Tensor| {
        let mut out = t.clone();
        let c = out.cols();
        for row in out.data_mut().chunks_mut(c) {
            for ((v, m), s) in row.iter_mut().zip(&mean).zip(&sd) {
                *v = if *s > 1e-12 { (*v - m) / s } else { 0.0 };
            }
        }
        out
    };
    (apply(train), apply(other))
}

/// Trains on `train` with full-batch AdamW and reports accuracy on `test`.
/// Feature standardisation happens on copies; the tables are untouched.
pub fn linear_probe(train: &EmbeddingTable, test: &EmbeddingTable, cfg: ProbeConfig) -> Result<ProbeOutcome> {
    if train.is_empty() || test.is_empty() {
        return Err(Error::usage("linear probe needs non-empty train and test tables"));
    }
    if train.dim() != test.dim() {
        return Err(Error::Shape(format!("feature dims {} and {}", train.dim(), test.dim())));
    }
    let classes: Vec<u32> = train
        .rows()
        .iter()
        .chain(test.rows())
        .map(|r| r.treatment_id)
        .collect::<BTreeSet<_>>()
        .into_iter()
        .collect();
    let class_of = |t: u32| classes.binary_search(&t).expect("collected above");
    let labels: Vec<usize> = train.rows().iter().map(|r| class_of(r.treatment_id)).collect();
    let (x_train, x_test) = standardize(train.features(), test.features());

    let spec = MlpSpec::new(train.dim(), &[], classes.len());
    let mut params = spec.init(PREFIX, &mut rng_for(cfg.seed, stream::PROBE, 0))?;
    let mut opt = OptState::new(
        AdamWConfig {
            weight_decay: cfg.weight_decay,
            ..Default::default()
        },
        &params,
    );
    for epoch in 0..cfg.epochs {
        let mut tape = Tape::new();
        let x = tape.leaf(x_train.clone());
        let logits = match mlp_forward(&spec, PREFIX, &params, x, &mut tape) {
            Ok(v) => v,
            Err(Error::Numeric { .. }) => return Ok(ProbeOutcome::Diverged { epoch }),
            Err(e) => return Err(e),
        };
        let loss = cross_entropy(&mut tape, logits, &labels)?;
        if !tape.value(loss).item().is_finite() {
            return Ok(ProbeOutcome::Diverged { epoch });
        }
        params.zero_grad();
        tape.backward(loss, &mut params)?;
        adamw_step(&mut params, &mut opt, cfg.lr)?;
    }
    let logits = match mlp_infer(&spec, PREFIX, &params, &x_test) {
        Ok(l) => l,
        Err(Error::Numeric { .. }) => return Ok(ProbeOutcome::Diverged { epoch: cfg.epochs }),
        Err(e) => return Err(e),
    };
    let correct = test
        .rows()
        .iter()
        .enumerate()
        .filter(|(i, r)| {
            let row = logits.row(*i);
            let mut best = 0;
            for (c, v) in row.iter().enumerate() {
                if *v > row[best] {
                    best = c;
                }
            }
            best == class_of(r.treatment_id)
        })
        .count();
    Ok(ProbeOutcome::Accuracy(correct as f64 / test.len() as f64))
}
