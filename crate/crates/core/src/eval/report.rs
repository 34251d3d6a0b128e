//! Per-method metric summaries aggregated over folds.

use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

/// Version of the metrics JSON layout.
pub const METRICS_SCHEMA_VERSION: u32 = 1;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct MetricSummary {
    pub mean: f64,
    /// Sample standard deviation; 0 for a single fold.
    pub std: f64,
    pub n_folds: usize,
}

impl MetricSummary {
    pub fn of(values: &[f64]) -> Self {
        let n = values.len();
        let mean = values.iter().sum::<f64>() / n.max(1) as f64;
        let std = if n > 1 {
            (values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (n - 1) as f64).sqrt()
        } else {
            0.0
        };
        Self { mean, std, n_folds: n }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MetricsReport {
    pub schema_version: u32,
    pub method: String,
    pub config_hash: String,
    pub metrics: BTreeMap<String, MetricSummary>,
}

impl MetricsReport {
    /// Summaries over however many folds reported each metric.
    pub fn aggregate(method: &str, config_hash: &str, folds: &[BTreeMap<String, f64>]) -> Self {
        let mut values: BTreeMap<String, Vec<f64>> = BTreeMap::new();
        for fold in folds {
            for (k, v) in fold {
                values.entry(k.clone()).or_default().push(*v);
            }
        }
        Self {
            schema_version: METRICS_SCHEMA_VERSION,
            method: method.to_string(),
            config_hash: config_hash.to_string(),
            metrics: values.into_iter().map(|(k, v)| (k, MetricSummary::of(&v))).collect(),
        }
    }
}
