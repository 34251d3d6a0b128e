//! Evaluation of learned embeddings: whitening, retrieval accuracy, batch
//! mixing, replicate consistency and projections.

pub mod chi2;
pub mod grit;
pub mod kbet;
pub mod knn;
pub mod moa;
pub mod pca;
pub mod probe;
pub mod protocol;
pub mod report;
pub mod table;
pub mod znorm;

pub use chi2::chi2_sf;
pub use grit::{grit, grit_score, GritReport};
pub use kbet::{kbet, kbet_score, Distance, KbetConfig, KbetReport};
pub use knn::{knn_accuracy, knn_predict, KnnConfig};
pub use moa::{consensus_profiles, moa_chance_rate, nsc_moa_1nn};
pub use pca::{pca2d, Pca2d};
pub use probe::{linear_probe, ProbeConfig, ProbeOutcome};
pub use protocol::{evaluate, EvalConfig, EvalOutcome};
pub use report::{MetricSummary, MetricsReport, METRICS_SCHEMA_VERSION};
pub use table::{extract_embeddings, EmbeddingTable, Provenance, RowMeta};
pub use znorm::{znorm_whiten, ZNormStats};
