//! Experiment configuration: one JSON document per experiment.
//!
//! Every section is optional and falls back to the desk-scale defaults.
//! Unknown keys are rejected, and parse errors carry the JSON path of the
//! offending field.

use std::collections::BTreeSet;
use std::path::{Path, PathBuf};

use cdcl_core::eval::EvalConfig;
use cdcl_core::hash::canonical_hash;
use cdcl_core::optim::{AdamWConfig, LrSchedule};
use cdcl_core::ssl::{ArchConfig, BarlowPairing, CenterMode, LossConfig, MethodLabel, TrainConfig};
use cdcl_core::synth::{GeneratorConfig, Scenario};
use cdcl_core::views::{AugmentConfig, PairingStrategy};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

/// Per-field overrides applied on top of the method's default loss.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LossOverrides {
    pub lambda: Option<f64>,
    pub barlow_alpha: Option<f64>,
    pub tau_s: Option<f64>,
    pub tau_t: Option<f64>,
    pub barlow_pairing: Option<BarlowPairing>,
    pub centering: Option<CenterMode>,
    pub pairing: Option<PairingStrategy>,
    pub use_barlow: Option<bool>,
    pub center_momentum: Option<f64>,
    pub n_local_crops: Option<usize>,
}

impl Default for LossOverrides {
    /// Two local crops instead of six keep DINO-family runs at desk-scale
    /// cost; everything else follows the method.
    fn default() -> Self {
        Self {
            lambda: None,
            barlow_alpha: None,
            tau_s: None,
            tau_t: None,
            barlow_pairing: None,
            centering: None,
            pairing: None,
            use_barlow: None,
            center_momentum: None,
            n_local_crops: Some(2),
        }
    }
}

impl LossOverrides {
    pub fn apply(&self, mut cfg: LossConfig) -> LossConfig {
        macro_rules! set {
            ($($f:ident),*) => { $( if let Some(v) = self.$f { cfg.$f = v; } )* };
        }
        set!(
            lambda,
            barlow_alpha,
            tau_s,
            tau_t,
            barlow_pairing,
            centering,
            pairing,
            use_barlow,
            center_momentum,
            n_local_crops
        );
        cfg
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ArchSection {
    pub extractor_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub head_hidden: Vec<usize>,
    pub out_dim: usize,
    pub predictor_hidden: Vec<usize>,
    pub projector_l2: bool,
    pub input_center: f64,
}

impl Default for ArchSection {
    fn default() -> Self {
        let a = ArchConfig::new(1, 1);
        Self {
            extractor_hidden: a.extractor_hidden,
            embed_dim: a.embed_dim,
            head_hidden: a.head_hidden,
            out_dim: a.out_dim,
            predictor_hidden: a.predictor_hidden,
            projector_l2: a.projector_l2,
            input_center: a.input_center,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct TrainSection {
    pub total_iters: u64,
    pub mini_batch_size: usize,
    pub ema_momentum: f64,
    pub base_lr: f64,
    /// Defaults to a tenth of `total_iters`.
    pub warmup_iters: Option<u64>,
    pub final_lr: f64,
    pub adamw: AdamWConfig,
    /// Iterations between checkpoints written during `train`.
    pub checkpoint_every: u64,
}

impl Default for TrainSection {
    fn default() -> Self {
        Self {
            total_iters: 2000,
            mini_batch_size: 32,
            ema_momentum: 0.996,
            base_lr: 1e-3,
            warmup_iters: None,
            final_lr: 1e-5,
            adamw: AdamWConfig::default(),
            checkpoint_every: 500,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct FoldPlan {
    /// Number of folds to run; defaults to one per batch.
    pub n_folds: Option<usize>,
    pub n_train: usize,
    pub n_val: usize,
    pub n_test: usize,
}

impl Default for FoldPlan {
    fn default() -> Self {
        Self {
            n_folds: None,
            n_train: 4,
            n_val: 1,
            n_test: 1,
        }
    }
}

/// Cells run by `experiment`: every method × seed × fold × data subset.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct MatrixSection {
    /// Defaults to the top-level method.
    pub methods: Vec<MethodLabel>,
    /// Each seed regenerates the dataset and reinitialises training.
    /// Defaults to the top-level seed.
    pub seeds: Vec<u64>,
    /// Explicit folds; defaults to `0..n_folds`.
    pub folds: Vec<usize>,
    /// Run on the full training data.
    pub full_data: bool,
    pub scenarios: Vec<Scenario>,
}

impl Default for MatrixSection {
    fn default() -> Self {
        Self {
            methods: Vec::new(),
            seeds: Vec::new(),
            folds: Vec::new(),
            full_data: true,
            scenarios: Vec::new(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ExperimentConfig {
    pub generator: GeneratorConfig,
    pub method: MethodLabel,
    pub loss: LossOverrides,
    pub arch: ArchSection,
    pub train: TrainSection,
    pub augment: AugmentConfig,
    pub eval: EvalConfig,
    pub folds: FoldPlan,
    pub scenario: Option<Scenario>,
    pub matrix: MatrixSection,
    /// Output root; `--out` and `CDCL_LAB_OUT` take precedence.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub out_dir: Option<PathBuf>,
    /// Seed of model initialisation, sampling and augmentation.
    pub seed: u64,
}

impl Default for ExperimentConfig {
    fn default() -> Self {
        let mut eval = EvalConfig::default();
        // Neighbourhoods of 0.5 % of a 600-image table would be smaller
        // than the batch count; 5 % gives k = 20 at desk scale.
        eval.kbet.k_fraction = 0.05;
        Self {
            generator: GeneratorConfig::default(),
            method: MethodLabel::Cdcl,
            loss: LossOverrides::default(),
            arch: ArchSection::default(),
            train: TrainSection::default(),
            augment: AugmentConfig::default(),
            eval,
            folds: FoldPlan::default(),
            scenario: None,
            matrix: MatrixSection::default(),
            out_dir: None,
            seed: 0,
        }
    }
}

/// Parses a configuration document, reporting the JSON path of any field
/// that fails to deserialize.
pub fn parse_config(text: &str) -> Result<ExperimentConfig, CliError> {
    let de = &mut serde_json::Deserializer::from_str(text);
    let cfg: ExperimentConfig = serde_path_to_error::deserialize(de).map_err(|e| {
        let path = e.path().to_string();
        CliError::Config {
            field: if path == "." { "<root>".into() } else { path },
            message: e.into_inner().to_string(),
        }
    })?;
    cfg.validate()?;
    Ok(cfg)
}

pub fn load_config(path: &Path) -> Result<ExperimentConfig, CliError> {
    let text = std::fs::read_to_string(path).map_err(|e| CliError::io(path, e))?;
    parse_config(&text)
}

fn prefixed(prefix: &str, e: cdcl_core::Error) -> CliError {
    match e {
        cdcl_core::Error::Config { field, message } => {
            let field = if field.starts_with(prefix) {
                field
            } else {
                format!("{prefix}{field}")
            };
            CliError::Config { field, message }
        }
        other => CliError::from(other),
    }
}

impl ExperimentConfig {
    pub fn validate(&self) -> Result<(), CliError> {
        self.generator.validate().map_err(|e| prefixed("generator.", e))?;
        self.augment.validate().map_err(|e| prefixed("", e))?;
        self.eval.kbet.validate().map_err(|e| prefixed("eval.", e))?;
        for m in self.methods() {
            let loss = self.loss_config_for(m);
            loss.validate().map_err(|e| prefixed("", e))?;
            if !m.matches(&loss) {
                return Err(CliError::config(
                    "loss",
                    format!("overrides change the defining choices of method {m}"),
                ));
            }
        }
        self.arch_config().validate().map_err(|e| prefixed("", e))?;
        self.train_config(self.seed).validate().map_err(|e| prefixed("", e))?;
        if self.train.checkpoint_every == 0 {
            return Err(CliError::config("train.checkpoint_every", "must be >= 1"));
        }
        let f = &self.folds;
        let n = self.generator.n_batches;
        if f.n_train + f.n_val + f.n_test != n {
            return Err(CliError::config(
                "folds",
                format!("n_train + n_val + n_test must equal generator.n_batches ({n})"),
            ));
        }
        if f.n_train == 0 {
            return Err(CliError::config("folds.n_train", "must be >= 1"));
        }
        if f.n_val + f.n_test == 0 {
            return Err(CliError::config("folds", "at least one held-out batch is needed"));
        }
        match f.n_folds {
            Some(0) => return Err(CliError::config("folds.n_folds", "must be >= 1")),
            Some(k) if k > n => {
                return Err(CliError::config(
                    "folds.n_folds",
                    format!("must not exceed n_batches ({n})"),
                ))
            }
            _ => {}
        }
        if let Some(bad) = self.matrix.folds.iter().find(|&&k| k >= n) {
            return Err(CliError::config(
                "matrix.folds",
                format!("fold {bad} must be < n_batches ({n})"),
            ));
        }
        if !self.matrix.full_data && self.matrix.scenarios.is_empty() {
            return Err(CliError::config(
                "matrix",
                "no cells: full_data is off and no scenarios are listed",
            ));
        }
        for s in self.scenario.iter().chain(&self.matrix.scenarios) {
            match *s {
                Scenario::FewPerClass { k: 0 } => return Err(CliError::config("scenario.k", "must be >= 1")),
                Scenario::TreatmentFraction { p } if !(p > 0.0 && p <= 1.0) => {
                    return Err(CliError::config("scenario.p", "must lie in (0, 1]"))
                }
                _ => {}
            }
        }
        let dupes = |v: &[u64]| v.iter().collect::<BTreeSet<_>>().len() != v.len();
        if dupes(&self.matrix.seeds) {
            return Err(CliError::config("matrix.seeds", "duplicate seed"));
        }
        Ok(())
    }

    /// Hash of the canonical serialization, ignoring the output location.
    pub fn config_hash(&self) -> Result<String, CliError> {
        let mut c = self.clone();
        c.out_dir = None;
        Ok(canonical_hash(&c)?)
    }

    pub fn loss_config_for(&self, method: MethodLabel) -> LossConfig {
        let mut loss = self.loss.apply(method.loss_config());
        // The recipe fixes these; overrides of the top-level method must
        // not leak into other rows of a matrix.
        let d = method.loss_config();
        loss.method = d.method;
        if method != self.method {
            loss.pairing = d.pairing;
            loss.use_barlow = d.use_barlow;
            loss.centering = d.centering;
            if d.use_barlow && d.lambda == 0.0 {
                loss.lambda = 0.0;
            }
        }
        if d.method != cdcl_core::ssl::Method::Dino {
            loss.n_local_crops = 0;
        }
        loss
    }

    pub fn arch_config(&self) -> ArchConfig {
        let a = &self.arch;
        let g = &self.generator;
        ArchConfig {
            input_dim: self.augment.view_len(g.channels),
            extractor_hidden: a.extractor_hidden.clone(),
            embed_dim: a.embed_dim,
            head_hidden: a.head_hidden.clone(),
            out_dim: a.out_dim,
            predictor_hidden: a.predictor_hidden.clone(),
            n_classes: g.n_treatments,
            projector_l2: a.projector_l2,
            input_center: a.input_center,
        }
    }

    pub fn train_config(&self, seed: u64) -> TrainConfig {
        let t = &self.train;
        TrainConfig {
            total_iters: t.total_iters,
            mini_batch_size: t.mini_batch_size,
            ema_momentum: t.ema_momentum,
            schedule: LrSchedule {
                base_lr: t.base_lr,
                warmup_iters: t.warmup_iters.unwrap_or(t.total_iters / 10),
                total_iters: t.total_iters,
                final_lr: t.final_lr,
            },
            seed,
            adamw: t.adamw,
        }
    }

    pub fn n_folds(&self) -> usize {
        self.folds.n_folds.unwrap_or(self.generator.n_batches)
    }

    pub fn methods(&self) -> Vec<MethodLabel> {
        if self.matrix.methods.is_empty() {
            vec![self.method]
        } else {
            self.matrix.methods.clone()
        }
    }

    pub fn seeds(&self) -> Vec<u64> {
        if self.matrix.seeds.is_empty() {
            vec![self.seed]
        } else {
            self.matrix.seeds.clone()
        }
    }

    pub fn folds_to_run(&self) -> Vec<usize> {
        if self.matrix.folds.is_empty() {
            (0..self.n_folds()).collect()
        } else {
            self.matrix.folds.clone()
        }
    }

    /// Data subsets of the matrix; `None` is the full training data.
    pub fn subsets(&self) -> Vec<Option<Scenario>> {
        let mut out = Vec::new();
        if self.matrix.full_data {
            out.push(self.scenario);
        }
        out.extend(self.matrix.scenarios.iter().copied().map(Some));
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn empty_document_is_the_default() {
        assert_eq!(parse_config("{}").unwrap(), ExperimentConfig::default());
    }

    #[test]
    fn unknown_field_reports_its_path() {
        let err = parse_config(r#"{"generator": {"n_batchez": 3}}"#).unwrap_err();
        match err {
            CliError::Config { field, .. } => assert_eq!(field, "generator.n_batchez"),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn semantic_errors_name_the_field() {
        let err = parse_config(r#"{"generator": {"n_batches": 0}}"#).unwrap_err();
        match err {
            CliError::Config { field, .. } => assert_eq!(field, "generator.n_batches"),
            other => panic!("unexpected {other:?}"),
        }
        let err = parse_config(r#"{"loss": {"tau_t": 0.5}}"#).unwrap_err();
        assert!(
            matches!(err, CliError::Config { ref field, .. } if field == "loss.tau_t"),
            "{err:?}"
        );
    }

    #[test]
    fn overrides_cannot_redefine_the_method() {
        let err = parse_config(r#"{"method": "CDCL", "loss": {"pairing": "same_image"}}"#).unwrap_err();
        assert!(
            matches!(err, CliError::Config { ref field, .. } if field == "loss"),
            "{err:?}"
        );
    }

    #[test]
    fn hash_ignores_output_location() {
        let a = ExperimentConfig::default();
        let b = ExperimentConfig {
            out_dir: Some("/tmp/elsewhere".into()),
            ..a.clone()
        };
        assert_eq!(a.config_hash().unwrap(), b.config_hash().unwrap());
        let c = ExperimentConfig { seed: 9, ..a.clone() };
        assert_ne!(a.config_hash().unwrap(), c.config_hash().unwrap());
    }

    #[test]
    fn matrix_rows_keep_their_own_recipe() {
        let cfg = parse_config(r#"{"method": "CDCL", "loss": {"lambda": 0.5}}"#).unwrap();
        assert_eq!(cfg.loss_config_for(MethodLabel::Cdcl).lambda, 0.5);
        let bl = cfg.loss_config_for(MethodLabel::SslDinoBl);
        assert_eq!(bl.lambda, 0.0);
        assert!(MethodLabel::SslDinoBl.matches(&bl));
        let sup = cfg.loss_config_for(MethodLabel::Supervised);
        assert!(MethodLabel::Supervised.matches(&sup));
    }
}
