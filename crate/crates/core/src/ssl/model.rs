//! Network layout, loss configuration and the method matrix.

use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::nn::{mlp_forward, mlp_infer, FinalActivation, MlpSpec};
use crate::params::ParamSet;
use crate::rng::{rng_for, stream};
use crate::ssl::center::CenterMode;
use crate::tape::{Tape, Var};
use crate::tensor::Tensor;
use crate::views::{CropPlan, PairingStrategy};

pub const EXTRACTOR: &str = "ext";
pub const PROJECTOR: &str = "proj";
pub const PREDICTOR: &str = "pred";
pub const CLASSIFIER: &str = "cls";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    Dino,
    Byol,
    WeaklySupervised,
}

/// Which outputs feed the Barlow term.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BarlowPairing {
    /// Projector outputs of the student's first two global views.
    StudentStudent,
    /// Student global view 0 against the teacher's global view 1.
    TeacherStudent,
}

/// Widths of the extractor and heads. The extractor output is the
/// embedding used for evaluation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ArchConfig {
    pub input_dim: usize,
    pub extractor_hidden: Vec<usize>,
    pub embed_dim: usize,
    pub head_hidden: Vec<usize>,
    /// Projector output width (number of prototypes for DINO).
    pub out_dim: usize,
    pub predictor_hidden: Vec<usize>,
    /// Classes of the weakly supervised head.
    pub n_classes: usize,
    /// Scale projector outputs to unit length, bounding the logits that
    /// the temperatures act on.
    pub projector_l2: bool,
    /// Subtracted from every pixel before the first layer.
    #[serde(default)]
    pub input_center: f64,
}

impl ArchConfig {
    pub fn new(input_dim: usize, n_classes: usize) -> Self {
        Self {
            input_dim,
            extractor_hidden: vec![128],
            embed_dim: 64,
            head_hidden: vec![64, 64],
            out_dim: 32,
            predictor_hidden: vec![64],
            n_classes,
            projector_l2: true,
            input_center: 0.5,
        }
    }

    pub fn extractor(&self) -> MlpSpec {
        MlpSpec::new(self.input_dim, &self.extractor_hidden, self.embed_dim)
    }

    pub fn projector(&self) -> MlpSpec {
        let mut spec = MlpSpec::new(self.embed_dim, &self.head_hidden, self.out_dim);
        if self.projector_l2 {
            spec.final_activation = FinalActivation::L2Normalize;
        }
        spec
    }

    pub fn predictor(&self) -> MlpSpec {
        MlpSpec::new(self.out_dim, &self.predictor_hidden, self.out_dim)
    }

    pub fn classifier(&self) -> MlpSpec {
        MlpSpec::new(self.embed_dim, &[], self.n_classes)
    }

    pub fn validate(&self) -> Result<()> {
        for (field, spec) in [
            ("arch.extractor", self.extractor()),
            ("arch.projector", self.projector()),
            ("arch.predictor", self.predictor()),
            ("arch.classifier", self.classifier()),
        ] {
            spec.validate().map_err(|e| Error::config(field, e.to_string()))?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LossConfig {
    pub method: Method,
    pub pairing: PairingStrategy,
    /// Weight of the native loss when combined with Barlow.
    pub lambda: f64,
    pub barlow_alpha: f64,
    pub tau_s: f64,
    pub tau_t: f64,
    pub use_barlow: bool,
    pub barlow_pairing: BarlowPairing,
    pub centering: CenterMode,
    pub center_momentum: f64,
    /// Local crops per view set (DINO only).
    pub n_local_crops: usize,
}

impl LossConfig {
    pub fn dino() -> Self {
        Self {
            method: Method::Dino,
            pairing: PairingStrategy::SameImage,
            lambda: 0.25,
            barlow_alpha: 0.005,
            tau_s: 0.1,
            tau_t: 0.04,
            use_barlow: false,
            barlow_pairing: BarlowPairing::StudentStudent,
            centering: CenterMode::Global,
            center_momentum: 0.9,
            n_local_crops: 6,
        }
    }

    pub fn validate(&self) -> Result<()> {
        let positive = |field: &str, v: f64| {
            if v > 0.0 && v.is_finite() {
                Ok(())
            } else {
                Err(Error::config(field, format!("must be > 0, got {v}")))
            }
        };
        positive("loss.tau_s", self.tau_s)?;
        positive("loss.tau_t", self.tau_t)?;
        positive("loss.barlow_alpha", self.barlow_alpha)?;
        if self.tau_t > self.tau_s {
            return Err(Error::config("loss.tau_t", "teacher temperature must not exceed tau_s"));
        }
        if !(0.0..=1.0).contains(&self.lambda) {
            return Err(Error::config("loss.lambda", "must lie in [0, 1]"));
        }
        if !(0.0..=1.0).contains(&self.center_momentum) {
            return Err(Error::config("loss.center_momentum", "must lie in [0, 1]"));
        }
        if self.method == Method::Byol && self.centering != CenterMode::Global {
            return Err(Error::config("loss.centering", "BYOL has no centre"));
        }
        if self.method == Method::WeaklySupervised && self.pairing != PairingStrategy::SameImage {
            return Err(Error::config(
                "loss.pairing",
                "the supervised baseline uses single images",
            ));
        }
        if self.pairing == PairingStrategy::CrossBatchSameTreatment && !self.n_local_crops.is_multiple_of(2) {
            return Err(Error::config(
                "loss.n_local_crops",
                "must be even under cross-batch pairing",
            ));
        }
        self.crop_plan().per_source(self.pairing)?;
        Ok(())
    }

    pub fn crop_plan(&self) -> CropPlan {
        match self.method {
            Method::Dino => CropPlan {
                n_global: 2,
                n_local: self.n_local_crops,
            },
            Method::Byol => CropPlan::BYOL,
            Method::WeaklySupervised => CropPlan::SINGLE,
        }
    }

    /// Weight of the method's own loss in the total objective.
    pub fn native_weight(&self) -> f64 {
        if self.use_barlow {
            self.lambda
        } else {
            1.0
        }
    }
}

/// The eight training recipes compared in the experiments.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum MethodLabel {
    #[serde(rename = "Supervised")]
    Supervised,
    #[serde(rename = "SSL-DINO")]
    SslDino,
    #[serde(rename = "SSL-BYOL")]
    SslByol,
    #[serde(rename = "SSL-DINO-CB")]
    SslDinoCb,
    #[serde(rename = "SSL-BYOL-CB")]
    SslByolCb,
    #[serde(rename = "CDCL")]
    Cdcl,
    #[serde(rename = "SSL-DINO-BL")]
    SslDinoBl,
    #[serde(rename = "SSL-BYOL-BL")]
    SslByolBl,
}

impl MethodLabel {
    pub const ALL: [MethodLabel; 8] = [
        MethodLabel::Supervised,
        MethodLabel::SslDino,
        MethodLabel::SslByol,
        MethodLabel::SslDinoCb,
        MethodLabel::SslByolCb,
        MethodLabel::Cdcl,
        MethodLabel::SslDinoBl,
        MethodLabel::SslByolBl,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            MethodLabel::Supervised => "Supervised",
            MethodLabel::SslDino => "SSL-DINO",
            MethodLabel::SslByol => "SSL-BYOL",
            MethodLabel::SslDinoCb => "SSL-DINO-CB",
            MethodLabel::SslByolCb => "SSL-BYOL-CB",
            MethodLabel::Cdcl => "CDCL",
            MethodLabel::SslDinoBl => "SSL-DINO-BL",
            MethodLabel::SslByolBl => "SSL-BYOL-BL",
        }
    }

    /// Default loss configuration realising this recipe.
    pub fn loss_config(&self) -> LossConfig {
        let dino = LossConfig::dino();
        let byol = LossConfig {
            method: Method::Byol,
            n_local_crops: 0,
            ..dino
        };
        let cross = PairingStrategy::CrossBatchSameTreatment;
        match self {
            MethodLabel::Supervised => LossConfig {
                method: Method::WeaklySupervised,
                n_local_crops: 0,
                ..dino
            },
            MethodLabel::SslDino => dino,
            MethodLabel::SslByol => byol,
            MethodLabel::SslDinoCb => LossConfig { pairing: cross, ..dino },
            MethodLabel::SslByolCb => LossConfig { pairing: cross, ..byol },
            MethodLabel::Cdcl => LossConfig {
                pairing: cross,
                centering: CenterMode::PerDomain,
                use_barlow: true,
                ..dino
            },
            MethodLabel::SslDinoBl => LossConfig {
                use_barlow: true,
                lambda: 0.0,
                ..dino
            },
            MethodLabel::SslByolBl => LossConfig {
                use_barlow: true,
                lambda: 0.0,
                ..byol
            },
        }
    }

    /// Whether `cfg` is consistent with this recipe's defining choices.
    pub fn matches(&self, cfg: &LossConfig) -> bool {
        let d = self.loss_config();
        cfg.method == d.method
            && cfg.pairing == d.pairing
            && cfg.use_barlow == d.use_barlow
            && cfg.centering == d.centering
            && (!d.use_barlow || (cfg.lambda == 0.0) == (d.lambda == 0.0))
    }
}

impl fmt::Display for MethodLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for MethodLabel {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        MethodLabel::ALL
            .into_iter()
            .find(|m| m.name().eq_ignore_ascii_case(s))
            .ok_or_else(|| Error::config("method", format!("unknown method `{s}`")))
    }
}

/// Student and EMA teacher parameters. The teacher mirrors the student's
/// extractor and projector; the supervised baseline has no teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct StudentTeacher {
    pub arch: ArchConfig,
    pub method: Method,
    pub student: ParamSet,
    pub teacher: Option<ParamSet>,
}

impl StudentTeacher {
    pub fn init(arch: &ArchConfig, method: Method, seed: u64) -> Result<Self> {
        arch.validate()?;
        let mut rng = rng_for(seed, stream::INIT, 0);
        let mut student = arch.extractor().init(EXTRACTOR, &mut rng)?;
        let teacher = match method {
            Method::WeaklySupervised => {
                student.extend(arch.classifier().init(CLASSIFIER, &mut rng)?)?;
                None
            }
            Method::Dino | Method::Byol => {
                student.extend(arch.projector().init(PROJECTOR, &mut rng)?)?;
                let teacher = student.clone();
                if method == Method::Byol {
                    student.extend(arch.predictor().init(PREDICTOR, &mut rng)?)?;
                }
                Some(teacher)
            }
        };
        Ok(Self {
            arch: arch.clone(),
            method,
            student,
            teacher,
        })
    }

    /// Student forward on the tape: `(projector output, head output)`.
    /// The head output is the projector output except for BYOL, where the
    /// predictor follows, and the supervised baseline, where it is the
    /// classifier.
    pub fn student_forward(&self, x: &Tensor, tape: &mut Tape) -> Result<(Var, Var)> {
        let a = &self.arch;
        let x = tape.leaf(self.center_input(x));
        let feats = mlp_forward(&a.extractor(), EXTRACTOR, &self.student, x, tape)?;
        match self.method {
            Method::WeaklySupervised => {
                let logits = mlp_forward(&a.classifier(), CLASSIFIER, &self.student, feats, tape)?;
                Ok((logits, logits))
            }
            Method::Dino => {
                let p = mlp_forward(&a.projector(), PROJECTOR, &self.student, feats, tape)?;
                Ok((p, p))
            }
            Method::Byol => {
                let p = mlp_forward(&a.projector(), PROJECTOR, &self.student, feats, tape)?;
                let q = mlp_forward(&a.predictor(), PREDICTOR, &self.student, p, tape)?;
                Ok((p, q))
            }
        }
    }

    /// Teacher projector outputs for a batch of flattened views.
    pub fn teacher_infer(&self, x: &Tensor) -> Result<Tensor> {
        let teacher = self
            .teacher
            .as_ref()
            .ok_or_else(|| Error::usage("this method has no teacher"))?;
        let feats = mlp_infer(&self.arch.extractor(), EXTRACTOR, teacher, &self.center_input(x))?;
        mlp_infer(&self.arch.projector(), PROJECTOR, teacher, &feats)
    }

    /// Evaluation embedding: the teacher's extractor when there is one,
    /// else the student's.
    pub fn embed(&self, x: &Tensor) -> Result<Tensor> {
        let params = self.teacher.as_ref().unwrap_or(&self.student);
        mlp_infer(&self.arch.extractor(), EXTRACTOR, params, &self.center_input(x))
    }

    fn center_input(&self, x: &Tensor) -> Tensor {
        let c = self.arch.input_center;
        if c == 0.0 {
            x.clone()
        } else {
            x.map(|v| v - c)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn all_eight_methods_are_expressible() {
        for m in MethodLabel::ALL {
            let cfg = m.loss_config();
            cfg.validate().unwrap();
            assert!(m.matches(&cfg), "{m}");
            assert_eq!(m.name().parse::<MethodLabel>().unwrap(), m);
        }
        let cdcl = MethodLabel::Cdcl.loss_config();
        assert_eq!(cdcl.lambda, 0.25);
        assert_eq!(cdcl.centering, CenterMode::PerDomain);
        assert_eq!(cdcl.pairing, PairingStrategy::CrossBatchSameTreatment);
        assert!(!MethodLabel::SslDino.matches(&cdcl));
        assert_eq!(MethodLabel::SslDinoBl.loss_config().native_weight(), 0.0);
    }

    #[test]
    fn teacher_mirrors_student_backbone() {
        let arch = ArchConfig::new(12, 5);
        for method in [Method::Dino, Method::Byol] {
            let st = StudentTeacher::init(&arch, method, 3).unwrap();
            let teacher = st.teacher.as_ref().unwrap();
            for (name, p) in teacher.iter() {
                assert_eq!(&st.student.get(name).unwrap().value, &p.value);
            }
            assert_eq!(st.student.contains("pred.0.weight"), method == Method::Byol);
            assert!(!teacher.contains("pred.0.weight"));
        }
        let ws = StudentTeacher::init(&arch, Method::WeaklySupervised, 3).unwrap();
        assert!(ws.teacher.is_none());
        assert!(ws.student.contains("cls.0.weight"));
    }

    #[test]
    fn temperature_order_is_validated() {
        let cfg = LossConfig {
            tau_t: 0.5,
            ..LossConfig::dino()
        };
        assert!(matches!(cfg.validate(), Err(Error::Config { field, .. }) if field == "loss.tau_t"));
    }
}
