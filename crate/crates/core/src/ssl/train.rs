//! One optimisation step for each method, mini-batch assembly and the
//! training loop driver.

use rand::seq::SliceRandom;
use rand::Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::optim::{adamw_step, ema_update, AdamWConfig, LrSchedule, OptState};
use crate::rng::{rng_for, stream};
use crate::ssl::center::CenterState;
use crate::ssl::loss::{
    barlow_loss, byol_loss, combined_loss, cross_entropy, dino_loss, mean_entropy, teacher_probs, ViewLayout,
};
use crate::ssl::model::{BarlowPairing, LossConfig, Method, StudentTeacher};
use crate::tape::Tape;
use crate::tensor::Tensor;
use crate::views::{augment_crop, make_views, AugmentConfig, DatasetIndex, PairingStrategy, ViewBatch};

/// Iterations per log record and entropy report.
pub const REPORT_EVERY: u64 = 50;
/// Consecutive low-entropy iterations that trigger a collapse warning.
pub const COLLAPSE_PATIENCE: u64 = 100;
/// Fraction of `ln K` below which teacher entropy counts as collapsed.
pub const COLLAPSE_FRACTION: f64 = 1e-3;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TrainConfig {
    pub total_iters: u64,
    pub mini_batch_size: usize,
    pub ema_momentum: f64,
    pub schedule: LrSchedule,
    pub seed: u64,
    #[serde(default)]
    pub adamw: AdamWConfig,
}

impl TrainConfig {
    pub fn new(total_iters: u64, mini_batch_size: usize, seed: u64) -> Self {
        Self {
            total_iters,
            mini_batch_size,
            ema_momentum: 0.996,
            schedule: LrSchedule {
                base_lr: 1e-3,
                warmup_iters: total_iters / 10,
                total_iters,
                final_lr: 1e-5,
            },
            seed,
            adamw: AdamWConfig::default(),
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::config("train.total_iters", "must be >= 1"));
        }
        if self.mini_batch_size < 2 {
            return Err(Error::config("train.mini_batch_size", "must be >= 2"));
        }
        if !(0.0..=1.0).contains(&self.ema_momentum) {
            return Err(Error::config("train.ema_momentum", "must lie in [0, 1]"));
        }
        if self.schedule.total_iters != self.total_iters {
            return Err(Error::config(
                "train.schedule.total_iters",
                "must equal train.total_iters",
            ));
        }
        self.schedule.validate().map_err(|e| match e {
            Error::Config { field, message } => Error::config(format!("train.{field}"), message),
            other => other,
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct LossStats {
    pub count: u64,
    pub sum: f64,
    pub initial: Option<f64>,
    pub last: f64,
}

impl LossStats {
    fn record(&mut self, loss: f64) {
        self.initial.get_or_insert(loss);
        self.count += 1;
        self.sum += loss;
        self.last = loss;
    }

    pub fn mean(&self) -> f64 {
        self.sum / self.count.max(1) as f64
    }
}

/// Windowed teacher-entropy bookkeeping for the collapse detector.
#[derive(Debug, Clone, Copy, PartialEq, Default, Serialize, Deserialize)]
pub struct CollapseMonitor {
    pub window_loss: f64,
    pub window_entropy: f64,
    pub window_steps: u64,
    pub window_entropy_steps: u64,
    pub low_streak: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub struct RunCounters {
    pub barlow_constant_columns: u64,
    pub pairing_fallbacks: u64,
}

/// Everything besides parameters that a run carries between steps.
/// Randomness is counter-based: the generators for step `i` are derived
/// from `(seed, i)`, so `(seed, iteration)` is the complete rng state.
#[derive(Debug, Clone, PartialEq)]
pub struct RunState {
    pub iteration: u64,
    pub seed: u64,
    pub loss_stats: LossStats,
    pub centers: CenterState,
    pub opt: OptState,
    pub monitor: CollapseMonitor,
    pub counters: RunCounters,
    pub warnings: Vec<String>,
}

impl RunState {
    pub fn new(model: &StudentTeacher, loss: &LossConfig, train: &TrainConfig) -> Result<Self> {
        Ok(Self {
            iteration: 0,
            seed: train.seed,
            loss_stats: LossStats::default(),
            centers: CenterState::new(loss.centering, model.arch.out_dim, loss.center_momentum)?,
            opt: OptState::new(train.adamw, &model.student),
            monitor: CollapseMonitor::default(),
            counters: RunCounters::default(),
            warnings: Vec::new(),
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct StepReport {
    /// Iteration the step ran at (before increment).
    pub iteration: u64,
    pub loss: f64,
    pub native_loss: Option<f64>,
    pub barlow_loss: Option<f64>,
    pub lr: f64,
    /// Mean entropy of the teacher's sharpened distribution (DINO only).
    pub entropy: Option<f64>,
}

/// A log record covering the last `REPORT_EVERY` iterations.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct LogRecord {
    pub iter: u64,
    pub loss: f64,
    pub lr: f64,
    pub entropy: Option<f64>,
}

fn layout_of(units: &[ViewBatch]) -> Result<ViewLayout> {
    let first = units.first().ok_or_else(|| Error::usage("empty mini-batch"))?;
    let (g, l) = (first.global.len(), first.local.len());
    if units.iter().any(|u| u.global.len() != g || u.local.len() != l) {
        return Err(Error::usage("view sets in a mini-batch differ in size"));
    }
    Ok(ViewLayout {
        n_units: units.len(),
        n_views: g + l,
        n_global: g,
    })
}

fn flatten<'a>(views: impl Iterator<Item = &'a Tensor>, dim: usize) -> Result<Tensor> {
    let mut data = Vec::new();
    let mut rows = 0;
    for v in views {
        if v.len() != dim {
            return Err(Error::Shape(format!(
                "view of {} values, network expects {dim}",
                v.len()
            )));
        }
        data.extend_from_slice(v.data());
        rows += 1;
    }
    Ok(Tensor::from_raw(&[rows, dim], data))
}

fn source_ids(units: &[ViewBatch]) -> Vec<u64> {
    let mut ids: Vec<u64> = units
        .iter()
        .flat_map(|u| u.all_views().map(|v| v.source_sample_id))
        .collect();
    ids.sort_unstable();
    ids.dedup();
    ids
}

fn non_finite(iteration: u64, units: &[ViewBatch], detail: String) -> Error {
    Error::NonFiniteLoss {
        iteration,
        sample_ids: source_ids(units),
        detail,
    }
}

fn finish_step(
    model: &mut StudentTeacher,
    state: &mut RunState,
    tcfg: &TrainConfig,
    report: &StepReport,
) -> Result<()> {
    adamw_step(&mut model.student, &mut state.opt, report.lr)?;
    if let Some(teacher) = model.teacher.as_mut() {
        ema_update(teacher, &model.student, tcfg.ema_momentum)?;
    }
    state.loss_stats.record(report.loss);
    let mon = &mut state.monitor;
    mon.window_loss += report.loss;
    mon.window_steps += 1;
    if let Some(h) = report.entropy {
        mon.window_entropy += h;
        mon.window_entropy_steps += 1;
        let threshold = COLLAPSE_FRACTION * (model.arch.out_dim as f64).ln();
        if h < threshold {
            mon.low_streak += 1;
            if mon.low_streak == COLLAPSE_PATIENCE {
                state.warnings.push(format!(
                    "teacher output collapse: entropy below {threshold:.3e} for {COLLAPSE_PATIENCE} iterations ending at {}",
                    report.iteration
                ));
                log::warn!("{}", state.warnings.last().expect("just pushed"));
            }
        } else {
            mon.low_streak = 0;
        }
    }
    Ok(())
}

/// One self-supervised step over a mini-batch of view sets.
pub fn train_step(
    model: &mut StudentTeacher,
    state: &mut RunState,
    units: &[ViewBatch],
    cfg: &LossConfig,
    tcfg: &TrainConfig,
) -> Result<StepReport> {
    if model.method != cfg.method || cfg.method == Method::WeaklySupervised {
        return Err(Error::usage(format!(
            "train_step runs self-supervised methods; model is {:?}, config {:?}",
            model.method, cfg.method
        )));
    }
    let layout = layout_of(units)?;
    let iteration = state.iteration;
    let lr = tcfg.schedule.lr_at(iteration)?;
    let dim = model.arch.input_dim;
    let student_x = flatten(units.iter().flat_map(|u| u.all_views().map(|v| &v.image)), dim)?;
    let teacher_x = flatten(units.iter().flat_map(|u| u.global.iter().map(|v| &v.image)), dim)?;
    let domains: Vec<u32> = units
        .iter()
        .flat_map(|u| u.global.iter().map(|v| v.source_batch_id))
        .collect();

    let native_weight = cfg.native_weight();
    let need_teacher = native_weight > 0.0 || (cfg.use_barlow && cfg.barlow_pairing == BarlowPairing::TeacherStudent);
    if cfg.method == Method::Byol && (layout.n_global != 2 || layout.n_views != 2) {
        return Err(Error::usage("BYOL needs exactly two global views per unit"));
    }
    if cfg.use_barlow && layout.n_global < 2 {
        return Err(Error::usage("the Barlow term needs two global views per unit"));
    }

    let numeric = |e: Error| match e {
        Error::Numeric { context, message } => non_finite(iteration, units, format!("{context}: {message}")),
        other => other,
    };

    let teacher_out = if need_teacher {
        Some(model.teacher_infer(&teacher_x).map_err(numeric)?)
    } else {
        None
    };

    let mut tape = Tape::new();
    let (proj, head) = model.student_forward(&student_x, &mut tape).map_err(numeric)?;

    let mut entropy = None;
    let native = if native_weight > 0.0 {
        let t = teacher_out.as_ref().expect("teacher computed when native loss is used");
        Some(match cfg.method {
            Method::Dino => {
                let centers = state.centers.center_rows(&domains);
                let probs = teacher_probs(t, &centers, cfg.tau_t);
                entropy = Some(mean_entropy(&probs));
                dino_loss(&mut tape, head, &probs, layout, cfg.tau_s)?
            }
            Method::Byol => byol_loss(&mut tape, head, t).map_err(numeric)?,
            Method::WeaklySupervised => unreachable!("rejected above"),
        })
    } else {
        None
    };

    let barlow = if cfg.use_barlow {
        let first: Vec<usize> = (0..layout.n_units).map(|u| u * layout.n_views).collect();
        let a = tape.select_rows(proj, &first);
        let b = match cfg.barlow_pairing {
            BarlowPairing::StudentStudent => {
                let second: Vec<usize> = first.iter().map(|i| i + 1).collect();
                tape.select_rows(proj, &second)
            }
            BarlowPairing::TeacherStudent => {
                let t = teacher_out
                    .as_ref()
                    .expect("teacher computed for teacher-student Barlow");
                let rows: Vec<usize> = (0..layout.n_units).map(|u| u * layout.n_global + 1).collect();
                tape.leaf(t.select_rows(&rows))
            }
        };
        let (loss, stats) = barlow_loss(&mut tape, a, b, cfg.barlow_alpha)?;
        state.counters.barlow_constant_columns += stats.constant_columns as u64;
        Some(loss)
    } else {
        None
    };

    let total = match (native, barlow) {
        (Some(n), Some(b)) => combined_loss(&mut tape, n, b, cfg.lambda)?,
        (Some(n), None) => n,
        (None, Some(b)) => b,
        (None, None) => return Err(Error::usage("configuration yields no loss term")),
    };
    let loss = tape.value(total).item();
    if !loss.is_finite() {
        return Err(non_finite(iteration, units, "loss value".into()));
    }

    model.student.zero_grad();
    tape.backward(total, &mut model.student)?;
    let report = StepReport {
        iteration,
        loss,
        native_loss: native.map(|v| tape.value(v).item()),
        barlow_loss: barlow.map(|v| tape.value(v).item()),
        lr,
        entropy,
    };
    finish_step(model, state, tcfg, &report)?;
    if let (Some(t), Method::Dino) = (teacher_out.as_ref(), cfg.method) {
        if native.is_some() {
            state.centers.update(t, &domains)?;
        }
    }
    state.iteration += 1;
    Ok(report)
}

/// One cross-entropy step of the supervised baseline on flattened images.
pub fn weakly_supervised_step(
    model: &mut StudentTeacher,
    state: &mut RunState,
    images: &Tensor,
    labels: &[usize],
    tcfg: &TrainConfig,
) -> Result<StepReport> {
    if model.method != Method::WeaklySupervised {
        return Err(Error::usage("weakly_supervised_step needs a classifier model"));
    }
    let iteration = state.iteration;
    let lr = tcfg.schedule.lr_at(iteration)?;
    let mut tape = Tape::new();
    let (_, logits) = model.student_forward(images, &mut tape).map_err(|e| match e {
        Error::Numeric { context, message } => Error::NonFiniteLoss {
            iteration,
            sample_ids: Vec::new(),
            detail: format!("{context}: {message}"),
        },
        other => other,
    })?;
    let total = cross_entropy(&mut tape, logits, labels)?;
    let loss = tape.value(total).item();
    if !loss.is_finite() {
        return Err(Error::NonFiniteLoss {
            iteration,
            sample_ids: Vec::new(),
            detail: "loss value".into(),
        });
    }
    model.student.zero_grad();
    tape.backward(total, &mut model.student)?;
    let report = StepReport {
        iteration,
        loss,
        native_loss: Some(loss),
        barlow_loss: None,
        lr,
        entropy: None,
    };
    finish_step(model, state, tcfg, &report)?;
    state.iteration += 1;
    Ok(report)
}

/// Item `k` of an endless stream that visits `0..n` in a fresh random
/// order every epoch.
struct EpochStream {
    seed: u64,
    tag: u64,
    n: usize,
    cached: Option<(u64, Vec<usize>)>,
}

impl EpochStream {
    fn new(seed: u64, tag: u64, n: usize) -> Self {
        Self {
            seed,
            tag,
            n,
            cached: None,
        }
    }

    fn get(&mut self, k: u64) -> usize {
        let n = self.n as u64;
        let epoch = k / n;
        if self.cached.as_ref().map(|c| c.0) != Some(epoch) {
            let mut order: Vec<usize> = (0..self.n).collect();
            order.shuffle(&mut rng_for(self.seed, stream::EPOCH_ORDER, epoch ^ (self.tag << 48)));
            self.cached = Some((epoch, order));
        }
        self.cached.as_ref().expect("filled above").1[(k % n) as usize]
    }
}

/// Builds the inputs of step `iteration`. Every draw is keyed by the global
/// unit counter, so a step's inputs depend only on `(seed, iteration)`.
#[derive(Debug, Clone)]
pub struct UnitSampler {
    pub seed: u64,
    pub loss: LossConfig,
    pub augment: AugmentConfig,
    pub mini_batch_size: usize,
}

const SAMPLE_ORDER: u64 = 1;
const TREATMENT_ORDER: u64 = 2;

impl UnitSampler {
    /// View sets for one self-supervised step, plus the number of
    /// treatments that had to fall back to same-image pairing.
    pub fn ssl_units(&self, index: &DatasetIndex, iteration: u64) -> Result<(Vec<ViewBatch>, u64)> {
        if index.is_empty() {
            return Err(Error::Sampling("no training samples".into()));
        }
        let plan = self.loss.crop_plan();
        let mb = self.mini_batch_size as u64;
        let mut fallbacks = 0;
        let mut units = Vec::with_capacity(self.mini_batch_size);
        match self.loss.pairing {
            PairingStrategy::SameImage => {
                let mut order = EpochStream::new(self.seed, SAMPLE_ORDER, index.len());
                for j in 0..mb {
                    let k = iteration * mb + j;
                    let s = index.samples()[order.get(k)];
                    let mut rng = rng_for(self.seed, stream::VIEWS, k);
                    units.push(make_views(
                        s,
                        None,
                        plan,
                        PairingStrategy::SameImage,
                        &self.augment,
                        &mut rng,
                    )?);
                }
            }
            PairingStrategy::CrossBatchSameTreatment => {
                let treatments: Vec<u32> = index.treatments().collect();
                let mut order = EpochStream::new(self.seed, TREATMENT_ORDER, treatments.len());
                for j in 0..mb {
                    let k = iteration * mb + j;
                    let t = treatments[order.get(k)];
                    let mut pair_rng = rng_for(self.seed, stream::PAIRS, k);
                    let mut rng = rng_for(self.seed, stream::VIEWS, k);
                    let unit = match index.sample_pair(t, &mut pair_rng) {
                        Ok((a, b)) => make_views(
                            a,
                            Some(b),
                            plan,
                            PairingStrategy::CrossBatchSameTreatment,
                            &self.augment,
                            &mut rng,
                        )?,
                        Err(Error::Sampling(_)) => {
                            fallbacks += 1;
                            let pool: Vec<_> = index.samples().iter().filter(|s| s.meta.treatment_id == t).collect();
                            let s = pool[pair_rng.random_range(0..pool.len())];
                            make_views(s, None, plan, PairingStrategy::SameImage, &self.augment, &mut rng)?
                        }
                        Err(e) => return Err(e),
                    };
                    units.push(unit);
                }
            }
        }
        Ok((units, fallbacks))
    }

    /// One augmented global crop per sample with its treatment label.
    pub fn supervised_batch(&self, index: &DatasetIndex, iteration: u64) -> Result<(Tensor, Vec<usize>)> {
        if index.is_empty() {
            return Err(Error::Sampling("no training samples".into()));
        }
        let mb = self.mini_batch_size as u64;
        let mut order = EpochStream::new(self.seed, SAMPLE_ORDER, index.len());
        let mut data = Vec::new();
        let mut labels = Vec::with_capacity(self.mini_batch_size);
        for j in 0..mb {
            let k = iteration * mb + j;
            let s = index.samples()[order.get(k)];
            let mut rng = rng_for(self.seed, stream::VIEWS, k);
            let view = augment_crop(&s.image, self.augment.global_crop_scale, &self.augment, &mut rng)?;
            data.extend_from_slice(view.data());
            labels.push(s.meta.treatment_id as usize);
        }
        let dim = data.len() / self.mini_batch_size;
        Ok((Tensor::from_raw(&[self.mini_batch_size, dim], data), labels))
    }
}

/// Drives a run: model, state and the recipe needed to produce each step.
#[derive(Debug, Clone)]
pub struct Trainer<'a> {
    pub model: StudentTeacher,
    pub state: RunState,
    pub loss: LossConfig,
    pub train: TrainConfig,
    pub sampler: UnitSampler,
    pub index: DatasetIndex<'a>,
}

impl<'a> Trainer<'a> {
    pub fn new(
        model: StudentTeacher,
        state: RunState,
        loss: LossConfig,
        train: TrainConfig,
        augment: AugmentConfig,
        index: DatasetIndex<'a>,
    ) -> Result<Self> {
        loss.validate()?;
        train.validate()?;
        augment.validate()?;
        if model.method != loss.method {
            return Err(Error::usage("model and loss configuration disagree on the method"));
        }
        let sampler = UnitSampler {
            seed: train.seed,
            loss,
            augment,
            mini_batch_size: train.mini_batch_size,
        };
        Ok(Self {
            model,
            state,
            loss,
            train,
            sampler,
            index,
        })
    }

    pub fn done(&self) -> bool {
        self.state.iteration >= self.train.total_iters
    }

    pub fn step(&mut self) -> Result<StepReport> {
        let it = self.state.iteration;
        if self.loss.method == Method::WeaklySupervised {
            let (x, y) = self.sampler.supervised_batch(&self.index, it)?;
            weakly_supervised_step(&mut self.model, &mut self.state, &x, &y, &self.train)
        } else {
            let (units, fallbacks) = self.sampler.ssl_units(&self.index, it)?;
            if fallbacks > 0 {
                self.state.counters.pairing_fallbacks += fallbacks;
                log::debug!("iteration {it}: {fallbacks} same-image pairing fallbacks");
            }
            train_step(&mut self.model, &mut self.state, &units, &self.loss, &self.train)
        }
    }

    /// Runs until `until` (capped at the schedule end), returning a log
    /// record at each reporting boundary.
    pub fn run_until(&mut self, until: u64, mut on_record: impl FnMut(&LogRecord)) -> Result<()> {
        let until = until.min(self.train.total_iters);
        while self.state.iteration < until {
            let report = self.step()?;
            let it = self.state.iteration;
            if it.is_multiple_of(REPORT_EVERY) || it == self.train.total_iters {
                let mon = &mut self.state.monitor;
                let record = LogRecord {
                    iter: it,
                    loss: mon.window_loss / mon.window_steps.max(1) as f64,
                    lr: report.lr,
                    entropy: (mon.window_entropy_steps > 0)
                        .then(|| mon.window_entropy / mon.window_entropy_steps as f64),
                };
                mon.window_loss = 0.0;
                mon.window_steps = 0;
                mon.window_entropy = 0.0;
                mon.window_entropy_steps = 0;
                on_record(&record);
            }
        }
        Ok(())
    }
}
