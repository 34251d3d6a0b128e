//! Augmented crops, multi-crop view sets and the pairing rules that decide
//! which image(s) a view set is cut from.

use std::collections::BTreeMap;

use rand::Rng;
use rand_distr::{Distribution, Normal};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::synth::{DatasetManifest, Sample};
use crate::tensor::Tensor;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct AugmentConfig {
    /// Fraction of the image area covered by a global crop.
    pub global_crop_scale: (f64, f64),
    pub local_crop_scale: (f64, f64),
    /// `(height, width)` every crop is resized to.
    pub output_size: (usize, usize),
    pub additive_noise_sigma: f64,
    pub gain_jitter: (f64, f64),
    pub channel_dropout_prob: f64,
    pub hflip_prob: f64,
    pub vflip_prob: f64,
}

impl Default for AugmentConfig {
    fn default() -> Self {
        Self {
            global_crop_scale: (0.4, 1.0),
            local_crop_scale: (0.05, 0.4),
            output_size: (16, 16),
            additive_noise_sigma: 0.02,
            gain_jitter: (0.9, 1.1),
            channel_dropout_prob: 0.0,
            hflip_prob: 0.5,
            vflip_prob: 0.5,
        }
    }
}

impl AugmentConfig {
    /// Every jitter switched off; crops are plain resized windows.
    pub fn plain(output_size: (usize, usize)) -> Self {
        Self {
            output_size,
            additive_noise_sigma: 0.0,
            gain_jitter: (1.0, 1.0),
            channel_dropout_prob: 0.0,
            hflip_prob: 0.0,
            vflip_prob: 0.0,
            ..Self::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        let scale_ok = |(lo, hi): (f64, f64)| lo > 0.0 && lo <= hi && hi <= 1.0;
        if !scale_ok(self.global_crop_scale) {
            return Err(Error::config(
                "augment.global_crop_scale",
                "must satisfy 0 < min <= max <= 1",
            ));
        }
        if !scale_ok(self.local_crop_scale) {
            return Err(Error::config(
                "augment.local_crop_scale",
                "must satisfy 0 < min <= max <= 1",
            ));
        }
        if self.local_crop_scale.1 > self.global_crop_scale.0 {
            return Err(Error::config(
                "augment.local_crop_scale",
                "local max must not exceed global min",
            ));
        }
        if self.output_size.0 == 0 || self.output_size.1 == 0 {
            return Err(Error::config("augment.output_size", "must be non-zero"));
        }
        for (field, p) in [
            ("augment.channel_dropout_prob", self.channel_dropout_prob),
            ("augment.hflip_prob", self.hflip_prob),
            ("augment.vflip_prob", self.vflip_prob),
        ] {
            if !(0.0..=1.0).contains(&p) {
                return Err(Error::config(field, "probability outside [0, 1]"));
            }
        }
        if !(self.gain_jitter.0 > 0.0 && self.gain_jitter.0 <= self.gain_jitter.1) {
            return Err(Error::config("augment.gain_jitter", "must satisfy 0 < min <= max"));
        }
        if !(self.additive_noise_sigma >= 0.0) {
            return Err(Error::config("augment.additive_noise_sigma", "must be >= 0"));
        }
        Ok(())
    }

    pub fn view_len(&self, channels: usize) -> usize {
        channels * self.output_size.0 * self.output_size.1
    }
}

/// Samples a bilinearly interpolated value with half-pixel centres from the
/// window `[y0, y0+ch) × [x0, x0+cw)` of one channel plane.
fn resize_window(
    plane: &[f64],
    width: usize,
    (y0, x0, ch, cw): (usize, usize, usize, usize),
    (oh, ow): (usize, usize),
    out: &mut [f64],
) {
    let sy = ch as f64 / oh as f64;
    let sx = cw as f64 / ow as f64;
    for i in 0..oh {
        let fy = ((i as f64 + 0.5) * sy - 0.5).clamp(0.0, (ch - 1) as f64);
        let ya = fy.floor() as usize;
        let yb = (ya + 1).min(ch - 1);
        let ty = fy - ya as f64;
        for j in 0..ow {
            let fx = ((j as f64 + 0.5) * sx - 0.5).clamp(0.0, (cw - 1) as f64);
            let xa = fx.floor() as usize;
            let xb = (xa + 1).min(cw - 1);
            let tx = fx - xa as f64;
            let at = |y: usize, x: usize| plane[(y0 + y) * width + x0 + x];
            let top = at(ya, xa) * (1.0 - tx) + at(ya, xb) * tx;
            let bot = at(yb, xa) * (1.0 - tx) + at(yb, xb) * tx;
            out[i * ow + j] = top * (1.0 - ty) + bot * ty;
        }
    }
}

/// Bilinear resize of a whole `channels × h × w` image.
pub fn resize_bilinear(image: &Tensor, size: (usize, usize)) -> Result<Tensor> {
    let [c, h, w] = image_dims(image)?;
    let (oh, ow) = size;
    let mut out = vec![0.0; c * oh * ow];
    for ch in 0..c {
        resize_window(
            &image.data()[ch * h * w..(ch + 1) * h * w],
            w,
            (0, 0, h, w),
            size,
            &mut out[ch * oh * ow..(ch + 1) * oh * ow],
        );
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

fn image_dims(image: &Tensor) -> Result<[usize; 3]> {
    match image.shape() {
        &[c, h, w] if c > 0 && h > 0 && w > 0 => Ok([c, h, w]),
        other => Err(Error::Shape(format!(
            "expected channels×height×width image, got {other:?}"
        ))),
    }
}

/// Deterministic evaluation view: the full image resized to `output_size`.
pub fn full_view(image: &Tensor, output_size: (usize, usize)) -> Result<Tensor> {
    resize_bilinear(image, output_size)
}

/// Random area-scaled crop, resized and jittered.
///
/// Every random draw is made regardless of the configured probabilities,
/// so two configs that differ only in probabilities consume the same
/// random stream.
pub fn augment_crop(
    image: &Tensor,
    scale_range: (f64, f64),
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<Tensor> {
    let [c, h, w] = image_dims(image)?;
    let (lo, hi) = scale_range;
    if !(lo > 0.0 && lo <= hi && hi <= 1.0) {
        return Err(Error::usage(format!("crop scale range {scale_range:?} outside (0, 1]")));
    }
    let scale = if hi > lo { rng.random_range(lo..=hi) } else { lo };
    let side = scale.sqrt();
    let ch = ((h as f64 * side).round() as usize).clamp(1, h);
    let cw = ((w as f64 * side).round() as usize).clamp(1, w);
    let y0 = rng.random_range(0..=h - ch);
    let x0 = rng.random_range(0..=w - cw);

    let (oh, ow) = cfg.output_size;
    let plane = oh * ow;
    let mut out = vec![0.0; c * plane];
    for k in 0..c {
        resize_window(
            &image.data()[k * h * w..(k + 1) * h * w],
            w,
            (y0, x0, ch, cw),
            (oh, ow),
            &mut out[k * plane..(k + 1) * plane],
        );
    }

    let hflip = rng.random::<f64>() < cfg.hflip_prob;
    let vflip = rng.random::<f64>() < cfg.vflip_prob;
    if hflip || vflip {
        let src = out.clone();
        for k in 0..c {
            for i in 0..oh {
                for j in 0..ow {
                    let si = if vflip { oh - 1 - i } else { i };
                    let sj = if hflip { ow - 1 - j } else { j };
                    out[k * plane + i * ow + j] = src[k * plane + si * ow + sj];
                }
            }
        }
    }

    let (glo, ghi) = cfg.gain_jitter;
    let noise = Normal::new(0.0, cfg.additive_noise_sigma).map_err(|e| Error::usage(e.to_string()))?;
    for k in 0..c {
        let gain = if ghi > glo { rng.random_range(glo..=ghi) } else { glo };
        let dropped = rng.random::<f64>() < cfg.channel_dropout_prob;
        let chan = &mut out[k * plane..(k + 1) * plane];
        if dropped {
            chan.fill(0.0);
            continue;
        }
        for v in chan.iter_mut() {
            let n = if cfg.additive_noise_sigma > 0.0 {
                noise.sample(rng)
            } else {
                0.0
            };
            *v = (*v * gain + n).clamp(0.0, 1.0);
        }
    }
    Tensor::from_vec(&[c, oh, ow], out)
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct CropPlan {
    /// Total global crops in a view set.
    pub n_global: usize,
    /// Total local crops in a view set.
    pub n_local: usize,
}

impl CropPlan {
    /// Two global and six local crops.
    pub const DINO: CropPlan = CropPlan {
        n_global: 2,
        n_local: 6,
    };
    /// Two global crops.
    pub const BYOL: CropPlan = CropPlan {
        n_global: 2,
        n_local: 0,
    };
    /// One global crop per image.
    pub const SINGLE: CropPlan = CropPlan {
        n_global: 1,
        n_local: 0,
    };

    pub fn total(&self) -> usize {
        self.n_global + self.n_local
    }

    /// Per-source `(global, local)` counts under a pairing strategy.
    pub fn per_source(&self, strategy: PairingStrategy) -> Result<(usize, usize)> {
        if self.n_global == 0 {
            return Err(Error::config("crop_plan.n_global", "must be >= 1"));
        }
        match strategy {
            PairingStrategy::SameImage => Ok((self.n_global, self.n_local)),
            PairingStrategy::CrossBatchSameTreatment => {
                if !self.n_global.is_multiple_of(2) || !self.n_local.is_multiple_of(2) {
                    return Err(Error::config(
                        "crop_plan",
                        "paired plans need even global and local counts",
                    ));
                }
                Ok((self.n_global / 2, self.n_local / 2))
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PairingStrategy {
    SameImage,
    CrossBatchSameTreatment,
}

#[derive(Debug, Clone, PartialEq)]
pub struct View {
    pub image: Tensor,
    pub source_sample_id: u64,
    pub source_batch_id: u32,
}

/// The views cut for one mini-batch unit. Global views are the only ones
/// shown to the teacher.
#[derive(Debug, Clone, PartialEq)]
pub struct ViewBatch {
    pub global: Vec<View>,
    pub local: Vec<View>,
    pub treatment_id: u32,
}

impl ViewBatch {
    /// Global views first, then local views.
    pub fn all_views(&self) -> impl Iterator<Item = &View> {
        self.global.iter().chain(&self.local)
    }

    pub fn teacher_views(&self) -> &[View] {
        &self.global
    }

    pub fn len(&self) -> usize {
        self.global.len() + self.local.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

pub fn make_views(
    sample_a: &Sample,
    sample_b: Option<&Sample>,
    plan: CropPlan,
    strategy: PairingStrategy,
    cfg: &AugmentConfig,
    rng: &mut impl Rng,
) -> Result<ViewBatch> {
    let (n_g, n_l) = plan.per_source(strategy)?;
    let sources: Vec<&Sample> = match (strategy, sample_b) {
        (PairingStrategy::SameImage, None) => vec![sample_a],
        (PairingStrategy::SameImage, Some(_)) => return Err(Error::usage("same-image pairing takes a single sample")),
        (PairingStrategy::CrossBatchSameTreatment, Some(b)) => {
            if b.meta.treatment_id != sample_a.meta.treatment_id {
                return Err(Error::usage(format!(
                    "paired samples have treatments {} and {}",
                    sample_a.meta.treatment_id, b.meta.treatment_id
                )));
            }
            if b.meta.batch_id == sample_a.meta.batch_id {
                return Err(Error::usage(format!("paired samples share batch {}", b.meta.batch_id)));
            }
            vec![sample_a, b]
        }
        (PairingStrategy::CrossBatchSameTreatment, None) => {
            return Err(Error::usage("cross-batch pairing needs two samples"))
        }
    };
    let view = |s: &Sample, scale, rng: &mut _| -> Result<View> {
        Ok(View {
            image: augment_crop(&s.image, scale, cfg, rng)?,
            source_sample_id: s.meta.sample_id,
            source_batch_id: s.meta.batch_id,
        })
    };
    let mut global = Vec::with_capacity(plan.n_global);
    // Interleave globals so the first two come from different sources.
    for _ in 0..n_g {
        for s in &sources {
            global.push(view(s, cfg.global_crop_scale, rng)?);
        }
    }
    let mut local = Vec::with_capacity(plan.n_local);
    for s in &sources {
        for _ in 0..n_l {
            local.push(view(s, cfg.local_crop_scale, rng)?);
        }
    }
    Ok(ViewBatch {
        global,
        local,
        treatment_id: sample_a.meta.treatment_id,
    })
}

/// Training samples grouped by treatment, for cross-batch pairing.
#[derive(Debug, Clone)]
pub struct DatasetIndex<'a> {
    samples: Vec<&'a Sample>,
    by_treatment: BTreeMap<u32, Vec<usize>>,
}

impl<'a> DatasetIndex<'a> {
    /// Index over the manifest's training samples.
    pub fn training(manifest: &DatasetManifest, samples: &'a [Sample]) -> Self {
        let keep: std::collections::BTreeSet<u64> = manifest.training_samples().iter().map(|s| s.sample_id).collect();
        Self::new(samples.iter().filter(|s| keep.contains(&s.meta.sample_id)).collect())
    }

    pub fn new(samples: Vec<&'a Sample>) -> Self {
        let mut by_treatment: BTreeMap<u32, Vec<usize>> = BTreeMap::new();
        for (i, s) in samples.iter().enumerate() {
            by_treatment.entry(s.meta.treatment_id).or_default().push(i);
        }
        Self { samples, by_treatment }
    }

    pub fn samples(&self) -> &[&'a Sample] {
        &self.samples
    }

    pub fn len(&self) -> usize {
        self.samples.len()
    }

    pub fn is_empty(&self) -> bool {
        self.samples.is_empty()
    }

    pub fn treatments(&self) -> impl Iterator<Item = u32> + '_ {
        self.by_treatment.keys().copied()
    }

    /// Number of distinct batches a treatment appears in.
    pub fn batch_count(&self, treatment_id: u32) -> usize {
        self.by_treatment
            .get(&treatment_id)
            .map(|idx| {
                let mut b: Vec<u32> = idx.iter().map(|&i| self.samples[i].meta.batch_id).collect();
                b.sort_unstable();
                b.dedup();
                b.len()
            })
            .unwrap_or(0)
    }

    /// Treatments that can be paired across batches.
    pub fn pairable_treatments(&self) -> Vec<u32> {
        self.treatments().filter(|&t| self.batch_count(t) >= 2).collect()
    }

    /// Two samples of `treatment_id` from different batches, uniform over
    /// ordered pairs with distinct batches.
    pub fn sample_pair(&self, treatment_id: u32, rng: &mut impl Rng) -> Result<(&'a Sample, &'a Sample)> {
        if self.batch_count(treatment_id) < 2 {
            return Err(Error::Sampling(format!(
                "treatment {treatment_id} is present in fewer than two batches"
            )));
        }
        let idx = &self.by_treatment[&treatment_id];
        loop {
            let a = self.samples[idx[rng.random_range(0..idx.len())]];
            let b = self.samples[idx[rng.random_range(0..idx.len())]];
            if a.meta.batch_id != b.meta.batch_id {
                return Ok((a, b));
            }
        }
    }
}
