//! Synthetic high-content-screening images.
//!
//! Each image carries two independently tunable signals: a treatment
//! morphology (Gaussian blobs whose count, size, elongation and colour are
//! fixed per treatment) and a batch confounder (per-channel gain, offset,
//! channel crosstalk and an illumination gradient, fixed per batch). The
//! amplitude of each is set by `treatment_strength` and `batch_strength`.
//!
//! Pixel model, per channel `c` and pixel `p`:
//!
//! ```text
//! pre_c  = gain_c · (α_t · morph_c(p) + background · α_b · illum(p))
//! image  = clamp(Σ_k crosstalk_ck · pre_k + offset_c + N(0, σ²), 0, 1)
//! ```
//!
//! Gain, crosstalk and offset collapse to identity / zero as `α_b → 0`, so
//! a zero batch strength removes every batch-dependent term.

use std::collections::{BTreeMap, BTreeSet};
use std::fs;
use std::io::{BufReader, BufWriter, Read, Write};
use std::path::Path;

use rand::seq::SliceRandom;
use rand::Rng;
use rand_distr::{Distribution, LogNormal, Normal, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::hash::canonical_hash;
use crate::rng::{rng_for, stream};
use crate::tensor::Tensor;

/// Weight of the illumination field added under the morphology.
const BACKGROUND: f64 = 0.4;
/// Log-normal spread of the per-channel gain.
const GAIN_SCALE: f64 = 0.02;
/// Upper end of the uniform per-channel offset.
const OFFSET_SCALE: f64 = 0.03;
/// Largest weight of the random mixing matrix in the crosstalk.
const CROSSTALK: f64 = 0.3;
const ILLUMINATION_RANGE: (f64, f64) = (0.6, 1.0);
const BLOB_COUNT_RANGE: (f64, f64) = (6.0, 20.0);
const BLOB_RADIUS_RANGE: (f64, f64) = (1.0, 3.0);
const INTENSITY_RANGE: (f64, f64) = (0.1, 1.0);
/// Log-normal sigma of individual blob radii around the treatment mean.
const RADIUS_SPREAD: f64 = 0.2;
const MOA_JITTER: f64 = 0.10;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct GeneratorConfig {
    pub height: usize,
    pub width: usize,
    pub channels: usize,
    pub n_batches: usize,
    pub n_treatments: usize,
    /// Images per treatment per batch.
    pub replicates_per_batch: usize,
    /// The first `n_control_treatments` treatment ids are negative controls.
    pub n_control_treatments: usize,
    pub n_moa_classes: usize,
    pub treatment_strength: f64,
    pub batch_strength: f64,
    pub noise_sigma: f64,
    pub seed: u64,
}

impl Default for GeneratorConfig {
    fn default() -> Self {
        Self {
            height: 32,
            width: 32,
            channels: 3,
            n_batches: 6,
            n_treatments: 20,
            replicates_per_batch: 5,
            n_control_treatments: 4,
            n_moa_classes: 16,
            treatment_strength: 0.5,
            batch_strength: 1.0,
            noise_sigma: 0.05,
            seed: 0,
        }
    }
}

impl GeneratorConfig {
    pub fn validate(&self) -> Result<()> {
        let positive = [
            ("height", self.height),
            ("width", self.width),
            ("channels", self.channels),
            ("n_batches", self.n_batches),
            ("n_treatments", self.n_treatments),
            ("replicates_per_batch", self.replicates_per_batch),
            ("n_moa_classes", self.n_moa_classes),
        ];
        for (field, v) in positive {
            if v == 0 {
                return Err(Error::config(field, "must be >= 1"));
            }
        }
        if self.n_control_treatments > self.n_treatments {
            return Err(Error::config("n_control_treatments", "must not exceed n_treatments"));
        }
        if self.n_moa_classes > self.n_treatments {
            return Err(Error::config("n_moa_classes", "must not exceed n_treatments"));
        }
        for (field, v) in [
            ("treatment_strength", self.treatment_strength),
            ("batch_strength", self.batch_strength),
            ("noise_sigma", self.noise_sigma),
        ] {
            if !(v >= 0.0) || !v.is_finite() {
                return Err(Error::config(field, "must be a finite value >= 0"));
            }
        }
        Ok(())
    }

    pub fn n_samples(&self) -> usize {
        self.n_batches * self.n_treatments * self.replicates_per_batch
    }

    pub fn image_len(&self) -> usize {
        self.channels * self.height * self.width
    }

    /// MoA id assigned to control treatments: one past the treatment classes.
    pub fn control_moa(&self) -> u32 {
        self.n_moa_classes as u32
    }

    pub fn sample_id(&self, batch: usize, treatment: usize, replicate: usize) -> u64 {
        ((batch * self.n_treatments + treatment) * self.replicates_per_batch + replicate) as u64
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TreatmentPrototype {
    pub treatment_id: u32,
    pub moa_id: u32,
    pub is_control: bool,
    pub blob_count_mean: f64,
    pub blob_radius_mean: f64,
    pub eccentricity: f64,
    pub intensity: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BatchProfile {
    pub batch_id: u32,
    pub gain: Vec<f64>,
    pub offset: Vec<f64>,
    /// Row-major `channels × channels`, rows sum to one.
    pub crosstalk: Vec<f64>,
    pub illumination_direction: (f64, f64),
    pub illumination_magnitude: f64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Split {
    Train,
    Val,
    Test,
}

/// Metadata of one generated image.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleMeta {
    pub sample_id: u64,
    pub treatment_id: u32,
    pub batch_id: u32,
    pub is_control: bool,
    pub moa_id: u32,
    pub replicate: u32,
}

#[derive(Debug, Clone, PartialEq)]
pub struct Sample {
    pub meta: SampleMeta,
    /// `channels × height × width`, values in `[0, 1]`.
    pub image: Tensor,
}

/// Training-set restriction used by the exploratory data-subset runs.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Scenario {
    ControlsOnly,
    FewPerClass { k: usize },
    TreatmentFraction { p: f64 },
}

impl Scenario {
    pub fn label(&self) -> String {
        match self {
            Scenario::ControlsOnly => "controls_only".into(),
            Scenario::FewPerClass { k } => format!("few_per_class_{k}"),
            Scenario::TreatmentFraction { p } => format!("treatment_fraction_{p}"),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetManifest {
    pub config_hash: String,
    pub config: GeneratorConfig,
    /// `[channels, height, width]` of every image in the binary file.
    pub image_shape: [usize; 3],
    pub prototypes: Vec<TreatmentPrototype>,
    pub batch_profiles: Vec<BatchProfile>,
    pub samples: Vec<SampleMeta>,
    pub splits: BTreeMap<u32, Split>,
    #[serde(default)]
    pub scenario: Option<Scenario>,
    /// Samples removed from the training set by a scenario.
    #[serde(default)]
    pub train_exclusions: BTreeSet<u64>,
    /// Treatments kept for training under `TreatmentFraction`.
    #[serde(default)]
    pub train_treatments: Option<BTreeSet<u32>>,
}

impl DatasetManifest {
    pub fn split_of(&self, batch_id: u32) -> Option<Split> {
        self.splits.get(&batch_id).copied()
    }

    /// Samples of a split, ignoring scenario exclusions.
    pub fn split_samples(&self, split: Split) -> Vec<&SampleMeta> {
        self.samples
            .iter()
            .filter(|s| self.split_of(s.batch_id) == Some(split))
            .collect()
    }

    /// Samples available to training after scenario exclusions.
    pub fn training_samples(&self) -> Vec<&SampleMeta> {
        self.samples
            .iter()
            .filter(|s| self.split_of(s.batch_id) == Some(Split::Train))
            .filter(|s| !self.train_exclusions.contains(&s.sample_id))
            .collect()
    }

    pub fn batches_in(&self, split: Split) -> Vec<u32> {
        self.splits
            .iter()
            .filter(|(_, s)| **s == split)
            .map(|(b, _)| *b)
            .collect()
    }
}

fn draw_prototypes(cfg: &GeneratorConfig) -> Vec<TreatmentPrototype> {
    let mut rng = rng_for(cfg.seed, stream::PROTOTYPES, 0);
    let c = cfg.channels;
    let draw_base = |rng: &mut rand_chacha::ChaCha8Rng| TreatmentPrototype {
        treatment_id: 0,
        moa_id: 0,
        is_control: false,
        blob_count_mean: rng.random_range(BLOB_COUNT_RANGE.0..BLOB_COUNT_RANGE.1),
        blob_radius_mean: rng.random_range(BLOB_RADIUS_RANGE.0..BLOB_RADIUS_RANGE.1),
        eccentricity: rng.random_range(0.0..0.8),
        intensity: (0..c)
            .map(|_| rng.random_range(INTENSITY_RANGE.0..INTENSITY_RANGE.1))
            .collect(),
    };
    let control_base = draw_base(&mut rng);
    let moa_bases: Vec<TreatmentPrototype> = (0..cfg.n_moa_classes).map(|_| draw_base(&mut rng)).collect();

    let n_ctrl = cfg.n_control_treatments;
    (0..cfg.n_treatments)
        .map(|t| {
            if t < n_ctrl {
                TreatmentPrototype {
                    treatment_id: t as u32,
                    moa_id: cfg.control_moa(),
                    is_control: true,
                    ..control_base.clone()
                }
            } else {
                let moa = (t - n_ctrl) % cfg.n_moa_classes;
                let base = &moa_bases[moa];
                let mut jitter = |v: f64| v * (1.0 + MOA_JITTER * rng.random_range(-1.0..1.0));
                TreatmentPrototype {
                    treatment_id: t as u32,
                    moa_id: moa as u32,
                    is_control: false,
                    blob_count_mean: jitter(base.blob_count_mean),
                    blob_radius_mean: jitter(base.blob_radius_mean),
                    eccentricity: jitter(base.eccentricity).clamp(0.0, 0.95),
                    intensity: base.intensity.iter().map(|&i| jitter(i).clamp(0.0, 1.0)).collect(),
                }
            }
        })
        .collect()
}

fn draw_batch_profiles(cfg: &GeneratorConfig) -> Vec<BatchProfile> {
    let c = cfg.channels;
    let ab = cfg.batch_strength;
    let normal = Normal::new(0.0, 1.0).expect("unit normal");
    (0..cfg.n_batches)
        .map(|b| {
            let mut rng = rng_for(cfg.seed, stream::BATCHES, b as u64);
            let gain = (0..c)
                .map(|_| (ab * GAIN_SCALE * normal.sample(&mut rng)).exp())
                .collect();
            let offset = (0..c).map(|_| ab * OFFSET_SCALE * rng.random_range(0.0..1.0)).collect();
            // Mix the identity with a random row-stochastic matrix.
            let w = CROSSTALK * (1.0 - (-ab).exp());
            let mut crosstalk = vec![0.0; c * c];
            for i in 0..c {
                let raw: Vec<f64> = (0..c).map(|_| rng.random_range(0.0..1.0)).collect();
                let total: f64 = raw.iter().sum();
                for j in 0..c {
                    let id = if i == j { 1.0 } else { 0.0 };
                    crosstalk[i * c + j] = (1.0 - w) * id + w * raw[j] / total;
                }
            }
            let angle: f64 = rng.random_range(0.0..std::f64::consts::TAU);
            BatchProfile {
                batch_id: b as u32,
                gain,
                offset,
                crosstalk,
                illumination_direction: (angle.cos(), angle.sin()),
                illumination_magnitude: rng.random_range(ILLUMINATION_RANGE.0..ILLUMINATION_RANGE.1),
            }
        })
        .collect()
}

fn render(cfg: &GeneratorConfig, proto: &TreatmentPrototype, batch: &BatchProfile, sample_id: u64) -> Tensor {
    let (c, h, w) = (cfg.channels, cfg.height, cfg.width);
    let mut rng = rng_for(cfg.seed, stream::SAMPLE, sample_id);

    // Morphology: a single-channel blob field tinted by the intensity profile.
    let mut field = vec![0.0; h * w];
    let n_blobs = if proto.blob_count_mean > 0.0 {
        Poisson::new(proto.blob_count_mean)
            .expect("positive mean")
            .sample(&mut rng) as usize
    } else {
        0
    };
    let radius_dist = LogNormal::new(proto.blob_radius_mean.ln(), RADIUS_SPREAD).expect("finite radius");
    for _ in 0..n_blobs {
        let cy = rng.random_range(0.0..h as f64);
        let cx = rng.random_range(0.0..w as f64);
        let r: f64 = radius_dist.sample(&mut rng);
        let theta: f64 = rng.random_range(0.0..std::f64::consts::PI);
        let (a, b) = (r, r * (1.0 - proto.eccentricity * proto.eccentricity).sqrt());
        let (ct, st) = (theta.cos(), theta.sin());
        let reach = (3.0 * a).ceil() as isize;
        let (y0, x0) = (cy.floor() as isize, cx.floor() as isize);
        for y in (y0 - reach).max(0)..=(y0 + reach).min(h as isize - 1) {
            for x in (x0 - reach).max(0)..=(x0 + reach).min(w as isize - 1) {
                let dy = y as f64 + 0.5 - cy;
                let dx = x as f64 + 0.5 - cx;
                let u = dx * ct + dy * st;
                let v = -dx * st + dy * ct;
                field[y as usize * w + x as usize] += (-0.5 * (u * u / (a * a) + v * v / (b * b))).exp();
            }
        }
    }
    field.iter_mut().for_each(|v| *v = v.min(1.0));

    let (dx, dy) = batch.illumination_direction;
    let illum = |y: usize, x: usize| {
        let fx = if w > 1 { x as f64 / (w - 1) as f64 - 0.5 } else { 0.0 };
        let fy = if h > 1 { y as f64 / (h - 1) as f64 - 0.5 } else { 0.0 };
        1.0 + 2.0 * batch.illumination_magnitude * (fx * dx + fy * dy)
    };

    let at = cfg.treatment_strength;
    let ab = cfg.batch_strength;
    let noise = Normal::new(0.0, cfg.noise_sigma.max(0.0)).expect("finite sigma");
    let mut pre = vec![0.0; c];
    let mut out = vec![0.0; c * h * w];
    for y in 0..h {
        for x in 0..w {
            let p = y * w + x;
            let bg = BACKGROUND * ab * illum(y, x);
            for (k, pk) in pre.iter_mut().enumerate() {
                *pk = batch.gain[k] * (at * proto.intensity[k] * field[p] + bg);
            }
            for ch in 0..c {
                let mixed: f64 = (0..c).map(|k| batch.crosstalk[ch * c + k] * pre[k]).sum();
                let n = if cfg.noise_sigma > 0.0 {
                    noise.sample(&mut rng)
                } else {
                    0.0
                };
                out[ch * h * w + p] = (mixed + batch.offset[ch] + n).clamp(0.0, 1.0);
            }
        }
    }
    Tensor::from_raw(&[c, h, w], out)
}

/// Generates the full-factorial dataset: every treatment in every batch,
/// `replicates_per_batch` times. All batches start in the training split;
/// use [`split_by_batch`] to assign splits.
pub fn generate_dataset(cfg: &GeneratorConfig) -> Result<(DatasetManifest, Vec<Sample>)> {
    cfg.validate()?;
    let prototypes = draw_prototypes(cfg);
    let batch_profiles = draw_batch_profiles(cfg);
    let mut samples = Vec::with_capacity(cfg.n_samples());
    for batch in &batch_profiles {
        for proto in &prototypes {
            for r in 0..cfg.replicates_per_batch {
                let sample_id = cfg.sample_id(batch.batch_id as usize, proto.treatment_id as usize, r);
                samples.push(Sample {
                    meta: SampleMeta {
                        sample_id,
                        treatment_id: proto.treatment_id,
                        batch_id: batch.batch_id,
                        is_control: proto.is_control,
                        moa_id: proto.moa_id,
                        replicate: r as u32,
                    },
                    image: render(cfg, proto, batch, sample_id),
                });
            }
        }
    }
    let manifest = DatasetManifest {
        config_hash: canonical_hash(cfg)?,
        config: cfg.clone(),
        image_shape: [cfg.channels, cfg.height, cfg.width],
        prototypes,
        batch_profiles,
        samples: samples.iter().map(|s| s.meta.clone()).collect(),
        splits: (0..cfg.n_batches as u32).map(|b| (b, Split::Train)).collect(),
        scenario: None,
        train_exclusions: BTreeSet::new(),
        train_treatments: None,
    };
    Ok((manifest, samples))
}

/// Assigns whole batches to splits by rotating the batch ids by `fold`.
pub fn split_by_batch(
    manifest: &DatasetManifest,
    n_train: usize,
    n_val: usize,
    n_test: usize,
    fold: usize,
) -> Result<DatasetManifest> {
    let n = manifest.config.n_batches;
    if n_train + n_val + n_test != n {
        return Err(Error::config(
            "split",
            format!("train {n_train} + val {n_val} + test {n_test} must equal n_batches {n}"),
        ));
    }
    if fold >= n {
        return Err(Error::config("fold", format!("fold {fold} must be < n_batches {n}")));
    }
    let mut out = manifest.clone();
    out.splits = (0..n)
        .map(|i| {
            let batch = ((fold + i) % n) as u32;
            let split = if i < n_train {
                Split::Train
            } else if i < n_train + n_val {
                Split::Val
            } else {
                Split::Test
            };
            (batch, split)
        })
        .collect();
    Ok(out)
}

/// Restricts the training set according to `scenario`; evaluation splits
/// keep every sample.
pub fn scenario_subsample(manifest: &DatasetManifest, scenario: Scenario) -> Result<DatasetManifest> {
    let mut out = manifest.clone();
    let train: Vec<&SampleMeta> = manifest.training_samples();
    let mut excluded: BTreeSet<u64> = manifest.train_exclusions.clone();
    match scenario {
        Scenario::ControlsOnly => {
            excluded.extend(train.iter().filter(|s| !s.is_control).map(|s| s.sample_id));
        }
        Scenario::FewPerClass { k } => {
            if k == 0 {
                return Err(Error::config("scenario.k", "must be >= 1"));
            }
            let mut kept: BTreeMap<(u32, u32), usize> = BTreeMap::new();
            for s in &train {
                let n = kept.entry((s.treatment_id, s.batch_id)).or_default();
                if *n >= k {
                    excluded.insert(s.sample_id);
                } else {
                    *n += 1;
                }
            }
        }
        Scenario::TreatmentFraction { p } => {
            if !(p > 0.0 && p <= 1.0) {
                return Err(Error::config("scenario.p", "must lie in (0, 1]"));
            }
            let n_t = manifest.config.n_treatments;
            let keep_n = (p * n_t as f64).ceil() as usize;
            let mut ids: Vec<u32> = (0..n_t as u32).collect();
            let mut rng = rng_for(manifest.config.seed, stream::SCENARIO, 0);
            ids.shuffle(&mut rng);
            let keep: BTreeSet<u32> = ids.into_iter().take(keep_n).collect();
            excluded.extend(
                train
                    .iter()
                    .filter(|s| !keep.contains(&s.treatment_id))
                    .map(|s| s.sample_id),
            );
            out.train_treatments = Some(keep);
        }
    }
    out.train_exclusions = excluded;
    out.scenario = Some(scenario);
    if out.training_samples().is_empty() {
        return Err(Error::config("scenario", "leaves no training samples"));
    }
    Ok(out)
}

pub const MANIFEST_FILE: &str = "manifest.json";
pub const IMAGES_FILE: &str = "images.bin";

/// Writes `manifest.json` and `images.bin` (little-endian f64, sample-major,
/// channel-major) into `dir`.
pub fn write_dataset(dir: &Path, manifest: &DatasetManifest, samples: &[Sample]) -> Result<()> {
    fs::create_dir_all(dir)?;
    let json = serde_json::to_vec_pretty(manifest)?;
    fs::write(dir.join(MANIFEST_FILE), json)?;
    let mut w = BufWriter::new(fs::File::create(dir.join(IMAGES_FILE))?);
    for s in samples {
        for v in s.image.data() {
            w.write_all(&v.to_le_bytes())?;
        }
    }
    w.flush()?;
    Ok(())
}

pub fn read_manifest(dir: &Path) -> Result<DatasetManifest> {
    let bytes = fs::read(dir.join(MANIFEST_FILE))?;
    Ok(serde_json::from_slice(&bytes)?)
}

pub fn read_dataset(dir: &Path) -> Result<(DatasetManifest, Vec<Sample>)> {
    let manifest = read_manifest(dir)?;
    let [c, h, w] = manifest.image_shape;
    let per = c * h * w;
    let mut r = BufReader::new(fs::File::open(dir.join(IMAGES_FILE))?);
    let mut buf = vec![0u8; per * 8];
    let mut samples = Vec::with_capacity(manifest.samples.len());
    for meta in &manifest.samples {
        r.read_exact(&mut buf)
            .map_err(|e| Error::Format(format!("images.bin truncated at sample {}: {e}", meta.sample_id)))?;
        let data: Vec<f64> = buf
            .chunks_exact(8)
            .map(|b| f64::from_le_bytes(b.try_into().expect("8 bytes")))
            .collect();
        samples.push(Sample {
            meta: meta.clone(),
            image: Tensor::from_vec(&[c, h, w], data)?,
        });
    }
    let mut rest = Vec::new();
    r.read_to_end(&mut rest)?;
    if !rest.is_empty() {
        return Err(Error::Format(format!("{} trailing bytes in images.bin", rest.len())));
    }
    Ok((manifest, samples))
}
