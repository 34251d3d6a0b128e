//! Statistical and structural properties of the generator, the batch
//! splits and the view sampler.

use std::collections::BTreeMap;

use cdcl_core::rng::rng_for;
use cdcl_core::ssl::{LossConfig, MethodLabel, UnitSampler};
use cdcl_core::synth::{generate_dataset, split_by_batch, GeneratorConfig, Sample, Split};
use cdcl_core::views::{AugmentConfig, DatasetIndex};

fn tiny() -> GeneratorConfig {
    GeneratorConfig {
        height: 10,
        width: 10,
        n_batches: 3,
        n_treatments: 4,
        replicates_per_batch: 2,
        n_control_treatments: 1,
        n_moa_classes: 2,
        ..Default::default()
    }
}

fn image_mean(s: &Sample) -> f64 {
    s.image.data().iter().sum::<f64>() / s.image.len() as f64
}

/// Difference of means of two groups and its standard error.
fn mean_difference(a: &[f64], b: &[f64]) -> (f64, f64) {
    let stats = |x: &[f64]| {
        let n = x.len() as f64;
        let m = x.iter().sum::<f64>() / n;
        let v = x.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0);
        (m, v / n)
    };
    let ((ma, va), (mb, vb)) = (stats(a), stats(b));
    (ma - mb, (va + vb).sqrt())
}

#[test]
fn zero_treatment_strength_hides_treatments() {
    let cfg = GeneratorConfig {
        n_batches: 1,
        n_treatments: 2,
        n_control_treatments: 0,
        n_moa_classes: 2,
        replicates_per_batch: 60,
        treatment_strength: 0.0,
        ..tiny()
    };
    let (_, samples) = generate_dataset(&cfg).unwrap();
    let group = |t: u32| -> Vec<f64> {
        samples
            .iter()
            .filter(|s| s.meta.treatment_id == t)
            .map(image_mean)
            .collect()
    };
    let (diff, se) = mean_difference(&group(0), &group(1));
    assert!(diff.abs() < 3.0 * se, "difference {diff}, se {se}");
}

#[test]
fn zero_batch_strength_hides_batches() {
    let cfg = GeneratorConfig {
        n_batches: 2,
        n_treatments: 1,
        n_control_treatments: 0,
        n_moa_classes: 1,
        replicates_per_batch: 60,
        batch_strength: 0.0,
        ..tiny()
    };
    let (m, samples) = generate_dataset(&cfg).unwrap();
    for b in &m.batch_profiles {
        assert!(b.gain.iter().all(|&g| g == 1.0));
        assert!(b.offset.iter().all(|&o| o == 0.0));
    }
    let group = |b: u32| -> Vec<f64> {
        samples
            .iter()
            .filter(|s| s.meta.batch_id == b)
            .map(image_mean)
            .collect()
    };
    let (diff, se) = mean_difference(&group(0), &group(1));
    assert!(diff.abs() < 3.0 * se, "difference {diff}, se {se}");
}

/// Summed over pixels, the variance across batches of the per-batch mean
/// image.
fn between_batch_variance(cfg: &GeneratorConfig) -> f64 {
    let (_, samples) = generate_dataset(cfg).unwrap();
    let len = cfg.image_len();
    let mut means = vec![vec![0.0; len]; cfg.n_batches];
    let mut counts = vec![0usize; cfg.n_batches];
    for s in &samples {
        let b = s.meta.batch_id as usize;
        counts[b] += 1;
        for (m, v) in means[b].iter_mut().zip(s.image.data()) {
            *m += v;
        }
    }
    for (m, &n) in means.iter_mut().zip(&counts) {
        m.iter_mut().for_each(|v| *v /= n as f64);
    }
    (0..len)
        .map(|p| {
            let grand = means.iter().map(|m| m[p]).sum::<f64>() / cfg.n_batches as f64;
            means.iter().map(|m| (m[p] - grand).powi(2)).sum::<f64>() / cfg.n_batches as f64
        })
        .sum()
}

#[test]
fn confounding_grows_with_batch_strength() {
    for seed in 0..3 {
        let v: Vec<f64> = [0.0, 0.5, 1.0]
            .iter()
            .map(|&ab| {
                between_batch_variance(&GeneratorConfig {
                    batch_strength: ab,
                    seed,
                    ..tiny()
                })
            })
            .collect();
        assert!(v[0] < v[1] && v[1] < v[2], "seed {seed}: {v:?}");
    }
}

#[test]
fn generation_is_deterministic_per_seed() {
    let (m1, s1) = generate_dataset(&tiny()).unwrap();
    let (m2, s2) = generate_dataset(&tiny()).unwrap();
    assert_eq!(m1, m2);
    assert_eq!(s1, s2);
    let (_, s3) = generate_dataset(&GeneratorConfig { seed: 1, ..tiny() }).unwrap();
    assert_ne!(s1, s3);
}

#[test]
fn every_fold_is_a_sound_partition() {
    let cfg = GeneratorConfig { n_batches: 6, ..tiny() };
    let (m, _) = generate_dataset(&cfg).unwrap();
    let (n_train, n_val, n_test) = (3, 1, 2);
    let mut test_count: BTreeMap<u32, usize> = BTreeMap::new();
    for fold in 0..6 {
        let f = split_by_batch(&m, n_train, n_val, n_test, fold).unwrap();
        let sizes = [Split::Train, Split::Val, Split::Test].map(|s| f.batches_in(s).len());
        assert_eq!(sizes, [n_train, n_val, n_test]);
        assert_eq!(f.splits.len(), 6);
        for b in f.batches_in(Split::Test) {
            *test_count.entry(b).or_default() += 1;
        }
        let total: usize = [Split::Train, Split::Val, Split::Test]
            .iter()
            .map(|&s| f.split_samples(s).len())
            .sum();
        assert_eq!(total, m.samples.len());
    }
    assert_eq!(test_count.len(), 6);
    assert!(test_count.values().all(|&c| c == n_test));
}

#[test]
fn cross_batch_pairs_are_uniform_over_batch_pairs() {
    let (_, samples) = generate_dataset(&tiny()).unwrap();
    let index = DatasetIndex::new(samples.iter().collect());
    let draws = 10_000;
    let mut counts: BTreeMap<(u32, u32), usize> = BTreeMap::new();
    let mut rng = rng_for(11, 300, 0);
    for _ in 0..draws {
        let (a, b) = index.sample_pair(2, &mut rng).unwrap();
        assert_eq!(a.meta.treatment_id, 2);
        assert_eq!(b.meta.treatment_id, 2);
        assert_ne!(a.meta.batch_id, b.meta.batch_id);
        *counts.entry((a.meta.batch_id, b.meta.batch_id)).or_default() += 1;
    }
    assert_eq!(counts.len(), 6);
    let p = 1.0 / 6.0;
    let sd = (draws as f64 * p * (1.0 - p)).sqrt();
    for (pair, &c) in &counts {
        assert!((c as f64 - draws as f64 * p).abs() < 5.0 * sd, "{pair:?}: {c}");
    }
}

fn sampler(label: MethodLabel, mb: usize, seed: u64) -> UnitSampler {
    UnitSampler {
        seed,
        loss: LossConfig {
            n_local_crops: 2,
            ..label.loss_config()
        },
        augment: AugmentConfig {
            output_size: (6, 6),
            ..AugmentConfig::default()
        },
        mini_batch_size: mb,
    }
}

#[test]
fn an_epoch_visits_every_treatment_once() {
    let (_, samples) = generate_dataset(&GeneratorConfig {
        n_treatments: 6,
        n_moa_classes: 3,
        ..tiny()
    })
    .unwrap();
    let index = DatasetIndex::new(samples.iter().collect());
    let s = sampler(MethodLabel::Cdcl, 3, 4);
    for epoch in 0..3 {
        let mut seen: Vec<u32> = Vec::new();
        for it in 2 * epoch..2 * epoch + 2 {
            let (units, fallbacks) = s.ssl_units(&index, it).unwrap();
            assert_eq!(fallbacks, 0);
            seen.extend(units.iter().map(|u| u.treatment_id));
        }
        seen.sort_unstable();
        assert_eq!(seen, (0..6).collect::<Vec<u32>>(), "epoch {epoch}");
    }
}

#[test]
fn view_sets_are_bounded_uniform_and_seeded() {
    let (_, samples) = generate_dataset(&tiny()).unwrap();
    let index = DatasetIndex::new(samples.iter().collect());
    for label in MethodLabel::ALL {
        if label == MethodLabel::Supervised {
            continue;
        }
        let s = sampler(label, 4, 9);
        let (units, _) = s.ssl_units(&index, 3).unwrap();
        let plan = s.loss.crop_plan();
        for u in &units {
            assert_eq!(u.global.len(), plan.n_global);
            assert_eq!(u.local.len(), plan.n_local);
            assert_eq!(u.teacher_views(), &u.global[..]);
            for v in u.all_views() {
                assert_eq!(v.image.shape(), &[3, 6, 6]);
                assert!(v.image.data().iter().all(|x| (0.0..=1.0).contains(x)));
            }
        }
        let (again, _) = s.ssl_units(&index, 3).unwrap();
        let images = |us: &[cdcl_core::views::ViewBatch]| -> Vec<Vec<f64>> {
            us.iter()
                .flat_map(|u| u.all_views().map(|v| v.image.data().to_vec()))
                .collect()
        };
        assert_eq!(images(&units), images(&again), "{label:?}");
        let (other, _) = sampler(label, 4, 10).ssl_units(&index, 3).unwrap();
        assert_ne!(images(&units), images(&other), "{label:?}");
    }
}
