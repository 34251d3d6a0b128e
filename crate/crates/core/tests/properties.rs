//! Randomised invariants of the numerical building blocks.

use cdcl_core::eval::{
    chi2_sf, evaluate, grit_score, kbet_score, knn_predict, znorm_whiten, EmbeddingTable, EvalConfig, KbetConfig,
    KnnConfig, RowMeta,
};
use cdcl_core::nn::{mlp_forward, FinalActivation, MlpSpec};
use cdcl_core::optim::{ema_update, LrSchedule};
use cdcl_core::rng::rng_for;
use cdcl_core::ssl::{barlow_loss, teacher_probs, CenterMode, CenterState};
use cdcl_core::{ParamSet, Tape, Tensor};
use proptest::prelude::*;
use rand::Rng;
use rand_chacha::ChaCha8Rng;

fn random(shape: &[usize], rng: &mut ChaCha8Rng) -> Tensor {
    let n = shape.iter().product();
    Tensor::from_vec(shape, (0..n).map(|_| rng.random_range(-1.0..1.0)).collect()).unwrap()
}

/// A table of `n_batches` batches, each with `per_batch` rows cycling over
/// `n_treatments` treatments; treatment 0 is the control.
fn table(seed: u64, n_batches: u32, per_batch: usize, n_treatments: u32, dim: usize) -> EmbeddingTable {
    let mut rng = rng_for(seed, 400, 0);
    let mut rows = Vec::new();
    let mut data = Vec::new();
    for b in 0..n_batches {
        for i in 0..per_batch {
            let t = i as u32 % n_treatments;
            rows.push(RowMeta {
                sample_id: rows.len() as u64,
                batch_id: b,
                treatment_id: t,
                is_control: t == 0,
                moa_id: t % 3,
            });
            data.extend(
                (0..dim).map(|j| {
                    rng.random_range(-1.0..1.0) + if j == t as usize % dim { 1.5 } else { 0.0 } + 0.3 * b as f64
                }),
            );
        }
    }
    let n = rows.len();
    EmbeddingTable::new(rows, Tensor::from_vec(&[n, dim], data).unwrap()).unwrap()
}

fn map_features(t: &EmbeddingTable, f: impl Fn(usize, &[f64]) -> Vec<f64>) -> EmbeddingTable {
    let data: Vec<f64> = (0..t.len()).flat_map(|i| f(i, t.feature(i))).collect();
    let d = data.len() / t.len();
    t.with_features(Tensor::from_vec(&[t.len(), d], data).unwrap()).unwrap()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn l2_normalized_rows_have_unit_norm(seed in any::<u64>(), rows in 1usize..8, scale in 1e-3f64..1e3) {
        let mut spec = MlpSpec::new(5, &[7], 4);
        let mut rng = rng_for(seed, 401, 0);
        let params = spec.init("p", &mut rng).unwrap();
        let x = random(&[rows, 5], &mut rng).map(|v| v * scale);
        let mut forward = |spec: &MlpSpec| {
            let mut tape = Tape::new();
            let input = tape.leaf(x.clone());
            mlp_forward(spec, "p", &params, input, &mut tape).map(|v| tape.value(v).clone())
        };
        let raw = forward(&spec).unwrap();
        spec.final_activation = FinalActivation::L2Normalize;
        // A saturated GELU layer can zero a row exactly; that must be an error.
        let zero_row = (0..rows).any(|r| raw.row(r).iter().all(|&v| v == 0.0));
        match forward(&spec) {
            Ok(out) => {
                prop_assert!(!zero_row);
                for r in 0..rows {
                    let norm = out.row(r).iter().map(|v| v * v).sum::<f64>().sqrt();
                    prop_assert!((norm - 1.0).abs() < 1e-12, "row {} norm {}", r, norm);
                }
            }
            Err(e) => prop_assert!(zero_row && matches!(e, cdcl_core::Error::Numeric { .. }), "{}", e),
        }
    }

    #[test]
    fn ema_is_the_exact_affine_blend(seed in any::<u64>(), m in 0.0f64..=1.0) {
        let mut rng = rng_for(seed, 402, 0);
        let mut target = ParamSet::new();
        target.insert("w", random(&[3, 4], &mut rng)).unwrap();
        let mut source = ParamSet::new();
        source.insert("w", random(&[3, 4], &mut rng)).unwrap();
        source.insert("extra", random(&[2], &mut rng)).unwrap();
        let old = target.get("w").unwrap().value.clone();
        ema_update(&mut target, &source, m).unwrap();
        let new = target.get("w").unwrap().value.data();
        let s = source.get("w").unwrap().value.data();
        for i in 0..12 {
            prop_assert_eq!(new[i], m * old.data()[i] + (1.0 - m) * s[i]);
        }
    }

    #[test]
    fn schedule_is_continuous_and_decays(total in 2u64..400, warm_frac in 0.0f64..0.5, base in 1e-4f64..1e-1, final_frac in 0.0f64..1.0) {
        let warmup = ((total as f64 * warm_frac) as u64).max(1);
        let s = LrSchedule { base_lr: base, warmup_iters: warmup, total_iters: total, final_lr: base * final_frac };
        let before = s.lr_at(warmup - 1).unwrap();
        let at = s.lr_at(warmup).unwrap();
        prop_assert!((at - base).abs() < 1e-15);
        prop_assert!(at - before <= base / warmup as f64 + 1e-15);
        let mut prev = at;
        for it in warmup + 1..=total {
            let lr = s.lr_at(it).unwrap();
            prop_assert!(lr <= prev + 1e-15, "iteration {}: {} after {}", it, lr, prev);
            prev = lr;
        }
        prop_assert!((prev - s.final_lr).abs() < 1e-12);
    }

    #[test]
    fn centering_is_shift_invariant(seed in any::<u64>(), tau in 0.01f64..1.0) {
        let mut rng = rng_for(seed, 403, 0);
        let t = random(&[4, 6], &mut rng);
        let c = random(&[4, 6], &mut rng);
        let v: Vec<f64> = (0..6).map(|_| rng.random_range(-5.0..5.0)).collect();
        let shift = |x: &Tensor| Tensor::from_vec(&[4, 6], x.data().iter().enumerate().map(|(i, a)| a + v[i % 6]).collect()).unwrap();
        let a = teacher_probs(&t, &c, tau);
        let b = teacher_probs(&shift(&t), &shift(&c), tau);
        for (x, y) in a.data().iter().zip(b.data()) {
            prop_assert!((x - y).abs() < 1e-12);
        }
    }

    #[test]
    fn per_domain_centres_are_isolated(seed in any::<u64>(), m in 0.0f64..1.0, domain in 0u32..4) {
        let mut rng = rng_for(seed, 404, 0);
        let mut state = CenterState::new(CenterMode::PerDomain, 3, m).unwrap();
        let warm = random(&[8, 3], &mut rng);
        state.update(&warm, &[0, 1, 2, 3, 0, 1, 2, 3]).unwrap();
        let before = state.clone();
        let out = random(&[3, 3], &mut rng);
        state.update(&out, &[domain; 3]).unwrap();
        for d in 0..4 {
            if d != domain {
                prop_assert_eq!(state.center_for(d), before.center_for(d));
            }
        }
        let mean: Vec<f64> = (0..3).map(|j| (0..3).map(|r| out.row(r)[j]).sum::<f64>() / 3.0).collect();
        let old = before.center_for(domain);
        let new = state.center_for(domain);
        for j in 0..3 {
            prop_assert!((new[j] - (m * old[j] + (1.0 - m) * mean[j])).abs() < 1e-15);
        }
    }

    #[test]
    fn barlow_vanishes_on_decorrelated_columns(perm_seed in any::<u64>(), scales in prop::collection::vec(0.1f64..10.0, 4), shifts in prop::collection::vec(-5.0f64..5.0, 4)) {
        // Walsh columns over eight rows are mutually orthogonal and centred.
        let walsh = |row: usize, col: usize| -> f64 {
            let mask = [1, 2, 4, 7][col];
            if (row & mask).count_ones().is_multiple_of(2) { 1.0 } else { -1.0 }
        };
        let mut order: Vec<usize> = (0..8).collect();
        let mut rng = rng_for(perm_seed, 405, 0);
        for i in (1..8).rev() {
            order.swap(i, rng.random_range(0..=i));
        }
        let data: Vec<f64> = order.iter().flat_map(|&r| (0..4).map(move |c| (r, c))).map(|(r, c)| scales[c] * walsh(r, c) + shifts[c]).collect();
        let mut tape = Tape::new();
        let a = tape.leaf(Tensor::from_vec(&[8, 4], data).unwrap());
        let (loss, _) = barlow_loss(&mut tape, a, a, 0.7).unwrap();
        prop_assert!(tape.value(loss).item().abs() < 1e-9);
    }

    #[test]
    fn chi2_tail_is_a_monotone_probability(df in 1u32..40, x in 0.0f64..200.0, dx in 1e-3f64..20.0) {
        let a = chi2_sf(x, df).unwrap();
        let b = chi2_sf(x + dx, df).unwrap();
        prop_assert!((0.0..=1.0).contains(&a));
        prop_assert!((0.0..=1.0).contains(&b));
        prop_assert!(b <= a);
    }

    #[test]
    fn znorm_keeps_rows_and_stays_finite(seed in any::<u64>(), n_batches in 1u32..4, per_batch in 6usize..20) {
        let t = table(seed, n_batches, per_batch, 3, 4);
        let z = znorm_whiten(&t).unwrap();
        prop_assert_eq!(z.len(), t.len());
        prop_assert_eq!(z.rows(), t.rows());
        prop_assert!(z.features().data().iter().all(|v| v.is_finite()));
    }

    #[test]
    fn kbet_is_a_fraction(seed in any::<u64>(), n_batches in 1u32..4, k_fraction in 0.02f64..0.3) {
        let t = table(seed, n_batches, 20, 4, 3);
        let cfg = KbetConfig { k_fraction, ..KbetConfig::default() };
        let s = kbet_score(&t, &cfg).unwrap();
        prop_assert!((0.0..=1.0).contains(&s));
        if n_batches == 1 {
            prop_assert_eq!(s, 1.0);
        }
    }

    #[test]
    fn knn_ignores_rotations(seed in any::<u64>(), angles in prop::collection::vec(0.0f64..std::f64::consts::TAU, 3)) {
        let train = table(seed, 2, 12, 4, 3);
        let test = table(seed ^ 1, 1, 12, 4, 3);
        // Product of Givens rotations in the three coordinate planes.
        let rotate = |_: usize, x: &[f64]| {
            let mut v = x.to_vec();
            for (k, &(p, q)) in [(0, 1), (1, 2), (0, 2)].iter().enumerate() {
                let (c, s) = (angles[k].cos(), angles[k].sin());
                let (a, b) = (v[p], v[q]);
                v[p] = c * a - s * b;
                v[q] = s * a + c * b;
            }
            v
        };
        let cfg = KnnConfig { k: 5, temperature: 0.07 };
        let plain = knn_predict(&train, &test, cfg).unwrap();
        let turned = knn_predict(&map_features(&train, rotate), &map_features(&test, rotate), cfg).unwrap();
        prop_assert_eq!(plain, turned);
    }

    #[test]
    fn grit_ignores_affine_maps(seed in any::<u64>(), a in 0.1f64..10.0, b in -5.0f64..5.0, row_scales in prop::collection::vec(0.1f64..10.0, 36)) {
        let t = table(seed, 2, 18, 3, 5);
        let base = grit_score(&t).unwrap();
        let global = grit_score(&map_features(&t, |_, x| x.iter().map(|v| a * v + b).collect())).unwrap();
        prop_assert!((global - base).abs() < 1e-9, "{} vs {}", global, base);
        let per_row = grit_score(&map_features(&t, |i, x| x.iter().map(|v| row_scales[i] * v + b * i as f64).collect())).unwrap();
        prop_assert!((per_row - base).abs() < 1e-9, "{} vs {}", per_row, base);
    }
}

#[test]
fn evaluation_is_deterministic() {
    let train = table(3, 4, 24, 6, 5);
    let test = table(4, 2, 24, 6, 5);
    let unseen = [4u32, 5].into_iter().collect();
    let a = evaluate(&train, &test, &EvalConfig::default(), Some(&unseen)).unwrap();
    let b = evaluate(&train, &test, &EvalConfig::default(), Some(&unseen)).unwrap();
    assert_eq!(a, b);
    assert!(a.metrics.values().all(|v| v.is_finite()));
}
