mod common;

use proptest::prelude::*;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use srdistill::objective::{weight_d, weighting_ratio, WeightingParams};
use srdistill::sampler::{blend_condition, gaussian_like};
use srdistill::schedule::{build_schedule, forward_diffuse, predict_x0, StudentTimestepSet};
use srdistill::tensor::Tensor;

fn random_image(seed: u64) -> Tensor<f64> {
    gaussian_like::<f64, _>(&[1, 3, 6, 6], &mut ChaCha8Rng::seed_from_u64(seed)).map(f64::tanh)
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn diffuse_then_predict_recovers_x0(seed in any::<u64>(), s in 1usize..=1000) {
        let sched = common::default_schedule();
        let x0 = random_image(seed);
        let eps = gaussian_like::<f64, _>(x0.shape(), &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let back = predict_x0(&forward_diffuse(&x0, &[s], &eps, &sched).unwrap(), &[s], &eps, &sched).unwrap();
        let err = common::relative_error(back.data(), x0.data());
        prop_assert!(err <= 1e-5, "s={s}: {err}");
    }

    #[test]
    fn single_precision_roundtrip(seed in any::<u64>(), s in 1usize..=1000) {
        let sched = common::default_schedule();
        let x0 = random_image(seed).cast::<f32>();
        let eps = gaussian_like::<f32, _>(x0.shape(), &mut ChaCha8Rng::seed_from_u64(seed ^ 1));
        let back = predict_x0(&forward_diffuse(&x0, &[s], &eps, &sched).unwrap(), &[s], &eps, &sched).unwrap();
        let a: Vec<f64> = back.data().iter().map(|&v| v as f64).collect();
        let b: Vec<f64> = x0.data().iter().map(|&v| v as f64).collect();
        // f32 cancellation grows like 1/√ᾱ near the end of the schedule
        let bound = 1e-5 / sched.alpha_bar(s).unwrap().sqrt();
        prop_assert!(common::relative_error(&a, &b) <= bound);
    }

    #[test]
    fn blend_endpoints_are_exact(seed in any::<u64>(), r in 0.0f64..=1.0) {
        let a = random_image(seed);
        let b = random_image(seed.wrapping_add(7));
        prop_assert_eq!(blend_condition(&a, &b, 1.0).unwrap(), a.clone());
        prop_assert_eq!(blend_condition(&a, &b, 0.0).unwrap(), b.clone());
        let mid = blend_condition(&a, &b, r).unwrap();
        for ((m, x), y) in mid.data().iter().zip(a.data()).zip(b.data()) {
            prop_assert!(*m >= x.min(*y) - 1e-15 && *m <= x.max(*y) + 1e-15);
        }
    }

    #[test]
    fn ratio_decreases_with_step_for_growing_factor(t in 1usize..=1000, mu in 0.05f64..2.0, nu in 1.001f64..4.0) {
        let sched = common::default_schedule();
        let sts = StudentTimestepSet::default();
        let wp = WeightingParams::exponential(mu, nu);
        let ratios: Vec<f64> = sts.anchors().iter().map(|&s| weighting_ratio(s, t, &sched, &sts, &wp).unwrap()).collect();
        prop_assert!(ratios.windows(2).all(|w| w[0] > w[1]), "{ratios:?}");
        let lin = WeightingParams::linear(mu, 0.5);
        let ratios: Vec<f64> = sts.anchors().iter().map(|&s| weighting_ratio(s, t, &sched, &sts, &lin).unwrap()).collect();
        prop_assert!(ratios.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn baseline_ratio_is_flat_in_step(t in 1usize..=1000) {
        let sched = common::default_schedule();
        let sts = StudentTimestepSet::default();
        let wp = WeightingParams::baseline();
        let ratios: Vec<f64> = sts.anchors().iter().map(|&s| weighting_ratio(s, t, &sched, &sts, &wp).unwrap()).collect();
        prop_assert!(ratios.windows(2).all(|w| w[0] == w[1]));
    }

    #[test]
    fn schedule_products_stay_in_unit_interval(start in 1e-5f64..1e-3, end in 1e-3f64..0.05) {
        let sched = build_schedule(1000, start, end).unwrap();
        let ab = sched.alpha_bars();
        prop_assert!(ab.iter().all(|&a| a > 0.0 && a < 1.0));
        prop_assert!(ab.windows(2).all(|w| w[1] < w[0]));
    }
}

#[test]
fn weight_factors_for_default_exponential() {
    let sched = common::default_schedule();
    let sts = StudentTimestepSet::default();
    let wp = WeightingParams::exponential(0.5, 2.1);
    let factors = [0.5, 1.05, 2.205, 4.6305];
    for t in [1, 17, 250, 500, 999, 1000] {
        let root = sched.alpha_bar(t).unwrap().sqrt();
        for (p, &s) in sts.anchors().iter().enumerate() {
            let d = weight_d(s, t, &sched, &sts, &wp).unwrap();
            assert!((d - factors[p] * root).abs() <= 1e-12, "p={} t={t}: {d}", p + 1);
        }
    }
}
