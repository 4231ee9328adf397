use proptest::prelude::*;

use immunize_core::diffusion::{timestep_plan, Checkpoint, EditPlan, EditSettings};
use immunize_core::harness::io::{load_png, quantize, save_png};
use immunize_core::harness::quantize_within;
use immunize_core::immunize::{project_linf, random_noise_baseline};
use immunize_core::metrics::{frechet_distance, gmsd, precision_recall, psnr, quantile, ssim, Aggregate};
use immunize_core::rng::{derive_indexed, derive_seed};
use immunize_core::{Rng, Tensor};

fn image(seed: u64, size: usize) -> Tensor {
    Rng::new(seed).uniform_tensor(&[3, size, size], 0.0, 1.0)
}

fn features(seed: u64, n: usize, d: usize, shift: f64) -> Vec<Vec<f64>> {
    let mut rng = Rng::new(seed);
    (0..n).map(|_| (0..d).map(|_| rng.normal() as f64 + shift).collect()).collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(48))]

    #[test]
    fn projection_stays_in_ball_and_is_idempotent(seed in any::<u64>(), eps in 1e-3f64..0.5, scale in 0.01f32..3.0) {
        let d = Rng::new(seed).normal_tensor(&[3, 8, 8]).map(|v| v * scale);
        let p = project_linf(&d, eps);
        prop_assert!(p.max_abs() as f64 <= eps as f32 as f64);
        prop_assert_eq!(project_linf(&p, eps), p.clone());
        // coordinates already inside are untouched
        for (a, b) in d.data().iter().zip(p.data()) {
            if a.abs() <= eps as f32 {
                prop_assert_eq!(a, b);
            }
        }
    }

    #[test]
    fn random_baseline_respects_budget_and_range(seed in any::<u64>(), eps in 1e-3f64..0.3) {
        let x = image(seed ^ 1, 8);
        let r = random_noise_baseline(&x, eps, seed).unwrap();
        prop_assert!(r.delta.max_abs() <= eps as f32);
        prop_assert!(r.immunized.data().iter().all(|v| (0.0..=1.0).contains(v)));
        prop_assert!(r.immunized.max_abs_diff(&x) <= eps as f32 + 1e-6);
    }

    #[test]
    fn quantized_immunization_stays_in_budget(seed in any::<u64>(), levels in 1u32..40) {
        let eps = levels as f64 / 255.0;
        let x = quantize(&image(seed, 8));
        let noise = Rng::new(seed ^ 7).uniform_tensor(x.shape(), -(eps as f32), eps as f32);
        let imm = x.zip_map(&noise, |a, n| (a + n).clamp(0.0, 1.0)).unwrap();
        let q = quantize_within(&x, &imm, eps).unwrap();
        prop_assert!(q.max_abs_diff(&x) as f64 <= eps + 1e-6);
        prop_assert_eq!(quantize(&q), q);
    }

    #[test]
    fn image_metrics_are_symmetric_and_bounded(s1 in any::<u64>(), s2 in any::<u64>()) {
        let (a, b) = (image(s1, 16), image(s2, 16));
        let (sab, sba) = (ssim(&a, &b).unwrap(), ssim(&b, &a).unwrap());
        prop_assert!((sab - sba).abs() < 1e-12);
        prop_assert!((-1.0..=1.0).contains(&sab));
        prop_assert!((psnr(&a, &b).unwrap() - psnr(&b, &a).unwrap()).abs() < 1e-9);
        let g = gmsd(&a, &b).unwrap();
        prop_assert!(g >= 0.0 && (g - gmsd(&b, &a).unwrap()).abs() < 1e-12);
    }

    #[test]
    fn frechet_is_symmetric_and_nonnegative(s1 in any::<u64>(), s2 in any::<u64>(), shift in -2.0f64..2.0) {
        let (x, y) = (features(s1, 30, 4, 0.0), features(s2, 30, 4, shift));
        let (fxy, fyx) = (frechet_distance(&x, &y).unwrap(), frechet_distance(&y, &x).unwrap());
        prop_assert!(fxy >= 0.0);
        prop_assert!((fxy - fyx).abs() <= 1e-8 * (1.0 + fxy));
        prop_assert!(frechet_distance(&x, &x).unwrap() < 1e-6);
    }

    #[test]
    fn precision_recall_lie_in_unit_interval_and_swap(s1 in any::<u64>(), s2 in any::<u64>(), k in 1usize..6) {
        let (x, y) = (features(s1, 20, 3, 0.0), features(s2, 25, 3, 0.5));
        let (p, r) = precision_recall(&x, &y, k).unwrap();
        prop_assert!((0.0..=1.0).contains(&p) && (0.0..=1.0).contains(&r));
        let (p2, r2) = precision_recall(&y, &x, k).unwrap();
        prop_assert_eq!((p, r), (r2, p2));
    }

    #[test]
    fn aggregate_matches_two_pass_oracle(values in prop::collection::vec(-100.0f64..100.0, 2..50)) {
        let a = Aggregate::of(&values);
        let n = values.len() as f64;
        let mean = values.iter().sum::<f64>() / n;
        let var = values.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (n - 1.0);
        prop_assert!((a.mean - mean).abs() <= 1e-9 * (1.0 + mean.abs()));
        prop_assert!((a.std - var.sqrt()).abs() <= 1e-9 * (1.0 + var.sqrt()));
        prop_assert_eq!(a.n, values.len());
    }

    #[test]
    fn quantiles_are_monotone(mut values in prop::collection::vec(-10.0f64..10.0, 1..40), q1 in 0.0f64..1.0, q2 in 0.0f64..1.0) {
        values.sort_by(f64::total_cmp);
        let (lo, hi) = if q1 <= q2 { (q1, q2) } else { (q2, q1) };
        prop_assert!(quantile(&values, lo) <= quantile(&values, hi));
        prop_assert_eq!(quantile(&values, 0.0), values[0]);
        prop_assert_eq!(quantile(&values, 1.0), *values.last().unwrap());
    }

    #[test]
    fn timestep_plans_descend_to_zero(start in 1usize..=100, n in 1usize..=100) {
        prop_assume!(n <= start);
        let plan = timestep_plan(start, n).unwrap();
        prop_assert_eq!(plan.len(), n + 1);
        prop_assert_eq!(plan[0], start);
        prop_assert_eq!(*plan.last().unwrap(), 0);
        prop_assert!(plan.windows(2).all(|w| w[0] > w[1]));
    }

    #[test]
    fn img2img_start_follows_strength(strength in 0.001f64..=1.0) {
        let settings = EditSettings { strength, num_inference_steps: 1, ..Default::default() };
        let plan = EditPlan::new(100, &settings, false).unwrap();
        prop_assert_eq!(plan.start_t, ((strength * 100.0).round() as usize).max(1));
        prop_assert_eq!(EditPlan::new(100, &settings, true).unwrap().start_t, 100);
    }

    #[test]
    fn derived_seeds_are_deterministic_and_label_sensitive(seed in any::<u64>(), i in 0u64..1000) {
        prop_assert_eq!(derive_indexed(seed, "image", i), derive_indexed(seed, "image", i));
        prop_assert_ne!(derive_indexed(seed, "image", i), derive_indexed(seed, "image", i + 1));
        prop_assert_ne!(derive_seed(seed, "train"), derive_seed(seed, "model-init"));
    }

    #[test]
    fn checkpoints_round_trip(seed in any::<u64>(), rows in 1usize..5, cols in 1usize..5) {
        let mut ck = Checkpoint::default();
        ck.push_tensor("w", Rng::new(seed).normal_tensor(&[rows, cols]));
        ck.push_text("meta", format!("{{\"seed\":{seed}}}"));
        let back = Checkpoint::from_bytes(&ck.to_bytes()).unwrap();
        prop_assert_eq!(back.to_bytes(), ck.to_bytes());
    }
}

#[test]
fn png_round_trip_is_exact_after_quantization() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("x.png");
    let q = quantize(&image(5, 16));
    save_png(&q, &path).unwrap();
    assert_eq!(load_png(&path).unwrap(), q);
}
