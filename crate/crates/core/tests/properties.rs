use ddm2::data_io::{PairOptions, PriorStrategy};
use ddm2::schedule::{NoiseSchedule, ScheduleParams, ScheduleShape, build_schedule};
use ddm2::stage1::Stage1Output;
use ddm2::stage2::{MatchMetric, MatchOptions, calibrate, match_state};
use ddm2::stage3::noise_shuffle;
use ndarray::{Array2, Array4};
use proptest::prelude::*;

fn sched() -> NoiseSchedule {
    build_schedule(ScheduleParams::default()).unwrap()
}

fn brute_force(sigma: f64, s: &NoiseSchedule, metric: MatchMetric) -> usize {
    let mut best_t = 1;
    let mut best_d = f64::INFINITY;
    for t in 1..=s.T() {
        let d = (metric.level(s, t) - sigma).abs();
        if d <= best_d {
            best_d = d;
            best_t = t;
        }
    }
    best_t
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(64))]

    #[test]
    fn schedule_tables_are_consistent(
        steps in 2usize..400,
        b0 in 1e-6f64..1e-3,
        span in 1e-4f64..2e-2,
        ratio in 0.05f64..=1.0,
        warm in any::<bool>(),
    ) {
        let shape = if warm { ScheduleShape::Warmup } else { ScheduleShape::ReverseWarmup };
        let s = build_schedule(ScheduleParams { shape, steps, beta_start: b0, beta_end: b0 + span, linear_ratio: ratio }).unwrap();
        let mut prev = 1.0;
        for t in 1..=steps {
            prop_assert!(s.beta(t) > 0.0 && s.beta(t) < 1.0);
            prop_assert!(((s.lambda1(t).powi(2) + s.lambda2(t).powi(2)) - 1.0).abs() < 1e-12);
            prop_assert!(s.alpha_bar(t) < prev);
            prev = s.alpha_bar(t);
            if t > 1 {
                prop_assert!(s.beta(t) >= s.beta(t - 1));
            }
        }
        prop_assert_eq!(s.beta(steps), b0 + span);
    }

    #[test]
    fn match_equals_exhaustive_scan(sigma in 1e-9f64..0.2, root in any::<bool>()) {
        let s = sched();
        let metric = if root { MatchMetric::SqrtOneMinusAlphaBar } else { MatchMetric::SqrtBeta };
        let m = match_state(sigma, &s, MatchOptions { p: 1.0, metric }).unwrap();
        prop_assert_eq!(m.t_star, brute_force(sigma, &s, metric));
    }

    #[test]
    fn match_is_monotone_in_sigma(a in 1e-4f64..0.12, b in 1e-4f64..0.12) {
        let s = sched();
        let (lo, hi) = if a <= b { (a, b) } else { (b, a) };
        let tl = match_state(lo, &s, MatchOptions::default()).unwrap().t_star;
        let th = match_state(hi, &s, MatchOptions::default()).unwrap().t_star;
        prop_assert!(tl <= th);
    }

    #[test]
    fn norm_order_does_not_move_the_argmin(sigma in 1e-4f64..0.12, p in 1.0f64..4.0) {
        let s = sched();
        let a = match_state(sigma, &s, MatchOptions { p: 1.0, ..Default::default() }).unwrap();
        let b = match_state(sigma, &s, MatchOptions { p, ..Default::default() }).unwrap();
        prop_assert_eq!(a.t_star, b.t_star);
    }

    #[test]
    fn calibration_zeroes_means_and_keeps_sums(
        seed in any::<u64>(),
        offset in -0.5f64..0.5,
    ) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let x = Array4::from_shape_simple_fn((3, 2, 6, 5), || rng.random_range(-1.0f32..1.0));
        let y = Array4::from_shape_simple_fn((3, 2, 6, 5), || rng.random_range(-1.0..1.0) + offset);
        let out = Stage1Output::from_estimates(&x, y, PairOptions::new(2, PriorStrategy::AdjacentDirections));
        let c = calibrate(&out).unwrap();
        for m in c.slice_mean.iter() {
            prop_assert!(m.abs() < 1e-6);
        }
        let before = out.x();
        let after = c.x();
        for (a, b) in before.iter().zip(after.iter()) {
            prop_assert!((a - b).abs() < 1e-12);
        }
    }

    #[test]
    fn shuffle_preserves_the_multiset(seed in any::<u64>(), h in 1usize..20, w in 1usize..20) {
        use rand::{Rng, SeedableRng};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(seed);
        let r = Array2::from_shape_simple_fn((h, w), || rng.random_range(-1.0f32..1.0));
        let a = noise_shuffle(r.view(), seed);
        let mut before: Vec<f32> = r.iter().copied().collect();
        let mut after: Vec<f32> = a.iter().copied().collect();
        before.sort_by(f32::total_cmp);
        after.sort_by(f32::total_cmp);
        prop_assert_eq!(before, after);
        prop_assert_eq!(noise_shuffle(r.view(), seed), a);
    }
}

#[test]
fn ties_resolve_to_the_largest_state() {
    let s = sched();
    let m = match_state(5e-5f64.sqrt(), &s, MatchOptions::default()).unwrap();
    assert_eq!(m.t_star, 300);
    assert_eq!(m.distance, 0.0);
    assert_eq!(match_state(0.05, &s, MatchOptions::default()).unwrap().t_star, 472);
    assert_eq!(match_state(1.0, &s, MatchOptions::default()).unwrap().t_star, 1000);
    assert_eq!(match_state(0.0, &s, MatchOptions::default()).unwrap().t_star, 1);
}

#[test]
fn shuffle_moves_pixels() {
    let r = Array2::from_shape_fn((16, 16), |(i, j)| (i * 16 + j) as f32);
    let a = noise_shuffle(r.view(), 3);
    let moved = r.iter().zip(a.iter()).filter(|(x, y)| x != y).count();
    assert!(moved > 200, "{moved}");
    assert_ne!(noise_shuffle(r.view(), 4), a);
}
