use ddm2::backbone::NetworkSize;
use ddm2::data_io::{NormalizationMode, Volume4D, normalize};
use ddm2::evalsim::{PhantomSpec, make_phantom};
use ddm2::schedule::{ScheduleParams, build_schedule};
use ddm2::stage1::{Stage1Config, infer_stage1, train_stage1};
use ddm2::stage2::{FitScope, calibrate, fit_noise_model};
use ddm2::stage3::{ShuffleMode, Stage3Config, corrupt_for_training, train_stage3};
use ndarray::{Array2, Array4, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

const TINY: NetworkSize = NetworkSize { depth: 2, base_width: 8 };

fn noisy_sequence(l: usize, d: usize, hw: usize, sigma: f32, seed: u64) -> Volume4D {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let data = Array4::from_shape_fn((l, d, hw, hw), |(v, z, i, j)| {
        let base = ((i as f32 / 3.0).sin() + (j as f32 / 4.0 + z as f32).cos()) * 0.3 + 0.05 * v as f32;
        base + sigma * rng.random_range(-1.7f32..1.7)
    });
    let v = Volume4D::new(data, [1.0; 3], "synthetic").unwrap();
    normalize(&v, NormalizationMode::GlobalMinmax).unwrap()
}

#[test]
fn stage1_output_ignores_the_target_slice() {
    let x = noisy_sequence(4, 2, 16, 0.1, 1);
    let cfg = Stage1Config { steps: 20, lr: 1e-3, batch: 2, network: TINY, ..Default::default() };
    let (phi, _) = train_stage1(&x, &cfg).unwrap();
    let before = infer_stage1(&phi, &x, cfg.pair_options()).unwrap();

    let mut y = x.clone();
    y.slice_mut(2, 1).mapv_inplace(|v| -v + 0.37);
    let after = infer_stage1(&phi, &y, cfg.pair_options()).unwrap();
    let a = before.y_bar.slice(s![2, 1, .., ..]);
    let b = after.y_bar.slice(s![2, 1, .., ..]);
    assert!(a.iter().zip(b.iter()).all(|(p, q)| p.to_bits() == q.to_bits()));
    // the residual absorbs the perturbation
    assert_ne!(before.residual.slice(s![2, 1, .., ..]), after.residual.slice(s![2, 1, .., ..]));
}

#[test]
fn stage1_learns_identical_volumes() {
    let one = Array4::from_shape_fn((1, 2, 16, 16), |(_, z, i, j)| {
        ((i as f32 / 5.0).sin() * (j as f32 / 6.0 + z as f32).cos()) * 0.8
    });
    let data = ndarray::concatenate(ndarray::Axis(0), &[one.view(), one.view(), one.view()]).unwrap();
    let x = normalize(&Volume4D::new(data, [1.0; 3], "same").unwrap(), NormalizationMode::GlobalMinmax).unwrap();
    let cfg = Stage1Config { steps: 1500, lr: 2e-3, batch: 2, network: TINY, ..Default::default() };
    let (_, log) = train_stage1(&x, &cfg).unwrap();
    let (_, last) = log.window_means(0.05);
    assert!(last < 1e-4, "final loss {last}");
}

#[test]
fn stage1_residual_tracks_injected_noise() {
    let spec = PhantomSpec::desk(0.08, 3);
    let (_, noisy) = make_phantom(&spec).unwrap();
    let x = normalize(&noisy, NormalizationMode::GlobalMinmax).unwrap();
    let scale = x.normalization.as_ref().unwrap().scale(0);
    let net = NetworkSize { depth: 3, base_width: 16 };
    let cfg = Stage1Config { steps: 600, lr: 1e-3, batch: 4, network: net, ..Default::default() };
    let (phi, _) = train_stage1(&x, &cfg).unwrap();
    let out = calibrate(&infer_stage1(&phi, &x, cfg.pair_options()).unwrap()).unwrap();
    let fits = fit_noise_model(&out, FitScope::Global, None).unwrap();
    let raw_sigma = fits.fits[0].sigma / scale;
    assert!((0.06..=0.10).contains(&raw_sigma), "sigma {raw_sigma}");
}

fn stage3_inputs(x: &Volume4D, steps: usize) -> (ddm2::stage1::Stage1Output, ddm2::stage2::FitSet) {
    let cfg = Stage1Config { steps, lr: 1e-3, batch: 2, network: TINY, ..Default::default() };
    let (phi, _) = train_stage1(x, &cfg).unwrap();
    let s1 = calibrate(&infer_stage1(&phi, x, cfg.pair_options()).unwrap()).unwrap();
    let fits = fit_noise_model(&s1, FitScope::PerVolume, None).unwrap();
    (s1, fits)
}

#[test]
fn stage3_regresses_onto_the_noisy_input() {
    let x = noisy_sequence(3, 2, 16, 0.1, 5);
    let sched = build_schedule(ScheduleParams::default()).unwrap();
    let (s1, fits) = stage3_inputs(&x, 10);
    let cfg = Stage3Config { steps: 5, batch: 3, network: TINY, ..Default::default() };
    let mut seen = 0;
    let mut hook = |h: &ddm2::stage3::HookView<'_>| {
        for (i, &(vol, z)) in h.positions.iter().enumerate() {
            assert_eq!(h.targets.index_axis(ndarray::Axis(0), i), x.slice(vol, z));
            assert!((1..=1000).contains(&h.t[i]));
            seen += 1;
        }
    };
    train_stage3(&x, &s1, &sched, &fits, &cfg, Some(&mut hook)).unwrap();
    assert_eq!(seen, 15);
}

#[test]
fn stage3_overfits_a_single_slice() {
    let x = noisy_sequence(3, 1, 16, 0.05, 9);
    let sched = build_schedule(ScheduleParams::default()).unwrap();
    let (s1, fits) = stage3_inputs(&x, 10);
    let cfg = Stage3Config { steps: 2000, lr: 1e-3, batch: 1, network: TINY, ..Default::default() };
    let (_, log) = train_stage3(&x, &s1, &sched, &fits, &cfg, None).unwrap();
    let (first, last) = log.window_means(0.05);
    assert!(last < 0.5 * first, "{first} -> {last}");
}

#[test]
fn scaled_shuffle_noise_has_the_schedule_std() {
    let sched = build_schedule(ScheduleParams::default()).unwrap();
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let sigma = 0.07;
    let residual = Array2::from_shape_simple_fn((64, 64), || {
        let z: f64 = rand_distr::Distribution::sample(&rand_distr::StandardNormal, &mut rng);
        (sigma * z) as f32
    });
    let zero = Array2::zeros((64, 64));
    for t in [1, 300, 472, 800, 1000] {
        let f = corrupt_for_training(&sched, zero.view(), residual.view(), t, ShuffleMode::Scaled, sigma, 4).unwrap();
        let n = f.noise_used.len() as f64;
        let mean = f.noise_used.iter().map(|&v| v as f64).sum::<f64>() / n;
        let std = (f.noise_used.iter().map(|&v| (v as f64 - mean).powi(2)).sum::<f64>() / n).sqrt();
        let want = sched.lambda2(t);
        assert!((std / want - 1.0).abs() < 0.05, "t={t}: {std} vs {want}");
    }
}
