//! Corrupts a Stage I estimate with its own spatially shuffled residual, as
//! done when building Stage III training pairs.

use ddm2::schedule::{ScheduleParams, build_schedule};
use ddm2::stage3::{ShuffleMode, corrupt_with, noise_shuffle};
use ndarray::Array2;
use rand::SeedableRng;
use rand_distr::{Distribution, StandardNormal};

fn std(a: &Array2<f32>) -> f64 {
    let n = a.len() as f64;
    let m = a.iter().map(|&v| v as f64).sum::<f64>() / n;
    (a.iter().map(|&v| (v as f64 - m).powi(2)).sum::<f64>() / n).sqrt()
}

fn main() -> ddm2::Result<()> {
    let sched = build_schedule(ScheduleParams::default())?;
    let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(0);
    let sigma = 0.1;
    let y_bar = Array2::from_shape_fn((32, 32), |(i, j)| ((i as f32 / 5.0).sin() * (j as f32 / 7.0).cos()) * 0.6);
    let residual = Array2::from_shape_simple_fn((32, 32), || {
        let z: f64 = StandardNormal.sample(&mut rng);
        (sigma * z) as f32
    });

    let shuffled = noise_shuffle(residual.view(), 1);
    let moved = residual.iter().zip(shuffled.iter()).filter(|(a, b)| a != b).count();
    println!("shuffle moved {moved} of {} pixels; std {:.4} -> {:.4}", residual.len(), std(&residual), std(&shuffled));

    for t in [100, 472, 1000] {
        for mode in [ShuffleMode::Literal, ShuffleMode::Scaled] {
            let s = corrupt_with(&sched, y_bar.view(), residual.view(), t, mode, sigma, 2, true)?;
            println!(
                "t={t:>4} {mode:?}: injected std {:.4} (lambda2 {:.4}), state range [{:.3}, {:.3}]",
                std(&s.noise_used),
                sched.lambda2(t),
                s.state.iter().copied().fold(f32::MAX, f32::min),
                s.state.iter().copied().fold(f32::MIN, f32::max)
            );
        }
    }
    Ok(())
}
