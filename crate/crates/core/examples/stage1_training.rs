//! Trains the Stage I network on a noisy phantom and reports how closely the
//! residual tracks the injected noise.
//!
//! `cargo run --example stage1_training -- [steps]`

use ddm2::backbone::NetworkSize;
use ddm2::data_io::{NormalizationMode, normalize};
use ddm2::evalsim::{PhantomSpec, make_phantom, psnr};
use ddm2::stage1::{Stage1Config, infer_stage1, train_stage1};
use ddm2::stage2::{FitScope, calibrate, fit_noise_model};

fn main() -> ddm2::Result<()> {
    let steps = std::env::args().nth(1).and_then(|s| s.parse().ok()).unwrap_or(600);
    let sigma = 0.08;
    let (clean, noisy) = make_phantom(&PhantomSpec::desk(sigma, 1))?;
    let x = normalize(&noisy, NormalizationMode::GlobalMinmax)?;
    let scale = x.normalization.as_ref().map_or(1.0, |n| n.scale(0));

    let cfg = Stage1Config {
        steps,
        lr: 1e-3,
        batch: 4,
        log_every: 50,
        network: NetworkSize { depth: 3, base_width: 16 },
        ..Default::default()
    };
    let (phi, log) = train_stage1(&x, &cfg)?;
    let (first, last) = log.window_means(0.1);
    println!("loss {first:.4} -> {last:.4} over {steps} steps");

    let out = calibrate(&infer_stage1(&phi, &x, cfg.pair_options())?)?;
    let fit = &fit_noise_model(&out, FitScope::Global, None)?.fits[0];
    println!("residual sigma {:.4} (raw units), injected {sigma}", fit.sigma / scale);

    let y = out.y_bar_slice(0, 4).mapv(|v| (v + 1.0) / scale as f32);
    let c = clean.slice(0, 4).mapv(|v| v - x.normalization.as_ref().unwrap().bounds[0][0] as f32);
    println!("slice (0, 4): noisy {:.2} dB, estimate {:.2} dB", psnr(noisy.slice(0, 4), clean.slice(0, 4), 1.0), psnr(y.view(), c.view(), 1.0));
    Ok(())
}
