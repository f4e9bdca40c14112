//! Full three-stage run on the desk phantom, reporting PSNR and ΔSNR.
//!
//! `cargo run --example phantom_end_to_end -- [stage1_steps] [stage3_steps]`
//!
//! Environment: `DDM2_LR`, `DDM2_BATCH`, `DDM2_METRIC=sqrt_beta` and
//! `DDM2_PRIORS=1` (condition F on the prior slices).

use std::time::Instant;

use ddm2::backbone::NetworkSize;
use ddm2::data_io::{NormalizationMode, denormalize, normalize};
use ddm2::evalsim::{PhantomSpec, evaluate, make_phantom, phantom_masks};
use ddm2::sampler::{SamplerOptions, denoise_sequence};
use ddm2::schedule::{ScheduleParams, build_schedule};
use ddm2::stage1::{Stage1Config, infer_stage1, train_stage1};
use ddm2::stage2::{FitScope, MatchMetric, MatchOptions, calibrate, fit_noise_model, match_fits};
use ddm2::stage3::{Stage3Config, train_stage3};

fn main() -> ddm2::Result<()> {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info")).init();
    let args: Vec<usize> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let s1_steps = args.first().copied().unwrap_or(2_000);
    let s3_steps = args.get(1).copied().unwrap_or(10_000);
    let lr: f64 = std::env::var("DDM2_LR").ok().and_then(|v| v.parse().ok()).unwrap_or(1e-3);
    let batch: usize = std::env::var("DDM2_BATCH").ok().and_then(|v| v.parse().ok()).unwrap_or(4);
    let net = NetworkSize { depth: 3, base_width: 16 };

    let spec = PhantomSpec::desk(0.08, 7);
    let (clean, noisy) = make_phantom(&spec)?;
    let x = normalize(&noisy, NormalizationMode::GlobalMinmax)?;
    let sched = build_schedule(ScheduleParams::default())?;

    let clock = Instant::now();
    let c1 = Stage1Config { steps: s1_steps, lr, batch, network: net, ..Default::default() };
    let (phi, log1) = train_stage1(&x, &c1)?;
    let (first, last) = log1.window_means(0.1);
    println!("stage1: {:.1}s loss {first:.4} -> {last:.4}", clock.elapsed().as_secs_f64());

    let s1 = calibrate(&infer_stage1(&phi, &x, c1.pair_options())?)?;
    let fits = fit_noise_model(&s1, FitScope::PerVolume, None)?;
    let metric = match std::env::var("DDM2_METRIC").as_deref() {
        Ok("sqrt_beta") => MatchMetric::SqrtBeta,
        _ => MatchMetric::SqrtOneMinusAlphaBar,
    };
    let matches = match_fits(&fits, &sched, MatchOptions { metric, ..Default::default() })?;
    let scale = x.normalization.as_ref().unwrap().scale(0);
    for (f, m) in fits.fits.iter().zip(&matches) {
        println!(
            "volume {:?}: sigma {:.4} (injected {:.4}) -> t* {}",
            f.volume, f.sigma, 0.08 * scale, m.t_star
        );
    }

    let clock = Instant::now();
    let priors = std::env::var("DDM2_PRIORS").map(|v| v == "1").unwrap_or(false);
    let c3 = Stage3Config { steps: s3_steps, lr, batch, network: net, condition_on_priors: priors, ..Default::default() };
    let (f, log3) = train_stage3(&x, &s1, &sched, &fits, &c3, None)?;
    let (first, last) = log3.window_means(0.1);
    println!("stage3: {:.1}s loss {first:.4} -> {last:.4}", clock.elapsed().as_secs_f64());

    let clock = Instant::now();
    let t_of = |vol: usize, z: usize| matches[fits.index_of(vol, z)].t_star;
    let (out, _) = denoise_sequence(&x, &f, &sched, &s1.pairs, &t_of, 11, 8, &SamplerOptions::default())?;
    println!("sampling: {:.1}s", clock.elapsed().as_secs_f64());
    let denoised = denormalize(&x.with_data(out)?)?;
    let ybar = denormalize(&x.with_data(s1.y_bar.mapv(|v| v as f32))?)?;

    let masks = phantom_masks(&spec)?;
    let rep = evaluate(denoised.data(), noisy.data(), Some(clean.data()), &masks, 1.0)?;
    let rep1 = evaluate(ybar.data(), noisy.data(), Some(clean.data()), &masks, 1.0)?;
    for name in ["psnr_noisy", "psnr_denoised", "ssim_noisy", "ssim_denoised", "delta_snr", "delta_cnr"] {
        println!("{name}: {:.3}", rep.metric(name).unwrap().mean);
    }
    println!("stage1 psnr: {:.3}", rep1.metric("psnr_denoised").unwrap().mean);
    Ok(())
}
