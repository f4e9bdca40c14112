//! One PASS/FAIL line per acceptance criterion.

use std::path::Path;
use std::time::{Duration, Instant};

use ddm2::backbone::net::{loss, loss_and_grad};
use ddm2::backbone::{self, DenoiserHandle, NetworkSize, to_act};
use ddm2::data_io::{NormalizationMode, PairOptions, PriorStrategy, Volume4D, normalize, normalize_with, read_container};
use ddm2::evalsim::{CoilMaps, NoiseModel, PhantomSpec, inject_kspace_noise_complex, make_phantom, one_sided_proportion_test};
use ddm2::pipeline::{InputConfig, PipelineConfig, RunManifest, run_pipeline_with};
use ddm2::sampler::{self, CleanPredictor, SamplerOptions, ThresholdPolicy, Verdict, denoise};
use ddm2::schedule::{NoiseSchedule, ScheduleParams, build_schedule};
use ddm2::stage1::{Stage1Config, Stage1Output, infer_stage1, train_stage1};
use ddm2::stage2::{FitScope, MatchMetric, MatchOptions, calibrate, fit_noise_model, match_fits, match_state};
use ddm2::stage3::{BatchSampler, Stage3Config, noise_shuffle};
use ndarray::{Array2, Array3, Array4, ArrayView3, ArrayView4, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

type Outcome = Result<String, String>;

struct Report {
    failures: usize,
}

impl Report {
    fn run(&mut self, id: usize, name: &str, limit: Option<Duration>, f: impl FnOnce() -> Outcome) {
        let clock = Instant::now();
        let res = std::panic::catch_unwind(std::panic::AssertUnwindSafe(f))
            .unwrap_or_else(|p| Err(format!("panicked: {:?}", p.downcast_ref::<String>().map(String::as_str).or(p.downcast_ref::<&str>().copied()))));
        let took = clock.elapsed();
        let res = match (res, limit) {
            (Ok(msg), Some(l)) if took > l => Err(format!("{msg}; runtime {:.1}s exceeds {:.0}s", took.as_secs_f64(), l.as_secs_f64())),
            (r, _) => r,
        };
        let (tag, msg) = match res {
            Ok(m) => ("PASS", m),
            Err(m) => {
                self.failures += 1;
                ("FAIL", m)
            }
        };
        println!("{tag} [{id:>2}] {name}: {msg} ({:.2}s)", took.as_secs_f64());
    }
}

fn check(ok: bool, msg: String) -> Outcome {
    if ok { Ok(msg) } else { Err(msg) }
}

fn sched() -> NoiseSchedule {
    build_schedule(ScheduleParams::default()).unwrap()
}

fn c1_schedule() -> Outcome {
    let s = sched();
    let exact = s.beta(1) == 5e-5 && s.beta(300) == 5e-5 && s.beta(1000) == 1e-2 && s.beta(301) > 5e-5;
    let worst = (1..=s.T())
        .map(|t| (s.lambda1(t).powi(2) + s.lambda2(t).powi(2) - 1.0).abs())
        .fold(0.0, f64::max);
    check(
        exact && worst < 1e-12,
        format!("beta_1={:e} beta_300={:e} beta_1000={:e}, max |l1^2+l2^2-1| = {worst:.1e}", s.beta(1), s.beta(300), s.beta(1000)),
    )
}

fn c2_matching() -> Outcome {
    let s = sched();
    let oracle = |sigma: f64| {
        let levels: Vec<f64> = (1..=s.T()).map(|t| s.beta(t).sqrt()).collect();
        let best = levels.iter().map(|l| (l - sigma).abs()).fold(f64::INFINITY, f64::min);
        (1..=s.T()).rev().find(|&t| (levels[t - 1] - sigma).abs() == best).unwrap()
    };
    let mut rng = ChaCha8Rng::seed_from_u64(2);
    let mut mismatches = 0;
    for _ in 0..1000 {
        let sigma = rng.random_range(0.0..0.12);
        if match_state(sigma, &s, MatchOptions::default()).map_err(|e| e.to_string())?.t_star != oracle(sigma) {
            mismatches += 1;
        }
    }
    let tie = match_state(5e-5f64.sqrt(), &s, MatchOptions::default()).map_err(|e| e.to_string())?.t_star;
    check(mismatches == 0 && tie == 300, format!("{mismatches}/1000 mismatches, sqrt(5e-5) -> t={tie}"))
}

fn c3_calibration() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let (mut worst_mean, mut worst_sum) = (0.0f64, 0.0f64);
    for _ in 0..100 {
        let shape = (rng.random_range(2..5), rng.random_range(1..4), rng.random_range(4..17), rng.random_range(4..17));
        let offset = rng.random_range(-0.3..0.3);
        let x = Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0f32..1.0));
        let y = Array4::from_shape_simple_fn(shape, || rng.random_range(-1.0..1.0) + offset);
        let out = Stage1Output::from_estimates(&x, y, PairOptions::new(1, PriorStrategy::AdjacentDirections));
        let c = calibrate(&out).map_err(|e| e.to_string())?;
        worst_mean = c.slice_mean.iter().fold(worst_mean, |m, v| m.max(v.abs()));
        worst_sum = out.x().iter().zip(c.x().iter()).fold(worst_sum, |m, (a, b)| m.max((a - b).abs()));
    }
    check(
        worst_mean < 1e-6 && worst_sum < 1e-12,
        format!("max |mean residual| {worst_mean:.1e}, max change of y+e {worst_sum:.1e}"),
    )
}

fn c4_shuffle() -> Outcome {
    let mut rng = ChaCha8Rng::seed_from_u64(4);
    for i in 0..100 {
        let (h, w) = (rng.random_range(2..40), rng.random_range(2..40));
        let r = Array2::from_shape_simple_fn((h, w), || rng.random_range(-1.0f32..1.0));
        let a = noise_shuffle(r.view(), i);
        let mut p: Vec<f32> = r.iter().copied().collect();
        let mut q: Vec<f32> = a.iter().copied().collect();
        p.sort_by(f32::total_cmp);
        q.sort_by(f32::total_cmp);
        if p != q {
            return Err(format!("slice {i}: multisets differ"));
        }
        if noise_shuffle(r.view(), i) != a {
            return Err(format!("slice {i}: not deterministic"));
        }
    }
    Ok("100 slices: multisets identical, repeatable under seed".into())
}

struct Fixture {
    x: Volume4D,
    phi: DenoiserHandle,
    pairs: PairOptions,
}

fn small_fixture() -> Fixture {
    let (_, noisy) = make_phantom(&PhantomSpec::brain([16, 16, 4, 5], NoiseModel::Gaussian { sigma: 0.08 }, 5)).unwrap();
    let x = normalize(&noisy, NormalizationMode::GlobalMinmax).unwrap();
    let cfg = Stage1Config {
        steps: 200,
        lr: 1e-3,
        batch: 4,
        network: NetworkSize { depth: 2, base_width: 8 },
        ..Default::default()
    };
    let (phi, _) = train_stage1(&x, &cfg).unwrap();
    Fixture { x, phi, pairs: cfg.pair_options() }
}

fn c5_blindness(fx: &Fixture) -> Outcome {
    let before = infer_stage1(&fx.phi, &fx.x, fx.pairs).map_err(|e| e.to_string())?;
    let mut changed = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(5);
    let d = fx.x.dims();
    for _ in 0..4 {
        let (vol, z) = (rng.random_range(0..d.l), rng.random_range(0..d.d));
        let mut y = fx.x.clone();
        y.slice_mut(vol, z).mapv_inplace(|_| rng.random_range(-1.0..1.0));
        let after = infer_stage1(&fx.phi, &y, fx.pairs).map_err(|e| e.to_string())?;
        let a = before.y_bar.slice(s![vol, z, .., ..]);
        let b = after.y_bar.slice(s![vol, z, .., ..]);
        changed += a.iter().zip(b.iter()).filter(|(p, q)| p.to_bits() != q.to_bits()).count();
    }
    check(changed == 0, format!("{changed} output values changed after replacing 4 target slices"))
}

struct Oracle(Array2<f32>);

impl CleanPredictor for Oracle {
    fn predict_clean(&self, st: ArrayView3<f32>, _: Option<ArrayView4<f32>>, _: f64) -> ddm2::Result<Array3<f32>> {
        Ok(self.0.broadcast((st.dim().0, self.0.nrows(), self.0.ncols())).unwrap().to_owned())
    }
}

fn c6_oracle_round_trip() -> Outcome {
    let s = sched();
    let (clean, noisy) = make_phantom(&PhantomSpec::desk(0.08, 6)).map_err(|e| e.to_string())?;
    let oracle = Oracle(clean.slice(2, 4).to_owned());
    let mut notes = Vec::new();
    for t in [1, 300, 472, 1000] {
        let (out, tr) = denoise(noisy.slice(2, 4), None, &oracle, &s, t, 9, &SamplerOptions::default())
            .map_err(|e| e.to_string())?;
        if out != oracle.0 || tr.transitions != t {
            return Err(format!("t={t}: output differs from the clean slice or {} transitions", tr.transitions));
        }
        notes.push(t.to_string());
    }
    Ok(format!("exact clean slice from t* in {{{}}}", notes.join(", ")))
}

const DESK: NetworkSize = NetworkSize { depth: 3, base_width: 16 };

fn desk_config(spec: PhantomSpec) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_json_str(r#"{"input": {"kind": "file", "path": "-", "format": "nifti1"}, "schedule": {"T": 1000}}"#)
        .unwrap();
    cfg.seed = 7;
    cfg.input = InputConfig::Phantom { spec };
    cfg.stage1 = Stage1Config { n: 2, steps: 2_000, lr: 1e-3, batch: 4, network: DESK, ..Default::default() };
    cfg.stage2.metric = MatchMetric::SqrtOneMinusAlphaBar;
    cfg.stage3 = Stage3Config { steps: 10_000, lr: 1e-3, batch: 4, network: DESK, ..Default::default() };
    cfg
}

fn c7_end_to_end(dir: &Path) -> Outcome {
    let cfg = desk_config(PhantomSpec::desk(0.08, 7));
    let m = run_pipeline_with(&cfg, dir).map_err(|e| e.to_string())?;
    let metric = |name: &str| m.metrics.as_ref().and_then(|ms| ms.iter().find(|s| s.name == name)).map(|s| s.mean);
    let (Some(noisy), Some(den), Some(dsnr)) = (metric("psnr_noisy"), metric("psnr_denoised"), metric("delta_snr")) else {
        return Err("metrics missing from the run manifest".into());
    };
    check(
        den >= noisy + 3.0 && dsnr > 0.0,
        format!("PSNR {noisy:.2} -> {den:.2} dB (gain {:+.2}, need +3), mean dSNR {dsnr:+.3}", den - noisy),
    )
}

fn load_run(dir: &Path) -> Result<(RunManifest, DenoiserHandle), String> {
    let m = RunManifest::load(dir.join("manifest.json")).map_err(|e| e.to_string())?;
    let f = backbone::load(dir.join("stage3.ckpt")).map_err(|e| e.to_string())?;
    Ok((m, f))
}

fn c8_transitions(dir: &Path) -> Outcome {
    let s = sched();
    let (_, f) = load_run(dir)?;
    let (_, noisy) = make_phantom(&PhantomSpec::desk(0.05, 8)).map_err(|e| e.to_string())?;
    let x = normalize(&noisy, NormalizationMode::GlobalMinmax).map_err(|e| e.to_string())?;
    let t_star = match_state(0.05, &s, MatchOptions::default()).map_err(|e| e.to_string())?.t_star;
    let (_, tr) = denoise(x.slice(1, 3), None, &f, &s, t_star, 1, &SamplerOptions::default()).map_err(|e| e.to_string())?;
    check(
        t_star == 472 && tr.transitions == t_star && tr.transitions < s.T(),
        format!("t*={t_star}, {} reverse transitions of T={} ({:.1}x fewer)", tr.transitions, s.T(), s.T() as f64 / tr.transitions as f64),
    )
}

fn c9_kspace() -> Outcome {
    let (h, w) = (128, 128);
    let zero = Array2::<f64>::zeros((h, w));
    let sigma = 0.05;
    let img = inject_kspace_noise_complex(zero.view(), &CoilMaps::single(h, w), sigma, 9).map_err(|e| e.to_string())?;
    let n = (h * w) as f64;
    let re = (img[0].iter().map(|v| v.re * v.re).sum::<f64>() / n).sqrt();
    let im = (img[0].iter().map(|v| v.im * v.im).sum::<f64>() / n).sqrt();
    let energy = img[0].iter().map(|v| v.norm_sqr()).sum::<f64>() / (2.0 * sigma * sigma * n);
    check(
        (re / sigma - 1.0).abs() < 0.05 && (im / sigma - 1.0).abs() < 0.05 && (energy - 1.0).abs() < 0.05,
        format!("std re {re:.4} im {im:.4} (target {sigma}), energy ratio {energy:.4}"),
    )
}

fn c10_outliers(dir: &Path) -> Outcome {
    let (m, f) = load_run(dir)?;
    let phi = backbone::load(dir.join("stage1.ckpt")).map_err(|e| e.to_string())?;
    let cfg = &m.config;
    let s = build_schedule(cfg.schedule).map_err(|e| e.to_string())?;
    // Both acquisitions share the training run's intensity frame.
    let frame = read_container(dir.join("input.ddm2vol"))
        .and_then(|c| c.into_volume())
        .map_err(|e| e.to_string())?
        .normalization
        .ok_or("run input is not normalized")?;
    let mut traces = Vec::new();
    for (group, (sigma, seed)) in [(0.08, 10), (0.01, 11)].into_iter().enumerate() {
        let (_, noisy) = make_phantom(&PhantomSpec::desk(sigma, seed)).map_err(|e| e.to_string())?;
        let x = normalize_with(&noisy, &frame).map_err(|e| e.to_string())?;
        let s1 = calibrate(&infer_stage1(&phi, &x, cfg.stage1.pair_options()).map_err(|e| e.to_string())?)
            .map_err(|e| e.to_string())?;
        let fits = fit_noise_model(&s1, FitScope::PerVolume, None).map_err(|e| e.to_string())?;
        let matches = match_fits(&fits, &s, cfg.stage2.match_options()).map_err(|e| e.to_string())?;
        let t_of = |vol: usize, z: usize| matches[fits.index_of(vol, z)].t_star;
        let (_, tr) = sampler::denoise_sequence(&x, &f, &s, &s1.pairs, &t_of, seed, 8, &SamplerOptions::default())
            .map_err(|e| e.to_string())?;
        traces.extend(tr.into_iter().map(|(_, t)| (group, t)));
    }
    let only: Vec<_> = traces.iter().map(|(_, t)| t.clone()).collect();
    let verdicts = sampler::detect_outliers(&only, ThresholdPolicy::default()).map_err(|e| e.to_string())?;
    let (mut k_lo, mut n_lo, mut k_hi, mut n_hi) = (0, 0, 0, 0);
    for ((group, _), v) in traces.iter().zip(&verdicts) {
        let flagged = (*v == Verdict::Outlier) as usize;
        if *group == 1 {
            k_lo += flagged;
            n_lo += 1;
        } else {
            k_hi += flagged;
            n_hi += 1;
        }
    }
    let test = one_sided_proportion_test(k_lo, n_lo, k_hi, n_hi);
    check(
        test.p_value < 0.05 && k_lo * n_hi > k_hi * n_lo,
        format!("flagged {k_lo}/{n_lo} low-departure vs {k_hi}/{n_hi} high-departure slices, z={:.2} p={:.2e}", test.statistic, test.p_value),
    )
}

fn c11_gradient(fx: &Fixture) -> Outcome {
    let s = sched();
    let s1 = calibrate(&infer_stage1(&fx.phi, &fx.x, fx.pairs).map_err(|e| e.to_string())?).map_err(|e| e.to_string())?;
    let fits = fit_noise_model(&s1, FitScope::PerVolume, None).map_err(|e| e.to_string())?;
    let cfg = Stage3Config { batch: 2, network: NetworkSize { depth: 2, base_width: 4 }, seed: 11, ..Default::default() };
    let batch = BatchSampler::new(&fx.x, &s1, &s, &fits, cfg).and_then(|mut b| b.next_batch()).map_err(|e| e.to_string())?;
    let h = DenoiserHandle::new(cfg.spec(s1.pairs.n), 11).map_err(|e| e.to_string())?;
    let p = h.params.cast::<f64>();
    let x = to_act::<f64>(batch.inputs.view());
    let target: Vec<f64> = batch.targets.iter().map(|&v| v as f64).collect();
    let (_, g) = loss_and_grad(h.net(), &p, x.clone(), Some(&batch.levels), &target);
    let mut rng = ChaCha8Rng::seed_from_u64(11);
    let mut worst = 0.0f64;
    for _ in 0..10 {
        let (e, o) = p.locate(rng.random_range(0..p.count()));
        let eps = 1e-6;
        let (mut plus, mut minus) = (p.clone(), p.clone());
        plus.entries[e].data[o] += eps;
        minus.entries[e].data[o] -= eps;
        let fd = (loss(h.net(), &plus, x.clone(), Some(&batch.levels), &target)
            - loss(h.net(), &minus, x.clone(), Some(&batch.levels), &target))
            / (2.0 * eps);
        let an = g.entries[e].data[o];
        let rel = (fd - an).abs() / fd.abs().max(an.abs()).max(1e-8);
        worst = worst.max(rel);
    }
    check(worst < 1e-3, format!("max relative error {worst:.2e} over 10 parameters"))
}

fn main() {
    let mut r = Report { failures: 0 };
    let secs = Duration::from_secs;
    r.run(1, "schedule exactness", Some(secs(1)), c1_schedule);
    r.run(2, "state-matching oracle equivalence", Some(secs(5)), c2_matching);
    r.run(3, "calibration identities", Some(secs(5)), c3_calibration);
    r.run(4, "noise-shuffle permutation", Some(secs(5)), c4_shuffle);
    let clock = Instant::now();
    let fx = small_fixture();
    let fixture_time = clock.elapsed();
    r.run(5, "J-invariance blindness", Some(secs(60) - fixture_time), || c5_blindness(&fx));
    r.run(6, "oracle sampler round trip", Some(secs(10)), c6_oracle_round_trip);
    let dir = tempfile::tempdir().expect("temp dir");
    r.run(7, "end-to-end phantom gain", Some(secs(45 * 60)), || c7_end_to_end(dir.path()));
    r.run(8, "transition-count speed-up", None, || c8_transitions(dir.path()));
    r.run(9, "k-space simulation statistics", Some(secs(10)), c9_kspace);
    r.run(10, "outlier detector discrimination", Some(secs(5 * 60)), || c10_outliers(dir.path()));
    r.run(11, "gradient sanity", Some(secs(60)), || c11_gradient(&fx));
    println!("{} of 11 criteria passed", 11 - r.failures);
    if r.failures > 0 {
        std::process::exit(1);
    }
}
