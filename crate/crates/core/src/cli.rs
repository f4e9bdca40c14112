//! Command-line front end. Every subcommand maps onto one library
//! operation; errors go to stderr as a JSON object and set the exit code.

use std::fs;
use std::path::{Path, PathBuf};

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde_json::json;

use crate::backbone;
use crate::data_io::{self, IngestFormat, NormalizationMode};
use crate::error::{Error, Result};
use crate::evalsim::{self, CoilMaps, PhantomSpec};
use crate::pipeline::{self, PipelineConfig, RunManifest};
use crate::sampler::{self, SamplerOptions};
use crate::schedule::{ScheduleParams, ScheduleShape, build_schedule};
use crate::stage1::{self, Stage1Output};
use crate::stage2;
use crate::stage3::{self, TrainTarget};

#[derive(Debug, Parser)]
#[command(name = "ddm2", version, about = "Self-supervised diffusion MRI denoising")]
pub struct Cli {
    /// Directory all relative paths are resolved against.
    #[arg(long, global = true, default_value = ".")]
    pub workdir: PathBuf,
    /// Ablation switches: `no-shuffle`, `target=ybar`, `force-t=<t>`.
    #[arg(long = "ablation", global = true, value_name = "FLAG")]
    pub ablation: Vec<String>,
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Clone, Copy, ValueEnum)]
pub enum FormatArg {
    Nifti1,
    Raw,
}

impl From<FormatArg> for IngestFormat {
    fn from(f: FormatArg) -> Self {
        match f {
            FormatArg::Nifti1 => IngestFormat::Nifti1,
            FormatArg::Raw => IngestFormat::RawContainer,
        }
    }
}

#[derive(Debug, Args)]
pub struct ConfigArg {
    /// Pipeline config (JSON); only the relevant sections are used.
    #[arg(long)]
    pub config: PathBuf,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Read a NIfTI-1 or raw container, normalise it and write a container.
    Ingest {
        #[arg(long)]
        input: PathBuf,
        #[arg(long, value_enum, default_value = "nifti1")]
        format: FormatArg,
        #[arg(long)]
        out: PathBuf,
        /// Percentile bounds `lo,hi` instead of global min/max.
        #[arg(long, value_delimiter = ',', num_args = 2)]
        percentiles: Option<Vec<f64>>,
    },
    /// Train Φ and write its checkpoint and the Stage I output.
    Stage1Train {
        #[command(flatten)]
        config: ConfigArg,
        /// Normalised input container.
        #[arg(long)]
        input: PathBuf,
        #[arg(long, default_value = "stage1.ckpt")]
        out: PathBuf,
        #[arg(long, default_value = "stage1_output.ddm2vol")]
        output_volume: PathBuf,
    },
    /// Match a noise level to a chain state, or calibrate and fit a Stage I output.
    Stage2Match {
        #[arg(long)]
        sigma: Option<f64>,
        #[arg(long)]
        stage1: Option<PathBuf>,
        #[arg(long)]
        config: Option<PathBuf>,
        /// Where to write the calibrated output and fits.
        #[arg(long)]
        out: Option<PathBuf>,
    },
    /// Train F from a calibrated Stage I output.
    Stage3Train {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        input: PathBuf,
        /// Calibrated Stage I output from `stage2-match --out`.
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long, default_value = "stage3.ckpt")]
        out: PathBuf,
    },
    /// Denoise a normalised container with a trained F.
    Denoise {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        input: PathBuf,
        #[arg(long)]
        model: PathBuf,
        /// Calibrated Stage I output; its fitted noise sets the start state.
        #[arg(long)]
        stage1: PathBuf,
        #[arg(long)]
        out: PathBuf,
    },
    /// Generate slices from pure noise.
    Sample {
        #[command(flatten)]
        config: ConfigArg,
        #[arg(long)]
        model: PathBuf,
        /// Normalised container providing prior slices when F expects them.
        #[arg(long)]
        priors: Option<PathBuf>,
        #[arg(long, default_value_t = 32)]
        height: usize,
        #[arg(long, default_value_t = 32)]
        width: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        /// PNG output.
        #[arg(long)]
        out: PathBuf,
    },
    /// Write phantom datasets with k-space noise at several SNR levels.
    Simulate {
        #[arg(long, default_value_t = 4)]
        snr_levels: usize,
        #[arg(long, default_value_t = 4)]
        coils: usize,
        #[arg(long, default_value_t = 0)]
        seed: u64,
        #[arg(long, default_value = "simulated")]
        out: PathBuf,
    },
    /// Score a denoised container against its noisy input.
    Eval {
        #[arg(long)]
        denoised: PathBuf,
        #[arg(long)]
        noisy: PathBuf,
        #[arg(long)]
        clean: Option<PathBuf>,
        #[arg(long)]
        masks: PathBuf,
        #[arg(long, default_value_t = 1.0)]
        data_range: f64,
        #[arg(long, default_value = ".")]
        out: PathBuf,
    },
    /// Render schedule curves, RMSE trajectories and metric box plots for a run.
    Report {
        /// Run directory (a pipeline work directory).
        #[arg(long)]
        run: PathBuf,
    },
    /// Run the whole pipeline from a config file.
    Run {
        #[command(flatten)]
        config: ConfigArg,
    },
}

#[derive(Debug, Default, Clone, Copy, PartialEq)]
pub struct Ablations {
    pub no_shuffle: bool,
    pub target_ybar: bool,
    pub force_t: Option<usize>,
}

pub fn parse_ablations(flags: &[String]) -> Result<Ablations> {
    let mut a = Ablations::default();
    for f in flags {
        match f.split_once('=') {
            None if f == "no-shuffle" => a.no_shuffle = true,
            Some(("target", "ybar")) => a.target_ybar = true,
            Some(("target", "x")) => a.target_ybar = false,
            Some(("force-t", t)) => {
                a.force_t = Some(t.parse().map_err(|_| Error::ConfigInvalid {
                    path: "ablation.force-t".into(),
                    message: format!("`{t}` is not a state index"),
                })?)
            }
            _ => {
                return Err(Error::ConfigInvalid {
                    path: "ablation".into(),
                    message: format!("unknown ablation flag `{f}`"),
                });
            }
        }
    }
    Ok(a)
}

impl Ablations {
    pub fn apply(&self, cfg: &mut PipelineConfig) {
        if self.no_shuffle {
            cfg.stage3.ablation.no_shuffle = true;
        }
        if self.target_ybar {
            cfg.stage3.ablation.target = TrainTarget::YBar;
        }
        if self.force_t.is_some() {
            cfg.sampler.force_t = self.force_t;
        }
    }
}

struct Ctx {
    workdir: PathBuf,
    ablations: Ablations,
}

impl Ctx {
    fn path(&self, p: &Path) -> PathBuf {
        self.workdir.join(p)
    }

    fn config(&self, p: &Path) -> Result<PipelineConfig> {
        let mut cfg = PipelineConfig::load(self.path(p))?;
        self.ablations.apply(&mut cfg);
        cfg.validate()?;
        cfg.effective()
    }
}

fn print(v: serde_json::Value) {
    println!("{}", serde_json::to_string_pretty(&v).expect("json"));
}

fn write(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Executes a parsed command line.
pub fn execute(cli: Cli) -> Result<()> {
    let ctx = Ctx {
        workdir: cli.workdir.clone(),
        ablations: parse_ablations(&cli.ablation)?,
    };
    match cli.command {
        Command::Ingest {
            input,
            format,
            out,
            percentiles,
        } => {
            let v = data_io::ingest(ctx.path(&input), format.into())?;
            let mode = match percentiles.as_deref() {
                Some([lo, hi]) => NormalizationMode::PerVolumePercentile { p_lo: *lo, p_hi: *hi },
                _ => NormalizationMode::GlobalMinmax,
            };
            let x = data_io::normalize(&v, mode)?;
            data_io::export(&x, ctx.path(&out), Some("0"))?;
            print(json!({"dims": x.dims().as_array(), "normalization": x.normalization, "out": out}));
        }
        Command::Stage1Train {
            config,
            input,
            out,
            output_volume,
        } => {
            let cfg = ctx.config(&config.config)?;
            let x = data_io::ingest(ctx.path(&input), IngestFormat::RawContainer)?;
            let (phi, log) = stage1::train_stage1(&x, &cfg.stage1)?;
            let s1 = stage1::infer_stage1(&phi, &x, cfg.stage1.pair_options())?;
            backbone::save(&phi, ctx.path(&out))?;
            s1.save(&x, ctx.path(&output_volume))?;
            write(&ctx.path(Path::new("stage1_log.csv")), &log.to_csv())?;
            print(json!({"fingerprint": phi.fingerprint, "steps": phi.train_steps}));
        }
        Command::Stage2Match {
            sigma,
            stage1,
            config,
            out,
        } => {
            let cfg = config.map(|c| ctx.config(&c)).transpose()?;
            let sched = build_schedule(cfg.as_ref().map_or_else(ScheduleParams::default, |c| c.schedule))?;
            let s2 = cfg.as_ref().map(|c| c.stage2).unwrap_or_default();
            match (sigma, stage1) {
                (Some(sigma), _) => {
                    let m = stage2::match_state(sigma, &sched, s2.match_options())?;
                    println!("t_star={}", m.t_star);
                    print(serde_json::to_value(&m)?);
                }
                (None, Some(path)) => {
                    let s1 = Stage1Output::load(ctx.path(&path))?;
                    let s1c = if s1.is_calibrated() { s1 } else { stage2::calibrate(&s1)? };
                    let fits = stage2::fit_noise_model(&s1c, s2.scope, None)?;
                    let matches = stage2::match_fits(&fits, &sched, s2.match_options())?;
                    if let Some(out) = out {
                        let template = data_io::ingest(ctx.path(&path), IngestFormat::RawContainer)?;
                        s1c.save(&template, ctx.path(&out))?;
                        let fits_path = ctx.path(&out).with_extension("json");
                        write(&fits_path, &serde_json::to_string_pretty(&(&fits, &matches))?)?;
                    }
                    for m in &matches {
                        println!("t_star={}", m.t_star);
                    }
                    print(json!({"fits": fits, "matches": matches}));
                }
                (None, None) => {
                    return Err(Error::ConfigInvalid {
                        path: "stage2-match".into(),
                        message: "give --sigma or --stage1".into(),
                    });
                }
            }
        }
        Command::Stage3Train {
            config,
            input,
            stage1,
            out,
        } => {
            let cfg = ctx.config(&config.config)?;
            let x = data_io::ingest(ctx.path(&input), IngestFormat::RawContainer)?;
            let s1 = Stage1Output::load(ctx.path(&stage1))?;
            let sched = build_schedule(cfg.schedule)?;
            let fits = stage2::fit_noise_model(&s1, cfg.stage2.scope, None)?;
            let (f, log) = stage3::train_stage3(&x, &s1, &sched, &fits, &cfg.stage3, None)?;
            backbone::save(&f, ctx.path(&out))?;
            write(&ctx.path(Path::new("stage3_log.csv")), &log.to_csv())?;
            print(json!({"fingerprint": f.fingerprint, "steps": f.train_steps, "shuffle_mode": cfg.stage3.shuffle_mode}));
        }
        Command::Denoise {
            config,
            input,
            model,
            stage1,
            out,
        } => {
            let cfg = ctx.config(&config.config)?;
            let x = data_io::ingest(ctx.path(&input), IngestFormat::RawContainer)?;
            let s1 = Stage1Output::load(ctx.path(&stage1))?;
            let f = backbone::load(ctx.path(&model))?;
            let sched = build_schedule(cfg.schedule)?;
            let fits = stage2::fit_noise_model(&s1, cfg.stage2.scope, None)?;
            let matches = stage2::match_fits(&fits, &sched, cfg.stage2.match_options())?;
            let (den, traces) = pipeline::run_inference(&cfg, &x, &f, &sched, &s1, &fits, &matches)?;
            let raw = data_io::denormalize(&x.with_data(den)?)?;
            data_io::export(&raw, ctx.path(&out), Some("3"))?;
            let only: Vec<_> = traces.into_iter().map(|(_, t)| t).collect();
            sampler::write_rmse_report(
                &only,
                ctx.path(&out).with_extension("rmse.csv"),
                ctx.path(&out).with_extension("rmse.png"),
            )?;
            let t: Vec<usize> = matches.iter().map(|m| m.t_star).collect();
            print(json!({"out": out, "t_star": t}));
        }
        Command::Sample {
            config,
            model,
            priors,
            height,
            width,
            seed,
            out,
        } => {
            let cfg = ctx.config(&config.config)?;
            let f = backbone::load(ctx.path(&model))?;
            let sched = build_schedule(cfg.schedule)?;
            let n = f.spec.in_channels - 1;
            let cond = match (n, priors) {
                (0, _) => None,
                (n, Some(p)) => {
                    let v = data_io::ingest(ctx.path(&p), IngestFormat::RawContainer)?;
                    let z = v.dims().d / 2;
                    let slices: Vec<_> = (0..n).map(|k| v.slice(k % v.dims().l, z)).collect();
                    Some(ndarray::stack(ndarray::Axis(0), &slices).map_err(|e| Error::shape("stackable priors", e))?)
                }
                (n, None) => {
                    return Err(Error::ConfigInvalid {
                        path: "sample.priors".into(),
                        message: format!("model expects {n} prior channels; pass --priors"),
                    });
                }
            };
            let img = sampler::sample_unconditional(
                &f,
                &sched,
                (height, width),
                cond.as_ref().map(|c| c.view()),
                seed,
                &SamplerOptions::default(),
            )?;
            crate::plot::image_row(&[img.view()], ctx.path(&out))?;
            print(json!({"out": out, "seed": seed}));
        }
        Command::Simulate {
            snr_levels,
            coils,
            seed,
            out,
        } => {
            let m = simulate(&ctx.path(&out), snr_levels, coils, seed)?;
            print(m);
        }
        Command::Eval {
            denoised,
            noisy,
            clean,
            masks,
            data_range,
            out,
        } => {
            let d = data_io::ingest(ctx.path(&denoised), IngestFormat::RawContainer)?;
            let n = data_io::ingest(ctx.path(&noisy), IngestFormat::RawContainer)?;
            let c = clean
                .map(|p| data_io::ingest(ctx.path(&p), IngestFormat::RawContainer))
                .transpose()?;
            let masks = evalsim::read_masks(ctx.path(&masks))?;
            let rep = evalsim::evaluate(d.data(), n.data(), c.as_ref().map(|c| c.data()), &masks, data_range)?;
            let dir = ctx.path(&out);
            fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
            rep.write(&dir, "metrics")?;
            print(serde_json::to_value(&rep.summary)?);
        }
        Command::Report { run } => {
            let summary = report(&ctx.path(&run))?;
            print(summary);
        }
        Command::Run { config } => {
            let cfg = ctx.config(&config.config)?;
            let m = pipeline::run_pipeline_with(&cfg, &ctx.workdir)?;
            print(json!({
                "manifest": ctx.path(Path::new(pipeline::MANIFEST_FILE)),
                "fingerprints": m.fingerprint_count(),
                "resumed": m.session.resumed,
                "outliers": m.outliers,
            }));
        }
    }
    Ok(())
}

/// Phantom datasets with k-space noise at `levels` increasing noise levels.
pub fn simulate(out: &Path, levels: usize, coils: usize, seed: u64) -> Result<serde_json::Value> {
    if levels == 0 {
        return Err(Error::InvalidParams("snr-levels must be positive".into()));
    }
    fs::create_dir_all(out).map_err(|e| Error::io(out, e))?;
    let spec = PhantomSpec::brain([32, 32, 8, 6], evalsim::NoiseModel::Gaussian { sigma: 0.0 }, seed);
    let (clean, _) = evalsim::make_phantom(&spec)?;
    let masks = evalsim::phantom_masks(&spec)?;
    data_io::export(&clean, out.join("clean.ddm2vol"), None)?;
    evalsim::write_masks(&masks, out.join("masks.ddm2vol"))?;
    let maps = CoilMaps::ring(coils, 32, 32)?;
    let mut datasets = Vec::new();
    for i in 0..levels {
        let sigma_k = 0.02 * (i + 1) as f64;
        let noisy = evalsim::kspace_noisy_volume(&clean, &maps, sigma_k, sampler::slice_seed(seed, i, 0))?;
        let name = format!("noisy_level{i}.ddm2vol");
        data_io::export(&noisy, out.join(&name), None)?;
        let snr: Vec<f64> = (0..noisy.dims().l)
            .flat_map(|v| (0..noisy.dims().d).map(move |z| (v, z)))
            .map(|(v, z)| evalsim::snr(noisy.slice(v, z), &masks))
            .collect::<Result<_>>()?;
        let (mean_snr, _) = evalsim::mean_std(&snr);
        datasets.push(json!({
            "level": i,
            "sigma_k": sigma_k,
            "coils": coils,
            "noisy": name,
            "clean": "clean.ddm2vol",
            "mean_snr": mean_snr,
            "sha256": pipeline::sha256_file(out.join(&name))?,
        }));
    }
    let manifest = json!({"seed": seed, "phantom": spec, "masks": "masks.ddm2vol", "datasets": datasets});
    write(&out.join("simulate_manifest.json"), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Schedule comparison, RMSE trajectories and metric box plots for a
/// finished run directory.
pub fn report(run: &Path) -> Result<serde_json::Value> {
    let manifest = RunManifest::load(run.join(pipeline::MANIFEST_FILE))?;
    let dir = run.join("report");
    fs::create_dir_all(&dir).map_err(|e| Error::io(&dir, e))?;
    let mut files = Vec::new();

    let base = manifest.config.schedule;
    let shapes = [
        ("reverse_warmup", ScheduleParams { shape: ScheduleShape::ReverseWarmup, ..base }),
        ("warmup", ScheduleParams { shape: ScheduleShape::Warmup, ..base }),
        ("linear", ScheduleParams { shape: ScheduleShape::Warmup, linear_ratio: 1.0, ..base }),
    ];
    let mut csv = String::from("schedule,t,beta,alpha_bar\n");
    let (mut betas, mut abars) = (Vec::new(), Vec::new());
    for (name, p) in shapes {
        let s = build_schedule(p)?;
        let mut b = Vec::new();
        let mut a = Vec::new();
        for t in 1..=s.T() {
            csv.push_str(&format!("{name},{t},{:e},{:e}\n", s.beta(t), s.alpha_bar(t)));
            b.push((t as f64, s.beta(t)));
            a.push((t as f64, s.alpha_bar(t)));
        }
        betas.push(b);
        abars.push(a);
    }
    write(&dir.join("schedules.csv"), &csv)?;
    crate::plot::line_chart(&betas, dir.join("schedule_beta.png"))?;
    crate::plot::line_chart(&abars, dir.join("schedule_alpha_bar.png"))?;
    files.extend(["schedules.csv", "schedule_beta.png", "schedule_alpha_bar.png"]);

    let traces_csv = run.join("rmse_traces.csv");
    if traces_csv.exists() {
        fs::copy(&traces_csv, dir.join("rmse_traces.csv")).map_err(|e| Error::io(&traces_csv, e))?;
        let text = fs::read_to_string(&traces_csv).map_err(|e| Error::io(&traces_csv, e))?;
        let mut series: Vec<Vec<(f64, f64)>> = Vec::new();
        for line in text.lines().skip(1) {
            let f: Vec<&str> = line.split(',').collect();
            let (Ok(k), Ok(it), Ok(r)) = (f[0].parse::<usize>(), f[2].parse::<f64>(), f[3].parse::<f64>()) else {
                continue;
            };
            if series.len() <= k {
                series.resize(k + 1, Vec::new());
            }
            series[k].push((it, r));
        }
        crate::plot::line_chart(&series, dir.join("rmse_traces.png"))?;
        files.extend(["rmse_traces.csv", "rmse_traces.png"]);
    }

    let metrics_json = run.join("metrics.json");
    if metrics_json.exists() {
        let text = fs::read_to_string(&metrics_json).map_err(|e| Error::io(&metrics_json, e))?;
        let rep: evalsim::MetricsReport = serde_json::from_str(&text)?;
        let col = |f: fn(&evalsim::SliceMetrics) -> f64| rep.rows.iter().map(f).collect::<Vec<_>>();
        crate::plot::box_plot(&[col(|r| r.delta_snr), col(|r| r.delta_cnr)], dir.join("delta_scores_box.png"))?;
        files.push("delta_scores_box.png");
        if rep.rows.iter().all(|r| r.psnr_noisy.is_some()) {
            let noisy = col(|r| r.psnr_noisy.unwrap_or(f64::NAN));
            let den = col(|r| r.psnr_denoised.unwrap_or(f64::NAN));
            crate::plot::box_plot(&[noisy, den], dir.join("psnr_box.png"))?;
            files.push("psnr_box.png");
        }
        fs::copy(run.join("metrics.csv"), dir.join("metrics.csv")).map_err(|e| Error::io(run.join("metrics.csv"), e))?;
        files.push("metrics.csv");
    }

    let summary = json!({
        "run": run,
        "config_hash": manifest.config_hash,
        "state_matches": manifest.state_matches.iter().map(|m| m.t_star).collect::<Vec<_>>(),
        "outliers": manifest.outliers,
        "metrics": manifest.metrics,
        "files": files,
    });
    write(&dir.join("summary.json"), &serde_json::to_string_pretty(&summary)?)?;
    Ok(summary)
}

/// Entry point for the binary: parses arguments, runs, and maps errors to
/// a JSON object on stderr plus the exit code.
pub fn main_with_args<I, T>(args: I) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            use clap::error::ErrorKind;
            if matches!(e.kind(), ErrorKind::DisplayHelp | ErrorKind::DisplayVersion) {
                let _ = e.print();
                return 0;
            }
            eprintln!("{}", json!({"error": "Usage", "message": e.to_string(), "exit_code": 2}));
            return 2;
        }
    };
    match execute(cli) {
        Ok(()) => 0,
        Err(e) => {
            let code = e.exit_code();
            let mut obj = json!({"error": e.kind(), "message": e.to_string(), "exit_code": code});
            if let Error::StageFailed { stage, cause } = &e {
                obj["stage"] = json!(stage);
                obj["cause"] = json!(cause.kind());
            }
            eprintln!("{obj}");
            code
        }
    }
}
