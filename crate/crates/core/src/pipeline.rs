//! End-to-end orchestration: configuration, the staged run with resume,
//! and the run manifest.

use std::fs;
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use log::info;
use ndarray::Array4;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use sha2::{Digest, Sha256};

use crate::backbone::{self, DenoiserHandle};
use crate::data_io::{self, IngestFormat, NormalizationMode, Volume4D};
use crate::error::{Error, Result};
use crate::evalsim::{self, MetricsReport, PhantomSpec, RoiMasks};
use crate::sampler::{self, MeanMode, SamplerOptions, SamplerTrace, ThresholdPolicy, Verdict};
use crate::schedule::{NoiseSchedule, ScheduleParams, build_schedule};
use crate::stage1::{self, Stage1Config, Stage1Output};
use crate::stage2::{self, FitScope, FitSet, MatchMetric, MatchOptions, StateMatch};
use crate::stage3::{self, Stage3Config};

pub const SEED_ENV: &str = "DDM2_SEED";
pub const MANIFEST_FILE: &str = "manifest.json";
pub const LOCK_FILE: &str = ".ddm2.lock";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum InputConfig {
    File {
        path: PathBuf,
        format: IngestFormat,
        /// Optional noise-free reference for PSNR/SSIM.
        #[serde(default)]
        clean: Option<PathBuf>,
    },
    Phantom {
        #[serde(flatten)]
        spec: PhantomSpec,
    },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage2Config {
    pub scope: FitScope,
    pub p: f64,
    pub metric: MatchMetric,
}

impl Default for Stage2Config {
    fn default() -> Self {
        Self {
            scope: FitScope::PerVolume,
            p: 1.0,
            metric: MatchMetric::SqrtBeta,
        }
    }
}

impl Stage2Config {
    pub fn match_options(&self) -> MatchOptions {
        MatchOptions {
            p: self.p,
            metric: self.metric,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerConfig {
    pub mean_mode: MeanMode,
    /// Slices denoised together.
    pub max_batch: usize,
    /// Start every chain at this state instead of the matched one (ablation).
    pub force_t: Option<usize>,
    pub outlier_policy: ThresholdPolicy,
}

impl Default for SamplerConfig {
    fn default() -> Self {
        Self {
            mean_mode: MeanMode::Posterior,
            max_batch: 8,
            force_t: None,
            outlier_policy: ThresholdPolicy::default(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default)]
pub struct EvalConfig {
    /// Raw container with `signal` and `background` arrays.
    pub masks: Option<PathBuf>,
    /// Intensity range for PSNR/SSIM; the clean image's range when absent.
    pub data_range: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PipelineConfig {
    #[serde(default)]
    pub seed: u64,
    pub input: InputConfig,
    #[serde(default = "default_normalization")]
    pub normalization: NormalizationMode,
    pub schedule: ScheduleParams,
    #[serde(default)]
    pub stage1: Stage1Config,
    #[serde(default)]
    pub stage2: Stage2Config,
    #[serde(default)]
    pub stage3: Stage3Config,
    #[serde(default)]
    pub sampler: SamplerConfig,
    #[serde(default)]
    pub eval: EvalConfig,
}

fn default_normalization() -> NormalizationMode {
    NormalizationMode::GlobalMinmax
}

fn invalid(path: &str, message: impl Into<String>) -> Error {
    Error::ConfigInvalid {
        path: path.to_string(),
        message: message.into(),
    }
}

const REQUIRED: [&str; 3] = ["input", "schedule", "schedule.T"];

impl PipelineConfig {
    pub fn from_value(v: Value) -> Result<Self> {
        for path in REQUIRED {
            let mut cur = &v;
            for key in path.split('.') {
                cur = cur.get(key).ok_or_else(|| invalid(path, "required key is missing"))?;
            }
        }
        let cfg: Self = serde_json::from_value(v).map_err(|e| invalid("$", e.to_string()))?;
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn from_json_str(s: &str) -> Result<Self> {
        let v: Value = serde_json::from_str(s).map_err(|e| invalid("$", e.to_string()))?;
        Self::from_value(v)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Self::from_json_str(&text)
    }

    pub fn validate(&self) -> Result<()> {
        let s = &self.schedule;
        if s.steps == 0 {
            return Err(invalid("schedule.T", "must be positive"));
        }
        if !(s.beta_start > 0.0 && s.beta_start <= s.beta_end && s.beta_end < 1.0) {
            return Err(invalid("schedule.beta_start", "need 0 < beta_start <= beta_end < 1"));
        }
        if !(0.0..=1.0).contains(&s.linear_ratio) {
            return Err(invalid("schedule.linear_ratio", "must lie in [0, 1]"));
        }
        let checks: [(&str, bool); 10] = [
            ("stage1.n", self.stage1.n >= 1),
            ("stage1.steps", self.stage1.steps >= 1),
            ("stage1.batch", self.stage1.batch >= 1),
            ("stage1.lr", self.stage1.lr > 0.0),
            ("stage2.p", self.stage2.p >= 1.0),
            ("stage3.steps", self.stage3.steps >= 1),
            ("stage3.batch", self.stage3.batch >= 1),
            ("stage3.lr", self.stage3.lr > 0.0),
            ("sampler.max_batch", self.sampler.max_batch >= 1),
            (
                "sampler.force_t",
                self.sampler.force_t.is_none_or(|t| (1..=s.steps).contains(&t)),
            ),
        ];
        for (path, ok) in checks {
            if !ok {
                return Err(invalid(path, "value out of range"));
            }
        }
        for (path, net) in [("stage1.network", self.stage1.network), ("stage3.network", self.stage3.network)] {
            if net.depth == 0 || net.base_width == 0 {
                return Err(invalid(path, "depth and base_width must be positive"));
            }
        }
        Ok(())
    }

    /// Applies the `DDM2_SEED` override and derives per-stage seeds from
    /// the run seed.
    pub fn effective(&self) -> Result<Self> {
        let mut c = self.clone();
        if let Ok(s) = std::env::var(SEED_ENV) {
            c.seed = s
                .trim()
                .parse()
                .map_err(|_| invalid("seed", format!("{SEED_ENV}={s} is not an unsigned integer")))?;
        }
        c.stage1.seed = sampler::slice_seed(c.seed, 1, 0);
        c.stage3.seed = sampler::slice_seed(c.seed, 3, 0);
        Ok(c)
    }
}

fn sha256_bytes(b: &[u8]) -> String {
    hex::encode(Sha256::digest(b))
}

pub fn sha256_file(path: impl AsRef<Path>) -> Result<String> {
    let path = path.as_ref();
    Ok(sha256_bytes(&fs::read(path).map_err(|e| Error::io(path, e))?))
}

fn canonical_hash<T: Serialize>(v: &T) -> String {
    sha256_bytes(&serde_json::to_vec(v).expect("config serializes"))
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageRecord {
    pub name: String,
    /// Hash of the stage's configuration and upstream fingerprints.
    pub key: String,
    /// Artifact file name and SHA-256.
    pub artifacts: Vec<(String, String)>,
}

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
pub struct Session {
    pub started_unix: u64,
    pub finished_unix: u64,
    /// Stages restored from a previous run.
    pub resumed: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct RunManifest {
    pub tool_version: String,
    pub config: PipelineConfig,
    pub config_hash: String,
    pub data_hash: String,
    pub phi_hash: Option<String>,
    pub state_matches: Vec<StateMatch>,
    pub f_hash: Option<String>,
    pub denoised_hash: Option<String>,
    pub stages: Vec<StageRecord>,
    pub outliers: usize,
    pub metrics: Option<Vec<evalsim::MetricSummary>>,
    /// Varies between otherwise identical runs.
    pub session: Session,
}

impl RunManifest {
    pub fn stage(&self, name: &str) -> Option<&StageRecord> {
        self.stages.iter().find(|s| s.name == name)
    }

    /// Number of stages carrying a fingerprint (data, Φ, match, F).
    pub fn fingerprint_count(&self) -> usize {
        1 + self.phi_hash.is_some() as usize + (!self.state_matches.is_empty()) as usize + self.f_hash.is_some() as usize
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let text = fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        Ok(serde_json::from_str(&text)?)
    }
}

/// Exclusive ownership of a work directory for the lifetime of the guard.
pub struct WorkdirLock(PathBuf);

impl WorkdirLock {
    pub fn acquire(workdir: &Path) -> Result<Self> {
        let path = workdir.join(LOCK_FILE);
        match fs::OpenOptions::new().write(true).create_new(true).open(&path) {
            Ok(_) => Ok(Self(path)),
            Err(e) if e.kind() == std::io::ErrorKind::AlreadyExists => Err(Error::Locked(path)),
            Err(e) => Err(Error::io(&path, e)),
        }
    }
}

impl Drop for WorkdirLock {
    fn drop(&mut self) {
        let _ = fs::remove_file(&self.0);
    }
}

fn now_unix() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_secs())
}

fn stage_err(stage: &str) -> impl FnOnce(Error) -> Error + '_ {
    move |cause| match cause {
        e @ Error::StageFailed { .. } => e,
        cause => Error::StageFailed {
            stage: stage.to_string(),
            cause: Box::new(cause),
        },
    }
}

struct Ingested {
    x: Volume4D,
    clean: Option<Volume4D>,
    noisy_raw: Volume4D,
    masks: Option<RoiMasks>,
}

fn ingest_input(cfg: &PipelineConfig, workdir: &Path) -> Result<Ingested> {
    let (noisy_raw, clean, masks) = match &cfg.input {
        InputConfig::Phantom { spec } => {
            let (clean, noisy) = evalsim::make_phantom(spec)?;
            (noisy, Some(clean), Some(evalsim::phantom_masks(spec)?))
        }
        InputConfig::File { path, format, clean } => {
            let v = data_io::ingest(workdir.join(path), *format)?;
            let c = clean
                .as_ref()
                .map(|p| data_io::ingest(workdir.join(p), *format))
                .transpose()?;
            (v, c, None)
        }
    };
    let masks = match &cfg.eval.masks {
        Some(p) => Some(evalsim::read_masks(workdir.join(p))?),
        None => masks,
    };
    let x = data_io::normalize(&noisy_raw, cfg.normalization)?;
    Ok(Ingested {
        x,
        clean,
        noisy_raw,
        masks,
    })
}

fn previous_manifest(workdir: &Path) -> Option<RunManifest> {
    RunManifest::load(workdir.join(MANIFEST_FILE)).ok()
}

/// Whether a stage of the previous run can be reused as is.
fn reusable(prev: Option<&RunManifest>, name: &str, key: &str, workdir: &Path) -> bool {
    let Some(rec) = prev.and_then(|m| m.stage(name)) else {
        return false;
    };
    rec.key == key
        && rec
            .artifacts
            .iter()
            .all(|(file, hash)| sha256_file(workdir.join(file)).is_ok_and(|h| &h == hash))
}

fn record(name: &str, key: String, files: &[&str], workdir: &Path) -> Result<StageRecord> {
    let artifacts = files
        .iter()
        .map(|f| Ok((f.to_string(), sha256_file(workdir.join(f))?)))
        .collect::<Result<_>>()?;
    Ok(StageRecord {
        name: name.to_string(),
        key,
        artifacts,
    })
}

fn write_text(path: &Path, text: &str) -> Result<()> {
    fs::write(path, text).map_err(|e| Error::io(path, e))
}

/// Loads the config at `config_path` and runs it in `workdir`.
pub fn run_pipeline(config_path: impl AsRef<Path>, workdir: impl AsRef<Path>) -> Result<RunManifest> {
    let cfg = PipelineConfig::load(config_path)?;
    run_pipeline_with(&cfg, workdir)
}

/// ingest → normalize → Stage I → calibrate/fit/match → Stage III →
/// denoise every slice → evaluate. Stages whose key and artifacts match the
/// previous manifest in `workdir` are restored instead of recomputed;
/// inference and evaluation always run.
pub fn run_pipeline_with(cfg: &PipelineConfig, workdir: impl AsRef<Path>) -> Result<RunManifest> {
    let workdir = workdir.as_ref();
    fs::create_dir_all(workdir).map_err(|e| Error::io(workdir, e))?;
    let _lock = WorkdirLock::acquire(workdir)?;
    let cfg = cfg.effective()?;
    cfg.validate()?;
    let started = now_unix();
    let prev = previous_manifest(workdir);
    let mut session = Session {
        started_unix: started,
        ..Default::default()
    };
    let mut stages = Vec::new();

    // Ingest and normalisation are cheap and always rerun.
    let ing = ingest_input(&cfg, workdir).map_err(stage_err("ingest"))?;
    data_io::export(&ing.x, workdir.join("input.ddm2vol"), Some("0")).map_err(stage_err("ingest"))?;
    let data_hash = sha256_file(workdir.join("input.ddm2vol"))?;
    stages.push(record("ingest", data_hash.clone(), &["input.ddm2vol"], workdir)?);
    let sched = build_schedule(cfg.schedule).map_err(|e| invalid("schedule", e.to_string()))?;

    // Stage I.
    let key1 = canonical_hash(&(&data_hash, &cfg.stage1));
    let (phi, s1) = if reusable(prev.as_ref(), "stage1", &key1, workdir) {
        session.resumed.push("stage1".into());
        let phi = backbone::load_expecting(workdir.join("stage1.ckpt"), &stage1::stage1_spec(&cfg.stage1))
            .map_err(stage_err("stage1"))?;
        let s1 = Stage1Output::load(workdir.join("stage1_output.ddm2vol")).map_err(stage_err("stage1"))?;
        (phi, s1)
    } else {
        info!("stage 1: training {} steps", cfg.stage1.steps);
        let (phi, log) = stage1::train_stage1(&ing.x, &cfg.stage1).map_err(stage_err("stage1"))?;
        let s1 = stage1::infer_stage1(&phi, &ing.x, cfg.stage1.pair_options()).map_err(stage_err("stage1"))?;
        backbone::save(&phi, workdir.join("stage1.ckpt"))?;
        s1.save(&ing.x, workdir.join("stage1_output.ddm2vol"))?;
        write_text(&workdir.join("stage1_log.csv"), &log.to_csv())?;
        (phi, s1)
    };
    stages.push(record("stage1", key1, &["stage1.ckpt", "stage1_output.ddm2vol"], workdir)?);

    // Stage II.
    let key2 = canonical_hash(&(&phi.fingerprint, &cfg.stage2, &sched.fingerprint()));
    let (s1c, fits, matches) = if reusable(prev.as_ref(), "stage2", &key2, workdir) {
        session.resumed.push("stage2".into());
        let s1c = Stage1Output::load(workdir.join("stage2_calibrated.ddm2vol")).map_err(stage_err("stage2"))?;
        let text = fs::read_to_string(workdir.join("stage2.json")).map_err(|e| Error::io(workdir.join("stage2.json"), e))?;
        let (fits, matches): (FitSet, Vec<StateMatch>) = serde_json::from_str(&text)?;
        (s1c, fits, matches)
    } else {
        let run = || -> Result<_> {
            let s1c = stage2::calibrate(&s1)?;
            let fits = stage2::fit_noise_model(&s1c, cfg.stage2.scope, None)?;
            let matches = stage2::match_fits(&fits, &sched, cfg.stage2.match_options())?;
            Ok((s1c, fits, matches))
        };
        let (s1c, fits, matches) = run().map_err(stage_err("stage2"))?;
        s1c.save(&ing.x, workdir.join("stage2_calibrated.ddm2vol"))?;
        write_text(&workdir.join("stage2.json"), &serde_json::to_string_pretty(&(&fits, &matches))?)?;
        (s1c, fits, matches)
    };
    stages.push(record("stage2", key2, &["stage2_calibrated.ddm2vol", "stage2.json"], workdir)?);

    // Stage III.
    let key3 = canonical_hash(&(&data_hash, &stages[2].artifacts, &cfg.stage3, &sched.fingerprint()));
    let f = if reusable(prev.as_ref(), "stage3", &key3, workdir) {
        session.resumed.push("stage3".into());
        backbone::load_expecting(workdir.join("stage3.ckpt"), &cfg.stage3.spec(s1c.pairs.n)).map_err(stage_err("stage3"))?
    } else {
        info!("stage 3: training {} steps", cfg.stage3.steps);
        let (f, log) =
            stage3::train_stage3(&ing.x, &s1c, &sched, &fits, &cfg.stage3, None).map_err(stage_err("stage3"))?;
        backbone::save(&f, workdir.join("stage3.ckpt"))?;
        write_text(&workdir.join("stage3_log.csv"), &log.to_csv())?;
        f
    };
    stages.push(record("stage3", key3, &["stage3.ckpt"], workdir)?);

    // Inference.
    let (denoised, traces) = run_inference(&cfg, &ing.x, &f, &sched, &s1c, &fits, &matches)
        .map_err(stage_err("inference"))?;
    let denoised_raw = data_io::denormalize(&ing.x.with_data(denoised)?)?;
    data_io::export(&denoised_raw, workdir.join("denoised.ddm2vol"), Some("3"))?;
    let denoised_hash = sha256_file(workdir.join("denoised.ddm2vol"))?;
    let only: Vec<SamplerTrace> = traces.iter().map(|(_, t)| t.clone()).collect();
    sampler::write_rmse_report(&only, workdir.join("rmse_traces.csv"), workdir.join("rmse_traces.png"))?;
    let verdicts = sampler::detect_outliers(&only, cfg.sampler.outlier_policy).map_err(stage_err("inference"))?;
    write_outliers(&workdir.join("outliers.csv"), &traces, &verdicts)?;
    let outliers = verdicts.iter().filter(|v| **v == Verdict::Outlier).count();

    // Evaluation.
    let metrics = match &ing.masks {
        Some(masks) => {
            let range = cfg.eval.data_range.or_else(|| {
                ing.clean.as_ref().map(|c| {
                    let (lo, hi) = c.data().iter().fold((f32::MAX, f32::MIN), |(a, b), &v| (a.min(v), b.max(v)));
                    (hi - lo).max(f32::EPSILON) as f64
                })
            });
            let report = evalsim::evaluate(
                denoised_raw.data(),
                ing.noisy_raw.data(),
                ing.clean.as_ref().map(|c| c.data()),
                masks,
                range.unwrap_or(1.0),
            )
            .map_err(stage_err("eval"))?;
            report.write(workdir, "metrics")?;
            Some(report)
        }
        None => None,
    };

    session.finished_unix = now_unix();
    let manifest = RunManifest {
        tool_version: env!("CARGO_PKG_VERSION").to_string(),
        config_hash: canonical_hash(&cfg),
        config: cfg,
        data_hash,
        phi_hash: Some(phi.fingerprint.clone()),
        state_matches: matches,
        f_hash: Some(f.fingerprint.clone()),
        denoised_hash: Some(denoised_hash),
        stages,
        outliers,
        metrics: metrics.map(|m: MetricsReport| m.summary),
        session,
    };
    write_text(&workdir.join(MANIFEST_FILE), &serde_json::to_string_pretty(&manifest)?)?;
    Ok(manifest)
}

/// Denoises the whole sequence; returns normalised slices and traces.
pub fn run_inference(
    cfg: &PipelineConfig,
    x: &Volume4D,
    f: &DenoiserHandle,
    sched: &NoiseSchedule,
    s1: &Stage1Output,
    fits: &FitSet,
    matches: &[StateMatch],
) -> Result<(Array4<f32>, Vec<((usize, usize), SamplerTrace)>)> {
    let opts = SamplerOptions {
        mean_mode: cfg.sampler.mean_mode,
        ..Default::default()
    };
    let t_of = |vol: usize, z: usize| cfg.sampler.force_t.unwrap_or(matches[fits.index_of(vol, z)].t_star);
    let seed = sampler::slice_seed(cfg.seed, 4, 0);
    sampler::denoise_sequence(x, f, sched, &s1.pairs, &t_of, seed, cfg.sampler.max_batch, &opts)
}

fn write_outliers(path: &Path, traces: &[((usize, usize), SamplerTrace)], verdicts: &[Verdict]) -> Result<()> {
    let mut s = String::from("volume,slice,t_start,final_rmse,verdict\n");
    for (((v, z), t), verdict) in traces.iter().zip(verdicts) {
        let tag = match verdict {
            Verdict::Ok => "ok",
            Verdict::Outlier => "outlier",
        };
        s.push_str(&format!("{v},{z},{},{:.8},{tag}\n", t.t_start, t.final_rmse));
    }
    write_text(path, &s)
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn missing_schedule_names_the_path() {
        let err = PipelineConfig::from_json_str(r#"{"input": {"kind": "file", "path": "a", "format": "nifti1"}}"#)
            .unwrap_err();
        match err {
            Error::ConfigInvalid { path, .. } => assert_eq!(path, "schedule"),
            other => panic!("{other:?}"),
        }
        let err = PipelineConfig::from_json_str(
            r#"{"input": {"kind": "file", "path": "a", "format": "nifti1"}, "schedule": {}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid { ref path, .. } if path == "schedule.T"));
        assert_eq!(err.exit_code(), 2);
    }

    #[test]
    fn minimal_config_takes_defaults() {
        let cfg = PipelineConfig::from_json_str(
            r#"{"input": {"kind": "file", "path": "a.nii", "format": "nifti1"}, "schedule": {"T": 1000}}"#,
        )
        .unwrap();
        assert_eq!(cfg.schedule, ScheduleParams::default());
        assert_eq!(cfg.stage1.steps, 10_000);
        assert_eq!(cfg.stage3.steps, 100_000);
        assert_eq!(cfg.stage2.scope, FitScope::PerVolume);
    }

    #[test]
    fn out_of_range_values_name_their_path() {
        let err = PipelineConfig::from_json_str(
            r#"{"input": {"kind": "file", "path": "a", "format": "nifti1"}, "schedule": {"T": 10}, "stage1": {"n": 0}}"#,
        )
        .unwrap_err();
        assert!(matches!(err, Error::ConfigInvalid { ref path, .. } if path == "stage1.n"));
    }

    #[test]
    fn lock_is_exclusive() {
        let dir = tempfile::tempdir().unwrap();
        let a = WorkdirLock::acquire(dir.path()).unwrap();
        assert!(matches!(WorkdirLock::acquire(dir.path()), Err(Error::Locked(_))));
        drop(a);
        assert!(WorkdirLock::acquire(dir.path()).is_ok());
    }
}
