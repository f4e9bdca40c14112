//! Stage I: a single slice-to-slice denoiser Φ trained with the
//! J-invariant objective (predict a slice from the same slice of other
//! volumes), and the resulting clean estimates ȳ and residuals ε̄.

use std::fmt::Write as _;
use std::path::Path;

use log::info;
use ndarray::{Array2, Array3, Array4, Axis, s};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Conditioning, DenoiserHandle, DenoiserSpec, NetworkSize, Trainer};
use crate::data_io::{self, PairOptions, PriorStrategy, RawContainer, Volume4D};
use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage1Config {
    pub n: usize,
    pub strategy: PriorStrategy,
    pub include_b0: bool,
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub seed: u64,
    pub log_every: usize,
    pub network: NetworkSize,
}

impl Default for Stage1Config {
    fn default() -> Self {
        Self {
            n: 2,
            strategy: PriorStrategy::AdjacentDirections,
            include_b0: false,
            steps: 10_000,
            lr: 1e-4,
            batch: 32,
            seed: 0,
            log_every: 100,
            network: NetworkSize::default(),
        }
    }
}

impl Stage1Config {
    pub fn pair_options(&self) -> PairOptions {
        PairOptions {
            n: self.n,
            strategy: self.strategy,
            include_b0: self.include_b0,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LogEntry {
    pub step: usize,
    /// Mean loss over the steps since the previous entry.
    pub loss: f64,
    pub t_mean: Option<f64>,
    pub lr: f64,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct TrainLog {
    pub entries: Vec<LogEntry>,
    /// Loss of every step.
    pub losses: Vec<f64>,
}

impl TrainLog {
    pub(crate) fn record(&mut self, step: usize, loss: f64, t: Option<f64>, lr: f64, every: usize) {
        self.losses.push(loss);
        if every > 0 && (step + 1) % every == 0 {
            let window = &self.losses[self.losses.len() - every..];
            self.entries.push(LogEntry {
                step: step + 1,
                loss: window.iter().sum::<f64>() / every as f64,
                t_mean: t,
                lr,
            });
        }
    }

    /// Mean loss of the first and last `frac` of steps.
    pub fn window_means(&self, frac: f64) -> (f64, f64) {
        let k = ((self.losses.len() as f64 * frac).ceil() as usize).max(1);
        let mean = |s: &[f64]| s.iter().sum::<f64>() / s.len() as f64;
        (mean(&self.losses[..k]), mean(&self.losses[self.losses.len() - k..]))
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("step,loss,t_mean,lr\n");
        for e in &self.entries {
            let t = e.t_mean.map(|t| format!("{t}")).unwrap_or_default();
            let _ = writeln!(s, "{},{:e},{},{:e}", e.step, e.loss, t, e.lr);
        }
        s
    }
}

/// `(b, n, h, w)` prior stacks and `(b, h, w)` targets for the given positions.
pub(crate) fn gather_pairs(
    v: &Volume4D,
    positions: &[(usize, usize)],
    opts: &PairOptions,
) -> Result<(Array4<f32>, Array3<f32>)> {
    let dims = v.dims();
    let mut inputs = Array4::zeros((positions.len(), opts.n, dims.h, dims.w));
    let mut targets = Array3::zeros((positions.len(), dims.h, dims.w));
    for (i, &(vol, z)) in positions.iter().enumerate() {
        let priors = data_io::prior_volumes(dims, &v.b0_volumes, vol, z, opts)?;
        for (c, p) in priors.iter().enumerate() {
            inputs.slice_mut(s![i, c, .., ..]).assign(&v.slice(*p, z));
        }
        targets.index_axis_mut(Axis(0), i).assign(&v.slice(vol, z));
    }
    Ok((inputs, targets))
}

pub fn stage1_spec(cfg: &Stage1Config) -> DenoiserSpec {
    DenoiserSpec::new(cfg.n, Conditioning::None).with_size(cfg.network.depth, cfg.network.base_width)
}

/// Trains one Φ for the whole sequence: MSE between Φ({x′}) and x over
/// uniformly drawn `(volume, slice)` positions.
pub fn train_stage1(v: &Volume4D, cfg: &Stage1Config) -> Result<(DenoiserHandle, TrainLog)> {
    if !v.is_normalized() {
        return Err(Error::NotNormalized);
    }
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::InvalidParams("steps and batch must be positive".into()));
    }
    let dims = v.dims();
    let opts = cfg.pair_options();
    for vol in 0..dims.l {
        data_io::prior_volumes(dims, &v.b0_volumes, vol, 0, &opts)?;
    }
    let handle = DenoiserHandle::new(stage1_spec(cfg), cfg.seed)?;
    handle.check_input(cfg.n, dims.h, dims.w)?;
    let mut trainer = Trainer::new(handle, cfg.lr);
    let mut rng = ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5157_4147_4531);
    let mut log = TrainLog::default();
    for step in 0..cfg.steps {
        let positions: Vec<(usize, usize)> = (0..cfg.batch)
            .map(|_| (rng.random_range(0..dims.l), rng.random_range(0..dims.d)))
            .collect();
        let (inputs, targets) = gather_pairs(v, &positions, &opts)?;
        let loss = trainer.step(inputs.view(), None, targets.view())?;
        log.record(step, loss, None, cfg.lr, cfg.log_every);
        if cfg.log_every > 0 && (step + 1) % (cfg.log_every * 10) == 0 {
            info!("stage1 step {} loss {:.5}", step + 1, loss);
        }
    }
    Ok((trainer.finish(), log))
}

/// Denoised estimates, residuals and per-slice residual statistics.
/// Arrays are `(l, d, h, w)` in f64 so that `x = ȳ + ε̄` holds to rounding
/// of the f32 input.
#[derive(Debug, Clone, PartialEq)]
pub struct Stage1Output {
    pub y_bar: Array4<f64>,
    pub residual: Array4<f64>,
    /// Residual mean per `(volume, slice)`.
    pub slice_mean: Array2<f64>,
    /// Residual sample standard deviation per `(volume, slice)`.
    pub slice_std: Array2<f64>,
    /// Means removed by calibration, per `(volume, slice)`.
    pub calibration: Option<Array2<f64>>,
    pub pairs: PairOptions,
}

impl Stage1Output {
    /// Builds the output from estimates and the original sequence, computing
    /// residual statistics.
    pub fn from_estimates(x: &Array4<f32>, y_bar: Array4<f64>, pairs: PairOptions) -> Self {
        let residual = ndarray::Zip::from(x)
            .and(&y_bar)
            .map_collect(|&x, &y| x as f64 - y);
        let (slice_mean, slice_std) = slice_stats(&residual);
        Self {
            y_bar,
            residual,
            slice_mean,
            slice_std,
            calibration: None,
            pairs,
        }
    }

    pub fn is_calibrated(&self) -> bool {
        self.calibration.is_some()
    }

    /// `ȳ + ε̄`.
    pub fn x(&self) -> Array4<f64> {
        &self.y_bar + &self.residual
    }

    pub fn y_bar_slice(&self, vol: usize, z: usize) -> Array2<f32> {
        self.y_bar.slice(s![vol, z, .., ..]).mapv(|v| v as f32)
    }

    pub fn residual_slice(&self, vol: usize, z: usize) -> Array2<f32> {
        self.residual.slice(s![vol, z, .., ..]).mapv(|v| v as f32)
    }

    /// Persists as a raw container tagged `stage: "1"`.
    pub fn save(&self, template: &Volume4D, path: impl AsRef<Path>) -> Result<()> {
        let y = self.y_bar.mapv(|v| v as f32);
        let r = self.residual.mapv(|v| v as f32);
        let mut c = RawContainer::from_arrays(template, Some("1"), &[("y_bar", &y), ("residual", &r)])?;
        c.header.extra = Some(serde_json::json!({
            "pairs": self.pairs,
            "calibration": self.calibration.as_ref().map(|m| m.iter().copied().collect::<Vec<_>>()),
        }));
        data_io::write_container(path, &c)
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let c = data_io::read_container(path)?;
        if c.header.stage.as_deref() != Some("1") {
            return Err(Error::CorruptHeader("container is not a stage 1 output".into()));
        }
        let y = c.array("y_bar")?.mapv(|v| v as f64);
        let r = c.array("residual")?.mapv(|v| v as f64);
        let extra = c
            .header
            .extra
            .clone()
            .ok_or_else(|| Error::CorruptHeader("stage 1 container lacks metadata".into()))?;
        let pairs: PairOptions = serde_json::from_value(extra["pairs"].clone())?;
        let calib: Option<Vec<f64>> = serde_json::from_value(extra["calibration"].clone())?;
        let (slice_mean, slice_std) = slice_stats(&r);
        let (l, d, _, _) = y.dim();
        let calibration = calib
            .map(|v| Array2::from_shape_vec((l, d), v))
            .transpose()
            .map_err(|e| Error::CorruptHeader(e.to_string()))?;
        Ok(Self {
            y_bar: y,
            residual: r,
            slice_mean,
            slice_std,
            calibration,
            pairs,
        })
    }
}

pub(crate) fn slice_stats(residual: &Array4<f64>) -> (Array2<f64>, Array2<f64>) {
    let (l, d, _, _) = residual.dim();
    let mut mean = Array2::zeros((l, d));
    let mut std = Array2::zeros((l, d));
    for vol in 0..l {
        for z in 0..d {
            let sl = residual.slice(s![vol, z, .., ..]);
            let n = sl.len() as f64;
            let m = sl.sum() / n;
            let var = sl.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (n - 1.0).max(1.0);
            mean[[vol, z]] = m;
            std[[vol, z]] = var.sqrt();
        }
    }
    (mean, std)
}

/// Denoises every slice of every volume from other-volume priors only.
pub fn infer_stage1(h: &DenoiserHandle, v: &Volume4D, pairs: PairOptions) -> Result<Stage1Output> {
    if h.spec.in_channels != pairs.n || h.spec.conditioning != Conditioning::None {
        return Err(Error::SpecMismatch(format!(
            "stage 1 needs an unconditioned denoiser with {} inputs, handle has {:?}",
            pairs.n, h.spec
        )));
    }
    if !v.is_normalized() {
        return Err(Error::NotNormalized);
    }
    let dims = v.dims();
    let mut y_bar = Array4::<f64>::zeros((dims.l, dims.d, dims.h, dims.w));
    for vol in 0..dims.l {
        let positions: Vec<(usize, usize)> = (0..dims.d).map(|z| (vol, z)).collect();
        let (inputs, _) = gather_pairs(v, &positions, &pairs)?;
        let out = h.apply_batch(inputs.view(), None)?;
        y_bar
            .index_axis_mut(Axis(0), vol)
            .assign(&out.mapv(|v| v as f64));
    }
    Ok(Stage1Output::from_estimates(v.data(), y_bar, pairs))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::data_io::{NormalizationMode, normalize};

    fn tiny_volume() -> Volume4D {
        let data = Array4::from_shape_fn((3, 2, 8, 8), |(v, z, y, x)| {
            ((x as f32 * 0.7 + y as f32 * 0.3 + z as f32).sin() + 0.1 * v as f32) * 10.0
        });
        normalize(&Volume4D::new(data, [1.0; 3], "tiny").unwrap(), NormalizationMode::GlobalMinmax).unwrap()
    }

    fn tiny_cfg() -> Stage1Config {
        Stage1Config {
            steps: 5,
            batch: 2,
            network: NetworkSize { depth: 2, base_width: 4 },
            ..Default::default()
        }
    }

    #[test]
    fn rejects_n_equal_to_l() {
        let v = tiny_volume();
        let cfg = Stage1Config { n: 3, ..tiny_cfg() };
        assert!(matches!(train_stage1(&v, &cfg), Err(Error::TooFewVolumes { .. })));
    }

    #[test]
    fn default_hyperparameters() {
        let c = Stage1Config::default();
        assert_eq!((c.n, c.steps, c.lr, c.batch), (2, 10_000, 1e-4, 32));
    }

    #[test]
    fn reconstruction_identity_and_spec_check() {
        let v = tiny_volume();
        let cfg = tiny_cfg();
        let (h, log) = train_stage1(&v, &cfg).unwrap();
        assert_eq!(log.losses.len(), 5);
        let out = infer_stage1(&h, &v, cfg.pair_options()).unwrap();
        let x = v.data().mapv(|x| x as f64);
        let err = (&out.x() - &x).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(err < 1e-12, "{err}");
        assert!(infer_stage1(&h, &v, PairOptions::new(1, PriorStrategy::AdjacentDirections)).is_err());
    }

    #[test]
    fn save_load_round_trip() {
        let v = tiny_volume();
        let cfg = tiny_cfg();
        let (h, _) = train_stage1(&v, &cfg).unwrap();
        let out = infer_stage1(&h, &v, cfg.pair_options()).unwrap();
        let dir = tempfile::tempdir().unwrap();
        let p = dir.path().join("s1.ddm2vol");
        out.save(&v, &p).unwrap();
        let back = Stage1Output::load(&p).unwrap();
        assert_eq!(back.pairs, out.pairs);
        assert!(!back.is_calibrated());
        let diff = (&back.y_bar - &out.y_bar).iter().fold(0.0f64, |m, d| m.max(d.abs()));
        assert!(diff < 1e-6);
    }
}
