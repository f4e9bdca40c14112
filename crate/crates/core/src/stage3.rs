//! Stage III: training the conditional diffusion denoiser F on Stage I
//! estimates corrupted with their own spatially shuffled residuals, with
//! the original noisy slice as the regression target.

use log::info;
use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, s};
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Conditioning, DenoiserHandle, DenoiserSpec, NetworkSize, Trainer};
use crate::data_io::{self, Volume4D};
use crate::error::{Error, Result};
use crate::schedule::{ForwardSample, NoiseSchedule, axpby};
use crate::stage1::Stage1Output;
use crate::stage2::FitSet;

pub use crate::stage1::{LogEntry, TrainLog};

/// Uniformly random spatial permutation of the pixels of `residual`.
pub fn noise_shuffle<T: Copy>(residual: ArrayView2<T>, seed: u64) -> Array2<T> {
    let mut values: Vec<T> = residual.iter().copied().collect();
    values.shuffle(&mut ChaCha8Rng::seed_from_u64(seed));
    Array2::from_shape_vec(residual.dim(), values).expect("same element count")
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ShuffleMode {
    /// `√ᾱ_t·ȳ + shuffle(ε̄)`.
    Literal,
    /// `√ᾱ_t·ȳ + √(1−ᾱ_t)·shuffle(ε̄)/σ`.
    #[default]
    Scaled,
}

/// Corrupts a Stage I estimate to state `t` with its own shuffled residual.
/// With `shuffle = false` the residual is injected in place.
pub fn corrupt_with(
    sched: &NoiseSchedule,
    y_bar: ArrayView2<f32>,
    residual: ArrayView2<f32>,
    t: usize,
    mode: ShuffleMode,
    sigma: f64,
    seed: u64,
    shuffle: bool,
) -> Result<ForwardSample> {
    sched.check_state(t)?;
    if y_bar.dim() != residual.dim() {
        return Err(Error::shape(format!("{:?}", y_bar.dim()), format!("{:?}", residual.dim())));
    }
    let noise = if shuffle {
        noise_shuffle(residual, seed)
    } else {
        residual.to_owned()
    };
    let scale = match mode {
        ShuffleMode::Literal => 1.0,
        ShuffleMode::Scaled if sigma > 0.0 => sched.lambda2(t) / sigma,
        ShuffleMode::Scaled if noise.iter().all(|&e| e == 0.0) => 0.0,
        ShuffleMode::Scaled => return Err(Error::ZeroSigma),
    };
    let noise_used = noise.mapv(|e| (scale * e as f64) as f32);
    let state = axpby(sched.lambda1(t), y_bar, scale, noise.view());
    Ok(ForwardSample { state, t, noise_used })
}

pub fn corrupt_for_training(
    sched: &NoiseSchedule,
    y_bar: ArrayView2<f32>,
    residual: ArrayView2<f32>,
    t: usize,
    mode: ShuffleMode,
    sigma: f64,
    seed: u64,
) -> Result<ForwardSample> {
    corrupt_with(sched, y_bar, residual, t, mode, sigma, seed, true)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TrainTarget {
    /// The original noisy slice.
    #[default]
    X,
    /// The Stage I estimate (ablation only).
    YBar,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Ablation {
    pub no_shuffle: bool,
    pub target: TrainTarget,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct Stage3Config {
    pub steps: usize,
    pub lr: f64,
    pub batch: usize,
    pub shuffle_mode: ShuffleMode,
    pub seed: u64,
    pub log_every: usize,
    pub network: NetworkSize,
    /// Feed the Stage I prior slices to F as extra input channels. On small
    /// datasets the priors identify each slice and F learns to reproduce the
    /// noisy target from them, so this is off by default.
    pub condition_on_priors: bool,
    pub ablation: Stage3Ablation,
}

impl Default for Stage3Config {
    fn default() -> Self {
        Self {
            steps: 100_000,
            lr: 1e-4,
            batch: 32,
            shuffle_mode: ShuffleMode::Scaled,
            seed: 0,
            log_every: 100,
            network: NetworkSize::default(),
            condition_on_priors: false,
            ablation: Stage3Ablation::default(),
        }
    }
}

impl Stage3Config {
    pub fn spec(&self, n_priors: usize) -> DenoiserSpec {
        let extra = if self.condition_on_priors { n_priors } else { 0 };
        DenoiserSpec::new(1 + extra, Conditioning::NoiseLevelScalar)
            .with_size(self.network.depth, self.network.base_width)
    }
}

/// One assembled training batch.
#[derive(Debug, Clone)]
pub struct Stage3Batch {
    pub positions: Vec<(usize, usize)>,
    pub t: Vec<usize>,
    /// ᾱ_t per item.
    pub levels: Vec<f64>,
    /// `(b, c, h, w)`: corrupted state then prior slices.
    pub inputs: Array4<f32>,
    /// `(b, h, w)`.
    pub targets: Array3<f32>,
}

/// Draws Stage III batches in a seed-determined order.
pub struct BatchSampler<'a> {
    v: &'a Volume4D,
    s1: &'a Stage1Output,
    sched: &'a NoiseSchedule,
    fits: &'a FitSet,
    cfg: Stage3Config,
    rng: ChaCha8Rng,
}

impl<'a> BatchSampler<'a> {
    pub fn new(
        v: &'a Volume4D,
        s1: &'a Stage1Output,
        sched: &'a NoiseSchedule,
        fits: &'a FitSet,
        cfg: Stage3Config,
    ) -> Result<Self> {
        if !s1.is_calibrated() {
            return Err(Error::NotCalibrated);
        }
        if !v.is_normalized() {
            return Err(Error::NotNormalized);
        }
        let d = v.dims();
        if s1.y_bar.dim() != (d.l, d.d, d.h, d.w) {
            return Err(Error::shape(format!("{:?}", (d.l, d.d, d.h, d.w)), format!("{:?}", s1.y_bar.dim())));
        }
        Ok(Self {
            v,
            s1,
            sched,
            fits,
            cfg,
            rng: ChaCha8Rng::seed_from_u64(cfg.seed ^ 0x5354_4147_4533),
        })
    }

    pub fn next_batch(&mut self) -> Result<Stage3Batch> {
        let dims = self.v.dims();
        let b = self.cfg.batch;
        let n = if self.cfg.condition_on_priors { self.s1.pairs.n } else { 0 };
        let mut inputs = Array4::zeros((b, 1 + n, dims.h, dims.w));
        let mut targets = Array3::zeros((b, dims.h, dims.w));
        let mut positions = Vec::with_capacity(b);
        let mut ts = Vec::with_capacity(b);
        let mut levels = Vec::with_capacity(b);
        for i in 0..b {
            let (vol, z) = (self.rng.random_range(0..dims.l), self.rng.random_range(0..dims.d));
            let t = self.rng.random_range(1..=self.sched.T());
            let shuffle_seed = self.rng.next_u64();
            let sigma = self.fits.for_slice(vol, z).sigma;
            let sample = corrupt_with(
                self.sched,
                self.s1.y_bar_slice(vol, z).view(),
                self.s1.residual_slice(vol, z).view(),
                t,
                self.cfg.shuffle_mode,
                sigma,
                shuffle_seed,
                !self.cfg.ablation.no_shuffle,
            )?;
            inputs.slice_mut(s![i, 0, .., ..]).assign(&sample.state);
            if n > 0 {
                let priors = data_io::prior_volumes(dims, &self.v.b0_volumes, vol, z, &self.s1.pairs)?;
                for (c, p) in priors.iter().enumerate() {
                    inputs.slice_mut(s![i, 1 + c, .., ..]).assign(&self.v.slice(*p, z));
                }
            }
            match self.cfg.ablation.target {
                TrainTarget::X => targets.index_axis_mut(Axis(0), i).assign(&self.v.slice(vol, z)),
                TrainTarget::YBar => targets.index_axis_mut(Axis(0), i).assign(&self.s1.y_bar_slice(vol, z)),
            }
            positions.push((vol, z));
            ts.push(t);
            levels.push(self.sched.alpha_bar(t));
        }
        Ok(Stage3Batch {
            positions,
            t: ts,
            levels,
            inputs,
            targets,
        })
    }
}

/// What a training hook sees before each optimisation step.
pub struct HookView<'a> {
    pub step: usize,
    pub positions: &'a [(usize, usize)],
    pub t: &'a [usize],
    pub inputs: ArrayView4<'a, f32>,
    pub targets: ArrayView3<'a, f32>,
}

pub type TrainHook<'h> = &'h mut dyn FnMut(&HookView<'_>);

/// Trains F: `argmin ‖F(S_t, ᾱ_t) − x‖²` with `t ∼ U(1, T)`.
pub fn train_stage3(
    v: &Volume4D,
    s1: &Stage1Output,
    sched: &NoiseSchedule,
    fits: &FitSet,
    cfg: &Stage3Config,
    mut hook: Option<TrainHook<'_>>,
) -> Result<(DenoiserHandle, TrainLog)> {
    if cfg.steps == 0 || cfg.batch == 0 {
        return Err(Error::InvalidParams("steps and batch must be positive".into()));
    }
    let spec = cfg.spec(s1.pairs.n);
    let handle = DenoiserHandle::new(spec, cfg.seed)?;
    let dims = v.dims();
    handle.check_input(spec.in_channels, dims.h, dims.w)?;
    let mut sampler = BatchSampler::new(v, s1, sched, fits, *cfg)?;
    let mut trainer = Trainer::new(handle, cfg.lr);
    let mut log = TrainLog::default();
    let mut t_sum = 0.0;
    for step in 0..cfg.steps {
        let batch = sampler.next_batch()?;
        if let Some(h) = hook.as_mut() {
            h(&HookView {
                step,
                positions: &batch.positions,
                t: &batch.t,
                inputs: batch.inputs.view(),
                targets: batch.targets.view(),
            });
        }
        let loss = trainer.step(batch.inputs.view(), Some(&batch.levels), batch.targets.view())?;
        t_sum += batch.t.iter().sum::<usize>() as f64 / batch.t.len() as f64;
        let logged = cfg.log_every > 0 && (step + 1) % cfg.log_every == 0;
        let t_mean = logged.then(|| t_sum / cfg.log_every as f64);
        log.record(step, loss, t_mean, cfg.lr, cfg.log_every);
        if logged {
            t_sum = 0.0;
        }
        if cfg.log_every > 0 && (step + 1) % (cfg.log_every * 10) == 0 {
            info!("stage3 step {} loss {:.5}", step + 1, loss);
        }
    }
    Ok((trainer.finish(), log))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::schedule::{ScheduleParams, build_schedule};

    #[test]
    fn shuffle_is_a_permutation() {
        let a = Array2::from_shape_vec((2, 2), vec![1.0f32, 2.0, 3.0, 4.0]).unwrap();
        let b = noise_shuffle(a.view(), 9);
        let mut v: Vec<f32> = b.iter().copied().collect();
        v.sort_by(f32::total_cmp);
        assert_eq!(v, [1.0, 2.0, 3.0, 4.0]);
        assert_eq!(noise_shuffle(a.view(), 9), b);
        let c = Array2::from_elem((3, 5), 0.25f32);
        assert_eq!(noise_shuffle(c.view(), 1), c);
    }

    #[test]
    fn zero_residual_gives_scaled_clean() {
        let sched = build_schedule(ScheduleParams::default()).unwrap();
        let y = Array2::from_shape_fn((4, 4), |(i, j)| (i + j) as f32 * 0.1);
        let r = Array2::zeros((4, 4));
        for mode in [ShuffleMode::Literal, ShuffleMode::Scaled] {
            let f = corrupt_for_training(&sched, y.view(), r.view(), 600, mode, 0.0, 3).unwrap();
            let want = y.mapv(|v| (sched.lambda1(600) * v as f64) as f32);
            assert_eq!(f.state, want);
        }
        let r1 = Array2::from_elem((4, 4), 0.1f32);
        assert!(matches!(
            corrupt_for_training(&sched, y.view(), r1.view(), 600, ShuffleMode::Scaled, 0.0, 3),
            Err(Error::ZeroSigma)
        ));
    }

    #[test]
    fn literal_mode_near_first_state() {
        let sched = build_schedule(ScheduleParams::default()).unwrap();
        let y = Array2::from_shape_fn((4, 4), |(i, j)| (i * j) as f32 * 0.05);
        let r = Array2::from_shape_fn((4, 4), |(i, j)| (i as f32 - j as f32) * 0.01);
        let f = corrupt_for_training(&sched, y.view(), r.view(), 1, ShuffleMode::Literal, 0.02, 5).unwrap();
        let want = &y + &noise_shuffle(r.view(), 5);
        let err = (&f.state - &want).iter().fold(0.0f32, |m, d| m.max(d.abs()));
        assert!(err < 1e-4);
    }

    #[test]
    fn default_hyperparameters() {
        let c = Stage3Config::default();
        assert_eq!((c.steps, c.lr, c.batch), (100_000, 1e-4, 32));
        assert_eq!(c.shuffle_mode, ShuffleMode::Scaled);
        assert_eq!(c.ablation, Stage3Ablation::default());
    }
}
