//! Stage II: residual calibration, Gaussian noise fit and matching the
//! noisy input to a state of the diffusion chain.

use std::path::Path;

use log::warn;
use ndarray::{Array2, ArrayView2, s};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, standard_normal};
use crate::stage1::{Stage1Output, slice_stats};

/// Removes the per-slice residual mean and moves it into ȳ, so that
/// `ȳ + ε̄` is unchanged and every slice residual has zero mean.
pub fn calibrate(out: &Stage1Output) -> Result<Stage1Output> {
    if out.is_calibrated() {
        return Err(Error::AlreadyCalibrated);
    }
    let mut c = out.clone();
    let (l, d, _, _) = c.residual.dim();
    let mut removed = Array2::zeros((l, d));
    for vol in 0..l {
        for z in 0..d {
            let mut r = c.residual.slice_mut(s![vol, z, .., ..]);
            let mu = r.sum() / r.len() as f64;
            r.mapv_inplace(|e| e - mu);
            let mut y = c.y_bar.slice_mut(s![vol, z, .., ..]);
            y.mapv_inplace(|v| v + mu);
            removed[[vol, z]] = mu;
        }
    }
    let (mean, std) = slice_stats(&c.residual);
    c.slice_mean = mean;
    c.slice_std = std;
    c.calibration = Some(removed);
    Ok(c)
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitScope {
    PerSlice,
    #[default]
    PerVolume,
    Global,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NoiseModelFit {
    /// Standard deviation of ε̄ in normalised intensity units.
    pub sigma: f64,
    /// Residual mean before calibration.
    pub mu_raw: f64,
    pub scope: FitScope,
    pub volume: Option<usize>,
    pub slice: Option<usize>,
    pub sample_count: usize,
}

/// Fits for one scope, with lookup by position.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FitSet {
    pub scope: FitScope,
    pub fits: Vec<NoiseModelFit>,
    depth: usize,
}

impl FitSet {
    pub fn index_of(&self, volume: usize, slice: usize) -> usize {
        match self.scope {
            FitScope::PerSlice => volume * self.depth + slice,
            FitScope::PerVolume => volume,
            FitScope::Global => 0,
        }
    }

    pub fn for_slice(&self, volume: usize, slice: usize) -> &NoiseModelFit {
        &self.fits[self.index_of(volume, slice)]
    }
}

/// Sample standard deviation of the calibrated residual over each scope
/// unit. `background` marks in-plane voxels to leave out.
pub fn fit_noise_model(out: &Stage1Output, scope: FitScope, background: Option<ArrayView2<bool>>) -> Result<FitSet> {
    let calib = out.calibration.as_ref().ok_or(Error::NotCalibrated)?;
    let (l, d, h, w) = out.residual.dim();
    if let Some(m) = &background
        && m.dim() != (h, w)
    {
        return Err(Error::shape(format!("({h}, {w}) mask"), format!("{:?}", m.dim())));
    }
    let units: Vec<(Option<usize>, Option<usize>, Vec<(usize, usize)>)> = match scope {
        FitScope::PerSlice => (0..l)
            .flat_map(|v| (0..d).map(move |z| (Some(v), Some(z), vec![(v, z)])))
            .collect(),
        FitScope::PerVolume => (0..l)
            .map(|v| (Some(v), None, (0..d).map(|z| (v, z)).collect()))
            .collect(),
        FitScope::Global => vec![(None, None, (0..l).flat_map(|v| (0..d).map(move |z| (v, z))).collect())],
    };
    let mut fits = Vec::with_capacity(units.len());
    for (volume, slice, positions) in units {
        let mut sum = 0.0;
        let mut sum_sq = 0.0;
        let mut count = 0usize;
        let mut mu_raw = 0.0;
        for &(v, z) in &positions {
            mu_raw += calib[[v, z]];
            let r = out.residual.slice(s![v, z, .., ..]);
            for ((i, j), &e) in r.indexed_iter() {
                if background.as_ref().is_some_and(|m| m[[i, j]]) {
                    continue;
                }
                sum += e;
                count += 1;
            }
        }
        if count < 2 {
            return Err(Error::EmptySample);
        }
        let mean = sum / count as f64;
        for &(v, z) in &positions {
            let r = out.residual.slice(s![v, z, .., ..]);
            for ((i, j), &e) in r.indexed_iter() {
                if !background.as_ref().is_some_and(|m| m[[i, j]]) {
                    sum_sq += (e - mean) * (e - mean);
                }
            }
        }
        fits.push(NoiseModelFit {
            sigma: (sum_sq / (count - 1) as f64).sqrt(),
            mu_raw: mu_raw / positions.len() as f64,
            scope,
            volume,
            slice,
            sample_count: count,
        });
    }
    Ok(FitSet { scope, fits, depth: d })
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MatchMetric {
    /// `√β_t`, as the state-matching objective is written.
    #[default]
    SqrtBeta,
    /// `√(1 − ᾱ_t)`, the total forward-process noise at state t.
    SqrtOneMinusAlphaBar,
}

impl MatchMetric {
    pub fn level(self, sched: &NoiseSchedule, t: usize) -> f64 {
        match self {
            MatchMetric::SqrtBeta => sched.sqrt_beta(t),
            MatchMetric::SqrtOneMinusAlphaBar => (1.0 - sched.alpha_bar(t)).sqrt(),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct MatchOptions {
    pub p: f64,
    pub metric: MatchMetric,
}

impl Default for MatchOptions {
    fn default() -> Self {
        Self {
            p: 1.0,
            metric: MatchMetric::SqrtBeta,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StateMatch {
    pub t_star: usize,
    /// `|level(t_star) − σ|^p`.
    pub distance: f64,
    pub p: f64,
    pub sigma: f64,
    pub metric: MatchMetric,
    pub schedule_fingerprint: String,
}

/// Exhaustive scan for `argmin_t |level(t) − σ|^p`; ties go to the largest
/// `t`. `σ = 0` maps to `t = 1`.
pub fn match_state(sigma: f64, sched: &NoiseSchedule, opts: MatchOptions) -> Result<StateMatch> {
    if !(sigma >= 0.0) || !sigma.is_finite() {
        return Err(Error::InvalidParams(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    if !(opts.p >= 1.0) {
        return Err(Error::InvalidParams(format!("norm order p must be >= 1, got {}", opts.p)));
    }
    let big_t = sched.T();
    let dist = |t: usize| (opts.metric.level(sched, t) - sigma).abs().powf(opts.p);
    let (t_star, distance) = if sigma == 0.0 {
        warn!("fitted sigma is 0; starting the chain at t = 1");
        (1, dist(1))
    } else {
        let mut best = (1, dist(1));
        for t in 2..=big_t {
            let d = dist(t);
            if d <= best.1 {
                best = (t, d);
            }
        }
        if sigma > opts.metric.level(sched, big_t) {
            warn!("sigma {sigma:.4} exceeds the schedule's largest level; clamped to t = {big_t}");
        } else if sigma < opts.metric.level(sched, 1) {
            warn!("sigma {sigma:.5} is below the schedule's smallest level; clamped to t = {}", best.0);
        }
        best
    };
    Ok(StateMatch {
        t_star,
        distance,
        p: opts.p,
        sigma,
        metric: opts.metric,
        schedule_fingerprint: sched.fingerprint(),
    })
}

/// Matches every fit of a set.
pub fn match_fits(fits: &FitSet, sched: &NoiseSchedule, opts: MatchOptions) -> Result<Vec<StateMatch>> {
    fits.fits.iter().map(|f| match_state(f.sigma, sched, opts)).collect()
}

/// Noisy slice next to the Stage I estimate corrupted to state `t`.
#[derive(Debug, Clone, PartialEq)]
pub struct MatchVisual {
    pub t: usize,
    pub x: Array2<f32>,
    /// `√ᾱ_t·ȳ + √β_t·z`.
    pub corrupted: Array2<f32>,
    /// Symmetric KL divergence between the 64-bin histograms of `x` and
    /// `corrupted`.
    pub histogram_distance: f64,
}

impl MatchVisual {
    pub fn write_png(&self, path: impl AsRef<Path>) -> Result<()> {
        crate::plot::image_row(&[self.x.view(), self.corrupted.view()], path)
    }
}

pub fn visualize_match(
    out: &Stage1Output,
    sched: &NoiseSchedule,
    t: usize,
    volume: usize,
    slice: usize,
    seed: u64,
) -> Result<MatchVisual> {
    sched.check_state(t)?;
    let (l, d, h, w) = out.y_bar.dim();
    if volume >= l || slice >= d {
        return Err(Error::InvalidParams(format!("position ({volume}, {slice}) outside {l}x{d}")));
    }
    let y = out.y_bar.slice(s![volume, slice, .., ..]);
    let x = (&y + &out.residual.slice(s![volume, slice, .., ..])).mapv(|v| v as f32);
    let z = standard_normal((h, w), &mut ChaCha8Rng::seed_from_u64(seed));
    let (a, b) = (sched.alpha_bar(t).sqrt(), sched.sqrt_beta(t));
    let corrupted = ndarray::Zip::from(&y)
        .and(&z)
        .map_collect(|&y, &z| (a * y + b * z as f64) as f32);
    let histogram_distance = histogram_distance(x.view(), corrupted.view(), 64);
    Ok(MatchVisual {
        t,
        x,
        corrupted,
        histogram_distance,
    })
}

/// Symmetric KL divergence between `bins`-bin histograms over the joint
/// value range, with a small floor on empty bins.
pub fn histogram_distance(a: ArrayView2<f32>, b: ArrayView2<f32>, bins: usize) -> f64 {
    let (lo, hi) = a
        .iter()
        .chain(b.iter())
        .fold((f64::MAX, f64::MIN), |(lo, hi), &v| (lo.min(v as f64), hi.max(v as f64)));
    let hist = |x: ArrayView2<f32>| {
        let mut hgram = vec![0.0f64; bins];
        let span = (hi - lo).max(f64::MIN_POSITIVE);
        for &v in x.iter() {
            let k = (((v as f64 - lo) / span) * bins as f64) as usize;
            hgram[k.min(bins - 1)] += 1.0;
        }
        let floor = 1e-10;
        let total: f64 = hgram.iter().map(|c| c + floor).sum();
        hgram.iter().map(|c| (c + floor) / total).collect::<Vec<_>>()
    };
    let (p, q) = (hist(a), hist(b));
    p.iter()
        .zip(&q)
        .map(|(&p, &q)| p * (p / q).ln() + q * (q / p).ln())
        .sum()
}
