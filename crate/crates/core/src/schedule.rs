//! Discrete diffusion noise schedules and the coefficient tables derived
//! from them. States are 1-based: `t ∈ [1, T]`, with `t = 0` the clean
//! image.

use std::fmt::Write as _;

use ndarray::{Array2, ArrayView2, Zip};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ScheduleShape {
    /// Linear ramp from `beta_start` over the first `linear_ratio·T`
    /// states, then constant at `beta_end`.
    Warmup,
    /// Constant at `beta_start` for the first `(1 - linear_ratio)·T` states,
    /// then a linear ramp reaching `beta_end` at `T`.
    ReverseWarmup,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ScheduleParams {
    pub shape: ScheduleShape,
    #[serde(rename = "T")]
    pub steps: usize,
    pub beta_start: f64,
    pub beta_end: f64,
    pub linear_ratio: f64,
}

impl Default for ScheduleParams {
    fn default() -> Self {
        Self {
            shape: ScheduleShape::ReverseWarmup,
            steps: 1000,
            beta_start: 5e-5,
            beta_end: 1e-2,
            linear_ratio: 0.7,
        }
    }
}

/// Immutable β/α/ᾱ tables over `T` states.
#[derive(Debug, Clone, PartialEq)]
pub struct NoiseSchedule {
    params: ScheduleParams,
    // index 0 holds state t = 1
    beta: Vec<f64>,
    alpha: Vec<f64>,
    alpha_bar: Vec<f64>,
}

/// Builds a schedule; see [`ScheduleShape`] for the two shapes.
pub fn build_schedule(params: ScheduleParams) -> Result<NoiseSchedule> {
    let ScheduleParams {
        shape,
        steps,
        beta_start,
        beta_end,
        linear_ratio,
    } = params;
    if steps < 2 {
        return Err(Error::InvalidParams(format!("T must be at least 2, got {steps}")));
    }
    if !(beta_start > 0.0 && beta_start <= beta_end && beta_end < 1.0) {
        return Err(Error::InvalidParams(format!(
            "need 0 < beta_start <= beta_end < 1, got ({beta_start}, {beta_end})"
        )));
    }
    if !(linear_ratio > 0.0 && linear_ratio <= 1.0) {
        return Err(Error::InvalidParams(format!(
            "linear_ratio must lie in (0, 1], got {linear_ratio}"
        )));
    }
    let lerp = |f: f64| beta_start * (1.0 - f) + beta_end * f;
    // a small epsilon keeps e.g. (1 - 0.7) * 1000 from flooring to 299
    let floor = |x: f64| (x + 1e-9).floor() as usize;

    let beta: Vec<f64> = match shape {
        ScheduleShape::ReverseWarmup => {
            let constant_len = floor((1.0 - linear_ratio) * steps as f64).max(1);
            (1..=steps)
                .map(|t| {
                    if t <= constant_len {
                        beta_start
                    } else {
                        lerp((t - constant_len) as f64 / (steps - constant_len) as f64)
                    }
                })
                .collect()
        }
        ScheduleShape::Warmup => {
            let ramp_len = floor(linear_ratio * steps as f64);
            (1..=steps)
                .map(|t| {
                    if ramp_len <= 1 || t >= ramp_len {
                        beta_end
                    } else {
                        lerp((t - 1) as f64 / (ramp_len - 1) as f64)
                    }
                })
                .collect()
        }
    };
    let alpha: Vec<f64> = beta.iter().map(|b| 1.0 - b).collect();
    let alpha_bar: Vec<f64> = alpha
        .iter()
        .scan(1.0, |acc, a| {
            *acc *= a;
            Some(*acc)
        })
        .collect();
    Ok(NoiseSchedule {
        params,
        beta,
        alpha,
        alpha_bar,
    })
}

impl NoiseSchedule {
    pub fn params(&self) -> &ScheduleParams {
        &self.params
    }

    #[allow(non_snake_case)]
    pub fn T(&self) -> usize {
        self.beta.len()
    }

    pub fn check_state(&self, t: usize) -> Result<()> {
        if t == 0 || t > self.T() {
            Err(Error::StateOutOfRange { t, lo: 1, hi: self.T() })
        } else {
            Ok(())
        }
    }

    pub fn beta(&self, t: usize) -> f64 {
        self.beta[t - 1]
    }

    pub fn alpha(&self, t: usize) -> f64 {
        self.alpha[t - 1]
    }

    /// ᾱ_t, with ᾱ_0 = 1.
    pub fn alpha_bar(&self, t: usize) -> f64 {
        if t == 0 { 1.0 } else { self.alpha_bar[t - 1] }
    }

    /// Signal scale √ᾱ_t.
    pub fn lambda1(&self, t: usize) -> f64 {
        self.alpha_bar(t).sqrt()
    }

    /// Noise scale √(1 − ᾱ_t).
    pub fn lambda2(&self, t: usize) -> f64 {
        (1.0 - self.alpha_bar(t)).sqrt()
    }

    pub fn sqrt_beta(&self, t: usize) -> f64 {
        self.beta(t).sqrt()
    }

    pub fn betas(&self) -> &[f64] {
        &self.beta
    }

    /// Stable identity of the tables (hex SHA-256 over parameters and β).
    pub fn fingerprint(&self) -> String {
        let mut h = Sha256::new();
        h.update(serde_json::to_vec(&self.params).expect("params serialize"));
        for b in &self.beta {
            h.update(b.to_le_bytes());
        }
        hex::encode(h.finalize())
    }

    /// `t,beta,alpha_bar,sqrt_beta` rows for every state.
    pub fn to_csv(&self) -> String {
        let mut s = String::from("t,beta,alpha_bar,sqrt_beta\n");
        for t in 1..=self.T() {
            let _ = writeln!(
                s,
                "{t},{:e},{:e},{:e}",
                self.beta(t),
                self.alpha_bar(t),
                self.sqrt_beta(t)
            );
        }
        s
    }
}

/// Coefficients of the reverse-transition mean computed from a clean-image
/// prediction: `mean = coef_clean·x̂₀ + coef_state·S_t`, plus the
/// transition standard deviation.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct PosteriorCoeffs {
    pub coef_clean: f64,
    pub coef_state: f64,
    pub sigma: f64,
}

pub fn posterior_mean_coeffs(sched: &NoiseSchedule, t: usize) -> Result<PosteriorCoeffs> {
    sched.check_state(t)?;
    if t == 1 {
        // the last transition emits the prediction itself, noise-free
        return Ok(PosteriorCoeffs {
            coef_clean: 1.0,
            coef_state: 0.0,
            sigma: 0.0,
        });
    }
    let ab = sched.alpha_bar(t);
    let ab_prev = sched.alpha_bar(t - 1);
    let beta = sched.beta(t);
    Ok(PosteriorCoeffs {
        coef_clean: ab_prev.sqrt() * beta / (1.0 - ab),
        coef_state: sched.alpha(t).sqrt() * (1.0 - ab_prev) / (1.0 - ab),
        sigma: beta.sqrt(),
    })
}

/// Where the noise of a forward sample comes from.
#[derive(Debug, Clone, Copy)]
pub enum NoiseSource<'a> {
    Given(ArrayView2<'a, f32>),
    Seeded(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct ForwardSample {
    pub state: Array2<f32>,
    pub t: usize,
    /// The noise term actually added (already scaled).
    pub noise_used: Array2<f32>,
}

/// `a·x + b·y` evaluated in f64 and rounded once.
pub(crate) fn axpby(a: f64, x: ArrayView2<f32>, b: f64, y: ArrayView2<f32>) -> Array2<f32> {
    Zip::from(x)
        .and(y)
        .map_collect(|&x, &y| (a * x as f64 + b * y as f64) as f32)
}

pub fn standard_normal(shape: (usize, usize), rng: &mut ChaCha8Rng) -> Array2<f32> {
    Array2::from_shape_simple_fn(shape, || {
        let z: f64 = StandardNormal.sample(rng);
        z as f32
    })
}

/// Prior sample `λ₁(t)·clean + λ₂(t)·noise`.
pub fn forward_sample(
    sched: &NoiseSchedule,
    clean: ArrayView2<f32>,
    t: usize,
    noise: NoiseSource<'_>,
) -> Result<ForwardSample> {
    sched.check_state(t)?;
    let noise = match noise {
        NoiseSource::Given(n) => {
            if n.dim() != clean.dim() {
                return Err(Error::shape(format!("{:?}", clean.dim()), format!("{:?}", n.dim())));
            }
            n.to_owned()
        }
        NoiseSource::Seeded(seed) => standard_normal(clean.dim(), &mut ChaCha8Rng::seed_from_u64(seed)),
    };
    let state = axpby(sched.lambda1(t), clean, sched.lambda2(t), noise.view());
    let noise_used = noise.mapv(|z| (sched.lambda2(t) * z as f64) as f32);
    Ok(ForwardSample {
        state,
        t,
        noise_used,
    })
}
