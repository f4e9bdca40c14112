//! Reverse sampling: conditional denoising from the matched state,
//! unconditional generation from pure noise, and the RMSE-trajectory
//! outlier detector.

use std::fmt::Write as _;
use std::path::Path;
use std::time::Instant;

use log::warn;
use ndarray::{Array2, Array3, Array4, ArrayView2, ArrayView3, ArrayView4, Axis, s};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::backbone::{Conditioning, DenoiserHandle};
use crate::error::{Error, Result};
use crate::schedule::{NoiseSchedule, posterior_mean_coeffs, standard_normal};

/// Anything that predicts clean slices from states at a noise level.
pub trait CleanPredictor {
    /// `states` is `(b, h, w)`, `condition` `(b, n, h, w)`; returns `(b, h, w)`.
    fn predict_clean(
        &self,
        states: ArrayView3<f32>,
        condition: Option<ArrayView4<f32>>,
        alpha_bar: f64,
    ) -> Result<Array3<f32>>;

    /// Number of condition channels expected alongside the state.
    fn condition_channels(&self) -> usize {
        0
    }
}

impl CleanPredictor for DenoiserHandle {
    fn predict_clean(
        &self,
        states: ArrayView3<f32>,
        condition: Option<ArrayView4<f32>>,
        alpha_bar: f64,
    ) -> Result<Array3<f32>> {
        if self.spec.conditioning != Conditioning::NoiseLevelScalar {
            return Err(Error::SpecMismatch("sampling needs a noise-level conditioned denoiser".into()));
        }
        let (b, h, w) = states.dim();
        let n = self.condition_channels();
        let mut inputs = Array4::zeros((b, 1 + n, h, w));
        inputs.index_axis_mut(Axis(1), 0).assign(&states);
        match condition {
            Some(c) if c.dim() == (b, n, h, w) => inputs.slice_mut(s![.., 1.., .., ..]).assign(&c),
            None if n == 0 => {}
            other => {
                return Err(Error::shape(
                    format!("({b}, {n}, {h}, {w}) condition"),
                    format!("{:?}", other.map(|c| c.dim())),
                ));
            }
        }
        let levels = vec![alpha_bar; b];
        self.apply_batch(inputs.view(), Some(&levels))
    }

    fn condition_channels(&self) -> usize {
        self.spec.in_channels - 1
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MeanMode {
    /// Posterior mean of `q(S_{t−1} | S_t, x̂₀)` from the predicted clean slice.
    #[default]
    Posterior,
    /// The predicted clean slice used as the transition mean verbatim.
    Literal,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SamplerOptions {
    pub mean_mode: MeanMode,
    pub keep_states: bool,
    /// Warn when the output leaves `[−range_warn, range_warn]`.
    pub range_warn: f32,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            mean_mode: MeanMode::Posterior,
            keep_states: false,
            range_warn: 1.5,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SamplerTrace {
    /// `S_t` before each transition, when kept.
    #[serde(skip)]
    pub states: Option<Vec<Array2<f32>>>,
    /// `(t, RMSE(S_t, S_{t_start}))` before each transition, starting at
    /// `(t_start, 0)`.
    pub rmse_curve: Vec<(usize, f64)>,
    /// RMSE of the emitted slice against the starting slice.
    pub final_rmse: f64,
    pub transitions: usize,
    pub t_start: usize,
    pub seed: u64,
    /// Seconds.
    pub wall_time: f64,
}

fn rmse(a: ArrayView2<f32>, b: ArrayView2<f32>) -> f64 {
    let sq: f64 = a
        .iter()
        .zip(b.iter())
        .map(|(&x, &y)| (x as f64 - y as f64).powi(2))
        .sum();
    (sq / a.len() as f64).sqrt()
}

/// Runs the reverse chain from `t_start` for a batch of `(b, h, w)` states,
/// one seeded noise stream per item.
pub fn run_chain(
    start: ArrayView3<f32>,
    condition: Option<ArrayView4<f32>>,
    f: &dyn CleanPredictor,
    sched: &NoiseSchedule,
    t_start: usize,
    seeds: &[u64],
    opts: &SamplerOptions,
) -> Result<(Array3<f32>, Vec<SamplerTrace>)> {
    sched.check_state(t_start)?;
    let (b, h, w) = start.dim();
    if seeds.len() != b {
        return Err(Error::shape(format!("{b} seeds"), seeds.len()));
    }
    let clock = Instant::now();
    let mut rngs: Vec<ChaCha8Rng> = seeds.iter().map(|&s| ChaCha8Rng::seed_from_u64(s)).collect();
    let mut state = start.to_owned();
    let mut traces: Vec<SamplerTrace> = seeds
        .iter()
        .map(|&seed| SamplerTrace {
            states: opts.keep_states.then(Vec::new),
            rmse_curve: Vec::with_capacity(t_start),
            final_rmse: 0.0,
            transitions: 0,
            t_start,
            seed,
            wall_time: 0.0,
        })
        .collect();
    for t in (1..=t_start).rev() {
        for (i, tr) in traces.iter_mut().enumerate() {
            let si = state.index_axis(Axis(0), i);
            tr.rmse_curve.push((t, rmse(si, start.index_axis(Axis(0), i))));
            if let Some(states) = tr.states.as_mut() {
                states.push(si.to_owned());
            }
            tr.transitions += 1;
        }
        let x0 = f.predict_clean(state.view(), condition, sched.alpha_bar(t))?;
        if x0.dim() != (b, h, w) {
            return Err(Error::shape(format!("({b}, {h}, {w})"), format!("{:?}", x0.dim())));
        }
        if t == 1 {
            state = x0;
        } else {
            let c = posterior_mean_coeffs(sched, t)?;
            for (i, rng) in rngs.iter_mut().enumerate() {
                let z = standard_normal((h, w), rng);
                let mut si = state.index_axis_mut(Axis(0), i);
                let xi = x0.index_axis(Axis(0), i);
                ndarray::Zip::from(&mut si).and(xi).and(&z).for_each(|s, &x, &z| {
                    let mean = match opts.mean_mode {
                        MeanMode::Posterior => c.coef_clean * x as f64 + c.coef_state * *s as f64,
                        MeanMode::Literal => x as f64,
                    };
                    *s = (mean + c.sigma * z as f64) as f32;
                });
            }
        }
        if state.iter().any(|v| !v.is_finite()) {
            return Err(Error::NonFiniteState { t });
        }
    }
    let elapsed = clock.elapsed().as_secs_f64();
    for (i, tr) in traces.iter_mut().enumerate() {
        tr.final_rmse = rmse(state.index_axis(Axis(0), i), start.index_axis(Axis(0), i));
        tr.wall_time = elapsed;
    }
    let peak = state.iter().fold(0.0f32, |m, v| m.max(v.abs()));
    if peak > opts.range_warn {
        warn!("sampler output reaches {peak:.3}, outside ±{}", opts.range_warn);
    }
    Ok((state, traces))
}

/// Denoises one slice starting the chain at `t_star` with `S_{t★} = x`.
pub fn denoise(
    x: ArrayView2<f32>,
    condition: Option<ArrayView3<f32>>,
    f: &dyn CleanPredictor,
    sched: &NoiseSchedule,
    t_star: usize,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<(Array2<f32>, SamplerTrace)> {
    let cond = condition.map(|c| c.insert_axis(Axis(0)));
    let (out, mut traces) = run_chain(x.insert_axis(Axis(0)), cond, f, sched, t_star, &[seed], opts)?;
    Ok((out.index_axis_move(Axis(0), 0), traces.remove(0)))
}

/// Batched [`denoise`]; item `i` uses `seeds[i]` and gives the same result
/// as denoising it alone.
pub fn denoise_batch(
    x: ArrayView3<f32>,
    condition: Option<ArrayView4<f32>>,
    f: &dyn CleanPredictor,
    sched: &NoiseSchedule,
    t_star: usize,
    seeds: &[u64],
    opts: &SamplerOptions,
) -> Result<(Array3<f32>, Vec<SamplerTrace>)> {
    run_chain(x, condition, f, sched, t_star, seeds, opts)
}

/// Full `T`-step chain from `S_T ∼ N(0, I)`.
pub fn sample_unconditional(
    f: &dyn CleanPredictor,
    sched: &NoiseSchedule,
    shape: (usize, usize),
    condition: Option<ArrayView3<f32>>,
    seed: u64,
    opts: &SamplerOptions,
) -> Result<Array2<f32>> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let z = standard_normal(shape, &mut rng);
    let chain_seed = seed.wrapping_add(0x9E37_79B9_7F4A_7C15);
    let (out, _) = denoise(z.view(), condition, f, sched, sched.T(), chain_seed, opts)?;
    Ok(out)
}

/// Per-slice seed derived from a run seed.
pub fn slice_seed(seed: u64, volume: usize, slice: usize) -> u64 {
    let mut z = seed ^ ((volume as u64) << 32 | slice as u64).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

/// Denoises every slice of a normalised sequence. `t_star(volume, slice)`
/// gives the starting state; slices sharing it are batched.
#[allow(clippy::too_many_arguments)]
pub fn denoise_sequence(
    v: &crate::data_io::Volume4D,
    f: &DenoiserHandle,
    sched: &NoiseSchedule,
    pairs: &crate::data_io::PairOptions,
    t_star: &dyn Fn(usize, usize) -> usize,
    seed: u64,
    max_batch: usize,
    opts: &SamplerOptions,
) -> Result<(Array4<f32>, Vec<((usize, usize), SamplerTrace)>)> {
    let dims = v.dims();
    let n = f.condition_channels();
    let priors = crate::data_io::PairOptions { n, ..*pairs };
    let mut groups: std::collections::BTreeMap<usize, Vec<(usize, usize)>> = Default::default();
    for vol in 0..dims.l {
        for z in 0..dims.d {
            groups.entry(t_star(vol, z)).or_default().push((vol, z));
        }
    }
    let mut out = Array4::zeros((dims.l, dims.d, dims.h, dims.w));
    let mut traces = Vec::with_capacity(dims.l * dims.d);
    for (t, positions) in groups {
        for chunk in positions.chunks(max_batch.max(1)) {
            let mut x = Array3::zeros((chunk.len(), dims.h, dims.w));
            let mut cond = Array4::zeros((chunk.len(), n, dims.h, dims.w));
            for (i, &(vol, z)) in chunk.iter().enumerate() {
                x.index_axis_mut(Axis(0), i).assign(&v.slice(vol, z));
                if n > 0 {
                    let p = crate::data_io::prior_volumes(dims, &v.b0_volumes, vol, z, &priors)?;
                    for (c, pv) in p.iter().enumerate() {
                        cond.slice_mut(s![i, c, .., ..]).assign(&v.slice(*pv, z));
                    }
                }
            }
            let seeds: Vec<u64> = chunk.iter().map(|&(vol, z)| slice_seed(seed, vol, z)).collect();
            let c = (n > 0).then(|| cond.view());
            let (res, tr) = run_chain(x.view(), c, f, sched, t, &seeds, opts)?;
            for ((i, &(vol, z)), tr) in chunk.iter().enumerate().zip(tr) {
                out.slice_mut(s![vol, z, .., ..]).assign(&res.index_axis(Axis(0), i));
                traces.push(((vol, z), tr));
            }
        }
    }
    traces.sort_by_key(|(p, _)| *p);
    Ok((out, traces))
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum ThresholdPolicy {
    Fixed { threshold: f64 },
    /// `factor × median(final RMSE)` over a population of traces.
    PopulationMedian { factor: f64 },
}

impl Default for ThresholdPolicy {
    fn default() -> Self {
        ThresholdPolicy::PopulationMedian { factor: 0.5 }
    }
}

impl ThresholdPolicy {
    pub fn threshold(&self, population: &[SamplerTrace]) -> Result<f64> {
        match *self {
            ThresholdPolicy::Fixed { threshold } => Ok(threshold),
            ThresholdPolicy::PopulationMedian { factor } => {
                if population.is_empty() {
                    return Err(Error::EmptyTrace);
                }
                let finals: Vec<f64> = population.iter().map(|t| t.final_rmse).collect();
                Ok(factor * crate::evalsim::quantiles(&finals).median)
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Verdict {
    Ok,
    Outlier,
}

/// A run whose output never departs far from its input is an outlier.
pub fn detect_outlier(trace: &SamplerTrace, threshold: f64) -> Result<Verdict> {
    if trace.rmse_curve.len() < 2 {
        return Err(Error::EmptyTrace);
    }
    Ok(if trace.final_rmse < threshold {
        Verdict::Outlier
    } else {
        Verdict::Ok
    })
}

/// Verdicts for a population under one policy.
pub fn detect_outliers(traces: &[SamplerTrace], policy: ThresholdPolicy) -> Result<Vec<Verdict>> {
    let th = policy.threshold(traces)?;
    traces.iter().map(|t| detect_outlier(t, th)).collect()
}

/// Long-format CSV: `trace,t,iteration,rmse`, with the emitted slice as
/// `t = 0`.
pub fn rmse_csv(traces: &[SamplerTrace]) -> String {
    let mut s = String::from("trace,t,iteration,rmse\n");
    for (k, tr) in traces.iter().enumerate() {
        for (it, (t, r)) in tr.rmse_curve.iter().enumerate() {
            let _ = writeln!(s, "{k},{t},{it},{r:.8}");
        }
        let _ = writeln!(s, "{k},0,{},{:.8}", tr.rmse_curve.len(), tr.final_rmse);
    }
    s
}

pub fn write_rmse_report(traces: &[SamplerTrace], csv: impl AsRef<Path>, png: impl AsRef<Path>) -> Result<()> {
    let csv = csv.as_ref();
    std::fs::write(csv, rmse_csv(traces)).map_err(|e| Error::io(csv, e))?;
    let series: Vec<Vec<(f64, f64)>> = traces
        .iter()
        .map(|tr| {
            let mut pts: Vec<(f64, f64)> = tr
                .rmse_curve
                .iter()
                .enumerate()
                .map(|(i, &(_, r))| (i as f64, r))
                .collect();
            pts.push((tr.rmse_curve.len() as f64, tr.final_rmse));
            pts
        })
        .collect();
    crate::plot::line_chart(&series, png)
}
