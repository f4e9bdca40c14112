//! Flags slices whose reverse chain barely departs from the input.

use ddm2::sampler::{CleanPredictor, SamplerOptions, ThresholdPolicy, Verdict, denoise, detect_outliers, write_rmse_report};
use ddm2::schedule::{ScheduleParams, build_schedule};
use ndarray::{Array2, Array3, ArrayView3, ArrayView4};

/// Predicts a smooth version of the state.
struct Blur;

impl CleanPredictor for Blur {
    fn predict_clean(&self, states: ArrayView3<f32>, _: Option<ArrayView4<f32>>, _: f64) -> ddm2::Result<Array3<f32>> {
        let (b, h, w) = states.dim();
        Ok(Array3::from_shape_fn((b, h, w), |(k, i, j)| {
            let (i0, i1, j0, j1) = (i.saturating_sub(1), (i + 1).min(h - 1), j.saturating_sub(1), (j + 1).min(w - 1));
            let win = states.slice(ndarray::s![k, i0..=i1, j0..=j1]);
            win.sum() / win.len() as f32
        }))
    }
}

fn main() -> ddm2::Result<()> {
    let sched = build_schedule(ScheduleParams::default())?;
    let base = Array2::from_shape_fn((24, 24), |(i, j)| ((i as f32 / 4.0).sin() + (j as f32 / 5.0).cos()) * 0.3);
    let mut traces = Vec::new();
    for (k, level) in [0.2f32, 0.2, 0.2, 0.01, 0.01, 0.2].into_iter().enumerate() {
        let noisy = Array2::from_shape_fn((24, 24), |(i, j)| base[[i, j]] + level * (((i * 7 + j * 13 + k) % 11) as f32 / 5.0 - 1.0));
        let t = if level > 0.1 { 800 } else { 20 };
        let (_, tr) = denoise(noisy.view(), None, &Blur, &sched, t, k as u64, &SamplerOptions::default())?;
        traces.push(tr);
    }
    let verdicts = detect_outliers(&traces, ThresholdPolicy::default())?;
    for (i, (tr, v)) in traces.iter().zip(&verdicts).enumerate() {
        let tag = if *v == Verdict::Outlier { "OUTLIER" } else { "ok" };
        println!("slice {i}: t*={:>4} final rmse {:.4} {tag}", tr.t_start, tr.final_rmse);
    }
    write_rmse_report(&traces, "rmse_traces.csv", "rmse_traces.png")?;
    println!("wrote rmse_traces.csv and rmse_traces.png");
    Ok(())
}
