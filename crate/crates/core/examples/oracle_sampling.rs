//! Runs the reverse chain with hand-written clean-image predictors: an oracle
//! that knows the answer, and one that only shrinks its input.

use ddm2::sampler::{CleanPredictor, SamplerOptions, denoise, sample_unconditional};
use ddm2::schedule::{ScheduleParams, build_schedule};
use ndarray::{Array2, Array3, ArrayView3, ArrayView4};

struct Oracle(Array2<f32>);

impl CleanPredictor for Oracle {
    fn predict_clean(&self, states: ArrayView3<f32>, _: Option<ArrayView4<f32>>, _: f64) -> ddm2::Result<Array3<f32>> {
        Ok(self.0.broadcast((states.dim().0, self.0.nrows(), self.0.ncols())).unwrap().to_owned())
    }
}

struct Shrink;

impl CleanPredictor for Shrink {
    fn predict_clean(&self, states: ArrayView3<f32>, _: Option<ArrayView4<f32>>, alpha_bar: f64) -> ddm2::Result<Array3<f32>> {
        Ok(states.mapv(|v| v * alpha_bar.sqrt() as f32))
    }
}

fn main() -> ddm2::Result<()> {
    let sched = build_schedule(ScheduleParams::default())?;
    let clean = Array2::from_shape_fn((16, 16), |(i, j)| ((i + j) % 7) as f32 / 7.0 - 0.5);
    let noisy = clean.mapv(|v| v + 0.05);
    let opts = SamplerOptions::default();
    for t in [1, 300, 472, 1000] {
        let (out, trace) = denoise(noisy.view(), None, &Oracle(clean.clone()), &sched, t, 7, &opts)?;
        println!(
            "oracle from t={t:>4}: exact={} transitions={} final rmse vs input {:.4}",
            out == clean,
            trace.transitions,
            trace.final_rmse
        );
    }
    let (_, trace) = denoise(noisy.view(), None, &Shrink, &sched, 472, 7, &opts)?;
    let tail: Vec<String> = trace.rmse_curve.iter().step_by(100).map(|(t, r)| format!("{t}:{r:.3}")).collect();
    println!("shrink predictor rmse curve: {}", tail.join(" "));
    let pure = sample_unconditional(&Oracle(clean.clone()), &sched, (16, 16), None, 1, &opts)?;
    println!("unconditional sample with oracle equals target: {}", pure == clean);
    Ok(())
}
