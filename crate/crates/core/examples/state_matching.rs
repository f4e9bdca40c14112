//! Maps noise levels to diffusion states and renders the matched state next
//! to the noisy slice.
//!
//! `cargo run --example state_matching -- [out.png]`

use ddm2::data_io::{PairOptions, PriorStrategy};
use ddm2::evalsim::{PhantomSpec, make_phantom};
use ddm2::schedule::{ScheduleParams, build_schedule};
use ddm2::stage1::Stage1Output;
use ddm2::stage2::{MatchMetric, MatchOptions, calibrate, match_state, visualize_match};

fn main() -> ddm2::Result<()> {
    let png = std::env::args().nth(1).unwrap_or_else(|| "state_match.png".into());
    let sched = build_schedule(ScheduleParams::default())?;
    for sigma in [0.0, 0.005, 5e-5f64.sqrt(), 0.02, 0.05, 0.08, 0.1, 0.2] {
        let a = match_state(sigma, &sched, MatchOptions::default())?;
        let b = match_state(sigma, &sched, MatchOptions { metric: MatchMetric::SqrtOneMinusAlphaBar, ..Default::default() })?;
        println!("sigma {sigma:.5}: t* = {:>4} (sqrt beta), {:>4} (sqrt(1 - alpha_bar))", a.t_star, b.t_star);
    }

    // A perfect Stage I estimate: ȳ is the clean phantom, ε̄ the injected noise.
    let (clean, noisy) = make_phantom(&PhantomSpec::desk(0.05, 2))?;
    let y = clean.data().mapv(|v| v as f64);
    let out = calibrate(&Stage1Output::from_estimates(noisy.data(), y, PairOptions::new(2, PriorStrategy::AdjacentDirections)))?;
    let t = match_state(0.05, &sched, MatchOptions::default())?.t_star;
    let vis = visualize_match(&out, &sched, t, 0, 4, 3)?;
    vis.write_png(&png)?;
    println!("t* = {t}: histogram distance {:.4}, written to {png}", vis.histogram_distance);
    Ok(())
}
