//! Builds the reverse warm-up schedule and its alternatives and writes the
//! tables as CSV.
//!
//! `cargo run --example schedule_tables -- [out_dir]`

use ddm2::schedule::{ScheduleParams, ScheduleShape, build_schedule};

fn main() -> ddm2::Result<()> {
    let out = std::env::args().nth(1).unwrap_or_else(|| "schedule_tables".into());
    std::fs::create_dir_all(&out).map_err(|e| ddm2::Error::io(&out, e))?;

    let reverse = build_schedule(ScheduleParams::default())?;
    let warmup = build_schedule(ScheduleParams { shape: ScheduleShape::Warmup, ..Default::default() })?;
    for (name, s) in [("reverse_warmup", &reverse), ("warmup", &warmup)] {
        println!(
            "{name:>15}: beta_1={:.1e} beta_300={:.1e} beta_301={:.3e} beta_T={:.1e} alpha_bar_T={:.4}",
            s.beta(1),
            s.beta(300),
            s.beta(301),
            s.beta(s.T()),
            s.alpha_bar(s.T())
        );
        let path = format!("{out}/{name}.csv");
        std::fs::write(&path, s.to_csv()).map_err(|e| ddm2::Error::io(&path, e))?;
    }
    for t in [1, 300, 472, 700, 1000] {
        println!("t={t:>4}  sqrt(beta)={:.5}  lambda1={:.4}  lambda2={:.4}", reverse.sqrt_beta(t), reverse.lambda1(t), reverse.lambda2(t));
    }
    println!("fingerprint {}", &reverse.fingerprint()[..16]);
    Ok(())
}
