//! Runs the whole pipeline from a JSON config on a small phantom, then runs
//! it again to show stage reuse.
//!
//! `cargo run --example pipeline_run -- [workdir]`

use ddm2::pipeline::{PipelineConfig, run_pipeline};

const CONFIG: &str = r#"{
  "seed": 1,
  "input": {
    "kind": "phantom",
    "shape": [16, 16, 4, 5],
    "structures": [
      {"cx": 0.0, "cy": 0.0, "rx": 0.8, "ry": 0.9, "angle": 0.0, "intensity": 0.5, "anisotropy": 0.1, "orientation": 0.0},
      {"cx": 0.2, "cy": 0.1, "rx": 0.3, "ry": 0.4, "angle": 0.3, "intensity": 0.9, "anisotropy": 0.5, "orientation": 1.0}
    ],
    "noise": {"kind": "gaussian", "sigma": 0.08},
    "seed": 4
  },
  "schedule": {"T": 1000},
  "stage1": {"steps": 150, "lr": 1e-3, "batch": 4, "network": {"depth": 2, "base_width": 8}},
  "stage2": {"metric": "sqrt_one_minus_alpha_bar"},
  "stage3": {"steps": 150, "lr": 1e-3, "batch": 4, "network": {"depth": 2, "base_width": 8}}
}"#;

fn main() -> ddm2::Result<()> {
    let dir = std::env::args().nth(1).unwrap_or_else(|| "pipeline_run".into());
    std::fs::create_dir_all(&dir).map_err(|e| ddm2::Error::io(&dir, e))?;
    let cfg_path = format!("{dir}/config.json");
    PipelineConfig::from_json_str(CONFIG)?;
    std::fs::write(&cfg_path, CONFIG).map_err(|e| ddm2::Error::io(&cfg_path, e))?;

    let m = run_pipeline(&cfg_path, &dir)?;
    let t: Vec<usize> = m.state_matches.iter().map(|s| s.t_star).collect();
    println!("matched states per volume: {t:?}; {} outlier slices", m.outliers);
    for s in m.metrics.iter().flatten() {
        println!("{:>14}: {:.3}", s.name, s.mean);
    }
    let again = run_pipeline(&cfg_path, &dir)?;
    println!("second run reused {:?}; same output: {}", again.session.resumed, again.denoised_hash == m.denoised_hash);
    Ok(())
}
