use std::path::Path;
use std::process::Command;

use ddm2::backbone::NetworkSize;
use ddm2::evalsim::{NoiseModel, PhantomSpec};
use ddm2::pipeline::{InputConfig, MANIFEST_FILE, PipelineConfig, RunManifest, run_pipeline, run_pipeline_with};
use ddm2::schedule::ScheduleParams;
use serde_json::Value;

const TINY: NetworkSize = NetworkSize { depth: 2, base_width: 8 };

fn tiny_config(seed: u64) -> PipelineConfig {
    let mut cfg = PipelineConfig::from_json_str(r#"{"input": {"kind": "file", "path": "x", "format": "nifti1"}, "schedule": {"T": 200}}"#)
        .unwrap();
    cfg.seed = seed;
    cfg.input = InputConfig::Phantom {
        spec: PhantomSpec::brain([16, 16, 2, 4], NoiseModel::Gaussian { sigma: 0.08 }, 3),
    };
    cfg.schedule = ScheduleParams { steps: 200, ..Default::default() };
    cfg.stage1.steps = 15;
    cfg.stage1.batch = 2;
    cfg.stage1.network = TINY;
    cfg.stage3.steps = 15;
    cfg.stage3.batch = 2;
    cfg.stage3.network = TINY;
    cfg
}

fn write_config(dir: &Path, cfg: &PipelineConfig) -> std::path::PathBuf {
    let path = dir.join("config.json");
    std::fs::write(&path, serde_json::to_string_pretty(cfg).unwrap()).unwrap();
    path
}

fn without_session(path: &Path) -> Value {
    let mut v: Value = serde_json::from_str(&std::fs::read_to_string(path).unwrap()).unwrap();
    v.as_object_mut().unwrap().remove("session");
    v
}

#[test]
fn pipeline_runs_resumes_and_reproduces() {
    let dir = tempfile::tempdir().unwrap();
    let cfg_path = write_config(dir.path(), &tiny_config(5));
    let a = dir.path().join("a");
    let m = run_pipeline(&cfg_path, &a).unwrap();
    assert_eq!(m.fingerprint_count(), 4);
    assert!(m.metrics.is_some());
    for f in ["denoised.ddm2vol", "stage1.ckpt", "stage3.ckpt", "rmse_traces.csv", "outliers.csv", "metrics.csv"] {
        assert!(a.join(f).exists(), "{f}");
    }
    assert!(m.session.resumed.is_empty());

    let again = run_pipeline(&cfg_path, &a).unwrap();
    assert_eq!(again.session.resumed, ["stage1", "stage2", "stage3"]);
    assert_eq!(again.denoised_hash, m.denoised_hash);

    let b = dir.path().join("b");
    run_pipeline(&cfg_path, &b).unwrap();
    assert_eq!(without_session(&a.join(MANIFEST_FILE)), without_session(&b.join(MANIFEST_FILE)));
    let loaded = RunManifest::load(b.join(MANIFEST_FILE)).unwrap();
    assert_eq!(loaded.f_hash, m.f_hash);
}

#[test]
fn changing_a_stage_config_retrains_from_there() {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = tiny_config(1);
    run_pipeline_with(&cfg, dir.path()).unwrap();
    cfg.stage3.steps = 16;
    let m = run_pipeline_with(&cfg, dir.path()).unwrap();
    assert_eq!(m.session.resumed, ["stage1", "stage2"]);
}

fn ddm2(args: &[&str]) -> (i32, String, String) {
    let out = Command::new(env!("CARGO_BIN_EXE_ddm2")).args(args).output().unwrap();
    (
        out.status.code().unwrap(),
        String::from_utf8_lossy(&out.stdout).into_owned(),
        String::from_utf8_lossy(&out.stderr).into_owned(),
    )
}

fn error_json(stderr: &str) -> Value {
    let line = stderr.lines().rev().find(|l| l.starts_with('{')).expect("json error line");
    serde_json::from_str(line).unwrap()
}

#[test]
fn missing_schedule_t_is_a_config_error() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = dir.path().join("bad.json");
    std::fs::write(&cfg, r#"{"input": {"kind": "file", "path": "a.nii", "format": "nifti1"}, "schedule": {}}"#).unwrap();
    let (code, _, err) = ddm2(&["run", "--config", cfg.to_str().unwrap(), "--workdir", dir.path().to_str().unwrap()]);
    assert_eq!(code, 2);
    let e = error_json(&err);
    assert_eq!(e["error"], "ConfigInvalid");
    assert!(e["message"].as_str().unwrap().contains("schedule.T"));
}

#[test]
fn cli_reports_errors_as_json_with_exit_codes() {
    let (code, out, _) = ddm2(&["stage2-match", "--sigma", "0.05"]);
    assert_eq!(code, 0);
    assert!(out.contains("t_star=472"));
    let (code, _, err) = ddm2(&["stage2-match", "--sigma", "-1"]);
    assert_eq!(code, 2);
    assert_eq!(error_json(&err)["exit_code"], 2);
    let (code, _, err) = ddm2(&["ingest", "--input", "/nonexistent/x.nii", "--out", "/tmp/never.ddm2vol"]);
    assert_eq!(code, 3);
    assert!(error_json(&err)["error"].is_string());
    let (code, _, _) = ddm2(&["no-such-command"]);
    assert_eq!(code, 2);
}

#[test]
fn simulate_then_report() {
    let dir = tempfile::tempdir().unwrap();
    let sim = dir.path().join("sim");
    let (code, _, err) = ddm2(&["simulate", "--snr-levels", "4", "--coils", "4", "--seed", "2", "--out", sim.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    for i in 0..4 {
        assert!(sim.join(format!("noisy_level{i}.ddm2vol")).exists());
    }
    assert!(sim.join("clean.ddm2vol").exists());
    assert!(sim.join("masks.ddm2vol").exists());

    let run = dir.path().join("run");
    run_pipeline_with(&tiny_config(2), &run).unwrap();
    let (code, _, err) = ddm2(&["report", "--run", run.to_str().unwrap()]);
    assert_eq!(code, 0, "{err}");
    for f in ["schedules.csv", "schedule_beta.png", "delta_scores_box.png", "summary.json"] {
        assert!(run.join("report").join(f).exists(), "{f}");
    }
}

#[test]
fn locked_workdir_is_refused() {
    let dir = tempfile::tempdir().unwrap();
    let _lock = ddm2::pipeline::WorkdirLock::acquire(dir.path()).unwrap();
    let err = run_pipeline_with(&tiny_config(0), dir.path()).unwrap_err();
    assert_eq!(err.exit_code(), 2);
}
