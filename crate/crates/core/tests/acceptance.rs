//! One line per acceptance criterion; exits nonzero if any fails.
//! `ACCEPTANCE_JOBS` sets the fold parallelism of the training checks.

use std::path::Path;
use std::process::Command;
use std::time::Instant;

use orient_attn::verify::{self, CriterionResult, Scale};

const TRAIN_CONFIG: &str = r#"{
  "model": {"variant": "C", "input_size": 16, "channels": [4, 8, 8, 8]},
  "data": {"num_subjects": 4, "samples_per_subject": 8, "image_size": 16, "seed": 3},
  "epochs": 2,
  "batch_size": 8,
  "seed": 3
}"#;

/// Two `train` invocations of the built binary with one config; compares
/// the metrics CSV and every checkpoint byte for byte.
fn cli_determinism(scratch: &Path) -> Result<(bool, String), String> {
    let config = scratch.join("config.json");
    std::fs::write(&config, TRAIN_CONFIG).map_err(|e| e.to_string())?;
    let runs = [scratch.join("a"), scratch.join("b")];
    for (out, jobs) in runs.iter().zip(["1", "2"]) {
        let o = Command::new(env!("CARGO_BIN_EXE_orient-attn"))
            .arg("train")
            .arg("--config")
            .arg(&config)
            .arg("--out")
            .arg(out)
            .args(["--jobs", jobs])
            .env_remove("ORIENT_ATTN_SEED")
            .output()
            .map_err(|e| e.to_string())?;
        if !o.status.success() {
            return Err(format!(
                "train exited with {}: {}",
                o.status,
                String::from_utf8_lossy(&o.stderr)
            ));
        }
    }
    let mut files = vec!["metrics.csv".to_string()];
    let mut ckpts: Vec<String> = std::fs::read_dir(runs[0].join("checkpoints"))
        .map_err(|e| e.to_string())?
        .filter_map(|e| e.ok())
        .map(|e| format!("checkpoints/{}", e.file_name().to_string_lossy()))
        .collect();
    ckpts.sort();
    if ckpts.is_empty() {
        return Ok((false, "no checkpoints written".into()));
    }
    files.extend(ckpts);
    for f in &files {
        let read = |d: &Path| std::fs::read(d.join(f)).map_err(|e| format!("{f}: {e}"));
        if read(&runs[0])? != read(&runs[1])? {
            return Ok((false, format!("{f} differs")));
        }
    }
    Ok((
        true,
        format!("{} files identical across two invocations", files.len()),
    ))
}

fn main() {
    let scale = Scale {
        jobs: std::env::var("ACCEPTANCE_JOBS")
            .ok()
            .and_then(|j| j.parse().ok())
            .unwrap_or(1),
        ..Scale::default()
    };
    let scratch = tempfile::tempdir().expect("temp dir");
    let mut results: Vec<CriterionResult> = Vec::new();
    let mut report = |r: CriterionResult| {
        println!("{}", r.line());
        results.push(r);
    };

    report(verify::gradients());
    report(verify::vertical_degeneration());
    let started = Instant::now();
    match verify::vertical_b_runs(&scale) {
        Ok(b_runs) => {
            report(verify::theta_convergence(&b_runs, started));
            report(verify::axis_recovery(&scale));
            report(verify::frozen_axis(&scale, &b_runs));
        }
        Err(e) => {
            for (id, name) in [
                (3, "θ convergence"),
                (4, "axis recovery"),
                (5, "mis-frozen axis"),
            ] {
                report(CriterionResult {
                    id,
                    name,
                    passed: false,
                    detail: format!("error: {e}"),
                    seconds: 0.0,
                });
            }
        }
    }
    report(verify::param_accounting());
    report(verify::geometry_invariants());

    let start = Instant::now();
    let (passed, detail) =
        cli_determinism(scratch.path()).unwrap_or_else(|e| (false, format!("error: {e}")));
    report(CriterionResult {
        id: 8,
        name: "determinism",
        passed,
        detail,
        seconds: start.elapsed().as_secs_f64(),
    });

    let failed: Vec<u8> = results.iter().filter(|r| !r.passed).map(|r| r.id).collect();
    if failed.is_empty() {
        println!("acceptance: all {} criteria passed", results.len());
    } else {
        println!(
            "acceptance: {} of {} criteria failed: {failed:?}",
            failed.len(),
            results.len()
        );
        std::process::exit(1);
    }
}
