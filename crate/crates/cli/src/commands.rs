//! The verify and bench subcommand bodies.

use std::path::{Path, PathBuf};

use serde::Serialize;

use gradsense::attack::{bench_methods, AttackConfig, BenchReport};
use gradsense::victim::{ArchSpec, VictimModel};

use crate::config::ExperimentConfig;
use crate::experiment;
use crate::CliError;

#[derive(Serialize)]
struct CheckRecord {
    name: String,
    passed: bool,
    detail: String,
}

#[derive(Serialize)]
struct VerifyReport {
    b_max: usize,
    trials: usize,
    seed: u64,
    all_passed: bool,
    checks: Vec<CheckRecord>,
}

/// Run the verification battery, print a pass/fail table, and write a JSON
/// report. Returns an error with the verification exit code when any
/// asserted check fails.
pub fn run_verify(b_max: usize, trials: usize, seed: u64, report_path: &Path) -> Result<(), CliError> {
    let checks = gradsense::verify::run_standard_checks(b_max, trials, seed)
        .map_err(|e| CliError::runtime(e.to_string()))?;

    let width = checks.iter().map(|c| c.name.len()).max().unwrap_or(0);
    for check in &checks {
        let mark = if check.passed { "PASS" } else { "FAIL" };
        println!("[{mark}] {:width$}  {}", check.name, check.detail);
    }
    let all_passed = checks.iter().all(|c| c.passed);

    let report = VerifyReport {
        b_max,
        trials,
        seed,
        all_passed,
        checks: checks
            .iter()
            .map(|c| CheckRecord { name: c.name.to_string(), passed: c.passed, detail: c.detail.clone() })
            .collect(),
    };
    let json = serde_json::to_string_pretty(&report)
        .map_err(|e| CliError::runtime(format!("serializing verify report: {e}")))?;
    if let Some(parent) = report_path.parent() {
        if !parent.as_os_str().is_empty() {
            std::fs::create_dir_all(parent)
                .map_err(|e| CliError::runtime(format!("cannot create {}: {e}", parent.display())))?;
        }
    }
    let tmp = report_path.with_extension("tmp");
    std::fs::write(&tmp, json.as_bytes()).map_err(|e| CliError::runtime(format!("writing {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, report_path)
        .map_err(|e| CliError::runtime(format!("renaming to {}: {e}", report_path.display())))?;
    println!("report written to {}", report_path.display());

    if all_passed {
        Ok(())
    } else {
        Err(CliError::verification("one or more verification checks failed"))
    }
}

/// Time both methods at the configured settings and print the per-iteration
/// means and their ratio.
pub fn run_bench(config: &ExperimentConfig, iterations: usize, seed: u64) -> Result<BenchReport, CliError> {
    let bench_config = ExperimentConfig { iterations, ..config.clone() };
    let (shape, num_classes) = match &bench_config.dataset {
        crate::config::DatasetSource::Synth { shape, num_classes, .. } => (*shape, *num_classes),
        _ => {
            return Err(CliError::config(
                "bench uses the synthetic dataset; set dataset = synth".to_string(),
            ))
        }
    };
    let arch = ArchSpec::parse(&bench_config.arch, shape, num_classes).map_err(|e| CliError::config(e.to_string()))?;
    let model = VictimModel::init(arch, seed).map_err(|e| CliError::runtime(e.to_string()))?;
    let hidden = gradsense::dataio::synth_batch(
        &gradsense::dataio::SynthSpec {
            shape,
            num_classes,
            pattern: match &bench_config.dataset {
                crate::config::DatasetSource::Synth { pattern, .. } => *pattern,
                _ => unreachable!(),
            },
            seed,
        },
        bench_config.batch_size,
    )
    .map_err(|e| CliError::runtime(e.to_string()))?;
    let target = model.sag_capture(&hidden).map_err(|e| CliError::runtime(e.to_string()))?;

    let attack_config = AttackConfig {
        batch_size: bench_config.batch_size,
        iterations,
        alpha: bench_config.alpha,
        tv_weight: bench_config.tv_weight,
        schedule: bench_config.schedule(),
        optimizer: bench_config.optimizer,
        seed,
        clamp_images: bench_config.clamp_images,
        record_every: 0,
    };
    let report = bench_methods(&attack_config, &target, &model).map_err(|e| CliError::runtime(e.to_string()))?;
    println!(
        "magia: {:.3} ms/iter   dlg: {:.3} ms/iter   ratio: {:.3}   ({} iterations)",
        1e3 * report.magia_mean_seconds,
        1e3 * report.dlg_mean_seconds,
        report.ratio,
        report.iterations
    );
    Ok(report)
}

/// Attack subcommand body: run the experiment and report where the CSV went.
pub fn run_attack(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    let report = experiment::run_experiment(config)?;
    println!("report written to {}", report.display());
    Ok(report)
}
