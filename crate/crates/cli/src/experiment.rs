//! End-to-end experiment runs: capture the averaged gradient of a hidden
//! batch, attack it, score the reconstruction, and emit reports.
//!
//! Outputs under the configured directory:
//!   report.csv                        one row per (method, seed)
//!   trace_<method>_s<seed>.csv        per-iteration loss and subset size
//!   recon_<method>_s<seed>_NN.pgm/ppm matched reconstructions, NN in
//!                                     ground-truth order
//!
//! Reports are assembled in memory and written through a temporary name, so
//! a failed run leaves nothing half-written. Runs across seeds can execute
//! in parallel, capped by GRADSENSE_THREADS; rows are sorted before writing
//! so the CSV bytes do not depend on completion order.

use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Mutex;

use rand::SeedableRng;
use rand_chacha::ChaCha20Rng;

use gradsense::attack::{run_dlg, run_magia, AttackConfig, AttackResult};
use gradsense::dataio::{read_cifar_bin, read_idx, synth_batch, write_image, ImageSet, ReportRow, SynthSpec};
use gradsense::metrics::batch_report;
use gradsense::tensor::Tensor;
use gradsense::victim::{ArchSpec, Label, LabeledBatch, VictimModel};

use crate::config::{DatasetSource, ExperimentConfig, MethodChoice};
use crate::CliError;

/// Thread cap for parallel runs; unset or unparsable means serial.
pub const THREADS_ENV: &str = "GRADSENSE_THREADS";

struct RunOutput {
    row: ReportRow,
    trace: String,
    trace_name: String,
    images: Vec<(String, Tensor)>,
}

fn clamp_image(t: &Tensor) -> Tensor {
    let data: Vec<f64> = t.data().iter().map(|v| v.clamp(0.0, 1.0)).collect();
    Tensor::new(t.shape().to_vec(), data).expect("shape preserved")
}

/// Sample the hidden batch for one run. Synthetic batches are generated from
/// the run seed; file-backed datasets are sampled without replacement with a
/// run-seeded generator.
fn hidden_batch_for_run(
    config: &ExperimentConfig,
    dataset: Option<&ImageSet>,
    seed: u64,
) -> Result<LabeledBatch, CliError> {
    match (&config.dataset, dataset) {
        (DatasetSource::Synth { pattern, shape, num_classes }, _) => {
            let spec = SynthSpec { shape: *shape, num_classes: *num_classes, pattern: *pattern, seed };
            synth_batch(&spec, config.batch_size).map_err(|e| CliError::runtime(e.to_string()))
        }
        (_, Some(set)) => {
            if set.len() < config.batch_size {
                return Err(CliError::runtime(format!(
                    "dataset has {} images, batch needs {}",
                    set.len(),
                    config.batch_size
                )));
            }
            let mut rng = ChaCha20Rng::seed_from_u64(seed);
            let mut picks = rand::seq::index::sample(&mut rng, set.len(), config.batch_size).into_vec();
            picks.sort_unstable();
            let images = picks.iter().map(|&i| set.images[i].clone()).collect();
            let labels = picks.iter().map(|&i| Label::Class(set.labels[i])).collect();
            LabeledBatch::new(images, labels).map_err(|e| CliError::runtime(e.to_string()))
        }
        _ => unreachable!("file datasets are loaded before runs start"),
    }
}

fn dataset_geometry(config: &ExperimentConfig, dataset: Option<&ImageSet>) -> Result<((usize, usize, usize), usize), CliError> {
    match (&config.dataset, dataset) {
        (DatasetSource::Synth { shape, num_classes, .. }, _) => Ok((*shape, *num_classes)),
        (_, Some(set)) => {
            if set.is_empty() {
                return Err(CliError::runtime("dataset is empty"));
            }
            let s = set.images[0].shape();
            Ok(((s[0], s[1], s[2]), set.num_classes.max(2)))
        }
        _ => unreachable!("file datasets are loaded before runs start"),
    }
}

fn execute_run(
    config: &ExperimentConfig,
    dataset: Option<&ImageSet>,
    method: MethodChoice,
    seed: u64,
) -> Result<RunOutput, CliError> {
    let (shape, num_classes) = dataset_geometry(config, dataset)?;
    let arch = ArchSpec::parse(&config.arch, shape, num_classes).map_err(|e| CliError::config(e.to_string()))?;
    let model = VictimModel::init(arch, seed).map_err(|e| CliError::runtime(e.to_string()))?;
    let hidden = hidden_batch_for_run(config, dataset, seed)?;
    let target = model.sag_capture(&hidden).map_err(|e| CliError::runtime(e.to_string()))?;

    let attack_config = AttackConfig {
        batch_size: config.batch_size,
        iterations: config.iterations,
        alpha: config.alpha,
        tv_weight: config.tv_weight,
        schedule: config.schedule(),
        optimizer: config.optimizer,
        seed,
        clamp_images: config.clamp_images,
        record_every: config.record_every,
    };
    let context = |e: gradsense::Error| CliError::runtime(format!("{} seed {seed}: {e}", method.name()));
    let result: AttackResult = match method {
        MethodChoice::Magia => run_magia(&attack_config, &target, &model).map_err(context)?,
        MethodChoice::Dlg => run_dlg(&attack_config, &target, &model).map_err(context)?,
    };

    let report = batch_report(&result.final_images, &hidden.images, config.psnr_threshold)
        .map_err(|e| CliError::runtime(e.to_string()))?;

    // Reconstructed images named by the ground-truth slot they matched.
    let mut recon_for_truth = vec![0usize; config.batch_size];
    for (r, &t) in report.matching.iter().enumerate() {
        recon_for_truth[t] = r;
    }
    let ext = if shape.0 == 3 { "ppm" } else { "pgm" };
    let images = (0..config.batch_size)
        .map(|t| {
            let name = format!("recon_{}_s{seed}_{t:02}.{ext}", method.name());
            (name, clamp_image(&result.final_images[recon_for_truth[t]]))
        })
        .collect();

    let mut trace = String::from("iteration,total_loss,subset_size\n");
    for (i, loss) in result.loss_trace.iter().enumerate() {
        let s = result
            .per_iteration_s
            .get(i)
            .map(|s| s.to_string())
            .unwrap_or_else(|| "-".to_string());
        trace.push_str(&format!("{i},{},{s}\n", gradsense::dataio::fmt_sig6(*loss)));
    }

    let row = ReportRow {
        run_id: format!("{}-s{seed}", method.name()),
        method: method.name().to_string(),
        dataset: config.dataset.name(),
        batch_size: config.batch_size,
        arch: config.arch.clone(),
        strategy: config.strategy.name().to_string(),
        schedule_param: config.schedule_param(),
        alpha: config.alpha,
        tv_weight: config.tv_weight,
        iterations: config.iterations,
        optimizer: config.optimizer.name(),
        seed,
        rmse_mean: report.rmse.mean,
        rmse_std: report.rmse.std,
        psnr_mean: report.psnr.mean,
        psnr_std: report.psnr.std,
        ssim_mean: report.ssim.mean,
        ssim_std: report.ssim.std,
        recr: report.recr,
        final_loss: *result.loss_trace.last().unwrap_or(&f64::NAN),
        wall_time_s: result.iteration_seconds.iter().sum(),
    };

    Ok(RunOutput {
        row,
        trace,
        trace_name: format!("trace_{}_s{seed}.csv", method.name()),
        images,
    })
}

fn write_atomic(path: &Path, bytes: &[u8]) -> Result<(), CliError> {
    let tmp = path.with_extension("tmp");
    std::fs::write(&tmp, bytes).map_err(|e| CliError::runtime(format!("writing {}: {e}", tmp.display())))?;
    std::fs::rename(&tmp, path).map_err(|e| CliError::runtime(format!("renaming to {}: {e}", path.display())))
}

fn thread_cap(run_count: usize) -> usize {
    std::env::var(THREADS_ENV)
        .ok()
        .and_then(|v| v.parse::<usize>().ok())
        .filter(|&n| n >= 1)
        .unwrap_or(1)
        .min(run_count.max(1))
}

/// Run every (method, seed) combination and write all artifacts.
pub fn run_experiment(config: &ExperimentConfig) -> Result<PathBuf, CliError> {
    std::fs::create_dir_all(&config.out)
        .map_err(|e| CliError::runtime(format!("cannot create output dir {}: {e}", config.out.display())))?;
    // Probe writability up front so no run starts against a dead sink.
    let probe = config.out.join(".write_probe.tmp");
    std::fs::write(&probe, b"probe").map_err(|e| CliError::runtime(format!("output dir not writable: {e}")))?;
    let _ = std::fs::remove_file(&probe);

    let dataset = match &config.dataset {
        DatasetSource::Synth { .. } => None,
        DatasetSource::Idx { images, labels } => {
            Some(read_idx(images, labels).map_err(|e| CliError::runtime(e.to_string()))?)
        }
        DatasetSource::Cifar { path, variant } => {
            Some(read_cifar_bin(path, *variant).map_err(|e| CliError::runtime(e.to_string()))?)
        }
    };

    let mut runs: Vec<(MethodChoice, u64)> = Vec::new();
    for &method in &config.methods {
        for &seed in &config.seeds {
            runs.push((method, seed));
        }
    }
    runs.sort_by_key(|&(m, s)| (m.name(), s));

    let outputs: Mutex<Vec<Option<RunOutput>>> = Mutex::new((0..runs.len()).map(|_| None).collect());
    let next = AtomicUsize::new(0);
    let failure: Mutex<Option<CliError>> = Mutex::new(None);
    let workers = thread_cap(runs.len());

    std::thread::scope(|scope| {
        for _ in 0..workers {
            scope.spawn(|| loop {
                let idx = next.fetch_add(1, Ordering::SeqCst);
                if idx >= runs.len() || failure.lock().unwrap().is_some() {
                    return;
                }
                let (method, seed) = runs[idx];
                match execute_run(config, dataset.as_ref(), method, seed) {
                    Ok(output) => outputs.lock().unwrap()[idx] = Some(output),
                    Err(err) => {
                        let mut slot = failure.lock().unwrap();
                        if slot.is_none() {
                            *slot = Some(err);
                        }
                        return;
                    }
                }
            });
        }
    });

    if let Some(err) = failure.into_inner().unwrap() {
        return Err(err);
    }
    let outputs: Vec<RunOutput> = outputs
        .into_inner()
        .unwrap()
        .into_iter()
        .map(|o| o.expect("all runs completed"))
        .collect();

    let mut rows = Vec::with_capacity(outputs.len());
    for output in &outputs {
        write_atomic(&config.out.join(&output.trace_name), output.trace.as_bytes())?;
        for (name, image) in &output.images {
            write_image(image, &config.out.join(name)).map_err(|e| CliError::runtime(e.to_string()))?;
        }
        rows.push(output.row.clone());
    }

    let report_path = config.out.join("report.csv");
    let rendered = gradsense::dataio::render_csv_report(&rows).map_err(|e| CliError::runtime(e.to_string()))?;
    write_atomic(&report_path, rendered.as_bytes())?;
    Ok(report_path)
}
