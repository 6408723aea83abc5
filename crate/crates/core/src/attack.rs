//! The attack engines.
//!
//! Both entry points see only the observed gradient, the model (architecture
//! plus weights, which the honest-but-curious server holds anyway), and a
//! config. The hidden batch type never crosses into this module; metrics and
//! the verifier receive it through their own interfaces.
//!
//! One iteration rebuilds the loss graph (the random subset is frozen inside
//! it), differentiates the total with respect to every dummy variable with
//! `create_graph`, and then lets the solver's line search re-evaluate value
//! and gradient nodes as pure functions of the dummy leaves.

use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::objective::{
    dlg_total, magia_total, sample_subset, schedule_subset_size, bind_target, MixParams, ScheduleSpec,
    SubsetIndexSet,
};
use crate::optim::{Evaluation, OptimizerChoice, OptimizerState};
use crate::tensor::Tensor;
use crate::victim::{ArchSpec, TargetGradient, VictimModel};

/// The attacker's optimization variables: one image tensor and one
/// unconstrained label-logit vector per batch slot.
#[derive(Debug, Clone)]
pub struct DummyBatch {
    pub images: Vec<Tensor>,
    pub label_logits: Vec<Tensor>,
}

impl DummyBatch {
    pub fn len(&self) -> usize {
        self.images.len()
    }

    pub fn is_empty(&self) -> bool {
        self.images.is_empty()
    }
}

/// Every knob of an attack run.
#[derive(Debug, Clone)]
pub struct AttackConfig {
    pub batch_size: usize,
    pub iterations: usize,
    pub alpha: f64,
    pub tv_weight: f64,
    pub schedule: ScheduleSpec,
    pub optimizer: OptimizerChoice,
    pub seed: u64,
    /// Project image variables back to [0,1] after every step.
    pub clamp_images: bool,
    /// Snapshot the image iterates every this many iterations (0 disables).
    pub record_every: usize,
}

impl AttackConfig {
    pub fn validate(&self) -> Result<()> {
        MixParams::new(self.alpha, self.tv_weight)?;
        self.schedule.validate(self.batch_size)?;
        if self.batch_size == 0 {
            return Err(Error::invalid("batch_size must be positive"));
        }
        Ok(())
    }
}

/// Image iterates captured mid-run.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub iteration: usize,
    pub images: Vec<Tensor>,
}

/// Everything a run produces.
#[derive(Debug, Clone)]
pub struct AttackResult {
    pub final_images: Vec<Tensor>,
    pub final_label_distributions: Vec<Vec<f64>>,
    /// Total-loss value at the end of each iteration.
    pub loss_trace: Vec<f64>,
    /// Subset size used at each iteration; empty for the baseline, which has
    /// no schedule.
    pub per_iteration_s: Vec<usize>,
    /// Wall time of each iteration in seconds (measurement, not reproducible).
    pub iteration_seconds: Vec<f64>,
    pub snapshots: Vec<Snapshot>,
    pub seed: u64,
}

/// Fresh dummy variables: image entries uniform in [0,1), label logits
/// standard normal, drawn in batch order (all images, then all logit
/// vectors). Deterministic per generator state.
pub fn init_dummy<R: Rng>(rng: &mut R, b: usize, arch: &ArchSpec) -> Result<DummyBatch> {
    if b == 0 {
        return Err(Error::invalid("dummy batch size must be positive"));
    }
    let (c, h, w) = arch.input_shape;
    let images = (0..b)
        .map(|_| Tensor::new(vec![c, h, w], (0..c * h * w).map(|_| rng.random_range(0.0..1.0)).collect()))
        .collect::<Result<Vec<_>>>()?;
    let label_logits = (0..b)
        .map(|_| {
            let data: Vec<f64> = (0..arch.num_classes)
                .map(|_| {
                    // Box-Muller; the offset keeps the log argument positive.
                    let u1: f64 = 1.0 - rng.random::<f64>();
                    let u2: f64 = rng.random::<f64>();
                    (-2.0 * u1.ln()).sqrt() * (std::f64::consts::TAU * u2).cos()
                })
                .collect();
            Tensor::new(vec![arch.num_classes, 1], data)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(DummyBatch { images, label_logits })
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Method {
    Magia,
    Dlg,
}

impl Method {
    fn name(&self) -> &'static str {
        match self {
            Method::Magia => "magia",
            Method::Dlg => "dlg",
        }
    }
}

/// Run the mixed-objective attack for `config.iterations` outer steps.
pub fn run_magia(config: &AttackConfig, g_star: &TargetGradient, model: &VictimModel) -> Result<AttackResult> {
    run(Method::Magia, config, g_star, model)
}

/// Run the plain gradient-matching baseline.
pub fn run_dlg(config: &AttackConfig, g_star: &TargetGradient, model: &VictimModel) -> Result<AttackResult> {
    run(Method::Dlg, config, g_star, model)
}

fn run(method: Method, config: &AttackConfig, g_star: &TargetGradient, model: &VictimModel) -> Result<AttackResult> {
    config.validate()?;
    if g_star.len() != model.param_count() {
        return Err(Error::invalid(format!(
            "target gradient has {} entries, model has {} parameters",
            g_star.len(),
            model.param_count()
        )));
    }
    if g_star.batch_size() != config.batch_size {
        return Err(Error::invalid(format!(
            "config batch size {} disagrees with the captured batch size {}",
            config.batch_size,
            g_star.batch_size()
        )));
    }

    let b = config.batch_size;
    let arch = model.arch();
    let (c, h, w) = arch.input_shape;
    let pixels_per_image = c * h * w;
    let image_span = b * pixels_per_image;

    let mut rng = ChaCha20Rng::seed_from_u64(config.seed);
    let mut dummy = init_dummy(&mut rng, b, arch)?;

    // Flat variable vector: all image data, then all logit vectors.
    let mut x: Vec<f64> = Vec::with_capacity(image_span + b * arch.num_classes);
    for img in &dummy.images {
        x.extend_from_slice(img.data());
    }
    for l in &dummy.label_logits {
        x.extend_from_slice(l.data());
    }

    let mix = MixParams::new(config.alpha, config.tv_weight)?;
    let mut optimizer = OptimizerState::new(config.optimizer, x.len());

    let mut loss_trace = Vec::with_capacity(config.iterations);
    let mut per_iteration_s = Vec::new();
    let mut iteration_seconds = Vec::with_capacity(config.iterations);
    let mut snapshots = Vec::new();

    for e in 0..config.iterations {
        let started = Instant::now();

        let mut graph = Graph::new();
        let params = model.bind_params(&mut graph);
        let mut leaves: Vec<NodeId> = Vec::with_capacity(2 * b);
        let mut image_nodes = Vec::with_capacity(b);
        for img in &dummy.images {
            let id = graph.leaf(img.clone(), true);
            leaves.push(id);
            image_nodes.push(id);
        }
        let mut logit_nodes = Vec::with_capacity(b);
        for logits in &dummy.label_logits {
            let id = graph.leaf(logits.clone(), true);
            leaves.push(id);
            logit_nodes.push(id);
        }
        let label_dists: Vec<NodeId> = logit_nodes
            .iter()
            .map(|&id| graph.softmax(id))
            .collect::<Result<_>>()?;
        let target_nodes = bind_target(&mut graph, g_star, model)?;

        let total = match method {
            Method::Magia => {
                let s = schedule_subset_size(&config.schedule, e, b);
                per_iteration_s.push(s);
                let subset: SubsetIndexSet = sample_subset(&mut rng, b, s)?;
                magia_total(&mut graph, model, &params, &image_nodes, &label_dists, &subset, &target_nodes, &mix)?
            }
            Method::Dlg => {
                dlg_total(&mut graph, model, &params, &image_nodes, &label_dists, &target_nodes, config.tv_weight)?
            }
        };
        let grad_nodes = graph.differentiate(total, &leaves, true)?;

        let mut eval_roots = vec![total];
        eval_roots.extend_from_slice(&grad_nodes);
        let mut objective = |vars: &[f64]| -> Result<Evaluation> {
            let mut off = 0;
            for &leaf in &leaves {
                let n = graph.leaf_data(leaf).numel();
                graph.set_leaf(leaf, &vars[off..off + n])?;
                off += n;
            }
            graph.eval_many(&eval_roots)?;
            let value = graph.value(total).expect("evaluated").item();
            let mut gradient = Vec::with_capacity(vars.len());
            for gid in &grad_nodes {
                gradient.extend_from_slice(graph.value(*gid).expect("evaluated").data());
            }
            Ok(Evaluation { value, gradient })
        };

        let outcome = optimizer.step(&mut objective, &mut x).map_err(|err| Error::AttackDiverged {
            iteration: e,
            detail: format!("{} run: {err}", method.name()),
        })?;

        if config.clamp_images {
            for v in x[..image_span].iter_mut() {
                *v = v.clamp(0.0, 1.0);
            }
        }

        // Write the accepted iterate back into the dummy tensors.
        let mut off = 0;
        for img in dummy.images.iter_mut() {
            let n = img.numel();
            img.data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        }
        for logits in dummy.label_logits.iter_mut() {
            let n = logits.numel();
            logits.data_mut().copy_from_slice(&x[off..off + n]);
            off += n;
        }

        loss_trace.push(outcome.value);
        iteration_seconds.push(started.elapsed().as_secs_f64());
        if config.record_every > 0 && e % config.record_every == 0 {
            snapshots.push(Snapshot { iteration: e, images: dummy.images.clone() });
        }
    }

    let final_label_distributions = dummy
        .label_logits
        .iter()
        .map(|logits| softmax_values(logits.data()))
        .collect();

    Ok(AttackResult {
        final_images: dummy.images,
        final_label_distributions,
        loss_trace,
        per_iteration_s,
        iteration_seconds,
        snapshots,
        seed: config.seed,
    })
}

fn softmax_values(logits: &[f64]) -> Vec<f64> {
    let max = logits.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let exps: Vec<f64> = logits.iter().map(|&z| (z - max).exp()).collect();
    let total: f64 = exps.iter().sum();
    exps.into_iter().map(|e| e / total).collect()
}

/// Mean per-iteration wall time of both methods at one config.
#[derive(Debug, Clone)]
pub struct BenchReport {
    pub magia_mean_seconds: f64,
    pub dlg_mean_seconds: f64,
    /// magia over dlg.
    pub ratio: f64,
    pub iterations: usize,
}

/// Run both attacks at the same config and compare per-iteration cost.
pub fn bench_methods(config: &AttackConfig, g_star: &TargetGradient, model: &VictimModel) -> Result<BenchReport> {
    let magia = run_magia(config, g_star, model)?;
    let dlg = run_dlg(config, g_star, model)?;
    let mean = |xs: &[f64]| xs.iter().sum::<f64>() / xs.len().max(1) as f64;
    let magia_mean_seconds = mean(&magia.iteration_seconds);
    let dlg_mean_seconds = mean(&dlg.iteration_seconds);
    Ok(BenchReport {
        magia_mean_seconds,
        dlg_mean_seconds,
        ratio: magia_mean_seconds / dlg_mean_seconds,
        iterations: config.iterations,
    })
}
