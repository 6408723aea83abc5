//! Loss mathematics for the attacks.
//!
//! Everything here builds graph nodes: the plain gradient-matching
//! discrepancy used by DLG, the subset-mean surrogate, the adaptive
//! combinatorial coefficient that rescales the mixed objective, the smoothed
//! total-variation prior, and the subset-size schedules.

use num_bigint::BigUint;
use num_integer::Integer;
use num_traits::ToPrimitive;
use rand::Rng;

use crate::autodiff::{Graph, NodeId};
use crate::error::{Error, Result};
use crate::tensor::Tensor;
use crate::victim::{TargetGradient, VictimModel};

/// Exact binomial coefficient.
pub fn binomial(n: u64, k: u64) -> BigUint {
    if k > n {
        return BigUint::from(0u32);
    }
    let k = k.min(n - k);
    let mut res = BigUint::from(1u32);
    for i in 0..k {
        res = res * BigUint::from(n - i) / BigUint::from(i + 1);
    }
    res
}

/// The rescaling factor `2 C(B-1, S-1) / (C(B, S) S^2)`, evaluated with
/// exact integer combinatorics and reduced before conversion. Equal to
/// `2 / (B S)`.
pub fn adaptive_coefficient(b: usize, s: usize) -> Result<f64> {
    if b == 0 || s == 0 || s > b {
        return Err(Error::invalid(format!("subset size {s} out of range for batch {b}")));
    }
    if b > 10_000 {
        return Err(Error::invalid(format!("batch size {b} exceeds the 10^4 coefficient guard")));
    }
    let num = BigUint::from(2u32) * binomial(b as u64 - 1, s as u64 - 1);
    let den = binomial(b as u64, s as u64) * BigUint::from((s * s) as u64);
    let g = num.gcd(&den);
    let num = &num / &g;
    let den = &den / &g;
    Ok(num.to_f64().expect("reduced numerator fits f64") / den.to_f64().expect("reduced denominator fits f64"))
}

/// Subset-size strategies, in the order they are usually compared.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Strategy {
    /// Fixed S for every iteration.
    Constant,
    /// S = ceil(B (e+1) / E).
    FracTotal,
    /// S = ceil(B (e+1) / Escript) with a settable denominator.
    FracConst,
    /// S = ceil(B (1 - e/E)).
    RevTotal,
    /// S = ceil(B (1 - e/Escript)) with a settable denominator.
    RevConst,
}

impl Strategy {
    pub const ALL: [Strategy; 5] =
        [Strategy::Constant, Strategy::FracTotal, Strategy::FracConst, Strategy::RevTotal, Strategy::RevConst];

    pub fn name(&self) -> &'static str {
        match self {
            Strategy::Constant => "constant",
            Strategy::FracTotal => "frac_total",
            Strategy::FracConst => "frac_const",
            Strategy::RevTotal => "rev_total",
            Strategy::RevConst => "rev_const",
        }
    }

    pub fn parse(s: &str) -> Result<Strategy> {
        match s {
            "constant" => Ok(Strategy::Constant),
            "frac_total" => Ok(Strategy::FracTotal),
            "frac_const" => Ok(Strategy::FracConst),
            "rev_total" => Ok(Strategy::RevTotal),
            "rev_const" => Ok(Strategy::RevConst),
            other => Err(Error::invalid(format!(
                "unknown strategy `{other}`; allowed: constant, frac_total, frac_const, rev_total, rev_const"
            ))),
        }
    }
}

/// Fully-specified subset-size schedule.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScheduleSpec {
    pub strategy: Strategy,
    /// S for the constant strategy.
    pub constant_s: usize,
    /// The settable denominator for frac_const / rev_const.
    pub e_script: usize,
    /// Total iteration count E.
    pub total_iters: usize,
}

impl ScheduleSpec {
    pub fn constant(s: usize, total_iters: usize) -> ScheduleSpec {
        ScheduleSpec { strategy: Strategy::Constant, constant_s: s, e_script: total_iters.max(1), total_iters }
    }

    pub fn validate(&self, b: usize) -> Result<()> {
        if self.total_iters == 0 {
            return Err(Error::invalid("schedule needs total_iters >= 1"));
        }
        match self.strategy {
            Strategy::Constant => {
                if self.constant_s == 0 || self.constant_s > b {
                    return Err(Error::invalid(format!(
                        "constant strategy needs 0 < S <= B, got S={} B={b}",
                        self.constant_s
                    )));
                }
            }
            Strategy::FracConst | Strategy::RevConst => {
                if self.e_script == 0 {
                    return Err(Error::invalid("frac_const/rev_const need e_script >= 1"));
                }
            }
            _ => {}
        }
        Ok(())
    }
}

fn div_ceil_i128(num: i128, den: i128) -> i128 {
    debug_assert!(den > 0);
    num.div_euclid(den) + if num.rem_euclid(den) != 0 { 1 } else { 0 }
}

/// Subset size for iteration `e`, clamped to `[1, B]`.
pub fn schedule_subset_size(spec: &ScheduleSpec, e: usize, b: usize) -> usize {
    let (b_i, e_i) = (b as i128, e as i128);
    let raw = match spec.strategy {
        Strategy::Constant => spec.constant_s as i128,
        Strategy::FracTotal => div_ceil_i128(b_i * (e_i + 1), spec.total_iters as i128),
        Strategy::FracConst => div_ceil_i128(b_i * (e_i + 1), spec.e_script as i128),
        Strategy::RevTotal => div_ceil_i128(b_i * (spec.total_iters as i128 - e_i), spec.total_iters as i128),
        Strategy::RevConst => div_ceil_i128(b_i * (spec.e_script as i128 - e_i), spec.e_script as i128),
    };
    raw.clamp(1, b_i) as usize
}

/// A strictly increasing set of sample indices inside a batch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct SubsetIndexSet {
    indices: Vec<usize>,
}

impl SubsetIndexSet {
    pub fn new(indices: Vec<usize>, b: usize) -> Result<Self> {
        if indices.is_empty() || indices.len() > b {
            return Err(Error::invalid(format!("subset size {} out of range for batch {b}", indices.len())));
        }
        for w in indices.windows(2) {
            if w[0] >= w[1] {
                return Err(Error::invalid("subset indices must be strictly increasing"));
            }
        }
        if *indices.last().unwrap() >= b {
            return Err(Error::invalid(format!("subset index {} out of range for batch {b}", indices.last().unwrap())));
        }
        Ok(SubsetIndexSet { indices })
    }

    pub fn full(b: usize) -> Self {
        SubsetIndexSet { indices: (0..b).collect() }
    }

    pub fn indices(&self) -> &[usize] {
        &self.indices
    }

    pub fn size(&self) -> usize {
        self.indices.len()
    }
}

/// Uniform random S-subset of `{0..B-1}`, without replacement.
pub fn sample_subset<R: Rng>(rng: &mut R, b: usize, s: usize) -> Result<SubsetIndexSet> {
    if s == 0 || s > b {
        return Err(Error::invalid(format!("subset size {s} out of range for batch {b}")));
    }
    let mut indices = rand::seq::index::sample(rng, b, s).into_vec();
    indices.sort_unstable();
    SubsetIndexSet::new(indices, b)
}

/// Momentum and prior weights of the mixed objective.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MixParams {
    /// Momentum coefficient weighting the whole-batch term.
    pub alpha: f64,
    /// Total-variation prior weight.
    pub tv_weight: f64,
}

impl MixParams {
    pub fn new(alpha: f64, tv_weight: f64) -> Result<Self> {
        if !(0.0..=1.0).contains(&alpha) {
            return Err(Error::invalid(format!("alpha must lie in [0,1], got {alpha}")));
        }
        if tv_weight < 0.0 || !tv_weight.is_finite() {
            return Err(Error::invalid(format!("tv_weight must be nonnegative, got {tv_weight}")));
        }
        Ok(MixParams { alpha, tv_weight })
    }
}

/// Split the observed gradient into per-parameter constant nodes matching the
/// model's canonical flattening.
pub fn bind_target(graph: &mut Graph, target: &TargetGradient, model: &VictimModel) -> Result<Vec<NodeId>> {
    if target.len() != model.param_count() {
        return Err(Error::invalid(format!(
            "target gradient has {} entries, model has {} parameters",
            target.len(),
            model.param_count()
        )));
    }
    let mut nodes = Vec::new();
    let mut off = 0;
    for shape in model.arch().param_shapes() {
        let n: usize = shape.iter().product();
        let t = Tensor::new(shape, target.values()[off..off + n].to_vec())?;
        nodes.push(graph.constant(t));
        off += n;
    }
    Ok(nodes)
}

/// Mean of the selected per-sample gradient node lists, one node per
/// parameter tensor. Samples fold in ascending index order.
pub fn mean_of_grads(graph: &mut Graph, per_sample: &[Vec<NodeId>], indices: &[usize]) -> Result<Vec<NodeId>> {
    if indices.is_empty() {
        return Err(Error::invalid("gradient mean over an empty selection"));
    }
    let tensors = per_sample[indices[0]].len();
    let mut out = Vec::with_capacity(tensors);
    for t in 0..tensors {
        let mut acc = per_sample[indices[0]][t];
        for &i in &indices[1..] {
            acc = graph.add(acc, per_sample[i][t])?;
        }
        out.push(graph.scale(acc, 1.0 / indices.len() as f64)?);
    }
    Ok(out)
}

/// Squared Euclidean distance between a gradient node list and the bound
/// target, summed over every parameter tensor.
pub fn dlg_loss(graph: &mut Graph, dummy_mean_grad: &[NodeId], target: &[NodeId]) -> Result<NodeId> {
    if dummy_mean_grad.len() != target.len() {
        return Err(Error::invalid(format!(
            "gradient has {} tensors, target has {}",
            dummy_mean_grad.len(),
            target.len()
        )));
    }
    let mut total: Option<NodeId> = None;
    for (&g, &t) in dummy_mean_grad.iter().zip(target.iter()) {
        let diff = graph.subtract(g, t)?;
        let sq = graph.scalar_power(diff, 2.0)?;
        let s = graph.sum(sq)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, s)?,
            None => s,
        });
    }
    total.ok_or_else(|| Error::invalid("empty gradient list"))
}

/// `|| (1/S) sum_{j in subset} grad_j  -  g* ||^2` over freshly built
/// per-sample gradients of the dummy batch.
pub fn subset_loss(
    graph: &mut Graph,
    model: &VictimModel,
    params: &[NodeId],
    dummy_images: &[NodeId],
    dummy_label_dists: &[NodeId],
    subset: &SubsetIndexSet,
    target: &[NodeId],
) -> Result<NodeId> {
    if subset.indices().last().copied().unwrap_or(0) >= dummy_images.len() {
        return Err(Error::invalid("subset index out of range for the dummy batch"));
    }
    let per_sample = model.per_sample_gradient_nodes(graph, params, dummy_images, dummy_label_dists)?;
    let mean = mean_of_grads(graph, &per_sample, subset.indices())?;
    dlg_loss(graph, &mean, target)
}

const TV_EPS: f64 = 1e-8;

/// Smoothed isotropic total variation: per pixel with at least one forward
/// neighbor, `sqrt(dh^2 + dv^2 + eps)`, summed over channels and images.
/// Built from difference matrices so it stays differentiable everywhere.
pub fn tv_prior(graph: &mut Graph, images: &[NodeId]) -> Result<NodeId> {
    if images.is_empty() {
        return Err(Error::invalid("tv_prior needs at least one image"));
    }
    let shape = graph.shape(images[0]).to_vec();
    if shape.len() != 3 || shape[1] < 2 || shape[2] < 2 {
        return Err(Error::Shape {
            op: "mul",
            detail: format!("tv_prior needs (channels, H>=2, W>=2) images, got {:?}", shape),
        });
    }
    let (c, h, w) = (shape[0], shape[1], shape[2]);

    // Row j of dw maps x -> x[j+1] - x[j]; the last row is zero so the
    // horizontal difference field keeps the full (C*H, W) shape.
    let mut dw = vec![0.0; w * w];
    for j in 0..w - 1 {
        dw[j * w + j] = -1.0;
        dw[j * w + j + 1] = 1.0;
    }
    let dw = graph.constant(Tensor::new(vec![w, w], dw)?);

    // Block-diagonal vertical differences: within each channel's H-row block,
    // row i maps to x[i+1, :] - x[i, :]; last row of each block is zero.
    let ch = c * h;
    let mut dv = vec![0.0; ch * ch];
    for cc in 0..c {
        for i in 0..h - 1 {
            let r = cc * h + i;
            dv[r * ch + r] = -1.0;
            dv[r * ch + r + 1] = 1.0;
        }
    }
    let dv = graph.constant(Tensor::new(vec![ch, ch], dv)?);

    // Every pixel with a horizontal or vertical neighbor contributes; the
    // bottom-right corner of each channel has neither.
    let mut mask = vec![1.0; ch * w];
    for cc in 0..c {
        mask[(cc * h + h - 1) * w + w - 1] = 0.0;
    }
    let mask = graph.constant(Tensor::new(vec![ch, w], mask)?);
    let eps = graph.constant(Tensor::full(vec![ch, w], TV_EPS));

    let mut total: Option<NodeId> = None;
    for &img in images {
        if graph.shape(img) != shape.as_slice() {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("tv_prior images must share a shape: {:?} vs {:?}", graph.shape(img), shape),
            });
        }
        let x2 = graph.reshape(img, vec![ch, w])?;
        let dh_field = graph.matmul_t(x2, dw, false, true)?;
        let dv_field = graph.matmul(dv, x2)?;
        let dh2 = graph.scalar_power(dh_field, 2.0)?;
        let dv2 = graph.scalar_power(dv_field, 2.0)?;
        let mag = graph.add(dh2, dv2)?;
        let shifted = graph.add(mag, eps)?;
        let root = graph.scalar_power(shifted, 0.5)?;
        let masked = graph.mul(mask, root)?;
        let s = graph.sum(masked)?;
        total = Some(match total {
            Some(acc) => graph.add(acc, s)?,
            None => s,
        });
    }
    Ok(total.expect("images nonempty"))
}

/// The full mixed objective:
/// `coeff(B,S) * (alpha * dlg + (1-alpha) * subset) + tv_weight * tv`.
/// The prior node is only built when its weight is nonzero.
pub fn magia_total(
    graph: &mut Graph,
    model: &VictimModel,
    params: &[NodeId],
    dummy_images: &[NodeId],
    dummy_label_dists: &[NodeId],
    subset: &SubsetIndexSet,
    target: &[NodeId],
    mix: &MixParams,
) -> Result<NodeId> {
    let b = dummy_images.len();
    let coeff = adaptive_coefficient(b, subset.size())?;
    let per_sample = model.per_sample_gradient_nodes(graph, params, dummy_images, dummy_label_dists)?;

    let all: Vec<usize> = (0..b).collect();
    let full_mean = mean_of_grads(graph, &per_sample, &all)?;
    let global = dlg_loss(graph, &full_mean, target)?;

    let subset_mean = mean_of_grads(graph, &per_sample, subset.indices())?;
    let local = dlg_loss(graph, &subset_mean, target)?;

    let weighted_global = graph.scale(global, mix.alpha)?;
    let weighted_local = graph.scale(local, 1.0 - mix.alpha)?;
    let mixed = graph.add(weighted_global, weighted_local)?;
    let scaled = graph.scale(mixed, coeff)?;

    if mix.tv_weight > 0.0 {
        let tv = tv_prior(graph, dummy_images)?;
        let tvw = graph.scale(tv, mix.tv_weight)?;
        graph.add(scaled, tvw)
    } else {
        Ok(scaled)
    }
}

/// The baseline objective: `dlg + tv_weight * tv`, with the gradient term
/// assembled from per-sample gradients exactly like the mixed objective's
/// global term.
pub fn dlg_total(
    graph: &mut Graph,
    model: &VictimModel,
    params: &[NodeId],
    dummy_images: &[NodeId],
    dummy_label_dists: &[NodeId],
    target: &[NodeId],
    tv_weight: f64,
) -> Result<NodeId> {
    let b = dummy_images.len();
    let per_sample = model.per_sample_gradient_nodes(graph, params, dummy_images, dummy_label_dists)?;
    let all: Vec<usize> = (0..b).collect();
    let mean = mean_of_grads(graph, &per_sample, &all)?;
    let loss = dlg_loss(graph, &mean, target)?;
    if tv_weight > 0.0 {
        let tv = tv_prior(graph, dummy_images)?;
        let tvw = graph.scale(tv, tv_weight)?;
        graph.add(loss, tvw)
    } else {
        Ok(loss)
    }
}
