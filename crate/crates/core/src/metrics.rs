//! Reconstruction scoring.
//!
//! A reconstructed batch has no inherent order (the averaged gradient is
//! permutation-invariant), so scoring first solves a minimum-MSE assignment
//! between reconstructions and ground truth, then aggregates per-pair
//! metrics. Aggregation iterates in ground-truth order, which makes every
//! aggregate exactly invariant to shuffling the reconstructions.

use crate::error::{Error, Result};
use crate::tensor::Tensor;

/// Per-pair scores. PSNR assumes unit dynamic range and is capped at 100 dB
/// for effectively-zero MSE.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct MetricSet {
    pub mse: f64,
    pub rmse: f64,
    pub psnr: f64,
    pub ssim: f64,
}

/// Mean and population standard deviation of one metric over a batch.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct Aggregate {
    pub mean: f64,
    pub std: f64,
}

fn aggregate(values: &[f64]) -> Aggregate {
    let n = values.len() as f64;
    let mean = values.iter().sum::<f64>() / n;
    let var = values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / n;
    Aggregate { mean, std: var.sqrt() }
}

/// Batch-level report: per-metric aggregates, the reconstruction rate at a
/// PSNR threshold, and the matching that produced them.
#[derive(Debug, Clone)]
pub struct BatchMetrics {
    pub mse: Aggregate,
    pub rmse: Aggregate,
    pub psnr: Aggregate,
    pub ssim: Aggregate,
    /// Fraction of matched pairs with PSNR strictly above the threshold.
    pub recr: f64,
    /// `matching[i]` is the ground-truth index assigned to reconstruction `i`.
    pub matching: Vec<usize>,
    /// Scores in ground-truth order.
    pub per_pair: Vec<MetricSet>,
}

const PSNR_CAP_DB: f64 = 100.0;
const PSNR_CAP_MSE: f64 = 1e-10;
const SSIM_C1: f64 = 0.01 * 0.01;
const SSIM_C2: f64 = 0.03 * 0.03;
const SSIM_WINDOW: usize = 8;

fn clamped(data: &[f64]) -> Vec<f64> {
    data.iter().map(|v| v.clamp(0.0, 1.0)).collect()
}

/// Exact minimum-cost assignment on a square cost matrix (Jonker-Volgenant
/// style shortest augmenting paths with potentials). Returns the column
/// assigned to each row.
fn hungarian(cost: &[Vec<f64>]) -> Vec<usize> {
    let n = cost.len();
    // 1-indexed potentials; way[j] remembers the augmenting path.
    let mut u = vec![0.0f64; n + 1];
    let mut v = vec![0.0f64; n + 1];
    let mut assignment = vec![0usize; n + 1]; // assignment[col] = row
    let mut way = vec![0usize; n + 1];
    for i in 1..=n {
        assignment[0] = i;
        let mut j0 = 0usize;
        let mut minv = vec![f64::INFINITY; n + 1];
        let mut used = vec![false; n + 1];
        loop {
            used[j0] = true;
            let i0 = assignment[j0];
            let mut delta = f64::INFINITY;
            let mut j1 = 0usize;
            for j in 1..=n {
                if used[j] {
                    continue;
                }
                let cur = cost[i0 - 1][j - 1] - u[i0] - v[j];
                if cur < minv[j] {
                    minv[j] = cur;
                    way[j] = j0;
                }
                if minv[j] < delta {
                    delta = minv[j];
                    j1 = j;
                }
            }
            for j in 0..=n {
                if used[j] {
                    u[assignment[j]] += delta;
                    v[j] -= delta;
                } else {
                    minv[j] -= delta;
                }
            }
            j0 = j1;
            if assignment[j0] == 0 {
                break;
            }
        }
        loop {
            let j1 = way[j0];
            assignment[j0] = assignment[j1];
            j0 = j1;
            if j0 == 0 {
                break;
            }
        }
    }
    let mut row_to_col = vec![0usize; n];
    for j in 1..=n {
        if assignment[j] != 0 {
            row_to_col[assignment[j] - 1] = j - 1;
        }
    }
    row_to_col
}

fn pair_mse(a: &[f64], b: &[f64]) -> f64 {
    let n = a.len() as f64;
    a.iter().zip(b.iter()).map(|(x, y)| (x - y) * (x - y)).sum::<f64>() / n
}

/// Minimum-total-MSE matching: `result[i]` is the ground-truth index paired
/// with reconstruction `i`.
pub fn match_batch(recon: &[Tensor], truth: &[Tensor]) -> Result<Vec<usize>> {
    if recon.is_empty() || recon.len() != truth.len() {
        return Err(Error::invalid(format!(
            "matching needs equal nonempty batches, got {}/{}",
            recon.len(),
            truth.len()
        )));
    }
    for (i, (r, t)) in recon.iter().zip(truth.iter()).enumerate() {
        if r.shape() != truth[0].shape() || t.shape() != truth[0].shape() {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("image {i} shape mismatch in match_batch"),
            });
        }
    }
    let clamped_recon: Vec<Vec<f64>> = recon.iter().map(|t| clamped(t.data())).collect();
    let clamped_truth: Vec<Vec<f64>> = truth.iter().map(|t| clamped(t.data())).collect();
    let cost: Vec<Vec<f64>> = clamped_recon
        .iter()
        .map(|r| clamped_truth.iter().map(|t| pair_mse(r, t)).collect())
        .collect();
    Ok(hungarian(&cost))
}

fn ssim_window(x: &[f64], y: &[f64]) -> f64 {
    let n = x.len() as f64;
    let mx = x.iter().sum::<f64>() / n;
    let my = y.iter().sum::<f64>() / n;
    let mut vx = 0.0;
    let mut vy = 0.0;
    let mut cov = 0.0;
    for (&a, &b) in x.iter().zip(y.iter()) {
        vx += (a - mx) * (a - mx);
        vy += (b - my) * (b - my);
        cov += (a - mx) * (b - my);
    }
    vx /= n;
    vy /= n;
    cov /= n;
    ((2.0 * mx * my + SSIM_C1) * (2.0 * cov + SSIM_C2)) / ((mx * mx + my * my + SSIM_C1) * (vx + vy + SSIM_C2))
}

fn ssim(recon: &[f64], truth: &[f64], c: usize, h: usize, w: usize) -> f64 {
    let mut total = 0.0;
    let mut windows = 0usize;
    let (wh, ww) = if h < SSIM_WINDOW || w < SSIM_WINDOW { (h, w) } else { (SSIM_WINDOW, SSIM_WINDOW) };
    let mut bx = Vec::with_capacity(wh * ww);
    let mut by = Vec::with_capacity(wh * ww);
    for ch in 0..c {
        let plane = ch * h * w;
        for oy in 0..=(h - wh) {
            for ox in 0..=(w - ww) {
                bx.clear();
                by.clear();
                for dy in 0..wh {
                    let row = plane + (oy + dy) * w + ox;
                    bx.extend_from_slice(&recon[row..row + ww]);
                    by.extend_from_slice(&truth[row..row + ww]);
                }
                total += ssim_window(&bx, &by);
                windows += 1;
            }
        }
    }
    total / windows as f64
}

/// Score one pair. Inputs are clamped to [0,1] before scoring.
pub fn score_pair(recon: &Tensor, truth: &Tensor) -> Result<MetricSet> {
    if recon.shape() != truth.shape() {
        return Err(Error::Shape {
            op: "mul",
            detail: format!("score_pair shapes differ: {:?} vs {:?}", recon.shape(), truth.shape()),
        });
    }
    let shape = recon.shape();
    let (c, h, w) = match shape.len() {
        3 => (shape[0], shape[1], shape[2]),
        2 => (1, shape[0], shape[1]),
        _ => {
            return Err(Error::Shape {
                op: "mul",
                detail: format!("score_pair expects image tensors, got {:?}", shape),
            })
        }
    };
    let r = clamped(recon.data());
    let t = clamped(truth.data());
    let mse = pair_mse(&r, &t);
    let rmse = mse.sqrt();
    let psnr = if mse < PSNR_CAP_MSE { PSNR_CAP_DB } else { 10.0 * (1.0 / mse).log10() };
    let ssim = ssim(&r, &t, c, h, w);
    Ok(MetricSet { mse, rmse, psnr, ssim })
}

/// Match, score, and aggregate a reconstructed batch against ground truth.
pub fn batch_report(recon: &[Tensor], truth: &[Tensor], psnr_threshold: f64) -> Result<BatchMetrics> {
    let matching = match_batch(recon, truth)?;
    let b = recon.len();
    // recon index paired with each truth index, for order-stable aggregation
    let mut recon_for_truth = vec![0usize; b];
    for (r, &t) in matching.iter().enumerate() {
        recon_for_truth[t] = r;
    }
    let per_pair: Vec<MetricSet> = (0..b)
        .map(|t| score_pair(&recon[recon_for_truth[t]], &truth[t]))
        .collect::<Result<_>>()?;

    let collect = |f: fn(&MetricSet) -> f64| -> Vec<f64> { per_pair.iter().map(f).collect() };
    let psnr_values = collect(|m| m.psnr);
    let hits = psnr_values.iter().filter(|&&p| p > psnr_threshold).count();

    Ok(BatchMetrics {
        mse: aggregate(&collect(|m| m.mse)),
        rmse: aggregate(&collect(|m| m.rmse)),
        psnr: aggregate(&psnr_values),
        ssim: aggregate(&collect(|m| m.ssim)),
        recr: hits as f64 / b as f64,
        matching,
        per_pair,
    })
}
