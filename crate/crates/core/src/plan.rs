//! The expected batch OT plan: coupling draws, expected batch cost, bias and
//! plan-gap estimators, cost-to-plan bounds and the 1D rank-coupling identity.
//!
//! Batch `b` of an estimator run uses the key `key.child(b)`; because
//! [`sample_batch`] draws sources and targets from fixed sub-streams, runs at
//! different `k` under one key share their batch prefixes (common random
//! numbers). Standard errors are always taken over batch-level averages.

use rayon::prelude::*;

use crate::assignment::{solve_batch_with, TransportSolver};
use crate::error::invalid;
use crate::measures::{sample_batch, sq_dist, AtomCloud, CoupledSample, GaussianSource, PairBatch, TargetMeasure};
use crate::rng::StreamKey;
use crate::semidiscrete::{nn_index, ReferenceTarget};
use crate::stats::mean_stderr;
use crate::Result;

#[derive(Debug, Clone, PartialEq)]
pub struct CostEstimate {
    pub k: usize,
    pub mean: f64,
    pub stderr: f64,
    pub n_batches: usize,
    pub total_pairs: usize,
    pub target_fingerprint: u64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct BiasEstimate {
    pub k: usize,
    pub bias: f64,
    pub stderr: f64,
    pub reference_w2sq: f64,
}

/// Per-batch quantities used by the rate experiments.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct BatchStats {
    /// Mean matched squared distance.
    pub cost: f64,
    /// `cost` minus the mean squared distance to the nearest atom.
    pub dual_gap: f64,
    /// Mean of `|v_y - v_nn(x)|^2` over matched pairs.
    pub plan_gap: f64,
}

/// Solves `n_batches` independent batches and maps each through `f`.
pub fn map_batches<T, F>(
    source: &GaussianSource,
    target: &TargetMeasure,
    k: usize,
    n_batches: usize,
    key: &StreamKey,
    f: F,
) -> Result<Vec<T>>
where
    T: Send,
    F: Fn(u64, &PairBatch, &[usize]) -> T + Sync,
{
    if k == 0 {
        return invalid("batch size must be at least 1");
    }
    (0..n_batches as u64)
        .into_par_iter()
        .map_init(TransportSolver::new, |ws, b| {
            let batch = sample_batch(source, target, k, &key.child(b))?;
            let res = solve_batch_with(&batch, target.cloud(), ws)?;
            Ok(f(b, &batch, &res.perm))
        })
        .collect()
}

/// Draws `n_pairs` pairs from the expected batch plan, emitting every matched
/// pair of each batch.
pub fn sample_plan(
    source: &GaussianSource,
    target: &TargetMeasure,
    k: usize,
    n_pairs: usize,
    key: &StreamKey,
) -> Result<Vec<CoupledSample>> {
    if n_pairs == 0 {
        return invalid("n_pairs must be at least 1");
    }
    let n_batches = n_pairs.div_ceil(k.max(1));
    let batches = map_batches(source, target, k, n_batches, key, |b, batch, perm| {
        (0..batch.len())
            .map(|i| CoupledSample {
                x: batch.x(i).to_vec(),
                y_index: batch.ys[perm[i]],
                batch_id: b,
                slot: i,
            })
            .collect::<Vec<_>>()
    })?;
    let mut out: Vec<CoupledSample> = batches.into_iter().flatten().collect();
    out.truncate(n_pairs);
    Ok(out)
}

/// Per-batch exact OT costs, in batch order.
pub fn batch_costs(
    source: &GaussianSource,
    target: &TargetMeasure,
    k: usize,
    n_batches: usize,
    key: &StreamKey,
) -> Result<Vec<f64>> {
    let cloud = target.cloud();
    map_batches(source, target, k, n_batches, key, |_, batch, perm| {
        (0..batch.len())
            .map(|i| sq_dist(batch.x(i), cloud.atom(batch.ys[perm[i]])))
            .sum::<f64>()
            / batch.len() as f64
    })
}

pub fn estimate_cost(
    source: &GaussianSource,
    target: &TargetMeasure,
    k: usize,
    n_batches: usize,
    key: &StreamKey,
) -> Result<CostEstimate> {
    if n_batches < 2 {
        return invalid("need at least 2 batches for a standard error");
    }
    let costs = batch_costs(source, target, k, n_batches, key)?;
    let (mean, stderr) = mean_stderr(&costs);
    Ok(CostEstimate {
        k,
        mean,
        stderr,
        n_batches,
        total_pairs: k * n_batches,
        target_fingerprint: target.fingerprint(),
    })
}

/// Bias as the cost estimate minus the reference value, with independent
/// errors added in quadrature.
pub fn estimate_bias(cost: &CostEstimate, reference: &ReferenceTarget) -> Result<BiasEstimate> {
    if cost.target_fingerprint != reference.target.fingerprint() {
        return invalid("cost estimate and reference were built on different targets");
    }
    Ok(BiasEstimate {
        k: cost.k,
        bias: cost.mean - reference.w2sq,
        stderr: cost.stderr.hypot(reference.w2sq_stderr),
        reference_w2sq: reference.w2sq,
    })
}

/// Cost, dual gap and plan gap of each batch drawn from the reference target.
pub fn batch_stats(
    source: &GaussianSource,
    reference: &ReferenceTarget,
    k: usize,
    n_batches: usize,
    key: &StreamKey,
) -> Result<Vec<BatchStats>> {
    let target = &reference.target;
    let cloud = target.cloud();
    map_batches(source, target, k, n_batches, key, |_, batch, perm| {
        let (mut cost, mut nn_cost, mut gap) = (0.0, 0.0, 0.0);
        for i in 0..batch.len() {
            let x = batch.x(i);
            let y = batch.ys[perm[i]];
            let j = nn_index(x, cloud);
            cost += sq_dist(x, cloud.atom(y));
            nn_cost += sq_dist(x, cloud.atom(j));
            gap += sq_dist(cloud.atom(y), cloud.atom(j));
        }
        let kf = batch.len() as f64;
        BatchStats {
            cost: cost / kf,
            dual_gap: (cost - nn_cost) / kf,
            plan_gap: gap / kf,
        }
    })
}

/// Bias estimated batch by batch as the exact batch cost minus the mean
/// squared distance of the same sources to their nearest atoms.
///
/// Each term is nonnegative and the pairing removes the source noise shared
/// by both; the estimator targets the bias against the nearest-atom masses,
/// which the reference weights approximate to `O(1/n_ref)` in cost.
pub fn estimate_bias_paired(
    source: &GaussianSource,
    reference: &ReferenceTarget,
    k: usize,
    n_batches: usize,
    key: &StreamKey,
) -> Result<BiasEstimate> {
    if n_batches < 2 {
        return invalid("need at least 2 batches for a standard error");
    }
    let stats = batch_stats(source, reference, k, n_batches, key)?;
    let gaps: Vec<f64> = stats.iter().map(|s| s.dual_gap).collect();
    let (bias, stderr) = mean_stderr(&gaps);
    Ok(BiasEstimate {
        k,
        bias,
        stderr,
        reference_w2sq: reference.w2sq,
    })
}

/// Mean of `|v_y - v_nn(x)|^2` over plan draws, an upper bound on the squared
/// distance between the expected batch plan and the OT plan.
///
/// Whole batches are used, so at least `n_pairs` pairs enter the average.
pub fn estimate_plan_gap_upper(
    source: &GaussianSource,
    target: &TargetMeasure,
    reference: &ReferenceTarget,
    k: usize,
    n_pairs: usize,
    key: &StreamKey,
) -> Result<(f64, f64)> {
    if target.fingerprint() != reference.target.fingerprint() {
        return invalid("target and reference differ");
    }
    if n_pairs == 0 {
        return invalid("n_pairs must be at least 1");
    }
    let n_batches = n_pairs.div_ceil(k.max(1)).max(2);
    let stats = batch_stats(source, reference, k, n_batches, key)?;
    let gaps: Vec<f64> = stats.iter().map(|s| s.plan_gap).collect();
    Ok(mean_stderr(&gaps))
}

/// `0.5 * (sqrt(cost_mean) - w2)^2`, or 0 when `sqrt(cost_mean) < w2`.
pub fn cost_to_plan_lower(cost_mean: f64, w2: f64) -> f64 {
    let r = cost_mean.max(0.0).sqrt();
    if r < w2 {
        0.0
    } else {
        0.5 * (r - w2) * (r - w2)
    }
}

/// `2 diam^2 (M(M-1) / (2 sqrt(2 pi) sep))^(1/2)`.
pub fn cost_to_plan_upper_constant(cloud: &AtomCloud) -> Result<f64> {
    let m = cloud.len();
    if m < 2 {
        return invalid("upper constant needs at least two atoms");
    }
    let sep = cloud.sep()?;
    let diam = cloud.diam();
    let mf = m as f64;
    let inner = mf * (mf - 1.0) / (2.0 * (2.0 * std::f64::consts::PI).sqrt() * sep);
    Ok(2.0 * diam * diam * inner.sqrt())
}

const RANK_BLOCK: usize = 10_000;

/// `E|U_(I) - V_(I)|^2` for sorted uniform samples of size `k` and a uniform
/// index `I`: the analytic value `1/(3(k+1))` and a Monte Carlo estimate with
/// its standard error.
pub fn rank_coupling_msq(k: usize, n_mc: usize, key: &StreamKey) -> Result<(f64, f64, f64)> {
    if k == 0 {
        return invalid("k must be at least 1");
    }
    if n_mc < 2 {
        return invalid("need at least 2 Monte Carlo replicas");
    }
    let n_blocks = n_mc.div_ceil(RANK_BLOCK);
    let vals: Vec<Vec<f64>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let mut rng = key.child(b as u64).rng();
            let reps = RANK_BLOCK.min(n_mc - b * RANK_BLOCK);
            let mut u = vec![0.0; k];
            let mut v = vec![0.0; k];
            (0..reps)
                .map(|_| {
                    u.iter_mut().for_each(|x| *x = rng.uniform());
                    v.iter_mut().for_each(|x| *x = rng.uniform());
                    u.sort_by(f64::total_cmp);
                    v.sort_by(f64::total_cmp);
                    let i = rng.below(k);
                    (u[i] - v[i]) * (u[i] - v[i])
                })
                .collect()
        })
        .collect();
    let flat: Vec<f64> = vals.into_iter().flatten().collect();
    let (mc, se) = mean_stderr(&flat);
    Ok((1.0 / (3.0 * (k as f64 + 1.0)), mc, se))
}

/// Geometric batch sizes `floor(2^(j/2))` for `j` in `j_lo..=j_hi`, deduplicated.
pub fn k_grid(j_lo: u32, j_hi: u32) -> Vec<usize> {
    let mut ks: Vec<usize> = (j_lo..=j_hi)
        .map(|j| 2f64.powf(j as f64 / 2.0).floor() as usize)
        .collect();
    ks.dedup();
    ks
}

/// Batches needed to spend a fixed pair budget at batch size `k`.
pub fn batches_for_budget(budget: usize, k: usize) -> usize {
    budget.div_ceil(k.max(1)).max(2)
}

pub const ESTIMATE_CSV_HEADER: &str = "k,mean,stderr,n_batches,reference_w2sq,bias";

pub fn estimate_csv_row(cost: &CostEstimate, bias: &BiasEstimate) -> String {
    format!(
        "{},{:e},{:e},{},{:e},{:e}",
        cost.k, cost.mean, cost.stderr, cost.n_batches, bias.reference_w2sq, bias.bias
    )
}
