//! Experiment runners. Each returns a typed report and writes its CSV panels
//! through an [`Output`].

use std::f64::consts::PI;

use batchot_core::assignment::w2sq_quantile_1d;
use batchot_core::binary::{
    binary_euler_error, binary_one_step_exact, contour_grid, error_lower_bound, log_slope_product, smallest_k_below,
    BinomTailTable, QuadSpec,
};
use batchot_core::flow::{cell_raster, error_curve, laguerre_raster, terminal_frequencies, IntegratorSpec, RasterGrid};
use batchot_core::measures::{AtomCloud, GaussianSource, TargetMeasure};
use batchot_core::plan::{
    batch_stats, batches_for_budget, cost_to_plan_lower, cost_to_plan_upper_constant, k_grid, rank_coupling_msq,
    sample_plan,
};
use batchot_core::rng::StreamKey;
use batchot_core::semidiscrete::{build_reference_target, solve_semidiscrete_dual, DualSolverSpec, StepSchedule};
use batchot_core::stats::{log_log_slope, mean_stderr, upper_half_slope};
use batchot_core::velocity::{concentration_bound, posterior_max_curve, Coupling, VelocityModel};
use batchot_core::Result;
use rayon::prelude::*;
use serde::Serialize;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::config::{
    BinaryConfig, CellsConfig, ConcentrationConfig, ErrorGridConfig, Plan1dConfig, Policy, RatesConfig,
};
use crate::Output;

fn csv_header(cols: &[&str]) -> String {
    let mut s = cols.join(",");
    s.push('\n');
    s
}

fn push_row(s: &mut String, fields: &[String]) {
    s.push_str(&fields.join(","));
    s.push('\n');
}

fn fmt(x: f64) -> String {
    if x.is_finite() {
        format!("{x:e}")
    } else {
        String::new()
    }
}

// ----------------------------------------------------------------- rates

#[derive(Debug, Clone, Serialize)]
pub struct RatesRow {
    pub k: usize,
    pub n_batches: usize,
    pub cost_mean: f64,
    pub cost_stderr: f64,
    /// Paired batch-cost minus nearest-atom cost.
    pub bias: f64,
    pub bias_stderr: f64,
    /// Cost mean minus the reference value.
    pub naive_bias: f64,
    pub naive_bias_stderr: f64,
    pub plan_gap: f64,
    pub plan_gap_stderr: f64,
    pub lower: f64,
    pub upper: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatesPanel {
    pub dim: usize,
    pub atoms: usize,
    pub reference_w2sq: f64,
    pub reference_w2sq_stderr: f64,
    pub empty_atoms: usize,
    pub a_nu: f64,
    pub rows: Vec<RatesRow>,
    pub bias_slope: f64,
    pub bias_slope_upper_half: f64,
    pub plan_gap_slope: f64,
    pub plan_gap_slope_upper_half: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RatesReport {
    pub panels: Vec<RatesPanel>,
}

pub fn planned_rates(cfg: &RatesConfig) -> u64 {
    let per_panel: u64 = k_grid(cfg.k_exp_min, cfg.k_exp_max)
        .iter()
        .map(|&k| batches_for_budget(cfg.pair_budget, k) as u64)
        .sum();
    per_panel * (cfg.dims.len() * cfg.atoms.len()) as u64
}

fn slope_or_nan(x: &[f64], y: &[f64], upper: bool) -> f64 {
    if y.iter().any(|v| !(*v > 0.0)) || x.len() < 2 {
        return f64::NAN;
    }
    if upper {
        upper_half_slope(x, y)
    } else {
        log_log_slope(x, y)
    }
}

pub fn run_rates(cfg: &RatesConfig, key: &StreamKey, out: &mut Output) -> Result<RatesReport> {
    cfg.validate()?;
    let ks = k_grid(cfg.k_exp_min, cfg.k_exp_max);
    let mut panels = Vec::new();
    let mut summary = csv_header(&[
        "dim",
        "atoms",
        "reference_w2sq",
        "a_nu",
        "bias_slope",
        "bias_slope_upper_half",
        "plan_gap_slope",
        "plan_gap_slope_upper_half",
    ]);
    for &d in &cfg.dims {
        for &m in &cfg.atoms {
            let base = key.child(d as u64).child(m as u64);
            let cloud = AtomCloud::uniform_cube(m, d, &base.child(0))?.scaled(cfg.scale)?;
            let reference = build_reference_target(&cloud, cfg.n_ref, &base.child(1))?;
            let a_nu = if m >= 2 { cost_to_plan_upper_constant(&cloud)? } else { 0.0 };
            let w2 = reference.w2sq.sqrt();
            let source = GaussianSource::new(d);
            let mut rows = Vec::with_capacity(ks.len());
            for &k in &ks {
                let nb = batches_for_budget(cfg.pair_budget, k);
                let stats = batch_stats(&source, &reference, k, nb, &base.child(2))?;
                let col = |f: fn(&batchot_core::plan::BatchStats) -> f64| {
                    mean_stderr(&stats.iter().map(f).collect::<Vec<_>>())
                };
                let (cost_mean, cost_stderr) = col(|s| s.cost);
                let (bias, bias_stderr) = col(|s| s.dual_gap);
                let (plan_gap, plan_gap_stderr) = col(|s| s.plan_gap);
                rows.push(RatesRow {
                    k,
                    n_batches: nb,
                    cost_mean,
                    cost_stderr,
                    bias,
                    bias_stderr,
                    naive_bias: cost_mean - reference.w2sq,
                    naive_bias_stderr: cost_stderr.hypot(reference.w2sq_stderr),
                    plan_gap,
                    plan_gap_stderr,
                    lower: cost_to_plan_lower(cost_mean, w2),
                    upper: a_nu * bias.max(0.0).sqrt(),
                });
            }
            let kx: Vec<f64> = rows.iter().map(|r| r.k as f64).collect();
            let by: Vec<f64> = rows.iter().map(|r| r.bias).collect();
            let gy: Vec<f64> = rows.iter().map(|r| r.plan_gap).collect();
            let panel = RatesPanel {
                dim: d,
                atoms: m,
                reference_w2sq: reference.w2sq,
                reference_w2sq_stderr: reference.w2sq_stderr,
                empty_atoms: reference.empty_atoms.len(),
                a_nu,
                bias_slope: slope_or_nan(&kx, &by, false),
                bias_slope_upper_half: slope_or_nan(&kx, &by, true),
                plan_gap_slope: slope_or_nan(&kx, &gy, false),
                plan_gap_slope_upper_half: slope_or_nan(&kx, &gy, true),
                rows,
            };
            let mut csv = csv_header(&[
                "k",
                "mean",
                "stderr",
                "n_batches",
                "reference_w2sq",
                "bias",
                "bias_stderr",
                "naive_bias",
                "naive_bias_stderr",
                "plan_gap",
                "plan_gap_stderr",
                "lower_bound",
                "upper_bound",
            ]);
            for r in &panel.rows {
                push_row(
                    &mut csv,
                    &[
                        r.k.to_string(),
                        fmt(r.cost_mean),
                        fmt(r.cost_stderr),
                        r.n_batches.to_string(),
                        fmt(reference.w2sq),
                        fmt(r.bias),
                        fmt(r.bias_stderr),
                        fmt(r.naive_bias),
                        fmt(r.naive_bias_stderr),
                        fmt(r.plan_gap),
                        fmt(r.plan_gap_stderr),
                        fmt(r.lower),
                        fmt(r.upper),
                    ],
                );
            }
            out.write(&format!("rates_d{d}_m{m}.csv"), &csv)?;
            out.write(&format!("cloud_d{d}_m{m}.txt"), &cloud.to_table())?;
            out.write(&format!("reference_weights_d{d}_m{m}.txt"), &reference.target.weights_table())?;
            push_row(
                &mut summary,
                &[
                    d.to_string(),
                    m.to_string(),
                    fmt(panel.reference_w2sq),
                    fmt(panel.a_nu),
                    fmt(panel.bias_slope),
                    fmt(panel.bias_slope_upper_half),
                    fmt(panel.plan_gap_slope),
                    fmt(panel.plan_gap_slope_upper_half),
                ],
            );
            panels.push(panel);
        }
    }
    out.write("rates_summary.csv", &summary)?;
    Ok(RatesReport { panels })
}

// ----------------------------------------------------------------- plan1d

#[derive(Debug, Clone, Serialize)]
pub struct Plan1dPanel {
    pub k: usize,
    pub n_pairs: usize,
    /// Counts per `x` bin (rows) and atom (columns); pairs outside the range
    /// are dropped.
    pub histogram: Vec<Vec<u64>>,
    pub x_mean: f64,
    pub x_mean_stderr: f64,
    pub x_sq_mean: f64,
    pub x_sq_mean_stderr: f64,
    pub atom_freq: Vec<f64>,
    pub chi_square: f64,
    pub chi_square_dof: usize,
    pub independence_p: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct RankRow {
    pub k: usize,
    pub analytic: f64,
    pub mc: f64,
    pub stderr: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Plan1dReport {
    pub weights: Vec<f64>,
    pub panels: Vec<Plan1dPanel>,
    pub rank: Vec<RankRow>,
    /// `W_2^2` between the uniform laws on `[0, 1]` and `[-1, 1]` by quantiles.
    pub quantile_w2sq: f64,
}

pub fn planned_plan1d(cfg: &Plan1dConfig) -> u64 {
    cfg.ks.iter().map(|&k| cfg.n_pairs.div_ceil(k) as u64).sum()
}

/// Pearson chi-square statistic, degrees of freedom and p-value of the
/// independence test on a contingency table. Empty rows and columns are
/// dropped.
pub fn chi_square_independence(table: &[Vec<u64>]) -> (f64, usize, f64) {
    let rows: Vec<&Vec<u64>> = table.iter().filter(|r| r.iter().sum::<u64>() > 0).collect();
    let n_cols = table.first().map_or(0, |r| r.len());
    let cols: Vec<usize> = (0..n_cols).filter(|&j| rows.iter().any(|r| r[j] > 0)).collect();
    if rows.len() < 2 || cols.len() < 2 {
        return (0.0, 0, 1.0);
    }
    let n: f64 = rows.iter().flat_map(|r| r.iter()).sum::<u64>() as f64;
    let rs: Vec<f64> = rows.iter().map(|r| r.iter().sum::<u64>() as f64).collect();
    let cs: Vec<f64> = cols.iter().map(|&j| rows.iter().map(|r| r[j]).sum::<u64>() as f64).collect();
    let mut stat = 0.0;
    for (i, r) in rows.iter().enumerate() {
        for (c, &j) in cols.iter().enumerate() {
            let e = rs[i] * cs[c] / n;
            let o = r[j] as f64;
            stat += (o - e) * (o - e) / e;
        }
    }
    let dof = (rows.len() - 1) * (cols.len() - 1);
    let p = ChiSquared::new(dof as f64).map_or(f64::NAN, |d| d.sf(stat));
    (stat, dof, p)
}

fn equal_count_bins(xs: &[f64], bins: usize) -> Vec<usize> {
    let mut order: Vec<usize> = (0..xs.len()).collect();
    order.sort_by(|&a, &b| xs[a].total_cmp(&xs[b]));
    let mut bin = vec![0; xs.len()];
    for (rank, &i) in order.iter().enumerate() {
        bin[i] = rank * bins / xs.len();
    }
    bin
}

pub fn run_plan1d(cfg: &Plan1dConfig, key: &StreamKey, out: &mut Output) -> Result<Plan1dReport> {
    cfg.validate()?;
    let cloud = AtomCloud::new(1, cfg.atoms.clone())?;
    let target = match &cfg.weights {
        Some(w) => TargetMeasure::with_weights(cloud, w.clone())?,
        None => TargetMeasure::uniform(cloud),
    };
    let m = target.len();
    let source = GaussianSource::new(1);
    let width = (cfg.x_max - cfg.x_min) / cfg.x_bins as f64;
    let mut panels = Vec::new();
    let mut hist_csv = csv_header(&["k", "x_lo", "x_hi", "atom_index", "count"]);
    let mut marg_csv = csv_header(&["k", "atom_index", "weight", "frequency"]);
    for &k in &cfg.ks {
        let pairs = sample_plan(&source, &target, k, cfg.n_pairs, &key.child(0).child(k as u64))?;
        let xs: Vec<f64> = pairs.iter().map(|p| p.x[0]).collect();
        let mut histogram = vec![vec![0u64; m]; cfg.x_bins];
        let mut counts = vec![0u64; m];
        for p in &pairs {
            counts[p.y_index] += 1;
            let b = ((p.x[0] - cfg.x_min) / width).floor();
            if b >= 0.0 && (b as usize) < cfg.x_bins {
                histogram[b as usize][p.y_index] += 1;
            }
        }
        let bins = equal_count_bins(&xs, cfg.test_bins);
        let mut table = vec![vec![0u64; m]; cfg.test_bins];
        for (p, &b) in pairs.iter().zip(&bins) {
            table[b][p.y_index] += 1;
        }
        let (chi_square, chi_square_dof, independence_p) = chi_square_independence(&table);
        let (x_mean, x_mean_stderr) = mean_stderr(&xs);
        let (x_sq_mean, x_sq_mean_stderr) = mean_stderr(&xs.iter().map(|x| x * x).collect::<Vec<_>>());
        let n = pairs.len() as f64;
        let atom_freq: Vec<f64> = counts.iter().map(|&c| c as f64 / n).collect();
        for (b, row) in histogram.iter().enumerate() {
            for (j, &c) in row.iter().enumerate() {
                let lo = cfg.x_min + b as f64 * width;
                push_row(&mut hist_csv, &[k.to_string(), fmt(lo), fmt(lo + width), j.to_string(), c.to_string()]);
            }
        }
        for j in 0..m {
            push_row(
                &mut marg_csv,
                &[k.to_string(), j.to_string(), fmt(target.weights()[j]), fmt(atom_freq[j])],
            );
        }
        panels.push(Plan1dPanel {
            k,
            n_pairs: pairs.len(),
            histogram,
            x_mean,
            x_mean_stderr,
            x_sq_mean,
            x_sq_mean_stderr,
            atom_freq,
            chi_square,
            chi_square_dof,
            independence_p,
        });
    }
    let mut rank = Vec::new();
    let mut rank_csv = csv_header(&["k", "analytic", "mc", "stderr"]);
    for &k in &cfg.rank_ks {
        let (analytic, mc, stderr) = rank_coupling_msq(k, cfg.rank_mc, &key.child(1).child(k as u64))?;
        push_row(&mut rank_csv, &[k.to_string(), fmt(analytic), fmt(mc), fmt(stderr)]);
        rank.push(RankRow { k, analytic, mc, stderr });
    }
    let quantile_w2sq = w2sq_quantile_1d(|u| u, |u| 2.0 * u - 1.0, cfg.quantile_nodes)?;
    let mut test_csv = csv_header(&["k", "chi_square", "dof", "p_value"]);
    for p in &panels {
        push_row(
            &mut test_csv,
            &[p.k.to_string(), fmt(p.chi_square), p.chi_square_dof.to_string(), fmt(p.independence_p)],
        );
    }
    out.write("plan1d_histogram.csv", &hist_csv)?;
    out.write("plan1d_marginals.csv", &marg_csv)?;
    out.write("plan1d_independence.csv", &test_csv)?;
    out.write("plan1d_rank.csv", &rank_csv)?;
    out.write(
        "plan1d_quantile.csv",
        &format!("source,target,w2sq\nuniform[0;1],uniform[-1;1],{}\n", fmt(quantile_w2sq)),
    )?;
    out.note("entropic-plan panel not produced: entropic transport is outside this library");
    Ok(Plan1dReport {
        weights: target.weights().to_vec(),
        panels,
        rank,
        quantile_w2sq,
    })
}

// ----------------------------------------------------------------- models

fn model_for(target: &TargetMeasure, k: usize, replicas: usize, policy: Policy, key: StreamKey) -> Result<VelocityModel> {
    if k == 1 {
        Ok(VelocityModel::independent(target.clone()))
    } else {
        VelocityModel::batch_mc(target.clone(), k, replicas, policy.into(), key)
    }
}

fn context_solves(k: usize, replicas: usize, policy: Policy, trajectories: usize) -> u64 {
    match (k, policy) {
        (1, _) => 0,
        (_, Policy::Shared) => replicas as u64,
        (_, Policy::PerTrajectory) => (replicas * trajectories) as u64,
    }
}

// ----------------------------------------------------------------- cells

#[derive(Debug, Clone, Serialize)]
pub struct CellsPanel {
    pub k: usize,
    pub agreement: f64,
    pub undecided_fraction: f64,
    pub pushforward: Vec<f64>,
    pub pushforward_undecided: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct CellsReport {
    pub dual: Vec<f64>,
    pub panels: Vec<CellsPanel>,
}

pub fn planned_cells(cfg: &CellsConfig) -> u64 {
    let per_raster = cfg.resolution * cfg.resolution + cfg.audit_samples;
    cfg.ks
        .iter()
        .map(|&k| context_solves(k, cfg.replicas, cfg.policy, per_raster))
        .sum()
}

pub fn run_cells(cfg: &CellsConfig, key: &StreamKey, out: &mut Output) -> Result<CellsReport> {
    cfg.validate()?;
    let cloud = AtomCloud::uniform_cube(cfg.atoms, 2, &key.child(0))?.scaled(cfg.scale)?;
    let target = TargetMeasure::uniform(cloud.clone());
    let source = GaussianSource::new(2);
    let spec = DualSolverSpec {
        steps: cfg.dual_steps,
        schedule: StepSchedule::default(),
        audit_samples: cfg.dual_audit,
        tolerance: cfg.dual_tolerance,
    };
    let dual = solve_semidiscrete_dual(&source, &target, &spec, &key.child(1))?;
    let grid = RasterGrid::square(cfg.half_width, cfg.resolution);
    let lag = laguerre_raster(&cloud, &dual, &grid)?;
    out.write("cells_laguerre.csv", &lag.to_csv())?;
    out.write("cells_cloud.txt", &cloud.to_table())?;
    let mut dual_csv = csv_header(&["atom_index", "lambda"]);
    for (j, l) in dual.lam().iter().enumerate() {
        push_row(&mut dual_csv, &[j.to_string(), fmt(*l)]);
    }
    out.write("cells_dual.csv", &dual_csv)?;
    let spec_ref = IntegratorSpec::terminal(cfg.n_ref);
    let mut panels = Vec::new();
    let mut summary = csv_header(&["k", "agreement", "undecided_fraction", "pushforward_undecided"]);
    let mut push_csv = csv_header(&["k", "atom_index", "frequency", "stderr"]);
    for &k in &cfg.ks {
        let model = model_for(&target, k, cfg.replicas, cfg.policy, key.child(2).child(k as u64))?;
        let raster = cell_raster(&model, &grid, &spec_ref)?;
        let agreement = raster.agreement(&lag)?;
        let undecided_fraction =
            raster.undecided.iter().filter(|&&u| u).count() as f64 / raster.undecided.len() as f64;
        out.write(&format!("cells_k{k}.csv"), &raster.to_csv())?;
        let (pushforward, pushforward_undecided) = if cfg.audit_samples > 0 {
            terminal_frequencies(&model, cfg.audit_samples, &spec_ref, &key.child(3).child(k as u64))?
        } else {
            (Vec::new(), f64::NAN)
        };
        for (j, f) in pushforward.iter().enumerate() {
            let se = (f * (1.0 - f) / cfg.audit_samples as f64).sqrt();
            push_row(&mut push_csv, &[k.to_string(), j.to_string(), fmt(*f), fmt(se)]);
        }
        push_row(
            &mut summary,
            &[k.to_string(), fmt(agreement), fmt(undecided_fraction), fmt(pushforward_undecided)],
        );
        panels.push(CellsPanel {
            k,
            agreement,
            undecided_fraction,
            pushforward,
            pushforward_undecided,
        });
    }
    out.write("cells_agreement.csv", &summary)?;
    if cfg.audit_samples > 0 {
        out.write("cells_pushforward.csv", &push_csv)?;
    }
    Ok(CellsReport {
        dual: dual.lam().to_vec(),
        panels,
    })
}

// ----------------------------------------------------------------- concentration

#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationRow {
    /// `"k"` or `"d"`.
    pub sweep: &'static str,
    pub value: usize,
    pub t: f64,
    pub mean: f64,
    pub stderr: f64,
    /// Bound on `1 - E[max posterior]`, for independent-coupling rows.
    pub bound: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct ConcentrationReport {
    pub sep: f64,
    pub rows: Vec<ConcentrationRow>,
}

pub fn planned_concentration(cfg: &ConcentrationConfig) -> u64 {
    let ksweep: u64 = cfg
        .ks
        .iter()
        .map(|&k| {
            let n = if k == 1 { cfg.trajectories } else { cfg.mc_trajectories };
            n.div_ceil(k) as u64 + context_solves(k, cfg.replicas, cfg.policy, n)
        })
        .sum();
    ksweep + (cfg.dims.len() * cfg.trajectories) as u64
}

pub fn concentration_ts(points: usize) -> Vec<f64> {
    (0..points).map(|i| i as f64 / points as f64).collect()
}

pub fn run_concentration(cfg: &ConcentrationConfig, key: &StreamKey, out: &mut Output) -> Result<ConcentrationReport> {
    cfg.validate()?;
    let ts = concentration_ts(cfg.t_points);
    let cloud = AtomCloud::uniform_cube(cfg.atoms, cfg.dim, &key.child(0))?.scaled(cfg.scale)?;
    let sep = cloud.sep()?;
    let target = TargetMeasure::uniform(cloud);
    let mut rows = Vec::new();
    let mut push = |sweep: &'static str, value: usize, curve: Vec<(f64, f64)>, bound_sep: Option<f64>| {
        for (&t, (mean, stderr)) in ts.iter().zip(curve) {
            rows.push(ConcentrationRow {
                sweep,
                value,
                t,
                mean,
                stderr,
                bound: bound_sep.map(|s| concentration_bound(t, cfg.atoms, s)),
            });
        }
    };
    for &k in &cfg.ks {
        let ck = key.child(1).child(k as u64);
        let curve = if k == 1 {
            posterior_max_curve(Coupling::Independent, &target, &ts, cfg.trajectories, &ck)?
        } else {
            let coupling = Coupling::Batch {
                k,
                replicas: cfg.replicas,
                policy: cfg.policy.into(),
            };
            posterior_max_curve(coupling, &target, &ts, cfg.mc_trajectories, &ck)?
        };
        push("k", k, curve, (k == 1).then_some(sep));
    }
    for &d in &cfg.dims {
        let cd = AtomCloud::uniform_cube(cfg.atoms, d, &key.child(2).child(d as u64))?.scaled(cfg.scale)?;
        let sep_d = cd.sep()?;
        let td = TargetMeasure::uniform(cd);
        let curve = posterior_max_curve(Coupling::Independent, &td, &ts, cfg.trajectories, &key.child(3).child(d as u64))?;
        push("d", d, curve, Some(sep_d));
    }
    let mut csv = csv_header(&["sweep", "value", "t", "mean_max_posterior", "stderr", "bound"]);
    for r in &rows {
        push_row(
            &mut csv,
            &[
                r.sweep.to_string(),
                r.value.to_string(),
                fmt(r.t),
                fmt(r.mean),
                fmt(r.stderr),
                r.bound.map_or(String::new(), fmt),
            ],
        );
    }
    out.write("concentration.csv", &csv)?;
    Ok(ConcentrationReport { sep, rows })
}

// ----------------------------------------------------------------- error grid

#[derive(Debug, Clone, Serialize)]
pub struct ErrorGridRow {
    pub n: usize,
    pub k: usize,
    pub mean: f64,
    pub stderr: f64,
    pub n_samples: usize,
    /// Samples with a nonzero error.
    pub nonzero: usize,
}

#[derive(Debug, Clone, Serialize)]
pub struct ErrorGridReport {
    pub rows: Vec<ErrorGridRow>,
    /// Log-log slope of the error against `n` for each `k`.
    pub slope_n: Vec<(usize, f64)>,
    /// Log-log slope of the error against `k` at the largest `n`.
    pub slope_k: f64,
}

pub fn planned_error_grid(cfg: &ErrorGridConfig) -> u64 {
    cfg.ks
        .iter()
        .map(|&k| context_solves(k, cfg.replicas, cfg.policy, cfg.samples))
        .sum()
}

pub fn run_error_grid(cfg: &ErrorGridConfig, key: &StreamKey, out: &mut Output) -> Result<ErrorGridReport> {
    cfg.validate()?;
    let cloud = AtomCloud::uniform_cube(cfg.atoms, cfg.dim, &key.child(0))?.scaled(cfg.scale)?;
    let target = TargetMeasure::uniform(cloud);
    let mut rows = Vec::new();
    let mut slope_n = Vec::new();
    for &k in &cfg.ks {
        let model = model_for(&target, k, cfg.replicas, cfg.policy, key.child(1).child(k as u64))?;
        let curve = error_curve(&model, &cfg.ns, cfg.samples, cfg.n_ref, &key.child(2))?;
        let ns: Vec<f64> = curve.iter().map(|e| e.n as f64).collect();
        let means: Vec<f64> = curve.iter().map(|e| e.mean).collect();
        slope_n.push((k, slope_or_nan(&ns, &means, false)));
        for e in curve {
            rows.push(ErrorGridRow {
                n: e.n,
                k,
                mean: e.mean,
                stderr: e.stderr,
                n_samples: cfg.samples,
                nonzero: e.values.iter().filter(|&&v| v > 0.0).count(),
            });
        }
    }
    let n_max = *cfg.ns.iter().max().unwrap_or(&1);
    let at_max: Vec<&ErrorGridRow> = rows.iter().filter(|r| r.n == n_max).collect();
    let slope_k = slope_or_nan(
        &at_max.iter().map(|r| r.k as f64).collect::<Vec<_>>(),
        &at_max.iter().map(|r| r.mean).collect::<Vec<_>>(),
        false,
    );
    let mut csv = csv_header(&["n", "k", "mean_error", "stderr", "n_samples", "nonzero"]);
    for r in &rows {
        push_row(
            &mut csv,
            &[
                r.n.to_string(),
                r.k.to_string(),
                fmt(r.mean),
                fmt(r.stderr),
                r.n_samples.to_string(),
                r.nonzero.to_string(),
            ],
        );
    }
    out.write("error_grid.csv", &csv)?;
    let mut slopes = csv_header(&["fit", "k", "slope"]);
    for (k, s) in &slope_n {
        push_row(&mut slopes, &["n".into(), k.to_string(), fmt(*s)]);
    }
    push_row(&mut slopes, &["k".into(), String::new(), fmt(slope_k)]);
    out.write("error_grid_slopes.csv", &slopes)?;
    Ok(ErrorGridReport { rows, slope_n, slope_k })
}

// ----------------------------------------------------------------- binary

#[derive(Debug, Clone, Serialize)]
pub struct AsymptoticRow {
    pub n: usize,
    pub log_error: f64,
    pub log_slope_product: Option<f64>,
    pub n_to_2_3: f64,
    pub lower_bound: Option<f64>,
}

#[derive(Debug, Clone, Serialize)]
pub struct OneStepRow {
    pub k: usize,
    pub error: f64,
    pub exact: f64,
    /// `error * sqrt(pi k) / 2`.
    pub ratio: f64,
}

#[derive(Debug, Clone, Serialize)]
pub struct Compensation {
    pub coarse: usize,
    pub fine: usize,
    pub target: f64,
    pub k_star: Option<usize>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct BinaryReport {
    pub asymptotics: Vec<AsymptoticRow>,
    pub one_step: Vec<OneStepRow>,
    pub contour: Vec<Vec<f64>>,
    pub compensation: Option<Compensation>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum BinaryParts {
    Asymptotics,
    Contour,
    All,
}

pub fn run_binary(cfg: &BinaryConfig, parts: BinaryParts, out: &mut Output) -> Result<BinaryReport> {
    cfg.validate()?;
    let quad = QuadSpec::default();
    let mut report = BinaryReport::default();
    if parts != BinaryParts::Contour {
        let t1 = BinomTailTable::new(1);
        report.asymptotics = (1..=cfg.n_max)
            .into_par_iter()
            .map(|n| {
                let e = binary_euler_error(n, &t1, &quad);
                AsymptoticRow {
                    n,
                    log_error: e.ln(),
                    log_slope_product: (n >= 2).then(|| log_slope_product(n)),
                    n_to_2_3: (n as f64).powf(2.0 / 3.0),
                    lower_bound: (n >= 4).then(|| error_lower_bound(n)),
                }
            })
            .collect();
        let mut ks: Vec<usize> = (0..=cfg.one_step_k_exp_max).map(|j| 1usize << j).collect();
        ks.push(10_000);
        ks.sort_unstable();
        ks.dedup();
        report.one_step = ks
            .into_par_iter()
            .map(|k| {
                let error = binary_euler_error(1, &BinomTailTable::new(k), &quad);
                OneStepRow {
                    k,
                    error,
                    exact: binary_one_step_exact(k),
                    ratio: error * (PI * k as f64).sqrt() / 2.0,
                }
            })
            .collect();
        let mut csv = csv_header(&["n", "log_error", "log_slope_product", "n_to_2_3", "lower_bound"]);
        for r in &report.asymptotics {
            push_row(
                &mut csv,
                &[
                    r.n.to_string(),
                    fmt(r.log_error),
                    r.log_slope_product.map_or(String::new(), fmt),
                    fmt(r.n_to_2_3),
                    r.lower_bound.map_or(String::new(), fmt),
                ],
            );
        }
        out.write("binary_asymptotics.csv", &csv)?;
        let mut csv = csv_header(&["k", "error", "exact", "ratio"]);
        for r in &report.one_step {
            push_row(&mut csv, &[r.k.to_string(), fmt(r.error), fmt(r.exact), fmt(r.ratio)]);
        }
        out.write("binary_one_step.csv", &csv)?;
    }
    if parts != BinaryParts::Asymptotics {
        report.contour = contour_grid(&cfg.contour_ns, &cfg.contour_ks, &quad);
        let mut csv = csv_header(&["n", "k", "error"]);
        for (i, &n) in cfg.contour_ns.iter().enumerate() {
            for (j, &k) in cfg.contour_ks.iter().enumerate() {
                push_row(&mut csv, &[n.to_string(), k.to_string(), fmt(report.contour[i][j])]);
            }
        }
        out.write("binary_contour.csv", &csv)?;
        let target = binary_euler_error(cfg.compensation_fine, &BinomTailTable::new(1), &quad);
        let k_star = smallest_k_below(cfg.compensation_coarse, target, cfg.compensation_k_max, &quad);
        out.write(
            "binary_compensation.csv",
            &format!(
                "n_coarse,n_fine,target_error,k_star\n{},{},{},{}\n",
                cfg.compensation_coarse,
                cfg.compensation_fine,
                fmt(target),
                k_star.map_or(String::new(), |k| k.to_string())
            ),
        )?;
        report.compensation = Some(Compensation {
            coarse: cfg.compensation_coarse,
            fine: cfg.compensation_fine,
            target,
            k_star,
        });
    }
    Ok(report)
}
