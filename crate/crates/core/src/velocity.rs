//! Flow-matching velocity fields for a Gaussian source and a discrete target.
//!
//! The posterior `P(X_1 = v_j | X_t = z)` determines the field through
//! `u_t(z) = (m_t(z) - z) / (1 - t)` with `m_t(z) = sum_j p_j v_j`. Three
//! couplings are supported: the independent coupling (softmax closed form),
//! the expected batch OT plan through Monte Carlo assignment frequencies, and
//! the two-atom model's closed form.
//!
//! # Batch skeletons
//!
//! A query point `x` joins `k - 1` fresh sources and `k` targets. If `C_{-a}`
//! is the optimal cost of the `k - 1` sources against the targets with one
//! copy of atom `a` removed, the optimal batch matches `x` to
//! `argmin_a |x - v_a|^2 + C_{-a}`. A skeleton therefore stores
//! `D_a = |v_a|^2 + C_{-a}` (up to a common constant) and answers every query
//! with `argmin_a (D_a - 2 <x, v_a>)`, which is the exact batch OT assignment
//! of `x` without solving a new problem per query.

use std::sync::Arc;

use rayon::prelude::*;

use crate::assignment::TransportSolver;
use crate::binary::{binary_mean, BinomTailTable};
use crate::error::invalid;
use crate::measures::{dot, sq_dist, AtomCloud, GaussianSource, TargetMeasure};
use crate::plan::sample_plan;
use crate::rng::StreamKey;
use crate::stats::mean_stderr;
use crate::Result;

/// Pullbacks whose weight bound falls below this fraction of the running
/// total are skipped.
const PRUNE_REL: f64 = 1e-13;

#[derive(Debug, Clone, PartialEq)]
pub struct PosteriorWeights {
    pub probs: Vec<f64>,
}

impl PosteriorWeights {
    pub fn max(&self) -> f64 {
        self.probs.iter().cloned().fold(0.0, f64::max)
    }

    /// Posterior mean `sum_j p_j v_j`.
    pub fn mean(&self, cloud: &AtomCloud) -> Vec<f64> {
        let mut m = vec![0.0; cloud.dim()];
        for (j, &p) in self.probs.iter().enumerate() {
            if p > 0.0 {
                for (mi, vi) in m.iter_mut().zip(cloud.atom(j)) {
                    *mi += p * vi;
                }
            }
        }
        m
    }
}

fn check_t(t: f64) -> Result<()> {
    if !(0.0..1.0).contains(&t) {
        return invalid(format!("time must lie in [0, 1), got {t}"));
    }
    Ok(())
}

fn normalize_logs(mut logs: Vec<f64>) -> Vec<f64> {
    let mx = logs.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let mut s = 0.0;
    for l in logs.iter_mut() {
        *l = (*l - mx).exp();
        s += *l;
    }
    for l in logs.iter_mut() {
        *l /= s;
    }
    logs
}

/// Posterior under the independent coupling:
/// `p_j ∝ w_j exp(-|z - t v_j|^2 / (2 (1 - t)^2))`.
pub fn posterior_independent(t: f64, z: &[f64], cloud: &AtomCloud, weights: &[f64]) -> Result<PosteriorWeights> {
    check_t(t)?;
    if z.len() != cloud.dim() || weights.len() != cloud.len() {
        return invalid("posterior inputs have mismatched sizes");
    }
    let s = 2.0 * (1.0 - t) * (1.0 - t);
    let logs = cloud
        .atoms()
        .zip(weights)
        .map(|(v, &w)| {
            let d: f64 = z.iter().zip(v).map(|(a, b)| (a - t * b) * (a - t * b)).sum();
            w.ln() - d / s
        })
        .collect();
    Ok(PosteriorWeights {
        probs: normalize_logs(logs),
    })
}

/// `u = (sum_j p_j v_j - z) / (1 - t)`.
pub fn velocity_from_posterior(t: f64, z: &[f64], probs: &PosteriorWeights, cloud: &AtomCloud) -> Result<Vec<f64>> {
    check_t(t)?;
    if z.len() != cloud.dim() || probs.probs.len() != cloud.len() {
        return invalid("velocity inputs have mismatched sizes");
    }
    let m = probs.mean(cloud);
    Ok(m.iter().zip(z).map(|(mi, zi)| (mi - zi) / (1.0 - t)).collect())
}

/// `(M - 1) exp(-t^2 sep^2 / (8 (1 - t)^2))`.
pub fn concentration_bound(t: f64, m: usize, sep: f64) -> f64 {
    let r = t / (1.0 - t);
    (m as f64 - 1.0) * (-r * r * sep * sep / 8.0).exp()
}

/// `R` pre-drawn batch skeletons answering batch OT assignment queries.
#[derive(Debug, Clone)]
pub struct McContext {
    k: usize,
    replicas: usize,
    m: usize,
    cloud: AtomCloud,
    /// `M x M` Gram matrix of the atoms.
    gram: Vec<f64>,
    /// Atoms present in each replica, ascending, with their `D_a`; replica
    /// `r` occupies `offsets[r]..offsets[r + 1]`.
    present: Vec<(u32, f64)>,
    offsets: Vec<usize>,
    /// For each atom, the replicas containing it and its `D_a` there.
    by_atom: Vec<Vec<(u32, f64)>>,
}

impl McContext {
    /// Replica `r` draws its `k - 1` sources from `key.child(r).child(0)` and
    /// its `k` targets from `key.child(r).child(1)`.
    pub fn new(target: &TargetMeasure, k: usize, replicas: usize, key: &StreamKey) -> Result<Self> {
        if k == 0 || replicas == 0 {
            return invalid("batch size and replica count must be at least 1");
        }
        let cloud = target.cloud().clone();
        let m = cloud.len();
        let dim = cloud.dim();
        let source = GaussianSource::new(dim);
        let sq_norms: Vec<f64> = cloud.atoms().map(|v| dot(v, v)).collect();
        let rows: Vec<Vec<f64>> = (0..replicas as u64)
            .into_par_iter()
            .map_init(TransportSolver::new, |ws, r| {
                let rk = key.child(r);
                let xs = source.sample_flat(k - 1, &mut rk.child(0).rng());
                let mut yr = rk.child(1).rng();
                let ys: Vec<usize> = (0..k).map(|_| target.sample_index(&mut yr)).collect();
                skeleton_row(&cloud, &sq_norms, &xs, &ys, ws)
            })
            .collect::<Result<_>>()?;
        let mut gram = vec![0.0; m * m];
        for a in 0..m {
            for b in 0..m {
                gram[a * m + b] = dot(cloud.atom(a), cloud.atom(b));
            }
        }
        let mut present = Vec::new();
        let mut offsets = vec![0];
        let mut by_atom = vec![Vec::new(); m];
        for (r, row) in rows.iter().enumerate() {
            for (a, &d) in row.iter().enumerate() {
                if d.is_finite() {
                    present.push((a as u32, d));
                    by_atom[a].push((r as u32, d));
                }
            }
            offsets.push(present.len());
        }
        Ok(Self {
            k,
            replicas,
            m,
            cloud,
            gram,
            present,
            offsets,
            by_atom,
        })
    }

    pub fn k(&self) -> usize {
        self.k
    }

    pub fn replicas(&self) -> usize {
        self.replicas
    }

    pub fn cloud(&self) -> &AtomCloud {
        &self.cloud
    }

    #[inline]
    fn row(&self, r: usize) -> &[(u32, f64)] {
        &self.present[self.offsets[r]..self.offsets[r + 1]]
    }

    /// Replicas matching the query with scores `s_a = -2 <x, v_a>` to atom
    /// `j`, ties going to the lower index.
    fn winners<'a>(&'a self, s: &'a [f64], j: usize) -> impl Iterator<Item = usize> + 'a {
        self.by_atom[j].iter().filter_map(move |&(r, dj)| {
            let mine = s[j] + dj;
            let beaten = self.row(r as usize).iter().any(|&(a, d)| {
                let v = s[a as usize] + d;
                v < mine || (v == mine && (a as usize) < j)
            });
            (!beaten).then_some(r as usize)
        })
    }

    fn matched(&self, r: usize, s: &[f64]) -> usize {
        let mut best = 0;
        let mut bv = f64::INFINITY;
        for &(a, d) in self.row(r) {
            let v = s[a as usize] + d;
            if v < bv {
                bv = v;
                best = a as usize;
            }
        }
        best
    }

    /// Atom matched to `x` by each replica.
    pub fn assignments(&self, x: &[f64]) -> Vec<usize> {
        let s: Vec<f64> = self.cloud.atoms().map(|v| -2.0 * dot(x, v)).collect();
        (0..self.replicas).map(|r| self.matched(r, &s)).collect()
    }

    /// Frequencies with which the replicas match `x` to each atom.
    pub fn assignment_freq(&self, x: &[f64]) -> Vec<f64> {
        let mut f = vec![0.0; self.m];
        for a in self.assignments(x) {
            f[a] += 1.0;
        }
        let r = self.replicas as f64;
        f.iter_mut().for_each(|v| *v /= r);
        f
    }
}

fn skeleton_row(
    cloud: &AtomCloud,
    sq_norms: &[f64],
    xs: &[f64],
    ys: &[usize],
    ws: &mut TransportSolver,
) -> Result<Vec<f64>> {
    let m = cloud.len();
    let dim = cloud.dim();
    let n = xs.len() / dim.max(1);
    let mut row = vec![f64::INFINITY; m];
    let mut local = vec![usize::MAX; m];
    let mut atoms = Vec::new();
    for &y in ys {
        if local[y] == usize::MAX {
            local[y] = atoms.len();
            atoms.push(y);
        }
    }
    if n == 0 {
        for &a in &atoms {
            row[a] = sq_norms[a];
        }
        return Ok(row);
    }
    let mut cap = vec![0usize; atoms.len()];
    for &y in ys {
        cap[local[y]] += 1;
    }
    let mut cost = Vec::with_capacity(n * atoms.len());
    for i in 0..n {
        let x = &xs[i * dim..(i + 1) * dim];
        for &a in &atoms {
            cost.push(sq_dist(x, cloud.atom(a)));
        }
    }
    ws.solve(n, &cost, &cap)?;
    let rem = ws.removal_costs();
    for (l, &a) in atoms.iter().enumerate() {
        row[a] = sq_norms[a] + rem[l];
    }
    Ok(row)
}

/// Monte Carlo estimate of the probabilities that the batch OT plan sends
/// `x` to each atom, from `replicas` independent batches.
pub fn assignment_freq_mc(
    x: &[f64],
    target: &TargetMeasure,
    k: usize,
    replicas: usize,
    key: &StreamKey,
) -> Result<Vec<f64>> {
    if x.len() != target.dim() {
        return invalid("query dimension differs from target");
    }
    Ok(McContext::new(target, k, replicas, key)?.assignment_freq(x))
}

/// MC posterior with delta-method standard errors.
#[derive(Debug, Clone, PartialEq)]
pub struct McPosterior {
    pub posterior: PosteriorWeights,
    pub prob_stderr: Vec<f64>,
    /// Standard error of each coordinate of the posterior mean.
    pub mean_stderr: Vec<f64>,
}

/// Posterior under the expected batch OT plan from the pullback representation
/// `w_j ∝ phi(x_j) a_j(x_j)` with `x_j = (z - t v_j) / (1 - t)`.
pub fn posterior_batch_mc(t: f64, z: &[f64], ctx: &McContext) -> Result<PosteriorWeights> {
    Ok(posterior_mc_inner(t, z, ctx, false)?.posterior)
}

pub fn posterior_batch_mc_stderr(t: f64, z: &[f64], ctx: &McContext) -> Result<McPosterior> {
    posterior_mc_inner(t, z, ctx, true)
}

fn posterior_mc_inner(t: f64, z: &[f64], ctx: &McContext, want_se: bool) -> Result<McPosterior> {
    check_t(t)?;
    let cloud = &ctx.cloud;
    let dim = cloud.dim();
    if z.len() != dim {
        return invalid("query dimension differs from target");
    }
    let m = ctx.m;
    let rr = ctx.replicas;
    let u = 1.0 - t;
    let zz = dot(z, z);
    let zv: Vec<f64> = cloud.atoms().map(|v| dot(z, v)).collect();
    // log phi(x_j) up to a constant, and <x_j, v_a> via the Gram matrix.
    let lphi: Vec<f64> = (0..m)
        .map(|j| -(zz - 2.0 * t * zv[j] + t * t * ctx.gram[j * m + j]) / (2.0 * u * u))
        .collect();
    let mut order: Vec<usize> = (0..m).collect();
    order.sort_by(|&a, &b| lphi[b].total_cmp(&lphi[a]).then(a.cmp(&b)));
    let top = lphi[order[0]];
    let floor = 1.0 / (10.0 * m as f64 * rr as f64);

    let mut counts = vec![0usize; m];
    let mut active = Vec::new();
    let mut wins: Vec<Vec<bool>> = Vec::new();
    let mut total = 0.0;
    let mut s = vec![0.0; m];
    for (pos, &j) in order.iter().enumerate() {
        let c = (lphi[j] - top).exp();
        let remaining = (m - pos) as f64;
        if total > 0.0 && c * remaining < PRUNE_REL * total {
            break;
        }
        for a in 0..m {
            s[a] = -2.0 * (zv[a] - t * ctx.gram[j * m + a]) / u;
        }
        let mut hit = if want_se { vec![false; rr] } else { Vec::new() };
        let mut cnt = 0;
        for r in ctx.winners(&s, j) {
            cnt += 1;
            if want_se {
                hit[r] = true;
            }
        }
        counts[j] = cnt;
        let abar = (cnt as f64 / rr as f64).max(floor);
        total += c * abar;
        active.push(j);
        if want_se {
            wins.push(hit);
        }
    }
    let mut logs = vec![f64::NEG_INFINITY; m];
    for &j in &active {
        let abar = (counts[j] as f64 / rr as f64).max(floor);
        logs[j] = lphi[j] + abar.ln();
    }
    let posterior = PosteriorWeights {
        probs: normalize_logs(logs),
    };
    let (mut prob_stderr, mut mean_stderr) = (vec![0.0; m], vec![0.0; dim]);
    if want_se && rr > 1 {
        let cs: Vec<f64> = active.iter().map(|&j| (lphi[j] - top).exp()).collect();
        let sw: f64 = active
            .iter()
            .zip(&cs)
            .map(|(&j, c)| c * counts[j] as f64 / rr as f64)
            .sum();
        if sw > 0.0 {
            let mean_vec = posterior.mean(cloud);
            let p = &posterior.probs;
            let mut acc_p = vec![(0.0, 0.0); m];
            let mut acc_m = vec![(0.0, 0.0); dim];
            let mut ev = vec![0.0; dim];
            for r in 0..rr {
                let mut er = 0.0;
                ev.iter_mut().for_each(|v| *v = 0.0);
                for (i, &j) in active.iter().enumerate() {
                    if wins[i][r] {
                        er += cs[i];
                        for (e, vj) in ev.iter_mut().zip(cloud.atom(j)) {
                            *e += cs[i] * vj;
                        }
                    }
                }
                for (i, &j) in active.iter().enumerate() {
                    let e = if wins[i][r] { cs[i] } else { 0.0 };
                    let psi = (e - p[j] * er) / sw;
                    acc_p[j].0 += psi;
                    acc_p[j].1 += psi * psi;
                }
                for d in 0..dim {
                    let psi = (ev[d] - mean_vec[d] * er) / sw;
                    acc_m[d].0 += psi;
                    acc_m[d].1 += psi * psi;
                }
            }
            let n = rr as f64;
            let se = |(s1, s2): (f64, f64)| (((s2 - s1 * s1 / n) / (n - 1.0)).max(0.0) / n).sqrt();
            prob_stderr = acc_p.into_iter().map(se).collect();
            mean_stderr = acc_m.into_iter().map(se).collect();
        }
    }
    Ok(McPosterior {
        posterior,
        prob_stderr,
        mean_stderr,
    })
}

/// How MC skeletons are shared between trajectories.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ContextPolicy {
    /// One context for every trajectory of a model.
    Shared,
    /// A fresh context per trajectory, reused across its steps.
    PerTrajectory,
}

#[derive(Debug, Clone, PartialEq)]
pub enum VelocityKind {
    Independent,
    BatchMc {
        k: usize,
        replicas: usize,
        policy: ContextPolicy,
    },
    BinaryClosedForm {
        k: usize,
    },
}

/// A velocity field family over a target measure.
#[derive(Debug, Clone)]
pub struct VelocityModel {
    kind: VelocityKind,
    target: TargetMeasure,
    key: StreamKey,
    shared: Option<Arc<McContext>>,
    table: Option<Arc<BinomTailTable>>,
}

impl VelocityModel {
    pub fn independent(target: TargetMeasure) -> Self {
        Self {
            kind: VelocityKind::Independent,
            target,
            key: StreamKey::new(0),
            shared: None,
            table: None,
        }
    }

    /// Expected batch OT field; contexts derive from `key`.
    pub fn batch_mc(
        target: TargetMeasure,
        k: usize,
        replicas: usize,
        policy: ContextPolicy,
        key: StreamKey,
    ) -> Result<Self> {
        let shared = match policy {
            ContextPolicy::Shared => Some(Arc::new(McContext::new(&target, k, replicas, &key)?)),
            ContextPolicy::PerTrajectory => {
                if k == 0 || replicas == 0 {
                    return invalid("batch size and replica count must be at least 1");
                }
                None
            }
        };
        Ok(Self {
            kind: VelocityKind::BatchMc { k, replicas, policy },
            target,
            key,
            shared,
            table: None,
        })
    }

    /// Two-atom model on `{-1, +1}` with its closed-form posterior mean.
    pub fn binary_closed_form(k: usize) -> Result<Self> {
        if k == 0 {
            return invalid("batch size must be at least 1");
        }
        let cloud = AtomCloud::new(1, vec![-1.0, 1.0])?;
        Ok(Self {
            kind: VelocityKind::BinaryClosedForm { k },
            target: TargetMeasure::uniform(cloud),
            key: StreamKey::new(0),
            shared: None,
            table: Some(Arc::new(BinomTailTable::new(k))),
        })
    }

    pub fn kind(&self) -> &VelocityKind {
        &self.kind
    }

    pub fn target(&self) -> &TargetMeasure {
        &self.target
    }

    pub fn cloud(&self) -> &AtomCloud {
        self.target.cloud()
    }

    pub fn dim(&self) -> usize {
        self.target.dim()
    }

    /// The field seen by trajectory `traj`.
    pub fn field(&self, traj: u64) -> Result<Field<'_>> {
        let ctx = match (&self.kind, &self.shared) {
            (_, Some(c)) => Some(c.clone()),
            (VelocityKind::BatchMc { k, replicas, .. }, None) => Some(Arc::new(McContext::new(
                &self.target,
                *k,
                *replicas,
                &self.key.child(traj),
            )?)),
            _ => None,
        };
        Ok(Field { model: self, ctx })
    }
}

/// A deterministic velocity field ready for evaluation.
#[derive(Debug, Clone)]
pub struct Field<'a> {
    model: &'a VelocityModel,
    ctx: Option<Arc<McContext>>,
}

impl Field<'_> {
    pub fn cloud(&self) -> &AtomCloud {
        self.model.cloud()
    }

    pub fn posterior(&self, t: f64, z: &[f64]) -> Result<PosteriorWeights> {
        match &self.model.kind {
            VelocityKind::Independent => posterior_independent(t, z, self.cloud(), self.model.target.weights()),
            VelocityKind::BatchMc { .. } => {
                posterior_batch_mc(t, z, self.ctx.as_ref().expect("batch field has a context"))
            }
            VelocityKind::BinaryClosedForm { .. } => {
                check_t(t)?;
                if z.len() != 1 {
                    return invalid("two-atom model is one-dimensional");
                }
                let table = self.model.table.as_ref().expect("binary field has a table");
                let m = binary_mean(t, z[0], table);
                Ok(PosteriorWeights {
                    probs: vec![0.5 * (1.0 - m), 0.5 * (1.0 + m)],
                })
            }
        }
    }

    /// Writes `u_t(z)` into `out`.
    pub fn velocity(&self, t: f64, z: &[f64], out: &mut [f64]) -> Result<()> {
        if let VelocityKind::BinaryClosedForm { .. } = self.model.kind {
            check_t(t)?;
            let table = self.model.table.as_ref().expect("binary field has a table");
            out[0] = (binary_mean(t, z[0], table) - z[0]) / (1.0 - t);
            return Ok(());
        }
        let p = self.posterior(t, z)?;
        let m = p.mean(self.cloud());
        for ((o, mi), zi) in out.iter_mut().zip(&m).zip(z) {
            *o = (mi - zi) / (1.0 - t);
        }
        Ok(())
    }
}

/// Coupling used to draw `(X_0, X_1)` pairs for posterior statistics.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Coupling {
    Independent,
    Batch {
        k: usize,
        replicas: usize,
        policy: ContextPolicy,
    },
}

/// Mean and standard error of `max_j P(X_1 = v_j | X_t)` at every time in
/// `ts`, over `n_traj` pairs drawn from the coupling.
///
/// Pairs come from `key.child(0)`; MC contexts from `key.child(1)`. Standard
/// errors are taken over batch-level averages of the drawn pairs.
pub fn posterior_max_curve(
    coupling: Coupling,
    target: &TargetMeasure,
    ts: &[f64],
    n_traj: usize,
    key: &StreamKey,
) -> Result<Vec<(f64, f64)>> {
    for &t in ts {
        check_t(t)?;
    }
    let source = GaussianSource::new(target.dim());
    let (k, model) = match coupling {
        Coupling::Independent => (1, VelocityModel::independent(target.clone())),
        Coupling::Batch { k, replicas, policy } => (
            k,
            VelocityModel::batch_mc(target.clone(), k, replicas, policy, key.child(1))?,
        ),
    };
    let pairs = sample_plan(&source, target, k, n_traj, &key.child(0))?;
    let cloud = target.cloud();
    let rows: Vec<(u64, Vec<f64>)> = pairs
        .par_iter()
        .enumerate()
        .map(|(i, p)| {
            let field = model.field(i as u64)?;
            let v = cloud.atom(p.y_index);
            let vals = ts
                .iter()
                .map(|&t| {
                    let xt: Vec<f64> = p.x.iter().zip(v).map(|(a, b)| (1.0 - t) * a + t * b).collect();
                    Ok(field.posterior(t, &xt)?.max())
                })
                .collect::<Result<Vec<f64>>>()?;
            Ok((p.batch_id, vals))
        })
        .collect::<Result<_>>()?;
    let n_batches = rows.last().map_or(0, |r| r.0 as usize + 1);
    let mut out = Vec::with_capacity(ts.len());
    for ti in 0..ts.len() {
        let mut sums = vec![(0.0, 0usize); n_batches];
        for (b, vals) in &rows {
            sums[*b as usize].0 += vals[ti];
            sums[*b as usize].1 += 1;
        }
        let means: Vec<f64> = sums.iter().map(|(s, c)| s / *c as f64).collect();
        if means.len() >= 2 && rows.len() == n_batches * k {
            out.push(mean_stderr(&means));
        } else {
            let all: Vec<f64> = rows.iter().map(|r| r.1[ti]).collect();
            out.push(mean_stderr(&all));
        }
    }
    Ok(out)
}

pub fn posterior_max_expectation(
    coupling: Coupling,
    target: &TargetMeasure,
    t: f64,
    n_traj: usize,
    key: &StreamKey,
) -> Result<(f64, f64)> {
    Ok(posterior_max_curve(coupling, target, &[t], n_traj, key)?[0])
}
