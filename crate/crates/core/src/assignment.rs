//! Exact optimal transport between uniform empirical measures.
//!
//! [`solve_assignment`] is a dense shortest-augmenting-path solver in the
//! Jonker-Volgenant / Crouse formulation. Batches whose targets are drawn from
//! an [`AtomCloud`] repeat atoms, so [`solve_batch`] instead solves the
//! equivalent transportation problem between the `k` sources and the distinct
//! atoms with their multiplicities as capacities ([`TransportSolver`]). Both
//! return the same optimal cost; on tied instances they may return different
//! permutations.

use std::cmp::{Ordering, Reverse};
use std::collections::BinaryHeap;
use std::sync::atomic::{AtomicU64, Ordering as AtomicOrdering};

use crate::error::{invalid, Result};
use crate::measures::{sq_dist, AtomCloud, PairBatch};

static SOLVER_CALLS: AtomicU64 = AtomicU64::new(0);

/// Number of exact OT solves performed by this process so far.
pub fn solver_invocations() -> u64 {
    SOLVER_CALLS.load(AtomicOrdering::Relaxed)
}

fn count_call() {
    SOLVER_CALLS.fetch_add(1, AtomicOrdering::Relaxed);
}

/// Optimal permutation and its mean cost.
#[derive(Debug, Clone, PartialEq)]
pub struct AssignmentResult {
    /// `perm[i]` is the target slot matched to source `i` (zero-based).
    pub perm: Vec<usize>,
    /// `(1/k) sum_i c[i][perm[i]]`.
    pub total_cost: f64,
}

/// Dense row-major `k x k` cost matrix.
#[derive(Debug, Clone, PartialEq)]
pub struct CostMatrix {
    n: usize,
    data: Vec<f64>,
}

impl CostMatrix {
    pub fn new(n: usize, data: Vec<f64>) -> Result<Self> {
        if n == 0 {
            return invalid("cost matrix must be at least 1x1");
        }
        if data.len() != n * n {
            return invalid(format!(
                "cost matrix is not square: {} entries for {n} rows",
                data.len()
            ));
        }
        if data.iter().any(|c| !c.is_finite()) {
            return invalid("cost matrix has non-finite entries");
        }
        Ok(Self { n, data })
    }

    pub fn from_rows(rows: &[Vec<f64>]) -> Result<Self> {
        let n = rows.len();
        if rows.iter().any(|r| r.len() != n) {
            return invalid("cost matrix is not square");
        }
        Self::new(n, rows.concat())
    }

    pub fn size(&self) -> usize {
        self.n
    }

    #[inline]
    pub fn get(&self, i: usize, j: usize) -> f64 {
        self.data[i * self.n + j]
    }

    pub fn transpose(&self) -> Self {
        let n = self.n;
        let mut data = vec![0.0; n * n];
        for i in 0..n {
            for j in 0..n {
                data[j * n + i] = self.data[i * n + j];
            }
        }
        Self { n, data }
    }

    /// Mean cost of a permutation, summed in row order.
    pub fn mean_cost(&self, perm: &[usize]) -> f64 {
        perm.iter()
            .enumerate()
            .map(|(i, &j)| self.get(i, j))
            .sum::<f64>()
            / self.n as f64
    }
}

/// Minimum mean-cost perfect matching.
pub fn solve_assignment(cost: &CostMatrix) -> Result<AssignmentResult> {
    count_call();
    let perm = sap(cost);
    debug_assert!(is_permutation(&perm));
    Ok(AssignmentResult {
        total_cost: cost.mean_cost(&perm),
        perm,
    })
}

pub fn is_permutation(perm: &[usize]) -> bool {
    let mut seen = vec![false; perm.len()];
    for &j in perm {
        if j >= perm.len() || seen[j] {
            return false;
        }
        seen[j] = true;
    }
    true
}

const NONE: usize = usize::MAX;

fn sap(cost: &CostMatrix) -> Vec<usize> {
    let n = cost.n;
    let mut u = vec![0.0; n];
    let mut v = vec![0.0; n];
    let mut spc = vec![f64::INFINITY; n];
    let mut path = vec![NONE; n];
    let mut col4row = vec![NONE; n];
    let mut row4col = vec![NONE; n];
    let mut sr = vec![false; n];
    let mut sc = vec![false; n];
    let mut remaining = vec![0usize; n];

    for cur_row in 0..n {
        let mut min_val = 0.0;
        let mut num_remaining = n;
        for (it, r) in remaining.iter_mut().enumerate() {
            *r = n - it - 1;
        }
        sr.fill(false);
        sc.fill(false);
        spc.fill(f64::INFINITY);

        let mut i = cur_row;
        let mut sink = NONE;
        while sink == NONE {
            let mut index = NONE;
            let mut lowest = f64::INFINITY;
            sr[i] = true;
            let row = &cost.data[i * n..(i + 1) * n];
            for it in 0..num_remaining {
                let j = remaining[it];
                let r = min_val + row[j] - u[i] - v[j];
                if r < spc[j] {
                    path[j] = i;
                    spc[j] = r;
                }
                if spc[j] < lowest || (spc[j] == lowest && row4col[j] == NONE) {
                    lowest = spc[j];
                    index = it;
                }
            }
            min_val = lowest;
            let j = remaining[index];
            if row4col[j] == NONE {
                sink = j;
            } else {
                i = row4col[j];
            }
            sc[j] = true;
            num_remaining -= 1;
            remaining[index] = remaining[num_remaining];
        }

        u[cur_row] += min_val;
        for r in 0..n {
            if sr[r] && r != cur_row {
                u[r] += min_val - spc[col4row[r]];
            }
        }
        for c in 0..n {
            if sc[c] {
                v[c] -= min_val - spc[c];
            }
        }

        let mut j = sink;
        loop {
            let r = path[j];
            row4col[j] = r;
            std::mem::swap(&mut col4row[r], &mut j);
            if r == cur_row {
                break;
            }
        }
    }
    col4row
}

#[derive(Debug, Clone, Copy, PartialEq)]
struct Key(f64);

impl Eq for Key {}

impl PartialOrd for Key {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}

impl Ord for Key {
    fn cmp(&self, other: &Self) -> Ordering {
        self.0.total_cmp(&other.0)
    }
}

/// Min-cost transport from `n` unit-mass sources to `m` sinks with integer
/// capacities (total capacity at least `n`), by successive shortest paths.
///
/// Sinks carry Laguerre-type potentials `y`: every source sits at a minimizer
/// of `c[s][a] - y[a]`. Exchange edges `b -> c` (move one source from `b` to
/// `c`) are kept in lazily pruned heaps keyed by `c[s][c] - c[s][b]`, so one
/// augmentation costs `O(m^2 + path * m log n)`.
///
/// The workspace is reusable; buffers keep their capacity across solves.
#[derive(Debug, Default, Clone)]
pub struct TransportSolver {
    n: usize,
    m: usize,
    cost: Vec<f64>,
    cap: Vec<usize>,
    assign: Vec<usize>,
    load: Vec<usize>,
    y: Vec<f64>,
    heaps: Vec<BinaryHeap<Reverse<(Key, usize)>>>,
    dist: Vec<f64>,
    done: Vec<bool>,
    pred: Vec<(usize, usize)>,
}

impl TransportSolver {
    pub fn new() -> Self {
        Self::default()
    }

    /// Solves for the row-major `n x m` cost table and sink capacities.
    pub fn solve(&mut self, n: usize, cost: &[f64], cap: &[usize]) -> Result<()> {
        let m = cap.len();
        if m == 0 || cost.len() != n * m {
            return invalid("transport cost table has wrong shape");
        }
        if cap.iter().sum::<usize>() < n {
            return invalid("total capacity below number of sources");
        }
        if cost.iter().any(|c| !c.is_finite()) {
            return invalid("transport costs must be finite");
        }
        count_call();
        self.n = n;
        self.m = m;
        self.cost.clear();
        self.cost.extend_from_slice(cost);
        self.cap.clear();
        self.cap.extend_from_slice(cap);
        self.assign.clear();
        self.assign.resize(n, NONE);
        self.load.clear();
        self.load.resize(m, 0);
        self.y.clear();
        self.y.resize(m, 0.0);
        if self.heaps.len() < m * m {
            self.heaps.resize_with(m * m, BinaryHeap::new);
        }
        for h in &mut self.heaps[..m * m] {
            h.clear();
        }
        self.dist.resize(m, 0.0);
        self.done.resize(m, false);
        self.pred.resize(m, (NONE, NONE));
        for s in 0..n {
            self.augment(s);
        }
        Ok(())
    }

    /// Smallest valid exchange weight `c[s][c] - c[s][b]` over sources at `b`.
    fn edge(&mut self, b: usize, c: usize) -> Option<(f64, usize)> {
        let h = &mut self.heaps[b * self.m + c];
        while let Some(&Reverse((Key(w), s))) = h.peek() {
            if self.assign[s] == b {
                return Some((w, s));
            }
            h.pop();
        }
        None
    }

    fn place(&mut self, s: usize, a: usize) {
        self.assign[s] = a;
        let m = self.m;
        let row = &self.cost[s * m..(s + 1) * m];
        for c in 0..m {
            if c != a {
                self.heaps[a * m + c].push(Reverse((Key(row[c] - row[a]), s)));
            }
        }
    }

    fn augment(&mut self, s: usize) {
        let m = self.m;
        for a in 0..m {
            self.dist[a] = self.cost[s * m + a] - self.y[a];
            self.done[a] = false;
            self.pred[a] = (NONE, NONE);
        }
        let sink = loop {
            let mut best = NONE;
            for a in 0..m {
                if !self.done[a] && (best == NONE || self.dist[a] < self.dist[best]) {
                    best = a;
                }
            }
            let b = best;
            self.done[b] = true;
            if self.load[b] < self.cap[b] {
                break b;
            }
            for c in 0..m {
                if self.done[c] {
                    continue;
                }
                if let Some((w, src)) = self.edge(b, c) {
                    let nd = self.dist[b] + w - self.y[c] + self.y[b];
                    if nd < self.dist[c] {
                        self.dist[c] = nd;
                        self.pred[c] = (b, src);
                    }
                }
            }
        };
        let d_sink = self.dist[sink];
        for a in 0..m {
            if self.done[a] {
                self.y[a] += self.dist[a] - d_sink;
            }
        }
        let mut c = sink;
        self.load[sink] += 1;
        loop {
            let (b, src) = self.pred[c];
            if b == NONE {
                break;
            }
            self.place(src, c);
            c = b;
        }
        self.place(s, c);
    }

    /// Sink assigned to each source.
    pub fn assignment(&self) -> &[usize] {
        &self.assign
    }

    pub fn potentials(&self) -> &[f64] {
        &self.y
    }

    /// Total (not mean) cost of the current solution.
    pub fn total_cost(&self) -> f64 {
        (0..self.n)
            .map(|s| self.cost[s * self.m + self.assign[s]])
            .sum()
    }

    /// For every sink `a`, the increase in optimal total cost when the
    /// capacity of `a` is reduced by one, given one unit of spare capacity.
    ///
    /// Sinks with spare capacity get 0; for a full sink this is the shortest
    /// exchange path from `a` to any sink with spare capacity.
    pub fn removal_costs(&mut self) -> Vec<f64> {
        let m = self.m;
        let mut w = vec![f64::INFINITY; m * m];
        for b in 0..m {
            for c in 0..m {
                if b != c {
                    if let Some((e, _)) = self.edge(b, c) {
                        w[b * m + c] = e;
                    }
                }
            }
        }
        // Backward Dijkstra on reduced weights w - y[c] + y[b] >= 0, seeded at
        // the free sinks with value y[f].
        let mut val = vec![f64::INFINITY; m];
        let mut done = vec![false; m];
        for f in 0..m {
            if self.load[f] < self.cap[f] {
                val[f] = self.y[f];
            }
        }
        loop {
            let mut best = NONE;
            for a in 0..m {
                if !done[a] && val[a].is_finite() && (best == NONE || val[a] < val[best]) {
                    best = a;
                }
            }
            if best == NONE {
                break;
            }
            let c = best;
            done[c] = true;
            for b in 0..m {
                if !done[b] && w[b * m + c].is_finite() {
                    let red = w[b * m + c] - self.y[c] + self.y[b];
                    let nv = val[c] + red.max(0.0);
                    if nv < val[b] {
                        val[b] = nv;
                    }
                }
            }
        }
        (0..m)
            .map(|a| {
                if self.load[a] < self.cap[a] {
                    0.0
                } else {
                    (val[a] - self.y[a]).max(0.0)
                }
            })
            .collect()
    }
}

/// Exact OT for a batch whose targets are atoms of `cloud`.
pub fn solve_batch(batch: &PairBatch, cloud: &AtomCloud) -> Result<AssignmentResult> {
    let mut ws = TransportSolver::new();
    solve_batch_with(batch, cloud, &mut ws)
}

/// [`solve_batch`] reusing a solver workspace.
pub fn solve_batch_with(
    batch: &PairBatch,
    cloud: &AtomCloud,
    ws: &mut TransportSolver,
) -> Result<AssignmentResult> {
    let k = batch.len();
    if k == 0 || batch.xs.len() != k * batch.dim {
        return invalid("malformed batch");
    }
    if batch.dim != cloud.dim() {
        return invalid("batch and cloud dimensions differ");
    }
    if batch.xs.iter().any(|x| !x.is_finite()) {
        return invalid("batch sources must be finite");
    }
    let m_all = cloud.len();
    if batch.ys.iter().any(|&y| y >= m_all) {
        return invalid("atom index out of range");
    }
    // Compact to the atoms present in the batch.
    let mut local = vec![NONE; m_all];
    let mut atoms = Vec::new();
    for &y in &batch.ys {
        if local[y] == NONE {
            local[y] = atoms.len();
            atoms.push(y);
        }
    }
    let m = atoms.len();
    let mut cap = vec![0usize; m];
    for &y in &batch.ys {
        cap[local[y]] += 1;
    }
    let mut cost = Vec::with_capacity(k * m);
    for i in 0..k {
        let x = batch.x(i);
        for &a in &atoms {
            cost.push(sq_dist(x, cloud.atom(a)));
        }
    }
    ws.solve(k, &cost, &cap)?;

    let mut slots: Vec<Vec<usize>> = vec![Vec::new(); m];
    for (j, &y) in batch.ys.iter().enumerate().rev() {
        slots[local[y]].push(j);
    }
    let mut perm = vec![0; k];
    for (i, &a) in ws.assignment().iter().enumerate() {
        perm[i] = slots[a].pop().expect("capacities match slot counts");
    }
    debug_assert!(is_permutation(&perm));
    let total = (0..k)
        .map(|i| sq_dist(batch.x(i), cloud.atom(batch.ys[perm[i]])))
        .sum::<f64>();
    Ok(AssignmentResult {
        perm,
        total_cost: total / k as f64,
    })
}

/// Squared-distance cost matrix of a batch.
pub fn batch_cost_matrix(batch: &PairBatch, cloud: &AtomCloud) -> Result<CostMatrix> {
    let k = batch.len();
    let mut data = Vec::with_capacity(k * k);
    for i in 0..k {
        for &y in &batch.ys {
            data.push(sq_dist(batch.x(i), cloud.atom(y)));
        }
    }
    CostMatrix::new(k, data)
}

fn sort_order(v: &[f64]) -> Vec<usize> {
    let mut idx: Vec<usize> = (0..v.len()).collect();
    idx.sort_by(|&a, &b| v[a].total_cmp(&v[b]).then(a.cmp(&b)));
    idx
}

/// Monotone rearrangement: the i-th smallest `x` is matched with the i-th
/// smallest `y`.
pub fn assignment_1d(xs: &[f64], ys: &[f64]) -> Result<AssignmentResult> {
    if xs.len() != ys.len() {
        return invalid(format!(
            "length mismatch: {} sources, {} targets",
            xs.len(),
            ys.len()
        ));
    }
    if xs.is_empty() {
        return invalid("empty input");
    }
    if xs.iter().chain(ys).any(|v| !v.is_finite()) {
        return invalid("non-finite input");
    }
    let ox = sort_order(xs);
    let oy = sort_order(ys);
    let mut perm = vec![0; xs.len()];
    for (&i, &j) in ox.iter().zip(&oy) {
        perm[i] = j;
    }
    let total = perm
        .iter()
        .enumerate()
        .map(|(i, &j)| (xs[i] - ys[j]).powi(2))
        .sum::<f64>();
    Ok(AssignmentResult {
        perm,
        total_cost: total / xs.len() as f64,
    })
}

/// `int_0^1 (F^-(u) - G^-(u))^2 du` by the midpoint rule on `n_nodes` cells.
pub fn w2sq_quantile_1d<F, G>(qf: F, qg: G, n_nodes: usize) -> Result<f64>
where
    F: Fn(f64) -> f64,
    G: Fn(f64) -> f64,
{
    if n_nodes < 2 {
        return invalid("need at least two quadrature nodes");
    }
    let h = 1.0 / n_nodes as f64;
    let mut acc = 0.0;
    for i in 0..n_nodes {
        let u = (i as f64 + 0.5) * h;
        let (a, b) = (qf(u), qg(u));
        if !a.is_finite() || !b.is_finite() {
            return invalid(format!("non-finite quantile at u = {u}"));
        }
        acc += (a - b) * (a - b);
    }
    Ok(acc * h)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::measures::{sample_batch, GaussianSource, TargetMeasure};
    use crate::rng::StreamKey;
    use proptest::prelude::*;

    fn brute_force(c: &CostMatrix) -> f64 {
        fn rec(c: &CostMatrix, perm: &mut Vec<usize>, used: &mut [bool], best: &mut f64) {
            let n = c.size();
            if perm.len() == n {
                *best = best.min(c.mean_cost(perm));
                return;
            }
            for j in 0..n {
                if !used[j] {
                    used[j] = true;
                    perm.push(j);
                    rec(c, perm, used, best);
                    perm.pop();
                    used[j] = false;
                }
            }
        }
        let mut best = f64::INFINITY;
        rec(c, &mut Vec::new(), &mut vec![false; c.size()], &mut best);
        best
    }

    fn random_matrix(n: usize, key: &StreamKey) -> CostMatrix {
        let mut r = key.rng();
        CostMatrix::new(n, (0..n * n).map(|_| r.uniform()).collect()).unwrap()
    }

    #[test]
    fn trivial_cases() {
        let c = CostMatrix::new(1, vec![3.5]).unwrap();
        let r = solve_assignment(&c).unwrap();
        assert_eq!(r.perm, vec![0]);
        assert_eq!(r.total_cost, 3.5);
        let c = CostMatrix::from_rows(&[vec![0.0, 1.0], vec![1.0, 0.0]]).unwrap();
        let r = solve_assignment(&c).unwrap();
        assert_eq!(r.perm, vec![0, 1]);
        assert_eq!(r.total_cost, 0.0);
    }

    #[test]
    fn validation_errors() {
        assert!(CostMatrix::new(2, vec![0.0; 3]).is_err());
        assert!(CostMatrix::new(1, vec![f64::INFINITY]).is_err());
        assert!(CostMatrix::from_rows(&[vec![0.0, 1.0]]).is_err());
        assert!(assignment_1d(&[0.0], &[0.0, 1.0]).is_err());
    }

    #[test]
    fn oracle_equivalence_small_k() {
        for trial in 0..1000u64 {
            let n = 2 + (trial % 5) as usize;
            let c = random_matrix(n, &StreamKey::with_path(1, &[trial]));
            let r = solve_assignment(&c).unwrap();
            assert!(is_permutation(&r.perm));
            assert_eq!(r.total_cost, brute_force(&c), "trial {trial}");
        }
    }

    #[test]
    fn transpose_gives_inverse() {
        for trial in 0..200u64 {
            let c = random_matrix(6, &StreamKey::with_path(2, &[trial]));
            let a = solve_assignment(&c).unwrap();
            let b = solve_assignment(&c.transpose()).unwrap();
            for (i, &j) in a.perm.iter().enumerate() {
                assert_eq!(b.perm[j], i);
            }
            assert!((a.total_cost - b.total_cost).abs() <= 1e-12);
        }
    }

    #[test]
    fn deterministic_output() {
        let c = random_matrix(40, &StreamKey::new(3));
        assert_eq!(solve_assignment(&c).unwrap(), solve_assignment(&c).unwrap());
    }

    fn cloud_1d(pts: &[f64]) -> AtomCloud {
        AtomCloud::new(1, pts.to_vec()).unwrap()
    }

    #[test]
    fn batch_k1_and_brute_force() {
        let cloud = AtomCloud::uniform_cube(4, 3, &StreamKey::new(4)).unwrap();
        let t = TargetMeasure::uniform(cloud.clone());
        let s = GaussianSource::new(3);
        let b = sample_batch(&s, &t, 1, &StreamKey::new(5)).unwrap();
        let r = solve_batch(&b, &cloud).unwrap();
        assert_eq!(r.total_cost, sq_dist(b.x(0), cloud.atom(b.ys[0])));
        for trial in 0..200u64 {
            let b = sample_batch(&s, &t, 5, &StreamKey::with_path(6, &[trial])).unwrap();
            let r = solve_batch(&b, &cloud).unwrap();
            let brute = brute_force(&batch_cost_matrix(&b, &cloud).unwrap());
            assert!((r.total_cost - brute).abs() <= 1e-12 * brute.max(1.0));
        }
    }

    #[test]
    fn batch_matches_dense_solver() {
        for (m, d, k) in [(5, 10, 64), (3, 2, 200), (12, 4, 90), (50, 3, 40)] {
            let cloud = AtomCloud::uniform_cube(m, d, &StreamKey::with_path(7, &[m as u64])).unwrap();
            let t = TargetMeasure::uniform(cloud.clone());
            let s = GaussianSource::new(d);
            for trial in 0..10u64 {
                let b = sample_batch(&s, &t, k, &StreamKey::with_path(8, &[m as u64, trial])).unwrap();
                let a = solve_batch(&b, &cloud).unwrap();
                let dense = solve_assignment(&batch_cost_matrix(&b, &cloud).unwrap()).unwrap();
                assert!(
                    (a.total_cost - dense.total_cost).abs() <= 1e-12 * dense.total_cost.max(1.0),
                    "m={m} k={k}: {} vs {}",
                    a.total_cost,
                    dense.total_cost
                );
            }
        }
    }

    #[test]
    fn monotone_in_1d() {
        let cloud = cloud_1d(&[-2.0, -0.5, 1.0, 3.0]);
        let t = TargetMeasure::uniform(cloud.clone());
        let s = GaussianSource::new(1);
        for trial in 0..100u64 {
            let b = sample_batch(&s, &t, 12, &StreamKey::with_path(9, &[trial])).unwrap();
            let r = solve_batch(&b, &cloud).unwrap();
            let mut pairs: Vec<(f64, f64)> = (0..12)
                .map(|i| (b.xs[i], cloud.atom(b.ys[r.perm[i]])[0]))
                .collect();
            pairs.sort_by(|a, b| a.0.total_cmp(&b.0));
            assert!(pairs.windows(2).all(|w| w[0].1 <= w[1].1));
        }
    }

    #[test]
    fn one_dimensional_consistency() {
        for trial in 0..500u64 {
            let k = 1 + (trial % 50) as usize;
            let key = StreamKey::with_path(10, &[trial]);
            let cloud = AtomCloud::uniform_cube(1 + (trial % 7) as usize, 1, &key.child(0)).unwrap();
            let t = TargetMeasure::uniform(cloud.clone());
            let b = sample_batch(&GaussianSource::new(1), &t, k, &key.child(1)).unwrap();
            let ys: Vec<f64> = b.ys.iter().map(|&y| cloud.atom(y)[0]).collect();
            let a = assignment_1d(&b.xs, &ys).unwrap();
            let r = solve_batch(&b, &cloud).unwrap();
            assert!((a.total_cost - r.total_cost).abs() <= 1e-12, "trial {trial}");
        }
    }

    #[test]
    fn assignment_1d_examples() {
        assert_eq!(assignment_1d(&[3.0, 1.0, 2.0], &[1.0, 2.0, 3.0]).unwrap().total_cost, 0.0);
        assert_eq!(assignment_1d(&[0.0, 1.0], &[1.0, 0.0]).unwrap().total_cost, 0.0);
    }

    #[test]
    fn removal_costs_match_resolve() {
        // k - 1 sources into k slots; compare against re-solving with one
        // copy of each atom removed.
        let mut r = StreamKey::new(11).rng();
        for trial in 0..50 {
            let n = 7 + trial % 5;
            let m = 4;
            let cost: Vec<f64> = (0..n * m).map(|_| r.uniform() * 4.0).collect();
            let mut cap = vec![0usize; m];
            for _ in 0..n + 1 {
                cap[r.below(m)] += 1;
            }
            let mut ws = TransportSolver::new();
            ws.solve(n, &cost, &cap).unwrap();
            let base = ws.total_cost();
            let rc = ws.removal_costs();
            for a in 0..m {
                if cap[a] == 0 {
                    continue;
                }
                let mut c2 = cap.clone();
                c2[a] -= 1;
                let mut ws2 = TransportSolver::new();
                ws2.solve(n, &cost, &c2).unwrap();
                assert!((base + rc[a] - ws2.total_cost()).abs() < 1e-10, "trial {trial} atom {a}");
            }
        }
    }

    #[test]
    fn quantile_w2() {
        let v = w2sq_quantile_1d(|u| u, |u| 2.0 * u - 1.0, 10_000).unwrap();
        assert!((v - 1.0 / 3.0).abs() < 1e-6);
        assert_eq!(w2sq_quantile_1d(|u| u, |u| u, 10).unwrap(), 0.0);
        let a = 0.7;
        let v = w2sq_quantile_1d(|u| u, |u| u + a, 100).unwrap();
        assert!((v - a * a).abs() < 1e-10);
        assert!(w2sq_quantile_1d(|u| u, |u| 1.0 / (u - 0.5), 3).is_err());
    }

    proptest! {
        #[test]
        fn prop_dense_matches_brute(n in 1usize..=6, seed in any::<u64>()) {
            let c = random_matrix(n, &StreamKey::new(seed));
            let r = solve_assignment(&c).unwrap();
            prop_assert!(is_permutation(&r.perm));
            prop_assert_eq!(r.total_cost, brute_force(&c));
        }

        #[test]
        fn prop_transport_matches_dense(n in 1usize..30, m in 1usize..6, seed in any::<u64>()) {
            let mut r = StreamKey::new(seed).rng();
            let ys: Vec<usize> = (0..n).map(|_| r.below(m)).collect();
            let xs: Vec<f64> = (0..n * 2).map(|_| r.gaussian()).collect();
            let cloud = AtomCloud::uniform_cube(m, 2, &StreamKey::new(seed ^ 1)).unwrap();
            let b = PairBatch { dim: 2, xs, ys };
            let t = solve_batch(&b, &cloud).unwrap();
            let d = solve_assignment(&batch_cost_matrix(&b, &cloud).unwrap()).unwrap();
            prop_assert!(is_permutation(&t.perm));
            prop_assert!((t.total_cost - d.total_cost).abs() <= 1e-12 * d.total_cost.max(1.0));
        }
    }
}
