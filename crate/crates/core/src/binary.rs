//! The two-atom model: `mu = N(0, 1)`, `nu = Unif{-1, +1}`.
//!
//! Everything here is closed form up to one-dimensional quadrature. With
//! `N ~ Bin(k, 1/2)` the number of `-1` targets in a batch and
//! `B_r = P(N >= r)`, the probability that the batch-`k` plan sends `x` to
//! `-1` is
//!
//! ```text
//! q_k(x) = sum_{j=0}^{k-1} C(k-1, j) u^j (1-u)^{k-1-j} B_{j+1},   u = Phi(x)
//! ```
//!
//! and the posterior mean of the induced flow is
//! `m_t(z) = tanh(s xi + (1/2) ln(q_k(s - xi) / q_k(s + xi)))` with
//! `s = t / (1 - t)`, `xi = z / (1 - t)`.

use std::sync::LazyLock;

use rayon::prelude::*;

use crate::quadrature::GaussLegendre;
use crate::special::{ln_binom, ln_binom_row, log_norm_cdf, log_norm_pdf, logaddexp, norm_pdf};

const LN2: f64 = std::f64::consts::LN_2;

/// Tail probabilities `B_r = P(Bin(k, 1/2) >= r)` for `r = 1..=k`.
#[derive(Debug, Clone, PartialEq)]
pub struct BinomTailTable {
    k: usize,
    /// `tail[r - 1] = B_r`.
    tail: Vec<f64>,
    log_tail: Vec<f64>,
    /// `ln C(k - 1, j)` for `j = 0..k`.
    ln_choose: Vec<f64>,
    /// `ln C(k - 2, j)` for `j = 0..k-1` (empty when `k = 1`).
    ln_choose2: Vec<f64>,
    /// `ln P(N = i)` for `i = 0..=k`.
    log_pmf: Vec<f64>,
}

impl BinomTailTable {
    /// Exact integer accumulation for `k <= 64`, log-space suffix sums above.
    pub fn new(k: usize) -> Self {
        assert!(k >= 1, "k must be positive");
        let (tail, log_tail) = if k <= 64 {
            let mut c: u128 = 1;
            let mut row = Vec::with_capacity(k + 1);
            for i in 0..=k {
                row.push(c);
                c = c * (k - i) as u128 / (i + 1) as u128;
            }
            let mut acc: u128 = 0;
            let mut counts = vec![0u128; k];
            for r in (1..=k).rev() {
                acc += row[r];
                counts[r - 1] = acc;
            }
            let scale = 2f64.powi(-(k as i32));
            let tail: Vec<f64> = counts.iter().map(|&c| c as f64 * scale).collect();
            let log_tail = counts
                .iter()
                .map(|&c| (c as f64).ln() - k as f64 * LN2)
                .collect();
            (tail, log_tail)
        } else {
            let lp: Vec<f64> = ln_binom_row(k as u64)
                .iter()
                .map(|c| c - k as f64 * LN2)
                .collect();
            let mut log_tail = vec![0.0; k];
            let half = k / 2;
            let mut acc = f64::NEG_INFINITY;
            for r in (half + 1..=k).rev() {
                acc = logaddexp(acc, lp[r]);
                log_tail[r - 1] = acc;
            }
            // Below the median B_r = 1 - P(N < r) keeps full relative precision.
            let mut low = f64::NEG_INFINITY;
            for r in 1..=half {
                low = logaddexp(low, lp[r - 1]);
                log_tail[r - 1] = (-low.exp()).ln_1p();
            }
            let tail = log_tail.iter().map(|l| l.exp()).collect();
            (tail, log_tail)
        };
        let ln_choose = ln_binom_row(k as u64 - 1);
        let ln_choose2 = if k >= 2 {
            ln_binom_row(k as u64 - 2)
        } else {
            Vec::new()
        };
        let log_pmf = ln_binom_row(k as u64)
            .iter()
            .map(|c| c - k as f64 * LN2)
            .collect();
        Self {
            k,
            tail,
            log_tail,
            ln_choose,
            ln_choose2,
            log_pmf,
        }
    }

    pub fn k(&self) -> usize {
        self.k
    }

    /// `B_r`, `1 <= r <= k`.
    pub fn tail(&self, r: usize) -> f64 {
        self.tail[r - 1]
    }

    pub fn log_tail(&self, r: usize) -> f64 {
        self.log_tail[r - 1]
    }

    pub fn tails(&self) -> &[f64] {
        &self.tail
    }

    #[inline]
    fn term(&self, j: usize, lu: f64, l1u: f64) -> f64 {
        let k1 = (self.k - 1) as f64;
        let jf = j as f64;
        let mut v = self.ln_choose[j] + self.log_tail[j];
        if j > 0 {
            v += jf * lu;
        }
        if j < self.k - 1 {
            v += (k1 - jf) * l1u;
        }
        v
    }

    /// `ln q_k(x)`.
    pub fn log_q(&self, x: f64) -> f64 {
        let lu = log_norm_cdf(x);
        let l1u = log_norm_cdf(-x);
        let start = ((self.k - 1) as f64 * lu.exp()).round() as usize;
        log_sum_unimodal(self.k, start, |j| self.term(j, lu, l1u))
    }

    /// `ln(-q_k'(x))` for `k >= 2`, from
    /// `-q_k'(x) = phi(x) (k-1) sum_j C(k-2, j) u^j (1-u)^{k-2-j} P(N = j+1)`.
    pub fn log_neg_dq(&self, x: f64) -> f64 {
        assert!(self.k >= 2);
        let lu = log_norm_cdf(x);
        let l1u = log_norm_cdf(-x);
        let k2 = self.k - 2;
        let start = (k2 as f64 * lu.exp()).round() as usize;
        let s = log_sum_unimodal(k2 + 1, start, |j| {
            let mut v = self.ln_choose2[j] + self.log_pmf[j + 1];
            if j > 0 {
                v += j as f64 * lu;
            }
            if j < k2 {
                v += (k2 - j) as f64 * l1u;
            }
            v
        });
        log_norm_pdf(x) + ((self.k - 1) as f64).ln() + s
    }

    /// `ln q_k(s - xi) - ln q_k(s + xi)`.
    ///
    /// For small `|xi|` the two logarithms nearly cancel, so the difference of
    /// `q` is integrated from `-q_k'` instead.
    pub fn log_q_ratio(&self, s: f64, xi: f64) -> f64 {
        if self.k == 1 || xi == 0.0 {
            return 0.0;
        }
        let h = xi.abs();
        // Width of the interval in units of the integrand's decay scale.
        let lam = h * (1.0 + s.abs() + h);
        if h > 0.3 || lam > 4.0 {
            return self.log_q(s - xi) - self.log_q(s + xi);
        }
        let gl = if lam < 1e-3 { &*GL3 } else { &*GL12 };
        let lo = self.log_q(s + h);
        let mut delta = 0.0;
        for (u, w) in gl.nodes.iter().zip(&gl.weights) {
            delta += h * w * (self.log_neg_dq(s + h * u) - lo).exp();
        }
        let d = delta.ln_1p();
        if xi > 0.0 {
            d
        } else {
            -d
        }
    }
}

static GL3: LazyLock<GaussLegendre> = LazyLock::new(|| GaussLegendre::new(3));
static GL12: LazyLock<GaussLegendre> = LazyLock::new(|| GaussLegendre::new(12));

/// `ln sum_{j < len} exp(term(j))` for a log-concave sequence, starting the
/// search for the mode at `start`. Terms more than 40 nats below the mode are
/// dropped.
fn log_sum_unimodal<F: Fn(usize) -> f64>(len: usize, start: usize, term: F) -> f64 {
    if len <= 128 {
        let terms: Vec<f64> = (0..len).map(&term).collect();
        let peak = terms.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        return peak + terms.iter().map(|t| (t - peak).exp()).sum::<f64>().ln();
    }
    let mut j = start.min(len - 1);
    let mut peak = term(j);
    loop {
        if j + 1 < len {
            let up = term(j + 1);
            if up > peak {
                j += 1;
                peak = up;
                continue;
            }
        }
        if j > 0 {
            let down = term(j - 1);
            if down > peak {
                j -= 1;
                peak = down;
                continue;
            }
        }
        break;
    }
    let mut sum = 1.0;
    let mut i = j;
    while i > 0 {
        i -= 1;
        let d = term(i) - peak;
        if d < -40.0 {
            break;
        }
        sum += d.exp();
    }
    for i in j + 1..len {
        let d = term(i) - peak;
        if d < -40.0 {
            break;
        }
        sum += d.exp();
    }
    peak + sum.ln()
}

/// `q_k(x)`: probability the batch-`k` plan sends `x` to the atom `-1`.
pub fn q_k(x: f64, table: &BinomTailTable) -> f64 {
    table.log_q(x).exp()
}

/// Argument `a` of `m_t(z) = tanh(a)`.
pub fn binary_mean_arg(t: f64, z: f64, table: &BinomTailTable) -> f64 {
    let s = t / (1.0 - t);
    let xi = z / (1.0 - t);
    mean_arg(s, xi, table)
}

#[inline]
fn mean_arg(s: f64, xi: f64, table: &BinomTailTable) -> f64 {
    if table.k == 1 {
        return s * xi;
    }
    s * xi + 0.5 * table.log_q_ratio(s, xi)
}

/// Posterior mean `E[X_1 | X_t = z]` under the batch-`k` plan.
pub fn binary_mean(t: f64, z: f64, table: &BinomTailTable) -> f64 {
    assert!((0.0..1.0).contains(&t), "t must lie in [0, 1)");
    binary_mean_arg(t, z, table).tanh()
}

/// `1 - tanh(a)` without cancellation for large positive `a`.
#[inline]
pub fn one_minus_tanh(a: f64) -> f64 {
    if a >= 0.0 {
        let e = (-2.0 * a).exp();
        2.0 * e / (1.0 + e)
    } else {
        1.0 + (-a).tanh()
    }
}

/// Euler iterates `f_{m,n}` of the two-atom flow on a set of nodes, with the
/// complement `g = 1 - f` carried alongside.
#[derive(Debug, Clone, PartialEq)]
pub struct BinaryEulerState {
    pub n: usize,
    pub m: usize,
    pub nodes: Vec<f64>,
    pub f: Vec<f64>,
    pub g: Vec<f64>,
}

impl BinaryEulerState {
    pub fn new(n: usize, nodes: Vec<f64>) -> Self {
        assert!(n >= 1, "n must be positive");
        let f = nodes.clone();
        let g = nodes.iter().map(|x| 1.0 - x).collect();
        Self {
            n,
            m: 0,
            nodes,
            f,
            g,
        }
    }

    pub fn is_done(&self) -> bool {
        self.m == self.n
    }

    /// `f <- (1 - 1/r) f + (1/r) m_{m/n}(f)` with `r = n - m`.
    pub fn step(&mut self, table: &BinomTailTable) {
        assert!(!self.is_done());
        let r = (self.n - self.m) as f64;
        let s = self.m as f64 / r;
        let scale = self.n as f64 / r;
        let w = 1.0 / r;
        for (f, g) in self.f.iter_mut().zip(self.g.iter_mut()) {
            let a = mean_arg(s, *f * scale, table);
            *f = (1.0 - w) * *f + w * a.tanh();
            *g = (1.0 - w) * *g + w * one_minus_tanh(a);
        }
        self.m += 1;
    }

    pub fn run(&mut self, table: &BinomTailTable) {
        while !self.is_done() {
            self.step(table);
        }
    }
}

/// `(f_n(x), 1 - f_n(x))` for one starting point.
pub fn euler_endpoint(x: f64, n: usize, table: &BinomTailTable) -> (f64, f64) {
    let mut st = BinaryEulerState::new(n, vec![x]);
    st.run(table);
    (st.f[0], st.g[0])
}

/// Composite Gauss-Legendre rule on `(0, x_max)` with geometrically growing
/// panels anchored below the transition of `1 - f_n`.
#[derive(Debug, Clone, PartialEq)]
pub struct QuadSpec {
    pub points_per_panel: usize,
    pub panel_ratio: f64,
    pub x_max: f64,
    /// First panel edge as a fraction of the point where `1 - f_n = 1/2`.
    pub rel_floor: f64,
    /// First panel edge when `1 - f_n` never drops to 1/2.
    pub abs_floor: f64,
}

impl Default for QuadSpec {
    fn default() -> Self {
        Self {
            points_per_panel: 10,
            panel_ratio: 2.0,
            x_max: 38.0,
            rel_floor: 1e-6,
            abs_floor: 1e-3,
        }
    }
}

impl QuadSpec {
    /// Nodes and weights for an integrand whose complement falls to 1/2 near
    /// `x_half` (if any).
    pub fn rule(&self, x_half: Option<f64>) -> (Vec<f64>, Vec<f64>) {
        let gl = GaussLegendre::new(self.points_per_panel);
        let floor = match x_half {
            Some(h) => (h * self.rel_floor).max(f64::MIN_POSITIVE),
            None => self.abs_floor,
        };
        let mut xs = Vec::new();
        let mut ws = Vec::new();
        let mut push = |a: f64, b: f64| {
            for (x, w) in gl.on(a, b) {
                xs.push(x);
                ws.push(w);
            }
        };
        push(0.0, floor);
        let mut a = floor;
        while a < self.x_max {
            let b = (a * self.panel_ratio).min(self.x_max);
            push(a, b);
            a = b;
        }
        (xs, ws)
    }
}

/// Point where `1 - f_n` crosses 1/2, by bisection in `ln x`.
fn half_point(n: usize, table: &BinomTailTable, x_max: f64) -> Option<f64> {
    let g = |x: f64| euler_endpoint(x, n, table).1;
    if g(x_max) >= 0.5 {
        return None;
    }
    let (mut lo, mut hi) = (1e-300f64.ln(), x_max.ln());
    for _ in 0..200 {
        let mid = 0.5 * (lo + hi);
        if g(mid.exp()) >= 0.5 {
            lo = mid;
        } else {
            hi = mid;
        }
        if hi - lo < 1e-4 {
            break;
        }
    }
    Some((0.5 * (lo + hi)).exp())
}

/// `E_{n,k} = 2 int_0^inf (1 - f_n(x)) phi(x) dx`.
pub fn binary_euler_error(n: usize, table: &BinomTailTable, quad: &QuadSpec) -> f64 {
    assert!(n >= 1, "n must be positive");
    let (xs, ws) = quad.rule(half_point(n, table, quad.x_max));
    let mut st = BinaryEulerState::new(n, xs);
    st.run(table);
    2.0 * st
        .nodes
        .iter()
        .zip(&st.g)
        .zip(&ws)
        .map(|((x, g), w)| w * g * norm_pdf(*x))
        .sum::<f64>()
}

/// `E_{1,k} = (2/k) E|B - B'|` with `B, B'` independent `Bin(k, 1/2)`.
///
/// `B - B' + k ~ Bin(2k, 1/2)`, so `P(B - B' = d) = C(2k, k + d) / 4^k`.
pub fn binary_one_step_exact(k: usize) -> f64 {
    assert!(k >= 1);
    if k <= 30 {
        let n = 2 * k;
        let mut c: u128 = 1;
        let mut acc: u128 = 0;
        for i in 0..=n {
            if i > k {
                acc += (i - k) as u128 * c;
            }
            c = c * (n - i) as u128 / (i + 1) as u128;
        }
        // Both tails contribute equally.
        let e_abs = 2.0 * acc as f64 * 4f64.powi(-(k as i32));
        return 2.0 / k as f64 * e_abs;
    }
    let mut acc = f64::NEG_INFINITY;
    let base = -((2 * k) as f64) * LN2;
    for d in 1..=k {
        let l = (d as f64).ln() + ln_binom(2 * k as u64, (k + d) as u64) + base;
        acc = logaddexp(acc, l);
        if l < acc - 40.0 {
            break;
        }
    }
    2.0 / k as f64 * 2.0 * acc.exp()
}

/// `ln f'_{n,n}(0) = sum_{r=1}^n ln c_r`, `c_r = 1 + (n^2 - n r - r^2) / r^3`.
pub fn log_slope_product(n: usize) -> f64 {
    assert!(n >= 1);
    (1..=n).map(|r| slope_factor(n, r).ln()).sum()
}

/// `c_r` for step count `n`.
pub fn slope_factor(n: usize, r: usize) -> f64 {
    let (n, r) = (n as f64, r as f64);
    1.0 + (n * n - n * r - r * r) / (r * r * r)
}

pub fn slope_product(n: usize) -> f64 {
    log_slope_product(n).exp()
}

/// `phi(1) / (2 f'_{n,n}(0))`, a lower bound on `E_{n,1}` once `n >= 4`.
pub fn error_lower_bound(n: usize) -> f64 {
    norm_pdf(1.0) / (2.0 * slope_product(n))
}

/// `E_{n,k}` on a grid; rows follow `ns`, columns follow `ks`.
pub fn contour_grid(ns: &[usize], ks: &[usize], quad: &QuadSpec) -> Vec<Vec<f64>> {
    let tables: Vec<BinomTailTable> = ks.par_iter().map(|&k| BinomTailTable::new(k)).collect();
    ns.par_iter()
        .map(|&n| {
            tables
                .par_iter()
                .map(|t| binary_euler_error(n, t, quad))
                .collect()
        })
        .collect()
}

/// Smallest `k <= k_max` with `E_{n,k} <= target`, scanning upward.
pub fn smallest_k_below(n: usize, target: f64, k_max: usize, quad: &QuadSpec) -> Option<usize> {
    (1..=k_max).find(|&k| binary_euler_error(n, &BinomTailTable::new(k), quad) <= target)
}

#[cfg(test)]
mod tests {
    use super::*;

    fn quad() -> QuadSpec {
        QuadSpec::default()
    }

    #[test]
    fn tail_table_small() {
        assert_eq!(BinomTailTable::new(1).tails(), &[0.5]);
        assert_eq!(BinomTailTable::new(2).tails(), &[0.75, 0.25]);
        for k in [1usize, 5, 64, 65, 300, 2000] {
            let t = BinomTailTable::new(k);
            let last = t.tail(k);
            assert!((last - 2f64.powi(-(k as i32))).abs() <= 1e-12 * 2f64.powi(-(k as i32)));
            assert!((t.tail(1) - (1.0 - 2f64.powi(-(k as i32)))).abs() < 1e-13);
            assert!(t.tails().windows(2).all(|w| w[0] >= w[1]));
            if k <= 32 {
                assert!(t.tails().windows(2).all(|w| w[0] > w[1]));
            }
        }
        // Exact and log-space routes agree at the switch.
        let a = BinomTailTable::new(64);
        let mut log_route = f64::NEG_INFINITY;
        for r in (10..=64).rev() {
            log_route = logaddexp(log_route, ln_binom(64, r) - 64.0 * LN2);
        }
        assert!((a.log_tail(10) - log_route).abs() < 1e-12);
    }

    #[test]
    fn q_k_examples() {
        let t1 = BinomTailTable::new(1);
        for x in [-3.0, 0.0, 2.5] {
            assert!((q_k(x, &t1) - 0.5).abs() < 1e-15);
        }
        for k in [2, 7, 64, 200, 1000] {
            let t = BinomTailTable::new(k);
            assert!((q_k(0.0, &t) - 0.5).abs() < 1e-12, "k={k}");
            let b = t.tail(k);
            assert!((q_k(40.0, &t) - b).abs() < 1e-10 * b, "k={k}");
        }
    }

    #[test]
    fn q_k_brute_force_small() {
        // Enumerate targets and source ranks: x is matched to -1 iff the number
        // of other sources below x is less than the number of -1 targets.
        let k = 4;
        let t = BinomTailTable::new(k);
        for &x in &[-1.3, -0.2, 0.4, 1.7] {
            let u = crate::special::norm_cdf(x);
            let mut q = 0.0;
            for j in 0..k {
                let pj = (ln_binom(3, j as u64)).exp() * u.powi(j as i32) * (1.0 - u).powi((3 - j) as i32);
                let mut tail = 0.0;
                for nm in j + 1..=k {
                    tail += ln_binom(k as u64, nm as u64).exp() / 16.0;
                }
                q += pj * tail;
            }
            assert!((q - q_k(x, &t)).abs() < 1e-14);
        }
    }

    #[test]
    fn q_k_oddness() {
        for k in [1, 3, 10, 129, 500] {
            let t = BinomTailTable::new(k);
            for i in -40..=40 {
                let x = i as f64 * 0.25;
                let s = q_k(x, &t) + q_k(-x, &t);
                assert!((s - 1.0).abs() < 1e-12, "k={k} x={x} s={s}");
            }
        }
    }

    #[test]
    fn mean_examples() {
        let t1 = BinomTailTable::new(1);
        for &(t, z) in &[(0.0f64, 0.3f64), (0.5, -1.2), (0.9, 0.05)] {
            let want = (t * z / ((1.0 - t) * (1.0 - t))).tanh();
            assert!((binary_mean(t, z, &t1) - want).abs() < 1e-15);
        }
        for k in [1, 8, 300] {
            let t = BinomTailTable::new(k);
            for tt in [0.0, 0.3, 0.99] {
                assert_eq!(binary_mean(tt, 0.0, &t), 0.0);
            }
        }
    }

    #[test]
    fn n2_k1_is_tanh() {
        let t = BinomTailTable::new(1);
        for x in [0.1, 0.7, 2.0, -1.5] {
            let (f, g) = euler_endpoint(x, 2, &t);
            assert!((f - x.tanh()).abs() < 1e-15);
            assert!((g - one_minus_tanh(x)).abs() < 1e-15);
        }
        let mut st = BinaryEulerState::new(2, vec![0.8]);
        st.step(&t);
        assert!((st.f[0] - 0.4).abs() < 1e-16);
    }

    #[test]
    fn one_step_exact_values() {
        assert_eq!(binary_one_step_exact(1), 1.0);
        // Closed form 2 C(2k, k) / 4^k.
        for k in [2usize, 10, 30, 31, 200] {
            let want = 2.0 * (ln_binom(2 * k as u64, k as u64) - 2.0 * k as f64 * LN2).exp();
            let got = binary_one_step_exact(k);
            assert!((got - want).abs() < 1e-12 * want, "k={k}");
        }
        // Direct convolution of the two pmfs.
        for k in [1usize, 3, 9] {
            let pmf: Vec<f64> = (0..=k).map(|i| (ln_binom(k as u64, i as u64) - k as f64 * LN2).exp()).collect();
            let mut e = 0.0;
            for (a, pa) in pmf.iter().enumerate() {
                for (b, pb) in pmf.iter().enumerate() {
                    e += pa * pb * (a as f64 - b as f64).abs();
                }
            }
            assert!((binary_one_step_exact(k) - 2.0 / k as f64 * e).abs() < 1e-14);
        }
        let k = 10_000;
        let r = binary_one_step_exact(k) * (std::f64::consts::PI * k as f64).sqrt() / 2.0;
        assert!((0.99..=1.01).contains(&r), "{r}");
    }

    #[test]
    fn quadrature_routes_agree() {
        for k in [1usize, 2, 8, 64] {
            let t = BinomTailTable::new(k);
            let e = binary_euler_error(1, &t, &quad());
            assert!((e - binary_one_step_exact(k)).abs() < 1e-8, "k={k}: {e}");
        }
        // n = 2, k = 1 against an independent fine rule on (0, 12).
        let gl = GaussLegendre::new(40);
        let mut want = 0.0;
        for i in 0..120 {
            let (a, b) = (i as f64 * 0.1, (i + 1) as f64 * 0.1);
            want += 2.0 * gl.integrate(a, b, |x| one_minus_tanh(x) * norm_pdf(x));
        }
        let got = binary_euler_error(2, &BinomTailTable::new(1), &quad());
        assert!((got - want).abs() < 1e-8, "{got} vs {want}");
    }

    #[test]
    fn refinement_is_stable() {
        let fine = QuadSpec {
            points_per_panel: 20,
            panel_ratio: 1.5,
            rel_floor: 1e-9,
            ..QuadSpec::default()
        };
        for (n, k) in [(3usize, 1usize), (10, 1), (64, 1), (200, 1), (10, 40), (25, 5)] {
            let t = BinomTailTable::new(k);
            let a = binary_euler_error(n, &t, &quad());
            let b = binary_euler_error(n, &t, &fine);
            assert!((a - b).abs() <= 1e-8 * b, "n={n} k={k}: {a} vs {b}");
        }
    }

    #[test]
    fn euler_structure() {
        let t = BinomTailTable::new(1);
        let xs: Vec<f64> = (1..=200).map(|i| i as f64 * 0.02).collect();
        for n in [3usize, 7, 20] {
            let mut st = BinaryEulerState::new(n, xs.clone());
            let mut neg = BinaryEulerState::new(n, xs.iter().map(|x| -x).collect());
            while !st.is_done() {
                st.step(&t);
                neg.step(&t);
                for (a, b) in st.f.iter().zip(&neg.f) {
                    assert_eq!(*a, -b);
                }
                assert!(st.f.windows(2).all(|w| w[0] <= w[1]), "increasing");
                for w in st.f.windows(3) {
                    assert!(w[2] - 2.0 * w[1] + w[0] <= 1e-12, "concave");
                }
            }
            assert!(st.f.iter().all(|f| f.abs() <= 1.0));
        }
        let t = BinomTailTable::new(16);
        let mut st = BinaryEulerState::new(12, xs.iter().map(|x| x * 3.0).collect());
        st.run(&t);
        assert!(st.f.iter().all(|f| f.abs() <= 1.0));
    }

    #[test]
    fn slope_products() {
        assert_eq!(slope_factor(2, 1), 2.0);
        assert_eq!(slope_factor(2, 2), 0.5);
        assert!((slope_product(2) - 1.0).abs() < 1e-15);
        for n in 2..50 {
            assert_eq!(slope_factor(n, 1), (n * (n - 1)) as f64);
        }
        // Derivative of the k = 1 Euler map at 0, by finite differences.
        let t = BinomTailTable::new(1);
        for n in [2usize, 5, 9] {
            let h = 1e-7;
            let d = euler_endpoint(h, n, &t).0 / h;
            assert!((d / slope_product(n) - 1.0).abs() < 1e-6, "n={n}");
        }
        let limit = 2.0 * std::f64::consts::PI / 3f64.sqrt();
        let mut prev = 0.0;
        for n in [32usize, 64, 128, 256] {
            let r = log_slope_product(n) / (n as f64).powf(2.0 / 3.0);
            assert!(r > prev && r < limit, "n={n} r={r}");
            prev = r;
        }
        assert!((prev - limit).abs() < 0.25 * limit);
    }

    #[test]
    fn error_bracket_and_decay() {
        let t = BinomTailTable::new(1);
        let mut prev = f64::INFINITY;
        for n in 1..=64 {
            let e = binary_euler_error(n, &t, &quad());
            assert!(e < prev, "n={n}");
            assert!((0.0..=2.0).contains(&e));
            if n >= 16 {
                assert!(error_lower_bound(n) <= e, "n={n}");
            }
            prev = e;
        }
        let mut prev = f64::INFINITY;
        for k in 1..=512 {
            let e = binary_one_step_exact(k);
            assert!(e < prev);
            prev = e;
        }
    }

    #[test]
    fn contour_consistency() {
        let ns = [1usize, 2, 5];
        let ks = [1usize, 3, 20];
        let g = contour_grid(&ns, &ks, &quad());
        for (i, &n) in ns.iter().enumerate() {
            let e = binary_euler_error(n, &BinomTailTable::new(1), &quad());
            assert_eq!(g[i][0], e);
        }
        for (j, &k) in ks.iter().enumerate() {
            assert!((g[0][j] - binary_one_step_exact(k)).abs() < 1e-8);
        }
    }
}
