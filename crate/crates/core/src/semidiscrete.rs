//! Semidiscrete transport from `N(0, I_d)` to a finite target.
//!
//! A [`ReferenceTarget`] reweights a cloud by the nearest-neighbour
//! frequencies of a large Gaussian sample, so that the nearest-neighbour map is
//! optimal and `W_2^2` is known. For general weights the dual
//!
//! ```text
//! H(lam) = E[min_j ||X - v_j||^2 - lam_j] + sum_j w_j lam_j
//! ```
//!
//! is maximized by averaged stochastic gradient ascent, and the maximizer
//! defines the Laguerre cells of the optimal map.

use std::fs;
use std::path::Path;

use rayon::prelude::*;

use crate::error::{invalid, Error, Result};
use crate::measures::{sq_dist, AtomCloud, GaussianSource, TargetMeasure};
use crate::rng::StreamKey;

/// Samples per block when streaming large Gaussian samples.
pub const BLOCK: usize = 100_000;

/// Closest atom; ties go to the lowest index.
pub fn nn_index(x: &[f64], cloud: &AtomCloud) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, v) in cloud.atoms().enumerate() {
        let d = sq_dist(x, v);
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

/// Dual potentials, kept in the zero-sum subspace.
#[derive(Debug, Clone, PartialEq)]
pub struct DualWeights {
    lam: Vec<f64>,
}

impl DualWeights {
    pub fn zeros(m: usize) -> Self {
        Self { lam: vec![0.0; m] }
    }

    /// Projects `lam` onto `{sum = 0}`.
    pub fn new(mut lam: Vec<f64>) -> Self {
        project(&mut lam);
        Self { lam }
    }

    pub fn lam(&self) -> &[f64] {
        &self.lam
    }
}

fn project(lam: &mut [f64]) {
    let mean = lam.iter().sum::<f64>() / lam.len() as f64;
    for l in lam.iter_mut() {
        *l -= mean;
    }
}

/// `argmin_j ||x - v_j||^2 - lam_j`; ties go to the lowest index.
pub fn laguerre_index(x: &[f64], cloud: &AtomCloud, dual: &DualWeights) -> usize {
    let mut best = 0;
    let mut best_d = f64::INFINITY;
    for (j, v) in cloud.atoms().enumerate() {
        let d = sq_dist(x, v) - dual.lam[j];
        if d < best_d {
            best_d = d;
            best = j;
        }
    }
    best
}

fn psi(x: &[f64], cloud: &AtomCloud, lam: &[f64]) -> f64 {
    cloud
        .atoms()
        .zip(lam)
        .map(|(v, l)| sq_dist(x, v) - l)
        .fold(f64::INFINITY, f64::min)
}

/// Monte Carlo estimate of `H(lam)` and its standard error over a flat sample.
pub fn eval_dual_h(dual: &DualWeights, target: &TargetMeasure, sample: &[f64]) -> Result<(f64, f64)> {
    let d = target.dim();
    if sample.is_empty() || !sample.len().is_multiple_of(d) {
        return invalid("sample must be a nonempty multiple of the dimension");
    }
    if dual.lam.len() != target.len() {
        return invalid("dual length differs from number of atoms");
    }
    let vals: Vec<f64> = sample
        .chunks_exact(d)
        .map(|x| psi(x, target.cloud(), &dual.lam))
        .collect();
    let (mean, se) = crate::stats::mean_stderr(&vals);
    let linear: f64 = target.weights().iter().zip(&dual.lam).map(|(w, l)| w * l).sum();
    Ok((mean + linear, se))
}

/// Target reweighted so the nearest-neighbour map is optimal.
#[derive(Debug, Clone, PartialEq)]
pub struct ReferenceTarget {
    pub target: TargetMeasure,
    /// Mean squared nearest-neighbour distance of the reference sample.
    pub w2sq: f64,
    /// Standard error of `w2sq` as a sample mean.
    pub w2sq_stderr: f64,
    pub n_ref: u64,
    pub key: StreamKey,
    pub counts: Vec<u64>,
    /// Per-atom sums of squared distances of the points mapped to each atom.
    pub sq_sums: Vec<f64>,
    /// Atoms that received no reference point (weight 0).
    pub empty_atoms: Vec<usize>,
}

impl ReferenceTarget {
    pub fn has_empty_atoms(&self) -> bool {
        !self.empty_atoms.is_empty()
    }

    /// Writes `atoms.txt`, `weights.txt` and `reference.txt` into `dir`.
    pub fn save(&self, dir: &Path) -> Result<()> {
        let io = |source, path: &Path| Error::Io {
            path: path.display().to_string(),
            source,
        };
        fs::create_dir_all(dir).map_err(|e| io(e, dir))?;
        let write = |name: &str, text: String| {
            let p = dir.join(name);
            fs::write(&p, text).map_err(|e| io(e, &p))
        };
        write("atoms.txt", self.target.cloud().to_table())?;
        write("weights.txt", self.target.weights_table())?;
        let mut meta = format!(
            "w2sq {:e}\nw2sq_stderr {:e}\nn_ref {}\nkey {}\n",
            self.w2sq, self.w2sq_stderr, self.n_ref, self.key
        );
        for (c, s) in self.counts.iter().zip(&self.sq_sums) {
            meta.push_str(&format!("atom {c} {s:e}\n"));
        }
        write("reference.txt", meta)
    }

    pub fn load(dir: &Path) -> Result<Self> {
        let target = TargetMeasure::load(dir.join("atoms.txt"), Some(&dir.join("weights.txt")))?;
        let path = dir.join("reference.txt");
        let text = fs::read_to_string(&path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        let perr = |line: usize, message: String| Error::Parse {
            path: path.display().to_string(),
            line,
            message,
        };
        let (mut w2sq, mut w2sq_stderr, mut n_ref, mut key) = (None, None, None, None);
        let mut counts = Vec::new();
        let mut sq_sums = Vec::new();
        for (i, line) in text.lines().enumerate() {
            let toks: Vec<&str> = line.split_whitespace().collect();
            match toks.as_slice() {
                ["w2sq", v] => w2sq = Some(v.parse::<f64>().map_err(|e| perr(i + 1, e.to_string()))?),
                ["w2sq_stderr", v] => {
                    w2sq_stderr = Some(v.parse::<f64>().map_err(|e| perr(i + 1, e.to_string()))?)
                }
                ["n_ref", v] => n_ref = Some(v.parse::<u64>().map_err(|e| perr(i + 1, e.to_string()))?),
                ["key", v] => key = Some(v.parse::<StreamKey>().map_err(|e| perr(i + 1, e))?),
                ["atom", c, s] => {
                    counts.push(c.parse::<u64>().map_err(|e| perr(i + 1, e.to_string()))?);
                    sq_sums.push(s.parse::<f64>().map_err(|e| perr(i + 1, e.to_string()))?);
                }
                [] => {}
                _ => return Err(perr(i + 1, format!("unrecognized line {line:?}"))),
            }
        }
        let missing = |what: &str| perr(0, format!("missing {what}"));
        if counts.len() != target.len() {
            return Err(perr(0, "per-atom record count differs from atom count".into()));
        }
        let empty_atoms = counts
            .iter()
            .enumerate()
            .filter(|(_, &c)| c == 0)
            .map(|(i, _)| i)
            .collect();
        Ok(Self {
            target,
            w2sq: w2sq.ok_or_else(|| missing("w2sq"))?,
            w2sq_stderr: w2sq_stderr.ok_or_else(|| missing("w2sq_stderr"))?,
            n_ref: n_ref.ok_or_else(|| missing("n_ref"))?,
            key: key.ok_or_else(|| missing("key"))?,
            counts,
            sq_sums,
            empty_atoms,
        })
    }
}

/// Nearest-neighbour counts, squared-distance sums and the sum of fourth
/// powers of one Gaussian block.
fn nn_block(cloud: &AtomCloud, n: usize, key: &StreamKey) -> (Vec<u64>, Vec<f64>, f64) {
    let d = cloud.dim();
    let m = cloud.len();
    let mut rng = key.rng();
    let mut x = vec![0.0; d];
    let mut counts = vec![0u64; m];
    let mut sums = vec![0.0; m];
    let mut fourth = 0.0;
    for _ in 0..n {
        rng.fill_gaussian(&mut x);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, v) in cloud.atoms().enumerate() {
            let dd = sq_dist(&x, v);
            if dd < best_d {
                best_d = dd;
                best = j;
            }
        }
        counts[best] += 1;
        sums[best] += best_d;
        fourth += best_d * best_d;
    }
    (counts, sums, fourth)
}

/// Draws `n_ref` Gaussians in blocks (block `b` uses `key.child(b)`) and
/// reweights `cloud` by nearest-neighbour frequencies.
pub fn build_reference_target(cloud: &AtomCloud, n_ref: u64, key: &StreamKey) -> Result<ReferenceTarget> {
    let m = cloud.len();
    if n_ref < m as u64 {
        return invalid(format!("n_ref = {n_ref} is below the number of atoms {m}"));
    }
    let n_blocks = n_ref.div_ceil(BLOCK as u64);
    let blocks: Vec<(Vec<u64>, Vec<f64>, f64)> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let len = (n_ref - b * BLOCK as u64).min(BLOCK as u64) as usize;
            nn_block(cloud, len, &key.child(b))
        })
        .collect();
    let mut counts = vec![0u64; m];
    let mut sq_sums = vec![0.0; m];
    let mut fourth = 0.0;
    for (c, s, f) in &blocks {
        for j in 0..m {
            counts[j] += c[j];
            sq_sums[j] += s[j];
        }
        fourth += f;
    }
    let w2sq = reference_w2sq(&sq_sums, n_ref);
    let nf = n_ref as f64;
    let var = ((fourth / nf - w2sq * w2sq) * nf / (nf - 1.0).max(1.0)).max(0.0);
    let weights: Vec<f64> = counts.iter().map(|&c| c as f64 / n_ref as f64).collect();
    let empty_atoms = counts
        .iter()
        .enumerate()
        .filter(|(_, &c)| c == 0)
        .map(|(i, _)| i)
        .collect();
    Ok(ReferenceTarget {
        target: TargetMeasure::with_weights(cloud.clone(), weights)?,
        w2sq,
        w2sq_stderr: (var / nf).sqrt(),
        n_ref,
        key: key.clone(),
        counts,
        sq_sums,
        empty_atoms,
    })
}

/// `sum_j sq_sums[j] / n_ref`, summed in atom order.
pub fn reference_w2sq(sq_sums: &[f64], n_ref: u64) -> f64 {
    sq_sums.iter().sum::<f64>() / n_ref as f64
}

/// Robbins-Monro step `c / sqrt(t + t0)`; `c = None` means `sep^2 / 4`.
#[derive(Debug, Clone, PartialEq)]
pub struct StepSchedule {
    pub c: Option<f64>,
    pub t0: f64,
}

impl Default for StepSchedule {
    fn default() -> Self {
        Self { c: None, t0: 100.0 }
    }
}

/// Budget and acceptance test of the dual solver.
#[derive(Debug, Clone, PartialEq)]
pub struct DualSolverSpec {
    pub steps: u64,
    pub schedule: StepSchedule,
    /// Fresh samples for the final cell-mass audit.
    pub audit_samples: u64,
    /// Largest allowed `|mass_j - w_j|`.
    pub tolerance: f64,
}

impl Default for DualSolverSpec {
    fn default() -> Self {
        Self {
            steps: 2_000_000,
            schedule: StepSchedule::default(),
            audit_samples: 1_000_000,
            tolerance: 0.01,
        }
    }
}

/// Stochastic gradient ascent on `H` with Polyak averaging over the second
/// half of the iterates, followed by a mass audit on
/// `key.child(1)`. The ascent itself draws from `key.child(0)`.
pub fn solve_semidiscrete_dual(
    source: &GaussianSource,
    target: &TargetMeasure,
    spec: &DualSolverSpec,
    key: &StreamKey,
) -> Result<DualWeights> {
    let m = target.len();
    if spec.steps == 0 {
        return invalid("dual solver needs at least one step");
    }
    if source.dim != target.dim() {
        return invalid("source and target dimensions differ");
    }
    if target.weights().iter().any(|&w| w <= 0.0) {
        return invalid("dual solver requires strictly positive target weights");
    }
    if m == 1 {
        return Ok(DualWeights::zeros(1));
    }
    let cloud = target.cloud();
    let c = match spec.schedule.c {
        Some(c) => c,
        None => cloud.sep()?.powi(2) / 4.0,
    };
    let w = target.weights();
    let mut lam = vec![0.0; m];
    let mut avg = vec![0.0; m];
    let mut x = vec![0.0; source.dim];
    let mut rng = key.child(0).rng();
    let burn_in = spec.steps / 2;
    for t in 0..spec.steps {
        source.sample_into(&mut rng, &mut x);
        let mut best = 0;
        let mut best_d = f64::INFINITY;
        for (j, v) in cloud.atoms().enumerate() {
            let d = sq_dist(&x, v) - lam[j];
            if d < best_d {
                best_d = d;
                best = j;
            }
        }
        let gamma = c / (t as f64 + spec.schedule.t0).sqrt();
        for j in 0..m {
            lam[j] += gamma * w[j];
        }
        lam[best] -= gamma;
        project(&mut lam);
        if t >= burn_in {
            let a = 1.0 / ((t - burn_in) as f64 + 1.0);
            for j in 0..m {
                avg[j] += a * (lam[j] - avg[j]);
            }
        }
    }
    let dual = DualWeights::new(avg);
    let masses = laguerre_masses(cloud, &dual, spec.audit_samples, &key.child(1));
    let residual = masses
        .iter()
        .zip(w)
        .map(|(a, b)| (a - b).abs())
        .fold(0.0, f64::max);
    if residual > spec.tolerance {
        return Err(Error::Convergence {
            message: format!(
                "Laguerre cell masses off target after {} ascent steps",
                spec.steps
            ),
            residual,
        });
    }
    Ok(dual)
}

/// Fraction of `n` fresh Gaussians in each Laguerre cell.
pub fn laguerre_masses(cloud: &AtomCloud, dual: &DualWeights, n: u64, key: &StreamKey) -> Vec<f64> {
    let m = cloud.len();
    let d = cloud.dim();
    let n_blocks = n.div_ceil(BLOCK as u64);
    let counts: Vec<Vec<u64>> = (0..n_blocks)
        .into_par_iter()
        .map(|b| {
            let len = (n - b * BLOCK as u64).min(BLOCK as u64) as usize;
            let mut rng = key.child(b).rng();
            let mut x = vec![0.0; d];
            let mut c = vec![0u64; m];
            for _ in 0..len {
                rng.fill_gaussian(&mut x);
                c[laguerre_index(&x, cloud, dual)] += 1;
            }
            c
        })
        .collect();
    let mut total = vec![0u64; m];
    for c in &counts {
        for j in 0..m {
            total[j] += c[j];
        }
    }
    total.iter().map(|&c| c as f64 / n as f64).collect()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assignment::solve_assignment;
    use crate::assignment::CostMatrix;

    fn pm(a: f64) -> AtomCloud {
        AtomCloud::new(1, vec![-a, a]).unwrap()
    }

    #[test]
    fn nn_examples() {
        let single = AtomCloud::new(2, vec![0.3, 0.1]).unwrap();
        assert_eq!(nn_index(&[5.0, -2.0], &single), 0);
        let c = pm(1.0);
        assert_eq!(nn_index(&[0.2], &c), 1);
        assert_eq!(nn_index(&[0.0], &c), 0);
    }

    #[test]
    fn laguerre_examples() {
        let c = pm(1.0);
        assert_eq!(laguerre_index(&[0.2], &c, &DualWeights::zeros(2)), nn_index(&[0.2], &c));
        // ||x+1||^2 - lam_0 = ||x-1||^2 - lam_1 at x = (lam_0 - lam_1)/4.
        let delta = 0.3;
        let dual = DualWeights::new(vec![-2.0 * delta, 2.0 * delta]);
        assert_eq!(laguerre_index(&[-delta - 1e-9], &c, &dual), 0);
        assert_eq!(laguerre_index(&[-delta + 1e-9], &c, &dual), 1);
        let single = AtomCloud::new(1, vec![4.0]).unwrap();
        assert_eq!(laguerre_index(&[-7.0], &single, &DualWeights::zeros(1)), 0);
    }

    #[test]
    fn dual_h_properties() {
        let cloud = AtomCloud::uniform_cube(4, 2, &StreamKey::new(1)).unwrap();
        let t = TargetMeasure::uniform(cloud.clone());
        let sample = GaussianSource::new(2).sample_flat(20_000, &mut StreamKey::new(2).rng());
        let (h0, _) = eval_dual_h(&DualWeights::zeros(4), &t, &sample).unwrap();
        let direct = sample
            .chunks_exact(2)
            .map(|x| sq_dist(x, cloud.atom(nn_index(x, &cloud))))
            .sum::<f64>()
            / 20_000.0;
        assert!((h0 - direct).abs() < 1e-12);
        // Shift invariance.
        let lam = vec![0.1, -0.3, 0.25, 0.4];
        let shifted: Vec<f64> = lam.iter().map(|l| l + 3.0).collect();
        let a = eval_dual_h(&DualWeights::new(lam), &t, &sample).unwrap().0;
        let b = eval_dual_h(&DualWeights::new(shifted), &t, &sample).unwrap().0;
        assert!((a - b).abs() < 1e-12);
        let one = TargetMeasure::uniform(AtomCloud::new(2, vec![0.0, 0.0]).unwrap());
        let (h, se) = eval_dual_h(&DualWeights::zeros(1), &one, &sample).unwrap();
        assert!((h - 2.0).abs() < 3.0 * se, "{h} {se}");
    }

    #[test]
    fn dual_h_concavity_probe() {
        let cloud = AtomCloud::uniform_cube(5, 2, &StreamKey::new(3)).unwrap();
        let t = TargetMeasure::uniform(cloud);
        let sample = GaussianSource::new(2).sample_flat(50_000, &mut StreamKey::new(4).rng());
        let mut r = StreamKey::new(5).rng();
        for _ in 0..20 {
            let l1 = DualWeights::new((0..5).map(|_| r.gaussian()).collect());
            let l2 = DualWeights::new((0..5).map(|_| r.gaussian()).collect());
            let a = r.uniform();
            let mix = DualWeights::new(l1.lam().iter().zip(l2.lam()).map(|(x, y)| a * x + (1.0 - a) * y).collect());
            let (h1, _) = eval_dual_h(&l1, &t, &sample).unwrap();
            let (h2, _) = eval_dual_h(&l2, &t, &sample).unwrap();
            let (hm, se) = eval_dual_h(&mix, &t, &sample).unwrap();
            assert!(hm >= a * h1 + (1.0 - a) * h2 - 4.0 * se);
        }
    }

    #[test]
    fn reference_single_atom_and_symmetry() {
        let one = AtomCloud::new(10, vec![0.0; 10]).unwrap();
        let r = build_reference_target(&one, 1_000_000, &StreamKey::new(6)).unwrap();
        assert_eq!(r.target.weights(), &[1.0]);
        // Var ||X||^2 = 2d for a standard Gaussian.
        let se = (20.0f64 / 1e6).sqrt();
        assert!((r.w2sq - 10.0).abs() < 3.0 * se, "{}", r.w2sq);
        assert_eq!(r.w2sq, reference_w2sq(&r.sq_sums, r.n_ref));

        let n = 400_000u64;
        let r = build_reference_target(&pm(0.7), n, &StreamKey::new(7)).unwrap();
        let tol = 3.0 * (0.25 / n as f64).sqrt();
        for w in r.target.weights() {
            assert!((w - 0.5).abs() < tol);
        }
        assert!(build_reference_target(&pm(1.0), 1, &StreamKey::new(0)).is_err());
    }

    #[test]
    fn reference_is_deterministic_and_roundtrips() {
        let cloud = AtomCloud::uniform_cube(5, 3, &StreamKey::new(8)).unwrap();
        let a = build_reference_target(&cloud, 250_000, &StreamKey::new(9)).unwrap();
        let b = build_reference_target(&cloud, 250_000, &StreamKey::new(9)).unwrap();
        assert_eq!(a, b);
        let dir = std::env::temp_dir().join(format!("batchot-ref-{}", std::process::id()));
        a.save(&dir).unwrap();
        let back = ReferenceTarget::load(&dir).unwrap();
        assert_eq!(back, a);
    }

    #[test]
    fn reference_nn_matching_is_optimal_on_sub_batches() {
        // Sub-batches drawn from the reference sample itself: the NN matching
        // to the atoms' own NN images can never be beaten.
        let cloud = AtomCloud::uniform_cube(4, 2, &StreamKey::new(10)).unwrap();
        let mut rng = StreamKey::new(11).rng();
        for _ in 0..50 {
            let k = 12;
            let xs = GaussianSource::new(2).sample_flat(k, &mut rng);
            let ys: Vec<usize> = xs.chunks_exact(2).map(|x| nn_index(x, &cloud)).collect();
            let nn_cost: f64 = xs.chunks_exact(2).zip(&ys).map(|(x, &y)| sq_dist(x, cloud.atom(y))).sum::<f64>() / k as f64;
            let mut data = Vec::new();
            for x in xs.chunks_exact(2) {
                for &y in &ys {
                    data.push(sq_dist(x, cloud.atom(y)));
                }
            }
            let opt = solve_assignment(&CostMatrix::new(k, data).unwrap()).unwrap().total_cost;
            assert!(opt >= nn_cost - 1e-12);
        }
    }

    #[test]
    fn dual_solver_cases() {
        let s1 = GaussianSource::new(1);
        let one = TargetMeasure::uniform(AtomCloud::new(1, vec![2.0]).unwrap());
        let d = solve_semidiscrete_dual(&s1, &one, &DualSolverSpec::default(), &StreamKey::new(12)).unwrap();
        assert_eq!(d.lam(), &[0.0]);

        let sym = TargetMeasure::uniform(pm(1.0));
        let d = solve_semidiscrete_dual(&s1, &sym, &DualSolverSpec::default(), &StreamKey::new(13)).unwrap();
        assert!(d.lam().iter().all(|l| l.abs() < 0.01), "{:?}", d.lam());

        let cloud = AtomCloud::uniform_cube(5, 2, &StreamKey::new(14)).unwrap();
        let t = TargetMeasure::uniform(cloud.clone());
        let d = solve_semidiscrete_dual(&GaussianSource::new(2), &t, &DualSolverSpec::default(), &StreamKey::new(15)).unwrap();
        let masses = laguerre_masses(&cloud, &d, 1_000_000, &StreamKey::new(16));
        for m in masses {
            assert!((m - 0.2).abs() < 0.01, "{m}");
        }
        let sum: f64 = d.lam().iter().sum();
        assert!(sum.abs() < 1e-10);
    }

    #[test]
    fn dual_solver_reports_nonconvergence() {
        let cloud = AtomCloud::uniform_cube(5, 2, &StreamKey::new(14)).unwrap();
        let t = TargetMeasure::uniform(cloud);
        let spec = DualSolverSpec {
            steps: 10,
            schedule: StepSchedule { c: Some(1e-9), t0: 100.0 },
            audit_samples: 100_000,
            tolerance: 1e-4,
        };
        match solve_semidiscrete_dual(&GaussianSource::new(2), &t, &spec, &StreamKey::new(1)) {
            Err(Error::Convergence { residual, .. }) => assert!(residual > 1e-4),
            other => panic!("expected convergence error, got {other:?}"),
        }
    }
}
