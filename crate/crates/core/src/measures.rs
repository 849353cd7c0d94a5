//! Sources, targets and batches.
//!
//! Points are stored as flat row-major `f64` buffers; atom indices are
//! zero-based throughout the crate.

use std::fs;
use std::hash::{Hash, Hasher};
use std::path::Path;

use crate::error::{invalid, Error, Result};
use crate::rng::{StreamKey, StreamRng};

#[inline]
pub fn sq_dist(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum()
}

#[inline]
pub fn dot(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| x * y).sum()
}

/// Finite support `{v_1, ..., v_M}` of a discrete target.
#[derive(Debug, Clone, PartialEq)]
pub struct AtomCloud {
    dim: usize,
    coords: Vec<f64>,
}

impl AtomCloud {
    /// Builds a cloud from a flat coordinate buffer of `M * dim` values.
    ///
    /// Rejects empty clouds, non-finite coordinates and exact duplicates.
    pub fn new(dim: usize, coords: Vec<f64>) -> Result<Self> {
        if dim == 0 {
            return invalid("dimension must be positive");
        }
        if coords.is_empty() || !coords.len().is_multiple_of(dim) {
            return invalid(format!(
                "coordinate buffer of length {} is not a nonempty multiple of dim {dim}",
                coords.len()
            ));
        }
        if coords.iter().any(|c| !c.is_finite()) {
            return invalid("atom coordinates must be finite");
        }
        let cloud = Self { dim, coords };
        let m = cloud.len();
        for i in 0..m {
            for j in (i + 1)..m {
                if cloud.atom(i) == cloud.atom(j) {
                    return invalid(format!("duplicate atoms at indices {i} and {j}"));
                }
            }
        }
        Ok(cloud)
    }

    pub fn from_points(points: &[Vec<f64>]) -> Result<Self> {
        let dim = points.first().map_or(0, Vec::len);
        if points.iter().any(|p| p.len() != dim) {
            return invalid("atoms have inconsistent dimensions");
        }
        Self::new(dim, points.concat())
    }

    /// `m` atoms drawn uniformly in `[-1, 1]^dim`.
    pub fn uniform_cube(m: usize, dim: usize, key: &StreamKey) -> Result<Self> {
        let mut rng = key.rng();
        let coords = (0..m * dim).map(|_| 2.0 * rng.uniform() - 1.0).collect();
        Self::new(dim, coords)
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.coords.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.coords.is_empty()
    }

    #[inline]
    pub fn atom(&self, i: usize) -> &[f64] {
        &self.coords[i * self.dim..(i + 1) * self.dim]
    }

    pub fn coords(&self) -> &[f64] {
        &self.coords
    }

    pub fn atoms(&self) -> impl Iterator<Item = &[f64]> {
        self.coords.chunks_exact(self.dim)
    }

    pub fn scaled(&self, c: f64) -> Result<Self> {
        Self::new(self.dim, self.coords.iter().map(|x| x * c).collect())
    }

    /// Minimum pairwise distance.
    pub fn sep(&self) -> Result<f64> {
        let m = self.len();
        if m < 2 {
            return invalid("separation undefined for singleton cloud");
        }
        let mut best = f64::INFINITY;
        for i in 0..m {
            for j in (i + 1)..m {
                best = best.min(sq_dist(self.atom(i), self.atom(j)));
            }
        }
        Ok(best.sqrt())
    }

    /// Maximum pairwise distance; zero for a single atom.
    pub fn diam(&self) -> f64 {
        let m = self.len();
        let mut best = 0.0f64;
        for i in 0..m {
            for j in (i + 1)..m {
                best = best.max(sq_dist(self.atom(i), self.atom(j)));
            }
        }
        best.sqrt()
    }

    /// Mean of `||v_j||^2` under the given weights.
    pub fn mean_sq_norm(&self, weights: &[f64]) -> f64 {
        self.atoms()
            .zip(weights)
            .map(|(v, w)| w * dot(v, v))
            .sum()
    }

    /// Reads one atom per line, whitespace separated. Blank lines and lines
    /// starting with `#` are skipped.
    pub fn load(path: impl AsRef<Path>) -> Result<Self> {
        let path = path.as_ref();
        let rows = read_table(path)?;
        Self::from_points(&rows).map_err(|e| match e {
            Error::Invalid(m) => Error::Parse {
                path: path.display().to_string(),
                line: 0,
                message: m,
            },
            other => other,
        })
    }

    pub fn to_table(&self) -> String {
        let mut out = String::new();
        for v in self.atoms() {
            let line: Vec<String> = v.iter().map(|x| format!("{x:e}")).collect();
            out.push_str(&line.join(" "));
            out.push('\n');
        }
        out
    }

    fn hash_into<H: Hasher>(&self, h: &mut H) {
        self.dim.hash(h);
        for c in &self.coords {
            c.to_bits().hash(h);
        }
    }
}

fn read_table(path: &Path) -> Result<Vec<Vec<f64>>> {
    let text = fs::read_to_string(path).map_err(|source| Error::Io {
        path: path.display().to_string(),
        source,
    })?;
    let mut rows = Vec::new();
    for (ln, line) in text.lines().enumerate() {
        let line = line.trim();
        if line.is_empty() || line.starts_with('#') {
            continue;
        }
        let row = line
            .split_whitespace()
            .map(|tok| {
                tok.parse::<f64>().map_err(|e| Error::Parse {
                    path: path.display().to_string(),
                    line: ln + 1,
                    message: format!("{tok:?}: {e}"),
                })
            })
            .collect::<Result<Vec<_>>>()?;
        rows.push(row);
    }
    Ok(rows)
}

/// Discrete target `sum_j w_j delta_{v_j}`.
#[derive(Debug, Clone, PartialEq)]
pub struct TargetMeasure {
    cloud: AtomCloud,
    weights: Vec<f64>,
    cumulative: Vec<f64>,
}

impl TargetMeasure {
    pub fn uniform(cloud: AtomCloud) -> Self {
        let m = cloud.len();
        let weights = vec![1.0 / m as f64; m];
        Self::with_weights(cloud, weights).expect("uniform weights are valid")
    }

    pub fn with_weights(cloud: AtomCloud, weights: Vec<f64>) -> Result<Self> {
        if weights.len() != cloud.len() {
            return invalid(format!(
                "{} weights for {} atoms",
                weights.len(),
                cloud.len()
            ));
        }
        if weights.iter().any(|w| !w.is_finite() || *w < 0.0) {
            return invalid("weights must be finite and nonnegative");
        }
        let total: f64 = weights.iter().sum();
        if (total - 1.0).abs() > 1e-12 {
            return invalid(format!("weights sum to {total}, expected 1"));
        }
        let mut acc = 0.0;
        let cumulative = weights
            .iter()
            .map(|w| {
                acc += w;
                acc
            })
            .collect();
        Ok(Self {
            cloud,
            weights,
            cumulative,
        })
    }

    /// Atoms from `atoms_path`; weights from `weights_path` (one per line)
    /// when given, uniform otherwise.
    pub fn load(atoms_path: impl AsRef<Path>, weights_path: Option<&Path>) -> Result<Self> {
        let cloud = AtomCloud::load(atoms_path)?;
        match weights_path {
            None => Ok(Self::uniform(cloud)),
            Some(p) => {
                let rows = read_table(p)?;
                if rows.iter().any(|r| r.len() != 1) {
                    return Err(Error::Parse {
                        path: p.display().to_string(),
                        line: 0,
                        message: "expected one weight per line".into(),
                    });
                }
                Self::with_weights(cloud, rows.into_iter().map(|r| r[0]).collect())
            }
        }
    }

    pub fn cloud(&self) -> &AtomCloud {
        &self.cloud
    }

    pub fn weights(&self) -> &[f64] {
        &self.weights
    }

    pub fn dim(&self) -> usize {
        self.cloud.dim()
    }

    pub fn len(&self) -> usize {
        self.cloud.len()
    }

    pub fn is_empty(&self) -> bool {
        self.cloud.is_empty()
    }

    pub fn is_uniform(&self) -> bool {
        let m = self.len() as f64;
        self.weights.iter().all(|w| (w - 1.0 / m).abs() < 1e-12)
    }

    #[inline]
    pub fn sample_index(&self, rng: &mut StreamRng) -> usize {
        rng.categorical(&self.cumulative)
    }

    /// Stable identity of atoms and weights, used to detect mismatched inputs.
    pub fn fingerprint(&self) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        self.cloud.hash_into(&mut h);
        for w in &self.weights {
            w.to_bits().hash(&mut h);
        }
        h.finish()
    }

    pub fn weights_table(&self) -> String {
        self.weights.iter().map(|w| format!("{w:e}\n")).collect()
    }
}

/// Standard Gaussian `N(0, I_dim)`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GaussianSource {
    pub dim: usize,
}

impl GaussianSource {
    pub fn new(dim: usize) -> Self {
        Self { dim }
    }

    pub fn sample_into(&self, rng: &mut StreamRng, out: &mut [f64]) {
        rng.fill_gaussian(out);
    }

    pub fn sample_flat(&self, n: usize, rng: &mut StreamRng) -> Vec<f64> {
        let mut out = vec![0.0; n * self.dim];
        rng.fill_gaussian(&mut out);
        out
    }
}

/// `k` source points and `k` atom indices forming one empirical OT instance.
#[derive(Debug, Clone, PartialEq)]
pub struct PairBatch {
    pub dim: usize,
    /// Row-major `k x dim`.
    pub xs: Vec<f64>,
    pub ys: Vec<usize>,
}

impl PairBatch {
    pub fn len(&self) -> usize {
        self.ys.len()
    }

    pub fn is_empty(&self) -> bool {
        self.ys.is_empty()
    }

    #[inline]
    pub fn x(&self, i: usize) -> &[f64] {
        &self.xs[i * self.dim..(i + 1) * self.dim]
    }
}

/// One draw `(x, y)` from the expected batch plan, with provenance.
#[derive(Debug, Clone, PartialEq)]
pub struct CoupledSample {
    pub x: Vec<f64>,
    pub y_index: usize,
    pub batch_id: u64,
    /// Zero-based slot of `x` inside its batch.
    pub slot: usize,
}

/// Draws `(X_1..X_k, Y_1..Y_k) ~ mu^k (x) nu^k`.
///
/// Sources come from sub-stream 0 of `key` and targets from sub-stream 1, so
/// batches of different sizes drawn under the same key share their prefixes.
pub fn sample_batch(
    source: &GaussianSource,
    target: &TargetMeasure,
    k: usize,
    key: &StreamKey,
) -> Result<PairBatch> {
    if k == 0 {
        return invalid("batch size must be at least 1");
    }
    if source.dim != target.dim() {
        return invalid("source and target dimensions differ");
    }
    let mut xr = key.child(0).rng();
    let mut yr = key.child(1).rng();
    let xs = source.sample_flat(k, &mut xr);
    let ys = (0..k).map(|_| target.sample_index(&mut yr)).collect();
    Ok(PairBatch {
        dim: source.dim,
        xs,
        ys,
    })
}
