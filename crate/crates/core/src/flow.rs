//! ODE integration of velocity fields: explicit Euler, an RK2 midpoint
//! reference, terminal-map extraction, the Euler error estimator and
//! terminal-cell rasters.

use rayon::prelude::*;

use crate::error::invalid;
use crate::measures::{sq_dist, AtomCloud, GaussianSource};
use crate::rng::StreamKey;
use crate::semidiscrete::{laguerre_index, nn_index, DualWeights};
use crate::stats::mean_stderr;
use crate::velocity::{Field, VelocityModel};
use crate::Result;

/// Latest time at which the midpoint rule evaluates the field.
const T_CAP: f64 = 1.0 - 1e-9;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Scheme {
    Euler,
    Rk2Midpoint,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct IntegratorSpec {
    pub scheme: Scheme,
    pub n_steps: usize,
    pub t_end: f64,
}

impl IntegratorSpec {
    pub fn euler(n_steps: usize) -> Self {
        Self {
            scheme: Scheme::Euler,
            n_steps,
            t_end: 1.0,
        }
    }

    pub fn rk2(n_steps: usize) -> Self {
        Self {
            scheme: Scheme::Rk2Midpoint,
            n_steps,
            t_end: 1.0,
        }
    }

    /// RK2 up to `1 - 1/(4 n_ref)`, the horizon used before snapping.
    pub fn terminal(n_ref: usize) -> Self {
        Self {
            scheme: Scheme::Rk2Midpoint,
            n_steps: n_ref,
            t_end: 1.0 - 1.0 / (4.0 * n_ref as f64),
        }
    }

    fn validate(&self) -> Result<()> {
        if self.n_steps == 0 {
            return invalid("integrator needs at least one step");
        }
        if !(self.t_end > 0.0 && self.t_end <= 1.0) {
            return invalid("t_end must lie in (0, 1]");
        }
        Ok(())
    }
}

/// Integrates `x0` from `t = 0` to `spec.t_end` with uniform steps.
pub fn integrate(field: &Field<'_>, x0: &[f64], spec: &IntegratorSpec) -> Result<Vec<f64>> {
    spec.validate()?;
    if x0.iter().any(|v| !v.is_finite()) {
        return invalid("initial point must be finite");
    }
    let d = x0.len();
    let h = spec.t_end / spec.n_steps as f64;
    let mut x = x0.to_vec();
    let mut k1 = vec![0.0; d];
    let mut k2 = vec![0.0; d];
    let mut mid = vec![0.0; d];
    for j in 0..spec.n_steps {
        let t = j as f64 * h;
        field.velocity(t, &x, &mut k1)?;
        match spec.scheme {
            Scheme::Euler => {
                for (xi, ui) in x.iter_mut().zip(&k1) {
                    *xi += h * ui;
                }
            }
            Scheme::Rk2Midpoint => {
                for ((m, xi), ui) in mid.iter_mut().zip(&x).zip(&k1) {
                    *m = xi + 0.5 * h * ui;
                }
                field.velocity((t + 0.5 * h).min(T_CAP), &mid, &mut k2)?;
                for (xi, ui) in x.iter_mut().zip(&k2) {
                    *xi += h * ui;
                }
            }
        }
    }
    Ok(x)
}

#[derive(Debug, Clone, PartialEq)]
pub struct TerminalAssignment {
    pub x0: Vec<f64>,
    pub atom: usize,
    pub snapped_distance: f64,
    /// Snap distance exceeded half the atom separation.
    pub undecided: bool,
}

/// Integrates with the reference scheme and snaps to the nearest atom.
pub fn terminal_map(field: &Field<'_>, x0: &[f64], spec_ref: &IntegratorSpec) -> Result<TerminalAssignment> {
    if spec_ref.scheme != Scheme::Rk2Midpoint || spec_ref.n_steps < 50 {
        return invalid("terminal map needs an RK2 reference with at least 50 steps");
    }
    let cloud = field.cloud();
    let x = integrate(field, x0, spec_ref)?;
    let atom = nn_index(&x, cloud);
    let dist = sq_dist(&x, cloud.atom(atom)).sqrt();
    let undecided = cloud.len() > 1 && dist > 0.5 * cloud.sep()?;
    Ok(TerminalAssignment {
        x0: x0.to_vec(),
        atom,
        snapped_distance: dist,
        undecided,
    })
}

/// Initial point of sample `i` under `key`.
pub fn initial_point(dim: usize, key: &StreamKey, i: u64) -> Vec<f64> {
    GaussianSource::new(dim).sample_flat(1, &mut key.child(i).rng())
}

/// Terminal atom frequencies over `n_samples` Gaussian initials and the
/// undecided fraction.
pub fn terminal_frequencies(
    model: &VelocityModel,
    n_samples: usize,
    spec_ref: &IntegratorSpec,
    key: &StreamKey,
) -> Result<(Vec<f64>, f64)> {
    let dim = model.dim();
    let maps: Vec<TerminalAssignment> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| terminal_map(&model.field(i)?, &initial_point(dim, key, i), spec_ref))
        .collect::<Result<_>>()?;
    let mut freq = vec![0.0; model.cloud().len()];
    let mut undecided = 0.0;
    for m in &maps {
        freq[m.atom] += 1.0;
        if m.undecided {
            undecided += 1.0;
        }
    }
    let n = n_samples as f64;
    freq.iter_mut().for_each(|f| *f /= n);
    Ok((freq, undecided / n))
}

#[derive(Debug, Clone, PartialEq)]
pub struct ErrorEstimate {
    pub n: usize,
    pub mean: f64,
    pub stderr: f64,
    pub values: Vec<f64>,
}

/// `E|euler_n(X) - ref(X)|` for every `n` in `ns`, sharing initials, fields
/// and the RK2 reference (to `t = 1`) across `n`.
pub fn error_curve(
    model: &VelocityModel,
    ns: &[usize],
    n_samples: usize,
    n_ref: usize,
    key: &StreamKey,
) -> Result<Vec<ErrorEstimate>> {
    if ns.contains(&0) {
        return invalid("step counts must be at least 1");
    }
    if n_samples < 2 {
        return invalid("need at least 2 samples for a standard error");
    }
    let dim = model.dim();
    let rows: Vec<Vec<f64>> = (0..n_samples as u64)
        .into_par_iter()
        .map(|i| {
            let field = model.field(i)?;
            let x0 = initial_point(dim, key, i);
            let reference = integrate(&field, &x0, &IntegratorSpec::rk2(n_ref))?;
            ns.iter()
                .map(|&n| {
                    let x = integrate(&field, &x0, &IntegratorSpec::euler(n))?;
                    Ok(sq_dist(&x, &reference).sqrt())
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    Ok(ns
        .iter()
        .enumerate()
        .map(|(c, &n)| {
            let values: Vec<f64> = rows.iter().map(|r| r[c]).collect();
            let (mean, stderr) = mean_stderr(&values);
            ErrorEstimate {
                n,
                mean,
                stderr,
                values,
            }
        })
        .collect())
}

pub fn estimate_error_nk(
    model: &VelocityModel,
    n: usize,
    n_samples: usize,
    n_ref: usize,
    key: &StreamKey,
) -> Result<(f64, f64)> {
    let e = error_curve(model, &[n], n_samples, n_ref, key)?;
    Ok((e[0].mean, e[0].stderr))
}

/// Square grid of `res x res` nodes over a rectangle, row-major in `y`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RasterGrid {
    pub x_lo: f64,
    pub x_hi: f64,
    pub y_lo: f64,
    pub y_hi: f64,
    pub res: usize,
}

impl RasterGrid {
    pub fn square(half_width: f64, res: usize) -> Self {
        Self {
            x_lo: -half_width,
            x_hi: half_width,
            y_lo: -half_width,
            y_hi: half_width,
            res,
        }
    }

    fn axis(lo: f64, hi: f64, res: usize, i: usize) -> f64 {
        if res == 1 {
            0.5 * (lo + hi)
        } else {
            lo + (hi - lo) * i as f64 / (res - 1) as f64
        }
    }

    /// Coordinates of node `(row, col)`.
    pub fn node(&self, row: usize, col: usize) -> [f64; 2] {
        [
            Self::axis(self.x_lo, self.x_hi, self.res, col),
            Self::axis(self.y_lo, self.y_hi, self.res, row),
        ]
    }

    fn validate(&self) -> Result<()> {
        if self.res == 0 || !(self.x_lo < self.x_hi && self.y_lo < self.y_hi) {
            return invalid("raster grid must have positive size and resolution");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Raster {
    pub grid: RasterGrid,
    /// Row-major atom indices.
    pub atoms: Vec<usize>,
    pub undecided: Vec<bool>,
}

impl Raster {
    pub fn at(&self, row: usize, col: usize) -> usize {
        self.atoms[row * self.grid.res + col]
    }

    /// Fraction of nodes on which two rasters agree.
    pub fn agreement(&self, other: &Raster) -> Result<f64> {
        if self.atoms.len() != other.atoms.len() {
            return invalid("rasters differ in size");
        }
        let same = self.atoms.iter().zip(&other.atoms).filter(|(a, b)| a == b).count();
        Ok(same as f64 / self.atoms.len() as f64)
    }

    pub fn to_csv(&self) -> String {
        let mut s = String::from("x,y,atom_index,undecided\n");
        let res = self.grid.res;
        for row in 0..res {
            for col in 0..res {
                let [x, y] = self.grid.node(row, col);
                let i = row * res + col;
                s.push_str(&format!("{x},{y},{},{}\n", self.atoms[i], self.undecided[i] as u8));
            }
        }
        s
    }
}

/// Terminal map on every grid node. Node `i` (row-major) uses the field of
/// trajectory `i`.
pub fn cell_raster(model: &VelocityModel, grid: &RasterGrid, spec_ref: &IntegratorSpec) -> Result<Raster> {
    if model.dim() != 2 {
        return invalid("rasters need a two-dimensional target");
    }
    grid.validate()?;
    let res = grid.res;
    let rows: Vec<Vec<TerminalAssignment>> = (0..res)
        .into_par_iter()
        .map(|row| {
            (0..res)
                .map(|col| {
                    let field = model.field((row * res + col) as u64)?;
                    terminal_map(&field, &grid.node(row, col), spec_ref)
                })
                .collect()
        })
        .collect::<Result<_>>()?;
    let flat: Vec<TerminalAssignment> = rows.into_iter().flatten().collect();
    Ok(Raster {
        grid: *grid,
        atoms: flat.iter().map(|m| m.atom).collect(),
        undecided: flat.iter().map(|m| m.undecided).collect(),
    })
}

/// Laguerre cell index of every grid node.
pub fn laguerre_raster(cloud: &AtomCloud, dual: &DualWeights, grid: &RasterGrid) -> Result<Raster> {
    if cloud.dim() != 2 {
        return invalid("rasters need a two-dimensional target");
    }
    grid.validate()?;
    let res = grid.res;
    let atoms: Vec<usize> = (0..res * res)
        .map(|i| laguerre_index(&grid.node(i / res, i % res), cloud, dual))
        .collect();
    Ok(Raster {
        grid: *grid,
        undecided: vec![false; atoms.len()],
        atoms,
    })
}
