//! Experiment configuration files.
//!
//! A config is a TOML file with optional top-level run settings and one
//! section per experiment. Missing sections and keys take the desk-scale
//! defaults below; unknown keys are rejected.
//!
//! ```toml
//! seed = 7
//!
//! [rates]
//! atoms = [5]
//! pair_budget = 65536
//! ```

use std::path::{Path, PathBuf};

use batchot_core::{Error, Result};
use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConfigFile {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
    /// Upper bound on assignment-solver invocations for one run.
    pub max_solver_calls: Option<u64>,
    pub rates: RatesConfig,
    pub plan1d: Plan1dConfig,
    pub cells: CellsConfig,
    pub concentration: ConcentrationConfig,
    pub error_grid: ErrorGridConfig,
    pub binary: BinaryConfig,
}

impl ConfigFile {
    pub fn parse(text: &str, path: &Path) -> Result<Self> {
        toml::from_str(text).map_err(|e| Error::Parse {
            path: path.display().to_string(),
            line: e.span().map_or(0, |s| text[..s.start].matches('\n').count() + 1),
            message: e.message().to_string(),
        })
    }

    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).map_err(|source| Error::Io {
            path: path.display().to_string(),
            source,
        })?;
        Self::parse(&text, path)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Policy {
    Shared,
    PerTrajectory,
}

impl From<Policy> for batchot_core::velocity::ContextPolicy {
    fn from(p: Policy) -> Self {
        match p {
            Policy::Shared => Self::Shared,
            Policy::PerTrajectory => Self::PerTrajectory,
        }
    }
}

fn bad<T>(msg: impl Into<String>) -> Result<T> {
    Err(Error::Invalid(msg.into()))
}

fn nonempty<T>(name: &str, v: &[T]) -> Result<()> {
    if v.is_empty() {
        return bad(format!("{name} must not be empty"));
    }
    Ok(())
}

fn positive(name: &str, v: usize) -> Result<()> {
    if v == 0 {
        return bad(format!("{name} must be positive"));
    }
    Ok(())
}

fn positive_all(name: &str, v: &[usize]) -> Result<()> {
    nonempty(name, v)?;
    if v.contains(&0) {
        return bad(format!("{name} entries must be positive"));
    }
    Ok(())
}

fn finite_positive(name: &str, v: f64) -> Result<()> {
    if !(v.is_finite() && v > 0.0) {
        return bad(format!("{name} must be finite and positive"));
    }
    Ok(())
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct RatesConfig {
    pub dims: Vec<usize>,
    pub atoms: Vec<usize>,
    /// Atoms are uniform on `[-scale, scale]^d`.
    pub scale: f64,
    /// Batch sizes `floor(2^(j/2))` for `j` in `k_exp_min..=k_exp_max`.
    pub k_exp_min: u32,
    pub k_exp_max: u32,
    pub pair_budget: usize,
    pub n_ref: u64,
}

impl Default for RatesConfig {
    fn default() -> Self {
        Self {
            dims: vec![10],
            atoms: vec![5, 10],
            scale: 1.0,
            k_exp_min: 2,
            k_exp_max: 24,
            pair_budget: 1 << 18,
            n_ref: 10_000_000,
        }
    }
}

impl RatesConfig {
    pub fn validate(&self) -> Result<()> {
        positive_all("rates.dims", &self.dims)?;
        positive_all("rates.atoms", &self.atoms)?;
        finite_positive("rates.scale", self.scale)?;
        if self.k_exp_min > self.k_exp_max || self.k_exp_max > 40 {
            return bad("rates.k_exp_min must not exceed rates.k_exp_max (at most 40)");
        }
        if self.k_exp_max < 2 {
            return bad("rates.k_exp_max must be at least 2");
        }
        positive("rates.pair_budget", self.pair_budget)?;
        if self.n_ref < 2 {
            return bad("rates.n_ref must be at least 2");
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct Plan1dConfig {
    pub atoms: Vec<f64>,
    pub weights: Option<Vec<f64>>,
    pub ks: Vec<usize>,
    pub n_pairs: usize,
    pub x_bins: usize,
    pub x_min: f64,
    pub x_max: f64,
    /// Equal-count bins of `x` used by the independence test.
    pub test_bins: usize,
    pub rank_ks: Vec<usize>,
    pub rank_mc: usize,
    pub quantile_nodes: usize,
}

impl Default for Plan1dConfig {
    fn default() -> Self {
        Self {
            atoms: vec![-2.0, -0.5, 1.0, 2.5],
            weights: None,
            ks: vec![1, 8, 64],
            n_pairs: 100_000,
            x_bins: 40,
            x_min: -4.0,
            x_max: 4.0,
            test_bins: 10,
            rank_ks: vec![1, 5, 50],
            rank_mc: 100_000,
            quantile_nodes: 1_000_000,
        }
    }
}

impl Plan1dConfig {
    pub fn validate(&self) -> Result<()> {
        nonempty("plan1d.atoms", &self.atoms)?;
        positive_all("plan1d.ks", &self.ks)?;
        positive("plan1d.n_pairs", self.n_pairs)?;
        positive("plan1d.x_bins", self.x_bins)?;
        if self.test_bins < 2 {
            return bad("plan1d.test_bins must be at least 2");
        }
        if !(self.x_min < self.x_max) {
            return bad("plan1d.x_min must be below plan1d.x_max");
        }
        positive_all("plan1d.rank_ks", &self.rank_ks)?;
        if self.rank_mc < 2 {
            return bad("plan1d.rank_mc must be at least 2");
        }
        positive("plan1d.quantile_nodes", self.quantile_nodes)?;
        if let Some(w) = &self.weights {
            if w.len() != self.atoms.len() {
                return bad("plan1d.weights must match plan1d.atoms in length");
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CellsConfig {
    pub atoms: usize,
    pub scale: f64,
    pub ks: Vec<usize>,
    pub half_width: f64,
    pub resolution: usize,
    pub replicas: usize,
    pub policy: Policy,
    pub n_ref: usize,
    pub dual_steps: u64,
    pub dual_audit: u64,
    pub dual_tolerance: f64,
    /// Gaussian initials for the pushforward audit of each raster.
    pub audit_samples: usize,
}

impl Default for CellsConfig {
    fn default() -> Self {
        Self {
            atoms: 7,
            scale: 2.0,
            ks: vec![1, 25, 1000],
            half_width: 3.0,
            resolution: 151,
            replicas: 2000,
            policy: Policy::Shared,
            n_ref: 100,
            dual_steps: 2_000_000,
            dual_audit: 1_000_000,
            dual_tolerance: 0.01,
            audit_samples: 2000,
        }
    }
}

impl CellsConfig {
    pub fn validate(&self) -> Result<()> {
        positive("cells.atoms", self.atoms)?;
        finite_positive("cells.scale", self.scale)?;
        positive_all("cells.ks", &self.ks)?;
        finite_positive("cells.half_width", self.half_width)?;
        positive("cells.resolution", self.resolution)?;
        positive("cells.replicas", self.replicas)?;
        if self.n_ref < 50 {
            return bad("cells.n_ref must be at least 50");
        }
        if self.dual_steps == 0 || self.dual_audit == 0 {
            return bad("cells.dual_steps and cells.dual_audit must be positive");
        }
        finite_positive("cells.dual_tolerance", self.dual_tolerance)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ConcentrationConfig {
    pub atoms: usize,
    pub dim: usize,
    pub scale: f64,
    /// Batch sizes of the k-sweep on the fixed cloud.
    pub ks: Vec<usize>,
    /// Dimensions of the d-sweep at `k = 1`, one cloud per dimension.
    pub dims: Vec<usize>,
    /// Times `i / t_points` for `i` in `0..t_points`.
    pub t_points: usize,
    pub trajectories: usize,
    /// Trajectories for Monte Carlo posteriors (`k > 1`).
    pub mc_trajectories: usize,
    pub replicas: usize,
    pub policy: Policy,
}

impl Default for ConcentrationConfig {
    fn default() -> Self {
        Self {
            atoms: 100,
            dim: 20,
            scale: 1.0,
            ks: vec![1, 4, 16, 64],
            dims: vec![2, 5, 10, 20, 50],
            t_points: 100,
            trajectories: 2000,
            mc_trajectories: 500,
            replicas: 2000,
            policy: Policy::Shared,
        }
    }
}

impl ConcentrationConfig {
    pub fn validate(&self) -> Result<()> {
        if self.atoms < 2 {
            return bad("concentration.atoms must be at least 2");
        }
        positive("concentration.dim", self.dim)?;
        finite_positive("concentration.scale", self.scale)?;
        positive_all("concentration.ks", &self.ks)?;
        if self.dims.contains(&0) {
            return bad("concentration.dims entries must be positive");
        }
        positive("concentration.t_points", self.t_points)?;
        if self.trajectories < 2 || self.mc_trajectories < 2 {
            return bad("concentration trajectory counts must be at least 2");
        }
        positive("concentration.replicas", self.replicas)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ErrorGridConfig {
    pub atoms: usize,
    pub dim: usize,
    pub scale: f64,
    pub ns: Vec<usize>,
    pub ks: Vec<usize>,
    pub samples: usize,
    /// RK2 reference steps (two field evaluations each).
    pub n_ref: usize,
    pub replicas: usize,
    pub policy: Policy,
}

impl Default for ErrorGridConfig {
    fn default() -> Self {
        Self {
            atoms: 100,
            dim: 20,
            scale: 1.0,
            ns: vec![1, 2, 4, 8, 16, 32, 64],
            ks: vec![1, 4, 16, 64],
            samples: 1000,
            n_ref: 100,
            replicas: 2000,
            policy: Policy::PerTrajectory,
        }
    }
}

impl ErrorGridConfig {
    pub fn validate(&self) -> Result<()> {
        positive("error_grid.atoms", self.atoms)?;
        positive("error_grid.dim", self.dim)?;
        finite_positive("error_grid.scale", self.scale)?;
        positive_all("error_grid.ns", &self.ns)?;
        positive_all("error_grid.ks", &self.ks)?;
        if self.samples < 2 {
            return bad("error_grid.samples must be at least 2");
        }
        positive("error_grid.n_ref", self.n_ref)?;
        positive("error_grid.replicas", self.replicas)?;
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct BinaryConfig {
    /// Largest `n` of the `E_{n,1}` curve.
    pub n_max: usize,
    /// One-step errors at `k = 2^j` for `j` in `0..=one_step_k_exp_max`.
    pub one_step_k_exp_max: u32,
    pub contour_ns: Vec<usize>,
    pub contour_ks: Vec<usize>,
    pub compensation_coarse: usize,
    pub compensation_fine: usize,
    pub compensation_k_max: usize,
}

impl Default for BinaryConfig {
    fn default() -> Self {
        Self {
            n_max: 256,
            one_step_k_exp_max: 14,
            contour_ns: (1..=50).collect(),
            contour_ks: vec![
                1, 2, 3, 4, 5, 6, 7, 8, 9, 10, 12, 15, 20, 25, 30, 40, 50, 60, 75, 90, 100, 125, 150, 175, 200, 250,
                300,
            ],
            compensation_coarse: 10,
            compensation_fine: 25,
            compensation_k_max: 300,
        }
    }
}

impl BinaryConfig {
    pub fn validate(&self) -> Result<()> {
        if self.n_max < 2 {
            return bad("binary.n_max must be at least 2");
        }
        if self.one_step_k_exp_max > 24 {
            return bad("binary.one_step_k_exp_max must be at most 24");
        }
        positive_all("binary.contour_ns", &self.contour_ns)?;
        positive_all("binary.contour_ks", &self.contour_ks)?;
        positive("binary.compensation_coarse", self.compensation_coarse)?;
        positive("binary.compensation_fine", self.compensation_fine)?;
        positive("binary.compensation_k_max", self.compensation_k_max)?;
        Ok(())
    }
}
