//! Experiment runner for batch optimal-transport couplings.
//!
//! [`run`] resolves a [`ConfigFile`] against command-line and environment
//! overrides, executes one experiment on a dedicated worker pool and writes
//! CSV panels plus a `manifest.json` into the output directory.

pub mod config;
pub mod experiments;

use std::path::{Path, PathBuf};
use std::time::Instant;

use batchot_core::assignment::solver_invocations;
use batchot_core::rng::StreamKey;
use batchot_core::{Error, Result};
use clap::ValueEnum;
use serde::Serialize;

pub use config::ConfigFile;
use experiments::BinaryParts;

pub const ENV_OUT: &str = "BATCHOT_OUT";
pub const ENV_THREADS: &str = "BATCHOT_THREADS";

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Serialize)]
#[serde(rename_all = "snake_case")]
#[value(rename_all = "snake_case")]
pub enum Experiment {
    Rates,
    Plan1d,
    Cells,
    Concentration,
    ErrorGrid,
    Binary,
    BinaryAsymptotics,
    BinaryContour,
}

impl Experiment {
    pub fn name(self) -> &'static str {
        match self {
            Self::Rates => "rates",
            Self::Plan1d => "plan1d",
            Self::Cells => "cells",
            Self::Concentration => "concentration",
            Self::ErrorGrid => "error_grid",
            Self::Binary => "binary",
            Self::BinaryAsymptotics => "binary_asymptotics",
            Self::BinaryContour => "binary_contour",
        }
    }

    /// Root stream of the experiment under `seed`.
    pub fn key(self, seed: u64) -> StreamKey {
        let id = match self {
            Self::Rates => 1,
            Self::Plan1d => 2,
            Self::Cells => 3,
            Self::Concentration => 4,
            Self::ErrorGrid => 5,
            Self::Binary | Self::BinaryAsymptotics | Self::BinaryContour => 6,
        };
        StreamKey::with_path(seed, &[id])
    }

    /// Assignment solves the experiment is expected to perform.
    pub fn planned_solver_calls(self, cfg: &ConfigFile) -> u64 {
        match self {
            Self::Rates => experiments::planned_rates(&cfg.rates),
            Self::Plan1d => experiments::planned_plan1d(&cfg.plan1d),
            Self::Cells => experiments::planned_cells(&cfg.cells),
            Self::Concentration => experiments::planned_concentration(&cfg.concentration),
            Self::ErrorGrid => experiments::planned_error_grid(&cfg.error_grid),
            Self::Binary | Self::BinaryAsymptotics | Self::BinaryContour => 0,
        }
    }

    fn validate(self, cfg: &ConfigFile) -> Result<()> {
        match self {
            Self::Rates => cfg.rates.validate(),
            Self::Plan1d => cfg.plan1d.validate(),
            Self::Cells => cfg.cells.validate(),
            Self::Concentration => cfg.concentration.validate(),
            Self::ErrorGrid => cfg.error_grid.validate(),
            Self::Binary | Self::BinaryAsymptotics | Self::BinaryContour => cfg.binary.validate(),
        }
    }
}

/// Command-line overrides; `None` falls through to the environment, then
/// the config file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
    pub threads: Option<usize>,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct Resolved {
    pub seed: u64,
    pub out: PathBuf,
    /// `None` lets the pool pick its default width.
    pub threads: Option<usize>,
}

fn env_nonempty(name: &str) -> Option<String> {
    std::env::var(name).ok().filter(|v| !v.trim().is_empty())
}

pub fn resolve(exp: Experiment, cfg: &ConfigFile, ov: &Overrides) -> Result<Resolved> {
    let env_threads = match env_nonempty(ENV_THREADS) {
        Some(v) => Some(
            v.trim()
                .parse::<usize>()
                .map_err(|_| Error::Invalid(format!("{ENV_THREADS} must be a positive integer, got {v:?}")))?,
        ),
        None => None,
    };
    let threads = ov.threads.or(env_threads).or(cfg.threads);
    if threads == Some(0) {
        return Err(Error::Invalid("thread count must be positive".into()));
    }
    let out = ov
        .out
        .clone()
        .or_else(|| env_nonempty(ENV_OUT).map(PathBuf::from))
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| Path::new("out").join(exp.name()));
    Ok(Resolved {
        seed: ov.seed.or(cfg.seed).unwrap_or(0),
        out,
        threads,
    })
}

/// Output directory of one run; records the files written.
#[derive(Debug)]
pub struct Output {
    dir: PathBuf,
    files: Vec<String>,
    notes: Vec<String>,
}

impl Output {
    pub fn new(dir: impl Into<PathBuf>) -> Result<Self> {
        let dir = dir.into();
        std::fs::create_dir_all(&dir).map_err(|source| Error::Io {
            path: dir.display().to_string(),
            source,
        })?;
        Ok(Self {
            dir,
            files: Vec::new(),
            notes: Vec::new(),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn files(&self) -> &[String] {
        &self.files
    }

    pub fn notes(&self) -> &[String] {
        &self.notes
    }

    pub fn write(&mut self, name: &str, contents: &str) -> Result<()> {
        let path = self.dir.join(name);
        std::fs::write(&path, contents).map_err(|source| Error::Io { path: path.display().to_string(), source })?;
        if !self.files.iter().any(|f| f == name) {
            self.files.push(name.to_string());
        }
        Ok(())
    }

    pub fn note(&mut self, text: &str) {
        self.notes.push(text.to_string());
    }
}

#[derive(Debug, Clone, Serialize)]
#[serde(untagged)]
pub enum Report {
    Rates(experiments::RatesReport),
    Plan1d(experiments::Plan1dReport),
    Cells(experiments::CellsReport),
    Concentration(experiments::ConcentrationReport),
    ErrorGrid(experiments::ErrorGridReport),
    Binary(experiments::BinaryReport),
}

#[derive(Debug, Clone, Serialize)]
pub struct Manifest {
    pub experiment: Experiment,
    pub status: &'static str,
    pub seed: u64,
    pub version: &'static str,
    pub threads: usize,
    pub config: ConfigFile,
    pub wall_clock_seconds: f64,
    pub solver_invocations: u64,
    pub planned_solver_calls: u64,
    pub max_solver_calls: Option<u64>,
    pub files: Vec<String>,
    pub notes: Vec<String>,
    pub error: Option<String>,
}

fn write_manifest(dir: &Path, m: &Manifest) -> Result<()> {
    let path = dir.join("manifest.json");
    let mut text = serde_json::to_string_pretty(m).expect("manifest serializes");
    text.push('\n');
    std::fs::write(&path, text).map_err(|source| Error::Io { path: path.display().to_string(), source })
}

#[derive(Debug)]
pub struct RunOutcome {
    pub manifest: Manifest,
    pub report: Report,
}

/// Runs one experiment. The manifest is written as `incomplete` before any
/// work starts and rewritten when the run finishes or fails.
pub fn run(exp: Experiment, cfg: &ConfigFile, ov: &Overrides) -> Result<RunOutcome> {
    let resolved = resolve(exp, cfg, ov)?;
    exp.validate(cfg)?;
    let planned = exp.planned_solver_calls(cfg);
    if let Some(cap) = cfg.max_solver_calls {
        if planned > cap {
            return Err(Error::Invalid(format!(
                "{} plans {planned} assignment solves, above max_solver_calls = {cap}",
                exp.name()
            )));
        }
    }
    let mut builder = rayon::ThreadPoolBuilder::new();
    if let Some(t) = resolved.threads {
        builder = builder.num_threads(t);
    }
    let pool = builder
        .build()
        .map_err(|e| Error::Invalid(format!("cannot build worker pool: {e}")))?;
    let mut echoed = cfg.clone();
    echoed.seed = Some(resolved.seed);
    echoed.out = Some(resolved.out.clone());
    echoed.threads = Some(pool.current_num_threads());

    let mut out = Output::new(&resolved.out)?;
    let mut manifest = Manifest {
        experiment: exp,
        status: "incomplete",
        seed: resolved.seed,
        version: env!("CARGO_PKG_VERSION"),
        threads: pool.current_num_threads(),
        config: echoed,
        wall_clock_seconds: 0.0,
        solver_invocations: 0,
        planned_solver_calls: planned,
        max_solver_calls: cfg.max_solver_calls,
        files: Vec::new(),
        notes: Vec::new(),
        error: None,
    };
    write_manifest(out.dir(), &manifest)?;

    let start = Instant::now();
    let calls0 = solver_invocations();
    let key = exp.key(resolved.seed);
    let result = pool.install(|| -> Result<Report> {
        Ok(match exp {
            Experiment::Rates => Report::Rates(experiments::run_rates(&cfg.rates, &key, &mut out)?),
            Experiment::Plan1d => Report::Plan1d(experiments::run_plan1d(&cfg.plan1d, &key, &mut out)?),
            Experiment::Cells => Report::Cells(experiments::run_cells(&cfg.cells, &key, &mut out)?),
            Experiment::Concentration => {
                Report::Concentration(experiments::run_concentration(&cfg.concentration, &key, &mut out)?)
            }
            Experiment::ErrorGrid => {
                Report::ErrorGrid(experiments::run_error_grid(&cfg.error_grid, &key, &mut out)?)
            }
            Experiment::Binary => Report::Binary(experiments::run_binary(&cfg.binary, BinaryParts::All, &mut out)?),
            Experiment::BinaryAsymptotics => {
                Report::Binary(experiments::run_binary(&cfg.binary, BinaryParts::Asymptotics, &mut out)?)
            }
            Experiment::BinaryContour => {
                Report::Binary(experiments::run_binary(&cfg.binary, BinaryParts::Contour, &mut out)?)
            }
        })
    });
    manifest.wall_clock_seconds = start.elapsed().as_secs_f64();
    manifest.solver_invocations = solver_invocations() - calls0;
    manifest.files = out.files().to_vec();
    manifest.notes = out.notes().to_vec();
    match result {
        Ok(report) => {
            manifest.status = "complete";
            if let Ok(text) = serde_json::to_string_pretty(&report) {
                out.write("report.json", &(text + "\n"))?;
                manifest.files = out.files().to_vec();
            }
            write_manifest(out.dir(), &manifest)?;
            Ok(RunOutcome { manifest, report })
        }
        Err(e) => {
            manifest.status = "failed";
            manifest.error = Some(e.to_string());
            write_manifest(out.dir(), &manifest)?;
            Err(e)
        }
    }
}

/// Process exit code for an error.
pub fn exit_code(e: &Error) -> i32 {
    match e {
        Error::Invalid(_) | Error::Parse { .. } => 2,
        Error::Convergence { .. } => 3,
        Error::Io { .. } => 1,
    }
}
