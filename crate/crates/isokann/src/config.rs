//! Declarative run configuration: one TOML file, every field defaulted, the
//! fully resolved result echoed back to the output directory so a run is
//! reproducible from its artifacts alone.
//!
//! Output directory precedence: `--out` flag, then the `ISOKANN_OUT`
//! environment variable, then `[output] dir`.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::koopman::ScaleMode;
use crate::learn::{box_grid, LoopConfig, ResampleMode};
use crate::oracle::{default_oracle_bounds, DriftScheme};
use crate::sde::{catalog_potential, PotentialSystem, SimConfig};

pub const OUT_DIR_ENV: &str = "ISOKANN_OUT";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
#[serde(default, deny_unknown_fields)]
pub struct FileConfig {
    pub system: SystemSection,
    pub sim: SimSection,
    pub model: ModelSection,
    pub r#loop: LoopSection,
    pub oracle: OracleSection,
    pub compare: CompareSection,
    pub output: OutputSection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SystemSection {
    /// harmonic | doublewell1d | doublewell2d | triplewell2d | constant
    pub potential: String,
    /// Diffusion coefficient; catalog default when omitted.
    pub sigma: Option<f64>,
}

impl Default for SystemSection {
    fn default() -> Self {
        SystemSection { potential: "doublewell1d".into(), sigma: None }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimSection {
    pub dt: f64,
    pub n_steps: usize,
    pub master_seed: u64,
}

impl Default for SimSection {
    fn default() -> Self {
        SimSection { dt: 0.01, n_steps: 100, master_seed: 42 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct ModelSection {
    /// Hidden layer widths; input/output dims are implied by the system.
    pub hidden: Vec<usize>,
}

impl Default for ModelSection {
    fn default() -> Self {
        ModelSection { hidden: vec![16, 16] }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct LoopSection {
    pub n_outer: usize,
    pub n_points: usize,
    pub m_shots: usize,
    pub epochs_per_iter: usize,
    pub is_enabled_after: usize,
    /// uniform_box | chi_stratified
    pub resample_mode: String,
    pub conv_tol: f64,
    pub learning_rate: f64,
    /// minmax | percentile
    pub scale_mode: String,
    /// Percentile p for scale_mode = "percentile".
    pub percentile: f64,
    /// Control norm clip; 10 * sigma when omitted.
    pub u_max: Option<f64>,
    pub reinit_each_iter: bool,
    /// Validation nodes per axis; 33 (1D) / 9 (2D) when omitted.
    pub validation_points: Option<usize>,
}

impl Default for LoopSection {
    fn default() -> Self {
        LoopSection {
            n_outer: 40,
            n_points: 64,
            m_shots: 256,
            epochs_per_iter: 200,
            is_enabled_after: 5,
            resample_mode: "chi_stratified".into(),
            conv_tol: 5e-3,
            learning_rate: 1e-3,
            scale_mode: "minmax".into(),
            percentile: 1.0,
            u_max: None,
            reinit_each_iter: false,
            validation_points: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OracleSection {
    /// Grid nodes per axis; 400 (1D) / 50 (2D) when omitted.
    pub n_nodes: Option<Vec<usize>>,
    /// Grid bounds; the system box widened to twice its half-width when
    /// omitted (a tight box distorts the spectrum).
    pub bounds_lo: Option<Vec<f64>>,
    pub bounds_hi: Option<Vec<f64>>,
    pub max_iters: usize,
    pub tol: f64,
    /// central | upwind
    pub scheme: String,
}

impl Default for OracleSection {
    fn default() -> Self {
        OracleSection {
            n_nodes: None,
            bounds_lo: None,
            bounds_hi: None,
            max_iters: 500,
            tol: 1e-9,
            scheme: "central".into(),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct CompareSection {
    pub m: usize,
    /// Comparison grid; the middle quarter of the system box when omitted
    /// (the transition region for the benchmark wells).
    pub grid_lo: Option<Vec<f64>>,
    pub grid_hi: Option<Vec<f64>>,
    pub grid_n: usize,
    /// optimal | zero (zero runs the uncontrolled estimator twice, a noise
    /// floor for the ratio column)
    pub control: String,
}

impl Default for CompareSection {
    fn default() -> Self {
        CompareSection { m: 1000, grid_lo: None, grid_hi: None, grid_n: 11, control: "optimal".into() }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OutputSection {
    pub dir: String,
}

impl Default for OutputSection {
    fn default() -> Self {
        OutputSection { dir: "out".into() }
    }
}

/// CLI-level overrides that take precedence over the file.
#[derive(Debug, Clone, Default)]
pub struct Overrides {
    pub seed: Option<u64>,
    pub out: Option<PathBuf>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CompareControl {
    Optimal,
    Zero,
}

#[derive(Debug, Clone, PartialEq)]
pub struct OracleSettings {
    pub lo: Vec<f64>,
    pub hi: Vec<f64>,
    pub n: Vec<usize>,
    pub max_iters: usize,
    pub tol: f64,
    pub scheme: DriftScheme,
}

#[derive(Debug, Clone, PartialEq)]
pub struct CompareSettings {
    pub m: usize,
    pub grid: Vec<Vec<f64>>,
    pub control: CompareControl,
}

/// Everything a run needs, with defaults materialized.
#[derive(Debug, Clone, PartialEq)]
pub struct RunConfig {
    pub system: PotentialSystem,
    pub sim: SimConfig,
    pub model_dims: Vec<usize>,
    pub loop_cfg: LoopConfig,
    pub oracle: OracleSettings,
    pub compare: CompareSettings,
    pub out_dir: PathBuf,
    /// The fully resolved file form, for the provenance echo.
    pub resolved: FileConfig,
}

impl FileConfig {
    pub fn load(path: &Path) -> Result<FileConfig> {
        let text = std::fs::read_to_string(path).map_err(|e| Error::io(path, e))?;
        toml::from_str(&text).map_err(|e| Error::Config(format!("{}: {e}", path.display())))
    }

    /// Apply defaults and overrides; validates every field.
    pub fn resolve(&self, overrides: &Overrides) -> Result<RunConfig> {
        let mut system = catalog_potential(&self.system.potential)?;
        if let Some(sigma) = self.system.sigma {
            system = system.with_sigma(sigma)?;
        }
        let dim = system.dim();

        let master_seed = overrides.seed.unwrap_or(self.sim.master_seed);
        let sim = SimConfig::new(self.sim.dt, self.sim.n_steps, master_seed)?;

        let mut model_dims = Vec::with_capacity(self.model.hidden.len() + 2);
        model_dims.push(dim);
        model_dims.extend_from_slice(&self.model.hidden);
        model_dims.push(1);
        if self.model.hidden.iter().any(|&w| w == 0) {
            return Err(Error::Config("model.hidden widths must be positive".into()));
        }

        let validation_points =
            self.r#loop.validation_points.unwrap_or(if dim == 1 { 33 } else { 9 });
        if validation_points < 2 {
            return Err(Error::Config("loop.validation_points must be >= 2".into()));
        }
        let loop_cfg = LoopConfig {
            n_outer: self.r#loop.n_outer,
            n_points: self.r#loop.n_points,
            m_shots: self.r#loop.m_shots,
            epochs_per_iter: self.r#loop.epochs_per_iter,
            is_enabled_after: self.r#loop.is_enabled_after,
            resample_mode: match self.r#loop.resample_mode.as_str() {
                "uniform_box" => ResampleMode::UniformBox,
                "chi_stratified" => ResampleMode::ChiStratified,
                other => {
                    return Err(Error::Config(format!(
                        "loop.resample_mode: expected uniform_box or chi_stratified, got {other:?}"
                    )))
                }
            },
            conv_tol: self.r#loop.conv_tol,
            validation_grid: box_grid(&system, validation_points),
            learning_rate: self.r#loop.learning_rate,
            scale_mode: match self.r#loop.scale_mode.as_str() {
                "minmax" => ScaleMode::MinMax,
                "percentile" => ScaleMode::Percentile(self.r#loop.percentile),
                other => {
                    return Err(Error::Config(format!(
                        "loop.scale_mode: expected minmax or percentile, got {other:?}"
                    )))
                }
            },
            u_max: self.r#loop.u_max,
            reinit_each_iter: self.r#loop.reinit_each_iter,
        };
        loop_cfg.validate()?;

        let (default_lo, default_hi) = default_oracle_bounds(&system);
        let oracle_lo = self.oracle.bounds_lo.clone().unwrap_or(default_lo);
        let oracle_hi = self.oracle.bounds_hi.clone().unwrap_or(default_hi);
        let oracle_n = self
            .oracle
            .n_nodes
            .clone()
            .unwrap_or_else(|| vec![if dim == 1 { 400 } else { 50 }; dim]);
        if oracle_lo.len() != dim || oracle_hi.len() != dim || oracle_n.len() != dim {
            return Err(Error::Config(format!(
                "oracle bounds/nodes must have {dim} entries for a {dim}D system"
            )));
        }
        let oracle = OracleSettings {
            lo: oracle_lo,
            hi: oracle_hi,
            n: oracle_n,
            max_iters: self.oracle.max_iters,
            tol: self.oracle.tol,
            scheme: match self.oracle.scheme.as_str() {
                "central" => DriftScheme::Central,
                "upwind" => DriftScheme::Upwind,
                other => {
                    return Err(Error::Config(format!(
                        "oracle.scheme: expected central or upwind, got {other:?}"
                    )))
                }
            },
        };

        let (grid_lo, grid_hi) = match (&self.compare.grid_lo, &self.compare.grid_hi) {
            (Some(lo), Some(hi)) => (lo.clone(), hi.clone()),
            (None, None) => {
                // middle quarter of the system box
                let mut lo = Vec::with_capacity(dim);
                let mut hi = Vec::with_capacity(dim);
                for (&l, &h) in system.box_lo().iter().zip(system.box_hi()) {
                    let center = 0.5 * (l + h);
                    let quarter = 0.25 * (h - l) * 0.5;
                    lo.push(center - quarter);
                    hi.push(center + quarter);
                }
                (lo, hi)
            }
            _ => {
                return Err(Error::Config(
                    "compare.grid_lo and compare.grid_hi must be given together".into(),
                ))
            }
        };
        if grid_lo.len() != dim || grid_hi.len() != dim {
            return Err(Error::Config(format!("compare grid bounds must have {dim} entries")));
        }
        if self.compare.grid_n < 1 {
            return Err(Error::Config("compare.grid_n must be >= 1".into()));
        }
        if self.compare.m < 1 {
            return Err(Error::Config("compare.m must be >= 1".into()));
        }
        let compare = CompareSettings {
            m: self.compare.m,
            grid: lattice(&grid_lo, &grid_hi, self.compare.grid_n),
            control: match self.compare.control.as_str() {
                "optimal" => CompareControl::Optimal,
                "zero" => CompareControl::Zero,
                other => {
                    return Err(Error::Config(format!(
                        "compare.control: expected optimal or zero, got {other:?}"
                    )))
                }
            },
        };

        let out_dir = overrides
            .out
            .clone()
            .or_else(|| std::env::var(OUT_DIR_ENV).ok().map(PathBuf::from))
            .unwrap_or_else(|| PathBuf::from(&self.output.dir));

        let resolved = FileConfig {
            system: SystemSection {
                potential: system.name().to_string(),
                sigma: Some(system.sigma()),
            },
            sim: SimSection { dt: sim.dt, n_steps: sim.n_steps, master_seed: sim.master_seed },
            model: self.model.clone(),
            r#loop: LoopSection {
                u_max: self.r#loop.u_max,
                validation_points: Some(validation_points),
                ..self.r#loop.clone()
            },
            oracle: OracleSection {
                n_nodes: Some(oracle.n.clone()),
                bounds_lo: Some(oracle.lo.clone()),
                bounds_hi: Some(oracle.hi.clone()),
                max_iters: self.oracle.max_iters,
                tol: self.oracle.tol,
                scheme: self.oracle.scheme.clone(),
            },
            compare: CompareSection {
                m: self.compare.m,
                grid_lo: Some(grid_lo),
                grid_hi: Some(grid_hi),
                grid_n: self.compare.grid_n,
                control: self.compare.control.clone(),
            },
            output: OutputSection { dir: out_dir.display().to_string() },
        };

        Ok(RunConfig { system, sim, model_dims, loop_cfg, oracle, compare, out_dir, resolved })
    }
}

/// Regular lattice with n nodes per axis between lo and hi (n = 1 puts the
/// node at the center).
fn lattice(lo: &[f64], hi: &[f64], n: usize) -> Vec<Vec<f64>> {
    let axis = |a: usize| -> Vec<f64> {
        if n == 1 {
            return vec![0.5 * (lo[a] + hi[a])];
        }
        (0..n).map(|k| lo[a] + (hi[a] - lo[a]) * k as f64 / (n - 1) as f64).collect()
    };
    match lo.len() {
        1 => axis(0).into_iter().map(|x| vec![x]).collect(),
        2 => {
            let xs = axis(0);
            let ys = axis(1);
            let mut grid = Vec::with_capacity(n * n);
            for x in &xs {
                for y in &ys {
                    grid.push(vec![*x, *y]);
                }
            }
            grid
        }
        d => panic!("lattice supports 1D/2D, got {d}D"),
    }
}

/// Serialize the resolved echo.
pub fn to_toml(config: &FileConfig) -> Result<String> {
    toml::to_string_pretty(config).map_err(|e| Error::Config(format!("serializing config: {e}")))
}
