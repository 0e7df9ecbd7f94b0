//! Command drivers behind the `isokann` binary. Each returns the process
//! exit code: 0 on success, 2 when an iteration ran out of budget without
//! converging (artifacts are still written), and any `Err` maps to 1 in main.

use std::path::{Path, PathBuf};

use clap::{Parser, Subcommand};

use crate::config::{to_toml, CompareControl, FileConfig, Overrides, RunConfig};
use crate::error::{Error, Result};
use crate::koopman::{affine_fit, mc_koopman, rate_from_params};
use crate::learn::run_isokann_with;
use crate::model::{checkpoint_load, checkpoint_save, ChiModel};
use crate::oracle::{build_generator_with_scheme, oracle_chi};
use crate::output::{write_grid_csv, write_oracle_csv, write_report_csv, write_variance_csv};
use crate::sampling::{default_u_max, variance_study_with_control, ControlSpec};

pub const EXIT_OK: i32 = 0;
pub const EXIT_ERROR: i32 = 1;
pub const EXIT_NO_CONVERGENCE: i32 = 2;

#[derive(Debug, Parser)]
#[command(name = "isokann", version, about = "Koopman eigenfunction learning for metastable diffusions")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,

    /// Override the master seed from the config.
    #[arg(long, global = true)]
    pub seed: Option<u64>,

    /// Output directory (beats the ISOKANN_OUT environment variable and the
    /// config's [output] dir).
    #[arg(long, global = true)]
    pub out: Option<PathBuf>,

    /// Worker threads for shot-level parallelism. Any value produces
    /// bit-identical artifacts; this only trades wall time.
    #[arg(long, global = true)]
    pub threads: Option<usize>,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Learn chi by the power iteration and write report, chi grid, and
    /// checkpoints.
    Run { config: PathBuf },
    /// Solve the grid reference problem and write chi_ref with its
    /// shift-scale constants.
    Oracle { config: PathBuf },
    /// Compare plain and importance-sampled estimators from a checkpoint.
    Compare { config: PathBuf, checkpoint: PathBuf },
    /// Evaluate a checkpointed chi on the validation grid and write CSV.
    Export { config: PathBuf, checkpoint: PathBuf },
}

pub fn run_cli(cli: Cli) -> Result<i32> {
    let overrides = Overrides { seed: cli.seed, out: cli.out };
    match cli.command {
        Command::Run { config } => cmd_run(&config, &overrides),
        Command::Oracle { config } => cmd_oracle(&config, &overrides),
        Command::Compare { config, checkpoint } => cmd_compare(&config, &checkpoint, &overrides),
        Command::Export { config, checkpoint } => cmd_export(&config, &checkpoint, &overrides),
    }
}

/// Install the global worker pool. Must run before any parallel work.
pub fn init_threads(n: Option<usize>) -> Result<()> {
    let Some(n) = n else { return Ok(()) };
    if n == 0 {
        return Err(Error::Config("--threads must be >= 1".into()));
    }
    rayon::ThreadPoolBuilder::new()
        .num_threads(n)
        .build_global()
        .map_err(|e| Error::Config(format!("thread pool: {e}")))
}

/// Load, resolve, create the output directory, and echo the resolved config.
fn prepare(config_path: &Path, overrides: &Overrides) -> Result<RunConfig> {
    let run = FileConfig::load(config_path)?.resolve(overrides)?;
    std::fs::create_dir_all(&run.out_dir).map_err(|e| Error::io(&run.out_dir, e))?;
    let echo_path = run.out_dir.join("resolved.toml");
    std::fs::write(&echo_path, to_toml(&run.resolved)?).map_err(|e| Error::io(&echo_path, e))?;
    Ok(run)
}

fn load_model(checkpoint: &Path, run: &RunConfig) -> Result<ChiModel> {
    let bytes = std::fs::read(checkpoint).map_err(|e| Error::io(checkpoint, e))?;
    let (model, _) = checkpoint_load(&bytes)?;
    if model.dim() != run.system.dim() {
        return Err(Error::DimensionMismatch { expected: run.system.dim(), got: model.dim() });
    }
    Ok(model)
}

fn eval_on(model: &ChiModel, grid: &[Vec<f64>]) -> Result<Vec<f64>> {
    grid.iter().map(|x| model.forward(x)).collect()
}

pub fn cmd_run(config_path: &Path, overrides: &Overrides) -> Result<i32> {
    let run = prepare(config_path, overrides)?;
    let ckpt_dir = run.out_dir.join("checkpoints");
    std::fs::create_dir_all(&ckpt_dir).map_err(|e| Error::io(&ckpt_dir, e))?;

    let model = ChiModel::glorot(&run.model_dims, run.sim.master_seed)?;
    let mut last_checkpoint: Vec<u8> = Vec::new();
    let (model, report) =
        run_isokann_with(&run.system, model, &run.loop_cfg, &run.sim, |m, opt, rec| {
            last_checkpoint = checkpoint_save(m, opt);
            let path = ckpt_dir.join(format!("iter_{:04}.bin", rec.iter));
            std::fs::write(&path, &last_checkpoint).map_err(|e| Error::io(&path, e))
        })?;

    let model_path = run.out_dir.join("model.bin");
    std::fs::write(&model_path, &last_checkpoint).map_err(|e| Error::io(&model_path, e))?;
    write_report_csv(&run.out_dir.join("report.csv"), &report)?;
    let chi = eval_on(&model, &run.loop_cfg.validation_grid)?;
    write_grid_csv(&run.out_dir.join("chi.csv"), "chi", &run.loop_cfg.validation_grid, &chi)?;

    let last = report.records.last().expect("n_outer >= 1 guarantees a record");
    match report.final_params(run.sim.tau()).and_then(|p| rate_from_params(&p).ok()) {
        Some(rate) => println!(
            "{} after {} iterations: a={:.6} kappa={:.6} chi_inf={:.4} (artifacts in {})",
            if report.converged { "converged" } else { "stopped" },
            report.records.len(),
            rate.lambda,
            rate.kappa,
            rate.chi_infinity,
            run.out_dir.display(),
        ),
        None => println!(
            "{} after {} iterations: no usable affine fit yet (artifacts in {})",
            if report.converged { "converged" } else { "stopped" },
            report.records.len(),
            run.out_dir.display(),
        ),
    }
    if report.converged {
        Ok(EXIT_OK)
    } else {
        eprintln!(
            "no convergence within {} iterations (last change {:.3e}, tol {:.3e})",
            run.loop_cfg.n_outer, last.validation_change, run.loop_cfg.conv_tol
        );
        Ok(EXIT_NO_CONVERGENCE)
    }
}

pub fn cmd_oracle(config_path: &Path, overrides: &Overrides) -> Result<i32> {
    let run = prepare(config_path, overrides)?;
    let op = build_generator_with_scheme(
        &run.system,
        &run.oracle.lo,
        &run.oracle.hi,
        &run.oracle.n,
        run.oracle.scheme,
    )?;
    match oracle_chi(&op, run.sim.tau(), run.oracle.max_iters, run.oracle.tol) {
        Ok((chi_ref, params)) => {
            write_oracle_csv(&run.out_dir.join("oracle.csv"), &op.nodes(), &chi_ref, params.a, params.b)?;
            match rate_from_params(&params) {
                Ok(rate) => println!(
                    "oracle: a={:.6} kappa={:.6} chi_inf={:.4} on {:?} nodes (artifacts in {})",
                    rate.lambda,
                    rate.kappa,
                    rate.chi_infinity,
                    run.oracle.n,
                    run.out_dir.display(),
                ),
                Err(_) => println!(
                    "oracle: a={:.6} outside (0,1), no finite rate (artifacts in {})",
                    params.a,
                    run.out_dir.display(),
                ),
            }
            Ok(EXIT_OK)
        }
        Err(Error::NoConvergence { iters, last_change }) => {
            eprintln!("oracle power iteration: no convergence in {iters} iterations (last change {last_change:.3e})");
            Ok(EXIT_NO_CONVERGENCE)
        }
        Err(e) => Err(e),
    }
}

pub fn cmd_compare(config_path: &Path, checkpoint: &Path, overrides: &Overrides) -> Result<i32> {
    let run = prepare(config_path, overrides)?;
    let model = load_model(checkpoint, &run)?;
    let m = run.compare.m;
    if m == 1 {
        eprintln!("warning: compare.m = 1 gives zero-variance rows; ratios will be meaningless");
    }

    let spec = match run.compare.control {
        CompareControl::Zero => ControlSpec::Zero,
        CompareControl::Optimal => {
            // estimate the affine constants the control needs from a plain
            // pass over the comparison grid (same streams as the study's
            // plain leg, so the numbers agree)
            let chi_vals = eval_on(&model, &run.compare.grid)?;
            let mut means = Vec::with_capacity(run.compare.grid.len());
            for (i, x) in run.compare.grid.iter().enumerate() {
                let est = mc_koopman(&run.system, &model, x, m, &run.sim, None, i as u64)?;
                means.push(est.mean);
            }
            let fit = affine_fit(&chi_vals, &means, run.sim.tau())?;
            log::info!(
                "compare: affine fit a={:.4} b={:.4} rms={:.2e}",
                fit.params.a,
                fit.params.b,
                fit.residual_rms
            );
            ControlSpec::OptimalChi {
                chi: model.clone(),
                params: fit.params,
                u_max: default_u_max(run.system.sigma()),
            }
        }
    };

    let rows = variance_study_with_control(&run.system, &model, &run.compare.grid, m, &run.sim, &spec)?;
    write_variance_csv(&run.out_dir.join("compare.csv"), &rows)?;

    let mut ratios: Vec<f64> = rows.iter().map(|r| r.ratio).filter(|r| r.is_finite()).collect();
    ratios.sort_by(|a, b| a.partial_cmp(b).unwrap());
    let median_ratio = if ratios.is_empty() {
        f64::NAN
    } else if ratios.len() % 2 == 1 {
        ratios[ratios.len() / 2]
    } else {
        0.5 * (ratios[ratios.len() / 2 - 1] + ratios[ratios.len() / 2])
    };
    let min_ess = rows.iter().map(|r| r.ess).fold(f64::INFINITY, f64::min);
    println!(
        "compare over {} points, m={}: median variance ratio {:.2}, min ESS {:.1} (artifacts in {})",
        rows.len(),
        m,
        median_ratio,
        min_ess,
        run.out_dir.display(),
    );
    Ok(EXIT_OK)
}

pub fn cmd_export(config_path: &Path, checkpoint: &Path, overrides: &Overrides) -> Result<i32> {
    let run = prepare(config_path, overrides)?;
    let model = load_model(checkpoint, &run)?;
    let chi = eval_on(&model, &run.loop_cfg.validation_grid)?;
    write_grid_csv(&run.out_dir.join("export.csv"), "chi", &run.loop_cfg.validation_grid, &chi)?;
    println!(
        "exported chi at {} grid points (artifacts in {})",
        run.loop_cfg.validation_grid.len(),
        run.out_dir.display(),
    );
    Ok(EXIT_OK)
}
