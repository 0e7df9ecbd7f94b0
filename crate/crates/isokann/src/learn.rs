//! The ISOKANN outer loop: draw start points, estimate K^tau chi by Monte
//! Carlo (importance-sampled once a usable chi exists), shift-scale the
//! targets, train, repeat until the validation values stop moving.

use std::time::Instant;

use crate::error::{Error, Result};
use crate::koopman::{
    affine_fit, mc_koopman_samples, shift_scale, ScaleMode, ShiftScaleParams,
};
use crate::model::{train_batch, ChiModel, OptimizerState};
use crate::rng::{derive_seed, domain, SplitRng};
use crate::sampling::{default_u_max, ess_from_log_weights, optimal_control_from_chi};
use crate::sde::{Control, PotentialSystem, SimConfig};

/// Candidate pool size for chi-stratified resampling, per requested point.
const RESAMPLE_POOL_FACTOR: usize = 16;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ResampleMode {
    /// Fresh uniform draws from the system box every iteration.
    UniformBox,
    /// Stratify a uniform candidate pool by current chi level.
    ChiStratified,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopConfig {
    /// Outer power iterations.
    pub n_outer: usize,
    /// Start points per iteration.
    pub n_points: usize,
    /// Replicas per start point.
    pub m_shots: usize,
    /// Full-batch training steps per iteration.
    pub epochs_per_iter: usize,
    /// Plain MC before this iteration index, optimal IS from it onward.
    /// Must be >= 1: the control needs a trained chi to make sense.
    pub is_enabled_after: usize,
    pub resample_mode: ResampleMode,
    /// Convergence threshold on the gauge-aligned validation max-change.
    pub conv_tol: f64,
    pub validation_grid: Vec<Vec<f64>>,
    pub learning_rate: f64,
    pub scale_mode: ScaleMode,
    /// Control norm clip; default 10 sigma when unset.
    pub u_max: Option<f64>,
    /// Re-initialize model and optimizer every iteration instead of training
    /// incrementally.
    pub reinit_each_iter: bool,
}

impl LoopConfig {
    /// Defaults sized for the benchmark systems; validation grid spans the
    /// system box (33 nodes in 1D, 9 per axis in 2D).
    pub fn defaults_for(system: &PotentialSystem) -> Self {
        LoopConfig {
            n_outer: 40,
            n_points: 64,
            m_shots: 256,
            epochs_per_iter: 200,
            is_enabled_after: 5,
            resample_mode: ResampleMode::ChiStratified,
            conv_tol: 5e-3,
            validation_grid: box_grid(system, if system.dim() == 1 { 33 } else { 9 }),
            learning_rate: 1e-3,
            scale_mode: ScaleMode::MinMax,
            u_max: None,
            reinit_each_iter: false,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.n_outer == 0 {
            return Err(Error::InvalidArgument("n_outer must be >= 1".into()));
        }
        if self.n_points < 2 {
            return Err(Error::InvalidArgument("n_points must be >= 2 (shift-scale needs a spread)".into()));
        }
        if self.m_shots == 0 {
            return Err(Error::InvalidArgument("m_shots must be >= 1".into()));
        }
        if self.epochs_per_iter == 0 {
            return Err(Error::InvalidArgument("epochs_per_iter must be >= 1".into()));
        }
        if self.is_enabled_after == 0 {
            return Err(Error::InvalidArgument(
                "is_enabled_after must be >= 1 (at least one plain iteration)".into(),
            ));
        }
        if !(self.conv_tol > 0.0) {
            return Err(Error::InvalidArgument(format!("conv_tol must be > 0, got {}", self.conv_tol)));
        }
        if self.validation_grid.is_empty() {
            return Err(Error::InvalidArgument("validation_grid must be non-empty".into()));
        }
        if !(self.learning_rate > 0.0) {
            return Err(Error::InvalidArgument(format!(
                "learning_rate must be > 0, got {}",
                self.learning_rate
            )));
        }
        if let Some(u) = self.u_max {
            if !(u > 0.0) {
                return Err(Error::InvalidArgument(format!("u_max must be > 0, got {u}")));
            }
        }
        Ok(())
    }
}

/// Regular lattice over the system box, `per_axis` nodes per axis.
pub fn box_grid(system: &PotentialSystem, per_axis: usize) -> Vec<Vec<f64>> {
    let lo = system.box_lo();
    let hi = system.box_hi();
    let axis = |a: usize| -> Vec<f64> {
        (0..per_axis)
            .map(|k| lo[a] + (hi[a] - lo[a]) * k as f64 / (per_axis - 1) as f64)
            .collect()
    };
    match system.dim() {
        1 => axis(0).into_iter().map(|x| vec![x]).collect(),
        2 => {
            let xs = axis(0);
            let ys = axis(1);
            let mut grid = Vec::with_capacity(per_axis * per_axis);
            for x in &xs {
                for y in &ys {
                    grid.push(vec![*x, *y]);
                }
            }
            grid
        }
        d => panic!("box_grid supports 1D/2D, got {d}D"),
    }
}

/// One row of the loop report. `shift_*` are the per-iteration shift-scale
/// constants; `fit_*` the least-squares affine fit of targets against the
/// pre-update chi over the same points (NaN while the fit is rank-deficient).
#[derive(Debug, Clone, PartialEq)]
pub struct IterationRecord {
    pub iter: usize,
    pub shift_a: f64,
    pub shift_b: f64,
    pub fit_a: f64,
    pub fit_b: f64,
    pub fit_residual_rms: f64,
    /// MSE at the last training epoch of this iteration.
    pub loss: f64,
    /// Gauge-aligned max change of chi over the validation grid.
    pub validation_change: f64,
    /// Mean effective sample size across surviving points (m when plain).
    pub mean_ess: f64,
    /// Points that survived the divergence guard this iteration.
    pub points_used: usize,
    pub importance: bool,
    /// Wall-clock seconds; diagnostic only, excluded from CSV exports to
    /// keep those bit-reproducible.
    pub wall_seconds: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct LoopReport {
    pub records: Vec<IterationRecord>,
    pub converged: bool,
}

impl LoopReport {
    /// Constants of the final iteration's affine fit, the quantity rates are
    /// derived from.
    pub fn final_params(&self, tau: f64) -> Option<ShiftScaleParams> {
        let last = self.records.last()?;
        if !last.fit_a.is_finite() {
            return None;
        }
        Some(ShiftScaleParams { a: last.fit_a, b: last.fit_b, tau })
    }
}

/// Pick k points whose chi values spread over [0,1]: one candidate per
/// nonempty chi bin (nearest to the bin center), remaining slots filled
/// uniformly at random from the leftovers.
pub fn chi_stratified_resample(
    candidates: &[Vec<f64>],
    chi_values: &[f64],
    k: usize,
    rng: &mut SplitRng,
) -> Result<Vec<Vec<f64>>> {
    if k == 0 {
        return Err(Error::InvalidArgument("k must be >= 1".into()));
    }
    if k > candidates.len() {
        return Err(Error::InvalidArgument(format!(
            "k = {k} exceeds candidate count {}",
            candidates.len()
        )));
    }
    if candidates.len() != chi_values.len() {
        return Err(Error::DimensionMismatch { expected: candidates.len(), got: chi_values.len() });
    }

    let mut taken = vec![false; candidates.len()];
    let mut picked = Vec::with_capacity(k);
    for bin in 0..k {
        let center = (bin as f64 + 0.5) / k as f64;
        let mut best: Option<(usize, f64)> = None;
        for (i, &chi) in chi_values.iter().enumerate() {
            let b = ((chi * k as f64).floor() as isize).clamp(0, k as isize - 1) as usize;
            if b != bin || taken[i] {
                continue;
            }
            let d = (chi - center).abs();
            if best.map_or(true, |(_, bd)| d < bd) {
                best = Some((i, d));
            }
        }
        if let Some((i, _)) = best {
            taken[i] = true;
            picked.push(i);
        }
    }

    let mut leftovers: Vec<usize> = (0..candidates.len()).filter(|&i| !taken[i]).collect();
    while picked.len() < k {
        let j = rng.below(leftovers.len());
        picked.push(leftovers.swap_remove(j));
    }
    Ok(picked.into_iter().map(|i| candidates[i].clone()).collect())
}

/// Resolve the chi / (1 - chi) reflection: return chi_b or its flip,
/// whichever is L2-closer to chi_a (ties keep the identity).
pub fn gauge_align(chi_a: &[f64], chi_b: &[f64]) -> Vec<f64> {
    assert_eq!(chi_a.len(), chi_b.len(), "gauge_align needs equal lengths");
    let mut d_id = 0.0;
    let mut d_flip = 0.0;
    for (&a, &b) in chi_a.iter().zip(chi_b) {
        d_id += (b - a) * (b - a);
        d_flip += (1.0 - b - a) * (1.0 - b - a);
    }
    if d_flip < d_id {
        chi_b.iter().map(|b| 1.0 - b).collect()
    } else {
        chi_b.to_vec()
    }
}

fn eval_grid(model: &ChiModel, grid: &[Vec<f64>]) -> Result<Vec<f64>> {
    grid.iter().map(|x| model.forward(x)).collect()
}

fn draw_uniform_points(system: &PotentialSystem, n: usize, rng: &mut SplitRng) -> Vec<Vec<f64>> {
    (0..n)
        .map(|_| {
            (0..system.dim())
                .map(|a| rng.uniform_in(system.box_lo()[a], system.box_hi()[a]))
                .collect()
        })
        .collect()
}

/// Run the full ISOKANN iteration and return the trained model with its
/// report. All randomness derives from `sim_cfg.master_seed`.
pub fn run_isokann(
    system: &PotentialSystem,
    model: ChiModel,
    loop_cfg: &LoopConfig,
    sim_cfg: &SimConfig,
) -> Result<(ChiModel, LoopReport)> {
    run_isokann_with(system, model, loop_cfg, sim_cfg, |_, _, _| Ok(()))
}

/// [`run_isokann`] with a per-iteration callback (checkpointing hooks).
pub fn run_isokann_with<F>(
    system: &PotentialSystem,
    mut model: ChiModel,
    loop_cfg: &LoopConfig,
    sim_cfg: &SimConfig,
    mut on_iteration: F,
) -> Result<(ChiModel, LoopReport)>
where
    F: FnMut(&ChiModel, &OptimizerState, &IterationRecord) -> Result<()>,
{
    loop_cfg.validate()?;
    sim_cfg.validate()?;
    if model.dim() != system.dim() {
        return Err(Error::DimensionMismatch { expected: system.dim(), got: model.dim() });
    }
    let master = sim_cfg.master_seed;
    let tau = sim_cfg.tau();
    let u_max = loop_cfg.u_max.unwrap_or_else(|| default_u_max(system.sigma()));

    let mut opt = OptimizerState::new(&model, loop_cfg.learning_rate);
    let mut last_params: Option<ShiftScaleParams> = None;
    let mut chi_on_validation = eval_grid(&model, &loop_cfg.validation_grid)?;
    let mut records: Vec<IterationRecord> = Vec::with_capacity(loop_cfg.n_outer);
    let mut converged = false;

    for iter in 0..loop_cfg.n_outer {
        let started = Instant::now();
        if loop_cfg.reinit_each_iter && iter > 0 {
            model = ChiModel::glorot(
                model.layer_dims(),
                derive_seed(master, domain::MODEL_INIT, iter as u64, 0),
            )?;
            opt = OptimizerState::new(&model, loop_cfg.learning_rate);
        }

        // start points
        let mut point_rng = SplitRng::from_key(master, domain::START_POINTS, iter as u64, 0);
        let points = match loop_cfg.resample_mode {
            ResampleMode::UniformBox => draw_uniform_points(system, loop_cfg.n_points, &mut point_rng),
            ResampleMode::ChiStratified => {
                let pool =
                    draw_uniform_points(system, RESAMPLE_POOL_FACTOR * loop_cfg.n_points, &mut point_rng);
                let chi_pool: Vec<f64> = pool
                    .iter()
                    .map(|x| model.forward(x))
                    .collect::<Result<_>>()?;
                let mut fill_rng = SplitRng::from_key(master, domain::RESAMPLE, iter as u64, 0);
                chi_stratified_resample(&pool, &chi_pool, loop_cfg.n_points, &mut fill_rng)?
            }
        };

        // Koopman targets, importance-sampled once a usable chi exists
        let importance = iter >= loop_cfg.is_enabled_after && last_params.is_some();
        let control: Option<Box<dyn Control>> = if importance {
            let params = last_params.as_ref().unwrap();
            Some(Box::new(optimal_control_from_chi(&model, params, system.sigma(), u_max)?))
        } else {
            None
        };
        let iter_sim = sim_cfg.with_seed(derive_seed(master, domain::OUTER_ITER, iter as u64, 0));

        let mut xs: Vec<Vec<f64>> = Vec::with_capacity(points.len());
        let mut means: Vec<f64> = Vec::with_capacity(points.len());
        let mut ess_sum = 0.0;
        for (i, x) in points.iter().enumerate() {
            match mc_koopman_samples(
                system,
                &model,
                x,
                loop_cfg.m_shots,
                &iter_sim,
                control.as_deref(),
                i as u64,
            ) {
                Ok(samples) => {
                    let weighted: Vec<f64> = samples
                        .chi_values
                        .iter()
                        .zip(&samples.log_weights)
                        .map(|(v, lw)| lw.exp() * v)
                        .collect();
                    means.push(weighted.iter().sum::<f64>() / loop_cfg.m_shots as f64);
                    ess_sum += ess_from_log_weights(&samples.log_weights);
                    xs.push(x.clone());
                }
                Err(Error::Divergence { step, point, replica }) => {
                    log::warn!(
                        "iteration {iter}: dropping start point {i} at {x:?} (divergence at step {step}, shot {point}/{replica})"
                    );
                }
                Err(other) => return Err(other),
            }
        }
        if xs.len() * 2 < points.len() {
            return Err(Error::TooManyDivergent { iter, survivors: xs.len(), total: points.len() });
        }
        let mean_ess = ess_sum / xs.len() as f64;

        // shift-scale and the diagnostic affine fit against pre-update chi
        let (targets, shift_params) = match shift_scale(&means, loop_cfg.scale_mode, tau) {
            Ok(ok) => ok,
            Err(Error::Degenerate { .. }) => return Err(Error::ChiCollapsed { iter }),
            Err(other) => return Err(other),
        };
        let chi_at_points: Vec<f64> = xs.iter().map(|x| model.forward(x)).collect::<Result<_>>()?;
        let fit = affine_fit(&chi_at_points, &means, tau).ok();

        // train
        let mut loss = f64::NAN;
        for _ in 0..loop_cfg.epochs_per_iter {
            loss = train_batch(&mut model, &mut opt, &xs, &targets)?;
        }

        // convergence on the validation grid, reflection-gauge fixed
        let chi_new = eval_grid(&model, &loop_cfg.validation_grid)?;
        let aligned = gauge_align(&chi_on_validation, &chi_new);
        let validation_change = aligned
            .iter()
            .zip(&chi_on_validation)
            .map(|(n, o)| (n - o).abs())
            .fold(0.0f64, f64::max);
        chi_on_validation = chi_new;

        let record = IterationRecord {
            iter,
            shift_a: shift_params.a,
            shift_b: shift_params.b,
            fit_a: fit.map_or(f64::NAN, |f| f.params.a),
            fit_b: fit.map_or(f64::NAN, |f| f.params.b),
            fit_residual_rms: fit.map_or(f64::NAN, |f| f.residual_rms),
            loss,
            validation_change,
            mean_ess,
            points_used: xs.len(),
            importance,
            wall_seconds: started.elapsed().as_secs_f64(),
        };
        log::info!(
            "iter {iter}: shift a={:.4} fit a={:.4} loss={:.2e} change={:.2e} ess={:.0}/{} {}",
            record.shift_a,
            record.fit_a,
            record.loss,
            record.validation_change,
            record.mean_ess,
            loop_cfg.m_shots,
            if importance { "IS" } else { "plain" }
        );
        on_iteration(&model, &opt, &record)?;
        records.push(record);
        last_params = Some(shift_params);

        if validation_change < loop_cfg.conv_tol {
            converged = true;
            break;
        }
    }

    Ok((model, LoopReport { records, converged }))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::sde::catalog_potential;

    #[test]
    fn stratified_resample_one_per_bin() {
        let candidates = vec![vec![-1.0], vec![0.0], vec![1.0]];
        let chis = [0.05, 0.5, 0.95];
        let mut rng = SplitRng::from_key(1, domain::RESAMPLE, 0, 0);
        let picked = chi_stratified_resample(&candidates, &chis, 3, &mut rng).unwrap();
        let mut xs: Vec<f64> = picked.iter().map(|p| p[0]).collect();
        xs.sort_by(|a, b| a.partial_cmp(b).unwrap());
        assert_eq!(xs, vec![-1.0, 0.0, 1.0]);
    }

    #[test]
    fn stratified_resample_degenerate_chi() {
        let candidates: Vec<Vec<f64>> = (0..10).map(|i| vec![i as f64]).collect();
        let chis = [0.5; 10];
        let mut rng = SplitRng::from_key(2, domain::RESAMPLE, 0, 0);
        let picked = chi_stratified_resample(&candidates, &chis, 3, &mut rng).unwrap();
        assert_eq!(picked.len(), 3);
        // no duplicates
        for i in 0..3 {
            for j in 0..3 {
                if i != j {
                    assert_ne!(picked[i], picked[j]);
                }
            }
        }
    }

    #[test]
    fn stratified_resample_rejects_oversized_k() {
        let candidates = vec![vec![0.0]];
        let mut rng = SplitRng::from_key(3, domain::RESAMPLE, 0, 0);
        assert!(chi_stratified_resample(&candidates, &[0.5], 2, &mut rng).is_err());
    }

    #[test]
    fn stratified_resample_covers_chi_range() {
        // uniform candidates through a sharp sigmoid: chi mass piles near 0
        // and 1, stratification must still populate the middle
        let mut rng = SplitRng::from_key(4, domain::RESAMPLE, 0, 0);
        let candidates: Vec<Vec<f64>> = (0..1000).map(|_| vec![rng.uniform_in(-2.0, 2.0)]).collect();
        let chis: Vec<f64> =
            candidates.iter().map(|x| 1.0 / (1.0 + (-3.0 * x[0]).exp())).collect();
        let picked = chi_stratified_resample(&candidates, &chis, 64, &mut rng).unwrap();
        let picked_chi: Vec<f64> =
            picked.iter().map(|x| 1.0 / (1.0 + (-3.0 * x[0]).exp())).collect();
        let mut hist = [0usize; 8];
        for c in &picked_chi {
            hist[((c * 8.0).floor() as usize).min(7)] += 1;
        }
        assert!(hist.iter().all(|&h| h > 0), "histogram {hist:?}");
    }

    #[test]
    fn gauge_align_cases() {
        let a = vec![0.1, 0.6, 0.9];
        assert_eq!(gauge_align(&a, &a), a);
        // a flipped input comes back un-flipped (up to the 1-x round trip)
        let flipped: Vec<f64> = a.iter().map(|v| 1.0 - v).collect();
        for (x, y) in gauge_align(&a, &flipped).iter().zip(&a) {
            assert!((x - y).abs() < 1e-15);
        }
        // equidistant (0.25 vs its flip 0.75 about 0.5, exact in floats):
        // prefer identity
        assert_eq!(gauge_align(&[0.5], &[0.25]), vec![0.25]);
    }

    #[test]
    fn loop_is_deterministic_at_zero_noise() {
        let sys = catalog_potential("doublewell1d").unwrap().with_sigma(0.0).unwrap();
        let run = || {
            let model = ChiModel::glorot(&[1, 16, 16, 1], 7).unwrap();
            let mut cfg = LoopConfig::defaults_for(&sys);
            cfg.n_outer = 2;
            cfg.n_points = 16;
            cfg.m_shots = 2;
            cfg.epochs_per_iter = 20;
            cfg.conv_tol = 1e-12;
            let sim = SimConfig::new(0.01, 50, 1234).unwrap();
            run_isokann(&sys, model, &cfg, &sim).unwrap()
        };
        let (model_a, report_a) = run();
        let (model_b, report_b) = run();
        assert_eq!(model_a.params(), model_b.params());
        assert_eq!(report_a.records.len(), report_b.records.len());
        for (ra, rb) in report_a.records.iter().zip(&report_b.records) {
            assert_eq!(ra.shift_a, rb.shift_a);
            assert_eq!(ra.loss, rb.loss);
            assert_eq!(ra.validation_change, rb.validation_change);
        }
    }

    #[test]
    fn collapsed_chi_aborts_with_iteration() {
        // zero model + zero noise: every target is exactly 0.5
        let sys = catalog_potential("doublewell1d").unwrap().with_sigma(0.0).unwrap();
        let model = ChiModel::zeros(&[1, 8, 1]).unwrap();
        let mut cfg = LoopConfig::defaults_for(&sys);
        cfg.n_outer = 3;
        cfg.n_points = 8;
        cfg.m_shots = 1;
        cfg.epochs_per_iter = 1;
        let sim = SimConfig::new(0.01, 20, 5).unwrap();
        match run_isokann(&sys, model, &cfg, &sim) {
            Err(Error::ChiCollapsed { iter: 0 }) => {}
            other => panic!("expected collapse at iteration 0, got {other:?}"),
        }
    }

    #[test]
    fn divergent_points_are_dropped_not_fatal() {
        // zero noise, oversized step: points outside the Euler stability
        // basin blow up deterministically, inner ones survive
        let sys = catalog_potential("doublewell1d").unwrap().with_sigma(0.0).unwrap();
        let model = ChiModel::glorot(&[1, 8, 1], 3).unwrap();
        let mut cfg = LoopConfig::defaults_for(&sys);
        cfg.n_outer = 1;
        cfg.n_points = 32;
        cfg.m_shots = 1;
        cfg.epochs_per_iter = 5;
        cfg.resample_mode = ResampleMode::UniformBox;
        let sim = SimConfig::new(0.2, 60, 11).unwrap();
        let (_, report) = run_isokann(&sys, model, &cfg, &sim).unwrap();
        let used = report.records[0].points_used;
        assert!(used < 32, "expected some divergent points, all survived");
        assert!(used * 2 >= 32, "loop should have erred below 50% survival");
    }

    #[test]
    fn all_points_divergent_is_fatal() {
        let sys = catalog_potential("doublewell1d").unwrap();
        let model = ChiModel::glorot(&[1, 8, 1], 3).unwrap();
        let mut cfg = LoopConfig::defaults_for(&sys);
        cfg.n_outer = 1;
        cfg.n_points = 8;
        cfg.m_shots = 2;
        cfg.epochs_per_iter = 1;
        cfg.resample_mode = ResampleMode::UniformBox;
        let sim = SimConfig::new(50.0, 40, 2).unwrap();
        match run_isokann(&sys, model, &cfg, &sim) {
            Err(Error::TooManyDivergent { iter: 0, survivors, total: 8 }) => {
                assert!(survivors < 4);
            }
            other => panic!("expected divergence abort, got {other:?}"),
        }
    }

    #[test]
    fn short_harmonic_run_produces_sane_report() {
        let sys = catalog_potential("harmonic").unwrap();
        let model = ChiModel::glorot(&[1, 16, 16, 1], 42).unwrap();
        let mut cfg = LoopConfig::defaults_for(&sys);
        cfg.n_outer = 8;
        cfg.n_points = 24;
        cfg.m_shots = 64;
        cfg.epochs_per_iter = 100;
        cfg.is_enabled_after = 3;
        cfg.conv_tol = 1e-9;
        let sim = SimConfig::new(0.02, 50, 99).unwrap();
        let (_, report) = run_isokann(&sys, model, &cfg, &sim).unwrap();
        assert_eq!(report.records.len(), 8);
        for rec in &report.records {
            assert!(rec.mean_ess <= 64.0 + 1e-9);
            assert!(rec.mean_ess > 0.0);
            assert!(rec.validation_change >= 0.0);
            assert_eq!(rec.points_used, 24);
        }
        // plain before the schedule flips, IS after
        assert!(!report.records[2].importance);
        assert!(report.records[3].importance);
        assert_eq!(report.records[2].mean_ess, 64.0);
        // late-run shift constants sit in the metastable regime
        let last = report.records.last().unwrap();
        assert!(last.shift_a > 0.0 && last.shift_a < 1.0, "shift a = {}", last.shift_a);
    }
}
