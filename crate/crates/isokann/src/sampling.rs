//! Importance-sampling controls and weight diagnostics.
//!
//! The optimal control is the Doob-transform drift u*(x) = sigma grad log
//! h(x) with h(x) = E[chi(X_tau) | X_0 = x]. Under the invariant-subspace
//! relation K^tau chi = a chi + b this becomes
//!
//! ```text
//!     u(x) = sigma * a * grad chi(x) / (a chi(x) + b),
//! ```
//!
//! norm-clipped at u_max. The control only steers sampling; the Girsanov
//! weight keeps every estimator unbiased no matter how approximate u is.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::koopman::ShiftScaleParams;
use crate::model::ChiModel;
use crate::sde::{simulate, Control, PotentialSystem, ShotId, SimConfig};

/// chi values are clamped into this range before entering the denominator.
const CHI_CLAMP: f64 = 1e-6;
/// Below this denominator magnitude the formula is abandoned for the
/// u_max-clipped gradient direction.
const DENOM_FLOOR: f64 = 1e-8;

/// Default clipping threshold for the control norm.
pub fn default_u_max(sigma: f64) -> f64 {
    10.0 * sigma
}

/// Declarative control selection (config files, comparison runs).
#[derive(Debug, Clone)]
pub enum ControlSpec {
    Zero,
    Constant(Vec<f64>),
    OptimalChi { chi: ChiModel, params: ShiftScaleParams, u_max: f64 },
}

impl ControlSpec {
    /// Materialize the control; `None` means the exactly-uncontrolled
    /// dynamics (zero log-weight by construction).
    pub fn build(&self, sigma: f64, dim: usize) -> Result<Option<Box<dyn Control>>> {
        match self {
            ControlSpec::Zero => Ok(None),
            ControlSpec::Constant(c) => {
                if c.len() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: c.len() });
                }
                let c = c.clone();
                Ok(Some(Box::new(move |_x: &[f64], _t: f64, out: &mut [f64]| {
                    out.copy_from_slice(&c);
                })))
            }
            ControlSpec::OptimalChi { chi, params, u_max } => {
                if chi.dim() != dim {
                    return Err(Error::DimensionMismatch { expected: dim, got: chi.dim() });
                }
                let ctrl = optimal_control_from_chi(chi, params, sigma, *u_max)?;
                Ok(Some(Box::new(ctrl)))
            }
        }
    }
}

/// The core arithmetic of the optimal control, separated from the model:
/// u = sigma a g / (a chi + b) with chi pre-clamped, then norm clipping.
/// Near-zero denominators fall back to the u_max-clipped direction of g.
fn control_formula(chi_val: f64, grad: &[f64], a: f64, b: f64, sigma: f64, u_max: f64, out: &mut [f64]) {
    let chi = chi_val.clamp(CHI_CLAMP, 1.0 - CHI_CLAMP);
    let denom = a * chi + b;
    if denom.abs() < DENOM_FLOOR {
        log::debug!("optimal control denominator {denom:.3e} below floor; using clipped gradient direction");
        let norm = grad.iter().map(|g| g * g).sum::<f64>().sqrt();
        if norm == 0.0 {
            out.fill(0.0);
        } else {
            for (o, &g) in out.iter_mut().zip(grad) {
                *o = u_max * g / norm;
            }
        }
        return;
    }
    let scale = sigma * a / denom;
    for (o, &g) in out.iter_mut().zip(grad) {
        *o = scale * g;
    }
    let norm = out.iter().map(|v| v * v).sum::<f64>().sqrt();
    if norm > u_max {
        let shrink = u_max / norm;
        for o in out.iter_mut() {
            *o *= shrink;
        }
    }
}

/// Time-independent optimal control derived from a learned chi.
#[derive(Debug, Clone)]
pub struct OptimalControl {
    chi: ChiModel,
    a: f64,
    b: f64,
    sigma: f64,
    u_max: f64,
}

pub fn optimal_control_from_chi(
    chi: &ChiModel,
    params: &ShiftScaleParams,
    sigma: f64,
    u_max: f64,
) -> Result<OptimalControl> {
    if !(params.a > 0.0 && params.a.is_finite()) {
        return Err(Error::InvalidArgument(format!("optimal control requires a > 0, got {}", params.a)));
    }
    if !(u_max > 0.0 && u_max.is_finite()) {
        return Err(Error::InvalidArgument(format!("u_max must be finite and > 0, got {u_max}")));
    }
    if !(sigma.is_finite() && sigma >= 0.0) {
        return Err(Error::InvalidArgument(format!("sigma must be finite and >= 0, got {sigma}")));
    }
    Ok(OptimalControl { chi: chi.clone(), a: params.a, b: params.b, sigma, u_max })
}

impl Control for OptimalControl {
    fn evaluate(&self, x: &[f64], _t: f64, out: &mut [f64]) {
        let value = self.chi.forward(x).expect("control input matches model dimension");
        let grad = self.chi.grad_input(x).expect("control input matches model dimension");
        control_formula(value, &grad, self.a, self.b, self.sigma, self.u_max, out);
    }
}

/// Importance-weight health of a batch of controlled shots.
#[derive(Debug, Clone, PartialEq)]
pub struct WeightDiagnostics {
    /// Effective sample size from self-normalized weights, in (0, m].
    pub ess: f64,
    pub log_weight_mean: f64,
    pub log_weight_var: f64,
    /// Sample variance of the weighted values Z_i chi_i.
    pub is_variance: f64,
    /// plain variance / IS variance at matched m; filled by the caller when
    /// a matched plain run exists.
    pub variance_ratio: Option<f64>,
}

/// ESS = (sum w)^2 / sum w^2; m iff all weights equal, 1 iff one weight
/// dominates completely.
pub fn ess_from_weights(weights: &[f64]) -> f64 {
    let s: f64 = weights.iter().sum();
    let s2: f64 = weights.iter().map(|w| w * w).sum();
    if s2 == 0.0 {
        return 0.0;
    }
    s * s / s2
}

/// ESS computed stably from log-weights (max-shifted before exponentiation;
/// the shift cancels in the ratio).
pub fn ess_from_log_weights(log_weights: &[f64]) -> f64 {
    let max = log_weights.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    let weights: Vec<f64> = log_weights.iter().map(|lw| (lw - max).exp()).collect();
    ess_from_weights(&weights)
}

/// Diagnostics over one batch of paths and the chi values at their
/// endpoints. `variance_ratio` is left unset; see
/// [`WeightDiagnostics::with_plain_variance`].
pub fn weight_diagnostics(
    log_weights: &[f64],
    chi_endpoint_values: &[f64],
) -> Result<WeightDiagnostics> {
    if log_weights.is_empty() {
        return Err(Error::EmptyBatch);
    }
    if log_weights.len() != chi_endpoint_values.len() {
        return Err(Error::DimensionMismatch {
            expected: log_weights.len(),
            got: chi_endpoint_values.len(),
        });
    }
    let m = log_weights.len() as f64;
    let lw_mean = log_weights.iter().sum::<f64>() / m;
    let lw_var = if log_weights.len() > 1 {
        log_weights.iter().map(|lw| (lw - lw_mean) * (lw - lw_mean)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    let weighted: Vec<f64> =
        log_weights.iter().zip(chi_endpoint_values).map(|(lw, v)| lw.exp() * v).collect();
    let w_mean = weighted.iter().sum::<f64>() / m;
    let is_variance = if weighted.len() > 1 {
        weighted.iter().map(|v| (v - w_mean) * (v - w_mean)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    Ok(WeightDiagnostics {
        ess: ess_from_log_weights(log_weights),
        log_weight_mean: lw_mean,
        log_weight_var: lw_var,
        is_variance,
        variance_ratio: None,
    })
}

impl WeightDiagnostics {
    pub fn with_plain_variance(mut self, plain_variance: f64) -> Self {
        self.variance_ratio = Some(plain_variance / self.is_variance);
        self
    }
}

/// One grid point of the plain-vs-IS comparison.
#[derive(Debug, Clone, PartialEq)]
pub struct VarianceRow {
    pub x: Vec<f64>,
    pub plain_mean: f64,
    pub plain_var: f64,
    pub is_mean: f64,
    pub is_var: f64,
    /// plain_var / is_var.
    pub ratio: f64,
    pub ess: f64,
}

/// Simulate m shots from x and return (chi endpoint values, log-weights),
/// in replica order.
fn run_shots(
    system: &PotentialSystem,
    chi: &ChiModel,
    x: &[f64],
    m: usize,
    cfg: &SimConfig,
    control: Option<&dyn Control>,
    point_index: u64,
    replica_offset: u64,
) -> Result<(Vec<f64>, Vec<f64>)> {
    let shots: Vec<Result<(f64, f64)>> = (0..m as u64)
        .into_par_iter()
        .map(|replica| {
            let shot = ShotId::new(point_index, replica_offset + replica);
            let path = simulate(system, x, cfg, control, shot)?;
            Ok((chi.forward(path.last())?, path.log_weight))
        })
        .collect();
    let mut values = Vec::with_capacity(m);
    let mut log_weights = Vec::with_capacity(m);
    for shot in shots {
        let (v, lw) = shot?;
        values.push(v);
        log_weights.push(lw);
    }
    Ok((values, log_weights))
}

fn mean_and_var(values: &[f64]) -> (f64, f64) {
    let m = values.len() as f64;
    let mean = values.iter().sum::<f64>() / m;
    let var = if values.len() > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1.0)
    } else {
        0.0
    };
    (mean, var)
}

/// Plain-MC vs optimal-IS comparison over a grid, both with m shots per
/// point but independent noise streams (plain uses replicas 0..m, IS uses
/// m..2m), so the two estimates are independent draws of the same quantity.
pub fn variance_study(
    system: &PotentialSystem,
    chi: &ChiModel,
    params: &ShiftScaleParams,
    x_grid: &[Vec<f64>],
    m: usize,
    cfg: &SimConfig,
) -> Result<Vec<VarianceRow>> {
    let spec = ControlSpec::OptimalChi {
        chi: chi.clone(),
        params: *params,
        u_max: default_u_max(system.sigma()),
    };
    variance_study_with_control(system, chi, x_grid, m, cfg, &spec)
}

/// As `variance_study` but with an explicit control for the second leg.
/// `ControlSpec::Zero` makes the second leg an independent plain run, a noise
/// floor for the ratio column.
pub fn variance_study_with_control(
    system: &PotentialSystem,
    chi: &ChiModel,
    x_grid: &[Vec<f64>],
    m: usize,
    cfg: &SimConfig,
    spec: &ControlSpec,
) -> Result<Vec<VarianceRow>> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be >= 1".into()));
    }
    if x_grid.is_empty() {
        return Err(Error::EmptyBatch);
    }
    let control = spec.build(system.sigma(), system.dim())?;
    let mut rows = Vec::with_capacity(x_grid.len());
    for (i, x) in x_grid.iter().enumerate() {
        let (plain_vals, _) = run_shots(system, chi, x, m, cfg, None, i as u64, 0)?;
        let (is_vals, log_weights) =
            run_shots(system, chi, x, m, cfg, control.as_deref(), i as u64, m as u64)?;
        let (plain_mean, plain_var) = mean_and_var(&plain_vals);
        let weighted: Vec<f64> =
            is_vals.iter().zip(&log_weights).map(|(v, lw)| lw.exp() * v).collect();
        let (is_mean, is_var) = mean_and_var(&weighted);
        rows.push(VarianceRow {
            x: x.clone(),
            plain_mean,
            plain_var,
            is_mean,
            is_var,
            ratio: plain_var / is_var,
            ess: ess_from_log_weights(&log_weights),
        });
    }
    Ok(rows)
}
