//! Monte Carlo estimation of (K^tau chi)(x) = E[chi(X_tau) | X_0 = x],
//! the shift-scale normalization S that drives the power iteration, and
//! eigenvalue/rate extraction from the affine relation K^tau chi = a chi + b.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::model::ChiModel;
use crate::sde::{simulate, Control, PotentialSystem, ShotId, SimConfig};

/// Scalar observable of the end state. Implemented by [`ChiModel`] and by
/// plain closures (reference eigenfunctions in tests).
pub trait Observable: Send + Sync {
    fn evaluate(&self, x: &[f64]) -> Result<f64>;
}

impl Observable for ChiModel {
    fn evaluate(&self, x: &[f64]) -> Result<f64> {
        self.forward(x)
    }
}

impl<F> Observable for F
where
    F: Fn(&[f64]) -> f64 + Send + Sync,
{
    fn evaluate(&self, x: &[f64]) -> Result<f64> {
        Ok(self(x))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum EstimatorMethod {
    /// Uncontrolled dynamics; every per-shot weight is exactly 1.
    Plain,
    /// Controlled dynamics with Girsanov reweighting.
    Importance,
}

/// Per-start-point estimate of (K^tau chi)(x).
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanEstimate {
    pub x: Vec<f64>,
    /// Mean of the per-shot weighted values Z_i chi(X_tau^(i)).
    pub mean: f64,
    /// Sample variance of the per-shot weighted values (0 when m = 1).
    pub variance: f64,
    pub m: usize,
    pub method: EstimatorMethod,
}

impl KoopmanEstimate {
    /// Standard error of the mean.
    pub fn std_error(&self) -> f64 {
        (self.variance / self.m as f64).sqrt()
    }
}

/// Per-shot sample detail behind a [`KoopmanEstimate`]: endpoint chi values
/// and log-weights in replica order. Weighted values are
/// `log_weights[i].exp() * chi_values[i]`.
#[derive(Debug, Clone, PartialEq)]
pub struct KoopmanSamples {
    pub chi_values: Vec<f64>,
    pub log_weights: Vec<f64>,
}

/// The raw shots behind [`mc_koopman`], for callers that need weight
/// diagnostics on top of the estimate.
pub fn mc_koopman_samples(
    system: &PotentialSystem,
    chi: &dyn Observable,
    x: &[f64],
    m: usize,
    cfg: &SimConfig,
    control: Option<&dyn Control>,
    point_index: u64,
) -> Result<KoopmanSamples> {
    if m == 0 {
        return Err(Error::InvalidArgument("m must be >= 1".into()));
    }
    if x.len() != system.dim() {
        return Err(Error::DimensionMismatch { expected: system.dim(), got: x.len() });
    }

    let shots: Vec<Result<(f64, f64)>> = (0..m as u64)
        .into_par_iter()
        .map(|replica| {
            let path = simulate(system, x, cfg, control, ShotId::new(point_index, replica))?;
            let value = chi.evaluate(path.last())?;
            Ok((value, path.log_weight))
        })
        .collect();

    let mut chi_values = Vec::with_capacity(m);
    let mut log_weights = Vec::with_capacity(m);
    for shot in shots {
        let (v, lw) = shot?;
        chi_values.push(v);
        log_weights.push(lw);
    }
    Ok(KoopmanSamples { chi_values, log_weights })
}

/// Estimate (K^tau chi)(x) from m shots with replica indices 0..m.
///
/// Shots run in parallel; the mean/variance reduction is performed in
/// replica order, so results are bit-identical at any thread count. A
/// divergent shot fails the whole estimate (the caller decides whether to
/// drop the point).
pub fn mc_koopman(
    system: &PotentialSystem,
    chi: &dyn Observable,
    x: &[f64],
    m: usize,
    cfg: &SimConfig,
    control: Option<&dyn Control>,
    point_index: u64,
) -> Result<KoopmanEstimate> {
    let samples = mc_koopman_samples(system, chi, x, m, cfg, control, point_index)?;
    let values: Vec<f64> = samples
        .chi_values
        .iter()
        .zip(&samples.log_weights)
        .map(|(v, lw)| lw.exp() * v)
        .collect();

    let mean = values.iter().sum::<f64>() / m as f64;
    let variance = if m > 1 {
        values.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (m - 1) as f64
    } else {
        0.0
    };

    Ok(KoopmanEstimate {
        x: x.to_vec(),
        mean,
        variance,
        m,
        method: if control.is_some() { EstimatorMethod::Importance } else { EstimatorMethod::Plain },
    })
}

/// Affine constants of the normalization S (and of K^tau chi = a chi + b).
/// Eigenvalue lambda = a; the lag tau travels with the constants so rates
/// can be derived without extra context.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ShiftScaleParams {
    pub a: f64,
    pub b: f64,
    pub tau: f64,
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum ScaleMode {
    /// S(v) = (v - min) / (max - min).
    MinMax,
    /// Use the p-th and (100-p)-th percentiles as min/max and clamp the
    /// scaled values to [0,1]; tames MC outliers. p in [0, 50).
    Percentile(f64),
}

/// Values are considered collapsed when their usable spread is below this.
const DEGENERACY_SPREAD: f64 = 1e-12;

/// Shift-scale normalization: map `values` affinely onto [0,1] and report
/// the inverse map's constants (a = spread, b = offset).
pub fn shift_scale(values: &[f64], mode: ScaleMode, tau: f64) -> Result<(Vec<f64>, ShiftScaleParams)> {
    if values.len() < 2 {
        return Err(Error::InvalidArgument(format!(
            "shift_scale needs at least 2 values, got {}",
            values.len()
        )));
    }
    for (i, v) in values.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "values", component: i });
        }
    }
    let (lo, hi) = match mode {
        ScaleMode::MinMax => {
            let lo = values.iter().cloned().fold(f64::INFINITY, f64::min);
            let hi = values.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
            (lo, hi)
        }
        ScaleMode::Percentile(p) => {
            if !(0.0..50.0).contains(&p) {
                return Err(Error::InvalidArgument(format!("percentile p must be in [0, 50), got {p}")));
            }
            let mut sorted = values.to_vec();
            sorted.sort_by(|a, b| a.partial_cmp(b).unwrap());
            (percentile_of_sorted(&sorted, p), percentile_of_sorted(&sorted, 100.0 - p))
        }
    };
    let spread = hi - lo;
    if spread.abs() <= DEGENERACY_SPREAD {
        return Err(Error::Degenerate { spread });
    }
    let scaled = values.iter().map(|v| ((v - lo) / spread).clamp(0.0, 1.0)).collect();
    Ok((scaled, ShiftScaleParams { a: spread, b: lo, tau }))
}

/// Linearly interpolated percentile of an ascending-sorted slice.
fn percentile_of_sorted(sorted: &[f64], p: f64) -> f64 {
    let rank = p / 100.0 * (sorted.len() - 1) as f64;
    let lo = rank.floor() as usize;
    let frac = rank - lo as f64;
    if lo + 1 < sorted.len() {
        sorted[lo] * (1.0 - frac) + sorted[lo + 1] * frac
    } else {
        sorted[lo]
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct AffineFit {
    pub params: ShiftScaleParams,
    /// Root-mean-square residual of the least-squares fit.
    pub residual_rms: f64,
}

/// Ordinary least squares for koopman_means ~ a * chi_vals + b. The slope
/// estimates the subdominant Koopman eigenvalue.
pub fn affine_fit(chi_vals: &[f64], koopman_means: &[f64], tau: f64) -> Result<AffineFit> {
    if chi_vals.len() != koopman_means.len() {
        return Err(Error::DimensionMismatch { expected: chi_vals.len(), got: koopman_means.len() });
    }
    let n = chi_vals.len();
    if n < 2 {
        return Err(Error::InvalidArgument(format!("affine_fit needs at least 2 points, got {n}")));
    }
    let lo = chi_vals.iter().cloned().fold(f64::INFINITY, f64::min);
    let hi = chi_vals.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
    if !(hi - lo).is_finite() || hi - lo <= DEGENERACY_SPREAD {
        return Err(Error::RankDeficient);
    }
    let nf = n as f64;
    let mean_x = chi_vals.iter().sum::<f64>() / nf;
    let mean_y = koopman_means.iter().sum::<f64>() / nf;
    let mut sxx = 0.0;
    let mut sxy = 0.0;
    for (&x, &y) in chi_vals.iter().zip(koopman_means) {
        sxx += (x - mean_x) * (x - mean_x);
        sxy += (x - mean_x) * (y - mean_y);
    }
    let a = sxy / sxx;
    let b = mean_y - a * mean_x;
    let ss_res: f64 = chi_vals
        .iter()
        .zip(koopman_means)
        .map(|(&x, &y)| {
            let r = y - (a * x + b);
            r * r
        })
        .sum();
    Ok(AffineFit { params: ShiftScaleParams { a, b, tau }, residual_rms: (ss_res / nf).sqrt() })
}

/// Spectral quantities derived from the affine constants.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct RateInfo {
    /// Subdominant Koopman eigenvalue, lambda = a.
    pub lambda: f64,
    /// Relaxation rate, kappa = -ln(a) / tau.
    pub kappa: f64,
    /// Fixed point of v -> a v + b, chi_inf = b / (1 - a).
    pub chi_infinity: f64,
}

pub fn rate_from_params(params: &ShiftScaleParams) -> Result<RateInfo> {
    if !(params.a > 0.0 && params.a < 1.0) {
        return Err(Error::OutOfRegime { a: params.a });
    }
    if !(params.tau.is_finite() && params.tau > 0.0) {
        return Err(Error::InvalidArgument(format!("tau must be finite and > 0, got {}", params.tau)));
    }
    Ok(RateInfo {
        lambda: params.a,
        kappa: -params.a.ln() / params.tau,
        chi_infinity: params.b / (1.0 - params.a),
    })
}
