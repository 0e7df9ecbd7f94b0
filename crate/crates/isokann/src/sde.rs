//! Benchmark potential systems and Euler-Maruyama integration of the
//! (optionally controlled) overdamped Langevin equation
//!
//! ```text
//!     dX = (-grad V(X) + sigma * u(X)) dt + sigma dW
//! ```
//!
//! with the Girsanov log-weight accumulated along each path,
//!
//! ```text
//!     d log Z = -u(X_k) . xi_k sqrt(dt) - 1/2 |u(X_k)|^2 dt,
//! ```
//!
//! so that `E_u[ Z f(X_tau) ] = E_0[ f(X_tau) ]` for any bounded control u:
//! the weight maps controlled samples back to the uncontrolled path measure.

use crate::error::{Error, Result};
use crate::rng::{domain, SplitRng};

/// Trajectory is aborted once |x| exceeds this (divergence guard).
pub const DIVERGENCE_RADIUS: f64 = 1e6;

/// Benchmark potentials with analytic gradients.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum PotentialKind {
    /// V(x) = |x|^2 / 2 (1D by default; the OU process).
    Harmonic,
    /// V(x) = (x^2 - 1)^2, wells at x = -1 and x = +1.
    DoubleWell1d,
    /// V(x, y) = (x^2 - 1)^2 + y^2 / 2.
    DoubleWell2d,
    /// Three-Gaussian-well surface with quartic confinement.
    TripleWell2d,
    /// V = 0 on the box; no metastable structure.
    Constant,
}

impl PotentialKind {
    pub fn parse(name: &str) -> Result<Self> {
        match name {
            "harmonic" => Ok(PotentialKind::Harmonic),
            "doublewell1d" => Ok(PotentialKind::DoubleWell1d),
            "doublewell2d" => Ok(PotentialKind::DoubleWell2d),
            "triplewell2d" => Ok(PotentialKind::TripleWell2d),
            "constant" => Ok(PotentialKind::Constant),
            other => Err(Error::UnknownPotential(other.to_string())),
        }
    }

    pub fn name(&self) -> &'static str {
        match self {
            PotentialKind::Harmonic => "harmonic",
            PotentialKind::DoubleWell1d => "doublewell1d",
            PotentialKind::DoubleWell2d => "doublewell2d",
            PotentialKind::TripleWell2d => "triplewell2d",
            PotentialKind::Constant => "constant",
        }
    }
}

/// The SDE model: potential, gradient, and isotropic diffusion coefficient.
#[derive(Debug, Clone, PartialEq)]
pub struct PotentialSystem {
    kind: PotentialKind,
    dim: usize,
    sigma: f64,
    /// Simulation box (start-point sampling and default oracle bounds).
    box_lo: Vec<f64>,
    box_hi: Vec<f64>,
}

/// Look up a catalog system by name, with its default diffusion coefficient
/// and simulation box.
pub fn catalog_potential(name: &str) -> Result<PotentialSystem> {
    let kind = PotentialKind::parse(name)?;
    Ok(PotentialSystem::new(kind))
}

impl PotentialSystem {
    pub fn new(kind: PotentialKind) -> Self {
        let (dim, sigma, box_lo, box_hi) = match kind {
            PotentialKind::Harmonic => (1, std::f64::consts::SQRT_2, vec![-3.0], vec![3.0]),
            PotentialKind::DoubleWell1d => (1, 1.0, vec![-2.0], vec![2.0]),
            PotentialKind::DoubleWell2d => (2, 1.0, vec![-2.0, -2.0], vec![2.0, 2.0]),
            PotentialKind::TripleWell2d => (2, 1.0, vec![-2.0, -1.5], vec![2.0, 2.5]),
            PotentialKind::Constant => (1, std::f64::consts::SQRT_2, vec![-3.0], vec![3.0]),
        };
        PotentialSystem { kind, dim, sigma, box_lo, box_hi }
    }

    pub fn with_sigma(mut self, sigma: f64) -> Result<Self> {
        if !(sigma.is_finite() && sigma >= 0.0) {
            return Err(Error::InvalidArgument(format!("sigma must be finite and >= 0, got {sigma}")));
        }
        self.sigma = sigma;
        Ok(self)
    }

    pub fn kind(&self) -> PotentialKind {
        self.kind
    }

    pub fn name(&self) -> &'static str {
        self.kind.name()
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn sigma(&self) -> f64 {
        self.sigma
    }

    pub fn box_lo(&self) -> &[f64] {
        &self.box_lo
    }

    pub fn box_hi(&self) -> &[f64] {
        &self.box_hi
    }

    /// Locations of the potential minima (empty for the flat potential).
    /// Used by grid diagnostics to flag bounds that cut off a well.
    pub fn wells(&self) -> Vec<Vec<f64>> {
        match self.kind {
            PotentialKind::Harmonic => vec![vec![0.0]],
            PotentialKind::DoubleWell1d => vec![vec![-1.0], vec![1.0]],
            PotentialKind::DoubleWell2d => vec![vec![-1.0, 0.0], vec![1.0, 0.0]],
            PotentialKind::TripleWell2d => {
                vec![vec![-1.0, 0.0], vec![1.0, 0.0], vec![0.0, 5.0 / 3.0]]
            }
            PotentialKind::Constant => Vec::new(),
        }
    }

    /// Potential energy V(x).
    pub fn potential(&self, x: &[f64]) -> f64 {
        debug_assert_eq!(x.len(), self.dim);
        match self.kind {
            PotentialKind::Harmonic => 0.5 * x.iter().map(|v| v * v).sum::<f64>(),
            PotentialKind::DoubleWell1d => {
                let s = x[0] * x[0] - 1.0;
                s * s
            }
            PotentialKind::DoubleWell2d => {
                let s = x[0] * x[0] - 1.0;
                s * s + 0.5 * x[1] * x[1]
            }
            PotentialKind::TripleWell2d => triple_well(x[0], x[1]).0,
            PotentialKind::Constant => 0.0,
        }
    }

    /// Analytic gradient of V, written into `out`.
    pub fn gradient(&self, x: &[f64], out: &mut [f64]) {
        debug_assert_eq!(x.len(), self.dim);
        debug_assert_eq!(out.len(), self.dim);
        match self.kind {
            PotentialKind::Harmonic => out.copy_from_slice(x),
            PotentialKind::DoubleWell1d => {
                out[0] = 4.0 * x[0] * (x[0] * x[0] - 1.0);
            }
            PotentialKind::DoubleWell2d => {
                out[0] = 4.0 * x[0] * (x[0] * x[0] - 1.0);
                out[1] = x[1];
            }
            PotentialKind::TripleWell2d => {
                let (_, gx, gy) = triple_well(x[0], x[1]);
                out[0] = gx;
                out[1] = gy;
            }
            PotentialKind::Constant => out.fill(0.0),
        }
    }

    /// Allocating convenience form of [`gradient`](Self::gradient).
    pub fn gradient_vec(&self, x: &[f64]) -> Vec<f64> {
        let mut g = vec![0.0; self.dim];
        self.gradient(x, &mut g);
        g
    }
}

/// V(x,y) = 3 e^{-x^2-(y-1/3)^2} - 3 e^{-x^2-(y-5/3)^2}
///        - 5 e^{-(x-1)^2-y^2} - 5 e^{-(x+1)^2-y^2}
///        + 0.2 x^4 + 0.2 (y-1/3)^4
/// Returns (V, dV/dx, dV/dy).
fn triple_well(x: f64, y: f64) -> (f64, f64, f64) {
    let g1 = 3.0 * (-x * x - (y - 1.0 / 3.0).powi(2)).exp();
    let g2 = -3.0 * (-x * x - (y - 5.0 / 3.0).powi(2)).exp();
    let g3 = -5.0 * (-(x - 1.0).powi(2) - y * y).exp();
    let g4 = -5.0 * (-(x + 1.0).powi(2) - y * y).exp();
    let v = g1 + g2 + g3 + g4 + 0.2 * x.powi(4) + 0.2 * (y - 1.0 / 3.0).powi(4);
    let dx = g1 * (-2.0 * x) + g2 * (-2.0 * x) + g3 * (-2.0 * (x - 1.0)) + g4 * (-2.0 * (x + 1.0))
        + 0.8 * x.powi(3);
    let dy = g1 * (-2.0 * (y - 1.0 / 3.0))
        + g2 * (-2.0 * (y - 5.0 / 3.0))
        + g3 * (-2.0 * y)
        + g4 * (-2.0 * y)
        + 0.8 * (y - 1.0 / 3.0).powi(3);
    (v, dx, dy)
}

/// Time discretization of the lag window. The lag `tau = dt * n_steps` is
/// always derived, never stored independently.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SimConfig {
    pub dt: f64,
    pub n_steps: usize,
    pub master_seed: u64,
}

impl SimConfig {
    pub fn new(dt: f64, n_steps: usize, master_seed: u64) -> Result<Self> {
        let cfg = SimConfig { dt, n_steps, master_seed };
        cfg.validate()?;
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.dt.is_finite() && self.dt > 0.0) {
            return Err(Error::InvalidArgument(format!("dt must be finite and > 0, got {}", self.dt)));
        }
        if self.n_steps == 0 {
            return Err(Error::InvalidArgument("n_steps must be >= 1".into()));
        }
        Ok(())
    }

    /// Lag time of the Koopman operator under study.
    pub fn tau(&self) -> f64 {
        self.dt * self.n_steps as f64
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.master_seed = seed;
        self
    }
}

/// Identity of one Monte Carlo shot; together with the master seed it fully
/// determines the noise stream.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ShotId {
    pub point: u64,
    pub replica: u64,
}

impl ShotId {
    pub fn new(point: u64, replica: u64) -> Self {
        ShotId { point, replica }
    }
}

/// A control drift u(x, t), evaluated at the pre-step state (explicit
/// scheme). Implementations must be pure: simulation reproducibility
/// depends on it.
///
/// The library's learned control ([`crate::sampling::OptimalControl`]) is
/// time-independent; `t` is provided for reference controls that know the
/// exact time-dependent drift.
pub trait Control: Send + Sync {
    fn evaluate(&self, x: &[f64], t: f64, out: &mut [f64]);
}

impl<F> Control for F
where
    F: Fn(&[f64], f64, &mut [f64]) + Send + Sync,
{
    fn evaluate(&self, x: &[f64], t: f64, out: &mut [f64]) {
        self(x, t, out)
    }
}

/// One discretized trajectory plus its accumulated log Girsanov weight.
#[derive(Debug, Clone)]
pub struct ControlledPath {
    dim: usize,
    /// Flat row-major state sequence, length (n_steps + 1) * dim.
    states: Vec<f64>,
    pub log_weight: f64,
    pub seed_used: u64,
}

impl ControlledPath {
    pub fn dim(&self) -> usize {
        self.dim
    }

    /// Number of stored states (n_steps + 1).
    pub fn len(&self) -> usize {
        self.states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.states.is_empty()
    }

    pub fn state(&self, k: usize) -> &[f64] {
        &self.states[k * self.dim..(k + 1) * self.dim]
    }

    pub fn first(&self) -> &[f64] {
        self.state(0)
    }

    pub fn last(&self) -> &[f64] {
        self.state(self.len() - 1)
    }

    /// Importance weight Z = exp(log Z).
    pub fn weight(&self) -> f64 {
        self.log_weight.exp()
    }
}

/// One Euler-Maruyama step `x' = x + drift * dt + sigma * sqrt(dt) * xi`.
///
/// Pure: inputs are not mutated. Non-finite inputs propagate as an error
/// naming the offending component.
pub fn em_step(x: &[f64], drift: &[f64], sigma: f64, dt: f64, xi: &[f64]) -> Result<Vec<f64>> {
    if x.len() != drift.len() || x.len() != xi.len() {
        return Err(Error::DimensionMismatch { expected: x.len(), got: drift.len().max(xi.len()) });
    }
    if !(dt.is_finite() && dt > 0.0) {
        return Err(Error::InvalidArgument(format!("dt must be finite and > 0, got {dt}")));
    }
    for (i, v) in x.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "x", component: i });
        }
    }
    for (i, v) in drift.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "drift", component: i });
        }
    }
    for (i, v) in xi.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "xi", component: i });
        }
    }
    let root_dt = dt.sqrt();
    Ok(x.iter()
        .zip(drift)
        .zip(xi)
        .map(|((&x, &d), &z)| x + d * dt + sigma * root_dt * z)
        .collect())
}

/// Integrate one controlled trajectory over the lag window.
///
/// The noise stream is a pure function of `(cfg.master_seed, shot.point,
/// shot.replica)`; any scheduler yields identical paths. With `control =
/// None` the log-weight is exactly zero. In the zero-noise limit (sigma = 0)
/// the path is deterministic Euler on -grad V and only the -|u|^2 dt / 2
/// term contributes to the weight.
pub fn simulate(
    system: &PotentialSystem,
    x0: &[f64],
    cfg: &SimConfig,
    control: Option<&dyn Control>,
    shot: ShotId,
) -> Result<ControlledPath> {
    cfg.validate()?;
    let dim = system.dim();
    if x0.len() != dim {
        return Err(Error::DimensionMismatch { expected: dim, got: x0.len() });
    }
    for (i, v) in x0.iter().enumerate() {
        if !v.is_finite() {
            return Err(Error::NonFinite { what: "x0", component: i });
        }
    }

    let mut rng = SplitRng::from_key(cfg.master_seed, domain::SIMULATION, shot.point, shot.replica);
    let seed_used = rng.stream_seed();
    let sigma = system.sigma();
    let dt = cfg.dt;
    let root_dt = dt.sqrt();
    let noisy = sigma > 0.0;

    let mut states = Vec::with_capacity((cfg.n_steps + 1) * dim);
    states.extend_from_slice(x0);

    let mut x = x0.to_vec();
    let mut grad = vec![0.0; dim];
    let mut u = vec![0.0; dim];
    let mut log_weight = 0.0;

    for step in 0..cfg.n_steps {
        let t = step as f64 * dt;
        system.gradient(&x, &mut grad);
        if let Some(c) = control {
            c.evaluate(&x, t, &mut u);
            let mut u_dot_xi = 0.0;
            let mut u_sq = 0.0;
            for i in 0..dim {
                let xi = if noisy { rng.standard_normal() } else { 0.0 };
                u_dot_xi += u[i] * xi;
                u_sq += u[i] * u[i];
                x[i] += (-grad[i] + sigma * u[i]) * dt + sigma * root_dt * xi;
            }
            log_weight += -u_dot_xi * root_dt - 0.5 * u_sq * dt;
        } else {
            for i in 0..dim {
                let xi = if noisy { rng.standard_normal() } else { 0.0 };
                x[i] += -grad[i] * dt + sigma * root_dt * xi;
            }
        }

        let mut norm_sq = 0.0;
        for &v in &x {
            if !v.is_finite() {
                return Err(Error::Divergence { step, point: shot.point, replica: shot.replica });
            }
            norm_sq += v * v;
        }
        if norm_sq > DIVERGENCE_RADIUS * DIVERGENCE_RADIUS {
            return Err(Error::Divergence { step, point: shot.point, replica: shot.replica });
        }
        states.extend_from_slice(&x);
    }

    Ok(ControlledPath { dim, states, log_weight, seed_used })
}
