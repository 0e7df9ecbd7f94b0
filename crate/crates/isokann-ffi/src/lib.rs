//! C interface to the isokann library.
//!
//! Conventions:
//! - Every fallible call returns an [`IsoStatus`]; results travel through
//!   out-pointers, which must all be non-null.
//! - On a non-OK status, [`iso_last_error`] returns a message for the
//!   current thread, valid until that thread's next call into this library.
//! - Handles ([`IsoSystem`], [`IsoModel`]) are opaque; release them with
//!   the matching `_free` function exactly once. A null handle is accepted
//!   by `_free` and rejected everywhere else.
//! - Trained-model files are the same checkpoint format the CLI writes, so
//!   models move freely between the binary and this interface.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe, UnwindSafe};
use std::path::Path;

use isokann::config::{FileConfig, Overrides};
use isokann::koopman::{mc_koopman, rate_from_params, ShiftScaleParams};
use isokann::learn::run_isokann;
use isokann::model::{checkpoint_load, checkpoint_save, ChiModel, OptimizerState};
use isokann::sde::{catalog_potential, PotentialSystem, SimConfig};
use isokann::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum IsoStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArg = 1,
    /// A string argument was not valid UTF-8.
    InvalidUtf8 = 2,
    /// Rejected input: unknown potential name, bad configuration, empty batch.
    InvalidArgument = 3,
    /// An array length or model dimension does not match the system.
    Dimension = 4,
    /// File could not be read or written.
    Io = 5,
    /// Checkpoint bytes are malformed or of an unsupported version.
    Checkpoint = 6,
    /// The numerics failed: non-finite values, divergence, degenerate spread.
    Numerics = 7,
    /// The iteration budget ran out before the convergence threshold.
    NoConvergence = 8,
    /// Internal invariant violation (a bug worth reporting).
    Internal = 9,
}

/// Metastable diffusion from the built-in catalog.
pub struct IsoSystem(PotentialSystem);

/// A chi approximator together with its optimizer moments.
pub struct IsoModel {
    model: ChiModel,
    opt: OptimizerState,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let msg = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = Some(msg));
}

fn clear_error() {
    LAST_ERROR.with(|slot| *slot.borrow_mut() = None);
}

fn status_of(err: &Error) -> IsoStatus {
    match err {
        Error::UnknownPotential { .. }
        | Error::InvalidArgument { .. }
        | Error::EmptyBatch
        | Error::Config(_) => IsoStatus::InvalidArgument,
        Error::DimensionMismatch { .. } => IsoStatus::Dimension,
        Error::Io { .. } => IsoStatus::Io,
        Error::Checkpoint(_) => IsoStatus::Checkpoint,
        Error::NoConvergence { .. } => IsoStatus::NoConvergence,
        Error::NonFinite { .. }
        | Error::Divergence { .. }
        | Error::Degenerate { .. }
        | Error::RankDeficient
        | Error::OutOfRegime { .. }
        | Error::LinearSolve
        | Error::ChiCollapsed { .. }
        | Error::TooManyDivergent { .. } => IsoStatus::Numerics,
    }
}

fn fail(err: Error) -> IsoStatus {
    let status = status_of(&err);
    set_error(err.to_string());
    status
}

fn null_arg(name: &str) -> IsoStatus {
    set_error(format!("required argument `{name}` is null"));
    IsoStatus::NullArg
}

/// Run `body` with panics fenced off from the C caller.
fn guarded<F>(body: F) -> IsoStatus
where
    F: FnOnce() -> IsoStatus + UnwindSafe,
{
    clear_error();
    match catch_unwind(body) {
        Ok(status) => status,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            IsoStatus::Internal
        }
    }
}

unsafe fn path_arg<'a>(ptr: *const c_char, name: &str) -> Result<&'a Path, IsoStatus> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    match CStr::from_ptr(ptr).to_str() {
        Ok(s) => Ok(Path::new(s)),
        Err(_) => {
            set_error(format!("argument `{name}` is not valid UTF-8"));
            Err(IsoStatus::InvalidUtf8)
        }
    }
}

unsafe fn write_out<T>(ptr: *mut T, name: &str, value: T) -> Result<(), IsoStatus> {
    if ptr.is_null() {
        return Err(null_arg(name));
    }
    ptr.write(value);
    Ok(())
}

fn check_dim(expected: usize, got: usize) -> Result<(), IsoStatus> {
    if expected == got {
        Ok(())
    } else {
        Err(fail(Error::DimensionMismatch { expected, got }))
    }
}

/// Library version as a static null-terminated string.
#[no_mangle]
pub extern "C" fn iso_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the current thread's most recent failure, or null if the
/// last call succeeded. The pointer is invalidated by the thread's next
/// call into this library.
#[no_mangle]
pub extern "C" fn iso_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| match &*slot.borrow() {
        Some(msg) => msg.as_ptr(),
        None => std::ptr::null(),
    })
}

/// Look up a potential by catalog name (`harmonic`, `doublewell1d`,
/// `doublewell2d`, `triplewell2d`, `constant`) and return a system handle.
#[no_mangle]
pub unsafe extern "C" fn iso_system_create(
    name: *const c_char,
    out_system: *mut *mut IsoSystem,
) -> IsoStatus {
    guarded(AssertUnwindSafe(|| {
        if name.is_null() {
            return null_arg("name");
        }
        if out_system.is_null() {
            return null_arg("out_system");
        }
        let name = match CStr::from_ptr(name).to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("argument `name` is not valid UTF-8".into());
                return IsoStatus::InvalidUtf8;
            }
        };
        let system = match catalog_potential(name) {
            Ok(s) => s,
            Err(e) => return fail(e),
        };
        out_system.write(Box::into_raw(Box::new(IsoSystem(system))));
        IsoStatus::Ok
    }))
}

/// State dimension of the system.
#[no_mangle]
pub unsafe extern "C" fn iso_system_dim(
    system: *const IsoSystem,
    out_dim: *mut usize,
) -> IsoStatus {
    guarded(AssertUnwindSafe(|| {
        let Some(system) = system.as_ref() else { return null_arg("system") };
        match write_out(out_dim, "out_dim", system.0.dim()) {
            Ok(()) => IsoStatus::Ok,
            Err(status) => status,
        }
    }))
}

/// Noise amplitude of the system.
#[no_mangle]
pub unsafe extern "C" fn iso_system_sigma(
    system: *const IsoSystem,
    out_sigma: *mut f64,
) -> IsoStatus {
    guarded(AssertUnwindSafe(|| {
        let Some(system) = system.as_ref() else { return null_arg("system") };
        match write_out(out_sigma, "out_sigma", system.0.sigma()) {
            Ok(()) => IsoStatus::Ok,
            Err(status) => status,
        }
    }))
}

/// Release a system handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn iso_system_free(system: *mut IsoSystem) {
    if !system.is_null() {
        drop(Box::from_raw(system));
    }
}

/// Load a model checkpoint written by this library or the CLI.
#[no_mangle]
pub unsafe extern "C" fn iso_model_load(
    path: *const c_char,
    out_model: *mut *mut IsoModel,
) -> IsoStatus {
    guarded(AssertUnwindSafe(|| {
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        if out_model.is_null() {
            return null_arg("out_model");
        }
        let bytes = match std::fs::read(path) {
            Ok(b) => b,
            Err(e) => return fail(Error::io(path, e)),
        };
        let (model, opt) = match checkpoint_load(&bytes) {
            Ok(pair) => pair,
            Err(e) => return fail(e),
        };
        out_model.write(Box::into_raw(Box::new(IsoModel { model, opt })));
        IsoStatus::Ok
    }))
}

/// Write a model checkpoint to `path`.
#[no_mangle]
pub unsafe extern "C" fn iso_model_save(
    model: *const IsoModel,
    path: *const c_char,
) -> IsoStatus {
    guarded(AssertUnwindSafe(|| {
        let Some(handle) = model.as_ref() else { return null_arg("model") };
        let path = match path_arg(path, "path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        let bytes = checkpoint_save(&handle.model, &handle.opt);
        match std::fs::write(path, bytes) {
            Ok(()) => IsoStatus::Ok,
            Err(e) => fail(Error::io(path, e)),
        }
    }))
}

/// Input dimension the model was built for.
#[no_mangle]
pub unsafe extern "C" fn iso_model_dim(model: *const IsoModel, out_dim: *mut usize) -> IsoStatus {
    guarded(AssertUnwindSafe(|| {
        let Some(handle) = model.as_ref() else { return null_arg("model") };
        match write_out(out_dim, "out_dim", handle.model.dim()) {
            Ok(()) => IsoStatus::Ok,
            Err(status) => status,
        }
    }))
}

/// Evaluate chi at one point `x` of length `dim`.
#[no_mangle]
pub unsafe extern "C" fn iso_model_eval(
    model: *const IsoModel,
    x: *const f64,
    dim: usize,
    out_chi: *mut f64,
) -> IsoStatus {
    iso_model_eval_batch(model, x, 1, dim, out_chi)
}

/// Evaluate chi at `n_points` points stored row-major in `xs`
/// (`n_points * dim` doubles); writes `n_points` values to `out_chi`.
#[no_mangle]
pub unsafe extern "C" fn iso_model_eval_batch(
    model: *const IsoModel,
    xs: *const f64,
    n_points: usize,
    dim: usize,
    out_chi: *mut f64,
) -> IsoStatus {
    guarded(AssertUnwindSafe(|| {
        let Some(handle) = model.as_ref() else { return null_arg("model") };
        if xs.is_null() {
            return null_arg("xs");
        }
        if out_chi.is_null() {
            return null_arg("out_chi");
        }
        if n_points == 0 {
            return fail(Error::EmptyBatch);
        }
        if let Err(status) = check_dim(handle.model.dim(), dim) {
            return status;
        }
        let xs = std::slice::from_raw_parts(xs, n_points * dim);
        let out = std::slice::from_raw_parts_mut(out_chi, n_points);
        for (point, slot) in xs.chunks_exact(dim).zip(out.iter_mut()) {
            match handle.model.forward(point) {
                Ok(v) => *slot = v,
                Err(e) => return fail(e),
            }
        }
        IsoStatus::Ok
    }))
}

/// Gradient of chi at `x`; writes `dim` doubles to `out_grad`.
#[no_mangle]
pub unsafe extern "C" fn iso_model_grad(
    model: *const IsoModel,
    x: *const f64,
    dim: usize,
    out_grad: *mut f64,
) -> IsoStatus {
    guarded(AssertUnwindSafe(|| {
        let Some(handle) = model.as_ref() else { return null_arg("model") };
        if x.is_null() {
            return null_arg("x");
        }
        if out_grad.is_null() {
            return null_arg("out_grad");
        }
        if let Err(status) = check_dim(handle.model.dim(), dim) {
            return status;
        }
        let x = std::slice::from_raw_parts(x, dim);
        match handle.model.grad_input(x) {
            Ok(grad) => {
                std::ptr::copy_nonoverlapping(grad.as_ptr(), out_grad, dim);
                IsoStatus::Ok
            }
            Err(e) => fail(e),
        }
    }))
}

/// Release a model handle. Null is a no-op.
#[no_mangle]
pub unsafe extern "C" fn iso_model_free(model: *mut IsoModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Run the full learning loop from a TOML configuration file (the same
/// format the CLI reads; missing keys take the library defaults). Returns
/// the trained model, whether the validation change crossed the
/// convergence threshold, and the final affine-fit constants for
/// [`iso_rate_from_params`]. Convergence failure is reported through
/// `out_converged`, not as an error status.
#[no_mangle]
pub unsafe extern "C" fn iso_train(
    config_path: *const c_char,
    out_model: *mut *mut IsoModel,
    out_converged: *mut bool,
    out_a: *mut f64,
    out_b: *mut f64,
) -> IsoStatus {
    guarded(AssertUnwindSafe(|| {
        let path = match path_arg(config_path, "config_path") {
            Ok(p) => p,
            Err(status) => return status,
        };
        if out_model.is_null() {
            return null_arg("out_model");
        }
        if out_converged.is_null() {
            return null_arg("out_converged");
        }
        if out_a.is_null() {
            return null_arg("out_a");
        }
        if out_b.is_null() {
            return null_arg("out_b");
        }
        let cfg = match FileConfig::load(path).and_then(|f| f.resolve(&Overrides::default())) {
            Ok(c) => c,
            Err(e) => return fail(e),
        };
        let model = match ChiModel::glorot(&cfg.model_dims, cfg.sim.master_seed) {
            Ok(m) => m,
            Err(e) => return fail(e),
        };
        let (model, report) = match run_isokann(&cfg.system, model, &cfg.loop_cfg, &cfg.sim) {
            Ok(pair) => pair,
            Err(e) => return fail(e),
        };
        let Some(params) = report.final_params(cfg.sim.tau()) else {
            set_error("training produced no iterations".into());
            return IsoStatus::Internal;
        };
        out_converged.write(report.converged);
        out_a.write(params.a);
        out_b.write(params.b);
        let opt = OptimizerState::new(&model, cfg.loop_cfg.learning_rate);
        out_model.write(Box::into_raw(Box::new(IsoModel { model, opt })));
        IsoStatus::Ok
    }))
}

/// Plain Monte Carlo estimate of `K^tau chi` at one start point: `m`
/// uncontrolled trajectories of `n_steps` Euler-Maruyama steps of size
/// `dt`, all randomness derived from `seed`.
#[no_mangle]
pub unsafe extern "C" fn iso_koopman_mean(
    system: *const IsoSystem,
    model: *const IsoModel,
    x: *const f64,
    dim: usize,
    m: usize,
    dt: f64,
    n_steps: usize,
    seed: u64,
    out_mean: *mut f64,
    out_std_error: *mut f64,
) -> IsoStatus {
    guarded(AssertUnwindSafe(|| {
        let Some(system) = system.as_ref() else { return null_arg("system") };
        let Some(handle) = model.as_ref() else { return null_arg("model") };
        if x.is_null() {
            return null_arg("x");
        }
        if out_mean.is_null() {
            return null_arg("out_mean");
        }
        if out_std_error.is_null() {
            return null_arg("out_std_error");
        }
        if let Err(status) = check_dim(system.0.dim(), dim) {
            return status;
        }
        let cfg = match SimConfig::new(dt, n_steps, seed) {
            Ok(c) => c,
            Err(e) => return fail(e),
        };
        let x = std::slice::from_raw_parts(x, dim);
        match mc_koopman(&system.0, &handle.model, x, m, &cfg, None, 0) {
            Ok(est) => {
                out_mean.write(est.mean);
                out_std_error.write(est.std_error());
                IsoStatus::Ok
            }
            Err(e) => fail(e),
        }
    }))
}

/// Spectral quantities from affine-fit constants: `lambda = a`,
/// `kappa = -ln(a)/tau`, `chi_infinity = b/(1-a)`. Requires `0 < a < 1`.
#[no_mangle]
pub unsafe extern "C" fn iso_rate_from_params(
    a: f64,
    b: f64,
    tau: f64,
    out_lambda: *mut f64,
    out_kappa: *mut f64,
    out_chi_infinity: *mut f64,
) -> IsoStatus {
    guarded(AssertUnwindSafe(|| {
        if out_lambda.is_null() {
            return null_arg("out_lambda");
        }
        if out_kappa.is_null() {
            return null_arg("out_kappa");
        }
        if out_chi_infinity.is_null() {
            return null_arg("out_chi_infinity");
        }
        match rate_from_params(&ShiftScaleParams { a, b, tau }) {
            Ok(rate) => {
                out_lambda.write(rate.lambda);
                out_kappa.write(rate.kappa);
                out_chi_infinity.write(rate.chi_infinity);
                IsoStatus::Ok
            }
            Err(e) => fail(e),
        }
    }))
}
