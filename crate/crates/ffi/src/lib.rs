//! C ABI for `optistat`.
//!
//! Matrices cross the boundary as row-major `double` arrays. Every fallible
//! function returns an [`OptistatStatus`]; on failure the message is
//! available from [`optistat_last_error`] on the same thread. Handles are
//! opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use nalgebra::DMatrix;
use optistat::learning::{collect_data, olsbpi, DataMatrices, EvaluationMode};
use optistat::sim::SimConfig;
use optistat::solvers::{policy_cost, riccati_oracle, standard_pi, PiOptions};
use optistat::{CostWeights, Error, PolicyGain, SystemModel};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptistatStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DimensionMismatch = 3,
    NotPositiveDefinite = 4,
    NotAdmissible = 5,
    Singular = 6,
    NoConvergence = 7,
    NumericalFailure = 8,
    Io = 9,
    Panic = 10,
}

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OptistatEvaluationMode {
    Ode = 0,
    Equilibrium = 1,
}

/// Opaque system model `(A, B, D, F, C)`.
pub struct OptistatModel(SystemModel);

/// Opaque cost weights `(Q, R)`.
pub struct OptistatWeights(CostWeights);

/// Opaque data matrices `(ψ, ζ, ξ)` collected from one rollout.
pub struct OptistatData(DataMatrices);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("no interior nul");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(err: &Error) -> OptistatStatus {
    match err.root() {
        Error::DimensionMismatch { .. } | Error::BadLength { .. } => OptistatStatus::DimensionMismatch,
        Error::AsymmetricInput { .. } | Error::InvalidArgument(_) | Error::Format(_) => OptistatStatus::InvalidArgument,
        Error::NotPositiveDefinite { .. } => OptistatStatus::NotPositiveDefinite,
        Error::NotAdmissible { .. } | Error::NotHurwitz { .. } => OptistatStatus::NotAdmissible,
        Error::SingularGuu { .. } | Error::SingularInner { .. } | Error::SingularOperator { .. } => {
            OptistatStatus::Singular
        }
        Error::NoConvergence { .. } | Error::OracleDiverged { .. } => OptistatStatus::NoConvergence,
        Error::Io(_) => OptistatStatus::Io,
        _ => OptistatStatus::NumericalFailure,
    }
}

struct Fail(OptistatStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> OptistatStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => OptistatStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            OptistatStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(OptistatStatus::NullPointer, format!("{what} is null"))
}

unsafe fn matrix(ptr: *const f64, rows: usize, cols: usize, what: &str) -> Result<DMatrix<f64>, Fail> {
    if rows * cols == 0 {
        return Ok(DMatrix::zeros(rows, cols));
    }
    if ptr.is_null() {
        return Err(null(what));
    }
    let s = std::slice::from_raw_parts(ptr, rows * cols);
    Ok(DMatrix::from_row_slice(rows, cols, s))
}

unsafe fn write_matrix(m: &DMatrix<f64>, out: *mut f64) {
    let (r, c) = m.shape();
    let dst = std::slice::from_raw_parts_mut(out, r * c);
    for i in 0..r {
        for j in 0..c {
            dst[i * c + j] = m[(i, j)];
        }
    }
}

unsafe fn handle<'a, T>(ptr: *const T, what: &str) -> Result<&'a T, Fail> {
    ptr.as_ref().ok_or_else(|| null(what))
}

unsafe fn path<'a>(ptr: *const c_char) -> Result<&'a Path, Fail> {
    if ptr.is_null() {
        return Err(null("path"));
    }
    CStr::from_ptr(ptr)
        .to_str()
        .map(Path::new)
        .map_err(|_| Fail(OptistatStatus::InvalidArgument, "path is not valid UTF-8".into()))
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn optistat_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Copies the last error message of this thread into `buf` (truncated and
/// nul-terminated) and returns its full length in bytes, or 0 if there is none.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn optistat_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let e = e.borrow();
        let Some(msg) = e.as_ref() else { return 0 };
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let k = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr().cast(), buf, k);
            *buf.add(k) = 0;
        }
        bytes.len()
    })
}

/// Builds a model. `d` holds `q1` consecutive n×n blocks, `f` holds `q2`
/// consecutive n×m blocks, and `c` is n×p.
///
/// # Safety
/// Every array must hold the number of doubles its dimensions imply and
/// `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn optistat_model_new(
    n: usize,
    m: usize,
    a: *const f64,
    b: *const f64,
    q1: usize,
    d: *const f64,
    q2: usize,
    f: *const f64,
    p: usize,
    c: *const f64,
    out: *mut *mut OptistatModel,
) -> OptistatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = matrix(a, n, n, "A")?;
        let b = matrix(b, n, m, "B")?;
        let d = (0..q1)
            .map(|j| matrix(d.wrapping_add(j * n * n), n, n, "D"))
            .collect::<Result<Vec<_>, _>>()?;
        let f = (0..q2)
            .map(|k| matrix(f.wrapping_add(k * n * m), n, m, "F"))
            .collect::<Result<Vec<_>, _>>()?;
        let c = matrix(c, n, p, "C")?;
        let model = SystemModel::new(a, b, d, f, c)?;
        *out = Box::into_raw(Box::new(OptistatModel(model)));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a handle from [`optistat_model_new`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn optistat_model_free(model: *mut OptistatModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `q` is n×n, `r` is m×m, `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn optistat_weights_new(
    n: usize,
    m: usize,
    q: *const f64,
    r: *const f64,
    out: *mut *mut OptistatWeights,
) -> OptistatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let w = CostWeights::new(matrix(q, n, n, "Q")?, matrix(r, m, m, "R")?)?;
        *out = Box::into_raw(Box::new(OptistatWeights(w)));
        Ok(())
    })
}

/// # Safety
/// `weights` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn optistat_weights_free(weights: *mut OptistatWeights) {
    if !weights.is_null() {
        drop(Box::from_raw(weights));
    }
}

unsafe fn gain(model: &SystemModel, k: *const f64) -> Result<PolicyGain, Fail> {
    Ok(PolicyGain::new(matrix(k, model.m(), model.n(), "K")?))
}

/// Mean-square admissibility of the m×n gain `k`.
///
/// # Safety
/// Pointers must be valid; `k` holds m·n doubles.
#[no_mangle]
pub unsafe extern "C" fn optistat_is_admissible(
    model: *const OptistatModel,
    k: *const f64,
    out_admissible: *mut bool,
    out_abscissa: *mut f64,
) -> OptistatStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        if out_admissible.is_null() {
            return Err(null("out_admissible"));
        }
        let adm = model.is_admissible(&gain(model, k)?)?;
        *out_admissible = adm.admissible;
        if !out_abscissa.is_null() {
            *out_abscissa = adm.abscissa;
        }
        Ok(())
    })
}

/// Value matrix (n×n, written to `out_p`) and stationary cost of gain `k`.
///
/// # Safety
/// Pointers must be valid; `out_p` holds n·n doubles.
#[no_mangle]
pub unsafe extern "C" fn optistat_policy_cost(
    model: *const OptistatModel,
    weights: *const OptistatWeights,
    k: *const f64,
    out_p: *mut f64,
    out_cost: *mut f64,
) -> OptistatStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let w = &handle(weights, "weights")?.0;
        let pc = policy_cost(model, w, &gain(model, k)?)?;
        if !out_p.is_null() {
            write_matrix(pc.value.matrix(), out_p);
        }
        if !out_cost.is_null() {
            *out_cost = pc.cost;
        }
        Ok(())
    })
}

/// Model-based policy iteration from the admissible gain `k1`. Writes the
/// final value matrix (n×n) and its greedy gain (m×n).
///
/// # Safety
/// Pointers must be valid; output arrays sized as stated.
#[no_mangle]
pub unsafe extern "C" fn optistat_standard_pi(
    model: *const OptistatModel,
    weights: *const OptistatWeights,
    k1: *const f64,
    max_iter: usize,
    tol: f64,
    out_p: *mut f64,
    out_k: *mut f64,
    out_iterations: *mut usize,
) -> OptistatStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let w = &handle(weights, "weights")?.0;
        let opts = PiOptions {
            max_iter,
            tol,
            ..PiOptions::default()
        };
        let trace = standard_pi(model, w, &gain(model, k1)?, &opts)?;
        let last = trace.last().expect("at least one iteration");
        if !out_p.is_null() {
            write_matrix(last.value.matrix(), out_p);
        }
        if !out_k.is_null() {
            let k = model.greedy_gain(&last.value, w)?;
            write_matrix(k.matrix(), out_k);
        }
        if !out_iterations.is_null() {
            *out_iterations = trace.iterations.len();
        }
        Ok(())
    })
}

/// Stabilizing solution of the generalized Riccati equation (n×n).
///
/// # Safety
/// Pointers must be valid; `out_p` holds n·n doubles.
#[no_mangle]
pub unsafe extern "C" fn optistat_riccati_oracle(
    model: *const OptistatModel,
    weights: *const OptistatWeights,
    tol: f64,
    out_p: *mut f64,
) -> OptistatStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let w = &handle(weights, "weights")?.0;
        if out_p.is_null() {
            return Err(null("out_p"));
        }
        let p = riccati_oracle(model, w, tol)?;
        write_matrix(p.matrix(), out_p);
        Ok(())
    })
}

/// Simulates one exploratory rollout under `k1` and accumulates its data
/// matrices.
///
/// # Safety
/// Pointers must be valid; `k1` holds m·n doubles.
#[no_mangle]
pub unsafe extern "C" fn optistat_collect_data(
    model: *const OptistatModel,
    weights: *const OptistatWeights,
    k1: *const f64,
    t_f: f64,
    dt: f64,
    sigma_u: f64,
    seed: u64,
    burn_in: f64,
    out: *mut *mut OptistatData,
) -> OptistatStatus {
    guard(|| {
        let model = &handle(model, "model")?.0;
        let w = &handle(weights, "weights")?.0;
        if out.is_null() {
            return Err(null("out"));
        }
        let cfg = SimConfig::new(t_f, sigma_u, seed).with_dt(dt);
        let data = collect_data(model, &gain(model, k1)?, &cfg, w, burn_in)?;
        *out = Box::into_raw(Box::new(OptistatData(data)));
        Ok(())
    })
}

/// # Safety
/// `data` and `path` must be valid.
#[no_mangle]
pub unsafe extern "C" fn optistat_data_save(data: *const OptistatData, file: *const c_char) -> OptistatStatus {
    guard(|| {
        let data = &handle(data, "data")?.0;
        data.save(path(file)?)?;
        Ok(())
    })
}

/// # Safety
/// `path` and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn optistat_data_load(file: *const c_char, out: *mut *mut OptistatData) -> OptistatStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = DataMatrices::load(path(file)?)?;
        *out = Box::into_raw(Box::new(OptistatData(data)));
        Ok(())
    })
}

/// Condition number of ψ, or NaN for a null handle.
///
/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn optistat_data_cond_psi(data: *const OptistatData) -> f64 {
    data.as_ref().map_or(f64::NAN, |d| d.0.cond_psi())
}

/// # Safety
/// `data` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn optistat_data_free(data: *mut OptistatData) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Runs OLSbPI from `k1` for `iterations` gains and writes them to
/// `out_gains` as `iterations` consecutive m×n blocks.
///
/// # Safety
/// Pointers must be valid; `out_gains` holds iterations·m·n doubles.
#[no_mangle]
pub unsafe extern "C" fn optistat_olsbpi(
    data: *const OptistatData,
    k1: *const f64,
    iterations: usize,
    s_f: f64,
    mode: OptistatEvaluationMode,
    out_gains: *mut f64,
) -> OptistatStatus {
    guard(|| {
        let data = &handle(data, "data")?.0;
        if out_gains.is_null() {
            return Err(null("out_gains"));
        }
        let (n, m) = (data.n(), data.m());
        let k1 = PolicyGain::new(matrix(k1, m, n, "K1")?);
        let mode = match mode {
            OptistatEvaluationMode::Ode => EvaluationMode::Ode,
            OptistatEvaluationMode::Equilibrium => EvaluationMode::Equilibrium,
        };
        let res = olsbpi(data, &k1, iterations, s_f, mode)?;
        for (i, k) in res.gains.iter().enumerate() {
            write_matrix(k.matrix(), out_gains.add(i * m * n));
        }
        Ok(())
    })
}
