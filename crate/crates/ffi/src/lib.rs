//! C ABI over `advdiff`.
//!
//! Every fallible function returns an [`AdvdiffStatus`]. On failure the
//! message is kept per thread and can be fetched with
//! [`advdiff_last_error_message`]. Handles are opaque and must be released
//! with their `_free` function. Matrices are row-major `double` arrays.

use std::cell::RefCell;
use std::ffi::{c_char, c_int, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use advdiff::sampler::{SampleConfig, SamplerMode};
use advdiff::{metrics, Error, NoiseSchedule, RaySchedule, Tensor, TrainedModel};

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AdvdiffStatus {
    Ok = 0,
    NullPointer = -1,
    InvalidArgument = -2,
    Config = -3,
    Numeric = -4,
    Io = -5,
    Panic = -6,
}

/// Variance schedule handle.
pub struct AdvdiffSchedule(NoiseSchedule);

/// Trained model handle.
pub struct AdvdiffModel(TrainedModel);

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: impl Into<String>) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg.into());
}

struct Failure(AdvdiffStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        let status = match e.exit_code() {
            2 => AdvdiffStatus::Config,
            3 => AdvdiffStatus::Numeric,
            _ => AdvdiffStatus::Io,
        };
        Failure(status, e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(AdvdiffStatus::NullPointer, format!("{what} is null"))
}

fn invalid(msg: impl Into<String>) -> Failure {
    Failure(AdvdiffStatus::InvalidArgument, msg.into())
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> AdvdiffStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AdvdiffStatus::Ok,
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic".into());
            set_error(format!("panic: {msg}"));
            AdvdiffStatus::Panic
        }
    }
}

unsafe fn slice<'a>(ptr: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts(ptr, len))
}

unsafe fn slice_mut<'a>(ptr: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if ptr.is_null() {
        return Err(null(what));
    }
    Ok(std::slice::from_raw_parts_mut(ptr, len))
}

unsafe fn matrix(ptr: *const f64, rows: usize, cols: usize, what: &str) -> Result<Tensor, Failure> {
    let len = rows.checked_mul(cols).ok_or_else(|| invalid(format!("{what} size overflows")))?;
    Ok(Tensor::matrix(rows, cols, slice(ptr, len, what)?.to_vec())?)
}

/// Copies the last error message of this thread into `buf` (NUL-terminated,
/// truncated to `len`). Returns the full message length plus one, so a
/// caller can size the buffer with a first call passing `len = 0`.
#[no_mangle]
pub unsafe extern "C" fn advdiff_last_error_message(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        let bytes = msg.as_bytes();
        if !buf.is_null() && len > 0 {
            let n = bytes.len().min(len - 1);
            std::ptr::copy_nonoverlapping(bytes.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        bytes.len() + 1
    })
}

/// Linear variance schedule over `steps` steps. Non-positive endpoints select
/// the defaults `0.1/T` and `20/T`.
#[no_mangle]
pub unsafe extern "C" fn advdiff_schedule_new_linear(
    steps: usize,
    sigma_min: f64,
    sigma_max: f64,
    out: *mut *mut AdvdiffSchedule,
) -> AdvdiffStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let t = steps as f64;
        let lo = if sigma_min > 0.0 { sigma_min } else { 0.1 / t };
        let hi = if sigma_max > 0.0 { sigma_max } else { 20.0 / t };
        let ns = NoiseSchedule::linear(steps, lo, hi)?;
        *out = Box::into_raw(Box::new(AdvdiffSchedule(ns)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn advdiff_schedule_free(schedule: *mut AdvdiffSchedule) {
    if !schedule.is_null() {
        drop(Box::from_raw(schedule));
    }
}

#[no_mangle]
pub unsafe extern "C" fn advdiff_schedule_steps(schedule: *const AdvdiffSchedule, out: *mut usize) -> AdvdiffStatus {
    guard(|| {
        let ns = schedule.as_ref().ok_or_else(|| null("schedule"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = ns.0.steps();
        Ok(())
    })
}

/// `ᾱ_t` for `0 ≤ t ≤ T`.
#[no_mangle]
pub unsafe extern "C" fn advdiff_schedule_alpha_bar(
    schedule: *const AdvdiffSchedule,
    t: usize,
    out: *mut f64,
) -> AdvdiffStatus {
    guard(|| {
        let ns = schedule.as_ref().ok_or_else(|| null("schedule"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        if t > ns.0.steps() {
            return Err(invalid(format!("t = {t} exceeds T = {}", ns.0.steps())));
        }
        *out = ns.0.alpha_bar(t);
        Ok(())
    })
}

/// Perturbation ray `r_β(t)` for the given `ω` and `γ`.
#[no_mangle]
pub unsafe extern "C" fn advdiff_ray(
    schedule: *const AdvdiffSchedule,
    omega: f64,
    gamma: f64,
    t: usize,
    beta: f64,
    out: *mut f64,
) -> AdvdiffStatus {
    guard(|| {
        let ns = schedule.as_ref().ok_or_else(|| null("schedule"))?;
        let out = out.as_mut().ok_or_else(|| null("out"))?;
        let rs = RaySchedule {
            omega,
            gamma,
            beta_low: beta,
            beta_high: beta,
        };
        rs.validate()?;
        *out = rs.ray(&ns.0, t, beta)?;
        Ok(())
    })
}

/// Loads a checkpoint from its JSON manifest path.
#[no_mangle]
pub unsafe extern "C" fn advdiff_model_load(path: *const c_char, out: *mut *mut AdvdiffModel) -> AdvdiffStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let path = CStr::from_ptr(path).to_str().map_err(|_| invalid("path is not UTF-8"))?;
        let model = TrainedModel::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(AdvdiffModel(model)));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn advdiff_model_free(model: *mut AdvdiffModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

#[no_mangle]
pub unsafe extern "C" fn advdiff_model_data_dim(model: *const AdvdiffModel, out: *mut usize) -> AdvdiffStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out.as_mut().ok_or_else(|| null("out"))? = m.0.params.arch.data_dim;
        Ok(())
    })
}

/// `ε_θ(x, t)` for `rows` model-space inputs; writes `rows × D` values.
#[no_mangle]
pub unsafe extern "C" fn advdiff_model_predict_eps(
    model: *const AdvdiffModel,
    x: *const f64,
    rows: usize,
    t: usize,
    out: *mut f64,
) -> AdvdiffStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = m.0.params.arch.data_dim;
        let x = matrix(x, rows, d, "x")?;
        if t == 0 || t > m.0.schedule.steps() {
            return Err(invalid(format!("t must be in 1..={}", m.0.schedule.steps())));
        }
        let eps = m.0.params.predict(&x, &[t])?;
        slice_mut(out, rows * d, "out")?.copy_from_slice(eps.data());
        Ok(())
    })
}

/// Draws `n` data-space generations with the full reverse chain; writes
/// `n × D` values. `ancestral != 0` injects noise, otherwise `z = 0`.
#[no_mangle]
pub unsafe extern "C" fn advdiff_model_sample(
    model: *const AdvdiffModel,
    n: usize,
    seed: u64,
    ancestral: c_int,
    out: *mut f64,
) -> AdvdiffStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = m.0.params.arch.data_dim;
        let out = slice_mut(out, n * d, "out")?;
        let cfg = SampleConfig {
            n,
            seed,
            mode: if ancestral != 0 {
                SamplerMode::Ancestral
            } else {
                SamplerMode::Deterministic
            },
            ..SampleConfig::default()
        };
        let (x, _) = m.0.sample(&cfg)?;
        out.copy_from_slice(x.data());
        Ok(())
    })
}

/// Distance of each row of `x` (`rows × dim`) to the affine subspace
/// `mean + span(basis)`, with `basis` holding `k` orthonormal rows.
#[no_mangle]
pub unsafe extern "C" fn advdiff_rho(
    x: *const f64,
    rows: usize,
    dim: usize,
    basis: *const f64,
    k: usize,
    mean: *const f64,
    out: *mut f64,
) -> AdvdiffStatus {
    guard(|| {
        let x = matrix(x, rows, dim, "x")?;
        let u = matrix(basis, k, dim, "basis")?;
        let mu = slice(mean, dim, "mean")?;
        let r = metrics::rho(&x, &u, mu, true)?;
        slice_mut(out, rows, "out")?.copy_from_slice(&r);
        Ok(())
    })
}

/// `|⟨normal, x⟩ − offset| / ‖normal‖` per row.
#[no_mangle]
pub unsafe extern "C" fn advdiff_plane_distance(
    x: *const f64,
    rows: usize,
    dim: usize,
    normal: *const f64,
    offset: f64,
    out: *mut f64,
) -> AdvdiffStatus {
    guard(|| {
        let x = matrix(x, rows, dim, "x")?;
        let normal = slice(normal, dim, "normal")?;
        let d = metrics::plane_distance(&x, normal, offset)?;
        slice_mut(out, rows, "out")?.copy_from_slice(&d);
        Ok(())
    })
}

/// PSNR of `x` against `reference`, both of length `len`, for signal peak
/// `peak`. Identical inputs give `+inf`.
#[no_mangle]
pub unsafe extern "C" fn advdiff_psnr(
    x: *const f64,
    reference: *const f64,
    len: usize,
    peak: f64,
    out: *mut f64,
) -> AdvdiffStatus {
    guard(|| {
        let x = matrix(x, 1, len, "x")?;
        let r = matrix(reference, 1, len, "reference")?;
        *out.as_mut().ok_or_else(|| null("out"))? = metrics::psnr(&x, &r, peak)?;
        Ok(())
    })
}
