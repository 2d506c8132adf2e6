//! C interface to `unikd`.
//!
//! Every function returns a [`UnikdStatus`]. On failure the message is
//! available from [`unikd_last_error`] on the same thread until the next
//! failing call. Handles returned through out-pointers are owned by the
//! caller and released with the matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use unikd::config::{ExperimentConfig, Mode};
use unikd::distributions::{kl_diag, kl_full, DiagGaussian, FullGaussian};
use unikd::kd_losses::{logits_kd_loss_with_grad, softmax_tau, LogitsBundle};
use unikd::metrics::{kl_selfcheck, KlCheckOptions};
use unikd::trainer::{run_experiment, TrainReport};
use unikd::{Tensor, UniKdError};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum UnikdStatus {
    Ok = 0,
    NullPointer = 1,
    Contract = 2,
    NotPositiveDefinite = 3,
    Config = 4,
    Io = 5,
    Checkpoint = 6,
    NonFiniteLoss = 7,
    MissingTeacher = 8,
    Format = 9,
    InvalidUtf8 = 10,
    Panic = 11,
}

/// Parsed experiment configuration.
pub struct UnikdConfig(ExperimentConfig);

/// Result of a training run.
pub struct UnikdReport(TrainReport);

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &UniKdError) -> UnikdStatus {
    match e {
        UniKdError::Contract(_) => UnikdStatus::Contract,
        UniKdError::NotPositiveDefinite { .. } => UnikdStatus::NotPositiveDefinite,
        UniKdError::Format(_) => UnikdStatus::Format,
        UniKdError::Config(_) => UnikdStatus::Config,
        UniKdError::Checkpoint(_) => UnikdStatus::Checkpoint,
        UniKdError::NonFiniteLoss { .. } => UnikdStatus::NonFiniteLoss,
        UniKdError::MissingTeacher(_) => UnikdStatus::MissingTeacher,
        UniKdError::Io(_) | UniKdError::Json(_) => UnikdStatus::Io,
    }
}

enum Fail {
    Null(&'static str),
    Utf8,
    Lib(UniKdError),
}

impl From<UniKdError> for Fail {
    fn from(e: UniKdError) -> Self {
        Fail::Lib(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> UnikdStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => UnikdStatus::Ok,
        Ok(Err(Fail::Null(what))) => {
            set_error(&format!("null pointer: {what}"));
            UnikdStatus::NullPointer
        }
        Ok(Err(Fail::Utf8)) => {
            set_error("string argument is not valid UTF-8");
            UnikdStatus::InvalidUtf8
        }
        Ok(Err(Fail::Lib(e))) => {
            set_error(&e.to_string());
            status_of(&e)
        }
        Err(_) => {
            set_error("internal panic");
            UnikdStatus::Panic
        }
    }
}

/// # Safety
/// `p` must be null or point to `len` readable values.
unsafe fn slice<'a>(p: *const f64, len: usize, what: &'static str) -> Result<&'a [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

/// # Safety
/// `p` must be null or point to `len` writable values.
unsafe fn slice_mut<'a>(p: *mut f64, len: usize, what: &'static str) -> Result<&'a mut [f64], Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    Ok(std::slice::from_raw_parts_mut(p, len))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn string<'a>(p: *const c_char, what: &'static str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(Fail::Null(what));
    }
    CStr::from_ptr(p).to_str().map_err(|_| Fail::Utf8)
}

unsafe fn write<T>(out: *mut T, v: T, what: &'static str) -> Result<(), Fail> {
    if out.is_null() {
        return Err(Fail::Null(what));
    }
    out.write(v);
    Ok(())
}

/// Message of the last failure on this thread. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn unikd_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// `KL(q ‖ p)` for diagonal Gaussians of dimension `k`.
///
/// # Safety
/// The four arrays must hold `k` values; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unikd_kl_diag(
    mean_q: *const f64,
    var_q: *const f64,
    mean_p: *const f64,
    var_p: *const f64,
    k: usize,
    out: *mut f64,
) -> UnikdStatus {
    guard(|| {
        let q = DiagGaussian::new(slice(mean_q, k, "mean_q")?.to_vec(), slice(var_q, k, "var_q")?.to_vec())?;
        let p = DiagGaussian::new(slice(mean_p, k, "mean_p")?.to_vec(), slice(var_p, k, "var_p")?.to_vec())?;
        write(out, kl_diag(&q, &p)?, "out")
    })
}

/// `KL(q ‖ p)` for full-covariance Gaussians; covariances are row-major `k×k`.
///
/// # Safety
/// Means must hold `k` values and covariances `k·k`; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unikd_kl_full(
    mean_q: *const f64,
    cov_q: *const f64,
    mean_p: *const f64,
    cov_p: *const f64,
    k: usize,
    out: *mut f64,
) -> UnikdStatus {
    guard(|| {
        let kk = k.checked_mul(k).ok_or(Fail::Lib(UniKdError::Contract("k too large".into())))?;
        let q = FullGaussian::new(slice(mean_q, k, "mean_q")?.to_vec(), slice(cov_q, kk, "cov_q")?.to_vec())?;
        let p = FullGaussian::new(slice(mean_p, k, "mean_p")?.to_vec(), slice(cov_p, kk, "cov_p")?.to_vec())?;
        write(out, kl_full(&q, &p)?, "out")
    })
}

/// `softmax(z / tau)` into `out`.
///
/// # Safety
/// `z` and `out` must hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn unikd_softmax_tau(z: *const f64, n: usize, tau: f64, out: *mut f64) -> UnikdStatus {
    guard(|| {
        let p = softmax_tau(slice(z, n, "z")?, tau)?;
        slice_mut(out, n, "out")?.copy_from_slice(&p);
        Ok(())
    })
}

/// Batch-mean `KL(softmax(t/τ) ‖ softmax(s/τ))` over `rows × cols` logits.
/// The gradient with respect to the student logits is written to
/// `grad_out` unless it is null.
///
/// # Safety
/// `teacher`, `student` and a non-null `grad_out` must hold `rows·cols` values.
#[no_mangle]
pub unsafe extern "C" fn unikd_logits_kd_loss(
    teacher: *const f64,
    student: *const f64,
    rows: usize,
    cols: usize,
    tau: f64,
    loss_out: *mut f64,
    grad_out: *mut f64,
) -> UnikdStatus {
    guard(|| {
        let n = rows.checked_mul(cols).ok_or(Fail::Lib(UniKdError::Contract("shape too large".into())))?;
        let t = Tensor::from_vec(&[rows, cols], slice(teacher, n, "teacher")?.to_vec())?;
        let s = Tensor::from_vec(&[rows, cols], slice(student, n, "student")?.to_vec())?;
        let (loss, grad) = logits_kd_loss_with_grad(&LogitsBundle::new(t, s, tau)?);
        if !grad_out.is_null() {
            slice_mut(grad_out, n, "grad_out")?.copy_from_slice(grad.data());
        }
        write(loss_out, loss, "loss_out")
    })
}

/// Runs the KL oracle self-check. `passed_out` receives 1 or 0.
///
/// # Safety
/// Out-pointers must be writable; `max_ratio_out` may be null.
#[no_mangle]
pub unsafe extern "C" fn unikd_kl_selfcheck(
    n_cases: usize,
    seed: u64,
    n_samples: usize,
    passed_out: *mut i32,
    max_ratio_out: *mut f64,
) -> UnikdStatus {
    guard(|| {
        let mut opts = KlCheckOptions::new(n_cases, seed);
        opts.n_samples = n_samples;
        let summary = kl_selfcheck(&opts)?;
        if !max_ratio_out.is_null() {
            max_ratio_out.write(summary.max_oracle_ratio);
        }
        write(passed_out, i32::from(summary.passed), "passed_out")
    })
}

/// Loads and validates a TOML experiment config.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unikd_config_load(path: *const c_char, out: *mut *mut UnikdConfig) -> UnikdStatus {
    guard(|| {
        let cfg = ExperimentConfig::load(&PathBuf::from(string(path, "path")?))?;
        write(out, Box::into_raw(Box::new(UnikdConfig(cfg))), "out")
    })
}

/// Parses and validates TOML text.
///
/// # Safety
/// `text` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unikd_config_parse(text: *const c_char, out: *mut *mut UnikdConfig) -> UnikdStatus {
    guard(|| {
        let cfg = ExperimentConfig::from_toml_str(string(text, "text")?)?;
        write(out, Box::into_raw(Box::new(UnikdConfig(cfg))), "out")
    })
}

unsafe fn config_mut<'a>(cfg: *mut UnikdConfig) -> Result<&'a mut ExperimentConfig, Fail> {
    cfg.as_mut().map(|c| &mut c.0).ok_or(Fail::Null("config"))
}

/// # Safety
/// `cfg` must come from `unikd_config_load` or `unikd_config_parse`.
#[no_mangle]
pub unsafe extern "C" fn unikd_config_set_seed(cfg: *mut UnikdConfig, seed: u64) -> UnikdStatus {
    guard(|| {
        config_mut(cfg)?.seed = seed;
        Ok(())
    })
}

/// Sets the mode by name (`unikd`, `kd_only`, `mse_only`, `hybrid_kd_mse`, `ce_only`).
///
/// # Safety
/// `cfg` must be a live handle and `mode` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn unikd_config_set_mode(cfg: *mut UnikdConfig, mode: *const c_char) -> UnikdStatus {
    guard(|| {
        let m: Mode = string(mode, "mode")?.parse()?;
        config_mut(cfg)?.mode = m;
        Ok(())
    })
}

/// # Safety
/// `cfg` must be a live handle and `dir` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn unikd_config_set_out_dir(cfg: *mut UnikdConfig, dir: *const c_char) -> UnikdStatus {
    guard(|| {
        let d = PathBuf::from(string(dir, "dir")?);
        config_mut(cfg)?.out_dir = Some(d);
        Ok(())
    })
}

/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn unikd_config_free(cfg: *mut UnikdConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Trains with `cfg` and returns a report handle.
///
/// # Safety
/// `cfg` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unikd_run_experiment(cfg: *const UnikdConfig, out: *mut *mut UnikdReport) -> UnikdStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or(Fail::Null("config"))?;
        let report = run_experiment(&cfg.0)?;
        write(out, Box::into_raw(Box::new(UnikdReport(report))), "out")
    })
}

unsafe fn report_ref<'a>(r: *const UnikdReport) -> Result<&'a TrainReport, Fail> {
    r.as_ref().map(|r| &r.0).ok_or(Fail::Null("report"))
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unikd_report_best_val_top1(report: *const UnikdReport, out: *mut f64) -> UnikdStatus {
    guard(|| write(out, report_ref(report)?.best_val_top1, "out"))
}

/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unikd_report_epoch_count(report: *const UnikdReport, out: *mut usize) -> UnikdStatus {
    guard(|| write(out, report_ref(report)?.epochs.len(), "out"))
}

/// Validation top-1 after `epoch`.
///
/// # Safety
/// `report` must be a live handle; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn unikd_report_val_top1(report: *const UnikdReport, epoch: usize, out: *mut f64) -> UnikdStatus {
    guard(|| {
        let r = report_ref(report)?;
        let e = r.epochs.get(epoch).ok_or_else(|| {
            Fail::Lib(UniKdError::Contract(format!("epoch {epoch} out of range ({} epochs)", r.epochs.len())))
        })?;
        write(out, e.val_top1, "out")
    })
}

/// # Safety
/// `report` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn unikd_report_free(report: *mut UnikdReport) {
    if !report.is_null() {
        drop(Box::from_raw(report));
    }
}
