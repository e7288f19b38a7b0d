//! C ABI over the `srgan` library.
//!
//! Every fallible function returns an [`SrganStatus`]. On failure the
//! message is kept per thread and can be read with
//! [`srgan_last_error_message`]. Objects are opaque handles released by
//! their matching `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use srgan::data::{self, Prepared, ToySpec};
use srgan::eval::{self, BundleSynthesizer, EvalConfig};
use srgan::trainer::{self, ModelBundle, TrainConfig};
use srgan::Error;

/// Result code of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    DataError = 3,
    Diverged = 4,
    CheckpointError = 5,
    IoError = 6,
    Panic = 7,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SrganMode {
    Zsl = 0,
    Gzsl = 1,
}

/// A loaded, normalised dataset.
pub struct SrganDataset {
    prepared: Prepared,
}

/// A trained model bundle.
pub struct SrganModel {
    bundle: ModelBundle,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SrganStatus {
    match e {
        Error::NonFinite { .. } | Error::Diverged { .. } => SrganStatus::Diverged,
        Error::Data(_) | Error::Dim { .. } => SrganStatus::DataError,
        Error::Checkpoint(_) => SrganStatus::CheckpointError,
        Error::Io { .. } => SrganStatus::IoError,
        _ => SrganStatus::InvalidArgument,
    }
}

struct Failure(SrganStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SrganStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            SrganStatus::Ok
        }
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(_) => {
            set_error("internal panic".into());
            SrganStatus::Panic
        }
    }
}

fn null(what: &str) -> Failure {
    Failure(SrganStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(SrganStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

/// Message of the last failed call on this thread, or null after a
/// success. Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn srgan_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn srgan_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// `2us / (u + s)`, written to `out`.
///
/// # Safety
/// `out` must be null or valid for a write.
#[no_mangle]
pub unsafe extern "C" fn srgan_harmonic(u: f64, s: f64, out: *mut f64) -> SrganStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = eval::harmonic(u, s)?;
        Ok(())
    })
}

/// Writes a synthetic dataset directory.
///
/// # Safety
/// `out_dir` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn srgan_gen_toy(
    seed: u64,
    n_seen: usize,
    n_unseen: usize,
    d_v: usize,
    d_s: usize,
    overlap: f64,
    per_class: usize,
    out_dir: *const c_char,
) -> SrganStatus {
    guard(|| {
        let out = path_arg(out_dir, "out_dir")?;
        let spec = ToySpec {
            seed,
            n_seen,
            n_unseen,
            d_v,
            d_s,
            overlap,
            per_class,
            ..ToySpec::default()
        };
        data::gen_toy(&spec, out)?;
        Ok(())
    })
}

/// Loads and normalises the dataset at `path` (a directory or manifest).
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn srgan_dataset_load(
    path: *const c_char,
    out: *mut *mut SrganDataset,
) -> SrganStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let (raw, split) = data::load(path_arg(path, "path")?)?;
        let prepared = Prepared::new(&raw, &split)?;
        *out = Box::into_raw(Box::new(SrganDataset { prepared }));
        Ok(())
    })
}

/// # Safety
/// `ds` must be null or a handle from [`srgan_dataset_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srgan_dataset_free(ds: *mut SrganDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// Number of classes, or 0 for a null handle.
///
/// # Safety
/// `ds` must be null or a live dataset handle.
#[no_mangle]
pub unsafe extern "C" fn srgan_dataset_n_classes(ds: *const SrganDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.prepared.dataset.n_classes())
}

/// Trains rectifier and generator. `config_json` holds `TrainConfig` fields
/// applied over the toy preset; null means the preset itself.
///
/// # Safety
/// `ds` must be a live dataset handle, `config_json` null or a
/// NUL-terminated string, `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn srgan_train(
    ds: *const SrganDataset,
    config_json: *const c_char,
    out: *mut *mut SrganModel,
) -> SrganStatus {
    guard(|| {
        let ds = ref_arg(ds, "dataset")?;
        let out = out_arg(out, "out")?;
        let config = if config_json.is_null() {
            TrainConfig::toy()
        } else {
            let text = str_arg(config_json, "config_json")?;
            let mut base = serde_json::to_value(TrainConfig::toy()).unwrap();
            let over: serde_json::Value = serde_json::from_str(text)
                .map_err(|e| Failure(SrganStatus::InvalidArgument, format!("config_json: {e}")))?;
            let serde_json::Value::Object(over) = over else {
                return Err(Failure(
                    SrganStatus::InvalidArgument,
                    "config_json must be an object".into(),
                ));
            };
            for (k, v) in over {
                base[k] = v;
            }
            serde_json::from_value(base)
                .map_err(|e| Failure(SrganStatus::InvalidArgument, format!("config_json: {e}")))?
        };
        let outcome = trainer::train(&ds.prepared, &config)?;
        *out = Box::into_raw(Box::new(SrganModel {
            bundle: outcome.bundle,
        }));
        Ok(())
    })
}

/// # Safety
/// `model` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn srgan_model_save(
    model: *const SrganModel,
    path: *const c_char,
) -> SrganStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        trainer::save(&m.bundle, path_arg(path, "path")?)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn srgan_model_load(
    path: *const c_char,
    out: *mut *mut SrganModel,
) -> SrganStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let bundle = trainer::load(path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(SrganModel { bundle }));
        Ok(())
    })
}

/// # Safety
/// `model` must be null or a live handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srgan_model_free(model: *mut SrganModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Scores `model` on `ds` with the nearest-centroid classifier. The JSON
/// report goes to `*json_out`, to be released with [`srgan_string_free`].
///
/// # Safety
/// Handles must be live; `json_out` valid for a write.
#[no_mangle]
pub unsafe extern "C" fn srgan_eval(
    model: *const SrganModel,
    ds: *const SrganDataset,
    mode: SrganMode,
    n_per_class: usize,
    seed: u64,
    json_out: *mut *mut c_char,
) -> SrganStatus {
    guard(|| {
        let m = ref_arg(model, "model")?;
        let ds = ref_arg(ds, "dataset")?;
        let out = out_arg(json_out, "json_out")?;
        m.bundle.check_compatible(&ds.prepared)?;
        let cfg = EvalConfig {
            n_per_class,
            seed,
            ..EvalConfig::default()
        };
        let synth = BundleSynthesizer::new(&m.bundle, &ds.prepared)?;
        let report = match mode {
            SrganMode::Zsl => eval::run_zsl(&synth, &ds.prepared, &cfg)?,
            SrganMode::Gzsl => eval::run_gzsl(&synth, &ds.prepared, &cfg)?,
        };
        *out = CString::new(report.to_json()?).unwrap().into_raw();
        Ok(())
    })
}

/// # Safety
/// `s` must be null or a string returned by this library, not yet freed.
#[no_mangle]
pub unsafe extern "C" fn srgan_string_free(s: *mut c_char) {
    if !s.is_null() {
        drop(CString::from_raw(s));
    }
}
