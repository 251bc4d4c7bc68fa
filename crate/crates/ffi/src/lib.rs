//! C ABI over the `stoplab` library.
//!
//! Objects cross the boundary as opaque handles created by `*_new`/`*_load`
//! functions and released with the matching `*_free`. Every fallible call
//! returns a [`StoplabStatus`]; on failure the message is kept per thread
//! and can be copied out with [`stoplab_last_error`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use stoplab::data::ImageBatch;
use stoplab::eval::{extract_features, FeatureSource};
use stoplab::model::ModelState;
use stoplab::tensor::Tensor;
use stoplab::theory::{run_verify, VerifyOptions};
use stoplab::trainer::{load_datasets, pretrain, PretrainOptions};
use stoplab::{Error, RunConfig};

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoplabStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidUtf8 = 2,
    Config = 3,
    Usage = 4,
    Format = 5,
    Io = 6,
    Dimension = 7,
    NonFinite = 8,
    Statistical = 9,
    Internal = 10,
    Panic = 11,
    BufferTooSmall = 12,
}

/// Feature source for [`stoplab_model_features`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum StoplabFeatures {
    LastLayer = 0,
    Last4 = 1,
}

/// Opaque run configuration.
pub struct StoplabConfig {
    inner: RunConfig,
}

/// Opaque trained or loaded model.
pub struct StoplabModel {
    config: RunConfig,
    state: ModelState<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn set_error(msg: String) {
    LAST_ERROR.with(|e| *e.borrow_mut() = msg);
}

fn status_of(e: &Error) -> StoplabStatus {
    match e {
        Error::Dimension(_) => StoplabStatus::Dimension,
        Error::Config(_) => StoplabStatus::Config,
        Error::Usage(_) => StoplabStatus::Usage,
        Error::Format { .. } => StoplabStatus::Format,
        Error::Io { .. } => StoplabStatus::Io,
        Error::NonFinite { .. } => StoplabStatus::NonFinite,
        Error::Statistical(_) => StoplabStatus::Statistical,
        Error::Internal(_) => StoplabStatus::Internal,
    }
}

struct Fail(StoplabStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

/// Runs `f`, recording any error or panic and turning it into a status.
fn guard(f: impl FnOnce() -> Result<(), Fail>) -> StoplabStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error(String::new());
            StoplabStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
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
            StoplabStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(StoplabStatus::NullPointer, format!("{what} is null"))
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Fail> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(StoplabStatus::InvalidUtf8, format!("{what} is not valid UTF-8")))
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Fail> {
    str_arg(p, what).map(PathBuf::from)
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Copies the calling thread's last error message into `buf` as a
/// NUL-terminated string, truncating if needed. Returns the full message
/// length in bytes, excluding the terminator; 0 means no error.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn stoplab_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn stoplab_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Creates a configuration holding the documented defaults.
///
/// # Safety
/// `out` must be a valid pointer to a handle slot.
#[no_mangle]
pub unsafe extern "C" fn stoplab_config_new(out: *mut *mut StoplabConfig) -> StoplabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(StoplabConfig {
            inner: RunConfig::default(),
        }));
        Ok(())
    })
}

/// Loads a `key = value` config file on top of the defaults.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` a valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn stoplab_config_load(path: *const c_char, out: *mut *mut StoplabConfig) -> StoplabStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let inner = RunConfig::load(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(StoplabConfig { inner }));
        Ok(())
    })
}

/// Sets one dotted key, for example `stop.sigma` to `0.5`.
///
/// # Safety
/// `cfg` must be a live handle; `key` and `value` NUL-terminated strings.
#[no_mangle]
pub unsafe extern "C" fn stoplab_config_set(
    cfg: *mut StoplabConfig,
    key: *const c_char,
    value: *const c_char,
) -> StoplabStatus {
    guard(|| {
        let cfg = out_arg(cfg, "cfg")?;
        cfg.inner.set(str_arg(key, "key")?, str_arg(value, "value")?)?;
        Ok(())
    })
}

/// Copies the value of `key` into `buf` (NUL-terminated). `needed`, if not
/// null, receives the value length excluding the terminator.
///
/// # Safety
/// `cfg` must be a live handle, `key` NUL-terminated, and `buf` null or
/// `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn stoplab_config_get(
    cfg: *const StoplabConfig,
    key: *const c_char,
    buf: *mut c_char,
    len: usize,
    needed: *mut usize,
) -> StoplabStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let value = cfg.inner.get(str_arg(key, "key")?)?;
        if let Some(n) = needed.as_mut() {
            *n = value.len();
        }
        if buf.is_null() || len <= value.len() {
            return Err(Fail(
                StoplabStatus::BufferTooSmall,
                format!("value needs {} bytes plus the terminator", value.len()),
            ));
        }
        ptr::copy_nonoverlapping(value.as_ptr(), buf.cast::<u8>(), value.len());
        *buf.add(value.len()) = 0;
        Ok(())
    })
}

/// Releases a configuration. Null is ignored.
///
/// # Safety
/// `cfg` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stoplab_config_free(cfg: *mut StoplabConfig) {
    if !cfg.is_null() {
        drop(Box::from_raw(cfg));
    }
}

/// Pretrains a model with `cfg`. `run_dir` may be null; otherwise the
/// resolved config, metrics and checkpoints are written there.
///
/// # Safety
/// `cfg` must be a live handle, `run_dir` null or NUL-terminated, `out` a
/// valid handle slot.
#[no_mangle]
pub unsafe extern "C" fn stoplab_pretrain(
    cfg: *const StoplabConfig,
    run_dir: *const c_char,
    out: *mut *mut StoplabModel,
) -> StoplabStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let out = out_arg(out, "out")?;
        let run_dir = if run_dir.is_null() {
            None
        } else {
            Some(path_arg(run_dir, "run_dir")?)
        };
        let data = load_datasets(&cfg.inner)?;
        let trained = pretrain(
            &cfg.inner,
            &data.train,
            &PretrainOptions {
                run_dir,
                ..Default::default()
            },
        )?;
        *out = Box::into_raw(Box::new(StoplabModel {
            config: cfg.inner.clone(),
            state: trained.state,
        }));
        Ok(())
    })
}

/// Loads a checkpoint written by training or [`stoplab_model_save`].
///
/// # Safety
/// `cfg` must be a live handle, `path` NUL-terminated, `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn stoplab_model_load(
    cfg: *const StoplabConfig,
    path: *const c_char,
    out: *mut *mut StoplabModel,
) -> StoplabStatus {
    guard(|| {
        let cfg = cfg.as_ref().ok_or_else(|| null("cfg"))?;
        let out = out_arg(out, "out")?;
        let state = ModelState::load(&cfg.inner.model, &path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(StoplabModel {
            config: cfg.inner.clone(),
            state,
        }));
        Ok(())
    })
}

/// Writes the model parameters as a checkpoint file.
///
/// # Safety
/// `model` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn stoplab_model_save(model: *const StoplabModel, path: *const c_char) -> StoplabStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        model.state.save(Path::new(&path_arg(path, "path")?))?;
        Ok(())
    })
}

/// Frobenius norm of the shared projection `A` and L2 norm of `m_tilde`.
///
/// # Safety
/// `model` must be a live handle; the outputs valid pointers.
#[no_mangle]
pub unsafe extern "C" fn stoplab_model_norms(
    model: *const StoplabModel,
    norm_a: *mut f64,
    norm_m_tilde: *mut f64,
) -> StoplabStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(norm_a, "norm_a")? = model.state.a().norm();
        *out_arg(norm_m_tilde, "norm_m_tilde")? = model.state.m_tilde().norm();
        Ok(())
    })
}

/// Feature width per image for `source`: `d_e` or `4 d_e`.
///
/// # Safety
/// `model` must be a live handle and `width` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stoplab_model_feature_width(
    model: *const StoplabModel,
    source: StoplabFeatures,
    width: *mut usize,
) -> StoplabStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let d = model.state.config.encoder.dim;
        *out_arg(width, "width")? = match source {
            StoplabFeatures::LastLayer => d,
            StoplabFeatures::Last4 => 4 * d,
        };
        Ok(())
    })
}

/// Frozen-encoder features for `n` images of `h x w x c` pixels in `[0, 1]`,
/// row-major. Writes `n * width` floats to `out`, which holds `out_len`.
///
/// # Safety
/// `model` must be a live handle, `images` point to `n*h*w*c` floats and
/// `out` to `out_len` writable floats.
#[no_mangle]
pub unsafe extern "C" fn stoplab_model_features(
    model: *const StoplabModel,
    images: *const f32,
    n: usize,
    h: usize,
    w: usize,
    c: usize,
    source: StoplabFeatures,
    out: *mut f32,
    out_len: usize,
) -> StoplabStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let len = n * h * w * c;
        if images.is_null() && len > 0 {
            return Err(null("images"));
        }
        let pixels = if len == 0 {
            Vec::new()
        } else {
            std::slice::from_raw_parts(images, len).to_vec()
        };
        let batch = ImageBatch::new(Tensor::new(&[n, h, w, c], pixels)?, None)?;
        let src = match source {
            StoplabFeatures::LastLayer => FeatureSource::LastLayer,
            StoplabFeatures::Last4 => FeatureSource::Last4,
        };
        let feats = extract_features(&model.state, &batch, src)?;
        let data = feats.data();
        if out_len < data.len() {
            return Err(Fail(
                StoplabStatus::BufferTooSmall,
                format!("features need {} floats, buffer holds {out_len}", data.len()),
            ));
        }
        if !data.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            ptr::copy_nonoverlapping(data.as_ptr(), out, data.len());
        }
        Ok(())
    })
}

/// Copies the model's configuration into a new handle.
///
/// # Safety
/// `model` must be a live handle and `out` a valid slot.
#[no_mangle]
pub unsafe extern "C" fn stoplab_model_config(
    model: *const StoplabModel,
    out: *mut *mut StoplabConfig,
) -> StoplabStatus {
    guard(|| {
        let model = model.as_ref().ok_or_else(|| null("model"))?;
        let out = out_arg(out, "out")?;
        *out = Box::into_raw(Box::new(StoplabConfig {
            inner: model.config.clone(),
        }));
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn stoplab_model_free(model: *mut StoplabModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Runs the theory checks with default sizes. `passed` receives 1 when no
/// check failed. A failing check is not an error status; it is reported
/// through `passed`.
///
/// # Safety
/// `passed` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn stoplab_verify(seed: u64, num_noise: usize, passed: *mut i32) -> StoplabStatus {
    guard(|| {
        let passed = out_arg(passed, "passed")?;
        let report = run_verify(&VerifyOptions {
            seed,
            num_noise,
            ..VerifyOptions::default()
        })?;
        *passed = i32::from(report.passed());
        Ok(())
    })
}
