//! C ABI for `caltype`.
//!
//! Datasets and models cross the boundary as opaque handles created by a `*_load`,
//! `*_generate` or `*_train` call and released with the matching `*_free`. Every
//! fallible function returns a [`CaltypeStatus`]; on failure, [`caltype_last_error`]
//! describes what went wrong on the calling thread. Panics never unwind into C.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use caltype::format::Dataset;
use caltype::model::{preset, TrainedModel};
use caltype::sim::{generate_dataset, Profile};
use caltype::training::{make_splits, train, TrainConfig};
use caltype::Error;

/// Result of every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CaltypeStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument or configuration value is out of range.
    InvalidArgument = 2,
    /// Reading or writing a file failed.
    Io = 3,
    /// A file is not a valid dataset or model.
    Format = 4,
    /// Trace length does not match what the model expects.
    LengthMismatch = 5,
    /// Not enough examples for the requested split.
    InsufficientData = 6,
    /// An internal error; the message has details.
    Internal = 7,
}

/// Opaque dataset handle.
pub struct CaltypeDataset(Dataset);

/// Opaque trained-model handle.
pub struct CaltypeModel(TrainedModel);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> CaltypeStatus {
    match e {
        Error::Io(_) | Error::Csv(_) => CaltypeStatus::Io,
        Error::Format(_) => CaltypeStatus::Format,
        Error::LengthMismatch { .. } => CaltypeStatus::LengthMismatch,
        Error::InsufficientData { .. } => CaltypeStatus::InsufficientData,
        Error::Shape { .. } | Error::MissingCache | Error::DegenerateStats => CaltypeStatus::Internal,
        _ => CaltypeStatus::InvalidArgument,
    }
}

/// Runs `f`, turning errors and panics into a status plus a thread-local message.
fn guard(f: impl FnOnce() -> Result<(), (CaltypeStatus, String)>) -> CaltypeStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => CaltypeStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".to_string());
            CaltypeStatus::Internal
        }
    }
}

fn lib<T>(r: caltype::Result<T>) -> Result<T, (CaltypeStatus, String)> {
    r.map_err(|e| (status_of(&e), e.to_string()))
}

fn null(what: &str) -> (CaltypeStatus, String) {
    (CaltypeStatus::NullArgument, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a Path, (CaltypeStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(Path::new)
        .map_err(|_| (CaltypeStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

/// Message for the most recent failure on this thread, or null if none. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn caltype_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn caltype_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a dataset file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caltype_dataset_load(path: *const c_char, out: *mut *mut CaltypeDataset) -> CaltypeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let data = lib(Dataset::load(path_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(CaltypeDataset(data)));
        Ok(())
    })
}

/// Simulates a dataset from the default profile. `counts` holds four per-class
/// counts in PY, PV, SOM, VIP order.
///
/// # Safety
/// `counts` must point to four values and `out` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caltype_dataset_generate(
    counts: *const u32,
    length: u32,
    seed: u64,
    out: *mut *mut CaltypeDataset,
) -> CaltypeStatus {
    guard(|| {
        if counts.is_null() {
            return Err(null("counts"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let c = std::slice::from_raw_parts(counts, 4);
        let counts = [c[0] as usize, c[1] as usize, c[2] as usize, c[3] as usize];
        let len = length as usize;
        let data = lib(generate_dataset(&Profile::default(), counts, len, seed).and_then(|e| Dataset::new(len, e)))?;
        *out = Box::into_raw(Box::new(CaltypeDataset(data)));
        Ok(())
    })
}

/// Writes a dataset file.
///
/// # Safety
/// `data` must come from this library and `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn caltype_dataset_save(data: *const CaltypeDataset, path: *const c_char) -> CaltypeStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        lib(d.0.save(path_arg(path, "path")?))
    })
}

/// Number of traces, or 0 for a null handle.
///
/// # Safety
/// `data` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn caltype_dataset_len(data: *const CaltypeDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.len())
}

/// Samples per trace, or 0 for a null handle.
///
/// # Safety
/// `data` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn caltype_dataset_trace_length(data: *const CaltypeDataset) -> usize {
    data.as_ref().map_or(0, |d| d.0.length)
}

/// Copies trace `index` into `signal` (which must hold `capacity >= trace length`
/// values) and its class code (0 PY, 1 PV, 2 SOM, 3 VIP) into `label`.
///
/// # Safety
/// `data` must come from this library; `signal` must have room for `capacity` values.
#[no_mangle]
pub unsafe extern "C" fn caltype_dataset_get(
    data: *const CaltypeDataset,
    index: usize,
    signal: *mut f64,
    capacity: usize,
    label: *mut u8,
) -> CaltypeStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        let e = d.0.examples.get(index).ok_or_else(|| {
            (CaltypeStatus::InvalidArgument, format!("index {index} out of range for {} traces", d.0.len()))
        })?;
        if !signal.is_null() {
            if capacity < e.signal.len() {
                return Err((
                    CaltypeStatus::InvalidArgument,
                    format!("buffer holds {capacity} values, trace has {}", e.signal.len()),
                ));
            }
            ptr::copy_nonoverlapping(e.signal.as_ptr(), signal, e.signal.len());
        }
        if !label.is_null() {
            *label = e.label.code();
        }
        Ok(())
    })
}

/// Releases a dataset. Null is ignored.
///
/// # Safety
/// `data` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn caltype_dataset_free(data: *mut CaltypeDataset) {
    if !data.is_null() {
        drop(Box::from_raw(data));
    }
}

/// Loads a model file.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caltype_model_load(path: *const c_char, out: *mut *mut CaltypeModel) -> CaltypeStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let m = lib(TrainedModel::load(path_arg(path, "path")?))?;
        *out = Box::into_raw(Box::new(CaltypeModel(m)));
        Ok(())
    })
}

/// Writes a model file.
///
/// # Safety
/// `model` must come from this library and `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn caltype_model_save(model: *const CaltypeModel, path: *const c_char) -> CaltypeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        lib(m.0.save(path_arg(path, "path")?))
    })
}

/// Trains the named preset on one random split of `data` and returns the model.
/// `epochs` of 0 keeps the default of 20. The test accuracy on the held-out part is
/// written to `test_accuracy` when it is not null.
///
/// # Safety
/// `data` must come from this library, `preset_name` must be a NUL-terminated string
/// and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caltype_model_train(
    data: *const CaltypeDataset,
    preset_name: *const c_char,
    train_size: usize,
    test_size: usize,
    epochs: u32,
    seed: u64,
    out: *mut *mut CaltypeModel,
    test_accuracy: *mut f64,
) -> CaltypeStatus {
    guard(|| {
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        if preset_name.is_null() {
            return Err(null("preset_name"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        let name = CStr::from_ptr(preset_name)
            .to_str()
            .map_err(|_| (CaltypeStatus::InvalidArgument, "preset name is not UTF-8".to_string()))?;
        let spec = lib(preset(name))?;
        lib(spec.validate(d.0.length))?;
        let split = lib(make_splits(d.0.len(), 1, train_size, test_size, seed))?.remove(0);
        let mut cfg = TrainConfig {
            seed: split.seed,
            ..TrainConfig::default()
        };
        if epochs > 0 {
            cfg.epochs = epochs as usize;
        }
        let (model, report) = lib(train(&spec, &d.0.training_view(), &split, &cfg))?;
        if !test_accuracy.is_null() {
            *test_accuracy = report.test_accuracy;
        }
        *out = Box::into_raw(Box::new(CaltypeModel(model)));
        Ok(())
    })
}

/// Trace length the model expects, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn caltype_model_input_length(model: *const CaltypeModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.input_len)
}

/// Number of classes the model scores, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn caltype_model_classes(model: *const CaltypeModel) -> usize {
    model.as_ref().map_or(0, |m| m.0.spec.classes)
}

/// Classifies one raw trace of `len` samples. The predicted class goes to `class_out`;
/// when `scores` is not null, `scores_len` (at least the class count) per-class scores
/// are written too: softmax probabilities for networks, vote shares for boosting.
///
/// # Safety
/// `model` must come from this library, `signal` must hold `len` values and `scores`,
/// when not null, `scores_len` values.
#[no_mangle]
pub unsafe extern "C" fn caltype_model_predict(
    model: *const CaltypeModel,
    signal: *const f64,
    len: usize,
    class_out: *mut u8,
    scores: *mut f64,
    scores_len: usize,
) -> CaltypeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if signal.is_null() {
            return Err(null("signal"));
        }
        if class_out.is_null() {
            return Err(null("class_out"));
        }
        let x = std::slice::from_raw_parts(signal, len);
        let s = lib(m.0.scores(x))?;
        if !scores.is_null() {
            if scores_len < s.len() {
                return Err((
                    CaltypeStatus::InvalidArgument,
                    format!("score buffer holds {scores_len} values, model has {} classes", s.len()),
                ));
            }
            ptr::copy_nonoverlapping(s.as_ptr(), scores, s.len());
        }
        *class_out = caltype::network::argmax(&s) as u8;
        Ok(())
    })
}

/// Accuracy of `model` over every trace in `data`.
///
/// # Safety
/// Both handles must come from this library and `accuracy` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn caltype_model_evaluate(
    model: *const CaltypeModel,
    data: *const CaltypeDataset,
    accuracy: *mut f64,
) -> CaltypeStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = data.as_ref().ok_or_else(|| null("data"))?;
        if accuracy.is_null() {
            return Err(null("accuracy"));
        }
        if d.0.is_empty() {
            return Err((CaltypeStatus::InvalidArgument, "dataset is empty".to_string()));
        }
        if d.0.length != m.0.input_len {
            lib(Err(Error::LengthMismatch {
                model: m.0.input_len,
                data: d.0.length,
            }))?;
        }
        let mut hits = 0usize;
        for e in &d.0.examples {
            hits += usize::from(lib(m.0.predict(&e.signal))? == usize::from(e.label.code()));
        }
        *accuracy = hits as f64 / d.0.len() as f64;
        Ok(())
    })
}

/// Releases a model. Null is ignored.
///
/// # Safety
/// `model` must be null or come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn caltype_model_free(model: *mut CaltypeModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}
