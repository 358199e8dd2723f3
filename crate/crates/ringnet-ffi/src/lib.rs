//! C ABI over the trained-model surface: load a checkpoint, read its
//! metadata, and score images. Handles are opaque pointers; every call
//! returns a status code and leaves a thread-local message for the last
//! failure. No call unwinds across the boundary.
//!
//! Image buffers are row-major `[count, channels, height, width]` floats in
//! [0, 1]; the model applies its own stored input centering.

use std::ffi::{c_char, c_int, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;

use ringnet::checkpoint;
use ringnet::error::Error;
use ringnet::eval::{dcg25, rank_by_scores, Judgment};
use ringnet::model::MultiTaskModel;
use ringnet::tensor::{elem_count, Tensor};

/// Scoring batches are chunked so callers can pass arbitrarily many images
/// without a proportional activation spike.
const CHUNK: usize = 128;

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum RnStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArg = 1,
    /// Argument outside the model's contract (bad index, wrong length).
    InvalidArg = 2,
    Io = 3,
    /// The file is not a readable checkpoint.
    Format = 4,
    /// Non-finite values or a panic inside the library.
    Numeric = 5,
}

pub struct RnModel {
    inner: MultiTaskModel<f32>,
    input_len: usize,
    feature_len: usize,
    /// Task names as C strings, parallel to head order; owned by the handle
    /// so `rn_model_task_name` can lend them out.
    task_names: Vec<CString>,
}

thread_local! {
    static LAST_ERROR: std::cell::RefCell<CString> =
        std::cell::RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let owned = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = owned);
}

fn status_for(err: &Error) -> RnStatus {
    match err {
        Error::Config(_) | Error::InvalidArg(_) | Error::UnknownTask(_) => RnStatus::InvalidArg,
        Error::Io(_) => RnStatus::Io,
        Error::Checkpoint(_) | Error::Data(_) | Error::EmptyDataset(_) => RnStatus::Format,
        Error::Numeric(_) | Error::ShapeMismatch { .. } => RnStatus::Numeric,
    }
}

fn fail(err: &Error) -> RnStatus {
    set_error(&err.to_string());
    status_for(err)
}

/// Run `body` with panics converted to a Numeric status so the unwind never
/// crosses into C.
fn guarded(body: impl FnOnce() -> RnStatus) -> RnStatus {
    match catch_unwind(AssertUnwindSafe(body)) {
        Ok(s) => s,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic in ringnet".into());
            set_error(&msg);
            RnStatus::Numeric
        }
    }
}

/// Library version as a static nul-terminated string.
#[no_mangle]
pub extern "C" fn rn_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message for the calling thread's most recent failure; empty when none.
/// Valid until the thread's next failing call.
#[no_mangle]
pub extern "C" fn rn_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Load a trained checkpoint into a fresh handle.
///
/// # Safety
/// `path` must be a nul-terminated string and `out` a valid location; on
/// Ok, `*out` owns the model until `rn_model_free`.
#[no_mangle]
pub unsafe extern "C" fn rn_model_load(
    path: *const c_char,
    out: *mut *mut RnModel,
) -> RnStatus {
    guarded(|| {
        if path.is_null() || out.is_null() {
            set_error("rn_model_load: null argument");
            return RnStatus::NullArg;
        }
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(s) => s,
            Err(_) => {
                set_error("rn_model_load: path is not valid UTF-8");
                return RnStatus::InvalidArg;
            }
        };
        match load_model(Path::new(path)) {
            Ok(model) => {
                unsafe { *out = Box::into_raw(Box::new(model)) };
                RnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}

fn load_model(path: &Path) -> Result<RnModel, Error> {
    let mut file = std::io::BufReader::new(std::fs::File::open(path)?);
    let state = checkpoint::read_checkpoint::<f32>(&mut file)?;
    let inner = state.model;
    let input_len = elem_count(&inner.config.input_shape);
    let feature_len = elem_count(&inner.config.feature_shape()?);
    let task_names = inner
        .task_ids()
        .iter()
        .map(|t| CString::new(*t).map_err(|_| Error::Checkpoint("task name holds a nul".into())))
        .collect::<Result<Vec<_>, _>>()?;
    Ok(RnModel { inner, input_len, feature_len, task_names })
}

/// Release a handle returned by `rn_model_load`. Null is a no-op.
///
/// # Safety
/// `model` must be unused after this call.
#[no_mangle]
pub unsafe extern "C" fn rn_model_free(model: *mut RnModel) {
    if !model.is_null() {
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Number of task heads (fully-shared models report one).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rn_model_task_count(model: *const RnModel) -> usize {
    match unsafe { model.as_ref() } {
        Some(m) => m.task_names.len(),
        None => 0,
    }
}

/// Name of task `idx`, borrowed from the handle; null when out of range.
///
/// # Safety
/// `model` must be a live handle; the string dies with it.
#[no_mangle]
pub unsafe extern "C" fn rn_model_task_name(
    model: *const RnModel,
    idx: usize,
) -> *const c_char {
    match unsafe { model.as_ref() } {
        Some(m) => match m.task_names.get(idx) {
            Some(name) => name.as_ptr(),
            None => std::ptr::null(),
        },
        None => std::ptr::null(),
    }
}

/// Floats per input image (channels * height * width).
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rn_model_input_len(model: *const RnModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.input_len)
}

/// Floats per extracted feature vector.
///
/// # Safety
/// `model` must be a live handle.
#[no_mangle]
pub unsafe extern "C" fn rn_model_feature_len(model: *const RnModel) -> usize {
    unsafe { model.as_ref() }.map_or(0, |m| m.feature_len)
}

unsafe fn images_tensor(
    model: &RnModel,
    images: *const f32,
    count: usize,
) -> Result<Tensor<f32>, Error> {
    if count == 0 {
        return Err(Error::InvalidArg("zero images".into()));
    }
    let data = unsafe { std::slice::from_raw_parts(images, count * model.input_len) };
    let mut shape = vec![count];
    shape.extend_from_slice(&model.inner.config.input_shape);
    Tensor::from_vec(&shape, data.to_vec())
}

/// Shared-trunk features for `count` images into `out` (`count *
/// rn_model_feature_len` floats).
///
/// # Safety
/// `images` must hold `count * rn_model_input_len` floats and `out` must
/// have space for `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn rn_model_features(
    model: *const RnModel,
    images: *const f32,
    count: usize,
    out: *mut f32,
    out_len: usize,
) -> RnStatus {
    guarded(|| {
        let Some(m) = (unsafe { model.as_ref() }) else {
            set_error("rn_model_features: null model");
            return RnStatus::NullArg;
        };
        if images.is_null() || out.is_null() {
            set_error("rn_model_features: null buffer");
            return RnStatus::NullArg;
        }
        if out_len != count * m.feature_len {
            set_error(&format!(
                "rn_model_features: out_len {} but {} images need {}",
                out_len,
                count,
                count * m.feature_len
            ));
            return RnStatus::InvalidArg;
        }
        let out = unsafe { std::slice::from_raw_parts_mut(out, out_len) };
        for start in (0..count).step_by(CHUNK) {
            let n = CHUNK.min(count - start);
            let chunk = match unsafe {
                images_tensor(m, images.add(start * m.input_len), n)
            } {
                Ok(t) => t,
                Err(e) => return fail(&e),
            };
            match ringnet::eval::extract_features(&m.inner, &chunk) {
                Ok(f) => out[start * m.feature_len..(start + n) * m.feature_len]
                    .copy_from_slice(f.data()),
                Err(e) => return fail(&e),
            }
        }
        RnStatus::Ok
    })
}

/// Relevance score of each image for task `task_idx` into `out` (`count`
/// doubles). Requires a two-way head.
///
/// # Safety
/// `images` must hold `count * rn_model_input_len` floats and `out` must
/// have space for `out_len` doubles.
#[no_mangle]
pub unsafe extern "C" fn rn_model_relevance(
    model: *const RnModel,
    task_idx: usize,
    images: *const f32,
    count: usize,
    out: *mut f64,
    out_len: usize,
) -> RnStatus {
    guarded(|| {
        let Some(m) = (unsafe { model.as_ref() }) else {
            set_error("rn_model_relevance: null model");
            return RnStatus::NullArg;
        };
        if images.is_null() || out.is_null() {
            set_error("rn_model_relevance: null buffer");
            return RnStatus::NullArg;
        }
        let Some(task) = m.task_names.get(task_idx) else {
            set_error(&format!(
                "rn_model_relevance: task {} of {}",
                task_idx,
                m.task_names.len()
            ));
            return RnStatus::InvalidArg;
        };
        if out_len != count {
            set_error(&format!("rn_model_relevance: out_len {out_len} != count {count}"));
            return RnStatus::InvalidArg;
        }
        let task = task.to_str().expect("task names round-trip").to_string();
        let out = unsafe { std::slice::from_raw_parts_mut(out, out_len) };
        for start in (0..count).step_by(CHUNK) {
            let n = CHUNK.min(count - start);
            let chunk = match unsafe {
                images_tensor(m, images.add(start * m.input_len), n)
            } {
                Ok(t) => t,
                Err(e) => return fail(&e),
            };
            match m.inner.relevance(&task, &chunk) {
                Ok(scores) => out[start..start + n].copy_from_slice(&scores),
                Err(e) => return fail(&e),
            }
        }
        RnStatus::Ok
    })
}

/// Predicted index per image into `out` (`count` entries): the class for a
/// fully-shared model, otherwise the highest-relevance task.
///
/// # Safety
/// `images` must hold `count * rn_model_input_len` floats and `out` must
/// have space for `out_len` entries.
#[no_mangle]
pub unsafe extern "C" fn rn_model_predict(
    model: *const RnModel,
    images: *const f32,
    count: usize,
    out: *mut u32,
    out_len: usize,
) -> RnStatus {
    guarded(|| {
        let Some(m) = (unsafe { model.as_ref() }) else {
            set_error("rn_model_predict: null model");
            return RnStatus::NullArg;
        };
        if images.is_null() || out.is_null() {
            set_error("rn_model_predict: null buffer");
            return RnStatus::NullArg;
        }
        if out_len != count {
            set_error(&format!("rn_model_predict: out_len {out_len} != count {count}"));
            return RnStatus::InvalidArg;
        }
        let out = unsafe { std::slice::from_raw_parts_mut(out, out_len) };
        for start in (0..count).step_by(CHUNK) {
            let n = CHUNK.min(count - start);
            let chunk = match unsafe {
                images_tensor(m, images.add(start * m.input_len), n)
            } {
                Ok(t) => t,
                Err(e) => return fail(&e),
            };
            match m.inner.predict_class(&chunk) {
                Ok(classes) => {
                    for (o, c) in out[start..start + n].iter_mut().zip(classes) {
                        *o = c as u32;
                    }
                }
                Err(e) => return fail(&e),
            }
        }
        RnStatus::Ok
    })
}

/// Discounted cumulative gain over the top 25 of a ranked judgment list,
/// normalized so 25 grade-3 results score 1. `grades` are in rank order:
/// 0 bad, 2 good, 3 excellent.
///
/// # Safety
/// `grades` must hold `len` entries and `out` must be a valid location.
#[no_mangle]
pub unsafe extern "C" fn rn_dcg25(
    grades: *const c_int,
    len: usize,
    out: *mut f64,
) -> RnStatus {
    guarded(|| {
        if grades.is_null() || out.is_null() {
            set_error("rn_dcg25: null argument");
            return RnStatus::NullArg;
        }
        let grades = unsafe { std::slice::from_raw_parts(grades, len) };
        let mut judgments = std::collections::BTreeMap::new();
        for (i, &g) in grades.iter().enumerate() {
            let j = match g {
                0 => Judgment::Bad,
                2 => Judgment::Good,
                3 => Judgment::Excellent,
                other => {
                    set_error(&format!("rn_dcg25: grade {other} is not 0, 2, or 3"));
                    return RnStatus::InvalidArg;
                }
            };
            judgments.insert(i, j);
        }
        // Scores only encode the given order.
        let ids: Vec<usize> = (0..len).collect();
        let scores: Vec<f64> = (0..len).map(|i| (len - i) as f64).collect();
        match rank_by_scores("dcg", &ids, &scores) {
            Ok(ranked) => {
                unsafe { *out = dcg25(&ranked, &judgments) };
                RnStatus::Ok
            }
            Err(e) => fail(&e),
        }
    })
}
