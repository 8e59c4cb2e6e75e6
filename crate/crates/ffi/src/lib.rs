//! C interface to `vsumm`.
//!
//! Functions return a [`VsummStatus`]. On failure a message is kept per
//! thread and can be read with [`vsumm_last_error`] until the next call.
//! Handles are opaque, created by `*_new`/`*_load`/`*_build` functions and
//! released with the matching `*_free`.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use vsumm::checkpoint;
use vsumm::eval;
use vsumm::model::{self, ModelConfig, ModelParams};
use vsumm::shots::{self, KtsParams, SummaryMask};
use vsumm::{Error, Tensor};

/// Result codes. The first four match the command-line exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum VsummStatus {
    Ok = 0,
    Config = 1,
    Data = 2,
    Numeric = 3,
    InvalidArgument = 4,
    Panic = 5,
}

/// A loaded or freshly initialized model.
pub struct VsummModel {
    params: ModelParams,
}

/// A key-shot summary.
pub struct VsummSummary {
    summary: SummaryMask,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> VsummStatus {
    match e.exit_code() {
        1 => VsummStatus::Config,
        2 => VsummStatus::Data,
        _ => VsummStatus::Numeric,
    }
}

struct Invalid(String);

enum Failure {
    Lib(Error),
    Arg(Invalid),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

impl From<Invalid> for Failure {
    fn from(e: Invalid) -> Self {
        Failure::Arg(e)
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> VsummStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => VsummStatus::Ok,
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            status_of(&e)
        }
        Ok(Err(Failure::Arg(Invalid(m)))) => {
            set_error(m);
            VsummStatus::InvalidArgument
        }
        Err(_) => {
            set_error("internal panic".into());
            VsummStatus::Panic
        }
    }
}

fn non_null<T>(p: *const T, what: &str) -> Result<(), Invalid> {
    if p.is_null() {
        Err(Invalid(format!("{what} is null")))
    } else {
        Ok(())
    }
}

unsafe fn path_arg<'a>(p: *const c_char) -> Result<&'a Path, Invalid> {
    non_null(p, "path")?;
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Invalid("path is not UTF-8".into()))?;
    Ok(Path::new(s))
}

unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], Invalid> {
    if len == 0 {
        return Ok(&[]);
    }
    non_null(p, what)?;
    Ok(std::slice::from_raw_parts(p, len))
}

/// Message for the last failed call on this thread, or null. Valid until the
/// next call into the library from the same thread.
#[no_mangle]
pub extern "C" fn vsumm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Model hyperparameters as passed across the boundary.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct VsummModelConfig {
    pub in_channels: usize,
    pub squeezed_channels: usize,
    pub levels: usize,
    pub base_channels: usize,
    pub expansion: usize,
    pub width: usize,
    pub height: usize,
}

impl From<VsummModelConfig> for ModelConfig {
    fn from(c: VsummModelConfig) -> Self {
        ModelConfig {
            in_channels: c.in_channels,
            squeezed_channels: c.squeezed_channels,
            levels: c.levels,
            base_channels: c.base_channels,
            expansion: c.expansion,
            width: c.width,
            height: c.height,
        }
    }
}

impl From<ModelConfig> for VsummModelConfig {
    fn from(c: ModelConfig) -> Self {
        VsummModelConfig {
            in_channels: c.in_channels,
            squeezed_channels: c.squeezed_channels,
            levels: c.levels,
            base_channels: c.base_channels,
            expansion: c.expansion,
            width: c.width,
            height: c.height,
        }
    }
}

/// The library's default model configuration.
#[no_mangle]
pub extern "C" fn vsumm_model_config_default() -> VsummModelConfig {
    ModelConfig::default().into()
}

/// Initializes a model with seeded random weights.
///
/// # Safety
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn vsumm_model_new(
    config: VsummModelConfig,
    seed: u64,
    out: *mut *mut VsummModel,
) -> VsummStatus {
    guard(|| {
        non_null(out, "out")?;
        let params = model::init_params(&config.into(), seed)?;
        *out = Box::into_raw(Box::new(VsummModel { params }));
        Ok(())
    })
}

/// Loads a checkpoint written by `vsumm train` or [`vsumm_model_save`].
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` valid for writes.
#[no_mangle]
pub unsafe extern "C" fn vsumm_model_load(path: *const c_char, out: *mut *mut VsummModel) -> VsummStatus {
    guard(|| {
        non_null(out, "out")?;
        let params = checkpoint::load(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(VsummModel { params }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn vsumm_model_save(model: *const VsummModel, path: *const c_char) -> VsummStatus {
    guard(|| {
        non_null(model, "model")?;
        checkpoint::save(path_arg(path)?, &(*model).params)?;
        Ok(())
    })
}

/// # Safety
/// `model` must come from this library and `out` be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn vsumm_model_config(model: *const VsummModel, out: *mut VsummModelConfig) -> VsummStatus {
    guard(|| {
        non_null(model, "model")?;
        non_null(out, "out")?;
        *out = (*model).params.config.into();
        Ok(())
    })
}

/// Number of scalar parameters, or 0 for a null handle.
///
/// # Safety
/// `model` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn vsumm_model_param_count(model: *const VsummModel) -> usize {
    model.as_ref().map_or(0, |m| m.params.param_count())
}

/// Scores every frame of a `[steps, channels, width, height]` feature block.
/// Steps are padded internally and `steps * expansion` scores are written.
///
/// # Safety
/// `features` must hold `steps * channels * width * height` values and
/// `scores` must have room for `scores_len` values.
#[no_mangle]
pub unsafe extern "C" fn vsumm_model_score(
    model: *const VsummModel,
    features: *const f64,
    steps: usize,
    channels: usize,
    width: usize,
    height: usize,
    scores: *mut f64,
    scores_len: usize,
) -> VsummStatus {
    guard(|| {
        non_null(model, "model")?;
        let m = &(*model).params;
        let n = steps * channels * width * height;
        let data = slice_arg(features, n, "features")?.to_vec();
        let tensor = Tensor::new(&[steps, channels, width, height], data)?;
        let frames = steps * m.config.expansion;
        if scores_len < frames {
            return Err(Invalid(format!("scores has room for {scores_len} values, need {frames}")).into());
        }
        non_null(scores, "scores")?;
        let seq = vsumm::data::FeatureSequence {
            id: String::new(),
            tensor,
            n: m.config.expansion,
            provenance: vsumm::data::Provenance::Synthetic,
        };
        let p = eval::score_frames(&seq, m)?;
        std::slice::from_raw_parts_mut(scores, frames).copy_from_slice(&p);
        Ok(())
    })
}

/// # Safety
/// `model` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn vsumm_model_free(model: *mut VsummModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Segments `frames` feature vectors of length `dim` with KTS and selects
/// key shots from `scores` within `budget * frames` frames.
///
/// # Safety
/// `scores` must hold `frames` values, `features` `frames * dim` values and
/// `out` must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn vsumm_summary_build(
    scores: *const f64,
    features: *const f64,
    frames: usize,
    dim: usize,
    budget: f64,
    max_segments_ratio: f64,
    penalty: f64,
    out: *mut *mut VsummSummary,
) -> VsummStatus {
    guard(|| {
        non_null(out, "out")?;
        if frames == 0 || dim == 0 {
            return Err(Invalid("frames and dim must be positive".into()).into());
        }
        let p = slice_arg(scores, frames, "scores")?;
        let f = slice_arg(features, frames * dim, "features")?;
        let rows: Vec<Vec<f64>> = f.chunks_exact(dim).map(<[f64]>::to_vec).collect();
        let kts = KtsParams {
            max_segments_ratio,
            penalty,
        };
        let summary = shots::build_summary(p, &rows, budget, &kts)?;
        *out = Box::into_raw(Box::new(VsummSummary { summary }));
        Ok(())
    })
}

/// Mask length in frames, or 0 for a null handle.
///
/// # Safety
/// `s` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn vsumm_summary_len(s: *const VsummSummary) -> usize {
    s.as_ref().map_or(0, |s| s.summary.mask.len())
}

/// Frames in the summary, or 0 for a null handle.
///
/// # Safety
/// `s` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn vsumm_summary_used(s: *const VsummSummary) -> usize {
    s.as_ref().map_or(0, |s| s.summary.used)
}

/// Writes the frame mask as 0/1 bytes.
///
/// # Safety
/// `s` must come from this library and `mask` have room for `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn vsumm_summary_mask(s: *const VsummSummary, mask: *mut u8, len: usize) -> VsummStatus {
    guard(|| {
        non_null(s, "summary")?;
        let m = &(*s).summary.mask;
        if len < m.len() {
            return Err(Invalid(format!("mask has room for {len} bytes, need {}", m.len())).into());
        }
        non_null(mask, "mask")?;
        let out = std::slice::from_raw_parts_mut(mask, m.len());
        for (o, &b) in out.iter_mut().zip(m) {
            *o = u8::from(b);
        }
        Ok(())
    })
}

/// # Safety
/// `s` must be null or come from this library, and not be used again.
#[no_mangle]
pub unsafe extern "C" fn vsumm_summary_free(s: *mut VsummSummary) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Overlap precision, recall and F1 of two 0/1 masks of length `len`.
///
/// # Safety
/// Both masks must hold `len` bytes; outputs must be valid for writes.
#[no_mangle]
pub unsafe extern "C" fn vsumm_f1(
    predicted: *const u8,
    reference: *const u8,
    len: usize,
    precision: *mut f64,
    recall: *mut f64,
    f1: *mut f64,
) -> VsummStatus {
    guard(|| {
        non_null(precision, "precision")?;
        non_null(recall, "recall")?;
        non_null(f1, "f1")?;
        let a: Vec<bool> = slice_arg(predicted, len, "predicted")?.iter().map(|&b| b != 0).collect();
        let b: Vec<bool> = slice_arg(reference, len, "reference")?.iter().map(|&b| b != 0).collect();
        let (p, r) = eval::precision_recall(&a, &b)?;
        *precision = p;
        *recall = r;
        *f1 = eval::f1(p, r);
        Ok(())
    })
}
