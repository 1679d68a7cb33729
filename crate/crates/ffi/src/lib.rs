//! C interface to the canfuse pipeline.
//!
//! Datasets and models are opaque handles owned by the caller and released
//! with the matching `_free` function. Every fallible call returns a
//! [`CanfuseStatus`]; on failure `canfuse_last_error` describes the cause
//! for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::fs::File;
use std::io::BufReader;
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use canfuse::experiment::{self, ExperimentError, SynthConfig};
use canfuse::fusionmodel::{FusedModel, ModelError, CAN_DIM, CHANNELS, INPUT_H, INPUT_W};
use canfuse::neuralnet;
use canfuse::sync::SyncedSample;
use canfuse::videostream::Image;

/// Result of every fallible call.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CanfuseStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Model = 5,
    Data = 6,
    Panic = 7,
}

/// A loaded or generated set of synchronized samples.
pub struct CanfuseDataset {
    samples: Vec<SyncedSample>,
}

/// A trained steering model.
pub struct CanfuseModel {
    model: FusedModel,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).unwrap_or_default());
}

struct Failure(CanfuseStatus, String);

impl Failure {
    fn null(what: &str) -> Self {
        Failure(CanfuseStatus::NullPointer, format!("{what} is null"))
    }

    fn arg(msg: impl Into<String>) -> Self {
        Failure(CanfuseStatus::InvalidArgument, msg.into())
    }
}

impl From<ExperimentError> for Failure {
    fn from(e: ExperimentError) -> Self {
        let status = match &e {
            ExperimentError::Io { .. } | ExperimentError::Stream(_) => CanfuseStatus::Io,
            ExperimentError::BadMagic | ExperimentError::TruncatedFile | ExperimentError::VersionMismatch(_) => {
                CanfuseStatus::Format
            }
            ExperimentError::Model(_) | ExperimentError::VariantMismatch { .. } => CanfuseStatus::Model,
            ExperimentError::InvalidConfig(_) | ExperimentError::BadGroupCount(_) => CanfuseStatus::InvalidArgument,
            _ => CanfuseStatus::Data,
        };
        Failure(status, e.to_string())
    }
}

impl From<ModelError> for Failure {
    fn from(e: ModelError) -> Self {
        let status = match &e {
            ModelError::Io(_) => CanfuseStatus::Io,
            ModelError::BadHeader(_) => CanfuseStatus::Format,
            _ => CanfuseStatus::Model,
        };
        Failure(status, e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CanfuseStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CanfuseStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CanfuseStatus::Panic
        }
    }
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, Failure> {
    if path.is_null() {
        return Err(Failure::null("path"));
    }
    let s = CStr::from_ptr(path).to_str().map_err(|_| Failure::arg("path is not UTF-8"))?;
    Ok(PathBuf::from(s))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(Failure::null(what));
    }
    Ok(std::slice::from_raw_parts(p, len))
}

unsafe fn store<T>(out: *mut *mut T, value: T) {
    *out = Box::into_raw(Box::new(value));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn canfuse_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message for the last failed call on this thread; empty after a success.
/// Valid until the next canfuse call on the same thread.
#[no_mangle]
pub extern "C" fn canfuse_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Image geometry expected by models: height, width, channels, CAN features.
#[no_mangle]
pub unsafe extern "C" fn canfuse_input_geometry(
    height: *mut usize,
    width: *mut usize,
    channels: *mut usize,
    can_dim: *mut usize,
) -> CanfuseStatus {
    guard(|| {
        for (p, v) in [(height, INPUT_H), (width, INPUT_W), (channels, CHANNELS), (can_dim, CAN_DIM)] {
            if !p.is_null() {
                *p = v;
            }
        }
        Ok(())
    })
}

/// Reads a `.cfz` dataset file.
#[no_mangle]
pub unsafe extern "C" fn canfuse_dataset_load(path: *const c_char, out: *mut *mut CanfuseDataset) -> CanfuseStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        *out = ptr::null_mut();
        let samples = experiment::load_dataset_file(&path_arg(path)?)?;
        store(out, CanfuseDataset { samples });
        Ok(())
    })
}

/// Generates the default five-group synthetic dataset.
#[no_mangle]
pub unsafe extern "C" fn canfuse_dataset_synth(
    seed: u64,
    n_per_group: usize,
    out: *mut *mut CanfuseDataset,
) -> CanfuseStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        *out = ptr::null_mut();
        let samples = experiment::generate_synthetic(&SynthConfig::new(seed, n_per_group))?;
        store(out, CanfuseDataset { samples });
        Ok(())
    })
}

/// Writes a dataset to a `.cfz` file.
#[no_mangle]
pub unsafe extern "C" fn canfuse_dataset_save(dataset: *const CanfuseDataset, path: *const c_char) -> CanfuseStatus {
    guard(|| {
        let ds = dataset.as_ref().ok_or_else(|| Failure::null("dataset"))?;
        experiment::save_dataset_file(&ds.samples, &path_arg(path)?)?;
        Ok(())
    })
}

/// Number of samples; 0 for a null handle.
#[no_mangle]
pub unsafe extern "C" fn canfuse_dataset_len(dataset: *const CanfuseDataset) -> usize {
    dataset.as_ref().map_or(0, |d| d.samples.len())
}

#[no_mangle]
pub unsafe extern "C" fn canfuse_dataset_free(dataset: *mut CanfuseDataset) {
    if !dataset.is_null() {
        drop(Box::from_raw(dataset));
    }
}

/// Reads a checkpoint written by `canfuse train`.
#[no_mangle]
pub unsafe extern "C" fn canfuse_model_load(path: *const c_char, out: *mut *mut CanfuseModel) -> CanfuseStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        *out = ptr::null_mut();
        let path = path_arg(path)?;
        let file = File::open(&path).map_err(|e| Failure(CanfuseStatus::Io, format!("{}: {e}", path.display())))?;
        let (model, _) = FusedModel::load(BufReader::new(file))?;
        store(out, CanfuseModel { model });
        Ok(())
    })
}

/// 1 if the model takes CAN features, 0 otherwise or for a null handle.
#[no_mangle]
pub unsafe extern "C" fn canfuse_model_uses_can(model: *const CanfuseModel) -> i32 {
    model.as_ref().map_or(0, |m| m.model.variant().uses_can() as i32)
}

#[no_mangle]
pub unsafe extern "C" fn canfuse_model_free(model: *mut CanfuseModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Predicts one steering angle. `pixels` is a height×width×channels image in
/// row-major HWC order with values in [0, 1]; `can` holds the CAN features
/// and must be null (with `can_len` 0) for a vision-only model.
#[no_mangle]
pub unsafe extern "C" fn canfuse_model_predict(
    model: *const CanfuseModel,
    pixels: *const f64,
    pixels_len: usize,
    can: *const f64,
    can_len: usize,
    out: *mut f64,
) -> CanfuseStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Failure::null("model"))?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let pixels = slice_arg(pixels, pixels_len, "pixels")?;
        if pixels.len() != INPUT_H * INPUT_W * CHANNELS {
            return Err(Failure::arg(format!(
                "expected {} pixel values, got {}",
                INPUT_H * INPUT_W * CHANNELS,
                pixels.len()
            )));
        }
        let can = if can.is_null() && can_len == 0 { None } else { Some(slice_arg(can, can_len, "can")?) };
        let image = Image::new(INPUT_H, INPUT_W, CHANNELS, pixels.to_vec());
        *out = m.model.predict(&image, can)?;
        Ok(())
    })
}

/// RMSE of the model over every sample of the dataset.
#[no_mangle]
pub unsafe extern "C" fn canfuse_model_evaluate(
    model: *const CanfuseModel,
    dataset: *const CanfuseDataset,
    out: *mut f64,
) -> CanfuseStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| Failure::null("model"))?;
        let ds = dataset.as_ref().ok_or_else(|| Failure::null("dataset"))?;
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let refs: Vec<&SyncedSample> = ds.samples.iter().collect();
        *out = experiment::evaluate(&m.model, &refs)?;
        Ok(())
    })
}

/// Root mean square error between two arrays of length `n`.
#[no_mangle]
pub unsafe extern "C" fn canfuse_rmse(pred: *const f64, target: *const f64, n: usize, out: *mut f64) -> CanfuseStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::null("out"));
        }
        let p = slice_arg(pred, n, "pred")?;
        let t = slice_arg(target, n, "target")?;
        *out = neuralnet::rmse(p, t).map_err(|e| Failure::arg(e.to_string()))?;
        Ok(())
    })
}
