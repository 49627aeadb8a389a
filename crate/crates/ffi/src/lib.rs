//! C ABI over the workbench: checkpoints, inference and the experiment
//! pipeline.
//!
//! Every fallible function returns an [`SslwbStatus`]; on failure the
//! message is available from [`sslwb_last_error`] on the same thread.
//! Handles are opaque and must be released with their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::{Path, PathBuf};
use std::ptr;

use sslwb::augment::{make_eval_view, AugmentationPolicy};
use sslwb::cli::{run_pipeline, ExperimentConfig};
use sslwb::dataset::Image;
use sslwb::engine::{load_checkpoint, save_checkpoint, Checkpoint, Method};
use sslwb::evaluation::{accuracy_from_confusion, embed_batches, predict_batches, ConfusionMatrix};
use sslwb::models::{Batch, HeadKind, Model};
use sslwb::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SslwbStatus {
    Ok = 0,
    InvalidArgument = 1,
    Shape = 2,
    Parse = 3,
    Unsupported = 4,
    NonFinite = 5,
    Corrupt = 6,
    VersionMismatch = 7,
    ConfigMismatch = 8,
    Io = 9,
    Image = 10,
    NullPointer = 11,
    Panic = 12,
}

impl From<&Error> for SslwbStatus {
    fn from(e: &Error) -> Self {
        match e {
            Error::InvalidArgument(_) => Self::InvalidArgument,
            Error::Shape(_) => Self::Shape,
            Error::Parse { .. } => Self::Parse,
            Error::Unsupported(_) => Self::Unsupported,
            Error::NonFinite(_) => Self::NonFinite,
            Error::Corrupt { .. } => Self::Corrupt,
            Error::VersionMismatch { .. } => Self::VersionMismatch,
            Error::ConfigMismatch => Self::ConfigMismatch,
            Error::Io { .. } => Self::Io,
            Error::Image { .. } => Self::Image,
        }
    }
}

/// A loaded checkpoint archive.
pub struct SslwbCheckpoint {
    inner: Checkpoint,
}

/// A model ready for inference.
pub struct SslwbModel {
    inner: Model,
    policy: AugmentationPolicy,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

enum Failure {
    Null(&'static str),
    Lib(Error),
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure::Lib(e)
    }
}

/// Runs `f`, converting errors and panics into a status code.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> SslwbStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SslwbStatus::Ok,
        Ok(Err(Failure::Null(what))) => {
            set_error(format!("null pointer: {what}"));
            SslwbStatus::NullPointer
        }
        Ok(Err(Failure::Lib(e))) => {
            set_error(e.to_string());
            SslwbStatus::from(&e)
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| p.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            SslwbStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &'static str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(Failure::Null(what));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Error::invalid(format!("{what} is not valid UTF-8")))?;
    Ok(PathBuf::from(s))
}

unsafe fn deref<'a, T>(p: *const T, what: &'static str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or(Failure::Null(what))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn sslwb_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the last failure on this thread, or NULL. Valid until the
/// next call into the library from this thread.
#[no_mangle]
pub extern "C" fn sslwb_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn sslwb_checkpoint_load(path: *const c_char, out: *mut *mut SslwbCheckpoint) -> SslwbStatus {
    guard(|| {
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let ck = load_checkpoint(&path_arg(path, "path")?)?;
        *out = Box::into_raw(Box::new(SslwbCheckpoint { inner: ck }));
        Ok(())
    })
}

/// # Safety
/// `ckpt` must come from [`sslwb_checkpoint_load`]; `path` must be a
/// NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn sslwb_checkpoint_save(ckpt: *const SslwbCheckpoint, path: *const c_char) -> SslwbStatus {
    guard(|| {
        let ck = deref(ckpt, "ckpt")?;
        save_checkpoint(&ck.inner, &path_arg(path, "path")?)?;
        Ok(())
    })
}

/// Completed pretraining epochs.
///
/// # Safety
/// `ckpt` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sslwb_checkpoint_epoch(ckpt: *const SslwbCheckpoint, out: *mut u64) -> SslwbStatus {
    guard(|| {
        let ck = deref(ckpt, "ckpt")?;
        *out.as_mut().ok_or(Failure::Null("out"))? = ck.inner.epoch as u64;
        Ok(())
    })
}

fn method_cstr(m: Method) -> &'static CStr {
    match m {
        Method::Simclr => c"simclr",
        Method::Dino => c"dino",
        Method::Mae => c"mae",
        Method::Deepcluster => c"deepcluster",
        Method::Mixed => c"mixed",
        Method::Supervised => c"supervised",
        Method::None => c"none",
    }
}

/// Pretraining method of the checkpoint as a static string, or NULL for a
/// null handle.
///
/// # Safety
/// `ckpt` must be a live handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn sslwb_checkpoint_method(ckpt: *const SslwbCheckpoint) -> *const c_char {
    ckpt.as_ref().map_or(ptr::null(), |c| method_cstr(c.inner.method).as_ptr())
}

/// # Safety
/// `ckpt` must come from [`sslwb_checkpoint_load`] and not be used after.
#[no_mangle]
pub unsafe extern "C" fn sslwb_checkpoint_free(ckpt: *mut SslwbCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Student model of a checkpoint; the checkpoint stays valid.
///
/// # Safety
/// `ckpt` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sslwb_model_from_checkpoint(ckpt: *const SslwbCheckpoint, out: *mut *mut SslwbModel) -> SslwbStatus {
    guard(|| {
        let ck = deref(ckpt, "ckpt")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let model = ck.inner.model();
        let policy = AugmentationPolicy {
            global_size: model.encoder.input_size,
            ..AugmentationPolicy::default()
        };
        *out = Box::into_raw(Box::new(SslwbModel { inner: model, policy }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from [`sslwb_model_from_checkpoint`] and not be used
/// after.
#[no_mangle]
pub unsafe extern "C" fn sslwb_model_free(model: *mut SslwbModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sslwb_model_embed_dim(model: *const SslwbModel, out: *mut u64) -> SslwbStatus {
    guard(|| {
        let m = deref(model, "model")?;
        *out.as_mut().ok_or(Failure::Null("out"))? = m.inner.encoder.embed_dim() as u64;
        Ok(())
    })
}

/// Output count of the classification head, 0 when there is none.
///
/// # Safety
/// `model` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn sslwb_model_num_classes(model: *const SslwbModel, out: *mut u64) -> SslwbStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let c = m
            .inner
            .heads
            .iter()
            .rev()
            .find(|h| h.kind == HeadKind::Classification)
            .map_or(0, |h| h.output_dim);
        *out.as_mut().ok_or(Failure::Null("out"))? = c as u64;
        Ok(())
    })
}

unsafe fn batches(
    m: &SslwbModel,
    pixels: *const f32,
    count: usize,
    width: usize,
    height: usize,
) -> Result<Vec<Batch>, Failure> {
    if pixels.is_null() {
        return Err(Failure::Null("pixels"));
    }
    let per = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(3))
        .ok_or_else(|| Error::invalid("image dimensions overflow"))?;
    let all = std::slice::from_raw_parts(pixels, per * count);
    let views = all
        .chunks_exact(per.max(1))
        .take(count)
        .map(|px| make_eval_view(&Image::new(width, height, px.to_vec())?, &m.policy))
        .collect::<sslwb::Result<Vec<_>>>()?;
    Ok(views.chunks(256).map(Batch::from_views).collect::<sslwb::Result<Vec<_>>>()?)
}

/// Backbone embeddings of `count` RGB images (HWC, values in [0, 1]).
/// `out` receives `count × embed_dim` floats and `out_len` must be at
/// least that.
///
/// # Safety
/// `pixels` must hold `count × height × width × 3` floats and `out`
/// `out_len` floats.
#[no_mangle]
pub unsafe extern "C" fn sslwb_model_embed(
    model: *const SslwbModel,
    pixels: *const f32,
    count: usize,
    width: usize,
    height: usize,
    out: *mut f32,
    out_len: usize,
) -> SslwbStatus {
    guard(|| {
        let m = deref(model, "model")?;
        let need = count * m.inner.encoder.embed_dim();
        if out_len < need {
            return Err(Error::invalid(format!("output holds {out_len} floats, {need} needed")).into());
        }
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let emb = embed_batches(&m.inner, &batches(m, pixels, count, width, height)?)?;
        std::slice::from_raw_parts_mut(out, need).copy_from_slice(&emb);
        Ok(())
    })
}

/// Predicted class index per image.
///
/// # Safety
/// `pixels` must hold `count × height × width × 3` floats and `out`
/// `count` integers.
#[no_mangle]
pub unsafe extern "C" fn sslwb_model_predict(
    model: *const SslwbModel,
    pixels: *const f32,
    count: usize,
    width: usize,
    height: usize,
    out: *mut u32,
) -> SslwbStatus {
    guard(|| {
        let m = deref(model, "model")?;
        if out.is_null() {
            return Err(Failure::Null("out"));
        }
        let pred = predict_batches(&m.inner, &batches(m, pixels, count, width, height)?)?;
        let dst = std::slice::from_raw_parts_mut(out, count);
        for (d, p) in dst.iter_mut().zip(pred) {
            *d = p as u32;
        }
        Ok(())
    })
}

/// Accuracy (trace / total) of a row-major `classes × classes` count
/// matrix with rows indexed by the true class.
///
/// # Safety
/// `counts` must hold `classes²` integers and `out` be writable.
#[no_mangle]
pub unsafe extern "C" fn sslwb_confusion_accuracy(counts: *const u64, classes: usize, out: *mut f64) -> SslwbStatus {
    guard(|| {
        if counts.is_null() {
            return Err(Failure::Null("counts"));
        }
        let cells = std::slice::from_raw_parts(counts, classes * classes);
        let rows: Vec<Vec<u64>> = cells.chunks(classes.max(1)).map(<[u64]>::to_vec).collect();
        let names = (0..classes).map(|i| i.to_string()).collect();
        let m = ConfusionMatrix::from_counts(names, &rows)?;
        *out.as_mut().ok_or(Failure::Null("out"))? = accuracy_from_confusion(&m)?;
        Ok(())
    })
}

/// Runs pretrain, finetune and evaluate for an experiment config, writing
/// artifacts under `out_dir`, and stores the best-on-val test accuracy.
///
/// # Safety
/// `config_path` and `out_dir` must be NUL-terminated strings; `accuracy`
/// may be NULL.
#[no_mangle]
pub unsafe extern "C" fn sslwb_run_experiment(
    config_path: *const c_char,
    out_dir: *const c_char,
    accuracy: *mut f64,
) -> SslwbStatus {
    guard(|| {
        let path = path_arg(config_path, "config_path")?;
        let out = path_arg(out_dir, "out_dir")?;
        let cfg = ExperimentConfig::load(&path)?;
        let base = path.parent().unwrap_or(Path::new(""));
        let rec = run_pipeline(&cfg, base, &out)?;
        if let Some(a) = accuracy.as_mut() {
            *a = rec.test_accuracy;
        }
        Ok(())
    })
}
