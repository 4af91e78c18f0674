//! C ABI over the context-maps forecaster.
//!
//! Every fallible function returns a [`CmStatus`]; on failure the message is
//! available from [`cm_last_error`] on the same thread. Trajectories are
//! passed as row-major `double` arrays of `(x, y)` pixel pairs.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use context_maps::data::TrajectorySample;
use context_maps::eval::{self, KalmanConfig};
use context_maps::nets::Batch;
use context_maps::train::Checkpoint;
use context_maps::{Error, Tensor};
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum CmStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    Shape = 5,
    MissingMap = 6,
    Panic = 7,
    Internal = 8,
}

/// A loaded checkpoint: model parameters plus per-scene maps.
pub struct CmModel {
    checkpoint: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<String>) {
    let msg = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(msg).expect("nul bytes removed"));
}

fn status_of(e: &Error) -> CmStatus {
    match e {
        Error::Io(_) => CmStatus::Io,
        Error::Archive(_) | Error::Parse { .. } | Error::Image(_) => CmStatus::Format,
        Error::Shape(_) => CmStatus::Shape,
        Error::MissingMap(_) => CmStatus::MissingMap,
        Error::Config(_) | Error::Validation(_) | Error::Empty(_) => CmStatus::InvalidArgument,
        _ => CmStatus::Internal,
    }
}

struct Failure(CmStatus, String);

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Failure {
    Failure(CmStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Failure>) -> CmStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CmStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("panic: {msg}"));
            CmStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Failure(CmStatus::InvalidArgument, format!("{what} is not UTF-8")))
}

unsafe fn slice_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a>(p: *mut f64, len: usize, what: &str) -> Result<&'a mut [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts_mut(p, len))
}

fn points(flat: &[f64]) -> Vec<[f64; 2]> {
    flat.chunks_exact(2).map(|c| [c[0], c[1]]).collect()
}

/// Message of the last failed call on this thread, or an empty string. The
/// pointer stays valid until the next call into this library on the thread.
#[no_mangle]
pub extern "C" fn cm_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn cm_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a training checkpoint.
///
/// # Safety
/// `path` must be a valid NUL-terminated string and `out` a valid pointer.
/// The handle written to `*out` must be released with [`cm_model_free`].
#[no_mangle]
pub unsafe extern "C" fn cm_model_load(path: *const c_char, out: *mut *mut CmModel) -> CmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = str_arg(path, "path")?;
        let checkpoint = Checkpoint::load(Path::new(path))?;
        *out = Box::into_raw(Box::new(CmModel { checkpoint }));
        Ok(())
    })
}

/// Releases a model; null is ignored.
///
/// # Safety
/// `model` must come from [`cm_model_load`] and not have been freed.
#[no_mangle]
pub unsafe extern "C" fn cm_model_free(model: *mut CmModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Observation and prediction lengths the model was trained with.
///
/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn cm_model_lengths(model: *const CmModel, obs_len: *mut usize, pred_len: *mut usize) -> CmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if obs_len.is_null() || pred_len.is_null() {
            return Err(null("output"));
        }
        *obs_len = m.checkpoint.model.cfg.obs_len;
        *pred_len = m.checkpoint.model.cfg.pred_len;
        Ok(())
    })
}

/// Predicts `pred_len` future positions for `n_agents` agents observed
/// together in scene `scene_id`.
///
/// `observed` holds `n_agents * obs_len * 2` values and `out` receives
/// `n_agents * pred_len * 2`. `seed` fixes the generator noise.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cm_model_predict(
    model: *const CmModel,
    scene_id: *const c_char,
    observed: *const f64,
    n_agents: usize,
    seed: u64,
    out: *mut f64,
) -> CmStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let scene = str_arg(scene_id, "scene_id")?;
        if n_agents == 0 {
            return Err(Failure(CmStatus::InvalidArgument, "n_agents must be positive".into()));
        }
        let cfg = &m.checkpoint.model.cfg;
        let (o, p) = (cfg.obs_len, cfg.pred_len);
        let obs = slice_arg(observed, n_agents * o * 2, "observed")?;
        let out = out_arg(out, n_agents * p * 2, "out")?;
        if obs.iter().any(|v| !v.is_finite()) {
            return Err(Failure(CmStatus::InvalidArgument, "observed positions must be finite".into()));
        }
        let samples = (0..n_agents)
            .map(|i| TrajectorySample {
                scene_id: scene.to_string(),
                agent_id: i as i64,
                start_frame: 0,
                observed: points(&obs[i * o * 2..(i + 1) * o * 2]),
                future: vec![[0.0; 2]; p],
            })
            .collect();
        #[allow(clippy::single_range_in_vec_init)]
        let groups = vec![0..n_agents];
        let batch = Batch::new(samples, groups)?;
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        let pred = eval::predict_batch(&m.checkpoint.model, &m.checkpoint.maps, &batch, &mut rng)?;
        out.copy_from_slice(pred.data());
        Ok(())
    })
}

/// Constant-acceleration Kalman rollout of one trajectory. `observed` holds
/// `obs_len * 2` values (at least 3 positions), `out` receives `steps * 2`.
/// `fallback`, if non-null, is set to 1 when constant-velocity extrapolation
/// replaced a failed fit.
///
/// # Safety
/// Pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn cm_kalman_predict(
    observed: *const f64,
    obs_len: usize,
    steps: usize,
    out: *mut f64,
    fallback: *mut i32,
) -> CmStatus {
    guard(|| {
        let obs = slice_arg(observed, obs_len * 2, "observed")?;
        let out = out_arg(out, steps * 2, "out")?;
        let pred = eval::kalman_predict(&points(obs), steps, &KalmanConfig::default())?;
        for (dst, src) in out.chunks_exact_mut(2).zip(&pred.positions) {
            dst.copy_from_slice(src);
        }
        if !fallback.is_null() {
            *fallback = pred.fallback as i32;
        }
        Ok(())
    })
}

unsafe fn metric(
    pred: *const f64,
    truth: *const f64,
    n: usize,
    steps: usize,
    out: *mut f64,
    f: fn(&Tensor, &Tensor) -> context_maps::Result<f64>,
) -> CmStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let len = n * steps * 2;
        let shape = [n, steps, 2];
        let a = Tensor::from_vec(&shape, slice_arg(pred, len, "pred")?.to_vec())?;
        let b = Tensor::from_vec(&shape, slice_arg(truth, len, "truth")?.to_vec())?;
        *out = f(&a, &b)?;
        Ok(())
    })
}

/// Average displacement error over `n` trajectories of `steps` positions.
///
/// # Safety
/// `pred` and `truth` must hold `n * steps * 2` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn cm_ade(pred: *const f64, truth: *const f64, n: usize, steps: usize, out: *mut f64) -> CmStatus {
    metric(pred, truth, n, steps, out, eval::ade)
}

/// Final displacement error over `n` trajectories of `steps` positions.
///
/// # Safety
/// As for [`cm_ade`].
#[no_mangle]
pub unsafe extern "C" fn cm_fde(pred: *const f64, truth: *const f64, n: usize, steps: usize, out: *mut f64) -> CmStatus {
    metric(pred, truth, n, steps, out, eval::fde)
}
