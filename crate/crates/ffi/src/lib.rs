//! C interface to lipmel inference: load a checkpoint, synthesize speech
//! from a video container or raw frames, read back the waveform, mel frames
//! and attention weights.
//!
//! Every fallible call returns a status code (`LIPMEL_OK` on success) and
//! writes its result through an out-pointer. After a failure,
//! [`lipmel_last_error`] describes it until the next failure on the same
//! thread. Handles are opaque and must be released with their `_free`
//! function; passing NULL to a `_free` function is a no-op.

#![allow(clippy::neg_cmp_op_on_partial_ord, clippy::unnecessary_cast)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use lipmel::data::{PreprocessConfig, VideoClip};
use lipmel::dsp::wav::write_wav;
use lipmel::model::{Model, StopReason};
use lipmel::pipeline::{synthesize_video, Synthesis};
use lipmel::train::load_for_inference;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;

// Status codes; 0 to 6 match the command-line exit statuses.
pub const LIPMEL_OK: i32 = 0;
pub const LIPMEL_ERR_FAILURE: i32 = 1;
pub const LIPMEL_ERR_CONFIG: i32 = 2;
pub const LIPMEL_ERR_IO: i32 = 3;
pub const LIPMEL_ERR_NON_FINITE: i32 = 4;
pub const LIPMEL_ERR_MAX_STEPS: i32 = 5;
pub const LIPMEL_ERR_GRADCHECK: i32 = 6;
/// A NULL pointer, non-UTF-8 path or inconsistent buffer size.
pub const LIPMEL_ERR_INVALID_ARGUMENT: i32 = 7;
/// The library panicked; the handle involved should be discarded.
pub const LIPMEL_ERR_PANIC: i32 = 8;

pub const LIPMEL_STOP_PERIOD_DETECTED: i32 = 0;
pub const LIPMEL_STOP_MAX_STEPS: i32 = 1;
pub const LIPMEL_STOP_TARGET_LENGTH: i32 = 2;

/// A loaded model with the preprocessing settings it was trained with.
pub struct LipmelModel {
    model: Model,
    data: PreprocessConfig,
}

/// The result of one synthesis call.
pub struct LipmelSynthesis {
    inner: Synthesis,
    alignments: Vec<f64>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(i32, String);

fn fail<E: Into<lipmel::Error>>(e: E) -> Failure {
    let e = e.into();
    Failure(e.exit_code(), e.to_string())
}

fn invalid(msg: &str) -> Failure {
    Failure(LIPMEL_ERR_INVALID_ARGUMENT, msg.to_string())
}

/// Runs `f`, storing its error message and converting panics.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> i32 {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => LIPMEL_OK,
        Ok(Err(Failure(code, msg))) => {
            set_error(msg);
            code
        }
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "unknown panic".into());
            set_error(format!("internal panic: {msg}"));
            LIPMEL_ERR_PANIC
        }
    }
}

unsafe fn path_arg(p: *const c_char, what: &str) -> Result<PathBuf, Failure> {
    if p.is_null() {
        return Err(invalid(&format!("{what} is NULL")));
    }
    CStr::from_ptr(p)
        .to_str()
        .map(PathBuf::from)
        .map_err(|_| invalid(&format!("{what} is not valid UTF-8")))
}

unsafe fn out_arg<'a, T>(p: *mut T) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| invalid("output pointer is NULL"))
}

unsafe fn handle<'a, T>(p: *const T) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| invalid("handle is NULL"))
}

fn finish(out: &mut *mut LipmelSynthesis, inner: Synthesis) {
    let alignments = inner
        .decoded
        .alignments
        .data()
        .iter()
        .map(|&v| v as f64)
        .collect();
    *out = Box::into_raw(Box::new(LipmelSynthesis { inner, alignments }));
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn lipmel_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message of the most recent failure on this thread, or NULL if none.
/// The pointer stays valid until the next failing call on this thread.
#[no_mangle]
pub extern "C" fn lipmel_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Loads a training checkpoint or a standalone model file.
///
/// # Safety
/// `path` must be NULL or a NUL-terminated string; `out` must be NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lipmel_model_load(path: *const c_char, out: *mut *mut LipmelModel) -> i32 {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let path = path_arg(path, "path")?;
        let (model, data) = load_for_inference(&path).map_err(fail)?;
        *out = Box::into_raw(Box::new(LipmelModel { model, data }));
        Ok(())
    })
}

/// # Safety
/// `model` must be NULL or a handle from [`lipmel_model_load`] not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lipmel_model_free(model: *mut LipmelModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Trainable parameter count, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lipmel_model_num_parameters(model: *const LipmelModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.num_parameters())
}

/// Expected frame side length in pixels, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lipmel_model_frame_size(model: *const LipmelModel) -> usize {
    model.as_ref().map_or(0, |m| m.model.config.frame_size)
}

/// Output waveform sample rate in Hz, or 0 for NULL.
///
/// # Safety
/// `model` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lipmel_model_sample_rate(model: *const LipmelModel) -> u32 {
    model.as_ref().map_or(0, |m| m.data.stft.sample_rate)
}

/// Synthesizes speech from a video container file. `gl_iters` of 0 uses
/// the default iteration count. Reaching the decoder step cap is not an
/// error; check [`lipmel_synthesis_stop_reason`].
///
/// # Safety
/// `model` must be a live handle, `video_path` a NUL-terminated string and
/// `out` writable.
#[no_mangle]
pub unsafe extern "C" fn lipmel_synthesize_file(
    model: *const LipmelModel,
    video_path: *const c_char,
    fps: f64,
    gl_iters: usize,
    seed: u64,
    out: *mut *mut LipmelSynthesis,
) -> i32 {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let m = handle(model)?;
        let path = path_arg(video_path, "video_path")?;
        if !(fps > 0.0) {
            return Err(invalid("fps must be positive"));
        }
        let video = VideoClip::load(&path, fps).map_err(fail)?;
        run_synthesis(m, &video, gl_iters, seed, out)
    })
}

/// Synthesizes speech from raw 8-bit frames laid out as
/// `frames × height × width × channels`. The frames are cropped faces
/// without the end marker, which is appended internally.
///
/// # Safety
/// `model` must be a live handle, `pixels` must point to `len` readable
/// bytes and `out` must be writable.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn lipmel_synthesize_frames(
    model: *const LipmelModel,
    pixels: *const u8,
    len: usize,
    frames: usize,
    height: usize,
    width: usize,
    channels: usize,
    fps: f64,
    gl_iters: usize,
    seed: u64,
    out: *mut *mut LipmelSynthesis,
) -> i32 {
    guard(|| {
        let out = out_arg(out)?;
        *out = ptr::null_mut();
        let m = handle(model)?;
        if pixels.is_null() {
            return Err(invalid("pixels is NULL"));
        }
        if !(fps > 0.0) {
            return Err(invalid("fps must be positive"));
        }
        let expected = frames
            .checked_mul(height)
            .and_then(|v| v.checked_mul(width))
            .and_then(|v| v.checked_mul(channels));
        if expected != Some(len) {
            return Err(invalid(
                "len does not match frames × height × width × channels",
            ));
        }
        let data = std::slice::from_raw_parts(pixels, len).to_vec();
        let video = VideoClip::new(frames, height, width, channels, data, fps).map_err(fail)?;
        run_synthesis(m, &video, gl_iters, seed, out)
    })
}

fn run_synthesis(
    m: &LipmelModel,
    video: &VideoClip,
    gl_iters: usize,
    seed: u64,
    out: &mut *mut LipmelSynthesis,
) -> Result<(), Failure> {
    let iters = if gl_iters == 0 {
        lipmel::dsp::DEFAULT_GL_ITERS
    } else {
        gl_iters
    };
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let s = synthesize_video(&m.model, video, &m.data, iters, &mut rng).map_err(fail)?;
    finish(out, s);
    Ok(())
}

/// # Safety
/// `s` must be NULL or a synthesis handle not yet freed.
#[no_mangle]
pub unsafe extern "C" fn lipmel_synthesis_free(s: *mut LipmelSynthesis) {
    if !s.is_null() {
        drop(Box::from_raw(s));
    }
}

/// Waveform samples in `[-1, 1]`; the count goes to `len`. Valid while the
/// handle lives. NULL for a NULL handle.
///
/// # Safety
/// `s` must be NULL or a live handle; `len` must be NULL or writable.
#[no_mangle]
pub unsafe extern "C" fn lipmel_synthesis_samples(
    s: *const LipmelSynthesis,
    len: *mut usize,
) -> *const f64 {
    let Some(s) = s.as_ref() else {
        return ptr::null();
    };
    if let Some(l) = len.as_mut() {
        *l = s.inner.audio.len();
    }
    s.inner.audio.samples.as_ptr()
}

/// # Safety
/// `s` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lipmel_synthesis_sample_rate(s: *const LipmelSynthesis) -> u32 {
    s.as_ref().map_or(0, |s| s.inner.audio.sample_rate)
}

/// Row-major log-mel frames, `frames × channels`.
///
/// # Safety
/// `s` must be NULL or a live handle; `frames` and `channels` must be NULL
/// or writable.
#[no_mangle]
pub unsafe extern "C" fn lipmel_synthesis_mel(
    s: *const LipmelSynthesis,
    frames: *mut usize,
    channels: *mut usize,
) -> *const f64 {
    let Some(s) = s.as_ref() else {
        return ptr::null();
    };
    if let Some(f) = frames.as_mut() {
        *f = s.inner.mel.frames;
    }
    if let Some(c) = channels.as_mut() {
        *c = s.inner.mel.channels;
    }
    s.inner.mel.data.as_ptr()
}

/// Row-major attention weights, one row per decoder step and one column
/// per encoder position (video frames plus the end marker).
///
/// # Safety
/// `s` must be NULL or a live handle; `rows` and `cols` must be NULL or
/// writable.
#[no_mangle]
pub unsafe extern "C" fn lipmel_synthesis_alignments(
    s: *const LipmelSynthesis,
    rows: *mut usize,
    cols: *mut usize,
) -> *const f64 {
    let Some(s) = s.as_ref() else {
        return ptr::null();
    };
    let shape = s.inner.decoded.alignments.shape();
    if let Some(r) = rows.as_mut() {
        *r = shape[0];
    }
    if let Some(c) = cols.as_mut() {
        *c = shape[1];
    }
    s.alignments.as_ptr()
}

/// One of the `LIPMEL_STOP_*` values, or -1 for NULL.
///
/// # Safety
/// `s` must be NULL or a live handle.
#[no_mangle]
pub unsafe extern "C" fn lipmel_synthesis_stop_reason(s: *const LipmelSynthesis) -> i32 {
    match s.as_ref().map(|s| s.inner.decoded.stop_reason) {
        Some(StopReason::PeriodDetected) => LIPMEL_STOP_PERIOD_DETECTED,
        Some(StopReason::MaxSteps) => LIPMEL_STOP_MAX_STEPS,
        Some(StopReason::TargetLength) => LIPMEL_STOP_TARGET_LENGTH,
        None => -1,
    }
}

/// Writes the waveform as 16-bit mono PCM.
///
/// # Safety
/// `s` must be a live handle and `path` a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn lipmel_synthesis_write_wav(
    s: *const LipmelSynthesis,
    path: *const c_char,
) -> i32 {
    guard(|| {
        let s = handle(s)?;
        let path = path_arg(path, "path")?;
        write_wav(&path, &s.inner.audio)
            .map_err(|e| Failure(LIPMEL_ERR_IO, format!("{}: {e}", path.display())))
    })
}
