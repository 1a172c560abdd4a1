//! C ABI over `hif-core`: block-matching motion extraction and a
//! streaming policy handle loaded from a checkpoint.
//!
//! Every function returns a [`HifStatus`]; on failure a description is
//! available from [`hif_last_error`] on the same thread. Panics never cross
//! the boundary.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use hif_core::checkpoint;
use hif_core::motion::{estimate_motion_field, Frame, SearchMethod, SearchParams, MACROBLOCK};
use hif_core::policy::StreamingPolicy;
use hif_core::Error;

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HifStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    BufferTooSmall = 3,
    Frame = 4,
    Config = 5,
    Checkpoint = 6,
    Numeric = 7,
    Io = 8,
    Panic = 9,
}

#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum HifSearchMethod {
    Exhaustive = 0,
    Diamond = 1,
}

/// Streaming policy; create with `hif_policy_load`, release with
/// `hif_policy_free`.
pub struct HifPolicy {
    inner: StreamingPolicy<f32>,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let s = msg.into().replace('\0', " ");
    LAST_ERROR.with(|e| *e.borrow_mut() = CString::new(s).ok());
}

fn status_of(e: &Error) -> HifStatus {
    match e {
        Error::Frame(_) | Error::BlockOutside { .. } => HifStatus::Frame,
        Error::Checkpoint(_) | Error::Format(_) => HifStatus::Checkpoint,
        Error::NonFiniteLoss { .. } | Error::NonFiniteGradient { .. } | Error::GradCheckFailed { .. } => {
            HifStatus::Numeric
        }
        Error::Io(_) => HifStatus::Io,
        _ => HifStatus::Config,
    }
}

struct Fail(HifStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> HifStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => HifStatus::Ok,
        Ok(Err(Fail(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            HifStatus::Panic
        }
    }
}

fn null(what: &str) -> Fail {
    Fail(HifStatus::NullPointer, format!("{what} is null"))
}

/// Message for the last failed call on this thread, or NULL. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn hif_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Macroblock grid of a `width x height` frame.
#[no_mangle]
pub unsafe extern "C" fn hif_motion_grid(width: usize, height: usize, rows: *mut usize, cols: *mut usize) -> HifStatus {
    guard(|| {
        if rows.is_null() || cols.is_null() {
            return Err(null("rows/cols"));
        }
        *rows = height / MACROBLOCK;
        *cols = width / MACROBLOCK;
        Ok(())
    })
}

unsafe fn frame_from(pixels: *const u8, width: usize, height: usize, channels: usize) -> Result<Frame, Fail> {
    if pixels.is_null() {
        return Err(null("pixels"));
    }
    let len = width
        .checked_mul(height)
        .and_then(|n| n.checked_mul(channels))
        .ok_or_else(|| Fail(HifStatus::InvalidArgument, "frame size overflows".into()))?;
    let data = std::slice::from_raw_parts(pixels, len).to_vec();
    Ok(Frame::new(width, height, channels, data)?)
}

/// Motion field between two interleaved 8-bit frames of identical
/// geometry. Writes `rows * cols` `(dx, dy)` pairs in row-major block
/// order to `out`, which must hold `out_len >= 2 * rows * cols` values.
#[no_mangle]
pub unsafe extern "C" fn hif_estimate_motion(
    prev: *const u8,
    cur: *const u8,
    width: usize,
    height: usize,
    channels: usize,
    search_range: i32,
    method: HifSearchMethod,
    out: *mut i32,
    out_len: usize,
) -> HifStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        let a = frame_from(prev, width, height, channels)?;
        let b = frame_from(cur, width, height, channels)?;
        let params = SearchParams {
            search_range,
            method: match method {
                HifSearchMethod::Exhaustive => SearchMethod::Exhaustive,
                HifSearchMethod::Diamond => SearchMethod::Diamond,
            },
        };
        let field = estimate_motion_field(&a, &b, &params)?;
        let need = field.rows() * field.cols() * 2;
        if out_len < need {
            return Err(Fail(
                HifStatus::BufferTooSmall,
                format!("output holds {out_len} values, field needs {need}"),
            ));
        }
        let out = std::slice::from_raw_parts_mut(out, need);
        for (slot, mv) in out.chunks_exact_mut(2).zip(field.vectors()) {
            slot[0] = mv.dx;
            slot[1] = mv.dy;
        }
        Ok(())
    })
}

/// Loads a checkpoint and wraps it as a streaming policy for `task_id`.
/// Motion is extracted with the diamond search at the checkpoint's range.
#[no_mangle]
pub unsafe extern "C" fn hif_policy_load(path: *const c_char, task_id: usize, out: *mut *mut HifPolicy) -> HifStatus {
    guard(|| {
        if path.is_null() {
            return Err(null("path"));
        }
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let path = CStr::from_ptr(path)
            .to_str()
            .map_err(|_| Fail(HifStatus::InvalidArgument, "path is not UTF-8".into()))?;
        let ckpt = checkpoint::load::<f32>(path)?;
        let range = ckpt.model.config.search_range;
        let inner = StreamingPolicy::new(ckpt.model, task_id, SearchParams::diamond(range))?;
        *out = Box::into_raw(Box::new(HifPolicy { inner }));
        Ok(())
    })
}

/// Releases a policy; NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn hif_policy_free(policy: *mut HifPolicy) {
    if !policy.is_null() {
        drop(Box::from_raw(policy));
    }
}

/// Clears the motion history, e.g. at an episode boundary.
#[no_mangle]
pub unsafe extern "C" fn hif_policy_reset(policy: *mut HifPolicy) -> HifStatus {
    guard(|| {
        let p = policy.as_mut().ok_or_else(|| null("policy"))?;
        p.inner.reset();
        Ok(())
    })
}

/// Expected observation geometry.
#[no_mangle]
pub unsafe extern "C" fn hif_policy_frame_dims(
    policy: *const HifPolicy,
    width: *mut usize,
    height: *mut usize,
    channels: *mut usize,
) -> HifStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        if width.is_null() || height.is_null() || channels.is_null() {
            return Err(null("width/height/channels"));
        }
        let c = &p.inner.model().config;
        *width = c.width;
        *height = c.height;
        *channels = c.channels;
        Ok(())
    })
}

/// Chunk shape produced by `hif_policy_act`: `steps x action_dim`.
#[no_mangle]
pub unsafe extern "C" fn hif_policy_chunk_dims(
    policy: *const HifPolicy,
    steps: *mut usize,
    action_dim: *mut usize,
) -> HifStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        if steps.is_null() || action_dim.is_null() {
            return Err(null("steps/action_dim"));
        }
        *steps = p.inner.model().config.n;
        *action_dim = p.inner.model().config.action_dim;
        Ok(())
    })
}

/// Selects the instruction for subsequent calls.
#[no_mangle]
pub unsafe extern "C" fn hif_policy_set_task(policy: *mut HifPolicy, task_id: usize) -> HifStatus {
    guard(|| {
        let p = policy.as_mut().ok_or_else(|| null("policy"))?;
        p.inner.set_task(task_id)?;
        Ok(())
    })
}

/// Records one interleaved 8-bit observation of `len` bytes.
#[no_mangle]
pub unsafe extern "C" fn hif_policy_observe(policy: *mut HifPolicy, pixels: *const u8, len: usize) -> HifStatus {
    guard(|| {
        let p = policy.as_mut().ok_or_else(|| null("policy"))?;
        let c = &p.inner.model().config;
        let (w, h, ch) = (c.width, c.height, c.channels);
        if len != w * h * ch {
            return Err(Fail(
                HifStatus::InvalidArgument,
                format!("observation has {len} bytes, expected {}", w * h * ch),
            ));
        }
        let frame = frame_from(pixels, w, h, ch)?;
        p.inner.observe(frame)?;
        Ok(())
    })
}

/// Action chunk for the latest observation, row-major into `out`
/// (`out_len >= steps * action_dim`).
#[no_mangle]
pub unsafe extern "C" fn hif_policy_act(policy: *const HifPolicy, out: *mut f32, out_len: usize) -> HifStatus {
    guard(|| {
        let p = policy.as_ref().ok_or_else(|| null("policy"))?;
        if out.is_null() {
            return Err(null("out"));
        }
        let chunk = p.inner.act()?;
        let data = chunk.data();
        if out_len < data.len() {
            return Err(Fail(
                HifStatus::BufferTooSmall,
                format!("output holds {out_len} values, chunk needs {}", data.len()),
            ));
        }
        std::slice::from_raw_parts_mut(out, data.len()).copy_from_slice(data);
        Ok(())
    })
}
