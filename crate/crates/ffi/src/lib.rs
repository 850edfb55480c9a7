//! C ABI over trained maskgan generators and the segmentation metrics.
//!
//! Every function returns a [`MaskganStatus`]; on failure a message is kept
//! per thread and can be read with [`maskgan_last_error_message`]. Handles
//! are opaque and must be released with [`maskgan_generator_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use maskgan::eval;
use maskgan::training::{self, Checkpoint, CheckpointError, Direction};
use maskgan::Tensor;

/// Result codes shared by every entry point.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum MaskganStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    CorruptCheckpoint = 4,
    UnsupportedVersion = 5,
    TaskMismatch = 6,
    ComputeFailed = 7,
    Panic = 8,
}

/// Direction code: images to masks.
pub const MASKGAN_DIRECTION_A_TO_B: u32 = 0;
/// Direction code: masks to images (cycle-consistent checkpoints only).
pub const MASKGAN_DIRECTION_B_TO_A: u32 = 1;

/// A generator loaded from a checkpoint, fixed to one direction.
pub struct MaskganGenerator {
    checkpoint: Checkpoint,
    direction: Direction,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("nul bytes removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn fail(status: MaskganStatus, msg: impl Into<String>) -> MaskganStatus {
    set_error(msg);
    status
}

fn guard(f: impl FnOnce() -> MaskganStatus) -> MaskganStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = None);
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(s) => s,
        Err(_) => fail(MaskganStatus::Panic, "internal panic"),
    }
}

fn checkpoint_status(e: &CheckpointError) -> MaskganStatus {
    match e {
        CheckpointError::Io { .. } => MaskganStatus::Io,
        CheckpointError::Corrupt(_) => MaskganStatus::CorruptCheckpoint,
        CheckpointError::Version { .. } | CheckpointError::Unsupported(_) => {
            MaskganStatus::UnsupportedVersion
        }
        CheckpointError::TaskMismatch { .. } => MaskganStatus::TaskMismatch,
    }
}

/// Message for the most recent failure on this thread, or NULL. The pointer
/// stays valid until the next call into this library from the same thread.
#[no_mangle]
pub extern "C" fn maskgan_last_error_message() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Loads a checkpoint and selects the generator for `direction`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a writable pointer.
#[no_mangle]
pub unsafe extern "C" fn maskgan_generator_load(
    path: *const c_char,
    direction: u32,
    out: *mut *mut MaskganGenerator,
) -> MaskganStatus {
    guard(|| {
        if path.is_null() || out.is_null() {
            return fail(MaskganStatus::NullPointer, "null argument");
        }
        // SAFETY: caller guarantees a NUL-terminated string.
        let path = match unsafe { CStr::from_ptr(path) }.to_str() {
            Ok(p) => p,
            Err(_) => return fail(MaskganStatus::InvalidArgument, "path is not UTF-8"),
        };
        let direction = match direction {
            MASKGAN_DIRECTION_A_TO_B => Direction::AToB,
            MASKGAN_DIRECTION_B_TO_A => Direction::BToA,
            d => return fail(MaskganStatus::InvalidArgument, format!("unknown direction {d}")),
        };
        let checkpoint = match training::load_checkpoint(Path::new(path)) {
            Ok(c) => c,
            Err(e) => return fail(checkpoint_status(&e), e.to_string()),
        };
        if let Err(e) = checkpoint.generator(None, direction) {
            return fail(checkpoint_status(&e), e.to_string());
        }
        let handle = Box::new(MaskganGenerator { checkpoint, direction });
        // SAFETY: `out` checked non-null; caller guarantees it is writable.
        unsafe { *out = Box::into_raw(handle) };
        MaskganStatus::Ok
    })
}

/// Releases a handle. NULL is ignored.
///
/// # Safety
/// `handle` must come from [`maskgan_generator_load`] and not be freed twice.
#[no_mangle]
pub unsafe extern "C" fn maskgan_generator_free(handle: *mut MaskganGenerator) {
    if !handle.is_null() {
        // SAFETY: caller passes a pointer obtained from Box::into_raw.
        drop(unsafe { Box::from_raw(handle) });
    }
}

/// Writes the square input size and the input/output channel counts.
///
/// # Safety
/// `handle` must be live; the out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn maskgan_generator_shape(
    handle: *const MaskganGenerator,
    image_size: *mut usize,
    in_channels: *mut usize,
    out_channels: *mut usize,
) -> MaskganStatus {
    guard(|| {
        if handle.is_null() || image_size.is_null() || in_channels.is_null() || out_channels.is_null() {
            return fail(MaskganStatus::NullPointer, "null argument");
        }
        // SAFETY: non-null and live per the contract.
        let h = unsafe { &*handle };
        let cfg = &h.checkpoint.generator(None, h.direction).expect("checked at load").config;
        // SAFETY: non-null and writable per the contract.
        unsafe {
            *image_size = cfg.image_size;
            *in_channels = cfg.in_channels;
            *out_channels = cfg.out_channels;
        }
        MaskganStatus::Ok
    })
}

/// Runs one forward pass in inference mode. `input` holds `C_in * S * S`
/// values in `[-1, 1]`, channel-major; `output` receives `C_out * S * S`
/// values of the tanh map.
///
/// # Safety
/// `handle` must be live; `input`/`output` must hold the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn maskgan_generator_run(
    handle: *const MaskganGenerator,
    input: *const f32,
    input_len: usize,
    output: *mut f32,
    output_len: usize,
) -> MaskganStatus {
    guard(|| {
        if handle.is_null() || input.is_null() || output.is_null() {
            return fail(MaskganStatus::NullPointer, "null argument");
        }
        // SAFETY: non-null and live per the contract.
        let h = unsafe { &*handle };
        let gen = h.checkpoint.generator(None, h.direction).expect("checked at load");
        let cfg = &gen.config;
        let plane = cfg.image_size * cfg.image_size;
        if input_len != cfg.in_channels * plane || output_len != cfg.out_channels * plane {
            return fail(
                MaskganStatus::InvalidArgument,
                format!(
                    "expected {} input and {} output values",
                    cfg.in_channels * plane,
                    cfg.out_channels * plane
                ),
            );
        }
        // SAFETY: caller guarantees `input_len` readable floats.
        let data = unsafe { std::slice::from_raw_parts(input, input_len) }.to_vec();
        let x = match Tensor::new(vec![1, cfg.in_channels, cfg.image_size, cfg.image_size], data) {
            Ok(t) => t,
            Err(e) => return fail(MaskganStatus::InvalidArgument, e.to_string()),
        };
        let y = match gen.generate(&x) {
            Ok(y) => y,
            Err(e) => return fail(MaskganStatus::ComputeFailed, e.to_string()),
        };
        // SAFETY: caller guarantees `output_len` writable floats.
        unsafe { std::slice::from_raw_parts_mut(output, output_len) }.copy_from_slice(y.data());
        MaskganStatus::Ok
    })
}

/// Binarizes both maps at `threshold` (strictly greater is foreground) and
/// writes intersection-over-union, Dice and pixel accuracy.
///
/// # Safety
/// `pred` and `target` must hold `len` floats; out pointers must be writable.
#[no_mangle]
pub unsafe extern "C" fn maskgan_mask_metrics(
    pred: *const f32,
    target: *const f32,
    len: usize,
    threshold: f32,
    iou: *mut f64,
    dice: *mut f64,
    accuracy: *mut f64,
) -> MaskganStatus {
    guard(|| {
        if pred.is_null() || target.is_null() || iou.is_null() || dice.is_null() || accuracy.is_null() {
            return fail(MaskganStatus::NullPointer, "null argument");
        }
        if len == 0 {
            return fail(MaskganStatus::InvalidArgument, "empty masks");
        }
        let mask = |p: *const f32| {
            // SAFETY: caller guarantees `len` readable floats.
            let v = unsafe { std::slice::from_raw_parts(p, len) }.to_vec();
            let t = Tensor::new(vec![len], v).expect("length matches");
            eval::binarize(&t, threshold)
        };
        let (a, b) = (mask(pred), mask(target));
        let scores = (|| Ok::<_, eval::EvalError>((eval::iou(&a, &b)?, eval::dice(&a, &b)?, eval::pixel_accuracy(&a, &b)?)))();
        match scores {
            Ok((i, d, acc)) => {
                // SAFETY: non-null and writable per the contract.
                unsafe {
                    *iou = i;
                    *dice = d;
                    *accuracy = acc;
                }
                MaskganStatus::Ok
            }
            Err(e) => fail(MaskganStatus::InvalidArgument, e.to_string()),
        }
    })
}
