//! C ABI over the block-tower stability laboratory.
//!
//! Conventions:
//! - Handles (`slk_scene`, `slk_model`) are opaque; create them through the
//!   constructors here and release them exactly once with the matching
//!   `slk_*_free`.
//! - Every fallible function returns an [`slk_status`]; on anything but
//!   `SLK_OK` a thread-local message is available from [`slk_last_error`]
//!   until the next failure on the same thread.
//! - Panics never unwind across the boundary: they are caught and surfaced
//!   as `SLK_PANIC`.

#![allow(non_camel_case_types)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};

use stacklab::imaging::{self, Mask};
use stacklab::learning::{self, LearnError, Model, CLASS_STABLE};
use stacklab::physics::{simulate, SimConfig};
use stacklab::scenegen::{self, GenParams, GroupSpec, Scene};
use stacklab::stability::{label_stability, quasi_static_check, Verdict, TAU};

/// Result codes for every fallible call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum slk_status {
    SLK_OK = 0,
    /// A required pointer argument was null.
    SLK_NULL_ARGUMENT = 1,
    /// An argument failed validation (bad group name, bad buffer size, …).
    SLK_INVALID_ARGUMENT = 2,
    /// Scene generation exhausted its rejection-sampling budget.
    SLK_GENERATION_FAILED = 3,
    /// Reading or writing a file failed.
    SLK_IO_ERROR = 4,
    /// The checkpoint is malformed or of an unsupported version.
    SLK_BAD_CHECKPOINT = 5,
    /// The mask size does not match the model input.
    SLK_SHAPE_MISMATCH = 6,
    /// The oracle could not produce a verdict.
    SLK_NUMERICAL = 7,
    /// A panic was caught at the boundary.
    SLK_PANIC = 8,
}

/// Quasi-static oracle verdicts.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum slk_verdict {
    SLK_VERDICT_STABLE = 0,
    SLK_VERDICT_UNSTABLE = 1,
    SLK_VERDICT_MARGINAL = 2,
}

/// Opaque handle to a generated scene.
pub struct slk_scene {
    inner: Scene,
}

/// Opaque handle to a trained stability classifier.
pub struct slk_model {
    inner: Model,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: impl Into<Vec<u8>>) {
    let msg = CString::new(msg).unwrap_or_else(|_| CString::new("invalid error text").unwrap());
    LAST_ERROR.with(|slot| *slot.borrow_mut() = msg);
}

fn fail(code: slk_status, msg: impl Into<Vec<u8>>) -> slk_status {
    set_error(msg);
    code
}

/// The crate version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn slk_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr() as *const c_char
}

/// Message describing the most recent failure on this thread. The pointer
/// stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn slk_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| slot.borrow().as_ptr())
}

fn guarded(f: impl FnOnce() -> slk_status) -> slk_status {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(code) => code,
        Err(payload) => {
            let msg = payload
                .downcast_ref::<&str>()
                .map(|s| s.to_string())
                .or_else(|| payload.downcast_ref::<String>().cloned())
                .unwrap_or_else(|| "panic without message".to_string());
            fail(slk_status::SLK_PANIC, format!("panic: {msg}"))
        }
    }
}

/// # Safety
/// `ptr` must be non-null and point to a NUL-terminated string.
unsafe fn str_arg<'a>(ptr: *const c_char, what: &str) -> Result<&'a str, slk_status> {
    if ptr.is_null() {
        return Err(fail(
            slk_status::SLK_NULL_ARGUMENT,
            format!("{what} is null"),
        ));
    }
    CStr::from_ptr(ptr).to_str().map_err(|_| {
        fail(
            slk_status::SLK_INVALID_ARGUMENT,
            format!("{what} is not valid UTF-8"),
        )
    })
}

fn out_arg<'a, T>(ptr: *mut T, what: &str) -> Result<&'a mut T, slk_status> {
    if ptr.is_null() {
        Err(fail(
            slk_status::SLK_NULL_ARGUMENT,
            format!("{what} is null"),
        ))
    } else {
        Ok(unsafe { &mut *ptr })
    }
}

fn scene_arg<'a>(ptr: *const slk_scene) -> Result<&'a Scene, slk_status> {
    if ptr.is_null() {
        Err(fail(slk_status::SLK_NULL_ARGUMENT, "scene is null"))
    } else {
        Ok(unsafe { &(*ptr).inner })
    }
}

fn model_arg<'a>(ptr: *const slk_model) -> Result<&'a Model, slk_status> {
    if ptr.is_null() {
        Err(fail(slk_status::SLK_NULL_ARGUMENT, "model is null"))
    } else {
        Ok(unsafe { &(*ptr).inner })
    }
}

/// Generate one scene of a named group (for example `"4B-2D-Uni"`),
/// reproducing the corpus pipeline: the per-scene seed derives from
/// (`seed`, group, `scene_index`) with deterministic retries.
///
/// # Safety
/// `group` must point to a NUL-terminated string; `out` must be a valid
/// location to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn slk_scene_generate(
    group: *const c_char,
    scene_index: u32,
    seed: u64,
    out: *mut *mut slk_scene,
) -> slk_status {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let group = match str_arg(group, "group") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let spec: GroupSpec = match group.parse() {
            Ok(v) => v,
            Err(_) => {
                let valid: Vec<String> = scenegen::enumerate_groups()
                    .iter()
                    .map(|g| g.to_string())
                    .collect();
                return fail(
                    slk_status::SLK_INVALID_ARGUMENT,
                    format!("unknown group {group:?}; valid: {}", valid.join(", ")),
                );
            }
        };
        match scenegen::generate_scene_with_retries(&spec, scene_index, seed, &GenParams::default())
        {
            Ok((scene, _)) => {
                *out = Box::into_raw(Box::new(slk_scene { inner: scene }));
                slk_status::SLK_OK
            }
            Err(e) => fail(slk_status::SLK_GENERATION_FAILED, e.to_string()),
        }
    })
}

/// Release a scene handle. Passing null is a no-op.
///
/// # Safety
/// `scene` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn slk_scene_free(scene: *mut slk_scene) {
    if !scene.is_null() {
        drop(Box::from_raw(scene));
    }
}

/// Number of blocks in the scene.
///
/// # Safety
/// `scene` must be a live handle; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn slk_scene_block_count(
    scene: *const slk_scene,
    out: *mut u32,
) -> slk_status {
    guarded(|| {
        let (scene, out) = match (scene_arg(scene), out_arg(out, "out")) {
            (Ok(s), Ok(o)) => (s, o),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        *out = scene.blocks.len() as u32;
        slk_status::SLK_OK
    })
}

/// Simulate the scene with the default engine configuration and apply the
/// displacement-threshold label: `*out_unstable` becomes 1 when any block
/// center moves more than the threshold, else 0.
///
/// # Safety
/// `scene` must be a live handle; `out_unstable` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn slk_scene_label(
    scene: *const slk_scene,
    out_unstable: *mut u8,
) -> slk_status {
    guarded(|| {
        let (scene, out) = match (scene_arg(scene), out_arg(out_unstable, "out_unstable")) {
            (Ok(s), Ok(o)) => (s, o),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        let trace = simulate(scene, &SimConfig::default());
        *out = label_stability(&trace, TAU).unstable as u8;
        slk_status::SLK_OK
    })
}

/// Quasi-static equilibrium check, independent of the dynamic engine.
/// Writes the verdict and the equilibrium margin (positive: every support
/// patch can shrink by that inset and still balance; negative: patches must
/// grow).
///
/// # Safety
/// `scene` must be a live handle; both out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn slk_scene_margin(
    scene: *const slk_scene,
    out_verdict: *mut slk_verdict,
    out_margin: *mut f64,
) -> slk_status {
    guarded(|| {
        let scene = match scene_arg(scene) {
            Ok(s) => s,
            Err(c) => return c,
        };
        let (out_verdict, out_margin) = match (
            out_arg(out_verdict, "out_verdict"),
            out_arg(out_margin, "out_margin"),
        ) {
            (Ok(v), Ok(m)) => (v, m),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        match quasi_static_check(scene) {
            Ok(eq) => {
                *out_verdict = match eq.verdict {
                    Verdict::Stable => slk_verdict::SLK_VERDICT_STABLE,
                    Verdict::Unstable => slk_verdict::SLK_VERDICT_UNSTABLE,
                    Verdict::Marginal => slk_verdict::SLK_VERDICT_MARGINAL,
                };
                *out_margin = eq.margin;
                slk_status::SLK_OK
            }
            Err(e) => fail(slk_status::SLK_NUMERICAL, e.to_string()),
        }
    })
}

/// Render the scene's training-resolution binary mask into `buf` row-major,
/// one byte per pixel (0 background, 1 foreground). `len` must be at least
/// side², where side is written to `out_side` (the training resolution).
///
/// # Safety
/// `scene` must be a live handle; `buf` must point to `len` writable bytes;
/// `out_side` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn slk_scene_render_mask(
    scene: *const slk_scene,
    buf: *mut u8,
    len: usize,
    out_side: *mut u32,
) -> slk_status {
    guarded(|| {
        let (scene, out_side) = match (scene_arg(scene), out_arg(out_side, "out_side")) {
            (Ok(s), Ok(o)) => (s, o),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        let side = imaging::TRAIN_RESOLUTION;
        *out_side = side as u32;
        if buf.is_null() {
            return fail(slk_status::SLK_NULL_ARGUMENT, "buf is null");
        }
        if len < side * side {
            return fail(
                slk_status::SLK_INVALID_ARGUMENT,
                format!("buffer holds {len} bytes, need {}", side * side),
            );
        }
        let mask = imaging::render_training_mask(&scene.blocks);
        let out = std::slice::from_raw_parts_mut(buf, side * side);
        for row in 0..side {
            for col in 0..side {
                out[row * side + col] = mask.get(row, col) as u8;
            }
        }
        slk_status::SLK_OK
    })
}

/// Load a classifier checkpoint written by the training pipeline.
///
/// # Safety
/// `path` must point to a NUL-terminated string; `out` must be a valid
/// location to store the new handle.
#[no_mangle]
pub unsafe extern "C" fn slk_model_load(
    path: *const c_char,
    out: *mut *mut slk_model,
) -> slk_status {
    guarded(|| {
        let out = match out_arg(out, "out") {
            Ok(v) => v,
            Err(code) => return code,
        };
        let path = match str_arg(path, "path") {
            Ok(v) => v,
            Err(code) => return code,
        };
        match learning::load_model(std::path::Path::new(path)) {
            Ok(model) => {
                *out = Box::into_raw(Box::new(slk_model { inner: model }));
                slk_status::SLK_OK
            }
            Err(LearnError::BadCheckpoint(msg)) => fail(slk_status::SLK_BAD_CHECKPOINT, msg),
            Err(e) => fail(slk_status::SLK_IO_ERROR, e.to_string()),
        }
    })
}

/// Release a model handle. Passing null is a no-op.
///
/// # Safety
/// `model` must have come from this library and not been freed before.
#[no_mangle]
pub unsafe extern "C" fn slk_model_free(model: *mut slk_model) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Side length (pixels) of the square mask the model consumes.
///
/// # Safety
/// `model` must be a live handle; `out` must be valid for writing.
#[no_mangle]
pub unsafe extern "C" fn slk_model_input_side(
    model: *const slk_model,
    out: *mut u32,
) -> slk_status {
    guarded(|| {
        let (model, out) = match (model_arg(model), out_arg(out, "out")) {
            (Ok(m), Ok(o)) => (m, o),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        *out = model.plan.input as u32;
        slk_status::SLK_OK
    })
}

/// Classify a binary mask (row-major, one byte per pixel, nonzero =
/// foreground, `side` × `side` pixels, `len` ≥ side²). Writes the stable
/// class probability and 1/0 for a stable/unstable prediction.
///
/// # Safety
/// `model` must be a live handle; `mask` must point to `len` readable
/// bytes; both out pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn slk_model_predict(
    model: *const slk_model,
    mask: *const u8,
    len: usize,
    side: u32,
    out_p_stable: *mut f64,
    out_stable: *mut u8,
) -> slk_status {
    guarded(|| {
        let model = match model_arg(model) {
            Ok(m) => m,
            Err(c) => return c,
        };
        let (out_p, out_s) = match (
            out_arg(out_p_stable, "out_p_stable"),
            out_arg(out_stable, "out_stable"),
        ) {
            (Ok(p), Ok(s)) => (p, s),
            (Err(c), _) | (_, Err(c)) => return c,
        };
        if mask.is_null() {
            return fail(slk_status::SLK_NULL_ARGUMENT, "mask is null");
        }
        let side = side as usize;
        if len < side * side {
            return fail(
                slk_status::SLK_INVALID_ARGUMENT,
                format!("buffer holds {len} bytes, need {}", side * side),
            );
        }
        if side != model.plan.input {
            return fail(
                slk_status::SLK_SHAPE_MISMATCH,
                format!("mask side {side}, model wants {}", model.plan.input),
            );
        }
        let bytes = std::slice::from_raw_parts(mask, side * side);
        let mut m = Mask::new(side, side);
        for row in 0..side {
            for col in 0..side {
                m.set(row, col, bytes[row * side + col] != 0);
            }
        }
        match learning::predict(model, &m) {
            Ok(p) => {
                *out_p = p.p_stable;
                *out_s = (p.class == CLASS_STABLE) as u8;
                slk_status::SLK_OK
            }
            Err(e @ LearnError::ShapeMismatch { .. }) => {
                fail(slk_status::SLK_SHAPE_MISMATCH, e.to_string())
            }
            Err(e) => fail(slk_status::SLK_INVALID_ARGUMENT, e.to_string()),
        }
    })
}
