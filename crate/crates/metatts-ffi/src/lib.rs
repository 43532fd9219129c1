//! C ABI over the metatts pipeline: checkpoint loading and inference-mode
//! synthesis behind opaque handles, status codes for every fallible call,
//! and a thread-local last-error message. The matching header is generated
//! into `include/metatts.h` at build time.
//!
//! Ownership rules: every `*_load`/`*_synthesize` output is owned by the
//! caller and must be released with the matching `*_free`; strings returned
//! by [`mtts_last_error`] are borrowed and valid until the next failing call
//! on the same thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::path::Path;

use metatts::checkpoint::{Checkpoint, PhaseTag};
use metatts::data::MelSpectrogram;
use metatts::eval::synthesize;
use ndarray::Array2;

/// Result code of a fallible call. Anything other than `Ok` leaves a
/// message retrievable via [`mtts_last_error`].
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MttsStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullArgument = 1,
    /// An argument failed validation (encoding, range, or shape).
    InvalidArgument = 2,
    /// The destination buffer is smaller than the payload.
    BufferTooSmall = 3,
    /// The underlying operation failed; see `mtts_last_error`.
    Failure = 4,
}

/// Training phase recorded in a checkpoint.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum MttsPhase {
    Theta0 = 0,
    ThetaT = 1,
    ThetaM = 2,
    Adapted = 3,
}

/// Summary of a loaded checkpoint.
#[repr(C)]
#[derive(Clone, Copy, Debug)]
pub struct MttsCheckpointInfo {
    pub phase: MttsPhase,
    /// Training step at which the checkpoint was cut.
    pub step: u64,
    pub mel_bins: usize,
    pub alphabet: usize,
    pub style_dim: usize,
    pub train_speakers: usize,
}

/// Opaque checkpoint handle.
pub struct MttsCheckpoint(Checkpoint);

/// Opaque synthesized-spectrogram handle (row-major frames × bins).
pub struct MttsMel(Array2<f64>);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn fail(status: MttsStatus, message: impl std::fmt::Display) -> MttsStatus {
    let text = message.to_string().replace('\0', " ");
    LAST_ERROR.with(|slot| {
        *slot.borrow_mut() = Some(CString::new(text).expect("NUL stripped"));
    });
    status
}

fn clear_error() {
    LAST_ERROR.with(|slot| slot.borrow_mut().take());
}

/// Returns the message of the most recent failure on this thread, or null.
/// The pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn mtts_last_error() -> *const c_char {
    LAST_ERROR.with(|slot| {
        slot.borrow()
            .as_ref()
            .map_or(std::ptr::null(), |s| s.as_ptr())
    })
}

/// Loads a checkpoint file into a heap-allocated handle.
///
/// # Safety
/// `path` must point to a NUL-terminated string and `out` to writable
/// storage for one pointer.
#[no_mangle]
pub unsafe extern "C" fn mtts_checkpoint_load(
    path: *const c_char,
    out: *mut *mut MttsCheckpoint,
) -> MttsStatus {
    if path.is_null() || out.is_null() {
        return fail(MttsStatus::NullArgument, "path and out must be non-null");
    }
    let Ok(path) = CStr::from_ptr(path).to_str() else {
        return fail(MttsStatus::InvalidArgument, "path is not valid UTF-8");
    };
    match Checkpoint::load(Path::new(path)) {
        Ok(ckpt) => {
            clear_error();
            *out = Box::into_raw(Box::new(MttsCheckpoint(ckpt)));
            MttsStatus::Ok
        }
        Err(e) => fail(MttsStatus::Failure, e),
    }
}

/// Releases a handle from [`mtts_checkpoint_load`]. Null is a no-op.
///
/// # Safety
/// `ckpt` must be a pointer returned by `mtts_checkpoint_load` that has not
/// been freed already.
#[no_mangle]
pub unsafe extern "C" fn mtts_checkpoint_free(ckpt: *mut MttsCheckpoint) {
    if !ckpt.is_null() {
        drop(Box::from_raw(ckpt));
    }
}

/// Fills `out` with the checkpoint's phase, step, and dimensions.
///
/// # Safety
/// `ckpt` must be a live handle and `out` writable.
#[no_mangle]
pub unsafe extern "C" fn mtts_checkpoint_info(
    ckpt: *const MttsCheckpoint,
    out: *mut MttsCheckpointInfo,
) -> MttsStatus {
    if ckpt.is_null() || out.is_null() {
        return fail(MttsStatus::NullArgument, "ckpt and out must be non-null");
    }
    let c = &(*ckpt).0;
    *out = MttsCheckpointInfo {
        phase: match c.phase_tag {
            PhaseTag::Theta0 => MttsPhase::Theta0,
            PhaseTag::ThetaT => MttsPhase::ThetaT,
            PhaseTag::ThetaM => MttsPhase::ThetaM,
            PhaseTag::Adapted => MttsPhase::Adapted,
        },
        step: c.step,
        mel_bins: c.model.mel_bins,
        alphabet: c.model.alphabet,
        style_dim: c.model.style_dim,
        train_speakers: c.train_speaker_ids.len(),
    };
    clear_error();
    MttsStatus::Ok
}

/// Synthesizes a mel spectrogram for a token sequence in inference mode
/// (predicted durations), conditioned on the checkpoint's speaker row 0 and
/// the prosody of `style_mel` (row-major `style_frames × style_bins`).
///
/// # Safety
/// `tokens` must point to `n_tokens` elements, `style_mel` to
/// `style_frames * style_bins` doubles, and `out` to writable storage for
/// one pointer; a live `ckpt` handle is required.
#[no_mangle]
pub unsafe extern "C" fn mtts_synthesize(
    ckpt: *const MttsCheckpoint,
    tokens: *const u16,
    n_tokens: usize,
    style_mel: *const f64,
    style_frames: usize,
    style_bins: usize,
    out: *mut *mut MttsMel,
) -> MttsStatus {
    if ckpt.is_null() || tokens.is_null() || style_mel.is_null() || out.is_null() {
        return fail(MttsStatus::NullArgument, "all pointers must be non-null");
    }
    let c = &(*ckpt).0;
    if n_tokens == 0 {
        return fail(MttsStatus::InvalidArgument, "token sequence is empty");
    }
    let tokens = std::slice::from_raw_parts(tokens, n_tokens);
    if let Some(&t) = tokens.iter().find(|&&t| t as usize >= c.model.alphabet) {
        return fail(
            MttsStatus::InvalidArgument,
            format!("token {t} outside alphabet of {}", c.model.alphabet),
        );
    }
    if style_frames == 0 || style_bins != c.model.mel_bins {
        return fail(
            MttsStatus::InvalidArgument,
            format!(
                "style reference must be non-empty with {} bins, got {style_frames}×{style_bins}",
                c.model.mel_bins
            ),
        );
    }
    let style = std::slice::from_raw_parts(style_mel, style_frames * style_bins);
    let style = match Array2::from_shape_vec((style_frames, style_bins), style.to_vec()) {
        Ok(a) => a,
        Err(e) => return fail(MttsStatus::InvalidArgument, e),
    };
    let style = match MelSpectrogram::new(style) {
        Ok(m) => m,
        Err(e) => return fail(MttsStatus::InvalidArgument, e),
    };
    match synthesize(&c.params, &c.model, tokens, &style, None) {
        Ok(result) => {
            clear_error();
            *out = Box::into_raw(Box::new(MttsMel(result.final_mel)));
            MttsStatus::Ok
        }
        Err(e) => fail(MttsStatus::Failure, e),
    }
}

/// Number of frames in a synthesized spectrogram (0 for null).
///
/// # Safety
/// `mel` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtts_mel_frames(mel: *const MttsMel) -> usize {
    if mel.is_null() {
        0
    } else {
        (*mel).0.nrows()
    }
}

/// Number of mel bins per frame (0 for null).
///
/// # Safety
/// `mel` must be null or a live handle.
#[no_mangle]
pub unsafe extern "C" fn mtts_mel_bins(mel: *const MttsMel) -> usize {
    if mel.is_null() {
        0
    } else {
        (*mel).0.ncols()
    }
}

/// Copies the spectrogram into `buf` row-major; `cap` is the buffer length
/// in doubles and must be at least frames × bins.
///
/// # Safety
/// `mel` must be a live handle and `buf` must point to `cap` writable
/// doubles.
#[no_mangle]
pub unsafe extern "C" fn mtts_mel_copy(
    mel: *const MttsMel,
    buf: *mut f64,
    cap: usize,
) -> MttsStatus {
    if mel.is_null() || buf.is_null() {
        return fail(MttsStatus::NullArgument, "mel and buf must be non-null");
    }
    let values = &(*mel).0;
    let needed = values.len();
    if cap < needed {
        return fail(
            MttsStatus::BufferTooSmall,
            format!("need {needed} doubles, buffer holds {cap}"),
        );
    }
    let dst = std::slice::from_raw_parts_mut(buf, needed);
    for (d, s) in dst.iter_mut().zip(values.iter()) {
        *d = *s;
    }
    clear_error();
    MttsStatus::Ok
}

/// Releases a handle from [`mtts_synthesize`]. Null is a no-op.
///
/// # Safety
/// `mel` must be a pointer returned by `mtts_synthesize` that has not been
/// freed already.
#[no_mangle]
pub unsafe extern "C" fn mtts_mel_free(mel: *mut MttsMel) {
    if !mel.is_null() {
        drop(Box::from_raw(mel));
    }
}
