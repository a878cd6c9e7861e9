//! C ABI over the `almp` library: opaque handles for base models and
//! adapter sets, greedy decoding, pruning and the metrics.
//!
//! Every fallible function returns an [`AlmpStatus`]; on failure the message
//! is kept per thread and can be read with [`almp_last_error`]. Handles are
//! created by `*_load`/`*_clone` functions and must be released with the
//! matching `*_free`. Nothing here is safe to call with dangling pointers.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;
use std::slice;

use almp::importance::{ImportanceScores, MatrixPair};
use almp::metrics::{approx_randomization, bleu, rouge_l, rouge_n};
use almp::model::{greedy_decode, load_adapters_for, load_base, save_adapters, AdapterSet, BaseModel, InitSnapshot};
use almp::numerics::Matrix;
use almp::pruning::{prune, PruneConfig, ResetMode};
use almp::Error;

/// Result of every fallible call. Codes 2–4 match the CLI exit codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlmpStatus {
    Ok = 0,
    /// A required pointer argument was null.
    NullPointer = 1,
    /// Bad configuration or a violated call contract.
    InvalidArgument = 2,
    /// Unreadable, malformed or mis-shaped data.
    Data = 3,
    /// A computation produced a non-finite value.
    Numerical = 4,
    /// The output buffer is too small; the needed length was written.
    BufferTooSmall = 5,
    /// A Rust panic was caught at the boundary.
    Internal = 6,
}

/// Which entries [`almp_prune`] resets.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum AlmpPruneUnit {
    /// The lowest-scoring `knob` percent of every matrix.
    Parameter = 0,
    /// Whole adapters whose mean score is below `knob`.
    Module = 1,
}

/// A frozen base model.
pub struct AlmpBase(BaseModel);

/// An ordered set of adapters, bound to the base it was loaded against.
pub struct AlmpAdapters(AdapterSet);

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: impl Into<String>) {
    let msg = CString::new(msg.into().replace('\0', " ")).expect("interior NULs replaced");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(msg));
}

fn status_of(e: &Error) -> AlmpStatus {
    match e.exit_code() {
        2 => AlmpStatus::InvalidArgument,
        4 => AlmpStatus::Numerical,
        _ => AlmpStatus::Data,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), (AlmpStatus, String)>) -> AlmpStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => AlmpStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(p) => {
            let msg = p
                .downcast_ref::<String>()
                .cloned()
                .or_else(|| p.downcast_ref::<&str>().map(|s| s.to_string()))
                .unwrap_or_else(|| "panic".into());
            set_error(format!("internal error: {msg}"));
            AlmpStatus::Internal
        }
    }
}

trait IntoFfi<T> {
    fn ffi(self) -> Result<T, (AlmpStatus, String)>;
}

impl<T> IntoFfi<T> for almp::Result<T> {
    fn ffi(self) -> Result<T, (AlmpStatus, String)> {
        self.map_err(|e| (status_of(&e), e.to_string()))
    }
}

fn null(what: &str) -> (AlmpStatus, String) {
    (AlmpStatus::NullPointer, format!("`{what}` is null"))
}

fn invalid(msg: impl Into<String>) -> (AlmpStatus, String) {
    (AlmpStatus::InvalidArgument, msg.into())
}

unsafe fn path_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, (AlmpStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| invalid(format!("`{what}` is not valid UTF-8")))
}

unsafe fn ref_arg<'a, T>(p: *const T, what: &str) -> Result<&'a T, (AlmpStatus, String)> {
    p.as_ref().ok_or_else(|| null(what))
}

/// A slice from `(ptr, len)`; a null pointer is allowed only when `len == 0`.
unsafe fn slice_arg<'a, T>(p: *const T, len: usize, what: &str) -> Result<&'a [T], (AlmpStatus, String)> {
    if len == 0 {
        return Ok(&[]);
    }
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn write_out<T>(p: *mut T, v: T, what: &str) -> Result<(), (AlmpStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    p.write(v);
    Ok(())
}

/// Message of the last failed call on this thread, or null if none. The
/// pointer stays valid until the next failing call on the same thread.
#[no_mangle]
pub extern "C" fn almp_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |s| s.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn almp_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Loads a base checkpoint.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn almp_base_load(path: *const c_char, out: *mut *mut AlmpBase) -> AlmpStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let base = load_base(path).ffi()?;
        write_out(out, Box::into_raw(Box::new(AlmpBase(base))), "out")
    })
}

/// Vocabulary size of the base.
///
/// # Safety
/// `base` must be a live handle or null (returns 0).
#[no_mangle]
pub unsafe extern "C" fn almp_base_vocab_size(base: *const AlmpBase) -> usize {
    base.as_ref().map_or(0, |b| b.0.config.vocab_size)
}

/// # Safety
/// `base` must come from [`almp_base_load`] and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn almp_base_free(base: *mut AlmpBase) {
    if !base.is_null() {
        drop(Box::from_raw(base));
    }
}

/// Loads an adapter checkpoint and checks it against `base`.
///
/// # Safety
/// `path` must be NUL-terminated, `base` a live handle, `out` writable.
#[no_mangle]
pub unsafe extern "C" fn almp_adapters_load(
    path: *const c_char,
    base: *const AlmpBase,
    out: *mut *mut AlmpAdapters,
) -> AlmpStatus {
    guard(|| {
        let path = path_arg(path, "path")?;
        let base = ref_arg(base, "base")?;
        let set = load_adapters_for(path, &base.0).ffi()?;
        write_out(out, Box::into_raw(Box::new(AlmpAdapters(set))), "out")
    })
}

/// Writes the adapters to a checkpoint file.
///
/// # Safety
/// `adapters` must be a live handle and `path` NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn almp_adapters_save(adapters: *const AlmpAdapters, path: *const c_char) -> AlmpStatus {
    guard(|| {
        let set = ref_arg(adapters, "adapters")?;
        save_adapters(&set.0, path_arg(path, "path")?).ffi()
    })
}

/// Independent copy of a handle (e.g. to keep as a reset snapshot).
///
/// # Safety
/// `adapters` must be a live handle; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn almp_adapters_clone(adapters: *const AlmpAdapters, out: *mut *mut AlmpAdapters) -> AlmpStatus {
    guard(|| {
        let set = ref_arg(adapters, "adapters")?;
        write_out(out, Box::into_raw(Box::new(AlmpAdapters(set.0.clone()))), "out")
    })
}

/// Union of two sets (each site's adapters in order `a` then `b`).
///
/// # Safety
/// `a`, `b` must be live handles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn almp_adapters_merge(
    a: *const AlmpAdapters,
    b: *const AlmpAdapters,
    out: *mut *mut AlmpAdapters,
) -> AlmpStatus {
    guard(|| {
        let (a, b) = (ref_arg(a, "a")?, ref_arg(b, "b")?);
        let set = AdapterSet::merged([&a.0, &b.0]).ffi()?;
        write_out(out, Box::into_raw(Box::new(AlmpAdapters(set))), "out")
    })
}

/// Number of adapters in the set (null gives 0).
///
/// # Safety
/// `adapters` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn almp_adapters_count(adapters: *const AlmpAdapters) -> usize {
    adapters.as_ref().map_or(0, |s| s.0.len())
}

/// Total number of `A` and `B` entries, i.e. the length of a score vector
/// for [`almp_prune`] (null gives 0).
///
/// # Safety
/// `adapters` must be a live handle or null.
#[no_mangle]
pub unsafe extern "C" fn almp_adapters_entry_count(adapters: *const AlmpAdapters) -> usize {
    adapters.as_ref().map_or(0, |s| s.0.parameter_count())
}

/// Copies every entry into `out` in score order: per adapter, `A` then `B`,
/// row-major. Fails with `BufferTooSmall` if `cap` is short.
///
/// # Safety
/// `adapters` must be a live handle; `out` must hold `cap` floats.
#[no_mangle]
pub unsafe extern "C" fn almp_adapters_values(adapters: *const AlmpAdapters, out: *mut f32, cap: usize) -> AlmpStatus {
    guard(|| {
        let set = ref_arg(adapters, "adapters")?;
        let n = set.0.parameter_count();
        if cap < n {
            return Err((AlmpStatus::BufferTooSmall, format!("need {n} floats, got {cap}")));
        }
        if n > 0 && out.is_null() {
            return Err(null("out"));
        }
        let mut i = 0;
        for m in set.0.modules() {
            for &v in m.a.as_slice().iter().chain(m.b.as_slice()) {
                out.add(i).write(v);
                i += 1;
            }
        }
        Ok(())
    })
}

/// # Safety
/// `adapters` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn almp_adapters_free(adapters: *mut AlmpAdapters) {
    if !adapters.is_null() {
        drop(Box::from_raw(adapters));
    }
}

/// Greedy decoding of `input` (symbol ids, without BOS/SEP). `adapters`
/// may be null for the bare base. Writes at most `cap` ids to `out` and the
/// produced length to `out_len`; if `cap` is too small, `out_len` holds the
/// needed length and `BufferTooSmall` is returned.
///
/// # Safety
/// Pointers must be valid for the given lengths; handles must be live.
#[no_mangle]
pub unsafe extern "C" fn almp_decode(
    base: *const AlmpBase,
    adapters: *const AlmpAdapters,
    input: *const u32,
    input_len: usize,
    max_new: usize,
    out: *mut u32,
    cap: usize,
    out_len: *mut usize,
) -> AlmpStatus {
    guard(|| {
        let base = ref_arg(base, "base")?;
        let empty = AdapterSet::new();
        let set = adapters.as_ref().map_or(&empty, |a| &a.0);
        let input = slice_arg(input, input_len, "input")?;
        let ids = greedy_decode(&base.0, set, input, max_new).ffi()?;
        write_out(out_len, ids.len(), "out_len")?;
        if ids.len() > cap {
            return Err((
                AlmpStatus::BufferTooSmall,
                format!("need {} ids, got {cap}", ids.len()),
            ));
        }
        if !ids.is_empty() {
            if out.is_null() {
                return Err(null("out"));
            }
            ptr::copy_nonoverlapping(ids.as_ptr(), out, ids.len());
        }
        Ok(())
    })
}

/// Resets low-importance entries of `adapters` in place.
///
/// `scores` holds one value per entry in the order of
/// [`almp_adapters_values`]. `knob` is the percentage for
/// `AlmpPruneUnit::Parameter` and τ for `AlmpPruneUnit::Module`. With
/// `init` null entries are zeroed; otherwise they are restored from `init`,
/// which must have the same shapes. The number of reset entries is written
/// to `reset_count` if it is non-null.
///
/// # Safety
/// Handles must be live; `scores` must hold `scores_len` floats.
#[no_mangle]
pub unsafe extern "C" fn almp_prune(
    adapters: *mut AlmpAdapters,
    scores: *const f32,
    scores_len: usize,
    unit: AlmpPruneUnit,
    knob: f64,
    init: *const AlmpAdapters,
    reset_count: *mut usize,
) -> AlmpStatus {
    guard(|| {
        let set = adapters.as_mut().ok_or_else(|| null("adapters"))?;
        let flat = slice_arg(scores, scores_len, "scores")?;
        let n = set.0.parameter_count();
        if flat.len() != n {
            return Err(invalid(format!("{} scores for {n} adapter entries", flat.len())));
        }
        let mut rest = flat;
        let mut take = |rows: usize, cols: usize| {
            let (head, tail) = rest.split_at(rows * cols);
            rest = tail;
            Matrix::from_vec(rows, cols, head.to_vec())
        };
        let per_adapter = set
            .0
            .modules()
            .map(|m| {
                Ok(MatrixPair {
                    a: take(m.a.rows(), m.a.cols())?,
                    b: take(m.b.rows(), m.b.cols())?,
                })
            })
            .collect::<almp::Result<Vec<_>>>()
            .ffi()?;
        let reset = if init.is_null() { ResetMode::Zero } else { ResetMode::Init };
        let config = match unit {
            AlmpPruneUnit::Parameter => PruneConfig::parameter(knob, reset),
            AlmpPruneUnit::Module => PruneConfig::module(knob, reset),
        };
        let snapshot = match init.as_ref() {
            Some(i) => InitSnapshot::capture(&i.0),
            None => InitSnapshot::capture(&set.0),
        };
        let report = prune(&mut set.0, &ImportanceScores { per_adapter }, &config, &snapshot).ffi()?;
        if !reset_count.is_null() {
            reset_count.write(report.entries_reset);
        }
        Ok(())
    })
}

/// ROUGE-L F-measure of two id sequences (0 if either is empty).
///
/// # Safety
/// Pointers must be valid for the given lengths; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn almp_rouge_l(
    hyp: *const u32,
    hyp_len: usize,
    reference: *const u32,
    ref_len: usize,
    out: *mut f64,
) -> AlmpStatus {
    guard(|| {
        let (h, r) = (slice_arg(hyp, hyp_len, "hyp")?, slice_arg(reference, ref_len, "reference")?);
        write_out(out, rouge_l(h, r).value, "out")
    })
}

/// ROUGE-N F-measure with clipped counts; `n` must be at least 1.
///
/// # Safety
/// Pointers must be valid for the given lengths; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn almp_rouge_n(
    hyp: *const u32,
    hyp_len: usize,
    reference: *const u32,
    ref_len: usize,
    n: usize,
    out: *mut f64,
) -> AlmpStatus {
    guard(|| {
        if n == 0 {
            return Err(invalid("ROUGE-N needs n >= 1"));
        }
        let (h, r) = (slice_arg(hyp, hyp_len, "hyp")?, slice_arg(reference, ref_len, "reference")?);
        write_out(out, rouge_n(h, r, n).value, "out")
    })
}

/// Sentence BLEU-4 on a 0–100 scale.
///
/// # Safety
/// Pointers must be valid for the given lengths; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn almp_bleu(
    hyp: *const u32,
    hyp_len: usize,
    reference: *const u32,
    ref_len: usize,
    out: *mut f64,
) -> AlmpStatus {
    guard(|| {
        let (h, r) = (slice_arg(hyp, hyp_len, "hyp")?, slice_arg(reference, ref_len, "reference")?);
        write_out(out, bleu(h, r, 4), "out")
    })
}

/// Paired approximate randomization p-value for per-example scores.
///
/// # Safety
/// `a` and `b` must each hold `n` doubles; `out` writable.
#[no_mangle]
pub unsafe extern "C" fn almp_approx_randomization(
    a: *const f64,
    b: *const f64,
    n: usize,
    rounds: usize,
    seed: u64,
    out: *mut f64,
) -> AlmpStatus {
    guard(|| {
        let (a, b) = (slice_arg(a, n, "a")?, slice_arg(b, n, "b")?);
        write_out(out, approx_randomization(a, b, rounds, seed).ffi()?, "out")
    })
}
