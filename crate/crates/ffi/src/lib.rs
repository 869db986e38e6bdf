//! C interface to trained `entrec` recommenders.
//!
//! Every function returns an [`EntrecStatus`]; on failure the message is
//! available from [`entrec_last_error`] on the same thread. Handles are
//! opaque and must be released with [`entrec_model_close`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;

use entrec::metrics::impression_metrics;
use entrec::pipeline::Scorer;
use entrec::Error;

/// Outcome of a call.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum EntrecStatus {
    Ok = 0,
    /// Bad argument, unusable checkpoint stage or invalid configuration.
    Usage = 1,
    /// Unreadable or malformed input, unknown article ids.
    Data = 2,
    /// Non-finite values during scoring.
    Numerical = 3,
    /// A required pointer was null or a string was not UTF-8.
    InvalidPointer = 4,
    /// The metric is undefined for the given labels.
    Undefined = 5,
    /// Internal failure; the message names it.
    Internal = 6,
}

/// A loaded recommender and the news it can score.
pub struct EntrecModel {
    scorer: Scorer,
}

/// Ranking metrics for one impression.
#[repr(C)]
#[derive(Clone, Copy, Debug, Default)]
pub struct EntrecMetrics {
    pub auc: f64,
    pub mrr: f64,
    pub ndcg5: f64,
    pub ndcg10: f64,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> EntrecStatus {
    match e.exit_code() {
        1 => EntrecStatus::Usage,
        3 => EntrecStatus::Numerical,
        _ => EntrecStatus::Data,
    }
}

/// Runs `f`, recording any error or panic as the thread's last error.
fn guarded(f: impl FnOnce() -> Result<(), (EntrecStatus, String)>) -> EntrecStatus {
    set_error("");
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => EntrecStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(&msg);
            status
        }
        Err(panic) => {
            let msg = panic
                .downcast_ref::<String>()
                .map(String::as_str)
                .or_else(|| panic.downcast_ref::<&str>().copied())
                .unwrap_or("panic");
            set_error(&format!("internal error: {msg}"));
            EntrecStatus::Internal
        }
    }
}

fn lib_err(e: Error) -> (EntrecStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (EntrecStatus, String) {
    (EntrecStatus::InvalidPointer, format!("{what} is null"))
}

/// # Safety
/// `p` must be null or a valid NUL-terminated string.
unsafe fn read_str<'a>(p: *const c_char, what: &str) -> Result<&'a str, (EntrecStatus, String)> {
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: non-null and NUL-terminated per the caller's contract.
    unsafe { CStr::from_ptr(p) }
        .to_str()
        .map_err(|_| (EntrecStatus::InvalidPointer, format!("{what} is not UTF-8")))
}

/// # Safety
/// `p` must point to `n` valid string pointers, or be null with `n == 0`.
unsafe fn read_ids(
    p: *const *const c_char,
    n: usize,
    what: &str,
) -> Result<Vec<String>, (EntrecStatus, String)> {
    if n == 0 {
        return Ok(Vec::new());
    }
    if p.is_null() {
        return Err(null(what));
    }
    // SAFETY: `p` points to `n` pointers per the caller's contract.
    let ptrs = unsafe { std::slice::from_raw_parts(p, n) };
    ptrs.iter()
        .enumerate()
        .map(|(i, &s)| unsafe { read_str(s, &format!("{what}[{i}]")) }.map(str::to_string))
        .collect()
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn entrec_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Message describing the last failure on this thread (empty after a
/// successful call). Valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn entrec_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Loads a trained recommender checkpoint and the news file
/// (MIND `news.tsv` or `.jsonl`) whose articles it will score.
///
/// # Safety
/// `checkpoint` and `news` must be NUL-terminated strings; `out` must be a
/// valid pointer. On success `*out` owns a handle for [`entrec_model_close`].
#[no_mangle]
pub unsafe extern "C" fn entrec_model_open(
    checkpoint: *const c_char,
    news: *const c_char,
    out: *mut *mut EntrecModel,
) -> EntrecStatus {
    guarded(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        // SAFETY: `out` is non-null and writable per the contract.
        unsafe { *out = ptr::null_mut() };
        let ckpt = unsafe { read_str(checkpoint, "checkpoint") }?;
        let news = unsafe { read_str(news, "news") }?;
        let scorer = Scorer::open(Path::new(ckpt), Path::new(news)).map_err(lib_err)?;
        let handle = Box::into_raw(Box::new(EntrecModel { scorer }));
        unsafe { *out = handle };
        Ok(())
    })
}

/// Releases a handle. Null is ignored.
///
/// # Safety
/// `model` must be null or a handle from [`entrec_model_open`] that has not
/// been closed.
#[no_mangle]
pub unsafe extern "C" fn entrec_model_close(model: *mut EntrecModel) {
    if !model.is_null() {
        // SAFETY: the handle came from `Box::into_raw` and is closed once.
        drop(unsafe { Box::from_raw(model) });
    }
}

/// Ranks `candidates` for a reader whose history (oldest first) is given.
/// Writes up to `top_k` results, best first, as indices into `candidates`
/// and their scores; `*out_len` receives the number written.
///
/// # Safety
/// `model` must be a live handle; `history` and `candidates` must point to
/// `n_history` and `n_candidates` NUL-terminated strings; `out_indices` and
/// `out_scores` must have room for `min(top_k, n_candidates)` entries.
#[no_mangle]
#[allow(clippy::too_many_arguments)]
pub unsafe extern "C" fn entrec_recommend(
    model: *const EntrecModel,
    history: *const *const c_char,
    n_history: usize,
    candidates: *const *const c_char,
    n_candidates: usize,
    top_k: usize,
    out_indices: *mut usize,
    out_scores: *mut f64,
    out_len: *mut usize,
) -> EntrecStatus {
    guarded(|| {
        if out_len.is_null() {
            return Err(null("out_len"));
        }
        // SAFETY: non-null per the check above.
        unsafe { *out_len = 0 };
        // SAFETY: a live handle per the contract.
        let model = unsafe { model.as_ref() }.ok_or_else(|| null("model"))?;
        if top_k == 0 {
            return Err((EntrecStatus::Usage, "top_k must be at least 1".into()));
        }
        let history = unsafe { read_ids(history, n_history, "history") }?;
        let cands = unsafe { read_ids(candidates, n_candidates, "candidates") }?;
        if out_indices.is_null() || out_scores.is_null() {
            return Err(null("output buffer"));
        }
        let ranked = model
            .scorer
            .recommend(&history, &cands, top_k)
            .map_err(lib_err)?;
        for (k, (id, score)) in ranked.iter().enumerate() {
            let idx = cands
                .iter()
                .position(|c| c == id)
                .expect("ranked ids come from the input");
            // SAFETY: `ranked.len() <= min(top_k, n_candidates)` entries fit.
            unsafe {
                *out_indices.add(k) = idx;
                *out_scores.add(k) = *score;
            }
        }
        unsafe { *out_len = ranked.len() };
        Ok(())
    })
}

/// AUC, MRR and nDCG@5/10 for one impression. Labels are 0 or 1.
/// Returns [`EntrecStatus::Undefined`] unless both labels occur.
///
/// # Safety
/// `scores` and `labels` must point to `n` values; `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn entrec_metrics(
    scores: *const f64,
    labels: *const u8,
    n: usize,
    out: *mut EntrecMetrics,
) -> EntrecStatus {
    guarded(|| {
        if scores.is_null() || labels.is_null() || out.is_null() {
            return Err(null("argument"));
        }
        // SAFETY: both arrays hold `n` values per the contract.
        let (s, l) = unsafe {
            (
                std::slice::from_raw_parts(scores, n),
                std::slice::from_raw_parts(labels, n),
            )
        };
        if let Some(bad) = l.iter().find(|&&x| x > 1) {
            return Err((EntrecStatus::Usage, format!("label {bad} is not 0 or 1")));
        }
        if s.iter().any(|x| !x.is_finite()) {
            return Err((EntrecStatus::Numerical, "non-finite score".into()));
        }
        let m = impression_metrics(s, l).ok_or_else(|| {
            (
                EntrecStatus::Undefined,
                "metrics need at least one clicked and one non-clicked candidate".to_string(),
            )
        })?;
        // SAFETY: `out` is non-null and writable.
        unsafe {
            *out = EntrecMetrics {
                auc: m.auc,
                mrr: m.mrr,
                ndcg5: m.ndcg5,
                ndcg10: m.ndcg10,
            }
        };
        Ok(())
    })
}
