//! C ABI over `kbvqa-core`.
//!
//! Functions return a [`KbvqaStatus`]; on failure a message is kept per
//! thread and can be copied out with [`kbvqa_last_error`]. Indexes are
//! opaque handles released with [`kbvqa_index_free`].

use std::cell::RefCell;
use std::ffi::{c_char, CStr};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::ptr;

use kbvqa_core::fusion::EmbeddingVector;
use kbvqa_core::grpo::compute_advantages;
use kbvqa_core::index::{IndexError, KbEntry, VectorIndex};
use kbvqa_core::inspector::{parse_inspection, Decision};
use kbvqa_core::refiner::{format_reward, parse_refiner_output, retrieval_reward};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KbvqaStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    InvalidUtf8 = 3,
    Io = 4,
    DimensionMismatch = 5,
    DuplicateId = 6,
    CorruptIndex = 7,
    VersionMismatch = 8,
    EmptyIndex = 9,
    Panic = 99,
}

/// Routing verdict of an inspector reply.
#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum KbvqaDecision {
    Pass = 0,
    Fail = 1,
}

/// Opaque index handle.
pub struct KbvqaIndex {
    inner: VectorIndex,
}

thread_local! {
    static LAST_ERROR: RefCell<String> = const { RefCell::new(String::new()) };
}

fn fail(status: KbvqaStatus, message: impl Into<String>) -> KbvqaStatus {
    LAST_ERROR.with(|e| *e.borrow_mut() = message.into());
    status
}

fn index_status(e: &IndexError) -> KbvqaStatus {
    match e {
        IndexError::DimensionMismatch { .. } => KbvqaStatus::DimensionMismatch,
        IndexError::DuplicateId(_) => KbvqaStatus::DuplicateId,
        IndexError::VersionMismatch { .. } => KbvqaStatus::VersionMismatch,
        IndexError::Empty => KbvqaStatus::EmptyIndex,
        IndexError::Io(_) => KbvqaStatus::Io,
        IndexError::BadMagic
        | IndexError::ChecksumMismatch { .. }
        | IndexError::Truncated
        | IndexError::Malformed(_) => KbvqaStatus::CorruptIndex,
        _ => KbvqaStatus::InvalidArgument,
    }
}

fn from_index(e: IndexError) -> KbvqaStatus {
    fail(index_status(&e), e.to_string())
}

/// Runs `f`, turning panics into [`KbvqaStatus::Panic`].
fn guard(f: impl FnOnce() -> KbvqaStatus) -> KbvqaStatus {
    catch_unwind(AssertUnwindSafe(f)).unwrap_or_else(|_| fail(KbvqaStatus::Panic, "internal panic"))
}

unsafe fn str_arg<'a>(p: *const c_char) -> Result<&'a str, KbvqaStatus> {
    if p.is_null() {
        return Err(fail(KbvqaStatus::NullPointer, "null string argument"));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(KbvqaStatus::InvalidUtf8, "string argument is not UTF-8"))
}

/// Copies the calling thread's last error message into `buf` (NUL
/// terminated, truncated to `len`). Returns the full message length.
///
/// # Safety
/// `buf` must be null or point to `len` writable bytes.
#[no_mangle]
pub unsafe extern "C" fn kbvqa_last_error(buf: *mut c_char, len: usize) -> usize {
    LAST_ERROR.with(|e| {
        let msg = e.borrow();
        if !buf.is_null() && len > 0 {
            let n = msg.len().min(len - 1);
            ptr::copy_nonoverlapping(msg.as_ptr(), buf.cast::<u8>(), n);
            *buf.add(n) = 0;
        }
        msg.len()
    })
}

/// Loads an index file written by `kbvqa build-kb`.
///
/// # Safety
/// `path` must be a NUL-terminated string; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kbvqa_index_load(path: *const c_char, out: *mut *mut KbvqaIndex) -> KbvqaStatus {
    guard(|| {
        if out.is_null() {
            return fail(KbvqaStatus::NullPointer, "null output handle");
        }
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match VectorIndex::load(path) {
            Ok(inner) => {
                *out = Box::into_raw(Box::new(KbvqaIndex { inner }));
                KbvqaStatus::Ok
            }
            Err(e) => from_index(e),
        }
    })
}

/// Builds a sealed index from `count` row-major vectors of length `dim`.
/// Entry metadata is left empty.
///
/// # Safety
/// `ids` must hold `count` values and `vectors` `count * dim` values.
#[no_mangle]
pub unsafe extern "C" fn kbvqa_index_build(
    dim: usize,
    ids: *const u64,
    vectors: *const f64,
    count: usize,
    out: *mut *mut KbvqaIndex,
) -> KbvqaStatus {
    guard(|| {
        if out.is_null() || (count > 0 && (ids.is_null() || vectors.is_null())) {
            return fail(KbvqaStatus::NullPointer, "null argument");
        }
        let Some(total) = count.checked_mul(dim) else {
            return fail(KbvqaStatus::InvalidArgument, "count * dim overflows");
        };
        let mut inner = match VectorIndex::new(dim) {
            Ok(i) => i,
            Err(e) => return from_index(e),
        };
        let (ids, values) = if count == 0 {
            (&[][..], &[][..])
        } else {
            (
                std::slice::from_raw_parts(ids, count),
                std::slice::from_raw_parts(vectors, total),
            )
        };
        let mut entries = Vec::with_capacity(count);
        for (&id, row) in ids.iter().zip(values.chunks_exact(dim)) {
            let vector = match EmbeddingVector::new(row.to_vec()) {
                Ok(v) => v,
                Err(e) => return fail(KbvqaStatus::InvalidArgument, format!("entry {id}: {e}")),
            };
            entries.push(KbEntry {
                entry_id: id,
                entity_id: String::new(),
                article_id: String::new(),
                section_id: String::new(),
                vector,
                section_text: String::new(),
                image_ref: String::new(),
            });
        }
        if let Err(e) = inner.add_entries(entries) {
            return from_index(e);
        }
        inner.seal();
        *out = Box::into_raw(Box::new(KbvqaIndex { inner }));
        KbvqaStatus::Ok
    })
}

/// # Safety
/// `index` must come from this library; `path` must be NUL-terminated.
#[no_mangle]
pub unsafe extern "C" fn kbvqa_index_save(index: *const KbvqaIndex, path: *const c_char) -> KbvqaStatus {
    guard(|| {
        let Some(index) = index.as_ref() else {
            return fail(KbvqaStatus::NullPointer, "null index");
        };
        let path = match str_arg(path) {
            Ok(p) => p,
            Err(s) => return s,
        };
        match index.inner.save(path) {
            Ok(()) => KbvqaStatus::Ok,
            Err(e) => from_index(e),
        }
    })
}

/// Releases an index. Null is ignored.
///
/// # Safety
/// `index` must come from this library and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn kbvqa_index_free(index: *mut KbvqaIndex) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}

/// Number of entries; 0 for a null handle.
///
/// # Safety
/// `index` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn kbvqa_index_len(index: *const KbvqaIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.len())
}

/// Vector dimension; 0 for a null handle.
///
/// # Safety
/// `index` must be null or come from this library.
#[no_mangle]
pub unsafe extern "C" fn kbvqa_index_dim(index: *const KbvqaIndex) -> usize {
    index.as_ref().map_or(0, |i| i.inner.dim())
}

/// Exact cosine top-`k`. Writes up to `k` results to `out_ids` and
/// `out_scores` and the number written to `out_len`.
///
/// # Safety
/// `query` must hold `dim` values; `out_ids` and `out_scores` must have room
/// for `k` values; `out_len` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kbvqa_index_search(
    index: *const KbvqaIndex,
    query: *const f64,
    dim: usize,
    k: usize,
    out_ids: *mut u64,
    out_scores: *mut f64,
    out_len: *mut usize,
) -> KbvqaStatus {
    guard(|| {
        let Some(index) = index.as_ref() else {
            return fail(KbvqaStatus::NullPointer, "null index");
        };
        if query.is_null() || out_ids.is_null() || out_scores.is_null() || out_len.is_null() {
            return fail(KbvqaStatus::NullPointer, "null argument");
        }
        let q = match EmbeddingVector::new(std::slice::from_raw_parts(query, dim).to_vec()) {
            Ok(q) => q,
            Err(e) => return fail(KbvqaStatus::InvalidArgument, e.to_string()),
        };
        match index.inner.search_topk(&q, k) {
            Ok(hits) => {
                for (i, h) in hits.iter().enumerate() {
                    *out_ids.add(i) = h.entry_id;
                    *out_scores.add(i) = h.score;
                }
                *out_len = hits.len();
                KbvqaStatus::Ok
            }
            Err(e) => from_index(e),
        }
    })
}

/// Retrieval reward for a 1-based hit rank; `rank == 0` means no hit.
///
/// # Safety
/// `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kbvqa_retrieval_reward(rank: usize, out: *mut f64) -> KbvqaStatus {
    guard(|| {
        if out.is_null() {
            return fail(KbvqaStatus::NullPointer, "null output");
        }
        match retrieval_reward((rank > 0).then_some(rank)) {
            Ok(r) => {
                *out = r;
                KbvqaStatus::Ok
            }
            Err(e) => fail(KbvqaStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Format reward of a raw refiner reply.
///
/// # Safety
/// `text` must be NUL-terminated; `out` must be writable.
#[no_mangle]
pub unsafe extern "C" fn kbvqa_format_reward(text: *const c_char, out: *mut f64) -> KbvqaStatus {
    guard(|| {
        if out.is_null() {
            return fail(KbvqaStatus::NullPointer, "null output");
        }
        match str_arg(text) {
            Ok(t) => {
                *out = format_reward(&parse_refiner_output(t));
                KbvqaStatus::Ok
            }
            Err(s) => s,
        }
    })
}

/// Group-normalized advantages of `n` rewards, written to `out`.
///
/// # Safety
/// `rewards` and `out` must each hold `n` values.
#[no_mangle]
pub unsafe extern "C" fn kbvqa_compute_advantages(rewards: *const f64, n: usize, out: *mut f64) -> KbvqaStatus {
    guard(|| {
        if rewards.is_null() || out.is_null() {
            return fail(KbvqaStatus::NullPointer, "null argument");
        }
        match compute_advantages(std::slice::from_raw_parts(rewards, n)) {
            Ok(adv) => {
                ptr::copy_nonoverlapping(adv.as_ptr(), out, n);
                KbvqaStatus::Ok
            }
            Err(e) => fail(KbvqaStatus::InvalidArgument, e.to_string()),
        }
    })
}

/// Parses an inspector reply. `out_parse_ok` is false for unusable replies,
/// which the router sends to the fallback path.
///
/// # Safety
/// `text` must be NUL-terminated; outputs must be writable.
#[no_mangle]
pub unsafe extern "C" fn kbvqa_parse_inspection(
    text: *const c_char,
    out_decision: *mut KbvqaDecision,
    out_parse_ok: *mut bool,
) -> KbvqaStatus {
    guard(|| {
        if out_decision.is_null() || out_parse_ok.is_null() {
            return fail(KbvqaStatus::NullPointer, "null output");
        }
        match str_arg(text) {
            Ok(t) => {
                let r = parse_inspection(t);
                *out_decision = match r.decision {
                    Decision::Pass => KbvqaDecision::Pass,
                    Decision::Fail => KbvqaDecision::Fail,
                };
                *out_parse_ok = r.parse_ok;
                KbvqaStatus::Ok
            }
            Err(s) => s,
        }
    })
}
