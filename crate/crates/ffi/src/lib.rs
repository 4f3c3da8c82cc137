//! C ABI over `seqtrans`.
//!
//! Datasets and models are opaque handles created by `*_load` and released
//! with the matching `*_free`. Every fallible call returns a [`SeqtransStatus`];
//! on failure `seqtrans_last_error` describes the problem for the calling thread.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;
use std::ptr;

use seqtrans::data::{load_split, Split, SplitDataset};
use seqtrans::eval::{evaluate, EvalProtocol, ModelScorer, Negatives};
use seqtrans::models::{item_scores, History};
use seqtrans::train::{load_checkpoint, Checkpoint};
use seqtrans::Error;

/// Result codes.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqtransStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Parse = 4,
    Contract = 5,
    Mismatch = 6,
    Corrupt = 7,
    BufferTooSmall = 8,
    Panic = 9,
}

/// Which held-out event to rank.
#[repr(C)]
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub enum SeqtransSplit {
    Valid = 0,
    Test = 1,
}

/// A leave-one-out split loaded from a split cache file.
pub struct SeqtransDataset {
    inner: SplitDataset,
}

/// A trained checkpoint.
pub struct SeqtransModel {
    inner: Checkpoint,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior NULs removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

fn status_of(e: &Error) -> SeqtransStatus {
    match e {
        Error::Io { .. } => SeqtransStatus::Io,
        Error::Parse { .. } => SeqtransStatus::Parse,
        Error::Contract { .. } | Error::UnknownVariant(_) => SeqtransStatus::Contract,
        Error::VersionMismatch { .. } | Error::CheckpointMismatch(_) | Error::Dimension { .. } => SeqtransStatus::Mismatch,
        Error::Corrupt(_) => SeqtransStatus::Corrupt,
        _ => SeqtransStatus::InvalidArgument,
    }
}

/// Run `f`, turning errors and panics into status codes.
fn guard(f: impl FnOnce() -> Result<(), (SeqtransStatus, String)>) -> SeqtransStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => SeqtransStatus::Ok,
        Ok(Err((status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            SeqtransStatus::Panic
        }
    }
}

fn lib_err(e: Error) -> (SeqtransStatus, String) {
    (status_of(&e), e.to_string())
}

fn null(what: &str) -> (SeqtransStatus, String) {
    (SeqtransStatus::NullPointer, format!("{what} is NULL"))
}

unsafe fn path_arg(path: *const c_char) -> Result<PathBuf, (SeqtransStatus, String)> {
    if path.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(path)
        .to_str()
        .map_err(|_| (SeqtransStatus::InvalidArgument, "path is not valid UTF-8".to_string()))?;
    Ok(PathBuf::from(s))
}

/// Message for the most recent failure on this thread, or NULL. Valid until the next failing call.
#[no_mangle]
pub extern "C" fn seqtrans_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn seqtrans_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// Load a split cache written by `seqtrans prepare`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seqtrans_dataset_load(path: *const c_char, out: *mut *mut SeqtransDataset) -> SeqtransStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ds = load_split(&path_arg(path)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SeqtransDataset { inner: ds }));
        Ok(())
    })
}

/// # Safety
/// `ds` must come from `seqtrans_dataset_load` and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn seqtrans_dataset_free(ds: *mut SeqtransDataset) {
    if !ds.is_null() {
        drop(Box::from_raw(ds));
    }
}

/// # Safety
/// `ds` must be a live dataset handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn seqtrans_dataset_num_users(ds: *const SeqtransDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.users.len())
}

/// # Safety
/// `ds` must be a live dataset handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn seqtrans_dataset_num_items(ds: *const SeqtransDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.catalog.n_items())
}

/// # Safety
/// `ds` must be a live dataset handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn seqtrans_dataset_num_categories(ds: *const SeqtransDataset) -> usize {
    ds.as_ref().map_or(0, |d| d.inner.catalog.n_categories())
}

/// Load a checkpoint written by `seqtrans train`.
///
/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn seqtrans_model_load(path: *const c_char, out: *mut *mut SeqtransModel) -> SeqtransStatus {
    guard(|| {
        if out.is_null() {
            return Err(null("out"));
        }
        *out = ptr::null_mut();
        let ck = load_checkpoint(&path_arg(path)?).map_err(lib_err)?;
        *out = Box::into_raw(Box::new(SeqtransModel { inner: ck }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `seqtrans_model_load` and not be used afterwards. NULL is ignored.
#[no_mangle]
pub unsafe extern "C" fn seqtrans_model_free(model: *mut SeqtransModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// Variant tag (`"tstm"`, `"lstm"`, ...) as a static string, or NULL for a NULL handle.
///
/// # Safety
/// `model` must be a live model handle or NULL.
#[no_mangle]
pub unsafe extern "C" fn seqtrans_model_variant(model: *const SeqtransModel) -> *const c_char {
    let Some(m) = model.as_ref() else { return ptr::null() };
    let tag: &'static str = match m.inner.params.variant().tag() {
        "lstm" => "lstm\0",
        "ci" => "ci\0",
        "ic" => "ic\0",
        "ici" => "ici\0",
        "ivaec" => "ivaec\0",
        "tstm" => "tstm\0",
        _ => "s-tstm\0",
    };
    tag.as_ptr().cast()
}

/// # Safety
/// `model` must be a live model handle or NULL (returns 0).
#[no_mangle]
pub unsafe extern "C" fn seqtrans_model_num_items(model: *const SeqtransModel) -> usize {
    model.as_ref().map_or(0, |m| m.inner.params.dims().n_items)
}

/// Score every catalog item as the next event after a history.
///
/// `items` and `cats` hold `len` dense ids (items and categories start at 1).
/// `scores[k]` receives the score of item `k + 1`; `capacity` must be at least
/// `seqtrans_model_num_items(model)`.
///
/// # Safety
/// All pointers must be valid for the stated lengths.
#[no_mangle]
pub unsafe extern "C" fn seqtrans_model_score(
    model: *const SeqtransModel,
    user: usize,
    items: *const usize,
    cats: *const usize,
    len: usize,
    scores: *mut f64,
    capacity: usize,
) -> SeqtransStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        if items.is_null() || cats.is_null() || scores.is_null() {
            return Err(null("items, cats or scores"));
        }
        let n = m.inner.params.dims().n_items;
        if capacity < n {
            return Err((
                SeqtransStatus::BufferTooSmall,
                format!("scores needs {n} slots, got {capacity}"),
            ));
        }
        let items = std::slice::from_raw_parts(items, len);
        let cats = std::slice::from_raw_parts(cats, len);
        let dims = m.inner.params.dims();
        if let Some(bad) = items.iter().find(|&&i| i == 0 || i > dims.n_items) {
            return Err((SeqtransStatus::InvalidArgument, format!("item id {bad} outside 1..={}", dims.n_items)));
        }
        if let Some(bad) = cats.iter().find(|&&c| c == 0 || c > dims.n_cats) {
            return Err((SeqtransStatus::InvalidArgument, format!("category id {bad} outside 1..={}", dims.n_cats)));
        }
        if user >= dims.n_users {
            return Err((SeqtransStatus::InvalidArgument, format!("user {user} outside 0..{}", dims.n_users)));
        }
        let history = History { user, items, cats };
        let row = item_scores(&m.inner.params, &[history], &m.inner.config.score_options())
            .map_err(lib_err)?
            .remove(0);
        std::slice::from_raw_parts_mut(scores, n).copy_from_slice(&row);
        Ok(())
    })
}

/// Hit@n and NDCG@n of the model on one split with `negatives` sampled unvisited items per user
/// (0 ranks the whole catalog). `hit` and `ndcg` receive one value per cutoff.
///
/// # Safety
/// Handles must be live; `cutoffs`, `hit` and `ndcg` must hold `n_cutoffs` elements.
#[no_mangle]
pub unsafe extern "C" fn seqtrans_evaluate(
    model: *const SeqtransModel,
    ds: *const SeqtransDataset,
    split: SeqtransSplit,
    negatives: usize,
    seed: u64,
    cutoffs: *const usize,
    n_cutoffs: usize,
    hit: *mut f64,
    ndcg: *mut f64,
) -> SeqtransStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let d = ds.as_ref().ok_or_else(|| null("dataset"))?;
        if cutoffs.is_null() || hit.is_null() || ndcg.is_null() {
            return Err(null("cutoffs, hit or ndcg"));
        }
        m.inner.expect_catalog(&d.inner.catalog.digest()).map_err(lib_err)?;
        let protocol = EvalProtocol {
            negatives: if negatives == 0 {
                Negatives::FullCatalog
            } else {
                Negatives::Sampled(negatives)
            },
            cutoffs: std::slice::from_raw_parts(cutoffs, n_cutoffs).to_vec(),
            seed,
            ..EvalProtocol::default()
        };
        let scorer = ModelScorer {
            params: &m.inner.params,
            opts: m.inner.config.score_options(),
        };
        let split = match split {
            SeqtransSplit::Valid => Split::Valid,
            SeqtransSplit::Test => Split::Test,
        };
        let report = evaluate(&scorer, &d.inner, &protocol, split).map_err(lib_err)?;
        std::slice::from_raw_parts_mut(hit, n_cutoffs).copy_from_slice(&report.hit);
        std::slice::from_raw_parts_mut(ndcg, n_cutoffs).copy_from_slice(&report.ndcg);
        Ok(())
    })
}
