//! C interface. Every function returns a [`CcstStatus`]; on failure the
//! thread's last error message is set and can be read with
//! [`ccst_last_error`]. Handles are opaque and owned by the caller until
//! passed to their `_free` function.

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::PathBuf;

use ccst::hnsw::{HnswConfig, HnswIndex};
use ccst::model::load_checkpoint;
use ccst::train::compress_dataset;
use ccst::{Error, ModelState, VectorDataset};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum CcstStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Io = 3,
    Format = 4,
    DimensionMismatch = 5,
    Numeric = 6,
    Panic = 7,
}

/// A trained compressor loaded from a checkpoint.
pub struct CcstModel {
    model: ModelState,
}

/// An HNSW graph together with the vectors it searches.
pub struct CcstHnsw {
    index: HnswIndex,
}

thread_local! {
    static LAST_ERROR: RefCell<CString> = RefCell::new(CString::default());
}

fn set_error(msg: &str) {
    let c = CString::new(msg.replace('\0', " ")).unwrap_or_default();
    LAST_ERROR.with(|e| *e.borrow_mut() = c);
}

fn status_of(e: &Error) -> CcstStatus {
    match e {
        Error::Io { .. } => CcstStatus::Io,
        Error::Format { .. } | Error::Checksum { .. } | Error::Version { .. } => CcstStatus::Format,
        Error::Shape { .. } | Error::DimMismatch { .. } => CcstStatus::DimensionMismatch,
        Error::NonFinite { .. } | Error::Diverged { .. } => CcstStatus::Numeric,
        Error::Config(_) | Error::InvalidArgument(_) | Error::Degenerate(_) => CcstStatus::InvalidArgument,
    }
}

struct Fail(CcstStatus, String);

impl From<Error> for Fail {
    fn from(e: Error) -> Self {
        Fail(status_of(&e), e.to_string())
    }
}

fn null(what: &str) -> Fail {
    Fail(CcstStatus::NullPointer, format!("{what} is null"))
}

fn guard(f: impl FnOnce() -> Result<(), Fail>) -> CcstStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            set_error("");
            CcstStatus::Ok
        }
        Ok(Err(Fail(status, msg))) => {
            set_error(&msg);
            status
        }
        Err(_) => {
            set_error("internal panic");
            CcstStatus::Panic
        }
    }
}

unsafe fn path_arg(p: *const c_char) -> Result<PathBuf, Fail> {
    if p.is_null() {
        return Err(null("path"));
    }
    let s = CStr::from_ptr(p)
        .to_str()
        .map_err(|_| Fail(CcstStatus::InvalidArgument, "path is not valid UTF-8".into()))?;
    Ok(PathBuf::from(s))
}

unsafe fn rows_arg(data: *const f32, count: usize, dim: usize) -> Result<VectorDataset, Fail> {
    if count > 0 && data.is_null() {
        return Err(null("vector data"));
    }
    let len = count
        .checked_mul(dim)
        .ok_or_else(|| Fail(CcstStatus::InvalidArgument, "count * dim overflows".into()))?;
    let values = if len == 0 { Vec::new() } else { std::slice::from_raw_parts(data, len).to_vec() };
    Ok(VectorDataset::new(count, dim, values)?)
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Fail> {
    p.as_mut().ok_or_else(|| null(what))
}

/// Message for the last failed call on this thread; empty after a success.
/// The pointer stays valid until the next call on the same thread.
#[no_mangle]
pub extern "C" fn ccst_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ptr())
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn ccst_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

/// # Safety
/// `path` must be a NUL-terminated string and `out` a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccst_model_load(path: *const c_char, out: *mut *mut CcstModel) -> CcstStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let model = load_checkpoint(path_arg(path)?)?;
        *out = Box::into_raw(Box::new(CcstModel { model }));
        Ok(())
    })
}

/// # Safety
/// `model` must come from `ccst_model_load` and not be used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ccst_model_free(model: *mut CcstModel) {
    if !model.is_null() {
        drop(Box::from_raw(model));
    }
}

/// # Safety
/// All pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccst_model_dims(model: *const CcstModel, d_in: *mut usize, d_out: *mut usize) -> CcstStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        *out_arg(d_in, "d_in")? = m.model.config().d_in;
        *out_arg(d_out, "d_out")? = m.model.config().d_out;
        Ok(())
    })
}

/// Compresses `count` row-major vectors of width `d_in` into `output`,
/// which must hold `count * d_out` floats.
///
/// # Safety
/// `input` and `output` must be valid for the stated sizes.
#[no_mangle]
pub unsafe extern "C" fn ccst_model_compress(
    model: *const CcstModel,
    input: *const f32,
    count: usize,
    dim: usize,
    output: *mut f32,
) -> CcstStatus {
    guard(|| {
        let m = model.as_ref().ok_or_else(|| null("model"))?;
        let data = rows_arg(input, count, dim)?;
        let out = compress_dataset(&m.model, &data, 1024)?;
        if count > 0 {
            if output.is_null() {
                return Err(null("output"));
            }
            std::ptr::copy_nonoverlapping(out.values().as_ptr(), output, out.values().len());
        }
        Ok(())
    })
}

/// Builds an index over `count` row-major vectors of width `dim`.
///
/// # Safety
/// `vectors` must hold `count * dim` floats and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccst_hnsw_build(
    vectors: *const f32,
    count: usize,
    dim: usize,
    m: usize,
    ef_construction: usize,
    seed: u64,
    out: *mut *mut CcstHnsw,
) -> CcstStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let data = rows_arg(vectors, count, dim)?;
        let cfg = HnswConfig {
            m,
            ef_construction,
            seed,
            ..HnswConfig::default()
        };
        let index = HnswIndex::build(data, cfg)?;
        *out = Box::into_raw(Box::new(CcstHnsw { index }));
        Ok(())
    })
}

/// Makes every later search compute distances against these id-aligned
/// vectors, which may have any width.
///
/// # Safety
/// `vectors` must hold `count * dim` floats.
#[no_mangle]
pub unsafe extern "C" fn ccst_hnsw_attach_search_vectors(
    index: *mut CcstHnsw,
    vectors: *const f32,
    count: usize,
    dim: usize,
) -> CcstStatus {
    guard(|| {
        let h = index.as_mut().ok_or_else(|| null("index"))?;
        let data = rows_arg(vectors, count, dim)?;
        h.index.attach_search_vectors(data)?;
        Ok(())
    })
}

/// Up to `k` nearest ids and distances, ascending. `ids` and `distances`
/// must hold `k` entries; `found` receives the number written.
///
/// # Safety
/// `query` must hold `dim` floats; output pointers must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccst_hnsw_search(
    index: *const CcstHnsw,
    query: *const f32,
    dim: usize,
    k: usize,
    ef: usize,
    ids: *mut u32,
    distances: *mut f32,
    found: *mut usize,
) -> CcstStatus {
    guard(|| {
        let h = index.as_ref().ok_or_else(|| null("index"))?;
        if query.is_null() {
            return Err(null("query"));
        }
        if ids.is_null() || distances.is_null() {
            return Err(null("output"));
        }
        let found = out_arg(found, "found")?;
        let q = std::slice::from_raw_parts(query, dim);
        let res = h.index.search(q, k, ef)?;
        for (i, (id, d)) in res.iter().enumerate() {
            *ids.add(i) = *id;
            *distances.add(i) = *d;
        }
        *found = res.len();
        Ok(())
    })
}

/// # Safety
/// `index` must be valid; `len` must be a valid pointer.
#[no_mangle]
pub unsafe extern "C" fn ccst_hnsw_len(index: *const CcstHnsw, len: *mut usize) -> CcstStatus {
    guard(|| {
        let h = index.as_ref().ok_or_else(|| null("index"))?;
        *out_arg(len, "len")? = h.index.len();
        Ok(())
    })
}

/// Writes the graph. The vectors are not stored; pass them again to
/// `ccst_hnsw_load`.
///
/// # Safety
/// `path` must be a NUL-terminated string.
#[no_mangle]
pub unsafe extern "C" fn ccst_hnsw_save(index: *const CcstHnsw, path: *const c_char) -> CcstStatus {
    guard(|| {
        let h = index.as_ref().ok_or_else(|| null("index"))?;
        h.index.save(path_arg(path)?)?;
        Ok(())
    })
}

/// # Safety
/// `path` must be a NUL-terminated string, `vectors` must hold
/// `count * dim` floats and `out` must be valid.
#[no_mangle]
pub unsafe extern "C" fn ccst_hnsw_load(
    path: *const c_char,
    vectors: *const f32,
    count: usize,
    dim: usize,
    out: *mut *mut CcstHnsw,
) -> CcstStatus {
    guard(|| {
        let out = out_arg(out, "out")?;
        let data = rows_arg(vectors, count, dim)?;
        let index = HnswIndex::load(path_arg(path)?, data, None)?;
        *out = Box::into_raw(Box::new(CcstHnsw { index }));
        Ok(())
    })
}

/// # Safety
/// `index` must come from `ccst_hnsw_build` or `ccst_hnsw_load` and not be
/// used afterwards.
#[no_mangle]
pub unsafe extern "C" fn ccst_hnsw_free(index: *mut CcstHnsw) {
    if !index.is_null() {
        drop(Box::from_raw(index));
    }
}
