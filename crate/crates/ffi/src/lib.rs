//! C ABI over the `originality` library.
//!
//! Every function returns an [`OrigStatus`]; on failure a message is
//! available from [`orig_last_error`] on the same thread. Handles are opaque
//! and must be released with their `_free` function.

#![allow(clippy::missing_safety_doc)]

use std::cell::RefCell;
use std::ffi::{c_char, CStr, CString};
use std::panic::{catch_unwind, AssertUnwindSafe};
use std::path::Path;
use std::ptr;
use std::slice;

use originality::backends::{generate_checked, CorpusBackend, GeneratorBackend, SyntheticBackend, SyntheticConfig};
use originality::estimator::{repeated_estimates, standard_error, Conditioning, Reference, RunOptions};
use originality::store::NullSink;
use originality::{synthlab, Embedding, Error, MetricKind, SampleBatch};

#[repr(C)]
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum OrigStatus {
    Ok = 0,
    NullPointer = 1,
    InvalidArgument = 2,
    Domain = 3,
    Contract = 4,
    Transport = 5,
    Timeout = 6,
    Status = 7,
    Protocol = 8,
    Format = 9,
    State = 10,
    Storage = 11,
    BufferTooSmall = 12,
    Panic = 13,
}

/// Summary of `m` repeated estimates. `std` is the population standard deviation.
#[repr(C)]
#[derive(Debug, Clone, Copy, Default, PartialEq)]
pub struct OrigSummary {
    pub mean: f64,
    pub std: f64,
    pub m: usize,
    pub n: usize,
    pub degenerate: bool,
}

enum Source {
    Synthetic(SyntheticBackend),
    Corpus(CorpusBackend),
}

/// A sample source: synthetic distribution or embedding corpus.
pub struct OrigBackend {
    source: Source,
}

impl OrigBackend {
    fn backend(&self) -> &dyn GeneratorBackend {
        match &self.source {
            Source::Synthetic(b) => b,
            Source::Corpus(b) => b,
        }
    }
}

/// A batch of embeddings of equal dimension.
pub struct OrigBatch {
    batch: SampleBatch,
}

thread_local! {
    static LAST_ERROR: RefCell<Option<CString>> = const { RefCell::new(None) };
}

fn set_error(msg: String) {
    let c = CString::new(msg.replace('\0', " ")).expect("interior nuls removed");
    LAST_ERROR.with(|e| *e.borrow_mut() = Some(c));
}

struct Failure(OrigStatus, String);

fn status_of(e: &Error) -> OrigStatus {
    match e {
        Error::Input(_) => OrigStatus::InvalidArgument,
        Error::Domain(_) => OrigStatus::Domain,
        Error::Contract(_) => OrigStatus::Contract,
        Error::Transport { .. } => OrigStatus::Transport,
        Error::Timeout { .. } => OrigStatus::Timeout,
        Error::Status { .. } => OrigStatus::Status,
        Error::Protocol(_) => OrigStatus::Protocol,
        Error::Format { .. } => OrigStatus::Format,
        Error::State(_) => OrigStatus::State,
        Error::Storage(_) => OrigStatus::Storage,
        Error::Batch { source, .. } | Error::StreamInterrupted { source, .. } => status_of(source),
    }
}

impl From<Error> for Failure {
    fn from(e: Error) -> Self {
        Failure(status_of(&e), e.to_string())
    }
}

fn fail(status: OrigStatus, msg: impl Into<String>) -> Failure {
    Failure(status, msg.into())
}

fn null(what: &str) -> Failure {
    fail(OrigStatus::NullPointer, format!("{what} is null"))
}

/// Runs `f`, converting errors and panics into a status and the thread's last error.
fn guard(f: impl FnOnce() -> Result<(), Failure>) -> OrigStatus {
    match catch_unwind(AssertUnwindSafe(f)) {
        Ok(Ok(())) => {
            LAST_ERROR.with(|e| *e.borrow_mut() = None);
            OrigStatus::Ok
        }
        Ok(Err(Failure(status, msg))) => {
            set_error(msg);
            status
        }
        Err(_) => {
            set_error("internal panic".into());
            OrigStatus::Panic
        }
    }
}

unsafe fn str_arg<'a>(p: *const c_char, what: &str) -> Result<&'a str, Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    CStr::from_ptr(p)
        .to_str()
        .map_err(|_| fail(OrigStatus::InvalidArgument, format!("{what} is not valid UTF-8")))
}

unsafe fn f64_arg<'a>(p: *const f64, len: usize, what: &str) -> Result<&'a [f64], Failure> {
    if p.is_null() {
        return Err(null(what));
    }
    Ok(slice::from_raw_parts(p, len))
}

unsafe fn out_arg<'a, T>(p: *mut T, what: &str) -> Result<&'a mut T, Failure> {
    p.as_mut().ok_or_else(|| null(what))
}

unsafe fn handle<'a, T>(p: *const T, what: &str) -> Result<&'a T, Failure> {
    p.as_ref().ok_or_else(|| null(what))
}

fn embedding(id: &str, values: &[f64]) -> Result<Embedding, Failure> {
    Ok(Embedding::new(id, values.to_vec())?)
}

/// Message for the last failed call on this thread, or null after a success.
/// The pointer stays valid until the next call on this thread.
#[no_mangle]
pub extern "C" fn orig_last_error() -> *const c_char {
    LAST_ERROR.with(|e| e.borrow().as_ref().map_or(ptr::null(), |c| c.as_ptr()))
}

/// Library version as a static NUL-terminated string.
#[no_mangle]
pub extern "C" fn orig_version() -> *const c_char {
    concat!(env!("CARGO_PKG_VERSION"), "\0").as_ptr().cast()
}

fn put_backend(out: *mut *mut OrigBackend, source: Source) -> Result<(), Failure> {
    let out = unsafe { out_arg(out, "out")? };
    *out = Box::into_raw(Box::new(OrigBackend { source }));
    Ok(())
}

/// Synthetic backend from a JSON definition file.
#[no_mangle]
pub unsafe extern "C" fn orig_backend_synthetic_open(path: *const c_char, out: *mut *mut OrigBackend) -> OrigStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        let config = SyntheticConfig::load(Path::new(path))?;
        put_backend(out, Source::Synthetic(SyntheticBackend::new(config)?))
    })
}

/// Synthetic backend of a built-in validation scenario.
#[no_mangle]
pub unsafe extern "C" fn orig_backend_scenario(name: *const c_char, seed: u64, out: *mut *mut OrigBackend) -> OrigStatus {
    guard(|| {
        let name = str_arg(name, "name")?;
        let scenario = synthlab::scenario_by_name(name, seed)
            .ok_or_else(|| fail(OrigStatus::InvalidArgument, format!("unknown scenario {name:?}")))?;
        put_backend(out, Source::Synthetic(scenario.backend()?))
    })
}

/// Backend that resamples an embedding file (one JSON record per line).
#[no_mangle]
pub unsafe extern "C" fn orig_backend_corpus_open(path: *const c_char, out: *mut *mut OrigBackend) -> OrigStatus {
    guard(|| {
        let path = str_arg(path, "path")?;
        put_backend(out, Source::Corpus(CorpusBackend::load(Path::new(path))?))
    })
}

#[no_mangle]
pub unsafe extern "C" fn orig_backend_free(backend: *mut OrigBackend) {
    if !backend.is_null() {
        drop(Box::from_raw(backend));
    }
}

/// Embedding dimension of the backend's samples.
#[no_mangle]
pub unsafe extern "C" fn orig_backend_dim(backend: *const OrigBackend, dim: *mut usize) -> OrigStatus {
    guard(|| {
        let b = handle(backend, "backend")?;
        let d = b
            .backend()
            .descriptor()
            .dim
            .ok_or_else(|| fail(OrigStatus::State, "dimension not known yet"))?;
        *out_arg(dim, "dim")? = d;
        Ok(())
    })
}

/// Copies a named reference vector (synthetic: configured references;
/// corpus: item ids) into `values`. `dim` receives the required length even
/// when the buffer is too small.
#[no_mangle]
pub unsafe extern "C" fn orig_backend_reference(
    backend: *const OrigBackend,
    label: *const c_char,
    values: *mut f64,
    capacity: usize,
    dim: *mut usize,
) -> OrigStatus {
    guard(|| {
        let b = handle(backend, "backend")?;
        let label = str_arg(label, "label")?;
        let e = match &b.source {
            Source::Synthetic(s) => s.config().reference(label)?,
            Source::Corpus(c) => c
                .find(label)
                .cloned()
                .ok_or_else(|| fail(OrigStatus::InvalidArgument, format!("no item {label:?} in corpus")))?,
        };
        *out_arg(dim, "dim")? = e.dim();
        if capacity < e.dim() {
            return Err(fail(
                OrigStatus::BufferTooSmall,
                format!("reference needs {} values, buffer holds {capacity}", e.dim()),
            ));
        }
        if values.is_null() {
            return Err(null("values"));
        }
        slice::from_raw_parts_mut(values, e.dim()).copy_from_slice(e.values());
        Ok(())
    })
}

/// Draws `count` samples for `prompt`.
#[no_mangle]
pub unsafe extern "C" fn orig_generate(
    backend: *const OrigBackend,
    prompt: *const c_char,
    seed: u64,
    count: usize,
    out: *mut *mut OrigBatch,
) -> OrigStatus {
    guard(|| {
        let b = handle(backend, "backend")?;
        let prompt = str_arg(prompt, "prompt")?;
        let out = out_arg(out, "out")?;
        let batch = generate_checked(b.backend(), prompt, seed, count)?;
        *out = Box::into_raw(Box::new(OrigBatch { batch }));
        Ok(())
    })
}

/// Batch from `n * dim` row-major values.
#[no_mangle]
pub unsafe extern "C" fn orig_batch_from_values(
    values: *const f64,
    n: usize,
    dim: usize,
    out: *mut *mut OrigBatch,
) -> OrigStatus {
    guard(|| {
        if n == 0 || dim == 0 {
            return Err(fail(OrigStatus::InvalidArgument, "batch needs n >= 1 and dim >= 1"));
        }
        let len = n
            .checked_mul(dim)
            .ok_or_else(|| fail(OrigStatus::InvalidArgument, "n * dim overflows"))?;
        let values = f64_arg(values, len, "values")?;
        let out = out_arg(out, "out")?;
        let batch = SampleBatch::from_vectors("s", values.chunks(dim).map(<[f64]>::to_vec).collect())?;
        *out = Box::into_raw(Box::new(OrigBatch { batch }));
        Ok(())
    })
}

#[no_mangle]
pub unsafe extern "C" fn orig_batch_free(batch: *mut OrigBatch) {
    if !batch.is_null() {
        drop(Box::from_raw(batch));
    }
}

#[no_mangle]
pub unsafe extern "C" fn orig_batch_shape(batch: *const OrigBatch, n: *mut usize, dim: *mut usize) -> OrigStatus {
    guard(|| {
        let b = handle(batch, "batch")?;
        *out_arg(n, "n")? = b.batch.len();
        *out_arg(dim, "dim")? = b.batch.dim().unwrap_or(0);
        Ok(())
    })
}

/// Copies the batch into `values` row-major; `capacity` is in doubles.
#[no_mangle]
pub unsafe extern "C" fn orig_batch_values(batch: *const OrigBatch, values: *mut f64, capacity: usize) -> OrigStatus {
    guard(|| {
        let b = handle(batch, "batch")?;
        let need = b.batch.len() * b.batch.dim().unwrap_or(0);
        if capacity < need {
            return Err(fail(
                OrigStatus::BufferTooSmall,
                format!("batch needs {need} values, buffer holds {capacity}"),
            ));
        }
        if values.is_null() {
            return Err(null("values"));
        }
        let out = slice::from_raw_parts_mut(values, need);
        for (row, e) in out.chunks_mut(need / b.batch.len().max(1)).zip(b.batch.iter()) {
            row.copy_from_slice(e.values());
        }
        Ok(())
    })
}

/// `1 - cos(a, b)`; fails with `ORIG_STATUS_DOMAIN` on a zero vector.
#[no_mangle]
pub unsafe extern "C" fn orig_cosine_distance(a: *const f64, b: *const f64, dim: usize, out: *mut f64) -> OrigStatus {
    guard(|| {
        let a = embedding("a", f64_arg(a, dim, "a")?)?;
        let b = embedding("b", f64_arg(b, dim, "b")?)?;
        *out_arg(out, "out")? = originality::cosine_distance(&a, &b)?;
        Ok(())
    })
}

/// Mean cosine distance from `reference` to the batch. `standard_error`
/// (optional) receives the standard error, or NaN when the batch has one sample.
#[no_mangle]
pub unsafe extern "C" fn orig_estimate(
    reference: *const f64,
    dim: usize,
    batch: *const OrigBatch,
    value: *mut f64,
    standard_error_out: *mut f64,
) -> OrigStatus {
    guard(|| {
        let r = Reference::new("reference", embedding("reference", f64_arg(reference, dim, "reference")?)?);
        let b = handle(batch, "batch")?;
        let value = out_arg(value, "value")?;
        let est = originality::originality_estimate(&r, &b.batch, MetricKind::Cosine)?;
        *value = est.value;
        if let Some(se) = standard_error_out.as_mut() {
            *se = standard_error(&est).unwrap_or(f64::NAN);
        }
        Ok(())
    })
}

/// Index of the batch's most generic sample (lowest index on ties) and its
/// mean distance to the others.
#[no_mangle]
pub unsafe extern "C" fn orig_select_generic(
    batch: *const OrigBatch,
    index: *mut usize,
    cross_mean_distance: *mut f64,
) -> OrigStatus {
    guard(|| {
        let b = handle(batch, "batch")?;
        let index = out_arg(index, "index")?;
        let sel = originality::select_generic(&b.batch, MetricKind::Cosine)?;
        *index = sel.selected_index;
        if let Some(d) = cross_mean_distance.as_mut() {
            *d = sel.cross_mean_distance;
        }
        Ok(())
    })
}

/// `m` independent estimates of `n` samples each for `prompt`.
#[no_mangle]
pub unsafe extern "C" fn orig_repeated_estimates(
    backend: *const OrigBackend,
    prompt: *const c_char,
    reference: *const f64,
    dim: usize,
    seed: u64,
    n: usize,
    m: usize,
    parallelism: usize,
    out: *mut OrigSummary,
) -> OrigStatus {
    guard(|| {
        let b = handle(backend, "backend")?;
        let prompt = str_arg(prompt, "prompt")?;
        let r = Reference::new("reference", embedding("reference", f64_arg(reference, dim, "reference")?)?);
        let out = out_arg(out, "out")?;
        if n == 0 || m == 0 {
            return Err(fail(OrigStatus::InvalidArgument, "n and m must be at least 1"));
        }
        let cond = Conditioning::for_backend(prompt, b.backend(), seed)?;
        let opts = RunOptions {
            parallelism: parallelism.max(1),
        };
        let s = repeated_estimates(b.backend(), &r, &cond, n, m, MetricKind::Cosine, opts, &mut NullSink::default())?;
        *out = OrigSummary {
            mean: s.mean,
            std: s.std,
            m: s.m(),
            n,
            degenerate: s.degenerate,
        };
        Ok(())
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nested_errors_map_to_their_cause() {
        let inner = Error::Contract("dim".into());
        let wrapped = Error::StreamInterrupted {
            completed: 3,
            source: Box::new(Error::Batch {
                batch: 3,
                source: Box::new(inner),
            }),
        };
        assert_eq!(status_of(&wrapped), OrigStatus::Contract);
        assert_eq!(status_of(&Error::Timeout { attempts: 2 }), OrigStatus::Timeout);
    }

    #[test]
    fn panics_become_a_status() {
        assert_eq!(guard(|| panic!("boom")), OrigStatus::Panic);
        assert!(!orig_last_error().is_null());
        assert_eq!(guard(|| Ok(())), OrigStatus::Ok);
        assert!(orig_last_error().is_null());
    }

    #[test]
    fn interior_nul_in_message_is_replaced() {
        set_error("a\0b".into());
        let msg = unsafe { CStr::from_ptr(orig_last_error()) };
        assert_eq!(msg.to_str().unwrap(), "a b");
    }
}
