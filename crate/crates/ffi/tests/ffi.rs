use std::ffi::{CStr, CString};
use std::path::{Path, PathBuf};
use std::process::Command;
use std::ptr;

use originality::backends::{generate_checked, write_embedding_file, GeneratorBackend};
use originality::estimator::{repeated_estimates, Conditioning, Reference, RunOptions};
use originality::store::NullSink;
use originality::{synthlab, Embedding, MetricKind};
use originality_ffi::*;

const SEED: u64 = synthlab::DEFAULT_SCENARIO_SEED;

fn c(s: &str) -> CString {
    CString::new(s).unwrap()
}

fn last_error() -> String {
    let p = orig_last_error();
    assert!(!p.is_null());
    unsafe { CStr::from_ptr(p) }.to_string_lossy().into_owned()
}

struct Backend(*mut OrigBackend);

impl Drop for Backend {
    fn drop(&mut self) {
        unsafe { orig_backend_free(self.0) }
    }
}

struct Batch(*mut OrigBatch);

impl Drop for Batch {
    fn drop(&mut self) {
        unsafe { orig_batch_free(self.0) }
    }
}

fn ladder() -> Backend {
    let mut b = ptr::null_mut();
    let name = c("abstraction_ladder");
    assert_eq!(unsafe { orig_backend_scenario(name.as_ptr(), SEED, &mut b) }, OrigStatus::Ok);
    Backend(b)
}

fn reference(b: &Backend) -> Vec<f64> {
    let mut dim = 0;
    let label = c("planted");
    assert_eq!(
        unsafe { orig_backend_reference(b.0, label.as_ptr(), ptr::null_mut(), 0, &mut dim) },
        OrigStatus::BufferTooSmall
    );
    let mut values = vec![0.0; dim];
    assert_eq!(
        unsafe { orig_backend_reference(b.0, label.as_ptr(), values.as_mut_ptr(), dim, &mut dim) },
        OrigStatus::Ok
    );
    values
}

#[test]
fn generate_matches_the_library() {
    let b = ladder();
    let prompt = c("a bird");
    let mut batch = ptr::null_mut();
    assert_eq!(unsafe { orig_generate(b.0, prompt.as_ptr(), 7, 12, &mut batch) }, OrigStatus::Ok);
    let batch = Batch(batch);
    let (mut n, mut dim) = (0, 0);
    assert_eq!(unsafe { orig_batch_shape(batch.0, &mut n, &mut dim) }, OrigStatus::Ok);
    assert_eq!((n, dim), (12, synthlab::SCENARIO_DIM));
    let mut values = vec![0.0; n * dim];
    assert_eq!(unsafe { orig_batch_values(batch.0, values.as_mut_ptr(), values.len()) }, OrigStatus::Ok);

    let lib = synthlab::scenario_abstraction_ladder(SEED).backend().unwrap();
    let want = generate_checked(&lib, "a bird", 7, 12).unwrap();
    for (row, e) in values.chunks(dim).zip(want.iter()) {
        assert_eq!(row, e.values());
    }
    assert_eq!(
        unsafe { orig_batch_values(batch.0, values.as_mut_ptr(), values.len() - 1) },
        OrigStatus::BufferTooSmall
    );
}

#[test]
fn estimate_and_selection_on_a_hand_built_batch() {
    // Two copies of e1 and one e2; the reference is e1.
    let values = [1.0, 0.0, 1.0, 0.0, 0.0, 1.0];
    let mut batch = ptr::null_mut();
    assert_eq!(unsafe { orig_batch_from_values(values.as_ptr(), 3, 2, &mut batch) }, OrigStatus::Ok);
    let batch = Batch(batch);
    let r = [1.0, 0.0];
    let (mut v, mut se) = (0.0, 0.0);
    assert_eq!(unsafe { orig_estimate(r.as_ptr(), 2, batch.0, &mut v, &mut se) }, OrigStatus::Ok);
    assert!((v - 1.0 / 3.0).abs() < 1e-15);
    // Sample std of {0, 0, 1} is sqrt(1/3); divided by sqrt(3).
    assert!((se - 1.0 / 3.0).abs() < 1e-15);

    let (mut idx, mut score) = (99, 0.0);
    assert_eq!(unsafe { orig_select_generic(batch.0, &mut idx, &mut score) }, OrigStatus::Ok);
    assert_eq!(idx, 0);
    assert!((score - 0.5).abs() < 1e-15);
}

#[test]
fn single_sample_estimate_has_nan_standard_error() {
    let values = [0.6, 0.8];
    let mut batch = ptr::null_mut();
    assert_eq!(unsafe { orig_batch_from_values(values.as_ptr(), 1, 2, &mut batch) }, OrigStatus::Ok);
    let batch = Batch(batch);
    let (mut v, mut se) = (1.0, 0.0);
    assert_eq!(unsafe { orig_estimate(values.as_ptr(), 2, batch.0, &mut v, &mut se) }, OrigStatus::Ok);
    assert!(v.abs() < 1e-15);
    assert!(se.is_nan());
    let mut idx = 0;
    assert_eq!(unsafe { orig_select_generic(batch.0, &mut idx, ptr::null_mut()) }, OrigStatus::Domain);
    assert!(last_error().contains("at least 2"));
}

#[test]
fn cosine_distance_and_zero_vectors() {
    let a = [1.0, 0.0];
    let b = [0.0, 3.0];
    let mut d = 0.0;
    assert_eq!(unsafe { orig_cosine_distance(a.as_ptr(), b.as_ptr(), 2, &mut d) }, OrigStatus::Ok);
    assert!((d - 1.0).abs() < 1e-15);
    assert!(orig_last_error().is_null());
    let z = [0.0, 0.0];
    let status = unsafe { orig_cosine_distance(a.as_ptr(), z.as_ptr(), 2, &mut d) };
    assert_ne!(status, OrigStatus::Ok);
    assert!(!last_error().is_empty());
}

#[test]
fn repeated_estimates_match_the_library() {
    let b = ladder();
    let r = reference(&b);
    let prompt = c("a bird");
    let mut s = OrigSummary::default();
    let status = unsafe { orig_repeated_estimates(b.0, prompt.as_ptr(), r.as_ptr(), r.len(), 3, 10, 5, 2, &mut s) };
    assert_eq!(status, OrigStatus::Ok);

    let lib = synthlab::scenario_abstraction_ladder(SEED).backend().unwrap();
    let reference = Reference::new("reference", Embedding::new("reference", r).unwrap());
    let cond = Conditioning::for_backend("a bird", &lib, 3).unwrap();
    let want = repeated_estimates(&lib, &reference, &cond, 10, 5, MetricKind::Cosine, RunOptions { parallelism: 1 }, &mut NullSink::default())
        .unwrap();
    assert_eq!(s.mean, want.mean);
    assert_eq!(s.std, want.std);
    assert_eq!((s.m, s.n, s.degenerate), (5, 10, false));
}

#[test]
fn corpus_backend_round_trip() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("corpus.jsonl");
    let items: Vec<Embedding> = (0..4).map(|i| Embedding::new(format!("c{i}"), vec![1.0, i as f64]).unwrap()).collect();
    write_embedding_file(&path, &items).unwrap();
    let p = c(path.to_str().unwrap());
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { orig_backend_corpus_open(p.as_ptr(), &mut b) }, OrigStatus::Ok);
    let b = Backend(b);
    let mut dim = 0;
    assert_eq!(unsafe { orig_backend_dim(b.0, &mut dim) }, OrigStatus::Ok);
    assert_eq!(dim, 2);
    let mut v = [0.0; 2];
    let id = c("c3");
    assert_eq!(unsafe { orig_backend_reference(b.0, id.as_ptr(), v.as_mut_ptr(), 2, &mut dim) }, OrigStatus::Ok);
    assert_eq!(v, [1.0, 3.0]);
}

#[test]
fn synthetic_backend_from_file() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("s.json");
    let config = synthlab::scenario_planted_unique(1).config;
    std::fs::write(&path, serde_json::to_string(&config).unwrap()).unwrap();
    let p = c(path.to_str().unwrap());
    let mut b = ptr::null_mut();
    assert_eq!(unsafe { orig_backend_synthetic_open(p.as_ptr(), &mut b) }, OrigStatus::Ok);
    let b = Backend(b);
    let mut dim = 0;
    assert_eq!(unsafe { orig_backend_dim(b.0, &mut dim) }, OrigStatus::Ok);
    assert_eq!(Some(dim), synthlab::scenario_planted_unique(1).backend().unwrap().descriptor().dim);
}

#[test]
fn bad_arguments_set_status_and_message() {
    let mut b = ptr::null_mut();
    let missing = c("/nonexistent/definition.json");
    assert_eq!(unsafe { orig_backend_synthetic_open(missing.as_ptr(), &mut b) }, OrigStatus::Storage);
    assert!(b.is_null());
    let unknown = c("nope");
    assert_eq!(unsafe { orig_backend_scenario(unknown.as_ptr(), 1, &mut b) }, OrigStatus::InvalidArgument);
    assert!(last_error().contains("nope"));
    assert_eq!(unsafe { orig_backend_scenario(ptr::null(), 1, &mut b) }, OrigStatus::NullPointer);
    assert_eq!(unsafe { orig_backend_scenario(unknown.as_ptr(), 1, ptr::null_mut()) }, OrigStatus::InvalidArgument);

    let backend = ladder();
    let prompt = c("a bird");
    let mut batch = ptr::null_mut();
    assert_eq!(unsafe { orig_generate(backend.0, prompt.as_ptr(), 1, 0, &mut batch) }, OrigStatus::InvalidArgument);
    let empty = c("");
    let r = reference(&backend);
    let mut s = OrigSummary::default();
    assert_eq!(
        unsafe { orig_repeated_estimates(backend.0, empty.as_ptr(), r.as_ptr(), r.len(), 1, 2, 2, 1, &mut s) },
        OrigStatus::InvalidArgument
    );
    assert_eq!(
        unsafe { orig_repeated_estimates(backend.0, prompt.as_ptr(), r.as_ptr(), 3, 1, 2, 2, 1, &mut s) },
        OrigStatus::InvalidArgument
    );
    unsafe {
        orig_backend_free(ptr::null_mut());
        orig_batch_free(ptr::null_mut());
    }
}

#[test]
fn version_is_the_crate_version() {
    let v = unsafe { CStr::from_ptr(orig_version()) };
    assert_eq!(v.to_str().unwrap(), env!("CARGO_PKG_VERSION"));
}

fn crate_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR"))
}

#[test]
fn header_declares_every_export() {
    let header = std::fs::read_to_string(crate_dir().join("include/originality.h")).unwrap();
    let source = std::fs::read_to_string(crate_dir().join("src/lib.rs")).unwrap();
    let exports: Vec<&str> = source
        .split("extern \"C\" fn ")
        .skip(1)
        .map(|rest| rest.split('(').next().unwrap())
        .collect();
    assert!(exports.len() >= 14);
    for name in exports {
        assert!(header.contains(&format!("{name}(")), "{name} missing from header");
    }
    for ty in ["typedef struct OrigBackend OrigBackend;", "typedef struct OrigBatch OrigBatch;", "ORIG_STATUS_OK = 0"] {
        assert!(header.contains(ty), "{ty}");
    }
}

/// Directory holding the library artifacts (`target/<profile>`).
fn artifact_dir() -> PathBuf {
    let exe = std::env::current_exe().unwrap();
    exe.parent().and_then(Path::parent).unwrap().to_path_buf()
}

#[test]
fn c_program_links_against_the_static_library() {
    let lib = artifact_dir().join("liboriginality_ffi.a");
    let compiler = std::env::var("CC").unwrap_or_else(|_| "cc".into());
    if !lib.is_file() || Command::new(&compiler).arg("--version").output().is_err() {
        eprintln!("skipping: no static library at {} or no C compiler", lib.display());
        return;
    }
    let dir = tempfile::tempdir().unwrap();
    let exe = dir.path().join("smoke");
    let status = Command::new(&compiler)
        .arg("-std=c99")
        .arg("-Wall")
        .arg("-Werror")
        .arg("-I")
        .arg(crate_dir().join("include"))
        .arg(crate_dir().join("tests/c/smoke.c"))
        .arg(&lib)
        .args(["-lpthread", "-ldl", "-lm"])
        .arg("-o")
        .arg(&exe)
        .status()
        .unwrap();
    assert!(status.success(), "C compilation failed");
    let out = Command::new(&exe).output().unwrap();
    let stdout = String::from_utf8_lossy(&out.stdout);
    assert!(out.status.success(), "{stdout}\n{}", String::from_utf8_lossy(&out.stderr));

    let lib_backend = synthlab::scenario_abstraction_ladder(SEED).backend().unwrap();
    let batch = generate_checked(&lib_backend, "a bird", 7, 40).unwrap();
    let scenario = synthlab::scenario_abstraction_ladder(SEED);
    let est = originality::originality_estimate(&scenario.reference, &batch, MetricKind::Cosine).unwrap();
    let sel = originality::select_generic(&batch, MetricKind::Cosine).unwrap();
    let field = |key: &str| -> Vec<String> {
        stdout
            .lines()
            .find(|l| l.starts_with(key))
            .unwrap_or_else(|| panic!("no {key} line in {stdout}"))
            .split_whitespace()
            .map(String::from)
            .collect()
    };
    assert_eq!(field("estimate")[1].parse::<f64>().unwrap(), est.value);
    assert_eq!(field("selected")[1].parse::<usize>().unwrap(), sel.selected_index);
    assert_eq!(field("dim")[1], synthlab::SCENARIO_DIM.to_string());
}
