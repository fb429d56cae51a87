//! Append-only run manifests.
//!
//! A manifest file starts with one header line:
//!
//! ```text
//! #originality-manifest v1 {"run_id":..,"created_unix_ms":..,..}
//! ```
//!
//! followed by framed records, one per line:
//!
//! ```text
//! <len:08x> <crc32:08x> <json body>\n
//! ```
//!
//! `len` is the body's byte length and `crc32` its IEEE checksum. A reader
//! stops at the first frame that is incomplete or fails its checksum, so a
//! crash mid-append leaves a readable prefix. Timestamps appear only in the
//! header; record bodies are a pure function of the run's configuration.

use std::fs::{self, File, OpenOptions};
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};
use std::time::{SystemTime, UNIX_EPOCH};

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::store::cache::CONTENT_HASH_ALGORITHM;

pub const MANIFEST_MAGIC: &str = "#originality-manifest";
pub const MANIFEST_VERSION: u32 = 1;
pub const STD_CONVENTION: &str = "population";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestHeader {
    pub run_id: String,
    pub created_unix_ms: u64,
    pub content_hash: String,
    pub frame: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Phase {
    /// Batches the reference is compared against.
    Reference,
    /// Fresh samples whose own originality gives the typicality baseline.
    Probe,
    /// Batches each probe is compared against.
    Typicality,
    /// Batches genericization selects from.
    Genericize,
    /// Batches used to rank selected samples by their own originality.
    Anchor,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Subject {
    Reference,
    Probe,
    Selection,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReferenceSnapshot {
    pub label: String,
    pub values: Vec<f64>,
}

/// Everything needed to reproduce a run. Written before any sampling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ConfigSnapshot {
    pub command: String,
    pub backend: String,
    pub metric: String,
    pub prompts: Vec<String>,
    pub n: usize,
    pub m: Option<usize>,
    pub k: Option<usize>,
    pub seed_base: u64,
    pub bins: usize,
    pub parallelism: usize,
    pub cache: bool,
    pub std_convention: String,
    pub content_hash: String,
    pub reference: Option<ReferenceSnapshot>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SampleRecord {
    pub prompt: String,
    pub phase: Phase,
    pub batch: usize,
    pub index: usize,
    pub id: String,
    pub values: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EstimateRecord {
    pub prompt: String,
    pub subject: Subject,
    pub subject_id: String,
    pub batch: usize,
    pub metric: String,
    pub n: usize,
    pub value: f64,
    pub distances: Vec<f64>,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SummaryRecord {
    pub prompt: String,
    pub subject: Subject,
    pub metric: String,
    pub m: usize,
    pub n: usize,
    pub mean: f64,
    pub std: f64,
    pub std_convention: String,
    pub degenerate: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SelectionRecord {
    pub prompt: String,
    pub batch: usize,
    pub selected_index: usize,
    pub selected_id: String,
    pub cross_mean_distance: f64,
    pub scores: Vec<f64>,
}

/// The selected sample with the lowest estimated originality.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AnchorRecord {
    pub prompt: String,
    pub batch: usize,
    pub index: usize,
    pub sample_id: String,
    pub originality: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReportRecord {
    pub prompt: String,
    pub name: String,
    pub file: String,
    pub sha256: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum Entry {
    Config(ConfigSnapshot),
    Sample(SampleRecord),
    Estimate(EstimateRecord),
    Summary(SummaryRecord),
    Selection(SelectionRecord),
    Anchor(AnchorRecord),
    Report(ReportRecord),
}

impl Entry {
    pub fn kind(&self) -> &'static str {
        match self {
            Entry::Config(_) => "config",
            Entry::Sample(_) => "sample",
            Entry::Estimate(_) => "estimate",
            Entry::Summary(_) => "summary",
            Entry::Selection(_) => "selection",
            Entry::Anchor(_) => "anchor",
            Entry::Report(_) => "report",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ManifestRecord {
    pub seq: u64,
    #[serde(flatten)]
    pub entry: Entry,
}

/// Anything records can be appended to.
pub trait RecordSink {
    fn append(&mut self, entry: Entry) -> Result<u64>;
}

/// Discards records.
#[derive(Debug, Default)]
pub struct NullSink {
    seq: u64,
}

impl RecordSink for NullSink {
    fn append(&mut self, _entry: Entry) -> Result<u64> {
        self.seq += 1;
        Ok(self.seq)
    }
}

/// Single-writer handle on one run's manifest.
#[derive(Debug)]
pub struct RunManifest {
    header: ManifestHeader,
    records: Vec<ManifestRecord>,
    writer: Option<BufWriter<File>>,
    path: Option<PathBuf>,
    next_seq: u64,
    closed: bool,
    dirty: bool,
}

fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

fn header_line(header: &ManifestHeader) -> Result<String> {
    Ok(format!(
        "{MANIFEST_MAGIC} v{MANIFEST_VERSION} {}\n",
        serde_json::to_string(header)?
    ))
}

pub(crate) fn frame(body: &str) -> String {
    format!("{:08x} {:08x} {body}\n", body.len(), crc32fast::hash(body.as_bytes()))
}

impl RunManifest {
    fn header(run_id: &str) -> ManifestHeader {
        ManifestHeader {
            run_id: run_id.to_string(),
            created_unix_ms: now_ms(),
            content_hash: CONTENT_HASH_ALGORITHM.to_string(),
            frame: "len-crc32".to_string(),
        }
    }

    /// Creates (truncating) a manifest file and writes its header.
    pub fn create(path: &Path, run_id: &str) -> Result<Self> {
        if let Some(parent) = path.parent().filter(|p| !p.as_os_str().is_empty()) {
            fs::create_dir_all(parent)?;
        }
        let header = Self::header(run_id);
        let mut writer = BufWriter::new(File::create(path)?);
        writer.write_all(header_line(&header)?.as_bytes())?;
        writer.flush()?;
        Ok(RunManifest {
            header,
            records: Vec::new(),
            writer: Some(writer),
            path: Some(path.to_path_buf()),
            next_seq: 1,
            closed: false,
            dirty: false,
        })
    }

    pub fn in_memory(run_id: &str) -> Self {
        RunManifest {
            header: Self::header(run_id),
            records: Vec::new(),
            writer: None,
            path: None,
            next_seq: 1,
            closed: false,
            dirty: false,
        }
    }

    /// Reopens an existing file for further appends, keeping its valid prefix.
    /// A torn tail is cut off before appending resumes.
    pub fn reopen(path: &Path) -> Result<Self> {
        let loaded = load(path)?;
        let keep = loaded.valid_bytes;
        let file = OpenOptions::new().write(true).open(path)?;
        file.set_len(keep as u64)?;
        let mut file = OpenOptions::new().append(true).open(path)?;
        file.flush()?;
        let next_seq = loaded.records.last().map_or(1, |r| r.seq + 1);
        Ok(RunManifest {
            header: loaded.header,
            records: loaded.records,
            writer: Some(BufWriter::new(file)),
            path: Some(path.to_path_buf()),
            next_seq,
            closed: false,
            dirty: false,
        })
    }

    pub fn run_header(&self) -> &ManifestHeader {
        &self.header
    }

    pub fn records(&self) -> &[ManifestRecord] {
        &self.records
    }

    pub fn path(&self) -> Option<&Path> {
        self.path.as_deref()
    }

    pub fn is_closed(&self) -> bool {
        self.closed
    }

    pub fn is_dirty(&self) -> bool {
        self.dirty
    }

    /// Flushes and syncs; later appends fail with a state error.
    pub fn close(&mut self) -> Result<()> {
        if self.closed {
            return Ok(());
        }
        self.closed = true;
        if let Some(mut w) = self.writer.take() {
            w.flush()?;
            w.get_ref().sync_all()?;
        }
        Ok(())
    }

    fn write_frame(&mut self, line: &str) -> std::io::Result<()> {
        if let Some(w) = &mut self.writer {
            w.write_all(line.as_bytes())?;
            w.flush()?;
        }
        Ok(())
    }
}

impl RecordSink for RunManifest {
    fn append(&mut self, entry: Entry) -> Result<u64> {
        if self.closed {
            return Err(Error::State(format!("run {} is closed", self.header.run_id)));
        }
        if self.dirty {
            return Err(Error::State(format!(
                "run {} is dirty after a storage failure",
                self.header.run_id
            )));
        }
        let record = ManifestRecord {
            seq: self.next_seq,
            entry,
        };
        let body = serde_json::to_string(&record)?;
        if let Err(e) = self.write_frame(&frame(&body)) {
            self.dirty = true;
            return Err(Error::Storage(e));
        }
        self.next_seq += 1;
        self.records.push(record);
        Ok(self.next_seq - 1)
    }
}

impl Drop for RunManifest {
    fn drop(&mut self) {
        if let Some(w) = &mut self.writer {
            let _ = w.flush();
        }
    }
}

#[derive(Debug, Clone)]
pub struct LoadedManifest {
    pub header: ManifestHeader,
    pub records: Vec<ManifestRecord>,
    /// True when a torn or corrupt tail was dropped.
    pub truncated: bool,
    valid_bytes: usize,
}

fn parse_frame(line: &str) -> Option<&str> {
    let (len, rest) = line.split_once(' ')?;
    let (crc, body) = rest.split_once(' ')?;
    let len = usize::from_str_radix(len, 16).ok()?;
    let crc = u32::from_str_radix(crc, 16).ok()?;
    (body.len() == len && crc32fast::hash(body.as_bytes()) == crc).then_some(body)
}

pub fn load(path: &Path) -> Result<LoadedManifest> {
    let bytes = fs::read(path)?;
    parse(&bytes)
}

/// Parses manifest bytes, keeping the longest valid prefix of records.
pub fn parse(bytes: &[u8]) -> Result<LoadedManifest> {
    let header_end = bytes
        .iter()
        .position(|b| *b == b'\n')
        .ok_or_else(|| Error::Format {
            line: 1,
            message: "missing manifest header".into(),
        })?;
    let header_text = std::str::from_utf8(&bytes[..header_end]).map_err(|e| Error::Format {
        line: 1,
        message: e.to_string(),
    })?;
    let prefix = format!("{MANIFEST_MAGIC} v{MANIFEST_VERSION} ");
    let header_json = header_text.strip_prefix(&prefix).ok_or_else(|| Error::Format {
        line: 1,
        message: format!("not a v{MANIFEST_VERSION} manifest header"),
    })?;
    let header: ManifestHeader = serde_json::from_str(header_json).map_err(|e| Error::Format {
        line: 1,
        message: e.to_string(),
    })?;

    let mut records = Vec::new();
    let mut pos = header_end + 1;
    let mut truncated = false;
    let mut last_seq = 0;
    while pos < bytes.len() {
        let Some(nl) = bytes[pos..].iter().position(|b| *b == b'\n') else {
            truncated = true;
            break;
        };
        let line = &bytes[pos..pos + nl];
        let record = std::str::from_utf8(line)
            .ok()
            .and_then(parse_frame)
            .and_then(|body| serde_json::from_str::<ManifestRecord>(body).ok())
            .filter(|r| r.seq > last_seq);
        match record {
            Some(r) => {
                last_seq = r.seq;
                records.push(r);
                pos += nl + 1;
            }
            None => {
                truncated = true;
                break;
            }
        }
    }
    Ok(LoadedManifest {
        header,
        records,
        truncated,
        valid_bytes: pos,
    })
}

/// The framed record lines of a manifest file, header excluded.
pub fn record_bodies(path: &Path) -> Result<Vec<String>> {
    let text = fs::read_to_string(path)?;
    Ok(text.lines().skip(1).map(str::to_string).collect())
}

/// Checks manifest-level invariants: increasing sequence numbers, every
/// selection pointing at an existing genericize sample of the same batch,
/// and genericize sample counts matching `k * n` from the config snapshot.
pub fn check_invariants(records: &[ManifestRecord]) -> Result<()> {
    use std::collections::{BTreeMap, HashSet};

    let mut last = 0;
    for r in records {
        if r.seq <= last {
            return Err(Error::State(format!("sequence {} follows {last}", r.seq)));
        }
        last = r.seq;
    }
    let mut samples: HashSet<(&str, usize, usize)> = HashSet::new();
    let mut counts: BTreeMap<&str, usize> = BTreeMap::new();
    for r in records {
        if let Entry::Sample(s) = &r.entry {
            if s.phase == Phase::Genericize {
                samples.insert((s.prompt.as_str(), s.batch, s.index));
                *counts.entry(s.prompt.as_str()).or_default() += 1;
            }
        }
    }
    for r in records {
        if let Entry::Selection(sel) = &r.entry {
            if !samples.contains(&(sel.prompt.as_str(), sel.batch, sel.selected_index)) {
                return Err(Error::State(format!(
                    "selection in batch {} of {:?} points at missing sample {}",
                    sel.batch, sel.prompt, sel.selected_index
                )));
            }
        }
    }
    let config = records.iter().find_map(|r| match &r.entry {
        Entry::Config(c) => Some(c),
        _ => None,
    });
    if let Some(cfg) = config {
        if let Some(k) = cfg.k {
            for prompt in &cfg.prompts {
                let got = counts.get(prompt.as_str()).copied().unwrap_or(0);
                if got != k * cfg.n {
                    return Err(Error::State(format!(
                        "prompt {prompt:?} has {got} genericize samples, expected {}",
                        k * cfg.n
                    )));
                }
            }
        }
    }
    Ok(())
}
