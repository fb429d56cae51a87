//! Command-line front end.
//!
//! Exit codes: 0 on success, 1 on runtime or assertion failure, 2 on usage
//! or configuration errors.

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use clap::{Args, Parser, Subcommand, ValueEnum};
use serde::Deserialize;

use crate::backends::{
    read_embedding_file, CorpusBackend, GeneratorBackend, HttpBackend, HttpConfig, SyntheticBackend, SyntheticConfig,
};
use crate::embedding::{Embedding, MetricKind};
use crate::error::Error;
use crate::estimator::{repeated_estimates, typicality_summary, Conditioning, Reference, RunOptions};
use crate::genericizer::{
    genericize_stream, most_generic_reference, similarity_report, top_similar, Binning, GenericizeSlice,
    DEFAULT_BINS,
};
use crate::store::{
    content_hash, export_records, load_manifest, similarity_report_csv, top_similar_csv, ConfigSnapshot,
    EmbeddingCache, Entry, ExportFormat, ManifestRecord, RecordSink, ReferenceSnapshot, ReportRecord,
    RunManifest, Subject, SummaryRecord, STD_CONVENTION,
};
use crate::synthlab::{self, ProtocolConfig, DEFAULT_SCENARIO_SEED};

pub const MANIFEST_FILE: &str = "run.manifest";
pub const SUMMARY_FILE: &str = "estimate_summary.csv";

#[derive(Debug, Parser)]
#[command(name = "originality", version, about = "Estimate originality and genericize generative outputs")]
pub struct Cli {
    #[command(subcommand)]
    pub command: Command,
}

#[derive(Debug, Subcommand)]
pub enum Command {
    /// Estimate the reference's originality and the typicality baseline per prompt.
    Estimate(RunArgs),
    /// Select the most generic sample from each of K batches.
    Genericize(RunArgs),
    /// Recompute similarity reports from a stored manifest.
    Report(ReportArgs),
    /// Run the built-in scenarios and check their expected outcomes.
    Validate(ValidateArgs),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, ValueEnum, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BackendKind {
    Synthetic,
    Corpus,
    Http,
}

#[derive(Debug, Clone, Default, Args)]
pub struct RunArgs {
    /// TOML file with defaults for any of these flags; flags win.
    #[arg(long)]
    pub config: Option<PathBuf>,
    #[arg(long, value_enum)]
    pub backend: Option<BackendKind>,
    /// Base URL of the model service.
    #[arg(long)]
    pub endpoint: Option<String>,
    /// Synthetic backend definition (JSON). Defaults to the built-in ladder scenario.
    #[arg(long)]
    pub mixture_config: Option<PathBuf>,
    /// Embedding file for the corpus backend.
    #[arg(long)]
    pub corpus: Option<PathBuf>,
    /// Embedder to request from an HTTP backend.
    #[arg(long)]
    pub embedder: Option<String>,
    /// Distance metric (only `cosine`).
    #[arg(long)]
    pub metric: Option<String>,
    /// Conditioning prompt; repeat for several.
    #[arg(long = "prompt")]
    pub prompts: Vec<String>,
    /// Reference id known to the backend, an embedding file PATH, or PATH#ID.
    #[arg(long)]
    pub reference: Option<String>,
    /// Samples per estimate and per genericize batch.
    #[arg(long)]
    pub n: Option<usize>,
    /// Repeated estimates per prompt.
    #[arg(long)]
    pub m: Option<usize>,
    /// Number of genericize batches.
    #[arg(long)]
    pub k: Option<usize>,
    /// Base of every derived random stream.
    #[arg(long)]
    pub seed: Option<u64>,
    /// Histogram bins in similarity reports.
    #[arg(long)]
    pub bins: Option<usize>,
    /// Worker threads (and concurrent HTTP requests).
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Output directory for the manifest, tables and reports.
    #[arg(long)]
    pub out: Option<PathBuf>,
    /// Do not cache embeddings computed by an HTTP backend.
    #[arg(long)]
    pub no_cache: bool,
    /// Selection export format: `csv` or `jsonl`.
    #[arg(long)]
    pub format: Option<String>,
    /// Rows in the top-similar report.
    #[arg(long)]
    pub top_k: Option<usize>,
    /// Bin similarity histograms over [-1, 1] instead of the observed range.
    #[arg(long)]
    pub fixed_range: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ReportArgs {
    #[arg(long)]
    pub manifest: PathBuf,
    /// Embedding file PATH or PATH#ID; defaults to the reference recorded in the run.
    #[arg(long)]
    pub reference: Option<String>,
    #[arg(long)]
    pub out: Option<PathBuf>,
    #[arg(long)]
    pub metric: Option<String>,
    #[arg(long)]
    pub bins: Option<usize>,
    #[arg(long)]
    pub top_k: Option<usize>,
    #[arg(long)]
    pub fixed_range: bool,
}

#[derive(Debug, Clone, Default, Args)]
pub struct ValidateArgs {
    /// Print scenario names and exit.
    #[arg(long)]
    pub list: bool,
    #[arg(long)]
    pub seed: Option<u64>,
    /// Run only the named scenario.
    #[arg(long)]
    pub scenario: Option<String>,
    /// Run the control scenario built to fail suppression.
    #[arg(long)]
    pub negative_control: bool,
    #[arg(long)]
    pub parallelism: Option<usize>,
    /// Also write the reports as JSON.
    #[arg(long)]
    pub json: Option<PathBuf>,
}

/// Optional config file; keys mirror the long flags.
#[derive(Debug, Default, Deserialize)]
#[serde(rename_all = "kebab-case", deny_unknown_fields)]
struct FileConfig {
    backend: Option<BackendKind>,
    endpoint: Option<String>,
    mixture_config: Option<PathBuf>,
    corpus: Option<PathBuf>,
    embedder: Option<String>,
    metric: Option<String>,
    #[serde(default)]
    prompt: Vec<String>,
    reference: Option<String>,
    n: Option<usize>,
    m: Option<usize>,
    k: Option<usize>,
    seed: Option<u64>,
    bins: Option<usize>,
    parallelism: Option<usize>,
    out: Option<PathBuf>,
    #[serde(default)]
    no_cache: bool,
    format: Option<String>,
    top_k: Option<usize>,
    #[serde(default)]
    fixed_range: bool,
}

#[derive(Debug)]
pub enum CliError {
    Usage(String),
    Runtime(Error),
    /// Validation ran but expectations failed.
    Failed(String),
}

impl CliError {
    pub fn exit_code(&self) -> i32 {
        match self {
            CliError::Usage(_) => 2,
            CliError::Runtime(_) | CliError::Failed(_) => 1,
        }
    }
}

impl std::fmt::Display for CliError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            CliError::Usage(m) => write!(f, "usage error: {m}"),
            CliError::Runtime(e) => write!(f, "{e}"),
            CliError::Failed(m) => f.write_str(m),
        }
    }
}

impl From<Error> for CliError {
    fn from(e: Error) -> Self {
        CliError::Runtime(e)
    }
}

impl From<std::io::Error> for CliError {
    fn from(e: std::io::Error) -> Self {
        CliError::Runtime(Error::Storage(e))
    }
}

type CliResult<T> = std::result::Result<T, CliError>;

fn usage(msg: impl Into<String>) -> CliError {
    CliError::Usage(msg.into())
}

/// Setup failures caused by bad files or flags are usage errors; endpoint
/// failures are runtime errors.
fn setup(e: Error) -> CliError {
    match e.root() {
        Error::Transport { .. } | Error::Timeout { .. } | Error::Status { .. } | Error::Protocol(_) => {
            CliError::Runtime(e)
        }
        _ => CliError::Usage(e.to_string()),
    }
}

/// Fully resolved run configuration.
#[derive(Debug, Clone)]
pub struct RunConfig {
    pub backend: BackendKind,
    pub endpoint: Option<String>,
    pub mixture_config: Option<PathBuf>,
    pub corpus: Option<PathBuf>,
    pub embedder: Option<String>,
    pub metric: MetricKind,
    pub prompts: Vec<String>,
    pub reference: Option<String>,
    pub n: usize,
    pub m: usize,
    pub k: usize,
    pub seed: u64,
    pub bins: usize,
    pub parallelism: usize,
    pub out: PathBuf,
    pub cache: bool,
    pub format: ExportFormat,
    pub top_k: usize,
    pub binning: Binning,
}

fn default_parallelism() -> usize {
    std::thread::available_parallelism().map_or(1, |p| p.get())
}

fn binning(fixed: bool) -> Binning {
    if fixed {
        Binning::Fixed(-1.0, 1.0)
    } else {
        Binning::Observed
    }
}

fn parse_metric(s: Option<&str>) -> CliResult<MetricKind> {
    s.map_or(Ok(MetricKind::Cosine), |m| m.parse().map_err(|e: Error| usage(e.to_string())))
}

impl RunConfig {
    pub fn resolve(args: &RunArgs) -> CliResult<Self> {
        let file: FileConfig = match &args.config {
            Some(path) => {
                let text = fs::read_to_string(path)
                    .map_err(|e| usage(format!("cannot read config {}: {e}", path.display())))?;
                toml::from_str(&text).map_err(|e| usage(format!("invalid config {}: {e}", path.display())))?
            }
            None => FileConfig::default(),
        };
        let a = args.clone();
        let format = a.format.or(file.format);
        let cfg = RunConfig {
            backend: a.backend.or(file.backend).unwrap_or(BackendKind::Synthetic),
            endpoint: a.endpoint.or(file.endpoint),
            mixture_config: a.mixture_config.or(file.mixture_config),
            corpus: a.corpus.or(file.corpus),
            embedder: a.embedder.or(file.embedder),
            metric: parse_metric(a.metric.as_deref().or(file.metric.as_deref()))?,
            prompts: if a.prompts.is_empty() { file.prompt } else { a.prompts },
            reference: a.reference.or(file.reference),
            n: a.n.or(file.n).unwrap_or(40),
            m: a.m.or(file.m).unwrap_or(40),
            k: a.k.or(file.k).unwrap_or(250),
            seed: a.seed.or(file.seed).unwrap_or(0),
            bins: a.bins.or(file.bins).unwrap_or(DEFAULT_BINS),
            parallelism: a.parallelism.or(file.parallelism).unwrap_or_else(default_parallelism),
            out: a.out.or(file.out).unwrap_or_else(|| PathBuf::from("originality-out")),
            cache: !(a.no_cache || file.no_cache),
            format: format
                .as_deref()
                .map_or(Ok(ExportFormat::Csv), str::parse)
                .map_err(|e: Error| usage(e.to_string()))?,
            top_k: a.top_k.or(file.top_k).unwrap_or(5),
            binning: binning(a.fixed_range || file.fixed_range),
        };
        if cfg.prompts.is_empty() {
            return Err(usage("at least one --prompt is required"));
        }
        if cfg.prompts.iter().any(String::is_empty) {
            return Err(usage("prompts must not be empty"));
        }
        for (name, v) in [("--n", cfg.n), ("--m", cfg.m), ("--k", cfg.k), ("--bins", cfg.bins), ("--parallelism", cfg.parallelism), ("--top-k", cfg.top_k)] {
            if v == 0 {
                return Err(usage(format!("{name} must be at least 1")));
            }
        }
        let given = [cfg.endpoint.is_some(), cfg.mixture_config.is_some(), cfg.corpus.is_some()];
        let allowed = match cfg.backend {
            BackendKind::Synthetic => [false, true, false],
            BackendKind::Corpus => [false, false, true],
            BackendKind::Http => [true, false, false],
        };
        if given.iter().zip(allowed).any(|(g, ok)| *g && !ok) {
            return Err(usage("backend parameters do not match --backend"));
        }
        Ok(cfg)
    }
}

/// A constructed backend plus what is needed to resolve references.
pub enum Loaded {
    Synthetic(SyntheticBackend),
    Corpus(CorpusBackend),
    Http(HttpBackend),
}

impl Loaded {
    pub fn backend(&self) -> &dyn GeneratorBackend {
        match self {
            Loaded::Synthetic(b) => b,
            Loaded::Corpus(b) => b,
            Loaded::Http(b) => b,
        }
    }
}

fn builtin_synthetic() -> SyntheticConfig {
    synthlab::scenario_abstraction_ladder(DEFAULT_SCENARIO_SEED).config
}

/// Returns the backend and a hash of the data that defines it.
fn load_backend(cfg: &RunConfig) -> CliResult<(Loaded, String)> {
    match cfg.backend {
        BackendKind::Synthetic => {
            let (config, bytes) = match &cfg.mixture_config {
                Some(path) => {
                    let bytes = fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
                    (SyntheticConfig::load(path).map_err(setup)?, bytes)
                }
                None => {
                    let c = builtin_synthetic();
                    let bytes = serde_json::to_vec(&c).map_err(Error::from)?;
                    (c, bytes)
                }
            };
            Ok((Loaded::Synthetic(SyntheticBackend::new(config).map_err(setup)?), content_hash(&bytes)))
        }
        BackendKind::Corpus => {
            let path = cfg.corpus.as_ref().ok_or_else(|| usage("--backend corpus needs --corpus PATH"))?;
            let bytes = fs::read(path).map_err(|e| usage(format!("cannot read {}: {e}", path.display())))?;
            Ok((Loaded::Corpus(CorpusBackend::load(path).map_err(setup)?), content_hash(&bytes)))
        }
        BackendKind::Http => {
            let endpoint = cfg.endpoint.as_ref().ok_or_else(|| usage("--backend http needs --endpoint URL"))?;
            let mut http = HttpConfig::new(endpoint.clone());
            http.embedder = cfg.embedder.clone();
            http.max_inflight = cfg.parallelism;
            let cache = if cfg.cache {
                EmbeddingCache::on_disk(cfg.out.join("cache"))?
            } else {
                EmbeddingCache::disabled()
            };
            let backend = HttpBackend::connect(http, Arc::new(cache)).map_err(setup)?;
            Ok((Loaded::Http(backend), content_hash(endpoint.as_bytes())))
        }
    }
}

fn single_from_file(path: &Path, id: Option<&str>) -> CliResult<Embedding> {
    let items = read_embedding_file(path).map_err(setup)?;
    match id {
        Some(id) => items
            .into_iter()
            .find(|e| e.id() == id)
            .ok_or_else(|| usage(format!("no embedding {id:?} in {}", path.display()))),
        None if items.len() == 1 => Ok(items.into_iter().next().expect("one item")),
        None => Err(usage(format!(
            "{} holds {} embeddings; pick one with PATH#ID",
            path.display(),
            items.len()
        ))),
    }
}

/// Resolves `--reference` against files first, then the backend's own ids.
/// With an HTTP backend, a file that is not an embedding file is embedded as
/// raw content.
pub fn resolve_reference(spec: &str, loaded: &Loaded) -> CliResult<Reference> {
    if let Some((path, id)) = spec.rsplit_once('#') {
        let e = single_from_file(Path::new(path), Some(id))?;
        return Ok(Reference::new(id, e));
    }
    let path = Path::new(spec);
    if path.is_file() {
        let label = path.file_stem().map_or(spec.to_string(), |s| s.to_string_lossy().into_owned());
        return match (read_embedding_file(path), loaded) {
            (Ok(_), _) => {
                let e = single_from_file(path, None)?;
                Ok(Reference::new(e.id().to_string(), e))
            }
            (Err(_), Loaded::Http(http)) => {
                let bytes = fs::read(path)?;
                Ok(Reference::new(label.clone(), http.embed_content(&label, &bytes)?))
            }
            (Err(e), _) => Err(setup(e)),
        };
    }
    let found = match loaded {
        Loaded::Synthetic(b) => b.config().reference(spec).ok(),
        Loaded::Corpus(c) => c.find(spec).cloned(),
        Loaded::Http(_) => None,
    };
    found
        .map(|e| Reference::new(spec, e))
        .ok_or_else(|| usage(format!("reference {spec:?} is neither a file nor a known id")))
}

fn check_reference_dim(reference: &Reference, backend: &dyn GeneratorBackend) -> CliResult<()> {
    match backend.descriptor().dim {
        Some(d) if d != reference.embedding().dim() => Err(usage(format!(
            "reference has dimension {}, backend has {d}",
            reference.embedding().dim()
        ))),
        _ => Ok(()),
    }
}

fn snapshot(
    command: &str,
    cfg: &RunConfig,
    backend: &dyn GeneratorBackend,
    hash: String,
    reference: Option<&Reference>,
) -> ConfigSnapshot {
    let estimating = command == "estimate";
    ConfigSnapshot {
        command: command.to_string(),
        backend: backend.descriptor().id,
        metric: cfg.metric.name().to_string(),
        prompts: cfg.prompts.clone(),
        n: cfg.n,
        m: estimating.then_some(cfg.m),
        k: (!estimating).then_some(cfg.k),
        seed_base: cfg.seed,
        bins: cfg.bins,
        parallelism: cfg.parallelism,
        cache: cfg.cache,
        std_convention: STD_CONVENTION.to_string(),
        content_hash: hash,
        reference: reference.map(|r| ReferenceSnapshot {
            label: r.label().to_string(),
            values: r.embedding().values().to_vec(),
        }),
    }
}

/// Creates the output directory and a manifest whose first record is the
/// config snapshot. The run id is derived from the snapshot.
fn open_manifest(out: &Path, snap: ConfigSnapshot) -> CliResult<RunManifest> {
    fs::create_dir_all(out)?;
    let run_id = content_hash(&serde_json::to_vec(&snap).map_err(Error::from)?)[..16].to_string();
    let mut manifest = RunManifest::create(&out.join(MANIFEST_FILE), &run_id)?;
    manifest.append(Entry::Config(snap))?;
    Ok(manifest)
}

fn write_file(path: &Path, bytes: &[u8]) -> CliResult<String> {
    let mut f = fs::File::create(path)?;
    f.write_all(bytes)?;
    f.sync_all()?;
    Ok(content_hash(bytes))
}

pub fn cmd_estimate(args: &RunArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = RunConfig::resolve(args)?;
    let spec = cfg.reference.clone().ok_or_else(|| usage("estimate needs --reference"))?;
    let (loaded, hash) = load_backend(&cfg)?;
    let backend = loaded.backend();
    let reference = resolve_reference(&spec, &loaded)?;
    check_reference_dim(&reference, backend)?;
    let mut manifest = open_manifest(&cfg.out, snapshot("estimate", &cfg, backend, hash, Some(&reference)))?;
    let opts = RunOptions {
        parallelism: cfg.parallelism,
    };
    for prompt in &cfg.prompts {
        let cond = Conditioning::for_backend(prompt.clone(), backend, cfg.seed)?;
        repeated_estimates(backend, &reference, &cond, cfg.n, cfg.m, cfg.metric, opts, &mut manifest)?;
        typicality_summary(backend, &cond, cfg.n, cfg.m, cfg.metric, opts, &mut manifest)?;
    }
    let table = summary_table(manifest.records(), &cfg.prompts)?;
    let sha = write_file(&cfg.out.join(SUMMARY_FILE), table.as_bytes())?;
    manifest.append(Entry::Report(ReportRecord {
        prompt: String::new(),
        name: "estimate_summary".into(),
        file: SUMMARY_FILE.into(),
        sha256: sha,
    }))?;
    manifest.close()?;
    stdout.write_all(table.as_bytes())?;
    Ok(())
}

/// Per-prompt reference and typicality mean/std as CSV.
pub fn summary_table(records: &[ManifestRecord], prompts: &[String]) -> CliResult<String> {
    let find = |p: &str, s: Subject| -> CliResult<SummaryRecord> {
        records
            .iter()
            .find_map(|r| match &r.entry {
                Entry::Summary(x) if x.prompt == p && x.subject == s => Some(x.clone()),
                _ => None,
            })
            .ok_or_else(|| CliError::Runtime(Error::State(format!("missing summary for {p:?}"))))
    };
    let mut w = csv::Writer::from_writer(Vec::new());
    let header = ["prompt", "reference_mean", "reference_std", "typical_mean", "typical_std", "m", "n", "degenerate"];
    w.write_record(header).map_err(csv_error)?;
    for p in prompts {
        let r = find(p, Subject::Reference)?;
        let t = find(p, Subject::Probe)?;
        w.write_record([
            p.clone(),
            r.mean.to_string(),
            r.std.to_string(),
            t.mean.to_string(),
            t.std.to_string(),
            r.m.to_string(),
            r.n.to_string(),
            (r.degenerate || t.degenerate).to_string(),
        ])
        .map_err(csv_error)?;
    }
    let bytes = w.into_inner().map_err(|e| CliError::Runtime(Error::Storage(e.into_error())))?;
    Ok(String::from_utf8(bytes).expect("csv output is utf-8"))
}

fn csv_error(e: csv::Error) -> CliError {
    CliError::Runtime(Error::Input(format!("csv: {e}")))
}

pub fn cmd_genericize(args: &RunArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let cfg = RunConfig::resolve(args)?;
    if cfg.n < 2 {
        return Err(usage("genericize needs --n of at least 2"));
    }
    let (loaded, hash) = load_backend(&cfg)?;
    let backend = loaded.backend();
    let reference = cfg
        .reference
        .as_deref()
        .map(|spec| resolve_reference(spec, &loaded))
        .transpose()?;
    if let Some(r) = &reference {
        check_reference_dim(r, backend)?;
    }
    let mut manifest = open_manifest(&cfg.out, snapshot("genericize", &cfg, backend, hash, reference.as_ref()))?;
    let opts = RunOptions {
        parallelism: cfg.parallelism,
    };
    for prompt in &cfg.prompts {
        let cond = Conditioning::for_backend(prompt.clone(), backend, cfg.seed)?;
        let selections = genericize_stream(backend, &cond, cfg.k, cfg.n, cfg.metric, opts, &mut manifest)?;
        if reference.is_some() {
            most_generic_reference(&selections, backend, &cond, cfg.n, cfg.metric, &mut manifest)?;
        }
        writeln!(stdout, "{prompt}: {} selections from {} samples", selections.len(), selections.len() * cfg.n)?;
    }
    let selections: Vec<ManifestRecord> = manifest
        .records()
        .iter()
        .filter(|r| matches!(r.entry, Entry::Selection(_)))
        .cloned()
        .collect();
    let file = format!("selections.{}", cfg.format.extension());
    let mut buf = Vec::new();
    export_records(&selections, cfg.format, &mut buf)?;
    let sha = write_file(&cfg.out.join(&file), &buf)?;
    manifest.append(Entry::Report(ReportRecord {
        prompt: String::new(),
        name: "selections".into(),
        file: file.clone(),
        sha256: sha,
    }))?;
    if let Some(r) = &reference {
        let settings = ReportSettings {
            metric: cfg.metric,
            bins: cfg.bins,
            binning: cfg.binning,
            top_k: cfg.top_k,
        };
        let snapshot_records = manifest.records().to_vec();
        for written in write_reports(&snapshot_records, &cfg.prompts, r, &settings, &cfg.out)? {
            writeln!(stdout, "wrote {}", written.file)?;
            manifest.append(Entry::Report(written))?;
        }
    }
    manifest.close()?;
    writeln!(stdout, "wrote {}", cfg.out.join(&file).display())?;
    Ok(())
}

#[derive(Debug, Clone, Copy)]
pub struct ReportSettings {
    pub metric: MetricKind,
    pub bins: usize,
    pub binning: Binning,
    pub top_k: usize,
}

/// Writes the similarity, top-similar and generic-anchor reports for every
/// prompt. Everything is computed from `records`, so a reloaded manifest
/// reproduces the same bytes.
pub fn write_reports(
    records: &[ManifestRecord],
    prompts: &[String],
    reference: &Reference,
    settings: &ReportSettings,
    out: &Path,
) -> CliResult<Vec<ReportRecord>> {
    fs::create_dir_all(out)?;
    let mut written = Vec::new();
    let mut emit = |prompt: &str, name: String, bytes: Vec<u8>| -> CliResult<()> {
        let sha = write_file(&out.join(&name), &bytes)?;
        written.push(ReportRecord {
            prompt: prompt.to_string(),
            name: name.split('.').next().unwrap_or_default().to_string(),
            file: name,
            sha256: sha,
        });
        Ok(())
    };
    for (i, prompt) in prompts.iter().enumerate() {
        let slice = GenericizeSlice::from_records(records, prompt)?;
        if slice.is_empty() {
            continue;
        }
        let report = similarity_report(reference, &slice, settings.metric, settings.bins, settings.binning)?;
        let mut csv = Vec::new();
        similarity_report_csv(&report, &mut csv)?;
        emit(prompt, format!("similarity_{i}.csv"), csv)?;
        emit(prompt, format!("similarity_{i}.json"), json_bytes(&report)?)?;

        let top = top_similar(reference, &slice, settings.top_k, settings.metric)?;
        let mut csv = Vec::new();
        top_similar_csv(&top, &mut csv)?;
        emit(prompt, format!("top_similar_{i}.csv"), csv)?;

        if let Some(anchor) = recorded_anchor(records, prompt, &slice) {
            let report = similarity_report(&anchor, &slice, settings.metric, settings.bins, settings.binning)?;
            let mut csv = Vec::new();
            similarity_report_csv(&report, &mut csv)?;
            emit(prompt, format!("similarity_generic_{i}.csv"), csv)?;
            emit(prompt, format!("similarity_generic_{i}.json"), json_bytes(&report)?)?;
        }
    }
    Ok(written)
}

fn json_bytes<T: serde::Serialize>(value: &T) -> CliResult<Vec<u8>> {
    let mut v = serde_json::to_vec_pretty(value).map_err(Error::from)?;
    v.push(b'\n');
    Ok(v)
}

/// The least original selection according to the recorded anchor estimates.
fn recorded_anchor(records: &[ManifestRecord], prompt: &str, slice: &GenericizeSlice) -> Option<Reference> {
    let mut best: Option<&crate::store::AnchorRecord> = None;
    for r in records {
        if let Entry::Anchor(a) = &r.entry {
            if a.prompt == prompt && best.is_none_or(|b| a.originality < b.originality) {
                best = Some(a);
            }
        }
    }
    let a = best?;
    slice
        .raw
        .iter()
        .find(|(k, _)| k.batch == a.batch && k.index == a.index)
        .map(|(_, e)| Reference::new(format!("generic:{}", a.sample_id), e.clone()))
}

pub fn cmd_report(args: &ReportArgs, stdout: &mut dyn Write) -> CliResult<()> {
    let loaded = load_manifest(&args.manifest).map_err(|e| {
        CliError::Runtime(match e {
            Error::Storage(io) => Error::Storage(std::io::Error::new(
                io.kind(),
                format!("cannot read manifest {}: {io}", args.manifest.display()),
            )),
            other => other,
        })
    })?;
    let records = loaded.records;
    let config = records
        .iter()
        .find_map(|r| match &r.entry {
            Entry::Config(c) => Some(c.clone()),
            _ => None,
        })
        .ok_or_else(|| CliError::Runtime(Error::State("manifest holds no records".into())))?;
    let reference = match &args.reference {
        Some(spec) => {
            let (path, id) = match spec.rsplit_once('#') {
                Some((p, id)) => (p, Some(id)),
                None => (spec.as_str(), None),
            };
            let e = single_from_file(Path::new(path), id)?;
            Reference::new(id.unwrap_or(e.id()).to_string(), e)
        }
        None => {
            let snap = config
                .reference
                .clone()
                .ok_or_else(|| usage("the run recorded no reference; pass --reference"))?;
            Reference::new(snap.label.clone(), Embedding::new(snap.label, snap.values)?)
        }
    };
    let settings = ReportSettings {
        metric: match &args.metric {
            Some(m) => parse_metric(Some(m))?,
            None => config.metric.parse().map_err(CliError::Runtime)?,
        },
        bins: args.bins.unwrap_or(config.bins),
        binning: binning(args.fixed_range),
        top_k: args.top_k.unwrap_or(5),
    };
    if settings.bins == 0 || settings.top_k == 0 {
        return Err(usage("--bins and --top-k must be at least 1"));
    }
    let out = args
        .out
        .clone()
        .or_else(|| args.manifest.parent().map(Path::to_path_buf))
        .unwrap_or_else(|| PathBuf::from("."));
    let written = write_reports(&records, &config.prompts, &reference, &settings, &out)?;
    if written.is_empty() {
        return Err(CliError::Runtime(Error::State(format!(
            "{} holds no genericize samples to report on",
            args.manifest.display()
        ))));
    }
    for w in written {
        writeln!(stdout, "wrote {} ({})", out.join(&w.file).display(), w.sha256)?;
    }
    Ok(())
}

pub fn cmd_validate(args: &ValidateArgs, stdout: &mut dyn Write) -> CliResult<()> {
    if args.list {
        for name in synthlab::scenario_names() {
            writeln!(stdout, "{name}")?;
        }
        writeln!(stdout, "negative_control (only with --negative-control)")?;
        return Ok(());
    }
    let seed = args.seed.unwrap_or(DEFAULT_SCENARIO_SEED);
    let scenarios = if args.negative_control {
        vec![synthlab::scenario_negative_control(seed)]
    } else if let Some(name) = &args.scenario {
        vec![synthlab::scenario_by_name(name, seed).ok_or_else(|| usage(format!("unknown scenario {name:?}")))?]
    } else {
        synthlab::all_scenarios(seed)
    };
    let cfg = ProtocolConfig {
        seed_base: seed,
        parallelism: args.parallelism.unwrap_or_else(default_parallelism).max(1),
        ..ProtocolConfig::default()
    };
    let mut reports = Vec::new();
    for s in &scenarios {
        let report = synthlab::run_protocol(s, MetricKind::Cosine, &cfg)?;
        stdout.write_all(report.to_text().as_bytes())?;
        reports.push(report);
    }
    if let Some(path) = &args.json {
        write_file(path, &json_bytes(&reports)?)?;
    }
    let failed: Vec<String> = reports
        .iter()
        .flat_map(|r| r.failures().map(move |o| format!("{}: {}", r.scenario, o.detail)))
        .collect();
    if failed.is_empty() {
        writeln!(stdout, "all {} scenario(s) passed", reports.len())?;
        Ok(())
    } else {
        Err(CliError::Failed(format!(
            "{} expectation(s) failed:\n  {}",
            failed.len(),
            failed.join("\n  ")
        )))
    }
}

pub fn run(cli: &Cli, stdout: &mut dyn Write) -> CliResult<()> {
    match &cli.command {
        Command::Estimate(a) => cmd_estimate(a, stdout),
        Command::Genericize(a) => cmd_genericize(a, stdout),
        Command::Report(a) => cmd_report(a, stdout),
        Command::Validate(a) => cmd_validate(a, stdout),
    }
}

/// Parses `args`, runs, and returns the process exit code.
pub fn main_with_args<I, T>(args: I, stdout: &mut dyn Write, stderr: &mut dyn Write) -> i32
where
    I: IntoIterator<Item = T>,
    T: Into<std::ffi::OsString> + Clone,
{
    let cli = match Cli::try_parse_from(args) {
        Ok(c) => c,
        Err(e) => {
            let code = e.exit_code();
            let _ = if code == 0 {
                write!(stdout, "{}", e.render())
            } else {
                write!(stderr, "{}", e.render())
            };
            return code;
        }
    };
    match run(&cli, stdout) {
        Ok(()) => 0,
        Err(e) => {
            let _ = writeln!(stderr, "error: {e}");
            if let CliError::Usage(_) = e {
                let _ = writeln!(stderr, "run with --help for usage");
            }
            e.exit_code()
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn args(list: &[&str]) -> RunArgs {
        let mut v = vec!["originality", "estimate"];
        v.extend_from_slice(list);
        match Cli::try_parse_from(v).unwrap().command {
            Command::Estimate(a) => a,
            _ => unreachable!(),
        }
    }

    #[test]
    fn defaults_and_validation() {
        let cfg = RunConfig::resolve(&args(&["--prompt", "a"])).unwrap();
        assert_eq!((cfg.n, cfg.m, cfg.k, cfg.bins), (40, 40, 250, 50));
        assert_eq!(cfg.backend, BackendKind::Synthetic);
        assert!(cfg.cache);
        assert!(matches!(RunConfig::resolve(&args(&[])), Err(CliError::Usage(_))));
        assert!(matches!(RunConfig::resolve(&args(&["--prompt", "a", "--n", "0"])), Err(CliError::Usage(_))));
        assert!(matches!(
            RunConfig::resolve(&args(&["--prompt", "a", "--metric", "l2"])),
            Err(CliError::Usage(_))
        ));
        assert!(matches!(
            RunConfig::resolve(&args(&["--prompt", "a", "--corpus", "x.jsonl"])),
            Err(CliError::Usage(_))
        ));
    }

    #[test]
    fn flags_override_config_file() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("run.toml");
        fs::write(&path, "prompt = [\"from file\"]\nn = 7\nm = 3\nno-cache = true\nformat = \"jsonl\"\n").unwrap();
        let p = path.to_str().unwrap();
        let cfg = RunConfig::resolve(&args(&["--config", p, "--n", "9"])).unwrap();
        assert_eq!(cfg.prompts, ["from file"]);
        assert_eq!((cfg.n, cfg.m), (9, 3));
        assert!(!cfg.cache);
        assert_eq!(cfg.format, ExportFormat::Jsonl);

        fs::write(&path, "bogus = 1\n").unwrap();
        assert!(matches!(RunConfig::resolve(&args(&["--config", p])), Err(CliError::Usage(_))));
    }

    #[test]
    fn reference_resolution() {
        let dir = tempfile::tempdir().unwrap();
        let (loaded, _) = load_backend(&RunConfig::resolve(&args(&["--prompt", "a"])).unwrap()).unwrap();
        assert_eq!(resolve_reference("planted", &loaded).unwrap().label(), "planted");
        assert!(matches!(resolve_reference("missing", &loaded), Err(CliError::Usage(_))));

        let file = dir.path().join("refs.jsonl");
        let a = Embedding::new("a", vec![1.0; 64]).unwrap();
        let b = Embedding::new("b", vec![2.0; 64]).unwrap();
        crate::backends::write_embedding_file(&file, [&a, &b]).unwrap();
        let spec = format!("{}#b", file.display());
        assert_eq!(resolve_reference(&spec, &loaded).unwrap().embedding(), &b);
        assert!(matches!(
            resolve_reference(file.to_str().unwrap(), &loaded),
            Err(CliError::Usage(_))
        ));
    }
}
