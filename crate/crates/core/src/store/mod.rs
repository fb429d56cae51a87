//! Embedding cache, run manifests and export formats.

pub mod cache;
pub mod export;
pub mod manifest;

pub use cache::{content_hash, embedding_content_hash, CacheStats, EmbeddingCache, CONTENT_HASH_ALGORITHM};
pub use export::{export_records, import_jsonl, similarity_report_csv, top_similar_csv, ExportFormat};
pub use manifest::{
    check_invariants, load as load_manifest, AnchorRecord, ConfigSnapshot, Entry, EstimateRecord,
    LoadedManifest, ManifestRecord, NullSink, Phase, RecordSink, ReferenceSnapshot, ReportRecord,
    RunManifest, SampleRecord, SelectionRecord, Subject, SummaryRecord, STD_CONVENTION,
};
