//! CSV and JSONL export of manifest records and reports.

use std::io::{BufRead, Write};
use std::str::FromStr;

use crate::error::{Error, Result};
use crate::genericizer::{SimilarityReport, TopSimilar};
use crate::store::manifest::{Entry, ManifestRecord};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ExportFormat {
    Csv,
    Jsonl,
}

impl ExportFormat {
    pub fn extension(self) -> &'static str {
        match self {
            ExportFormat::Csv => "csv",
            ExportFormat::Jsonl => "jsonl",
        }
    }
}

impl FromStr for ExportFormat {
    type Err = Error;

    fn from_str(s: &str) -> Result<Self> {
        match s {
            "csv" => Ok(ExportFormat::Csv),
            "jsonl" => Ok(ExportFormat::Jsonl),
            other => Err(Error::input(format!("unknown export format {other:?}"))),
        }
    }
}

pub const RECORD_CSV_HEADER: [&str; 8] =
    ["seq", "kind", "prompt", "phase", "batch", "index", "id", "value"];

fn csv_err(e: csv::Error) -> Error {
    match e.into_kind() {
        csv::ErrorKind::Io(io) => Error::Storage(io),
        other => Error::input(format!("csv: {other:?}")),
    }
}

/// Writes records in the given format. Field order is fixed.
pub fn export_records<W: Write>(records: &[ManifestRecord], format: ExportFormat, out: W) -> Result<()> {
    if records.is_empty() {
        return Err(Error::input("nothing to export: empty slice"));
    }
    match format {
        ExportFormat::Jsonl => {
            let mut out = out;
            for r in records {
                serde_json::to_writer(&mut out, r)?;
                out.write_all(b"\n")?;
            }
            out.flush()?;
        }
        ExportFormat::Csv => {
            let mut w = csv::Writer::from_writer(out);
            w.write_record(RECORD_CSV_HEADER).map_err(csv_err)?;
            for r in records {
                let seq = r.seq.to_string();
                let (prompt, phase, batch, index, id, value) = match &r.entry {
                    Entry::Config(c) => (c.prompts.join("|"), String::new(), None, None, c.command.clone(), None),
                    Entry::Sample(s) => (
                        s.prompt.clone(),
                        format!("{:?}", s.phase).to_lowercase(),
                        Some(s.batch),
                        Some(s.index),
                        s.id.clone(),
                        None,
                    ),
                    Entry::Estimate(e) => (
                        e.prompt.clone(),
                        format!("{:?}", e.subject).to_lowercase(),
                        Some(e.batch),
                        None,
                        e.subject_id.clone(),
                        Some(e.value),
                    ),
                    Entry::Summary(s) => (
                        s.prompt.clone(),
                        format!("{:?}", s.subject).to_lowercase(),
                        None,
                        None,
                        String::new(),
                        Some(s.mean),
                    ),
                    Entry::Selection(s) => (
                        s.prompt.clone(),
                        String::new(),
                        Some(s.batch),
                        Some(s.selected_index),
                        s.selected_id.clone(),
                        Some(s.cross_mean_distance),
                    ),
                    Entry::Anchor(a) => (
                        a.prompt.clone(),
                        String::new(),
                        Some(a.batch),
                        Some(a.index),
                        a.sample_id.clone(),
                        Some(a.originality),
                    ),
                    Entry::Report(rep) => (rep.prompt.clone(), String::new(), None, None, rep.file.clone(), None),
                };
                let opt = |v: Option<usize>| v.map(|x| x.to_string()).unwrap_or_default();
                w.write_record([
                    seq.as_str(),
                    r.entry.kind(),
                    prompt.as_str(),
                    phase.as_str(),
                    opt(batch).as_str(),
                    opt(index).as_str(),
                    id.as_str(),
                    value.map(|v| v.to_string()).unwrap_or_default().as_str(),
                ])
                .map_err(csv_err)?;
            }
            w.flush()?;
        }
    }
    Ok(())
}

pub fn import_jsonl<R: BufRead>(input: R) -> Result<Vec<ManifestRecord>> {
    let mut out = Vec::new();
    for (i, line) in input.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| Error::Format {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub const SIMILARITY_CSV_HEADER: [&str; 4] = ["series", "bin_low", "bin_high", "count"];

/// `series,bin_low,bin_high,count`, raw series first.
pub fn similarity_report_csv<W: Write>(report: &SimilarityReport, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(SIMILARITY_CSV_HEADER).map_err(csv_err)?;
    let h = &report.histogram;
    for (series, counts) in [("raw", &h.raw_counts), ("selected", &h.selected_counts)] {
        for (i, count) in counts.iter().enumerate() {
            w.write_record([
                series.to_string(),
                h.edges[i].to_string(),
                h.edges[i + 1].to_string(),
                count.to_string(),
            ])
            .map_err(csv_err)?;
        }
    }
    w.flush()?;
    Ok(())
}

pub const TOP_SIMILAR_CSV_HEADER: [&str; 5] = ["rank", "sample_key", "sample_id", "similarity", "suppressed"];

pub fn top_similar_csv<W: Write>(top: &TopSimilar, out: W) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    w.write_record(TOP_SIMILAR_CSV_HEADER).map_err(csv_err)?;
    for (rank, e) in top.entries.iter().enumerate() {
        w.write_record([
            (rank + 1).to_string(),
            e.key.to_string(),
            e.sample_id.clone(),
            e.similarity.to_string(),
            (!e.selected).to_string(),
        ])
        .map_err(csv_err)?;
    }
    w.flush()?;
    Ok(())
}
