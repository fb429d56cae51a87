//! Replays a file of precomputed embeddings.
//!
//! File format: one JSON object per line, `{"id": .., "dim": .., "values": [..]}`.
//! Ids are unique and `dim` is constant across the file. Blank lines are
//! ignored.

use std::collections::HashSet;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};

use rand::Rng;
use serde::{Deserialize, Serialize};

use super::{BackendDescriptor, GeneratorBackend};
use crate::embedding::{Embedding, SampleBatch};
use crate::error::{Error, Result};
use crate::seed;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EmbeddingRecord {
    pub id: String,
    pub dim: u32,
    pub values: Vec<f64>,
}

pub fn read_embedding_file(path: &Path) -> Result<Vec<Embedding>> {
    let file = File::open(path)?;
    let mut out = Vec::new();
    let mut ids = HashSet::new();
    let mut dim: Option<usize> = None;
    for (i, line) in BufReader::new(file).lines().enumerate() {
        let lineno = i + 1;
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let rec: EmbeddingRecord = serde_json::from_str(&line).map_err(|e| Error::Format {
            line: lineno,
            message: e.to_string(),
        })?;
        if rec.values.len() != rec.dim as usize {
            return Err(Error::Contract(format!(
                "line {lineno}: record {:?} declares dim {} but has {} values",
                rec.id,
                rec.dim,
                rec.values.len()
            )));
        }
        match dim {
            None => dim = Some(rec.values.len()),
            Some(d) if d != rec.values.len() => {
                return Err(Error::Contract(format!(
                    "line {lineno}: dimension {} differs from the file's {d}",
                    rec.values.len()
                )))
            }
            _ => {}
        }
        if !ids.insert(rec.id.clone()) {
            return Err(Error::Format {
                line: lineno,
                message: format!("duplicate id {:?}", rec.id),
            });
        }
        let e = Embedding::new(rec.id, rec.values).map_err(|e| Error::Format {
            line: lineno,
            message: e.to_string(),
        })?;
        out.push(e);
    }
    Ok(out)
}

pub fn write_embedding_file<'a>(
    path: &Path,
    embeddings: impl IntoIterator<Item = &'a Embedding>,
) -> Result<()> {
    let mut w = BufWriter::new(File::create(path)?);
    for e in embeddings {
        let rec = EmbeddingRecord {
            id: e.id().to_string(),
            dim: e.dim() as u32,
            values: e.values().to_vec(),
        };
        serde_json::to_writer(&mut w, &rec)?;
        w.write_all(b"\n")?;
    }
    w.flush()?;
    Ok(())
}

/// Samples uniformly with replacement from a loaded embedding file. The
/// prompt does not influence draws: a corpus represents one conditioning.
#[derive(Debug, Clone)]
pub struct CorpusBackend {
    id: String,
    path: PathBuf,
    items: Vec<Embedding>,
}

impl CorpusBackend {
    pub fn load(path: &Path) -> Result<Self> {
        let items = read_embedding_file(path)?;
        if items.is_empty() {
            return Err(Error::Format {
                line: 0,
                message: format!("{} contains no records", path.display()),
            });
        }
        Ok(CorpusBackend {
            id: format!("corpus:{}", path.file_name().and_then(|n| n.to_str()).unwrap_or("?")),
            path: path.to_path_buf(),
            items,
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn items(&self) -> &[Embedding] {
        &self.items
    }

    pub fn find(&self, id: &str) -> Option<&Embedding> {
        self.items.iter().find(|e| e.id() == id)
    }
}

impl GeneratorBackend for CorpusBackend {
    fn descriptor(&self) -> BackendDescriptor {
        BackendDescriptor {
            id: self.id.clone(),
            dim: Some(self.items[0].dim()),
            supports_raw_content: false,
            max_parallelism: usize::MAX,
        }
    }

    fn generate(&self, _prompt: &str, seed: u64, count: usize) -> Result<SampleBatch> {
        let items = (0..count)
            .map(|i| {
                let mut rng = seed::rng(seed::sample_seed(seed, i));
                self.items[rng.random_range(0..self.items.len())].clone()
            })
            .collect();
        SampleBatch::new(items)
    }
}
