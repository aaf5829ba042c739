//! Synthetic entity-tracking datasets and their on-disk format.
//!
//! Two task families: the abstract permutation-chain task ([`toy`]) and the
//! natural-language boxes task ([`boxes`]). Generation is a pure function
//! of (config, sample index) — per-sample generators come from
//! [`crate::rng::Rng::for_sample`] — so streams are infinite, reproducible,
//! and order-independent.

pub mod boxes;
pub mod toy;

use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::{Deserialize, Serialize};

/// One training example: per-position classification targets under a loss
/// mask. Next-token tasks encode the shift into `targets` directly.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Sample {
    pub tokens: Vec<usize>,
    pub targets: Vec<usize>,
    pub loss_mask: Vec<bool>,
}

/// Deterministic, index-addressable stream of samples.
pub trait SampleSource {
    fn sample(&self, index: u64) -> Sample;
    fn vocab_size(&self) -> usize;
}

/// Prompt/reference pair for exact-match evaluation by greedy generation.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct GenerationCase {
    /// Prompt ids, including the answer-start token.
    pub prompt: Vec<usize>,
    /// Reference answer ids, without the stop token.
    pub answer: Vec<usize>,
    pub stop_token: usize,
}

/// Errors from dataset files.
#[derive(Debug)]
pub enum DatasetError {
    Io(std::io::Error),
    /// Malformed JSON line; 1-based line number.
    Parse { line: usize, message: String },
    Generation(String),
}

impl std::fmt::Display for DatasetError {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        match self {
            DatasetError::Io(e) => write!(f, "dataset io: {e}"),
            DatasetError::Parse { line, message } => {
                write!(f, "dataset parse error at line {line}: {message}")
            }
            DatasetError::Generation(m) => write!(f, "dataset generation: {m}"),
        }
    }
}

impl std::error::Error for DatasetError {}

impl From<std::io::Error> for DatasetError {
    fn from(e: std::io::Error) -> Self {
        DatasetError::Io(e)
    }
}

/// One JSON line of a dataset file.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DatasetRecord {
    pub tokens: Vec<usize>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub targets: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub loss_mask: Option<Vec<bool>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer: Option<Vec<usize>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_offset: Option<usize>,
    pub meta: RecordMeta,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct RecordMeta {
    pub seed: u64,
    pub config_hash: String,
}

/// JSON-lines writer; one record per line, field order fixed by the struct,
/// so identical inputs give byte-identical files.
pub fn write_dataset(records: &[DatasetRecord], path: &Path) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(File::create(path)?);
    for r in records {
        let line = serde_json::to_string(r)
            .map_err(|e| DatasetError::Generation(format!("serialize: {e}")))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_dataset(path: &Path) -> Result<Vec<DatasetRecord>, DatasetError> {
    let file = BufReader::new(File::open(path)?);
    let mut records = Vec::new();
    for (i, line) in file.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        let r: DatasetRecord = serde_json::from_str(&line).map_err(|e| DatasetError::Parse {
            line: i + 1,
            message: e.to_string(),
        })?;
        records.push(r);
    }
    Ok(records)
}

/// Plain-text vocabulary file: one token per line, id = line number.
pub fn write_vocab(tokens: &[String], path: &Path) -> Result<(), DatasetError> {
    let mut out = BufWriter::new(File::create(path)?);
    for t in tokens {
        out.write_all(t.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}

pub fn read_vocab(path: &Path) -> Result<Vec<String>, DatasetError> {
    let file = BufReader::new(File::open(path)?);
    Ok(file.lines().collect::<Result<Vec<_>, _>>()?)
}

/// FNV-1a over the canonical JSON of a config; the provenance hash stored
/// in record metadata and run logs.
pub fn config_hash<T: Serialize>(config: &T) -> String {
    let json = serde_json::to_string(config).expect("config serialization cannot fail");
    let mut h: u64 = 0xcbf2_9ce4_8422_2325;
    for b in json.as_bytes() {
        h ^= *b as u64;
        h = h.wrapping_mul(0x0000_0100_0000_01b3);
    }
    format!("{h:016x}")
}
