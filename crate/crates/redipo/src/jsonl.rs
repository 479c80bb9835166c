//! JSONL persistence for the pipeline's stage outputs.
//!
//! One JSON object per line, UTF-8, keys in struct declaration order.
//! Floats use the shortest representation that parses back exactly, so a
//! write/read cycle is lossless and repeated writes are byte-identical.

use serde::de::DeserializeOwned;
use serde::Serialize;
use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use thiserror::Error;

use crate::types::{PreferencePair, PromptEntry, PromptPool, ResponseRecord};

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path}:{line}: malformed JSON line: {source}")]
    Parse {
        path: PathBuf,
        line: usize,
        #[source]
        source: serde_json::Error,
    },
    #[error("{path}:{line}: validation error: {message}")]
    Validation {
        path: PathBuf,
        line: usize,
        message: String,
    },
    #[error("record not serializable: {0}")]
    Serialize(#[from] serde_json::Error),
}

/// A record type that can live in a JSONL stage file.
pub trait JsonlRecord: Serialize + DeserializeOwned {
    /// Self-contained invariants checked when a line is read back.
    fn validate_record(&self) -> Result<(), String> {
        Ok(())
    }
}

impl JsonlRecord for ResponseRecord {
    fn validate_record(&self) -> Result<(), String> {
        self.validate()
    }
}

impl JsonlRecord for PromptPool {
    fn validate_record(&self) -> Result<(), String> {
        self.validate()
    }
}

impl JsonlRecord for PreferencePair {
    fn validate_record(&self) -> Result<(), String> {
        self.validate()
    }
}

impl JsonlRecord for PromptEntry {
    fn validate_record(&self) -> Result<(), String> {
        self.validate()
    }
}

impl JsonlRecord for serde_json::Value {}

/// Writes one record per line. Returns the number of lines written.
pub fn write_jsonl<T: JsonlRecord>(records: &[T], path: &Path) -> Result<usize, JsonlError> {
    let io_err = |source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    };
    let file = File::create(path).map_err(io_err)?;
    let mut writer = BufWriter::new(file);
    for record in records {
        let line = serde_json::to_string(record)?;
        writer.write_all(line.as_bytes()).map_err(io_err)?;
        writer.write_all(b"\n").map_err(io_err)?;
    }
    writer.flush().map_err(io_err)?;
    Ok(records.len())
}

/// Reads and validates every line. Blank lines are not tolerated: each line
/// must be a complete JSON object.
pub fn read_jsonl<T: JsonlRecord>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = File::open(path).map_err(|source| JsonlError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    let reader = BufReader::new(file);
    let mut records = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line_no = idx + 1;
        let line = line.map_err(|source| JsonlError::Io {
            path: path.to_path_buf(),
            source,
        })?;
        let record: T = serde_json::from_str(&line).map_err(|source| JsonlError::Parse {
            path: path.to_path_buf(),
            line: line_no,
            source,
        })?;
        record
            .validate_record()
            .map_err(|message| JsonlError::Validation {
                path: path.to_path_buf(),
                line: line_no,
                message,
            })?;
        records.push(record);
    }
    Ok(records)
}
