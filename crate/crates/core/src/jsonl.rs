use std::fs::File;
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::Path;

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("i/o error: {0}")]
    Io(#[from] std::io::Error),
    #[error("line {line}: {message}")]
    Malformed { line: usize, message: String },
    #[error("serialization failed: {0}")]
    Serialize(String),
}

/// Reads one JSON value per non-blank line.
pub fn read<T: DeserializeOwned>(path: impl AsRef<Path>) -> Result<Vec<T>, JsonlError> {
    let reader = BufReader::new(File::open(path)?);
    let mut out = Vec::new();
    for (i, line) in reader.lines().enumerate() {
        let line = line?;
        if line.trim().is_empty() {
            continue;
        }
        out.push(serde_json::from_str(&line).map_err(|e| JsonlError::Malformed {
            line: i + 1,
            message: e.to_string(),
        })?);
    }
    Ok(out)
}

pub fn write<T: Serialize>(path: impl AsRef<Path>, items: &[T]) -> Result<(), JsonlError> {
    let mut out = BufWriter::new(File::create(path)?);
    for item in items {
        let line = serde_json::to_string(item).map_err(|e| JsonlError::Serialize(e.to_string()))?;
        out.write_all(line.as_bytes())?;
        out.write_all(b"\n")?;
    }
    out.flush()?;
    Ok(())
}
