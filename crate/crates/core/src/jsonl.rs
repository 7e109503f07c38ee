//! Line-oriented JSON file helpers with atomic writes.
//!
//! Every artifact the pipeline persists is either a `.jsonl` file (one
//! object per line) or a single JSON document; both are written through a
//! temp-file-then-rename so readers never observe a half-written artifact.

use std::fs;
use std::io::{BufRead, BufReader, Write};
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::Serialize;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum JsonlError {
    #[error("io error on {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("{path} line {line}: {message}")]
    Line {
        path: PathBuf,
        line: usize,
        message: String,
    },
}

fn io_err(path: &Path, source: std::io::Error) -> JsonlError {
    JsonlError::Io { path: path.to_path_buf(), source }
}

/// Read a `.jsonl` file into a vector, reporting the 1-based line number of
/// the first malformed record.
pub fn read_jsonl<T: DeserializeOwned>(path: &Path) -> Result<Vec<T>, JsonlError> {
    let file = fs::File::open(path).map_err(|e| io_err(path, e))?;
    let reader = BufReader::new(file);
    let mut out = Vec::new();
    for (idx, line) in reader.lines().enumerate() {
        let line = line.map_err(|e| io_err(path, e))?;
        if line.trim().is_empty() {
            continue;
        }
        let item = serde_json::from_str(&line).map_err(|e| JsonlError::Line {
            path: path.to_path_buf(),
            line: idx + 1,
            message: e.to_string(),
        })?;
        out.push(item);
    }
    Ok(out)
}

/// Serialize items one per line and write the file atomically.
pub fn write_jsonl<T: Serialize>(path: &Path, items: &[T]) -> Result<(), JsonlError> {
    let mut buf = Vec::new();
    for item in items {
        serde_json::to_writer(&mut buf, item).map_err(|e| JsonlError::Line {
            path: path.to_path_buf(),
            line: 0,
            message: e.to_string(),
        })?;
        buf.push(b'\n');
    }
    atomic_write(path, &buf)
}

/// Write a whole file atomically (temp file in the same directory, then
/// rename over the destination).
pub fn atomic_write(path: &Path, bytes: &[u8]) -> Result<(), JsonlError> {
    let dir = path.parent().unwrap_or_else(|| Path::new("."));
    fs::create_dir_all(dir).map_err(|e| io_err(path, e))?;
    let tmp = dir.join(format!(
        ".{}.tmp-{}",
        path.file_name().map(|n| n.to_string_lossy()).unwrap_or_default(),
        std::process::id()
    ));
    {
        let mut f = fs::File::create(&tmp).map_err(|e| io_err(&tmp, e))?;
        f.write_all(bytes).map_err(|e| io_err(&tmp, e))?;
        f.flush().map_err(|e| io_err(&tmp, e))?;
    }
    fs::rename(&tmp, path).map_err(|e| io_err(path, e))
}

/// Serialize a single value as pretty JSON and write it atomically.
pub fn write_json_pretty<T: Serialize>(path: &Path, value: &T) -> Result<(), JsonlError> {
    let mut bytes = serde_json::to_vec_pretty(value).map_err(|e| JsonlError::Line {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })?;
    bytes.push(b'\n');
    atomic_write(path, &bytes)
}

/// Read a single JSON document.
pub fn read_json<T: DeserializeOwned>(path: &Path) -> Result<T, JsonlError> {
    let bytes = fs::read(path).map_err(|e| io_err(path, e))?;
    serde_json::from_slice(&bytes).map_err(|e| JsonlError::Line {
        path: path.to_path_buf(),
        line: 0,
        message: e.to_string(),
    })
}
