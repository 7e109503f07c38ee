//! Append-only progress log for interruptible per-segment stages.
//!
//! Completed items are appended one JSON line at a time; a killed run leaves
//! a valid prefix (plus at most one torn tail line, which is skipped with a
//! warning on reload). The owning stage writes its real artifact atomically
//! at the end and then discards the log.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use serde::de::DeserializeOwned;
use serde::Serialize;

pub struct CheckpointLog<R> {
    path: PathBuf,
    existing: BTreeMap<String, R>,
    writer: Mutex<BufWriter<File>>,
}

impl<R: Serialize + DeserializeOwned> CheckpointLog<R> {
    /// Open (or create) the log, loading completed entries keyed by
    /// `key_of`.
    pub fn open(path: &Path, key_of: impl Fn(&R) -> String) -> std::io::Result<Self> {
        let mut existing = BTreeMap::new();
        if path.exists() {
            let reader = BufReader::new(File::open(path)?);
            for (idx, line) in reader.lines().enumerate() {
                let line = line?;
                if line.trim().is_empty() {
                    continue;
                }
                match serde_json::from_str::<R>(&line) {
                    Ok(record) => {
                        existing.insert(key_of(&record), record);
                    }
                    Err(e) => {
                        tracing::warn!(
                            line = idx + 1,
                            error = %e,
                            path = %path.display(),
                            "skipping malformed checkpoint line (torn tail from an interrupted run)"
                        );
                    }
                }
            }
        }
        if let Some(dir) = path.parent() {
            std::fs::create_dir_all(dir)?;
        }
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(Self { path: path.to_path_buf(), existing, writer: Mutex::new(BufWriter::new(file)) })
    }

    pub fn get(&self, key: &str) -> Option<&R> {
        self.existing.get(key)
    }

    pub fn completed(&self) -> usize {
        self.existing.len()
    }

    /// Append one completed record and flush it to disk.
    pub fn record(&self, record: &R) -> std::io::Result<()> {
        let line = serde_json::to_string(record).map_err(std::io::Error::other)?;
        let mut writer = self.writer.lock().expect("checkpoint writer poisoned");
        writer.write_all(line.as_bytes())?;
        writer.write_all(b"\n")?;
        writer.flush()
    }

    /// Delete the log once the owning artifact has been written.
    pub fn discard(self) -> std::io::Result<()> {
        drop(self.writer);
        match std::fs::remove_file(&self.path) {
            Ok(()) => Ok(()),
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => Ok(()),
            Err(e) => Err(e),
        }
    }
}
