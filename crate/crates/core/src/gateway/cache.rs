//! Content-addressed response cache: one file per key, atomic writes.
//!
//! Chat keys hash `(model, system, user, temperature)` — the token budget is
//! an operational knob, not semantic input, so it stays out of the key.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};

use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use super::{ChatRequest, FinishReason};

#[derive(Serialize, Deserialize)]
pub(super) struct CachedChat {
    pub text: String,
    pub finish_reason: FinishReason,
}

#[derive(Serialize, Deserialize)]
pub(super) struct CachedEmbedding {
    pub values: Vec<f64>,
}

pub(super) fn chat_key(req: &ChatRequest) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"chat\0");
    hasher.update(req.model_id.as_bytes());
    hasher.update(b"\0");
    hasher.update(req.system_prompt.as_bytes());
    hasher.update(b"\0");
    hasher.update(req.user_prompt.as_bytes());
    hasher.update(b"\0");
    hasher.update(req.temperature.to_bits().to_le_bytes());
    hex::encode(hasher.finalize())
}

pub(super) fn embed_key(model_id: &str, text: &str) -> String {
    let mut hasher = Sha256::new();
    hasher.update(b"embed\0");
    hasher.update(model_id.as_bytes());
    hasher.update(b"\0");
    hasher.update(text.as_bytes());
    hex::encode(hasher.finalize())
}

pub(super) struct ResponseCache {
    root: PathBuf,
}

impl ResponseCache {
    pub fn open(root: &Path) -> io::Result<Self> {
        fs::create_dir_all(root)?;
        Ok(Self { root: root.to_path_buf() })
    }

    fn path_for(&self, key: &str) -> PathBuf {
        // Shard by the first two hex chars so large runs do not pile tens of
        // thousands of files into one directory.
        self.root.join(&key[..2]).join(format!("{key}.json"))
    }

    pub fn load<T: DeserializeOwned>(&self, key: &str) -> io::Result<Option<T>> {
        let path = self.path_for(key);
        match fs::read(&path) {
            Ok(bytes) => match serde_json::from_slice(&bytes) {
                Ok(v) => Ok(Some(v)),
                // A torn or corrupt entry is treated as a miss and rewritten.
                Err(_) => Ok(None),
            },
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e),
        }
    }

    pub fn store<T: Serialize>(&self, key: &str, value: &T) -> io::Result<()> {
        let path = self.path_for(key);
        let dir = path.parent().expect("cache paths always have a parent");
        fs::create_dir_all(dir)?;
        let tmp = dir.join(format!(".{}.tmp-{}", key, std::process::id()));
        let bytes = serde_json::to_vec(value).map_err(io::Error::other)?;
        fs::write(&tmp, bytes)?;
        fs::rename(&tmp, path)
    }
}
