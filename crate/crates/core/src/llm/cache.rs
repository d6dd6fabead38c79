use std::fs;
use std::io::{self, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, AtomicUsize, Ordering};

use log::warn;
use serde::Serialize;
use sha2::{Digest, Sha256};

use super::{LlmBackend, LlmError, LlmRequest};

/// On-disk response cache: one file per request, named by the hex SHA-256
/// of the request identity, holding the raw response.
#[derive(Debug)]
pub struct ResponseCache {
    dir: PathBuf,
    hits: AtomicUsize,
    misses: AtomicUsize,
}

#[derive(Serialize)]
struct KeyRecord<'a> {
    template: &'a str,
    bindings: &'a std::collections::BTreeMap<String, String>,
    model: &'a str,
    temperature: f64,
    seed: u64,
}

static TMP_COUNTER: AtomicU64 = AtomicU64::new(0);

impl ResponseCache {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        Self {
            dir: dir.into(),
            hits: AtomicUsize::new(0),
            misses: AtomicUsize::new(0),
        }
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn hits(&self) -> usize {
        self.hits.load(Ordering::Relaxed)
    }

    pub fn misses(&self) -> usize {
        self.misses.load(Ordering::Relaxed)
    }

    pub fn key(request: &LlmRequest, model_name: &str) -> String {
        let record = KeyRecord {
            template: request.template.as_str(),
            bindings: &request.bindings,
            model: model_name,
            temperature: request.temperature,
            seed: request.seed,
        };
        let bytes = serde_json::to_vec(&record).expect("key record serializes");
        hex::encode(Sha256::digest(&bytes))
    }

    /// Stored response for `key`; unreadable or empty entries count as absent.
    fn get(&self, key: &str) -> Result<Option<String>, LlmError> {
        match fs::read(self.dir.join(key)) {
            Ok(bytes) => match String::from_utf8(bytes) {
                Ok(s) if !s.is_empty() => Ok(Some(s)),
                _ => {
                    warn!("discarding corrupted cache entry {key}");
                    Ok(None)
                }
            },
            Err(e) if e.kind() == io::ErrorKind::NotFound => Ok(None),
            Err(e) => Err(e.into()),
        }
    }

    /// Writes through a temporary file and a rename so readers never see a
    /// partial entry.
    fn put(&self, key: &str, response: &str) -> Result<(), LlmError> {
        fs::create_dir_all(&self.dir)?;
        let tmp = self.dir.join(format!(
            ".{key}.{}.{}",
            std::process::id(),
            TMP_COUNTER.fetch_add(1, Ordering::Relaxed)
        ));
        let mut f = fs::File::create(&tmp)?;
        f.write_all(response.as_bytes())?;
        f.sync_all()?;
        drop(f);
        fs::rename(&tmp, self.dir.join(key))?;
        Ok(())
    }

    /// Returns the cached response, calling `backend` only on a miss.
    pub fn cached(&self, backend: &dyn LlmBackend, request: &LlmRequest) -> Result<String, LlmError> {
        let key = Self::key(request, backend.model_name());
        if let Some(hit) = self.get(&key)? {
            self.hits.fetch_add(1, Ordering::Relaxed);
            return Ok(hit);
        }
        self.misses.fetch_add(1, Ordering::Relaxed);
        let response = backend.complete(request)?;
        self.put(&key, &response)?;
        Ok(response)
    }
}
