//! On-disk cache of model replies.
//!
//! One JSON file per request, named by the SHA-256 of its [`CacheKey`].
//! Writes go to a temporary file first and are renamed into place.

use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Mutex;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use visfocus_core::Task;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CacheKey {
    pub image_sha256: String,
    pub image_id: String,
    pub task: Task,
    pub template_version: String,
    pub model_id: String,
    /// Hash of the rendered prompt, so a changed name or party misses the cache.
    pub prompt_sha256: String,
}

impl CacheKey {
    pub fn digest(&self) -> String {
        let canonical = serde_json::to_string(self).expect("cache key serializes");
        hex::encode(Sha256::digest(canonical.as_bytes()))
    }
}

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct CachedReply {
    pub key: CacheKey,
    pub content: String,
}

pub struct ResponseCache {
    dir: PathBuf,
    write_lock: Mutex<()>,
    tmp_counter: AtomicU64,
}

impl ResponseCache {
    pub fn open(dir: &Path) -> io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(ResponseCache {
            dir: dir.to_path_buf(),
            write_lock: Mutex::new(()),
            tmp_counter: AtomicU64::new(0),
        })
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    fn path_for(&self, key: &CacheKey) -> PathBuf {
        self.dir.join(format!("{}.json", key.digest()))
    }

    /// A stored reply whose key matches exactly; unreadable entries count as misses.
    pub fn get(&self, key: &CacheKey) -> Option<CachedReply> {
        let text = fs::read_to_string(self.path_for(key)).ok()?;
        match serde_json::from_str::<CachedReply>(&text) {
            Ok(r) if &r.key == key => Some(r),
            Ok(_) => None,
            Err(e) => {
                log::warn!("ignoring corrupt cache entry for {}: {e}", key.image_id);
                None
            }
        }
    }

    pub fn put(&self, key: &CacheKey, content: &str) -> io::Result<()> {
        let entry = CachedReply { key: key.clone(), content: content.to_string() };
        let text = serde_json::to_string_pretty(&entry).map_err(io::Error::other)?;
        let _guard = self.write_lock.lock().unwrap_or_else(|p| p.into_inner());
        let n = self.tmp_counter.fetch_add(1, Ordering::Relaxed);
        let tmp = self.dir.join(format!(".{}.{}.{n}.tmp", key.digest(), std::process::id()));
        fs::write(&tmp, text)?;
        fs::rename(&tmp, self.path_for(key))
    }
}
