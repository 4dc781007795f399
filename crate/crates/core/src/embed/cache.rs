//! Append-only binary embedding cache.
//!
//! Layout: a fixed header (magic, format version, embedding dimension) then
//! records of `key length (u32 LE) | key bytes (utf-8) | dim * f32 LE`.
//! Values round-trip bit-exactly. Keys encode (modality, encoder fingerprint,
//! world tag, scene id, payload), see [`text_key`] and [`region_key`], so one
//! cache file can serve runs with different encoders or scene content.

use std::collections::HashMap;
use std::fs::{File, OpenOptions};
use std::io::{BufWriter, Read, Write};
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Mutex, RwLock};

use crate::data::BoundingBox;
use crate::embed::{EmbeddingVector, RegionSource, VisionLanguageEncoder};
use crate::error::{Error, Result};

const MAGIC: [u8; 4] = *b"EMBC";
const VERSION: u32 = 1;

pub struct EmbeddingCache {
    path: PathBuf,
    dim: usize,
    map: RwLock<HashMap<String, Vec<f32>>>,
    writer: Mutex<BufWriter<File>>,
}

fn read_u32(data: &[u8], at: usize) -> Option<u32> {
    data.get(at..at + 4)
        .map(|b| u32::from_le_bytes(b.try_into().expect("slice of 4")))
}

impl EmbeddingCache {
    /// Opens or creates a cache for `dim`-dimensional embeddings. An existing
    /// file with a different dimension or version is an error.
    pub fn open(path: &Path, dim: usize) -> Result<Self> {
        if dim == 0 {
            return Err(Error::InvalidArgument(
                "cache dimension must be positive".into(),
            ));
        }
        let mut map = HashMap::new();
        let exists = path.exists();
        if exists {
            let mut data = Vec::new();
            File::open(path)?.read_to_end(&mut data)?;
            Self::decode_into(&data, dim, path, &mut map)?;
        }
        let mut opts = OpenOptions::new();
        opts.append(true).create(true);
        let file = opts.open(path)?;
        let mut writer = BufWriter::new(file);
        if !exists {
            writer.write_all(&MAGIC)?;
            writer.write_all(&VERSION.to_le_bytes())?;
            writer.write_all(&(dim as u32).to_le_bytes())?;
            writer.flush()?;
        }
        Ok(EmbeddingCache {
            path: path.to_path_buf(),
            dim,
            map: RwLock::new(map),
            writer: Mutex::new(writer),
        })
    }

    fn decode_into(
        data: &[u8],
        dim: usize,
        path: &Path,
        map: &mut HashMap<String, Vec<f32>>,
    ) -> Result<()> {
        let corrupt = |what: &str| Error::Backend(format!(
            "embedding cache {} is corrupt: {what}",
            path.display()
        ));
        if data.len() < 12 || data[..4] != MAGIC {
            return Err(corrupt("bad header"));
        }
        let version = read_u32(data, 4).ok_or_else(|| corrupt("truncated header"))?;
        if version != VERSION {
            return Err(Error::Backend(format!(
                "embedding cache {} has format version {version}, expected {VERSION}",
                path.display()
            )));
        }
        let file_dim = read_u32(data, 8).ok_or_else(|| corrupt("truncated header"))? as usize;
        if file_dim != dim {
            return Err(Error::Backend(format!(
                "embedding cache {} holds {file_dim}-dimensional vectors, expected {dim}",
                path.display()
            )));
        }
        let mut at = 12;
        while at < data.len() {
            let key_len = read_u32(data, at).ok_or_else(|| corrupt("truncated record"))? as usize;
            at += 4;
            let key_bytes = data
                .get(at..at + key_len)
                .ok_or_else(|| corrupt("truncated key"))?;
            let key = std::str::from_utf8(key_bytes)
                .map_err(|_| corrupt("key is not utf-8"))?
                .to_string();
            at += key_len;
            let mut values = Vec::with_capacity(dim);
            for _ in 0..dim {
                let bits = read_u32(data, at).ok_or_else(|| corrupt("truncated values"))?;
                values.push(f32::from_bits(bits));
                at += 4;
            }
            map.insert(key, values);
        }
        Ok(())
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.map.read().expect("cache lock poisoned").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn get(&self, key: &str) -> Option<EmbeddingVector> {
        self.map
            .read()
            .expect("cache lock poisoned")
            .get(key)
            .map(|v| EmbeddingVector::new(v.clone()))
    }

    /// Inserts and appends to disk. Re-inserting a key with the same bits is
    /// a no-op; different bits for the same key mean two supposedly pure
    /// computations disagreed and is an error.
    pub fn put(&self, key: &str, value: &EmbeddingVector) -> Result<()> {
        if value.dim() != self.dim {
            return Err(Error::InvalidArgument(format!(
                "cache holds {}-dimensional vectors, got {}",
                self.dim,
                value.dim()
            )));
        }
        {
            let map = self.map.read().expect("cache lock poisoned");
            if let Some(existing) = map.get(key) {
                let same = existing
                    .iter()
                    .zip(&value.values)
                    .all(|(a, b)| a.to_bits() == b.to_bits());
                if same {
                    return Ok(());
                }
                return Err(Error::Backend(format!(
                    "cache key {key:?} rewritten with different values"
                )));
            }
        }
        let mut writer = self.writer.lock().expect("cache writer poisoned");
        writer.write_all(&(key.len() as u32).to_le_bytes())?;
        writer.write_all(key.as_bytes())?;
        for v in &value.values {
            writer.write_all(&v.to_le_bytes())?;
        }
        writer.flush()?;
        self.map
            .write()
            .expect("cache lock poisoned")
            .insert(key.to_string(), value.values.clone());
        Ok(())
    }
}

/// Cache key for a text embedding. Namespaced by the encoder fingerprint:
/// text embeddings depend on nothing else.
pub fn text_key(fingerprint: u64, text: &str) -> String {
    format!("txt|{fingerprint:016x}|{text}")
}

/// Cache key for an image region embedding. Besides the encoder fingerprint
/// this carries a world tag identifying what the regions contain; without it
/// a cache shared across runs would serve stale vectors after any change to
/// the scene content (a hit never reaches the rewrite guard in [`EmbeddingCache::put`]).
pub fn region_key(fingerprint: u64, world_tag: u64, scene_id: &str, bbox: &BoundingBox) -> String {
    format!(
        "img|{fingerprint:016x}|{world_tag:016x}|{scene_id}|{}",
        bbox.cache_key()
    )
}

/// Read-through wrapper: looks embeddings up in the cache and falls back to
/// the encoder, persisting what it computes.
pub struct CachedEncoder {
    inner: Box<dyn VisionLanguageEncoder>,
    cache: Option<EmbeddingCache>,
    fingerprint: u64,
    world_tag: u64,
    hits: AtomicU64,
    misses: AtomicU64,
}

impl CachedEncoder {
    pub fn new(inner: Box<dyn VisionLanguageEncoder>, cache: Option<EmbeddingCache>) -> Self {
        let fingerprint = inner.fingerprint();
        CachedEncoder {
            inner,
            cache,
            fingerprint,
            world_tag: 0,
            hits: AtomicU64::new(0),
            misses: AtomicU64::new(0),
        }
    }

    /// Tags every region key with an identity of the region content, so one
    /// cache directory can be shared across runs whose scenes differ.
    pub fn with_world_tag(mut self, tag: u64) -> Self {
        self.world_tag = tag;
        self
    }

    pub fn encoder(&self) -> &dyn VisionLanguageEncoder {
        self.inner.as_ref()
    }

    pub fn embed_dim(&self) -> usize {
        self.inner.embed_dim()
    }

    /// (hits, misses) observed so far.
    pub fn stats(&self) -> (u64, u64) {
        (
            self.hits.load(Ordering::Relaxed),
            self.misses.load(Ordering::Relaxed),
        )
    }

    fn through_cache(
        &self,
        key: String,
        compute: impl FnOnce() -> Result<EmbeddingVector>,
    ) -> Result<EmbeddingVector> {
        if let Some(cache) = &self.cache {
            if let Some(hit) = cache.get(&key) {
                self.hits.fetch_add(1, Ordering::Relaxed);
                return Ok(hit);
            }
            let value = compute()?;
            self.misses.fetch_add(1, Ordering::Relaxed);
            cache.put(&key, &value)?;
            Ok(value)
        } else {
            self.misses.fetch_add(1, Ordering::Relaxed);
            compute()
        }
    }

    pub fn text(&self, text: &str) -> Result<EmbeddingVector> {
        self.through_cache(text_key(self.fingerprint, text), || {
            self.inner.encode_text(text)
        })
    }

    pub fn region(
        &self,
        scene_id: &str,
        source: &RegionSource<'_>,
        bbox: &BoundingBox,
    ) -> Result<EmbeddingVector> {
        self.through_cache(
            region_key(self.fingerprint, self.world_tag, scene_id, bbox),
            || self.inner.encode_image_region(source, bbox),
        )
    }
}
