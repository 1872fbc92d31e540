//! Content-addressed store of transformed bodies with least-recently-used
//! eviction.
//!
//! Each entry lives in the cache directory as two files named by the hex
//! SHA-256 of its key: `<hex>.body` holds the transformed bytes and
//! `<hex>.meta` one tab-separated line
//! `final_mime \t stored_at (RFC 3339) \t size \t sha256 of body`.
//! Both are written under a temporary name and renamed into place. The
//! recency order is kept in memory only; after a restart it starts out as
//! `stored_at` order.

use std::collections::{BTreeMap, HashMap};
use std::fs;
use std::io;
use std::path::{Path, PathBuf};
use std::sync::Mutex;

use bytes::Bytes;
use chrono::{DateTime, SecondsFormat, SubsecRound, Utc};
use hyper::Uri;
use sha2::{Digest, Sha256};

use crate::codecs::ConvertOptions;
use crate::media::MediaType;

pub const DEFAULT_CAPACITY: u64 = 256 * 1024 * 1024;
pub const DEFAULT_MAX_ENTRY: u64 = 32 * 1024 * 1024;

/// Lowercases scheme and host, drops the default port and fills in an empty
/// path. Strings that do not parse as absolute URLs are returned as given.
pub fn canonical_url(url: &str) -> String {
    let Ok(uri) = url.parse::<Uri>() else {
        return url.to_string();
    };
    let (Some(scheme), Some(authority)) = (uri.scheme_str(), uri.authority()) else {
        return url.to_string();
    };
    let scheme = scheme.to_ascii_lowercase();
    let host = authority.host().to_ascii_lowercase();
    let port = match (scheme.as_str(), authority.port_u16()) {
        ("http", Some(80)) | ("https", Some(443)) | (_, None) => String::new(),
        (_, Some(p)) => format!(":{p}"),
    };
    let path = uri.path_and_query().map_or("/", |pq| pq.as_str());
    let path = if path.is_empty() { "/" } else { path };
    format!("{scheme}://{host}{port}{path}")
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct CacheKey {
    url: String,
    body_digest: [u8; 32],
    chain_signature: String,
}

impl CacheKey {
    pub fn new(url: &str, original_body: &[u8], chain_ids: &[String], opts: &ConvertOptions) -> Self {
        CacheKey {
            url: canonical_url(url),
            body_digest: Sha256::digest(original_body).into(),
            chain_signature: format!("{}|{}", chain_ids.join(","), opts.fingerprint()),
        }
    }

    pub fn from_parts(url: &str, body_digest: [u8; 32], chain_signature: impl Into<String>) -> Self {
        CacheKey {
            url: canonical_url(url),
            body_digest,
            chain_signature: chain_signature.into(),
        }
    }

    pub fn url(&self) -> &str {
        &self.url
    }

    pub fn body_digest(&self) -> &[u8; 32] {
        &self.body_digest
    }

    pub fn chain_signature(&self) -> &str {
        &self.chain_signature
    }

    /// Hex SHA-256 over the length-prefixed key fields; the on-disk file stem.
    pub fn file_stem(&self) -> String {
        let mut h = Sha256::new();
        for field in [self.url.as_bytes(), &self.body_digest, self.chain_signature.as_bytes()] {
            h.update((field.len() as u64).to_le_bytes());
            h.update(field);
        }
        hex::encode(h.finalize())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheEntry {
    pub key: CacheKey,
    pub body: Bytes,
    pub final_mime: MediaType,
    pub stored_at: DateTime<Utc>,
}

impl CacheEntry {
    pub fn new(key: CacheKey, body: Bytes, final_mime: MediaType) -> Self {
        CacheEntry {
            key,
            body,
            final_mime,
            // The meta file keeps microseconds.
            stored_at: Utc::now().trunc_subsecs(6),
        }
    }

    pub fn size(&self) -> u64 {
        self.body.len() as u64
    }
}

#[derive(Debug, Clone, Copy)]
struct Slot {
    size: u64,
    tick: u64,
}

#[derive(Debug, Default)]
struct Index {
    slots: HashMap<String, Slot>,
    by_recency: BTreeMap<u64, String>,
    next_tick: u64,
    total: u64,
}

impl Index {
    fn touch(&mut self, stem: &str) {
        let tick = self.next_tick;
        self.next_tick += 1;
        if let Some(slot) = self.slots.get_mut(stem) {
            self.by_recency.remove(&slot.tick);
            slot.tick = tick;
            self.by_recency.insert(tick, stem.to_string());
        }
    }

    fn insert(&mut self, stem: String, size: u64) {
        self.remove(&stem);
        let tick = self.next_tick;
        self.next_tick += 1;
        self.slots.insert(stem.clone(), Slot { size, tick });
        self.by_recency.insert(tick, stem);
        self.total += size;
    }

    fn remove(&mut self, stem: &str) -> bool {
        match self.slots.remove(stem) {
            Some(slot) => {
                self.by_recency.remove(&slot.tick);
                self.total -= slot.size;
                true
            }
            None => false,
        }
    }

    fn oldest(&self) -> Option<String> {
        self.by_recency.values().next().cloned()
    }
}

/// Disk-backed LRU cache. All operations block on file I/O; async callers
/// should run them on a blocking thread.
#[derive(Debug)]
pub struct TransformCache {
    dir: PathBuf,
    capacity: u64,
    max_entry: u64,
    index: Mutex<Index>,
}

impl TransformCache {
    /// Opens (creating if needed) a cache rooted at `dir`, adopting entries
    /// left by a previous run and evicting down to `capacity`.
    pub fn open(dir: impl Into<PathBuf>, capacity: u64) -> io::Result<Self> {
        Self::with_limits(dir, capacity, DEFAULT_MAX_ENTRY)
    }

    pub fn with_limits(dir: impl Into<PathBuf>, capacity: u64, max_entry: u64) -> io::Result<Self> {
        let dir = dir.into();
        fs::create_dir_all(&dir)?;
        let cache = TransformCache {
            dir,
            capacity,
            max_entry,
            index: Mutex::new(Index::default()),
        };
        cache.load_existing()?;
        Ok(cache)
    }

    pub fn dir(&self) -> &Path {
        &self.dir
    }

    pub fn capacity(&self) -> u64 {
        self.capacity
    }

    pub fn max_entry(&self) -> u64 {
        self.max_entry
    }

    pub fn len(&self) -> usize {
        self.lock().slots.len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    /// Bytes of body data currently stored.
    pub fn total_bytes(&self) -> u64 {
        self.lock().total
    }

    pub fn contains(&self, key: &CacheKey) -> bool {
        self.lock().slots.contains_key(&key.file_stem())
    }

    pub fn get(&self, key: &CacheKey) -> Option<CacheEntry> {
        let stem = key.file_stem();
        let mut index = self.lock();
        if !index.slots.contains_key(&stem) {
            return None;
        }
        match self.read_entry(&stem) {
            Ok((body, final_mime, stored_at)) => {
                index.touch(&stem);
                Some(CacheEntry {
                    key: key.clone(),
                    body,
                    final_mime,
                    stored_at,
                })
            }
            Err(why) => {
                tracing::warn!(entry = %stem, "dropping unreadable cache entry: {why}");
                index.remove(&stem);
                self.delete_files(&stem);
                None
            }
        }
    }

    /// Stores `entry`, replacing any entry under the same key. Entries over the
    /// per-entry cap (or the whole capacity) are skipped; returns whether the
    /// entry was stored.
    pub fn put(&self, entry: &CacheEntry) -> bool {
        let size = entry.size();
        if size > self.max_entry || size > self.capacity {
            tracing::debug!(size, "not caching oversize entry");
            return false;
        }
        let stem = entry.key.file_stem();
        let mut index = self.lock();
        if let Err(e) = self.write_entry(&stem, entry) {
            tracing::warn!(entry = %stem, "cache write failed: {e}");
            index.remove(&stem);
            self.delete_files(&stem);
            return false;
        }
        index.insert(stem.clone(), size);
        self.evict(&mut index, Some(&stem));
        true
    }

    pub fn remove(&self, key: &CacheKey) -> bool {
        let stem = key.file_stem();
        let mut index = self.lock();
        let removed = index.remove(&stem);
        if removed {
            self.delete_files(&stem);
        }
        removed
    }

    fn lock(&self) -> std::sync::MutexGuard<'_, Index> {
        self.index.lock().unwrap_or_else(|p| p.into_inner())
    }

    fn evict(&self, index: &mut Index, keep: Option<&str>) {
        while index.total > self.capacity {
            let Some(victim) = index.oldest() else { break };
            if Some(victim.as_str()) == keep && index.slots.len() == 1 {
                break;
            }
            index.remove(&victim);
            self.delete_files(&victim);
        }
    }

    fn path(&self, stem: &str, ext: &str) -> PathBuf {
        self.dir.join(format!("{stem}.{ext}"))
    }

    fn delete_files(&self, stem: &str) {
        for ext in ["meta", "body"] {
            let path = self.path(stem, ext);
            if let Err(e) = fs::remove_file(&path) {
                if e.kind() != io::ErrorKind::NotFound {
                    tracing::warn!(path = %path.display(), "cache delete failed: {e}");
                }
            }
        }
    }

    fn write_entry(&self, stem: &str, entry: &CacheEntry) -> io::Result<()> {
        let meta = format!(
            "{}\t{}\t{}\t{}\n",
            entry.final_mime,
            entry.stored_at.to_rfc3339_opts(SecondsFormat::Micros, true),
            entry.size(),
            hex::encode(Sha256::digest(&entry.body)),
        );
        // Body first: a meta file never points at a missing body.
        for (ext, data) in [("body", &entry.body[..]), ("meta", meta.as_bytes())] {
            let tmp = self.dir.join(format!(".{stem}.{ext}.tmp"));
            fs::write(&tmp, data)?;
            fs::rename(&tmp, self.path(stem, ext))?;
        }
        Ok(())
    }

    fn read_entry(&self, stem: &str) -> Result<(Bytes, MediaType, DateTime<Utc>), String> {
        let meta = fs::read_to_string(self.path(stem, "meta")).map_err(|e| format!("meta: {e}"))?;
        let meta = Meta::parse(&meta)?;
        let body = fs::read(self.path(stem, "body")).map_err(|e| format!("body: {e}"))?;
        if body.len() as u64 != meta.size {
            return Err(format!("body is {} bytes, meta says {}", body.len(), meta.size));
        }
        if hex::encode(Sha256::digest(&body)) != meta.digest {
            return Err("body digest mismatch".into());
        }
        Ok((Bytes::from(body), meta.mime, meta.stored_at))
    }

    fn load_existing(&self) -> io::Result<()> {
        let mut found = Vec::new();
        for dirent in fs::read_dir(&self.dir)? {
            let path = dirent?.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else {
                continue;
            };
            if name.starts_with('.') && name.ends_with(".tmp") {
                let _ = fs::remove_file(&path);
                continue;
            }
            let Some(stem) = name.strip_suffix(".meta") else {
                continue;
            };
            if stem.len() != 64 || !stem.bytes().all(|b| b.is_ascii_hexdigit()) {
                continue;
            }
            let parsed = fs::read_to_string(&path)
                .map_err(|e| e.to_string())
                .and_then(|text| Meta::parse(&text));
            match parsed {
                Ok(meta) => found.push((meta.stored_at, stem.to_string(), meta.size)),
                Err(why) => {
                    tracing::warn!(entry = stem, "dropping unreadable cache entry: {why}");
                    self.delete_files(stem);
                }
            }
        }
        found.sort();
        let mut index = self.lock();
        for (_, stem, size) in found {
            index.insert(stem, size);
        }
        self.evict(&mut index, None);
        Ok(())
    }
}

struct Meta {
    mime: MediaType,
    stored_at: DateTime<Utc>,
    size: u64,
    digest: String,
}

impl Meta {
    fn parse(line: &str) -> Result<Meta, String> {
        let fields: Vec<&str> = line.trim_end_matches('\n').split('\t').collect();
        let [mime, stored_at, size, digest] = fields[..] else {
            return Err(format!("expected 4 meta fields, found {}", fields.len()));
        };
        Ok(Meta {
            mime: MediaType::parse(mime).map_err(|e| e.to_string())?,
            stored_at: DateTime::parse_from_rfc3339(stored_at)
                .map_err(|e| e.to_string())?
                .with_timezone(&Utc),
            size: size.parse().map_err(|_| format!("bad size {size:?}"))?,
            digest: digest.to_string(),
        })
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    const KIB: u64 = 1024;

    fn key(n: u8) -> CacheKey {
        CacheKey::new(&format!("http://origin/{n}.png"), &[n], &["PNG->BMP".into()], &ConvertOptions::default())
    }

    fn entry(n: u8, size: u64) -> CacheEntry {
        CacheEntry::new(key(n), Bytes::from(vec![n; size as usize]), MediaType::parse("image/bmp").unwrap())
    }

    #[test]
    fn put_then_get() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TransformCache::open(dir.path(), DEFAULT_CAPACITY).unwrap();
        let e = entry(1, 100);
        assert!(cache.get(&e.key).is_none());
        assert!(cache.put(&e));
        let got = cache.get(&e.key).unwrap();
        assert_eq!(got.body, e.body);
        assert_eq!(got.final_mime, e.final_mime);
        assert_eq!(got.stored_at, e.stored_at);
        let stem = e.key.file_stem();
        assert!(dir.path().join(format!("{stem}.body")).is_file());
        assert!(dir.path().join(format!("{stem}.meta")).is_file());
    }

    #[test]
    fn lru_evicts_oldest() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TransformCache::open(dir.path(), 100 * KIB).unwrap();
        for n in [1, 2, 3] {
            cache.put(&entry(n, 40 * KIB));
        }
        assert!(!cache.contains(&key(1)));
        assert!(cache.contains(&key(2)));
        assert!(cache.contains(&key(3)));
        assert_eq!(cache.total_bytes(), 80 * KIB);
    }

    #[test]
    fn get_refreshes_recency() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TransformCache::open(dir.path(), 100 * KIB).unwrap();
        cache.put(&entry(1, 40 * KIB));
        cache.put(&entry(2, 40 * KIB));
        cache.get(&key(1)).unwrap();
        cache.put(&entry(3, 40 * KIB));
        assert!(cache.contains(&key(1)));
        assert!(!cache.contains(&key(2)));
    }

    #[test]
    fn overwrite_keeps_second_body() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TransformCache::open(dir.path(), DEFAULT_CAPACITY).unwrap();
        cache.put(&entry(1, 10));
        let mut second = entry(1, 20);
        second.body = Bytes::from_static(b"second body");
        cache.put(&second);
        assert_eq!(cache.get(&key(1)).unwrap().body, second.body);
        assert_eq!(cache.len(), 1);
        assert_eq!(cache.total_bytes(), second.size());
    }

    #[test]
    fn oversize_entry_skipped() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TransformCache::open(dir.path(), DEFAULT_CAPACITY).unwrap();
        let big = entry(1, 33 * 1024 * KIB);
        assert!(!cache.put(&big));
        assert!(cache.get(&big.key).is_none());
        assert_eq!(cache.total_bytes(), 0);
        assert!(cache.put(&entry(2, DEFAULT_MAX_ENTRY)));
    }

    #[test]
    fn key_fields_each_matter() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TransformCache::open(dir.path(), DEFAULT_CAPACITY).unwrap();
        let opts = ConvertOptions::default();
        let body = b"original bytes".to_vec();
        let base = CacheKey::new("http://o/a", &body, &["A".into()], &opts);
        cache.put(&CacheEntry::new(base.clone(), Bytes::from_static(b"x"), MediaType::octet_stream()));

        let other_chain = CacheKey::new("http://o/a", &body, &["B".into()], &opts);
        let other_opts = CacheKey::new("http://o/a", &body, &["A".into()], &opts.without_watermark());
        let mut changed = body.clone();
        changed[0] ^= 1;
        let other_body = CacheKey::new("http://o/a", &changed, &["A".into()], &opts);
        let other_url = CacheKey::new("http://o/b", &body, &["A".into()], &opts);
        for k in [other_chain, other_opts, other_body, other_url] {
            assert_ne!(k, base);
            assert!(cache.get(&k).is_none());
        }
        assert!(cache.get(&base).is_some());
        assert_eq!(CacheKey::new("HTTP://O:80/a", &body, &["A".into()], &opts), base);
    }

    #[test]
    fn corrupted_entry_is_a_miss_and_evicted() {
        let dir = tempfile::tempdir().unwrap();
        let cache = TransformCache::open(dir.path(), DEFAULT_CAPACITY).unwrap();
        let e = entry(1, 64);
        cache.put(&e);
        let body_path = dir.path().join(format!("{}.body", e.key.file_stem()));
        let mut bytes = fs::read(&body_path).unwrap();
        bytes[3] ^= 0xFF;
        fs::write(&body_path, bytes).unwrap();
        assert!(cache.get(&e.key).is_none());
        assert!(!cache.contains(&e.key));
        assert!(!body_path.exists());
    }

    #[test]
    fn entries_survive_reopen() {
        let dir = tempfile::tempdir().unwrap();
        {
            let cache = TransformCache::open(dir.path(), DEFAULT_CAPACITY).unwrap();
            cache.put(&entry(1, 10));
            cache.put(&entry(2, 20));
        }
        fs::write(dir.path().join(".stray.body.tmp"), b"junk").unwrap();
        let cache = TransformCache::open(dir.path(), DEFAULT_CAPACITY).unwrap();
        assert_eq!(cache.len(), 2);
        assert_eq!(cache.get(&key(2)).unwrap().body.len(), 20);
        assert!(!dir.path().join(".stray.body.tmp").exists());

        let smaller = TransformCache::open(dir.path(), 25).unwrap();
        assert_eq!(smaller.len(), 1);
        assert!(smaller.contains(&key(2)));
    }

    #[test]
    fn url_canonicalization() {
        assert_eq!(canonical_url("HTTP://Example.ORG:80"), "http://example.org/");
        assert_eq!(canonical_url("http://h:8080/a?b=C"), "http://h:8080/a?b=C");
        assert_eq!(canonical_url("not a url"), "not a url");
    }

    proptest! {
        #[test]
        fn resident_bytes_within_capacity(sizes in proptest::collection::vec(0u64..3000, 1..40), capacity in 1u64..8000) {
            let dir = tempfile::tempdir().unwrap();
            let cache = TransformCache::with_limits(dir.path(), capacity, 4000).unwrap();
            for (i, size) in sizes.iter().enumerate() {
                cache.put(&entry(i as u8, *size));
                prop_assert!(cache.total_bytes() <= capacity);
            }
        }
    }
}
