//! Process-wide state shared by the proxy and admin listeners.

use std::io;
use std::path::{Path, PathBuf};
use std::sync::{Arc, RwLock};

use grace_core::cache::TransformCache;
use grace_core::external::{ExternalServiceConfig, ExternalTranslator};
use grace_core::pipeline::{CodecTranslator, EventLog, TranslatorRegistry, DEFAULT_EVENT_RETENTION};
use grace_core::rules::{parse_profiles, serialize_profiles, Profile, ProfileSet, RulesError, TransformCatalog};
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ProxyConfig;
use crate::upstream::Upstream;

#[derive(Debug, Error)]
pub enum LoadError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("{path}: {source}")]
    Rules {
        path: PathBuf,
        #[source]
        source: RulesError,
    },
    #[error("writing {path}: {source}")]
    Write {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("cache directory {path}: {source}")]
    Cache {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("event log {path}: {source}")]
    EventLog {
        path: PathBuf,
        #[source]
        source: io::Error,
    },
    #[error("conversion service: {0}")]
    External(#[from] grace_core::external::ExternalError),
}

/// The catalog and profiles in force. Replaced as a whole, never mutated.
#[derive(Debug, Clone)]
pub struct Snapshot {
    pub catalog: TransformCatalog,
    pub profiles: ProfileSet,
}

impl Snapshot {
    /// Reads both documents; the catalog is checked against `registry`.
    pub fn load(config: &ProxyConfig, registry: &TranslatorRegistry) -> Result<Snapshot, LoadError> {
        let catalog_path = &config.transformations_path;
        let catalog = registry
            .load_catalog(&read(catalog_path)?)
            .map_err(|source| rules_error(catalog_path, source))?;
        let profiles_path = &config.profiles_path;
        let mut profiles =
            parse_profiles(&read(profiles_path)?, &catalog).map_err(|source| rules_error(profiles_path, source))?;
        profiles
            .set_default_profile(config.default_profile.clone())
            .map_err(|source| rules_error(profiles_path, source))?;
        Ok(Snapshot { catalog, profiles })
    }
}

fn read(path: &Path) -> Result<String, LoadError> {
    std::fs::read_to_string(path).map_err(|source| LoadError::Read {
        path: path.to_path_buf(),
        source,
    })
}

fn rules_error(path: &Path, source: RulesError) -> LoadError {
    LoadError::Rules {
        path: path.to_path_buf(),
        source,
    }
}

/// Opaque token that changes whenever a profile's rule list does.
pub fn profile_version(profile: &Profile) -> String {
    let mut h = Sha256::new();
    h.update(profile.id.as_bytes());
    for rule in profile.rule_ids() {
        h.update([0]);
        h.update(rule.as_bytes());
    }
    hex::encode(&h.finalize()[..8])
}

/// Writes `contents` beside `path` and renames it into place.
pub fn write_atomically(path: &Path, contents: &str) -> io::Result<()> {
    let file_name = path
        .file_name()
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "path has no file name"))?;
    let mut tmp_name = std::ffi::OsString::from(".");
    tmp_name.push(file_name);
    tmp_name.push(".tmp");
    let tmp = path.with_file_name(tmp_name);
    std::fs::write(&tmp, contents)?;
    std::fs::rename(&tmp, path)
}

pub struct AppState {
    pub config: ProxyConfig,
    pub registry: TranslatorRegistry,
    pub cache: Option<TransformCache>,
    pub events: EventLog,
    pub upstream: Upstream,
    snapshot: RwLock<Arc<Snapshot>>,
    writes: tokio::sync::Mutex<()>,
}

impl AppState {
    /// The translators a stock deployment offers: the native codecs and,
    /// registered even when no service URL is configured, the remote one.
    pub fn default_registry(config: &ProxyConfig) -> Result<TranslatorRegistry, LoadError> {
        let external = match &config.external {
            Some(ext) => Some(ExternalServiceConfig::new(&ext.base_url)?.with_timeout(ext.timeout)?),
            None => None,
        };
        let mut registry = TranslatorRegistry::new();
        registry
            .register(Arc::new(CodecTranslator::default()))
            .expect("empty registry");
        registry
            .register(Arc::new(ExternalTranslator::new(external)))
            .expect("distinct translator names");
        Ok(registry)
    }

    pub fn new(config: ProxyConfig, registry: TranslatorRegistry) -> Result<Arc<AppState>, LoadError> {
        let snapshot = Snapshot::load(&config, &registry)?;
        let cache = if config.cache.enabled {
            let dir = config.cache.dir.clone().unwrap_or_else(|| {
                std::env::temp_dir().join(format!("grace-cache-{}", std::process::id()))
            });
            let cache = TransformCache::open(&dir, config.cache.capacity)
                .map_err(|source| LoadError::Cache { path: dir, source })?;
            Some(cache)
        } else {
            None
        };
        let events = match &config.event_log {
            Some(path) => EventLog::with_file(DEFAULT_EVENT_RETENTION, path).map_err(|source| LoadError::EventLog {
                path: path.clone(),
                source,
            })?,
            None => EventLog::default(),
        };
        Ok(Arc::new(AppState {
            config,
            registry,
            cache,
            events,
            upstream: Upstream::default(),
            snapshot: RwLock::new(Arc::new(snapshot)),
            writes: tokio::sync::Mutex::new(()),
        }))
    }

    pub fn snapshot(&self) -> Arc<Snapshot> {
        self.snapshot.read().unwrap_or_else(|p| p.into_inner()).clone()
    }

    fn swap(&self, next: Snapshot) {
        *self.snapshot.write().unwrap_or_else(|p| p.into_inner()) = Arc::new(next);
    }

    /// Holds off other writers; readers are never blocked.
    pub async fn write_guard(&self) -> tokio::sync::MutexGuard<'_, ()> {
        self.writes.lock().await
    }

    /// Persists `profiles` to the profiles file, then publishes them.
    /// Callers hold the write guard.
    pub fn commit_profiles(&self, profiles: ProfileSet) -> Result<(), LoadError> {
        let path = &self.config.profiles_path;
        write_atomically(path, &serialize_profiles(&profiles)).map_err(|source| LoadError::Write {
            path: path.clone(),
            source,
        })?;
        let catalog = self.snapshot().catalog.clone();
        self.swap(Snapshot { catalog, profiles });
        Ok(())
    }

    /// Rereads both documents and publishes them if they load cleanly.
    pub async fn reload(&self) -> Result<Arc<Snapshot>, LoadError> {
        let _guard = self.write_guard().await;
        let next = Snapshot::load(&self.config, &self.registry)?;
        self.swap(next);
        Ok(self.snapshot())
    }
}
