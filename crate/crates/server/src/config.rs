//! Command line and config file handling.
//!
//! `GRACE_CONFIG` may name a TOML file whose keys mirror the long flags
//! (`listen = "127.0.0.1:8118"`, `cache-capacity = 1048576`, ...). Flags given
//! on the command line win over the file.

use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::time::Duration;

use clap::Parser;
use grace_core::codecs::{ConvertOptions, Rgb};
use grace_core::rules::DEFAULT_MAX_DEPTH;
use serde::Deserialize;
use thiserror::Error;

pub const CONFIG_ENV: &str = "GRACE_CONFIG";
pub const DEFAULT_LISTEN: &str = "127.0.0.1:8118";
pub const DEFAULT_ADMIN_LISTEN: &str = "127.0.0.1:8119";
pub const DEFAULT_MAX_TRANSFORM_BYTES: usize = 64 * 1024 * 1024;
pub const DEFAULT_UPSTREAM_TIMEOUT_MS: u64 = 30_000;

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("reading {path}: {source}")]
    Read {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
    #[error("parsing {path}: {source}")]
    Toml {
        path: PathBuf,
        #[source]
        source: toml::de::Error,
    },
    #[error("{key}: {message}")]
    Invalid { key: &'static str, message: String },
    #[error("{0} is required (flag or config file)")]
    Missing(&'static str),
}

/// Raw settings, from either source. Every field is optional so the two can be layered.
#[derive(Debug, Default, Clone, Parser, Deserialize)]
#[command(name = "grace", version, about = "Forward HTTP proxy that transcodes response bodies per user profile")]
#[serde(default, deny_unknown_fields, rename_all = "kebab-case")]
pub struct Settings {
    /// Proxy listen address
    #[arg(long, value_name = "HOST:PORT")]
    pub listen: Option<String>,
    /// Profile document (XML)
    #[arg(long, value_name = "PATH")]
    pub profiles: Option<PathBuf>,
    /// Transformation catalog (XML)
    #[arg(long, value_name = "PATH")]
    pub transformations: Option<PathBuf>,
    /// Profile used when a request does not name one
    #[arg(long, value_name = "ID")]
    pub default_profile: Option<String>,
    /// Identify bodies by magic bytes instead of trusting Content-Type
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub sniff: Option<bool>,
    /// Do not stamp transformed images
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub no_watermark: Option<bool>,
    /// Watermark text
    #[arg(long, value_name = "TEXT")]
    pub watermark_text: Option<String>,
    /// Background for flattening transparency, RRGGBB
    #[arg(long, value_name = "RRGGBB")]
    pub matte: Option<String>,
    /// Transform cache directory (default: a fresh temporary directory)
    #[arg(long, value_name = "PATH")]
    pub cache_dir: Option<PathBuf>,
    /// Transform cache size limit in bytes
    #[arg(long, value_name = "N")]
    pub cache_capacity: Option<u64>,
    /// Disable the transform cache
    #[arg(long, num_args = 0..=1, require_equals = true, default_missing_value = "true")]
    pub no_cache: Option<bool>,
    /// Larger bodies are passed through untransformed
    #[arg(long, value_name = "N")]
    pub max_transform_bytes: Option<usize>,
    /// Origin response timeout in milliseconds
    #[arg(long, value_name = "MS")]
    pub upstream_timeout_ms: Option<u64>,
    /// Longest transformation chain
    #[arg(long, value_name = "N")]
    pub max_chain_depth: Option<usize>,
    /// Base URL of the remote conversion service
    #[arg(long, value_name = "URL")]
    pub external_url: Option<String>,
    /// Remote conversion timeout in milliseconds
    #[arg(long, value_name = "MS")]
    pub external_timeout_ms: Option<u64>,
    /// Admin API listen address
    #[arg(long, value_name = "HOST:PORT")]
    pub admin_listen: Option<String>,
    /// Append transformation events to this file
    #[arg(long, value_name = "PATH")]
    pub event_log: Option<PathBuf>,
    /// Log filter, e.g. info or grace=debug
    #[arg(long, value_name = "LEVEL")]
    pub log_level: Option<String>,
}

impl Settings {
    pub fn from_args<I: IntoIterator<Item = String>>(args: I) -> Result<Self, clap::Error> {
        Settings::try_parse_from(args)
    }

    pub fn from_file(path: &Path) -> Result<Self, ConfigError> {
        let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Read {
            path: path.to_path_buf(),
            source,
        })?;
        toml::from_str(&text).map_err(|source| ConfigError::Toml {
            path: path.to_path_buf(),
            source,
        })
    }

    /// `self` wins wherever it has a value.
    pub fn layered_over(self, base: Settings) -> Settings {
        macro_rules! pick {
            ($($f:ident),*) => { Settings { $($f: self.$f.or(base.$f)),* } };
        }
        pick!(
            listen, profiles, transformations, default_profile, sniff, no_watermark, watermark_text,
            matte, cache_dir, cache_capacity, no_cache, max_transform_bytes, upstream_timeout_ms,
            max_chain_depth, external_url, external_timeout_ms, admin_listen, event_log, log_level
        )
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct CacheSettings {
    pub enabled: bool,
    pub dir: Option<PathBuf>,
    pub capacity: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalSettings {
    pub base_url: String,
    pub timeout: Duration,
}

/// Validated proxy configuration.
#[derive(Debug, Clone)]
pub struct ProxyConfig {
    pub listen: SocketAddr,
    pub admin_listen: SocketAddr,
    pub profiles_path: PathBuf,
    pub transformations_path: PathBuf,
    pub default_profile: Option<String>,
    pub max_transform_bytes: usize,
    pub sniff: bool,
    pub upstream_timeout: Duration,
    pub max_chain_depth: usize,
    pub convert: ConvertOptions,
    pub cache: CacheSettings,
    pub external: Option<ExternalSettings>,
    pub event_log: Option<PathBuf>,
    pub log_level: String,
}

impl ProxyConfig {
    /// Defaults for everything except the two document paths.
    pub fn new(profiles_path: impl Into<PathBuf>, transformations_path: impl Into<PathBuf>) -> Self {
        ProxyConfig {
            listen: DEFAULT_LISTEN.parse().expect("default listen address"),
            admin_listen: DEFAULT_ADMIN_LISTEN.parse().expect("default admin address"),
            profiles_path: profiles_path.into(),
            transformations_path: transformations_path.into(),
            default_profile: None,
            max_transform_bytes: DEFAULT_MAX_TRANSFORM_BYTES,
            sniff: false,
            upstream_timeout: Duration::from_millis(DEFAULT_UPSTREAM_TIMEOUT_MS),
            max_chain_depth: DEFAULT_MAX_DEPTH,
            convert: ConvertOptions::default(),
            cache: CacheSettings {
                enabled: true,
                dir: None,
                capacity: grace_core::cache::DEFAULT_CAPACITY,
            },
            external: None,
            event_log: None,
            log_level: "info".to_string(),
        }
    }

    /// `cli` layered over the file named by `GRACE_CONFIG`, if any.
    pub fn from_cli_and_env(cli: Settings) -> Result<Self, ConfigError> {
        let file = match std::env::var_os(CONFIG_ENV) {
            Some(path) => Settings::from_file(Path::new(&path))?,
            None => Settings::default(),
        };
        Self::from_settings(cli.layered_over(file))
    }

    pub fn from_settings(s: Settings) -> Result<Self, ConfigError> {
        let mut cfg = ProxyConfig::new(
            s.profiles.ok_or(ConfigError::Missing("profiles"))?,
            s.transformations.ok_or(ConfigError::Missing("transformations"))?,
        );
        let addr = |key, value: String| {
            value.parse::<SocketAddr>().map_err(|e| ConfigError::Invalid {
                key,
                message: format!("{value:?}: {e}"),
            })
        };
        let positive = |key, n: u64| {
            if n == 0 {
                Err(ConfigError::Invalid { key, message: "must be positive".into() })
            } else {
                Ok(n)
            }
        };
        if let Some(v) = s.listen {
            cfg.listen = addr("listen", v)?;
        }
        if let Some(v) = s.admin_listen {
            cfg.admin_listen = addr("admin-listen", v)?;
        }
        cfg.default_profile = s.default_profile;
        if let Some(v) = s.max_transform_bytes {
            cfg.max_transform_bytes = v;
        }
        cfg.sniff = s.sniff.unwrap_or(false);
        if let Some(ms) = s.upstream_timeout_ms {
            cfg.upstream_timeout = Duration::from_millis(positive("upstream-timeout-ms", ms)?);
        }
        if let Some(depth) = s.max_chain_depth {
            cfg.max_chain_depth = positive("max-chain-depth", depth as u64)? as usize;
        }
        cfg.convert.watermark = !s.no_watermark.unwrap_or(false);
        if let Some(text) = s.watermark_text {
            cfg.convert.watermark_text = text;
        }
        if let Some(matte) = s.matte {
            cfg.convert.matte_color = matte
                .parse::<Rgb>()
                .map_err(|message| ConfigError::Invalid { key: "matte", message })?;
        }
        cfg.cache.enabled = !s.no_cache.unwrap_or(false);
        cfg.cache.dir = s.cache_dir;
        if let Some(n) = s.cache_capacity {
            cfg.cache.capacity = n;
        }
        if let Some(base_url) = s.external_url {
            let timeout = match s.external_timeout_ms {
                Some(ms) => Duration::from_millis(positive("external-timeout-ms", ms)?),
                None => grace_core::external::DEFAULT_TIMEOUT,
            };
            cfg.external = Some(ExternalSettings { base_url, timeout });
        }
        cfg.event_log = s.event_log;
        if let Some(level) = s.log_level {
            cfg.log_level = level;
        }
        Ok(cfg)
    }
}
