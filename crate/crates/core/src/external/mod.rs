//! Client for a remote conversion service, plus a stub implementation of that
//! service for tests.
//!
//! Wire protocol: `POST {base_url}/convert` with the payload as body, the
//! source type in `Content-Type` and the wanted type in `Accept`. A 200 reply
//! must carry `Content-Type` equal to the requested type. Services answer 415
//! for pairs they cannot convert, 413 for payloads that are too large and 422
//! for payloads they cannot decode.

mod stub;

use std::time::Duration;

use async_trait::async_trait;
use bytes::Bytes;
use http_body_util::{BodyExt, Full, Limited};
use hyper::header::{ACCEPT, CONTENT_LENGTH, CONTENT_TYPE};
use hyper::{Method, Request, StatusCode, Uri};
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::TokioExecutor;
use thiserror::Error;

use crate::codecs::ConvertOptions;
use crate::media::{well_known, MediaType};
use crate::pipeline::{Capability, TranslateError, Translator, TranslatorKind};

pub use stub::{StubError, StubServer};

pub const DEFAULT_TIMEOUT: Duration = Duration::from_millis(10_000);
pub const DEFAULT_MAX_PAYLOAD: usize = 32 * 1024 * 1024;

#[derive(Debug, Error)]
pub enum ExternalError {
    #[error("invalid conversion service config: {0}")]
    Config(String),
    #[error("no conversion service configured")]
    NotConfigured,
    #[error("payload of {size} bytes exceeds the {max} byte limit")]
    PayloadTooLarge { size: usize, max: usize },
    #[error("conversion service answered {0}")]
    Remote(StatusCode),
    #[error("conversion service protocol violation: {0}")]
    Protocol(String),
    #[error("conversion service did not answer within {0:?}")]
    Timeout(Duration),
    #[error("conversion service unreachable: {0}")]
    Connect(String),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ExternalServiceConfig {
    base_url: Uri,
    pub timeout: Duration,
    pub max_payload: usize,
}

impl ExternalServiceConfig {
    /// Accepts plain `http://host[:port][/prefix]` URLs only.
    pub fn new(base_url: &str) -> Result<Self, ExternalError> {
        let uri: Uri = base_url
            .parse()
            .map_err(|e| ExternalError::Config(format!("{base_url:?}: {e}")))?;
        if uri.scheme_str() != Some("http") {
            return Err(ExternalError::Config(format!("{base_url:?}: scheme must be http")));
        }
        if uri.authority().is_none_or(|a| a.host().is_empty()) {
            return Err(ExternalError::Config(format!("{base_url:?}: missing host")));
        }
        if uri.query().is_some() {
            return Err(ExternalError::Config(format!("{base_url:?}: query not allowed")));
        }
        Ok(ExternalServiceConfig {
            base_url: uri,
            timeout: DEFAULT_TIMEOUT,
            max_payload: DEFAULT_MAX_PAYLOAD,
        })
    }

    pub fn with_timeout(mut self, timeout: Duration) -> Result<Self, ExternalError> {
        if timeout.is_zero() {
            return Err(ExternalError::Config("timeout must be positive".into()));
        }
        self.timeout = timeout;
        Ok(self)
    }

    pub fn with_max_payload(mut self, max_payload: usize) -> Self {
        self.max_payload = max_payload;
        self
    }

    pub fn base_url(&self) -> &Uri {
        &self.base_url
    }

    fn convert_uri(&self) -> Uri {
        let base = self.base_url.to_string();
        format!("{}/convert", base.trim_end_matches('/'))
            .parse()
            .expect("validated base url plus path")
    }
}

/// Reusable HTTP client for one conversion service.
#[derive(Clone)]
pub struct RemoteConverter {
    config: ExternalServiceConfig,
    client: Client<HttpConnector, Full<Bytes>>,
}

impl RemoteConverter {
    pub fn new(config: ExternalServiceConfig) -> Self {
        let client = Client::builder(TokioExecutor::new()).build_http();
        RemoteConverter { config, client }
    }

    pub fn config(&self) -> &ExternalServiceConfig {
        &self.config
    }

    pub async fn convert(
        &self,
        body: Bytes,
        src: &MediaType,
        dst: &MediaType,
    ) -> Result<Bytes, ExternalError> {
        let max = self.config.max_payload;
        if body.len() > max {
            return Err(ExternalError::PayloadTooLarge { size: body.len(), max });
        }
        let request = Request::builder()
            .method(Method::POST)
            .uri(self.config.convert_uri())
            .header(CONTENT_TYPE, src.as_str())
            .header(ACCEPT, dst.as_str())
            .header(CONTENT_LENGTH, body.len())
            .body(Full::new(body))
            .map_err(|e| ExternalError::Protocol(e.to_string()))?;

        let exchange = async {
            let response = self
                .client
                .request(request)
                .await
                .map_err(|e| ExternalError::Connect(e.to_string()))?;
            if response.status() != StatusCode::OK {
                return Err(ExternalError::Remote(response.status()));
            }
            let content_type = response
                .headers()
                .get(CONTENT_TYPE)
                .and_then(|v| v.to_str().ok())
                .and_then(|v| MediaType::parse(v).ok());
            if content_type.as_ref() != Some(dst) {
                return Err(ExternalError::Protocol(format!(
                    "asked for {dst}, got {}",
                    content_type.map_or_else(|| "no content type".to_string(), |m| m.to_string())
                )));
            }
            let bytes = Limited::new(response.into_body(), max)
                .collect()
                .await
                .map_err(|e| ExternalError::Protocol(format!("reading response: {e}")))?
                .to_bytes();
            Ok(bytes)
        };
        tokio::time::timeout(self.config.timeout, exchange)
            .await
            .map_err(|_| ExternalError::Timeout(self.config.timeout))?
    }
}

/// One-shot form of [`RemoteConverter::convert`].
pub async fn remote_convert(
    cfg: &ExternalServiceConfig,
    body: Bytes,
    src: &MediaType,
    dst: &MediaType,
) -> Result<Bytes, ExternalError> {
    RemoteConverter::new(cfg.clone()).convert(body, src, dst).await
}

/// Pipeline translator that forwards every step to a conversion service.
/// It never watermarks: the remote service owns the pixels it returns.
pub struct ExternalTranslator {
    name: String,
    capabilities: Vec<Capability>,
    converter: Option<RemoteConverter>,
}

impl ExternalTranslator {
    pub const DEFAULT_NAME: &'static str = "TRExternal";

    /// JPEG 2000 to JPEG and PNG.
    pub fn default_capabilities() -> Vec<Capability> {
        let mt = |s| MediaType::parse(s).expect("well-known media type");
        vec![
            Capability::new(mt(well_known::JP2), mt(well_known::JPEG)),
            Capability::new(mt(well_known::JP2), mt(well_known::PNG)),
        ]
    }

    /// With `config` unset the translator is still registered (so catalogs
    /// naming it load) but every conversion fails with `NotConfigured`.
    pub fn new(config: Option<ExternalServiceConfig>) -> Self {
        ExternalTranslator {
            name: Self::DEFAULT_NAME.to_string(),
            capabilities: Self::default_capabilities(),
            converter: config.map(RemoteConverter::new),
        }
    }

    pub fn with_name(mut self, name: impl Into<String>) -> Self {
        self.name = name.into();
        self
    }

    pub fn with_capabilities(mut self, capabilities: Vec<Capability>) -> Self {
        self.capabilities = capabilities;
        self
    }

    pub fn is_configured(&self) -> bool {
        self.converter.is_some()
    }
}

#[async_trait]
impl Translator for ExternalTranslator {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> TranslatorKind {
        TranslatorKind::External
    }

    fn capabilities(&self) -> &[Capability] {
        &self.capabilities
    }

    async fn translate(
        &self,
        body: Bytes,
        source: &MediaType,
        target: &MediaType,
        _opts: &ConvertOptions,
    ) -> Result<Bytes, TranslateError> {
        let converter = self.converter.as_ref().ok_or(ExternalError::NotConfigured)?;
        Ok(converter.convert(body, source, target).await?)
    }
}
