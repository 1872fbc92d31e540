use std::sync::atomic::{AtomicU64, Ordering};

use async_trait::async_trait;
use bytes::Bytes;

use super::{Capability, TranslateError, Translator, TranslatorKind};
use crate::codecs::{self, ConvertOptions, ImageFormat};
use crate::media::MediaType;

/// The in-process codecs behind a translator name.
pub struct CodecTranslator {
    name: String,
    capabilities: Vec<Capability>,
    invocations: AtomicU64,
}

impl CodecTranslator {
    /// The name catalogs conventionally use for the native codecs.
    pub const DEFAULT_NAME: &'static str = "TRImageMagick";

    pub fn new(name: impl Into<String>) -> Self {
        let mut capabilities = Vec::new();
        for src in ImageFormat::ALL.into_iter().filter(|f| f.can_decode()) {
            for dst in ImageFormat::ALL.into_iter().filter(|f| f.can_encode()) {
                if src != dst {
                    capabilities.push(Capability::new(src.media_type(), dst.media_type()));
                }
            }
        }
        CodecTranslator {
            name: name.into(),
            capabilities,
            invocations: AtomicU64::new(0),
        }
    }

    /// Number of conversions attempted so far, successful or not.
    pub fn invocations(&self) -> u64 {
        self.invocations.load(Ordering::Relaxed)
    }
}

impl Default for CodecTranslator {
    fn default() -> Self {
        Self::new(Self::DEFAULT_NAME)
    }
}

#[async_trait]
impl Translator for CodecTranslator {
    fn name(&self) -> &str {
        &self.name
    }

    fn kind(&self) -> TranslatorKind {
        TranslatorKind::Internal
    }

    fn capabilities(&self) -> &[Capability] {
        &self.capabilities
    }

    // Accepts alias spellings such as image/jpg as well.
    fn supports(&self, source: &MediaType, target: &MediaType) -> bool {
        match (ImageFormat::from_media_type(source), ImageFormat::from_media_type(target)) {
            (Some(s), Some(t)) => s != t && s.can_decode() && t.can_encode(),
            _ => false,
        }
    }

    async fn translate(
        &self,
        body: Bytes,
        source: &MediaType,
        target: &MediaType,
        opts: &ConvertOptions,
    ) -> Result<Bytes, TranslateError> {
        self.invocations.fetch_add(1, Ordering::Relaxed);
        let (source, target, opts) = (source.clone(), target.clone(), opts.clone());
        // Decoding and encoding are CPU-bound; keep them off the reactor threads.
        let out = tokio::task::spawn_blocking(move || codecs::convert(&body, &source, &target, &opts))
            .await
            .map_err(|e| TranslateError::Worker(e.to_string()))??;
        Ok(Bytes::from(out))
    }
}
