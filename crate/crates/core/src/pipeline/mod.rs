//! Runs a planned [`TransformChain`] over a response body by handing each step
//! to the translator its catalog entry names.

mod event;
mod internal;
mod sniff;

use std::collections::BTreeMap;
use std::fmt;
use std::sync::Arc;
use std::time::Instant;

use async_trait::async_trait;
use bytes::Bytes;
use chrono::Utc;
use thiserror::Error;

use crate::codecs::{CodecError, ConvertOptions};
use crate::external::ExternalError;
use crate::media::MediaType;
use crate::rules::{RulesError, TransformCatalog, TransformChain};

pub use event::{EventLog, Outcome, PassthroughReason, TransformEvent, DEFAULT_EVENT_RETENTION};
pub use internal::CodecTranslator;
pub use sniff::sniff_format;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum TranslatorKind {
    Internal,
    External,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct Capability {
    pub source: MediaType,
    pub target: MediaType,
}

impl Capability {
    pub fn new(source: MediaType, target: MediaType) -> Self {
        Capability { source, target }
    }
}

#[derive(Debug, Error)]
pub enum TranslateError {
    #[error(transparent)]
    Codec(#[from] CodecError),
    #[error(transparent)]
    External(#[from] ExternalError),
    #[error("translator task failed: {0}")]
    Worker(String),
}

/// Something that converts bodies between media types: an in-process codec
/// or a remote conversion service.
#[async_trait]
pub trait Translator: Send + Sync {
    fn name(&self) -> &str;

    fn kind(&self) -> TranslatorKind;

    fn capabilities(&self) -> &[Capability];

    fn supports(&self, source: &MediaType, target: &MediaType) -> bool {
        self.capabilities()
            .iter()
            .any(|c| &c.source == source && &c.target == target)
    }

    async fn translate(
        &self,
        body: Bytes,
        source: &MediaType,
        target: &MediaType,
        opts: &ConvertOptions,
    ) -> Result<Bytes, TranslateError>;
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RegistryError {
    #[error("translator {0:?} is already registered")]
    DuplicateTranslator(String),
    #[error("translator {name:?} advertises {mime} -> {mime}")]
    SelfCapability { name: String, mime: MediaType },
}

/// Translators by name. Built at startup and shared read-only afterwards.
#[derive(Default, Clone)]
pub struct TranslatorRegistry {
    translators: BTreeMap<String, Arc<dyn Translator>>,
}

impl TranslatorRegistry {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn register(&mut self, translator: Arc<dyn Translator>) -> Result<(), RegistryError> {
        let name = translator.name().to_string();
        if self.translators.contains_key(&name) {
            return Err(RegistryError::DuplicateTranslator(name));
        }
        if let Some(c) = translator.capabilities().iter().find(|c| c.source == c.target) {
            return Err(RegistryError::SelfCapability {
                name,
                mime: c.source.clone(),
            });
        }
        self.translators.insert(name, translator);
        Ok(())
    }

    pub fn get(&self, name: &str) -> Option<&Arc<dyn Translator>> {
        self.translators.get(name)
    }

    pub fn contains(&self, name: &str) -> bool {
        self.translators.contains_key(name)
    }

    pub fn names(&self) -> impl Iterator<Item = &str> {
        self.translators.keys().map(String::as_str)
    }

    /// Parses a catalog document and checks that every `library` it names is registered.
    pub fn load_catalog(&self, xml: &str) -> Result<TransformCatalog, RulesError> {
        let catalog = crate::rules::parse_transformations(xml)?;
        catalog.check_translators(|n| self.contains(n))?;
        Ok(catalog)
    }
}

impl fmt::Debug for TranslatorRegistry {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_list().entries(self.translators.keys()).finish()
    }
}

#[derive(Debug, Error)]
pub enum StepCause {
    #[error("translator {0:?} is not registered")]
    UnknownTranslator(String),
    #[error("translator {translator:?} cannot convert {from} -> {to}")]
    Unsupported {
        translator: String,
        from: MediaType,
        to: MediaType,
    },
    #[error(transparent)]
    Translate(#[from] TranslateError),
}

#[derive(Debug, Error)]
#[error("step {step_id:?} failed: {cause}")]
pub struct StepError {
    pub step_id: String,
    #[source]
    pub cause: StepCause,
}

/// Who the chain runs for; copied into the event.
#[derive(Debug, Clone, Default)]
pub struct RequestMeta {
    pub url: String,
    pub profile_id: String,
}

#[derive(Debug)]
pub struct ChainOutput {
    pub body: Bytes,
    pub mime: MediaType,
    pub event: TransformEvent,
}

/// A failed chain. `original` is the untouched input body, never a partial result.
#[derive(Debug)]
pub struct ChainFailure {
    pub error: StepError,
    pub original: Bytes,
    pub event: TransformEvent,
}

/// Pipes `body` through every step of `chain` in order.
///
/// Only the first internal step watermarks (when `opts.watermark` is set);
/// external services never do. An empty chain returns the body unchanged with
/// a `no-rule` pass-through event.
pub async fn execute_chain(
    registry: &TranslatorRegistry,
    body: Bytes,
    chain: &TransformChain,
    opts: &ConvertOptions,
    meta: &RequestMeta,
) -> Result<ChainOutput, ChainFailure> {
    let started_at = Utc::now();
    let clock = Instant::now();
    let input_len = body.len();

    let mut event = TransformEvent {
        timestamp: started_at,
        request_url: meta.url.clone(),
        profile_id: meta.profile_id.clone(),
        chain_ids: chain.ids(),
        initial_mime: chain.initial_mime().clone(),
        final_mime: chain.final_mime().clone(),
        input_bytes: input_len as u64,
        output_bytes: input_len as u64,
        duration_ms: 0,
        cache_hit: false,
        outcome: Outcome::Success,
        detail: None,
        declared_mime: None,
    };

    if chain.is_empty() {
        event.outcome = Outcome::Passthrough(PassthroughReason::NoRule);
        return Ok(ChainOutput {
            body,
            mime: chain.final_mime().clone(),
            event,
        });
    }

    let unwatermarked = opts.without_watermark();
    let mut watermark_pending = opts.watermark;
    let mut current = body.clone();

    for step in chain.steps() {
        let result = async {
            let translator = registry
                .get(&step.translator)
                .ok_or_else(|| StepCause::UnknownTranslator(step.translator.clone()))?;
            if !translator.supports(&step.source_mime, &step.target_mime) {
                return Err(StepCause::Unsupported {
                    translator: step.translator.clone(),
                    from: step.source_mime.clone(),
                    to: step.target_mime.clone(),
                });
            }
            let step_opts = if watermark_pending && translator.kind() == TranslatorKind::Internal {
                watermark_pending = false;
                opts
            } else {
                &unwatermarked
            };
            let out = translator
                .translate(current.clone(), &step.source_mime, &step.target_mime, step_opts)
                .await?;
            Ok(out)
        }
        .await;

        match result {
            Ok(out) => current = out,
            Err(cause) => {
                let error = StepError {
                    step_id: step.id.clone(),
                    cause,
                };
                event.final_mime = chain.initial_mime().clone();
                event.duration_ms = clock.elapsed().as_millis() as u64;
                event.outcome = Outcome::Passthrough(PassthroughReason::StepFailed);
                event.detail = Some(error.to_string());
                return Err(ChainFailure {
                    error,
                    original: body,
                    event,
                });
            }
        }
    }

    event.output_bytes = current.len() as u64;
    event.duration_ms = clock.elapsed().as_millis() as u64;
    Ok(ChainOutput {
        body: current,
        mime: chain.final_mime().clone(),
        event,
    })
}
