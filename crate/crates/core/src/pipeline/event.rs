//! Audit records for applied (or skipped) transformation chains.
//!
//! The append-only log file holds one record per line as space-separated
//! `key=value` pairs, in this order:
//!
//! ```text
//! ts=2026-10-15T09:30:00.125Z url="http://example.org/a.xbm" profile=dswaney chain=XBM->PNG from=image/x-xbitmap to=image/png in=61 out=190 ms=3 cache=miss outcome=success
//! ```
//!
//! `url` and the optional trailing `detail` and `declared` fields are always
//! double-quoted with `\"` and `\\` escapes. `chain` is `-` when empty and
//! `profile` is `-` for the empty profile. `outcome` is `success` or
//! `passthrough:<reason>`.

use std::collections::VecDeque;
use std::fmt;
use std::fs::{File, OpenOptions};
use std::io::{self, Write};
use std::path::Path;
use std::sync::Mutex;

use chrono::{DateTime, SecondsFormat, Utc};
use serde::Serialize;

use crate::media::MediaType;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum PassthroughReason {
    NoRule,
    Cycle,
    DepthExceeded,
    StepFailed,
    UnsupportedEncoding,
}

impl PassthroughReason {
    pub fn as_str(self) -> &'static str {
        match self {
            PassthroughReason::NoRule => "no-rule",
            PassthroughReason::Cycle => "cycle",
            PassthroughReason::DepthExceeded => "depth-exceeded",
            PassthroughReason::StepFailed => "step-failed",
            PassthroughReason::UnsupportedEncoding => "unsupported-encoding",
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(tag = "kind", content = "reason", rename_all = "kebab-case")]
pub enum Outcome {
    Success,
    Passthrough(PassthroughReason),
}

impl fmt::Display for Outcome {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Outcome::Success => f.write_str("success"),
            Outcome::Passthrough(r) => write!(f, "passthrough:{}", r.as_str()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct TransformEvent {
    pub timestamp: DateTime<Utc>,
    pub request_url: String,
    pub profile_id: String,
    pub chain_ids: Vec<String>,
    pub initial_mime: MediaType,
    pub final_mime: MediaType,
    pub input_bytes: u64,
    pub output_bytes: u64,
    pub duration_ms: u64,
    pub cache_hit: bool,
    pub outcome: Outcome,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub detail: Option<String>,
    /// The server-declared type when sniffing picked a different one.
    #[serde(skip_serializing_if = "Option::is_none")]
    pub declared_mime: Option<MediaType>,
}

impl TransformEvent {
    /// The record for a body that was delivered untouched.
    pub fn passthrough(
        request_url: &str,
        profile_id: &str,
        chain_ids: Vec<String>,
        mime: &MediaType,
        body_len: usize,
        reason: PassthroughReason,
    ) -> Self {
        TransformEvent {
            timestamp: Utc::now(),
            request_url: request_url.to_string(),
            profile_id: profile_id.to_string(),
            chain_ids,
            initial_mime: mime.clone(),
            final_mime: mime.clone(),
            input_bytes: body_len as u64,
            output_bytes: body_len as u64,
            duration_ms: 0,
            cache_hit: false,
            outcome: Outcome::Passthrough(reason),
            detail: None,
            declared_mime: None,
        }
    }

    pub fn to_log_line(&self) -> String {
        let dash = |s: &str| if s.is_empty() { "-".to_string() } else { s.to_string() };
        let mut line = format!(
            "ts={} url={} profile={} chain={} from={} to={} in={} out={} ms={} cache={} outcome={}",
            self.timestamp.to_rfc3339_opts(SecondsFormat::Millis, true),
            quote(&self.request_url),
            dash(&self.profile_id),
            dash(&self.chain_ids.join(",")),
            self.initial_mime,
            self.final_mime,
            self.input_bytes,
            self.output_bytes,
            self.duration_ms,
            if self.cache_hit { "hit" } else { "miss" },
            self.outcome,
        );
        if let Some(detail) = &self.detail {
            line.push_str(" detail=");
            line.push_str(&quote(detail));
        }
        if let Some(declared) = &self.declared_mime {
            line.push_str(" declared=");
            line.push_str(&quote(declared.as_str()));
        }
        line
    }
}

fn quote(s: &str) -> String {
    let mut out = String::with_capacity(s.len() + 2);
    out.push('"');
    for c in s.chars() {
        match c {
            '"' => out.push_str("\\\""),
            '\\' => out.push_str("\\\\"),
            '\n' => out.push_str("\\n"),
            '\r' => out.push_str("\\r"),
            _ => out.push(c),
        }
    }
    out.push('"');
    out
}

pub const DEFAULT_EVENT_RETENTION: usize = 10_000;

/// Recent events kept in memory for the admin feed, optionally mirrored to an
/// append-only file.
pub struct EventLog {
    recent: Mutex<VecDeque<TransformEvent>>,
    retention: usize,
    file: Option<Mutex<File>>,
}

impl EventLog {
    pub fn in_memory(retention: usize) -> Self {
        EventLog {
            recent: Mutex::new(VecDeque::new()),
            retention: retention.max(1),
            file: None,
        }
    }

    pub fn with_file(retention: usize, path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().create(true).append(true).open(path)?;
        Ok(EventLog {
            file: Some(Mutex::new(file)),
            ..Self::in_memory(retention)
        })
    }

    pub fn record(&self, event: TransformEvent) {
        if let Some(file) = &self.file {
            let mut line = event.to_log_line();
            line.push('\n');
            let mut file = file.lock().unwrap_or_else(|p| p.into_inner());
            if let Err(e) = file.write_all(line.as_bytes()) {
                tracing::warn!("event log write failed: {e}");
            }
        }
        let mut recent = self.recent.lock().unwrap_or_else(|p| p.into_inner());
        if recent.len() == self.retention {
            recent.pop_front();
        }
        recent.push_back(event);
    }

    /// Up to `limit` events newer than `since`, newest first.
    pub fn list(&self, limit: usize, since: Option<DateTime<Utc>>) -> Vec<TransformEvent> {
        let recent = self.recent.lock().unwrap_or_else(|p| p.into_inner());
        recent
            .iter()
            .rev()
            .filter(|e| since.is_none_or(|s| e.timestamp > s))
            .take(limit)
            .cloned()
            .collect()
    }

    pub fn len(&self) -> usize {
        self.recent.lock().unwrap_or_else(|p| p.into_inner()).len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

impl Default for EventLog {
    fn default() -> Self {
        Self::in_memory(DEFAULT_EVENT_RETENTION)
    }
}

impl fmt::Debug for EventLog {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("EventLog")
            .field("len", &self.len())
            .field("retention", &self.retention)
            .field("file", &self.file.is_some())
            .finish()
    }
}
