//! Talking to origin servers: the HTTP client, hop-by-hop header handling,
//! bounded body buffering and content-decoding.

use std::io::Read;

use bytes::Bytes;
use futures_util::{stream, StreamExt, TryStreamExt};
use http_body_util::{combinators::UnsyncBoxBody, BodyExt, Empty, Full, StreamBody};
use hyper::body::{Body, Frame, Incoming};
use hyper::header::{HeaderMap, HeaderName, CONNECTION, CONTENT_ENCODING};
use hyper::{Request, Response};
use hyper_util::client::legacy::connect::HttpConnector;
use hyper_util::client::legacy::Client;
use hyper_util::rt::TokioExecutor;
use thiserror::Error;

pub type BoxError = Box<dyn std::error::Error + Send + Sync>;
pub type ProxyBody = UnsyncBoxBody<Bytes, BoxError>;

pub fn full(bytes: impl Into<Bytes>) -> ProxyBody {
    Full::new(bytes.into()).map_err(|never| match never {}).boxed_unsync()
}

pub fn empty() -> ProxyBody {
    Empty::new().map_err(|never| match never {}).boxed_unsync()
}

pub fn boxed<B>(body: B) -> ProxyBody
where
    B: Body<Data = Bytes> + Send + 'static,
    B::Error: Into<BoxError>,
{
    body.map_err(Into::into).boxed_unsync()
}

/// Connection-scoped headers, plus the proxy-only ones clients send us.
const HOP_BY_HOP: [&str; 10] = [
    "connection",
    "keep-alive",
    "proxy-authenticate",
    "proxy-authorization",
    "proxy-connection",
    "te",
    "trailer",
    "transfer-encoding",
    "upgrade",
    "x-grace-profile",
];

/// Removes hop-by-hop headers, including any named in `Connection`.
pub fn strip_hop_by_hop(headers: &mut HeaderMap) {
    let listed: Vec<HeaderName> = headers
        .get_all(CONNECTION)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .filter_map(|name| HeaderName::from_bytes(name.trim().as_bytes()).ok())
        .collect();
    for name in listed {
        headers.remove(name);
    }
    for name in HOP_BY_HOP {
        headers.remove(name);
    }
}

#[derive(Debug, Error)]
pub enum UpstreamError {
    #[error("origin did not respond in time")]
    Timeout,
    #[error("origin unreachable: {0}")]
    Unreachable(String),
    #[error("reading origin body: {0}")]
    Body(String),
}

impl UpstreamError {
    /// Value for the `X-Grace-Error` header.
    pub fn code(&self) -> &'static str {
        match self {
            UpstreamError::Timeout => "upstream-timeout",
            UpstreamError::Unreachable(_) => "upstream-unreachable",
            UpstreamError::Body(_) => "upstream-body",
        }
    }
}

#[derive(Clone)]
pub struct Upstream {
    client: Client<HttpConnector, ProxyBody>,
}

impl Default for Upstream {
    fn default() -> Self {
        let mut connector = HttpConnector::new();
        connector.set_nodelay(true);
        Upstream {
            client: Client::builder(TokioExecutor::new()).build(connector),
        }
    }
}

impl Upstream {
    pub async fn send(&self, req: Request<ProxyBody>) -> Result<Response<Incoming>, UpstreamError> {
        self.client
            .request(req)
            .await
            .map_err(|e| UpstreamError::Unreachable(error_chain(&e)))
    }
}

fn error_chain(e: &dyn std::error::Error) -> String {
    let mut out = e.to_string();
    let mut cause = e.source();
    while let Some(c) = cause {
        out.push_str(": ");
        out.push_str(&c.to_string());
        cause = c.source();
    }
    out
}

pub enum Buffered {
    Complete(Bytes),
    /// More than the limit arrived; `prefix` is what was read so far.
    Oversize { prefix: Vec<Bytes>, rest: Incoming },
}

/// Reads `body` until it ends or exceeds `limit` bytes.
pub async fn buffer_body(mut body: Incoming, limit: usize) -> Result<Buffered, UpstreamError> {
    let mut chunks = Vec::new();
    let mut total = 0usize;
    while let Some(frame) = body.frame().await {
        let frame = frame.map_err(|e| UpstreamError::Body(error_chain(&e)))?;
        let Ok(data) = frame.into_data() else {
            continue;
        };
        total += data.len();
        chunks.push(data);
        if total > limit {
            return Ok(Buffered::Oversize { prefix: chunks, rest: body });
        }
    }
    Ok(Buffered::Complete(match chunks.len() {
        1 => chunks.pop().expect("one chunk"),
        _ => chunks.concat().into(),
    }))
}

/// The already-read chunks followed by whatever is left of the origin stream.
pub fn resume_stream(prefix: Vec<Bytes>, rest: Incoming) -> ProxyBody {
    let head = stream::iter(prefix.into_iter().map(Ok::<_, BoxError>));
    let tail = rest.into_data_stream().map_err(BoxError::from);
    StreamBody::new(head.chain(tail).map_ok(Frame::data)).boxed_unsync()
}

#[derive(Debug, Error, PartialEq, Eq)]
pub enum DecodeError {
    #[error("unsupported content-encoding {0:?}")]
    Unsupported(String),
    #[error("decoded body exceeds {0} bytes")]
    TooLarge(usize),
    #[error("corrupt {encoding} body: {reason}")]
    Corrupt { encoding: String, reason: String },
}

/// Undoes every `Content-Encoding` listed in `headers`, innermost last.
/// Only gzip and deflate are understood.
pub fn decode_content(headers: &HeaderMap, body: Bytes, limit: usize) -> Result<Bytes, DecodeError> {
    let codings: Vec<String> = headers
        .get_all(CONTENT_ENCODING)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .map(|c| c.trim().to_ascii_lowercase())
        .filter(|c| !c.is_empty() && c != "identity")
        .collect();
    let mut data = body;
    for coding in codings.iter().rev() {
        data = match coding.as_str() {
            "gzip" | "x-gzip" => inflate(flate2::read::MultiGzDecoder::new(&data[..]), coding, limit)?,
            // Servers disagree about whether "deflate" carries the zlib wrapper.
            "deflate" => inflate(flate2::read::ZlibDecoder::new(&data[..]), coding, limit)
                .or_else(|_| inflate(flate2::read::DeflateDecoder::new(&data[..]), coding, limit))?,
            other => return Err(DecodeError::Unsupported(other.to_string())),
        };
    }
    Ok(data)
}

fn inflate(reader: impl Read, coding: &str, limit: usize) -> Result<Bytes, DecodeError> {
    let mut out = Vec::new();
    reader
        .take(limit as u64 + 1)
        .read_to_end(&mut out)
        .map_err(|e| DecodeError::Corrupt {
            encoding: coding.to_string(),
            reason: e.to_string(),
        })?;
    if out.len() > limit {
        return Err(DecodeError::TooLarge(limit));
    }
    Ok(out.into())
}
