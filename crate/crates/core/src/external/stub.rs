use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use bytes::Bytes;
use http_body_util::{BodyExt, Full, Limited};
use hyper::body::Incoming;
use hyper::header::{ACCEPT, CONTENT_TYPE};
use hyper::service::service_fn;
use hyper::{Method, Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use thiserror::Error;
use tokio::net::TcpListener;
use tokio::task::{JoinHandle, JoinSet};

use crate::media::MediaType;

#[derive(Debug, Error)]
pub enum StubError {
    #[error("stub conversion service needs at least one mapping")]
    EmptyMapping,
    #[error("cannot bind stub conversion service to {addr}: {source}")]
    Bind {
        addr: SocketAddr,
        #[source]
        source: std::io::Error,
    },
}

struct Settings {
    mapping: HashMap<(MediaType, MediaType), Bytes>,
    delay: Option<Duration>,
    content_type_override: Option<MediaType>,
    max_payload: usize,
    requests: AtomicU64,
}

/// Configures a [`StubServer`].
pub struct StubBuilder {
    mapping: HashMap<(MediaType, MediaType), Bytes>,
    delay: Option<Duration>,
    content_type_override: Option<MediaType>,
    max_payload: usize,
    addr: SocketAddr,
}

impl StubBuilder {
    /// Answer `src -> dst` requests with `response`, whatever the payload.
    pub fn map(mut self, src: MediaType, dst: MediaType, response: Bytes) -> Self {
        self.mapping.insert((src, dst), response);
        self
    }

    /// Sleep before answering each request.
    pub fn delay(mut self, delay: Duration) -> Self {
        self.delay = Some(delay);
        self
    }

    /// Label successful replies with this type instead of the requested one.
    pub fn respond_with_content_type(mut self, mime: MediaType) -> Self {
        self.content_type_override = Some(mime);
        self
    }

    /// Payloads larger than this get 413.
    pub fn max_payload(mut self, bytes: usize) -> Self {
        self.max_payload = bytes;
        self
    }

    /// Defaults to an ephemeral loopback port.
    pub fn bind(mut self, addr: SocketAddr) -> Self {
        self.addr = addr;
        self
    }

    pub async fn start(self) -> Result<StubServer, StubError> {
        if self.mapping.is_empty() {
            return Err(StubError::EmptyMapping);
        }
        let listener = TcpListener::bind(self.addr)
            .await
            .map_err(|source| StubError::Bind { addr: self.addr, source })?;
        let addr = listener
            .local_addr()
            .map_err(|source| StubError::Bind { addr: self.addr, source })?;
        let settings = Arc::new(Settings {
            mapping: self.mapping,
            delay: self.delay,
            content_type_override: self.content_type_override,
            max_payload: self.max_payload,
            requests: AtomicU64::new(0),
        });
        let task = tokio::spawn(accept_loop(listener, settings.clone()));
        Ok(StubServer { addr, settings, task })
    }
}

/// A canned conversion service speaking the `/convert` protocol.
/// Stops serving, including open connections, when dropped.
pub struct StubServer {
    addr: SocketAddr,
    settings: Arc<Settings>,
    task: JoinHandle<()>,
}

impl StubServer {
    pub fn builder() -> StubBuilder {
        StubBuilder {
            mapping: HashMap::new(),
            delay: None,
            content_type_override: None,
            max_payload: super::DEFAULT_MAX_PAYLOAD,
            addr: SocketAddr::from(([127, 0, 0, 1], 0)),
        }
    }

    pub async fn start(mapping: Vec<(MediaType, MediaType, Bytes)>) -> Result<StubServer, StubError> {
        mapping
            .into_iter()
            .fold(Self::builder(), |b, (src, dst, body)| b.map(src, dst, body))
            .start()
            .await
    }

    pub fn addr(&self) -> SocketAddr {
        self.addr
    }

    pub fn base_url(&self) -> String {
        format!("http://{}", self.addr)
    }

    /// Requests received on `/convert`, answered or not.
    pub fn request_count(&self) -> u64 {
        self.settings.requests.load(Ordering::SeqCst)
    }

    pub async fn shutdown(mut self) {
        self.task.abort();
        let _ = (&mut self.task).await;
    }
}

impl Drop for StubServer {
    fn drop(&mut self) {
        self.task.abort();
    }
}

async fn accept_loop(listener: TcpListener, settings: Arc<Settings>) {
    // Owning the connection tasks here means aborting this loop closes them too.
    let mut connections = JoinSet::new();
    loop {
        let stream = match listener.accept().await {
            Ok((stream, _)) => stream,
            Err(e) => {
                tracing::warn!("stub accept failed: {e}");
                continue;
            }
        };
        let settings = settings.clone();
        connections.spawn(async move {
            let service = service_fn(move |req| handle(settings.clone(), req));
            let _ = hyper::server::conn::http1::Builder::new()
                .serve_connection(TokioIo::new(stream), service)
                .await;
        });
        while connections.try_join_next().is_some() {}
    }
}

fn reply(status: StatusCode, content_type: &str, body: Bytes) -> Response<Full<Bytes>> {
    Response::builder()
        .status(status)
        .header(CONTENT_TYPE, content_type)
        .body(Full::new(body))
        .expect("static response parts")
}

fn refuse(status: StatusCode, why: &str) -> Response<Full<Bytes>> {
    reply(status, "text/plain", Bytes::from(why.to_string()))
}

async fn handle(settings: Arc<Settings>, req: Request<Incoming>) -> Result<Response<Full<Bytes>>, Infallible> {
    if !req.uri().path().ends_with("/convert") {
        return Ok(refuse(StatusCode::NOT_FOUND, "not found"));
    }
    settings.requests.fetch_add(1, Ordering::SeqCst);
    if req.method() != Method::POST {
        return Ok(refuse(StatusCode::METHOD_NOT_ALLOWED, "POST only"));
    }
    let header = |name| {
        req.headers()
            .get(name)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| MediaType::parse(v).ok())
    };
    let (Some(src), Some(dst)) = (header(CONTENT_TYPE), header(ACCEPT)) else {
        return Ok(refuse(StatusCode::UNSUPPORTED_MEDIA_TYPE, "missing Content-Type or Accept"));
    };
    let Some(canned) = settings.mapping.get(&(src, dst.clone())).cloned() else {
        return Ok(refuse(StatusCode::UNSUPPORTED_MEDIA_TYPE, "unsupported conversion"));
    };
    let payload = match Limited::new(req.into_body(), settings.max_payload).collect().await {
        Ok(collected) => collected.to_bytes(),
        Err(_) => return Ok(refuse(StatusCode::PAYLOAD_TOO_LARGE, "payload too large")),
    };
    if payload.is_empty() {
        return Ok(refuse(StatusCode::UNPROCESSABLE_ENTITY, "empty payload"));
    }
    if let Some(delay) = settings.delay {
        tokio::time::sleep(delay).await;
    }
    let label = settings.content_type_override.as_ref().unwrap_or(&dst);
    Ok(reply(StatusCode::OK, label.as_str(), canned))
}
