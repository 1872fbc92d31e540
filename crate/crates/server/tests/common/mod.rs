//! Shared fixtures for the integration tests: a scriptable origin server, a
//! client that talks to the proxy in absolute form, and a proxy harness over
//! temp-dir rule files.
#![allow(dead_code)]

use std::collections::HashMap;
use std::convert::Infallible;
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::Duration;

use bytes::Bytes;
use grace_core::pipeline::{CodecTranslator, TranslatorRegistry};
use grace_core::external::{ExternalServiceConfig, ExternalTranslator};
use grace_server::{AppState, ProxyConfig, Running};
use http_body_util::{BodyExt, Full};
use hyper::body::Incoming;
use hyper::header::{HeaderName, HeaderValue};
use hyper::server::conn::http1;
use hyper::service::service_fn;
use hyper::{HeaderMap, Request, Response, StatusCode};
use hyper_util::rt::TokioIo;
use tokio::net::{TcpListener, TcpStream};
use tokio::task::JoinHandle;

pub const CATALOG_XML: &str = include_str!("../../../../config/transforms.xml");
pub const PROFILES_XML: &str = include_str!("../../../../config/profiles.xml");

#[derive(Clone)]
pub struct Resource {
    pub status: StatusCode,
    pub headers: Vec<(String, String)>,
    pub body: Bytes,
    pub delay: Duration,
}

impl Resource {
    pub fn new(content_type: &str, body: impl Into<Bytes>) -> Self {
        Resource {
            status: StatusCode::OK,
            headers: vec![("content-type".into(), content_type.into())],
            body: body.into(),
            delay: Duration::ZERO,
        }
    }

    pub fn header(mut self, name: &str, value: &str) -> Self {
        self.headers.push((name.into(), value.into()));
        self
    }

    pub fn status(mut self, status: StatusCode) -> Self {
        self.status = status;
        self
    }

    pub fn delay(mut self, delay: Duration) -> Self {
        self.delay = delay;
        self
    }
}

/// What an origin saw of one request.
#[derive(Debug, Clone)]
pub struct Seen {
    pub method: String,
    pub path: String,
    pub headers: HeaderMap,
}

/// An HTTP origin serving fixed resources by path; 404 for anything else.
pub struct Origin {
    pub addr: SocketAddr,
    resources: Arc<Mutex<HashMap<String, Resource>>>,
    seen: Arc<Mutex<Vec<Seen>>>,
    hits: Arc<AtomicU64>,
    task: JoinHandle<()>,
}

impl Origin {
    pub async fn start() -> Origin {
        let listener = TcpListener::bind("127.0.0.1:0").await.unwrap();
        let addr = listener.local_addr().unwrap();
        let resources: Arc<Mutex<HashMap<String, Resource>>> = Arc::default();
        let seen: Arc<Mutex<Vec<Seen>>> = Arc::default();
        let hits = Arc::new(AtomicU64::new(0));
        let task = tokio::spawn({
            let (resources, seen, hits) = (resources.clone(), seen.clone(), hits.clone());
            async move {
                loop {
                    let Ok((stream, _)) = listener.accept().await else { continue };
                    let (resources, seen, hits) = (resources.clone(), seen.clone(), hits.clone());
                    tokio::spawn(async move {
                        let svc = service_fn(move |req: Request<Incoming>| {
                            let (resources, seen, hits) = (resources.clone(), seen.clone(), hits.clone());
                            async move {
                                hits.fetch_add(1, Ordering::SeqCst);
                                let path = req.uri().path().to_string();
                                seen.lock().unwrap().push(Seen {
                                    method: req.method().to_string(),
                                    path: path.clone(),
                                    headers: req.headers().clone(),
                                });
                                let found = resources.lock().unwrap().get(&path).cloned();
                                let Some(res) = found else {
                                    let mut r = Response::new(Full::new(Bytes::from_static(b"missing")));
                                    *r.status_mut() = StatusCode::NOT_FOUND;
                                    return Ok::<_, Infallible>(r);
                                };
                                tokio::time::sleep(res.delay).await;
                                let mut r = Response::new(Full::new(res.body.clone()));
                                *r.status_mut() = res.status;
                                for (k, v) in &res.headers {
                                    r.headers_mut().append(
                                        HeaderName::from_bytes(k.as_bytes()).unwrap(),
                                        HeaderValue::from_str(v).unwrap(),
                                    );
                                }
                                Ok(r)
                            }
                        });
                        let _ = http1::Builder::new().serve_connection(TokioIo::new(stream), svc).await;
                    });
                }
            }
        });
        Origin {
            addr,
            resources,
            seen,
            hits,
            task,
        }
    }

    pub fn serve(&self, path: &str, res: Resource) {
        self.resources.lock().unwrap().insert(path.to_string(), res);
    }

    pub fn url(&self, path: &str) -> String {
        format!("http://{}{}", self.addr, path)
    }

    pub fn hits(&self) -> u64 {
        self.hits.load(Ordering::SeqCst)
    }

    pub fn seen(&self) -> Vec<Seen> {
        self.seen.lock().unwrap().clone()
    }
}

impl Drop for Origin {
    fn drop(&mut self) {
        self.task.abort();
    }
}

pub struct Fetched {
    pub status: StatusCode,
    pub headers: HeaderMap,
    pub body: Bytes,
}

impl Fetched {
    pub fn header(&self, name: &str) -> Option<&str> {
        self.headers.get(name).and_then(|v| v.to_str().ok())
    }

    pub fn content_type(&self) -> &str {
        self.header("content-type").unwrap_or("")
    }
}

/// Sends one request over a fresh connection to `proxy`, with the target in
/// absolute form as a browser configured for a proxy would.
pub async fn send_via(proxy: SocketAddr, req: Request<Full<Bytes>>) -> Fetched {
    let stream = TcpStream::connect(proxy).await.unwrap();
    let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream)).await.unwrap();
    tokio::spawn(conn);
    let resp = sender.send_request(req).await.unwrap();
    let (parts, body) = resp.into_parts();
    Fetched {
        status: parts.status,
        headers: parts.headers,
        body: body.collect().await.unwrap().to_bytes(),
    }
}

pub async fn get_via(proxy: SocketAddr, url: &str, profile: Option<&str>) -> Fetched {
    let mut b = Request::get(url).header("host", host_of(url));
    if let Some(p) = profile {
        b = b.header("x-grace-profile", p);
    }
    send_via(proxy, b.body(Full::new(Bytes::new())).unwrap()).await
}

/// A plain request straight to the origin.
pub async fn get_direct(url: &str) -> Fetched {
    let uri: hyper::Uri = url.parse().unwrap();
    let addr = format!("{}:{}", uri.host().unwrap(), uri.port_u16().unwrap_or(80));
    let stream = TcpStream::connect(addr).await.unwrap();
    let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream)).await.unwrap();
    tokio::spawn(conn);
    let req = Request::get(uri.path_and_query().unwrap().as_str())
        .header("host", host_of(url))
        .body(Full::new(Bytes::new()))
        .unwrap();
    let resp = sender.send_request(req).await.unwrap();
    let (parts, body) = resp.into_parts();
    Fetched {
        status: parts.status,
        headers: parts.headers,
        body: body.collect().await.unwrap().to_bytes(),
    }
}

fn host_of(url: &str) -> String {
    let uri: hyper::Uri = url.parse().unwrap();
    uri.authority().unwrap().to_string()
}

/// Rule documents in a temp dir plus the config pointing at them. Every
/// listener binds an ephemeral port.
pub struct Setup {
    pub dir: tempfile::TempDir,
    pub config: ProxyConfig,
}

impl Setup {
    pub fn new(catalog_xml: &str, profiles_xml: &str) -> Setup {
        let dir = tempfile::tempdir().unwrap();
        let catalog = dir.path().join("transforms.xml");
        let profiles = dir.path().join("profiles.xml");
        std::fs::write(&catalog, catalog_xml).unwrap();
        std::fs::write(&profiles, profiles_xml).unwrap();
        let mut config = ProxyConfig::new(profiles, catalog);
        config.listen = "127.0.0.1:0".parse().unwrap();
        config.admin_listen = "127.0.0.1:0".parse().unwrap();
        config.cache.dir = Some(dir.path().join("cache"));
        config.upstream_timeout = Duration::from_secs(10);
        Setup { dir, config }
    }

    /// The shipped catalog and profiles.
    pub fn shipped() -> Setup {
        Setup::new(CATALOG_XML, PROFILES_XML)
    }

    pub fn path(&self, name: &str) -> PathBuf {
        self.dir.path().join(name)
    }

    pub fn profiles_path(&self) -> &Path {
        &self.config.profiles_path
    }

    /// Starts the proxy with the stock translators; `external` is the base
    /// URL of a conversion service, if any.
    pub async fn start(&self, external: Option<&str>) -> Running {
        let codec = Arc::new(CodecTranslator::default());
        self.start_with(codec, external).await
    }

    pub async fn start_with(&self, codec: Arc<CodecTranslator>, external: Option<&str>) -> Running {
        let mut registry = TranslatorRegistry::new();
        registry.register(codec).unwrap();
        let ext = external.map(|url| ExternalServiceConfig::new(url).unwrap().with_timeout(Duration::from_secs(5)).unwrap());
        registry.register(Arc::new(ExternalTranslator::new(ext))).unwrap();
        let state = AppState::new(self.config.clone(), registry).unwrap();
        Running::start(state).await.unwrap()
    }
}

pub fn sha256_hex(data: &[u8]) -> String {
    use sha2::{Digest, Sha256};
    hex::encode(Sha256::digest(data))
}

/// Opaque RGBA PNG of the given size with a simple gradient.
pub fn gradient_png(width: u32, height: u32) -> Vec<u8> {
    let img = image::RgbaImage::from_fn(width, height, |x, y| {
        image::Rgba([(x * 255 / width.max(1)) as u8, (y * 255 / height.max(1)) as u8, 128, 255])
    });
    encode_with_image(image::DynamicImage::ImageRgba8(img), image::ImageFormat::Png)
}

pub fn gradient_jpeg(width: u32, height: u32) -> Vec<u8> {
    let img = image::RgbImage::from_fn(width, height, |x, y| {
        image::Rgb([(x * 255 / width.max(1)) as u8, (y * 255 / height.max(1)) as u8, 64])
    });
    encode_with_image(image::DynamicImage::ImageRgb8(img), image::ImageFormat::Jpeg)
}

pub fn gradient_gif(width: u32, height: u32) -> Vec<u8> {
    let img = image::RgbaImage::from_fn(width, height, |x, y| {
        image::Rgba([if (x + y) % 2 == 0 { 255 } else { 0 }, 0, 0, 255])
    });
    encode_with_image(image::DynamicImage::ImageRgba8(img), image::ImageFormat::Gif)
}

pub fn encode_with_image(img: image::DynamicImage, format: image::ImageFormat) -> Vec<u8> {
    let mut out = std::io::Cursor::new(Vec::new());
    img.write_to(&mut out, format).unwrap();
    out.into_inner()
}

pub fn decode_with_image(bytes: &[u8], format: image::ImageFormat) -> image::RgbaImage {
    image::load_from_memory_with_format(bytes, format).unwrap().to_rgba8()
}

/// `GET` on the admin API, parsed as JSON.
pub async fn admin_get(admin: SocketAddr, path: &str) -> (StatusCode, serde_json::Value) {
    admin_call(admin, "GET", path, None, &[]).await
}

pub async fn admin_call(
    admin: SocketAddr,
    method: &str,
    path: &str,
    body: Option<serde_json::Value>,
    headers: &[(&str, &str)],
) -> (StatusCode, serde_json::Value) {
    let stream = TcpStream::connect(admin).await.unwrap();
    let (mut sender, conn) = hyper::client::conn::http1::handshake(TokioIo::new(stream)).await.unwrap();
    tokio::spawn(conn);
    let mut b = Request::builder().method(method).uri(path).header("host", admin.to_string());
    for (k, v) in headers {
        b = b.header(*k, *v);
    }
    let payload = match body {
        Some(v) => {
            b = b.header("content-type", "application/json");
            Bytes::from(serde_json::to_vec(&v).unwrap())
        }
        None => Bytes::new(),
    };
    let resp = sender.send_request(b.body(Full::new(payload)).unwrap()).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let json = if bytes.is_empty() {
        serde_json::Value::Null
    } else {
        serde_json::from_slice(&bytes).unwrap_or_else(|_| serde_json::Value::String(String::from_utf8_lossy(&bytes).into()))
    };
    (status, json)
}
