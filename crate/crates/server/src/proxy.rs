//! The forward proxy request handler.

use std::sync::Arc;
use std::time::Instant;

use base64::Engine;
use bytes::Bytes;
use grace_core::cache::{CacheEntry, CacheKey};
use grace_core::media::MediaType;
use grace_core::pipeline::{execute_chain, sniff_format, Outcome, PassthroughReason, RequestMeta, TransformEvent};
use grace_core::rules::{plan_chain, PlanError, Profile, ProfileSet, TransformChain};
use hyper::body::Incoming;
use hyper::header::{
    HeaderMap, HeaderValue, ACCEPT_RANGES, CACHE_CONTROL, CONTENT_ENCODING, CONTENT_LENGTH, CONTENT_TYPE, ETAG,
    PROXY_AUTHORIZATION, VIA,
};
use hyper::http::response::Parts;
use hyper::{Method, Request, Response, StatusCode, Uri, Version};
use tokio::time::timeout_at;

use crate::state::AppState;
use crate::upstream::{self, buffer_body, decode_content, resume_stream, strip_hop_by_hop, Buffered, ProxyBody, UpstreamError};

pub const PROFILE_HEADER: &str = "x-grace-profile";
pub const ERROR_HEADER: &str = "x-grace-error";
pub const TRANSFORMED_HEADER: &str = "x-grace-transformed";
pub const VIA_TOKEN: &str = "grace";

/// Picks the profile for a request: the `Proxy-Authorization: Basic` user,
/// then `X-Grace-Profile`, then the configured default, each only if such a
/// profile exists, and finally the empty profile.
pub fn resolve_profile(headers: &HeaderMap, profiles: &ProfileSet) -> Profile {
    let candidates = [basic_auth_user(headers), header_str(headers, PROFILE_HEADER)];
    for name in candidates.into_iter().flatten() {
        match profiles.get(&name) {
            Some(p) => return p.clone(),
            None => tracing::debug!(profile = %name, "unknown profile requested"),
        }
    }
    profiles
        .default_profile_id()
        .and_then(|id| profiles.get(id))
        .cloned()
        .unwrap_or_else(Profile::empty)
}

fn header_str(headers: &HeaderMap, name: &str) -> Option<String> {
    let v = headers.get(name)?.to_str().ok()?.trim();
    (!v.is_empty()).then(|| v.to_string())
}

fn basic_auth_user(headers: &HeaderMap) -> Option<String> {
    let value = headers.get(PROXY_AUTHORIZATION)?.to_str().ok()?.trim();
    let (scheme, creds) = value.split_once(' ')?;
    if !scheme.eq_ignore_ascii_case("basic") {
        return None;
    }
    let decoded = base64::engine::general_purpose::STANDARD.decode(creds.trim()).ok()?;
    let text = String::from_utf8(decoded).ok()?;
    let user = text.split_once(':').map_or(text.as_str(), |(u, _)| u);
    (!user.is_empty()).then(|| user.to_string())
}

fn error_response(status: StatusCode, code: &str, detail: impl std::fmt::Display) -> Response<ProxyBody> {
    let mut resp = Response::new(upstream::full(format!("{code}: {detail}\n")));
    *resp.status_mut() = status;
    let h = resp.headers_mut();
    h.insert(CONTENT_TYPE, HeaderValue::from_static("text/plain; charset=utf-8"));
    if let Ok(v) = HeaderValue::from_str(code) {
        h.insert(ERROR_HEADER, v);
    }
    resp
}

/// Statuses whose bodies are whole representations worth transforming.
fn transformable(status: StatusCode) -> bool {
    status.is_success()
        && !matches!(
            status,
            StatusCode::NO_CONTENT | StatusCode::RESET_CONTENT | StatusCode::PARTIAL_CONTENT
        )
}

fn no_store(headers: &HeaderMap) -> bool {
    headers
        .get_all(CACHE_CONTROL)
        .iter()
        .filter_map(|v| v.to_str().ok())
        .flat_map(|v| v.split(','))
        .any(|d| d.trim().eq_ignore_ascii_case("no-store"))
}

fn declared_type(headers: &HeaderMap) -> MediaType {
    headers
        .get(CONTENT_TYPE)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| MediaType::parse(v).ok())
        .unwrap_or_else(MediaType::octet_stream)
}

/// Absolute `http://host...` target, or the status and error code to refuse it with.
fn check_target(uri: &Uri) -> Result<(), (StatusCode, &'static str, &'static str)> {
    match uri.scheme_str() {
        Some("http") if uri.authority().is_some_and(|a| !a.host().is_empty()) => Ok(()),
        Some("https") => Err((StatusCode::NOT_IMPLEMENTED, "https-unsupported", "only plain http is proxied")),
        _ => Err((
            StatusCode::BAD_REQUEST,
            "bad-request",
            "request target must be an absolute http URL",
        )),
    }
}

pub async fn handle(state: Arc<AppState>, req: Request<Incoming>) -> Response<ProxyBody> {
    let started = Instant::now();
    if req.method() == Method::CONNECT {
        return error_response(StatusCode::NOT_IMPLEMENTED, "connect-unsupported", "tunneling is not supported");
    }
    if let Err((status, code, detail)) = check_target(req.uri()) {
        return error_response(status, code, detail);
    }
    let snapshot = state.snapshot();
    let profile = resolve_profile(req.headers(), &snapshot.profiles);
    let url = req.uri().to_string();
    let method = req.method().clone();

    let (mut parts, body) = req.into_parts();
    strip_hop_by_hop(&mut parts.headers);
    parts.version = Version::HTTP_11;
    let outbound = Request::from_parts(parts, upstream::boxed(body));

    let deadline = tokio::time::Instant::from_std(started) + state.config.upstream_timeout;
    let origin = match timeout_at(deadline, state.upstream.send(outbound)).await {
        Ok(Ok(resp)) => resp,
        Ok(Err(e)) => return upstream_failure(&url, e),
        Err(_) => return upstream_failure(&url, UpstreamError::Timeout),
    };

    let (mut head, body) = origin.into_parts();
    strip_hop_by_hop(&mut head.headers);
    if method != Method::GET || !transformable(head.status) {
        return Response::from_parts(head, upstream::boxed(body));
    }

    let declared = declared_type(&head.headers);
    let max_depth = state.config.max_chain_depth;
    let early_plan = plan_chain(&profile, &declared, &snapshot.catalog, max_depth);
    if !state.config.sniff && matches!(&early_plan, Ok(chain) if chain.is_empty()) {
        return Response::from_parts(head, upstream::boxed(body));
    }

    let limit = state.config.max_transform_bytes;
    let raw = match timeout_at(deadline, buffer_body(body, limit)).await {
        Ok(Ok(Buffered::Complete(bytes))) => bytes,
        Ok(Ok(Buffered::Oversize { prefix, rest })) => {
            tracing::info!(%url, limit, "body over transform limit, passing through");
            return Response::from_parts(head, resume_stream(prefix, rest));
        }
        Ok(Err(e)) => return upstream_failure(&url, e),
        Err(_) => return upstream_failure(&url, UpstreamError::Timeout),
    };

    let meta = RequestMeta {
        url: url.clone(),
        profile_id: profile.id.clone(),
    };
    let decoded = match decode_content(&head.headers, raw.clone(), limit) {
        Ok(d) => d,
        Err(e) => {
            tracing::info!(%url, "not transforming: {e}");
            let planned = early_plan.map(|c| c.ids()).unwrap_or_default();
            if matches!(e, upstream::DecodeError::Unsupported(_)) && !planned.is_empty() {
                let reason = PassthroughReason::UnsupportedEncoding;
                let mut event = TransformEvent::passthrough(&url, &profile.id, planned, &declared, raw.len(), reason);
                event.detail = Some(e.to_string());
                state.events.record(event);
            }
            return buffered_passthrough(head, raw, None);
        }
    };

    let mime = if state.config.sniff {
        sniff_format(&decoded, &declared)
    } else {
        declared.clone()
    };
    let plan = if mime == declared {
        early_plan
    } else {
        plan_chain(&profile, &mime, &snapshot.catalog, max_depth)
    };
    let declared_note = (mime != declared).then(|| declared.clone());

    let chain = match plan {
        Ok(chain) if chain.is_empty() => return buffered_passthrough(head, raw, None),
        Ok(chain) => chain,
        Err(e) => {
            let (reason, code) = match &e {
                PlanError::Cycle { mime, .. } => (PassthroughReason::Cycle, format!("cycle; mime={mime}")),
                PlanError::DepthExceeded { max_depth, .. } => {
                    (PassthroughReason::DepthExceeded, format!("depth-exceeded; max={max_depth}"))
                }
            };
            tracing::warn!(%url, profile = %profile.id, "planner refused: {e}");
            let mut event =
                TransformEvent::passthrough(&url, &profile.id, e.partial_path().to_vec(), &mime, raw.len(), reason);
            event.detail = Some(e.to_string());
            event.declared_mime = declared_note;
            event.duration_ms = started.elapsed().as_millis() as u64;
            state.events.record(event);
            return buffered_passthrough(head, raw, Some(&code));
        }
    };

    let opts = &state.config.convert;
    let cacheable = state.cache.is_some() && !no_store(&head.headers);
    let key = cacheable.then(|| CacheKey::new(&url, &decoded, &chain.ids(), opts));

    if let Some(key) = &key {
        if let Some(hit) = cache_get(&state, key).await {
            let event = TransformEvent {
                timestamp: chrono::Utc::now(),
                request_url: url.clone(),
                profile_id: profile.id.clone(),
                chain_ids: chain.ids(),
                initial_mime: mime.clone(),
                final_mime: hit.final_mime.clone(),
                input_bytes: decoded.len() as u64,
                output_bytes: hit.body.len() as u64,
                duration_ms: started.elapsed().as_millis() as u64,
                cache_hit: true,
                outcome: Outcome::Success,
                detail: None,
                declared_mime: declared_note,
            };
            state.events.record(event);
            return transformed_response(head, hit.body, &hit.final_mime, &chain);
        }
    }

    match execute_chain(&state.registry, decoded, &chain, opts, &meta).await {
        Ok(out) => {
            if let Some(key) = key {
                cache_put(&state, CacheEntry::new(key, out.body.clone(), out.mime.clone())).await;
            }
            let mut event = out.event;
            event.duration_ms = started.elapsed().as_millis() as u64;
            event.declared_mime = declared_note;
            state.events.record(event);
            transformed_response(head, out.body, &out.mime, &chain)
        }
        Err(failure) => {
            tracing::warn!(%url, profile = %profile.id, "{}", failure.error);
            let mut event = failure.event;
            event.declared_mime = declared_note;
            // Report what the client receives: the raw origin bytes.
            event.output_bytes = raw.len() as u64;
            state.events.record(event);
            let code = format!("step-failed; step={}", failure.error.step_id);
            buffered_passthrough(head, raw, Some(&code))
        }
    }
}

fn upstream_failure(url: &str, e: UpstreamError) -> Response<ProxyBody> {
    tracing::warn!(%url, "{e}");
    error_response(StatusCode::BAD_GATEWAY, e.code(), e)
}

async fn cache_get(state: &Arc<AppState>, key: &CacheKey) -> Option<CacheEntry> {
    let state = state.clone();
    let key = key.clone();
    tokio::task::spawn_blocking(move || state.cache.as_ref()?.get(&key))
        .await
        .ok()
        .flatten()
}

async fn cache_put(state: &Arc<AppState>, entry: CacheEntry) {
    let state = state.clone();
    let _ = tokio::task::spawn_blocking(move || {
        if let Some(cache) = &state.cache {
            cache.put(&entry);
        }
    })
    .await;
}

fn set_content_length(headers: &mut HeaderMap, len: usize) {
    headers.insert(CONTENT_LENGTH, HeaderValue::from(len));
}

/// The origin response with its original (still encoded) body.
fn buffered_passthrough(mut head: Parts, raw: Bytes, error: Option<&str>) -> Response<ProxyBody> {
    set_content_length(&mut head.headers, raw.len());
    if let Some(v) = error.and_then(|e| HeaderValue::from_str(e).ok()) {
        head.headers.insert(ERROR_HEADER, v);
    }
    Response::from_parts(head, upstream::full(raw))
}

fn transformed_response(mut head: Parts, body: Bytes, mime: &MediaType, chain: &TransformChain) -> Response<ProxyBody> {
    let h = &mut head.headers;
    for stale in [CONTENT_ENCODING, ETAG, ACCEPT_RANGES] {
        h.remove(stale);
    }
    h.remove("content-md5");
    h.insert(CONTENT_TYPE, HeaderValue::from_str(mime.as_str()).expect("media types are header-safe"));
    set_content_length(h, body.len());
    let note = format!("{}; from={}", chain.ids().join(","), chain.initial_mime());
    if let Ok(v) = HeaderValue::from_str(&note) {
        h.insert(TRANSFORMED_HEADER, v);
    }
    let via = match h.get(VIA).and_then(|v| v.to_str().ok()) {
        Some(existing) => format!("{existing}, 1.1 {VIA_TOKEN}"),
        None => format!("1.1 {VIA_TOKEN}"),
    };
    h.insert(VIA, HeaderValue::from_str(&via).unwrap_or(HeaderValue::from_static(VIA_TOKEN)));
    Response::from_parts(head, upstream::full(body))
}
