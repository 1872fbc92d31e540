//! JSON management API: catalog listing, profile editing, the event feed and
//! reloads. Listens on its own address and has no authentication.
//!
//! Profile writes are optimistic: `GET /api/profiles/{id}` returns a
//! `version` (also sent as `ETag`), and `PUT`/`PATCH` on an existing profile
//! must echo it back in the body or an `If-Match` header. A stale or missing
//! token gets 409.

use std::collections::HashSet;
use std::sync::Arc;

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, Query, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use chrono::{DateTime, Utc};
use grace_core::pipeline::TransformEvent;
use grace_core::rules::{Profile, RulesError, TransformDef};
use serde::{Deserialize, Serialize};

use crate::state::{profile_version, AppState, LoadError};

pub const MAX_EVENT_PAGE: usize = 1000;
pub const DEFAULT_EVENT_PAGE: usize = 100;

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/api/transformations", get(list_transformations))
        .route("/api/profiles", get(list_profiles))
        .route(
            "/api/profiles/:id",
            get(get_profile).put(put_profile).patch(patch_profile).delete(delete_profile),
        )
        .route("/api/events", get(list_events))
        .route("/api/reload", post(reload))
        .with_state(state)
}

#[derive(Debug, Serialize)]
pub struct ApiError {
    error: &'static str,
    detail: String,
    #[serde(skip)]
    status: StatusCode,
}

impl ApiError {
    fn new(status: StatusCode, error: &'static str, detail: impl Into<String>) -> Self {
        ApiError {
            error,
            detail: detail.into(),
            status,
        }
    }

    fn not_found(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "not-found", format!("no profile {id:?}"))
    }

    fn conflict(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::CONFLICT, "version-conflict", detail)
    }

    fn invalid(detail: impl Into<String>) -> Self {
        Self::new(StatusCode::UNPROCESSABLE_ENTITY, "invalid-request", detail)
    }
}

impl From<RulesError> for ApiError {
    fn from(e: RulesError) -> Self {
        let code = match &e {
            RulesError::UnknownRule { .. } => "unknown-rule",
            RulesError::AmbiguousProfile { .. } => "ambiguous-source",
            _ => "invalid-profile",
        };
        ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, code, e.to_string())
    }
}

impl From<LoadError> for ApiError {
    fn from(e: LoadError) -> Self {
        match e {
            LoadError::Write { .. } => ApiError::new(StatusCode::INTERNAL_SERVER_ERROR, "persist-failed", e.to_string()),
            other => ApiError::new(StatusCode::UNPROCESSABLE_ENTITY, "reload-failed", other.to_string()),
        }
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        (self.status, Json(&self)).into_response()
    }
}

type ApiResult<T> = Result<T, ApiError>;

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct TransformSummary {
    pub id: String,
    pub description: String,
    pub source_mime: String,
    pub target_mime: String,
    pub translator: String,
}

impl From<&TransformDef> for TransformSummary {
    fn from(d: &TransformDef) -> Self {
        TransformSummary {
            id: d.id.clone(),
            description: d.description.clone(),
            source_mime: d.source_mime.to_string(),
            target_mime: d.target_mime.to_string(),
            translator: d.translator.clone(),
        }
    }
}

#[derive(Debug, Serialize, Deserialize, PartialEq, Eq)]
pub struct ProfileDoc {
    pub id: String,
    /// Catalog ids in profile order.
    pub rules: Vec<String>,
    pub version: String,
    pub is_default: bool,
}

impl ProfileDoc {
    fn new(p: &Profile, default_id: Option<&str>) -> Self {
        ProfileDoc {
            id: p.id.clone(),
            rules: p.rule_ids().map(String::from).collect(),
            version: profile_version(p),
            is_default: default_id == Some(p.id.as_str()),
        }
    }
}

fn with_etag(doc: ProfileDoc) -> Response {
    let etag = format!("\"{}\"", doc.version);
    ([(header::ETAG, etag)], Json(doc)).into_response()
}

async fn list_transformations(State(state): State<Arc<AppState>>) -> Json<Vec<TransformSummary>> {
    Json(state.snapshot().catalog.iter().map(TransformSummary::from).collect())
}

async fn list_profiles(State(state): State<Arc<AppState>>) -> Json<Vec<ProfileDoc>> {
    let snap = state.snapshot();
    let default_id = snap.profiles.default_profile_id();
    Json(snap.profiles.iter().map(|p| ProfileDoc::new(p, default_id)).collect())
}

async fn get_profile(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> ApiResult<Response> {
    let snap = state.snapshot();
    let profile = snap.profiles.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    Ok(with_etag(ProfileDoc::new(profile, snap.profiles.default_profile_id())))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PutProfile {
    pub rules: Vec<String>,
    #[serde(default)]
    pub version: Option<String>,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ProfilePatch {
    #[serde(default)]
    pub add: Vec<String>,
    #[serde(default)]
    pub remove: Vec<String>,
    #[serde(default)]
    pub version: Option<String>,
}

fn if_match(headers: &HeaderMap) -> Option<String> {
    let raw = headers.get(header::IF_MATCH)?.to_str().ok()?.trim();
    Some(raw.trim_start_matches("W/").trim_matches('"').to_string())
}

fn check_version(current: &Profile, body: Option<String>, headers: &HeaderMap) -> ApiResult<()> {
    let expected = profile_version(current);
    match body.or_else(|| if_match(headers)) {
        Some(given) if given == expected || given == "*" => Ok(()),
        Some(given) => Err(ApiError::conflict(format!(
            "profile {:?} is at version {expected}, request was based on {given}",
            current.id
        ))),
        None => Err(ApiError::conflict(format!(
            "profile {:?} exists; send its current version to overwrite it",
            current.id
        ))),
    }
}

async fn put_profile(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Result<Json<PutProfile>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(body) = body.map_err(|e| ApiError::invalid(e.body_text()))?;
    let _guard = state.write_guard().await;
    let snap = state.snapshot();
    let existing = snap.profiles.get(&id);
    if let Some(current) = existing {
        check_version(current, body.version, &headers)?;
    }
    let profile = Profile::from_rule_ids(id.clone(), body.rules);
    let mut profiles = snap.profiles.clone();
    profiles.upsert(profile, &snap.catalog)?;
    state.commit_profiles(profiles.clone())?;

    let status = if existing.is_some() { StatusCode::OK } else { StatusCode::CREATED };
    let doc = ProfileDoc::new(profiles.get(&id).expect("just stored"), profiles.default_profile_id());
    Ok((status, with_etag(doc)).into_response())
}

async fn patch_profile(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    patch: Result<Json<ProfilePatch>, JsonRejection>,
) -> ApiResult<Response> {
    let Json(patch) = patch.map_err(|e| ApiError::invalid(e.body_text()))?;
    let _guard = state.write_guard().await;
    let snap = state.snapshot();
    let current = snap.profiles.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    check_version(current, patch.version, &headers)?;

    let add: HashSet<&str> = patch.add.iter().map(String::as_str).collect();
    if let Some(both) = patch.remove.iter().find(|r| add.contains(r.as_str())) {
        return Err(ApiError::invalid(format!("{both:?} is both added and removed")));
    }
    for rule in patch.add.iter().chain(&patch.remove) {
        if snap.catalog.get(rule).is_none() {
            return Err(RulesError::UnknownRule {
                profile: id.clone(),
                rule: rule.clone(),
            }
            .into());
        }
    }

    let mut next = current.clone();
    next.rules.retain(|r| !patch.remove.contains(&r.rule));
    for rule in &patch.add {
        if !next.rule_ids().any(|r| r == rule) {
            next.push_rule(rule.clone());
        }
    }
    let mut profiles = snap.profiles.clone();
    profiles.upsert(next, &snap.catalog)?;
    state.commit_profiles(profiles.clone())?;
    let doc = ProfileDoc::new(profiles.get(&id).expect("just stored"), profiles.default_profile_id());
    Ok(with_etag(doc))
}

async fn delete_profile(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
) -> ApiResult<StatusCode> {
    let _guard = state.write_guard().await;
    let snap = state.snapshot();
    let current = snap.profiles.get(&id).ok_or_else(|| ApiError::not_found(&id))?;
    if let Some(given) = if_match(&headers) {
        check_version(current, Some(given), &headers)?;
    }
    let mut profiles = snap.profiles.clone();
    profiles.remove(&id);
    state.commit_profiles(profiles)?;
    Ok(StatusCode::NO_CONTENT)
}

#[derive(Debug, Deserialize)]
pub struct EventQuery {
    pub limit: Option<String>,
    pub since: Option<String>,
}

async fn list_events(
    State(state): State<Arc<AppState>>,
    Query(q): Query<EventQuery>,
) -> ApiResult<Json<Vec<TransformEvent>>> {
    let limit = match q.limit.as_deref() {
        None => DEFAULT_EVENT_PAGE,
        Some(raw) => raw
            .parse::<usize>()
            .ok()
            .filter(|n| (1..=MAX_EVENT_PAGE).contains(n))
            .ok_or_else(|| ApiError::invalid(format!("limit must be an integer in 1..={MAX_EVENT_PAGE}, got {raw:?}")))?,
    };
    let since = match q.since.as_deref() {
        None => None,
        Some(raw) => Some(
            DateTime::parse_from_rfc3339(raw)
                .map_err(|e| ApiError::invalid(format!("since must be an RFC 3339 timestamp: {e}")))?
                .with_timezone(&Utc),
        ),
    };
    Ok(Json(state.events.list(limit, since)))
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReloadSummary {
    pub transformations: usize,
    pub profiles: usize,
}

async fn reload(State(state): State<Arc<AppState>>) -> ApiResult<Json<ReloadSummary>> {
    let snap = state.reload().await?;
    Ok(Json(ReloadSummary {
        transformations: snap.catalog.len(),
        profiles: snap.profiles.len(),
    }))
}
