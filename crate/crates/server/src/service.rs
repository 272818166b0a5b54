//! HTTP routes for human-doctor sessions and reader ratings.

use std::collections::HashMap;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::body::Bytes;
use axum::extract::{Path, Query, Request, State};
use axum::http::{HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use clinsim::eval::ReaderRating;
use serde::de::DeserializeOwned;
use serde::Deserialize;
use serde_json::{json, Value};

use crate::reviews::{ReviewError, ReviewStore};
use crate::session::{CreateSession, HumanSession, SessionError, SessionStore};

pub const IDEMPOTENCY_HEADER: &str = "idempotency-key";

pub struct AppState {
    pub sessions: SessionStore,
    pub reviews: ReviewStore,
    /// Shared bearer token; `None` leaves the API open.
    pub token: Option<String>,
    idempotency: Mutex<HashMap<String, (StatusCode, Value)>>,
    /// Serializes session creation and rating submission.
    serial: Mutex<()>,
}

impl AppState {
    pub fn new(sessions: SessionStore, reviews: ReviewStore, token: Option<String>) -> Self {
        AppState { sessions, reviews, token, idempotency: Mutex::default(), serial: Mutex::default() }
    }

    fn replay(&self, key: &Option<String>) -> Option<(StatusCode, Value)> {
        key.as_ref().and_then(|k| self.idempotency.lock().unwrap().get(k).cloned())
    }

    fn remember(&self, key: Option<String>, resp: &(StatusCode, Value)) {
        if let Some(k) = key {
            self.idempotency.lock().unwrap().insert(k, resp.clone());
        }
    }
}

type Reply = (StatusCode, Value);

fn error(status: StatusCode, code: &str, message: impl std::fmt::Display) -> Reply {
    (status, json!({"error": {"code": code, "message": message.to_string()}}))
}

fn invalid(message: impl std::fmt::Display) -> Reply {
    error(StatusCode::UNPROCESSABLE_ENTITY, "invalid_payload", message)
}

impl From<SessionError> for Reply {
    fn from(e: SessionError) -> Self {
        match e {
            SessionError::UnknownCase(_) => error(StatusCode::NOT_FOUND, "unknown_case", e),
            SessionError::Invalid(_) => invalid(e),
            SessionError::Conflict(_) => error(StatusCode::CONFLICT, "conflict", e),
            SessionError::Backend(_) => error(StatusCode::BAD_GATEWAY, "backend_error", e),
            SessionError::Engine(_) | SessionError::Io(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
        }
    }
}

impl From<ReviewError> for Reply {
    fn from(e: ReviewError) -> Self {
        match e {
            ReviewError::UnknownTranscript(_) => error(StatusCode::NOT_FOUND, "unknown_transcript", e),
            ReviewError::Invalid(_) => invalid(e),
            ReviewError::Duplicate { .. } => error(StatusCode::CONFLICT, "duplicate_rating", e),
            ReviewError::Io(_) => error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e),
        }
    }
}

fn respond((status, body): Reply) -> Response {
    (status, Json(body)).into_response()
}

fn parse<T: DeserializeOwned>(body: &Bytes) -> Result<T, Reply> {
    serde_json::from_slice(body).map_err(invalid)
}

fn idempotency_key(headers: &HeaderMap, scope: &str) -> Option<String> {
    headers.get(IDEMPOTENCY_HEADER).and_then(|v| v.to_str().ok()).map(|k| format!("{scope}\u{0}{k}"))
}

/// Runs blocking engine work off the async executor.
async fn blocking(f: impl FnOnce() -> Reply + Send + 'static) -> Response {
    match tokio::task::spawn_blocking(f).await {
        Ok(r) => respond(r),
        Err(e) => respond(error(StatusCode::INTERNAL_SERVER_ERROR, "internal", e)),
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(session_status))
        .route("/sessions/{id}/message", post(session_message))
        .route("/sessions/{id}/diagnose", post(session_diagnose))
        .route("/reviews/next", get(next_review))
        .route("/reviews/{id}/ratings", post(submit_rating))
        .route_layer(middleware::from_fn_with_state(state.clone(), require_token))
        .route("/health", get(|| async { Json(json!({"status": "ok"})) }))
        .with_state(state)
}

async fn require_token(State(state): State<Arc<AppState>>, req: Request, next: Next) -> Response {
    if let Some(token) = &state.token {
        let given = req
            .headers()
            .get(axum::http::header::AUTHORIZATION)
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .unwrap_or("");
        if !constant_time_eq(given.as_bytes(), token.as_bytes()) {
            return respond(error(StatusCode::UNAUTHORIZED, "unauthorized", "missing or wrong bearer token"));
        }
    }
    next.run(req).await
}

fn constant_time_eq(a: &[u8], b: &[u8]) -> bool {
    a.len() == b.len() && a.iter().zip(b).fold(0u8, |acc, (x, y)| acc | (x ^ y)) == 0
}

async fn create_session(State(state): State<Arc<AppState>>, headers: HeaderMap, body: Bytes) -> Response {
    let key = idempotency_key(&headers, "POST /sessions");
    blocking(move || {
        let _guard = state.serial.lock().unwrap();
        if let Some(r) = state.replay(&key) {
            return r;
        }
        let r = match parse::<CreateSession>(&body) {
            Ok(req) => match state.sessions.create(&req) {
                Ok(slot) => (StatusCode::CREATED, json!(slot.lock().unwrap().created())),
                Err(e) => e.into(),
            },
            Err(r) => r,
        };
        state.remember(key, &r);
        r
    })
    .await
}

/// Locks a session, expiring it first if it sat idle too long.
fn with_session(state: &AppState, id: &str, f: impl FnOnce(&mut HumanSession) -> Reply) -> Reply {
    let Some(slot) = state.sessions.get(id) else {
        return error(StatusCode::NOT_FOUND, "unknown_session", format!("unknown session `{id}`"));
    };
    let mut session = slot.lock().unwrap();
    if session.is_idle(Instant::now()) {
        if let Err(e) = session.expire(&state.sessions) {
            return e.into();
        }
    }
    f(&mut session)
}

async fn session_status(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Response {
    blocking(move || with_session(&state, &id, |s| (StatusCode::OK, json!(s.status())))).await
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct TextBody {
    text: String,
}

enum Turn {
    Message,
    Diagnose,
}

async fn session_turn(state: Arc<AppState>, id: String, headers: HeaderMap, body: Bytes, turn: Turn) -> Response {
    let route = match turn {
        Turn::Message => "message",
        Turn::Diagnose => "diagnose",
    };
    let key = idempotency_key(&headers, &format!("POST /sessions/{id}/{route}"));
    blocking(move || {
        with_session(&state.clone(), &id, |session| {
            if let Some(r) = state.replay(&key) {
                return r;
            }
            let r = match parse::<TextBody>(&body) {
                Ok(b) => {
                    let out = match turn {
                        Turn::Message => session.message(&b.text, &state.sessions),
                        Turn::Diagnose => session.diagnose(&b.text, &state.sessions),
                    };
                    match out {
                        Ok(reply) => (StatusCode::OK, json!(reply)),
                        Err(e) => e.into(),
                    }
                }
                Err(r) => r,
            };
            state.remember(key, &r);
            r
        })
    })
    .await
}

async fn session_message(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    session_turn(state, id, headers, body, Turn::Message).await
}

async fn session_diagnose(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    session_turn(state, id, headers, body, Turn::Diagnose).await
}

#[derive(Deserialize)]
struct RaterQuery {
    rater: Option<String>,
}

async fn next_review(State(state): State<Arc<AppState>>, Query(q): Query<RaterQuery>) -> Response {
    let Some(rater) = q.rater.filter(|r| !r.trim().is_empty()) else {
        return respond(invalid("query parameter `rater` is required"));
    };
    blocking(move || match state.reviews.next_for(&rater) {
        Some(t) => (StatusCode::OK, json!(t)),
        None => error(StatusCode::NOT_FOUND, "queue_empty", format!("nothing left to rate for `{rater}`")),
    })
    .await
}

async fn submit_rating(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    headers: HeaderMap,
    body: Bytes,
) -> Response {
    let key = idempotency_key(&headers, &format!("POST /reviews/{id}/ratings"));
    blocking(move || {
        let _guard = state.serial.lock().unwrap();
        if let Some(r) = state.replay(&key) {
            return r;
        }
        let r = (|| {
            let mut value: Value = parse(&body)?;
            let Some(obj) = value.as_object_mut() else {
                return Err(invalid("expected a JSON object"));
            };
            match obj.get("transcript_id") {
                None => {
                    obj.insert("transcript_id".into(), Value::String(id.clone()));
                }
                Some(Value::String(t)) if *t == id => {}
                Some(_) => return Err(invalid("transcript_id does not match the path")),
            }
            let rating: ReaderRating = serde_json::from_value(value).map_err(invalid)?;
            state.reviews.submit(rating.clone()).map_err(Reply::from)?;
            Ok((StatusCode::CREATED, json!(rating)))
        })()
        .unwrap_or_else(|e| e);
        state.remember(key, &r);
        r
    })
    .await
}

/// Periodically expires idle sessions.
pub async fn sweep_idle(state: Arc<AppState>, every: Duration) {
    let mut tick = tokio::time::interval(every);
    loop {
        tick.tick().await;
        let s = state.clone();
        let n = tokio::task::spawn_blocking(move || s.sessions.sweep()).await.unwrap_or(0);
        if n > 0 {
            tracing::info!(expired = n, "expired idle sessions");
        }
    }
}
