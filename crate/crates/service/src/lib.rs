//! HTTP facade over the placement dialogue, so that a person can answer the
//! questions and watch the hierarchy grow.
//!
//! | method | path | body / result |
//! |---|---|---|
//! | `POST` | `/sessions` | [`CreateSession`] → `{"id", "queue_length"}` |
//! | `GET` | `/sessions/{id}/query` | [`SessionEvent`] |
//! | `POST` | `/sessions/{id}/answer` | `{"query_id", "answer"}` |
//! | `GET` | `/sessions/{id}/hierarchy` | hierarchy snapshot |
//! | `GET` | `/sessions/{id}/metrics` | [`Metrics`] |
//!
//! Errors are `{"error": "..."}`: 400 for bad requests, 404 for unknown
//! sessions, 409 for answers to a query that is not pending.

mod error;
mod session;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex, RwLock};

use axum::body::Bytes;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::de::DeserializeOwned;
use serde::{Deserialize, Serialize};
use tower_http::services::ServeDir;

pub use error::ApiError;
pub use session::{CreateSession, DatasetSpec, EncounterView, Metrics, MetricsRow, Session, SessionEvent};

type Shared = Arc<Mutex<Session>>;

#[derive(Default)]
pub struct AppState {
    sessions: RwLock<HashMap<String, Shared>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new() -> Arc<Self> {
        Arc::new(Self::default())
    }

    /// Registers a new session. Blocking: generating or parsing a dataset
    /// may take a moment.
    pub fn create(&self, req: CreateSession) -> Result<Created, ApiError> {
        let session = Session::create(req)?;
        let queue_length = session.remaining();
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed) + 1);
        self.sessions
            .write()
            .map_err(|_| ApiError::internal("session table poisoned"))?
            .insert(id.clone(), Arc::new(Mutex::new(session)));
        Ok(Created { id, queue_length })
    }

    fn session(&self, id: &str) -> Result<Shared, ApiError> {
        self.sessions
            .read()
            .map_err(|_| ApiError::internal("session table poisoned"))?
            .get(id)
            .cloned()
            .ok_or_else(|| ApiError::not_found(format!("no session {id:?}")))
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Created {
    pub id: String,
    pub queue_length: usize,
}

#[derive(Debug, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerRequest {
    pub query_id: u64,
    pub answer: bool,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct Accepted {
    pub accepted: bool,
}

pub fn router() -> Router {
    router_with_state(AppState::new())
}

/// Adds static files (the web console) served from `dir` for every path the
/// API does not handle.
pub fn with_static(router: Router, dir: PathBuf) -> Router {
    router.fallback_service(ServeDir::new(dir))
}

pub fn router_with_state(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/query", get(next_query))
        .route("/sessions/{id}/answer", post(post_answer))
        .route("/sessions/{id}/hierarchy", get(hierarchy))
        .route("/sessions/{id}/metrics", get(metrics))
        .with_state(state)
}

pub async fn serve(addr: SocketAddr, app: Router) -> std::io::Result<()> {
    let listener = tokio::net::TcpListener::bind(addr).await?;
    axum::serve(listener, app).await
}

fn parse_body<T: DeserializeOwned>(body: &Bytes) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::bad_request(format!("invalid request body: {e}")))
}

/// Runs `f` on the session off the async executor; EVM refits can take a
/// while.
async fn with_session<T, F>(state: &AppState, id: &str, f: F) -> Result<T, ApiError>
where
    T: Send + 'static,
    F: FnOnce(&mut Session) -> Result<T, ApiError> + Send + 'static,
{
    let session = state.session(id)?;
    tokio::task::spawn_blocking(move || {
        let mut s = session.lock().map_err(|_| ApiError::internal("session poisoned"))?;
        f(&mut s)
    })
    .await
    .map_err(|e| ApiError::internal(e.to_string()))?
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    body: Bytes,
) -> Result<(StatusCode, Json<Created>), ApiError> {
    let req: CreateSession = parse_body(&body)?;
    let created = tokio::task::spawn_blocking(move || state.create(req))
        .await
        .map_err(|e| ApiError::internal(e.to_string()))??;
    Ok((StatusCode::CREATED, Json(created)))
}

async fn next_query(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<SessionEvent>, ApiError> {
    with_session(&state, &id, |s| s.next_event()).await.map(Json)
}

async fn post_answer(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Accepted>, ApiError> {
    state.session(&id)?;
    let req: AnswerRequest = parse_body(&body)?;
    with_session(&state, &id, move |s| s.answer(req.query_id, req.answer)).await?;
    Ok(Json(Accepted { accepted: true }))
}

async fn hierarchy(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<visem_core::HierarchySnapshot>, ApiError> {
    with_session(&state, &id, |s| Ok(s.snapshot())).await.map(Json)
}

async fn metrics(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Metrics>, ApiError> {
    with_session(&state, &id, |s| Ok(s.metrics())).await.map(Json)
}
