//! Session-oriented HTTP service around the active-learning loop. A human
//! answers the pairwise comparisons one at a time.
//!
//! Sessions live in memory and in an append-only log under the data
//! directory; a session missing from memory is rebuilt from its log on first
//! access. Mutations of one session are serialized by a per-session async
//! mutex, surrogate fits run on the blocking pool, and reads are served from
//! a snapshot that is swapped after every change, so `GET .../state` never
//! waits for a fit and reports `fitting` meanwhile.

pub mod api;
pub mod error;
pub mod store;

use std::collections::HashMap;
use std::net::SocketAddr;
use std::path::PathBuf;
use std::sync::{Arc, RwLock};
use std::time::Instant;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, Path, State};
use axum::http::header;
use axum::response::IntoResponse;
use axum::routing::{get, post};
use axum::{Json, Router};
use nestpref::pool::read_pool_csv;
use nestpref::Pool;
use tokio::sync::Mutex;

use crate::api::{AnswerRequest, CreateRequest, Progress, StateView};
use crate::error::ApiError;
use crate::store::{log_path, valid_session_id, Core};

/// The API description served at `/openapi.yaml`.
pub const OPENAPI: &str = include_str!("../openapi.yaml");

pub const BIND_ENV: &str = "NESTPREF_BIND";
pub const DATA_DIR_ENV: &str = "NESTPREF_DATA_DIR";

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ServiceConfig {
    pub bind: SocketAddr,
    pub data_dir: PathBuf,
}

impl Default for ServiceConfig {
    fn default() -> Self {
        Self { bind: SocketAddr::from(([127, 0, 0, 1], 8080)), data_dir: PathBuf::from("nestpref-data") }
    }
}

impl ServiceConfig {
    /// Reads `NESTPREF_BIND` and `NESTPREF_DATA_DIR`, falling back to the
    /// defaults.
    pub fn from_env() -> Result<Self, String> {
        let mut cfg = Self::default();
        if let Ok(bind) = std::env::var(BIND_ENV) {
            cfg.bind = bind.parse().map_err(|e| format!("{BIND_ENV}='{bind}': {e}"))?;
        }
        if let Some(dir) = std::env::var_os(DATA_DIR_ENV) {
            cfg.data_dir = dir.into();
        }
        Ok(cfg)
    }
}

struct Entry {
    core: Mutex<Core>,
    snapshot: RwLock<Arc<StateView>>,
}

impl Entry {
    fn new(mut core: Core) -> Self {
        let view = core.state();
        Self { core: Mutex::new(core), snapshot: RwLock::new(Arc::new(view)) }
    }

    fn publish(&self, view: StateView) {
        *self.snapshot.write().expect("snapshot lock") = Arc::new(view);
    }

    fn snapshot(&self) -> Arc<StateView> {
        self.snapshot.read().expect("snapshot lock").clone()
    }
}

#[derive(Clone)]
pub struct AppState {
    data_dir: Arc<PathBuf>,
    sessions: Arc<RwLock<HashMap<String, Arc<Entry>>>>,
}

impl AppState {
    /// Creates the data directory if needed.
    pub fn new(data_dir: impl Into<PathBuf>) -> std::io::Result<Self> {
        let data_dir = data_dir.into();
        std::fs::create_dir_all(&data_dir)?;
        Ok(Self { data_dir: Arc::new(data_dir), sessions: Arc::default() })
    }

    fn cached(&self, id: &str) -> Option<Arc<Entry>> {
        self.sessions.read().expect("session map lock").get(id).cloned()
    }

    fn fresh_id(&self) -> String {
        loop {
            let id = format!("{:016x}", rand::random::<u64>());
            if self.cached(&id).is_none() && !log_path(&self.data_dir, &id).exists() {
                return id;
            }
        }
    }

    /// The session from memory, or rebuilt from its log.
    async fn entry(&self, id: &str) -> Result<Arc<Entry>, ApiError> {
        if !valid_session_id(id) {
            return Err(ApiError::NotFound(id.into()));
        }
        if let Some(e) = self.cached(id) {
            return Ok(e);
        }
        let path = log_path(&self.data_dir, id);
        if !path.exists() {
            return Err(ApiError::NotFound(id.into()));
        }
        tracing::info!(session = id, "replaying session log");
        let core = tokio::task::spawn_blocking(move || Core::replay(&path))
            .await
            .map_err(|e| ApiError::Internal(format!("replay task: {e}")))??;
        let mut map = self.sessions.write().expect("session map lock");
        Ok(map.entry(id.to_string()).or_insert_with(|| Arc::new(Entry::new(core))).clone())
    }

    /// Forgets every in-memory session; later requests replay the logs.
    pub fn evict_all(&self) {
        self.sessions.write().expect("session map lock").clear();
    }
}

pub fn router(state: AppState) -> Router {
    Router::new()
        .route("/healthz", get(healthz))
        .route("/openapi.yaml", get(openapi))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/answer", post(submit_answer))
        .route("/sessions/{id}/state", get(get_state))
        .layer(DefaultBodyLimit::max(32 << 20))
        .with_state(state)
}

async fn healthz() -> Json<serde_json::Value> {
    Json(serde_json::json!({ "status": "ok" }))
}

async fn openapi() -> impl IntoResponse {
    ([(header::CONTENT_TYPE, "application/yaml")], OPENAPI)
}

fn parse_json<T: serde::de::DeserializeOwned>(body: &[u8]) -> Result<T, ApiError> {
    serde_json::from_slice(body).map_err(|e| ApiError::BadRequest { message: format!("invalid body: {e}"), line: None })
}

async fn create_session(State(state): State<AppState>, body: Bytes) -> Result<Json<Progress>, ApiError> {
    let req: CreateRequest = parse_json(&body)?;
    let pool = match (req.instances, req.csv) {
        (Some(instances), None) => Pool::new(req.feature_names, instances)?,
        (None, Some(csv)) => read_pool_csv(csv.as_bytes())?,
        _ => return Err(ApiError::bad_request("provide exactly one of 'instances' and 'csv'")),
    };
    let id = state.fresh_id();
    let dir = state.data_dir.clone();
    let config = req.config;
    let sid = id.clone();
    let (core, progress) = tokio::task::spawn_blocking(move || Core::create(&dir, sid, pool, config))
        .await
        .map_err(|e| ApiError::Internal(format!("create task: {e}")))??;
    tracing::info!(session = %id, instances = core.pool.len(), "session created");
    state.sessions.write().expect("session map lock").insert(id, Arc::new(Entry::new(core)));
    Ok(Json(progress))
}

async fn get_state(State(state): State<AppState>, Path(id): Path<String>) -> Result<Json<StateView>, ApiError> {
    let entry = state.entry(&id).await?;
    Ok(Json(entry.snapshot().as_ref().clone()))
}

async fn submit_answer(
    State(state): State<AppState>,
    Path(id): Path<String>,
    body: Bytes,
) -> Result<Json<Progress>, ApiError> {
    let req: AnswerRequest = parse_json(&body)?;
    let entry = state.entry(&id).await?;
    let mut core = entry.core.lock().await;

    let seq = req
        .query_token
        .strip_prefix(&format!("{id}-"))
        .and_then(|s| s.parse::<usize>().ok())
        .ok_or_else(|| ApiError::Conflict(format!("unknown query token '{}'", req.query_token)))?;
    let answered = core.history.len();
    if seq + 1 < answered || (seq + 1 == answered && core.responses[seq].is_some()) {
        // a replay of an answer that already went through
        let h = &core.history[seq];
        if h.winner != req.winner_id {
            return Err(ApiError::Conflict(format!("query token '{}' was already answered with {}", req.query_token, h.winner)));
        }
        return core.responses[seq].clone().map(Json).ok_or_else(|| ApiError::Conflict("that answer is no longer current".into()));
    }
    if seq + 1 == answered {
        // the fit after this answer failed; a resubmission retries it
        if core.history[seq].winner != req.winner_id {
            return Err(ApiError::Conflict(format!("query token '{}' was already answered", req.query_token)));
        }
    } else if seq == answered {
        if core.last_error.is_some() {
            return Err(ApiError::Conflict("the last fit failed; resubmit the previous answer to retry".into()));
        }
        let pos = core.check_winner(req.winner_id)?;
        core.record(pos)?;
    } else {
        return Err(ApiError::Conflict(format!("unknown query token '{}'", req.query_token)));
    }

    let previous = entry.snapshot();
    entry.publish(core.fitting_state(&previous));
    let mut session = core.session.take().expect("session is present outside fits");
    let started = Instant::now();
    let joined = tokio::task::spawn_blocking(move || {
        let next = session.next_query();
        (session, next)
    })
    .await;
    let (session, next) = match joined {
        Ok(pair) => pair,
        Err(e) => {
            // the fit panicked and took the session with it; the log still has everything
            tracing::error!(session = %id, "fit task failed: {e}");
            let path = core.log.clone();
            *core = tokio::task::spawn_blocking(move || Core::replay(&path))
                .await
                .map_err(|e| ApiError::Internal(format!("replay task: {e}")))??;
            let view = core.state();
            entry.publish(view);
            return Err(ApiError::Internal(format!("fit task failed: {e}")));
        }
    };
    core.session = Some(session);
    let result = core.settle(next);
    core.log_fit(started.elapsed().as_secs_f64())?;
    let view = core.state();
    entry.publish(view);
    result.map(Json)
}
