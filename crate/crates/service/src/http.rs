//! Routes:
//!
//! | method | path | |
//! |---|---|---|
//! | POST | `/sessions` | create; body [`CreateSession`] |
//! | GET | `/sessions/{id}/day` | current [`DayView`] |
//! | POST | `/sessions/{id}/initial-order` | body [`OrderRequest`] |
//! | POST | `/sessions/{id}/final-order` | body [`OrderRequest`] |
//! | GET | `/sessions/{id}/result` | [`SessionResult`](crate::session::SessionResult) |
//! | GET | `/assets/{id}` | saliency PNG |
//! | GET | `/health` | |

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{header, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Serialize;
use tokio::sync::{Mutex, RwLock};
use xselector_core::explanations::Payload;

use crate::data::DataBundle;
use crate::session::{CreateSession, DayView, OrderRequest, Session, SessionError};

pub struct AppState {
    pub data: DataBundle,
    sessions: RwLock<HashMap<String, Arc<Mutex<Session>>>>,
}

impl AppState {
    /// Loads every session log found in the configured log directory.
    pub fn open(data: DataBundle) -> anyhow::Result<Arc<Self>> {
        let dir = &data.config.log_dir;
        std::fs::create_dir_all(dir)?;
        let mut sessions = HashMap::new();
        let mut paths: Vec<_> = std::fs::read_dir(dir)?
            .filter_map(|e| e.ok().map(|e| e.path()))
            .filter(|p| p.extension().is_some_and(|x| x == "jsonl"))
            .collect();
        paths.sort();
        for path in paths {
            match Session::load(&data, &path) {
                Ok(s) => {
                    sessions.insert(s.id.clone(), Arc::new(Mutex::new(s)));
                }
                Err(e) => log::error!("skipping {}: {e:#}", path.display()),
            }
        }
        log::info!("restored {} sessions from {}", sessions.len(), dir.display());
        Ok(Arc::new(AppState {
            data,
            sessions: RwLock::new(sessions),
        }))
    }

    pub async fn session_count(&self) -> usize {
        self.sessions.read().await.len()
    }

    async fn session(&self, id: &str) -> Result<Arc<Mutex<Session>>, ApiError> {
        self.sessions
            .read()
            .await
            .get(id)
            .cloned()
            .ok_or_else(|| SessionError::NotFound(id.to_string()).into())
    }
}

pub struct ApiError(SessionError);

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        ApiError(e)
    }
}

#[derive(Serialize)]
struct ErrorBody {
    error: String,
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = match &self.0 {
            SessionError::NotFound(_) => StatusCode::NOT_FOUND,
            SessionError::Conflict(_) => StatusCode::CONFLICT,
            SessionError::Infeasible(_) => StatusCode::UNPROCESSABLE_ENTITY,
            SessionError::BadRequest(_) => StatusCode::BAD_REQUEST,
            SessionError::Internal(e) => {
                log::error!("internal error: {e:#}");
                StatusCode::INTERNAL_SERVER_ERROR
            }
        };
        (status, Json(ErrorBody { error: self.0.to_string() })).into_response()
    }
}

pub fn router(state: Arc<AppState>) -> Router {
    Router::new()
        .route("/health", get(health))
        .route("/sessions", post(create_session))
        .route("/sessions/{id}/day", get(day))
        .route("/sessions/{id}/initial-order", post(initial_order))
        .route("/sessions/{id}/final-order", post(final_order))
        .route("/sessions/{id}/result", get(result))
        .route("/assets/{id}", get(asset))
        .with_state(state)
}

async fn health(State(state): State<Arc<AppState>>) -> Json<serde_json::Value> {
    Json(serde_json::json!({
        "status": "ok",
        "sessions": state.session_count().await,
        "models": state.data.environment().models().is_some(),
        "scenarios": state.data.config.scenarios.keys().collect::<Vec<_>>(),
    }))
}

async fn create_session(
    State(state): State<Arc<AppState>>,
    Json(req): Json<CreateSession>,
) -> Result<(StatusCode, Json<DayView>), ApiError> {
    let id = uuid::Uuid::new_v4().simple().to_string();
    let mut sessions = state.sessions.write().await;
    let session = Session::create(&state.data, id.clone(), &req, &state.data.config.log_dir)?;
    let view = session.view(&state.data)?;
    log::info!("session {id} created: {} / {}", req.scenario, session.condition);
    sessions.insert(id, Arc::new(Mutex::new(session)));
    Ok((StatusCode::CREATED, Json(view)))
}

async fn day(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<DayView>, ApiError> {
    let session = state.session(&id).await?;
    let s = session.lock().await;
    Ok(Json(s.view(&state.data)?))
}

async fn initial_order(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<OrderRequest>,
) -> Result<Json<DayView>, ApiError> {
    let session = state.session(&id).await?;
    let mut s = session.lock().await;
    Ok(Json(s.submit_initial(&state.data, &req)?))
}

async fn final_order(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
    Json(req): Json<OrderRequest>,
) -> Result<Json<DayView>, ApiError> {
    let session = state.session(&id).await?;
    let mut s = session.lock().await;
    Ok(Json(s.submit_final(&state.data, &req)?))
}

async fn result(
    State(state): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Json<crate::session::SessionResult>, ApiError> {
    let session = state.session(&id).await?;
    let s = session.lock().await;
    Ok(Json(s.result()))
}

async fn asset(State(state): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Response, ApiError> {
    let not_found = || ApiError(SessionError::NotFound(format!("asset {id}")));
    let item = state.data.store.find(&id).ok_or_else(not_found)?;
    if !matches!(item.payload, Payload::Image(_)) {
        return Err(not_found());
    }
    let path = state.data.store.resolve_payload(item).ok_or_else(not_found)?;
    let bytes = tokio::fs::read(&path).await.map_err(|_| not_found())?;
    Ok(([(header::CONTENT_TYPE, "image/png")], bytes).into_response())
}
