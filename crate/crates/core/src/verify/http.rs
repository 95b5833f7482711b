//! JSON API over a [`Board`].

use std::collections::HashMap;
use std::sync::Arc;

use axum::extract::{Path, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use parking_lot::Mutex;
use serde::{Deserialize, Serialize};
use serde_json::json;

use super::{verification_metrics, Board, TaskKind, TaskResult, VerifyError};
use crate::config::TokenGrant;
use crate::geometry::BoundingBox;
use crate::pipeline::ImageRecord;
use crate::region::Region;

/// Receives board state and changed regions after every mutation.
pub trait BoardSink: Send + Sync {
    fn persist(&self, board: &Board, changed: &[Region]) -> Result<(), String>;
}

pub struct VerifyService {
    board: Mutex<Board>,
    tokens: HashMap<String, TokenGrant>,
    images: HashMap<String, ImageRecord>,
    sink: Option<Arc<dyn BoardSink>>,
}

impl VerifyService {
    pub fn new(board: Board) -> Self {
        Self {
            board: Mutex::new(board),
            tokens: HashMap::new(),
            images: HashMap::new(),
            sink: None,
        }
    }

    /// Requires one of `tokens` on every request. No tokens means open access.
    pub fn tokens(mut self, tokens: impl IntoIterator<Item = TokenGrant>) -> Self {
        self.tokens = tokens.into_iter().map(|t| (t.token.clone(), t)).collect();
        self
    }

    pub fn images(mut self, images: impl IntoIterator<Item = ImageRecord>) -> Self {
        self.images = images.into_iter().map(|i| (i.image_id.clone(), i)).collect();
        self
    }

    pub fn sink(mut self, sink: Arc<dyn BoardSink>) -> Self {
        self.sink = Some(sink);
        self
    }

    pub fn board(&self) -> parking_lot::MutexGuard<'_, Board> {
        self.board.lock()
    }

    fn authorize(&self, headers: &HeaderMap, principal: &str, expert: bool) -> Result<(), ApiError> {
        if self.tokens.is_empty() {
            return Ok(());
        }
        let token = headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(ApiError(VerifyError::Unauthorized))?;
        let grant = self.tokens.get(token.trim()).ok_or(ApiError(VerifyError::Unauthorized))?;
        if grant.principal != principal {
            return Err(ApiError(VerifyError::Forbidden(format!(
                "token belongs to {}, not {principal}",
                grant.principal
            ))));
        }
        if expert && !grant.expert {
            return Err(ApiError(VerifyError::Forbidden(format!("{principal} is not an expert"))));
        }
        Ok(())
    }

    fn authorize_any(&self, headers: &HeaderMap) -> Result<(), ApiError> {
        if self.tokens.is_empty() {
            return Ok(());
        }
        let token = headers
            .get("authorization")
            .and_then(|v| v.to_str().ok())
            .and_then(|v| v.strip_prefix("Bearer "))
            .ok_or(ApiError(VerifyError::Unauthorized))?;
        self.tokens
            .contains_key(token.trim())
            .then_some(())
            .ok_or(ApiError(VerifyError::Unauthorized))
    }

    fn persist(&self, board: &Board, changed: &[String]) -> Result<(), ApiError> {
        if let Some(sink) = &self.sink {
            let regions: Vec<Region> = changed.iter().filter_map(|id| board.region(id).cloned()).collect();
            sink.persist(board, &regions)
                .map_err(|e| ApiError(VerifyError::Invalid(format!("persistence failed: {e}"))))?;
        }
        Ok(())
    }
}

pub struct ApiError(pub VerifyError);

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let (status, code) = match &self.0 {
            VerifyError::NotFound(_) => (StatusCode::NOT_FOUND, "not_found"),
            VerifyError::Conflict(_) => (StatusCode::CONFLICT, "conflict"),
            VerifyError::Forbidden(_) => (StatusCode::FORBIDDEN, "forbidden"),
            VerifyError::Expired(_) => (StatusCode::GONE, "lease_expired"),
            VerifyError::Invalid(_) => (StatusCode::BAD_REQUEST, "invalid"),
            VerifyError::Unauthorized => (StatusCode::UNAUTHORIZED, "unauthorized"),
        };
        (status, Json(json!({"error": code, "message": self.0.to_string()}))).into_response()
    }
}

#[derive(Debug, Serialize, Deserialize)]
pub struct LeaseRequest {
    pub worker_id: String,
    pub kind: TaskKind,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct SubmitRequest {
    pub worker_id: String,
    pub result: TaskResult,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct ReviewRequest {
    pub expert_id: String,
    /// One verdict per package task, in package order.
    pub verdicts: Vec<bool>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct RegionContext {
    pub region_id: String,
    pub image_id: String,
    pub image_ref: Option<String>,
    pub width: Option<u32>,
    pub height: Option<u32>,
    pub bbox: BoundingBox,
    pub candidates: Vec<String>,
}

type Svc = State<Arc<VerifyService>>;

pub fn router(service: Arc<VerifyService>) -> Router {
    Router::new()
        .route("/api/tasks/lease", post(lease))
        .route("/api/tasks/{id}/submit", post(submit))
        .route("/api/tasks/{id}", get(task))
        .route("/api/packages", get(packages))
        .route("/api/packages/{id}", get(package))
        .route("/api/packages/{id}/review", post(review))
        .route("/api/metrics", get(metrics))
        .route("/api/regions/{id}/context", get(context))
        .with_state(service)
}

async fn lease(State(s): Svc, headers: HeaderMap, Json(req): Json<LeaseRequest>) -> Result<Response, ApiError> {
    s.authorize(&headers, &req.worker_id, false)?;
    let mut board = s.board();
    match board.lease(&req.worker_id, req.kind).map_err(ApiError)? {
        Some(task) => {
            s.persist(&board, &[])?;
            Ok(Json(task).into_response())
        }
        None => Ok(StatusCode::NO_CONTENT.into_response()),
    }
}

async fn submit(
    State(s): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<SubmitRequest>,
) -> Result<Response, ApiError> {
    s.authorize(&headers, &req.worker_id, false)?;
    let mut board = s.board();
    let changed = board.submit(&id, &req.worker_id, req.result);
    // an expired lease also changes state
    s.persist(&board, changed.as_deref().unwrap_or_default())?;
    changed.map_err(ApiError)?;
    let task = board.task(&id).cloned();
    Ok(Json(json!({"ok": true, "task": task})).into_response())
}

async fn task(State(s): Svc, Path(id): Path<String>, headers: HeaderMap) -> Result<Response, ApiError> {
    s.authorize_any(&headers)?;
    let mut board = s.board();
    if board.expire_leases() > 0 {
        s.persist(&board, &[])?;
    }
    let t = board
        .task(&id)
        .cloned()
        .ok_or_else(|| ApiError(VerifyError::NotFound(format!("task {id}"))))?;
    Ok(Json(t).into_response())
}

async fn packages(State(s): Svc, headers: HeaderMap) -> Result<Response, ApiError> {
    s.authorize_any(&headers)?;
    Ok(Json(s.board().packages().to_vec()).into_response())
}

async fn package(State(s): Svc, Path(id): Path<String>, headers: HeaderMap) -> Result<Response, ApiError> {
    s.authorize_any(&headers)?;
    let board = s.board();
    let p = board
        .package(&id)
        .ok_or_else(|| ApiError(VerifyError::NotFound(format!("package {id}"))))?;
    let tasks: Vec<_> = p.task_ids.iter().filter_map(|t| board.task(t).cloned()).collect();
    Ok(Json(json!({"package": p, "tasks": tasks})).into_response())
}

async fn review(
    State(s): Svc,
    Path(id): Path<String>,
    headers: HeaderMap,
    Json(req): Json<ReviewRequest>,
) -> Result<Response, ApiError> {
    s.authorize(&headers, &req.expert_id, true)?;
    let mut board = s.board();
    let pkg = board.review(&id, &req.expert_id, &req.verdicts).map_err(ApiError)?;
    let changed: Vec<String> = pkg
        .task_ids
        .iter()
        .filter_map(|t| board.task(t).map(|t| t.region_id.clone()))
        .collect();
    s.persist(&board, &changed)?;
    Ok(Json(pkg).into_response())
}

async fn metrics(State(s): Svc, headers: HeaderMap) -> Result<Response, ApiError> {
    s.authorize_any(&headers)?;
    let board = s.board();
    Ok(Json(verification_metrics(board.regions())).into_response())
}

async fn context(State(s): Svc, Path(id): Path<String>, headers: HeaderMap) -> Result<Response, ApiError> {
    s.authorize_any(&headers)?;
    let board = s.board();
    let r = board
        .region(&id)
        .ok_or_else(|| ApiError(VerifyError::NotFound(format!("region {id}"))))?;
    let img = s.images.get(&r.image_id);
    let shown = board.config().shown;
    let ranked = if r.matched_tags.is_empty() { &r.candidate_tags } else { &r.matched_tags };
    Ok(Json(RegionContext {
        region_id: r.region_id.clone(),
        image_id: r.image_id.clone(),
        image_ref: img.map(|i| i.image_ref.clone()),
        width: img.map(|i| i.width),
        height: img.map(|i| i.height),
        bbox: r.bbox,
        candidates: ranked.iter().take(shown).map(|t| t.text.clone()).collect(),
    })
    .into_response())
}
