//! JSON over HTTP/1.1.
//!
//! - `POST /rank` `{user_id, candidates: [{pin_id, embedding: [32 floats]}], request_id?, timestamp?}`
//!   → `{user_id, cold_start, scores: [{pin_id, heads: {repin, click, closeup, hide}, final}]}`
//! - `POST /users` `{user_id, sequences: "<base64 packed token block>"}` → `{ok, generation}`
//! - `GET /stats` → per-stage percentiles and counters
//! - `GET /healthz`

use std::collections::BTreeMap;
use std::sync::Arc;

use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use base64::Engine as _;
use serde::{Deserialize, Serialize};
use seqrank_core::dataset::decode_token_block;
use seqrank_core::nnsearch::CandidateItem;
use seqrank_core::seqcore::{Embedding, Head};

use crate::engine::{RankRequest, RankResponse};
use crate::error::ServeError;
use crate::server::{Server, StatsReport};

#[derive(Debug, Deserialize)]
pub struct RankBody {
    pub user_id: u64,
    pub candidates: Vec<CandidateBody>,
    #[serde(default)]
    pub request_id: u64,
    /// Unix seconds; defaults to the time of receipt.
    pub timestamp: Option<u32>,
}

#[derive(Debug, Deserialize)]
pub struct CandidateBody {
    pub pin_id: u64,
    pub embedding: Vec<f32>,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct ScoreBody {
    pub pin_id: u64,
    pub heads: BTreeMap<String, f32>,
    #[serde(rename = "final")]
    pub final_score: f64,
}

#[derive(Debug, Serialize, Deserialize, PartialEq)]
pub struct RankReply {
    pub user_id: u64,
    pub cold_start: bool,
    pub scores: Vec<ScoreBody>,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UsersBody {
    pub user_id: u64,
    pub sequences: String,
}

#[derive(Debug, Serialize, Deserialize)]
pub struct UsersReply {
    pub ok: bool,
    pub generation: u64,
}

pub struct HttpError(StatusCode, String);

impl IntoResponse for HttpError {
    fn into_response(self) -> Response {
        (self.0, Json(serde_json::json!({ "error": self.1 }))).into_response()
    }
}

impl From<ServeError> for HttpError {
    fn from(e: ServeError) -> Self {
        let code = match e {
            ServeError::BadRequest(_) | ServeError::Core(_) => StatusCode::BAD_REQUEST,
            ServeError::QueueFull | ServeError::Shutdown => StatusCode::SERVICE_UNAVAILABLE,
        };
        HttpError(code, e.to_string())
    }
}

fn bad(msg: impl Into<String>) -> HttpError {
    HttpError(StatusCode::BAD_REQUEST, msg.into())
}

pub fn to_request(body: RankBody) -> Result<RankRequest, HttpError> {
    if body.candidates.is_empty() {
        return Err(bad("candidates must not be empty"));
    }
    let candidates = body
        .candidates
        .into_iter()
        .map(|c| {
            Embedding::from_f32(&c.embedding)
                .map(|embedding| CandidateItem {
                    item_id: c.pin_id,
                    embedding,
                })
                .map_err(|e| bad(format!("pin {}: {e}", c.pin_id)))
        })
        .collect::<Result<_, _>>()?;
    let request_ts = body.timestamp.unwrap_or_else(|| {
        std::time::SystemTime::now()
            .duration_since(std::time::UNIX_EPOCH)
            .map_or(0, |d| d.as_secs() as u32)
    });
    Ok(RankRequest {
        request_id: body.request_id,
        user_id: body.user_id,
        request_ts,
        candidates,
    })
}

pub fn to_reply(resp: RankResponse) -> RankReply {
    RankReply {
        user_id: resp.user_id,
        cold_start: resp.cold_start,
        scores: resp
            .scores
            .into_iter()
            .map(|s| ScoreBody {
                pin_id: s.pin_id,
                heads: Head::ALL.iter().map(|h| (h.name().to_string(), s.probs[*h as usize])).collect(),
                final_score: s.final_score,
            })
            .collect(),
    }
}

async fn rank(State(server): State<Arc<Server>>, Json(body): Json<RankBody>) -> Result<Json<RankReply>, HttpError> {
    let req = to_request(body)?;
    let resp = tokio::task::spawn_blocking(move || server.rank(req))
        .await
        .map_err(|e| HttpError(StatusCode::INTERNAL_SERVER_ERROR, e.to_string()))??;
    Ok(Json(to_reply(resp)))
}

async fn users(State(server): State<Arc<Server>>, Json(body): Json<UsersBody>) -> Result<Json<UsersReply>, HttpError> {
    let bytes = base64::engine::general_purpose::STANDARD
        .decode(body.sequences.as_bytes())
        .map_err(|e| bad(format!("sequences: {e}")))?;
    let seqs = decode_token_block(&bytes).map_err(|e| bad(format!("sequences: {e}")))?;
    let generation = server.engine().store().put(body.user_id, seqs)?;
    Ok(Json(UsersReply { ok: true, generation }))
}

async fn stats(State(server): State<Arc<Server>>) -> Json<StatsReport> {
    Json(server.report())
}

async fn healthz() -> &'static str {
    "ok"
}

pub fn router(server: Arc<Server>) -> Router {
    Router::new()
        .route("/rank", post(rank))
        .route("/users", post(users))
        .route("/stats", get(stats))
        .route("/healthz", get(healthz))
        .with_state(server)
}

/// Serves until `shutdown` resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    server: Arc<Server>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(server)).with_graceful_shutdown(shutdown).await
}
