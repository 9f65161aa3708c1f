use std::sync::Arc;
use std::time::Duration;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde_json::json;

use searchrel_core::service::{OnlineScorer, ScoreRequest};
use searchrel_core::Error;

#[derive(Clone)]
struct AppState {
    scorer: Arc<OnlineScorer>,
    timeout: Duration,
}

pub fn router(scorer: Arc<OnlineScorer>, timeout: Duration) -> Router {
    Router::new()
        .route("/v1/score", post(score))
        .route("/healthz", get(healthz))
        .route("/stats", get(stats))
        .with_state(AppState { scorer, timeout })
}

fn error(status: StatusCode, message: impl std::fmt::Display) -> Response {
    (status, Json(json!({ "error": message.to_string() }))).into_response()
}

async fn score(State(app): State<AppState>, body: Bytes) -> Response {
    let req: ScoreRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            app.scorer.stats.record_error();
            return error(StatusCode::BAD_REQUEST, format!("malformed request: {e}"));
        }
    };
    let scorer = app.scorer.clone();
    let task = tokio::task::spawn_blocking(move || scorer.score(&req));
    match tokio::time::timeout(app.timeout, task).await {
        Err(_) => {
            app.scorer.stats.record_error();
            error(StatusCode::GATEWAY_TIMEOUT, "request timed out")
        }
        Ok(Err(e)) => error(StatusCode::INTERNAL_SERVER_ERROR, e),
        Ok(Ok(Err(e @ Error::Validation(_)))) => error(StatusCode::BAD_REQUEST, e),
        Ok(Ok(Err(e))) => {
            log::error!("scoring failed: {e}");
            error(StatusCode::INTERNAL_SERVER_ERROR, e)
        }
        Ok(Ok(Ok(resp))) => Json(resp).into_response(),
    }
}

async fn healthz() -> Json<serde_json::Value> {
    Json(json!({ "status": "ok" }))
}

async fn stats(State(app): State<AppState>) -> Response {
    Json(app.scorer.stats.snapshot()).into_response()
}

/// Serves until ctrl-c.
pub async fn serve(listener: tokio::net::TcpListener, app: Router) -> std::io::Result<()> {
    axum::serve(listener, app)
        .with_graceful_shutdown(async {
            let _ = tokio::signal::ctrl_c().await;
        })
        .await
}
