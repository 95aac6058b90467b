//! Serves any in-process [`Model`] over the HTTP model protocol.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::State;
use axum::http::{HeaderMap, HeaderValue, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use nero_core::modelproto::wire::{serve_request, ErrorEnvelope, InferRequest, REQUEST_ID_HEADER};
use nero_core::modelproto::{Model, ModelDescriptor};

struct ModelState {
    model: Arc<dyn Model>,
    descriptor: ModelDescriptor,
}

pub fn status_for(code: &str) -> StatusCode {
    match code {
        "batch_too_large" => StatusCode::PAYLOAD_TOO_LARGE,
        "empty_batch" | "bad_request" | "unsupported_version" => StatusCode::BAD_REQUEST,
        "modality_mismatch" => StatusCode::UNPROCESSABLE_ENTITY,
        "not_found" => StatusCode::NOT_FOUND,
        "unavailable" => StatusCode::SERVICE_UNAVAILABLE,
        _ => StatusCode::INTERNAL_SERVER_ERROR,
    }
}

pub fn error_response(env: ErrorEnvelope) -> Response {
    (status_for(&env.error.code), Json(env)).into_response()
}

async fn describe(State(s): State<Arc<ModelState>>) -> Json<ModelDescriptor> {
    Json(s.descriptor.clone())
}

async fn infer(State(s): State<Arc<ModelState>>, headers: HeaderMap, body: Bytes) -> Response {
    let header = headers.get(REQUEST_ID_HEADER).cloned();
    let (mut resp, echo) = match serde_json::from_slice::<InferRequest>(&body) {
        Ok(req) => {
            let echo = header.or_else(|| HeaderValue::from_str(&req.request_id).ok());
            // Model calls block; keep them off the async workers.
            let state = s.clone();
            let outcome =
                tokio::task::spawn_blocking(move || serve_request(state.model.as_ref(), &state.descriptor, &req)).await;
            let resp = match outcome {
                Ok(Ok(reply)) => Json(reply).into_response(),
                Ok(Err(env)) => error_response(env),
                Err(e) => error_response(ErrorEnvelope::new("model_error", format!("model task panicked: {e}"))),
            };
            (resp, echo)
        }
        Err(e) => (error_response(ErrorEnvelope::new("bad_request", e.to_string())), header),
    };
    if let Some(id) = echo {
        resp.headers_mut().insert(REQUEST_ID_HEADER, id);
    }
    resp
}

async fn fallback() -> Response {
    error_response(ErrorEnvelope::new("not_found", "no such endpoint"))
}

/// Router exposing `GET /v1/describe` and `POST /v1/infer`. The descriptor
/// is taken once, so it stays fixed for the server's lifetime.
pub fn model_router(model: Arc<dyn Model>) -> Result<Router, nero_core::modelproto::ModelError> {
    let descriptor = model.describe()?;
    descriptor.validate()?;
    Ok(Router::new()
        .route("/v1/describe", get(describe))
        .route("/v1/infer", post(infer))
        .fallback(fallback)
        .with_state(Arc::new(ModelState { model, descriptor })))
}
