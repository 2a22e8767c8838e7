//! HTTP extraction service: `POST /extract` and `GET /health`.

use std::sync::Arc;

use axum::body::Bytes;
use axum::extract::{DefaultBodyLimit, State};
use axum::http::StatusCode;
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use serde::Deserialize;
use serde_json::{json, Value};
use sha2::{Digest, Sha256};

use schemex::{
    run_schema_with, DecodeOptions, ExtractError, Model, ModelError, PromptError, Schema, SchemaDoc, SchemaError,
};

/// Default limit on the `text` field, in bytes.
pub const DEFAULT_MAX_TEXT_BYTES: usize = 64 * 1024;

pub struct AppState {
    pub model: Model,
    pub model_id: String,
    pub max_text_bytes: usize,
}

impl AppState {
    /// State for a model whose file contents were `file_bytes`.
    pub fn new(model: Model, file_bytes: &[u8]) -> Self {
        AppState {
            model,
            model_id: model_id(file_bytes),
            max_text_bytes: DEFAULT_MAX_TEXT_BYTES,
        }
    }
}

/// Hex SHA-256 of a model file.
pub fn model_id(file_bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(file_bytes))
}

#[derive(Debug, Deserialize)]
#[serde(deny_unknown_fields)]
struct ExtractRequest {
    schema: SchemaDoc,
    text: String,
    #[serde(default)]
    options: RequestOptions,
}

#[derive(Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
struct RequestOptions {
    threshold: Option<f64>,
    max_len: Option<usize>,
}

fn error(status: StatusCode, kind: &str, message: impl Into<String>, extra: Value) -> Response {
    let mut body = json!({ "error": kind, "message": message.into() });
    if let (Value::Object(b), Value::Object(x)) = (&mut body, extra) {
        b.extend(x);
    }
    (status, Json(body)).into_response()
}

fn schema_error(e: SchemaError) -> Response {
    let violations = match &e {
        SchemaError::Invalid(v) => json!(v),
        _ => json!([]),
    };
    error(
        StatusCode::BAD_REQUEST,
        "SchemaInvalid",
        e.to_string(),
        json!({ "violations": violations }),
    )
}

fn extract_error(e: ExtractError) -> Response {
    match e {
        ExtractError::SchemaInvalid(v) => schema_error(SchemaError::Invalid(v)),
        ExtractError::Prompt(PromptError::ContextOverflow { needed, max_len }) => error(
            StatusCode::UNPROCESSABLE_ENTITY,
            "ContextOverflow",
            format!("prompt needs {needed} tokens but the limit is {max_len}"),
            json!({ "needed": needed, "max_len": max_len }),
        ),
        ExtractError::Model(ModelError::SequenceTooLong { len, max }) => error(
            StatusCode::UNPROCESSABLE_ENTITY,
            "ContextOverflow",
            format!("sequence of {len} tokens exceeds {max}"),
            json!({ "needed": len, "max_len": max }),
        ),
        ExtractError::Prompt(p) => error(StatusCode::BAD_REQUEST, "SchemaInvalid", p.to_string(), json!({})),
        ExtractError::Model(m) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            "InternalError",
            m.to_string(),
            json!({}),
        ),
    }
}

async fn extract(State(state): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: ExtractRequest = match serde_json::from_slice(&body) {
        Ok(r) => r,
        Err(e) => {
            return error(
                StatusCode::BAD_REQUEST,
                "ParseError",
                e.to_string(),
                json!({ "line": e.line(), "column": e.column() }),
            )
        }
    };
    if req.text.len() > state.max_text_bytes {
        return error(
            StatusCode::PAYLOAD_TOO_LARGE,
            "TextTooLarge",
            format!(
                "text is {} bytes; the limit is {}",
                req.text.len(),
                state.max_text_bytes
            ),
            json!({ "limit": state.max_text_bytes }),
        );
    }
    let schema = match Schema::from_doc(req.schema) {
        Ok(s) => s,
        Err(e) => return schema_error(e),
    };
    let mut opts = DecodeOptions::default();
    if let Some(t) = req.options.threshold {
        if !(0.0..=1.0).contains(&t) {
            return error(
                StatusCode::BAD_REQUEST,
                "ParseError",
                "options.threshold must lie in [0, 1]",
                json!({}),
            );
        }
        opts.threshold = t;
    }
    if let Some(m) = req.options.max_len {
        opts.max_len = m;
    }
    let worker = Arc::clone(&state);
    let joined = tokio::task::spawn_blocking(move || run_schema_with(&worker.model, &schema, &req.text, &opts)).await;
    match joined {
        Ok(Ok(result)) => (StatusCode::OK, Json(result)).into_response(),
        Ok(Err(e)) => extract_error(e),
        Err(e) => error(
            StatusCode::INTERNAL_SERVER_ERROR,
            "InternalError",
            e.to_string(),
            json!({}),
        ),
    }
}

async fn health(State(state): State<Arc<AppState>>) -> Json<Value> {
    let c = &state.model.config;
    Json(json!({
        "status": "ok",
        "model_id": state.model_id,
        "config": {
            "vocab_size": c.vocab_size,
            "hidden_dim": c.hidden_dim,
            "layers": c.layers,
            "heads": c.heads,
            "ffn_dim": c.ffn_dim,
            "max_positions": c.max_positions,
            "max_span_width": c.max_span_width,
            "max_count": c.max_count,
            "parameters": state.model.params.num_parameters(),
        },
        "max_text_bytes": state.max_text_bytes,
        "format_version": schemex::decode::FORMAT_VERSION,
    }))
}

pub fn router(state: Arc<AppState>) -> Router {
    // room for a full-size text plus a large schema; bigger bodies get 413
    let body_limit = state.max_text_bytes * 2 + 1024 * 1024;
    Router::new()
        .route("/extract", post(extract))
        .route("/health", get(health))
        .layer(DefaultBodyLimit::max(body_limit))
        .with_state(state)
}
