use std::sync::Arc;

use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use schemex::training::{build_training_vocab, fit, generate_synthetic, TrainConfig};
use schemex::{Model, ModelConfig};
use schemex_cli::service::{model_id, router, AppState};

fn state_for(model: Model) -> Arc<AppState> {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("m.bin");
    model.save(&path).unwrap();
    let bytes = std::fs::read(&path).unwrap();
    Arc::new(AppState::new(model, &bytes))
}

fn untrained() -> Arc<AppState> {
    let corpus = generate_synthetic(1, 40);
    state_for(Model::new(ModelConfig::desk(0), build_training_vocab(&corpus)).unwrap())
}

async fn call(app: &Router, req: Request<Body>) -> (StatusCode, Value) {
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

fn post(body: impl Into<Body>) -> Request<Body> {
    Request::post("/extract")
        .header("content-type", "application/json")
        .body(body.into())
        .unwrap()
}

fn entity_request(text: &str) -> String {
    json!({
        "schema": { "version": 1, "entities": { "person": null, "location": null } },
        "text": text,
    })
    .to_string()
}

#[tokio::test]
async fn health_reports_model_id() {
    let state = untrained();
    let id = state.model_id.clone();
    let app = router(state);
    let (status, body) = call(&app, Request::get("/health").body(Body::empty()).unwrap()).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body["status"], "ok");
    assert_eq!(body["model_id"], id);
    assert_eq!(id.len(), 64);
    assert_eq!(body["config"]["hidden_dim"], 64);
}

#[test]
fn model_id_is_content_hash() {
    assert_eq!(
        model_id(b""),
        "e3b0c44298fc1c149afbf4c8996fb92427ae41e4649b934ca495991b7852b855"
    );
}

#[tokio::test]
async fn extract_returns_one_pass_result() {
    let app = router(untrained());
    let (status, body) = call(&app, post(entity_request("John works in Paris"))).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    assert_eq!(body["format_version"], 1);
    assert_eq!(body["encoder_passes"], 1);
    assert!(body["entities"]["person"].is_array());
    assert!(body["entities"]["location"].is_array());
}

#[tokio::test]
async fn identical_requests_give_identical_responses() {
    let app = router(untrained());
    let req = json!({
        "schema": {
            "version": 1,
            "entities": { "person": null },
            "classifications": [{ "task": "sentiment", "labels": { "positive": null, "negative": null } }],
            "structures": [{ "name": "product", "fields": ["name", "price::list"] }]
        },
        "text": "Steve Jobs loved the iPhone. It costs $999.",
        "options": { "threshold": 0.3 }
    })
    .to_string();
    let a = call(&app, post(req.clone())).await;
    let b = call(&app, post(req)).await;
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a, b);
}

#[tokio::test]
async fn malformed_json_reports_position() {
    let app = router(untrained());
    let (status, body) = call(&app, post("{\n  \"text\": ")).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "ParseError");
    assert_eq!(body["line"], 2);
    assert!(body["column"].as_u64().unwrap() > 0);

    let (status, body) = call(&app, post(r#"{"schema":{"version":1},"text":"x","extra":1}"#)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "ParseError");
}

#[tokio::test]
async fn invalid_schema_lists_violations() {
    let app = router(untrained());
    let req = json!({
        "schema": {
            "version": 1,
            "classifications": [{ "task": "sentiment", "labels": { "positive": null } }],
            "structures": [{ "name": "p", "fields": ["a", "price::[x]::str"] }]
        },
        "text": "hello"
    });
    let (status, body) = call(&app, post(req.to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "SchemaInvalid");
    let paths: Vec<&str> = body["violations"]
        .as_array()
        .unwrap()
        .iter()
        .map(|v| v["path"].as_str().unwrap())
        .collect();
    assert!(paths.contains(&"classifications[0]"), "{paths:?}");
    assert!(paths.contains(&"structures[0].fields[1]"), "{paths:?}");

    let empty = json!({ "schema": { "version": 1 }, "text": "hello" });
    let (status, body) = call(&app, post(empty.to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(body["error"], "SchemaInvalid");
}

#[tokio::test]
async fn bad_threshold_is_rejected() {
    let app = router(untrained());
    let req = json!({
        "schema": { "version": 1, "entities": { "person": null } },
        "text": "John",
        "options": { "threshold": 1.5 }
    });
    let (status, _) = call(&app, post(req.to_string())).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
}

#[tokio::test]
async fn oversized_text_is_413() {
    let app = router(untrained());
    let text = "a".repeat(64 * 1024 + 1);
    let (status, body) = call(&app, post(entity_request(&text))).await;
    assert_eq!(status, StatusCode::PAYLOAD_TOO_LARGE);
    assert_eq!(body["error"], "TextTooLarge");
}

#[tokio::test]
async fn context_overflow_is_422() {
    let app = router(untrained());
    let text = "word ".repeat(600);
    let (status, body) = call(&app, post(entity_request(&text))).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY, "{body}");
    assert_eq!(body["error"], "ContextOverflow");
    assert!(body["needed"].as_u64().unwrap() > body["max_len"].as_u64().unwrap());

    let req = json!({
        "schema": { "version": 1, "entities": { "person": null } },
        "text": "John works in Paris and Rome",
        "options": { "max_len": 8 }
    });
    let (status, _) = call(&app, post(req.to_string())).await;
    assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
}

#[tokio::test]
async fn trained_model_extracts_worked_example() {
    let corpus = generate_synthetic(1, 200);
    let (model, _) =
        tokio::task::spawn_blocking(move || fit(&corpus, ModelConfig::desk(0), &TrainConfig::default()).unwrap())
            .await
            .unwrap();
    let app = router(state_for(model));
    let req = json!({
        "schema": { "version": 1, "structures": [{ "name": "product", "fields": ["name", "price"] }] },
        "text": "iPhone costs $999. Galaxy is $899."
    });
    let (status, body) = call(&app, post(req.to_string())).await;
    assert_eq!(status, StatusCode::OK, "{body}");
    let instances = body["structures"]["product"].as_array().unwrap();
    assert_eq!(instances.len(), 2, "{body}");
    let names: Vec<&str> = instances
        .iter()
        .map(|i| i["name"]["text"].as_str().unwrap_or(""))
        .collect();
    assert!(names.contains(&"iPhone") && names.contains(&"Galaxy"), "{body}");
}
