mod common;

use std::sync::Arc;
use std::time::Duration;

use atelier_service::api::{router, AppState};
use axum::body::{to_bytes, Body};
use axum::http::{Request, StatusCode};
use axum::Router;
use serde_json::{json, Value};
use tower::ServiceExt;

use common::{stub_pipeline, StubEngine};

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>, Option<String>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header("content-type", "application/json");
            Body::from(v.to_string())
        }
        None => Body::empty(),
    };
    let resp = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = resp.status();
    let ctype = resp.headers().get("content-type").map(|v| v.to_str().unwrap().to_string());
    let bytes = to_bytes(resp.into_body(), usize::MAX).await.unwrap().to_vec();
    (status, bytes, ctype)
}

async fn call_json(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let (s, b, _) = call(app, method, uri, body).await;
    (s, serde_json::from_slice(&b).unwrap_or(Value::Null))
}

async fn wait_for(app: &Router, id: &str, state: &str) -> Value {
    for _ in 0..500 {
        let (_, j) = call_json(app, "GET", &format!("/jobs/{id}"), None).await;
        if j["state"] == state {
            return j;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("job {id} never reached {state}");
}

fn app(dir: &std::path::Path, engine: StubEngine) -> Router {
    router(AppState::new(Arc::new(stub_pipeline(dir, engine)), 2, 2))
}

fn assert_envelope(v: &Value, code: &str) {
    assert_eq!(v["error"]["code"], code, "{v}");
    assert!(v["error"]["message"].as_str().is_some_and(|m| !m.is_empty()));
}

#[tokio::test(flavor = "multi_thread")]
async fn job_lifecycle_over_http() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), StubEngine::new());

    let (s, job) = call_json(&app, "POST", "/jobs", Some(json!({"text": "a red square", "seed": 3}))).await;
    assert_eq!(s, StatusCode::CREATED);
    let id = job["id"].as_str().unwrap().to_string();
    assert!(["queued", "generating", "classifying", "awaiting_style_choice"].contains(&job["state"].as_str().unwrap()));

    let parked = wait_for(&app, &id, "awaiting_style_choice").await;
    assert_eq!(parked["actions"], json!({"choose": true, "reshuffle": false, "add": false}));
    assert_eq!(parked["genre"]["label"], "landscape");
    assert_eq!(parked["recommendation"].as_array().unwrap().len(), 3);

    let (s, e) = call_json(&app, "POST", &format!("/jobs/{id}/reshuffle"), None).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_envelope(&e, "conflict");

    let (s, e) = call_json(&app, "POST", &format!("/jobs/{id}/style"), Some(json!({"style": "pop-art"}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_envelope(&e, "invalid_argument");
    assert_eq!(e["error"]["valid"], json!(["impressionism", "cubism", "minimalism"]));

    let (s, e) = call_json(
        &app,
        "POST",
        &format!("/jobs/{id}/style"),
        Some(json!({"style": "cubism", "mode": "sideways"})),
    )
    .await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_eq!(e["error"]["valid"], json!(["feedforward", "optimize"]));

    let (s, done) = call_json(&app, "POST", &format!("/jobs/{id}/style"), Some(json!({"style": "cubism"}))).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(done["state"], "done");
    assert_eq!(done["actions"], json!({"choose": false, "reshuffle": true, "add": true}));
    let (s, chained) = call_json(
        &app,
        "POST",
        &format!("/jobs/{id}/style"),
        Some(json!({"style": "impressionism", "mode": "optimize", "iters": 5})),
    )
    .await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(chained["stylized"].as_array().unwrap().len(), 2);
    assert_eq!(chained["picks"][1]["mode"], json!({"kind": "optimize", "iters": 5}));

    let (s, r) = call_json(&app, "POST", &format!("/jobs/{id}/reshuffle"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(r["picks"][1]["seed_history"].as_array().unwrap().len(), 2);
    assert_eq!(r["stylized"][0], chained["stylized"][0]);

    let hash = r["stylized"][1].as_str().unwrap();
    let (s, png, ctype) = call(&app, "GET", &format!("/artifacts/{hash}"), None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(ctype.as_deref(), Some("image/png"));
    assert!(png.starts_with(b"\x89PNG"));
    assert_eq!(atelier_service::artifacts::content_hash(&png), hash);
    let (s, png2, _) = call(&app, "GET", &format!("/artifacts/{hash}.png"), None).await;
    assert_eq!((s, png2), (StatusCode::OK, png));
}

#[tokio::test(flavor = "multi_thread")]
async fn auto_jobs_finish_and_failures_are_reported() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), StubEngine::new());
    let (_, job) = call_json(&app, "POST", "/jobs", Some(json!({"text": "a red square", "auto": true}))).await;
    let done = wait_for(&app, job["id"].as_str().unwrap(), "done").await;
    assert_eq!(done["chosen_styles"], json!(["impressionism"]));

    let dir = tempfile::tempdir().unwrap();
    let app = self::app(
        dir.path(),
        StubEngine {
            fail_classify: true,
            ..StubEngine::new()
        },
    );
    let (_, job) = call_json(&app, "POST", "/jobs", Some(json!({"text": "a red square"}))).await;
    let failed = wait_for(&app, job["id"].as_str().unwrap(), "failed").await;
    assert_eq!(failed["error"]["stage"], "classifying");
    assert_eq!(failed["actions"], json!({"choose": false, "reshuffle": false, "add": false}));
}

#[tokio::test(flavor = "multi_thread")]
async fn listing_styles_and_errors() {
    let dir = tempfile::tempdir().unwrap();
    let app = app(dir.path(), StubEngine::new());
    let mut ids = Vec::new();
    for seed in 0..5 {
        let (_, j) = call_json(&app, "POST", "/jobs", Some(json!({"text": "a red square", "seed": seed}))).await;
        ids.push(j["id"].as_str().unwrap().to_string());
    }
    let (s, page) = call_json(&app, "GET", "/jobs", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        (page["per_page"].as_u64(), page["total"].as_u64(), page["total_pages"].as_u64()),
        (Some(2), Some(5), Some(3))
    );
    let mut seen = Vec::new();
    for p in 1..=3 {
        let (_, page) = call_json(&app, "GET", &format!("/jobs?page={p}&per_page=2"), None).await;
        seen.extend(
            page["jobs"]
                .as_array()
                .unwrap()
                .iter()
                .map(|j| j["id"].as_str().unwrap().to_string()),
        );
        assert!(page["jobs"].as_array().unwrap().iter().all(|j| j["actions"].is_object()));
    }
    assert_eq!(seen, ids);
    let (s, e) = call_json(&app, "GET", "/jobs?page=zero", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_envelope(&e, "invalid_argument");

    let (s, st) = call_json(&app, "GET", "/styles?genre=landscape&k=2", None).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(
        st,
        json!({"genre": "landscape", "styles": [{"style": "impressionism", "count": 3}, {"style": "cubism", "count": 2}]})
    );
    let (s, e) = call_json(&app, "GET", "/styles", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_envelope(&e, "invalid_argument");
    let (s, e) = call_json(&app, "GET", "/styles?genre=nowhere", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_envelope(&e, "not_found");

    for uri in [
        "/jobs/job-424242",
        "/artifacts/0000000000000000000000000000000000000000000000000000000000000000",
    ] {
        let (s, e) = call_json(&app, "GET", uri, None).await;
        assert_eq!(s, StatusCode::NOT_FOUND, "{uri}");
        assert_envelope(&e, "not_found");
    }
    let (s, e) = call_json(&app, "GET", "/artifacts/not-a-hash", None).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_envelope(&e, "invalid_argument");
    let (s, e) = call_json(&app, "POST", "/jobs/job-424242/reshuffle", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    assert_envelope(&e, "not_found");

    let (s, e) = call_json(&app, "POST", "/jobs", Some(json!({"text": ""}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_envelope(&e, "invalid_argument");
    let (s, e) = call_json(&app, "POST", "/jobs", Some(json!({"seed": 1}))).await;
    assert_eq!(s, StatusCode::BAD_REQUEST);
    assert_envelope(&e, "invalid_argument");
}

#[tokio::test(flavor = "multi_thread")]
async fn static_files() {
    let dir = tempfile::tempdir().unwrap();
    let ui = dir.path().join("ui");
    std::fs::create_dir_all(ui.join("assets")).unwrap();
    std::fs::write(ui.join("index.html"), "<html></html>").unwrap();
    std::fs::write(ui.join("assets/app.js"), "1").unwrap();
    let mut st = AppState::new(Arc::new(stub_pipeline(dir.path(), StubEngine::new())), 1, 20);
    st.static_dir = Some(ui);
    let app = router(st);
    let (s, b, c) = call(&app, "GET", "/ui", None).await;
    assert_eq!(
        (s, b, c.as_deref()),
        (StatusCode::OK, b"<html></html>".to_vec(), Some("text/html; charset=utf-8"))
    );
    let (s, _, c) = call(&app, "GET", "/ui/assets/app.js", None).await;
    assert_eq!((s, c.as_deref()), (StatusCode::OK, Some("text/javascript")));
    let (s, _, _) = call(&app, "GET", "/ui/missing.css", None).await;
    assert_eq!(s, StatusCode::NOT_FOUND);
    let (s, _, _) = call(&app, "GET", "/ui/assets/../../jobs/index.json", None).await;
    assert_ne!(s, StatusCode::OK);
}
