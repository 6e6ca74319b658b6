use std::path::Path;

use ae_lab::dataset::{self, make_synthetic};
use ae_lab::error::Result;
use ae_lab::eval::{export_reconstructions, MosReport, NextItem, Reconstructor, SessionConfig};
use ae_lab::model::Family;
use ae_lab::tensor::Tensor;
use ae_lab_service::{router, AppState};
use axum::body::Body;
use axum::http::{header, Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn identity(x: &Tensor) -> Result<Tensor> {
    Ok(x.clone())
}

fn gray(x: &Tensor) -> Result<Tensor> {
    Ok(Tensor::full(x.shape(), 0.5))
}

struct Fixture {
    _dirs: Vec<tempfile::TempDir>,
    export: std::path::PathBuf,
    log: std::path::PathBuf,
}

fn fixture() -> Fixture {
    let data = tempfile::tempdir().unwrap();
    make_synthetic(data.path(), 2, 2, 8, 1).unwrap();
    let index = dataset::scan(data.path(), None).unwrap();
    let out = tempfile::tempdir().unwrap();
    let models: [(&str, &dyn Reconstructor); 3] =
        [("feedforward", &gray), ("convolutional", &identity), ("diffusion", &identity)];
    export_reconstructions(&models, &index, &[0, 2], (8, 8), out.path(), 3).unwrap();
    Fixture {
        export: out.path().to_path_buf(),
        log: out.path().join("ratings.jsonl"),
        _dirs: vec![data, out],
    }
}

fn app(f: &Fixture, ui: Option<&Path>) -> Router {
    let state = AppState::from_export(&f.export, &f.log, SessionConfig::default()).unwrap();
    router(state, ui)
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
    let mut req = Request::builder().method(method).uri(uri);
    let body = match body {
        Some(v) => {
            req = req.header(header::CONTENT_TYPE, "application/json");
            Body::from(serde_json::to_vec(&v).unwrap())
        }
        None => Body::empty(),
    };
    let response = app.clone().oneshot(req.body(body).unwrap()).await.unwrap();
    let status = response.status();
    (status, response.into_body().collect().await.unwrap().to_bytes().to_vec())
}

async fn session(app: &Router, body: Option<Value>) -> String {
    let (status, bytes) = call(app, "POST", "/api/session", body).await;
    assert_eq!(status, StatusCode::OK);
    let v: Value = serde_json::from_slice(&bytes).unwrap();
    v["session_id"].as_str().unwrap().to_string()
}

fn mentions_model(bytes: &[u8], include_short: bool) -> Option<&'static str> {
    Family::ALL
        .iter()
        .flat_map(|f| [f.id(), f.short()])
        .filter(|id| include_short || id.len() >= 5)
        .find(|id| bytes.windows(id.len()).any(|w| w.eq_ignore_ascii_case(id.as_bytes())))
}

#[tokio::test]
async fn a_full_session_rates_every_item_once() {
    let f = fixture();
    let app = app(&f, None);
    let sid = session(&app, Some(json!({"seed": 4}))).await;
    let mut items = Vec::new();
    loop {
        let (status, bytes) = call(&app, "GET", &format!("/api/next?session={sid}"), None).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(mentions_model(&bytes, true), None);
        match serde_json::from_slice::<NextItem>(&bytes).unwrap() {
            NextItem::Item {
                item_id,
                image_url,
                original_url,
            } => {
                for url in [Some(image_url), original_url].into_iter().flatten() {
                    let (status, png) = call(&app, "GET", &url, None).await;
                    assert_eq!(status, StatusCode::OK);
                    assert!(png.starts_with(b"\x89PNG"));
                    assert_eq!(mentions_model(&png, false), None);
                }
                items.push(item_id);
            }
            NextItem::Exhausted { exhausted } => {
                assert!(exhausted);
                break;
            }
        }
    }
    assert_eq!(items.len(), 6);
    for (k, item) in items.iter().enumerate() {
        let body = json!({"session_id": sid, "item_id": item, "rating": k % 5 + 1});
        let (status, bytes) = call(&app, "POST", "/api/rating", Some(body)).await;
        assert_eq!(status, StatusCode::CREATED, "{}", String::from_utf8_lossy(&bytes));
        assert_eq!(mentions_model(&bytes, true), None);
    }
    let lines = std::fs::read_to_string(&f.log).unwrap();
    assert_eq!(lines.lines().count(), 6);

    let (status, bytes) = call(&app, "GET", "/api/report", None).await;
    assert_eq!(status, StatusCode::OK);
    let report: MosReport = serde_json::from_slice(&bytes).unwrap();
    assert_eq!(report.models.values().map(|m| m.count).sum::<u64>(), 6);
    assert_eq!(report.models.len(), 3);
}

#[tokio::test]
async fn errors_map_to_status_codes() {
    let f = fixture();
    let app = app(&f, None);
    let sid = session(&app, None).await;
    let (_, bytes) = call(&app, "GET", &format!("/api/next?session={sid}"), None).await;
    let Ok(NextItem::Item { item_id, .. }) = serde_json::from_slice::<NextItem>(&bytes) else {
        panic!("expected an item")
    };

    let rate = |rating: Value, item: &str| json!({"session_id": sid, "item_id": item, "rating": rating});
    for bad in [json!(0), json!(6), json!(-3)] {
        let (status, _) = call(&app, "POST", "/api/rating", Some(rate(bad, &item_id))).await;
        assert_eq!(status, StatusCode::UNPROCESSABLE_ENTITY);
    }
    let (status, _) = call(&app, "POST", "/api/rating", Some(rate(json!(3), &item_id))).await;
    assert_eq!(status, StatusCode::CREATED);
    let (status, body) = call(&app, "POST", "/api/rating", Some(rate(json!(4), &item_id))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    let err: Value = serde_json::from_slice(&body).unwrap();
    assert!(err["error"].as_str().unwrap().contains("already rated"));

    let (status, _) = call(&app, "POST", "/api/rating", Some(rate(json!(3), "unknownitem0"))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/api/next?session=nosuchsession", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/api/next", None).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let (status, _) = call(&app, "GET", "/img/..%2Fmanifest.json", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/img/zzzzzzzzzzzz.png", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    let (status, _) = call(&app, "GET", "/manifest.json", None).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
}

#[tokio::test]
async fn restart_replays_the_log() {
    let f = fixture();
    let first = app(&f, None);
    let sid = session(&first, None).await;
    let (_, bytes) = call(&first, "GET", &format!("/api/next?session={sid}"), None).await;
    let Ok(NextItem::Item { item_id, .. }) = serde_json::from_slice::<NextItem>(&bytes) else {
        panic!("expected an item")
    };
    let body = json!({"session_id": sid, "item_id": item_id, "rating": 5});
    assert_eq!(call(&first, "POST", "/api/rating", Some(body)).await.0, StatusCode::CREATED);
    let (_, before) = call(&first, "GET", "/api/report", None).await;
    drop(first);

    let second = app(&f, None);
    let (_, after) = call(&second, "GET", "/api/report", None).await;
    assert_eq!(before, after);
    let report: MosReport = serde_json::from_slice(&after).unwrap();
    assert_eq!(report.models.values().map(|m| m.count).sum::<u64>(), 1);
}

#[tokio::test]
async fn ui_directory_is_served_as_fallback() {
    let f = fixture();
    let ui = tempfile::tempdir().unwrap();
    std::fs::write(ui.path().join("index.html"), "<h1>rate</h1>").unwrap();
    let app = app(&f, Some(ui.path()));
    let (status, body) = call(&app, "GET", "/", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(body, b"<h1>rate</h1>");
    let (status, _) = call(&app, "GET", "/api/report", None).await;
    assert_eq!(status, StatusCode::OK);
}
