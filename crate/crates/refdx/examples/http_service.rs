//! Drives the HTTP API in-process. `refdx serve` exposes the same router
//! on a socket.

use std::sync::Arc;

use axum::body::Body;
use axum::http::Request;
use http_body_util::BodyExt;
use refdx::demo::{write_demo_bundle, CONFIG, QUERIES, SITE};
use refdx::{api, Engine, EngineConfig};
use refdx_core::manifest::read_manifest;
use serde_json::{json, Value};
use tower::ServiceExt;

async fn call(engine: &Arc<Engine>, method: &str, uri: &str, body: Value) -> Value {
    let req = Request::builder()
        .method(method)
        .uri(uri)
        .header("content-type", "application/json")
        .body(if body.is_null() { Body::empty() } else { Body::from(body.to_string()) })
        .unwrap();
    let resp = api::router(engine.clone()).oneshot(req).await.unwrap();
    let status = resp.status();
    let v: Value = serde_json::from_slice(&resp.into_body().collect().await.unwrap().to_bytes()).unwrap();
    println!("{method} {uri} -> {status}");
    v
}

#[tokio::main]
async fn main() -> Result<(), Box<dyn std::error::Error>> {
    let dir = tempfile::tempdir()?;
    write_demo_bundle(dir.path(), 7)?;
    let engine = Arc::new(Engine::open(EngineConfig::load(dir.path().join(CONFIG))?)?);
    let query = read_manifest(dir.path().join(QUERIES))?.remove(0).vector;

    let health = call(&engine, "GET", "/v1/health", Value::Null).await;
    println!("  generation {} with {} items", health["generation"], health["items"]);

    let d = call(&engine, "POST", "/v1/diagnose", json!({"vector": query, "n": 3})).await;
    println!("  {}", d["ranked_labels"]);

    let e = call(&engine, "POST", "/v1/diagnose/confident", json!({"vector": query})).await;
    println!("  {} {}", e["code"], e["message"]);

    let scored = json!([{"cscore": 0.8, "correct": true}, {"cscore": 0.6, "correct": true},
                        {"cscore": 0.7, "correct": false}, {"cscore": 0.3, "correct": false}]);
    let c = call(&engine, "POST", "/v1/calibrate", json!({"scored": scored})).await;
    println!("  theta* {}", c["theta_star"]);

    let d = call(&engine, "POST", "/v1/diagnose/confident", json!({"vector": query})).await;
    println!("  {} cscore {} reliable {}", d["final_label"], d["cscore"], d["reliable"]);

    let items = read_manifest(dir.path().join(SITE))?;
    let a = call(&engine, "POST", "/v1/libraries/augment", json!({"site_id": "site-a", "items": items})).await;
    println!("  generation {} -> {}, {} items", a["old_generation"], a["new_generation"], a["items"]);

    let m = call(&engine, "GET", "/v1/metrics", Value::Null).await;
    println!("  top-1 on the evaluation manifest: {}", m["evaluation"]["topk"]["1"]);
    Ok(())
}
