#![allow(dead_code)]

use std::collections::BTreeMap;
use std::path::Path;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Method, Request, StatusCode};
use axum::Router;
use semnav::api::encode_raster;
use semnav_core::synthetic::FloodBenchmark;
use serde_json::{json, Value};
use tower::ServiceExt;

pub async fn call(app: &Router, method: Method, uri: &str, body: Vec<u8>) -> (StatusCode, Vec<u8>) {
    let request = Request::builder().method(method).uri(uri).body(Body::from(body)).unwrap();
    let response = app.clone().oneshot(request).await.unwrap();
    let status = response.status();
    let bytes = axum::body::to_bytes(response.into_body(), usize::MAX).await.unwrap();
    (status, bytes.to_vec())
}

pub async fn call_json(app: &Router, method: Method, uri: &str, body: Value) -> (StatusCode, Value) {
    let bytes = if body.is_null() { Vec::new() } else { serde_json::to_vec(&body).unwrap() };
    let (status, out) = call(app, method, uri, bytes).await;
    let value = if out.is_empty() { Value::Null } else { serde_json::from_slice(&out).unwrap() };
    (status, value)
}

/// Polls a job until it reaches a terminal state.
pub async fn wait_job(app: &Router, job: &str) -> Value {
    for _ in 0..60_000 {
        let (status, record) = call_json(app, Method::GET, &format!("/jobs/{job}"), Value::Null).await;
        assert_eq!(status, StatusCode::OK);
        if record["status"] == "done" || record["status"] == "failed" {
            return record;
        }
        tokio::time::sleep(Duration::from_millis(10)).await;
    }
    panic!("job {job} did not finish");
}

pub fn create_body(bench: &FloodBenchmark) -> Value {
    json!({
        "image": encode_raster(&bench.scene.image.save()),
        "palette": bench.palette,
    })
}

pub fn support_body(bench: &FloodBenchmark, name: &str, color: [u8; 3], training: Value) -> Value {
    json!({
        "name": name,
        "color": color,
        "supports": [{
            "image": encode_raster(&bench.support.image.save()),
            "mask": encode_raster(&bench.support_mask().save()),
        }],
        "training": training,
    })
}

/// A head training request small enough for quick tests.
pub fn quick_training() -> Value {
    json!({
        "scenes": 24,
        "appearances": 8,
        "seed": 3,
        "config": {
            "sgd": {"learning_rate": 0.05, "epochs": 60, "batch_pixels": 128, "seed": 3, "l2": 1e-5},
            "k": 1,
            "hidden_layers": [16],
            "balanced": true
        }
    })
}

/// Relative path to file bytes for every file below `root`.
pub fn snapshot_dir(root: &Path) -> BTreeMap<String, Vec<u8>> {
    let mut out = BTreeMap::new();
    let mut stack = vec![root.to_path_buf()];
    while let Some(dir) = stack.pop() {
        for entry in std::fs::read_dir(&dir).unwrap() {
            let path = entry.unwrap().path();
            if path.is_dir() {
                stack.push(path);
            } else {
                let rel = path.strip_prefix(root).unwrap().to_string_lossy().into_owned();
                out.insert(rel, std::fs::read(&path).unwrap());
            }
        }
    }
    out
}
