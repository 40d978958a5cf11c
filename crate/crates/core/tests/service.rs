mod common;

use std::net::SocketAddr;

use serde_json::{json, Value};

use roboadvisor::io::{write_ratings, write_returns};
use roboadvisor::service::{self, ApiConfig};
use roboadvisor::sim::simulate_rating_matrix;

struct Server {
    base: String,
    client: reqwest::Client,
    _dir: tempfile::TempDir,
}

async fn start(with_ratings: bool, cors: &[&str]) -> Server {
    let dir = tempfile::tempdir().unwrap();
    let mut cfg = ApiConfig::new(common::data("items10.json"));
    cfg.bind = "127.0.0.1:0".into();
    cfg.data_dir = dir.path().join("sessions");
    cfg.default_k = 3;
    cfg.cors_origins = cors.iter().map(|s| s.to_string()).collect();
    if with_ratings {
        let ratings = dir.path().join("ratings.csv");
        write_ratings(&ratings, &simulate_rating_matrix(&common::items10(), 60, 2).unwrap()).unwrap();
        cfg.ratings = Some(ratings);
    }
    let returns = dir.path().join("returns.csv");
    write_returns(&returns, &common::synthetic_panel(3, 120, 2)).unwrap();
    cfg.returns = Some(returns);
    let (addr, fut): (SocketAddr, _) = service::bind(cfg).await.unwrap();
    tokio::spawn(fut);
    Server { base: format!("http://{addr}/v1"), client: reqwest::Client::new(), _dir: dir }
}

impl Server {
    async fn post(&self, path: &str, body: Value) -> (u16, Value) {
        let r = self.client.post(format!("{}{path}", self.base)).json(&body).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    async fn get(&self, path: &str) -> (u16, Value) {
        let r = self.client.get(format!("{}{path}", self.base)).send().await.unwrap();
        let status = r.status().as_u16();
        (status, r.json().await.unwrap_or(Value::Null))
    }

    /// Creates a random session and answers every question with no preference.
    async fn answered_session(&self) -> String {
        let (st, created) = self.post("/sessions", json!({ "method": "random", "K": 3 })).await;
        assert_eq!(st, 201, "{created}");
        let id = created["session_id"].as_str().unwrap().to_string();
        let answers: Vec<Value> =
            (0..3).map(|i| json!({ "pair_index": i, "choice": "none" })).collect();
        let (st, body) = self.post(&format!("/sessions/{id}/answers"), json!({ "answers": answers })).await;
        assert_eq!(st, 200, "{body}");
        assert_eq!(body["status"], "answered");
        id
    }
}

#[tokio::test(flavor = "multi_thread")]
async fn session_creation_errors() {
    let s = start(false, &[]).await;
    let (st, body) = s.post("/sessions", json!({ "K": 0, "method": "random" })).await;
    assert_eq!(st, 422);
    assert!(body["message"].is_string());
    let (st, _) = s.post("/sessions", json!({ "item_set": "nope", "method": "random" })).await;
    assert_eq!(st, 404);
    let (st, _) = s.post("/sessions", json!({ "method": "spq" })).await;
    assert_eq!(st, 409);
    let (st, _) = s.post("/sessions", json!({ "method": "random", "K": 46 })).await;
    assert_eq!(st, 422);
    let (st, body) = s.post("/sessions", json!({ "method": "random" })).await;
    assert_eq!(st, 201);
    assert_eq!(body["questions"].as_array().unwrap().len(), 3);
    assert_eq!(body["status"], "questioning");
    let (st, _) = s.get("/sessions/does-not-exist").await;
    assert_eq!(st, 404);
}

#[tokio::test(flavor = "multi_thread")]
async fn spq_sessions_use_the_ratings() {
    let s = start(true, &[]).await;
    let (st, a) = s.post("/sessions", json!({ "method": "spq", "K": 4 })).await;
    assert_eq!(st, 201, "{a}");
    let (_, b) = s.post("/sessions", json!({ "method": "spq", "K": 4 })).await;
    assert_eq!(a["questions"], b["questions"]);
    assert_ne!(a["session_id"], b["session_id"]);
}

#[tokio::test(flavor = "multi_thread")]
async fn answer_validation_and_state() {
    let s = start(false, &[]).await;
    let (_, created) = s.post("/sessions", json!({ "method": "random", "K": 3 })).await;
    let id = created["session_id"].as_str().unwrap();
    let path = format!("/sessions/{id}/answers");
    let (st, _) = s.post(&format!("/sessions/{id}/elicit"), json!({})).await;
    assert_eq!(st, 409);
    let (st, _) = s.post(&path, json!({ "answers": [{ "pair_index": 3, "choice": "first" }] })).await;
    assert_eq!(st, 422);
    let (st, _) = s
        .post(&path, json!({ "answers": [{ "pair_index": 0, "choice": "first" }, { "pair_index": 0, "choice": "second" }] }))
        .await;
    assert_eq!(st, 422);
    let (st, body) = s.post(&path, json!({ "answers": [{ "pair_index": 0, "choice": "first" }] })).await;
    assert_eq!(st, 200);
    assert_eq!((body["answered"].as_u64(), body["remaining"].as_u64()), (Some(1), Some(2)));
    let (st, _) = s.post(&path, json!({ "answers": [{ "pair_index": 0, "choice": "second" }] })).await;
    assert_eq!(st, 422);
    let (st, body) = s
        .post(&path, json!({ "answers": [{ "pair_index": 1, "choice": "none" }, { "pair_index": 2, "choice": "none" }] }))
        .await;
    assert_eq!(st, 200);
    assert_eq!(body["status"], "answered");
    let (st, _) = s.post(&path, json!({ "answers": [{ "pair_index": 1, "choice": "none" }] })).await;
    assert_eq!(st, 409);
    let (st, session) = s.get(&format!("/sessions/{id}")).await;
    assert_eq!(st, 200);
    assert_eq!(session["answers"].as_array().unwrap().len(), 3);
}

#[tokio::test(flavor = "multi_thread")]
async fn portfolio_errors() {
    let s = start(false, &[]).await;
    let id = s.answered_session().await;
    let (st, _) = s.post(&format!("/sessions/{id}/portfolio"), json!({ "budget": 1000.0 })).await;
    assert_eq!(st, 409);
    let (st, elicited) = s.post(&format!("/sessions/{id}/elicit"), json!({})).await;
    assert_eq!(st, 200, "{elicited}");
    assert_eq!(elicited["status"], "elicited");
    for e in ["pessimistic", "optimistic", "neutral"] {
        assert!(elicited["utilities"][e]["alpha"].is_array(), "{e}");
    }
    let path = format!("/sessions/{id}/portfolio");
    let (st, _) = s.post(&path, json!({ "budget": 0.0 })).await;
    assert_eq!(st, 422);
    let (st, _) = s.post(&path, json!({ "budget": 1000.0, "caps": [1.0, 2.0] })).await;
    assert_eq!(st, 422);
    let (st, body) = s.post(&path, json!({ "budget": 2_000_000.0 })).await;
    assert_eq!(st, 422, "{body}");
    assert_eq!(body["code"], "domain");
    assert!(body["message"].as_str().unwrap().contains("b̄"), "{body}");
    let (st, body) = s.post(&path, json!({ "budget": 1000.0, "caps": 500.0, "estimator": "pessimistic" })).await;
    assert_eq!(st, 200, "{body}");
    let lines = body["allocation"].as_array().unwrap();
    assert_eq!(lines.len(), 4);
    let total: f64 = lines.iter().map(|l| l["amount"].as_f64().unwrap()).sum();
    assert!((total - 1000.0).abs() < 1e-6);
    assert!(lines[1..].iter().all(|l| l["amount"].as_f64().unwrap() <= 500.0 + 1e-6));
    let (_, session) = s.get(&format!("/sessions/{id}")).await;
    assert_eq!(session["status"], "recommended");
}

#[tokio::test(flavor = "multi_thread")]
async fn items_are_served_verbatim() {
    let s = start(false, &[]).await;
    let (st, body) = s.get("/items").await;
    assert_eq!(st, 200);
    let file: Value = serde_json::from_str(&std::fs::read_to_string(common::data("items10.json")).unwrap()).unwrap();
    assert_eq!(body["name"], file["name"]);
    let served = body["items"].as_array().unwrap();
    let shipped = file["items"].as_array().unwrap();
    assert_eq!(served.len(), shipped.len());
    for (a, b) in served.iter().zip(shipped) {
        assert_eq!(a["id"], b["id"]);
        assert_eq!(a["label"], b["label"]);
        assert_eq!(a["outcomes"].as_array().unwrap().len(), b["outcomes"].as_array().unwrap().len());
        for (x, y) in a["outcomes"].as_array().unwrap().iter().zip(b["outcomes"].as_array().unwrap()) {
            assert_eq!(x["value"].as_f64(), y["value"].as_f64());
            assert_eq!(x["prob"].as_f64(), y["prob"].as_f64());
        }
    }
    let (st, health) = s.get("/healthz").await;
    assert_eq!((st, health["status"].as_str()), (200, Some("ok")));
}

#[tokio::test(flavor = "multi_thread")]
async fn cors_headers_follow_configuration() {
    let s = start(false, &["http://example.test"]).await;
    let r = s
        .client
        .get(format!("{}/healthz", s.base))
        .header("Origin", "http://example.test")
        .send()
        .await
        .unwrap();
    assert_eq!(r.headers().get("access-control-allow-origin").unwrap(), "http://example.test");
    let closed = start(false, &[]).await;
    let r = closed
        .client
        .get(format!("{}/healthz", closed.base))
        .header("Origin", "http://example.test")
        .send()
        .await
        .unwrap();
    assert!(r.headers().get("access-control-allow-origin").is_none());
}
