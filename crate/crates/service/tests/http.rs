use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use http_body_util::BodyExt;
use nestpref_service::api::{Progress, QueryPhase, StateView, Status};
use nestpref_service::{router, AppState};
use serde_json::{json, Value};
use tower::ServiceExt;

struct Harness {
    state: AppState,
    app: Router,
    dir: Arc<tempfile::TempDir>,
}

impl Harness {
    fn new() -> Self {
        Self::open(Arc::new(tempfile::tempdir().unwrap()))
    }

    fn open(dir: Arc<tempfile::TempDir>) -> Self {
        let state = AppState::new(dir.path()).unwrap();
        Self { app: router(state.clone()), state, dir }
    }

    /// A second service over the same data directory, as after a restart.
    fn restart(&self) -> Self {
        Self::open(self.dir.clone())
    }

    fn log(&self, id: &str) -> std::path::PathBuf {
        self.dir.path().join(format!("{id}.jsonl"))
    }

    async fn call(&self, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Vec<u8>) {
        let req = Request::builder().method(method).uri(uri).header("content-type", "application/json");
        let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
        let res = self.app.clone().oneshot(req).await.unwrap();
        let status = res.status();
        (status, res.into_body().collect().await.unwrap().to_bytes().to_vec())
    }

    async fn create(&self, body: Value) -> Progress {
        let (status, bytes) = self.call("POST", "/sessions", Some(body)).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
        serde_json::from_slice(&bytes).unwrap()
    }

    async fn answer(&self, id: &str, winner: u64, token: &str) -> (StatusCode, Vec<u8>) {
        self.call("POST", &format!("/sessions/{id}/answer"), Some(json!({ "winner_id": winner, "query_token": token })))
            .await
    }

    async fn state(&self, id: &str) -> (StateView, Vec<u8>) {
        let (status, bytes) = self.call("GET", &format!("/sessions/{id}/state"), None).await;
        assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
        (serde_json::from_slice(&bytes).unwrap(), bytes)
    }
}

/// Twelve instances on a line in three nests; ids start at 100.
fn line_pool() -> Value {
    let instances: Vec<Value> = (0..12)
        .map(|i| json!({ "id": 100 + i, "nest": format!("n{}", i % 3), "label": format!("item {i}"), "features": [i as f64 / 11.0] }))
        .collect();
    json!(instances)
}

fn quick_config(budget: usize) -> Value {
    json!({
        "surrogate": "gp",
        "budget": budget,
        "seed": 3,
        "model": { "fit": { "max_iterations": 200, "warm_max_iterations": 40 } }
    })
}

/// Prefers the larger feature, like a person who always wants more.
fn pick(p: &Progress) -> u64 {
    let q = p.query.as_ref().expect("outstanding query");
    if q.a.features[0] >= q.b.features[0] {
        q.a.id
    } else {
        q.b.id
    }
}

async fn answer_ok(h: &Harness, p: &Progress) -> Progress {
    let q = p.query.as_ref().unwrap();
    let (status, bytes) = h.answer(&p.session_id, pick(p), &q.token).await;
    assert_eq!(status, StatusCode::OK, "{}", String::from_utf8_lossy(&bytes));
    serde_json::from_slice(&bytes).unwrap()
}

#[tokio::test]
async fn healthz_and_description() {
    let h = Harness::new();
    let (status, body) = h.call("GET", "/healthz", None).await;
    assert_eq!(status, StatusCode::OK);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap(), json!({ "status": "ok" }));
    let (status, body) = h.call("GET", "/openapi.yaml", None).await;
    assert_eq!(status, StatusCode::OK);
    assert!(String::from_utf8(body).unwrap().contains("/sessions/{id}/answer"));
}

#[tokio::test]
async fn first_query_is_a_within_nest_pair() {
    let h = Harness::new();
    let instances: Vec<Value> =
        (0..8).map(|i| json!({ "id": i, "nest": format!("nest{}", i / 2), "features": [i as f64, 1.0] })).collect();
    let p = h.create(json!({ "instances": instances, "feature_names": ["x", "y"] })).await;
    assert_eq!(p.status, Status::AwaitingAnswer);
    assert_eq!(p.queries_answered, 0);
    let q = p.query.unwrap();
    assert_eq!(q.phase, QueryPhase::Initialization);
    assert_eq!(q.a.nest, q.b.nest);
    assert_ne!(q.a.id, q.b.id);
    let (state, _) = h.state(&p.session_id).await;
    assert_eq!(state.config.surrogate, nestpref::SurrogateKind::Dgp1, "live sessions default to the one-layer deep model");
    assert_eq!(state.config.acquisition, nestpref::AcquisitionKind::Pi);
    assert_eq!(state.feature_names, ["x", "y"]);
    assert_eq!(state.nest_names.len(), 4);
    assert!(state.history.is_empty());
    assert!(state.estimates.is_none());
}

#[tokio::test]
async fn invalid_payloads_are_rejected_with_diagnostics() {
    let h = Harness::new();
    let dup = json!({ "instances": [
        { "id": 1, "nest": "a", "features": [0.0] },
        { "id": 1, "nest": "a", "features": [1.0] },
    ] });
    let (status, body) = h.call("POST", "/sessions", Some(dup)).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    let err: Value = serde_json::from_slice(&body).unwrap();
    assert_eq!(err["error"], "bad_request");
    assert!(err["message"].as_str().unwrap().contains("duplicate instance id 1"));

    let (status, body) = h.call("POST", "/sessions", Some(json!({ "csv": "id,nest,x\n1,a,0\n2,a,oops\n" }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_eq!(serde_json::from_slice::<Value>(&body).unwrap()["line"], 3);

    let lonely = json!({ "csv": "id,nest,x\n1,a,0\n2,a,1\n3,b,2\n" });
    assert_eq!(h.call("POST", "/sessions", Some(lonely)).await.0, StatusCode::BAD_REQUEST);
    let both = json!({ "csv": "id,nest,x\n1,a,0\n2,a,1\n", "instances": [] });
    assert_eq!(h.call("POST", "/sessions", Some(both)).await.0, StatusCode::BAD_REQUEST);
    let typo = json!({ "csv": "id,nest,x\n1,a,0\n2,a,1\n", "confg": {} });
    assert_eq!(h.call("POST", "/sessions", Some(typo)).await.0, StatusCode::BAD_REQUEST);
    let bad_zeta = json!({ "csv": "id,nest,x\n1,a,0\n2,a,1\n", "config": { "zeta": -1.0 } });
    assert_eq!(h.call("POST", "/sessions", Some(bad_zeta)).await.0, StatusCode::BAD_REQUEST);
    assert_eq!(std::fs::read_dir(h.dir.path()).unwrap().count(), 0, "failed creations leave no logs");
}

#[tokio::test]
async fn full_itinerary_set_is_accepted() {
    let h = Harness::new();
    let its = nestpref::itinerary::bundled_itineraries();
    let instances: Vec<Value> =
        its.iter().map(|it| json!({ "id": it.id, "nest": format!("nest{}", it.nest), "features": it.features.to_vec() })).collect();
    let names: Vec<&str> = nestpref::itinerary::CSV_HEADER[1..].to_vec();
    let p = h.create(json!({ "instances": instances, "feature_names": names })).await;
    assert_eq!(p.status, Status::AwaitingAnswer);
    let (state, _) = h.state(&p.session_id).await;
    assert_eq!(state.instance_count, 543);
    assert_eq!(state.nest_names.len(), 6);
    assert_eq!(state.feature_names.len(), 17);
}

#[tokio::test]
async fn csv_pools_keep_labels_and_feature_names() {
    let h = Harness::new();
    let csv = "id,nest,label,price,stops\n7,direct,cheap,120,0\n8,direct,fast,300,0\n9,via,slow,90,1\n10,via,odd,150,1\n";
    let p = h.create(json!({ "csv": csv })).await;
    let (state, _) = h.state(&p.session_id).await;
    assert_eq!(state.feature_names, ["price", "stops"]);
    let q = p.query.unwrap();
    assert!(q.a.label.is_some() && q.b.label.is_some());
}

#[tokio::test]
async fn answers_are_idempotent_per_token() {
    let h = Harness::new();
    let p = h.create(json!({ "instances": line_pool(), "config": quick_config(3) })).await;
    let id = p.session_id.clone();
    let q = p.query.clone().unwrap();
    let winner = pick(&p);
    let loser = if winner == q.a.id { q.b.id } else { q.a.id };

    let (s1, first) = h.answer(&id, winner, &q.token).await;
    let (s2, second) = h.answer(&id, winner, &q.token).await;
    assert_eq!((s1, s2), (StatusCode::OK, StatusCode::OK));
    assert_eq!(first, second, "a replay returns the stored response byte for byte");
    let (state, _) = h.state(&id).await;
    assert_eq!(state.history.len(), 1);
    assert_eq!(state.queries_answered, 1);

    let (status, _) = h.answer(&id, loser, &q.token).await;
    assert_eq!(status, StatusCode::CONFLICT, "same token, different winner");
    let (status, _) = h.answer(&id, winner, &format!("{id}-7")).await;
    assert_eq!(status, StatusCode::CONFLICT, "future token");
    let (status, _) = h.answer(&id, winner, "garbage").await;
    assert_eq!(status, StatusCode::CONFLICT);

    let next: Progress = serde_json::from_slice(&first).unwrap();
    let nq = next.query.unwrap();
    let outsider = (100..112).find(|i| *i != nq.a.id && *i != nq.b.id).unwrap();
    let (status, _) = h.answer(&id, outsider, &nq.token).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "winner outside the pair");
    assert_eq!(h.state(&id).await.0.history.len(), 1);
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn concurrent_duplicates_record_one_comparison() {
    let h = Harness::new();
    let p = h.create(json!({ "instances": line_pool(), "config": quick_config(3) })).await;
    let q = p.query.clone().unwrap();
    let winner = pick(&p);
    let (a, b) = tokio::join!(h.answer(&p.session_id, winner, &q.token), h.answer(&p.session_id, winner, &q.token));
    assert_eq!(a.0, StatusCode::OK);
    assert_eq!(a, b);
    assert_eq!(h.state(&p.session_id).await.0.history.len(), 1);
}

#[tokio::test]
async fn session_runs_to_exhaustion_and_replays_identically() {
    let h = Harness::new();
    let budget = 3;
    let mut p = h.create(json!({ "instances": line_pool(), "config": quick_config(budget) })).await;
    let id = p.session_id.clone();
    let mut responses = Vec::new();
    let mut k = 0;
    while p.query.is_some() {
        let token = p.query.as_ref().unwrap().token.clone();
        let winner = pick(&p);
        p = answer_ok(&h, &p).await;
        k += 1;
        responses.push((token, winner, p.clone()));
        let (state, _) = h.state(&id).await;
        assert_eq!(state.history.len(), k);
        assert_eq!(state.queries_answered, k);
        assert_eq!(state.query, p.query);
        // estimates appear once a model has been fitted for an active query
        assert_eq!(state.estimates.is_some(), p.query.as_ref().is_some_and(|q| q.phase == QueryPhase::Active) || state.active_queries > 0);
        if let Some(est) = &state.estimates {
            assert_eq!(est.len(), state.history.iter().flat_map(|e| [e.a, e.b]).collect::<std::collections::BTreeSet<_>>().len());
            assert!(est.iter().all(|e| e.variance >= 0.0 && e.mean.is_finite()));
        }
        assert!(k < 40, "session did not stop");
    }
    assert_eq!(p.status, Status::Exhausted);
    assert_eq!(p.active_queries, budget);
    assert!(p.best.is_some());
    let (status, _) = h.answer(&id, 100, &format!("{id}-{k}")).await;
    assert_eq!(status, StatusCode::CONFLICT, "nothing is outstanding after the budget");

    let (_, before) = h.state(&id).await;
    h.state.evict_all();
    let (after_state, after) = h.state(&id).await;
    assert_eq!(before, after, "replaying the log rebuilds the same state");
    assert_eq!(after_state.status, Status::Exhausted);

    // a fresh process over the same directory answers old tokens the same way
    let other = h.restart();
    for (token, winner, expected) in &responses {
        let (status, body) = other.answer(&id, *winner, token).await;
        assert_eq!(status, StatusCode::OK);
        assert_eq!(&serde_json::from_slice::<Progress>(&body).unwrap(), expected);
    }
}

#[tokio::test]
async fn log_has_created_answered_and_fit_events() {
    let h = Harness::new();
    let p = h.create(json!({ "instances": line_pool(), "config": quick_config(1) })).await;
    answer_ok(&h, &p).await;
    let text = std::fs::read_to_string(h.log(&p.session_id)).unwrap();
    let kinds: Vec<String> =
        text.lines().map(|l| serde_json::from_str::<Value>(l).unwrap()["event"].as_str().unwrap().to_string()).collect();
    assert_eq!(kinds, ["created", "answered", "fit"]);
}

#[tokio::test]
async fn torn_last_line_is_ignored_on_replay() {
    let h = Harness::new();
    let p = h.create(json!({ "instances": line_pool(), "config": quick_config(2) })).await;
    let p1 = answer_ok(&h, &p).await;
    let path = h.log(&p.session_id);
    let mut text = std::fs::read_to_string(&path).unwrap();
    text.push_str("{\"event\":\"answ");
    std::fs::write(&path, text).unwrap();
    h.state.evict_all();
    let (state, _) = h.state(&p.session_id).await;
    assert_eq!(state.history.len(), 1);
    assert_eq!(state.query, p1.query);
}

#[tokio::test]
async fn unknown_sessions_are_not_found() {
    let h = Harness::new();
    assert_eq!(h.call("GET", "/sessions/0123456789abcdef/state", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(h.call("GET", "/sessions/..%2Fetc/state", None).await.0, StatusCode::NOT_FOUND);
    assert_eq!(h.answer("0123456789abcdef", 1, "0123456789abcdef-0").await.0, StatusCode::NOT_FOUND);
}

#[test]
fn config_reads_environment() {
    std::env::set_var(nestpref_service::BIND_ENV, "0.0.0.0:9999");
    std::env::set_var(nestpref_service::DATA_DIR_ENV, "/tmp/np");
    let cfg = nestpref_service::ServiceConfig::from_env().unwrap();
    assert_eq!(cfg.bind.port(), 9999);
    assert_eq!(cfg.data_dir, std::path::PathBuf::from("/tmp/np"));
    std::env::set_var(nestpref_service::BIND_ENV, "nope");
    assert!(nestpref_service::ServiceConfig::from_env().is_err());
    std::env::remove_var(nestpref_service::BIND_ENV);
    std::env::remove_var(nestpref_service::DATA_DIR_ENV);
}
