use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::Duration;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use clinsim::backends::FnBackend;
use clinsim::engine::{Episode, ExperimentConfig};
use clinsim::eval::{GroupKey, Report};
use clinsim::{BackendRegistry, ChatBackend};
use clinsim_server::reviews::ReviewStore;
use clinsim_server::service::{router, AppState};
use clinsim_server::session::SessionStore;
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

fn d1_experiment() -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../core/tests/fixtures/scripts/d1/experiment.json")
}

fn backend(name: &'static str, reply: &'static str) -> Arc<dyn ChatBackend> {
    Arc::new(FnBackend::new(name, move |_| Ok(reply.to_string())))
}

struct App {
    router: Router,
    dir: PathBuf,
}

fn app(dir: &Path, token: Option<&str>, idle: Duration) -> App {
    let cfg = ExperimentConfig::load(&d1_experiment()).unwrap();
    let registry = BackendRegistry::new()
        .with("patient", backend("patient", "8"))
        .with("measurement", backend("measurement", "NORMAL READINGS"))
        .with("moderator", backend("moderator", "Yes"));
    let sessions_dir = dir.join("sessions");
    let sessions = SessionStore::new(
        cfg.load_cases().unwrap(),
        cfg.episode.clone(),
        registry,
        cfg.load_indexes().unwrap(),
        cfg.media_dir(),
        sessions_dir.clone(),
        idle,
    );
    let reviews = ReviewStore::open(vec![sessions_dir.clone()], dir.join("ratings.jsonl")).unwrap();
    let state = Arc::new(AppState::new(sessions, reviews, token.map(String::from)));
    App { router: router(state), dir: sessions_dir }
}

fn hour() -> Duration {
    Duration::from_secs(3600)
}

impl App {
    async fn send(&self, method: &str, uri: &str, body: Option<&str>, headers: &[(&str, &str)]) -> (StatusCode, Value) {
        let mut req = Request::builder().method(method).uri(uri);
        for (k, v) in headers {
            req = req.header(*k, *v);
        }
        let req = req.body(body.map_or_else(Body::empty, |b| Body::from(b.to_string()))).unwrap();
        let resp = self.router.clone().oneshot(req).await.unwrap();
        let status = resp.status();
        let bytes = resp.into_body().collect().await.unwrap().to_bytes();
        let value = if bytes.is_empty() { Value::Null } else { serde_json::from_slice(&bytes).unwrap() };
        (status, value)
    }

    async fn post(&self, uri: &str, body: Value) -> (StatusCode, Value) {
        self.send("POST", uri, Some(&body.to_string()), &[]).await
    }

    async fn get(&self, uri: &str) -> (StatusCode, Value) {
        self.send("GET", uri, None, &[]).await
    }

    async fn session(&self, budget: u32) -> String {
        let (s, v) = self.post("/sessions", json!({"case_id": "medqa_pe_001", "budget": budget})).await;
        assert_eq!(s, StatusCode::CREATED, "{v}");
        v["session_id"].as_str().unwrap().to_string()
    }
}

#[tokio::test]
async fn chest_xray_request_returns_case_findings() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), None, hour());
    let (s, created) = app.post("/sessions", json!({"case_id": "medqa_pe_001"})).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(created["budget"], 20);
    assert_eq!(created["state"], "active");
    let view = created["doctor_view"].as_str().unwrap();
    assert!(!view.is_empty());
    assert!(!view.contains("Pulmonary Embolism"));

    let id = created["session_id"].as_str().unwrap();
    let (s, reply) = app.post(&format!("/sessions/{id}/message"), json!({"text": "Request Test: Chest_X-Ray"})).await;
    assert_eq!(s, StatusCode::OK, "{reply}");
    assert_eq!(reply["actor"], "measurement");
    assert!(reply["text"].as_str().unwrap().contains("No lung infiltrates"), "{reply}");
    assert_eq!(reply["budget_remaining"], 19);

    let (s, reply) = app.post(&format!("/sessions/{id}/message"), json!({"text": "Where does it hurt?"})).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(reply["actor"], "patient");
    assert_eq!(reply["budget_remaining"], 18);
}

#[tokio::test]
async fn message_beyond_budget_is_a_conflict() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), None, hour());
    let id = app.session(20).await;
    for i in 0..20 {
        let (s, v) = app.post(&format!("/sessions/{id}/message"), json!({"text": format!("Question {i}?")})).await;
        assert_eq!(s, StatusCode::OK, "turn {i}: {v}");
        assert_eq!(v["budget_remaining"], 19 - i);
    }
    let (s, v) = app.post(&format!("/sessions/{id}/message"), json!({"text": "One more?"})).await;
    assert_eq!(s, StatusCode::CONFLICT);
    assert_eq!(v["error"]["code"], "conflict");

    // A diagnosis is still accepted once the budget is spent.
    let (s, v) = app.post(&format!("/sessions/{id}/diagnose"), json!({"text": "Pulmonary Embolism"})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["state"], "graded");
}

#[tokio::test]
async fn diagnosis_is_graded_and_persisted_as_an_episode() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), None, hour());
    let id = app.session(20).await;
    app.post(&format!("/sessions/{id}/message"), json!({"text": "What brings you in?"})).await;
    let (s, v) = app.post(&format!("/sessions/{id}/diagnose"), json!({"text": "PE"})).await;
    assert_eq!(s, StatusCode::OK, "{v}");
    assert_eq!(v["result"]["verdict"], "yes");
    assert_eq!(v["result"]["final_diagnosis"], "PE");
    assert_eq!(v["result"]["correct_diagnosis"], "Pulmonary Embolism");

    let (s, status) = app.get(&format!("/sessions/{id}")).await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(status["state"], "graded");

    let (s, _) = app.post(&format!("/sessions/{id}/message"), json!({"text": "Hello?"})).await;
    assert_eq!(s, StatusCode::CONFLICT);

    let episode = Episode::load(&app.dir.join(format!("human-{id}.json"))).unwrap();
    assert_eq!(episode.case_id, "medqa_pe_001");
    assert_eq!(episode.config.settings.doctor.backend, "human");
    let report = Report::build(&[episode], GroupKey::Model);
    let row = report.row("human").expect("a row for the human doctor");
    assert_eq!((row.stat.n_correct, row.stat.n_graded), (1, 1));
}

#[tokio::test]
async fn errors_use_the_documented_statuses() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), None, hour());
    let (s, v) = app.get("/sessions/nope").await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_session")));
    let (s, v) = app.post("/sessions/nope/message", json!({"text": "hi"})).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_session")));
    let (s, v) = app.post("/sessions", json!({"case_id": "missing"})).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_case")));
    let (s, _) = app.send("POST", "/sessions", Some("{not json"), &[]).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = app.post("/sessions", json!({"case_id": "medqa_pe_001", "colour": "red"})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = app.post("/sessions", json!({"case_id": "medqa_pe_001", "budget": 0})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = app.post("/sessions", json!({"case_id": "medqa_pe_001", "tools": ["notebook"]})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);

    let id = app.session(5).await;
    let (s, _) = app.post(&format!("/sessions/{id}/message"), json!({"text": "  "})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, _) = app.post(&format!("/sessions/{id}/message"), json!({"message": "hi"})).await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = app.get("/health").await;
    assert_eq!((s, v["status"].as_str()), (StatusCode::OK, Some("ok")));
}

#[tokio::test]
async fn reader_queue_and_ratings() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), None, hour());
    let id = app.session(20).await;
    app.post(&format!("/sessions/{id}/message"), json!({"text": "What brings you in?"})).await;
    app.post(&format!("/sessions/{id}/diagnose"), json!({"text": "Pulmonary Embolism"})).await;
    let transcript = format!("human-{id}");

    let (s, _) = app.get("/reviews/next").await;
    assert_eq!(s, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, next) = app.get("/reviews/next?rater=r1").await;
    assert_eq!(s, StatusCode::OK);
    assert_eq!(next["transcript_id"], transcript.as_str());
    assert!(next["dialogue"].as_str().unwrap().contains("What brings you in?"));
    assert!(!next["instructions"]["axes"].as_array().unwrap().is_empty());

    let uri = format!("/reviews/{transcript}/ratings");
    let rating = json!({"rater_id": "r1", "doctor": 7, "patient": 6, "measurement": 8, "empathy": 5});
    let (s, v) = app.post(&uri, rating.clone()).await;
    assert_eq!(s, StatusCode::CREATED, "{v}");
    let (s, v) = app.post(&uri, rating.clone()).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::CONFLICT, Some("duplicate_rating")));

    let (s, v) = app.get("/reviews/next?rater=r1").await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("queue_empty")));
    let (s, _) = app.get("/reviews/next?rater=r2").await;
    assert_eq!(s, StatusCode::OK);

    let bad = json!({"rater_id": "r2", "doctor": 11, "patient": 6, "measurement": 8, "empathy": 5});
    assert_eq!(app.post(&uri, bad).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let other = json!({"transcript_id": "other", "rater_id": "r2", "doctor": 1, "patient": 1, "measurement": 1, "empathy": 1});
    assert_eq!(app.post(&uri, other).await.0, StatusCode::UNPROCESSABLE_ENTITY);
    let (s, v) = app.post("/reviews/unknown/ratings", rating).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::NOT_FOUND, Some("unknown_transcript")));

    let stored = clinsim_server::reviews::load_ratings(&tmp.path().join("ratings.jsonl")).unwrap();
    assert_eq!(stored.len(), 1);
}

#[tokio::test]
async fn idempotency_key_replays_the_first_response() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), None, hour());
    let body = json!({"case_id": "medqa_pe_001"}).to_string();
    let key = [("content-type", "application/json"), ("idempotency-key", "abc")];
    let (s1, a) = app.send("POST", "/sessions", Some(&body), &key).await;
    let (s2, b) = app.send("POST", "/sessions", Some(&body), &key).await;
    assert_eq!((s1, s2), (StatusCode::CREATED, StatusCode::CREATED));
    assert_eq!(a["session_id"], b["session_id"]);

    let id = a["session_id"].as_str().unwrap();
    let uri = format!("/sessions/{id}/message");
    let msg = json!({"text": "Any fever?"}).to_string();
    let (_, first) = app.send("POST", &uri, Some(&msg), &key).await;
    let (_, again) = app.send("POST", &uri, Some(&msg), &key).await;
    assert_eq!(first, again);
    assert_eq!(again["budget_remaining"], 19);
    let (_, fresh) = app.send("POST", &uri, Some(&msg), &[("idempotency-key", "def")]).await;
    assert_eq!(fresh["budget_remaining"], 18);
}

#[tokio::test]
async fn bearer_token_guards_everything_but_health() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), Some("s3cret"), hour());
    let body = json!({"case_id": "medqa_pe_001"}).to_string();
    let (s, v) = app.send("POST", "/sessions", Some(&body), &[]).await;
    assert_eq!((s, v["error"]["code"].as_str()), (StatusCode::UNAUTHORIZED, Some("unauthorized")));
    let (s, _) = app.send("POST", "/sessions", Some(&body), &[("authorization", "Bearer wrong")]).await;
    assert_eq!(s, StatusCode::UNAUTHORIZED);
    let (s, _) = app.send("POST", "/sessions", Some(&body), &[("authorization", "Bearer s3cret")]).await;
    assert_eq!(s, StatusCode::CREATED);
    assert_eq!(app.get("/health").await.0, StatusCode::OK);
}

#[tokio::test]
async fn idle_sessions_expire_ungraded() {
    let tmp = tempfile::tempdir().unwrap();
    let app = app(tmp.path(), None, Duration::from_millis(50));
    let id = app.session(20).await;
    tokio::time::sleep(Duration::from_millis(120)).await;
    let (s, v) = app.post(&format!("/sessions/{id}/message"), json!({"text": "Still there?"})).await;
    assert_eq!(s, StatusCode::CONFLICT, "{v}");
    let (_, status) = app.get(&format!("/sessions/{id}")).await;
    assert_eq!(status["state"], "expired");
    assert!(status.get("result").is_none());
    let episode = Episode::load(&app.dir.join(format!("human-{id}.json"))).unwrap();
    assert!(!episode.verdict.is_graded());
}
