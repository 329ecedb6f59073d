use std::sync::Arc;

use axum::body::Body;
use axum::http::{Request, StatusCode};
use axum::Router;
use consult_core::case::Suite;
use consult_core::config::RunConfig;
use consult_core::extract::{apply_events, CurrentState};
use consult_core::planner::GoalState;
use consult_core::retrieval::RetrievalConfig;
use consult_core::session::{SessionSnapshot, SessionSpec, TurnUpdate};
use consult_core::trace::{replay, ReplayRecord, TraceHeader, TraceLog};
use consult_service::{router, AppState};
use http_body_util::BodyExt;
use serde_json::{json, Value};
use tower::ServiceExt;

struct Fixture {
    suite: Suite,
    app: Router,
}

fn fixture() -> Fixture {
    let suite = Suite::bundled(RetrievalConfig::default()).unwrap();
    let state = AppState::from_suite(&suite, RunConfig::default()).unwrap();
    Fixture { app: router(Arc::new(state)), suite }
}

async fn call(app: &Router, method: &str, uri: &str, body: Option<Value>) -> (StatusCode, Value) {
    let req = Request::builder().method(method).uri(uri);
    let req = match body {
        Some(b) => req.header("content-type", "application/json").body(Body::from(b.to_string())),
        None => req.body(Body::empty()),
    }
    .unwrap();
    let resp = app.clone().oneshot(req).await.unwrap();
    let status = resp.status();
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    (status, serde_json::from_slice(&bytes).unwrap_or(Value::Null))
}

async fn create(app: &Router, body: Value) -> String {
    let (status, v) = call(app, "POST", "/sessions", Some(body)).await;
    assert_eq!(status, StatusCode::CREATED, "{v}");
    v["session_id"].as_str().unwrap().to_string()
}

async fn turn(app: &Router, id: &str, body: Value) -> TurnUpdate {
    let (status, v) = call(app, "POST", &format!("/sessions/{id}/turns"), Some(body)).await;
    assert_eq!(status, StatusCode::OK, "{v}");
    serde_json::from_value(v).unwrap()
}

fn assert_error(v: &Value, code: &str) {
    assert_eq!(v["code"], code, "{v}");
    assert!(v["message"].as_str().is_some_and(|m| !m.is_empty()));
    assert!(v.get("detail").is_some());
}

/// A goal with nothing to ask, so the first turn concludes.
fn trivial_spec() -> SessionSpec {
    SessionSpec {
        case_id: "trivial".into(),
        goal: GoalState {
            required_slots: Default::default(),
            discriminating_slots: vec![],
            risk_checks: vec![],
            confidence_floor: 0.0,
        },
        observation_models: Default::default(),
    }
}

const SCRIPT: [(&str, &str); 3] = [
    ("patient", "i have chest pain since this morning"),
    ("patient", "it feels like pressure and i am sweating"),
    ("patient", "no fever and no cough"),
];

#[tokio::test]
async fn create_returns_fresh_distinct_handles() {
    let f = fixture();
    let (status, a) = call(&f.app, "POST", "/sessions", Some(json!({ "case_id": "acs_01", "seed": 3 }))).await;
    assert_eq!(status, StatusCode::CREATED);
    assert_eq!((a["turn"].as_u64(), a["status"].as_str(), a["seed"].as_u64()), (Some(0), Some("open"), Some(3)));
    assert_eq!(a["config_hash"], RunConfig::default().hash());
    let b = create(&f.app, json!({ "case_id": "acs_01" })).await;
    assert_ne!(a["session_id"].as_str().unwrap(), b);

    let (_, snap) = call(&f.app, "GET", &format!("/sessions/{b}/snapshot"), None).await;
    let snap: SessionSnapshot = serde_json::from_value(snap).unwrap();
    assert!(snap.state.slots.is_empty());
    assert_eq!(snap.belief, f.suite.domain.hypotheses.uniform());
}

#[tokio::test]
async fn create_rejects_bad_requests() {
    let f = fixture();
    let mut cfg = serde_json::to_value(RunConfig::default()).unwrap();
    cfg["stabilizer"]["lambda"] = json!(0.95);
    let (status, v) = call(&f.app, "POST", "/sessions", Some(json!({ "case_id": "acs_01", "config": cfg }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&v, "invalid_config");

    let (status, v) = call(&f.app, "POST", "/sessions", Some(json!({ "case_id": "nope" }))).await;
    assert_eq!(status, StatusCode::NOT_FOUND);
    assert_error(&v, "unknown_case");

    let (status, v) = call(&f.app, "POST", "/sessions", Some(json!({}))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&v, "bad_request");

    let (status, v) = call(&f.app, "POST", "/sessions", Some(json!({ "case": 1 }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST);
    assert_error(&v, "bad_request");
}

#[tokio::test]
async fn unknown_session_everywhere() {
    let f = fixture();
    for (method, path, body) in [
        ("GET", "/sessions/zz/snapshot", None),
        ("GET", "/sessions/zz/trace", None),
        ("GET", "/sessions/zz/updates", None),
        ("POST", "/sessions/zz/turns", Some(json!({ "text": "hello" }))),
    ] {
        let (status, v) = call(&f.app, method, path, body).await;
        assert_eq!(status, StatusCode::NOT_FOUND, "{path}");
        assert_error(&v, "unknown_session");
        assert_eq!(v["detail"]["session_id"], "zz");
    }
}

#[tokio::test]
async fn first_text_turn_runs_the_pipeline() {
    let f = fixture();
    let id = create(&f.app, json!({ "case_id": "acs_01" })).await;
    let u = turn(&f.app, &id, json!({ "role": "patient", "text": "chest feels tight" })).await;
    assert_eq!(u.turn, 1);
    assert!(!u.utterances.is_empty());
    assert!((u.belief.smoothed.iter().sum::<f64>() - 1.0).abs() <= 1e-9);
    assert!(u.selected.is_some());
}

#[tokio::test]
async fn malformed_turns_are_rejected() {
    let f = fixture();
    let id = create(&f.app, json!({ "case_id": "acs_01" })).await;
    let uri = format!("/sessions/{id}/turns");
    for body in [json!({}), json!({ "text": "a", "tokens": [] }), json!({ "txt": "a" })] {
        let (status, v) = call(&f.app, "POST", &uri, Some(body)).await;
        assert_eq!(status, StatusCode::BAD_REQUEST);
        assert_error(&v, "bad_request");
    }
    let (status, v) = call(&f.app, "POST", &uri, Some(json!({ "text": "   " }))).await;
    assert_eq!(status, StatusCode::BAD_REQUEST, "{v}");
    let (_, snap) = call(&f.app, "GET", &format!("/sessions/{id}/snapshot"), None).await;
    assert_eq!(snap["turn"], 0);
}

#[tokio::test]
async fn duplicate_and_skipped_turns_leave_the_trace_alone() {
    let f = fixture();
    let id = create(&f.app, json!({ "case_id": "acs_01" })).await;
    turn(&f.app, &id, json!({ "text": SCRIPT[0].1 })).await;
    let (_, before) = call(&f.app, "GET", &format!("/sessions/{id}/trace"), None).await;

    let (status, v) =
        call(&f.app, "POST", &format!("/sessions/{id}/turns"), Some(json!({ "turn": 1, "text": "again" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&v, "duplicate_turn");
    assert_eq!(v["detail"], json!({ "expected": 2, "got": 1 }));

    let (status, v) =
        call(&f.app, "POST", &format!("/sessions/{id}/turns"), Some(json!({ "turn": 5, "text": "later" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&v, "turn_gap");

    let (_, after) = call(&f.app, "GET", &format!("/sessions/{id}/trace"), None).await;
    assert_eq!(before, after);
}

#[tokio::test]
async fn concurrent_pushes_of_one_turn_are_serialized() {
    let f = fixture();
    let id = create(&f.app, json!({ "case_id": "acs_01" })).await;
    let uri = format!("/sessions/{id}/turns");
    let body = json!({ "turn": 1, "text": SCRIPT[0].1 });
    let (a, b) = tokio::join!(call(&f.app, "POST", &uri, Some(body.clone())), call(&f.app, "POST", &uri, Some(body)));
    let mut codes = [a.0, b.0];
    codes.sort();
    assert_eq!(codes, [StatusCode::OK, StatusCode::CONFLICT]);
}

#[tokio::test]
async fn concluded_session_rejects_turns() {
    let f = fixture();
    let spec = serde_json::to_value(trivial_spec()).unwrap();
    let id = create(&f.app, json!({ "spec": spec })).await;
    let u = turn(&f.app, &id, json!({ "text": "hello doctor" })).await;
    assert_eq!(u.selected.as_ref().unwrap().action.action_id, "conclude:session");
    let (_, snap) = call(&f.app, "GET", &format!("/sessions/{id}/snapshot"), None).await;
    assert_eq!(snap["status"], "concluded");

    let (status, v) =
        call(&f.app, "POST", &format!("/sessions/{id}/turns"), Some(json!({ "text": "one more thing" }))).await;
    assert_eq!(status, StatusCode::CONFLICT);
    assert_error(&v, "session_closed");
}

fn trace_log(v: &Value) -> TraceLog {
    let header: TraceHeader = serde_json::from_value(v["header"].clone()).unwrap();
    let mut log = TraceLog::new(header);
    for r in v["records"].as_array().unwrap() {
        let r: ReplayRecord = serde_json::from_value(r.clone()).unwrap();
        log.append(r).unwrap();
    }
    log
}

#[tokio::test]
async fn snapshot_trace_and_updates_agree() {
    let f = fixture();
    let id = create(&f.app, json!({ "case_id": "gerd_01", "seed": 5 })).await;
    let mut updates = Vec::new();
    for (role, text) in SCRIPT {
        updates.push(turn(&f.app, &id, json!({ "role": role, "text": text })).await);
    }

    let (_, snap) = call(&f.app, "GET", &format!("/sessions/{id}/snapshot"), None).await;
    let snap: SessionSnapshot = serde_json::from_value(snap).unwrap();
    let events: Vec<_> = updates.iter().flat_map(|u| u.events.iter().cloned()).collect();
    let folded = apply_events(CurrentState::default(), &events, &f.suite.domain.schema).unwrap();
    assert_eq!(snap.state, folded);
    assert_eq!(snap.turn, 3);
    assert_eq!(snap.belief, updates[2].belief.smoothed);

    let (_, trace) = call(&f.app, "GET", &format!("/sessions/{id}/trace"), None).await;
    let log = trace_log(&trace);
    for u in &updates {
        let recs = log.turn_records(u.turn);
        assert_eq!(&TurnUpdate::from_records(&recs).unwrap(), u);
    }
    let replayed = replay(&log, &RunConfig::default(), Arc::clone(&f.suite.domain)).unwrap();
    assert_eq!(replayed.updates, updates);
}

#[tokio::test]
async fn interleaved_sessions_match_serial_ones() {
    let f = fixture();
    let serial_a = create(&f.app, json!({ "case_id": "acs_01", "seed": 1 })).await;
    let serial_b = create(&f.app, json!({ "case_id": "msk_01", "seed": 2 })).await;
    let mut sa = Vec::new();
    let mut sb = Vec::new();
    for (_, t) in SCRIPT {
        sa.push(turn(&f.app, &serial_a, json!({ "text": t })).await);
    }
    for (_, t) in SCRIPT.iter().rev() {
        sb.push(turn(&f.app, &serial_b, json!({ "text": t })).await);
    }

    let a = create(&f.app, json!({ "case_id": "acs_01", "seed": 1 })).await;
    let b = create(&f.app, json!({ "case_id": "msk_01", "seed": 2 })).await;
    let mut ia = Vec::new();
    let mut ib = Vec::new();
    for i in 0..SCRIPT.len() {
        let (x, y) = tokio::join!(
            turn(&f.app, &a, json!({ "text": SCRIPT[i].1 })),
            turn(&f.app, &b, json!({ "text": SCRIPT[SCRIPT.len() - 1 - i].1 })),
        );
        ia.push(x);
        ib.push(y);
    }
    assert_eq!(ia, sa);
    assert_eq!(ib, sb);
}

fn sse_events(text: &str) -> Vec<(String, Value)> {
    text.split("\n\n")
        .filter_map(|block| {
            let mut name = None;
            let mut data = String::new();
            for line in block.lines() {
                if let Some(v) = line.strip_prefix("event:") {
                    name = Some(v.trim().to_string());
                } else if let Some(v) = line.strip_prefix("data:") {
                    data.push_str(v.trim_start());
                }
            }
            Some((name?, serde_json::from_str(&data).unwrap()))
        })
        .collect()
}

#[tokio::test]
async fn updates_stream_replays_then_closes() {
    let f = fixture();
    let spec = serde_json::to_value(trivial_spec()).unwrap();
    let id = create(&f.app, json!({ "spec": spec })).await;
    let u = turn(&f.app, &id, json!({ "text": "hello doctor" })).await;

    let req = Request::get(format!("/sessions/{id}/updates")).body(Body::empty()).unwrap();
    let resp = f.app.clone().oneshot(req).await.unwrap();
    assert_eq!(resp.status(), StatusCode::OK);
    assert!(resp.headers()["content-type"].to_str().unwrap().starts_with("text/event-stream"));
    let bytes = resp.into_body().collect().await.unwrap().to_bytes();
    let events = sse_events(std::str::from_utf8(&bytes).unwrap());
    assert_eq!(events.len(), 2);
    assert_eq!(events[0].0, "turn_update");
    assert_eq!(serde_json::from_value::<TurnUpdate>(events[0].1.clone()).unwrap(), u);
    assert_eq!(events[1], ("session_status".into(), json!({ "status": "concluded" })));
}

#[tokio::test]
async fn updates_stream_follows_live_turns() {
    let f = fixture();
    let id = create(&f.app, json!({ "case_id": "acs_01" })).await;
    let first = turn(&f.app, &id, json!({ "text": SCRIPT[0].1 })).await;

    let req = Request::get(format!("/sessions/{id}/updates")).body(Body::empty()).unwrap();
    let mut body = f.app.clone().oneshot(req).await.unwrap().into_body();
    let second = turn(&f.app, &id, json!({ "text": SCRIPT[1].1 })).await;

    let mut text = String::new();
    while sse_events(&text).len() < 2 {
        let frame = body.frame().await.unwrap().unwrap();
        if let Ok(data) = frame.into_data() {
            text.push_str(std::str::from_utf8(&data).unwrap());
        }
    }
    let got: Vec<TurnUpdate> = sse_events(&text).into_iter().map(|(_, v)| serde_json::from_value(v).unwrap()).collect();
    assert_eq!(got, vec![first, second]);
}
