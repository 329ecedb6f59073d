//! Local HTTP service that drives live sessions turn by turn.
//!
//! | method | path | body |
//! |---|---|---|
//! | POST | `/sessions` | [`CreateRequest`] → [`SessionHandle`] |
//! | POST | `/sessions/{id}/turns` | [`TurnRequest`] → `TurnUpdate` |
//! | GET | `/sessions/{id}/snapshot` | `SessionSnapshot` |
//! | GET | `/sessions/{id}/trace` | `{header, records}` |
//! | GET | `/sessions/{id}/updates` | server-sent `turn_update` events, then `session_status` |
//!
//! Errors are `{code, message, detail}`.

use std::collections::{BTreeMap, HashMap};
use std::convert::Infallible;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, RwLock};

use axum::extract::rejection::JsonRejection;
use axum::extract::{Path, State};
use axum::http::StatusCode;
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::{Json, Router};
use consult_core::case::Suite;
use consult_core::config::RunConfig;
use consult_core::session::{
    Domain, Session, SessionError, SessionSnapshot, SessionSpec, SessionStatus, TurnInput, TurnUpdate,
};
use consult_core::stream::{Role, TokenEvent};
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::{broadcast, Mutex};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ApiError {
    #[serde(skip)]
    pub status: u16,
    pub code: String,
    pub message: String,
    pub detail: Value,
}

impl ApiError {
    fn new(status: StatusCode, code: &str, message: impl Into<String>, detail: Value) -> Self {
        Self { status: status.as_u16(), code: code.into(), message: message.into(), detail }
    }

    fn bad_request(message: impl Into<String>) -> Self {
        Self::new(StatusCode::BAD_REQUEST, "bad_request", message, Value::Null)
    }

    fn unknown_session(id: &str) -> Self {
        Self::new(StatusCode::NOT_FOUND, "unknown_session", format!("no session {id:?}"), json!({ "session_id": id }))
    }
}

impl From<SessionError> for ApiError {
    fn from(e: SessionError) -> Self {
        let message = e.to_string();
        match e {
            SessionError::InvalidConfig(_) => {
                Self::new(StatusCode::BAD_REQUEST, "invalid_config", message, Value::Null)
            }
            SessionError::SessionClosed => Self::new(StatusCode::CONFLICT, "session_closed", message, Value::Null),
            SessionError::DuplicateTurn { expected, got } => {
                Self::new(StatusCode::CONFLICT, "duplicate_turn", message, json!({ "expected": expected, "got": got }))
            }
            SessionError::TurnGap { expected, got } => {
                Self::new(StatusCode::CONFLICT, "turn_gap", message, json!({ "expected": expected, "got": got }))
            }
            SessionError::Stream(_) => Self::bad_request(message),
            _ => Self::new(StatusCode::UNPROCESSABLE_ENTITY, "pipeline_error", message, Value::Null),
        }
    }
}

impl From<JsonRejection> for ApiError {
    fn from(e: JsonRejection) -> Self {
        Self::bad_request(e.body_text())
    }
}

impl IntoResponse for ApiError {
    fn into_response(self) -> Response {
        let status = StatusCode::from_u16(self.status).unwrap_or(StatusCode::INTERNAL_SERVER_ERROR);
        (status, Json(self)).into_response()
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SessionHandle {
    pub session_id: String,
    pub case_id: String,
    pub status: SessionStatus,
    pub turn: u32,
    pub seed: u64,
    pub config_hash: String,
}

/// Either a bundled `case_id` or an explicit `spec` supplies the goal.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CreateRequest {
    #[serde(default)]
    pub case_id: Option<String>,
    #[serde(default)]
    pub spec: Option<SessionSpec>,
    #[serde(default)]
    pub config: Option<RunConfig>,
    #[serde(default)]
    pub seed: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TextPart {
    pub role: Role,
    pub text: String,
}

/// One turn as typed text (`text` with `role`, or several `parts`) or as a
/// raw token batch. `turn` defaults to the next index.
#[derive(Debug, Clone, Default, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TurnRequest {
    #[serde(default)]
    pub turn: Option<u32>,
    #[serde(default)]
    pub role: Option<Role>,
    #[serde(default)]
    pub text: Option<String>,
    #[serde(default)]
    pub parts: Option<Vec<TextPart>>,
    #[serde(default)]
    pub tokens: Option<Vec<TokenEvent>>,
    #[serde(default)]
    pub answering: Option<String>,
}

#[derive(Debug, Clone)]
enum Push {
    Update(Box<TurnUpdate>),
    Closed(SessionStatus),
}

struct Slot {
    session: Mutex<Session>,
    snapshot: RwLock<Arc<SessionSnapshot>>,
    push: broadcast::Sender<Push>,
}

pub struct AppState {
    domain: Arc<Domain>,
    cases: BTreeMap<String, SessionSpec>,
    config: RunConfig,
    sessions: RwLock<HashMap<String, Arc<Slot>>>,
    next_id: AtomicU64,
}

impl AppState {
    pub fn new(domain: Arc<Domain>, cases: impl IntoIterator<Item = SessionSpec>, config: RunConfig) -> Self {
        Self {
            domain,
            cases: cases.into_iter().map(|s| (s.case_id.clone(), s)).collect(),
            config,
            sessions: RwLock::new(HashMap::new()),
            next_id: AtomicU64::new(1),
        }
    }

    pub fn from_suite(suite: &Suite, config: RunConfig) -> Result<Self, consult_core::case::CaseError> {
        let specs = suite.cases.iter().map(|c| c.session_spec(&suite.domain)).collect::<Result<Vec<_>, _>>()?;
        Ok(Self::new(Arc::clone(&suite.domain), specs, config))
    }

    fn slot(&self, id: &str) -> Result<Arc<Slot>, ApiError> {
        self.sessions.read().expect("session table").get(id).cloned().ok_or_else(|| ApiError::unknown_session(id))
    }

    pub fn create(&self, req: CreateRequest) -> Result<SessionHandle, ApiError> {
        let spec = match (req.spec, req.case_id) {
            (Some(spec), _) => spec,
            (None, Some(id)) => self.cases.get(&id).cloned().ok_or_else(|| {
                ApiError::new(
                    StatusCode::NOT_FOUND,
                    "unknown_case",
                    format!("no case {id:?}"),
                    json!({ "case_id": id }),
                )
            })?,
            (None, None) => return Err(ApiError::bad_request("one of case_id or spec is required")),
        };
        let cfg = req.config.unwrap_or_else(|| self.config.clone());
        let seed = req.seed.unwrap_or(cfg.planner.rng_seed);
        let session = Session::new(Arc::clone(&self.domain), spec, cfg, seed)?.with_auto_conclude(true);
        let id = format!("s{}", self.next_id.fetch_add(1, Ordering::Relaxed));
        let handle = handle(&id, &session);
        let slot = Slot {
            snapshot: RwLock::new(Arc::new(session.snapshot())),
            session: Mutex::new(session),
            push: broadcast::channel(64).0,
        };
        self.sessions.write().expect("session table").insert(id.clone(), Arc::new(slot));
        tracing::info!(session_id = %id, case_id = %handle.case_id, "session created");
        Ok(handle)
    }

    pub async fn push_turn(&self, id: &str, req: TurnRequest) -> Result<TurnUpdate, ApiError> {
        let slot = self.slot(id)?;
        let mut session = slot.session.lock().await;
        let input = turn_input(&session, req)?;
        let update = session.push_turn(input)?;
        let closed = session.status() != SessionStatus::Open;
        if closed {
            session.finish()?;
        }
        *slot.snapshot.write().expect("snapshot") = Arc::new(session.snapshot());
        let _ = slot.push.send(Push::Update(Box::new(update.clone())));
        if closed {
            let _ = slot.push.send(Push::Closed(session.status()));
        }
        Ok(update)
    }

    pub fn snapshot(&self, id: &str) -> Result<Arc<SessionSnapshot>, ApiError> {
        Ok(Arc::clone(&self.slot(id)?.snapshot.read().expect("snapshot")))
    }

    pub async fn trace(&self, id: &str) -> Result<Value, ApiError> {
        let slot = self.slot(id)?;
        let session = slot.session.lock().await;
        let log = session.trace();
        Ok(json!({ "header": log.header, "records": log.records() }))
    }
}

fn handle(id: &str, s: &Session) -> SessionHandle {
    SessionHandle {
        session_id: id.to_string(),
        case_id: s.spec().case_id.clone(),
        status: s.status(),
        turn: s.turn(),
        seed: s.seed(),
        config_hash: s.config().hash(),
    }
}

fn turn_input(session: &Session, req: TurnRequest) -> Result<TurnInput, ApiError> {
    let given = [req.text.is_some(), req.parts.is_some(), req.tokens.is_some()].iter().filter(|x| **x).count();
    if given != 1 {
        return Err(ApiError::bad_request("exactly one of text, parts or tokens is required"));
    }
    let mut input = if let Some(tokens) = req.tokens {
        TurnInput { turn: session.turn() + 1, tokens, answering: req.answering }
    } else {
        let parts: Vec<(Role, String)> = match (req.text, req.parts) {
            (Some(text), _) => vec![(req.role.unwrap_or(Role::Patient), text)],
            (_, Some(parts)) => parts.into_iter().map(|p| (p.role, p.text)).collect(),
            _ => unreachable!(),
        };
        let borrowed: Vec<(Role, &str)> = parts.iter().map(|(r, t)| (*r, t.as_str())).collect();
        session.text_input(&borrowed, req.answering)?
    };
    if let Some(t) = req.turn {
        input.turn = t;
    }
    Ok(input)
}

fn update_event(u: &TurnUpdate) -> Event {
    Event::default().event("turn_update").id(u.turn.to_string()).json_data(u).expect("update serializes")
}

fn status_event(s: SessionStatus) -> Event {
    Event::default().event("session_status").json_data(json!({ "status": s })).expect("status serializes")
}

async fn create(
    State(app): State<Arc<AppState>>,
    body: Result<Json<CreateRequest>, JsonRejection>,
) -> Result<Response, ApiError> {
    let Json(req) = body?;
    Ok((StatusCode::CREATED, Json(app.create(req)?)).into_response())
}

async fn turns(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
    body: Result<Json<TurnRequest>, JsonRejection>,
) -> Result<Json<TurnUpdate>, ApiError> {
    let Json(req) = body?;
    Ok(Json(app.push_turn(&id, req).await?))
}

async fn snapshot(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<SessionSnapshot>, ApiError> {
    Ok(Json(app.snapshot(&id)?.as_ref().clone()))
}

async fn trace(State(app): State<Arc<AppState>>, Path(id): Path<String>) -> Result<Json<Value>, ApiError> {
    Ok(Json(app.trace(&id).await?))
}

/// Replays past updates, then follows live ones until the session closes.
async fn updates(
    State(app): State<Arc<AppState>>,
    Path(id): Path<String>,
) -> Result<Sse<impl Stream<Item = Result<Event, Infallible>>>, ApiError> {
    let slot = app.slot(&id)?;
    let (history, status, rx) = {
        let s = slot.session.lock().await;
        (s.updates().to_vec(), s.status(), slot.push.subscribe())
    };
    let past = stream::iter(history.iter().map(update_event).collect::<Vec<_>>());
    let live = stream::unfold((rx, status == SessionStatus::Open), |(mut rx, open)| async move {
        if !open {
            return None;
        }
        loop {
            match rx.recv().await {
                Ok(Push::Update(u)) => return Some((update_event(&u), (rx, true))),
                Ok(Push::Closed(s)) => return Some((status_event(s), (rx, false))),
                Err(broadcast::error::RecvError::Lagged(n)) => tracing::warn!(skipped = n, "update subscriber lagged"),
                Err(broadcast::error::RecvError::Closed) => return None,
            }
        }
    });
    let tail = stream::iter((status != SessionStatus::Open).then(|| status_event(status)));
    Ok(Sse::new(past.chain(tail).chain(live).map(Ok)).keep_alive(KeepAlive::default()))
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create))
        .route("/sessions/{id}/turns", post(turns))
        .route("/sessions/{id}/snapshot", get(snapshot))
        .route("/sessions/{id}/trace", get(trace))
        .route("/sessions/{id}/updates", get(updates))
        .with_state(app)
}

pub async fn serve(listener: tokio::net::TcpListener, app: Arc<AppState>) -> std::io::Result<()> {
    tracing::info!(addr = ?listener.local_addr()?, "listening");
    axum::serve(listener, router(app)).await
}
