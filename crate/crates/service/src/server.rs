//! HTTP session service: study upload, multi-turn messages, event streams
//! and evaluation runs.

use std::collections::BTreeMap;
use std::convert::Infallible;
use std::path::{Path, PathBuf};
use std::sync::{Arc, Mutex};
use std::time::{SystemTime, UNIX_EPOCH};

use axum::body::Bytes;
use axum::extract::{Path as UrlPath, Query, Request, State};
use axum::http::{header, HeaderMap, StatusCode};
use axum::middleware::{self, Next};
use axum::response::sse::{Event, KeepAlive, Sse};
use axum::response::{IntoResponse, Response};
use axum::routing::{get, post};
use axum::Router;
use echo_agent_core::agent::{
    append_event, read_events_file, AgentConfig, AgentError, LoopOutcome, Session, SessionStatus,
};
use echo_agent_core::canonical::{canonical_string, to_canonical};
use echo_agent_core::clock::SystemClock;
use echo_agent_core::controller::{BackendSpec, Controller};
use echo_agent_core::domain::{
    read_study_file, validate_study, write_study_file, ClinicianQuery, EchoStudy, SessionEvent, Violation,
};
use echo_agent_core::eval::{
    generate_synthetic_qa, load_question_set, run_id_for, run_protocol, score, AccuracyReport, EvalConfig, EvalRun,
    LoadedQuestion,
};
use echo_agent_core::registry::ToolRegistry;
use futures::stream::{self, Stream, StreamExt};
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use tokio::sync::watch;

use crate::config::{check_backend, ServiceConfig};

/// Persisted alongside the event log so sessions survive restarts.
#[derive(Debug, Clone, Serialize, Deserialize)]
struct SessionMeta {
    session_id: String,
    study_fp: String,
    backend: BackendSpec,
    created_ms: u64,
}

/// Append-only mirror of a session's events, published to stream readers
/// after each event reaches the log file.
struct EventFeed {
    events: Mutex<Vec<SessionEvent>>,
    latest: watch::Sender<u64>,
    log_path: PathBuf,
}

impl EventFeed {
    fn new(log_path: PathBuf, events: Vec<SessionEvent>) -> Self {
        let last = events.last().map_or(0, |e| e.seq);
        EventFeed { events: Mutex::new(events), latest: watch::Sender::new(last), log_path }
    }

    fn push(&self, event: &SessionEvent) {
        if let Err(e) = append_event(&self.log_path, event) {
            tracing::error!(path = %self.log_path.display(), error = %e, "cannot append to event log");
        }
        self.events.lock().expect("feed lock").push(event.clone());
        self.latest.send_replace(event.seq);
    }

    fn after(&self, seq: u64) -> Vec<SessionEvent> {
        let events = self.events.lock().expect("feed lock");
        let start = events.partition_point(|e| e.seq <= seq);
        events[start..].to_vec()
    }

    fn last_seq(&self) -> u64 {
        *self.latest.borrow()
    }
}

struct SlotInner {
    /// Taken out while a loop runs.
    session: Option<Session>,
    controller: Option<Box<dyn Controller>>,
    status: SessionStatus,
    error: Option<String>,
}

struct SessionSlot {
    id: String,
    study_id: String,
    backend: BackendSpec,
    feed: Arc<EventFeed>,
    inner: Mutex<SlotInner>,
}

#[derive(Debug, Clone, Serialize)]
#[serde(rename_all = "snake_case")]
enum RunStatus {
    Running,
    Done,
    Failed,
}

#[derive(Debug, Clone, Serialize)]
struct RunRecord {
    run_id: String,
    status: RunStatus,
    #[serde(skip_serializing_if = "Option::is_none")]
    run: Option<EvalRun>,
    #[serde(skip_serializing_if = "Option::is_none")]
    report: Option<AccuracyReport>,
    #[serde(skip_serializing_if = "Option::is_none")]
    error: Option<String>,
}

pub struct AppState {
    config: ServiceConfig,
    agent: AgentConfig,
    registry: Arc<ToolRegistry>,
    sessions: Mutex<BTreeMap<String, Arc<SessionSlot>>>,
    runs: Mutex<BTreeMap<String, RunRecord>>,
}

fn now_ms() -> u64 {
    SystemTime::now().duration_since(UNIX_EPOCH).map_or(0, |d| d.as_millis() as u64)
}

impl AppState {
    /// Prepares the data directory and recovers every logged session.
    pub fn open(config: ServiceConfig) -> anyhow::Result<Arc<Self>> {
        for sub in ["studies", "sessions", "runs"] {
            std::fs::create_dir_all(config.data_dir.join(sub))?;
        }
        let registry = Arc::new(config.build_registry()?);
        let state = Arc::new(AppState {
            agent: config.agent_config(),
            config,
            registry,
            sessions: Mutex::new(BTreeMap::new()),
            runs: Mutex::new(BTreeMap::new()),
        });
        state.recover_sessions()?;
        Ok(state)
    }

    fn dir(&self, sub: &str) -> PathBuf {
        self.config.data_dir.join(sub)
    }

    fn recover_sessions(&self) -> anyhow::Result<()> {
        let mut recovered = 0;
        for entry in std::fs::read_dir(self.dir("sessions"))?.flatten() {
            let path = entry.path();
            let Some(name) = path.file_name().and_then(|n| n.to_str()) else { continue };
            if !name.ends_with(".meta.json") {
                continue;
            }
            match self.recover_one(&path) {
                Ok(slot) => {
                    self.sessions.lock().expect("sessions lock").insert(slot.id.clone(), slot);
                    recovered += 1;
                }
                Err(e) => tracing::warn!(path = %path.display(), error = %e, "cannot recover session"),
            }
        }
        if recovered > 0 {
            tracing::info!(recovered, "recovered sessions from the data directory");
        }
        Ok(())
    }

    fn recover_one(&self, meta_path: &Path) -> anyhow::Result<Arc<SessionSlot>> {
        let meta: SessionMeta = serde_json::from_str(&std::fs::read_to_string(meta_path)?)?;
        let study = Arc::new(read_study_file(&self.dir("studies").join(format!("{}.json", meta.study_fp)))?);
        let log_path = self.log_path(&meta.session_id);
        let events = if log_path.exists() { read_events_file(&log_path)? } else { Vec::new() };
        let mut session =
            Session::recover(meta.session_id.clone(), Arc::clone(&study), Arc::new(SystemClock::new()), events.clone())
                .map_err(anyhow::Error::msg)?;
        let mut controller = meta.backend.build(self.config.thresholds, 0).map_err(anyhow::Error::msg)?;
        // A fresh controller would repeat decisions already in the log.
        controller.skip(session.controller_calls());
        let status = session.status();
        let feed = session_with_feed(&mut session, log_path, events);
        Ok(Self::install(meta.session_id, &study, meta.backend, feed, session, controller, status))
    }

    fn log_path(&self, id: &str) -> PathBuf {
        self.dir("sessions").join(format!("{id}.events.jsonl"))
    }

    fn install(
        id: String,
        study: &EchoStudy,
        backend: BackendSpec,
        feed: Arc<EventFeed>,
        session: Session,
        controller: Box<dyn Controller>,
        status: SessionStatus,
    ) -> Arc<SessionSlot> {
        Arc::new(SessionSlot {
            id,
            study_id: study.study_id.clone(),
            backend,
            feed,
            inner: Mutex::new(SlotInner { session: Some(session), controller: Some(controller), status, error: None }),
        })
    }

    fn slot(&self, id: &str) -> Option<Arc<SessionSlot>> {
        self.sessions.lock().expect("sessions lock").get(id).cloned()
    }
}

fn session_with_feed(session: &mut Session, log_path: PathBuf, events: Vec<SessionEvent>) -> Arc<EventFeed> {
    let feed = Arc::new(EventFeed::new(log_path, events));
    let sink_feed = Arc::clone(&feed);
    session.set_sink(Box::new(move |e| sink_feed.push(e)));
    feed
}

// ---------------------------------------------------------------------------
// Responses

/// JSON response with a canonical body.
fn canonical_json<T: Serialize>(status: StatusCode, body: &T) -> Response {
    match to_canonical(body) {
        Ok(bytes) => (status, [(header::CONTENT_TYPE, "application/json")], bytes).into_response(),
        Err(e) => (StatusCode::INTERNAL_SERVER_ERROR, format!("response is not canonical JSON: {e}")).into_response(),
    }
}

fn validation(violations: &[Violation]) -> Response {
    canonical_json(StatusCode::BAD_REQUEST, &json!({"error": "validation", "violations": violations}))
}

fn not_found(what: &str, id: &str) -> Response {
    canonical_json(StatusCode::NOT_FOUND, &json!({"error": "not_found", "message": format!("no {what} {id:?}")}))
}

fn parse_body<T: for<'de> Deserialize<'de>>(body: &Bytes) -> Result<T, Violation> {
    serde_json::from_slice(body).map_err(|e| Violation::new("$", e.to_string()))
}

// ---------------------------------------------------------------------------
// Sessions

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateSession {
    study: Value,
    #[serde(default)]
    backend: Option<BackendSpec>,
}

async fn create_session(State(app): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: CreateSession = match parse_body(&body) {
        Ok(r) => r,
        Err(v) => return validation(&[v]),
    };
    let study: EchoStudy = match serde_json::from_value(req.study) {
        Ok(s) => s,
        Err(e) => return validation(&[Violation::new("study", e.to_string())]),
    };
    if let Err(violations) = validate_study(&study) {
        return validation(&violations);
    }
    let backend = req.backend.unwrap_or_else(|| app.config.backend.clone());
    if let Err(e) = check_backend(&backend) {
        return validation(&[Violation::new("backend", e)]);
    }
    let controller = match backend.build(app.config.thresholds, 0) {
        Ok(c) => c,
        Err(e) => return validation(&[Violation::new("backend", e)]),
    };
    let id = uuid::Uuid::new_v4().simple().to_string();
    let study_fp = study.content_fingerprint();
    let study_path = app.dir("studies").join(format!("{study_fp}.json"));
    let meta = SessionMeta { session_id: id.clone(), study_fp, backend: backend.clone(), created_ms: now_ms() };
    let persisted = (|| -> anyhow::Result<()> {
        if !study_path.exists() {
            write_study_file(&study_path, &study)?;
        }
        std::fs::write(app.dir("sessions").join(format!("{id}.meta.json")), serde_json::to_vec(&meta)?)?;
        Ok(())
    })();
    if let Err(e) = persisted {
        return canonical_json(
            StatusCode::INTERNAL_SERVER_ERROR,
            &json!({"error": "storage", "message": e.to_string()}),
        );
    }
    let study = Arc::new(study);
    let mut session = Session::new(id.clone(), Arc::clone(&study), Arc::new(SystemClock::new()));
    let feed = session_with_feed(&mut session, app.log_path(&id), Vec::new());
    let slot = AppState::install(id.clone(), &study, backend, feed, session, controller, SessionStatus::Idle);
    app.sessions.lock().expect("sessions lock").insert(id.clone(), slot);
    tracing::info!(session = %id, study = %study.study_id, "session created");
    canonical_json(
        StatusCode::CREATED,
        &json!({"session_id": id, "study_id": study.study_id, "status": SessionStatus::Idle}),
    )
}

async fn post_message(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>, body: Bytes) -> Response {
    let Some(slot) = app.slot(&id) else { return not_found("session", &id) };
    let query: ClinicianQuery = match parse_body(&body) {
        Ok(q) => q,
        Err(v) => return validation(&[v]),
    };
    if let Err(violations) = query.validate() {
        return validation(&violations);
    }
    let (session, controller, resuming) = {
        let mut inner = slot.inner.lock().expect("slot lock");
        match inner.status {
            SessionStatus::Running | SessionStatus::Closed => {
                return canonical_json(
                    StatusCode::CONFLICT,
                    &json!({"error": "conflict", "status": inner.status, "message": "a loop is already running for this session"}),
                );
            }
            _ => {}
        }
        let resuming = inner.status == SessionStatus::AwaitingClarification;
        inner.status = SessionStatus::Running;
        inner.error = None;
        (
            inner.session.take().expect("idle session present"),
            inner.controller.take().expect("idle controller present"),
            resuming,
        )
    };
    let agent = app.agent.clone();
    let registry = Arc::clone(&app.registry);
    let worker_slot = Arc::clone(&slot);
    // The loop blocks (tool threads, blocking HTTP), so it runs off the runtime.
    tokio::task::spawn_blocking(move || {
        let mut session = session;
        let mut controller = controller;
        let result = session.post_message(query, &agent, &registry, controller.as_mut());
        let mut inner = worker_slot.inner.lock().expect("slot lock");
        inner.status = session.status();
        if let Err(e) = result {
            tracing::warn!(session = %worker_slot.id, error = %e, "message rejected by the agent");
            // A study the agent refuses cannot take further messages.
            if matches!(e, AgentError::InvalidStudy(_)) {
                inner.status = SessionStatus::Closed;
            }
            inner.error = Some(e.to_string());
        }
        inner.session = Some(session);
        inner.controller = Some(controller);
    });
    canonical_json(
        StatusCode::ACCEPTED,
        &json!({"session_id": id, "status": SessionStatus::Running, "resumed": resuming}),
    )
}

async fn get_session(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    let Some(slot) = app.slot(&id) else { return not_found("session", &id) };
    let (status, error, outcomes): (SessionStatus, Option<String>, Option<Vec<LoopOutcome>>) = {
        let inner = slot.inner.lock().expect("slot lock");
        (inner.status, inner.error.clone(), inner.session.as_ref().map(|s| s.outcomes().to_vec()))
    };
    // While running, outcomes come from the log mirror.
    let outcomes = outcomes.unwrap_or_else(|| {
        slot.feed
            .after(0)
            .iter()
            .filter_map(|e| serde_json::from_value::<LoopOutcome>(e.payload.get("outcome")?.clone()).ok())
            .collect()
    });
    let pending = (status == SessionStatus::AwaitingClarification)
        .then(|| outcomes.last().map(|o| o.response.text.clone()))
        .flatten();
    canonical_json(
        StatusCode::OK,
        &json!({
            "session_id": slot.id,
            "study_id": slot.study_id,
            "backend": slot.backend.label(),
            "status": status,
            "last_seq": slot.feed.last_seq(),
            "outcomes": outcomes,
            "pending_clarification": pending,
            "error": error,
        }),
    )
}

#[derive(Deserialize)]
struct EventsQuery {
    from: Option<u64>,
    #[serde(default = "yes")]
    follow: bool,
}

fn yes() -> bool {
    true
}

fn sse_frame(e: &SessionEvent) -> Event {
    let data =
        echo_agent_core::canonical::to_document(e).ok().and_then(|d| canonical_string(&d).ok()).unwrap_or_default();
    Event::default().event("session_event").id(e.seq.to_string()).data(data)
}

/// Events with seq above `from`, then live events while `follow` holds.
fn event_stream(feed: Arc<EventFeed>, from: u64, follow: bool) -> impl Stream<Item = Result<Event, Infallible>> {
    let rx = feed.latest.subscribe();
    stream::unfold((feed, rx, from, false), move |(feed, mut rx, cursor, finished)| async move {
        if finished {
            return None;
        }
        loop {
            let batch = feed.after(cursor);
            if let Some(last) = batch.last().map(|e| e.seq) {
                return Some((batch, (feed, rx, last, false)));
            }
            if !follow {
                return None;
            }
            if rx.changed().await.is_err() {
                return Some((Vec::new(), (feed, rx, cursor, true)));
            }
        }
    })
    .flat_map(|batch| stream::iter(batch.into_iter().map(|e| Ok(sse_frame(&e)))))
}

async fn session_events(
    State(app): State<Arc<AppState>>,
    UrlPath(id): UrlPath<String>,
    Query(q): Query<EventsQuery>,
    headers: HeaderMap,
) -> Response {
    let Some(slot) = app.slot(&id) else { return not_found("session", &id) };
    let resume = headers.get("last-event-id").and_then(|v| v.to_str().ok()).and_then(|v| v.parse().ok());
    let from = q.from.or(resume).unwrap_or(0);
    Sse::new(event_stream(Arc::clone(&slot.feed), from, q.follow)).keep_alive(KeepAlive::default()).into_response()
}

async fn list_tools(State(app): State<Arc<AppState>>) -> Response {
    canonical_json(StatusCode::OK, &app.registry.list_tools(None))
}

// ---------------------------------------------------------------------------
// Evaluation runs

#[derive(Deserialize)]
#[serde(untagged)]
enum QuestionSetRef {
    Path(String),
    Synthetic { synthetic: SyntheticSpec },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct SyntheticSpec {
    n: usize,
    seed: u64,
}

#[derive(Deserialize)]
#[serde(untagged)]
enum BackendChoice {
    Name(String),
    Spec(BackendSpec),
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct CreateRun {
    question_set: QuestionSetRef,
    backend: BackendChoice,
    #[serde(default)]
    seed: u64,
    #[serde(default)]
    share_cache: bool,
}

fn load_run_questions(app: &AppState, set: &QuestionSetRef) -> Result<Vec<LoadedQuestion>, Violation> {
    match set {
        QuestionSetRef::Path(p) => {
            let path = PathBuf::from(p);
            let path = if path.is_relative() { app.config.data_dir.join(path) } else { path };
            load_question_set(&path).map_err(|e| Violation::new("question_set", e.to_string()))
        }
        QuestionSetRef::Synthetic { synthetic } => {
            generate_synthetic_qa(synthetic.n, synthetic.seed, &app.config.thresholds)
                .map(|s| s.loaded())
                .map_err(|e| Violation::new("question_set.synthetic", e))
        }
    }
}

async fn create_run(State(app): State<Arc<AppState>>, body: Bytes) -> Response {
    let req: CreateRun = match parse_body(&body) {
        Ok(r) => r,
        Err(v) => return validation(&[v]),
    };
    let backend = match req.backend {
        BackendChoice::Name(n) => match BackendSpec::from_name(&n) {
            Ok(b) => b,
            Err(e) => return validation(&[Violation::new("backend", e)]),
        },
        BackendChoice::Spec(b) => b,
    };
    if let Err(e) = check_backend(&backend) {
        return validation(&[Violation::new("backend", e)]);
    }
    let app2 = Arc::clone(&app);
    let questions = match tokio::task::spawn_blocking(move || load_run_questions(&app2, &req.question_set)).await {
        Ok(Ok(q)) => q,
        Ok(Err(v)) => return validation(&[v]),
        Err(e) => {
            return canonical_json(
                StatusCode::INTERNAL_SERVER_ERROR,
                &json!({"error": "internal", "message": e.to_string()}),
            )
        }
    };
    let config = EvalConfig { agent: app.agent.clone(), share_cache: req.share_cache, ..EvalConfig::default() };
    let seed = req.seed;
    let run_id = run_id_for(&config, &backend, &questions, seed);
    {
        let mut runs = app.runs.lock().expect("runs lock");
        if runs.contains_key(&run_id) || app.dir("runs").join(format!("{run_id}.run.json")).exists() {
            return canonical_json(StatusCode::ACCEPTED, &json!({"run_id": run_id}));
        }
        runs.insert(
            run_id.clone(),
            RunRecord { run_id: run_id.clone(), status: RunStatus::Running, run: None, report: None, error: None },
        );
    }
    let worker = Arc::clone(&app);
    let id = run_id.clone();
    tokio::task::spawn_blocking(move || {
        let run = run_protocol(&config, &backend, &questions, seed);
        let report = score(&run);
        let path = worker.dir("runs").join(format!("{id}.run.json"));
        let record = match to_canonical(&json!({"run": run, "report": report}))
            .map_err(|e| e.to_string())
            .and_then(|b| std::fs::write(&path, b).map_err(|e| e.to_string()))
        {
            Ok(()) => RunRecord {
                run_id: id.clone(),
                status: RunStatus::Done,
                run: Some(run),
                report: Some(report),
                error: None,
            },
            Err(e) => {
                RunRecord { run_id: id.clone(), status: RunStatus::Failed, run: None, report: None, error: Some(e) }
            }
        };
        tracing::info!(run = %id, status = ?record.status, "evaluation run finished");
        worker.runs.lock().expect("runs lock").insert(id, record);
    });
    canonical_json(StatusCode::ACCEPTED, &json!({"run_id": run_id}))
}

async fn get_run(State(app): State<Arc<AppState>>, UrlPath(id): UrlPath<String>) -> Response {
    if let Some(r) = app.runs.lock().expect("runs lock").get(&id) {
        return canonical_json(StatusCode::OK, r);
    }
    // Runs from before a restart live only on disk.
    let valid_id = !id.is_empty() && id.chars().all(|c| c.is_ascii_hexdigit());
    let path = app.dir("runs").join(format!("{id}.run.json"));
    let stored =
        valid_id.then(|| std::fs::read(&path).ok()).flatten().and_then(|b| serde_json::from_slice::<Value>(&b).ok());
    match stored {
        Some(doc) => {
            let record = RunRecord {
                run_id: id,
                status: RunStatus::Done,
                run: serde_json::from_value(doc["run"].clone()).ok(),
                report: serde_json::from_value(doc["report"].clone()).ok(),
                error: None,
            };
            canonical_json(StatusCode::OK, &record)
        }
        None => not_found("evaluation run", &id),
    }
}

// ---------------------------------------------------------------------------

async fn require_token(State(app): State<Arc<AppState>>, request: Request, next: Next) -> Response {
    let Some(token) = app.config.token.as_deref() else { return next.run(request).await };
    let bearer = request
        .headers()
        .get(header::AUTHORIZATION)
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    // EventSource clients cannot set headers, so the token may also come as a query parameter.
    let in_query =
        request.uri().query().is_some_and(|q| q.split('&').any(|kv| kv.strip_prefix("token=") == Some(token)));
    if bearer == Some(token) || in_query {
        next.run(request).await
    } else {
        canonical_json(
            StatusCode::UNAUTHORIZED,
            &json!({"error": "unauthorized", "message": "missing or wrong bearer token"}),
        )
    }
}

pub fn router(app: Arc<AppState>) -> Router {
    Router::new()
        .route("/sessions", post(create_session))
        .route("/sessions/{id}", get(get_session))
        .route("/sessions/{id}/messages", post(post_message))
        .route("/sessions/{id}/events", get(session_events))
        .route("/tools", get(list_tools))
        .route("/eval/runs", post(create_run))
        .route("/eval/runs/{id}", get(get_run))
        .layer(middleware::from_fn_with_state(Arc::clone(&app), require_token))
        .with_state(app)
}

/// Serves until the shutdown future resolves.
pub async fn serve(
    listener: tokio::net::TcpListener,
    app: Arc<AppState>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> std::io::Result<()> {
    axum::serve(listener, router(app)).with_graceful_shutdown(shutdown).await
}
