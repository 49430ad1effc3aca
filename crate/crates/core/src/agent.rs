//! The reasoning loop: think, select tools, execute, integrate, repeat.
//!
//! A [`Session`] owns the memory buffer and the append-only event log for
//! one study. Each user turn runs [`run_loop`] until the controller answers,
//! asks for clarification, or the budget runs out. Memory entries and
//! session events are written together, one event per entry, so the log is
//! enough to rebuild memory and to re-derive every recorded outcome.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::fmt;
use std::io::{BufRead, Write};
use std::path::Path;
use std::sync::Arc;

use crate::canonical::{self, canonical_string, fingerprint_document, Document};
use crate::clock::Clock;
use crate::controller::{
    assess, choose_option, infer_category, parse_action, CallRecord, ClipOverview, Controller, ControllerView,
    ReasoningStep, StepKind, StudyOverview, DEFAULT_MEMORY_WINDOW,
};
use crate::domain::{
    validate_study, AnswerKey, ArtifactRef, ClinicianQuery, EchoStudy, EventKind, SessionEvent, Violation,
};
use crate::grading::ClinicalThresholds;
use crate::protocol::{ErrorCode, ToolDescriptor, ToolError, ToolRequest, ToolResponse};
use crate::registry::{cache_key, ExecutionPolicy, ToolRegistry};
use crate::tools::{ed_es_frames, generate_report, STUDY_FP_ARG};

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AgentConfig {
    #[serde(default = "default_t_max")]
    pub t_max_ms: u64,
    #[serde(default = "default_max_iterations")]
    pub max_iterations: u32,
    #[serde(default)]
    pub execution_policy: ExecutionPolicy,
    #[serde(default = "default_window")]
    pub memory_window: usize,
    #[serde(default)]
    pub thresholds: ClinicalThresholds,
}

fn default_t_max() -> u64 {
    300_000
}
fn default_max_iterations() -> u32 {
    12
}
fn default_window() -> usize {
    DEFAULT_MEMORY_WINDOW
}

impl Default for AgentConfig {
    fn default() -> Self {
        AgentConfig {
            t_max_ms: default_t_max(),
            max_iterations: default_max_iterations(),
            execution_policy: ExecutionPolicy::default(),
            memory_window: default_window(),
            thresholds: ClinicalThresholds::default(),
        }
    }
}

impl AgentConfig {
    pub fn validate(&self) -> Result<(), String> {
        if self.t_max_ms == 0 {
            return Err("t_max_ms must be positive".into());
        }
        if self.max_iterations == 0 {
            return Err("max_iterations must be positive".into());
        }
        self.thresholds.validate().map_err(|e| e.to_string())
    }
}

/// End-diastole / end-systole digest of one clip's area trace.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TemporalSummary {
    pub clip_id: String,
    pub frame_count: u32,
    pub ed_frame: usize,
    pub es_frame: usize,
    pub area_min_cm2: f64,
    pub area_max_cm2: f64,
}

impl TemporalSummary {
    pub fn of_clip(clip: &crate::domain::ClipDescriptor) -> Option<Self> {
        if clip.area_trace_cm2.is_empty() {
            return None;
        }
        let (ed_frame, es_frame) = ed_es_frames(&clip.area_trace_cm2);
        Some(TemporalSummary {
            clip_id: clip.clip_id.clone(),
            frame_count: clip.frame_count,
            ed_frame,
            es_frame,
            area_min_cm2: clip.area_trace_cm2[es_frame],
            area_max_cm2: clip.area_trace_cm2[ed_frame],
        })
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MemoryKind {
    Message,
    Thought,
    ToolCall,
    ToolResult,
}

impl MemoryKind {
    pub fn of_event(kind: EventKind) -> MemoryKind {
        match kind {
            EventKind::Thought => MemoryKind::Thought,
            EventKind::ToolCall => MemoryKind::ToolCall,
            EventKind::ToolResult => MemoryKind::ToolResult,
            _ => MemoryKind::Message,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MemoryEntry {
    pub seq: u64,
    pub kind: MemoryKind,
    pub payload: Document,
}

/// Append-only memory. Entries share sequence numbers with session events.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct MemoryBuffer {
    entries: Vec<MemoryEntry>,
}

impl MemoryBuffer {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn entries(&self) -> &[MemoryEntry] {
        &self.entries
    }

    pub fn len(&self) -> usize {
        self.entries.len()
    }

    pub fn is_empty(&self) -> bool {
        self.entries.is_empty()
    }

    pub fn next_seq(&self) -> u64 {
        self.entries.last().map_or(1, |e| e.seq + 1)
    }

    /// Appends an entry. Panics if `seq` does not increase, since that would
    /// break the log contract.
    pub fn push(&mut self, entry: MemoryEntry) {
        if let Some(last) = self.entries.last() {
            assert!(entry.seq > last.seq, "memory seq must increase");
        }
        self.entries.push(entry);
    }

    pub fn from_events(events: &[SessionEvent]) -> Self {
        let mut m = MemoryBuffer::new();
        for e in events {
            m.push(MemoryEntry { seq: e.seq, kind: MemoryKind::of_event(e.kind), payload: e.payload.clone() });
        }
        m
    }

    pub fn count(&self, kind: MemoryKind) -> usize {
        self.entries.iter().filter(|e| e.kind == kind).count()
    }

    fn tool_results(&self) -> impl Iterator<Item = &MemoryEntry> {
        self.entries.iter().filter(|e| e.kind == MemoryKind::ToolResult)
    }
}

/// Loop state for one turn.
#[derive(Debug, Clone)]
pub struct AgentState {
    pub query: ClinicianQuery,
    pub study: Arc<EchoStudy>,
    pub iteration: u32,
    pub working_findings: BTreeMap<String, Value>,
    pub clip_summaries: BTreeMap<String, TemporalSummary>,
    pub pending_clarification: Option<String>,
    /// Artifact that last wrote each finding.
    pub provenance: BTreeMap<String, ArtifactRef>,
    /// Clarification replies received since the query was asked.
    pub replies: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum AgentError {
    #[error("invalid study: {}", join_violations(.0))]
    InvalidStudy(Vec<Violation>),
    #[error("invalid query: {}", join_violations(.0))]
    InvalidQuery(Vec<Violation>),
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error("session is not awaiting clarification")]
    NotAwaitingClarification,
}

fn join_violations(v: &[Violation]) -> String {
    v.iter().map(|x| format!("{}: {}", x.path, x.message)).collect::<Vec<_>>().join("; ")
}

/// Findings, provenance and replies implied by memory.
#[derive(Debug, Clone, Default, PartialEq)]
pub struct Recollection {
    pub findings: BTreeMap<String, Value>,
    pub provenance: BTreeMap<String, ArtifactRef>,
    pub replies: Vec<String>,
}

pub fn recollect(memory: &MemoryBuffer) -> Recollection {
    let mut r = Recollection::default();
    for e in memory.entries() {
        match e.kind {
            MemoryKind::ToolResult => {
                let artifact = e.payload["response"]["artifacts"]
                    .as_array()
                    .and_then(|a| a.first())
                    .and_then(|a| serde_json::from_value::<ArtifactRef>(a.clone()).ok());
                if let Some(merged) = e.payload.get("merged").and_then(Value::as_object) {
                    for (k, v) in merged {
                        r.findings.insert(k.clone(), v.clone());
                        match &artifact {
                            Some(a) => {
                                r.provenance.insert(k.clone(), a.clone());
                            }
                            None => {
                                r.provenance.remove(k);
                            }
                        }
                    }
                }
            }
            MemoryKind::Message if e.payload.get("role").and_then(Value::as_str) == Some("query") => {
                r.replies.clear();
            }
            MemoryKind::Message if e.payload.get("role").and_then(Value::as_str) == Some("reply") => {
                if let Some(t) = e.payload.get("text").and_then(Value::as_str) {
                    r.replies.push(t.to_string());
                }
            }
            _ => {}
        }
    }
    r
}

pub fn initialize_state(
    query: ClinicianQuery,
    study: Arc<EchoStudy>,
    memory: &MemoryBuffer,
) -> Result<AgentState, AgentError> {
    validate_study(&study).map_err(AgentError::InvalidStudy)?;
    query.validate().map_err(AgentError::InvalidQuery)?;
    let clip_summaries =
        study.clips.iter().filter_map(TemporalSummary::of_clip).map(|s| (s.clip_id.clone(), s)).collect();
    let r = recollect(memory);
    Ok(AgentState {
        query,
        study,
        iteration: 0,
        working_findings: r.findings,
        clip_summaries,
        pending_clarification: None,
        provenance: r.provenance,
        replies: r.replies,
    })
}

pub fn study_overview(study: &EchoStudy, summaries: &BTreeMap<String, TemporalSummary>) -> StudyOverview {
    StudyOverview {
        study_id: study.study_id.clone(),
        patient_context: study.patient_context.clone(),
        clips: study
            .clips
            .iter()
            .map(|c| ClipOverview {
                clip_id: c.clip_id.clone(),
                view: c.declared_view,
                quality: c.quality,
                frame_count: c.frame_count,
                summary: summaries.get(&c.clip_id).cloned(),
            })
            .collect(),
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ExitKind {
    Answer,
    Clarification,
    Timeout,
}

impl ExitKind {
    pub fn event_kind(self) -> EventKind {
        match self {
            ExitKind::Answer => EventKind::FinalAnswer,
            ExitKind::Clarification => EventKind::ClarificationRequest,
            ExitKind::Timeout => EventKind::Timeout,
        }
    }
}

/// Why a turn ended through the timeout fallback.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TimeoutReason {
    Budget,
    IterationCap,
    ControllerFailure,
    FormatError,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    pub finding: String,
    pub artifact: ArtifactRef,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct FinalResponse {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<AnswerKey>,
    #[serde(default)]
    pub evidence: Vec<Evidence>,
    #[serde(default)]
    pub low_confidence: bool,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LoopOutcome {
    pub exit: ExitKind,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<TimeoutReason>,
    pub response: FinalResponse,
    pub artifacts: Vec<ArtifactRef>,
    pub iterations_used: u32,
    pub elapsed_ms: u64,
}

/// Links cited findings to the artifacts that produced them. Without an
/// explicit `cites` list every finding with an artifact is cited.
fn evidence_for(cites: Option<&Value>, provenance: &BTreeMap<String, ArtifactRef>) -> Vec<Evidence> {
    let names: Vec<String> = match cites.and_then(Value::as_array) {
        Some(list) => list.iter().filter_map(Value::as_str).map(str::to_string).collect(),
        None => provenance.keys().cloned().collect(),
    };
    let mut seen = std::collections::BTreeSet::new();
    names
        .into_iter()
        .filter(|n| seen.insert(n.clone()))
        .filter_map(|n| provenance.get(&n).map(|a| Evidence { finding: n, artifact: a.clone() }))
        .collect()
}

/// Turns an answer step into the final response. With options, the draft
/// must carry a valid choice.
pub fn compose_answer(step: &ReasoningStep, state: &AgentState) -> Result<FinalResponse, String> {
    let draft = step.answer_draft.as_ref().ok_or("answer step has no draft")?;
    let choice = if state.query.has_options() {
        let raw = draft.get("choice").and_then(Value::as_str).ok_or("answer must include a choice among A-D")?;
        Some(raw.trim().parse::<AnswerKey>().map_err(|_| format!("choice {raw:?} is not one of A-D"))?)
    } else {
        None
    };
    let mut text =
        draft.get("text").or_else(|| draft.get("rationale")).and_then(Value::as_str).unwrap_or("").trim().to_string();
    if text.is_empty() {
        text = match choice {
            Some(k) => match state.query.option_text(k) {
                Some(t) => format!("Answer {k}: {t}"),
                None => format!("Answer {k}"),
            },
            None if !step.thought_text.is_empty() => step.thought_text.clone(),
            None => "No narrative provided.".to_string(),
        };
    }
    Ok(FinalResponse {
        text,
        choice,
        evidence: evidence_for(draft.get("cites"), &state.provenance),
        low_confidence: draft.get("low_confidence").and_then(Value::as_bool).unwrap_or(false),
    })
}

/// Deterministic best-effort answer once the loop cannot continue.
pub fn timeout_fallback(
    state: &AgentState,
    reason: TimeoutReason,
    diagnostic: Option<&str>,
    config: &AgentConfig,
) -> FinalResponse {
    let lead = match (reason, diagnostic) {
        (TimeoutReason::Budget, _) => format!("Time budget of {} ms exhausted", config.t_max_ms),
        (TimeoutReason::IterationCap, _) => format!("Iteration cap of {} reached", config.max_iterations),
        (TimeoutReason::ControllerFailure, Some(d)) => format!("Controller unavailable ({d})"),
        (TimeoutReason::ControllerFailure, None) => "Controller unavailable".to_string(),
        (TimeoutReason::FormatError, Some(d)) => format!("Controller output rejected ({d})"),
        (TimeoutReason::FormatError, None) => "Controller output rejected".to_string(),
    };
    let mut dialogue = state.query.text.clone();
    for r in &state.replies {
        dialogue.push(' ');
        dialogue.push_str(r);
    }
    let assessment = state
        .query
        .category
        .or_else(|| infer_category(&dialogue))
        .and_then(|c| assess(c, &state.working_findings, &config.thresholds));

    if state.query.has_options() {
        if let Some(a) = assessment {
            if let Some(key) = choose_option(&state.query, a.category, a.target) {
                let label = state.query.option_text(key).map(|t| format!("{key} ({t})")).unwrap_or(key.to_string());
                return FinalResponse {
                    text: format!(
                        "{lead}; answering from findings gathered so far: {} -> {label}. Low confidence.",
                        a.text
                    ),
                    choice: Some(key),
                    evidence: evidence_for(Some(&json!(a.cites)), &state.provenance),
                    low_confidence: true,
                };
            }
        }
        return FinalResponse {
            text: format!("{lead}; no findings sufficed to grade the question, defaulting to option A."),
            choice: Some(AnswerKey::A),
            evidence: Vec::new(),
            low_confidence: true,
        };
    }
    let text = if state.working_findings.is_empty() {
        format!("{lead}; no findings were collected.")
    } else {
        let report = generate_report(&state.working_findings, &config.thresholds);
        format!("{lead}. Findings so far: {}. {}", report.measurements, report.impression)
    };
    FinalResponse { text, choice: None, evidence: evidence_for(None, &state.provenance), low_confidence: true }
}

// ---------------------------------------------------------------------------
// Tool selection and execution

#[derive(Debug, Clone, PartialEq)]
pub enum PlanAction {
    Execute,
    /// Reuse an ok result already in memory.
    Remembered(Box<ToolResponse>),
    /// Same call as an earlier entry of this plan.
    SameAs(usize),
    NotFound,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PlannedCall {
    pub request: ToolRequest,
    pub descriptor: Option<ToolDescriptor>,
    pub cache_key: Option<String>,
    pub action: PlanAction,
}

/// Resolves proposals against the registry, fills in the study fingerprint
/// argument where a tool declares it, and deduplicates against ok results
/// in memory and earlier calls of the same plan. Proposal order is kept.
pub fn select_tools(
    step: &ReasoningStep,
    registry: &ToolRegistry,
    memory: &MemoryBuffer,
    study_fp: &str,
    request_prefix: &str,
) -> Vec<PlannedCall> {
    let mut remembered: BTreeMap<String, ToolResponse> = BTreeMap::new();
    for e in memory.tool_results() {
        if let (Some(k), Ok(resp)) = (
            e.payload.get("cache_key").and_then(Value::as_str),
            serde_json::from_value::<ToolResponse>(e.payload["response"].clone()),
        ) {
            if resp.is_ok() {
                remembered.entry(k.to_string()).or_insert(resp);
            }
        }
    }
    let mut plan: Vec<PlannedCall> = Vec::with_capacity(step.proposed_calls.len());
    for (i, proposal) in step.proposed_calls.iter().enumerate() {
        let mut request = proposal.clone();
        request.request_id = format!("{request_prefix}-{i}");
        let Some(descriptor) = registry.resolve(&request.tool, request.version_req.as_ref()) else {
            plan.push(PlannedCall { request, descriptor: None, cache_key: None, action: PlanAction::NotFound });
            continue;
        };
        let declares_fp = descriptor.input_schema["properties"].get(STUDY_FP_ARG).is_some();
        if declares_fp {
            if let Some(args) = request.arguments.as_object_mut() {
                args.entry(STUDY_FP_ARG.to_string()).or_insert_with(|| json!(study_fp));
            }
        }
        let key = cache_key(&descriptor.name, &descriptor.version, &request.arguments);
        let action = if let Some(resp) = remembered.get(&key) {
            PlanAction::Remembered(Box::new(resp.clone()))
        } else if let Some(j) = plan.iter().position(|p| p.cache_key.as_deref() == Some(key.as_str())) {
            PlanAction::SameAs(j)
        } else {
            PlanAction::Execute
        };
        plan.push(PlannedCall { request, descriptor: Some(descriptor), cache_key: Some(key), action });
    }
    plan
}

fn reissue(mut response: ToolResponse, request_id: &str) -> ToolResponse {
    response.request_id = request_id.to_string();
    response.latency_ms = 0;
    response.from_cache = false;
    for a in &mut response.artifacts {
        a.artifact_id = format!("{request_id}:{}", a.producer_tool);
    }
    response
}

/// Runs one planned call. `earlier` holds the responses of preceding plan
/// entries.
pub fn execute_planned(
    call: &PlannedCall,
    earlier: &[ToolResponse],
    registry: &ToolRegistry,
    study: &Arc<EchoStudy>,
    policy: &ExecutionPolicy,
    clock: &dyn Clock,
) -> (ToolResponse, &'static str) {
    match &call.action {
        PlanAction::NotFound => {
            let message = format!("tool {:?} is not registered", call.request.tool);
            (
                ToolResponse::failed(&call.request.request_id, ToolError::new(ErrorCode::ToolNotFound, message), 0),
                "not_found",
            )
        }
        PlanAction::Remembered(resp) => (reissue((**resp).clone(), &call.request.request_id), "memory"),
        PlanAction::SameAs(j) if earlier.get(*j).is_some_and(ToolResponse::is_ok) => {
            (reissue(earlier[*j].clone(), &call.request.request_id), "memory")
        }
        _ => (registry.execute_with_clock(&call.request, policy, study, clock), "executed"),
    }
}

/// Executes a plan in order. Each call's deadline is the policy deadline
/// capped by what remains of the session budget.
pub fn execute_tools(
    plan: &[PlannedCall],
    registry: &ToolRegistry,
    study: &Arc<EchoStudy>,
    policy: &ExecutionPolicy,
    clock: &dyn Clock,
    budget_end_ms: u64,
) -> Vec<ToolResponse> {
    let mut results = Vec::with_capacity(plan.len());
    for call in plan {
        let p = ExecutionPolicy {
            deadline_ms: policy.deadline_ms.min(budget_end_ms.saturating_sub(clock.now_ms())),
            ..*policy
        };
        let (r, _) = execute_planned(call, &results, registry, study, &p, clock);
        results.push(r);
    }
    results
}

/// Output fields merged into working findings for an ok response.
pub fn merged_findings(
    response: &ToolResponse,
    call: &PlannedCall,
    registry: &ToolRegistry,
) -> BTreeMap<String, Value> {
    let mut out = BTreeMap::new();
    let (Some(output), true) = (response.output.as_ref(), response.is_ok()) else {
        return out;
    };
    let served = response.fallback.as_ref().and_then(|f| f.served_by.as_deref());
    let descriptor = match served {
        Some(alt) => registry.resolve(alt, None),
        None => call.descriptor.clone(),
    };
    if let Some(d) = descriptor {
        for key in &d.findings {
            if let Some(v) = output.get(key).filter(|v| !v.is_null()) {
                out.insert(key.clone(), v.clone());
            }
        }
    }
    out
}

/// Merges one result into the state. Later writes overwrite per key.
pub fn update_state(state: &mut AgentState, merged: &BTreeMap<String, Value>, artifact: Option<&ArtifactRef>) {
    for (k, v) in merged {
        state.working_findings.insert(k.clone(), v.clone());
        match artifact {
            Some(a) => {
                state.provenance.insert(k.clone(), a.clone());
            }
            None => {
                state.provenance.remove(k);
            }
        }
    }
}

// ---------------------------------------------------------------------------
// Sessions

pub type EventSink = Box<dyn FnMut(&SessionEvent) + Send>;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SessionStatus {
    Idle,
    Running,
    AwaitingClarification,
    Closed,
}

/// One study conversation: memory, event log and the pending query.
pub struct Session {
    pub id: String,
    study: Arc<EchoStudy>,
    study_fp: String,
    memory: MemoryBuffer,
    events: Vec<SessionEvent>,
    clock: Arc<dyn Clock>,
    sink: Option<EventSink>,
    pending: Option<ClinicianQuery>,
    outcomes: Vec<LoopOutcome>,
}

impl fmt::Debug for Session {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("Session")
            .field("id", &self.id)
            .field("study_id", &self.study.study_id)
            .field("events", &self.events.len())
            .field("pending", &self.pending.is_some())
            .finish()
    }
}

impl Session {
    pub fn new(id: impl Into<String>, study: Arc<EchoStudy>, clock: Arc<dyn Clock>) -> Self {
        let study_fp = study.content_fingerprint();
        Session {
            id: id.into(),
            study,
            study_fp,
            memory: MemoryBuffer::new(),
            events: Vec::new(),
            clock,
            sink: None,
            pending: None,
            outcomes: Vec::new(),
        }
    }

    /// Rebuilds a session from its event log.
    pub fn recover(
        id: impl Into<String>,
        study: Arc<EchoStudy>,
        clock: Arc<dyn Clock>,
        events: Vec<SessionEvent>,
    ) -> Result<Self, String> {
        check_log_structure(&events)?;
        let mut s = Session::new(id, study, clock);
        s.memory = MemoryBuffer::from_events(&events);
        let mut last_query = None;
        for e in &events {
            match e.kind {
                EventKind::UserMessage if e.payload["role"] == "query" => {
                    last_query = serde_json::from_value::<ClinicianQuery>(e.payload["query"].clone()).ok();
                }
                EventKind::FinalAnswer | EventKind::ClarificationRequest | EventKind::Timeout => {
                    let o: LoopOutcome = serde_json::from_value(e.payload["outcome"].clone())
                        .map_err(|err| format!("event {}: bad outcome: {err}", e.seq))?;
                    s.outcomes.push(o);
                }
                _ => {}
            }
        }
        if events.last().map(|e| e.kind) == Some(EventKind::ClarificationRequest) {
            s.pending = last_query;
        }
        s.events = events;
        Ok(s)
    }

    pub fn set_sink(&mut self, sink: EventSink) {
        self.sink = Some(sink);
    }

    pub fn study(&self) -> &Arc<EchoStudy> {
        &self.study
    }

    pub fn memory(&self) -> &MemoryBuffer {
        &self.memory
    }

    pub fn events(&self) -> &[SessionEvent] {
        &self.events
    }

    pub fn outcomes(&self) -> &[LoopOutcome] {
        &self.outcomes
    }

    pub fn pending_query(&self) -> Option<&ClinicianQuery> {
        self.pending.as_ref()
    }

    pub fn status(&self) -> SessionStatus {
        if self.pending.is_some() {
            SessionStatus::AwaitingClarification
        } else {
            SessionStatus::Idle
        }
    }

    /// Controller decisions consumed so far (thoughts plus rejected outputs).
    pub fn controller_calls(&self) -> usize {
        self.events
            .iter()
            .filter(|e| {
                e.kind == EventKind::Thought || (e.kind == EventKind::Error && e.payload["error"] == "parse_error")
            })
            .count()
    }

    /// Canonical `.events.jsonl` text of the log.
    pub fn events_jsonl(&self) -> String {
        events_to_jsonl(&self.events)
    }

    fn record_at(&mut self, kind: EventKind, payload: Value, timestamp_ms: u64) -> u64 {
        // Store the canonical form so memory equals what a log reload yields.
        let payload =
            canonical::canonicalize(&payload).ok().and_then(|b| serde_json::from_slice(&b).ok()).unwrap_or(payload);
        let seq = self.memory.next_seq();
        self.memory.push(MemoryEntry { seq, kind: MemoryKind::of_event(kind), payload: payload.clone() });
        let event = SessionEvent { seq, timestamp_ms, kind, payload };
        if let Some(sink) = self.sink.as_mut() {
            sink(&event);
        }
        self.events.push(event);
        seq
    }

    fn record(&mut self, kind: EventKind, payload: Value) -> (u64, u64) {
        let ts = self.clock.now_ms();
        (self.record_at(kind, payload, ts), ts)
    }

    fn user_message(&mut self, role: &str, text: &str, query: &ClinicianQuery, config: &AgentConfig) -> u64 {
        let summaries: BTreeMap<String, TemporalSummary> =
            self.study.clips.iter().filter_map(TemporalSummary::of_clip).map(|s| (s.clip_id.clone(), s)).collect();
        let payload = json!({
            "role": role,
            "text": text,
            "query": query,
            "study": study_overview(&self.study, &summaries),
            "study_fp": self.study_fp,
            "config": {
                "t_max_ms": config.t_max_ms,
                "max_iterations": config.max_iterations,
                "thresholds": config.thresholds,
            },
        });
        self.record(EventKind::UserMessage, payload).1
    }

    /// Asks a new question.
    pub fn ask(
        &mut self,
        query: ClinicianQuery,
        config: &AgentConfig,
        registry: &ToolRegistry,
        controller: &mut dyn Controller,
    ) -> Result<LoopOutcome, AgentError> {
        config.validate().map_err(AgentError::InvalidConfig)?;
        let state = initialize_state(query.clone(), Arc::clone(&self.study), &self.memory)?;
        self.pending = None;
        let start = self.user_message("query", &query.text, &query, config);
        let state = AgentState { replies: Vec::new(), ..state };
        Ok(self.drive(state, start, config, registry, controller))
    }

    /// Answers a pending clarification and resumes the suspended question.
    pub fn reply(
        &mut self,
        text: &str,
        config: &AgentConfig,
        registry: &ToolRegistry,
        controller: &mut dyn Controller,
    ) -> Result<LoopOutcome, AgentError> {
        config.validate().map_err(AgentError::InvalidConfig)?;
        let query = self.pending.clone().ok_or(AgentError::NotAwaitingClarification)?;
        let start = self.user_message("reply", text, &query, config);
        let state = initialize_state(query, Arc::clone(&self.study), &self.memory)?;
        self.pending = None;
        Ok(self.drive(state, start, config, registry, controller))
    }

    /// A reply when a clarification is pending, otherwise a new open question.
    pub fn post_message(
        &mut self,
        query: ClinicianQuery,
        config: &AgentConfig,
        registry: &ToolRegistry,
        controller: &mut dyn Controller,
    ) -> Result<LoopOutcome, AgentError> {
        if self.pending.is_some() {
            self.reply(&query.text, config, registry, controller)
        } else {
            self.ask(query, config, registry, controller)
        }
    }

    /// Current state for the pending or given query, rebuilt from memory.
    pub fn state_for(&self, query: ClinicianQuery) -> Result<AgentState, AgentError> {
        initialize_state(query, Arc::clone(&self.study), &self.memory)
    }

    fn view(
        &self,
        state: &AgentState,
        registry: &ToolRegistry,
        config: &AgentConfig,
        feedback: Option<String>,
    ) -> ControllerView {
        let calls = self
            .memory
            .tool_results()
            .map(|e| {
                let resp: Option<ToolResponse> = serde_json::from_value(e.payload["response"].clone()).ok();
                CallRecord {
                    tool: e.payload["tool"].as_str().unwrap_or_default().to_string(),
                    arguments: e.payload["arguments"].clone(),
                    ok: resp.as_ref().is_some_and(ToolResponse::is_ok),
                    error_code: resp.and_then(|r| r.error_code()),
                }
            })
            .collect();
        ControllerView {
            query: state.query.clone(),
            replies: state.replies.clone(),
            overview: study_overview(&state.study, &state.clip_summaries),
            findings: state.working_findings.clone(),
            calls,
            memory: self.memory.entries().to_vec(),
            tools: registry.list_tools(None),
            iteration: state.iteration,
            max_iterations: config.max_iterations,
            state_fingerprint: state_fingerprint(state, &self.study_fp),
            feedback,
        }
    }

    fn finish(
        &mut self,
        exit: ExitKind,
        reason: Option<TimeoutReason>,
        response: FinalResponse,
        state: &AgentState,
        start: u64,
    ) -> LoopOutcome {
        let now = self.clock.now_ms();
        let outcome = LoopOutcome {
            exit,
            reason,
            response,
            artifacts: session_artifacts(&self.memory),
            iterations_used: state.iteration,
            elapsed_ms: now.saturating_sub(start),
        };
        let payload = json!({"outcome": canonical::to_document(&outcome).unwrap_or(Value::Null)});
        self.record_at(exit.event_kind(), payload, now);
        if exit == ExitKind::Clarification {
            self.pending = Some(state.query.clone());
        }
        self.outcomes.push(outcome.clone());
        outcome
    }

    fn timeout(
        &mut self,
        reason: TimeoutReason,
        diagnostic: Option<&str>,
        state: &AgentState,
        start: u64,
        config: &AgentConfig,
    ) -> LoopOutcome {
        let response = timeout_fallback(state, reason, diagnostic, config);
        self.finish(ExitKind::Timeout, Some(reason), response, state, start)
    }

    fn drive(
        &mut self,
        mut state: AgentState,
        start: u64,
        config: &AgentConfig,
        registry: &ToolRegistry,
        controller: &mut dyn Controller,
    ) -> LoopOutcome {
        let budget_end = start.saturating_add(config.t_max_ms);
        let mut feedback: Option<String> = None;
        let mut parse_retry_used = false;
        let mut bounce_used = false;
        let turn = self.memory.count(MemoryKind::Message);
        loop {
            if state.iteration >= config.max_iterations {
                return self.timeout(TimeoutReason::IterationCap, None, &state, start, config);
            }
            if self.clock.now_ms() >= budget_end {
                return self.timeout(TimeoutReason::Budget, None, &state, start, config);
            }
            let view = self.view(&state, registry, config, feedback.take());
            let raw = match controller.next_action(&view) {
                Ok(raw) => raw,
                Err(e) => {
                    self.record(EventKind::Error, json!({"error": "controller_failure", "message": e.0}));
                    return self.timeout(TimeoutReason::ControllerFailure, Some(&e.0), &state, start, config);
                }
            };
            let step = match parse_action(&raw) {
                Ok(step) => step,
                Err(e) => {
                    self.record(EventKind::Error, json!({"error": "parse_error", "message": e.0, "raw": raw}));
                    if parse_retry_used {
                        return self.timeout(TimeoutReason::FormatError, Some(&e.0), &state, start, config);
                    }
                    parse_retry_used = true;
                    feedback = Some(format!("your previous output was rejected: {}", e.0));
                    continue;
                }
            };
            self.record(
                EventKind::Thought,
                json!({
                    "iteration": state.iteration,
                    "state_fp": view.state_fingerprint,
                    "step": step,
                }),
            );
            state.iteration += 1;
            match step.kind {
                StepKind::Clarify => {
                    let text = step.clarification_text.clone().unwrap_or_default();
                    state.pending_clarification = Some(text.clone());
                    let response = FinalResponse { text, choice: None, evidence: Vec::new(), low_confidence: false };
                    return self.finish(ExitKind::Clarification, None, response, &state, start);
                }
                StepKind::Answer => match compose_answer(&step, &state) {
                    Ok(response) => return self.finish(ExitKind::Answer, None, response, &state, start),
                    Err(msg) => {
                        self.record(EventKind::Error, json!({"error": "missing_choice", "message": msg}));
                        if bounce_used {
                            return self.timeout(TimeoutReason::FormatError, Some(&msg), &state, start, config);
                        }
                        bounce_used = true;
                        feedback = Some(format!("your answer was rejected: {msg}"));
                    }
                },
                StepKind::Act => {
                    let prefix = format!("{}-{}-{}", self.id, turn, state.iteration);
                    let plan = select_tools(&step, registry, &self.memory, &self.study_fp, &prefix);
                    let mut results: Vec<ToolResponse> = Vec::with_capacity(plan.len());
                    for call in &plan {
                        let mut call_payload = json!({
                            "request_id": call.request.request_id,
                            "tool": call.request.tool,
                            "arguments": call.request.arguments,
                        });
                        if let Some(v) = &call.request.version_req {
                            call_payload["version_req"] = json!(v.to_string());
                        }
                        if let Some(k) = &call.cache_key {
                            call_payload["cache_key"] = json!(k);
                        }
                        let (call_seq, _) = self.record(EventKind::ToolCall, call_payload);
                        let remaining = budget_end.saturating_sub(self.clock.now_ms());
                        let policy = ExecutionPolicy {
                            deadline_ms: config.execution_policy.deadline_ms.min(remaining),
                            ..config.execution_policy
                        };
                        let (response, source) =
                            execute_planned(call, &results, registry, &state.study, &policy, self.clock.as_ref());
                        let merged = merged_findings(&response, call, registry);
                        update_state(&mut state, &merged, response.artifacts.first());
                        let mut result_payload = json!({
                            "call_seq": call_seq,
                            "request_id": call.request.request_id,
                            "tool": call.request.tool,
                            "arguments": call.request.arguments,
                            "source": source,
                            "response": canonical::to_document(&response).unwrap_or(Value::Null),
                            "merged": merged,
                        });
                        if let Some(k) = &call.cache_key {
                            result_payload["cache_key"] = json!(k);
                        }
                        self.record(EventKind::ToolResult, result_payload);
                        results.push(response);
                    }
                }
            }
        }
    }
}

fn state_fingerprint(state: &AgentState, study_fp: &str) -> String {
    let doc = json!({
        "query": state.query,
        "study_fp": study_fp,
        "findings": state.working_findings,
        "iteration": state.iteration,
        "replies": state.replies,
    });
    fingerprint_document(&doc).unwrap_or_default()
}

fn session_artifacts(memory: &MemoryBuffer) -> Vec<ArtifactRef> {
    memory
        .tool_results()
        .filter_map(|e| e.payload["response"]["artifacts"].as_array())
        .flatten()
        .filter_map(|a| serde_json::from_value(a.clone()).ok())
        .collect()
}

/// Runs one question through a session: a think/act cycle
/// until answer, clarification or timeout.
pub fn run_loop(
    query: ClinicianQuery,
    config: &AgentConfig,
    registry: &ToolRegistry,
    controller: &mut dyn Controller,
    session: &mut Session,
) -> Result<LoopOutcome, AgentError> {
    session.ask(query, config, registry, controller)
}

// ---------------------------------------------------------------------------
// Event log persistence and replay

pub fn events_to_jsonl(events: &[SessionEvent]) -> String {
    let mut out = String::new();
    for e in events {
        let doc = canonical::to_document(e).expect("session events are finite");
        out.push_str(&canonical_string(&doc).expect("session events are finite"));
        out.push('\n');
    }
    out
}

#[derive(Debug, thiserror::Error)]
pub enum EventLogError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

pub fn parse_events_jsonl(text: &str) -> Result<Vec<SessionEvent>, EventLogError> {
    text.lines()
        .enumerate()
        .filter(|(_, l)| !l.trim().is_empty())
        .map(|(i, l)| serde_json::from_str(l).map_err(|e| EventLogError::Parse { line: i + 1, message: e.to_string() }))
        .collect()
}

pub fn read_events_file(path: &Path) -> Result<Vec<SessionEvent>, EventLogError> {
    let io = |source| EventLogError::Io { path: path.display().to_string(), source };
    let file = std::fs::File::open(path).map_err(io)?;
    let mut events = Vec::new();
    for (i, line) in std::io::BufReader::new(file).lines().enumerate() {
        let line = line.map_err(io)?;
        if line.trim().is_empty() {
            continue;
        }
        events.push(
            serde_json::from_str(&line).map_err(|e| EventLogError::Parse { line: i + 1, message: e.to_string() })?,
        );
    }
    Ok(events)
}

pub fn append_event(path: &Path, event: &SessionEvent) -> std::io::Result<()> {
    let mut f = std::fs::OpenOptions::new().create(true).append(true).open(path)?;
    f.write_all(events_to_jsonl(std::slice::from_ref(event)).as_bytes())
}

fn check_log_structure(events: &[SessionEvent]) -> Result<(), String> {
    let mut last = 0;
    let mut calls = std::collections::BTreeSet::new();
    for e in events {
        if e.seq <= last {
            return Err(format!("seq {} does not increase after {last}", e.seq));
        }
        last = e.seq;
        match e.kind {
            EventKind::ToolCall => {
                calls.insert(e.seq);
            }
            EventKind::ToolResult => {
                let call = e.payload["call_seq"].as_u64().unwrap_or(0);
                if !calls.remove(&call) {
                    return Err(format!("tool_result {} references no open tool_call ({call})", e.seq));
                }
            }
            _ => {}
        }
    }
    Ok(())
}

/// Result of re-deriving one recorded outcome.
#[derive(Debug, Clone, PartialEq)]
pub struct TurnReplay {
    pub terminal_seq: u64,
    pub matched: bool,
    /// Top-level outcome fields that differ.
    pub differences: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Default)]
pub struct ReplayReport {
    pub turns: Vec<TurnReplay>,
    pub errors: Vec<String>,
}

impl ReplayReport {
    pub fn is_match(&self) -> bool {
        self.errors.is_empty() && !self.turns.is_empty() && self.turns.iter().all(|t| t.matched)
    }
}

impl fmt::Display for ReplayReport {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        if self.is_match() {
            return write!(f, "MATCH ({} outcome(s))", self.turns.len());
        }
        writeln!(f, "MISMATCH")?;
        for e in &self.errors {
            writeln!(f, "  error: {e}")?;
        }
        if self.turns.is_empty() && self.errors.is_empty() {
            writeln!(f, "  no recorded outcome in log")?;
        }
        for t in self.turns.iter().filter(|t| !t.matched) {
            writeln!(f, "  outcome at seq {} differs in: {}", t.terminal_seq, t.differences.join(", "))?;
        }
        Ok(())
    }
}

/// Re-derives every recorded outcome from the events that precede it,
/// without running any tool or controller.
pub fn replay(events: &[SessionEvent]) -> ReplayReport {
    let mut report = ReplayReport::default();
    if let Err(e) = check_log_structure(events) {
        report.errors.push(e);
        return report;
    }
    let mut memory = MemoryBuffer::new();
    let mut turn: Option<(ClinicianQuery, AgentConfig, u64)> = None;
    let mut thoughts = 0u32;
    let mut last_step: Option<ReasoningStep> = None;
    let mut last_error: Option<(String, String)> = None;
    // Rejections per kind within the current turn; the first of each is a bounce.
    let mut rejections: BTreeMap<String, u32> = BTreeMap::new();

    for e in events {
        memory.push(MemoryEntry { seq: e.seq, kind: MemoryKind::of_event(e.kind), payload: e.payload.clone() });
        match e.kind {
            EventKind::UserMessage => {
                let query = serde_json::from_value::<ClinicianQuery>(e.payload["query"].clone());
                let mut config = AgentConfig::default();
                let c = &e.payload["config"];
                config.t_max_ms = c["t_max_ms"].as_u64().unwrap_or(config.t_max_ms);
                config.max_iterations = c["max_iterations"].as_u64().map_or(config.max_iterations, |v| v as u32);
                if let Ok(t) = serde_json::from_value(c["thresholds"].clone()) {
                    config.thresholds = t;
                }
                match query {
                    Ok(q) => turn = Some((q, config, e.timestamp_ms)),
                    Err(err) => report.errors.push(format!("event {}: bad query: {err}", e.seq)),
                }
                thoughts = 0;
                last_step = None;
                last_error = None;
                rejections.clear();
            }
            EventKind::Thought => {
                thoughts += 1;
                last_error = None;
                match serde_json::from_value::<ReasoningStep>(e.payload["step"].clone()) {
                    Ok(s) => last_step = Some(s),
                    Err(err) => report.errors.push(format!("event {}: bad step: {err}", e.seq)),
                }
            }
            EventKind::Error => {
                *rejections.entry(e.payload["error"].as_str().unwrap_or_default().to_string()).or_default() += 1;
                last_error = Some((
                    e.payload["error"].as_str().unwrap_or_default().to_string(),
                    e.payload["message"].as_str().unwrap_or_default().to_string(),
                ));
            }
            EventKind::FinalAnswer | EventKind::ClarificationRequest | EventKind::Timeout => {
                let Some((query, config, start)) = turn.clone() else {
                    report.errors.push(format!("event {}: outcome without a user message", e.seq));
                    continue;
                };
                let r = recollect(&memory);
                let state = AgentState {
                    query,
                    study: Arc::new(EchoStudy::new("replay", Vec::new())),
                    iteration: thoughts,
                    working_findings: r.findings,
                    clip_summaries: BTreeMap::new(),
                    pending_clarification: None,
                    provenance: r.provenance,
                    replies: r.replies,
                };
                let (exit, reason, response) = match e.kind {
                    EventKind::ClarificationRequest => {
                        let text = last_step.as_ref().and_then(|s| s.clarification_text.clone()).unwrap_or_default();
                        (
                            ExitKind::Clarification,
                            None,
                            Ok(FinalResponse { text, choice: None, evidence: vec![], low_confidence: false }),
                        )
                    }
                    EventKind::FinalAnswer => (
                        ExitKind::Answer,
                        None,
                        last_step
                            .as_ref()
                            .ok_or_else(|| "no answer step".to_string())
                            .and_then(|s| compose_answer(s, &state)),
                    ),
                    _ => {
                        let (reason, diag) = match &last_error {
                            Some((kind, msg)) if kind == "controller_failure" => {
                                (TimeoutReason::ControllerFailure, Some(msg.as_str()))
                            }
                            Some((kind, msg)) if rejections.get(kind).copied().unwrap_or(0) >= 2 => {
                                (TimeoutReason::FormatError, Some(msg.as_str()))
                            }
                            _ if thoughts >= config.max_iterations => (TimeoutReason::IterationCap, None),
                            _ => (TimeoutReason::Budget, None),
                        };
                        (ExitKind::Timeout, Some(reason), Ok(timeout_fallback(&state, reason, diag, &config)))
                    }
                };
                let derived = response.map(|response| LoopOutcome {
                    exit,
                    reason,
                    response,
                    artifacts: session_artifacts(&memory),
                    iterations_used: thoughts,
                    elapsed_ms: e.timestamp_ms.saturating_sub(start),
                });
                let recorded = &e.payload["outcome"];
                let turn_result = match derived {
                    Err(msg) => TurnReplay {
                        terminal_seq: e.seq,
                        matched: false,
                        differences: vec![format!("underivable: {msg}")],
                    },
                    Ok(d) => {
                        let d = canonical::to_document(&d).unwrap_or(Value::Null);
                        let mut diffs = Vec::new();
                        let keys: std::collections::BTreeSet<&String> = d
                            .as_object()
                            .into_iter()
                            .flat_map(|o| o.keys())
                            .chain(recorded.as_object().into_iter().flat_map(|o| o.keys()))
                            .collect();
                        let canon = |v: Option<&Value>| v.map(|v| canonical_string(v).unwrap_or_default());
                        for k in keys {
                            if canon(d.get(k)) != canon(recorded.get(k)) {
                                diffs.push(k.clone());
                            }
                        }
                        if reason == Some(TimeoutReason::Budget) && d["elapsed_ms"].as_u64() < Some(config.t_max_ms) {
                            diffs.push("elapsed_ms below budget".into());
                        }
                        TurnReplay { terminal_seq: e.seq, matched: diffs.is_empty(), differences: diffs }
                    }
                };
                report.turns.push(turn_result);
            }
            _ => {}
        }
    }
    report
}
