//! Controller backends: the component that decides the next reasoning step.
//!
//! Every backend returns a raw action document that `parse_action` turns into
//! a [`ReasoningStep`]. Backends only ever see a [`ControllerView`], which is
//! built from the study overview and memory and carries no fixture truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Map, Value};
use std::collections::BTreeMap;
use std::time::Duration;

use crate::agent::{MemoryEntry, TemporalSummary};
use crate::canonical::{canonical_string, Document};
use crate::domain::{AnswerKey, ClinicianQuery, FindingCategory, Severity, ViewLabel};
use crate::grading::{severity_keywords, severity_phrase, ClinicalThresholds};
use crate::protocol::{ErrorCode, ToolDescriptor, ToolRequest};
use crate::tools::{DISEASE_PREDICT, MEASURE, SEGMENT};

pub const DEFAULT_MEMORY_WINDOW: usize = 40;

pub const SYSTEM_PREAMBLE: &str =
    "You are an echocardiography assistant that answers a clinician's question about one study. \
You cannot see the video; you can call the listed tools, which analyse clips by id. \
Reply with exactly one JSON object and nothing else, in one of three shapes: \
{\"action\":\"call_tools\",\"thought\":...,\"calls\":[{\"tool\":...,\"arguments\":{...}}]}, \
{\"action\":\"clarify\",\"thought\":...,\"question\":...}, or \
{\"action\":\"final\",\"thought\":...,\"answer\":{\"choice\":\"A\"|\"B\"|\"C\"|\"D\",\"text\":...}}. \
When the question lists options, the final answer must include a choice. \
Ground your answer in tool outputs and cite the measurements you used.";

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StepKind {
    Act,
    Clarify,
    Answer,
}

/// One controller decision.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ReasoningStep {
    pub kind: StepKind,
    pub thought_text: String,
    /// Request ids are left empty here and assigned by the loop.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub proposed_calls: Vec<ToolRequest>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub clarification_text: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub answer_draft: Option<Document>,
}

impl ReasoningStep {
    pub fn act(thought: impl Into<String>, calls: Vec<(&str, Value)>) -> Self {
        ReasoningStep {
            kind: StepKind::Act,
            thought_text: thought.into(),
            proposed_calls: calls.into_iter().map(|(t, a)| ToolRequest::new("", t, a)).collect(),
            clarification_text: None,
            answer_draft: None,
        }
    }

    pub fn clarify(thought: impl Into<String>, question: impl Into<String>) -> Self {
        ReasoningStep {
            kind: StepKind::Clarify,
            thought_text: thought.into(),
            proposed_calls: Vec::new(),
            clarification_text: Some(question.into()),
            answer_draft: None,
        }
    }

    pub fn answer(thought: impl Into<String>, draft: Document) -> Self {
        ReasoningStep {
            kind: StepKind::Answer,
            thought_text: thought.into(),
            proposed_calls: Vec::new(),
            clarification_text: None,
            answer_draft: Some(draft),
        }
    }

    /// The wire action document that parses back to this step.
    pub fn to_action(&self) -> Document {
        match self.kind {
            StepKind::Act => {
                let calls: Vec<Value> = self
                    .proposed_calls
                    .iter()
                    .map(|c| {
                        let mut call = json!({"tool": c.tool, "arguments": c.arguments});
                        if let Some(v) = &c.version_req {
                            call["version"] = json!(v.to_string());
                        }
                        call
                    })
                    .collect();
                json!({"action": "call_tools", "thought": self.thought_text, "calls": calls})
            }
            StepKind::Clarify => json!({
                "action": "clarify",
                "thought": self.thought_text,
                "question": self.clarification_text.clone().unwrap_or_default(),
            }),
            StepKind::Answer => json!({
                "action": "final",
                "thought": self.thought_text,
                "answer": self.answer_draft.clone().unwrap_or_else(|| json!({})),
            }),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("unrecognised controller action: {0}")]
pub struct ParseError(pub String);

/// Maps a controller output document onto a reasoning step. Total: any
/// input yields either a step or a `ParseError`.
pub fn parse_action(raw: &Value) -> Result<ReasoningStep, ParseError> {
    let obj = raw.as_object().ok_or_else(|| ParseError("expected a JSON object".into()))?;
    let thought = match obj.get("thought") {
        None | Some(Value::Null) => String::new(),
        Some(Value::String(s)) => s.clone(),
        Some(_) => return Err(ParseError("thought must be a string".into())),
    };
    match obj.get("action").and_then(Value::as_str) {
        Some("call_tools") => {
            let calls = obj
                .get("calls")
                .and_then(Value::as_array)
                .ok_or_else(|| ParseError("call_tools requires a calls list".into()))?;
            if calls.is_empty() {
                return Err(ParseError("call_tools requires at least one call".into()));
            }
            let mut proposed = Vec::with_capacity(calls.len());
            for (i, call) in calls.iter().enumerate() {
                let tool = call
                    .get("tool")
                    .and_then(Value::as_str)
                    .ok_or_else(|| ParseError(format!("calls[{i}].tool must be a string")))?;
                let arguments = match call.get("arguments") {
                    None | Some(Value::Null) => json!({}),
                    Some(v @ Value::Object(_)) => v.clone(),
                    Some(_) => return Err(ParseError(format!("calls[{i}].arguments must be an object"))),
                };
                let mut request = ToolRequest::new("", tool, arguments);
                if let Some(v) = call.get("version") {
                    let text = v.as_str().ok_or_else(|| ParseError(format!("calls[{i}].version must be a string")))?;
                    request.version_req = Some(
                        semver::VersionReq::parse(text).map_err(|e| ParseError(format!("calls[{i}].version: {e}")))?,
                    );
                }
                proposed.push(request);
            }
            Ok(ReasoningStep {
                kind: StepKind::Act,
                thought_text: thought,
                proposed_calls: proposed,
                clarification_text: None,
                answer_draft: None,
            })
        }
        Some("clarify") => {
            let question = obj
                .get("question")
                .and_then(Value::as_str)
                .filter(|q| !q.trim().is_empty())
                .ok_or_else(|| ParseError("clarify requires a non-empty question".into()))?;
            Ok(ReasoningStep::clarify(thought, question))
        }
        Some("final") => {
            let answer = obj
                .get("answer")
                .and_then(Value::as_object)
                .ok_or_else(|| ParseError("final requires an answer object".into()))?;
            for field in ["choice", "text"] {
                if let Some(v) = answer.get(field) {
                    if !v.is_string() && !v.is_null() {
                        return Err(ParseError(format!("answer.{field} must be a string")));
                    }
                }
            }
            Ok(ReasoningStep::answer(thought, Value::Object(answer.clone())))
        }
        Some(other) => Err(ParseError(format!("unknown action {other:?}"))),
        None => Err(ParseError("missing action".into())),
    }
}

/// A clip as a controller may see it.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ClipOverview {
    pub clip_id: String,
    pub view: ViewLabel,
    pub quality: f64,
    pub frame_count: u32,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub summary: Option<TemporalSummary>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StudyOverview {
    pub study_id: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_context: Option<String>,
    pub clips: Vec<ClipOverview>,
}

impl StudyOverview {
    /// Highest-quality clip, ties to the earliest.
    pub fn best_clip(&self) -> Option<&ClipOverview> {
        self.clips.iter().fold(None, |best: Option<&ClipOverview>, c| match best {
            Some(b) if b.quality >= c.quality => Some(b),
            _ => Some(c),
        })
    }
}

/// A tool call already made in this session.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CallRecord {
    pub tool: String,
    pub arguments: Document,
    pub ok: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error_code: Option<ErrorCode>,
}

/// Everything a backend may read when choosing its next step.
#[derive(Debug, Clone)]
pub struct ControllerView {
    pub query: ClinicianQuery,
    /// User messages after the query (clarification replies), oldest first.
    pub replies: Vec<String>,
    pub overview: StudyOverview,
    pub findings: BTreeMap<String, Value>,
    pub calls: Vec<CallRecord>,
    pub memory: Vec<MemoryEntry>,
    pub tools: Vec<ToolDescriptor>,
    pub iteration: u32,
    pub max_iterations: u32,
    pub state_fingerprint: String,
    /// Error observation from the previous controller output, if any.
    pub feedback: Option<String>,
}

impl ControllerView {
    pub fn attempted(&self, tool: &str) -> bool {
        self.calls.iter().any(|c| c.tool == tool)
    }

    fn dialogue_text(&self) -> String {
        let mut text = self.query.text.clone();
        for r in &self.replies {
            text.push(' ');
            text.push_str(r);
        }
        text
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("controller failure: {0}")]
pub struct ControllerFailure(pub String);

pub trait Controller: Send {
    fn name(&self) -> &str;
    fn next_action(&mut self, view: &ControllerView) -> Result<Document, ControllerFailure>;

    /// Number of decisions already consumed. Used to resume a recovered
    /// session.
    fn skip(&mut self, _steps: usize) {}
}

// ---------------------------------------------------------------------------
// Prompt assembly

/// Deterministic rendering of everything a remote model is shown.
#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct PromptContext {
    pub system_preamble: String,
    pub tool_specs: Vec<ToolDescriptor>,
    pub memory_window: Vec<MemoryEntry>,
    pub elided_entries: usize,
    pub query: ClinicianQuery,
    pub replies: Vec<String>,
    pub study: StudyOverview,
    pub findings: BTreeMap<String, Value>,
    pub iteration: u32,
    pub max_iterations: u32,
    #[serde(skip_serializing_if = "Option::is_none")]
    pub feedback: Option<String>,
}

pub fn build_prompt(view: &ControllerView, window: usize) -> PromptContext {
    let mut tools = view.tools.clone();
    tools.sort_by(|a, b| a.name.cmp(&b.name).then_with(|| a.version.cmp(&b.version)));
    let start = view.memory.len().saturating_sub(window);
    PromptContext {
        system_preamble: SYSTEM_PREAMBLE.to_string(),
        tool_specs: tools,
        memory_window: view.memory[start..].to_vec(),
        elided_entries: start,
        query: view.query.clone(),
        replies: view.replies.clone(),
        study: view.overview.clone(),
        findings: view.findings.clone(),
        iteration: view.iteration,
        max_iterations: view.max_iterations,
        feedback: view.feedback.clone(),
    }
}

impl PromptContext {
    /// The user-turn text: canonical JSON of the context sections.
    pub fn render_user(&self) -> String {
        let mut sections = json!({
            "question": self.query,
            "study": self.study,
            "findings": self.findings,
            "iteration": self.iteration,
            "max_iterations": self.max_iterations,
            "memory": {"elided_entries": self.elided_entries, "entries": self.memory_window},
        });
        if !self.replies.is_empty() {
            sections["clinician_replies"] = json!(self.replies);
        }
        if let Some(f) = &self.feedback {
            sections["error_observation"] = json!(f);
        }
        canonical_string(&sections).unwrap_or_else(|e| format!("{{\"render_error\":{:?}}}", e.to_string()))
    }
}

/// Translates a tool input schema into the JSON Schema subset that
/// function-calling endpoints accept.
pub fn to_json_schema(schema: &Value) -> Value {
    let ty = schema.get("type").and_then(Value::as_str).unwrap_or("any");
    let mut out = match ty {
        "string" | "number" | "integer" | "boolean" => json!({"type": ty}),
        "enum" => json!({"enum": schema.get("values").cloned().unwrap_or_else(|| json!([]))}),
        "list" => json!({"type": "array", "items": to_json_schema(schema.get("items").unwrap_or(&json!({})))}),
        "optional" => to_json_schema(schema.get("of").unwrap_or(&json!({}))),
        "document" => {
            let mut props = Map::new();
            if let Some(p) = schema.get("properties").and_then(Value::as_object) {
                for (k, v) in p {
                    props.insert(k.clone(), to_json_schema(v));
                }
            }
            let mut doc = json!({"type": "object", "properties": props});
            if let Some(req) = schema.get("required") {
                doc["required"] = req.clone();
            }
            doc["additionalProperties"] = match schema.get("values") {
                Some(v) => to_json_schema(v),
                None => json!(false),
            };
            doc
        }
        _ => json!({}),
    };
    if let Some(d) = schema.get("description") {
        out["description"] = d.clone();
    }
    out
}

/// Chat-completion request body with function-calling tool specs.
pub fn chat_request_body(prompt: &PromptContext, model: &str) -> Value {
    let tools: Vec<Value> = prompt
        .tool_specs
        .iter()
        .map(|d| {
            json!({"type": "function", "function": {
                "name": d.name,
                "description": d.description,
                "parameters": to_json_schema(&d.input_schema),
            }})
        })
        .collect();
    json!({
        "model": model,
        "temperature": 0,
        "messages": [
            {"role": "system", "content": prompt.system_preamble},
            {"role": "user", "content": prompt.render_user()},
        ],
        "tools": tools,
        "tool_choice": "auto",
    })
}

/// Extracts an action document from a chat-completion response. Native tool
/// calls become a `call_tools` action; otherwise the message content is
/// parsed as JSON, and free text is passed through for `parse_action` to
/// reject.
pub fn action_from_chat_response(response: &Value) -> Value {
    let message = &response["choices"][0]["message"];
    let content = message.get("content").and_then(Value::as_str).unwrap_or("").trim();
    if let Some(calls) = message.get("tool_calls").and_then(Value::as_array) {
        if !calls.is_empty() {
            let calls: Vec<Value> = calls
                .iter()
                .map(|c| {
                    let f = &c["function"];
                    let arguments = match &f["arguments"] {
                        Value::String(s) => serde_json::from_str(s).unwrap_or(Value::String(s.clone())),
                        other => other.clone(),
                    };
                    json!({"tool": f["name"], "arguments": arguments})
                })
                .collect();
            return json!({"action": "call_tools", "thought": content, "calls": calls});
        }
    }
    let unfenced = content
        .strip_prefix("```json")
        .or_else(|| content.strip_prefix("```"))
        .and_then(|s| s.strip_suffix("```"))
        .unwrap_or(content)
        .trim();
    serde_json::from_str(unfenced).unwrap_or_else(|_| json!({"text": content}))
}

// ---------------------------------------------------------------------------
// Scripted backend

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ScriptEntry {
    /// State fingerprint to match, or `None` / `"*"` for any state.
    #[serde(rename = "match", default, skip_serializing_if = "Option::is_none")]
    pub when: Option<String>,
    /// Raw action document returned when the entry is reached.
    pub step: Document,
}

/// Replays a fixed list of actions in order.
#[derive(Debug, Clone, Default)]
pub struct ScriptedPolicy {
    entries: Vec<ScriptEntry>,
    cursor: usize,
}

impl ScriptedPolicy {
    pub fn new(entries: Vec<ScriptEntry>) -> Self {
        ScriptedPolicy { entries, cursor: 0 }
    }

    pub fn from_steps(steps: impl IntoIterator<Item = ReasoningStep>) -> Self {
        Self::from_actions(steps.into_iter().map(|s| s.to_action()))
    }

    pub fn from_actions(actions: impl IntoIterator<Item = Document>) -> Self {
        Self::new(actions.into_iter().map(|step| ScriptEntry { when: None, step }).collect())
    }

    /// Accepts a JSON array whose elements are either `{match?, step}`
    /// entries or bare action documents.
    pub fn from_json(doc: &Value) -> Result<Self, String> {
        let items = doc.as_array().ok_or("script must be a JSON array")?;
        let mut entries = Vec::with_capacity(items.len());
        for (i, item) in items.iter().enumerate() {
            if item.get("step").is_some() {
                let entry: ScriptEntry =
                    serde_json::from_value(item.clone()).map_err(|e| format!("script[{i}]: {e}"))?;
                entries.push(entry);
            } else {
                entries.push(ScriptEntry { when: None, step: item.clone() });
            }
        }
        Ok(Self::new(entries))
    }

    pub fn cursor(&self) -> usize {
        self.cursor
    }

    pub fn remaining(&self) -> usize {
        self.entries.len() - self.cursor
    }
}

impl Controller for ScriptedPolicy {
    fn name(&self) -> &str {
        "scripted"
    }

    fn next_action(&mut self, view: &ControllerView) -> Result<Document, ControllerFailure> {
        let Some(entry) = self.entries.get(self.cursor) else {
            return Ok(json!({
                "action": "final",
                "thought": "script exhausted",
                "answer": {"choice": "A", "note": "script exhausted", "text": "script exhausted"},
            }));
        };
        if let Some(fp) = entry.when.as_deref().filter(|fp| *fp != "*") {
            if fp != view.state_fingerprint {
                return Err(ControllerFailure(format!(
                    "script entry {} expects state {fp}, found {}",
                    self.cursor, view.state_fingerprint
                )));
            }
        }
        self.cursor += 1;
        Ok(entry.step.clone())
    }

    fn skip(&mut self, steps: usize) {
        self.cursor = (self.cursor + steps).min(self.entries.len());
    }
}

// ---------------------------------------------------------------------------
// Threshold reasoning shared by the oracle, the heuristic and the timeout
// fallback.

/// Keyword table used when a query carries no explicit category.
pub fn infer_category(text: &str) -> Option<FindingCategory> {
    let lower = text.to_lowercase();
    let tokens = word_tokens(&lower);
    let has = |w: &str| tokens.iter().any(|t| t == w);
    if lower.contains("ejection fraction") || lower.contains("systolic function") || has("ef") || has("lvef") {
        Some(FindingCategory::LvSystolicFunction)
    } else if lower.contains("hypertroph") || lower.contains("wall thickness") || has("lvh") {
        Some(FindingCategory::LvHypertrophy)
    } else if lower.contains("effusion") || lower.contains("tamponade") || lower.contains("pericardi") {
        Some(FindingCategory::PericardialEffusion)
    } else if lower.contains("mitral") {
        Some(FindingCategory::MitralValve)
    } else {
        None
    }
}

fn word_tokens(text: &str) -> Vec<String> {
    text.to_lowercase()
        .split(|c: char| !c.is_ascii_alphanumeric())
        .filter(|t| !t.is_empty())
        .map(str::to_string)
        .collect()
}

/// Mitral valve status, in option order.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum MitralStatus {
    None,
    Regurgitation,
    Stenosis,
    Both,
}

impl MitralStatus {
    pub fn from_flags(regurgitation: bool, stenosis: bool) -> Self {
        match (regurgitation, stenosis) {
            (false, false) => MitralStatus::None,
            (true, false) => MitralStatus::Regurgitation,
            (false, true) => MitralStatus::Stenosis,
            (true, true) => MitralStatus::Both,
        }
    }

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn phrase(self) -> &'static str {
        match self {
            MitralStatus::None => "no significant mitral valve disease",
            MitralStatus::Regurgitation => "mitral regurgitation",
            MitralStatus::Stenosis => "mitral stenosis",
            MitralStatus::Both => "both mitral regurgitation and stenosis",
        }
    }

    fn of_option(text: &str) -> Option<Self> {
        let t = word_tokens(text);
        let has = |w: &str| t.iter().any(|x| x == w);
        let mr = has("regurgitation") || has("mr");
        let ms = has("stenosis") || has("ms");
        if has("both") || (mr && ms) {
            Some(MitralStatus::Both)
        } else if mr {
            Some(MitralStatus::Regurgitation)
        } else if ms {
            Some(MitralStatus::Stenosis)
        } else if has("no") || has("none") || has("normal") {
            Some(MitralStatus::None)
        } else {
            None
        }
    }
}

/// What an assessment concluded, before it is mapped onto an option.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Target {
    Grade(Severity),
    Mitral(MitralStatus),
}

impl Target {
    fn position(self) -> usize {
        match self {
            Target::Grade(s) => s.rank(),
            Target::Mitral(m) => m.index(),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Assessment {
    pub category: FindingCategory,
    pub target: Target,
    pub text: String,
    pub cites: Vec<String>,
    pub surrogate: bool,
}

fn flag(findings: &BTreeMap<String, Value>, name: &str) -> Option<bool> {
    findings.get("disease_flags").and_then(|f| f.get(name)).and_then(Value::as_bool)
}

fn num(findings: &BTreeMap<String, Value>, name: &str) -> Option<f64> {
    findings.get(name).and_then(Value::as_f64)
}

/// Grades a category from measurements, pivoting to disease flags when the
/// measurement is absent.
pub fn assess(
    category: FindingCategory,
    findings: &BTreeMap<String, Value>,
    thresholds: &ClinicalThresholds,
) -> Option<Assessment> {
    use FindingCategory::*;
    let graded = |sev: Severity, text: String, cite: &str, surrogate: bool| Assessment {
        category,
        target: Target::Grade(sev),
        text,
        cites: vec![cite.to_string()],
        surrogate,
    };
    match category {
        LvSystolicFunction => {
            if let Some(ef) = num(findings, "ef_pct") {
                let sev = thresholds.grade_ef(ef);
                return Some(graded(
                    sev,
                    format!("EF {ef:.1}% grades as {} LV systolic function", severity_phrase(category, sev)),
                    "ef_pct",
                    false,
                ));
            }
            flag(findings, "lv_systolic_dysfunction").map(|f| {
                let sev = if f { Severity::Mild } else { Severity::Normal };
                graded(sev, format!("no EF available; dysfunction flag {f} used as a surrogate"), "disease_flags", true)
            })
        }
        LvHypertrophy => {
            if let Some(t) = num(findings, "wall_thickness_mm") {
                let sev = thresholds.grade_lvh(t);
                return Some(graded(
                    sev,
                    format!("wall thickness {t:.1} mm grades as {} hypertrophy", severity_phrase(category, sev)),
                    "wall_thickness_mm",
                    false,
                ));
            }
            flag(findings, "lvh").map(|f| {
                let sev = if f { Severity::Mild } else { Severity::Normal };
                graded(
                    sev,
                    format!("wall thickness unavailable; pivoting to the disease-model lvh flag ({f}) as a surrogate"),
                    "disease_flags",
                    true,
                )
            })
        }
        PericardialEffusion => {
            let tamponade = match flag(findings, "tamponade") {
                Some(true) => "; tamponade flagged",
                Some(false) => "; no tamponade flagged",
                None => "",
            };
            if let Some(d) = num(findings, "effusion_cm") {
                let sev = thresholds.grade_effusion(d);
                let mut a = graded(
                    sev,
                    format!(
                        "effusion depth {d:.1} cm grades as {} effusion{tamponade}",
                        severity_phrase(category, sev)
                    ),
                    "effusion_cm",
                    false,
                );
                if findings.contains_key("disease_flags") {
                    a.cites.push("disease_flags".to_string());
                }
                return Some(a);
            }
            flag(findings, "pericardial_effusion").map(|f| {
                let sev = if f { Severity::Mild } else { Severity::Normal };
                graded(
                    sev,
                    format!("effusion depth unavailable; effusion flag {f} used as a surrogate{tamponade}"),
                    "disease_flags",
                    true,
                )
            })
        }
        MitralValve => {
            let flags = findings.get("disease_flags")?;
            let get = |k: &str| flags.get(k).and_then(Value::as_bool).unwrap_or(false);
            let status = MitralStatus::from_flags(get("mitral_regurgitation"), get("mitral_stenosis"));
            Some(Assessment {
                category,
                target: Target::Mitral(status),
                text: format!("disease model indicates {}", status.phrase()),
                cites: vec!["disease_flags".to_string()],
                surrogate: false,
            })
        }
    }
}

/// Picks the option whose wording names the target; falls back to grade
/// order (A = least severe) when no option text matches.
pub fn choose_option(query: &ClinicianQuery, category: FindingCategory, target: Target) -> Option<AnswerKey> {
    let options = query.options.as_ref()?;
    let matches_target = |text: &str| -> (bool, bool) {
        match target {
            Target::Mitral(m) => {
                let hit = MitralStatus::of_option(text) == Some(m);
                (hit, hit)
            }
            Target::Grade(sev) => {
                let tokens = word_tokens(text);
                let names = |s: Severity| severity_keywords(category, s).iter().any(|k| tokens.iter().any(|t| t == k));
                let hit = names(sev);
                let others = (0..4).filter_map(Severity::from_rank).filter(|s| *s != sev).any(names);
                (hit, hit && !others)
            }
        }
    };
    let exact = options.iter().find(|o| matches_target(&o.text).1);
    let loose = options.iter().find(|o| matches_target(&o.text).0);
    exact.or(loose).map(|o| o.key).or_else(|| AnswerKey::from_index(target.position()))
}

fn option_label(query: &ClinicianQuery, key: AnswerKey) -> String {
    query.option_text(key).map(|t| format!("{key} ({t})")).unwrap_or_else(|| key.to_string())
}

// ---------------------------------------------------------------------------
// Oracle backend

/// Next step of the threshold-grading oracle.
pub fn oracle_decide(view: &ControllerView, thresholds: &ClinicalThresholds) -> ReasoningStep {
    let Some(category) = view.query.category.or_else(|| infer_category(&view.dialogue_text())) else {
        return ReasoningStep::clarify(
            "the question does not name a finding I can grade",
            "Which finding should I assess: LV systolic function (EF), LV hypertrophy, pericardial effusion, or mitral valve disease?",
        );
    };
    let f = &view.findings;
    let has = |k: &str| f.contains_key(k);
    let has_flag = |k: &str| flag(f, k).is_some();
    use FindingCategory::*;
    let (ready, next): (bool, Option<&str>) = match category {
        LvSystolicFunction => {
            let next = if has("ef_pct") {
                None
            } else if !has("ed_frame") && !view.attempted(SEGMENT) {
                Some(SEGMENT)
            } else if !view.attempted(MEASURE) {
                Some(MEASURE)
            } else {
                None
            };
            (has("ef_pct"), next)
        }
        LvHypertrophy => {
            let next = if has("wall_thickness_mm") {
                None
            } else if !view.attempted(MEASURE) {
                Some(MEASURE)
            } else if !has_flag("lvh") && !view.attempted(DISEASE_PREDICT) {
                Some(DISEASE_PREDICT)
            } else {
                None
            };
            (has("wall_thickness_mm") || (view.attempted(MEASURE) && has_flag("lvh")), next)
        }
        PericardialEffusion => {
            let next = if !has("effusion_cm") && !view.attempted(MEASURE) {
                Some(MEASURE)
            } else if !has("disease_flags") && !view.attempted(DISEASE_PREDICT) {
                Some(DISEASE_PREDICT)
            } else {
                None
            };
            let ready = (has("effusion_cm") || has_flag("pericardial_effusion")) && next.is_none();
            (ready, next)
        }
        MitralValve => {
            let next = (!has("disease_flags") && !view.attempted(DISEASE_PREDICT)).then_some(DISEASE_PREDICT);
            (has("disease_flags"), next)
        }
    };

    if ready {
        if let Some(a) = assess(category, f, thresholds) {
            return answer_step(&view.query, a);
        }
    }
    if let (Some(tool), Some(clip)) = (next, view.overview.best_clip()) {
        return ReasoningStep::act(
            format!("need {} evidence; running {tool} on clip {} (highest quality)", category.as_str(), clip.clip_id),
            vec![(tool, json!({"clip_id": clip.clip_id}))],
        );
    }
    let choice = view.query.options.as_ref().map(|_| AnswerKey::A);
    let mut draft = json!({
        "text": format!("Could not obtain the findings needed to assess {}; defaulting to the first option.", category.as_str()),
        "low_confidence": true,
        "cites": [],
    });
    if let Some(c) = choice {
        draft["choice"] = json!(c.as_str());
    }
    ReasoningStep::answer("required findings unavailable after the tool chain was attempted", draft)
}

fn answer_step(query: &ClinicianQuery, a: Assessment) -> ReasoningStep {
    let choice = choose_option(query, a.category, a.target);
    let text = match choice {
        Some(k) => format!("{}; answer {}.", capitalize(&a.text), option_label(query, k)),
        None => format!("{}.", capitalize(&a.text)),
    };
    let mut draft = json!({"text": text, "cites": a.cites});
    if let Some(k) = choice {
        draft["choice"] = json!(k.as_str());
    }
    if a.surrogate {
        draft["low_confidence"] = json!(true);
    }
    let thought = if a.surrogate { format!("surrogate signal: {}", a.text) } else { a.text.clone() };
    ReasoningStep::answer(thought, draft)
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Rule-based controller that grades tool outputs against thresholds.
#[derive(Debug, Clone, Default)]
pub struct OracleController {
    pub thresholds: ClinicalThresholds,
}

impl OracleController {
    pub fn new(thresholds: ClinicalThresholds) -> Self {
        OracleController { thresholds }
    }
}

impl Controller for OracleController {
    fn name(&self) -> &str {
        "oracle"
    }

    fn next_action(&mut self, view: &ControllerView) -> Result<Document, ControllerFailure> {
        Ok(oracle_decide(view, &self.thresholds).to_action())
    }
}

// ---------------------------------------------------------------------------
// Baselines

/// Answers immediately with a seeded uniform guess; never calls tools.
#[derive(Debug, Clone)]
pub struct PriorGuessController {
    rng: ChaCha8Rng,
}

impl PriorGuessController {
    pub fn new(seed: u64) -> Self {
        PriorGuessController { rng: ChaCha8Rng::seed_from_u64(seed) }
    }
}

impl Controller for PriorGuessController {
    fn name(&self) -> &str {
        "prior"
    }

    fn next_action(&mut self, view: &ControllerView) -> Result<Document, ControllerFailure> {
        let mut answer = json!({"text": "Answered without tools from the option prior.", "low_confidence": true});
        if view.query.has_options() {
            let key = AnswerKey::from_index(self.rng.random_range(0..4)).expect("index in range");
            answer["choice"] = json!(key.as_str());
        }
        Ok(json!({"action": "final", "thought": "guessing without evidence", "answer": answer}))
    }
}

/// Uses only binary disease flags, never measurements: a raised flag is
/// read as moderate disease and a clear flag as normal.
#[derive(Debug, Clone, Default)]
pub struct FlagHeuristicController;

impl Controller for FlagHeuristicController {
    fn name(&self) -> &str {
        "heuristic"
    }

    fn next_action(&mut self, view: &ControllerView) -> Result<Document, ControllerFailure> {
        let category = view.query.category.or_else(|| infer_category(&view.dialogue_text()));
        if !view.findings.contains_key("disease_flags") && !view.attempted(DISEASE_PREDICT) {
            if let Some(clip) = view.overview.best_clip() {
                return Ok(ReasoningStep::act(
                    "checking disease flags",
                    vec![(DISEASE_PREDICT, json!({"clip_id": clip.clip_id}))],
                )
                .to_action());
            }
        }
        let target = category.map(|c| {
            let raised = |k: &str| flag(&view.findings, k).unwrap_or(false);
            let grade = |f: bool| Target::Grade(if f { Severity::Moderate } else { Severity::Normal });
            let t = match c {
                FindingCategory::LvSystolicFunction => grade(raised("lv_systolic_dysfunction")),
                FindingCategory::LvHypertrophy => grade(raised("lvh")),
                FindingCategory::PericardialEffusion => grade(raised("pericardial_effusion")),
                FindingCategory::MitralValve => {
                    Target::Mitral(MitralStatus::from_flags(raised("mitral_regurgitation"), raised("mitral_stenosis")))
                }
            };
            (c, t)
        });
        let mut answer = json!({"text": "Answered from disease flags alone.", "cites": ["disease_flags"]});
        if view.query.has_options() {
            let key = target.and_then(|(c, t)| choose_option(&view.query, c, t)).unwrap_or(AnswerKey::A);
            answer["choice"] = json!(key.as_str());
        }
        Ok(json!({"action": "final", "thought": "flag-only reading", "answer": answer}))
    }
}

// ---------------------------------------------------------------------------
// Remote backend

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RemoteConfig {
    /// Full chat-completions endpoint URL.
    pub url: String,
    pub model: String,
    pub token: Option<String>,
    pub timeout_ms: u64,
    pub memory_window: usize,
}

pub const ENV_URL: &str = "ECHO_AGENT_LLM_URL";
pub const ENV_MODEL: &str = "ECHO_AGENT_LLM_MODEL";
pub const ENV_TOKEN: &str = "ECHO_AGENT_LLM_TOKEN";

impl RemoteConfig {
    pub fn new(url: impl Into<String>, model: impl Into<String>) -> Self {
        RemoteConfig {
            url: url.into(),
            model: model.into(),
            token: None,
            timeout_ms: 60_000,
            memory_window: DEFAULT_MEMORY_WINDOW,
        }
    }

    pub fn from_env() -> Result<Self, String> {
        let url = std::env::var(ENV_URL).map_err(|_| format!("{ENV_URL} is not set"))?;
        let model = std::env::var(ENV_MODEL).map_err(|_| format!("{ENV_MODEL} is not set"))?;
        let mut config = RemoteConfig::new(url, model);
        config.token = std::env::var(ENV_TOKEN).ok().filter(|t| !t.is_empty());
        Ok(config)
    }
}

/// Sends one prompt and returns the extracted action document. Transport
/// errors and 5xx responses are retried once.
pub fn remote_complete(
    client: &reqwest::blocking::Client,
    prompt: &PromptContext,
    config: &RemoteConfig,
) -> Result<Document, ControllerFailure> {
    let body = chat_request_body(prompt, &config.model);
    let mut last_error = String::new();
    for attempt in 0..2 {
        let mut req = client.post(&config.url).json(&body);
        if let Some(t) = &config.token {
            req = req.bearer_auth(t);
        }
        match req.send() {
            Ok(resp) if resp.status().is_success() => {
                let doc: Value =
                    resp.json().map_err(|e| ControllerFailure(format!("response body is not JSON: {e}")))?;
                return Ok(action_from_chat_response(&doc));
            }
            Ok(resp) if resp.status().is_server_error() => {
                last_error = format!("endpoint returned {}", resp.status());
            }
            Ok(resp) => return Err(ControllerFailure(format!("endpoint returned {}", resp.status()))),
            Err(e) => last_error = format!("transport error: {e}"),
        }
        tracing::warn!(attempt, error = %last_error, "remote controller call failed");
    }
    Err(ControllerFailure(format!("{last_error} (after retry)")))
}

pub struct RemoteController {
    config: RemoteConfig,
    client: reqwest::blocking::Client,
}

impl RemoteController {
    pub fn new(config: RemoteConfig) -> Result<Self, ControllerFailure> {
        let client = reqwest::blocking::Client::builder()
            .timeout(Duration::from_millis(config.timeout_ms))
            .build()
            .map_err(|e| ControllerFailure(format!("cannot build HTTP client: {e}")))?;
        Ok(RemoteController { config, client })
    }
}

impl Controller for RemoteController {
    fn name(&self) -> &str {
        "remote"
    }

    fn next_action(&mut self, view: &ControllerView) -> Result<Document, ControllerFailure> {
        let prompt = build_prompt(view, self.config.memory_window);
        remote_complete(&self.client, &prompt, &self.config)
    }
}

// ---------------------------------------------------------------------------
// Backend selection

/// Serializable backend choice, as accepted by the CLI and the service.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case")]
pub enum BackendSpec {
    Oracle,
    Scripted { script: Document },
    Remote,
    Prior,
    Heuristic,
}

impl BackendSpec {
    /// Parses a bare backend name. `scripted` needs a script and is built
    /// with [`BackendSpec::Scripted`] directly.
    pub fn from_name(name: &str) -> Result<Self, String> {
        match name {
            "oracle" => Ok(BackendSpec::Oracle),
            "remote" => Ok(BackendSpec::Remote),
            "prior" => Ok(BackendSpec::Prior),
            "heuristic" => Ok(BackendSpec::Heuristic),
            "scripted" => Err("the scripted backend needs a script".into()),
            other => Err(format!("unknown backend {other:?} (expected oracle, scripted, remote, prior or heuristic)")),
        }
    }

    pub fn label(&self) -> &'static str {
        match self {
            BackendSpec::Oracle => "oracle",
            BackendSpec::Scripted { .. } => "scripted",
            BackendSpec::Remote => "remote",
            BackendSpec::Prior => "prior",
            BackendSpec::Heuristic => "heuristic",
        }
    }

    /// Builds a fresh controller. `seed` only affects the prior backend.
    pub fn build(&self, thresholds: ClinicalThresholds, seed: u64) -> Result<Box<dyn Controller>, String> {
        Ok(match self {
            BackendSpec::Oracle => Box::new(OracleController::new(thresholds)),
            BackendSpec::Scripted { script } => Box::new(ScriptedPolicy::from_json(script)?),
            BackendSpec::Remote => {
                Box::new(RemoteController::new(RemoteConfig::from_env()?).map_err(|e| e.to_string())?)
            }
            BackendSpec::Prior => Box::new(PriorGuessController::new(seed)),
            BackendSpec::Heuristic => Box::new(FlagHeuristicController),
        })
    }
}
