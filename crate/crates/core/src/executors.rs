//! Out-of-process tool executors, the matching server side, and registry
//! manifests.
//!
//! Studies are not shipped over the wire. The calling side injects the
//! study's content fingerprint as `study_fp`, and the tool server resolves
//! it against a directory of study files.

use serde::{Deserialize, Serialize};
use serde_json::Value;
use std::collections::BTreeMap;
use std::io::{Read, Write};
use std::path::{Path, PathBuf};
use std::process::{Command, Stdio};
use std::sync::{mpsc, Arc, Mutex};
use std::time::{Duration, Instant};

use crate::domain::{read_study_file, EchoStudy};
use crate::grading::ClinicalThresholds;
use crate::protocol::{
    classify_error, decode_envelope, decode_response, encode_envelope, encode_response, output_failure, read_frame,
    write_frame, ErrorCode, RawFailure, ToolDescriptor, ToolError, ToolRequest, ToolResponse,
};
use crate::registry::{FnExecutor, Invocation, RegistryError, ToolExecutor, ToolRegistry};
use crate::tools::{mock_descriptors, register_mock_suite, run_mock_tool, STUDY_FP_ARG};

fn wire_request(call: &Invocation) -> ToolRequest {
    let mut arguments = call.arguments.clone();
    if let Some(args) = arguments.as_object_mut() {
        args.entry(STUDY_FP_ARG.to_string()).or_insert_with(|| Value::String(call.study.content_fingerprint()));
    }
    ToolRequest::new(call.request_id.clone(), call.tool.clone(), arguments)
}

fn unwrap_response(call: &Invocation, bytes: &[u8]) -> Result<Value, RawFailure> {
    let response =
        decode_response(bytes).map_err(|e| RawFailure::Crash(format!("bad response frame: {}", e.message)))?;
    if response.request_id != call.request_id {
        return Err(RawFailure::Crash(format!(
            "response for {:?} does not match request {:?}",
            response.request_id, call.request_id
        )));
    }
    match (response.output, response.error) {
        (Some(output), None) => Ok(output),
        (_, Some(error)) => Err(RawFailure::Classified(error)),
        (None, None) => Err(RawFailure::Crash("response carries neither output nor error".into())),
    }
}

/// Runs each call in a fresh child process: one request frame on stdin, one
/// response frame on stdout. The child is killed at the deadline.
#[derive(Debug, Clone)]
pub struct ProcessExecutor {
    pub program: String,
    pub args: Vec<String>,
}

impl ProcessExecutor {
    pub fn new(command: &[String]) -> Result<Self, String> {
        let (program, args) = command.split_first().ok_or("process executor needs a command")?;
        Ok(ProcessExecutor { program: program.clone(), args: args.to_vec() })
    }
}

impl ToolExecutor for ProcessExecutor {
    fn invoke(&self, call: &Invocation) -> Result<Value, RawFailure> {
        let started = Instant::now();
        let mut child = Command::new(&self.program)
            .args(&self.args)
            .stdin(Stdio::piped())
            .stdout(Stdio::piped())
            .stderr(Stdio::piped())
            .spawn()
            .map_err(|e| RawFailure::Crash(format!("cannot start {}: {e}", self.program)))?;
        let mut stdin = child.stdin.take().expect("stdin is piped");
        let mut stdout = child.stdout.take().expect("stdout is piped");
        let mut stderr = child.stderr.take().expect("stderr is piped");

        let (tx, rx) = mpsc::sync_channel(1);
        std::thread::spawn(move || {
            let _ = tx.send(read_frame(&mut stdout));
        });
        let diagnostics = std::thread::spawn(move || {
            let mut text = String::new();
            let _ = stderr.by_ref().take(4096).read_to_string(&mut text);
            text
        });
        let written = write_frame(&mut stdin, &encode_envelope(&wire_request(call)));
        drop(stdin);
        if let Err(e) = written {
            let _ = child.kill();
            let _ = child.wait();
            return Err(RawFailure::Crash(format!("cannot write request to {}: {e}", self.program)));
        }
        let remaining = call.deadline.saturating_sub(started.elapsed());
        let frame = match rx.recv_timeout(remaining) {
            Ok(frame) => frame,
            Err(_) => {
                let _ = child.kill();
                let _ = child.wait();
                return Err(RawFailure::DeadlineExceeded { deadline_ms: call.deadline.as_millis() as u64 });
            }
        };
        let status = child.wait();
        let stderr_text = diagnostics.join().unwrap_or_default();
        match frame {
            Ok(Some(bytes)) => unwrap_response(call, &bytes),
            Ok(None) => Err(RawFailure::Crash(format!(
                "{} exited ({}) without a response{}",
                self.program,
                status.map(|s| s.to_string()).unwrap_or_else(|e| e.to_string()),
                if stderr_text.is_empty() { String::new() } else { format!(": {}", stderr_text.trim()) }
            ))),
            Err(e) => Err(RawFailure::Crash(format!("reading response from {}: {e}", self.program))),
        }
    }

    fn enforces_deadline(&self) -> bool {
        true
    }
}

/// POSTs the request envelope to `{base_url}/invoke`.
#[derive(Debug, Clone)]
pub struct HttpExecutor {
    pub base_url: String,
    /// Built on first use: a blocking client cannot be created inside an
    /// async runtime, where registries are often assembled.
    client: std::sync::OnceLock<reqwest::blocking::Client>,
}

impl HttpExecutor {
    pub fn new(base_url: impl Into<String>) -> Self {
        HttpExecutor { base_url: base_url.into(), client: std::sync::OnceLock::new() }
    }
}

impl ToolExecutor for HttpExecutor {
    fn invoke(&self, call: &Invocation) -> Result<Value, RawFailure> {
        let url = format!("{}/invoke", self.base_url.trim_end_matches('/'));
        let sent = self
            .client
            .get_or_init(reqwest::blocking::Client::new)
            .post(&url)
            .header("content-type", "application/json")
            .timeout(call.deadline)
            .body(encode_envelope(&wire_request(call)))
            .send();
        let response = match sent {
            Ok(r) => r,
            Err(e) if e.is_timeout() => {
                return Err(RawFailure::DeadlineExceeded { deadline_ms: call.deadline.as_millis() as u64 })
            }
            Err(e) => return Err(RawFailure::Crash(format!("POST {url}: {e}"))),
        };
        let status = response.status();
        let bytes = response.bytes().map_err(|e| {
            if e.is_timeout() {
                RawFailure::DeadlineExceeded { deadline_ms: call.deadline.as_millis() as u64 }
            } else {
                RawFailure::Crash(format!("POST {url}: {e}"))
            }
        })?;
        if !status.is_success() && decode_response(&bytes).is_err() {
            return Err(RawFailure::Crash(format!("POST {url}: HTTP {status}")));
        }
        unwrap_response(call, &bytes)
    }

    fn enforces_deadline(&self) -> bool {
        true
    }
}

// ---------------------------------------------------------------------------
// Server side

/// Studies in a directory, looked up by content fingerprint. The directory
/// is rescanned when a fingerprint is not yet known.
pub struct StudyIndex {
    dir: PathBuf,
    known: Mutex<BTreeMap<String, Arc<EchoStudy>>>,
}

impl StudyIndex {
    pub fn new(dir: impl Into<PathBuf>) -> Self {
        StudyIndex { dir: dir.into(), known: Mutex::new(BTreeMap::new()) }
    }

    pub fn insert(&self, study: EchoStudy) -> String {
        let fp = study.content_fingerprint();
        self.known.lock().expect("study index lock").insert(fp.clone(), Arc::new(study));
        fp
    }

    pub fn get(&self, fp: &str) -> Option<Arc<EchoStudy>> {
        if let Some(s) = self.known.lock().expect("study index lock").get(fp) {
            return Some(Arc::clone(s));
        }
        self.rescan();
        self.known.lock().expect("study index lock").get(fp).cloned()
    }

    fn rescan(&self) {
        let Ok(entries) = std::fs::read_dir(&self.dir) else { return };
        let mut found = Vec::new();
        for entry in entries.flatten() {
            let path = entry.path();
            if path.extension().and_then(|e| e.to_str()) != Some("json") {
                continue;
            }
            match read_study_file(&path) {
                Ok(study) => found.push(study),
                Err(e) => tracing::debug!(path = %path.display(), error = %e, "skipping unreadable study file"),
            }
        }
        let mut known = self.known.lock().expect("study index lock");
        for study in found {
            known.entry(study.content_fingerprint()).or_insert_with(|| Arc::new(study));
        }
    }
}

/// Handles one request envelope with the mock suite.
pub fn serve_request(bytes: &[u8], studies: &StudyIndex, thresholds: &ClinicalThresholds) -> ToolResponse {
    let started = Instant::now();
    let request = match decode_envelope(bytes) {
        Ok(r) => r,
        Err(e) => return ToolResponse::failed("", e, 0),
    };
    let elapsed = || started.elapsed().as_millis() as u64;
    let fp = request.arguments.get(STUDY_FP_ARG).and_then(Value::as_str).unwrap_or_default();
    let study = match studies.get(fp) {
        Some(s) => s,
        None if fp.is_empty() => Arc::new(EchoStudy::new("", Vec::new())),
        None => {
            let e = ToolError::new(ErrorCode::AmbiguousInstruction, format!("unknown study fingerprint {fp}"));
            return ToolResponse::failed(&request.request_id, e, elapsed());
        }
    };
    let result = run_mock_tool(&request.tool, &request.arguments, &study, thresholds)
        .and_then(|out| output_failure(&out).map_or(Ok(out), Err));
    match result {
        Ok(output) => ToolResponse::ok(&request.request_id, output, elapsed()),
        Err(raw) => ToolResponse::failed(&request.request_id, classify_error(raw), elapsed()),
    }
}

/// Serves frames until end of input.
pub fn serve_frames<R: Read, W: Write>(
    mut input: R,
    mut output: W,
    studies: &StudyIndex,
    thresholds: &ClinicalThresholds,
) -> std::io::Result<usize> {
    let mut served = 0;
    while let Some(frame) = read_frame(&mut input)? {
        write_frame(&mut output, &encode_response(&serve_request(&frame, studies, thresholds)))?;
        served += 1;
    }
    Ok(served)
}

// ---------------------------------------------------------------------------
// Manifests

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum ExecutorSpec {
    Mock,
    Process { command: Vec<String> },
    Http { url: String },
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ManifestTool {
    pub name: String,
    /// Defaults to the mock suite's descriptor of the same name.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub descriptor: Option<ToolDescriptor>,
    pub executor: ExecutorSpec,
}

/// Declares which tools a registry holds and how each one runs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RegistryManifest {
    /// Register the whole in-process mock suite first.
    #[serde(default)]
    pub mock_suite: bool,
    #[serde(default)]
    pub tools: Vec<ManifestTool>,
    #[serde(default)]
    pub fallbacks: BTreeMap<String, Vec<String>>,
}

impl Default for RegistryManifest {
    fn default() -> Self {
        RegistryManifest { mock_suite: true, tools: Vec::new(), fallbacks: BTreeMap::new() }
    }
}

#[derive(Debug, thiserror::Error)]
pub enum ManifestError {
    #[error("{path}: {message}")]
    Read { path: String, message: String },
    #[error("tools[{index}] ({name}): {message}")]
    Tool { index: usize, name: String, message: String },
    #[error(transparent)]
    Registry(#[from] RegistryError),
}

impl RegistryManifest {
    pub fn load(path: &Path) -> Result<Self, ManifestError> {
        let read_err = |message: String| ManifestError::Read { path: path.display().to_string(), message };
        let text = std::fs::read_to_string(path).map_err(|e| read_err(e.to_string()))?;
        serde_json::from_str(&text).map_err(|e| read_err(e.to_string()))
    }

    /// Builds a registry from the manifest.
    pub fn build(&self, thresholds: ClinicalThresholds) -> Result<ToolRegistry, ManifestError> {
        let registry = ToolRegistry::new();
        if self.mock_suite {
            register_mock_suite(&registry, thresholds)?;
        }
        let mocks: BTreeMap<String, ToolDescriptor> =
            mock_descriptors().into_iter().map(|d| (d.name.clone(), d)).collect();
        for (index, tool) in self.tools.iter().enumerate() {
            let err = |message: String| ManifestError::Tool { index, name: tool.name.clone(), message };
            let descriptor = match &tool.descriptor {
                Some(d) if d.name != tool.name => return Err(err(format!("descriptor is named {:?}", d.name))),
                Some(d) => d.clone(),
                None => mocks
                    .get(&tool.name)
                    .cloned()
                    .ok_or_else(|| err("no descriptor given and no mock tool of that name".into()))?,
            };
            let executor: Arc<dyn ToolExecutor> = match &tool.executor {
                ExecutorSpec::Mock => {
                    let name = tool.name.clone();
                    if !mocks.contains_key(&name) {
                        return Err(err("no mock implementation of that name".into()));
                    }
                    Arc::new(FnExecutor(move |args: &Value, study: &EchoStudy| {
                        run_mock_tool(&name, args, study, &thresholds)
                    }))
                }
                ExecutorSpec::Process { command } => Arc::new(ProcessExecutor::new(command).map_err(err)?),
                ExecutorSpec::Http { url } => Arc::new(HttpExecutor::new(url.clone())),
            };
            registry.register(descriptor, executor)?;
        }
        for (tool, chain) in &self.fallbacks {
            registry.set_fallback(tool, chain.clone())?;
        }
        Ok(registry)
    }
}

/// Deadline helper for callers that drive executors directly.
pub fn invocation(request: &ToolRequest, study: Arc<EchoStudy>, deadline: Duration) -> Invocation {
    Invocation {
        request_id: request.request_id.clone(),
        tool: request.tool.clone(),
        arguments: request.arguments.clone(),
        study,
        deadline,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::{ClipDescriptor, ViewLabel};
    use serde_json::json;

    fn study() -> EchoStudy {
        EchoStudy::new("s", vec![ClipDescriptor::with_trace("c1", ViewLabel::A4C, 0.9, vec![10.0, 14.0, 8.0])])
    }

    #[test]
    fn frames_served_in_order() {
        let index = StudyIndex::new("/nonexistent");
        let fp = index.insert(study());
        let mut input = Vec::new();
        for (id, clip) in [("r1", "c1"), ("r2", "zz")] {
            let req = ToolRequest::new(id, "measure", json!({"clip_id": clip, "study_fp": fp}));
            write_frame(&mut input, &encode_envelope(&req)).unwrap();
        }
        let mut out = Vec::new();
        assert_eq!(serve_frames(&input[..], &mut out, &index, &ClinicalThresholds::default()).unwrap(), 2);
        let mut reader = &out[..];
        let first = decode_response(&read_frame(&mut reader).unwrap().unwrap()).unwrap();
        let second = decode_response(&read_frame(&mut reader).unwrap().unwrap()).unwrap();
        assert_eq!(first.request_id, "r1");
        assert!(first.is_ok());
        assert_eq!(second.error_code(), Some(ErrorCode::MissingClip));
        assert!(read_frame(&mut reader).unwrap().is_none());
    }

    #[test]
    fn unknown_fingerprint_and_bad_envelope() {
        let index = StudyIndex::new("/nonexistent");
        let t = ClinicalThresholds::default();
        let req = ToolRequest::new("r", "measure", json!({"clip_id": "c1", "study_fp": "00"}));
        let resp = serve_request(&encode_envelope(&req), &index, &t);
        assert_eq!(resp.error_code(), Some(ErrorCode::AmbiguousInstruction));
        let resp = serve_request(br#"{"request_id":"r","tool":"x","arguments":{},"extra":1}"#, &index, &t);
        assert_eq!(resp.error_code(), Some(ErrorCode::SchemaValidation));
    }

    #[test]
    fn index_rescans_directory() {
        let dir = tempfile::tempdir().unwrap();
        let index = StudyIndex::new(dir.path());
        let s = study();
        assert!(index.get(&s.content_fingerprint()).is_none());
        crate::domain::write_study_file(&dir.path().join("s.json"), &s).unwrap();
        assert_eq!(*index.get(&s.content_fingerprint()).unwrap(), s);
    }

    #[test]
    fn manifest_defaults_and_errors() {
        let m: RegistryManifest = serde_json::from_value(json!({
            "mock_suite": false,
            "tools": [{"name": "measure", "executor": {"kind": "mock"}},
                      {"name": "measure_best_clip", "executor": {"kind": "mock"}}],
            "fallbacks": {"measure": ["measure_best_clip"]}
        }))
        .unwrap();
        let r = m.build(ClinicalThresholds::default()).unwrap();
        assert_eq!(r.list_tools(None).len(), 2);
        assert_eq!(r.fallback_chain("measure"), vec!["measure_best_clip".to_string()]);

        let bad: RegistryManifest =
            serde_json::from_value(json!({"tools": [{"name": "doppler", "executor": {"kind": "mock"}}]})).unwrap();
        match bad.build(ClinicalThresholds::default()) {
            Err(ManifestError::Tool { index: 0, .. }) => {}
            other => panic!("{:?}", other.map(|_| ())),
        }
        // Same name and version as the mock suite entry.
        let dup: RegistryManifest = serde_json::from_value(json!({
            "mock_suite": true, "tools": [{"name": "measure", "executor": {"kind": "process", "command": ["x"]}}]
        }))
        .unwrap();
        assert!(matches!(dup.build(ClinicalThresholds::default()), Err(ManifestError::Registry(_))));
        assert!(serde_json::from_value::<RegistryManifest>(json!({"tools": [], "extra": 1})).is_err());
    }

    #[test]
    fn missing_program_is_a_crash() {
        let exec = ProcessExecutor::new(&["/definitely/not/here".to_string()]).unwrap();
        let req = ToolRequest::new("r", "measure", json!({"clip_id": "c1"}));
        let err = exec.invoke(&invocation(&req, Arc::new(study()), Duration::from_secs(1))).unwrap_err();
        assert!(matches!(err, RawFailure::Crash(_)));
        assert!(ProcessExecutor::new(&[]).is_err());
    }
}
