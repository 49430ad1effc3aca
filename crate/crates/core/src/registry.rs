//! Tool registration, version resolution and cached execution under
//! deadlines, with retries for crashes and fallback chains for
//! quality/missing-clip failures.

use lru::LruCache;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::{BTreeMap, BTreeSet};
use std::num::NonZeroUsize;
use std::panic::AssertUnwindSafe;
use std::sync::mpsc;
use std::sync::{Arc, Mutex, RwLock};
use std::time::{Duration, Instant};

use crate::canonical;
use crate::clock::{Clock, SystemClock};
use crate::domain::{ArtifactRef, EchoStudy};
use crate::protocol::{
    self, classify_error, ErrorCode, FallbackTrace, RawFailure, ToolDescriptor, ToolError, ToolRequest, ToolResponse,
};
use crate::schema::{InvalidSchema, Schema};

pub const DEFAULT_CACHE_CAPACITY: usize = 4096;

/// Everything an executor receives for one invocation.
#[derive(Debug, Clone)]
pub struct Invocation {
    pub request_id: String,
    pub tool: String,
    pub arguments: Value,
    pub study: Arc<EchoStudy>,
    pub deadline: Duration,
}

pub trait ToolExecutor: Send + Sync {
    fn invoke(&self, call: &Invocation) -> Result<Value, RawFailure>;

    /// Executors that cancel their own work at `call.deadline` (child
    /// processes, HTTP) return true and are called inline. Everything else
    /// runs on a worker thread that the registry stops waiting for.
    fn enforces_deadline(&self) -> bool {
        false
    }
}

/// Adapts a plain function into an executor.
pub struct FnExecutor<F>(pub F);

impl<F> ToolExecutor for FnExecutor<F>
where
    F: Fn(&Value, &EchoStudy) -> Result<Value, RawFailure> + Send + Sync,
{
    fn invoke(&self, call: &Invocation) -> Result<Value, RawFailure> {
        (self.0)(&call.arguments, &call.study)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum RegistryError {
    #[error("tool {name} {version} is not newer than registered {current}")]
    DuplicateVersion { name: String, version: semver::Version, current: semver::Version },
    #[error("tool {name}: {source}")]
    InvalidSchema { name: String, source: InvalidSchema },
    #[error("invalid tool name {0:?}: must match [a-z][a-z0-9_]*")]
    InvalidName(String),
    #[error("fallback for {tool} names unregistered tool {missing}")]
    UnknownFallback { tool: String, missing: String },
    #[error("fallback chain for {0} would create a cycle")]
    FallbackCycle(String),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ExecutionPolicy {
    pub deadline_ms: u64,
    /// Extra attempts after a `TOOL_CRASH`. Timeouts are never retried.
    pub max_retries: u32,
    pub use_cache: bool,
    pub use_fallback: bool,
}

impl Default for ExecutionPolicy {
    fn default() -> Self {
        ExecutionPolicy { deadline_ms: 5_000, max_retries: 1, use_cache: true, use_fallback: true }
    }
}

struct Entry {
    descriptor: ToolDescriptor,
    input: Schema,
    output: Schema,
    executor: Arc<dyn ToolExecutor>,
}

#[derive(Default)]
struct Inner {
    tools: BTreeMap<String, BTreeMap<semver::Version, Arc<Entry>>>,
    fallbacks: BTreeMap<String, Vec<String>>,
}

/// LRU store of successful responses from cacheable tools.
pub struct ResultCache {
    entries: Mutex<LruCache<String, (ToolResponse, u64)>>,
}

impl ResultCache {
    pub fn new(capacity: usize) -> Self {
        let cap = NonZeroUsize::new(capacity.max(1)).expect("capacity is positive");
        ResultCache { entries: Mutex::new(LruCache::new(cap)) }
    }

    pub fn get(&self, key: &str) -> Option<ToolResponse> {
        self.entries.lock().expect("cache lock").get(key).map(|(r, _)| r.clone())
    }

    /// First writer wins; a concurrent duplicate miss does not overwrite.
    pub fn insert(&self, key: String, response: ToolResponse, now_ms: u64) -> bool {
        if !response.is_ok() {
            return false;
        }
        let mut entries = self.entries.lock().expect("cache lock");
        if entries.contains(&key) {
            return false;
        }
        entries.put(key, (response, now_ms));
        true
    }

    pub fn len(&self) -> usize {
        self.entries.lock().expect("cache lock").len()
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn capacity(&self) -> usize {
        self.entries.lock().expect("cache lock").cap().get()
    }

    pub fn clear(&self) {
        self.entries.lock().expect("cache lock").clear();
    }
}

/// Deterministic key for a tool call: tool, resolved version and arguments.
pub fn cache_key(tool: &str, version: &semver::Version, arguments: &Value) -> String {
    let doc = json!({ "tool": tool, "version": version.to_string(), "arguments": arguments });
    canonical::fingerprint_document(&doc).expect("schema-valid arguments are finite")
}

pub struct ToolRegistry {
    inner: RwLock<Inner>,
    cache: Arc<ResultCache>,
    clock: Arc<dyn Clock>,
}

impl Default for ToolRegistry {
    fn default() -> Self {
        Self::new()
    }
}

impl ToolRegistry {
    pub fn new() -> Self {
        Self::with_cache(Arc::new(ResultCache::new(DEFAULT_CACHE_CAPACITY)))
    }

    pub fn with_cache(cache: Arc<ResultCache>) -> Self {
        ToolRegistry { inner: RwLock::default(), cache, clock: Arc::new(SystemClock::new()) }
    }

    pub fn cache(&self) -> &Arc<ResultCache> {
        &self.cache
    }

    pub fn clock(&self) -> Arc<dyn Clock> {
        Arc::clone(&self.clock)
    }

    pub fn set_clock(&mut self, clock: Arc<dyn Clock>) {
        self.clock = clock;
    }

    pub fn register(&self, descriptor: ToolDescriptor, executor: Arc<dyn ToolExecutor>) -> Result<(), RegistryError> {
        if !ToolDescriptor::valid_name(&descriptor.name) {
            return Err(RegistryError::InvalidName(descriptor.name));
        }
        let (input, output) = descriptor
            .compile()
            .map_err(|source| RegistryError::InvalidSchema { name: descriptor.name.clone(), source })?;
        let mut inner = self.inner.write().expect("registry lock");
        let versions = inner.tools.entry(descriptor.name.clone()).or_default();
        if let Some((current, _)) = versions.last_key_value() {
            if descriptor.version <= *current {
                return Err(RegistryError::DuplicateVersion {
                    name: descriptor.name.clone(),
                    version: descriptor.version.clone(),
                    current: current.clone(),
                });
            }
        }
        tracing::debug!(tool = %descriptor.name, version = %descriptor.version, "registered tool");
        versions.insert(descriptor.version.clone(), Arc::new(Entry { descriptor, input, output, executor }));
        Ok(())
    }

    /// Sets the ordered alternates tried when `tool` fails with a
    /// quality or missing-clip error.
    pub fn set_fallback(&self, tool: &str, chain: Vec<String>) -> Result<(), RegistryError> {
        let mut inner = self.inner.write().expect("registry lock");
        for name in std::iter::once(tool).chain(chain.iter().map(String::as_str)) {
            if !inner.tools.contains_key(name) {
                return Err(RegistryError::UnknownFallback { tool: tool.to_string(), missing: name.to_string() });
            }
        }
        let previous = inner.fallbacks.insert(tool.to_string(), chain);
        if has_cycle(&inner.fallbacks) {
            match previous {
                Some(p) => inner.fallbacks.insert(tool.to_string(), p),
                None => inner.fallbacks.remove(tool),
            };
            return Err(RegistryError::FallbackCycle(tool.to_string()));
        }
        Ok(())
    }

    pub fn fallback_chain(&self, tool: &str) -> Vec<String> {
        self.inner.read().expect("registry lock").fallbacks.get(tool).cloned().unwrap_or_default()
    }

    /// Current (highest-version) descriptors, ordered by name.
    pub fn list_tools(&self, tag: Option<&str>) -> Vec<ToolDescriptor> {
        let inner = self.inner.read().expect("registry lock");
        inner
            .tools
            .values()
            .filter_map(|versions| versions.last_key_value().map(|(_, e)| e.descriptor.clone()))
            .filter(|d| tag.is_none_or(|t| d.tags.iter().any(|x| x == t)))
            .collect()
    }

    /// All registered versions of every tool, by name then version descending.
    pub fn list_all_versions(&self) -> Vec<ToolDescriptor> {
        let inner = self.inner.read().expect("registry lock");
        inner.tools.values().flat_map(|versions| versions.values().rev().map(|e| e.descriptor.clone())).collect()
    }

    pub fn contains(&self, tool: &str) -> bool {
        self.inner.read().expect("registry lock").tools.contains_key(tool)
    }

    /// Resolves the descriptor a request would run against.
    pub fn resolve(&self, tool: &str, version_req: Option<&semver::VersionReq>) -> Option<ToolDescriptor> {
        self.resolve_entry(tool, version_req).map(|e| e.descriptor.clone())
    }

    fn resolve_entry(&self, tool: &str, version_req: Option<&semver::VersionReq>) -> Option<Arc<Entry>> {
        let inner = self.inner.read().expect("registry lock");
        let versions = inner.tools.get(tool)?;
        versions.iter().rev().find(|(v, _)| version_req.is_none_or(|r| r.matches(v))).map(|(_, e)| Arc::clone(e))
    }

    /// Executes a request using the registry's own clock for latency.
    pub fn execute(&self, request: &ToolRequest, policy: &ExecutionPolicy, study: &Arc<EchoStudy>) -> ToolResponse {
        self.execute_with_clock(request, policy, study, self.clock.as_ref())
    }

    /// Executes a request. Never fails: every error is carried in the response.
    pub fn execute_with_clock(
        &self,
        request: &ToolRequest,
        policy: &ExecutionPolicy,
        study: &Arc<EchoStudy>,
        clock: &dyn Clock,
    ) -> ToolResponse {
        let started = clock.now_ms();
        let real_start = Instant::now();
        let deadline = Duration::from_millis(policy.deadline_ms);
        let latency = |clock: &dyn Clock| clock.now_ms().saturating_sub(started);

        let Some(entry) = self.resolve_entry(&request.tool, request.version_req.as_ref()) else {
            let message = match &request.version_req {
                Some(r) if self.contains(&request.tool) => {
                    format!("no version of {} satisfies {r}", request.tool)
                }
                _ => format!("tool {:?} is not registered", request.tool),
            };
            return ToolResponse::failed(
                &request.request_id,
                ToolError::new(ErrorCode::ToolNotFound, message),
                latency(clock),
            );
        };

        if let Err(e) = protocol::validate_args(&entry.descriptor, &entry.input, &request.arguments) {
            return ToolResponse::failed(&request.request_id, e, latency(clock));
        }

        let cacheable = policy.use_cache && entry.descriptor.cacheable;
        let key = cacheable.then(|| cache_key(&entry.descriptor.name, &entry.descriptor.version, &request.arguments));
        if let Some(hit) = key.as_deref().and_then(|k| self.cache.get(k)) {
            let mut response = hit;
            response.request_id = request.request_id.clone();
            response.latency_ms = 0;
            response.from_cache = true;
            response.artifacts = artifacts_for(&entry.descriptor, &request.request_id, response.output.as_ref());
            return response;
        }

        let primary = run_with_retries(&entry, request, study, deadline, real_start, policy.max_retries);
        match primary {
            Ok(output) => {
                let mut response = ToolResponse::ok(&request.request_id, output, latency(clock));
                response.artifacts = artifacts_for(&entry.descriptor, &request.request_id, response.output.as_ref());
                if let Some(k) = key {
                    self.cache.insert(k, response.clone(), clock.now_ms());
                }
                response
            }
            Err(error) if policy.use_fallback && error.code.triggers_fallback() => {
                self.run_fallback(&entry, request, study, deadline, real_start, policy, error, clock, started)
            }
            Err(error) => ToolResponse::failed(&request.request_id, error, latency(clock)),
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn run_fallback(
        &self,
        primary: &Entry,
        request: &ToolRequest,
        study: &Arc<EchoStudy>,
        deadline: Duration,
        real_start: Instant,
        policy: &ExecutionPolicy,
        trigger: ToolError,
        clock: &dyn Clock,
        started: u64,
    ) -> ToolResponse {
        let chain = self.fallback_chain(&primary.descriptor.name);
        let mut attempted = Vec::new();
        let mut failures = Vec::new();
        for alt in chain {
            attempted.push(alt.clone());
            let Some(entry) = self.resolve_entry(&alt, None) else { continue };
            if let Err(e) = protocol::validate_args(&entry.descriptor, &entry.input, &request.arguments) {
                failures.push(json!({"tool": alt, "error": e}));
                continue;
            }
            match run_with_retries(&entry, request, study, deadline, real_start, policy.max_retries) {
                Ok(output) => {
                    let mut response =
                        ToolResponse::ok(&request.request_id, output, clock.now_ms().saturating_sub(started));
                    response.artifacts =
                        artifacts_for(&entry.descriptor, &request.request_id, response.output.as_ref());
                    response.fallback = Some(FallbackTrace { trigger, chain: attempted, served_by: Some(alt) });
                    return response;
                }
                Err(e) => {
                    let timed_out = e.code == ErrorCode::ToolTimeout;
                    failures.push(json!({"tool": alt, "error": e}));
                    if timed_out {
                        break;
                    }
                }
            }
        }
        let mut error = trigger.clone();
        if !failures.is_empty() {
            error.detail = Some(json!({ "trigger": trigger.detail, "fallback_failures": failures }));
        }
        let mut response = ToolResponse::failed(&request.request_id, error, clock.now_ms().saturating_sub(started));
        response.fallback = Some(FallbackTrace { trigger, chain: attempted, served_by: None });
        response
    }
}

fn artifacts_for(descriptor: &ToolDescriptor, request_id: &str, output: Option<&Value>) -> Vec<ArtifactRef> {
    match (descriptor.artifact, output) {
        (Some(kind), Some(content)) => vec![ArtifactRef {
            artifact_id: format!("{request_id}:{}", descriptor.name),
            kind,
            producer_tool: descriptor.name.clone(),
            content: content.clone(),
        }],
        _ => Vec::new(),
    }
}

fn run_with_retries(
    entry: &Entry,
    request: &ToolRequest,
    study: &Arc<EchoStudy>,
    deadline: Duration,
    real_start: Instant,
    max_retries: u32,
) -> Result<Value, ToolError> {
    let mut attempt = 0;
    loop {
        let remaining = deadline.saturating_sub(real_start.elapsed());
        if remaining.is_zero() {
            return Err(classify_error(RawFailure::DeadlineExceeded { deadline_ms: deadline.as_millis() as u64 }));
        }
        let result = run_once(entry, request, study, remaining, deadline);
        match result {
            Err(e) if e.code == ErrorCode::ToolCrash && attempt < max_retries => {
                tracing::warn!(tool = %entry.descriptor.name, attempt, "tool crashed; retrying");
                attempt += 1;
            }
            other => return other,
        }
    }
}

fn run_once(
    entry: &Entry,
    request: &ToolRequest,
    study: &Arc<EchoStudy>,
    remaining: Duration,
    deadline: Duration,
) -> Result<Value, ToolError> {
    let call = Invocation {
        request_id: request.request_id.clone(),
        tool: entry.descriptor.name.clone(),
        arguments: request.arguments.clone(),
        study: Arc::clone(study),
        deadline: remaining,
    };
    let timeout = || classify_error(RawFailure::DeadlineExceeded { deadline_ms: deadline.as_millis() as u64 });
    let raw = if entry.executor.enforces_deadline() {
        entry.executor.invoke(&call)
    } else {
        let (tx, rx) = mpsc::sync_channel(1);
        let executor = Arc::clone(&entry.executor);
        let spawned = std::thread::Builder::new().name(format!("tool-{}", call.tool)).spawn(move || {
            let outcome = std::panic::catch_unwind(AssertUnwindSafe(|| executor.invoke(&call)))
                .unwrap_or_else(|p| Err(RawFailure::Crash(panic_message(p))));
            let _ = tx.send(outcome);
        });
        if let Err(e) = spawned {
            return Err(classify_error(RawFailure::Crash(format!("failed to spawn executor: {e}"))));
        }
        match rx.recv_timeout(remaining) {
            Ok(r) => r,
            Err(mpsc::RecvTimeoutError::Timeout) => return Err(timeout()),
            Err(mpsc::RecvTimeoutError::Disconnected) => {
                Err(RawFailure::Crash("executor exited without a result".into()))
            }
        }
    };
    let output = raw.map_err(classify_error)?;
    if let Some(failure) = protocol::output_failure(&output) {
        return Err(classify_error(failure));
    }
    let violations = entry.output.validate(&output);
    if !violations.is_empty() {
        return Err(ToolError::schema(
            format!("{} produced output violating its schema", entry.descriptor.name),
            &violations,
        ));
    }
    Ok(output)
}

fn panic_message(p: Box<dyn std::any::Any + Send>) -> String {
    if let Some(s) = p.downcast_ref::<&str>() {
        format!("executor panicked: {s}")
    } else if let Some(s) = p.downcast_ref::<String>() {
        format!("executor panicked: {s}")
    } else {
        "executor panicked".to_string()
    }
}

fn has_cycle(graph: &BTreeMap<String, Vec<String>>) -> bool {
    fn visit<'a>(
        node: &'a str,
        graph: &'a BTreeMap<String, Vec<String>>,
        on_path: &mut BTreeSet<&'a str>,
        done: &mut BTreeSet<&'a str>,
    ) -> bool {
        if done.contains(node) {
            return false;
        }
        if !on_path.insert(node) {
            return true;
        }
        for next in graph.get(node).into_iter().flatten() {
            if visit(next, graph, on_path, done) {
                return true;
            }
        }
        on_path.remove(node);
        done.insert(node);
        false
    }
    let mut done = BTreeSet::new();
    graph.keys().any(|k| visit(k, graph, &mut BTreeSet::new(), &mut done))
}
