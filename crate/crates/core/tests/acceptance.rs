//! Acceptance gate. Each criterion prints one PASS/FAIL line; the process
//! exits non-zero if any criterion fails.

use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use echo_agent_core::agent::{
    parse_events_jsonl, replay, AgentConfig, ExitKind, LoopOutcome, MemoryKind, Session, TimeoutReason,
};
use echo_agent_core::clock::{Clock, LogicalClock, SystemClock};
use echo_agent_core::controller::{BackendSpec, ScriptedPolicy};
use echo_agent_core::domain::{
    ClinicianQuery, ClipDescriptor, EchoStudy, EventKind, FindingCategory, SessionEvent, ViewLabel,
};
use echo_agent_core::eval::{
    binomial_acceptance_region, generate_synthetic_qa, run_protocol, score, AccuracyReport, EvalConfig,
};
use echo_agent_core::grading::ClinicalThresholds;
use echo_agent_core::protocol::{ErrorCode, ToolDescriptor, ToolRequest, ToolResponse};
use echo_agent_core::registry::{cache_key, ExecutionPolicy, FnExecutor, ToolRegistry};
use echo_agent_core::tools::{generate_clip, measure_clip, register_mock_suite, VideoGenConfig};
use proptest::prelude::*;
use proptest::test_runner::{Config as ProptestConfig, TestRunner};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde_json::{json, Value};

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn within_time(started: Instant, limit: Duration) -> Result<(), String> {
    ensure(started.elapsed() < limit, || format!("took {:?}, limit {:?}", started.elapsed(), limit))
}

fn ef_query() -> ClinicianQuery {
    ClinicianQuery::multiple_choice(
        "How would you grade left ventricular systolic function?",
        ["Normal", "Mildly reduced", "Moderately reduced", "Severely reduced"],
        Some(FindingCategory::LvSystolicFunction),
    )
}

fn study_with(clips: Vec<ClipDescriptor>) -> Arc<EchoStudy> {
    Arc::new(EchoStudy::new("acceptance", clips))
}

fn default_study() -> Arc<EchoStudy> {
    let a4c = generate_clip(&VideoGenConfig { quality: 0.9, ..VideoGenConfig::new(35.0) }, 3).unwrap();
    let mut plax = ClipDescriptor::with_trace("plax", ViewLabel::Plax, 0.7, vec![20.0, 15.0, 11.0, 15.0, 20.0]);
    plax.wall_thickness_mm = Some(13.0);
    study_with(vec![a4c, plax])
}

fn plain_descriptor(name: &str, version: &str, cacheable: bool, input: Value) -> ToolDescriptor {
    ToolDescriptor {
        name: name.into(),
        version: version.parse().unwrap(),
        description: format!("{name} test tool"),
        input_schema: input,
        output_schema: json!({"type": "any"}),
        tags: vec!["test".into()],
        cacheable,
        findings: Vec::new(),
        artifact: None,
    }
}

/// Mock suite plus `probe`, which sleeps for `ms` milliseconds.
fn registry_with_probe() -> ToolRegistry {
    let r = ToolRegistry::new();
    register_mock_suite(&r, ClinicalThresholds::default()).unwrap();
    let input = json!({"type": "document", "properties": {
        "ms": {"type": "integer"}, "nonce": {"type": "integer"}
    }, "required": ["ms", "nonce"]});
    r.register(
        plain_descriptor("probe", "1.0.0", false, input),
        Arc::new(FnExecutor(|args: &Value, _: &EchoStudy| {
            std::thread::sleep(Duration::from_millis(args["ms"].as_u64().unwrap_or(0)));
            Ok(json!({"slept_ms": args["ms"]}))
        })),
    )
    .unwrap();
    r
}

// ---------------------------------------------------------------------------

fn accuracy_arithmetic() -> Check {
    let started = Instant::now();
    let report = AccuracyReport::from_counts(316, 622);
    ensure(report.percent_display() == "50.8", || format!("rendered {}", report.percent_display()))?;
    // 0.5075 <= 316/622 <= 0.5085, compared as exact rationals.
    let (c, n) = (report.correct as u64, report.n as u64);
    ensure(c * 10_000 >= 5_075 * n && c * 10_000 <= 5_085 * n, || "316/622 outside [0.5075, 0.5085]".into())?;
    within_time(started, Duration::from_secs(1))?;
    Ok(format!("316/622 -> {}% ({})", report.percent_display(), report.accuracy_display()))
}

/// A random script of raw actions: tool calls with probe latencies, mock
/// tool calls, unknown tools, clarifications, answers with and without a
/// choice, and malformed documents.
fn random_script(rng: &mut ChaCha8Rng, latency_ms: u64) -> Vec<Value> {
    let len = rng.random_range(1..=6);
    let mut nonce = 0u64;
    (0..len)
        .map(|_| match rng.random_range(0..10) {
            0..=4 => {
                let n = rng.random_range(1..=3);
                let calls: Vec<Value> = (0..n)
                    .map(|_| {
                        nonce += 1;
                        match rng.random_range(0..5) {
                            0 | 1 => json!({"tool": "probe", "arguments": {"ms": rng.random_range(0..=latency_ms), "nonce": nonce}}),
                            2 => json!({"tool": "measure", "arguments": {"clip_id": "ef-35"}}),
                            3 => json!({"tool": "segment", "arguments": {"clip_id": "plax"}}),
                            _ => json!({"tool": "doppler", "arguments": {}}),
                        }
                    })
                    .collect();
                json!({"action": "call_tools", "thought": "gather", "calls": calls})
            }
            5 => json!({"action": "clarify", "question": "Which clip?"}),
            6 | 7 => json!({"action": "final", "answer": {"choice": "C", "text": "moderately reduced"}}),
            8 => json!({"action": "final", "answer": {"text": "no choice given"}}),
            _ => json!({"action": "dance"}),
        })
        .collect()
}

/// Checks the per-iteration memory accounting of one finished turn.
fn check_accounting(events: &[SessionEvent], session: &Session, outcome: &LoopOutcome) -> Result<(), String> {
    ensure(session.memory().len() == events.len(), || "memory and event log differ in length".into())?;
    for (m, e) in session.memory().entries().iter().zip(events) {
        ensure(m.seq == e.seq && m.kind == MemoryKind::of_event(e.kind), || {
            format!("memory entry {} mismatch", e.seq)
        })?;
    }
    let terminal: Vec<&SessionEvent> = events
        .iter()
        .filter(|e| matches!(e.kind, EventKind::FinalAnswer | EventKind::ClarificationRequest | EventKind::Timeout))
        .collect();
    ensure(terminal.len() == 1, || format!("{} terminal events", terminal.len()))?;
    ensure(events.last().map(|e| e.kind) == Some(outcome.exit.event_kind()), || "terminal event is not last".into())?;
    let thoughts: Vec<usize> =
        events.iter().enumerate().filter(|(_, e)| e.kind == EventKind::Thought).map(|(i, _)| i).collect();
    ensure(thoughts.len() as u32 == outcome.iterations_used, || {
        format!("{} thoughts, {} iterations", thoughts.len(), outcome.iterations_used)
    })?;
    for (n, &i) in thoughts.iter().enumerate() {
        let end = thoughts.get(n + 1).copied().unwrap_or(events.len());
        let span = &events[i + 1..end];
        let proposed = events[i].payload["step"]["proposed_calls"].as_array().map_or(0, Vec::len);
        let calls = span.iter().filter(|e| e.kind == EventKind::ToolCall).count();
        let results = span.iter().filter(|e| e.kind == EventKind::ToolResult).count();
        ensure(calls == proposed && results == proposed, || {
            format!("iteration {n}: {proposed} proposed, {calls} calls, {results} results")
        })?;
        for pair in span
            .iter()
            .filter(|e| matches!(e.kind, EventKind::ToolCall | EventKind::ToolResult))
            .collect::<Vec<_>>()
            .chunks(2)
        {
            ensure(
                pair.len() == 2
                    && pair[0].kind == EventKind::ToolCall
                    && pair[1].payload["call_seq"] == json!(pair[0].seq),
                || format!("iteration {n}: call/result pairing broken"),
            )?;
        }
    }
    Ok(())
}

struct ConformanceRun {
    log: String,
    overshoot_ms: i64,
}

fn conformance_case(case: u64) -> Result<ConformanceRun, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(case);
    let latency_ms = rng.random_range(0..=15);
    let config = AgentConfig {
        t_max_ms: rng.random_range(5..=60),
        max_iterations: rng.random_range(1..=6),
        ..AgentConfig::default()
    };
    let script = random_script(&mut rng, latency_ms);
    let mut a4c = generate_clip(&VideoGenConfig::new(35.0), case).unwrap();
    a4c.clip_id = "ef-35".into();
    let plax = ClipDescriptor::with_trace("plax", ViewLabel::Plax, 0.6, vec![18.0, 12.0, 18.0]);
    let study = study_with(vec![a4c, plax]);
    let registry = registry_with_probe();
    let clock: Arc<dyn Clock> = Arc::new(SystemClock::new());
    let mut session = Session::new(format!("conf-{case}"), study, clock);
    let mut controller = ScriptedPolicy::from_actions(script);
    let wall = Instant::now();
    let outcome =
        session.ask(ef_query(), &config, &registry, &mut controller).map_err(|e| format!("case {case}: {e}"))?;
    let wall_ms = wall.elapsed().as_millis() as i64;
    check_accounting(session.events(), &session, &outcome).map_err(|e| format!("case {case}: {e}"))?;
    if outcome.exit == ExitKind::Timeout {
        ensure(!outcome.response.text.is_empty(), || format!("case {case}: empty fallback"))?;
    }
    let overshoot_ms = wall_ms.max(outcome.elapsed_ms as i64) - config.t_max_ms as i64;
    Ok(ConformanceRun { log: session.events_jsonl(), overshoot_ms })
}

fn loop_conformance(logs: &mut Vec<String>) -> Check {
    const CASES: u64 = 1200;
    let started = Instant::now();
    let workers = std::thread::available_parallelism().map_or(4, |n| n.get()).clamp(4, 16) as u64;
    let runs: Vec<Result<ConformanceRun, String>> = std::thread::scope(|scope| {
        let handles: Vec<_> = (0..workers)
            .map(|w| {
                scope.spawn(move || (w..CASES).step_by(workers as usize).map(conformance_case).collect::<Vec<_>>())
            })
            .collect();
        handles.into_iter().flat_map(|h| h.join().expect("worker panicked")).collect()
    });
    let mut worst = i64::MIN;
    for run in runs {
        let run = run?;
        worst = worst.max(run.overshoot_ms);
        logs.push(run.log);
    }
    ensure(worst <= 100, || format!("budget overshoot {worst} ms"))?;
    within_time(started, Duration::from_secs(60))?;
    Ok(format!("{CASES} runs, worst overshoot {worst} ms, {:.1}s", started.elapsed().as_secs_f64()))
}

fn deterministic_session(seed: u64) -> Result<String, String> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let script: Vec<Value> = random_script(&mut rng, 0);
    let config = AgentConfig { max_iterations: rng.random_range(2..=6), ..AgentConfig::default() };
    let mut a4c = generate_clip(&VideoGenConfig::new(35.0), seed).unwrap();
    a4c.clip_id = "ef-35".into();
    let study = study_with(vec![a4c, ClipDescriptor::with_trace("plax", ViewLabel::Plax, 0.6, vec![18.0, 12.0, 18.0])]);
    let registry = registry_with_probe();
    let mut session = Session::new(format!("det-{seed}"), study, Arc::new(LogicalClock::new(1_000, 1)));
    let mut controller = ScriptedPolicy::from_actions(script);
    let first = session.ask(ef_query(), &config, &registry, &mut controller).map_err(|e| e.to_string())?;
    if first.exit == ExitKind::Clarification {
        session.reply("Use the apical clip.", &config, &registry, &mut controller).map_err(|e| e.to_string())?;
    }
    Ok(session.events_jsonl())
}

fn determinism_and_replay(recorded: &[String]) -> Check {
    let mut logs: Vec<String> = Vec::new();
    for seed in 0..200 {
        let a = deterministic_session(seed)?;
        let b = deterministic_session(seed)?;
        ensure(a == b, || format!("seed {seed}: logs differ between identical runs"))?;
        logs.push(a);
    }
    // Oracle sessions too, over a few generated studies.
    let set = generate_synthetic_qa(8, 11, &ClinicalThresholds::default()).map_err(|e| e.to_string())?;
    for q in set.loaded() {
        let run = || {
            let registry = registry_with_probe();
            let mut s =
                Session::new(q.record.question_id.clone(), Arc::clone(&q.study), Arc::new(LogicalClock::new(0, 1)));
            let mut c = BackendSpec::Oracle.build(ClinicalThresholds::default(), 0).unwrap();
            s.ask(q.record.query.clone(), &AgentConfig::default(), &registry, c.as_mut()).unwrap();
            s.events_jsonl()
        };
        let a = run();
        ensure(a == run(), || format!("{}: oracle logs differ", q.record.question_id))?;
        logs.push(a);
    }
    let total = logs.len() + recorded.len();
    let mut matched = 0;
    for log in logs.iter().chain(recorded) {
        let events = parse_events_jsonl(log).map_err(|e| e.to_string())?;
        let report = replay(&events);
        ensure(report.is_match(), || format!("replay mismatch: {report}"))?;
        matched += 1;
    }
    Ok(format!("{} byte-identical pairs, replay MATCH {matched}/{total}", logs.len()))
}

fn ef_round_trip() -> Check {
    let started = Instant::now();
    let mut worst_exact = 0.0f64;
    let mut worst_noisy = 0.0f64;
    for target in (15..=75).step_by(5).map(f64::from) {
        let clean = generate_clip(&VideoGenConfig { quality: 1.0, ..VideoGenConfig::new(target) }, 0)?;
        let ef = measure_clip(&clean).map_err(|e| e.to_string())?.ef_pct;
        worst_exact = worst_exact.max((ef - target).abs());
        for seed in 0..50 {
            let noisy = generate_clip(&VideoGenConfig { quality: 0.9, ..VideoGenConfig::new(target) }, seed)?;
            let ef = measure_clip(&noisy).map_err(|e| e.to_string())?.ef_pct;
            worst_noisy = worst_noisy.max((ef - target).abs());
        }
    }
    ensure(worst_exact <= 1e-9, || format!("quality 1.0 error {worst_exact:e}"))?;
    ensure(worst_noisy <= 0.5, || format!("quality 0.9 error {worst_noisy}"))?;
    within_time(started, Duration::from_secs(5))?;
    Ok(format!("max |error| {worst_exact:.1e} at q=1.0, {worst_noisy:.3} at q=0.9"))
}

fn cache_contract() -> Check {
    let counter = Arc::new(AtomicUsize::new(0));
    let registry = ToolRegistry::new();
    let open = json!({"type": "document", "values": {"type": "any"}});
    for version in ["1.0.0", "1.1.0"] {
        let counter = Arc::clone(&counter);
        registry
            .register(
                plain_descriptor("counted", version, true, open.clone()),
                Arc::new(FnExecutor(move |args: &Value, _: &EchoStudy| {
                    counter.fetch_add(1, Ordering::SeqCst);
                    Ok(json!({"echo": args}))
                })),
            )
            .map_err(|e| e.to_string())?;
    }
    let study = study_with(vec![]);
    let policy = ExecutionPolicy::default();
    let strategy = prop::collection::btree_map(
        "[a-z]{1,6}",
        prop_oneof![any::<i32>().prop_map(Value::from), "[a-z]{0,4}".prop_map(Value::from)],
        1..6,
    );
    let mut runner = TestRunner::new(ProptestConfig { cases: 256, ..ProptestConfig::default() });
    let cases = AtomicUsize::new(0);
    runner
        .run(&strategy, |map| {
            cases.fetch_add(1, Ordering::SeqCst);
            registry.cache().clear();
            let forward: serde_json::Map<String, Value> = map.clone().into_iter().collect();
            let reversed: serde_json::Map<String, Value> = map.clone().into_iter().rev().collect();
            let (fwd, rev) = (Value::Object(forward), Value::Object(reversed));
            let v1: semver::Version = "1.0.0".parse().unwrap();
            let v2: semver::Version = "1.1.0".parse().unwrap();
            prop_assert_eq!(cache_key("counted", &v1, &fwd), cache_key("counted", &v1, &rev));
            prop_assert_ne!(cache_key("counted", &v1, &fwd), cache_key("counted", &v2, &fwd));

            let before = counter.load(Ordering::SeqCst);
            let call = |id: &str, args: &Value, req: &str| {
                let mut r = ToolRequest::new(id, "counted", args.clone());
                r.version_req = Some(req.parse().unwrap());
                registry.execute(&r, &policy, &study)
            };
            let a = call("a", &fwd, "=1.0.0");
            let b = call("b", &rev, "=1.0.0");
            prop_assert!(a.is_ok() && b.is_ok());
            prop_assert_eq!(counter.load(Ordering::SeqCst) - before, 1);
            prop_assert!(b.from_cache && !a.from_cache);
            let c = call("c", &fwd, "=1.1.0");
            prop_assert!(!c.from_cache);
            prop_assert_eq!(counter.load(Ordering::SeqCst) - before, 2);
            Ok(())
        })
        .map_err(|e| e.to_string())?;
    Ok(format!("{} property cases", cases.load(Ordering::SeqCst)))
}

fn fallback_paths() -> Check {
    let low = ClipDescriptor::with_trace("grainy", ViewLabel::A4C, 0.1, vec![20.0, 14.0, 9.0, 14.0, 20.0]);
    let good = generate_clip(&VideoGenConfig::new(55.0), 1)?;
    let study = study_with(vec![low, good]);
    let registry = registry_with_probe();
    let mut controller = ScriptedPolicy::from_actions([
        json!({"action": "call_tools", "calls": [{"tool": "view_classify", "arguments": {"clip_id": "grainy"}}]}),
        json!({"action": "call_tools", "calls": [{"tool": "measure", "arguments": {"clip_id": "absent"}}]}),
        json!({"action": "final", "answer": {"choice": "A", "text": "normal"}}),
    ]);
    let mut session = Session::new("fallback", study, Arc::new(LogicalClock::new(0, 1)));
    let outcome =
        session.ask(ef_query(), &AgentConfig::default(), &registry, &mut controller).map_err(|e| e.to_string())?;
    ensure(outcome.exit == ExitKind::Answer, || format!("exit {:?}", outcome.exit))?;
    let results: Vec<ToolResponse> = session
        .memory()
        .entries()
        .iter()
        .filter(|m| m.kind == MemoryKind::ToolResult)
        .map(|m| serde_json::from_value(m.payload["response"].clone()).unwrap())
        .collect();
    ensure(results.len() == 2, || format!("{} tool results", results.len()))?;
    let mut seen = Vec::new();
    for (r, expected, alternate) in [
        (&results[0], ErrorCode::LowQualityInput, "view_classify_declared"),
        (&results[1], ErrorCode::MissingClip, "measure_best_clip"),
    ] {
        let trace = r.fallback.as_ref().ok_or_else(|| format!("{}: no fallback trace", r.request_id))?;
        ensure(trace.trigger.code == expected, || format!("trigger {:?}, expected {expected:?}", trace.trigger.code))?;
        ensure(trace.chain.first().map(String::as_str) == Some(alternate), || format!("chain {:?}", trace.chain))?;
        let code = serde_json::to_value(expected).unwrap();
        seen.push(format!(
            "{} -> {alternate} ({})",
            code.as_str().unwrap_or_default(),
            if r.is_ok() { "served" } else { "exhausted" }
        ));
    }
    ensure(replay(session.events()).is_match(), || "fallback session does not replay".into())?;
    Ok(seen.join(", "))
}

fn synthetic_experiment() -> Check {
    let started = Instant::now();
    let thresholds = ClinicalThresholds::default();
    let set = generate_synthetic_qa(200, 2025, &thresholds)?;
    let questions = set.loaded();
    let config = EvalConfig { parallelism: 4, ..EvalConfig::default() };
    let acc = |backend: BackendSpec| score(&run_protocol(&config, &backend, &questions, 2025));
    let oracle = acc(BackendSpec::Oracle);
    let prior = acc(BackendSpec::Prior);
    let heuristic = acc(BackendSpec::Heuristic);
    let (lo, hi) = binomial_acceptance_region(200, 0.25, 0.99);
    ensure(oracle.correct == oracle.n, || format!("oracle {}/{}", oracle.correct, oracle.n))?;
    ensure((lo..=hi).contains(&(prior.correct as u64)), || format!("prior {} outside [{lo}, {hi}]", prior.correct))?;
    ensure(prior.correct < heuristic.correct && heuristic.correct < oracle.correct, || {
        format!("heuristic {} not strictly between {} and {}", heuristic.correct, prior.correct, oracle.correct)
    })?;
    within_time(started, Duration::from_secs(120))?;
    Ok(format!(
        "oracle {}%, heuristic {}%, prior {}% (99% region {lo}..={hi} of 200), {:.1}s",
        oracle.percent_display(),
        heuristic.percent_display(),
        prior.percent_display(),
        started.elapsed().as_secs_f64()
    ))
}

fn timeout_behaviour() -> Check {
    let registry = registry_with_probe();
    let mut controller = ScriptedPolicy::from_actions([
        json!({"action": "call_tools", "calls": [{"tool": "probe", "arguments": {"ms": 500, "nonce": 1}}]}),
        json!({"action": "final", "answer": {"choice": "A", "text": "too late"}}),
    ]);
    let config = AgentConfig { t_max_ms: 200, ..AgentConfig::default() };
    let mut session = Session::new("timeout", default_study(), Arc::new(SystemClock::new()));
    let outcome = session.ask(ef_query(), &config, &registry, &mut controller).map_err(|e| e.to_string())?;
    ensure(outcome.exit == ExitKind::Timeout, || format!("exit {:?}", outcome.exit))?;
    ensure(outcome.reason == Some(TimeoutReason::Budget), || format!("reason {:?}", outcome.reason))?;
    ensure(!outcome.response.text.trim().is_empty(), || "empty fallback text".into())?;
    ensure(outcome.response.choice.is_some(), || "fallback carries no choice".into())?;
    ensure(outcome.elapsed_ms <= 300, || format!("elapsed {} ms", outcome.elapsed_ms))?;
    Ok(format!("exit=timeout after {} ms, fallback choice {}", outcome.elapsed_ms, outcome.response.choice.unwrap()))
}

fn main() {
    let mut logs = Vec::new();
    // Evaluated in order: replay checks the logs the conformance runs leave.
    let results: Vec<(&str, Check)> = vec![
        ("accuracy arithmetic", accuracy_arithmetic()),
        ("loop conformance", loop_conformance(&mut logs)),
        ("determinism and replay", determinism_and_replay(&logs)),
        ("EF round-trip", ef_round_trip()),
        ("cache contract", cache_contract()),
        ("fallback paths", fallback_paths()),
        ("synthetic QA experiment", synthetic_experiment()),
        ("timeout behaviour", timeout_behaviour()),
    ];
    let mut failed = 0;
    for (name, result) in &results {
        match result {
            Ok(detail) => println!("PASS  {name}: {detail}"),
            Err(why) => {
                failed += 1;
                println!("FAIL  {name}: {why}");
            }
        }
    }
    println!("acceptance: {} passed, {failed} failed", results.len() - failed);
    if failed > 0 {
        std::process::exit(1);
    }
}
