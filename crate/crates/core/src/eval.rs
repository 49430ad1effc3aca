//! Closed-ended multiple-choice evaluation: load questions, run one fresh
//! session per question, score accuracy, and generate synthetic question
//! sets whose answers follow from fixture truth.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use std::collections::BTreeMap;
use std::path::{Path, PathBuf};
use std::sync::Arc;

use crate::agent::{timeout_fallback, AgentConfig, ExitKind, Session, TimeoutReason};
use crate::canonical::{fingerprint, fingerprint_document, to_document};
use crate::clock::{Clock, LogicalClock, SystemClock};
use crate::controller::{BackendSpec, MitralStatus};
use crate::domain::{
    read_study_file, validate_study, write_study_file, AnswerKey, ClinicianQuery, ClipDescriptor, EchoStudy, EventKind,
    FindingCategory, GroundTruth, Severity, StudyFileError, ViewLabel,
};
use crate::grading::ClinicalThresholds;
use crate::registry::ToolRegistry;
use crate::tools::{generate_clip, register_mock_suite, VideoGenConfig};

/// A study given by file path (relative to the question file) or inline.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum StudyRef {
    Path(String),
    Inline(Box<EchoStudy>),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct QuestionRecord {
    pub question_id: String,
    pub study_ref: StudyRef,
    pub query: ClinicianQuery,
    pub answer_key: AnswerKey,
    pub category: FindingCategory,
}

impl QuestionRecord {
    pub fn validate(&self) -> Result<(), String> {
        if self.question_id.trim().is_empty() {
            return Err("question_id must be non-empty".into());
        }
        let options = self.query.options.as_ref().ok_or("query must have four options A-D")?;
        self.query
            .validate()
            .map_err(|v| v.iter().map(|x| format!("{}: {}", x.path, x.message)).collect::<Vec<_>>().join("; "))?;
        if !options.iter().any(|o| o.key == self.answer_key) {
            return Err(format!("answer_key {} is not among the options", self.answer_key));
        }
        Ok(())
    }
}

/// A question with its study resolved.
#[derive(Debug, Clone)]
pub struct LoadedQuestion {
    pub record: QuestionRecord,
    pub study: Arc<EchoStudy>,
}

#[derive(Debug, thiserror::Error)]
pub enum QuestionSetError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("line {line}: {message}")]
    Parse { line: usize, message: String },
}

/// Parses `.qa.jsonl` text. Every error names its 1-based line.
pub fn parse_questions(text: &str) -> Result<Vec<QuestionRecord>, QuestionSetError> {
    let mut out = Vec::new();
    let mut ids = std::collections::BTreeSet::new();
    for (i, line) in text.lines().enumerate() {
        let line_no = i + 1;
        if line.trim().is_empty() {
            continue;
        }
        let err = |message: String| QuestionSetError::Parse { line: line_no, message };
        let record: QuestionRecord = serde_json::from_str(line).map_err(|e| err(e.to_string()))?;
        record.validate().map_err(err)?;
        if !ids.insert(record.question_id.clone()) {
            return Err(err(format!("duplicate question_id {:?}", record.question_id)));
        }
        out.push(record);
    }
    Ok(out)
}

pub fn load_questions(path: &Path) -> Result<Vec<QuestionRecord>, QuestionSetError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| QuestionSetError::Io { path: path.display().to_string(), source })?;
    parse_questions(&text)
}

/// Loads a question file and resolves every study reference relative to
/// the file's directory.
pub fn load_question_set(path: &Path) -> Result<Vec<LoadedQuestion>, QuestionSetError> {
    let text = std::fs::read_to_string(path)
        .map_err(|source| QuestionSetError::Io { path: path.display().to_string(), source })?;
    let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
    let records = parse_questions(&text)?;
    let line_of: BTreeMap<String, usize> = text
        .lines()
        .enumerate()
        .filter_map(|(i, l)| {
            serde_json::from_str::<serde_json::Value>(l)
                .ok()
                .and_then(|v| v["question_id"].as_str().map(|q| (q.to_string(), i + 1)))
        })
        .collect();
    let mut cache: BTreeMap<PathBuf, Arc<EchoStudy>> = BTreeMap::new();
    let mut out = Vec::with_capacity(records.len());
    for record in records {
        let line = line_of.get(&record.question_id).copied().unwrap_or(0);
        let study = match &record.study_ref {
            StudyRef::Inline(s) => Arc::new((**s).clone()),
            StudyRef::Path(p) => {
                let full = base.join(p);
                match cache.get(&full) {
                    Some(s) => Arc::clone(s),
                    None => {
                        let s = Arc::new(read_study_file(&full).map_err(|e| QuestionSetError::Parse {
                            line,
                            message: format!("study_ref {p:?}: {}", e),
                        })?);
                        cache.insert(full, Arc::clone(&s));
                        s
                    }
                }
            }
        };
        if let Err(v) = validate_study(&study) {
            return Err(QuestionSetError::Parse {
                line,
                message: format!(
                    "study {}: {}",
                    study.study_id,
                    v.iter().map(|x| format!("{}: {}", x.path, x.message)).collect::<Vec<_>>().join("; ")
                ),
            });
        }
        out.push(LoadedQuestion { record, study });
    }
    Ok(out)
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EvalConfig {
    #[serde(default)]
    pub agent: AgentConfig,
    /// Share one tool cache across questions. Off keeps questions independent.
    #[serde(default)]
    pub share_cache: bool,
    /// Deterministic clock, so repeated runs produce identical documents.
    #[serde(default = "yes")]
    pub logical_clock: bool,
    /// Worker threads; results keep input order.
    #[serde(default = "one")]
    pub parallelism: usize,
}

fn yes() -> bool {
    true
}
fn one() -> usize {
    1
}

impl Default for EvalConfig {
    fn default() -> Self {
        EvalConfig { agent: AgentConfig::default(), share_cache: false, logical_clock: true, parallelism: 1 }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct QuestionResult {
    pub question_id: String,
    pub category: FindingCategory,
    pub answer_key: AnswerKey,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub choice: Option<AnswerKey>,
    pub correct: bool,
    pub iterations_used: u32,
    pub tool_calls: usize,
    pub elapsed_ms: u64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub exit: Option<ExitKind>,
    /// Scored through the fallback instead of a controller answer.
    #[serde(default)]
    pub flagged: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub diagnostic: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct EvalRun {
    pub run_id: String,
    pub backend: String,
    pub seed: u64,
    pub config: EvalConfig,
    pub results: Vec<QuestionResult>,
}

/// Per-question controller seed: independent of question order.
pub fn question_seed(run_seed: u64, question_id: &str) -> u64 {
    let digest = fingerprint(question_id.as_bytes());
    let prefix = u64::from_str_radix(&digest[..16], 16).unwrap_or(0);
    prefix ^ run_seed
}

fn run_question(
    q: &LoadedQuestion,
    backend: &BackendSpec,
    config: &EvalConfig,
    seed: u64,
    registry: &ToolRegistry,
) -> QuestionResult {
    let rec = &q.record;
    let mut result = QuestionResult {
        question_id: rec.question_id.clone(),
        category: rec.category,
        answer_key: rec.answer_key,
        choice: None,
        correct: false,
        iterations_used: 0,
        tool_calls: 0,
        elapsed_ms: 0,
        exit: None,
        flagged: false,
        diagnostic: None,
    };
    let mut controller = match backend.build(config.agent.thresholds, question_seed(seed, &rec.question_id)) {
        Ok(c) => c,
        Err(e) => {
            result.diagnostic = Some(format!("backend: {e}"));
            return result;
        }
    };
    let clock: Arc<dyn Clock> =
        if config.logical_clock { Arc::new(LogicalClock::new(0, 1)) } else { Arc::new(SystemClock::new()) };
    let mut session = Session::new(rec.question_id.clone(), Arc::clone(&q.study), clock);
    match session.ask(rec.query.clone(), &config.agent, registry, controller.as_mut()) {
        Ok(outcome) => {
            result.iterations_used = outcome.iterations_used;
            result.elapsed_ms = outcome.elapsed_ms;
            result.exit = Some(outcome.exit);
            result.tool_calls = session.events().iter().filter(|e| e.kind == EventKind::ToolCall).count();
            result.choice = outcome.response.choice;
            if outcome.exit == ExitKind::Clarification {
                // The protocol is single-step: a clarification is scored as
                // the fallback answer and flagged.
                result.flagged = true;
                result.diagnostic = Some(format!("clarification requested: {}", outcome.response.text));
                if let Ok(state) = session.state_for(rec.query.clone()) {
                    let fb = timeout_fallback(
                        &state,
                        TimeoutReason::ControllerFailure,
                        Some("clarification is not available in closed-ended evaluation"),
                        &config.agent,
                    );
                    result.choice = fb.choice;
                }
            } else if outcome.exit == ExitKind::Timeout {
                result.flagged = true;
                result.diagnostic = Some(outcome.response.text.clone());
            }
        }
        Err(e) => result.diagnostic = Some(e.to_string()),
    }
    result.correct = result.choice == Some(rec.answer_key);
    result
}

fn fresh_registry(thresholds: ClinicalThresholds) -> ToolRegistry {
    let r = ToolRegistry::new();
    register_mock_suite(&r, thresholds).expect("mock suite registers");
    r
}

/// Runs every question in a fresh session with the mock tool suite.
pub fn run_protocol(config: &EvalConfig, backend: &BackendSpec, questions: &[LoadedQuestion], seed: u64) -> EvalRun {
    let thresholds = config.agent.thresholds;
    run_protocol_with(config, backend, questions, seed, &move || fresh_registry(thresholds))
}

/// As [`run_protocol`], with a caller-supplied tool registry factory.
pub fn run_protocol_with(
    config: &EvalConfig,
    backend: &BackendSpec,
    questions: &[LoadedQuestion],
    seed: u64,
    make_registry: &(dyn Fn() -> ToolRegistry + Sync),
) -> EvalRun {
    let shared = config.share_cache.then(make_registry);
    let run_one = |q: &LoadedQuestion| match &shared {
        Some(r) => run_question(q, backend, config, seed, r),
        None => run_question(q, backend, config, seed, &make_registry()),
    };
    let results: Vec<QuestionResult> = if config.parallelism <= 1 || questions.len() < 2 {
        questions.iter().map(run_one).collect()
    } else {
        let chunk = questions.len().div_ceil(config.parallelism);
        std::thread::scope(|scope| {
            let handles: Vec<_> = questions
                .chunks(chunk)
                .map(|part| scope.spawn(move || part.iter().map(run_one).collect::<Vec<_>>()))
                .collect();
            handles.into_iter().flat_map(|h| h.join().expect("evaluation worker panicked")).collect()
        })
    };
    EvalRun {
        run_id: run_id_for(config, backend, questions, seed),
        backend: backend.label().to_string(),
        seed,
        config: config.clone(),
        results,
    }
}

/// Identifier of a run: a digest of its inputs, known before it starts.
pub fn run_id_for(config: &EvalConfig, backend: &BackendSpec, questions: &[LoadedQuestion], seed: u64) -> String {
    let ids: Vec<&str> = questions.iter().map(|q| q.record.question_id.as_str()).collect();
    let studies: Vec<String> = questions.iter().map(|q| q.study.content_fingerprint()).collect();
    let run_doc = serde_json::json!({
        "questions": ids, "studies": studies, "backend": backend, "seed": seed, "config": config,
    });
    fingerprint_document(&run_doc).map(|fp| fp[..16].to_string()).unwrap_or_default()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CategoryScore {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct AccuracyReport {
    pub n: usize,
    pub correct: usize,
    pub accuracy: f64,
    pub per_category: BTreeMap<FindingCategory, CategoryScore>,
}

impl AccuracyReport {
    pub fn from_counts(correct: usize, n: usize) -> Self {
        AccuracyReport { n, correct, accuracy: ratio(correct, n), per_category: BTreeMap::new() }
    }

    /// Accuracy rounded half-up to three decimals, e.g. "0.508".
    pub fn accuracy_display(&self) -> String {
        let permille = rounded_half_up(self.correct, self.n, 1000);
        format!("{}.{:03}", permille / 1000, permille % 1000)
    }

    /// Percentage with one decimal, e.g. "50.8".
    pub fn percent_display(&self) -> String {
        let permille = rounded_half_up(self.correct, self.n, 1000);
        format!("{}.{}", permille / 10, permille % 10)
    }
}

fn ratio(a: usize, b: usize) -> f64 {
    if b == 0 {
        0.0
    } else {
        a as f64 / b as f64
    }
}

/// round(correct/n × scale), halves rounded up, in exact integer arithmetic.
pub fn rounded_half_up(correct: usize, n: usize, scale: u64) -> u64 {
    if n == 0 {
        return 0;
    }
    let (c, n) = (correct as u128, n as u128);
    ((2 * c * scale as u128 + n) / (2 * n)) as u64
}

pub fn score(run: &EvalRun) -> AccuracyReport {
    let mut per: BTreeMap<FindingCategory, (usize, usize)> = BTreeMap::new();
    for r in &run.results {
        let e = per.entry(r.category).or_default();
        e.0 += 1;
        e.1 += usize::from(r.correct);
    }
    let n = run.results.len();
    let correct = run.results.iter().filter(|r| r.correct).count();
    AccuracyReport {
        n,
        correct,
        accuracy: ratio(correct, n),
        per_category: per
            .into_iter()
            .map(|(c, (n, k))| (c, CategoryScore { n, correct: k, accuracy: ratio(k, n) }))
            .collect(),
    }
}

/// Two-column text table, accuracy as a percentage with one decimal.
pub fn render_table(reports: &[(String, AccuracyReport)]) -> String {
    let width = reports.iter().map(|(l, _)| l.len()).max().unwrap_or(0);
    let mut out = String::new();
    for (label, r) in reports {
        out.push_str(&format!("{label:<width$}  {}\n", r.percent_display()));
    }
    out
}

pub fn render_markdown_table(reports: &[(String, AccuracyReport)]) -> String {
    let mut out = String::from("| Model | Accuracy (%) |\n|---|---:|\n");
    for (label, r) in reports {
        out.push_str(&format!("| {label} | {} |\n", r.percent_display()));
    }
    out
}

/// Central acceptance region `[lo, hi]` of Binomial(n, p): each tail outside
/// it has probability at most `(1 - confidence) / 2`.
pub fn binomial_acceptance_region(n: u64, p: f64, confidence: f64) -> (u64, u64) {
    use statrs::distribution::{Binomial, DiscreteCDF};
    let dist = Binomial::new(p, n).expect("valid binomial parameters");
    let tail = (1.0 - confidence) / 2.0;
    // lo: smallest k with P(X < k) <= tail < P(X <= k).
    let lo = (0..=n).find(|&k| dist.cdf(k) > tail).unwrap_or(0);
    // hi: smallest k with P(X > k) <= tail.
    let hi = (0..=n).find(|&k| 1.0 - dist.cdf(k) <= tail).unwrap_or(n);
    (lo, hi)
}

/// Exact (Clopper-Pearson) confidence interval for a binomial proportion.
pub fn clopper_pearson(k: u64, n: u64, confidence: f64) -> (f64, f64) {
    use statrs::distribution::{Beta, ContinuousCDF};
    let alpha = 1.0 - confidence;
    let lo = if k == 0 {
        0.0
    } else {
        Beta::new(k as f64, (n - k + 1) as f64).expect("valid beta").inverse_cdf(alpha / 2.0)
    };
    let hi = if k == n {
        1.0
    } else {
        Beta::new((k + 1) as f64, (n - k) as f64).expect("valid beta").inverse_cdf(1.0 - alpha / 2.0)
    };
    (lo, hi)
}

// ---------------------------------------------------------------------------
// Synthetic question sets

pub const EF_OPTIONS: [&str; 4] = ["Normal", "Mildly reduced", "Moderately reduced", "Severely reduced"];
pub const LVH_OPTIONS: [&str; 4] = [
    "No left ventricular hypertrophy",
    "Mild left ventricular hypertrophy",
    "Moderate left ventricular hypertrophy",
    "Severe left ventricular hypertrophy",
];
pub const EFFUSION_OPTIONS: [&str; 4] = [
    "No pericardial effusion",
    "Small pericardial effusion",
    "Moderate pericardial effusion",
    "Large pericardial effusion",
];
pub const MITRAL_OPTIONS: [&str; 4] = [
    "No significant mitral valve disease",
    "Mitral regurgitation",
    "Mitral stenosis",
    "Both mitral regurgitation and stenosis",
];

/// Sampling ranges kept away from the default grade boundaries.
const EF_RANGES: [(f64, f64); 4] = [(55.0, 70.0), (41.0, 48.0), (31.0, 38.0), (15.0, 27.0)];
const WALL_RANGES_MM: [(f64, f64); 4] = [(8.0, 10.5), (12.0, 13.0), (14.5, 16.0), (17.5, 20.0)];
const EFFUSION_RANGES_CM: [(f64, f64); 4] = [(0.0, 0.0), (0.3, 0.8), (1.2, 1.8), (2.3, 3.0)];

#[derive(Debug, Clone, PartialEq)]
pub struct SyntheticSet {
    pub questions: Vec<QuestionRecord>,
    pub studies: Vec<EchoStudy>,
}

impl SyntheticSet {
    pub fn loaded(&self) -> Vec<LoadedQuestion> {
        let by_path: BTreeMap<String, Arc<EchoStudy>> =
            self.studies.iter().map(|s| (study_path(&s.study_id), Arc::new(s.clone()))).collect();
        self.questions
            .iter()
            .map(|q| LoadedQuestion {
                record: q.clone(),
                study: match &q.study_ref {
                    StudyRef::Path(p) => Arc::clone(&by_path[p]),
                    StudyRef::Inline(s) => Arc::new((**s).clone()),
                },
            })
            .collect()
    }

    /// Writes `questions.qa.jsonl` and `studies/<id>.json` under `dir`.
    pub fn write_to(&self, dir: &Path) -> Result<PathBuf, StudyFileError> {
        let studies = dir.join("studies");
        std::fs::create_dir_all(&studies)
            .map_err(|source| StudyFileError::Io { path: studies.display().to_string(), source })?;
        for s in &self.studies {
            write_study_file(&dir.join(study_path(&s.study_id)), s)?;
        }
        let mut text = String::new();
        for q in &self.questions {
            let doc = to_document(q).expect("question records are finite");
            text.push_str(&crate::canonical::canonical_string(&doc).expect("finite"));
            text.push('\n');
        }
        let path = dir.join("questions.qa.jsonl");
        std::fs::write(&path, text)
            .map_err(|source| StudyFileError::Io { path: path.display().to_string(), source })?;
        Ok(path)
    }
}

fn study_path(study_id: &str) -> String {
    format!("studies/{study_id}.json")
}

fn sample(rng: &mut ChaCha8Rng, (lo, hi): (f64, f64)) -> f64 {
    if lo == hi {
        return lo;
    }
    let v: f64 = rng.random_range(lo..=hi);
    (v * 10.0).round() / 10.0
}

fn traced_clip(id: String, view: ViewLabel, ef: f64, quality: f64, seed: u64) -> ClipDescriptor {
    let config = VideoGenConfig { quality, ..VideoGenConfig::new(ef) };
    let mut clip = generate_clip(&config, seed).expect("valid generator config");
    clip.clip_id = id;
    clip.declared_view = view;
    clip
}

/// Answer key implied by fixture truth under the given thresholds.
pub fn key_from_truth(
    study: &EchoStudy,
    category: FindingCategory,
    thresholds: &ClinicalThresholds,
) -> Option<AnswerKey> {
    let truths = study.clips.iter().filter_map(|c| c.ground_truth.as_ref());
    let rank = match category {
        FindingCategory::LvSystolicFunction => {
            truths.filter_map(|g| g.true_ef_pct).next().map(|ef| thresholds.grade_ef(ef).rank())
        }
        FindingCategory::LvHypertrophy => truths.filter_map(|g| g.true_lvh_grade).next().map(Severity::rank),
        FindingCategory::PericardialEffusion => truths.filter_map(|g| g.true_effusion_grade).next().map(Severity::rank),
        FindingCategory::MitralValve => truths
            .filter(|g| g.labels.contains_key("mitral_regurgitation") || g.labels.contains_key("mitral_stenosis"))
            .map(|g| {
                let l = |k: &str| g.labels.get(k).copied().unwrap_or(false);
                MitralStatus::from_flags(l("mitral_regurgitation"), l("mitral_stenosis")).index()
            })
            .next(),
    }?;
    AnswerKey::from_index(rank)
}

/// Builds `n` questions cycling through the four categories, with grades
/// drawn uniformly. Each study holds the graded clip plus a lower-quality
/// auxiliary clip.
pub fn generate_synthetic_qa(n: usize, seed: u64, thresholds: &ClinicalThresholds) -> Result<SyntheticSet, String> {
    if n < 4 {
        return Err(format!("n must be at least 4, got {n}"));
    }
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    let mut questions = Vec::with_capacity(n);
    let mut studies = Vec::with_capacity(n);
    for i in 0..n {
        let category = FindingCategory::ALL[i % 4];
        let grade: usize = rng.random_range(0..4);
        let study_id = format!("syn-{seed}-{i:04}");
        let clip_seed: u64 = rng.random();
        let aux_seed: u64 = rng.random();
        let mut truth = GroundTruth::default();
        let (text, options, clip) = match category {
            FindingCategory::LvSystolicFunction => {
                let ef = sample(&mut rng, EF_RANGES[grade]);
                truth.true_ef_pct = Some(ef);
                let clip = traced_clip(format!("{study_id}-a4c"), ViewLabel::A4C, ef, 0.9, clip_seed);
                ("How would you grade left ventricular systolic function?", EF_OPTIONS, clip)
            }
            FindingCategory::LvHypertrophy => {
                let t = sample(&mut rng, WALL_RANGES_MM[grade]);
                let ef = sample(&mut rng, EF_RANGES[0]);
                let sev = thresholds.grade_lvh(t);
                truth.true_ef_pct = Some(ef);
                truth.true_lvh_grade = Some(sev);
                truth.labels.insert("lvh".into(), sev != Severity::Normal);
                let mut clip = traced_clip(format!("{study_id}-plax"), ViewLabel::Plax, ef, 0.9, clip_seed);
                clip.wall_thickness_mm = Some(t);
                ("Is there left ventricular hypertrophy, and how severe is it?", LVH_OPTIONS, clip)
            }
            FindingCategory::PericardialEffusion => {
                let d = sample(&mut rng, EFFUSION_RANGES_CM[grade]);
                let ef = sample(&mut rng, EF_RANGES[0]);
                let sev = thresholds.grade_effusion(d);
                truth.true_ef_pct = Some(ef);
                truth.true_effusion_grade = Some(sev);
                truth.labels.insert("pericardial_effusion".into(), d > 0.0);
                truth.labels.insert("tamponade".into(), sev == Severity::Severe);
                let mut clip = traced_clip(format!("{study_id}-subcostal"), ViewLabel::Subcostal, ef, 0.9, clip_seed);
                clip.effusion_cm = Some(d);
                ("Is there a pericardial effusion, and how large is it?", EFFUSION_OPTIONS, clip)
            }
            FindingCategory::MitralValve => {
                let ef = sample(&mut rng, EF_RANGES[0]);
                truth.true_ef_pct = Some(ef);
                truth.labels.insert("mitral_regurgitation".into(), grade == 1 || grade == 3);
                truth.labels.insert("mitral_stenosis".into(), grade == 2 || grade == 3);
                let clip = traced_clip(format!("{study_id}-a4c"), ViewLabel::A4C, ef, 0.9, clip_seed);
                ("Which mitral valve abnormality is present?", MITRAL_OPTIONS, clip)
            }
        };
        let mut clip = clip;
        clip.ground_truth = Some(truth);
        let aux_quality = sample(&mut rng, (0.3, 0.6));
        let aux_ef = sample(&mut rng, EF_RANGES[0]);
        let mut aux = traced_clip(format!("{study_id}-aux"), ViewLabel::A2C, aux_ef, aux_quality, aux_seed);
        aux.ground_truth = None;
        let study = EchoStudy::new(study_id.clone(), vec![clip, aux]);
        let answer_key = AnswerKey::from_index(grade).expect("grade index in range");
        debug_assert_eq!(key_from_truth(&study, category, thresholds), Some(answer_key));
        questions.push(QuestionRecord {
            question_id: format!("q{i:04}"),
            study_ref: StudyRef::Path(study_path(&study_id)),
            query: ClinicianQuery::multiple_choice(text, options, None),
            answer_key,
            category,
        });
        studies.push(study);
    }
    Ok(SyntheticSet { questions, studies })
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn table_one_rounding() {
        // 316/622 = 0.508038...; Table 1 reports 50.8.
        let r = AccuracyReport::from_counts(316, 622);
        assert_eq!(r.accuracy_display(), "0.508");
        assert_eq!(r.percent_display(), "50.8");
        assert!((0.5075..=0.5085).contains(&r.accuracy));
        assert_eq!(AccuracyReport::from_counts(0, 7).accuracy_display(), "0.000");
        assert_eq!(AccuracyReport::from_counts(0, 0).percent_display(), "0.0");
    }

    #[test]
    fn rounding_is_half_up() {
        assert_eq!(rounded_half_up(1, 8, 1000), 125);
        assert_eq!(rounded_half_up(1, 2000, 1000), 1);
        assert_eq!(rounded_half_up(1, 2001, 1000), 0);
        assert_eq!(AccuracyReport::from_counts(1, 16).accuracy_display(), "0.063");
    }

    #[test]
    fn table_rows() {
        let t = render_table(&[("oracle".into(), AccuracyReport::from_counts(10, 10))]);
        assert_eq!(t, "oracle  100.0\n");
        let t = render_table(&[("prior".into(), AccuracyReport::from_counts(1, 4))]);
        assert_eq!(t, "prior  25.0\n");
        let both = render_table(&[
            ("oracle".into(), AccuracyReport::from_counts(1, 1)),
            ("prior".into(), AccuracyReport::from_counts(1, 4)),
        ]);
        assert_eq!(both, "oracle  100.0\nprior   25.0\n");
        assert!(render_markdown_table(&[("x".into(), AccuracyReport::from_counts(1, 2))]).contains("| x | 50.0 |"));
    }

    #[test]
    fn binomial_intervals() {
        // Reference: scipy.stats.binom(200, 0.25).ppf(0.005) = 35, .ppf(0.995) = 66
        assert_eq!(binomial_acceptance_region(200, 0.25, 0.99), (35, 66));
        // Reference: scipy.stats.binomtest(50, 200).proportion_ci(0.99, 'exact')
        let (lo, hi) = clopper_pearson(50, 200, 0.99);
        assert!((lo - 0.17543924688829843).abs() < 1e-9, "{lo}");
        assert!((hi - 0.33681386102937594).abs() < 1e-9, "{hi}");
        assert_eq!(clopper_pearson(0, 10, 0.95).0, 0.0);
        assert_eq!(clopper_pearson(10, 10, 0.95).1, 1.0);
    }

    #[test]
    fn question_parsing_reports_lines() {
        let study = serde_json::json!({"study_id": "s", "clips": []});
        let good = serde_json::json!({
            "question_id": "q1", "study_ref": study, "answer_key": "B", "category": "lv_systolic_function",
            "query": {"text": "EF?", "options": [
                {"key": "A", "text": "a"}, {"key": "B", "text": "b"}, {"key": "C", "text": "c"}, {"key": "D", "text": "d"}]}
        });
        let mut three = good.clone();
        three["query"]["options"].as_array_mut().unwrap().pop();
        three["question_id"] = "q2".into();
        let mut bad_key = good.clone();
        bad_key["answer_key"] = "E".into();
        let text = |lines: &[&serde_json::Value]| lines.iter().map(|l| l.to_string()).collect::<Vec<_>>().join("\n");
        assert_eq!(parse_questions(&text(&[&good])).unwrap().len(), 1);
        match parse_questions(&text(&[&good, &three])) {
            Err(QuestionSetError::Parse { line: 2, .. }) => {}
            other => panic!("{other:?}"),
        }
        match parse_questions(&text(&[&bad_key])) {
            Err(QuestionSetError::Parse { line: 1, .. }) => {}
            other => panic!("{other:?}"),
        }
        assert!(matches!(parse_questions(&text(&[&good, &good])), Err(QuestionSetError::Parse { line: 2, .. })));
        assert!(matches!(
            parse_questions(&format!("{}\n\n{}", good, three)),
            Err(QuestionSetError::Parse { line: 3, .. })
        ));
    }

    #[test]
    fn generator_is_balanced_and_sound() {
        let t = ClinicalThresholds::default();
        let set = generate_synthetic_qa(8, 1, &t).unwrap();
        let mut counts = BTreeMap::new();
        for (q, s) in set.questions.iter().zip(&set.studies) {
            *counts.entry(q.category).or_insert(0) += 1;
            assert_eq!(key_from_truth(s, q.category, &t), Some(q.answer_key), "{}", q.question_id);
            assert!(validate_study(s).is_ok());
            q.validate().unwrap();
        }
        assert!(counts.values().all(|c| *c == 2));
        assert_eq!(set, generate_synthetic_qa(8, 1, &t).unwrap());
        assert_ne!(set, generate_synthetic_qa(8, 2, &t).unwrap());
        assert!(generate_synthetic_qa(3, 1, &t).is_err());
    }

    #[test]
    fn ef_35_keys_moderately_reduced() {
        let t = ClinicalThresholds::default();
        let mut clip = traced_clip("c".into(), ViewLabel::A4C, 35.0, 0.9, 0);
        clip.ground_truth = Some(GroundTruth { true_ef_pct: Some(35.0), ..Default::default() });
        let key = key_from_truth(&EchoStudy::new("s", vec![clip]), FindingCategory::LvSystolicFunction, &t).unwrap();
        assert_eq!(EF_OPTIONS[key.index()], "Moderately reduced");
    }

    #[test]
    fn question_seed_ignores_order() {
        assert_eq!(question_seed(7, "q1"), question_seed(7, "q1"));
        assert_ne!(question_seed(7, "q1"), question_seed(7, "q2"));
        assert_ne!(question_seed(7, "q1"), question_seed(8, "q1"));
    }
}
