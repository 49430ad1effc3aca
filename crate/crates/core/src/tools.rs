//! Deterministic stand-ins for the echo tool suite.
//!
//! Each tool is a pure function of its arguments and the study it reads.
//! Clips carry per-frame LV area traces instead of pixels; measurements use
//! the single-plane volume proxy `v = a^{3/2}`, which `generate_clip`
//! inverts exactly.

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::collections::BTreeMap;
use std::sync::Arc;

use crate::canonical::Document;
use crate::domain::{ArtifactKind, ClipDescriptor, EchoStudy, FindingCategory, GroundTruth, ViewLabel};
use crate::grading::{severity_phrase, ClinicalThresholds};
use crate::protocol::{RawFailure, ToolDescriptor};
use crate::registry::{FnExecutor, RegistryError, ToolExecutor, ToolRegistry};

pub const VIEW_QUALITY_THRESHOLD: f64 = 0.2;
pub const EF_LOGISTIC_K: f64 = 0.3;
pub const LVH_LOGISTIC_K: f64 = 1.0;
pub const LVH_LOGISTIC_CENTER_MM: f64 = 11.5;

pub const VIEW_CLASSIFY: &str = "view_classify";
pub const VIEW_CLASSIFY_DECLARED: &str = "view_classify_declared";
pub const SEGMENT: &str = "segment";
pub const MEASURE: &str = "measure";
pub const MEASURE_BEST_CLIP: &str = "measure_best_clip";
pub const DISEASE_PREDICT: &str = "disease_predict";
pub const REPORT_GENERATE: &str = "report_generate";
pub const VIDEO_GENERATE: &str = "video_generate";

/// Argument name the agent loop fills with the study content fingerprint.
pub const STUDY_FP_ARG: &str = "study_fp";

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ViewPrediction {
    pub clip_id: String,
    pub view: ViewLabel,
    pub confidence: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SegmentationSummary {
    pub clip_id: String,
    pub per_frame_area_cm2: Vec<f64>,
    pub ed_frame: usize,
    pub es_frame: usize,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct MeasurementSet {
    pub clip_id: String,
    pub ef_pct: f64,
    pub edv_ml: f64,
    pub esv_ml: f64,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lvidd_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_thickness_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effusion_cm: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct DiseaseProbabilities {
    pub clip_id: String,
    pub disease_probs: BTreeMap<String, f64>,
    pub disease_flags: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ReportDocument {
    pub views: String,
    pub measurements: String,
    pub findings: String,
    pub impression: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VideoGenConfig {
    pub target_ef_pct: f64,
    #[serde(default = "default_a_ed")]
    pub a_ed_cm2: f64,
    #[serde(default = "default_frames")]
    pub frames: u32,
    #[serde(default = "default_cycles")]
    pub cycles: u32,
    #[serde(default = "default_quality")]
    pub quality: f64,
}

fn default_a_ed() -> f64 {
    20.0
}
fn default_frames() -> u32 {
    32
}
fn default_cycles() -> u32 {
    1
}
fn default_quality() -> f64 {
    0.9
}

impl VideoGenConfig {
    pub fn new(target_ef_pct: f64) -> Self {
        VideoGenConfig {
            target_ef_pct,
            a_ed_cm2: default_a_ed(),
            frames: default_frames(),
            cycles: default_cycles(),
            quality: default_quality(),
        }
    }

    pub fn validate(&self) -> Result<(), String> {
        if !(self.target_ef_pct > 0.0 && self.target_ef_pct < 100.0) {
            return Err(format!("target_ef_pct must be in (0,100), got {}", self.target_ef_pct));
        }
        if !(self.a_ed_cm2 > 0.0 && self.a_ed_cm2.is_finite()) {
            return Err("a_ed_cm2 must be positive".into());
        }
        if self.frames < 8 {
            return Err("frames must be at least 8".into());
        }
        if self.cycles < 1 {
            return Err("cycles must be at least 1".into());
        }
        // At least two samples per cycle, so end-systole is observable.
        if self.frames - 1 < 2 * self.cycles {
            return Err(format!("{} frames cannot sample {} cycles", self.frames, self.cycles));
        }
        if !(0.0..=1.0).contains(&self.quality) {
            return Err("quality must be in [0,1]".into());
        }
        Ok(())
    }

    /// End-systolic area that makes the volume proxy reproduce the target EF.
    pub fn a_es_cm2(&self) -> f64 {
        self.a_ed_cm2 * (1.0 - self.target_ef_pct / 100.0).powf(2.0 / 3.0)
    }
}

#[derive(Debug, Clone, PartialEq, thiserror::Error)]
pub enum MeasureError {
    #[error("degenerate trace: frame {frame} has non-positive area")]
    DegenerateTrace { frame: usize },
    #[error("empty trace")]
    EmptyTrace,
}

pub fn logistic(x: f64) -> f64 {
    1.0 / (1.0 + (-x).exp())
}

/// End-diastole at the largest area, end-systole at the smallest, ties to the
/// lowest frame index.
pub fn ed_es_frames(trace: &[f64]) -> (usize, usize) {
    let mut ed = 0;
    let mut es = 0;
    for (i, a) in trace.iter().enumerate() {
        if *a > trace[ed] {
            ed = i;
        }
        if *a < trace[es] {
            es = i;
        }
    }
    (ed, es)
}

/// EF, EDV and ESV from an area trace via `v = a^{3/2}`.
pub fn volumes_from_trace(trace: &[f64]) -> Result<(f64, f64, f64), MeasureError> {
    if trace.is_empty() {
        return Err(MeasureError::EmptyTrace);
    }
    if let Some(frame) = trace.iter().position(|a| a.is_nan() || *a <= 0.0) {
        return Err(MeasureError::DegenerateTrace { frame });
    }
    let (ed, es) = ed_es_frames(trace);
    let edv = trace[ed].powf(1.5);
    let esv = trace[es].powf(1.5);
    Ok((100.0 * (edv - esv) / edv, edv, esv))
}

fn find_clip<'a>(study: &'a EchoStudy, clip_id: &str) -> Result<&'a ClipDescriptor, RawFailure> {
    study.clip(clip_id).ok_or_else(|| RawFailure::MissingClip(clip_id.to_string()))
}

pub fn classify_view(study: &EchoStudy, clip_id: &str) -> Result<ViewPrediction, RawFailure> {
    let clip = find_clip(study, clip_id)?;
    if clip.quality < VIEW_QUALITY_THRESHOLD {
        return Err(RawFailure::Refusal(format!("quality {} below threshold {VIEW_QUALITY_THRESHOLD}", clip.quality)));
    }
    Ok(ViewPrediction { clip_id: clip.clip_id.clone(), view: clip.declared_view, confidence: clip.quality })
}

/// Fallback view reader: trusts the declared label whatever the quality.
pub fn declared_view(study: &EchoStudy, clip_id: &str) -> Result<ViewPrediction, RawFailure> {
    let clip = find_clip(study, clip_id)?;
    Ok(ViewPrediction { clip_id: clip.clip_id.clone(), view: clip.declared_view, confidence: clip.quality })
}

pub fn segment(study: &EchoStudy, clip_id: &str) -> Result<SegmentationSummary, RawFailure> {
    let clip = find_clip(study, clip_id)?;
    let (ed_frame, es_frame) = ed_es_frames(&clip.area_trace_cm2);
    Ok(SegmentationSummary {
        clip_id: clip.clip_id.clone(),
        per_frame_area_cm2: clip.area_trace_cm2.clone(),
        ed_frame,
        es_frame,
    })
}

pub fn measure_clip(clip: &ClipDescriptor) -> Result<MeasurementSet, MeasureError> {
    let (ef_pct, edv_ml, esv_ml) = volumes_from_trace(&clip.area_trace_cm2)?;
    Ok(MeasurementSet {
        clip_id: clip.clip_id.clone(),
        ef_pct,
        edv_ml,
        esv_ml,
        lvidd_mm: clip.lvidd_mm,
        wall_thickness_mm: clip.wall_thickness_mm,
        effusion_cm: clip.effusion_cm,
    })
}

pub fn measure(study: &EchoStudy, clip_id: &str) -> Result<MeasurementSet, RawFailure> {
    let clip = find_clip(study, clip_id)?;
    measure_clip(clip).map_err(|e| RawFailure::Refusal(e.to_string()))
}

/// Fallback measurement: the highest-quality clip with a usable trace.
pub fn measure_best_clip(study: &EchoStudy) -> Result<MeasurementSet, RawFailure> {
    let mut candidates: Vec<&ClipDescriptor> = study
        .clips
        .iter()
        .filter(|c| c.area_trace_cm2.iter().all(|a| *a > 0.0) && !c.area_trace_cm2.is_empty())
        .collect();
    candidates.sort_by(|a, b| b.quality.total_cmp(&a.quality));
    let clip = candidates.first().ok_or_else(|| RawFailure::MissingClip("<any usable clip>".into()))?;
    measure_clip(clip).map_err(|e| RawFailure::Refusal(e.to_string()))
}

/// Disease probabilities from the clip's own trace and fixture fields.
pub fn predict_disease(study: &EchoStudy, clip_id: &str) -> Result<DiseaseProbabilities, RawFailure> {
    let clip = find_clip(study, clip_id)?;
    let labels = clip.ground_truth.as_ref().map(|g| g.labels.clone()).unwrap_or_default();
    let mut probs = BTreeMap::new();
    if let Ok((ef, _, _)) = volumes_from_trace(&clip.area_trace_cm2) {
        probs.insert("lv_systolic_dysfunction".to_string(), logistic(EF_LOGISTIC_K * (50.0 - ef)));
    }
    match clip.wall_thickness_mm {
        Some(t) => {
            probs.insert("lvh".to_string(), logistic(LVH_LOGISTIC_K * (t - LVH_LOGISTIC_CENTER_MM)));
        }
        None => {
            if let Some(flag) = labels.get("lvh") {
                probs.insert("lvh".to_string(), if *flag { 1.0 } else { 0.0 });
            }
        }
    }
    match clip.effusion_cm {
        Some(d) => {
            probs.insert("pericardial_effusion".to_string(), if d > 0.0 { 1.0 } else { 0.0 });
        }
        None => {
            if let Some(flag) = labels.get("pericardial_effusion") {
                probs.insert("pericardial_effusion".to_string(), if *flag { 1.0 } else { 0.0 });
            }
        }
    }
    for (name, flag) in &labels {
        probs.entry(name.clone()).or_insert(if *flag { 1.0 } else { 0.0 });
    }
    if probs.is_empty() {
        return Err(RawFailure::Ambiguous(format!(
            "insufficient inputs: clip {clip_id} has no usable trace, measurements or labels"
        )));
    }
    let flags = probs.iter().map(|(k, p)| (k.clone(), *p >= 0.5)).collect();
    Ok(DiseaseProbabilities { clip_id: clip.clip_id.clone(), disease_probs: probs, disease_flags: flags })
}

fn fmt1(v: f64) -> String {
    format!("{v:.1}")
}

/// Fixed four-section report rendered from working findings.
pub fn generate_report(findings: &BTreeMap<String, Value>, thresholds: &ClinicalThresholds) -> ReportDocument {
    const NOT_ASSESSED: &str = "not assessed";
    let num = |k: &str| findings.get(k).and_then(Value::as_f64);

    let views = match findings.get("view").and_then(Value::as_str) {
        Some(v) => format!("{v} view"),
        None => NOT_ASSESSED.to_string(),
    };

    let mut measurements = Vec::new();
    for (key, label, unit) in [
        ("ef_pct", "EF", "%"),
        ("edv_ml", "EDV", " ml"),
        ("esv_ml", "ESV", " ml"),
        ("lvidd_mm", "LVIDd", " mm"),
        ("wall_thickness_mm", "wall thickness", " mm"),
        ("effusion_cm", "effusion depth", " cm"),
    ] {
        if let Some(v) = num(key) {
            measurements.push(format!("{label} {}{unit}", fmt1(v)));
        }
    }

    let mut graded = Vec::new();
    if let Some(ef) = num("ef_pct") {
        let sev = thresholds.grade_ef(ef);
        graded.push((
            format!("LV systolic function {}", severity_phrase(FindingCategory::LvSystolicFunction, sev)),
            format!(
                "{} left ventricular systolic function",
                capitalize(severity_phrase(FindingCategory::LvSystolicFunction, sev))
            ),
        ));
    }
    if let Some(t) = num("wall_thickness_mm") {
        let sev = thresholds.grade_lvh(t);
        let phrase = severity_phrase(FindingCategory::LvHypertrophy, sev);
        graded.push((
            format!("LV hypertrophy {phrase}"),
            if phrase == "none" {
                "No left ventricular hypertrophy".to_string()
            } else {
                format!("{} left ventricular hypertrophy", capitalize(phrase))
            },
        ));
    }
    if let Some(d) = num("effusion_cm") {
        let sev = thresholds.grade_effusion(d);
        let phrase = severity_phrase(FindingCategory::PericardialEffusion, sev);
        graded.push((
            format!("pericardial effusion {phrase}"),
            if phrase == "none" {
                "No pericardial effusion".to_string()
            } else {
                format!("{} pericardial effusion", capitalize(phrase))
            },
        ));
    }
    let mut finding_lines: Vec<String> = graded.iter().map(|(f, _)| f.clone()).collect();
    if let Some(flags) = findings.get("disease_flags").and_then(Value::as_object) {
        let positive: Vec<&str> =
            flags.iter().filter(|(_, v)| v.as_bool() == Some(true)).map(|(k, _)| k.as_str()).collect();
        if !positive.is_empty() {
            finding_lines.push(format!("model flags: {}", positive.join(", ")));
        } else if !flags.is_empty() {
            finding_lines.push("model flags: none raised".to_string());
        }
    }

    let or_na = |parts: Vec<String>, sep: &str| {
        if parts.is_empty() {
            NOT_ASSESSED.to_string()
        } else {
            parts.join(sep)
        }
    };
    ReportDocument {
        views,
        measurements: or_na(measurements, ", "),
        findings: or_na(finding_lines, "; "),
        impression: or_na(graded.into_iter().map(|(_, i)| format!("{i}.")).collect(), " "),
    }
}

fn capitalize(s: &str) -> String {
    let mut c = s.chars();
    match c.next() {
        Some(f) => f.to_uppercase().collect::<String>() + c.as_str(),
        None => String::new(),
    }
}

/// Synthesizes a clip whose measured EF reproduces the configured target.
///
/// The area trace is a raised cosine starting at end-diastole, rescaled so
/// that its sampled extremes are exactly `a_ed` and `a_es`. Below quality 1
/// each frame gets a seeded multiplicative jitter of at most
/// `±1% × (1 − quality)`.
pub fn generate_clip(config: &VideoGenConfig, seed: u64) -> Result<ClipDescriptor, String> {
    config.validate()?;
    let frames = config.frames as usize;
    let a_ed = config.a_ed_cm2;
    let a_es = config.a_es_cm2();
    let span = (frames - 1) as f64;
    let raw: Vec<f64> = (0..frames)
        .map(|t| {
            let phase = 2.0 * std::f64::consts::PI * config.cycles as f64 * t as f64 / span;
            (1.0 + phase.cos()) / 2.0
        })
        .collect();
    let lo = raw.iter().copied().fold(f64::INFINITY, f64::min);
    let hi = raw.iter().copied().fold(f64::NEG_INFINITY, f64::max);
    let mut trace: Vec<f64> = raw.iter().map(|w| a_es + (a_ed - a_es) * (w - lo) / (hi - lo)).collect();
    if config.quality < 1.0 {
        let amplitude = 0.01 * (1.0 - config.quality);
        let mut rng = ChaCha8Rng::seed_from_u64(seed);
        for a in &mut trace {
            let u: f64 = rng.random_range(-1.0..=1.0);
            *a *= 1.0 + amplitude * u;
        }
    }
    Ok(ClipDescriptor {
        clip_id: format!("synthetic-{seed}"),
        declared_view: ViewLabel::A4C,
        quality: config.quality,
        frame_count: config.frames,
        area_trace_cm2: trace,
        wall_thickness_mm: None,
        lvidd_mm: None,
        effusion_cm: None,
        ground_truth: Some(GroundTruth { true_ef_pct: Some(config.target_ef_pct), ..Default::default() }),
    })
}

fn clip_args_schema() -> Document {
    json!({
        "type": "document",
        "properties": {
            "clip_id": {"type": "string", "description": "clip to analyse"},
            STUDY_FP_ARG: {"type": "optional", "of": {"type": "string"}}
        },
        "required": ["clip_id"]
    })
}

fn num() -> Value {
    json!({"type": "number"})
}

fn opt_num() -> Value {
    json!({"type": "optional", "of": {"type": "number"}})
}

fn view_enum() -> Value {
    json!({"type": "enum", "values": ViewLabel::ALL.iter().map(|v| v.as_str()).collect::<Vec<_>>()})
}

fn descriptor(
    name: &str,
    description: &str,
    input_schema: Value,
    output_schema: Value,
    tags: &[&str],
    findings: &[&str],
    artifact: Option<ArtifactKind>,
) -> ToolDescriptor {
    ToolDescriptor {
        name: name.to_string(),
        version: semver::Version::new(1, 0, 0),
        description: description.to_string(),
        input_schema,
        output_schema,
        tags: tags.iter().map(|s| s.to_string()).collect(),
        cacheable: true,
        findings: findings.iter().map(|s| s.to_string()).collect(),
        artifact,
    }
}

pub fn view_prediction_schema() -> Value {
    json!({"type": "document", "properties": {
        "clip_id": {"type": "string"}, "view": view_enum(), "confidence": num()
    }, "required": ["clip_id", "view", "confidence"]})
}

pub fn measurement_schema() -> Value {
    json!({"type": "document", "properties": {
        "clip_id": {"type": "string"}, "ef_pct": num(), "edv_ml": num(), "esv_ml": num(),
        "lvidd_mm": opt_num(), "wall_thickness_mm": opt_num(), "effusion_cm": opt_num()
    }, "required": ["clip_id", "ef_pct", "edv_ml", "esv_ml"]})
}

/// Descriptors for every mock tool, including fallback alternates.
pub fn mock_descriptors() -> Vec<ToolDescriptor> {
    vec![
        descriptor(
            VIEW_CLASSIFY,
            "Identify the standard echocardiographic view (A4C, A2C, PLAX, ...) of a clip. Refuses clips whose quality is below 0.2.",
            clip_args_schema(),
            view_prediction_schema(),
            &["view", "perception"],
            &["view"],
            None,
        ),
        descriptor(
            VIEW_CLASSIFY_DECLARED,
            "Fallback view reader that returns the clip's declared view regardless of image quality.",
            clip_args_schema(),
            view_prediction_schema(),
            &["view", "fallback"],
            &["view"],
            None,
        ),
        descriptor(
            SEGMENT,
            "Delineate the left ventricle in every frame; returns per-frame areas and the end-diastolic and end-systolic frame indices.",
            clip_args_schema(),
            json!({"type": "document", "properties": {
                "clip_id": {"type": "string"},
                "per_frame_area_cm2": {"type": "list", "items": num()},
                "ed_frame": {"type": "integer"}, "es_frame": {"type": "integer"}
            }, "required": ["clip_id", "per_frame_area_cm2", "ed_frame", "es_frame"]}),
            &["segmentation", "perception"],
            &["ed_frame", "es_frame"],
            Some(ArtifactKind::MaskSummary),
        ),
        descriptor(
            MEASURE,
            "Estimate ejection fraction, end-diastolic and end-systolic volumes, and chamber dimensions (LVIDd, wall thickness, effusion depth) for a clip.",
            clip_args_schema(),
            measurement_schema(),
            &["measurement"],
            &["ef_pct", "edv_ml", "esv_ml", "lvidd_mm", "wall_thickness_mm", "effusion_cm"],
            Some(ArtifactKind::MeasurementSet),
        ),
        descriptor(
            MEASURE_BEST_CLIP,
            "Fallback measurement on the highest-quality clip with a usable trace.",
            clip_args_schema(),
            measurement_schema(),
            &["measurement", "fallback"],
            &["ef_pct", "edv_ml", "esv_ml", "lvidd_mm", "wall_thickness_mm", "effusion_cm"],
            Some(ArtifactKind::MeasurementSet),
        ),
        descriptor(
            DISEASE_PREDICT,
            "Predict probabilities of clinical abnormalities (LV systolic dysfunction, LVH, pericardial effusion, tamponade, valve disease) from a clip; flags are raised at probability 0.5.",
            clip_args_schema(),
            json!({"type": "document", "properties": {
                "clip_id": {"type": "string"},
                "disease_probs": {"type": "document", "values": num()},
                "disease_flags": {"type": "document", "values": {"type": "boolean"}}
            }, "required": ["clip_id", "disease_probs", "disease_flags"]}),
            &["disease", "diagnosis"],
            &["disease_probs", "disease_flags"],
            Some(ArtifactKind::DiseaseProbs),
        ),
        descriptor(
            REPORT_GENERATE,
            "Write a structured echo report (views, measurements, findings, impression) from the findings gathered so far.",
            json!({"type": "document", "properties": {
                "findings": {"type": "document", "values": {"type": "any"}},
                STUDY_FP_ARG: {"type": "optional", "of": {"type": "string"}}
            }, "required": ["findings"]}),
            json!({"type": "document", "properties": {
                "views": {"type": "string"}, "measurements": {"type": "string"},
                "findings": {"type": "string"}, "impression": {"type": "string"}
            }, "required": ["views", "measurements", "findings", "impression"]}),
            &["report"],
            &[],
            Some(ArtifactKind::Report),
        ),
        descriptor(
            VIDEO_GENERATE,
            "Generate a synthetic cine-loop descriptor with a requested ejection fraction.",
            json!({"type": "document", "properties": {
                "target_ef_pct": num(), "a_ed_cm2": opt_num(),
                "frames": {"type": "optional", "of": {"type": "integer"}},
                "cycles": {"type": "optional", "of": {"type": "integer"}},
                "quality": opt_num(),
                "seed": {"type": "optional", "of": {"type": "integer"}}
            }, "required": ["target_ef_pct"]}),
            json!({"type": "document", "properties": {
                "clip_id": {"type": "string"}, "declared_view": view_enum(), "quality": num(),
                "frame_count": {"type": "integer"}, "area_trace_cm2": {"type": "list", "items": num()}
            }, "required": ["clip_id", "declared_view", "quality", "frame_count", "area_trace_cm2"]}),
            &["generative"],
            &[],
            Some(ArtifactKind::SyntheticClip),
        ),
    ]
}

fn clip_arg(args: &Value) -> Result<&str, RawFailure> {
    args.get("clip_id").and_then(Value::as_str).ok_or_else(|| RawFailure::Ambiguous("clip_id missing".into()))
}

fn to_doc<T: Serialize>(value: T) -> Result<Value, RawFailure> {
    crate::canonical::to_document(&value).map_err(|e| RawFailure::Crash(e.to_string()))
}

/// Runs a mock tool by name. Used by both in-process executors and the
/// out-of-process tool server.
pub fn run_mock_tool(
    name: &str,
    args: &Value,
    study: &EchoStudy,
    thresholds: &ClinicalThresholds,
) -> Result<Value, RawFailure> {
    match name {
        VIEW_CLASSIFY => to_doc(classify_view(study, clip_arg(args)?)?),
        VIEW_CLASSIFY_DECLARED => to_doc(declared_view(study, clip_arg(args)?)?),
        SEGMENT => to_doc(segment(study, clip_arg(args)?)?),
        MEASURE => to_doc(measure(study, clip_arg(args)?)?),
        MEASURE_BEST_CLIP => to_doc(measure_best_clip(study)?),
        DISEASE_PREDICT => to_doc(predict_disease(study, clip_arg(args)?)?),
        REPORT_GENERATE => {
            let findings: BTreeMap<String, Value> = args
                .get("findings")
                .and_then(Value::as_object)
                .map(|m| m.iter().map(|(k, v)| (k.clone(), v.clone())).collect())
                .unwrap_or_default();
            to_doc(generate_report(&findings, thresholds))
        }
        VIDEO_GENERATE => {
            let mut config = VideoGenConfig::new(args.get("target_ef_pct").and_then(Value::as_f64).unwrap_or(f64::NAN));
            if let Some(v) = args.get("a_ed_cm2").and_then(Value::as_f64) {
                config.a_ed_cm2 = v;
            }
            if let Some(v) = args.get("frames").and_then(Value::as_u64) {
                config.frames = v as u32;
            }
            if let Some(v) = args.get("cycles").and_then(Value::as_u64) {
                config.cycles = v as u32;
            }
            if let Some(v) = args.get("quality").and_then(Value::as_f64) {
                config.quality = v;
            }
            let seed = args.get("seed").and_then(Value::as_u64).unwrap_or(0);
            let mut clip = generate_clip(&config, seed).map_err(RawFailure::Ambiguous)?;
            // Generated truth stays out of anything a controller can read.
            clip.ground_truth = None;
            to_doc(clip)
        }
        other => Err(RawFailure::Crash(format!("no mock implementation for {other}"))),
    }
}

/// Registers the full mock suite with its fallback chains.
pub fn register_mock_suite(registry: &ToolRegistry, thresholds: ClinicalThresholds) -> Result<(), RegistryError> {
    for d in mock_descriptors() {
        let name = d.name.clone();
        let executor: Arc<dyn ToolExecutor> =
            Arc::new(FnExecutor(move |args: &Value, study: &EchoStudy| run_mock_tool(&name, args, study, &thresholds)));
        registry.register(d, executor)?;
    }
    registry.set_fallback(VIEW_CLASSIFY, vec![VIEW_CLASSIFY_DECLARED.to_string()])?;
    registry.set_fallback(MEASURE, vec![MEASURE_BEST_CLIP.to_string()])?;
    Ok(())
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::domain::ClipDescriptor;

    fn study_with(clips: Vec<ClipDescriptor>) -> EchoStudy {
        EchoStudy::new("s", clips)
    }

    fn clip(id: &str, view: ViewLabel, quality: f64, trace: Vec<f64>) -> ClipDescriptor {
        ClipDescriptor::with_trace(id, view, quality, trace)
    }

    #[test]
    fn view_classification_rules() {
        let s = study_with(vec![clip("a", ViewLabel::A4C, 0.9, vec![1.0]), clip("p", ViewLabel::Plax, 0.1, vec![1.0])]);
        let v = classify_view(&s, "a").unwrap();
        assert_eq!((v.view, v.confidence), (ViewLabel::A4C, 0.9));
        assert!(matches!(classify_view(&s, "p"), Err(RawFailure::Refusal(_))));
        assert!(matches!(classify_view(&s, "zz"), Err(RawFailure::MissingClip(_))));
        assert_eq!(declared_view(&s, "p").unwrap().view, ViewLabel::Plax);
    }

    #[test]
    fn segmentation_tie_rules() {
        let s = study_with(vec![
            clip("a", ViewLabel::A4C, 0.9, vec![10.0, 14.0, 8.0]),
            clip("b", ViewLabel::A4C, 0.9, vec![5.0, 5.0]),
            clip("c", ViewLabel::A4C, 0.9, vec![3.0]),
        ]);
        let frames = |id| {
            let r = segment(&s, id).unwrap();
            (r.ed_frame, r.es_frame)
        };
        assert_eq!(frames("a"), (1, 2));
        assert_eq!(frames("b"), (0, 0));
        assert_eq!(frames("c"), (0, 0));
        assert_eq!(segment(&s, "a").unwrap().per_frame_area_cm2, vec![10.0, 14.0, 8.0]);
    }

    #[test]
    fn measurement_formula() {
        assert_eq!(volumes_from_trace(&[5.0, 5.0, 5.0]).unwrap().0, 0.0);
        let (ef, edv, esv) = volumes_from_trace(&[4.0, 1.0, 2.0]).unwrap();
        assert_eq!((ef, edv, esv), (87.5, 8.0, 1.0));
        // Reference: python3 -c "v=[a**1.5 for a in [10,14,8]]; print(100*(max(v)-min(v))/max(v))"
        let (ef, _, _) = volumes_from_trace(&[10.0, 14.0, 8.0]).unwrap();
        assert!((ef - 56.804060227516885).abs() < 1e-12);
        assert_eq!(volumes_from_trace(&[3.0, 0.0]), Err(MeasureError::DegenerateTrace { frame: 1 }));
    }

    #[test]
    fn measure_passes_fixture_fields_through() {
        let mut c = clip("a", ViewLabel::Plax, 0.9, vec![10.0, 12.0]);
        c.wall_thickness_mm = Some(13.0);
        c.effusion_cm = Some(0.4);
        let m = measure(&study_with(vec![c]), "a").unwrap();
        assert_eq!(m.wall_thickness_mm, Some(13.0));
        assert_eq!(m.effusion_cm, Some(0.4));
        assert_eq!(m.lvidd_mm, None);
        assert!(m.esv_ml <= m.edv_ml);
    }

    #[test]
    fn measure_best_clip_prefers_quality() {
        let s = study_with(vec![
            clip("low", ViewLabel::A4C, 0.3, vec![10.0, 5.0]),
            clip("zero", ViewLabel::A4C, 0.99, vec![10.0, 0.0]),
            clip("high", ViewLabel::A2C, 0.8, vec![10.0, 8.0]),
        ]);
        assert_eq!(measure_best_clip(&s).unwrap().clip_id, "high");
        assert!(matches!(measure_best_clip(&study_with(vec![])), Err(RawFailure::MissingClip(_))));
    }

    fn disease_probs_for(ef_target: f64) -> f64 {
        let clip = generate_clip(&VideoGenConfig { quality: 1.0, ..VideoGenConfig::new(ef_target) }, 0).unwrap();
        let id = clip.clip_id.clone();
        predict_disease(&study_with(vec![clip]), &id).unwrap().disease_probs["lv_systolic_dysfunction"]
    }

    #[test]
    fn disease_probabilities() {
        assert!((disease_probs_for(50.0) - 0.5).abs() < 1e-9);
        // Reference: python3 -c "import math; print(1/(1+math.exp(-6)))"
        assert!((disease_probs_for(30.0) - 0.9975273768433653).abs() < 1e-9);
        let mut c = clip("e", ViewLabel::Subcostal, 0.9, vec![10.0, 8.0]);
        c.effusion_cm = Some(0.0);
        let d = predict_disease(&study_with(vec![c]), "e").unwrap();
        assert_eq!(d.disease_probs["pericardial_effusion"], 0.0);
        assert!(!d.disease_flags["pericardial_effusion"]);
    }

    #[test]
    fn disease_falls_back_to_labels_and_reports_insufficient_inputs() {
        let mut c = clip("x", ViewLabel::Plax, 0.9, vec![0.0]);
        c.ground_truth = Some(GroundTruth {
            labels: [("lvh".to_string(), true), ("tamponade".to_string(), false)].into_iter().collect(),
            ..Default::default()
        });
        let d = predict_disease(&study_with(vec![c]), "x").unwrap();
        assert!(d.disease_flags["lvh"]);
        assert!(!d.disease_flags["tamponade"]);
        assert!(!d.disease_probs.contains_key("lv_systolic_dysfunction"));
        let bare = clip("y", ViewLabel::Plax, 0.9, vec![0.0]);
        assert!(matches!(predict_disease(&study_with(vec![bare]), "y"), Err(RawFailure::Ambiguous(_))));
    }

    #[test]
    fn lvh_probability_is_monotone_in_thickness() {
        let probs: Vec<f64> = (60..220)
            .map(|t| {
                let mut c = clip("x", ViewLabel::Plax, 0.9, vec![10.0, 8.0]);
                c.wall_thickness_mm = Some(t as f64 / 10.0);
                predict_disease(&study_with(vec![c]), "x").unwrap().disease_probs["lvh"]
            })
            .collect();
        assert!(probs.windows(2).all(|w| w[0] <= w[1]));
    }

    #[test]
    fn report_rendering() {
        let t = ClinicalThresholds::default();
        let empty = generate_report(&BTreeMap::new(), &t);
        for section in [&empty.views, &empty.measurements, &empty.findings, &empty.impression] {
            assert_eq!(section, "not assessed");
        }
        let findings: BTreeMap<String, Value> = [("ef_pct".to_string(), json!(35))].into_iter().collect();
        let r = generate_report(&findings, &t);
        assert!(r.impression.contains("Moderately reduced"));
        assert!(r.impression.to_lowercase().contains("moderately reduced"));
        assert_eq!(r.measurements, "EF 35.0%");
        assert_eq!(r, generate_report(&findings, &t));
    }

    #[test]
    fn generated_clip_inverts_measurement() {
        let config = VideoGenConfig { quality: 1.0, ..VideoGenConfig::new(50.0) };
        // Reference: python3 -c "print(20*0.5**(2/3))"
        assert!((config.a_es_cm2() - 12.599210498948732).abs() < 1e-12);
        let clip = generate_clip(&config, 7).unwrap();
        assert_eq!(clip.area_trace_cm2[0], 20.0);
        let min = clip.area_trace_cm2.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((min - 12.599210498948732).abs() < 1e-12);
        let m = measure_clip(&clip).unwrap();
        assert!((m.ef_pct - 50.0).abs() < 1e-9);
    }

    #[test]
    fn generated_clip_defaults_within_half_point() {
        let clip = generate_clip(&VideoGenConfig::new(50.0), 3).unwrap();
        assert!((measure_clip(&clip).unwrap().ef_pct - 50.0).abs() <= 0.5);
    }

    #[test]
    fn near_zero_target_gives_flat_trace() {
        let config = VideoGenConfig { quality: 1.0, ..VideoGenConfig::new(1e-9) };
        let clip = generate_clip(&config, 0).unwrap();
        let min = clip.area_trace_cm2.iter().copied().fold(f64::INFINITY, f64::min);
        assert!((20.0 - min) < 1e-9);
    }

    #[test]
    fn perfect_quality_ignores_seed() {
        let config = VideoGenConfig { quality: 1.0, ..VideoGenConfig::new(40.0) };
        assert_eq!(
            generate_clip(&config, 1).unwrap().area_trace_cm2,
            generate_clip(&config, 99).unwrap().area_trace_cm2
        );
        let noisy = VideoGenConfig::new(40.0);
        assert_ne!(generate_clip(&noisy, 1).unwrap().area_trace_cm2, generate_clip(&noisy, 99).unwrap().area_trace_cm2);
        assert_eq!(generate_clip(&noisy, 5).unwrap(), generate_clip(&noisy, 5).unwrap());
    }

    #[test]
    fn video_config_validation() {
        assert!(VideoGenConfig::new(0.0).validate().is_err());
        assert!(VideoGenConfig::new(100.0).validate().is_err());
        assert!(VideoGenConfig { frames: 7, ..VideoGenConfig::new(50.0) }.validate().is_err());
        assert!(VideoGenConfig { frames: 8, cycles: 4, ..VideoGenConfig::new(50.0) }.validate().is_err());
        assert!(VideoGenConfig { frames: 9, cycles: 4, ..VideoGenConfig::new(50.0) }.validate().is_ok());
    }

    #[test]
    fn multi_cycle_clips_still_invert() {
        for (frames, cycles) in [(8, 1), (9, 4), (33, 2), (40, 3)] {
            let config = VideoGenConfig { frames, cycles, quality: 1.0, ..VideoGenConfig::new(35.0) };
            let clip = generate_clip(&config, 0).unwrap();
            assert!((measure_clip(&clip).unwrap().ef_pct - 35.0).abs() < 1e-9, "{frames}/{cycles}");
        }
    }

    #[test]
    fn suite_registers_with_fallbacks() {
        let reg = ToolRegistry::new();
        register_mock_suite(&reg, ClinicalThresholds::default()).unwrap();
        assert_eq!(reg.list_tools(None).len(), 8);
        assert_eq!(reg.fallback_chain(VIEW_CLASSIFY), vec![VIEW_CLASSIFY_DECLARED]);
        let tagged: Vec<String> = reg.list_tools(Some("measurement")).into_iter().map(|d| d.name).collect();
        assert_eq!(tagged, vec![MEASURE, MEASURE_BEST_CLIP]);
    }

    #[test]
    fn video_tool_strips_ground_truth() {
        let out = run_mock_tool(
            VIDEO_GENERATE,
            &json!({"target_ef_pct": 40}),
            &study_with(vec![]),
            &ClinicalThresholds::default(),
        )
        .unwrap();
        assert!(out.get("ground_truth").is_none());
        assert_eq!(out["frame_count"], json!(32));
    }
}
