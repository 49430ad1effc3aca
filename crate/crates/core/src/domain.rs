//! Shared value types: studies, clips, queries, session events and artifacts.

use serde::{Deserialize, Deserializer, Serialize, Serializer};
use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::path::Path;
use std::str::FromStr;

use crate::canonical::{self, CanonicalError, Document};

/// Standard echo view labels. Anything unrecognised deserializes to `Other`.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum ViewLabel {
    A4C,
    A2C,
    Plax,
    Psax,
    Subcostal,
    Other,
}

impl ViewLabel {
    pub const ALL: [ViewLabel; 6] =
        [ViewLabel::A4C, ViewLabel::A2C, ViewLabel::Plax, ViewLabel::Psax, ViewLabel::Subcostal, ViewLabel::Other];

    pub fn as_str(self) -> &'static str {
        match self {
            ViewLabel::A4C => "A4C",
            ViewLabel::A2C => "A2C",
            ViewLabel::Plax => "PLAX",
            ViewLabel::Psax => "PSAX",
            ViewLabel::Subcostal => "SUBCOSTAL",
            ViewLabel::Other => "OTHER",
        }
    }

    /// Lenient parse: unknown labels map to `Other`.
    pub fn parse_lenient(s: &str) -> ViewLabel {
        match s.trim().to_ascii_uppercase().as_str() {
            "A4C" => ViewLabel::A4C,
            "A2C" => ViewLabel::A2C,
            "PLAX" => ViewLabel::Plax,
            "PSAX" => ViewLabel::Psax,
            "SUBCOSTAL" => ViewLabel::Subcostal,
            _ => ViewLabel::Other,
        }
    }
}

impl fmt::Display for ViewLabel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for ViewLabel {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ViewLabel {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Ok(ViewLabel::parse_lenient(&s))
    }
}

/// Ordinal severity shared by every graded finding.
///
/// Category-specific wording lives in [`Severity::label`]; for effusion the
/// four steps read none/small/moderate/large.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Severity {
    Normal,
    Mild,
    Moderate,
    Severe,
}

impl Severity {
    pub const ALL: [Severity; 4] = [Severity::Normal, Severity::Mild, Severity::Moderate, Severity::Severe];

    pub fn rank(self) -> usize {
        self as usize
    }

    pub fn from_rank(rank: usize) -> Option<Severity> {
        Severity::ALL.get(rank).copied()
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FindingCategory {
    LvSystolicFunction,
    LvHypertrophy,
    PericardialEffusion,
    MitralValve,
}

impl FindingCategory {
    pub const ALL: [FindingCategory; 4] = [
        FindingCategory::LvSystolicFunction,
        FindingCategory::LvHypertrophy,
        FindingCategory::PericardialEffusion,
        FindingCategory::MitralValve,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            FindingCategory::LvSystolicFunction => "lv_systolic_function",
            FindingCategory::LvHypertrophy => "lv_hypertrophy",
            FindingCategory::PericardialEffusion => "pericardial_effusion",
            FindingCategory::MitralValve => "mitral_valve",
        }
    }
}

impl fmt::Display for FindingCategory {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Fixture-only truth used for scoring. Never rendered to a controller.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GroundTruth {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_ef_pct: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_lvh_grade: Option<Severity>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub true_effusion_grade: Option<Severity>,
    #[serde(default, skip_serializing_if = "BTreeMap::is_empty")]
    pub labels: BTreeMap<String, bool>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClipDescriptor {
    pub clip_id: String,
    pub declared_view: ViewLabel,
    pub quality: f64,
    pub frame_count: u32,
    pub area_trace_cm2: Vec<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub wall_thickness_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub lvidd_mm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub effusion_cm: Option<f64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ground_truth: Option<GroundTruth>,
}

impl ClipDescriptor {
    /// A clip with only a view, quality and area trace.
    pub fn with_trace(clip_id: impl Into<String>, view: ViewLabel, quality: f64, trace: Vec<f64>) -> Self {
        ClipDescriptor {
            clip_id: clip_id.into(),
            declared_view: view,
            quality,
            frame_count: trace.len() as u32,
            area_trace_cm2: trace,
            wall_thickness_mm: None,
            lvidd_mm: None,
            effusion_cm: None,
            ground_truth: None,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EchoStudy {
    pub study_id: String,
    #[serde(default)]
    pub clips: Vec<ClipDescriptor>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub patient_context: Option<String>,
}

impl EchoStudy {
    pub fn new(study_id: impl Into<String>, clips: Vec<ClipDescriptor>) -> Self {
        EchoStudy { study_id: study_id.into(), clips, patient_context: None }
    }

    pub fn clip(&self, clip_id: &str) -> Option<&ClipDescriptor> {
        self.clips.iter().find(|c| c.clip_id == clip_id)
    }

    /// Digest of the full study, ground truth included. Tools that read clip
    /// data get this folded into their arguments so cache keys track content.
    pub fn content_fingerprint(&self) -> String {
        let bytes = canonical::to_canonical(self).unwrap_or_default();
        canonical::fingerprint(&bytes)
    }

    pub fn to_canonical_string(&self) -> Result<String, CanonicalError> {
        canonical::to_document(self).and_then(|d| canonical::canonical_string(&d))
    }

    pub fn from_json(text: &str) -> Result<EchoStudy, serde_json::Error> {
        serde_json::from_str(text)
    }
}

/// Error reading or writing a `.study.json` fixture.
#[derive(Debug, thiserror::Error)]
pub enum StudyFileError {
    #[error("{path}: {source}")]
    Io { path: String, source: std::io::Error },
    #[error("{path}: parse error: {source}")]
    Parse { path: String, source: serde_json::Error },
    #[error("{path}: {source}")]
    Canonical { path: String, source: CanonicalError },
}

pub fn read_study_file(path: &Path) -> Result<EchoStudy, StudyFileError> {
    let p = path.display().to_string();
    let text = std::fs::read_to_string(path).map_err(|source| StudyFileError::Io { path: p.clone(), source })?;
    EchoStudy::from_json(&text).map_err(|source| StudyFileError::Parse { path: p, source })
}

pub fn write_study_file(path: &Path, study: &EchoStudy) -> Result<(), StudyFileError> {
    let p = path.display().to_string();
    let text = study.to_canonical_string().map_err(|source| StudyFileError::Canonical { path: p.clone(), source })?;
    std::fs::write(path, text + "\n").map_err(|source| StudyFileError::Io { path: p, source })
}

/// One invariant violation, naming the offending location.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Serialize, Deserialize)]
pub struct Violation {
    pub path: String,
    pub message: String,
}

impl Violation {
    pub fn new(path: impl Into<String>, message: impl Into<String>) -> Self {
        Violation { path: path.into(), message: message.into() }
    }
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.path, self.message)
    }
}

/// Checks every study invariant and reports all violations found.
pub fn validate_study(study: &EchoStudy) -> Result<(), Vec<Violation>> {
    let mut out = Vec::new();
    if study.study_id.trim().is_empty() {
        out.push(Violation::new("study_id", "study_id must be non-empty"));
    }
    let mut seen = BTreeSet::new();
    for (i, clip) in study.clips.iter().enumerate() {
        let at = |field: &str| format!("clips[{i}]({}).{field}", clip.clip_id);
        if clip.clip_id.trim().is_empty() {
            out.push(Violation::new(format!("clips[{i}].clip_id"), "clip_id must be non-empty"));
        }
        if !seen.insert(clip.clip_id.as_str()) {
            out.push(Violation::new(at("clip_id"), "duplicate clip id"));
        }
        if !(0.0..=1.0).contains(&clip.quality) {
            out.push(Violation::new(at("quality"), "quality must be in [0,1]"));
        }
        if clip.frame_count < 1 {
            out.push(Violation::new(at("frame_count"), "frame_count must be at least 1"));
        }
        if clip.area_trace_cm2.len() != clip.frame_count as usize {
            out.push(Violation::new(
                at("area_trace_cm2"),
                format!(
                    "area_trace length mismatch: {} values for frame_count {}",
                    clip.area_trace_cm2.len(),
                    clip.frame_count
                ),
            ));
        }
        if let Some(j) = clip.area_trace_cm2.iter().position(|a| !a.is_finite() || *a < 0.0) {
            out.push(Violation::new(format!("{}[{j}]", at("area_trace_cm2")), "areas must be finite and >= 0"));
        }
        for (name, v) in [
            ("wall_thickness_mm", clip.wall_thickness_mm),
            ("lvidd_mm", clip.lvidd_mm),
            ("effusion_cm", clip.effusion_cm),
        ] {
            if let Some(v) = v {
                if !v.is_finite() || v < 0.0 {
                    out.push(Violation::new(at(name), format!("{name} must be finite and >= 0")));
                }
            }
        }
        if let Some(ef) = clip.ground_truth.as_ref().and_then(|g| g.true_ef_pct) {
            if !(0.0..=100.0).contains(&ef) {
                out.push(Violation::new(at("ground_truth.true_ef_pct"), "true_ef_pct must be in [0,100]"));
            }
        }
    }
    if out.is_empty() {
        Ok(())
    } else {
        Err(out)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum AnswerKey {
    A,
    B,
    C,
    D,
}

impl AnswerKey {
    pub const ALL: [AnswerKey; 4] = [AnswerKey::A, AnswerKey::B, AnswerKey::C, AnswerKey::D];

    pub fn index(self) -> usize {
        self as usize
    }

    pub fn from_index(i: usize) -> Option<AnswerKey> {
        AnswerKey::ALL.get(i).copied()
    }

    pub fn as_str(self) -> &'static str {
        ["A", "B", "C", "D"][self.index()]
    }
}

impl fmt::Display for AnswerKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for AnswerKey {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim() {
            "A" | "a" => Ok(AnswerKey::A),
            "B" | "b" => Ok(AnswerKey::B),
            "C" | "c" => Ok(AnswerKey::C),
            "D" | "d" => Ok(AnswerKey::D),
            other => Err(format!("answer key must be one of A, B, C, D (got {other:?})")),
        }
    }
}

impl Serialize for AnswerKey {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for AnswerKey {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AnswerOption {
    pub key: AnswerKey,
    pub text: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ClinicianQuery {
    pub text: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub options: Option<Vec<AnswerOption>>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub category: Option<FindingCategory>,
}

impl ClinicianQuery {
    pub fn open(text: impl Into<String>) -> Self {
        ClinicianQuery { text: text.into(), options: None, category: None }
    }

    /// Builds a four-option query from texts given in A..D order.
    pub fn multiple_choice(text: impl Into<String>, options: [&str; 4], category: Option<FindingCategory>) -> Self {
        ClinicianQuery {
            text: text.into(),
            options: Some(
                AnswerKey::ALL
                    .iter()
                    .zip(options)
                    .map(|(k, t)| AnswerOption { key: *k, text: t.to_string() })
                    .collect(),
            ),
            category,
        }
    }

    pub fn has_options(&self) -> bool {
        self.options.is_some()
    }

    pub fn option_text(&self, key: AnswerKey) -> Option<&str> {
        self.options.as_ref()?.iter().find(|o| o.key == key).map(|o| o.text.as_str())
    }

    pub fn validate(&self) -> Result<(), Vec<Violation>> {
        let mut out = Vec::new();
        if self.text.trim().is_empty() {
            out.push(Violation::new("query.text", "query text must be non-empty"));
        }
        if let Some(options) = &self.options {
            let keys: BTreeSet<AnswerKey> = options.iter().map(|o| o.key).collect();
            if options.len() != 4 || keys.len() != 4 {
                out.push(Violation::new("query.options", "options must have exactly the keys A, B, C, D"));
            }
        }
        if out.is_empty() {
            Ok(())
        } else {
            Err(out)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum EventKind {
    UserMessage,
    Thought,
    ToolCall,
    ToolResult,
    ClarificationRequest,
    FinalAnswer,
    Error,
    Timeout,
}

/// One line of a session's append-only event log.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SessionEvent {
    pub seq: u64,
    pub timestamp_ms: u64,
    pub kind: EventKind,
    pub payload: Document,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArtifactKind {
    MaskSummary,
    MeasurementSet,
    DiseaseProbs,
    Report,
    SyntheticClip,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ArtifactRef {
    pub artifact_id: String,
    pub kind: ArtifactKind,
    pub producer_tool: String,
    pub content: Document,
}

#[cfg(test)]
mod tests {
    use super::*;

    fn clip(id: &str, trace: Vec<f64>) -> ClipDescriptor {
        ClipDescriptor::with_trace(id, ViewLabel::A4C, 0.9, trace)
    }

    #[test]
    fn well_formed_study_is_ok() {
        let study = EchoStudy::new("s1", vec![clip("c1", vec![10.0, 14.0, 8.0]), clip("c2", vec![5.0])]);
        assert_eq!(validate_study(&study), Ok(()));
    }

    #[test]
    fn reports_every_violation() {
        let mut bad = clip("c1", vec![1.0, 2.0]);
        bad.frame_count = 3;
        bad.quality = 1.5;
        let study = EchoStudy::new("", vec![bad, clip("c1", vec![1.0, -2.0])]);
        let v = validate_study(&study).unwrap_err();
        let messages: Vec<String> = v.iter().map(|v| v.to_string()).collect();
        assert!(messages.iter().any(|m| m.contains("area_trace length mismatch") && m.contains("clips[0](c1)")));
        assert!(messages.iter().any(|m| m.contains("duplicate clip id") && m.contains("clips[1]")));
        assert!(messages.iter().any(|m| m.starts_with("study_id")));
        assert!(messages.iter().any(|m| m.contains("quality")));
        assert!(messages.iter().any(|m| m.contains("area_trace_cm2[1]")));
        assert_eq!(v.len(), 5);
    }

    #[test]
    fn empty_study_is_valid() {
        assert!(validate_study(&EchoStudy::new("s", vec![])).is_ok());
    }

    #[test]
    fn unknown_view_maps_to_other() {
        let c: ClipDescriptor = serde_json::from_str(
            r#"{"clip_id":"c","declared_view":"A5C","quality":0.5,"frame_count":1,"area_trace_cm2":[1]}"#,
        )
        .unwrap();
        assert_eq!(c.declared_view, ViewLabel::Other);
        assert_eq!(ViewLabel::parse_lenient("plax"), ViewLabel::Plax);
    }

    #[test]
    fn query_option_keys_must_be_complete() {
        let mut q = ClinicianQuery::multiple_choice("q", ["a", "b", "c", "d"], None);
        assert!(q.validate().is_ok());
        q.options.as_mut().unwrap()[3].key = AnswerKey::A;
        assert!(q.validate().is_err());
        q.options.as_mut().unwrap().pop();
        assert!(q.validate().is_err());
        assert!("E".parse::<AnswerKey>().is_err());
    }

    #[test]
    fn study_canonical_text_round_trips() {
        let mut c = clip("c1", vec![10.0, 14.5, 8.0]);
        c.ground_truth = Some(GroundTruth { true_ef_pct: Some(35.0), ..Default::default() });
        let study = EchoStudy::new("s1", vec![c]);
        let text = study.to_canonical_string().unwrap();
        assert!(text.starts_with(r#"{"clips":[{"area_trace_cm2":[10,14.5,8]"#));
        assert_eq!(EchoStudy::from_json(&text).unwrap(), study);
    }
}
