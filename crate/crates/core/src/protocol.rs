//! Tool-call wire contract: descriptors, request/response envelopes and the
//! closed error taxonomy.

use serde::{Deserialize, Serialize};
use serde_json::{json, Value};
use std::fmt;
use std::io::{Read, Write};

use crate::canonical::{self, Document};
use crate::domain::{ArtifactKind, ArtifactRef, Violation};
use crate::schema::{InvalidSchema, Schema};

/// Everything the registry and controllers know about a tool.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolDescriptor {
    pub name: String,
    pub version: semver::Version,
    pub description: String,
    pub input_schema: Document,
    pub output_schema: Document,
    #[serde(default)]
    pub tags: Vec<String>,
    #[serde(default)]
    pub cacheable: bool,
    /// Output fields merged into the agent's working findings.
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub findings: Vec<String>,
    /// Kind of artifact produced by a successful call, if any.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub artifact: Option<ArtifactKind>,
}

impl ToolDescriptor {
    pub fn valid_name(name: &str) -> bool {
        let mut chars = name.chars();
        matches!(chars.next(), Some(c) if c.is_ascii_lowercase())
            && chars.all(|c| c.is_ascii_lowercase() || c.is_ascii_digit() || c == '_')
    }

    /// Compiles both schemas.
    pub fn compile(&self) -> Result<(Schema, Schema), InvalidSchema> {
        let input = Schema::compile(&self.input_schema).map_err(|e| InvalidSchema {
            path: format!("input_schema{}", e.path.trim_start_matches('$')),
            message: e.message,
        })?;
        let output = Schema::compile(&self.output_schema).map_err(|e| InvalidSchema {
            path: format!("output_schema{}", e.path.trim_start_matches('$')),
            message: e.message,
        })?;
        Ok((input, output))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolRequest {
    pub request_id: String,
    pub tool: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub version_req: Option<semver::VersionReq>,
    pub arguments: Document,
}

impl ToolRequest {
    pub fn new(request_id: impl Into<String>, tool: impl Into<String>, arguments: Document) -> Self {
        ToolRequest { request_id: request_id.into(), tool: tool.into(), version_req: None, arguments }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum ErrorCode {
    ToolNotFound,
    SchemaValidation,
    ToolTimeout,
    ToolCrash,
    LowQualityInput,
    MissingClip,
    AmbiguousInstruction,
}

impl ErrorCode {
    /// Codes that route a call into its fallback chain.
    pub fn triggers_fallback(self) -> bool {
        matches!(self, ErrorCode::LowQualityInput | ErrorCode::MissingClip)
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let v = serde_json::to_value(self).expect("enum serializes");
        f.write_str(v.as_str().unwrap_or("?"))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, thiserror::Error)]
#[serde(deny_unknown_fields)]
#[error("{code}: {message}")]
pub struct ToolError {
    pub code: ErrorCode,
    pub message: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub detail: Option<Document>,
}

impl ToolError {
    pub fn new(code: ErrorCode, message: impl Into<String>) -> Self {
        ToolError { code, message: message.into(), detail: None }
    }

    pub fn with_detail(mut self, detail: Document) -> Self {
        self.detail = Some(detail);
        self
    }

    pub fn schema(message: impl Into<String>, violations: &[Violation]) -> Self {
        ToolError::new(ErrorCode::SchemaValidation, message).with_detail(json!({ "violations": violations }))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ResponseStatus {
    Ok,
    Error,
}

/// Record of a fallback traversal attached to a response.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FallbackTrace {
    /// Error raised by the originally requested tool.
    pub trigger: ToolError,
    /// Tools attempted after the primary, in order.
    pub chain: Vec<String>,
    /// Tool whose output was returned; `None` when every alternate failed.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub served_by: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ToolResponse {
    pub request_id: String,
    pub status: ResponseStatus,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub output: Option<Document>,
    #[serde(default)]
    pub artifacts: Vec<ArtifactRef>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<ToolError>,
    pub latency_ms: u64,
    #[serde(default)]
    pub from_cache: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub fallback: Option<FallbackTrace>,
}

impl ToolResponse {
    pub fn ok(request_id: impl Into<String>, output: Document, latency_ms: u64) -> Self {
        ToolResponse {
            request_id: request_id.into(),
            status: ResponseStatus::Ok,
            output: Some(output),
            artifacts: Vec::new(),
            error: None,
            latency_ms,
            from_cache: false,
            fallback: None,
        }
    }

    pub fn failed(request_id: impl Into<String>, error: ToolError, latency_ms: u64) -> Self {
        ToolResponse {
            request_id: request_id.into(),
            status: ResponseStatus::Error,
            output: None,
            artifacts: Vec::new(),
            error: Some(error),
            latency_ms,
            from_cache: false,
            fallback: None,
        }
    }

    pub fn is_ok(&self) -> bool {
        self.status == ResponseStatus::Ok
    }

    pub fn error_code(&self) -> Option<ErrorCode> {
        self.error.as_ref().map(|e| e.code)
    }
}

/// Encodes a request as canonical bytes.
pub fn encode_envelope(request: &ToolRequest) -> Vec<u8> {
    canonical::to_canonical(request).expect("tool requests hold only finite documents")
}

/// Decodes a closed request envelope. Unknown fields and malformed bytes are
/// both reported as `SCHEMA_VALIDATION`.
pub fn decode_envelope(bytes: &[u8]) -> Result<ToolRequest, ToolError> {
    decode_closed(bytes)
}

pub fn encode_response(response: &ToolResponse) -> Vec<u8> {
    canonical::to_canonical(response).expect("tool responses hold only finite documents")
}

pub fn decode_response(bytes: &[u8]) -> Result<ToolResponse, ToolError> {
    decode_closed(bytes)
}

fn decode_closed<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Result<T, ToolError> {
    let value: Value = serde_json::from_slice(bytes)
        .map_err(|e| ToolError::new(ErrorCode::SchemaValidation, format!("parse error: {e}")))?;
    serde_json::from_value(value)
        .map_err(|e| ToolError::new(ErrorCode::SchemaValidation, format!("invalid envelope: {e}")))
}

/// Validates tool arguments against a compiled input schema.
pub fn validate_args(descriptor: &ToolDescriptor, schema: &Schema, arguments: &Value) -> Result<(), ToolError> {
    let violations = schema.validate(arguments);
    if violations.is_empty() {
        Ok(())
    } else {
        let summary = violations.iter().map(|v| v.to_string()).collect::<Vec<_>>().join("; ");
        Err(ToolError::schema(format!("{} arguments: {summary}", descriptor.name), &violations))
    }
}

/// Failure modes an executor can surface, before classification.
#[derive(Debug, Clone, PartialEq)]
pub enum RawFailure {
    DeadlineExceeded {
        deadline_ms: u64,
    },
    /// The executor process or transport failed, or the executor panicked.
    Crash(String),
    /// The tool refused to work on its input (quality gate).
    Refusal(String),
    /// Arguments named a clip the study does not contain.
    MissingClip(String),
    /// The tool could not interpret the request.
    Ambiguous(String),
    /// The tool returned a document that is itself a refusal or error marker.
    Output(Document),
    /// An out-of-process tool returned a classified error.
    Classified(ToolError),
}

/// Maps a raw executor failure onto the closed error taxonomy.
pub fn classify_error(raw: RawFailure) -> ToolError {
    match raw {
        RawFailure::DeadlineExceeded { deadline_ms } => {
            ToolError::new(ErrorCode::ToolTimeout, format!("deadline of {deadline_ms} ms exceeded"))
        }
        RawFailure::Crash(msg) => ToolError::new(ErrorCode::ToolCrash, msg),
        RawFailure::Refusal(msg) => ToolError::new(ErrorCode::LowQualityInput, msg),
        RawFailure::MissingClip(clip) => {
            ToolError::new(ErrorCode::MissingClip, format!("clip {clip:?} not found in study"))
                .with_detail(json!({ "clip_id": clip }))
        }
        RawFailure::Ambiguous(msg) => ToolError::new(ErrorCode::AmbiguousInstruction, msg),
        RawFailure::Classified(e) => e,
        RawFailure::Output(doc) => {
            if let Some(reason) = doc.get("refusal").and_then(Value::as_str) {
                ToolError::new(ErrorCode::LowQualityInput, reason)
            } else if let Some(clip) = doc.get("missing_clip").and_then(Value::as_str) {
                classify_error(RawFailure::MissingClip(clip.to_string()))
            } else {
                ToolError::new(ErrorCode::ToolCrash, "executor returned an unrecognised failure document")
                    .with_detail(doc)
            }
        }
    }
}

/// Marker fields that turn an otherwise successful output into a failure.
pub fn output_failure(doc: &Value) -> Option<RawFailure> {
    let obj = doc.as_object()?;
    if obj.contains_key("refusal") || obj.contains_key("missing_clip") {
        Some(RawFailure::Output(doc.clone()))
    } else {
        None
    }
}

/// Largest frame accepted on the wire.
pub const MAX_FRAME_BYTES: u32 = 64 * 1024 * 1024;

/// Writes one length-prefixed frame: 4-byte big-endian length, then bytes.
pub fn write_frame<W: Write>(w: &mut W, payload: &[u8]) -> std::io::Result<()> {
    let len = u32::try_from(payload.len())
        .ok()
        .filter(|l| *l <= MAX_FRAME_BYTES)
        .ok_or_else(|| std::io::Error::new(std::io::ErrorKind::InvalidInput, "frame too large"))?;
    w.write_all(&len.to_be_bytes())?;
    w.write_all(payload)?;
    w.flush()
}

/// Reads one frame; `Ok(None)` on clean end of stream.
pub fn read_frame<R: Read>(r: &mut R) -> std::io::Result<Option<Vec<u8>>> {
    let mut len = [0u8; 4];
    match r.read_exact(&mut len) {
        Ok(()) => {}
        Err(e) if e.kind() == std::io::ErrorKind::UnexpectedEof => return Ok(None),
        Err(e) => return Err(e),
    }
    let len = u32::from_be_bytes(len);
    if len > MAX_FRAME_BYTES {
        return Err(std::io::Error::new(std::io::ErrorKind::InvalidData, "frame too large"));
    }
    let mut buf = vec![0u8; len as usize];
    r.read_exact(&mut buf)?;
    Ok(Some(buf))
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    #[test]
    fn tool_names() {
        assert!(ToolDescriptor::valid_name("measure"));
        assert!(ToolDescriptor::valid_name("view_classify_2"));
        assert!(!ToolDescriptor::valid_name("Measure"));
        assert!(!ToolDescriptor::valid_name("2d"));
        assert!(!ToolDescriptor::valid_name("a-b"));
        assert!(!ToolDescriptor::valid_name(""));
    }

    #[test]
    fn envelope_rejects_unknown_fields() {
        let err = decode_envelope(br#"{"request_id":"r","tool":"t","arguments":{},"foo":1}"#).unwrap_err();
        assert_eq!(err.code, ErrorCode::SchemaValidation);
        assert!(err.message.contains("foo"));
    }

    #[test]
    fn envelope_rejects_truncated_bytes() {
        let bytes = encode_envelope(&ToolRequest::new("r1", "measure", json!({"clip_id": "c1"})));
        let err = decode_envelope(&bytes[..bytes.len() - 3]).unwrap_err();
        assert_eq!(err.code, ErrorCode::SchemaValidation);
        assert!(err.message.starts_with("parse error"));
    }

    #[test]
    fn envelope_bytes_are_canonical() {
        let mut req = ToolRequest::new("r1", "measure", json!({"z": 1, "a": 2.50}));
        req.version_req = Some("^1.0".parse().unwrap());
        let text = String::from_utf8(encode_envelope(&req)).unwrap();
        assert_eq!(text, r#"{"arguments":{"a":2.5,"z":1},"request_id":"r1","tool":"measure","version_req":"^1.0"}"#);
    }

    #[test]
    fn classifies_failures() {
        assert_eq!(classify_error(RawFailure::DeadlineExceeded { deadline_ms: 5 }).code, ErrorCode::ToolTimeout);
        assert_eq!(classify_error(RawFailure::Crash("boom".into())).code, ErrorCode::ToolCrash);
        assert_eq!(
            classify_error(RawFailure::Output(json!({"refusal": "quality 0.1 below threshold"}))).code,
            ErrorCode::LowQualityInput
        );
        assert_eq!(classify_error(RawFailure::MissingClip("c9".into())).code, ErrorCode::MissingClip);
        assert_eq!(classify_error(RawFailure::Ambiguous("?".into())).code, ErrorCode::AmbiguousInstruction);
        assert_eq!(classify_error(RawFailure::Output(json!({"x": 1}))).code, ErrorCode::ToolCrash);
    }

    #[test]
    fn frames_round_trip() {
        let mut buf = Vec::new();
        write_frame(&mut buf, b"{}").unwrap();
        write_frame(&mut buf, b"[1]").unwrap();
        assert_eq!(&buf[..4], &[0, 0, 0, 2]);
        let mut r = &buf[..];
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"{}");
        assert_eq!(read_frame(&mut r).unwrap().unwrap(), b"[1]");
        assert!(read_frame(&mut r).unwrap().is_none());
    }

    fn arb_args() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i32>().prop_map(|i| json!(i)),
            (-1e9f64..1e9).prop_map(|f| json!(f)),
            "\\PC{0,8}".prop_map(Value::String),
        ];
        leaf.prop_recursive(3, 24, 5, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..5).prop_map(Value::Array),
                prop::collection::btree_map("[a-z_]{1,6}", inner, 0..5)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn envelope_round_trip(id in "[a-z0-9-]{1,12}", tool in "[a-z][a-z0-9_]{0,10}",
                               args in prop::collection::btree_map("[a-z_]{1,6}", arb_args(), 0..5),
                               req in prop::option::of(0u64..5)) {
            let request = ToolRequest {
                request_id: id,
                tool,
                version_req: req.map(|m| format!(">={m}.0.0").parse().unwrap()),
                arguments: Value::Object(args.into_iter().collect()),
            };
            let decoded = decode_envelope(&encode_envelope(&request)).unwrap();
            prop_assert_eq!(
                canonical::to_canonical(&decoded).unwrap(),
                canonical::to_canonical(&request).unwrap()
            );
            prop_assert_eq!(decoded.request_id, request.request_id);
        }
    }
}
