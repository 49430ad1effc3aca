//! A small document-schema language for tool inputs and outputs.
//!
//! Schemas are themselves documents:
//!
//! ```text
//! {"type":"string"} | {"type":"number"} | {"type":"integer"} | {"type":"boolean"}
//! {"type":"enum","values":["A4C","PLAX"]}
//! {"type":"list","items":<schema>}
//! {"type":"optional","of":<schema>}               // null or <schema>
//! {"type":"document","properties":{..},"required":[..]}
//! {"type":"document","values":<schema>}           // open map
//! {"type":"any"}
//! ```
//!
//! Objects are closed unless they declare `values`, in which case keys not
//! listed in `properties` are checked against it.

use serde_json::Value;
use std::collections::{BTreeMap, BTreeSet};

use crate::domain::Violation;

#[derive(Debug, Clone, PartialEq)]
pub enum Schema {
    Any,
    String,
    Number,
    Integer,
    Boolean,
    Enum(Vec<String>),
    List(Box<Schema>),
    Optional(Box<Schema>),
    Document { properties: BTreeMap<String, Schema>, required: BTreeSet<String>, values: Option<Box<Schema>> },
}

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
#[error("invalid schema at {path}: {message}")]
pub struct InvalidSchema {
    pub path: String,
    pub message: String,
}

impl Schema {
    /// Compiles a schema document, rejecting unknown types and malformed keywords.
    pub fn compile(doc: &Value) -> Result<Schema, InvalidSchema> {
        compile_at(doc, "$")
    }

    /// Validates a document, returning every violation.
    pub fn validate(&self, doc: &Value) -> Vec<Violation> {
        let mut out = Vec::new();
        check(self, doc, "", &mut out);
        out
    }

    pub fn has_property(&self, name: &str) -> bool {
        matches!(self, Schema::Document { properties, .. } if properties.contains_key(name))
    }
}

fn err(path: &str, message: impl Into<String>) -> InvalidSchema {
    InvalidSchema { path: path.to_string(), message: message.into() }
}

fn compile_at(doc: &Value, path: &str) -> Result<Schema, InvalidSchema> {
    let obj = doc.as_object().ok_or_else(|| err(path, "schema must be a document"))?;
    let ty = obj.get("type").and_then(Value::as_str).ok_or_else(|| err(path, "missing string field `type`"))?;
    let allowed: &[&str] = match ty {
        "any" | "string" | "number" | "integer" | "boolean" => &["type", "description"],
        "enum" => &["type", "values", "description"],
        "list" => &["type", "items", "description"],
        "optional" => &["type", "of", "description"],
        "document" => &["type", "properties", "required", "values", "description"],
        other => return Err(err(path, format!("unknown type {other:?}"))),
    };
    if let Some(k) = obj.keys().find(|k| !allowed.contains(&k.as_str())) {
        return Err(err(path, format!("unexpected keyword {k:?} for type {ty:?}")));
    }
    Ok(match ty {
        "any" => Schema::Any,
        "string" => Schema::String,
        "number" => Schema::Number,
        "integer" => Schema::Integer,
        "boolean" => Schema::Boolean,
        "enum" => {
            let values =
                obj.get("values").and_then(Value::as_array).ok_or_else(|| err(path, "enum requires `values` list"))?;
            let mut names = Vec::with_capacity(values.len());
            for v in values {
                names.push(v.as_str().ok_or_else(|| err(path, "enum values must be strings"))?.to_string());
            }
            if names.is_empty() {
                return Err(err(path, "enum requires at least one value"));
            }
            Schema::Enum(names)
        }
        "list" => {
            let items = obj.get("items").ok_or_else(|| err(path, "list requires `items`"))?;
            Schema::List(Box::new(compile_at(items, &format!("{path}.items"))?))
        }
        "optional" => {
            let of = obj.get("of").ok_or_else(|| err(path, "optional requires `of`"))?;
            Schema::Optional(Box::new(compile_at(of, &format!("{path}.of"))?))
        }
        _ => {
            let mut properties = BTreeMap::new();
            if let Some(props) = obj.get("properties") {
                let props = props.as_object().ok_or_else(|| err(path, "`properties` must be a document"))?;
                for (name, sub) in props {
                    properties.insert(name.clone(), compile_at(sub, &format!("{path}.properties.{name}"))?);
                }
            }
            let mut required = BTreeSet::new();
            if let Some(req) = obj.get("required") {
                let req = req.as_array().ok_or_else(|| err(path, "`required` must be a list"))?;
                for r in req {
                    let name = r.as_str().ok_or_else(|| err(path, "`required` entries must be strings"))?;
                    if !properties.contains_key(name) {
                        return Err(err(path, format!("required field {name:?} is not declared")));
                    }
                    required.insert(name.to_string());
                }
            }
            let values = match obj.get("values") {
                Some(v) => Some(Box::new(compile_at(v, &format!("{path}.values"))?)),
                None => None,
            };
            Schema::Document { properties, required, values }
        }
    })
}

fn type_name(v: &Value) -> &'static str {
    match v {
        Value::Null => "null",
        Value::Bool(_) => "boolean",
        Value::Number(n) if n.is_i64() || n.is_u64() => "integer",
        Value::Number(_) => "number",
        Value::String(_) => "string",
        Value::Array(_) => "list",
        Value::Object(_) => "document",
    }
}

fn display_path(path: &str) -> String {
    if path.is_empty() {
        ".".to_string()
    } else {
        path.to_string()
    }
}

fn mismatch(out: &mut Vec<Violation>, path: &str, expected: &str, got: &Value) {
    out.push(Violation::new(display_path(path), format!("expected {expected}, got {}", type_name(got))));
}

fn check(schema: &Schema, doc: &Value, path: &str, out: &mut Vec<Violation>) {
    match schema {
        Schema::Any => {}
        Schema::String => {
            if !doc.is_string() {
                mismatch(out, path, "string", doc);
            }
        }
        Schema::Number => {
            if !doc.is_number() {
                mismatch(out, path, "number", doc);
            }
        }
        Schema::Integer => {
            let integral =
                doc.is_i64() || doc.is_u64() || doc.as_f64().is_some_and(|f| f.fract() == 0.0 && f.abs() < 9.0e15);
            if !integral {
                mismatch(out, path, "integer", doc);
            }
        }
        Schema::Boolean => {
            if !doc.is_boolean() {
                mismatch(out, path, "boolean", doc);
            }
        }
        Schema::Enum(values) => match doc.as_str() {
            Some(s) if values.iter().any(|v| v == s) => {}
            Some(s) => {
                out.push(Violation::new(display_path(path), format!("value {s:?} not in enum [{}]", values.join(", "))))
            }
            None => mismatch(out, path, "enum string", doc),
        },
        Schema::List(items) => match doc.as_array() {
            Some(arr) => {
                for (i, item) in arr.iter().enumerate() {
                    check(items, item, &format!("{path}[{i}]"), out);
                }
            }
            None => mismatch(out, path, "list", doc),
        },
        Schema::Optional(inner) => {
            if !doc.is_null() {
                check(inner, doc, path, out);
            }
        }
        Schema::Document { properties, required, values } => {
            let Some(obj) = doc.as_object() else {
                mismatch(out, path, "document", doc);
                return;
            };
            for name in required {
                if !obj.contains_key(name) {
                    out.push(Violation::new(format!("{path}.{name}"), "missing required field"));
                }
            }
            for (key, value) in obj {
                let sub = format!("{path}.{key}");
                match (properties.get(key), values) {
                    (Some(s), _) => {
                        // A null optional property is the same as an absent one.
                        if !(value.is_null() && !required.contains(key)) {
                            check(s, value, &sub, out);
                        }
                    }
                    (None, Some(v)) => check(v, value, &sub, out),
                    (None, None) => out.push(Violation::new(sub, "unknown field")),
                }
            }
        }
    }
}

#[cfg(test)]
pub(crate) mod tests {
    use super::*;
    use proptest::prelude::*;
    use serde_json::json;

    fn clip_schema() -> Schema {
        Schema::compile(&json!({
            "type": "document",
            "properties": {
                "clip_id": {"type": "string"},
                "frames": {"type": "optional", "of": {"type": "integer"}},
                "view": {"type": "enum", "values": ["A4C", "PLAX"]},
                "tags": {"type": "list", "items": {"type": "string"}}
            },
            "required": ["clip_id"]
        }))
        .unwrap()
    }

    #[test]
    fn accepts_conforming_arguments() {
        assert!(clip_schema().validate(&json!({"clip_id": "c1"})).is_empty());
        assert!(clip_schema()
            .validate(&json!({"clip_id": "c1", "frames": null, "view": "A4C", "tags": ["x"]}))
            .is_empty());
    }

    #[test]
    fn reports_type_mismatch_with_path() {
        let v = clip_schema().validate(&json!({"clip_id": 7}));
        assert_eq!(v, vec![Violation::new(".clip_id", "expected string, got integer")]);
    }

    #[test]
    fn reports_missing_required() {
        let v = clip_schema().validate(&json!({}));
        assert_eq!(v, vec![Violation::new(".clip_id", "missing required field")]);
    }

    #[test]
    fn reports_every_violation() {
        let v = clip_schema().validate(&json!({"view": "A3C", "tags": [1, "ok", false], "extra": 1}));
        let paths: Vec<&str> = v.iter().map(|v| v.path.as_str()).collect();
        assert_eq!(paths, vec![".clip_id", ".extra", ".tags[0]", ".tags[2]", ".view"]);
    }

    #[test]
    fn open_maps_check_values() {
        let s = Schema::compile(&json!({"type": "document", "values": {"type": "number"}})).unwrap();
        assert!(s.validate(&json!({"a": 0.5, "b": 1})).is_empty());
        assert_eq!(s.validate(&json!({"a": "x"})).len(), 1);
    }

    #[test]
    fn rejects_unknown_types() {
        let e = Schema::compile(&json!({"type": "document", "properties": {"x": {"type": "tensor"}}})).unwrap_err();
        assert_eq!(e.path, "$.properties.x");
        assert!(Schema::compile(&json!({"type": "document", "required": ["y"]})).is_err());
        assert!(Schema::compile(&json!({"type": "string", "min": 1})).is_err());
        assert!(Schema::compile(&json!("string")).is_err());
    }

    pub(crate) fn arb_json() -> impl Strategy<Value = Value> {
        let leaf = prop_oneof![
            Just(Value::Null),
            any::<bool>().prop_map(Value::Bool),
            any::<i64>().prop_map(|i| json!(i)),
            (-1e6f64..1e6).prop_map(|f| json!(f)),
            "[a-z]{0,6}".prop_map(Value::String),
        ];
        leaf.prop_recursive(4, 32, 6, |inner| {
            prop_oneof![
                prop::collection::vec(inner.clone(), 0..6).prop_map(Value::Array),
                prop::collection::btree_map("[a-z_]{1,8}", inner, 0..6)
                    .prop_map(|m| Value::Object(m.into_iter().collect())),
            ]
        })
    }

    proptest! {
        #[test]
        fn validation_is_total_and_deterministic(doc in arb_json()) {
            let s = clip_schema();
            let first = s.validate(&doc);
            prop_assert_eq!(first, s.validate(&doc));
        }
    }
}
