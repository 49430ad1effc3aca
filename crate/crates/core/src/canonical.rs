//! Canonical document encoding and fingerprints.
//!
//! Every document that crosses a boundary (cache keys, envelopes, event logs,
//! fixture files) is rendered through [`canonicalize`]: object keys sorted by
//! byte order, no insignificant whitespace, numbers in shortest round-trip
//! decimal form. Equal documents therefore always produce equal bytes.

use serde::Serialize;
use serde_json::{Number, Value};
use sha2::{Digest, Sha256};
use std::fmt::Write as _;

/// Alias used throughout the crate for tree-shaped JSON data.
pub type Document = Value;

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum CanonicalError {
    #[error("non-finite number at {path}")]
    NonFiniteNumber { path: String },
    #[error("serialization failed: {0}")]
    Serialize(String),
    #[error("parse error: {0}")]
    Parse(String),
}

/// Renders a document into canonical bytes.
pub fn canonicalize(doc: &Document) -> Result<Vec<u8>, CanonicalError> {
    let mut out = String::new();
    write_value(doc, &mut out, &mut String::from("$"))?;
    Ok(out.into_bytes())
}

/// Canonical form as a `String`.
pub fn canonical_string(doc: &Document) -> Result<String, CanonicalError> {
    canonicalize(doc).map(|b| String::from_utf8(b).expect("canonical output is utf-8"))
}

/// Serializes any value and renders it canonically.
///
/// Non-finite floats are rejected; `serde_json` would otherwise silently
/// turn them into `null`.
pub fn to_canonical<T: Serialize>(value: &T) -> Result<Vec<u8>, CanonicalError> {
    to_document(value).and_then(|doc| canonicalize(&doc))
}

/// Converts a serializable value into a [`Document`], rejecting NaN and infinities.
pub fn to_document<T: Serialize>(value: &T) -> Result<Document, CanonicalError> {
    value.serialize(FiniteCheck { path: "$".into() })?;
    serde_json::to_value(value).map_err(|e| CanonicalError::Serialize(e.to_string()))
}

/// Parses text and returns its canonical bytes.
pub fn canonicalize_text(text: &str) -> Result<Vec<u8>, CanonicalError> {
    let doc: Document = serde_json::from_str(text).map_err(|e| CanonicalError::Parse(e.to_string()))?;
    canonicalize(&doc)
}

/// Builds a JSON number from a float, failing on NaN or infinity.
pub fn finite_number(value: f64) -> Result<Document, CanonicalError> {
    Number::from_f64(value).map(Value::Number).ok_or_else(|| CanonicalError::NonFiniteNumber { path: "$".into() })
}

/// SHA-256 of already-canonical bytes, as 64 lowercase hex characters.
pub fn fingerprint(canonical: &[u8]) -> String {
    hex::encode(Sha256::digest(canonical))
}

/// Canonicalizes then fingerprints.
pub fn fingerprint_document(doc: &Document) -> Result<String, CanonicalError> {
    canonicalize(doc).map(|b| fingerprint(&b))
}

fn write_value(doc: &Value, out: &mut String, path: &mut String) -> Result<(), CanonicalError> {
    match doc {
        Value::Null => out.push_str("null"),
        Value::Bool(b) => out.push_str(if *b { "true" } else { "false" }),
        Value::Number(n) => write_number(n, out, path)?,
        Value::String(s) => write_string(s, out),
        Value::Array(items) => {
            out.push('[');
            for (i, item) in items.iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                let len = path.len();
                let _ = write!(path, "[{i}]");
                write_value(item, out, path)?;
                path.truncate(len);
            }
            out.push(']');
        }
        Value::Object(map) => {
            // Sorted explicitly: serde_json's map order depends on crate features.
            let mut keys: Vec<&String> = map.keys().collect();
            keys.sort_unstable();
            out.push('{');
            for (i, key) in keys.into_iter().enumerate() {
                if i > 0 {
                    out.push(',');
                }
                write_string(key, out);
                out.push(':');
                let len = path.len();
                path.push('.');
                path.push_str(key);
                write_value(&map[key], out, path)?;
                path.truncate(len);
            }
            out.push('}');
        }
    }
    Ok(())
}

fn write_number(n: &Number, out: &mut String, path: &str) -> Result<(), CanonicalError> {
    if let Some(u) = n.as_u64() {
        let _ = write!(out, "{u}");
        return Ok(());
    }
    if let Some(i) = n.as_i64() {
        let _ = write!(out, "{i}");
        return Ok(());
    }
    let f = n.as_f64().unwrap_or(f64::NAN);
    if !f.is_finite() {
        return Err(CanonicalError::NonFiniteNumber { path: path.to_string() });
    }
    // Integral floats render without a fractional part so that `2.0` and `2`
    // share one canonical form.
    if f.fract() == 0.0 && f.abs() < 9_007_199_254_740_992.0 {
        let _ = write!(out, "{}", f as i64);
        return Ok(());
    }
    // serde_json renders floats with ryu, which emits the shortest string
    // that parses back to the same f64.
    out.push_str(&Value::Number(n.clone()).to_string());
    Ok(())
}

fn write_string(s: &str, out: &mut String) {
    out.push_str(&serde_json::to_string(s).expect("string serialization is infallible"));
}

/// A serializer that only walks the value looking for non-finite floats.
struct FiniteCheck {
    path: String,
}

type CheckResult = Result<(), CanonicalError>;

impl serde::ser::Error for CanonicalError {
    fn custom<T: std::fmt::Display>(msg: T) -> Self {
        CanonicalError::Serialize(msg.to_string())
    }
}

impl FiniteCheck {
    fn check(&self, v: f64) -> CheckResult {
        if v.is_finite() {
            Ok(())
        } else {
            Err(CanonicalError::NonFiniteNumber { path: self.path.clone() })
        }
    }
    fn child(&self, segment: &str) -> FiniteCheck {
        FiniteCheck { path: format!("{}{}", self.path, segment) }
    }
}

struct Compound {
    path: String,
    index: usize,
}

impl Compound {
    fn next(&mut self) -> FiniteCheck {
        let c = FiniteCheck { path: format!("{}[{}]", self.path, self.index) };
        self.index += 1;
        c
    }
}

impl serde::Serializer for FiniteCheck {
    type Ok = ();
    type Error = CanonicalError;
    type SerializeSeq = Compound;
    type SerializeTuple = Compound;
    type SerializeTupleStruct = Compound;
    type SerializeTupleVariant = Compound;
    type SerializeMap = Compound;
    type SerializeStruct = Compound;
    type SerializeStructVariant = Compound;

    fn serialize_bool(self, _: bool) -> CheckResult {
        Ok(())
    }
    fn serialize_i8(self, _: i8) -> CheckResult {
        Ok(())
    }
    fn serialize_i16(self, _: i16) -> CheckResult {
        Ok(())
    }
    fn serialize_i32(self, _: i32) -> CheckResult {
        Ok(())
    }
    fn serialize_i64(self, _: i64) -> CheckResult {
        Ok(())
    }
    fn serialize_u8(self, _: u8) -> CheckResult {
        Ok(())
    }
    fn serialize_u16(self, _: u16) -> CheckResult {
        Ok(())
    }
    fn serialize_u32(self, _: u32) -> CheckResult {
        Ok(())
    }
    fn serialize_u64(self, _: u64) -> CheckResult {
        Ok(())
    }
    fn serialize_f32(self, v: f32) -> CheckResult {
        self.check(v as f64)
    }
    fn serialize_f64(self, v: f64) -> CheckResult {
        self.check(v)
    }
    fn serialize_char(self, _: char) -> CheckResult {
        Ok(())
    }
    fn serialize_str(self, _: &str) -> CheckResult {
        Ok(())
    }
    fn serialize_bytes(self, _: &[u8]) -> CheckResult {
        Ok(())
    }
    fn serialize_none(self) -> CheckResult {
        Ok(())
    }
    fn serialize_some<T: ?Sized + Serialize>(self, value: &T) -> CheckResult {
        value.serialize(self)
    }
    fn serialize_unit(self) -> CheckResult {
        Ok(())
    }
    fn serialize_unit_struct(self, _: &'static str) -> CheckResult {
        Ok(())
    }
    fn serialize_unit_variant(self, _: &'static str, _: u32, _: &'static str) -> CheckResult {
        Ok(())
    }
    fn serialize_newtype_struct<T: ?Sized + Serialize>(self, _: &'static str, value: &T) -> CheckResult {
        value.serialize(self)
    }
    fn serialize_newtype_variant<T: ?Sized + Serialize>(
        self,
        _: &'static str,
        _: u32,
        variant: &'static str,
        value: &T,
    ) -> CheckResult {
        value.serialize(self.child(&format!(".{variant}")))
    }
    fn serialize_seq(self, _: Option<usize>) -> Result<Compound, CanonicalError> {
        Ok(Compound { path: self.path, index: 0 })
    }
    fn serialize_tuple(self, _: usize) -> Result<Compound, CanonicalError> {
        Ok(Compound { path: self.path, index: 0 })
    }
    fn serialize_tuple_struct(self, _: &'static str, _: usize) -> Result<Compound, CanonicalError> {
        Ok(Compound { path: self.path, index: 0 })
    }
    fn serialize_tuple_variant(
        self,
        _: &'static str,
        _: u32,
        _: &'static str,
        _: usize,
    ) -> Result<Compound, CanonicalError> {
        Ok(Compound { path: self.path, index: 0 })
    }
    fn serialize_map(self, _: Option<usize>) -> Result<Compound, CanonicalError> {
        Ok(Compound { path: self.path, index: 0 })
    }
    fn serialize_struct(self, _: &'static str, _: usize) -> Result<Compound, CanonicalError> {
        Ok(Compound { path: self.path, index: 0 })
    }
    fn serialize_struct_variant(
        self,
        _: &'static str,
        _: u32,
        _: &'static str,
        _: usize,
    ) -> Result<Compound, CanonicalError> {
        Ok(Compound { path: self.path, index: 0 })
    }
}

impl serde::ser::SerializeSeq for Compound {
    type Ok = ();
    type Error = CanonicalError;
    fn serialize_element<T: ?Sized + Serialize>(&mut self, value: &T) -> CheckResult {
        value.serialize(self.next())
    }
    fn end(self) -> CheckResult {
        Ok(())
    }
}

impl serde::ser::SerializeTuple for Compound {
    type Ok = ();
    type Error = CanonicalError;
    fn serialize_element<T: ?Sized + Serialize>(&mut self, value: &T) -> CheckResult {
        value.serialize(self.next())
    }
    fn end(self) -> CheckResult {
        Ok(())
    }
}

impl serde::ser::SerializeTupleStruct for Compound {
    type Ok = ();
    type Error = CanonicalError;
    fn serialize_field<T: ?Sized + Serialize>(&mut self, value: &T) -> CheckResult {
        value.serialize(self.next())
    }
    fn end(self) -> CheckResult {
        Ok(())
    }
}

impl serde::ser::SerializeTupleVariant for Compound {
    type Ok = ();
    type Error = CanonicalError;
    fn serialize_field<T: ?Sized + Serialize>(&mut self, value: &T) -> CheckResult {
        value.serialize(self.next())
    }
    fn end(self) -> CheckResult {
        Ok(())
    }
}

impl serde::ser::SerializeMap for Compound {
    type Ok = ();
    type Error = CanonicalError;
    fn serialize_key<T: ?Sized + Serialize>(&mut self, _: &T) -> CheckResult {
        Ok(())
    }
    fn serialize_value<T: ?Sized + Serialize>(&mut self, value: &T) -> CheckResult {
        value.serialize(self.next())
    }
    fn end(self) -> CheckResult {
        Ok(())
    }
}

impl serde::ser::SerializeStruct for Compound {
    type Ok = ();
    type Error = CanonicalError;
    fn serialize_field<T: ?Sized + Serialize>(&mut self, key: &'static str, value: &T) -> CheckResult {
        value.serialize(FiniteCheck { path: format!("{}.{key}", self.path) })
    }
    fn end(self) -> CheckResult {
        Ok(())
    }
}

impl serde::ser::SerializeStructVariant for Compound {
    type Ok = ();
    type Error = CanonicalError;
    fn serialize_field<T: ?Sized + Serialize>(&mut self, key: &'static str, value: &T) -> CheckResult {
        value.serialize(FiniteCheck { path: format!("{}.{key}", self.path) })
    }
    fn end(self) -> CheckResult {
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use serde_json::json;

    fn canon(text: &str) -> String {
        String::from_utf8(canonicalize_text(text).unwrap()).unwrap()
    }

    #[test]
    fn sorts_keys() {
        assert_eq!(canon(r#"{"b":1,"a":2}"#), r#"{"a":2,"b":1}"#);
    }

    #[test]
    fn sorts_nested_keys() {
        assert_eq!(canon(r#"{"x":[{"z":0,"y":1}]}"#), r#"{"x":[{"y":1,"z":0}]}"#);
    }

    #[test]
    fn shortest_number_form() {
        assert_eq!(canon(r#"{"v":2.50}"#), r#"{"v":2.5}"#);
        assert_eq!(canon(r#"{"v":2.0}"#), r#"{"v":2}"#);
        assert_eq!(canon(r#"{"v":-0.0}"#), r#"{"v":0}"#);
        assert_eq!(canon(r#"{"v":1e300}"#), r#"{"v":1e+300}"#);
        assert_eq!(canon(r#"[0.1, 12.599210498948732]"#), "[0.1,12.599210498948732]");
    }

    #[test]
    fn strips_whitespace_and_escapes_strings() {
        assert_eq!(canon("{ \"k\" : [ 1 , \"a\\\"b\" ] }"), r#"{"k":[1,"a\"b"]}"#);
    }

    #[test]
    fn rejects_non_finite() {
        #[derive(Serialize)]
        struct S {
            inner: Vec<f64>,
        }
        let err = to_canonical(&S { inner: vec![1.0, f64::NAN] }).unwrap_err();
        assert_eq!(err, CanonicalError::NonFiniteNumber { path: "$.inner[1]".into() });
        assert!(finite_number(f64::INFINITY).is_err());
        assert_eq!(finite_number(1.5).unwrap(), json!(1.5));
    }

    #[test]
    fn empty_document_fingerprint_is_pinned() {
        // sha256("{}"), computed with coreutils `printf '{}' | sha256sum`.
        let fp = fingerprint(&canonicalize(&json!({})).unwrap());
        assert_eq!(fp, "44136fa355b3678a1146ad16f7e8649e94fb4fc21fe77e8310c060f61caaff8a");
    }

    #[test]
    fn fingerprint_ignores_key_order_but_not_values() {
        let a = fingerprint_document(&json!({"a": 1, "b": [1, 2]})).unwrap();
        let b = fingerprint_document(&json!({"b": [1, 2], "a": 1})).unwrap();
        let c = fingerprint_document(&json!({"a": 1, "b": [1, 3]})).unwrap();
        assert_eq!(a, b);
        assert_ne!(a, c);
        assert_eq!(a.len(), 64);
        // printf '{"a":1,"b":[1,2]}' | sha256sum
        assert_eq!(a, "8baa73198470c7bb4c3ce142a8fd651affc0310d878bb9bd159e37a573fb4874");
        // printf '{"a":1,"b":[1,3]}' | sha256sum
        assert_eq!(c, "ed6813012c45feb87eaf1debde7160608785f6f886d23437b34811f6af6b2f86");
    }
}
