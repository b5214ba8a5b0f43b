//! Identifiers, timestamps and the typed property values shared by every module.

use std::cmp::Ordering;
use std::fmt;
use std::str::FromStr;

use chrono::{DateTime, SecondsFormat, TimeZone, Utc};
use serde::de::Error as _;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use uuid::Uuid;

/// Identity of an Item or ItemDescription. Rendered as the canonical
/// lowercase hyphenated UUID form.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct ItemId(Uuid);

impl ItemId {
    pub fn random() -> Self {
        ItemId(Uuid::new_v4())
    }

    pub const fn from_u128(v: u128) -> Self {
        ItemId(Uuid::from_u128(v))
    }

    pub fn from_random_bytes(bytes: [u8; 16]) -> Self {
        ItemId(uuid::Builder::from_random_bytes(bytes).into_uuid())
    }

    pub fn as_uuid(&self) -> &Uuid {
        &self.0
    }
}

impl fmt::Display for ItemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        self.0.hyphenated().fmt(f)
    }
}

impl FromStr for ItemId {
    type Err = uuid::Error;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Uuid::parse_str(s).map(ItemId)
    }
}

/// A non-empty user identifier.
#[derive(Clone, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize)]
#[serde(transparent)]
pub struct AgentId(String);

#[derive(Debug, thiserror::Error)]
#[error("agent identifier must be non-empty")]
pub struct EmptyAgent;

impl AgentId {
    pub fn new(value: impl Into<String>) -> Result<Self, EmptyAgent> {
        let value = value.into();
        if value.trim().is_empty() {
            return Err(EmptyAgent);
        }
        Ok(AgentId(value))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl<'de> Deserialize<'de> for AgentId {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        AgentId::new(s).map_err(D::Error::custom)
    }
}

impl fmt::Display for AgentId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// UTC instant with millisecond precision.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Default)]
pub struct Timestamp(i64);

impl Timestamp {
    pub const EPOCH: Timestamp = Timestamp(0);

    pub fn from_millis(ms: i64) -> Self {
        Timestamp(ms)
    }

    pub fn millis(&self) -> i64 {
        self.0
    }

    pub fn plus_millis(&self, ms: u64) -> Self {
        Timestamp(self.0 + ms as i64)
    }

    pub fn now() -> Self {
        Timestamp(Utc::now().timestamp_millis())
    }

    pub fn parse(s: &str) -> Option<Self> {
        DateTime::parse_from_rfc3339(s)
            .ok()
            .map(|dt| Timestamp(dt.with_timezone(&Utc).timestamp_millis()))
    }
}

impl fmt::Display for Timestamp {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match Utc.timestamp_millis_opt(self.0).single() {
            Some(dt) => f.write_str(&dt.to_rfc3339_opts(SecondsFormat::Millis, true)),
            None => write!(f, "{}ms", self.0),
        }
    }
}

impl Serialize for Timestamp {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for Timestamp {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        Timestamp::parse(&s).ok_or_else(|| D::Error::custom(format!("invalid timestamp {s:?}")))
    }
}

/// The primitive kinds a property schema can declare.
#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum ValueKind {
    Text,
    Integer,
    Decimal,
    Boolean,
    Timestamp,
    Reference,
}

impl fmt::Display for ValueKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        let s = match self {
            ValueKind::Text => "text",
            ValueKind::Integer => "integer",
            ValueKind::Decimal => "decimal",
            ValueKind::Boolean => "boolean",
            ValueKind::Timestamp => "timestamp",
            ValueKind::Reference => "reference",
        };
        f.write_str(s)
    }
}

impl ValueKind {
    pub fn is_numeric(self) -> bool {
        matches!(self, ValueKind::Integer | ValueKind::Decimal)
    }

    pub fn is_ordered(self) -> bool {
        self.is_numeric() || self == ValueKind::Timestamp
    }

    pub fn is_textual(self) -> bool {
        matches!(self, ValueKind::Text | ValueKind::Reference)
    }
}

/// A typed scalar. The canonical encoding is externally tagged
/// (`{"integer":5}`); decoding also accepts plain JSON scalars, whose kind is
/// inferred (string → text, integral number → integer, other number →
/// decimal, bool → boolean).
#[derive(Clone, Debug, PartialEq)]
pub enum Value {
    Text(String),
    Integer(i64),
    Decimal(f64),
    Boolean(bool),
    Timestamp(Timestamp),
    Reference(ItemId),
}

impl Value {
    pub fn kind(&self) -> ValueKind {
        match self {
            Value::Text(_) => ValueKind::Text,
            Value::Integer(_) => ValueKind::Integer,
            Value::Decimal(_) => ValueKind::Decimal,
            Value::Boolean(_) => ValueKind::Boolean,
            Value::Timestamp(_) => ValueKind::Timestamp,
            Value::Reference(_) => ValueKind::Reference,
        }
    }

    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    /// Converts the value to `kind` where the conversion is lossless
    /// (text → timestamp/reference by parsing, integer → decimal).
    pub fn coerce_to(&self, kind: ValueKind) -> Option<Value> {
        if self.kind() == kind {
            return Some(self.clone());
        }
        match (self, kind) {
            (Value::Integer(i), ValueKind::Decimal) => Some(Value::Decimal(*i as f64)),
            (Value::Text(s), ValueKind::Timestamp) => Timestamp::parse(s).map(Value::Timestamp),
            (Value::Text(s), ValueKind::Reference) => s.parse().ok().map(Value::Reference),
            _ => None,
        }
    }

    /// Plain text rendering used for table cells.
    pub fn render(&self) -> String {
        match self {
            Value::Text(s) => s.clone(),
            Value::Integer(i) => i.to_string(),
            Value::Decimal(d) => d.to_string(),
            Value::Boolean(b) => b.to_string(),
            Value::Timestamp(t) => t.to_string(),
            Value::Reference(r) => r.to_string(),
        }
    }

    pub fn as_f64(&self) -> Option<f64> {
        match self {
            Value::Integer(i) => Some(*i as f64),
            Value::Decimal(d) => Some(*d),
            _ => None,
        }
    }

    /// Ordering between comparable values; `None` for incompatible kinds.
    pub fn compare(&self, other: &Value) -> Option<Ordering> {
        match (self, other) {
            (Value::Integer(a), Value::Integer(b)) => Some(a.cmp(b)),
            (Value::Timestamp(a), Value::Timestamp(b)) => Some(a.cmp(b)),
            (Value::Boolean(a), Value::Boolean(b)) => Some(a.cmp(b)),
            (a, b) if a.kind().is_numeric() && b.kind().is_numeric() => {
                a.as_f64()?.partial_cmp(&b.as_f64()?)
            }
            (a, b) if a.kind().is_textual() && b.kind().is_textual() => {
                Some(a.render().cmp(&b.render()))
            }
            _ => None,
        }
    }

    /// Infers a literal from query text: `"quoted"` is always text; then
    /// boolean, integer, decimal, RFC 3339 timestamp, UUID reference; anything
    /// else is text.
    pub fn infer(raw: &str) -> Value {
        if raw.len() >= 2 && raw.starts_with('"') && raw.ends_with('"') {
            return Value::Text(raw[1..raw.len() - 1].to_string());
        }
        match raw {
            "true" => return Value::Boolean(true),
            "false" => return Value::Boolean(false),
            _ => {}
        }
        if let Ok(i) = raw.parse::<i64>() {
            return Value::Integer(i);
        }
        if let Ok(d) = raw.parse::<f64>() {
            if d.is_finite() && raw.chars().any(|c| c.is_ascii_digit()) {
                return Value::Decimal(d);
            }
        }
        if let Some(t) = Timestamp::parse(raw) {
            return Value::Timestamp(t);
        }
        if let Ok(id) = raw.parse::<ItemId>() {
            return Value::Reference(id);
        }
        Value::Text(raw.to_string())
    }

    fn from_json(v: serde_json::Value) -> Result<Value, String> {
        use serde_json::Value as J;
        match v {
            J::String(s) => Ok(Value::Text(s)),
            J::Bool(b) => Ok(Value::Boolean(b)),
            J::Number(n) => {
                if let Some(i) = n.as_i64() {
                    Ok(Value::Integer(i))
                } else {
                    n.as_f64().map(Value::Decimal).ok_or_else(|| format!("unsupported number {n}"))
                }
            }
            J::Object(map) if map.len() == 1 => {
                let (tag, inner) = map.into_iter().next().expect("one entry");
                let bad = || format!("invalid {tag} value");
                match (tag.as_str(), inner) {
                    ("text", J::String(s)) => Ok(Value::Text(s)),
                    ("integer", J::Number(n)) => n.as_i64().map(Value::Integer).ok_or_else(bad),
                    ("decimal", J::Number(n)) => n.as_f64().map(Value::Decimal).ok_or_else(bad),
                    ("boolean", J::Bool(b)) => Ok(Value::Boolean(b)),
                    ("timestamp", J::String(s)) => {
                        Timestamp::parse(&s).map(Value::Timestamp).ok_or_else(bad)
                    }
                    ("reference", J::String(s)) => {
                        s.parse().map(Value::Reference).map_err(|_| bad())
                    }
                    _ => Err(format!("unknown value tag {tag:?}")),
                }
            }
            other => Err(format!("unsupported value {other}")),
        }
    }
}

impl fmt::Display for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.render())
    }
}

impl Serialize for Value {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        use serde::ser::SerializeMap;
        let mut map = s.serialize_map(Some(1))?;
        match self {
            Value::Text(v) => map.serialize_entry("text", v)?,
            Value::Integer(v) => map.serialize_entry("integer", v)?,
            Value::Decimal(v) => map.serialize_entry("decimal", v)?,
            Value::Boolean(v) => map.serialize_entry("boolean", v)?,
            Value::Timestamp(v) => map.serialize_entry("timestamp", v)?,
            Value::Reference(v) => map.serialize_entry("reference", v)?,
        }
        map.end()
    }
}

impl<'de> Deserialize<'de> for Value {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let raw = serde_json::Value::deserialize(d)?;
        Value::from_json(raw).map_err(D::Error::custom)
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_string())
    }
}

impl From<String> for Value {
    fn from(s: String) -> Self {
        Value::Text(s)
    }
}

impl From<i64> for Value {
    fn from(i: i64) -> Self {
        Value::Integer(i)
    }
}

impl From<bool> for Value {
    fn from(b: bool) -> Self {
        Value::Boolean(b)
    }
}

impl From<ItemId> for Value {
    fn from(id: ItemId) -> Self {
        Value::Reference(id)
    }
}

impl From<Timestamp> for Value {
    fn from(t: Timestamp) -> Self {
        Value::Timestamp(t)
    }
}
