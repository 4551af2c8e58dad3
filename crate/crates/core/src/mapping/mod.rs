//! Model mappers.
//!
//! A structural mapper derives a target model from a source model by type
//! rules: each source entity with a rule gets one target entity, keys are
//! renamed and values transformed. Changes flow forward as the source
//! changes, and writes to the target flow back to the source.
//!
//! An event mapper derives an append-only event model from one or more
//! source models by firing rules on entity creation or property updates.
//!
//! Rules are loaded from JSON documents tagged with `"kind"`.

mod events;
mod structural;
pub mod vocab;

use std::collections::{HashMap, HashSet};
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::entity::{PropertyKey, Uri, Value};

pub use events::{derive_events, read_record, EventLog, EventMapper, EventRecord};
pub use structural::{chain, derive, ChainedModel, MappedModel};

#[derive(Debug, Error)]
pub enum MappingError {
    #[error("invalid rule document: {0}")]
    InvalidRules(String),
    #[error("cannot read rule document {path}: {message}")]
    Io { path: String, message: String },
    #[error("no rule for source type {0}")]
    RuleMissing(Uri),
}

/// Non-fatal problems met while mapping.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Diagnostic {
    /// A referenced entity has a type without a rule and was not mapped.
    RuleMissing { entity: Uri, source_type: Uri },
    /// A value could not be transformed and was left out.
    Untransformable { entity: Uri, key: String, value: String },
}

/// Value transform of one key mapping.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum Transform {
    #[default]
    Identity,
    /// Bijective text lookup: `[source, target]` pairs.
    Table(Vec<(String, String)>),
}

impl Transform {
    /// `None` when the value has no image.
    pub fn forward(&self, value: &Value) -> Option<Value> {
        match self {
            Transform::Identity => Some(value.clone()),
            Transform::Table(pairs) => {
                let text = value.as_text()?;
                pairs.iter().find(|(s, _)| s == text).map(|(_, t)| Value::text(t.as_str()))
            }
        }
    }

    pub fn inverse(&self, value: &Value) -> Option<Value> {
        match self {
            Transform::Identity => Some(value.clone()),
            Transform::Table(pairs) => {
                let text = value.as_text()?;
                pairs.iter().find(|(_, t)| t == text).map(|(s, _)| Value::text(s.as_str()))
            }
        }
    }

    /// Checks `inverse(forward(x)) == x` on the source side and
    /// `forward(inverse(y)) == y` on the target side of every table entry.
    fn check_inverse_law(&self) -> Result<(), String> {
        let Transform::Table(pairs) = self else { return Ok(()) };
        if pairs.is_empty() {
            return Err("empty table".into());
        }
        for (s, t) in pairs {
            let fwd = self.forward(&Value::text(s.as_str()));
            if fwd.as_ref().and_then(|v| self.inverse(v)) != Some(Value::text(s.as_str())) {
                return Err(format!("table is not invertible at {s:?}"));
            }
            let back = self.inverse(&Value::text(t.as_str()));
            if back.as_ref().and_then(|v| self.forward(v)) != Some(Value::text(t.as_str())) {
                return Err(format!("table is not invertible at {t:?}"));
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct KeyRule {
    pub source: String,
    pub target: String,
    #[serde(default, skip_serializing_if = "is_identity")]
    pub transform: Transform,
}

fn is_identity(t: &Transform) -> bool {
    *t == Transform::Identity
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct TypeRule {
    pub source_type: Uri,
    pub target_type: Uri,
    #[serde(default)]
    pub keys: Vec<KeyRule>,
}

impl TypeRule {
    pub fn by_source_key(&self, key: &str) -> Option<&KeyRule> {
        self.keys.iter().find(|k| k.source == key)
    }

    pub fn by_target_key(&self, key: &str) -> Option<&KeyRule> {
        self.keys.iter().find(|k| k.target == key)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IdRewrite {
    pub from: String,
    pub to: String,
}

impl IdRewrite {
    /// Swaps the prefix; ids without it get the target prefix prepended.
    pub fn apply(&self, id: &Uri) -> Uri {
        let rewritten = match id.as_str().strip_prefix(&self.from) {
            Some(rest) => format!("{}{}", self.to, rest),
            None => format!("{}{}", self.to, id.as_str()),
        };
        Uri::parse(rewritten).unwrap_or_else(|_| id.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StructuralRules {
    pub name: String,
    pub id_rewrite: IdRewrite,
    pub rules: Vec<TypeRule>,
}

impl StructuralRules {
    pub fn rule_for(&self, source_type: &Uri) -> Option<&TypeRule> {
        self.rules.iter().find(|r| &r.source_type == source_type)
    }

    pub fn validate(&self) -> Result<(), MappingError> {
        let bad = |m: String| Err(MappingError::InvalidRules(format!("{}: {m}", self.name)));
        if self.name.is_empty() {
            return bad("empty mapper name".into());
        }
        if Uri::parse(self.id_rewrite.to.clone()).is_err() {
            return bad(format!("id_rewrite.to {:?} is not a URI prefix", self.id_rewrite.to));
        }
        let mut types = HashSet::new();
        for rule in &self.rules {
            if !types.insert(&rule.source_type) {
                return bad(format!("duplicate rule for {}", rule.source_type));
            }
            let mut sources = HashSet::new();
            let mut targets = HashSet::new();
            for k in &rule.keys {
                if k.source.is_empty() || k.target.is_empty() {
                    return bad(format!("empty key in rule for {}", rule.source_type));
                }
                if !sources.insert(&k.source) || !targets.insert(&k.target) {
                    return bad(format!("key {:?} mapped twice in rule for {}", k.source, rule.source_type));
                }
                if let Err(m) = k.transform.check_inverse_law() {
                    return bad(format!("{} -> {}: {m}", k.source, k.target));
                }
            }
        }
        Ok(())
    }
}

/// What fires an event rule.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Trigger {
    /// An entity of the rule's type becomes reachable.
    Created,
    /// The given property of such an entity changes value.
    Updated(String),
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum EventKindSpec {
    Fixed(String),
    /// Kind looked up from a property value.
    FromValue {
        from: String,
        table: Vec<(String, String)>,
    },
}

impl EventKindSpec {
    pub fn resolve(&self, lookup: impl Fn(&str) -> Option<Value>) -> Option<String> {
        match self {
            EventKindSpec::Fixed(k) => Some(k.clone()),
            EventKindSpec::FromValue { from, table } => {
                let v = lookup(from)?;
                let text = v.as_text()?;
                table.iter().find(|(s, _)| s == text).map(|(_, k)| k.clone())
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRule {
    pub source_type: Uri,
    pub on: Trigger,
    pub event_kind: EventKindSpec,
    /// Template; `{key}` is replaced by the property's value.
    pub summary: String,
    /// Property holding the event time in epoch milliseconds; the mapper's
    /// clock is used when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub timestamp: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct EventRules {
    pub name: String,
    pub rules: Vec<EventRule>,
}

impl EventRules {
    pub fn validate(&self) -> Result<(), MappingError> {
        let bad = |m: String| Err(MappingError::InvalidRules(format!("{}: {m}", self.name)));
        if self.name.is_empty() {
            return bad("empty mapper name".into());
        }
        for rule in &self.rules {
            match &rule.event_kind {
                EventKindSpec::Fixed(k) if k.is_empty() => return bad("empty event kind".into()),
                EventKindSpec::FromValue { table, .. } => {
                    let mut seen = HashMap::new();
                    for (s, k) in table {
                        if seen.insert(s, k).is_some() {
                            return bad(format!("value {s:?} listed twice in kind table"));
                        }
                    }
                }
                _ => {}
            }
            if let Trigger::Updated(k) = &rule.on {
                if k.is_empty() {
                    return bad("empty trigger key".into());
                }
            }
        }
        Ok(())
    }
}

/// A rule document as stored on disk.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum RuleDocument {
    Structural(StructuralRules),
    Events(EventRules),
}

impl RuleDocument {
    pub fn from_json(text: &str) -> Result<Self, MappingError> {
        let doc: RuleDocument = serde_json::from_str(text).map_err(|e| MappingError::InvalidRules(e.to_string()))?;
        match &doc {
            RuleDocument::Structural(r) => r.validate()?,
            RuleDocument::Events(r) => r.validate()?,
        }
        Ok(doc)
    }

    pub fn load(path: &Path) -> Result<Self, MappingError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| MappingError::Io { path: path.display().to_string(), message: e.to_string() })?;
        Self::from_json(&text)
    }

    pub fn name(&self) -> &str {
        match self {
            RuleDocument::Structural(r) => &r.name,
            RuleDocument::Events(r) => &r.name,
        }
    }
}

/// Replaces `{key}` placeholders with property values.
pub(crate) fn render_template(template: &str, lookup: impl Fn(&str) -> Option<Value>) -> String {
    let mut out = String::with_capacity(template.len());
    let mut rest = template;
    while let Some(start) = rest.find('{') {
        out.push_str(&rest[..start]);
        let after = &rest[start + 1..];
        match after.find('}') {
            Some(end) => {
                match lookup(&after[..end]) {
                    Some(Value::Text(s)) => out.push_str(&s),
                    Some(Value::Integer(i)) => out.push_str(&i.to_string()),
                    Some(Value::Bytes(b)) => out.push_str(&format!("<{} bytes>", b.len())),
                    Some(Value::Ref(e)) => out.push_str(e.id().as_str()),
                    None => {}
                }
                rest = &after[end + 1..];
            }
            None => {
                out.push_str(&rest[start..]);
                rest = "";
            }
        }
    }
    out.push_str(rest);
    out
}

pub(crate) fn property_key(k: &str) -> PropertyKey {
    PropertyKey::new(k).expect("rule keys are validated non-empty")
}

/// The rule documents that ship with the platform.
pub mod builtin {
    use super::{EventRules, RuleDocument, StructuralRules};

    pub const ISSUES_TO_CM: &str = include_str!("../../../../config/rules/issues-to-cm.json");
    pub const BUILDS_TO_AUTOMATION: &str = include_str!("../../../../config/rules/builds-to-automation.json");
    pub const TIMELINE_EVENTS: &str = include_str!("../../../../config/rules/events.json");

    fn structural(text: &str) -> StructuralRules {
        match RuleDocument::from_json(text).expect("shipped rules are valid") {
            RuleDocument::Structural(r) => r,
            RuleDocument::Events(_) => panic!("expected structural rules"),
        }
    }

    pub fn issues_to_cm() -> StructuralRules {
        structural(ISSUES_TO_CM)
    }

    pub fn builds_to_automation() -> StructuralRules {
        structural(BUILDS_TO_AUTOMATION)
    }

    pub fn timeline_events() -> EventRules {
        match RuleDocument::from_json(TIMELINE_EVENTS).expect("shipped rules are valid") {
            RuleDocument::Events(r) => r,
            RuleDocument::Structural(_) => panic!("expected event rules"),
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn shipped_documents_load() {
        assert_eq!(builtin::issues_to_cm().rules.len(), 2);
        assert_eq!(builtin::builds_to_automation().rules.len(), 4);
        assert_eq!(builtin::timeline_events().rules.len(), 3);
    }

    #[test]
    fn table_must_be_invertible() {
        let doc = r#"{"kind":"structural","name":"m","id_rewrite":{"from":"a:","to":"b:"},
            "rules":[{"source_type":"urn:t:a","target_type":"urn:t:b",
            "keys":[{"source":"s","target":"t","transform":{"table":[["x","1"],["y","1"]]}}]}]}"#;
        assert!(matches!(RuleDocument::from_json(doc), Err(MappingError::InvalidRules(_))));
    }

    #[test]
    fn unknown_fields_and_kinds_are_rejected() {
        assert!(RuleDocument::from_json(r#"{"kind":"magic","name":"m"}"#).is_err());
        let doc = r#"{"kind":"events","name":"e","rules":[],"extra":1}"#;
        assert!(RuleDocument::from_json(doc).is_err());
    }

    #[test]
    fn transform_roundtrip() {
        let t = Transform::Table(vec![("To Do".into(), "Open".into()), ("Done".into(), "Closed".into())]);
        assert_eq!(t.forward(&Value::text("Done")), Some(Value::text("Closed")));
        assert_eq!(t.inverse(&Value::text("Open")), Some(Value::text("To Do")));
        assert_eq!(t.forward(&Value::text("Blocked")), None);
        assert_eq!(t.forward(&Value::Integer(1)), None);
    }

    #[test]
    fn templates() {
        let lookup = |k: &str| match k {
            "a" => Some(Value::text("x")),
            "n" => Some(Value::Integer(3)),
            _ => None,
        };
        assert_eq!(render_template("{a} #{n}", lookup), "x #3");
        assert_eq!(render_template("{missing}!", lookup), "!");
        assert_eq!(render_template("open {", lookup), "open {");
    }
}
