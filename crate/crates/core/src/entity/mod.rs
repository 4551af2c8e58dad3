//! The entity meta model.
//!
//! An [`Entity`] is a URI-identified, URI-typed node holding keyed properties.
//! Property values are restricted to the four [`Value`] variants. Entities are
//! optionally observable (observers receive a [`ChangeEvent`] per effective
//! mutation) and optionally changeable from the outside.
//!
//! Everything else in the platform (registry, mappers, connectors, wire
//! mirroring) is built on this trait, so implementations must be safe to share
//! across threads.

mod cache;
mod memory;
mod notify;
mod snapshot;
mod watch;

use std::fmt;
use std::sync::Arc;

use thiserror::Error;

pub use cache::CachedEntity;
pub use memory::{MemoryEntity, WriteHook, WriteValidator};
pub use notify::{Notifier, Observer, Subscription};
pub use snapshot::{deep_equal, Browse, Snapshot, SnapshotEntity, SnapshotError, SnapshotNode, SnapshotValue};
pub use watch::DeepWatch;

/// Absolute URI used for entity ids and entity types.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct Uri(String);

impl Uri {
    pub fn parse(text: impl Into<String>) -> Result<Self, InvalidUri> {
        let text = text.into();
        let Some((scheme, rest)) = text.split_once(':') else {
            return Err(InvalidUri(text));
        };
        let mut chars = scheme.chars();
        let scheme_ok = chars.next().is_some_and(|c| c.is_ascii_alphabetic())
            && chars.all(|c| c.is_ascii_alphanumeric() || matches!(c, '+' | '-' | '.'));
        if !scheme_ok || rest.is_empty() || text.chars().any(char::is_whitespace) {
            return Err(InvalidUri(text));
        }
        Ok(Uri(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for Uri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl fmt::Debug for Uri {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "<{}>", self.0)
    }
}

impl TryFrom<String> for Uri {
    type Error = InvalidUri;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        Uri::parse(value)
    }
}

impl TryFrom<&str> for Uri {
    type Error = InvalidUri;

    fn try_from(value: &str) -> Result<Self, Self::Error> {
        Uri::parse(value)
    }
}

impl From<Uri> for String {
    fn from(uri: Uri) -> Self {
        uri.0
    }
}

impl std::str::FromStr for Uri {
    type Err = InvalidUri;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Uri::parse(s)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("invalid URI {0:?}: expected `scheme:rest` without whitespace")]
pub struct InvalidUri(pub String);

/// Identity of an entity: the `(id, type)` pair.
///
/// Two entities may share an id while describing different aspects of the
/// same thing; they are only the same entity if the type matches too.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord, serde::Serialize, serde::Deserialize)]
pub struct EntityKey {
    pub id: Uri,
    #[serde(rename = "type")]
    pub entity_type: Uri,
}

impl EntityKey {
    pub fn new(id: Uri, entity_type: Uri) -> Self {
        Self { id, entity_type }
    }
}

impl fmt::Debug for EntityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}@{}", self.id, self.entity_type)
    }
}

impl fmt::Display for EntityKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{} ({})", self.id, self.entity_type)
    }
}

/// Non-empty property key, unique within its entity.
#[derive(Clone, PartialEq, Eq, Hash, PartialOrd, Ord)]
pub struct PropertyKey(String);

impl PropertyKey {
    pub fn new(key: impl Into<String>) -> Result<Self, EntityError> {
        let key = key.into();
        if key.is_empty() {
            return Err(EntityError::InvalidKey);
        }
        Ok(PropertyKey(key))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Debug for PropertyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{:?}", self.0)
    }
}

impl fmt::Display for PropertyKey {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl std::borrow::Borrow<str> for PropertyKey {
    fn borrow(&self) -> &str {
        &self.0
    }
}

impl PartialEq<str> for PropertyKey {
    fn eq(&self, other: &str) -> bool {
        self.0 == other
    }
}

impl PartialEq<&str> for PropertyKey {
    fn eq(&self, other: &&str) -> bool {
        self.0 == *other
    }
}

/// Shared handle to any entity implementation.
pub type EntityRef = Arc<dyn Entity>;

/// A property value. There are exactly four shapes.
#[derive(Clone)]
pub enum Value {
    Text(String),
    Integer(i64),
    Bytes(Vec<u8>),
    Ref(EntityRef),
}

impl Value {
    pub fn text(s: impl Into<String>) -> Self {
        Value::Text(s.into())
    }

    pub fn as_text(&self) -> Option<&str> {
        match self {
            Value::Text(s) => Some(s),
            _ => None,
        }
    }

    pub fn as_integer(&self) -> Option<i64> {
        match self {
            Value::Integer(i) => Some(*i),
            _ => None,
        }
    }

    pub fn as_bytes(&self) -> Option<&[u8]> {
        match self {
            Value::Bytes(b) => Some(b),
            _ => None,
        }
    }

    pub fn as_entity(&self) -> Option<&EntityRef> {
        match self {
            Value::Ref(e) => Some(e),
            _ => None,
        }
    }

    pub fn kind_name(&self) -> &'static str {
        match self {
            Value::Text(_) => "text",
            Value::Integer(_) => "int",
            Value::Bytes(_) => "bytes",
            Value::Ref(_) => "ref",
        }
    }
}

/// Scalars compare by value; references compare by the referenced entity's
/// `(id, type)` identity, not by content.
impl PartialEq for Value {
    fn eq(&self, other: &Self) -> bool {
        match (self, other) {
            (Value::Text(a), Value::Text(b)) => a == b,
            (Value::Integer(a), Value::Integer(b)) => a == b,
            (Value::Bytes(a), Value::Bytes(b)) => a == b,
            (Value::Ref(a), Value::Ref(b)) => Arc::ptr_eq(a, b) || a.key() == b.key(),
            _ => false,
        }
    }
}

impl fmt::Debug for Value {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Value::Text(s) => write!(f, "Text({s:?})"),
            Value::Integer(i) => write!(f, "Integer({i})"),
            Value::Bytes(b) => write!(f, "Bytes({} bytes)", b.len()),
            Value::Ref(e) => write!(f, "Ref({:?})", e.key()),
        }
    }
}

impl From<&str> for Value {
    fn from(s: &str) -> Self {
        Value::Text(s.to_owned())
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

impl From<Vec<u8>> for Value {
    fn from(b: Vec<u8>) -> Self {
        Value::Bytes(b)
    }
}

impl From<EntityRef> for Value {
    fn from(e: EntityRef) -> Self {
        Value::Ref(e)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Default, serde::Serialize, serde::Deserialize)]
pub struct Capabilities {
    pub observable: bool,
    pub changeable: bool,
}

impl Capabilities {
    pub const READ_ONLY: Capabilities = Capabilities { observable: false, changeable: false };
    pub const OBSERVABLE: Capabilities = Capabilities { observable: true, changeable: false };
    pub const FULL: Capabilities = Capabilities { observable: true, changeable: true };
}

/// Identifies the subsystem that initiated a mutation.
///
/// Carried on every [`ChangeEvent`] so bidirectional propagators can drop
/// notifications caused by their own writes.
#[derive(Clone, PartialEq, Eq, Hash, serde::Serialize, serde::Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct OriginToken(String);

impl OriginToken {
    pub fn new(text: impl Into<String>) -> Result<Self, EntityError> {
        let text = text.into();
        if text.is_empty() {
            return Err(EntityError::InvalidOrigin);
        }
        Ok(OriginToken(text))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl TryFrom<String> for OriginToken {
    type Error = EntityError;

    fn try_from(value: String) -> Result<Self, Self::Error> {
        OriginToken::new(value)
    }
}

impl From<OriginToken> for String {
    fn from(o: OriginToken) -> Self {
        o.0
    }
}

impl fmt::Debug for OriginToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "origin:{}", self.0)
    }
}

impl fmt::Display for OriginToken {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChangeKind {
    Added,
    Updated,
    Removed,
}

impl ChangeKind {
    pub fn as_str(self) -> &'static str {
        match self {
            ChangeKind::Added => "added",
            ChangeKind::Updated => "updated",
            ChangeKind::Removed => "removed",
        }
    }
}

/// One property mutation on one entity.
#[derive(Debug, Clone, PartialEq)]
pub struct ChangeEvent {
    pub entity: EntityKey,
    pub key: PropertyKey,
    pub kind: ChangeKind,
    pub old_value: Option<Value>,
    pub new_value: Option<Value>,
    pub origin: OriginToken,
}

impl ChangeEvent {
    /// Builds the event describing the transition `old -> new`, or `None` when
    /// nothing changed.
    pub fn between(
        entity: EntityKey,
        key: PropertyKey,
        old_value: Option<Value>,
        new_value: Option<Value>,
        origin: OriginToken,
    ) -> Option<Self> {
        let kind = match (&old_value, &new_value) {
            (None, None) => return None,
            (None, Some(_)) => ChangeKind::Added,
            (Some(_), None) => ChangeKind::Removed,
            (Some(a), Some(b)) if a == b => return None,
            (Some(_), Some(_)) => ChangeKind::Updated,
        };
        Some(ChangeEvent { entity, key, kind, old_value, new_value, origin })
    }

    /// Checks the kind/value-presence invariant.
    pub fn is_well_formed(&self) -> bool {
        match self.kind {
            ChangeKind::Added => self.old_value.is_none() && self.new_value.is_some(),
            ChangeKind::Removed => self.old_value.is_some() && self.new_value.is_none(),
            ChangeKind::Updated => match (&self.old_value, &self.new_value) {
                (Some(a), Some(b)) => a != b,
                _ => false,
            },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum EntityError {
    #[error("entity is not changeable")]
    NotChangeable,
    #[error("entity is not observable")]
    NotObservable,
    #[error("property keys must be non-empty")]
    InvalidKey,
    #[error("origin tokens must be non-empty")]
    InvalidOrigin,
    #[error("invalid value: {0}")]
    InvalidValue(String),
    #[error("tool unavailable: {0}")]
    ToolUnavailable(String),
    #[error("remote write failed: {code}: {detail}")]
    Remote { code: String, detail: String },
    #[error("{0}")]
    Rejected(String),
}

/// The entity interface shared by every module.
///
/// `get` and `properties` never mutate. `set` and `remove` either apply the
/// mutation and notify every active observer once, or fail without changing
/// state.
pub trait Entity: Send + Sync {
    fn id(&self) -> &Uri;

    fn entity_type(&self) -> &Uri;

    fn capabilities(&self) -> Capabilities;

    fn get(&self, key: &str) -> Option<Value>;

    /// All properties, in insertion order.
    fn properties(&self) -> Vec<(PropertyKey, Value)>;

    fn set(&self, key: &str, value: Value, origin: &OriginToken) -> Result<(), EntityError>;

    fn remove(&self, key: &str, origin: &OriginToken) -> Result<(), EntityError>;

    fn observe(&self, observer: Observer) -> Result<Subscription, EntityError>;

    fn key(&self) -> EntityKey {
        EntityKey::new(self.id().clone(), self.entity_type().clone())
    }

    fn len(&self) -> usize {
        self.properties().len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

/// Convenience for registering a closure as observer.
pub fn observe_with<F>(entity: &dyn Entity, f: F) -> Result<Subscription, EntityError>
where
    F: Fn(&ChangeEvent) + Send + Sync + 'static,
{
    entity.observe(Arc::new(f))
}

/// `urn:opendip:<model>/<local-id>`
pub fn platform_id(model: &str, local: &str) -> Uri {
    Uri::parse(format!("urn:opendip:{model}/{local}")).expect("platform ids are well-formed")
}

/// `urn:opendip:type/<name>`
pub fn platform_type(name: &str) -> Uri {
    Uri::parse(format!("urn:opendip:type/{name}")).expect("platform types are well-formed")
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn uri_requires_scheme() {
        assert!(Uri::parse("urn:opendip:x/1").is_ok());
        assert!(Uri::parse("http://open-services.net/ns/cm#ChangeRequest").is_ok());
        assert!(Uri::parse("").is_err());
        assert!(Uri::parse("no-scheme").is_err());
        assert!(Uri::parse(":missing").is_err());
        assert!(Uri::parse("1abc:x").is_err());
        assert!(Uri::parse("urn:").is_err());
        assert!(Uri::parse("urn:has space").is_err());
    }

    #[test]
    fn change_event_between_classifies() {
        let key = EntityKey::new(platform_id("t", "1"), platform_type("t"));
        let k = PropertyKey::new("k").unwrap();
        let o = OriginToken::new("o").unwrap();
        assert!(ChangeEvent::between(key.clone(), k.clone(), None, None, o.clone()).is_none());
        let added = ChangeEvent::between(key.clone(), k.clone(), None, Some(1.into()), o.clone()).unwrap();
        assert_eq!(added.kind, ChangeKind::Added);
        assert!(added.is_well_formed());
        assert!(ChangeEvent::between(key.clone(), k.clone(), Some(1.into()), Some(1.into()), o.clone()).is_none());
        let removed = ChangeEvent::between(key, k, Some(1.into()), None, o).unwrap();
        assert_eq!(removed.kind, ChangeKind::Removed);
    }

    #[test]
    fn empty_key_and_origin_rejected() {
        assert_eq!(PropertyKey::new(""), Err(EntityError::InvalidKey));
        assert_eq!(OriginToken::new(""), Err(EntityError::InvalidOrigin));
    }
}
