//! Wire messages, independent of encoding.

use std::fmt;

use opendip_core::{Capabilities, ChangeKind, EntityKey};
use serde::{Deserialize, Serialize};

pub const PROTOCOL_VERSION: u32 = 1;

/// A property value on the wire. References travel as `(id, type)` keys.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "t", content = "v", rename_all = "lowercase")]
pub enum WireValue {
    Text(String),
    Int(i64),
    Bytes(#[serde(with = "base64_bytes")] Vec<u8>),
    Ref(EntityKey),
}

mod base64_bytes {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(bytes: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(bytes))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        let text = String::deserialize(d)?;
        STANDARD.decode(text.as_bytes()).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum WireKind {
    Added,
    Updated,
    Removed,
}

impl From<ChangeKind> for WireKind {
    fn from(k: ChangeKind) -> Self {
        match k {
            ChangeKind::Added => WireKind::Added,
            ChangeKind::Updated => WireKind::Updated,
            ChangeKind::Removed => WireKind::Removed,
        }
    }
}

impl From<WireKind> for ChangeKind {
    fn from(k: WireKind) -> Self {
        match k {
            WireKind::Added => ChangeKind::Added,
            WireKind::Updated => ChangeKind::Updated,
            WireKind::Removed => ChangeKind::Removed,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireProperty {
    pub key: String,
    pub value: WireValue,
}

/// One node of an entity state transfer.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireNode {
    pub id: opendip_core::Uri,
    #[serde(rename = "type")]
    pub entity_type: opendip_core::Uri,
    pub capabilities: Capabilities,
    /// `None` when the sender elided the node's content.
    pub properties: Option<Vec<WireProperty>>,
}

impl WireNode {
    pub fn key(&self) -> EntityKey {
        EntityKey::new(self.id.clone(), self.entity_type.clone())
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireEvent {
    pub entity: EntityKey,
    pub key: String,
    pub kind: WireKind,
    pub old_value: Option<WireValue>,
    pub new_value: Option<WireValue>,
    pub origin: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum ErrorCode {
    /// The model or entity is not exported to this peer.
    Forbidden,
    /// The entity named in a request is unknown to the receiver.
    StaleTarget,
    /// Malformed or unexpected message.
    Protocol,
    VersionMismatch,
    /// The peer is going away.
    Shutdown,
    /// The target entity is not changeable.
    NotChangeable,
    /// The entity rejected a write for another reason.
    Rejected,
    /// Codes this implementation does not know.
    Other(String),
}

impl ErrorCode {
    pub fn as_str(&self) -> &str {
        match self {
            ErrorCode::Forbidden => "forbidden",
            ErrorCode::StaleTarget => "stale-target",
            ErrorCode::Protocol => "protocol",
            ErrorCode::VersionMismatch => "version-mismatch",
            ErrorCode::Shutdown => "shutdown",
            ErrorCode::NotChangeable => "not-changeable",
            ErrorCode::Rejected => "rejected",
            ErrorCode::Other(s) => s,
        }
    }

    pub fn parse(s: &str) -> ErrorCode {
        match s {
            "forbidden" => ErrorCode::Forbidden,
            "stale-target" => ErrorCode::StaleTarget,
            "protocol" => ErrorCode::Protocol,
            "version-mismatch" => ErrorCode::VersionMismatch,
            "shutdown" => ErrorCode::Shutdown,
            "not-changeable" => ErrorCode::NotChangeable,
            "rejected" => ErrorCode::Rejected,
            other => ErrorCode::Other(other.to_owned()),
        }
    }
}

impl fmt::Display for ErrorCode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl Serialize for ErrorCode {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(self.as_str())
    }
}

impl<'de> Deserialize<'de> for ErrorCode {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        Ok(ErrorCode::parse(&String::deserialize(d)?))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct WireError {
    pub code: ErrorCode,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "SCREAMING_SNAKE_CASE")]
pub enum WireMessage {
    Hello {
        version: u32,
        peer_name: String,
    },
    /// Without `model_uri`: announce the registry and every exported model.
    RegistryRequest {
        #[serde(default)]
        model_uri: Option<String>,
    },
    /// `model_uri` is absent when `root` is the registry itself.
    RootAnnounce {
        model_uri: Option<String>,
        root: EntityKey,
    },
    Subscribe {
        target: EntityKey,
        #[serde(default = "yes")]
        include_descendants: bool,
    },
    Unsubscribe {
        target: EntityKey,
    },
    /// Nodes in discovery order, subscription root first.
    EntityState {
        nodes: Vec<WireNode>,
    },
    Change {
        correlation: u64,
        event: WireEvent,
    },
    /// `value: null` removes the property.
    Set {
        correlation: u64,
        target: EntityKey,
        key: String,
        value: Option<WireValue>,
        origin: String,
    },
    SetResult {
        correlation: u64,
        #[serde(with = "set_outcome", flatten)]
        outcome: Result<(), WireError>,
    },
    Error {
        code: ErrorCode,
        detail: String,
    },
    Ping {
        nonce: u64,
    },
    Pong {
        nonce: u64,
    },
}

fn yes() -> bool {
    true
}

/// `{"ok": true}` or `{"ok": false, "error": {...}}`.
mod set_outcome {
    use serde::{Deserialize, Deserializer, Serialize, Serializer};

    use super::WireError;

    #[derive(Serialize, Deserialize)]
    struct Outcome {
        ok: bool,
        #[serde(default, skip_serializing_if = "Option::is_none")]
        error: Option<WireError>,
    }

    pub fn serialize<S: Serializer>(r: &Result<(), WireError>, s: S) -> Result<S::Ok, S::Error> {
        match r {
            Ok(()) => Outcome { ok: true, error: None },
            Err(e) => Outcome { ok: false, error: Some(e.clone()) },
        }
        .serialize(s)
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Result<(), WireError>, D::Error> {
        let o = Outcome::deserialize(d)?;
        match (o.ok, o.error) {
            (true, None) => Ok(Ok(())),
            (false, Some(e)) => Ok(Err(e)),
            (true, Some(_)) => Err(serde::de::Error::custom("ok result carries an error")),
            (false, None) => Err(serde::de::Error::custom("failed result without error")),
        }
    }
}

impl WireMessage {
    pub fn name(&self) -> &'static str {
        match self {
            WireMessage::Hello { .. } => "HELLO",
            WireMessage::RegistryRequest { .. } => "REGISTRY_REQUEST",
            WireMessage::RootAnnounce { .. } => "ROOT_ANNOUNCE",
            WireMessage::Subscribe { .. } => "SUBSCRIBE",
            WireMessage::Unsubscribe { .. } => "UNSUBSCRIBE",
            WireMessage::EntityState { .. } => "ENTITY_STATE",
            WireMessage::Change { .. } => "CHANGE",
            WireMessage::Set { .. } => "SET",
            WireMessage::SetResult { .. } => "SET_RESULT",
            WireMessage::Error { .. } => "ERROR",
            WireMessage::Ping { .. } => "PING",
            WireMessage::Pong { .. } => "PONG",
        }
    }

    pub fn error(code: ErrorCode, detail: impl Into<String>) -> Self {
        WireMessage::Error { code, detail: detail.into() }
    }

    /// Semantic checks shared by both codecs.
    pub fn validate(&self) -> Result<(), String> {
        let non_empty = |what: &str, s: &str| if s.is_empty() { Err(format!("empty {what}")) } else { Ok(()) };
        match self {
            WireMessage::EntityState { nodes } => {
                if nodes.is_empty() {
                    return Err("ENTITY_STATE without nodes".into());
                }
                for n in nodes {
                    for p in n.properties.iter().flatten() {
                        non_empty("property key", &p.key)?;
                    }
                }
                Ok(())
            }
            WireMessage::Change { event, .. } => {
                non_empty("property key", &event.key)?;
                non_empty("origin", &event.origin)?;
                let shape_ok = match event.kind {
                    WireKind::Added => event.old_value.is_none() && event.new_value.is_some(),
                    WireKind::Updated => {
                        event.old_value.is_some() && event.new_value.is_some() && event.old_value != event.new_value
                    }
                    WireKind::Removed => event.old_value.is_some() && event.new_value.is_none(),
                };
                if shape_ok {
                    Ok(())
                } else {
                    Err(format!("{:?} event with inconsistent values", event.kind))
                }
            }
            WireMessage::Set { key, origin, .. } => {
                non_empty("property key", key)?;
                non_empty("origin", origin)
            }
            WireMessage::RegistryRequest { model_uri: Some(u) }
            | WireMessage::RootAnnounce { model_uri: Some(u), .. } => {
                opendip_core::Uri::parse(u.as_str()).map(|_| ()).map_err(|e| e.to_string())
            }
            _ => Ok(()),
        }
    }
}
