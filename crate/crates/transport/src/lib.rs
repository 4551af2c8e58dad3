//! Mirroring entity models between processes.
//!
//! A [`Peer`] is one end of a session over TCP or WebSocket. Each side can
//! export models from its registry and mirror the other side's as
//! [`RemoteEntity`] proxies. Messages are defined in [`message`] and encoded
//! with either [`Codec`].

pub mod binary;
pub mod codec;
pub mod connection;
mod export;
pub mod message;
pub mod policy;
mod proxy;
mod session;

pub use codec::{Codec, CodecError};
pub use connection::{Connection, Endpoint, TransportKind};
pub use message::{ErrorCode, WireMessage, PROTOCOL_VERSION};
pub use policy::ExposurePolicy;
pub use proxy::RemoteEntity;
pub use session::{Listener, Peer, PeerConfig};

#[derive(Debug, Clone, PartialEq, Eq, thiserror::Error)]
pub enum TransportError {
    #[error("cannot reach {endpoint}: {message}")]
    Connect { endpoint: String, message: String },
    #[error("i/o error: {0}")]
    Io(String),
    #[error("connection closed")]
    Closed,
    #[error("protocol error: {0}")]
    Protocol(String),
    #[error("protocol version mismatch: we speak {ours}, peer speaks {theirs}")]
    VersionMismatch { ours: u32, theirs: u32 },
    #[error("peer answered {code}: {detail}")]
    Remote { code: ErrorCode, detail: String },
    #[error("timed out waiting for {0}")]
    Timeout(&'static str),
    #[error("blocking request issued from the session thread")]
    OnSessionThread,
}
