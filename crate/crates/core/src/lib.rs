//! Core of the integration platform: the observable entity meta model, the
//! model registry, bidirectional model mappers and tool connectors.

pub mod clock;
pub mod connectors;
pub mod entity;
pub mod mapping;
pub mod registry;

pub use entity::{
    deep_equal, observe_with, Capabilities, ChangeEvent, ChangeKind, Entity, EntityError, EntityKey, EntityRef,
    MemoryEntity, OriginToken, PropertyKey, Snapshot, Subscription, Uri, Value,
};
pub use registry::ModelRegistry;
