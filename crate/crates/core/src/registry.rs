//! The model registry: rendezvous point where modules publish the root
//! entities of their models and where others discover them.
//!
//! The registry is itself an entity (type `urn:opendip:type/registry`) whose
//! properties map model URIs to root references, so it can be browsed,
//! observed and mirrored like any other model.

use std::sync::Arc;

use crate::entity::{
    platform_id, platform_type, Entity, EntityError, EntityRef, MemoryEntity, OriginToken, PropertyKey, Uri, Value,
};

pub const REGISTRY_TYPE: &str = "urn:opendip:type/registry";

#[derive(Clone)]
pub struct ModelRegistry {
    name: String,
    entity: Arc<MemoryEntity>,
    origin: OriginToken,
}

impl ModelRegistry {
    /// Registry with id `urn:opendip:registry/<name>`.
    pub fn new(name: &str) -> Self {
        let entity = MemoryEntity::builder(platform_id("registry", name), platform_type("registry"))
            .validator(Arc::new(|key: &PropertyKey, value: Option<&Value>| {
                Uri::parse(key.as_str())
                    .map_err(|e| EntityError::InvalidValue(format!("registry keys are model URIs: {e}")))?;
                match value {
                    None | Some(Value::Ref(_)) => Ok(()),
                    Some(other) => Err(EntityError::InvalidValue(format!(
                        "registry values must be references, got {}",
                        other.kind_name()
                    ))),
                }
            }))
            .build();
        ModelRegistry {
            name: name.to_owned(),
            entity,
            origin: OriginToken::new(format!("registry:{name}")).expect("non-empty"),
        }
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    /// The backing entity, for browsing, observing and mirroring.
    pub fn entity(&self) -> EntityRef {
        self.entity.clone()
    }

    pub fn register_root(&self, model_uri: &Uri, root: EntityRef) {
        let key = PropertyKey::new(model_uri.as_str()).expect("URIs are non-empty");
        if let Some(event) = self.entity.apply(&key, Some(Value::Ref(root)), &self.origin) {
            tracing::info!(registry = %self.name, model = %model_uri, kind = event.kind.as_str(), "model registered");
        }
    }

    pub fn lookup_root(&self, model_uri: &Uri) -> Option<EntityRef> {
        match self.entity.get(model_uri.as_str())? {
            Value::Ref(root) => Some(root),
            _ => None,
        }
    }

    pub fn unregister_root(&self, model_uri: &Uri) {
        let key = PropertyKey::new(model_uri.as_str()).expect("URIs are non-empty");
        if self.entity.apply(&key, None, &self.origin).is_some() {
            tracing::info!(registry = %self.name, model = %model_uri, "model unregistered");
        }
    }

    /// Currently registered `(model URI, root)` pairs in registration order.
    pub fn models(&self) -> Vec<(Uri, EntityRef)> {
        self.entity
            .properties()
            .into_iter()
            .filter_map(|(k, v)| match v {
                Value::Ref(root) => Uri::parse(k.as_str()).ok().map(|u| (u, root)),
                _ => None,
            })
            .collect()
    }
}

impl std::fmt::Debug for ModelRegistry {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ModelRegistry")
            .field("name", &self.name)
            .field("models", &self.models().into_iter().map(|(u, _)| u).collect::<Vec<_>>())
            .finish()
    }
}

#[cfg(test)]
mod tests {
    use parking_lot::Mutex;

    use super::*;
    use crate::entity::{observe_with, ChangeEvent, ChangeKind};

    fn model(n: &str) -> EntityRef {
        MemoryEntity::new(platform_id(n, "root"), platform_type("root"))
    }

    fn uri(s: &str) -> Uri {
        Uri::parse(s).unwrap()
    }

    fn record(reg: &ModelRegistry) -> (crate::entity::Subscription, Arc<Mutex<Vec<ChangeEvent>>>) {
        let log = Arc::new(Mutex::new(Vec::new()));
        let l = log.clone();
        (observe_with(&*reg.entity(), move |e| l.lock().push(e.clone())).unwrap(), log)
    }

    #[test]
    fn register_lookup_same_root() {
        let reg = ModelRegistry::new("t");
        let root = model("a");
        reg.register_root(&uri("urn:opendip:model/a"), root.clone());
        let found = reg.lookup_root(&uri("urn:opendip:model/a")).unwrap();
        assert!(Arc::ptr_eq(&found, &root));
        assert!(reg.lookup_root(&uri("urn:opendip:model/zzz")).is_none());
    }

    #[test]
    fn reregister_emits_updated() {
        let reg = ModelRegistry::new("t");
        let (_s, log) = record(&reg);
        reg.register_root(&uri("urn:m:a"), model("a"));
        let second = model("b");
        reg.register_root(&uri("urn:m:a"), second.clone());
        let kinds: Vec<_> = log.lock().iter().map(|e| e.kind).collect();
        assert_eq!(kinds, [ChangeKind::Added, ChangeKind::Updated]);
        assert!(Arc::ptr_eq(&reg.lookup_root(&uri("urn:m:a")).unwrap(), &second));
    }

    #[test]
    fn unregister_absent_is_silent() {
        let reg = ModelRegistry::new("t");
        let (_s, log) = record(&reg);
        reg.unregister_root(&uri("urn:m:a"));
        assert!(log.lock().is_empty());
        reg.register_root(&uri("urn:m:a"), model("a"));
        reg.unregister_root(&uri("urn:m:a"));
        assert!(reg.lookup_root(&uri("urn:m:a")).is_none());
        assert_eq!(log.lock().last().unwrap().kind, ChangeKind::Removed);
    }

    #[test]
    fn raw_writes_must_keep_ref_invariant() {
        let reg = ModelRegistry::new("t");
        let o = OriginToken::new("outsider").unwrap();
        let e = reg.entity();
        assert!(matches!(e.set("urn:m:a", Value::Integer(1), &o), Err(EntityError::InvalidValue(_))));
        assert!(matches!(e.set("not a uri", Value::Ref(model("a")), &o), Err(EntityError::InvalidValue(_))));
        e.set("urn:m:a", Value::Ref(model("a")), &o).unwrap();
        assert_eq!(reg.models().len(), 1);
    }
}
