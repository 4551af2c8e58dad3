use std::sync::Arc;

use indexmap::IndexMap;
use parking_lot::Mutex;

use super::{
    Capabilities, ChangeEvent, Entity, EntityError, EntityKey, Notifier, Observer, OriginToken, PropertyKey,
    Subscription, Uri, Value,
};

/// Redirects outside writes (`set`/`remove`) to an owner, e.g. a model mapper
/// that forwards them to the source model. `None` means removal.
pub type WriteHook =
    Arc<dyn Fn(&EntityKey, &PropertyKey, Option<Value>, &OriginToken) -> Result<(), EntityError> + Send + Sync>;

/// Checked before an outside write is applied or forwarded.
pub type WriteValidator = Arc<dyn Fn(&PropertyKey, Option<&Value>) -> Result<(), EntityError> + Send + Sync>;

/// In-memory entity with insertion-ordered properties.
pub struct MemoryEntity {
    id: Uri,
    entity_type: Uri,
    caps: Capabilities,
    props: Mutex<IndexMap<PropertyKey, Value>>,
    notifier: Arc<Notifier>,
    hook: Option<WriteHook>,
    validator: Option<WriteValidator>,
}

impl MemoryEntity {
    /// Observable and changeable.
    pub fn new(id: Uri, entity_type: Uri) -> Arc<Self> {
        Self::builder(id, entity_type).build()
    }

    pub fn builder(id: Uri, entity_type: Uri) -> MemoryEntityBuilder {
        MemoryEntityBuilder {
            id,
            entity_type,
            caps: Capabilities::FULL,
            props: IndexMap::new(),
            hook: None,
            validator: None,
        }
    }

    /// Mutates state on behalf of the entity's owner, bypassing the capability
    /// check and any write hook. Observers are notified before returning.
    pub fn apply(&self, key: &PropertyKey, value: Option<Value>, origin: &OriginToken) -> Option<ChangeEvent> {
        let event = self.apply_deferred(key, value, origin);
        self.notifier.drain();
        event
    }

    /// Like [`apply`](Self::apply) but only queues the notification; call
    /// [`flush`](Self::flush) once no locks are held.
    pub fn apply_deferred(&self, key: &PropertyKey, value: Option<Value>, origin: &OriginToken) -> Option<ChangeEvent> {
        let mut props = self.props.lock();
        let old = props.get(key).cloned();
        let event = ChangeEvent::between(self.key(), key.clone(), old, value.clone(), origin.clone())?;
        match value {
            Some(v) => {
                props.insert(key.clone(), v);
            }
            None => {
                props.shift_remove(key);
            }
        }
        self.notifier.enqueue(event.clone());
        Some(event)
    }

    pub fn flush(&self) {
        self.notifier.drain();
    }

    pub fn notifier(&self) -> &Arc<Notifier> {
        &self.notifier
    }

    fn outside_write(&self, key: &str, value: Option<Value>, origin: &OriginToken) -> Result<(), EntityError> {
        if !self.caps.changeable {
            return Err(EntityError::NotChangeable);
        }
        let key = PropertyKey::new(key)?;
        if let Some(validate) = &self.validator {
            validate(&key, value.as_ref())?;
        }
        match &self.hook {
            Some(hook) => hook(&self.key(), &key, value, origin),
            None => {
                self.apply(&key, value, origin);
                Ok(())
            }
        }
    }
}

pub struct MemoryEntityBuilder {
    id: Uri,
    entity_type: Uri,
    caps: Capabilities,
    props: IndexMap<PropertyKey, Value>,
    hook: Option<WriteHook>,
    validator: Option<WriteValidator>,
}

impl MemoryEntityBuilder {
    pub fn capabilities(mut self, caps: Capabilities) -> Self {
        self.caps = caps;
        self
    }

    pub fn property(mut self, key: &str, value: impl Into<Value>) -> Self {
        let key = PropertyKey::new(key).expect("builder keys must be non-empty");
        self.props.insert(key, value.into());
        self
    }

    pub fn write_hook(mut self, hook: WriteHook) -> Self {
        self.hook = Some(hook);
        self
    }

    pub fn validator(mut self, validator: WriteValidator) -> Self {
        self.validator = Some(validator);
        self
    }

    pub fn build(self) -> Arc<MemoryEntity> {
        Arc::new(MemoryEntity {
            id: self.id,
            entity_type: self.entity_type,
            caps: self.caps,
            props: Mutex::new(self.props),
            notifier: Notifier::new(),
            hook: self.hook,
            validator: self.validator,
        })
    }
}

impl Entity for MemoryEntity {
    fn id(&self) -> &Uri {
        &self.id
    }

    fn entity_type(&self) -> &Uri {
        &self.entity_type
    }

    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn get(&self, key: &str) -> Option<Value> {
        self.props.lock().get(key).cloned()
    }

    fn properties(&self) -> Vec<(PropertyKey, Value)> {
        self.props.lock().iter().map(|(k, v)| (k.clone(), v.clone())).collect()
    }

    fn set(&self, key: &str, value: Value, origin: &OriginToken) -> Result<(), EntityError> {
        self.outside_write(key, Some(value), origin)
    }

    fn remove(&self, key: &str, origin: &OriginToken) -> Result<(), EntityError> {
        self.outside_write(key, None, origin)
    }

    fn observe(&self, observer: Observer) -> Result<Subscription, EntityError> {
        if !self.caps.observable {
            return Err(EntityError::NotObservable);
        }
        Ok(self.notifier.subscribe(observer))
    }

    fn len(&self) -> usize {
        self.props.lock().len()
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::entity::{observe_with, platform_id, platform_type, ChangeKind};

    fn origin() -> OriginToken {
        OriginToken::new("test").unwrap()
    }

    fn entity() -> Arc<MemoryEntity> {
        MemoryEntity::new(platform_id("t", "1"), platform_type("thing"))
    }

    fn recorder(e: &MemoryEntity) -> (Subscription, Arc<Mutex<Vec<ChangeEvent>>>) {
        let log = Arc::new(Mutex::new(Vec::new()));
        let l = log.clone();
        let sub = observe_with(e, move |ev| l.lock().push(ev.clone())).unwrap();
        (sub, log)
    }

    #[test]
    fn get_missing_is_absent() {
        assert!(entity().get("missing").is_none());
    }

    #[test]
    fn read_your_write() {
        let e = entity();
        e.set("k", Value::Integer(7), &origin()).unwrap();
        assert_eq!(e.get("k"), Some(Value::Integer(7)));
    }

    #[test]
    fn iterate_in_insertion_order() {
        let e = entity();
        assert!(e.properties().is_empty());
        for k in ["a", "b", "c"] {
            e.set(k, Value::text(k), &origin()).unwrap();
        }
        let keys: Vec<_> = e.properties().into_iter().map(|(k, _)| k.as_str().to_owned()).collect();
        assert_eq!(keys, ["a", "b", "c"]);
        // updating keeps position, removal closes the gap
        e.set("a", Value::text("A"), &origin()).unwrap();
        e.remove("b", &origin()).unwrap();
        let keys: Vec<_> = e.properties().into_iter().map(|(k, _)| k.as_str().to_owned()).collect();
        assert_eq!(keys, ["a", "c"]);
    }

    #[test]
    fn read_only_entity_rejects_writes_without_change() {
        let e = MemoryEntity::builder(platform_id("t", "1"), platform_type("thing"))
            .capabilities(Capabilities::OBSERVABLE)
            .property("k", 1)
            .build();
        let (_sub, log) = recorder(&e);
        assert_eq!(e.set("k", Value::Integer(2), &origin()), Err(EntityError::NotChangeable));
        assert_eq!(e.remove("k", &origin()), Err(EntityError::NotChangeable));
        assert_eq!(e.get("k"), Some(Value::Integer(1)));
        assert!(log.lock().is_empty());
    }

    #[test]
    fn fresh_key_emits_added_with_origin() {
        let e = entity();
        let (_sub, log) = recorder(&e);
        e.set("status", Value::text("done"), &origin()).unwrap();
        let log = log.lock();
        assert_eq!(log.len(), 1);
        assert_eq!(log[0].kind, ChangeKind::Added);
        assert_eq!(log[0].origin, origin());
    }

    #[test]
    fn same_value_twice_emits_once() {
        let e = entity();
        let (_sub, log) = recorder(&e);
        e.set("k", Value::text("v"), &origin()).unwrap();
        e.set("k", Value::text("v"), &origin()).unwrap();
        assert_eq!(log.lock().len(), 1);
    }

    #[test]
    fn remove_absent_is_silent_and_set_remove_ordered() {
        let e = entity();
        let (_sub, log) = recorder(&e);
        e.remove("nothing", &origin()).unwrap();
        assert!(log.lock().is_empty());
        e.set("k", Value::Integer(1), &origin()).unwrap();
        e.remove("k", &origin()).unwrap();
        let kinds: Vec<_> = log.lock().iter().map(|e| e.kind).collect();
        assert_eq!(kinds, [ChangeKind::Added, ChangeKind::Removed]);
        assert!(e.get("k").is_none());
    }

    #[test]
    fn observe_cancel_set_delivers_nothing() {
        let e = entity();
        let (sub, log) = recorder(&e);
        sub.cancel();
        e.set("k", Value::Integer(1), &origin()).unwrap();
        assert!(log.lock().is_empty());
    }

    #[test]
    fn two_observers_each_get_one() {
        let e = entity();
        let (_a, la) = recorder(&e);
        let (_b, lb) = recorder(&e);
        e.set("k", Value::Integer(1), &origin()).unwrap();
        assert_eq!(la.lock().len(), 1);
        assert_eq!(lb.lock().len(), 1);
    }

    #[test]
    fn unobservable_entity_refuses_observers() {
        let e = MemoryEntity::builder(platform_id("t", "1"), platform_type("thing"))
            .capabilities(Capabilities { observable: false, changeable: true })
            .build();
        assert!(matches!(e.observe(Arc::new(|_: &ChangeEvent| {})), Err(EntityError::NotObservable)));
    }

    #[test]
    fn empty_key_rejected() {
        assert_eq!(entity().set("", Value::Integer(1), &origin()), Err(EntityError::InvalidKey));
    }

    #[test]
    fn write_hook_receives_outside_writes() {
        let seen = Arc::new(Mutex::new(Vec::new()));
        let s = seen.clone();
        let e = MemoryEntity::builder(platform_id("t", "1"), platform_type("thing"))
            .write_hook(Arc::new(move |_, k, v, _| {
                s.lock().push((k.as_str().to_owned(), v));
                Ok(())
            }))
            .build();
        e.set("k", Value::Integer(3), &origin()).unwrap();
        // the hook owns the write; state is untouched until the owner applies
        assert!(e.get("k").is_none());
        assert_eq!(seen.lock().len(), 1);
    }
}
