//! Serving local entities to the other side of a session.

use std::collections::{HashMap, HashSet, VecDeque};
use std::sync::{Arc, Weak};

use opendip_core::entity::{Observer, SnapshotValue};
use opendip_core::registry::ModelRegistry;
use opendip_core::{
    Capabilities, ChangeEvent, Entity, EntityError, EntityKey, EntityRef, OriginToken, PropertyKey, Snapshot,
    Subscription, Uri, Value,
};
use parking_lot::Mutex;

use crate::message::{ErrorCode, WireError, WireEvent, WireMessage, WireNode, WireProperty, WireValue};
use crate::policy::ExposurePolicy;
use crate::session::SessionInner;

struct Watched {
    // None for entities that cannot be observed
    _sub: Option<Subscription>,
    deep: bool,
}

#[derive(Default)]
struct EmitState {
    /// Events held back while a subscription's initial state is in flight.
    buffering: Option<Vec<ChangeEvent>>,
    correlation: u64,
}

#[derive(Default)]
pub(crate) struct Exporter {
    served: Mutex<HashMap<EntityKey, EntityRef>>,
    watched: Mutex<HashMap<EntityKey, Watched>>,
    /// Nodes whose content the peer has received.
    full: Mutex<HashSet<EntityKey>>,
    emit: Mutex<EmitState>,
    registry_view: Mutex<Option<EntityRef>>,
}

impl Exporter {
    pub(crate) fn clear(&self) {
        self.watched.lock().clear();
        self.served.lock().clear();
    }

    pub(crate) fn handle_registry_request(&self, session: &Arc<SessionInner>, model_uri: Option<String>) {
        let policy = &session.config.policy;
        let Some(registry) = session.config.registry.as_ref() else {
            session.send(WireMessage::error(ErrorCode::Forbidden, "this peer exports no registry"));
            return;
        };
        match model_uri {
            None => {
                if !policy.export_registry {
                    session.send(WireMessage::error(ErrorCode::Forbidden, "registry is not exported"));
                    return;
                }
                let view = self
                    .registry_view
                    .lock()
                    .get_or_insert_with(|| RegistryView::over(registry, policy.clone()))
                    .clone();
                let key = view.key();
                self.served.lock().insert(key.clone(), view);
                session.send(WireMessage::RootAnnounce { model_uri: None, root: key });
                for (uri, root) in registry.models() {
                    if policy.exports(uri.as_str()) {
                        self.announce(session, &uri, root);
                    }
                }
            }
            Some(uri) => {
                if !policy.exports(&uri) {
                    session.send(WireMessage::error(ErrorCode::Forbidden, format!("model {uri} is not exported")));
                    return;
                }
                let root = Uri::parse(uri.as_str()).ok().and_then(|u| registry.lookup_root(&u));
                match root {
                    Some(root) => self.announce(session, &Uri::parse(uri).expect("checked"), root),
                    None => session.send(WireMessage::error(ErrorCode::StaleTarget, format!("no model {uri}"))),
                }
            }
        }
    }

    fn announce(&self, session: &Arc<SessionInner>, uri: &Uri, root: EntityRef) {
        let key = root.key();
        self.served.lock().insert(key.clone(), root);
        session.send(WireMessage::RootAnnounce { model_uri: Some(uri.to_string()), root: key });
    }

    pub(crate) fn subscribe(&self, session: &Arc<SessionInner>, target: EntityKey, deep: bool) {
        let Some(entity) = self.served.lock().get(&target).cloned() else {
            session.send(WireMessage::error(ErrorCode::StaleTarget, format!("unknown entity {target}")));
            return;
        };
        self.emit.lock().buffering.get_or_insert_with(Vec::new);
        self.watch(session, &entity, deep);
        let (snapshot, refs) = Snapshot::capture_with_refs(&*entity, if deep { None } else { Some(1) });
        self.served.lock().extend(refs);
        let mut emit = self.emit.lock();
        let nodes = self.nodes_of(&snapshot, None);
        session.send(WireMessage::EntityState { nodes });
        for event in emit.buffering.take().unwrap_or_default() {
            self.emit_locked(session, &mut emit, &event);
        }
    }

    pub(crate) fn unsubscribe(&self, target: &EntityKey) {
        self.watched.lock().remove(target);
        self.full.lock().remove(target);
    }

    /// Wire nodes for a snapshot. With `only_new`, nodes the peer already has
    /// are skipped, except the snapshot root.
    fn nodes_of(&self, snapshot: &Snapshot, only_new: Option<&EntityKey>) -> Vec<WireNode> {
        let mut full = self.full.lock();
        let mut out = Vec::with_capacity(snapshot.node_count());
        for (key, node) in snapshot.nodes() {
            if only_new.is_some_and(|root| root != key && full.contains(key)) {
                continue;
            }
            if node.properties.is_some() {
                full.insert(key.clone());
            }
            out.push(WireNode {
                id: key.id.clone(),
                entity_type: key.entity_type.clone(),
                capabilities: node.capabilities,
                properties: node.properties.as_ref().map(|props| {
                    props.iter().map(|(k, v)| WireProperty { key: k.to_string(), value: snapshot_value(v) }).collect()
                }),
            });
        }
        out
    }

    fn watch(&self, session: &Arc<SessionInner>, start: &EntityRef, deep: bool) {
        let mut queue = VecDeque::from([start.clone()]);
        while let Some(entity) = queue.pop_front() {
            let key = entity.key();
            {
                let mut watched = self.watched.lock();
                match watched.get_mut(&key) {
                    Some(w) if w.deep || !deep => continue,
                    // upgrade a shallow watch and descend
                    Some(w) => w.deep = true,
                    None => {
                        drop(watched);
                        let sub = if entity.capabilities().observable {
                            let weak: Weak<SessionInner> = Arc::downgrade(session);
                            let observer: Observer = Arc::new(move |event: &ChangeEvent| {
                                if let Some(session) = weak.upgrade() {
                                    session.exporter.on_event(&session, event);
                                }
                            });
                            entity.observe(observer).ok()
                        } else {
                            None
                        };
                        let mut watched = self.watched.lock();
                        if watched.contains_key(&key) {
                            continue;
                        }
                        watched.insert(key.clone(), Watched { _sub: sub, deep });
                    }
                }
            }
            self.served.lock().insert(key, entity.clone());
            if deep {
                for (_, v) in entity.properties() {
                    if let Value::Ref(child) = v {
                        queue.push_back(child);
                    }
                }
            }
        }
    }

    fn on_event(&self, session: &Arc<SessionInner>, event: &ChangeEvent) {
        if session.is_closed() {
            return;
        }
        let deep = self.watched.lock().get(&event.entity).map(|w| w.deep);
        let Some(deep) = deep else { return };
        if let Some(Value::Ref(child)) = &event.new_value {
            self.served.lock().insert(child.key(), child.clone());
            if deep {
                self.watch(session, child, true);
            }
        }
        let mut emit = self.emit.lock();
        match &mut emit.buffering {
            Some(buf) => buf.push(event.clone()),
            None => self.emit_locked(session, &mut emit, event),
        }
    }

    fn emit_locked(&self, session: &Arc<SessionInner>, emit: &mut EmitState, event: &ChangeEvent) {
        if let Some(Value::Ref(child)) = &event.new_value {
            let key = child.key();
            if !self.full.lock().contains(&key) {
                let deep = self.watched.lock().get(&event.entity).is_some_and(|w| w.deep);
                let (snapshot, refs) = Snapshot::capture_with_refs(&**child, if deep { None } else { Some(0) });
                self.served.lock().extend(refs);
                let nodes = self.nodes_of(&snapshot, Some(&key));
                session.send(WireMessage::EntityState { nodes });
            }
        }
        emit.correlation += 1;
        session.send(WireMessage::Change { correlation: emit.correlation, event: wire_event(event) });
    }

    pub(crate) fn handle_set(
        &self,
        session: &Arc<SessionInner>,
        correlation: u64,
        target: EntityKey,
        key: String,
        value: Option<WireValue>,
        origin: String,
    ) {
        let outcome = self.apply_set(&target, &key, value, &origin);
        session.send(WireMessage::SetResult { correlation, outcome });
    }

    fn apply_set(
        &self,
        target: &EntityKey,
        key: &str,
        value: Option<WireValue>,
        origin: &str,
    ) -> Result<(), WireError> {
        let stale = |k: &EntityKey| WireError { code: ErrorCode::StaleTarget, detail: format!("unknown entity {k}") };
        let entity = self.served.lock().get(target).cloned().ok_or_else(|| stale(target))?;
        let origin = OriginToken::new(origin).map_err(rejected)?;
        let value = match value {
            None => None,
            Some(WireValue::Ref(k)) => Some(Value::Ref(self.served.lock().get(&k).cloned().ok_or_else(|| stale(&k))?)),
            Some(WireValue::Text(s)) => Some(Value::Text(s)),
            Some(WireValue::Int(i)) => Some(Value::Integer(i)),
            Some(WireValue::Bytes(b)) => Some(Value::Bytes(b)),
        };
        match value {
            Some(v) => entity.set(key, v, &origin),
            None => entity.remove(key, &origin),
        }
        .map_err(rejected)
    }
}

fn rejected(e: EntityError) -> WireError {
    let code = match e {
        EntityError::NotChangeable => ErrorCode::NotChangeable,
        _ => ErrorCode::Rejected,
    };
    WireError { code, detail: e.to_string() }
}

fn snapshot_value(v: &SnapshotValue) -> WireValue {
    match v {
        SnapshotValue::Text(s) => WireValue::Text(s.clone()),
        SnapshotValue::Integer(i) => WireValue::Int(*i),
        SnapshotValue::Bytes(b) => WireValue::Bytes(b.clone()),
        SnapshotValue::Ref(k) => WireValue::Ref(k.clone()),
    }
}

pub(crate) fn wire_value(v: &Value) -> WireValue {
    match v {
        Value::Text(s) => WireValue::Text(s.clone()),
        Value::Integer(i) => WireValue::Int(*i),
        Value::Bytes(b) => WireValue::Bytes(b.clone()),
        Value::Ref(e) => WireValue::Ref(e.key()),
    }
}

fn wire_event(e: &ChangeEvent) -> WireEvent {
    WireEvent {
        entity: e.entity.clone(),
        key: e.key.to_string(),
        kind: e.kind.into(),
        old_value: e.old_value.as_ref().map(wire_value),
        new_value: e.new_value.as_ref().map(wire_value),
        origin: e.origin.to_string(),
    }
}

/// Read-only view of the registry that hides models outside the policy.
struct RegistryView {
    inner: EntityRef,
    policy: ExposurePolicy,
}

impl RegistryView {
    fn over(registry: &ModelRegistry, policy: ExposurePolicy) -> EntityRef {
        Arc::new(RegistryView { inner: registry.entity(), policy })
    }
}

impl Entity for RegistryView {
    fn id(&self) -> &Uri {
        self.inner.id()
    }

    fn entity_type(&self) -> &Uri {
        self.inner.entity_type()
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities::OBSERVABLE
    }

    fn get(&self, key: &str) -> Option<Value> {
        self.policy.exports(key).then(|| self.inner.get(key)).flatten()
    }

    fn properties(&self) -> Vec<(PropertyKey, Value)> {
        self.inner.properties().into_iter().filter(|(k, _)| self.policy.exports(k.as_str())).collect()
    }

    fn set(&self, _: &str, _: Value, _: &OriginToken) -> Result<(), EntityError> {
        Err(EntityError::NotChangeable)
    }

    fn remove(&self, _: &str, _: &OriginToken) -> Result<(), EntityError> {
        Err(EntityError::NotChangeable)
    }

    fn observe(&self, observer: Observer) -> Result<Subscription, EntityError> {
        let policy = self.policy.clone();
        self.inner.observe(Arc::new(move |e: &ChangeEvent| {
            if policy.exports(e.key.as_str()) {
                observer(e);
            }
        }))
    }
}
