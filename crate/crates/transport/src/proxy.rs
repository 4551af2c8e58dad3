//! Client-side proxies for entities served by the other side of a session.

use std::collections::HashMap;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Weak};

use crossbeam_channel::RecvTimeoutError;
use opendip_core::entity::{Notifier, Observer};
use opendip_core::{
    Capabilities, ChangeEvent, Entity, EntityError, EntityKey, EntityRef, OriginToken, PropertyKey, Subscription, Uri,
    Value,
};
use parking_lot::Mutex;

use crate::export::wire_value;
use crate::message::{ErrorCode, WireError, WireEvent, WireMessage, WireNode, WireValue};
use crate::session::SessionInner;

/// A remote entity. Reads are served from state pushed by the other side;
/// writes travel as SET and return once the other side has answered.
///
/// Proxies are always observable. Entities the other side cannot observe
/// are re-read on every access instead.
pub struct RemoteEntity {
    id: Uri,
    entity_type: Uri,
    caps: Mutex<Capabilities>,
    /// `None` until the content has arrived.
    state: Mutex<Option<Vec<(PropertyKey, Value)>>>,
    notifier: Arc<Notifier>,
    session: Weak<SessionInner>,
}

impl RemoteEntity {
    fn new(key: EntityKey, caps: Capabilities, session: Weak<SessionInner>) -> Arc<Self> {
        Arc::new(RemoteEntity {
            id: key.id,
            entity_type: key.entity_type,
            caps: Mutex::new(caps),
            state: Mutex::new(None),
            notifier: Notifier::new(),
            session,
        })
    }

    /// Whether the content has been received.
    pub fn is_loaded(&self) -> bool {
        self.state.lock().is_some()
    }

    /// Loads the content on first use. Non-observable entities are reloaded
    /// on every read since no changes are pushed for them.
    fn ensure_loaded(&self) {
        let needs_load = self.state.lock().is_none() || !self.caps.lock().observable;
        if !needs_load {
            return;
        }
        let Some(session) = self.session.upgrade() else { return };
        if session.on_io_thread() || session.is_closed() {
            return;
        }
        session.send(WireMessage::Subscribe { target: self.key(), include_descendants: false });
        if let Err(e) = session.barrier() {
            tracing::debug!(entity = %self.key(), error = %e, "remote load failed");
        }
    }

    fn write(&self, key: &str, value: Option<Value>, origin: &OriginToken) -> Result<(), EntityError> {
        PropertyKey::new(key)?;
        if !self.caps.lock().changeable {
            return Err(EntityError::NotChangeable);
        }
        let session = self.session.upgrade().ok_or_else(shutdown)?;
        if session.is_closed() {
            return Err(shutdown());
        }
        let importer = &session.importer;
        let correlation = importer.next_correlation.fetch_add(1, Ordering::Relaxed) + 1;
        let msg = WireMessage::Set {
            correlation,
            target: self.key(),
            key: key.to_owned(),
            value: value.as_ref().map(wire_value),
            origin: origin.to_string(),
        };
        if session.on_io_thread() {
            // an observer writing back from inside delivery cannot wait for
            // the answer without stalling the session
            session.send(msg);
            return Ok(());
        }
        let (tx, rx) = crossbeam_channel::bounded(1);
        importer.set_waiters.lock().insert(correlation, tx);
        session.send(msg);
        let result = rx.recv_timeout(session.config.request_timeout);
        importer.set_waiters.lock().remove(&correlation);
        match result {
            Ok(Ok(())) => Ok(()),
            Ok(Err(WireError { code: ErrorCode::NotChangeable, .. })) => Err(EntityError::NotChangeable),
            Ok(Err(e)) => Err(EntityError::Remote { code: e.code.to_string(), detail: e.detail }),
            Err(RecvTimeoutError::Timeout) => Err(EntityError::Remote {
                code: "timeout".into(),
                detail: format!("no answer within {:?}", session.config.request_timeout),
            }),
            Err(RecvTimeoutError::Disconnected) => Err(shutdown()),
        }
    }
}

fn shutdown() -> EntityError {
    EntityError::Remote { code: ErrorCode::Shutdown.to_string(), detail: "session closed".into() }
}

impl Entity for RemoteEntity {
    fn id(&self) -> &Uri {
        &self.id
    }

    fn entity_type(&self) -> &Uri {
        &self.entity_type
    }

    fn capabilities(&self) -> Capabilities {
        Capabilities { observable: true, changeable: self.caps.lock().changeable }
    }

    fn get(&self, key: &str) -> Option<Value> {
        self.ensure_loaded();
        self.state.lock().as_ref()?.iter().find(|(k, _)| k.as_str() == key).map(|(_, v)| v.clone())
    }

    fn properties(&self) -> Vec<(PropertyKey, Value)> {
        self.ensure_loaded();
        self.state.lock().clone().unwrap_or_default()
    }

    fn set(&self, key: &str, value: Value, origin: &OriginToken) -> Result<(), EntityError> {
        self.write(key, Some(value), origin)
    }

    fn remove(&self, key: &str, origin: &OriginToken) -> Result<(), EntityError> {
        self.write(key, None, origin)
    }

    fn observe(&self, observer: Observer) -> Result<Subscription, EntityError> {
        self.ensure_loaded();
        Ok(self.notifier.subscribe(observer))
    }
}

impl std::fmt::Debug for RemoteEntity {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "RemoteEntity({})", self.key())
    }
}

#[derive(Default)]
pub(crate) struct Importer {
    proxies: Mutex<HashMap<EntityKey, Arc<RemoteEntity>>>,
    /// ROOT_ANNOUNCE results; `None` is the registry.
    pub(crate) announced: Mutex<HashMap<Option<String>, EntityKey>>,
    pub(crate) errors: Mutex<Vec<WireError>>,
    pub(crate) set_waiters: Mutex<HashMap<u64, crossbeam_channel::Sender<Result<(), WireError>>>>,
    next_correlation: AtomicU64,
    change_high_water: AtomicU64,
}

impl Importer {
    pub(crate) fn proxy(&self, session: &Arc<SessionInner>, key: &EntityKey) -> Arc<RemoteEntity> {
        self.proxies
            .lock()
            .entry(key.clone())
            .or_insert_with(|| RemoteEntity::new(key.clone(), Capabilities::READ_ONLY, Arc::downgrade(session)))
            .clone()
    }

    pub(crate) fn lookup(&self, key: &EntityKey) -> Option<Arc<RemoteEntity>> {
        self.proxies.lock().get(key).cloned()
    }

    fn value(&self, session: &Arc<SessionInner>, v: WireValue) -> Value {
        match v {
            WireValue::Text(s) => Value::Text(s),
            WireValue::Int(i) => Value::Integer(i),
            WireValue::Bytes(b) => Value::Bytes(b),
            WireValue::Ref(k) => Value::Ref(self.proxy(session, &k) as EntityRef),
        }
    }

    pub(crate) fn apply_state(&self, session: &Arc<SessionInner>, nodes: Vec<WireNode>) {
        for node in nodes {
            let proxy = self.proxy(session, &node.key());
            *proxy.caps.lock() = node.capabilities;
            // elided nodes never clear content received earlier
            if let Some(props) = node.properties {
                let mut state = Vec::with_capacity(props.len());
                for p in props {
                    match PropertyKey::new(p.key) {
                        Ok(k) => state.push((k, self.value(session, p.value))),
                        Err(e) => tracing::warn!(error = %e, "dropping property with invalid key"),
                    }
                }
                *proxy.state.lock() = Some(state);
            }
        }
    }

    pub(crate) fn apply_change(&self, session: &Arc<SessionInner>, correlation: u64, event: WireEvent) {
        if correlation <= self.change_high_water.load(Ordering::Acquire) {
            tracing::debug!(correlation, "dropping replayed change");
            return;
        }
        self.change_high_water.store(correlation, Ordering::Release);
        let Some(proxy) = self.lookup(&event.entity) else {
            tracing::debug!(entity = %event.entity, "change for unknown entity");
            return;
        };
        let (Ok(key), Ok(origin)) = (PropertyKey::new(event.key), OriginToken::new(event.origin)) else {
            return;
        };
        let old_value = event.old_value.map(|v| self.value(session, v));
        let new_value = event.new_value.map(|v| self.value(session, v));
        if let Some(state) = proxy.state.lock().as_mut() {
            let slot = state.iter().position(|(k, _)| *k == key);
            match (&new_value, slot) {
                (Some(v), Some(i)) => state[i].1 = v.clone(),
                (Some(v), None) => state.push((key.clone(), v.clone())),
                (None, Some(i)) => {
                    state.remove(i);
                }
                (None, None) => {}
            }
        }
        proxy.notifier.notify(ChangeEvent {
            entity: event.entity,
            key,
            kind: event.kind.into(),
            old_value,
            new_value,
            origin,
        });
    }

    pub(crate) fn complete_set(&self, correlation: u64, outcome: Result<(), WireError>) {
        if let Some(tx) = self.set_waiters.lock().remove(&correlation) {
            let _ = tx.send(outcome);
        } else if let Err(e) = outcome {
            tracing::warn!(correlation, code = %e.code, detail = %e.detail, "remote write failed");
        }
    }

    pub(crate) fn fail_pending(&self) {
        self.set_waiters.lock().clear();
    }
}
