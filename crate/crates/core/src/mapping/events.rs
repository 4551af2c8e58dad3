use std::collections::{HashMap, VecDeque};
use std::sync::{Arc, Weak};

use parking_lot::Mutex;

use super::vocab::{
    EVENT_KIND, EVENT_LOG_TYPE, EVENT_SOURCE_MODEL, EVENT_SUBJECT, EVENT_SUMMARY, EVENT_TIMESTAMP, EVENT_TYPE,
};
use super::{property_key, render_template, EventRule, EventRules, MappingError, Trigger};
use crate::clock::SharedClock;
use crate::entity::{
    platform_id, Capabilities, ChangeEvent, ChangeKind, DeepWatch, Entity, EntityKey, EntityRef, MemoryEntity,
    OriginToken, Uri, Value,
};

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct EventRecord {
    /// Epoch milliseconds.
    pub timestamp: i64,
    pub kind: String,
    pub summary: String,
    pub source_model: String,
    pub subject: Option<EntityKey>,
}

/// Append-only event model. The root holds `"0"`, `"1"`, ... references to
/// immutable event entities.
pub struct EventLog {
    model: String,
    root: Arc<MemoryEntity>,
    origin: OriginToken,
    clock: SharedClock,
    next: Mutex<u64>,
}

impl EventLog {
    /// Log with ids under `urn:opendip:events/`.
    pub fn new(clock: SharedClock) -> Arc<Self> {
        Self::with_model("events", clock)
    }

    pub fn with_model(model: &str, clock: SharedClock) -> Arc<Self> {
        let root = MemoryEntity::builder(platform_id(model, "root"), Uri::parse(EVENT_LOG_TYPE).expect("valid"))
            .capabilities(Capabilities::OBSERVABLE)
            .build();
        Arc::new(EventLog {
            model: model.to_owned(),
            root,
            origin: OriginToken::new(format!("events:{model}")).expect("non-empty"),
            clock,
            next: Mutex::new(0),
        })
    }

    pub fn root(&self) -> EntityRef {
        self.root.clone()
    }

    pub fn clock(&self) -> &SharedClock {
        &self.clock
    }

    pub fn len(&self) -> usize {
        *self.next.lock() as usize
    }

    pub fn is_empty(&self) -> bool {
        self.len() == 0
    }

    pub fn append(&self, record: EventRecord, subject: Option<EntityRef>) -> EntityRef {
        let event = self.append_deferred(record, subject);
        self.root.flush();
        event
    }

    fn append_deferred(&self, record: EventRecord, subject: Option<EntityRef>) -> EntityRef {
        let mut next = self.next.lock();
        let n = *next;
        *next += 1;
        let mut b =
            MemoryEntity::builder(platform_id(&self.model, &n.to_string()), Uri::parse(EVENT_TYPE).expect("valid"))
                .capabilities(Capabilities::OBSERVABLE)
                .property(EVENT_TIMESTAMP, record.timestamp)
                .property(EVENT_KIND, record.kind)
                .property(EVENT_SUMMARY, record.summary)
                .property(EVENT_SOURCE_MODEL, record.source_model);
        if let Some(s) = subject {
            b = b.property(EVENT_SUBJECT, Value::Ref(s));
        }
        let event: EntityRef = b.build();
        self.root.apply_deferred(&property_key(&n.to_string()), Some(Value::Ref(event.clone())), &self.origin);
        event
    }

    fn flush(&self) {
        self.root.flush();
    }

    /// All events in append order.
    pub fn records(&self) -> Vec<EventRecord> {
        self.root.properties().into_iter().filter_map(|(_, v)| v.as_entity().map(|e| read_record(&**e))).collect()
    }
}

/// Reads an event entity, from this process or mirrored from another.
pub fn read_record(event: &dyn Entity) -> EventRecord {
    let text = |k: &str| event.get(k).and_then(|v| v.as_text().map(str::to_owned)).unwrap_or_default();
    EventRecord {
        timestamp: event.get(EVENT_TIMESTAMP).and_then(|v| v.as_integer()).unwrap_or(0),
        kind: text(EVENT_KIND),
        summary: text(EVENT_SUMMARY),
        source_model: text(EVENT_SOURCE_MODEL),
        subject: event.get(EVENT_SUBJECT).and_then(|v| v.as_entity().map(|e| e.key())),
    }
}

/// Feeds one source model into an [`EventLog`].
pub struct EventMapper {
    inner: Arc<Inner>,
    watch: Mutex<Option<DeepWatch>>,
}

struct Inner {
    rules: EventRules,
    source_model: String,
    log: Arc<EventLog>,
    state: Mutex<State>,
}

#[derive(Default)]
struct State {
    // every entity seen so far; creation is reported once, on first sight
    known: HashMap<EntityKey, EntityRef>,
}

/// Starts feeding `log` from `source_root`. Entities already reachable are
/// reported as created right away.
pub fn derive_events(
    rules: EventRules,
    source_model: &Uri,
    source_root: EntityRef,
    log: Arc<EventLog>,
) -> Result<EventMapper, MappingError> {
    rules.validate()?;
    let inner = Arc::new(Inner {
        rules,
        source_model: source_model.as_str().to_owned(),
        log,
        state: Mutex::new(State::default()),
    });
    let mut state = inner.state.lock();
    let weak: Weak<Inner> = Arc::downgrade(&inner);
    let watch = DeepWatch::new(
        &source_root,
        Arc::new(move |event: &ChangeEvent| {
            if let Some(inner) = weak.upgrade() {
                inner.on_event(event);
            }
        }),
    );
    inner.scan(&mut state, &source_root);
    drop(state);
    inner.log.flush();
    Ok(EventMapper { inner, watch: Mutex::new(Some(watch)) })
}

impl Inner {
    fn on_event(&self, event: &ChangeEvent) {
        let mut state = self.state.lock();
        if let Some(Value::Ref(child)) = &event.new_value {
            self.scan(&mut state, child);
        }
        if event.kind == ChangeKind::Updated {
            for rule in &self.rules.rules {
                let hit = matches!(&rule.on, Trigger::Updated(k) if event.key == k.as_str())
                    && rule.source_type == event.entity.entity_type;
                if !hit {
                    continue;
                }
                let entity = state.known.get(&event.entity).cloned();
                let lookup = |k: &str| {
                    if event.key == k {
                        event.new_value.clone()
                    } else {
                        entity.as_ref().and_then(|e| e.get(k))
                    }
                };
                self.emit(rule, lookup, entity.clone(), &event.entity);
            }
        }
        drop(state);
        self.log.flush();
    }

    /// Reports creation of every not yet seen entity reachable from `start`.
    fn scan(&self, state: &mut State, start: &EntityRef) {
        let mut queue = VecDeque::from([start.clone()]);
        while let Some(entity) = queue.pop_front() {
            let key = entity.key();
            if state.known.contains_key(&key) {
                continue;
            }
            state.known.insert(key.clone(), entity.clone());
            let props = entity.properties();
            for rule in &self.rules.rules {
                if rule.on != Trigger::Created || rule.source_type != key.entity_type {
                    continue;
                }
                let lookup = |k: &str| props.iter().find(|(pk, _)| pk.as_str() == k).map(|(_, v)| v.clone());
                self.emit(rule, lookup, Some(entity.clone()), &key);
            }
            for (_, v) in props {
                if let Value::Ref(child) = v {
                    queue.push_back(child);
                }
            }
        }
    }

    fn emit(
        &self,
        rule: &EventRule,
        lookup: impl Fn(&str) -> Option<Value>,
        subject: Option<EntityRef>,
        key: &EntityKey,
    ) {
        let Some(kind) = rule.event_kind.resolve(&lookup) else {
            tracing::debug!(entity = %key.id, "event rule matched but no kind applies");
            return;
        };
        let timestamp = rule
            .timestamp
            .as_deref()
            .and_then(&lookup)
            .and_then(|v| v.as_integer())
            .unwrap_or_else(|| self.log.clock.epoch_ms());
        let record = EventRecord {
            timestamp,
            kind,
            summary: render_template(&rule.summary, &lookup),
            source_model: self.source_model.clone(),
            subject: Some(key.clone()),
        };
        tracing::debug!(kind = %record.kind, summary = %record.summary, "event derived");
        self.log.append_deferred(record, subject);
    }
}

impl EventMapper {
    pub fn name(&self) -> &str {
        &self.inner.rules.name
    }

    pub fn log(&self) -> &Arc<EventLog> {
        &self.inner.log
    }

    pub fn stop(&self) {
        if let Some(w) = self.watch.lock().take() {
            w.cancel();
        }
    }
}

impl Drop for EventMapper {
    fn drop(&mut self) {
        self.stop();
    }
}
