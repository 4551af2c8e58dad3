//! Polling: turns snapshots of a non-notifying source into change events.

use std::sync::Arc;
use std::time::Duration;

use thiserror::Error;

use crate::entity::{ChangeEvent, Entity, EntityKey, OriginToken, PropertyKey, Snapshot, SnapshotValue, Value};

pub const DEFAULT_POLL_INTERVAL: Duration = Duration::from_millis(250);

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum PollError {
    #[error("snapshots are rooted at different entities: {previous} vs {current}")]
    RootMismatch { previous: EntityKey, current: EntityKey },
}

/// Events that turn `previous` into `current`.
///
/// Entities present in both snapshots get one event per differing property,
/// in the node and property order of `current`; removals come last.
/// Entities new in `current` produce no events of their own: they arrive as
/// the reference value of the property that introduced them.
pub fn poll_diff(
    previous: &Arc<Snapshot>,
    current: &Arc<Snapshot>,
    origin: &OriginToken,
) -> Result<Vec<ChangeEvent>, PollError> {
    if previous.root() != current.root() {
        return Err(PollError::RootMismatch { previous: previous.root().clone(), current: current.root().clone() });
    }
    let mut events = Vec::new();
    let mut removals = Vec::new();
    for (key, node) in current.nodes() {
        let Some(before) = previous.node(key) else { continue };
        let Some(now_props) = &node.properties else { continue };
        let empty = Vec::new();
        let before_props = before.properties.as_ref().unwrap_or(&empty);
        for (k, v) in now_props {
            let old = before_props.iter().find(|(bk, _)| bk == k).map(|(_, bv)| bv);
            if old == Some(v) {
                continue;
            }
            events.push(event(key, k, old.map(|o| resolve(previous, o)), Some(resolve(current, v)), origin));
        }
        for (k, v) in before_props {
            if !now_props.iter().any(|(nk, _)| nk == k) {
                removals.push(event(key, k, Some(resolve(previous, v)), None, origin));
            }
        }
    }
    events.extend(removals);
    Ok(events)
}

fn event(
    entity: &EntityKey,
    key: &PropertyKey,
    old_value: Option<Value>,
    new_value: Option<Value>,
    origin: &OriginToken,
) -> ChangeEvent {
    ChangeEvent::between(entity.clone(), key.clone(), old_value, new_value, origin.clone())
        .expect("only differing values are diffed")
}

fn resolve(snapshot: &Arc<Snapshot>, value: &SnapshotValue) -> Value {
    match value {
        SnapshotValue::Text(s) => Value::Text(s.clone()),
        SnapshotValue::Integer(i) => Value::Integer(*i),
        SnapshotValue::Bytes(b) => Value::Bytes(b.clone()),
        SnapshotValue::Ref(k) => Value::Ref(snapshot.entity(k).expect("snapshot refs resolve")),
    }
}

/// Keeps the last snapshot of a source and emits the diff on every tick.
pub struct PollingAdapter {
    interval: Duration,
    last: Arc<Snapshot>,
    origin: OriginToken,
}

impl PollingAdapter {
    pub fn new(initial: Snapshot, interval: Duration, origin: OriginToken) -> Self {
        PollingAdapter { interval, last: Arc::new(initial), origin }
    }

    pub fn for_entity(entity: &dyn Entity, interval: Duration, origin: OriginToken) -> Self {
        Self::new(Snapshot::capture(entity, None), interval, origin)
    }

    pub fn interval(&self) -> Duration {
        self.interval
    }

    pub fn last_snapshot(&self) -> &Arc<Snapshot> {
        &self.last
    }

    /// Diffs `current` against the last snapshot and makes it the new baseline.
    pub fn advance(&mut self, current: Snapshot) -> Result<Vec<ChangeEvent>, PollError> {
        let current = Arc::new(current);
        let events = poll_diff(&self.last, &current, &self.origin)?;
        self.last = current;
        Ok(events)
    }

    pub fn tick(&mut self, source: &dyn Entity) -> Result<Vec<ChangeEvent>, PollError> {
        self.advance(Snapshot::capture(source, None))
    }
}
