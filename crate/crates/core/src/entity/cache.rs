use std::collections::HashMap;
use std::sync::Arc;
use std::time::Duration;

use parking_lot::Mutex;

use super::{
    Capabilities, Entity, EntityError, EntityRef, Observer, OriginToken, PropertyKey, Subscription, Uri, Value,
};
use crate::clock::{SharedClock, SystemClock};

/// Read-through cache in front of a potentially slow entity.
///
/// A read of a key within `ttl` of the previous read of that key is answered
/// from memory. Writes go straight to the wrapped entity and invalidate the
/// key; change events from the wrapped entity invalidate too. A zero `ttl`
/// disables memoization entirely.
pub struct CachedEntity {
    inner: EntityRef,
    ttl: Duration,
    clock: SharedClock,
    state: Arc<Mutex<CacheState>>,
    _invalidation: Option<Subscription>,
}

#[derive(Default)]
struct CacheState {
    values: HashMap<String, (Duration, Option<Value>)>,
    listing: Option<(Duration, Vec<(PropertyKey, Value)>)>,
}

impl CacheState {
    fn invalidate(&mut self, key: &str) {
        self.values.remove(key);
        self.listing = None;
    }
}

impl CachedEntity {
    pub fn new(inner: EntityRef, ttl: Duration) -> Arc<Self> {
        Self::with_clock(inner, ttl, SystemClock::shared())
    }

    pub fn with_clock(inner: EntityRef, ttl: Duration, clock: SharedClock) -> Arc<Self> {
        let state = Arc::new(Mutex::new(CacheState::default()));
        let invalidation = if inner.capabilities().observable && !ttl.is_zero() {
            let weak = Arc::downgrade(&state);
            inner
                .observe(Arc::new(move |event| {
                    if let Some(state) = weak.upgrade() {
                        state.lock().invalidate(event.key.as_str());
                    }
                }))
                .ok()
        } else {
            None
        };
        Arc::new(CachedEntity { inner, ttl, clock, state, _invalidation: invalidation })
    }

    pub fn inner(&self) -> &EntityRef {
        &self.inner
    }

    fn fresh(&self, at: Duration) -> bool {
        self.clock.elapsed().saturating_sub(at) < self.ttl
    }
}

impl Entity for CachedEntity {
    fn id(&self) -> &Uri {
        self.inner.id()
    }

    fn entity_type(&self) -> &Uri {
        self.inner.entity_type()
    }

    fn capabilities(&self) -> Capabilities {
        self.inner.capabilities()
    }

    fn get(&self, key: &str) -> Option<Value> {
        if self.ttl.is_zero() {
            return self.inner.get(key);
        }
        if let Some((at, value)) = self.state.lock().values.get(key) {
            if self.fresh(*at) {
                return value.clone();
            }
        }
        let value = self.inner.get(key);
        self.state.lock().values.insert(key.to_owned(), (self.clock.elapsed(), value.clone()));
        value
    }

    fn properties(&self) -> Vec<(PropertyKey, Value)> {
        if self.ttl.is_zero() {
            return self.inner.properties();
        }
        if let Some((at, listing)) = &self.state.lock().listing {
            if self.fresh(*at) {
                return listing.clone();
            }
        }
        let listing = self.inner.properties();
        self.state.lock().listing = Some((self.clock.elapsed(), listing.clone()));
        listing
    }

    fn set(&self, key: &str, value: Value, origin: &OriginToken) -> Result<(), EntityError> {
        let result = self.inner.set(key, value, origin);
        self.state.lock().invalidate(key);
        result
    }

    fn remove(&self, key: &str, origin: &OriginToken) -> Result<(), EntityError> {
        let result = self.inner.remove(key, origin);
        self.state.lock().invalidate(key);
        result
    }

    fn observe(&self, observer: Observer) -> Result<Subscription, EntityError> {
        self.inner.observe(observer)
    }
}
