use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};

use parking_lot::Mutex;

use super::{ChangeEvent, EntityKey, EntityRef, Observer, Subscription, Value};

/// Observes an entity and, transitively, every observable entity reachable
/// from it. Entities that become reachable later (a property is set to a
/// reference) are picked up before the event announcing them is forwarded.
pub struct DeepWatch {
    inner: Arc<WatchInner>,
}

struct WatchInner {
    callback: Observer,
    deep: bool,
    // None marks entities that were visited but cannot be observed
    subs: Mutex<HashMap<EntityKey, Option<Subscription>>>,
    closed: AtomicBool,
}

impl DeepWatch {
    pub fn new(root: &EntityRef, callback: Observer) -> DeepWatch {
        Self::build(root, callback, true)
    }

    /// Watches `root` only.
    pub fn shallow(root: &EntityRef, callback: Observer) -> DeepWatch {
        Self::build(root, callback, false)
    }

    fn build(root: &EntityRef, callback: Observer, deep: bool) -> DeepWatch {
        let inner =
            Arc::new(WatchInner { callback, deep, subs: Mutex::new(HashMap::new()), closed: AtomicBool::new(false) });
        attach(&inner, root);
        DeepWatch { inner }
    }

    pub fn is_watching(&self, key: &EntityKey) -> bool {
        matches!(self.inner.subs.lock().get(key), Some(Some(_)))
    }

    pub fn watched_count(&self) -> usize {
        self.inner.subs.lock().values().filter(|s| s.is_some()).count()
    }

    pub fn cancel(&self) {
        self.inner.closed.store(true, Ordering::Release);
        let subs = std::mem::take(&mut *self.inner.subs.lock());
        drop(subs);
    }
}

impl Drop for DeepWatch {
    fn drop(&mut self) {
        self.cancel();
    }
}

fn attach(inner: &Arc<WatchInner>, start: &EntityRef) {
    let mut queue = VecDeque::from([start.clone()]);
    while let Some(entity) = queue.pop_front() {
        if inner.closed.load(Ordering::Acquire) {
            return;
        }
        let key = entity.key();
        if inner.subs.lock().contains_key(&key) {
            continue;
        }
        let sub = if entity.capabilities().observable {
            let weak: Weak<WatchInner> = Arc::downgrade(inner);
            entity
                .observe(Arc::new(move |event: &ChangeEvent| {
                    if let Some(inner) = weak.upgrade() {
                        on_event(&inner, event);
                    }
                }))
                .ok()
        } else {
            None
        };
        // a concurrent attach may have won the race; keep the first
        let mut subs = inner.subs.lock();
        if subs.contains_key(&key) {
            continue;
        }
        subs.insert(key, sub);
        drop(subs);
        if inner.deep {
            for (_, value) in entity.properties() {
                if let Value::Ref(child) = value {
                    queue.push_back(child);
                }
            }
        }
    }
}

fn on_event(inner: &Arc<WatchInner>, event: &ChangeEvent) {
    if inner.closed.load(Ordering::Acquire) {
        return;
    }
    if inner.deep {
        if let Some(Value::Ref(child)) = &event.new_value {
            attach(inner, child);
        }
    }
    (inner.callback)(event);
}
