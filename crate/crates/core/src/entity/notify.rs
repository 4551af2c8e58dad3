use std::collections::VecDeque;
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::{Arc, Weak};

use parking_lot::Mutex;

use super::ChangeEvent;

pub type Observer = Arc<dyn Fn(&ChangeEvent) + Send + Sync>;

/// Per-entity observer list with an ordered delivery queue.
///
/// Mutators `enqueue` events while holding their own state lock and call
/// `drain` after releasing it. Only one thread drains at a time; a drain call
/// that finds another drain in progress (including a re-entrant call from an
/// observer) returns immediately and the active drainer delivers the event.
/// Observers therefore see events sequentially and in enqueue order, possibly
/// on a thread other than the mutator's.
pub struct Notifier {
    state: Mutex<State>,
}

struct State {
    observers: Vec<Entry>,
    queue: VecDeque<ChangeEvent>,
    draining: bool,
    next_id: u64,
}

struct Entry {
    id: u64,
    active: Arc<AtomicBool>,
    observer: Observer,
}

impl Notifier {
    pub fn new() -> Arc<Self> {
        Arc::new(Notifier {
            state: Mutex::new(State { observers: Vec::new(), queue: VecDeque::new(), draining: false, next_id: 0 }),
        })
    }

    pub fn subscribe(self: &Arc<Self>, observer: Observer) -> Subscription {
        let active = Arc::new(AtomicBool::new(true));
        let mut state = self.state.lock();
        let id = state.next_id;
        state.next_id += 1;
        state.observers.push(Entry { id, active: active.clone(), observer });
        Subscription { notifier: Arc::downgrade(self), id, active }
    }

    pub fn has_observers(&self) -> bool {
        !self.state.lock().observers.is_empty()
    }

    pub fn observer_count(&self) -> usize {
        self.state.lock().observers.len()
    }

    /// Queues an event for delivery. Events enqueued while nobody observes are
    /// dropped.
    pub fn enqueue(&self, event: ChangeEvent) {
        let mut state = self.state.lock();
        if !state.observers.is_empty() {
            state.queue.push_back(event);
        }
    }

    /// Delivers queued events unless another drain is already running.
    pub fn drain(&self) {
        {
            let mut state = self.state.lock();
            if state.draining || state.queue.is_empty() {
                return;
            }
            state.draining = true;
        }
        let _reset = DrainGuard(self);
        loop {
            let (event, observers) = {
                let mut state = self.state.lock();
                match state.queue.pop_front() {
                    Some(event) => {
                        let observers: Vec<_> =
                            state.observers.iter().map(|e| (e.active.clone(), e.observer.clone())).collect();
                        (event, observers)
                    }
                    None => {
                        state.draining = false;
                        return;
                    }
                }
            };
            for (active, observer) in observers {
                if active.load(Ordering::Acquire) {
                    observer(&event);
                }
            }
        }
    }

    /// `enqueue` followed by `drain`.
    pub fn notify(&self, event: ChangeEvent) {
        self.enqueue(event);
        self.drain();
    }

    fn unsubscribe(&self, id: u64) {
        self.state.lock().observers.retain(|e| e.id != id);
    }
}

struct DrainGuard<'a>(&'a Notifier);

impl Drop for DrainGuard<'_> {
    fn drop(&mut self) {
        if std::thread::panicking() {
            let mut state = self.0.state.lock();
            state.draining = false;
            state.queue.clear();
        }
    }
}

/// Handle for one registered observer. Dropping it cancels the observation.
pub struct Subscription {
    notifier: Weak<Notifier>,
    id: u64,
    active: Arc<AtomicBool>,
}

impl Subscription {
    pub fn is_active(&self) -> bool {
        self.active.load(Ordering::Acquire)
    }

    pub fn cancel(&self) {
        if self.active.swap(false, Ordering::AcqRel) {
            if let Some(notifier) = self.notifier.upgrade() {
                notifier.unsubscribe(self.id);
            }
        }
    }

    /// Combines several subscriptions into one handle.
    pub fn group(subscriptions: Vec<Subscription>) -> SubscriptionGroup {
        SubscriptionGroup(subscriptions)
    }
}

impl Drop for Subscription {
    fn drop(&mut self) {
        self.cancel();
    }
}

impl std::fmt::Debug for Subscription {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Subscription").field("id", &self.id).field("active", &self.is_active()).finish()
    }
}

pub struct SubscriptionGroup(Vec<Subscription>);

impl SubscriptionGroup {
    pub fn cancel(&self) {
        self.0.iter().for_each(Subscription::cancel);
    }
}
