//! Tool connectors.
//!
//! A connector exposes a third-party tool as a tool-specific entity model.
//! Reads are live (every `get` calls the tool), writes are forwarded to the
//! tool, and since the simulated tools have no push notifications, changes are
//! detected by a polling loop that diffs snapshots of the model.
//!
//! The generic [`Connector`] does all of that for any [`ToolModel`]; the tool
//! specific parts live in [`tracker`] and [`buildserver`].

pub mod buildserver;
pub mod poll;
pub mod scenario;
pub mod tracker;

use std::collections::{HashMap, VecDeque};
use std::sync::atomic::{AtomicBool, AtomicU32, Ordering};
use std::sync::mpsc::{self, RecvTimeoutError};
use std::sync::{Arc, Weak};
use std::thread::JoinHandle;
use std::time::Duration;

use parking_lot::Mutex;
use thiserror::Error;

use crate::entity::{
    Capabilities, Entity, EntityError, EntityKey, Notifier, Observer, OriginToken, PropertyKey, Snapshot, SnapshotNode,
    SnapshotValue, Subscription, Uri, Value,
};

pub use buildserver::{connect_build_server, BuildResult, BuildServerModel, SimBuildServer};
pub use poll::{poll_diff, PollError, PollingAdapter, DEFAULT_POLL_INTERVAL};
pub use scenario::{parse_script, scenario_run, Pacing, ScenarioAction, ScenarioError, ScriptStep};
pub use tracker::{connect_issue_tracker, IssueStatus, IssueTrackerModel, SimIssueTracker};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ToolError {
    #[error("tool unavailable: {0}")]
    Unavailable(String),
    #[error("not found: {0}")]
    NotFound(String),
    #[error("invalid request: {0}")]
    Invalid(String),
}

impl From<ToolError> for EntityError {
    fn from(e: ToolError) -> Self {
        match e {
            ToolError::Unavailable(m) => EntityError::ToolUnavailable(m),
            ToolError::NotFound(m) => EntityError::Rejected(format!("not found: {m}")),
            ToolError::Invalid(m) => EntityError::InvalidValue(m),
        }
    }
}

/// Latency and failure injection for simulated tools.
#[derive(Default)]
pub struct ToolFaults {
    latency_us: std::sync::atomic::AtomicU64,
    unavailable: AtomicBool,
    refuse_connects: AtomicU32,
}

impl ToolFaults {
    pub fn set_latency(&self, latency: Duration) {
        self.latency_us.store(latency.as_micros() as u64, Ordering::Relaxed);
    }

    pub fn set_unavailable(&self, unavailable: bool) {
        self.unavailable.store(unavailable, Ordering::Relaxed);
    }

    /// The next `n` connection attempts fail.
    pub fn refuse_connects(&self, n: u32) {
        self.refuse_connects.store(n, Ordering::Relaxed);
    }

    /// Applied at the start of every tool API call.
    pub fn enter(&self, tool: &str) -> Result<(), ToolError> {
        let us = self.latency_us.load(Ordering::Relaxed);
        if us > 0 {
            std::thread::sleep(Duration::from_micros(us));
        }
        if self.unavailable.load(Ordering::Relaxed) {
            return Err(ToolError::Unavailable(tool.to_owned()));
        }
        Ok(())
    }

    pub fn connect(&self, tool: &str) -> Result<(), ToolError> {
        let refused =
            self.refuse_connects.fetch_update(Ordering::Relaxed, Ordering::Relaxed, |n| n.checked_sub(1)).is_ok();
        if refused {
            return Err(ToolError::Unavailable(format!("{tool} refused the connection")));
        }
        self.enter(tool)
    }
}

/// A property as read from the tool: a plain value or a child node.
pub enum Field<N> {
    Value(Value),
    Child(N),
}

/// Properties of one node as read from the tool.
pub type Fields<N> = Vec<(PropertyKey, Field<N>)>;

/// Tool-specific half of a connector: how tool state maps onto entities.
pub trait ToolModel: Send + Sync + 'static {
    type Node: Clone + Send + Sync + 'static;

    fn tool_name(&self) -> &str;

    fn root(&self) -> Self::Node;

    fn key(&self, node: &Self::Node) -> EntityKey;

    fn capabilities(&self, node: &Self::Node) -> Capabilities;

    /// Current properties of `node`, read from the tool.
    fn read(&self, node: &Self::Node) -> Result<Fields<Self::Node>, ToolError>;

    /// Forwards a write (`None` = removal) to the tool.
    fn write(&self, node: &Self::Node, key: &PropertyKey, value: Option<&Value>) -> Result<(), EntityError>;

    fn connect(&self) -> Result<(), ToolError>;
}

#[derive(Debug, Clone)]
pub struct ConnectorConfig {
    pub name: String,
    /// `None` disables the background loop; call [`Connector::poll_now`].
    pub polling_interval: Option<Duration>,
}

impl ConnectorConfig {
    pub fn new(name: impl Into<String>) -> Self {
        ConnectorConfig { name: name.into(), polling_interval: Some(DEFAULT_POLL_INTERVAL) }
    }

    pub fn manual(name: impl Into<String>) -> Self {
        ConnectorConfig { name: name.into(), polling_interval: None }
    }

    pub fn with_interval(mut self, interval: Duration) -> Self {
        self.polling_interval = Some(interval);
        self
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConnectorError {
    #[error("tool unavailable: {0}")]
    ToolUnavailable(String),
}

/// Live, write-forwarding, polled entity model over a tool.
pub struct Connector<M: ToolModel> {
    shared: Arc<Shared<M>>,
    poller: Mutex<Option<(mpsc::Sender<()>, JoinHandle<()>)>>,
}

struct PollState<N> {
    adapter: PollingAdapter,
    // tool nodes seen by the last capture, for turning new references live
    nodes: HashMap<EntityKey, N>,
}

struct Shared<M: ToolModel> {
    name: String,
    model: M,
    entities: Mutex<HashMap<EntityKey, Arc<LiveEntity<M>>>>,
    // serializes polling with write forwarding
    state: Mutex<PollState<M::Node>>,
}

impl<M: ToolModel> Connector<M> {
    pub fn connect(model: M, config: ConnectorConfig) -> Result<Self, ConnectorError> {
        model.connect().map_err(|e| ConnectorError::ToolUnavailable(e.to_string()))?;
        let (initial, nodes) = capture_model(&model).map_err(|e| ConnectorError::ToolUnavailable(e.to_string()))?;
        let poll_origin = poll_origin(&config.name);
        let shared = Arc::new(Shared {
            name: config.name.clone(),
            state: Mutex::new(PollState {
                adapter: PollingAdapter::new(
                    initial,
                    config.polling_interval.unwrap_or(DEFAULT_POLL_INTERVAL),
                    poll_origin,
                ),
                nodes,
            }),
            model,
            entities: Mutex::new(HashMap::new()),
        });
        let connector = Connector { shared, poller: Mutex::new(None) };
        if let Some(interval) = config.polling_interval {
            connector.start_polling(interval);
        }
        tracing::info!(connector = %config.name, tool = connector.shared.model.tool_name(), "connector ready");
        Ok(connector)
    }

    fn start_polling(&self, interval: Duration) {
        let (stop_tx, stop_rx) = mpsc::channel::<()>();
        let weak: Weak<Shared<M>> = Arc::downgrade(&self.shared);
        let handle = std::thread::Builder::new()
            .name(format!("poll-{}", self.shared.name))
            .spawn(move || loop {
                match stop_rx.recv_timeout(interval) {
                    Err(RecvTimeoutError::Timeout) => {}
                    _ => return,
                }
                let Some(shared) = weak.upgrade() else { return };
                if let Err(e) = shared.poll() {
                    tracing::warn!(connector = %shared.name, error = %e, "poll failed");
                }
            })
            .expect("spawn polling thread");
        *self.poller.lock() = Some((stop_tx, handle));
    }

    pub fn name(&self) -> &str {
        &self.shared.name
    }

    pub fn model(&self) -> &M {
        &self.shared.model
    }

    /// Root entity of the tool-specific model.
    pub fn root(&self) -> Arc<dyn Entity> {
        self.shared.entity_for(&self.shared.model.root())
    }

    /// Runs one polling tick now; returns the number of events emitted.
    pub fn poll_now(&self) -> Result<usize, ToolError> {
        self.shared.poll()
    }

    pub fn last_snapshot(&self) -> Arc<Snapshot> {
        self.shared.state.lock().adapter.last_snapshot().clone()
    }

    /// Stops the polling loop; the model stays readable and writable.
    pub fn stop(&self) {
        if let Some((stop, handle)) = self.poller.lock().take() {
            let _ = stop.send(());
            let _ = handle.join();
        }
    }
}

impl<M: ToolModel> Drop for Connector<M> {
    fn drop(&mut self) {
        self.stop();
    }
}

/// Snapshot of the whole tool model, failing if any tool call fails.
fn capture_model<M: ToolModel>(model: &M) -> Result<(Snapshot, HashMap<EntityKey, M::Node>), ToolError> {
    let root = model.root();
    let mut nodes: indexmap::IndexMap<EntityKey, SnapshotNode> = indexmap::IndexMap::new();
    let root_key = model.key(&root);
    nodes.insert(root_key.clone(), SnapshotNode { capabilities: model.capabilities(&root), properties: None });
    let mut seen = HashMap::new();
    let mut queue = VecDeque::from([(root_key, root)]);
    while let Some((key, node)) = queue.pop_front() {
        seen.insert(key.clone(), node.clone());
        let mut props = Vec::new();
        for (k, field) in model.read(&node)? {
            let value = match field {
                Field::Value(Value::Ref(_)) => {
                    return Err(ToolError::Invalid("tool models expose children as nodes".into()))
                }
                Field::Value(Value::Text(s)) => SnapshotValue::Text(s),
                Field::Value(Value::Integer(i)) => SnapshotValue::Integer(i),
                Field::Value(Value::Bytes(b)) => SnapshotValue::Bytes(b),
                Field::Child(child) => {
                    let child_key = model.key(&child);
                    if !nodes.contains_key(&child_key) {
                        nodes.insert(
                            child_key.clone(),
                            SnapshotNode { capabilities: model.capabilities(&child), properties: None },
                        );
                        queue.push_back((child_key.clone(), child));
                    }
                    SnapshotValue::Ref(child_key)
                }
            };
            props.push((k, value));
        }
        nodes[&key].properties = Some(props);
    }
    let snapshot = Snapshot::from_nodes(nodes.into_iter().collect()).expect("captured snapshots are consistent");
    Ok((snapshot, seen))
}

/// Which write a tick is attributed to.
struct Attribution<'a> {
    entity: &'a EntityKey,
    key: &'a PropertyKey,
    origin: &'a OriginToken,
}

impl<M: ToolModel> Shared<M> {
    fn entity_for(self: &Arc<Self>, node: &M::Node) -> Arc<LiveEntity<M>> {
        let key = self.model.key(node);
        self.entities
            .lock()
            .entry(key.clone())
            .or_insert_with(|| {
                Arc::new(LiveEntity {
                    caps: self.model.capabilities(node),
                    node: node.clone(),
                    key,
                    notifier: Notifier::new(),
                    shared: Arc::downgrade(self),
                })
            })
            .clone()
    }

    fn poll(self: &Arc<Self>) -> Result<usize, ToolError> {
        let mut state = self.state.lock();
        let pending = self.tick(&mut state, None)?;
        drop(state);
        let count = pending.len();
        drain(pending);
        Ok(count)
    }

    fn write(
        self: &Arc<Self>,
        entity: &LiveEntity<M>,
        key: &PropertyKey,
        value: Option<&Value>,
        origin: &OriginToken,
    ) -> Result<(), EntityError> {
        let mut state = self.state.lock();
        // changes made directly in the tool since the last tick keep the
        // poller's origin
        let mut pending = self.tick(&mut state, None).unwrap_or_default();
        let result = self.model.write(&entity.node, key, value);
        if result.is_ok() {
            let attribution = Attribution { entity: &entity.key, key, origin };
            match self.tick(&mut state, Some(attribution)) {
                Ok(more) => pending.extend(more),
                Err(e) => tracing::warn!(connector = %self.name, error = %e, "post-write poll failed"),
            }
        }
        drop(state);
        drain(pending);
        result
    }

    /// Captures, diffs and enqueues; returns the notifiers that need draining.
    fn tick(
        self: &Arc<Self>,
        state: &mut PollState<M::Node>,
        attribution: Option<Attribution<'_>>,
    ) -> Result<Vec<Arc<Notifier>>, ToolError> {
        let (current, nodes) = capture_model(&self.model)?;
        let events = state.adapter.advance(current).expect("connector root is fixed");
        state.nodes = nodes;
        let mut touched: Vec<Arc<Notifier>> = Vec::new();
        for mut event in events {
            if let Some(a) = &attribution {
                if &event.entity == a.entity && &event.key == a.key {
                    event.origin = a.origin.clone();
                }
            }
            let Some(target) = self.entities.lock().get(&event.entity).cloned() else {
                continue;
            };
            event.old_value = event.old_value.map(|v| self.liven(&state.nodes, v));
            event.new_value = event.new_value.map(|v| self.liven(&state.nodes, v));
            tracing::debug!(
                connector = %self.name,
                entity = %event.entity.id,
                key = %event.key,
                kind = event.kind.as_str(),
                origin = %event.origin,
                "tool change"
            );
            target.notifier.enqueue(event);
            if !touched.iter().any(|n| Arc::ptr_eq(n, &target.notifier)) {
                touched.push(target.notifier.clone());
            }
        }
        Ok(touched)
    }

    /// Swaps snapshot-backed references for live entities.
    /// Removed entities keep their last captured content.
    fn liven(self: &Arc<Self>, nodes: &HashMap<EntityKey, M::Node>, value: Value) -> Value {
        match value {
            Value::Ref(e) => match nodes.get(&e.key()) {
                Some(node) => Value::Ref(self.entity_for(node)),
                None => Value::Ref(e),
            },
            other => other,
        }
    }
}

fn drain(notifiers: Vec<Arc<Notifier>>) {
    for n in notifiers {
        n.drain();
    }
}

/// Entity whose every read goes to the tool.
pub struct LiveEntity<M: ToolModel> {
    node: M::Node,
    key: EntityKey,
    caps: Capabilities,
    notifier: Arc<Notifier>,
    shared: Weak<Shared<M>>,
}

impl<M: ToolModel> LiveEntity<M> {
    fn read(&self) -> Vec<(PropertyKey, Value)> {
        let Some(shared) = self.shared.upgrade() else { return Vec::new() };
        match shared.model.read(&self.node) {
            Ok(fields) => fields
                .into_iter()
                .map(|(k, f)| {
                    let v = match f {
                        Field::Value(v) => v,
                        Field::Child(n) => Value::Ref(shared.entity_for(&n)),
                    };
                    (k, v)
                })
                .collect(),
            Err(e) => {
                tracing::warn!(connector = %shared.name, entity = %self.key.id, error = %e, "live read failed");
                Vec::new()
            }
        }
    }

    fn forward(&self, key: &str, value: Option<Value>, origin: &OriginToken) -> Result<(), EntityError> {
        if !self.caps.changeable {
            return Err(EntityError::NotChangeable);
        }
        let key = PropertyKey::new(key)?;
        let shared = self.shared.upgrade().ok_or_else(|| EntityError::ToolUnavailable("connector closed".into()))?;
        shared.write(self, &key, value.as_ref(), origin)
    }
}

impl<M: ToolModel> Entity for LiveEntity<M> {
    fn id(&self) -> &Uri {
        &self.key.id
    }

    fn entity_type(&self) -> &Uri {
        &self.key.entity_type
    }

    fn capabilities(&self) -> Capabilities {
        self.caps
    }

    fn get(&self, key: &str) -> Option<Value> {
        self.read().into_iter().find(|(k, _)| k.as_str() == key).map(|(_, v)| v)
    }

    fn properties(&self) -> Vec<(PropertyKey, Value)> {
        self.read()
    }

    fn set(&self, key: &str, value: Value, origin: &OriginToken) -> Result<(), EntityError> {
        self.forward(key, Some(value), origin)
    }

    fn remove(&self, key: &str, origin: &OriginToken) -> Result<(), EntityError> {
        self.forward(key, None, origin)
    }

    fn observe(&self, observer: Observer) -> Result<Subscription, EntityError> {
        if !self.caps.observable {
            return Err(EntityError::NotObservable);
        }
        Ok(self.notifier.subscribe(observer))
    }

    fn key(&self) -> EntityKey {
        self.key.clone()
    }
}

/// Origin used for changes detected by a connector's poller.
pub fn poll_origin(connector_name: &str) -> OriginToken {
    OriginToken::new(format!("poll:{connector_name}")).expect("non-empty")
}

impl<M: ToolModel> std::fmt::Debug for Connector<M> {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Connector").field("name", &self.shared.name).finish()
    }
}
