//! Platform assembly: tools, connectors, mappers, registry and listeners
//! wired together from a validated [`Plan`].

use std::sync::atomic::{AtomicBool, AtomicI64, Ordering};
use std::sync::Arc;
use std::time::{Duration, Instant};

use opendip_core::clock::{Clock, SharedClock, SystemClock};
use opendip_core::connectors::{
    connect_build_server, connect_issue_tracker, BuildServerModel, Connector, ConnectorConfig, ConnectorError,
    IssueStatus, IssueTrackerModel, Pacing, ScriptStep, SimBuildServer, SimIssueTracker, ToolError,
};
use opendip_core::mapping::{derive, derive_events, EventLog, EventMapper, MappedModel, RuleDocument};
use opendip_core::{EntityRef, ModelRegistry, Uri};
use opendip_transport::{Endpoint, Listener, PeerConfig, TransportError};
use thiserror::Error;

use crate::config::{ConfigError, FaultSpec, Plan, PlannedConnector, ToolSpec, MODEL_SCENARIO_CONTROL};
use crate::control::{apply_action, control_entity, ActionError};

#[derive(Debug, Error)]
pub enum PlatformError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("seeding tool {tool}: {source}")]
    Seed { tool: String, source: ToolError },
    #[error("mapper {name}: {message}")]
    Mapper { name: String, message: String },
    #[error("listener {name} on {endpoint}: {source}")]
    Listen { name: String, endpoint: String, source: TransportError },
}

#[derive(Debug, Error)]
#[error("script line {line}: {action}: {source}")]
pub struct ScenarioFailure {
    pub line: usize,
    pub action: &'static str,
    pub source: ActionError,
}

#[derive(Clone)]
pub enum Tool {
    IssueTracker(Arc<SimIssueTracker>),
    BuildServer(Arc<SimBuildServer>),
}

enum LiveConnector {
    Issues(Connector<IssueTrackerModel>),
    Builds(Connector<BuildServerModel>),
}

impl LiveConnector {
    fn root(&self) -> EntityRef {
        match self {
            LiveConnector::Issues(c) => c.root(),
            LiveConnector::Builds(c) => c.root(),
        }
    }

    fn poll_now(&self) -> Result<usize, ToolError> {
        match self {
            LiveConnector::Issues(c) => c.poll_now(),
            LiveConnector::Builds(c) => c.poll_now(),
        }
    }

    fn stop(&self) {
        match self {
            LiveConnector::Issues(c) => c.stop(),
            LiveConnector::Builds(c) => c.stop(),
        }
    }
}

enum LiveMapper {
    Structural(MappedModel),
    Events(EventMapper),
}

impl LiveMapper {
    fn stop(&self) {
        match self {
            LiveMapper::Structural(m) => m.stop(),
            LiveMapper::Events(m) => m.stop(),
        }
    }
}

/// Reports a fixed time while tools are seeded, so that two starts from the
/// same configuration produce identical models.
struct SeedClock {
    system: SharedClock,
    pinned: AtomicBool,
    at: AtomicI64,
}

impl SeedClock {
    fn new(pinned: Option<i64>) -> Arc<Self> {
        Arc::new(SeedClock {
            system: SystemClock::shared(),
            pinned: AtomicBool::new(pinned.is_some()),
            at: AtomicI64::new(pinned.unwrap_or(0)),
        })
    }

    fn release(&self) {
        self.pinned.store(false, Ordering::Release);
    }
}

impl Clock for SeedClock {
    fn epoch_ms(&self) -> i64 {
        if self.pinned.load(Ordering::Acquire) {
            self.at.load(Ordering::Relaxed)
        } else {
            self.system.epoch_ms()
        }
    }

    fn elapsed(&self) -> Duration {
        self.system.elapsed()
    }
}

pub struct Platform {
    name: String,
    registry: ModelRegistry,
    tools: Vec<(String, Tool)>,
    connectors: Vec<(String, LiveConnector)>,
    mappers: Vec<(String, LiveMapper)>,
    logs: Vec<(Uri, Arc<EventLog>)>,
    listeners: Vec<(String, Listener)>,
    degraded: Vec<String>,
    skipped: Vec<String>,
    stopped: bool,
}

impl Platform {
    pub fn start(plan: &Plan) -> Result<Platform, PlatformError> {
        let registry = ModelRegistry::new(&plan.name);
        let mut platform = Platform {
            name: plan.name.clone(),
            registry,
            tools: Vec::new(),
            connectors: Vec::new(),
            mappers: Vec::new(),
            logs: Vec::new(),
            listeners: Vec::new(),
            degraded: Vec::new(),
            skipped: Vec::new(),
            stopped: false,
        };
        for spec in &plan.tools {
            let tool = build_tool(spec)?;
            platform.tools.push((spec.name().to_owned(), tool));
        }
        for c in &plan.connectors {
            platform.start_connector(c);
        }
        if plan.control {
            let control = control_entity(platform.issue_tracker(), platform.build_server());
            platform.registry.register_root(&Uri::parse(MODEL_SCENARIO_CONTROL).expect("valid"), control);
        }
        for m in &plan.mappers {
            let Some(source_root) = platform.registry.lookup_root(&m.source) else {
                tracing::warn!(mapper = %m.name, source = %m.source, "source model unavailable, mapper skipped");
                platform.skipped.push(m.name.clone());
                continue;
            };
            let mapper_err = |e: opendip_core::mapping::MappingError| PlatformError::Mapper {
                name: m.name.clone(),
                message: e.to_string(),
            };
            let live = match &m.rules {
                RuleDocument::Structural(rules) => {
                    let mapped = derive(rules.clone(), source_root).map_err(mapper_err)?;
                    platform.registry.register_root(&m.target, mapped.target_root());
                    LiveMapper::Structural(mapped)
                }
                RuleDocument::Events(rules) => {
                    let log = platform.event_log_for(&m.target);
                    LiveMapper::Events(derive_events(rules.clone(), &m.source, source_root, log).map_err(mapper_err)?)
                }
            };
            tracing::info!(mapper = %m.name, source = %m.source, target = %m.target, "mapper started");
            platform.mappers.push((m.name.clone(), live));
        }
        for l in &plan.listeners {
            let mut config = PeerConfig::new(&plan.name).export(platform.registry.clone(), l.policy.clone());
            if let Some(codec) = l.codec {
                config = config.codec(codec).only_codec(codec);
            }
            let listener = Listener::bind(&l.endpoint, config).map_err(|source| PlatformError::Listen {
                name: l.name.clone(),
                endpoint: l.endpoint.to_string(),
                source,
            })?;
            tracing::info!(listener = %l.name, endpoint = %listener.endpoint(), "listening");
            platform.listeners.push((l.name.clone(), listener));
        }
        let models: Vec<String> = platform.model_uris().iter().map(Uri::to_string).collect();
        tracing::info!(
            platform = %platform.name,
            models = %models.join(","),
            degraded = platform.is_degraded(),
            "platform ready"
        );
        Ok(platform)
    }

    fn start_connector(&mut self, c: &PlannedConnector) {
        let Some(tool) = self.tool(&c.tool).cloned() else {
            return;
        };
        let config = ConnectorConfig::new(&c.name).with_interval(c.polling_interval);
        let mut attempt = 1;
        let live = loop {
            let result = match &tool {
                Tool::IssueTracker(t) => connect_issue_tracker(t.clone(), config.clone()).map(LiveConnector::Issues),
                Tool::BuildServer(b) => connect_build_server(b.clone(), config.clone()).map(LiveConnector::Builds),
            };
            match result {
                Ok(live) => break Some(live),
                Err(ConnectorError::ToolUnavailable(reason)) if attempt < c.retry.attempts => {
                    let wait = c.retry.backoff(attempt);
                    tracing::warn!(connector = %c.name, attempt, ?wait, %reason, "tool unavailable, retrying");
                    std::thread::sleep(wait);
                    attempt += 1;
                }
                Err(ConnectorError::ToolUnavailable(reason)) => {
                    tracing::error!(connector = %c.name, attempts = attempt, %reason, "tool unavailable, starting degraded");
                    break None;
                }
            }
        };
        match live {
            Some(live) => {
                self.registry.register_root(&c.model, live.root());
                tracing::info!(connector = %c.name, model = %c.model, "connector registered");
                self.connectors.push((c.name.clone(), live));
            }
            None => self.degraded.push(c.name.clone()),
        }
    }

    fn event_log_for(&mut self, target: &Uri) -> Arc<EventLog> {
        if let Some((_, log)) = self.logs.iter().find(|(u, _)| u == target) {
            return log.clone();
        }
        let local = target.as_str().rsplit(['/', ':']).next().filter(|s| !s.is_empty()).unwrap_or("events");
        let log = EventLog::with_model(local, SystemClock::shared());
        self.registry.register_root(target, log.root());
        self.logs.push((target.clone(), log.clone()));
        log
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn registry(&self) -> &ModelRegistry {
        &self.registry
    }

    pub fn model_uris(&self) -> Vec<Uri> {
        self.registry.models().into_iter().map(|(u, _)| u).collect()
    }

    pub fn tool(&self, name: &str) -> Option<&Tool> {
        self.tools.iter().find(|(n, _)| n == name).map(|(_, t)| t)
    }

    /// The first configured issue tracker.
    pub fn issue_tracker(&self) -> Option<Arc<SimIssueTracker>> {
        self.tools.iter().find_map(|(_, t)| match t {
            Tool::IssueTracker(t) => Some(t.clone()),
            Tool::BuildServer(_) => None,
        })
    }

    /// The first configured build server.
    pub fn build_server(&self) -> Option<Arc<SimBuildServer>> {
        self.tools.iter().find_map(|(_, t)| match t {
            Tool::BuildServer(b) => Some(b.clone()),
            Tool::IssueTracker(_) => None,
        })
    }

    pub fn event_log(&self, model: &Uri) -> Option<Arc<EventLog>> {
        self.logs.iter().find(|(u, _)| u == model).map(|(_, l)| l.clone())
    }

    pub fn listener_endpoint(&self, name: &str) -> Option<Endpoint> {
        self.listeners.iter().find(|(n, _)| n == name).map(|(_, l)| l.endpoint())
    }

    pub fn listeners(&self) -> Vec<(String, Endpoint)> {
        self.listeners.iter().map(|(n, l)| (n.clone(), l.endpoint())).collect()
    }

    pub fn listener(&self, name: &str) -> Option<&Listener> {
        self.listeners.iter().find(|(n, _)| n == name).map(|(_, l)| l)
    }

    /// Whether some connector could not reach its tool.
    pub fn is_degraded(&self) -> bool {
        !self.degraded.is_empty()
    }

    /// Connectors whose tool stayed unavailable.
    pub fn degraded_connectors(&self) -> &[String] {
        &self.degraded
    }

    /// Mappers not started because their source model is missing.
    pub fn skipped_mappers(&self) -> &[String] {
        &self.skipped
    }

    /// Runs one polling tick on every connector.
    pub fn poll_now(&self) {
        for (name, c) in &self.connectors {
            if let Err(e) = c.poll_now() {
                tracing::warn!(connector = %name, error = %e, "poll failed");
            }
        }
    }

    /// Replays a script against this platform's tools. `on_applied` runs
    /// right after each action.
    pub fn run_scenario(
        &self,
        steps: &[ScriptStep],
        pacing: Pacing,
        mut on_applied: impl FnMut(&ScriptStep, Instant),
    ) -> Result<usize, ScenarioFailure> {
        let (tracker, builds) = (self.issue_tracker(), self.build_server());
        crate::control::paced(steps, pacing, |step| {
            apply_action(tracker.as_deref(), builds.as_deref(), &step.action).map_err(|source| ScenarioFailure {
                line: step.line,
                action: step.action.name(),
                source,
            })?;
            tracing::info!(line = step.line, action = step.action.name(), "scenario action applied");
            on_applied(step, Instant::now());
            Ok(())
        })
    }

    /// Stops listeners (sessions get a final shutdown ERROR), then mappers,
    /// then connectors.
    pub fn stop(&mut self) {
        if std::mem::replace(&mut self.stopped, true) {
            return;
        }
        for (name, mut l) in self.listeners.drain(..) {
            l.shutdown();
            tracing::info!(listener = %name, "listener stopped");
        }
        for (name, m) in self.mappers.drain(..).rev() {
            m.stop();
            tracing::info!(mapper = %name, "mapper stopped");
        }
        for (name, c) in self.connectors.drain(..) {
            c.stop();
            tracing::info!(connector = %name, "connector stopped");
        }
        tracing::info!(platform = %self.name, "platform stopped");
    }
}

impl Drop for Platform {
    fn drop(&mut self) {
        self.stop();
    }
}

fn build_tool(spec: &ToolSpec) -> Result<Tool, PlatformError> {
    let seed_err = |source| PlatformError::Seed { tool: spec.name().to_owned(), source };
    match spec {
        ToolSpec::IssueTracker { issues, seed_time_ms, faults, .. } => {
            let clock = SeedClock::new(*seed_time_ms);
            let tool = SimIssueTracker::with_clock(clock.clone());
            for issue in issues {
                let id = tool.create(&issue.summary).map_err(seed_err)?;
                if let Some(status) = &issue.status {
                    let status: IssueStatus = status.parse().map_err(seed_err)?;
                    tool.set_status(id, status).map_err(seed_err)?;
                }
            }
            clock.release();
            apply_faults(faults, tool.faults());
            Ok(Tool::IssueTracker(tool))
        }
        ToolSpec::BuildServer { jobs, seed_time_ms, faults, .. } => {
            let clock = SeedClock::new(*seed_time_ms);
            let tool = SimBuildServer::with_clock(clock.clone());
            for job in jobs {
                tool.add_job(&job.name).map_err(seed_err)?;
                for params in &job.builds {
                    tool.trigger(&job.name, params).map_err(seed_err)?;
                }
            }
            clock.release();
            apply_faults(faults, tool.faults());
            Ok(Tool::BuildServer(tool))
        }
    }
}

fn apply_faults(spec: &FaultSpec, faults: &opendip_core::connectors::ToolFaults) {
    faults.refuse_connects(spec.refuse_connects);
    faults.set_latency(Duration::from_millis(spec.latency_ms));
}
