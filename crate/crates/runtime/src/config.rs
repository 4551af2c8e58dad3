//! Platform configuration.
//!
//! A JSON document (schema in `config/schema/platform-config.schema.json`)
//! names the simulated tools, the connectors over them, the mappers between
//! models and the listeners serving them. Listener endpoints can be
//! overridden with `OPENDIP_LISTEN_<NAME>` environment variables.

use std::collections::{HashMap, HashSet};
use std::path::{Path, PathBuf};
use std::time::Duration;

use opendip_core::connectors::IssueStatus;
use opendip_core::mapping::{vocab, RuleDocument};
use opendip_core::Uri;
use opendip_transport::{Codec, Endpoint, ExposurePolicy};
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Model served by the scenario control entity, see [`crate::control`].
pub const MODEL_SCENARIO_CONTROL: &str = "urn:opendip:model/scenario-control";

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("cannot read {path}: {message}")]
    Io { path: String, message: String },
    #[error("{path}: {message}")]
    Parse { path: String, message: String },
    #[error("rule document {path} does not exist")]
    MissingRules { path: String },
    #[error("rule document {path}: {message}")]
    Rules { path: String, message: String },
    #[error("invalid configuration: {0}")]
    Invalid(String),
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PlatformConfig {
    #[serde(default = "default_name")]
    pub name: String,
    #[serde(default)]
    pub tools: Vec<ToolSpec>,
    #[serde(default)]
    pub connectors: Vec<ConnectorSpec>,
    #[serde(default)]
    pub mappers: Vec<MapperSpec>,
    #[serde(default)]
    pub listeners: Vec<ListenerSpec>,
    /// Register the scenario control model so `scenario --endpoint` can
    /// drive the simulated tools remotely.
    #[serde(default)]
    pub control: bool,
    /// Directory rule paths are resolved against.
    #[serde(skip)]
    pub base_dir: PathBuf,
}

fn default_name() -> String {
    "platform".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "kebab-case", deny_unknown_fields)]
pub enum ToolSpec {
    IssueTracker {
        name: String,
        #[serde(default)]
        issues: Vec<IssueSeed>,
        #[serde(default)]
        seed_time_ms: Option<i64>,
        #[serde(default)]
        faults: FaultSpec,
    },
    BuildServer {
        name: String,
        #[serde(default)]
        jobs: Vec<JobSeed>,
        #[serde(default)]
        seed_time_ms: Option<i64>,
        #[serde(default)]
        faults: FaultSpec,
    },
}

impl ToolSpec {
    pub fn name(&self) -> &str {
        match self {
            ToolSpec::IssueTracker { name, .. } | ToolSpec::BuildServer { name, .. } => name,
        }
    }

    pub fn kind(&self) -> &'static str {
        match self {
            ToolSpec::IssueTracker { .. } => "issue-tracker",
            ToolSpec::BuildServer { .. } => "build-server",
        }
    }

    fn default_model(&self) -> &'static str {
        match self {
            ToolSpec::IssueTracker { .. } => vocab::MODEL_ISSUES,
            ToolSpec::BuildServer { .. } => vocab::MODEL_BUILDS,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IssueSeed {
    pub summary: String,
    #[serde(default)]
    pub status: Option<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct JobSeed {
    pub name: String,
    /// Trigger parameters of builds to run at startup, oldest first.
    #[serde(default)]
    pub builds: Vec<String>,
}

/// Failure injection for simulated tools.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct FaultSpec {
    #[serde(default)]
    pub refuse_connects: u32,
    #[serde(default)]
    pub latency_ms: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ConnectorSpec {
    pub name: String,
    pub tool: String,
    /// Defaults to the issues or builds model, by tool kind.
    #[serde(default)]
    pub model: Option<String>,
    #[serde(default = "default_poll_ms")]
    pub polling_interval_ms: u64,
    #[serde(default)]
    pub retry: RetrySpec,
}

fn default_poll_ms() -> u64 {
    250
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RetrySpec {
    #[serde(default = "default_attempts")]
    pub attempts: u32,
    #[serde(default = "default_backoff_ms")]
    pub initial_backoff_ms: u64,
    #[serde(default = "default_max_backoff_ms")]
    pub max_backoff_ms: u64,
}

fn default_attempts() -> u32 {
    5
}

fn default_backoff_ms() -> u64 {
    100
}

fn default_max_backoff_ms() -> u64 {
    2000
}

impl Default for RetrySpec {
    fn default() -> Self {
        RetrySpec {
            attempts: default_attempts(),
            initial_backoff_ms: default_backoff_ms(),
            max_backoff_ms: default_max_backoff_ms(),
        }
    }
}

impl RetrySpec {
    /// Delay before retry number `n` (1-based).
    pub fn backoff(&self, n: u32) -> Duration {
        let ms = self.initial_backoff_ms.saturating_mul(1u64 << (n.saturating_sub(1)).min(20));
        Duration::from_millis(ms.min(self.max_backoff_ms))
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct MapperSpec {
    #[serde(default)]
    pub name: Option<String>,
    /// Rule document, relative to the configuration file.
    pub rules: PathBuf,
    pub source: String,
    pub target: String,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ListenerSpec {
    pub name: String,
    pub endpoint: String,
    /// `binary` or `json`; absent accepts both.
    #[serde(default)]
    pub codec: Option<String>,
    pub policy: PolicySpec,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PolicySpec {
    pub models: ModelSelection,
    #[serde(default = "yes")]
    pub export_registry: bool,
    #[serde(default)]
    pub accept_remote_registry: bool,
}

fn yes() -> bool {
    true
}

/// `"all"` or a list of model URIs.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelSelection {
    Keyword(String),
    Only(Vec<String>),
}

/// A configuration that passed validation, with everything resolved.
#[derive(Debug, Clone)]
pub struct Plan {
    pub name: String,
    pub tools: Vec<ToolSpec>,
    pub connectors: Vec<PlannedConnector>,
    /// In dependency order: every source exists before its mapper starts.
    pub mappers: Vec<PlannedMapper>,
    pub listeners: Vec<PlannedListener>,
    pub control: bool,
}

#[derive(Debug, Clone)]
pub struct PlannedConnector {
    pub name: String,
    pub tool: String,
    pub model: Uri,
    pub polling_interval: Duration,
    pub retry: RetrySpec,
}

#[derive(Debug, Clone)]
pub struct PlannedMapper {
    pub name: String,
    pub rules_path: PathBuf,
    pub rules: RuleDocument,
    pub source: Uri,
    pub target: Uri,
}

#[derive(Debug, Clone)]
pub struct PlannedListener {
    pub name: String,
    pub endpoint: Endpoint,
    pub codec: Option<Codec>,
    pub policy: ExposurePolicy,
}

/// Environment variable overriding the endpoint of listener `name`.
pub fn endpoint_override_var(name: &str) -> String {
    let suffix: String =
        name.chars().map(|c| if c.is_ascii_alphanumeric() { c.to_ascii_uppercase() } else { '_' }).collect();
    format!("OPENDIP_LISTEN_{suffix}")
}

impl PlatformConfig {
    pub fn from_json(text: &str, base_dir: impl Into<PathBuf>) -> Result<Self, ConfigError> {
        let mut config: PlatformConfig = serde_json::from_str(text)
            .map_err(|e| ConfigError::Parse { path: "<config>".into(), message: e.to_string() })?;
        config.base_dir = base_dir.into();
        Ok(config)
    }

    /// Reads a configuration file and applies environment overrides.
    pub fn load(path: &Path) -> Result<Self, ConfigError> {
        let shown = path.display().to_string();
        let text = std::fs::read_to_string(path)
            .map_err(|e| ConfigError::Io { path: shown.clone(), message: e.to_string() })?;
        let base = path.parent().map(Path::to_path_buf).unwrap_or_default();
        let mut config = Self::from_json(&text, base).map_err(|e| match e {
            ConfigError::Parse { message, .. } => ConfigError::Parse { path: shown, message },
            other => other,
        })?;
        config.apply_overrides(std::env::vars());
        Ok(config)
    }

    /// Replaces listener endpoints from `OPENDIP_LISTEN_<NAME>` variables.
    pub fn apply_overrides(&mut self, vars: impl IntoIterator<Item = (String, String)>) {
        let vars: HashMap<String, String> = vars.into_iter().collect();
        for l in &mut self.listeners {
            if let Some(endpoint) = vars.get(&endpoint_override_var(&l.name)) {
                tracing::info!(listener = %l.name, endpoint = %endpoint, "endpoint overridden from environment");
                l.endpoint = endpoint.clone();
            }
        }
    }

    pub fn rule_path(&self, mapper: &MapperSpec) -> PathBuf {
        if mapper.rules.is_absolute() {
            mapper.rules.clone()
        } else {
            self.base_dir.join(&mapper.rules)
        }
    }

    pub fn validate(&self) -> Result<Plan, ConfigError> {
        let invalid = |m: String| ConfigError::Invalid(m);
        let parse_uri = |what: &str, s: &str| Uri::parse(s).map_err(|e| invalid(format!("{what}: {e}")));

        unique("tool", self.tools.iter().map(ToolSpec::name))?;
        unique("connector", self.connectors.iter().map(|c| c.name.as_str()))?;
        unique("listener", self.listeners.iter().map(|l| l.name.as_str()))?;

        for tool in &self.tools {
            if let ToolSpec::IssueTracker { issues, .. } = tool {
                for issue in issues {
                    if let Some(status) = &issue.status {
                        status.parse::<IssueStatus>().map_err(|e| invalid(format!("tool {}: {e}", tool.name())))?;
                    }
                }
            }
        }

        // model URI -> whether it is an event model (shared by event mappers)
        let mut models: HashMap<Uri, bool> = HashMap::new();
        let mut connectors = Vec::new();
        for c in &self.connectors {
            let tool = self
                .tools
                .iter()
                .find(|t| t.name() == c.tool)
                .ok_or_else(|| invalid(format!("connector {} refers to unknown tool {}", c.name, c.tool)))?;
            let model =
                parse_uri(&format!("connector {} model", c.name), c.model.as_deref().unwrap_or(tool.default_model()))?;
            if models.insert(model.clone(), false).is_some() {
                return Err(invalid(format!("model {model} is produced twice")));
            }
            if c.polling_interval_ms == 0 {
                return Err(invalid(format!("connector {}: polling_interval_ms must be positive", c.name)));
            }
            if c.retry.attempts == 0 {
                return Err(invalid(format!("connector {}: retry.attempts must be at least 1", c.name)));
            }
            connectors.push(PlannedConnector {
                name: c.name.clone(),
                tool: c.tool.clone(),
                model,
                polling_interval: Duration::from_millis(c.polling_interval_ms),
                retry: c.retry.clone(),
            });
        }
        if self.control {
            models.insert(Uri::parse(MODEL_SCENARIO_CONTROL).expect("valid"), false);
        }

        let mut pending = Vec::new();
        for (i, m) in self.mappers.iter().enumerate() {
            let path = self.rule_path(m);
            let shown = path.display().to_string();
            if !path.is_file() {
                return Err(ConfigError::MissingRules { path: shown });
            }
            let rules =
                RuleDocument::load(&path).map_err(|e| ConfigError::Rules { path: shown, message: e.to_string() })?;
            let name = m.name.clone().unwrap_or_else(|| rules.name().to_owned());
            let source = parse_uri(&format!("mapper {name} source"), &m.source)?;
            let target = parse_uri(&format!("mapper {name} target"), &m.target)?;
            if source == target {
                return Err(invalid(format!("mapper {name} maps {source} onto itself")));
            }
            let events = matches!(rules, RuleDocument::Events(_));
            match models.get(&target) {
                Some(true) if events => {}
                Some(_) => return Err(invalid(format!("model {target} is produced twice"))),
                None => {
                    models.insert(target.clone(), events);
                }
            }
            pending.push((i, PlannedMapper { name, rules_path: path, rules, source, target }));
        }
        for (_, m) in &pending {
            if !models.contains_key(&m.source) {
                return Err(invalid(format!(
                    "mapper {} reads {}, which no connector or mapper produces",
                    m.name, m.source
                )));
            }
        }
        let mappers = order_mappers(pending, &connectors)?;

        let mut listeners = Vec::new();
        let mut addresses = HashSet::new();
        for l in &self.listeners {
            let endpoint: Endpoint = l.endpoint.parse().map_err(|e| invalid(format!("listener {}: {e}", l.name)))?;
            // port 0 asks for a fresh port every time, so it never clashes
            if !endpoint.address.ends_with(":0") && !addresses.insert(endpoint.address.clone()) {
                return Err(invalid(format!("endpoint {} is used by more than one listener", endpoint.address)));
            }
            let codec = match &l.codec {
                None => None,
                Some(c) => Some(c.parse::<Codec>().map_err(|e| invalid(format!("listener {}: {e}", l.name)))?),
            };
            let mut policy = match &l.policy.models {
                ModelSelection::Keyword(k) if k == "all" => ExposurePolicy::open(),
                ModelSelection::Keyword(k) => {
                    return Err(invalid(format!("listener {}: models must be \"all\" or a list, got {k:?}", l.name)))
                }
                ModelSelection::Only(list) => {
                    let mut uris = Vec::new();
                    for s in list {
                        let uri = parse_uri(&format!("listener {} model", l.name), s)?;
                        if !models.contains_key(&uri) {
                            return Err(invalid(format!("listener {} exports unknown model {uri}", l.name)));
                        }
                        uris.push(uri);
                    }
                    ExposurePolicy::only(uris)
                }
            };
            policy.export_registry = l.policy.export_registry;
            policy.accept_remote_registry = l.policy.accept_remote_registry;
            listeners.push(PlannedListener { name: l.name.clone(), endpoint, codec, policy });
        }

        Ok(Plan {
            name: self.name.clone(),
            tools: self.tools.clone(),
            connectors,
            mappers,
            listeners,
            control: self.control,
        })
    }
}

fn unique<'a>(what: &str, names: impl Iterator<Item = &'a str>) -> Result<(), ConfigError> {
    let mut seen = HashSet::new();
    for n in names {
        if n.is_empty() {
            return Err(ConfigError::Invalid(format!("{what} with an empty name")));
        }
        if !seen.insert(n) {
            return Err(ConfigError::Invalid(format!("{what} name {n} is used twice")));
        }
    }
    Ok(())
}

/// Orders mappers so that sources are available before use; rejects cycles.
fn order_mappers(
    mut pending: Vec<(usize, PlannedMapper)>,
    connectors: &[PlannedConnector],
) -> Result<Vec<PlannedMapper>, ConfigError> {
    let mut available: HashSet<Uri> = connectors.iter().map(|c| c.model.clone()).collect();
    available.insert(Uri::parse(MODEL_SCENARIO_CONTROL).expect("valid"));
    let mut ordered = Vec::with_capacity(pending.len());
    while !pending.is_empty() {
        let before = pending.len();
        let mut rest = Vec::new();
        for (i, m) in pending {
            if available.contains(&m.source) {
                ordered.push((i, m));
            } else {
                rest.push((i, m));
            }
        }
        // event models are shared, so every feeder of a log counts as one producer
        for (_, m) in &ordered {
            available.insert(m.target.clone());
        }
        if rest.len() == before {
            let names: Vec<_> = rest.iter().map(|(_, m)| m.name.as_str()).collect();
            return Err(ConfigError::Invalid(format!("mappers form a cycle: {}", names.join(", "))));
        }
        pending = rest;
    }
    Ok(ordered.into_iter().map(|(_, m)| m).collect())
}
