//! Simulated build server and its connector model.

use std::fmt;
use std::sync::Arc;

use indexmap::IndexMap;
use parking_lot::Mutex;

use super::{Connector, ConnectorConfig, ConnectorError, Field, ToolError, ToolFaults, ToolModel};
use crate::clock::{SharedClock, SystemClock};
use crate::entity::{platform_id, platform_type, Capabilities, EntityError, EntityKey, PropertyKey, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum BuildResult {
    Success,
    Failure,
}

impl BuildResult {
    pub fn as_str(self) -> &'static str {
        match self {
            BuildResult::Success => "SUCCESS",
            BuildResult::Failure => "FAILURE",
        }
    }
}

impl fmt::Display for BuildResult {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Build {
    pub number: i64,
    pub result: BuildResult,
    pub finished_at: i64,
}

#[derive(Debug, Clone, Default)]
struct Job {
    builds: Vec<Build>,
    last_trigger: Option<String>,
}

/// In-process build server without change notifications. Builds finish as
/// soon as they are triggered.
pub struct SimBuildServer {
    jobs: Mutex<IndexMap<String, Job>>,
    clock: SharedClock,
    faults: ToolFaults,
}

fn valid_job_name(name: &str) -> bool {
    !name.is_empty() && name.chars().all(|c| c.is_ascii_alphanumeric() || matches!(c, '.' | '_' | '-'))
}

/// Parameters mentioning a failure make the build fail.
fn outcome(params: &str) -> BuildResult {
    if params.contains("FAILURE") || params.contains("fail") {
        BuildResult::Failure
    } else {
        BuildResult::Success
    }
}

impl SimBuildServer {
    pub fn new() -> Arc<Self> {
        Self::with_clock(SystemClock::shared())
    }

    pub fn with_clock(clock: SharedClock) -> Arc<Self> {
        Arc::new(SimBuildServer { jobs: Mutex::new(IndexMap::new()), clock, faults: ToolFaults::default() })
    }

    pub fn faults(&self) -> &ToolFaults {
        &self.faults
    }

    /// Creates the job if it does not exist yet.
    pub fn add_job(&self, name: &str) -> Result<(), ToolError> {
        self.faults.enter("build server")?;
        if !valid_job_name(name) {
            return Err(ToolError::Invalid(format!("bad job name {name:?}")));
        }
        self.jobs.lock().entry(name.to_owned()).or_default();
        Ok(())
    }

    pub fn jobs(&self) -> Result<Vec<String>, ToolError> {
        self.faults.enter("build server")?;
        Ok(self.jobs.lock().keys().cloned().collect())
    }

    pub fn builds(&self, job: &str) -> Result<Vec<Build>, ToolError> {
        self.faults.enter("build server")?;
        self.jobs.lock().get(job).map(|j| j.builds.clone()).ok_or_else(|| ToolError::NotFound(format!("job {job}")))
    }

    pub fn last_trigger(&self, job: &str) -> Result<Option<String>, ToolError> {
        self.faults.enter("build server")?;
        self.jobs
            .lock()
            .get(job)
            .map(|j| j.last_trigger.clone())
            .ok_or_else(|| ToolError::NotFound(format!("job {job}")))
    }

    /// Runs a build of `job` and returns its number.
    pub fn trigger(&self, job: &str, params: &str) -> Result<i64, ToolError> {
        self.faults.enter("build server")?;
        let mut jobs = self.jobs.lock();
        let entry = jobs.get_mut(job).ok_or_else(|| ToolError::NotFound(format!("job {job}")))?;
        let number = entry.builds.last().map_or(1, |b| b.number + 1);
        entry.builds.push(Build { number, result: outcome(params), finished_at: self.clock.epoch_ms() });
        entry.last_trigger = Some(params.to_owned());
        Ok(number)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub enum BuildNode {
    Root,
    Job(String),
    BuildList(String),
    Build(String, i64),
}

pub const BUILDS_MODEL: &str = "builds";

/// Maps build server state onto entities, keeping the server's vocabulary.
/// Everything is read-only except the job's `trigger` command property.
pub struct BuildServerModel {
    tool: Arc<SimBuildServer>,
}

impl BuildServerModel {
    pub fn new(tool: Arc<SimBuildServer>) -> Self {
        BuildServerModel { tool }
    }

    pub fn tool(&self) -> &Arc<SimBuildServer> {
        &self.tool
    }
}

impl ToolModel for BuildServerModel {
    type Node = BuildNode;

    fn tool_name(&self) -> &str {
        "build server"
    }

    fn root(&self) -> BuildNode {
        BuildNode::Root
    }

    fn key(&self, node: &BuildNode) -> EntityKey {
        let (local, ty) = match node {
            BuildNode::Root => ("root".to_owned(), "ci/server"),
            BuildNode::Job(job) => (job.clone(), "ci/job"),
            BuildNode::BuildList(job) => (format!("{job}/builds"), "ci/build-list"),
            BuildNode::Build(job, n) => (format!("{job}/{n}"), "ci/build"),
        };
        EntityKey::new(platform_id(BUILDS_MODEL, &local), platform_type(ty))
    }

    fn capabilities(&self, node: &BuildNode) -> Capabilities {
        match node {
            BuildNode::Job(_) => Capabilities::FULL,
            _ => Capabilities::OBSERVABLE,
        }
    }

    fn read(&self, node: &BuildNode) -> Result<Vec<(PropertyKey, Field<BuildNode>)>, ToolError> {
        let pk = |k: &str| PropertyKey::new(k).expect("non-empty keys");
        let text = |s: &str| Field::Value(Value::Text(s.to_owned()));
        let gone = |e: ToolError| match e {
            ToolError::NotFound(_) => Ok(Vec::new()),
            e => Err(e),
        };
        match node {
            BuildNode::Root => {
                Ok(self.tool.jobs()?.into_iter().map(|j| (pk(&j), Field::Child(BuildNode::Job(j)))).collect())
            }
            BuildNode::Job(job) => {
                let trigger = match self.tool.last_trigger(job) {
                    Ok(t) => t,
                    Err(e) => return gone(e),
                };
                let mut props = vec![(pk("name"), text(job))];
                if let Some(t) = trigger {
                    props.push((pk("trigger"), text(&t)));
                }
                props.push((pk("builds"), Field::Child(BuildNode::BuildList(job.clone()))));
                Ok(props)
            }
            BuildNode::BuildList(job) => match self.tool.builds(job) {
                Ok(builds) => Ok(builds
                    .iter()
                    .enumerate()
                    .map(|(i, b)| (pk(&i.to_string()), Field::Child(BuildNode::Build(job.clone(), b.number))))
                    .collect()),
                Err(e) => gone(e),
            },
            BuildNode::Build(job, number) => {
                let builds = match self.tool.builds(job) {
                    Ok(b) => b,
                    Err(e) => return gone(e),
                };
                let Some(b) = builds.into_iter().find(|b| b.number == *number) else { return Ok(Vec::new()) };
                Ok(vec![
                    (pk("number"), Field::Value(Value::Integer(b.number))),
                    (pk("result"), text(b.result.as_str())),
                    (pk("finished_at"), Field::Value(Value::Integer(b.finished_at))),
                    (pk("job"), text(job)),
                ])
            }
        }
    }

    fn write(&self, node: &BuildNode, key: &PropertyKey, value: Option<&Value>) -> Result<(), EntityError> {
        let BuildNode::Job(job) = node else {
            return Err(EntityError::NotChangeable);
        };
        if key.as_str() != "trigger" {
            return Err(EntityError::Rejected(format!("{key} is read-only; only trigger is writable")));
        }
        match value {
            Some(Value::Text(params)) => self.tool.trigger(job, params).map(|_| ()).map_err(Into::into),
            Some(other) => Err(EntityError::InvalidValue(format!("trigger takes text, got {}", other.kind_name()))),
            None => Err(EntityError::Rejected("trigger cannot be removed".into())),
        }
    }

    fn connect(&self) -> Result<(), ToolError> {
        self.tool.faults.connect("build server")
    }
}

pub fn connect_build_server(
    tool: Arc<SimBuildServer>,
    config: ConnectorConfig,
) -> Result<Connector<BuildServerModel>, ConnectorError> {
    Connector::connect(BuildServerModel::new(tool), config)
}
