//! Simulated issue tracker and its connector model.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;
use std::sync::Arc;

use parking_lot::Mutex;

use super::{Connector, ConnectorConfig, ConnectorError, Field, ToolError, ToolFaults, ToolModel};
use crate::clock::{SharedClock, SystemClock};
use crate::entity::{platform_id, platform_type, Capabilities, EntityError, EntityKey, PropertyKey, Value};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IssueStatus {
    ToDo,
    InProgress,
    Done,
}

impl IssueStatus {
    pub const ALL: [IssueStatus; 3] = [IssueStatus::ToDo, IssueStatus::InProgress, IssueStatus::Done];

    pub fn as_str(self) -> &'static str {
        match self {
            IssueStatus::ToDo => "To Do",
            IssueStatus::InProgress => "In Progress",
            IssueStatus::Done => "Done",
        }
    }
}

impl fmt::Display for IssueStatus {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for IssueStatus {
    type Err = ToolError;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        IssueStatus::ALL
            .into_iter()
            .find(|st| st.as_str() == s)
            .ok_or_else(|| ToolError::Invalid(format!("unknown status {s:?}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Issue {
    pub id: u64,
    pub summary: String,
    pub status: IssueStatus,
    pub created_at: i64,
}

struct TrackerState {
    issues: BTreeMap<u64, Issue>,
    next_id: u64,
}

/// In-process issue tracker without change notifications.
pub struct SimIssueTracker {
    state: Mutex<TrackerState>,
    clock: SharedClock,
    faults: ToolFaults,
}

impl SimIssueTracker {
    pub fn new() -> Arc<Self> {
        Self::with_clock(SystemClock::shared())
    }

    pub fn with_clock(clock: SharedClock) -> Arc<Self> {
        Arc::new(SimIssueTracker {
            state: Mutex::new(TrackerState { issues: BTreeMap::new(), next_id: 1 }),
            clock,
            faults: ToolFaults::default(),
        })
    }

    pub fn faults(&self) -> &ToolFaults {
        &self.faults
    }

    pub fn create(&self, summary: &str) -> Result<u64, ToolError> {
        self.faults.enter("issue tracker")?;
        let mut st = self.state.lock();
        let id = st.next_id;
        st.next_id += 1;
        let issue =
            Issue { id, summary: summary.to_owned(), status: IssueStatus::ToDo, created_at: self.clock.epoch_ms() };
        st.issues.insert(id, issue);
        Ok(id)
    }

    pub fn get(&self, id: u64) -> Result<Issue, ToolError> {
        self.faults.enter("issue tracker")?;
        self.state.lock().issues.get(&id).cloned().ok_or_else(|| ToolError::NotFound(format!("issue {id}")))
    }

    pub fn list(&self) -> Result<Vec<Issue>, ToolError> {
        self.faults.enter("issue tracker")?;
        Ok(self.state.lock().issues.values().cloned().collect())
    }

    pub fn set_status(&self, id: u64, status: IssueStatus) -> Result<(), ToolError> {
        self.update(id, |issue| issue.status = status)
    }

    pub fn set_summary(&self, id: u64, summary: &str) -> Result<(), ToolError> {
        self.update(id, |issue| issue.summary = summary.to_owned())
    }

    pub fn delete(&self, id: u64) -> Result<(), ToolError> {
        self.faults.enter("issue tracker")?;
        self.state.lock().issues.remove(&id).map(|_| ()).ok_or_else(|| ToolError::NotFound(format!("issue {id}")))
    }

    fn update(&self, id: u64, f: impl FnOnce(&mut Issue)) -> Result<(), ToolError> {
        self.faults.enter("issue tracker")?;
        let mut st = self.state.lock();
        let issue = st.issues.get_mut(&id).ok_or_else(|| ToolError::NotFound(format!("issue {id}")))?;
        f(issue);
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IssueNode {
    Root,
    Issue(u64),
}

pub const ISSUES_MODEL: &str = "issues";

/// Maps tracker state onto entities. Field names follow the tracker's own
/// vocabulary.
pub struct IssueTrackerModel {
    tool: Arc<SimIssueTracker>,
}

impl IssueTrackerModel {
    pub fn new(tool: Arc<SimIssueTracker>) -> Self {
        IssueTrackerModel { tool }
    }

    pub fn tool(&self) -> &Arc<SimIssueTracker> {
        &self.tool
    }

    pub fn issue_id(id: u64) -> crate::entity::Uri {
        platform_id(ISSUES_MODEL, &id.to_string())
    }
}

impl ToolModel for IssueTrackerModel {
    type Node = IssueNode;

    fn tool_name(&self) -> &str {
        "issue tracker"
    }

    fn root(&self) -> IssueNode {
        IssueNode::Root
    }

    fn key(&self, node: &IssueNode) -> EntityKey {
        match node {
            IssueNode::Root => EntityKey::new(platform_id(ISSUES_MODEL, "root"), platform_type("tracker/issue-list")),
            IssueNode::Issue(id) => EntityKey::new(Self::issue_id(*id), platform_type("tracker/issue")),
        }
    }

    fn capabilities(&self, node: &IssueNode) -> Capabilities {
        match node {
            IssueNode::Root => Capabilities::OBSERVABLE,
            IssueNode::Issue(_) => Capabilities::FULL,
        }
    }

    fn read(&self, node: &IssueNode) -> Result<Vec<(PropertyKey, Field<IssueNode>)>, ToolError> {
        let pk = |k: &str| PropertyKey::new(k).expect("static keys");
        match node {
            IssueNode::Root => Ok(self
                .tool
                .list()?
                .into_iter()
                .map(|i| (pk(&i.id.to_string()), Field::Child(IssueNode::Issue(i.id))))
                .collect()),
            IssueNode::Issue(id) => {
                let issue = match self.tool.get(*id) {
                    Ok(issue) => issue,
                    // deleted since the reference was handed out
                    Err(ToolError::NotFound(_)) => return Ok(Vec::new()),
                    Err(e) => return Err(e),
                };
                Ok(vec![
                    (pk("summary"), Field::Value(Value::Text(issue.summary))),
                    (pk("status"), Field::Value(Value::Text(issue.status.as_str().to_owned()))),
                    (pk("created_at"), Field::Value(Value::Integer(issue.created_at))),
                ])
            }
        }
    }

    fn write(&self, node: &IssueNode, key: &PropertyKey, value: Option<&Value>) -> Result<(), EntityError> {
        let IssueNode::Issue(id) = node else {
            return Err(EntityError::NotChangeable);
        };
        let text = match value {
            Some(Value::Text(t)) => t,
            Some(other) => {
                return Err(EntityError::InvalidValue(format!("{key} takes text, got {}", other.kind_name())))
            }
            None => return Err(EntityError::Rejected(format!("{key} cannot be removed"))),
        };
        match key.as_str() {
            "summary" => Ok(self.tool.set_summary(*id, text)?),
            "status" => Ok(self.tool.set_status(*id, text.parse()?)?),
            other => Err(EntityError::Rejected(format!("{other} is not a writable issue field"))),
        }
    }

    fn connect(&self) -> Result<(), ToolError> {
        self.tool.faults.connect("issue tracker")
    }
}

pub fn connect_issue_tracker(
    tool: Arc<SimIssueTracker>,
    config: ConnectorConfig,
) -> Result<Connector<IssueTrackerModel>, ConnectorError> {
    Connector::connect(IssueTrackerModel::new(tool), config)
}
