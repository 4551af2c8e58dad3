//! Scripted tool activity for demos and end-to-end tests.
//!
//! A script is JSON lines, one action per line:
//! `{"at_ms": 0, "action": "create-issue", "args": {"summary": "..."}}`.

use std::time::{Duration, Instant};

use serde::Deserialize;
use thiserror::Error;

use super::buildserver::SimBuildServer;
use super::tracker::{IssueStatus, SimIssueTracker};
use super::ToolError;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ScenarioAction {
    CreateIssue {
        summary: String,
    },
    MoveIssue {
        issue: u64,
        status: IssueStatus,
    },
    /// Creates the job first if needed.
    TriggerBuild {
        job: String,
        params: String,
    },
    FailBuild {
        job: String,
    },
}

impl ScenarioAction {
    pub fn name(&self) -> &'static str {
        match self {
            ScenarioAction::CreateIssue { .. } => "create-issue",
            ScenarioAction::MoveIssue { .. } => "move-issue",
            ScenarioAction::TriggerBuild { .. } => "trigger-build",
            ScenarioAction::FailBuild { .. } => "fail-build",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ScriptStep {
    /// 1-based line in the script.
    pub line: usize,
    pub at_ms: u64,
    pub action: ScenarioAction,
}

#[derive(Debug, Error)]
pub enum ScenarioError {
    #[error("script line {line}: {message}")]
    ScriptParse { line: usize, message: String },
    #[error("script line {line}: {action} failed: {source}")]
    Tool { line: usize, action: &'static str, source: ToolError },
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct RawStep {
    at_ms: u64,
    action: String,
    #[serde(default)]
    args: serde_json::Map<String, serde_json::Value>,
}

/// Parses and validates a whole script. Blank lines are skipped.
pub fn parse_script(text: &str) -> Result<Vec<ScriptStep>, ScenarioError> {
    let mut steps = Vec::new();
    for (i, raw) in text.lines().enumerate() {
        let line = i + 1;
        if raw.trim().is_empty() {
            continue;
        }
        let err = |message: String| ScenarioError::ScriptParse { line, message };
        let step: RawStep = serde_json::from_str(raw).map_err(|e| err(e.to_string()))?;
        let text_arg = |name: &str| -> Result<String, ScenarioError> {
            match step.args.get(name) {
                Some(serde_json::Value::String(s)) => Ok(s.clone()),
                Some(_) => Err(err(format!("argument {name} must be a string"))),
                None => Err(err(format!("missing argument {name}"))),
            }
        };
        let action = match step.action.as_str() {
            "create-issue" => ScenarioAction::CreateIssue { summary: text_arg("summary")? },
            "move-issue" => {
                let issue = step
                    .args
                    .get("issue")
                    .and_then(|v| v.as_u64())
                    .ok_or_else(|| err("argument issue must be a positive integer".into()))?;
                let status = text_arg("status")?.parse().map_err(|e: ToolError| err(e.to_string()))?;
                ScenarioAction::MoveIssue { issue, status }
            }
            "trigger-build" => ScenarioAction::TriggerBuild {
                job: text_arg("job")?,
                params: match step.args.get("params") {
                    None => String::new(),
                    Some(_) => text_arg("params")?,
                },
            },
            "fail-build" => ScenarioAction::FailBuild { job: text_arg("job")? },
            other => return Err(err(format!("unknown action {other:?}"))),
        };
        steps.push(ScriptStep { line, at_ms: step.at_ms, action });
    }
    Ok(steps)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub enum Pacing {
    /// Back to back.
    Fast,
    /// Wall-clock replay; `speed` 2.0 runs twice as fast.
    Realtime { speed: f64 },
}

/// Applies `steps` in timestamp order (stable for equal timestamps) and
/// returns how many were applied. `on_applied` runs right after each action.
pub fn scenario_run(
    tracker: &SimIssueTracker,
    builds: &SimBuildServer,
    steps: &[ScriptStep],
    pacing: Pacing,
    mut on_applied: impl FnMut(&ScriptStep, Instant),
) -> Result<usize, ScenarioError> {
    let mut ordered: Vec<&ScriptStep> = steps.iter().collect();
    ordered.sort_by_key(|s| s.at_ms);
    let start = Instant::now();
    for step in &ordered {
        if let Pacing::Realtime { speed } = pacing {
            let due = start + Duration::from_secs_f64(step.at_ms as f64 / 1000.0 / speed.max(f64::MIN_POSITIVE));
            let now = Instant::now();
            if due > now {
                std::thread::sleep(due - now);
            }
        }
        apply(tracker, builds, &step.action).map_err(|source| ScenarioError::Tool {
            line: step.line,
            action: step.action.name(),
            source,
        })?;
        tracing::debug!(line = step.line, action = step.action.name(), "scenario action applied");
        on_applied(step, Instant::now());
    }
    Ok(ordered.len())
}

fn apply(tracker: &SimIssueTracker, builds: &SimBuildServer, action: &ScenarioAction) -> Result<(), ToolError> {
    match action {
        ScenarioAction::CreateIssue { summary } => tracker.create(summary).map(|_| ()),
        ScenarioAction::MoveIssue { issue, status } => tracker.set_status(*issue, *status),
        ScenarioAction::TriggerBuild { job, params } => {
            builds.add_job(job)?;
            builds.trigger(job, params).map(|_| ())
        }
        ScenarioAction::FailBuild { job } => {
            builds.add_job(job)?;
            builds.trigger(job, "FAILURE").map(|_| ())
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connectors::BuildResult;

    #[test]
    fn empty_script_applies_nothing() {
        let steps = parse_script("").unwrap();
        let n = scenario_run(&SimIssueTracker::new(), &SimBuildServer::new(), &steps, Pacing::Fast, |_, _| {}).unwrap();
        assert_eq!(n, 0);
    }

    #[test]
    fn malformed_line_is_reported_and_nothing_runs() {
        let script = concat!(
            r#"{"at_ms":0,"action":"create-issue","args":{"summary":"a"}}"#,
            "\n",
            r#"{"at_ms":5,"action":"move-issue","args":{"issue":1,"status":"Blocked"}}"#,
        );
        match parse_script(script) {
            Err(ScenarioError::ScriptParse { line, .. }) => assert_eq!(line, 2),
            other => panic!("expected parse error, got {other:?}"),
        }
        assert!(parse_script(r#"{"at_ms":0,"action":"explode"}"#).is_err());
        assert!(parse_script("not json").is_err());
    }

    #[test]
    fn actions_apply_in_time_order() {
        let script = [
            r#"{"at_ms":30,"action":"move-issue","args":{"issue":1,"status":"Done"}}"#,
            r#"{"at_ms":10,"action":"create-issue","args":{"summary":"a"}}"#,
            r#"{"at_ms":20,"action":"trigger-build","args":{"job":"app"}}"#,
            r#"{"at_ms":40,"action":"fail-build","args":{"job":"app"}}"#,
        ]
        .join("\n");
        let steps = parse_script(&script).unwrap();
        let tracker = SimIssueTracker::new();
        let builds = SimBuildServer::new();
        let mut order = Vec::new();
        let n = scenario_run(&tracker, &builds, &steps, Pacing::Fast, |s, _| order.push(s.at_ms)).unwrap();
        assert_eq!(n, 4);
        assert_eq!(order, [10, 20, 30, 40]);
        assert_eq!(tracker.get(1).unwrap().status, IssueStatus::Done);
        let results: Vec<_> = builds.builds("app").unwrap().iter().map(|b| b.result).collect();
        assert_eq!(results, [BuildResult::Success, BuildResult::Failure]);
    }
}
