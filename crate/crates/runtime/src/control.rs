//! Remote control of the simulated tools.
//!
//! Tool actions such as creating an issue have no counterpart in the entity
//! model, so a daemon started with `"control": true` registers one extra
//! model: a single changeable entity. Writing a script line (JSON text) to
//! its `action` property applies that action to the daemon's tools before
//! the write returns; `applied` counts the actions applied so far.

use std::sync::{Arc, OnceLock, Weak};

use opendip_core::connectors::{
    parse_script, Pacing, ScenarioAction, ScriptStep, SimBuildServer, SimIssueTracker, ToolError,
};
use opendip_core::entity::{platform_type, WriteHook};
use opendip_core::{Entity, EntityError, EntityRef, MemoryEntity, OriginToken, PropertyKey, Uri, Value};
use serde_json::json;
use thiserror::Error;

pub const ACTION_KEY: &str = "action";
pub const APPLIED_KEY: &str = "applied";

pub fn control_entity_id() -> Uri {
    Uri::parse("urn:opendip:control/scenario").expect("valid")
}

/// Builds the control entity over the given tools.
pub fn control_entity(tracker: Option<Arc<SimIssueTracker>>, builds: Option<Arc<SimBuildServer>>) -> EntityRef {
    let me: Arc<OnceLock<Weak<MemoryEntity>>> = Arc::new(OnceLock::new());
    let handle = me.clone();
    let hook: WriteHook = Arc::new(move |_, key, value, origin| {
        if key.as_str() != ACTION_KEY {
            return Err(EntityError::Rejected(format!("only {ACTION_KEY} is writable")));
        }
        let Some(Value::Text(line)) = value else {
            return Err(EntityError::InvalidValue(format!("{ACTION_KEY} takes a script line as text")));
        };
        let steps = parse_script(&line).map_err(|e| EntityError::InvalidValue(e.to_string()))?;
        apply_steps(tracker.as_deref(), builds.as_deref(), &steps)?;
        if let Some(entity) = handle.get().and_then(Weak::upgrade) {
            let key = PropertyKey::new(APPLIED_KEY).expect("non-empty");
            let before = entity.get(APPLIED_KEY).and_then(|v| v.as_integer()).unwrap_or(0);
            entity.apply(&key, Some(Value::Integer(before + steps.len() as i64)), origin);
        }
        Ok(())
    });
    let entity = MemoryEntity::builder(control_entity_id(), platform_type("scenario-control"))
        .property(APPLIED_KEY, 0i64)
        .write_hook(hook)
        .build();
    let _ = me.set(Arc::downgrade(&entity));
    entity
}

#[derive(Debug, Error)]
pub enum ActionError {
    #[error("this platform has no {0}")]
    MissingTool(&'static str),
    #[error(transparent)]
    Tool(#[from] ToolError),
}

/// Applies one scenario action to whichever tools are present.
pub fn apply_action(
    tracker: Option<&SimIssueTracker>,
    builds: Option<&SimBuildServer>,
    action: &ScenarioAction,
) -> Result<(), ActionError> {
    let tracker = || tracker.ok_or(ActionError::MissingTool("issue tracker"));
    let builds = || builds.ok_or(ActionError::MissingTool("build server"));
    match action {
        ScenarioAction::CreateIssue { summary } => tracker()?.create(summary).map(|_| ())?,
        ScenarioAction::MoveIssue { issue, status } => tracker()?.set_status(*issue, *status)?,
        ScenarioAction::TriggerBuild { job, params } => {
            let b = builds()?;
            b.add_job(job)?;
            b.trigger(job, params)?;
        }
        ScenarioAction::FailBuild { job } => {
            let b = builds()?;
            b.add_job(job)?;
            b.trigger(job, "FAILURE")?;
        }
    }
    Ok(())
}

fn apply_steps(
    tracker: Option<&SimIssueTracker>,
    builds: Option<&SimBuildServer>,
    steps: &[ScriptStep],
) -> Result<(), EntityError> {
    for step in steps {
        apply_action(tracker, builds, &step.action).map_err(|e| match e {
            ActionError::MissingTool(_) => EntityError::Rejected(e.to_string()),
            ActionError::Tool(t) => EntityError::Rejected(format!("{} failed: {t}", step.action.name())),
        })?;
    }
    Ok(())
}

/// Script line for `step`, as accepted by the control entity.
pub fn step_line(step: &ScriptStep) -> String {
    let (action, args) = match &step.action {
        ScenarioAction::CreateIssue { summary } => ("create-issue", json!({ "summary": summary })),
        ScenarioAction::MoveIssue { issue, status } => {
            ("move-issue", json!({ "issue": issue, "status": status.as_str() }))
        }
        ScenarioAction::TriggerBuild { job, params } => ("trigger-build", json!({ "job": job, "params": params })),
        ScenarioAction::FailBuild { job } => ("fail-build", json!({ "job": job })),
    };
    json!({ "at_ms": step.at_ms, "action": action, "args": args }).to_string()
}

/// Runs `apply` for every step in timestamp order, paced like
/// [`opendip_core::connectors::scenario_run`].
pub fn paced<E>(
    steps: &[ScriptStep],
    pacing: Pacing,
    mut apply: impl FnMut(&ScriptStep) -> Result<(), E>,
) -> Result<usize, E> {
    let mut ordered: Vec<&ScriptStep> = steps.iter().collect();
    ordered.sort_by_key(|s| s.at_ms);
    let start = std::time::Instant::now();
    for step in &ordered {
        if let Pacing::Realtime { speed } = pacing {
            let due =
                start + std::time::Duration::from_secs_f64(step.at_ms as f64 / 1000.0 / speed.max(f64::MIN_POSITIVE));
            if let Some(wait) = due.checked_duration_since(std::time::Instant::now()) {
                std::thread::sleep(wait);
            }
        }
        apply(step)?;
    }
    Ok(ordered.len())
}

/// Origin used by remote scenario writes.
pub fn scenario_origin() -> OriginToken {
    OriginToken::new("scenario").expect("non-empty")
}

#[cfg(test)]
mod tests {
    use super::*;
    use opendip_core::connectors::IssueStatus;

    #[test]
    fn lines_round_trip_through_the_parser() {
        let text = concat!(
            "{\"at_ms\": 5, \"action\": \"create-issue\", \"args\": {\"summary\": \"a \\\"b\\\"\"}}\n",
            "{\"at_ms\": 7, \"action\": \"move-issue\", \"args\": {\"issue\": 1, \"status\": \"In Progress\"}}\n",
            "{\"at_ms\": 9, \"action\": \"trigger-build\", \"args\": {\"job\": \"app\", \"params\": \"x\"}}\n",
            "{\"at_ms\": 11, \"action\": \"fail-build\", \"args\": {\"job\": \"app\"}}\n",
        );
        let steps = parse_script(text).unwrap();
        for step in &steps {
            let again = parse_script(&step_line(step)).unwrap();
            assert_eq!(again[0].action, step.action);
            assert_eq!(again[0].at_ms, step.at_ms);
        }
    }

    #[test]
    fn writes_apply_actions_and_count_them() {
        let tracker = SimIssueTracker::new();
        let builds = SimBuildServer::new();
        let control = control_entity(Some(tracker.clone()), Some(builds.clone()));
        let o = scenario_origin();
        control
            .set(ACTION_KEY, Value::text(r#"{"at_ms":0,"action":"create-issue","args":{"summary":"s"}}"#), &o)
            .unwrap();
        control
            .set(ACTION_KEY, Value::text(r#"{"at_ms":0,"action":"move-issue","args":{"issue":1,"status":"Done"}}"#), &o)
            .unwrap();
        assert_eq!(tracker.get(1).unwrap().status, IssueStatus::Done);
        assert_eq!(control.get(APPLIED_KEY), Some(Value::Integer(2)));
        assert!(matches!(control.set(ACTION_KEY, Value::text("{"), &o), Err(EntityError::InvalidValue(_))));
        assert!(matches!(control.set(APPLIED_KEY, Value::Integer(9), &o), Err(EntityError::Rejected(_))));
        assert_eq!(control.get(APPLIED_KEY), Some(Value::Integer(2)));
    }

    #[test]
    fn missing_tools_are_reported() {
        let control = control_entity(Some(SimIssueTracker::new()), None);
        let err = control
            .set(ACTION_KEY, Value::text(r#"{"at_ms":0,"action":"fail-build","args":{"job":"j"}}"#), &scenario_origin())
            .unwrap_err();
        assert_eq!(err, EntityError::Rejected("this platform has no build server".into()));
    }
}
