use std::sync::Arc;

use opendip_core::clock::ManualClock;
use opendip_core::connectors::{
    connect_build_server, connect_issue_tracker, Connector, ConnectorConfig, IssueStatus, IssueTrackerModel,
    SimBuildServer, SimIssueTracker,
};
use opendip_core::mapping::{
    builtin, chain, derive, derive_events, vocab, Diagnostic, EventLog, IdRewrite, KeyRule, MappedModel,
    StructuralRules, Transform, TypeRule,
};
use opendip_core::{observe_with, ChangeEvent, EntityError, EntityRef, OriginToken, Subscription, Uri, Value};
use parking_lot::Mutex;

fn origin(s: &str) -> OriginToken {
    OriginToken::new(s).unwrap()
}

fn uri(s: &str) -> Uri {
    Uri::parse(s).unwrap()
}

fn child(e: &EntityRef, key: &str) -> EntityRef {
    e.get(key).unwrap_or_else(|| panic!("no {key}")).as_entity().unwrap().clone()
}

fn record(e: &EntityRef) -> (Subscription, Arc<Mutex<Vec<ChangeEvent>>>) {
    let log = Arc::new(Mutex::new(Vec::new()));
    let l = log.clone();
    (observe_with(&**e, move |ev| l.lock().push(ev.clone())).unwrap(), log)
}

struct Fixture {
    tool: Arc<SimIssueTracker>,
    connector: Connector<IssueTrackerModel>,
    cm: MappedModel,
}

fn fixture(issues: &[&str]) -> Fixture {
    let tool = SimIssueTracker::new();
    for s in issues {
        tool.create(s).unwrap();
    }
    let connector = connect_issue_tracker(tool.clone(), ConnectorConfig::manual("tracker")).unwrap();
    let cm = derive(builtin::issues_to_cm(), connector.root()).unwrap();
    Fixture { tool, connector, cm }
}

#[test]
fn derived_model_mirrors_tool_state() {
    let f = fixture(&["first", "second"]);
    let root = f.cm.target_root();
    assert_eq!(root.entity_type().as_str(), vocab::CM_CHANGE_REQUESTS);
    assert_eq!(root.properties().len(), 2);
    let cr = child(&root, "2");
    assert_eq!(cr.id().as_str(), "urn:opendip:cm/2");
    assert_eq!(cr.entity_type().as_str(), vocab::CM_CHANGE_REQUEST);
    assert_eq!(cr.get(vocab::DCTERMS_TITLE), Some(Value::text("second")));
    assert_eq!(cr.get(vocab::CM_STATUS), Some(Value::text("Open")));
    assert_eq!(cr.get(vocab::DCTERMS_CREATED), Some(Value::Integer(f.tool.get(2).unwrap().created_at)));
    assert!(f.cm.diagnostics().is_empty());
}

#[test]
fn write_back_reaches_tool_once_per_side() {
    let f = fixture(&["task"]);
    let source = child(&f.connector.root(), "1");
    let target = child(&f.cm.target_root(), "1");
    let (_s1, source_events) = record(&source);
    let (_s2, target_events) = record(&target);
    target.set(vocab::CM_STATUS, Value::text("Closed"), &origin("board")).unwrap();
    assert_eq!(f.tool.get(1).unwrap().status, IssueStatus::Done);
    assert_eq!(target.get(vocab::CM_STATUS), Some(Value::text("Closed")));
    let s = source_events.lock();
    let t = target_events.lock();
    assert_eq!(s.len(), 1);
    assert_eq!(t.len(), 1);
    assert_eq!(s[0].origin, *f.cm.origin());
    assert_eq!(t[0].origin, origin("board"));
    assert_eq!(t[0].new_value, Some(Value::text("Closed")));
}

#[test]
fn ineffective_write_back_is_silent() {
    let f = fixture(&["task"]);
    let target = child(&f.cm.target_root(), "1");
    let (_s, events) = record(&target);
    target.set(vocab::CM_STATUS, Value::text("Open"), &origin("board")).unwrap();
    assert!(events.lock().is_empty());
}

#[test]
fn rejected_write_back_changes_nothing() {
    let f = fixture(&["task"]);
    let target = child(&f.cm.target_root(), "1");
    let (_s, events) = record(&target);
    let o = origin("board");
    assert!(matches!(target.set(vocab::CM_STATUS, Value::text("Blocked"), &o), Err(EntityError::InvalidValue(_))));
    assert!(target.set(vocab::DCTERMS_CREATED, Value::Integer(1), &o).is_err());
    assert!(target.set("unmapped", Value::Integer(1), &o).is_err());
    assert!(events.lock().is_empty());
    assert_eq!(f.tool.get(1).unwrap().status, IssueStatus::ToDo);
}

#[test]
fn tool_changes_flow_forward_after_poll() {
    let f = fixture(&["task"]);
    let root = f.cm.target_root();
    let (_s, root_events) = record(&root);
    let target = child(&root, "1");
    let (_s2, events) = record(&target);
    f.tool.set_status(1, IssueStatus::InProgress).unwrap();
    f.tool.create("another").unwrap();
    f.connector.poll_now().unwrap();
    assert_eq!(target.get(vocab::CM_STATUS), Some(Value::text("In Progress")));
    assert_eq!(events.lock().len(), 1);
    let added = root_events.lock();
    assert_eq!(added.len(), 1);
    let new_cr = added[0].new_value.as_ref().unwrap().as_entity().unwrap().clone();
    assert_eq!(new_cr.get(vocab::DCTERMS_TITLE), Some(Value::text("another")));
}

#[test]
fn deleted_issue_disappears_from_target() {
    let f = fixture(&["a", "b"]);
    f.tool.delete(1).unwrap();
    f.connector.poll_now().unwrap();
    let keys: Vec<_> = f.cm.target_root().properties().into_iter().map(|(k, _)| k.to_string()).collect();
    assert_eq!(keys, ["2"]);
}

#[test]
fn references_without_rules_are_diagnosed() {
    let tool = SimIssueTracker::new();
    tool.create("x").unwrap();
    let connector = connect_issue_tracker(tool, ConnectorConfig::manual("t")).unwrap();
    let mut rules = builtin::issues_to_cm();
    rules.rules.retain(|r| r.source_type.as_str() != "urn:opendip:type/tracker/issue");
    let cm = derive(rules, connector.root()).unwrap();
    assert!(cm.target_root().properties().is_empty());
    assert!(matches!(cm.diagnostics()[0], Diagnostic::RuleMissing { .. }));
}

#[test]
fn root_without_rule_is_an_error() {
    let tool = SimIssueTracker::new();
    let connector = connect_issue_tracker(tool, ConnectorConfig::manual("t")).unwrap();
    assert!(derive(builtin::builds_to_automation(), connector.root()).is_err());
}

fn cm_to_board() -> StructuralRules {
    StructuralRules {
        name: "cm-to-board".into(),
        id_rewrite: IdRewrite { from: "urn:opendip:cm/".into(), to: "urn:opendip:board/".into() },
        rules: vec![
            TypeRule {
                source_type: uri(vocab::CM_CHANGE_REQUESTS),
                target_type: uri("urn:opendip:type/board/cards"),
                keys: vec![],
            },
            TypeRule {
                source_type: uri(vocab::CM_CHANGE_REQUEST),
                target_type: uri("urn:opendip:type/board/card"),
                keys: vec![
                    KeyRule {
                        source: vocab::DCTERMS_TITLE.into(),
                        target: "title".into(),
                        transform: Transform::Identity,
                    },
                    KeyRule {
                        source: vocab::CM_STATUS.into(),
                        target: "column".into(),
                        transform: Transform::Table(vec![
                            ("Open".into(), "todo".into()),
                            ("In Progress".into(), "doing".into()),
                            ("Closed".into(), "done".into()),
                        ]),
                    },
                ],
            },
        ],
    }
}

#[test]
fn chained_mappers_propagate_both_ways() {
    let tool = SimIssueTracker::new();
    tool.create("card").unwrap();
    let connector = connect_issue_tracker(tool.clone(), ConnectorConfig::manual("t")).unwrap();
    let chained = chain(connector.root(), vec![builtin::issues_to_cm(), cm_to_board()]).unwrap();
    let board = chained.target_root().unwrap();
    let card = child(&board, "1");
    assert_eq!(card.get("column"), Some(Value::text("todo")));
    let (_s, events) = record(&card);
    card.set("column", Value::text("done"), &origin("ui")).unwrap();
    assert_eq!(tool.get(1).unwrap().status, IssueStatus::Done);
    assert_eq!(events.lock().len(), 1);
    assert_eq!(events.lock()[0].origin, origin("ui"));
    let cm = child(&chained.stages()[0].target_root(), "1");
    assert_eq!(cm.get(vocab::CM_STATUS), Some(Value::text("Closed")));
    tool.set_status(1, IssueStatus::InProgress).unwrap();
    connector.poll_now().unwrap();
    assert_eq!(card.get("column"), Some(Value::text("doing")));
    assert_eq!(events.lock().len(), 2);
}

#[test]
fn automation_model_from_builds() {
    let tool = SimBuildServer::new();
    tool.add_job("app").unwrap();
    tool.trigger("app", "").unwrap();
    tool.trigger("app", "fail").unwrap();
    let connector = connect_build_server(tool.clone(), ConnectorConfig::manual("ci")).unwrap();
    let auto = derive(builtin::builds_to_automation(), connector.root()).unwrap();
    let plan = child(&auto.target_root(), "app");
    assert_eq!(plan.entity_type().as_str(), vocab::AUTO_PLAN);
    let results = child(&plan, vocab::AUTO_RESULTS);
    let verdicts: Vec<_> =
        results.properties().into_iter().map(|(_, v)| v.as_entity().unwrap().get(vocab::AUTO_VERDICT)).collect();
    assert_eq!(verdicts, [Some(Value::text("passed")), Some(Value::text("failed"))]);
    plan.set("opendip:trigger", Value::text("nightly"), &origin("ui")).unwrap();
    assert_eq!(tool.builds("app").unwrap().len(), 3);
    assert_eq!(results.properties().len(), 3);
}

#[test]
fn event_log_collects_kinds_from_both_models() {
    let clock = ManualClock::new(1_000_000);
    let tracker = SimIssueTracker::with_clock(clock.clone());
    let builds = SimBuildServer::with_clock(clock.clone());
    tracker.create("pre-existing").unwrap();
    let issues = connect_issue_tracker(tracker.clone(), ConnectorConfig::manual("t")).unwrap();
    let ci = connect_build_server(builds.clone(), ConnectorConfig::manual("ci")).unwrap();
    let cm = derive(builtin::issues_to_cm(), issues.root()).unwrap();
    let auto = derive(builtin::builds_to_automation(), ci.root()).unwrap();
    let log = EventLog::new(clock.clone());
    let _e1 =
        derive_events(builtin::timeline_events(), &uri(vocab::MODEL_CHANGE_MANAGEMENT), cm.target_root(), log.clone())
            .unwrap();
    let _e2 = derive_events(builtin::timeline_events(), &uri(vocab::MODEL_AUTOMATION), auto.target_root(), log.clone())
        .unwrap();
    assert_eq!(log.len(), 1);

    clock.advance(std::time::Duration::from_millis(10));
    tracker.set_status(1, IssueStatus::Done).unwrap();
    builds.add_job("app").unwrap();
    builds.trigger("app", "").unwrap();
    builds.trigger("app", "FAILURE").unwrap();
    issues.poll_now().unwrap();
    ci.poll_now().unwrap();

    let kinds: Vec<_> = log.records().into_iter().map(|r| r.kind).collect();
    assert_eq!(kinds, ["change-request-created", "change-request-status-changed", "build-succeeded", "build-failed"]);
    let records = log.records();
    assert_eq!(records[0].timestamp, 1_000_000);
    assert_eq!(records[1].timestamp, 1_000_010);
    assert_eq!(records[1].summary, "pre-existing is now Closed");
    assert_eq!(records[2].summary, "app #1");
    assert_eq!(records[2].source_model, vocab::MODEL_AUTOMATION);
    assert!(records.iter().all(|r| vocab::EVENT_KINDS.contains(&r.kind.as_str())));
}
