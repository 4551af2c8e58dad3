//! The three binaries, driven as a user would.

mod common;

use std::time::Duration;

use common::{bin, config_dir, Running};
use opendip_core::connectors::IssueStatus;
use opendip_core::mapping::vocab;
use opendip_core::Uri;
use opendip_runtime::{Platform, PlatformConfig};
use opendip_transport::{Peer, PeerConfig};

const WAIT: Duration = Duration::from_secs(10);

fn platform(json: &str) -> Platform {
    let plan = PlatformConfig::from_json(json, config_dir()).unwrap().validate().unwrap();
    Platform::start(&plan).unwrap()
}

fn tracker_and_builds(issues: &str, builds: &str) -> String {
    format!(
        r#"{{
        "tools": [
            {{ "kind": "issue-tracker", "name": "tracker", "issues": [{issues}] }},
            {{ "kind": "build-server", "name": "ci", "jobs": [{{ "name": "app", "builds": [{builds}] }}] }}
        ],
        "connectors": [
            {{ "name": "tracker", "tool": "tracker", "polling_interval_ms": 50 }},
            {{ "name": "ci", "tool": "ci", "polling_interval_ms": 50 }}
        ],
        "mappers": [
            {{ "rules": "rules/issues-to-cm.json", "source": "urn:opendip:model/issues",
               "target": "urn:opendip:model/change-management" }},
            {{ "rules": "rules/builds-to-automation.json", "source": "urn:opendip:model/builds",
               "target": "urn:opendip:model/automation" }},
            {{ "rules": "rules/events.json", "source": "urn:opendip:model/change-management",
               "target": "urn:opendip:model/events" }},
            {{ "name": "automation-events", "rules": "rules/events.json",
               "source": "urn:opendip:model/automation", "target": "urn:opendip:model/events" }}
        ],
        "listeners": [{{ "name": "apps", "endpoint": "tcp://127.0.0.1:0", "policy": {{ "models": "all" }} }}],
        "control": true
    }}"#
    )
}

fn timeline(p: &Platform, extra: &[&str]) -> Running {
    let mut cmd = bin("timeline");
    cmd.arg("--endpoint").arg(p.listener_endpoint("apps").unwrap().to_string()).args(extra);
    let t = Running::spawn(cmd);
    assert!(t.wait_stderr("subscribed", WAIT), "timeline did not subscribe");
    t
}

fn write_temp(name: &str, text: &str) -> (tempfile::TempDir, std::path::PathBuf) {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join(name);
    std::fs::write(&path, text).unwrap();
    (dir, path)
}

#[test]
fn platformd_checks_the_shipped_configuration() {
    let mut cmd = bin("platformd");
    cmd.arg("--config").arg(config_dir().join("platform.json")).arg("--check");
    let mut run = Running::spawn(cmd);
    assert_eq!(run.wait(WAIT), Some(0));
    assert_eq!(run.rest(), ["config ok"]);
}

#[test]
fn platformd_reports_a_missing_rule_document() {
    let dir = tempfile::tempdir().unwrap();
    // rule paths resolve against the configuration's directory
    let json = tracker_and_builds("", "");
    let path = dir.path().join("platform.json");
    std::fs::write(&path, json).unwrap();
    let mut cmd = bin("platformd");
    cmd.arg("--config").arg(&path);
    let mut run = Running::spawn(cmd);
    assert_eq!(run.wait(WAIT), Some(2));
    let err = run.stderr_text();
    assert!(err.contains(&dir.path().join("rules/issues-to-cm.json").display().to_string()), "{err}");
}

#[test]
fn platformd_serves_until_interrupted() {
    let mut cmd = bin("platformd");
    cmd.arg("--config")
        .arg(config_dir().join("platform.json"))
        .env("OPENDIP_LISTEN_APPS", "tcp://127.0.0.1:0")
        .env("OPENDIP_LISTEN_BOARD", "ws://127.0.0.1:0/");
    let mut run = Running::spawn(cmd);
    let mut endpoints = Vec::new();
    loop {
        let (_, line) = run.line(WAIT).expect("daemon output");
        if let Some(rest) = line.strip_prefix("listening ") {
            endpoints.push(rest.split(' ').nth(1).unwrap().to_owned());
        }
        if let Some(models) = line.strip_prefix("ready ") {
            assert!(models.split(',').any(|m| m == vocab::MODEL_EVENTS), "{models}");
            break;
        }
    }
    assert_eq!(endpoints.len(), 2);
    let peer = Peer::connect(&endpoints[0].parse().unwrap(), PeerConfig::new("probe")).unwrap();
    assert!(peer.request_root(&Uri::parse(vocab::MODEL_ISSUES).unwrap()).is_ok());
    run.interrupt();
    assert_eq!(run.wait(WAIT), Some(0));
    assert_eq!(run.rest(), ["stopped"]);
    assert!(peer.wait_closed(WAIT));
}

#[test]
fn timeline_on_an_empty_model_prints_only_the_header() {
    let mut p = platform(&tracker_and_builds("", ""));
    let mut t = timeline(&p, &[]);
    let (_, header) = t.line(WAIT).unwrap();
    assert_eq!(header, "# timestamp  kind  summary  source-model");
    p.stop();
    // the session ends without --reconnect
    assert_eq!(t.wait(WAIT), Some(3));
    assert!(t.rest().is_empty());
}

#[test]
fn timeline_filters_by_kind() {
    let mut p = platform(&tracker_and_builds(r#"{ "summary": "a" }"#, r#""", "FAILURE", """#));
    let mut t = timeline(&p, &["--kind", "build-failed", "--codec", "json"]);
    let (_, header) = t.line(WAIT).unwrap();
    assert!(header.starts_with('#'));
    let (_, line) = t.line(WAIT).unwrap();
    let fields: Vec<&str> = line.split("  ").collect();
    assert_eq!(fields[1..], ["build-failed", "app #2", vocab::MODEL_AUTOMATION]);
    p.build_server().unwrap().trigger("app", "FAILURE").unwrap();
    let (_, line) = t.line(WAIT).unwrap();
    assert!(line.contains("  build-failed  app #4  "), "{line}");
    p.stop();
    t.wait(WAIT);
    assert!(t.rest().is_empty());
}

#[test]
fn timeline_stops_after_the_limit() {
    let p = platform(&tracker_and_builds(r#"{ "summary": "a" }, { "summary": "b" }, { "summary": "c" }"#, ""));
    let mut cmd = bin("timeline");
    cmd.args(["--endpoint", &p.listener_endpoint("apps").unwrap().to_string(), "--limit", "2"]);
    let mut t = Running::spawn(cmd);
    assert_eq!(t.wait(WAIT), Some(0));
    let lines = t.rest();
    assert_eq!(lines.len(), 3, "{lines:?}");
    assert!(lines[1].contains("  change-request-created  a  "));
    assert!(lines[2].contains("  change-request-created  b  "));
}

#[test]
fn timeline_exit_codes() {
    let free = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let mut cmd = bin("timeline");
    cmd.args(["--endpoint", &format!("tcp://{free}")]);
    assert_eq!(Running::spawn(cmd).wait(WAIT), Some(3));

    let mut cmd = bin("timeline");
    cmd.args(["--endpoint", "carrier-pigeon://x"]);
    assert_eq!(Running::spawn(cmd).wait(WAIT), Some(2));

    let p = platform(&tracker_and_builds("", ""));
    let mut cmd = bin("timeline");
    cmd.args(["--endpoint", &p.listener_endpoint("apps").unwrap().to_string(), "--model", "urn:opendip:model/none"]);
    assert_eq!(Running::spawn(cmd).wait(WAIT), Some(4));
}

#[test]
fn timeline_reconnects_and_resynchronizes() {
    let p = platform(&tracker_and_builds(r#"{ "summary": "a" }"#, ""));
    let mut t = timeline(&p, &["--reconnect"]);
    t.line(WAIT).unwrap();
    assert!(t.line(WAIT).unwrap().1.contains("  a  "));
    // dropping every session forces a reconnect; the initial event is not repeated
    for s in p.listener("apps").unwrap().sessions() {
        s.close();
    }
    assert!(t.wait_stderr("subscribed", WAIT));
    p.issue_tracker().unwrap().set_status(1, IssueStatus::Done).unwrap();
    let (_, line) = t.line(WAIT).unwrap();
    assert!(line.contains("change-request-status-changed  a is now Closed"), "{line}");
    t.interrupt();
    assert_eq!(t.wait(WAIT), Some(0));
}

#[test]
fn scenario_replays_in_process() {
    let mut cmd = bin("scenario");
    cmd.arg("--script")
        .arg(config_dir().join("scenarios/demo.jsonl"))
        .arg("--config")
        .arg(config_dir().join("platform.json"))
        .arg("--fast")
        .env("OPENDIP_LISTEN_APPS", "tcp://127.0.0.1:0")
        .env("OPENDIP_LISTEN_BOARD", "ws://127.0.0.1:0/");
    let mut run = Running::spawn(cmd);
    assert_eq!(run.wait(WAIT), Some(0));
    assert_eq!(run.rest(), ["applied=20"]);
}

#[test]
fn scenario_reports_the_bad_line() {
    let script = concat!(
        "{\"at_ms\": 0, \"action\": \"create-issue\", \"args\": {\"summary\": \"x\"}}\n",
        "\n",
        "{\"at_ms\": 5, \"action\": \"create-issue\", \"args\": {\"summary\": \n",
    );
    let (_dir, path) = write_temp("bad.jsonl", script);
    let mut cmd = bin("scenario");
    cmd.arg("--script").arg(&path).arg("--endpoint").arg("tcp://127.0.0.1:1").arg("--fast");
    let mut run = Running::spawn(cmd);
    assert_eq!(run.wait(WAIT), Some(2));
    assert!(run.stderr_text().contains("script line 3"));
    assert!(run.rest().is_empty());
}

#[test]
fn scenario_drives_a_running_platform() {
    let p = platform(&tracker_and_builds(r#"{ "summary": "a" }"#, ""));
    let script = concat!(
        "{\"at_ms\": 0, \"action\": \"move-issue\", \"args\": {\"issue\": 1, \"status\": \"Done\"}}\n",
        "{\"at_ms\": 0, \"action\": \"create-issue\", \"args\": {\"summary\": \"b\"}}\n",
        "{\"at_ms\": 0, \"action\": \"fail-build\", \"args\": {\"job\": \"app\"}}\n",
    );
    let (_dir, path) = write_temp("s.jsonl", script);
    let mut cmd = bin("scenario");
    cmd.arg("--script")
        .arg(&path)
        .args(["--endpoint", &p.listener_endpoint("apps").unwrap().to_string(), "--codec", "json", "--fast"])
        .arg("--progress");
    let mut run = Running::spawn(cmd);
    assert_eq!(run.wait(WAIT), Some(0));
    assert_eq!(run.rest(), ["step 1 move-issue", "step 2 create-issue", "step 3 fail-build", "applied=3"]);
    let tracker = p.issue_tracker().unwrap();
    assert_eq!(tracker.get(1).unwrap().status, IssueStatus::Done);
    assert_eq!(tracker.list().unwrap().len(), 2);
    assert_eq!(p.build_server().unwrap().builds("app").unwrap().len(), 1);

    // a failing action stops the replay with status 1
    let (_dir2, bad) = write_temp(
        "s.jsonl",
        "{\"at_ms\": 0, \"action\": \"move-issue\", \"args\": {\"issue\": 9, \"status\": \"Done\"}}\n",
    );
    let mut cmd = bin("scenario");
    cmd.arg("--script").arg(&bad).args(["--endpoint", &p.listener_endpoint("apps").unwrap().to_string(), "--fast"]);
    assert_eq!(Running::spawn(cmd).wait(WAIT), Some(1));
}

#[test]
fn scenario_cannot_reach_a_missing_daemon() {
    let (_dir, path) = write_temp("s.jsonl", "");
    let free = std::net::TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap();
    let mut cmd = bin("scenario");
    cmd.arg("--script").arg(&path).args(["--endpoint", &format!("tcp://{free}")]);
    assert_eq!(Running::spawn(cmd).wait(WAIT), Some(3));
}
