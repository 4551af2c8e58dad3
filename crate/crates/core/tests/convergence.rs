//! Bidirectional sync between the issue model and the change-management
//! model under random interleaved writes.

use std::collections::BTreeMap;
use std::sync::atomic::{AtomicUsize, Ordering};
use std::sync::Arc;
use std::time::Duration;

use opendip_core::connectors::{connect_issue_tracker, ConnectorConfig, IssueStatus, SimIssueTracker};
use opendip_core::entity::DeepWatch;
use opendip_core::mapping::{builtin, derive, vocab};
use opendip_core::{ChangeEvent, EntityRef, OriginToken, Value};
use proptest::prelude::*;

const CM_STATUS: [&str; 3] = ["Open", "In Progress", "Closed"];
const HARD_CAP: usize = 10_000;

#[derive(Debug, Clone)]
enum Write {
    /// Through the connector-backed issue entity.
    Source {
        issue: u64,
        status: Option<usize>,
        summary: Option<String>,
    },
    /// Straight into the tool, picked up by the next poll.
    Tool {
        issue: u64,
        status: usize,
    },
    /// Through the change-management entity.
    Target {
        issue: u64,
        status: Option<usize>,
        title: Option<String>,
    },
    Create(String),
}

fn write() -> impl Strategy<Value = Write> {
    let issue = 1u64..5;
    let text = "[ab]{1,2}";
    prop_oneof![
        3 => (issue.clone(), proptest::option::of(0usize..3), proptest::option::of(text))
            .prop_filter("one field", |(_, s, t)| s.is_some() != t.is_some())
            .prop_map(|(issue, status, summary)| Write::Source { issue, status, summary }),
        2 => (issue.clone(), 0usize..3).prop_map(|(issue, status)| Write::Tool { issue, status }),
        3 => (issue, proptest::option::of(0usize..3), proptest::option::of(text))
            .prop_filter("one field", |(_, s, t)| s.is_some() != t.is_some())
            .prop_map(|(issue, status, title)| Write::Target { issue, status, title }),
        1 => "[a-z]{3}".prop_map(Write::Create),
    ]
}

fn counter(root: &EntityRef, count: Arc<AtomicUsize>) -> DeepWatch {
    DeepWatch::new(
        root,
        Arc::new(move |_: &ChangeEvent| {
            let n = count.fetch_add(1, Ordering::SeqCst) + 1;
            assert!(n <= HARD_CAP, "notification storm: {n} events");
        }),
    )
}

fn child(e: &EntityRef, key: &str) -> EntityRef {
    e.get(key).expect("present").as_entity().unwrap().clone()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(100))]

    #[test]
    fn interleaved_writes_converge_without_echo(script in proptest::collection::vec(write(), 50)) {
        let tool = SimIssueTracker::new();
        for s in ["a", "b", "c", "d"] {
            tool.create(s).unwrap();
        }
        let connector = connect_issue_tracker(tool.clone(), ConnectorConfig::manual("tracker")).unwrap();
        let cm = derive(builtin::issues_to_cm(), connector.root()).unwrap();
        let source_root = connector.root();
        let target_root = cm.target_root();
        let source_count = Arc::new(AtomicUsize::new(0));
        let target_count = Arc::new(AtomicUsize::new(0));
        let _w1 = counter(&source_root, source_count.clone());
        let _w2 = counter(&target_root, target_count.clone());

        // oracle: issue id -> (summary, status index)
        let mut oracle: BTreeMap<u64, (String, usize)> =
            (1..=4).map(|i| (i, (["a", "b", "c", "d"][i as usize - 1].to_owned(), 0))).collect();
        let mut effective = 0usize;
        let writer = OriginToken::new("script").unwrap();
        for w in &script {
            match w {
                Write::Source { issue, status, summary } => {
                    let e = child(&source_root, &issue.to_string());
                    let state = oracle.get_mut(issue).unwrap();
                    if let Some(s) = status {
                        effective += usize::from(state.1 != *s);
                        state.1 = *s;
                        e.set("status", Value::text(IssueStatus::ALL[*s].as_str()), &writer).unwrap();
                    }
                    if let Some(t) = summary {
                        effective += usize::from(state.0 != *t);
                        state.0 = t.clone();
                        e.set("summary", Value::text(t.as_str()), &writer).unwrap();
                    }
                }
                Write::Tool { issue, status } => {
                    let state = oracle.get_mut(issue).unwrap();
                    effective += usize::from(state.1 != *status);
                    state.1 = *status;
                    tool.set_status(*issue, IssueStatus::ALL[*status]).unwrap();
                    connector.poll_now().unwrap();
                }
                Write::Target { issue, status, title } => {
                    let e = child(&target_root, &issue.to_string());
                    let state = oracle.get_mut(issue).unwrap();
                    if let Some(s) = status {
                        effective += usize::from(state.1 != *s);
                        state.1 = *s;
                        e.set(vocab::CM_STATUS, Value::text(CM_STATUS[*s]), &writer).unwrap();
                    }
                    if let Some(t) = title {
                        effective += usize::from(state.0 != *t);
                        state.0 = t.clone();
                        e.set(vocab::DCTERMS_TITLE, Value::text(t.as_str()), &writer).unwrap();
                    }
                }
                Write::Create(s) => {
                    // new issues only become visible through a poll
                    let id = tool.create(s).unwrap();
                    oracle.insert(id, (s.clone(), 0));
                    effective += 1;
                    connector.poll_now().unwrap();
                }
            }
        }
        prop_assert_eq!(source_count.load(Ordering::SeqCst), effective);
        prop_assert_eq!(target_count.load(Ordering::SeqCst), effective);
        // both sides and the tool agree with the oracle
        for (id, (summary, status)) in &oracle {
            let native = tool.get(*id).unwrap();
            prop_assert_eq!(&native.summary, summary);
            prop_assert_eq!(native.status, IssueStatus::ALL[*status]);
            let cr = child(&target_root, &id.to_string());
            prop_assert_eq!(cr.get(vocab::DCTERMS_TITLE), Some(Value::text(summary.as_str())));
            prop_assert_eq!(cr.get(vocab::CM_STATUS), Some(Value::text(CM_STATUS[*status])));
        }
        prop_assert_eq!(connector.poll_now().unwrap(), 0);
    }
}

#[test]
fn concurrent_writers_on_both_sides_converge() {
    let tool = SimIssueTracker::new();
    for s in ["a", "b", "c"] {
        tool.create(s).unwrap();
    }
    let connector =
        connect_issue_tracker(tool.clone(), ConnectorConfig::new("tracker").with_interval(Duration::from_millis(5)))
            .unwrap();
    let cm = derive(builtin::issues_to_cm(), connector.root()).unwrap();
    let source_root = connector.root();
    let target_root = cm.target_root();
    let count = Arc::new(AtomicUsize::new(0));
    let _w1 = counter(&source_root, count.clone());
    let _w2 = counter(&target_root, count.clone());

    std::thread::scope(|scope| {
        for t in 0..4u64 {
            let (source_root, target_root, tool) = (source_root.clone(), target_root.clone(), tool.clone());
            scope.spawn(move || {
                let o = OriginToken::new(format!("writer-{t}")).unwrap();
                for i in 0..150u64 {
                    let issue = (i + t) % 3 + 1;
                    let s = ((i * 7 + t) % 3) as usize;
                    match (i + t) % 3 {
                        0 => child(&target_root, &issue.to_string())
                            .set(vocab::CM_STATUS, Value::text(CM_STATUS[s]), &o)
                            .unwrap(),
                        1 => child(&source_root, &issue.to_string())
                            .set("status", Value::text(IssueStatus::ALL[s].as_str()), &o)
                            .unwrap(),
                        _ => tool.set_status(issue, IssueStatus::ALL[s]).unwrap(),
                    }
                }
            });
        }
    });
    connector.stop();
    connector.poll_now().unwrap();
    for id in 1..=3u64 {
        let native = tool.get(id).unwrap();
        let idx = IssueStatus::ALL.iter().position(|s| *s == native.status).unwrap();
        let cr = child(&target_root, &id.to_string());
        assert_eq!(cr.get(vocab::CM_STATUS), Some(Value::text(CM_STATUS[idx])), "issue {id} diverged");
    }
    assert!(count.load(Ordering::SeqCst) <= 2 * 600 + 6);
}
