//! The Timeline client: mirrors an event model and prints one line per event.

use std::collections::HashSet;
use std::io::Write;
use std::sync::atomic::{AtomicBool, Ordering};
use std::time::Duration;

use chrono::{DateTime, SecondsFormat};
use opendip_core::mapping::{read_record, vocab, EventRecord};
use opendip_core::{observe_with, EntityRef, Uri, Value};
use opendip_transport::{Codec, Endpoint, Peer, PeerConfig, TransportError};
use thiserror::Error;

pub const HEADER: &str = "# timestamp  kind  summary  source-model";

#[derive(Debug, Clone)]
pub struct TimelineOptions {
    pub endpoint: Endpoint,
    pub codec: Codec,
    pub model: Uri,
    /// Only these kinds, if any are given.
    pub kinds: Vec<String>,
    /// Only these source models, if any are given. A value matches the full
    /// model URI or its last path segment.
    pub sources: Vec<String>,
    /// Reconnect and resynchronize when the session drops.
    pub reconnect: bool,
    /// Exit after printing this many lines.
    pub limit: Option<usize>,
}

impl TimelineOptions {
    pub fn new(endpoint: Endpoint, codec: Codec) -> Self {
        TimelineOptions {
            endpoint,
            codec,
            model: Uri::parse(vocab::MODEL_EVENTS).expect("valid"),
            kinds: Vec::new(),
            sources: Vec::new(),
            reconnect: false,
            limit: None,
        }
    }

    pub fn accepts(&self, record: &EventRecord) -> bool {
        let kind_ok = self.kinds.is_empty() || self.kinds.contains(&record.kind);
        let source_ok = self.sources.is_empty()
            || self
                .sources
                .iter()
                .any(|s| *s == record.source_model || record.source_model.rsplit('/').next() == Some(s.as_str()));
        kind_ok && source_ok
    }
}

#[derive(Debug, Error)]
pub enum TimelineError {
    #[error("cannot connect: {0}")]
    Connect(TransportError),
    #[error("session lost: {0}")]
    Lost(TransportError),
    #[error("{0}")]
    Protocol(TransportError),
    #[error("output: {0}")]
    Output(#[from] std::io::Error),
}

/// `ISO-timestamp  kind  summary  source-model`
pub fn format_line(record: &EventRecord) -> String {
    let ts = DateTime::from_timestamp_millis(record.timestamp)
        .map(|t| t.to_rfc3339_opts(SecondsFormat::Millis, true))
        .unwrap_or_else(|| record.timestamp.to_string());
    format!("{ts}  {}  {}  {}", record.kind, record.summary, record.source_model)
}

/// Initial events in timestamp order; ties keep log order.
pub fn initial_order(mut events: Vec<(EntityRef, EventRecord)>) -> Vec<(EntityRef, EventRecord)> {
    events.sort_by_key(|(_, r)| r.timestamp);
    events
}

struct Printer<'a, W: Write> {
    options: &'a TimelineOptions,
    out: W,
    // event id plus content: ids restart when the daemon does
    seen: HashSet<(String, i64, String, String, String)>,
    printed: usize,
}

impl<W: Write> Printer<'_, W> {
    /// Prints unless filtered or already shown. Returns whether the limit
    /// has been reached.
    fn show(&mut self, event: &EntityRef, record: EventRecord) -> std::io::Result<bool> {
        let key = (
            event.id().to_string(),
            record.timestamp,
            record.kind.clone(),
            record.summary.clone(),
            record.source_model.clone(),
        );
        if !self.seen.insert(key) || !self.options.accepts(&record) {
            return Ok(self.done());
        }
        writeln!(self.out, "{}", format_line(&record))?;
        self.out.flush()?;
        self.printed += 1;
        Ok(self.done())
    }

    fn done(&self) -> bool {
        self.options.limit.is_some_and(|l| self.printed >= l)
    }
}

/// Runs until the limit is reached, `stop` is set, or the session drops
/// without `reconnect`. Returns the number of lines printed.
pub fn run(options: &TimelineOptions, out: impl Write, stop: &AtomicBool) -> Result<usize, TimelineError> {
    let mut printer = Printer { options, out, seen: HashSet::new(), printed: 0 };
    writeln!(printer.out, "{HEADER}")?;
    printer.out.flush()?;
    if printer.done() {
        return Ok(0);
    }
    let mut connected_once = false;
    let mut backoff = Duration::from_millis(100);
    loop {
        let peer = match Peer::connect(&options.endpoint, PeerConfig::new("timeline").codec(options.codec)) {
            Ok(p) => p,
            Err(e) if !options.reconnect => {
                return Err(if connected_once { TimelineError::Lost(e) } else { TimelineError::Connect(e) })
            }
            Err(e) => {
                tracing::warn!(endpoint = %options.endpoint, error = %e, ?backoff, "connect failed, retrying");
                if wait_or_stop(stop, backoff) {
                    return Ok(printer.printed);
                }
                backoff = (backoff * 2).min(Duration::from_secs(2));
                continue;
            }
        };
        connected_once = true;
        backoff = Duration::from_millis(100);
        let root = match peer.request_root(&options.model) {
            Ok(root) => root,
            Err(e @ TransportError::Remote { .. }) => return Err(TimelineError::Protocol(e)),
            Err(e) if options.reconnect => {
                tracing::warn!(error = %e, "subscription failed, reconnecting");
                continue;
            }
            Err(e) => return Err(TimelineError::Lost(e)),
        };
        tracing::info!(endpoint = %options.endpoint, model = %options.model, "subscribed");

        // observer first, so nothing falls between the initial read and the stream
        let (tx, rx) = crossbeam_channel::unbounded::<EntityRef>();
        let _sub = observe_with(&*root, move |ev| {
            if let Some(Value::Ref(event)) = &ev.new_value {
                let _ = tx.send(event.clone());
            }
        })
        .map_err(|e| TimelineError::Protocol(TransportError::Protocol(e.to_string())))?;
        let initial: Vec<(EntityRef, EventRecord)> = root
            .properties()
            .into_iter()
            .filter_map(|(_, v)| v.as_entity().cloned())
            .map(|e| {
                let r = read_record(&*e);
                (e, r)
            })
            .collect();
        for (event, record) in initial_order(initial) {
            if printer.show(&event, record)? {
                return Ok(printer.printed);
            }
        }
        loop {
            if stop.load(Ordering::Acquire) {
                peer.close();
                return Ok(printer.printed);
            }
            match rx.recv_timeout(Duration::from_millis(50)) {
                Ok(event) => {
                    let record = read_record(&*event);
                    if printer.show(&event, record)? {
                        peer.close();
                        return Ok(printer.printed);
                    }
                }
                Err(_) if peer.is_closed() => break,
                Err(_) => {}
            }
        }
        if !options.reconnect {
            return Err(TimelineError::Lost(TransportError::Closed));
        }
        tracing::warn!(endpoint = %options.endpoint, "session dropped, reconnecting");
    }
}

fn wait_or_stop(stop: &AtomicBool, total: Duration) -> bool {
    let deadline = std::time::Instant::now() + total;
    while std::time::Instant::now() < deadline {
        if stop.load(Ordering::Acquire) {
            return true;
        }
        std::thread::sleep(Duration::from_millis(20));
    }
    stop.load(Ordering::Acquire)
}
