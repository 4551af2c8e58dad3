//! Sessions: one IO thread per connection, symmetric roles. Either side may
//! export entities and consume the other side's.

use std::collections::HashMap;
use std::net::{SocketAddr, TcpListener};
use std::sync::atomic::{AtomicBool, AtomicU64, Ordering};
use std::sync::{Arc, OnceLock};
use std::thread::{self, JoinHandle, ThreadId};
use std::time::{Duration, Instant};

use crossbeam_channel::{Receiver, RecvTimeoutError, Sender};
use opendip_core::{EntityKey, EntityRef, ModelRegistry, Uri, Value};
use parking_lot::{Condvar, Mutex};

use crate::codec::Codec;
use crate::connection::{Connection, Endpoint, TransportKind};
use crate::export::Exporter;
use crate::message::{ErrorCode, WireMessage, PROTOCOL_VERSION};
use crate::policy::ExposurePolicy;
use crate::proxy::Importer;
use crate::TransportError;

const HANDSHAKE_TIMEOUT: Duration = Duration::from_secs(5);

#[derive(Clone)]
pub struct PeerConfig {
    pub name: String,
    /// Codec for outgoing messages. Listeners answer in the codec of the
    /// client's HELLO instead.
    pub codec: Codec,
    pub policy: ExposurePolicy,
    pub registry: Option<ModelRegistry>,
    /// Bound on waiting for SET_RESULT and request round trips.
    pub request_timeout: Duration,
    /// Listeners only: refuse clients whose HELLO uses another codec.
    pub only_codec: Option<Codec>,
}

impl PeerConfig {
    pub fn new(name: impl Into<String>) -> Self {
        PeerConfig {
            name: name.into(),
            codec: Codec::Binary,
            policy: ExposurePolicy::closed(),
            registry: None,
            request_timeout: Duration::from_secs(5),
            only_codec: None,
        }
    }

    pub fn codec(mut self, codec: Codec) -> Self {
        self.codec = codec;
        self
    }

    pub fn only_codec(mut self, codec: Codec) -> Self {
        self.only_codec = Some(codec);
        self
    }

    pub fn export(mut self, registry: ModelRegistry, policy: ExposurePolicy) -> Self {
        self.registry = Some(registry);
        self.policy = policy;
        self
    }
}

impl std::fmt::Debug for PeerConfig {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("PeerConfig")
            .field("name", &self.name)
            .field("codec", &self.codec)
            .field("policy", &self.policy)
            .finish_non_exhaustive()
    }
}

pub(crate) struct SessionInner {
    pub(crate) config: PeerConfig,
    remote_name: String,
    codec: Codec,
    out: Sender<WireMessage>,
    io_thread: OnceLock<ThreadId>,
    closing: AtomicBool,
    closed: Mutex<bool>,
    closed_cv: Condvar,
    pub(crate) exporter: Exporter,
    pub(crate) importer: Importer,
    next_nonce: AtomicU64,
    pongs: Mutex<HashMap<u64, Sender<()>>>,
    /// Remote models this peer put into its own registry.
    adopted: Mutex<Vec<(Uri, EntityRef)>>,
}

impl SessionInner {
    pub(crate) fn send(&self, msg: WireMessage) {
        // the receiver lives as long as the IO thread; afterwards sends are moot
        let _ = self.out.send(msg);
    }

    pub(crate) fn on_io_thread(&self) -> bool {
        self.io_thread.get() == Some(&thread::current().id())
    }

    pub(crate) fn is_closed(&self) -> bool {
        *self.closed.lock() || self.closing.load(Ordering::Acquire)
    }

    /// Round trip through the other side: everything sent before has been
    /// processed there and everything it sent in response has been handled
    /// here once this returns.
    pub(crate) fn barrier(&self) -> Result<(), TransportError> {
        if self.on_io_thread() {
            return Err(TransportError::OnSessionThread);
        }
        if self.is_closed() {
            return Err(TransportError::Closed);
        }
        let nonce = self.next_nonce.fetch_add(1, Ordering::Relaxed) + 1;
        let (tx, rx) = crossbeam_channel::bounded(1);
        self.pongs.lock().insert(nonce, tx);
        self.send(WireMessage::Ping { nonce });
        let result = rx.recv_timeout(self.config.request_timeout);
        self.pongs.lock().remove(&nonce);
        match result {
            Ok(()) => Ok(()),
            Err(RecvTimeoutError::Timeout) => Err(TransportError::Timeout("PONG")),
            Err(RecvTimeoutError::Disconnected) => Err(TransportError::Closed),
        }
    }

    fn handle(self: &Arc<Self>, msg: WireMessage) {
        match msg {
            WireMessage::Hello { .. } => {
                self.send(WireMessage::error(ErrorCode::Protocol, "HELLO after handshake"));
            }
            WireMessage::RegistryRequest { model_uri } => self.exporter.handle_registry_request(self, model_uri),
            WireMessage::RootAnnounce { model_uri, root } => {
                self.importer.proxy(self, &root);
                self.importer.announced.lock().insert(model_uri, root);
            }
            WireMessage::Subscribe { target, include_descendants } => {
                self.exporter.subscribe(self, target, include_descendants)
            }
            WireMessage::Unsubscribe { target } => self.exporter.unsubscribe(&target),
            WireMessage::EntityState { nodes } => self.importer.apply_state(self, nodes),
            WireMessage::Change { correlation, event } => self.importer.apply_change(self, correlation, event),
            WireMessage::Set { correlation, target, key, value, origin } => {
                self.exporter.handle_set(self, correlation, target, key, value, origin)
            }
            WireMessage::SetResult { correlation, outcome } => self.importer.complete_set(correlation, outcome),
            WireMessage::Error { code, detail } => {
                tracing::warn!(peer = %self.remote_name, %code, %detail, "error from peer");
                if matches!(code, ErrorCode::Shutdown | ErrorCode::VersionMismatch) {
                    self.closing.store(true, Ordering::Release);
                }
                self.importer.errors.lock().push(crate::message::WireError { code, detail });
            }
            WireMessage::Ping { nonce } => self.send(WireMessage::Pong { nonce }),
            WireMessage::Pong { nonce } => {
                if let Some(tx) = self.pongs.lock().remove(&nonce) {
                    let _ = tx.send(());
                }
            }
        }
    }

    fn run(self: Arc<Self>, mut conn: Connection, rx: Receiver<WireMessage>) {
        let _ = self.io_thread.set(thread::current().id());
        let result = 'outer: loop {
            while let Ok(msg) = rx.try_recv() {
                if let Err(e) = conn.send(self.codec, &msg) {
                    break 'outer Err(e);
                }
            }
            if self.closing.load(Ordering::Acquire) {
                break Ok(());
            }
            match conn.recv_raw() {
                Ok(None) => {}
                Ok(Some((codec, payload))) => match codec.decode(&payload) {
                    Ok(msg) => self.handle(msg),
                    Err(e) => {
                        tracing::warn!(peer = %self.remote_name, error = %e, "undecodable message");
                        self.send(WireMessage::error(ErrorCode::Protocol, e.to_string()));
                    }
                },
                Err(e) => break Err(e),
            }
        };
        match result {
            Ok(()) | Err(TransportError::Closed) => {
                tracing::info!(peer = %self.remote_name, "session closed")
            }
            Err(e) => tracing::warn!(peer = %self.remote_name, error = %e, "session failed"),
        }
        conn.close();
        self.finish();
    }

    fn finish(&self) {
        self.closing.store(true, Ordering::Release);
        self.pongs.lock().clear();
        self.importer.fail_pending();
        self.exporter.clear();
        if let Some(registry) = &self.config.registry {
            for (uri, proxy) in self.adopted.lock().drain(..) {
                if registry.lookup_root(&uri).is_some_and(|r| Arc::ptr_eq(&r, &proxy)) {
                    registry.unregister_root(&uri);
                }
            }
        }
        *self.closed.lock() = true;
        self.closed_cv.notify_all();
    }
}

/// One end of an established session.
#[derive(Clone)]
pub struct Peer {
    inner: Arc<SessionInner>,
    // absent for internal handles that must not end the session
    _guard: Option<Arc<CloseOnDrop>>,
}

struct CloseOnDrop(Arc<SessionInner>);

impl Drop for CloseOnDrop {
    fn drop(&mut self) {
        shut(&self.0);
    }
}

fn shut(inner: &SessionInner) {
    if !inner.is_closed() {
        inner.send(WireMessage::error(ErrorCode::Shutdown, "peer closing"));
        inner.closing.store(true, Ordering::Release);
    }
}

impl Peer {
    /// Connects, exchanges HELLO and starts the session thread.
    pub fn connect(endpoint: &Endpoint, config: PeerConfig) -> Result<Peer, TransportError> {
        let mut conn = Connection::connect(endpoint)?;
        let codec = config.codec;
        conn.send(codec, &WireMessage::Hello { version: PROTOCOL_VERSION, peer_name: config.name.clone() })?;
        let remote_name = match conn.recv_timeout(HANDSHAKE_TIMEOUT)? {
            Some((_, WireMessage::Hello { version, peer_name })) => {
                if version != PROTOCOL_VERSION {
                    let _ = conn.send(
                        codec,
                        &WireMessage::error(ErrorCode::VersionMismatch, format!("expected version {PROTOCOL_VERSION}")),
                    );
                    conn.close();
                    return Err(TransportError::VersionMismatch { ours: PROTOCOL_VERSION, theirs: version });
                }
                peer_name
            }
            Some((_, WireMessage::Error { code, detail })) => return Err(TransportError::Remote { code, detail }),
            Some((_, other)) => return Err(TransportError::Protocol(format!("expected HELLO, got {}", other.name()))),
            None => return Err(TransportError::Timeout("HELLO")),
        };
        Ok(Peer::start(conn, codec, remote_name, config))
    }

    fn start(conn: Connection, codec: Codec, remote_name: String, config: PeerConfig) -> Peer {
        let (tx, rx) = crossbeam_channel::unbounded();
        let accept_remote = config.policy.accept_remote_registry && config.registry.is_some();
        let inner = Arc::new(SessionInner {
            config,
            remote_name,
            codec,
            out: tx,
            io_thread: OnceLock::new(),
            closing: AtomicBool::new(false),
            closed: Mutex::new(false),
            closed_cv: Condvar::new(),
            exporter: Exporter::default(),
            importer: Importer::default(),
            next_nonce: AtomicU64::new(0),
            pongs: Mutex::new(HashMap::new()),
            adopted: Mutex::new(Vec::new()),
        });
        tracing::info!(peer = %inner.remote_name, %codec, "session established");
        let runner = inner.clone();
        thread::Builder::new()
            .name(format!("session-{}", inner.remote_name))
            .spawn(move || runner.run(conn, rx))
            .expect("spawn session thread");
        let peer = Peer { _guard: Some(Arc::new(CloseOnDrop(inner.clone()))), inner };
        if accept_remote {
            let weak = Arc::downgrade(&peer.inner);
            thread::spawn(move || {
                if let Some(inner) = weak.upgrade() {
                    adopt_remote_models(&inner);
                }
            });
        }
        peer
    }

    pub fn remote_name(&self) -> &str {
        &self.inner.remote_name
    }

    pub fn local_name(&self) -> &str {
        &self.inner.config.name
    }

    pub fn codec(&self) -> Codec {
        self.inner.codec
    }

    pub fn is_closed(&self) -> bool {
        self.inner.is_closed()
    }

    /// Waits for the session thread to wind down.
    pub fn wait_closed(&self, timeout: Duration) -> bool {
        let deadline = Instant::now() + timeout;
        let mut closed = self.inner.closed.lock();
        while !*closed {
            if self.inner.closed_cv.wait_until(&mut closed, deadline).timed_out() {
                return *closed;
            }
        }
        true
    }

    pub fn close(&self) {
        shut(&self.inner);
    }

    /// Round trip to the other side.
    pub fn sync(&self) -> Result<(), TransportError> {
        self.inner.barrier()
    }

    /// Sends a request and fails with the first ERROR it provoked.
    fn request(&self, msg: WireMessage) -> Result<(), TransportError> {
        let mark = self.inner.importer.errors.lock().len();
        self.inner.send(msg);
        self.inner.barrier()?;
        match self.inner.importer.errors.lock().get(mark).cloned() {
            Some(e) => Err(TransportError::Remote { code: e.code, detail: e.detail }),
            None => Ok(()),
        }
    }

    /// Subscribes to an announced or referenced entity and returns its proxy
    /// once the initial state has arrived.
    pub fn subscribe(&self, target: &EntityKey, include_descendants: bool) -> Result<EntityRef, TransportError> {
        self.request(WireMessage::Subscribe { target: target.clone(), include_descendants })?;
        Ok(self.inner.importer.proxy(&self.inner, target))
    }

    /// Mirrors the other side's registry. Its properties reference proxies
    /// for every exported model root.
    pub fn remote_registry(&self) -> Result<EntityRef, TransportError> {
        self.request(WireMessage::RegistryRequest { model_uri: None })?;
        let key = self.announced(None)?;
        self.subscribe(&key, true)
    }

    /// Mirrors one exported model.
    pub fn request_root(&self, model: &Uri) -> Result<EntityRef, TransportError> {
        self.request(WireMessage::RegistryRequest { model_uri: Some(model.to_string()) })?;
        let key = self.announced(Some(model.to_string()))?;
        self.subscribe(&key, true)
    }

    /// `(model URI, root proxy)` for everything the other side exports.
    pub fn mirror_all(&self) -> Result<Vec<(Uri, EntityRef)>, TransportError> {
        let registry = self.remote_registry()?;
        Ok(registry
            .properties()
            .into_iter()
            .filter_map(|(k, v)| match v {
                Value::Ref(root) => Uri::parse(k.as_str()).ok().map(|u| (u, root)),
                _ => None,
            })
            .collect())
    }

    fn announced(&self, model: Option<String>) -> Result<EntityKey, TransportError> {
        self.inner
            .importer
            .announced
            .lock()
            .get(&model)
            .cloned()
            .ok_or_else(|| TransportError::Protocol(format!("no ROOT_ANNOUNCE for {model:?}")))
    }
}

impl std::fmt::Debug for Peer {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("Peer")
            .field("remote", &self.inner.remote_name)
            .field("codec", &self.inner.codec)
            .field("closed", &self.is_closed())
            .finish()
    }
}

fn adopt_remote_models(inner: &Arc<SessionInner>) {
    let peer = Peer { _guard: None, inner: inner.clone() };
    let registry = inner.config.registry.as_ref().expect("checked by caller");
    match peer.mirror_all() {
        Ok(models) => {
            for (uri, root) in models {
                if registry.lookup_root(&uri).is_some() {
                    tracing::info!(model = %uri, "keeping local model over remote one");
                    continue;
                }
                registry.register_root(&uri, root.clone());
                inner.adopted.lock().push((uri, root));
            }
        }
        Err(e) => tracing::info!(peer = %inner.remote_name, error = %e, "remote registry not adopted"),
    }
}

/// Accepts sessions on a TCP or WebSocket endpoint.
pub struct Listener {
    shared: Arc<ListenerShared>,
    thread: Option<JoinHandle<()>>,
}

struct ListenerShared {
    kind: TransportKind,
    local_addr: SocketAddr,
    config: PeerConfig,
    sessions: Mutex<Vec<Peer>>,
    arrived: Condvar,
    stop: AtomicBool,
}

impl Listener {
    pub fn bind(endpoint: &Endpoint, config: PeerConfig) -> Result<Listener, TransportError> {
        let socket = TcpListener::bind(&endpoint.address)
            .map_err(|e| TransportError::Connect { endpoint: endpoint.to_string(), message: e.to_string() })?;
        socket.set_nonblocking(true).map_err(|e| TransportError::Io(e.to_string()))?;
        let local_addr = socket.local_addr().map_err(|e| TransportError::Io(e.to_string()))?;
        let shared = Arc::new(ListenerShared {
            kind: endpoint.kind,
            local_addr,
            config,
            sessions: Mutex::new(Vec::new()),
            arrived: Condvar::new(),
            stop: AtomicBool::new(false),
        });
        let s = shared.clone();
        let thread = thread::Builder::new()
            .name(format!("listen-{local_addr}"))
            .spawn(move || accept_loop(&s, socket))
            .expect("spawn listener");
        tracing::info!(endpoint = %Endpoint { kind: endpoint.kind, address: local_addr.to_string() }, "listening");
        Ok(Listener { shared, thread: Some(thread) })
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.shared.local_addr
    }

    /// The bound endpoint, with the actual port.
    pub fn endpoint(&self) -> Endpoint {
        Endpoint { kind: self.shared.kind, address: self.shared.local_addr.to_string() }
    }

    /// Open sessions, oldest first.
    pub fn sessions(&self) -> Vec<Peer> {
        let mut sessions = self.shared.sessions.lock();
        sessions.retain(|p| !p.is_closed());
        sessions.clone()
    }

    /// Waits until at least `n` sessions are open.
    pub fn wait_for_sessions(&self, n: usize, timeout: Duration) -> Vec<Peer> {
        let deadline = Instant::now() + timeout;
        let mut sessions = self.shared.sessions.lock();
        loop {
            sessions.retain(|p| !p.is_closed());
            if sessions.len() >= n || self.shared.arrived.wait_until(&mut sessions, deadline).timed_out() {
                sessions.retain(|p| !p.is_closed());
                return sessions.clone();
            }
        }
    }

    /// Stops accepting and closes every session.
    pub fn shutdown(&mut self) {
        self.shared.stop.store(true, Ordering::Release);
        if let Some(t) = self.thread.take() {
            let _ = t.join();
        }
        let sessions: Vec<Peer> = self.shared.sessions.lock().drain(..).collect();
        for p in &sessions {
            p.close();
        }
        for p in &sessions {
            p.wait_closed(Duration::from_secs(2));
        }
    }
}

impl Drop for Listener {
    fn drop(&mut self) {
        self.shutdown();
    }
}

fn accept_loop(shared: &Arc<ListenerShared>, socket: TcpListener) {
    while !shared.stop.load(Ordering::Acquire) {
        match socket.accept() {
            Ok((stream, addr)) => {
                if stream.set_nonblocking(false).is_err() {
                    continue;
                }
                let shared = shared.clone();
                thread::spawn(move || match handshake(&shared, stream) {
                    Ok(peer) => {
                        if shared.stop.load(Ordering::Acquire) {
                            peer.close();
                            return;
                        }
                        shared.sessions.lock().push(peer);
                        shared.arrived.notify_all();
                    }
                    Err(e) => tracing::warn!(%addr, error = %e, "handshake failed"),
                });
            }
            Err(e) if e.kind() == std::io::ErrorKind::WouldBlock => thread::sleep(Duration::from_millis(10)),
            Err(e) => {
                tracing::warn!(error = %e, "accept failed");
                thread::sleep(Duration::from_millis(10));
            }
        }
    }
}

fn handshake(shared: &ListenerShared, stream: std::net::TcpStream) -> Result<Peer, TransportError> {
    let mut conn = Connection::accept(stream, shared.kind)?;
    let (codec, msg) = conn.recv_timeout(HANDSHAKE_TIMEOUT)?.ok_or(TransportError::Timeout("HELLO"))?;
    match msg {
        WireMessage::Hello { .. } if shared.config.only_codec.is_some_and(|c| c != codec) => {
            let only = shared.config.only_codec.expect("checked");
            let _ = conn.send(codec, &WireMessage::error(ErrorCode::Protocol, format!("this endpoint speaks {only}")));
            conn.close();
            Err(TransportError::Protocol(format!("client used {codec}, endpoint speaks {only}")))
        }
        WireMessage::Hello { version, peer_name } if version == PROTOCOL_VERSION => {
            conn.send(codec, &WireMessage::Hello { version: PROTOCOL_VERSION, peer_name: shared.config.name.clone() })?;
            Ok(Peer::start(conn, codec, peer_name, shared.config.clone()))
        }
        WireMessage::Hello { version, .. } => {
            let _ = conn.send(
                codec,
                &WireMessage::error(
                    ErrorCode::VersionMismatch,
                    format!("this peer speaks version {PROTOCOL_VERSION}, got {version}"),
                ),
            );
            conn.close();
            Err(TransportError::VersionMismatch { ours: PROTOCOL_VERSION, theirs: version })
        }
        other => {
            let _ = conn
                .send(codec, &WireMessage::error(ErrorCode::Protocol, format!("expected HELLO, got {}", other.name())));
            conn.close();
            Err(TransportError::Protocol("first message was not HELLO".into()))
        }
    }
}
