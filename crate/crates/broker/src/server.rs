//! Websocket front end for the registry.
//!
//! `/ws` is the signaling broker, `/sfu` the forwarding server. Each text
//! frame carries one line. A single lock around each registry serializes
//! every stream transition; outbound lines go through bounded per-session
//! queues so one slow reader cannot stall the rest.

use std::collections::{HashMap, VecDeque};
use std::net::SocketAddr;
use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::{Arc, Mutex};
use std::time::{Duration, SystemTime, UNIX_EPOCH};

use axum::extract::ws::{Message, WebSocket, WebSocketUpgrade};
use axum::extract::{Query, State};
use axum::http::{HeaderMap, StatusCode};
use axum::response::{IntoResponse, Response};
use axum::routing::get;
use axum::{Json, Router};
use futures_util::{SinkExt, StreamExt};
use namedstream_core::service::{PeerId, Service, ServiceOut};
use namedstream_core::stream::StreamRef;
use namedstream_core::wire::{ErrorCode, ErrorPayload, MessageKind, SignalEnvelope};
use namedstream_core::EndpointId;
use serde::Deserialize;
use tokio::net::TcpListener;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use crate::registry::{Registry, RegistryConfig};
use crate::webhook::Dispatcher;

/// Outbound envelopes buffered per session before it is cut off.
pub const SEND_QUEUE: usize = 1024;

#[derive(Debug, Clone)]
pub struct ServerConfig {
    pub token: Option<String>,
    pub idle_gc: Duration,
    /// Serve `/streams`. On by default in debug builds.
    pub debug_routes: bool,
    pub webhook_timeout: Duration,
}

impl Default for ServerConfig {
    fn default() -> Self {
        Self {
            token: None,
            idle_gc: Duration::from_secs(60),
            debug_routes: cfg!(debug_assertions),
            webhook_timeout: Duration::from_secs(2),
        }
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map(|d| d.as_millis() as u64)
        .unwrap_or(0)
}

struct PeerTx {
    lines: mpsc::Sender<String>,
    close: Option<oneshot::Sender<Option<String>>>,
}

struct Core {
    registry: Registry,
    peers: HashMap<PeerId, PeerTx>,
}

struct Hub {
    core: Mutex<Core>,
    hooks: Dispatcher,
    next_peer: AtomicU64,
}

impl Hub {
    fn new(cfg: RegistryConfig, hooks: Dispatcher) -> Self {
        Self {
            core: Mutex::new(Core {
                registry: Registry::new(cfg),
                peers: HashMap::new(),
            }),
            hooks,
            next_peer: AtomicU64::new(1),
        }
    }

    /// Carries out registry output. Runs under the lock so that every
    /// session sees envelopes in the order the registry produced them.
    fn dispatch(&self, core: &mut Core, outs: Vec<ServiceOut>) {
        let mut work: VecDeque<ServiceOut> = outs.into();
        while let Some(out) = work.pop_front() {
            match out {
                ServiceOut::Send { peer, line } => {
                    let Some(tx) = core.peers.get(&peer) else {
                        continue;
                    };
                    if let Err(mpsc::error::TrySendError::Full(_)) = tx.lines.try_send(line) {
                        tracing::warn!(peer, "send queue overflow, closing session");
                        let notice = overflow_notice(&core.registry, peer);
                        if let Some(mut tx) = core.peers.remove(&peer) {
                            if let Some(c) = tx.close.take() {
                                let _ = c.send(notice);
                            }
                        }
                        work.extend(core.registry.disconnect(peer, now_ms()));
                    }
                }
                ServiceOut::Close { peer } => {
                    if let Some(mut tx) = core.peers.remove(&peer) {
                        if let Some(c) = tx.close.take() {
                            let _ = c.send(None);
                        }
                    }
                }
                ServiceOut::Webhook { url, body } => self.hooks.spawn(url, body),
            }
        }
    }

    fn with<R>(&self, f: impl FnOnce(&mut Core) -> (Vec<ServiceOut>, R)) -> R {
        let mut core = self.core.lock().expect("registry lock");
        let (outs, r) = f(&mut core);
        self.dispatch(&mut core, outs);
        r
    }
}

fn overflow_notice(reg: &Registry, peer: PeerId) -> Option<String> {
    let ep = reg.endpoint(peer)?.clone();
    let from = EndpointId::new(reg.config().service_id.clone())?;
    let payload = ErrorPayload {
        code: ErrorCode::Overflow,
        message: format!("more than {SEND_QUEUE} envelopes queued"),
        seq: None,
    };
    // seq past anything the session has seen from us
    SignalEnvelope::new(StreamRef::Control, from, MessageKind::Error, u64::MAX, payload.to_payload())
        .to(ep)
        .encode()
        .ok()
}

#[derive(Clone)]
struct AppState {
    broker: Arc<Hub>,
    sfu: Arc<Hub>,
    cfg: Arc<ServerConfig>,
    stop: watch::Receiver<bool>,
}

#[derive(Deserialize)]
struct AuthQuery {
    token: Option<String>,
}

fn authorized(cfg: &ServerConfig, headers: &HeaderMap, q: &AuthQuery) -> bool {
    let Some(want) = &cfg.token else {
        return true;
    };
    let bearer = headers
        .get("authorization")
        .and_then(|v| v.to_str().ok())
        .and_then(|v| v.strip_prefix("Bearer "));
    bearer == Some(want.as_str()) || q.token.as_deref() == Some(want.as_str())
}

async fn ws_broker(
    ws: WebSocketUpgrade,
    State(st): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<AuthQuery>,
) -> Response {
    if !authorized(&st.cfg, &headers, &q) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    let hub = st.broker.clone();
    ws.on_upgrade(move |socket| run_peer(hub, socket, st.stop))
}

async fn ws_sfu(
    ws: WebSocketUpgrade,
    State(st): State<AppState>,
    headers: HeaderMap,
    Query(q): Query<AuthQuery>,
) -> Response {
    if !authorized(&st.cfg, &headers, &q) {
        return StatusCode::UNAUTHORIZED.into_response();
    }
    let hub = st.sfu.clone();
    ws.on_upgrade(move |socket| run_peer(hub, socket, st.stop))
}

async fn run_peer(hub: Arc<Hub>, socket: WebSocket, mut stop: watch::Receiver<bool>) {
    let peer = hub.next_peer.fetch_add(1, Ordering::Relaxed);
    let (mut sink, mut stream) = socket.split();
    let (tx, mut rx) = mpsc::channel::<String>(SEND_QUEUE);
    let (close_tx, mut close_rx) = oneshot::channel::<Option<String>>();

    let writer = tokio::spawn(async move {
        loop {
            tokio::select! {
                line = rx.recv() => match line {
                    Some(line) => {
                        if sink.send(Message::Text(line.into())).await.is_err() {
                            break;
                        }
                    }
                    None => break,
                },
                last = &mut close_rx => {
                    // flush what was queued before the close decision
                    while let Ok(line) = rx.try_recv() {
                        let _ = sink.send(Message::Text(line.into())).await;
                    }
                    if let Ok(Some(line)) = last {
                        let _ = sink.send(Message::Text(line.into())).await;
                    }
                    let _ = sink.close().await;
                    break;
                }
            }
        }
    });

    hub.with(|core| {
        core.peers.insert(
            peer,
            PeerTx {
                lines: tx,
                close: Some(close_tx),
            },
        );
        (core.registry.connect(peer, now_ms()), ())
    });

    loop {
        let msg = tokio::select! {
            msg = stream.next() => msg,
            _ = stop.changed() => None,
        };
        let Some(msg) = msg else { break };
        let text = match msg {
            Ok(Message::Text(t)) => t.to_string(),
            Ok(Message::Binary(b)) => String::from_utf8_lossy(&b).into_owned(),
            Ok(Message::Close(_)) | Err(_) => break,
            Ok(_) => continue,
        };
        let open = hub.with(|core| {
            if !core.peers.contains_key(&peer) {
                return (Vec::new(), false);
            }
            let mut outs = Vec::new();
            for line in text.lines().filter(|l| !l.trim().is_empty()) {
                outs.extend(core.registry.receive(peer, line, now_ms()));
            }
            (outs, true)
        });
        if !open {
            break;
        }
    }

    hub.with(|core| {
        let outs = if let Some(mut tx) = core.peers.remove(&peer) {
            if let Some(c) = tx.close.take() {
                let _ = c.send(None);
            }
            core.registry.disconnect(peer, now_ms())
        } else {
            Vec::new()
        };
        (outs, ())
    });
    let _ = writer.await;
}

async fn healthz() -> &'static str {
    "ok"
}

async fn streams(State(st): State<AppState>) -> Response {
    if !st.cfg.debug_routes {
        return StatusCode::NOT_FOUND.into_response();
    }
    let broker = st.broker.core.lock().expect("registry lock").registry.snapshot();
    let sfu = st.sfu.core.lock().expect("registry lock").registry.snapshot();
    let (delivered, retried, failed) = st.broker.hooks.metrics.snapshot();
    Json(serde_json::json!({
        "broker": broker,
        "sfu": sfu,
        "webhooks": { "delivered": delivered, "retried": retried, "failed": failed },
    }))
    .into_response()
}

pub fn router(cfg: ServerConfig, boot: u64, stop: watch::Receiver<bool>) -> (Router, BrokerState) {
    let hooks = Dispatcher::new(cfg.webhook_timeout);
    let mut bcfg = RegistryConfig::broker(boot);
    bcfg.idle_gc_ms = cfg.idle_gc.as_millis() as u64;
    let mut scfg = RegistryConfig::sfu(boot);
    scfg.idle_gc_ms = bcfg.idle_gc_ms;
    let st = AppState {
        broker: Arc::new(Hub::new(bcfg, hooks.clone())),
        sfu: Arc::new(Hub::new(scfg, hooks)),
        cfg: Arc::new(cfg),
        stop,
    };
    let handle = BrokerState { inner: st.clone() };
    let app = Router::new()
        .route("/ws", get(ws_broker))
        .route("/sfu", get(ws_sfu))
        .route("/healthz", get(healthz))
        .route("/streams", get(streams))
        .with_state(st);
    (app, handle)
}

/// Read access to a running server's state, for tests and diagnostics.
#[derive(Clone)]
pub struct BrokerState {
    inner: AppState,
}

impl BrokerState {
    pub fn broker<R>(&self, f: impl FnOnce(&Registry) -> R) -> R {
        f(&self.inner.broker.core.lock().expect("registry lock").registry)
    }

    pub fn sfu<R>(&self, f: impl FnOnce(&Registry) -> R) -> R {
        f(&self.inner.sfu.core.lock().expect("registry lock").registry)
    }

    pub fn webhook_metrics(&self) -> (u64, u64, u64) {
        self.inner.broker.hooks.metrics.snapshot()
    }

    fn gc(&self) {
        for hub in [&self.inner.broker, &self.inner.sfu] {
            hub.with(|core| (core.registry.tick(now_ms()), ()));
        }
    }
}

pub struct BrokerHandle {
    pub addr: SocketAddr,
    pub state: BrokerState,
    server: JoinHandle<()>,
    gc: JoinHandle<()>,
    stop: watch::Sender<bool>,
}

impl BrokerHandle {
    /// Binds `addr` (port 0 picks a free port) and serves in the background.
    pub async fn start(addr: &str, cfg: ServerConfig) -> std::io::Result<Self> {
        let listener = TcpListener::bind(addr).await?;
        let addr = listener.local_addr()?;
        let boot = now_ms() / 1000;
        let (stop, stop_rx) = watch::channel(false);
        let (app, state) = router(cfg, boot, stop_rx);
        let server = tokio::spawn(async move {
            if let Err(e) = axum::serve(listener, app).await {
                tracing::error!(error = %e, "server stopped");
            }
        });
        let gc_state = state.clone();
        let gc = tokio::spawn(async move {
            let mut every = tokio::time::interval(Duration::from_secs(1));
            loop {
                every.tick().await;
                gc_state.gc();
            }
        });
        Ok(Self {
            addr,
            state,
            server,
            gc,
            stop,
        })
    }

    pub fn ws_url(&self) -> String {
        format!("ws://{}/ws", self.addr)
    }

    pub fn sfu_url(&self) -> String {
        format!("ws://{}/sfu", self.addr)
    }

    pub async fn run(self) {
        let _ = self.server.await;
        self.gc.abort();
    }

    /// Stops accepting and drops every connection.
    pub fn shutdown(self) {
        let _ = self.stop.send(true);
        self.server.abort();
        self.gc.abort();
    }
}
