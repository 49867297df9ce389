//! Virtual-time world: hosts running endpoint sessions over connectors,
//! the simulated services they talk to, and the transports in between.
//!
//! Everything that happens is an event on one queue ordered by (time,
//! insertion). Transport delays are drawn from a seeded generator and each
//! channel stays FIFO, so a run is a pure function of the seed and the
//! calls made on the world.

use std::collections::{BTreeMap, BTreeSet};
use std::hash::{Hash, Hasher};
use std::path::PathBuf;
use std::time::{Duration, Instant};

use namedstream_broker::{Registry, RegistryConfig};
use namedstream_connectors::{
    connector_for, service_for, MemoryStorage, SplitChild, SplitConnector, StorageService,
    MEM_SERVICE, STORAGE_SERVICE,
};
use namedstream_core::endpoint::{LinkItem, FRAME_INTERVAL_MS};
use namedstream_core::service::{PeerId, Service, ServiceOut};
use namedstream_core::stream::TrackKind;
use namedstream_core::{
    ConnId, Connector, EndpointId, EndpointSession, Io, IoCmd, MediaFrame, MediaSource, Role,
    SessionEvent, StreamAddress, StreamName, StreamRef, TrackDescriptor,
};
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::Serialize;

use crate::real::RealNet;
use crate::SimError;

pub const BROKER_HOST: &str = "broker.sim";
pub const SFU_HOST: &str = "sfu.sim";
/// Service and session clocks advance in steps of this many ms.
pub const TICK_MS: u64 = FRAME_INTERVAL_MS / 5;
const SETTLE_ROUNDS: usize = 64;

/// Seeded one-way delay bounds, inclusive.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
pub struct Latency {
    pub min: u64,
    pub max: u64,
}

impl Default for Latency {
    fn default() -> Self {
        Self { min: 1, max: 20 }
    }
}

#[derive(Debug, Clone)]
pub struct WorldConfig {
    pub seed: u64,
    pub latency: Latency,
    /// Keep every line and link item crossing each host's boundary.
    pub capture: bool,
    /// Default connector for hosts that do not name one.
    pub connector: String,
}

impl Default for WorldConfig {
    fn default() -> Self {
        Self {
            seed: 0,
            latency: Latency::default(),
            capture: false,
            connector: "mem".into(),
        }
    }
}

/// Stream address for `stream` under a connector spec.
///
/// A spec is a bare scheme served by the simulated services (`mem`,
/// `broker`, `rtclite`, `storage`, `sfu`), optionally with `?params`, or
/// `scheme:origin` for a real service, e.g. `broker:ws://127.0.0.1:9000`.
pub fn stream_address(spec: &str, stream: &str) -> String {
    let (head, query) = match spec.split_once('?') {
        Some((h, q)) => (h, format!("?{q}")),
        None => (spec, String::new()),
    };
    if let Some((scheme, origin)) = head.split_once(':') {
        return format!("{scheme}:{}/{stream}{query}", origin.trim_end_matches('/'));
    }
    match head {
        "broker" | "rtclite" => format!("{head}:ws://{BROKER_HOST}/{stream}{query}"),
        "sfu" => format!("sfu:ws://{SFU_HOST}/{stream}{query}"),
        _ => format!("{head}:id:{stream}{query}"),
    }
}

/// Scheme part of a connector spec.
pub fn spec_scheme(spec: &str) -> &str {
    let head = spec.split('?').next().unwrap_or(spec);
    head.split(':').next().unwrap_or(head)
}

pub fn session_label(host: &str, stream: &str) -> String {
    format!("{host}@{stream}")
}

/// What a session saw, reduced to what reports and assertions need.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
#[serde(tag = "type", rename_all = "kebab-case")]
pub enum Entry {
    Media {
        track: String,
        seq: u64,
        ts: u64,
        digest: u64,
    },
    Message {
        from: String,
        text: String,
    },
    Tracks {
        tracks: Vec<String>,
    },
    LinkUp {
        link: String,
    },
    LinkDown {
        link: String,
    },
    PublisherLive,
    PeerGone,
    Hint {
        hint: String,
    },
    Changed {
        property: String,
        value: String,
    },
    Error {
        error: String,
    },
}

impl Entry {
    fn from_event(ev: &SessionEvent) -> Self {
        match ev {
            SessionEvent::PropertyChange { property, new, .. } => Entry::Changed {
                property: property.to_string(),
                value: new.clone(),
            },
            SessionEvent::Message { from, text } => Entry::Message {
                from: from.to_string(),
                text: text.clone(),
            },
            SessionEvent::RemoteTracks(t) => Entry::Tracks {
                tracks: t.iter().map(|t| t.label.clone()).collect(),
            },
            SessionEvent::LinkConnected { link, .. } => Entry::LinkUp { link: link.clone() },
            SessionEvent::LinkClosed { link, .. } => Entry::LinkDown { link: link.clone() },
            SessionEvent::PublisherLive { .. } => Entry::PublisherLive,
            SessionEvent::PeerGone { .. } => Entry::PeerGone,
            SessionEvent::Hint(h) => Entry::Hint {
                hint: h.as_str().to_string(),
            },
            SessionEvent::Media(f) => Entry::Media {
                track: f.track_label.clone(),
                seq: f.seq,
                ts: f.ts_ms,
                digest: f.digest(),
            },
            SessionEvent::Error(e) => Entry::Error { error: e.to_string() },
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Logged {
    pub at: u64,
    #[serde(flatten)]
    pub entry: Entry,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Webhook {
    pub at: u64,
    pub url: String,
    pub body: String,
}

pub struct Host {
    pub name: String,
    /// Connector spec for sessions that do not pick one.
    pub connector: Option<String>,
    pub sessions: BTreeMap<String, EndpointSession>,
    /// Session label to connector key.
    pub bindings: BTreeMap<String, String>,
    pub connectors: BTreeMap<String, Box<dyn Connector>>,
    pub logs: BTreeMap<String, Vec<Logged>>,
    /// `pub:<name>` / `sub:<ref>` for every stream a session has used.
    pub history: BTreeMap<String, BTreeSet<String>>,
    pub transcript: Vec<String>,
}

impl Host {
    fn new(name: &str, connector: Option<String>) -> Self {
        Self {
            name: name.to_string(),
            connector,
            sessions: BTreeMap::new(),
            bindings: BTreeMap::new(),
            connectors: BTreeMap::new(),
            logs: BTreeMap::new(),
            history: BTreeMap::new(),
            transcript: Vec::new(),
        }
    }

    pub fn session(&self, label: &str) -> Option<&EndpointSession> {
        self.sessions.get(label)
    }

    pub fn log(&self, label: &str) -> &[Logged] {
        self.logs.get(label).map(Vec::as_slice).unwrap_or(&[])
    }

    fn log_entry(&mut self, label: &str, at: u64, entry: Entry) {
        self.logs.entry(label.to_string()).or_default().push(Logged { at, entry });
    }
}

type Factory = Box<dyn Fn(u64) -> Box<dyn Service> + Send>;

struct SimService {
    make: Factory,
    svc: Box<dyn Service>,
    boot: u64,
    up: bool,
    /// Same-process service: no transport delay.
    instant: bool,
}

#[derive(Debug, Clone)]
struct Wire {
    svc: String,
    host: String,
    ckey: String,
    conn: ConnId,
    client_open: bool,
    service_open: bool,
    real: bool,
}

#[derive(Debug)]
enum Ev {
    Open { peer: PeerId },
    Up { peer: PeerId, line: String },
    Down { peer: PeerId, line: String },
    Hangup { peer: PeerId },
    Cut { peer: PeerId },
    Peer {
        ns: String,
        from: EndpointId,
        to: EndpointId,
        item: LinkItem,
    },
    Timer { host: String, ckey: String, token: u64 },
    Tick,
    ServiceUp { svc: String },
}

/// Options for [`World::publish`].
#[derive(Debug, Clone, Default)]
pub struct PublishReq {
    pub stream: String,
    /// Connector spec; the host's (then the world's) default otherwise.
    pub via: Option<String>,
    pub tracks: Option<Vec<TrackDescriptor>>,
    pub secret: Option<String>,
    pub autopause: bool,
    /// Republish what another session on the same host renders.
    pub input: Option<String>,
    pub replay: Option<PathBuf>,
    /// Publish through several streams at once: (connector spec, stream).
    pub split: Vec<(String, String)>,
    pub ping: Option<String>,
}

#[derive(Debug, Clone, Default)]
pub struct SubscribeReq {
    pub stream: String,
    pub via: Option<String>,
    pub secret: Option<String>,
    pub ping: Option<String>,
}

pub struct World {
    cfg: WorldConfig,
    now: u64,
    order: u64,
    queue: BTreeMap<(u64, u64), Ev>,
    rng: ChaCha8Rng,
    fifo: BTreeMap<String, u64>,
    services: BTreeMap<String, SimService>,
    hosts: BTreeMap<String, Host>,
    next_peer: PeerId,
    wires: BTreeMap<PeerId, Wire>,
    by_conn: BTreeMap<(String, String, ConnId), PeerId>,
    directory: BTreeMap<(String, EndpointId), (String, String)>,
    webhooks: Vec<Webhook>,
    service_log: BTreeMap<String, Vec<String>>,
    real: Option<RealNet>,
    started: Instant,
}

impl World {
    /// A world with the four simulated services: the in-process hub
    /// (`mem`), the broker, the forwarding server and an in-memory store.
    pub fn new(cfg: WorldConfig) -> Self {
        let mut w = Self {
            rng: ChaCha8Rng::seed_from_u64(cfg.seed),
            cfg,
            now: 0,
            order: 0,
            queue: BTreeMap::new(),
            fifo: BTreeMap::new(),
            services: BTreeMap::new(),
            hosts: BTreeMap::new(),
            next_peer: 0,
            wires: BTreeMap::new(),
            by_conn: BTreeMap::new(),
            directory: BTreeMap::new(),
            webhooks: Vec::new(),
            service_log: BTreeMap::new(),
            real: None,
            started: Instant::now(),
        };
        w.add_service(MEM_SERVICE, true, |boot| {
            Box::new(Registry::new(RegistryConfig::memory(boot)))
        });
        w.add_service(&format!("ws://{BROKER_HOST}/ws"), false, |boot| {
            Box::new(Registry::new(RegistryConfig::broker(boot)))
        });
        w.add_service(&format!("ws://{SFU_HOST}/sfu"), false, |boot| {
            Box::new(Registry::new(RegistryConfig::sfu(boot)))
        });
        w.add_service(STORAGE_SERVICE, false, |_| {
            Box::new(StorageService::new(MemoryStorage::new(), "store"))
        });
        w.schedule(TICK_MS, Ev::Tick);
        w
    }

    /// A world whose clock is the wall clock, for runs against real
    /// services. Simulated services stay available.
    pub fn new_real(cfg: WorldConfig) -> Result<Self, SimError> {
        let mut w = Self::new(cfg);
        w.real = Some(RealNet::new().map_err(|e| SimError::Setup(e.to_string()))?);
        w.started = Instant::now();
        Ok(w)
    }

    pub fn is_real(&self) -> bool {
        self.real.is_some()
    }

    /// Registers (or replaces) a simulated service reachable at `name`.
    pub fn add_service(
        &mut self,
        name: &str,
        instant: bool,
        make: impl Fn(u64) -> Box<dyn Service> + Send + 'static,
    ) {
        let svc = make(1);
        self.services.insert(
            name.to_string(),
            SimService {
                make: Box::new(make),
                svc,
                boot: 1,
                up: true,
                instant,
            },
        );
    }

    pub fn config(&self) -> &WorldConfig {
        &self.cfg
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn hosts(&self) -> impl Iterator<Item = &Host> {
        self.hosts.values()
    }

    pub fn host(&self, name: &str) -> Option<&Host> {
        self.hosts.get(name)
    }

    pub fn session(&self, label: &str) -> Option<&EndpointSession> {
        let host = label.split('@').next()?;
        self.hosts.get(host)?.sessions.get(label)
    }

    pub fn log(&self, label: &str) -> &[Logged] {
        label
            .split('@')
            .next()
            .and_then(|h| self.hosts.get(h))
            .map(|h| h.log(label))
            .unwrap_or(&[])
    }

    pub fn webhooks(&self) -> &[Webhook] {
        &self.webhooks
    }

    /// Lines each simulated service sent or received, when capturing.
    pub fn service_log(&self, name: &str) -> &[String] {
        self.service_log.get(name).map(Vec::as_slice).unwrap_or(&[])
    }

    // -- scheduling -----------------------------------------------------------

    fn schedule(&mut self, at: u64, ev: Ev) {
        self.order += 1;
        self.queue.insert((at, self.order), ev);
    }

    /// Delivery time on a FIFO channel.
    fn delay(&mut self, instant: bool, chan: String) -> u64 {
        let lat = if instant {
            0
        } else {
            let Latency { min, max } = self.cfg.latency;
            self.rng.gen_range(min..=max.max(min))
        };
        let last = self.fifo.get(&chan).copied().unwrap_or(0);
        let at = (self.now + lat).max(last);
        self.fifo.insert(chan, at);
        at
    }

    fn instant(&self, svc: &str) -> bool {
        self.services.get(svc).is_some_and(|s| s.instant)
    }

    fn wall_ms(&self) -> u64 {
        self.started.elapsed().as_millis() as u64
    }

    /// Processes everything due up to and including `t`.
    pub fn run_until(&mut self, t: u64) {
        if self.real.is_some() {
            return self.run_real(t);
        }
        while let Some(entry) = self.queue.first_entry() {
            if entry.key().0 > t {
                break;
            }
            let ((at, _), ev) = entry.remove_entry();
            self.now = self.now.max(at);
            self.handle(ev);
        }
        self.now = self.now.max(t);
    }

    pub fn run_for(&mut self, ms: u64) {
        self.run_until(self.now + ms);
    }

    fn run_real(&mut self, t: u64) {
        loop {
            self.pump_real(None);
            let wall = self.wall_ms();
            let due = self.queue.first_key_value().map(|(k, _)| k.0);
            if let Some(at) = due.filter(|&at| at <= wall.min(t)) {
                let ev = self.queue.remove(&self.queue.first_key_value().map(|(k, _)| *k).unwrap()).unwrap();
                self.now = self.now.max(at).max(wall.min(t));
                self.handle(ev);
                continue;
            }
            if wall >= t {
                self.now = self.now.max(t);
                return;
            }
            let until = due.unwrap_or(t).min(t);
            self.pump_real(Some(Duration::from_millis(until.saturating_sub(wall).max(1))));
        }
    }

    /// Moves lines from real connections onto the queue.
    fn pump_real(&mut self, wait: Option<Duration>) {
        let Some(net) = &self.real else {
            return;
        };
        let mut got = Vec::new();
        if let Some(m) = wait.and_then(|d| net.recv_timeout(d)) {
            got.push(m);
        }
        while let Some(m) = net.try_recv() {
            got.push(m);
        }
        let at = self.wall_ms();
        for (peer, line) in got {
            match line {
                Some(line) => self.schedule(at, Ev::Down { peer, line }),
                None => self.schedule(at, Ev::Cut { peer }),
            }
        }
    }

    // -- hosts and sessions ---------------------------------------------------

    pub fn spawn(&mut self, name: &str, connector: Option<String>) -> Result<(), SimError> {
        if name.is_empty() || name.contains('@') || name == "*" {
            return Err(SimError::Param(format!("bad host name `{name}`")));
        }
        if self.hosts.contains_key(name) {
            return Err(SimError::DuplicateHost(name.to_string()));
        }
        self.hosts.insert(name.to_string(), Host::new(name, connector));
        Ok(())
    }

    fn host_mut(&mut self, name: &str) -> Result<&mut Host, SimError> {
        self.hosts
            .get_mut(name)
            .ok_or_else(|| SimError::UnknownHost(name.to_string()))
    }

    fn spec_for(&self, host: &str, via: Option<&String>) -> String {
        via.cloned()
            .or_else(|| self.hosts.get(host).and_then(|h| h.connector.clone()))
            .unwrap_or_else(|| self.cfg.connector.clone())
    }

    /// Connector key for an address, creating the connector on first use.
    fn bind(&mut self, host: &str, spec: &str, stream: &str) -> Result<String, SimError> {
        let text = stream_address(spec, stream);
        let addr = StreamAddress::parse(&text).map_err(|e| SimError::Setup(format!("{text}: {e}")))?;
        let service = service_for(&addr).map_err(|e| SimError::Setup(e.to_string()))?;
        let key = format!("{}|{service}", addr.scheme);
        let h = self.host_mut(host)?;
        if !h.connectors.contains_key(&key) {
            let c = connector_for(&addr).map_err(|e| SimError::Setup(e.to_string()))?;
            h.connectors.insert(key.clone(), c);
        }
        Ok(key)
    }

    fn seed_for(&self, label: &str) -> u64 {
        let mut h = std::collections::hash_map::DefaultHasher::new();
        label.hash(&mut h);
        self.cfg.seed ^ h.finish()
    }

    fn stream_name(text: &str) -> Result<StreamName, SimError> {
        StreamName::new(text).map_err(|e| SimError::Param(format!("stream `{text}`: {e}")))
    }

    /// Publishes from a session labelled `<host>@<stream>`; returns the label.
    pub fn publish(&mut self, host: &str, req: PublishReq) -> Result<String, SimError> {
        let name = Self::stream_name(&req.stream)?;
        let label = session_label(host, &req.stream);
        let ckey = if req.split.is_empty() {
            let spec = self.spec_for(host, req.via.as_ref());
            self.bind(host, &spec, &req.stream)?
        } else {
            let mut children = Vec::new();
            for (spec, stream) in &req.split {
                let text = stream_address(spec, stream);
                let addr = StreamAddress::parse(&text)
                    .map_err(|e| SimError::Setup(format!("{text}: {e}")))?;
                children.push(SplitChild {
                    connector: connector_for(&addr).map_err(|e| SimError::Setup(e.to_string()))?,
                    stream: Self::stream_name(stream)?,
                });
            }
            let split = SplitConnector::new(children).map_err(|e| SimError::Setup(e.to_string()))?;
            let key = format!("split|{label}");
            self.host_mut(host)?.connectors.insert(key.clone(), Box::new(split));
            key
        };
        let tracks = req.tracks.clone().unwrap_or_else(|| {
            vec![TrackDescriptor::audio(), TrackDescriptor::video()]
        });
        let source = if let Some(up) = &req.input {
            MediaSource::input(session_label(host, up), tracks)
        } else if let Some(path) = &req.replay {
            MediaSource::replay_file(path).map_err(SimError::Setup)?
        } else {
            MediaSource::synthetic(self.seed_for(&label), tracks)
        };
        let now = self.now;
        let h = self.host_mut(host)?;
        let sess = h
            .sessions
            .entry(label.clone())
            .or_insert_with(|| EndpointSession::new(label.clone()));
        sess.set_now(now);
        let mut errors = Vec::new();
        if sess.role() == Role::Unset {
            if let Err(e) = sess.set_input(source) {
                errors.push(e.to_string());
            }
            sess.set_autopause(req.autopause);
            sess.set_ping(req.ping.clone());
            if let Err(e) = sess.set_secret(req.secret.as_deref()) {
                errors.push(e.to_string());
            }
        }
        h.bindings.insert(label.clone(), ckey.clone());
        let seen = h.history.entry(label.clone()).or_default();
        seen.insert(format!("pub:{}", req.stream));
        for (_, child) in &req.split {
            seen.insert(format!("pub:{child}"));
        }
        let mut io = Io::new(now);
        let conn = h.connectors.get_mut(&ckey).expect("bound connector");
        let sess = h.sessions.get_mut(&label).expect("session exists");
        if errors.is_empty() {
            if let Err(e) = sess.publish(name, conn.as_mut(), &mut io) {
                errors.push(e.to_string());
            }
        }
        for e in errors {
            h.log_entry(&label, now, Entry::Error { error: e });
        }
        self.exec_all(host, &ckey, io);
        self.settle(host);
        Ok(label)
    }

    /// Subscribes from a session labelled `<host>@<ref>`; returns the label.
    pub fn subscribe(&mut self, host: &str, req: SubscribeReq) -> Result<String, SimError> {
        let stream_ref = StreamRef::parse(&req.stream)
            .map_err(|e| SimError::Param(format!("stream `{}`: {e}", req.stream)))?;
        let label = session_label(host, &req.stream);
        let spec = self.spec_for(host, req.via.as_ref());
        // a hashed ref names no stream the address could carry
        let addressed = if stream_ref.is_hashed() { "_" } else { req.stream.as_str() };
        let ckey = self.bind(host, &spec, addressed)?;
        let now = self.now;
        let h = self.host_mut(host)?;
        let sess = h
            .sessions
            .entry(label.clone())
            .or_insert_with(|| EndpointSession::new(label.clone()));
        sess.set_now(now);
        let mut errors = Vec::new();
        if sess.role() == Role::Unset {
            sess.set_ping(req.ping.clone());
            if let Err(e) = sess.set_secret(req.secret.as_deref()) {
                errors.push(e.to_string());
            }
        }
        h.bindings.insert(label.clone(), ckey.clone());
        h.history.entry(label.clone()).or_default().insert(format!("sub:{}", req.stream));
        let mut io = Io::new(now);
        let conn = h.connectors.get_mut(&ckey).expect("bound connector");
        let sess = h.sessions.get_mut(&label).expect("session exists");
        if errors.is_empty() {
            if let Err(e) = sess.subscribe(stream_ref, conn.as_mut(), &mut io) {
                errors.push(e.to_string());
            }
        }
        for e in errors {
            h.log_entry(&label, now, Entry::Error { error: e });
        }
        self.exec_all(host, &ckey, io);
        self.settle(host);
        Ok(label)
    }

    /// Labels of a host's sessions matching `stream`, or all of them.
    fn targets(&self, host: &str, stream: Option<&str>) -> Result<Vec<String>, SimError> {
        let h = self
            .hosts
            .get(host)
            .ok_or_else(|| SimError::UnknownHost(host.to_string()))?;
        match stream {
            Some(s) => {
                let label = session_label(host, s);
                if h.sessions.contains_key(&label) {
                    Ok(vec![label])
                } else {
                    Err(SimError::UnknownSession(label))
                }
            }
            None => Ok(h.sessions.keys().cloned().collect()),
        }
    }

    /// Runs `f` on each target session with its connector.
    fn each_session(
        &mut self,
        host: &str,
        stream: Option<&str>,
        mut f: impl FnMut(&mut EndpointSession, Option<&mut Box<dyn Connector>>, &mut Io) -> Result<(), String>,
    ) -> Result<(), SimError> {
        let labels = self.targets(host, stream)?;
        let now = self.now;
        for label in labels {
            let h = self.host_mut(host)?;
            let ckey = h.bindings.get(&label).cloned();
            let mut io = Io::new(now);
            let sess = h.sessions.get_mut(&label).expect("target exists");
            sess.set_now(now);
            let conn = ckey.as_ref().and_then(|k| h.connectors.get_mut(k));
            if let Err(e) = f(sess, conn, &mut io) {
                h.log_entry(&label, now, Entry::Error { error: e });
            }
            if let Some(k) = ckey {
                self.exec_all(host, &k, io);
            }
        }
        self.settle(host);
        Ok(())
    }

    pub fn stop(&mut self, host: &str, stream: Option<&str>) -> Result<(), SimError> {
        self.each_session(host, stream, |s, c, io| match c {
            Some(c) if s.role() != Role::Unset => s.stop(c.as_mut(), io).map_err(|e| e.to_string()),
            _ => Ok(()),
        })
    }

    pub fn send(&mut self, host: &str, stream: Option<&str>, text: &str) -> Result<(), SimError> {
        self.each_session(host, stream, |s, _, _| {
            if s.role() == Role::Unset {
                return Ok(());
            }
            s.send(text).map_err(|e| e.to_string())
        })
    }

    pub fn set_playing(&mut self, host: &str, stream: Option<&str>, playing: bool) -> Result<(), SimError> {
        self.each_session(host, stream, |s, _, _| {
            s.set_playing(playing);
            Ok(())
        })
    }

    pub fn add_tracks(&mut self, host: &str, stream: &str, tracks: &[TrackDescriptor]) -> Result<(), SimError> {
        self.each_session(host, Some(stream), |s, c, io| match c {
            Some(c) => s.add_tracks(tracks, c.as_mut(), io).map_err(|e| e.to_string()),
            None => Err("session has no connector".into()),
        })
    }

    pub fn remove_tracks(&mut self, host: &str, stream: &str, labels: &[String]) -> Result<(), SimError> {
        self.each_session(host, Some(stream), |s, c, io| match c {
            Some(c) => s.remove_tracks(labels, c.as_mut(), io).map_err(|e| e.to_string()),
            None => Err("session has no connector".into()),
        })
    }

    /// Severs every connection of `host`; both ends see the close.
    pub fn drop_transport(&mut self, host: &str) -> Result<(), SimError> {
        self.host_mut(host)?;
        let peers: Vec<PeerId> = self
            .wires
            .iter()
            .filter(|(_, w)| w.host == host && w.client_open)
            .map(|(p, _)| *p)
            .collect();
        let at = self.now + 1;
        for peer in peers {
            if let Some(net) = &mut self.real {
                if self.wires[&peer].real {
                    net.close(peer);
                }
            }
            self.schedule(at, Ev::Hangup { peer });
            self.schedule(at, Ev::Cut { peer });
        }
        Ok(())
    }

    /// Replaces a simulated service with a fresh instance after `down_ms`.
    /// Existing connections are cut; connects while down are refused.
    pub fn restart(&mut self, name: &str, down_ms: u64) -> Result<(), SimError> {
        let name = self.resolve_service(name)?;
        let s = self.services.get_mut(&name).expect("resolved");
        s.boot += 1;
        s.svc = (s.make)(s.boot);
        s.up = false;
        let peers: Vec<PeerId> = self
            .wires
            .iter_mut()
            .filter(|(_, w)| w.svc == name && w.service_open)
            .map(|(p, w)| {
                w.service_open = false;
                *p
            })
            .collect();
        for peer in peers {
            let at = self.now + 1;
            self.schedule(at, Ev::Cut { peer });
        }
        let at = self.now + down_ms;
        self.schedule(at, Ev::ServiceUp { svc: name });
        Ok(())
    }

    /// `broker`, `sfu`, `mem`, `storage` or a full service name.
    fn resolve_service(&self, name: &str) -> Result<String, SimError> {
        let full = match name {
            "broker" | "rtclite" => format!("ws://{BROKER_HOST}/ws"),
            "sfu" => format!("ws://{SFU_HOST}/sfu"),
            other => other.to_string(),
        };
        if self.services.contains_key(&full) {
            Ok(full)
        } else {
            Err(SimError::Setup(format!("no simulated service `{name}`")))
        }
    }

    // -- execution ------------------------------------------------------------

    fn exec_all(&mut self, host: &str, ckey: &str, mut io: Io) {
        for cmd in io.take() {
            self.exec(host, ckey, cmd);
        }
    }

    fn capture_host(&mut self, host: &str, line: impl FnOnce() -> String) {
        if self.cfg.capture {
            if let Some(h) = self.hosts.get_mut(host) {
                h.transcript.push(line());
            }
        }
    }

    fn exec(&mut self, host: &str, ckey: &str, cmd: IoCmd) {
        match cmd {
            IoCmd::Open { conn, service } => {
                self.next_peer += 1;
                let peer = self.next_peer;
                let known = self.services.contains_key(&service);
                let real = !known && self.real.is_some() && service.starts_with("ws");
                self.wires.insert(
                    peer,
                    Wire {
                        svc: service.clone(),
                        host: host.to_string(),
                        ckey: ckey.to_string(),
                        conn,
                        client_open: true,
                        service_open: known || real,
                        real,
                    },
                );
                self.by_conn.insert((host.to_string(), ckey.to_string(), conn), peer);
                if real {
                    self.real.as_mut().expect("real net").open(peer, &service);
                } else if known {
                    let at = self.delay(self.instant(&service), format!("u{peer}"));
                    self.schedule(at, Ev::Open { peer });
                } else {
                    // nothing listens there
                    let at = self.now + 1;
                    self.schedule(at, Ev::Cut { peer });
                }
            }
            IoCmd::Send { conn, line } => {
                let Some(&peer) = self.by_conn.get(&(host.to_string(), ckey.to_string(), conn)) else {
                    return;
                };
                self.capture_host(host, || format!("> {line}"));
                let w = &self.wires[&peer];
                if w.real {
                    if let Some(net) = &mut self.real {
                        net.send(peer, line);
                    }
                    return;
                }
                let at = self.delay(self.instant(&w.svc.clone()), format!("u{peer}"));
                self.schedule(at, Ev::Up { peer, line });
            }
            IoCmd::Close { conn } => {
                let Some(peer) = self.by_conn.remove(&(host.to_string(), ckey.to_string(), conn)) else {
                    return;
                };
                let w = self.wires.get_mut(&peer).expect("wire");
                w.client_open = false;
                if w.real {
                    if let Some(net) = &mut self.real {
                        net.close(peer);
                    }
                    return;
                }
                let svc = w.svc.clone();
                let at = self.delay(self.instant(&svc), format!("u{peer}"));
                self.schedule(at, Ev::Hangup { peer });
            }
            IoCmd::Peer { ns, from, to, item } => {
                self.capture_host(host, || format!("> {}", item.to_line()));
                let at = self.delay(self.instant(&ns), format!("p{ns}|{from}|{to}"));
                self.schedule(at, Ev::Peer { ns, from, to, item });
            }
            IoCmd::Register { ns, ep, .. } => {
                self.directory
                    .insert((ns, ep), (host.to_string(), ckey.to_string()));
            }
            IoCmd::Unregister { ns, ep } => {
                let key = (ns, ep);
                if self.directory.get(&key).is_some_and(|(h, k)| h == host && k == ckey) {
                    self.directory.remove(&key);
                }
            }
            IoCmd::Timer { after_ms, token } => {
                let at = self.now + after_ms;
                self.schedule(
                    at,
                    Ev::Timer {
                        host: host.to_string(),
                        ckey: ckey.to_string(),
                        token,
                    },
                );
            }
        }
    }

    fn service_outs(&mut self, svc: &str, outs: Vec<ServiceOut>) {
        let instant = self.instant(svc);
        for out in outs {
            match out {
                ServiceOut::Send { peer, line } => {
                    let Some(w) = self.wires.get(&peer) else {
                        continue;
                    };
                    if !w.client_open || !w.service_open {
                        continue;
                    }
                    if self.cfg.capture {
                        self.service_log.entry(svc.to_string()).or_default().push(format!("> {line}"));
                    }
                    let at = self.delay(instant, format!("d{peer}"));
                    self.schedule(at, Ev::Down { peer, line });
                }
                ServiceOut::Close { peer } => {
                    let Some(w) = self.wires.get_mut(&peer) else {
                        continue;
                    };
                    w.service_open = false;
                    let at = self.delay(instant, format!("d{peer}"));
                    self.schedule(at, Ev::Cut { peer });
                }
                ServiceOut::Webhook { url, body } => self.webhooks.push(Webhook {
                    at: self.now,
                    url,
                    body,
                }),
            }
        }
    }

    fn handle(&mut self, ev: Ev) {
        let now = self.now;
        match ev {
            Ev::Open { peer } => {
                let svc = self.wires[&peer].svc.clone();
                let s = self.services.get_mut(&svc).expect("known service");
                if !s.up || !self.wires[&peer].service_open {
                    self.wires.get_mut(&peer).unwrap().service_open = false;
                    self.schedule(now + 1, Ev::Cut { peer });
                    return;
                }
                let outs = s.svc.connect(peer, now);
                self.service_outs(&svc, outs);
            }
            Ev::Up { peer, line } => {
                let w = &self.wires[&peer];
                if !w.service_open {
                    return;
                }
                let svc = w.svc.clone();
                if self.cfg.capture {
                    self.service_log.entry(svc.clone()).or_default().push(format!("< {line}"));
                }
                let outs = self.services.get_mut(&svc).expect("known service").svc.receive(peer, &line, now);
                self.service_outs(&svc, outs);
            }
            Ev::Hangup { peer } => {
                let w = self.wires.get_mut(&peer).expect("wire");
                if !w.service_open {
                    return;
                }
                w.service_open = false;
                let svc = w.svc.clone();
                if let Some(s) = self.services.get_mut(&svc) {
                    let outs = s.svc.disconnect(peer, now);
                    self.service_outs(&svc, outs);
                }
            }
            Ev::Down { peer, line } => {
                let w = self.wires[&peer].clone();
                if !w.client_open {
                    return;
                }
                self.capture_host(&w.host, || format!("< {line}"));
                self.with_connector(&w.host, &w.ckey, |c, sessions, io| {
                    c.on_receive(w.conn, &line, sessions, io)
                });
            }
            Ev::Cut { peer } => {
                let w = self.wires.get_mut(&peer).expect("wire");
                if !w.client_open {
                    return;
                }
                w.client_open = false;
                let w = w.clone();
                self.by_conn.remove(&(w.host.clone(), w.ckey.clone(), w.conn));
                self.with_connector(&w.host, &w.ckey, |c, sessions, io| {
                    c.on_closed(w.conn, sessions, io)
                });
            }
            Ev::Peer { ns, from, to, item } => {
                let Some((host, ckey)) = self.directory.get(&(ns, to.clone())).cloned() else {
                    return;
                };
                self.capture_host(&host, || format!("< {}", item.to_line()));
                self.with_connector(&host, &ckey, |c, sessions, io| {
                    c.on_peer(&to, &from, item, sessions, io)
                });
            }
            Ev::Timer { host, ckey, token } => {
                self.with_connector(&host, &ckey, |c, sessions, io| c.on_timer(token, sessions, io));
            }
            Ev::Tick => {
                let names: Vec<String> = self.services.keys().cloned().collect();
                for name in names {
                    let s = self.services.get_mut(&name).expect("listed");
                    if s.up {
                        let outs = s.svc.tick(now);
                        self.service_outs(&name, outs);
                    }
                }
                let hosts: Vec<String> = self.hosts.keys().cloned().collect();
                for host in hosts {
                    let h = self.hosts.get_mut(&host).expect("listed");
                    let mut busy = false;
                    for s in h.sessions.values_mut() {
                        s.tick(now);
                        busy |= s.has_outgoing();
                    }
                    if busy {
                        self.settle(&host);
                    } else {
                        self.drain(&host);
                    }
                }
                self.schedule(now + TICK_MS, Ev::Tick);
            }
            Ev::ServiceUp { svc } => {
                if let Some(s) = self.services.get_mut(&svc) {
                    s.up = true;
                }
            }
        }
    }

    fn with_connector(
        &mut self,
        host: &str,
        ckey: &str,
        f: impl FnOnce(&mut dyn Connector, &mut BTreeMap<String, EndpointSession>, &mut Io),
    ) {
        let now = self.now;
        let Some(h) = self.hosts.get_mut(host) else {
            return;
        };
        let Host {
            sessions,
            connectors,
            ..
        } = h;
        let Some(c) = connectors.get_mut(ckey) else {
            return;
        };
        for s in sessions.values_mut() {
            s.set_now(now);
        }
        let mut io = Io::new(now);
        f(c.as_mut(), sessions, &mut io);
        self.exec_all(host, ckey, io);
        self.settle(host);
    }

    /// Logs pending session events and feeds forks; true if a fork moved
    /// frames (which leaves new outgoing work).
    fn drain(&mut self, host: &str) -> bool {
        let now = self.now;
        let Some(h) = self.hosts.get_mut(host) else {
            return false;
        };
        let mut frames: Vec<(String, MediaFrame)> = Vec::new();
        let labels: Vec<String> = h.sessions.keys().cloned().collect();
        for label in &labels {
            let events = h.sessions.get_mut(label).expect("listed").drain_events();
            for ev in events {
                if let SessionEvent::Media(f) = &ev {
                    frames.push((label.clone(), f.clone()));
                }
                h.log_entry(label, now, Entry::from_event(&ev));
            }
        }
        let mut moved = false;
        for (from, frame) in frames {
            for s in h.sessions.values_mut() {
                if s.local_media().and_then(|m| m.upstream()) == Some(from.as_str()) {
                    s.push_input(&frame);
                    moved = true;
                }
            }
        }
        moved
    }

    /// Flushes a host's sessions through their connectors until quiet.
    fn settle(&mut self, host: &str) {
        let now = self.now;
        for _ in 0..SETTLE_ROUNDS {
            let Some(h) = self.hosts.get_mut(host) else {
                return;
            };
            let mut cmds: Vec<(String, IoCmd)> = Vec::new();
            let Host {
                sessions,
                bindings,
                connectors,
                ..
            } = h;
            for (label, sess) in sessions.iter_mut() {
                sess.set_now(now);
                match bindings.get(label).and_then(|k| connectors.get_mut(k).map(|c| (k, c))) {
                    Some((k, c)) => {
                        let mut io = Io::new(now);
                        c.flush(sess, &mut io);
                        cmds.extend(io.take().into_iter().map(|cmd| (k.clone(), cmd)));
                    }
                    None => {
                        sess.drain_outgoing();
                    }
                }
            }
            let moved = self.drain(host);
            let quiet = cmds.is_empty() && !moved;
            for (k, cmd) in cmds {
                self.exec(host, &k, cmd);
            }
            let pending = self.hosts[host].sessions.values().any(|s| s.has_outgoing());
            if quiet && !pending {
                return;
            }
        }
    }
}

/// Track list from `kind:label` items, e.g. `audio:mic,video:cam`.
pub fn parse_tracks(text: &str) -> Result<Vec<TrackDescriptor>, SimError> {
    text.split(',')
        .filter(|s| !s.is_empty())
        .map(|item| {
            let (kind, label) = item
                .split_once(':')
                .ok_or_else(|| SimError::Param(format!("track `{item}` is not kind:label")))?;
            let kind: TrackKind = kind.parse().map_err(SimError::Param)?;
            Ok(TrackDescriptor::new(kind, label))
        })
        .collect()
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn addresses_from_specs() {
        assert_eq!(stream_address("mem", "s/1"), "mem:id:s/1");
        assert_eq!(stream_address("storage?store=a", "s"), "storage:id:s?store=a");
        assert_eq!(stream_address("broker", "s"), "broker:ws://broker.sim/s");
        assert_eq!(stream_address("sfu", "room"), "sfu:ws://sfu.sim/room");
        assert_eq!(
            stream_address("broker:ws://127.0.0.1:9000?token=t", "x/2"),
            "broker:ws://127.0.0.1:9000/x/2?token=t"
        );
        assert_eq!(spec_scheme("broker:ws://h:1"), "broker");
        assert_eq!(spec_scheme("storage?store=a"), "storage");
    }

    #[test]
    fn track_lists() {
        let t = parse_tracks("audio:mic,video:cam").unwrap();
        assert_eq!(t[1], TrackDescriptor::new(TrackKind::Video, "cam"));
        assert!(parse_tracks("mic").is_err());
        assert!(parse_tracks("smell:x").is_err());
    }
}
