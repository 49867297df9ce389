//! Session and stream registry: the protocol core of the broker.
//!
//! In relay mode it only moves signaling between endpoints, which then
//! build a peer link per publisher/subscriber pair. In forward mode it also
//! terminates one link per endpoint and forwards media frames between them,
//! which is the selective-forwarding server with a room per stream.

use std::collections::{BTreeMap, BTreeSet, HashMap};

use namedstream_core::endpoint::MediaFrame;
use namedstream_core::service::{PeerId, Service, ServiceOut};
use namedstream_core::stream::{
    drop_tracks, merge_tracks, Change, Detached, StreamName, StreamRecord, StreamRef,
};
use namedstream_core::wire::{
    route_rule, ErrorCode, ErrorPayload, JoinPayload, LinkSignal, MessageKind, ServiceEvent,
    SignalEnvelope, TracksPayload, WireError,
};
use namedstream_core::EndpointId;
use serde::Serialize;

use crate::webhook::{self, HookEvent};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Mode {
    /// Signaling only; media flows peer to peer.
    Relay,
    /// Also carries media: every endpoint holds one link, to this service.
    Forward,
}

#[derive(Debug, Clone)]
pub struct RegistryConfig {
    pub mode: Mode,
    /// Identity used in `from` of service-originated envelopes.
    pub service_id: String,
    /// Endpoint ids are `<prefix>-<boot>-<n>`.
    pub id_prefix: String,
    pub boot: u64,
    /// Streams with no members are dropped after this long.
    pub idle_gc_ms: u64,
    pub webhooks: bool,
}

impl RegistryConfig {
    pub fn broker(boot: u64) -> Self {
        Self {
            mode: Mode::Relay,
            service_id: "broker".into(),
            id_prefix: "ep".into(),
            boot,
            idle_gc_ms: 60_000,
            webhooks: true,
        }
    }

    pub fn sfu(boot: u64) -> Self {
        Self {
            mode: Mode::Forward,
            service_id: "sfu".into(),
            id_prefix: "sfu".into(),
            ..Self::broker(boot)
        }
    }

    /// In-process hub: no webhooks.
    pub fn memory(boot: u64) -> Self {
        Self {
            service_id: "hub".into(),
            id_prefix: "mem".into(),
            webhooks: false,
            ..Self::broker(boot)
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum MemberRole {
    Publisher,
    Subscriber,
}

#[derive(Debug, Clone, Serialize)]
struct Membership {
    /// Joined with the digest form; the raw name must never reach it.
    hashed: bool,
    ping: Vec<String>,
}

#[derive(Debug)]
struct Session {
    ep: EndpointId,
    memberships: BTreeMap<(StreamName, MemberRole), Membership>,
    out_seq: u64,
    /// last seq seen per stream ref, for duplicate suppression
    seen: HashMap<String, u64>,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct Metrics {
    pub connects: u64,
    pub envelopes_in: u64,
    pub envelopes_forwarded: u64,
    pub duplicates: u64,
    pub malformed: u64,
    pub errors_sent: u64,
    pub frames_forwarded: u64,
    pub webhooks_queued: u64,
    pub streams_collected: u64,
}

#[derive(Debug, Serialize)]
pub struct Snapshot {
    pub sessions: usize,
    pub streams: Vec<StreamRecord>,
    pub metrics: Metrics,
    pub audit: Result<(), String>,
}

pub struct Registry {
    cfg: RegistryConfig,
    next_ep: u64,
    peers: BTreeMap<PeerId, Session>,
    by_ep: BTreeMap<EndpointId, PeerId>,
    streams: BTreeMap<StreamName, StreamRecord>,
    hash_index: BTreeMap<String, StreamName>,
    empty_since: BTreeMap<StreamName, u64>,
    metrics: Metrics,
}

/// Collects outputs for one call.
struct Out {
    items: Vec<ServiceOut>,
}

impl Registry {
    pub fn new(cfg: RegistryConfig) -> Self {
        Self {
            cfg,
            next_ep: 0,
            peers: BTreeMap::new(),
            by_ep: BTreeMap::new(),
            streams: BTreeMap::new(),
            hash_index: BTreeMap::new(),
            empty_since: BTreeMap::new(),
            metrics: Metrics::default(),
        }
    }

    pub fn config(&self) -> &RegistryConfig {
        &self.cfg
    }

    pub fn metrics(&self) -> &Metrics {
        &self.metrics
    }

    pub fn stream(&self, name: &StreamName) -> Option<&StreamRecord> {
        self.streams.get(name)
    }

    pub fn streams(&self) -> impl Iterator<Item = &StreamRecord> {
        self.streams.values()
    }

    pub fn endpoint(&self, peer: PeerId) -> Option<&EndpointId> {
        self.peers.get(&peer).map(|s| &s.ep)
    }

    pub fn session_count(&self) -> usize {
        self.peers.len()
    }

    pub fn snapshot(&self) -> Snapshot {
        Snapshot {
            sessions: self.peers.len(),
            streams: self.streams.values().cloned().collect(),
            metrics: self.metrics.clone(),
            audit: self.audit(),
        }
    }

    /// Registry invariants: the hash index mirrors the stream table and
    /// every session membership is reflected in its stream record.
    pub fn audit(&self) -> Result<(), String> {
        if self.hash_index.len() != self.streams.len() {
            return Err(format!(
                "hash index has {} entries for {} streams",
                self.hash_index.len(),
                self.streams.len()
            ));
        }
        for (name, rec) in &self.streams {
            rec.check().map_err(|e| format!("{name}: {e}"))?;
            if self.hash_index.get(rec.hashed.as_str()) != Some(name) {
                return Err(format!("{name}: missing from hash index"));
            }
            for ep in rec.publisher.iter().chain(&rec.subscribers) {
                if !self.by_ep.contains_key(ep) {
                    return Err(format!("{name}: member {ep} has no session"));
                }
            }
        }
        for s in self.peers.values() {
            for (name, role) in s.memberships.keys() {
                let rec = self
                    .streams
                    .get(name)
                    .ok_or_else(|| format!("{} holds unknown stream {name}", s.ep))?;
                let ok = match role {
                    MemberRole::Publisher => rec.is_publisher(&s.ep),
                    MemberRole::Subscriber => rec.subscribers.contains(&s.ep),
                };
                if !ok {
                    return Err(format!("{} not recorded as {role:?} of {name}", s.ep));
                }
            }
        }
        Ok(())
    }

    fn resolve(&self, r: &StreamRef) -> Result<(StreamName, bool), ErrorCode> {
        match r {
            StreamRef::Raw(n) => Ok((n.clone(), false)),
            StreamRef::Hashed(h) => self
                .hash_index
                .get(h.as_str())
                .map(|n| (n.clone(), true))
                .ok_or(ErrorCode::StreamUnknown),
            StreamRef::Control => Err(ErrorCode::InvalidRequest),
        }
    }

    /// The stream reference as `ep` knows it.
    fn ref_for(&self, ep: &EndpointId, name: &StreamName) -> StreamRef {
        let hashed = self
            .by_ep
            .get(ep)
            .and_then(|p| self.peers.get(p))
            .is_some_and(|s| {
                s.memberships
                    .get(&(name.clone(), MemberRole::Subscriber))
                    .is_some_and(|m| m.hashed)
            });
        if hashed {
            StreamRef::Hashed(name.hashed())
        } else {
            StreamRef::Raw(name.clone())
        }
    }

    fn record_mut(&mut self, name: &StreamName) -> &mut StreamRecord {
        if !self.streams.contains_key(name) {
            let rec = StreamRecord::new(name.clone());
            self.hash_index
                .insert(rec.hashed.as_str().to_string(), name.clone());
            self.streams.insert(name.clone(), rec);
        }
        self.streams.get_mut(name).expect("just inserted")
    }

    fn note_emptiness(&mut self, name: &StreamName, now: u64) {
        match self.streams.get(name) {
            Some(rec) if rec.is_empty() => {
                self.empty_since.entry(name.clone()).or_insert(now);
            }
            _ => {
                self.empty_since.remove(name);
            }
        }
    }

    fn next_seq(&mut self, peer: PeerId) -> u64 {
        let s = self.peers.get_mut(&peer).expect("live peer");
        s.out_seq += 1;
        s.out_seq
    }

    fn emit(&mut self, out: &mut Out, to: &EndpointId, stream: StreamRef, kind: MessageKind, payload: String) {
        let Some(&peer) = self.by_ep.get(to) else {
            return;
        };
        let seq = self.next_seq(peer);
        let from = EndpointId::new(self.cfg.service_id.clone()).expect("service id");
        let env = SignalEnvelope::new(stream, from, kind, seq, payload).to(to.clone());
        if kind == MessageKind::Error {
            self.metrics.errors_sent += 1;
        }
        out.items.push(ServiceOut::Send {
            peer,
            line: env.encode().expect("service envelopes are valid"),
        });
    }

    fn event(&mut self, out: &mut Out, to: &EndpointId, name: &StreamName, ev: ServiceEvent) {
        let stream = self.ref_for(to, name);
        self.emit(out, to, stream, MessageKind::Event, ev.to_payload());
    }

    fn error(
        &mut self,
        out: &mut Out,
        peer: PeerId,
        stream: StreamRef,
        code: ErrorCode,
        message: impl Into<String>,
        seq: Option<u64>,
    ) {
        let Some(ep) = self.peers.get(&peer).map(|s| s.ep.clone()) else {
            return;
        };
        let payload = ErrorPayload {
            code,
            message: message.into(),
            seq,
        }
        .to_payload();
        self.emit(out, &ep, stream, MessageKind::Error, payload);
    }

    fn hook(
        &mut self,
        out: &mut Out,
        event: HookEvent,
        stream: &StreamRef,
        ep: &EndpointId,
        urls: &[String],
        now: u64,
    ) {
        if !self.cfg.webhooks {
            return;
        }
        for url in urls {
            self.metrics.webhooks_queued += 1;
            out.items.push(ServiceOut::Webhook {
                url: url.clone(),
                body: webhook::body(event, stream.as_str(), ep.as_str(), now),
            });
        }
    }

    fn handle(&mut self, peer: PeerId, line: &str, now: u64, out: &mut Out) {
        let Some(ep) = self.peers.get(&peer).map(|s| s.ep.clone()) else {
            return;
        };
        if MediaFrame::is_frame_line(line) {
            return self.handle_frame(peer, &ep, line, out);
        }
        let env = match SignalEnvelope::decode_str(line) {
            Ok(env) => env,
            Err(e) => {
                self.metrics.malformed += 1;
                let code = match e {
                    WireError::PayloadTooLarge(_) => ErrorCode::Overflow,
                    _ => ErrorCode::Malformed,
                };
                return self.error(out, peer, StreamRef::Control, code, e.to_string(), None);
            }
        };
        self.metrics.envelopes_in += 1;
        let reply_ref = env.stream.clone();
        if env.from != ep {
            return self.error(
                out,
                peer,
                reply_ref,
                ErrorCode::InvalidRequest,
                format!("`from` must be {ep}"),
                Some(env.seq),
            );
        }
        let session = self.peers.get_mut(&peer).expect("live peer");
        let key = env.stream.as_str().to_string();
        match session.seen.get(&key) {
            Some(&last) if env.seq <= last => {
                self.metrics.duplicates += 1;
                return;
            }
            _ => {
                session.seen.insert(key, env.seq);
            }
        }
        if matches!(env.kind, MessageKind::Event | MessageKind::Error) {
            return self.error(
                out,
                peer,
                reply_ref,
                ErrorCode::InvalidRequest,
                "EVENT and ERROR are service-originated",
                Some(env.seq),
            );
        }
        if env.kind == MessageKind::Publish && env.stream.is_hashed() {
            return self.error(
                out,
                peer,
                reply_ref,
                ErrorCode::InvalidRequest,
                "publish requires the raw stream name",
                Some(env.seq),
            );
        }
        let (name, hashed) = match self.resolve(&env.stream) {
            Ok(r) => r,
            Err(code) => {
                return self.error(out, peer, reply_ref, code, "no such stream", Some(env.seq));
            }
        };
        match env.kind {
            MessageKind::Publish => self.on_publish(peer, &ep, &name, &env, now, out),
            MessageKind::Subscribe => self.on_subscribe(peer, &ep, &name, hashed, &env, now, out),
            MessageKind::Stop => {
                self.detach(&ep, &name, now, out);
            }
            MessageKind::Offer
                if self.cfg.mode == Mode::Forward
                    && env.to.as_ref().map(EndpointId::as_str) == Some(&self.cfg.service_id) =>
            {
                self.answer_link(&ep, &env, out)
            }
            _ => self.forward(peer, &ep, &name, env, out),
        }
    }

    fn on_publish(
        &mut self,
        peer: PeerId,
        ep: &EndpointId,
        name: &StreamName,
        env: &SignalEnvelope,
        now: u64,
        out: &mut Out,
    ) {
        let join = match JoinPayload::parse(&env.payload) {
            Ok(j) => j,
            Err(e) => {
                return self.error(out, peer, env.stream.clone(), ErrorCode::InvalidRequest, e.to_string(), Some(env.seq));
            }
        };
        let rec = self.record_mut(name);
        match rec.attach_publisher(ep) {
            Err(e) => {
                self.note_emptiness(name, now);
                self.error(out, peer, env.stream.clone(), ErrorCode::PublisherConflict, e.to_string(), Some(env.seq))
            }
            Ok(Change::Unchanged) => {}
            Ok(Change::Applied) => {
                rec.tracks = join.tracks.clone();
                let subscribers: Vec<EndpointId> = rec.subscribers.iter().cloned().collect();
                let ping = webhook::parse_targets(join.ping.as_deref().unwrap_or(""));
                self.peers.get_mut(&peer).expect("live peer").memberships.insert(
                    (name.clone(), MemberRole::Publisher),
                    Membership {
                        hashed: false,
                        ping: ping.clone(),
                    },
                );
                self.empty_since.remove(name);
                self.hook(out, HookEvent::Publish, &env.stream, ep, &ping, now);
                for sub in subscribers {
                    if self.cfg.mode == Mode::Relay {
                        let hashed = self.ref_for(&sub, name).is_hashed();
                        self.event(
                            out,
                            ep,
                            name,
                            ServiceEvent::SubscriberJoined {
                                endpoint: sub.clone(),
                                hashed,
                            },
                        );
                    }
                    self.event(
                        out,
                        &sub,
                        name,
                        ServiceEvent::PublisherLive {
                            endpoint: ep.clone(),
                            tracks: join.tracks.clone(),
                        },
                    );
                }
            }
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn on_subscribe(
        &mut self,
        peer: PeerId,
        ep: &EndpointId,
        name: &StreamName,
        hashed: bool,
        env: &SignalEnvelope,
        now: u64,
        out: &mut Out,
    ) {
        let join = match JoinPayload::parse(&env.payload) {
            Ok(j) => j,
            Err(e) => {
                return self.error(out, peer, env.stream.clone(), ErrorCode::InvalidRequest, e.to_string(), Some(env.seq));
            }
        };
        let ping = webhook::parse_targets(join.ping.as_deref().unwrap_or(""));
        self.peers.get_mut(&peer).expect("live peer").memberships.insert(
            (name.clone(), MemberRole::Subscriber),
            Membership {
                hashed,
                ping: ping.clone(),
            },
        );
        let rec = self.record_mut(name);
        let change = rec.attach_subscriber(ep);
        let live = rec.publisher.clone().map(|p| (p, rec.tracks.clone()));
        self.empty_since.remove(name);
        if change == Change::Unchanged {
            return;
        }
        self.hook(out, HookEvent::Subscribe, &env.stream, ep, &ping, now);
        if let Some((publisher, tracks)) = live {
            if self.cfg.mode == Mode::Relay {
                self.event(
                    out,
                    &publisher,
                    name,
                    ServiceEvent::SubscriberJoined {
                        endpoint: ep.clone(),
                        hashed,
                    },
                );
            }
            self.event(
                out,
                ep,
                name,
                ServiceEvent::PublisherLive {
                    endpoint: publisher,
                    tracks,
                },
            );
        }
    }

    /// Removes `ep` from `name` in whatever role it holds and tells the
    /// other side.
    fn detach(&mut self, ep: &EndpointId, name: &StreamName, now: u64, out: &mut Out) {
        let Some(rec) = self.streams.get_mut(name) else {
            return;
        };
        let publisher = rec.publisher.clone();
        let what = rec.detach(ep);
        let subscribers: Vec<EndpointId> = rec.subscribers.iter().cloned().collect();
        let mut roles = Vec::new();
        if matches!(what, Detached::Publisher | Detached::Both) {
            roles.push(MemberRole::Publisher);
            for sub in &subscribers {
                self.event(out, sub, name, ServiceEvent::PeerGone { endpoint: ep.clone() });
            }
        }
        if matches!(what, Detached::Subscriber | Detached::Both) {
            roles.push(MemberRole::Subscriber);
            if let Some(p) = publisher.filter(|p| p != ep) {
                if self.cfg.mode == Mode::Relay {
                    self.event(out, &p, name, ServiceEvent::PeerGone { endpoint: ep.clone() });
                }
            }
        }
        for role in roles {
            let m = self
                .by_ep
                .get(ep)
                .and_then(|p| self.peers.get_mut(p))
                .and_then(|s| s.memberships.remove(&(name.clone(), role)));
            if let Some(m) = m {
                let stream = if m.hashed {
                    StreamRef::Hashed(name.hashed())
                } else {
                    StreamRef::Raw(name.clone())
                };
                self.hook(out, HookEvent::Stop, &stream, ep, &m.ping, now);
            }
        }
        self.note_emptiness(name, now);
    }

    fn answer_link(&mut self, ep: &EndpointId, env: &SignalEnvelope, out: &mut Out) {
        let Ok(sig) = LinkSignal::parse(&env.payload) else {
            let peer = self.by_ep[ep];
            return self.error(out, peer, env.stream.clone(), ErrorCode::InvalidRequest, "bad link offer", Some(env.seq));
        };
        let answer = LinkSignal {
            link: sig.link,
            desc: serde_json::json!({}),
        };
        self.emit(
            out,
            ep,
            env.stream.clone(),
            MessageKind::Answer,
            serde_json::to_string(&answer).expect("link signal serializes"),
        );
    }

    fn forward(&mut self, peer: PeerId, ep: &EndpointId, name: &StreamName, env: SignalEnvelope, out: &mut Out) {
        let rec = self.streams.get(name).expect("resolved stream exists");
        let targets = match route_rule(env.kind, rec, ep, env.to.as_ref()) {
            Ok(t) => t,
            Err(e) => {
                return self.error(out, peer, env.stream.clone(), e.code(), e.to_string(), Some(env.seq));
            }
        };
        if matches!(env.kind, MessageKind::TracksAdded | MessageKind::TracksRemoved) {
            let Ok(p) = serde_json::from_str::<TracksPayload>(&env.payload) else {
                return self.error(out, peer, env.stream.clone(), ErrorCode::TrackError, "bad tracks payload", Some(env.seq));
            };
            let rec = self.streams.get_mut(name).expect("resolved stream exists");
            let res = if env.kind == MessageKind::TracksAdded {
                merge_tracks(&mut rec.tracks, &p.tracks)
            } else {
                let labels: Vec<String> = p.tracks.iter().map(|t| t.label.clone()).collect();
                drop_tracks(&mut rec.tracks, &labels)
            };
            if let Err(e) = res {
                return self.error(out, peer, env.stream.clone(), ErrorCode::TrackError, e.to_string(), Some(env.seq));
            }
        }
        for to in targets {
            let Some(&tp) = self.by_ep.get(&to) else {
                continue;
            };
            let mut copy = env.clone();
            copy.stream = self.ref_for(&to, name);
            self.metrics.envelopes_forwarded += 1;
            out.items.push(ServiceOut::Send {
                peer: tp,
                line: copy.encode().expect("forwarded envelope was valid"),
            });
        }
    }

    fn handle_frame(&mut self, peer: PeerId, ep: &EndpointId, line: &str, out: &mut Out) {
        if self.cfg.mode == Mode::Relay {
            self.metrics.malformed += 1;
            return self.error(out, peer, StreamRef::Control, ErrorCode::InvalidRequest, "this service carries no media", None);
        }
        let Some(frame) = MediaFrame::from_line(line) else {
            self.metrics.malformed += 1;
            return self.error(out, peer, StreamRef::Control, ErrorCode::Malformed, "bad frame line", None);
        };
        let Ok((name, _)) = self.resolve(&frame.stream) else {
            return;
        };
        let Some(rec) = self.streams.get(&name) else {
            return;
        };
        if !rec.is_publisher(ep) {
            return self.error(out, peer, frame.stream.clone(), ErrorCode::RoleError, "only the publisher sends media", None);
        }
        let targets: Vec<EndpointId> = rec.subscribers.iter().cloned().collect();
        for to in targets {
            let Some(&tp) = self.by_ep.get(&to) else {
                continue;
            };
            let mut copy = frame.clone();
            copy.stream = self.ref_for(&to, &name);
            self.metrics.frames_forwarded += 1;
            out.items.push(ServiceOut::Send {
                peer: tp,
                line: copy.to_line(),
            });
        }
    }

    /// Streams this endpoint belongs to.
    pub fn memberships(&self, ep: &EndpointId) -> BTreeSet<(StreamName, MemberRole)> {
        self.by_ep
            .get(ep)
            .and_then(|p| self.peers.get(p))
            .map(|s| s.memberships.keys().cloned().collect())
            .unwrap_or_default()
    }
}

impl Service for Registry {
    fn connect(&mut self, peer: PeerId, _now: u64) -> Vec<ServiceOut> {
        self.next_ep += 1;
        self.metrics.connects += 1;
        let ep = EndpointId::new(format!("{}-{}-{}", self.cfg.id_prefix, self.cfg.boot, self.next_ep))
            .expect("non-empty id");
        self.peers.insert(
            peer,
            Session {
                ep: ep.clone(),
                memberships: BTreeMap::new(),
                out_seq: 0,
                seen: HashMap::new(),
            },
        );
        self.by_ep.insert(ep.clone(), peer);
        let mut out = Out { items: Vec::new() };
        let payload = ServiceEvent::Welcome { endpoint: ep.clone() }.to_payload();
        self.emit(&mut out, &ep, StreamRef::Control, MessageKind::Event, payload);
        out.items
    }

    fn receive(&mut self, peer: PeerId, line: &str, now: u64) -> Vec<ServiceOut> {
        let mut out = Out { items: Vec::new() };
        self.handle(peer, line, now, &mut out);
        out.items
    }

    fn disconnect(&mut self, peer: PeerId, now: u64) -> Vec<ServiceOut> {
        let mut out = Out { items: Vec::new() };
        let Some(ep) = self.peers.get(&peer).map(|s| s.ep.clone()) else {
            return out.items;
        };
        let names: BTreeSet<StreamName> = self.peers[&peer]
            .memberships
            .keys()
            .map(|(n, _)| n.clone())
            .collect();
        for name in names {
            self.detach(&ep, &name, now, &mut out);
        }
        self.peers.remove(&peer);
        self.by_ep.remove(&ep);
        out.items
    }

    fn tick(&mut self, now: u64) -> Vec<ServiceOut> {
        let expired: Vec<StreamName> = self
            .empty_since
            .iter()
            .filter(|(_, &t)| now.saturating_sub(t) >= self.cfg.idle_gc_ms)
            .map(|(n, _)| n.clone())
            .collect();
        for name in expired {
            self.empty_since.remove(&name);
            if let Some(rec) = self.streams.remove(&name) {
                self.hash_index.remove(rec.hashed.as_str());
                self.metrics.streams_collected += 1;
            }
        }
        Vec::new()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn lines(out: &[ServiceOut], peer: PeerId) -> Vec<SignalEnvelope> {
        out.iter()
            .filter_map(|o| match o {
                ServiceOut::Send { peer: p, line } if *p == peer => SignalEnvelope::decode_str(line).ok(),
                _ => None,
            })
            .collect()
    }

    fn join(reg: &mut Registry, peer: PeerId) -> EndpointId {
        let out = reg.connect(peer, 0);
        let welcome = &lines(&out, peer)[0];
        assert_eq!(welcome.stream, StreamRef::Control);
        match ServiceEvent::parse(&welcome.payload).unwrap() {
            ServiceEvent::Welcome { endpoint } => endpoint,
            other => panic!("{other:?}"),
        }
    }

    fn send(reg: &mut Registry, peer: PeerId, ep: &EndpointId, stream: &str, kind: MessageKind, seq: u64, payload: &str) -> Vec<ServiceOut> {
        let env = SignalEnvelope::new(StreamRef::parse(stream).unwrap(), ep.clone(), kind, seq, payload);
        reg.receive(peer, &env.encode().unwrap(), 0)
    }

    #[test]
    fn ids_are_distinct() {
        let mut reg = Registry::new(RegistryConfig::broker(1));
        let a = join(&mut reg, 1);
        reg.disconnect(1, 0);
        let b = join(&mut reg, 2);
        assert_ne!(a, b);
    }

    #[test]
    fn second_publisher_is_rejected() {
        let mut reg = Registry::new(RegistryConfig::broker(1));
        let a = join(&mut reg, 1);
        let b = join(&mut reg, 2);
        assert!(send(&mut reg, 1, &a, "s", MessageKind::Publish, 1, "").is_empty());
        let out = send(&mut reg, 2, &b, "s", MessageKind::Publish, 1, "");
        let err = ErrorPayload::parse(&lines(&out, 2)[0].payload).unwrap();
        assert_eq!(err.code, ErrorCode::PublisherConflict);
        // a replay from the holder is a no-op
        assert!(send(&mut reg, 1, &a, "s", MessageKind::Publish, 2, "").is_empty());
        reg.audit().unwrap();
    }

    #[test]
    fn endpoint_may_subscribe_to_its_own_stream() {
        let mut reg = Registry::new(RegistryConfig::broker(1));
        let a = join(&mut reg, 1);
        send(&mut reg, 1, &a, "s", MessageKind::Publish, 1, "");
        let out = send(&mut reg, 1, &a, "s", MessageKind::Subscribe, 2, "");
        assert!(lines(&out, 1)
            .iter()
            .any(|e| matches!(ServiceEvent::parse(&e.payload), Ok(ServiceEvent::PublisherLive { .. }))));
        assert_eq!(reg.memberships(&a).len(), 2);
        reg.audit().unwrap();
    }

    #[test]
    fn pending_subscriber_hears_of_publisher() {
        let mut reg = Registry::new(RegistryConfig::broker(1));
        let a = join(&mut reg, 1);
        let s = join(&mut reg, 2);
        send(&mut reg, 2, &s, "s", MessageKind::Subscribe, 1, "");
        let out = send(&mut reg, 1, &a, "s", MessageKind::Publish, 1, r#"{"tracks":[{"kind":"video","label":"video"}]}"#);
        let to_pub = lines(&out, 1);
        let to_sub = lines(&out, 2);
        assert!(matches!(ServiceEvent::parse(&to_pub[0].payload).unwrap(), ServiceEvent::SubscriberJoined { endpoint, hashed: false } if endpoint == s));
        assert!(matches!(ServiceEvent::parse(&to_sub[0].payload).unwrap(), ServiceEvent::PublisherLive { endpoint, tracks } if endpoint == a && tracks.len() == 1));
    }

    #[test]
    fn hashed_subscriber_never_sees_raw_name() {
        let mut reg = Registry::new(RegistryConfig::broker(1));
        let a = join(&mut reg, 1);
        let s = join(&mut reg, 2);
        let h = StreamName::new("str/15").unwrap().hashed();
        let out = send(&mut reg, 2, &s, h.as_str(), MessageKind::Subscribe, 1, "");
        assert_eq!(ErrorPayload::parse(&lines(&out, 2)[0].payload).unwrap().code, ErrorCode::StreamUnknown);
        send(&mut reg, 1, &a, "str/15", MessageKind::Publish, 1, "");
        let out = send(&mut reg, 2, &s, h.as_str(), MessageKind::Subscribe, 2, "");
        for env in lines(&out, 2) {
            assert_eq!(env.stream.as_str(), h.as_str());
        }
        let offer = SignalEnvelope::new(StreamRef::parse("str/15").unwrap(), a.clone(), MessageKind::Offer, 2, r#"{"link":"x"}"#).to(s.clone());
        let out = reg.receive(1, &offer.encode().unwrap(), 0);
        let got = &lines(&out, 2)[0];
        assert_eq!(got.stream.as_str(), h.as_str());
        assert_eq!(got.payload, offer.payload);
        for o in &out {
            if let ServiceOut::Send { line, .. } = o {
                assert!(!line.contains("str/15"));
            }
        }
    }

    #[test]
    fn text_fans_out_and_roles_are_enforced() {
        let mut reg = Registry::new(RegistryConfig::broker(1));
        let a = join(&mut reg, 1);
        send(&mut reg, 1, &a, "s", MessageKind::Publish, 1, "");
        let subs: Vec<EndpointId> = (2..5).map(|p| join(&mut reg, p)).collect();
        for (i, s) in subs.iter().enumerate() {
            send(&mut reg, i as u64 + 2, s, "s", MessageKind::Subscribe, 1, "");
        }
        let out = send(&mut reg, 1, &a, "s", MessageKind::Text, 2, "hi");
        assert_eq!(out.len(), 3);
        let out = send(&mut reg, 2, &subs[0], "s", MessageKind::TracksAdded, 2, r#"{"tracks":[]}"#);
        assert_eq!(ErrorPayload::parse(&lines(&out, 2)[0].payload).unwrap().code, ErrorCode::RoleError);
        let out = send(&mut reg, 3, &subs[1], "s", MessageKind::Text, 2, "ack");
        assert_eq!(lines(&out, 1).len(), 1);
        // duplicate seq is dropped
        assert!(send(&mut reg, 3, &subs[1], "s", MessageKind::Text, 2, "ack").is_empty());
    }

    #[test]
    fn disconnect_cleans_up_and_gc_collects() {
        let mut reg = Registry::new(RegistryConfig::broker(1));
        let a = join(&mut reg, 1);
        let s = join(&mut reg, 2);
        send(&mut reg, 1, &a, "s", MessageKind::Publish, 1, "");
        send(&mut reg, 2, &s, "s", MessageKind::Subscribe, 1, "");
        let out = reg.disconnect(1, 10);
        assert!(matches!(ServiceEvent::parse(&lines(&out, 2)[0].payload).unwrap(), ServiceEvent::PeerGone { endpoint } if endpoint == a));
        let rec = reg.stream(&StreamName::new("s").unwrap()).unwrap();
        assert!(rec.publisher.is_none());
        assert!(rec.subscribers.contains(&s));
        reg.disconnect(2, 20);
        reg.tick(20 + 59_999);
        assert_eq!(reg.streams().count(), 1);
        reg.tick(20 + 60_000);
        assert_eq!(reg.streams().count(), 0);
        reg.audit().unwrap();
    }

    #[test]
    fn relay_refuses_media_forward_mode_carries_it() {
        let frame = MediaFrame {
            stream: StreamRef::parse("s").unwrap(),
            track_label: "video".into(),
            seq: 0,
            ts_ms: 0,
            payload: vec![1, 2, 3],
            sealed: true,
        };
        let mut reg = Registry::new(RegistryConfig::broker(1));
        let a = join(&mut reg, 1);
        send(&mut reg, 1, &a, "s", MessageKind::Publish, 1, "");
        let out = reg.receive(1, &frame.to_line(), 0);
        assert_eq!(ErrorPayload::parse(&lines(&out, 1)[0].payload).unwrap().code, ErrorCode::InvalidRequest);

        let mut sfu = Registry::new(RegistryConfig::sfu(1));
        let a = join(&mut sfu, 1);
        let s = join(&mut sfu, 2);
        send(&mut sfu, 1, &a, "s", MessageKind::Publish, 1, "");
        let out = send(&mut sfu, 2, &s, "s", MessageKind::Subscribe, 1, "");
        assert_eq!(lines(&out, 1).len(), 0, "no subscriber-joined in forward mode");
        let out = sfu.receive(1, &frame.to_line(), 0);
        let [ServiceOut::Send { peer: 2, line }] = out.as_slice() else {
            panic!("{out:?}")
        };
        assert_eq!(MediaFrame::from_line(line).unwrap(), frame);
        // without `to` the offer is routed like any other envelope
        let out = send(&mut sfu, 2, &s, "s", MessageKind::Offer, 2, r#"{"link":"sfu:x"}"#);
        assert_eq!(lines(&out, 1).len(), 1);
        let env = SignalEnvelope::new(StreamRef::parse("s").unwrap(), s.clone(), MessageKind::Offer, 3, r#"{"link":"sfu:x"}"#)
            .to(EndpointId::new("sfu").unwrap());
        let out = sfu.receive(2, &env.encode().unwrap(), 0);
        assert_eq!(lines(&out, 2)[0].kind, MessageKind::Answer);
    }
}
