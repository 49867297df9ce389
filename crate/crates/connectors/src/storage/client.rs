use std::collections::{BTreeMap, BTreeSet};

use namedstream_core::endpoint::{LinkItem, Outgoing};
use namedstream_core::wire::{ErrorCode, ErrorPayload, ServiceEvent};
use namedstream_core::{
    ConnId, Connector, ConnectorError, EndpointId, EndpointSession, Io, IoCmd, MessageKind,
    Role, SessionError, SessionEvent, SessionTable, SignalEnvelope, StreamName, StreamRef,
    Topology, TrackDescriptor,
};

use super::service::{Notice, Request};
use super::{inbox_path, parse_entry, publisher_path, stream_prefix, subscriber_path, Entry, PublisherEntry};
use crate::backoff::Backoff;

#[derive(Debug)]
struct Conn {
    label: String,
    ep: Option<EndpointId>,
}

/// What this session has learned about the other side from the store.
#[derive(Debug)]
struct Member {
    name: StreamName,
    role: Role,
    publisher: Option<EndpointId>,
    subscribers: BTreeSet<EndpointId>,
}

/// Peer namespace of every storage client. Nodes sharing one store hand
/// out disjoint `<node>.<n>` ids, so their endpoints can reach each other.
pub const PEER_NS: &str = "storage";

/// Mesh links negotiated through a shared store instead of a broker.
#[derive(Debug)]
pub struct StorageClient {
    service: String,
    next_conn: ConnId,
    conns: BTreeMap<ConnId, Conn>,
    by_label: BTreeMap<String, ConnId>,
    eps: BTreeMap<EndpointId, String>,
    members: BTreeMap<String, Member>,
    retry: BTreeMap<String, Backoff>,
    timers: BTreeMap<u64, String>,
    next_timer: u64,
}

impl StorageClient {
    pub fn new(service: impl Into<String>) -> Self {
        Self {
            service: service.into(),
            next_conn: 0,
            conns: BTreeMap::new(),
            by_label: BTreeMap::new(),
            eps: BTreeMap::new(),
            members: BTreeMap::new(),
            retry: BTreeMap::new(),
            timers: BTreeMap::new(),
            next_timer: 0,
        }
    }

    fn send(io: &mut Io, conn: ConnId, req: &Request) {
        io.send(conn, serde_json::to_string(req).expect("request serializes"));
    }

    fn welcomed(&self, label: &str) -> Option<(ConnId, EndpointId)> {
        let conn = *self.by_label.get(label)?;
        self.conns.get(&conn)?.ep.clone().map(|ep| (conn, ep))
    }

    fn open(&mut self, label: &str, io: &mut Io) {
        self.next_conn += 1;
        let conn = self.next_conn;
        self.conns.insert(
            conn,
            Conn {
                label: label.to_string(),
                ep: None,
            },
        );
        self.by_label.insert(label.to_string(), conn);
        io.open(conn, self.service.clone());
    }

    fn attach(&mut self, sess: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError> {
        let name = match sess.stream() {
            Some(StreamRef::Raw(n)) => n.clone(),
            Some(other) => {
                return Err(ConnectorError::Unsupported(format!(
                    "storage streams are addressed by raw name, not `{other}`"
                )))
            }
            None => return Err(ConnectorError::Invalid("no stream".into())),
        };
        self.members.insert(
            sess.label().to_string(),
            Member {
                name,
                role: sess.role(),
                publisher: None,
                subscribers: BTreeSet::new(),
            },
        );
        if !self.by_label.contains_key(sess.label()) {
            self.open(sess.label(), io);
        } else if self.welcomed(sess.label()).is_some() {
            self.join(sess, io);
        }
        Ok(())
    }

    fn join(&mut self, sess: &mut EndpointSession, io: &mut Io) {
        let Some((conn, ep)) = self.welcomed(sess.label()) else {
            return;
        };
        let Some(m) = self.members.get(sess.label()) else {
            return;
        };
        let req = match m.role {
            Role::Publisher => Request::Create {
                path: publisher_path(&m.name),
                value: serde_json::to_string(&PublisherEntry {
                    endpoint: ep.clone(),
                    tracks: sess.tracks().to_vec(),
                })
                .expect("entry serializes"),
                ephemeral: true,
            },
            Role::Subscriber => Request::Put {
                path: subscriber_path(&m.name, &ep),
                value: "{}".into(),
                ephemeral: true,
            },
            Role::Unset => return,
        };
        Self::send(io, conn, &req);
        Self::send(
            io,
            conn,
            &Request::Watch {
                prefix: stream_prefix(&m.name),
            },
        );
    }

    fn on_created(&mut self, label: &str, ok: bool, value: &str, sess: &mut EndpointSession, io: &mut Io) {
        if ok {
            return;
        }
        let Some((conn, ep)) = self.welcomed(label) else {
            return;
        };
        let holder = serde_json::from_str::<PublisherEntry>(value).ok().map(|e| e.endpoint);
        if holder.as_ref() == Some(&ep) {
            return;
        }
        if let Some(m) = self.members.remove(label) {
            Self::send(
                io,
                conn,
                &Request::Unwatch {
                    prefix: stream_prefix(&m.name),
                },
            );
        }
        sess.on_service_error(ErrorPayload {
            code: ErrorCode::PublisherConflict,
            message: format!("held by {}", holder.map(|h| h.to_string()).unwrap_or_default()),
            seq: None,
        });
    }

    fn on_change(&mut self, label: &str, path: &str, value: Option<&str>, sess: &mut EndpointSession, io: &mut Io) {
        let Some((conn, ep)) = self.welcomed(label) else {
            return;
        };
        let Some(m) = self.members.get_mut(label) else {
            return;
        };
        let Some(rest) = path.strip_prefix(&stream_prefix(&m.name)) else {
            return;
        };
        let mut events = Vec::new();
        match parse_entry(rest) {
            Some(Entry::Publisher) if m.role == Role::Subscriber => {
                let entry = value.and_then(|v| serde_json::from_str::<PublisherEntry>(v).ok());
                let now = entry.as_ref().map(|e| e.endpoint.clone());
                if now != m.publisher {
                    if let Some(old) = m.publisher.take() {
                        events.push(ServiceEvent::PeerGone { endpoint: old });
                    }
                    if let Some(e) = entry {
                        m.publisher = Some(e.endpoint.clone());
                        events.push(ServiceEvent::PublisherLive {
                            endpoint: e.endpoint,
                            tracks: e.tracks,
                        });
                    }
                }
            }
            Some(Entry::Subscriber(sub)) if m.role == Role::Publisher && sub != ep => {
                if value.is_some() {
                    if m.subscribers.insert(sub.clone()) {
                        events.push(ServiceEvent::SubscriberJoined {
                            endpoint: sub,
                            hashed: false,
                        });
                    }
                } else if m.subscribers.remove(&sub) {
                    events.push(ServiceEvent::PeerGone { endpoint: sub });
                }
            }
            Some(Entry::Inbox { to, .. }) if to == ep => {
                if let Some(line) = value {
                    match SignalEnvelope::decode_str(line) {
                        Ok(env) => {
                            if let Err(e) = sess.apply_envelope(&env) {
                                sess.relay_event(SessionEvent::Error(e));
                            }
                        }
                        Err(e) => sess.relay_event(SessionEvent::Error(SessionError::Payload(e.to_string()))),
                    }
                    Self::send(io, conn, &Request::Delete { path: path.to_string() });
                }
            }
            _ => {}
        }
        for ev in events {
            if let Err(e) = sess.on_service_event(ev) {
                sess.relay_event(SessionEvent::Error(e));
            }
        }
    }

    fn drop_conn(&mut self, conn: ConnId, io: &mut Io) -> Option<Conn> {
        let c = self.conns.remove(&conn)?;
        if self.by_label.get(&c.label) == Some(&conn) {
            self.by_label.remove(&c.label);
        }
        if let Some(ep) = &c.ep {
            if self.eps.remove(ep).is_some() {
                io.push(IoCmd::Unregister {
                    ns: PEER_NS.to_string(),
                    ep: ep.clone(),
                });
            }
        }
        Some(c)
    }
}

impl Connector for StorageClient {
    fn scheme(&self) -> &str {
        "storage"
    }

    fn topology(&self) -> Topology {
        Topology::Mesh
    }

    fn publish(&mut self, sess: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError> {
        self.attach(sess, io)
    }

    fn subscribe(&mut self, sess: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError> {
        self.attach(sess, io)
    }

    fn stop(&mut self, sess: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError> {
        self.flush(sess, io);
        sess.drain_outgoing();
        self.retry.remove(sess.label());
        let Some(m) = self.members.remove(sess.label()) else {
            return Ok(());
        };
        let Some((conn, ep)) = self.welcomed(sess.label()) else {
            return Ok(());
        };
        let path = match m.role {
            Role::Publisher => publisher_path(&m.name),
            _ => subscriber_path(&m.name, &ep),
        };
        Self::send(io, conn, &Request::Delete { path });
        Self::send(
            io,
            conn,
            &Request::Unwatch {
                prefix: stream_prefix(&m.name),
            },
        );
        Ok(())
    }

    fn add_tracks(
        &mut self,
        sess: &mut EndpointSession,
        tracks: &[TrackDescriptor],
        _: &mut Io,
    ) -> Result<(), ConnectorError> {
        sess.announce_tracks(MessageKind::TracksAdded, tracks);
        Ok(())
    }

    fn remove_tracks(
        &mut self,
        sess: &mut EndpointSession,
        tracks: &[TrackDescriptor],
        _: &mut Io,
    ) -> Result<(), ConnectorError> {
        sess.announce_tracks(MessageKind::TracksRemoved, tracks);
        Ok(())
    }

    fn flush(&mut self, sess: &mut EndpointSession, io: &mut Io) {
        let Some((conn, ep)) = self.welcomed(sess.label()) else {
            if !self.by_label.contains_key(sess.label()) {
                sess.drain_outgoing();
            }
            return;
        };
        for out in sess.drain_outgoing() {
            match out {
                Outgoing::Data(d) => {
                    let Some(m) = self.members.get(sess.label()) else {
                        continue;
                    };
                    let targets: Vec<EndpointId> = match (&d.to, m.role) {
                        (Some(t), _) => vec![t.clone()],
                        (None, Role::Publisher) => m.subscribers.iter().cloned().collect(),
                        (None, _) => m.publisher.iter().cloned().collect(),
                    };
                    let stream = StreamRef::Raw(m.name.clone());
                    for t in targets {
                        let mut env = SignalEnvelope::new(stream.clone(), ep.clone(), d.kind, d.seq, d.payload.clone());
                        env.to = Some(t.clone());
                        let Ok(line) = env.encode() else {
                            continue;
                        };
                        Self::send(
                            io,
                            conn,
                            &Request::Put {
                                path: inbox_path(&m.name, &t, &ep, d.seq),
                                value: line,
                                ephemeral: true,
                            },
                        );
                    }
                    if matches!(d.kind, MessageKind::TracksAdded | MessageKind::TracksRemoved)
                        && m.role == Role::Publisher
                    {
                        // late subscribers read the track list from here
                        Self::send(
                            io,
                            conn,
                            &Request::Put {
                                path: publisher_path(&m.name),
                                value: serde_json::to_string(&PublisherEntry {
                                    endpoint: ep.clone(),
                                    tracks: sess.tracks().to_vec(),
                                })
                                .expect("entry serializes"),
                                ephemeral: true,
                            },
                        );
                    }
                }
                Outgoing::Link { to, item, .. } => io.push(IoCmd::Peer {
                    ns: PEER_NS.to_string(),
                    from: ep.clone(),
                    to,
                    item,
                }),
                Outgoing::Local(_) => {}
            }
        }
    }

    fn on_receive(&mut self, conn: ConnId, line: &str, sessions: &mut dyn SessionTable, io: &mut Io) {
        let Some(label) = self.conns.get(&conn).map(|c| c.label.clone()) else {
            return;
        };
        let Some(sess) = sessions.session(&label) else {
            return;
        };
        let notice = match serde_json::from_str::<Notice>(line) {
            Ok(n) => n,
            Err(e) => {
                sess.relay_event(SessionEvent::Error(SessionError::Payload(e.to_string())));
                return;
            }
        };
        match notice {
            Notice::Welcome { endpoint } => {
                if let Some(c) = self.conns.get_mut(&conn) {
                    c.ep = Some(endpoint.clone());
                }
                if let Some(old) = sess.id().cloned() {
                    if self.eps.remove(&old).is_some() {
                        io.push(IoCmd::Unregister {
                            ns: PEER_NS.to_string(),
                            ep: old,
                        });
                    }
                }
                self.retry.remove(&label);
                sess.set_endpoint_id(endpoint.clone());
                self.eps.insert(endpoint.clone(), label.clone());
                io.push(IoCmd::Register {
                    ns: PEER_NS.to_string(),
                    ep: endpoint,
                    session: label.clone(),
                });
                if let Some(m) = self.members.get_mut(&label) {
                    m.publisher = None;
                    m.subscribers.clear();
                }
                self.join(sess, io);
            }
            Notice::Created { ok, value, .. } => self.on_created(&label, ok, &value, sess, io),
            Notice::Change(ch) => self.on_change(&label, &ch.path, ch.value.as_deref(), sess, io),
            Notice::Error { message } => sess.relay_event(SessionEvent::Error(SessionError::Service {
                code: ErrorCode::InvalidRequest,
                message,
            })),
        }
    }

    fn on_peer(
        &mut self,
        to: &EndpointId,
        from: &EndpointId,
        item: LinkItem,
        sessions: &mut dyn SessionTable,
        _: &mut Io,
    ) {
        let Some(label) = self.eps.get(to) else {
            return;
        };
        if let Some(sess) = sessions.session(label) {
            if let Err(e) = sess.on_link_item(from, item) {
                sess.relay_event(SessionEvent::Error(e));
            }
        }
    }

    fn on_closed(&mut self, conn: ConnId, sessions: &mut dyn SessionTable, io: &mut Io) {
        let Some(c) = self.drop_conn(conn, io) else {
            return;
        };
        let Some(sess) = sessions.session(&c.label) else {
            return;
        };
        if c.ep.is_some() {
            sess.on_transport_lost(&format!("{} closed", self.service));
        }
        if sess.role() == Role::Unset {
            return;
        }
        let delay = self.retry.entry(c.label.clone()).or_default().next_delay();
        match delay {
            Some(d) => {
                self.next_timer += 1;
                self.timers.insert(self.next_timer, c.label);
                io.timer(d, self.next_timer);
            }
            None => {
                self.retry.remove(&c.label);
                self.members.remove(&c.label);
                sess.relay_event(SessionEvent::Error(SessionError::Transport(format!(
                    "{}: gave up reconnecting",
                    self.service
                ))));
                sess.reset();
            }
        }
    }

    fn on_timer(&mut self, token: u64, sessions: &mut dyn SessionTable, io: &mut Io) {
        let Some(label) = self.timers.remove(&token) else {
            return;
        };
        let Some(sess) = sessions.session(&label) else {
            return;
        };
        if sess.role() != Role::Unset && !self.by_label.contains_key(&label) {
            self.open(&label, io);
        }
    }
}
