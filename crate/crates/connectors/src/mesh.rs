//! Mesh clients: each session holds its own connection to a signaling
//! service and one peer link per counterpart. The same client drives the
//! in-process hub (`mem`) and the websocket broker (`broker`/`rtclite`);
//! only the service address differs.

use std::collections::BTreeMap;

use namedstream_core::endpoint::Outgoing;
use namedstream_core::wire::{JoinPayload, ServiceEvent};
use namedstream_core::{
    ConnId, Connector, ConnectorError, EndpointId, EndpointSession, Io, IoCmd, MessageKind,
    Role, SessionError, SessionEvent, SessionTable, SignalEnvelope, StreamRef, Topology,
    TrackDescriptor,
};

use crate::backoff::Backoff;

#[derive(Debug)]
struct Conn {
    label: String,
    ep: Option<EndpointId>,
}

#[derive(Debug)]
pub struct MeshClient {
    scheme: String,
    service: String,
    next_conn: ConnId,
    conns: BTreeMap<ConnId, Conn>,
    by_label: BTreeMap<String, ConnId>,
    eps: BTreeMap<EndpointId, String>,
    retry: BTreeMap<String, Backoff>,
    timers: BTreeMap<u64, String>,
    next_timer: u64,
}

impl MeshClient {
    pub fn new(scheme: impl Into<String>, service: impl Into<String>) -> Self {
        Self {
            scheme: scheme.into(),
            service: service.into(),
            next_conn: 0,
            conns: BTreeMap::new(),
            by_label: BTreeMap::new(),
            eps: BTreeMap::new(),
            retry: BTreeMap::new(),
            timers: BTreeMap::new(),
            next_timer: 0,
        }
    }

    pub fn service(&self) -> &str {
        &self.service
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

    fn ensure_conn(&mut self, sess: &EndpointSession, io: &mut Io) -> Option<ConnId> {
        match self.by_label.get(sess.label()) {
            Some(&c) => Some(c),
            None => {
                self.open(sess.label(), io);
                None
            }
        }
    }

    fn welcomed(&self, label: &str) -> Option<(ConnId, &EndpointId)> {
        let conn = *self.by_label.get(label)?;
        self.conns.get(&conn)?.ep.as_ref().map(|ep| (conn, ep))
    }

    fn join(&mut self, sess: &mut EndpointSession, io: &mut Io) {
        let (kind, tracks) = match sess.role() {
            Role::Publisher => (MessageKind::Publish, sess.tracks().to_vec()),
            Role::Subscriber => (MessageKind::Subscribe, Vec::new()),
            Role::Unset => return,
        };
        let join = JoinPayload {
            tracks,
            ping: sess.ping().map(str::to_string),
        };
        sess.signal(None, kind, serde_json::to_string(&join).expect("join serializes"));
        self.flush(sess, io);
    }

    fn on_welcome(&mut self, conn: ConnId, ep: EndpointId, sess: &mut EndpointSession, io: &mut Io) {
        let Some(c) = self.conns.get_mut(&conn) else {
            return;
        };
        c.ep = Some(ep.clone());
        if let Some(old) = sess.id().cloned() {
            if self.eps.remove(&old).is_some() {
                io.push(IoCmd::Unregister {
                    ns: self.service.clone(),
                    ep: old,
                });
            }
        }
        self.retry.remove(sess.label());
        sess.set_endpoint_id(ep.clone());
        self.eps.insert(ep.clone(), sess.label().to_string());
        io.push(IoCmd::Register {
            ns: self.service.clone(),
            ep,
            session: sess.label().to_string(),
        });
        self.join(sess, io);
    }

    fn schedule_retry(&mut self, sess: &mut EndpointSession, io: &mut Io) {
        let label = sess.label().to_string();
        let delay = self.retry.entry(label.clone()).or_default().next_delay();
        match delay {
            Some(d) => {
                self.next_timer += 1;
                self.timers.insert(self.next_timer, label);
                io.timer(d, self.next_timer);
            }
            None => {
                let attempts = self.retry.remove(&label).map(|b| b.attempts()).unwrap_or(0);
                sess.relay_event(SessionEvent::Error(SessionError::Transport(format!(
                    "{}: gave up after {attempts} reconnect attempts",
                    self.service
                ))));
                sess.reset();
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
                    ns: self.service.clone(),
                    ep: ep.clone(),
                });
            }
        }
        Some(c)
    }
}

impl Connector for MeshClient {
    fn scheme(&self) -> &str {
        &self.scheme
    }

    fn topology(&self) -> Topology {
        Topology::Mesh
    }

    fn publish(&mut self, sess: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError> {
        if self.ensure_conn(sess, io).is_some() && self.welcomed(sess.label()).is_some() {
            self.join(sess, io);
        }
        Ok(())
    }

    fn subscribe(&mut self, sess: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError> {
        self.publish(sess, io)
    }

    fn stop(&mut self, sess: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError> {
        if self.welcomed(sess.label()).is_some() {
            sess.signal(None, MessageKind::Stop, "");
            self.flush(sess, io);
        } else {
            sess.drain_outgoing();
        }
        self.retry.remove(sess.label());
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
                // not attached here: nothing can carry it
                sess.drain_outgoing();
            }
            return;
        };
        let ep = ep.clone();
        for out in sess.drain_outgoing() {
            match out {
                Outgoing::Data(d) => {
                    let Some(stream) = sess.stream().cloned() else {
                        continue;
                    };
                    let mut env = SignalEnvelope::new(stream, ep.clone(), d.kind, d.seq, d.payload);
                    env.to = d.to;
                    match env.encode() {
                        Ok(line) => io.send(conn, line),
                        Err(e) => sess.relay_event(SessionEvent::Error(SessionError::Payload(e.to_string()))),
                    }
                }
                Outgoing::Link { to, item, .. } => io.push(IoCmd::Peer {
                    ns: self.service.clone(),
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
        let env = match SignalEnvelope::decode_str(line) {
            Ok(env) => env,
            Err(e) => {
                sess.relay_event(SessionEvent::Error(SessionError::Payload(e.to_string())));
                return;
            }
        };
        if env.stream == StreamRef::Control && env.kind == MessageKind::Event {
            if let Ok(ServiceEvent::Welcome { endpoint }) = ServiceEvent::parse(&env.payload) {
                self.on_welcome(conn, endpoint, sess, io);
                return;
            }
        }
        if env.stream != StreamRef::Control && sess.stream() != Some(&env.stream) {
            // left over from an earlier stream
            return;
        }
        if let Err(e) = sess.apply_envelope(&env) {
            sess.relay_event(SessionEvent::Error(e));
        }
    }

    fn on_peer(
        &mut self,
        to: &EndpointId,
        from: &EndpointId,
        item: namedstream_core::endpoint::LinkItem,
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
        if sess.role() != Role::Unset {
            self.schedule_retry(sess, io);
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
