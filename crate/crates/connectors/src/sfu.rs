//! Star topology through the simulated forwarding server. A host opens one
//! connection and negotiates one link with the server; every session on
//! the host rides on it. Frames and channel messages travel over the
//! connection as lines and the server fans them out per stream.

use std::collections::{BTreeMap, BTreeSet};

use namedstream_core::endpoint::{LinkItem, LinkState, Outgoing};
use namedstream_core::wire::{JoinPayload, LinkSignal, ServiceEvent};
use namedstream_core::{
    ConnId, Connector, ConnectorError, EndpointId, EndpointSession, Io, MediaFrame, MessageKind,
    Role, SessionError, SessionEvent, SessionTable, SignalEnvelope, StreamRef, Topology,
    TrackDescriptor,
};

use crate::backoff::Backoff;

/// `from` of envelopes the server originates.
pub const SFU_ID: &str = "sfu";

#[derive(Debug)]
pub struct SfuClient {
    service: String,
    next_conn: ConnId,
    conn: Option<ConnId>,
    ep: Option<EndpointId>,
    offered: bool,
    up: bool,
    members: BTreeSet<String>,
    /// Outbound seqs on this connection, per stream reference. Sessions
    /// sharing the connection each count their own seqs; the server wants
    /// one strictly increasing sequence per (endpoint, stream).
    seqs: BTreeMap<String, u64>,
    retry: Backoff,
    timer: Option<u64>,
    next_timer: u64,
}

impl SfuClient {
    pub fn new(service: impl Into<String>) -> Self {
        Self {
            service: service.into(),
            next_conn: 0,
            conn: None,
            ep: None,
            offered: false,
            up: false,
            members: BTreeSet::new(),
            seqs: BTreeMap::new(),
            retry: Backoff::default(),
            timer: None,
            next_timer: 0,
        }
    }

    fn sfu_id() -> EndpointId {
        EndpointId::new(SFU_ID).expect("non-empty")
    }

    pub fn link_id(&self) -> Option<String> {
        self.ep.as_ref().map(|ep| format!("sfu:{ep}"))
    }

    fn next_seq(&mut self, stream: &StreamRef) -> u64 {
        let s = self.seqs.entry(stream.as_str().to_string()).or_insert(0);
        *s += 1;
        *s
    }

    fn open(&mut self, io: &mut Io) {
        self.next_conn += 1;
        self.conn = Some(self.next_conn);
        io.open(self.next_conn, self.service.clone());
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
        let (Some(link), Some(stream)) = (self.link_id(), sess.stream().cloned()) else {
            return;
        };
        let live = sess.role() == Role::Publisher || sess.publisher_live();
        sess.attach_shared_link(&link, Self::sfu_id(), stream.clone(), self.up && live);
        if !self.offered {
            self.offered = true;
            let offer = LinkSignal {
                link,
                desc: serde_json::json!({}),
            };
            self.send_env(
                stream,
                Some(Self::sfu_id()),
                MessageKind::Offer,
                serde_json::to_string(&offer).expect("link signal serializes"),
                io,
            );
        }
    }

    fn send_env(&mut self, stream: StreamRef, to: Option<EndpointId>, kind: MessageKind, payload: String, io: &mut Io) {
        let (Some(conn), Some(ep)) = (self.conn, self.ep.clone()) else {
            return;
        };
        let seq = self.next_seq(&stream);
        let mut env = SignalEnvelope::new(stream, ep, kind, seq, payload);
        env.to = to;
        if let Ok(line) = env.encode() {
            io.send(conn, line);
        }
    }

    /// The member session an inbound item on `stream` is meant for.
    fn member_for(
        &self,
        stream: &StreamRef,
        want: Option<Role>,
        sessions: &mut dyn SessionTable,
    ) -> Option<String> {
        self.members
            .iter()
            .find(|l| {
                sessions
                    .session(l)
                    .is_some_and(|s| s.stream() == Some(stream) && want.is_none_or(|r| s.role() == r))
            })
            .cloned()
    }

    fn on_answer(&mut self, env: &SignalEnvelope, sessions: &mut dyn SessionTable) {
        let Ok(sig) = LinkSignal::parse(&env.payload) else {
            return;
        };
        if Some(&sig.link) != self.link_id().as_ref() {
            return;
        }
        self.up = true;
        for label in &self.members {
            if let Some(s) = sessions.session(label) {
                if s.role() == Role::Publisher || s.publisher_live() {
                    s.mark_shared_connected(&sig.link);
                }
            }
        }
    }

    fn apply(&mut self, env: &SignalEnvelope, sessions: &mut dyn SessionTable) {
        let link = self.link_id();
        let up = self.up;
        let Some(sess) = self
            .member_for(&env.stream, None, sessions)
            .and_then(|l| sessions.session(&l))
        else {
            return;
        };
        if let Err(e) = sess.apply_envelope(env) {
            sess.relay_event(SessionEvent::Error(e));
            return;
        }
        if env.kind != MessageKind::Event || sess.role() != Role::Subscriber {
            return;
        }
        match ServiceEvent::parse(&env.payload) {
            Ok(ServiceEvent::PublisherLive { .. }) => {
                if let (Some(link), Some(stream)) = (link, sess.stream().cloned()) {
                    sess.attach_shared_link(&link, Self::sfu_id(), stream, up);
                }
            }
            Ok(ServiceEvent::PeerGone { .. }) => sess.close_links_with(&Self::sfu_id()),
            _ => {}
        }
    }

    fn lost(&mut self, sessions: &mut dyn SessionTable, io: &mut Io) {
        let was_up = self.ep.is_some();
        self.conn = None;
        self.ep = None;
        self.offered = false;
        self.up = false;
        self.seqs.clear();
        let members: Vec<String> = self.members.iter().cloned().collect();
        for label in members.iter().filter(|_| was_up) {
            if let Some(s) = sessions.session(label) {
                s.on_transport_lost(&format!("{} closed", self.service));
            }
        }
        if members.is_empty() {
            return;
        }
        match self.retry.next_delay() {
            Some(d) => {
                self.next_timer += 1;
                self.timer = Some(self.next_timer);
                io.timer(d, self.next_timer);
            }
            None => {
                let attempts = self.retry.attempts();
                self.retry.reset();
                for label in members {
                    if let Some(s) = sessions.session(&label) {
                        s.relay_event(SessionEvent::Error(SessionError::Transport(format!(
                            "{}: gave up after {attempts} reconnect attempts",
                            self.service
                        ))));
                        s.reset();
                    }
                }
                self.members.clear();
            }
        }
    }
}

impl Connector for SfuClient {
    fn scheme(&self) -> &str {
        "sfu"
    }

    fn topology(&self) -> Topology {
        Topology::Star
    }

    fn publish(&mut self, sess: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError> {
        self.members.insert(sess.label().to_string());
        match (self.conn, &self.ep) {
            (None, _) => self.open(io),
            (Some(_), Some(_)) => self.join(sess, io),
            (Some(_), None) => {}
        }
        Ok(())
    }

    fn subscribe(&mut self, sess: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError> {
        self.publish(sess, io)
    }

    fn stop(&mut self, sess: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError> {
        if self.ep.is_some() {
            sess.signal(None, MessageKind::Stop, "");
            self.flush(sess, io);
        } else {
            sess.drain_outgoing();
        }
        self.members.remove(sess.label());
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
        let Some(conn) = self.conn else {
            if !self.members.contains(sess.label()) {
                sess.drain_outgoing();
            }
            return;
        };
        let Some(ep) = self.ep.clone() else {
            return;
        };
        let role = sess.role();
        for out in sess.drain_outgoing() {
            match out {
                Outgoing::Data(d) => {
                    if let Some(stream) = sess.stream().cloned() {
                        self.send_env(stream, d.to, d.kind, d.payload, io);
                    }
                }
                Outgoing::Link {
                    item: LinkItem::Frame(f),
                    ..
                } => io.send(conn, f.to_line()),
                Outgoing::Link {
                    item: LinkItem::Channel(mut env),
                    ..
                } => {
                    env.from = ep.clone();
                    env.seq = self.next_seq(&env.stream);
                    if role == Role::Subscriber {
                        // the server routes subscriber text to the publisher
                        env.to = None;
                    }
                    if let Ok(line) = env.encode() {
                        io.send(conn, line);
                    }
                }
                Outgoing::Local(_) => {}
            }
        }
    }

    fn on_receive(&mut self, conn: ConnId, line: &str, sessions: &mut dyn SessionTable, io: &mut Io) {
        if self.conn != Some(conn) {
            return;
        }
        if MediaFrame::is_frame_line(line) {
            let Some(frame) = MediaFrame::from_line(line) else {
                return;
            };
            let stream = frame.stream.clone();
            let label = self.member_for(&stream, Some(Role::Subscriber), sessions);
            if let Some(sess) = label.and_then(|l| sessions.session(&l)) {
                if let Err(e) = sess.on_link_item(&Self::sfu_id(), LinkItem::Frame(frame)) {
                    sess.relay_event(SessionEvent::Error(e));
                }
            }
            return;
        }
        let Ok(env) = SignalEnvelope::decode_str(line) else {
            return;
        };
        if env.stream == StreamRef::Control {
            if let Ok(ServiceEvent::Welcome { endpoint }) = ServiceEvent::parse(&env.payload) {
                self.ep = Some(endpoint.clone());
                self.retry.reset();
                let members: Vec<String> = self.members.iter().cloned().collect();
                for label in members {
                    if let Some(s) = sessions.session(&label) {
                        s.set_endpoint_id(endpoint.clone());
                        self.join(s, io);
                    }
                }
            }
            return;
        }
        match env.kind {
            MessageKind::Answer if env.from.as_str() == SFU_ID => self.on_answer(&env, sessions),
            MessageKind::Text | MessageKind::PauseHint => {
                // hints only flow downstream; text reaching a host that
                // publishes the stream came from one of its subscribers
                let label = match env.kind {
                    MessageKind::PauseHint => self.member_for(&env.stream, Some(Role::Subscriber), sessions),
                    _ => self
                        .member_for(&env.stream, Some(Role::Publisher), sessions)
                        .or_else(|| self.member_for(&env.stream, Some(Role::Subscriber), sessions)),
                };
                if let Some(sess) = label.and_then(|l| sessions.session(&l)) {
                    if let Err(e) = sess.on_link_item(&Self::sfu_id(), LinkItem::Channel(env)) {
                        sess.relay_event(SessionEvent::Error(e));
                    }
                }
            }
            _ => self.apply(&env, sessions),
        }
    }

    fn on_closed(&mut self, conn: ConnId, sessions: &mut dyn SessionTable, io: &mut Io) {
        if self.conn == Some(conn) {
            self.lost(sessions, io);
        }
    }

    fn on_timer(&mut self, token: u64, sessions: &mut dyn SessionTable, io: &mut Io) {
        if self.timer != Some(token) {
            return;
        }
        self.timer = None;
        self.members.retain(|l| sessions.session(l).is_some_and(|s| s.role() != Role::Unset));
        if self.conn.is_none() && !self.members.is_empty() {
            self.open(io);
        }
    }

    fn transport_links(&self) -> Vec<(String, LinkState)> {
        let state = if self.up {
            LinkState::Connected
        } else if self.offered {
            LinkState::OfferSent
        } else {
            LinkState::New
        };
        self.link_id().map(|l| vec![(l, state)]).unwrap_or_default()
    }
}
