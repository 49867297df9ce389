//! One published source through several named streams at once. The parent
//! session is tapped; each child connector gets an inner publisher session
//! whose input is the parent's frames.

use std::collections::BTreeMap;

use namedstream_core::endpoint::{LinkItem, LinkState, Outgoing};
use namedstream_core::wire::PauseHint;
use namedstream_core::{
    ConnId, Connector, ConnectorError, EndpointId, EndpointSession, Io, IoCmd, MediaSource,
    MessageKind, Role, SessionError, SessionEvent, SessionTable, StreamName, Topology,
    TrackDescriptor,
};

/// Children are told apart in conn ids and timer tokens by the low bits.
const FANOUT: u64 = 16;

pub struct SplitChild {
    pub connector: Box<dyn Connector>,
    pub stream: StreamName,
}

pub struct SplitConnector {
    children: Vec<SplitChild>,
    inner: BTreeMap<String, EndpointSession>,
    labels: Vec<String>,
}

impl std::fmt::Debug for SplitConnector {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("SplitConnector")
            .field("streams", &self.children.iter().map(|c| c.stream.as_str()).collect::<Vec<_>>())
            .finish_non_exhaustive()
    }
}

impl SplitConnector {
    pub fn new(children: Vec<SplitChild>) -> Result<Self, ConnectorError> {
        if children.len() < 2 || children.len() as u64 > FANOUT {
            return Err(ConnectorError::Invalid(format!(
                "split needs 2 to {FANOUT} children, got {}",
                children.len()
            )));
        }
        Ok(Self {
            children,
            inner: BTreeMap::new(),
            labels: Vec::new(),
        })
    }

    /// Role each child's inner session currently holds, by stream.
    pub fn status(&self) -> Vec<(StreamName, Role)> {
        self.children
            .iter()
            .zip(&self.labels)
            .map(|(c, l)| (c.stream.clone(), self.inner.get(l).map_or(Role::Unset, |s| s.role())))
            .collect()
    }

    fn lift(i: usize, cio: Io, io: &mut Io) {
        let i = i as u64;
        let mut cio = cio;
        for cmd in cio.take() {
            io.push(match cmd {
                IoCmd::Open { conn, service } => IoCmd::Open {
                    conn: conn * FANOUT + i,
                    service,
                },
                IoCmd::Send { conn, line } => IoCmd::Send {
                    conn: conn * FANOUT + i,
                    line,
                },
                IoCmd::Close { conn } => IoCmd::Close {
                    conn: conn * FANOUT + i,
                },
                IoCmd::Timer { after_ms, token } => IoCmd::Timer {
                    after_ms,
                    token: token * FANOUT + i,
                },
                other => other,
            });
        }
    }

    fn partial(&self, detail: String) -> SessionError {
        SessionError::Connector(ConnectorError::Partial {
            failed: 1,
            total: self.children.len(),
            detail,
        })
    }

    fn each_child(
        &mut self,
        io: &mut Io,
        mut f: impl FnMut(&mut EndpointSession, &mut dyn Connector, &mut Io) -> Result<(), SessionError>,
    ) -> Vec<String> {
        let mut failures = Vec::new();
        for (i, child) in self.children.iter_mut().enumerate() {
            let Some(sess) = self.labels.get(i).and_then(|l| self.inner.get_mut(l)) else {
                continue;
            };
            if sess.role() != Role::Publisher {
                continue;
            }
            let mut cio = Io::new(io.now);
            if let Err(e) = f(sess, &mut *child.connector, &mut cio) {
                failures.push(format!("{}: {e}", child.stream));
            }
            Self::lift(i, cio, io);
        }
        failures
    }

    fn settle_failures(&self, parent: &mut EndpointSession, failures: Vec<String>) -> Result<(), ConnectorError> {
        if failures.is_empty() {
            return Ok(());
        }
        let err = ConnectorError::Partial {
            failed: failures.len(),
            total: self.children.len(),
            detail: failures.join("; "),
        };
        if failures.len() == self.children.len() {
            return Err(err);
        }
        parent.relay_event(SessionEvent::Error(SessionError::Connector(err)));
        Ok(())
    }
}

impl Connector for SplitConnector {
    fn scheme(&self) -> &str {
        "split"
    }

    fn topology(&self) -> Topology {
        if self.children.iter().all(|c| c.connector.topology() == Topology::Star) {
            Topology::Star
        } else {
            Topology::Mesh
        }
    }

    fn publish(&mut self, parent: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError> {
        parent.set_tap(true);
        self.inner.clear();
        self.labels.clear();
        let mut failures = Vec::new();
        for (i, child) in self.children.iter_mut().enumerate() {
            let label = format!("{}#split{i}", parent.label());
            let mut sess = EndpointSession::new(label.clone());
            sess.set_autopause(parent.flags().autopause);
            sess.set_ping(parent.ping().map(str::to_string));
            if let Err(e) = sess.set_secret(parent.secret()) {
                failures.push(format!("{}: {e}", child.stream));
                continue;
            }
            sess.set_now(parent.now());
            sess.set_input(MediaSource::input(parent.label(), parent.tracks().to_vec()))
                .expect("fresh session takes input");
            let mut cio = Io::new(io.now);
            if let Err(e) = sess.publish(child.stream.clone(), &mut *child.connector, &mut cio) {
                failures.push(format!("{}: {e}", child.stream));
            }
            Self::lift(i, cio, io);
            self.labels.push(label.clone());
            self.inner.insert(label, sess);
        }
        let res = self.settle_failures(parent, failures);
        if res.is_err() {
            parent.set_tap(false);
        }
        res
    }

    fn subscribe(&mut self, _: &mut EndpointSession, _: &mut Io) -> Result<(), ConnectorError> {
        Err(ConnectorError::Unsupported(
            "subscribers attach to one of the split's streams".into(),
        ))
    }

    fn stop(&mut self, parent: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError> {
        let failures = self.each_child(io, |s, c, cio| s.stop(c, cio));
        parent.set_tap(false);
        // keep the stopped inner sessions until the next publish so their
        // final outgoing items still get flushed
        self.settle_failures(parent, failures)
    }

    fn add_tracks(
        &mut self,
        parent: &mut EndpointSession,
        tracks: &[TrackDescriptor],
        io: &mut Io,
    ) -> Result<(), ConnectorError> {
        let failures = self.each_child(io, |s, c, cio| s.add_tracks(tracks, c, cio));
        self.settle_failures(parent, failures)
    }

    fn remove_tracks(
        &mut self,
        parent: &mut EndpointSession,
        tracks: &[TrackDescriptor],
        io: &mut Io,
    ) -> Result<(), ConnectorError> {
        let labels: Vec<String> = tracks.iter().map(|t| t.label.clone()).collect();
        let failures = self.each_child(io, |s, c, cio| s.remove_tracks(&labels, c, cio));
        self.settle_failures(parent, failures)
    }

    fn flush(&mut self, parent: &mut EndpointSession, io: &mut Io) {
        let now = parent.now();
        for out in parent.drain_outgoing() {
            let Outgoing::Local(item) = out else {
                continue;
            };
            for sess in self.inner.values_mut() {
                match &item {
                    LinkItem::Frame(f) => sess.push_input(f),
                    LinkItem::Channel(env) => match env.kind {
                        MessageKind::Text => {
                            let _ = sess.send(env.payload.clone());
                        }
                        MessageKind::PauseHint => {
                            sess.set_playing(PauseHint::parse(&env.payload) != Some(PauseHint::Pause));
                        }
                        _ => {}
                    },
                }
            }
        }
        for i in 0..self.children.len() {
            let Some(label) = self.labels.get(i).cloned() else {
                continue;
            };
            let Some(sess) = self.inner.get_mut(&label) else {
                continue;
            };
            sess.set_now(now);
            let mut cio = Io::new(io.now);
            self.children[i].connector.flush(sess, &mut cio);
            Self::lift(i, cio, io);
            let events = sess.drain_events();
            let stream = self.children[i].stream.clone();
            for ev in events {
                match ev {
                    SessionEvent::Message { .. } => parent.relay_event(ev),
                    SessionEvent::Error(e) => {
                        let err = self.partial(format!("{stream}: {e}"));
                        parent.relay_event(SessionEvent::Error(err));
                    }
                    _ => {}
                }
            }
        }
    }

    fn on_receive(&mut self, conn: ConnId, line: &str, _: &mut dyn SessionTable, io: &mut Io) {
        let i = (conn % FANOUT) as usize;
        let Some(child) = self.children.get_mut(i) else {
            return;
        };
        let mut cio = Io::new(io.now);
        child.connector.on_receive(conn / FANOUT, line, &mut self.inner, &mut cio);
        Self::lift(i, cio, io);
    }

    fn on_peer(
        &mut self,
        to: &EndpointId,
        from: &EndpointId,
        item: LinkItem,
        _: &mut dyn SessionTable,
        io: &mut Io,
    ) {
        for (i, child) in self.children.iter_mut().enumerate() {
            let mut cio = Io::new(io.now);
            child.connector.on_peer(to, from, item.clone(), &mut self.inner, &mut cio);
            Self::lift(i, cio, io);
        }
    }

    fn on_closed(&mut self, conn: ConnId, _: &mut dyn SessionTable, io: &mut Io) {
        let i = (conn % FANOUT) as usize;
        let Some(child) = self.children.get_mut(i) else {
            return;
        };
        let mut cio = Io::new(io.now);
        child.connector.on_closed(conn / FANOUT, &mut self.inner, &mut cio);
        Self::lift(i, cio, io);
    }

    fn on_timer(&mut self, token: u64, _: &mut dyn SessionTable, io: &mut Io) {
        let i = (token % FANOUT) as usize;
        let Some(child) = self.children.get_mut(i) else {
            return;
        };
        let mut cio = Io::new(io.now);
        child.connector.on_timer(token / FANOUT, &mut self.inner, &mut cio);
        Self::lift(i, cio, io);
    }

    fn transport_links(&self) -> Vec<(String, LinkState)> {
        self.children
            .iter()
            .flat_map(|c| c.connector.transport_links())
            .collect()
    }

    fn inner_sessions(&self) -> Vec<&EndpointSession> {
        self.inner.values().collect()
    }
}
