//! The contract between an endpoint session and a named-stream service.
//!
//! Connectors are sans-IO: every call receives an [`Io`] to which it appends
//! commands (open a connection, send a line, hand a link item to a peer,
//! arm a timer). A driver (the deterministic simulator or a real network
//! runtime) executes those commands and feeds results back through
//! [`Connector::on_receive`], [`Connector::on_peer`], [`Connector::on_closed`]
//! and [`Connector::on_timer`].

use std::collections::BTreeMap;

use thiserror::Error;

use crate::endpoint::{EndpointSession, LinkItem};
use crate::stream::{EndpointId, TrackDescriptor};

pub type ConnId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum IoCmd {
    /// Open a transport to the service at `service`.
    Open { conn: ConnId, service: String },
    Send { conn: ConnId, line: String },
    Close { conn: ConnId },
    /// Direct media-plane delivery to a peer endpoint in namespace `ns`.
    Peer {
        ns: String,
        from: EndpointId,
        to: EndpointId,
        item: LinkItem,
    },
    /// Make `ep` reachable for peer delivery; `session` is the owner label.
    Register {
        ns: String,
        ep: EndpointId,
        session: String,
    },
    Unregister { ns: String, ep: EndpointId },
    Timer { after_ms: u64, token: u64 },
}

#[derive(Debug, Default)]
pub struct Io {
    pub now: u64,
    cmds: Vec<IoCmd>,
}

impl Io {
    pub fn new(now: u64) -> Self {
        Self {
            now,
            cmds: Vec::new(),
        }
    }

    pub fn push(&mut self, cmd: IoCmd) {
        self.cmds.push(cmd);
    }

    pub fn open(&mut self, conn: ConnId, service: impl Into<String>) {
        self.push(IoCmd::Open {
            conn,
            service: service.into(),
        });
    }

    pub fn send(&mut self, conn: ConnId, line: impl Into<String>) {
        self.push(IoCmd::Send {
            conn,
            line: line.into(),
        });
    }

    pub fn close(&mut self, conn: ConnId) {
        self.push(IoCmd::Close { conn });
    }

    pub fn timer(&mut self, after_ms: u64, token: u64) {
        self.push(IoCmd::Timer { after_ms, token });
    }

    pub fn take(&mut self) -> Vec<IoCmd> {
        std::mem::take(&mut self.cmds)
    }

    pub fn is_empty(&self) -> bool {
        self.cmds.is_empty()
    }

    pub fn cmds(&self) -> &[IoCmd] {
        &self.cmds
    }
}

/// Access to the sessions a connector serves, by label.
pub trait SessionTable {
    fn session(&mut self, label: &str) -> Option<&mut EndpointSession>;
}

impl SessionTable for BTreeMap<String, EndpointSession> {
    fn session(&mut self, label: &str) -> Option<&mut EndpointSession> {
        self.get_mut(label)
    }
}

impl SessionTable for EndpointSession {
    fn session(&mut self, label: &str) -> Option<&mut EndpointSession> {
        (self.label() == label).then_some(self)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Topology {
    /// One peer link per publisher/subscriber pair.
    Mesh,
    /// One link per endpoint, to a forwarding server.
    Star,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ConnectorError {
    #[error("publisher conflict on `{0}`")]
    PublisherConflict(String),
    #[error("transport: {0}")]
    Transport(String),
    #[error("unsupported: {0}")]
    Unsupported(String),
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("{failed} of {total} children failed: {detail}")]
    Partial {
        failed: usize,
        total: usize,
        detail: String,
    },
}

/// The publish/subscribe/stop/addTracks/removeTracks contract.
pub trait Connector: Send {
    fn scheme(&self) -> &str;

    fn topology(&self) -> Topology;

    fn publish(&mut self, sess: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError>;

    fn subscribe(&mut self, sess: &mut EndpointSession, io: &mut Io)
        -> Result<(), ConnectorError>;

    fn stop(&mut self, sess: &mut EndpointSession, io: &mut Io) -> Result<(), ConnectorError>;

    fn add_tracks(
        &mut self,
        sess: &mut EndpointSession,
        tracks: &[TrackDescriptor],
        io: &mut Io,
    ) -> Result<(), ConnectorError>;

    fn remove_tracks(
        &mut self,
        sess: &mut EndpointSession,
        tracks: &[TrackDescriptor],
        io: &mut Io,
    ) -> Result<(), ConnectorError>;

    /// Carry whatever the session produced (signaling data, link items)
    /// towards the service or peers.
    fn flush(&mut self, sess: &mut EndpointSession, io: &mut Io);

    fn on_receive(
        &mut self,
        conn: ConnId,
        line: &str,
        sessions: &mut dyn SessionTable,
        io: &mut Io,
    );

    fn on_peer(
        &mut self,
        _to: &EndpointId,
        _from: &EndpointId,
        _item: LinkItem,
        _sessions: &mut dyn SessionTable,
        _io: &mut Io,
    ) {
    }

    fn on_closed(&mut self, conn: ConnId, sessions: &mut dyn SessionTable, io: &mut Io);

    fn on_timer(&mut self, _token: u64, _sessions: &mut dyn SessionTable, _io: &mut Io) {}

    /// Transport-level links the connector holds itself (star topology),
    /// as (link id, state).
    fn transport_links(&self) -> Vec<(String, crate::endpoint::LinkState)> {
        Vec::new()
    }

    /// Labels of sessions this connector carries that were created by the
    /// connector itself (split children). Empty for most connectors.
    fn inner_sessions(&self) -> Vec<&EndpointSession> {
        Vec::new()
    }
}

/// No service at all: the application wires `data` events to `apply` on the
/// other session by hand, as in a point-to-point setup.
#[derive(Debug, Default)]
pub struct Direct;

impl Connector for Direct {
    fn scheme(&self) -> &str {
        "direct"
    }

    fn topology(&self) -> Topology {
        Topology::Mesh
    }

    fn publish(&mut self, _: &mut EndpointSession, _: &mut Io) -> Result<(), ConnectorError> {
        Ok(())
    }

    fn subscribe(&mut self, _: &mut EndpointSession, _: &mut Io) -> Result<(), ConnectorError> {
        Ok(())
    }

    fn stop(&mut self, _: &mut EndpointSession, _: &mut Io) -> Result<(), ConnectorError> {
        Ok(())
    }

    fn add_tracks(
        &mut self,
        sess: &mut EndpointSession,
        tracks: &[TrackDescriptor],
        _: &mut Io,
    ) -> Result<(), ConnectorError> {
        sess.announce_tracks(crate::wire::MessageKind::TracksAdded, tracks);
        Ok(())
    }

    fn remove_tracks(
        &mut self,
        sess: &mut EndpointSession,
        tracks: &[TrackDescriptor],
        _: &mut Io,
    ) -> Result<(), ConnectorError> {
        sess.announce_tracks(crate::wire::MessageKind::TracksRemoved, tracks);
        Ok(())
    }

    fn flush(&mut self, _: &mut EndpointSession, _: &mut Io) {}

    fn on_receive(&mut self, _: ConnId, _: &str, _: &mut dyn SessionTable, _: &mut Io) {}

    fn on_closed(&mut self, _: ConnId, _: &mut dyn SessionTable, _: &mut Io) {}
}
