//! The endpoint engine: one session publishes or subscribes one named
//! stream, owns its peer links, and runs the simulated media plane.
//!
//! Sessions are sans-IO. Whatever a session wants sent goes into its
//! outgoing queue ([`Outgoing`]), drained by the attached connector;
//! application-visible happenings go into the event queue
//! ([`SessionEvent`]). The `data`/`apply` pair mirrors the signaling side:
//! every [`Outgoing::Data`] produced by one session can be handed to
//! [`EndpointSession::apply`] on its counterpart.

mod link;
mod media;
mod seal;

use std::collections::{BTreeMap, HashMap, VecDeque};

use serde::Serialize;
use thiserror::Error;

pub use link::{LinkItem, LinkState, PeerLink};
pub use media::{
    payload_digest, FrameMeta, MediaFrame, MediaSink, MediaSource, RawFrame, SourceKind,
    FRAME_BYTES, FRAME_INTERVAL_MS, SINK_BUFFER,
};
pub use seal::{open_frame, seal_frame, FrameKey, SealError};

use crate::connector::{Connector, ConnectorError, Io};
use crate::stream::{
    drop_tracks, hash_name, merge_tracks, EndpointId, StreamError, StreamName, StreamRef,
    TrackDescriptor, TrackKind,
};
use crate::wire::{
    ErrorCode, ErrorPayload, LinkSignal, MessageKind, PauseHint, ServiceEvent, SignalEnvelope,
    TracksPayload,
};

/// Texts queued while no link is connected.
pub const SEND_QUEUE_LIMIT: usize = 256;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "lowercase")]
pub enum Role {
    Unset,
    Publisher,
    Subscriber,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Flags {
    pub autopause: bool,
    pub channel: bool,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SessionError {
    #[error("operation needs role {needed}, session is {actual:?}")]
    Role { needed: &'static str, actual: Role },
    #[error("no local media to publish")]
    NoInput,
    #[error("unknown link `{0}`")]
    LinkUnknown(String),
    #[error("link `{link}` cannot go from {from} to {to}")]
    State {
        link: String,
        from: LinkState,
        to: LinkState,
    },
    #[error("stream `{0}` already has a publisher")]
    PublisherConflict(String),
    #[error("unknown stream `{0}`")]
    StreamUnknown(String),
    #[error(transparent)]
    Stream(#[from] StreamError),
    #[error("frame {track}#{seq} failed integrity check")]
    Integrity { track: String, seq: u64 },
    #[error("service error {code:?}: {message}")]
    Service { code: ErrorCode, message: String },
    #[error("bad payload: {0}")]
    Payload(String),
    #[error(transparent)]
    Connector(#[from] ConnectorError),
    #[error("transport lost: {0}")]
    Transport(String),
}

/// Signaling produced by a session: the content of its `data` event.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct DataEvent {
    pub to: Option<EndpointId>,
    pub kind: MessageKind,
    pub seq: u64,
    pub payload: String,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Outgoing {
    Data(DataEvent),
    Link {
        link_id: String,
        to: EndpointId,
        item: LinkItem,
    },
    /// Copy of everything the session would put on its links, produced only
    /// while tapped (see [`EndpointSession::set_tap`]). Frames are clear.
    Local(LinkItem),
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SessionEvent {
    PropertyChange {
        property: &'static str,
        old: String,
        new: String,
    },
    Message {
        from: EndpointId,
        text: String,
    },
    /// The subscriber's view of the remote stream's tracks changed.
    RemoteTracks(Vec<TrackDescriptor>),
    LinkConnected {
        link: String,
        counterpart: EndpointId,
    },
    LinkClosed {
        link: String,
        counterpart: EndpointId,
    },
    PublisherLive {
        endpoint: EndpointId,
    },
    PeerGone {
        endpoint: EndpointId,
    },
    Hint(PauseHint),
    /// Local preview (publisher) or a rendered frame (subscriber).
    Media(MediaFrame),
    Error(SessionError),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Applied {
    Done,
    Duplicate,
}

#[derive(Debug, Clone, Default, Serialize)]
pub struct SessionStats {
    /// Frames produced by this session's source (or relayed input), per track.
    pub frames_emitted: BTreeMap<String, u64>,
    /// Frame copies put on links, per track.
    pub frames_sent: BTreeMap<String, u64>,
    pub frames_delivered: BTreeMap<String, u64>,
    pub frames_dropped: BTreeMap<String, u64>,
    pub integrity_errors: u64,
    pub duplicates: u64,
    pub texts_dropped: u64,
}

fn bump(map: &mut BTreeMap<String, u64>, key: &str) {
    *map.entry(key.to_string()).or_default() += 1;
}

pub struct EndpointSession {
    label: String,
    id: Option<EndpointId>,
    role: Role,
    stream: Option<StreamRef>,
    links: Vec<PeerLink>,
    local_media: Option<MediaSource>,
    remote_media: MediaSink,
    flags: Flags,
    secret: Option<(String, FrameKey)>,
    ping: Option<String>,
    tap: bool,
    playing: bool,
    muted: bool,
    tracks: Vec<TrackDescriptor>,
    remote_tracks: Vec<TrackDescriptor>,
    publisher_live: bool,
    now: u64,
    next_seq: u64,
    link_counter: u64,
    frame_seq: BTreeMap<String, u64>,
    seen_signal: HashMap<EndpointId, u64>,
    seen_channel: HashMap<EndpointId, u64>,
    seen_frames: HashMap<(EndpointId, String), u64>,
    pending_text: VecDeque<String>,
    outgoing: VecDeque<Outgoing>,
    events: VecDeque<SessionEvent>,
    stats: SessionStats,
}

impl std::fmt::Debug for EndpointSession {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("EndpointSession")
            .field("label", &self.label)
            .field("id", &self.id)
            .field("role", &self.role)
            .field("stream", &self.stream)
            .field("links", &self.links)
            .finish_non_exhaustive()
    }
}

impl EndpointSession {
    pub fn new(label: impl Into<String>) -> Self {
        Self {
            label: label.into(),
            id: None,
            role: Role::Unset,
            stream: None,
            links: Vec::new(),
            local_media: None,
            remote_media: MediaSink::default(),
            flags: Flags::default(),
            secret: None,
            ping: None,
            tap: false,
            playing: true,
            muted: false,
            tracks: Vec::new(),
            remote_tracks: Vec::new(),
            publisher_live: false,
            now: 0,
            next_seq: 1,
            link_counter: 0,
            frame_seq: BTreeMap::new(),
            seen_signal: HashMap::new(),
            seen_channel: HashMap::new(),
            seen_frames: HashMap::new(),
            pending_text: VecDeque::new(),
            outgoing: VecDeque::new(),
            events: VecDeque::new(),
            stats: SessionStats::default(),
        }
    }

    pub fn label(&self) -> &str {
        &self.label
    }

    pub fn id(&self) -> Option<&EndpointId> {
        self.id.as_ref()
    }

    pub fn role(&self) -> Role {
        self.role
    }

    pub fn stream(&self) -> Option<&StreamRef> {
        self.stream.as_ref()
    }

    pub fn stream_name(&self) -> Option<&StreamName> {
        self.stream.as_ref().and_then(StreamRef::raw)
    }

    pub fn links(&self) -> &[PeerLink] {
        &self.links
    }

    pub fn connected_links(&self) -> impl Iterator<Item = &PeerLink> {
        self.links.iter().filter(|l| l.is_connected())
    }

    pub fn local_media(&self) -> Option<&MediaSource> {
        self.local_media.as_ref()
    }

    pub fn remote_media(&self) -> &MediaSink {
        &self.remote_media
    }

    pub fn flags(&self) -> &Flags {
        &self.flags
    }

    pub fn playing(&self) -> bool {
        self.playing
    }

    pub fn muted(&self) -> bool {
        self.muted
    }

    /// Advertised tracks (publisher).
    pub fn tracks(&self) -> &[TrackDescriptor] {
        &self.tracks
    }

    pub fn remote_tracks(&self) -> &[TrackDescriptor] {
        &self.remote_tracks
    }

    pub fn publisher_live(&self) -> bool {
        self.publisher_live
    }

    pub fn has_secret(&self) -> bool {
        self.secret.is_some()
    }

    pub fn secret(&self) -> Option<&str> {
        self.secret.as_ref().map(|(s, _)| s.as_str())
    }

    /// Space-separated webhook URLs sent along with publish/subscribe.
    pub fn ping(&self) -> Option<&str> {
        self.ping.as_deref()
    }

    pub fn set_ping(&mut self, urls: Option<String>) {
        self.ping = urls.filter(|u| !u.trim().is_empty());
    }

    /// Composite connectors republish a session's media elsewhere; a tapped
    /// session mirrors its link traffic into [`Outgoing::Local`].
    pub fn set_tap(&mut self, on: bool) {
        self.tap = on;
    }

    pub fn tapped(&self) -> bool {
        self.tap
    }

    /// Lets a composite connector surface what its inner sessions saw.
    pub fn relay_event(&mut self, ev: SessionEvent) {
        self.events.push_back(ev);
    }

    pub fn stats(&self) -> &SessionStats {
        &self.stats
    }

    pub fn pending_text(&self) -> usize {
        self.pending_text.len()
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn set_now(&mut self, now: u64) {
        self.now = self.now.max(now);
    }

    pub fn set_autopause(&mut self, on: bool) {
        if self.flags.autopause != on {
            self.changed("autopause", self.flags.autopause, on);
            self.flags.autopause = on;
        }
    }

    pub fn set_secret(&mut self, secret: Option<&str>) -> Result<(), SealError> {
        self.secret = match secret {
            Some(s) => Some((s.to_string(), FrameKey::derive(s)?)),
            None => None,
        };
        Ok(())
    }

    /// Assigned by the service on connect. Resets per-sender duplicate
    /// tracking, since a new identity means a new conversation.
    pub fn set_endpoint_id(&mut self, id: EndpointId) {
        if self.id.as_ref() != Some(&id) {
            let old = self.id.as_ref().map(|i| i.to_string()).unwrap_or_default();
            self.changed("id", old, id.to_string());
            self.id = Some(id);
        }
        self.seen_signal.clear();
        self.seen_channel.clear();
    }

    pub fn drain_outgoing(&mut self) -> Vec<Outgoing> {
        self.outgoing.drain(..).collect()
    }

    pub fn drain_events(&mut self) -> Vec<SessionEvent> {
        self.events.drain(..).collect()
    }

    pub fn has_outgoing(&self) -> bool {
        !self.outgoing.is_empty()
    }

    fn changed(&mut self, property: &'static str, old: impl ToString, new: impl ToString) {
        self.events.push_back(SessionEvent::PropertyChange {
            property,
            old: old.to_string(),
            new: new.to_string(),
        });
    }

    fn set_role(&mut self, role: Role) {
        if self.role != role {
            self.changed("role", format!("{:?}", self.role), format!("{role:?}"));
            self.role = role;
        }
    }

    fn need(&self, role: Role, needed: &'static str) -> Result<(), SessionError> {
        if self.role == role {
            Ok(())
        } else {
            Err(SessionError::Role {
                needed,
                actual: self.role,
            })
        }
    }

    fn error(&mut self, err: SessionError) {
        self.events.push_back(SessionEvent::Error(err));
    }

    /// Queues signaling for the connector; returns its seq.
    pub fn signal(
        &mut self,
        to: Option<EndpointId>,
        kind: MessageKind,
        payload: impl Into<String>,
    ) -> u64 {
        let seq = self.take_seq();
        self.outgoing.push_back(Outgoing::Data(DataEvent {
            to,
            kind,
            seq,
            payload: payload.into(),
        }));
        seq
    }

    fn take_seq(&mut self) -> u64 {
        let seq = self.next_seq;
        self.next_seq += 1;
        seq
    }

    /// TRACKS_ADDED / TRACKS_REMOVED towards all subscribers.
    pub fn announce_tracks(&mut self, kind: MessageKind, tracks: &[TrackDescriptor]) {
        let payload = serde_json::to_string(&TracksPayload {
            tracks: tracks.to_vec(),
        })
        .expect("tracks serialize");
        self.signal(None, kind, payload);
    }

    /// Replaces the media source. A session subscribing cannot take input.
    pub fn set_input(&mut self, source: MediaSource) -> Result<(), SessionError> {
        if self.role == Role::Subscriber {
            return Err(SessionError::Role {
                needed: "unset or publisher",
                actual: self.role,
            });
        }
        if self.role == Role::Unset {
            self.tracks = source.tracks().to_vec();
        }
        self.local_media = Some(source);
        Ok(())
    }

    pub fn publish(
        &mut self,
        stream: StreamName,
        conn: &mut dyn Connector,
        io: &mut Io,
    ) -> Result<(), SessionError> {
        self.need(Role::Unset, "unset")?;
        let source = self.local_media.as_ref().ok_or(SessionError::NoInput)?;
        self.tracks = source.tracks().to_vec();
        self.stream = Some(StreamRef::Raw(stream));
        self.set_role(Role::Publisher);
        if let Err(e) = conn.publish(self, io) {
            self.reset();
            return Err(e.into());
        }
        Ok(())
    }

    pub fn subscribe(
        &mut self,
        stream: StreamRef,
        conn: &mut dyn Connector,
        io: &mut Io,
    ) -> Result<(), SessionError> {
        self.need(Role::Unset, "unset")?;
        if stream == StreamRef::Control {
            return Err(SessionError::StreamUnknown(stream.to_string()));
        }
        self.stream = Some(stream);
        self.set_role(Role::Subscriber);
        if let Err(e) = conn.subscribe(self, io) {
            self.reset();
            return Err(e.into());
        }
        Ok(())
    }

    pub fn stop(&mut self, conn: &mut dyn Connector, io: &mut Io) -> Result<(), SessionError> {
        if self.role == Role::Unset {
            return Ok(());
        }
        let res = conn.stop(self, io);
        self.reset();
        res.map_err(Into::into)
    }

    /// Back to unset: links closed, stream forgotten.
    pub fn reset(&mut self) {
        self.close_all_links();
        self.links.clear();
        if self.role == Role::Publisher {
            if let Some(src) = &self.local_media {
                self.tracks = src.tracks().to_vec();
            }
        }
        if !self.remote_tracks.is_empty() {
            self.remote_tracks.clear();
            self.events.push_back(SessionEvent::RemoteTracks(Vec::new()));
        }
        self.publisher_live = false;
        self.stream = None;
        self.set_role(Role::Unset);
    }

    pub fn add_tracks(
        &mut self,
        tracks: &[TrackDescriptor],
        conn: &mut dyn Connector,
        io: &mut Io,
    ) -> Result<(), SessionError> {
        self.need(Role::Publisher, "publisher")?;
        merge_tracks(&mut self.tracks, tracks)?;
        if let Some(src) = &mut self.local_media {
            if !matches!(src.kind(), SourceKind::Input { .. }) {
                src.add_tracks(tracks);
            }
        }
        conn.add_tracks(self, tracks, io)?;
        Ok(())
    }

    pub fn remove_tracks(
        &mut self,
        labels: &[String],
        conn: &mut dyn Connector,
        io: &mut Io,
    ) -> Result<(), SessionError> {
        self.need(Role::Publisher, "publisher")?;
        let removed: Vec<TrackDescriptor> = self
            .tracks
            .iter()
            .filter(|t| labels.contains(&t.label))
            .cloned()
            .collect();
        drop_tracks(&mut self.tracks, labels)?;
        if let Some(src) = &mut self.local_media {
            src.remove_tracks(labels);
        }
        conn.remove_tracks(self, &removed, io)?;
        Ok(())
    }

    pub fn set_muted(&mut self, muted: bool) {
        if self.muted != muted {
            self.changed("muted", self.muted, muted);
            self.muted = muted;
        }
    }

    /// Pause or resume. A publisher with autopause tells its subscribers
    /// first, in-band, so the hint precedes the gap in every transcript.
    pub fn set_playing(&mut self, playing: bool) {
        if self.playing == playing {
            return;
        }
        let hint = if playing {
            PauseHint::Play
        } else {
            PauseHint::Pause
        };
        if self.role == Role::Publisher && self.flags.autopause {
            self.channel_all(MessageKind::PauseHint, hint.as_str());
        }
        if playing {
            if let Some(src) = &mut self.local_media {
                src.resync();
            }
        }
        self.changed("playing", self.playing, playing);
        self.playing = playing;
    }

    /// Text to the other side: publisher to every subscriber, subscriber to
    /// its publisher. Held back until a link connects.
    pub fn send(&mut self, text: impl Into<String>) -> Result<(), SessionError> {
        if self.role == Role::Unset {
            return Err(SessionError::Role {
                needed: "publisher or subscriber",
                actual: self.role,
            });
        }
        if !self.flags.channel {
            self.changed("channel", false, true);
            self.flags.channel = true;
        }
        let text = text.into();
        if self.tap || self.connected_links().next().is_some() {
            self.channel_all(MessageKind::Text, &text);
        } else {
            if self.pending_text.len() == SEND_QUEUE_LIMIT {
                self.pending_text.pop_front();
                self.stats.texts_dropped += 1;
            }
            self.pending_text.push_back(text);
        }
        Ok(())
    }

    fn channel_all(&mut self, kind: MessageKind, payload: &str) {
        let targets: Vec<(String, EndpointId, StreamRef)> = self
            .connected_links()
            .map(|l| (l.link_id.clone(), l.counterpart.clone(), l.stream_ref.clone()))
            .collect();
        if targets.is_empty() && !self.tap {
            return;
        }
        let from = match &self.id {
            Some(id) => id.clone(),
            None => EndpointId::new(self.label.clone()).unwrap_or_else(|| EndpointId::new("local").unwrap()),
        };
        let seq = self.take_seq();
        if self.tap {
            let stream = self.stream.clone().unwrap_or(StreamRef::Control);
            if stream != StreamRef::Control {
                let env = SignalEnvelope::new(stream, from.clone(), kind, seq, payload);
                self.outgoing.push_back(Outgoing::Local(LinkItem::Channel(env)));
            }
        }
        for (link_id, to, stream) in targets {
            let mut env = SignalEnvelope::new(stream, from.clone(), kind, seq, payload);
            if kind == MessageKind::Text && self.role == Role::Subscriber {
                env.to = Some(to.clone());
            }
            self.outgoing.push_back(Outgoing::Link {
                link_id,
                to,
                item: LinkItem::Channel(env),
            });
        }
    }

    fn flush_pending_text(&mut self) {
        while let Some(text) = self.pending_text.pop_front() {
            self.channel_all(MessageKind::Text, &text);
        }
    }

    // -- peer links ---------------------------------------------------------

    /// Creates a link to `counterpart`. The publisher side offers right away.
    /// An open link to the same counterpart is reused.
    pub fn create_peer_link(
        &mut self,
        counterpart: EndpointId,
        stream_ref: StreamRef,
    ) -> Result<String, SessionError> {
        if let Some(l) = self
            .links
            .iter()
            .find(|l| l.counterpart == counterpart && l.is_open())
        {
            return Ok(l.link_id.clone());
        }
        self.link_counter += 1;
        let owner = self
            .id
            .as_ref()
            .map(|i| i.to_string())
            .unwrap_or_else(|| self.label.clone());
        let link_id = format!("{owner}#{}", self.link_counter);
        let mut link = PeerLink::new(link_id.clone(), counterpart.clone(), stream_ref);
        if self.role == Role::Publisher {
            link.negotiated_tracks = self.tracks.clone();
            link.advance(LinkState::OfferSent).expect("new link can offer");
            let payload = LinkSignal {
                link: link_id.clone(),
                desc: serde_json::json!({ "tracks": self.tracks }),
            };
            self.links.push(link);
            self.signal(
                Some(counterpart),
                MessageKind::Offer,
                serde_json::to_string(&payload).expect("link signal serializes"),
            );
        } else {
            self.links.push(link);
        }
        Ok(link_id)
    }

    /// Registers a link negotiated by the connector on the session's behalf.
    pub fn attach_shared_link(
        &mut self,
        link_id: &str,
        counterpart: EndpointId,
        stream_ref: StreamRef,
        connected: bool,
    ) {
        if let Some(l) = self.links.iter_mut().find(|l| l.link_id == link_id) {
            l.stream_ref = stream_ref;
            if l.state == LinkState::Closed {
                l.state = LinkState::New;
            }
        } else {
            let mut l = PeerLink::new(link_id.to_string(), counterpart, stream_ref);
            l.shared = true;
            l.negotiated_tracks = if self.role == Role::Publisher {
                self.tracks.clone()
            } else {
                self.remote_tracks.clone()
            };
            self.links.push(l);
        }
        if connected {
            self.mark_shared_connected(link_id);
        }
    }

    pub fn mark_shared_connected(&mut self, link_id: &str) {
        let Some(l) = self.links.iter_mut().find(|l| l.link_id == link_id) else {
            return;
        };
        if l.state == LinkState::Connected {
            return;
        }
        l.state = LinkState::Connected;
        let ev = SessionEvent::LinkConnected {
            link: l.link_id.clone(),
            counterpart: l.counterpart.clone(),
        };
        self.events.push_back(ev);
        self.flush_pending_text();
    }

    fn close_link_at(&mut self, idx: usize) {
        let l = &mut self.links[idx];
        if l.state == LinkState::Closed {
            return;
        }
        l.state = LinkState::Closed;
        let ev = SessionEvent::LinkClosed {
            link: l.link_id.clone(),
            counterpart: l.counterpart.clone(),
        };
        self.events.push_back(ev);
    }

    pub fn close_links_with(&mut self, counterpart: &EndpointId) {
        for i in 0..self.links.len() {
            if &self.links[i].counterpart == counterpart {
                self.close_link_at(i);
            }
        }
        self.links.retain(|l| l.is_open());
    }

    pub fn close_all_links(&mut self) {
        for i in 0..self.links.len() {
            self.close_link_at(i);
        }
        self.links.clear();
    }

    // -- inbound signaling ---------------------------------------------------

    pub fn apply_envelope(&mut self, env: &SignalEnvelope) -> Result<Applied, SessionError> {
        self.apply(
            &env.from,
            &DataEvent {
                to: env.to.clone(),
                kind: env.kind,
                seq: env.seq,
                payload: env.payload.clone(),
            },
        )
    }

    /// Applies signaling data produced by the other end. Repeated seqs from
    /// the same sender are dropped.
    pub fn apply(&mut self, from: &EndpointId, data: &DataEvent) -> Result<Applied, SessionError> {
        if let Some(&last) = self.seen_signal.get(from) {
            if data.seq <= last {
                self.stats.duplicates += 1;
                return Ok(Applied::Duplicate);
            }
        }
        self.seen_signal.insert(from.clone(), data.seq);
        match data.kind {
            MessageKind::Offer => self.on_offer(from, &data.payload),
            MessageKind::Answer => self.on_answer(from, &data.payload),
            MessageKind::Candidate => {
                let sig = LinkSignal::parse(&data.payload)
                    .map_err(|e| SessionError::Payload(e.to_string()))?;
                if !self.links.iter().any(|l| l.link_id == sig.link) {
                    return Err(SessionError::LinkUnknown(sig.link));
                }
                Ok(())
            }
            MessageKind::TracksAdded | MessageKind::TracksRemoved => {
                self.on_tracks(data.kind, &data.payload)
            }
            MessageKind::Text => {
                self.events.push_back(SessionEvent::Message {
                    from: from.clone(),
                    text: data.payload.clone(),
                });
                Ok(())
            }
            MessageKind::PauseHint => self.on_hint(&data.payload),
            MessageKind::Event => {
                let ev = ServiceEvent::parse(&data.payload)
                    .map_err(|e| SessionError::Payload(e.to_string()))?;
                self.on_service_event(ev)
            }
            MessageKind::Error => {
                let err = ErrorPayload::parse(&data.payload)
                    .map_err(|e| SessionError::Payload(e.to_string()))?;
                self.on_service_error(err);
                Ok(())
            }
            MessageKind::Publish | MessageKind::Subscribe | MessageKind::Stop => Ok(()),
        }
        .map(|_| Applied::Done)
    }

    fn on_offer(&mut self, from: &EndpointId, payload: &str) -> Result<(), SessionError> {
        let sig = LinkSignal::parse(payload).map_err(|e| SessionError::Payload(e.to_string()))?;
        if let Some(l) = self.links.iter().find(|l| l.link_id == sig.link) {
            return Err(SessionError::State {
                link: sig.link.clone(),
                from: l.state,
                to: LinkState::OfferReceived,
            });
        }
        if self.role != Role::Subscriber {
            return Err(SessionError::State {
                link: sig.link,
                from: LinkState::New,
                to: LinkState::OfferReceived,
            });
        }
        // a subscriber holds at most one link
        self.close_all_links();
        let tracks: Vec<TrackDescriptor> = sig
            .desc
            .get("tracks")
            .cloned()
            .map(serde_json::from_value)
            .transpose()
            .map_err(|e| SessionError::Payload(e.to_string()))?
            .unwrap_or_default();
        let stream = self.stream.clone().unwrap_or(StreamRef::Control);
        let mut link = PeerLink::new(sig.link.clone(), from.clone(), stream);
        link.advance(LinkState::OfferReceived).expect("new link");
        link.negotiated_tracks = tracks.clone();
        self.links.push(link);
        self.publisher_live = true;
        self.set_remote_tracks(tracks);
        let answer = LinkSignal {
            link: sig.link.clone(),
            desc: serde_json::json!({}),
        };
        self.signal(
            Some(from.clone()),
            MessageKind::Answer,
            serde_json::to_string(&answer).expect("link signal serializes"),
        );
        self.connect_link(&sig.link);
        Ok(())
    }

    fn on_answer(&mut self, from: &EndpointId, payload: &str) -> Result<(), SessionError> {
        let sig = LinkSignal::parse(payload).map_err(|e| SessionError::Payload(e.to_string()))?;
        let link = self
            .links
            .iter()
            .find(|l| l.link_id == sig.link && &l.counterpart == from)
            .ok_or_else(|| SessionError::LinkUnknown(sig.link.clone()))?;
        if link.state != LinkState::OfferSent {
            return Err(SessionError::State {
                link: sig.link,
                from: link.state,
                to: LinkState::Connected,
            });
        }
        self.connect_link(&sig.link);
        Ok(())
    }

    fn connect_link(&mut self, link_id: &str) {
        let Some(l) = self.links.iter_mut().find(|l| l.link_id == link_id) else {
            return;
        };
        if l.advance(LinkState::Connected).is_ok() {
            let ev = SessionEvent::LinkConnected {
                link: l.link_id.clone(),
                counterpart: l.counterpart.clone(),
            };
            self.events.push_back(ev);
            self.flush_pending_text();
        }
    }

    fn set_remote_tracks(&mut self, tracks: Vec<TrackDescriptor>) {
        if self.remote_tracks != tracks {
            self.remote_tracks = tracks.clone();
            self.events.push_back(SessionEvent::RemoteTracks(tracks));
        }
    }

    fn on_tracks(&mut self, kind: MessageKind, payload: &str) -> Result<(), SessionError> {
        let p: TracksPayload =
            serde_json::from_str(payload).map_err(|e| SessionError::Payload(e.to_string()))?;
        let mut next = self.remote_tracks.clone();
        if kind == MessageKind::TracksAdded {
            for t in p.tracks {
                if !next.iter().any(|x| x.label == t.label) {
                    next.push(t);
                }
            }
        } else {
            next.retain(|x| !p.tracks.iter().any(|t| t.label == x.label));
        }
        for l in self.links.iter_mut() {
            l.negotiated_tracks = next.clone();
        }
        self.set_remote_tracks(next);
        Ok(())
    }

    fn on_hint(&mut self, payload: &str) -> Result<(), SessionError> {
        let hint = PauseHint::parse(payload)
            .ok_or_else(|| SessionError::Payload(format!("pause hint `{payload}`")))?;
        self.events.push_back(SessionEvent::Hint(hint));
        Ok(())
    }

    pub fn on_service_event(&mut self, ev: ServiceEvent) -> Result<(), SessionError> {
        match ev {
            ServiceEvent::Welcome { endpoint } => self.set_endpoint_id(endpoint),
            ServiceEvent::SubscriberJoined { endpoint, hashed } => {
                if self.role == Role::Publisher {
                    let name = self.stream_name().cloned();
                    let stream_ref = match (name, hashed) {
                        (Some(n), true) => StreamRef::Hashed(hash_name(&n)),
                        (Some(n), false) => StreamRef::Raw(n),
                        (None, _) => StreamRef::Control,
                    };
                    self.create_peer_link(endpoint, stream_ref)?;
                }
            }
            ServiceEvent::PublisherLive { endpoint, tracks } => {
                if self.role == Role::Subscriber {
                    self.publisher_live = true;
                    self.set_remote_tracks(tracks);
                    self.events.push_back(SessionEvent::PublisherLive { endpoint });
                }
            }
            ServiceEvent::PeerGone { endpoint } => {
                let was_link = self.links.iter().any(|l| l.counterpart == endpoint);
                self.close_links_with(&endpoint);
                if self.role == Role::Subscriber {
                    self.publisher_live = false;
                    self.set_remote_tracks(Vec::new());
                }
                if was_link || self.role == Role::Subscriber {
                    self.events.push_back(SessionEvent::PeerGone { endpoint });
                }
            }
        }
        Ok(())
    }

    pub fn on_service_error(&mut self, err: ErrorPayload) {
        let stream = self
            .stream
            .as_ref()
            .map(|s| s.to_string())
            .unwrap_or_default();
        let mapped = match err.code {
            ErrorCode::PublisherConflict if self.role == Role::Publisher => {
                self.reset();
                SessionError::PublisherConflict(stream)
            }
            ErrorCode::StreamUnknown if self.role == Role::Subscriber => {
                self.reset();
                SessionError::StreamUnknown(stream)
            }
            code => SessionError::Service {
                code,
                message: err.message,
            },
        };
        self.error(mapped);
    }

    /// Transport to the service went away; links are gone with it.
    pub fn on_transport_lost(&mut self, reason: &str) {
        self.close_all_links();
        self.error(SessionError::Transport(reason.to_string()));
    }

    // -- media plane ---------------------------------------------------------

    /// Advances the clock and emits any frames the source has due.
    pub fn tick(&mut self, now: u64) {
        self.set_now(now);
        if self.role != Role::Publisher || !self.playing {
            return;
        }
        let Some(src) = &mut self.local_media else {
            return;
        };
        for raw in src.poll(now) {
            self.emit(raw);
        }
    }

    /// Frames from an upstream session this one republishes.
    pub fn push_input(&mut self, frame: &MediaFrame) {
        if self.role != Role::Publisher || !self.playing {
            return;
        }
        let relays = self
            .local_media
            .as_ref()
            .is_some_and(|s| matches!(s.kind(), SourceKind::Input { .. }));
        if !relays || !self.tracks.iter().any(|t| t.label == frame.track_label) {
            return;
        }
        self.emit(RawFrame {
            track_label: frame.track_label.clone(),
            ts_ms: frame.ts_ms,
            payload: frame.payload.clone(),
        });
    }

    fn emit(&mut self, raw: RawFrame) {
        let Some(track) = self.tracks.iter().find(|t| t.label == raw.track_label) else {
            return;
        };
        if !track.enabled || (self.muted && track.kind == TrackKind::Audio) {
            return;
        }
        let Some(stream) = self.stream.clone() else {
            return;
        };
        let seq = {
            let s = self.frame_seq.entry(raw.track_label.clone()).or_insert(0);
            let seq = *s;
            *s += 1;
            seq
        };
        bump(&mut self.stats.frames_emitted, &raw.track_label);
        let frame = MediaFrame {
            stream,
            track_label: raw.track_label,
            seq,
            ts_ms: raw.ts_ms,
            payload: raw.payload,
            sealed: false,
        };
        let wire = match &self.secret {
            Some((_, key)) => seal_frame(&frame, key).expect("fresh frame seals"),
            None => frame.clone(),
        };
        if self.tap {
            self.outgoing
                .push_back(Outgoing::Local(LinkItem::Frame(frame.clone())));
        }
        let targets: Vec<(String, EndpointId, StreamRef)> = self
            .connected_links()
            .map(|l| (l.link_id.clone(), l.counterpart.clone(), l.stream_ref.clone()))
            .collect();
        for (link_id, to, stream_ref) in targets {
            let mut f = wire.clone();
            f.stream = stream_ref;
            bump(&mut self.stats.frames_sent, &f.track_label);
            self.outgoing.push_back(Outgoing::Link {
                link_id,
                to,
                item: LinkItem::Frame(f),
            });
        }
        self.events.push_back(SessionEvent::Media(frame));
    }

    /// Something arrived over a link from `from`.
    pub fn on_link_item(&mut self, from: &EndpointId, item: LinkItem) -> Result<(), SessionError> {
        match item {
            LinkItem::Channel(env) => {
                if let Some(&last) = self.seen_channel.get(&env.from) {
                    if env.seq <= last {
                        self.stats.duplicates += 1;
                        return Ok(());
                    }
                }
                self.seen_channel.insert(env.from.clone(), env.seq);
                match env.kind {
                    MessageKind::Text => {
                        self.events.push_back(SessionEvent::Message {
                            from: env.from.clone(),
                            text: env.payload,
                        });
                        Ok(())
                    }
                    MessageKind::PauseHint => self.on_hint(&env.payload),
                    other => Err(SessionError::Payload(format!("{other} is not a channel message"))),
                }
            }
            LinkItem::Frame(frame) => {
                self.receive_frame(from, frame);
                Ok(())
            }
        }
    }

    fn receive_frame(&mut self, from: &EndpointId, frame: MediaFrame) {
        let track = frame.track_label.clone();
        let linked = self
            .links
            .iter()
            .any(|l| l.is_connected() && &l.counterpart == from);
        // a track not yet announced (or already removed) was never negotiated
        let known = self.remote_tracks.iter().any(|t| t.label == track);
        if self.role != Role::Subscriber || !linked || !known {
            bump(&mut self.stats.frames_dropped, &track);
            return;
        }
        let key = (from.clone(), track.clone());
        if let Some(&last) = self.seen_frames.get(&key) {
            if frame.seq <= last {
                self.stats.duplicates += 1;
                bump(&mut self.stats.frames_dropped, &track);
                return;
            }
        }
        self.seen_frames.insert(key, frame.seq);
        let clear = match (&self.secret, frame.sealed) {
            (Some((_, key)), true) => open_frame(&frame, key).ok(),
            (None, false) => Some(frame.clone()),
            _ => None,
        };
        let Some(clear) = clear else {
            self.stats.integrity_errors += 1;
            bump(&mut self.stats.frames_dropped, &track);
            self.error(SessionError::Integrity {
                track,
                seq: frame.seq,
            });
            return;
        };
        if !self.playing {
            bump(&mut self.stats.frames_dropped, &track);
            return;
        }
        bump(&mut self.stats.frames_delivered, &track);
        self.remote_media.record(clear.clone(), self.now);
        self.events.push_back(SessionEvent::Media(clear));
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::connector::Direct;

    fn ep(s: &str) -> EndpointId {
        EndpointId::new(s).unwrap()
    }

    fn name(s: &str) -> StreamName {
        StreamName::new(s).unwrap()
    }

    fn publisher(id: &str) -> EndpointSession {
        let mut s = EndpointSession::new(format!("{id}-pub"));
        s.set_endpoint_id(ep(id));
        s.set_input(MediaSource::audio_video(1)).unwrap();
        s.publish(name("s"), &mut Direct, &mut Io::default()).unwrap();
        s
    }

    fn subscriber(id: &str) -> EndpointSession {
        let mut s = EndpointSession::new(format!("{id}-sub"));
        s.set_endpoint_id(ep(id));
        s.subscribe(StreamRef::Raw(name("s")), &mut Direct, &mut Io::default())
            .unwrap();
        s
    }

    /// Moves every data event and link item from `a` into `b`.
    fn pump(a: &mut EndpointSession, b: &mut EndpointSession) {
        let from = a.id().unwrap().clone();
        for out in a.drain_outgoing() {
            match out {
                Outgoing::Data(d) => {
                    b.apply(&from, &d).unwrap();
                }
                Outgoing::Link { item, .. } => b.on_link_item(&from, item).unwrap(),
                Outgoing::Local(_) => {}
            }
        }
    }

    fn wire_up(p: &mut EndpointSession, s: &mut EndpointSession) {
        p.create_peer_link(s.id().unwrap().clone(), StreamRef::Raw(name("s")))
            .unwrap();
        pump(p, s);
        pump(s, p);
    }

    #[test]
    fn cross_wired_sessions_connect_without_a_service() {
        let mut p = publisher("A");
        let mut s = subscriber("B");
        wire_up(&mut p, &mut s);
        assert_eq!(p.links()[0].state, LinkState::Connected);
        assert_eq!(s.links()[0].state, LinkState::Connected);
        assert_eq!(s.remote_tracks().len(), 2);
        p.tick(0);
        p.tick(100);
        pump(&mut p, &mut s);
        assert_eq!(s.remote_media().count("video"), 3);
        assert_eq!(s.remote_media().count("audio"), 3);
    }

    #[test]
    fn answer_before_offer_is_a_state_error() {
        let mut p = publisher("A");
        p.set_input(MediaSource::audio_video(1)).unwrap();
        let mut s = subscriber("B");
        // the subscriber never offers, so its link is not waiting for an answer
        let mut p2 = publisher("C");
        wire_up(&mut p2, &mut s);
        let bogus = DataEvent {
            to: None,
            kind: MessageKind::Answer,
            seq: 99,
            payload: serde_json::json!({"link": s.links()[0].link_id, "desc": {}}).to_string(),
        };
        assert!(matches!(
            s.apply(&ep("C"), &bogus),
            Err(SessionError::State { .. })
        ));
        let unknown = DataEvent {
            seq: 100,
            payload: r#"{"link":"nope","desc":{}}"#.into(),
            ..bogus
        };
        assert_eq!(
            p.apply(&ep("B"), &unknown),
            Err(SessionError::LinkUnknown("nope".into()))
        );
    }

    #[test]
    fn duplicate_offer_is_dropped() {
        let mut p = publisher("A");
        let mut s = subscriber("B");
        p.create_peer_link(ep("B"), StreamRef::Raw(name("s"))).unwrap();
        let Outgoing::Data(offer) = p.drain_outgoing().remove(0) else {
            panic!("expected offer")
        };
        assert_eq!(s.apply(&ep("A"), &offer), Ok(Applied::Done));
        let before = s.links().to_vec();
        assert_eq!(s.apply(&ep("A"), &offer), Ok(Applied::Duplicate));
        assert_eq!(s.links(), before.as_slice());
        assert_eq!(s.drain_outgoing().len(), 1);
    }

    #[test]
    fn role_rules() {
        let mut s = subscriber("B");
        assert!(matches!(
            s.subscribe(StreamRef::Raw(name("s")), &mut Direct, &mut Io::default()),
            Err(SessionError::Role { .. })
        ));
        assert!(matches!(
            s.add_tracks(&[TrackDescriptor::video()], &mut Direct, &mut Io::default()),
            Err(SessionError::Role { .. })
        ));
        assert!(s.set_input(MediaSource::audio_video(0)).is_err());
        let mut bare = EndpointSession::new("x");
        assert_eq!(
            bare.publish(name("s"), &mut Direct, &mut Io::default()),
            Err(SessionError::NoInput)
        );
        assert!(bare.send("hi").is_err());
    }

    #[test]
    fn text_is_queued_until_connected_in_order() {
        let mut p = publisher("A");
        let mut s = subscriber("B");
        s.send("one").unwrap();
        s.send("two").unwrap();
        assert_eq!(s.pending_text(), 2);
        wire_up(&mut p, &mut s);
        pump(&mut s, &mut p);
        let texts: Vec<_> = p
            .drain_events()
            .into_iter()
            .filter_map(|e| match e {
                SessionEvent::Message { text, .. } => Some(text),
                _ => None,
            })
            .collect();
        assert_eq!(texts, vec!["one", "two"]);
    }

    #[test]
    fn send_queue_is_bounded() {
        let mut s = subscriber("B");
        for i in 0..SEND_QUEUE_LIMIT + 3 {
            s.send(format!("{i}")).unwrap();
        }
        assert_eq!(s.pending_text(), SEND_QUEUE_LIMIT);
        assert_eq!(s.stats().texts_dropped, 3);
    }

    #[test]
    fn autopause_hint_precedes_the_gap() {
        let mut p = publisher("A");
        p.set_autopause(true);
        let mut s = subscriber("B");
        wire_up(&mut p, &mut s);
        p.tick(0);
        p.set_playing(false);
        p.tick(500);
        p.set_playing(true);
        p.tick(600);
        let kinds: Vec<String> = p
            .drain_outgoing()
            .into_iter()
            .map(|o| match o {
                Outgoing::Link {
                    item: LinkItem::Frame(f),
                    ..
                } => format!("f{}", f.ts_ms),
                Outgoing::Link {
                    item: LinkItem::Channel(env),
                    ..
                } => env.payload,
                Outgoing::Data(d) => d.kind.to_string(),
                Outgoing::Local(_) => unreachable!(),
            })
            .collect();
        assert_eq!(kinds, vec!["f0", "f0", "pause", "play", "f600", "f600"]);
    }

    #[test]
    fn mismatched_secret_delivers_nothing() {
        let mut p = publisher("A");
        p.set_secret(Some("right")).unwrap();
        let mut s = subscriber("B");
        s.set_secret(Some("wrong")).unwrap();
        wire_up(&mut p, &mut s);
        p.tick(0);
        p.tick(200);
        pump(&mut p, &mut s);
        assert_eq!(s.remote_media().total(), 0);
        assert_eq!(s.stats().integrity_errors, 10);
    }

    #[test]
    fn relay_source_republishes_payloads() {
        let mut p = publisher("A");
        let mut mid = subscriber("B");
        wire_up(&mut p, &mut mid);
        let mut relay = EndpointSession::new("relay");
        relay.set_endpoint_id(ep("R"));
        relay
            .set_input(MediaSource::input("B-sub", vec![TrackDescriptor::video()]))
            .unwrap();
        relay.publish(name("t"), &mut Direct, &mut Io::default()).unwrap();
        let mut leaf = EndpointSession::new("leaf");
        leaf.set_endpoint_id(ep("L"));
        leaf.subscribe(StreamRef::Raw(name("t")), &mut Direct, &mut Io::default())
            .unwrap();
        relay.create_peer_link(ep("L"), StreamRef::Raw(name("t"))).unwrap();
        pump(&mut relay, &mut leaf);
        pump(&mut leaf, &mut relay);

        p.tick(0);
        p.tick(50);
        pump(&mut p, &mut mid);
        for ev in mid.drain_events() {
            if let SessionEvent::Media(f) = ev {
                relay.push_input(&f);
            }
        }
        pump(&mut relay, &mut leaf);
        let upstream: Vec<u64> = mid.remote_media().history("video").iter().map(|m| m.digest).collect();
        let down: Vec<u64> = leaf.remote_media().history("video").iter().map(|m| m.digest).collect();
        assert_eq!(upstream.len(), 2);
        assert_eq!(upstream, down);
        assert_eq!(leaf.remote_media().count("audio"), 0);
    }

    #[test]
    fn publisher_conflict_resets_role() {
        let mut p = publisher("A");
        p.apply(
            &ep("broker"),
            &DataEvent {
                to: None,
                kind: MessageKind::Error,
                seq: 1,
                payload: ErrorPayload {
                    code: ErrorCode::PublisherConflict,
                    message: String::new(),
                    seq: None,
                }
                .to_payload(),
            },
        )
        .unwrap();
        assert_eq!(p.role(), Role::Unset);
        assert!(p
            .drain_events()
            .iter()
            .any(|e| matches!(e, SessionEvent::Error(SessionError::PublisherConflict(_)))));
    }
}
