//! Signaling envelopes and their newline-delimited JSON encoding.
//!
//! Every connector and service exchanges the same envelope shape:
//!
//! ```text
//! {"v":1,"stream":"str/15","from":"ep-7","to":"ep-9","kind":"OFFER","seq":3,"payload":"..."}
//! ```
//!
//! `to` is omitted for service-routed messages. Payloads are opaque text; the
//! typed schemas below are what this crate puts in them, but relays never
//! look inside OFFER/ANSWER/CANDIDATE/TEXT payloads.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::stream::{EndpointId, StreamRecord, StreamRef, TrackDescriptor};

pub const WIRE_VERSION: u8 = 1;
pub const MAX_PAYLOAD: usize = 64 * 1024;

/// The publisher side of a stream creates the peer link and sends the offer.
pub const PUBLISHER_OFFERS: bool = true;

/// `from` of envelopes a service originates itself.
pub const SERVICE_ID: &str = "broker";

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "SCREAMING_SNAKE_CASE")]
pub enum MessageKind {
    Publish,
    Subscribe,
    Stop,
    Offer,
    Answer,
    Candidate,
    TracksAdded,
    TracksRemoved,
    Text,
    PauseHint,
    Event,
    Error,
}

impl MessageKind {
    pub const ALL: [MessageKind; 12] = [
        Self::Publish,
        Self::Subscribe,
        Self::Stop,
        Self::Offer,
        Self::Answer,
        Self::Candidate,
        Self::TracksAdded,
        Self::TracksRemoved,
        Self::Text,
        Self::PauseHint,
        Self::Event,
        Self::Error,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            Self::Publish => "PUBLISH",
            Self::Subscribe => "SUBSCRIBE",
            Self::Stop => "STOP",
            Self::Offer => "OFFER",
            Self::Answer => "ANSWER",
            Self::Candidate => "CANDIDATE",
            Self::TracksAdded => "TRACKS_ADDED",
            Self::TracksRemoved => "TRACKS_REMOVED",
            Self::Text => "TEXT",
            Self::PauseHint => "PAUSE_HINT",
            Self::Event => "EVENT",
            Self::Error => "ERROR",
        }
    }

    /// Kinds a service consumes itself instead of forwarding.
    pub fn is_control(self) -> bool {
        matches!(self, Self::Publish | Self::Subscribe | Self::Stop)
    }

    pub fn is_negotiation(self) -> bool {
        matches!(self, Self::Offer | Self::Answer | Self::Candidate)
    }
}

impl fmt::Display for MessageKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl FromStr for MessageKind {
    type Err = WireError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|k| k.as_str() == s)
            .ok_or_else(|| WireError::Kind(s.to_string()))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum WireError {
    #[error("malformed envelope at byte {offset}: {reason}")]
    Decode { offset: usize, reason: String },
    #[error("unsupported envelope version {0}")]
    Version(u64),
    #[error("unknown message kind `{0}`")]
    Kind(String),
    #[error("invalid envelope: {0}")]
    Invalid(String),
    #[error("payload of {0} bytes exceeds the 64 KiB limit")]
    PayloadTooLarge(usize),
}

#[derive(Debug, Clone, PartialEq, Eq, Hash)]
pub struct SignalEnvelope {
    pub stream: StreamRef,
    pub from: EndpointId,
    pub to: Option<EndpointId>,
    pub kind: MessageKind,
    pub seq: u64,
    pub payload: String,
}

#[derive(Serialize)]
struct WireOut<'a> {
    v: u8,
    stream: &'a str,
    from: &'a str,
    #[serde(skip_serializing_if = "Option::is_none")]
    to: Option<&'a str>,
    kind: MessageKind,
    seq: u64,
    payload: &'a str,
}

#[derive(Deserialize)]
#[serde(deny_unknown_fields)]
struct WireIn {
    v: u64,
    stream: String,
    from: String,
    #[serde(default)]
    to: Option<String>,
    kind: String,
    seq: u64,
    payload: String,
}

impl SignalEnvelope {
    pub fn new(
        stream: StreamRef,
        from: EndpointId,
        kind: MessageKind,
        seq: u64,
        payload: impl Into<String>,
    ) -> Self {
        Self {
            stream,
            from,
            to: None,
            kind,
            seq,
            payload: payload.into(),
        }
    }

    pub fn to(mut self, to: EndpointId) -> Self {
        self.to = Some(to);
        self
    }

    pub fn validate(&self) -> Result<(), WireError> {
        if self.payload.len() > MAX_PAYLOAD {
            return Err(WireError::PayloadTooLarge(self.payload.len()));
        }
        if self.stream == StreamRef::Control && !matches!(self.kind, MessageKind::Event | MessageKind::Error) {
            return Err(WireError::Invalid(format!(
                "{} cannot use the control stream",
                self.kind
            )));
        }
        Ok(())
    }

    /// One line of the wire format, without the trailing newline.
    pub fn encode(&self) -> Result<String, WireError> {
        self.validate()?;
        let out = WireOut {
            v: WIRE_VERSION,
            stream: self.stream.as_str(),
            from: self.from.as_str(),
            to: self.to.as_ref().map(EndpointId::as_str),
            kind: self.kind,
            seq: self.seq,
            payload: &self.payload,
        };
        serde_json::to_string(&out).map_err(|e| WireError::Invalid(e.to_string()))
    }

    /// Strict decode of one line. A single trailing `\n` (or `\r\n`) is
    /// accepted; anything else after the object is rejected.
    pub fn decode(input: &[u8]) -> Result<Self, WireError> {
        let text = std::str::from_utf8(input).map_err(|e| WireError::Decode {
            offset: e.valid_up_to(),
            reason: "invalid UTF-8".into(),
        })?;
        let body = text
            .strip_suffix('\n')
            .map(|t| t.strip_suffix('\r').unwrap_or(t))
            .unwrap_or(text);
        if let Some(pos) = body.find('\n') {
            return Err(WireError::Decode {
                offset: pos,
                reason: "embedded newline".into(),
            });
        }
        let raw: WireIn = match serde_json::from_str(body) {
            Ok(raw) => raw,
            Err(err) => {
                // a well-formed object from a newer protocol revision
                if let Ok(serde_json::Value::Object(map)) = serde_json::from_str(body) {
                    if let Some(v) = map.get("v").and_then(|v| v.as_u64()) {
                        if v != WIRE_VERSION as u64 {
                            return Err(WireError::Version(v));
                        }
                    }
                }
                return Err(WireError::Decode {
                    offset: err.column().saturating_sub(1),
                    reason: err.to_string(),
                });
            }
        };
        if raw.v != WIRE_VERSION as u64 {
            return Err(WireError::Version(raw.v));
        }
        let kind = raw.kind.parse::<MessageKind>()?;
        let stream =
            StreamRef::parse(&raw.stream).map_err(|e| WireError::Invalid(e.to_string()))?;
        let from = EndpointId::new(raw.from).ok_or_else(|| WireError::Invalid("empty from".into()))?;
        let to = match raw.to {
            Some(t) => Some(EndpointId::new(t).ok_or_else(|| WireError::Invalid("empty to".into()))?),
            None => None,
        };
        let env = Self {
            stream,
            from,
            to,
            kind,
            seq: raw.seq,
            payload: raw.payload,
        };
        env.validate()?;
        Ok(env)
    }

    pub fn decode_str(line: &str) -> Result<Self, WireError> {
        Self::decode(line.as_bytes())
    }
}

/// Payload of PUBLISH and SUBSCRIBE.
#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct JoinPayload {
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub tracks: Vec<TrackDescriptor>,
    /// Space-separated webhook URLs for this role.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub ping: Option<String>,
}

impl JoinPayload {
    pub fn parse(payload: &str) -> Result<Self, WireError> {
        if payload.is_empty() {
            return Ok(Self::default());
        }
        serde_json::from_str(payload).map_err(|e| WireError::Invalid(format!("join payload: {e}")))
    }
}

/// Payload of OFFER/ANSWER/CANDIDATE. `desc` is whatever the two link ends
/// exchange; simulated sessions put their track list there, browsers a
/// session description.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkSignal {
    pub link: String,
    #[serde(default)]
    pub desc: serde_json::Value,
}

impl LinkSignal {
    pub fn parse(payload: &str) -> Result<Self, WireError> {
        serde_json::from_str(payload).map_err(|e| WireError::Invalid(format!("link payload: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct TracksPayload {
    pub tracks: Vec<TrackDescriptor>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum PauseHint {
    Pause,
    Play,
}

impl PauseHint {
    pub fn as_str(self) -> &'static str {
        match self {
            Self::Pause => "pause",
            Self::Play => "play",
        }
    }

    pub fn parse(s: &str) -> Option<Self> {
        match s {
            "pause" => Some(Self::Pause),
            "play" => Some(Self::Play),
            _ => None,
        }
    }
}

/// EVENT payloads sent by services.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "event", rename_all = "kebab-case")]
pub enum ServiceEvent {
    Welcome { endpoint: EndpointId },
    PublisherLive {
        endpoint: EndpointId,
        #[serde(default)]
        tracks: Vec<TrackDescriptor>,
    },
    SubscriberJoined {
        endpoint: EndpointId,
        #[serde(default)]
        hashed: bool,
    },
    PeerGone { endpoint: EndpointId },
}

impl ServiceEvent {
    pub fn to_payload(&self) -> String {
        serde_json::to_string(self).expect("event serializes")
    }

    pub fn parse(payload: &str) -> Result<Self, WireError> {
        serde_json::from_str(payload).map_err(|e| WireError::Invalid(format!("event payload: {e}")))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ErrorCode {
    PublisherConflict,
    StreamUnknown,
    MembershipError,
    RoleError,
    TrackError,
    Malformed,
    Overflow,
    Unauthorized,
    InvalidRequest,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ErrorPayload {
    pub code: ErrorCode,
    #[serde(default)]
    pub message: String,
    /// seq of the offending envelope, when there was one
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub seq: Option<u64>,
}

impl ErrorPayload {
    pub fn to_payload(&self) -> String {
        serde_json::to_string(self).expect("error serializes")
    }

    pub fn parse(payload: &str) -> Result<Self, WireError> {
        serde_json::from_str(payload).map_err(|e| WireError::Invalid(format!("error payload: {e}")))
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum RouteError {
    #[error("{0} is not a member of the stream")]
    Membership(EndpointId),
    #[error("{kind} from {from} requires the publisher role")]
    Role { kind: MessageKind, from: EndpointId },
}

impl RouteError {
    pub fn code(&self) -> ErrorCode {
        match self {
            Self::Membership(_) => ErrorCode::MembershipError,
            Self::Role { .. } => ErrorCode::RoleError,
        }
    }
}

/// Members on the other side of the stream from `from`.
fn counterparts(rec: &StreamRecord, from: &EndpointId) -> BTreeSet<EndpointId> {
    let mut out = BTreeSet::new();
    if rec.is_publisher(from) {
        out.extend(rec.subscribers.iter().cloned());
    }
    if rec.subscribers.contains(from) {
        out.extend(rec.publisher.iter().cloned());
    }
    out.remove(from);
    out
}

/// Recipients of a forwarded envelope. Control kinds (PUBLISH/SUBSCRIBE/STOP)
/// are consumed by the service and route nowhere.
pub fn route_rule(
    kind: MessageKind,
    rec: &StreamRecord,
    from: &EndpointId,
    to: Option<&EndpointId>,
) -> Result<BTreeSet<EndpointId>, RouteError> {
    if kind.is_control() {
        return Ok(BTreeSet::new());
    }
    let publisher_only = matches!(
        kind,
        MessageKind::TracksAdded | MessageKind::TracksRemoved | MessageKind::PauseHint
    );
    if publisher_only && !rec.is_publisher(from) {
        return Err(RouteError::Role {
            kind,
            from: from.clone(),
        });
    }
    if !rec.is_member(from) {
        return Err(RouteError::Membership(from.clone()));
    }
    let mut targets = counterparts(rec, from);
    if let Some(to) = to {
        if !targets.contains(to) {
            return Err(RouteError::Membership(to.clone()));
        }
        targets = BTreeSet::from([to.clone()]);
    }
    Ok(targets)
}
