//! Named streams: names, references, track descriptors and the per-stream
//! membership record with its lifecycle transitions.
//!
//! A stream has at most one publisher and any number of subscribers.
//! Subscribers may attach before the publisher does; they stay pending
//! until a publisher shows up and are retained when it leaves.

use std::collections::BTreeSet;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

pub const MAX_NAME_LEN: usize = 256;

/// Prefix of the digest form of a stream reference.
pub const HASHED_PREFIX: &str = "h:";

/// Stream field used by service-originated envelopes that are not about any
/// particular stream (welcome, session-level errors).
pub const CONTROL_REF: &str = "~";

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum StreamError {
    #[error("invalid stream name: {0}")]
    InvalidName(&'static str),
    #[error("invalid stream reference `{0}`")]
    InvalidRef(String),
    #[error("stream `{stream}` already has publisher {holder}")]
    PublisherConflict { stream: String, holder: EndpointId },
    #[error("track label `{0}` already present")]
    DuplicateTrack(String),
    #[error("unknown track `{0}`")]
    TrackUnknown(String),
}

/// A validated stream name: 1..=256 bytes of visible characters, `/` allowed
/// as a hierarchy separator but not at either end.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(try_from = "String", into = "String")]
pub struct StreamName(String);

impl StreamName {
    pub fn new(raw: impl Into<String>) -> Result<Self, StreamError> {
        let raw = raw.into();
        if raw.is_empty() {
            return Err(StreamError::InvalidName("empty"));
        }
        if raw.len() > MAX_NAME_LEN {
            return Err(StreamError::InvalidName("longer than 256 bytes"));
        }
        if raw.chars().any(|c| c.is_control() || c.is_whitespace()) {
            return Err(StreamError::InvalidName("control or whitespace character"));
        }
        if raw.starts_with('/') || raw.ends_with('/') {
            return Err(StreamError::InvalidName("leading or trailing `/`"));
        }
        // reserved for the control ref and the digest form
        if raw.starts_with(CONTROL_REF) {
            return Err(StreamError::InvalidName("leading `~` is reserved"));
        }
        if raw.starts_with(HASHED_PREFIX) {
            return Err(StreamError::InvalidName("leading `h:` is reserved"));
        }
        Ok(Self(raw))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }

    pub fn hashed(&self) -> HashedName {
        hash_name(self)
    }
}

impl fmt::Display for StreamName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

impl TryFrom<String> for StreamName {
    type Error = StreamError;
    fn try_from(value: String) -> Result<Self, Self::Error> {
        Self::new(value)
    }
}

impl From<StreamName> for String {
    fn from(value: StreamName) -> Self {
        value.0
    }
}

impl FromStr for StreamName {
    type Err = StreamError;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::new(s)
    }
}

/// Digest form of a stream name: `h:` followed by 64 lowercase hex chars.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct HashedName(String);

impl HashedName {
    pub fn parse(text: &str) -> Result<Self, StreamError> {
        let hex = text
            .strip_prefix(HASHED_PREFIX)
            .ok_or_else(|| StreamError::InvalidRef(text.to_string()))?;
        let ok = hex.len() == 64
            && hex
                .bytes()
                .all(|b| b.is_ascii_digit() || (b'a'..=b'f').contains(&b));
        if !ok {
            return Err(StreamError::InvalidRef(text.to_string()));
        }
        Ok(Self(text.to_string()))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for HashedName {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

/// SHA-256 over the UTF-8 bytes of the name, lowercase hex, `h:` prefix.
pub fn hash_name(name: &StreamName) -> HashedName {
    let digest = Sha256::digest(name.as_str().as_bytes());
    HashedName(format!("{HASHED_PREFIX}{}", hex::encode(digest)))
}

/// How an envelope names its stream.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum StreamRef {
    Raw(StreamName),
    Hashed(HashedName),
    /// Session scope, not tied to a stream.
    Control,
}

impl StreamRef {
    pub fn parse(text: &str) -> Result<Self, StreamError> {
        if text == CONTROL_REF {
            Ok(Self::Control)
        } else if text.starts_with(HASHED_PREFIX) {
            HashedName::parse(text).map(Self::Hashed)
        } else {
            StreamName::new(text)
                .map(Self::Raw)
                .map_err(|_| StreamError::InvalidRef(text.to_string()))
        }
    }

    pub fn as_str(&self) -> &str {
        match self {
            Self::Raw(n) => n.as_str(),
            Self::Hashed(h) => h.as_str(),
            Self::Control => CONTROL_REF,
        }
    }

    pub fn is_hashed(&self) -> bool {
        matches!(self, Self::Hashed(_))
    }

    pub fn raw(&self) -> Option<&StreamName> {
        match self {
            Self::Raw(n) => Some(n),
            _ => None,
        }
    }
}

impl From<StreamName> for StreamRef {
    fn from(value: StreamName) -> Self {
        Self::Raw(value)
    }
}

impl From<HashedName> for StreamRef {
    fn from(value: HashedName) -> Self {
        Self::Hashed(value)
    }
}

impl fmt::Display for StreamRef {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Opaque per-session identity, assigned by whatever service the session
/// connects through.
#[derive(Debug, Clone, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(transparent)]
pub struct EndpointId(String);

impl EndpointId {
    pub fn new(id: impl Into<String>) -> Option<Self> {
        let id = id.into();
        (!id.is_empty()).then_some(Self(id))
    }

    pub fn as_str(&self) -> &str {
        &self.0
    }
}

impl fmt::Display for EndpointId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(&self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum TrackKind {
    Audio,
    Video,
    Data,
}

impl FromStr for TrackKind {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s {
            "audio" => Ok(Self::Audio),
            "video" => Ok(Self::Video),
            "data" => Ok(Self::Data),
            other => Err(format!("unknown track kind `{other}`")),
        }
    }
}

impl fmt::Display for TrackKind {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::Audio => "audio",
            Self::Video => "video",
            Self::Data => "data",
        })
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub struct TrackDescriptor {
    pub kind: TrackKind,
    pub label: String,
    #[serde(default = "enabled_default")]
    pub enabled: bool,
}

fn enabled_default() -> bool {
    true
}

impl TrackDescriptor {
    pub fn new(kind: TrackKind, label: impl Into<String>) -> Self {
        Self {
            kind,
            label: label.into(),
            enabled: true,
        }
    }

    pub fn audio() -> Self {
        Self::new(TrackKind::Audio, "audio")
    }

    pub fn video() -> Self {
        Self::new(TrackKind::Video, "video")
    }
}

/// Adds `tracks` to `list`, rejecting labels already present (in the list or
/// repeated within `tracks`). The list is untouched on error.
pub fn merge_tracks(
    list: &mut Vec<TrackDescriptor>,
    tracks: &[TrackDescriptor],
) -> Result<(), StreamError> {
    let mut seen: BTreeSet<&str> = list.iter().map(|t| t.label.as_str()).collect();
    for t in tracks {
        if !seen.insert(t.label.as_str()) {
            return Err(StreamError::DuplicateTrack(t.label.clone()));
        }
    }
    list.extend(tracks.iter().cloned());
    Ok(())
}

/// Removes tracks by label; every label must be present.
pub fn drop_tracks(list: &mut Vec<TrackDescriptor>, labels: &[String]) -> Result<(), StreamError> {
    if let Some(missing) = labels.iter().find(|l| !list.iter().any(|t| &t.label == *l)) {
        return Err(StreamError::TrackUnknown(missing.clone()));
    }
    list.retain(|t| !labels.contains(&t.label));
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum StreamStatus {
    Idle,
    Live,
}

/// Whether a transition changed the record.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Change {
    Applied,
    Unchanged,
}

/// Which role an endpoint lost on detach.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Detached {
    Publisher,
    Subscriber,
    Both,
    Nothing,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StreamRecord {
    pub name: StreamName,
    #[serde(serialize_with = "ser_hashed")]
    pub hashed: HashedName,
    pub publisher: Option<EndpointId>,
    pub subscribers: BTreeSet<EndpointId>,
    pub tracks: Vec<TrackDescriptor>,
    pub status: StreamStatus,
}

fn ser_hashed<S: serde::Serializer>(h: &HashedName, s: S) -> Result<S::Ok, S::Error> {
    s.serialize_str(h.as_str())
}

impl StreamRecord {
    pub fn new(name: StreamName) -> Self {
        Self {
            hashed: hash_name(&name),
            name,
            publisher: None,
            subscribers: BTreeSet::new(),
            tracks: Vec::new(),
            status: StreamStatus::Idle,
        }
    }

    pub fn attach_publisher(&mut self, ep: &EndpointId) -> Result<Change, StreamError> {
        match &self.publisher {
            Some(holder) if holder == ep => Ok(Change::Unchanged),
            Some(holder) => Err(StreamError::PublisherConflict {
                stream: self.name.to_string(),
                holder: holder.clone(),
            }),
            None => {
                self.publisher = Some(ep.clone());
                self.status = StreamStatus::Live;
                Ok(Change::Applied)
            }
        }
    }

    pub fn attach_subscriber(&mut self, ep: &EndpointId) -> Change {
        if self.subscribers.insert(ep.clone()) {
            Change::Applied
        } else {
            Change::Unchanged
        }
    }

    /// Removes `ep` from whichever role(s) it holds. Losing the publisher
    /// idles the stream and clears its tracks; subscribers stay pending.
    pub fn detach(&mut self, ep: &EndpointId) -> Detached {
        let was_pub = self.publisher.as_ref() == Some(ep);
        if was_pub {
            self.publisher = None;
            self.status = StreamStatus::Idle;
            self.tracks.clear();
        }
        let was_sub = self.subscribers.remove(ep);
        match (was_pub, was_sub) {
            (true, true) => Detached::Both,
            (true, false) => Detached::Publisher,
            (false, true) => Detached::Subscriber,
            (false, false) => Detached::Nothing,
        }
    }

    pub fn is_member(&self, ep: &EndpointId) -> bool {
        self.publisher.as_ref() == Some(ep) || self.subscribers.contains(ep)
    }

    pub fn is_publisher(&self, ep: &EndpointId) -> bool {
        self.publisher.as_ref() == Some(ep)
    }

    pub fn is_empty(&self) -> bool {
        self.publisher.is_none() && self.subscribers.is_empty()
    }

    /// Record invariants; used by audits and property tests.
    pub fn check(&self) -> Result<(), String> {
        let live = self.status == StreamStatus::Live;
        if live != self.publisher.is_some() {
            return Err(format!(
                "status {:?} with publisher {:?}",
                self.status, self.publisher
            ));
        }
        if self.publisher.is_none() && !self.tracks.is_empty() {
            return Err("tracks advertised without a publisher".into());
        }
        let mut labels = BTreeSet::new();
        if let Some(dup) = self.tracks.iter().find(|t| !labels.insert(&t.label)) {
            return Err(format!("duplicate track label {}", dup.label));
        }
        if self.hashed != hash_name(&self.name) {
            return Err("stale digest".into());
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn ep(s: &str) -> EndpointId {
        EndpointId::new(s).unwrap()
    }

    fn rec() -> StreamRecord {
        StreamRecord::new(StreamName::new("str/15").unwrap())
    }

    #[test]
    fn hash_matches_reference_digest() {
        // sha256sum of the bytes "str/15"
        let h = hash_name(&StreamName::new("str/15").unwrap());
        assert_eq!(
            h.as_str(),
            "h:7228b70404c9094888a6945cc4cc621ad3cbdaa49a83caf6d119901a22254fb9"
        );
        assert_eq!(h, hash_name(&StreamName::new("str/15").unwrap()));
        assert!(HashedName::parse(h.as_str()).is_ok());
    }

    #[test]
    fn name_validation() {
        assert_eq!(StreamName::new(""), Err(StreamError::InvalidName("empty")));
        assert!(StreamName::new("/a").is_err());
        assert!(StreamName::new("a/").is_err());
        assert!(StreamName::new("a b").is_err());
        assert!(StreamName::new("a\u{7}").is_err());
        assert!(StreamName::new("x".repeat(257)).is_err());
        assert!(StreamName::new("x".repeat(256)).is_ok());
        assert!(StreamName::new("conf/room-1/alice").is_ok());
        assert!(StreamName::new("~x").is_err());
    }

    #[test]
    fn hashed_ref_format() {
        assert!(HashedName::parse("h:abc").is_err());
        assert!(HashedName::parse(&format!("h:{}", "A".repeat(64))).is_err());
        assert!(HashedName::parse(&format!("x:{}", "a".repeat(64))).is_err());
        assert!(StreamRef::parse(&format!("h:{}", "0".repeat(64)))
            .unwrap()
            .is_hashed());
        assert_eq!(StreamRef::parse("~").unwrap(), StreamRef::Control);
    }

    #[test]
    fn publisher_slot() {
        let mut r = rec();
        assert_eq!(r.attach_publisher(&ep("A")), Ok(Change::Applied));
        assert_eq!(r.status, StreamStatus::Live);
        assert_eq!(r.attach_publisher(&ep("A")), Ok(Change::Unchanged));
        assert!(matches!(
            r.attach_publisher(&ep("B")),
            Err(StreamError::PublisherConflict { .. })
        ));
        assert_eq!(r.publisher, Some(ep("A")));
        r.check().unwrap();
    }

    #[test]
    fn pending_subscribers_survive_publisher() {
        let mut r = rec();
        r.attach_subscriber(&ep("S1"));
        assert_eq!(r.status, StreamStatus::Idle);
        r.attach_publisher(&ep("A")).unwrap();
        r.attach_subscriber(&ep("S2"));
        r.tracks.push(TrackDescriptor::video());
        assert_eq!(r.detach(&ep("A")), Detached::Publisher);
        assert_eq!(r.status, StreamStatus::Idle);
        assert!(r.tracks.is_empty());
        assert_eq!(r.subscribers.len(), 2);
        assert_eq!(r.attach_subscriber(&ep("S1")), Change::Unchanged);
        assert_eq!(r.detach(&ep("nobody")), Detached::Nothing);
        r.attach_publisher(&ep("A")).unwrap();
        assert_eq!(r.status, StreamStatus::Live);
        r.check().unwrap();
    }

    #[test]
    fn attach_detach_round_trip() {
        let base = {
            let mut r = rec();
            r.attach_subscriber(&ep("S1"));
            r
        };
        let mut r = base.clone();
        r.attach_subscriber(&ep("fresh"));
        r.detach(&ep("fresh"));
        assert_eq!(r, base);
        let mut r = base.clone();
        r.attach_publisher(&ep("fresh")).unwrap();
        r.detach(&ep("fresh"));
        assert_eq!(r, base);
    }

    #[test]
    fn track_merge_rejects_duplicates() {
        let mut list = vec![TrackDescriptor::audio()];
        assert!(merge_tracks(&mut list, &[TrackDescriptor::audio()]).is_err());
        assert!(merge_tracks(
            &mut list,
            &[TrackDescriptor::video(), TrackDescriptor::video()]
        )
        .is_err());
        assert_eq!(list.len(), 1);
        merge_tracks(&mut list, &[TrackDescriptor::video()]).unwrap();
        assert_eq!(
            drop_tracks(&mut list, &["screen".into()]),
            Err(StreamError::TrackUnknown("screen".into()))
        );
        drop_tracks(&mut list, &["audio".into()]).unwrap();
        assert_eq!(list, vec![TrackDescriptor::video()]);
    }
}
