use std::fmt;

use serde::Serialize;

use super::media::MediaFrame;
use crate::stream::{EndpointId, StreamRef, TrackDescriptor};
use crate::wire::SignalEnvelope;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize)]
#[serde(rename_all = "kebab-case")]
pub enum LinkState {
    New,
    OfferSent,
    OfferReceived,
    Connected,
    Closed,
}

impl LinkState {
    pub fn can_move_to(self, next: LinkState) -> bool {
        use LinkState::*;
        matches!(
            (self, next),
            (New, OfferSent)
                | (New, OfferReceived)
                | (OfferSent, Connected)
                | (OfferReceived, Connected)
                | (New | OfferSent | OfferReceived | Connected, Closed)
        )
    }
}

impl fmt::Display for LinkState {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            Self::New => "new",
            Self::OfferSent => "offer-sent",
            Self::OfferReceived => "offer-received",
            Self::Connected => "connected",
            Self::Closed => "closed",
        })
    }
}

/// One simulated peer connection.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PeerLink {
    pub link_id: String,
    pub state: LinkState,
    pub counterpart: EndpointId,
    pub negotiated_tracks: Vec<TrackDescriptor>,
    /// Stream reference as the counterpart knows it; stamped on frames.
    pub stream_ref: StreamRef,
    /// Owned by a connector and shared by several sessions (star topology).
    pub shared: bool,
}

impl PeerLink {
    pub fn new(link_id: String, counterpart: EndpointId, stream_ref: StreamRef) -> Self {
        Self {
            link_id,
            state: LinkState::New,
            counterpart,
            negotiated_tracks: Vec::new(),
            stream_ref,
            shared: false,
        }
    }

    pub fn is_connected(&self) -> bool {
        self.state == LinkState::Connected
    }

    pub fn is_open(&self) -> bool {
        self.state != LinkState::Closed
    }

    /// Applies a transition, rejecting anything outside the link lifecycle.
    pub fn advance(&mut self, next: LinkState) -> Result<(), (LinkState, LinkState)> {
        if self.state.can_move_to(next) {
            self.state = next;
            Ok(())
        } else {
            Err((self.state, next))
        }
    }
}

/// What travels over a connected link: media frames and in-band channel
/// messages (TEXT and PAUSE_HINT envelopes), in order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum LinkItem {
    Frame(MediaFrame),
    Channel(SignalEnvelope),
}

impl LinkItem {
    /// Line form used on star transports and in transcripts.
    pub fn to_line(&self) -> String {
        match self {
            Self::Frame(f) => f.to_line(),
            Self::Channel(env) => env.encode().unwrap_or_default(),
        }
    }

    pub fn from_line(line: &str) -> Option<Self> {
        if MediaFrame::is_frame_line(line) {
            MediaFrame::from_line(line).map(Self::Frame)
        } else {
            SignalEnvelope::decode_str(line).ok().map(Self::Channel)
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use LinkState::*;

    #[test]
    fn only_lifecycle_transitions_are_legal() {
        let all = [New, OfferSent, OfferReceived, Connected, Closed];
        let legal: Vec<_> = all
            .iter()
            .flat_map(|a| all.iter().map(move |b| (*a, *b)))
            .filter(|(a, b)| a.can_move_to(*b))
            .collect();
        assert_eq!(
            legal,
            vec![
                (New, OfferSent),
                (New, OfferReceived),
                (New, Closed),
                (OfferSent, Connected),
                (OfferSent, Closed),
                (OfferReceived, Connected),
                (OfferReceived, Closed),
                (Connected, Closed),
            ]
        );
    }
}
