//! Simulated media plane: frames, sources that generate them and sinks that
//! record what arrived.

use std::collections::{BTreeMap, VecDeque};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::stream::{StreamRef, TrackDescriptor, TrackKind};

pub const FRAME_INTERVAL_MS: u64 = 50;
pub const FRAME_BYTES: usize = 256;
/// Recent frames kept per track in a sink.
pub const SINK_BUFFER: usize = 64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MediaFrame {
    pub stream: StreamRef,
    pub track_label: String,
    pub seq: u64,
    /// Capture time at the origin; relays keep it.
    pub ts_ms: u64,
    pub payload: Vec<u8>,
    pub sealed: bool,
}

#[derive(Serialize, Deserialize)]
struct FrameLineBody {
    stream: String,
    track: String,
    seq: u64,
    ts: u64,
    sealed: bool,
    payload: String,
}

#[derive(Serialize, Deserialize)]
struct FrameLine {
    frame: FrameLineBody,
}

impl MediaFrame {
    /// `{"frame":{...}}` line with a base64 payload.
    pub fn to_line(&self) -> String {
        serde_json::to_string(&FrameLine {
            frame: FrameLineBody {
                stream: self.stream.as_str().to_string(),
                track: self.track_label.clone(),
                seq: self.seq,
                ts: self.ts_ms,
                sealed: self.sealed,
                payload: B64.encode(&self.payload),
            },
        })
        .expect("frame serializes")
    }

    pub fn from_line(line: &str) -> Option<Self> {
        let FrameLine { frame } = serde_json::from_str(line.trim_end()).ok()?;
        Some(Self {
            stream: StreamRef::parse(&frame.stream).ok()?,
            track_label: frame.track,
            seq: frame.seq,
            ts_ms: frame.ts,
            payload: B64.decode(frame.payload).ok()?,
            sealed: frame.sealed,
        })
    }

    pub fn is_frame_line(line: &str) -> bool {
        line.starts_with(r#"{"frame":"#)
    }

    pub fn digest(&self) -> u64 {
        payload_digest(&self.payload)
    }
}

pub fn payload_digest(payload: &[u8]) -> u64 {
    let d = Sha256::digest(payload);
    u64::from_be_bytes(d[..8].try_into().expect("8 bytes"))
}

/// A captured frame before it is stamped for a particular stream/link.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct RawFrame {
    pub track_label: String,
    pub ts_ms: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone)]
pub enum SourceKind {
    /// Seeded pseudorandom payloads at the fixed frame rate.
    Synthetic { seed: u64 },
    /// Frames read from a file, played once at the fixed frame rate.
    Replay { frames: BTreeMap<String, VecDeque<Vec<u8>>> },
    /// Frames pushed in from another session (fork / republish).
    Input { upstream: String },
}

#[derive(Debug, Clone)]
pub struct MediaSource {
    kind: SourceKind,
    tracks: Vec<TrackDescriptor>,
    rngs: BTreeMap<String, ChaCha8Rng>,
    next_tick: Option<u64>,
}

impl MediaSource {
    pub fn synthetic(seed: u64, tracks: Vec<TrackDescriptor>) -> Self {
        let mut src = Self {
            kind: SourceKind::Synthetic { seed },
            tracks: Vec::new(),
            rngs: BTreeMap::new(),
            next_tick: None,
        };
        src.add_tracks(&tracks);
        src
    }

    pub fn audio_video(seed: u64) -> Self {
        Self::synthetic(seed, vec![TrackDescriptor::audio(), TrackDescriptor::video()])
    }

    pub fn input(upstream: impl Into<String>, tracks: Vec<TrackDescriptor>) -> Self {
        Self {
            kind: SourceKind::Input {
                upstream: upstream.into(),
            },
            tracks,
            rngs: BTreeMap::new(),
            next_tick: None,
        }
    }

    /// Replay file: one frame per line, `<kind>:<label> <hex payload>`.
    /// Track order follows first appearance.
    pub fn replay_text(text: &str) -> Result<Self, String> {
        let mut tracks: Vec<TrackDescriptor> = Vec::new();
        let mut frames: BTreeMap<String, VecDeque<Vec<u8>>> = BTreeMap::new();
        for (n, line) in text.lines().enumerate() {
            let line = line.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let (track, hex) = line
                .split_once(' ')
                .ok_or_else(|| format!("line {}: expected `<kind>:<label> <hex>`", n + 1))?;
            let (kind, label) = track
                .split_once(':')
                .ok_or_else(|| format!("line {}: track must be `<kind>:<label>`", n + 1))?;
            let kind: TrackKind = kind.parse().map_err(|e| format!("line {}: {e}", n + 1))?;
            let payload = hex::decode(hex.trim()).map_err(|e| format!("line {}: {e}", n + 1))?;
            if !tracks.iter().any(|t| t.label == label) {
                tracks.push(TrackDescriptor::new(kind, label));
            }
            frames.entry(label.to_string()).or_default().push_back(payload);
        }
        if tracks.is_empty() {
            return Err("replay file has no frames".into());
        }
        Ok(Self {
            kind: SourceKind::Replay { frames },
            tracks,
            rngs: BTreeMap::new(),
            next_tick: None,
        })
    }

    pub fn replay_file(path: &Path) -> Result<Self, String> {
        let text = std::fs::read_to_string(path).map_err(|e| format!("{}: {e}", path.display()))?;
        Self::replay_text(&text)
    }

    pub fn kind(&self) -> &SourceKind {
        &self.kind
    }

    pub fn tracks(&self) -> &[TrackDescriptor] {
        &self.tracks
    }

    pub fn upstream(&self) -> Option<&str> {
        match &self.kind {
            SourceKind::Input { upstream } => Some(upstream),
            _ => None,
        }
    }

    pub fn add_tracks(&mut self, tracks: &[TrackDescriptor]) {
        for t in tracks {
            if let SourceKind::Synthetic { seed } = self.kind {
                let mut h = Sha256::new();
                h.update(seed.to_be_bytes());
                h.update(t.label.as_bytes());
                let seed: [u8; 32] = h.finalize().into();
                self.rngs.insert(t.label.clone(), ChaCha8Rng::from_seed(seed));
            }
            self.tracks.push(t.clone());
        }
    }

    pub fn remove_tracks(&mut self, labels: &[String]) {
        self.tracks.retain(|t| !labels.contains(&t.label));
        self.rngs.retain(|l, _| !labels.contains(l));
    }

    /// Frames due at `now`: one per track for every frame interval since
    /// the previous call. Pushed-input sources produce nothing here.
    pub fn poll(&mut self, now: u64) -> Vec<RawFrame> {
        if matches!(self.kind, SourceKind::Input { .. }) {
            return Vec::new();
        }
        let first = *self.next_tick.get_or_insert(now);
        let mut out = Vec::new();
        let mut tick = first;
        while tick <= now {
            for t in &self.tracks {
                let payload = match &mut self.kind {
                    SourceKind::Synthetic { .. } => {
                        let rng = self.rngs.get_mut(&t.label).expect("rng per track");
                        let mut buf = vec![0u8; FRAME_BYTES];
                        rng.fill_bytes(&mut buf);
                        Some(buf)
                    }
                    SourceKind::Replay { frames } => {
                        frames.get_mut(&t.label).and_then(VecDeque::pop_front)
                    }
                    SourceKind::Input { .. } => None,
                };
                if let Some(payload) = payload {
                    out.push(RawFrame {
                        track_label: t.label.clone(),
                        ts_ms: tick,
                        payload,
                    });
                }
            }
            tick += FRAME_INTERVAL_MS;
        }
        self.next_tick = Some(tick);
        out
    }

    /// Restart the frame clock (after a pause the source does not catch up).
    pub fn resync(&mut self) {
        self.next_tick = None;
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct FrameMeta {
    pub seq: u64,
    pub ts_ms: u64,
    pub digest: u64,
    pub at_ms: u64,
}

/// Records frames handed to the renderer.
#[derive(Debug, Clone, Default)]
pub struct MediaSink {
    history: BTreeMap<String, Vec<FrameMeta>>,
    recent: BTreeMap<String, VecDeque<MediaFrame>>,
}

impl MediaSink {
    pub fn record(&mut self, frame: MediaFrame, at_ms: u64) {
        self.history
            .entry(frame.track_label.clone())
            .or_default()
            .push(FrameMeta {
                seq: frame.seq,
                ts_ms: frame.ts_ms,
                digest: frame.digest(),
                at_ms,
            });
        let buf = self.recent.entry(frame.track_label.clone()).or_default();
        if buf.len() == SINK_BUFFER {
            buf.pop_front();
        }
        buf.push_back(frame);
    }

    pub fn history(&self, track: &str) -> &[FrameMeta] {
        self.history.get(track).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn tracks(&self) -> impl Iterator<Item = &str> {
        self.history.keys().map(String::as_str)
    }

    pub fn count(&self, track: &str) -> usize {
        self.history(track).len()
    }

    pub fn total(&self) -> usize {
        self.history.values().map(Vec::len).sum()
    }

    pub fn recent(&self, track: &str) -> impl Iterator<Item = &MediaFrame> {
        self.recent.get(track).into_iter().flatten()
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn synthetic_is_reproducible_and_per_track() {
        let mut a = MediaSource::audio_video(7);
        let mut b = MediaSource::audio_video(7);
        let fa = a.poll(0);
        assert_eq!(fa.len(), 2);
        assert_eq!(fa, b.poll(0));
        assert_ne!(fa[0].payload, fa[1].payload);
        assert_eq!(fa[0].payload.len(), FRAME_BYTES);
        // 20 frames per second per track
        assert_eq!(a.poll(1000).len(), 2 * 20);
        assert!(a.poll(1010).is_empty());
    }

    #[test]
    fn replay_plays_once_in_order() {
        let mut src = MediaSource::replay_text("video:cam 0102\nvideo:cam 0304\naudio:mic ff\n").unwrap();
        assert_eq!(src.tracks().len(), 2);
        let first = src.poll(0);
        assert_eq!(first.len(), 2);
        assert_eq!(first[0].payload, vec![1, 2]);
        let second = src.poll(50);
        assert_eq!(second.len(), 1);
        assert_eq!(second[0].payload, vec![3, 4]);
        assert!(src.poll(500).is_empty());
        assert!(MediaSource::replay_text("bogus").is_err());
    }

    #[test]
    fn frame_line_round_trip() {
        let f = MediaFrame {
            stream: StreamRef::parse("a/b").unwrap(),
            track_label: "video".into(),
            seq: 4,
            ts_ms: 200,
            payload: vec![0, 1, 2, 255],
            sealed: true,
        };
        let line = f.to_line();
        assert!(MediaFrame::is_frame_line(&line));
        assert_eq!(MediaFrame::from_line(&line), Some(f));
    }

    #[test]
    fn sink_keeps_bounded_recent_buffer() {
        let mut sink = MediaSink::default();
        for seq in 0..100 {
            sink.record(
                MediaFrame {
                    stream: StreamRef::parse("s").unwrap(),
                    track_label: "video".into(),
                    seq,
                    ts_ms: seq * 50,
                    payload: vec![seq as u8],
                    sealed: false,
                },
                seq,
            );
        }
        assert_eq!(sink.count("video"), 100);
        assert_eq!(sink.recent("video").count(), SINK_BUFFER);
        assert_eq!(sink.recent("video").next().unwrap().seq, 36);
    }
}
