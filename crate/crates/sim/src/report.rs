//! Topology and transcript reports over a finished (or paused) world.

use std::collections::{BTreeMap, BTreeSet};

use namedstream_core::endpoint::LinkState;
use namedstream_core::{hash_name, EndpointSession, Role, StreamName, StreamRef};
use serde::Serialize;

use crate::scenario::{Expect, LinkKind, Scenario};
use crate::world::{Entry, Logged, World};

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct StreamView {
    pub publisher: Option<String>,
    pub subscribers: Vec<String>,
    pub status: &'static str,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct LinkRow {
    pub id: String,
    pub kind: &'static str,
    pub state: String,
    pub sessions: Vec<String>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize)]
pub struct FrameCounts {
    pub emitted: u64,
    pub sent: u64,
    pub delivered: u64,
    pub dropped: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Assertion {
    pub at: u64,
    pub expect: String,
    pub pass: bool,
    pub detail: String,
}

#[derive(Debug, Clone, Serialize)]
pub struct TopologyReport {
    pub seed: u64,
    pub connector: String,
    pub end_ms: u64,
    pub streams: BTreeMap<String, StreamView>,
    pub mesh_links: usize,
    pub star_links: usize,
    pub total_links: usize,
    pub links: Vec<LinkRow>,
    pub frames: BTreeMap<String, BTreeMap<String, FrameCounts>>,
    pub integrity_errors: BTreeMap<String, u64>,
    /// Violations of delivered + dropped <= frames the stream's publishers
    /// emitted, per subscriber and track. Empty when consistent.
    pub inconsistencies: Vec<String>,
    pub webhooks: usize,
    pub assertions: Vec<Assertion>,
    /// Normalized event sequence per session.
    pub logs: BTreeMap<String, Vec<String>>,
}

impl TopologyReport {
    pub fn passed(&self) -> bool {
        self.assertions.iter().all(|a| a.pass) && self.inconsistencies.is_empty()
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// One log entry as text, the form expectations match against.
pub fn describe(e: &Entry) -> String {
    match e {
        Entry::Media { track, .. } => format!("media {track}"),
        Entry::Message { text, .. } => format!("message {text}"),
        Entry::Tracks { tracks } if tracks.is_empty() => "tracks none".into(),
        Entry::Tracks { tracks } => format!("tracks {}", tracks.join(",")),
        Entry::LinkUp { .. } => "link-up".into(),
        Entry::LinkDown { .. } => "link-down".into(),
        Entry::PublisherLive => "publisher-live".into(),
        Entry::PeerGone => "peer-gone".into(),
        Entry::Hint { hint } => format!("hint {hint}"),
        Entry::Changed { property, value } => format!("{property} {}", value.to_lowercase()),
        Entry::Error { error } => format!("error {error}"),
    }
}

/// What the application on top of a session observes, with timing, link
/// churn and property changes dropped and each run of frames folded into
/// one `media <tracks>` entry. Errors are kept.
pub fn normalized(log: &[Logged], role_is_publisher: bool) -> Vec<String> {
    let mut out = Vec::new();
    let mut run: BTreeSet<String> = BTreeSet::new();
    let close = |run: &mut BTreeSet<String>, out: &mut Vec<String>| {
        if !run.is_empty() {
            out.push(format!("media {}", run.iter().cloned().collect::<Vec<_>>().join(",")));
            run.clear();
        }
    };
    for l in log {
        match &l.entry {
            Entry::Media { track, .. } => {
                if !role_is_publisher {
                    run.insert(track.clone());
                }
            }
            Entry::LinkUp { .. } | Entry::LinkDown { .. } | Entry::Changed { .. } => {}
            other => {
                close(&mut run, &mut out);
                out.push(describe(other));
            }
        }
    }
    close(&mut run, &mut out);
    out
}

/// Every session in the world, including ones connectors created.
pub fn all_sessions(world: &World) -> Vec<&EndpointSession> {
    let mut out = Vec::new();
    for h in world.hosts() {
        out.extend(h.sessions.values());
        for c in h.connectors.values() {
            out.extend(c.inner_sessions());
        }
    }
    out
}

/// Raw names behind the digests seen in the world.
fn hash_index(world: &World) -> BTreeMap<String, String> {
    let mut names = BTreeSet::new();
    for s in all_sessions(world) {
        if let Some(n) = s.stream_name() {
            names.insert(n.to_string());
        }
    }
    for h in world.hosts() {
        for set in h.history.values() {
            for item in set {
                if let Some((_, n)) = item.split_once(':') {
                    names.insert(n.to_string());
                }
            }
        }
    }
    names
        .into_iter()
        .filter_map(|n| StreamName::new(n.clone()).ok().map(|sn| (hash_name(&sn).to_string(), n)))
        .collect()
}

fn resolve(r: &StreamRef, index: &BTreeMap<String, String>) -> String {
    match r {
        StreamRef::Hashed(h) => index.get(h.as_str()).cloned().unwrap_or_else(|| h.to_string()),
        other => other.to_string(),
    }
}

pub fn resolve_name(text: &str, index: &BTreeMap<String, String>) -> String {
    index.get(text).cloned().unwrap_or_else(|| text.to_string())
}

pub fn streams(world: &World) -> BTreeMap<String, StreamView> {
    let index = hash_index(world);
    let mut out: BTreeMap<String, StreamView> = BTreeMap::new();
    for s in all_sessions(world) {
        let Some(r) = s.stream() else {
            continue;
        };
        let view = out.entry(resolve(r, &index)).or_insert(StreamView {
            publisher: None,
            subscribers: Vec::new(),
            status: "idle",
        });
        match s.role() {
            Role::Publisher => {
                view.publisher = Some(s.label().to_string());
                view.status = "live";
            }
            Role::Subscriber => view.subscribers.push(s.label().to_string()),
            Role::Unset => {}
        }
    }
    out
}

pub fn link_rows(world: &World) -> Vec<LinkRow> {
    let mut mesh: BTreeMap<String, (LinkState, Vec<String>)> = BTreeMap::new();
    for s in all_sessions(world) {
        for l in s.links().iter().filter(|l| !l.shared) {
            let e = mesh.entry(l.link_id.clone()).or_insert((l.state, Vec::new()));
            // a link is only as far along as its less advanced end
            if l.state != LinkState::Connected {
                e.0 = l.state;
            }
            e.1.push(s.label().to_string());
        }
    }
    let mut star: BTreeMap<String, (LinkState, Vec<String>)> = BTreeMap::new();
    for h in world.hosts() {
        for c in h.connectors.values() {
            for (id, state) in c.transport_links() {
                let e = star.entry(id.clone()).or_insert((state, Vec::new()));
                for (label, s) in &h.sessions {
                    if s.links().iter().any(|l| l.shared && l.link_id == id) {
                        e.1.push(label.clone());
                    }
                }
            }
        }
    }
    let row = |kind, (id, (state, sessions)): (String, (LinkState, Vec<String>))| LinkRow {
        id,
        kind,
        state: state.to_string(),
        sessions,
    };
    mesh.into_iter()
        .map(|e| row("mesh", e))
        .chain(star.into_iter().map(|e| row("star", e)))
        .collect()
}

/// (mesh, star) counts of connected links.
pub fn link_counts(world: &World) -> (usize, usize) {
    let rows = link_rows(world);
    let up = |kind: &str| {
        rows.iter()
            .filter(|r| r.kind == kind && r.state == LinkState::Connected.to_string())
            .count()
    };
    (up("mesh"), up("star"))
}

fn counts(s: &EndpointSession) -> BTreeMap<String, FrameCounts> {
    let st = s.stats();
    let mut out: BTreeMap<String, FrameCounts> = BTreeMap::new();
    for (t, n) in &st.frames_emitted {
        out.entry(t.clone()).or_default().emitted = *n;
    }
    for (t, n) in &st.frames_sent {
        out.entry(t.clone()).or_default().sent = *n;
    }
    for (t, n) in &st.frames_delivered {
        out.entry(t.clone()).or_default().delivered = *n;
    }
    for (t, n) in &st.frames_dropped {
        out.entry(t.clone()).or_default().dropped = *n;
    }
    out
}

fn consistency(world: &World) -> Vec<String> {
    let index = hash_index(world);
    // emitted per (stream, track) over every session that published it
    let mut emitted: BTreeMap<(String, String), u64> = BTreeMap::new();
    let mut receivers: Vec<(String, BTreeSet<String>, BTreeMap<String, FrameCounts>)> = Vec::new();
    for h in world.hosts() {
        for (label, set) in &h.history {
            let Some(s) = h.sessions.get(label) else {
                continue;
            };
            let c = counts(s);
            let mut subs = BTreeSet::new();
            for item in set {
                match item.split_once(':') {
                    Some(("pub", name)) => {
                        for (t, fc) in &c {
                            *emitted.entry((name.to_string(), t.clone())).or_default() += fc.emitted;
                        }
                    }
                    Some(("sub", r)) => {
                        subs.insert(resolve_name(r, &index));
                    }
                    _ => {}
                }
            }
            if !subs.is_empty() {
                receivers.push((label.clone(), subs, c));
            }
        }
    }
    let mut bad = Vec::new();
    for (label, subs, c) in receivers {
        for (t, fc) in c {
            let bound: u64 = subs
                .iter()
                .map(|n| emitted.get(&(n.clone(), t.clone())).copied().unwrap_or(0))
                .sum();
            if fc.delivered + fc.dropped > bound {
                bad.push(format!(
                    "{label} {t}: delivered {} + dropped {} > emitted {bound}",
                    fc.delivered, fc.dropped
                ));
            }
        }
    }
    bad
}

/// Entries of `who`: one session, or every session of a host in time order.
pub fn entries<'a>(world: &'a World, who: &str) -> Vec<&'a Logged> {
    if who.contains('@') {
        return world.log(who).iter().collect();
    }
    let Some(h) = world.host(who) else {
        return Vec::new();
    };
    let mut all: Vec<&Logged> = h.logs.values().flatten().collect();
    all.sort_by_key(|l| l.at);
    all
}

fn session_count(world: &World, who: &str, track: &str) -> u64 {
    let pick = |s: &EndpointSession| {
        let st = s.stats();
        let map = if s.role() == Role::Publisher || st.frames_delivered.is_empty() && !st.frames_emitted.is_empty() {
            &st.frames_emitted
        } else {
            &st.frames_delivered
        };
        map.get(track).copied().unwrap_or(0)
    };
    if who.contains('@') {
        return world.session(who).map(pick).unwrap_or(0);
    }
    world
        .host(who)
        .map(|h| h.sessions.values().map(pick).sum())
        .unwrap_or(0)
}

pub fn check(world: &World, at: u64, e: &Expect) -> Assertion {
    let (pass, detail) = match e {
        Expect::LinkCount { n, kind } => {
            let (mesh, star) = link_counts(world);
            let got = match kind {
                LinkKind::Mesh => mesh,
                LinkKind::Star => star,
                LinkKind::Total => mesh + star,
            };
            (got == *n, format!("mesh {mesh}, star {star}"))
        }
        Expect::StreamStatus { stream, live } => {
            let status = streams(world).get(stream).map(|v| v.status).unwrap_or("idle");
            (status == if *live { "live" } else { "idle" }, format!("status {status}"))
        }
        Expect::TranscriptContains { who, text } => {
            let found = entries(world, who).iter().any(|l| describe(&l.entry).contains(text.as_str()));
            (found, if found { "found".into() } else { "not found".into() })
        }
        Expect::FrameCountRange { who, track, min, max } => {
            let n = session_count(world, who, track);
            (n >= *min && n <= *max, format!("{n} frames"))
        }
        Expect::TranscriptOrder { who, first, then } => {
            let list = entries(world, who);
            let pos = |text: &str| list.iter().position(|l| describe(&l.entry).contains(text));
            match (pos(first), pos(then)) {
                (Some(a), Some(b)) => (a < b, format!("positions {a} and {b}")),
                (a, b) => (false, format!("missing: first {a:?}, then {b:?}")),
            }
        }
    };
    Assertion {
        at,
        expect: e.to_string(),
        pass,
        detail,
    }
}

pub fn build(world: &World, s: &Scenario, assertions: Vec<Assertion>) -> TopologyReport {
    let (mesh, star) = link_counts(world);
    let mut frames = BTreeMap::new();
    let mut integrity = BTreeMap::new();
    let mut logs = BTreeMap::new();
    for sess in all_sessions(world) {
        let c = counts(sess);
        if !c.is_empty() {
            frames.insert(sess.label().to_string(), c);
        }
        if sess.stats().integrity_errors > 0 {
            integrity.insert(sess.label().to_string(), sess.stats().integrity_errors);
        }
    }
    for h in world.hosts() {
        for (label, log) in &h.logs {
            let publisher = h
                .history
                .get(label)
                .is_some_and(|set| set.iter().any(|i| i.starts_with("pub:")));
            logs.insert(label.clone(), normalized(log, publisher));
        }
    }
    TopologyReport {
        seed: s.seed,
        connector: s.connector.clone(),
        end_ms: s.end_ms,
        streams: streams(world),
        mesh_links: mesh,
        star_links: star,
        total_links: mesh + star,
        links: link_rows(world),
        frames,
        integrity_errors: integrity,
        inconsistencies: consistency(world),
        webhooks: world.webhooks().len(),
        assertions,
        logs,
    }
}
