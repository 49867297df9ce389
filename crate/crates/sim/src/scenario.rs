//! Line-oriented scenario scripts.
//!
//! ```text
//! # two endpoints on the broker
//! seed 7
//! connector broker
//! latency 1 20
//! end 3000
//! at 0 alice spawn
//! at 0 bob spawn
//! at 10 alice publish cam/1 tracks=audio:mic,video:cam autopause
//! at 20 bob subscribe cam/1
//! at 500 bob send cam/1 "hello there"
//! at 2000 * expect link-count 1 mesh
//! ```
//!
//! Header lines (`seed`, `connector`, `latency`, `end`, `capture`) may come
//! in any order before or between steps. Steps run in time order; steps
//! with the same time run in file order.

use std::fmt;
use std::path::PathBuf;

use namedstream_core::TrackDescriptor;
use thiserror::Error;

use crate::world::{parse_tracks, Latency, PublishReq, SubscribeReq};

#[derive(Debug, Clone, PartialEq, Eq, Error)]
#[error("line {line}: {msg}")]
pub struct ScenarioError {
    pub line: usize,
    pub msg: String,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum LinkKind {
    Mesh,
    Star,
    Total,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Expect {
    LinkCount { n: usize, kind: LinkKind },
    StreamStatus { stream: String, live: bool },
    /// Some entry of the normalized log of `who` (a session label, or a
    /// host for all its sessions) contains `text`.
    TranscriptContains { who: String, text: String },
    /// Frames delivered to a subscriber (or emitted by a publisher).
    FrameCountRange {
        who: String,
        track: String,
        min: u64,
        max: u64,
    },
    /// The first entry containing `first` comes before the first
    /// containing `then`.
    TranscriptOrder {
        who: String,
        first: String,
        then: String,
    },
}

#[derive(Debug, Clone)]
pub enum Action {
    Spawn { connector: Option<String> },
    Publish(PublishReq),
    Subscribe(SubscribeReq),
    Stop { stream: Option<String> },
    Send { stream: Option<String>, text: String },
    Pause { stream: Option<String> },
    Resume { stream: Option<String> },
    AddTracks { stream: String, tracks: Vec<TrackDescriptor> },
    RemoveTracks { stream: String, labels: Vec<String> },
    DropTransport,
    Restart { service: String, down_ms: u64 },
    Expect(Expect),
}

#[derive(Debug, Clone)]
pub struct Step {
    pub at: u64,
    pub actor: String,
    pub action: Action,
}

#[derive(Debug, Clone)]
pub struct Scenario {
    pub seed: u64,
    pub connector: String,
    pub latency: Latency,
    pub end_ms: u64,
    pub capture: bool,
    pub steps: Vec<Step>,
}

impl Default for Scenario {
    fn default() -> Self {
        Self {
            seed: 0,
            connector: "mem".into(),
            latency: Latency::default(),
            end_ms: 5_000,
            capture: false,
            steps: Vec::new(),
        }
    }
}

/// Hosts addressed as `*` are the world itself.
pub const WORLD: &str = "*";

impl Scenario {
    pub fn new(connector: impl Into<String>, seed: u64) -> Self {
        Self {
            seed,
            connector: connector.into(),
            ..Self::default()
        }
    }

    pub fn at(&mut self, at: u64, actor: &str, action: Action) -> &mut Self {
        self.steps.push(Step {
            at,
            actor: actor.to_string(),
            action,
        });
        self
    }

    pub fn expect(&mut self, at: u64, e: Expect) -> &mut Self {
        self.at(at, WORLD, Action::Expect(e))
    }

    /// Steps in execution order.
    pub fn ordered(&self) -> Vec<&Step> {
        let mut steps: Vec<&Step> = self.steps.iter().collect();
        steps.sort_by_key(|s| s.at);
        steps
    }

    /// Hosts must be spawned before they act.
    pub fn validate(&self) -> Result<(), ScenarioError> {
        let mut spawned = std::collections::BTreeSet::new();
        for (i, step) in self.ordered().into_iter().enumerate() {
            let err = |msg: String| ScenarioError { line: i + 1, msg };
            match &step.action {
                Action::Spawn { .. } => {
                    if step.actor == WORLD || !spawned.insert(step.actor.clone()) {
                        return Err(err(format!("`{}` spawned twice or reserved", step.actor)));
                    }
                }
                Action::Expect(_) | Action::Restart { .. } => {}
                _ => {
                    if !spawned.contains(&step.actor) {
                        return Err(err(format!("`{}` acts before it is spawned", step.actor)));
                    }
                }
            }
        }
        Ok(())
    }

    pub fn parse(text: &str) -> Result<Self, ScenarioError> {
        let mut s = Scenario::default();
        for (i, raw) in text.lines().enumerate() {
            let n = i + 1;
            let err = |msg: String| ScenarioError { line: n, msg };
            let line = raw.trim();
            if line.is_empty() || line.starts_with('#') {
                continue;
            }
            let words = shlex::split(line).ok_or_else(|| err("unbalanced quotes".into()))?;
            let w: Vec<&str> = words.iter().map(String::as_str).collect();
            match w.as_slice() {
                ["seed", v] => s.seed = num(v).map_err(err)?,
                ["connector", v] => s.connector = v.to_string(),
                ["end", v] => s.end_ms = num(v).map_err(err)?,
                ["capture"] => s.capture = true,
                ["latency", v] => {
                    let ms = num(v).map_err(err)?;
                    s.latency = Latency { min: ms, max: ms };
                }
                ["latency", a, b] => {
                    let (min, max) = (num(a).map_err(err)?, num(b).map_err(err)?);
                    if min > max {
                        return Err(err(format!("latency {min} > {max}")));
                    }
                    s.latency = Latency { min, max };
                }
                ["at", at, actor, action, args @ ..] => {
                    let at = num(at).map_err(err)?;
                    let action = parse_action(action, args).map_err(err)?;
                    s.steps.push(Step {
                        at,
                        actor: actor.to_string(),
                        action,
                    });
                }
                _ => return Err(err(format!("cannot read `{line}`"))),
            }
        }
        s.validate()?;
        Ok(s)
    }
}

fn num(v: &str) -> Result<u64, String> {
    v.parse().map_err(|_| format!("`{v}` is not a number"))
}

/// Splits `key=value` options from positional words.
fn options<'a>(args: &[&'a str]) -> (Vec<&'a str>, Vec<(&'a str, &'a str)>) {
    let mut pos = Vec::new();
    let mut opts = Vec::new();
    for a in args {
        match a.split_once('=') {
            Some((k, v)) if !k.is_empty() && !k.contains(' ') => opts.push((k, v)),
            _ => pos.push(*a),
        }
    }
    (pos, opts)
}

fn one<'a>(pos: &[&'a str], what: &str) -> Result<&'a str, String> {
    match pos {
        [x] => Ok(x),
        _ => Err(format!("{what} takes one argument")),
    }
}

fn optional<'a>(pos: &[&'a str], what: &str) -> Result<Option<&'a str>, String> {
    match pos {
        [] => Ok(None),
        [x] => Ok(Some(x)),
        _ => Err(format!("{what} takes at most one argument")),
    }
}

fn parse_action(action: &str, args: &[&str]) -> Result<Action, String> {
    let (pos, opts) = options(args);
    let unknown = |k: &str| Err(format!("{action}: unknown option `{k}`"));
    Ok(match action {
        "spawn" => {
            let mut connector = None;
            for (k, v) in opts {
                match k {
                    "connector" => connector = Some(v.to_string()),
                    _ => return unknown(k),
                }
            }
            Action::Spawn { connector }
        }
        "publish" => {
            let flag = pos.contains(&"autopause");
            let pos: Vec<&str> = pos.into_iter().filter(|p| *p != "autopause").collect();
            let mut req = PublishReq {
                stream: one(&pos, "publish")?.to_string(),
                autopause: flag,
                ..PublishReq::default()
            };
            for (k, v) in opts {
                match k {
                    "via" => req.via = Some(v.into()),
                    "tracks" => req.tracks = Some(parse_tracks(v).map_err(|e| e.to_string())?),
                    "secret" => req.secret = Some(v.into()),
                    "input" => req.input = Some(v.into()),
                    "replay" => req.replay = Some(PathBuf::from(v)),
                    "ping" => req.ping = Some(v.into()),
                    "autopause" => req.autopause = v == "on" || v == "true",
                    "split" => {
                        for child in v.split(',') {
                            let (spec, stream) = child
                                .rsplit_once(':')
                                .ok_or_else(|| format!("split child `{child}` is not connector:stream"))?;
                            req.split.push((spec.into(), stream.into()));
                        }
                    }
                    _ => return unknown(k),
                }
            }
            Action::Publish(req)
        }
        "subscribe" => {
            let mut req = SubscribeReq {
                stream: one(&pos, "subscribe")?.to_string(),
                ..SubscribeReq::default()
            };
            for (k, v) in opts {
                match k {
                    "via" => req.via = Some(v.into()),
                    "secret" => req.secret = Some(v.into()),
                    "ping" => req.ping = Some(v.into()),
                    _ => return unknown(k),
                }
            }
            Action::Subscribe(req)
        }
        "stop" | "pause" | "resume" => {
            if let Some((k, _)) = opts.first() {
                return unknown(k);
            }
            let stream = optional(&pos, action)?.map(str::to_string);
            match action {
                "stop" => Action::Stop { stream },
                "pause" => Action::Pause { stream },
                _ => Action::Resume { stream },
            }
        }
        "send" => match args {
            [stream, text] => Action::Send {
                stream: (*stream != WORLD).then(|| stream.to_string()),
                text: text.to_string(),
            },
            _ => return Err("send takes a stream (or *) and one text".into()),
        },
        "add_tracks" => match pos.as_slice() {
            [stream, tracks] => Action::AddTracks {
                stream: stream.to_string(),
                tracks: parse_tracks(tracks).map_err(|e| e.to_string())?,
            },
            _ => return Err("add_tracks takes a stream and kind:label,...".into()),
        },
        "remove_tracks" => match pos.as_slice() {
            [stream, labels] => Action::RemoveTracks {
                stream: stream.to_string(),
                labels: labels.split(',').map(str::to_string).collect(),
            },
            _ => return Err("remove_tracks takes a stream and label,...".into()),
        },
        "drop_transport" => Action::DropTransport,
        "restart" => match pos.as_slice() {
            [svc] => Action::Restart {
                service: svc.to_string(),
                down_ms: 0,
            },
            [svc, ms] => Action::Restart {
                service: svc.to_string(),
                down_ms: num(ms)?,
            },
            _ => return Err("restart takes a service and an optional downtime".into()),
        },
        "expect" => Action::Expect(parse_expect(args)?),
        other => return Err(format!("unknown action `{other}`")),
    })
}

fn parse_expect(args: &[&str]) -> Result<Expect, String> {
    Ok(match args {
        ["link-count", n] => Expect::LinkCount {
            n: num(n)? as usize,
            kind: LinkKind::Total,
        },
        ["link-count", n, kind] => Expect::LinkCount {
            n: num(n)? as usize,
            kind: match *kind {
                "mesh" => LinkKind::Mesh,
                "star" => LinkKind::Star,
                "total" => LinkKind::Total,
                other => return Err(format!("link kind `{other}`")),
            },
        },
        ["stream-status", stream, status] => Expect::StreamStatus {
            stream: stream.to_string(),
            live: match *status {
                "live" => true,
                "idle" => false,
                other => return Err(format!("stream status `{other}`")),
            },
        },
        ["transcript-contains", who, text] => Expect::TranscriptContains {
            who: who.to_string(),
            text: text.to_string(),
        },
        ["frame-count-range", who, track, min, max] => Expect::FrameCountRange {
            who: who.to_string(),
            track: track.to_string(),
            min: num(min)?,
            max: num(max)?,
        },
        ["transcript-order", who, first, then] => Expect::TranscriptOrder {
            who: who.to_string(),
            first: first.to_string(),
            then: then.to_string(),
        },
        _ => return Err(format!("cannot read expectation `{}`", args.join(" "))),
    })
}

fn q(s: &str) -> String {
    shlex::try_quote(s).map(|c| c.into_owned()).unwrap_or_else(|_| s.to_string())
}

fn tracks_text(tracks: &[TrackDescriptor]) -> String {
    tracks
        .iter()
        .map(|t| format!("{}:{}", t.kind, t.label))
        .collect::<Vec<_>>()
        .join(",")
}

impl fmt::Display for Expect {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Expect::LinkCount { n, kind } => {
                let k = match kind {
                    LinkKind::Mesh => "mesh",
                    LinkKind::Star => "star",
                    LinkKind::Total => "total",
                };
                write!(f, "link-count {n} {k}")
            }
            Expect::StreamStatus { stream, live } => {
                write!(f, "stream-status {} {}", q(stream), if *live { "live" } else { "idle" })
            }
            Expect::TranscriptContains { who, text } => {
                write!(f, "transcript-contains {} {}", q(who), q(text))
            }
            Expect::FrameCountRange { who, track, min, max } => {
                write!(f, "frame-count-range {} {} {min} {max}", q(who), q(track))
            }
            Expect::TranscriptOrder { who, first, then } => {
                write!(f, "transcript-order {} {} {}", q(who), q(first), q(then))
            }
        }
    }
}

impl fmt::Display for Action {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Action::Spawn { connector } => {
                f.write_str("spawn")?;
                if let Some(c) = connector {
                    write!(f, " connector={}", q(c))?;
                }
                Ok(())
            }
            Action::Publish(r) => {
                write!(f, "publish {}", q(&r.stream))?;
                if let Some(v) = &r.via {
                    write!(f, " via={}", q(v))?;
                }
                if let Some(t) = &r.tracks {
                    write!(f, " tracks={}", tracks_text(t))?;
                }
                if let Some(s) = &r.secret {
                    write!(f, " {}", q(&format!("secret={s}")))?;
                }
                if r.autopause {
                    f.write_str(" autopause=on")?;
                }
                if let Some(i) = &r.input {
                    write!(f, " input={}", q(i))?;
                }
                if let Some(p) = &r.replay {
                    write!(f, " {}", q(&format!("replay={}", p.display())))?;
                }
                if !r.split.is_empty() {
                    let parts: Vec<String> = r.split.iter().map(|(c, s)| format!("{c}:{s}")).collect();
                    write!(f, " split={}", q(&parts.join(",")))?;
                }
                if let Some(p) = &r.ping {
                    write!(f, " {}", q(&format!("ping={p}")))?;
                }
                Ok(())
            }
            Action::Subscribe(r) => {
                write!(f, "subscribe {}", q(&r.stream))?;
                if let Some(v) = &r.via {
                    write!(f, " via={}", q(v))?;
                }
                if let Some(s) = &r.secret {
                    write!(f, " {}", q(&format!("secret={s}")))?;
                }
                if let Some(p) = &r.ping {
                    write!(f, " {}", q(&format!("ping={p}")))?;
                }
                Ok(())
            }
            Action::Stop { stream } | Action::Pause { stream } | Action::Resume { stream } => {
                let name = match self {
                    Action::Stop { .. } => "stop",
                    Action::Pause { .. } => "pause",
                    _ => "resume",
                };
                f.write_str(name)?;
                if let Some(s) = stream {
                    write!(f, " {}", q(s))?;
                }
                Ok(())
            }
            Action::Send { stream, text } => {
                write!(f, "send {} {}", q(stream.as_deref().unwrap_or(WORLD)), q(text))
            }
            Action::AddTracks { stream, tracks } => {
                write!(f, "add_tracks {} {}", q(stream), tracks_text(tracks))
            }
            Action::RemoveTracks { stream, labels } => {
                write!(f, "remove_tracks {} {}", q(stream), labels.join(","))
            }
            Action::DropTransport => f.write_str("drop_transport"),
            Action::Restart { service, down_ms } => write!(f, "restart {} {down_ms}", q(service)),
            Action::Expect(e) => write!(f, "expect {e}"),
        }
    }
}

impl fmt::Display for Scenario {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        writeln!(f, "seed {}", self.seed)?;
        writeln!(f, "connector {}", self.connector)?;
        writeln!(f, "latency {} {}", self.latency.min, self.latency.max)?;
        writeln!(f, "end {}", self.end_ms)?;
        if self.capture {
            writeln!(f, "capture")?;
        }
        for s in self.ordered() {
            writeln!(f, "at {} {} {}", s.at, s.actor, s.action)?;
        }
        Ok(())
    }
}
