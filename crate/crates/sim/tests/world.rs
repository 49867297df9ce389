use std::collections::BTreeMap;
use std::process::Command;

use namedstream_connectors::{FileStorage, StorageService};
use namedstream_core::endpoint::MediaFrame;
use namedstream_core::{hash_name, Role, StreamName};
use namedstream_sim::report;
use namedstream_sim::{
    build_broadcast_tree, build_call, run, run_scenario, Action, Entry, PublishReq, Scenario, SubscribeReq, World,
    WorldConfig,
};
use proptest::prelude::*;

fn world(seed: u64, connector: &str) -> World {
    World::new(WorldConfig {
        seed,
        connector: connector.to_string(),
        ..WorldConfig::default()
    })
}

fn publish(stream: &str) -> PublishReq {
    PublishReq {
        stream: stream.to_string(),
        ..PublishReq::default()
    }
}

fn subscribe(stream: &str) -> SubscribeReq {
    SubscribeReq {
        stream: stream.to_string(),
        ..SubscribeReq::default()
    }
}

fn canonical() -> Scenario {
    Scenario::parse(include_str!("../scenarios/canonical.sim")).unwrap()
}

/// Digest of each frame a publisher's source produced, by track and capture time.
fn source_digests(w: &World, label: &str) -> BTreeMap<(String, u64), u64> {
    w.log(label)
        .iter()
        .filter_map(|l| match &l.entry {
            Entry::Media { track, ts, digest, .. } => Some(((track.clone(), *ts), *digest)),
            _ => None,
        })
        .collect()
}

fn has(w: &World, label: &str, want: impl Fn(&Entry) -> bool) -> bool {
    w.log(label).iter().any(|l| want(&l.entry))
}

#[test]
fn same_seed_same_report() {
    for conn in ["mem", "broker", "sfu", "storage"] {
        let mut s = canonical();
        s.connector = conn.into();
        let a = run_scenario(&s).unwrap().to_json();
        let b = run_scenario(&s).unwrap().to_json();
        assert_eq!(a, b, "{conn}");
    }
}

#[test]
fn seed_changes_timing_not_what_subscribers_see() {
    let mut s = canonical();
    s.connector = "broker".into();
    let a = run_scenario(&s).unwrap();
    s.seed = 12345;
    let b = run_scenario(&s).unwrap();
    assert_eq!(a.logs, b.logs);
    assert!(b.passed());
}

#[test]
fn tree_leaves_render_the_root_source() {
    for conn in ["mem", "broker"] {
        let out = run(&build_broadcast_tree(2, 2, conn).unwrap()).unwrap();
        assert!(out.report.passed(), "{conn}: {:?}", out.report.assertions);
        let root = source_digests(&out.world, "n0@tree/0");
        assert!(!root.is_empty());
        for (leaf, parent) in [(3, 1), (4, 1), (5, 2), (6, 2)] {
            let s = out.world.session(&format!("n{leaf}@tree/{parent}")).unwrap();
            let hist = s.remote_media().history("video");
            assert!(hist.len() > 20, "{conn} n{leaf}: {} frames", hist.len());
            for f in hist {
                assert_eq!(root.get(&("video".into(), f.ts_ms)), Some(&f.digest), "{conn} n{leaf} ts {}", f.ts_ms);
            }
        }
    }
}

#[test]
fn split_publish_reaches_both_services() {
    let mut w = world(3, "mem");
    for h in ["src", "sa", "sb"] {
        w.spawn(h, None).unwrap();
    }
    let label = w
        .publish(
            "src",
            PublishReq {
                split: vec![("mem".into(), "sp/a".into()), ("broker".into(), "sp/b".into())],
                ..publish("sp")
            },
        )
        .unwrap();
    w.run_until(100);
    w.subscribe("sa", subscribe("sp/a")).unwrap();
    w.subscribe(
        "sb",
        SubscribeReq {
            via: Some("broker".into()),
            ..subscribe("sp/b")
        },
    )
    .unwrap();
    w.run_until(2_000);
    let source = source_digests(&w, &label);
    for sub in ["sa@sp/a", "sb@sp/b"] {
        let s = w.session(sub).unwrap();
        let hist = s.remote_media().history("video");
        assert!(hist.len() > 20, "{sub}: {} frames", hist.len());
        for f in hist {
            assert_eq!(source.get(&("video".into(), f.ts_ms)), Some(&f.digest), "{sub}");
        }
    }
}

#[test]
fn split_survives_one_refused_child() {
    let mut w = world(3, "mem");
    for h in ["holder", "src", "sa", "sb"] {
        w.spawn(h, None).unwrap();
    }
    w.publish(
        "holder",
        PublishReq {
            via: Some("broker".into()),
            ..publish("sp/b")
        },
    )
    .unwrap();
    w.run_until(100);
    let label = w
        .publish(
            "src",
            PublishReq {
                split: vec![("mem".into(), "sp/a".into()), ("broker".into(), "sp/b".into())],
                ..publish("sp")
            },
        )
        .unwrap();
    w.run_until(200);
    w.subscribe("sa", subscribe("sp/a")).unwrap();
    w.subscribe(
        "sb",
        SubscribeReq {
            via: Some("broker".into()),
            ..subscribe("sp/b")
        },
    )
    .unwrap();
    w.run_until(2_000);
    assert!(has(&w, &label, |e| matches!(e, Entry::Error { .. })), "{:?}", w.log(&label));
    assert!(w.session("sa@sp/a").unwrap().remote_media().total() > 0);
    // sb is served by the original holder
    let source = source_digests(&w, "holder@sp/b");
    for f in w.session("sb@sp/b").unwrap().remote_media().history("video") {
        assert_eq!(source.get(&("video".into(), f.ts_ms)), Some(&f.digest));
    }
}

#[test]
fn two_storage_nodes_share_a_directory() {
    let dir = tempfile::tempdir().unwrap();
    let mut w = world(5, "mem");
    for (name, node) in [("files-a", "a"), ("files-b", "b")] {
        let root = dir.path().to_path_buf();
        w.add_service(name, false, move |_| {
            Box::new(StorageService::new(FileStorage::open(&root).unwrap(), node))
        });
    }
    w.spawn("p", Some("storage?store=files-a".into())).unwrap();
    w.spawn("s", Some("storage?store=files-b".into())).unwrap();
    w.publish("p", publish("shared/1")).unwrap();
    w.run_until(100);
    w.subscribe("s", subscribe("shared/1")).unwrap();
    w.run_until(2_000);
    let s = w.session("s@shared/1").unwrap();
    assert!(s.publisher_live());
    assert!(s.remote_media().total() > 20, "{}", s.remote_media().total());
    assert!(std::fs::read_dir(dir.path()).unwrap().count() > 0);
}

#[test]
fn call_recovers_after_broker_restart() {
    let restart_at = 1_000;
    let mut s = build_call("a", "b", "broker");
    s.end_ms = 6_000;
    s.at(
        restart_at,
        "*",
        Action::Restart {
            service: "broker".into(),
            down_ms: 300,
        },
    );
    let out = run(&s).unwrap();
    for label in ["a@call/b", "b@call/a"] {
        let sess = out.world.session(label).unwrap();
        assert!(sess.publisher_live(), "{label}");
        let hist = sess.remote_media().history("video");
        let resumed = hist
            .iter()
            .find(|f| f.at_ms > restart_at + 300 && f.ts_ms > restart_at)
            .unwrap_or_else(|| panic!("{label} never resumed"));
        assert!(resumed.at_ms <= restart_at + 3_500, "{label} resumed at {}", resumed.at_ms);
        assert!(hist.last().unwrap().at_ms + 200 >= 6_000);
    }
}

#[test]
fn dropped_publisher_is_reported_gone_then_returns() {
    for conn in ["mem", "broker", "sfu", "storage"] {
        let mut w = world(8, conn);
        for h in ["p", "s1", "s2"] {
            w.spawn(h, None).unwrap();
        }
        w.publish("p", publish("gone/1")).unwrap();
        w.run_until(50);
        w.subscribe("s1", subscribe("gone/1")).unwrap();
        w.subscribe("s2", subscribe("gone/1")).unwrap();
        w.run_until(1_000);
        w.drop_transport("p").unwrap();
        w.run_until(6_000);
        for s in ["s1@gone/1", "s2@gone/1"] {
            let gone = w
                .log(s)
                .iter()
                .find(|l| matches!(l.entry, Entry::PeerGone))
                .unwrap_or_else(|| panic!("{conn} {s}: {:?}", w.log(s)));
            assert!(gone.at >= 1_000, "{conn} {s}");
            // the publisher's connector reconnects and the stream comes back
            let sess = w.session(s).unwrap();
            assert_eq!(sess.role(), Role::Subscriber, "{conn} {s}");
            assert!(sess.publisher_live(), "{conn} {s}");
            let last = sess.remote_media().history("video").last().unwrap();
            assert!(last.at_ms + 200 >= 6_000, "{conn} {s}: last frame at {}", last.at_ms);
        }
    }
}

#[test]
fn relay_services_never_see_media() {
    for conn in ["broker", "storage"] {
        let mut s = canonical();
        s.connector = conn.into();
        s.capture = true;
        let out = run(&s).unwrap();
        let service = if conn == "broker" { "ws://broker.sim/ws" } else { "storage" };
        let log = out.world.service_log(service);
        assert!(!log.is_empty(), "{conn}: nothing captured");
        for line in log {
            assert!(!MediaFrame::is_frame_line(&line[2..]), "{conn}: {line}");
        }
        // media did flow, just not through the service
        assert!(out.world.session("s1@canon/1").unwrap().remote_media().total() > 0);
    }
}

#[test]
fn stop_leaves_the_other_side_waiting() {
    for conn in ["mem", "broker", "sfu", "storage"] {
        let mut s = build_call("a", "b", conn);
        s.end_ms = 3_000;
        s.at(1_000, "a", Action::Stop { stream: Some("call/a".into()) });
        let out = run(&s).unwrap();
        let b = out.world.session("b@call/a").unwrap();
        assert_eq!(b.role(), Role::Subscriber, "{conn}");
        assert!(!b.publisher_live(), "{conn}");
        assert!(!has(&out.world, "b@call/a", |e| matches!(e, Entry::Error { .. })), "{conn}");
        // the other direction is untouched
        let a = out.world.session("a@call/b").unwrap();
        assert!(a.remote_media().history("video").last().unwrap().at_ms + 200 >= 3_000, "{conn}");
    }
}

#[test]
fn hashed_subscriber_is_listed_under_the_raw_name() {
    let hashed = hash_name(&StreamName::new("priv/1").unwrap()).to_string();
    let mut w = world(2, "broker");
    w.spawn("p", None).unwrap();
    w.spawn("s", None).unwrap();
    w.publish("p", publish("priv/1")).unwrap();
    w.run_until(100);
    w.subscribe("s", subscribe(&hashed)).unwrap();
    w.run_until(1_000);
    let streams = report::streams(&w);
    let view = &streams["priv/1"];
    assert_eq!(view.publisher.as_deref(), Some("p@priv/1"));
    assert_eq!(view.subscribers, vec![format!("s@{hashed}")]);
}

#[test]
fn cli_parses_urls_and_runs_builders() {
    let bin = env!("CARGO_BIN_EXE_sim");
    let out = Command::new(bin)
        .args(["parse-url", "web+ezsub:rtclite:wss://example.com/str/15"])
        .output()
        .unwrap();
    assert!(out.status.success());
    let v: serde_json::Value = serde_json::from_slice(&out.stdout).unwrap();
    assert_eq!(v["mode"], "subscribe");
    assert_eq!(v["stream"], "str/15");
    let out = Command::new(bin).args(["parse-url", "web+ezpub:bogus:x"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let out = Command::new(bin).args(["conf", "3", "--connector", "sfu"]).output().unwrap();
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stdout));
    assert!(String::from_utf8_lossy(&out.stdout).contains("streams 3, links 3 (mesh 0, star 3)"));
    let out = Command::new(bin).args(["conf", "1"]).output().unwrap();
    assert_eq!(out.status.code(), Some(2));

    let script = concat!(env!("CARGO_MANIFEST_DIR"), "/scenarios/canonical.sim");
    let out = Command::new(bin).args(["run", script, "--report", "-"]).output().unwrap();
    assert!(out.status.success());
    let text = String::from_utf8_lossy(&out.stdout);
    let json = &text[text.find('{').unwrap()..];
    let v: serde_json::Value = serde_json::from_str(json).unwrap();
    assert_eq!(v["connector"], "mem");
}

#[derive(Debug, Clone)]
enum Op {
    Publish(usize, usize),
    Subscribe(usize, usize),
    Stop(usize),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0..4usize, 0..2usize).prop_map(|(h, s)| Op::Publish(h, s)),
        (0..4usize, 0..2usize).prop_map(|(h, s)| Op::Subscribe(h, s)),
        (0..4usize).prop_map(Op::Stop),
    ]
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(24))]

    /// Whatever endpoints do, each stream ends with at most one live
    /// publisher and frame counts stay consistent.
    #[test]
    fn random_lifecycles_keep_streams_sane(
        conn in prop::sample::select(vec!["mem", "broker", "sfu"]),
        ops in prop::collection::vec((op(), 0..200u64), 1..12),
    ) {
        let mut w = world(1, conn);
        let hosts = ["h0", "h1", "h2", "h3"];
        for h in hosts {
            w.spawn(h, None).unwrap();
        }
        let mut t = 0;
        for (op, gap) in ops {
            t += gap;
            w.run_until(t);
            match op {
                Op::Publish(h, s) => { w.publish(hosts[h], publish(&format!("r/{s}"))).unwrap(); }
                Op::Subscribe(h, s) => { w.subscribe(hosts[h], subscribe(&format!("r/{s}"))).unwrap(); }
                Op::Stop(h) => w.stop(hosts[h], None).unwrap(),
            }
        }
        w.run_until(t + 1_500);
        for s in 0..2 {
            let name = format!("r/{s}");
            let live = w
                .hosts()
                .filter_map(|h| h.session(&format!("{}@{name}", h.name)))
                .filter(|s| s.role() == Role::Publisher)
                .count();
            prop_assert!(live <= 1, "{live} publishers on {name}");
        }
        let s = Scenario::new(conn, 1);
        let r = report::build(&w, &s, Vec::new());
        prop_assert!(r.inconsistencies.is_empty(), "{:?}", r.inconsistencies);
    }
}
