use std::collections::BTreeSet;
use std::sync::{Arc, Mutex};
use std::time::{Duration, Instant};

use axum::routing::post;
use axum::Router;
use futures_util::{SinkExt, StreamExt};
use namedstream_broker::webhook::{HookBody, HookEvent};
use namedstream_broker::{BrokerHandle, ServerConfig};
use namedstream_core::stream::StreamRef;
use namedstream_core::wire::{ErrorCode, ErrorPayload, MessageKind, ServiceEvent, SignalEnvelope};
use namedstream_core::{EndpointId, StreamName};
use tokio::net::TcpStream;
use tokio_tungstenite::tungstenite::Message;
use tokio_tungstenite::{connect_async, MaybeTlsStream, WebSocketStream};

type Ws = WebSocketStream<MaybeTlsStream<TcpStream>>;

struct Client {
    ws: Ws,
    ep: EndpointId,
    seq: u64,
    /// every line received, for privacy checks
    seen: Vec<String>,
}

impl Client {
    async fn connect(url: &str) -> Client {
        let (ws, _) = connect_async(url).await.expect("connect");
        let mut c = Client {
            ws,
            ep: EndpointId::new("?").unwrap(),
            seq: 0,
            seen: Vec::new(),
        };
        let welcome = c.recv().await;
        match ServiceEvent::parse(&welcome.payload).unwrap() {
            ServiceEvent::Welcome { endpoint } => c.ep = endpoint,
            other => panic!("expected welcome, got {other:?}"),
        }
        c
    }

    async fn send(&mut self, stream: &str, kind: MessageKind, payload: &str, to: Option<&EndpointId>) {
        self.seq += 1;
        let mut env = SignalEnvelope::new(StreamRef::parse(stream).unwrap(), self.ep.clone(), kind, self.seq, payload);
        env.to = to.cloned();
        self.ws.send(Message::text(env.encode().unwrap())).await.unwrap();
    }

    async fn recv(&mut self) -> SignalEnvelope {
        self.try_recv(Duration::from_secs(5)).await.expect("timed out waiting for a line")
    }

    async fn try_recv(&mut self, wait: Duration) -> Option<SignalEnvelope> {
        loop {
            let msg = tokio::time::timeout(wait, self.ws.next()).await.ok()??.ok()?;
            if let Message::Text(t) = msg {
                self.seen.push(t.to_string());
                return Some(SignalEnvelope::decode_str(&t).expect("broker sends valid lines"));
            }
        }
    }
}

fn event(env: &SignalEnvelope) -> ServiceEvent {
    assert_eq!(env.kind, MessageKind::Event, "{env:?}");
    ServiceEvent::parse(&env.payload).unwrap()
}

async fn start(cfg: ServerConfig) -> BrokerHandle {
    BrokerHandle::start("127.0.0.1:0", cfg).await.unwrap()
}

#[tokio::test(flavor = "multi_thread", worker_threads = 4)]
async fn hundred_concurrent_connects_get_distinct_ids() {
    let b = start(ServerConfig::default()).await;
    let url = b.ws_url();
    let tasks: Vec<_> = (0..100)
        .map(|_| {
            let url = url.clone();
            tokio::spawn(async move { Client::connect(&url).await })
        })
        .collect();
    let mut ids = BTreeSet::new();
    let mut clients = Vec::new();
    for t in tasks {
        let c = t.await.unwrap();
        ids.insert(c.ep.clone());
        clients.push(c);
    }
    assert_eq!(ids.len(), 100);
    assert_eq!(b.state.broker(|r| r.session_count()), 100);
}

#[tokio::test]
async fn token_is_checked_at_handshake() {
    let b = start(ServerConfig {
        token: Some("s3cret".into()),
        ..ServerConfig::default()
    })
    .await;
    assert!(connect_async(b.ws_url()).await.is_err());
    assert!(connect_async(format!("{}?token=nope", b.ws_url())).await.is_err());
    let c = Client::connect(&format!("{}?token=s3cret", b.ws_url())).await;
    assert!(c.ep.as_str().starts_with("ep-"));
}

#[tokio::test]
async fn healthz_and_registry_snapshot() {
    let b = start(ServerConfig::default()).await;
    let mut a = Client::connect(&b.ws_url()).await;
    a.send("demo/1", MessageKind::Publish, "", None).await;
    let http = reqwest::Client::new();
    let base = format!("http://{}", b.addr);
    let ok = http.get(format!("{base}/healthz")).send().await.unwrap();
    assert_eq!(ok.text().await.unwrap(), "ok");
    // the publish lands asynchronously
    let deadline = Instant::now() + Duration::from_secs(2);
    loop {
        let text = http.get(format!("{base}/streams")).send().await.unwrap().text().await.unwrap();
        let snap: serde_json::Value = serde_json::from_str(&text).unwrap();
        if snap["broker"]["streams"][0]["status"] == "live" {
            assert_eq!(snap["broker"]["audit"]["Ok"], serde_json::Value::Null);
            assert_eq!(
                snap["broker"]["streams"][0]["hashed"],
                "h:3a665d89cd9180985add6c886611494a689bc387b8657f7ccc3e81c243cf1ea5"
            );
            break;
        }
        assert!(Instant::now() < deadline, "stream never went live: {snap}");
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
}

#[tokio::test]
async fn text_fans_out_and_conflicts_are_reported() {
    let b = start(ServerConfig::default()).await;
    let mut p = Client::connect(&b.ws_url()).await;
    p.send("room", MessageKind::Publish, "", None).await;
    let mut subs = Vec::new();
    for _ in 0..3 {
        let mut s = Client::connect(&b.ws_url()).await;
        s.send("room", MessageKind::Subscribe, "", None).await;
        assert!(matches!(event(&s.recv().await), ServiceEvent::PublisherLive { .. }));
        assert!(matches!(event(&p.recv().await), ServiceEvent::SubscriberJoined { .. }));
        subs.push(s);
    }
    p.send("room", MessageKind::Text, "hi", None).await;
    for s in &mut subs {
        let env = s.recv().await;
        assert_eq!((env.kind, env.payload.as_str()), (MessageKind::Text, "hi"));
        assert_eq!(env.from, p.ep);
    }
    subs[1].send("room", MessageKind::Text, "ack", None).await;
    assert_eq!(p.recv().await.payload, "ack");
    for (i, s) in subs.iter_mut().enumerate() {
        assert!(s.try_recv(Duration::from_millis(100)).await.is_none(), "subscriber {i} got an extra line");
    }

    let mut q = Client::connect(&b.ws_url()).await;
    q.send("room", MessageKind::Publish, "", None).await;
    let err = q.recv().await;
    assert_eq!(ErrorPayload::parse(&err.payload).unwrap().code, ErrorCode::PublisherConflict);

    // publisher leaves: every subscriber is told, and stays pending
    drop(p);
    for s in &mut subs {
        assert!(matches!(event(&s.recv().await), ServiceEvent::PeerGone { .. }));
    }
    q.send("room", MessageKind::Publish, "", None).await;
    for s in &mut subs {
        assert!(matches!(event(&s.recv().await), ServiceEvent::PublisherLive { endpoint, .. } if endpoint == q.ep));
    }
}

#[tokio::test]
async fn hashed_subscriber_transcript_has_no_raw_name() {
    let b = start(ServerConfig::default()).await;
    let name = "str/15";
    let hashed = StreamName::new(name).unwrap().hashed();
    assert_eq!(
        hashed.as_str(),
        "h:7228b70404c9094888a6945cc4cc621ad3cbdaa49a83caf6d119901a22254fb9"
    );
    let mut s = Client::connect(&b.ws_url()).await;
    s.send(hashed.as_str(), MessageKind::Subscribe, "", None).await;
    let err = s.recv().await;
    assert_eq!(ErrorPayload::parse(&err.payload).unwrap().code, ErrorCode::StreamUnknown);

    let mut p = Client::connect(&b.ws_url()).await;
    p.send(name, MessageKind::Publish, r#"{"tracks":[{"kind":"video","label":"cam"}]}"#, None).await;
    s.send(hashed.as_str(), MessageKind::Subscribe, "", None).await;
    assert!(matches!(event(&s.recv().await), ServiceEvent::PublisherLive { .. }));
    let joined = p.recv().await;
    assert!(matches!(event(&joined), ServiceEvent::SubscriberJoined { hashed: true, .. }));

    let offer = r#"{"link":"x#1","desc":{"sdp":"v=0 opaque"}}"#;
    p.send(name, MessageKind::Offer, offer, Some(&s.ep.clone())).await;
    let got = s.recv().await;
    assert_eq!(got.payload, offer, "payload passes byte-identical");
    s.send(hashed.as_str(), MessageKind::Answer, r#"{"link":"x#1"}"#, Some(&p.ep.clone())).await;
    assert_eq!(p.recv().await.stream.as_str(), name);
    p.send(name, MessageKind::Text, "hello", None).await;
    s.recv().await;
    drop(p);
    s.recv().await;
    assert!(s.seen.len() >= 5);
    for line in &s.seen {
        assert!(!line.contains(name), "raw name leaked: {line}");
    }
}

#[derive(Clone, Default)]
struct Sink {
    hits: Arc<Mutex<Vec<(String, HookBody)>>>,
}

async fn stub_sink() -> (String, Sink) {
    let sink = Sink::default();
    let record = |path: &'static str, sink: Sink| {
        post(move |body: String| async move {
            let hook: HookBody = serde_json::from_str(&body).unwrap();
            sink.hits.lock().unwrap().push((path.to_string(), hook));
            "ok"
        })
    };
    let app = Router::new()
        .route("/a", record("/a", sink.clone()))
        .route("/b", record("/b", sink.clone()));
    let listener = tokio::net::TcpListener::bind("127.0.0.1:0").await.unwrap();
    let addr = listener.local_addr().unwrap();
    tokio::spawn(async move { axum::serve(listener, app).await.unwrap() });
    (format!("http://{addr}"), sink)
}

/// A port that refuses connections.
async fn dead_url() -> String {
    let l = std::net::TcpListener::bind("127.0.0.1:0").unwrap();
    let addr = l.local_addr().unwrap();
    drop(l);
    format!("http://{addr}/hook")
}

#[tokio::test(flavor = "multi_thread", worker_threads = 2)]
async fn webhooks_fire_once_per_url_and_never_block() {
    let b = start(ServerConfig::default()).await;
    let (base, sink) = stub_sink().await;
    let dead = dead_url().await;
    let ping = format!("{base}/a {base}/b {dead}");
    let join = serde_json::json!({ "ping": ping }).to_string();

    let mut p = Client::connect(&b.ws_url()).await;
    p.send("hooks", MessageKind::Publish, &join, None).await;
    let mut s = Client::connect(&b.ws_url()).await;
    let t0 = Instant::now();
    s.send("hooks", MessageKind::Subscribe, &join, None).await;
    assert!(matches!(event(&s.recv().await), ServiceEvent::PublisherLive { .. }));
    assert!(matches!(event(&p.recv().await), ServiceEvent::SubscriberJoined { .. }));
    let signaling = t0.elapsed();
    s.send("hooks", MessageKind::Stop, "", None).await;
    assert!(matches!(event(&p.recv().await), ServiceEvent::PeerGone { .. }));
    p.send("hooks", MessageKind::Stop, "", None).await;
    // a subscriber-less stop produces no envelope to wait on; poll the sink
    let deadline = Instant::now() + Duration::from_secs(5);
    while sink.hits.lock().unwrap().len() < 8 && Instant::now() < deadline {
        tokio::time::sleep(Duration::from_millis(20)).await;
    }
    tokio::time::sleep(Duration::from_millis(200)).await;

    let hits = sink.hits.lock().unwrap().clone();
    let count = |path: &str, ev: HookEvent| hits.iter().filter(|(p, h)| p == path && h.event == ev).count();
    for path in ["/a", "/b"] {
        assert_eq!(count(path, HookEvent::Publish), 1);
        assert_eq!(count(path, HookEvent::Subscribe), 1);
        assert_eq!(count(path, HookEvent::Stop), 2, "one per detached role");
    }
    assert_eq!(hits.len(), 8);
    let publish = hits.iter().find(|(_, h)| h.event == HookEvent::Publish).unwrap();
    assert_eq!(publish.1.stream, "hooks");
    assert_eq!(publish.1.endpoint, p.ep.as_str());
    assert!(publish.1.ts > 1_600_000_000_000);

    assert!(signaling < Duration::from_millis(500), "signaling took {signaling:?}");
    let (delivered, retried, failed) = b.state.webhook_metrics();
    assert_eq!(delivered, 8);
    assert_eq!(retried, 4, "one retry per event for the dead url");
    assert_eq!(failed, 4);
}
