use std::collections::BTreeSet;

use namedstream_core::stream::{Change, Detached, StreamRecord, StreamRef};
use namedstream_core::wire::{MessageKind, SignalEnvelope, MAX_PAYLOAD};
use namedstream_core::{EndpointId, StreamName};
use proptest::prelude::*;

fn ep_id() -> impl Strategy<Value = EndpointId> {
    "[a-zA-Z0-9_.-]{1,12}".prop_map(|s| EndpointId::new(s).unwrap())
}

fn stream_ref() -> impl Strategy<Value = StreamRef> {
    prop_oneof![
        "[a-z0-9._-]{1,8}(/[a-z0-9._-]{1,8}){0,3}".prop_map(|s| StreamRef::parse(&s).unwrap()),
        "[0-9a-f]{64}".prop_map(|h| StreamRef::parse(&format!("h:{h}")).unwrap()),
    ]
}

fn envelope() -> impl Strategy<Value = SignalEnvelope> {
    (
        stream_ref(),
        ep_id(),
        proptest::option::of(ep_id()),
        proptest::sample::select(MessageKind::ALL.to_vec()),
        any::<u64>(),
        any::<String>(),
    )
        .prop_map(|(stream, from, to, kind, seq, payload)| SignalEnvelope {
            stream,
            from,
            to,
            kind,
            seq,
            payload,
        })
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(10_000))]

    #[test]
    fn envelope_round_trips(env in envelope()) {
        let line = env.encode().unwrap();
        prop_assert!(!line.contains('\n'));
        prop_assert_eq!(SignalEnvelope::decode_str(&line).unwrap(), env.clone());
        let framed = format!("{line}\n");
        prop_assert_eq!(SignalEnvelope::decode(framed.as_bytes()).unwrap(), env);
    }
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn arbitrary_bytes_never_panic(bytes in proptest::collection::vec(any::<u8>(), 0..200)) {
        let _ = SignalEnvelope::decode(&bytes);
    }

    #[test]
    fn trailing_garbage_is_rejected(env in envelope(), junk in "[!-~][ -~]{0,7}") {
        let line = env.encode().unwrap();
        let bad = format!("{line}{junk}");
        prop_assert!(SignalEnvelope::decode_str(&bad).is_err());
    }

    #[test]
    fn oversize_payload_is_rejected(extra in 1usize..64) {
        let env = SignalEnvelope::new(
            StreamRef::parse("s").unwrap(),
            EndpointId::new("a").unwrap(),
            MessageKind::Text,
            1,
            "x".repeat(MAX_PAYLOAD + extra),
        );
        prop_assert!(env.encode().is_err());
    }
}

#[derive(Debug, Clone)]
enum Op {
    Publish(u8),
    Subscribe(u8),
    Leave(u8),
}

fn op() -> impl Strategy<Value = Op> {
    prop_oneof![
        (0u8..6).prop_map(Op::Publish),
        (0u8..6).prop_map(Op::Subscribe),
        (0u8..6).prop_map(Op::Leave),
    ]
}

fn id(n: u8) -> EndpointId {
    EndpointId::new(format!("ep-{n}")).unwrap()
}

/// Plain reference model of one stream's membership.
#[derive(Default)]
struct Model {
    publisher: Option<u8>,
    subscribers: BTreeSet<u8>,
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(2_000))]

    #[test]
    fn record_matches_reference_model(ops in proptest::collection::vec(op(), 0..60)) {
        let mut rec = StreamRecord::new(StreamName::new("s").unwrap());
        let mut model = Model::default();
        for op in ops {
            match op {
                Op::Publish(n) => {
                    let res = rec.attach_publisher(&id(n));
                    match model.publisher {
                        None => {
                            prop_assert_eq!(res.unwrap(), Change::Applied);
                            model.publisher = Some(n);
                        }
                        Some(p) if p == n => prop_assert_eq!(res.unwrap(), Change::Unchanged),
                        Some(_) => prop_assert!(res.is_err()),
                    }
                }
                Op::Subscribe(n) => {
                    let _ = rec.attach_subscriber(&id(n));
                    model.subscribers.insert(n);
                }
                Op::Leave(n) => {
                    let d = rec.detach(&id(n));
                    let was_pub = model.publisher == Some(n);
                    let was_sub = model.subscribers.remove(&n);
                    if was_pub {
                        model.publisher = None;
                    }
                    let expect = match (was_pub, was_sub) {
                        (true, true) => Detached::Both,
                        (true, false) => Detached::Publisher,
                        (false, true) => Detached::Subscriber,
                        (false, false) => Detached::Nothing,
                    };
                    prop_assert_eq!(d, expect);
                }
            }
            prop_assert!(rec.check().is_ok(), "{:?}", rec.check());
            prop_assert_eq!(rec.publisher.clone(), model.publisher.map(id));
            let subs: BTreeSet<EndpointId> = model.subscribers.iter().map(|n| id(*n)).collect();
            prop_assert_eq!(&rec.subscribers, &subs);
        }
    }

    #[test]
    fn subscribe_order_relative_to_publish_is_irrelevant(
        subs in proptest::collection::btree_set(1u8..20, 0..8),
        pos in 0usize..9,
    ) {
        let subs: Vec<u8> = subs.into_iter().collect();
        let pos = pos.min(subs.len());
        let mut a = StreamRecord::new(StreamName::new("s").unwrap());
        a.attach_publisher(&id(0)).unwrap();
        for s in &subs {
            a.attach_subscriber(&id(*s));
        }
        let mut b = StreamRecord::new(StreamName::new("s").unwrap());
        for s in &subs[..pos] {
            b.attach_subscriber(&id(*s));
        }
        b.attach_publisher(&id(0)).unwrap();
        for s in &subs[pos..] {
            b.attach_subscriber(&id(*s));
        }
        prop_assert_eq!(a.publisher, b.publisher);
        prop_assert_eq!(a.subscribers, b.subscribers);
        prop_assert_eq!(a.status, b.status);
    }

    #[test]
    fn hashed_ref_is_one_way_and_well_formed(name in "[i-z][a-z0-9]{0,7}(/[a-z0-9]{1,8}){0,3}") {
        let n = StreamName::new(name.clone()).unwrap();
        let h = namedstream_core::hash_name(&n);
        let s = h.as_str();
        prop_assert!(s.starts_with("h:"));
        prop_assert_eq!(s.len(), 66);
        // names carry a letter outside `h:` and hex, so the digest cannot contain them
        prop_assert!(!s.contains(&name));
        prop_assert_eq!(StreamRef::parse(s).unwrap(), StreamRef::Hashed(h.clone()));
    }
}
