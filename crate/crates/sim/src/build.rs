//! The canonical configurations as scenarios: a two-party call, an
//! N-party conference and a broadcast tree of forwarding endpoints.

use crate::scenario::{Action, Expect, LinkKind, Scenario};
use crate::world::{spec_scheme, PublishReq, SubscribeReq};
use crate::SimError;

const SPAWN_AT: u64 = 0;
const PUBLISH_AT: u64 = 10;
const SUBSCRIBE_AT: u64 = 20;
pub const SETTLED_AT: u64 = 2_500;
const END: u64 = 3_000;

fn star(connector: &str) -> bool {
    spec_scheme(connector) == "sfu"
}

fn publish(stream: &str) -> Action {
    Action::Publish(PublishReq {
        stream: stream.to_string(),
        ..PublishReq::default()
    })
}

fn subscribe(stream: &str) -> Action {
    Action::Subscribe(SubscribeReq {
        stream: stream.to_string(),
        ..SubscribeReq::default()
    })
}

/// Links a settled topology holds: one per (publisher, subscriber) pair
/// on a mesh, one per endpoint on a star.
fn expect_links(s: &mut Scenario, endpoints: usize, pairs: usize, connector: &str) {
    let (n, kind) = if star(connector) {
        (endpoints, LinkKind::Star)
    } else {
        (pairs, LinkKind::Mesh)
    };
    s.expect(SETTLED_AT, Expect::LinkCount { n, kind });
    s.expect(SETTLED_AT, Expect::LinkCount { n, kind: LinkKind::Total });
}

/// Each party publishes its own stream and subscribes to the other's.
pub fn build_call(a: &str, b: &str, connector: &str) -> Scenario {
    let mut s = Scenario::new(connector, 0);
    s.end_ms = END;
    for (me, other) in [(a, b), (b, a)] {
        s.at(SPAWN_AT, me, Action::Spawn { connector: None });
        s.at(PUBLISH_AT, me, publish(&format!("call/{me}")));
        s.at(SUBSCRIBE_AT, me, subscribe(&format!("call/{other}")));
    }
    for me in [a, b] {
        s.expect(
            SETTLED_AT,
            Expect::StreamStatus {
                stream: format!("call/{me}"),
                live: true,
            },
        );
    }
    expect_links(&mut s, 2, 2, connector);
    s
}

/// `n` endpoints, one stream each; everyone subscribes to everyone else.
pub fn build_conference(n: usize, connector: &str) -> Result<Scenario, SimError> {
    if n < 2 {
        return Err(SimError::Param(format!("a conference needs at least 2 parties, got {n}")));
    }
    let mut s = Scenario::new(connector, 0);
    s.end_ms = END;
    let name = |i: usize| format!("p{i}");
    for i in 0..n {
        s.at(SPAWN_AT, &name(i), Action::Spawn { connector: None });
        s.at(PUBLISH_AT, &name(i), publish(&format!("conf/{i}")));
        for j in (0..n).filter(|&j| j != i) {
            s.at(SUBSCRIBE_AT, &name(i), subscribe(&format!("conf/{j}")));
        }
    }
    for i in 0..n {
        s.expect(
            SETTLED_AT,
            Expect::StreamStatus {
                stream: format!("conf/{i}"),
                live: true,
            },
        );
    }
    expect_links(&mut s, n, n * (n - 1), connector);
    Ok(s)
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct TreeNode {
    pub id: usize,
    pub parent: Option<usize>,
    pub depth: u32,
    pub children: Vec<usize>,
}

impl TreeNode {
    pub fn host(&self) -> String {
        format!("n{}", self.id)
    }

    /// The stream this node republishes, if it has children.
    pub fn stream(&self) -> Option<String> {
        (!self.children.is_empty()).then(|| format!("tree/{}", self.id))
    }
}

/// Nodes of a complete tree in breadth-first order; node 0 is the root.
pub fn tree_nodes(depth: u32, fanout: u32) -> Vec<TreeNode> {
    let mut nodes = vec![TreeNode {
        id: 0,
        parent: None,
        depth: 0,
        children: Vec::new(),
    }];
    let mut i = 0;
    while i < nodes.len() {
        if nodes[i].depth < depth {
            for _ in 0..fanout {
                let id = nodes.len();
                nodes.push(TreeNode {
                    id,
                    parent: Some(i),
                    depth: nodes[i].depth + 1,
                    children: Vec::new(),
                });
                nodes[i].children.push(id);
            }
        }
        i += 1;
    }
    nodes
}

/// Nodes in the subtree rooted at `root`, itself included.
pub fn subtree(nodes: &[TreeNode], root: usize) -> Vec<usize> {
    let mut out = vec![root];
    let mut i = 0;
    while i < out.len() {
        out.extend(nodes[out[i]].children.iter().copied());
        i += 1;
    }
    out
}

/// The root publishes; every other node subscribes to its parent's stream
/// and, if it has children, republishes what it receives.
pub fn build_broadcast_tree(depth: u32, fanout: u32, connector: &str) -> Result<Scenario, SimError> {
    if depth < 1 || fanout < 1 {
        return Err(SimError::Param(format!(
            "a tree needs depth and fanout of at least 1, got {depth} and {fanout}"
        )));
    }
    let nodes = tree_nodes(depth, fanout);
    let mut s = Scenario::new(connector, 0);
    s.end_ms = END;
    let video = vec![namedstream_core::TrackDescriptor::video()];
    for n in &nodes {
        let host = n.host();
        s.at(SPAWN_AT, &host, Action::Spawn { connector: None });
        let upstream = n.parent.map(|p| format!("tree/{p}"));
        if let Some(up) = &upstream {
            s.at(SUBSCRIBE_AT, &host, subscribe(up));
        }
        if let Some(stream) = n.stream() {
            s.at(
                PUBLISH_AT,
                &host,
                Action::Publish(PublishReq {
                    stream,
                    tracks: Some(video.clone()),
                    input: upstream.clone(),
                    ..PublishReq::default()
                }),
            );
        }
    }
    let internal = nodes.iter().filter(|n| n.stream().is_some()).count();
    for n in nodes.iter().filter(|n| n.children.is_empty()) {
        s.expect(
            SETTLED_AT,
            Expect::FrameCountRange {
                who: format!("n{}@tree/{}", n.id, n.parent.expect("leaves have parents")),
                track: "video".into(),
                min: 1,
                max: u64::MAX,
            },
        );
    }
    expect_links(&mut s, nodes.len(), nodes.len() - 1, connector);
    debug_assert_eq!(internal, nodes.iter().filter(|n| !n.children.is_empty()).count());
    Ok(s)
}
