use std::collections::{BTreeMap, BTreeSet};

use serde::{Deserialize, Serialize};

use namedstream_core::{EndpointId, PeerId, Service, ServiceOut};

use super::{StorageApi, StorageChange, DEFAULT_POLL_MS};

/// Client to store, one JSON object per line.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "lowercase")]
pub enum Request {
    Put {
        path: String,
        value: String,
        #[serde(default)]
        ephemeral: bool,
    },
    Create {
        path: String,
        value: String,
        #[serde(default)]
        ephemeral: bool,
    },
    Delete {
        path: String,
    },
    Watch {
        prefix: String,
    },
    Unwatch {
        prefix: String,
    },
}

/// Store to client.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "type", rename_all = "lowercase")]
pub enum Notice {
    Welcome {
        endpoint: EndpointId,
    },
    Created {
        path: String,
        ok: bool,
        /// What the path holds afterwards.
        value: String,
    },
    Change(StorageChange),
    Error {
        message: String,
    },
}

impl Notice {
    pub fn to_line(&self) -> String {
        serde_json::to_string(self).expect("notice serializes")
    }
}

#[derive(Debug, Default)]
struct Peer {
    watches: BTreeSet<String>,
    ephemeral: BTreeSet<String>,
}

/// The store as a service: assigns `<node>.<n>` ids, applies requests and
/// pushes changes to watchers.
pub struct StorageService<S: StorageApi> {
    store: S,
    node: String,
    next: u64,
    peers: BTreeMap<PeerId, Peer>,
    poll_ms: u64,
    last_poll: Option<u64>,
    /// Deliver every change twice (exercises at-least-once handling).
    duplicate: bool,
}

impl<S: StorageApi> StorageService<S> {
    pub fn new(store: S, node: impl Into<String>) -> Self {
        Self {
            store,
            node: node.into(),
            next: 0,
            peers: BTreeMap::new(),
            poll_ms: DEFAULT_POLL_MS,
            last_poll: None,
            duplicate: false,
        }
    }

    pub fn with_poll_ms(mut self, ms: u64) -> Self {
        self.poll_ms = ms;
        self
    }

    pub fn with_duplicates(mut self, on: bool) -> Self {
        self.duplicate = on;
        self
    }

    pub fn store(&self) -> &S {
        &self.store
    }

    fn pump(&mut self, out: &mut Vec<ServiceOut>) {
        let copies = if self.duplicate { 2 } else { 1 };
        for ch in self.store.changes() {
            let line = Notice::Change(ch.clone()).to_line();
            for (&peer, p) in &self.peers {
                if p.watches.iter().any(|w| ch.path.starts_with(w)) {
                    for _ in 0..copies {
                        out.push(ServiceOut::Send {
                            peer,
                            line: line.clone(),
                        });
                    }
                }
            }
        }
    }

    fn apply(&mut self, peer: PeerId, req: Request, out: &mut Vec<ServiceOut>) {
        match req {
            Request::Put {
                path,
                value,
                ephemeral,
            } => {
                self.store.put(&path, &value);
                if ephemeral {
                    self.peers.entry(peer).or_default().ephemeral.insert(path);
                }
            }
            Request::Create {
                path,
                value,
                ephemeral,
            } => {
                let res = self.store.create(&path, &value);
                let ok = res.is_ok();
                if ok && ephemeral {
                    self.peers.entry(peer).or_default().ephemeral.insert(path.clone());
                }
                out.push(ServiceOut::Send {
                    peer,
                    line: Notice::Created {
                        path,
                        ok,
                        value: res.err().unwrap_or(value),
                    }
                    .to_line(),
                });
            }
            Request::Delete { path } => {
                self.store.delete(&path);
                for p in self.peers.values_mut() {
                    p.ephemeral.remove(&path);
                }
            }
            Request::Watch { prefix } => {
                for (path, value) in self.store.list(&prefix) {
                    out.push(ServiceOut::Send {
                        peer,
                        line: Notice::Change(StorageChange {
                            path,
                            value: Some(value),
                        })
                        .to_line(),
                    });
                }
                self.peers.entry(peer).or_default().watches.insert(prefix);
            }
            Request::Unwatch { prefix } => {
                if let Some(p) = self.peers.get_mut(&peer) {
                    p.watches.remove(&prefix);
                }
            }
        }
    }
}

impl<S: StorageApi> Service for StorageService<S> {
    fn connect(&mut self, peer: PeerId, _now: u64) -> Vec<ServiceOut> {
        self.next += 1;
        self.peers.insert(peer, Peer::default());
        let endpoint = EndpointId::new(format!("{}.{}", self.node, self.next)).expect("non-empty");
        vec![ServiceOut::Send {
            peer,
            line: Notice::Welcome { endpoint }.to_line(),
        }]
    }

    fn receive(&mut self, peer: PeerId, line: &str, _now: u64) -> Vec<ServiceOut> {
        let mut out = Vec::new();
        if !self.peers.contains_key(&peer) {
            return out;
        }
        // changes made before this request go out first, so a watch
        // snapshot is never followed by older news
        self.pump(&mut out);
        match serde_json::from_str::<Request>(line) {
            Ok(req) => self.apply(peer, req, &mut out),
            Err(e) => out.push(ServiceOut::Send {
                peer,
                line: Notice::Error {
                    message: e.to_string(),
                }
                .to_line(),
            }),
        }
        self.pump(&mut out);
        out
    }

    fn disconnect(&mut self, peer: PeerId, _now: u64) -> Vec<ServiceOut> {
        let mut out = Vec::new();
        if let Some(p) = self.peers.remove(&peer) {
            for path in p.ephemeral {
                self.store.delete(&path);
            }
        }
        self.pump(&mut out);
        out
    }

    fn tick(&mut self, now: u64) -> Vec<ServiceOut> {
        if self.last_poll.is_some_and(|t| now < t + self.poll_ms) {
            return Vec::new();
        }
        self.last_poll = Some(now);
        let mut out = Vec::new();
        self.pump(&mut out);
        out
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::storage::MemoryStorage;

    fn lines(out: &[ServiceOut], to: PeerId) -> Vec<Notice> {
        out.iter()
            .filter_map(|o| match o {
                ServiceOut::Send { peer, line } if *peer == to => serde_json::from_str(line).ok(),
                _ => None,
            })
            .collect()
    }

    fn req(r: &Request) -> String {
        serde_json::to_string(r).unwrap()
    }

    #[test]
    fn watch_snapshot_then_changes_and_ephemeral_cleanup() {
        let mut svc = StorageService::new(MemoryStorage::new(), "n");
        let w = svc.connect(1, 0);
        assert_eq!(
            lines(&w, 1),
            vec![Notice::Welcome {
                endpoint: EndpointId::new("n.1").unwrap()
            }]
        );
        svc.connect(2, 0);
        let put = Request::Put {
            path: "/streams/s/subscribers/n.2".into(),
            value: "{}".into(),
            ephemeral: true,
        };
        svc.receive(2, &req(&put), 0);
        let out = svc.receive(1, &req(&Request::Watch { prefix: "/streams/s/".into() }), 0);
        assert_eq!(lines(&out, 1).len(), 1, "snapshot only");
        let out = svc.disconnect(2, 0);
        assert_eq!(
            lines(&out, 1),
            vec![Notice::Change(StorageChange {
                path: "/streams/s/subscribers/n.2".into(),
                value: None
            })]
        );
    }

    #[test]
    fn create_is_put_if_absent() {
        let mut svc = StorageService::new(MemoryStorage::new(), "n");
        svc.connect(1, 0);
        svc.connect(2, 0);
        let c = |v: &str| Request::Create {
            path: "/streams/s/publisher".into(),
            value: v.into(),
            ephemeral: true,
        };
        let out = svc.receive(1, &req(&c("a")), 0);
        assert!(matches!(&lines(&out, 1)[0], Notice::Created { ok: true, .. }));
        let out = svc.receive(2, &req(&c("b")), 0);
        assert_eq!(
            lines(&out, 2)[0],
            Notice::Created {
                path: "/streams/s/publisher".into(),
                ok: false,
                value: "a".into()
            }
        );
    }

    #[test]
    fn duplicates_double_every_change() {
        let mut svc = StorageService::new(MemoryStorage::new(), "n").with_duplicates(true);
        svc.connect(1, 0);
        svc.receive(1, &req(&Request::Watch { prefix: "/".into() }), 0);
        let out = svc.receive(
            1,
            &req(&Request::Put {
                path: "/x".into(),
                value: "1".into(),
                ephemeral: false,
            }),
            0,
        );
        assert_eq!(lines(&out, 1).len(), 2);
    }
}
