//! Named streams over a hierarchical key-value store with change
//! notification.
//!
//! Layout under `/streams/<name>/` (the name with `/` escaped as `%2F`):
//!
//! - `publisher` holds `{"endpoint":..,"tracks":[..]}`, written with
//!   put-if-absent so at most one publisher wins
//! - `subscribers/<endpoint>` marks a subscriber
//! - `inbox/<to>/<from>-<seq>` carries one signaling envelope, deleted by
//!   the recipient once applied
//!
//! Presence entries are ephemeral: the store removes them when the writer's
//! connection goes away.

mod backend;
mod client;
mod service;

pub use backend::{FileStorage, MemoryStorage};
pub use client::StorageClient;
pub use service::{Notice, Request, StorageService};

use serde::{Deserialize, Serialize};

use namedstream_core::{EndpointId, StreamName, TrackDescriptor};

pub const DEFAULT_POLL_MS: u64 = 50;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageChange {
    pub path: String,
    /// `None` when the entry was deleted.
    pub value: Option<String>,
}

pub trait StorageApi: Send {
    fn put(&mut self, path: &str, value: &str);

    /// Writes only if nothing is stored at `path`. On failure returns what
    /// is there.
    fn create(&mut self, path: &str, value: &str) -> Result<(), String>;

    fn get(&self, path: &str) -> Option<String>;

    fn delete(&mut self, path: &str) -> bool;

    /// Every entry whose path starts with `prefix`, in path order.
    fn list(&self, prefix: &str) -> Vec<(String, String)>;

    /// Changes since the previous call, in the order they happened for
    /// each path.
    fn changes(&mut self) -> Vec<StorageChange>;
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct PublisherEntry {
    pub endpoint: EndpointId,
    #[serde(default)]
    pub tracks: Vec<TrackDescriptor>,
}

fn escape(name: &StreamName) -> String {
    name.as_str().replace('%', "%25").replace('/', "%2F")
}

pub fn stream_prefix(name: &StreamName) -> String {
    format!("/streams/{}/", escape(name))
}

pub fn publisher_path(name: &StreamName) -> String {
    format!("{}publisher", stream_prefix(name))
}

pub fn subscriber_path(name: &StreamName, ep: &EndpointId) -> String {
    format!("{}subscribers/{ep}", stream_prefix(name))
}

pub fn inbox_path(name: &StreamName, to: &EndpointId, from: &EndpointId, seq: u64) -> String {
    format!("{}inbox/{to}/{from}-{seq:012}", stream_prefix(name))
}

/// What a path under a stream prefix stands for.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Entry {
    Publisher,
    Subscriber(EndpointId),
    Inbox { to: EndpointId, from: EndpointId, seq: u64 },
}

pub fn parse_entry(rest: &str) -> Option<Entry> {
    let parts: Vec<&str> = rest.split('/').collect();
    match parts.as_slice() {
        ["publisher"] => Some(Entry::Publisher),
        ["subscribers", ep] => EndpointId::new(*ep).map(Entry::Subscriber),
        ["inbox", to, msg] => {
            let (from, seq) = msg.rsplit_once('-')?;
            Some(Entry::Inbox {
                to: EndpointId::new(*to)?,
                from: EndpointId::new(from)?,
                seq: seq.parse().ok()?,
            })
        }
        _ => None,
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn n(s: &str) -> StreamName {
        StreamName::new(s).unwrap()
    }

    fn ep(s: &str) -> EndpointId {
        EndpointId::new(s).unwrap()
    }

    #[test]
    fn path_layout() {
        assert_eq!(publisher_path(&n("s1")), "/streams/s1/publisher");
        assert_eq!(
            subscriber_path(&n("s1"), &ep("store.2")),
            "/streams/s1/subscribers/store.2"
        );
        assert_eq!(
            inbox_path(&n("s1"), &ep("store.2"), &ep("store.1"), 7),
            "/streams/s1/inbox/store.2/store.1-000000000007"
        );
        assert_eq!(publisher_path(&n("str/15")), "/streams/str%2F15/publisher");
    }

    #[test]
    fn entries_parse_back() {
        assert_eq!(parse_entry("publisher"), Some(Entry::Publisher));
        assert_eq!(
            parse_entry("subscribers/store.2"),
            Some(Entry::Subscriber(ep("store.2")))
        );
        assert_eq!(
            parse_entry("inbox/a.1/b-c.2-000000000012"),
            Some(Entry::Inbox {
                to: ep("a.1"),
                from: ep("b-c.2"),
                seq: 12
            })
        );
        assert_eq!(parse_entry("sub/publisher"), None);
    }
}
