//! Webhook pings on publish, subscribe and stop.
//!
//! Delivery is at most once per URL with a single retry when the
//! connection itself fails. Nothing here ever waits on the signaling path.

use std::sync::atomic::{AtomicU64, Ordering};
use std::sync::Arc;
use std::time::Duration;

use serde::{Deserialize, Serialize};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum HookEvent {
    Publish,
    Subscribe,
    Stop,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct HookBody {
    pub event: HookEvent,
    pub stream: String,
    pub endpoint: String,
    pub ts: u64,
}

pub fn body(event: HookEvent, stream: &str, endpoint: &str, ts: u64) -> String {
    serde_json::to_string(&HookBody {
        event,
        stream: stream.to_string(),
        endpoint: endpoint.to_string(),
        ts,
    })
    .expect("hook body serializes")
}

/// Space-separated list of absolute http(s) URLs. Anything else is skipped.
pub fn parse_targets(list: &str) -> Vec<String> {
    list.split_whitespace()
        .filter(|u| match url::Url::parse(u) {
            Ok(url) => matches!(url.scheme(), "http" | "https") && url.has_host(),
            Err(_) => {
                tracing::warn!(url = %u, "ignoring malformed webhook url");
                false
            }
        })
        .map(str::to_string)
        .collect()
}

#[derive(Debug, Default)]
pub struct HookMetrics {
    pub delivered: AtomicU64,
    pub retried: AtomicU64,
    pub failed: AtomicU64,
}

impl HookMetrics {
    pub fn snapshot(&self) -> (u64, u64, u64) {
        (
            self.delivered.load(Ordering::Relaxed),
            self.retried.load(Ordering::Relaxed),
            self.failed.load(Ordering::Relaxed),
        )
    }
}

#[derive(Clone)]
pub struct Dispatcher {
    client: reqwest::Client,
    pub metrics: Arc<HookMetrics>,
}

impl Dispatcher {
    pub fn new(timeout: Duration) -> Self {
        let client = reqwest::Client::builder()
            .timeout(timeout)
            .connect_timeout(timeout)
            .build()
            .expect("http client");
        Self {
            client,
            metrics: Arc::new(HookMetrics::default()),
        }
    }

    /// Queues one POST in the background.
    pub fn spawn(&self, url: String, body: String) {
        let this = self.clone();
        tokio::spawn(async move { this.deliver(&url, body).await });
    }

    pub async fn deliver(&self, url: &str, body: String) -> bool {
        for attempt in 0..2 {
            let res = self
                .client
                .post(url)
                .header("content-type", "application/json")
                .body(body.clone())
                .send()
                .await;
            match res {
                Ok(resp) => {
                    if resp.status().is_success() {
                        self.metrics.delivered.fetch_add(1, Ordering::Relaxed);
                        return true;
                    }
                    // the sink saw it; a retry could duplicate
                    tracing::warn!(%url, status = %resp.status(), "webhook rejected");
                    break;
                }
                Err(e) if e.is_connect() && attempt == 0 => {
                    self.metrics.retried.fetch_add(1, Ordering::Relaxed);
                    tracing::debug!(%url, error = %e, "webhook connect failed, retrying");
                }
                Err(e) => {
                    tracing::warn!(%url, error = %e, "webhook failed");
                    break;
                }
            }
        }
        self.metrics.failed.fetch_add(1, Ordering::Relaxed);
        false
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn targets_are_space_separated_absolute_urls() {
        let t = parse_targets("http://a/x  https://b:8443/y ftp://c nope");
        assert_eq!(t, vec!["http://a/x", "https://b:8443/y"]);
        assert!(parse_targets("").is_empty());
    }

    #[test]
    fn body_shape() {
        assert_eq!(
            body(HookEvent::Stop, "s/1", "ep-1-2", 17),
            r#"{"event":"stop","stream":"s/1","endpoint":"ep-1-2","ts":17}"#
        );
    }
}
