//! Websocket transport for runs against a live broker.

use std::collections::BTreeMap;
use std::sync::mpsc;
use std::time::Duration;

use futures_util::{SinkExt, StreamExt};
use namedstream_core::service::PeerId;
use tokio::runtime::Runtime;
use tokio::sync::mpsc as amp;
use tokio_tungstenite::tungstenite::Message;

/// `None` on the inbound side means the connection is gone.
type Inbound = (PeerId, Option<String>);

pub(crate) struct RealNet {
    rt: Runtime,
    tx: mpsc::Sender<Inbound>,
    rx: mpsc::Receiver<Inbound>,
    out: BTreeMap<PeerId, amp::UnboundedSender<Option<String>>>,
}

impl RealNet {
    pub fn new() -> std::io::Result<Self> {
        let rt = tokio::runtime::Builder::new_multi_thread()
            .worker_threads(2)
            .enable_all()
            .build()?;
        let (tx, rx) = mpsc::channel();
        Ok(Self {
            rt,
            tx,
            rx,
            out: BTreeMap::new(),
        })
    }

    pub fn open(&mut self, peer: PeerId, url: &str) {
        let (otx, mut orx) = amp::unbounded_channel::<Option<String>>();
        self.out.insert(peer, otx);
        let tx = self.tx.clone();
        let url = url.to_string();
        self.rt.spawn(async move {
            let ws = match tokio_tungstenite::connect_async(url.as_str()).await {
                Ok((ws, _)) => ws,
                Err(_) => {
                    let _ = tx.send((peer, None));
                    return;
                }
            };
            let (mut sink, mut stream) = ws.split();
            let writer = tokio::spawn(async move {
                while let Some(item) = orx.recv().await {
                    match item {
                        Some(line) => {
                            if sink.send(Message::text(line)).await.is_err() {
                                break;
                            }
                        }
                        None => {
                            let _ = sink.close().await;
                            break;
                        }
                    }
                }
            });
            while let Some(Ok(msg)) = stream.next().await {
                match msg {
                    Message::Text(t) => {
                        if tx.send((peer, Some(t.to_string()))).is_err() {
                            break;
                        }
                    }
                    Message::Close(_) => break,
                    _ => {}
                }
            }
            writer.abort();
            let _ = tx.send((peer, None));
        });
    }

    pub fn send(&mut self, peer: PeerId, line: String) {
        if let Some(o) = self.out.get(&peer) {
            let _ = o.send(Some(line));
        }
    }

    pub fn close(&mut self, peer: PeerId) {
        if let Some(o) = self.out.remove(&peer) {
            let _ = o.send(None);
        }
    }

    pub fn try_recv(&self) -> Option<Inbound> {
        self.rx.try_recv().ok()
    }

    pub fn recv_timeout(&self, wait: Duration) -> Option<Inbound> {
        self.rx.recv_timeout(wait).ok()
    }
}
