//! Server side of a named-stream service, sans-IO.
//!
//! A service sees numbered transport peers and lines of text. Whatever it
//! wants done comes back as [`ServiceOut`] values for the driver to carry
//! out: the simulator queues them on virtual time, the network server
//! writes them to websockets and spawns webhook requests.

pub type PeerId = u64;

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum ServiceOut {
    Send { peer: PeerId, line: String },
    Close { peer: PeerId },
    /// Fire-and-forget HTTP POST of a JSON body.
    Webhook { url: String, body: String },
}

pub trait Service: Send {
    fn connect(&mut self, peer: PeerId, now: u64) -> Vec<ServiceOut>;

    fn receive(&mut self, peer: PeerId, line: &str, now: u64) -> Vec<ServiceOut>;

    fn disconnect(&mut self, peer: PeerId, now: u64) -> Vec<ServiceOut>;

    /// Periodic housekeeping (garbage collection, storage polling).
    fn tick(&mut self, _now: u64) -> Vec<ServiceOut> {
        Vec::new()
    }
}
