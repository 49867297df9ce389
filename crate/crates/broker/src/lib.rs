//! The named-stream broker: a signaling relay over websockets, plus the
//! simulated forwarding server used for star topologies.

pub mod registry;
pub mod server;
pub mod webhook;

pub use registry::{Mode, Registry, RegistryConfig};
pub use server::{BrokerHandle, BrokerState, ServerConfig};
