//! Named-stream publish/subscribe building blocks: the stream model, the
//! signaling wire protocol, stream addresses and the endpoint engine.

pub mod address;
pub mod connector;
pub mod endpoint;
pub mod service;
pub mod stream;
pub mod wire;

pub use address::{parse_stream_url, Mode, StreamAddress, StreamUrl};
pub use connector::{ConnId, Connector, ConnectorError, Io, IoCmd, SessionTable, Topology};
pub use endpoint::{EndpointSession, MediaFrame, MediaSource, Role, SessionError, SessionEvent};
pub use stream::{hash_name, EndpointId, StreamName, StreamRecord, StreamRef, TrackDescriptor};
pub use service::{PeerId, Service, ServiceOut};
pub use wire::{MessageKind, SignalEnvelope};
