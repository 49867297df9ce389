//! Connectors binding an endpoint session to a named-stream service.
//!
//! | scheme             | service                         | topology |
//! |--------------------|---------------------------------|----------|
//! | `mem`              | in-process hub                  | mesh     |
//! | `broker`/`rtclite` | websocket broker at `/ws`       | mesh     |
//! | `storage`          | key-value store with watches    | mesh     |
//! | `sfu`              | forwarding server at `/sfu`     | star     |
//! | split              | several of the above at once    | either   |

pub mod backoff;
pub mod mesh;
pub mod sfu;
pub mod split;
pub mod storage;

pub use backoff::Backoff;
pub use mesh::MeshClient;
pub use sfu::{SfuClient, SFU_ID};
pub use split::{SplitChild, SplitConnector};
pub use storage::{FileStorage, MemoryStorage, StorageApi, StorageClient, StorageService};

use namedstream_core::{Connector, ConnectorError, StreamAddress};

/// Service name of the in-process hub.
pub const MEM_SERVICE: &str = "mem";
/// Default service name of the store.
pub const STORAGE_SERVICE: &str = "storage";

/// Where a connector for `addr` opens its connections. Sessions whose
/// addresses map to the same service (and scheme) can share a connector.
pub fn service_for(addr: &StreamAddress) -> Result<String, ConnectorError> {
    let with_path = |path: &str| -> Result<String, ConnectorError> {
        let origin = addr.origin().ok_or_else(|| {
            ConnectorError::Invalid(format!("`{}` needs a URL locator", addr.scheme))
        })?;
        Ok(match addr.param("token") {
            Some(t) => format!("{origin}{path}?token={t}"),
            None => format!("{origin}{path}"),
        })
    };
    match addr.scheme.as_str() {
        "mem" => Ok(addr.param("hub").unwrap_or(MEM_SERVICE).to_string()),
        "broker" | "rtclite" => with_path("/ws"),
        "sfu" => with_path("/sfu"),
        "storage" => Ok(addr.param("store").unwrap_or(STORAGE_SERVICE).to_string()),
        other => Err(ConnectorError::Unsupported(format!("scheme `{other}`"))),
    }
}

pub fn connector_for(addr: &StreamAddress) -> Result<Box<dyn Connector>, ConnectorError> {
    let service = service_for(addr)?;
    Ok(match addr.scheme.as_str() {
        "mem" | "broker" | "rtclite" => Box::new(MeshClient::new(addr.scheme.clone(), service)),
        "sfu" => Box::new(SfuClient::new(service)),
        "storage" => Box::new(StorageClient::new(service)),
        other => return Err(ConnectorError::Unsupported(format!("scheme `{other}`"))),
    })
}

#[cfg(test)]
mod tests {
    use super::*;

    fn svc(text: &str) -> String {
        service_for(&StreamAddress::parse(text).unwrap()).unwrap()
    }

    #[test]
    fn services_from_addresses() {
        assert_eq!(svc("rtclite:wss://example.com/str/15"), "wss://example.com/ws");
        assert_eq!(svc("broker:ws://127.0.0.1:9000/a?token=t"), "ws://127.0.0.1:9000/ws?token=t");
        assert_eq!(svc("sfu:ws://h/room/1"), "ws://h/sfu");
        assert_eq!(svc("mem:id:s1"), "mem");
        assert_eq!(svc("storage:id:s1?store=files"), "files");
        assert!(service_for(&StreamAddress::parse("sfu:id:s1").unwrap()).is_err());
    }
}
