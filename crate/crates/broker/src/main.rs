use std::time::Duration;

use clap::Parser;
use namedstream_broker::{BrokerHandle, ServerConfig};
use tracing_subscriber::EnvFilter;

/// Named-stream signaling broker. Serves `/ws` (signaling relay), `/sfu`
/// (forwarding server) and `/healthz`.
#[derive(Parser, Debug)]
#[command(version)]
struct Args {
    #[arg(long, default_value = "127.0.0.1:8080")]
    listen: String,
    /// Bearer token required at the websocket handshake.
    #[arg(long)]
    token: Option<String>,
    /// Seconds an empty stream is kept before it is dropped.
    #[arg(long, default_value_t = 60)]
    idle_gc_seconds: u64,
    #[arg(long, default_value = "info")]
    log_level: String,
    /// Serve the `/streams` registry snapshot (always on in debug builds).
    #[arg(long)]
    debug_routes: bool,
}

#[tokio::main]
async fn main() -> std::io::Result<()> {
    let args = Args::parse();
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_new(&args.log_level).unwrap_or_else(|_| EnvFilter::new("info")))
        .init();
    let cfg = ServerConfig {
        token: args.token,
        idle_gc: Duration::from_secs(args.idle_gc_seconds),
        debug_routes: args.debug_routes || cfg!(debug_assertions),
        ..ServerConfig::default()
    };
    let handle = BrokerHandle::start(&args.listen, cfg).await?;
    tracing::info!(addr = %handle.addr, "listening");
    handle.run().await;
    Ok(())
}
