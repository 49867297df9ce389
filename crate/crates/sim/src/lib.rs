//! Deterministic multi-endpoint simulator for named streams.
//!
//! A [`World`] runs endpoint sessions on hosts, connects them through the
//! real connector implementations to simulated services (hub, broker,
//! forwarding server, store) and advances a virtual clock. Scenarios are
//! scripts of timed actions and expectations; the builders produce the
//! canonical call, conference and broadcast-tree setups.

pub mod build;
mod real;
pub mod report;
pub mod run;
pub mod scenario;
pub mod world;

pub use build::{build_broadcast_tree, build_call, build_conference, subtree, tree_nodes, TreeNode};
pub use report::{Assertion, TopologyReport};
pub use run::{run, run_in, run_scenario, Outcome};
pub use scenario::{Action, Expect, LinkKind, Scenario, ScenarioError};
pub use world::{Entry, Latency, Logged, PublishReq, SubscribeReq, World, WorldConfig};

use namedstream_core::SessionError;
use thiserror::Error;

#[derive(Debug, Error)]
pub enum SimError {
    #[error("unknown host `{0}`")]
    UnknownHost(String),
    #[error("host `{0}` already exists")]
    DuplicateHost(String),
    #[error("unknown session `{0}`")]
    UnknownSession(String),
    #[error("bad parameter: {0}")]
    Param(String),
    #[error("setup: {0}")]
    Setup(String),
    #[error(transparent)]
    Session(#[from] SessionError),
    #[error(transparent)]
    Scenario(#[from] ScenarioError),
}
