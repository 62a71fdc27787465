//! Scenario execution over the simulated network, plus the two offline
//! checkers: the collusion analyzer and the transcript leak auditor.

pub mod adversary;
mod cluster;
pub mod leak_audit;
pub mod scenario;
mod tcp_cluster;

use thiserror::Error;

pub use cluster::{build_node, build_nodes, ClusterSpec, NodeSpec, SimCluster};
pub use tcp_cluster::TcpCluster;

#[derive(Debug, Error)]
pub enum HarnessError {
    #[error("cluster: {0}")]
    Config(String),
    #[error("scenario: {0}")]
    Scenario(String),
    #[error(transparent)]
    Node(#[from] crate::nodes::NodeError),
    #[error(transparent)]
    Transport(#[from] crate::transport::TransportError),
    #[error(transparent)]
    Io(#[from] std::io::Error),
}
