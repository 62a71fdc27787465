//! Private data store: data is split into XOR shares spread across storage
//! nodes, indexed under anonymizing keys, and reachable only through key
//! references issued by an audit node.

pub mod keyspace;
pub mod kvstore;
pub mod nodes;
pub mod protocol;
pub mod secret_split;
pub mod sim_harness;
pub mod transport;
