//! The four node roles as message handlers over their own [`KvStore`].
//!
//! Handlers never block: every multi-hop flow is continued from a pending
//! table when the next message arrives. A handler returns [`Effects`]: the
//! envelopes to send, operations that completed, and deadlines at which the
//! node wants [`Node::tick`] called.

mod audit;
mod index;
mod processing;
mod storage;

use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::keyspace::{Address, KeyReference, MasterKey};
use crate::kvstore::{KvStore, Record, StoreError};
use crate::protocol::{DenialReason, Envelope, Role, CHOREOGRAPHY_V1};

pub use audit::{AuditNode, AuditRecord};
pub use index::{IndexNode, IndexRecord};
pub use processing::{AliasRecord, OpId, PnCommand, ProcessingNode};
pub use storage::{StorageNode, StorageRecord};

/// Virtual or wall-clock milliseconds; only differences matter.
pub type Millis = u64;

pub type NodeRng = ChaCha20Rng;

pub const DEFAULT_TIMEOUT_MS: Millis = 30_000;

#[derive(Debug, Error)]
pub enum NodeError {
    #[error(transparent)]
    Store(#[from] StoreError),
    #[error("{0}")]
    Config(String),
}

/// Where a processing node finds the rest of the cluster.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Directory {
    pub audit: Address,
    pub index: Address,
    pub storage: Vec<Address>,
}

#[derive(Clone, Debug)]
pub struct NodeSettings {
    pub timeout_ms: Millis,
    pub default_chunks: usize,
    pub max_data_len: usize,
}

impl Default for NodeSettings {
    fn default() -> Self {
        Self {
            timeout_ms: DEFAULT_TIMEOUT_MS,
            default_chunks: crate::secret_split::DEFAULT_CHUNKS,
            max_data_len: crate::secret_split::DEFAULT_MAX_DATA_LEN,
        }
    }
}

/// Final result of one processing-node operation.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "outcome", rename_all = "snake_case")]
pub enum OpOutcome {
    Stored { kr: KeyReference, mk: MasterKey },
    Retrieved {
        #[serde(with = "b64")]
        data: Vec<u8>,
    },
    Updated,
    Deleted,
    Shared,
    Revoked { found: bool },
    Denied { reason: DenialReason },
    Timeout { phase: String, received: u32, expected: u32 },
    /// Local precondition failure; nothing was sent.
    Rejected { error: String },
}

impl OpOutcome {
    pub fn is_ok(&self) -> bool {
        !matches!(self, OpOutcome::Denied { .. } | OpOutcome::Timeout { .. } | OpOutcome::Rejected { .. })
    }

    pub fn denial(&self) -> Option<DenialReason> {
        match self {
            OpOutcome::Denied { reason } => Some(*reason),
            _ => None,
        }
    }

    pub fn data(&self) -> Option<&[u8]> {
        match self {
            OpOutcome::Retrieved { data } => Some(data),
            _ => None,
        }
    }
}

pub(crate) mod b64 {
    use base64::engine::general_purpose::STANDARD;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&STANDARD.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        STANDARD.decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Completion {
    pub op: OpId,
    pub outcome: OpOutcome,
}

#[derive(Debug, Default)]
pub struct Effects {
    pub sends: Vec<Envelope>,
    pub completions: Vec<Completion>,
    pub wake_at: Vec<Millis>,
}

impl Effects {
    pub(crate) fn send(&mut self, env: Envelope) {
        self.sends.push(env);
    }

    pub(crate) fn complete(&mut self, op: OpId, outcome: OpOutcome) {
        self.completions.push(Completion { op, outcome });
    }

    pub fn merge(&mut self, other: Effects) {
        self.sends.extend(other.sends);
        self.completions.extend(other.completions);
        self.wake_at.extend(other.wake_at);
    }
}

/// Counters a node keeps about traffic it refused.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeStats {
    /// Envelopes failing table validation or addressed elsewhere.
    pub rejected: u64,
    /// Deliveries whose choreography has no pending entry (late or foreign).
    pub orphan_deliveries: u64,
    /// Deliveries whose HKR did not match the pending request.
    pub hkr_mismatches: u64,
    /// Retrieves that saw chunks from different write generations.
    pub mixed_generations: u64,
}

/// A node's full persistent state plus a snapshot of its transient tables.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeDump {
    pub address: Address,
    pub role: Role,
    pub records: Vec<Record>,
    #[serde(default)]
    pub transient: Vec<serde_json::Value>,
}

#[derive(Debug)]
pub enum Node {
    Audit(AuditNode),
    Index(IndexNode),
    Storage(StorageNode),
    Processing(ProcessingNode),
}

impl Node {
    pub fn role(&self) -> Role {
        match self {
            Node::Audit(_) => Role::Audit,
            Node::Index(_) => Role::Index,
            Node::Storage(_) => Role::Storage,
            Node::Processing(_) => Role::Processing,
        }
    }

    pub fn address(&self) -> &Address {
        match self {
            Node::Audit(n) => n.address(),
            Node::Index(n) => n.address(),
            Node::Storage(n) => n.address(),
            Node::Processing(n) => n.address(),
        }
    }

    pub fn store(&self) -> &KvStore {
        match self {
            Node::Audit(n) => n.store(),
            Node::Index(n) => n.store(),
            Node::Storage(n) => n.store(),
            Node::Processing(n) => n.store(),
        }
    }

    fn stats_mut(&mut self) -> &mut NodeStats {
        match self {
            Node::Audit(n) => &mut n.stats,
            Node::Index(n) => &mut n.stats,
            Node::Storage(n) => &mut n.stats,
            Node::Processing(n) => &mut n.stats,
        }
    }

    pub fn stats(&self) -> &NodeStats {
        match self {
            Node::Audit(n) => &n.stats,
            Node::Index(n) => &n.stats,
            Node::Storage(n) => &n.stats,
            Node::Processing(n) => &n.stats,
        }
    }

    /// Validates `env` against the choreography table and dispatches it.
    pub fn handle(&mut self, env: Envelope, now: Millis) -> Effects {
        if &env.to != self.address() {
            tracing::warn!(node = %self.address(), to = %env.to, "misaddressed envelope dropped");
            self.stats_mut().rejected += 1;
            return Effects::default();
        }
        if let Err(rej) = CHOREOGRAPHY_V1.validate_step(&env, self.role()) {
            tracing::warn!(node = %self.address(), reason = ?rej.reason, detail = %rej.detail, "envelope rejected");
            self.stats_mut().rejected += 1;
            return Effects::default();
        }
        match self {
            Node::Audit(n) => n.handle(env),
            Node::Index(n) => n.handle(env),
            Node::Storage(n) => n.handle(env, now),
            Node::Processing(n) => n.handle(env, now),
        }
    }

    pub fn tick(&mut self, now: Millis) -> Effects {
        match self {
            Node::Storage(n) => n.tick(now),
            Node::Processing(n) => n.tick(now),
            Node::Audit(_) | Node::Index(_) => Effects::default(),
        }
    }

    pub fn dump(&self) -> NodeDump {
        let transient = match self {
            Node::Storage(n) => n.transient_snapshot(),
            Node::Processing(n) => n.transient_snapshot(),
            Node::Audit(n) => n.transient_snapshot(),
            Node::Index(_) => Vec::new(),
        };
        NodeDump {
            address: self.address().clone(),
            role: self.role(),
            records: self.store().records().cloned().collect(),
            transient,
        }
    }

    /// Simulates a crash and restart: transient tables are lost and the
    /// store is rebuilt from its log. The random source is handed back to
    /// the new incarnation.
    pub fn restart(self) -> Result<Node, NodeError> {
        Ok(match self {
            Node::Audit(n) => {
                let (addr, store, rng, index) = n.into_parts();
                Node::Audit(AuditNode::new(addr, reopen(store)?, rng, index)?)
            }
            Node::Index(n) => {
                let (addr, store) = n.into_parts();
                Node::Index(IndexNode::new(addr, reopen(store)?))
            }
            Node::Storage(n) => {
                let (addr, store, rng, timeout) = n.into_parts();
                Node::Storage(StorageNode::new(addr, reopen(store)?, rng, timeout))
            }
            Node::Processing(n) => {
                let (identity, directory, store, rng, settings) = n.into_parts();
                Node::Processing(ProcessingNode::new(identity, directory, reopen(store)?, rng, settings)?)
            }
        })
    }
}

fn reopen(store: KvStore) -> Result<KvStore, StoreError> {
    match store.path() {
        Some(path) => {
            let path = path.to_path_buf();
            drop(store);
            KvStore::open(path)
        }
        None => Ok(KvStore::from_lines(store.log_lines())),
    }
}

/// Log file name for a node's store: `<role>-<node-id>.log`.
pub fn log_file_name(role: Role, node_id: &str) -> String {
    let safe: String = node_id.chars().map(|c| if c.is_ascii_alphanumeric() || c == '-' || c == '_' || c == '.' { c } else { '_' }).collect();
    format!("{}-{}.log", role.as_str(), safe)
}

pub(crate) fn encode_record<T: Serialize>(v: &T) -> Vec<u8> {
    serde_json::to_vec(v).expect("records serialize")
}

pub(crate) fn decode_record<T: serde::de::DeserializeOwned>(bytes: &[u8]) -> Option<T> {
    serde_json::from_slice(bytes).ok()
}
