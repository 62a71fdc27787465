use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::path::PathBuf;

use rand::{RngCore, SeedableRng};
use serde::{Deserialize, Serialize};

use super::HarnessError;
use crate::keyspace::{Address, Identity};
use crate::kvstore::KvStore;
use crate::nodes::{
    log_file_name, AuditNode, Completion, Directory, Effects, IndexNode, Millis, Node, NodeDump, NodeRng, NodeSettings, OpId, OpOutcome,
    PnCommand, ProcessingNode, StorageNode, DEFAULT_TIMEOUT_MS,
};
use crate::protocol::Role;
use crate::secret_split::{DEFAULT_CHUNKS, DEFAULT_MAX_DATA_LEN};
use crate::transport::sim::{SimNet, SimNetConfig};
use crate::transport::Transcript;

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct NodeSpec {
    pub id: String,
    pub role: Role,
    /// Identity name of a processing node; defaults to its id.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub identity: Option<String>,
}

impl NodeSpec {
    pub fn new(id: &str, role: Role) -> Self {
        Self { id: id.into(), role, identity: None }
    }

    pub fn processing(id: &str, name: &str) -> Self {
        Self { id: id.into(), role: Role::Processing, identity: Some(name.into()) }
    }
}

#[derive(Clone, Debug)]
pub struct ClusterSpec {
    pub nodes: Vec<NodeSpec>,
    pub seed: u64,
    pub timeout_ms: Millis,
    pub default_chunks: usize,
    pub net: SimNetConfig,
    /// File-backed stores under this directory; in-memory when absent.
    pub data_dir: Option<PathBuf>,
}

impl ClusterSpec {
    pub fn new(nodes: Vec<NodeSpec>, seed: u64) -> Self {
        Self {
            nodes,
            seed,
            timeout_ms: DEFAULT_TIMEOUT_MS,
            default_chunks: DEFAULT_CHUNKS,
            net: SimNetConfig { seed, ..SimNetConfig::default() },
            data_dir: None,
        }
    }

    /// One audit node `an`, one index node `in`, storage `sn1..`, and
    /// processing nodes `pn-<name>` for each name.
    pub fn standard(storage: usize, names: &[&str], seed: u64) -> Self {
        let mut nodes = vec![NodeSpec::new("an", Role::Audit), NodeSpec::new("in", Role::Index)];
        nodes.extend((1..=storage).map(|i| NodeSpec::new(&format!("sn{i}"), Role::Storage)));
        nodes.extend(names.iter().map(|n| NodeSpec::processing(&format!("pn-{}", n.to_lowercase()), n)));
        Self::new(nodes, seed)
    }

    fn of_role(&self, role: Role) -> impl Iterator<Item = &NodeSpec> {
        self.nodes.iter().filter(move |n| n.role == role)
    }

    pub fn identity(&self, spec: &NodeSpec) -> Result<Identity, HarnessError> {
        let name = spec.identity.clone().unwrap_or_else(|| spec.id.clone());
        Identity::new(name, addr(&spec.id)?).map_err(|e| HarnessError::Config(e.to_string()))
    }

    pub fn directory(&self) -> Result<Directory, HarnessError> {
        let one = |role: Role| -> Result<Address, HarnessError> {
            let found: Vec<&NodeSpec> = self.of_role(role).collect();
            match found.as_slice() {
                [one] => addr(&one.id),
                _ => Err(HarnessError::Config(format!("expected exactly one {role} node, found {}", found.len()))),
            }
        };
        let storage = self.of_role(Role::Storage).map(|n| addr(&n.id)).collect::<Result<Vec<_>, _>>()?;
        if storage.is_empty() {
            return Err(HarnessError::Config("no storage nodes".into()));
        }
        Ok(Directory { audit: one(Role::Audit)?, index: one(Role::Index)?, storage })
    }

    pub fn validate(&self) -> Result<(), HarnessError> {
        self.directory()?;
        let mut ids = std::collections::BTreeSet::new();
        let mut names = std::collections::BTreeSet::new();
        for n in &self.nodes {
            addr(&n.id)?;
            if !ids.insert(n.id.as_str()) {
                return Err(HarnessError::Config(format!("duplicate node id {:?}", n.id)));
            }
            if n.role == Role::Processing {
                let id = self.identity(n)?;
                if !names.insert(id.name.clone()) {
                    return Err(HarnessError::Config(format!("duplicate identity {:?}", id.name)));
                }
            }
        }
        Ok(())
    }

    fn store_for(&self, spec: &NodeSpec) -> Result<KvStore, HarnessError> {
        Ok(match &self.data_dir {
            Some(dir) => {
                std::fs::create_dir_all(dir)?;
                KvStore::open(dir.join(log_file_name(spec.role, &spec.id))).map_err(crate::nodes::NodeError::from)?
            }
            None => KvStore::in_memory(),
        })
    }
}

fn addr(id: &str) -> Result<Address, HarnessError> {
    Address::new(id).map_err(|e| HarnessError::Config(e.to_string()))
}

/// Instantiates every node of the roster, in roster order. Each node gets
/// its own rng stream derived from the cluster seed.
pub fn build_nodes(spec: &ClusterSpec) -> Result<Vec<Node>, HarnessError> {
    spec.validate()?;
    let directory = spec.directory()?;
    let mut seeds = NodeRng::seed_from_u64(spec.seed);
    spec.nodes.iter().map(|n| make_node(spec, &directory, n, NodeRng::seed_from_u64(seeds.next_u64()))).collect()
}

/// The one roster node named `id`, built exactly as [`build_nodes`] would.
pub fn build_node(spec: &ClusterSpec, id: &str) -> Result<Node, HarnessError> {
    spec.validate()?;
    let directory = spec.directory()?;
    let pos = spec.nodes.iter().position(|n| n.id == id).ok_or_else(|| HarnessError::Config(format!("node {id:?} is not in the roster")))?;
    let mut seeds = NodeRng::seed_from_u64(spec.seed);
    let seed = (0..=pos).map(|_| seeds.next_u64()).last().expect("at least one draw");
    make_node(spec, &directory, &spec.nodes[pos], NodeRng::seed_from_u64(seed))
}

fn make_node(spec: &ClusterSpec, directory: &Directory, n: &NodeSpec, rng: NodeRng) -> Result<Node, HarnessError> {
    let settings = NodeSettings { timeout_ms: spec.timeout_ms, default_chunks: spec.default_chunks, max_data_len: DEFAULT_MAX_DATA_LEN };
    let store = spec.store_for(n)?;
    let a = addr(&n.id)?;
    Ok(match n.role {
        Role::Audit => Node::Audit(AuditNode::new(a, store, rng, directory.index.clone())?),
        Role::Index => Node::Index(IndexNode::new(a, store)),
        Role::Storage => Node::Storage(StorageNode::new(a, store, rng, spec.timeout_ms)),
        Role::Processing => Node::Processing(ProcessingNode::new(spec.identity(n)?, directory.clone(), store, rng, settings)?),
    })
}

/// A whole cluster in one thread over [`SimNet`], driven by virtual time.
#[derive(Debug)]
pub struct SimCluster {
    spec: ClusterSpec,
    order: Vec<Address>,
    nodes: BTreeMap<Address, Node>,
    net: SimNet,
    timers: BinaryHeap<Reverse<(Millis, Address)>>,
    outcomes: BTreeMap<OpId, OpOutcome>,
    completed: Vec<Completion>,
    next_op: u64,
}

impl SimCluster {
    pub fn new(spec: ClusterSpec) -> Result<Self, HarnessError> {
        let built = build_nodes(&spec)?;
        let mut net = SimNet::new(spec.net.clone());
        let mut order = Vec::new();
        let mut nodes = BTreeMap::new();
        for node in built {
            net.register(node.address().clone());
            order.push(node.address().clone());
            nodes.insert(node.address().clone(), node);
        }
        Ok(Self { spec, order, nodes, net, timers: BinaryHeap::new(), outcomes: BTreeMap::new(), completed: Vec::new(), next_op: 0 })
    }

    pub fn spec(&self) -> &ClusterSpec {
        &self.spec
    }

    pub fn now(&self) -> Millis {
        self.net.now()
    }

    pub fn net_mut(&mut self) -> &mut SimNet {
        &mut self.net
    }

    pub fn transcript(&self) -> &Transcript {
        self.net.transcript()
    }

    pub fn node(&self, id: &str) -> Option<&Node> {
        self.nodes.get(&Address::new(id).ok()?)
    }

    pub fn nodes(&self) -> impl Iterator<Item = &Node> {
        self.order.iter().map(|a| &self.nodes[a])
    }

    pub fn roles(&self) -> BTreeMap<Address, Role> {
        self.nodes.iter().map(|(a, n)| (a.clone(), n.role())).collect()
    }

    pub fn identity(&self, id: &str) -> Option<Identity> {
        match self.node(id)? {
            Node::Processing(pn) => Some(pn.identity().clone()),
            _ => None,
        }
    }

    /// Processing-node id whose identity carries `name`.
    pub fn node_of_identity(&self, name: &str) -> Option<String> {
        self.nodes.values().find_map(|n| match n {
            Node::Processing(pn) if pn.identity().name == name => Some(pn.address().to_string()),
            _ => None,
        })
    }

    fn apply(&mut self, from: &Address, fx: Effects) {
        for env in fx.sends {
            if let Err(e) = self.net.send(&env) {
                tracing::warn!(%from, error = %e, "send failed");
            }
        }
        for c in fx.completions {
            self.outcomes.insert(c.op, c.outcome.clone());
            self.completed.push(c);
        }
        for t in fx.wake_at {
            self.timers.push(Reverse((t, from.clone())));
        }
    }

    pub fn submit(&mut self, actor: &str, cmd: PnCommand) -> Result<OpId, HarnessError> {
        let a = addr(actor)?;
        self.next_op += 1;
        let op = OpId(self.next_op);
        let now = self.now();
        let down = self.net.is_down(&a);
        let fx = match self.nodes.get_mut(&a) {
            Some(Node::Processing(pn)) if !down => pn.submit(op, cmd, now),
            Some(Node::Processing(_)) => {
                let mut fx = Effects::default();
                fx.complete(op, OpOutcome::Rejected { error: format!("{actor} is down") });
                fx
            }
            _ => return Err(HarnessError::Config(format!("{actor} is not a processing node"))),
        };
        self.apply(&a, fx);
        Ok(op)
    }

    /// Processes the next delivery or timer. False when nothing is left.
    pub fn step(&mut self) -> bool {
        let timer = self.timers.peek().map(|Reverse((t, _))| *t);
        let delivery = self.net.next_delivery_time();
        match (timer, delivery) {
            (None, None) => false,
            (Some(t), d) if d.is_none_or(|d| t <= d) => {
                let Reverse((t, a)) = self.timers.pop().expect("peeked");
                self.net.advance_to(t);
                if !self.net.is_down(&a) {
                    let now = self.now();
                    let fx = self.nodes.get_mut(&a).expect("timer owner").tick(now);
                    self.apply(&a, fx);
                }
                true
            }
            _ => {
                if let Some(env) = self.net.next_delivery() {
                    let to = env.to.clone();
                    let now = self.now();
                    let fx = self.nodes.get_mut(&to).expect("registered").handle(env, now);
                    self.apply(&to, fx);
                }
                true
            }
        }
    }

    pub fn run_until_idle(&mut self) {
        while self.step() {}
    }

    /// Steps until `op` completes; None if the cluster went idle first.
    pub fn run_until(&mut self, op: OpId) -> Option<OpOutcome> {
        while !self.outcomes.contains_key(&op) {
            if !self.step() {
                break;
            }
        }
        self.outcomes.get(&op).cloned()
    }

    pub fn run_op(&mut self, actor: &str, cmd: PnCommand) -> Result<OpOutcome, HarnessError> {
        let op = self.submit(actor, cmd)?;
        self.run_until(op).ok_or_else(|| HarnessError::Scenario(format!("{op} never completed")))
    }

    pub fn outcome(&self, op: OpId) -> Option<&OpOutcome> {
        self.outcomes.get(&op)
    }

    /// Completions since the last call, in completion order.
    pub fn drain_completed(&mut self) -> Vec<Completion> {
        std::mem::take(&mut self.completed)
    }

    /// Crash and restart: transient tables are lost, the store is replayed.
    pub fn restart(&mut self, id: &str) -> Result<(), HarnessError> {
        let a = addr(id)?;
        let node = self.nodes.remove(&a).ok_or_else(|| HarnessError::Config(format!("unknown node {id}")))?;
        let node = node.restart()?;
        self.nodes.insert(a, node);
        Ok(())
    }

    pub fn set_down(&mut self, id: &str, down: bool) -> Result<(), HarnessError> {
        let a = addr(id)?;
        if !self.nodes.contains_key(&a) {
            return Err(HarnessError::Config(format!("unknown node {id}")));
        }
        self.net.set_down(&a, down);
        Ok(())
    }

    /// Every node's dump, in roster order.
    pub fn dumps(&self) -> Vec<NodeDump> {
        self.nodes().map(Node::dump).collect()
    }
}
