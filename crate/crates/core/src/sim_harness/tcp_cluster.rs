use std::collections::BTreeMap;
use std::net::{SocketAddr, TcpListener};
use std::sync::{Arc, Mutex};

use super::{build_nodes, ClusterSpec, HarnessError};
use crate::keyspace::Address;
use crate::nodes::{Node, NodeDump, OpOutcome, PnCommand};
use crate::transport::tcp::{NodeHandle, TcpTransport};
use crate::transport::Transcript;

/// The same roster as a [`super::SimCluster`], each node behind its own
/// loopback socket. Nodes keep their logical addresses; a route table maps
/// them to sockets, so dumps compare directly with simulation.
#[derive(Debug)]
pub struct TcpCluster {
    order: Vec<Address>,
    handles: BTreeMap<Address, NodeHandle>,
    transport: Arc<TcpTransport>,
}

fn bind() -> Result<(TcpListener, SocketAddr), HarnessError> {
    let l = TcpListener::bind("127.0.0.1:0")?;
    let a = l.local_addr()?;
    Ok((l, a))
}

impl TcpCluster {
    pub fn start(spec: &ClusterSpec) -> Result<Self, HarnessError> {
        let nodes = build_nodes(spec)?;
        let mut listeners = Vec::new();
        let mut routes = BTreeMap::new();
        for n in &nodes {
            let (l, a) = bind()?;
            routes.insert(n.address().clone(), a);
            listeners.push(l);
        }
        let transport = TcpTransport::new(routes, Some(Arc::new(Mutex::new(Transcript::digests_only()))));
        let mut order = Vec::new();
        let mut handles = BTreeMap::new();
        for (node, l) in nodes.into_iter().zip(listeners) {
            let a = node.address().clone();
            order.push(a.clone());
            handles.insert(a, NodeHandle::spawn(node, l, Arc::clone(&transport))?);
        }
        Ok(Self { order, handles, transport })
    }

    fn handle(&self, id: &str) -> Result<&NodeHandle, HarnessError> {
        Address::new(id)
            .ok()
            .and_then(|a| self.handles.get(&a))
            .ok_or_else(|| HarnessError::Config(format!("unknown node {id}")))
    }

    pub fn socket_of(&self, id: &str) -> Result<SocketAddr, HarnessError> {
        Ok(self.handle(id)?.local_addr())
    }

    /// Milliseconds since the cluster started.
    pub fn now(&self) -> crate::nodes::Millis {
        self.transport.now()
    }

    pub fn run_op(&self, actor: &str, cmd: PnCommand) -> Result<OpOutcome, HarnessError> {
        Ok(self.handle(actor)?.submit(cmd)?)
    }

    pub fn dumps(&self) -> Result<Vec<NodeDump>, HarnessError> {
        self.order.iter().map(|a| Ok(self.handles[a].dump()?)).collect()
    }

    pub fn transcript(&self) -> Transcript {
        self.transport.transcript().map(|t| t.lock().expect("transcript lock").clone()).unwrap_or_default()
    }

    /// Stops a node, replays its store, and serves it on a fresh port.
    pub fn restart(&mut self, id: &str) -> Result<(), HarnessError> {
        let a = Address::new(id).map_err(|e| HarnessError::Config(e.to_string()))?;
        let h = self.handles.remove(&a).ok_or_else(|| HarnessError::Config(format!("unknown node {id}")))?;
        let node = h.shutdown().restart()?;
        let (l, sock) = bind()?;
        self.transport.add_route(a.clone(), sock);
        self.handles.insert(a, NodeHandle::spawn(node, l, Arc::clone(&self.transport))?);
        Ok(())
    }

    pub fn shutdown(mut self) -> Vec<Node> {
        self.order.iter().filter_map(|a| self.handles.remove(a)).map(NodeHandle::shutdown).collect()
    }
}
