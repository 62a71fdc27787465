//! One node per listening socket. Peers exchange length-prefixed envelope
//! frames over pooled connections; operators send control frames
//! (`{"control": {...}}`) on the same port and get one reply frame back.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap, HashMap};
use std::io::{BufReader, BufWriter};
use std::net::{Shutdown, SocketAddr, TcpListener, TcpStream, ToSocketAddrs};
use std::sync::atomic::{AtomicBool, Ordering};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::sync::{Arc, Mutex, RwLock};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use serde::{Deserialize, Serialize};
use serde_json::Value;

use super::{EventKind, Transcript, TransportError};
use crate::keyspace::{Address, Identity};
use crate::nodes::{Effects, Millis, Node, NodeDump, NodeStats, OpId, OpOutcome, PnCommand};
use crate::protocol::{encode, read_frame, write_frame, Envelope, ProtocolError, Role, MAX_FRAME_LEN};

const IDLE_POLL: Duration = Duration::from_millis(200);

/// Operator request carried in a control frame.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "request", rename_all = "snake_case")]
pub enum ControlRequest {
    Submit { command: PnCommand },
    /// Who the node is: address, role, and identity for processing nodes.
    Whoami,
    Dump,
    Stats,
    Shutdown,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "reply", rename_all = "snake_case")]
pub enum ControlReply {
    Outcome { outcome: OpOutcome },
    Whoami { address: Address, role: Role, identity: Option<Identity> },
    Dump { dump: NodeDump },
    Stats { stats: NodeStats },
    Ok,
    Error { message: String },
}

/// Outbound side shared by every node in a process.
#[derive(Debug)]
pub struct TcpTransport {
    routes: RwLock<BTreeMap<Address, SocketAddr>>,
    pool: Mutex<HashMap<SocketAddr, BufWriter<TcpStream>>>,
    transcript: Option<Arc<Mutex<Transcript>>>,
    epoch: Instant,
    connect_timeout: Duration,
}

impl TcpTransport {
    pub fn new(routes: BTreeMap<Address, SocketAddr>, transcript: Option<Arc<Mutex<Transcript>>>) -> Arc<Self> {
        Arc::new(Self {
            routes: RwLock::new(routes),
            pool: Mutex::new(HashMap::new()),
            transcript,
            epoch: Instant::now(),
            connect_timeout: Duration::from_secs(2),
        })
    }

    pub fn add_route(&self, addr: Address, sock: SocketAddr) {
        self.routes.write().expect("routes lock").insert(addr, sock);
    }

    pub fn now(&self) -> Millis {
        self.epoch.elapsed().as_millis() as Millis
    }

    pub fn transcript(&self) -> Option<&Arc<Mutex<Transcript>>> {
        self.transcript.as_ref()
    }

    /// Logical addresses go through the route table; anything else must
    /// itself be `host:port`.
    pub fn resolve(&self, addr: &Address) -> Result<SocketAddr, TransportError> {
        if let Some(s) = self.routes.read().expect("routes lock").get(addr) {
            return Ok(*s);
        }
        addr.as_str()
            .to_socket_addrs()
            .ok()
            .and_then(|mut it| it.next())
            .ok_or_else(|| TransportError::UnknownDestination(addr.clone()))
    }

    fn record(&self, kind: EventKind, env: &Envelope) {
        if let Some(t) = &self.transcript {
            t.lock().expect("transcript lock").record(self.now(), kind, env);
        }
    }

    pub fn send(&self, env: &Envelope) -> Result<(), TransportError> {
        let frame = encode(env)?;
        let sock = self.resolve(&env.to)?;
        self.record(EventKind::Send, env);
        let mut pool = self.pool.lock().expect("pool lock");
        // One retry on a fresh connection covers a peer that restarted.
        for attempt in 0..2 {
            let w = match pool.entry(sock) {
                std::collections::hash_map::Entry::Occupied(e) => e.into_mut(),
                std::collections::hash_map::Entry::Vacant(e) => match TcpStream::connect_timeout(&sock, self.connect_timeout) {
                    Ok(s) => {
                        let _ = s.set_nodelay(true);
                        e.insert(BufWriter::new(s))
                    }
                    Err(source) => {
                        self.record(EventKind::Drop, env);
                        return Err(TransportError::Io { peer: sock.to_string(), source });
                    }
                },
            };
            let res = std::io::Write::write_all(w, &frame).and_then(|_| std::io::Write::flush(w));
            match res {
                Ok(()) => return Ok(()),
                Err(source) => {
                    pool.remove(&sock);
                    if attempt == 1 {
                        self.record(EventKind::Drop, env);
                        return Err(TransportError::Io { peer: sock.to_string(), source });
                    }
                }
            }
        }
        unreachable!("send loop returns")
    }
}

enum Inbound {
    Envelope(Envelope),
    Control(ControlRequest, Sender<ControlReply>),
}

/// A node running behind a listener. Dropping the handle without calling
/// [`shutdown`](Self::shutdown) leaves the threads running.
pub struct NodeHandle {
    address: Address,
    local: SocketAddr,
    inbox: Sender<Inbound>,
    stop: Arc<AtomicBool>,
    worker: Option<JoinHandle<Node>>,
    acceptor: Option<JoinHandle<()>>,
}

impl std::fmt::Debug for NodeHandle {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("NodeHandle").field("address", &self.address).field("local", &self.local).finish()
    }
}

impl NodeHandle {
    pub fn spawn(node: Node, listener: TcpListener, transport: Arc<TcpTransport>) -> Result<NodeHandle, TransportError> {
        let local = listener.local_addr().map_err(|source| TransportError::Io { peer: "listener".into(), source })?;
        let address = node.address().clone();
        let (tx, rx) = mpsc::channel();
        let stop = Arc::new(AtomicBool::new(false));

        let worker = {
            let transport = Arc::clone(&transport);
            std::thread::Builder::new()
                .name(format!("pds-{address}"))
                .spawn(move || node_loop(node, rx, transport))
                .expect("spawn node loop")
        };
        let acceptor = {
            let tx = tx.clone();
            let stop = Arc::clone(&stop);
            std::thread::Builder::new()
                .name(format!("pds-accept-{address}"))
                .spawn(move || accept_loop(listener, tx, stop))
                .expect("spawn acceptor")
        };
        Ok(NodeHandle { address, local, inbox: tx, stop, worker: Some(worker), acceptor: Some(acceptor) })
    }

    pub fn address(&self) -> &Address {
        &self.address
    }

    pub fn local_addr(&self) -> SocketAddr {
        self.local
    }

    fn call(&self, req: ControlRequest) -> ControlReply {
        let (tx, rx) = mpsc::channel();
        if self.inbox.send(Inbound::Control(req, tx)).is_err() {
            return ControlReply::Error { message: "node loop has stopped".into() };
        }
        rx.recv().unwrap_or(ControlReply::Error { message: "node loop has stopped".into() })
    }

    /// Runs one operation to completion (processing nodes only).
    pub fn submit(&self, command: PnCommand) -> Result<OpOutcome, TransportError> {
        match self.call(ControlRequest::Submit { command }) {
            ControlReply::Outcome { outcome } => Ok(outcome),
            ControlReply::Error { message } => Err(TransportError::Control(message)),
            other => Err(TransportError::Control(format!("unexpected reply {other:?}"))),
        }
    }

    pub fn dump(&self) -> Result<NodeDump, TransportError> {
        match self.call(ControlRequest::Dump) {
            ControlReply::Dump { dump } => Ok(dump),
            other => Err(TransportError::Control(format!("unexpected reply {other:?}"))),
        }
    }

    /// Blocks until a control client asks the node to shut down.
    pub fn wait(mut self) -> Node {
        let node = self.worker.take().expect("worker present").join().expect("node loop panicked");
        self.stop.store(true, Ordering::SeqCst);
        let _ = TcpStream::connect_timeout(&self.local, Duration::from_millis(500));
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        node
    }

    /// Stops the threads and hands the node back.
    pub fn shutdown(mut self) -> Node {
        self.stop.store(true, Ordering::SeqCst);
        // Unblock accept().
        let _ = TcpStream::connect_timeout(&self.local, Duration::from_millis(500));
        let _ = self.call(ControlRequest::Shutdown);
        if let Some(a) = self.acceptor.take() {
            let _ = a.join();
        }
        self.worker.take().expect("worker present").join().expect("node loop panicked")
    }
}

fn accept_loop(listener: TcpListener, inbox: Sender<Inbound>, stop: Arc<AtomicBool>) {
    for conn in listener.incoming() {
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let Ok(stream) = conn else { continue };
        let inbox = inbox.clone();
        let stop = Arc::clone(&stop);
        let _ = std::thread::Builder::new().name("pds-conn".into()).spawn(move || connection_loop(stream, inbox, stop));
    }
}

fn connection_loop(stream: TcpStream, inbox: Sender<Inbound>, stop: Arc<AtomicBool>) {
    let peer = stream.peer_addr().map(|a| a.to_string()).unwrap_or_default();
    let Ok(write_half) = stream.try_clone() else { return };
    let mut reader = BufReader::new(stream);
    let mut writer = write_half;
    loop {
        let body = match read_frame(&mut reader) {
            Ok(Some(b)) => b,
            Ok(None) => break,
            Err(e) => {
                tracing::warn!(%peer, error = %e, "closing connection");
                break;
            }
        };
        if stop.load(Ordering::SeqCst) {
            break;
        }
        let value: Value = match serde_json::from_slice(&body) {
            Ok(v) => v,
            Err(e) => {
                tracing::warn!(%peer, error = %e, "frame is not JSON");
                continue;
            }
        };
        if let Some(req) = value.get("control") {
            let reply = match serde_json::from_value::<ControlRequest>(req.clone()) {
                Ok(req) => {
                    let (tx, rx) = mpsc::channel();
                    if inbox.send(Inbound::Control(req, tx)).is_err() {
                        break;
                    }
                    rx.recv().unwrap_or(ControlReply::Error { message: "node loop has stopped".into() })
                }
                Err(e) => ControlReply::Error { message: format!("bad control request: {e}") },
            };
            let out = serde_json::to_vec(&reply).expect("replies serialize");
            if write_frame(&mut writer, &out).is_err() {
                break;
            }
            continue;
        }
        match Envelope::from_value(value) {
            Ok(env) => {
                if inbox.send(Inbound::Envelope(env)).is_err() {
                    break;
                }
            }
            Err(e) => tracing::warn!(%peer, error = %e, "dropping undecodable envelope"),
        }
    }
    let _ = writer.shutdown(Shutdown::Both);
}

fn node_loop(mut node: Node, rx: Receiver<Inbound>, transport: Arc<TcpTransport>) -> Node {
    let mut timers: BinaryHeap<Reverse<Millis>> = BinaryHeap::new();
    let mut waiting: HashMap<OpId, Sender<ControlReply>> = HashMap::new();
    let mut next_op = 0u64;

    let apply = |fx: Effects, timers: &mut BinaryHeap<Reverse<Millis>>, waiting: &mut HashMap<OpId, Sender<ControlReply>>| {
        for env in fx.sends {
            if let Err(e) = transport.send(&env) {
                tracing::warn!(to = %env.to, step = env.step(), error = %e, "send failed");
            }
        }
        for c in fx.completions {
            if let Some(tx) = waiting.remove(&c.op) {
                let _ = tx.send(ControlReply::Outcome { outcome: c.outcome });
            }
        }
        timers.extend(fx.wake_at.into_iter().map(Reverse));
    };

    loop {
        let now = transport.now();
        if timers.peek().is_some_and(|Reverse(t)| *t <= now) {
            while timers.peek().is_some_and(|Reverse(t)| *t <= now) {
                timers.pop();
            }
            let fx = node.tick(now);
            apply(fx, &mut timers, &mut waiting);
        }
        let wait = timers.peek().map_or(IDLE_POLL, |Reverse(t)| Duration::from_millis(t.saturating_sub(now)).min(IDLE_POLL));
        match rx.recv_timeout(wait) {
            Ok(Inbound::Envelope(env)) => {
                transport.record(EventKind::Deliver, &env);
                let fx = node.handle(env, transport.now());
                apply(fx, &mut timers, &mut waiting);
            }
            Ok(Inbound::Control(req, reply)) => match req {
                ControlRequest::Submit { command } => {
                    let Node::Processing(pn) = &mut node else {
                        let _ = reply.send(ControlReply::Error { message: format!("{} is not a processing node", node.address()) });
                        continue;
                    };
                    next_op += 1;
                    let op = OpId(next_op);
                    waiting.insert(op, reply);
                    let fx = pn.submit(op, command, transport.now());
                    apply(fx, &mut timers, &mut waiting);
                }
                ControlRequest::Whoami => {
                    let identity = match &node {
                        Node::Processing(pn) => Some(pn.identity().clone()),
                        _ => None,
                    };
                    let _ = reply.send(ControlReply::Whoami { address: node.address().clone(), role: node.role(), identity });
                }
                ControlRequest::Dump => {
                    let _ = reply.send(ControlReply::Dump { dump: node.dump() });
                }
                ControlRequest::Stats => {
                    let _ = reply.send(ControlReply::Stats { stats: node.stats().clone() });
                }
                ControlRequest::Shutdown => {
                    let _ = reply.send(ControlReply::Ok);
                    break;
                }
            },
            Err(RecvTimeoutError::Timeout) => {}
            Err(RecvTimeoutError::Disconnected) => break,
        }
    }
    for (_, tx) in waiting {
        let _ = tx.send(ControlReply::Error { message: "node shut down".into() });
    }
    node
}

/// Blocking client for control frames.
#[derive(Debug)]
pub struct ControlClient {
    stream: TcpStream,
}

impl ControlClient {
    pub fn connect(addr: SocketAddr, timeout: Duration) -> Result<Self, TransportError> {
        let io = |source| TransportError::Io { peer: addr.to_string(), source };
        let stream = TcpStream::connect_timeout(&addr, timeout).map_err(io)?;
        stream.set_read_timeout(Some(timeout)).map_err(io)?;
        Ok(Self { stream })
    }

    pub fn request(&mut self, req: &ControlRequest) -> Result<ControlReply, TransportError> {
        let body = serde_json::to_vec(&serde_json::json!({ "control": req })).expect("requests serialize");
        if body.len() > MAX_FRAME_LEN {
            return Err(ProtocolError::Oversize(body.len()).into());
        }
        write_frame(&mut self.stream, &body)?;
        let reply = read_frame(&mut self.stream)?.ok_or_else(|| TransportError::Control("connection closed before reply".into()))?;
        serde_json::from_slice(&reply).map_err(|e| TransportError::Control(format!("bad reply: {e}")))
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyspace::ChoreographyId;
    use crate::kvstore::KvStore;
    use crate::nodes::IndexNode;
    use crate::protocol::{ChunkBytes, Message, Op, Role};

    #[test]
    fn oversized_frame_is_rejected_before_send() {
        let t = TcpTransport::new(BTreeMap::new(), None);
        let env = Envelope {
            choreography_id: ChoreographyId::from([0; 16]),
            op: Op::Store,
            from: Address::new("pn").unwrap(),
            from_role: Role::Processing,
            to: Address::new("127.0.0.1:9").unwrap(),
            message: Message::ChunkPut { chunk: ChunkBytes(vec![0; MAX_FRAME_LEN]), index: 1, total: 2 },
        };
        assert!(matches!(t.send(&env), Err(TransportError::Protocol(ProtocolError::Oversize(_)))));
    }

    #[test]
    fn unreachable_peer_is_an_error_not_a_panic() {
        let t = TcpTransport::new(BTreeMap::new(), None);
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let dead = listener.local_addr().unwrap();
        drop(listener);
        let env = Envelope {
            choreography_id: ChoreographyId::from([0; 16]),
            op: Op::Delete,
            from: Address::new("an").unwrap(),
            from_role: Role::Audit,
            to: Address::new(dead.to_string()).unwrap(),
            message: Message::DeleteCmd { mk: crate::keyspace::MasterKey::from([1; 16]) },
        };
        assert!(matches!(t.send(&env), Err(TransportError::Io { .. })));
    }

    #[test]
    fn control_dump_and_shutdown() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let t = TcpTransport::new(BTreeMap::new(), None);
        let node = Node::Index(IndexNode::new(Address::new("in").unwrap(), KvStore::in_memory()));
        let h = NodeHandle::spawn(node, listener, t).unwrap();
        let mut c = ControlClient::connect(h.local_addr(), Duration::from_secs(5)).unwrap();
        match c.request(&ControlRequest::Dump).unwrap() {
            ControlReply::Dump { dump } => assert_eq!(dump.role, Role::Index),
            other => panic!("{other:?}"),
        }
        let reply = c.request(&ControlRequest::Submit { command: PnCommand::Retrieve { alias: "x".into() } }).unwrap();
        assert!(matches!(reply, ControlReply::Error { .. }));
        let node = h.shutdown();
        assert_eq!(node.role(), Role::Index);
    }
}
