use std::collections::{BTreeMap, BTreeSet, HashSet};

use rand::seq::index::sample;
use serde::{Deserialize, Serialize};

use super::{b64, decode_record, encode_record, Directory, Effects, Millis, NodeError, NodeRng, NodeSettings, NodeStats, OpOutcome};
use crate::keyspace::{gen_unique, make_hkr, Address, ChoreographyId, Hkr, Identity, KeyReference, MasterKey, PartialKey};
use crate::kvstore::{KvStore, Lookup};
use crate::protocol::{ChunkBytes, DenialReason, Envelope, IndexEntry, Message, Metadata, Op, Role};
use crate::secret_split::{recombine, split, Chunk, PrivateData, MAX_CHUNKS, MIN_CHUNKS};

/// Caller-assigned handle for one operation submitted to a processing node.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(transparent)]
pub struct OpId(pub u64);

impl std::fmt::Display for OpId {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "op-{}", self.0)
    }
}

/// What the alias table holds: a key reference and its cached metadata.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AliasRecord {
    pub kr: KeyReference,
    pub md: Metadata,
}

/// The six operations as issued by a caller of a processing node.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "command", rename_all = "snake_case")]
pub enum PnCommand {
    Store {
        alias: String,
        #[serde(with = "b64")]
        data: Vec<u8>,
        #[serde(default)]
        md: Metadata,
        #[serde(default)]
        chunks: Option<usize>,
    },
    Retrieve {
        alias: String,
    },
    Update {
        alias: String,
        #[serde(with = "b64")]
        data: Vec<u8>,
    },
    Delete {
        alias: String,
    },
    /// Grants `to` access; the grantee files the reference under `alias`.
    Share {
        alias: String,
        to: Identity,
    },
    /// Revokes every grant of the alias's data held by processor `from`.
    Revoke {
        alias: String,
        from: String,
    },
}

impl PnCommand {
    pub fn op(&self) -> Op {
        match self {
            PnCommand::Store { .. } => Op::Store,
            PnCommand::Retrieve { .. } => Op::Retrieve,
            PnCommand::Update { .. } => Op::Update,
            PnCommand::Delete { .. } => Op::Delete,
            PnCommand::Share { .. } => Op::Share,
            PnCommand::Revoke { .. } => Op::Revoke,
        }
    }

    pub fn alias(&self) -> &str {
        match self {
            PnCommand::Store { alias, .. }
            | PnCommand::Retrieve { alias }
            | PnCommand::Update { alias, .. }
            | PnCommand::Delete { alias }
            | PnCommand::Share { alias, .. }
            | PnCommand::Revoke { alias, .. } => alias,
        }
    }
}

#[derive(Debug)]
enum StorePhase {
    Grant { data: PrivateData, n: usize },
    Chunks { kr: KeyReference, mk: MasterKey, targets: Vec<Address>, pks: Vec<Option<PartialKey>> },
    Index { kr: KeyReference, mk: MasterKey },
}

#[derive(Debug)]
enum State {
    Store { alias: String, md: Metadata, phase: StorePhase },
    Retrieve { alias: String, hkr: Hkr, received: BTreeMap<u32, (ChunkBytes, ChoreographyId)>, total: Option<u32>, retried: bool },
    Update { hkr: Hkr, data: PrivateData, ready: BTreeMap<u32, Address>, total: Option<u32>, acked: Option<BTreeSet<u32>> },
    Delete,
    Share,
    Revoke,
}

#[derive(Debug)]
struct Pending {
    op: OpId,
    kind: Op,
    deadline: Millis,
    state: State,
}

impl Pending {
    fn phase(&self) -> (&'static str, u32, u32) {
        match &self.state {
            State::Store { phase: StorePhase::Grant { .. }, .. } => ("store_grant", 0, 1),
            State::Store { phase: StorePhase::Chunks { pks, .. }, .. } => {
                ("chunk_put", pks.iter().filter(|p| p.is_some()).count() as u32, pks.len() as u32)
            }
            State::Store { phase: StorePhase::Index { .. }, .. } => ("index_put", 0, 1),
            State::Retrieve { received, total, .. } => ("chunk_deliver", received.len() as u32, total.unwrap_or(0)),
            State::Update { ready, total, acked: None, .. } => ("update_ready", ready.len() as u32, total.unwrap_or(0)),
            State::Update { acked: Some(a), total, .. } => ("chunk_replace", a.len() as u32, total.unwrap_or(0)),
            State::Delete => ("delete_ack", 0, 1),
            State::Share => ("share_ack", 0, 1),
            State::Revoke => ("revoke_ack", 0, 1),
        }
    }
}

/// Runs the six operations on behalf of one data owner or processor. It
/// persists only its alias table; private data and chunks live in
/// transient pending entries until the operation completes.
#[derive(Debug)]
pub struct ProcessingNode {
    identity: Identity,
    directory: Directory,
    store: KvStore,
    rng: NodeRng,
    settings: NodeSettings,
    pending: BTreeMap<ChoreographyId, Pending>,
    reserved: HashSet<String>,
    pub(super) stats: NodeStats,
}

impl ProcessingNode {
    pub fn new(identity: Identity, directory: Directory, store: KvStore, rng: NodeRng, settings: NodeSettings) -> Result<Self, NodeError> {
        for rec in store.records() {
            if decode_record::<AliasRecord>(&rec.value).is_none() {
                return Err(NodeError::Config(format!("alias store value under {:?} is not an alias record", rec.key)));
            }
        }
        Ok(Self {
            identity,
            directory,
            store,
            rng,
            settings,
            pending: BTreeMap::new(),
            reserved: HashSet::new(),
            stats: NodeStats::default(),
        })
    }

    pub(super) fn into_parts(self) -> (Identity, Directory, KvStore, NodeRng, NodeSettings) {
        (self.identity, self.directory, self.store, self.rng, self.settings)
    }

    pub fn address(&self) -> &Address {
        &self.identity.location
    }

    pub fn identity(&self) -> &Identity {
        &self.identity
    }

    pub fn directory(&self) -> &Directory {
        &self.directory
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    pub fn alias(&self, alias: &str) -> Option<AliasRecord> {
        match self.store.get(alias) {
            Lookup::Active(v) => decode_record(v),
            _ => None,
        }
    }

    pub fn aliases(&self) -> Vec<String> {
        self.store.records().map(|r| r.key.clone()).collect()
    }

    pub fn in_flight(&self) -> usize {
        self.pending.len()
    }

    pub(super) fn transient_snapshot(&self) -> Vec<serde_json::Value> {
        self.pending
            .iter()
            .map(|(cid, p)| {
                let (phase, received, expected) = p.phase();
                serde_json::json!({
                    "choreography_id": cid.to_hex(),
                    "op": p.kind.as_str(),
                    "phase": phase,
                    "received": received,
                    "expected": expected,
                    "deadline": p.deadline,
                })
            })
            .collect()
    }

    fn fresh_cid(&mut self) -> ChoreographyId {
        let pending = &self.pending;
        // 2^-128 collision odds; exhaustion would mean a broken rng.
        gen_unique(&mut self.rng, |c| pending.contains_key(c)).expect("choreography id space exhausted")
    }

    fn envelope(&self, cid: ChoreographyId, op: Op, to: Address, message: Message) -> Envelope {
        Envelope { choreography_id: cid, op, from: self.address().clone(), from_role: Role::Processing, to, message }
    }

    /// Every operation opens with a request to the audit node.
    fn begin(&mut self, fx: &mut Effects, op: OpId, kind: Op, state: State, message: Message, now: Millis) -> ChoreographyId {
        let cid = self.fresh_cid();
        let deadline = now + self.settings.timeout_ms;
        fx.send(self.envelope(cid, kind, self.directory.audit.clone(), message));
        fx.wake_at.push(deadline);
        self.pending.insert(cid, Pending { op, kind, deadline, state });
        cid
    }

    fn alias_in_use(&self, alias: &str) -> bool {
        self.reserved.contains(alias) || self.store.contains(alias)
    }

    /// Starts an operation. Local precondition failures complete at once
    /// with [`OpOutcome::Rejected`] and send nothing.
    pub fn submit(&mut self, op: OpId, cmd: PnCommand, now: Millis) -> Effects {
        let mut fx = Effects::default();
        if let Err(error) = self.start(&mut fx, op, cmd, now) {
            fx.complete(op, OpOutcome::Rejected { error });
        }
        fx
    }

    fn known(&self, alias: &str) -> Result<AliasRecord, String> {
        self.alias(alias).ok_or_else(|| format!("unknown alias {alias:?}"))
    }

    fn start(&mut self, fx: &mut Effects, op: OpId, cmd: PnCommand, now: Millis) -> Result<(), String> {
        match cmd {
            PnCommand::Store { alias, data, md, chunks } => {
                let n = chunks.unwrap_or(self.settings.default_chunks);
                if !(MIN_CHUNKS..=MAX_CHUNKS).contains(&n) {
                    return Err(format!("chunk count {n} outside {MIN_CHUNKS}..={MAX_CHUNKS}"));
                }
                if n > self.directory.storage.len() {
                    return Err(format!("{n} chunks requested but only {} storage nodes known", self.directory.storage.len()));
                }
                if alias.is_empty() || self.alias_in_use(&alias) {
                    return Err(format!("alias {alias:?} already in use"));
                }
                if !md.within_cap() {
                    return Err(DenialReason::MetadataTooLarge.to_string());
                }
                let data = PrivateData::with_cap(data, self.settings.max_data_len).map_err(|e| e.to_string())?;
                self.reserved.insert(alias.clone());
                let msg = Message::StoreInit { owner: self.identity.clone(), md: md.clone() };
                let state = State::Store { alias, md, phase: StorePhase::Grant { data, n } };
                self.begin(fx, op, Op::Store, state, msg, now);
            }
            PnCommand::Retrieve { alias } => {
                let rec = self.known(&alias)?;
                self.begin_retrieve(fx, op, alias, rec.kr, false, now);
            }
            PnCommand::Update { alias, data } => {
                let rec = self.known(&alias)?;
                let data = PrivateData::with_cap(data, self.settings.max_data_len).map_err(|e| e.to_string())?;
                let hkr = make_hkr(&rec.kr, self.address());
                let msg = Message::UpdateReq { dp: self.identity.clone(), kr: rec.kr };
                let state = State::Update { hkr, data, ready: BTreeMap::new(), total: None, acked: None };
                self.begin(fx, op, Op::Update, state, msg, now);
            }
            PnCommand::Delete { alias } => {
                let rec = self.known(&alias)?;
                let msg = Message::DeleteReq { owner: self.identity.clone(), kr: rec.kr };
                self.begin(fx, op, Op::Delete, State::Delete, msg, now);
            }
            PnCommand::Share { alias, to } => {
                let rec = self.known(&alias)?;
                let msg = Message::ShareReq { kr1: rec.kr, dp2: to, alias };
                self.begin(fx, op, Op::Share, State::Share, msg, now);
            }
            PnCommand::Revoke { alias, from } => {
                let rec = self.known(&alias)?;
                let msg = Message::RevokeReq { kr1: rec.kr, owner: self.identity.clone(), dp2: from };
                self.begin(fx, op, Op::Revoke, State::Revoke, msg, now);
            }
        }
        Ok(())
    }

    fn begin_retrieve(&mut self, fx: &mut Effects, op: OpId, alias: String, kr: KeyReference, retried: bool, now: Millis) {
        let hkr = make_hkr(&kr, self.address());
        let msg = Message::ReadReq { dp: self.identity.clone(), kr };
        let state = State::Retrieve { alias, hkr, received: BTreeMap::new(), total: None, retried };
        self.begin(fx, op, Op::Retrieve, state, msg, now);
    }

    pub(super) fn tick(&mut self, now: Millis) -> Effects {
        let mut fx = Effects::default();
        let expired: Vec<ChoreographyId> = self.pending.iter().filter(|(_, p)| p.deadline <= now).map(|(c, _)| *c).collect();
        for cid in expired {
            let p = self.pending.remove(&cid).expect("expired entry present");
            let (phase, received, expected) = p.phase();
            tracing::warn!(node = %self.address(), %cid, op = %p.kind, phase, received, expected, "operation timed out");
            if let State::Store { alias, phase: sp, .. } = &p.state {
                self.reserved.remove(alias);
                if matches!(sp, StorePhase::Chunks { .. } | StorePhase::Index { .. }) {
                    tracing::warn!(node = %self.address(), %cid, "store aborted; placed chunks are orphaned");
                }
            }
            fx.complete(p.op, OpOutcome::Timeout { phase: phase.to_string(), received, expected });
        }
        fx
    }

    fn finish(&mut self, fx: &mut Effects, cid: ChoreographyId, outcome: OpOutcome) {
        if let Some(p) = self.pending.remove(&cid) {
            if let State::Store { alias, .. } = &p.state {
                self.reserved.remove(alias);
            }
            fx.complete(p.op, outcome);
        }
    }

    pub(super) fn handle(&mut self, env: Envelope, now: Millis) -> Effects {
        let mut fx = Effects::default();
        let cid = env.choreography_id;
        if let Message::ShareGrant { kr2, md, alias } = &env.message {
            self.accept_grant(*kr2, md.clone(), alias);
            fx.send(self.envelope(cid, env.op, env.from.clone(), Message::ShareGrantAck {}));
            return fx;
        }
        let Some(p) = self.pending.get_mut(&cid) else {
            self.stats.orphan_deliveries += 1;
            tracing::debug!(node = %self.identity.location, %cid, step = env.step(), "no pending choreography");
            return fx;
        };
        if p.kind != env.op {
            self.stats.orphan_deliveries += 1;
            return fx;
        }
        match (&mut p.state, env.message) {
            (_, Message::StoreDenied { reason })
            | (_, Message::ChunkPutNack { reason, .. })
            | (_, Message::IndexPutNack { reason })
            | (_, Message::ReadDenied { reason, .. })
            | (_, Message::DeleteDenied { reason, .. })
            | (_, Message::RevokeDenied { reason, .. }) => {
                if let State::Store { phase: StorePhase::Chunks { .. } | StorePhase::Index { .. }, .. } = &p.state {
                    tracing::warn!(node = %self.identity.location, %cid, %reason, "store aborted; placed chunks are orphaned");
                }
                self.finish(&mut fx, cid, OpOutcome::Denied { reason });
            }
            (State::Retrieve { hkr, .. } | State::Update { hkr, .. }, Message::ReadFailed { hkr: got, reason }) => {
                if *hkr != got {
                    self.stats.hkr_mismatches += 1;
                    return fx;
                }
                self.finish(&mut fx, cid, OpOutcome::Denied { reason });
            }
            (State::Store { phase, .. }, Message::StoreGrant { kr, mk }) => {
                let StorePhase::Grant { data, n } = phase else {
                    self.stats.orphan_deliveries += 1;
                    return fx;
                };
                let n = *n;
                let chunks = split(data, n, &mut self.rng).expect("chunk count validated at submit");
                let picks = sample(&mut self.rng, self.directory.storage.len(), n);
                let targets: Vec<Address> = picks.iter().map(|i| self.directory.storage[i].clone()).collect();
                let from = self.identity.location.clone();
                for (chunk, to) in chunks.into_iter().zip(&targets) {
                    let msg = Message::ChunkPut { chunk: ChunkBytes(chunk.bytes), index: chunk.index as u32, total: n as u32 };
                    fx.send(Envelope { choreography_id: cid, op: Op::Store, from: from.clone(), from_role: Role::Processing, to: to.clone(), message: msg });
                }
                *phase = StorePhase::Chunks { kr, mk, targets, pks: vec![None; n] };
            }
            (State::Store { phase, .. }, Message::ChunkPutAck { pk, index }) => {
                let StorePhase::Chunks { kr, mk, targets, pks } = phase else {
                    self.stats.orphan_deliveries += 1;
                    return fx;
                };
                let slot = (index as usize).checked_sub(1).filter(|i| *i < pks.len());
                match slot {
                    Some(i) if targets[i] == env.from => pks[i] = Some(pk),
                    _ => {
                        self.stats.orphan_deliveries += 1;
                        return fx;
                    }
                }
                if pks.iter().all(Option::is_some) {
                    let entries: Vec<IndexEntry> =
                        targets.iter().zip(pks.iter()).map(|(sn, pk)| IndexEntry { sn_addr: sn.clone(), pk: pk.expect("all acked") }).collect();
                    let (kr, mk) = (*kr, *mk);
                    *phase = StorePhase::Index { kr, mk };
                    let msg = Message::IndexPut { mk, entries };
                    fx.send(self.envelope(cid, Op::Store, self.directory.index.clone(), msg));
                }
            }
            (State::Store { phase, alias, md }, Message::IndexPutAck {}) => {
                let StorePhase::Index { kr, mk } = phase else {
                    self.stats.orphan_deliveries += 1;
                    return fx;
                };
                let (kr, mk) = (*kr, *mk);
                let rec = AliasRecord { kr, md: md.clone() };
                let alias = alias.clone();
                let outcome = match self.store.put(&alias, encode_record(&rec)) {
                    Ok(_) => OpOutcome::Stored { kr, mk },
                    Err(e) => {
                        tracing::error!(node = %self.identity.location, error = %e, "alias table write failed");
                        OpOutcome::Denied { reason: DenialReason::StoreFailure }
                    }
                };
                self.finish(&mut fx, cid, outcome);
            }
            (State::Retrieve { hkr, received, total, .. }, Message::ChunkDeliver { hkr: got, index, total: t, chunk, generation }) => {
                if *hkr != got {
                    self.stats.hkr_mismatches += 1;
                    tracing::warn!(node = %self.identity.location, %cid, "chunk delivered under a foreign hkr");
                    return fx;
                }
                if index == 0 || index > t || total.is_some_and(|n| n != t) {
                    self.stats.orphan_deliveries += 1;
                    return fx;
                }
                *total = Some(t);
                received.insert(index, (chunk, generation));
                if received.len() as u32 == t {
                    self.complete_retrieve(&mut fx, cid, now);
                }
            }
            (State::Update { hkr, data, ready, total, acked }, Message::UpdateReady { hkr: got, index, total: t, sn_addr }) => {
                if *hkr != got {
                    self.stats.hkr_mismatches += 1;
                    return fx;
                }
                if acked.is_some() || index == 0 || index > t || total.is_some_and(|n| n != t) {
                    self.stats.orphan_deliveries += 1;
                    return fx;
                }
                *total = Some(t);
                ready.insert(index, sn_addr);
                if ready.len() as u32 == t {
                    let chunks: Vec<Chunk> = split(data, t as usize, &mut self.rng).expect("total comes from a valid index record");
                    let from = self.identity.location.clone();
                    for chunk in chunks {
                        let index = chunk.index as u32;
                        let msg = Message::ChunkReplace { hkr: hkr.clone(), index, chunk: ChunkBytes(chunk.bytes) };
                        fx.send(Envelope { choreography_id: cid, op: Op::Update, from: from.clone(), from_role: Role::Processing, to: ready[&index].clone(), message: msg });
                    }
                    *acked = Some(BTreeSet::new());
                }
            }
            (State::Update { hkr, total, acked, .. }, Message::ChunkReplaceAck { hkr: got, index }) => {
                if *hkr != got {
                    self.stats.hkr_mismatches += 1;
                    return fx;
                }
                let Some(acked) = acked else {
                    self.stats.orphan_deliveries += 1;
                    return fx;
                };
                acked.insert(index);
                if Some(acked.len() as u32) == *total {
                    self.finish(&mut fx, cid, OpOutcome::Updated);
                }
            }
            (State::Update { hkr, .. }, Message::ChunkReplaceNack { hkr: got, reason, index }) => {
                if *hkr != got {
                    self.stats.hkr_mismatches += 1;
                    return fx;
                }
                tracing::warn!(node = %self.identity.location, %cid, index, %reason, "chunk replace refused; update is partial");
                self.finish(&mut fx, cid, OpOutcome::Denied { reason });
            }
            (State::Delete, Message::DeleteAck {}) => self.finish(&mut fx, cid, OpOutcome::Deleted),
            (State::Share, Message::ShareAck { kr2_issued, reason }) => {
                let outcome = if kr2_issued {
                    OpOutcome::Shared
                } else {
                    OpOutcome::Denied { reason: reason.unwrap_or(DenialReason::Unknown) }
                };
                self.finish(&mut fx, cid, outcome);
            }
            (State::Revoke, Message::RevokeAck { found }) => self.finish(&mut fx, cid, OpOutcome::Revoked { found }),
            (_, other) => {
                self.stats.orphan_deliveries += 1;
                tracing::debug!(node = %self.identity.location, %cid, step = other.step(), "step does not fit pending phase");
            }
        }
        fx
    }

    fn complete_retrieve(&mut self, fx: &mut Effects, cid: ChoreographyId, now: Millis) {
        let p = self.pending.remove(&cid).expect("retrieve pending");
        let State::Retrieve { alias, received, retried, .. } = p.state else {
            unreachable!("complete_retrieve on a non-retrieve entry")
        };
        let generations: BTreeSet<ChoreographyId> = received.values().map(|(_, g)| *g).collect();
        if generations.len() > 1 {
            self.stats.mixed_generations += 1;
            tracing::info!(node = %self.identity.location, %cid, "chunks from mixed write generations");
            let kr = self.alias(&alias).map(|r| r.kr);
            match kr {
                Some(kr) if !retried => self.begin_retrieve(fx, p.op, alias, kr, true, now),
                _ => fx.complete(p.op, OpOutcome::Denied { reason: DenialReason::MixedGeneration }),
            }
            return;
        }
        let total = received.len();
        let chunks: Vec<Chunk> =
            received.into_iter().map(|(index, (bytes, _))| Chunk { bytes: bytes.0, index: index as usize, total }).collect();
        let outcome = match recombine(&chunks) {
            Ok(pd) => OpOutcome::Retrieved { data: pd.into_bytes() },
            Err(e) => {
                tracing::warn!(node = %self.identity.location, %cid, error = %e, "recombination failed");
                OpOutcome::Denied { reason: DenialReason::MissingChunk }
            }
        };
        fx.complete(p.op, outcome);
    }

    fn accept_grant(&mut self, kr2: KeyReference, md: Metadata, alias: &str) {
        let base = if alias.is_empty() { "shared" } else { alias };
        let mut name = base.to_string();
        let mut k = 2;
        while self.alias_in_use(&name) {
            name = format!("{base}~{k}");
            k += 1;
        }
        let rec = AliasRecord { kr: kr2, md };
        if let Err(e) = self.store.put(&name, encode_record(&rec)) {
            tracing::error!(node = %self.identity.location, error = %e, "could not file shared reference");
        } else {
            tracing::info!(node = %self.identity.location, alias = %name, "received shared reference");
        }
    }
}
