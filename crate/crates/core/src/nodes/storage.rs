use std::collections::BTreeMap;

use serde::{Deserialize, Serialize};

use super::{decode_record, encode_record, Effects, Millis, NodeRng, NodeStats};
use crate::keyspace::{gen_unique, Address, ChoreographyId, PartialKey};
use crate::kvstore::{KvStore, Lookup};
use crate::protocol::{ChunkBytes, DenialReason, Envelope, Message, Role};

/// Value stored under a partial key. `generation` names the choreography
/// (store or update) that last wrote the chunk.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct StorageRecord {
    pub chunk: ChunkBytes,
    pub generation: ChoreographyId,
}

type PendingKey = (String, ChoreographyId, u32);

#[derive(Clone, Debug)]
struct PendingUpdate {
    pk: PartialKey,
    deadline: Millis,
}

/// Stores undecipherable chunks under partial keys it mints itself.
#[derive(Debug)]
pub struct StorageNode {
    addr: Address,
    store: KvStore,
    rng: NodeRng,
    timeout_ms: Millis,
    pending: BTreeMap<PendingKey, PendingUpdate>,
    pub(super) stats: NodeStats,
}

impl StorageNode {
    pub fn new(addr: Address, store: KvStore, rng: NodeRng, timeout_ms: Millis) -> Self {
        Self { addr, store, rng, timeout_ms, pending: BTreeMap::new(), stats: NodeStats::default() }
    }

    pub(super) fn into_parts(self) -> (Address, KvStore, NodeRng, Millis) {
        (self.addr, self.store, self.rng, self.timeout_ms)
    }

    pub fn address(&self) -> &Address {
        &self.addr
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    pub fn chunk(&self, pk: &PartialKey) -> Option<StorageRecord> {
        match self.store.get(&pk.to_hex()) {
            Lookup::Active(v) => decode_record(v),
            _ => None,
        }
    }

    pub fn pending_updates(&self) -> usize {
        self.pending.len()
    }

    pub(super) fn transient_snapshot(&self) -> Vec<serde_json::Value> {
        self.pending
            .iter()
            .map(|((digest, cid, index), p)| {
                serde_json::json!({
                    "hkr_digest": digest,
                    "choreography_id": cid.to_hex(),
                    "index": index,
                    "pk": p.pk.to_hex(),
                    "deadline": p.deadline,
                })
            })
            .collect()
    }

    fn reply(&self, env: &Envelope, to: Address, message: Message) -> Envelope {
        env.reply(&self.addr, Role::Storage, to, message)
    }

    pub(super) fn tick(&mut self, now: Millis) -> Effects {
        self.pending.retain(|_, p| p.deadline > now);
        Effects::default()
    }

    pub(super) fn handle(&mut self, env: Envelope, now: Millis) -> Effects {
        self.pending.retain(|_, p| p.deadline > now);
        let mut fx = Effects::default();
        match &env.message {
            Message::ChunkPut { chunk, index, .. } => {
                let msg = match self.chunk_put(chunk, env.choreography_id) {
                    Ok(pk) => Message::ChunkPutAck { pk, index: *index },
                    Err(reason) => Message::ChunkPutNack { index: *index, reason },
                };
                fx.send(self.reply(&env, env.from.clone(), msg));
            }
            Message::ChunkGet { hkr, pk, index, total, .. } => {
                let msg = match self.chunk(pk) {
                    Some(rec) => Message::ChunkDeliver {
                        hkr: hkr.clone(),
                        index: *index,
                        total: *total,
                        chunk: rec.chunk,
                        generation: rec.generation,
                    },
                    None => Message::ReadFailed { hkr: hkr.clone(), reason: DenialReason::MissingChunk },
                };
                fx.send(self.reply(&env, hkr.pn_location.clone(), msg));
            }
            Message::UpdatePrepare { hkr, pk, index, total, .. } => {
                let msg = if self.chunk(pk).is_some() {
                    let deadline = now + self.timeout_ms;
                    self.pending.insert((hkr.kr_digest.clone(), env.choreography_id, *index), PendingUpdate { pk: *pk, deadline });
                    fx.wake_at.push(deadline);
                    Message::UpdateReady { hkr: hkr.clone(), index: *index, total: *total, sn_addr: self.addr.clone() }
                } else {
                    Message::ReadFailed { hkr: hkr.clone(), reason: DenialReason::MissingChunk }
                };
                fx.send(self.reply(&env, hkr.pn_location.clone(), msg));
            }
            Message::ChunkReplace { hkr, index, chunk } => {
                let key = (hkr.kr_digest.clone(), env.choreography_id, *index);
                let msg = match self.pending.remove(&key) {
                    None => {
                        tracing::warn!(node = %self.addr, cid = %env.choreography_id, index, "stale update");
                        Message::ChunkReplaceNack { hkr: hkr.clone(), index: *index, reason: DenialReason::StaleUpdate }
                    }
                    Some(_) if chunk.0.is_empty() => {
                        Message::ChunkReplaceNack { hkr: hkr.clone(), index: *index, reason: DenialReason::EmptyChunk }
                    }
                    Some(p) => {
                        let rec = StorageRecord { chunk: chunk.clone(), generation: env.choreography_id };
                        match self.store.put(&p.pk.to_hex(), encode_record(&rec)) {
                            Ok(_) => Message::ChunkReplaceAck { hkr: hkr.clone(), index: *index },
                            Err(_) => Message::ChunkReplaceNack { hkr: hkr.clone(), index: *index, reason: DenialReason::StoreFailure },
                        }
                    }
                };
                fx.send(self.reply(&env, env.from.clone(), msg));
            }
            other => {
                tracing::warn!(node = %self.addr, step = other.step(), "no storage handler");
                self.stats.rejected += 1;
            }
        }
        fx
    }

    fn chunk_put(&mut self, chunk: &ChunkBytes, generation: ChoreographyId) -> Result<PartialKey, DenialReason> {
        if chunk.0.is_empty() {
            return Err(DenialReason::EmptyChunk);
        }
        let store = &self.store;
        let pk: PartialKey = gen_unique(&mut self.rng, |k: &PartialKey| store.contains(&k.to_hex())).map_err(|_| DenialReason::KeyExhausted)?;
        let rec = StorageRecord { chunk: chunk.clone(), generation };
        self.store.put(&pk.to_hex(), encode_record(&rec)).map_err(|_| DenialReason::StoreFailure)?;
        Ok(pk)
    }
}
