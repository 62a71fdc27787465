use serde::{Deserialize, Serialize};

use super::{decode_record, encode_record, Effects, NodeStats};
use crate::keyspace::{Address, MasterKey};
use crate::kvstore::{KvStore, Lookup, Status};
use crate::protocol::{DenialReason, Envelope, IndexEntry, Message, Role};

/// Value stored under a master key: where each chunk lives, in chunk order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexRecord {
    pub entries: Vec<IndexEntry>,
}

/// Maps master keys to (storage node, partial key) lists and executes
/// delete by tombstoning the master key.
#[derive(Debug)]
pub struct IndexNode {
    addr: Address,
    store: KvStore,
    pub(super) stats: NodeStats,
}

impl IndexNode {
    pub fn new(addr: Address, store: KvStore) -> Self {
        Self { addr, store, stats: NodeStats::default() }
    }

    pub(super) fn into_parts(self) -> (Address, KvStore) {
        (self.addr, self.store)
    }

    pub fn address(&self) -> &Address {
        &self.addr
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    pub fn lookup(&self, mk: &MasterKey) -> Option<(IndexRecord, Status)> {
        let rec = self.store.record(&mk.to_hex())?;
        Some((decode_record(&rec.value)?, rec.status))
    }

    fn reply(&self, env: &Envelope, to: Address, message: Message) -> Envelope {
        env.reply(&self.addr, Role::Index, to, message)
    }

    pub(super) fn handle(&mut self, env: Envelope) -> Effects {
        let mut fx = Effects::default();
        match &env.message {
            Message::IndexPut { mk, entries } => {
                let msg = match self.index_put(mk, entries) {
                    Ok(()) => Message::IndexPutAck {},
                    Err(reason) => Message::IndexPutNack { reason },
                };
                fx.send(self.reply(&env, env.from.clone(), msg));
            }
            Message::ReadAuth { dp, mk, hkr } | Message::UpdateAuth { dp, mk, hkr } => {
                let is_read = matches!(env.message, Message::ReadAuth { .. });
                match self.store.get(&mk.to_hex()) {
                    Lookup::Active(v) => {
                        let Some(rec) = decode_record::<IndexRecord>(v) else {
                            fx.send(self.reply(&env, hkr.pn_location.clone(), Message::ReadFailed { hkr: hkr.clone(), reason: DenialReason::StoreFailure }));
                            return fx;
                        };
                        let total = rec.entries.len() as u32;
                        for (i, entry) in rec.entries.iter().enumerate() {
                            let index = i as u32 + 1;
                            let msg = if is_read {
                                Message::ChunkGet { dp: dp.clone(), hkr: hkr.clone(), pk: entry.pk, index, total }
                            } else {
                                Message::UpdatePrepare { dp: dp.clone(), hkr: hkr.clone(), pk: entry.pk, index, total }
                            };
                            fx.send(self.reply(&env, entry.sn_addr.clone(), msg));
                        }
                    }
                    Lookup::Invalidated(_) => {
                        fx.send(self.reply(&env, hkr.pn_location.clone(), Message::ReadFailed { hkr: hkr.clone(), reason: DenialReason::Deleted }))
                    }
                    Lookup::NotFound => {
                        fx.send(self.reply(&env, hkr.pn_location.clone(), Message::ReadFailed { hkr: hkr.clone(), reason: DenialReason::Unknown }))
                    }
                }
            }
            Message::DeleteCmd { mk } => {
                match self.store.invalidate(&mk.to_hex()) {
                    Ok(_) => {}
                    Err(crate::kvstore::StoreError::NotFound(_)) => {
                        tracing::info!(node = %self.addr, %mk, "delete of unindexed master key");
                    }
                    Err(e) => {
                        tracing::error!(node = %self.addr, error = %e, "index invalidate failed");
                        return fx;
                    }
                }
                fx.send(self.reply(&env, env.from.clone(), Message::DeleteAck {}));
            }
            other => {
                tracing::warn!(node = %self.addr, step = other.step(), "no index handler");
                self.stats.rejected += 1;
            }
        }
        fx
    }

    fn index_put(&mut self, mk: &MasterKey, entries: &[IndexEntry]) -> Result<(), DenialReason> {
        if entries.len() < crate::secret_split::MIN_CHUNKS {
            return Err(DenialReason::BadEntries);
        }
        if self.store.contains(&mk.to_hex()) {
            return Err(DenialReason::DuplicateMk);
        }
        let rec = IndexRecord { entries: entries.to_vec() };
        self.store.put(&mk.to_hex(), encode_record(&rec)).map_err(|_| DenialReason::StoreFailure)?;
        Ok(())
    }
}
