use std::collections::{BTreeSet, HashMap, HashSet};

use serde::{Deserialize, Serialize};

use super::{decode_record, encode_record, Effects, NodeError, NodeRng, NodeStats};
use crate::keyspace::{gen_unique, make_hkr, Address, ChoreographyId, Identity, KeyReference, MasterKey};
use crate::kvstore::{KvStore, Lookup, Status};
use crate::protocol::{DenialReason, Envelope, Message, Role};

/// Value stored under a key reference. `status` lives in the store itself:
/// an invalidated record is a revoked grant.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct AuditRecord {
    pub mk: MasterKey,
    pub md: crate::protocol::Metadata,
    #[serde(rename = "do")]
    pub owner: Identity,
    pub dp: Identity,
}

impl AuditRecord {
    /// The owner's own reference, created at store time.
    pub fn is_initial(&self) -> bool {
        self.owner.same_principal(&self.dp)
    }
}

/// Resolves key references, records ownership and grants, and executes
/// share and revoke.
#[derive(Debug)]
pub struct AuditNode {
    addr: Address,
    store: KvStore,
    rng: NodeRng,
    index: Address,
    /// (mk, processor name) -> key references; rebuilt from the store.
    grants: HashMap<(MasterKey, String), BTreeSet<KeyReference>>,
    mks: HashSet<MasterKey>,
    pending_deletes: HashMap<ChoreographyId, Address>,
    /// share cid -> (requesting PN, grantee PN) until the grantee confirms.
    pending_shares: HashMap<ChoreographyId, (Address, Address)>,
    pub(super) stats: NodeStats,
}

enum Resolved {
    Active(AuditRecord),
    Revoked(AuditRecord),
    Unknown,
}

impl AuditNode {
    pub fn new(addr: Address, store: KvStore, rng: NodeRng, index: Address) -> Result<Self, NodeError> {
        let mut node = Self {
            addr,
            store,
            rng,
            index,
            grants: HashMap::new(),
            mks: HashSet::new(),
            pending_deletes: HashMap::new(),
            pending_shares: HashMap::new(),
            stats: NodeStats::default(),
        };
        let records: Vec<(String, Vec<u8>)> = node.store.records().map(|r| (r.key.clone(), r.value.clone())).collect();
        for (key, value) in records {
            let kr: KeyReference = key.parse().map_err(|e| NodeError::Config(format!("audit store key {key}: {e}")))?;
            let rec: AuditRecord =
                decode_record(&value).ok_or_else(|| NodeError::Config(format!("audit store value under {key} is not an audit record")))?;
            node.index_grant(kr, &rec);
        }
        Ok(node)
    }

    pub(super) fn into_parts(self) -> (Address, KvStore, NodeRng, Address) {
        (self.addr, self.store, self.rng, self.index)
    }

    pub fn address(&self) -> &Address {
        &self.addr
    }

    pub fn store(&self) -> &KvStore {
        &self.store
    }

    fn index_grant(&mut self, kr: KeyReference, rec: &AuditRecord) {
        self.mks.insert(rec.mk);
        self.grants.entry((rec.mk, rec.dp.name.clone())).or_default().insert(kr);
    }

    pub fn record(&self, kr: &KeyReference) -> Option<(AuditRecord, Status)> {
        let rec = self.store.record(&kr.to_hex())?;
        Some((decode_record(&rec.value)?, rec.status))
    }

    fn resolve(&self, kr: &KeyReference) -> Resolved {
        match self.store.get(&kr.to_hex()) {
            Lookup::NotFound => Resolved::Unknown,
            Lookup::Active(v) => decode_record(v).map_or(Resolved::Unknown, Resolved::Active),
            Lookup::Invalidated(v) => decode_record(v).map_or(Resolved::Unknown, Resolved::Revoked),
        }
    }

    /// Active grants of `mk` held by `owner` for processor `dp`, via the
    /// secondary index.
    pub fn find_grants(&self, mk: &MasterKey, owner: &str, dp: &str) -> Vec<KeyReference> {
        let Some(krs) = self.grants.get(&(*mk, dp.to_string())) else {
            return Vec::new();
        };
        krs.iter()
            .filter(|kr| matches!(self.resolve(kr), Resolved::Active(ref r) if r.owner.name == owner))
            .copied()
            .collect()
    }

    /// Same query as [`find_grants`](Self::find_grants), answered by a full
    /// store scan.
    pub fn scan_grants(&self, mk: &MasterKey, owner: &str, dp: &str) -> Vec<KeyReference> {
        self.store
            .scan(|_, v| {
                decode_record::<AuditRecord>(v).is_some_and(|r| r.mk == *mk && r.owner.name == owner && r.dp.name == dp)
            })
            .into_iter()
            .filter_map(|(k, _)| k.parse().ok())
            .collect()
    }

    pub(super) fn transient_snapshot(&self) -> Vec<serde_json::Value> {
        let mut pending: Vec<_> = self
            .pending_deletes
            .iter()
            .map(|(cid, pn)| serde_json::json!({"pending_delete": cid.to_hex(), "reply_to": pn.as_str()}))
            .chain(self.pending_shares.iter().map(|(cid, (pn, to))| {
                serde_json::json!({"pending_share": cid.to_hex(), "reply_to": pn.as_str(), "grantee": to.as_str()})
            }))
            .collect();
        pending.sort_by_key(|v| v.to_string());
        pending
    }

    fn reply(&self, env: &Envelope, to: Address, message: Message) -> Envelope {
        env.reply(&self.addr, Role::Audit, to, message)
    }

    pub(super) fn handle(&mut self, env: Envelope) -> Effects {
        let mut fx = Effects::default();
        match &env.message {
            Message::StoreInit { owner, md } => {
                let msg = match self.store_init(owner, md) {
                    Ok((kr, mk)) => Message::StoreGrant { kr, mk },
                    Err(reason) => Message::StoreDenied { reason },
                };
                fx.send(self.reply(&env, env.from.clone(), msg));
            }
            Message::ReadReq { dp, kr } | Message::UpdateReq { dp, kr } => match self.authorize_read(dp, kr) {
                Ok(mk) => {
                    let hkr = make_hkr(kr, &dp.location);
                    let msg = if matches!(env.message, Message::ReadReq { .. }) {
                        Message::ReadAuth { dp: dp.clone(), mk, hkr }
                    } else {
                        Message::UpdateAuth { dp: dp.clone(), mk, hkr }
                    };
                    fx.send(self.reply(&env, self.index.clone(), msg));
                }
                Err(reason) => fx.send(self.reply(&env, env.from.clone(), Message::ReadDenied { kr: *kr, reason })),
            },
            Message::DeleteReq { owner, kr } => match self.resolve(kr) {
                Resolved::Unknown => {
                    fx.send(self.reply(&env, env.from.clone(), Message::DeleteDenied { kr: *kr, reason: DenialReason::UnknownKr }))
                }
                Resolved::Active(rec) | Resolved::Revoked(rec) if !rec.owner.same_principal(owner) => {
                    fx.send(self.reply(&env, env.from.clone(), Message::DeleteDenied { kr: *kr, reason: DenialReason::NotOwner }))
                }
                Resolved::Active(rec) | Resolved::Revoked(rec) => {
                    self.pending_deletes.insert(env.choreography_id, env.from.clone());
                    fx.send(self.reply(&env, self.index.clone(), Message::DeleteCmd { mk: rec.mk }));
                }
            },
            Message::DeleteAck {} => match self.pending_deletes.remove(&env.choreography_id) {
                Some(pn) => fx.send(self.reply(&env, pn, Message::DeleteAck {})),
                None => {
                    self.stats.orphan_deliveries += 1;
                    tracing::warn!(node = %self.addr, cid = %env.choreography_id, "delete ack without pending delete");
                }
            },
            Message::ShareReq { kr1, dp2, alias } => {
                match self.share(&env.from, kr1, dp2) {
                    Ok((kr2, md)) => {
                        self.pending_shares.insert(env.choreography_id, (env.from.clone(), dp2.location.clone()));
                        let grant = Message::ShareGrant { kr2, md, alias: alias.clone() };
                        fx.send(self.reply(&env, dp2.location.clone(), grant));
                    }
                    Err(reason) => {
                        let ack = Message::ShareAck { kr2_issued: false, reason: Some(reason) };
                        fx.send(self.reply(&env, env.from.clone(), ack));
                    }
                }
            }
            Message::ShareGrantAck {} => match self.pending_shares.get(&env.choreography_id) {
                Some((_, grantee)) if *grantee == env.from => {
                    let (pn, _) = self.pending_shares.remove(&env.choreography_id).expect("present");
                    fx.send(self.reply(&env, pn, Message::ShareAck { kr2_issued: true, reason: None }));
                }
                _ => {
                    self.stats.orphan_deliveries += 1;
                    tracing::warn!(node = %self.addr, cid = %env.choreography_id, "grant ack without pending share");
                }
            },
            Message::RevokeReq { kr1, owner, dp2 } => {
                let msg = match self.revoke(kr1, owner, dp2) {
                    Ok(found) => Message::RevokeAck { found },
                    Err(reason) => Message::RevokeDenied { kr1: *kr1, reason },
                };
                fx.send(self.reply(&env, env.from.clone(), msg));
            }
            other => {
                tracing::warn!(node = %self.addr, step = other.step(), "no audit handler");
                self.stats.rejected += 1;
            }
        }
        fx
    }

    fn store_init(&mut self, owner: &Identity, md: &crate::protocol::Metadata) -> Result<(KeyReference, MasterKey), DenialReason> {
        if !md.within_cap() {
            return Err(DenialReason::MetadataTooLarge);
        }
        let mks = &self.mks;
        let mk: MasterKey = gen_unique(&mut self.rng, |k| mks.contains(k)).map_err(|_| DenialReason::KeyExhausted)?;
        let store = &self.store;
        let kr: KeyReference = gen_unique(&mut self.rng, |k: &KeyReference| store.contains(&k.to_hex())).map_err(|_| DenialReason::KeyExhausted)?;
        let rec = AuditRecord { mk, md: md.clone(), owner: owner.clone(), dp: owner.clone() };
        self.put_grant(kr, &rec)?;
        Ok((kr, mk))
    }

    fn put_grant(&mut self, kr: KeyReference, rec: &AuditRecord) -> Result<(), DenialReason> {
        self.store.put(&kr.to_hex(), encode_record(rec)).map_err(|e| {
            tracing::error!(node = %self.addr, error = %e, "audit store write failed");
            DenialReason::StoreFailure
        })?;
        self.index_grant(kr, rec);
        Ok(())
    }

    fn authorize_read(&self, dp: &Identity, kr: &KeyReference) -> Result<MasterKey, DenialReason> {
        match self.resolve(kr) {
            Resolved::Unknown => Err(DenialReason::UnknownKr),
            Resolved::Revoked(_) => Err(DenialReason::Revoked),
            Resolved::Active(rec) if !rec.dp.same_principal(dp) => Err(DenialReason::WrongProcessor),
            Resolved::Active(rec) => Ok(rec.mk),
        }
    }

    fn share(&mut self, requester: &Address, kr1: &KeyReference, dp2: &Identity) -> Result<(KeyReference, crate::protocol::Metadata), DenialReason> {
        let rec = match self.resolve(kr1) {
            Resolved::Unknown => return Err(DenialReason::UnknownKr),
            Resolved::Revoked(_) => return Err(DenialReason::Revoked),
            Resolved::Active(rec) => rec,
        };
        // kr1 is a bearer handle; it must at least come from its holder's node.
        if &rec.dp.location != requester {
            return Err(DenialReason::WrongProcessor);
        }
        let store = &self.store;
        let kr2: KeyReference = gen_unique(&mut self.rng, |k: &KeyReference| store.contains(&k.to_hex())).map_err(|_| DenialReason::KeyExhausted)?;
        let granted = AuditRecord { mk: rec.mk, md: rec.md.clone(), owner: rec.owner.clone(), dp: dp2.clone() };
        self.put_grant(kr2, &granted)?;
        Ok((kr2, rec.md))
    }

    fn revoke(&mut self, kr1: &KeyReference, owner: &Identity, dp2: &str) -> Result<bool, DenialReason> {
        let rec = match self.resolve(kr1) {
            Resolved::Unknown => return Err(DenialReason::UnknownKr),
            Resolved::Active(rec) | Resolved::Revoked(rec) => rec,
        };
        if !rec.owner.same_principal(owner) {
            return Err(DenialReason::NotOwner);
        }
        let targets = self.find_grants(&rec.mk, &owner.name, dp2);
        for kr2 in &targets {
            self.store.invalidate(&kr2.to_hex()).map_err(|_| DenialReason::StoreFailure)?;
        }
        Ok(!targets.is_empty())
    }
}
