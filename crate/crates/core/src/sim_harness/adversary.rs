//! What a coalition of curious nodes can learn from their combined state.
//!
//! The coalition pools kvstore dumps and transient snapshots (not traffic)
//! and follows the protocol's own lookup paths: an index record names the
//! partial keys and storage nodes of a master key, storage dumps hold the
//! chunks, and audit records tie a master key to owner, processors, and
//! metadata. Storage nodes alone cannot tell which chunks belong together;
//! trying chunk combinations by brute force is outside this model.

use std::collections::BTreeSet;

use serde::{Deserialize, Serialize};

use crate::keyspace::{Identity, MasterKey};
use crate::nodes::{AuditRecord, IndexRecord, NodeDump, StorageRecord};
use crate::protocol::{Metadata, Role};
use crate::secret_split::{recombine, Chunk};

pub const MODEL_NOTE: &str = "honest-but-curious coalition over stored state; \
storage-only coalitions are not credited with grouping chunks by brute force";

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct AdversaryView {
    dumps: Vec<NodeDump>,
}

impl AdversaryView {
    pub fn new(dumps: Vec<NodeDump>) -> Self {
        Self { dumps }
    }

    /// The dumps of exactly the named nodes. Unknown names are an error.
    pub fn select(all: &[NodeDump], ids: &[&str]) -> Result<Self, String> {
        let mut picked = Vec::new();
        for id in ids {
            let d = all.iter().find(|d| d.address.as_str() == *id).ok_or_else(|| format!("unknown node {id:?}"))?;
            if !picked.iter().any(|p: &NodeDump| p.address == d.address) {
                picked.push(d.clone());
            }
        }
        Ok(Self { dumps: picked })
    }

    pub fn members(&self) -> Vec<String> {
        self.dumps.iter().map(|d| d.address.to_string()).collect()
    }

    fn of_role(&self, role: Role) -> impl Iterator<Item = &NodeDump> {
        self.dumps.iter().filter(move |d| d.role == role)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Attribution {
    pub owner: Identity,
    pub processors: Vec<Identity>,
    pub md: Metadata,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct Reconstruction {
    pub members: Vec<String>,
    /// Recombined private data, if the coalition can produce it.
    pub bytes: Option<Vec<u8>>,
    pub attribution: Option<Attribution>,
    /// Chunk count from the index record, when the coalition has one.
    pub chunks_needed: Option<usize>,
    pub chunks_found: usize,
}

impl Reconstruction {
    pub fn summary(&self) -> String {
        let yn = |b: bool| if b { "yes" } else { "no" };
        format!("bytes: {}, attribution: {}", yn(self.bytes.is_some()), yn(self.attribution.is_some()))
    }
}

fn decode<T: serde::de::DeserializeOwned>(v: &[u8]) -> Option<T> {
    serde_json::from_slice(v).ok()
}

/// The strongest state-level attack the view permits against `target`.
pub fn attempt_reconstruction(view: &AdversaryView, target: &MasterKey) -> Reconstruction {
    let mut out = Reconstruction { members: view.members(), ..Default::default() };

    let entries = view
        .of_role(Role::Index)
        .flat_map(|d| d.records.iter())
        .find(|r| r.key == target.to_hex())
        .and_then(|r| decode::<IndexRecord>(&r.value))
        .map(|r| r.entries);
    if let Some(entries) = entries {
        out.chunks_needed = Some(entries.len());
        let total = entries.len();
        let mut chunks = Vec::new();
        for (i, e) in entries.iter().enumerate() {
            let rec = view
                .of_role(Role::Storage)
                .filter(|d| d.address == e.sn_addr)
                .flat_map(|d| d.records.iter())
                .find(|r| r.key == e.pk.to_hex())
                .and_then(|r| decode::<StorageRecord>(&r.value));
            if let Some(rec) = rec {
                chunks.push(Chunk { bytes: rec.chunk.0, index: i + 1, total });
            }
        }
        out.chunks_found = chunks.len();
        if chunks.len() == total {
            out.bytes = recombine(&chunks).ok().map(|pd| pd.into_bytes());
        }
    }

    let grants: Vec<AuditRecord> = view
        .of_role(Role::Audit)
        .flat_map(|d| d.records.iter())
        .filter_map(|r| decode::<AuditRecord>(&r.value))
        .filter(|r| r.mk == *target)
        .collect();
    if let Some(first) = grants.first() {
        let mut seen = BTreeSet::new();
        let processors = grants.iter().filter(|g| seen.insert(g.dp.name.clone())).map(|g| g.dp.clone()).collect();
        out.attribution = Some(Attribution { owner: first.owner.clone(), processors, md: first.md.clone() });
    }
    out
}
