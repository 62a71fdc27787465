//! Message vocabulary and wire encoding for the six choreographies.
//!
//! An [`Envelope`] carries one step of one choreography instance. On the wire
//! it is a length-prefixed JSON object with sorted keys; the payload schema of
//! every step is fixed by the [`ChoreographyTable`].

mod table;
mod wire;

use std::collections::BTreeMap;
use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Deserializer, Serialize, Serializer};
use serde_json::Value;
use thiserror::Error;

use crate::keyspace::{Address, ChoreographyId, Hkr, Identity, KeyReference, MasterKey, PartialKey};

pub use table::{ChoreographyTable, Rejection, RejectReason, TableRow, CHOREOGRAPHY_V1};
pub use wire::{decode, encode, read_frame, write_frame, MAX_FRAME_LEN};

/// Encoded metadata may not exceed this many bytes.
pub const MAX_METADATA_LEN: usize = 4096;

#[derive(Debug, Error)]
pub enum ProtocolError {
    #[error("frame of {0} bytes exceeds the {MAX_FRAME_LEN} byte limit")]
    Oversize(usize),
    #[error("declared frame length {declared} but body has {actual} bytes")]
    LengthMismatch { declared: usize, actual: usize },
    #[error("malformed frame body: {0}")]
    Json(String),
    #[error("unknown step {0:?}")]
    UnknownStep(String),
    #[error("payload does not match schema: {0}")]
    BadSchema(String),
    #[error("frame I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Op {
    Store,
    Retrieve,
    Update,
    Delete,
    Share,
    Revoke,
}

impl Op {
    pub const ALL: [Op; 6] = [Op::Store, Op::Retrieve, Op::Update, Op::Delete, Op::Share, Op::Revoke];

    pub fn as_str(self) -> &'static str {
        match self {
            Op::Store => "store",
            Op::Retrieve => "retrieve",
            Op::Update => "update",
            Op::Delete => "delete",
            Op::Share => "share",
            Op::Revoke => "revoke",
        }
    }
}

impl fmt::Display for Op {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, PartialOrd, Ord, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Role {
    Audit,
    Index,
    Storage,
    Processing,
}

impl Role {
    pub fn as_str(self) -> &'static str {
        match self {
            Role::Audit => "audit",
            Role::Index => "index",
            Role::Storage => "storage",
            Role::Processing => "processing",
        }
    }
}

impl fmt::Display for Role {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

impl std::str::FromStr for Role {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, String> {
        match s {
            "audit" => Ok(Role::Audit),
            "index" => Ok(Role::Index),
            "storage" => Ok(Role::Storage),
            "processing" => Ok(Role::Processing),
            other => Err(format!("unknown role {other:?}")),
        }
    }
}

/// Machine-readable reason carried by every denial or failure message.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DenialReason {
    UnknownKr,
    Revoked,
    WrongProcessor,
    NotOwner,
    Deleted,
    Unknown,
    MissingChunk,
    DuplicateMk,
    BadEntries,
    EmptyChunk,
    MetadataTooLarge,
    StaleUpdate,
    MixedGeneration,
    StoreFailure,
    KeyExhausted,
}

impl DenialReason {
    pub const ALL: [DenialReason; 15] = [
        DenialReason::UnknownKr,
        DenialReason::Revoked,
        DenialReason::WrongProcessor,
        DenialReason::NotOwner,
        DenialReason::Deleted,
        DenialReason::Unknown,
        DenialReason::MissingChunk,
        DenialReason::DuplicateMk,
        DenialReason::BadEntries,
        DenialReason::EmptyChunk,
        DenialReason::MetadataTooLarge,
        DenialReason::StaleUpdate,
        DenialReason::MixedGeneration,
        DenialReason::StoreFailure,
        DenialReason::KeyExhausted,
    ];

    pub fn as_str(self) -> &'static str {
        match self {
            DenialReason::UnknownKr => "unknown_kr",
            DenialReason::Revoked => "revoked",
            DenialReason::WrongProcessor => "wrong_processor",
            DenialReason::NotOwner => "not_owner",
            DenialReason::Deleted => "deleted",
            DenialReason::Unknown => "unknown",
            DenialReason::MissingChunk => "missing_chunk",
            DenialReason::DuplicateMk => "duplicate_mk",
            DenialReason::BadEntries => "bad_entries",
            DenialReason::EmptyChunk => "empty_chunk",
            DenialReason::MetadataTooLarge => "metadata_too_large",
            DenialReason::StaleUpdate => "stale_update",
            DenialReason::MixedGeneration => "mixed_generation",
            DenialReason::StoreFailure => "store_failure",
            DenialReason::KeyExhausted => "key_exhausted",
        }
    }
}

impl fmt::Display for DenialReason {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.as_str())
    }
}

/// Labels describing what a piece of private data is and why it is held.
/// Backed by a sorted map, so serialization is deterministic.
#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(transparent)]
pub struct Metadata(pub BTreeMap<String, String>);

impl Metadata {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn with(mut self, k: impl Into<String>, v: impl Into<String>) -> Self {
        self.0.insert(k.into(), v.into());
        self
    }

    pub fn encoded_len(&self) -> usize {
        serde_json::to_vec(self).map(|v| v.len()).unwrap_or(usize::MAX)
    }

    pub fn within_cap(&self) -> bool {
        self.encoded_len() <= MAX_METADATA_LEN
    }
}

/// Chunk bytes; base64 on the wire, length-only in debug output.
#[derive(Clone, PartialEq, Eq, Default)]
pub struct ChunkBytes(pub Vec<u8>);

impl fmt::Debug for ChunkBytes {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "ChunkBytes({} bytes)", self.0.len())
    }
}

impl Serialize for ChunkBytes {
    fn serialize<S: Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(&self.0))
    }
}

impl<'de> Deserialize<'de> for ChunkBytes {
    fn deserialize<D: Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        B64.decode(s).map(ChunkBytes).map_err(serde::de::Error::custom)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct IndexEntry {
    pub sn_addr: Address,
    pub pk: PartialKey,
}

/// Every step of every choreography. The variant name is the step name.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(tag = "step", content = "payload")]
pub enum Message {
    // store
    StoreInit {
        #[serde(rename = "do")]
        owner: Identity,
        md: Metadata,
    },
    StoreGrant { kr: KeyReference, mk: MasterKey },
    StoreDenied { reason: DenialReason },
    ChunkPut { chunk: ChunkBytes, index: u32, total: u32 },
    ChunkPutAck { pk: PartialKey, index: u32 },
    ChunkPutNack { index: u32, reason: DenialReason },
    IndexPut { mk: MasterKey, entries: Vec<IndexEntry> },
    IndexPutAck {},
    IndexPutNack { reason: DenialReason },
    // retrieve
    ReadReq { dp: Identity, kr: KeyReference },
    ReadAuth { dp: Identity, mk: MasterKey, hkr: Hkr },
    ChunkGet { dp: Identity, hkr: Hkr, pk: PartialKey, index: u32, total: u32 },
    ChunkDeliver { hkr: Hkr, index: u32, total: u32, chunk: ChunkBytes, generation: ChoreographyId },
    ReadDenied { kr: KeyReference, reason: DenialReason },
    ReadFailed { hkr: Hkr, reason: DenialReason },
    // update
    UpdateReq { dp: Identity, kr: KeyReference },
    UpdateAuth { dp: Identity, mk: MasterKey, hkr: Hkr },
    UpdatePrepare { dp: Identity, hkr: Hkr, pk: PartialKey, index: u32, total: u32 },
    UpdateReady { hkr: Hkr, index: u32, total: u32, sn_addr: Address },
    ChunkReplace { hkr: Hkr, index: u32, chunk: ChunkBytes },
    ChunkReplaceAck { hkr: Hkr, index: u32 },
    ChunkReplaceNack { hkr: Hkr, index: u32, reason: DenialReason },
    // delete
    DeleteReq {
        #[serde(rename = "do")]
        owner: Identity,
        kr: KeyReference,
    },
    DeleteCmd { mk: MasterKey },
    DeleteAck {},
    DeleteDenied { kr: KeyReference, reason: DenialReason },
    // share
    ShareReq { kr1: KeyReference, dp2: Identity, alias: String },
    ShareGrant { kr2: KeyReference, md: Metadata, alias: String },
    ShareGrantAck {},
    ShareAck { kr2_issued: bool, reason: Option<DenialReason> },
    // revoke
    RevokeReq {
        kr1: KeyReference,
        #[serde(rename = "do")]
        owner: Identity,
        dp2: String,
    },
    RevokeAck { found: bool },
    RevokeDenied { kr1: KeyReference, reason: DenialReason },
}

impl Message {
    pub fn step(&self) -> &'static str {
        match self {
            Message::StoreInit { .. } => "StoreInit",
            Message::StoreGrant { .. } => "StoreGrant",
            Message::StoreDenied { .. } => "StoreDenied",
            Message::ChunkPut { .. } => "ChunkPut",
            Message::ChunkPutAck { .. } => "ChunkPutAck",
            Message::ChunkPutNack { .. } => "ChunkPutNack",
            Message::IndexPut { .. } => "IndexPut",
            Message::IndexPutAck {} => "IndexPutAck",
            Message::IndexPutNack { .. } => "IndexPutNack",
            Message::ReadReq { .. } => "ReadReq",
            Message::ReadAuth { .. } => "ReadAuth",
            Message::ChunkGet { .. } => "ChunkGet",
            Message::ChunkDeliver { .. } => "ChunkDeliver",
            Message::ReadDenied { .. } => "ReadDenied",
            Message::ReadFailed { .. } => "ReadFailed",
            Message::UpdateReq { .. } => "UpdateReq",
            Message::UpdateAuth { .. } => "UpdateAuth",
            Message::UpdatePrepare { .. } => "UpdatePrepare",
            Message::UpdateReady { .. } => "UpdateReady",
            Message::ChunkReplace { .. } => "ChunkReplace",
            Message::ChunkReplaceAck { .. } => "ChunkReplaceAck",
            Message::ChunkReplaceNack { .. } => "ChunkReplaceNack",
            Message::DeleteReq { .. } => "DeleteReq",
            Message::DeleteCmd { .. } => "DeleteCmd",
            Message::DeleteAck {} => "DeleteAck",
            Message::DeleteDenied { .. } => "DeleteDenied",
            Message::ShareReq { .. } => "ShareReq",
            Message::ShareGrant { .. } => "ShareGrant",
            Message::ShareGrantAck {} => "ShareGrantAck",
            Message::ShareAck { .. } => "ShareAck",
            Message::RevokeReq { .. } => "RevokeReq",
            Message::RevokeAck { .. } => "RevokeAck",
            Message::RevokeDenied { .. } => "RevokeDenied",
        }
    }

    /// The payload as a JSON object (the `payload` member of the envelope).
    pub fn payload_value(&self) -> Value {
        let mut v = serde_json::to_value(self).expect("messages serialize");
        v.as_object_mut()
            .and_then(|o| o.remove("payload"))
            .unwrap_or_else(|| Value::Object(Default::default()))
    }
}

/// One hop of one choreography instance.
#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Envelope {
    pub choreography_id: ChoreographyId,
    pub op: Op,
    pub from: Address,
    pub from_role: Role,
    pub to: Address,
    pub message: Message,
}

impl Envelope {
    pub fn step(&self) -> &'static str {
        self.message.step()
    }

    /// Builds a reply in the same choreography instance.
    pub fn reply(&self, from: &Address, from_role: Role, to: Address, message: Message) -> Envelope {
        Envelope {
            choreography_id: self.choreography_id,
            op: self.op,
            from: from.clone(),
            from_role,
            to,
            message,
        }
    }

    pub fn to_value(&self) -> Value {
        let mut obj = serde_json::Map::new();
        obj.insert("choreography_id".into(), Value::String(self.choreography_id.to_hex()));
        obj.insert("op".into(), Value::String(self.op.as_str().into()));
        obj.insert("step".into(), Value::String(self.step().into()));
        obj.insert("from".into(), Value::String(self.from.to_string()));
        obj.insert("from_role".into(), Value::String(self.from_role.as_str().into()));
        obj.insert("to".into(), Value::String(self.to.to_string()));
        obj.insert("payload".into(), self.message.payload_value());
        Value::Object(obj)
    }

    pub fn from_value(v: Value) -> Result<Envelope, ProtocolError> {
        let Value::Object(mut obj) = v else {
            return Err(ProtocolError::Json("envelope is not an object".into()));
        };
        let step = match obj.remove("step") {
            Some(Value::String(s)) => s,
            _ => return Err(ProtocolError::Json("missing step".into())),
        };
        if !CHOREOGRAPHY_V1.knows_step(&step) {
            return Err(ProtocolError::UnknownStep(step));
        }
        let mut field = |name: &str| obj.remove(name).ok_or_else(|| ProtocolError::Json(format!("missing {name}")));
        let choreography_id = from_json(field("choreography_id")?)?;
        let op = from_json(field("op")?)?;
        let from = from_json(field("from")?)?;
        let from_role = from_json(field("from_role")?)?;
        let to = from_json(field("to")?)?;
        let payload = field("payload")?;
        let payload_keys: Vec<String> = match &payload {
            Value::Object(o) => o.keys().cloned().collect(),
            _ => return Err(ProtocolError::BadSchema("payload is not an object".into())),
        };
        let mut tagged = serde_json::Map::new();
        tagged.insert("step".into(), Value::String(step.clone()));
        tagged.insert("payload".into(), payload);
        let message: Message =
            serde_json::from_value(Value::Object(tagged)).map_err(|e| ProtocolError::BadSchema(format!("{step}: {e}")))?;
        // Unknown extra fields are a schema violation too.
        let expected: Vec<String> = message.payload_value().as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default();
        if payload_keys != expected {
            return Err(ProtocolError::BadSchema(format!("{step}: fields {payload_keys:?}, expected {expected:?}")));
        }
        if !obj.is_empty() {
            let extra: Vec<_> = obj.keys().collect();
            return Err(ProtocolError::Json(format!("unexpected envelope fields {extra:?}")));
        }
        Ok(Envelope { choreography_id, op, from, from_role, to, message })
    }
}

fn from_json<T: serde::de::DeserializeOwned>(v: Value) -> Result<T, ProtocolError> {
    serde_json::from_value(v).map_err(|e| ProtocolError::Json(e.to_string()))
}
