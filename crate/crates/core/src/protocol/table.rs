use std::collections::{BTreeMap, BTreeSet};
use std::sync::LazyLock;

use serde::{Deserialize, Serialize};

use super::{Envelope, Op, Role};

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct TableRow {
    pub step: String,
    pub from: Role,
    pub to: Role,
    pub fields: Vec<String>,
}

#[derive(Clone, Debug, Serialize, Deserialize)]
pub struct ChoreographyTable {
    pub version: u32,
    pub ops: BTreeMap<Op, Vec<TableRow>>,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RejectReason {
    UnknownStep,
    WrongRole,
    BadSchema,
}

#[derive(Clone, Debug, PartialEq, Eq)]
pub struct Rejection {
    pub reason: RejectReason,
    pub detail: String,
}

/// The canonical table shipped with the crate.
pub static CHOREOGRAPHY_V1: LazyLock<ChoreographyTable> = LazyLock::new(|| {
    ChoreographyTable::from_json(include_str!("choreography-v1.json")).expect("bundled choreography table is valid")
});

impl ChoreographyTable {
    pub fn from_json(s: &str) -> Result<Self, serde_json::Error> {
        serde_json::from_str(s)
    }

    pub fn rows(&self, op: Op) -> &[TableRow] {
        self.ops.get(&op).map(Vec::as_slice).unwrap_or(&[])
    }

    pub fn knows_step(&self, step: &str) -> bool {
        self.ops.values().flatten().any(|r| r.step == step)
    }

    /// Accepts `env` at a node playing `local_role` iff the table has a row
    /// for its (op, step) with matching sender and receiver roles and the
    /// payload carries exactly that row's fields.
    pub fn validate_step(&self, env: &Envelope, local_role: Role) -> Result<&TableRow, Rejection> {
        let step = env.step();
        let candidates: Vec<&TableRow> = self.rows(env.op).iter().filter(|r| r.step == step).collect();
        if candidates.is_empty() {
            return Err(Rejection {
                reason: RejectReason::UnknownStep,
                detail: format!("{step} is not part of {}", env.op),
            });
        }
        let row = candidates
            .into_iter()
            .find(|r| r.from == env.from_role && r.to == local_role)
            .ok_or_else(|| Rejection {
                reason: RejectReason::WrongRole,
                detail: format!("{}/{step} from {} to {local_role}", env.op, env.from_role),
            })?;
        let have: BTreeSet<String> = env.message.payload_value().as_object().map(|o| o.keys().cloned().collect()).unwrap_or_default();
        let want: BTreeSet<String> = row.fields.iter().cloned().collect();
        if have != want {
            return Err(Rejection {
                reason: RejectReason::BadSchema,
                detail: format!("{step}: fields {have:?}, table says {want:?}"),
            });
        }
        Ok(row)
    }
}
