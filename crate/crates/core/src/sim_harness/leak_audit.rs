//! Offline checks over a full-payload transcript and processing-node dumps.
//!
//! - R1: private data appears in no message except inside chunk fields, and
//!   chunk fields appear only in ChunkPut, ChunkDeliver, ChunkReplace.
//! - R2: traffic to or from the index node carries no md, kr, chunk, or do.
//! - R3: traffic to storage nodes carries no mk, kr, md, or do.
//! - R4: ShareAck carries no key reference; ShareGrant none but its kr2.
//! - R5: processing-node stores contain no private data.
//!
//! Private data is matched by 8-byte windows against message text and
//! against base64- and hex-decoded string fields.

use std::collections::{BTreeMap, BTreeSet, HashMap};
use std::fmt;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use serde_json::Value;
use thiserror::Error;

use crate::nodes::NodeDump;
use crate::protocol::Role;
use crate::transport::{EventKind, Transcript};

pub const WINDOW: usize = 8;

const CHUNK_STEPS: [&str; 3] = ["ChunkPut", "ChunkDeliver", "ChunkReplace"];
const KR_FIELDS: [&str; 3] = ["kr", "kr1", "kr2"];

#[derive(Clone, Copy, Debug, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum Rule {
    R1,
    R2,
    R3,
    R4,
    R5,
}

impl fmt::Display for Rule {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        fmt::Debug::fmt(self, f)
    }
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Finding {
    /// 1-based transcript line; 0 for store findings.
    pub line: usize,
    pub node: String,
    pub rule: Rule,
    pub detail: String,
}

#[derive(Clone, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct LeakReport {
    pub messages_checked: usize,
    pub stores_checked: usize,
    pub findings: Vec<Finding>,
}

impl LeakReport {
    pub fn is_clean(&self) -> bool {
        self.findings.is_empty()
    }

    pub fn count(&self, rule: Rule) -> usize {
        self.findings.iter().filter(|f| f.rule == rule).count()
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("leak audit: {} messages, {} stores checked\n", self.messages_checked, self.stores_checked);
        for f in &self.findings {
            s.push_str(&format!("  {} line {} node {}: {}\n", f.rule, f.line, f.node, f.detail));
        }
        s.push_str(&format!("{} findings\n", self.findings.len()));
        s
    }
}

#[derive(Debug, Error)]
pub enum AuditError {
    #[error("transcript line {0} has no payload; audit needs a full-payload transcript")]
    NoPayload(usize),
    #[error("transcript line {line} names unknown node {node:?}")]
    UnknownNode { line: usize, node: String },
}

/// What the auditor knows besides the transcript.
#[derive(Clone, Debug, Default)]
pub struct AuditContext {
    pub pds: Vec<Vec<u8>>,
    pub roles: BTreeMap<String, Role>,
    /// Hex of every key reference the audit node issued.
    pub issued_krs: BTreeSet<String>,
    pub pn_dumps: Vec<NodeDump>,
}

impl AuditContext {
    /// Roles, issued references, and processing-node dumps from a full set
    /// of node dumps.
    pub fn from_dumps(dumps: &[NodeDump], pds: Vec<Vec<u8>>) -> Self {
        let roles = dumps.iter().map(|d| (d.address.to_string(), d.role)).collect();
        let issued_krs = dumps.iter().filter(|d| d.role == Role::Audit).flat_map(|d| d.records.iter().map(|r| r.key.clone())).collect();
        let pn_dumps = dumps.iter().filter(|d| d.role == Role::Processing).cloned().collect();
        Self { pds, roles, issued_krs, pn_dumps }
    }
}

struct Windows {
    map: HashMap<[u8; WINDOW], usize>,
}

impl Windows {
    fn new(pds: &[Vec<u8>]) -> Self {
        let mut map = HashMap::new();
        for (i, pd) in pds.iter().enumerate() {
            for w in pd.windows(WINDOW) {
                map.entry(w.try_into().expect("window length")).or_insert(i);
            }
        }
        Self { map }
    }

    fn hit(&self, bytes: &[u8]) -> Option<usize> {
        if self.map.is_empty() {
            return None;
        }
        bytes.windows(WINDOW).find_map(|w| self.map.get(<&[u8; WINDOW]>::try_from(w).expect("window length")).copied())
    }

    /// Checks the text itself and every string inside it, raw and decoded.
    fn hit_value(&self, v: &Value) -> Option<usize> {
        if let Some(i) = self.hit(v.to_string().as_bytes()) {
            return Some(i);
        }
        let mut strings = Vec::new();
        collect_strings(v, &mut strings);
        strings.into_iter().find_map(|s| {
            self.hit(s.as_bytes())
                .or_else(|| B64.decode(s).ok().and_then(|b| self.hit(&b)))
                .or_else(|| hex::decode(s).ok().and_then(|b| self.hit(&b)))
        })
    }
}

fn collect_strings<'a>(v: &'a Value, out: &mut Vec<&'a str>) {
    match v {
        Value::String(s) => out.push(s),
        Value::Array(a) => a.iter().for_each(|x| collect_strings(x, out)),
        Value::Object(o) => o.values().for_each(|x| collect_strings(x, out)),
        _ => {}
    }
}

fn keys_in(v: &Value, out: &mut BTreeSet<String>) {
    match v {
        Value::Object(o) => {
            for (k, x) in o {
                out.insert(k.clone());
                keys_in(x, out);
            }
        }
        Value::Array(a) => a.iter().for_each(|x| keys_in(x, out)),
        _ => {}
    }
}

fn krs_in(text: &str, issued: &BTreeSet<String>, except: Option<&str>) -> Vec<String> {
    issued.iter().filter(|kr| Some(kr.as_str()) != except && text.contains(kr.as_str())).cloned().collect()
}

pub fn audit_transcript(transcript: &Transcript, ctx: &AuditContext) -> Result<LeakReport, AuditError> {
    let windows = Windows::new(&ctx.pds);
    let mut issued = ctx.issued_krs.clone();
    // References seen on the wire count as issued even if no audit dump was supplied.
    for e in transcript.events() {
        if let Some(Value::Object(p)) = &e.payload {
            for f in KR_FIELDS {
                if let Some(Value::String(s)) = p.get(f) {
                    issued.insert(s.clone());
                }
            }
        }
    }

    let mut report = LeakReport::default();
    let role = |line: usize, node: &str| -> Result<Role, AuditError> {
        ctx.roles.get(node).copied().ok_or_else(|| AuditError::UnknownNode { line, node: node.to_string() })
    };
    for (i, e) in transcript.events().iter().enumerate() {
        let line = i + 1;
        let payload = e.payload.as_ref().ok_or(AuditError::NoPayload(line))?;
        let (from_role, to_role) = (role(line, &e.from)?, role(line, &e.to)?);
        if e.kind != EventKind::Send {
            continue;
        }
        report.messages_checked += 1;
        let mut find = |node: &str, rule: Rule, detail: String| {
            report.findings.push(Finding { line, node: node.to_string(), rule, detail });
        };
        let text = payload.to_string();
        let mut keys = BTreeSet::new();
        keys_in(payload, &mut keys);

        // R1
        let mut visible = payload.clone();
        if CHUNK_STEPS.contains(&e.step.as_str()) {
            if let Value::Object(o) = &mut visible {
                o.remove("chunk");
            }
        } else if keys.contains("chunk") {
            find(&e.from, Rule::R1, format!("{} carries a chunk field", e.step));
        }
        if let Some(pd) = windows.hit_value(&visible) {
            find(&e.from, Rule::R1, format!("{} carries bytes of private data #{pd}", e.step));
        }

        // R2
        if from_role == Role::Index || to_role == Role::Index {
            let node = if to_role == Role::Index { &e.to } else { &e.from };
            for k in ["md", "kr", "kr1", "kr2", "chunk", "do"] {
                if keys.contains(k) {
                    find(node, Rule::R2, format!("{} to/from index carries {k}", e.step));
                }
            }
            for kr in krs_in(&text, &issued, None) {
                find(node, Rule::R2, format!("{} to/from index carries key reference {kr}", e.step));
            }
        }

        // R3
        if to_role == Role::Storage {
            for k in ["mk", "kr", "kr1", "kr2", "md", "do"] {
                if keys.contains(k) {
                    find(&e.to, Rule::R3, format!("{} to storage carries {k}", e.step));
                }
            }
            for kr in krs_in(&text, &issued, None) {
                find(&e.to, Rule::R3, format!("{} to storage carries key reference {kr}", e.step));
            }
        }

        // R4
        match e.step.as_str() {
            "ShareAck" => {
                for kr in krs_in(&text, &issued, None) {
                    find(&e.to, Rule::R4, format!("ShareAck reveals key reference {kr}"));
                }
            }
            "ShareGrant" => {
                let own = payload.get("kr2").and_then(Value::as_str);
                for kr in krs_in(&text, &issued, own) {
                    find(&e.to, Rule::R4, format!("ShareGrant reveals key reference {kr}"));
                }
            }
            _ => {}
        }
    }

    // R5
    for d in &ctx.pn_dumps {
        report.stores_checked += 1;
        let whole = serde_json::to_value(d).expect("dumps serialize");
        let hit = windows.hit_value(&whole).or_else(|| d.records.iter().find_map(|r| windows.hit(&r.value)));
        if let Some(pd) = hit {
            report.findings.push(Finding {
                line: 0,
                node: d.address.to_string(),
                rule: Rule::R5,
                detail: format!("store holds bytes of private data #{pd}"),
            });
        }
    }
    Ok(report)
}
