//! Shared pieces of the `pds-node`, `pdsctl`, and `pds-sim` binaries:
//! config files, exit codes, and the JSON response shape.

use std::collections::BTreeMap;
use std::net::{SocketAddr, ToSocketAddrs};
use std::path::{Path, PathBuf};

use anyhow::{anyhow, bail, Context, Result};
use serde::{Deserialize, Serialize};

use pds_core::keyspace::{Address, Identity};
use pds_core::nodes::OpOutcome;
use pds_core::protocol::{DenialReason, Role};
use pds_core::sim_harness::{ClusterSpec, NodeSpec};

pub mod exit {
    pub const OK: i32 = 0;
    /// Checks ran but did not all pass (pds-sim only).
    pub const CHECK_FAILED: i32 = 1;
    pub const USAGE: i32 = 2;
    pub const DENIED: i32 = 3;
    pub const TIMEOUT: i32 = 4;
    pub const INTERNAL: i32 = 5;
}

/// An error that carries its exit code.
#[derive(Debug)]
pub struct Failure {
    pub code: i32,
    pub error: anyhow::Error,
}

impl Failure {
    pub fn usage(error: impl Into<anyhow::Error>) -> Self {
        Self { code: exit::USAGE, error: error.into() }
    }

    pub fn internal(error: impl Into<anyhow::Error>) -> Self {
        Self { code: exit::INTERNAL, error: error.into() }
    }
}

#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeEntry {
    pub id: String,
    pub role: Role,
    #[serde(default)]
    pub identity: Option<String>,
    /// host:port the node listens on.
    pub addr: String,
}

/// One node's config: which roster entry it is, plus the whole roster so
/// it can reach its peers. Every node of a cluster must share roster and
/// seed.
#[derive(Clone, Debug, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct NodeConfig {
    pub node: String,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
    #[serde(default)]
    pub default_chunks: Option<usize>,
    /// Log directory; relative paths resolve against the config file.
    pub data_dir: PathBuf,
    pub nodes: Vec<NodeEntry>,
}

impl NodeConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        let mut cfg: NodeConfig = serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))?;
        if cfg.data_dir.is_relative() {
            let base = path.parent().unwrap_or(Path::new("."));
            cfg.data_dir = base.join(&cfg.data_dir);
        }
        if !cfg.nodes.iter().any(|n| n.id == cfg.node) {
            bail!("node {:?} is not in the roster", cfg.node);
        }
        Ok(cfg)
    }

    pub fn cluster_spec(&self) -> ClusterSpec {
        let nodes = self.nodes.iter().map(|n| NodeSpec { id: n.id.clone(), role: n.role, identity: n.identity.clone() }).collect();
        let mut spec = ClusterSpec::new(nodes, self.seed);
        if let Some(t) = self.timeout_ms {
            spec.timeout_ms = t;
        }
        if let Some(c) = self.default_chunks {
            spec.default_chunks = c;
        }
        spec.data_dir = Some(self.data_dir.clone());
        spec
    }

    pub fn routes(&self) -> Result<BTreeMap<Address, SocketAddr>> {
        self.nodes
            .iter()
            .map(|n| {
                let a = Address::new(&n.id).map_err(|e| anyhow!("node id {:?}: {e}", n.id))?;
                Ok((a, resolve(&n.addr)?))
            })
            .collect()
    }

    pub fn listen_addr(&self) -> Result<SocketAddr> {
        let me = self.nodes.iter().find(|n| n.id == self.node).expect("checked at load");
        resolve(&me.addr)
    }
}

pub fn resolve(addr: &str) -> Result<SocketAddr> {
    addr.to_socket_addrs()
        .with_context(|| format!("resolving {addr:?}"))?
        .next()
        .ok_or_else(|| anyhow!("{addr:?} resolves to nothing"))
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize, clap::ValueEnum)]
#[serde(rename_all = "snake_case")]
pub enum Format {
    #[default]
    Text,
    Json,
}

/// Defaults for `pdsctl`, read from `--config` or `PDS_CONFIG`.
#[derive(Clone, Debug, Default, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct CliConfig {
    /// Identity name the operator acts as; must match the processing node.
    #[serde(default)]
    pub identity: Option<String>,
    /// host:port of the processing node.
    #[serde(default)]
    pub processing: Option<String>,
    #[serde(default)]
    pub output: Option<Format>,
}

impl CliConfig {
    pub fn load(path: &Path) -> Result<Self> {
        let text = std::fs::read_to_string(path).with_context(|| format!("reading {}", path.display()))?;
        serde_json::from_str(&text).with_context(|| format!("parsing {}", path.display()))
    }
}

/// `name@address`, as given to `share --to`.
pub fn parse_identity(s: &str) -> Result<Identity> {
    let (name, loc) = s.split_once('@').ok_or_else(|| anyhow!("expected name@address, got {s:?}"))?;
    let loc = Address::new(loc).map_err(|e| anyhow!("{loc:?}: {e}"))?;
    Identity::new(name, loc).map_err(|e| anyhow!("{name:?}: {e}"))
}

/// `k=v`, as given to `store --meta`.
pub fn parse_meta(s: &str) -> Result<(String, String)> {
    let (k, v) = s.split_once('=').ok_or_else(|| anyhow!("expected key=value, got {s:?}"))?;
    if k.is_empty() {
        bail!("empty metadata key in {s:?}");
    }
    Ok((k.to_string(), v.to_string()))
}

/// The label printed for a denial. Identical to the wire name.
pub fn reason_label(r: DenialReason) -> &'static str {
    r.as_str()
}

pub fn parse_reason(label: &str) -> Option<DenialReason> {
    DenialReason::ALL.into_iter().find(|r| r.as_str() == label)
}

/// One `pdsctl` result, as printed in JSON mode.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
pub struct Response {
    pub status: String,
    pub op: String,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub alias: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub reason: Option<String>,
    /// Key reference of a fresh store; only with `--show-kr`.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub kr: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bytes: Option<usize>,
    /// Base64 data of a read to standard output.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub data: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub found: Option<bool>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub phase: Option<String>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub received: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub expected: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub error: Option<String>,
    pub exit: i32,
}

impl Response {
    pub fn error(op: &str, code: i32, message: String) -> Self {
        Self { status: "error".into(), op: op.into(), error: Some(message), exit: code, ..Default::default() }
    }

    /// Status, reason, and exit code for an outcome. Callers fill in the
    /// op-specific fields.
    pub fn from_outcome(op: &str, alias: &str, outcome: &OpOutcome) -> Self {
        let mut r = Self { op: op.into(), alias: Some(alias.into()), ..Default::default() };
        match outcome {
            OpOutcome::Denied { reason } => {
                r.status = "denied".into();
                r.reason = Some(reason_label(*reason).into());
                r.exit = exit::DENIED;
            }
            OpOutcome::Timeout { phase, received, expected } => {
                r.status = "timeout".into();
                r.phase = Some(phase.clone());
                r.received = Some(*received);
                r.expected = Some(*expected);
                r.exit = exit::TIMEOUT;
            }
            OpOutcome::Rejected { error } => {
                r.status = "rejected".into();
                r.error = Some(error.clone());
                r.exit = exit::USAGE;
            }
            OpOutcome::Revoked { found } => {
                r.status = "ok".into();
                r.found = Some(*found);
            }
            _ => r.status = "ok".into(),
        }
        r
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("{} {}", self.op, self.status);
        for (k, v) in [("alias", &self.alias), ("reason", &self.reason), ("kr", &self.kr), ("out", &self.out), ("phase", &self.phase), ("error", &self.error)] {
            if let Some(v) = v {
                s.push_str(&format!(" {k}={v}"));
            }
        }
        if let Some(b) = self.bytes {
            s.push_str(&format!(" bytes={b}"));
        }
        if let Some(f) = self.found {
            s.push_str(&format!(" found={f}"));
        }
        if let (Some(r), Some(e)) = (self.received, self.expected) {
            s.push_str(&format!(" received={r}/{e}"));
        }
        s
    }
}
