//! Declarative scenarios: a roster, a seed, operations with dependencies,
//! and faults, run on a [`SimCluster`].
//!
//! An operation starts when the operation named by `after` completes;
//! `"start"` means time zero, and a missing `after` means the previous
//! operation in the list. Faults fire when the named operation completes.
//!
//! Sequential scenarios can also run over loopback TCP with
//! [`Scenario::run_tcp`].

use std::collections::{BTreeMap, BTreeSet, VecDeque};
use std::path::Path;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::leak_audit::{audit_transcript, AuditContext, LeakReport};
use super::{ClusterSpec, HarnessError, NodeSpec, SimCluster, TcpCluster};
use crate::nodes::{NodeDump, OpId, OpOutcome, PnCommand, DEFAULT_TIMEOUT_MS};
use crate::protocol::{DenialReason, Metadata, Op, Role};
use crate::secret_split::DEFAULT_CHUNKS;
use crate::transport::sim::SimNetConfig;
use crate::transport::Transcript;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Scenario {
    #[serde(default)]
    pub name: Option<String>,
    #[serde(default)]
    pub description: Option<String>,
    pub nodes: Vec<NodeSpec>,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub ops: Vec<ScenarioOp>,
    #[serde(default)]
    pub faults: Vec<Fault>,
    #[serde(default)]
    pub timeout_ms: Option<u64>,
    #[serde(default)]
    pub default_chunks: Option<usize>,
    #[serde(default)]
    pub net: Option<SimNetConfig>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioOp {
    #[serde(default)]
    pub id: Option<String>,
    pub op: Op,
    pub actor: String,
    #[serde(default)]
    pub params: OpParams,
    #[serde(default)]
    pub after: Option<String>,
    #[serde(default)]
    pub expect: Option<Expect>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OpParams {
    #[serde(default)]
    pub alias: Option<String>,
    #[serde(default)]
    pub data: Option<DataSpec>,
    #[serde(default)]
    pub meta: BTreeMap<String, String>,
    #[serde(default)]
    pub chunks: Option<usize>,
    /// Share target: a processing-node id or identity name.
    #[serde(default)]
    pub to: Option<String>,
    /// Revoke target: an identity name or processing-node id.
    #[serde(default)]
    pub from: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum DataSpec {
    Text { text: String },
    Base64 { b64: String },
    Random { random: usize },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Ok,
    Denied,
    Timeout,
    Rejected,
}

impl Status {
    pub fn of(outcome: &OpOutcome) -> Status {
        match outcome {
            OpOutcome::Denied { .. } => Status::Denied,
            OpOutcome::Timeout { .. } => Status::Timeout,
            OpOutcome::Rejected { .. } => Status::Rejected,
            _ => Status::Ok,
        }
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Expect {
    pub status: Status,
    #[serde(default)]
    pub reason: Option<DenialReason>,
    /// A retrieve must return the data written by this store or update.
    #[serde(default)]
    pub data_of: Option<String>,
    /// A retrieve may return the data of any of these operations.
    #[serde(default)]
    pub data_of_any: Vec<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "snake_case", deny_unknown_fields)]
pub enum Fault {
    /// Replaces the network model when `after` completes (or at start).
    Net {
        #[serde(default)]
        after: Option<String>,
        #[serde(default)]
        latency_min_ms: Option<u64>,
        #[serde(default)]
        latency_max_ms: Option<u64>,
        #[serde(default)]
        drop_prob: Option<f64>,
        #[serde(default)]
        reorder_window_ms: Option<u64>,
    },
    /// Crash and restart a node once `after` completes.
    Restart { node: String, after: String },
    /// Take a node down when `after` completes (or at start) and bring it
    /// back when `until` completes.
    Down {
        node: String,
        #[serde(default)]
        after: Option<String>,
        #[serde(default)]
        until: Option<String>,
    },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct OpResult {
    pub id: String,
    pub op: Op,
    pub actor: String,
    pub outcome: OpOutcome,
    pub completed_at: u64,
    /// False when an expectation was given and not met.
    pub pass: bool,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub mismatch: Option<String>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScenarioReport {
    pub name: String,
    pub seed: u64,
    pub results: Vec<OpResult>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub leak: Option<LeakReport>,
}

impl ScenarioReport {
    pub fn all_pass(&self) -> bool {
        self.results.iter().all(|r| r.pass)
    }

    pub fn result(&self, id: &str) -> Option<&OpResult> {
        self.results.iter().find(|r| r.id == id)
    }

    pub fn to_text(&self) -> String {
        let mut s = format!("scenario {} (seed {})\n", self.name, self.seed);
        for r in &self.results {
            let outcome = match &r.outcome {
                OpOutcome::Retrieved { data } => format!("retrieved {} bytes", data.len()),
                OpOutcome::Stored { mk, .. } => format!("stored mk {mk}"),
                other => serde_json::to_string(other).unwrap_or_default(),
            };
            let mark = if r.pass { "ok  " } else { "FAIL" };
            s.push_str(&format!("  {mark} {:<14} {:<8} {:<10} t={:<6} {outcome}", r.id, r.op.as_str(), r.actor, r.completed_at));
            if let Some(m) = &r.mismatch {
                s.push_str(&format!("  ({m})"));
            }
            s.push('\n');
        }
        if let Some(l) = &self.leak {
            s.push_str(&l.to_text());
        }
        s
    }
}

/// Everything a run produced.
#[derive(Debug)]
pub struct ScenarioRun {
    pub report: ScenarioReport,
    pub transcript: Transcript,
    pub dumps: Vec<NodeDump>,
    /// Data written by each store/update, by op id.
    pub written: BTreeMap<String, Vec<u8>>,
}

impl ScenarioRun {
    pub fn audit_context(&self) -> AuditContext {
        AuditContext::from_dumps(&self.dumps, self.written.values().cloned().collect())
    }

    pub fn audit(&self) -> Result<LeakReport, HarnessError> {
        audit_transcript(&self.transcript, &self.audit_context()).map_err(|e| HarnessError::Scenario(e.to_string()))
    }
}

#[derive(Clone, Debug, Default)]
pub struct RunOptions {
    pub seed: Option<u64>,
    pub data_dir: Option<std::path::PathBuf>,
    pub audit: bool,
}

impl Scenario {
    pub fn from_json(text: &str) -> Result<Scenario, HarnessError> {
        serde_json::from_str(text).map_err(|e| HarnessError::Scenario(e.to_string()))
    }

    pub fn load(path: impl AsRef<Path>) -> Result<Scenario, HarnessError> {
        let text = std::fs::read_to_string(path.as_ref())
            .map_err(|e| HarnessError::Scenario(format!("{}: {e}", path.as_ref().display())))?;
        let mut s = Self::from_json(&text)?;
        if s.name.is_none() {
            s.name = path.as_ref().file_stem().map(|n| n.to_string_lossy().into_owned());
        }
        Ok(s)
    }

    fn op_ids(&self) -> Vec<String> {
        self.ops.iter().enumerate().map(|(i, o)| o.id.clone().unwrap_or_else(|| format!("op{}", i + 1))).collect()
    }

    pub fn cluster_spec(&self, seed: u64) -> ClusterSpec {
        let mut spec = ClusterSpec::new(self.nodes.clone(), seed);
        spec.timeout_ms = self.timeout_ms.unwrap_or(DEFAULT_TIMEOUT_MS);
        spec.default_chunks = self.default_chunks.unwrap_or(DEFAULT_CHUNKS);
        spec.net = SimNetConfig { seed, ..self.net.clone().unwrap_or_default() };
        spec
    }

    fn pn_by_ref<'a>(&'a self, who: &str) -> Option<&'a NodeSpec> {
        self.nodes
            .iter()
            .filter(|n| n.role == Role::Processing)
            .find(|n| n.id == who || n.identity.as_deref() == Some(who) || (n.identity.is_none() && n.id == who))
    }

    /// Reference and parameter checks, before anything runs.
    pub fn validate(&self) -> Result<(), HarnessError> {
        let err = |m: String| Err(HarnessError::Scenario(m));
        self.cluster_spec(self.seed).validate()?;
        let ids = self.op_ids();
        let mut seen = BTreeSet::new();
        for (o, id) in self.ops.iter().zip(&ids) {
            if id == "start" {
                return err("op id \"start\" is reserved".into());
            }
            if self.pn_by_ref(&o.actor).map(|n| n.id != o.actor).unwrap_or(true) {
                return err(format!("{id}: actor {:?} is not a processing node id", o.actor));
            }
            if let Some(a) = &o.after {
                if a != "start" && !seen.contains(a) {
                    return err(format!("{id}: after {a:?} does not name an earlier op"));
                }
            }
            let p = &o.params;
            if p.alias.as_deref().unwrap_or("").is_empty() {
                return err(format!("{id}: alias required"));
            }
            match o.op {
                Op::Store | Op::Update if p.data.is_none() => return err(format!("{id}: data required")),
                Op::Share => match &p.to {
                    Some(t) if self.pn_by_ref(t).is_some() => {}
                    other => return err(format!("{id}: share target {other:?} is not a processing node")),
                },
                Op::Revoke if p.from.is_none() => return err(format!("{id}: revoke needs from")),
                _ => {}
            }
            if let Some(DataSpec::Base64 { b64 }) = &p.data {
                if B64.decode(b64).is_err() {
                    return err(format!("{id}: data is not base64"));
                }
            }
            if let Some(e) = &o.expect {
                for d in e.data_of.iter().chain(&e.data_of_any) {
                    let Some(j) = ids.iter().position(|x| x == d) else {
                        return err(format!("{id}: data_of {d:?} is not an op"));
                    };
                    if !matches!(self.ops[j].op, Op::Store | Op::Update) {
                        return err(format!("{id}: data_of {d:?} is not a store or update"));
                    }
                }
            }
            seen.insert(id.clone());
        }
        let node_known = |n: &str| self.nodes.iter().any(|x| x.id == n);
        let op_known = |a: &Option<String>| a.as_ref().is_none_or(|a| a == "start" || seen.contains(a));
        for f in &self.faults {
            match f {
                Fault::Net { after, drop_prob, .. } => {
                    if !op_known(after) {
                        return err(format!("net fault: unknown op {after:?}"));
                    }
                    if drop_prob.is_some_and(|p| !(0.0..=1.0).contains(&p)) {
                        return err("net fault: drop_prob outside [0, 1]".into());
                    }
                }
                Fault::Restart { node, after } => {
                    if !node_known(node) || !op_known(&Some(after.clone())) {
                        return err(format!("restart fault: unknown node {node:?} or op {after:?}"));
                    }
                }
                Fault::Down { node, after, until } => {
                    if !node_known(node) || !op_known(after) || !op_known(until) {
                        return err(format!("down fault: unknown node {node:?} or op"));
                    }
                }
            }
        }
        Ok(())
    }

    fn resolve_data(&self, rng: &mut ChaCha20Rng) -> Vec<Option<Vec<u8>>> {
        self.ops
            .iter()
            .map(|o| {
                o.params.data.as_ref().map(|d| match d {
                    DataSpec::Text { text } => text.as_bytes().to_vec(),
                    DataSpec::Base64 { b64 } => B64.decode(b64).unwrap_or_default(),
                    DataSpec::Random { random } => {
                        let mut v = vec![0u8; *random];
                        rng.fill_bytes(&mut v);
                        v
                    }
                })
            })
            .collect()
    }

    fn command(&self, i: usize, data: &[Option<Vec<u8>>], spec: &ClusterSpec) -> PnCommand {
        let o = &self.ops[i];
        let p = &o.params;
        let alias = p.alias.clone().unwrap_or_default();
        match o.op {
            Op::Store => PnCommand::Store {
                alias,
                data: data[i].clone().unwrap_or_default(),
                md: Metadata(p.meta.clone()),
                chunks: p.chunks,
            },
            Op::Retrieve => PnCommand::Retrieve { alias },
            Op::Update => PnCommand::Update { alias, data: data[i].clone().unwrap_or_default() },
            Op::Delete => PnCommand::Delete { alias },
            Op::Share => {
                let target = self.pn_by_ref(p.to.as_deref().unwrap_or_default()).expect("validated");
                PnCommand::Share { alias, to: spec.identity(target).expect("validated") }
            }
            Op::Revoke => {
                let from = p.from.clone().unwrap_or_default();
                let name = self.pn_by_ref(&from).and_then(|n| spec.identity(n).ok()).map(|id| id.name).unwrap_or(from);
                PnCommand::Revoke { alias, from: name }
            }
        }
    }

    pub fn run(&self, opts: &RunOptions) -> Result<ScenarioRun, HarnessError> {
        self.validate()?;
        let seed = opts.seed.unwrap_or(self.seed);
        let mut spec = self.cluster_spec(seed);
        spec.data_dir = opts.data_dir.clone();
        let mut cluster = SimCluster::new(spec)?;
        let mut data_rng = ChaCha20Rng::seed_from_u64(seed ^ 0x5ce7_a210);
        let data = self.resolve_data(&mut data_rng);
        let ids = self.op_ids();

        // trigger -> ops waiting on it, in declaration order
        let mut waiting: BTreeMap<String, Vec<usize>> = BTreeMap::new();
        for (i, o) in self.ops.iter().enumerate() {
            let trigger = match (&o.after, i) {
                (Some(a), _) => a.clone(),
                (None, 0) => "start".into(),
                (None, _) => ids[i - 1].clone(),
            };
            waiting.entry(trigger).or_default().push(i);
        }
        let mut running: BTreeMap<OpId, usize> = BTreeMap::new();
        let mut results: Vec<Option<OpResult>> = vec![None; self.ops.len()];

        self.fire(&mut cluster, "start")?;
        let mut ready: VecDeque<String> = VecDeque::from(["start".to_string()]);
        loop {
            while let Some(trigger) = ready.pop_front() {
                for i in waiting.remove(&trigger).unwrap_or_default() {
                    let cmd = self.command(i, &data, cluster.spec());
                    let op = cluster.submit(&self.ops[i].actor, cmd)?;
                    running.insert(op, i);
                }
                self.collect(&mut cluster, &mut running, &mut results, &mut ready, &ids, &data)?;
            }
            if running.is_empty() || !cluster.step() {
                break;
            }
            self.collect(&mut cluster, &mut running, &mut results, &mut ready, &ids, &data)?;
        }
        // Let trailing timers and stragglers settle.
        cluster.run_until_idle();

        let results = results
            .into_iter()
            .enumerate()
            .map(|(i, r)| {
                r.unwrap_or_else(|| OpResult {
                    id: ids[i].clone(),
                    op: self.ops[i].op,
                    actor: self.ops[i].actor.clone(),
                    outcome: OpOutcome::Rejected { error: "never started or never completed".into() },
                    completed_at: cluster.now(),
                    pass: false,
                    mismatch: Some("did not complete".into()),
                })
            })
            .collect();
        let written = self.written(&ids, &data);
        let mut run = ScenarioRun {
            report: ScenarioReport { name: self.name.clone().unwrap_or_else(|| "scenario".into()), seed, results, leak: None },
            transcript: cluster.net_mut().take_transcript(),
            dumps: cluster.dumps(),
            written,
        };
        if opts.audit {
            run.report.leak = Some(run.audit()?);
        }
        Ok(run)
    }

    fn written(&self, ids: &[String], data: &[Option<Vec<u8>>]) -> BTreeMap<String, Vec<u8>> {
        ids.iter()
            .zip(data)
            .zip(&self.ops)
            .filter(|(_, o)| matches!(o.op, Op::Store | Op::Update))
            .filter_map(|((id, d), _)| d.clone().map(|d| (id.clone(), d)))
            .collect()
    }

    /// Runs the scenario over loopback TCP, one operation at a time. Only
    /// sequential scenarios qualify, and only restart faults carry over.
    /// The transcript keeps digests only, so the result cannot be audited.
    pub fn run_tcp(&self, opts: &RunOptions) -> Result<ScenarioRun, HarnessError> {
        self.validate()?;
        let ids = self.op_ids();
        for (i, o) in self.ops.iter().enumerate() {
            let prev = if i == 0 { "start" } else { ids[i - 1].as_str() };
            if o.after.as_deref().is_some_and(|a| a != prev) {
                return Err(HarnessError::Scenario(format!("{}: concurrent ops cannot run over TCP", ids[i])));
            }
        }
        if self.faults.iter().any(|f| !matches!(f, Fault::Restart { .. })) {
            return Err(HarnessError::Scenario("only restart faults can run over TCP".into()));
        }
        if opts.audit {
            return Err(HarnessError::Scenario("TCP transcripts keep digests only and cannot be audited".into()));
        }
        let seed = opts.seed.unwrap_or(self.seed);
        let mut spec = self.cluster_spec(seed);
        spec.data_dir = opts.data_dir.clone();
        let mut cluster = TcpCluster::start(&spec)?;
        let data = self.resolve_data(&mut ChaCha20Rng::seed_from_u64(seed ^ 0x5ce7_a210));
        let mut results = Vec::new();
        for (i, o) in self.ops.iter().enumerate() {
            let outcome = cluster.run_op(&o.actor, self.command(i, &data, &spec))?;
            results.push(self.judge(i, &ids, outcome, cluster.now(), &data));
            for f in &self.faults {
                if let Fault::Restart { node, after } = f {
                    if *after == ids[i] {
                        cluster.restart(node)?;
                    }
                }
            }
        }
        let dumps = cluster.dumps()?;
        let transcript = cluster.transcript();
        cluster.shutdown();
        Ok(ScenarioRun {
            report: ScenarioReport { name: self.name.clone().unwrap_or_else(|| "scenario".into()), seed, results, leak: None },
            transcript,
            dumps,
            written: self.written(&ids, &data),
        })
    }

    #[allow(clippy::too_many_arguments)]
    fn collect(
        &self,
        cluster: &mut SimCluster,
        running: &mut BTreeMap<OpId, usize>,
        results: &mut [Option<OpResult>],
        ready: &mut VecDeque<String>,
        ids: &[String],
        data: &[Option<Vec<u8>>],
    ) -> Result<(), HarnessError> {
        for c in cluster.drain_completed() {
            if let Some(i) = running.remove(&c.op) {
                results[i] = Some(self.judge(i, ids, c.outcome, cluster.now(), data));
                self.fire(cluster, &ids[i])?;
                ready.push_back(ids[i].clone());
            }
        }
        Ok(())
    }

    fn fire(&self, cluster: &mut SimCluster, trigger: &str) -> Result<(), HarnessError> {
        let at = |a: &Option<String>| a.as_deref().unwrap_or("start") == trigger;
        for f in &self.faults {
            match f {
                Fault::Net { after, latency_min_ms, latency_max_ms, drop_prob, reorder_window_ms } if at(after) => {
                    let mut cfg = cluster.net_mut().config().clone();
                    if let Some(v) = latency_min_ms {
                        cfg.latency_min_ms = *v;
                    }
                    if let Some(v) = latency_max_ms {
                        cfg.latency_max_ms = *v;
                    }
                    if let Some(v) = drop_prob {
                        cfg.drop_prob = *v;
                    }
                    if let Some(v) = reorder_window_ms {
                        cfg.reorder_window_ms = *v;
                    }
                    cluster.net_mut().reconfigure(cfg);
                }
                Fault::Restart { node, after } if after == trigger => cluster.restart(node)?,
                Fault::Down { node, after, .. } if at(after) => cluster.set_down(node, true)?,
                Fault::Down { node, until: Some(u), .. } if u == trigger => cluster.set_down(node, false)?,
                _ => {}
            }
        }
        Ok(())
    }

    fn judge(&self, i: usize, ids: &[String], outcome: OpOutcome, now: u64, data: &[Option<Vec<u8>>]) -> OpResult {
        let o = &self.ops[i];
        let mut mismatch = None;
        if let Some(e) = &o.expect {
            let status = Status::of(&outcome);
            let data_of = |id: &String| ids.iter().position(|x| x == id).and_then(|j| data[j].as_deref());
            if status != e.status {
                mismatch = Some(format!("expected {:?}, got {status:?}", e.status));
            } else if e.reason.is_some() && outcome.denial() != e.reason {
                mismatch = Some(format!("expected reason {:?}, got {:?}", e.reason, outcome.denial()));
            } else if let Some(d) = &e.data_of {
                if outcome.data() != data_of(d) {
                    mismatch = Some(format!("data differs from {d}"));
                }
            } else if !e.data_of_any.is_empty() && !e.data_of_any.iter().any(|d| outcome.data() == data_of(d)) {
                mismatch = Some(format!("data matches none of {:?}", e.data_of_any));
            }
        }
        OpResult {
            id: ids[i].clone(),
            op: o.op,
            actor: o.actor.clone(),
            outcome,
            completed_at: now,
            pass: mismatch.is_none(),
            mismatch,
        }
    }
}
