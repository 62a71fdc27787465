//! Acceptance criteria. Each prints one PASS/FAIL line; any failure makes
//! the binary exit nonzero.

use std::collections::{BTreeMap, BTreeSet};
use std::path::{Path, PathBuf};
use std::time::Instant;

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::seq::SliceRandom;
use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::Value;
use statrs::distribution::{ChiSquared, ContinuousCDF};

use pds_core::keyspace::MasterKey;
use pds_core::kvstore::{KvStore, Record};
use pds_core::nodes::{log_file_name, NodeDump, OpOutcome, PnCommand};
use pds_core::protocol::{DenialReason, Metadata, Role};
use pds_core::secret_split::{recombine, split, Chunk, PrivateData};
use pds_core::sim_harness::adversary::{attempt_reconstruction, AdversaryView};
use pds_core::sim_harness::leak_audit::{audit_transcript, Rule};
use pds_core::sim_harness::scenario::{Fault, RunOptions, Scenario, ScenarioRun};
use pds_core::sim_harness::{ClusterSpec, SimCluster};
use pds_core::transport::EventKind;

type Check = Result<String, String>;

fn ensure(cond: bool, msg: impl FnOnce() -> String) -> Result<(), String> {
    if cond {
        Ok(())
    } else {
        Err(msg())
    }
}

fn random_bytes(rng: &mut ChaCha20Rng, len: usize) -> Vec<u8> {
    let mut v = vec![0u8; len];
    rng.fill_bytes(&mut v);
    v
}

fn random_len(rng: &mut ChaCha20Rng, len: std::ops::RangeInclusive<usize>) -> Vec<u8> {
    let n = rng.gen_range(len);
    random_bytes(rng, n)
}

fn run(c: &mut SimCluster, actor: &str, cmd: PnCommand) -> Result<OpOutcome, String> {
    c.run_op(actor, cmd).map_err(|e| e.to_string())
}

fn store(c: &mut SimCluster, actor: &str, alias: &str, data: Vec<u8>, chunks: Option<usize>) -> Result<MasterKey, String> {
    match run(c, actor, PnCommand::Store { alias: alias.into(), data, md: Metadata::new().with("k", "v"), chunks })? {
        OpOutcome::Stored { mk, .. } => Ok(mk),
        other => Err(format!("store by {actor}: {other:?}")),
    }
}

fn share(c: &mut SimCluster, owner: &str, alias: &str, to: &str) -> Result<(), String> {
    let to = c.identity(to).ok_or("no such processing node")?;
    let o = run(c, owner, PnCommand::Share { alias: alias.into(), to })?;
    ensure(o == OpOutcome::Shared, || format!("share: {o:?}"))
}

fn retrieve(c: &mut SimCluster, actor: &str, alias: &str) -> Result<OpOutcome, String> {
    run(c, actor, PnCommand::Retrieve { alias: alias.into() })
}

fn corpus_dir() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("../../scenarios")
}

fn corpus() -> Vec<(String, Scenario)> {
    let mut files: Vec<PathBuf> = std::fs::read_dir(corpus_dir())
        .expect("scenario dir")
        .map(|e| e.expect("dir entry").path())
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    files
        .into_iter()
        .map(|f| (f.file_stem().unwrap().to_string_lossy().into_owned(), Scenario::load(&f).expect("corpus scenario loads")))
        .collect()
}

fn stores(dumps: &[NodeDump]) -> Vec<(String, Vec<Record>)> {
    dumps.iter().map(|d| (d.address.to_string(), d.records.clone())).collect()
}

fn outcomes(run: &ScenarioRun) -> Vec<(String, OpOutcome)> {
    run.report.results.iter().map(|r| (r.id.clone(), r.outcome.clone())).collect()
}

fn round_trip() -> Check {
    let started = Instant::now();
    let mut rng = ChaCha20Rng::seed_from_u64(0xc1);
    for trial in 0..200 {
        let len = rng.gen_range(1..=64 * 1024);
        let n = rng.gen_range(2..=8);
        let seed = rng.gen::<u64>();
        let pd = random_bytes(&mut rng, len);
        let mut c = SimCluster::new(ClusterSpec::standard(8, &["Alice"], seed)).map_err(|e| e.to_string())?;
        store(&mut c, "pn-alice", "x", pd.clone(), Some(n))?;
        let o = retrieve(&mut c, "pn-alice", "x")?;
        ensure(o.data() == Some(&pd[..]), || format!("trial {trial} (len {len}, n {n}, seed {seed}): {o:?}"))?;
    }
    let secs = started.elapsed().as_secs_f64();
    ensure(secs < 60.0, || format!("took {secs:.1} s"))?;
    Ok(format!("200/200 bit-identical in {secs:.1} s"))
}

fn reference_stability() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(0xc2);
    for trial in 0..50 {
        let mut c = SimCluster::new(ClusterSpec::standard(3, &["Alice", "Bob"], rng.gen())).map_err(|e| e.to_string())?;
        let mut pd = random_len(&mut rng, 1..=256);
        store(&mut c, "pn-alice", "d", pd.clone(), None)?;
        share(&mut c, "pn-alice", "d", "pn-bob")?;
        let k = rng.gen_range(1..=10);
        for _ in 0..k {
            pd = random_len(&mut rng, 1..=256);
            let o = run(&mut c, "pn-alice", PnCommand::Update { alias: "d".into(), data: pd.clone() })?;
            ensure(o == OpOutcome::Updated, || format!("trial {trial}: update {o:?}"))?;
        }
        let o = retrieve(&mut c, "pn-bob", "d")?;
        ensure(o.data() == Some(&pd[..]), || format!("trial {trial} after {k} updates: {o:?}"))?;
    }
    Ok("50/50 grantee reads equal the final update".into())
}

fn delete_dominance() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(0xc3);
    let grantees = ["pn-bob", "pn-carol", "pn-dave"];
    let mut checked = 0;
    for trial in 0..50 {
        let mut c = SimCluster::new(ClusterSpec::standard(3, &["Alice", "Bob", "Carol", "Dave"], rng.gen())).map_err(|e| e.to_string())?;
        store(&mut c, "pn-alice", "d", random_bytes(&mut rng, 64), None)?;
        let m = rng.gen_range(0..=3);
        let chosen: Vec<&str> = grantees.choose_multiple(&mut rng, m).copied().collect();
        for g in &chosen {
            share(&mut c, "pn-alice", "d", g)?;
        }
        let o = run(&mut c, "pn-alice", PnCommand::Delete { alias: "d".into() })?;
        ensure(o == OpOutcome::Deleted, || format!("trial {trial}: delete {o:?}"))?;
        for who in std::iter::once("pn-alice").chain(chosen.iter().copied()) {
            let o = retrieve(&mut c, who, "d")?;
            ensure(o.denial() == Some(DenialReason::Deleted), || format!("trial {trial}: {who} got {o:?}"))?;
            checked += 1;
        }
    }
    Ok(format!("{checked}/{checked} reads after delete denied as deleted"))
}

fn revoke_precision() -> Check {
    let pns = ["pn-bob", "pn-carol", "pn-dave"];
    for (i, revoked) in ["Bob", "Carol", "Dave"].iter().enumerate() {
        let mut c = SimCluster::new(ClusterSpec::standard(3, &["Alice", "Bob", "Carol", "Dave"], 40 + i as u64)).map_err(|e| e.to_string())?;
        let pd = b"revocation target record".to_vec();
        store(&mut c, "pn-alice", "d", pd.clone(), None)?;
        for g in pns {
            share(&mut c, "pn-alice", "d", g)?;
        }
        let o = run(&mut c, "pn-alice", PnCommand::Revoke { alias: "d".into(), from: revoked.to_string() })?;
        ensure(o == OpOutcome::Revoked { found: true }, || format!("revoke {revoked}: {o:?}"))?;
        for who in std::iter::once("pn-alice").chain(pns) {
            let o = retrieve(&mut c, who, "d")?;
            if who == pns[i] {
                ensure(o.denial() == Some(DenialReason::Revoked), || format!("revoked {who} got {o:?}"))?;
            } else {
                ensure(o.data() == Some(&pd[..]), || format!("after revoking {revoked}, {who} got {o:?}"))?;
            }
        }
    }
    Ok("3/3 single revocations deny exactly the revoked processor".into())
}

fn collusion_matrix() -> Check {
    let members = ["an", "in", "sn1", "sn2", "sn3"];
    let mut subsets = 0;
    for chunks in [3, 2] {
        let mut c = SimCluster::new(ClusterSpec::standard(3, &["Alice", "Bob"], 50 + chunks as u64)).map_err(|e| e.to_string())?;
        let pd = b"collusion matrix target, 32+ bytes long".to_vec();
        let mk = store(&mut c, "pn-alice", "t", pd.clone(), Some(chunks))?;
        share(&mut c, "pn-alice", "t", "pn-bob")?;
        store(&mut c, "pn-bob", "decoy", b"unrelated decoy record bytes".to_vec(), None)?;
        let dumps = c.dumps();

        // Where the target's chunks live, read straight from the index log.
        let in_rec = dumps.iter().find(|d| d.address.as_str() == "in").unwrap().records.iter().find(|r| r.key == mk.to_hex()).unwrap();
        let entries: Value = serde_json::from_slice(&in_rec.value).unwrap();
        let target_sns: BTreeSet<String> = entries["entries"].as_array().unwrap().iter().map(|e| e["sn_addr"].as_str().unwrap().to_string()).collect();

        for mask in 0u32..32 {
            let view: Vec<&str> = members.iter().enumerate().filter(|(i, _)| mask & (1 << i) != 0).map(|(_, m)| *m).collect();
            let has = |m: &str| view.contains(&m);
            let want_bytes = has("in") && target_sns.iter().all(|s| has(s));
            let want_attr = has("an");
            let r = attempt_reconstruction(&AdversaryView::select(&dumps, &view).map_err(|e| e.to_string())?, &mk);
            ensure(r.bytes.is_some() == want_bytes && r.attribution.is_some() == want_attr, || {
                format!("n={chunks} view {view:?}: got {}, expected bytes {want_bytes} attribution {want_attr}", r.summary())
            })?;
            if let Some(b) = &r.bytes {
                ensure(b == &pd, || format!("view {view:?} recombined the wrong bytes"))?;
            }
            subsets += 1;
        }
    }
    Ok(format!("{subsets}/{subsets} views match the truth table (targets with 3 and 2 chunks)"))
}

fn leak_audit() -> Check {
    let scenarios = corpus();
    ensure(scenarios.len() >= 10, || format!("only {} scenarios", scenarios.len()))?;
    let mut messages = 0;
    for (name, s) in &scenarios {
        let r = s.run(&RunOptions::default()).map_err(|e| format!("{name}: {e}"))?;
        let report = r.audit().map_err(|e| format!("{name}: {e}"))?;
        ensure(report.is_clean(), || format!("{name}: {}", report.to_text()))?;
        messages += report.messages_checked;
    }

    // Seeded violations against the canonical run.
    let canon = &scenarios.iter().find(|(n, _)| n == "canonical").ok_or("no canonical scenario")?.1;
    let base = canon.run(&RunOptions::default()).map_err(|e| e.to_string())?;
    let ctx = base.audit_context();
    let pd = base.written.values().next().ok_or("no written data")?.clone();
    let payload = |step: &str| -> Value {
        base.transcript.events().iter().find(|e| e.kind == EventKind::Send && e.step == step).and_then(|e| e.payload.clone()).unwrap()
    };
    let kr2 = payload("ShareGrant")["kr2"].clone();
    let kr1 = payload("ShareReq")["kr1"].clone();
    let mk = payload("ReadAuth")["mk"].clone();
    let seeded: Vec<(Rule, &str, &str, Value)> = vec![
        (Rule::R1, "StoreGrant", "echo", Value::String(B64.encode(&pd))),
        (Rule::R2, "ReadAuth", "md", serde_json::json!({"type": "ssn"})),
        (Rule::R3, "ChunkGet", "mk", mk),
        (Rule::R4, "ShareAck", "kr2", kr2),
        (Rule::R4, "ShareGrant", "kr1", kr1),
    ];
    for (rule, step, field, value) in seeded {
        let mut t = base.transcript.clone();
        let mut e = base.transcript.events().iter().find(|e| e.kind == EventKind::Send && e.step == step).unwrap().clone();
        e.payload.as_mut().unwrap().as_object_mut().unwrap().insert(field.into(), value);
        t.push(e);
        let r = audit_transcript(&t, &ctx).map_err(|e| e.to_string())?;
        ensure(r.count(rule) >= 1, || format!("{rule} did not fire on {step}.{field}"))?;
    }
    let mut ctx5 = ctx.clone();
    let d = ctx5.pn_dumps.first_mut().ok_or("no processing dumps")?;
    let mut rec = d.records.first().ok_or("empty processing store")?.clone();
    rec.key = "cache".into();
    rec.value = pd;
    d.records.push(rec);
    let r = audit_transcript(&base.transcript, &ctx5).map_err(|e| e.to_string())?;
    ensure(r.count(Rule::R5) >= 1, || "R5 did not fire on a cached value".into())?;

    Ok(format!("{} scenarios, {messages} messages, 0 findings; R1-R5 each fire on a seeded violation", scenarios.len()))
}

fn concurrent_grouping() -> Check {
    let names = ["Alice", "Bob", "Carol", "Dave"];
    let mut spec = ClusterSpec::standard(4, &names, 0xc7);
    spec.timeout_ms = 2000;
    let mut c = SimCluster::new(spec).map_err(|e| e.to_string())?;
    let mut rng = ChaCha20Rng::seed_from_u64(0xc7);
    let mut items: Vec<(String, String, Vec<u8>)> = Vec::new();
    for i in 0..20 {
        let owner = format!("pn-{}", names[i % 4].to_lowercase());
        let alias = format!("item{i}");
        let pd = random_len(&mut rng, 32..=512);
        store(&mut c, &owner, &alias, pd.clone(), Some(rng.gen_range(2..=4)))?;
        items.push((owner, alias, pd));
    }

    let mut cfg = c.net_mut().config().clone();
    cfg.reorder_window_ms = 10;
    cfg.drop_prob = 0.01;
    c.net_mut().reconfigure(cfg);
    c.drain_completed();
    let mut expected = BTreeMap::new();
    for k in 0..100 {
        let (owner, alias, pd) = &items[k % 20];
        let op = c.submit(owner, PnCommand::Retrieve { alias: alias.clone() }).map_err(|e| e.to_string())?;
        expected.insert(op, pd.clone());
    }
    c.run_until_idle();

    let (mut completed, mut mixed, mut timeouts) = (0, 0, 0);
    for (op, pd) in &expected {
        match c.outcome(*op) {
            Some(OpOutcome::Retrieved { data }) => {
                completed += 1;
                if data != pd {
                    mixed += 1;
                }
            }
            Some(OpOutcome::Timeout { .. }) => timeouts += 1,
            other => return Err(format!("{op}: {other:?}")),
        }
    }
    let generations: u64 = c.nodes().map(|n| n.stats().mixed_generations).sum();
    ensure(mixed == 0 && generations == 0, || format!("{mixed} wrong payloads, {generations} mixed-generation reads"))?;
    ensure(completed > 0, || "no retrieve completed".into())?;
    Ok(format!("{completed} completed, {timeouts} timed out after drops, 0 mixing events"))
}

fn durability() -> Check {
    let tmp = tempfile::tempdir().map_err(|e| e.to_string())?;
    let sequential: Vec<(String, Scenario)> =
        corpus().into_iter().filter(|(_, s)| s.faults.is_empty() && s.ops.iter().all(|o| o.after.is_none())).collect();
    let mut runs = 0;
    for (name, s) in &sequential {
        let base = s.run(&RunOptions::default()).map_err(|e| e.to_string())?;
        let ids: Vec<String> = base.report.results.iter().map(|r| r.id.clone()).collect();
        for role in [Role::Audit, Role::Index, Role::Storage, Role::Processing] {
            let mut killed = s.clone();
            for node in s.nodes.iter().filter(|n| n.role == role) {
                for id in &ids {
                    killed.faults.push(Fault::Restart { node: node.id.clone(), after: id.clone() });
                }
            }
            let dir = tmp.path().join(format!("{name}-{role:?}"));
            let r = killed.run(&RunOptions { data_dir: Some(dir.clone()), ..Default::default() }).map_err(|e| e.to_string())?;
            ensure(outcomes(&r) == outcomes(&base), || format!("{name}, restarting {role:?}: results differ"))?;
            ensure(stores(&r.dumps) == stores(&base.dumps), || format!("{name}, restarting {role:?}: stores differ"))?;
            // Replay the logs from disk once more, cold.
            for d in &base.dumps {
                let path = dir.join(log_file_name(d.role, d.address.as_str()));
                let replayed: Vec<Record> = open(&path)?.records().cloned().collect();
                ensure(replayed == d.records, || format!("{name}: replay of {} differs", path.display()))?;
            }
            runs += 1;
        }
    }
    Ok(format!("{runs} kill-and-restart runs over {} scenarios match the uninterrupted stores", sequential.len()))
}

fn open(path: &Path) -> Result<KvStore, String> {
    KvStore::open(path).map_err(|e| format!("{}: {e}", path.display()))
}

fn backend_equivalence() -> Check {
    let s = Scenario::load(corpus_dir().join("canonical.json")).map_err(|e| e.to_string())?;
    let sim = s.run(&RunOptions::default()).map_err(|e| e.to_string())?;
    let tcp = s.run_tcp(&RunOptions::default()).map_err(|e| e.to_string())?;
    ensure(outcomes(&sim) == outcomes(&tcp), || "per-op results differ".into())?;
    ensure(stores(&sim.dumps) == stores(&tcp.dumps), || "final stores differ".into())?;
    Ok(format!("{} results and {} stores identical", sim.report.results.len(), sim.dumps.len()))
}

fn split_statistics() -> Check {
    let mut rng = ChaCha20Rng::seed_from_u64(0xca);
    let pd = PrivateData::new(vec![0u8; 25]).map_err(|e| e.to_string())?;
    let mut counts = [0u64; 256];
    let mut samples = 0u64;
    while samples < 100_000 {
        let chunks = split(&pd, 5, &mut rng).map_err(|e| e.to_string())?;
        for c in &chunks[..chunks.len() - 1] {
            for &b in &c.bytes {
                counts[b as usize] += 1;
            }
            samples += c.bytes.len() as u64;
        }
    }
    let expected = samples as f64 / 256.0;
    let stat: f64 = counts.iter().map(|&o| (o as f64 - expected).powi(2) / expected).sum();
    let p = ChiSquared::new(255.0).map_err(|e| e.to_string())?.sf(stat);
    ensure(p > 0.001, || format!("chi-square {stat:.1}, p = {p:.2e}"))?;

    for trial in 0..10_000 {
        let pd = PrivateData::new(random_bytes(&mut rng, 32)).map_err(|e| e.to_string())?;
        let n = rng.gen_range(2..=8);
        let chunks = split(&pd, n, &mut rng).map_err(|e| e.to_string())?;
        let k = rng.gen_range(1..n);
        let subset: Vec<&Chunk> = chunks.choose_multiple(&mut rng, k).collect();
        let mut acc = vec![0u8; 32];
        for c in subset {
            acc.iter_mut().zip(&c.bytes).for_each(|(a, b)| *a ^= b);
        }
        ensure(acc != pd.as_bytes(), || format!("trial {trial}: {k} of {n} chunks gave the data"))?;
        ensure(recombine(&chunks).map(|r| r.as_bytes() == pd.as_bytes()).unwrap_or(false), || format!("trial {trial}: recombine"))?;
    }
    Ok(format!("chi-square {stat:.1} on 255 dof over {samples} bytes (p = {p:.3}); 0/10000 proper subsets equal the data"))
}

type Criterion = (&'static str, fn() -> Check);

fn main() {
    let criteria: [Criterion; 10] = [
        ("round trip", round_trip),
        ("reference stability", reference_stability),
        ("delete dominance", delete_dominance),
        ("revoke precision", revoke_precision),
        ("collusion matrix", collusion_matrix),
        ("leak audit", leak_audit),
        ("concurrent grouping", concurrent_grouping),
        ("durability", durability),
        ("backend equivalence", backend_equivalence),
        ("split statistics", split_statistics),
    ];
    let mut failed = 0;
    for (i, (name, f)) in criteria.iter().enumerate() {
        match f() {
            Ok(detail) => println!("PASS {:>2} {name}: {detail}", i + 1),
            Err(detail) => {
                failed += 1;
                println!("FAIL {:>2} {name}: {detail}", i + 1);
            }
        }
    }
    println!("{} of {} criteria pass", criteria.len() - failed, criteria.len());
    if failed > 0 {
        std::process::exit(1);
    }
}
