use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use rand::{RngCore, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde_json::{json, Value};

use pds_core::nodes::{OpOutcome, PnCommand};
use pds_core::protocol::{Metadata, Role};
use pds_core::sim_harness::leak_audit::{audit_transcript, AuditContext, AuditError, Rule};
use pds_core::sim_harness::{ClusterSpec, SimCluster};
use pds_core::transport::{EventKind, Transcript, TranscriptEvent};

struct Fixture {
    transcript: Transcript,
    ctx: AuditContext,
    pd: Vec<u8>,
}

/// Store, share, retrieve by the grantee, update, revoke, delete. The data is
/// 48 random bytes, so chance window matches in chunks are negligible.
fn fixture() -> Fixture {
    let mut pd = vec![0u8; 48];
    ChaCha20Rng::seed_from_u64(7).fill_bytes(&mut pd);
    let mut pd2 = vec![0u8; 48];
    ChaCha20Rng::seed_from_u64(8).fill_bytes(&mut pd2);

    let mut c = SimCluster::new(ClusterSpec::standard(3, &["Alice", "Bob"], 5)).unwrap();
    let md = Metadata::new().with("purpose", "billing");
    let ok = |o: OpOutcome| assert!(o.is_ok(), "{o:?}");
    ok(c.run_op("pn-alice", PnCommand::Store { alias: "card".into(), data: pd.clone(), md, chunks: None }).unwrap());
    let bob = c.identity("pn-bob").unwrap();
    ok(c.run_op("pn-alice", PnCommand::Share { alias: "card".into(), to: bob }).unwrap());
    ok(c.run_op("pn-bob", PnCommand::Retrieve { alias: "card".into() }).unwrap());
    ok(c.run_op("pn-alice", PnCommand::Update { alias: "card".into(), data: pd2.clone() }).unwrap());
    ok(c.run_op("pn-alice", PnCommand::Revoke { alias: "card".into(), from: "Bob".into() }).unwrap());
    ok(c.run_op("pn-alice", PnCommand::Delete { alias: "card".into() }).unwrap());

    let ctx = AuditContext::from_dumps(&c.dumps(), vec![pd.clone(), pd2]);
    Fixture { transcript: c.transcript().clone(), ctx, pd }
}

fn first_send(t: &Transcript, step: &str) -> TranscriptEvent {
    t.events().iter().find(|e| e.kind == EventKind::Send && e.step == step).unwrap_or_else(|| panic!("no {step}")).clone()
}

/// The fixture transcript plus one hand-edited send of `step`.
fn inject(f: &Fixture, step: &str, edit: impl FnOnce(&mut serde_json::Map<String, Value>)) -> Transcript {
    let mut e = first_send(&f.transcript, step);
    edit(e.payload.as_mut().unwrap().as_object_mut().unwrap());
    let mut t = f.transcript.clone();
    t.push(e);
    t
}

fn any_kr(f: &Fixture) -> String {
    f.ctx.issued_krs.iter().next().unwrap().clone()
}

#[test]
fn honest_run_is_clean() {
    let f = fixture();
    let r = audit_transcript(&f.transcript, &f.ctx).unwrap();
    assert!(r.is_clean(), "{}", r.to_text());
    assert_eq!(r.messages_checked, f.transcript.count(EventKind::Send));
    assert_eq!(r.stores_checked, 2);
    assert!(r.to_text().ends_with("0 findings\n"));
}

#[test]
fn audit_is_deterministic() {
    let f = fixture();
    let t = inject(&f, "ReadAuth", |p| {
        p.insert("md".into(), json!({"purpose": "billing"}));
    });
    assert_eq!(audit_transcript(&t, &f.ctx).unwrap(), audit_transcript(&t, &f.ctx).unwrap());
}

#[test]
fn r1_store_grant_echoing_data() {
    let f = fixture();
    let pd = f.pd.clone();
    let t = inject(&f, "StoreGrant", |p| {
        p.insert("echo".into(), Value::String(B64.encode(&pd)));
    });
    let r = audit_transcript(&t, &f.ctx).unwrap();
    assert_eq!(r.count(Rule::R1), 1, "{}", r.to_text());
    assert_eq!(r.findings.len(), 1);
    assert_eq!(r.findings[0].line, t.len());
}

#[test]
fn r1_hex_encoded_data_is_caught() {
    let f = fixture();
    let pd = f.pd[10..30].to_vec();
    let t = inject(&f, "IndexPutAck", |p| {
        p.insert("note".into(), Value::String(hex::encode(pd)));
    });
    assert_eq!(audit_transcript(&t, &f.ctx).unwrap().count(Rule::R1), 1);
}

#[test]
fn r1_chunk_field_outside_chunk_steps() {
    let f = fixture();
    let t = inject(&f, "StoreInit", |p| {
        p.insert("chunk".into(), Value::String(B64.encode([1u8, 2, 3])));
    });
    let r = audit_transcript(&t, &f.ctx).unwrap();
    assert_eq!(r.count(Rule::R1), 1, "{}", r.to_text());
}

#[test]
fn r2_read_auth_carrying_metadata() {
    let f = fixture();
    let t = inject(&f, "ReadAuth", |p| {
        p.insert("md".into(), json!({"purpose": "billing"}));
    });
    let r = audit_transcript(&t, &f.ctx).unwrap();
    assert_eq!(r.count(Rule::R2), 1, "{}", r.to_text());
    assert_eq!(r.findings[0].node, "in");
}

#[test]
fn r2_key_reference_smuggled_to_index() {
    let f = fixture();
    let kr = any_kr(&f);
    let t = inject(&f, "DeleteCmd", |p| {
        p.insert("trace".into(), Value::String(kr));
    });
    let r = audit_transcript(&t, &f.ctx).unwrap();
    assert_eq!(r.count(Rule::R2), 1, "{}", r.to_text());
}

#[test]
fn r3_chunk_get_carrying_master_key() {
    let f = fixture();
    let mk = first_send(&f.transcript, "ReadAuth").payload.unwrap()["mk"].clone();
    let t = inject(&f, "ChunkGet", |p| {
        p.insert("mk".into(), mk);
    });
    let r = audit_transcript(&t, &f.ctx).unwrap();
    assert_eq!(r.count(Rule::R3), 1, "{}", r.to_text());
    assert!(r.findings[0].node.starts_with("sn"));
}

#[test]
fn r4_share_ack_revealing_kr2() {
    let f = fixture();
    let kr2 = first_send(&f.transcript, "ShareGrant").payload.unwrap()["kr2"].clone();
    let t = inject(&f, "ShareAck", |p| {
        p.insert("kr2".into(), kr2);
    });
    let r = audit_transcript(&t, &f.ctx).unwrap();
    assert_eq!(r.count(Rule::R4), 1, "{}", r.to_text());
    assert_eq!(r.findings.len(), 1);
}

#[test]
fn r4_share_grant_revealing_kr1() {
    let f = fixture();
    let kr1 = first_send(&f.transcript, "ShareReq").payload.unwrap()["kr1"].clone();
    let t = inject(&f, "ShareGrant", |p| {
        p.insert("kr1".into(), kr1);
    });
    let r = audit_transcript(&t, &f.ctx).unwrap();
    assert_eq!(r.count(Rule::R4), 1, "{}", r.to_text());
}

#[test]
fn r5_processing_store_holding_data() {
    let mut f = fixture();
    let pn = f.ctx.pn_dumps.iter_mut().find(|d| d.address.as_str() == "pn-bob").unwrap();
    let mut rec = pn.records[0].clone();
    rec.key = "cache".into();
    rec.value = f.pd.clone();
    pn.records.push(rec);
    let r = audit_transcript(&f.transcript, &f.ctx).unwrap();
    assert_eq!(r.count(Rule::R5), 1, "{}", r.to_text());
    assert_eq!(r.findings[0].node, "pn-bob");
    assert_eq!(r.findings[0].line, 0);
}

#[test]
fn digest_only_transcript_is_refused() {
    let f = fixture();
    let mut t = Transcript::digests_only();
    for mut e in f.transcript.events().iter().cloned() {
        e.payload = None;
        t.push(e);
    }
    assert!(matches!(audit_transcript(&t, &f.ctx), Err(AuditError::NoPayload(1))));
}

#[test]
fn unknown_node_is_an_error() {
    let f = fixture();
    let mut e = first_send(&f.transcript, "StoreInit");
    e.from = "pn-mallory".into();
    let mut t = Transcript::full();
    t.push(e);
    assert!(matches!(audit_transcript(&t, &f.ctx), Err(AuditError::UnknownNode { line: 1, .. })));
    let mut ctx = f.ctx.clone();
    ctx.roles.insert("pn-mallory".into(), Role::Processing);
    assert!(audit_transcript(&t, &ctx).is_ok());
}
