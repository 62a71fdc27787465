use std::path::PathBuf;

use pds_core::nodes::NodeDump;
use pds_core::sim_harness::scenario::{RunOptions, Scenario, ScenarioRun};

fn load(name: &str) -> Scenario {
    Scenario::load(PathBuf::from(env!("CARGO_MANIFEST_DIR")).join(format!("../../scenarios/{name}.json"))).unwrap()
}

/// Persistent state only; transient tables carry wall-clock deadlines.
fn stores(dumps: &[NodeDump]) -> Vec<(String, Vec<pds_core::kvstore::Record>)> {
    dumps.iter().map(|d| (d.address.to_string(), d.records.clone())).collect()
}

fn outcomes(run: &ScenarioRun) -> Vec<(String, pds_core::nodes::OpOutcome, bool)> {
    run.report.results.iter().map(|r| (r.id.clone(), r.outcome.clone(), r.pass)).collect()
}

#[test]
fn sequential_scenarios_match_across_backends() {
    for name in ["canonical", "update_chain", "revoke_precision", "restart_nodes", "local_rejections"] {
        let s = load(name);
        let sim = s.run(&RunOptions::default()).unwrap();
        let tcp = s.run_tcp(&RunOptions::default()).unwrap();
        assert!(tcp.report.all_pass(), "{name}:\n{}", tcp.report.to_text());
        assert_eq!(outcomes(&sim), outcomes(&tcp), "{name}");
        assert_eq!(stores(&sim.dumps), stores(&tcp.dumps), "{name}");
    }
}

#[test]
fn tcp_transcript_keeps_digests_only() {
    let run = load("canonical").run_tcp(&RunOptions::default()).unwrap();
    assert!(!run.transcript.is_empty());
    assert!(run.transcript.events().iter().all(|e| e.payload.is_none() && e.payload_digest.len() == 64));
}

#[test]
fn concurrent_or_faulted_scenarios_are_refused_over_tcp() {
    assert!(load("concurrent_retrieves").run_tcp(&RunOptions::default()).is_err());
    assert!(load("storage_outage").run_tcp(&RunOptions::default()).is_err());
    assert!(load("canonical").run_tcp(&RunOptions { audit: true, ..Default::default() }).is_err());
}
