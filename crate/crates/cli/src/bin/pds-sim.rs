//! Runs scenarios on the simulated network and analyzes collusion over
//! saved node dumps.

use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{anyhow, Context};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::{Parser, Subcommand};
use serde_json::json;
use tracing_subscriber::EnvFilter;

use pds_cli::{exit, Failure, Format};
use pds_core::keyspace::MasterKey;
use pds_core::nodes::NodeDump;
use pds_core::sim_harness::adversary::{attempt_reconstruction, AdversaryView, MODEL_NOTE};
use pds_core::sim_harness::scenario::{RunOptions, Scenario, ScenarioRun};
use pds_core::sim_harness::HarnessError;

#[derive(Parser, Debug)]
#[command(name = "pds-sim", about = "Scenario runner, leak auditor, and collusion analyzer")]
struct Args {
    #[arg(long, value_enum, default_value = "text", global = true)]
    output: Format,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Run a scenario file.
    Run {
        #[arg(long)]
        scenario: PathBuf,
        /// Overrides the scenario's seed.
        #[arg(long)]
        seed: Option<u64>,
        /// Audit the transcript and processing-node stores for leaks.
        #[arg(long)]
        audit: bool,
        /// Keep node logs in this directory instead of memory.
        #[arg(long)]
        data_dir: Option<PathBuf>,
        /// Write report.json, transcript.jsonl, and dumps/ here.
        #[arg(long)]
        out: Option<PathBuf>,
        /// Run over loopback TCP instead of the simulator (sequential scenarios only).
        #[arg(long, conflicts_with = "audit")]
        tcp: bool,
    },
    /// What a coalition of nodes learns about one stored item.
    Collude {
        /// Directory holding node dumps, as written by `run --out`.
        #[arg(long)]
        dump: PathBuf,
        /// Comma-separated node ids forming the coalition.
        #[arg(long, value_delimiter = ',', required = true)]
        nodes: Vec<String>,
        /// Master key of the target, in hex.
        #[arg(long)]
        target: String,
    },
}

fn harness_failure(e: HarnessError) -> Failure {
    match e {
        HarnessError::Config(_) | HarnessError::Scenario(_) => Failure::usage(e),
        other => Failure::internal(other),
    }
}

fn write_out(dir: &Path, run: &ScenarioRun) -> anyhow::Result<()> {
    let dumps = dir.join("dumps");
    std::fs::create_dir_all(&dumps).with_context(|| format!("creating {}", dumps.display()))?;
    std::fs::write(dir.join("report.json"), serde_json::to_vec_pretty(&run.report)?)?;
    run.transcript.write(dir.join("transcript.jsonl"))?;
    for d in &run.dumps {
        std::fs::write(dumps.join(format!("{}.json", d.address)), serde_json::to_vec_pretty(d)?)?;
    }
    Ok(())
}

fn run_scenario(format: Format, path: &Path, opts: RunOptions, out: Option<&Path>, tcp: bool) -> Result<i32, Failure> {
    let scenario = Scenario::load(path).map_err(harness_failure)?;
    let run = if tcp { scenario.run_tcp(&opts) } else { scenario.run(&opts) }.map_err(harness_failure)?;
    if let Some(dir) = out {
        write_out(dir, &run).map_err(Failure::internal)?;
    }
    match format {
        Format::Text => print!("{}", run.report.to_text()),
        Format::Json => println!("{}", serde_json::to_string(&run.report).expect("reports serialize")),
    }
    let clean = run.report.leak.as_ref().is_none_or(|l| l.is_clean());
    Ok(if run.report.all_pass() && clean { exit::OK } else { exit::CHECK_FAILED })
}

fn load_dumps(dir: &Path) -> anyhow::Result<Vec<NodeDump>> {
    let sub = dir.join("dumps");
    let dir = if sub.is_dir() { sub } else { dir.to_path_buf() };
    let mut files: Vec<PathBuf> = std::fs::read_dir(&dir)
        .with_context(|| format!("reading {}", dir.display()))?
        .filter_map(|e| e.ok().map(|e| e.path()))
        .filter(|p| p.extension().is_some_and(|e| e == "json"))
        .collect();
    files.sort();
    if files.is_empty() {
        return Err(anyhow!("no node dumps in {}", dir.display()));
    }
    files
        .iter()
        .map(|f| {
            let text = std::fs::read_to_string(f).with_context(|| format!("reading {}", f.display()))?;
            serde_json::from_str(&text).with_context(|| format!("parsing {}", f.display()))
        })
        .collect()
}

fn collude(format: Format, dump: &Path, nodes: &[String], target: &str) -> Result<i32, Failure> {
    let mk: MasterKey = target.parse().map_err(|e| Failure::usage(anyhow!("target {target:?}: {e}")))?;
    let dumps = load_dumps(dump).map_err(Failure::usage)?;
    let ids: Vec<&str> = nodes.iter().map(String::as_str).collect();
    let view = AdversaryView::select(&dumps, &ids).map_err(|e| Failure::usage(anyhow!(e)))?;
    let r = attempt_reconstruction(&view, &mk);
    match format {
        Format::Text => {
            println!("model: {MODEL_NOTE}");
            println!("view: {}", r.members.join(", "));
            match r.chunks_needed {
                Some(n) => println!("chunks: {} of {n} found", r.chunks_found),
                None => println!("chunks: no index record in view"),
            }
            if let Some(a) = &r.attribution {
                let dps: Vec<&str> = a.processors.iter().map(|p| p.name.as_str()).collect();
                println!("owner: {}, processors: {}, metadata: {}", a.owner.name, dps.join(", "), serde_json::to_string(&a.md).unwrap_or_default());
            }
            println!("{}", r.summary());
        }
        Format::Json => {
            let v = json!({
                "model": MODEL_NOTE,
                "members": r.members,
                "bytes": r.bytes.is_some(),
                "attribution": r.attribution.is_some(),
                "data": r.bytes.as_ref().map(|b| B64.encode(b)),
                "owner": r.attribution.as_ref().map(|a| &a.owner),
                "processors": r.attribution.as_ref().map(|a| &a.processors),
                "md": r.attribution.as_ref().map(|a| &a.md),
                "chunks_needed": r.chunks_needed,
                "chunks_found": r.chunks_found,
            });
            println!("{v}");
        }
    }
    Ok(exit::OK)
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("error")))
        .with_writer(std::io::stderr)
        .init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    let result = match &args.command {
        Command::Run { scenario, seed, audit, data_dir, out, tcp } => {
            let opts = RunOptions { seed: *seed, data_dir: data_dir.clone(), audit: *audit };
            run_scenario(args.output, scenario, opts, out.as_deref(), *tcp)
        }
        Command::Collude { dump, nodes, target } => collude(args.output, dump, nodes, target),
    };
    match result {
        Ok(code) => ExitCode::from(code as u8),
        Err(f) => {
            eprintln!("pds-sim: {:#}", f.error);
            ExitCode::from(f.code as u8)
        }
    }
}
