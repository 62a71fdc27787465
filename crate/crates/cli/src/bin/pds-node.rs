//! Runs one node of any role until a control client sends `shutdown`.

use std::net::TcpListener;
use std::path::PathBuf;
use std::process::ExitCode;

use anyhow::Context;
use clap::Parser;
use tracing_subscriber::EnvFilter;

use pds_cli::{exit, Failure, NodeConfig};
use pds_core::sim_harness::build_node;
use pds_core::transport::tcp::{NodeHandle, TcpTransport};

#[derive(Parser, Debug)]
#[command(name = "pds-node", about = "Serve one private data store node")]
struct Args {
    /// Node config (JSON).
    #[arg(long)]
    config: PathBuf,
}

fn serve(args: &Args) -> Result<(), Failure> {
    let cfg = NodeConfig::load(&args.config).map_err(Failure::usage)?;
    let spec = cfg.cluster_spec();
    let routes = cfg.routes().map_err(Failure::usage)?;
    let listen = cfg.listen_addr().map_err(Failure::usage)?;
    let node = build_node(&spec, &cfg.node).map_err(Failure::usage)?;
    let role = node.role();
    let listener = TcpListener::bind(listen).with_context(|| format!("binding {listen}")).map_err(Failure::internal)?;
    let transport = TcpTransport::new(routes, None);
    let handle = NodeHandle::spawn(node, listener, transport).map_err(Failure::internal)?;
    tracing::info!(node = %cfg.node, %role, %listen, "serving");
    let node = handle.wait();
    tracing::info!(node = %cfg.node, records = node.store().len(), "stopped");
    Ok(())
}

fn main() -> ExitCode {
    tracing_subscriber::fmt()
        .with_env_filter(EnvFilter::try_from_default_env().unwrap_or_else(|_| EnvFilter::new("info")))
        .with_writer(std::io::stderr)
        .init();
    let args = match Args::try_parse() {
        Ok(a) => a,
        Err(e) => {
            let _ = e.print();
            return ExitCode::from(if e.use_stderr() { exit::USAGE as u8 } else { exit::OK as u8 });
        }
    };
    match serve(&args) {
        Ok(()) => ExitCode::SUCCESS,
        Err(f) => {
            eprintln!("pds-node: {:#}", f.error);
            ExitCode::from(f.code as u8)
        }
    }
}
