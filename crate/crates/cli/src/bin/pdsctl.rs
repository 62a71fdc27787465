//! Drives the six data operations through a processing node.
//!
//! Results go to standard output; denials, timeouts, and errors go to
//! standard error. `read --out -` writes the data to standard output and
//! nowhere else.

use std::io::{Read, Write};
use std::path::PathBuf;
use std::process::ExitCode;
use std::time::Duration;

use anyhow::{anyhow, Context};
use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use clap::{Parser, Subcommand};
use tracing_subscriber::EnvFilter;

use pds_cli::{exit, parse_identity, parse_meta, resolve, CliConfig, Failure, Format, Response};
use pds_core::nodes::{OpOutcome, PnCommand};
use pds_core::protocol::{Metadata, Role};
use pds_core::transport::tcp::{ControlClient, ControlReply, ControlRequest};

#[derive(Parser, Debug)]
#[command(name = "pdsctl", about = "Store, read, and share private data through a processing node")]
struct Args {
    /// Client config (JSON) with identity, processing node, and output format.
    #[arg(long, env = "PDS_CONFIG", global = true)]
    config: Option<PathBuf>,
    /// Identity to act as; must be the processing node's identity.
    #[arg(long, global = true)]
    identity: Option<String>,
    /// Processing node control address, host:port.
    #[arg(long, global = true)]
    pn: Option<String>,
    #[arg(long, value_enum, global = true)]
    output: Option<Format>,
    /// Print the key reference of a fresh store (debugging only).
    #[arg(long, global = true)]
    show_kr: bool,
    /// Seconds to wait for the node's reply.
    #[arg(long, default_value_t = 120, global = true)]
    timeout: u64,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand, Debug)]
enum Command {
    /// Split and store data under a new alias.
    Store {
        #[arg(long)]
        alias: String,
        /// File to read, or - for standard input.
        #[arg(long)]
        data: String,
        /// Metadata entries, key=value.
        #[arg(long, num_args = 1.., value_parser = parse_meta_arg)]
        meta: Vec<(String, String)>,
        #[arg(long)]
        chunks: Option<usize>,
    },
    /// Retrieve and recombine the data behind an alias.
    Read {
        #[arg(long)]
        alias: String,
        /// File to write, or - for standard output.
        #[arg(long, default_value = "-")]
        out: String,
    },
    /// Replace the data behind an alias in place.
    Update {
        #[arg(long)]
        alias: String,
        #[arg(long)]
        data: String,
    },
    /// Delete the data behind an alias (owner only).
    Delete {
        #[arg(long)]
        alias: String,
    },
    /// Grant another processor access, as name@address.
    Share {
        #[arg(long)]
        alias: String,
        #[arg(long)]
        to: String,
    },
    /// Withdraw every grant held by the named processor.
    Revoke {
        #[arg(long)]
        alias: String,
        #[arg(long)]
        from: String,
    },
    /// Ask a node to stop.
    Shutdown {
        /// Node control address; defaults to the processing node.
        #[arg(long)]
        addr: Option<String>,
    },
}

fn parse_meta_arg(s: &str) -> Result<(String, String), String> {
    parse_meta(s).map_err(|e| e.to_string())
}

impl Command {
    fn name(&self) -> &'static str {
        match self {
            Command::Store { .. } => "store",
            Command::Read { .. } => "read",
            Command::Update { .. } => "update",
            Command::Delete { .. } => "delete",
            Command::Share { .. } => "share",
            Command::Revoke { .. } => "revoke",
            Command::Shutdown { .. } => "shutdown",
        }
    }
}

struct Settings {
    identity: Option<String>,
    pn: Option<String>,
    format: Format,
    timeout: Duration,
}

fn settings(args: &Args) -> Result<Settings, Failure> {
    let file = match &args.config {
        Some(p) => CliConfig::load(p).map_err(Failure::usage)?,
        None => CliConfig::default(),
    };
    Ok(Settings {
        identity: args.identity.clone().or(file.identity),
        pn: args.pn.clone().or(file.processing),
        format: args.output.or(file.output).unwrap_or_default(),
        timeout: Duration::from_secs(args.timeout),
    })
}

fn read_input(src: &str) -> Result<Vec<u8>, Failure> {
    let mut buf = Vec::new();
    if src == "-" {
        std::io::stdin().read_to_end(&mut buf).context("reading standard input").map_err(Failure::usage)?;
    } else {
        buf = std::fs::read(src).with_context(|| format!("reading {src}")).map_err(Failure::usage)?;
    }
    Ok(buf)
}

fn connect(addr: &str, timeout: Duration) -> Result<ControlClient, Failure> {
    let sock = resolve(addr).map_err(Failure::usage)?;
    ControlClient::connect(sock, timeout).with_context(|| format!("connecting to {addr}")).map_err(Failure::internal)
}

fn request(client: &mut ControlClient, req: &ControlRequest) -> Result<ControlReply, Failure> {
    match client.request(req).map_err(Failure::internal)? {
        ControlReply::Error { message } => Err(Failure::internal(anyhow!(message))),
        reply => Ok(reply),
    }
}

fn run(args: &Args, s: &Settings) -> Result<(Response, Option<Vec<u8>>), Failure> {
    let op = args.command.name();
    if let Command::Shutdown { addr } = &args.command {
        let addr = addr.clone().or(s.pn.clone()).ok_or_else(|| Failure::usage(anyhow!("no node address; pass --addr or --pn")))?;
        request(&mut connect(&addr, s.timeout)?, &ControlRequest::Shutdown)?;
        return Ok((Response { status: "ok".into(), op: op.into(), ..Default::default() }, None));
    }

    let identity = s.identity.clone().ok_or_else(|| Failure::usage(anyhow!("no identity; pass --identity or set it in the config")))?;
    let pn = s.pn.clone().ok_or_else(|| Failure::usage(anyhow!("no processing node; pass --pn or set it in the config")))?;
    let mut client = connect(&pn, s.timeout)?;
    match request(&mut client, &ControlRequest::Whoami)? {
        ControlReply::Whoami { role: Role::Processing, identity: Some(id), .. } if id.name == identity => {}
        ControlReply::Whoami { role: Role::Processing, identity: Some(id), .. } => {
            return Err(Failure::usage(anyhow!("{pn} acts for {:?}, not {identity:?}", id.name)));
        }
        ControlReply::Whoami { role, .. } => return Err(Failure::usage(anyhow!("{pn} is a {role} node, not a processing node"))),
        other => return Err(Failure::internal(anyhow!("unexpected reply {other:?}"))),
    }

    let (alias, cmd) = match &args.command {
        Command::Store { alias, data, meta, chunks } => {
            let md = Metadata(meta.iter().cloned().collect());
            (alias, PnCommand::Store { alias: alias.clone(), data: read_input(data)?, md, chunks: *chunks })
        }
        Command::Read { alias, .. } => (alias, PnCommand::Retrieve { alias: alias.clone() }),
        Command::Update { alias, data } => (alias, PnCommand::Update { alias: alias.clone(), data: read_input(data)? }),
        Command::Delete { alias } => (alias, PnCommand::Delete { alias: alias.clone() }),
        Command::Share { alias, to } => (alias, PnCommand::Share { alias: alias.clone(), to: parse_identity(to).map_err(Failure::usage)? }),
        Command::Revoke { alias, from } => (alias, PnCommand::Revoke { alias: alias.clone(), from: from.clone() }),
        Command::Shutdown { .. } => unreachable!("handled above"),
    };
    let bytes_in = match &cmd {
        PnCommand::Store { data, .. } | PnCommand::Update { data, .. } => Some(data.len()),
        _ => None,
    };
    let outcome = match request(&mut client, &ControlRequest::Submit { command: cmd })? {
        ControlReply::Outcome { outcome } => outcome,
        other => return Err(Failure::internal(anyhow!("unexpected reply {other:?}"))),
    };

    let mut resp = Response::from_outcome(op, alias, &outcome);
    resp.bytes = bytes_in;
    let mut stdout_data = None;
    match (outcome, &args.command) {
        (OpOutcome::Stored { kr, .. }, _) if args.show_kr => resp.kr = Some(kr.to_hex()),
        (OpOutcome::Retrieved { data }, Command::Read { out, .. }) => {
            resp.bytes = Some(data.len());
            if out == "-" {
                match s.format {
                    Format::Json => resp.data = Some(B64.encode(&data)),
                    Format::Text => stdout_data = Some(data),
                }
            } else {
                std::fs::write(out, &data).with_context(|| format!("writing {out}")).map_err(Failure::internal)?;
                resp.out = Some(out.clone());
            }
        }
        _ => {}
    }
    Ok((resp, stdout_data))
}

fn emit(resp: &Response, format: Format) {
    let line = match format {
        Format::Json => serde_json::to_string(resp).expect("responses serialize"),
        Format::Text => resp.to_text(),
    };
    if resp.exit == exit::OK {
        println!("{line}");
    } else {
        eprintln!("{line}");
    }
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
    let op = args.command.name();
    let (resp, data, format) = match settings(&args) {
        Ok(s) => match run(&args, &s) {
            Ok((resp, data)) => (resp, data, s.format),
            Err(f) => (Response::error(op, f.code, format!("{:#}", f.error)), None, s.format),
        },
        Err(f) => (Response::error(op, f.code, format!("{:#}", f.error)), None, args.output.unwrap_or_default()),
    };
    match data {
        // Data only; the status line would corrupt it.
        Some(bytes) => {
            let mut out = std::io::stdout().lock();
            if out.write_all(&bytes).and_then(|_| out.flush()).is_err() {
                return ExitCode::from(exit::INTERNAL as u8);
            }
        }
        None => emit(&resp, format),
    }
    ExitCode::from(resp.exit as u8)
}
