#![allow(dead_code)]

use std::net::{SocketAddr, TcpListener};
use std::path::{Path, PathBuf};
use std::process::{Child, Command, Output, Stdio};
use std::time::{Duration, Instant};

use serde_json::{json, Value};

use pds_core::nodes::NodeDump;
use pds_core::transport::tcp::{ControlClient, ControlReply, ControlRequest};

pub const SEED: u64 = 21;

/// (id, role, identity)
pub const ROSTER: [(&str, &str, Option<&str>); 7] = [
    ("an", "audit", None),
    ("in", "index", None),
    ("sn1", "storage", None),
    ("sn2", "storage", None),
    ("sn3", "storage", None),
    ("pn-alice", "processing", Some("Alice")),
    ("pn-bob", "processing", Some("Bob")),
];

fn free_port() -> u16 {
    TcpListener::bind("127.0.0.1:0").unwrap().local_addr().unwrap().port()
}

/// Seven `pds-node` processes, one config file each.
pub struct LocalCluster {
    pub dir: tempfile::TempDir,
    pub ports: Vec<u16>,
    children: Vec<Option<Child>>,
}

impl LocalCluster {
    pub fn start() -> Self {
        let dir = tempfile::tempdir().unwrap();
        let ports: Vec<u16> = ROSTER.iter().map(|_| free_port()).collect();
        let nodes: Vec<Value> = ROSTER
            .iter()
            .zip(&ports)
            .map(|((id, role, identity), port)| {
                let mut n = json!({"id": id, "role": role, "addr": format!("127.0.0.1:{port}")});
                if let Some(name) = identity {
                    n["identity"] = json!(name);
                }
                n
            })
            .collect();
        for (id, _, _) in ROSTER {
            let cfg = json!({"node": id, "seed": SEED, "timeout_ms": 5000, "data_dir": "data", "nodes": nodes});
            std::fs::write(dir.path().join(format!("{id}.json")), serde_json::to_vec_pretty(&cfg).unwrap()).unwrap();
        }
        let mut c = Self { dir, ports, children: Vec::new() };
        let children = (0..ROSTER.len()).map(|i| Some(c.spawn(i))).collect();
        c.children = children;
        for i in 0..ROSTER.len() {
            c.wait_ready(i);
        }
        c
    }

    fn spawn(&self, i: usize) -> Child {
        Command::new(env!("CARGO_BIN_EXE_pds-node"))
            .arg("--config")
            .arg(self.config(ROSTER[i].0))
            .env("RUST_LOG", "error")
            .stdout(Stdio::null())
            .stderr(Stdio::null())
            .spawn()
            .unwrap()
    }

    fn wait_ready(&self, i: usize) {
        let deadline = Instant::now() + Duration::from_secs(10);
        while Instant::now() < deadline {
            if std::net::TcpStream::connect(self.sock(ROSTER[i].0)).is_ok() {
                return;
            }
            std::thread::sleep(Duration::from_millis(20));
        }
        panic!("{} never came up", ROSTER[i].0);
    }

    fn index(id: &str) -> usize {
        ROSTER.iter().position(|(n, _, _)| *n == id).unwrap()
    }

    pub fn config(&self, id: &str) -> PathBuf {
        self.dir.path().join(format!("{id}.json"))
    }

    pub fn sock(&self, id: &str) -> SocketAddr {
        SocketAddr::from(([127, 0, 0, 1], self.ports[Self::index(id)]))
    }

    pub fn addr(&self, id: &str) -> String {
        self.sock(id).to_string()
    }

    /// SIGKILL, no shutdown handshake; then start again from the same logs.
    pub fn kill_and_restart(&mut self, id: &str) {
        let i = Self::index(id);
        let mut child = self.children[i].take().unwrap();
        child.kill().unwrap();
        child.wait().unwrap();
        // The port may linger briefly after the kill.
        let deadline = Instant::now() + Duration::from_secs(10);
        loop {
            let mut child = self.spawn(i);
            std::thread::sleep(Duration::from_millis(100));
            match child.try_wait().unwrap() {
                None => {
                    self.children[i] = Some(child);
                    break;
                }
                Some(_) if Instant::now() < deadline => continue,
                Some(status) => panic!("{id} failed to restart: {status}"),
            }
        }
        self.wait_ready(i);
    }

    pub fn dump(&self, id: &str) -> NodeDump {
        let mut c = ControlClient::connect(self.sock(id), Duration::from_secs(10)).unwrap();
        match c.request(&ControlRequest::Dump).unwrap() {
            ControlReply::Dump { dump } => dump,
            other => panic!("{other:?}"),
        }
    }

    /// `pdsctl` acting as `identity` through the processing node `pn`.
    pub fn ctl(&self, pn: &str, identity: &str, args: &[&str]) -> Output {
        self.ctl_stdin(pn, identity, args, None)
    }

    pub fn ctl_stdin(&self, pn: &str, identity: &str, args: &[&str], stdin: Option<&[u8]>) -> Output {
        let mut cmd = Command::new(env!("CARGO_BIN_EXE_pdsctl"));
        cmd.args(["--pn", &self.addr(pn), "--identity", identity]).args(args).env_remove("PDS_CONFIG");
        run_with_stdin(cmd, stdin)
    }
}

impl Drop for LocalCluster {
    fn drop(&mut self) {
        let socks: Vec<SocketAddr> = ROSTER.iter().map(|(id, _, _)| self.sock(id)).collect();
        for (child, sock) in self.children.iter_mut().zip(socks) {
            let Some(mut child) = child.take() else { continue };
            if let Ok(mut c) = ControlClient::connect(sock, Duration::from_secs(2)) {
                let _ = c.request(&ControlRequest::Shutdown);
            }
            let deadline = Instant::now() + Duration::from_secs(5);
            while Instant::now() < deadline && matches!(child.try_wait(), Ok(None)) {
                std::thread::sleep(Duration::from_millis(20));
            }
            let _ = child.kill();
            let _ = child.wait();
        }
    }
}

pub fn run_with_stdin(mut cmd: Command, stdin: Option<&[u8]>) -> Output {
    use std::io::Write;
    cmd.stdin(if stdin.is_some() { Stdio::piped() } else { Stdio::null() }).stdout(Stdio::piped()).stderr(Stdio::piped());
    let mut child = cmd.spawn().unwrap();
    if let Some(bytes) = stdin {
        child.stdin.take().unwrap().write_all(bytes).unwrap();
    }
    child.wait_with_output().unwrap()
}

pub fn code(o: &Output) -> i32 {
    o.status.code().expect("exited normally")
}

pub fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

pub fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

pub fn write(dir: &Path, name: &str, bytes: &[u8]) -> String {
    let p = dir.join(name);
    std::fs::write(&p, bytes).unwrap();
    p.to_string_lossy().into_owned()
}
