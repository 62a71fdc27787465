//! Append-only key-value store with tombstones.
//!
//! Every mutation is appended to a newline-delimited JSON log before it is
//! applied. Records are never physically removed; invalidation adds a log
//! entry and flips the record status. Replaying the log reproduces the map.

use std::collections::BTreeMap;
use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, Seek, SeekFrom, Write};
use std::path::{Path, PathBuf};

use base64::engine::general_purpose::STANDARD as B64;
use base64::Engine;
use serde::{Deserialize, Serialize};
use thiserror::Error;

#[derive(Debug, Error)]
pub enum StoreError {
    #[error("key not found: {0}")]
    NotFound(String),
    #[error("store I/O failure: {0}")]
    Io(#[from] std::io::Error),
    #[error("corrupt log entry at line {line}: {reason}")]
    Corrupt { line: usize, reason: String },
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Status {
    Active,
    Invalidated,
}

#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct Record {
    pub key: String,
    #[serde(with = "value_b64")]
    pub value: Vec<u8>,
    pub status: Status,
    pub version: u64,
}

mod value_b64 {
    use super::B64;
    use base64::Engine;
    use serde::{Deserialize, Deserializer, Serializer};

    pub fn serialize<S: Serializer>(v: &[u8], s: S) -> Result<S::Ok, S::Error> {
        s.serialize_str(&B64.encode(v))
    }

    pub fn deserialize<'de, D: Deserializer<'de>>(d: D) -> Result<Vec<u8>, D::Error> {
        B64.decode(String::deserialize(d)?).map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, PartialEq, Eq)]
pub enum Lookup<'a> {
    Active(&'a [u8]),
    Invalidated(&'a [u8]),
    NotFound,
}

impl Lookup<'_> {
    pub fn is_active(&self) -> bool {
        matches!(self, Lookup::Active(_))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogOp {
    Put,
    Invalidate,
}

/// One line of the log. Field order is the wire order.
#[derive(Clone, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogEntry {
    pub seq: u64,
    pub op: LogOp,
    pub key: String,
    pub value: Option<String>,
    pub ts: String,
}

enum Sink {
    Memory,
    File { file: File, path: PathBuf },
}

pub struct KvStore {
    map: BTreeMap<String, Record>,
    lines: Vec<String>,
    sink: Sink,
    next_seq: u64,
}

impl std::fmt::Debug for KvStore {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("KvStore")
            .field("records", &self.map.len())
            .field("log_entries", &self.lines.len())
            .finish()
    }
}

impl KvStore {
    pub fn in_memory() -> Self {
        Self { map: BTreeMap::new(), lines: Vec::new(), sink: Sink::Memory, next_seq: 1 }
    }

    /// Rebuilds an in-memory store from previously written log lines.
    /// A malformed line ends the replay: only the prefix before it is kept.
    pub fn from_lines<I, S>(lines: I) -> Self
    where
        I: IntoIterator<Item = S>,
        S: AsRef<str>,
    {
        let mut store = Self::in_memory();
        for line in lines {
            if store.replay_line(line.as_ref()).is_err() {
                break;
            }
        }
        store
    }

    /// Opens (or creates) a file-backed store and replays its log. A torn
    /// tail left by a crash is truncated away.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, StoreError> {
        let path = path.as_ref().to_path_buf();
        if let Some(parent) = path.parent() {
            std::fs::create_dir_all(parent)?;
        }
        let mut file = OpenOptions::new().read(true).append(true).create(true).open(&path)?;
        let mut store = Self::in_memory();
        let mut valid_len = 0u64;
        {
            let mut reader = BufReader::new(&mut file);
            let mut buf = String::new();
            loop {
                buf.clear();
                let n = reader.read_line(&mut buf)?;
                if n == 0 || !buf.ends_with('\n') {
                    break;
                }
                if store.replay_line(buf.trim_end_matches('\n')).is_err() {
                    tracing::warn!(path = %path.display(), line = store.lines.len() + 1, "discarding corrupt log tail");
                    break;
                }
                valid_len += n as u64;
            }
        }
        if file.metadata()?.len() != valid_len {
            file.set_len(valid_len)?;
        }
        file.seek(SeekFrom::End(0))?;
        store.sink = Sink::File { file, path };
        Ok(store)
    }

    pub fn path(&self) -> Option<&Path> {
        match &self.sink {
            Sink::File { path, .. } => Some(path),
            Sink::Memory => None,
        }
    }

    fn replay_line(&mut self, line: &str) -> Result<(), StoreError> {
        let lineno = self.lines.len() + 1;
        let corrupt = |reason: String| StoreError::Corrupt { line: lineno, reason };
        let entry: LogEntry = serde_json::from_str(line).map_err(|e| corrupt(e.to_string()))?;
        if entry.seq != self.next_seq {
            return Err(corrupt(format!("expected seq {}, got {}", self.next_seq, entry.seq)));
        }
        match entry.op {
            LogOp::Put => {
                let encoded = entry.value.as_deref().ok_or_else(|| corrupt("put without value".into()))?;
                let value = B64.decode(encoded).map_err(|e| corrupt(e.to_string()))?;
                self.apply_put(&entry.key, value);
            }
            LogOp::Invalidate => {
                let rec = self.map.get_mut(&entry.key).ok_or_else(|| corrupt("invalidate of absent key".into()))?;
                rec.status = Status::Invalidated;
                rec.version += 1;
            }
        }
        self.lines.push(line.to_string());
        self.next_seq += 1;
        Ok(())
    }

    fn append(&mut self, op: LogOp, key: &str, value: Option<&[u8]>) -> Result<(), StoreError> {
        let entry = LogEntry {
            seq: self.next_seq,
            op,
            key: key.to_string(),
            value: value.map(|v| B64.encode(v)),
            ts: chrono::Utc::now().to_rfc3339_opts(chrono::SecondsFormat::Millis, true),
        };
        let line = serde_json::to_string(&entry).expect("log entry serializes");
        if let Sink::File { file, .. } = &mut self.sink {
            file.write_all(line.as_bytes())?;
            file.write_all(b"\n")?;
            file.flush()?;
        }
        self.lines.push(line);
        self.next_seq += 1;
        Ok(())
    }

    fn apply_put(&mut self, key: &str, value: Vec<u8>) -> u64 {
        let rec = self.map.entry(key.to_string()).or_insert_with(|| Record {
            key: key.to_string(),
            value: Vec::new(),
            status: Status::Active,
            version: 0,
        });
        rec.value = value;
        rec.status = Status::Active;
        rec.version += 1;
        rec.version
    }

    pub fn put(&mut self, key: &str, value: Vec<u8>) -> Result<u64, StoreError> {
        self.append(LogOp::Put, key, Some(&value))?;
        Ok(self.apply_put(key, value))
    }

    pub fn get(&self, key: &str) -> Lookup<'_> {
        match self.map.get(key) {
            None => Lookup::NotFound,
            Some(r) if r.status == Status::Active => Lookup::Active(&r.value),
            Some(r) => Lookup::Invalidated(&r.value),
        }
    }

    pub fn record(&self, key: &str) -> Option<&Record> {
        self.map.get(key)
    }

    pub fn contains(&self, key: &str) -> bool {
        self.map.contains_key(key)
    }

    /// Tombstones `key`. Invalidating an already invalidated key succeeds
    /// without writing anything.
    pub fn invalidate(&mut self, key: &str) -> Result<u64, StoreError> {
        let rec = self.map.get(key).ok_or_else(|| StoreError::NotFound(key.to_string()))?;
        if rec.status == Status::Invalidated {
            return Ok(rec.version);
        }
        self.append(LogOp::Invalidate, key, None)?;
        let rec = self.map.get_mut(key).expect("checked above");
        rec.status = Status::Invalidated;
        rec.version += 1;
        Ok(rec.version)
    }

    /// Active records whose value satisfies `pred`, in ascending key order.
    pub fn scan<F>(&self, mut pred: F) -> Vec<(String, Vec<u8>)>
    where
        F: FnMut(&str, &[u8]) -> bool,
    {
        self.map
            .values()
            .filter(|r| r.status == Status::Active && pred(&r.key, &r.value))
            .map(|r| (r.key.clone(), r.value.clone()))
            .collect()
    }

    /// All records, active and invalidated, in key order.
    pub fn records(&self) -> impl Iterator<Item = &Record> {
        self.map.values()
    }

    pub fn len(&self) -> usize {
        self.map.len()
    }

    pub fn is_empty(&self) -> bool {
        self.map.is_empty()
    }

    /// Raw log lines written or replayed so far.
    pub fn log_lines(&self) -> &[String] {
        &self.lines
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn active(v: &[u8]) -> Lookup<'_> {
        Lookup::Active(v)
    }

    #[test]
    fn read_your_write_and_last_write_wins() {
        let mut kv = KvStore::in_memory();
        assert_eq!(kv.put("k", b"v1".to_vec()).unwrap(), 1);
        assert_eq!(kv.get("k"), active(b"v1"));
        assert_eq!(kv.put("k", b"v2".to_vec()).unwrap(), 2);
        assert_eq!(kv.get("k"), active(b"v2"));
        assert_eq!(kv.record("k").unwrap().version, 2);
    }

    #[test]
    fn get_distinguishes_absent_and_invalidated() {
        let mut kv = KvStore::in_memory();
        assert_eq!(kv.get("nope"), Lookup::NotFound);
        kv.put("k", b"v".to_vec()).unwrap();
        kv.invalidate("k").unwrap();
        assert_eq!(kv.get("k"), Lookup::Invalidated(b"v"));
    }

    #[test]
    fn invalidate_is_idempotent_and_requires_presence() {
        let mut kv = KvStore::in_memory();
        kv.put("k", b"v".to_vec()).unwrap();
        let v1 = kv.invalidate("k").unwrap();
        let entries = kv.log_lines().len();
        let v2 = kv.invalidate("k").unwrap();
        assert_eq!(v1, v2);
        assert_eq!(kv.log_lines().len(), entries);
        assert!(matches!(kv.invalidate("absent"), Err(StoreError::NotFound(_))));
    }

    #[test]
    fn scan_filters_active_in_key_order() {
        let mut kv = KvStore::in_memory();
        assert!(kv.scan(|_, _| true).is_empty());
        kv.put("c", b"x".to_vec()).unwrap();
        kv.put("a", b"y".to_vec()).unwrap();
        kv.put("b", b"x".to_vec()).unwrap();
        assert_eq!(kv.scan(|_, v| v == b"y"), vec![("a".to_string(), b"y".to_vec())]);
        kv.invalidate("b").unwrap();
        let keys: Vec<_> = kv.scan(|_, _| true).into_iter().map(|(k, _)| k).collect();
        assert_eq!(keys, ["a", "c"]);
    }

    #[test]
    fn log_line_format() {
        let mut kv = KvStore::in_memory();
        kv.put("00ff", b"hi".to_vec()).unwrap();
        kv.invalidate("00ff").unwrap();
        let first: serde_json::Value = serde_json::from_str(&kv.log_lines()[0]).unwrap();
        assert_eq!(first["seq"], 1);
        assert_eq!(first["op"], "put");
        assert_eq!(first["key"], "00ff");
        assert_eq!(first["value"], "aGk=");
        assert!(chrono::DateTime::parse_from_rfc3339(first["ts"].as_str().unwrap()).is_ok());
        let second: serde_json::Value = serde_json::from_str(&kv.log_lines()[1]).unwrap();
        assert_eq!(second["op"], "invalidate");
        assert!(second["value"].is_null());
    }

    #[test]
    fn reopen_after_drop_recovers_state() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("storage-sn1.log");
        {
            let mut kv = KvStore::open(&path).unwrap();
            kv.put("k", b"v".to_vec()).unwrap();
            kv.put("j", b"w".to_vec()).unwrap();
            kv.invalidate("j").unwrap();
            // dropped without any shutdown step
        }
        let mut kv = KvStore::open(&path).unwrap();
        assert_eq!(kv.get("k"), active(b"v"));
        assert_eq!(kv.get("j"), Lookup::Invalidated(b"w"));
        kv.put("k", b"v2".to_vec()).unwrap();
        let kv = KvStore::open(&path).unwrap();
        assert_eq!(kv.get("k"), active(b"v2"));
        assert_eq!(kv.log_lines().len(), 4);
    }

    #[test]
    fn torn_tail_is_discarded() {
        let dir = tempfile::tempdir().unwrap();
        let path = dir.path().join("audit-an.log");
        {
            let mut kv = KvStore::open(&path).unwrap();
            kv.put("a", b"1".to_vec()).unwrap();
            kv.put("b", b"2".to_vec()).unwrap();
        }
        let full = std::fs::read(&path).unwrap();
        std::fs::write(&path, &full[..full.len() - 7]).unwrap();
        let mut kv = KvStore::open(&path).unwrap();
        assert_eq!(kv.get("a"), active(b"1"));
        assert_eq!(kv.get("b"), Lookup::NotFound);
        kv.put("c", b"3".to_vec()).unwrap();
        let kv = KvStore::open(&path).unwrap();
        assert_eq!(kv.log_lines().len(), 2);
        assert_eq!(kv.get("c"), active(b"3"));
    }

    #[derive(Debug, Clone)]
    enum Mutation {
        Put(u8, Vec<u8>),
        Invalidate(u8),
    }

    fn mutation() -> impl Strategy<Value = Mutation> {
        prop_oneof![
            (0u8..6, prop::collection::vec(any::<u8>(), 0..8)).prop_map(|(k, v)| Mutation::Put(k, v)),
            (0u8..6).prop_map(Mutation::Invalidate),
        ]
    }

    fn apply(kv: &mut KvStore, muts: &[Mutation]) {
        for m in muts {
            match m {
                Mutation::Put(k, v) => {
                    kv.put(&format!("{k:02x}"), v.clone()).unwrap();
                }
                Mutation::Invalidate(k) => {
                    let _ = kv.invalidate(&format!("{k:02x}"));
                }
            }
        }
    }

    fn snapshot(kv: &KvStore) -> Vec<Record> {
        kv.records().cloned().collect()
    }

    proptest! {
        // Truncating at any entry boundary replays to the state reached after
        // exactly that many logged mutations.
        #[test]
        fn prefix_replay_is_consistent(muts in prop::collection::vec(mutation(), 0..40), cut in any::<prop::sample::Index>()) {
            let mut kv = KvStore::in_memory();
            let mut states = vec![snapshot(&kv)];
            let mut counts = vec![0usize];
            for m in &muts {
                apply(&mut kv, std::slice::from_ref(m));
                if kv.log_lines().len() != *counts.last().unwrap() {
                    counts.push(kv.log_lines().len());
                    states.push(snapshot(&kv));
                }
            }
            let i = cut.index(counts.len());
            let replayed = KvStore::from_lines(&kv.log_lines()[..counts[i]]);
            prop_assert_eq!(snapshot(&replayed), states[i].clone());
        }

        #[test]
        fn log_never_shrinks_and_scan_matches_dump(muts in prop::collection::vec(mutation(), 0..40)) {
            let mut kv = KvStore::in_memory();
            let mut last = 0;
            for m in &muts {
                apply(&mut kv, std::slice::from_ref(m));
                prop_assert!(kv.log_lines().len() >= last);
                last = kv.log_lines().len();
            }
            let oracle: Vec<_> = snapshot(&kv)
                .into_iter()
                .filter(|r| r.status == Status::Active && r.value.len() % 2 == 0)
                .map(|r| (r.key, r.value))
                .collect();
            prop_assert_eq!(kv.scan(|_, v| v.len() % 2 == 0), oracle);
        }
    }
}
