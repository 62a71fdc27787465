//! Seeded, single-threaded, virtual-time network.

use std::cmp::Reverse;
use std::collections::{BTreeSet, BinaryHeap, HashMap};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use serde::{Deserialize, Serialize};

use super::{EventKind, Transcript, TransportError};
use crate::keyspace::Address;
use crate::nodes::Millis;
use crate::protocol::{decode, encode, Envelope};

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct SimNetConfig {
    pub seed: u64,
    pub latency_min_ms: Millis,
    pub latency_max_ms: Millis,
    pub drop_prob: f64,
    /// Extra uniform delay in `0..=reorder_window_ms` per message, letting
    /// later sends overtake earlier ones.
    pub reorder_window_ms: Millis,
}

impl Default for SimNetConfig {
    fn default() -> Self {
        Self { seed: 0, latency_min_ms: 1, latency_max_ms: 5, drop_prob: 0.0, reorder_window_ms: 0 }
    }
}

#[derive(Debug)]
pub struct SimNet {
    config: SimNetConfig,
    rng: ChaCha20Rng,
    now: Millis,
    seq: u64,
    queue: BinaryHeap<Reverse<(Millis, u64)>>,
    in_flight: HashMap<u64, Vec<u8>>,
    registered: BTreeSet<Address>,
    down: BTreeSet<Address>,
    transcript: Transcript,
}

impl SimNet {
    pub fn new(config: SimNetConfig) -> Self {
        let rng = ChaCha20Rng::seed_from_u64(config.seed);
        Self {
            config,
            rng,
            now: 0,
            seq: 0,
            queue: BinaryHeap::new(),
            in_flight: HashMap::new(),
            registered: BTreeSet::new(),
            down: BTreeSet::new(),
            transcript: Transcript::full(),
        }
    }

    pub fn config(&self) -> &SimNetConfig {
        &self.config
    }

    /// Changes latency, loss, and reordering from now on; the rng stream is kept.
    pub fn reconfigure(&mut self, mut config: SimNetConfig) {
        config.seed = self.config.seed;
        self.config = config;
    }

    pub fn register(&mut self, addr: Address) {
        self.registered.insert(addr);
    }

    pub fn set_down(&mut self, addr: &Address, down: bool) {
        if down {
            self.down.insert(addr.clone());
        } else {
            self.down.remove(addr);
        }
    }

    pub fn is_down(&self, addr: &Address) -> bool {
        self.down.contains(addr)
    }

    pub fn now(&self) -> Millis {
        self.now
    }

    /// Moves the clock forward; never backward.
    pub fn advance_to(&mut self, t: Millis) {
        self.now = self.now.max(t);
    }

    pub fn transcript(&self) -> &Transcript {
        &self.transcript
    }

    pub fn take_transcript(&mut self) -> Transcript {
        std::mem::replace(&mut self.transcript, Transcript::full())
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn next_delivery_time(&self) -> Option<Millis> {
        self.queue.peek().map(|Reverse((t, _))| *t)
    }

    pub fn send(&mut self, env: &Envelope) -> Result<(), TransportError> {
        if !self.registered.contains(&env.to) {
            return Err(TransportError::UnknownDestination(env.to.clone()));
        }
        let frame = encode(env)?;
        self.transcript.record(self.now, EventKind::Send, env);
        // Draw every random value even when unused so the schedule depends
        // only on the seed and the send sequence.
        let lost = self.rng.gen_bool(self.config.drop_prob.clamp(0.0, 1.0));
        let (lo, hi) = (self.config.latency_min_ms, self.config.latency_max_ms.max(self.config.latency_min_ms));
        let latency = self.rng.gen_range(lo..=hi);
        let jitter = self.rng.gen_range(0..=self.config.reorder_window_ms);
        if lost {
            self.transcript.record(self.now, EventKind::Drop, env);
            return Ok(());
        }
        self.seq += 1;
        self.queue.push(Reverse((self.now + latency + jitter, self.seq)));
        self.in_flight.insert(self.seq, frame);
        Ok(())
    }

    /// Pops the earliest scheduled message, advancing the clock to its
    /// delivery time. Messages to down nodes are dropped here.
    pub fn next_delivery(&mut self) -> Option<Envelope> {
        loop {
            let Reverse((t, seq)) = self.queue.pop()?;
            self.now = self.now.max(t);
            let frame = self.in_flight.remove(&seq).expect("scheduled frame");
            let env = match decode(&frame) {
                Ok(env) => env,
                Err(e) => {
                    tracing::error!(error = %e, "undecodable frame in flight");
                    continue;
                }
            };
            if self.down.contains(&env.to) {
                self.transcript.record(self.now, EventKind::Drop, &env);
                continue;
            }
            self.transcript.record(self.now, EventKind::Deliver, &env);
            return Some(env);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::keyspace::ChoreographyId;
    use crate::protocol::{Message, Op, Role};

    fn env(i: u32, to: &str) -> Envelope {
        Envelope {
            choreography_id: ChoreographyId::from([i as u8; 16]),
            op: Op::Store,
            from: Address::new("pn").unwrap(),
            from_role: Role::Processing,
            to: Address::new(to).unwrap(),
            message: Message::ChunkPutNack { index: i, reason: crate::protocol::DenialReason::EmptyChunk },
        }
    }

    fn run(config: SimNetConfig, n: u32) -> (Vec<Envelope>, Transcript) {
        let mut net = SimNet::new(config);
        net.register(Address::new("sn").unwrap());
        for i in 0..n {
            net.send(&env(i, "sn")).unwrap();
        }
        let mut got = Vec::new();
        while let Some(e) = net.next_delivery() {
            got.push(e);
        }
        (got, net.take_transcript())
    }

    #[test]
    fn lossless_delivers_everything() {
        let (got, t) = run(SimNetConfig::default(), 50);
        assert_eq!(got.len(), 50);
        assert_eq!(t.count(EventKind::Send), 50);
        assert_eq!(t.count(EventKind::Deliver), 50);
        assert_eq!(t.len(), t.count(EventKind::Send) + t.count(EventKind::Deliver) + t.count(EventKind::Drop));
    }

    #[test]
    fn total_loss_delivers_nothing() {
        let (got, t) = run(SimNetConfig { drop_prob: 1.0, ..Default::default() }, 20);
        assert!(got.is_empty());
        assert_eq!(t.count(EventKind::Drop), 20);
    }

    #[test]
    fn same_seed_same_transcript() {
        let cfg = SimNetConfig { seed: 9, drop_prob: 0.3, reorder_window_ms: 10, ..Default::default() };
        assert_eq!(run(cfg.clone(), 40).1.to_jsonl(), run(cfg, 40).1.to_jsonl());
    }

    #[test]
    fn reorder_window_reorders() {
        let cfg = SimNetConfig { seed: 3, latency_min_ms: 1, latency_max_ms: 1, reorder_window_ms: 10, ..Default::default() };
        let (got, _) = run(cfg, 30);
        let order: Vec<u32> = got.iter().map(|e| match e.message { Message::ChunkPutNack { index, .. } => index, _ => 0 }).collect();
        assert!(order.windows(2).any(|w| w[0] > w[1]));
    }

    #[test]
    fn unknown_destination_is_an_error() {
        let mut net = SimNet::new(SimNetConfig::default());
        assert!(matches!(net.send(&env(1, "nowhere")), Err(TransportError::UnknownDestination(_))));
        assert!(net.transcript().is_empty());
    }

    #[test]
    fn down_nodes_drop_on_delivery() {
        let mut net = SimNet::new(SimNetConfig::default());
        let sn = Address::new("sn").unwrap();
        net.register(sn.clone());
        net.set_down(&sn, true);
        net.send(&env(1, "sn")).unwrap();
        assert!(net.next_delivery().is_none());
        assert_eq!(net.transcript().count(EventKind::Drop), 1);
    }
}
