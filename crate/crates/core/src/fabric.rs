//! Deterministic discrete-event fabric.
//!
//! Time is an integer count of microseconds. Events fire in `(fire_at, seq)`
//! order where `seq` is handed out in scheduling order, so simultaneous
//! events resolve the same way on every run. Links are full-duplex and
//! store-and-forward: each direction serializes its transfers FIFO and is
//! held only for the serialization time.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;
use std::io::Write;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use thiserror::Error;

/// Size of the fixed frame header every message carries.
pub const HEADER_BYTES: u64 = 64;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum NodeId {
    Host(u32),
    Appliance(u32),
    MetadataCenter,
    Subsystem(u32),
    Switch,
}

impl NodeId {
    /// Compact numeric form used on the wire.
    pub fn code(self) -> u32 {
        match self {
            NodeId::Host(i) => (1 << 24) | i,
            NodeId::Appliance(i) => (2 << 24) | i,
            NodeId::MetadataCenter => 3 << 24,
            NodeId::Subsystem(i) => (4 << 24) | i,
            NodeId::Switch => 5 << 24,
        }
    }

    pub fn from_code(code: u32) -> Option<Self> {
        let idx = code & 0x00ff_ffff;
        match code >> 24 {
            1 => Some(NodeId::Host(idx)),
            2 => Some(NodeId::Appliance(idx)),
            3 if idx == 0 => Some(NodeId::MetadataCenter),
            4 => Some(NodeId::Subsystem(idx)),
            5 if idx == 0 => Some(NodeId::Switch),
            _ => None,
        }
    }
}

impl fmt::Display for NodeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NodeId::Host(i) => write!(f, "host{i}"),
            NodeId::Appliance(i) => write!(f, "app{i}"),
            NodeId::MetadataCenter => f.write_str("mdc"),
            NodeId::Subsystem(i) => write!(f, "sub{i}"),
            NodeId::Switch => f.write_str("switch"),
        }
    }
}

impl FromStr for NodeId {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let parse = |prefix: &str| -> Option<u32> { s.strip_prefix(prefix)?.parse().ok() };
        match s {
            "mdc" => Ok(NodeId::MetadataCenter),
            "switch" => Ok(NodeId::Switch),
            _ => parse("host")
                .map(NodeId::Host)
                .or_else(|| parse("app").map(NodeId::Appliance))
                .or_else(|| parse("sub").map(NodeId::Subsystem))
                .ok_or_else(|| format!("unknown node name {s:?}")),
        }
    }
}

impl Serialize for NodeId {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        s.collect_str(self)
    }
}

impl<'de> Deserialize<'de> for NodeId {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        let s = String::deserialize(d)?;
        s.parse().map_err(serde::de::Error::custom)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum FabricError {
    #[error("no route: link {link} does not connect {src} and {dst}")]
    NoRoute { link: String, src: NodeId, dst: NodeId },
    #[error("livelock guard tripped after {0} events")]
    LivelockGuard(u64),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkParams {
    pub latency_us: u64,
    pub bandwidth_bytes_per_s: u64,
}

impl Default for LinkParams {
    fn default() -> Self {
        Self {
            latency_us: 100,
            bandwidth_bytes_per_s: 100 * 1024 * 1024,
        }
    }
}

/// Per-direction counters of a link.
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
pub struct DirectionStats {
    pub bytes: u64,
    pub data_bytes: u64,
    pub messages: u64,
    pub busy_us: u64,
}

/// Full-duplex point-to-point link. Direction 0 carries `a -> b`.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct FabricLink {
    pub endpoint_a: NodeId,
    pub endpoint_b: NodeId,
    pub latency_us: u64,
    pub bandwidth_bytes_per_s: u64,
    busy_until: [u64; 2],
    stats: [DirectionStats; 2],
}

impl FabricLink {
    pub fn new(endpoint_a: NodeId, endpoint_b: NodeId, params: LinkParams) -> Self {
        assert!(params.bandwidth_bytes_per_s > 0, "link bandwidth must be positive");
        Self {
            endpoint_a,
            endpoint_b,
            latency_us: params.latency_us,
            bandwidth_bytes_per_s: params.bandwidth_bytes_per_s,
            busy_until: [0; 2],
            stats: [DirectionStats::default(); 2],
        }
    }

    /// Serialization time of `bytes`, rounded up to whole microseconds.
    pub fn serialization_us(&self, bytes: u64) -> u64 {
        (bytes as u128 * 1_000_000).div_ceil(self.bandwidth_bytes_per_s as u128) as u64
    }

    fn direction(&self, src: NodeId, dst: NodeId) -> Result<usize, FabricError> {
        if src == self.endpoint_a && dst == self.endpoint_b {
            Ok(0)
        } else if src == self.endpoint_b && dst == self.endpoint_a {
            Ok(1)
        } else {
            Err(FabricError::NoRoute {
                link: format!("{}<->{}", self.endpoint_a, self.endpoint_b),
                src,
                dst,
            })
        }
    }

    /// Queues a transfer and returns its delivery time at the far end.
    pub fn send(&mut self, src: NodeId, dst: NodeId, payload_bytes: u64, at: u64) -> Result<u64, FabricError> {
        self.send_classified(src, dst, payload_bytes, 0, at)
    }

    pub(crate) fn send_classified(
        &mut self,
        src: NodeId,
        dst: NodeId,
        payload_bytes: u64,
        data_bytes: u64,
        at: u64,
    ) -> Result<u64, FabricError> {
        let dir = self.direction(src, dst)?;
        let start = at.max(self.busy_until[dir]);
        let ser = self.serialization_us(payload_bytes);
        self.busy_until[dir] = start + ser;
        let s = &mut self.stats[dir];
        s.bytes += payload_bytes;
        s.data_bytes += data_bytes;
        s.messages += 1;
        s.busy_us += ser;
        Ok(start + ser + self.latency_us)
    }

    pub fn busy_until(&self, src: NodeId, dst: NodeId) -> Option<u64> {
        self.direction(src, dst).ok().map(|d| self.busy_until[d])
    }

    pub fn stats(&self) -> [DirectionStats; 2] {
        self.stats
    }

    /// Busiest direction's busy time over `elapsed_us`, clamped to 1.
    pub fn busy_fraction(&self, elapsed_us: u64) -> f64 {
        if elapsed_us == 0 {
            return 0.0;
        }
        let busy = self.stats[0].busy_us.max(self.stats[1].busy_us);
        (busy as f64 / elapsed_us as f64).min(1.0)
    }

    pub fn total_bytes(&self) -> u64 {
        self.stats[0].bytes + self.stats[1].bytes
    }
}

/// Star topology: every node hangs off the central switch with one link.
#[derive(Debug, Clone, Default)]
pub struct Fabric {
    links: BTreeMap<NodeId, FabricLink>,
}

impl Fabric {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn attach(&mut self, node: NodeId, params: LinkParams) {
        self.links.insert(node, FabricLink::new(node, NodeId::Switch, params));
    }

    pub fn link(&self, node: NodeId) -> Option<&FabricLink> {
        self.links.get(&node)
    }

    pub fn links(&self) -> impl Iterator<Item = (&NodeId, &FabricLink)> {
        self.links.iter()
    }

    /// Sends over the link between `node` and the switch, in either direction.
    pub(crate) fn hop(&mut self, node: NodeId, to_switch: bool, bytes: u64, data_bytes: u64, at: u64) -> Result<u64, FabricError> {
        let link = self.links.get_mut(&node).ok_or(FabricError::NoRoute {
            link: format!("{node}<->switch"),
            src: node,
            dst: NodeId::Switch,
        })?;
        let (src, dst) = if to_switch { (node, NodeId::Switch) } else { (NodeId::Switch, node) };
        link.send_classified(src, dst, bytes, data_bytes, at)
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SimClock {
    now: u64,
}

impl SimClock {
    pub fn now(&self) -> u64 {
        self.now
    }

    fn advance(&mut self, to: u64) {
        assert!(to >= self.now, "clock would run backward: {} -> {}", self.now, to);
        self.now = to;
    }
}

struct Scheduled<E> {
    fire_at: u64,
    seq: u64,
    payload: E,
}

impl<E> PartialEq for Scheduled<E> {
    fn eq(&self, other: &Self) -> bool {
        (self.fire_at, self.seq) == (other.fire_at, other.seq)
    }
}

impl<E> Eq for Scheduled<E> {}

impl<E> PartialOrd for Scheduled<E> {
    fn partial_cmp(&self, other: &Self) -> Option<std::cmp::Ordering> {
        Some(self.cmp(other))
    }
}

impl<E> Ord for Scheduled<E> {
    fn cmp(&self, other: &Self) -> std::cmp::Ordering {
        (self.fire_at, self.seq).cmp(&(other.fire_at, other.seq))
    }
}

pub const DEFAULT_MAX_EVENTS: u64 = 50_000_000;

/// Event queue plus clock.
pub struct Simulation<E> {
    clock: SimClock,
    queue: BinaryHeap<Reverse<Scheduled<E>>>,
    next_seq: u64,
    processed: u64,
    max_events: u64,
}

impl<E> Default for Simulation<E> {
    fn default() -> Self {
        Self::new(DEFAULT_MAX_EVENTS)
    }
}

impl<E> Simulation<E> {
    pub fn new(max_events: u64) -> Self {
        Self {
            clock: SimClock::default(),
            queue: BinaryHeap::new(),
            next_seq: 0,
            processed: 0,
            max_events,
        }
    }

    pub fn now(&self) -> u64 {
        self.clock.now()
    }

    pub fn processed(&self) -> u64 {
        self.processed
    }

    pub fn pending(&self) -> usize {
        self.queue.len()
    }

    pub fn set_max_events(&mut self, max: u64) {
        self.max_events = max;
    }

    pub fn max_events(&self) -> u64 {
        self.max_events
    }

    /// Fire time of the next event, if any.
    pub fn peek_time(&self) -> Option<u64> {
        self.queue.peek().map(|Reverse(ev)| ev.fire_at)
    }

    /// Schedules `payload` at `fire_at`; returns its tie-break sequence number.
    pub fn schedule(&mut self, fire_at: u64, payload: E) -> u64 {
        assert!(fire_at >= self.clock.now(), "event scheduled in the past");
        let seq = self.next_seq;
        self.next_seq += 1;
        self.queue.push(Reverse(Scheduled { fire_at, seq, payload }));
        seq
    }

    pub fn pop(&mut self) -> Option<(u64, E)> {
        let Reverse(ev) = self.queue.pop()?;
        self.clock.advance(ev.fire_at);
        self.processed += 1;
        Some((ev.fire_at, ev.payload))
    }

    /// Drains the queue, handing each event to `handler`.
    pub fn run_until_idle<F>(&mut self, mut handler: F) -> Result<u64, FabricError>
    where
        F: FnMut(&mut Self, u64, E),
    {
        let mut budget = 0u64;
        while let Some((t, ev)) = self.pop() {
            budget += 1;
            if budget > self.max_events {
                return Err(FabricError::LivelockGuard(budget - 1));
            }
            handler(self, t, ev);
        }
        Ok(self.clock.now())
    }
}

#[derive(Serialize)]
struct TraceLine<'a> {
    t_us: u64,
    src: &'a NodeId,
    dst: &'a NodeId,
    kind: &'a str,
    bytes: u64,
}

/// JSON Lines trace of message deliveries with a running SHA-256.
pub struct TraceSink {
    hasher: Sha256,
    writer: Option<Box<dyn Write + Send>>,
    keep: bool,
    lines: Vec<String>,
    count: u64,
    write_error: Option<String>,
}

impl Default for TraceSink {
    fn default() -> Self {
        Self::new()
    }
}

impl TraceSink {
    pub fn new() -> Self {
        Self {
            hasher: Sha256::new(),
            writer: None,
            keep: false,
            lines: Vec::new(),
            count: 0,
            write_error: None,
        }
    }

    pub fn with_writer(writer: Box<dyn Write + Send>) -> Self {
        Self {
            writer: Some(writer),
            ..Self::new()
        }
    }

    /// Retain lines in memory (tests).
    pub fn keep_lines(mut self) -> Self {
        self.keep = true;
        self
    }

    pub fn record(&mut self, t_us: u64, src: NodeId, dst: NodeId, kind: &str, bytes: u64) {
        let mut line = serde_json::to_string(&TraceLine {
            t_us,
            src: &src,
            dst: &dst,
            kind,
            bytes,
        })
        .expect("trace line serializes");
        line.push('\n');
        self.hasher.update(line.as_bytes());
        if let Some(w) = self.writer.as_mut() {
            if let Err(e) = w.write_all(line.as_bytes()) {
                self.write_error.get_or_insert(e.to_string());
            }
        }
        if self.keep {
            line.pop();
            self.lines.push(line);
        }
        self.count += 1;
    }

    pub fn lines(&self) -> &[String] {
        &self.lines
    }

    pub fn count(&self) -> u64 {
        self.count
    }

    /// Hex SHA-256 of every byte recorded so far.
    pub fn hash(&self) -> String {
        hex::encode(self.hasher.clone().finalize())
    }

    pub fn flush(&mut self) -> Result<(), String> {
        if let Some(e) = self.write_error.take() {
            return Err(e);
        }
        if let Some(w) = self.writer.as_mut() {
            w.flush().map_err(|e| e.to_string())?;
        }
        Ok(())
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    const MIB: u64 = 1024 * 1024;

    fn link() -> FabricLink {
        FabricLink::new(
            NodeId::Host(0),
            NodeId::Switch,
            LinkParams {
                latency_us: 100,
                bandwidth_bytes_per_s: 100 * MIB,
            },
        )
    }

    #[test]
    fn bulk_transfer_time() {
        let mut l = link();
        let t = l.send(NodeId::Host(0), NodeId::Switch, 8 * MIB, 0).unwrap();
        assert_eq!(t, 80_100);
    }

    #[test]
    fn header_only_is_latency_dominated() {
        let mut l = link();
        let t = l.send(NodeId::Host(0), NodeId::Switch, HEADER_BYTES, 0).unwrap();
        assert_eq!(t, 101);
    }

    #[test]
    fn back_to_back_transfers_serialize() {
        // oracle: accumulate busy_until by hand
        let ser = (8 * MIB * 1_000_000).div_ceil(100 * MIB);
        let mut busy = 0u64;
        let mut expected = Vec::new();
        for _ in 0..2 {
            let start = busy;
            busy = start + ser;
            expected.push(busy + 100);
        }
        let mut l = link();
        let a = l.send(NodeId::Host(0), NodeId::Switch, 8 * MIB, 0).unwrap();
        let b = l.send(NodeId::Host(0), NodeId::Switch, 8 * MIB, 0).unwrap();
        assert_eq!(vec![a, b], expected);
        assert_eq!(b, 160_100);
    }

    #[test]
    fn directions_are_independent() {
        let mut l = link();
        l.send(NodeId::Host(0), NodeId::Switch, 8 * MIB, 0).unwrap();
        let back = l.send(NodeId::Switch, NodeId::Host(0), 8 * MIB, 0).unwrap();
        assert_eq!(back, 80_100);
    }

    #[test]
    fn wrong_endpoints_is_no_route() {
        let mut l = link();
        assert!(matches!(
            l.send(NodeId::Host(1), NodeId::Switch, 64, 0),
            Err(FabricError::NoRoute { .. })
        ));
    }

    #[test]
    fn empty_queue_returns_zero() {
        let mut sim: Simulation<()> = Simulation::default();
        assert_eq!(sim.run_until_idle(|_, _, _| {}).unwrap(), 0);
    }

    #[test]
    fn events_fire_in_time_then_seq_order() {
        let mut sim = Simulation::default();
        sim.schedule(5, "b");
        sim.schedule(1, "a");
        sim.schedule(5, "c");
        let mut seen = Vec::new();
        let end = sim
            .run_until_idle(|sim, t, ev| {
                seen.push((t, ev));
                if ev == "a" {
                    sim.schedule(5, "d");
                }
            })
            .unwrap();
        assert_eq!(seen, vec![(1, "a"), (5, "b"), (5, "c"), (5, "d")]);
        assert_eq!(end, 5);
    }

    #[test]
    fn livelock_guard() {
        let mut sim = Simulation::new(100);
        sim.schedule(0, ());
        let err = sim.run_until_idle(|sim, t, _| {
            sim.schedule(t + 1, ());
        });
        assert_eq!(err, Err(FabricError::LivelockGuard(100)));
    }

    #[test]
    fn node_names_round_trip() {
        for n in [
            NodeId::Host(3),
            NodeId::Appliance(1),
            NodeId::MetadataCenter,
            NodeId::Subsystem(12),
            NodeId::Switch,
        ] {
            assert_eq!(n.to_string().parse::<NodeId>().unwrap(), n);
            assert_eq!(NodeId::from_code(n.code()), Some(n));
        }
        assert!("disk0".parse::<NodeId>().is_err());
    }

    #[test]
    fn trace_format_and_hash() {
        let mut a = TraceSink::new().keep_lines();
        let mut b = TraceSink::new();
        for s in [&mut a, &mut b] {
            s.record(7, NodeId::Host(0), NodeId::Subsystem(1), "IoReq", 4160);
        }
        assert_eq!(
            a.lines()[0],
            r#"{"t_us":7,"src":"host0","dst":"sub1","kind":"IoReq","bytes":4160}"#
        );
        assert_eq!(a.hash(), b.hash());
        let expected = hex::encode(Sha256::digest(format!("{}\n", a.lines()[0]).as_bytes()));
        assert_eq!(a.hash(), expected);
    }
}
