//! Plumbing shared by every simulated node: the per-event outbox.

use crate::extent::VolumeId;
use crate::fabric::NodeId;
use crate::wire::{Message, WriteOrigin};

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Timer {
    /// Host workload: issue the next request.
    Issue,
    /// Start relocating one extent of a volume.
    Migrate { volume: VolumeId, extent: u64 },
}

/// A host write as actually applied by a backend device, in apply order.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct AppliedWrite {
    pub at: u64,
    pub origin: WriteOrigin,
    pub blocks: u64,
    pub data: Vec<u8>,
}

/// Side effects produced while a node handles one event.
#[derive(Debug)]
pub struct Outbox {
    now: u64,
    pub(crate) sends: Vec<(u64, Message)>,
    pub(crate) timers: Vec<(u64, NodeId, Timer)>,
    pub(crate) applied: Vec<AppliedWrite>,
}

impl Outbox {
    pub fn new(now: u64) -> Self {
        Self {
            now,
            sends: Vec::new(),
            timers: Vec::new(),
            applied: Vec::new(),
        }
    }

    pub fn now(&self) -> u64 {
        self.now
    }

    pub fn send(&mut self, msg: Message) {
        self.sends.push((self.now, msg));
    }

    /// Transmits `msg` once the clock reaches `at` (e.g. after a device completes).
    pub fn send_at(&mut self, at: u64, msg: Message) {
        debug_assert!(at >= self.now);
        self.sends.push((at.max(self.now), msg));
    }

    pub fn timer(&mut self, at: u64, node: NodeId, timer: Timer) {
        self.timers.push((at.max(self.now), node, timer));
    }

    pub fn applied(&mut self, write: AppliedWrite) {
        self.applied.push(write);
    }

    pub fn messages(&self) -> impl Iterator<Item = &Message> {
        self.sends.iter().map(|(_, m)| m)
    }

    pub fn take_messages(&mut self) -> Vec<(u64, Message)> {
        std::mem::take(&mut self.sends)
    }
}
