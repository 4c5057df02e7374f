//! Emulated backend arrays.
//!
//! [`Subsystem`] is the device itself: a sparse block store, a single FIFO
//! service queue and a per-range initiator ACL. [`SubsystemNode`] puts it
//! on the fabric and adds the mode-specific extras: the epoch shim used by
//! direct-access hosts, the embedded virtualizer of subsystem-level
//! virtualization, and third-party extent copies.

use std::collections::{BTreeMap, BTreeSet};
use std::fs::{File, OpenOptions};
use std::io::{self, Read, Write};
use std::ops::Range;
use std::os::unix::fs::FileExt;
use std::path::Path;

use thiserror::Error;

use crate::extent::{BlockAddr, SubsystemId, VolumeId};
use crate::fabric::NodeId;
use crate::metadata::MetadataStore;
use crate::node::{AppliedWrite, Outbox, Timer};
use crate::wire::{Body, IoOp, IoReq, IoRsp, IoStatus, Message};

#[derive(Debug, Error)]
pub enum SubsystemError {
    #[error("{initiator} is not permitted to access blocks {start}..{end}")]
    AccessDenied { initiator: NodeId, start: u64, end: u64 },
    #[error("blocks {start}..{end} exceed capacity {capacity}")]
    OutOfCapacity { start: u64, end: u64, capacity: u64 },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("store i/o: {0}")]
    Io(#[from] io::Error),
}

impl SubsystemError {
    pub fn status(&self) -> IoStatus {
        match self {
            SubsystemError::AccessDenied { .. } => IoStatus::AccessDenied,
            SubsystemError::OutOfCapacity { .. } => IoStatus::OutOfCapacity,
            SubsystemError::Invalid(_) => IoStatus::Invalid,
            SubsystemError::Io(_) => IoStatus::IoFailed,
        }
    }
}

/// Sparse block storage, in memory or spilled to a file.
#[derive(Debug)]
pub enum BlockStore {
    Memory(BTreeMap<u64, Box<[u8]>>),
    File { file: File, written: BTreeSet<u64> },
}

impl BlockStore {
    pub fn memory() -> Self {
        BlockStore::Memory(BTreeMap::new())
    }

    pub fn file(path: &Path) -> io::Result<Self> {
        let file = OpenOptions::new().read(true).write(true).create(true).truncate(true).open(path)?;
        Ok(BlockStore::File {
            file,
            written: BTreeSet::new(),
        })
    }

    fn read_into(&self, block: u64, out: &mut [u8]) -> io::Result<()> {
        match self {
            BlockStore::Memory(map) => match map.get(&block) {
                Some(b) => out.copy_from_slice(b),
                None => out.fill(0),
            },
            BlockStore::File { file, written } => {
                if written.contains(&block) {
                    file.read_exact_at(out, block * out.len() as u64)?;
                } else {
                    out.fill(0);
                }
            }
        }
        Ok(())
    }

    fn write(&mut self, block: u64, data: &[u8]) -> io::Result<()> {
        match self {
            BlockStore::Memory(map) => {
                map.insert(block, data.into());
            }
            BlockStore::File { file, written } => {
                file.write_all_at(data, block * data.len() as u64)?;
                written.insert(block);
            }
        }
        Ok(())
    }

    pub fn written_blocks(&self) -> Vec<u64> {
        match self {
            BlockStore::Memory(map) => map.keys().copied().collect(),
            BlockStore::File { written, .. } => written.iter().copied().collect(),
        }
    }

    pub fn clear(&mut self) -> io::Result<()> {
        match self {
            BlockStore::Memory(map) => map.clear(),
            BlockStore::File { file, written } => {
                file.set_len(0)?;
                written.clear();
            }
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendIo {
    pub op: IoOp,
    pub lba: BlockAddr,
    pub len: u64,
    pub initiator: NodeId,
    /// Write payload, `len * block_size` bytes; empty for reads.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct BackendCompletion {
    pub at: u64,
    /// Read payload; empty for writes.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DeviceStats {
    pub reads: u64,
    pub writes: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub busy_us: u64,
    pub denied: u64,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct DeviceParams {
    pub capacity_blocks: u64,
    pub block_size: u64,
    pub service_latency_us: u64,
    pub internal_bandwidth_bytes_per_s: u64,
}

#[derive(Debug)]
pub struct Subsystem {
    id: SubsystemId,
    params: DeviceParams,
    busy_until: u64,
    store: BlockStore,
    /// `start -> (end, holder)`, non-overlapping.
    acl: BTreeMap<u64, (u64, NodeId)>,
    stats: DeviceStats,
}

impl Subsystem {
    pub fn new(id: SubsystemId, params: DeviceParams) -> Self {
        Self::with_store(id, params, BlockStore::memory())
    }

    pub fn with_store(id: SubsystemId, params: DeviceParams, store: BlockStore) -> Self {
        assert!(params.block_size > 0 && params.internal_bandwidth_bytes_per_s > 0);
        Self {
            id,
            params,
            busy_until: 0,
            store,
            acl: BTreeMap::new(),
            stats: DeviceStats::default(),
        }
    }

    pub fn id(&self) -> SubsystemId {
        self.id
    }

    pub fn params(&self) -> DeviceParams {
        self.params
    }

    pub fn capacity_blocks(&self) -> u64 {
        self.params.capacity_blocks
    }

    pub fn block_size(&self) -> u64 {
        self.params.block_size
    }

    pub fn busy_until(&self) -> u64 {
        self.busy_until
    }

    pub fn stats(&self) -> DeviceStats {
        self.stats
    }

    fn check_range(&self, start: u64, len: u64) -> Result<(), SubsystemError> {
        let end = start.saturating_add(len);
        if end > self.params.capacity_blocks {
            return Err(SubsystemError::OutOfCapacity {
                start,
                end,
                capacity: self.params.capacity_blocks,
            });
        }
        Ok(())
    }

    /// Gives `range` exclusively to `initiator`, displacing any prior holders.
    pub fn set_acl(&mut self, range: Range<u64>, initiator: NodeId) -> Result<(), SubsystemError> {
        if range.is_empty() {
            return Ok(());
        }
        self.check_range(range.start, range.end - range.start)?;
        let overlapping: Vec<(u64, (u64, NodeId))> = self
            .acl
            .range(..range.end)
            .filter(|(_, (end, _))| *end > range.start)
            .map(|(s, v)| (*s, *v))
            .collect();
        for (start, (end, holder)) in overlapping {
            self.acl.remove(&start);
            if start < range.start {
                self.acl.insert(start, (range.start, holder));
            }
            if end > range.end {
                self.acl.insert(range.end, (end, holder));
            }
        }
        self.acl.insert(range.start, (range.end, initiator));
        Ok(())
    }

    /// Who holds `block`, if anyone.
    pub fn acl_holder(&self, block: u64) -> Option<NodeId> {
        self.acl
            .range(..=block)
            .next_back()
            .filter(|(_, (end, _))| block < *end)
            .map(|(_, (_, h))| *h)
    }

    pub fn acl_entries(&self) -> impl Iterator<Item = (Range<u64>, NodeId)> + '_ {
        self.acl.iter().map(|(s, (e, h))| (*s..*e, *h))
    }

    /// True when every block of `[start, start+len)` is held by `initiator`.
    pub fn check_access(&self, start: u64, len: u64, initiator: NodeId) -> bool {
        let end = start + len;
        let mut at = start;
        while at < end {
            match self.acl.range(..=at).next_back() {
                Some((_, (e, h))) if at < *e && *h == initiator => at = *e,
                _ => return false,
            }
        }
        true
    }

    /// Validates, access-checks and applies `io`, returning its completion.
    pub fn submit(&mut self, io: BackendIo, at: u64) -> Result<BackendCompletion, SubsystemError> {
        if !self.check_access(io.lba, io.len.max(1), io.initiator) {
            self.check_range(io.lba, io.len)?;
            self.stats.denied += 1;
            return Err(SubsystemError::AccessDenied {
                initiator: io.initiator,
                start: io.lba,
                end: io.lba + io.len,
            });
        }
        self.submit_unchecked(io, at)
    }

    /// Applies `io` without consulting the ACL (internal copies).
    pub fn submit_unchecked(&mut self, io: BackendIo, at: u64) -> Result<BackendCompletion, SubsystemError> {
        if io.len == 0 {
            return Err(SubsystemError::Invalid("zero-length i/o".into()));
        }
        self.check_range(io.lba, io.len)?;
        let bs = self.params.block_size as usize;
        let bytes = io.len * self.params.block_size;
        let data = match io.op {
            IoOp::Write => {
                if io.data.len() as u64 != bytes {
                    return Err(SubsystemError::Invalid(format!(
                        "write payload is {} bytes, expected {bytes}",
                        io.data.len()
                    )));
                }
                for (i, chunk) in io.data.chunks_exact(bs).enumerate() {
                    self.store.write(io.lba + i as u64, chunk)?;
                }
                self.stats.writes += 1;
                self.stats.bytes_written += bytes;
                Vec::new()
            }
            IoOp::Read => {
                let mut out = vec![0u8; bytes as usize];
                for (i, chunk) in out.chunks_exact_mut(bs).enumerate() {
                    self.store.read_into(io.lba + i as u64, chunk)?;
                }
                self.stats.reads += 1;
                self.stats.bytes_read += bytes;
                out
            }
        };
        let transfer = (bytes as u128 * 1_000_000).div_ceil(self.params.internal_bandwidth_bytes_per_s as u128) as u64;
        let service = self.params.service_latency_us + transfer;
        let done = at.max(self.busy_until) + service;
        self.busy_until = done;
        self.stats.busy_us += service;
        Ok(BackendCompletion { at: done, data })
    }

    /// Reads blocks directly, bypassing timing and ACLs (inspection only).
    pub fn peek(&self, lba: u64, len: u64) -> Result<Vec<u8>, SubsystemError> {
        self.check_range(lba, len)?;
        let bs = self.params.block_size as usize;
        let mut out = vec![0u8; len as usize * bs];
        for (i, chunk) in out.chunks_exact_mut(bs).enumerate() {
            self.store.read_into(lba + i as u64, chunk)?;
        }
        Ok(out)
    }

    /// Writes the store as `count: u64 LE` then `(block: u64 LE, payload)` records.
    pub fn dump(&self, w: &mut impl Write) -> Result<(), SubsystemError> {
        let blocks = self.store.written_blocks();
        w.write_all(&(blocks.len() as u64).to_le_bytes())?;
        let mut buf = vec![0u8; self.params.block_size as usize];
        for b in blocks {
            self.store.read_into(b, &mut buf)?;
            w.write_all(&b.to_le_bytes())?;
            w.write_all(&buf)?;
        }
        Ok(())
    }

    /// Replaces the store contents with a [`Subsystem::dump`] stream.
    pub fn restore(&mut self, r: &mut impl Read) -> Result<(), SubsystemError> {
        let mut word = [0u8; 8];
        r.read_exact(&mut word)?;
        let count = u64::from_le_bytes(word);
        let mut records = Vec::new();
        let mut buf = vec![0u8; self.params.block_size as usize];
        for _ in 0..count {
            r.read_exact(&mut word)?;
            let block = u64::from_le_bytes(word);
            self.check_range(block, 1)?;
            r.read_exact(&mut buf)?;
            records.push((block, buf.clone()));
        }
        self.store.clear()?;
        for (block, data) in records {
            self.store.write(block, &data)?;
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct SubsystemNodeStats {
    pub stale_rejections: u64,
    pub access_denied: u64,
    pub copies: u64,
    pub internal_migrations: u64,
}

#[derive(Debug, Clone, Copy)]
struct CopyJob {
    reply_to: NodeId,
    volume: VolumeId,
    epoch: u64,
}

/// A subsystem attached to the fabric.
#[derive(Debug)]
pub struct SubsystemNode {
    pub device: Subsystem,
    node: NodeId,
    /// Per-volume minimum epoch for host-initiated I/O (direct access only).
    shim: Option<BTreeMap<VolumeId, u64>>,
    /// Volume virtualization inside the array (subsystem-level mode).
    embedded: Option<MetadataStore>,
    audit: bool,
    copies: BTreeMap<u64, CopyJob>,
    next_tag: u64,
    stats: SubsystemNodeStats,
}

impl SubsystemNode {
    pub fn new(device: Subsystem) -> Self {
        let node = NodeId::Subsystem(device.id().0);
        Self {
            device,
            node,
            shim: None,
            embedded: None,
            audit: false,
            copies: BTreeMap::new(),
            next_tag: 0,
            stats: SubsystemNodeStats::default(),
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn enable_epoch_shim(&mut self) {
        self.shim.get_or_insert_with(BTreeMap::new);
    }

    pub fn shim_epoch(&self, volume: VolumeId) -> Option<u64> {
        self.shim.as_ref().map(|s| s.get(&volume).copied().unwrap_or(0))
    }

    pub fn set_embedded(&mut self, store: MetadataStore) {
        self.embedded = Some(store);
    }

    pub fn embedded(&self) -> Option<&MetadataStore> {
        self.embedded.as_ref()
    }

    pub fn embedded_mut(&mut self) -> Option<&mut MetadataStore> {
        self.embedded.as_mut()
    }

    pub fn set_audit(&mut self, on: bool) {
        self.audit = on;
    }

    pub fn stats(&self) -> SubsystemNodeStats {
        self.stats
    }

    fn respond(&self, out: &mut Outbox, at: u64, to: NodeId, req: &IoReq, status: IoStatus, payload: Vec<u8>) {
        out.send_at(
            at,
            Message::new(
                self.node,
                to,
                Body::IoRsp(IoRsp {
                    tag: req.tag,
                    volume: req.volume,
                    epoch: req.epoch,
                    status,
                    payload,
                }),
            ),
        );
    }

    fn record(&self, out: &mut Outbox, req: &IoReq) {
        if let (true, Some(origin)) = (self.audit, req.origin) {
            out.applied(AppliedWrite {
                at: out.now(),
                origin,
                blocks: req.len as u64,
                data: req.payload.clone(),
            });
        }
    }

    pub fn on_message(&mut self, msg: Message, out: &mut Outbox) {
        let src = msg.src;
        match msg.body {
            Body::IoReq(req) => {
                if self.embedded.is_some() && matches!(src, NodeId::Host(_)) {
                    self.virtual_io(src, req, out);
                } else {
                    self.physical_io(src, req, out);
                }
            }
            Body::IoRsp(rsp) => {
                if let Some(job) = self.copies.remove(&rsp.tag) {
                    out.send(Message::new(
                        self.node,
                        job.reply_to,
                        Body::CopyDone {
                            volume: job.volume,
                            epoch: job.epoch,
                            status: rsp.status,
                        },
                    ));
                }
            }
            Body::Zone { start, len, initiator } => {
                // Zoning comes from trusted setup paths; a bad range is a wiring bug.
                self.device
                    .set_acl(start..start + len as u64, initiator)
                    .expect("zone within capacity");
            }
            Body::Fence { volume, epoch } => {
                if let Some(shim) = self.shim.as_mut() {
                    let e = shim.entry(volume).or_insert(0);
                    *e = (*e).max(epoch);
                }
                out.send(Message::new(self.node, src, Body::FenceAck { volume, epoch }));
            }
            Body::MigrateExtent {
                volume,
                epoch,
                from,
                to,
                len,
            } => self.copy_extent(src, volume, epoch, from.device_lba, to, len as u64, out),
            _ => {}
        }
    }

    fn physical_io(&mut self, src: NodeId, req: IoReq, out: &mut Outbox) {
        if let (Some(shim), NodeId::Host(_)) = (self.shim.as_ref(), src) {
            if req.epoch < shim.get(&req.volume).copied().unwrap_or(0) {
                self.stats.stale_rejections += 1;
                self.respond(out, out.now(), src, &req, IoStatus::StaleEpoch, Vec::new());
                return;
            }
        }
        let io = BackendIo {
            op: req.op,
            lba: req.lba,
            len: req.len as u64,
            initiator: src,
            data: if req.op == IoOp::Write { req.payload.clone() } else { Vec::new() },
        };
        match self.device.submit(io, out.now()) {
            Ok(done) => {
                if req.op == IoOp::Write {
                    self.record(out, &req);
                }
                self.respond(out, done.at, src, &req, IoStatus::Ok, done.data);
            }
            Err(e) => {
                if matches!(e, SubsystemError::AccessDenied { .. }) {
                    self.stats.access_denied += 1;
                }
                self.respond(out, out.now(), src, &req, e.status(), Vec::new());
            }
        }
    }

    fn virtual_io(&mut self, src: NodeId, req: IoReq, out: &mut Outbox) {
        let store = self.embedded.as_mut().expect("checked by caller");
        let res = match store.handle_resolve(req.volume, req.lba, req.len as u64, src, req.op == IoOp::Write) {
            Ok(r) => r,
            Err(e) => {
                self.respond(out, out.now(), src, &req, e.status(), Vec::new());
                return;
            }
        };
        let bs = self.device.block_size() as usize;
        let mut done_at = out.now();
        let mut data = Vec::new();
        for seg in &res.grant.segments {
            let off = (seg.vstart - req.lba) as usize * bs;
            let bytes = seg.len as usize * bs;
            let Some(loc) = seg.location else {
                data.resize(data.len() + bytes, 0);
                continue;
            };
            let io = BackendIo {
                op: req.op,
                lba: loc.device_lba,
                len: seg.len,
                initiator: self.node,
                data: if req.op == IoOp::Write {
                    req.payload[off..off + bytes].to_vec()
                } else {
                    Vec::new()
                },
            };
            match self.device.submit_unchecked(io, out.now()) {
                Ok(c) => {
                    done_at = done_at.max(c.at);
                    data.extend_from_slice(&c.data);
                }
                Err(e) => {
                    self.respond(out, out.now(), src, &req, e.status(), Vec::new());
                    return;
                }
            }
        }
        if req.op == IoOp::Write {
            self.record(out, &req);
            data.clear();
        }
        self.respond(out, done_at, src, &req, IoStatus::Ok, data);
    }

    #[allow(clippy::too_many_arguments)]
    fn copy_extent(
        &mut self,
        reply_to: NodeId,
        volume: VolumeId,
        epoch: u64,
        from_lba: u64,
        to: crate::extent::PhysicalLocation,
        len: u64,
        out: &mut Outbox,
    ) {
        self.stats.copies += 1;
        let read = BackendIo {
            op: IoOp::Read,
            lba: from_lba,
            len,
            initiator: self.node,
            data: Vec::new(),
        };
        let read = match self.device.submit_unchecked(read, out.now()) {
            Ok(c) => c,
            Err(e) => {
                out.send(Message::new(
                    self.node,
                    reply_to,
                    Body::CopyDone {
                        volume,
                        epoch,
                        status: e.status(),
                    },
                ));
                return;
            }
        };
        if to.subsystem == self.device.id() {
            let write = BackendIo {
                op: IoOp::Write,
                lba: to.device_lba,
                len,
                initiator: self.node,
                data: read.data,
            };
            let (at, status) = match self.device.submit_unchecked(write, read.at) {
                Ok(c) => (c.at, IoStatus::Ok),
                Err(e) => (read.at, e.status()),
            };
            out.send_at(at, Message::new(self.node, reply_to, Body::CopyDone { volume, epoch, status }));
            return;
        }
        let tag = self.next_tag;
        self.next_tag += 1;
        self.copies.insert(tag, CopyJob { reply_to, volume, epoch });
        out.send_at(
            read.at,
            Message::new(
                self.node,
                NodeId::Subsystem(to.subsystem.0),
                Body::IoReq(IoReq {
                    tag,
                    op: IoOp::Write,
                    volume,
                    epoch,
                    lba: to.device_lba,
                    len: len as u32,
                    payload: read.data,
                    origin: None,
                }),
            ),
        );
    }

    /// Relocates one extent inside the array (subsystem-level mode).
    pub fn on_timer(&mut self, timer: Timer, out: &mut Outbox) {
        let Timer::Migrate { volume, extent } = timer else {
            return;
        };
        let Some(store) = self.embedded.as_mut() else {
            return;
        };
        let Some(table) = store.table(volume) else {
            return;
        };
        let n = table.extent_count();
        let Some(index) = (0..n)
            .map(|k| (extent + k) % n)
            .find(|&i| table.state(i).location().is_some())
        else {
            return;
        };
        let len = table.extent_size_blocks().min(table.size_blocks() - index * table.extent_size_blocks());
        let from = table.state(index).location().expect("found mapped");
        let Some(to) = store.pick_migration_target(volume, index) else {
            return;
        };
        let read = BackendIo {
            op: IoOp::Read,
            lba: from.device_lba,
            len,
            initiator: self.node,
            data: Vec::new(),
        };
        let now = out.now();
        let Ok(c) = self.device.submit_unchecked(read, now) else {
            return;
        };
        let write = BackendIo {
            op: IoOp::Write,
            lba: to.device_lba,
            len,
            initiator: self.node,
            data: c.data,
        };
        if self.device.submit_unchecked(write, now).is_ok() {
            let store = self.embedded.as_mut().expect("checked above");
            store
                .migrate_and_invalidate(volume, index, to)
                .expect("target picked from the same pool");
            self.stats.internal_migrations += 1;
        }
    }
}
