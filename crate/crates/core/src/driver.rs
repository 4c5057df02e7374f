//! Host-resident volume driver.
//!
//! Splits virtual I/O at extent boundaries, routes each piece according to
//! the architecture, caches path grants per extent and transparently
//! re-resolves after a `StaleEpoch` rejection.

use std::collections::{BTreeMap, BTreeSet, VecDeque};

use thiserror::Error;

use crate::extent::{PhysicalLocation, VolumeId};
use crate::fabric::NodeId;
use crate::metadata::MetadataStore;
use crate::node::Outbox;
use crate::wire::{Body, Invalidation, IoOp, IoReq, IoStatus, Message, PathGrant, WriteOrigin};

/// Attempts per segment before the request fails with `IoFailed`.
pub const RETRY_BUDGET: u32 = 3;

/// How a host reaches its volumes.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Routing {
    /// Private mapping table, direct I/O to the host's own partitions.
    ServerLevel,
    /// Virtual I/O to the subsystem that hosts the volume.
    SubsystemLevel,
    /// Virtual I/O to the single in-band appliance.
    Symmetric,
    /// Grants from the metadata center, direct I/O to subsystems.
    Asymmetric,
    /// Grants from the metadata center, I/O through a presenting appliance.
    SemiSymmetric,
}

impl Routing {
    fn uses_grants(self) -> bool {
        matches!(self, Routing::Asymmetric | Routing::SemiSymmetric)
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DriverError {
    #[error("unknown volume {0}")]
    UnknownVolume(VolumeId),
    #[error("host is not authorized for {0}")]
    Unauthorized(VolumeId),
    #[error("{0} is not open on this host")]
    NotOpen(VolumeId),
    #[error("invalid request: {0}")]
    InvalidRequest(String),
}

/// What a driver needs to know about a volume it opens.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeInfo {
    pub volume: VolumeId,
    pub size_blocks: u64,
    pub extent_size_blocks: u64,
    pub epoch: u64,
    /// Destination of data-path messages (subsystem or appliance).
    pub data_target: NodeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct VolumeHandle {
    pub volume: VolumeId,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct CachedGrant {
    pub epoch: u64,
    /// Physical start of the extent.
    pub location: PhysicalLocation,
}

#[derive(Debug, Clone)]
struct OpenVolume {
    info: VolumeInfo,
    known_epoch: u64,
    cache: BTreeMap<u64, CachedGrant>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoRequest {
    pub volume: VolumeId,
    pub op: IoOp,
    pub start: u64,
    pub len: u64,
    /// Write data, `len * block_size` bytes; empty for reads.
    pub payload: Vec<u8>,
}

impl IoRequest {
    pub fn read(volume: VolumeId, start: u64, len: u64) -> Self {
        Self {
            volume,
            op: IoOp::Read,
            start,
            len,
            payload: Vec::new(),
        }
    }

    pub fn write(volume: VolumeId, start: u64, len: u64, payload: Vec<u8>) -> Self {
        Self {
            volume,
            op: IoOp::Write,
            start,
            len,
            payload,
        }
    }

    fn conflicts(&self, other: &IoRequest) -> bool {
        self.volume == other.volume
            && (self.op == IoOp::Write || other.op == IoOp::Write)
            && self.start < other.start + other.len
            && other.start < self.start + self.len
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoCompletion {
    pub request: u64,
    pub volume: VolumeId,
    pub op: IoOp,
    pub start: u64,
    pub len: u64,
    pub status: IoStatus,
    pub submitted_at: u64,
    pub completed_at: u64,
    pub latency_us: u64,
    /// Read data when the driver retains it.
    pub data: Vec<u8>,
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct DriverStats {
    pub ios_issued: u64,
    pub ios_completed: u64,
    pub ios_failed: u64,
    pub bytes_completed: u64,
    pub cache_hits: u64,
    pub resolves_sent: u64,
    pub re_resolves: u64,
    pub stale_epochs: u64,
    pub stale_recovered: u64,
    pub data_ios: u64,
    pub zero_fills: u64,
    pub held_for_overlap: u64,
    pub invalidations: u64,
}

#[derive(Debug, Clone)]
struct Seg {
    vstart: u64,
    len: u64,
    attempts: u32,
    stale: u32,
}

#[derive(Debug)]
struct Pending {
    req: IoRequest,
    submitted_at: u64,
    segs: Vec<Seg>,
    remaining: usize,
    status: IoStatus,
    data: Vec<u8>,
    resolved: bool,
}

type ResolveKey = (VolumeId, u64, bool);

#[derive(Debug)]
pub struct VolumeDriver {
    host: u32,
    node: NodeId,
    routing: Routing,
    block_size: u64,
    local: Option<MetadataStore>,
    keep_data: bool,
    volumes: BTreeMap<VolumeId, OpenVolume>,
    requests: BTreeMap<u64, Pending>,
    active: BTreeSet<u64>,
    blocked: VecDeque<u64>,
    resolve_tags: BTreeMap<u64, ResolveKey>,
    waiting: BTreeMap<ResolveKey, Vec<(u64, usize)>>,
    io_tags: BTreeMap<u64, (u64, usize)>,
    next_request: u64,
    next_tag: u64,
    completions: Vec<IoCompletion>,
    stats: DriverStats,
}

impl VolumeDriver {
    pub fn new(host: u32, routing: Routing, block_size: u64) -> Self {
        Self {
            host,
            node: NodeId::Host(host),
            routing,
            block_size,
            local: None,
            keep_data: true,
            volumes: BTreeMap::new(),
            requests: BTreeMap::new(),
            active: BTreeSet::new(),
            blocked: VecDeque::new(),
            resolve_tags: BTreeMap::new(),
            waiting: BTreeMap::new(),
            io_tags: BTreeMap::new(),
            next_request: 0,
            next_tag: 0,
            completions: Vec::new(),
            stats: DriverStats::default(),
        }
    }

    /// Server-level driver owning a private metadata store.
    pub fn with_local_store(host: u32, store: MetadataStore, block_size: u64) -> Self {
        let mut d = Self::new(host, Routing::ServerLevel, block_size);
        d.local = Some(store);
        d
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn routing(&self) -> Routing {
        self.routing
    }

    pub fn local_store(&self) -> Option<&MetadataStore> {
        self.local.as_ref()
    }

    pub fn local_store_mut(&mut self) -> Option<&mut MetadataStore> {
        self.local.as_mut()
    }

    /// Whether completions carry read data (off for bulk workloads).
    pub fn set_keep_data(&mut self, keep: bool) {
        self.keep_data = keep;
    }

    pub fn stats(&self) -> DriverStats {
        self.stats
    }

    pub fn outstanding(&self) -> usize {
        self.requests.len()
    }

    pub fn open_volume(&mut self, info: VolumeInfo) -> VolumeHandle {
        self.volumes.entry(info.volume).or_insert(OpenVolume {
            info,
            known_epoch: info.epoch,
            cache: BTreeMap::new(),
        });
        VolumeHandle { volume: info.volume }
    }

    pub fn is_open(&self, volume: VolumeId) -> bool {
        self.volumes.contains_key(&volume)
    }

    pub fn cached_grants(&self, volume: VolumeId) -> usize {
        self.volumes.get(&volume).map_or(0, |v| v.cache.len())
    }

    pub fn cached_grant(&self, volume: VolumeId, extent: u64) -> Option<CachedGrant> {
        self.volumes.get(&volume)?.cache.get(&extent).copied()
    }

    pub fn known_epoch(&self, volume: VolumeId) -> Option<u64> {
        self.volumes.get(&volume).map(|v| v.known_epoch)
    }

    pub fn take_completions(&mut self) -> Vec<IoCompletion> {
        std::mem::take(&mut self.completions)
    }

    /// Drops every cached grant of the volume.
    pub fn handle_invalidate(&mut self, inv: Invalidation) {
        if let Some(v) = self.volumes.get_mut(&inv.volume) {
            self.stats.invalidations += 1;
            v.cache.clear();
            v.known_epoch = v.known_epoch.max(inv.new_epoch);
        }
    }

    /// Accepts a request; its completion appears in [`Self::take_completions`].
    pub fn submit_io(&mut self, handle: VolumeHandle, req: IoRequest, out: &mut Outbox) -> Result<u64, DriverError> {
        if handle.volume != req.volume {
            return Err(DriverError::InvalidRequest("handle and request name different volumes".into()));
        }
        let vol = self.volumes.get(&req.volume).ok_or(DriverError::NotOpen(req.volume))?;
        let info = vol.info;
        if req.len == 0 {
            return Err(DriverError::InvalidRequest("zero-length request".into()));
        }
        if req.start.checked_add(req.len).is_none_or(|end| end > info.size_blocks) {
            return Err(DriverError::InvalidRequest(format!(
                "blocks {}..{} beyond volume size {}",
                req.start,
                req.start.saturating_add(req.len),
                info.size_blocks
            )));
        }
        let expect = if req.op == IoOp::Write { req.len * self.block_size } else { 0 };
        if req.payload.len() as u64 != expect {
            return Err(DriverError::InvalidRequest(format!(
                "payload is {} bytes, expected {expect}",
                req.payload.len()
            )));
        }
        let ext = info.extent_size_blocks;
        let mut segs = Vec::new();
        let mut at = req.start;
        let end = req.start + req.len;
        while at < end {
            let stop = ((at / ext + 1) * ext).min(end);
            segs.push(Seg {
                vstart: at,
                len: stop - at,
                attempts: 0,
                stale: 0,
            });
            at = stop;
        }
        let id = self.next_request;
        self.next_request += 1;
        self.stats.ios_issued += 1;
        let data = if req.op == IoOp::Read { vec![0u8; (req.len * self.block_size) as usize] } else { Vec::new() };
        let held = self.active.iter().chain(self.blocked.iter()).any(|o| self.requests[o].req.conflicts(&req));
        self.requests.insert(
            id,
            Pending {
                req,
                submitted_at: out.now(),
                remaining: segs.len(),
                segs,
                status: IoStatus::Ok,
                data,
                resolved: false,
            },
        );
        if held {
            self.stats.held_for_overlap += 1;
            self.blocked.push_back(id);
        } else {
            self.start(id, out);
        }
        Ok(id)
    }

    fn start(&mut self, id: u64, out: &mut Outbox) {
        self.active.insert(id);
        let n = self.requests[&id].segs.len();
        for i in 0..n {
            self.dispatch(id, i, out);
        }
    }

    fn dispatch(&mut self, id: u64, i: usize, out: &mut Outbox) {
        let Some(p) = self.requests.get_mut(&id) else { return };
        let volume = p.req.volume;
        let write = p.req.op == IoOp::Write;
        let vstart = p.segs[i].vstart;
        p.segs[i].attempts += 1;
        let ext_size = self.volumes[&volume].info.extent_size_blocks;
        let extent = vstart / ext_size;
        match self.routing {
            Routing::ServerLevel => {
                let store = self.local.as_mut().expect("server-level driver has a local store");
                match store.handle_resolve(volume, extent * ext_size, 1, self.node, write) {
                    Ok(r) => {
                        let loc = r.grant.segments[0].location;
                        self.send_io(id, i, r.grant.epoch, loc, out);
                    }
                    Err(e) => self.seg_done(id, i, Err(e.status()), out),
                }
            }
            Routing::SubsystemLevel | Routing::Symmetric => self.send_io(id, i, 0, None, out),
            Routing::Asymmetric | Routing::SemiSymmetric => {
                if let Some(g) = self.volumes[&volume].cache.get(&extent).copied() {
                    self.send_io(id, i, g.epoch, Some(g.location), out);
                    return;
                }
                p.resolved = true;
                let key = if !write && self.waiting.contains_key(&(volume, extent, true)) {
                    (volume, extent, true)
                } else {
                    (volume, extent, write)
                };
                if let Some(w) = self.waiting.get_mut(&key) {
                    w.push((id, i));
                    return;
                }
                self.waiting.insert(key, vec![(id, i)]);
                let info = self.volumes[&volume].info;
                let start = extent * ext_size;
                let tag = self.tag();
                self.resolve_tags.insert(tag, key);
                self.stats.resolves_sent += 1;
                out.send(Message::new(
                    self.node,
                    NodeId::MetadataCenter,
                    Body::ResolveReq {
                        tag,
                        volume,
                        start,
                        len: ext_size.min(info.size_blocks - start) as u32,
                        for_write: key.2,
                    },
                ));
            }
        }
    }

    fn tag(&mut self) -> u64 {
        let t = self.next_tag;
        self.next_tag += 1;
        t
    }

    /// Issues the data-path message for one segment. `extent_base` is the
    /// physical start of the segment's extent, when known.
    fn send_io(&mut self, id: u64, i: usize, epoch: u64, extent_base: Option<PhysicalLocation>, out: &mut Outbox) {
        let p = &self.requests[&id];
        let op = p.req.op;
        let volume = p.req.volume;
        let seg = p.segs[i].clone();
        let info = self.volumes[&volume].info;
        let ext_size = info.extent_size_blocks;
        let physical = matches!(self.routing, Routing::ServerLevel | Routing::Asymmetric);
        let needs_location = physical || self.routing == Routing::SemiSymmetric;
        if needs_location && extent_base.is_none() {
            if op == IoOp::Read {
                self.stats.zero_fills += 1;
                return self.seg_done(id, i, Ok(Vec::new()), out);
            }
            return self.seg_done(id, i, Err(IoStatus::IoFailed), out);
        }
        let (dst, lba) = if physical {
            let base = extent_base.expect("checked");
            (NodeId::Subsystem(base.subsystem.0), base.device_lba + seg.vstart % ext_size)
        } else {
            (info.data_target, seg.vstart)
        };
        let bs = self.block_size as usize;
        let off = (seg.vstart - p.req.start) as usize * bs;
        let payload = if op == IoOp::Write {
            p.req.payload[off..off + seg.len as usize * bs].to_vec()
        } else {
            Vec::new()
        };
        let origin = (op == IoOp::Write).then_some(WriteOrigin {
            host: self.host,
            request: id,
            volume,
            vlba: seg.vstart,
        });
        let tag = self.tag();
        self.io_tags.insert(tag, (id, i));
        self.stats.data_ios += 1;
        out.send(Message::new(
            self.node,
            dst,
            Body::IoReq(IoReq {
                tag,
                op,
                volume,
                epoch,
                lba,
                len: seg.len as u32,
                payload,
                origin,
            }),
        ));
    }

    fn seg_done(&mut self, id: u64, i: usize, result: Result<Vec<u8>, IoStatus>, out: &mut Outbox) {
        let bs = self.block_size as usize;
        let Some(p) = self.requests.get_mut(&id) else { return };
        match result {
            Ok(data) => {
                let seg = &p.segs[i];
                self.stats.stale_recovered += seg.stale as u64;
                if !data.is_empty() && p.req.op == IoOp::Read {
                    let off = (seg.vstart - p.req.start) as usize * bs;
                    p.data[off..off + data.len()].copy_from_slice(&data);
                }
            }
            Err(status) => {
                if p.status == IoStatus::Ok {
                    p.status = status;
                }
            }
        }
        p.remaining -= 1;
        if p.remaining == 0 {
            self.complete(id, out);
        }
    }

    fn complete(&mut self, id: u64, out: &mut Outbox) {
        let p = self.requests.remove(&id).expect("pending");
        self.active.remove(&id);
        let now = out.now();
        if p.status == IoStatus::Ok {
            self.stats.ios_completed += 1;
            self.stats.bytes_completed += p.req.len * self.block_size;
            if self.routing.uses_grants() && !p.resolved {
                self.stats.cache_hits += 1;
            }
        } else {
            self.stats.ios_failed += 1;
        }
        let keep = self.keep_data && p.req.op == IoOp::Read && p.status == IoStatus::Ok;
        self.completions.push(IoCompletion {
            request: id,
            volume: p.req.volume,
            op: p.req.op,
            start: p.req.start,
            len: p.req.len,
            status: p.status,
            submitted_at: p.submitted_at,
            completed_at: now,
            latency_us: now - p.submitted_at,
            data: if keep { p.data } else { Vec::new() },
        });
        self.unblock(out);
    }

    fn unblock(&mut self, out: &mut Outbox) {
        loop {
            let mut ready = None;
            for (pos, id) in self.blocked.iter().enumerate() {
                let req = &self.requests[id].req;
                let clash = self
                    .active
                    .iter()
                    .chain(self.blocked.iter().take(pos))
                    .any(|o| self.requests[o].req.conflicts(req));
                if !clash {
                    ready = Some(pos);
                    break;
                }
            }
            let Some(pos) = ready else { break };
            let id = self.blocked.remove(pos).expect("index valid");
            self.start(id, out);
        }
    }

    fn on_grant(&mut self, key: ResolveKey, result: Result<PathGrant, IoStatus>, out: &mut Outbox) {
        let waiters = self.waiting.remove(&key).unwrap_or_default();
        match result {
            Ok(grant) => {
                let location = grant.segments.first().and_then(|s| s.location);
                if let Some(v) = self.volumes.get_mut(&key.0) {
                    if let Some(loc) = location {
                        if grant.epoch >= v.known_epoch {
                            v.cache.insert(
                                key.1,
                                CachedGrant {
                                    epoch: grant.epoch,
                                    location: loc,
                                },
                            );
                        }
                    }
                    v.known_epoch = v.known_epoch.max(grant.epoch);
                }
                for (id, i) in waiters {
                    if self.requests.contains_key(&id) {
                        self.send_io(id, i, grant.epoch, location, out);
                    }
                }
            }
            Err(status) => {
                for (id, i) in waiters {
                    self.seg_done(id, i, Err(status), out);
                }
            }
        }
    }

    pub fn on_message(&mut self, msg: Message, out: &mut Outbox) {
        match msg.body {
            Body::ResolveRsp { tag, result, .. } => {
                if let Some(key) = self.resolve_tags.remove(&tag) {
                    self.on_grant(key, result, out);
                }
            }
            Body::Invalidate(inv) => self.handle_invalidate(inv),
            Body::IoRsp(rsp) => {
                let Some((id, i)) = self.io_tags.remove(&rsp.tag) else { return };
                match rsp.status {
                    IoStatus::Ok => self.seg_done(id, i, Ok(rsp.payload), out),
                    IoStatus::StaleEpoch => {
                        self.stats.stale_epochs += 1;
                        let p = self.requests.get_mut(&id).expect("pending");
                        p.segs[i].stale += 1;
                        let attempts = p.segs[i].attempts;
                        let volume = p.req.volume;
                        let ext = self.volumes[&volume].info.extent_size_blocks;
                        let extent = p.segs[i].vstart / ext;
                        if let Some(v) = self.volumes.get_mut(&volume) {
                            v.cache.remove(&extent);
                        }
                        if attempts >= RETRY_BUDGET {
                            self.seg_done(id, i, Err(IoStatus::IoFailed), out);
                        } else {
                            self.stats.re_resolves += 1;
                            self.dispatch(id, i, out);
                        }
                    }
                    status => self.seg_done(id, i, Err(status), out),
                }
            }
            _ => {}
        }
    }
}
