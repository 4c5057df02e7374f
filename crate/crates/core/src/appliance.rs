//! The in-band virtualization box.
//!
//! As a [`ApplianceMode::SymmetricOwner`] it owns the only metadata store
//! and every byte of every host passes through it. As a
//! [`ApplianceMode::SemiSymmetricPresenter`] it presents volumes whose maps
//! are pushed by the metadata center, and is the epoch enforcement point
//! for them.

use std::collections::{BTreeMap, VecDeque};

use thiserror::Error;

use crate::extent::{ExtentState, MappingTable, PhysicalLocation, VolumeId};
use crate::fabric::NodeId;
use crate::metadata::{MetadataStore, PendingMigration};
use crate::node::{Outbox, Timer};
use crate::wire::{Body, GrantSegment, IoOp, IoReq, IoRsp, IoStatus, Message, WriteOrigin};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum ApplianceMode {
    SymmetricOwner,
    SemiSymmetricPresenter,
}

/// Presenting appliance for a volume when `count` appliances share the load.
pub fn appliance_for(volume: VolumeId, count: u32) -> NodeId {
    NodeId::Appliance((volume.0 % count.max(1) as u64) as u32)
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ApplianceError {
    #[error("map push for {volume} at epoch {pushed} does not advance epoch {current}")]
    EpochRegression { volume: VolumeId, current: u64, pushed: u64 },
    #[error("unknown volume {0}")]
    UnknownVolume(VolumeId),
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ApplianceStats {
    /// Payload received from hosts (write data).
    pub host_bytes_in: u64,
    /// Payload returned to hosts (read data).
    pub host_bytes_out: u64,
    /// Payload sent to subsystems (write data).
    pub backend_bytes_out: u64,
    /// Payload received from subsystems (read data).
    pub backend_bytes_in: u64,
    pub ios_forwarded: u64,
    pub backend_ios: u64,
    pub stale_rejections: u64,
    pub map_pushes: u64,
    pub map_updates: u64,
    pub protocol_errors: u64,
    pub migrations_completed: u64,
    pub migrations_skipped: u64,
}

#[derive(Debug)]
struct Forward {
    host: NodeId,
    tag: u64,
    volume: VolumeId,
    epoch: u64,
    op: IoOp,
    data: Vec<u8>,
    remaining: u32,
    status: IoStatus,
}

#[derive(Debug, Clone, Copy)]
enum Backend {
    Forward { fwd: u64, offset: usize },
    CopyRead { volume: VolumeId },
    CopyWrite { volume: VolumeId },
}

#[derive(Debug, Clone, Copy)]
enum Phase {
    Draining,
    Copying,
}

#[derive(Debug, Clone, Copy)]
struct Migration {
    pending: PendingMigration,
    phase: Phase,
}

#[derive(Debug)]
pub struct Appliance {
    node: NodeId,
    mode: ApplianceMode,
    block_size: u64,
    /// Authoritative store (owner mode).
    store: Option<MetadataStore>,
    /// Pushed table copies (presenter mode).
    tables: BTreeMap<VolumeId, MappingTable>,
    /// Minimum epoch accepted per volume after a fence.
    required: BTreeMap<VolumeId, u64>,
    fence_waiters: BTreeMap<VolumeId, Vec<(NodeId, u64)>>,
    inflight: BTreeMap<VolumeId, u32>,
    forwards: BTreeMap<u64, Forward>,
    backend: BTreeMap<u64, Backend>,
    migrations: BTreeMap<VolumeId, Migration>,
    held: BTreeMap<VolumeId, VecDeque<(NodeId, IoReq)>>,
    queued_migrations: BTreeMap<VolumeId, VecDeque<u64>>,
    next_fwd: u64,
    next_tag: u64,
    stats: ApplianceStats,
}

impl Appliance {
    pub fn symmetric_owner(index: u32, store: MetadataStore, block_size: u64) -> Self {
        Self::new(index, ApplianceMode::SymmetricOwner, Some(store), block_size)
    }

    pub fn presenter(index: u32, block_size: u64) -> Self {
        Self::new(index, ApplianceMode::SemiSymmetricPresenter, None, block_size)
    }

    fn new(index: u32, mode: ApplianceMode, store: Option<MetadataStore>, block_size: u64) -> Self {
        Self {
            node: NodeId::Appliance(index),
            mode,
            block_size,
            store,
            tables: BTreeMap::new(),
            required: BTreeMap::new(),
            fence_waiters: BTreeMap::new(),
            inflight: BTreeMap::new(),
            forwards: BTreeMap::new(),
            backend: BTreeMap::new(),
            migrations: BTreeMap::new(),
            held: BTreeMap::new(),
            queued_migrations: BTreeMap::new(),
            next_fwd: 0,
            next_tag: 0,
            stats: ApplianceStats::default(),
        }
    }

    pub fn node(&self) -> NodeId {
        self.node
    }

    pub fn mode(&self) -> ApplianceMode {
        self.mode
    }

    pub fn stats(&self) -> ApplianceStats {
        self.stats
    }

    pub fn store(&self) -> Option<&MetadataStore> {
        self.store.as_ref()
    }

    pub fn store_mut(&mut self) -> Option<&mut MetadataStore> {
        self.store.as_mut()
    }

    /// The table this appliance would resolve `volume` against right now.
    pub fn table(&self, volume: VolumeId) -> Option<&MappingTable> {
        match &self.store {
            Some(s) => s.table(volume),
            None => self.tables.get(&volume),
        }
    }

    /// Replaces the local copy of `volume`'s table. Epochs must advance.
    pub fn apply_map_push(&mut self, volume: VolumeId, table: MappingTable, epoch: u64) -> Result<(), ApplianceError> {
        if let Some(cur) = self.tables.get(&volume) {
            if epoch <= cur.epoch() {
                return Err(ApplianceError::EpochRegression {
                    volume,
                    current: cur.epoch(),
                    pushed: epoch,
                });
            }
        }
        debug_assert_eq!(table.epoch(), epoch);
        self.tables.insert(volume, table);
        Ok(())
    }

    /// Installs a table at build time, before any traffic.
    pub fn install_table(&mut self, table: MappingTable) {
        self.tables.insert(table.volume(), table);
    }

    fn reply(&self, out: &mut Outbox, host: NodeId, req: &IoReq, status: IoStatus) {
        out.send(Message::new(
            self.node,
            host,
            Body::IoRsp(IoRsp {
                tag: req.tag,
                volume: req.volume,
                epoch: req.epoch,
                status,
                payload: Vec::new(),
            }),
        ));
    }

    pub fn on_message(&mut self, msg: Message, out: &mut Outbox) {
        let src = msg.src;
        match msg.body {
            Body::IoReq(req) => {
                self.stats.host_bytes_in += req.payload.len() as u64;
                self.forward_io(src, req, out);
            }
            Body::IoRsp(rsp) => self.on_backend(rsp, out),
            Body::MapPush { volume, epoch, table } => {
                self.stats.map_pushes += 1;
                if self.apply_map_push(volume, table, epoch).is_err() {
                    self.stats.protocol_errors += 1;
                }
            }
            Body::MapUpdate { volume, epoch, extents } => {
                self.stats.map_updates += 1;
                match self.tables.get_mut(&volume) {
                    Some(t) if t.epoch() == epoch => {
                        for (index, loc) in extents {
                            t.set_state(index, ExtentState::Mapped(loc));
                        }
                    }
                    // An older update is already contained in a later push.
                    Some(t) if t.epoch() > epoch => {}
                    _ => self.stats.protocol_errors += 1,
                }
            }
            Body::Fence { volume, epoch } => {
                let r = self.required.entry(volume).or_insert(0);
                *r = (*r).max(epoch);
                if self.inflight.get(&volume).copied().unwrap_or(0) == 0 {
                    out.send(Message::new(self.node, src, Body::FenceAck { volume, epoch }));
                } else {
                    self.fence_waiters.entry(volume).or_default().push((src, epoch));
                }
            }
            _ => {}
        }
    }

    /// Resolves a host I/O against the local table and fans it out to the
    /// backing subsystems; the host response is sent once all complete.
    pub fn forward_io(&mut self, host: NodeId, req: IoReq, out: &mut Outbox) {
        if self.migrations.contains_key(&req.volume) {
            self.held.entry(req.volume).or_default().push_back((host, req));
            return;
        }
        let len = req.len as u64;
        let write = req.op == IoOp::Write;
        let segments: Vec<GrantSegment> = match self.mode {
            ApplianceMode::SymmetricOwner => {
                let store = self.store.as_mut().expect("owner has a store");
                match store.handle_resolve(req.volume, req.lba, len, host, write) {
                    Ok(r) => r.grant.segments,
                    Err(e) => return self.reply(out, host, &req, e.status()),
                }
            }
            ApplianceMode::SemiSymmetricPresenter => {
                let Some(table) = self.tables.get(&req.volume) else {
                    return self.reply(out, host, &req, IoStatus::UnknownVolume);
                };
                let required = self.required.get(&req.volume).copied().unwrap_or(0);
                if req.epoch != table.epoch() || table.epoch() < required {
                    self.stats.stale_rejections += 1;
                    return self.reply(out, host, &req, IoStatus::StaleEpoch);
                }
                let segs = match table.resolve_sparse(req.lba, len) {
                    Ok(s) => s,
                    Err(_) => return self.reply(out, host, &req, IoStatus::OutOfRange),
                };
                if write && segs.iter().any(|s| s.location.is_none()) {
                    // The grant promised an allocation this copy has not seen.
                    self.stats.protocol_errors += 1;
                    return self.reply(out, host, &req, IoStatus::StaleEpoch);
                }
                segs.into_iter()
                    .map(|s| GrantSegment {
                        vstart: s.vstart,
                        len: s.len,
                        location: s.location,
                    })
                    .collect()
            }
        };
        self.stats.ios_forwarded += 1;
        let bs = self.block_size as usize;
        let fwd_id = self.next_fwd;
        self.next_fwd += 1;
        let mut fwd = Forward {
            host,
            tag: req.tag,
            volume: req.volume,
            epoch: req.epoch,
            op: req.op,
            data: if write { Vec::new() } else { vec![0u8; len as usize * bs] },
            remaining: 0,
            status: IoStatus::Ok,
        };
        for seg in segments {
            let Some(loc) = seg.location else { continue };
            let offset = (seg.vstart - req.lba) as usize * bs;
            let bytes = seg.len as usize * bs;
            let payload = if write { req.payload[offset..offset + bytes].to_vec() } else { Vec::new() };
            let origin = req.origin.map(|o| WriteOrigin {
                vlba: o.vlba + (seg.vstart - req.lba),
                ..o
            });
            self.stats.backend_bytes_out += payload.len() as u64;
            let tag = self.backend_tag(Backend::Forward { fwd: fwd_id, offset });
            fwd.remaining += 1;
            self.send_backend(out, loc, req.op, req.volume, req.epoch, seg.len, payload, origin, tag);
        }
        if fwd.remaining == 0 {
            self.finish(fwd, out);
        } else {
            *self.inflight.entry(req.volume).or_default() += 1;
            self.forwards.insert(fwd_id, fwd);
        }
    }

    fn backend_tag(&mut self, purpose: Backend) -> u64 {
        let tag = self.next_tag;
        self.next_tag += 1;
        self.backend.insert(tag, purpose);
        tag
    }

    #[allow(clippy::too_many_arguments)]
    fn send_backend(
        &mut self,
        out: &mut Outbox,
        loc: PhysicalLocation,
        op: IoOp,
        volume: VolumeId,
        epoch: u64,
        len: u64,
        payload: Vec<u8>,
        origin: Option<WriteOrigin>,
        tag: u64,
    ) {
        self.stats.backend_ios += 1;
        out.send(Message::new(
            self.node,
            NodeId::Subsystem(loc.subsystem.0),
            Body::IoReq(IoReq {
                tag,
                op,
                volume,
                epoch,
                lba: loc.device_lba,
                len: len as u32,
                payload,
                origin,
            }),
        ));
    }

    fn finish(&mut self, fwd: Forward, out: &mut Outbox) {
        let payload = if fwd.op == IoOp::Read && fwd.status == IoStatus::Ok { fwd.data } else { Vec::new() };
        self.stats.host_bytes_out += payload.len() as u64;
        out.send(Message::new(
            self.node,
            fwd.host,
            Body::IoRsp(IoRsp {
                tag: fwd.tag,
                volume: fwd.volume,
                epoch: fwd.epoch,
                status: fwd.status,
                payload,
            }),
        ));
    }

    fn on_backend(&mut self, rsp: IoRsp, out: &mut Outbox) {
        self.stats.backend_bytes_in += rsp.payload.len() as u64;
        let Some(purpose) = self.backend.remove(&rsp.tag) else {
            self.stats.protocol_errors += 1;
            return;
        };
        match purpose {
            Backend::Forward { fwd, offset } => {
                let f = self.forwards.get_mut(&fwd).expect("forward outstanding");
                if rsp.status != IoStatus::Ok {
                    if f.status == IoStatus::Ok {
                        f.status = rsp.status;
                    }
                } else if f.op == IoOp::Read {
                    f.data[offset..offset + rsp.payload.len()].copy_from_slice(&rsp.payload);
                }
                f.remaining -= 1;
                if f.remaining == 0 {
                    let f = self.forwards.remove(&fwd).expect("present");
                    let volume = f.volume;
                    self.finish(f, out);
                    let n = self.inflight.get_mut(&volume).expect("counted");
                    *n -= 1;
                    if *n == 0 {
                        self.drained(volume, out);
                    }
                }
            }
            Backend::CopyRead { volume } => {
                let m = self.migrations[&volume];
                let tag = self.backend_tag(Backend::CopyWrite { volume });
                let len = rsp.payload.len() as u64 / self.block_size;
                self.send_backend(out, m.pending.to, IoOp::Write, volume, m.pending.new_epoch, len, rsp.payload, None, tag);
            }
            Backend::CopyWrite { volume } => {
                let store = self.store.as_mut().expect("owner has a store");
                if rsp.status == IoStatus::Ok {
                    store.commit_migration(volume).expect("migration pending");
                    self.stats.migrations_completed += 1;
                } else {
                    store.abort_migration(volume).expect("migration pending");
                    self.stats.protocol_errors += 1;
                }
                self.migrations.remove(&volume);
                if let Some(held) = self.held.remove(&volume) {
                    for (host, req) in held {
                        self.forward_io(host, req, out);
                    }
                }
                let next = self.queued_migrations.get_mut(&volume).and_then(|q| q.pop_front());
                if let Some(extent) = next {
                    self.start_migration(volume, extent, out);
                }
            }
        }
    }

    fn drained(&mut self, volume: VolumeId, out: &mut Outbox) {
        if let Some(waiters) = self.fence_waiters.remove(&volume) {
            for (to, epoch) in waiters {
                out.send(Message::new(self.node, to, Body::FenceAck { volume, epoch }));
            }
        }
        if let Some(m) = self.migrations.get(&volume) {
            if matches!(m.phase, Phase::Draining) {
                self.begin_copy(volume, out);
            }
        }
    }

    /// Relocates an extent of an owned volume (symmetric mode only).
    pub fn on_timer(&mut self, timer: Timer, out: &mut Outbox) {
        let Timer::Migrate { volume, extent } = timer else {
            return;
        };
        if self.store.is_none() {
            return;
        }
        if self.migrations.contains_key(&volume) {
            self.queued_migrations.entry(volume).or_default().push_back(extent);
        } else {
            self.start_migration(volume, extent, out);
        }
    }

    fn start_migration(&mut self, volume: VolumeId, extent: u64, out: &mut Outbox) {
        let store = self.store.as_mut().expect("owner has a store");
        let Some(table) = store.table(volume) else {
            self.stats.migrations_skipped += 1;
            return;
        };
        let n = table.extent_count();
        let index = (0..n)
            .map(|k| (extent + k) % n)
            .find(|&i| table.state(i).location().is_some());
        let Some((index, to)) = index.and_then(|i| Some((i, store.pick_migration_target(volume, i)?))) else {
            self.stats.migrations_skipped += 1;
            return;
        };
        let plan = store.begin_migration(volume, index, to).expect("extent mapped and target free");
        self.migrations.insert(
            volume,
            Migration {
                pending: plan.pending,
                phase: Phase::Draining,
            },
        );
        if self.inflight.get(&volume).copied().unwrap_or(0) == 0 {
            self.begin_copy(volume, out);
        }
    }

    fn begin_copy(&mut self, volume: VolumeId, out: &mut Outbox) {
        let m = self.migrations.get_mut(&volume).expect("migration pending");
        m.phase = Phase::Copying;
        let pending = m.pending;
        let len = self.store.as_ref().expect("owner").extent_size_blocks();
        let tag = self.backend_tag(Backend::CopyRead { volume });
        self.send_backend(out, pending.from, IoOp::Read, volume, pending.new_epoch, len, Vec::new(), None, tag);
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extent::SubsystemId;

    fn table(volume: VolumeId, epoch: u64) -> MappingTable {
        let mut states = vec![ExtentState::Unallocated; 4];
        states[0] = ExtentState::Mapped(PhysicalLocation::new(SubsystemId(0), 8 * epoch));
        MappingTable::from_parts(volume, 16, 4, states, epoch).unwrap()
    }

    #[test]
    fn map_push_epochs_must_advance() {
        let v = VolumeId(3);
        let mut a = Appliance::presenter(0, 512);
        a.apply_map_push(v, table(v, 0), 0).unwrap();
        a.apply_map_push(v, table(v, 1), 1).unwrap();
        assert_eq!(
            a.apply_map_push(v, table(v, 0), 0),
            Err(ApplianceError::EpochRegression {
                volume: v,
                current: 1,
                pushed: 0
            })
        );
        assert_eq!(a.table(v).unwrap().epoch(), 1);
    }

    fn io(volume: VolumeId, epoch: u64, op: IoOp) -> IoReq {
        IoReq {
            tag: 7,
            op,
            volume,
            epoch,
            lba: 1,
            len: 2,
            payload: if op == IoOp::Write { vec![5; 1024] } else { Vec::new() },
            origin: None,
        }
    }

    #[test]
    fn presenter_rejects_stale_epochs_and_unknown_volumes() {
        let v = VolumeId(1);
        let mut a = Appliance::presenter(0, 512);
        a.install_table(table(v, 0));
        a.apply_map_push(v, table(v, 1), 1).unwrap();
        let mut out = Outbox::new(0);
        a.forward_io(NodeId::Host(0), io(v, 0, IoOp::Write), &mut out);
        a.forward_io(NodeId::Host(0), io(VolumeId(9), 0, IoOp::Read), &mut out);
        let statuses: Vec<IoStatus> = out
            .messages()
            .map(|m| match &m.body {
                Body::IoRsp(r) => r.status,
                _ => panic!(),
            })
            .collect();
        assert_eq!(statuses, vec![IoStatus::StaleEpoch, IoStatus::UnknownVolume]);
    }

    #[test]
    fn presenter_forwards_current_epoch_to_mapped_location() {
        let v = VolumeId(1);
        let mut a = Appliance::presenter(0, 512);
        a.install_table(table(v, 2));
        let mut out = Outbox::new(0);
        a.forward_io(NodeId::Host(0), io(v, 2, IoOp::Write), &mut out);
        let msgs: Vec<&Message> = out.messages().collect();
        assert_eq!(msgs.len(), 1);
        assert_eq!(msgs[0].dst, NodeId::Subsystem(0));
        let Body::IoReq(r) = &msgs[0].body else { panic!() };
        assert_eq!((r.lba, r.len, r.payload.len()), (17, 2, 1024));
        assert_eq!(a.stats().host_bytes_in, 0, "counted on message receipt only");
        assert_eq!(a.stats().backend_bytes_out, 1024);
    }

    #[test]
    fn fence_waits_for_inflight_io() {
        let v = VolumeId(1);
        let mut a = Appliance::presenter(0, 512);
        a.install_table(table(v, 0));
        let mut out = Outbox::new(0);
        a.forward_io(NodeId::Host(0), io(v, 0, IoOp::Read), &mut out);
        let Body::IoReq(back) = &out.messages().next().unwrap().body else { panic!() };
        let back_tag = back.tag;
        let mut out = Outbox::new(1);
        a.on_message(Message::new(NodeId::MetadataCenter, a.node(), Body::Fence { volume: v, epoch: 1 }), &mut out);
        assert_eq!(out.messages().count(), 0);
        let mut out = Outbox::new(2);
        a.on_message(
            Message::new(
                NodeId::Subsystem(0),
                a.node(),
                Body::IoRsp(IoRsp {
                    tag: back_tag,
                    volume: v,
                    epoch: 0,
                    status: IoStatus::Ok,
                    payload: vec![1; 1024],
                }),
            ),
            &mut out,
        );
        let kinds: Vec<&str> = out.messages().map(|m| m.body.kind().name()).collect();
        assert_eq!(kinds, vec!["IoRsp", "FenceAck"]);
        // fenced: the old epoch is refused until the new table arrives
        let mut out = Outbox::new(3);
        a.forward_io(NodeId::Host(0), io(v, 0, IoOp::Read), &mut out);
        let Body::IoRsp(r) = &out.messages().next().unwrap().body else { panic!() };
        assert_eq!(r.status, IoStatus::StaleEpoch);
    }

    #[test]
    fn volumes_spread_over_appliances() {
        let hits: Vec<NodeId> = (0..4).map(|v| appliance_for(VolumeId(v), 2)).collect();
        assert_eq!(hits, vec![NodeId::Appliance(0), NodeId::Appliance(1), NodeId::Appliance(0), NodeId::Appliance(1)]);
        assert_eq!(appliance_for(VolumeId(5), 0), NodeId::Appliance(0));
    }
}
