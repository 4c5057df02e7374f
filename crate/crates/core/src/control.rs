//! The metadata center node: path resolution, allocation-time zoning and
//! the fenced extent-migration protocol.
//!
//! Migration runs in four steps per volume:
//!
//! 1. new resolutions for the volume are queued and every holder of a
//!    cached grant is sent an `Invalidate`;
//! 2. the data-path enforcement point is fenced at the new epoch (the source
//!    subsystem's shim for direct access, the presenting appliance
//!    otherwise) and acknowledges once older I/O can no longer land;
//! 3. the source subsystem copies the extent straight to the target;
//! 4. the mapping is committed, the target range re-zoned to the data
//!    initiator, appliances receive the new table and queued work resumes.

use std::collections::{BTreeMap, VecDeque};

use crate::appliance::appliance_for;
use crate::extent::{PhysicalLocation, VolumeId};
use crate::fabric::NodeId;
use crate::metadata::{MetadataStore, PendingMigration};
use crate::node::{Outbox, Timer};
use crate::wire::{Body, IoStatus, Message};

/// Where hosts send block I/O once they hold a grant.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum DataPath {
    /// Hosts talk to subsystems directly.
    Direct,
    /// Hosts talk to the presenting appliance for the volume.
    Presenter { appliance_count: u32 },
}

#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct ControlStats {
    pub resolves: u64,
    pub resolve_errors: u64,
    pub queued_resolves: u64,
    pub invalidations_sent: u64,
    pub fences_sent: u64,
    pub zones_sent: u64,
    pub map_pushes: u64,
    pub map_updates: u64,
    pub migrations_started: u64,
    pub migrations_completed: u64,
    pub migrations_aborted: u64,
    pub migrations_skipped: u64,
}

#[derive(Debug, Clone, Copy)]
struct Active {
    pending: PendingMigration,
    acks_outstanding: u32,
}

#[derive(Debug)]
pub struct MetadataCenter {
    store: MetadataStore,
    path: DataPath,
    active: BTreeMap<VolumeId, Active>,
    queued_resolves: BTreeMap<VolumeId, VecDeque<Message>>,
    queued_migrations: BTreeMap<VolumeId, VecDeque<u64>>,
    stats: ControlStats,
}

const ME: NodeId = NodeId::MetadataCenter;

impl MetadataCenter {
    pub fn new(store: MetadataStore, path: DataPath) -> Self {
        Self {
            store,
            path,
            active: BTreeMap::new(),
            queued_resolves: BTreeMap::new(),
            queued_migrations: BTreeMap::new(),
            stats: ControlStats::default(),
        }
    }

    pub fn store(&self) -> &MetadataStore {
        &self.store
    }

    pub fn store_mut(&mut self) -> &mut MetadataStore {
        &mut self.store
    }

    /// Swaps in a restored store. Only valid while no migration is running.
    pub fn replace_store(&mut self, store: MetadataStore) {
        assert!(self.active.is_empty(), "cannot replace the store mid-migration");
        self.store = store;
    }

    pub fn stats(&self) -> ControlStats {
        self.stats
    }

    pub fn migrating(&self) -> bool {
        !self.active.is_empty()
    }

    /// The node that performs block I/O against `volume`'s extents.
    fn data_initiator(&self, volume: VolumeId, requester: Option<NodeId>) -> Option<NodeId> {
        match self.path {
            DataPath::Presenter { appliance_count } => Some(appliance_for(volume, appliance_count)),
            DataPath::Direct => requester.or_else(|| self.store.holders(volume).next()),
        }
    }

    fn zone(&mut self, out: &mut Outbox, loc: PhysicalLocation, initiator: NodeId) {
        self.stats.zones_sent += 1;
        out.send(Message::new(
            ME,
            NodeId::Subsystem(loc.subsystem.0),
            Body::Zone {
                start: loc.device_lba,
                len: self.store.extent_size_blocks() as u32,
                initiator,
            },
        ));
    }

    pub fn on_message(&mut self, msg: Message, out: &mut Outbox) {
        match msg.body {
            Body::ResolveReq { volume, .. } if self.active.contains_key(&volume) => {
                self.stats.queued_resolves += 1;
                self.queued_resolves.entry(volume).or_default().push_back(msg);
            }
            Body::ResolveReq {
                tag,
                volume,
                start,
                len,
                for_write,
            } => self.resolve(msg.src, tag, volume, start, len as u64, for_write, out),
            Body::FenceAck { volume, epoch } => self.fence_ack(volume, epoch, out),
            Body::CopyDone { volume, epoch, status } => self.copy_done(volume, epoch, status, out),
            _ => {}
        }
    }

    #[allow(clippy::too_many_arguments)]
    fn resolve(&mut self, src: NodeId, tag: u64, volume: VolumeId, start: u64, len: u64, for_write: bool, out: &mut Outbox) {
        self.stats.resolves += 1;
        let result = match self.store.handle_resolve(volume, start, len, src, for_write) {
            Ok(res) => {
                if !res.allocated.is_empty() {
                    let initiator = self.data_initiator(volume, Some(src)).expect("requester known");
                    for (_, loc) in &res.allocated {
                        self.zone(out, *loc, initiator);
                    }
                    if let DataPath::Presenter { .. } = self.path {
                        self.stats.map_updates += 1;
                        out.send(Message::new(
                            ME,
                            initiator,
                            Body::MapUpdate {
                                volume,
                                epoch: res.grant.epoch,
                                extents: res.allocated.clone(),
                            },
                        ));
                    }
                }
                Ok(res.grant)
            }
            Err(e) => {
                self.stats.resolve_errors += 1;
                Err(e.status())
            }
        };
        out.send(Message::new(ME, src, Body::ResolveRsp { tag, volume, result }));
    }

    /// Starts relocating `extent` of `volume`, or the next mapped extent after
    /// it when that one is unallocated.
    pub fn on_timer(&mut self, timer: Timer, out: &mut Outbox) {
        if let Timer::Migrate { volume, extent } = timer {
            if self.active.contains_key(&volume) {
                self.queued_migrations.entry(volume).or_default().push_back(extent);
            } else {
                self.start_migration(volume, extent, out);
            }
        }
    }

    fn start_migration(&mut self, volume: VolumeId, extent: u64, out: &mut Outbox) {
        let Some(table) = self.store.table(volume) else {
            self.stats.migrations_skipped += 1;
            return;
        };
        let n = table.extent_count();
        let index = (0..n)
            .map(|k| (extent + k) % n)
            .find(|&i| table.state(i).location().is_some());
        let Some((index, to)) = index.and_then(|i| Some((i, self.store.pick_migration_target(volume, i)?))) else {
            self.stats.migrations_skipped += 1;
            return;
        };
        let plan = self
            .store
            .begin_migration(volume, index, to)
            .expect("extent mapped and target free");
        self.stats.migrations_started += 1;
        for holder in &plan.holders {
            if matches!(holder, NodeId::Host(_)) {
                self.stats.invalidations_sent += 1;
                out.send(Message::new(ME, *holder, Body::Invalidate(plan.invalidation)));
            }
        }
        let fence_target = match self.path {
            DataPath::Direct => NodeId::Subsystem(plan.pending.from.subsystem.0),
            DataPath::Presenter { appliance_count } => appliance_for(volume, appliance_count),
        };
        self.stats.fences_sent += 1;
        out.send(Message::new(
            ME,
            fence_target,
            Body::Fence {
                volume,
                epoch: plan.pending.new_epoch,
            },
        ));
        self.active.insert(
            volume,
            Active {
                pending: plan.pending,
                acks_outstanding: 1,
            },
        );
    }

    fn fence_ack(&mut self, volume: VolumeId, epoch: u64, out: &mut Outbox) {
        let Some(active) = self.active.get_mut(&volume) else {
            return;
        };
        if active.pending.new_epoch != epoch || active.acks_outstanding == 0 {
            return;
        }
        active.acks_outstanding -= 1;
        if active.acks_outstanding > 0 {
            return;
        }
        let p = active.pending;
        if p.to.subsystem != p.from.subsystem {
            self.zone(out, p.to, NodeId::Subsystem(p.from.subsystem.0));
        }
        out.send(Message::new(
            ME,
            NodeId::Subsystem(p.from.subsystem.0),
            Body::MigrateExtent {
                volume,
                epoch: p.new_epoch,
                from: p.from,
                to: p.to,
                len: self.store.extent_size_blocks() as u32,
            },
        ));
    }

    fn copy_done(&mut self, volume: VolumeId, epoch: u64, status: IoStatus, out: &mut Outbox) {
        match self.active.get(&volume) {
            Some(a) if a.pending.new_epoch == epoch && a.acks_outstanding == 0 => {}
            _ => return,
        }
        let active = self.active.remove(&volume).expect("checked");
        if status == IoStatus::Ok {
            self.store.commit_migration(volume).expect("migration pending");
            self.stats.migrations_completed += 1;
            if let Some(initiator) = self.data_initiator(volume, None) {
                self.zone(out, active.pending.to, initiator);
            }
        } else {
            self.store.abort_migration(volume).expect("migration pending");
            self.stats.migrations_aborted += 1;
        }
        if let DataPath::Presenter { appliance_count } = self.path {
            let table = self.store.table(volume).expect("volume exists").clone();
            self.stats.map_pushes += 1;
            out.send(Message::new(
                ME,
                appliance_for(volume, appliance_count),
                Body::MapPush {
                    volume,
                    epoch: table.epoch(),
                    table,
                },
            ));
        }
        if let Some(queued) = self.queued_resolves.remove(&volume) {
            for msg in queued {
                self.on_message(msg, out);
            }
        }
        let next = self.queued_migrations.get_mut(&volume).and_then(|q| q.pop_front());
        if let Some(extent) = next {
            self.start_migration(volume, extent, out);
        }
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::extent::SubsystemId;
    use crate::metadata::{VolumePolicy, DEFAULT_POOL};
    use crate::wire::Invalidation;

    const H: NodeId = NodeId::Host(0);

    fn center(path: DataPath) -> (MetadataCenter, VolumeId) {
        let mut s = MetadataStore::new(4);
        s.register_subsystem(SubsystemId(0), 40).unwrap();
        s.register_subsystem(SubsystemId(1), 40).unwrap();
        let v = s.create_virtual_volume(DEFAULT_POOL, 16, VolumePolicy::Thin).unwrap();
        s.authorize(v, H).unwrap();
        (MetadataCenter::new(s, path), v)
    }

    fn resolve(volume: VolumeId, start: u64, len: u32, for_write: bool) -> Message {
        Message::new(
            H,
            ME,
            Body::ResolveReq {
                tag: 1,
                volume,
                start,
                len,
                for_write,
            },
        )
    }

    fn kinds(out: &Outbox) -> Vec<(&'static str, NodeId)> {
        out.messages().map(|m| (m.body.kind().name(), m.dst)).collect()
    }

    #[test]
    fn write_resolve_zones_before_responding() {
        let (mut mc, v) = center(DataPath::Direct);
        let mut out = Outbox::new(0);
        mc.on_message(resolve(v, 0, 4, true), &mut out);
        assert_eq!(kinds(&out), vec![("Zone", NodeId::Subsystem(0)), ("ResolveRsp", H)]);
        let Body::Zone { initiator, .. } = out.messages().next().unwrap().body else { panic!() };
        assert_eq!(initiator, H);
    }

    #[test]
    fn presenter_gets_map_update_and_zone() {
        let (mut mc, v) = center(DataPath::Presenter { appliance_count: 2 });
        let mut out = Outbox::new(0);
        mc.on_message(resolve(v, 0, 8, true), &mut out);
        let app = NodeId::Appliance(0);
        assert_eq!(
            kinds(&out),
            vec![
                ("Zone", NodeId::Subsystem(0)),
                ("Zone", NodeId::Subsystem(1)),
                ("MapUpdate", app),
                ("ResolveRsp", H)
            ]
        );
    }

    #[test]
    fn migration_protocol_sequence() {
        let (mut mc, v) = center(DataPath::Direct);
        let mut out = Outbox::new(0);
        mc.on_message(resolve(v, 0, 4, true), &mut out);
        let mut out = Outbox::new(10);
        mc.on_timer(Timer::Migrate { volume: v, extent: 0 }, &mut out);
        assert_eq!(kinds(&out), vec![("Invalidate", H), ("Fence", NodeId::Subsystem(0))]);
        let Body::Invalidate(inv) = out.messages().next().unwrap().body else { panic!() };
        assert_eq!(inv, Invalidation { volume: v, new_epoch: 1 });

        // resolves queue while the migration is in flight
        let mut out = Outbox::new(11);
        mc.on_message(resolve(v, 0, 4, false), &mut out);
        assert!(kinds(&out).is_empty());

        let mut out = Outbox::new(12);
        mc.on_message(Message::new(NodeId::Subsystem(0), ME, Body::FenceAck { volume: v, epoch: 1 }), &mut out);
        assert_eq!(kinds(&out), vec![("Zone", NodeId::Subsystem(1)), ("MigrateExtent", NodeId::Subsystem(0))]);

        let mut out = Outbox::new(20);
        mc.on_message(
            Message::new(
                NodeId::Subsystem(0),
                ME,
                Body::CopyDone {
                    volume: v,
                    epoch: 1,
                    status: IoStatus::Ok,
                },
            ),
            &mut out,
        );
        assert_eq!(kinds(&out), vec![("Zone", NodeId::Subsystem(1)), ("ResolveRsp", H)]);
        let Body::ResolveRsp { result: Ok(g), .. } = &out.messages().last().unwrap().body else { panic!() };
        assert_eq!(g.epoch, 1);
        assert_eq!(g.segments[0].location.unwrap().subsystem, SubsystemId(1));
        mc.store().verify().unwrap();
    }

    #[test]
    fn migration_without_holders_sends_no_invalidations() {
        let (mut mc, _) = center(DataPath::Presenter { appliance_count: 1 });
        let v = mc
            .store_mut()
            .create_virtual_volume(DEFAULT_POOL, 8, VolumePolicy::FullyProvisioned)
            .unwrap();
        let mut out = Outbox::new(1);
        mc.on_timer(Timer::Migrate { volume: v, extent: 0 }, &mut out);
        let mut out = Outbox::new(2);
        mc.on_timer(Timer::Migrate { volume: v, extent: 0 }, &mut out);
        assert!(kinds(&out).is_empty(), "second migration queues behind the first");
        mc.on_message(Message::new(NodeId::Appliance(0), ME, Body::FenceAck { volume: v, epoch: 1 }), &mut out);
        let mut out = Outbox::new(3);
        mc.on_message(
            Message::new(
                NodeId::Subsystem(0),
                ME,
                Body::CopyDone {
                    volume: v,
                    epoch: 1,
                    status: IoStatus::Ok,
                },
            ),
            &mut out,
        );
        let k = kinds(&out);
        assert!(k.contains(&("MapPush", NodeId::Appliance(0))));
        assert!(!k.iter().any(|(n, _)| *n == "Invalidate"));
        assert_eq!(k.last().unwrap().0, "Fence");
        assert_eq!(mc.stats().invalidations_sent, 0);
    }

    #[test]
    fn unallocated_volume_migration_is_skipped() {
        let (mut mc, v) = center(DataPath::Direct);
        let mut out = Outbox::new(0);
        mc.on_timer(Timer::Migrate { volume: v, extent: 2 }, &mut out);
        assert!(kinds(&out).is_empty());
        assert_eq!(mc.stats().migrations_skipped, 1);
    }
}
