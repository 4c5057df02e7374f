//! Metadata store: the registry of subsystems, pools and mapping tables.
//!
//! The store is a single-writer state machine. The metadata center node
//! (see [`crate::control`]) wraps it with the message protocol; the
//! symmetric appliance, the subsystem-level embedded virtualizer and the
//! server-level host drivers each own a private instance.

use std::collections::{BTreeMap, BTreeSet};
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extent::{
    Backing, BlockAddr, ExtentError, ExtentState, MappingTable, PhysicalLocation, PlacementPolicy, PoolId,
    StripeLayout, SubsystemId, ThinPool, VolumeId,
};
use crate::fabric::NodeId;
use crate::wire::{decode_table, encode_table, DecodeError, Decoder, Encoder, GrantSegment, Invalidation, IoStatus, PathGrant};

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum VolumePolicy {
    Thin,
    FullyProvisioned,
    Striped(StripeLayout),
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum MetadataError {
    #[error("subsystem {0} already registered")]
    DuplicateId(SubsystemId),
    #[error("unknown pool {0:?}")]
    UnknownPool(PoolId),
    #[error("unknown volume {0}")]
    UnknownVolume(VolumeId),
    #[error("volume id {0} already in use")]
    DuplicateVolume(VolumeId),
    #[error("{requester} is not authorized for {volume}")]
    Unauthorized { volume: VolumeId, requester: NodeId },
    #[error("invalid layout: {0}")]
    InvalidLayout(String),
    #[error("a migration is already in progress on {0}")]
    MigrationInProgress(VolumeId),
    #[error("no migration in progress on {0}")]
    NoMigration(VolumeId),
    #[error(transparent)]
    Extent(#[from] ExtentError),
}

impl MetadataError {
    pub fn status(&self) -> IoStatus {
        match self {
            MetadataError::UnknownVolume(_) => IoStatus::UnknownVolume,
            MetadataError::Unauthorized { .. } => IoStatus::Unauthorized,
            MetadataError::Extent(ExtentError::PoolExhausted) => IoStatus::PoolExhausted,
            MetadataError::Extent(ExtentError::OutOfRange { .. }) => IoStatus::OutOfRange,
            _ => IoStatus::Invalid,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum SnapshotError {
    #[error("corrupt snapshot: {0}")]
    CorruptSnapshot(String),
}

impl From<DecodeError> for SnapshotError {
    fn from(e: DecodeError) -> Self {
        SnapshotError::CorruptSnapshot(e.to_string())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct SubsystemInfo {
    pub id: SubsystemId,
    pub capacity_blocks: u64,
}

/// Outcome of a path resolution: the grant plus any extents allocated for it.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Resolution {
    pub grant: PathGrant,
    pub allocated: Vec<(u64, PhysicalLocation)>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct PendingMigration {
    pub extent: u64,
    pub from: PhysicalLocation,
    pub to: PhysicalLocation,
    pub new_epoch: u64,
}

/// What the caller must do to start a migration safely.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MigrationPlan {
    pub volume: VolumeId,
    pub pending: PendingMigration,
    pub invalidation: Invalidation,
    /// Holders whose cached grants predate `invalidation.new_epoch`.
    pub holders: Vec<NodeId>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct MetadataStore {
    extent_size_blocks: u64,
    next_volume: u64,
    subsystems: BTreeMap<SubsystemId, SubsystemInfo>,
    pools: BTreeMap<PoolId, ThinPool>,
    tables: BTreeMap<VolumeId, MappingTable>,
    volume_pool: BTreeMap<VolumeId, PoolId>,
    access: BTreeMap<VolumeId, BTreeSet<NodeId>>,
    grants_issued: BTreeMap<(VolumeId, NodeId), u64>,
    migrations: BTreeMap<VolumeId, PendingMigration>,
}

pub const DEFAULT_POOL: PoolId = PoolId(0);

impl MetadataStore {
    /// Empty store with one round-robin pool, [`DEFAULT_POOL`].
    pub fn new(extent_size_blocks: u64) -> Self {
        Self::with_policy(extent_size_blocks, PlacementPolicy::RoundRobin)
    }

    pub fn with_policy(extent_size_blocks: u64, policy: PlacementPolicy) -> Self {
        let mut pools = BTreeMap::new();
        pools.insert(DEFAULT_POOL, ThinPool::new(DEFAULT_POOL, extent_size_blocks, policy));
        Self {
            extent_size_blocks,
            next_volume: 0,
            subsystems: BTreeMap::new(),
            pools,
            tables: BTreeMap::new(),
            volume_pool: BTreeMap::new(),
            access: BTreeMap::new(),
            grants_issued: BTreeMap::new(),
            migrations: BTreeMap::new(),
        }
    }

    pub fn extent_size_blocks(&self) -> u64 {
        self.extent_size_blocks
    }

    pub fn create_pool(&mut self, id: PoolId, policy: PlacementPolicy) -> &mut ThinPool {
        self.pools
            .entry(id)
            .or_insert_with(|| ThinPool::new(id, self.extent_size_blocks, policy))
    }

    pub fn pool(&self, id: PoolId) -> Option<&ThinPool> {
        self.pools.get(&id)
    }

    pub fn pools(&self) -> impl Iterator<Item = &ThinPool> {
        self.pools.values()
    }

    pub fn subsystems(&self) -> impl Iterator<Item = &SubsystemInfo> {
        self.subsystems.values()
    }

    pub fn register_subsystem(&mut self, id: SubsystemId, capacity_blocks: u64) -> Result<SubsystemInfo, MetadataError> {
        let slots = capacity_blocks / self.extent_size_blocks;
        self.register_subsystem_slots(DEFAULT_POOL, id, capacity_blocks, 0..slots)
    }

    /// Registers a subsystem but contributes only `slots` to `pool`.
    pub fn register_subsystem_slots(
        &mut self,
        pool: PoolId,
        id: SubsystemId,
        capacity_blocks: u64,
        slots: Range<u64>,
    ) -> Result<SubsystemInfo, MetadataError> {
        if self.subsystems.contains_key(&id) {
            return Err(MetadataError::DuplicateId(id));
        }
        let p = self.pools.get_mut(&pool).ok_or(MetadataError::UnknownPool(pool))?;
        if slots.end * self.extent_size_blocks > capacity_blocks {
            return Err(MetadataError::InvalidLayout(format!("slots {slots:?} exceed capacity of {id}")));
        }
        p.add_backing(id, slots)?;
        let info = SubsystemInfo { id, capacity_blocks };
        self.subsystems.insert(id, info);
        Ok(info)
    }

    pub fn set_next_volume_id(&mut self, next: u64) {
        self.next_volume = next;
    }

    pub fn create_virtual_volume(&mut self, pool: PoolId, size_blocks: u64, policy: VolumePolicy) -> Result<VolumeId, MetadataError> {
        let id = VolumeId(self.next_volume);
        self.create_virtual_volume_with_id(id, pool, size_blocks, policy)?;
        Ok(id)
    }

    pub fn create_virtual_volume_with_id(
        &mut self,
        id: VolumeId,
        pool_id: PoolId,
        size_blocks: u64,
        policy: VolumePolicy,
    ) -> Result<(), MetadataError> {
        if self.tables.contains_key(&id) {
            return Err(MetadataError::DuplicateVolume(id));
        }
        let pool = self.pools.get_mut(&pool_id).ok_or(MetadataError::UnknownPool(pool_id))?;
        let mut table = MappingTable::new(id, size_blocks, self.extent_size_blocks)?;
        match &policy {
            VolumePolicy::Thin => {}
            VolumePolicy::FullyProvisioned => {
                pool.thin_allocate(&mut table, 0, size_blocks)?;
            }
            VolumePolicy::Striped(layout) => {
                let ext = self.extent_size_blocks;
                if layout.stripe_unit_blocks() % ext != 0 {
                    return Err(MetadataError::InvalidLayout(format!(
                        "stripe unit {} is not a multiple of the extent size {ext}",
                        layout.stripe_unit_blocks()
                    )));
                }
                let mut need: BTreeMap<SubsystemId, u64> = BTreeMap::new();
                let placement: Vec<SubsystemId> = (0..table.extent_count())
                    .map(|i| layout.locate(i * ext).0)
                    .collect();
                for sub in &placement {
                    *need.entry(*sub).or_default() += 1;
                }
                for (sub, n) in &need {
                    if !pool.subsystems().any(|s| s == *sub) {
                        return Err(ExtentError::UnknownSubsystem(*sub).into());
                    }
                    if pool.free_on(*sub) < *n {
                        return Err(ExtentError::PoolExhausted.into());
                    }
                }
                for (i, sub) in placement.into_iter().enumerate() {
                    pool.allocate_on(&mut table, i as u64, sub)?;
                }
            }
        }
        self.tables.insert(id, table);
        self.volume_pool.insert(id, pool_id);
        self.access.entry(id).or_default();
        self.next_volume = self.next_volume.max(id.0 + 1);
        Ok(())
    }

    pub fn table(&self, volume: VolumeId) -> Option<&MappingTable> {
        self.tables.get(&volume)
    }

    pub fn tables(&self) -> impl Iterator<Item = &MappingTable> {
        self.tables.values()
    }

    pub fn volumes(&self) -> impl Iterator<Item = VolumeId> + '_ {
        self.tables.keys().copied()
    }

    pub fn pool_of(&self, volume: VolumeId) -> Option<&ThinPool> {
        self.volume_pool.get(&volume).and_then(|p| self.pools.get(p))
    }

    pub fn authorize(&mut self, volume: VolumeId, holder: NodeId) -> Result<(), MetadataError> {
        if !self.tables.contains_key(&volume) {
            return Err(MetadataError::UnknownVolume(volume));
        }
        self.access.entry(volume).or_default().insert(holder);
        Ok(())
    }

    pub fn holders(&self, volume: VolumeId) -> impl Iterator<Item = NodeId> + '_ {
        self.access.get(&volume).into_iter().flatten().copied()
    }

    pub fn is_authorized(&self, volume: VolumeId, holder: NodeId) -> bool {
        self.access.get(&volume).is_some_and(|s| s.contains(&holder))
    }

    pub fn grants_issued(&self) -> &BTreeMap<(VolumeId, NodeId), u64> {
        &self.grants_issued
    }

    pub fn pending_migration(&self, volume: VolumeId) -> Option<PendingMigration> {
        self.migrations.get(&volume).copied()
    }

    /// Resolves a virtual range for `requester`, allocating first when
    /// `for_write` is set. Unallocated read ranges come back as zero-fill
    /// segments.
    pub fn handle_resolve(
        &mut self,
        volume: VolumeId,
        start: BlockAddr,
        len: u64,
        requester: NodeId,
        for_write: bool,
    ) -> Result<Resolution, MetadataError> {
        let pool_id = *self.volume_pool.get(&volume).ok_or(MetadataError::UnknownVolume(volume))?;
        if !self.is_authorized(volume, requester) {
            return Err(MetadataError::Unauthorized { volume, requester });
        }
        let table = self.tables.get_mut(&volume).expect("volume_pool and tables agree");
        table.check_range(start, len)?;
        let allocated = if for_write {
            let pool = self.pools.get_mut(&pool_id).expect("volume pool exists");
            pool.thin_allocate(table, start, len)?
                .into_iter()
                .map(|i| (i, table.state(i).location().expect("just mapped")))
                .collect()
        } else {
            Vec::new()
        };
        let segments = table
            .resolve_sparse(start, len)?
            .into_iter()
            .map(|s| GrantSegment {
                vstart: s.vstart,
                len: s.len,
                location: s.location,
            })
            .collect();
        let epoch = table.epoch();
        self.grants_issued.insert((volume, requester), epoch);
        Ok(Resolution {
            grant: PathGrant {
                volume,
                segments,
                epoch,
                granted_to: requester,
            },
            allocated,
        })
    }

    /// Picks a relocation target for a mapped extent.
    pub fn pick_migration_target(&self, volume: VolumeId, extent: u64) -> Option<PhysicalLocation> {
        let table = self.tables.get(&volume)?;
        let current = table.extent(extent)?.state.location()?;
        self.pool_of(volume)?.pick_migration_target(current)
    }

    /// First half of a migration: validates, reserves the target slot and
    /// retires every outstanding grant on the volume.
    pub fn begin_migration(&mut self, volume: VolumeId, extent: u64, to: PhysicalLocation) -> Result<MigrationPlan, MetadataError> {
        if self.migrations.contains_key(&volume) {
            return Err(MetadataError::MigrationInProgress(volume));
        }
        let pool_id = *self.volume_pool.get(&volume).ok_or(MetadataError::UnknownVolume(volume))?;
        let table = &self.tables[&volume];
        let from = match table.extent(extent).map(|e| e.state) {
            Some(ExtentState::Mapped(loc)) => loc,
            _ => return Err(ExtentError::ExtentUnallocated { extent }.into()),
        };
        let new_epoch = table.epoch() + 1;
        self.pools.get_mut(&pool_id).expect("pool exists").reserve(to)?;
        let holders: Vec<NodeId> = self
            .grants_issued
            .range((volume, NodeId::Host(0))..)
            .take_while(|((v, _), _)| *v == volume)
            .filter(|(_, e)| **e < new_epoch)
            .map(|((_, h), _)| *h)
            .collect();
        self.grants_issued.retain(|(v, _), _| *v != volume);
        let pending = PendingMigration {
            extent,
            from,
            to,
            new_epoch,
        };
        self.migrations.insert(volume, pending);
        Ok(MigrationPlan {
            volume,
            pending,
            invalidation: Invalidation { volume, new_epoch },
            holders,
        })
    }

    /// Second half: remaps the extent (data must already be copied).
    pub fn commit_migration(&mut self, volume: VolumeId) -> Result<u64, MetadataError> {
        let pending = self.migrations.remove(&volume).ok_or(MetadataError::NoMigration(volume))?;
        let pool_id = self.volume_pool[&volume];
        let pool = self.pools.get_mut(&pool_id).expect("pool exists");
        let table = self.tables.get_mut(&volume).expect("volume exists");
        let epoch = pool.migrate_extent(table, pending.extent, pending.to)?;
        debug_assert_eq!(epoch, pending.new_epoch);
        Ok(epoch)
    }

    /// Cancels a migration. The mapping is unchanged but the epoch still
    /// advances, because fences may already have been raised to it.
    pub fn abort_migration(&mut self, volume: VolumeId) -> Result<u64, MetadataError> {
        let pending = self.migrations.remove(&volume).ok_or(MetadataError::NoMigration(volume))?;
        let pool_id = self.volume_pool[&volume];
        self.pools.get_mut(&pool_id).expect("pool exists").release_reservation(pending.to);
        let table = self.tables.get_mut(&volume).expect("volume exists");
        Ok(table.bump_epoch())
    }

    /// Remaps in one step and reports who must be invalidated.
    pub fn migrate_and_invalidate(
        &mut self,
        volume: VolumeId,
        extent: u64,
        to: PhysicalLocation,
    ) -> Result<(Invalidation, Vec<NodeId>), MetadataError> {
        let plan = self.begin_migration(volume, extent, to)?;
        if let Err(e) = self.commit_migration(volume) {
            let _ = self.abort_migration(volume);
            return Err(e);
        }
        Ok((plan.invalidation, plan.holders))
    }

    /// Store-wide invariants: pool conservation and exclusivity, registered
    /// subsystems only, grant epochs never ahead of their tables.
    pub fn verify(&self) -> Result<(), String> {
        for (pid, pool) in &self.pools {
            let tables = self
                .volume_pool
                .iter()
                .filter(|(_, p)| *p == pid)
                .map(|(v, _)| &self.tables[v]);
            pool.verify(tables)?;
        }
        for table in self.tables.values() {
            for (_, loc) in table.mapped() {
                if !self.subsystems.contains_key(&loc.subsystem) {
                    return Err(format!("{} maps onto unregistered {}", table.volume(), loc.subsystem));
                }
            }
        }
        for ((vol, holder), epoch) in &self.grants_issued {
            let cur = self.tables.get(vol).map_or(0, |t| t.epoch());
            if *epoch > cur {
                return Err(format!("grant to {holder} for {vol} at epoch {epoch} > table epoch {cur}"));
            }
        }
        Ok(())
    }

    pub fn snapshot(&self) -> Vec<u8> {
        let mut e = Encoder::new();
        e.u64(self.extent_size_blocks).u64(self.next_volume);
        e.u32(self.subsystems.len() as u32);
        for info in self.subsystems.values() {
            e.u32(info.id.0).u64(info.capacity_blocks);
        }
        e.u32(self.pools.len() as u32);
        for pool in self.pools.values() {
            e.u32(pool.id().0)
                .u8(match pool.policy() {
                    PlacementPolicy::RoundRobin => 0,
                    PlacementPolicy::LeastLoaded => 1,
                })
                .u64(pool.cursor);
            e.u32(pool.backing.len() as u32);
            for (sub, b) in &pool.backing {
                e.u32(sub.0).u64(b.slots.start).u64(b.slots.end).u32(b.free.len() as u32);
                for slot in &b.free {
                    e.u64(*slot);
                }
            }
            e.u32(pool.reserved.len() as u32);
            for (sub, slot) in &pool.reserved {
                e.u32(sub.0).u64(*slot);
            }
        }
        e.u32(self.tables.len() as u32);
        for (vol, table) in &self.tables {
            e.u32(self.volume_pool[vol].0);
            encode_table(&mut e, table);
        }
        e.u32(self.access.len() as u32);
        for (vol, holders) in &self.access {
            e.u64(vol.0).u32(holders.len() as u32);
            for h in holders {
                e.u32(h.code());
            }
        }
        e.u32(self.grants_issued.len() as u32);
        for ((vol, holder), epoch) in &self.grants_issued {
            e.u64(vol.0).u32(holder.code()).u64(*epoch);
        }
        e.u32(self.migrations.len() as u32);
        for (vol, m) in &self.migrations {
            e.u64(vol.0).u64(m.extent);
            e.u32(m.from.subsystem.0).u64(m.from.device_lba);
            e.u32(m.to.subsystem.0).u64(m.to.device_lba);
            e.u64(m.new_epoch);
        }
        let body = e.finish();
        let mut out = Encoder::new();
        out.bytes(SNAPSHOT_MAGIC).u32(SNAPSHOT_VERSION).u64(body.len() as u64).bytes(&body);
        let mut bytes = out.finish();
        let crc = crc32fast::hash(&bytes);
        bytes.extend_from_slice(&crc.to_le_bytes());
        bytes
    }

    pub fn restore(bytes: &[u8]) -> Result<Self, SnapshotError> {
        let corrupt = |m: &str| SnapshotError::CorruptSnapshot(m.to_string());
        if bytes.len() < 4 {
            return Err(corrupt("too short"));
        }
        let (content, tail) = bytes.split_at(bytes.len() - 4);
        let stored = u32::from_le_bytes(tail.try_into().expect("4 bytes"));
        if crc32fast::hash(content) != stored {
            return Err(corrupt("checksum mismatch"));
        }
        let mut d = Decoder::new(content);
        if d.take(SNAPSHOT_MAGIC.len())? != SNAPSHOT_MAGIC {
            return Err(corrupt("bad magic"));
        }
        if d.u32()? != SNAPSHOT_VERSION {
            return Err(corrupt("unsupported version"));
        }
        let body_len = d.u64()?;
        if body_len != d.remaining() as u64 {
            return Err(corrupt("length prefix disagrees with content"));
        }
        let ext = d.u64()?;
        if ext == 0 {
            return Err(corrupt("zero extent size"));
        }
        let mut store = MetadataStore::new(ext);
        store.pools.clear();
        store.next_volume = d.u64()?;
        for _ in 0..d.u32()? {
            let id = SubsystemId(d.u32()?);
            let capacity_blocks = d.u64()?;
            store.subsystems.insert(id, SubsystemInfo { id, capacity_blocks });
        }
        for _ in 0..d.u32()? {
            let id = PoolId(d.u32()?);
            let policy = match d.u8()? {
                0 => PlacementPolicy::RoundRobin,
                1 => PlacementPolicy::LeastLoaded,
                _ => return Err(corrupt("placement policy")),
            };
            let cursor = d.u64()?;
            let mut backing = BTreeMap::new();
            for _ in 0..d.u32()? {
                let sub = SubsystemId(d.u32()?);
                let slots = d.u64()?..d.u64()?;
                let mut free = BTreeSet::new();
                for _ in 0..d.u32()? {
                    let slot = d.u64()?;
                    if !slots.contains(&slot) {
                        return Err(corrupt("free slot outside backing range"));
                    }
                    free.insert(slot);
                }
                backing.insert(sub, Backing { slots, free });
            }
            let mut reserved = BTreeSet::new();
            for _ in 0..d.u32()? {
                reserved.insert((SubsystemId(d.u32()?), d.u64()?));
            }
            store
                .pools
                .insert(id, ThinPool::restore_parts(id, ext, policy, cursor, backing, reserved));
        }
        for _ in 0..d.u32()? {
            let pool_id = PoolId(d.u32()?);
            let table = decode_table(&mut d)?;
            let pool = store.pools.get_mut(&pool_id).ok_or_else(|| corrupt("table references unknown pool"))?;
            pool.adopt(&table).map_err(|e| corrupt(&e.to_string()))?;
            store.volume_pool.insert(table.volume(), pool_id);
            store.tables.insert(table.volume(), table);
        }
        for _ in 0..d.u32()? {
            let vol = VolumeId(d.u64()?);
            let mut set = BTreeSet::new();
            for _ in 0..d.u32()? {
                set.insert(NodeId::from_code(d.u32()?).ok_or_else(|| corrupt("node id"))?);
            }
            store.access.insert(vol, set);
        }
        for _ in 0..d.u32()? {
            let vol = VolumeId(d.u64()?);
            let holder = NodeId::from_code(d.u32()?).ok_or_else(|| corrupt("node id"))?;
            store.grants_issued.insert((vol, holder), d.u64()?);
        }
        for _ in 0..d.u32()? {
            let vol = VolumeId(d.u64()?);
            let extent = d.u64()?;
            let from = PhysicalLocation::new(SubsystemId(d.u32()?), d.u64()?);
            let to = PhysicalLocation::new(SubsystemId(d.u32()?), d.u64()?);
            let new_epoch = d.u64()?;
            store.migrations.insert(
                vol,
                PendingMigration {
                    extent,
                    from,
                    to,
                    new_epoch,
                },
            );
        }
        if d.remaining() != 0 {
            return Err(corrupt("trailing bytes"));
        }
        store.verify().map_err(|e| corrupt(&e))?;
        Ok(store)
    }
}

const SNAPSHOT_MAGIC: &[u8; 8] = b"SANMETA\0";
const SNAPSHOT_VERSION: u32 = 1;
