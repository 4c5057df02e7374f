//! Extent mapping mathematics.
//!
//! A virtual volume is a run of fixed-size extents. Each extent is either
//! unallocated or mapped to an extent-aligned slot on one backing
//! subsystem. Thin pools hand out slots on first write, stripe layouts
//! translate virtual block addresses round-robin across devices, and every
//! remap bumps the owning table's epoch.
//!
//! Nothing in here performs I/O or looks at a clock.

use std::collections::{BTreeMap, BTreeSet};
use std::fmt;
use std::ops::Range;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Block address in units of blocks.
pub type BlockAddr = u64;

/// Default extent size: 1024 blocks (4 MiB at 4 KiB blocks).
pub const DEFAULT_EXTENT_SIZE_BLOCKS: u64 = 1024;

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct SubsystemId(pub u32);

impl fmt::Display for SubsystemId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "sub{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct VolumeId(pub u64);

impl fmt::Display for VolumeId {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "vol{}", self.0)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PoolId(pub u32);

/// A block address on a specific backing subsystem.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub struct PhysicalLocation {
    pub subsystem: SubsystemId,
    pub device_lba: BlockAddr,
}

impl PhysicalLocation {
    pub fn new(subsystem: SubsystemId, device_lba: BlockAddr) -> Self {
        Self {
            subsystem,
            device_lba,
        }
    }

    pub fn offset(self, blocks: u64) -> Self {
        Self {
            subsystem: self.subsystem,
            device_lba: self.device_lba + blocks,
        }
    }
}

impl fmt::Display for PhysicalLocation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}:{}", self.subsystem, self.device_lba)
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ExtentState {
    Unallocated,
    Mapped(PhysicalLocation),
}

impl ExtentState {
    pub fn location(self) -> Option<PhysicalLocation> {
        match self {
            ExtentState::Unallocated => None,
            ExtentState::Mapped(loc) => Some(loc),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Extent {
    pub index: u64,
    pub state: ExtentState,
}

/// One contiguous piece of a resolved virtual range.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Segment {
    pub vstart: BlockAddr,
    pub location: PhysicalLocation,
    pub len: u64,
}

/// Like [`Segment`] but tolerates unallocated extents (`location == None`).
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct SparseSegment {
    pub vstart: BlockAddr,
    pub location: Option<PhysicalLocation>,
    pub len: u64,
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum ExtentError {
    #[error("range {start}+{len} is beyond volume end {size}")]
    OutOfRange { start: u64, len: u64, size: u64 },
    #[error("extent {extent} is unallocated")]
    UnallocatedRead { extent: u64 },
    #[error("pool exhausted: no free backing extent")]
    PoolExhausted,
    #[error("extent {extent} is not mapped")]
    ExtentUnallocated { extent: u64 },
    #[error("location {location} overlaps an extent already in use")]
    OverlapViolation { location: PhysicalLocation },
    #[error("location {location} is not aligned to the extent size")]
    Misaligned { location: PhysicalLocation },
    #[error("subsystem {0} is not registered in this pool")]
    UnknownSubsystem(SubsystemId),
    #[error("subsystem {0} is already registered")]
    DuplicateSubsystem(SubsystemId),
    #[error("invalid geometry: {0}")]
    InvalidGeometry(String),
}

/// Epoch-versioned virtual extent map of one volume.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MappingTable {
    volume: VolumeId,
    size_blocks: u64,
    extent_size_blocks: u64,
    extents: Vec<ExtentState>,
    epoch: u64,
}

impl MappingTable {
    pub fn new(volume: VolumeId, size_blocks: u64, extent_size_blocks: u64) -> Result<Self, ExtentError> {
        if extent_size_blocks == 0 {
            return Err(ExtentError::InvalidGeometry("extent size must be at least one block".into()));
        }
        if size_blocks == 0 {
            return Err(ExtentError::InvalidGeometry("volume size must be at least one block".into()));
        }
        let count = size_blocks.div_ceil(extent_size_blocks);
        Ok(Self {
            volume,
            size_blocks,
            extent_size_blocks,
            extents: vec![ExtentState::Unallocated; count as usize],
            epoch: 0,
        })
    }

    /// Rebuilds a table from raw parts; used by the snapshot and wire decoders.
    pub fn from_parts(
        volume: VolumeId,
        size_blocks: u64,
        extent_size_blocks: u64,
        extents: Vec<ExtentState>,
        epoch: u64,
    ) -> Result<Self, ExtentError> {
        let mut table = Self::new(volume, size_blocks, extent_size_blocks)?;
        if extents.len() != table.extents.len() {
            return Err(ExtentError::InvalidGeometry(format!(
                "expected {} extents, got {}",
                table.extents.len(),
                extents.len()
            )));
        }
        table.extents = extents;
        table.epoch = epoch;
        Ok(table)
    }

    pub fn volume(&self) -> VolumeId {
        self.volume
    }

    pub fn size_blocks(&self) -> u64 {
        self.size_blocks
    }

    pub fn extent_size_blocks(&self) -> u64 {
        self.extent_size_blocks
    }

    pub fn epoch(&self) -> u64 {
        self.epoch
    }

    pub fn extent_count(&self) -> u64 {
        self.extents.len() as u64
    }

    pub fn extent(&self, index: u64) -> Option<Extent> {
        self.extents.get(index as usize).map(|&state| Extent { index, state })
    }

    pub fn state(&self, index: u64) -> ExtentState {
        self.extents[index as usize]
    }

    pub fn extents(&self) -> impl Iterator<Item = Extent> + '_ {
        self.extents
            .iter()
            .enumerate()
            .map(|(i, &state)| Extent { index: i as u64, state })
    }

    pub fn mapped(&self) -> impl Iterator<Item = (u64, PhysicalLocation)> + '_ {
        self.extents
            .iter()
            .enumerate()
            .filter_map(|(i, s)| s.location().map(|loc| (i as u64, loc)))
    }

    pub fn mapped_count(&self) -> u64 {
        self.extents.iter().filter(|s| s.location().is_some()).count() as u64
    }

    pub fn extent_of(&self, vlba: BlockAddr) -> u64 {
        vlba / self.extent_size_blocks
    }

    pub fn check_range(&self, start: BlockAddr, len: u64) -> Result<(), ExtentError> {
        match start.checked_add(len) {
            Some(end) if end <= self.size_blocks => Ok(()),
            _ => Err(ExtentError::OutOfRange {
                start,
                len,
                size: self.size_blocks,
            }),
        }
    }

    /// Extent indices touched by `[start, start + len)`.
    pub fn touched(&self, start: BlockAddr, len: u64) -> Range<u64> {
        if len == 0 {
            return 0..0;
        }
        self.extent_of(start)..self.extent_of(start + len - 1) + 1
    }

    /// Translates a virtual range into physical segments, one per extent touched.
    pub fn resolve(&self, start: BlockAddr, len: u64) -> Result<Vec<Segment>, ExtentError> {
        self.resolve_sparse(start, len)?
            .into_iter()
            .map(|s| match s.location {
                Some(location) => Ok(Segment {
                    vstart: s.vstart,
                    location,
                    len: s.len,
                }),
                None => Err(ExtentError::UnallocatedRead {
                    extent: self.extent_of(s.vstart),
                }),
            })
            .collect()
    }

    /// Same walk as [`resolve`](Self::resolve) but reports holes instead of failing.
    pub fn resolve_sparse(&self, start: BlockAddr, len: u64) -> Result<Vec<SparseSegment>, ExtentError> {
        self.check_range(start, len)?;
        let end = start + len;
        let mut out = Vec::new();
        let mut pos = start;
        while pos < end {
            let index = pos / self.extent_size_blocks;
            let within = pos % self.extent_size_blocks;
            let n = (self.extent_size_blocks - within).min(end - pos);
            out.push(SparseSegment {
                vstart: pos,
                location: self.extents[index as usize].location().map(|l| l.offset(within)),
                len: n,
            });
            pos += n;
        }
        Ok(out)
    }

    pub(crate) fn set_state(&mut self, index: u64, state: ExtentState) {
        self.extents[index as usize] = state;
    }

    pub(crate) fn bump_epoch(&mut self) -> u64 {
        self.epoch += 1;
        self.epoch
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum PlacementPolicy {
    #[default]
    RoundRobin,
    LeastLoaded,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub(crate) struct Backing {
    pub(crate) slots: Range<u64>,
    pub(crate) free: BTreeSet<u64>,
}

/// A pool of extent slots drawn from one or more subsystems.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct ThinPool {
    id: PoolId,
    extent_size_blocks: u64,
    policy: PlacementPolicy,
    pub(crate) backing: BTreeMap<SubsystemId, Backing>,
    pub(crate) owners: BTreeMap<(SubsystemId, u64), (VolumeId, u64)>,
    pub(crate) reserved: BTreeSet<(SubsystemId, u64)>,
    pub(crate) cursor: u64,
}

impl ThinPool {
    pub fn new(id: PoolId, extent_size_blocks: u64, policy: PlacementPolicy) -> Self {
        assert!(extent_size_blocks > 0, "extent size must be positive");
        Self {
            id,
            extent_size_blocks,
            policy,
            backing: BTreeMap::new(),
            owners: BTreeMap::new(),
            reserved: BTreeSet::new(),
            cursor: 0,
        }
    }

    pub fn id(&self) -> PoolId {
        self.id
    }

    pub fn policy(&self) -> PlacementPolicy {
        self.policy
    }

    pub fn set_policy(&mut self, policy: PlacementPolicy) {
        self.policy = policy;
    }

    pub fn extent_size_blocks(&self) -> u64 {
        self.extent_size_blocks
    }

    /// Adds every whole extent of a subsystem to the free list.
    pub fn add_subsystem(&mut self, subsystem: SubsystemId, capacity_blocks: u64) -> Result<(), ExtentError> {
        let slots = capacity_blocks / self.extent_size_blocks;
        self.add_backing(subsystem, 0..slots)
    }

    /// Adds a slot range of a subsystem; slot `i` starts at block `i * extent_size`.
    pub fn add_backing(&mut self, subsystem: SubsystemId, slots: Range<u64>) -> Result<(), ExtentError> {
        if self.backing.contains_key(&subsystem) {
            return Err(ExtentError::DuplicateSubsystem(subsystem));
        }
        self.backing.insert(
            subsystem,
            Backing {
                free: slots.clone().collect(),
                slots,
            },
        );
        Ok(())
    }

    pub fn subsystems(&self) -> impl Iterator<Item = SubsystemId> + '_ {
        self.backing.keys().copied()
    }

    pub fn capacity_extents(&self) -> u64 {
        self.backing.values().map(|b| b.slots.end - b.slots.start).sum()
    }

    pub fn allocated_extents(&self) -> u64 {
        self.owners.len() as u64
    }

    pub fn reserved_extents(&self) -> u64 {
        self.reserved.len() as u64
    }

    pub fn free_extents(&self) -> u64 {
        self.backing.values().map(|b| b.free.len() as u64).sum()
    }

    pub fn free_on(&self, subsystem: SubsystemId) -> u64 {
        self.backing.get(&subsystem).map_or(0, |b| b.free.len() as u64)
    }

    pub fn allocated_on(&self, subsystem: SubsystemId) -> u64 {
        self.owners.keys().filter(|(s, _)| *s == subsystem).count() as u64
    }

    /// `allocated / capacity`; an empty pool reports 0.
    pub fn utilization(&self) -> f64 {
        let cap = self.capacity_extents();
        if cap == 0 {
            0.0
        } else {
            self.allocated_extents() as f64 / cap as f64
        }
    }

    /// Owner of the slot holding `loc`, if any.
    pub fn owner_of(&self, loc: PhysicalLocation) -> Option<(VolumeId, u64)> {
        self.owners
            .get(&(loc.subsystem, loc.device_lba / self.extent_size_blocks))
            .copied()
    }

    fn slot_of(&self, loc: PhysicalLocation) -> Result<u64, ExtentError> {
        if !loc.device_lba.is_multiple_of(self.extent_size_blocks) {
            return Err(ExtentError::Misaligned { location: loc });
        }
        let backing = self
            .backing
            .get(&loc.subsystem)
            .ok_or(ExtentError::UnknownSubsystem(loc.subsystem))?;
        let slot = loc.device_lba / self.extent_size_blocks;
        if !backing.slots.contains(&slot) {
            return Err(ExtentError::OverlapViolation { location: loc });
        }
        Ok(slot)
    }

    fn location_of(&self, subsystem: SubsystemId, slot: u64) -> PhysicalLocation {
        PhysicalLocation::new(subsystem, slot * self.extent_size_blocks)
    }

    fn pick_subsystem(&mut self) -> Option<SubsystemId> {
        let ids: Vec<SubsystemId> = self.backing.keys().copied().collect();
        if ids.is_empty() {
            return None;
        }
        match self.policy {
            PlacementPolicy::RoundRobin => {
                let n = ids.len() as u64;
                for step in 0..n {
                    let idx = ((self.cursor + step) % n) as usize;
                    if !self.backing[&ids[idx]].free.is_empty() {
                        self.cursor = (idx as u64 + 1) % n;
                        return Some(ids[idx]);
                    }
                }
                None
            }
            PlacementPolicy::LeastLoaded => ids
                .into_iter()
                .filter(|id| !self.backing[id].free.is_empty())
                .min_by_key(|id| (self.allocated_on(*id), std::cmp::Reverse(self.free_on(*id)), *id)),
        }
    }

    fn take_slot(&mut self, subsystem: SubsystemId, owner: (VolumeId, u64)) -> Option<PhysicalLocation> {
        let backing = self.backing.get_mut(&subsystem)?;
        let slot = *backing.free.iter().next()?;
        backing.free.remove(&slot);
        self.owners.insert((subsystem, slot), owner);
        Some(self.location_of(subsystem, slot))
    }

    /// Maps every unallocated extent touched by `[start, start + len)`.
    ///
    /// All-or-nothing: when the pool cannot cover every missing extent the
    /// table is left untouched and `PoolExhausted` is returned.
    pub fn thin_allocate(&mut self, table: &mut MappingTable, start: BlockAddr, len: u64) -> Result<Vec<u64>, ExtentError> {
        table.check_range(start, len)?;
        let missing: Vec<u64> = table
            .touched(start, len)
            .filter(|&i| table.state(i) == ExtentState::Unallocated)
            .collect();
        if missing.len() as u64 > self.free_extents() {
            return Err(ExtentError::PoolExhausted);
        }
        for &index in &missing {
            let sub = self.pick_subsystem().ok_or(ExtentError::PoolExhausted)?;
            let loc = self
                .take_slot(sub, (table.volume(), index))
                .ok_or(ExtentError::PoolExhausted)?;
            table.set_state(index, ExtentState::Mapped(loc));
        }
        Ok(missing)
    }

    /// Maps one extent onto a specific subsystem (striped placement).
    pub fn allocate_on(&mut self, table: &mut MappingTable, index: u64, subsystem: SubsystemId) -> Result<PhysicalLocation, ExtentError> {
        if !self.backing.contains_key(&subsystem) {
            return Err(ExtentError::UnknownSubsystem(subsystem));
        }
        if let ExtentState::Mapped(loc) = table.state(index) {
            return Ok(loc);
        }
        let loc = self
            .take_slot(subsystem, (table.volume(), index))
            .ok_or(ExtentError::PoolExhausted)?;
        table.set_state(index, ExtentState::Mapped(loc));
        Ok(loc)
    }

    /// Returns every mapped extent of `table` to the free list.
    pub fn release_all(&mut self, table: &mut MappingTable) {
        let mapped: Vec<(u64, PhysicalLocation)> = table.mapped().collect();
        for (index, loc) in mapped {
            let slot = loc.device_lba / self.extent_size_blocks;
            self.owners.remove(&(loc.subsystem, slot));
            if let Some(b) = self.backing.get_mut(&loc.subsystem) {
                b.free.insert(slot);
            }
            table.set_state(index, ExtentState::Unallocated);
        }
    }

    /// Picks a free slot for relocating an extent currently at `current`,
    /// preferring a different subsystem.
    pub fn pick_migration_target(&self, current: PhysicalLocation) -> Option<PhysicalLocation> {
        let other = self
            .backing
            .iter()
            .filter(|(id, b)| **id != current.subsystem && !b.free.is_empty())
            .max_by_key(|(id, b)| (b.free.len(), std::cmp::Reverse(**id)));
        let (id, backing) = match other {
            Some(found) => found,
            None => {
                let b = self.backing.get(&current.subsystem)?;
                (&current.subsystem, b)
            }
        };
        let slot = *backing.free.iter().next()?;
        Some(self.location_of(*id, slot))
    }

    /// Takes a free slot out of circulation while a copy into it is in progress.
    pub fn reserve(&mut self, loc: PhysicalLocation) -> Result<(), ExtentError> {
        let slot = self.slot_of(loc)?;
        let backing = self.backing.get_mut(&loc.subsystem).expect("slot_of checked backing");
        if !backing.free.remove(&slot) {
            return Err(ExtentError::OverlapViolation { location: loc });
        }
        self.reserved.insert((loc.subsystem, slot));
        Ok(())
    }

    pub fn release_reservation(&mut self, loc: PhysicalLocation) {
        if let Ok(slot) = self.slot_of(loc) {
            if self.reserved.remove(&(loc.subsystem, slot)) {
                self.backing.get_mut(&loc.subsystem).expect("reserved slot has backing").free.insert(slot);
            }
        }
    }

    /// Moves extent `index` of `table` to `new_loc` and bumps the table epoch.
    ///
    /// `new_loc` must be a free (or reserved) extent-aligned slot of this pool.
    /// The old slot goes back on the free list.
    pub fn migrate_extent(&mut self, table: &mut MappingTable, index: u64, new_loc: PhysicalLocation) -> Result<u64, ExtentError> {
        let old = match table.extent(index).map(|e| e.state) {
            Some(ExtentState::Mapped(loc)) => loc,
            _ => return Err(ExtentError::ExtentUnallocated { extent: index }),
        };
        let new_slot = self.slot_of(new_loc)?;
        let key = (new_loc.subsystem, new_slot);
        let was_reserved = self.reserved.contains(&key);
        let is_free = self.backing[&new_loc.subsystem].free.contains(&new_slot);
        if !was_reserved && !is_free {
            return Err(ExtentError::OverlapViolation { location: new_loc });
        }
        if was_reserved {
            self.reserved.remove(&key);
        } else {
            self.backing.get_mut(&new_loc.subsystem).expect("checked").free.remove(&new_slot);
        }
        let old_slot = old.device_lba / self.extent_size_blocks;
        self.owners.remove(&(old.subsystem, old_slot));
        if let Some(b) = self.backing.get_mut(&old.subsystem) {
            b.free.insert(old_slot);
        }
        self.owners.insert(key, (table.volume(), index));
        table.set_state(index, ExtentState::Mapped(new_loc));
        Ok(table.bump_epoch())
    }

    /// Checks pool-wide invariants against the tables that draw from it:
    /// conservation, ownership agreement and physical exclusivity.
    pub fn verify<'a>(&self, tables: impl IntoIterator<Item = &'a MappingTable>) -> Result<(), String> {
        let mut seen: BTreeMap<(SubsystemId, u64), (VolumeId, u64)> = BTreeMap::new();
        for table in tables {
            for (index, loc) in table.mapped() {
                let slot = self.slot_of(loc).map_err(|e| e.to_string())?;
                if let Some(prev) = seen.insert((loc.subsystem, slot), (table.volume(), index)) {
                    return Err(format!("{loc} mapped by both {:?} and {:?}", prev, (table.volume(), index)));
                }
            }
        }
        if seen != self.owners {
            return Err("owner index disagrees with mapping tables".into());
        }
        let total = self.free_extents() + self.allocated_extents() + self.reserved_extents();
        if total != self.capacity_extents() {
            return Err(format!("free+allocated+reserved = {total}, capacity = {}", self.capacity_extents()));
        }
        for (sub, slot) in self.owners.keys() {
            if self.backing[sub].free.contains(slot) {
                return Err(format!("slot {sub}:{slot} both free and owned"));
            }
        }
        Ok(())
    }

    pub(crate) fn restore_parts(
        id: PoolId,
        extent_size_blocks: u64,
        policy: PlacementPolicy,
        cursor: u64,
        backing: BTreeMap<SubsystemId, Backing>,
        reserved: BTreeSet<(SubsystemId, u64)>,
    ) -> Self {
        Self {
            id,
            extent_size_blocks,
            policy,
            backing,
            owners: BTreeMap::new(),
            reserved,
            cursor,
        }
    }

    pub(crate) fn adopt(&mut self, table: &MappingTable) -> Result<(), ExtentError> {
        for (index, loc) in table.mapped() {
            let slot = self.slot_of(loc)?;
            if self.owners.insert((loc.subsystem, slot), (table.volume(), index)).is_some()
                || self.backing[&loc.subsystem].free.contains(&slot)
            {
                return Err(ExtentError::OverlapViolation { location: loc });
            }
        }
        Ok(())
    }
}

/// Fraction of a pool's physical extents currently mapped.
pub fn pool_utilization(pool: &ThinPool) -> f64 {
    pool.utilization()
}

/// Round-robin block striping across an ordered device list.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct StripeLayout {
    stripe_unit_blocks: u64,
    device_ids: Vec<SubsystemId>,
}

impl StripeLayout {
    pub fn new(device_ids: Vec<SubsystemId>, stripe_unit_blocks: u64) -> Result<Self, ExtentError> {
        if device_ids.is_empty() {
            return Err(ExtentError::InvalidGeometry("stripe needs at least one device".into()));
        }
        if stripe_unit_blocks == 0 {
            return Err(ExtentError::InvalidGeometry("stripe unit must be at least one block".into()));
        }
        let distinct: BTreeSet<_> = device_ids.iter().collect();
        if distinct.len() != device_ids.len() {
            return Err(ExtentError::InvalidGeometry("stripe devices must be distinct".into()));
        }
        Ok(Self {
            stripe_unit_blocks,
            device_ids,
        })
    }

    pub fn device_count(&self) -> u64 {
        self.device_ids.len() as u64
    }

    pub fn stripe_unit_blocks(&self) -> u64 {
        self.stripe_unit_blocks
    }

    pub fn device_ids(&self) -> &[SubsystemId] {
        &self.device_ids
    }

    pub fn locate(&self, vlba: BlockAddr) -> (SubsystemId, BlockAddr) {
        let stripe_no = vlba / self.stripe_unit_blocks;
        let device = (stripe_no % self.device_count()) as usize;
        let row = stripe_no / self.device_count();
        (self.device_ids[device], row * self.stripe_unit_blocks + vlba % self.stripe_unit_blocks)
    }
}

pub fn stripe_locate(layout: &StripeLayout, vlba: BlockAddr) -> (SubsystemId, BlockAddr) {
    layout.locate(vlba)
}

#[cfg(test)]
mod tests {
    use super::*;

    const S1: SubsystemId = SubsystemId(1);
    const S2: SubsystemId = SubsystemId(2);

    fn table(size: u64, ext: u64) -> MappingTable {
        MappingTable::new(VolumeId(1), size, ext).unwrap()
    }

    #[test]
    fn resolve_splits_at_extent_boundary() {
        let mut t = table(8, 4);
        t.set_state(0, ExtentState::Mapped(PhysicalLocation::new(S1, 100)));
        t.set_state(1, ExtentState::Mapped(PhysicalLocation::new(S2, 40)));
        let segs = t.resolve(2, 4).unwrap();
        assert_eq!(
            segs,
            vec![
                Segment { vstart: 2, location: PhysicalLocation::new(S1, 102), len: 2 },
                Segment { vstart: 4, location: PhysicalLocation::new(S2, 40), len: 2 },
            ]
        );
    }

    #[test]
    fn resolve_zero_length_is_empty() {
        let t = table(8, 4);
        assert!(t.resolve(0, 0).unwrap().is_empty());
    }

    #[test]
    fn resolve_errors() {
        let mut t = table(8, 4);
        assert!(matches!(t.resolve(6, 3), Err(ExtentError::OutOfRange { .. })));
        assert!(matches!(t.resolve(u64::MAX, 2), Err(ExtentError::OutOfRange { .. })));
        t.set_state(0, ExtentState::Mapped(PhysicalLocation::new(S1, 0)));
        assert_eq!(t.resolve(2, 4), Err(ExtentError::UnallocatedRead { extent: 1 }));
    }

    #[test]
    fn partial_last_extent() {
        let t = table(10, 4);
        assert_eq!(t.extent_count(), 3);
        let segs = t.resolve_sparse(7, 3).unwrap();
        assert_eq!(segs.len(), 2);
        assert_eq!(segs[1], SparseSegment { vstart: 8, location: None, len: 2 });
    }

    fn pool(subs: &[(SubsystemId, u64)], ext: u64) -> ThinPool {
        let mut p = ThinPool::new(PoolId(0), ext, PlacementPolicy::RoundRobin);
        for &(s, cap) in subs {
            p.add_subsystem(s, cap).unwrap();
        }
        p
    }

    #[test]
    fn thin_allocate_touched_extents_once() {
        let mut p = pool(&[(S1, 400)], 4);
        let mut t = table(64, 4);
        let mut got = Vec::new();
        for vlba in [0, 1, 5] {
            got.extend(p.thin_allocate(&mut t, vlba, 1).unwrap());
        }
        assert_eq!(got, vec![0, 1]);
        assert_eq!(p.allocated_extents(), 2);
        assert!(p.thin_allocate(&mut t, 0, 1).unwrap().is_empty());
        assert_eq!(p.allocated_extents(), 2);
        p.verify([&t]).unwrap();
    }

    #[test]
    fn utilization_and_exhaustion() {
        let mut p = pool(&[(S1, 400)], 4);
        assert_eq!(p.utilization(), 0.0);
        let mut t = table(8, 4);
        p.thin_allocate(&mut t, 0, 8).unwrap();
        assert_eq!(p.allocated_extents(), 2);
        assert!((pool_utilization(&p) - 0.02).abs() < 1e-12);

        let mut small = pool(&[(S1, 8)], 4);
        let mut big = table(40, 4);
        small.thin_allocate(&mut big, 0, 8).unwrap();
        let before = big.clone();
        assert_eq!(small.thin_allocate(&mut big, 8, 4), Err(ExtentError::PoolExhausted));
        assert_eq!(big, before);
        assert_eq!(small.utilization(), 1.0);
    }

    #[test]
    fn exhaustion_is_all_or_nothing() {
        let mut p = pool(&[(S1, 8)], 4);
        let mut t = table(16, 4);
        assert_eq!(p.thin_allocate(&mut t, 0, 12), Err(ExtentError::PoolExhausted));
        assert_eq!(p.allocated_extents(), 0);
        assert_eq!(t.mapped_count(), 0);
    }

    #[test]
    fn round_robin_spreads_across_subsystems() {
        let mut p = pool(&[(S1, 40), (S2, 40)], 4);
        let mut t = table(16, 4);
        p.thin_allocate(&mut t, 0, 16).unwrap();
        let subs: Vec<_> = t.mapped().map(|(_, l)| l.subsystem).collect();
        assert_eq!(subs, vec![S1, S2, S1, S2]);
    }

    #[test]
    fn least_loaded_prefers_emptier_subsystem() {
        let mut p = pool(&[(S1, 40), (S2, 40)], 4);
        p.set_policy(PlacementPolicy::LeastLoaded);
        let mut a = MappingTable::new(VolumeId(1), 12, 4).unwrap();
        p.allocate_on(&mut a, 0, S1).unwrap();
        p.allocate_on(&mut a, 1, S1).unwrap();
        p.thin_allocate(&mut a, 8, 1).unwrap();
        assert_eq!(a.state(2).location().unwrap().subsystem, S2);
    }

    #[test]
    fn migrate_bumps_epoch_and_frees_old_slot() {
        let mut p = pool(&[(S1, 40), (S2, 40)], 4);
        let mut t = table(16, 4);
        p.thin_allocate(&mut t, 0, 16).unwrap();
        for _ in 0..5 {
            let cur = t.state(3).location().unwrap();
            let target = p.pick_migration_target(cur).unwrap();
            p.migrate_extent(&mut t, 3, target).unwrap();
        }
        assert_eq!(t.epoch(), 5);
        let cur = t.state(3).location().unwrap();
        let target = p.pick_migration_target(cur).unwrap();
        assert_eq!(p.migrate_extent(&mut t, 3, target), Ok(6));
        assert_eq!(p.owner_of(cur), None);
        p.verify([&t]).unwrap();
    }

    #[test]
    fn migrate_errors() {
        let mut p = pool(&[(S1, 40)], 4);
        let mut a = MappingTable::new(VolumeId(1), 8, 4).unwrap();
        let mut b = MappingTable::new(VolumeId(2), 8, 4).unwrap();
        p.thin_allocate(&mut a, 0, 4).unwrap();
        p.thin_allocate(&mut b, 0, 4).unwrap();
        let owned_by_b = b.state(0).location().unwrap();
        assert_eq!(
            p.migrate_extent(&mut a, 0, owned_by_b),
            Err(ExtentError::OverlapViolation { location: owned_by_b })
        );
        assert_eq!(
            p.migrate_extent(&mut a, 1, PhysicalLocation::new(S1, 20)),
            Err(ExtentError::ExtentUnallocated { extent: 1 })
        );
        assert!(matches!(
            p.migrate_extent(&mut a, 0, PhysicalLocation::new(S1, 21)),
            Err(ExtentError::Misaligned { .. })
        ));
        assert!(matches!(
            p.migrate_extent(&mut a, 0, PhysicalLocation::new(S2, 0)),
            Err(ExtentError::UnknownSubsystem(_))
        ));
        assert_eq!(a.epoch(), 0);
    }

    #[test]
    fn reservation_blocks_allocation() {
        let mut p = pool(&[(S1, 8)], 4);
        p.reserve(PhysicalLocation::new(S1, 0)).unwrap();
        let mut t = table(8, 4);
        assert_eq!(p.thin_allocate(&mut t, 0, 8), Err(ExtentError::PoolExhausted));
        p.thin_allocate(&mut t, 0, 4).unwrap();
        assert_eq!(t.state(0).location(), Some(PhysicalLocation::new(S1, 4)));
        p.verify([&t]).unwrap();
        p.release_reservation(PhysicalLocation::new(S1, 0));
        assert_eq!(p.free_extents(), 1);
    }

    #[test]
    fn stripe_formula_examples() {
        let l = StripeLayout::new(vec![SubsystemId(7), SubsystemId(8), SubsystemId(9)], 4).unwrap();
        assert_eq!(stripe_locate(&l, 10), (SubsystemId(9), 2));
        assert_eq!(stripe_locate(&l, 0), (SubsystemId(7), 0));
        let mut counts = BTreeMap::new();
        for v in 0..24 {
            *counts.entry(l.locate(v).0).or_insert(0) += 1;
        }
        assert!(counts.values().all(|&c| c == 8));
    }

    #[test]
    fn stripe_layout_validation() {
        assert!(StripeLayout::new(vec![], 4).is_err());
        assert!(StripeLayout::new(vec![S1], 0).is_err());
        assert!(StripeLayout::new(vec![S1, S1], 4).is_err());
    }
}
