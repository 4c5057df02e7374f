use std::collections::BTreeMap;

use proptest::prelude::*;

use sanvirt::extent::{
    ExtentError, MappingTable, PhysicalLocation, PlacementPolicy, PoolId, StripeLayout, SubsystemId, ThinPool, VolumeId,
};
use sanvirt::fabric::NodeId;
use sanvirt::metadata::{MetadataStore, VolumePolicy, DEFAULT_POOL};

fn pool_with(subsystems: &[u64], ext: u64) -> ThinPool {
    let mut pool = ThinPool::new(PoolId(0), ext, PlacementPolicy::RoundRobin);
    for (i, slots) in subsystems.iter().enumerate() {
        pool.add_subsystem(SubsystemId(i as u32), slots * ext).unwrap();
    }
    pool
}

/// Per-block oracle kept beside a table: `Some((subsystem, device lba))`.
fn flat_map(table: &MappingTable) -> Vec<Option<(SubsystemId, u64)>> {
    let ext = table.extent_size_blocks();
    (0..table.size_blocks())
        .map(|b| {
            table
                .state(b / ext)
                .location()
                .map(|l| (l.subsystem, l.device_lba + b % ext))
        })
        .collect()
}

proptest! {
    #![proptest_config(ProptestConfig::with_cases(256))]

    #[test]
    fn resolve_agrees_with_flat_lookup(
        ext in 1u64..32,
        size in 1u64..1024,
        writes in prop::collection::vec((0u64..1024, 1u64..64), 1..20),
        queries in prop::collection::vec((0u64..1024, 1u64..256), 1..20),
    ) {
        let mut pool = pool_with(&[1024, 1024], ext);
        let mut table = MappingTable::new(VolumeId(1), size, ext).unwrap();
        for (s, l) in writes {
            let s = s % size;
            let l = l.min(size - s);
            pool.thin_allocate(&mut table, s, l).unwrap();
        }
        let flat = flat_map(&table);
        for (s, l) in queries {
            let s = s % size;
            let l = l.min(size - s);
            let segs = table.resolve_sparse(s, l).unwrap();
            let mut cursor = s;
            for seg in &segs {
                prop_assert_eq!(seg.vstart, cursor);
                for i in 0..seg.len {
                    let got = seg.location.map(|loc| (loc.subsystem, loc.device_lba + i));
                    prop_assert_eq!(got, flat[(seg.vstart + i) as usize]);
                }
                cursor += seg.len;
            }
            prop_assert_eq!(cursor, s + l);
            let all_mapped = flat[s as usize..(s + l) as usize].iter().all(Option::is_some);
            prop_assert_eq!(table.resolve(s, l).is_ok(), all_mapped);
        }
    }

    #[test]
    fn fully_allocated_resolution_is_total(ext in 1u64..16, size in 1u64..600, s in 0u64..600, l in 1u64..600) {
        let mut pool = pool_with(&[1024, 1024], ext);
        let mut table = MappingTable::new(VolumeId(3), size, ext).unwrap();
        pool.thin_allocate(&mut table, 0, size).unwrap();
        let s = s % size;
        let l = l.min(size - s);
        let segs = table.resolve(s, l).unwrap();
        prop_assert_eq!(segs.iter().map(|g| g.len).sum::<u64>(), l);
        for pair in segs.windows(2) {
            prop_assert_eq!(pair[0].vstart + pair[0].len, pair[1].vstart);
        }
    }

    #[test]
    fn out_of_range_is_rejected(size in 1u64..500, s in 0u64..1000, l in 1u64..500) {
        let table = MappingTable::new(VolumeId(1), size, 8).unwrap();
        prop_assume!(s + l > size);
        let rejected = matches!(table.resolve_sparse(s, l), Err(ExtentError::OutOfRange { .. }));
        prop_assert!(rejected);
    }

    #[test]
    fn mapped_extents_stay_physically_disjoint(
        ops in prop::collection::vec((0usize..3, 0u64..256, 1u64..32, any::<bool>()), 1..60),
    ) {
        let ext = 8;
        let mut pool = pool_with(&[10, 6, 8], ext);
        let mut tables: Vec<MappingTable> =
            (0..3).map(|v| MappingTable::new(VolumeId(v), 256, ext).unwrap()).collect();
        for (v, s, l, migrate) in ops {
            let l = l.min(256 - s);
            let t = &mut tables[v];
            if migrate {
                let Some((idx, loc)) = t.mapped().find(|(i, _)| *i >= s / ext) else { continue };
                if let Some(target) = pool.pick_migration_target(loc) {
                    pool.migrate_extent(t, idx, target).unwrap();
                }
            } else {
                let _ = pool.thin_allocate(t, s, l);
            }
            prop_assert!(pool.verify(tables.iter()).is_ok());
            let mut used: BTreeMap<(SubsystemId, u64), VolumeId> = BTreeMap::new();
            for t in &tables {
                for (_, loc) in t.mapped() {
                    for b in 0..ext {
                        let prior = used.insert((loc.subsystem, loc.device_lba + b), t.volume());
                        prop_assert!(prior.is_none(), "block shared by two extents");
                    }
                }
            }
            let mapped: u64 = tables.iter().map(MappingTable::mapped_count).sum();
            prop_assert_eq!(pool.allocated_extents(), mapped);
            prop_assert_eq!(pool.allocated_extents() + pool.free_extents() + pool.reserved_extents(), 24);
        }
    }

    #[test]
    fn migration_onto_used_space_is_refused(seed_writes in 1u64..6) {
        let ext = 4;
        let mut pool = pool_with(&[8], ext);
        let mut a = MappingTable::new(VolumeId(1), 64, ext).unwrap();
        let mut b = MappingTable::new(VolumeId(2), 64, ext).unwrap();
        pool.thin_allocate(&mut a, 0, seed_writes * ext).unwrap();
        pool.thin_allocate(&mut b, 0, 1).unwrap();
        let taken = a.state(0).location().unwrap();
        let refused = matches!(pool.migrate_extent(&mut b, 0, taken), Err(ExtentError::OverlapViolation { .. }));
        prop_assert!(refused);
    }

    #[test]
    fn epochs_increase_and_other_extents_are_untouched(
        moves in prop::collection::vec(0u64..8, 1..30),
    ) {
        let ext = 16;
        let mut pool = pool_with(&[12, 12], ext);
        let mut table = MappingTable::new(VolumeId(9), 8 * ext, ext).unwrap();
        pool.thin_allocate(&mut table, 0, 8 * ext).unwrap();
        let mut last = table.epoch();
        for idx in moves {
            let before: Vec<_> = (0..8).map(|i| table.state(i)).collect();
            let from = table.state(idx).location().unwrap();
            let Some(to) = pool.pick_migration_target(from) else { continue };
            let epoch = pool.migrate_extent(&mut table, idx, to).unwrap();
            prop_assert!(epoch > last);
            prop_assert_eq!(table.epoch(), epoch);
            last = epoch;
            for i in (0..8).filter(|i| *i != idx) {
                prop_assert_eq!(table.state(i), before[i as usize]);
            }
            prop_assert_eq!(table.state(idx).location(), Some(to));
        }
    }

    #[test]
    fn even_stripes_are_perfectly_balanced(dc in 1u32..8, unit in 1u64..16, k in 1u64..6) {
        let ids: Vec<SubsystemId> = (0..dc).map(SubsystemId).collect();
        let layout = StripeLayout::new(ids, unit).unwrap();
        let mut counts = vec![0u64; dc as usize];
        for v in 0..k * dc as u64 * unit {
            counts[layout.locate(v).0 .0 as usize] += 1;
        }
        prop_assert!(counts.iter().all(|c| *c == k * unit));
    }

    #[test]
    fn store_conserves_capacity_and_snapshots_are_stable(
        caps in prop::collection::vec(1u64..8, 1..4),
        ops in prop::collection::vec((0u64..4, 0u64..512, 1u64..40, 0u8..3), 1..40),
    ) {
        let ext = 16;
        let mut store = MetadataStore::new(ext);
        for (i, c) in caps.iter().enumerate() {
            store.register_subsystem(SubsystemId(i as u32), c * ext).unwrap();
        }
        let total: u64 = caps.iter().sum();
        let vols: Vec<VolumeId> = (0..4)
            .map(|_| store.create_virtual_volume(DEFAULT_POOL, 512, VolumePolicy::Thin).unwrap())
            .collect();
        let host = NodeId::Host(0);
        for v in &vols {
            store.authorize(*v, host).unwrap();
        }
        let mut epochs: BTreeMap<VolumeId, u64> = BTreeMap::new();
        for (v, s, l, op) in ops {
            let v = vols[v as usize];
            let l = l.min(512 - s);
            match op {
                0 | 1 => {
                    if let Ok(r) = store.handle_resolve(v, s, l, host, op == 0) {
                        let table = store.table(v).unwrap();
                        prop_assert_eq!(r.grant.epoch, table.epoch());
                        let sparse = table.resolve_sparse(s, l).unwrap();
                        prop_assert_eq!(r.grant.segments.len(), sparse.len());
                        for (g, t) in r.grant.segments.iter().zip(&sparse) {
                            prop_assert_eq!((g.vstart, g.len, g.location), (t.vstart, t.len, t.location));
                        }
                    }
                }
                _ => {
                    let first = store.table(v).unwrap().mapped().next();
                    if let Some((idx, _)) = first {
                        if let Some(to) = store.pick_migration_target(v, idx) {
                            let (inv, _) = store.migrate_and_invalidate(v, idx, to).unwrap();
                            let prev = epochs.insert(v, inv.new_epoch).unwrap_or(0);
                            prop_assert!(inv.new_epoch > prev);
                        }
                    }
                }
            }
            let pool = store.pool(DEFAULT_POOL).unwrap();
            prop_assert_eq!(pool.allocated_extents() + pool.free_extents() + pool.reserved_extents(), total);
            prop_assert!(store.verify().is_ok());
        }
        let snap = store.snapshot();
        let restored = MetadataStore::restore(&snap).unwrap();
        prop_assert_eq!(restored.snapshot(), snap);
    }
}

#[test]
fn physical_location_offset_is_additive() {
    let loc = PhysicalLocation::new(SubsystemId(2), 40);
    assert_eq!(loc.offset(5).offset(7), loc.offset(12));
}
