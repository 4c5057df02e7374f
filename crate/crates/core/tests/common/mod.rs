#![allow(dead_code)]

use std::collections::BTreeMap;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sanvirt::config::{PolicySpec, ScenarioConfig, SubsystemSpec, VolumeSpec, MIB};
use sanvirt::extent::VolumeId;
use sanvirt::report::{execute, summarize, RunReport};
use sanvirt::san::{ArchitectureMode, San};
use sanvirt::wire::{IoOp, IoStatus};
use sanvirt::workload::{Pattern, WorkloadSpec};

/// Four hosts each streaming 64 MiB of sequential writes into four subsystems.
pub fn bottleneck_scenario(mode: ArchitectureMode) -> ScenarioConfig {
    let mut c = ScenarioConfig::new(4, vec![SubsystemSpec::with_capacity(262_144); 4], mode);
    c.links.latency_us = 100;
    c.links.bandwidth_bytes_per_s = 100 * MIB;
    c.workload = WorkloadSpec {
        pattern: Pattern::SequentialWrite,
        io_size_blocks: 64,
        total_bytes: 64 * MIB,
        queue_depth: 8,
        think_time_us: 0,
    };
    c
}

pub fn semi_symmetric(appliances: u32) -> ScenarioConfig {
    let mut c = bottleneck_scenario(ArchitectureMode::SemiSymmetric);
    c.appliance_count = Some(appliances);
    c
}

/// Small blocks and extents so that migrations and thin allocation happen
/// often; two hosts, each with its own thin volume.
pub fn integrity_scenario(mode: ArchitectureMode, ops_per_host: u64, seed: u64) -> ScenarioConfig {
    let mut c = ScenarioConfig::new(2, vec![SubsystemSpec::with_capacity(4096); 4], mode);
    c.block_size = 512;
    c.extent_size_blocks = 64;
    c.seed = seed;
    c.audit_writes = true;
    c.volumes = Some(
        (0..2)
            .map(|h| VolumeSpec {
                size_blocks: 1024,
                policy: PolicySpec::Thin,
                owner: Some(h),
            })
            .collect(),
    );
    c.workload = WorkloadSpec {
        pattern: Pattern::Mixed { read_fraction: 0.5 },
        io_size_blocks: 8,
        total_bytes: ops_per_host * 8 * 512,
        queue_depth: 8,
        think_time_us: 0,
    };
    c
}

/// Replays the applied-write log onto flat per-volume images.
pub fn oracle_images(san: &San) -> BTreeMap<VolumeId, Vec<u8>> {
    let bs = san.config().block_size as usize;
    let mut images: BTreeMap<VolumeId, Vec<u8>> = san
        .volumes()
        .map(|v| (v, vec![0u8; san.table(v).unwrap().size_blocks() as usize * bs]))
        .collect();
    for w in san.applied_writes() {
        let img = images.get_mut(&w.origin.volume).expect("write to a known volume");
        let off = w.origin.vlba as usize * bs;
        img[off..off + w.data.len()].copy_from_slice(&w.data);
    }
    images
}

#[derive(Debug, Default)]
pub struct IntegrityOutcome {
    pub report: Option<RunReport>,
    pub contents_match: bool,
    pub lost_or_duplicated: u64,
    pub failed_ios: u64,
    pub stale_epochs: u64,
    pub stale_recovered: u64,
    pub migrations_requested: u64,
    pub migrations_completed: u64,
    pub migrations_skipped: u64,
}

impl IntegrityOutcome {
    pub fn ok(&self) -> bool {
        self.contents_match && self.lost_or_duplicated == 0 && self.failed_ios == 0 && self.stale_epochs == self.stale_recovered
    }
}

/// Runs the integrity scenario with `migrations` extent moves at random
/// times inside the migration-free makespan, then audits the result.
pub fn integrity_run(mode: ArchitectureMode, ops_per_host: u64, migrations: u64, seed: u64) -> IntegrityOutcome {
    let config = integrity_scenario(mode, ops_per_host, seed);
    let horizon = sanvirt::report::run(&config).expect("dry run").makespan_us;
    let mut san = San::build(&config).expect("build");
    san.record_completions(true);
    let mut rng = ChaCha8Rng::seed_from_u64(seed ^ 0x5eed);
    let volumes: Vec<VolumeId> = san.volumes().collect();
    for _ in 0..migrations {
        let at = rng.gen_range(0..horizon.max(1));
        let v = volumes[rng.gen_range(0..volumes.len())];
        let extents = san.table(v).unwrap().extent_count();
        san.schedule_migration(at, v, rng.gen_range(0..extents));
    }
    execute(&mut san).expect("run");

    let mut out = IntegrityOutcome {
        migrations_requested: migrations,
        migrations_completed: san.migrations_completed(),
        migrations_skipped: san.migrations_skipped(),
        ..Default::default()
    };
    let mut expected_blocks: BTreeMap<(u32, u64), u64> = BTreeMap::new();
    for h in 0..san.host_count() {
        for c in san.take_completions(h) {
            if c.status != IoStatus::Ok {
                out.failed_ios += 1;
            } else if c.op == IoOp::Write {
                expected_blocks.insert((h, c.request), c.len);
            }
        }
        let d = san.driver(h).stats();
        out.stale_epochs += d.stale_epochs;
        out.stale_recovered += d.stale_recovered;
    }
    let mut applied_blocks: BTreeMap<(u32, u64), u64> = BTreeMap::new();
    for w in san.applied_writes() {
        *applied_blocks.entry((w.origin.host, w.origin.request)).or_default() += w.blocks;
    }
    let keys: std::collections::BTreeSet<_> = expected_blocks.keys().chain(applied_blocks.keys()).collect();
    for k in keys {
        if expected_blocks.get(k) != applied_blocks.get(k) {
            out.lost_or_duplicated += 1;
        }
    }
    let images = oracle_images(&san);
    out.contents_match = images.iter().all(|(v, img)| san.read_volume(*v).as_ref() == Some(img));
    out.report = Some(summarize(&san));
    out
}
