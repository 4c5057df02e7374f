//! The nine acceptance criteria, one result line each.
//!
//! Runs without the libtest harness so that every line reaches the console:
//! `cargo test --test acceptance`.

mod common;

use std::collections::BTreeSet;
use std::time::Instant;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

use sanvirt::config::{PolicySpec, ScenarioConfig, SubsystemSpec, VolumeSpec, MIB};
use sanvirt::extent::{stripe_locate, ExtentError, PlacementPolicy, StripeLayout, SubsystemId};
use sanvirt::fabric::NodeId;
use sanvirt::metadata::{MetadataError, MetadataStore, VolumePolicy, DEFAULT_POOL};
use sanvirt::report::{run, RunReport};
use sanvirt::san::{ArchitectureMode, San, SanError};
use sanvirt::workload::{Pattern, WorkloadSpec};

use common::{bottleneck_scenario, integrity_run, semi_symmetric};

type Verdict = Result<String, String>;
type Criterion = (&'static str, fn() -> Verdict);

fn check(cond: bool, detail: String) -> Verdict {
    if cond {
        Ok(detail)
    } else {
        Err(detail)
    }
}

fn mib(r: &RunReport) -> f64 {
    r.throughput_mib_per_s()
}

fn criterion_1() -> Verdict {
    let r = run(&bottleneck_scenario(ArchitectureMode::Symmetric)).map_err(|e| e.to_string())?;
    let busy = r.link(NodeId::Appliance(0)).ok_or("no appliance link")?.busy_fraction;
    let limit = 100.0 * 1.02;
    check(
        mib(&r) <= limit && busy >= 0.95,
        format!("symmetric {:.2} MiB/s (limit {limit:.0}), appliance link busy {busy:.3} (need >= 0.95)", mib(&r)),
    )
}

fn criterion_2() -> Verdict {
    let sym = run(&bottleneck_scenario(ArchitectureMode::Symmetric)).map_err(|e| e.to_string())?;
    let asym = run(&bottleneck_scenario(ArchitectureMode::Asymmetric)).map_err(|e| e.to_string())?;
    let ratio = mib(&asym) / mib(&sym);
    let mdc_share = asym.metadata_link_bytes as f64 / asym.total_link_bytes as f64;
    check(
        ratio >= 3.6 && mdc_share < 0.01,
        format!(
            "asymmetric {:.2} MiB/s = {ratio:.3}x symmetric (need >= 3.6), metadata link share {:.5}% (need < 1%)",
            mib(&asym),
            mdc_share * 100.0
        ),
    )
}

fn criterion_3() -> Verdict {
    let sym = run(&bottleneck_scenario(ArchitectureMode::Symmetric)).map_err(|e| e.to_string())?;
    let asym = run(&bottleneck_scenario(ArchitectureMode::Asymmetric)).map_err(|e| e.to_string())?;
    let semi: Vec<f64> = [1, 2, 4]
        .iter()
        .map(|&n| run(&semi_symmetric(n)).map(|r| mib(&r)))
        .collect::<Result<_, _>>()
        .map_err(|e| e.to_string())?;
    let (s, a) = (mib(&sym), mib(&asym));
    let two_ok = semi[1] >= 1.8 * s && semi[1] <= a;
    let four_ok = (semi[2] - a).abs() <= 0.10 * a;
    let mono = semi[0] < semi[1] && semi[1] < semi[2];
    check(
        two_ok && four_ok && mono,
        format!(
            "semi-symmetric x1 {:.2}, x2 {:.2} ({:.3}x symmetric, asymmetric {a:.2}), x4 {:.2} ({:+.2}% vs asymmetric), monotone {mono}",
            semi[0],
            semi[1],
            semi[1] / s,
            semi[2],
            (semi[2] - a) / a * 100.0
        ),
    )
}

fn criterion_4() -> Verdict {
    // (a) server level: host 0 fills its partition while host 1's stays empty.
    let mut c = ScenarioConfig::new(2, vec![SubsystemSpec::with_capacity(8 * 1024); 2], ArchitectureMode::ServerLevel);
    c.volumes = Some(vec![
        VolumeSpec {
            size_blocks: 8 * 1024,
            policy: PolicySpec::FullyProvisioned,
            owner: Some(0),
        },
        VolumeSpec {
            size_blocks: 1024,
            policy: PolicySpec::Thin,
            owner: Some(1),
        },
    ]);
    let mut san = San::build(&c).map_err(|e| e.to_string())?;
    let (cap, free): (u64, u64) = san
        .metadata_stores()
        .iter()
        .flat_map(|s| s.pools())
        .fold((0, 0), |(c, f), p| (c + p.capacity_extents(), f + p.free_extents()));
    let spec = VolumeSpec {
        size_blocks: 1024,
        policy: PolicySpec::FullyProvisioned,
        owner: Some(0),
    };
    let refused = matches!(
        san.create_volume(&spec, 0),
        Err(SanError::Metadata(MetadataError::Extent(ExtentError::PoolExhausted)))
    );
    let free_share = free as f64 / cap as f64;
    let a_ok = refused && free_share >= 0.5;

    // (b) a volume bigger than any single subsystem.
    let big = VolumeSpec {
        size_blocks: 6 * 1024,
        policy: PolicySpec::Thin,
        owner: Some(0),
    };
    let hw = |mode| {
        let mut c = ScenarioConfig::new(1, vec![SubsystemSpec::with_capacity(4 * 1024); 2], mode);
        c.volumes = Some(vec![big.clone()]);
        c.workload = WorkloadSpec {
            pattern: Pattern::SequentialWrite,
            io_size_blocks: 64,
            total_bytes: 6 * 1024 * 4096,
            queue_depth: 4,
            think_time_us: 0,
        };
        c
    };
    let sub = San::build(&hw(ArchitectureMode::SubsystemLevel));
    let sub_refused = matches!(sub, Err(SanError::TooLarge { .. }));
    let asym = run(&hw(ArchitectureMode::Asymmetric)).map_err(|e| e.to_string())?;
    let asym_ok = asym.hosts[0].failed == 0 && asym.total_bytes == 6 * 1024 * 4096;
    check(
        a_ok && sub_refused && asym_ok,
        format!(
            "(a) server-level PoolExhausted {refused} with {:.0}% of SAN capacity free; (b) subsystem-level refused {sub_refused}, asymmetric wrote {} MiB without failures {asym_ok}",
            free_share * 100.0,
            asym.total_bytes / MIB
        ),
    )
}

fn criterion_5() -> Verdict {
    let mut lines = Vec::new();
    let mut all_ok = true;
    for mode in ArchitectureMode::ALL {
        let o = integrity_run(mode, 5_000, 20, 42);
        all_ok &= o.ok();
        lines.push(format!(
            "{mode}: match {} lost/dup {} failed {} stale {}/{} recovered, migrations {} done {} skipped",
            o.contents_match, o.lost_or_duplicated, o.failed_ios, o.stale_recovered, o.stale_epochs, o.migrations_completed, o.migrations_skipped
        ));
    }
    check(all_ok, lines.join("; "))
}

fn criterion_6() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut exhaustions = 0;
    for case in 0..1000 {
        let ext = rng.gen_range(1..=8u64);
        let subs = rng.gen_range(1..=4u32);
        let mut store = MetadataStore::with_policy(ext, PlacementPolicy::RoundRobin);
        let mut capacity = 0;
        for s in 0..subs {
            let slots = rng.gen_range(1..=6u64);
            capacity += slots;
            store.register_subsystem(SubsystemId(s), slots * ext).unwrap();
        }
        let size = capacity * ext * rng.gen_range(1..=10u64);
        let v = store
            .create_virtual_volume(DEFAULT_POOL, size, VolumePolicy::Thin)
            .map_err(|e| format!("case {case}: over-committed create failed: {e}"))?;
        let host = NodeId::Host(0);
        store.authorize(v, host).unwrap();
        let mut touched = BTreeSet::new();
        for _ in 0..rng.gen_range(1..60) {
            let start = rng.gen_range(0..size);
            let len = rng.gen_range(1..=(size - start).min(3 * ext));
            let before = store.pool(DEFAULT_POOL).unwrap().allocated_extents();
            let write = rng.gen_bool(0.6);
            let res = store.handle_resolve(v, start, len, host, write);
            let after = store.pool(DEFAULT_POOL).unwrap().allocated_extents();
            if !write {
                if res.is_err() || after != before {
                    return Err(format!("case {case}: read allocated or failed"));
                }
                continue;
            }
            let mut next = touched.clone();
            next.extend(start / ext..=(start + len - 1) / ext);
            if next.len() as u64 > capacity {
                if !matches!(res, Err(MetadataError::Extent(ExtentError::PoolExhausted))) || after != before {
                    return Err(format!("case {case}: expected PoolExhausted with {} of {capacity} used", touched.len()));
                }
                exhaustions += 1;
            } else {
                if res.is_err() {
                    return Err(format!("case {case}: write failed with free extents left: {res:?}"));
                }
                touched = next;
                if after != touched.len() as u64 {
                    return Err(format!("case {case}: allocated {after} != distinct touched {}", touched.len()));
                }
            }
        }
    }
    Ok(format!("1000 random write logs matched the distinct-extent oracle; {exhaustions} exhaustions at the physical limit"))
}

fn criterion_7() -> Verdict {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    for case in 0..200 {
        let dc = rng.gen_range(1..=8u32);
        let unit = rng.gen_range(1..=32u64);
        let size = rng.gen_range(1..=4096u64);
        let ids: Vec<SubsystemId> = (0..dc).map(|i| SubsystemId(i * 3 + 1)).collect();
        let layout = StripeLayout::new(ids.clone(), unit).unwrap();
        let mut counts = vec![0u64; dc as usize];
        for vlba in 0..size {
            let stripe = vlba / unit;
            let dev = (stripe % dc as u64) as usize;
            let lba = stripe / dc as u64 * unit + vlba % unit;
            if stripe_locate(&layout, vlba) != (ids[dev], lba) {
                return Err(format!("case {case}: vlba {vlba} disagrees with the formula"));
            }
            counts[dev] += 1;
        }
        let spread = counts.iter().max().unwrap() - counts.iter().min().unwrap();
        if spread > unit {
            return Err(format!("case {case}: per-device spread {spread} > stripe unit {unit}"));
        }
    }
    Ok("200 random layouts: full enumeration matches the formula, spread <= stripe unit".into())
}

fn criterion_8() -> Verdict {
    let config = bottleneck_scenario(ArchitectureMode::Symmetric);
    let first = run(&config).map_err(|e| e.to_string())?;
    let mut same = 1;
    for _ in 1..10 {
        if run(&config).map_err(|e| e.to_string())? == first {
            same += 1;
        }
    }
    check(same == 10, format!("{same}/10 runs identical, trace hash {}", &first.trace_hash[..16]))
}

fn criterion_9() -> Verdict {
    let mut images = Vec::new();
    for mode in ArchitectureMode::ALL {
        let mut c = ScenarioConfig::new(1, vec![SubsystemSpec::with_capacity(16 * 1024); 3], mode);
        c.seed = 99;
        c.workload = WorkloadSpec {
            pattern: Pattern::Mixed { read_fraction: 0.3 },
            io_size_blocks: 16,
            total_bytes: 32 * MIB,
            queue_depth: 8,
            think_time_us: 0,
        };
        c.volumes = Some(vec![VolumeSpec {
            size_blocks: 8 * 1024,
            policy: PolicySpec::Thin,
            owner: Some(0),
        }]);
        let mut san = San::build(&c).map_err(|e| e.to_string())?;
        sanvirt::report::execute(&mut san).map_err(|e| e.to_string())?;
        let v = san.volume_of(0).unwrap();
        images.push((mode, san.read_volume(v).unwrap()));
    }
    let reference = &images[0].1;
    let differing: Vec<String> = images.iter().filter(|(_, i)| i != reference).map(|(m, _)| m.to_string()).collect();
    let written = reference.chunks(4096).filter(|b| b.iter().any(|&x| x != 0)).count();
    check(
        differing.is_empty() && written > 0,
        format!("five modes, {written} non-zero blocks, differing modes: {differing:?}"),
    )
}

fn main() {
    let criteria: [Criterion; 9] = [
        ("1 bottleneck reproduction", criterion_1),
        ("2 direct-path scaling", criterion_2),
        ("3 semi-symmetric positioning", criterion_3),
        ("4 architecture limitations", criterion_4),
        ("5 integrity under remapping", criterion_5),
        ("6 thin provisioning accounting", criterion_6),
        ("7 striping balance", criterion_7),
        ("8 determinism", criterion_8),
        ("9 equivalent end state", criterion_9),
    ];
    let mut failures = 0;
    for (name, f) in criteria {
        let t = Instant::now();
        let verdict = std::panic::catch_unwind(f).unwrap_or_else(|_| Err("panicked".into()));
        let secs = t.elapsed().as_secs_f64();
        match verdict {
            Ok(d) => println!("PASS criterion {name} ({secs:.1}s): {d}"),
            Err(d) => {
                failures += 1;
                println!("FAIL criterion {name} ({secs:.1}s): {d}");
            }
        }
    }
    println!("acceptance: {} passed, {failures} failed", 9 - failures);
    if failures > 0 {
        std::process::exit(1);
    }
}
