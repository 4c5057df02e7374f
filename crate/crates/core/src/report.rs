//! Run reports, mode comparison and CSV output.

use serde::Serialize;
use sha2::{Digest, Sha256};
use thiserror::Error;

use crate::config::ScenarioConfig;
use crate::fabric::{NodeId, TraceSink};
use crate::san::{ArchitectureMode, San, SanError};

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct HostReport {
    pub host: u32,
    pub requests: u64,
    pub completed: u64,
    pub failed: u64,
    pub bytes: u64,
    pub throughput_bytes_per_s: f64,
    pub p50_latency_us: u64,
    pub p95_latency_us: u64,
    pub p99_latency_us: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct LinkReport {
    pub node: String,
    pub busy_fraction: f64,
    pub bytes_to_switch: u64,
    pub bytes_from_switch: u64,
    pub data_bytes: u64,
    pub messages: u64,
}

/// Payload that passed through an in-band appliance.
#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct RelayReport {
    pub node: String,
    pub bytes_from_hosts: u64,
    pub bytes_to_hosts: u64,
    pub bytes_to_subsystems: u64,
    pub bytes_from_subsystems: u64,
}

#[derive(Debug, Clone, PartialEq, Serialize)]
pub struct RunReport {
    pub architecture: ArchitectureMode,
    pub appliance_count: u32,
    pub seed: u64,
    /// Fingerprint of everything that defines the offered load.
    pub workload_id: String,
    pub makespan_us: u64,
    pub total_bytes: u64,
    pub throughput_bytes_per_s: f64,
    pub p50_latency_us: u64,
    pub p95_latency_us: u64,
    pub p99_latency_us: u64,
    pub hosts: Vec<HostReport>,
    pub links: Vec<LinkReport>,
    pub relays: Vec<RelayReport>,
    pub bottleneck: String,
    pub bottleneck_busy_fraction: f64,
    pub data_messages: u64,
    pub control_messages: u64,
    pub control_messages_per_io: f64,
    pub metadata_link_bytes: u64,
    pub total_link_bytes: u64,
    pub pool_utilization: f64,
    pub allocated_extents: u64,
    pub cache_hits: u64,
    pub resolves: u64,
    pub re_resolves: u64,
    pub stale_epochs: u64,
    pub migrations_completed: u64,
    pub events: u64,
    pub trace_events: u64,
    pub trace_hash: String,
}

impl RunReport {
    pub fn throughput_mib_per_s(&self) -> f64 {
        self.throughput_bytes_per_s / (1024.0 * 1024.0)
    }

    pub fn link(&self, node: NodeId) -> Option<&LinkReport> {
        let name = node.to_string();
        self.links.iter().find(|l| l.node == name)
    }

    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

#[derive(Debug, Error)]
pub enum ReportError {
    #[error("reports were produced from different workloads: {0}")]
    MismatchedWorkload(String),
    #[error("comparison needs at least two reports, got {0}")]
    TooFew(usize),
    #[error(transparent)]
    Run(#[from] SanError),
    #[error("csv: {0}")]
    Csv(#[from] csv::Error),
}

/// Nearest-rank percentile of an ascending slice; 0 for an empty one.
pub fn percentile(sorted: &[u64], p: f64) -> u64 {
    if sorted.is_empty() {
        return 0;
    }
    let rank = ((p / 100.0) * sorted.len() as f64).ceil().max(1.0) as usize;
    sorted[rank.min(sorted.len()) - 1]
}

fn workload_id(config: &ScenarioConfig) -> String {
    let key = serde_json::json!({
        "hosts": config.hosts,
        "seed": config.seed,
        "block_size": config.block_size,
        "workload": config.workload,
        "volumes": config.effective_volumes(),
    });
    hex::encode(Sha256::digest(key.to_string().as_bytes()))
}

/// Builds, runs to completion and reports.
pub fn run(config: &ScenarioConfig) -> Result<RunReport, SanError> {
    run_with_trace(config, TraceSink::new())
}

pub fn run_with_trace(config: &ScenarioConfig, trace: TraceSink) -> Result<RunReport, SanError> {
    let mut san = San::build(config)?;
    san.set_trace(trace);
    execute(&mut san)
}

/// Starts the workloads of an already built SAN, runs it to idle and reports.
pub fn execute(san: &mut San) -> Result<RunReport, SanError> {
    san.start_workloads();
    san.run_until_idle()?;
    Ok(summarize(san))
}

/// Report for the current state of a SAN.
pub fn summarize(san: &San) -> RunReport {
    let config = san.config();
    let mut all = Vec::new();
    let mut hosts = Vec::new();
    let mut makespan = 0;
    let mut total_bytes = 0;
    let mut requests = 0;
    for h in 0..san.host_count() {
        let run = san.host_run(h);
        makespan = makespan.max(run.last_completion_us);
        total_bytes += run.bytes_completed;
        requests += run.requests;
        let mut lat = run.latencies_us.clone();
        lat.sort_unstable();
        all.extend_from_slice(&lat);
        hosts.push(HostReport {
            host: h,
            requests: run.requests,
            completed: run.completed,
            failed: run.failed,
            bytes: run.bytes_completed,
            throughput_bytes_per_s: rate(run.bytes_completed, run.last_completion_us),
            p50_latency_us: percentile(&lat, 50.0),
            p95_latency_us: percentile(&lat, 95.0),
            p99_latency_us: percentile(&lat, 99.0),
        });
    }
    all.sort_unstable();

    let mut links = Vec::new();
    let mut total_link_bytes = 0;
    let mut metadata_link_bytes = 0;
    let mut bottleneck = (String::new(), -1.0f64);
    for (node, link) in san.fabric().links() {
        let [up, down] = link.stats();
        let busy = link.busy_fraction(makespan);
        total_link_bytes += link.total_bytes();
        if *node == NodeId::MetadataCenter {
            metadata_link_bytes = link.total_bytes();
        }
        if busy > bottleneck.1 {
            bottleneck = (node.to_string(), busy);
        }
        links.push(LinkReport {
            node: node.to_string(),
            busy_fraction: busy,
            bytes_to_switch: up.bytes,
            bytes_from_switch: down.bytes,
            data_bytes: up.data_bytes + down.data_bytes,
            messages: up.messages + down.messages,
        });
    }

    let relays = san
        .appliances()
        .iter()
        .map(|a| {
            let s = a.stats();
            RelayReport {
                node: a.node().to_string(),
                bytes_from_hosts: s.host_bytes_in,
                bytes_to_hosts: s.host_bytes_out,
                bytes_to_subsystems: s.backend_bytes_out,
                bytes_from_subsystems: s.backend_bytes_in,
            }
        })
        .collect();

    let (mut capacity, mut allocated) = (0, 0);
    for store in san.metadata_stores() {
        for pool in store.pools() {
            capacity += pool.capacity_extents();
            allocated += pool.allocated_extents();
        }
    }
    let (mut cache_hits, mut resolves, mut re_resolves, mut stale) = (0, 0, 0, 0);
    for h in 0..san.host_count() {
        let d = san.driver(h).stats();
        cache_hits += d.cache_hits;
        resolves += d.resolves_sent;
        re_resolves += d.re_resolves;
        stale += d.stale_epochs;
    }

    RunReport {
        architecture: san.mode(),
        appliance_count: san.appliance_count(),
        seed: config.seed,
        workload_id: workload_id(config),
        makespan_us: makespan,
        total_bytes,
        throughput_bytes_per_s: rate(total_bytes, makespan),
        p50_latency_us: percentile(&all, 50.0),
        p95_latency_us: percentile(&all, 95.0),
        p99_latency_us: percentile(&all, 99.0),
        hosts,
        links,
        relays,
        bottleneck: bottleneck.0,
        bottleneck_busy_fraction: bottleneck.1.max(0.0),
        data_messages: san.data_deliveries(),
        control_messages: san.control_deliveries(),
        control_messages_per_io: if requests == 0 {
            0.0
        } else {
            san.control_deliveries() as f64 / requests as f64
        },
        metadata_link_bytes,
        total_link_bytes,
        pool_utilization: if capacity == 0 { 0.0 } else { allocated as f64 / capacity as f64 },
        allocated_extents: allocated,
        cache_hits,
        resolves,
        re_resolves,
        stale_epochs: stale,
        migrations_completed: san.migrations_completed(),
        events: san.events_processed(),
        trace_events: san.trace().count(),
        trace_hash: san.trace().hash(),
    }
}

fn rate(bytes: u64, us: u64) -> f64 {
    if us == 0 {
        0.0
    } else {
        bytes as f64 * 1e6 / us as f64
    }
}

/// Runs `config` once per mode, each simulation on its own thread.
pub fn compare(config: &ScenarioConfig, modes: &[ArchitectureMode]) -> Result<Vec<RunReport>, ReportError> {
    let results: Vec<Result<RunReport, SanError>> = std::thread::scope(|s| {
        let handles: Vec<_> = modes
            .iter()
            .map(|&mode| {
                let mut c = config.clone();
                c.architecture = mode;
                s.spawn(move || run(&c))
            })
            .collect();
        handles.into_iter().map(|h| h.join().expect("simulation thread panicked")).collect()
    });
    let reports = results.into_iter().collect::<Result<Vec<_>, _>>()?;
    check_same_workload(&reports)?;
    Ok(reports)
}

/// Fails unless every report ran the same offered load.
pub fn check_same_workload(reports: &[RunReport]) -> Result<(), ReportError> {
    if reports.len() < 2 {
        return Err(ReportError::TooFew(reports.len()));
    }
    let first = &reports[0];
    for r in &reports[1..] {
        if r.workload_id != first.workload_id {
            return Err(ReportError::MismatchedWorkload(format!(
                "{} ran workload {}, {} ran workload {}",
                first.architecture,
                &first.workload_id[..12],
                r.architecture,
                &r.workload_id[..12]
            )));
        }
    }
    Ok(())
}

#[derive(Serialize)]
struct CsvRow<'a> {
    mode: &'a str,
    appliance_count: u32,
    makespan_us: u64,
    total_bytes: u64,
    throughput_mib_per_s: String,
    p50_latency_us: u64,
    p95_latency_us: u64,
    p99_latency_us: u64,
    control_messages_per_io: String,
    metadata_link_bytes: u64,
    pool_utilization: String,
    bottleneck: &'a str,
    bottleneck_busy_fraction: String,
    re_resolves: u64,
    trace_hash: &'a str,
}

/// One CSV row per report, after checking the workloads match.
pub fn comparison_csv(reports: &[RunReport]) -> Result<String, ReportError> {
    check_same_workload(reports)?;
    let mut w = csv::Writer::from_writer(Vec::new());
    for r in reports {
        w.serialize(CsvRow {
            mode: r.architecture.name(),
            appliance_count: r.appliance_count,
            makespan_us: r.makespan_us,
            total_bytes: r.total_bytes,
            throughput_mib_per_s: format!("{:.3}", r.throughput_mib_per_s()),
            p50_latency_us: r.p50_latency_us,
            p95_latency_us: r.p95_latency_us,
            p99_latency_us: r.p99_latency_us,
            control_messages_per_io: format!("{:.4}", r.control_messages_per_io),
            metadata_link_bytes: r.metadata_link_bytes,
            pool_utilization: format!("{:.4}", r.pool_utilization),
            bottleneck: &r.bottleneck,
            bottleneck_busy_fraction: format!("{:.4}", r.bottleneck_busy_fraction),
            re_resolves: r.re_resolves,
            trace_hash: &r.trace_hash,
        })?;
    }
    let bytes = w.into_inner().map_err(|e| csv::Error::from(e.into_error()))?;
    Ok(String::from_utf8(bytes).expect("csv is utf-8"))
}

#[cfg(test)]
mod tests {
    use super::*;

    #[test]
    fn nearest_rank() {
        let v: Vec<u64> = (1..=100).collect();
        assert_eq!(percentile(&v, 50.0), 50);
        assert_eq!(percentile(&v, 95.0), 95);
        assert_eq!(percentile(&v, 99.0), 99);
        assert_eq!(percentile(&[7], 99.0), 7);
        assert_eq!(percentile(&[], 50.0), 0);
        assert_eq!(percentile(&[1, 2, 3, 4], 50.0), 2);
        assert_eq!(percentile(&[1, 2, 3, 4], 51.0), 3);
    }
}
