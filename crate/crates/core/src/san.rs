//! Architecture wiring and the simulation runtime.
//!
//! [`San::build`] turns a [`ScenarioConfig`] into nodes, links, zoning and
//! routing for one of the five virtualization methods; the resulting value
//! owns the event loop and exposes the same workload and inspection surface
//! whatever the method.

use std::collections::BTreeMap;
use std::fmt;
use std::str::FromStr;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::appliance::{appliance_for, Appliance};
use crate::config::{ConfigError, PolicySpec, ScenarioConfig, VolumeSpec};
use crate::control::{DataPath, MetadataCenter};
use crate::driver::{DriverError, IoCompletion, IoRequest, Routing, VolumeDriver, VolumeHandle, VolumeInfo};
use crate::extent::{MappingTable, StripeLayout, SubsystemId, VolumeId};
use crate::fabric::{Fabric, FabricError, NodeId, Simulation, TraceSink};
use crate::metadata::{MetadataError, MetadataStore, SnapshotError, VolumePolicy, DEFAULT_POOL};
use crate::node::{AppliedWrite, Outbox, Timer};
use crate::subsystem::{BlockStore, DeviceParams, Subsystem, SubsystemNode};
use crate::wire::{IoOp, Message};
use crate::workload::{generate_workload, WorkloadStream};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum ArchitectureMode {
    ServerLevel,
    SubsystemLevel,
    Symmetric,
    Asymmetric,
    SemiSymmetric,
}

impl ArchitectureMode {
    pub const ALL: [ArchitectureMode; 5] = [
        ArchitectureMode::ServerLevel,
        ArchitectureMode::SubsystemLevel,
        ArchitectureMode::Symmetric,
        ArchitectureMode::Asymmetric,
        ArchitectureMode::SemiSymmetric,
    ];

    pub fn name(self) -> &'static str {
        match self {
            ArchitectureMode::ServerLevel => "server_level",
            ArchitectureMode::SubsystemLevel => "subsystem_level",
            ArchitectureMode::Symmetric => "symmetric",
            ArchitectureMode::Asymmetric => "asymmetric",
            ArchitectureMode::SemiSymmetric => "semi_symmetric",
        }
    }

    /// Whether volumes may be opened by more than one host.
    pub fn allows_sharing(self) -> bool {
        matches!(self, ArchitectureMode::Symmetric | ArchitectureMode::SemiSymmetric)
    }

    fn routing(self) -> Routing {
        match self {
            ArchitectureMode::ServerLevel => Routing::ServerLevel,
            ArchitectureMode::SubsystemLevel => Routing::SubsystemLevel,
            ArchitectureMode::Symmetric => Routing::Symmetric,
            ArchitectureMode::Asymmetric => Routing::Asymmetric,
            ArchitectureMode::SemiSymmetric => Routing::SemiSymmetric,
        }
    }
}

impl fmt::Display for ArchitectureMode {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(self.name())
    }
}

impl FromStr for ArchitectureMode {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        Self::ALL
            .into_iter()
            .find(|m| m.name() == s)
            .ok_or_else(|| format!("unknown architecture {s:?} (expected one of server_level, subsystem_level, symmetric, asymmetric, semi_symmetric)"))
    }
}

#[derive(Debug, Error)]
pub enum SanError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("volume of {size_blocks} blocks exceeds the largest subsystem ({largest_blocks} blocks)")]
    TooLarge { size_blocks: u64, largest_blocks: u64 },
    #[error("invalid configuration: {0}")]
    InvalidConfig(String),
    #[error(transparent)]
    Metadata(#[from] MetadataError),
    #[error(transparent)]
    Driver(#[from] DriverError),
    #[error(transparent)]
    Snapshot(#[from] SnapshotError),
    #[error(transparent)]
    Fabric(#[from] FabricError),
    #[error("store I/O: {0}")]
    Io(#[from] std::io::Error),
}

impl SanError {
    /// True for errors caused by the scenario rather than by running it.
    pub fn is_config(&self) -> bool {
        matches!(
            self,
            SanError::Config(_) | SanError::TooLarge { .. } | SanError::InvalidConfig(_) | SanError::Metadata(_)
        )
    }
}

/// Who talks to whom in a built SAN.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Wiring {
    pub mode: ArchitectureMode,
    pub nodes: Vec<NodeId>,
    /// Every link, as `(node, switch)`.
    pub links: Vec<(NodeId, NodeId)>,
    /// Zoning per subsystem: `(subsystem, block range, initiator)`.
    pub acl: Vec<(NodeId, std::ops::Range<u64>, NodeId)>,
    /// `(control target, data target)` per host; `None` where the role does not exist.
    pub routes: Vec<(NodeId, Option<NodeId>, Option<NodeId>)>,
}

impl Wiring {
    /// Nodes whose zoning lets them reach the given subsystem directly.
    pub fn initiators_of(&self, subsystem: NodeId) -> Vec<NodeId> {
        let mut v: Vec<NodeId> = self.acl.iter().filter(|(s, _, _)| *s == subsystem).map(|(_, _, i)| *i).collect();
        v.sort();
        v.dedup();
        v
    }
}

#[derive(Debug)]
enum Event {
    Transmit(Message),
    AtSwitch(Message),
    Deliver(Message),
    Timer(NodeId, Timer),
}

#[derive(Debug, Clone, Copy)]
struct VolumeRecord {
    owner: u32,
    size_blocks: u64,
    /// Subsystem holding the volume in subsystem-level mode.
    home: Option<u32>,
}

/// Counters kept by the host-side workload runner.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct HostRun {
    pub requests: u64,
    pub completed: u64,
    pub failed: u64,
    pub bytes_requested: u64,
    pub bytes_completed: u64,
    pub latencies_us: Vec<u64>,
    pub last_completion_us: u64,
}

struct HostNode {
    driver: VolumeDriver,
    handles: BTreeMap<VolumeId, VolumeHandle>,
    stream: Option<(VolumeHandle, WorkloadStream)>,
    outstanding: u32,
    queue_depth: u32,
    think_time_us: u64,
    run: HostRun,
    record: bool,
    completions: Vec<IoCompletion>,
}

pub struct San {
    config: ScenarioConfig,
    mode: ArchitectureMode,
    appliance_count: u32,
    sim: Simulation<Event>,
    fabric: Fabric,
    trace: TraceSink,
    hosts: Vec<HostNode>,
    subsystems: Vec<SubsystemNode>,
    appliances: Vec<Appliance>,
    mdc: Option<MetadataCenter>,
    volumes: BTreeMap<VolumeId, VolumeRecord>,
    next_volume: u64,
    applied: Vec<AppliedWrite>,
    control_deliveries: u64,
    data_deliveries: u64,
    migrations_skipped: u64,
    workloads_started: bool,
}

impl San {
    /// Builds the SAN and creates the scenario's volumes, without starting any workload.
    pub fn build(config: &ScenarioConfig) -> Result<Self, SanError> {
        config.validate()?;
        let mode = config.architecture;
        let ext = config.extent_size_blocks;
        let bs = config.block_size;
        let appliance_count = config.effective_appliance_count();
        let mut fabric = Fabric::new();

        let mut subsystems = Vec::new();
        for (i, spec) in config.subsystems.iter().enumerate() {
            let id = SubsystemId(i as u32);
            let params = DeviceParams {
                capacity_blocks: spec.capacity_blocks,
                block_size: bs,
                service_latency_us: spec.service_latency_us,
                internal_bandwidth_bytes_per_s: spec.internal_bandwidth_bytes_per_s,
            };
            let store = match &config.store_dir {
                Some(dir) => {
                    std::fs::create_dir_all(dir)?;
                    BlockStore::file(&dir.join(format!("sub{i}.blocks")))?
                }
                None => BlockStore::memory(),
            };
            let mut node = SubsystemNode::new(Subsystem::with_store(id, params, store));
            node.set_audit(config.audit_writes);
            subsystems.push(node);
        }

        let central = || -> Result<MetadataStore, SanError> {
            let mut s = MetadataStore::with_policy(ext, config.placement);
            for (i, spec) in config.subsystems.iter().enumerate() {
                s.register_subsystem(SubsystemId(i as u32), spec.capacity_blocks)?;
            }
            Ok(s)
        };

        let mut appliances = Vec::new();
        let mut mdc = None;
        match mode {
            ArchitectureMode::ServerLevel => {}
            ArchitectureMode::SubsystemLevel => {
                for (i, node) in subsystems.iter_mut().enumerate() {
                    let mut s = MetadataStore::with_policy(ext, config.placement);
                    s.register_subsystem(SubsystemId(i as u32), config.subsystems[i].capacity_blocks)?;
                    node.set_embedded(s);
                }
            }
            ArchitectureMode::Symmetric => {
                appliances.push(Appliance::symmetric_owner(0, central()?, bs));
                for node in subsystems.iter_mut() {
                    let cap = node.device.capacity_blocks();
                    node.device.set_acl(0..cap, NodeId::Appliance(0)).expect("whole device");
                }
            }
            ArchitectureMode::Asymmetric => {
                mdc = Some(MetadataCenter::new(central()?, DataPath::Direct));
                for node in subsystems.iter_mut() {
                    node.enable_epoch_shim();
                }
            }
            ArchitectureMode::SemiSymmetric => {
                mdc = Some(MetadataCenter::new(central()?, DataPath::Presenter { appliance_count }));
                for i in 0..appliance_count {
                    appliances.push(Appliance::presenter(i, bs));
                }
            }
        }

        let mut hosts = Vec::new();
        for h in 0..config.hosts {
            let driver = if mode == ArchitectureMode::ServerLevel {
                let mut s = MetadataStore::with_policy(ext, config.placement);
                for (i, spec) in config.subsystems.iter().enumerate() {
                    let slots = spec.capacity_blocks / ext;
                    let n = config.hosts as u64;
                    let range = h as u64 * slots / n..(h as u64 + 1) * slots / n;
                    s.register_subsystem_slots(DEFAULT_POOL, SubsystemId(i as u32), spec.capacity_blocks, range.clone())?;
                    if !range.is_empty() {
                        subsystems[i]
                            .device
                            .set_acl(range.start * ext..range.end * ext, NodeId::Host(h))
                            .expect("partition within capacity");
                    }
                }
                VolumeDriver::with_local_store(h, s, bs)
            } else {
                VolumeDriver::new(h, mode.routing(), bs)
            };
            hosts.push(HostNode {
                driver,
                handles: BTreeMap::new(),
                stream: None,
                outstanding: 0,
                queue_depth: config.workload.queue_depth,
                think_time_us: config.workload.think_time_us,
                run: HostRun::default(),
                record: false,
                completions: Vec::new(),
            });
        }

        for h in 0..config.hosts {
            fabric.attach(NodeId::Host(h), config.links.params_for(NodeId::Host(h)));
        }
        for a in &appliances {
            fabric.attach(a.node(), config.links.params_for(a.node()));
        }
        if mdc.is_some() {
            fabric.attach(NodeId::MetadataCenter, config.links.params_for(NodeId::MetadataCenter));
        }
        for s in &subsystems {
            fabric.attach(s.node(), config.links.params_for(s.node()));
        }

        let mut san = San {
            config: config.clone(),
            mode,
            appliance_count,
            sim: Simulation::new(config.max_events),
            fabric,
            trace: TraceSink::new(),
            hosts,
            subsystems,
            appliances,
            mdc,
            volumes: BTreeMap::new(),
            next_volume: 0,
            applied: Vec::new(),
            control_deliveries: 0,
            data_deliveries: 0,
            migrations_skipped: 0,
            workloads_started: false,
        };
        for spec in config.effective_volumes() {
            let owner = spec.owner.expect("effective volumes carry owners");
            let v = san.create_volume(&spec, owner)?;
            san.open_volume(owner, v)?;
        }
        Ok(san)
    }

    pub fn mode(&self) -> ArchitectureMode {
        self.mode
    }

    pub fn config(&self) -> &ScenarioConfig {
        &self.config
    }

    pub fn appliance_count(&self) -> u32 {
        self.appliance_count
    }

    pub fn now(&self) -> u64 {
        self.sim.now()
    }

    pub fn events_processed(&self) -> u64 {
        self.sim.processed()
    }

    pub fn fabric(&self) -> &Fabric {
        &self.fabric
    }

    pub fn set_trace(&mut self, trace: TraceSink) {
        self.trace = trace;
    }

    pub fn trace(&self) -> &TraceSink {
        &self.trace
    }

    pub fn trace_mut(&mut self) -> &mut TraceSink {
        &mut self.trace
    }

    pub fn host_count(&self) -> u32 {
        self.hosts.len() as u32
    }

    pub fn driver(&self, host: u32) -> &VolumeDriver {
        &self.hosts[host as usize].driver
    }

    pub fn host_run(&self, host: u32) -> &HostRun {
        &self.hosts[host as usize].run
    }

    pub fn subsystem(&self, index: u32) -> &SubsystemNode {
        &self.subsystems[index as usize]
    }

    pub fn subsystems(&self) -> &[SubsystemNode] {
        &self.subsystems
    }

    pub fn appliances(&self) -> &[Appliance] {
        &self.appliances
    }

    pub fn metadata_center(&self) -> Option<&MetadataCenter> {
        self.mdc.as_ref()
    }

    pub fn volumes(&self) -> impl Iterator<Item = VolumeId> + '_ {
        self.volumes.keys().copied()
    }

    /// Volume driven by `host`'s workload (its first owned volume).
    pub fn volume_of(&self, host: u32) -> Option<VolumeId> {
        self.volumes.iter().find(|(_, r)| r.owner == host).map(|(v, _)| *v)
    }

    pub fn control_deliveries(&self) -> u64 {
        self.control_deliveries
    }

    pub fn data_deliveries(&self) -> u64 {
        self.data_deliveries
    }

    /// Migration requests that could not apply (nothing mapped, or no migration support).
    pub fn migrations_skipped(&self) -> u64 {
        self.migrations_skipped
            + self.mdc.as_ref().map_or(0, |m| m.stats().migrations_skipped)
            + self.appliances.iter().map(|a| a.stats().migrations_skipped).sum::<u64>()
    }

    pub fn migrations_completed(&self) -> u64 {
        self.mdc.as_ref().map_or(0, |m| m.stats().migrations_completed)
            + self.appliances.iter().map(|a| a.stats().migrations_completed).sum::<u64>()
            + self.subsystems.iter().map(|s| s.stats().internal_migrations).sum::<u64>()
    }

    /// Every host write in the order devices applied it (requires `audit_writes`).
    pub fn applied_writes(&self) -> &[AppliedWrite] {
        &self.applied
    }

    /// Static description of nodes, links, zoning and host routes.
    pub fn wiring(&self) -> Wiring {
        let mut nodes: Vec<NodeId> = self.fabric.links().map(|(n, _)| *n).collect();
        nodes.push(NodeId::Switch);
        let links = self.fabric.links().map(|(n, _)| (*n, NodeId::Switch)).collect();
        let mut acl = Vec::new();
        for s in &self.subsystems {
            for (range, init) in s.device.acl_entries() {
                acl.push((s.node(), range, init));
            }
        }
        let routes = (0..self.hosts.len() as u32)
            .map(|h| {
                let vol = self.volume_of(h);
                let (control, data) = match self.mode {
                    ArchitectureMode::ServerLevel => (None, None),
                    ArchitectureMode::SubsystemLevel => {
                        (None, vol.and_then(|v| self.volumes[&v].home).map(NodeId::Subsystem))
                    }
                    ArchitectureMode::Symmetric => (Some(NodeId::Appliance(0)), Some(NodeId::Appliance(0))),
                    ArchitectureMode::Asymmetric => (Some(NodeId::MetadataCenter), None),
                    ArchitectureMode::SemiSymmetric => (
                        Some(NodeId::MetadataCenter),
                        vol.map(|v| appliance_for(v, self.appliance_count)),
                    ),
                };
                (NodeId::Host(h), control, data)
            })
            .collect();
        Wiring {
            mode: self.mode,
            nodes,
            links,
            acl,
            routes,
        }
    }

    /// The authoritative mapping table of a volume.
    pub fn table(&self, volume: VolumeId) -> Option<&MappingTable> {
        let rec = self.volumes.get(&volume)?;
        self.store_for(rec)?.table(volume)
    }

    fn store_for(&self, rec: &VolumeRecord) -> Option<&MetadataStore> {
        match self.mode {
            ArchitectureMode::ServerLevel => self.hosts[rec.owner as usize].driver.local_store(),
            ArchitectureMode::SubsystemLevel => self.subsystems[rec.home? as usize].embedded(),
            ArchitectureMode::Symmetric => self.appliances[0].store(),
            ArchitectureMode::Asymmetric | ArchitectureMode::SemiSymmetric => self.mdc.as_ref().map(|m| m.store()),
        }
    }

    /// Every metadata store in the SAN (one per host, per subsystem, or a single central one).
    pub fn metadata_stores(&self) -> Vec<&MetadataStore> {
        match self.mode {
            ArchitectureMode::ServerLevel => self.hosts.iter().filter_map(|h| h.driver.local_store()).collect(),
            ArchitectureMode::SubsystemLevel => self.subsystems.iter().filter_map(|s| s.embedded()).collect(),
            ArchitectureMode::Symmetric => self.appliances.iter().filter_map(|a| a.store()).collect(),
            _ => self.mdc.iter().map(|m| m.store()).collect(),
        }
    }

    /// Creates a volume owned by `host`. Volume ids are global and sequential.
    pub fn create_volume(&mut self, spec: &VolumeSpec, host: u32) -> Result<VolumeId, SanError> {
        if host as usize >= self.hosts.len() {
            return Err(SanError::InvalidConfig(format!("host {host} does not exist")));
        }
        let id = VolumeId(self.next_volume);
        let ext = self.config.extent_size_blocks;
        let policy = match &spec.policy {
            PolicySpec::Thin => VolumePolicy::Thin,
            PolicySpec::FullyProvisioned => VolumePolicy::FullyProvisioned,
            PolicySpec::Striped {
                devices,
                stripe_unit_blocks,
            } => VolumePolicy::Striped(
                StripeLayout::new(devices.iter().map(|d| SubsystemId(*d)).collect(), *stripe_unit_blocks)
                    .map_err(MetadataError::from)?,
            ),
        };
        let mut home = None;
        match self.mode {
            ArchitectureMode::ServerLevel => {
                let store = self.hosts[host as usize].driver.local_store_mut().expect("server-level store");
                store.create_virtual_volume_with_id(id, DEFAULT_POOL, spec.size_blocks, policy)?;
                store.authorize(id, NodeId::Host(host))?;
            }
            ArchitectureMode::SubsystemLevel => {
                let n = self.subsystems.len();
                let usable = |s: &SubsystemNode| s.device.capacity_blocks() / ext * ext;
                let Some(h) = (0..n)
                    .map(|k| (id.0 as usize + k) % n)
                    .find(|&i| usable(&self.subsystems[i]) >= spec.size_blocks)
                else {
                    return Err(SanError::TooLarge {
                        size_blocks: spec.size_blocks,
                        largest_blocks: self.subsystems.iter().map(usable).max().unwrap_or(0),
                    });
                };
                if let VolumePolicy::Striped(layout) = &policy {
                    if layout.device_ids() != [SubsystemId(h as u32)] {
                        return Err(SanError::InvalidConfig(format!(
                            "volume {id} lives on subsystem {h}; a subsystem-level stripe cannot span other subsystems"
                        )));
                    }
                }
                let store = self.subsystems[h].embedded_mut().expect("embedded store");
                store.create_virtual_volume_with_id(id, DEFAULT_POOL, spec.size_blocks, policy)?;
                store.authorize(id, NodeId::Host(host))?;
                home = Some(h as u32);
            }
            ArchitectureMode::Symmetric => {
                let store = self.appliances[0].store_mut().expect("owner store");
                store.create_virtual_volume_with_id(id, DEFAULT_POOL, spec.size_blocks, policy)?;
                store.authorize(id, NodeId::Host(host))?;
            }
            ArchitectureMode::Asymmetric | ArchitectureMode::SemiSymmetric => {
                let mdc = self.mdc.as_mut().expect("metadata center");
                let store = mdc.store_mut();
                store.create_virtual_volume_with_id(id, DEFAULT_POOL, spec.size_blocks, policy)?;
                store.authorize(id, NodeId::Host(host))?;
                let table = store.table(id).expect("just created").clone();
                let initiator = if self.mode == ArchitectureMode::Asymmetric {
                    NodeId::Host(host)
                } else {
                    let app = appliance_for(id, self.appliance_count);
                    let NodeId::Appliance(a) = app else { unreachable!() };
                    self.appliances[a as usize].install_table(table.clone());
                    app
                };
                for (_, loc) in table.mapped() {
                    self.subsystems[loc.subsystem.0 as usize]
                        .device
                        .set_acl(loc.device_lba..loc.device_lba + ext, initiator)
                        .expect("allocated within capacity");
                }
            }
        }
        self.next_volume += 1;
        self.volumes.insert(
            id,
            VolumeRecord {
                owner: host,
                size_blocks: spec.size_blocks,
                home,
            },
        );
        Ok(id)
    }

    /// Opens `volume` on `host`. Only in-band methods let a second host share it.
    pub fn open_volume(&mut self, host: u32, volume: VolumeId) -> Result<VolumeHandle, SanError> {
        let rec = *self.volumes.get(&volume).ok_or(DriverError::UnknownVolume(volume))?;
        if host as usize >= self.hosts.len() {
            return Err(SanError::InvalidConfig(format!("host {host} does not exist")));
        }
        if rec.owner != host {
            if !self.mode.allows_sharing() {
                return Err(DriverError::Unauthorized(volume).into());
            }
            let node = NodeId::Host(host);
            match self.mode {
                ArchitectureMode::Symmetric => self.appliances[0].store_mut().expect("owner store").authorize(volume, node)?,
                _ => self.mdc.as_mut().expect("metadata center").store_mut().authorize(volume, node)?,
            }
        }
        let table = self.table(volume).expect("registered volume has a table");
        let data_target = match self.mode {
            ArchitectureMode::SubsystemLevel => NodeId::Subsystem(rec.home.expect("home subsystem")),
            ArchitectureMode::Symmetric => NodeId::Appliance(0),
            ArchitectureMode::SemiSymmetric => appliance_for(volume, self.appliance_count),
            ArchitectureMode::ServerLevel | ArchitectureMode::Asymmetric => NodeId::Host(host),
        };
        let info = VolumeInfo {
            volume,
            size_blocks: rec.size_blocks,
            extent_size_blocks: table.extent_size_blocks(),
            epoch: table.epoch(),
            data_target,
        };
        let h = &mut self.hosts[host as usize];
        let handle = h.driver.open_volume(info);
        h.handles.insert(volume, handle);
        Ok(handle)
    }

    /// Keep every completion (with read data) for [`Self::take_completions`].
    pub fn record_completions(&mut self, on: bool) {
        for h in &mut self.hosts {
            h.record = on;
            h.driver.set_keep_data(on);
        }
    }

    pub fn take_completions(&mut self, host: u32) -> Vec<IoCompletion> {
        std::mem::take(&mut self.hosts[host as usize].completions)
    }

    /// Submits one request from `host` at the current simulated time.
    pub fn submit(&mut self, host: u32, req: IoRequest) -> Result<u64, SanError> {
        let now = self.sim.now();
        let h = self.hosts.get_mut(host as usize).ok_or_else(|| SanError::InvalidConfig(format!("host {host} does not exist")))?;
        let handle = *h.handles.get(&req.volume).ok_or(DriverError::NotOpen(req.volume))?;
        let bytes = req.len * self.config.block_size;
        let mut out = Outbox::new(now);
        let id = h.driver.submit_io(handle, req, &mut out)?;
        h.run.requests += 1;
        h.run.bytes_requested += bytes;
        h.outstanding += 1;
        self.flush(out);
        self.collect(host);
        Ok(id)
    }

    /// Asks the volume's virtualization layer to relocate `extent` at time `at`.
    pub fn schedule_migration(&mut self, at: u64, volume: VolumeId, extent: u64) {
        let target = match self.mode {
            ArchitectureMode::ServerLevel => None,
            ArchitectureMode::SubsystemLevel => self.volumes.get(&volume).and_then(|r| r.home).map(NodeId::Subsystem),
            ArchitectureMode::Symmetric => Some(NodeId::Appliance(0)),
            ArchitectureMode::Asymmetric | ArchitectureMode::SemiSymmetric => Some(NodeId::MetadataCenter),
        };
        match target {
            Some(node) => {
                self.sim.schedule(at.max(self.sim.now()), Event::Timer(node, Timer::Migrate { volume, extent }));
            }
            None => self.migrations_skipped += 1,
        }
    }

    /// Starts every host's generated workload against its first owned volume.
    pub fn start_workloads(&mut self) {
        if self.workloads_started {
            return;
        }
        self.workloads_started = true;
        let now = self.sim.now();
        for h in 0..self.hosts.len() as u32 {
            let Some(volume) = self.volume_of(h) else { continue };
            let size = self.volumes[&volume].size_blocks;
            let stream = generate_workload(&self.config.workload, self.config.seed, h, size, self.config.block_size);
            let host = &mut self.hosts[h as usize];
            let handle = host.handles[&volume];
            host.stream = Some((handle, stream));
            for _ in 0..host.queue_depth {
                self.sim.schedule(now, Event::Timer(NodeId::Host(h), Timer::Issue));
            }
        }
    }

    /// Processes events until none remain. Returns the final clock.
    pub fn run_until_idle(&mut self) -> Result<u64, SanError> {
        while let Some((t, ev)) = self.pop()? {
            self.handle(t, ev);
        }
        self.trace.flush().map_err(std::io::Error::other)?;
        Ok(self.sim.now())
    }

    /// Processes every event due at or before `t`.
    pub fn run_until(&mut self, t: u64) -> Result<(), SanError> {
        while self.sim.peek_time().is_some_and(|at| at <= t) {
            let (at, ev) = self.pop()?.expect("peeked");
            self.handle(at, ev);
        }
        Ok(())
    }

    pub fn is_idle(&self) -> bool {
        self.sim.pending() == 0
    }

    fn pop(&mut self) -> Result<Option<(u64, Event)>, SanError> {
        if self.sim.processed() >= self.sim.max_events() && self.sim.pending() > 0 {
            return Err(FabricError::LivelockGuard(self.sim.processed()).into());
        }
        Ok(self.sim.pop())
    }

    fn handle(&mut self, now: u64, ev: Event) {
        match ev {
            Event::Transmit(msg) => self.transmit(now, msg),
            Event::AtSwitch(msg) => {
                let arrive = self
                    .fabric
                    .hop(msg.dst, false, msg.body.frame_len(), msg.body.data_bytes(), now)
                    .expect("every node is attached");
                self.sim.schedule(arrive, Event::Deliver(msg));
            }
            Event::Deliver(msg) => {
                let kind = msg.body.kind();
                self.trace.record(now, msg.src, msg.dst, kind.name(), msg.body.frame_len());
                if kind.is_data() {
                    self.data_deliveries += 1;
                } else {
                    self.control_deliveries += 1;
                }
                self.deliver(now, msg);
            }
            Event::Timer(node, timer) => self.fire(now, node, timer),
        }
    }

    fn transmit(&mut self, now: u64, msg: Message) {
        let at_switch = self
            .fabric
            .hop(msg.src, true, msg.body.frame_len(), msg.body.data_bytes(), now)
            .expect("every node is attached");
        self.sim.schedule(at_switch, Event::AtSwitch(msg));
    }

    fn deliver(&mut self, now: u64, msg: Message) {
        let mut out = Outbox::new(now);
        match msg.dst {
            NodeId::Host(h) => {
                self.hosts[h as usize].driver.on_message(msg, &mut out);
                self.flush(out);
                self.collect(h);
                return;
            }
            NodeId::Subsystem(i) => self.subsystems[i as usize].on_message(msg, &mut out),
            NodeId::Appliance(i) => self.appliances[i as usize].on_message(msg, &mut out),
            NodeId::MetadataCenter => {
                if let Some(m) = self.mdc.as_mut() {
                    m.on_message(msg, &mut out)
                }
            }
            NodeId::Switch => {}
        }
        self.flush(out);
    }

    fn fire(&mut self, now: u64, node: NodeId, timer: Timer) {
        let mut out = Outbox::new(now);
        match node {
            NodeId::Host(h) => {
                self.issue(h);
                return;
            }
            NodeId::Subsystem(i) => self.subsystems[i as usize].on_timer(timer, &mut out),
            NodeId::Appliance(i) => self.appliances[i as usize].on_timer(timer, &mut out),
            NodeId::MetadataCenter => {
                if let Some(m) = self.mdc.as_mut() {
                    m.on_timer(timer, &mut out)
                }
            }
            NodeId::Switch => {}
        }
        self.flush(out);
    }

    fn flush(&mut self, mut out: Outbox) {
        let now = out.now();
        for (at, msg) in out.take_messages() {
            if at <= now {
                self.transmit(now, msg);
            } else {
                self.sim.schedule(at, Event::Transmit(msg));
            }
        }
        for (at, node, timer) in out.timers.drain(..) {
            self.sim.schedule(at, Event::Timer(node, timer));
        }
        self.applied.append(&mut out.applied);
    }

    /// Issues the next workload request of `host` if its queue has room.
    fn issue(&mut self, host: u32) {
        let bs = self.config.block_size;
        let h = &mut self.hosts[host as usize];
        if h.outstanding >= h.queue_depth {
            return;
        }
        let Some((handle, stream)) = h.stream.as_mut() else { return };
        let Some(r) = stream.next() else { return };
        let handle = *handle;
        let req = match r.op {
            IoOp::Read => IoRequest::read(handle.volume, r.start, r.len),
            IoOp::Write => IoRequest::write(handle.volume, r.start, r.len, r.payload),
        };
        let now = self.sim.now();
        let mut out = Outbox::new(now);
        h.run.requests += 1;
        h.run.bytes_requested += r.len * bs;
        match h.driver.submit_io(handle, req, &mut out) {
            Ok(_) => h.outstanding += 1,
            Err(_) => {
                h.run.failed += 1;
                h.run.last_completion_us = h.run.last_completion_us.max(now);
            }
        }
        self.flush(out);
        self.collect(host);
    }

    fn collect(&mut self, host: u32) {
        loop {
            let bs = self.config.block_size;
            let h = &mut self.hosts[host as usize];
            let done = h.driver.take_completions();
            if done.is_empty() {
                return;
            }
            let mut refill = 0;
            for c in done {
                h.outstanding = h.outstanding.saturating_sub(1);
                h.run.last_completion_us = h.run.last_completion_us.max(c.completed_at);
                h.run.latencies_us.push(c.latency_us);
                if c.status == crate::wire::IoStatus::Ok {
                    h.run.completed += 1;
                    h.run.bytes_completed += c.len * bs;
                } else {
                    h.run.failed += 1;
                }
                if h.record {
                    h.completions.push(c);
                }
                if h.stream.is_some() {
                    refill += 1;
                }
            }
            let now = self.sim.now();
            if h.think_time_us > 0 {
                for _ in 0..refill {
                    self.sim.schedule(now + h.think_time_us, Event::Timer(NodeId::Host(host), Timer::Issue));
                }
            } else {
                for _ in 0..refill {
                    self.issue(host);
                }
            }
        }
    }

    /// Current content of a whole volume, read straight from the device stores.
    pub fn read_volume(&self, volume: VolumeId) -> Option<Vec<u8>> {
        let table = self.table(volume)?;
        let bs = self.config.block_size as usize;
        let ext = table.extent_size_blocks();
        let mut data = vec![0u8; table.size_blocks() as usize * bs];
        for (i, loc) in table.mapped() {
            let len = ext.min(table.size_blocks() - i * ext);
            let bytes = self.subsystems[loc.subsystem.0 as usize]
                .device
                .peek(loc.device_lba, len)
                .expect("mapped extent within capacity");
            let off = (i * ext) as usize * bs;
            data[off..off + bytes.len()].copy_from_slice(&bytes);
        }
        Some(data)
    }

    /// Snapshot of the central metadata store (asymmetric and semi-symmetric).
    pub fn metadata_snapshot(&self) -> Option<Vec<u8>> {
        self.mdc.as_ref().map(|m| m.store().snapshot())
    }

    /// Replaces the central metadata store with a restored snapshot.
    pub fn restore_metadata(&mut self, bytes: &[u8]) -> Result<(), SanError> {
        let store = MetadataStore::restore(bytes)?;
        let mdc = self
            .mdc
            .as_mut()
            .ok_or_else(|| SanError::InvalidConfig(format!("{} has no metadata center", self.mode)))?;
        mdc.replace_store(store);
        Ok(())
    }
}
