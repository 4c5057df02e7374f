//! Scenario files: JSON with defaults, strict field checking and a
//! validation pass that reports every violation at once.

use std::collections::BTreeMap;
use std::fmt;
use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::extent::PlacementPolicy;
use crate::fabric::{LinkParams, NodeId, DEFAULT_MAX_EVENTS};
use crate::san::ArchitectureMode;
use crate::workload::{Pattern, WorkloadSpec};

pub const MIB: u64 = 1024 * 1024;
pub const GIB: u64 = 1024 * MIB;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SubsystemSpec {
    pub capacity_blocks: u64,
    #[serde(default = "default_service_latency")]
    pub service_latency_us: u64,
    #[serde(default = "default_internal_bandwidth")]
    pub internal_bandwidth_bytes_per_s: u64,
}

fn default_service_latency() -> u64 {
    50
}

fn default_internal_bandwidth() -> u64 {
    GIB
}

impl SubsystemSpec {
    pub fn with_capacity(capacity_blocks: u64) -> Self {
        Self {
            capacity_blocks,
            service_latency_us: default_service_latency(),
            internal_bandwidth_bytes_per_s: default_internal_bandwidth(),
        }
    }
}

/// Partial link parameters for one named node (`host0`, `app1`, `mdc`, `sub2`).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinkOverride {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub latency_us: Option<u64>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub bandwidth_bytes_per_s: Option<u64>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct LinksSpec {
    #[serde(default = "default_latency")]
    pub latency_us: u64,
    #[serde(default = "default_bandwidth")]
    pub bandwidth_bytes_per_s: u64,
    #[serde(default)]
    pub overrides: BTreeMap<String, LinkOverride>,
}

fn default_latency() -> u64 {
    LinkParams::default().latency_us
}

fn default_bandwidth() -> u64 {
    LinkParams::default().bandwidth_bytes_per_s
}

impl Default for LinksSpec {
    fn default() -> Self {
        Self {
            latency_us: default_latency(),
            bandwidth_bytes_per_s: default_bandwidth(),
            overrides: BTreeMap::new(),
        }
    }
}

impl LinksSpec {
    /// Effective parameters of `node`'s link to the switch.
    pub fn params_for(&self, node: NodeId) -> LinkParams {
        let o = self.overrides.get(&node.to_string()).copied().unwrap_or_default();
        LinkParams {
            latency_us: o.latency_us.unwrap_or(self.latency_us),
            bandwidth_bytes_per_s: o.bandwidth_bytes_per_s.unwrap_or(self.bandwidth_bytes_per_s),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case", deny_unknown_fields)]
pub enum PolicySpec {
    Thin,
    FullyProvisioned,
    Striped { devices: Vec<u32>, stripe_unit_blocks: u64 },
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct VolumeSpec {
    pub size_blocks: u64,
    #[serde(default = "default_policy")]
    pub policy: PolicySpec,
    /// Host that opens the volume and drives its workload. Defaults to the
    /// volume's index modulo the host count.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub owner: Option<u32>,
}

fn default_policy() -> PolicySpec {
    PolicySpec::Thin
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScenarioConfig {
    pub hosts: u32,
    pub subsystems: Vec<SubsystemSpec>,
    pub architecture: ArchitectureMode,
    #[serde(default)]
    pub links: LinksSpec,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub appliance_count: Option<u32>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub volumes: Option<Vec<VolumeSpec>>,
    #[serde(default)]
    pub workload: WorkloadSpec,
    #[serde(default = "default_seed")]
    pub seed: u64,
    #[serde(default = "default_block_size")]
    pub block_size: u64,
    #[serde(default = "default_extent_size")]
    pub extent_size_blocks: u64,
    #[serde(default)]
    pub placement: PlacementPolicy,
    #[serde(default = "default_max_events")]
    pub max_events: u64,
    /// Back subsystem stores with files in this directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub store_dir: Option<PathBuf>,
    /// Record every applied host write (for integrity checks).
    #[serde(default)]
    pub audit_writes: bool,
}

fn default_seed() -> u64 {
    1
}

fn default_block_size() -> u64 {
    4096
}

fn default_extent_size() -> u64 {
    1024
}

fn default_max_events() -> u64 {
    DEFAULT_MAX_EVENTS
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize)]
pub struct Violation {
    pub field: String,
    pub message: String,
}

impl fmt::Display for Violation {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(f, "{}: {}", self.field, self.message)
    }
}

#[derive(Debug, Error)]
pub enum ConfigError {
    #[error("parse error at line {line}, column {column}: {message}")]
    Parse { line: usize, column: usize, message: String },
    #[error("invalid scenario:\n{}", .0.iter().map(|v| format!("  - {v}")).collect::<Vec<_>>().join("\n"))]
    Validation(Vec<Violation>),
    #[error("cannot read {path}: {source}")]
    Io {
        path: PathBuf,
        #[source]
        source: std::io::Error,
    },
}

impl ConfigError {
    pub fn violations(&self) -> &[Violation] {
        match self {
            ConfigError::Validation(v) => v,
            _ => &[],
        }
    }
}

/// Reads, parses and validates a scenario file.
pub fn load_config(path: &Path) -> Result<ScenarioConfig, ConfigError> {
    let text = std::fs::read_to_string(path).map_err(|source| ConfigError::Io {
        path: path.to_path_buf(),
        source,
    })?;
    ScenarioConfig::from_json(&text)
}

impl ScenarioConfig {
    /// A scenario with every optional field at its default.
    pub fn new(hosts: u32, subsystems: Vec<SubsystemSpec>, architecture: ArchitectureMode) -> Self {
        Self {
            hosts,
            subsystems,
            architecture,
            links: LinksSpec::default(),
            appliance_count: None,
            volumes: None,
            workload: WorkloadSpec::default(),
            seed: default_seed(),
            block_size: default_block_size(),
            extent_size_blocks: default_extent_size(),
            placement: PlacementPolicy::default(),
            max_events: default_max_events(),
            store_dir: None,
            audit_writes: false,
        }
    }

    pub fn from_json(text: &str) -> Result<Self, ConfigError> {
        let cfg: Self = serde_json::from_str(text).map_err(|e| ConfigError::Parse {
            line: e.line(),
            column: e.column(),
            message: e.to_string(),
        })?;
        cfg.validate()?;
        Ok(cfg)
    }

    /// Pretty JSON with sorted keys and every default spelled out.
    pub fn to_canonical_json(&self) -> String {
        let value = serde_json::to_value(self).expect("config serializes");
        serde_json::to_string_pretty(&value).expect("value serializes")
    }

    pub fn effective_appliance_count(&self) -> u32 {
        match self.architecture {
            ArchitectureMode::Symmetric => 1,
            ArchitectureMode::SemiSymmetric => self.appliance_count.unwrap_or(2),
            _ => 0,
        }
    }

    /// Blocks a volume needs to hold one host's workload, rounded up to whole extents.
    pub fn default_volume_blocks(&self) -> u64 {
        let blocks = self.workload.total_blocks(self.block_size).max(1);
        blocks.div_ceil(self.extent_size_blocks) * self.extent_size_blocks
    }

    /// Configured volumes, or one thin volume per host sized for its workload.
    pub fn effective_volumes(&self) -> Vec<VolumeSpec> {
        match &self.volumes {
            Some(v) => v
                .iter()
                .enumerate()
                .map(|(i, v)| VolumeSpec {
                    owner: Some(v.owner.unwrap_or(i as u32 % self.hosts.max(1))),
                    ..v.clone()
                })
                .collect(),
            None => (0..self.hosts)
                .map(|h| VolumeSpec {
                    size_blocks: self.default_volume_blocks(),
                    policy: PolicySpec::Thin,
                    owner: Some(h),
                })
                .collect(),
        }
    }

    pub fn validate(&self) -> Result<(), ConfigError> {
        let mut errs = Vec::new();
        let mut bad = |field: &str, message: String| {
            errs.push(Violation {
                field: field.to_string(),
                message,
            })
        };
        if self.hosts == 0 {
            bad("hosts", "at least one host is required".into());
        }
        if self.subsystems.is_empty() {
            bad("subsystems", "at least one subsystem is required".into());
        }
        for (i, s) in self.subsystems.iter().enumerate() {
            if s.capacity_blocks < self.extent_size_blocks.max(1) {
                bad(
                    &format!("subsystems[{i}].capacity_blocks"),
                    format!("must hold at least one extent ({} blocks)", self.extent_size_blocks),
                );
            }
            if s.internal_bandwidth_bytes_per_s == 0 {
                bad(&format!("subsystems[{i}].internal_bandwidth_bytes_per_s"), "must be positive".into());
            }
        }
        if self.links.bandwidth_bytes_per_s == 0 {
            bad("links.bandwidth_bytes_per_s", "must be positive".into());
        }
        for (name, o) in &self.links.overrides {
            let field = format!("links.overrides.{name}");
            match name.parse::<NodeId>() {
                Ok(node) if self.node_exists(node) => {}
                Ok(_) => bad(&field, "no such node in this scenario".into()),
                Err(e) => bad(&field, e),
            }
            if o.bandwidth_bytes_per_s == Some(0) {
                bad(&format!("{field}.bandwidth_bytes_per_s"), "must be positive".into());
            }
        }
        let needs_box = matches!(self.architecture, ArchitectureMode::Symmetric | ArchitectureMode::SemiSymmetric);
        if needs_box && self.appliance_count == Some(0) {
            bad(
                "appliance_count",
                format!(
                    "architecture \"{}\" requires appliance_count >= 1, got 0",
                    self.architecture.name()
                ),
            );
        }
        if self.block_size == 0 {
            bad("block_size", "must be positive".into());
        }
        if self.extent_size_blocks == 0 {
            bad("extent_size_blocks", "must be positive".into());
        }
        if self.max_events == 0 {
            bad("max_events", "must be positive".into());
        }
        let w = &self.workload;
        if w.io_size_blocks == 0 {
            bad("workload.io_size_blocks", "must be at least 1".into());
        }
        if w.queue_depth == 0 {
            bad("workload.queue_depth", "must be at least 1".into());
        }
        if let Pattern::Mixed { read_fraction } = w.pattern {
            if !(0.0..=1.0).contains(&read_fraction) {
                bad("workload.pattern.mixed.read_fraction", format!("{read_fraction} is outside [0, 1]"));
            }
        }
        if let Some(volumes) = &self.volumes {
            if volumes.is_empty() {
                bad("volumes", "list is empty; omit it for one volume per host".into());
            }
            for (i, v) in volumes.iter().enumerate() {
                if v.size_blocks == 0 {
                    bad(&format!("volumes[{i}].size_blocks"), "must be at least 1".into());
                }
                if let Some(o) = v.owner {
                    if o >= self.hosts {
                        bad(&format!("volumes[{i}].owner"), format!("host {o} does not exist"));
                    }
                }
                if let PolicySpec::Striped {
                    devices,
                    stripe_unit_blocks,
                } = &v.policy
                {
                    let field = format!("volumes[{i}].policy.striped");
                    if devices.is_empty() {
                        bad(&format!("{field}.devices"), "must name at least one subsystem".into());
                    }
                    let mut seen = std::collections::BTreeSet::new();
                    for d in devices {
                        if *d as usize >= self.subsystems.len() {
                            bad(&format!("{field}.devices"), format!("subsystem {d} does not exist"));
                        }
                        if !seen.insert(d) {
                            bad(&format!("{field}.devices"), format!("subsystem {d} listed twice"));
                        }
                    }
                    if *stripe_unit_blocks == 0 || self.extent_size_blocks == 0 || stripe_unit_blocks % self.extent_size_blocks != 0 {
                        bad(
                            &format!("{field}.stripe_unit_blocks"),
                            format!("must be a positive multiple of extent_size_blocks ({})", self.extent_size_blocks),
                        );
                    }
                }
            }
            if w.total_bytes > 0 {
                for h in 0..self.hosts {
                    let owns = volumes
                        .iter()
                        .enumerate()
                        .any(|(i, v)| v.owner.unwrap_or(i as u32 % self.hosts.max(1)) == h);
                    if !owns {
                        bad("volumes", format!("host {h} owns no volume to run its workload on"));
                    }
                }
            }
        }
        if errs.is_empty() {
            Ok(())
        } else {
            Err(ConfigError::Validation(errs))
        }
    }

    fn node_exists(&self, node: NodeId) -> bool {
        match node {
            NodeId::Host(i) => i < self.hosts,
            NodeId::Subsystem(i) => (i as usize) < self.subsystems.len(),
            NodeId::Appliance(i) => i < self.effective_appliance_count().max(self.appliance_count.unwrap_or(0)),
            NodeId::MetadataCenter => true,
            NodeId::Switch => false,
        }
    }
}
