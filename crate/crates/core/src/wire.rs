//! Protocol messages and their frame encoding.
//!
//! Every frame starts with a fixed 64-byte little-endian header:
//!
//! ```text
//! off  size  field
//!   0     1  kind
//!   1     1  status / flags
//!   2     6  reserved (zero)
//!   8     8  volume
//!  16     8  epoch
//!  24     8  tag
//!  32     8  lba / start / size
//!  40     4  len
//!  44     4  reserved (zero)
//!  48     8  aux (node code, target lba, subsystem id)
//!  56     4  body length
//!  60     4  reserved (zero)
//! ```
//!
//! followed by `body length` bytes of message-specific body.

use thiserror::Error;

use crate::extent::{ExtentState, MappingTable, PhysicalLocation, SubsystemId, VolumeId};
use crate::fabric::{NodeId, HEADER_BYTES};

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum IoOp {
    Read,
    Write,
}

/// Result codes carried in responses.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum IoStatus {
    Ok,
    StaleEpoch,
    AccessDenied,
    OutOfCapacity,
    PoolExhausted,
    UnknownVolume,
    OutOfRange,
    Unauthorized,
    IoFailed,
    Invalid,
}

impl IoStatus {
    pub fn code(self) -> u8 {
        match self {
            IoStatus::Ok => 0,
            IoStatus::StaleEpoch => 1,
            IoStatus::AccessDenied => 2,
            IoStatus::OutOfCapacity => 3,
            IoStatus::PoolExhausted => 4,
            IoStatus::UnknownVolume => 5,
            IoStatus::OutOfRange => 6,
            IoStatus::Unauthorized => 7,
            IoStatus::IoFailed => 8,
            IoStatus::Invalid => 9,
        }
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Some(match code {
            0 => IoStatus::Ok,
            1 => IoStatus::StaleEpoch,
            2 => IoStatus::AccessDenied,
            3 => IoStatus::OutOfCapacity,
            4 => IoStatus::PoolExhausted,
            5 => IoStatus::UnknownVolume,
            6 => IoStatus::OutOfRange,
            7 => IoStatus::Unauthorized,
            8 => IoStatus::IoFailed,
            9 => IoStatus::Invalid,
            _ => return None,
        })
    }
}

/// Identifies one piece of a host write for the applied-write audit log.
/// Simulation metadata only; never encoded.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub struct WriteOrigin {
    pub host: u32,
    pub request: u64,
    pub volume: VolumeId,
    pub vlba: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoReq {
    pub tag: u64,
    pub op: IoOp,
    pub volume: VolumeId,
    pub epoch: u64,
    pub lba: u64,
    pub len: u32,
    pub payload: Vec<u8>,
    pub origin: Option<WriteOrigin>,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub struct IoRsp {
    pub tag: u64,
    pub volume: VolumeId,
    pub epoch: u64,
    pub status: IoStatus,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct GrantSegment {
    pub vstart: u64,
    pub len: u64,
    /// `None` means the range is unallocated and reads as zeros.
    pub location: Option<PhysicalLocation>,
}

/// Answer to a path resolution: physical segments stamped with an epoch.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PathGrant {
    pub volume: VolumeId,
    pub segments: Vec<GrantSegment>,
    pub epoch: u64,
    pub granted_to: NodeId,
}

impl PathGrant {
    pub fn zero_fill(&self) -> bool {
        self.segments.iter().any(|s| s.location.is_none())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Invalidation {
    pub volume: VolumeId,
    pub new_epoch: u64,
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum VolumePolicyWire {
    Thin,
    FullyProvisioned,
    Striped { stripe_unit_blocks: u64, devices: Vec<SubsystemId> },
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum Body {
    ResolveReq { tag: u64, volume: VolumeId, start: u64, len: u32, for_write: bool },
    ResolveRsp { tag: u64, volume: VolumeId, result: Result<PathGrant, IoStatus> },
    Invalidate(Invalidation),
    MapPush { volume: VolumeId, epoch: u64, table: MappingTable },
    /// Newly mapped extents at an unchanged epoch.
    MapUpdate { volume: VolumeId, epoch: u64, extents: Vec<(u64, PhysicalLocation)> },
    CreateVolume { volume: VolumeId, size_blocks: u64, policy: VolumePolicyWire },
    RegisterSubsystem { subsystem: SubsystemId, capacity_blocks: u64 },
    MigrateExtent { volume: VolumeId, epoch: u64, from: PhysicalLocation, to: PhysicalLocation, len: u32 },
    CopyDone { volume: VolumeId, epoch: u64, status: IoStatus },
    /// Re-zones `[start, start+len)` of the receiving subsystem to `initiator`.
    Zone { start: u64, len: u32, initiator: NodeId },
    Fence { volume: VolumeId, epoch: u64 },
    FenceAck { volume: VolumeId, epoch: u64 },
    IoReq(IoReq),
    IoRsp(IoRsp),
}

impl Body {
    pub fn kind(&self) -> MessageKind {
        match self {
            Body::ResolveReq { .. } => MessageKind::ResolveReq,
            Body::ResolveRsp { .. } => MessageKind::ResolveRsp,
            Body::Invalidate(_) => MessageKind::Invalidate,
            Body::MapPush { .. } => MessageKind::MapPush,
            Body::MapUpdate { .. } => MessageKind::MapUpdate,
            Body::CreateVolume { .. } => MessageKind::CreateVolume,
            Body::RegisterSubsystem { .. } => MessageKind::RegisterSubsystem,
            Body::MigrateExtent { .. } => MessageKind::MigrateExtent,
            Body::CopyDone { .. } => MessageKind::CopyDone,
            Body::Zone { .. } => MessageKind::Zone,
            Body::Fence { .. } => MessageKind::Fence,
            Body::FenceAck { .. } => MessageKind::FenceAck,
            Body::IoReq(_) => MessageKind::IoReq,
            Body::IoRsp(_) => MessageKind::IoRsp,
        }
    }

    /// Block payload bytes carried (zero for control messages).
    pub fn data_bytes(&self) -> u64 {
        match self {
            Body::IoReq(r) => r.payload.len() as u64,
            Body::IoRsp(r) => r.payload.len() as u64,
            _ => 0,
        }
    }

    /// Encoded frame length, computed without encoding.
    pub fn frame_len(&self) -> u64 {
        HEADER_BYTES
            + match self {
                Body::ResolveRsp { result: Ok(g), .. } => 8 + g.segments.len() as u64 * SEGMENT_BYTES,
                Body::MapPush { table, .. } => table_len(table),
                Body::MapUpdate { extents, .. } => 4 + extents.len() as u64 * 20,
                Body::CreateVolume { policy, .. } => match policy {
                    VolumePolicyWire::Striped { devices, .. } => 13 + devices.len() as u64 * 4,
                    _ => 1,
                },
                Body::MigrateExtent { .. } => 8,
                Body::IoReq(r) => r.payload.len() as u64,
                Body::IoRsp(r) => r.payload.len() as u64,
                _ => 0,
            }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash)]
pub enum MessageKind {
    ResolveReq,
    ResolveRsp,
    Invalidate,
    MapPush,
    MapUpdate,
    CreateVolume,
    RegisterSubsystem,
    MigrateExtent,
    CopyDone,
    Zone,
    Fence,
    FenceAck,
    IoReq,
    IoRsp,
}

impl MessageKind {
    pub const ALL: [MessageKind; 14] = [
        MessageKind::ResolveReq,
        MessageKind::ResolveRsp,
        MessageKind::Invalidate,
        MessageKind::MapPush,
        MessageKind::MapUpdate,
        MessageKind::CreateVolume,
        MessageKind::RegisterSubsystem,
        MessageKind::MigrateExtent,
        MessageKind::CopyDone,
        MessageKind::Zone,
        MessageKind::Fence,
        MessageKind::FenceAck,
        MessageKind::IoReq,
        MessageKind::IoRsp,
    ];

    pub fn code(self) -> u8 {
        Self::ALL.iter().position(|k| *k == self).expect("listed") as u8 + 1
    }

    pub fn from_code(code: u8) -> Option<Self> {
        Self::ALL.get((code as usize).checked_sub(1)?).copied()
    }

    pub fn name(self) -> &'static str {
        match self {
            MessageKind::ResolveReq => "ResolveReq",
            MessageKind::ResolveRsp => "ResolveRsp",
            MessageKind::Invalidate => "Invalidate",
            MessageKind::MapPush => "MapPush",
            MessageKind::MapUpdate => "MapUpdate",
            MessageKind::CreateVolume => "CreateVolume",
            MessageKind::RegisterSubsystem => "RegisterSubsystem",
            MessageKind::MigrateExtent => "MigrateExtent",
            MessageKind::CopyDone => "CopyDone",
            MessageKind::Zone => "Zone",
            MessageKind::Fence => "Fence",
            MessageKind::FenceAck => "FenceAck",
            MessageKind::IoReq => "IoReq",
            MessageKind::IoRsp => "IoRsp",
        }
    }

    /// Data-plane kinds carry block payloads; everything else is control.
    pub fn is_data(self) -> bool {
        matches!(self, MessageKind::IoReq | MessageKind::IoRsp)
    }
}

/// A message in flight between two nodes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Message {
    pub src: NodeId,
    pub dst: NodeId,
    pub body: Body,
}

impl Message {
    pub fn new(src: NodeId, dst: NodeId, body: Body) -> Self {
        Self { src, dst, body }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Error)]
pub enum DecodeError {
    #[error("frame truncated")]
    Truncated,
    #[error("unknown message kind {0}")]
    UnknownKind(u8),
    #[error("bad field: {0}")]
    BadField(&'static str),
}

const SEGMENT_BYTES: u64 = 29;

/// Little-endian byte writer.
#[derive(Debug, Default, Clone)]
pub struct Encoder {
    buf: Vec<u8>,
}

impl Encoder {
    pub fn new() -> Self {
        Self::default()
    }

    pub fn u8(&mut self, v: u8) -> &mut Self {
        self.buf.push(v);
        self
    }

    pub fn u32(&mut self, v: u32) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn u64(&mut self, v: u64) -> &mut Self {
        self.buf.extend_from_slice(&v.to_le_bytes());
        self
    }

    pub fn bytes(&mut self, v: &[u8]) -> &mut Self {
        self.buf.extend_from_slice(v);
        self
    }

    pub fn len(&self) -> usize {
        self.buf.len()
    }

    pub fn is_empty(&self) -> bool {
        self.buf.is_empty()
    }

    pub fn finish(self) -> Vec<u8> {
        self.buf
    }
}

/// Little-endian byte reader.
#[derive(Debug, Clone)]
pub struct Decoder<'a> {
    buf: &'a [u8],
    pos: usize,
}

impl<'a> Decoder<'a> {
    pub fn new(buf: &'a [u8]) -> Self {
        Self { buf, pos: 0 }
    }

    pub fn take(&mut self, n: usize) -> Result<&'a [u8], DecodeError> {
        let end = self.pos.checked_add(n).ok_or(DecodeError::Truncated)?;
        let out = self.buf.get(self.pos..end).ok_or(DecodeError::Truncated)?;
        self.pos = end;
        Ok(out)
    }

    pub fn u8(&mut self) -> Result<u8, DecodeError> {
        Ok(self.take(1)?[0])
    }

    pub fn u32(&mut self) -> Result<u32, DecodeError> {
        Ok(u32::from_le_bytes(self.take(4)?.try_into().expect("4 bytes")))
    }

    pub fn u64(&mut self) -> Result<u64, DecodeError> {
        Ok(u64::from_le_bytes(self.take(8)?.try_into().expect("8 bytes")))
    }

    pub fn remaining(&self) -> usize {
        self.buf.len() - self.pos
    }
}

fn put_location(e: &mut Encoder, loc: PhysicalLocation) {
    e.u32(loc.subsystem.0).u64(loc.device_lba);
}

fn get_location(d: &mut Decoder<'_>) -> Result<PhysicalLocation, DecodeError> {
    let sub = d.u32()?;
    Ok(PhysicalLocation::new(SubsystemId(sub), d.u64()?))
}

fn table_len(t: &MappingTable) -> u64 {
    40 + t.extent_count() * 13
}

/// Serializes a mapping table (shared by `MapPush` and metadata snapshots).
pub fn encode_table(e: &mut Encoder, t: &MappingTable) {
    e.u64(t.volume().0)
        .u64(t.size_blocks())
        .u64(t.extent_size_blocks())
        .u64(t.epoch())
        .u64(t.extent_count());
    for ext in t.extents() {
        match ext.state {
            ExtentState::Unallocated => {
                e.u8(0).u32(0).u64(0);
            }
            ExtentState::Mapped(loc) => {
                e.u8(1);
                put_location(e, loc);
            }
        }
    }
}

pub fn decode_table(d: &mut Decoder<'_>) -> Result<MappingTable, DecodeError> {
    let volume = VolumeId(d.u64()?);
    let size = d.u64()?;
    let ext = d.u64()?;
    let epoch = d.u64()?;
    let count = d.u64()?;
    if count.saturating_mul(13) > d.remaining() as u64 {
        return Err(DecodeError::Truncated);
    }
    let mut extents = Vec::with_capacity(count as usize);
    for _ in 0..count {
        let tag = d.u8()?;
        let loc = get_location(d)?;
        extents.push(match tag {
            0 => ExtentState::Unallocated,
            1 => ExtentState::Mapped(loc),
            _ => return Err(DecodeError::BadField("extent state")),
        });
    }
    MappingTable::from_parts(volume, size, ext, extents, epoch).map_err(|_| DecodeError::BadField("table geometry"))
}

#[derive(Default)]
struct Header {
    kind: u8,
    status: u8,
    volume: u64,
    epoch: u64,
    tag: u64,
    lba: u64,
    len: u32,
    aux: u64,
}

fn node_code(n: NodeId) -> u64 {
    n.code() as u64
}

fn node_from(v: u64) -> Result<NodeId, DecodeError> {
    u32::try_from(v)
        .ok()
        .and_then(NodeId::from_code)
        .ok_or(DecodeError::BadField("node id"))
}

/// Encodes a message body into a frame.
pub fn encode(body: &Body) -> Vec<u8> {
    let mut h = Header {
        kind: body.kind().code(),
        ..Header::default()
    };
    let mut b = Encoder::new();
    match body {
        Body::ResolveReq { tag, volume, start, len, for_write } => {
            h.tag = *tag;
            h.volume = volume.0;
            h.lba = *start;
            h.len = *len;
            h.status = u8::from(*for_write);
        }
        Body::ResolveRsp { tag, volume, result } => {
            h.tag = *tag;
            h.volume = volume.0;
            match result {
                Ok(g) => {
                    h.epoch = g.epoch;
                    b.u32(g.granted_to.code()).u32(g.segments.len() as u32);
                    for s in &g.segments {
                        b.u64(s.vstart).u64(s.len);
                        match s.location {
                            Some(loc) => {
                                b.u8(1);
                                put_location(&mut b, loc);
                            }
                            None => {
                                b.u8(0).u32(0).u64(0);
                            }
                        }
                    }
                }
                Err(status) => h.status = status.code(),
            }
        }
        Body::Invalidate(inv) => {
            h.volume = inv.volume.0;
            h.epoch = inv.new_epoch;
        }
        Body::MapPush { volume, epoch, table } => {
            h.volume = volume.0;
            h.epoch = *epoch;
            encode_table(&mut b, table);
        }
        Body::MapUpdate { volume, epoch, extents } => {
            h.volume = volume.0;
            h.epoch = *epoch;
            b.u32(extents.len() as u32);
            for (idx, loc) in extents {
                b.u64(*idx);
                put_location(&mut b, *loc);
            }
        }
        Body::CreateVolume { volume, size_blocks, policy } => {
            h.volume = volume.0;
            h.lba = *size_blocks;
            match policy {
                VolumePolicyWire::Thin => {
                    b.u8(0);
                }
                VolumePolicyWire::FullyProvisioned => {
                    b.u8(1);
                }
                VolumePolicyWire::Striped { stripe_unit_blocks, devices } => {
                    b.u8(2).u64(*stripe_unit_blocks).u32(devices.len() as u32);
                    for d in devices {
                        b.u32(d.0);
                    }
                }
            }
        }
        Body::RegisterSubsystem { subsystem, capacity_blocks } => {
            h.lba = *capacity_blocks;
            h.aux = subsystem.0 as u64;
        }
        Body::MigrateExtent { volume, epoch, from, to, len } => {
            h.volume = volume.0;
            h.epoch = *epoch;
            h.lba = from.device_lba;
            h.aux = to.device_lba;
            h.len = *len;
            b.u32(from.subsystem.0).u32(to.subsystem.0);
        }
        Body::CopyDone { volume, epoch, status } => {
            h.volume = volume.0;
            h.epoch = *epoch;
            h.status = status.code();
        }
        Body::Zone { start, len, initiator } => {
            h.lba = *start;
            h.len = *len;
            h.aux = node_code(*initiator);
        }
        Body::Fence { volume, epoch } | Body::FenceAck { volume, epoch } => {
            h.volume = volume.0;
            h.epoch = *epoch;
        }
        Body::IoReq(r) => {
            h.tag = r.tag;
            h.status = match r.op {
                IoOp::Read => 0,
                IoOp::Write => 1,
            };
            h.volume = r.volume.0;
            h.epoch = r.epoch;
            h.lba = r.lba;
            h.len = r.len;
            b.bytes(&r.payload);
        }
        Body::IoRsp(r) => {
            h.tag = r.tag;
            h.status = r.status.code();
            h.volume = r.volume.0;
            h.epoch = r.epoch;
            b.bytes(&r.payload);
        }
    }
    let body_bytes = b.finish();
    let mut out = Encoder::new();
    out.u8(h.kind)
        .u8(h.status)
        .bytes(&[0; 6])
        .u64(h.volume)
        .u64(h.epoch)
        .u64(h.tag)
        .u64(h.lba)
        .u32(h.len)
        .u32(0)
        .u64(h.aux)
        .u32(body_bytes.len() as u32)
        .u32(0);
    debug_assert_eq!(out.len() as u64, HEADER_BYTES);
    out.bytes(&body_bytes);
    out.finish()
}

/// Decodes one frame. `origin` audit tags are not part of the wire format.
pub fn decode(frame: &[u8]) -> Result<Body, DecodeError> {
    let mut d = Decoder::new(frame);
    let kind_code = d.u8()?;
    let kind = MessageKind::from_code(kind_code).ok_or(DecodeError::UnknownKind(kind_code))?;
    let status = d.u8()?;
    d.take(6)?;
    let volume = VolumeId(d.u64()?);
    let epoch = d.u64()?;
    let tag = d.u64()?;
    let lba = d.u64()?;
    let len = d.u32()?;
    d.u32()?;
    let aux = d.u64()?;
    let body_len = d.u32()? as usize;
    d.u32()?;
    let body = d.take(body_len)?;
    let mut b = Decoder::new(body);
    let st = |code: u8| IoStatus::from_code(code).ok_or(DecodeError::BadField("status"));
    let out = match kind {
        MessageKind::ResolveReq => Body::ResolveReq {
            tag,
            volume,
            start: lba,
            len,
            for_write: status != 0,
        },
        MessageKind::ResolveRsp => {
            let result = if body.is_empty() {
                Err(st(status)?)
            } else {
                let granted_to = node_from(b.u32()? as u64)?;
                let n = b.u32()?;
                let mut segments = Vec::with_capacity(n.min(1 << 16) as usize);
                for _ in 0..n {
                    let vstart = b.u64()?;
                    let slen = b.u64()?;
                    let present = b.u8()?;
                    let loc = get_location(&mut b)?;
                    segments.push(GrantSegment {
                        vstart,
                        len: slen,
                        location: (present != 0).then_some(loc),
                    });
                }
                Ok(PathGrant {
                    volume,
                    segments,
                    epoch,
                    granted_to,
                })
            };
            Body::ResolveRsp { tag, volume, result }
        }
        MessageKind::Invalidate => Body::Invalidate(Invalidation { volume, new_epoch: epoch }),
        MessageKind::MapPush => Body::MapPush {
            volume,
            epoch,
            table: decode_table(&mut b)?,
        },
        MessageKind::MapUpdate => {
            let n = b.u32()?;
            let mut extents = Vec::with_capacity(n.min(1 << 16) as usize);
            for _ in 0..n {
                let idx = b.u64()?;
                extents.push((idx, get_location(&mut b)?));
            }
            Body::MapUpdate { volume, epoch, extents }
        }
        MessageKind::CreateVolume => {
            let policy = match b.u8()? {
                0 => VolumePolicyWire::Thin,
                1 => VolumePolicyWire::FullyProvisioned,
                2 => {
                    let unit = b.u64()?;
                    let n = b.u32()?;
                    let mut devices = Vec::new();
                    for _ in 0..n {
                        devices.push(SubsystemId(b.u32()?));
                    }
                    VolumePolicyWire::Striped {
                        stripe_unit_blocks: unit,
                        devices,
                    }
                }
                _ => return Err(DecodeError::BadField("volume policy")),
            };
            Body::CreateVolume {
                volume,
                size_blocks: lba,
                policy,
            }
        }
        MessageKind::RegisterSubsystem => Body::RegisterSubsystem {
            subsystem: SubsystemId(u32::try_from(aux).map_err(|_| DecodeError::BadField("subsystem"))?),
            capacity_blocks: lba,
        },
        MessageKind::MigrateExtent => {
            let from_sub = SubsystemId(b.u32()?);
            let to_sub = SubsystemId(b.u32()?);
            Body::MigrateExtent {
                volume,
                epoch,
                from: PhysicalLocation::new(from_sub, lba),
                to: PhysicalLocation::new(to_sub, aux),
                len,
            }
        }
        MessageKind::CopyDone => Body::CopyDone {
            volume,
            epoch,
            status: st(status)?,
        },
        MessageKind::Zone => Body::Zone {
            start: lba,
            len,
            initiator: node_from(aux)?,
        },
        MessageKind::Fence => Body::Fence { volume, epoch },
        MessageKind::FenceAck => Body::FenceAck { volume, epoch },
        MessageKind::IoReq => Body::IoReq(IoReq {
            tag,
            op: match status {
                0 => IoOp::Read,
                1 => IoOp::Write,
                _ => return Err(DecodeError::BadField("io op")),
            },
            volume,
            epoch,
            lba,
            len,
            payload: body.to_vec(),
            origin: None,
        }),
        MessageKind::IoRsp => Body::IoRsp(IoRsp {
            tag,
            volume,
            epoch,
            status: st(status)?,
            payload: body.to_vec(),
        }),
    };
    Ok(out)
}
