//! Deterministic per-host request streams.

use rand::{Rng, RngCore, SeedableRng};
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::wire::IoOp;

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Pattern {
    SequentialRead,
    SequentialWrite,
    RandomRead,
    RandomWrite,
    Mixed { read_fraction: f64 },
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct WorkloadSpec {
    #[serde(default = "default_pattern")]
    pub pattern: Pattern,
    #[serde(default = "default_io_size")]
    pub io_size_blocks: u64,
    /// Bytes each host transfers in total.
    #[serde(default = "default_total_bytes")]
    pub total_bytes: u64,
    #[serde(default = "default_queue_depth")]
    pub queue_depth: u32,
    #[serde(default)]
    pub think_time_us: u64,
}

fn default_pattern() -> Pattern {
    Pattern::Mixed { read_fraction: 0.7 }
}

fn default_io_size() -> u64 {
    8
}

fn default_total_bytes() -> u64 {
    4 << 20
}

fn default_queue_depth() -> u32 {
    8
}

/// OLTP-like default: 70% reads, 8-block requests, eight outstanding.
impl Default for WorkloadSpec {
    fn default() -> Self {
        Self {
            pattern: default_pattern(),
            io_size_blocks: default_io_size(),
            total_bytes: default_total_bytes(),
            queue_depth: default_queue_depth(),
            think_time_us: 0,
        }
    }
}

impl WorkloadSpec {
    /// Number of requests one host issues.
    pub fn request_count(&self, block_size: u64) -> u64 {
        self.total_blocks(block_size).div_ceil(self.io_size_blocks.max(1))
    }

    pub fn total_blocks(&self, block_size: u64) -> u64 {
        self.total_bytes.div_ceil(block_size)
    }
}

/// One generated request. `payload` is filled for writes.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct Request {
    pub index: u64,
    pub op: IoOp,
    pub start: u64,
    pub len: u64,
    pub payload: Vec<u8>,
}

#[derive(Debug, Clone)]
pub struct WorkloadStream {
    spec: WorkloadSpec,
    volume_blocks: u64,
    block_size: u64,
    rng: ChaCha8Rng,
    data_rng: ChaCha8Rng,
    index: u64,
    count: u64,
    blocks_left: u64,
    cursor: u64,
}

/// The request stream of `host`: a pure function of `(spec, seed, host)` and
/// the volume geometry.
pub fn generate_workload(spec: &WorkloadSpec, seed: u64, host: u32, volume_blocks: u64, block_size: u64) -> WorkloadStream {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(2 * host as u64);
    let mut data_rng = ChaCha8Rng::seed_from_u64(seed);
    data_rng.set_stream(2 * host as u64 + 1);
    WorkloadStream {
        spec: *spec,
        volume_blocks,
        block_size,
        rng,
        data_rng,
        index: 0,
        count: spec.request_count(block_size),
        blocks_left: spec.total_blocks(block_size),
        cursor: 0,
    }
}

impl WorkloadStream {
    pub fn spec(&self) -> &WorkloadSpec {
        &self.spec
    }

    pub fn remaining(&self) -> u64 {
        self.count - self.index
    }
}

impl Iterator for WorkloadStream {
    type Item = Request;

    fn next(&mut self) -> Option<Request> {
        if self.index >= self.count || self.volume_blocks == 0 {
            return None;
        }
        let len = self.spec.io_size_blocks.min(self.blocks_left).min(self.volume_blocks);
        self.blocks_left -= len.min(self.blocks_left);
        let random_start = |rng: &mut ChaCha8Rng| rng.gen_range(0..=self.volume_blocks - len);
        let (op, start) = match self.spec.pattern {
            Pattern::SequentialRead | Pattern::SequentialWrite => {
                if self.cursor + len > self.volume_blocks {
                    self.cursor = 0;
                }
                let start = self.cursor;
                self.cursor += len;
                let op = if matches!(self.spec.pattern, Pattern::SequentialRead) { IoOp::Read } else { IoOp::Write };
                (op, start)
            }
            Pattern::RandomRead => (IoOp::Read, random_start(&mut self.rng)),
            Pattern::RandomWrite => (IoOp::Write, random_start(&mut self.rng)),
            Pattern::Mixed { read_fraction } => {
                let read = self.rng.gen_bool(read_fraction.clamp(0.0, 1.0));
                let start = random_start(&mut self.rng);
                (if read { IoOp::Read } else { IoOp::Write }, start)
            }
        };
        let payload = if op == IoOp::Write {
            let mut p = vec![0u8; (len * self.block_size) as usize];
            self.data_rng.fill_bytes(&mut p);
            p
        } else {
            Vec::new()
        };
        let req = Request {
            index: self.index,
            op,
            start,
            len,
            payload,
        };
        self.index += 1;
        Some(req)
    }
}

#[cfg(test)]
mod tests {
    use super::*;

    fn spec(pattern: Pattern, io: u64, total: u64) -> WorkloadSpec {
        WorkloadSpec {
            pattern,
            io_size_blocks: io,
            total_bytes: total,
            queue_depth: 4,
            think_time_us: 0,
        }
    }

    #[test]
    fn same_inputs_same_stream() {
        let s = spec(Pattern::Mixed { read_fraction: 0.5 }, 8, 1 << 20);
        let a: Vec<_> = generate_workload(&s, 9, 2, 4096, 4096).collect();
        let b: Vec<_> = generate_workload(&s, 9, 2, 4096, 4096).collect();
        assert_eq!(a, b);
        let c: Vec<_> = generate_workload(&s, 9, 3, 4096, 4096).collect();
        assert_ne!(a, c);
    }

    #[test]
    fn sequential_write_arithmetic() {
        let s = spec(Pattern::SequentialWrite, 64, 64 << 20);
        let reqs: Vec<_> = generate_workload(&s, 1, 0, 16384, 4096).collect();
        assert_eq!(reqs.len(), 256);
        for (i, r) in reqs.iter().enumerate() {
            assert_eq!((r.op, r.start, r.len), (IoOp::Write, i as u64 * 64, 64));
            assert_eq!(r.payload.len(), 64 * 4096);
        }
    }

    #[test]
    fn mixed_read_fraction_within_three_sigma() {
        let s = spec(Pattern::Mixed { read_fraction: 0.7 }, 1, 10_000 * 512);
        let reads = generate_workload(&s, 5, 0, 1 << 20, 512)
            .filter(|r| r.op == IoOp::Read)
            .count() as f64;
        let (n, p) = (10_000f64, 0.7);
        let sigma = (n * p * (1.0 - p)).sqrt();
        assert!((reads - n * p).abs() <= 3.0 * sigma, "reads = {reads}");
    }

    #[test]
    fn random_addresses_stay_in_volume_and_cover_it() {
        let s = spec(Pattern::RandomWrite, 4, 4000 * 512);
        let mut lo = u64::MAX;
        let mut hi = 0;
        for r in generate_workload(&s, 5, 0, 100, 512) {
            assert!(r.start + r.len <= 100);
            lo = lo.min(r.start);
            hi = hi.max(r.start);
        }
        assert_eq!((lo, hi), (0, 96));
    }

    #[test]
    fn partial_tail_request() {
        let s = spec(Pattern::SequentialRead, 8, 20 * 512);
        let lens: Vec<u64> = generate_workload(&s, 0, 0, 64, 512).map(|r| r.len).collect();
        assert_eq!(lens, vec![8, 8, 4]);
    }
}
