//! Linear energy/latency accounting.
//!
//! Operations are counted into an [`OpTrace`]; [`energy_of`] prices the
//! counters with per-operation energies from [`CostParams`]. Latency is
//! tracked in clock cycles alongside the counters.

use std::fmt::Write as _;
use std::ops::{Add, AddAssign};
use std::path::Path;

use thiserror::Error;

use crate::config::{self, ConfigError, Entry};

#[derive(Debug, Error)]
pub enum CostError {
    #[error(transparent)]
    Config(#[from] ConfigError),
    #[error("line {line}: unknown cost key `{key}`")]
    UnknownKey { line: usize, key: String },
    #[error("line {line}: `{key}` = `{value}`: {reason}")]
    BadValue {
        line: usize,
        key: String,
        value: String,
        reason: &'static str,
    },
}

/// Per-operation costs. Energies in joules, latencies in cycles.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct CostParams {
    /// J per decision-node comparison.
    pub e_compare: f64,
    /// J per byte read from a data queue.
    pub e_mem_byte_read: f64,
    /// J per byte written to a data queue.
    pub e_mem_byte_write: f64,
    /// J per byte moved grove to grove by the handshake.
    pub e_handshake_byte: f64,
    /// J per label-probability add or divide.
    pub e_accumulate: f64,
    pub t_compare: u64,
    /// Cycles per queue-word (Γ bytes) access.
    pub t_mem_access: u64,
    /// Cycles per byte moved by the handshake.
    pub t_handshake: u64,
    pub clock_hz: f64,
}

impl Default for CostParams {
    fn default() -> Self {
        Self {
            e_compare: 3e-12,
            e_mem_byte_read: 1e-12,
            e_mem_byte_write: 1.5e-12,
            e_handshake_byte: 2e-12,
            e_accumulate: 2e-12,
            t_compare: 1,
            t_mem_access: 1,
            t_handshake: 2,
            clock_hz: 1e9,
        }
    }
}

pub const COST_KEYS: [&str; 9] = [
    "e_compare",
    "e_mem_byte_read",
    "e_mem_byte_write",
    "e_handshake_byte",
    "e_accumulate",
    "t_compare",
    "t_mem_access",
    "t_handshake",
    "clock_hz",
];

impl CostParams {
    /// Applies `key = value` overrides on top of the defaults.
    pub fn from_entries(entries: &[Entry]) -> Result<Self, CostError> {
        let mut p = Self::default();
        for e in entries {
            p.set(e)?;
        }
        Ok(p)
    }

    pub fn parse(text: &str) -> Result<Self, CostError> {
        Self::from_entries(&config::parse_kv(text)?)
    }

    fn set(&mut self, e: &Entry) -> Result<(), CostError> {
        let bad = |reason| CostError::BadValue {
            line: e.line,
            key: e.key.clone(),
            value: e.value.clone(),
            reason,
        };
        let energy = || -> Result<f64, CostError> {
            let v: f64 = e.value.parse().map_err(|_| bad("not a number"))?;
            if !v.is_finite() || v < 0.0 {
                return Err(bad("energy must be finite and non-negative"));
            }
            Ok(v)
        };
        let cycles = || -> Result<u64, CostError> {
            let v: u64 = e.value.parse().map_err(|_| bad("not a non-negative integer"))?;
            if v < 1 {
                return Err(bad("cycle counts must be at least 1"));
            }
            Ok(v)
        };
        match e.key.as_str() {
            "e_compare" => self.e_compare = energy()?,
            "e_mem_byte_read" => self.e_mem_byte_read = energy()?,
            "e_mem_byte_write" => self.e_mem_byte_write = energy()?,
            "e_handshake_byte" => self.e_handshake_byte = energy()?,
            "e_accumulate" => self.e_accumulate = energy()?,
            "t_compare" => self.t_compare = cycles()?,
            "t_mem_access" => self.t_mem_access = cycles()?,
            "t_handshake" => self.t_handshake = cycles()?,
            "clock_hz" => {
                let v: f64 = e.value.parse().map_err(|_| bad("not a number"))?;
                if !(v.is_finite() && v > 0.0) {
                    return Err(bad("clock must be positive"));
                }
                self.clock_hz = v;
            }
            _ => {
                return Err(CostError::UnknownKey {
                    line: e.line,
                    key: e.key.clone(),
                })
            }
        }
        Ok(())
    }

    /// Every key with its value; parses back to the same parameters.
    pub fn to_kv(&self) -> String {
        let mut s = String::new();
        let _ = writeln!(s, "e_compare = {:?}", self.e_compare);
        let _ = writeln!(s, "e_mem_byte_read = {:?}", self.e_mem_byte_read);
        let _ = writeln!(s, "e_mem_byte_write = {:?}", self.e_mem_byte_write);
        let _ = writeln!(s, "e_handshake_byte = {:?}", self.e_handshake_byte);
        let _ = writeln!(s, "e_accumulate = {:?}", self.e_accumulate);
        let _ = writeln!(s, "t_compare = {}", self.t_compare);
        let _ = writeln!(s, "t_mem_access = {}", self.t_mem_access);
        let _ = writeln!(s, "t_handshake = {}", self.t_handshake);
        let _ = writeln!(s, "clock_hz = {:?}", self.clock_hz);
        s
    }
}

pub fn load_cost_params(path: &Path) -> Result<CostParams, CostError> {
    CostParams::from_entries(&config::read_kv(path)?)
}

/// Operation counters for one input (or a merged batch).
#[derive(Debug, Clone, Copy, Default, PartialEq, Eq)]
pub struct OpTrace {
    pub comparisons: u64,
    pub bytes_read: u64,
    pub bytes_written: u64,
    pub handshake_bytes: u64,
    pub accumulate_ops: u64,
    pub cycles: u64,
}

impl Add for OpTrace {
    type Output = OpTrace;

    fn add(mut self, rhs: OpTrace) -> OpTrace {
        self += rhs;
        self
    }
}

impl AddAssign for OpTrace {
    fn add_assign(&mut self, rhs: OpTrace) {
        self.comparisons += rhs.comparisons;
        self.bytes_read += rhs.bytes_read;
        self.bytes_written += rhs.bytes_written;
        self.handshake_bytes += rhs.handshake_bytes;
        self.accumulate_ops += rhs.accumulate_ops;
        self.cycles += rhs.cycles;
    }
}

impl std::iter::Sum for OpTrace {
    fn sum<I: Iterator<Item = OpTrace>>(iter: I) -> OpTrace {
        iter.fold(OpTrace::default(), Add::add)
    }
}

pub fn energy_of(trace: &OpTrace, p: &CostParams) -> f64 {
    trace.comparisons as f64 * p.e_compare
        + trace.bytes_read as f64 * p.e_mem_byte_read
        + trace.bytes_written as f64 * p.e_mem_byte_write
        + trace.handshake_bytes as f64 * p.e_handshake_byte
        + trace.accumulate_ops as f64 * p.e_accumulate
}

/// Energy-delay product in J·s.
pub fn edp(energy_j: f64, latency_cycles: f64, p: &CostParams) -> f64 {
    energy_j * (latency_cycles / p.clock_hz)
}

/// Compute latency of one processing-element pass.
///
/// Trees are evaluated in batches of `parallelism`, in grove order; each
/// batch takes as long as its deepest walk. Folding the grove result into
/// the probability array costs one cycle-equivalent of `t_compare` per
/// label.
pub fn pe_compute_cycles(
    tree_comparisons: &[usize],
    parallelism: usize,
    n_labels: usize,
    p: &CostParams,
) -> u64 {
    let batch = parallelism.max(1);
    let walk: u64 = tree_comparisons
        .chunks(batch)
        .map(|c| c.iter().copied().max().unwrap_or(0) as u64)
        .sum();
    walk * p.t_compare + n_labels as u64 * p.t_compare
}

/// One processing-element visit: read the queue word, walk every tree,
/// fold the grove mean into the probability array, write the word back.
pub fn pe_visit_trace(
    tree_comparisons: &[usize],
    parallelism: usize,
    n_labels: usize,
    gamma: usize,
    p: &CostParams,
) -> OpTrace {
    OpTrace {
        comparisons: tree_comparisons.iter().sum::<usize>() as u64,
        bytes_read: gamma as u64,
        bytes_written: gamma as u64,
        handshake_bytes: 0,
        accumulate_ops: (n_labels * (tree_comparisons.len() + 1)) as u64,
        cycles: 2 * p.t_mem_access + pe_compute_cycles(tree_comparisons, parallelism, n_labels, p),
    }
}

/// Processor writes a fresh entry into a grove queue.
pub fn enqueue_trace(gamma: usize, p: &CostParams) -> OpTrace {
    OpTrace {
        bytes_written: gamma as u64,
        cycles: p.t_mem_access,
        ..OpTrace::default()
    }
}

/// Grove-to-grove copy of one Γ-byte entry.
pub fn handshake_trace(gamma: usize, p: &CostParams) -> OpTrace {
    OpTrace {
        handshake_bytes: gamma as u64,
        cycles: p.t_handshake * gamma as u64,
        ..OpTrace::default()
    }
}
