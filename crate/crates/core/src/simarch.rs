//! Discrete-event model of the grove ring accelerator.
//!
//! Each grove owns a byte-addressed data queue, a processing element (PE)
//! that runs the grove's trees, and one outgoing handshake register. The
//! processor drops new inputs at the back of their start grove's queue.
//! After a PE pass an entry is either emitted (confident, or out of hops)
//! or staged with `req` raised; the next grove copies it to the *front* of
//! its own queue and answers with a one-cycle `ack`.
//!
//! Queue word layout (Γ bytes):
//!
//! ```text
//! | hops | feature bytes (n_features) | id | probability bytes (n_labels) |
//! ```
//!
//! The bytes model storage only; the functional state of every entry is
//! carried at full precision so the simulator reproduces the functional
//! evaluator bit for bit.
//!
//! Backpressure never drops data: processor inserts wait for queue space,
//! and a transfer waits (req held, ack withheld) until the neighbour has a
//! free slot. The processor also stops injecting while the ring holds all
//! but one of its entry slots, so at least one slot always stays free.

use std::cmp::Reverse;
use std::collections::{BTreeMap, BinaryHeap};
use std::fmt;

use thiserror::Error;

use crate::costmodel::{self, CostParams, OpTrace};
use crate::dataset::Dataset;
use crate::fog::{self, EvalConfig, FogError, GroveSource};

/// Paper-default queue size in bytes; raised to 8 entries for wide inputs.
pub const DEFAULT_QUEUE_BYTES: usize = 6144;
pub const DEFAULT_MIN_QUEUE_ENTRIES: usize = 8;

#[derive(Debug, Error, PartialEq)]
pub enum SimError {
    #[error(transparent)]
    Eval(#[from] FogError),
    #[error("topology mismatch: {0}")]
    Topology(String),
    #[error("invalid sim config: {0}")]
    Config(String),
    #[error("simulation stalled at cycle {cycle} with {pending} inputs unfinished")]
    Stalled { cycle: u64, pending: usize },
}

/// Queue is out of space; the caller must hold the entry and retry.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Error)]
#[error("data queue full")]
pub struct Backpressure;

/// Queue word width: hops byte, features, id byte, one byte per label.
pub fn gamma(n_features: usize, n_labels: usize) -> usize {
    1 + n_features + 1 + n_labels
}

#[derive(Debug, Clone, PartialEq)]
pub struct QueueEntry {
    pub id: u64,
    /// Completed grove visits before the current one.
    pub hops: usize,
    pub payload: Vec<f64>,
    /// Running sum of grove distributions.
    pub prob_array: Vec<f64>,
    pub start_grove: usize,
}

impl QueueEntry {
    pub fn new(id: u64, payload: Vec<f64>, n_labels: usize, start_grove: usize) -> Self {
        Self {
            id,
            hops: 0,
            payload,
            prob_array: vec![0.0; n_labels],
            start_grove,
        }
    }

    fn encode(&self, out: &mut [u8]) {
        let nf = self.payload.len();
        out[0] = self.hops.min(u8::MAX as usize) as u8;
        for (b, &x) in out[1..1 + nf].iter_mut().zip(&self.payload) {
            *b = unit_byte(x);
        }
        out[1 + nf] = (self.id & 0xff) as u8;
        let seen = (self.hops + 1) as f64;
        for (b, &p) in out[2 + nf..].iter_mut().zip(&self.prob_array) {
            *b = unit_byte(p / seen);
        }
    }
}

fn unit_byte(x: f64) -> u8 {
    (x.clamp(0.0, 1.0) * 255.0).round() as u8
}

/// Byte ring buffer holding Γ-byte entries between `fr` and `bk`.
///
/// Usable storage is the largest multiple of Γ that fits the configured
/// capacity, so both pointers stay Γ-aligned across wrap-around.
#[derive(Debug, Clone)]
pub struct DataQueue {
    storage: Vec<u8>,
    gamma: usize,
    fr: usize,
    bk: usize,
    len: usize,
    reserved: usize,
    slots: Vec<Option<Slot>>,
}

#[derive(Debug, Clone)]
struct Slot {
    entry: QueueEntry,
    ready_at: u64,
}

impl DataQueue {
    pub fn new(capacity_bytes: usize, gamma: usize) -> Result<Self, SimError> {
        if gamma == 0 || capacity_bytes < gamma {
            return Err(SimError::Config(format!(
                "queue capacity {capacity_bytes} B cannot hold one {gamma} B entry"
            )));
        }
        let n_slots = capacity_bytes / gamma;
        Ok(Self {
            storage: vec![0; n_slots * gamma],
            gamma,
            fr: 0,
            bk: 0,
            len: 0,
            reserved: 0,
            slots: vec![None; n_slots],
        })
    }

    pub fn gamma(&self) -> usize {
        self.gamma
    }

    pub fn capacity_entries(&self) -> usize {
        self.slots.len()
    }

    pub fn usable_bytes(&self) -> usize {
        self.storage.len()
    }

    pub fn len(&self) -> usize {
        self.len
    }

    pub fn is_empty(&self) -> bool {
        self.len == 0
    }

    /// Entries plus slots promised to in-flight transfers.
    pub fn committed(&self) -> usize {
        self.len + self.reserved
    }

    pub fn has_space(&self) -> bool {
        self.committed() < self.capacity_entries()
    }

    pub fn fr(&self) -> usize {
        self.fr
    }

    pub fn bk(&self) -> usize {
        self.bk
    }

    /// Raw bytes of the entry at the given byte address.
    pub fn word(&self, addr: usize) -> &[u8] {
        &self.storage[addr..addr + self.gamma]
    }

    pub fn front(&self) -> Option<&QueueEntry> {
        if self.is_empty() {
            return None;
        }
        self.slots[self.fr / self.gamma].as_ref().map(|s| &s.entry)
    }

    fn front_ready_at(&self) -> Option<u64> {
        if self.is_empty() {
            return None;
        }
        self.slots[self.fr / self.gamma].as_ref().map(|s| s.ready_at)
    }

    /// Ids in processing order.
    pub fn ids(&self) -> Vec<u64> {
        (0..self.len)
            .map(|i| {
                let addr = (self.fr + i * self.gamma) % self.storage.len();
                self.slots[addr / self.gamma].as_ref().expect("occupied").entry.id
            })
            .collect()
    }

    fn write(&mut self, addr: usize, entry: QueueEntry, ready_at: u64) {
        entry.encode(&mut self.storage[addr..addr + self.gamma]);
        self.slots[addr / self.gamma] = Some(Slot { entry, ready_at });
        self.len += 1;
    }

    pub fn push_back(&mut self, entry: QueueEntry) -> Result<(), Backpressure> {
        self.push_back_at(entry, 0)
    }

    fn push_back_at(&mut self, entry: QueueEntry, ready_at: u64) -> Result<(), Backpressure> {
        if !self.has_space() {
            return Err(Backpressure);
        }
        let addr = self.bk;
        self.bk = (self.bk + self.gamma) % self.storage.len();
        self.write(addr, entry, ready_at);
        Ok(())
    }

    pub fn push_front(&mut self, entry: QueueEntry) -> Result<(), Backpressure> {
        self.push_front_at(entry, 0)
    }

    fn push_front_at(&mut self, entry: QueueEntry, ready_at: u64) -> Result<(), Backpressure> {
        if !self.has_space() {
            return Err(Backpressure);
        }
        let cap = self.storage.len();
        self.fr = (self.fr + cap - self.gamma) % cap;
        let addr = self.fr;
        self.write(addr, entry, ready_at);
        Ok(())
    }

    pub fn pop_front(&mut self) -> Option<QueueEntry> {
        if self.is_empty() {
            return None;
        }
        let slot = self.slots[self.fr / self.gamma].take().expect("occupied");
        self.fr = (self.fr + self.gamma) % self.storage.len();
        self.len -= 1;
        Some(slot.entry)
    }

    fn reserve(&mut self) -> Result<(), Backpressure> {
        if !self.has_space() {
            return Err(Backpressure);
        }
        self.reserved += 1;
        Ok(())
    }

    fn release(&mut self) {
        self.reserved -= 1;
    }

    /// Pointer discipline: both pointers Γ-aligned and the pointer gap
    /// agreeing with the entry count.
    pub fn check_pointers(&self) -> Result<(), String> {
        let cap = self.storage.len();
        if self.fr % self.gamma != 0 || self.bk % self.gamma != 0 {
            return Err(format!("misaligned fr={} bk={}", self.fr, self.bk));
        }
        let gap = (self.bk + cap - self.fr) % cap / self.gamma;
        let expected = self.len % self.capacity_entries();
        if gap != expected {
            return Err(format!(
                "pointer gap {gap} entries but {} stored",
                self.len
            ));
        }
        let occupied = self.slots.iter().filter(|s| s.is_some()).count();
        if occupied != self.len {
            return Err(format!("{occupied} slots occupied, len {}", self.len));
        }
        Ok(())
    }
}

#[derive(Debug, Clone)]
enum PeState {
    Idle,
    Busy { entry: QueueEntry, outcome: PeOutcome },
    /// Done and not confident, waiting for the handshake register.
    Blocked { entry: QueueEntry },
}

/// One grove: queue, PE, and the outgoing half of the handshake.
#[derive(Debug, Clone)]
pub struct GroveUnit {
    pub index: usize,
    pub queue: DataQueue,
    /// Entry waiting for (or undergoing) transfer to the next grove.
    pub staged: Option<QueueEntry>,
    pub req: bool,
    /// Raised by this grove for one cycle after a transfer lands here.
    pub ack: bool,
    transferring: bool,
    pe: PeState,
}

impl GroveUnit {
    pub fn new(index: usize, queue: DataQueue) -> Self {
        Self {
            index,
            queue,
            staged: None,
            req: false,
            ack: false,
            transferring: false,
            pe: PeState::Idle,
        }
    }

    /// New input from the processor: back of the queue, hops reset,
    /// probability array cleared.
    pub fn enqueue_from_processor(&mut self, mut entry: QueueEntry) -> Result<(), Backpressure> {
        entry.hops = 0;
        entry.prob_array.iter_mut().for_each(|p| *p = 0.0);
        self.queue.push_back(entry)
    }

    /// Partially classified input from the previous grove: front of the
    /// queue, hops incremented.
    pub fn enqueue_from_neighbor(&mut self, mut entry: QueueEntry) -> Result<(), Backpressure> {
        entry.hops += 1;
        self.queue.push_front(entry)
    }

    /// Places a low-confidence entry in the handshake register and raises
    /// `req`. Returns the entry back if the register is occupied.
    pub fn stage(&mut self, entry: QueueEntry) -> Result<(), QueueEntry> {
        if self.staged.is_some() {
            return Err(entry);
        }
        self.staged = Some(entry);
        self.req = true;
        Ok(())
    }

    /// Lowers single-cycle signals.
    pub fn end_cycle(&mut self) {
        self.ack = false;
    }
}

/// Copies `src`'s staged entry to the front of `dst`'s queue. On success
/// `dst` raises `ack`, `src` drops `req` and frees its register. When `dst`
/// is full nothing changes: `req` stays high and no ack is given.
pub fn handshake_transfer(
    src: &mut GroveUnit,
    dst: &mut GroveUnit,
    cost: &CostParams,
) -> Result<OpTrace, Backpressure> {
    let entry = src.staged.take().expect("handshake without a staged entry");
    debug_assert!(src.req);
    let g = dst.queue.gamma();
    if let Err(bp) = dst.enqueue_from_neighbor(entry.clone()) {
        src.staged = Some(entry);
        return Err(bp);
    }
    dst.ack = true;
    src.req = false;
    Ok(costmodel::handshake_trace(g, cost))
}

/// Result of one PE pass over an entry.
#[derive(Debug, Clone, PartialEq)]
pub struct PeOutcome {
    pub prob_norm: Vec<f64>,
    pub confidence: f64,
    pub confident: bool,
    pub trace: OpTrace,
}

/// Runs grove `grove` on the entry at the PE: adds the grove distribution
/// to the probability array, normalises by groves seen, and decides
/// whether the entry is finished.
pub fn pe_process<S: GroveSource + ?Sized>(
    source: &S,
    grove: usize,
    entry: &mut QueueEntry,
    eval: &EvalConfig,
    parallelism: usize,
    cost: &CostParams,
) -> PeOutcome {
    let out = source.predict(grove, &entry.payload);
    for (a, p) in entry.prob_array.iter_mut().zip(&out.prob) {
        *a += p;
    }
    let seen = entry.hops + 1;
    let denom = seen as f64;
    let prob_norm: Vec<f64> = entry.prob_array.iter().map(|a| a / denom).collect();
    let confidence = eval.confidence(&prob_norm);
    let confident = eval.should_stop(confidence, seen);
    let n_labels = prob_norm.len();
    let g = gamma(entry.payload.len(), n_labels);
    PeOutcome {
        trace: costmodel::pe_visit_trace(&out.tree_comparisons, parallelism, n_labels, g, cost),
        prob_norm,
        confidence,
        confident,
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Arrival {
    BatchAtZero,
    FixedInterval(u64),
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimConfig {
    pub n_groves: usize,
    pub trees_per_grove: usize,
    /// `None`: 6144 bytes, raised to hold at least 8 entries.
    pub queue_capacity_bytes: Option<usize>,
    /// Trees a PE evaluates concurrently.
    pub parallelism: usize,
    pub eval: EvalConfig,
    pub arrival: Arrival,
    pub record_events: bool,
}

impl SimConfig {
    pub fn new(n_groves: usize, trees_per_grove: usize, eval: EvalConfig) -> Self {
        Self {
            n_groves,
            trees_per_grove,
            queue_capacity_bytes: None,
            parallelism: 1,
            eval,
            arrival: Arrival::BatchAtZero,
            record_events: false,
        }
    }

    pub fn capacity_bytes(&self, gamma: usize) -> usize {
        self.queue_capacity_bytes
            .unwrap_or_else(|| DEFAULT_QUEUE_BYTES.max(DEFAULT_MIN_QUEUE_ENTRIES * gamma))
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
pub enum EventKind {
    EnqP,
    EnqN,
    PeStart,
    PeDone,
    Req,
    Ack,
    Emit,
}

impl EventKind {
    pub fn as_str(self) -> &'static str {
        match self {
            EventKind::EnqP => "ENQ_P",
            EventKind::EnqN => "ENQ_N",
            EventKind::PeStart => "PE_START",
            EventKind::PeDone => "PE_DONE",
            EventKind::Req => "REQ",
            EventKind::Ack => "ACK",
            EventKind::Emit => "EMIT",
        }
    }
}

/// One line of the event log: `cycle,grove,event,id,hops`.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct LogEvent {
    pub cycle: u64,
    pub grove: usize,
    pub kind: EventKind,
    pub id: u64,
    pub hops: usize,
}

impl fmt::Display for LogEvent {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        write!(
            f,
            "{},{},{},{},{}",
            self.cycle,
            self.grove,
            self.kind.as_str(),
            self.id,
            self.hops
        )
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimRecord {
    pub id: u64,
    pub label: usize,
    /// Groves consulted (stored hops + 1).
    pub hops: usize,
    pub start_grove: usize,
    pub confidence: f64,
    pub prob_norm: Vec<f64>,
    pub trace: OpTrace,
    pub energy_j: f64,
    /// Cycles spent being served: enqueue, PE passes and transfers.
    pub latency_cycles: u64,
    pub arrival_cycle: u64,
    pub emit_cycle: u64,
}

impl SimRecord {
    /// Arrival to emission, including time spent waiting in queues.
    pub fn turnaround_cycles(&self) -> u64 {
        self.emit_cycle - self.arrival_cycle
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SimStats {
    /// One record per input, ordered by id.
    pub records: Vec<SimRecord>,
    pub mean_energy_j: f64,
    pub mean_latency_cycles: f64,
    pub mean_turnaround_cycles: f64,
    pub makespan_cycles: u64,
    /// Classifications per second at the configured clock.
    pub throughput: f64,
    /// Mean energy times mean service latency, in J·s.
    pub edp: f64,
    pub queue_entries: usize,
    pub events: Vec<LogEvent>,
}

impl SimStats {
    pub fn start_groves(&self) -> Vec<usize> {
        self.records.iter().map(|r| r.start_grove).collect()
    }

    pub fn total_trace(&self) -> OpTrace {
        self.records.iter().map(|r| r.trace).sum()
    }

    pub fn accuracy(&self, truth: &[usize]) -> f64 {
        let correct = self
            .records
            .iter()
            .filter(|r| truth[r.id as usize] == r.label)
            .count();
        correct as f64 / self.records.len() as f64
    }

    pub fn avg_hops(&self) -> f64 {
        self.records.iter().map(|r| r.hops as f64).sum::<f64>() / self.records.len() as f64
    }
}

/// Simulates every row of `inputs` (row `i` is input id `i`), drawing
/// start groves the same way as the functional evaluator.
pub fn simulate<S: GroveSource + ?Sized>(
    inputs: &Dataset,
    source: &S,
    cfg: &SimConfig,
    cost: &CostParams,
) -> Result<SimStats, SimError> {
    let starts: Vec<usize> = (0..inputs.n_samples() as u64)
        .map(|id| fog::start_grove(cfg.eval.seed, id, cfg.n_groves.max(1)))
        .collect();
    simulate_with_starts(inputs, source, cfg, cost, &starts)
}

pub fn simulate_with_starts<S: GroveSource + ?Sized>(
    inputs: &Dataset,
    source: &S,
    cfg: &SimConfig,
    cost: &CostParams,
    starts: &[usize],
) -> Result<SimStats, SimError> {
    check_topology(source, cfg)?;
    cfg.eval.validate(cfg.n_groves, source.n_labels())?;
    if cfg.parallelism == 0 {
        return Err(SimError::Config("parallelism must be at least 1".into()));
    }
    if starts.len() != inputs.n_samples() {
        return Err(SimError::Config(format!(
            "{} start groves for {} inputs",
            starts.len(),
            inputs.n_samples()
        )));
    }
    if let Some(&s) = starts.iter().find(|&&s| s >= cfg.n_groves) {
        return Err(SimError::Config(format!("start grove {s} out of range")));
    }
    if let Arrival::FixedInterval(0) = cfg.arrival {
        return Err(SimError::Config("arrival interval must be at least 1".into()));
    }
    let g = gamma(inputs.n_features(), source.n_labels());
    let queue = DataQueue::new(cfg.capacity_bytes(g), g)?;
    let mut sim = Sim {
        source,
        inputs,
        cfg,
        cost,
        gamma: g,
        units: (0..cfg.n_groves)
            .map(|i| GroveUnit::new(i, queue.clone()))
            .collect(),
        starts,
        heap: BinaryHeap::new(),
        seq: 0,
        pending: std::collections::VecDeque::new(),
        next_dispatch: 0,
        in_flight: 0,
        ring_slots: cfg.n_groves * (queue.capacity_entries() + 2),
        traces: vec![OpTrace::default(); inputs.n_samples()],
        arrivals: vec![0; inputs.n_samples()],
        done: BTreeMap::new(),
        events: Vec::new(),
    };
    sim.run()?;
    Ok(sim.finish(queue.capacity_entries()))
}

fn check_topology<S: GroveSource + ?Sized>(source: &S, cfg: &SimConfig) -> Result<(), SimError> {
    let n = source.n_groves();
    if n == 0 || n != cfg.n_groves {
        return Err(SimError::Topology(format!(
            "model has {n} groves, config expects {}",
            cfg.n_groves
        )));
    }
    for i in 0..n {
        let size = source.grove_size(i);
        let ok = if i + 1 == n {
            size >= 1 && size <= cfg.trees_per_grove
        } else {
            size == cfg.trees_per_grove
        };
        if !ok {
            return Err(SimError::Topology(format!(
                "grove {i} has {size} trees, config expects {}",
                cfg.trees_per_grove
            )));
        }
    }
    Ok(())
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum Ev {
    Arrive(u64),
    PeDone(usize),
    TransferDone(usize),
    AckEnd(usize),
    Wake,
}

struct Sim<'a, S: GroveSource + ?Sized> {
    source: &'a S,
    inputs: &'a Dataset,
    cfg: &'a SimConfig,
    cost: &'a CostParams,
    gamma: usize,
    units: Vec<GroveUnit>,
    starts: &'a [usize],
    heap: BinaryHeap<Reverse<(u64, u64, Ev)>>,
    seq: u64,
    pending: std::collections::VecDeque<u64>,
    next_dispatch: u64,
    in_flight: usize,
    ring_slots: usize,
    traces: Vec<OpTrace>,
    arrivals: Vec<u64>,
    done: BTreeMap<u64, (PeOutcome, usize, u64)>,
    events: Vec<LogEvent>,
}

impl<S: GroveSource + ?Sized> Sim<'_, S> {
    fn schedule(&mut self, at: u64, ev: Ev) {
        self.seq += 1;
        self.heap.push(Reverse((at, self.seq, ev)));
    }

    fn log(&mut self, cycle: u64, grove: usize, kind: EventKind, id: u64, hops: usize) {
        if self.cfg.record_events {
            self.events.push(LogEvent {
                cycle,
                grove,
                kind,
                id,
                hops,
            });
        }
    }

    fn run(&mut self) -> Result<(), SimError> {
        let n = self.inputs.n_samples() as u64;
        match self.cfg.arrival {
            Arrival::BatchAtZero => {
                for id in 0..n {
                    self.schedule(0, Ev::Arrive(id));
                }
            }
            Arrival::FixedInterval(dt) => {
                for id in 0..n {
                    self.schedule(id * dt, Ev::Arrive(id));
                }
            }
        }
        let mut now = 0;
        while let Some(Reverse((t, _, ev))) = self.heap.pop() {
            now = t;
            self.handle(t, ev);
            while let Some(Reverse((t2, _, _))) = self.heap.peek() {
                if *t2 != t {
                    break;
                }
                let Reverse((_, _, ev)) = self.heap.pop().expect("peeked");
                self.handle(t, ev);
            }
            self.progress(t);
        }
        let finished = self.done.len();
        if finished != self.inputs.n_samples() {
            return Err(SimError::Stalled {
                cycle: now,
                pending: self.inputs.n_samples() - finished,
            });
        }
        Ok(())
    }

    fn handle(&mut self, t: u64, ev: Ev) {
        match ev {
            Ev::Arrive(id) => {
                self.arrivals[id as usize] = t;
                self.pending.push_back(id);
            }
            Ev::PeDone(g) => self.pe_done(t, g),
            Ev::TransferDone(src) => self.transfer_done(t, src),
            Ev::AckEnd(g) => self.units[g].end_cycle(),
            Ev::Wake => {}
        }
    }

    fn pe_done(&mut self, t: u64, g: usize) {
        let PeState::Busy { entry, outcome } =
            std::mem::replace(&mut self.units[g].pe, PeState::Idle)
        else {
            unreachable!("PE {g} finished while not busy");
        };
        self.log(t, g, EventKind::PeDone, entry.id, entry.hops);
        if outcome.confident {
            self.log(t, g, EventKind::Emit, entry.id, entry.hops);
            self.in_flight -= 1;
            self.done.insert(entry.id, (outcome, entry.hops + 1, t));
        } else {
            self.units[g].pe = PeState::Blocked { entry };
        }
    }

    fn transfer_done(&mut self, t: u64, src: usize) {
        let dst = (src + 1) % self.units.len();
        self.units[dst].queue.release();
        let (a, b) = pair_mut(&mut self.units, src, dst);
        let trace = handshake_transfer(a, b, self.cost).expect("slot was reserved");
        a.transferring = false;
        // the entry now sits at dst's front; make it ready next cycle
        let fr = b.queue.fr / b.queue.gamma;
        let slot = b.queue.slots[fr].as_mut().expect("just written");
        slot.ready_at = t + 1;
        let (id, hops) = (slot.entry.id, slot.entry.hops);
        self.traces[id as usize] += trace;
        self.log(t, dst, EventKind::EnqN, id, hops);
        self.log(t, dst, EventKind::Ack, id, hops);
        self.schedule(t + 1, Ev::AckEnd(dst));
        self.schedule(t + 1, Ev::Wake);
    }

    /// Fires every action enabled at cycle `t`, highest priority first,
    /// until nothing changes.
    fn progress(&mut self, t: u64) {
        let n = self.units.len();
        loop {
            let mut changed = false;

            // handshake transfers
            for g in 0..n {
                if self.units[g].staged.is_none() || self.units[g].transferring {
                    continue;
                }
                let dst = (g + 1) % n;
                if self.units[dst].queue.reserve().is_ok() {
                    self.units[g].transferring = true;
                    let dt = costmodel::handshake_trace(self.gamma, self.cost).cycles;
                    self.schedule(t + dt, Ev::TransferDone(g));
                    changed = true;
                }
            }

            // finished PEs move into a free handshake register
            for g in 0..n {
                if !matches!(self.units[g].pe, PeState::Blocked { .. }) || self.units[g].staged.is_some()
                {
                    continue;
                }
                let PeState::Blocked { entry } =
                    std::mem::replace(&mut self.units[g].pe, PeState::Idle)
                else {
                    unreachable!()
                };
                self.log(t, g, EventKind::Req, entry.id, entry.hops);
                self.units[g].stage(entry).expect("register checked free");
                changed = true;
            }

            // idle PEs pick up the front entry
            for g in 0..n {
                if !matches!(self.units[g].pe, PeState::Idle) {
                    continue;
                }
                match self.units[g].queue.front_ready_at() {
                    Some(r) if r <= t => {}
                    Some(r) => {
                        self.schedule(r, Ev::Wake);
                        continue;
                    }
                    None => continue,
                }
                let mut entry = self.units[g].queue.pop_front().expect("non-empty");
                self.log(t, g, EventKind::PeStart, entry.id, entry.hops);
                let outcome = pe_process(
                    self.source,
                    g,
                    &mut entry,
                    &self.cfg.eval,
                    self.cfg.parallelism,
                    self.cost,
                );
                self.traces[entry.id as usize] += outcome.trace;
                self.schedule(t + outcome.trace.cycles, Ev::PeDone(g));
                self.units[g].pe = PeState::Busy { entry, outcome };
                changed = true;
            }

            // processor: one insert per cycle, in arrival order
            if let Some(&id) = self.pending.front() {
                if t >= self.next_dispatch {
                    let g = self.starts[id as usize];
                    let room = self.units[g].queue.has_space() && self.in_flight + 2 <= self.ring_slots;
                    if room {
                        self.pending.pop_front();
                        let entry = QueueEntry::new(
                            id,
                            self.inputs.row(id as usize).to_vec(),
                            self.source.n_labels(),
                            g,
                        );
                        let unit = &mut self.units[g];
                        unit.enqueue_from_processor(entry).expect("space checked");
                        let bk = (unit.queue.bk + unit.queue.usable_bytes() - self.gamma)
                            % unit.queue.usable_bytes();
                        unit.queue.slots[bk / self.gamma]
                            .as_mut()
                            .expect("just written")
                            .ready_at = t + 1;
                        self.in_flight += 1;
                        self.traces[id as usize] += costmodel::enqueue_trace(self.gamma, self.cost);
                        self.log(t, g, EventKind::EnqP, id, 0);
                        self.next_dispatch = t + 1;
                        self.schedule(t + 1, Ev::Wake);
                        changed = true;
                    }
                }
            }

            if !changed {
                break;
            }
        }
    }

    fn finish(self, queue_entries: usize) -> SimStats {
        let records: Vec<SimRecord> = self
            .done
            .into_iter()
            .map(|(id, (outcome, hops, emit))| {
                let trace = self.traces[id as usize];
                SimRecord {
                    id,
                    label: crate::argmax(&outcome.prob_norm),
                    hops,
                    start_grove: self.starts[id as usize],
                    confidence: outcome.confidence,
                    energy_j: costmodel::energy_of(&trace, self.cost),
                    latency_cycles: trace.cycles,
                    prob_norm: outcome.prob_norm,
                    trace,
                    arrival_cycle: self.arrivals[id as usize],
                    emit_cycle: emit,
                }
            })
            .collect();
        let n = records.len().max(1) as f64;
        let mean_energy_j = records.iter().map(|r| r.energy_j).sum::<f64>() / n;
        let mean_latency_cycles = records.iter().map(|r| r.latency_cycles as f64).sum::<f64>() / n;
        let mean_turnaround_cycles =
            records.iter().map(|r| r.turnaround_cycles() as f64).sum::<f64>() / n;
        let makespan_cycles = records.iter().map(|r| r.emit_cycle).max().unwrap_or(0);
        let throughput = if makespan_cycles == 0 {
            0.0
        } else {
            records.len() as f64 / (makespan_cycles as f64 / self.cost.clock_hz)
        };
        SimStats {
            edp: costmodel::edp(mean_energy_j, mean_latency_cycles, self.cost),
            records,
            mean_energy_j,
            mean_latency_cycles,
            mean_turnaround_cycles,
            makespan_cycles,
            throughput,
            queue_entries,
            events: self.events,
        }
    }
}

fn pair_mut<T>(v: &mut [T], a: usize, b: usize) -> (&mut T, &mut T) {
    assert_ne!(a, b);
    if a < b {
        let (lo, hi) = v.split_at_mut(b);
        (&mut lo[a], &mut hi[0])
    } else {
        let (lo, hi) = v.split_at_mut(a);
        (&mut hi[0], &mut lo[b])
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum Place {
    Processor,
    Queue(usize),
    Pe(usize),
    Stage(usize),
    Output,
}

/// Replays an event log and checks that every id sits in exactly one
/// place at all times, that queues never exceed `queue_entries`, and that
/// every input ends in the output queue exactly once.
pub fn check_residency(
    events: &[LogEvent],
    n_inputs: usize,
    n_groves: usize,
    queue_entries: usize,
) -> Result<(), String> {
    let mut place = vec![Place::Processor; n_inputs];
    let mut occupancy = vec![0usize; n_groves];
    let mut last_cycle = 0;
    for (i, e) in events.iter().enumerate() {
        let id = e.id as usize;
        if id >= n_inputs || e.grove >= n_groves {
            return Err(format!("event {i} ({e}) references unknown id or grove"));
        }
        if e.cycle < last_cycle {
            return Err(format!("event {i} ({e}) goes back in time"));
        }
        last_cycle = e.cycle;
        let here = place[id];
        let g = e.grove;
        let prev = (g + n_groves - 1) % n_groves;
        let (expect, next) = match e.kind {
            EventKind::EnqP => (Place::Processor, Place::Queue(g)),
            EventKind::PeStart => (Place::Queue(g), Place::Pe(g)),
            EventKind::PeDone => (Place::Pe(g), Place::Pe(g)),
            EventKind::Req => (Place::Pe(g), Place::Stage(g)),
            EventKind::EnqN => (Place::Stage(prev), Place::Queue(g)),
            EventKind::Ack => (Place::Queue(g), Place::Queue(g)),
            EventKind::Emit => (Place::Pe(g), Place::Output),
        };
        if here != expect {
            return Err(format!(
                "event {i} ({e}): id {id} expected at {expect:?} but is at {here:?}"
            ));
        }
        if let Place::Queue(q) = here {
            if next != here {
                occupancy[q] -= 1;
            }
        }
        if let Place::Queue(q) = next {
            if next != here {
                occupancy[q] += 1;
                if occupancy[q] > queue_entries {
                    return Err(format!("event {i} ({e}): queue {q} over capacity"));
                }
            }
        }
        place[id] = next;
    }
    if let Some(id) = place.iter().position(|p| *p != Place::Output) {
        return Err(format!("id {id} never reached the output (at {:?})", place[id]));
    }
    Ok(())
}
