//! Deterministic cycle loop: trace-driven issue with bounded outstanding
//! requests per core, event scheduling, and timestamp bookkeeping.
//!
//! Every cycle runs three phases in a fixed order:
//!
//! 1. issue — each core, in id order, issues at most one trace record whose
//!    cycle has come, if it has a free outstanding slot;
//! 2. events — everything scheduled for this cycle fires in schedule order;
//! 3. resources — tag ports, aggregated lookups, fill ports, data banks, L2
//!    admissions, and crossbar outputs arbitrate everything staged during
//!    the first two phases, each in a deterministic order.
//!
//! A request completing at cycle `c` frees its issue slot for cycle `c + 1`.
//! Cache state transitions (allocations, LRU updates) happen at tag-check
//! resolution in per-cache access order, which is what makes hit/miss
//! classification match an immediate-fill functional simulator request by
//! request. Value tokens move at resource-grant time; per-bank grant order
//! equals access order, so token reads and writes interleave correctly.

use crate::arch::{Architecture, Topology};
use crate::core::{decode_address, AccessKind, AddressParts, SimConfig};
use crate::l1cache::{distribute, BankAccess, DataArrayState, MshrState, MshrWaiter, RoutingDecision};
use crate::l2mem::{partition_of, FlatMemory, L2PartitionState};
use crate::noc::CrossbarState;
use crate::report::{ReportCounters, SimReport};
use crate::tagarray::{PresenceVector, TagArrayState};
use crate::workload::{trace_digest, TraceRecord};
use std::cmp::Ordering;
use std::collections::BinaryHeap;
use std::fmt;

/// Control-message size (probe, request, ack) in bytes: one flit under the
/// default 40 B flit.
pub const REQUEST_MSG_BYTES: u64 = 8;

/// Knobs that are not part of the architectural configuration.
#[derive(Debug, Clone)]
pub struct RunOptions {
    /// Livelock guard: abort when the clock passes this cycle.
    pub max_cycles: u64,
    pub collect_event_log: bool,
}

impl Default for RunOptions {
    fn default() -> RunOptions {
        RunOptions {
            max_cycles: 100_000_000,
            collect_event_log: false,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SimError {
    /// The cycle ceiling was hit before the trace drained.
    CycleCeiling { cycle: u64 },
    /// The trace references cores outside the configuration.
    Trace { index: usize, message: String },
}

impl fmt::Display for SimError {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            SimError::CycleCeiling { cycle } => write!(
                f,
                "cycle ceiling reached at cycle {cycle} with work outstanding (possible livelock)"
            ),
            SimError::Trace { index, message } => {
                write!(f, "trace record {index}: {message}")
            }
        }
    }
}

impl std::error::Error for SimError {}

/// How one load was finally served.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum L1Class {
    LocalHit,
    RemoteHit,
    Miss,
}

/// Full per-request timeline, exposed for tests and oracles.
#[derive(Debug, Clone)]
pub struct RequestRecord {
    pub request_id: u64,
    pub core_id: u32,
    pub address: u64,
    pub kind: AccessKind,
    pub instruction_id: u64,
    pub trace_cycle: u64,
    pub issue_cycle: u64,
    pub tag_done: Option<u64>,
    /// When the local L1 finished serving this request: data readout for
    /// hits, the handoff cycle for anything that left for a remote cache or
    /// L2, fill readout for merged requests.
    pub l1_stage_done: Option<u64>,
    /// When this request's own L2 fetch entered the network, if it launched
    /// one.
    pub l2_departure: Option<u64>,
    pub completion_cycle: Option<u64>,
    pub class: Option<L1Class>,
    /// Value token observed by a load.
    pub token: Option<u64>,
}

/// Result of a completed run.
#[derive(Debug, Clone)]
pub struct RunResult {
    pub report: SimReport,
    pub requests: Vec<RequestRecord>,
    /// (core, instruction) -> max over its requests of (l1 stage done - issue).
    pub instruction_latencies: Vec<((u32, u64), u64)>,
    pub event_log: Option<Vec<String>>,
}

// ---------------------------------------------------------------------------
// events

#[derive(Debug, Clone)]
enum Ev {
    TagDone(TagWork),
    AggDone { req: u64 },
    RemoteArrive { fetch: usize },
    RemoteDataArrive { fetch: usize, token: u64 },
    ProbeArrive { fetch: usize, cache: u32 },
    ProbeRespArrive { fetch: usize, responder: u32, hit: bool, token: u64 },
    HomeArrive { req: u64 },
    HomeRespArrive { req: u64, token: Option<u64> },
    L2ReqArrive { fetch: usize },
    L2Done { fetch: usize },
    L2RespArrive { fetch: usize },
    WbArrive { wb: usize },
    FillApply { fetch: usize },
    InjectMsg { bus: BusId, src: u32, dst: u32, bytes: u64, payload: Payload },
    Complete { req: u64 },
    MshrRetry { cache: u32 },
}

#[derive(Debug, Clone, Copy)]
enum TagWork {
    /// Local lookup at the issuing core's cache (private, remote-sharing).
    Local { req: u64 },
    /// Probe check at a remote cache (remote-sharing).
    Probe { fetch: usize, cache: u32 },
    /// Lookup at the home cache (decoupled).
    Home { req: u64 },
}

#[derive(Debug, Clone, Copy)]
enum BankWork {
    LocalRead { req: u64 },
    LocalWrite { req: u64 },
    RemoteRead { fetch: usize },
    ProbeRead { fetch: usize, cache: u32 },
    HomeRead { req: u64 },
    HomeWrite { req: u64 },
}

#[derive(Debug, Clone, Copy)]
enum BusId {
    Intra(u32),
    L2Req,
    L2Resp,
}

#[derive(Debug, Clone, Copy)]
enum Payload {
    RemoteAccess { fetch: usize },
    RemoteData { fetch: usize, token: u64 },
    Probe { fetch: usize, cache: u32 },
    ProbeResp { fetch: usize, responder: u32, hit: bool, token: u64 },
    HomeReq { req: u64 },
    HomeResp { req: u64, token: Option<u64> },
    L2Req { fetch: usize },
    L2Resp { fetch: usize },
    Writeback { wb: usize },
}

struct QueuedEv {
    cycle: u64,
    seq: u64,
    ev: Ev,
}

impl PartialEq for QueuedEv {
    fn eq(&self, other: &Self) -> bool {
        self.cycle == other.cycle && self.seq == other.seq
    }
}
impl Eq for QueuedEv {}
impl PartialOrd for QueuedEv {
    fn partial_cmp(&self, other: &Self) -> Option<Ordering> {
        Some(self.cmp(other))
    }
}
impl Ord for QueuedEv {
    fn cmp(&self, other: &Self) -> Ordering {
        // min-heap over (cycle, seq)
        (other.cycle, other.seq).cmp(&(self.cycle, self.seq))
    }
}

/// Min-ordered event collection; equal cycles fire in schedule order.
#[derive(Default)]
struct EventQueue {
    heap: BinaryHeap<QueuedEv>,
    next_seq: u64,
}

impl EventQueue {
    fn schedule(&mut self, cycle: u64, ev: Ev) {
        let seq = self.next_seq;
        self.next_seq += 1;
        self.heap.push(QueuedEv { cycle, seq, ev });
    }

    fn peek_cycle(&self) -> Option<u64> {
        self.heap.peek().map(|q| q.cycle)
    }

    fn pop_at(&mut self, now: u64) -> Option<Ev> {
        match self.heap.peek() {
            Some(q) if q.cycle == now => Some(self.heap.pop().expect("peeked").ev),
            Some(q) => {
                debug_assert!(q.cycle > now, "event in the past");
                None
            }
            None => None,
        }
    }

    fn is_empty(&self) -> bool {
        self.heap.is_empty()
    }
}

// ---------------------------------------------------------------------------
// per-unit state

struct CoreFrontEnd {
    next_record: usize,
    outstanding: u32,
}

struct CacheUnit {
    tags: TagArrayState,
    data: DataArrayState,
    mshr: MshrState,
    /// Conventional tag port: one lookup start per cycle (serialized for
    /// decoupled home lookups and remote-sharing probes/lookups).
    tag_port_next: u64,
    /// Tag write port per set: one fill per set per cycle.
    fill_port_next: Vec<u64>,
    /// Monotone access counter; LRU stamps follow access order, not cycles.
    access_stamp: u64,
    retry_scheduled: bool,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
enum FetchSource {
    L2,
    Remote { cache: u32 },
    Probing,
}

/// One in-flight sector fill: from L2, from a remote cache, or still in the
/// probe phase deciding between them.
struct FetchState {
    cache: u32,
    line: u64,
    sector: u64,
    source: FetchSource,
    token: Option<u64>,
    origin_req: u64,
    seq: u64,
    /// Probe outcomes by cluster-local index (remote-sharing only).
    probe_outcomes: Vec<Option<(bool, u64)>>,
    probe_resolved: bool,
}

struct WbState {
    line: u64,
    tokens: Vec<(u64, u64)>,
    partition: u32,
    src_core: u32,
    seq: u64,
}

struct ReqState {
    rec: RequestRecord,
    parts: AddressParts,
    /// Cache that serves this request (local cache, or home when decoupled).
    serving_cache: u32,
}

// staged resource work for the current cycle
#[derive(Default)]
struct Staging {
    tag: Vec<(u32, TagWork)>,
    agg: Vec<u64>,
    bank: Vec<(u32, BankWork)>,
    l2: Vec<(u32, L2Work)>,
    fill: Vec<usize>,
}

#[derive(Debug, Clone, Copy)]
enum L2Work {
    Fetch { fetch: usize },
    Writeback { wb: usize },
}

// ---------------------------------------------------------------------------
// the simulation proper

/// One deterministic simulation over one trace.
pub struct Simulation {
    cfg: SimConfig,
    topo: Topology,
    opts: RunOptions,
    current: Option<u64>,
    events: EventQueue,
    cores: Vec<CoreFrontEnd>,
    core_records: Vec<Vec<TraceRecord>>,
    reqs: Vec<ReqState>,
    caches: Vec<CacheUnit>,
    intra: Vec<CrossbarState>,
    l2_req_bus: CrossbarState,
    l2_resp_bus: CrossbarState,
    l2parts: Vec<L2PartitionState>,
    memory: FlatMemory,
    fetches: Vec<FetchState>,
    writebacks: Vec<WbState>,
    payloads: Vec<Payload>,
    staging: Staging,
    counters: ReportCounters,
    digest: u64,
    completed: u64,
    last_completion: u64,
    log: Option<Vec<String>>,
}

macro_rules! simlog {
    ($self:ident, $now:expr, $($arg:tt)*) => {
        if let Some(log) = $self.log.as_mut() {
            log.push(format!("cycle={} {}", $now, format_args!($($arg)*)));
        }
    };
}

impl Simulation {
    pub fn new(
        cfg: &SimConfig,
        trace: &[TraceRecord],
        opts: &RunOptions,
    ) -> Result<Simulation, SimError> {
        let topo = Topology::new(cfg.num_cores, cfg.cores_per_cluster);
        let mut core_records: Vec<Vec<TraceRecord>> = vec![Vec::new(); cfg.num_cores as usize];
        for (i, r) in trace.iter().enumerate() {
            if r.core_id >= cfg.num_cores {
                return Err(SimError::Trace {
                    index: i,
                    message: format!(
                        "core {} out of range (num_cores = {})",
                        r.core_id, cfg.num_cores
                    ),
                });
            }
            core_records[r.core_id as usize].push(*r);
        }
        let caches = (0..cfg.num_cores)
            .map(|i| CacheUnit {
                tags: TagArrayState::new(i, &cfg.l1_geometry),
                data: DataArrayState::new(i, cfg.l1_geometry.data_banks),
                mshr: MshrState::new(cfg.mshr_entries as usize),
                tag_port_next: 0,
                fill_port_next: vec![0; cfg.l1_geometry.sets() as usize],
                access_stamp: 0,
                retry_scheduled: false,
            })
            .collect();
        let intra = (0..topo.num_clusters())
            .map(|_| {
                CrossbarState::new(
                    cfg.cores_per_cluster,
                    cfg.cores_per_cluster,
                    cfg.t_xbar_hop,
                    cfg.flit_bytes,
                )
            })
            .collect();
        let l2parts = (0..cfg.l2_partitions)
            .map(|p| L2PartitionState::new(p, cfg.l2_geometry))
            .collect();
        Ok(Simulation {
            cfg: cfg.clone(),
            topo,
            opts: opts.clone(),
            current: None,
            events: EventQueue::default(),
            cores: (0..cfg.num_cores)
                .map(|_| CoreFrontEnd {
                    next_record: 0,
                    outstanding: 0,
                })
                .collect(),
            core_records,
            reqs: Vec::with_capacity(trace.len()),
            caches,
            intra,
            l2_req_bus: CrossbarState::new(
                cfg.num_cores,
                cfg.l2_partitions,
                cfg.t_xbar_hop,
                cfg.flit_bytes,
            ),
            l2_resp_bus: CrossbarState::new(
                cfg.l2_partitions,
                cfg.num_cores,
                cfg.t_xbar_hop,
                cfg.flit_bytes,
            ),
            l2parts,
            memory: FlatMemory::default(),
            fetches: Vec::new(),
            writebacks: Vec::new(),
            payloads: Vec::new(),
            staging: Staging::default(),
            counters: ReportCounters::default(),
            digest: trace_digest(trace),
            completed: 0,
            last_completion: 0,
            log: if opts.collect_event_log {
                Some(Vec::new())
            } else {
                None
            },
        })
    }

    pub fn now(&self) -> u64 {
        self.current.unwrap_or(0)
    }

    fn next_cycle(&self) -> Option<u64> {
        let floor = self.current.map_or(0, |c| c + 1);
        let mut best = self.events.peek_cycle();
        for (i, core) in self.cores.iter().enumerate() {
            if core.outstanding >= self.cfg.max_outstanding_per_core {
                continue;
            }
            if let Some(rec) = self.core_records[i].get(core.next_record) {
                let c = rec.cycle.max(floor);
                best = Some(best.map_or(c, |b| b.min(c)));
            }
        }
        best
    }

    /// Advances to the next cycle with work and runs it. Returns the cycle
    /// and the number of events processed, or `None` when drained.
    pub fn step(&mut self) -> Result<Option<(u64, usize)>, SimError> {
        let Some(now) = self.next_cycle() else {
            return Ok(None);
        };
        if now > self.opts.max_cycles {
            return Err(SimError::CycleCeiling { cycle: now });
        }
        self.current = Some(now);
        // phase 1: issue, cores in id order
        for core in 0..self.cfg.num_cores {
            self.try_issue(core, now);
        }
        // phase 2: events scheduled for this cycle, in schedule order
        let mut processed = 0usize;
        while let Some(ev) = self.events.pop_at(now) {
            self.handle(ev, now);
            processed += 1;
        }
        // phase 3: resource arbitration
        self.resolve_tag_ports(now);
        self.resolve_agg(now);
        self.resolve_fills(now);
        self.resolve_banks(now);
        self.resolve_l2(now);
        self.resolve_buses(now);
        Ok(Some((now, processed)))
    }

    /// Runs the trace to completion and aggregates the report.
    pub fn run_to_completion(mut self) -> Result<RunResult, SimError> {
        while self.step()?.is_some() {}
        debug_assert!(self.events.is_empty());
        assert_eq!(
            self.completed,
            self.reqs.len() as u64,
            "requests issued must equal requests completed at drain"
        );
        assert!(
            self.cores.iter().all(|c| c.outstanding == 0),
            "drained simulation left outstanding requests"
        );

        let total_cycles = if self.reqs.is_empty() {
            0
        } else {
            self.last_completion + 1
        };

        // per-instruction L1 latency: max over the instruction's requests
        let mut instr: std::collections::BTreeMap<(u32, u64), u64> = std::collections::BTreeMap::new();
        for r in &self.reqs {
            let stage = r.rec.l1_stage_done.expect("drained request has L1 stage");
            let lat = stage - r.rec.issue_cycle;
            let e = instr.entry((r.rec.core_id, r.rec.instruction_id)).or_insert(0);
            *e = (*e).max(lat);
        }
        for &lat in instr.values() {
            self.counters.record_instruction_latency(lat);
        }

        self.counters.noc_flits = self.intra.iter().map(|x| x.total_flits()).sum::<u64>()
            + self.l2_req_bus.total_flits()
            + self.l2_resp_bus.total_flits();
        self.counters.l2_hits = self.l2parts.iter().map(|p| p.hits).sum();
        self.counters.l2_misses = self.l2parts.iter().map(|p| p.misses).sum();
        self.counters.requests = self.reqs.len() as u64;
        self.counters.total_cycles = total_cycles;

        let report = SimReport::from_counters(
            self.cfg.architecture.name(),
            format!("{:016x}", self.digest),
            &self.counters,
        );
        Ok(RunResult {
            report,
            requests: self.reqs.into_iter().map(|r| r.rec).collect(),
            instruction_latencies: instr.into_iter().collect(),
            event_log: self.log,
        })
    }

    // -- phase 1 ------------------------------------------------------------

    fn try_issue(&mut self, core: u32, now: u64) {
        let front = &self.cores[core as usize];
        if front.outstanding >= self.cfg.max_outstanding_per_core {
            return;
        }
        let Some(rec) = self.core_records[core as usize].get(front.next_record) else {
            return;
        };
        if rec.cycle > now {
            return;
        }
        let rec = *rec;
        self.cores[core as usize].next_record += 1;
        self.cores[core as usize].outstanding += 1;

        let req_id = self.reqs.len() as u64;
        let parts = decode_address(rec.address, &self.cfg.l1_geometry);
        let serving_cache = match self.cfg.architecture {
            Architecture::DecoupledSharing => {
                let cluster = self.topo.cluster_of(core);
                self.topo
                    .global_cache_id(cluster, self.topo.home_cache(parts.line_address))
            }
            _ => core,
        };
        self.reqs.push(ReqState {
            rec: RequestRecord {
                request_id: req_id,
                core_id: core,
                address: rec.address,
                kind: rec.kind,
                instruction_id: rec.instruction_id,
                trace_cycle: rec.cycle,
                issue_cycle: now,
                tag_done: None,
                l1_stage_done: None,
                l2_departure: None,
                completion_cycle: None,
                class: None,
                token: None,
            },
            parts,
            serving_cache,
        });
        simlog!(
            self,
            now,
            "ev=issue req={} core={} kind={} addr={:#x} inst={}",
            req_id,
            core,
            if rec.kind == AccessKind::Load { "L" } else { "S" },
            rec.address,
            rec.instruction_id
        );

        match self.cfg.architecture {
            Architecture::Private | Architecture::RemoteSharing => {
                self.staging.tag.push((core, TagWork::Local { req: req_id }));
            }
            Architecture::AtaCache => {
                self.staging.agg.push(req_id);
            }
            Architecture::DecoupledSharing => {
                let cluster = self.topo.cluster_of(core);
                self.inject(
                    BusId::Intra(cluster),
                    self.topo.local_index(core),
                    self.topo.local_index(serving_cache),
                    REQUEST_MSG_BYTES,
                    Payload::HomeReq { req: req_id },
                );
            }
        }
    }

    // -- phase 2 ------------------------------------------------------------

    fn handle(&mut self, ev: Ev, now: u64) {
        match ev {
            Ev::TagDone(work) => self.on_tag_done(work, now),
            Ev::AggDone { req } => self.on_agg_done(req, now),
            Ev::RemoteArrive { fetch } => self.on_remote_arrive(fetch, now),
            Ev::RemoteDataArrive { fetch, token } => {
                self.fetches[fetch].token = Some(token);
                simlog!(
                    self,
                    now,
                    "ev=remote_data req={} line={:#x} sector={}",
                    self.fetches[fetch].origin_req,
                    self.fetches[fetch].line,
                    self.fetches[fetch].sector
                );
                self.staging.fill.push(fetch);
            }
            Ev::ProbeArrive { fetch, cache } => {
                self.staging.tag.push((cache, TagWork::Probe { fetch, cache }));
            }
            Ev::ProbeRespArrive {
                fetch,
                responder,
                hit,
                token,
            } => self.on_probe_resp(fetch, responder, hit, token, now),
            Ev::HomeArrive { req } => {
                let cache = self.reqs[req as usize].serving_cache;
                self.staging.tag.push((cache, TagWork::Home { req }));
            }
            Ev::HomeRespArrive { req, token } => {
                if let Some(t) = token {
                    self.reqs[req as usize].rec.token = Some(t);
                }
                self.complete_request(req, now);
            }
            Ev::L2ReqArrive { fetch } => {
                let p = self.partition_of_fetch(fetch);
                self.staging.l2.push((p, L2Work::Fetch { fetch }));
            }
            Ev::L2Done { fetch } => {
                let f = &self.fetches[fetch];
                let p = partition_of(f.line, self.cfg.l2_partitions);
                self.inject(
                    BusId::L2Resp,
                    p,
                    f.cache,
                    self.cfg.l1_geometry.sector_size,
                    Payload::L2Resp { fetch },
                );
            }
            Ev::L2RespArrive { fetch } => {
                self.staging.fill.push(fetch);
            }
            Ev::WbArrive { wb } => {
                let p = self.writebacks[wb].partition;
                self.staging.l2.push((p, L2Work::Writeback { wb }));
            }
            Ev::FillApply { fetch } => self.apply_fill(fetch, now),
            Ev::InjectMsg {
                bus,
                src,
                dst,
                bytes,
                payload,
            } => self.inject(bus, src, dst, bytes, payload),
            Ev::Complete { req } => self.complete_request(req, now),
            Ev::MshrRetry { cache } => self.on_mshr_retry(cache, now),
        }
    }

    // -- request pipelines ----------------------------------------------------

    /// Local lookup result for private and remote-sharing, at the issuing
    /// core's own cache.
    fn on_tag_done(&mut self, work: TagWork, now: u64) {
        match work {
            TagWork::Local { req } => {
                let core = self.reqs[req as usize].rec.core_id;
                self.reqs[req as usize].rec.tag_done = Some(now);
                match self.cfg.architecture {
                    Architecture::Private => {
                        let presence = self.local_presence(req);
                        self.route_from_presence(req, presence, now);
                    }
                    Architecture::RemoteSharing => self.remote_sharing_lookup(req, core, now),
                    _ => unreachable!("local tag work only under private/remote"),
                }
            }
            TagWork::Probe { fetch, cache } => self.on_probe_check(fetch, cache, now),
            TagWork::Home { req } => self.on_home_lookup(req, now),
        }
    }

    /// Presence vector a private cache sees: only its own tag array, placed
    /// at the local index of a cluster-sized vector so routing code is shared
    /// with the aggregated design.
    fn local_presence(&self, req: u64) -> PresenceVector {
        let r = &self.reqs[req as usize];
        let n = self.cfg.cores_per_cluster as usize;
        let local = self.topo.local_index(r.rec.core_id) as usize;
        let mut bits = vec![false; n];
        let mut hit_sector = vec![false; n];
        let (line, sector) = self.caches[r.rec.core_id as usize].tags.probe(&r.parts);
        bits[local] = line;
        hit_sector[local] = sector;
        PresenceVector { bits, hit_sector }
    }

    /// Aggregated comparison result: conflict-free, a flat `t_tag` after
    /// issue regardless of set sharing.
    fn on_agg_done(&mut self, req: u64, now: u64) {
        self.reqs[req as usize].rec.tag_done = Some(now);
        let core = self.reqs[req as usize].rec.core_id;
        let cluster = self.topo.cluster_of(core);
        let parts = self.reqs[req as usize].parts;
        let arrays: Vec<&TagArrayState> = self
            .topo
            .cluster_caches(cluster)
            .map(|c| &self.caches[c as usize].tags)
            .collect();
        let presence = crate::tagarray::aggregated_lookup(&[(core, parts)], &arrays)
            .pop()
            .expect("one request in, one vector out");
        if let Some(log) = self.log.as_mut() {
            let bits: String = presence
                .hit_sector
                .iter()
                .map(|&b| if b { '1' } else { '0' })
                .collect();
            log.push(format!(
                "cycle={now} ev=agg_lookup req={req} presence=[{bits}]"
            ));
        }
        self.route_from_presence(req, presence, now);
    }

    /// Shared distributor path for private (degenerate presence) and the
    /// aggregated design. Stores never consult remote bits.
    fn route_from_presence(&mut self, req: u64, presence: PresenceVector, now: u64) {
        let r = &self.reqs[req as usize];
        let core = r.rec.core_id;
        let kind = r.rec.kind;
        let cluster = self.topo.cluster_of(core);
        let local = self.topo.local_index(core) as usize;

        if kind == AccessKind::Store {
            // write requests are processed only in the local cache
            self.local_access(req, core, now);
            return;
        }
        let depths: Vec<u64> = self
            .topo
            .cluster_caches(cluster)
            .map(|c| self.caches[c as usize].data.queued_requests(now))
            .collect();
        let decision = distribute(local, &presence, &depths);
        match decision {
            RoutingDecision::LocalHit => {
                simlog!(self, now, "ev=route req={req} decision=local");
                self.local_access(req, core, now);
            }
            RoutingDecision::RemoteHit(target_local) => {
                let target = self.topo.global_cache_id(cluster, target_local);
                simlog!(self, now, "ev=route req={req} decision=remote target={target}");
                self.reqs[req as usize].rec.class = Some(L1Class::RemoteHit);
                self.reqs[req as usize].rec.l1_stage_done = Some(now);
                let (line, sector) = (self.reqs[req as usize].parts.line_address, self.reqs[req as usize].parts.sector_index);
                self.allocate_local_line(core, req, now);
                if let Some(fetch) = self.start_fetch(core, line, sector, req, FetchSource::Remote { cache: target }, now)
                {
                    self.inject(
                        BusId::Intra(cluster),
                        local as u32,
                        target_local,
                        REQUEST_MSG_BYTES,
                        Payload::RemoteAccess { fetch },
                    );
                }
            }
            RoutingDecision::MissToL2 => {
                simlog!(self, now, "ev=route req={req} decision=l2");
                self.local_access(req, core, now);
            }
        }
    }

    /// Serves a request at `cache`: hit, merge, or allocate-and-fetch.
    /// Used for the local cache of private/ata/remote-sharing stores and
    /// loads, and (with responses over the crossbar) the decoupled home.
    fn local_access(&mut self, req: u64, cache: u32, now: u64) {
        let parts = self.reqs[req as usize].parts;
        let kind = self.reqs[req as usize].rec.kind;
        let core = self.reqs[req as usize].rec.core_id;
        let is_home = cache != core || self.cfg.architecture == Architecture::DecoupledSharing;
        let unit = &mut self.caches[cache as usize];
        let (line_hit, sector_hit) = unit.tags.probe(&parts);
        let pending = unit.mshr.sector_pending(parts.line_address, parts.sector_index);
        let hit_class = if cache == core {
            L1Class::LocalHit
        } else {
            L1Class::RemoteHit
        };

        if line_hit && sector_hit && !pending {
            unit.access_stamp += 1;
            let stamp = unit.access_stamp;
            unit.tags.touch(&parts, stamp).expect("line resident");
            self.reqs[req as usize].rec.class = Some(hit_class);
            match (kind, is_home) {
                (AccessKind::Load, false) => {
                    simlog!(self, now, "ev=l1_hit req={req} cache={cache}");
                    self.staging.bank.push((cache, BankWork::LocalRead { req }));
                }
                (AccessKind::Load, true) => {
                    simlog!(self, now, "ev=home_hit req={req} cache={cache}");
                    self.staging.bank.push((cache, BankWork::HomeRead { req }));
                }
                (AccessKind::Store, false) => {
                    simlog!(self, now, "ev=store_hit req={req} cache={cache}");
                    self.caches[cache as usize]
                        .tags
                        .set_dirty(&parts)
                        .expect("line resident");
                    self.staging.bank.push((cache, BankWork::LocalWrite { req }));
                }
                (AccessKind::Store, true) => {
                    simlog!(self, now, "ev=home_store_hit req={req} cache={cache}");
                    self.caches[cache as usize]
                        .tags
                        .set_dirty(&parts)
                        .expect("line resident");
                    self.staging.bank.push((cache, BankWork::HomeWrite { req }));
                }
            }
            return;
        }

        if pending {
            if line_hit {
                // fill in flight: functional hit, completes with the fill
                unit.access_stamp += 1;
                let stamp = unit.access_stamp;
                unit.tags.touch(&parts, stamp).expect("line resident");
                self.reqs[req as usize].rec.class = Some(hit_class);
                simlog!(self, now, "ev=mshr_merge req={req} cache={cache}");
            } else {
                // the allocated line was displaced while its fill is still in
                // flight: a functional miss that re-allocates and rides the
                // existing fetch
                self.reqs[req as usize].rec.class = Some(L1Class::Miss);
                self.reqs[req as usize].rec.l1_stage_done = Some(now);
                self.allocate_local_line(cache, req, now);
                simlog!(self, now, "ev=mshr_merge req={req} cache={cache} realloc=1");
            }
            let merged = self.caches[cache as usize].mshr.merge(
                parts.line_address,
                parts.sector_index,
                MshrWaiter { request_id: req },
            );
            debug_assert!(merged, "pending sector must accept waiters");
            return;
        }

        // miss: allocate now (state transition at access time), fetch the
        // sector from L2
        self.reqs[req as usize].rec.class = Some(L1Class::Miss);
        simlog!(self, now, "ev=l1_miss req={req} cache={cache}");
        self.allocate_local_line(cache, req, now);
        if let Some(fetch) = self.start_fetch(
            cache,
            parts.line_address,
            parts.sector_index,
            req,
            FetchSource::L2,
            now,
        ) {
            self.launch_l2_fetch(fetch, cache, req, now);
        }
    }

    /// Installs the line for `req` at `cache`, writing back a displaced
    /// dirty victim.
    fn allocate_local_line(&mut self, cache: u32, req: u64, now: u64) {
        let parts = self.reqs[req as usize].parts;
        let unit = &mut self.caches[cache as usize];
        unit.access_stamp += 1;
        let stamp = unit.access_stamp;
        let evicted = unit.tags.install_line(&parts, parts.sector_index, stamp);
        if let Some(ev) = evicted {
            self.evict_line(cache, ev, now);
        }
    }

    fn evict_line(&mut self, cache: u32, ev: crate::tagarray::EvictedLine, now: u64) {
        let sectors = self.cfg.l1_geometry.sectors_per_line();
        let unit = &mut self.caches[cache as usize];
        let mut tokens = Vec::new();
        if ev.dirty {
            for s in 0..sectors {
                if ev.sector_valid & (1 << s) != 0 {
                    if let Some(tok) = unit.data.read_token(ev.line_address, s) {
                        tokens.push((s, tok));
                    }
                }
            }
        }
        unit.data.drop_line(ev.line_address, sectors);
        if ev.dirty && !tokens.is_empty() {
            simlog!(
                self,
                now,
                "ev=writeback cache={} line={:#x}",
                cache,
                ev.line_address
            );
            self.send_writeback(cache, ev.line_address, tokens);
        }
    }

    fn send_writeback(&mut self, cache: u32, line: u64, tokens: Vec<(u64, u64)>) {
        let wb = self.writebacks.len();
        let partition = partition_of(line, self.cfg.l2_partitions);
        self.writebacks.push(WbState {
            line,
            tokens,
            partition,
            src_core: cache,
            seq: wb as u64,
        });
        self.inject(
            BusId::L2Req,
            cache,
            partition,
            self.cfg.l1_geometry.line_size,
            Payload::Writeback { wb },
        );
    }

    /// Creates the fetch record and its MSHR slot. Returns `None` when the
    /// MSHR is full and the fetch was queued; the retry path launches it.
    fn start_fetch(
        &mut self,
        cache: u32,
        line: u64,
        sector: u64,
        req: u64,
        source: FetchSource,
        now: u64,
    ) -> Option<usize> {
        let fetch = self.fetches.len();
        let n = self.cfg.cores_per_cluster as usize;
        self.fetches.push(FetchState {
            cache,
            line,
            sector,
            source,
            token: None,
            origin_req: req,
            seq: fetch as u64,
            probe_outcomes: vec![None; n],
            probe_resolved: false,
        });
        let admitted = self.caches[cache as usize]
            .mshr
            .allocate(line, sector, fetch as u64, MshrWaiter { request_id: req })
            .is_some();
        if admitted {
            Some(fetch)
        } else {
            simlog!(self, now, "ev=mshr_stall req={req} cache={cache}");
            // the queued copy keeps its waiters; the fetch record is reused
            // at admission, found again via the (line, sector) key
            self.fetches.truncate(fetch);
            None
        }
    }

    fn partition_of_fetch(&self, fetch: usize) -> u32 {
        partition_of(self.fetches[fetch].line, self.cfg.l2_partitions)
    }

    fn launch_l2_fetch(&mut self, fetch: usize, from_cache: u32, req: u64, now: u64) {
        let r = &mut self.reqs[req as usize].rec;
        if r.l1_stage_done.is_none() {
            r.l1_stage_done = Some(now);
        }
        if r.l2_departure.is_none() {
            r.l2_departure = Some(now);
        }
        let p = self.partition_of_fetch(fetch);
        simlog!(
            self,
            now,
            "ev=l2_depart req={req} fetch={fetch} partition={p}"
        );
        self.inject(
            BusId::L2Req,
            from_cache,
            p,
            REQUEST_MSG_BYTES,
            Payload::L2Req { fetch },
        );
    }

    // -- remote-sharing ------------------------------------------------------

    /// Local lookup under remote-sharing: hits and merges behave like the
    /// private cache; misses broadcast probes before they may go to L2.
    fn remote_sharing_lookup(&mut self, req: u64, core: u32, now: u64) {
        let parts = self.reqs[req as usize].parts;
        let kind = self.reqs[req as usize].rec.kind;
        let unit = &self.caches[core as usize];
        let (line_hit, sector_hit) = unit.tags.probe(&parts);
        let pending = unit.mshr.sector_pending(parts.line_address, parts.sector_index);

        if (line_hit && sector_hit && !pending) || pending || kind == AccessKind::Store {
            // same path as the private cache; store misses skip the probe
            // round per the local-write rule
            self.local_access(req, core, now);
            return;
        }

        // load miss: allocate, then probe every other cache in the cluster
        self.reqs[req as usize].rec.class = Some(L1Class::Miss);
        simlog!(self, now, "ev=l1_miss req={req} cache={core}");
        self.allocate_local_line(core, req, now);
        if let Some(fetch) = self.start_fetch(
            core,
            parts.line_address,
            parts.sector_index,
            req,
            FetchSource::Probing,
            now,
        ) {
            self.broadcast_probes(fetch, now);
        }
    }

    fn broadcast_probes(&mut self, fetch: usize, now: u64) {
        let cache = self.fetches[fetch].cache;
        let cluster = self.topo.cluster_of(cache);
        let local = self.topo.local_index(cache);
        self.fetches[fetch].source = FetchSource::Probing;
        for idx in 0..self.cfg.cores_per_cluster {
            if idx == local {
                continue;
            }
            let target = self.topo.global_cache_id(cluster, idx);
            self.counters.probe_messages += 1;
            simlog!(
                self,
                now,
                "ev=probe_send req={} from={} to={}",
                self.fetches[fetch].origin_req,
                cache,
                target
            );
            self.inject(
                BusId::Intra(cluster),
                local,
                idx,
                REQUEST_MSG_BYTES,
                Payload::Probe { fetch, cache: target },
            );
        }
    }

    /// Probe tag check at a remote cache: one tag-port cycle, result after
    /// `t_tag`. A hit reads the data array and responds with the sector;
    /// a miss (or dirty/pending line) responds immediately.
    fn on_probe_check(&mut self, fetch: usize, cache: u32, now: u64) {
        let f = &self.fetches[fetch];
        let parts = decode_address(f.line * self.cfg.l1_geometry.line_size, &self.cfg.l1_geometry);
        let sector = f.sector;
        let unit = &mut self.caches[cache as usize];
        let hit = match unit.tags.lookup(&parts) {
            Some((_, e)) => {
                e.sector_is_valid(sector)
                    && !e.dirty
                    && !unit.mshr.sector_pending(parts.line_address, sector)
            }
            None => false,
        };
        simlog!(
            self,
            now,
            "ev=probe_check req={} cache={} hit={}",
            self.fetches[fetch].origin_req,
            cache,
            u8::from(hit)
        );
        if hit {
            let unit = &mut self.caches[cache as usize];
            unit.access_stamp += 1;
            let stamp = unit.access_stamp;
            unit.tags.touch(&parts, stamp).expect("probe hit line");
            self.staging.bank.push((cache, BankWork::ProbeRead { fetch, cache }));
        } else {
            self.respond_probe(fetch, cache, false, 0, now);
        }
    }

    fn respond_probe(&mut self, fetch: usize, responder: u32, hit: bool, token: u64, now: u64) {
        let _ = now;
        let prober = self.fetches[fetch].cache;
        let cluster = self.topo.cluster_of(responder);
        let bytes = if hit {
            self.cfg.l1_geometry.sector_size
        } else {
            REQUEST_MSG_BYTES
        };
        self.inject(
            BusId::Intra(cluster),
            self.topo.local_index(responder),
            self.topo.local_index(prober),
            bytes,
            Payload::ProbeResp {
                fetch,
                responder,
                hit,
                token,
            },
        );
    }

    /// Collects one probe response. Data transfers from the lowest-indexed
    /// hitting cache as soon as every lower index has resolved; the request
    /// may go to L2 only once all responses are in.
    fn on_probe_resp(&mut self, fetch: usize, responder: u32, hit: bool, token: u64, now: u64) {
        simlog!(
            self,
            now,
            "ev=probe_resp req={} from={} hit={}",
            self.fetches[fetch].origin_req,
            responder,
            u8::from(hit)
        );
        let local = self.topo.local_index(self.fetches[fetch].cache) as usize;
        let idx = self.topo.local_index(responder) as usize;
        self.fetches[fetch].probe_outcomes[idx] = Some((hit, token));
        if self.fetches[fetch].probe_resolved {
            return;
        }
        // walk cluster-local indices in order; the prober's own slot counts
        // as a resolved miss
        for i in 0..self.fetches[fetch].probe_outcomes.len() {
            if i == local {
                continue;
            }
            match self.fetches[fetch].probe_outcomes[i] {
                None => return, // wait for lower индices
                Some((true, tok)) => {
                    self.fetches[fetch].probe_resolved = true;
                    self.fetches[fetch].token = Some(tok);
                    let origin = self.fetches[fetch].origin_req;
                    let r = &mut self.reqs[origin as usize].rec;
                    r.class = Some(L1Class::RemoteHit);
                    if r.l1_stage_done.is_none() {
                        r.l1_stage_done = Some(now);
                    }
                    simlog!(
                        self,
                        now,
                        "ev=probe_win req={} source={}",
                        origin,
                        self.topo.global_cache_id(
                            self.topo.cluster_of(self.fetches[fetch].cache),
                            i as u32
                        )
                    );
                    self.staging.fill.push(fetch);
                    return;
                }
                Some((false, _)) => continue,
            }
        }
        // every cache responded miss: now, and only now, go to L2
        self.fetches[fetch].probe_resolved = true;
        self.fetches[fetch].source = FetchSource::L2;
        let origin = self.fetches[fetch].origin_req;
        let cache = self.fetches[fetch].cache;
        self.launch_l2_fetch(fetch, cache, origin, now);
    }

    // -- decoupled home ------------------------------------------------------

    fn on_home_lookup(&mut self, req: u64, now: u64) {
        let home = self.reqs[req as usize].serving_cache;
        self.reqs[req as usize].rec.tag_done = Some(now);
        self.local_access(req, home, now);
    }

    // -- aggregated-tag remote access -----------------------------------------

    /// Arrival of a distributed request at the remote data array: re-verify
    /// the tag, then read. Evicted, dirtied, or not-yet-filled lines redirect
    /// to L2.
    fn on_remote_arrive(&mut self, fetch: usize, now: u64) {
        let f = &self.fetches[fetch];
        let FetchSource::Remote { cache: target } = f.source else {
            unreachable!("remote arrival for non-remote fetch");
        };
        let parts = decode_address(f.line * self.cfg.l1_geometry.line_size, &self.cfg.l1_geometry);
        let sector = f.sector;
        let unit = &mut self.caches[target as usize];
        let ok = match unit.tags.lookup(&parts) {
            Some((_, e)) => {
                e.sector_is_valid(sector)
                    && !e.dirty
                    && !unit.mshr.sector_pending(parts.line_address, sector)
            }
            None => false,
        };
        if ok {
            let unit = &mut self.caches[target as usize];
            unit.access_stamp += 1;
            let stamp = unit.access_stamp;
            unit.tags.touch(&parts, stamp).expect("verified line");
            self.staging.bank.push((target, BankWork::RemoteRead { fetch }));
        } else {
            self.redirect_to_l2(fetch, target, now);
        }
    }

    /// The remote copy is gone, dirty, or not filled yet: the request goes to
    /// the L2 cache instead, forwarded from the remote cache's port.
    fn redirect_to_l2(&mut self, fetch: usize, from_cache: u32, now: u64) {
        let origin = self.fetches[fetch].origin_req;
        simlog!(self, now, "ev=redirect req={origin} from={from_cache}");
        self.fetches[fetch].source = FetchSource::L2;
        let r = &mut self.reqs[origin as usize].rec;
        if r.class == Some(L1Class::RemoteHit) {
            r.class = Some(L1Class::Miss);
        }
        if r.l2_departure.is_none() {
            r.l2_departure = Some(now);
        }
        let p = self.partition_of_fetch(fetch);
        self.inject(
            BusId::L2Req,
            from_cache,
            p,
            REQUEST_MSG_BYTES,
            Payload::L2Req { fetch },
        );
    }

    // -- fills -----------------------------------------------------------------

    /// Applies one fill at its granted fill-port cycle: completes the MSHR
    /// waiters in request order, lands the token, and emits any deferred
    /// write-back of stores whose line was displaced while the fill was in
    /// flight.
    fn apply_fill(&mut self, fetch: usize, now: u64) {
        let f = &self.fetches[fetch];
        let cache = f.cache;
        let line = f.line;
        let sector = f.sector;
        let mut token = f.token.expect("fill carries data");
        simlog!(
            self,
            now,
            "ev=fill cache={cache} line={line:#x} sector={sector} req={}",
            f.origin_req
        );
        let (mut waiters, freed) = self.caches[cache as usize].mshr.complete(line, sector);
        waiters.sort_by_key(|w| w.request_id);
        let mut had_store = false;
        let decoupled = self.cfg.architecture == Architecture::DecoupledSharing;
        for w in &waiters {
            let r = &mut self.reqs[w.request_id as usize];
            match r.rec.kind {
                AccessKind::Load => {
                    r.rec.token = Some(token);
                }
                AccessKind::Store => {
                    token = w.request_id;
                    had_store = true;
                }
            }
            if r.rec.l1_stage_done.is_none() {
                r.rec.l1_stage_done = Some(now + self.cfg.t_data);
            }
            if decoupled {
                let core = r.rec.core_id;
                let cluster = self.topo.cluster_of(core);
                let resp_token = match r.rec.kind {
                    AccessKind::Load => Some(token),
                    AccessKind::Store => None,
                };
                let bytes = match r.rec.kind {
                    AccessKind::Load => self.cfg.l1_geometry.sector_size,
                    AccessKind::Store => REQUEST_MSG_BYTES,
                };
                let req_id = w.request_id;
                self.events.schedule(
                    now + self.cfg.t_data,
                    Ev::InjectMsg {
                        bus: BusId::Intra(cluster),
                        src: self.topo.local_index(cache),
                        dst: self.topo.local_index(core),
                        bytes,
                        payload: Payload::HomeResp {
                            req: req_id,
                            token: resp_token,
                        },
                    },
                );
            } else {
                self.events
                    .schedule(now + self.cfg.t_data, Ev::Complete { req: w.request_id });
            }
        }
        // land the data if the line is still (or again) resident
        let parts = decode_address(line * self.cfg.l1_geometry.line_size, &self.cfg.l1_geometry);
        let resident = self.caches[cache as usize].tags.lookup(&parts).is_some();
        if resident {
            self.caches[cache as usize]
                .data
                .write_token(line, sector, token);
            if had_store {
                self.caches[cache as usize]
                    .tags
                    .set_dirty(&parts)
                    .expect("line resident");
            }
        } else if had_store {
            // displaced while pending: the stored value must still reach L2
            simlog!(self, now, "ev=writeback cache={cache} line={line:#x} orphan=1");
            self.send_writeback(cache, line, vec![(sector, token)]);
        }
        if freed && self.caches[cache as usize].mshr.has_stalled() {
            self.schedule_retry(cache, now);
        }
    }

    fn schedule_retry(&mut self, cache: u32, now: u64) {
        if !self.caches[cache as usize].retry_scheduled {
            self.caches[cache as usize].retry_scheduled = true;
            self.events.schedule(now + 1, Ev::MshrRetry { cache });
        }
    }

    /// Freed MSHR capacity: admit queued fetches in FIFO order and launch
    /// them (probe round under remote-sharing, straight to L2 otherwise).
    fn on_mshr_retry(&mut self, cache: u32, now: u64) {
        self.caches[cache as usize].retry_scheduled = false;
        let admitted = self.caches[cache as usize].mshr.admit_stalled();
        for item in admitted {
            let origin = item.waiters.first().expect("stalled fetch has waiters").request_id;
            let fetch = self.fetches.len();
            let n = self.cfg.cores_per_cluster as usize;
            self.fetches.push(FetchState {
                cache,
                line: item.line_address,
                sector: item.sector,
                source: FetchSource::L2,
                token: None,
                origin_req: origin,
                seq: fetch as u64,
                probe_outcomes: vec![None; n],
                probe_resolved: false,
            });
            self.caches[cache as usize]
                .mshr
                .set_fetch_id(item.line_address, item.sector, fetch as u64);
            simlog!(self, now, "ev=mshr_admit req={origin} cache={cache}");
            let probe_round = self.cfg.architecture == Architecture::RemoteSharing
                && self.reqs[origin as usize].rec.kind == AccessKind::Load;
            if probe_round {
                self.broadcast_probes(fetch, now);
            } else {
                self.launch_l2_fetch(fetch, cache, origin, now);
            }
        }
        if self.caches[cache as usize].mshr.has_stalled() {
            // more capacity has to free up before the rest can go
        }
    }

    // -- completion -------------------------------------------------------------

    fn complete_request(&mut self, req: u64, now: u64) {
        let r = &mut self.reqs[req as usize];
        debug_assert!(r.rec.completion_cycle.is_none(), "double completion");
        r.rec.completion_cycle = Some(now);
        debug_assert!(now >= r.rec.issue_cycle);
        let core = r.rec.core_id;
        let kind = r.rec.kind;
        let class = r.rec.class;
        simlog!(self, now, "ev=complete req={req}");
        self.cores[core as usize].outstanding -= 1;
        self.completed += 1;
        self.last_completion = self.last_completion.max(now);
        if kind == AccessKind::Load {
            match class.expect("completed load is classified") {
                L1Class::LocalHit => self.counters.l1_local_hits += 1,
                L1Class::RemoteHit => self.counters.l1_remote_hits += 1,
                L1Class::Miss => self.counters.l1_misses += 1,
            }
        }
    }

    // -- phase 3 resolutions ------------------------------------------------

    fn resolve_tag_ports(&mut self, now: u64) {
        if self.staging.tag.is_empty() {
            return;
        }
        let mut work = std::mem::take(&mut self.staging.tag);
        // per cache, grant one start per cycle; ties by the requesting
        // (core, request) pair
        work.sort_by_key(|(cache, w)| {
            let (core, req) = match w {
                TagWork::Local { req } | TagWork::Home { req } => {
                    (self.reqs[*req as usize].rec.core_id, *req)
                }
                TagWork::Probe { fetch, .. } => {
                    let f = &self.fetches[*fetch];
                    (self.reqs[f.origin_req as usize].rec.core_id, f.origin_req)
                }
            };
            (*cache, core, req)
        });
        for (cache, w) in work {
            let unit = &mut self.caches[cache as usize];
            let start = now.max(unit.tag_port_next);
            unit.tag_port_next = start + 1;
            self.events
                .schedule(start + self.cfg.t_tag, Ev::TagDone(w));
        }
    }

    fn resolve_agg(&mut self, now: u64) {
        if self.staging.agg.is_empty() {
            return;
        }
        let mut reqs = std::mem::take(&mut self.staging.agg);
        reqs.sort_unstable();
        for req in reqs {
            // conflict-free: constant t_tag, no port to queue on
            self.events.schedule(now + self.cfg.t_tag, Ev::AggDone { req });
        }
    }

    fn resolve_fills(&mut self, now: u64) {
        if self.staging.fill.is_empty() {
            return;
        }
        let mut fills = std::mem::take(&mut self.staging.fill);
        fills.sort_by_key(|&f| {
            let fe = &self.fetches[f];
            (fe.cache, fe.seq)
        });
        for fetch in fills {
            let (cache, set) = {
                let f = &self.fetches[fetch];
                let parts =
                    decode_address(f.line * self.cfg.l1_geometry.line_size, &self.cfg.l1_geometry);
                (f.cache, parts.set_index as usize)
            };
            let unit = &mut self.caches[cache as usize];
            let at = now.max(unit.fill_port_next[set]);
            unit.fill_port_next[set] = at + 1;
            if at == now {
                self.apply_fill(fetch, now);
            } else {
                self.events.schedule(at, Ev::FillApply { fetch });
            }
        }
    }

    fn resolve_banks(&mut self, now: u64) {
        if self.staging.bank.is_empty() {
            return;
        }
        let mut work = std::mem::take(&mut self.staging.bank);
        work.sort_by_key(|(cache, w)| {
            let (core, req) = self.bank_work_key(w);
            (*cache, core, req)
        });
        for (cache, w) in work {
            let (parts, _) = self.bank_work_parts(&w);
            let start = self.caches[cache as usize].data.grant(parts.set_index, now);
            self.counters.bank_conflict_cycles += start - now;
            if start > now {
                simlog!(
                    self,
                    now,
                    "ev=bank_conflict cache={cache} bank={} delay={}",
                    parts.set_index % self.cfg.l1_geometry.data_banks as u64,
                    start - now
                );
            }
            simlog!(
                self,
                now,
                "ev=bank_start cache={cache} start={start} kind={}",
                bank_work_name(&w)
            );
            self.execute_bank_work(cache, w, start, now);
        }
    }

    fn bank_work_key(&self, w: &BankWork) -> (u32, u64) {
        match w {
            BankWork::LocalRead { req }
            | BankWork::LocalWrite { req }
            | BankWork::HomeRead { req }
            | BankWork::HomeWrite { req } => (self.reqs[*req as usize].rec.core_id, *req),
            BankWork::RemoteRead { fetch } | BankWork::ProbeRead { fetch, .. } => {
                let f = &self.fetches[*fetch];
                (self.reqs[f.origin_req as usize].rec.core_id, f.origin_req)
            }
        }
    }

    fn bank_work_parts(&self, w: &BankWork) -> (AddressParts, u64) {
        match w {
            BankWork::LocalRead { req }
            | BankWork::LocalWrite { req }
            | BankWork::HomeRead { req }
            | BankWork::HomeWrite { req } => (self.reqs[*req as usize].parts, *req),
            BankWork::RemoteRead { fetch } | BankWork::ProbeRead { fetch, .. } => {
                let f = &self.fetches[*fetch];
                (
                    decode_address(f.line * self.cfg.l1_geometry.line_size, &self.cfg.l1_geometry),
                    f.origin_req,
                )
            }
        }
    }

    fn execute_bank_work(&mut self, cache: u32, w: BankWork, start: u64, now: u64) {
        let t_data = self.cfg.t_data;
        match w {
            BankWork::LocalRead { req } => {
                let parts = self.reqs[req as usize].parts;
                let token = self.caches[cache as usize]
                    .data
                    .read_token(parts.line_address, parts.sector_index)
                    .unwrap_or_else(|| {
                        crate::l2mem::initial_token(parts.line_address, parts.sector_index)
                    });
                let r = &mut self.reqs[req as usize].rec;
                r.token = Some(token);
                r.l1_stage_done = Some(start + t_data);
                self.events.schedule(start + t_data, Ev::Complete { req });
            }
            BankWork::LocalWrite { req } => {
                let parts = self.reqs[req as usize].parts;
                self.caches[cache as usize].data.write_token(
                    parts.line_address,
                    parts.sector_index,
                    req,
                );
                self.reqs[req as usize].rec.l1_stage_done = Some(start + t_data);
                self.events.schedule(start + t_data, Ev::Complete { req });
            }
            BankWork::RemoteRead { fetch } => {
                let f = &self.fetches[fetch];
                let (line, sector, target_cache) = (f.line, f.sector, cache);
                match self.caches[cache as usize].data.read_token(line, sector) {
                    Some(token) => {
                        let requester = self.fetches[fetch].cache;
                        let cluster = self.topo.cluster_of(cache);
                        self.events.schedule(
                            start + t_data,
                            Ev::InjectMsg {
                                bus: BusId::Intra(cluster),
                                src: self.topo.local_index(cache),
                                dst: self.topo.local_index(requester),
                                bytes: self.cfg.l1_geometry.sector_size,
                                payload: Payload::RemoteData { fetch, token },
                            },
                        );
                    }
                    None => {
                        // displaced in this very cycle: fall back to L2
                        self.redirect_to_l2(fetch, target_cache, now);
                    }
                }
            }
            BankWork::ProbeRead { fetch, cache: responder } => {
                let f = &self.fetches[fetch];
                match self.caches[cache as usize].data.read_token(f.line, f.sector) {
                    Some(token) => {
                        let prober = self.fetches[fetch].cache;
                        let cluster = self.topo.cluster_of(cache);
                        self.events.schedule(
                            start + t_data,
                            Ev::InjectMsg {
                                bus: BusId::Intra(cluster),
                                src: self.topo.local_index(responder),
                                dst: self.topo.local_index(prober),
                                bytes: self.cfg.l1_geometry.sector_size,
                                payload: Payload::ProbeResp {
                                    fetch,
                                    responder,
                                    hit: true,
                                    token,
                                },
                            },
                        );
                    }
                    None => self.respond_probe(fetch, responder, false, 0, now),
                }
            }
            BankWork::HomeRead { req } => {
                let parts = self.reqs[req as usize].parts;
                let token = self.caches[cache as usize]
                    .data
                    .read_token(parts.line_address, parts.sector_index)
                    .unwrap_or_else(|| {
                        crate::l2mem::initial_token(parts.line_address, parts.sector_index)
                    });
                self.reqs[req as usize].rec.l1_stage_done = Some(start + t_data);
                let core = self.reqs[req as usize].rec.core_id;
                let cluster = self.topo.cluster_of(core);
                self.events.schedule(
                    start + t_data,
                    Ev::InjectMsg {
                        bus: BusId::Intra(cluster),
                        src: self.topo.local_index(cache),
                        dst: self.topo.local_index(core),
                        bytes: self.cfg.l1_geometry.sector_size,
                        payload: Payload::HomeResp {
                            req,
                            token: Some(token),
                        },
                    },
                );
            }
            BankWork::HomeWrite { req } => {
                let parts = self.reqs[req as usize].parts;
                self.caches[cache as usize].data.write_token(
                    parts.line_address,
                    parts.sector_index,
                    req,
                );
                self.reqs[req as usize].rec.l1_stage_done = Some(start + t_data);
                let core = self.reqs[req as usize].rec.core_id;
                let cluster = self.topo.cluster_of(core);
                self.events.schedule(
                    start + t_data,
                    Ev::InjectMsg {
                        bus: BusId::Intra(cluster),
                        src: self.topo.local_index(cache),
                        dst: self.topo.local_index(core),
                        bytes: REQUEST_MSG_BYTES,
                        payload: Payload::HomeResp { req, token: None },
                    },
                );
            }
        }
    }

    fn resolve_l2(&mut self, now: u64) {
        if self.staging.l2.is_empty() {
            return;
        }
        let mut work = std::mem::take(&mut self.staging.l2);
        work.sort_by_key(|(p, w)| {
            let (core, seq) = match w {
                L2Work::Fetch { fetch } => {
                    let f = &self.fetches[*fetch];
                    (self.reqs[f.origin_req as usize].rec.core_id, f.seq)
                }
                L2Work::Writeback { wb } => {
                    let w = &self.writebacks[*wb];
                    (w.src_core, w.seq)
                }
            };
            (*p, core, seq)
        });
        for (p, w) in work {
            let start = self.l2parts[p as usize].admit(now);
            match w {
                L2Work::Fetch { fetch } => {
                    let (line, sector) = {
                        let f = &self.fetches[fetch];
                        (f.line, f.sector)
                    };
                    let out = self.l2parts[p as usize].access(
                        line,
                        sector,
                        start,
                        self.cfg.t_l2,
                        self.cfg.t_mem,
                        &mut self.memory,
                    );
                    simlog!(
                        self,
                        now,
                        "ev=l2_access req={} partition={p} start={start} hit={}",
                        self.fetches[fetch].origin_req,
                        u8::from(out.hit)
                    );
                    self.fetches[fetch].token = Some(out.token);
                    self.events.schedule(out.ready_at, Ev::L2Done { fetch });
                }
                L2Work::Writeback { wb } => {
                    let w = &self.writebacks[wb];
                    let (line, tokens) = (w.line, w.tokens.clone());
                    simlog!(self, now, "ev=l2_writeback partition={p} line={line:#x}");
                    self.l2parts[p as usize].writeback(line, &tokens, start, &mut self.memory);
                }
            }
        }
    }

    fn resolve_buses(&mut self, now: u64) {
        let mut deliveries = Vec::new();
        for (i, x) in self.intra.iter_mut().enumerate() {
            if x.has_staged() {
                for d in x.drain(now) {
                    deliveries.push((BusId::Intra(i as u32), d));
                }
            }
        }
        if self.l2_req_bus.has_staged() {
            for d in self.l2_req_bus.drain(now) {
                deliveries.push((BusId::L2Req, d));
            }
        }
        if self.l2_resp_bus.has_staged() {
            for d in self.l2_resp_bus.drain(now) {
                deliveries.push((BusId::L2Resp, d));
            }
        }
        for (_bus, d) in deliveries {
            let payload = self.payloads[d.tag as usize];
            let ev = match payload {
                Payload::RemoteAccess { fetch } => Ev::RemoteArrive { fetch },
                Payload::RemoteData { fetch, token } => Ev::RemoteDataArrive { fetch, token },
                Payload::Probe { fetch, cache } => Ev::ProbeArrive { fetch, cache },
                Payload::ProbeResp {
                    fetch,
                    responder,
                    hit,
                    token,
                } => Ev::ProbeRespArrive {
                    fetch,
                    responder,
                    hit,
                    token,
                },
                Payload::HomeReq { req } => Ev::HomeArrive { req },
                Payload::HomeResp { req, token } => Ev::HomeRespArrive { req, token },
                Payload::L2Req { fetch } => Ev::L2ReqArrive { fetch },
                Payload::L2Resp { fetch } => Ev::L2RespArrive { fetch },
                Payload::Writeback { wb } => Ev::WbArrive { wb },
            };
            self.events.schedule(d.deliver_at, ev);
        }
        self.payloads.clear();
    }

    fn inject(&mut self, bus: BusId, src: u32, dst: u32, bytes: u64, payload: Payload) {
        let tag = self.payloads.len() as u64;
        self.payloads.push(payload);
        match bus {
            BusId::Intra(cluster) => self.intra[cluster as usize].inject(src, dst, bytes, tag),
            BusId::L2Req => self.l2_req_bus.inject(src, dst, bytes, tag),
            BusId::L2Resp => self.l2_resp_bus.inject(src, dst, bytes, tag),
        }
    }
}

fn bank_work_name(w: &BankWork) -> &'static str {
    match w {
        BankWork::LocalRead { .. } => "local_read",
        BankWork::LocalWrite { .. } => "local_write",
        BankWork::RemoteRead { .. } => "remote_read",
        BankWork::ProbeRead { .. } => "probe_read",
        BankWork::HomeRead { .. } => "home_read",
        BankWork::HomeWrite { .. } => "home_write",
    }
}

/// Runs one simulation to completion.
pub fn run(
    config: &SimConfig,
    trace: &[TraceRecord],
    opts: &RunOptions,
) -> Result<RunResult, SimError> {
    Simulation::new(config, trace, opts)?.run_to_completion()
}
