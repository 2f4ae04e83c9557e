//! Pipeline execution on a virtual clock.
//!
//! Stage 0 is the head: it owns the request queue, forms micro-batches at
//! every iteration boundary and receives generated token ids back from the
//! last stage. Activations move between stages over [`VirtualLink`]s, so
//! transfer delays and link contention shape the schedule.

mod batch;
pub mod live;
mod log;

use std::cmp::Reverse;
use std::collections::{BinaryHeap, HashMap, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

pub use batch::{admit_and_batch, Admission, BatchLimits, BatchPhase, BatchingMode, Candidate, MicroBatch};
pub use log::{measure_bubble, EventLog, LogKind, LogRecord};

use crate::clock::{nanos_to_secs, secs_to_nanos, Nanos};
use crate::cluster::{ClusterSpec, ModelSpec, PartitionPlan};
use crate::controller::{
    choose_n, predict_bubble, ControllerConfig, ControllerDecision, ControllerError, DecisionRecord,
    RETURN_BYTES_PER_REQUEST,
};
use crate::metrics::{summarize, MetricsError, MetricsReport};
use crate::profiler::{compute_time, LinkProfile, Phase, ProfileError, StageProfile};
use crate::transport::{ChunkSize, LinkPolicy, Payload, TrafficClass, TransportError, TransportLog, VirtualLink};
use crate::workload::{Request, Trace};

#[derive(Debug, Error)]
pub enum EngineError {
    #[error("engine configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Controller(#[from] ControllerError),
    #[error(transparent)]
    Profile(#[from] ProfileError),
    #[error(transparent)]
    Transport(#[from] TransportError),
    #[error(transparent)]
    Metrics(#[from] MetricsError),
    #[error("run stalled with {unfinished} unfinished request(s)")]
    Stalled { unfinished: usize },
}

/// How the micro-batch count is chosen.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum NPolicy {
    /// Re-decided by the controller search.
    #[default]
    Dynamic,
    Fixed(u32),
}

impl fmt::Display for NPolicy {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            NPolicy::Dynamic => f.write_str("dynamic"),
            NPolicy::Fixed(n) => write!(f, "fixed:{n}"),
        }
    }
}

impl std::str::FromStr for NPolicy {
    type Err = String;

    /// `dynamic`, `fixed:N` or a bare `N`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim().to_ascii_lowercase();
        if t == "dynamic" || t == "auto" {
            return Ok(NPolicy::Dynamic);
        }
        let digits = t.strip_prefix("fixed:").or_else(|| t.strip_prefix("fixed=")).unwrap_or(&t);
        match digits.parse::<u32>() {
            Ok(n) if n >= 1 => Ok(NPolicy::Fixed(n)),
            _ => Err(format!("invalid micro-batch policy `{s}` (expected dynamic or fixed:N)")),
        }
    }
}

impl Serialize for NPolicy {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            NPolicy::Dynamic => s.serialize_str("dynamic"),
            NPolicy::Fixed(n) => s.serialize_u32(*n),
        }
    }
}

impl<'de> Deserialize<'de> for NPolicy {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u32),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(0) => Err(serde::de::Error::custom("micro-batch count must be >= 1")),
            Raw::Num(n) => Ok(NPolicy::Fixed(n)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone)]
pub struct EngineConfig {
    pub partition: PartitionPlan,
    pub model: ModelSpec,
    /// One profile per stage, in pipeline order.
    pub profiles: Vec<StageProfile>,
    pub controller: ControllerConfig,
    pub chunk_size: ChunkSize,
    pub scheduling_policy: LinkPolicy,
    /// Carried into outputs; the virtual-time engine draws no randomness.
    pub seed: u64,
    pub n_policy: NPolicy,
    pub batching: BatchingMode,
    /// Re-run the controller every this many iterations.
    pub controller_stride: u32,
}

impl EngineConfig {
    pub fn new(partition: PartitionPlan, model: ModelSpec, profiles: Vec<StageProfile>) -> Self {
        Self {
            partition,
            model,
            profiles,
            controller: ControllerConfig::default(),
            chunk_size: ChunkSize::default(),
            scheduling_policy: LinkPolicy::default(),
            seed: 0,
            n_policy: NPolicy::Dynamic,
            batching: BatchingMode::default(),
            controller_stride: 1,
        }
    }

    pub fn stages(&self) -> usize {
        self.partition.stages.len()
    }

    pub fn validate(&self) -> Result<(), EngineError> {
        self.controller.validate()?;
        self.chunk_size.validate()?;
        self.model
            .validate()
            .map_err(|e| EngineError::Config(e.to_string()))?;
        self.partition
            .validate(self.model.num_layers)
            .map_err(|e| EngineError::Config(e.to_string()))?;
        if self.profiles.len() != self.stages() {
            return Err(EngineError::Config(format!(
                "{} stage profiles for {} stages",
                self.profiles.len(),
                self.stages()
            )));
        }
        for p in &self.profiles {
            p.validate()?;
            for phase in [Phase::Prefill, Phase::Decode] {
                compute_time(p, phase, 1)?;
            }
        }
        if self.n_policy == NPolicy::Fixed(0) {
            return Err(EngineError::Config("fixed micro-batch count must be >= 1".into()));
        }
        if self.controller_stride == 0 {
            return Err(EngineError::Config("controller_stride must be >= 1".into()));
        }
        Ok(())
    }

    /// Links `s -> s+1` for every stage plus the return link to the head.
    /// Empty for a single stage.
    pub fn stage_links(&self, cluster: &ClusterSpec) -> Result<Vec<LinkProfile>, EngineError> {
        let s = self.stages();
        if s <= 1 {
            return Ok(Vec::new());
        }
        (0..s)
            .map(|i| {
                let from = &self.partition.stages[i].node;
                let to = &self.partition.stages[(i + 1) % s].node;
                cluster
                    .link(from, to)
                    .cloned()
                    .ok_or_else(|| EngineError::Config(format!("cluster has no link {from} -> {to}")))
            })
            .collect()
    }

    pub fn bytes_per_token(&self) -> u64 {
        self.model.activation_bytes(1)
    }
}

/// Request queue, batching and controller state of the head stage.
#[derive(Debug, Clone)]
pub struct HeadScheduler {
    controller: ControllerConfig,
    n_policy: NPolicy,
    batching: BatchingMode,
    stride: u32,
    profiles: Vec<StageProfile>,
    links: Vec<LinkProfile>,
    bytes_per_token: u64,
    requests: Vec<Request>,
    pending: VecDeque<u64>,
    ready: VecDeque<u64>,
    in_flight: u32,
    next_mb: u64,
    iteration: u64,
    decision: Option<ControllerDecision>,
    decisions: Vec<DecisionRecord>,
}

impl HeadScheduler {
    /// `requests[i].id` must equal `i`.
    pub fn new(cfg: &EngineConfig, links: Vec<LinkProfile>, requests: Vec<Request>) -> Self {
        debug_assert!(requests.iter().enumerate().all(|(i, r)| r.id == i as u64));
        Self {
            controller: cfg.controller.clone(),
            n_policy: cfg.n_policy,
            batching: cfg.batching,
            stride: cfg.controller_stride.max(1),
            profiles: cfg.profiles.clone(),
            links,
            bytes_per_token: cfg.bytes_per_token(),
            requests,
            pending: VecDeque::new(),
            ready: VecDeque::new(),
            in_flight: 0,
            next_mb: 0,
            iteration: 0,
            decision: None,
            decisions: Vec::new(),
        }
    }

    pub fn arrive(&mut self, id: u64) {
        self.pending.push_back(id);
    }

    pub fn has_work(&self) -> bool {
        !self.pending.is_empty() || !self.ready.is_empty()
    }

    pub fn in_flight(&self) -> u32 {
        self.in_flight
    }

    pub fn requests(&self) -> &[Request] {
        &self.requests
    }

    pub fn decisions(&self) -> &[DecisionRecord] {
        &self.decisions
    }

    pub fn iteration(&self) -> u64 {
        self.iteration
    }

    pub fn unfinished(&self) -> usize {
        self.requests.iter().filter(|r| !r.is_finished()).count()
    }

    pub fn into_parts(self) -> (Vec<Request>, Vec<DecisionRecord>) {
        (self.requests, self.decisions)
    }

    fn decide(&self, queued_tokens: u64, phase: Phase) -> Result<ControllerDecision, EngineError> {
        Ok(match self.n_policy {
            NPolicy::Dynamic => choose_n(
                &self.controller,
                &self.profiles,
                &self.links,
                queued_tokens,
                phase,
                self.bytes_per_token,
            )?,
            NPolicy::Fixed(n) => {
                let budget = self.controller.budget(queued_tokens, n);
                ControllerDecision {
                    n_microbatches: n,
                    token_budget_per_microbatch: budget,
                    predicted_bubble_fraction: predict_bubble(
                        n,
                        &self.profiles,
                        &self.links,
                        budget,
                        phase,
                        self.bytes_per_token,
                    )?,
                }
            }
        })
    }

    /// Run one iteration boundary: re-decide when due and fill free slots.
    pub fn form(&mut self, now: Nanos) -> Result<Vec<MicroBatch>, EngineError> {
        if !self.has_work() {
            return Ok(Vec::new());
        }
        let pending_tokens: u64 = self
            .pending
            .iter()
            .map(|&id| u64::from(self.requests[id as usize].input_len))
            .sum();
        let queued_tokens = self.ready.len() as u64 + pending_tokens;
        let phase = if self.pending.is_empty() {
            Phase::Decode
        } else {
            Phase::Prefill
        };
        let iteration = self.iteration;
        self.iteration += 1;
        if self.decision.is_none() || iteration.is_multiple_of(u64::from(self.stride)) {
            let d = self.decide(queued_tokens, phase)?;
            self.decisions.push(DecisionRecord {
                iteration,
                n: d.n_microbatches,
                token_budget: d.token_budget_per_microbatch,
                predicted_bubble: d.predicted_bubble_fraction,
            });
            self.decision = Some(d);
        }
        let n = self.decision.expect("decided above").n_microbatches;
        let slots = n.saturating_sub(self.in_flight);
        if slots == 0 {
            return Ok(Vec::new());
        }
        let limits = BatchLimits {
            bins: slots,
            token_budget: self.controller.budget(queued_tokens, slots),
            max_batch_size: self.controller.max_batch_size,
            mode: self.batching,
        };
        let window = (slots as usize).saturating_mul(self.controller.max_batch_size as usize);
        let decoding: Vec<u64> = self.ready.iter().copied().collect();
        let queued: Vec<Candidate> = self
            .pending
            .iter()
            .take(window)
            .map(|&id| (id, self.requests[id as usize].input_len))
            .collect();
        let a = admit_and_batch(&decoding, &queued, limits, self.next_mb, now);
        self.ready.drain(..a.decodes_taken);
        self.pending.drain(..a.prefills_taken);
        self.next_mb += a.micro_batches.len() as u64;
        self.in_flight += a.micro_batches.len() as u32;
        Ok(a.micro_batches)
    }

    /// The head begins computing `mb`.
    pub fn on_head_start(&mut self, mb: &MicroBatch, now: Nanos) {
        let t = nanos_to_secs(now);
        for &id in mb.prefill_ids() {
            self.requests[id as usize].start_prefill(t);
        }
    }

    /// Token ids for `mb` reached the head; returns ids that emitted a token.
    pub fn complete(&mut self, mb: &MicroBatch, now: Nanos) -> Vec<u64> {
        let t = nanos_to_secs(now);
        for &id in &mb.request_ids {
            let r = &mut self.requests[id as usize];
            r.emit_token(t);
            if !r.is_finished() {
                self.ready.push_back(id);
            }
        }
        self.in_flight -= 1;
        mb.request_ids.clone()
    }
}

/// Everything a virtual-time run produces.
#[derive(Debug, Clone)]
pub struct RunOutput {
    pub requests: Vec<Request>,
    pub log: EventLog,
    pub transport: TransportLog,
    pub decisions: Vec<DecisionRecord>,
    /// `(time, request id)` per emitted token, in emission order.
    pub emissions: Vec<(Nanos, u64)>,
    pub report: MetricsReport,
}

impl RunOutput {
    /// Tokens emitted in `[t0, t1)`.
    pub fn tokens_in_window(&self, t0: Nanos, t1: Nanos) -> u64 {
        self.emissions.iter().filter(|(t, _)| (t0..t1).contains(t)).count() as u64
    }

    pub fn tokens_per_request(&self) -> Vec<u32> {
        self.requests.iter().map(|r| r.tokens_emitted).collect()
    }
}

/// Ordered so that simultaneous events resolve deterministically.
#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
enum EventKind {
    PayloadDelivered,
    ComputeDone,
    ChunkSent,
    Arrival,
    IterationBoundary,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord)]
struct Event {
    time: Nanos,
    kind: EventKind,
    subject: u64,
    seq: u64,
    stage: u32,
}

struct Hop {
    mb: u64,
    to_stage: u32,
    is_return: bool,
}

struct Stage {
    profile: StageProfile,
    busy: Option<u64>,
    input: VecDeque<u64>,
}

struct Sim {
    head: HeadScheduler,
    stages: Vec<Stage>,
    links: Vec<VirtualLink>,
    bytes_per_token: u64,
    queue: BinaryHeap<Reverse<Event>>,
    seq: u64,
    now: Nanos,
    log: EventLog,
    tlog: TransportLog,
    mbs: HashMap<u64, MicroBatch>,
    hops: HashMap<u64, Hop>,
    next_payload: u64,
    boundary_pending: bool,
    emissions: Vec<(Nanos, u64)>,
}

/// Run `trace` through the pipeline described by `cfg` on `cluster`.
pub fn run(cfg: &EngineConfig, cluster: &ClusterSpec, trace: &Trace) -> Result<RunOutput, EngineError> {
    cfg.validate()?;
    let links = cfg.stage_links(cluster)?;
    run_with_links(cfg, links, trace)
}

/// Like [`run`] with explicit per-hop links (see [`EngineConfig::stage_links`]).
pub fn run_with_links(cfg: &EngineConfig, links: Vec<LinkProfile>, trace: &Trace) -> Result<RunOutput, EngineError> {
    cfg.validate()?;
    if trace.is_empty() {
        return Err(EngineError::Config("trace has no requests".into()));
    }
    let s = cfg.stages();
    if s > 1 && links.len() != s {
        return Err(EngineError::Config(format!("{s} stages need {s} links, got {}", links.len())));
    }
    for l in &links {
        l.validate()?;
    }
    let vlinks = links
        .iter()
        .map(|l| {
            VirtualLink::new(
                format!("{}->{}", l.from, l.to),
                l.clone(),
                cfg.chunk_size,
                cfg.scheduling_policy,
            )
        })
        .collect::<Result<Vec<_>, _>>()?;
    let requests = trace.to_requests();
    let mut sim = Sim {
        head: HeadScheduler::new(cfg, links, requests),
        stages: cfg
            .profiles
            .iter()
            .map(|p| Stage {
                profile: p.clone(),
                busy: None,
                input: VecDeque::new(),
            })
            .collect(),
        links: vlinks,
        bytes_per_token: cfg.bytes_per_token(),
        queue: BinaryHeap::new(),
        seq: 0,
        now: 0,
        log: EventLog::default(),
        tlog: TransportLog::default(),
        mbs: HashMap::new(),
        hops: HashMap::new(),
        next_payload: 0,
        boundary_pending: false,
        emissions: Vec::new(),
    };
    for (i, seed) in trace.requests.iter().enumerate() {
        sim.push(secs_to_nanos(seed.arrival_time), EventKind::Arrival, i as u64, 0);
    }
    sim.run_loop()?;

    let unfinished = sim.head.unfinished();
    if unfinished > 0 {
        return Err(EngineError::Stalled { unfinished });
    }
    let report = summarize(&sim.log, sim.head.requests(), s)?;
    let (requests, decisions) = sim.head.into_parts();
    Ok(RunOutput {
        requests,
        log: sim.log,
        transport: sim.tlog,
        decisions,
        emissions: sim.emissions,
        report,
    })
}

impl Sim {
    fn push(&mut self, time: Nanos, kind: EventKind, subject: u64, stage: u32) {
        self.seq += 1;
        self.queue.push(Reverse(Event {
            time,
            kind,
            subject,
            seq: self.seq,
            stage,
        }));
    }

    fn run_loop(&mut self) -> Result<(), EngineError> {
        while let Some(Reverse(ev)) = self.queue.pop() {
            debug_assert!(ev.time >= self.now);
            self.now = ev.time;
            match ev.kind {
                EventKind::Arrival => {
                    self.log.push(self.now, LogKind::Arrival, ev.subject, None);
                    self.head.arrive(ev.subject);
                    self.request_boundary();
                }
                EventKind::IterationBoundary => self.on_boundary()?,
                EventKind::ComputeDone => self.on_compute_done(ev.subject, ev.stage)?,
                EventKind::ChunkSent => self.on_chunk_sent(ev.stage as usize),
                EventKind::PayloadDelivered => self.on_delivered(ev.subject)?,
            }
        }
        Ok(())
    }

    fn head_idle(&self) -> bool {
        self.stages[0].busy.is_none() && self.stages[0].input.is_empty()
    }

    fn request_boundary(&mut self) {
        if !self.boundary_pending && self.head_idle() && self.head.has_work() {
            self.boundary_pending = true;
            self.push(self.now, EventKind::IterationBoundary, 0, 0);
        }
    }

    fn on_boundary(&mut self) -> Result<(), EngineError> {
        self.boundary_pending = false;
        if !self.head_idle() || !self.head.has_work() {
            return Ok(());
        }
        self.log
            .push(self.now, LogKind::IterationBoundary, self.head.iteration(), Some(0));
        for mb in self.head.form(self.now)? {
            self.stages[0].input.push_back(mb.id);
            self.mbs.insert(mb.id, mb);
        }
        self.try_start(0)
    }

    fn try_start(&mut self, s: usize) -> Result<(), EngineError> {
        let stage = &mut self.stages[s];
        if stage.busy.is_some() {
            return Ok(());
        }
        let Some(id) = stage.input.pop_front() else {
            return Ok(());
        };
        let mb = &self.mbs[&id];
        let secs = compute_time(&stage.profile, mb.phase.compute_phase(), mb.batched_tokens)?;
        stage.busy = Some(id);
        if s == 0 {
            self.head.on_head_start(mb, self.now);
        }
        self.log.push(self.now, LogKind::ComputeStart, id, Some(s as u32));
        let done = self.now + secs_to_nanos(secs).max(1);
        self.push(done, EventKind::ComputeDone, id, s as u32);
        Ok(())
    }

    fn on_compute_done(&mut self, id: u64, s: u32) -> Result<(), EngineError> {
        let su = s as usize;
        self.log.push(self.now, LogKind::ComputeDone, id, Some(s));
        self.stages[su].busy = None;
        let n = self.stages.len();
        if n == 1 {
            self.complete(id);
        } else {
            let mb = &self.mbs[&id];
            let (bytes, class, is_return) = if su + 1 == n {
                (
                    mb.request_ids.len() as u64 * RETURN_BYTES_PER_REQUEST,
                    TrafficClass::Decode,
                    true,
                )
            } else {
                let class = match mb.phase {
                    BatchPhase::Decode => TrafficClass::Decode,
                    BatchPhase::Prefill | BatchPhase::Mixed => TrafficClass::Prefill,
                };
                (u64::from(mb.batched_tokens) * self.bytes_per_token, class, false)
            };
            self.send(su, id, bytes, class, ((su + 1) % n) as u32, is_return)?;
        }
        self.try_start(su)?;
        if su == 0 {
            self.request_boundary();
        }
        Ok(())
    }

    fn send(
        &mut self,
        link: usize,
        mb: u64,
        bytes: u64,
        class: TrafficClass,
        to_stage: u32,
        is_return: bool,
    ) -> Result<(), EngineError> {
        let id = self.next_payload;
        self.next_payload += 1;
        self.hops.insert(
            id,
            Hop {
                mb,
                to_stage,
                is_return,
            },
        );
        let p = Payload {
            id,
            class,
            bytes: bytes.max(1),
            micro_batch_id: mb,
            enqueue_time: self.now,
        };
        if let Some(t) = self.links[link].enqueue(p, self.now, &mut self.tlog)? {
            self.push(t.end, EventKind::ChunkSent, link as u64, link as u32);
        }
        Ok(())
    }

    fn on_chunk_sent(&mut self, link: usize) {
        let (done, next) = self.links[link].on_sent(self.now, &mut self.tlog);
        self.log
            .push(self.now, LogKind::ChunkSent, done.chunk.payload_id, Some(link as u32));
        if done.chunk.is_last {
            self.push(
                done.delivered_at,
                EventKind::PayloadDelivered,
                done.chunk.payload_id,
                link as u32,
            );
        }
        if let Some(t) = next {
            self.push(t.end, EventKind::ChunkSent, link as u64, link as u32);
        }
    }

    fn on_delivered(&mut self, payload: u64) -> Result<(), EngineError> {
        let hop = self.hops.remove(&payload).expect("delivery of a known payload");
        self.log
            .push(self.now, LogKind::PayloadDelivered, hop.mb, Some(hop.to_stage));
        if hop.is_return {
            self.complete(hop.mb);
            Ok(())
        } else {
            self.stages[hop.to_stage as usize].input.push_back(hop.mb);
            self.try_start(hop.to_stage as usize)
        }
    }

    fn complete(&mut self, id: u64) {
        let mb = self.mbs.remove(&id).expect("completion of a known micro-batch");
        for rid in self.head.complete(&mb, self.now) {
            self.emissions.push((self.now, rid));
        }
        self.request_boundary();
    }
}
