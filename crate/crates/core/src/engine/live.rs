//! Wall-clock pipeline over real TCP loopback links.
//!
//! One thread per stage plus reader and writer threads per link. Stages talk
//! only through messages: the head runs the same [`HeadScheduler`] as the
//! virtual-time engine, compute is emulated by waiting out the profiled
//! duration, and every activation payload crosses a real socket carrying a
//! micro-batch descriptor followed by filler bytes.

use std::collections::VecDeque;
use std::net::{TcpListener, TcpStream};
use std::sync::mpsc::{self, Receiver, RecvTimeoutError, Sender};
use std::thread::JoinHandle;
use std::time::{Duration, Instant};

use super::{BatchPhase, EngineConfig, EngineError, HeadScheduler, MicroBatch};
use crate::clock::{secs_to_nanos, Nanos};
use crate::controller::{DecisionRecord, RETURN_BYTES_PER_REQUEST};
use crate::profiler::{compute_time, LinkProfile, StageProfile};
use crate::transport::socket::{spawn_receiver, SocketEvent, SocketLink};
use crate::transport::{Payload, TrafficClass, TransportError};
use crate::workload::{Request, Trace};

#[derive(Debug, Clone, Copy)]
pub struct LiveOptions {
    /// Wall seconds per virtual second of compute and arrival spacing.
    pub time_scale: f64,
    /// Abort when the run takes longer than this.
    pub timeout: Duration,
}

impl Default for LiveOptions {
    fn default() -> Self {
        Self {
            time_scale: 1.0,
            timeout: Duration::from_secs(600),
        }
    }
}

#[derive(Debug, Clone)]
pub struct LiveOutput {
    /// Lifecycle times are wall seconds divided by the time scale.
    pub requests: Vec<Request>,
    pub decisions: Vec<DecisionRecord>,
    pub wall_time: Duration,
}

impl LiveOutput {
    pub fn tokens_per_request(&self) -> Vec<u32> {
        self.requests.iter().map(|r| r.tokens_emitted).collect()
    }
}

enum Msg {
    In(SocketEvent),
    Out(SocketEvent),
}

/// Fixed part of the descriptor: id, phase, decode count, tokens, created, count.
const DESCRIPTOR_FIXED: usize = 8 + 1 + 4 + 4 + 8 + 4;

fn encode(mb: &MicroBatch, total: u64) -> Vec<u8> {
    let mut b = Vec::with_capacity(total.max(64) as usize);
    b.extend_from_slice(&mb.id.to_le_bytes());
    b.push(match mb.phase {
        BatchPhase::Prefill => 0,
        BatchPhase::Decode => 1,
        BatchPhase::Mixed => 2,
    });
    b.extend_from_slice(&(mb.decode_count as u32).to_le_bytes());
    b.extend_from_slice(&mb.batched_tokens.to_le_bytes());
    b.extend_from_slice(&mb.created_at.to_le_bytes());
    b.extend_from_slice(&(mb.request_ids.len() as u32).to_le_bytes());
    for id in &mb.request_ids {
        b.extend_from_slice(&id.to_le_bytes());
    }
    if (b.len() as u64) < total {
        b.resize(total as usize, 0);
    }
    b
}

fn decode(b: &[u8]) -> Result<MicroBatch, TransportError> {
    let bad = || TransportError::Framing(format!("bad micro-batch descriptor ({} bytes)", b.len()));
    if b.len() < DESCRIPTOR_FIXED {
        return Err(bad());
    }
    let u64_at = |o: usize| u64::from_le_bytes(b[o..o + 8].try_into().unwrap());
    let u32_at = |o: usize| u32::from_le_bytes(b[o..o + 4].try_into().unwrap());
    let phase = match b[8] {
        0 => BatchPhase::Prefill,
        1 => BatchPhase::Decode,
        2 => BatchPhase::Mixed,
        _ => return Err(bad()),
    };
    let count = u32_at(25) as usize;
    if b.len() < DESCRIPTOR_FIXED + 8 * count {
        return Err(bad());
    }
    Ok(MicroBatch {
        id: u64_at(0),
        phase,
        decode_count: u32_at(9) as usize,
        batched_tokens: u32_at(13),
        created_at: u64_at(17),
        request_ids: (0..count).map(|i| u64_at(DESCRIPTOR_FIXED + 8 * i)).collect(),
    })
}

struct Clock {
    start: Instant,
    scale: f64,
}

impl Clock {
    fn now(&self) -> Nanos {
        secs_to_nanos(self.start.elapsed().as_secs_f64() / self.scale)
    }

    fn wall_at(&self, virt: Nanos) -> Instant {
        self.start + Duration::from_secs_f64(virt as f64 / 1e9 * self.scale)
    }
}

/// Outgoing side of a stage: its link, or nothing for a single stage.
struct Outbound {
    link: SocketLink,
    class_of: fn(&MicroBatch, bool) -> TrafficClass,
}

fn forward_class(mb: &MicroBatch, is_return: bool) -> TrafficClass {
    if is_return || mb.phase == BatchPhase::Decode {
        TrafficClass::Decode
    } else {
        TrafficClass::Prefill
    }
}

impl Outbound {
    fn send(&mut self, mb: &MicroBatch, bytes: u64, is_return: bool, now: Nanos) -> Result<(), EngineError> {
        let data = encode(mb, bytes);
        let p = Payload {
            id: mb.id,
            class: (self.class_of)(mb, is_return),
            bytes: data.len() as u64,
            micro_batch_id: mb.id,
            enqueue_time: now,
        };
        Ok(self.link.enqueue(p, data)?)
    }
}

fn socket_failure(e: &SocketEvent) -> Option<EngineError> {
    match e {
        SocketEvent::Failed { payload_id, reason } => Some(EngineError::Transport(TransportError::LinkFailed {
            payload_id: payload_id.unwrap_or(u64::MAX),
            reason: reason.clone(),
        })),
        _ => None,
    }
}

fn recv_until(rx: &Receiver<Msg>, deadline: Option<Instant>) -> Result<Option<Msg>, EngineError> {
    let res = match deadline {
        Some(d) => rx.recv_timeout(d.saturating_duration_since(Instant::now())),
        None => rx.recv().map_err(|_| RecvTimeoutError::Disconnected),
    };
    match res {
        Ok(m) => Ok(Some(m)),
        Err(RecvTimeoutError::Timeout) => Ok(None),
        Err(RecvTimeoutError::Disconnected) => Err(EngineError::Config("stage channel closed".into())),
    }
}

fn middle_stage(
    profile: StageProfile,
    last: bool,
    bytes_per_token: u64,
    clock: Clock,
    rx: Receiver<Msg>,
    mut out: Outbound,
) -> Result<(), EngineError> {
    let mut input: VecDeque<MicroBatch> = VecDeque::new();
    let mut busy: Option<(Instant, MicroBatch)> = None;
    let mut upstream_done = false;
    loop {
        if busy.is_none() {
            if let Some(mb) = input.pop_front() {
                let secs = compute_time(&profile, mb.phase.compute_phase(), mb.batched_tokens)?;
                let end = Instant::now() + Duration::from_secs_f64(secs * clock.scale);
                busy = Some((end, mb));
            }
        }
        if upstream_done && busy.is_none() && input.is_empty() && out.link.is_idle() {
            out.link.shutdown();
            return Ok(());
        }
        match recv_until(&rx, busy.as_ref().map(|b| b.0))? {
            None => {
                let (_, mb) = busy.take().expect("timeout only while busy");
                let bytes = if last {
                    mb.request_ids.len() as u64 * RETURN_BYTES_PER_REQUEST
                } else {
                    u64::from(mb.batched_tokens) * bytes_per_token
                };
                out.send(&mb, bytes, last, clock.now())?;
            }
            Some(Msg::In(SocketEvent::Delivered { data, .. })) => input.push_back(decode(&data)?),
            Some(Msg::In(SocketEvent::Closed)) => upstream_done = true,
            Some(Msg::Out(SocketEvent::Written { .. })) => out.link.on_written()?,
            Some(Msg::In(e) | Msg::Out(e)) => {
                return Err(socket_failure(&e).unwrap_or_else(|| EngineError::Config(format!("unexpected {e:?}"))))
            }
        }
    }
}

struct HeadRun {
    head: HeadScheduler,
    profile: StageProfile,
    arrivals: Vec<(Nanos, u64)>,
    bytes_per_token: u64,
    clock: Clock,
    deadline: Instant,
}

fn head_stage(mut h: HeadRun, rx: Receiver<Msg>, mut out: Option<Outbound>) -> Result<HeadScheduler, EngineError> {
    let mut input: VecDeque<MicroBatch> = VecDeque::new();
    let mut busy: Option<(Instant, MicroBatch)> = None;
    let mut next_arrival = 0;
    let mut dirty = false;
    loop {
        let now = h.clock.now();
        while next_arrival < h.arrivals.len() && h.arrivals[next_arrival].0 <= now {
            h.head.arrive(h.arrivals[next_arrival].1);
            next_arrival += 1;
            dirty = true;
        }
        if dirty && busy.is_none() && input.is_empty() {
            dirty = false;
            input.extend(h.head.form(now)?);
        }
        if busy.is_none() {
            if let Some(mb) = input.pop_front() {
                h.head.on_head_start(&mb, now);
                let secs = compute_time(&h.profile, mb.phase.compute_phase(), mb.batched_tokens)?;
                let end = Instant::now() + Duration::from_secs_f64(secs * h.clock.scale);
                busy = Some((end, mb));
            }
        }
        if next_arrival == h.arrivals.len() && h.head.unfinished() == 0 {
            if let Some(o) = out.as_mut() {
                o.link.shutdown();
            }
            return Ok(h.head);
        }
        if Instant::now() > h.deadline {
            return Err(EngineError::Stalled {
                unfinished: h.head.unfinished(),
            });
        }
        let wake = [
            busy.as_ref().map(|b| b.0),
            h.arrivals.get(next_arrival).map(|a| h.clock.wall_at(a.0)),
            Some(h.deadline),
        ]
        .into_iter()
        .flatten()
        .min();
        match recv_until(&rx, wake)? {
            None => {
                if busy.as_ref().is_some_and(|b| b.0 <= Instant::now()) {
                    let (_, mb) = busy.take().unwrap();
                    let now = h.clock.now();
                    match out.as_mut() {
                        None => {
                            h.head.complete(&mb, now);
                        }
                        Some(o) => o.send(&mb, u64::from(mb.batched_tokens) * h.bytes_per_token, false, now)?,
                    }
                    dirty = true;
                }
            }
            Some(Msg::In(SocketEvent::Delivered { data, .. })) => {
                let mb = decode(&data)?;
                h.head.complete(&mb, h.clock.now());
                dirty = true;
            }
            Some(Msg::Out(SocketEvent::Written { .. })) => {
                if let Some(o) = out.as_mut() {
                    o.link.on_written()?;
                }
            }
            Some(Msg::In(e) | Msg::Out(e)) => {
                return Err(socket_failure(&e).unwrap_or_else(|| EngineError::Config(format!("unexpected {e:?}"))))
            }
        }
    }
}

fn loopback_pair() -> std::io::Result<(TcpStream, TcpStream)> {
    let listener = TcpListener::bind("127.0.0.1:0")?;
    let client = TcpStream::connect(listener.local_addr()?)?;
    let (server, _) = listener.accept()?;
    Ok((client, server))
}

/// Run `trace` through a real multi-threaded pipeline on loopback sockets.
pub fn run_live(
    cfg: &EngineConfig,
    links: Vec<LinkProfile>,
    trace: &Trace,
    opts: &LiveOptions,
) -> Result<LiveOutput, EngineError> {
    cfg.validate()?;
    if !(opts.time_scale > 0.0 && opts.time_scale.is_finite()) {
        return Err(EngineError::Config("time_scale must be positive".into()));
    }
    if trace.is_empty() {
        return Err(EngineError::Config("trace has no requests".into()));
    }
    let s = cfg.stages();
    if s > 1 && links.len() != s {
        return Err(EngineError::Config(format!("{s} stages need {s} links, got {}", links.len())));
    }
    let io = |e: std::io::Error| EngineError::Transport(TransportError::Framing(e.to_string()));

    let channels: Vec<(Sender<Msg>, Receiver<Msg>)> = (0..s).map(|_| mpsc::channel()).collect();
    let mut outbound: Vec<Option<Outbound>> = (0..s).map(|_| None).collect();
    let mut readers: Vec<JoinHandle<()>> = Vec::new();
    if s > 1 {
        for (i, slot) in outbound.iter_mut().enumerate() {
            let (client, server) = loopback_pair().map_err(io)?;
            let to = (i + 1) % s;
            readers.push(spawn_receiver(server, channels[to].0.clone(), Msg::In).map_err(io)?);
            let link = SocketLink::new(client, cfg.chunk_size, cfg.scheduling_policy, channels[i].0.clone(), Msg::Out)?;
            *slot = Some(Outbound {
                link,
                class_of: forward_class,
            });
        }
    }

    let start = Instant::now();
    let clock = || Clock {
        start,
        scale: opts.time_scale,
    };
    let mut receivers: Vec<Receiver<Msg>> = channels.into_iter().map(|(_, rx)| rx).collect();
    let mut workers = Vec::new();
    for i in (1..s).rev() {
        let rx = receivers.pop().unwrap();
        let out = outbound[i].take().unwrap();
        let profile = cfg.profiles[i].clone();
        let (c, bpt, last) = (clock(), cfg.bytes_per_token(), i + 1 == s);
        workers.push(
            std::thread::Builder::new()
                .name(format!("stage-{i}"))
                .spawn(move || middle_stage(profile, last, bpt, c, rx, out))
                .map_err(io)?,
        );
    }
    let head_rx = receivers.pop().unwrap();
    let arrivals = trace
        .requests
        .iter()
        .enumerate()
        .map(|(i, r)| (secs_to_nanos(r.arrival_time), i as u64))
        .collect();
    let run = HeadRun {
        head: HeadScheduler::new(cfg, links, trace.to_requests()),
        profile: cfg.profiles[0].clone(),
        arrivals,
        bytes_per_token: cfg.bytes_per_token(),
        clock: clock(),
        deadline: start + opts.timeout,
    };
    let head_out = outbound[0].take();
    let result = head_stage(run, head_rx, head_out);

    let mut first_err = None;
    for w in workers {
        match w.join() {
            Ok(Ok(())) => {}
            Ok(Err(e)) => {
                first_err.get_or_insert(e);
            }
            Err(_) => {
                first_err.get_or_insert(EngineError::Config("stage thread panicked".into()));
            }
        }
    }
    for r in readers {
        let _ = r.join();
    }
    let head = result?;
    if let Some(e) = first_err {
        return Err(e);
    }
    let (requests, decisions) = head.into_parts();
    Ok(LiveOutput {
        requests,
        decisions,
        wall_time: start.elapsed(),
    })
}
