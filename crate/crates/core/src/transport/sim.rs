use std::io::Write;

use serde::{Deserialize, Serialize};

use super::{Chunk, ChunkSize, LinkPolicy, LinkQueue, Payload, TrafficClass, TransportError};
use crate::clock::{secs_to_nanos, Nanos};
use crate::profiler::LinkProfile;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum LinkEvent {
    /// First byte of the chunk goes on the wire.
    Start,
    /// Last byte leaves the sender; the link is free again.
    Sent,
    /// Chunk arrives at the receiver.
    Delivered,
}

impl LinkEvent {
    fn as_str(self) -> &'static str {
        match self {
            LinkEvent::Start => "start",
            LinkEvent::Sent => "sent",
            LinkEvent::Delivered => "delivered",
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct LinkRecord {
    pub time: Nanos,
    pub link: String,
    pub payload_id: u64,
    pub chunk_index: u32,
    pub bytes: u64,
    pub class: TrafficClass,
    pub event: LinkEvent,
}

/// Emission and delivery log of one or more links.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct TransportLog {
    pub records: Vec<LinkRecord>,
}

impl TransportLog {
    /// Time the first chunk of `payload_id` started transmitting.
    pub fn first_start(&self, payload_id: u64) -> Option<Nanos> {
        self.records
            .iter()
            .filter(|r| r.payload_id == payload_id && r.event == LinkEvent::Start)
            .map(|r| r.time)
            .min()
    }

    /// Records of one event type in emission order.
    pub fn events(&self, event: LinkEvent) -> impl Iterator<Item = &LinkRecord> {
        self.records.iter().filter(move |r| r.event == event)
    }

    /// CSV `time_s,link,payload_id,chunk_index,bytes,class,event`, sorted by time.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        let mut rows: Vec<&LinkRecord> = self.records.iter().collect();
        rows.sort_by_key(|r| r.time);
        writeln!(w, "time_s,link,payload_id,chunk_index,bytes,class,event")?;
        for r in rows {
            writeln!(
                w,
                "{},{},{},{},{},{},{}",
                crate::clock::format_secs(r.time),
                r.link,
                r.payload_id,
                r.chunk_index,
                r.bytes,
                r.class,
                r.event.as_str()
            )?;
        }
        Ok(())
    }
}

/// A chunk occupying the link.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct Transmission {
    pub chunk: Chunk,
    pub start: Nanos,
    /// Transmission end; the link frees up here.
    pub end: Nanos,
    /// End plus one-way latency.
    pub delivered_at: Nanos,
}

/// A link serializing chunks on the virtual clock.
#[derive(Debug, Clone)]
pub struct VirtualLink {
    name: String,
    profile: LinkProfile,
    latency_ns: Nanos,
    queue: LinkQueue,
    in_flight: Option<Transmission>,
}

impl VirtualLink {
    pub fn new(
        name: impl Into<String>,
        profile: LinkProfile,
        chunk_size: ChunkSize,
        policy: LinkPolicy,
    ) -> Result<Self, TransportError> {
        Ok(Self {
            name: name.into(),
            latency_ns: secs_to_nanos(profile.latency_s),
            profile,
            queue: LinkQueue::new(chunk_size, policy)?,
            in_flight: None,
        })
    }

    pub fn name(&self) -> &str {
        &self.name
    }

    pub fn profile(&self) -> &LinkProfile {
        &self.profile
    }

    pub fn is_busy(&self) -> bool {
        self.in_flight.is_some()
    }

    pub fn in_flight(&self) -> Option<&Transmission> {
        self.in_flight.as_ref()
    }

    pub fn queue(&self) -> &LinkQueue {
        &self.queue
    }

    /// Serialization time of `bytes` in whole nanoseconds.
    pub fn wire_time(&self, bytes: u64) -> Nanos {
        secs_to_nanos(self.profile.serialization_time(bytes))
    }

    /// Queue `p`; if the link was idle the returned transmission starts now.
    pub fn enqueue(
        &mut self,
        p: Payload,
        now: Nanos,
        log: &mut TransportLog,
    ) -> Result<Option<Transmission>, TransportError> {
        self.queue.enqueue(p)?;
        if self.in_flight.is_some() {
            return Ok(None);
        }
        Ok(self.start_next(now, log))
    }

    /// Finish the in-flight chunk at `now` and start the next one, if any.
    pub fn on_sent(
        &mut self,
        now: Nanos,
        log: &mut TransportLog,
    ) -> (Transmission, Option<Transmission>) {
        let done = self
            .in_flight
            .take()
            .expect("on_sent called on an idle link");
        debug_assert_eq!(done.end, now);
        log.records.push(self.record(now, &done.chunk, LinkEvent::Sent));
        log.records
            .push(self.record(done.delivered_at, &done.chunk, LinkEvent::Delivered));
        (done, self.start_next(now, log))
    }

    fn start_next(&mut self, now: Nanos, log: &mut TransportLog) -> Option<Transmission> {
        let chunk = self.queue.next_chunk()?;
        let end = now + self.wire_time(chunk.bytes);
        let t = Transmission {
            chunk,
            start: now,
            end,
            delivered_at: end + self.latency_ns,
        };
        log.records.push(self.record(now, &chunk, LinkEvent::Start));
        self.in_flight = Some(t);
        Some(t)
    }

    fn record(&self, time: Nanos, c: &Chunk, event: LinkEvent) -> LinkRecord {
        LinkRecord {
            time,
            link: self.name.clone(),
            payload_id: c.payload_id,
            chunk_index: c.index,
            bytes: c.bytes,
            class: c.class,
            event,
        }
    }
}

/// Result of replaying payload arrivals over one link.
#[derive(Debug, Clone, Default)]
pub struct LinkRun {
    pub log: TransportLog,
    /// `(payload_id, delivery time)` in delivery order.
    pub deliveries: Vec<(u64, Nanos)>,
}

/// Replay `payloads` (enqueued at their `enqueue_time`) over a single link.
/// Arrivals at the same instant as a chunk completion are queued first.
pub fn simulate_link(
    profile: &LinkProfile,
    chunk_size: ChunkSize,
    policy: LinkPolicy,
    payloads: &[Payload],
) -> Result<LinkRun, TransportError> {
    let mut link = VirtualLink::new(
        format!("{}->{}", profile.from, profile.to),
        profile.clone(),
        chunk_size,
        policy,
    )?;
    let mut arrivals: Vec<&Payload> = payloads.iter().collect();
    arrivals.sort_by_key(|p| p.enqueue_time);

    let mut run = LinkRun::default();
    let mut next = 0;
    loop {
        let arrival = arrivals.get(next).map(|p| p.enqueue_time);
        let sent = link.in_flight().map(|t| t.end);
        match (arrival, sent) {
            (None, None) => break,
            (Some(a), s) if s.is_none_or(|s| a <= s) => {
                link.enqueue(arrivals[next].clone(), a, &mut run.log)?;
                next += 1;
            }
            (_, Some(s)) => {
                let (done, _) = link.on_sent(s, &mut run.log);
                if done.chunk.is_last {
                    run.deliveries.push((done.chunk.payload_id, done.delivered_at));
                }
            }
            (Some(_), None) => unreachable!(),
        }
    }
    run.deliveries.sort_by_key(|&(id, t)| (t, id));
    Ok(run)
}
