//! Activation transport between pipeline stages.
//!
//! Each directed link is a serial resource fed by a [`LinkQueue`]. Decode
//! payloads are small and always go out whole, ahead of any waiting prefill
//! data; prefill payloads are cut into fixed-size chunks so a decode payload
//! never waits behind more than one chunk.
//!
//! [`VirtualLink`] drives a queue on the simulator's virtual clock and
//! [`socket`] moves the same chunks over TCP.

use std::collections::{BTreeSet, VecDeque};
use std::fmt;

use serde::{Deserialize, Serialize};
use thiserror::Error;

mod sim;
pub mod socket;

pub use sim::{simulate_link, LinkEvent, LinkRecord, LinkRun, Transmission, TransportLog, VirtualLink};

/// Default prefill chunk size: 256 KiB.
pub const DEFAULT_CHUNK_SIZE: u64 = 256 * 1024;

#[derive(Debug, Error, Clone, PartialEq, Eq)]
pub enum TransportError {
    #[error("payload {0} is already queued on this link")]
    DuplicatePayload(u64),
    #[error("payload {0} has no bytes")]
    EmptyPayload(u64),
    #[error("chunk size must be at least one byte")]
    ZeroChunkSize,
    #[error("link failure on payload {payload_id}: {reason}")]
    LinkFailed { payload_id: u64, reason: String },
    #[error("framing error: {0}")]
    Framing(String),
}

/// Maximum bytes of a prefill chunk, or no splitting at all.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Hash)]
pub enum ChunkSize {
    Bytes(u64),
    Unbounded,
}

impl Default for ChunkSize {
    fn default() -> Self {
        ChunkSize::Bytes(DEFAULT_CHUNK_SIZE)
    }
}

impl ChunkSize {
    pub fn limit(self) -> u64 {
        match self {
            ChunkSize::Bytes(b) => b,
            ChunkSize::Unbounded => u64::MAX,
        }
    }

    pub fn validate(self) -> Result<(), TransportError> {
        match self {
            ChunkSize::Bytes(0) => Err(TransportError::ZeroChunkSize),
            _ => Ok(()),
        }
    }
}

impl fmt::Display for ChunkSize {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            ChunkSize::Bytes(b) => write!(f, "{b}"),
            ChunkSize::Unbounded => f.write_str("inf"),
        }
    }
}

impl std::str::FromStr for ChunkSize {
    type Err = String;

    /// Accepts plain byte counts, `KiB`/`MiB` suffixes, and `inf`/`none`.
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        let t = s.trim();
        if matches!(t.to_ascii_lowercase().as_str(), "inf" | "infinity" | "none" | "unbounded" | "∞") {
            return Ok(ChunkSize::Unbounded);
        }
        let lower = t.to_ascii_lowercase();
        let (digits, mult) = if let Some(d) = lower.strip_suffix("kib") {
            (d, 1024)
        } else if let Some(d) = lower.strip_suffix("mib") {
            (d, 1024 * 1024)
        } else if let Some(d) = lower.strip_suffix('b') {
            (d, 1)
        } else {
            (lower.as_str(), 1)
        };
        let v: u64 = digits
            .trim()
            .parse()
            .map_err(|_| format!("invalid chunk size `{s}`"))?;
        if v == 0 {
            return Err("chunk size must be positive".into());
        }
        Ok(ChunkSize::Bytes(v * mult))
    }
}

impl Serialize for ChunkSize {
    fn serialize<S: serde::Serializer>(&self, s: S) -> Result<S::Ok, S::Error> {
        match self {
            ChunkSize::Bytes(b) => s.serialize_u64(*b),
            ChunkSize::Unbounded => s.serialize_str("inf"),
        }
    }
}

impl<'de> Deserialize<'de> for ChunkSize {
    fn deserialize<D: serde::Deserializer<'de>>(d: D) -> Result<Self, D::Error> {
        #[derive(Deserialize)]
        #[serde(untagged)]
        enum Raw {
            Num(u64),
            Text(String),
        }
        match Raw::deserialize(d)? {
            Raw::Num(0) => Err(serde::de::Error::custom("chunk size must be positive")),
            Raw::Num(b) => Ok(ChunkSize::Bytes(b)),
            Raw::Text(t) => t.parse().map_err(serde::de::Error::custom),
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
pub enum TrafficClass {
    Prefill,
    Decode,
}

impl fmt::Display for TrafficClass {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.write_str(match self {
            TrafficClass::Prefill => "prefill",
            TrafficClass::Decode => "decode",
        })
    }
}

/// How a link picks the next chunk.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
pub enum LinkPolicy {
    /// Waiting decode payloads go before any further prefill chunk.
    #[default]
    DecodePriority,
    /// Strict arrival order across both classes; chunking still applies.
    #[serde(alias = "FCFS")]
    Fcfs,
}

/// One unit of data handed to a link.
#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct Payload {
    pub id: u64,
    pub class: TrafficClass,
    pub bytes: u64,
    pub micro_batch_id: u64,
    /// Virtual nanoseconds.
    pub enqueue_time: u64,
}

/// One transmission unit on the wire.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct Chunk {
    pub payload_id: u64,
    pub index: u32,
    pub bytes: u64,
    pub is_last: bool,
    pub class: TrafficClass,
}

#[derive(Debug, Clone)]
struct Queued {
    payload: Payload,
    seq: u64,
}

/// Per-link transmit queues.
#[derive(Debug, Clone)]
pub struct LinkQueue {
    decode_queue: VecDeque<Queued>,
    prefill_queue: VecDeque<Queued>,
    chunk_size: ChunkSize,
    policy: LinkPolicy,
    /// Bytes already emitted and next chunk index of the head prefill payload.
    prefill_progress: (u64, u32),
    queued_ids: BTreeSet<u64>,
    next_seq: u64,
}

impl LinkQueue {
    pub fn new(chunk_size: ChunkSize, policy: LinkPolicy) -> Result<Self, TransportError> {
        chunk_size.validate()?;
        Ok(Self {
            decode_queue: VecDeque::new(),
            prefill_queue: VecDeque::new(),
            chunk_size,
            policy,
            prefill_progress: (0, 0),
            queued_ids: BTreeSet::new(),
            next_seq: 0,
        })
    }

    pub fn chunk_size(&self) -> ChunkSize {
        self.chunk_size
    }

    pub fn policy(&self) -> LinkPolicy {
        self.policy
    }

    pub fn enqueue(&mut self, p: Payload) -> Result<(), TransportError> {
        if p.bytes == 0 {
            return Err(TransportError::EmptyPayload(p.id));
        }
        if !self.queued_ids.insert(p.id) {
            return Err(TransportError::DuplicatePayload(p.id));
        }
        let q = Queued {
            payload: p,
            seq: self.next_seq,
        };
        self.next_seq += 1;
        match q.payload.class {
            TrafficClass::Decode => self.decode_queue.push_back(q),
            TrafficClass::Prefill => self.prefill_queue.push_back(q),
        }
        Ok(())
    }

    pub fn is_empty(&self) -> bool {
        self.decode_queue.is_empty() && self.prefill_queue.is_empty()
    }

    pub fn decode_len(&self) -> usize {
        self.decode_queue.len()
    }

    pub fn prefill_len(&self) -> usize {
        self.prefill_queue.len()
    }

    /// Ids waiting in the decode queue, head first.
    pub fn decode_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.decode_queue.iter().map(|q| q.payload.id)
    }

    /// Ids waiting in the prefill queue, head first.
    pub fn prefill_ids(&self) -> impl Iterator<Item = u64> + '_ {
        self.prefill_queue.iter().map(|q| q.payload.id)
    }

    /// Take the next chunk to transmit, if any.
    pub fn next_chunk(&mut self) -> Option<Chunk> {
        let take_decode = match (self.decode_queue.front(), self.prefill_queue.front()) {
            (None, None) => return None,
            (Some(_), None) => true,
            (None, Some(_)) => false,
            (Some(d), Some(p)) => match self.policy {
                LinkPolicy::DecodePriority => true,
                LinkPolicy::Fcfs => d.seq < p.seq,
            },
        };
        if take_decode {
            let q = self.decode_queue.pop_front().unwrap();
            self.queued_ids.remove(&q.payload.id);
            return Some(Chunk {
                payload_id: q.payload.id,
                index: 0,
                bytes: q.payload.bytes,
                is_last: true,
                class: TrafficClass::Decode,
            });
        }

        let head = self.prefill_queue.front().unwrap();
        let (sent, index) = self.prefill_progress;
        let remaining = head.payload.bytes - sent;
        let bytes = remaining.min(self.chunk_size.limit());
        let is_last = bytes == remaining;
        let chunk = Chunk {
            payload_id: head.payload.id,
            index,
            bytes,
            is_last,
            class: TrafficClass::Prefill,
        };
        if is_last {
            let q = self.prefill_queue.pop_front().unwrap();
            self.queued_ids.remove(&q.payload.id);
            self.prefill_progress = (0, 0);
        } else {
            self.prefill_progress = (sent + bytes, index + 1);
        }
        Some(chunk)
    }

    /// Payload metadata for a queued id.
    pub fn get(&self, id: u64) -> Option<&Payload> {
        self.decode_queue
            .iter()
            .chain(self.prefill_queue.iter())
            .map(|q| &q.payload)
            .find(|p| p.id == id)
    }
}
