//! TCP backend for the link contract.
//!
//! Wire format of one frame, all integers little-endian:
//!
//! ```text
//! +-----------+----------------+-----------------+-----------+------------+
//! | len: u32  | payload_id:u64 | chunk_index:u32 | flags:u32 | body[len]  |
//! +-----------+----------------+-----------------+-----------+------------+
//!             |<------------- 16-byte header ------------->|
//! ```
//!
//! `flags` bit 0 marks the last chunk of a payload, bit 1 the decode class.
//! The owner of a [`SocketLink`] keeps the [`LinkQueue`] and hands the sender
//! thread one chunk at a time, so priority decisions happen at chunk
//! boundaries exactly as on the virtual clock.

use std::collections::BTreeMap;
use std::io::{self, BufReader, BufWriter, Read, Write};
use std::net::{Shutdown, TcpStream};
use std::sync::mpsc::{self, Receiver, Sender};
use std::thread::JoinHandle;

use super::{Chunk, ChunkSize, LinkPolicy, LinkQueue, Payload, TrafficClass, TransportError};

pub const HEADER_LEN: usize = 16;
pub const FLAG_LAST: u32 = 1;
pub const FLAG_DECODE: u32 = 1 << 1;
/// Frames larger than this are rejected as corrupt.
pub const MAX_FRAME_BODY: u32 = 1 << 30;

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct FrameHeader {
    pub payload_id: u64,
    pub chunk_index: u32,
    pub flags: u32,
}

impl FrameHeader {
    pub fn for_chunk(c: &Chunk) -> Self {
        let mut flags = 0;
        if c.is_last {
            flags |= FLAG_LAST;
        }
        if c.class == TrafficClass::Decode {
            flags |= FLAG_DECODE;
        }
        Self {
            payload_id: c.payload_id,
            chunk_index: c.index,
            flags,
        }
    }

    pub fn encode(&self) -> [u8; HEADER_LEN] {
        let mut b = [0u8; HEADER_LEN];
        b[0..8].copy_from_slice(&self.payload_id.to_le_bytes());
        b[8..12].copy_from_slice(&self.chunk_index.to_le_bytes());
        b[12..16].copy_from_slice(&self.flags.to_le_bytes());
        b
    }

    pub fn decode(b: &[u8; HEADER_LEN]) -> Self {
        Self {
            payload_id: u64::from_le_bytes(b[0..8].try_into().unwrap()),
            chunk_index: u32::from_le_bytes(b[8..12].try_into().unwrap()),
            flags: u32::from_le_bytes(b[12..16].try_into().unwrap()),
        }
    }

    pub fn is_last(&self) -> bool {
        self.flags & FLAG_LAST != 0
    }

    pub fn class(&self) -> TrafficClass {
        if self.flags & FLAG_DECODE != 0 {
            TrafficClass::Decode
        } else {
            TrafficClass::Prefill
        }
    }
}

pub fn write_frame(w: &mut impl Write, h: &FrameHeader, body: &[u8]) -> io::Result<()> {
    let len = u32::try_from(body.len())
        .ok()
        .filter(|l| *l <= MAX_FRAME_BODY)
        .ok_or_else(|| io::Error::new(io::ErrorKind::InvalidInput, "frame body too large"))?;
    w.write_all(&len.to_le_bytes())?;
    w.write_all(&h.encode())?;
    w.write_all(body)
}

/// Read one frame; `Ok(None)` on a clean end of stream between frames.
pub fn read_frame(r: &mut impl Read) -> Result<Option<(FrameHeader, Vec<u8>)>, TransportError> {
    let mut len = [0u8; 4];
    match read_exact_or_eof(r, &mut len)? {
        0 => return Ok(None),
        4 => {}
        n => return Err(TransportError::Framing(format!("truncated length prefix ({n} bytes)"))),
    }
    let len = u32::from_le_bytes(len);
    if len > MAX_FRAME_BODY {
        return Err(TransportError::Framing(format!("frame body of {len} bytes")));
    }
    let mut header = [0u8; HEADER_LEN];
    r.read_exact(&mut header)
        .map_err(|e| TransportError::Framing(format!("truncated header: {e}")))?;
    let mut body = vec![0u8; len as usize];
    r.read_exact(&mut body)
        .map_err(|e| TransportError::Framing(format!("truncated body: {e}")))?;
    Ok(Some((FrameHeader::decode(&header), body)))
}

fn read_exact_or_eof(r: &mut impl Read, buf: &mut [u8]) -> Result<usize, TransportError> {
    let mut filled = 0;
    while filled < buf.len() {
        match r.read(&mut buf[filled..]) {
            Ok(0) => break,
            Ok(n) => filled += n,
            Err(e) if e.kind() == io::ErrorKind::Interrupted => {}
            Err(e) => return Err(TransportError::Framing(e.to_string())),
        }
    }
    Ok(filled)
}

/// Rebuilds payloads from in-order chunks.
#[derive(Debug, Default)]
pub struct Reassembler {
    partial: BTreeMap<u64, (u32, Vec<u8>)>,
}

impl Reassembler {
    /// Feed one frame; returns the payload once its last chunk arrives.
    pub fn push(
        &mut self,
        h: FrameHeader,
        body: Vec<u8>,
    ) -> Result<Option<(u64, TrafficClass, Vec<u8>)>, TransportError> {
        let entry = self.partial.entry(h.payload_id).or_insert((0, Vec::new()));
        if h.chunk_index != entry.0 {
            return Err(TransportError::Framing(format!(
                "payload {}: chunk {} arrived, expected {}",
                h.payload_id, h.chunk_index, entry.0
            )));
        }
        entry.0 += 1;
        entry.1.extend_from_slice(&body);
        if h.is_last() {
            let (_, data) = self.partial.remove(&h.payload_id).unwrap();
            return Ok(Some((h.payload_id, h.class(), data)));
        }
        Ok(None)
    }

    pub fn pending(&self) -> usize {
        self.partial.len()
    }
}

/// Notifications from socket worker threads to the link owner.
#[derive(Debug, Clone, PartialEq, Eq)]
pub enum SocketEvent {
    /// A chunk handed to the sender has been written to the socket.
    Written { payload_id: u64, chunk_index: u32, is_last: bool },
    /// A complete payload arrived on the receiving side.
    Delivered { payload_id: u64, class: TrafficClass, data: Vec<u8> },
    /// The connection failed; `payload_id` is the payload being moved, if any.
    Failed { payload_id: Option<u64>, reason: String },
    /// Peer closed the connection cleanly.
    Closed,
}

struct Outgoing {
    header: FrameHeader,
    body: Vec<u8>,
}

/// Spawn a thread that reads frames from `stream` and reports whole payloads.
pub fn spawn_receiver<T, F>(stream: TcpStream, events: Sender<T>, wrap: F) -> io::Result<JoinHandle<()>>
where
    T: Send + 'static,
    F: Fn(SocketEvent) -> T + Send + 'static,
{
    std::thread::Builder::new()
        .name("link-recv".into())
        .spawn(move || {
            let mut reader = BufReader::with_capacity(1 << 16, stream);
            let mut assembly = Reassembler::default();
            loop {
                let event = match read_frame(&mut reader) {
                    Ok(Some((h, body))) => match assembly.push(h, body) {
                        Ok(Some((payload_id, class, data))) => SocketEvent::Delivered {
                            payload_id,
                            class,
                            data,
                        },
                        Ok(None) => continue,
                        Err(e) => SocketEvent::Failed {
                            payload_id: Some(h.payload_id),
                            reason: e.to_string(),
                        },
                    },
                    Ok(None) if assembly.pending() == 0 => SocketEvent::Closed,
                    Ok(None) => SocketEvent::Failed {
                        payload_id: assembly.partial.keys().next().copied(),
                        reason: "connection closed mid-payload".into(),
                    },
                    Err(e) => SocketEvent::Failed {
                        payload_id: assembly.partial.keys().next().copied(),
                        reason: e.to_string(),
                    },
                };
                let stop = !matches!(event, SocketEvent::Delivered { .. });
                if events.send(wrap(event)).is_err() || stop {
                    break;
                }
            }
        })
}

/// Owner-side handle of one outgoing TCP link.
///
/// Holds the transmit queues and the bytes of queued payloads; the writer
/// thread only ever sees the chunk it was handed.
pub struct SocketLink {
    queue: LinkQueue,
    data: BTreeMap<u64, Vec<u8>>,
    in_flight: Option<Chunk>,
    tx: Option<Sender<Outgoing>>,
    writer: Option<JoinHandle<()>>,
    stream: TcpStream,
}

impl SocketLink {
    /// Wrap a connected stream. Write completions and failures are reported
    /// through `events` after passing through `wrap`.
    pub fn new<T, F>(
        stream: TcpStream,
        chunk_size: ChunkSize,
        policy: LinkPolicy,
        events: Sender<T>,
        wrap: F,
    ) -> Result<Self, TransportError>
    where
        T: Send + 'static,
        F: Fn(SocketEvent) -> T + Send + 'static,
    {
        let queue = LinkQueue::new(chunk_size, policy)?;
        let write_half = stream
            .try_clone()
            .map_err(|e| TransportError::Framing(e.to_string()))?;
        let _ = stream.set_nodelay(true);
        let (tx, rx): (Sender<Outgoing>, Receiver<Outgoing>) = mpsc::channel();
        let writer = std::thread::Builder::new()
            .name("link-send".into())
            .spawn(move || {
                let mut w = BufWriter::with_capacity(1 << 16, write_half);
                for out in rx {
                    let res = write_frame(&mut w, &out.header, &out.body).and_then(|_| w.flush());
                    let event = match res {
                        Ok(()) => SocketEvent::Written {
                            payload_id: out.header.payload_id,
                            chunk_index: out.header.chunk_index,
                            is_last: out.header.is_last(),
                        },
                        Err(e) => SocketEvent::Failed {
                            payload_id: Some(out.header.payload_id),
                            reason: e.to_string(),
                        },
                    };
                    let failed = matches!(event, SocketEvent::Failed { .. });
                    if events.send(wrap(event)).is_err() || failed {
                        break;
                    }
                }
            })
            .map_err(|e| TransportError::Framing(e.to_string()))?;
        Ok(Self {
            queue,
            data: BTreeMap::new(),
            in_flight: None,
            tx: Some(tx),
            writer: Some(writer),
            stream,
        })
    }

    pub fn is_idle(&self) -> bool {
        self.in_flight.is_none() && self.queue.is_empty()
    }

    /// Queue a payload with its bytes (`data.len()` must equal `p.bytes`).
    pub fn enqueue(&mut self, p: Payload, data: Vec<u8>) -> Result<(), TransportError> {
        debug_assert_eq!(p.bytes, data.len() as u64);
        let id = p.id;
        self.queue.enqueue(p)?;
        self.data.insert(id, data);
        self.pump()
    }

    /// Call when the writer reports `Written`; hands over the next chunk.
    pub fn on_written(&mut self) -> Result<(), TransportError> {
        self.in_flight = None;
        self.pump()
    }

    fn pump(&mut self) -> Result<(), TransportError> {
        if self.in_flight.is_some() {
            return Ok(());
        }
        let Some(chunk) = self.queue.next_chunk() else {
            return Ok(());
        };
        let offset = match chunk.class {
            TrafficClass::Decode => 0,
            TrafficClass::Prefill => u64::from(chunk.index) * self.queue.chunk_size().limit(),
        } as usize;
        let body = {
            let data = &self.data[&chunk.payload_id];
            data[offset..offset + chunk.bytes as usize].to_vec()
        };
        if chunk.is_last {
            self.data.remove(&chunk.payload_id);
        }
        self.in_flight = Some(chunk);
        let tx = self.tx.as_ref().expect("link not shut down");
        tx.send(Outgoing {
            header: FrameHeader::for_chunk(&chunk),
            body,
        })
        .map_err(|_| TransportError::LinkFailed {
            payload_id: chunk.payload_id,
            reason: "writer thread exited".into(),
        })
    }

    /// Stop the writer after it drains and close the write side.
    pub fn shutdown(&mut self) {
        self.tx.take();
        if let Some(h) = self.writer.take() {
            let _ = h.join();
        }
        let _ = self.stream.shutdown(Shutdown::Write);
    }
}

impl Drop for SocketLink {
    fn drop(&mut self) {
        self.shutdown();
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use std::net::TcpListener;

    #[test]
    fn header_layout_is_little_endian() {
        let h = FrameHeader {
            payload_id: 0x0102_0304_0506_0708,
            chunk_index: 9,
            flags: FLAG_LAST | FLAG_DECODE,
        };
        let b = h.encode();
        assert_eq!(b[0], 0x08);
        assert_eq!(b[7], 0x01);
        assert_eq!(&b[8..12], &[9, 0, 0, 0]);
        assert_eq!(&b[12..16], &[3, 0, 0, 0]);
        assert_eq!(FrameHeader::decode(&b), h);
        assert!(h.is_last());
        assert_eq!(h.class(), TrafficClass::Decode);
    }

    #[test]
    fn frame_roundtrip_and_truncation() {
        let h = FrameHeader {
            payload_id: 5,
            chunk_index: 0,
            flags: FLAG_LAST,
        };
        let mut buf = Vec::new();
        write_frame(&mut buf, &h, b"hello").unwrap();
        assert_eq!(buf.len(), 4 + HEADER_LEN + 5);
        let mut r = &buf[..];
        let (got, body) = read_frame(&mut r).unwrap().unwrap();
        assert_eq!((got, body.as_slice()), (h, &b"hello"[..]));
        assert!(read_frame(&mut r).unwrap().is_none());

        let mut short = &buf[..buf.len() - 1];
        assert!(read_frame(&mut short).is_err());
    }

    #[test]
    fn reassembler_rejects_out_of_order() {
        let mut r = Reassembler::default();
        let h = |i, flags| FrameHeader {
            payload_id: 1,
            chunk_index: i,
            flags,
        };
        assert!(r.push(h(0, 0), vec![1]).unwrap().is_none());
        assert!(r.push(h(2, 0), vec![2]).is_err());
        let mut r = Reassembler::default();
        r.push(h(0, 0), vec![1, 2]).unwrap();
        let (id, class, data) = r.push(h(1, FLAG_LAST), vec![3]).unwrap().unwrap();
        assert_eq!((id, class, data), (1, TrafficClass::Prefill, vec![1, 2, 3]));
    }

    #[test]
    fn loopback_link_delivers_decode_between_chunks() {
        let listener = TcpListener::bind("127.0.0.1:0").unwrap();
        let addr = listener.local_addr().unwrap();
        let client = TcpStream::connect(addr).unwrap();
        let (server, _) = listener.accept().unwrap();

        let (tx, rx) = mpsc::channel::<SocketEvent>();
        let recv = spawn_receiver(server, tx.clone(), |e| e).unwrap();
        let mut link = SocketLink::new(client, ChunkSize::Bytes(1000), LinkPolicy::DecodePriority, tx, |e| e).unwrap();

        let prefill: Vec<u8> = (0..3500u32).map(|i| (i % 251) as u8).collect();
        let p = |id, class, bytes| Payload {
            id,
            class,
            bytes,
            micro_batch_id: id,
            enqueue_time: 0,
        };
        link.enqueue(p(1, TrafficClass::Prefill, 3500), prefill.clone()).unwrap();
        link.enqueue(p(2, TrafficClass::Decode, 16), vec![7; 16]).unwrap();

        let mut written = Vec::new();
        let mut delivered = Vec::new();
        while delivered.len() < 2 || written.len() < 5 {
            match rx.recv().unwrap() {
                SocketEvent::Written { payload_id, chunk_index, .. } => {
                    written.push((payload_id, chunk_index));
                    link.on_written().unwrap();
                }
                SocketEvent::Delivered { payload_id, data, .. } => delivered.push((payload_id, data)),
                other => panic!("unexpected {other:?}"),
            }
        }
        assert_eq!(written, [(1, 0), (2, 0), (1, 1), (1, 2), (1, 3)]);
        assert_eq!(delivered[0], (2, vec![7; 16]));
        assert_eq!(delivered[1], (1, prefill));
        assert!(link.is_idle());
        drop(link);
        assert_eq!(rx.recv().unwrap(), SocketEvent::Closed);
        recv.join().unwrap();
    }
}
