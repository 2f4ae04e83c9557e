//! Request traces: generation, CSV ingest, filtering, and the per-request
//! lifecycle record the engine updates while a run progresses.

use std::io::{Read, Write};
use std::path::Path;

use rand::distr::weighted::WeightedIndex;
use rand::distr::Distribution;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::Exp;
use serde::{Deserialize, Serialize};
use thiserror::Error;

/// CSV header of the trace file format.
pub const TRACE_HEADER: [&str; 3] = ["arrival_s", "input_tokens", "output_tokens"];

#[derive(Debug, Error)]
pub enum TraceError {
    #[error("invalid workload configuration: {0}")]
    Config(String),
    #[error("trace line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("trace I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum RequestState {
    Queued,
    Prefill,
    Decoding,
    Finished,
}

/// One request of a trace as it appears on disk.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct RequestSeed {
    pub arrival_time: f64,
    pub input_len: u32,
    pub output_len: u32,
}

/// Lifecycle record of a single inference request.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Request {
    pub id: u64,
    pub arrival_time: f64,
    pub input_len: u32,
    pub output_len: u32,
    pub state: RequestState,
    pub tokens_emitted: u32,
    /// Start of the first compute step that touched this request.
    pub first_compute_time: Option<f64>,
    pub first_token_time: Option<f64>,
    pub finish_time: Option<f64>,
}

impl Request {
    pub fn new(id: u64, seed: RequestSeed) -> Self {
        Self {
            id,
            arrival_time: seed.arrival_time,
            input_len: seed.input_len,
            output_len: seed.output_len,
            state: RequestState::Queued,
            tokens_emitted: 0,
            first_compute_time: None,
            first_token_time: None,
            finish_time: None,
        }
    }

    pub fn is_finished(&self) -> bool {
        self.state == RequestState::Finished
    }

    /// Move into the prefill phase. Only valid from `Queued`.
    pub fn start_prefill(&mut self, now: f64) {
        debug_assert_eq!(self.state, RequestState::Queued);
        self.state = RequestState::Prefill;
        self.first_compute_time.get_or_insert(now);
    }

    /// Record one emitted token at `now`, advancing the lifecycle.
    pub fn emit_token(&mut self, now: f64) {
        debug_assert!(matches!(
            self.state,
            RequestState::Prefill | RequestState::Decoding
        ));
        debug_assert!(self.tokens_emitted < self.output_len);
        self.tokens_emitted += 1;
        if self.first_token_time.is_none() {
            self.first_token_time = Some(now);
        }
        if self.tokens_emitted == self.output_len {
            self.state = RequestState::Finished;
            self.finish_time = Some(now);
        } else {
            self.state = RequestState::Decoding;
        }
    }
}

/// A time-ordered sequence of request seeds.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize, Default)]
pub struct Trace {
    pub requests: Vec<RequestSeed>,
    /// Generator seed, when the trace was synthesized.
    pub seed: Option<u64>,
    /// Generator arrival rate in requests per second, when synthesized.
    pub rate: Option<f64>,
}

impl Trace {
    pub fn len(&self) -> usize {
        self.requests.len()
    }

    pub fn is_empty(&self) -> bool {
        self.requests.is_empty()
    }

    /// Materialize lifecycle records; ids follow trace order.
    pub fn to_requests(&self) -> Vec<Request> {
        self.requests
            .iter()
            .enumerate()
            .map(|(i, s)| Request::new(i as u64, *s))
            .collect()
    }
}

/// One histogram bucket: token counts in `[lo, hi]`, drawn uniformly once the
/// bucket is chosen with probability proportional to `weight`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Bucket {
    pub lo: u32,
    pub hi: u32,
    pub weight: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Histogram {
    pub buckets: Vec<Bucket>,
}

impl Histogram {
    pub fn new(buckets: Vec<Bucket>) -> Self {
        Self { buckets }
    }

    /// A histogram that always yields `value`.
    pub fn constant(value: u32) -> Self {
        Self::new(vec![Bucket {
            lo: value,
            hi: value,
            weight: 1.0,
        }])
    }

    fn validate(&self, what: &str) -> Result<(), TraceError> {
        if self.buckets.is_empty() {
            return Err(TraceError::Config(format!("{what} histogram is empty")));
        }
        let mut total = 0.0;
        for b in &self.buckets {
            if !(b.weight >= 0.0 && b.weight.is_finite()) {
                return Err(TraceError::Config(format!(
                    "{what} histogram has invalid weight {}",
                    b.weight
                )));
            }
            if b.lo == 0 || b.lo > b.hi {
                return Err(TraceError::Config(format!(
                    "{what} histogram bucket [{}, {}] is invalid",
                    b.lo, b.hi
                )));
            }
            total += b.weight;
        }
        if total <= 0.0 {
            return Err(TraceError::Config(format!(
                "{what} histogram has zero total mass"
            )));
        }
        Ok(())
    }

    fn sampler(&self) -> WeightedIndex<f64> {
        WeightedIndex::new(self.buckets.iter().map(|b| b.weight))
            .expect("histogram validated before sampling")
    }
}

/// Input and output length distributions used by [`generate_trace`].
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LengthDist {
    pub input: Histogram,
    pub output: Histogram,
}

impl LengthDist {
    /// SYNTHETIC conversation-style preset. Bucket shapes are hand-made to
    /// resemble a chat workload already clipped to input <= 256 and
    /// output <= 512 tokens; they are not fitted to any published trace.
    pub fn synthetic_conversation() -> Self {
        let b = |lo, hi, weight| Bucket { lo, hi, weight };
        Self {
            input: Histogram::new(vec![
                b(1, 32, 0.10),
                b(33, 64, 0.16),
                b(65, 128, 0.30),
                b(129, 192, 0.26),
                b(193, 256, 0.18),
            ]),
            output: Histogram::new(vec![
                b(1, 32, 0.08),
                b(33, 128, 0.22),
                b(129, 256, 0.34),
                b(257, 384, 0.24),
                b(385, 512, 0.12),
            ]),
        }
    }

    /// Look up a named preset.
    pub fn preset(name: &str) -> Option<Self> {
        match name {
            "synthetic-conversation" => Some(Self::synthetic_conversation()),
            _ => None,
        }
    }
}

/// Poisson arrivals at `rate` over `[0, duration)` with lengths drawn from
/// `dist`. Deterministic for a fixed seed.
pub fn generate_trace(
    rate: f64,
    duration: f64,
    dist: &LengthDist,
    seed: u64,
) -> Result<Trace, TraceError> {
    if !(rate > 0.0 && rate.is_finite()) {
        return Err(TraceError::Config(format!("rate must be positive, got {rate}")));
    }
    if !(duration >= 0.0 && duration.is_finite()) {
        return Err(TraceError::Config(format!(
            "duration must be non-negative, got {duration}"
        )));
    }
    dist.input.validate("input")?;
    dist.output.validate("output")?;

    // Separate streams so arrival times do not shift when length histograms change.
    let mut arrival_rng = ChaCha8Rng::seed_from_u64(seed);
    let mut length_rng = ChaCha8Rng::seed_from_u64(seed ^ 0x9e37_79b9_7f4a_7c15);
    let gaps = Exp::new(rate).map_err(|e| TraceError::Config(e.to_string()))?;
    let input_idx = dist.input.sampler();
    let output_idx = dist.output.sampler();

    let mut requests = Vec::new();
    let mut t = 0.0;
    loop {
        t += gaps.sample(&mut arrival_rng);
        if t >= duration {
            break;
        }
        let ib = dist.input.buckets[input_idx.sample(&mut length_rng)];
        let ob = dist.output.buckets[output_idx.sample(&mut length_rng)];
        requests.push(RequestSeed {
            arrival_time: t,
            input_len: length_rng.random_range(ib.lo..=ib.hi),
            output_len: length_rng.random_range(ob.lo..=ob.hi),
        });
    }
    Ok(Trace {
        requests,
        seed: Some(seed),
        rate: Some(rate),
    })
}

/// Keep requests with `input_len <= max_input` and `output_len <= max_output`.
pub fn filter_trace(t: &Trace, max_input: u32, max_output: u32) -> Trace {
    Trace {
        requests: t
            .requests
            .iter()
            .filter(|r| r.input_len <= max_input && r.output_len <= max_output)
            .copied()
            .collect(),
        seed: t.seed,
        rate: t.rate,
    }
}

pub fn load_trace(path: impl AsRef<Path>) -> Result<Trace, TraceError> {
    let file = std::fs::File::open(path.as_ref())?;
    read_trace(file)
}

pub fn read_trace(reader: impl Read) -> Result<Trace, TraceError> {
    let mut rdr = csv::ReaderBuilder::new()
        .has_headers(true)
        .trim(csv::Trim::All)
        .from_reader(reader);
    let headers = rdr.headers().map_err(|e| TraceError::Parse {
        line: 1,
        message: e.to_string(),
    })?;
    if headers.iter().ne(TRACE_HEADER.iter().copied()) {
        return Err(TraceError::Parse {
            line: 1,
            message: format!(
                "expected header `{}`, found `{}`",
                TRACE_HEADER.join(","),
                headers.iter().collect::<Vec<_>>().join(",")
            ),
        });
    }

    let mut requests = Vec::new();
    for record in rdr.records() {
        let record = record.map_err(|e| TraceError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let line = record.position().map_or(0, |p| p.line());
        if record.len() != 3 {
            return Err(TraceError::Parse {
                line,
                message: format!("expected 3 fields, found {}", record.len()),
            });
        }
        let field_err = |name: &str, raw: &str| TraceError::Parse {
            line,
            message: format!("field `{name}` is not valid: `{raw}`"),
        };
        let arrival_time: f64 = record[0]
            .parse()
            .map_err(|_| field_err("arrival_s", &record[0]))?;
        if !(arrival_time >= 0.0 && arrival_time.is_finite()) {
            return Err(field_err("arrival_s", &record[0]));
        }
        let input_len: u32 = record[1]
            .parse()
            .ok()
            .filter(|v| *v >= 1)
            .ok_or_else(|| field_err("input_tokens", &record[1]))?;
        let output_len: u32 = record[2]
            .parse()
            .ok()
            .filter(|v| *v >= 1)
            .ok_or_else(|| field_err("output_tokens", &record[2]))?;
        requests.push(RequestSeed {
            arrival_time,
            input_len,
            output_len,
        });
    }
    requests.sort_by(|a, b| a.arrival_time.total_cmp(&b.arrival_time));
    Ok(Trace {
        requests,
        seed: None,
        rate: None,
    })
}

pub fn save_trace(t: &Trace, path: impl AsRef<Path>) -> Result<(), TraceError> {
    let file = std::fs::File::create(path.as_ref())?;
    write_trace(t, file)
}

pub fn write_trace(t: &Trace, writer: impl Write) -> Result<(), TraceError> {
    let mut w = csv::Writer::from_writer(writer);
    let to_io = |e: csv::Error| TraceError::Io(std::io::Error::other(e));
    w.write_record(TRACE_HEADER).map_err(to_io)?;
    for r in &t.requests {
        // `{}` on f64 is the shortest representation that parses back exactly.
        w.write_record(&[
            r.arrival_time.to_string(),
            r.input_len.to_string(),
            r.output_len.to_string(),
        ])
        .map_err(to_io)?;
    }
    w.flush()?;
    Ok(())
}
