use std::io::Write;

use serde::{Deserialize, Serialize};

use crate::clock::{format_secs, Nanos};
use crate::metrics::MetricsError;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum LogKind {
    Arrival,
    ComputeStart,
    ComputeDone,
    ChunkSent,
    PayloadDelivered,
    IterationBoundary,
}

impl LogKind {
    pub fn as_str(self) -> &'static str {
        match self {
            LogKind::Arrival => "arrival",
            LogKind::ComputeStart => "compute_start",
            LogKind::ComputeDone => "compute_done",
            LogKind::ChunkSent => "chunk_sent",
            LogKind::PayloadDelivered => "payload_delivered",
            LogKind::IterationBoundary => "iteration_boundary",
        }
    }
}

/// One processed event.
///
/// `subject` is the request id for arrivals, the micro-batch id for compute
/// and delivery records, the payload id for chunk records and the iteration
/// number for boundaries.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub struct LogRecord {
    pub time: Nanos,
    pub kind: LogKind,
    pub subject: u64,
    pub stage: Option<u32>,
}

#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct EventLog {
    pub records: Vec<LogRecord>,
}

impl EventLog {
    pub fn push(&mut self, time: Nanos, kind: LogKind, subject: u64, stage: Option<u32>) {
        self.records.push(LogRecord {
            time,
            kind,
            subject,
            stage,
        });
    }

    /// Closed compute intervals `[start, end)` of `stage`, in order.
    pub fn busy_intervals(&self, stage: u32) -> Vec<(Nanos, Nanos)> {
        let mut out = Vec::new();
        let mut open: Option<Nanos> = None;
        for r in self.records.iter().filter(|r| r.stage == Some(stage)) {
            match r.kind {
                LogKind::ComputeStart => open = Some(r.time),
                LogKind::ComputeDone => {
                    if let Some(s) = open.take() {
                        out.push((s, r.time));
                    }
                }
                _ => {}
            }
        }
        out
    }

    /// CSV `time_s,kind,subject,stage` in processing order.
    pub fn write_csv(&self, mut w: impl Write) -> std::io::Result<()> {
        writeln!(w, "time_s,kind,subject,stage")?;
        for r in &self.records {
            let stage = r.stage.map(|s| s.to_string()).unwrap_or_default();
            writeln!(w, "{},{},{},{}", format_secs(r.time), r.kind.as_str(), r.subject, stage)?;
        }
        Ok(())
    }
}

/// Idle fraction of `stage` within `[t0, t1]`.
pub fn measure_bubble(log: &EventLog, stage: u32, t0: Nanos, t1: Nanos) -> Result<f64, MetricsError> {
    if t1 <= t0 {
        return Err(MetricsError::EmptyWindow { t0, t1 });
    }
    let busy: Nanos = log
        .busy_intervals(stage)
        .into_iter()
        .map(|(s, e)| e.min(t1).saturating_sub(s.max(t0)))
        .sum();
    Ok((t1 - t0 - busy) as f64 / (t1 - t0) as f64)
}
