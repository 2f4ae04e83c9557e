//! Micro-batch count selection.
//!
//! At every iteration boundary the head asks how many micro-batches to keep
//! in flight. Too few leave stages idle while activations travel between
//! nodes; the search below adds micro-batches until the predicted idle
//! fraction of the bottleneck stage is small or more of them stop paying off.

use std::io::Write;

use serde::{Deserialize, Serialize};
use thiserror::Error;

use crate::clock::{secs_to_nanos, Nanos};
use crate::profiler::{compute_time, LinkProfile, Phase, ProfileError, StageProfile};

/// Bytes returned to the head per request after the last stage (one token id).
pub const RETURN_BYTES_PER_REQUEST: u64 = 8;

#[derive(Debug, Error)]
pub enum ControllerError {
    #[error("controller configuration: {0}")]
    Config(String),
    #[error(transparent)]
    Profile(#[from] ProfileError),
}

/// How the admission budget relates to the micro-batch count.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BudgetMode {
    /// `min(queued, max_batched_tokens)` is split across the micro-batches.
    #[default]
    TokenScaled,
    /// Each micro-batch may carry up to `max_batched_tokens` on its own.
    FixedPerMicroBatch,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct ControllerConfig {
    pub max_batched_tokens: u32,
    pub max_batch_size: u32,
    /// Upper bound on micro-batches; `None` means twice the stage count.
    pub n_max: Option<u32>,
    pub bubble_epsilon: f64,
    pub gain_delta: f64,
    pub budget_mode: BudgetMode,
}

impl Default for ControllerConfig {
    fn default() -> Self {
        Self {
            max_batched_tokens: 2048,
            max_batch_size: 256,
            n_max: None,
            bubble_epsilon: 0.02,
            gain_delta: 0.01,
            budget_mode: BudgetMode::TokenScaled,
        }
    }
}

impl ControllerConfig {
    pub fn validate(&self) -> Result<(), ControllerError> {
        let bad = |m: &str| Err(ControllerError::Config(m.into()));
        if self.max_batched_tokens == 0 {
            return bad("max_batched_tokens must be >= 1");
        }
        if self.max_batch_size == 0 {
            return bad("max_batch_size must be >= 1");
        }
        if self.n_max == Some(0) {
            return bad("n_max must be >= 1");
        }
        if !(0.0..1.0).contains(&self.bubble_epsilon) {
            return bad("bubble_epsilon must lie in [0, 1)");
        }
        if !(self.gain_delta >= 0.0 && self.gain_delta.is_finite()) {
            return bad("gain_delta must be a finite non-negative number");
        }
        Ok(())
    }

    /// Effective cap for a pipeline with `stages` stages.
    pub fn n_max_for(&self, stages: usize) -> u32 {
        self.n_max.unwrap_or((2 * stages.max(1)) as u32)
    }

    /// Per-micro-batch token budget for `n` micro-batches.
    pub fn budget(&self, queued_tokens: u64, n: u32) -> u32 {
        let total = queued_tokens.min(u64::from(self.max_batched_tokens)).max(1);
        match self.budget_mode {
            BudgetMode::TokenScaled => total.div_ceil(u64::from(n.max(1))) as u32,
            BudgetMode::FixedPerMicroBatch => total as u32,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ControllerDecision {
    pub n_microbatches: u32,
    pub token_budget_per_microbatch: u32,
    pub predicted_bubble_fraction: f64,
}

/// Per-stage compute time and per-hop transfer time of one micro-batch, in
/// whole nanoseconds as the engine schedules them. `transfers` has one entry
/// per hop including the return to the head, or is empty for a single stage.
#[derive(Debug, Clone, PartialEq, Eq)]
pub struct PipelineTimings {
    pub compute: Vec<Nanos>,
    pub transfers: Vec<Nanos>,
}

impl PipelineTimings {
    pub fn bottleneck(&self) -> Nanos {
        self.compute.iter().copied().max().unwrap_or(0)
    }

    /// `max(sum(c) + sum(t), n * c_bottleneck)`.
    pub fn round_time(&self, n: u32) -> Nanos {
        let cycle: Nanos = self.compute.iter().sum::<Nanos>() + self.transfers.iter().sum::<Nanos>();
        cycle.max(u64::from(n) * self.bottleneck())
    }

    /// Idle fraction of the bottleneck stage over one steady round.
    pub fn bubble(&self, n: u32) -> f64 {
        let round = self.round_time(n);
        if round == 0 {
            return 0.0;
        }
        let busy = u64::from(n) * self.bottleneck();
        ((round - busy) as f64 / round as f64).clamp(0.0, 1.0)
    }
}

/// Build [`PipelineTimings`] for a micro-batch of `tokens` tokens.
///
/// Forward hops carry `tokens * bytes_per_token`; the return hop carries one
/// token id per request, which is one request per token in decode.
pub fn pipeline_timings(
    profiles: &[StageProfile],
    links: &[LinkProfile],
    tokens: u32,
    phase: Phase,
    bytes_per_token: u64,
) -> Result<PipelineTimings, ControllerError> {
    if profiles.is_empty() {
        return Err(ControllerError::Config("no stage profiles".into()));
    }
    let s = profiles.len();
    if s > 1 && links.len() != s {
        return Err(ControllerError::Config(format!(
            "{s} stages need {s} links (including the return link), got {}",
            links.len()
        )));
    }
    let compute = profiles
        .iter()
        .map(|p| compute_time(p, phase, tokens).map(|c| secs_to_nanos(c).max(1)))
        .collect::<Result<Vec<_>, _>>()?;
    let transfers = if s == 1 {
        Vec::new()
    } else {
        let requests = match phase {
            Phase::Decode => u64::from(tokens),
            Phase::Prefill => 1,
        };
        let forward = u64::from(tokens) * bytes_per_token;
        links
            .iter()
            .enumerate()
            .map(|(i, l)| {
                let bytes = if i + 1 == s {
                    requests * RETURN_BYTES_PER_REQUEST
                } else {
                    forward
                };
                secs_to_nanos(l.latency_s) + secs_to_nanos(l.serialization_time(bytes))
            })
            .collect()
    };
    Ok(PipelineTimings { compute, transfers })
}

/// Predicted idle fraction of the bottleneck stage with `n` micro-batches.
pub fn predict_bubble(
    n: u32,
    profiles: &[StageProfile],
    links: &[LinkProfile],
    tokens_per_microbatch: u32,
    phase: Phase,
    bytes_per_token: u64,
) -> Result<f64, ControllerError> {
    if n == 0 {
        return Err(ControllerError::Config("n must be >= 1".into()));
    }
    Ok(pipeline_timings(profiles, links, tokens_per_microbatch.max(1), phase, bytes_per_token)?.bubble(n))
}

/// Incremental search from one micro-batch upward.
///
/// Stops at the first `n` whose bubble is within `bubble_epsilon`, whose
/// successor would improve throughput by less than `gain_delta`, or that hits
/// the cap.
pub fn choose_n(
    cfg: &ControllerConfig,
    profiles: &[StageProfile],
    links: &[LinkProfile],
    queued_tokens: u64,
    phase: Phase,
    bytes_per_token: u64,
) -> Result<ControllerDecision, ControllerError> {
    cfg.validate()?;
    let n_max = cfg.n_max_for(profiles.len());
    let eval = |n: u32| -> Result<(u32, f64, f64), ControllerError> {
        let budget = cfg.budget(queued_tokens, n);
        let t = pipeline_timings(profiles, links, budget, phase, bytes_per_token)?;
        let round = t.round_time(n);
        let throughput = f64::from(n) * f64::from(budget) / round as f64;
        Ok((budget, t.bubble(n), throughput))
    };

    let mut n = 1;
    let (mut budget, mut bubble, mut thr) = eval(n)?;
    while n < n_max && bubble > cfg.bubble_epsilon {
        let (b2, bub2, thr2) = eval(n + 1)?;
        if (thr2 - thr) / thr < cfg.gain_delta {
            break;
        }
        n += 1;
        (budget, bubble, thr) = (b2, bub2, thr2);
    }
    Ok(ControllerDecision {
        n_microbatches: n,
        token_budget_per_microbatch: budget,
        predicted_bubble_fraction: bubble,
    })
}

/// One row of the decision log.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct DecisionRecord {
    pub iteration: u64,
    pub n: u32,
    pub token_budget: u32,
    pub predicted_bubble: f64,
}

/// CSV `iteration,n,token_budget,predicted_bubble`.
pub fn write_decisions_csv(records: &[DecisionRecord], mut w: impl Write) -> std::io::Result<()> {
    writeln!(w, "iteration,n,token_budget,predicted_bubble")?;
    for r in records {
        writeln!(w, "{},{},{},{:.6}", r.iteration, r.n, r.token_budget, r.predicted_bubble)?;
    }
    Ok(())
}
