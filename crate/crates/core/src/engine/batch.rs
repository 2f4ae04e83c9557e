//! Continuous batching at the head stage.

use serde::{Deserialize, Serialize};

use crate::clock::Nanos;
use crate::profiler::Phase;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum BatchPhase {
    Prefill,
    Decode,
    Mixed,
}

impl BatchPhase {
    /// Profile table used to cost the micro-batch.
    pub fn compute_phase(self) -> Phase {
        match self {
            BatchPhase::Decode => Phase::Decode,
            BatchPhase::Prefill | BatchPhase::Mixed => Phase::Prefill,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct MicroBatch {
    pub id: u64,
    /// Decoding requests first, then admitted prefills, each in admission order.
    pub request_ids: Vec<u64>,
    /// How many leading entries of `request_ids` are decode steps.
    pub decode_count: usize,
    pub phase: BatchPhase,
    pub batched_tokens: u32,
    pub created_at: Nanos,
}

impl MicroBatch {
    pub fn decode_ids(&self) -> &[u64] {
        &self.request_ids[..self.decode_count]
    }

    pub fn prefill_ids(&self) -> &[u64] {
        &self.request_ids[self.decode_count..]
    }
}

/// Whether a micro-batch may combine prefill and decode work.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum BatchingMode {
    #[default]
    SeparatePhases,
    Mixed,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct BatchLimits {
    /// Micro-batches that may be formed now.
    pub bins: u32,
    pub token_budget: u32,
    pub max_batch_size: u32,
    pub mode: BatchingMode,
}

/// A queued prefill candidate: `(request id, input_len)`.
pub type Candidate = (u64, u32);

/// Outcome of one admission round.
#[derive(Debug, Clone, Default, PartialEq, Eq)]
pub struct Admission {
    pub micro_batches: Vec<MicroBatch>,
    /// Number of leading `decoding` entries taken.
    pub decodes_taken: usize,
    /// Number of leading `queued` entries taken.
    pub prefills_taken: usize,
}

#[derive(Default, Clone)]
struct Bin {
    decodes: Vec<u64>,
    prefills: Vec<u64>,
    tokens: u64,
}

impl Bin {
    fn len(&self) -> usize {
        self.decodes.len() + self.prefills.len()
    }

    fn is_empty(&self) -> bool {
        self.len() == 0
    }
}

fn lightest(bins: &[Bin], fits: impl Fn(&Bin) -> bool) -> Option<usize> {
    bins.iter()
        .enumerate()
        .filter(|(_, b)| fits(b))
        .min_by_key(|(i, b)| (b.tokens, *i))
        .map(|(i, _)| i)
}

/// Form up to `limits.bins` micro-batches.
///
/// Decoding requests go in first, one token each, spread lightest-first.
/// Queued prefills follow in arrival order into the lightest bin that still
/// has token and size room. A prefill larger than the budget is admitted alone
/// into an empty bin. Admission stops at the first prefill that does not fit.
///
/// In [`BatchingMode::SeparatePhases`] decodes use only as many bins as they
/// need and prefills get the rest; in [`BatchingMode::Mixed`] both phases
/// share all bins.
pub fn admit_and_batch(
    decoding: &[u64],
    queued: &[Candidate],
    limits: BatchLimits,
    first_id: u64,
    now: Nanos,
) -> Admission {
    let n = limits.bins as usize;
    if n == 0 || (decoding.is_empty() && queued.is_empty()) {
        return Admission::default();
    }
    let budget = u64::from(limits.token_budget.max(1));
    let size = limits.max_batch_size.max(1) as usize;
    let decode_cap = (size as u64).min(budget) as usize;

    let decode_bins = match limits.mode {
        BatchingMode::SeparatePhases => decoding.len().div_ceil(decode_cap).min(n),
        BatchingMode::Mixed => n,
    };
    let mut bins = vec![Bin::default(); n];
    let mut decodes_taken = 0;
    for &id in decoding {
        let Some(i) = lightest(&bins[..decode_bins], |b| b.len() < decode_cap) else {
            break;
        };
        bins[i].decodes.push(id);
        bins[i].tokens += 1;
        decodes_taken += 1;
    }

    let prefill_from = match limits.mode {
        BatchingMode::SeparatePhases => decode_bins,
        BatchingMode::Mixed => 0,
    };
    let mut prefills_taken = 0;
    for &(id, len) in queued {
        let len = u64::from(len);
        let pool = &bins[prefill_from..];
        let slot = lightest(pool, |b| b.tokens + len <= budget && b.len() < size)
            .or_else(|| (len > budget).then(|| lightest(pool, Bin::is_empty)).flatten());
        let Some(i) = slot else {
            break;
        };
        let b = &mut bins[prefill_from + i];
        b.prefills.push(id);
        b.tokens += len;
        prefills_taken += 1;
        if len > budget {
            // the oversize request occupies the bin alone
            b.tokens = u64::MAX / 2;
        }
    }

    let mut next_id = first_id;
    let micro_batches = bins
        .into_iter()
        .filter(|b| !b.is_empty())
        .map(|b| {
            let phase = match (b.decodes.is_empty(), b.prefills.is_empty()) {
                (false, true) => BatchPhase::Decode,
                (true, false) => BatchPhase::Prefill,
                _ => BatchPhase::Mixed,
            };
            let decode_count = b.decodes.len();
            let mut request_ids = b.decodes;
            request_ids.extend(b.prefills);
            let id = next_id;
            next_id += 1;
            MicroBatch {
                id,
                request_ids,
                decode_count,
                phase,
                batched_tokens: 0,
                created_at: now,
            }
        })
        .collect::<Vec<_>>();

    let mut admission = Admission {
        micro_batches,
        decodes_taken,
        prefills_taken,
    };
    let lens: std::collections::HashMap<u64, u32> = queued[..prefills_taken].iter().copied().collect();
    for mb in &mut admission.micro_batches {
        let prefill: u32 = mb.prefill_ids().iter().map(|id| lens[id]).sum();
        mb.batched_tokens = mb.decode_count as u32 + prefill;
    }
    admission
}

#[cfg(test)]
mod tests {
    use super::*;

    fn limits(bins: u32, budget: u32, size: u32) -> BatchLimits {
        BatchLimits {
            bins,
            token_budget: budget,
            max_batch_size: size,
            mode: BatchingMode::SeparatePhases,
        }
    }

    #[test]
    fn decodes_share_one_batch() {
        let a = admit_and_batch(&[1, 2, 3], &[], limits(1, 100, 16), 0, 0);
        assert_eq!(a.micro_batches.len(), 1);
        let mb = &a.micro_batches[0];
        assert_eq!((mb.phase, mb.batched_tokens, mb.request_ids.clone()), (BatchPhase::Decode, 3, vec![1, 2, 3]));
    }

    #[test]
    fn oversize_prefill_goes_alone() {
        let a = admit_and_batch(&[1, 2], &[(3, 90)], limits(2, 50, 16), 10, 0);
        assert_eq!(a.micro_batches.len(), 2);
        assert_eq!(a.micro_batches[0].request_ids, [1, 2]);
        assert_eq!(a.micro_batches[1].request_ids, [3]);
        assert_eq!(a.micro_batches[1].batched_tokens, 90);
        assert_eq!(a.micro_batches[1].phase, BatchPhase::Prefill);
        assert_eq!(a.micro_batches[1].id, 11);
    }

    #[test]
    fn empty_inputs_form_nothing() {
        assert!(admit_and_batch(&[], &[], limits(4, 10, 4), 0, 0).micro_batches.is_empty());
        assert!(admit_and_batch(&[1], &[], limits(0, 10, 4), 0, 0).micro_batches.is_empty());
    }

    #[test]
    fn prefills_spread_lightest_first() {
        let q: Vec<Candidate> = (0..12).map(|i| (i, 16)).collect();
        let a = admit_and_batch(&[], &q, limits(3, 64, 4), 0, 0);
        assert_eq!(a.prefills_taken, 12);
        let sizes: Vec<_> = a.micro_batches.iter().map(|m| m.request_ids.len()).collect();
        assert_eq!(sizes, [4, 4, 4]);
        assert_eq!(a.micro_batches[0].request_ids, [0, 3, 6, 9]);
    }

    #[test]
    fn fcfs_stops_at_first_misfit() {
        let q = [(1, 40), (2, 40), (3, 5)];
        let a = admit_and_batch(&[], &q, limits(1, 50, 8), 0, 0);
        assert_eq!(a.prefills_taken, 1);
        assert_eq!(a.micro_batches[0].request_ids, [1]);
    }

    #[test]
    fn mixed_mode_combines_phases() {
        let l = BatchLimits {
            mode: BatchingMode::Mixed,
            ..limits(1, 50, 8)
        };
        let a = admit_and_batch(&[7], &[(1, 20)], l, 0, 0);
        assert_eq!(a.micro_batches.len(), 1);
        assert_eq!(a.micro_batches[0].phase, BatchPhase::Mixed);
        assert_eq!(a.micro_batches[0].batched_tokens, 21);
    }

    #[test]
    fn decode_overflow_waits() {
        let a = admit_and_batch(&[1, 2, 3, 4, 5], &[], limits(2, 100, 2), 0, 0);
        assert_eq!(a.decodes_taken, 4);
    }
}
