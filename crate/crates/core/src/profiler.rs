//! Compute-latency tables per pipeline stage and link-condition estimates.

use std::collections::BTreeMap;
use std::io::Read;
use std::path::Path;

use serde::{Deserialize, Serialize};
use thiserror::Error;

/// Interpolated compute times never drop below one nanosecond.
const MIN_COMPUTE_S: f64 = 1e-9;

/// Token counts at which [`synth_profile`] tabulates each phase.
pub const SYNTH_POINTS: [u32; 4] = [1, 64, 256, 1024];

#[derive(Debug, Error)]
pub enum ProfileError {
    #[error("profile for stage {stage} has no usable `{phase}` table")]
    MissingPhase { stage: u32, phase: Phase },
    #[error("invalid profile: {0}")]
    Invalid(String),
    #[error("profile line {line}: {message}")]
    Parse { line: u64, message: String },
    #[error("profile I/O: {0}")]
    Io(#[from] std::io::Error),
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, PartialOrd, Ord, Hash, Serialize, Deserialize)]
#[serde(rename_all = "lowercase")]
pub enum Phase {
    Prefill,
    Decode,
}

impl std::fmt::Display for Phase {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.write_str(match self {
            Phase::Prefill => "prefill",
            Phase::Decode => "decode",
        })
    }
}

impl std::str::FromStr for Phase {
    type Err = String;
    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.to_ascii_lowercase().as_str() {
            "prefill" => Ok(Phase::Prefill),
            "decode" => Ok(Phase::Decode),
            other => Err(format!("unknown phase `{other}`")),
        }
    }
}

/// Compute latency of one pipeline stage as a function of batched tokens.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct StageProfile {
    pub stage_id: u32,
    /// Model layers hosted by the stage.
    pub layers: u32,
    pub entries: BTreeMap<Phase, BTreeMap<u32, f64>>,
}

impl StageProfile {
    /// Build a profile and check its invariants.
    pub fn new(
        stage_id: u32,
        layers: u32,
        entries: BTreeMap<Phase, BTreeMap<u32, f64>>,
    ) -> Result<Self, ProfileError> {
        let p = Self {
            stage_id,
            layers,
            entries,
        };
        p.validate()?;
        Ok(p)
    }

    /// A profile whose compute time is `seconds` regardless of phase or size.
    pub fn flat(stage_id: u32, layers: u32, seconds: f64) -> Result<Self, ProfileError> {
        let table: BTreeMap<u32, f64> = [(1, seconds), (1 << 20, seconds)].into();
        Self::new(
            stage_id,
            layers,
            [(Phase::Prefill, table.clone()), (Phase::Decode, table)].into(),
        )
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        for (phase, table) in &self.entries {
            if table.len() < 2 {
                return Err(ProfileError::Invalid(format!(
                    "stage {} phase {phase}: need at least 2 points, have {}",
                    self.stage_id,
                    table.len()
                )));
            }
            let mut prev = 0.0;
            for (&tokens, &secs) in table {
                if tokens == 0 || !(secs > 0.0 && secs.is_finite()) {
                    return Err(ProfileError::Invalid(format!(
                        "stage {} phase {phase}: bad point {tokens} -> {secs}",
                        self.stage_id
                    )));
                }
                if secs < prev {
                    return Err(ProfileError::Invalid(format!(
                        "stage {} phase {phase}: table decreases at {tokens} tokens",
                        self.stage_id
                    )));
                }
                prev = secs;
            }
        }
        Ok(())
    }
}

/// Interpolated compute seconds for `batched_tokens` in `phase`.
///
/// Piecewise-linear between bracketing points; outside the table the two
/// nearest points are extended linearly.
pub fn compute_time(
    p: &StageProfile,
    phase: Phase,
    batched_tokens: u32,
) -> Result<f64, ProfileError> {
    let table = p
        .entries
        .get(&phase)
        .filter(|t| t.len() >= 2)
        .ok_or(ProfileError::MissingPhase {
            stage: p.stage_id,
            phase,
        })?;
    let x = batched_tokens.max(1);
    if let Some(&v) = table.get(&x) {
        return Ok(v);
    }
    let below = table.range(..x).next_back();
    let above = table.range(x..).next();
    let ((x0, y0), (x1, y1)) = match (below, above) {
        (Some(lo), Some(hi)) => (lo, hi),
        (None, Some(_)) => {
            let mut it = table.iter();
            (it.next().unwrap(), it.next().unwrap())
        }
        (Some(_), None) => {
            let mut it = table.iter().rev();
            let hi = it.next().unwrap();
            (it.next().unwrap(), hi)
        }
        (None, None) => unreachable!("table has at least two points"),
    };
    let slope = (y1 - y0) / f64::from(x1 - x0);
    let y = y0 + slope * (f64::from(x) - f64::from(*x0));
    Ok(y.max(MIN_COMPUTE_S))
}

/// Measured or assumed condition of one directed link.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct LinkProfile {
    pub from: String,
    pub to: String,
    /// One-way latency in seconds.
    pub latency_s: f64,
    /// Bytes per second.
    pub bandwidth_bps: f64,
}

impl LinkProfile {
    pub fn new(from: impl Into<String>, to: impl Into<String>, latency_s: f64, bandwidth_bps: f64) -> Self {
        Self {
            from: from.into(),
            to: to.into(),
            latency_s,
            bandwidth_bps,
        }
    }

    pub fn validate(&self) -> Result<(), ProfileError> {
        if !(self.latency_s >= 0.0 && self.latency_s.is_finite()) {
            return Err(ProfileError::Invalid(format!(
                "link {}->{}: latency {} must be >= 0",
                self.from, self.to, self.latency_s
            )));
        }
        if self.bandwidth_bps.is_nan() || self.bandwidth_bps <= 0.0 {
            return Err(ProfileError::Invalid(format!(
                "link {}->{}: bandwidth {} must be > 0",
                self.from, self.to, self.bandwidth_bps
            )));
        }
        Ok(())
    }

    /// Seconds the link is occupied serializing `bytes`.
    pub fn serialization_time(&self, bytes: u64) -> f64 {
        bytes as f64 / self.bandwidth_bps
    }
}

/// `latency_s + bytes / bandwidth_bps`.
pub fn transfer_time(l: &LinkProfile, bytes: u64) -> f64 {
    l.latency_s + l.serialization_time(bytes)
}

/// Synthesize a profile: `layers * per_layer_token_cost * tokens + overhead`
/// at each of [`SYNTH_POINTS`], identical for both phases.
pub fn synth_profile(
    stage_id: u32,
    layers: u32,
    per_layer_token_cost: f64,
    overhead: f64,
) -> Result<StageProfile, ProfileError> {
    if layers == 0 {
        return Err(ProfileError::Invalid("layers must be >= 1".into()));
    }
    if per_layer_token_cost.is_nan() || per_layer_token_cost <= 0.0 || overhead.is_nan() || overhead <= 0.0 {
        return Err(ProfileError::Invalid(format!(
            "costs must be positive (per-layer {per_layer_token_cost}, overhead {overhead})"
        )));
    }
    let table: BTreeMap<u32, f64> = SYNTH_POINTS
        .iter()
        .map(|&t| (t, f64::from(layers) * per_layer_token_cost * f64::from(t) + overhead))
        .collect();
    StageProfile::new(
        stage_id,
        layers,
        [(Phase::Prefill, table.clone()), (Phase::Decode, table)].into(),
    )
}

#[derive(Debug, Deserialize)]
struct ProfileRow {
    stage_id: u32,
    phase: Phase,
    batched_tokens: u32,
    seconds: f64,
}

/// Read `stage_id,phase,batched_tokens,seconds` rows into per-stage profiles,
/// ordered by stage id. `layers` is left at 0 for the caller to fill in.
pub fn read_profiles(reader: impl Read) -> Result<Vec<StageProfile>, ProfileError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut stages: BTreeMap<u32, BTreeMap<Phase, BTreeMap<u32, f64>>> = BTreeMap::new();
    for row in rdr.deserialize::<ProfileRow>() {
        let row = row.map_err(|e| ProfileError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        stages
            .entry(row.stage_id)
            .or_default()
            .entry(row.phase)
            .or_default()
            .insert(row.batched_tokens, row.seconds);
    }
    stages
        .into_iter()
        .map(|(id, entries)| StageProfile::new(id, 0, entries))
        .collect()
}

pub fn load_profiles(path: impl AsRef<Path>) -> Result<Vec<StageProfile>, ProfileError> {
    read_profiles(std::fs::File::open(path)?)
}

#[derive(Debug, Deserialize)]
struct LinkRow {
    from: String,
    to: String,
    latency_s: f64,
    bandwidth_bps: f64,
}

/// Read `from,to,latency_s,bandwidth_bps` rows (bandwidth in bytes/s).
pub fn read_links(reader: impl Read) -> Result<Vec<LinkProfile>, ProfileError> {
    let mut rdr = csv::ReaderBuilder::new()
        .trim(csv::Trim::All)
        .from_reader(reader);
    let mut out = Vec::new();
    for row in rdr.deserialize::<LinkRow>() {
        let row = row.map_err(|e| ProfileError::Parse {
            line: e.position().map_or(0, |p| p.line()),
            message: e.to_string(),
        })?;
        let link = LinkProfile::new(row.from, row.to, row.latency_s, row.bandwidth_bps);
        link.validate()?;
        out.push(link);
    }
    Ok(out)
}

pub fn load_links(path: impl AsRef<Path>) -> Result<Vec<LinkProfile>, ProfileError> {
    read_links(std::fs::File::open(path)?)
}
