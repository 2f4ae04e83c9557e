//! Run configuration: a JSON file whose paths resolve relative to itself.

use std::path::{Path, PathBuf};

use pipeserve_core::cluster::{plan_deployment, ClusterSpec, ModelSpec, PartitionPlan};
use pipeserve_core::controller::ControllerConfig;
use pipeserve_core::engine::{BatchingMode, EngineConfig, NPolicy};
use pipeserve_core::profiler::{load_profiles, synth_profile, LinkProfile, StageProfile};
use pipeserve_core::transport::{ChunkSize, LinkPolicy};
use pipeserve_core::workload::{filter_trace, generate_trace, load_trace, LengthDist, Trace};
use serde::{Deserialize, Serialize};

use crate::error::CliError;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(untagged)]
pub enum ModelChoice {
    Preset(String),
    Custom(ModelSpec),
}

impl ModelChoice {
    pub fn resolve(&self) -> Result<ModelSpec, CliError> {
        match self {
            ModelChoice::Preset(name) => ModelSpec::preset(name).ok_or_else(|| {
                CliError::Usage(format!(
                    "unknown model `{name}` (known: {})",
                    ModelSpec::preset_names().join(", ")
                ))
            }),
            ModelChoice::Custom(m) => Ok(m.clone()),
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Resources {
    pub gpu_type: String,
    #[serde(default = "one")]
    pub gpu_count: u32,
}

fn one() -> u32 {
    1
}

/// Stage costs derived from layer counts: `layers * per_layer_token_s *
/// tokens / weight + overhead_s`, where `weight` is the node's capacity
/// score times its GPU count.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct SyntheticProfile {
    pub per_layer_token_s: f64,
    pub overhead_s: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct GenerateSpec {
    /// Mean arrivals per second.
    pub rate: f64,
    pub duration_s: f64,
    #[serde(default = "default_dist")]
    pub distribution: String,
    #[serde(default)]
    pub max_input: Option<u32>,
    #[serde(default)]
    pub max_output: Option<u32>,
}

fn default_dist() -> String {
    "synthetic-conversation".into()
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct Workload {
    #[serde(default)]
    pub trace: Option<PathBuf>,
    #[serde(default)]
    pub generate: Option<GenerateSpec>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct EngineParams {
    pub n_policy: NPolicy,
    pub chunk_size: ChunkSize,
    pub scheduling_policy: LinkPolicy,
    pub batching: BatchingMode,
    pub controller_stride: u32,
}

impl Default for EngineParams {
    fn default() -> Self {
        Self {
            n_policy: NPolicy::Dynamic,
            chunk_size: ChunkSize::default(),
            scheduling_policy: LinkPolicy::default(),
            batching: BatchingMode::default(),
            controller_stride: 1,
        }
    }
}

/// Replaces the latency or bandwidth of every cluster link.
#[derive(Debug, Clone, Default, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct NetworkOverride {
    pub latency_s: Option<f64>,
    /// Bytes per second.
    pub bandwidth_bps: Option<f64>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    pub cluster: PathBuf,
    pub model: ModelChoice,
    pub resources: Resources,
    #[serde(default)]
    pub profiles: Option<PathBuf>,
    #[serde(default)]
    pub synthetic_profile: Option<SyntheticProfile>,
    pub workload: Workload,
    #[serde(default)]
    pub engine: EngineParams,
    #[serde(default)]
    pub controller: ControllerConfig,
    #[serde(default)]
    pub network: NetworkOverride,
    #[serde(default)]
    pub seed: u64,
    #[serde(default)]
    pub out: Option<PathBuf>,
}

/// Everything a simulation needs, loaded and checked.
#[derive(Debug, Clone)]
pub struct Prepared {
    pub engine: EngineConfig,
    pub cluster: ClusterSpec,
    pub trace: Trace,
}

impl RunConfig {
    /// Read `path` and make every relative path in it relative to the file.
    pub fn load(path: &Path) -> Result<Self, CliError> {
        let text = std::fs::read_to_string(path)
            .map_err(|e| CliError::Usage(format!("config not found: {}: {e}", path.display())))?;
        let mut cfg: RunConfig = serde_json::from_str(&text)
            .map_err(|e| CliError::Usage(format!("config {}: {e}", path.display())))?;
        let base = path.parent().unwrap_or(Path::new("."));
        let fix = |p: &mut PathBuf| {
            if p.is_relative() {
                *p = base.join(&*p);
            }
        };
        fix(&mut cfg.cluster);
        if let Some(p) = cfg.profiles.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.workload.trace.as_mut() {
            fix(p);
        }
        if let Some(p) = cfg.out.as_mut() {
            fix(p);
        }
        Ok(cfg)
    }

    pub fn validate(&self) -> Result<(), CliError> {
        match (&self.workload.trace, &self.workload.generate) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => return Err(CliError::Usage("workload needs exactly one of `trace` or `generate`".into())),
        }
        match (&self.profiles, &self.synthetic_profile) {
            (Some(_), None) | (None, Some(_)) => {}
            _ => {
                return Err(CliError::Usage(
                    "config needs exactly one of `profiles` or `synthetic_profile`".into(),
                ))
            }
        }
        if let Some(l) = self.network.latency_s {
            if !(l >= 0.0 && l.is_finite()) {
                return Err(CliError::Usage(format!("network.latency_s must be >= 0, got {l}")));
            }
        }
        if let Some(b) = self.network.bandwidth_bps {
            if b.is_nan() || b <= 0.0 {
                return Err(CliError::Usage(format!("network.bandwidth_bps must be > 0, got {b}")));
            }
        }
        self.controller
            .validate()
            .map_err(|e| CliError::Usage(e.to_string()))
    }

    pub fn load_cluster(&self) -> Result<ClusterSpec, CliError> {
        if !self.cluster.exists() {
            return Err(CliError::Usage(format!("cluster not found: {}", self.cluster.display())));
        }
        let mut c = ClusterSpec::load(&self.cluster).map_err(|e| CliError::Usage(e.to_string()))?;
        for l in &mut c.links {
            apply_override(l, &self.network);
        }
        Ok(c)
    }

    pub fn load_trace(&self) -> Result<Trace, CliError> {
        if let Some(path) = &self.workload.trace {
            if !path.exists() {
                return Err(CliError::Usage(format!("trace not found: {}", path.display())));
            }
            return load_trace(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())));
        }
        let g = self.workload.generate.as_ref().expect("validated");
        let dist = LengthDist::preset(&g.distribution)
            .ok_or_else(|| CliError::Usage(format!("unknown length distribution `{}`", g.distribution)))?;
        let t = generate_trace(g.rate, g.duration_s, &dist, self.seed).map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(match (g.max_input, g.max_output) {
            (None, None) => t,
            (i, o) => filter_trace(&t, i.unwrap_or(u32::MAX), o.unwrap_or(u32::MAX)),
        })
    }

    pub fn plan(&self, cluster: &ClusterSpec) -> Result<(ModelSpec, PartitionPlan), CliError> {
        let model = self.model.resolve()?;
        let plan = plan_deployment(cluster, &model, &self.resources.gpu_type, self.resources.gpu_count)
            .map_err(|e| CliError::Runtime(format!("placement failed: {e}")))?;
        Ok((model, plan))
    }

    fn stage_profiles(&self, cluster: &ClusterSpec, plan: &PartitionPlan) -> Result<Vec<StageProfile>, CliError> {
        let counts = plan.layer_counts();
        if let Some(path) = &self.profiles {
            if !path.exists() {
                return Err(CliError::Usage(format!("profiles not found: {}", path.display())));
            }
            let mut p = load_profiles(path).map_err(|e| CliError::Usage(format!("{}: {e}", path.display())))?;
            if p.len() != counts.len() {
                return Err(CliError::Usage(format!(
                    "{} has {} stage profiles but the plan has {} stages",
                    path.display(),
                    p.len(),
                    counts.len()
                )));
            }
            for (prof, &c) in p.iter_mut().zip(&counts) {
                prof.layers = c;
            }
            return Ok(p);
        }
        let s = self.synthetic_profile.as_ref().expect("validated");
        plan.stages
            .iter()
            .zip(&counts)
            .enumerate()
            .map(|(i, (st, &c))| {
                let weight = cluster.node(&st.node).map_or(1.0, |n| n.partition_weight());
                synth_profile(i as u32, c, s.per_layer_token_s / weight, s.overhead_s)
                    .map_err(|e| CliError::Usage(e.to_string()))
            })
            .collect()
    }

    pub fn prepare(&self) -> Result<Prepared, CliError> {
        self.validate()?;
        let cluster = self.load_cluster()?;
        let trace = self.load_trace()?;
        if trace.is_empty() {
            return Err(CliError::Usage("workload produced no requests".into()));
        }
        let (model, plan) = self.plan(&cluster)?;
        let profiles = self.stage_profiles(&cluster, &plan)?;
        let mut engine = EngineConfig::new(plan, model, profiles);
        engine.controller = self.controller.clone();
        engine.chunk_size = self.engine.chunk_size;
        engine.scheduling_policy = self.engine.scheduling_policy;
        engine.n_policy = self.engine.n_policy;
        engine.batching = self.engine.batching;
        engine.controller_stride = self.engine.controller_stride;
        engine.seed = self.seed;
        engine.validate().map_err(|e| CliError::Usage(e.to_string()))?;
        Ok(Prepared { engine, cluster, trace })
    }
}

fn apply_override(l: &mut LinkProfile, n: &NetworkOverride) {
    if let Some(lat) = n.latency_s {
        l.latency_s = lat;
    }
    if let Some(bw) = n.bandwidth_bps {
        l.bandwidth_bps = bw;
    }
}
