use std::fs::File;
use std::io::{BufWriter, Write};
use std::net::SocketAddr;
use std::path::{Path, PathBuf};
use std::str::FromStr;

use pipeserve_control::{api, spawn, Journal, KeySource, Registry};
use pipeserve_core::cluster::{plan_deployment, ClusterSpec, ModelSpec, PartitionPlan};
use pipeserve_core::controller::write_decisions_csv;
use pipeserve_core::engine::live::{run_live, LiveOptions};
use pipeserve_core::engine::{run, NPolicy, RunOutput};
use pipeserve_core::metrics::MetricsReport;
use pipeserve_core::transport::ChunkSize;
use serde::Serialize;

use crate::config::RunConfig;
use crate::error::{io_err, CliError};
use crate::units::{parse_bandwidth, parse_latency};

pub const DEFAULT_OUT: &str = "pipeserve-out";

/// Where a command writes, after flag and config precedence.
fn out_dir(flag: Option<&Path>, cfg: &RunConfig) -> PathBuf {
    flag.map(Path::to_path_buf)
        .or_else(|| cfg.out.clone())
        .unwrap_or_else(|| PathBuf::from(DEFAULT_OUT))
}

fn create(path: &Path) -> Result<BufWriter<File>, CliError> {
    File::create(path).map(BufWriter::new).map_err(|e| io_err(path, e))
}

/// Write `report.json`, `events.csv`, `decisions.csv` and `transport.csv`.
pub fn write_outputs(dir: &Path, out: &RunOutput) -> Result<(), CliError> {
    std::fs::create_dir_all(dir).map_err(|e| io_err(dir, e))?;
    let path = dir.join("report.json");
    let mut w = create(&path)?;
    writeln!(w, "{}", out.report.to_json())
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&path, e))?;
    let path = dir.join("events.csv");
    let mut w = create(&path)?;
    out.log.write_csv(&mut w).and_then(|_| w.flush()).map_err(|e| io_err(&path, e))?;
    let path = dir.join("decisions.csv");
    let mut w = create(&path)?;
    write_decisions_csv(&out.decisions, &mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&path, e))?;
    let path = dir.join("transport.csv");
    let mut w = create(&path)?;
    out.transport
        .write_csv(&mut w)
        .and_then(|_| w.flush())
        .map_err(|e| io_err(&path, e))?;
    Ok(())
}

fn load_with_seed(config: &Path, seed: Option<u64>) -> Result<RunConfig, CliError> {
    let mut cfg = RunConfig::load(config)?;
    if let Some(s) = seed {
        cfg.seed = s;
    }
    Ok(cfg)
}

fn simulate_config(cfg: &RunConfig) -> Result<RunOutput, CliError> {
    let p = cfg.prepare()?;
    run(&p.engine, &p.cluster, &p.trace).map_err(|e| CliError::Runtime(e.to_string()))
}

/// Per-request token counts and wall time of a socket-backed run.
#[derive(Debug, Serialize)]
struct LiveSummary {
    wall_time_s: f64,
    time_scale: f64,
    total_tokens: u64,
    tokens_per_request: Vec<u32>,
}

/// Run one configuration and write its outputs. Returns the output directory.
pub fn cmd_simulate(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    live: Option<LiveOptions>,
) -> Result<(PathBuf, MetricsReport), CliError> {
    let cfg = load_with_seed(config, seed)?;
    let dir = out_dir(out, &cfg);
    let result = simulate_config(&cfg)?;
    write_outputs(&dir, &result)?;
    if let Some(opts) = live {
        let p = cfg.prepare()?;
        let links = p
            .engine
            .stage_links(&p.cluster)
            .map_err(|e| CliError::Usage(e.to_string()))?;
        let l = run_live(&p.engine, links, &p.trace, &opts).map_err(|e| CliError::Runtime(e.to_string()))?;
        let tokens = l.tokens_per_request();
        let summary = LiveSummary {
            wall_time_s: l.wall_time.as_secs_f64(),
            time_scale: opts.time_scale,
            total_tokens: tokens.iter().map(|&t| u64::from(t)).sum(),
            tokens_per_request: tokens,
        };
        let path = dir.join("live.json");
        let text = serde_json::to_string_pretty(&summary).expect("summary serializes");
        std::fs::write(&path, text + "\n").map_err(|e| io_err(&path, e))?;
        if summary.tokens_per_request != result.tokens_per_request() {
            return Err(CliError::Runtime(
                "socket run token counts differ from the virtual-time run".into(),
            ));
        }
    }
    Ok((dir, result.report))
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SweepAxis {
    Bandwidth,
    Latency,
    Rate,
    ChunkSize,
    NPolicy,
}

impl FromStr for SweepAxis {
    type Err = String;

    fn from_str(s: &str) -> Result<Self, Self::Err> {
        match s.trim().to_ascii_lowercase().replace('-', "_").as_str() {
            "bandwidth" => Ok(Self::Bandwidth),
            "latency" => Ok(Self::Latency),
            "rate" => Ok(Self::Rate),
            "chunk_size" => Ok(Self::ChunkSize),
            "n_policy" | "n" => Ok(Self::NPolicy),
            _ => Err(format!(
                "unknown sweep axis `{s}` (expected bandwidth, latency, rate, chunk_size or n_policy)"
            )),
        }
    }
}

impl SweepAxis {
    pub fn name(self) -> &'static str {
        match self {
            Self::Bandwidth => "bandwidth",
            Self::Latency => "latency",
            Self::Rate => "rate",
            Self::ChunkSize => "chunk_size",
            Self::NPolicy => "n_policy",
        }
    }

    /// Return a copy of `cfg` with the axis set to `value`.
    pub fn apply(self, cfg: &RunConfig, value: &str) -> Result<RunConfig, CliError> {
        let mut c = cfg.clone();
        let bad = |e: String| CliError::Usage(format!("{}: {e}", self.name()));
        match self {
            Self::Bandwidth => c.network.bandwidth_bps = Some(parse_bandwidth(value).map_err(bad)?),
            Self::Latency => c.network.latency_s = Some(parse_latency(value).map_err(bad)?),
            Self::Rate => {
                let g = c
                    .workload
                    .generate
                    .as_mut()
                    .ok_or_else(|| CliError::Usage("rate sweeps need a generated workload".into()))?;
                let r: f64 = value
                    .trim()
                    .parse()
                    .map_err(|_| bad(format!("invalid rate `{value}`")))?;
                g.rate = r;
            }
            Self::ChunkSize => c.engine.chunk_size = ChunkSize::from_str(value).map_err(bad)?,
            Self::NPolicy => c.engine.n_policy = NPolicy::from_str(value).map_err(bad)?,
        }
        Ok(c)
    }
}

pub const SWEEP_FILE: &str = "sweep.csv";

fn dir_label(index: usize, value: &str) -> String {
    let clean: String = value
        .trim()
        .chars()
        .map(|c| if c.is_ascii_alphanumeric() || c == '.' || c == '-' { c } else { '_' })
        .collect();
    format!("{index:02}-{clean}")
}

/// Run every value of `axis` in order, one subdirectory each, and write the
/// combined `sweep.csv`. Returns its path.
pub fn cmd_sweep(
    config: &Path,
    seed: Option<u64>,
    out: Option<&Path>,
    axis: SweepAxis,
    values: &[String],
) -> Result<PathBuf, CliError> {
    if values.is_empty() {
        return Err(CliError::Usage("sweep needs at least one value".into()));
    }
    let base = load_with_seed(config, seed)?;
    let configs = values
        .iter()
        .map(|v| axis.apply(&base, v))
        .collect::<Result<Vec<_>, _>>()?;
    let dir = out_dir(out, &base);
    std::fs::create_dir_all(&dir).map_err(|e| io_err(&dir, e))?;
    let mut rows = Vec::new();
    for (i, (value, cfg)) in values.iter().zip(&configs).enumerate() {
        let result = simulate_config(cfg)?;
        write_outputs(&dir.join(dir_label(i, value)), &result)?;
        rows.push(format!("{},{},{}", axis.name(), value.trim(), result.report.csv_row()));
    }
    let path = dir.join(SWEEP_FILE);
    let mut text = format!("axis,value,{}\n", MetricsReport::CSV_HEADER);
    for r in rows {
        text.push_str(&r);
        text.push('\n');
    }
    std::fs::write(&path, text).map_err(|e| io_err(&path, e))?;
    Ok(path)
}

/// Plan a deployment of `model` on `cluster`. When `gpu_type` is absent the
/// first node's type is used.
pub fn cmd_plan(
    cluster: &Path,
    model: &str,
    gpu_type: Option<&str>,
    gpu_count: u32,
) -> Result<PartitionPlan, CliError> {
    if !cluster.exists() {
        return Err(CliError::Usage(format!("cluster not found: {}", cluster.display())));
    }
    let c = ClusterSpec::load(cluster).map_err(|e| CliError::Usage(e.to_string()))?;
    let m = ModelSpec::preset(model).ok_or_else(|| {
        CliError::Usage(format!(
            "unknown model `{model}` (known: {})",
            ModelSpec::preset_names().join(", ")
        ))
    })?;
    let gpu = match gpu_type {
        Some(g) => g.to_string(),
        None => c
            .nodes
            .first()
            .map(|n| n.gpu_type.clone())
            .ok_or_else(|| CliError::Runtime("cluster has no nodes".into()))?,
    };
    plan_deployment(&c, &m, &gpu, gpu_count).map_err(|e| CliError::Runtime(format!("placement failed: {e}")))
}

/// Host the control API on `listen` until `shutdown` resolves.
pub async fn cmd_serve(
    listen: SocketAddr,
    cluster: Option<&Path>,
    journal: Option<&Path>,
    key_seed: Option<u64>,
    shutdown: impl std::future::Future<Output = ()> + Send + 'static,
) -> Result<(), CliError> {
    let mut registry = match cluster {
        Some(p) => {
            if !p.exists() {
                return Err(CliError::Usage(format!("cluster not found: {}", p.display())));
            }
            let c = ClusterSpec::load(p).map_err(|e| CliError::Usage(e.to_string()))?;
            Registry::with_cluster(c).map_err(|e| CliError::Usage(e.to_string()))?
        }
        None => Registry::new(),
    };
    let journal = match journal {
        Some(p) => {
            registry = Journal::replay(p, registry).map_err(|e| CliError::Runtime(e.to_string()))?;
            Some(Journal::open(p).map_err(|e| CliError::Runtime(e.to_string()))?)
        }
        None => None,
    };
    let listener = api::bind(listen)
        .await
        .map_err(|e| CliError::Runtime(format!("cannot listen on {listen}: {e}")))?;
    let keys = key_seed.map_or_else(KeySource::system, KeySource::seeded);
    let (handle, task) = spawn(registry, keys, journal);
    let served = api::serve(listener, handle, shutdown).await;
    // the server owned the last handle, so the writer drains and exits
    let _ = task.await;
    served.map_err(|e| CliError::Runtime(e.to_string()))
}
