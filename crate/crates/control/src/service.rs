//! Single-writer actor around [`Registry`] with an optional journal.

use std::fs::{File, OpenOptions};
use std::io::{BufRead, BufReader, BufWriter, Write};
use std::path::{Path, PathBuf};
use std::sync::Arc;
use std::time::{SystemTime, UNIX_EPOCH};

use pipeserve_core::engine::{run_with_links, EngineConfig, RunOutput};
use pipeserve_core::profiler::StageProfile;
use pipeserve_core::transport::LinkEvent;
use pipeserve_core::workload::Trace;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha20Rng;
use tokio::sync::{mpsc, oneshot, watch};
use tokio::task::JoinHandle;

use crate::error::ControlError;
use crate::registry::{
    Command, DeployRequest, NodeLoad, NodeRegistration, NodeStatusReport, Outcome, Registry, ServiceRecord,
    ServiceStatus, Utilization,
};

/// Source of API keys: 128 random bits rendered as 32 hex digits.
pub struct KeySource(ChaCha20Rng);

impl KeySource {
    /// Reproducible keys for tests.
    pub fn seeded(seed: u64) -> Self {
        Self(ChaCha20Rng::seed_from_u64(seed))
    }

    pub fn system() -> Self {
        Self(ChaCha20Rng::from_os_rng())
    }

    pub fn next_key(&mut self) -> String {
        format!("{:032x}", self.0.random::<u128>())
    }
}

/// Append-only JSON-lines log of applied commands.
pub struct Journal {
    path: PathBuf,
    out: BufWriter<File>,
}

impl Journal {
    /// Open `path` for appending, creating it if needed.
    pub fn open(path: impl AsRef<Path>) -> Result<Self, ControlError> {
        let path = path.as_ref().to_path_buf();
        let file = OpenOptions::new()
            .create(true)
            .append(true)
            .open(&path)
            .map_err(|e| ControlError::Journal(format!("{}: {e}", path.display())))?;
        Ok(Self {
            path,
            out: BufWriter::new(file),
        })
    }

    pub fn path(&self) -> &Path {
        &self.path
    }

    pub fn append(&mut self, cmd: &Command) -> Result<(), ControlError> {
        let line = serde_json::to_string(cmd).map_err(|e| ControlError::Journal(e.to_string()))?;
        writeln!(self.out, "{line}")
            .and_then(|_| self.out.flush())
            .map_err(|e| ControlError::Journal(format!("{}: {e}", self.path.display())))
    }

    /// Rebuild a registry by applying every journaled command to `base`.
    /// A final line without a newline is a torn write and is ignored.
    pub fn replay(path: impl AsRef<Path>, mut base: Registry) -> Result<Registry, ControlError> {
        let path = path.as_ref();
        let file = match File::open(path) {
            Ok(f) => f,
            Err(e) if e.kind() == std::io::ErrorKind::NotFound => return Ok(base),
            Err(e) => return Err(ControlError::Journal(format!("{}: {e}", path.display()))),
        };
        let mut reader = BufReader::new(file);
        let mut line = String::new();
        let mut lineno = 0;
        loop {
            line.clear();
            let n = reader
                .read_line(&mut line)
                .map_err(|e| ControlError::Journal(e.to_string()))?;
            if n == 0 || !line.ends_with('\n') {
                break;
            }
            lineno += 1;
            if line.trim().is_empty() {
                continue;
            }
            let cmd: Command = serde_json::from_str(&line)
                .map_err(|e| ControlError::Journal(format!("{}:{lineno}: {e}", path.display())))?;
            base.apply(&cmd)
                .map_err(|e| ControlError::Journal(format!("{}:{lineno}: replay failed: {e}", path.display())))?;
        }
        Ok(base)
    }
}

pub fn now_ms() -> u64 {
    SystemTime::now()
        .duration_since(UNIX_EPOCH)
        .map_or(0, |d| d.as_millis() as u64)
}

enum Mutation {
    Deploy(DeployRequest),
    Apply(Command),
}

struct Envelope {
    mutation: Mutation,
    reply: oneshot::Sender<Result<Outcome, ControlError>>,
}

/// Cloneable front end: mutations go through the actor queue, reads use the
/// latest published snapshot.
#[derive(Clone)]
pub struct RegistryHandle {
    tx: mpsc::Sender<Envelope>,
    snapshot: watch::Receiver<Arc<Registry>>,
}

/// Start the writer task. Must be called from within a tokio runtime.
/// The task ends once every handle is dropped.
pub fn spawn(registry: Registry, keys: KeySource, journal: Option<Journal>) -> (RegistryHandle, JoinHandle<()>) {
    let (tx, mut rx) = mpsc::channel::<Envelope>(64);
    let (snap_tx, snap_rx) = watch::channel(Arc::new(registry.clone()));
    let task = tokio::spawn(async move {
        let mut registry = registry;
        let mut keys = keys;
        let mut journal = journal;
        while let Some(Envelope { mutation, reply }) = rx.recv().await {
            let cmd = match mutation {
                Mutation::Deploy(request) => Command::Deploy {
                    request,
                    api_key: keys.next_key(),
                    created_at_ms: now_ms(),
                },
                Mutation::Apply(cmd) => cmd,
            };
            let mut next = registry.clone();
            let result = next.apply(&cmd).and_then(|outcome| {
                if let Some(j) = journal.as_mut() {
                    j.append(&cmd)?;
                }
                Ok(outcome)
            });
            if result.is_ok() {
                registry = next;
                snap_tx.send_replace(Arc::new(registry.clone()));
            }
            let _ = reply.send(result);
        }
    });
    (
        RegistryHandle {
            tx,
            snapshot: snap_rx,
        },
        task,
    )
}

impl RegistryHandle {
    async fn submit(&self, mutation: Mutation) -> Result<Outcome, ControlError> {
        let (reply, rx) = oneshot::channel();
        self.tx
            .send(Envelope { mutation, reply })
            .await
            .map_err(|_| ControlError::Unavailable)?;
        rx.await.map_err(|_| ControlError::Unavailable)?
    }

    /// Latest committed state.
    pub fn snapshot(&self) -> Arc<Registry> {
        self.snapshot.borrow().clone()
    }

    pub async fn deploy(&self, req: DeployRequest) -> Result<ServiceRecord, ControlError> {
        match self.submit(Mutation::Deploy(req)).await? {
            Outcome::Deployed(rec) => Ok(*rec),
            other => unreachable!("deploy produced {other:?}"),
        }
    }

    pub async fn delete(&self, service_name: &str) -> Result<(), ControlError> {
        self.submit(Mutation::Apply(Command::Delete {
            service_name: service_name.to_string(),
        }))
        .await
        .map(|_| ())
    }

    pub async fn node_access(&self, registration: NodeRegistration) -> Result<(), ControlError> {
        self.submit(Mutation::Apply(Command::NodeAccess { registration }))
            .await
            .map(|_| ())
    }

    /// Remove a node. Returns the services stopped by a cascade.
    pub async fn node_exit(&self, name: &str, cascade: bool) -> Result<Vec<String>, ControlError> {
        match self
            .submit(Mutation::Apply(Command::NodeExit {
                name: name.to_string(),
                cascade,
            }))
            .await?
        {
            Outcome::NodeRemoved { stopped_services } => Ok(stopped_services),
            other => unreachable!("node exit produced {other:?}"),
        }
    }

    pub fn get_api_key(&self, service_name: &str) -> Result<String, ControlError> {
        self.snapshot().get_api_key(service_name)
    }

    pub fn check_service_status(&self, service_name: &str) -> Result<ServiceStatus, ControlError> {
        self.snapshot().check_service_status(service_name, now_ms())
    }

    pub fn check_node_status(&self, name: &str) -> Result<NodeStatusReport, ControlError> {
        self.snapshot().check_node_status(name)
    }

    /// Run `trace` through the service's pipeline in virtual time and fold the
    /// result into its counters and the hosting nodes' utilization.
    pub async fn simulate(
        &self,
        service_name: &str,
        profiles: Vec<StageProfile>,
        trace: Trace,
    ) -> Result<RunOutput, ControlError> {
        let record = self.snapshot().service(service_name)?.clone();
        let ctx = record
            .context
            .clone()
            .ok_or_else(|| ControlError::ServiceNotFound(service_name.to_string()))?;
        let mut cfg = EngineConfig::new(record.plan.clone(), record.model.clone(), profiles);
        if let Some(t) = ctx.params.max_batched_tokens {
            cfg.controller.max_batched_tokens = t;
        }
        if let Some(c) = ctx.params.chunk_size {
            cfg.chunk_size = c;
        }
        let links = ctx.links;
        let out = tokio::task::spawn_blocking(move || run_with_links(&cfg, links, &trace))
            .await
            .map_err(|e| ControlError::Engine(e.to_string()))?
            .map_err(|e| ControlError::Engine(e.to_string()))?;
        let loads = node_loads(&record, &out);
        self.submit(Mutation::Apply(Command::RecordRun {
            service_name: service_name.to_string(),
            report: out.report.clone(),
            loads,
        }))
        .await?;
        Ok(out)
    }
}

/// Busy fraction per stage and outbound link rate per node. CPU load is not
/// modeled and stays zero.
fn node_loads(record: &ServiceRecord, out: &RunOutput) -> Vec<NodeLoad> {
    let span = out.report.span_s;
    record
        .plan
        .stages
        .iter()
        .enumerate()
        .map(|(i, st)| {
            let prefix = format!("{}->", st.node);
            let bytes: u64 = out
                .transport
                .events(LinkEvent::Sent)
                .filter(|r| r.link.starts_with(&prefix))
                .map(|r| r.bytes)
                .sum();
            NodeLoad {
                node: st.node.clone(),
                utilization: Utilization {
                    simulated: true,
                    gpu_load: 1.0 - out.report.bubble_fraction_per_stage[i],
                    cpu_load: 0.0,
                    link_throughput_bps: if span > 0.0 { bytes as f64 / span } else { 0.0 },
                },
            }
        })
        .collect()
}
