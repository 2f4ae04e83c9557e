//! Deterministic registry state machine. Every mutation is a [`Command`];
//! applying the same command sequence always yields the same state.

use std::collections::{BTreeMap, BTreeSet};

use pipeserve_core::cluster::{plan_deployment, ClusterSpec, ModelSpec, NodeDescriptor, PartitionPlan};
use pipeserve_core::metrics::MetricsReport;
use pipeserve_core::profiler::LinkProfile;
use pipeserve_core::transport::ChunkSize;
use serde::{Deserialize, Serialize};

use crate::error::ControlError;

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct ResourceSpec {
    pub gpu_type: String,
    pub gpu_count: u32,
}

#[derive(Debug, Clone, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InferenceParams {
    pub max_batched_tokens: Option<u32>,
    pub chunk_size: Option<ChunkSize>,
}

#[derive(Debug, Clone, PartialEq, Eq, Serialize, Deserialize)]
pub struct DeployRequest {
    pub service_name: String,
    pub model_name: String,
    pub resources: ResourceSpec,
    #[serde(default)]
    pub params: InferenceParams,
}

/// Node registration: the descriptor plus links to already registered nodes.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeRegistration {
    #[serde(flatten)]
    pub node: NodeDescriptor,
    #[serde(default)]
    pub links: Vec<LinkProfile>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
pub enum ServiceState {
    Deploying,
    Running,
    Deleted,
}

/// What a running service needs to drive the engine.
#[derive(Debug, Clone, PartialEq)]
pub struct EngineContext {
    /// Hop links in pipeline order, ending with the return link to the head.
    pub links: Vec<LinkProfile>,
    pub params: InferenceParams,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ServiceRecord {
    pub service_name: String,
    pub model: ModelSpec,
    pub plan: PartitionPlan,
    pub state: ServiceState,
    pub api_key: String,
    /// Milliseconds since the Unix epoch.
    pub created_at_ms: u64,
    pub request_count: u64,
    pub token_count: u64,
    pub latest_report: Option<MetricsReport>,
    pub context: Option<EngineContext>,
}

/// Simulated load figures for one node, fed from engine runs.
#[derive(Debug, Clone, Copy, Default, PartialEq, Serialize, Deserialize)]
pub struct Utilization {
    /// Always true: these figures come from the simulator, not hardware.
    pub simulated: bool,
    pub gpu_load: f64,
    pub cpu_load: f64,
    pub link_throughput_bps: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeStatusReport {
    pub name: String,
    pub metadata: NodeDescriptor,
    pub utilization: Utilization,
    pub hosted_services: Vec<String>,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ServiceStatus {
    pub service_name: String,
    pub state: ServiceState,
    pub model: String,
    pub layer_counts: Vec<u32>,
    pub nodes: Vec<String>,
    pub head: String,
    pub uptime_s: f64,
    pub request_count: u64,
    pub token_count: u64,
    pub latest_report: Option<MetricsReport>,
}

/// Per-node figures from one completed run.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct NodeLoad {
    pub node: String,
    pub utilization: Utilization,
}

/// A journaled mutation.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(tag = "op", rename_all = "snake_case")]
pub enum Command {
    Deploy {
        request: DeployRequest,
        api_key: String,
        created_at_ms: u64,
    },
    Delete {
        service_name: String,
    },
    NodeAccess {
        registration: NodeRegistration,
    },
    NodeExit {
        name: String,
        cascade: bool,
    },
    RecordRun {
        service_name: String,
        report: MetricsReport,
        loads: Vec<NodeLoad>,
    },
}

#[derive(Debug, Clone, PartialEq)]
pub enum Outcome {
    Deployed(Box<ServiceRecord>),
    Deleted,
    NodeAdded,
    NodeRemoved { stopped_services: Vec<String> },
    RunRecorded,
}

#[derive(Debug, Clone, Default, PartialEq)]
pub struct Registry {
    cluster: ClusterSpec,
    /// All records ever created, including deleted ones, in creation order.
    services: Vec<ServiceRecord>,
    utilization: BTreeMap<String, Utilization>,
}

impl Registry {
    pub fn new() -> Self {
        Self::default()
    }

    /// Start from an existing cluster description.
    pub fn with_cluster(cluster: ClusterSpec) -> Result<Self, ControlError> {
        cluster.validate().map_err(|e| ControlError::Invalid(e.to_string()))?;
        Ok(Self {
            cluster,
            ..Self::default()
        })
    }

    pub fn cluster(&self) -> &ClusterSpec {
        &self.cluster
    }

    pub fn services(&self) -> &[ServiceRecord] {
        &self.services
    }

    fn active(&self, name: &str) -> Option<&ServiceRecord> {
        self.services
            .iter()
            .find(|s| s.service_name == name && s.state != ServiceState::Deleted)
    }

    fn active_mut(&mut self, name: &str) -> Option<&mut ServiceRecord> {
        self.services
            .iter_mut()
            .find(|s| s.service_name == name && s.state != ServiceState::Deleted)
    }

    pub fn service(&self, name: &str) -> Result<&ServiceRecord, ControlError> {
        self.active(name)
            .ok_or_else(|| ControlError::ServiceNotFound(name.to_string()))
    }

    /// Nodes held by a non-deleted service.
    pub fn booked_nodes(&self) -> BTreeSet<&str> {
        self.services
            .iter()
            .filter(|s| s.state != ServiceState::Deleted)
            .flat_map(|s| s.plan.nodes())
            .collect()
    }

    fn services_on(&self, node: &str) -> Vec<String> {
        self.services
            .iter()
            .filter(|s| s.state != ServiceState::Deleted && s.plan.nodes().any(|n| n == node))
            .map(|s| s.service_name.clone())
            .collect()
    }

    pub fn get_api_key(&self, name: &str) -> Result<String, ControlError> {
        Ok(self.service(name)?.api_key.clone())
    }

    pub fn check_service_status(&self, name: &str, now_ms: u64) -> Result<ServiceStatus, ControlError> {
        let s = self.service(name)?;
        Ok(ServiceStatus {
            service_name: s.service_name.clone(),
            state: s.state,
            model: s.model.name.clone(),
            layer_counts: s.plan.layer_counts(),
            nodes: s.plan.nodes().map(str::to_string).collect(),
            head: s.plan.head.clone(),
            uptime_s: now_ms.saturating_sub(s.created_at_ms) as f64 / 1000.0,
            request_count: s.request_count,
            token_count: s.token_count,
            latest_report: s.latest_report.clone(),
        })
    }

    pub fn check_node_status(&self, name: &str) -> Result<NodeStatusReport, ControlError> {
        let node = self
            .cluster
            .node(name)
            .ok_or_else(|| ControlError::NodeNotFound(name.to_string()))?;
        Ok(NodeStatusReport {
            name: node.name.clone(),
            metadata: node.clone(),
            utilization: self.utilization.get(name).copied().unwrap_or(Utilization {
                simulated: true,
                ..Utilization::default()
            }),
            hosted_services: self.services_on(name),
        })
    }

    /// The cluster restricted to nodes no active service holds.
    pub fn free_cluster(&self) -> ClusterSpec {
        let booked = self.booked_nodes();
        let free = |n: &str| !booked.contains(n);
        ClusterSpec {
            nodes: self.cluster.nodes.iter().filter(|n| free(&n.name)).cloned().collect(),
            links: self
                .cluster
                .links
                .iter()
                .filter(|l| free(&l.from) && free(&l.to))
                .cloned()
                .collect(),
        }
    }

    pub fn apply(&mut self, cmd: &Command) -> Result<Outcome, ControlError> {
        match cmd {
            Command::Deploy {
                request,
                api_key,
                created_at_ms,
            } => self.deploy(request, api_key, *created_at_ms),
            Command::Delete { service_name } => {
                let rec = self
                    .active_mut(service_name)
                    .ok_or_else(|| ControlError::ServiceNotFound(service_name.clone()))?;
                rec.context = None;
                rec.state = ServiceState::Deleted;
                Ok(Outcome::Deleted)
            }
            Command::NodeAccess { registration } => self.node_access(registration),
            Command::NodeExit { name, cascade } => self.node_exit(name, *cascade),
            Command::RecordRun {
                service_name,
                report,
                loads,
            } => {
                let rec = self
                    .active_mut(service_name)
                    .ok_or_else(|| ControlError::ServiceNotFound(service_name.clone()))?;
                rec.request_count += report.requests as u64;
                rec.token_count += report.total_tokens;
                rec.latest_report = Some(report.clone());
                for l in loads {
                    self.utilization.insert(l.node.clone(), l.utilization);
                }
                Ok(Outcome::RunRecorded)
            }
        }
    }

    fn deploy(&mut self, req: &DeployRequest, api_key: &str, created_at_ms: u64) -> Result<Outcome, ControlError> {
        if req.service_name.is_empty() {
            return Err(ControlError::Invalid("service_name must not be empty".into()));
        }
        if req.resources.gpu_count == 0 {
            return Err(ControlError::Invalid("gpu_count must be >= 1".into()));
        }
        if let Some(ChunkSize::Bytes(0)) = req.params.chunk_size {
            return Err(ControlError::Invalid("chunk_size must be positive".into()));
        }
        if req.params.max_batched_tokens == Some(0) {
            return Err(ControlError::Invalid("max_batched_tokens must be >= 1".into()));
        }
        if self.active(&req.service_name).is_some() {
            return Err(ControlError::ServiceExists(req.service_name.clone()));
        }
        let model = ModelSpec::preset(&req.model_name).ok_or_else(|| ControlError::UnknownModel {
            name: req.model_name.clone(),
            known: ModelSpec::preset_names().iter().map(|s| s.to_string()).collect(),
        })?;
        let free = self.free_cluster();
        let plan = plan_deployment(&free, &model, &req.resources.gpu_type, req.resources.gpu_count)
            .map_err(ControlError::Placement)?;

        let mut record = ServiceRecord {
            service_name: req.service_name.clone(),
            model,
            plan,
            state: ServiceState::Deploying,
            api_key: api_key.to_string(),
            created_at_ms,
            request_count: 0,
            token_count: 0,
            latest_report: None,
            context: None,
        };
        let stages = &record.plan.stages;
        let mut links = Vec::new();
        if stages.len() > 1 {
            for i in 0..stages.len() {
                let (from, to) = (&stages[i].node, &stages[(i + 1) % stages.len()].node);
                let link = free.link(from, to).ok_or_else(|| ControlError::MissingLink {
                    from: from.clone(),
                    to: to.clone(),
                })?;
                links.push(link.clone());
            }
        }
        record.context = Some(EngineContext {
            links,
            params: req.params.clone(),
        });
        record.state = ServiceState::Running;
        self.services.push(record.clone());
        Ok(Outcome::Deployed(Box::new(record)))
    }

    fn node_access(&mut self, reg: &NodeRegistration) -> Result<Outcome, ControlError> {
        let node = &reg.node;
        node.validate().map_err(|e| ControlError::Invalid(e.to_string()))?;
        if self.cluster.node(&node.name).is_some() {
            return Err(ControlError::NodeExists(node.name.clone()));
        }
        let known = |n: &str| n == node.name || self.cluster.node(n).is_some();
        for l in &reg.links {
            l.validate().map_err(|e| ControlError::Invalid(e.to_string()))?;
            if l.from != node.name && l.to != node.name {
                return Err(ControlError::Invalid(format!(
                    "link {} -> {} does not touch `{}`",
                    l.from, l.to, node.name
                )));
            }
            if !known(&l.from) || !known(&l.to) {
                return Err(ControlError::Invalid(format!(
                    "link {} -> {} references an unregistered node",
                    l.from, l.to
                )));
            }
        }
        let mut next = self.cluster.clone();
        next.nodes.push(node.clone());
        for l in &reg.links {
            next.links.retain(|x| !(x.from == l.from && x.to == l.to));
            next.links.push(l.clone());
        }
        next.validate().map_err(|e| ControlError::Invalid(e.to_string()))?;
        self.cluster = next;
        Ok(Outcome::NodeAdded)
    }

    fn node_exit(&mut self, name: &str, cascade: bool) -> Result<Outcome, ControlError> {
        if self.cluster.node(name).is_none() {
            return Err(ControlError::NodeNotFound(name.to_string()));
        }
        let hosted = self.services_on(name);
        if !hosted.is_empty() && !cascade {
            return Err(ControlError::NodeHosting {
                node: name.to_string(),
                services: hosted,
            });
        }
        for s in &hosted {
            self.apply(&Command::Delete {
                service_name: s.clone(),
            })?;
        }
        self.cluster.nodes.retain(|n| n.name != name);
        self.cluster.links.retain(|l| l.from != name && l.to != name);
        self.utilization.remove(name);
        Ok(Outcome::NodeRemoved {
            stopped_services: hosted,
        })
    }

    /// Check the registry-wide invariants: unique active names, active plans
    /// reference registered nodes only, and no node is held by two services.
    pub fn check_invariants(&self) -> Result<(), String> {
        let mut names = BTreeSet::new();
        let mut holder: BTreeMap<&str, &str> = BTreeMap::new();
        for s in self.services.iter().filter(|s| s.state != ServiceState::Deleted) {
            if !names.insert(s.service_name.as_str()) {
                return Err(format!("service name `{}` is active twice", s.service_name));
            }
            for n in s.plan.nodes() {
                if self.cluster.node(n).is_none() {
                    return Err(format!("service `{}` uses unregistered node `{n}`", s.service_name));
                }
                if let Some(other) = holder.insert(n, &s.service_name) {
                    return Err(format!("node `{n}` held by `{other}` and `{}`", s.service_name));
                }
            }
            if s.state == ServiceState::Running && s.context.is_none() {
                return Err(format!("running service `{}` has no engine context", s.service_name));
            }
        }
        Ok(())
    }
}
