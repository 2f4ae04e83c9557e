use pipeserve_core::cluster::PlacementError;
use serde_json::{json, Value};
use thiserror::Error;

#[derive(Debug, Error, Clone, PartialEq)]
pub enum ControlError {
    #[error("service `{0}` already exists")]
    ServiceExists(String),
    #[error("service `{0}` not found")]
    ServiceNotFound(String),
    #[error("node `{0}` is already registered")]
    NodeExists(String),
    #[error("node `{0}` not found")]
    NodeNotFound(String),
    #[error("unknown model `{name}`")]
    UnknownModel { name: String, known: Vec<String> },
    #[error("deployment failed: {0}")]
    Placement(PlacementError),
    #[error("deployment failed: no link {from} -> {to} between planned stages")]
    MissingLink { from: String, to: String },
    #[error("node `{node}` hosts running services {services:?}; pass cascade to stop them")]
    NodeHosting { node: String, services: Vec<String> },
    #[error("invalid request: {0}")]
    Invalid(String),
    #[error("simulation failed: {0}")]
    Engine(String),
    #[error("journal: {0}")]
    Journal(String),
    #[error("registry is shut down")]
    Unavailable,
}

impl ControlError {
    /// Stable machine-readable error code.
    pub fn code(&self) -> &'static str {
        match self {
            ControlError::ServiceExists(_) | ControlError::NodeExists(_) => "conflict",
            ControlError::ServiceNotFound(_) | ControlError::NodeNotFound(_) => "not_found",
            ControlError::UnknownModel { .. } => "unknown_model",
            ControlError::Placement(_) | ControlError::MissingLink { .. } => "deployment_failed",
            ControlError::NodeHosting { .. } => "node_busy",
            ControlError::Invalid(_) => "invalid_request",
            ControlError::Engine(_) => "simulation_failed",
            ControlError::Journal(_) | ControlError::Unavailable => "internal",
        }
    }

    pub fn details(&self) -> Value {
        match self {
            ControlError::ServiceExists(n) | ControlError::ServiceNotFound(n) => json!({ "service": n }),
            ControlError::NodeExists(n) | ControlError::NodeNotFound(n) => json!({ "node": n }),
            ControlError::UnknownModel { name, known } => json!({ "model": name, "known": known }),
            ControlError::Placement(PlacementError::InsufficientMemory {
                required_bytes,
                available_bytes,
            }) => json!({
                "required_bytes": required_bytes,
                "available_bytes": available_bytes,
                "deficit_bytes": required_bytes - available_bytes,
            }),
            ControlError::Placement(PlacementError::InsufficientGpus { required, available }) => {
                json!({ "required_gpus": required, "available_gpus": available })
            }
            ControlError::MissingLink { from, to } => json!({ "from": from, "to": to }),
            ControlError::NodeHosting { node, services } => json!({ "node": node, "services": services }),
            _ => Value::Null,
        }
    }
}
