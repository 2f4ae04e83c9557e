//! Control plane for pipeserve deployments: a node and service registry with
//! a single-writer update queue, an optional restart journal, and JSON
//! endpoints.

pub mod api;
pub mod error;
pub mod registry;
pub mod service;

pub use error::ControlError;
pub use registry::{
    Command, DeployRequest, InferenceParams, NodeRegistration, NodeStatusReport, Registry, ResourceSpec,
    ServiceRecord, ServiceState, ServiceStatus, Utilization,
};
pub use service::{spawn, Journal, KeySource, RegistryHandle};
