//! Pipeline-parallel LLM serving over weakly connected heterogeneous nodes.
//!
//! The crate models a pipeline of stages on separate machines: request
//! traces ([`workload`]), stage and link cost tables ([`profiler`]), node
//! selection and layer partitioning ([`cluster`]), chunked decode-priority
//! activation transport ([`transport`]), micro-batch count selection
//! ([`controller`]), a deterministic discrete-event engine ([`engine`]) and
//! serving and cost metrics ([`metrics`]).

pub mod clock;
pub mod cluster;
pub mod controller;
pub mod engine;
pub mod metrics;
pub mod profiler;
pub mod transport;
pub mod workload;

pub use clock::Nanos;
pub use cluster::{ClusterSpec, ModelSpec, NodeDescriptor, PartitionPlan, PlacementError};
pub use controller::{ControllerConfig, ControllerDecision};
pub use engine::{EngineConfig, EngineError, NPolicy, RunOutput};
pub use metrics::{CostModel, MetricsReport};
pub use profiler::{LinkProfile, Phase, StageProfile};
pub use transport::{ChunkSize, LinkPolicy};
pub use workload::{Request, Trace};
