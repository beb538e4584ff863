//! Simulators and planners for distributed training: GPipe pipeline
//! schedules, optimizer-state sharding and offload, and federated
//! low-rank training (closed-form traffic plus an executable round).
//!
//! Planners are single-threaded and deterministic; identical inputs give
//! identical reports.

mod federated;
mod pipeline;
mod shard;

pub use federated::{
    federated_comm_report, federated_round, wire_bytes, FedMode, FederatedConfig, FederatedReport, RoundLog,
    WIRE_BYTES_PER_VALUE,
};
pub use pipeline::{pipeline_schedule, Phase, PipelineEvent, PipelinePlan, BACKWARD_FACTOR};
pub use shard::{offload_peak, shard_plan, Footprint, OffloadReport, PhaseResident, ShardPlan};
