//! Workflow-scoped authorization propagation for multi-agent systems.
//!
//! The engine tracks delegated authority across a DAG of agent actions,
//! enforces a configured temporal-validity policy at every retrieval, checks
//! label-combination policy at synthesis and delivery, and emits a
//! hash-chained trace that can be audited offline.

pub mod aggregation;
pub mod audit;
pub mod cli;
pub mod delegation;
pub mod digest;
pub mod model;
pub mod simulator;
pub mod store;
pub mod trace;
pub mod workflow;
