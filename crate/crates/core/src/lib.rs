//! Age-of-information and completion-time analysis for a two-phase job
//! pipeline: probabilistically scheduled heterogeneous compute VMs feeding a
//! single priority-ordered networking queue.
//!
//! - [`model`]: domain types, validation, heavy-tailed size sampling
//! - [`analytics`]: closed-form moments, waits, expected age and completion
//! - [`optimizer`]: projected gradient descent over schedules, baselines
//! - [`simulator`]: discrete-event simulation of the same system
//! - [`online`]: trace replay with per-window rate estimation
//! - [`scenarios`]: evaluation-table VMs, desk defaults, random instances
//! - [`experiments`]: policy comparisons and sweeps

pub mod analytics;
pub mod config;
pub mod error;
pub mod experiments;
pub mod model;
pub mod online;
pub mod optimizer;
pub mod scenarios;
pub mod schedule;
pub mod simulator;

pub use error::{Error, Result};
pub use model::{
    AoiNetworkWeighting, JobClass, MomentMode, NetworkDiscipline, NetworkProfile, ParetoSpec,
    SystemConfig, VmProfile,
};
pub use schedule::{Matrix, ScheduleMatrix};
