//! Cooperative aerial transport of a rigidly grasped payload: multibody agent
//! models, the coupled constrained dynamics, leader/follower control with
//! grasp allocation, Gaussian-process disturbance learning and an experiment
//! harness.

pub mod agent;
pub mod control;
pub mod error;
pub mod gp;
pub mod liegroup;
pub mod payload;
pub mod simlab;

pub use agent::{AgentInput, AgentModel, AgentState};
pub use control::{Allocation, PayloadGains, Reference, WrenchCommand};
pub use error::{Error, Result};
pub use gp::{Dataset, GpModel, KernelParams};
pub use liegroup::{AttitudeError, Rotation};
pub use payload::{CoupledState, CoupledSystem, PayloadParams, PayloadState};
pub use simlab::{run_case, run_matrix, Case, CaseResult, ScenarioConfig};
