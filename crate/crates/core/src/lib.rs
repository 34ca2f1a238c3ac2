//! Distributed voltage-regulation OPF on radial distribution feeders.
//!
//! Feeders are modelled with the branch-flow equations. The crate provides
//! nonlinear and linearized power flow, voltage sensitivities of several
//! fidelities, a centralized primal-dual controller with nonlinear feedback,
//! and a hierarchical variant that splits the gradient computation between a
//! central controller and regional controllers.

pub mod error;
pub mod gradients;
pub mod hierarchy;
pub mod network;
pub mod opf;
pub mod powerflow;
pub mod scenario;

pub use error::{Error, Result};
pub use gradients::{SensitivityMatrices, SensitivityMode};
pub use hierarchy::{run_hierarchical, validate_clustering, Clustering, MessageLog, RawClustering};
pub use network::{build_path_index, InjectionBox, Network, PathIndex};
pub use opf::{run_centralized, DualState, OpfParams, OpfProblem, Termination, Trajectory};
pub use scenario::{run_scenario, OpfConfig, RunMode, Scenario, Summary};
pub use powerflow::{solve_linear, solve_nonlinear, InjectionVector, PowerFlowState, SolverOptions};
