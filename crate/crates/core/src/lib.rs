//! Capacitated vehicle routing: instances, giant-tour solutions, the
//! step-by-step routing environment and classical reference solvers.

pub mod baselines;
pub mod env;
pub mod error;
pub mod instance;
pub mod io;
pub mod solution;

pub use baselines::{exact_small, nearest_neighbor, random_policy, EXACT_MAX_CUSTOMERS};
pub use env::{episode_reward, replay, EnvState};
pub use error::{CoreError, Result};
pub use instance::{generate_instance, generate_instances, Instance};
pub use solution::{optimality_gap, route_length, validate_solution, Route, SolutionReport, Violation};
