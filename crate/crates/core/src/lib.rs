//! Hamilton-Jacobi reachability for planar quadrotor platoons.
//!
//! The crate computes backward reachable sets for highway merging, platoon
//! joining and pairwise collision avoidance, extracts the corresponding
//! bang-bang controllers, and runs deterministic platoon scenarios that wrap
//! the safety controller around the liveness controllers.
//!
//! Module map:
//! - [`grid`]: Cartesian grids, implicit surface functions, interpolation.
//! - [`dynamics`]: per-axis Hamiltonians and optimal control laws.
//! - [`hjsolver`]: Godunov/ENO time marching, coupled reconstruction, cache files.
//! - [`reach`]: the highway, join and safety evaluators.
//! - [`platoon`]: hybrid modes, platoon registry, follower and leader laws.
//! - [`sim`]: scenario configuration, the step loop, traces and metrics.
//! - [`validate`]: randomized invariant suites shared by the CLI and tests.

pub mod dynamics;
pub mod grid;
pub mod hjsolver;
pub mod platoon;
pub mod reach;
pub mod sim;
pub mod validate;
