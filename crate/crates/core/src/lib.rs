//! Decentralized composite consensus optimization over directed networks.
//!
//! A simulator for proximal-gradient consensus methods of the EXTRA family
//! running on directed communication graphs with column-stochastic mixing,
//! plus a subgradient-push baseline. The objective at each agent is a
//! smooth+nonsmooth composite `f_i = s_i + r_i`; the nonsmooth part is
//! handled through closed-form proximity operators, and the bias introduced
//! by one-way communication is corrected by push-sum weight tracking.
//!
//! Modules:
//! - [`graph`]: directed networks, column-stochastic mixing matrices,
//!   stationary distributions, mixing-rate diagnostics.
//! - [`prox`]: closed-form proximity operators (`ℓ0`, `ℓ1`, `ℓ1/2`, `ℓ2/3`,
//!   distance, halfspace indicator), weight-scaled proxes, and a brute-force
//!   1-D oracle used to validate all of them.
//! - [`problems`]: seeded generators for the four experiment families with
//!   centralized reference solutions.
//! - [`solvers`]: the iteration engine and its reductions, synchronous-round
//!   simulation with full traces.
//! - [`analysis`]: first-order optimality certificates, the quadratic
//!   Lyapunov machinery, theoretical step-size constants, and empirical
//!   rate fitting.
//! - [`experiment`]: config parsing, experiment/sweep harnesses, trace CSV
//!   and plot-script emission.

pub mod analysis;
pub mod experiment;
pub mod graph;
pub mod problems;
pub mod prox;
pub mod solvers;

pub use analysis::{OptimalityCertificate, RateFit, TheoryOutcome};
pub use experiment::{ExperimentConfig, ExperimentReport, SweepTable};
pub use graph::{DirectedNetwork, MixingDiagnostics, MixingMatrix};
pub use problems::{Family, ProblemInstance, Reference};
pub use prox::ProxOp;
pub use solvers::{Algorithm, RunConfig, RunOutcome, SolverState, Termination, TraceRecord};
