//! Mean-field market-clearing price laboratory.
//!
//! Computes the endogenous clearing price of a mean-field exchange model
//! (exactly through Riccati/affine ODEs in the linear-quadratic case, by a
//! damped fixed point for a saturating price map) and measures how fast the
//! net order flow of `N` agents vanishes.

pub mod clearing;
pub mod error;
pub mod linalg;
pub mod lq_affine;
pub mod mfg_solver;
pub mod model;
pub mod multipop;
pub mod presets;
pub mod stochastics;

pub use error::{Error, Result};
pub use linalg::{Mat, Vector};
pub use lq_affine::{
    euler_feedback, reconstruct_paths, solve_affine, solve_fluctuation_system, solve_mean_system, AffineSolution,
    FluctuationSolution, MeanSolution,
};
pub use mfg_solver::{
    monotonicity_probe, solve_lq, solve_nonlinear_deterministic, stability_probe, EquilibriumSolution,
    SolveMode, SolverConfig,
};
pub use model::{
    epsilon_n, equilibrium_price, hamiltonian_minimizer, terminal_condition, validate_model,
    InitialLaw, LqCoefficients, ModelSpec, PriceMap, TerminalMode, ValidationReport, Verdict,
};
pub use clearing::{
    net_flow_metric, rate_sweep, simulate_agents, wasserstein_diag, ClearingConfig, ClearingReport, ClearingRow,
    WassersteinConfig, WassersteinReport,
};
pub use multipop::{
    aggregate_price, multipop_clearing_sweep, solve_multipop_lq, validate_multipop, MultiPopSpec, Population, Regime,
};
pub use stochastics::{build_scenarios, OuSpec, ScenarioOptions, ScenarioSet, TimeGrid};
