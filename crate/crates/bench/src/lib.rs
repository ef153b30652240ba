//! Benchmark fixtures shared by the criterion targets.

use mfclear_core::{build_scenarios, presets, solve_lq, EquilibriumSolution, ModelSpec, ScenarioOptions};

/// Futures model solved on `m` common paths with `k` copies each.
pub fn solved_futures(m: usize, k: usize) -> (ModelSpec, EquilibriumSolution) {
    let spec = presets::futures_1d();
    let grid = spec.grid().expect("valid grid");
    let sc = build_scenarios(&spec, &grid, m, k, 1, ScenarioOptions::default()).expect("scenarios");
    let sol = solve_lq(&spec, &sc, false).expect("solvable preset");
    (spec, sol)
}
