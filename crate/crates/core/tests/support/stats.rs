//! Statistical helpers shared by integration tests.

#![allow(dead_code)]

use mfclear_core::stochastics::ScenarioSet;
use mfclear_core::{
    build_scenarios, euler_feedback, solve_affine, solve_lq, EquilibriumSolution, ModelSpec, ScenarioOptions, Vector,
};

pub struct TerminalCheck {
    /// Largest `|copy-average Y_T − (1−δ)⁻¹ copy-average ∂ₓg|` over common paths.
    pub max_gap: f64,
    /// Pooled z-score of the same differences across common paths.
    pub z: f64,
}

/// Compares the copy estimate of `E[Y_T | common]` with `(1−δ)⁻¹` times the
/// copy estimate of `E[∂ₓg | common]`.
pub fn terminal_identity(spec: &ModelSpec, sol: &EquilibriumSolution, scenarios: &ScenarioSet) -> TerminalCheck {
    let n = spec.n;
    let s = spec.steps;
    let kk = sol.copies_per_path;
    let scale = 1.0 / (1.0 - spec.delta);
    let pop = &sol.populations[0];
    let mut max_gap = 0.0f64;
    let (mut sum_d, mut sum_var) = (0.0, 0.0);
    for m in 0..sol.common_paths {
        let c0 = Vector::from_column_slice(&scenarios.common[m].c0[s * n..(s + 1) * n]);
        // first coordinate only for the z-score
        let mut e = Vec::with_capacity(kk);
        let mut gap = Vector::zeros(n);
        for k in 0..kk {
            let copy = &pop.copies[m * kk + k];
            let x = Vector::from_column_slice(&copy.x[s * n..(s + 1) * n]);
            let y = Vector::from_column_slice(&copy.y[s * n..(s + 1) * n]);
            let c = Vector::from_column_slice(&scenarios.copy(0, m, k).c[s * n..(s + 1) * n]);
            let dg = spec.lq.marginal_terminal_cost(&x, &c0, &c);
            let diff = y - dg * scale;
            e.push(diff[0]);
            gap += diff / kk as f64;
        }
        max_gap = max_gap.max(gap.amax());
        let mean = e.iter().sum::<f64>() / kk as f64;
        let var = e.iter().map(|v| (v - mean).powi(2)).sum::<f64>() / (kk as f64 - 1.0);
        sum_d += mean;
        sum_var += var / kk as f64;
    }
    let z = if sum_var > 0.0 { sum_d / sum_var.sqrt() } else { 0.0 };
    TerminalCheck { max_gap, z }
}

/// RMS gap between Euler feedback simulation on each coarse grid and the
/// reconstruction on the fine grid, sampled at the coarse nodes.
pub fn euler_rms_gaps(
    spec: &ModelSpec,
    fine_steps: usize,
    coarse_steps: &[usize],
    common_paths: usize,
    copies: usize,
    seed: u64,
) -> Vec<f64> {
    let mut fine_spec = spec.clone();
    fine_spec.steps = fine_steps;
    let fine_grid = fine_spec.grid().unwrap();
    let opts = ScenarioOptions { center_copies: false };
    let fine_sc = build_scenarios(&fine_spec, &fine_grid, common_paths, copies, seed, opts).unwrap();
    let fine = solve_lq(&fine_spec, &fine_sc, true).unwrap();
    let n = spec.n;
    coarse_steps
        .iter()
        .map(|&sc| {
            let factor = fine_steps / sc;
            let mut cs = spec.clone();
            cs.steps = sc;
            let grid = cs.grid().unwrap();
            let scen = fine_sc.coarsen(factor).unwrap();
            let sol = solve_affine(&cs, &grid).unwrap();
            let euler = euler_feedback(&cs, &sol, &scen).unwrap();
            let (mut acc, mut count) = (0.0, 0usize);
            for (e, f) in euler.iter().zip(&fine.populations[0].copies) {
                for k in 0..=sc {
                    for j in 0..n {
                        let d = e[k * n + j] - f.x[k * factor * n + j];
                        acc += d * d;
                        count += 1;
                    }
                }
            }
            (acc / count as f64).sqrt()
        })
        .collect()
}
