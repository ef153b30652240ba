//! Finite-`N` market clearing: `N` agents play the mean-field strategy against
//! the limit price, and the net order flow `(1/N) Σ_i α̂ⁱ` is measured.
//!
//! Agents are drawn from fresh idiosyncratic streams, conditionally i.i.d.
//! given the common path. Their controls come from the price-free fluctuation
//! recursion, so an agent costs one forward pass.

use rayon::prelude::*;
use statrs::distribution::{ContinuousCDF, StudentsT};

use crate::error::{Error, Result};
use crate::lq_affine::FluctScratch;
use crate::linalg::{mv_add, pairwise_sum};
use crate::mfg_solver::{EquilibriumSolution, PopulationSolution};
use crate::model::epsilon_n;
use crate::stochastics::{
    derive_seed, fill_standard_normals, stream_rng, wasserstein_1d, IdioPath, IdioSampler, StreamRole, TimeGrid,
};

pub const DEFAULT_MOMENT: f64 = 6.0;

/// Controls of `N` agents per common path.
#[derive(Debug, Clone, PartialEq)]
pub struct AgentControls {
    pub grid: TimeGrid,
    pub n: usize,
    /// Agents per population.
    pub counts: Vec<usize>,
    /// `alpha[m][i]`, flattened `(S+1) × n`; agents of population 0 first.
    pub alpha: Vec<Vec<Vec<f64>>>,
}

/// Agent counts `round(n_p N)`, each at least one.
pub fn population_counts(solution: &EquilibriumSolution, n_agents: usize) -> Result<Vec<usize>> {
    if n_agents == 0 {
        return Err(Error::InvalidArgument("N must be at least 1".into()));
    }
    let counts: Vec<usize> = solution
        .populations
        .iter()
        .map(|p| (p.weight * n_agents as f64).round() as usize)
        .collect();
    if let Some(p) = counts.iter().position(|&c| c == 0) {
        return Err(Error::InvalidArgument(format!(
            "N = {n_agents} leaves population {p} without agents"
        )));
    }
    Ok(counts)
}

struct AgentScratch {
    z: Vec<f64>,
    path: IdioPath,
    x: Vec<f64>,
    y: Vec<f64>,
    fluct: FluctScratch,
}

impl AgentScratch {
    fn new() -> Self {
        Self {
            z: Vec::new(),
            path: IdioPath {
                xi_dev: Vec::new(),
                dw: Vec::new(),
                c: Vec::new(),
            },
            x: Vec::new(),
            y: Vec::new(),
            fluct: FluctScratch::default(),
        }
    }

    /// Leaves the fluctuation `Ỹ` of agent `i` of population `p` in `self.y`.
    fn agent(&mut self, pop: &PopulationSolution, sampler: &IdioSampler, p: usize, seed: u64, m: usize, i: usize) {
        let len = pop.fluctuation.grid.len() * pop.fluctuation.n;
        self.z.resize(sampler.draw_len(), 0.0);
        let mut rng = stream_rng(seed, StreamRole::Agent { population: p as u8 }, m, i);
        fill_standard_normals(&mut rng, &mut self.z);
        sampler.fill_path(&self.z, &mut self.path);
        self.x.resize(len, 0.0);
        self.y.resize(len, 0.0);
        pop.fluctuation.simulate(&self.path, &mut self.x, &mut self.y, &mut self.fluct);
    }
}

fn samplers(solution: &EquilibriumSolution) -> Vec<IdioSampler> {
    solution.populations.iter().map(|p| p.source.sampler(&solution.grid)).collect()
}

/// `−Λ⁻¹(ȳ + Ỹ + φ)` written to `out`.
fn control_into(pop: &PopulationSolution, ybar: &[f64], price: &[f64], ytilde: &[f64], n: usize, out: &mut [f64]) {
    let mut shifted = vec![0.0; n];
    for (k, chunk) in out.chunks_mut(n).enumerate() {
        for j in 0..n {
            let i = k * n + j;
            shifted[j] = -(ybar[i] + ytilde[i] + price[i]);
        }
        chunk.fill(0.0);
        mv_add(&pop.lambda_inv, &shifted, chunk);
    }
}

/// Draws `N` agents per common path and returns their mean-field controls.
pub fn simulate_agents(solution: &EquilibriumSolution, n_agents: usize, seed: u64) -> Result<AgentControls> {
    let counts = population_counts(solution, n_agents)?;
    let n = solution.n;
    let len = solution.grid.len() * n;
    let samplers = samplers(solution);
    let alpha = (0..solution.common_paths)
        .into_par_iter()
        .map(|m| {
            let mut scratch = AgentScratch::new();
            let mut out = Vec::new();
            for (p, pop) in solution.populations.iter().enumerate() {
                for i in 0..counts[p] {
                    scratch.agent(pop, &samplers[p], p, seed, m, i);
                    let mut a = vec![0.0; len];
                    control_into(pop, &pop.ybar[m], &solution.price[m], &scratch.y, n, &mut a);
                    out.push(a);
                }
            }
            out
        })
        .collect();
    Ok(AgentControls {
        grid: solution.grid,
        n,
        counts,
        alpha,
    })
}

/// `∫₀ᵀ |v_t|² dt` by the trapezoid rule over node values flattened `(S+1) × n`.
pub fn trapezoid_sq(values: &[f64], n: usize, h: f64) -> f64 {
    let sq: Vec<f64> = values.chunks(n).map(|c| c.iter().map(|v| v * v).sum()).collect();
    trapezoid(&sq, h)
}

fn trapezoid(f: &[f64], h: f64) -> f64 {
    match f.len() {
        0 | 1 => 0.0,
        len => h * (pairwise_sum(&f[1..len - 1]) + 0.5 * (f[0] + f[len - 1])),
    }
}

/// `E ∫ |(1/N) Σ_i α̂ⁱ|² dt`, the expectation taken over common paths.
pub fn net_flow_metric(controls: &AgentControls) -> f64 {
    let n = controls.n;
    let h = controls.grid.dt();
    let len = controls.grid.len() * n;
    let per_path: Vec<f64> = controls
        .alpha
        .iter()
        .map(|agents| {
            let mut flow = vec![0.0; len];
            for a in agents {
                for (f, v) in flow.iter_mut().zip(a) {
                    *f += v;
                }
            }
            let scale = 1.0 / agents.len().max(1) as f64;
            flow.iter_mut().for_each(|f| *f *= scale);
            trapezoid_sq(&flow, n, h)
        })
        .collect();
    if per_path.is_empty() {
        0.0
    } else {
        pairwise_sum(&per_path) / per_path.len() as f64
    }
}

/// Seed of replication `r` at sweep position `j`.
pub fn cell_seed(seed: u64, j: usize, reps: usize, r: usize) -> u64 {
    derive_seed(seed, (j * reps + r) as u64)
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingConfig {
    pub n_list: Vec<usize>,
    pub reps: usize,
    pub seed: u64,
    /// Moment order `q` for the estimate of `sup_t E|Y_t|^q`.
    pub moment: f64,
}

impl ClearingConfig {
    pub fn new(n_list: Vec<usize>, reps: usize, seed: u64) -> Self {
        Self {
            n_list,
            reps,
            seed,
            moment: DEFAULT_MOMENT,
        }
    }

    pub fn check(&self) -> Result<()> {
        if self.n_list.len() < 3 {
            return Err(Error::InvalidArgument("the N list needs at least 3 values".into()));
        }
        if self.n_list.windows(2).any(|w| w[0] >= w[1]) || self.n_list[0] == 0 {
            return Err(Error::InvalidArgument("the N list must be positive and strictly increasing".into()));
        }
        if self.reps < 2 {
            return Err(Error::InvalidArgument(format!(
                "a standard error needs at least 2 replications, got {}",
                self.reps
            )));
        }
        if !(self.moment >= 1.0) {
            return Err(Error::InvalidArgument(format!("moment order must be >= 1, got {}", self.moment)));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingRow {
    pub n_agents: usize,
    pub reps: usize,
    pub metric: f64,
    pub stderr: f64,
    pub epsilon: f64,
    /// `metric / (Γ̂² ε_N)`.
    pub c_hat: f64,
    pub counts: Vec<usize>,
    /// `E ∫ |(1/N) Σ_{i ∈ p} α̂^{p,i}|² dt` per population.
    pub per_population: Vec<f64>,
}

/// Least-squares line through `(log x, log y)`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SlopeFit {
    pub slope: f64,
    pub intercept: f64,
    pub ci_low: f64,
    pub ci_high: f64,
    pub confidence: f64,
}

pub fn fit_loglog(xs: &[f64], ys: &[f64], confidence: f64) -> Result<SlopeFit> {
    if xs.len() != ys.len() || xs.len() < 3 {
        return Err(Error::InvalidArgument("a log-log fit needs at least 3 paired points".into()));
    }
    if xs.iter().chain(ys).any(|v| !(*v > 0.0)) {
        return Err(Error::InvalidArgument("log-log fit requires positive values".into()));
    }
    let lx: Vec<f64> = xs.iter().map(|v| v.ln()).collect();
    let ly: Vec<f64> = ys.iter().map(|v| v.ln()).collect();
    let k = lx.len() as f64;
    let mx = lx.iter().sum::<f64>() / k;
    let my = ly.iter().sum::<f64>() / k;
    let sxx: f64 = lx.iter().map(|x| (x - mx) * (x - mx)).sum();
    let sxy: f64 = lx.iter().zip(&ly).map(|(x, y)| (x - mx) * (y - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let rss: f64 = lx
        .iter()
        .zip(&ly)
        .map(|(x, y)| (y - intercept - slope * x).powi(2))
        .sum();
    let df = k - 2.0;
    let se = (rss / df / sxx).sqrt();
    let t = StudentsT::new(0.0, 1.0, df)
        .map_err(|e| Error::InvalidArgument(e.to_string()))?
        .inverse_cdf(0.5 + 0.5 * confidence);
    Ok(SlopeFit {
        slope,
        intercept,
        ci_low: slope - t * se,
        ci_high: slope + t * se,
        confidence,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct ClearingReport {
    pub rows: Vec<ClearingRow>,
    pub fit: SlopeFit,
    pub moment: f64,
    pub gamma_hat: f64,
    /// `Ĉ` of the smallest `N`.
    pub c_calibrated: f64,
    /// `metric ≤ Ĉ Γ̂² ε_N` with the calibrated `Ĉ`, per row.
    pub bound_holds: Vec<bool>,
}

impl ClearingReport {
    pub fn all_bounds_hold(&self) -> bool {
        self.bound_holds.iter().all(|b| *b)
    }

    /// `N · metric` per row.
    pub fn scaled_metrics(&self) -> Vec<f64> {
        self.rows.iter().map(|r| r.n_agents as f64 * r.metric).collect()
    }

    pub fn render(&self) -> String {
        let mut s = format!(
            "{:>8} {:>6} {:>14} {:>12} {:>12} {:>12}\n",
            "N", "reps", "metric", "stderr", "epsilon_N", "C_hat"
        );
        for r in &self.rows {
            s.push_str(&format!(
                "{:>8} {:>6} {:>14.6e} {:>12.4e} {:>12.4e} {:>12.4e}\n",
                r.n_agents, r.reps, r.metric, r.stderr, r.epsilon, r.c_hat
            ));
        }
        s.push_str(&format!(
            "slope {:.4} ({:.0}% CI [{:.4}, {:.4}])\n",
            self.fit.slope,
            100.0 * self.fit.confidence,
            self.fit.ci_low,
            self.fit.ci_high
        ));
        s.push_str(&format!("Gamma_hat (q = {}) {:.6e}\n", self.moment, self.gamma_hat));
        s.push_str(&format!(
            "bound with C_hat = {:.4e}: {}\n",
            self.c_calibrated,
            if self.all_bounds_hold() { "holds on every row" } else { "violated" }
        ));
        s
    }
}

/// `sup_t (E|Y_t|^q)^{1/q}` over the copies of the solution, maximised over populations.
pub fn gamma_hat(solution: &EquilibriumSolution, q: f64) -> f64 {
    let n = solution.n;
    let mut best = 0.0f64;
    for pop in &solution.populations {
        for k in 0..solution.grid.len() {
            let vals: Vec<f64> = pop
                .copies
                .iter()
                .map(|c| {
                    let y = &c.y[k * n..(k + 1) * n];
                    y.iter().map(|v| v * v).sum::<f64>().sqrt().powf(q)
                })
                .collect();
            let mean = pairwise_sum(&vals) / vals.len().max(1) as f64;
            best = best.max(mean.powf(1.0 / q));
        }
    }
    best
}

/// Per-population sums `Σ_i α̂^{p,i}` of one `(N, replication, common path)` cell.
fn cell_flows(
    solution: &EquilibriumSolution,
    counts: &[usize],
    seed: u64,
    m: usize,
    samplers: &[IdioSampler],
    scratch: &mut AgentScratch,
) -> Vec<Vec<f64>> {
    let n = solution.n;
    let len = solution.grid.len() * n;
    solution
        .populations
        .iter()
        .enumerate()
        .map(|(p, pop)| {
            let mut ysum = vec![0.0; len];
            for i in 0..counts[p] {
                scratch.agent(pop, &samplers[p], p, seed, m, i);
                for (acc, v) in ysum.iter_mut().zip(&scratch.y) {
                    *acc += v;
                }
            }
            // Σ_i −Λ⁻¹(ȳ + Ỹⁱ + φ) = −Λ⁻¹(N_p(ȳ + φ) + Σ_i Ỹⁱ)
            let np = counts[p] as f64;
            let shift: Vec<f64> = pop.ybar[m]
                .iter()
                .zip(&solution.price[m])
                .map(|(y, f)| np * (y + f))
                .collect();
            let mut flow = vec![0.0; len];
            control_into(pop, &shift, &vec![0.0; len], &ysum, n, &mut flow);
            flow
        })
        .collect()
}

/// Net-flow metric over an increasing list of `N`, with standard errors over
/// replications and a log-log fit of the decay.
pub fn rate_sweep(solution: &EquilibriumSolution, config: &ClearingConfig) -> Result<ClearingReport> {
    config.check()?;
    let counts: Vec<Vec<usize>> = config
        .n_list
        .iter()
        .map(|&nn| population_counts(solution, nn))
        .collect::<Result<_>>()?;
    let big_m = solution.common_paths;
    let reps = config.reps;
    let n = solution.n;
    let h = solution.grid.dt();
    let npop = solution.populations.len();
    let samplers = samplers(solution);
    let cells: Vec<(usize, usize, usize)> = (0..config.n_list.len())
        .flat_map(|j| (0..reps).flat_map(move |r| (0..big_m).map(move |m| (j, r, m))))
        .collect();
    // (total, per population) per cell, in cell order
    let values: Vec<(f64, Vec<f64>)> = cells
        .par_iter()
        .map_init(AgentScratch::new, |scratch, &(j, r, m)| {
            let seed = cell_seed(config.seed, j, reps, r);
            let flows = cell_flows(solution, &counts[j], seed, m, &samplers, scratch);
            let total_agents: usize = counts[j].iter().sum();
            let inv = 1.0 / total_agents as f64;
            let mut total = vec![0.0; flows[0].len()];
            let per: Vec<f64> = flows
                .iter()
                .map(|f| {
                    for (t, v) in total.iter_mut().zip(f) {
                        *t += v;
                    }
                    let scaled: Vec<f64> = f.iter().map(|v| v * inv).collect();
                    trapezoid_sq(&scaled, n, h)
                })
                .collect();
            total.iter_mut().for_each(|t| *t *= inv);
            (trapezoid_sq(&total, n, h), per)
        })
        .collect();

    let gamma = gamma_hat(solution, config.moment);
    let mut rows = Vec::with_capacity(config.n_list.len());
    for (j, &nn) in config.n_list.iter().enumerate() {
        let base = j * reps * big_m;
        let rep_means: Vec<f64> = (0..reps)
            .map(|r| {
                let cell = &values[base + r * big_m..base + (r + 1) * big_m];
                pairwise_sum(&cell.iter().map(|v| v.0).collect::<Vec<_>>()) / big_m as f64
            })
            .collect();
        let metric = pairwise_sum(&rep_means) / reps as f64;
        let var = pairwise_sum(&rep_means.iter().map(|v| (v - metric).powi(2)).collect::<Vec<_>>())
            / (reps as f64 - 1.0);
        let stderr = (var / reps as f64).sqrt();
        let per_population = (0..npop)
            .map(|p| {
                let vals: Vec<f64> = values[base..base + reps * big_m].iter().map(|v| v.1[p]).collect();
                pairwise_sum(&vals) / vals.len() as f64
            })
            .collect();
        let epsilon = epsilon_n(n, nn as f64);
        let c_hat = metric / (gamma * gamma * epsilon);
        rows.push(ClearingRow {
            n_agents: nn,
            reps,
            metric,
            stderr,
            epsilon,
            c_hat,
            counts: counts[j].clone(),
            per_population,
        });
    }
    let xs: Vec<f64> = rows.iter().map(|r| r.n_agents as f64).collect();
    let ys: Vec<f64> = rows.iter().map(|r| r.metric).collect();
    let fit = fit_loglog(&xs, &ys, 0.95).map_err(|e| match e {
        Error::InvalidArgument(_) => Error::InvalidArgument(
            "the net-flow metric vanished; the model has no idiosyncratic randomness to average out".into(),
        ),
        other => other,
    })?;
    let c_calibrated = rows[0].c_hat;
    let bound_holds = rows
        .iter()
        .map(|r| r.metric <= c_calibrated * gamma * gamma * r.epsilon * (1.0 + 1e-12))
        .collect();
    Ok(ClearingReport {
        rows,
        fit,
        moment: config.moment,
        gamma_hat: gamma,
        c_calibrated,
        bound_holds,
    })
}

#[derive(Debug, Clone, PartialEq)]
pub struct WassersteinConfig {
    pub n_list: Vec<usize>,
    pub nodes: Vec<usize>,
    pub seed: u64,
    pub reference_seed: u64,
    /// Reference sample size as a multiple of the largest `N`.
    pub reference_factor: usize,
    pub population: usize,
}

impl WassersteinConfig {
    pub fn new(n_list: Vec<usize>, nodes: Vec<usize>, seed: u64) -> Self {
        Self {
            n_list,
            nodes,
            seed,
            reference_seed: derive_seed(seed, u64::MAX),
            reference_factor: 10,
            population: 0,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct WassersteinRow {
    pub node: usize,
    pub t: f64,
    pub n_agents: usize,
    /// Averages over common paths.
    pub w1: f64,
    pub w2: f64,
    pub w2_sq: f64,
    pub mean_gap: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct WassersteinReport {
    pub rows: Vec<WassersteinRow>,
    pub reference_size: usize,
    /// Per (common path, node, N): `|mean gap| ≤ W₁` and `W₁ ≤ W₂`.
    pub checks_total: usize,
    pub checks_passed: usize,
    /// Log-log fit of `E[W₂²]` (averaged over nodes) against `N`, when defined.
    pub w2_sq_fit: Option<SlopeFit>,
}

/// Distance between the `N`-agent empirical law of `Y_t` and a large reference
/// sample, conditionally on each common path (`n = 1` only).
pub fn wasserstein_diag(solution: &EquilibriumSolution, config: &WassersteinConfig) -> Result<WassersteinReport> {
    if solution.n != 1 {
        return Err(Error::UnsupportedDimension(format!(
            "the Wasserstein diagnostic needs n = 1, got n = {}",
            solution.n
        )));
    }
    let p = config.population;
    let pop = solution
        .populations
        .get(p)
        .ok_or_else(|| Error::InvalidArgument(format!("no population {p}")))?;
    if config.n_list.is_empty() || config.n_list.contains(&0) {
        return Err(Error::InvalidArgument("the N list must be nonempty and positive".into()));
    }
    if config.reference_factor == 0 {
        return Err(Error::InvalidArgument("reference factor must be at least 1".into()));
    }
    let len = solution.grid.len();
    if let Some(k) = config.nodes.iter().find(|&&k| k >= len) {
        return Err(Error::InvalidArgument(format!("node {k} is outside the grid")));
    }
    let n_max = *config.n_list.iter().max().unwrap();
    let k_ref = config.reference_factor * n_max;
    let nodes = &config.nodes;
    let sampler = pop.source.sampler(&solution.grid);
    // per common path: (w1, w2, gap) per (N, node), and the pass count
    let per_path: Vec<(Vec<[f64; 3]>, usize)> = (0..solution.common_paths)
        .into_par_iter()
        .map(|m| {
            let mut scratch = AgentScratch::new();
            let mut sample = |seed: u64, count: usize| -> Vec<Vec<f64>> {
                let mut by_node = vec![Vec::with_capacity(count); nodes.len()];
                for i in 0..count {
                    scratch.agent(pop, &sampler, p, seed, m, i);
                    for (slot, &k) in by_node.iter_mut().zip(nodes) {
                        slot.push(pop.ybar[m][k] + scratch.y[k]);
                    }
                }
                by_node
            };
            let agents = sample(config.seed, n_max);
            let reference = sample(config.reference_seed, k_ref);
            let mut out = Vec::with_capacity(config.n_list.len() * nodes.len());
            let mut passed = 0;
            for &nn in &config.n_list {
                for (a, r) in agents.iter().zip(&reference) {
                    let a = &a[..nn];
                    let w1 = wasserstein_1d(a, r, 1.0).expect("nonempty samples");
                    let w2 = wasserstein_1d(a, r, 2.0).expect("nonempty samples");
                    // shifted means so that identical samples give an exact zero gap
                    let shift = r[0];
                    let mean = |v: &[f64]| pairwise_sum(&v.iter().map(|x| x - shift).collect::<Vec<_>>()) / v.len() as f64;
                    let gap = (mean(a) - mean(r)).abs();
                    let slack = 1e-12 * (1.0 + shift.abs());
                    if gap <= w1 + slack && w1 <= w2 + slack {
                        passed += 1;
                    }
                    out.push([w1, w2, gap]);
                }
            }
            (out, passed)
        })
        .collect();
    let big_m = solution.common_paths as f64;
    let mut rows = Vec::new();
    for (j, &nn) in config.n_list.iter().enumerate() {
        for (l, &k) in nodes.iter().enumerate() {
            let idx = j * nodes.len() + l;
            let col = |f: &dyn Fn(&[f64; 3]) -> f64| -> f64 {
                pairwise_sum(&per_path.iter().map(|(v, _)| f(&v[idx])).collect::<Vec<_>>()) / big_m
            };
            rows.push(WassersteinRow {
                node: k,
                t: solution.grid.node(k),
                n_agents: nn,
                w1: col(&|v| v[0]),
                w2: col(&|v| v[1]),
                w2_sq: col(&|v| v[1] * v[1]),
                mean_gap: col(&|v| v[2]),
            });
        }
    }
    let checks_total = solution.common_paths * config.n_list.len() * nodes.len();
    let checks_passed = per_path.iter().map(|(_, c)| c).sum();
    let w2_sq: Vec<f64> = config
        .n_list
        .iter()
        .enumerate()
        .map(|(j, _)| {
            let slice = &rows[j * nodes.len()..(j + 1) * nodes.len()];
            slice.iter().map(|r| r.w2_sq).sum::<f64>() / nodes.len().max(1) as f64
        })
        .collect();
    let xs: Vec<f64> = config.n_list.iter().map(|&v| v as f64).collect();
    let w2_sq_fit = fit_loglog(&xs, &w2_sq, 0.95).ok();
    Ok(WassersteinReport {
        rows,
        reference_size: k_ref,
        checks_total,
        checks_passed,
        w2_sq_fit,
    })
}
