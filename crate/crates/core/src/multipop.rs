//! Several agent populations trading on one exchange.
//!
//! Each population has its own trading costs `Λ_p`, coefficients and
//! idiosyncratic factor law, and a market share `n_p`. With
//! `Λ̂_p = n_p Λ_p⁻¹` and `Ξ̂ = (Σ_p Λ̂_p)⁻¹` the clearing price is
//! `φ = −Ξ̂ Σ_p Λ̂_p ȳ^p`; the population means form one stacked affine system.

use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::clearing::{rate_sweep, ClearingConfig, ClearingReport};
use crate::error::{Error, Result};
use crate::linalg::{inverse, max_asymmetry, Mat, Vector};
use crate::lq_affine::{self, check_grid, solve_mean, MeanSystem, DEFAULT_BLOWUP_BOUND};
use crate::mfg_solver::{
    EquilibriumSolution, PairBatch, ProbeConstants, ProbeReport, SolveMode, SolverDiagnostics,
    PROBE_TOLERANCE,
};
use crate::model::{
    validate_model, InitialLaw, LqCoefficients, ModelSpec, PriceMap, TerminalMode, ValidationReport, Verdict,
};
use crate::stochastics::{
    build_scenarios_from, stream_rng, IdioSource, OuSpec, ScenarioLayout, ScenarioOptions, ScenarioSet,
    StreamRole, TimeGrid,
};

/// Which existence regime the model is run under.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum Regime {
    /// Heterogeneous `Λ_p` and shares allowed; blow-up detection is the existence test.
    #[default]
    ShortT,
    /// Requires `Λ_p = Λ` and `n_p = 1/m` for every population.
    GeneralT,
}

impl Regime {
    pub fn label(self) -> &'static str {
        match self {
            Regime::ShortT => "short-T",
            Regime::GeneralT => "general-T",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Population {
    pub weight: f64,
    pub lambda: Mat,
    pub lq: LqCoefficients,
    pub idio_factor: OuSpec,
    pub initial_law: InitialLaw,
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiPopSpec {
    pub n: usize,
    pub d0: usize,
    pub d: usize,
    pub horizon: f64,
    pub steps: usize,
    pub delta: f64,
    pub mode: TerminalMode,
    pub regime: Regime,
    pub common_factor: OuSpec,
    pub populations: Vec<Population>,
}

impl MultiPopSpec {
    /// `m` copies of one population with equal shares.
    pub fn identical(spec: &ModelSpec, m: usize, regime: Regime) -> Self {
        let pop = Population {
            weight: 1.0 / m as f64,
            lambda: spec.lambda.clone(),
            lq: spec.lq.clone(),
            idio_factor: spec.idio_factor.clone(),
            initial_law: spec.initial_law.clone(),
        };
        Self {
            n: spec.n,
            d0: spec.d0,
            d: spec.d,
            horizon: spec.horizon,
            steps: spec.steps,
            delta: spec.delta,
            mode: spec.mode,
            regime,
            common_factor: spec.common_factor.clone(),
            populations: vec![pop; m],
        }
    }

    pub fn m(&self) -> usize {
        self.populations.len()
    }

    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    /// Single-population view of population `p`.
    pub fn population_spec(&self, p: usize) -> ModelSpec {
        let pop = &self.populations[p];
        ModelSpec {
            n: self.n,
            d0: self.d0,
            d: self.d,
            horizon: self.horizon,
            steps: self.steps,
            lambda: pop.lambda.clone(),
            delta: self.delta,
            lq: pop.lq.clone(),
            psi: PriceMap::Identity,
            common_factor: self.common_factor.clone(),
            idio_factor: pop.idio_factor.clone(),
            initial_law: pop.initial_law.clone(),
            mode: self.mode,
        }
    }

    pub fn scenario_layout(&self) -> ScenarioLayout {
        ScenarioLayout {
            n: self.n,
            common_factor: self.common_factor.clone(),
            populations: self
                .populations
                .iter()
                .map(|p| IdioSource {
                    factor: p.idio_factor.clone(),
                    initial_cov: p.initial_law.cov.clone(),
                })
                .collect(),
        }
    }

    pub fn aggregator(&self) -> Result<Aggregator> {
        let lambda_inv = self
            .populations
            .iter()
            .enumerate()
            .map(|(p, pop)| inverse(&format!("Lambda[{p}]"), &pop.lambda))
            .collect::<Result<Vec<_>>>()?;
        let lambda_hat: Vec<Mat> = lambda_inv
            .iter()
            .zip(&self.populations)
            .map(|(li, pop)| li * pop.weight)
            .collect();
        let total = lambda_hat.iter().fold(Mat::zeros(self.n, self.n), |a, b| a + b);
        let xi_hat = inverse("sum of weighted inverse Lambdas", &total)?;
        let n = self.n;
        let mut w = Mat::zeros(n, n * self.m());
        for (p, lh) in lambda_hat.iter().enumerate() {
            w.view_mut((0, p * n), (n, n)).copy_from(&(&xi_hat * lh));
        }
        Ok(Aggregator {
            lambda_inv,
            lambda_hat,
            xi_hat,
            w,
        })
    }
}

/// Price aggregation weights.
#[derive(Debug, Clone, PartialEq)]
pub struct Aggregator {
    pub lambda_inv: Vec<Mat>,
    pub lambda_hat: Vec<Mat>,
    pub xi_hat: Mat,
    /// `Ξ̂ [Λ̂_1 … Λ̂_m]`, `n × mn`.
    pub w: Mat,
}

impl Aggregator {
    /// `‖Ξ̂ Σ_p Λ̂_p − I‖_max`.
    pub fn identity_error(&self) -> f64 {
        let n = self.xi_hat.nrows();
        let sum = self.lambda_hat.iter().fold(Mat::zeros(n, n), |a, b| a + b);
        (&self.xi_hat * sum - Mat::identity(n, n)).amax()
    }
}

/// `φ = −Ξ̂ Σ_p Λ̂_p ȳ^p`.
pub fn aggregate_price(ybars: &[Vector], spec: &MultiPopSpec) -> Result<Vector> {
    if ybars.len() != spec.m() {
        return Err(Error::InvalidArgument(format!(
            "expected {} population means, got {}",
            spec.m(),
            ybars.len()
        )));
    }
    let agg = spec.aggregator()?;
    let mut acc = Vector::zeros(spec.n);
    for (lh, y) in agg.lambda_hat.iter().zip(ybars) {
        acc += lh * y;
    }
    Ok(-(&agg.xi_hat * acc))
}

/// `Y_T^p = δ/(1−δ) Ξ̂ Σ_q Λ̂_q E[∂ₓg_q | common] + ∂ₓg_p(x_T^p, c⁰_T, c_T^p)`.
pub fn multipop_terminal(
    x_t: &[Vector],
    c0_t: &Vector,
    c_t: &[Vector],
    cond_means: &[Vector],
    spec: &MultiPopSpec,
) -> Result<Vec<Vector>> {
    if !(0.0..1.0).contains(&spec.delta) {
        return Err(Error::DeltaOutOfRange(spec.delta));
    }
    let agg = spec.aggregator()?;
    let mut shared = Vector::zeros(spec.n);
    for (lh, g) in agg.lambda_hat.iter().zip(cond_means) {
        shared += lh * g;
    }
    let shared = &agg.xi_hat * shared * (spec.delta / (1.0 - spec.delta));
    Ok(spec
        .populations
        .iter()
        .enumerate()
        .map(|(p, pop)| &shared + pop.lq.marginal_terminal_cost(&x_t[p], c0_t, &c_t[p]))
        .collect())
}

#[derive(Debug, Clone, PartialEq)]
pub struct MultiPopReport {
    pub regime: Regime,
    pub populations: Vec<ValidationReport>,
    pub aggregator_error: f64,
    pub verdict: Verdict,
    pub warnings: Vec<String>,
}

impl MultiPopReport {
    pub fn require_solvable(&self, allow_short_t: bool) -> Result<()> {
        let all_general = self.populations.iter().all(|r| r.is_general_t());
        if all_general || allow_short_t {
            Ok(())
        } else {
            Err(Error::ValidationRefused(
                "a population has a nonpositive monotonicity constant".into(),
            ))
        }
    }

    pub fn render(&self) -> String {
        let mut s = format!("regime          {}\n", self.regime.label());
        s.push_str(&format!("aggregator err  {:.3e}\n", self.aggregator_error));
        for (p, r) in self.populations.iter().enumerate() {
            s.push_str(&format!("--- population {p}\n"));
            s.push_str(&r.render());
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s.push_str(&format!("verdict: {}\n", self.verdict.label()));
        s
    }
}

pub fn validate_multipop(spec: &MultiPopSpec) -> Result<MultiPopReport> {
    let m = spec.m();
    if m == 0 {
        return Err(Error::InvalidModel("at least one population is required".into()));
    }
    if let Some(p) = spec.populations.iter().position(|p| !(p.weight > 0.0)) {
        return Err(Error::InvalidModel(format!("population {p} needs a positive weight")));
    }
    let total: f64 = spec.populations.iter().map(|p| p.weight).sum();
    if (total - 1.0).abs() > 1e-12 {
        return Err(Error::InvalidModel(format!("population weights sum to {total}, expected 1")));
    }
    let populations = (0..m)
        .map(|p| validate_model(&spec.population_spec(p)))
        .collect::<Result<Vec<_>>>()?;
    let equal_lambda = spec
        .populations
        .iter()
        .all(|p| (&p.lambda - &spec.populations[0].lambda).amax() <= 1e-12);
    let equal_weights = spec
        .populations
        .iter()
        .all(|p| (p.weight - 1.0 / m as f64).abs() <= 1e-12);
    if spec.regime == Regime::GeneralT && !(equal_lambda && equal_weights) {
        return Err(Error::InvalidModel(
            "general-T regime requires identical Lambda and equal weights 1/m for every population".into(),
        ));
    }
    let agg = spec.aggregator()?;
    let mut warnings = Vec::new();
    if spec.regime == Regime::ShortT {
        warnings.push(
            "short-T regime: existence is only certified by the absence of a Riccati blow-up".into(),
        );
    }
    for (p, pop) in spec.populations.iter().enumerate() {
        if max_asymmetry(&pop.lq.k_l) > 0.0 {
            warnings.push(format!("population {p}: K_l is not symmetric"));
        }
    }
    let verdict = if spec.regime == Regime::GeneralT && populations.iter().all(|r| r.is_general_t()) {
        Verdict::SolvableGeneralT
    } else {
        Verdict::ShortTOnly
    };
    Ok(MultiPopReport {
        regime: spec.regime,
        populations,
        aggregator_error: agg.identity_error(),
        verdict,
        warnings,
    })
}

/// Stacked mean system over all populations with the aggregated price substituted.
pub fn mean_system(spec: &MultiPopSpec) -> Result<MeanSystem> {
    let m = spec.m();
    let n = spec.n;
    let dd = m * n;
    let agg = spec.aggregator()?;
    let w = &agg.w;
    let mut b_v = Mat::zeros(dd, dd);
    let mut b_c = Mat::zeros(dd, n);
    let mut b_const = Vector::zeros(dd);
    let mut b_idio = Mat::zeros(dd, dd);
    let mut q_u = Mat::zeros(dd, dd);
    let mut f_v = Mat::zeros(dd, dd);
    let mut f_c = Mat::zeros(dd, n);
    let mut f_const = Vector::zeros(dd);
    let mut f_idio = Mat::zeros(dd, dd);
    let mut p_block = Mat::zeros(dd, dd);
    let mut g_c0 = Mat::zeros(dd, n);
    let mut g_rest = Vector::zeros(dd);
    let mut sigma0 = Mat::zeros(dd, spec.d0);
    let mut initial_mean = Vector::zeros(dd);
    let mut stacked_w = Mat::zeros(dd, dd);
    for (p, pop) in spec.populations.iter().enumerate() {
        let r = p * n;
        let li = &agg.lambda_inv[p];
        let lq = &pop.lq;
        // dx̄^p: −Λ_p⁻¹(ȳ^p + φ) + K_l^p φ with φ = −W v
        let mut row = -((&lq.k_l - li) * w);
        {
            let mut diag = row.view_mut((0, r), (n, n));
            diag -= li;
        }
        b_v.view_mut((r, 0), (n, dd)).copy_from(&row);
        b_c.view_mut((r, 0), (n, n)).copy_from(&lq.l_c0);
        b_const.rows_mut(r, n).copy_from(&lq.l_const);
        b_idio.view_mut((r, r), (n, n)).copy_from(&lq.l_c);
        q_u.view_mut((r, r), (n, n)).copy_from(&lq.q);
        f_v.view_mut((r, 0), (n, dd)).copy_from(&(-(&lq.f_phi * w)));
        f_c.view_mut((r, 0), (n, n)).copy_from(&lq.f_c0);
        f_const.rows_mut(r, n).copy_from(&lq.f_const);
        f_idio.view_mut((r, r), (n, n)).copy_from(&lq.f_c);
        p_block.view_mut((r, r), (n, n)).copy_from(&lq.p);
        g_c0.view_mut((r, 0), (n, n)).copy_from(&lq.g_c0);
        let cbar_t = pop.idio_factor.mean_at(spec.horizon);
        g_rest.rows_mut(r, n).copy_from(&(&lq.g_c * cbar_t + &lq.g_const));
        sigma0.view_mut((r, 0), (n, spec.d0)).copy_from(&lq.sigma0);
        initial_mean.rows_mut(r, n).copy_from(&pop.initial_law.mean);
        stacked_w.view_mut((r, 0), (n, dd)).copy_from(w);
    }
    if !(0.0..1.0).contains(&spec.delta) {
        return Err(Error::DeltaOutOfRange(spec.delta));
    }
    let j = Mat::identity(dd, dd) + stacked_w * (spec.delta / (1.0 - spec.delta));
    Ok(MeanSystem {
        dim: dd,
        n,
        b_v,
        b_c,
        b_const,
        b_idio,
        q_u,
        f_v,
        f_c,
        f_const,
        f_idio,
        term_u: &j * p_block,
        term_c: &j * g_c0,
        term_const: &j * g_rest,
        sigma0,
        common: spec.common_factor.clone(),
        idio: spec.populations.iter().map(|p| p.idio_factor.clone()).collect(),
        initial_mean,
    })
}

pub fn build_multipop_scenarios(
    spec: &MultiPopSpec,
    grid: &TimeGrid,
    common_paths: usize,
    copies: usize,
    master_seed: u64,
    options: ScenarioOptions,
) -> Result<ScenarioSet> {
    build_scenarios_from(&spec.scenario_layout(), *grid, common_paths, copies, master_seed, options)
}

/// Solves the stacked mean system, the per-population fluctuation systems, and
/// reconstructs every population's copies against the aggregated price.
pub fn solve_multipop_lq(
    spec: &MultiPopSpec,
    scenarios: &ScenarioSet,
    allow_short_t: bool,
) -> Result<EquilibriumSolution> {
    let report = validate_multipop(spec)?;
    report.require_solvable(allow_short_t)?;
    let grid = spec.grid()?;
    check_grid(&grid, &scenarios.grid, "scenarios")?;
    if scenarios.populations.len() != spec.m() {
        return Err(Error::SpecMismatch(format!(
            "scenarios carry {} populations, model has {}",
            scenarios.populations.len(),
            spec.m()
        )));
    }
    let n = spec.n;
    let m = spec.m();
    let dd = m * n;
    let agg = spec.aggregator()?;
    let mean = solve_mean(&mean_system(spec)?, &grid, DEFAULT_BLOWUP_BOUND).map_err(|e| match e {
        Error::RiccatiBlowUp { node, time, magnitude, bound, .. } => Error::RiccatiBlowUp {
            system: "stacked multi-population mean (try a shorter horizon or the general-T restrictions)",
            node,
            time,
            magnitude,
            bound,
        },
        other => other,
    })?;
    let paths: Vec<(Vec<f64>, Vec<f64>)> = scenarios.common.par_iter().map(|c| mean.path(c)).collect();
    let len = grid.len();
    let split = |flat: &[f64], p: usize| -> Vec<f64> {
        (0..len).flat_map(|k| flat[k * dd + p * n..k * dd + (p + 1) * n].iter().copied()).collect()
    };
    let price: Vec<Vec<f64>> = paths
        .iter()
        .map(|(_, v)| {
            (0..len)
                .flat_map(|k| {
                    let vk = Vector::from_column_slice(&v[k * dd..(k + 1) * dd]);
                    (-(&agg.w * vk)).iter().copied().collect::<Vec<_>>()
                })
                .collect()
        })
        .collect();
    let mut populations = Vec::with_capacity(m);
    for p in 0..m {
        let pspec = spec.population_spec(p);
        let fluct = lq_affine::solve_fluctuation_system(&pspec, &grid)?;
        let xbar = paths.iter().map(|(u, _)| split(u, p)).collect();
        let ybar = paths.iter().map(|(_, v)| split(v, p)).collect();
        populations.push(lq_affine::reconstruct_population(
            &fluct,
            pspec.idio_source(),
            &pspec.lambda,
            spec.populations[p].weight,
            xbar,
            ybar,
            &price,
            &scenarios.populations[p].paths,
            scenarios.copies,
        )?);
    }
    Ok(EquilibriumSolution {
        grid,
        n,
        mode: SolveMode::MultiPopLq,
        master_seed: scenarios.master_seed,
        common_paths: scenarios.common_paths,
        copies_per_path: scenarios.copies,
        price,
        populations,
        diagnostics: SolverDiagnostics::exact(),
    })
}

/// Clearing sweep with `N_p = round(n_p N)` agents per population and the net
/// flow `(1/N) Σ_p Σ_i α̂^{p,i}` over all of them.
pub fn multipop_clearing_sweep(solution: &EquilibriumSolution, config: &ClearingConfig) -> Result<ClearingReport> {
    rate_sweep(solution, config)
}

/// Stacked version of the monotonicity probe.
///
/// The inequalities are summed over populations, with the aggregated price
/// inside every population's flow and cost, and the squared conditional mean of
/// the population average `(1/m) Σ_p Δy^p` in place of `|E[Δy|G]|²` (scaled by `m`).
pub fn multipop_probe(spec: &MultiPopSpec, sample_count: usize, seed: u64) -> Result<ProbeReport> {
    let report = validate_multipop(spec)?;
    let agg = spec.aggregator()?;
    let m = spec.m();
    let n = spec.n;
    let gamma_l = report.populations.iter().map(|r| r.gamma_l).fold(f64::INFINITY, f64::min);
    let gamma_f = report.populations.iter().map(|r| r.gamma_f).fold(f64::INFINITY, f64::min);
    let gamma_g = report.populations.iter().map(|r| r.gamma_g).fold(f64::INFINITY, f64::min);
    let l_phi = report.populations.iter().map(|r| r.l_phi).fold(0.0, f64::max);
    let gamma_terminal = report.populations.iter().map(|r| r.gamma).fold(f64::INFINITY, f64::min);
    let constants = ProbeConstants {
        gamma_l: if gamma_l > 0.0 { gamma_l } else { crate::mfg_solver::GAMMA_L_FLOOR },
        gamma_f,
        l_phi,
        gamma_terminal: if gamma_terminal.is_finite() { gamma_terminal.min(gamma_g) } else { gamma_g },
    };
    let dscale = spec.delta / (1.0 - spec.delta);
    let group_size = 8;
    let mut violations = [0usize; 3];
    let mut worst = [f64::INFINITY; 3];
    for trial in 0..sample_count {
        let mut rng = stream_rng(seed, StreamRole::Probe, 1, trial);
        // one batch per population, sharing the group structure
        let mut batches: Vec<PairBatch> = Vec::with_capacity(m);
        for _ in 0..m {
            let mut b = PairBatch {
                x: Vec::new(),
                x2: Vec::new(),
                y: Vec::new(),
                y2: Vec::new(),
                group: Vec::new(),
                groups: 2,
            };
            for g in 0..2 {
                let off: Vec<Vector> = (0..4)
                    .map(|_| Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)))
                    .collect();
                let mut within: Vec<Vec<Vector>> = Vec::new();
                for _ in 0..4 {
                    let draws: Vec<Vector> = (0..group_size)
                        .map(|_| Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)))
                        .collect();
                    let mean = draws.iter().fold(Vector::zeros(n), |a, d| a + d) / group_size as f64;
                    within.push(draws.into_iter().map(|d| d - &mean).collect());
                }
                for i in 0..group_size {
                    b.x.push(&off[0] + &within[0][i]);
                    b.x2.push(&off[1] + &within[1][i]);
                    b.y.push(&off[2] + &within[2][i]);
                    b.y2.push(&off[3] + &within[3][i]);
                    b.group.push(g);
                }
            }
            batches.push(b);
        }
        let count = batches[0].group.len();
        let gmean = |v: &dyn Fn(usize) -> Vector, g: usize| -> Vector {
            let mut acc = Vector::zeros(n);
            let mut c = 0;
            for i in 0..count {
                if batches[0].group[i] == g {
                    acc += v(i);
                    c += 1;
                }
            }
            acc / c as f64
        };
        let ybar: Vec<Vec<Vector>> = (0..m).map(|p| (0..2).map(|g| gmean(&|i| batches[p].y[i].clone(), g)).collect()).collect();
        let ybar2: Vec<Vec<Vector>> = (0..m).map(|p| (0..2).map(|g| gmean(&|i| batches[p].y2[i].clone(), g)).collect()).collect();
        let price = |yb: &Vec<Vec<Vector>>, g: usize| -> Vector {
            let mut acc = Vector::zeros(n);
            for p in 0..m {
                acc += &agg.lambda_hat[p] * &yb[p][g];
            }
            -(&agg.xi_hat * acc)
        };
        let (mut l1, mut l2, mut l3, mut dx2, mut dyc2) = (0.0, 0.0, 0.0, 0.0, 0.0);
        for i in 0..count {
            let g = batches[0].group[i];
            let phi = price(&ybar, g);
            let phi2 = price(&ybar2, g);
            // terminal aggregated conditional mean of ∂g over the group
            let mut shared = Vector::zeros(n);
            let mut shared2 = Vector::zeros(n);
            for (p, pop) in spec.populations.iter().enumerate() {
                let xm = gmean(&|j| batches[p].x[j].clone(), g);
                let xm2 = gmean(&|j| batches[p].x2[j].clone(), g);
                shared += &agg.lambda_hat[p] * (&pop.lq.p * xm);
                shared2 += &agg.lambda_hat[p] * (&pop.lq.p * xm2);
            }
            let shared = &agg.xi_hat * shared * dscale;
            let shared2 = &agg.xi_hat * shared2 * dscale;
            for (p, pop) in spec.populations.iter().enumerate() {
                let b = &batches[p];
                let li = &agg.lambda_inv[p];
                let lq = &pop.lq;
                let dy = &b.y[i] - &b.y2[i];
                let dx = &b.x[i] - &b.x2[i];
                let b1 = -(li * (&b.y[i] + &phi)) + &lq.k_l * &phi;
                let b2 = -(li * (&b.y2[i] + &phi2)) + &lq.k_l * &phi2;
                l1 += (b1 - b2).dot(&dy);
                let f1 = -(&lq.q * &b.x[i] + &lq.f_phi * &phi);
                let f2 = -(&lq.q * &b.x2[i] + &lq.f_phi * &phi2);
                l2 += (f1 - f2).dot(&dx);
                let g1 = &lq.p * &b.x[i] + &shared;
                let g2 = &lq.p * &b.x2[i] + &shared2;
                l3 += (g1 - g2).dot(&dx);
                dx2 += dx.norm_squared();
            }
            let mut avg = Vector::zeros(n);
            for p in 0..m {
                avg += (&ybar[p][g] - &ybar2[p][g]) / m as f64;
            }
            dyc2 += m as f64 * avg.norm_squared();
        }
        let c = count as f64;
        let (l1, l2, l3, dx2, dyc2) = (l1 / c, l2 / c, l3 / c, dx2 / c, dyc2 / c);
        let running = constants.gamma_f - constants.l_phi * constants.l_phi / (4.0 * constants.gamma_l);
        let slacks = [
            -constants.gamma_l * dyc2 - l1,
            -running * dx2 + constants.gamma_l * dyc2 - l2,
            l3 - constants.gamma_terminal * dx2,
        ];
        for j in 0..3 {
            worst[j] = worst[j].min(slacks[j]);
            if slacks[j] < -PROBE_TOLERANCE {
                violations[j] += 1;
            }
        }
    }
    Ok(ProbeReport {
        trials: sample_count,
        violations,
        worst_slack: worst,
        constants,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::mfg_solver::solve_lq;
    use crate::presets;
    use crate::stochastics::build_scenarios;

    fn two_pop(lam2: f64, w1: f64) -> MultiPopSpec {
        let mut spec = MultiPopSpec::identical(&presets::general_1d(), 2, Regime::ShortT);
        spec.populations[1].lambda = Mat::from_element(1, 1, lam2);
        spec.populations[0].weight = w1;
        spec.populations[1].weight = 1.0 - w1;
        spec
    }

    #[test]
    fn aggregate_examples() {
        let spec = MultiPopSpec::identical(&presets::base(1), 2, Regime::GeneralT);
        let ys = [Vector::from_element(1, 1.0), Vector::from_element(1, 3.0)];
        assert_eq!(aggregate_price(&ys, &spec).unwrap()[0], -2.0);

        let spec = two_pop(3.0, 0.3);
        let v = Vector::from_element(1, 0.7);
        let phi = aggregate_price(&[v.clone(), v.clone()], &spec).unwrap();
        assert!((phi[0] + 0.7).abs() < 1e-15);

        let one = MultiPopSpec::identical(&presets::base(1), 1, Regime::GeneralT);
        assert_eq!(aggregate_price(&[v.clone()], &one).unwrap()[0], -0.7);
    }

    #[test]
    fn aggregator_identity() {
        let spec = two_pop(3.0, 0.3);
        assert!(spec.aggregator().unwrap().identity_error() < 1e-12);
    }

    #[test]
    fn terminal_reductions() {
        let base = presets::general_1d();
        let x = Vector::from_element(1, 0.4);
        let c0 = Vector::from_element(1, 0.1);
        let c = Vector::from_element(1, -0.3);
        let cm = Vector::from_element(1, 0.9);
        let one = MultiPopSpec::identical(&base, 1, Regime::GeneralT);
        let single = crate::model::terminal_condition(&x, &c0, &c, &cm, &base).unwrap();
        let multi = multipop_terminal(&[x.clone()], &c0, &[c.clone()], &[cm.clone()], &one).unwrap();
        assert!((&single - &multi[0]).amax() < 1e-15);
        let three = MultiPopSpec::identical(&base, 3, Regime::GeneralT);
        let xs = vec![x.clone(); 3];
        let cs = vec![c.clone(); 3];
        let cms = vec![cm.clone(); 3];
        for y in multipop_terminal(&xs, &c0, &cs, &cms, &three).unwrap() {
            assert!((&single - &y).amax() < 1e-14);
        }
        let mut zero = one.clone();
        zero.delta = 0.0;
        let y = multipop_terminal(&[x.clone()], &c0, &[c.clone()], &[cm], &zero).unwrap();
        assert_eq!(y[0], base.lq.marginal_terminal_cost(&x, &c0, &c));
    }

    #[test]
    fn general_t_enforced() {
        let mut spec = two_pop(3.0, 0.5);
        spec.regime = Regime::GeneralT;
        assert!(validate_multipop(&spec).is_err());
        let mut spec = two_pop(1.5, 0.3);
        spec.regime = Regime::GeneralT;
        assert!(validate_multipop(&spec).is_err());
        let mut bad = two_pop(1.5, 0.3);
        bad.populations[1].weight = 0.6;
        assert!(validate_multipop(&bad).is_err());
    }

    #[test]
    fn identical_populations_reduce() {
        let base = presets::general_1d();
        let grid = base.grid().unwrap();
        let single_sc = build_scenarios(&base, &grid, 3, 4, 5, ScenarioOptions::default()).unwrap();
        let single = solve_lq(&base, &single_sc, false).unwrap();
        let multi = MultiPopSpec::identical(&base, 3, Regime::GeneralT);
        let sc = build_multipop_scenarios(&multi, &grid, 3, 4, 5, ScenarioOptions::default()).unwrap();
        let sol = solve_multipop_lq(&multi, &sc, false).unwrap();
        for m in 0..3 {
            for (a, b) in single.price[m].iter().zip(&sol.price[m]) {
                assert!((a - b).abs() <= 1e-9);
            }
        }
        for (a, b) in single.populations[0].copies.iter().zip(&sol.populations[0].copies) {
            for (u, v) in a.x.iter().zip(&b.x).chain(a.y.iter().zip(&b.y)) {
                assert!((u - v).abs() <= 1e-9);
            }
        }
    }

    #[test]
    fn weighted_average_form_with_equal_lambda() {
        let mut spec = two_pop(1.5, 0.3);
        spec.populations[1].lq.k_l = Mat::from_element(1, 1, 0.2);
        let grid = spec.grid().unwrap();
        let sc = build_multipop_scenarios(&spec, &grid, 2, 3, 1, ScenarioOptions::default()).unwrap();
        let sol = solve_multipop_lq(&spec, &sc, false).unwrap();
        for m in 0..2 {
            for i in 0..grid.len() {
                let avg = 0.3 * sol.populations[0].ybar[m][i] + 0.7 * sol.populations[1].ybar[m][i];
                assert!((sol.price[m][i] + avg).abs() <= 1e-12);
            }
        }
        assert!(sol.in_sample_imbalance() <= 1e-12);
    }

    #[test]
    fn heterogeneous_blowup_and_recovery() {
        let mut base = presets::blowup_1d();
        base.horizon = 2.0;
        let mut spec = MultiPopSpec::identical(&base, 2, Regime::ShortT);
        spec.populations[1].lambda = Mat::from_element(1, 1, 2.0);
        spec.populations[1].lq.k_l = Mat::from_element(1, 1, -0.5);
        let grid = spec.grid().unwrap();
        let sc = build_multipop_scenarios(&spec, &grid, 1, 2, 1, ScenarioOptions::default()).unwrap();
        let err = solve_multipop_lq(&spec, &sc, true).unwrap_err();
        let Error::RiccatiBlowUp { time, .. } = err else { panic!("{err:?}") };
        let mut short = spec.clone();
        short.horizon = (spec.horizon - time) * 0.5;
        let g = short.grid().unwrap();
        let sc = build_multipop_scenarios(&short, &g, 1, 2, 1, ScenarioOptions::default()).unwrap();
        assert!(solve_multipop_lq(&short, &sc, true).is_ok());
    }

    #[test]
    fn decoupled_population_mean() {
        // a population with no price feedback has a mean system that ignores the others
        let mut spec = two_pop(1.5, 0.5);
        spec.populations[1].lq.k_l = Mat::zeros(1, 1);
        spec.populations[1].lq.f_phi = Mat::zeros(1, 1);
        let sys = mean_system(&spec).unwrap();
        let li = 1.0 / 1.5;
        // row of population 1: −Λ⁻¹ȳ¹ + Λ⁻¹W v
        assert!((sys.b_v[(1, 0)] - li * 0.5).abs() < 1e-15);
        assert_eq!(sys.f_v[(1, 0)], 0.0);
        assert_eq!(sys.f_v[(1, 1)], 0.0);
    }

    #[test]
    fn probe_identical_populations() {
        let spec = MultiPopSpec::identical(&presets::general_1d(), 2, Regime::GeneralT);
        let r = multipop_probe(&spec, 200, 9).unwrap();
        assert_eq!(r.total_violations(), 0, "{r:?}");
    }
}
