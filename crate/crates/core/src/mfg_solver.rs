//! Equilibrium solutions: the exact LQ route, the deterministic-price
//! fixed-point route for a nonlinear price map, and the monotonicity and
//! stability diagnostics.

use rand_distr::{Distribution, StandardNormal};

use crate::error::{Error, Result};
use crate::linalg::{sup_norm, Mat, Vector};
use crate::lq_affine::{self, check_grid, FluctuationSolution};
use crate::model::{validate_model, ModelSpec, PriceMap, ValidationReport};
use crate::stochastics::{stream_rng, IdioSource, ScenarioSet, StreamRole, TimeGrid};

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum SolveMode {
    Lq,
    NonlinearDeterministic,
    MultiPopLq,
}

impl SolveMode {
    pub fn label(self) -> &'static str {
        match self {
            SolveMode::Lq => "lq",
            SolveMode::NonlinearDeterministic => "nonlinear",
            SolveMode::MultiPopLq => "multipop-lq",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct SolverDiagnostics {
    pub iterations: usize,
    pub final_residual: f64,
    pub damping: f64,
    pub residuals: Vec<f64>,
}

impl SolverDiagnostics {
    /// Closed-form solve: no iterations.
    pub fn exact() -> Self {
        Self {
            iterations: 0,
            final_residual: 0.0,
            damping: 1.0,
            residuals: Vec::new(),
        }
    }
}

/// Node values of one copy, each flattened `(S+1) × n`.
#[derive(Debug, Clone, PartialEq)]
pub struct CopyPaths {
    pub x: Vec<f64>,
    pub y: Vec<f64>,
    pub alpha: Vec<f64>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct PopulationSolution {
    pub weight: f64,
    pub lambda: Mat,
    pub lambda_inv: Mat,
    pub source: IdioSource,
    pub fluctuation: FluctuationSolution,
    /// Per common path, `(S+1) × n`.
    pub xbar: Vec<Vec<f64>>,
    pub ybar: Vec<Vec<f64>>,
    /// Indexed `m * K + k`.
    pub copies: Vec<CopyPaths>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct EquilibriumSolution {
    pub grid: TimeGrid,
    pub n: usize,
    pub mode: SolveMode,
    pub master_seed: u64,
    pub common_paths: usize,
    pub copies_per_path: usize,
    /// Price path per common path, `(S+1) × n`.
    pub price: Vec<Vec<f64>>,
    pub populations: Vec<PopulationSolution>,
    pub diagnostics: SolverDiagnostics,
}

impl EquilibriumSolution {
    pub fn copy(&self, population: usize, m: usize, k: usize) -> &CopyPaths {
        &self.populations[population].copies[m * self.copies_per_path + k]
    }

    pub fn price_at(&self, m: usize, k: usize) -> &[f64] {
        &self.price[m][k * self.n..(k + 1) * self.n]
    }

    /// Largest `|Σ_p n_p · copy-average of α̂^p|` over nodes and common paths.
    pub fn in_sample_imbalance(&self) -> f64 {
        let n = self.n;
        let kk = self.copies_per_path;
        let mut worst = 0.0f64;
        for m in 0..self.common_paths {
            for k in 0..self.grid.len() {
                let mut acc = vec![0.0; n];
                for pop in &self.populations {
                    for c in &pop.copies[m * kk..(m + 1) * kk] {
                        for j in 0..n {
                            acc[j] += pop.weight * c.alpha[k * n + j] / kk as f64;
                        }
                    }
                }
                worst = worst.max(sup_norm(&acc));
            }
        }
        worst
    }
}

/// Exact LQ solve through the affine decomposition.
pub fn solve_lq(spec: &ModelSpec, scenarios: &ScenarioSet, allow_short_t: bool) -> Result<EquilibriumSolution> {
    let report = validate_model(spec)?;
    report.require_solvable(allow_short_t)?;
    let grid = spec.grid()?;
    check_grid(&grid, &scenarios.grid, "scenarios")?;
    let sol = lq_affine::solve_affine(spec, &grid)?;
    lq_affine::reconstruct_paths(spec, &grid, scenarios, &sol)
}

#[derive(Debug, Clone, Copy, PartialEq)]
pub struct SolverConfig {
    pub tol: f64,
    pub max_iter: usize,
    /// `φ ← (1−θ)φ_old + θ φ_new`
    pub damping: f64,
    /// Abort when the residual exceeds its value this many iterations earlier.
    pub guard_window: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        Self {
            tol: 1e-10,
            max_iter: 500,
            damping: 0.5,
            guard_window: 10,
        }
    }
}

impl SolverConfig {
    pub fn check(&self) -> Result<()> {
        if !(self.tol > 0.0) {
            return Err(Error::InvalidArgument(format!("tol must be positive, got {}", self.tol)));
        }
        if !(self.damping > 0.0 && self.damping <= 1.0) {
            return Err(Error::InvalidArgument(format!(
                "damping must lie in (0, 1], got {}",
                self.damping
            )));
        }
        if self.max_iter == 0 || self.guard_window == 0 {
            return Err(Error::InvalidArgument("max_iter and guard_window must be positive".into()));
        }
        Ok(())
    }
}

/// `∫_{t_0}^{t_k} f` at every node from node samples, fourth order.
///
/// Interior intervals integrate the cubic through the four surrounding nodes;
/// the two end intervals use the one-sided cubic.
pub fn cumulative_integral(f: &[f64], h: f64) -> Vec<f64> {
    let s = f.len() - 1;
    assert!(s >= 3, "need at least 3 intervals");
    let mut out = vec![0.0; s + 1];
    for k in 0..s {
        let seg = if k == 0 {
            9.0 * f[0] + 19.0 * f[1] - 5.0 * f[2] + f[3]
        } else if k == s - 1 {
            9.0 * f[s] + 19.0 * f[s - 1] - 5.0 * f[s - 2] + f[s - 3]
        } else {
            -f[k - 1] + 13.0 * f[k] + 13.0 * f[k + 1] - f[k + 2]
        };
        out[k + 1] = out[k] + seg * h / 24.0;
    }
    out
}

/// Deterministic mean system of a scalar model with no common noise.
struct ScalarMeanMap {
    h: f64,
    xi: f64,
    psi: PriceMap,
    k_l: f64,
    f_phi: f64,
    q: f64,
    /// `L_c0 c⁰ + L_c c̄ + l_const` at the nodes.
    drift_exo: Vec<f64>,
    /// `F_c0 c⁰ + F_c c̄ + f_const` at the nodes.
    cost_exo: Vec<f64>,
    p_scaled: f64,
    terminal_exo: f64,
}

impl ScalarMeanMap {
    fn new(spec: &ModelSpec, grid: &TimeGrid) -> Self {
        let lq = &spec.lq;
        let nodes = grid.nodes();
        let c0: Vec<f64> = nodes.iter().map(|&t| spec.common_factor.mean_at(t)[0]).collect();
        let cb: Vec<f64> = nodes.iter().map(|&t| spec.idio_mean(t)[0]).collect();
        let s = grid.steps;
        let scale = 1.0 / (1.0 - spec.delta);
        Self {
            h: grid.dt(),
            xi: spec.initial_law.mean[0],
            psi: spec.psi,
            k_l: lq.k_l[(0, 0)],
            f_phi: lq.f_phi[(0, 0)],
            q: lq.q[(0, 0)],
            drift_exo: (0..=s).map(|k| lq.l_c0[(0, 0)] * c0[k] + lq.l_c[(0, 0)] * cb[k] + lq.l_const[0]).collect(),
            cost_exo: (0..=s).map(|k| lq.f_c0[(0, 0)] * c0[k] + lq.f_c[(0, 0)] * cb[k] + lq.f_const[0]).collect(),
            p_scaled: lq.p[(0, 0)] * scale,
            terminal_exo: (lq.g_c0[(0, 0)] * c0[s] + lq.g_c[(0, 0)] * cb[s] + lq.g_const[0]) * scale,
        }
    }

    /// `(x̄, ȳ)` given the price path; `coupled = false` drops every price feedback.
    fn eval(&self, phi: &[f64], coupled: bool) -> (Vec<f64>, Vec<f64>) {
        let w = if coupled { 1.0 } else { 0.0 };
        let psi: Vec<f64> = phi.iter().map(|&p| w * self.psi.apply(p)).collect();
        let drift: Vec<f64> = psi.iter().zip(&self.drift_exo).map(|(p, e)| self.k_l * p + e).collect();
        let xbar: Vec<f64> = cumulative_integral(&drift, self.h).iter().map(|i| self.xi + i).collect();
        let cost: Vec<f64> = (0..phi.len())
            .map(|k| self.q * xbar[k] + self.f_phi * psi[k] + self.cost_exo[k])
            .collect();
        let ic = cumulative_integral(&cost, self.h);
        let s = phi.len() - 1;
        let yt = self.p_scaled * xbar[s] + self.terminal_exo;
        let ybar = (0..=s).map(|k| yt + (ic[s] - ic[k])).collect();
        (xbar, ybar)
    }
}

/// Damped fixed point on a deterministic price path (scalar model, no common noise).
///
/// Copies from `scenarios` are attached exactly as in the LQ route.
pub fn solve_nonlinear_deterministic(
    spec: &ModelSpec,
    scenarios: &ScenarioSet,
    config: &SolverConfig,
) -> Result<EquilibriumSolution> {
    config.check()?;
    validate_model(spec)?;
    if spec.n != 1 {
        return Err(Error::UnsupportedDimension(format!(
            "the fixed-point solver handles n = 1 only, got n = {}",
            spec.n
        )));
    }
    if spec.has_common_noise() {
        return Err(Error::InvalidModel(
            "the fixed-point solver requires sigma0 = 0 and a deterministic common factor".into(),
        ));
    }
    let grid = spec.grid()?;
    check_grid(&grid, &scenarios.grid, "scenarios")?;
    if grid.steps < 3 {
        return Err(Error::InvalidModel("the fixed-point solver needs at least 3 steps".into()));
    }
    let map = ScalarMeanMap::new(spec, &grid);
    let (_, y0) = map.eval(&vec![0.0; grid.len()], false);
    let mut phi: Vec<f64> = y0.iter().map(|y| -y).collect();
    let mut residuals = Vec::new();
    let theta = config.damping;
    let (xbar, ybar) = loop {
        let (xbar, ybar) = map.eval(&phi, true);
        let res = phi.iter().zip(&ybar).fold(0.0f64, |a, (p, y)| a.max((p + y).abs()));
        residuals.push(res);
        let it = residuals.len();
        if res <= config.tol {
            break (xbar, ybar);
        }
        if !res.is_finite()
            || (it > config.guard_window && res > residuals[it - 1 - config.guard_window])
        {
            return Err(Error::Diverged {
                iteration: it,
                residual: res,
                residuals,
            });
        }
        if it >= config.max_iter {
            return Err(Error::MaxIterExceeded {
                max_iter: config.max_iter,
                last: res,
                residuals,
            });
        }
        for (p, y) in phi.iter_mut().zip(&ybar) {
            *p = (1.0 - theta) * *p - theta * y;
        }
    };
    let price_path: Vec<f64> = ybar.iter().map(|y| -y).collect();
    let m_paths = scenarios.common_paths;
    let price = vec![price_path; m_paths];
    let fluct = lq_affine::solve_fluctuation_system(spec, &grid)?;
    let pop = lq_affine::reconstruct_population(
        &fluct,
        spec.idio_source(),
        &spec.lambda,
        1.0,
        vec![xbar; m_paths],
        vec![ybar; m_paths],
        &price,
        &scenarios.populations[0].paths,
        scenarios.copies,
    )?;
    Ok(EquilibriumSolution {
        grid,
        n: 1,
        mode: SolveMode::NonlinearDeterministic,
        master_seed: scenarios.master_seed,
        common_paths: m_paths,
        copies_per_path: scenarios.copies,
        price,
        populations: vec![pop],
        diagnostics: SolverDiagnostics {
            iterations: residuals.len(),
            final_residual: *residuals.last().unwrap_or(&0.0),
            damping: theta,
            residuals,
        },
    })
}

/// Positive stand-in for `γ^l` when the model has none, so that the probe
/// inequalities stay well defined (and expose the violation).
pub const GAMMA_L_FLOOR: f64 = 1e-3;

/// Slack below this counts as a violation.
pub const PROBE_TOLERANCE: f64 = 1e-9;

/// Sampled pairs `(x, x′, y, y′)` arranged in conditioning groups.
///
/// Row `i` of each matrix is one sample (length `n`); `group[i]` is its group.
#[derive(Debug, Clone)]
pub struct PairBatch {
    pub x: Vec<Vector>,
    pub x2: Vec<Vector>,
    pub y: Vec<Vector>,
    pub y2: Vec<Vector>,
    pub group: Vec<usize>,
    pub groups: usize,
}

impl PairBatch {
    fn group_means(&self, v: &[Vector]) -> Vec<Vector> {
        let n = v[0].len();
        let mut sums = vec![Vector::zeros(n); self.groups];
        let mut counts = vec![0usize; self.groups];
        for (vi, &g) in v.iter().zip(&self.group) {
            sums[g] += vi;
            counts[g] += 1;
        }
        sums.into_iter()
            .zip(counts)
            .map(|(s, c)| if c == 0 { s } else { s / c as f64 })
            .collect()
    }
}

/// Constants the three inequalities are checked against.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct ProbeConstants {
    pub gamma_l: f64,
    pub gamma_f: f64,
    pub l_phi: f64,
    pub gamma_terminal: f64,
}

impl ProbeConstants {
    pub fn from_report(r: &ValidationReport) -> Self {
        let gamma_terminal = if r.gamma.is_finite() {
            r.gamma.min(r.gamma_g)
        } else {
            r.gamma_g
        };
        Self {
            gamma_l: if r.gamma_l > 0.0 { r.gamma_l } else { GAMMA_L_FLOOR },
            gamma_f: r.gamma_f,
            l_phi: r.l_phi,
            gamma_terminal,
        }
    }
}

/// Slacks of the three monotonicity inequalities on one batch
/// (`≥ 0` means the inequality holds):
///
/// 1. `E⟨B(y)−B(y′),Δy⟩ ≤ −γ^l E|E[Δy|G]|²`
/// 2. `E⟨F(x,y)−F(x′,y′),Δx⟩ ≤ −(γ^f − L_φ²/(4γ^l)) E|Δx|² + γ^l E|E[Δy|G]|²`
/// 3. `E⟨G(x)−G(x′),Δx⟩ ≥ γ E|Δx|²`
///
/// with the price `φ = −E[y|G]` inside `B` and `F`.
pub fn probe_slacks(spec: &ModelSpec, lambda_inv: &Mat, c: &ProbeConstants, batch: &PairBatch) -> [f64; 3] {
    let lq = &spec.lq;
    let ybar = batch.group_means(&batch.y);
    let ybar2 = batch.group_means(&batch.y2);
    let xbar = batch.group_means(&batch.x);
    let xbar2 = batch.group_means(&batch.x2);
    let dscale = spec.delta / (1.0 - spec.delta);
    let count = batch.group.len() as f64;
    let (mut l1, mut l2, mut l3, mut dx2, mut dyc2) = (0.0, 0.0, 0.0, 0.0, 0.0);
    for i in 0..batch.group.len() {
        let g = batch.group[i];
        let psi = spec.psi.apply_vec(&(-&ybar[g]));
        let psi2 = spec.psi.apply_vec(&(-&ybar2[g]));
        let b1 = -(lambda_inv * (&batch.y[i] - &ybar[g])) + &lq.k_l * &psi;
        let b2 = -(lambda_inv * (&batch.y2[i] - &ybar2[g])) + &lq.k_l * &psi2;
        let dy = &batch.y[i] - &batch.y2[i];
        let dx = &batch.x[i] - &batch.x2[i];
        l1 += (b1 - b2).dot(&dy);
        let f1 = -(&lq.q * &batch.x[i] + &lq.f_phi * &psi);
        let f2 = -(&lq.q * &batch.x2[i] + &lq.f_phi * &psi2);
        l2 += (f1 - f2).dot(&dx);
        let g1 = &lq.p * &batch.x[i] + &lq.p * &xbar[g] * dscale;
        let g2 = &lq.p * &batch.x2[i] + &lq.p * &xbar2[g] * dscale;
        l3 += (g1 - g2).dot(&dx);
        dx2 += dx.norm_squared();
        dyc2 += (&ybar[g] - &ybar2[g]).norm_squared();
    }
    let (l1, l2, l3, dx2, dyc2) = (l1 / count, l2 / count, l3 / count, dx2 / count, dyc2 / count);
    let running = c.gamma_f - c.l_phi * c.l_phi / (4.0 * c.gamma_l);
    [
        -c.gamma_l * dyc2 - l1,
        -running * dx2 + c.gamma_l * dyc2 - l2,
        l3 - c.gamma_terminal * dx2,
    ]
}

#[derive(Debug, Clone, PartialEq)]
pub struct ProbeReport {
    pub trials: usize,
    pub violations: [usize; 3],
    pub worst_slack: [f64; 3],
    pub constants: ProbeConstants,
}

impl ProbeReport {
    pub fn total_violations(&self) -> usize {
        self.violations.iter().sum()
    }
}

/// Members per conditioning group in one probe trial.
const PROBE_GROUP_SIZE: usize = 8;

/// Draws `sample_count` batches of Gaussian pairs in two conditioning groups and
/// records the worst slack of each inequality.
///
/// Within-group draws are centered so the empirical conditional mean is the
/// group offset exactly. For a saturating price map the offsets stay inside
/// the certified price range.
pub fn monotonicity_probe(spec: &ModelSpec, sample_count: usize, seed: u64) -> Result<ProbeReport> {
    let report = validate_model(spec)?;
    let constants = ProbeConstants::from_report(&report);
    let lambda_inv = spec.lambda_inv()?;
    let n = spec.n;
    let groups = 2;
    let mut violations = [0usize; 3];
    let mut worst = [f64::INFINITY; 3];
    let offset_draw = |rng: &mut rand_chacha::ChaCha8Rng| -> Vector {
        Vector::from_fn(n, |_, _| {
            let z: f64 = StandardNormal.sample(rng);
            match spec.psi {
                PriceMap::Identity => z,
                PriceMap::Saturating { range, .. } => 0.9 * range * z.tanh(),
            }
        })
    };
    for trial in 0..sample_count {
        let mut rng = stream_rng(seed, StreamRole::Probe, 0, trial);
        let mut batch = PairBatch {
            x: Vec::new(),
            x2: Vec::new(),
            y: Vec::new(),
            y2: Vec::new(),
            group: Vec::new(),
            groups,
        };
        for g in 0..groups {
            let ox = offset_draw(&mut rng);
            let ox2 = offset_draw(&mut rng);
            let oy = offset_draw(&mut rng);
            let oy2 = offset_draw(&mut rng);
            let mut within: [Vec<Vector>; 4] = Default::default();
            for w in within.iter_mut() {
                let draws: Vec<Vector> = (0..PROBE_GROUP_SIZE)
                    .map(|_| Vector::from_fn(n, |_, _| StandardNormal.sample(&mut rng)))
                    .collect();
                let mean = draws.iter().fold(Vector::zeros(n), |a, d| a + d) / PROBE_GROUP_SIZE as f64;
                *w = draws.into_iter().map(|d| d - &mean).collect();
            }
            for i in 0..PROBE_GROUP_SIZE {
                batch.x.push(&ox + &within[0][i]);
                batch.x2.push(&ox2 + &within[1][i]);
                batch.y.push(&oy + &within[2][i]);
                batch.y2.push(&oy2 + &within[3][i]);
                batch.group.push(g);
            }
        }
        let slacks = probe_slacks(spec, &lambda_inv, &constants, &batch);
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

/// Inputs perturbed by the stability probe.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Perturbed {
    InitialMean,
    LConst,
    FConst,
    GConst,
    Sigma0,
}

impl Perturbed {
    pub const ALL: [Perturbed; 5] = [
        Perturbed::InitialMean,
        Perturbed::LConst,
        Perturbed::FConst,
        Perturbed::GConst,
        Perturbed::Sigma0,
    ];

    pub fn label(self) -> &'static str {
        match self {
            Perturbed::InitialMean => "xi_mean",
            Perturbed::LConst => "l_const",
            Perturbed::FConst => "f_const",
            Perturbed::GConst => "g_const",
            Perturbed::Sigma0 => "sigma0",
        }
    }

    /// Perturbed copy of `spec` and the squared size of the input change.
    pub fn apply(self, spec: &ModelSpec, s: f64) -> (ModelSpec, f64) {
        let mut out = spec.clone();
        let n = spec.n;
        let unit = Vector::from_element(n, s / (n as f64).sqrt());
        let t = spec.horizon;
        let size = match self {
            Perturbed::InitialMean => {
                out.initial_law.mean += &unit;
                s * s
            }
            Perturbed::LConst => {
                out.lq.l_const += &unit;
                t * s * s
            }
            Perturbed::FConst => {
                out.lq.f_const += &unit;
                t * s * s
            }
            Perturbed::GConst => {
                out.lq.g_const += &unit;
                let k = 1.0 / (1.0 - spec.delta);
                k * k * s * s
            }
            Perturbed::Sigma0 => {
                let cells = (n * spec.d0) as f64;
                out.lq.sigma0.add_scalar_mut(s / cells.sqrt());
                t * s * s
            }
        };
        (out, size)
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityRow {
    pub input: Perturbed,
    pub scale: f64,
    pub distance_sq: f64,
    pub input_size: f64,
    pub ratio: f64,
}

#[derive(Debug, Clone, PartialEq)]
pub struct StabilityReport {
    pub rows: Vec<StabilityRow>,
}

impl StabilityReport {
    /// `max r / min r` across scales for one perturbed input.
    pub fn spread(&self, input: Perturbed) -> f64 {
        let r: Vec<f64> = self
            .rows
            .iter()
            .filter(|row| row.input == input && row.ratio.is_finite())
            .map(|row| row.ratio)
            .collect();
        let hi = r.iter().cloned().fold(f64::NEG_INFINITY, f64::max);
        let lo = r.iter().cloned().fold(f64::INFINITY, f64::min);
        hi / lo
    }
}

/// `E[sup_t |ΔX_t|² + sup_t |ΔY_t|²]` over all copies of two solutions on the same scenarios.
pub fn solution_distance_sq(a: &EquilibriumSolution, b: &EquilibriumSolution) -> f64 {
    let n = a.n;
    let mut acc = Vec::new();
    for (pa, pb) in a.populations.iter().zip(&b.populations) {
        for (ca, cb) in pa.copies.iter().zip(&pb.copies) {
            let sup = |u: &[f64], v: &[f64]| {
                (0..a.grid.len())
                    .map(|k| (0..n).map(|j| (u[k * n + j] - v[k * n + j]).powi(2)).sum::<f64>())
                    .fold(0.0f64, f64::max)
            };
            acc.push(sup(&ca.x, &cb.x) + sup(&ca.y, &cb.y));
        }
    }
    crate::linalg::pairwise_sum(&acc) / acc.len() as f64
}

/// Solves the base and every perturbed model on the same scenarios and
/// reports `r(s) = distance² / input size`.
pub fn stability_probe(
    spec: &ModelSpec,
    scales: &[f64],
    scenarios: &ScenarioSet,
    allow_short_t: bool,
) -> Result<StabilityReport> {
    let base = solve_lq(spec, scenarios, allow_short_t)?;
    let mut rows = Vec::new();
    for input in Perturbed::ALL {
        for &s in scales {
            let (pert, size) = input.apply(spec, s);
            let sol = solve_lq(&pert, scenarios, allow_short_t)?;
            let dist = solution_distance_sq(&base, &sol);
            rows.push(StabilityRow {
                input,
                scale: s,
                distance_sq: dist,
                input_size: size,
                ratio: if size > 0.0 { dist / size } else { f64::NAN },
            });
        }
    }
    Ok(StabilityReport { rows })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::presets;
    use crate::stochastics::{build_scenarios, ScenarioOptions};

    fn scen(spec: &ModelSpec, m: usize, k: usize) -> ScenarioSet {
        build_scenarios(spec, &spec.grid().unwrap(), m, k, 17, ScenarioOptions::default()).unwrap()
    }

    #[test]
    fn quadrature_is_exact_on_cubics() {
        let h = 0.1;
        let f: Vec<f64> = (0..=10).map(|k| {
            let t = k as f64 * h;
            1.0 - 2.0 * t + 3.0 * t * t - t * t * t
        }).collect();
        let i = cumulative_integral(&f, h);
        for k in 0..=10 {
            let t = k as f64 * h;
            let exact = t - t * t + t * t * t - 0.25 * t.powi(4);
            assert!((i[k] - exact).abs() < 1e-14, "k = {k}");
        }
    }

    #[test]
    fn futures_pins_price_to_payoff() {
        let spec = presets::futures_1d();
        let sc = scen(&spec, 4, 3);
        let sol = solve_lq(&spec, &sc, false).unwrap();
        let s = spec.steps;
        for m in 0..4 {
            assert_eq!(sol.price_at(m, s)[0], sc.common[m].c0[s]);
        }
    }

    #[test]
    fn no_common_noise_gives_identical_prices() {
        let spec = presets::deterministic_1d();
        let sol = solve_lq(&spec, &scen(&spec, 3, 2), false).unwrap();
        assert_eq!(sol.price[0], sol.price[1]);
        assert_eq!(sol.price[1], sol.price[2]);
    }

    #[test]
    fn lq_clears_in_sample() {
        let spec = presets::general_2d();
        let sol = solve_lq(&spec, &scen(&spec, 3, 6), false).unwrap();
        assert!(sol.in_sample_imbalance() <= 1e-12);
        assert_eq!(sol.diagnostics.iterations, 0);
    }

    #[test]
    fn short_t_refused_without_override() {
        let spec = presets::adversarial_1d();
        let sc = scen(&spec, 1, 2);
        assert!(matches!(solve_lq(&spec, &sc, false), Err(Error::ValidationRefused(_))));
        assert!(solve_lq(&spec, &sc, true).is_ok());
    }

    #[test]
    fn nonlinear_matches_lq_for_identity() {
        let spec = presets::deterministic_1d();
        let sc = scen(&spec, 1, 2);
        let a = solve_lq(&spec, &sc, false).unwrap();
        let b = solve_nonlinear_deterministic(&spec, &sc, &SolverConfig::default()).unwrap();
        let gap = a.price[0].iter().zip(&b.price[0]).fold(0.0f64, |g, (u, v)| g.max((u - v).abs()));
        assert!(gap < 1e-8, "gap {gap}");
        assert!(b.in_sample_imbalance() <= 1e-10);
    }

    #[test]
    fn decoupled_converges_in_one_iteration() {
        let mut spec = presets::deterministic_1d();
        spec.lq.k_l[(0, 0)] = 0.0;
        spec.lq.f_phi[(0, 0)] = 0.0;
        let sc = scen(&spec, 1, 2);
        let b = solve_nonlinear_deterministic(&spec, &sc, &SolverConfig::default()).unwrap();
        assert_eq!(b.diagnostics.iterations, 1);
    }

    #[test]
    fn saturating_residuals_decrease() {
        let spec = presets::saturating_1d();
        let sc = scen(&spec, 1, 2);
        let b = solve_nonlinear_deterministic(&spec, &sc, &SolverConfig::default()).unwrap();
        let r = &b.diagnostics.residuals;
        assert!(r.len() > 2);
        assert!(r.windows(2).all(|w| w[1] < w[0]));
    }

    #[test]
    fn max_iter_carries_history() {
        let spec = presets::saturating_1d();
        let sc = scen(&spec, 1, 2);
        let cfg = SolverConfig {
            max_iter: 3,
            ..SolverConfig::default()
        };
        match solve_nonlinear_deterministic(&spec, &sc, &cfg) {
            Err(Error::MaxIterExceeded { residuals, .. }) => assert_eq!(residuals.len(), 3),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn common_noise_rejected_by_fixed_point() {
        let spec = presets::general_1d();
        let sc = scen(&spec, 1, 2);
        assert!(solve_nonlinear_deterministic(&spec, &sc, &SolverConfig::default()).is_err());
    }

    #[test]
    fn bad_config_rejected() {
        let bad = SolverConfig {
            damping: 0.0,
            ..SolverConfig::default()
        };
        assert!(bad.check().is_err());
    }

    #[test]
    fn probe_zero_difference_is_tight() {
        let spec = presets::general_1d();
        let r = validate_model(&spec).unwrap();
        let c = ProbeConstants::from_report(&r);
        let v = Vector::from_element(1, 0.4);
        let batch = PairBatch {
            x: vec![v.clone(); 2],
            x2: vec![v.clone(); 2],
            y: vec![v.clone(); 2],
            y2: vec![v.clone(); 2],
            group: vec![0, 1],
            groups: 2,
        };
        let s = probe_slacks(&spec, &spec.lambda_inv().unwrap(), &c, &batch);
        assert_eq!(s, [0.0, 0.0, 0.0]);
    }

    #[test]
    fn probe_passes_on_validated_and_flags_adversarial() {
        for spec in [presets::general_1d(), presets::general_2d(), presets::futures_1d(), presets::saturating_1d()] {
            let r = monotonicity_probe(&spec, 200, 3).unwrap();
            assert_eq!(r.total_violations(), 0, "{r:?}");
        }
        let r = monotonicity_probe(&presets::adversarial_1d(), 200, 3).unwrap();
        assert!(r.violations[0] > 0);
    }

    #[test]
    fn stability_ratio_is_flat() {
        let spec = presets::general_1d();
        let sc = scen(&spec, 4, 4);
        let rep = stability_probe(&spec, &[1e-3, 1e-2, 1e-1], &sc, false).unwrap();
        for input in Perturbed::ALL {
            assert!(rep.spread(input) <= 1.5, "{input:?}: {}", rep.spread(input));
        }
        let base = solve_lq(&spec, &sc, false).unwrap();
        assert_eq!(solution_distance_sq(&base, &base), 0.0);
    }
}
