//! Model specification, assumption checks, and the pointwise formulas
//! (optimal control, price rule, terminal condition, clearing rate).

use crate::error::{Error, Result};
use crate::linalg::{
    inverse, lambda_max, lambda_min, max_asymmetry, op_norm, require_pd, require_psd, Mat,
    Vector, PSD_TOL,
};
use crate::stochastics::{IdioSource, OuSpec, ScenarioLayout, TimeGrid};

/// Terminal-cost regime.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Default)]
pub enum TerminalMode {
    /// Penalized outstanding volume with mark-to-market discount `δ`.
    #[default]
    General,
    /// Terminal payoff `−⟨c⁰_T, x⟩`, `δ = 0`, no penalty on the outstanding volume.
    Futures,
}

impl TerminalMode {
    pub fn label(self) -> &'static str {
        match self {
            TerminalMode::General => "general-terminal",
            TerminalMode::Futures => "futures",
        }
    }
}

/// Affine coefficient blocks.
///
/// OTC flow: `l = K_l ψ(φ) + L_c0 c⁰ + L_c c + l_const`.
/// Marginal running cost: `∂ₓf = Q x + F_phi ψ(φ) + F_c0 c⁰ + F_c c + f_const`.
/// Marginal terminal cost: `∂ₓg = P x + G_c0 c⁰ + G_c c + g_const`.
#[derive(Debug, Clone, PartialEq)]
pub struct LqCoefficients {
    pub k_l: Mat,
    pub l_c0: Mat,
    pub l_c: Mat,
    pub l_const: Vector,
    pub q: Mat,
    pub f_phi: Mat,
    pub f_c0: Mat,
    pub f_c: Mat,
    pub f_const: Vector,
    pub p: Mat,
    pub g_c0: Mat,
    pub g_c: Mat,
    pub g_const: Vector,
    /// `n × d0`
    pub sigma0: Mat,
    /// `n × d`
    pub sigma: Mat,
}

impl LqCoefficients {
    /// All blocks zero.
    pub fn zeros(n: usize, d0: usize, d: usize) -> Self {
        let z = || Mat::zeros(n, n);
        Self {
            k_l: z(),
            l_c0: z(),
            l_c: z(),
            l_const: Vector::zeros(n),
            q: z(),
            f_phi: z(),
            f_c0: z(),
            f_c: z(),
            f_const: Vector::zeros(n),
            p: z(),
            g_c0: z(),
            g_c: z(),
            g_const: Vector::zeros(n),
            sigma0: Mat::zeros(n, d0),
            sigma: Mat::zeros(n, d),
        }
    }

    pub fn marginal_terminal_cost(&self, x: &Vector, c0: &Vector, c: &Vector) -> Vector {
        &self.p * x + &self.g_c0 * c0 + &self.g_c * c + &self.g_const
    }

    pub fn marginal_running_cost(&self, x: &Vector, psi_phi: &Vector, c0: &Vector, c: &Vector) -> Vector {
        &self.q * x + &self.f_phi * psi_phi + &self.f_c0 * c0 + &self.f_c * c + &self.f_const
    }

    pub fn otc_flow(&self, psi_phi: &Vector, c0: &Vector, c: &Vector) -> Vector {
        &self.k_l * psi_phi + &self.l_c0 * c0 + &self.l_c * c + &self.l_const
    }

    fn check_shapes(&self, n: usize, d0: usize, d: usize) -> Result<()> {
        let square = [
            ("K_l", &self.k_l),
            ("L_c0", &self.l_c0),
            ("L_c", &self.l_c),
            ("Q", &self.q),
            ("F_phi", &self.f_phi),
            ("F_c0", &self.f_c0),
            ("F_c", &self.f_c),
            ("P", &self.p),
            ("G_c0", &self.g_c0),
            ("G_c", &self.g_c),
        ];
        for (name, m) in square {
            if m.shape() != (n, n) {
                return Err(Error::InvalidModel(format!(
                    "{name} has shape {:?}, expected ({n}, {n})",
                    m.shape()
                )));
            }
        }
        for (name, v) in [
            ("l_const", &self.l_const),
            ("f_const", &self.f_const),
            ("g_const", &self.g_const),
        ] {
            if v.len() != n {
                return Err(Error::InvalidModel(format!(
                    "{name} has length {}, expected {n}",
                    v.len()
                )));
            }
        }
        if self.sigma0.shape() != (n, d0) {
            return Err(Error::InvalidModel(format!(
                "sigma0 has shape {:?}, expected ({n}, {d0})",
                self.sigma0.shape()
            )));
        }
        if self.sigma.shape() != (n, d) {
            return Err(Error::InvalidModel(format!(
                "sigma has shape {:?}, expected ({n}, {d})",
                self.sigma.shape()
            )));
        }
        Ok(())
    }

    fn lipschitz_bound(&self) -> f64 {
        [
            &self.k_l, &self.l_c0, &self.l_c, &self.q, &self.f_phi, &self.f_c0, &self.f_c,
            &self.p, &self.g_c0, &self.g_c,
        ]
        .iter()
        .map(|m| op_norm(m))
        .fold(0.0, f64::max)
    }
}

/// Componentwise monotone price map `ψ`.
#[derive(Debug, Clone, Copy, PartialEq, Default)]
pub enum PriceMap {
    #[default]
    Identity,
    /// `ψ(φ) = a·tanh(bφ/a)`; monotonicity is certified on `[−range, range]`.
    Saturating { scale: f64, slope: f64, range: f64 },
}

impl PriceMap {
    pub fn apply(&self, phi: f64) -> f64 {
        match *self {
            PriceMap::Identity => phi,
            PriceMap::Saturating { scale, slope, .. } => scale * (slope * phi / scale).tanh(),
        }
    }

    pub fn apply_vec(&self, phi: &Vector) -> Vector {
        phi.map(|v| self.apply(v))
    }

    pub fn derivative(&self, phi: f64) -> f64 {
        match *self {
            PriceMap::Identity => 1.0,
            PriceMap::Saturating { scale, slope, .. } => {
                let s = 1.0 / (slope * phi / scale).cosh();
                slope * s * s
            }
        }
    }

    pub fn lipschitz(&self) -> f64 {
        match *self {
            PriceMap::Identity => 1.0,
            PriceMap::Saturating { slope, .. } => slope,
        }
    }

    /// Smallest derivative over the certified range (global for identity).
    pub fn slope_lower_bound(&self) -> f64 {
        match *self {
            PriceMap::Identity => 1.0,
            PriceMap::Saturating { range, .. } => self.derivative(range),
        }
    }

    pub fn is_identity(&self) -> bool {
        matches!(self, PriceMap::Identity)
    }

    fn check(&self) -> Result<()> {
        if let PriceMap::Saturating { scale, slope, range } = *self {
            if !(scale > 0.0 && slope > 0.0 && range > 0.0)
                || !scale.is_finite()
                || !slope.is_finite()
                || !range.is_finite()
            {
                return Err(Error::InvalidModel(format!(
                    "saturating psi needs positive finite scale, slope and range \
                     (got {scale}, {slope}, {range})"
                )));
            }
        }
        Ok(())
    }
}

/// Gaussian law of the initial position.
#[derive(Debug, Clone, PartialEq)]
pub struct InitialLaw {
    pub mean: Vector,
    pub cov: Mat,
}

impl InitialLaw {
    pub fn point(mean: Vector) -> Self {
        let n = mean.len();
        Self {
            mean,
            cov: Mat::zeros(n, n),
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct ModelSpec {
    pub n: usize,
    pub d0: usize,
    pub d: usize,
    pub horizon: f64,
    pub steps: usize,
    pub lambda: Mat,
    pub delta: f64,
    pub lq: LqCoefficients,
    pub psi: PriceMap,
    pub common_factor: OuSpec,
    pub idio_factor: OuSpec,
    pub initial_law: InitialLaw,
    pub mode: TerminalMode,
}

impl ModelSpec {
    pub fn grid(&self) -> Result<TimeGrid> {
        TimeGrid::new(self.horizon, self.steps)
    }

    pub fn lambda_inv(&self) -> Result<Mat> {
        inverse("Lambda", &self.lambda)
    }

    /// `E[c_t]` of the idiosyncratic factor.
    pub fn idio_mean(&self, t: f64) -> Vector {
        self.idio_factor.mean_at(t)
    }

    pub fn has_common_noise(&self) -> bool {
        self.lq.sigma0.iter().any(|v| *v != 0.0) || !self.common_factor.is_deterministic()
    }

    pub fn has_idiosyncratic_noise(&self) -> bool {
        self.lq.sigma.iter().any(|v| *v != 0.0)
            || !self.idio_factor.is_deterministic()
            || self.initial_law.cov.iter().any(|v| *v != 0.0)
    }

    pub fn idio_source(&self) -> IdioSource {
        IdioSource {
            factor: self.idio_factor.clone(),
            initial_cov: self.initial_law.cov.clone(),
        }
    }

    pub fn scenario_layout(&self) -> ScenarioLayout {
        ScenarioLayout {
            n: self.n,
            common_factor: self.common_factor.clone(),
            populations: vec![self.idio_source()],
        }
    }

    /// Shape checks only; no spectral conditions.
    pub fn check_structure(&self) -> Result<()> {
        let (n, d0, d) = (self.n, self.d0, self.d);
        if n == 0 || d0 == 0 || d == 0 {
            return Err(Error::InvalidModel("n, d0 and d must be positive".into()));
        }
        self.grid()?;
        if self.lambda.shape() != (n, n) {
            return Err(Error::InvalidModel(format!(
                "Lambda has shape {:?}, expected ({n}, {n})",
                self.lambda.shape()
            )));
        }
        self.lq.check_shapes(n, d0, d)?;
        self.common_factor.check("common_factor", n, d0)?;
        self.idio_factor.check("idio_factor", n, d)?;
        if self.initial_law.mean.len() != n || self.initial_law.cov.shape() != (n, n) {
            return Err(Error::InvalidModel(format!(
                "initial_law needs a mean of length {n} and a {n}x{n} covariance"
            )));
        }
        self.psi.check()?;
        if !self.psi.is_identity() && n != 1 {
            return Err(Error::InvalidModel(
                "the saturating price map is only supported for n = 1".into(),
            ));
        }
        Ok(())
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum Verdict {
    /// The monotonicity constant is positive: unique solution on any horizon.
    SolvableGeneralT,
    /// Only the small-horizon guarantee applies.
    ShortTOnly,
}

impl Verdict {
    pub fn label(self) -> &'static str {
        match self {
            Verdict::SolvableGeneralT => "solvable-general-T",
            Verdict::ShortTOnly => "short-T-only",
        }
    }
}

#[derive(Debug, Clone, PartialEq)]
pub struct Check {
    pub name: &'static str,
    pub passed: bool,
    pub detail: String,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ValidationReport {
    pub mode: TerminalMode,
    pub lambda_min: f64,
    pub lambda_max: f64,
    pub gamma_l: f64,
    pub gamma_f: f64,
    pub gamma_g: f64,
    pub l_phi: f64,
    /// `γ^f − L_φ²/(4γ^l)`; `-inf` when `γ^l ≤ 0`.
    pub gamma_running: f64,
    /// The constant governing the verdict in the active mode.
    pub gamma: f64,
    /// Largest operator norm among the coefficient blocks.
    pub lipschitz: f64,
    pub range_local: bool,
    pub checks: Vec<Check>,
    pub verdict: Verdict,
    pub warnings: Vec<String>,
}

impl ValidationReport {
    pub fn is_general_t(&self) -> bool {
        self.verdict == Verdict::SolvableGeneralT
    }

    pub fn require_solvable(&self, allow_short_t: bool) -> Result<()> {
        if self.is_general_t() || allow_short_t {
            Ok(())
        } else {
            Err(Error::ValidationRefused(format!("gamma = {:.6e}", self.gamma)))
        }
    }

    pub fn render(&self) -> String {
        let tag = match self.mode {
            TerminalMode::General => "monotonicity (general terminal)",
            TerminalMode::Futures => "monotonicity (futures terminal)",
        };
        let mut s = String::new();
        s.push_str(&format!("mode            {}\n", self.mode.label()));
        s.push_str(&format!("lambda_min      {:.6e}\n", self.lambda_min));
        s.push_str(&format!("lambda_max      {:.6e}\n", self.lambda_max));
        s.push_str(&format!("gamma_l         {:.6e}\n", self.gamma_l));
        s.push_str(&format!("gamma_f         {:.6e}\n", self.gamma_f));
        s.push_str(&format!("gamma_g         {:.6e}\n", self.gamma_g));
        s.push_str(&format!("L_phi           {:.6e}\n", self.l_phi));
        s.push_str(&format!("lipschitz       {:.6e}\n", self.lipschitz));
        for c in &self.checks {
            s.push_str(&format!(
                "[{}] {:<14} {}\n",
                if c.passed { "pass" } else { "FAIL" },
                c.name,
                c.detail
            ));
        }
        s.push_str(&format!("{tag}: gamma = {}\n", self.gamma));
        if self.range_local {
            s.push_str("note: range-local monotonicity (saturating price map)\n");
        }
        for w in &self.warnings {
            s.push_str(&format!("warning: {w}\n"));
        }
        s.push_str(&format!("verdict: {}\n", self.verdict.label()));
        s
    }
}

/// Runs every standing-assumption check.
///
/// Hard errors: malformed shapes, `Λ` not symmetric positive definite, `Q`/`P`/`Σ_ξ`
/// not symmetric PSD, `δ ∉ [0,1)`, futures-mode constraints violated. A
/// nonpositive monotonicity constant only downgrades the verdict.
pub fn validate_model(spec: &ModelSpec) -> Result<ValidationReport> {
    spec.check_structure()?;
    if !(0.0..1.0).contains(&spec.delta) {
        return Err(Error::DeltaOutOfRange(spec.delta));
    }
    let lam_min = require_pd("Lambda", &spec.lambda)?;
    let lam_max = lambda_max(&spec.lambda);
    let gamma_f = require_psd("Q", &spec.lq.q)?;
    let gamma_g = require_psd("P", &spec.lq.p)?;
    require_psd("initial_law.cov", &spec.initial_law.cov)?;
    if spec.mode == TerminalMode::Futures {
        check_futures(spec)?;
    }

    let mut checks = vec![
        Check {
            name: "Lambda SPD",
            passed: true,
            detail: format!("eigenvalues in [{lam_min:.6e}, {lam_max:.6e}]"),
        },
        Check {
            name: "delta",
            passed: true,
            detail: format!("delta = {} in [0, 1)", spec.delta),
        },
        Check {
            name: "convexity",
            passed: true,
            detail: format!("Q, P symmetric PSD (gamma_f = {gamma_f:.6e}, gamma_g = {gamma_g:.6e})"),
        },
    ];

    let k_min = lambda_min(&spec.lq.k_l);
    let slope_factor = if k_min >= 0.0 {
        spec.psi.slope_lower_bound()
    } else {
        spec.psi.lipschitz()
    };
    let gamma_l = k_min * slope_factor;
    let l_phi = op_norm(&spec.lq.f_phi) * spec.psi.lipschitz();
    let monotone = gamma_l > PSD_TOL;
    checks.push(Check {
        name: "OTC monotone",
        passed: monotone,
        detail: format!("gamma_l = {gamma_l:.6e}"),
    });

    let gamma_running = if monotone {
        gamma_f - l_phi * l_phi / (4.0 * gamma_l)
    } else {
        f64::NEG_INFINITY
    };
    let gamma = match spec.mode {
        TerminalMode::General => gamma_running.min(gamma_g),
        TerminalMode::Futures => gamma_running,
    };
    let positive = monotone && gamma > 0.0;
    checks.push(Check {
        name: "gamma > 0",
        passed: positive,
        detail: match spec.mode {
            TerminalMode::General => "min(gamma_f - L_phi^2/(4 gamma_l), gamma_g)".into(),
            TerminalMode::Futures => "gamma_f - L_phi^2/(4 gamma_l)".into(),
        },
    });

    let mut warnings = Vec::new();
    if !positive {
        warnings.push(
            "monotonicity constant is not positive: only the short-horizon guarantee applies, \
             and no usable horizon bound is known"
                .to_string(),
        );
    }
    let asym = max_asymmetry(&spec.lq.k_l);
    if asym > 0.0 {
        warnings.push(format!(
            "K_l is not symmetric (asymmetry {asym:.3e}); monotonicity uses its symmetric part"
        ));
    }
    let range_local = !spec.psi.is_identity();
    if let PriceMap::Saturating { range, .. } = spec.psi {
        warnings.push(format!(
            "range-local monotonicity: psi slope bound certified on [-{range}, {range}] only"
        ));
    }

    Ok(ValidationReport {
        mode: spec.mode,
        lambda_min: lam_min,
        lambda_max: lam_max,
        gamma_l,
        gamma_f,
        gamma_g,
        l_phi,
        gamma_running,
        gamma,
        lipschitz: spec.lq.lipschitz_bound(),
        range_local,
        checks,
        verdict: if positive {
            Verdict::SolvableGeneralT
        } else {
            Verdict::ShortTOnly
        },
        warnings,
    })
}

fn check_futures(spec: &ModelSpec) -> Result<()> {
    let n = spec.n;
    let zero = |m: &Mat| m.iter().all(|v| *v == 0.0);
    let mut bad = Vec::new();
    if spec.delta != 0.0 {
        bad.push("delta = 0");
    }
    if !zero(&spec.lq.p) {
        bad.push("P = 0");
    }
    if !zero(&spec.lq.g_c) {
        bad.push("G_c = 0");
    }
    if spec.lq.g_const.iter().any(|v| *v != 0.0) {
        bad.push("g_const = 0");
    }
    if spec.lq.g_c0 != -Mat::identity(n, n) {
        bad.push("G_c0 = -I");
    }
    if bad.is_empty() {
        Ok(())
    } else {
        Err(Error::InvalidModel(format!(
            "futures mode requires {}",
            bad.join(", ")
        )))
    }
}

/// `α̂ = −Λ⁻¹(y + φ)`.
pub fn hamiltonian_minimizer(y: &Vector, phi: &Vector, lambda: &Mat) -> Result<Vector> {
    let lu = lambda.clone().lu();
    lu.solve(&(-(y + phi)))
        .ok_or_else(|| Error::Singular("Lambda".into()))
}

/// Single-population clearing price `φ = −E[Y | common noise]`.
pub fn equilibrium_price(ybar: &Vector) -> Vector {
    -ybar
}

/// `Y_T = δ/(1−δ)·E[∂ₓg | common noise] + ∂ₓg(x_T, c⁰_T, c_T)`.
pub fn terminal_condition(
    x_t: &Vector,
    c0_t: &Vector,
    c_t: &Vector,
    cond_mean_dg: &Vector,
    spec: &ModelSpec,
) -> Result<Vector> {
    if !(0.0..1.0).contains(&spec.delta) {
        return Err(Error::DeltaOutOfRange(spec.delta));
    }
    let dg = spec.lq.marginal_terminal_cost(x_t, c0_t, c_t);
    Ok(cond_mean_dg * (spec.delta / (1.0 - spec.delta)) + dg)
}

/// `ε_N = N^{−2/max(n,4)}·(1 + log N·1{n=4})`.
pub fn epsilon_n(n: usize, big_n: f64) -> f64 {
    let e = big_n.powf(-2.0 / n.max(4) as f64);
    if n == 4 {
        e * (1.0 + big_n.ln())
    } else {
        e
    }
}
