//! Small reference models used by tests, benches and the example configs.

use crate::linalg::{Mat, Vector};
use crate::model::{InitialLaw, LqCoefficients, ModelSpec, PriceMap, TerminalMode};
use crate::stochastics::OuSpec;

fn s(v: f64) -> Mat {
    Mat::from_element(1, 1, v)
}

fn v1(v: f64) -> Vector {
    Vector::from_element(1, v)
}

fn ou1(kappa: f64, theta: f64, eta: f64, c: f64) -> OuSpec {
    OuSpec {
        kappa: v1(kappa),
        theta: v1(theta),
        eta: s(eta),
        c_init: v1(c),
    }
}

/// All coefficients zero, `Λ = I`, `T = 1`, `S = 100`, one driving Brownian motion each.
pub fn base(n: usize) -> ModelSpec {
    ModelSpec {
        n,
        d0: 1,
        d: 1,
        horizon: 1.0,
        steps: 100,
        lambda: Mat::identity(n, n),
        delta: 0.0,
        lq: LqCoefficients::zeros(n, 1, 1),
        psi: PriceMap::Identity,
        common_factor: OuSpec::constant(Vector::zeros(n), 1),
        idio_factor: OuSpec::constant(Vector::zeros(n), 1),
        initial_law: InitialLaw::point(Vector::zeros(n)),
        mode: TerminalMode::General,
    }
}

/// Scalar model with every coupling switched on and common noise.
pub fn general_1d() -> ModelSpec {
    let mut m = base(1);
    m.lambda = s(1.5);
    m.delta = 0.2;
    m.lq = LqCoefficients {
        k_l: s(0.8),
        l_c0: s(0.3),
        l_c: s(0.2),
        l_const: v1(0.1),
        q: s(1.0),
        f_phi: s(0.5),
        f_c0: s(0.4),
        f_c: s(0.3),
        f_const: v1(-0.2),
        p: s(0.5),
        g_c0: s(0.3),
        g_c: s(0.2),
        g_const: v1(0.1),
        sigma0: s(0.3),
        sigma: s(0.4),
    };
    m.common_factor = ou1(1.0, 0.5, 0.3, 0.2);
    m.idio_factor = ou1(2.0, 0.0, 0.5, 0.3);
    m.initial_law = InitialLaw {
        mean: v1(1.0),
        cov: s(0.25),
    };
    m
}

/// [`general_1d`] with the common noise switched off (deterministic price).
pub fn deterministic_1d() -> ModelSpec {
    let mut m = general_1d();
    m.lq.sigma0 = s(0.0);
    m.common_factor.eta = s(0.0);
    m
}

/// Stronger price feedback, no common noise.
pub fn deterministic_strong_1d() -> ModelSpec {
    let mut m = deterministic_1d();
    m.lq.k_l = s(1.5);
    m.lq.f_phi = s(0.8);
    m.lq.q = s(2.0);
    m.lq.p = s(1.0);
    m.delta = 0.4;
    m
}

/// Futures contract on the common factor: terminal payoff `−c⁰_T x`.
pub fn futures_1d() -> ModelSpec {
    let mut m = base(1);
    m.mode = TerminalMode::Futures;
    m.lq.k_l = s(0.5);
    m.lq.q = s(1.0);
    m.lq.f_phi = s(1.0);
    m.lq.l_c = s(0.2);
    m.lq.f_c = s(0.1);
    m.lq.g_c0 = s(-1.0);
    m.lq.sigma0 = s(0.2);
    m.lq.sigma = s(0.5);
    m.common_factor = ou1(0.5, 1.0, 0.3, 1.0);
    m.idio_factor = ou1(1.0, 0.0, 0.3, 0.0);
    m.initial_law = InitialLaw {
        mean: v1(0.0),
        cov: s(0.5),
    };
    m
}

/// [`futures_1d`] without common noise.
pub fn deterministic_futures_1d() -> ModelSpec {
    let mut m = futures_1d();
    m.lq.sigma0 = s(0.0);
    m.common_factor.eta = s(0.0);
    m
}

/// Two securities with cross effects.
pub fn general_2d() -> ModelSpec {
    let m2 = |a: [f64; 4]| Mat::from_row_slice(2, 2, &a);
    let mut m = base(2);
    m.d0 = 2;
    m.d = 2;
    m.lambda = m2([1.2, 0.2, 0.2, 0.9]);
    m.delta = 0.1;
    m.lq = LqCoefficients {
        k_l: m2([1.0, 0.1, 0.1, 0.8]),
        l_c0: m2([0.2, 0.0, 0.1, 0.3]),
        l_c: m2([0.1, 0.05, 0.0, 0.2]),
        l_const: Vector::from_vec(vec![0.05, -0.1]),
        q: m2([1.0, 0.2, 0.2, 0.8]),
        f_phi: m2([0.3, 0.0, 0.0, 0.3]),
        f_c0: m2([0.2, 0.1, 0.0, 0.2]),
        f_c: m2([0.1, 0.0, 0.05, 0.1]),
        f_const: Vector::from_vec(vec![0.1, 0.0]),
        p: m2([0.5, 0.1, 0.1, 0.4]),
        g_c0: m2([0.2, 0.0, 0.0, 0.1]),
        g_c: m2([0.1, 0.0, 0.0, 0.1]),
        g_const: Vector::from_vec(vec![0.0, 0.05]),
        sigma0: m2([0.2, 0.05, 0.0, 0.15]),
        sigma: m2([0.3, 0.0, 0.1, 0.25]),
    };
    m.common_factor = OuSpec {
        kappa: Vector::from_vec(vec![1.0, 0.5]),
        theta: Vector::from_vec(vec![0.3, -0.2]),
        eta: m2([0.2, 0.0, 0.05, 0.25]),
        c_init: Vector::from_vec(vec![0.1, 0.0]),
    };
    m.idio_factor = OuSpec {
        kappa: Vector::from_vec(vec![1.5, 0.0]),
        theta: Vector::from_vec(vec![0.0, 0.0]),
        eta: m2([0.3, 0.0, 0.0, 0.2]),
        c_init: Vector::from_vec(vec![0.2, -0.1]),
    };
    m.initial_law = InitialLaw {
        mean: Vector::from_vec(vec![0.5, -0.5]),
        cov: m2([0.2, 0.05, 0.05, 0.1]),
    };
    m
}

/// Saturating price map on the deterministic scalar model.
pub fn saturating_1d() -> ModelSpec {
    let mut m = deterministic_1d();
    m.lq.f_phi = s(0.2);
    m.psi = PriceMap::Saturating {
        scale: 1.0,
        slope: 1.0,
        range: 1.5,
    };
    m
}

/// OTC flow decreasing in the price: violates monotonicity.
pub fn adversarial_1d() -> ModelSpec {
    let mut m = general_1d();
    m.lq.k_l = s(-0.5);
    m
}

/// Mean-system Riccati that explodes about `π/4` before maturity when `T = 2`.
pub fn blowup_1d() -> ModelSpec {
    let mut m = base(1);
    m.horizon = 2.0;
    m.steps = 200;
    m.lq.k_l = s(-1.0);
    m.lq.q = s(1.0);
    m.lq.p = s(1.0);
    m
}

/// Validated identity-ψ models with `n ≤ 2`.
pub fn corpus() -> Vec<(&'static str, ModelSpec)> {
    vec![
        ("general_1d", general_1d()),
        ("deterministic_1d", deterministic_1d()),
        ("deterministic_strong_1d", deterministic_strong_1d()),
        ("futures_1d", futures_1d()),
        ("deterministic_futures_1d", deterministic_futures_1d()),
        ("general_2d", general_2d()),
    ]
}

/// Scalar identity-ψ models without common noise.
pub fn deterministic_corpus() -> Vec<(&'static str, ModelSpec)> {
    corpus()
        .into_iter()
        .filter(|(_, m)| m.n == 1 && !m.has_common_noise())
        .collect()
}
