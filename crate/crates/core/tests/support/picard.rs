//! Brute-force oracle for the conditional-mean coefficients.
//!
//! Conditioning on `x̄_{t_k} = x`, `c⁰_{t_k} = c`, the expectations of the
//! mean pair solve a deterministic two-point boundary problem. It is discretized
//! by the trapezoid rule on a refined grid and solved by damped Picard
//! iteration on the backward component; two refinements are combined by
//! Richardson extrapolation. The coefficients follow from three basis inputs:
//! `v(0, 0) = β0`, `v(e_i, 0) − β0 = Ā e_i`, `v(0, e_j) − β0 = β e_j`.

#![allow(dead_code)]

use mfclear_core::{Mat, ModelSpec, Vector};

pub struct OracleCoefficients {
    pub abar: Mat,
    pub beta: Mat,
    pub beta0: Vector,
}

pub struct PicardOutcome {
    pub v0: Vector,
    pub iterations: usize,
}

fn ou_mean(kappa: &Vector, theta: &Vector, start: &Vector, dt: f64) -> Vector {
    Vector::from_fn(kappa.len(), |i, _| theta[i] + (-kappa[i] * dt).exp() * (start[i] - theta[i]))
}

/// `v` at time `t0` for `x̄_{t0} = x`, `c⁰_{t0} = c`, on `steps` trapezoid steps to `T`.
pub fn conditional_v0(spec: &ModelSpec, t0: f64, x: &Vector, c: &Vector, steps: usize, tol: f64) -> PicardOutcome {
    let n = spec.n;
    let lq = &spec.lq;
    let h = (spec.horizon - t0) / steps as f64;
    let times: Vec<f64> = (0..=steps).map(|j| t0 + h * j as f64).collect();
    let cf = &spec.common_factor;
    let c0: Vec<Vector> = times.iter().map(|t| ou_mean(&cf.kappa, &cf.theta, c, t - t0)).collect();
    let idio = &spec.idio_factor;
    let cbar: Vec<Vector> = times.iter().map(|t| ou_mean(&idio.kappa, &idio.theta, &idio.c_init, *t)).collect();
    // with φ = −v: du = (−K_l v + L_c0 c⁰ + L_c c̄ + l) dt, dv = −(Q u − F_phi v + F_c0 c⁰ + F_c c̄ + f) dt
    let drift_u = |v: &Vector, j: usize| -> Vector { -(&lq.k_l * v) + &lq.l_c0 * &c0[j] + &lq.l_c * &cbar[j] + &lq.l_const };
    let rest_v = |u: &Vector, j: usize| -> Vector { &lq.q * u + &lq.f_c0 * &c0[j] + &lq.f_c * &cbar[j] + &lq.f_const };
    let scale = 1.0 / (1.0 - spec.delta);
    let implicit = (Mat::identity(n, n) + &lq.f_phi * (0.5 * h))
        .try_inverse()
        .expect("invertible trapezoid step");
    let mut v = vec![Vector::zeros(n); steps + 1];
    let mut u = vec![Vector::zeros(n); steps + 1];
    let damping = 0.5;
    for it in 1..=100_000 {
        u[0] = x.clone();
        for j in 0..steps {
            u[j + 1] = &u[j] + (drift_u(&v[j], j) + drift_u(&v[j + 1], j + 1)) * (0.5 * h);
        }
        let mut fresh = vec![Vector::zeros(n); steps + 1];
        fresh[steps] = (&lq.p * &u[steps] + &lq.g_c0 * &c0[steps] + &lq.g_c * &cbar[steps] + &lq.g_const) * scale;
        for j in (0..steps).rev() {
            // v_j = v_{j+1} + h/2 (G_j + G_{j+1}), G = rest − F_phi v
            let g1 = rest_v(&u[j + 1], j + 1) - &lq.f_phi * &fresh[j + 1];
            let rhs = &fresh[j + 1] + (rest_v(&u[j], j) + g1) * (0.5 * h);
            fresh[j] = &implicit * rhs;
        }
        let mut change = 0.0f64;
        for j in 0..=steps {
            let next = &v[j] * (1.0 - damping) + &fresh[j] * damping;
            change = change.max((&next - &v[j]).amax());
            v[j] = next;
        }
        if change <= tol {
            return PicardOutcome { v0: v[0].clone(), iterations: it };
        }
    }
    panic!("Picard iteration did not converge");
}

/// Richardson-extrapolated `v(t0)` from `sub` and `2·sub` steps per grid step.
pub fn extrapolated_v0(spec: &ModelSpec, k: usize, x: &Vector, c: &Vector, sub: usize, tol: f64) -> Vector {
    let grid = spec.grid().unwrap();
    let t0 = grid.node(k);
    let remaining = spec.steps - k;
    if remaining == 0 {
        let lq = &spec.lq;
        let cbar_t = ou_mean(&spec.idio_factor.kappa, &spec.idio_factor.theta, &spec.idio_factor.c_init, spec.horizon);
        return (&lq.p * x + &lq.g_c0 * c + &lq.g_c * cbar_t + &lq.g_const) / (1.0 - spec.delta);
    }
    let coarse = conditional_v0(spec, t0, x, c, remaining * sub, tol).v0;
    let fine = conditional_v0(spec, t0, x, c, remaining * 2 * sub, tol).v0;
    (&fine * 4.0 - coarse) / 3.0
}

pub fn oracle_coefficients(spec: &ModelSpec, k: usize, sub: usize, tol: f64) -> OracleCoefficients {
    let n = spec.n;
    let zero = Vector::zeros(n);
    let beta0 = extrapolated_v0(spec, k, &zero, &zero, sub, tol);
    let mut abar = Mat::zeros(n, n);
    let mut beta = Mat::zeros(n, n);
    for i in 0..n {
        let e = Vector::from_fn(n, |r, _| if r == i { 1.0 } else { 0.0 });
        abar.set_column(i, &(extrapolated_v0(spec, k, &e, &zero, sub, tol) - &beta0));
        beta.set_column(i, &(extrapolated_v0(spec, k, &zero, &e, sub, tol) - &beta0));
    }
    OracleCoefficients { abar, beta, beta0 }
}
