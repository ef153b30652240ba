//! Exact solution machinery for the LQ model with identity price map.
//!
//! The state splits into a conditional mean given the common noise and a
//! fluctuation around it. The fluctuation pair satisfies a price-free affine
//! FBSDE decoupled by `Ỹ = A X̃ + β̃ c̃`; the mean pair is decoupled by
//! `ȳ = Ā x̄ + β c⁰ + β0`. Both coefficient sets solve backward ODEs,
//! integrated here by classical RK4 on the simulation grid.
//!
//! Forward recursions use precomputed per-step affine maps built from the same
//! RK4 scheme, with coefficient midpoints from cubic Hermite interpolation and
//! factor midpoints from the Ornstein-Uhlenbeck bridge mean.

use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{inverse, mv_add, Mat, Vector};
use crate::mfg_solver::{CopyPaths, EquilibriumSolution, PopulationSolution, SolveMode, SolverDiagnostics};
use crate::model::{ModelSpec, TerminalMode};
use crate::stochastics::{CommonPath, IdioPath, IdioSource, OuSpec, ScenarioSet, TimeGrid};

pub const DEFAULT_BLOWUP_BOUND: f64 = 1e8;

/// Values and time derivatives of a backward ODE solution on the grid nodes.
#[derive(Debug, Clone, PartialEq)]
pub struct NodeSeries {
    pub values: Vec<Mat>,
    pub derivs: Vec<Mat>,
}

impl NodeSeries {
    /// Cubic Hermite value at the midpoint of `[t_k, t_{k+1}]`.
    pub fn midpoint(&self, k: usize, h: f64) -> Mat {
        (&self.values[k] + &self.values[k + 1]) * 0.5
            + (&self.derivs[k] - &self.derivs[k + 1]) * (h / 8.0)
    }
}

/// Integrates `y' = rhs(t, y)` backward from `y(T) = terminal` with RK4.
///
/// Fails at the first node (counting back from `T`) where an entry leaves
/// `[−bound, bound]` or stops being finite.
pub fn integrate_backward<F>(
    grid: &TimeGrid,
    terminal: Mat,
    rhs: F,
    bound: f64,
    system: &'static str,
) -> Result<NodeSeries>
where
    F: Fn(f64, &Mat) -> Mat,
{
    let s = grid.steps;
    let h = grid.dt();
    let check = |k: usize, y: &Mat| -> Result<()> {
        let magnitude = y.iter().fold(0.0f64, |a, v| if v.is_finite() { a.max(v.abs()) } else { f64::INFINITY });
        if magnitude > bound {
            return Err(Error::RiccatiBlowUp {
                system,
                node: k,
                time: grid.node(k),
                magnitude,
                bound,
            });
        }
        Ok(())
    };
    check(s, &terminal)?;
    let mut values = vec![Mat::zeros(0, 0); s + 1];
    let mut derivs = vec![Mat::zeros(0, 0); s + 1];
    derivs[s] = rhs(grid.node(s), &terminal);
    values[s] = terminal;
    for k in (0..s).rev() {
        let t1 = grid.node(k + 1);
        let tm = t1 - 0.5 * h;
        let t0 = grid.node(k);
        let y = &values[k + 1];
        let k1 = &derivs[k + 1];
        let k2 = rhs(tm, &(y - k1 * (0.5 * h)));
        let k3 = rhs(tm, &(y - &k2 * (0.5 * h)));
        let k4 = rhs(t0, &(y - &k3 * h));
        let next = y - (k1 + &k2 * 2.0 + &k3 * 2.0 + &k4) * (h / 6.0);
        check(k, &next)?;
        derivs[k] = rhs(t0, &next);
        values[k] = next;
    }
    Ok(NodeSeries { values, derivs })
}

/// One step of a linear recursion
/// `x_{k+1} = R x_k + S z_k + U z_{k+1} + konst + noise · ΔW_k`.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineStep {
    pub r: Mat,
    pub s: Mat,
    pub u: Mat,
    pub konst: Vector,
    pub noise: Mat,
}

impl AffineStep {
    #[inline]
    pub fn apply(&self, x: &[f64], za: &[f64], zb: &[f64], dw: &[f64], out: &mut [f64]) {
        out.copy_from_slice(self.konst.as_slice());
        mv_add(&self.r, x, out);
        mv_add(&self.s, za, out);
        mv_add(&self.u, zb, out);
        mv_add(&self.noise, dw, out);
    }
}

/// Coefficients of `x' = M(t) x + N(t) z(t) + e(t)` at `t_k`, the midpoint and `t_{k+1}`.
struct LinearStepInput<'a> {
    h: f64,
    m: [&'a Mat; 3],
    n: [&'a Mat; 3],
    e: [&'a Vector; 3],
    /// Midpoint input `z_mid = wa z_k + wb z_{k+1} + zc`.
    wa: &'a Mat,
    wb: &'a Mat,
    zc: &'a Vector,
    sigma: &'a Mat,
}

fn build_step(inp: &LinearStepInput) -> AffineStep {
    let dim = inp.m[0].nrows();
    let h = inp.h;
    let [m0, mh, m1] = inp.m;
    let rk4 = |x: &Mat, g0: &Mat, gh: &Mat, g1: &Mat| -> Mat {
        let k1 = m0 * x + g0;
        let k2 = mh * (x + &k1 * (0.5 * h)) + gh;
        let k3 = mh * (x + &k2 * (0.5 * h)) + gh;
        let k4 = m1 * (x + &k3 * h) + g1;
        x + (k1 + k2 * 2.0 + k3 * 2.0 + k4) * (h / 6.0)
    };
    let id = Mat::identity(dim, dim);
    let zero = Mat::zeros(dim, dim);
    let r = rk4(&id, &zero, &zero, &zero);
    let g0 = rk4(&zero, &id, &zero, &zero);
    let gh = rk4(&zero, &zero, &id, &zero);
    let g1 = rk4(&zero, &zero, &zero, &id);
    let [n0, nh, n1] = inp.n;
    let s = &g0 * n0 + &gh * nh * inp.wa;
    let u = &gh * nh * inp.wb + &g1 * n1;
    let konst = &g0 * inp.e[0] + &gh * (nh * inp.zc + inp.e[1]) + &g1 * inp.e[2];
    let noise = (&id + &r) * 0.5 * inp.sigma;
    AffineStep { r, s, u, konst, noise }
}

/// Fluctuation coefficients `A` (feedback on `X̃`) and `β̃` (loading on `c̃`).
#[derive(Debug, Clone, PartialEq)]
pub struct FluctuationSolution {
    pub grid: TimeGrid,
    pub n: usize,
    pub a: Vec<Mat>,
    pub beta_tilde: Vec<Mat>,
    pub series: NodeSeries,
    /// `E[c_t]` at the nodes, flattened `(S+1) × n`.
    pub cbar: Vec<f64>,
    pub steps: Vec<AffineStep>,
    /// Flat per-step `[konst, r, s, u, noise]` and per-node `[a, β̃]` when `n = d = 1`.
    scalar: Option<ScalarCoefficients>,
}

type ScalarCoefficients = (Vec<[f64; 5]>, Vec<[f64; 2]>);

/// Solves `A' = AΛ⁻¹A − Q`, `A_T = P` and
/// `β̃' = AΛ⁻¹β̃ − A L_c + β̃κ − F_c`, `β̃_T = G_c`.
pub fn solve_fluctuation_system(spec: &ModelSpec, grid: &TimeGrid) -> Result<FluctuationSolution> {
    solve_fluctuation_system_bounded(spec, grid, DEFAULT_BLOWUP_BOUND)
}

pub fn solve_fluctuation_system_bounded(
    spec: &ModelSpec,
    grid: &TimeGrid,
    bound: f64,
) -> Result<FluctuationSolution> {
    let n = spec.n;
    let lam_inv = spec.lambda_inv()?;
    let lq = &spec.lq;
    let kappa = Mat::from_diagonal(&spec.idio_factor.kappa);
    let mut terminal = Mat::zeros(n, 2 * n);
    terminal.view_mut((0, 0), (n, n)).copy_from(&lq.p);
    terminal.view_mut((0, n), (n, n)).copy_from(&lq.g_c);
    let rhs = |_t: f64, y: &Mat| -> Mat {
        let a = y.columns(0, n);
        let bt = y.columns(n, n);
        let al = a * &lam_inv;
        let mut out = Mat::zeros(n, 2 * n);
        out.view_mut((0, 0), (n, n)).copy_from(&(&al * a - &lq.q));
        out.view_mut((0, n), (n, n))
            .copy_from(&(&al * bt - a * &lq.l_c + bt * &kappa - &lq.f_c));
        out
    };
    let series = integrate_backward(grid, terminal, rhs, bound, "fluctuation")?;
    let a: Vec<Mat> = series.values.iter().map(|y| y.columns(0, n).into_owned()).collect();
    let beta_tilde: Vec<Mat> = series.values.iter().map(|y| y.columns(n, n).into_owned()).collect();

    let h = grid.dt();
    let w = Mat::from_diagonal(&spec.idio_factor.bridge_midpoint_weights(h));
    let zc = Vector::zeros(n);
    let e = Vector::zeros(n);
    let drift = |am: &Mat| -> Mat { -(&lam_inv * am) };
    let input = |bm: &Mat| -> Mat { -(&lam_inv * bm) + &lq.l_c };
    let steps: Vec<AffineStep> = (0..grid.steps)
        .map(|k| {
            let mid = series.midpoint(k, h);
            let (am, bm) = (mid.columns(0, n).into_owned(), mid.columns(n, n).into_owned());
            let m = [drift(&a[k]), drift(&am), drift(&a[k + 1])];
            let nn = [input(&beta_tilde[k]), input(&bm), input(&beta_tilde[k + 1])];
            build_step(&LinearStepInput {
                h,
                m: [&m[0], &m[1], &m[2]],
                n: [&nn[0], &nn[1], &nn[2]],
                e: [&e, &e, &e],
                wa: &w,
                wb: &w,
                zc: &zc,
                sigma: &lq.sigma,
            })
        })
        .collect();
    let cbar = (0..=grid.steps)
        .flat_map(|k| spec.idio_mean(grid.node(k)).iter().copied().collect::<Vec<_>>())
        .collect();
    let scalar = (n == 1 && lq.sigma.ncols() == 1).then(|| {
        let per_step = steps
            .iter()
            .map(|st: &AffineStep| [st.konst[0], st.r[(0, 0)], st.s[(0, 0)], st.u[(0, 0)], st.noise[(0, 0)]])
            .collect();
        let per_node = a.iter().zip(&beta_tilde).map(|(a, b)| [a[(0, 0)], b[(0, 0)]]).collect();
        (per_step, per_node)
    });
    Ok(FluctuationSolution {
        grid: *grid,
        n,
        a,
        beta_tilde,
        series,
        cbar,
        steps,
        scalar,
    })
}

/// Scratch buffers for [`FluctuationSolution::simulate`].
#[derive(Debug, Clone, Default)]
pub struct FluctScratch {
    ctilde: Vec<f64>,
}

impl FluctuationSolution {
    /// Writes `X̃` and `Ỹ` node values (flattened `(S+1) × n`) for one idiosyncratic path.
    pub fn simulate(&self, path: &IdioPath, x: &mut [f64], y: &mut [f64], scratch: &mut FluctScratch) {
        let n = self.n;
        let s = self.grid.steps;
        let d = self.steps[0].noise.ncols();
        scratch.ctilde.clear();
        scratch
            .ctilde
            .extend(path.c.iter().zip(&self.cbar).map(|(c, m)| c - m));
        let ct = &scratch.ctilde;
        if let Some((per_step, per_node)) = &self.scalar {
            // same operation order as the matrix route, so results agree bitwise
            let mut xk = path.xi_dev[0];
            x[0] = xk;
            for (k, c) in per_step.iter().enumerate() {
                let mut o = c[0];
                o += c[1] * xk;
                o += c[2] * ct[k];
                o += c[3] * ct[k + 1];
                o += c[4] * path.dw[k];
                x[k + 1] = o;
                xk = o;
            }
            for (k, c) in per_node.iter().enumerate() {
                let mut o = 0.0;
                o += c[0] * x[k];
                o += c[1] * ct[k];
                y[k] = o;
            }
            return;
        }
        x[..n].copy_from_slice(&path.xi_dev);
        for k in 0..s {
            let (head, tail) = x.split_at_mut((k + 1) * n);
            self.steps[k].apply(
                &head[k * n..],
                &ct[k * n..(k + 1) * n],
                &ct[(k + 1) * n..(k + 2) * n],
                &path.dw[k * d..(k + 1) * d],
                &mut tail[..n],
            );
        }
        for k in 0..=s {
            let yk = &mut y[k * n..(k + 1) * n];
            yk.fill(0.0);
            mv_add(&self.a[k], &x[k * n..(k + 1) * n], yk);
            mv_add(&self.beta_tilde[k], &ct[k * n..(k + 1) * n], yk);
        }
    }
}

/// The stacked affine mean system
///
/// `du = (B_v v + B_c c⁰ + b(t)) dt + Σ⁰ dW⁰`,
/// `dv = −(Q_u u + F_v v + F_c c⁰ + f(t)) dt + …`,
/// `v_T = P_T u_T + G_T c⁰_T + g_T`,
///
/// where `b(t) = b_const + B_idio c̄(t)` and `f(t) = f_const + F_idio c̄(t)` with
/// `c̄` the stacked idiosyncratic factor means.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanSystem {
    pub dim: usize,
    pub n: usize,
    pub b_v: Mat,
    pub b_c: Mat,
    pub b_const: Vector,
    pub b_idio: Mat,
    pub q_u: Mat,
    pub f_v: Mat,
    pub f_c: Mat,
    pub f_const: Vector,
    pub f_idio: Mat,
    pub term_u: Mat,
    pub term_c: Mat,
    pub term_const: Vector,
    pub sigma0: Mat,
    pub common: OuSpec,
    pub idio: Vec<OuSpec>,
    pub initial_mean: Vector,
}

impl MeanSystem {
    /// Single-population mean system with `φ = −ȳ` substituted.
    pub fn single(spec: &ModelSpec) -> Result<Self> {
        if !spec.psi.is_identity() {
            return Err(Error::InvalidModel(
                "the affine solver requires the identity price map".into(),
            ));
        }
        if !(0.0..1.0).contains(&spec.delta) {
            return Err(Error::DeltaOutOfRange(spec.delta));
        }
        let lq = &spec.lq;
        let scale = 1.0 / (1.0 - spec.delta);
        let cbar_t = spec.idio_mean(spec.horizon);
        Ok(Self {
            dim: spec.n,
            n: spec.n,
            b_v: -&lq.k_l,
            b_c: lq.l_c0.clone(),
            b_const: lq.l_const.clone(),
            b_idio: lq.l_c.clone(),
            q_u: lq.q.clone(),
            f_v: -&lq.f_phi,
            f_c: lq.f_c0.clone(),
            f_const: lq.f_const.clone(),
            f_idio: lq.f_c.clone(),
            term_u: &lq.p * scale,
            term_c: &lq.g_c0 * scale,
            term_const: (&lq.g_c * cbar_t + &lq.g_const) * scale,
            sigma0: lq.sigma0.clone(),
            common: spec.common_factor.clone(),
            idio: vec![spec.idio_factor.clone()],
            initial_mean: spec.initial_law.mean.clone(),
        })
    }

    pub fn idio_mean(&self, t: f64) -> Vector {
        let parts: Vec<f64> = self.idio.iter().flat_map(|o| o.mean_at(t).iter().copied().collect::<Vec<_>>()).collect();
        Vector::from_vec(parts)
    }

    pub fn b(&self, t: f64) -> Vector {
        &self.b_const + &self.b_idio * self.idio_mean(t)
    }

    pub fn f(&self, t: f64) -> Vector {
        &self.f_const + &self.f_idio * self.idio_mean(t)
    }
}

/// Mean-system coefficients `Ā`, `β`, `β0` and the forward step maps.
#[derive(Debug, Clone, PartialEq)]
pub struct MeanSolution {
    pub grid: TimeGrid,
    pub dim: usize,
    pub n: usize,
    pub abar: Vec<Mat>,
    pub beta: Vec<Mat>,
    pub beta0: Vec<Vector>,
    pub series: NodeSeries,
    pub steps: Vec<AffineStep>,
    pub initial_mean: Vector,
}

/// Solves the mean-system coefficient ODEs obtained from the ansatz
/// `v = Ā u + β c⁰ + β0`:
///
/// `Ā' = −Ā B_v Ā − Q_u − F_v Ā`,
/// `β' = −Ā B_v β − Ā B_c + β κ⁰ − F_c − F_v β`,
/// `β0' = −Ā B_v β0 − Ā b − β κ⁰θ⁰ − f − F_v β0`.
pub fn solve_mean(sys: &MeanSystem, grid: &TimeGrid, bound: f64) -> Result<MeanSolution> {
    let (dd, n) = (sys.dim, sys.n);
    let kappa = Mat::from_diagonal(&sys.common.kappa);
    let kt = sys.common.kappa.component_mul(&sys.common.theta);
    let mut terminal = Mat::zeros(dd, dd + n + 1);
    terminal.view_mut((0, 0), (dd, dd)).copy_from(&sys.term_u);
    terminal.view_mut((0, dd), (dd, n)).copy_from(&sys.term_c);
    terminal.set_column(dd + n, &sys.term_const);
    let rhs = |t: f64, y: &Mat| -> Mat {
        let abar = y.columns(0, dd);
        let beta = y.columns(dd, n);
        let beta0 = y.column(dd + n);
        let feedback = abar * &sys.b_v + &sys.f_v;
        let mut out = Mat::zeros(dd, dd + n + 1);
        out.view_mut((0, 0), (dd, dd))
            .copy_from(&(-(&feedback * abar) - &sys.q_u));
        out.view_mut((0, dd), (dd, n))
            .copy_from(&(-(&feedback * beta) - abar * &sys.b_c + beta * &kappa - &sys.f_c));
        let c0 = -(&feedback * beta0) - abar * sys.b(t) - beta * &kt - sys.f(t);
        out.set_column(dd + n, &c0);
        out
    };
    let series = integrate_backward(grid, terminal, rhs, bound, "mean")?;
    let split = |y: &Mat| (y.columns(0, dd).into_owned(), y.columns(dd, n).into_owned(), y.column(dd + n).into_owned());
    let mut abar = Vec::with_capacity(grid.len());
    let mut beta = Vec::with_capacity(grid.len());
    let mut beta0 = Vec::with_capacity(grid.len());
    for y in &series.values {
        let (a, b, c) = split(y);
        abar.push(a);
        beta.push(b);
        beta0.push(c);
    }

    let h = grid.dt();
    let w = sys.common.bridge_midpoint_weights(h);
    let wm = Mat::from_diagonal(&w);
    let zc = sys.common.theta.component_mul(&w.map(|wi| 1.0 - 2.0 * wi));
    let steps = (0..grid.steps)
        .map(|k| {
            let t0 = grid.node(k);
            let t1 = grid.node(k + 1);
            let (am, bm, b0m) = split(&series.midpoint(k, h));
            let coeffs = |a: &Mat, b: &Mat, b0: &Vector, t: f64| {
                (
                    &sys.b_v * a,
                    &sys.b_v * b + &sys.b_c,
                    &sys.b_v * b0 + sys.b(t),
                )
            };
            let c0 = coeffs(&abar[k], &beta[k], &beta0[k], t0);
            let ch = coeffs(&am, &bm, &b0m, t0 + 0.5 * h);
            let c1 = coeffs(&abar[k + 1], &beta[k + 1], &beta0[k + 1], t1);
            build_step(&LinearStepInput {
                h,
                m: [&c0.0, &ch.0, &c1.0],
                n: [&c0.1, &ch.1, &c1.1],
                e: [&c0.2, &ch.2, &c1.2],
                wa: &wm,
                wb: &wm,
                zc: &zc,
                sigma: &sys.sigma0,
            })
        })
        .collect();
    Ok(MeanSolution {
        grid: *grid,
        dim: dd,
        n,
        abar,
        beta,
        beta0,
        series,
        steps,
        initial_mean: sys.initial_mean.clone(),
    })
}

/// Single-population mean-system coefficients.
pub fn solve_mean_system(spec: &ModelSpec, grid: &TimeGrid) -> Result<MeanSolution> {
    solve_mean(&MeanSystem::single(spec)?, grid, DEFAULT_BLOWUP_BOUND)
}

impl MeanSolution {
    /// Forward mean path along one common path: returns `(u, v)` node values,
    /// each flattened `(S+1) × dim`.
    pub fn path(&self, common: &CommonPath) -> (Vec<f64>, Vec<f64>) {
        let (dd, n) = (self.dim, self.n);
        let s = self.grid.steps;
        let d0 = self.steps[0].noise.ncols();
        let mut u = vec![0.0; (s + 1) * dd];
        u[..dd].copy_from_slice(self.initial_mean.as_slice());
        for k in 0..s {
            let (head, tail) = u.split_at_mut((k + 1) * dd);
            self.steps[k].apply(
                &head[k * dd..],
                &common.c0[k * n..(k + 1) * n],
                &common.c0[(k + 1) * n..(k + 2) * n],
                &common.dw0[k * d0..(k + 1) * d0],
                &mut tail[..dd],
            );
        }
        let mut v = vec![0.0; (s + 1) * dd];
        for k in 0..=s {
            let vk = &mut v[k * dd..(k + 1) * dd];
            vk.copy_from_slice(self.beta0[k].as_slice());
            mv_add(&self.abar[k], &u[k * dd..(k + 1) * dd], vk);
            mv_add(&self.beta[k], &common.c0[k * n..(k + 1) * n], vk);
        }
        (u, v)
    }
}

/// Fluctuation and mean coefficients of one single-population model.
#[derive(Debug, Clone, PartialEq)]
pub struct AffineSolution {
    pub grid: TimeGrid,
    pub n: usize,
    pub mode: TerminalMode,
    pub fluctuation: FluctuationSolution,
    pub mean: MeanSolution,
}

impl AffineSolution {
    pub fn a(&self, k: usize) -> &Mat {
        &self.fluctuation.a[k]
    }
    pub fn abar(&self, k: usize) -> &Mat {
        &self.mean.abar[k]
    }
    pub fn beta(&self, k: usize) -> &Mat {
        &self.mean.beta[k]
    }
    pub fn beta0(&self, k: usize) -> &Vector {
        &self.mean.beta0[k]
    }
}

pub fn solve_affine(spec: &ModelSpec, grid: &TimeGrid) -> Result<AffineSolution> {
    solve_affine_bounded(spec, grid, DEFAULT_BLOWUP_BOUND)
}

pub fn solve_affine_bounded(spec: &ModelSpec, grid: &TimeGrid, bound: f64) -> Result<AffineSolution> {
    spec.check_structure()?;
    let fluctuation = solve_fluctuation_system_bounded(spec, grid, bound)?;
    let mean = solve_mean(&MeanSystem::single(spec)?, grid, bound)?;
    Ok(AffineSolution {
        grid: *grid,
        n: spec.n,
        mode: spec.mode,
        fluctuation,
        mean,
    })
}

pub(crate) fn check_grid(expected: &TimeGrid, got: &TimeGrid, what: &str) -> Result<()> {
    if expected != got {
        return Err(Error::GridMismatch(format!(
            "{what}: grid (T = {}, S = {}) differs from (T = {}, S = {})",
            got.horizon, got.steps, expected.horizon, expected.steps
        )));
    }
    Ok(())
}

/// Attaches per-copy paths of one population given its mean paths and the price.
pub(crate) fn reconstruct_population(
    fluct: &FluctuationSolution,
    source: IdioSource,
    lambda: &Mat,
    weight: f64,
    xbar: Vec<Vec<f64>>,
    ybar: Vec<Vec<f64>>,
    price: &[Vec<f64>],
    copies: &[IdioPath],
    per_path: usize,
) -> Result<PopulationSolution> {
    let n = fluct.n;
    let len = fluct.grid.len() * n;
    let lambda_inv = inverse("Lambda", lambda)?;
    let paths: Vec<CopyPaths> = copies
        .par_iter()
        .enumerate()
        .map_init(FluctScratch::default, |scratch, (idx, path)| {
            let m = idx / per_path;
            let mut x = vec![0.0; len];
            let mut y = vec![0.0; len];
            fluct.simulate(path, &mut x, &mut y, scratch);
            let mut alpha = vec![0.0; len];
            for (i, (xi, yi)) in x.iter_mut().zip(y.iter_mut()).enumerate() {
                *xi += xbar[m][i];
                *yi += ybar[m][i];
            }
            let mut shifted = vec![0.0; n];
            for k in 0..fluct.grid.len() {
                for j in 0..n {
                    shifted[j] = -(y[k * n + j] + price[m][k * n + j]);
                }
                mv_add(&lambda_inv, &shifted, &mut alpha[k * n..(k + 1) * n]);
            }
            CopyPaths { x, y, alpha }
        })
        .collect();
    Ok(PopulationSolution {
        weight,
        lambda: lambda.clone(),
        lambda_inv,
        source,
        fluctuation: fluct.clone(),
        xbar,
        ybar,
        copies: paths,
    })
}

/// Pathwise equilibrium: mean paths per common path, `φ = −ȳ`, and per-copy
/// `X = x̄ + X̃`, `Y = ȳ + Ỹ`, `α̂ = −Λ⁻¹(Y + φ)`.
pub fn reconstruct_paths(
    spec: &ModelSpec,
    grid: &TimeGrid,
    scenarios: &ScenarioSet,
    sol: &AffineSolution,
) -> Result<EquilibriumSolution> {
    check_grid(grid, &scenarios.grid, "scenarios")?;
    check_grid(grid, &sol.grid, "affine solution")?;
    if scenarios.n != spec.n || sol.n != spec.n || scenarios.populations.is_empty() {
        return Err(Error::SpecMismatch("dimension of scenarios or solution".into()));
    }
    let means: Vec<(Vec<f64>, Vec<f64>)> = scenarios.common.par_iter().map(|c| sol.mean.path(c)).collect();
    let (xbar, ybar): (Vec<Vec<f64>>, Vec<Vec<f64>>) = means.into_iter().unzip();
    let price: Vec<Vec<f64>> = ybar.iter().map(|v| v.iter().map(|y| -y).collect()).collect();
    let pop = reconstruct_population(
        &sol.fluctuation,
        spec.idio_source(),
        &spec.lambda,
        1.0,
        xbar,
        ybar,
        &price,
        &scenarios.populations[0].paths,
        scenarios.copies,
    )?;
    Ok(EquilibriumSolution {
        grid: *grid,
        n: spec.n,
        mode: SolveMode::Lq,
        master_seed: scenarios.master_seed,
        common_paths: scenarios.common_paths,
        copies_per_path: scenarios.copies,
        price,
        populations: vec![pop],
        diagnostics: SolverDiagnostics::exact(),
    })
}

/// Euler-Maruyama forward simulation of every copy under the feedback control
/// `α = −Λ⁻¹(ȳ + A(X − x̄) + β̃ c̃ + φ)`, with the mean `x̄` also stepped by Euler.
///
/// Uses the factor values and Brownian increments of `scenarios` at the nodes,
/// so comparing against [`reconstruct_paths`] on a finer grid isolates the
/// time-stepping error. Returns `X` per copy, indexed `m * K + k`.
pub fn euler_feedback(spec: &ModelSpec, sol: &AffineSolution, scenarios: &ScenarioSet) -> Result<Vec<Vec<f64>>> {
    check_grid(&sol.grid, &scenarios.grid, "scenarios")?;
    let sys = MeanSystem::single(spec)?;
    let lam_inv = spec.lambda_inv()?;
    let grid = sol.grid;
    let (n, s, h) = (spec.n, grid.steps, grid.dt());
    let (d0, d) = (scenarios.d0, scenarios.populations[0].d);
    let lq = &spec.lq;
    let kk = scenarios.copies;
    let per_path: Vec<Vec<Vec<f64>>> = (0..scenarios.common_paths)
        .into_par_iter()
        .map(|m| {
            let common = &scenarios.common[m];
            let c0 = |k: usize| Vector::from_column_slice(&common.c0[k * n..(k + 1) * n]);
            let mut u = vec![sys.initial_mean.clone()];
            let mut v = Vec::with_capacity(s + 1);
            for k in 0..=s {
                let vk = &sol.mean.abar[k] * &u[k] + &sol.mean.beta[k] * c0(k) + &sol.mean.beta0[k];
                if k < s {
                    let dw0 = Vector::from_column_slice(&common.dw0[k * d0..(k + 1) * d0]);
                    let drift = &sys.b_v * &vk + &sys.b_c * c0(k) + sys.b(grid.node(k));
                    u.push(&u[k] + drift * h + &sys.sigma0 * dw0);
                }
                v.push(vk);
            }
            scenarios
                .copies_of(0, m)
                .iter()
                .map(|path| {
                    let mut x = Vector::from_column_slice(&path.xi_dev) + &u[0];
                    let mut out = Vec::with_capacity((s + 1) * n);
                    out.extend(x.iter().copied());
                    for k in 0..s {
                        let c = Vector::from_column_slice(&path.c[k * n..(k + 1) * n]);
                        let cbar = Vector::from_column_slice(&sol.fluctuation.cbar[k * n..(k + 1) * n]);
                        let y = &v[k] + &sol.fluctuation.a[k] * (&x - &u[k]) + &sol.fluctuation.beta_tilde[k] * (&c - cbar);
                        let phi = -&v[k];
                        let alpha = -(&lam_inv * (y + &phi));
                        let drift = alpha + lq.otc_flow(&phi, &c0(k), &c);
                        let dw = Vector::from_column_slice(&path.dw[k * d..(k + 1) * d]);
                        let dw0 = Vector::from_column_slice(&common.dw0[k * d0..(k + 1) * d0]);
                        x += drift * h + &lq.sigma * dw + &lq.sigma0 * dw0;
                        out.extend(x.iter().copied());
                    }
                    out
                })
                .collect()
        })
        .collect();
    debug_assert!(per_path.iter().all(|p| p.len() == kk));
    Ok(per_path.into_iter().flatten().collect())
}
