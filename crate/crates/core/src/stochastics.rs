//! Time grid, seeded Brownian / Ornstein-Uhlenbeck path generation, the
//! conditional-copies scenario layout, and empirical estimators.
//!
//! A [`ScenarioSet`] holds `M` common-noise paths `(W⁰, c⁰)`; each common path
//! carries `K` idiosyncratic copies `(ξ, W, c)` per population. Copies of the
//! same common path see the same `(W⁰, c⁰)` realization and differ only in their
//! own draws, which is what "conditionally i.i.d. given the common noise" means
//! on a computer.
//!
//! Every random stream is addressed by `(master_seed, role, m, k)` and is
//! generated by its own ChaCha8 stream, so paths do not depend on generation
//! order or worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;

use crate::error::{Error, Result};
use crate::linalg::{psd_cholesky, Mat, Vector};
use crate::model::ModelSpec;

/// Uniform grid `t_k = k T / S`, `k = 0..=S`.
#[derive(Debug, Clone, Copy, PartialEq)]
pub struct TimeGrid {
    pub horizon: f64,
    pub steps: usize,
}

impl TimeGrid {
    pub fn new(horizon: f64, steps: usize) -> Result<Self> {
        if !(horizon > 0.0 && horizon.is_finite()) {
            return Err(Error::InvalidModel(format!(
                "horizon must be positive, got {horizon}"
            )));
        }
        if steps == 0 {
            return Err(Error::InvalidModel("steps must be positive".into()));
        }
        Ok(Self { horizon, steps })
    }

    pub fn dt(&self) -> f64 {
        self.horizon / self.steps as f64
    }

    pub fn node(&self, k: usize) -> f64 {
        if k == self.steps {
            self.horizon
        } else {
            k as f64 * self.horizon / self.steps as f64
        }
    }

    pub fn nodes(&self) -> Vec<f64> {
        (0..=self.steps).map(|k| self.node(k)).collect()
    }

    pub fn len(&self) -> usize {
        self.steps + 1
    }

    pub fn is_empty(&self) -> bool {
        false
    }
}

/// Ornstein-Uhlenbeck factor `dc = κ(θ − c)dt + η dW` with diagonal `κ`.
#[derive(Debug, Clone, PartialEq)]
pub struct OuSpec {
    /// Diagonal of the mean-reversion matrix.
    pub kappa: Vector,
    pub theta: Vector,
    /// `n × q` loading on the driving Brownian motion.
    pub eta: Mat,
    pub c_init: Vector,
}

impl OuSpec {
    /// Degenerate factor: constant `c_init`, no noise.
    pub fn constant(c_init: Vector, driving_dim: usize) -> Self {
        let n = c_init.len();
        Self {
            kappa: Vector::zeros(n),
            theta: Vector::zeros(n),
            eta: Mat::zeros(n, driving_dim),
            c_init,
        }
    }

    pub fn dim(&self) -> usize {
        self.c_init.len()
    }

    pub fn driving_dim(&self) -> usize {
        self.eta.ncols()
    }

    pub fn check(&self, name: &str, n: usize, q: usize) -> Result<()> {
        if self.kappa.len() != n
            || self.theta.len() != n
            || self.c_init.len() != n
            || self.eta.nrows() != n
            || self.eta.ncols() != q
        {
            return Err(Error::InvalidModel(format!(
                "{name}: expected kappa/theta/c_init of length {n} and eta of shape {n}x{q}"
            )));
        }
        if let Some(k) = self.kappa.iter().find(|k| !(**k >= 0.0)) {
            return Err(Error::InvalidModel(format!(
                "{name}: kappa entries must be >= 0, got {k}"
            )));
        }
        Ok(())
    }

    pub fn is_deterministic(&self) -> bool {
        self.eta.iter().all(|v| *v == 0.0)
    }

    /// `E[c_s | c_t] = e^{−κ(s−t)} c_t + (I − e^{−κ(s−t)}) θ`.
    pub fn conditional_mean(&self, c_t: &Vector, t: f64, s: f64) -> Vector {
        let tau = s - t;
        Vector::from_fn(self.dim(), |i, _| {
            let decay = (-self.kappa[i] * tau).exp();
            decay * c_t[i] + (1.0 - decay) * self.theta[i]
        })
    }

    /// Unconditional mean at time `t` started from `c_init` at 0.
    pub fn mean_at(&self, t: f64) -> Vector {
        self.conditional_mean(&self.c_init, 0.0, t)
    }

    /// `Cov[c_{t+h} | c_t]`.
    pub fn conditional_cov(&self, h: f64) -> Mat {
        let eet = &self.eta * self.eta.transpose();
        Mat::from_fn(self.dim(), self.dim(), |i, j| {
            eet[(i, j)] * decay_integral(self.kappa[i] + self.kappa[j], h)
        })
    }

    /// Weights `w` with `E[c_{t+h/2} | c_t = a, c_{t+h} = b] = θ + w∘(a + b − 2θ)`.
    pub fn bridge_midpoint_weights(&self, h: f64) -> Vector {
        self.kappa.map(|k| 0.5 / (0.5 * k * h).cosh())
    }

    pub fn transition(&self, h: f64) -> OuTransition {
        let n = self.dim();
        let q = self.driving_dim();
        let mut cov = Mat::zeros(q + n, q + n);
        for j in 0..q {
            cov[(j, j)] = h;
        }
        for i in 0..n {
            let w = decay_integral(self.kappa[i], h);
            for j in 0..q {
                let c = self.eta[(i, j)] * w;
                cov[(q + i, j)] = c;
                cov[(j, q + i)] = c;
            }
        }
        let oc = self.conditional_cov(h);
        for i in 0..n {
            for j in 0..n {
                cov[(q + i, q + j)] = oc[(i, j)];
            }
        }
        OuTransition {
            decay: self.kappa.map(|k| (-k * h).exp()),
            theta: self.theta.clone(),
            driving_dim: q,
            root: psd_cholesky(&cov),
        }
    }
}

/// `∫₀ʰ e^{−a u} du`, continuous at `a = 0`.
fn decay_integral(a: f64, h: f64) -> f64 {
    if a * h < 1e-8 {
        h * (1.0 - 0.5 * a * h)
    } else {
        (1.0 - (-a * h).exp()) / a
    }
}

/// Exact joint transition of the driving increment and the OU factor over one step.
#[derive(Debug, Clone)]
pub struct OuTransition {
    decay: Vector,
    theta: Vector,
    driving_dim: usize,
    /// Lower-triangular root of the joint covariance of `(ΔW, c_{t+h} − E[c_{t+h}|c_t])`.
    root: Mat,
}

impl OuTransition {
    pub fn draw_len(&self) -> usize {
        self.root.nrows()
    }

    /// Applies one step given standard normal draws `z` (length `q + n`).
    /// Writes the Brownian increment into `dw` and the next factor value into `next`.
    pub fn apply(&self, c: &[f64], z: &[f64], dw: &mut [f64], next: &mut [f64]) {
        let q = self.driving_dim;
        let dim = self.root.nrows();
        let root = self.root.as_slice();
        for i in 0..dim {
            let mut v = 0.0;
            for j in 0..=i {
                v += root[j * dim + i] * z[j];
            }
            if i < q {
                dw[i] = v;
            } else {
                let r = i - q;
                next[r] = self.decay[r] * c[r] + (1.0 - self.decay[r]) * self.theta[r] + v;
            }
        }
    }
}

/// Role tag used in stream derivation.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub enum StreamRole {
    Common,
    Copy { population: u8 },
    Agent { population: u8 },
    Probe,
}

impl StreamRole {
    fn tag(self) -> u64 {
        match self {
            StreamRole::Common => 1,
            StreamRole::Copy { population } => 0x100 | population as u64,
            StreamRole::Agent { population } => 0x200 | population as u64,
            StreamRole::Probe => 0x300,
        }
    }
}

/// Independent generator for stream `(role, m, k)` under `master_seed`.
///
/// The stream id packs `(role, m, k)` injectively (role: 12 bits, m: 20 bits,
/// k: 32 bits), and ChaCha's native stream parameter selects the keystream.
pub fn stream_rng(master_seed: u64, role: StreamRole, m: usize, k: usize) -> ChaCha8Rng {
    debug_assert!(m < (1 << 20) && (k as u64) < (1 << 32));
    let mut rng = ChaCha8Rng::seed_from_u64(master_seed);
    let stream = (role.tag() << 52) | ((m as u64 & 0xF_FFFF) << 32) | (k as u64 & 0xFFFF_FFFF);
    rng.set_stream(stream);
    rng
}

/// Deterministic seed derivation for sub-experiments (e.g. replications).
pub fn derive_seed(seed: u64, index: u64) -> u64 {
    let mut z = seed ^ index.wrapping_add(1).wrapping_mul(0x9E37_79B9_7F4A_7C15);
    z = (z ^ (z >> 30)).wrapping_mul(0xBF58_476D_1CE4_E5B9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94D0_49BB_1331_11EB);
    z ^ (z >> 31)
}

pub fn standard_normals(rng: &mut ChaCha8Rng, len: usize) -> Vec<f64> {
    (0..len).map(|_| StandardNormal.sample(rng)).collect()
}

pub fn fill_standard_normals(rng: &mut ChaCha8Rng, out: &mut [f64]) {
    for v in out.iter_mut() {
        *v = StandardNormal.sample(rng);
    }
}

/// Common-noise path: `W⁰` increments (`S × d0`) and `c⁰` values (`(S+1) × n`).
#[derive(Debug, Clone, PartialEq)]
pub struct CommonPath {
    pub dw0: Vec<f64>,
    pub c0: Vec<f64>,
}

/// One idiosyncratic copy: `ξ − ξ̄`, `W` increments (`S × d`) and `c` values.
#[derive(Debug, Clone, PartialEq)]
pub struct IdioPath {
    pub xi_dev: Vec<f64>,
    pub dw: Vec<f64>,
    pub c: Vec<f64>,
}

/// Sources of idiosyncratic randomness for one population.
#[derive(Debug, Clone, PartialEq)]
pub struct IdioSource {
    pub factor: OuSpec,
    pub initial_cov: Mat,
}

impl IdioSource {
    pub fn sampler(&self, grid: &TimeGrid) -> IdioSampler {
        IdioSampler {
            transition: self.factor.transition(grid.dt()),
            xi_root: psd_cholesky(&self.initial_cov),
            c_init: self.factor.c_init.iter().copied().collect(),
            n: self.factor.dim(),
            d: self.factor.driving_dim(),
            steps: grid.steps,
        }
    }
}

/// Turns standard normal draws into an [`IdioPath`].
#[derive(Debug, Clone)]
pub struct IdioSampler {
    transition: OuTransition,
    xi_root: Mat,
    c_init: Vec<f64>,
    n: usize,
    d: usize,
    steps: usize,
}

impl IdioSampler {
    pub fn draw_len(&self) -> usize {
        self.n + self.steps * self.transition.draw_len()
    }

    pub fn path_from_normals(&self, z: &[f64]) -> IdioPath {
        let mut out = IdioPath {
            xi_dev: vec![0.0; self.n],
            dw: vec![0.0; self.steps * self.d],
            c: vec![0.0; (self.steps + 1) * self.n],
        };
        self.fill_path(z, &mut out);
        out
    }

    /// Same as [`Self::path_from_normals`] but reuses the buffers of `out`.
    pub fn fill_path(&self, z: &[f64], out: &mut IdioPath) {
        let n = self.n;
        let d = self.d;
        out.xi_dev.clear();
        out.xi_dev.resize(n, 0.0);
        out.dw.resize(self.steps * d, 0.0);
        out.c.resize((self.steps + 1) * n, 0.0);
        crate::linalg::mv_add(&self.xi_root, &z[..n], &mut out.xi_dev);
        out.c[..n].copy_from_slice(&self.c_init);
        let stride = self.transition.draw_len();
        if n == 1 && d == 1 {
            let tr = &self.transition;
            let root = tr.root.as_slice();
            let (r00, r10, r11) = (root[0], root[1], root[3]);
            let (decay, pull) = (tr.decay[0], (1.0 - tr.decay[0]) * tr.theta[0]);
            let mut c = out.c[0];
            for k in 0..self.steps {
                let (z0, z1) = (z[1 + 2 * k], z[2 + 2 * k]);
                out.dw[k] = 0.0 + r00 * z0;
                let v = 0.0 + r10 * z0 + r11 * z1;
                c = decay * c + pull + v;
                out.c[k + 1] = c;
            }
            return;
        }
        for k in 0..self.steps {
            let zk = &z[n + k * stride..n + (k + 1) * stride];
            let (head, tail) = out.c.split_at_mut((k + 1) * n);
            self.transition
                .apply(&head[k * n..], zk, &mut out.dw[k * d..(k + 1) * d], &mut tail[..n]);
        }
    }

    pub fn sample(&self, rng: &mut ChaCha8Rng) -> IdioPath {
        let z = standard_normals(rng, self.draw_len());
        self.path_from_normals(&z)
    }
}

/// What a [`ScenarioSet`] is built from.
#[derive(Debug, Clone)]
pub struct ScenarioLayout {
    pub n: usize,
    pub common_factor: OuSpec,
    pub populations: Vec<IdioSource>,
}

#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct ScenarioOptions {
    /// Center every idiosyncratic draw across the `K` copies of a common path,
    /// so in-sample copy averages of fluctuations vanish exactly.
    pub center_copies: bool,
}

impl Default for ScenarioOptions {
    fn default() -> Self {
        Self {
            center_copies: true,
        }
    }
}

/// Copies of one population, indexed `m * K + k`.
#[derive(Debug, Clone, PartialEq)]
pub struct PopulationCopies {
    pub d: usize,
    pub paths: Vec<IdioPath>,
}

#[derive(Debug, Clone, PartialEq)]
pub struct ScenarioSet {
    pub grid: TimeGrid,
    pub n: usize,
    pub d0: usize,
    pub common_paths: usize,
    pub copies: usize,
    pub master_seed: u64,
    pub centered: bool,
    pub common: Vec<CommonPath>,
    pub populations: Vec<PopulationCopies>,
}

impl ScenarioSet {
    pub fn copy(&self, population: usize, m: usize, k: usize) -> &IdioPath {
        &self.populations[population].paths[m * self.copies + k]
    }

    pub fn copies_of(&self, population: usize, m: usize) -> &[IdioPath] {
        &self.populations[population].paths[m * self.copies..(m + 1) * self.copies]
    }

    /// Same randomness on a grid with `factor` times fewer steps.
    pub fn coarsen(&self, factor: usize) -> Result<ScenarioSet> {
        if factor == 0 || !self.grid.steps.is_multiple_of(factor) {
            return Err(Error::GridMismatch(format!(
                "cannot coarsen {} steps by factor {factor}",
                self.grid.steps
            )));
        }
        let steps = self.grid.steps / factor;
        let grid = TimeGrid::new(self.grid.horizon, steps)?;
        let n = self.n;
        let sub_inc = |dw: &[f64], dim: usize| -> Vec<f64> {
            let mut out = vec![0.0; steps * dim];
            for k in 0..steps {
                for j in 0..factor {
                    let src = (k * factor + j) * dim;
                    for i in 0..dim {
                        out[k * dim + i] += dw[src + i];
                    }
                }
            }
            out
        };
        let sub_val = |c: &[f64]| -> Vec<f64> {
            (0..=steps)
                .flat_map(|k| c[k * factor * n..k * factor * n + n].iter().copied())
                .collect()
        };
        let common = self
            .common
            .iter()
            .map(|p| CommonPath {
                dw0: sub_inc(&p.dw0, self.d0),
                c0: sub_val(&p.c0),
            })
            .collect();
        let populations = self
            .populations
            .iter()
            .map(|pop| PopulationCopies {
                d: pop.d,
                paths: pop
                    .paths
                    .iter()
                    .map(|p| IdioPath {
                        xi_dev: p.xi_dev.clone(),
                        dw: sub_inc(&p.dw, pop.d),
                        c: sub_val(&p.c),
                    })
                    .collect(),
            })
            .collect();
        Ok(ScenarioSet {
            grid,
            common,
            populations,
            ..self.clone()
        })
    }

    /// Writes the path dump `(m, i, k, t, W0_*, c0_*, W_*, c_*)` for population 0, one row per copy `i` and node `k`.
    ///
    /// Brownian columns hold the cumulative path `W(t_k)` with `W(0) = 0`.
    pub fn write_csv<W: std::io::Write>(&self, out: &mut W) -> std::io::Result<()> {
        let n = self.n;
        let d0 = self.d0;
        let pop = &self.populations[0];
        let d = pop.d;
        let mut header = vec!["m".to_string(), "i".into(), "k".into(), "t".into()];
        header.extend((1..=d0).map(|i| format!("W0_{i}")));
        header.extend((1..=n).map(|i| format!("c0_{i}")));
        header.extend((1..=d).map(|i| format!("W_{i}")));
        header.extend((1..=n).map(|i| format!("c_{i}")));
        writeln!(out, "{}", header.join(","))?;
        let nodes = self.grid.nodes();
        for m in 0..self.common_paths {
            let cp = &self.common[m];
            for kc in 0..self.copies {
                let ip = self.copy(0, m, kc);
                let mut w0 = vec![0.0; d0];
                let mut w = vec![0.0; d];
                for (k, t) in nodes.iter().enumerate() {
                    if k > 0 {
                        for i in 0..d0 {
                            w0[i] += cp.dw0[(k - 1) * d0 + i];
                        }
                        for i in 0..d {
                            w[i] += ip.dw[(k - 1) * d + i];
                        }
                    }
                    let mut row = vec![m.to_string(), kc.to_string(), k.to_string(), fmt_f64(*t)];
                    row.extend(w0.iter().map(|v| fmt_f64(*v)));
                    row.extend(cp.c0[k * n..(k + 1) * n].iter().map(|v| fmt_f64(*v)));
                    row.extend(w.iter().map(|v| fmt_f64(*v)));
                    row.extend(ip.c[k * n..(k + 1) * n].iter().map(|v| fmt_f64(*v)));
                    writeln!(out, "{}", row.join(","))?;
                }
            }
        }
        Ok(())
    }
}

/// 17 significant digits, round-trip exact for `f64`.
pub fn fmt_f64(v: f64) -> String {
    format!("{v:.16e}")
}

/// Builds the conditional-copies layout.
pub fn build_scenarios_from(
    layout: &ScenarioLayout,
    grid: TimeGrid,
    common_paths: usize,
    copies: usize,
    master_seed: u64,
    options: ScenarioOptions,
) -> Result<ScenarioSet> {
    if common_paths == 0 {
        return Err(Error::InvalidArgument("M must be at least 1".into()));
    }
    if copies < 2 {
        return Err(Error::NotEnoughCopies(copies));
    }
    let n = layout.n;
    let d0 = layout.common_factor.driving_dim();
    let common_transition = layout.common_factor.transition(grid.dt());
    let common: Vec<CommonPath> = (0..common_paths)
        .into_par_iter()
        .map(|m| {
            let mut rng = stream_rng(master_seed, StreamRole::Common, m, 0);
            let stride = common_transition.draw_len();
            let z = standard_normals(&mut rng, grid.steps * stride);
            let mut dw0 = vec![0.0; grid.steps * d0];
            let mut c0 = vec![0.0; (grid.steps + 1) * n];
            c0[..n].copy_from_slice(layout.common_factor.c_init.as_slice());
            for k in 0..grid.steps {
                let (head, tail) = c0.split_at_mut((k + 1) * n);
                common_transition.apply(
                    &head[k * n..],
                    &z[k * stride..(k + 1) * stride],
                    &mut dw0[k * d0..(k + 1) * d0],
                    &mut tail[..n],
                );
            }
            CommonPath { dw0, c0 }
        })
        .collect();

    let mut populations = Vec::with_capacity(layout.populations.len());
    for (p, source) in layout.populations.iter().enumerate() {
        let sampler = source.sampler(&grid);
        let role = StreamRole::Copy {
            population: p as u8,
        };
        let per_common: Vec<Vec<IdioPath>> = (0..common_paths)
            .into_par_iter()
            .map(|m| {
                let mut draws: Vec<Vec<f64>> = (0..copies)
                    .map(|k| {
                        let mut rng = stream_rng(master_seed, role, m, k);
                        standard_normals(&mut rng, sampler.draw_len())
                    })
                    .collect();
                if options.center_copies {
                    center_columns(&mut draws);
                }
                draws.iter().map(|z| sampler.path_from_normals(z)).collect()
            })
            .collect();
        populations.push(PopulationCopies {
            d: source.factor.driving_dim(),
            paths: per_common.into_iter().flatten().collect(),
        });
    }

    Ok(ScenarioSet {
        grid,
        n,
        d0,
        common_paths,
        copies,
        master_seed,
        centered: options.center_copies,
        common,
        populations,
    })
}

/// Conditional-copies layout for a single-population model.
pub fn build_scenarios(
    spec: &ModelSpec,
    grid: &TimeGrid,
    common_paths: usize,
    copies: usize,
    master_seed: u64,
    options: ScenarioOptions,
) -> Result<ScenarioSet> {
    spec.check_structure()?;
    build_scenarios_from(&spec.scenario_layout(), *grid, common_paths, copies, master_seed, options)
}

fn center_columns(rows: &mut [Vec<f64>]) {
    let k = rows.len() as f64;
    let len = rows[0].len();
    for j in 0..len {
        let mean = rows.iter().map(|r| r[j]).sum::<f64>() / k;
        for r in rows.iter_mut() {
            r[j] -= mean;
        }
    }
}

/// Arithmetic mean across copies; the estimator of a conditional expectation
/// given the common noise.
pub fn conditional_mean_estimate(values: &[Vector]) -> Result<Vector> {
    if values.len() < 2 {
        return Err(Error::NotEnoughCopies(values.len()));
    }
    let n = values[0].len();
    let mut acc = Vector::zeros(n);
    for v in values {
        if v.len() != n {
            return Err(Error::InvalidArgument("copies have different dimensions".into()));
        }
        acc += v;
    }
    Ok(acc / values.len() as f64)
}

/// Empirical `W_p` between two scalar samples via the quantile coupling.
///
/// Samples may have different lengths; the quantile functions are compared on
/// the merged breakpoints of `[0, 1]`, which is exact for empirical measures and
/// reduces to `((1/n) Σ |a_(i) − b_(i)|^p)^{1/p}` for equal lengths.
pub fn wasserstein_1d(a: &[f64], b: &[f64], p: f64) -> Result<f64> {
    if a.is_empty() || b.is_empty() {
        return Err(Error::EmptySample);
    }
    if !(p >= 1.0) {
        return Err(Error::InvalidArgument(format!("p must be >= 1, got {p}")));
    }
    let mut xs = a.to_vec();
    let mut ys = b.to_vec();
    xs.sort_by(|u, v| u.total_cmp(v));
    ys.sort_by(|u, v| u.total_cmp(v));
    let cost = |u: f64, v: f64| {
        let d = (u - v).abs();
        if p == 1.0 {
            d
        } else if p == 2.0 {
            d * d
        } else {
            d.powf(p)
        }
    };
    let total = if xs.len() == ys.len() {
        xs.iter().zip(&ys).map(|(u, v)| cost(*u, *v)).sum::<f64>() / xs.len() as f64
    } else {
        let (na, nb) = (xs.len() as u128, ys.len() as u128);
        // Breakpoints i/na and j/nb compared exactly as integers i*nb vs j*na.
        let (mut i, mut j) = (0u128, 0u128);
        let mut prev = 0u128;
        let denom = (na * nb) as f64;
        let mut acc = 0.0;
        while i < na && j < nb {
            let next_a = (i + 1) * nb;
            let next_b = (j + 1) * na;
            let next = next_a.min(next_b);
            acc += (next - prev) as f64 / denom * cost(xs[i as usize], ys[j as usize]);
            prev = next;
            if next_a == next {
                i += 1;
            }
            if next_b == next {
                j += 1;
            }
        }
        acc
    };
    Ok(if p == 1.0 { total } else { total.powf(1.0 / p) })
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;

    fn scalar_ou(kappa: f64, theta: f64, eta: f64, c: f64) -> OuSpec {
        OuSpec {
            kappa: Vector::from_element(1, kappa),
            theta: Vector::from_element(1, theta),
            eta: Mat::from_element(1, 1, eta),
            c_init: Vector::from_element(1, c),
        }
    }

    fn layout(eta: f64) -> ScenarioLayout {
        ScenarioLayout {
            n: 1,
            common_factor: scalar_ou(0.5, 1.0, eta, 1.0),
            populations: vec![IdioSource {
                factor: scalar_ou(1.0, 0.0, eta, 0.0),
                initial_cov: Mat::from_element(1, 1, 0.1),
            }],
        }
    }

    #[test]
    fn ou_conditional_mean_examples() {
        let ou = scalar_ou(1.0, 0.0, 0.3, 0.0);
        let c = Vector::from_element(1, 1.0);
        assert_eq!(ou.conditional_mean(&c, 0.3, 0.3)[0], 1.0);
        let half = ou.conditional_mean(&c, 0.0, 2f64.ln())[0];
        assert!((half - 0.5).abs() < 1e-15);
        let flat = scalar_ou(0.0, 5.0, 0.3, 0.0);
        assert_eq!(flat.conditional_mean(&c, 0.0, 10.0)[0], 1.0);
    }

    #[test]
    fn bridge_weights_reproduce_deterministic_path() {
        let ou = scalar_ou(2.0, 0.7, 0.0, 1.9);
        let h = 0.1;
        let w = ou.bridge_midpoint_weights(h)[0];
        let a = ou.mean_at(0.3)[0];
        let b = ou.mean_at(0.4)[0];
        let mid = 0.7 + w * (a + b - 1.4);
        assert!((mid - ou.mean_at(0.35)[0]).abs() < 1e-15);
    }

    #[test]
    fn degenerate_ou_stays_constant() {
        let lay = ScenarioLayout {
            n: 1,
            common_factor: scalar_ou(0.0, 3.0, 0.0, 1.25),
            populations: vec![IdioSource {
                factor: scalar_ou(0.0, -2.0, 0.0, 0.5),
                initial_cov: Mat::zeros(1, 1),
            }],
        };
        let grid = TimeGrid::new(1.0, 20).unwrap();
        let s = build_scenarios_from(&lay, grid, 2, 3, 7, ScenarioOptions::default()).unwrap();
        assert!(s.common.iter().all(|p| p.c0.iter().all(|&c| c == 1.25)));
        assert!(s.populations[0].paths.iter().all(|p| p.c.iter().all(|&c| c == 0.5)));
    }

    #[test]
    fn scenarios_are_deterministic_and_share_common_paths() {
        let grid = TimeGrid::new(1.0, 10).unwrap();
        let a = build_scenarios_from(&layout(0.3), grid, 2, 3, 42, ScenarioOptions::default())
            .unwrap();
        let b = build_scenarios_from(&layout(0.3), grid, 2, 3, 42, ScenarioOptions::default())
            .unwrap();
        assert_eq!(a, b);
        let c = build_scenarios_from(&layout(0.3), grid, 2, 3, 43, ScenarioOptions::default())
            .unwrap();
        assert_ne!(a.common, c.common);
        // every copy of common path 0 reads the same W0 realization
        assert_ne!(a.common[0].dw0, a.common[1].dw0);
    }

    #[test]
    fn generation_is_order_independent() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let s = build_scenarios_from(
            &layout(0.3),
            grid,
            3,
            4,
            9,
            ScenarioOptions {
                center_copies: false,
            },
        )
        .unwrap();
        let sampler = layout(0.3).populations[0].sampler(&grid);
        // regenerate copy (2, 1) alone, out of order
        let mut rng = stream_rng(9, StreamRole::Copy { population: 0 }, 2, 1);
        assert_eq!(&sampler.sample(&mut rng), s.copy(0, 2, 1));
    }

    #[test]
    fn centering_zeroes_copy_means() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let s = build_scenarios_from(&layout(0.4), grid, 2, 5, 3, ScenarioOptions::default())
            .unwrap();
        for m in 0..2 {
            let copies = s.copies_of(0, m);
            let sum_dw: f64 = copies.iter().map(|c| c.dw[3]).sum();
            assert!(sum_dw.abs() < 1e-14);
        }
    }

    #[test]
    fn too_few_copies() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        assert_eq!(
            build_scenarios_from(&layout(0.3), grid, 2, 1, 0, ScenarioOptions::default()),
            Err(Error::NotEnoughCopies(1))
        );
    }

    #[test]
    fn coarsen_sums_increments() {
        let grid = TimeGrid::new(1.0, 8).unwrap();
        let s = build_scenarios_from(&layout(0.3), grid, 1, 2, 5, ScenarioOptions::default())
            .unwrap();
        let c = s.coarsen(4).unwrap();
        assert_eq!(c.grid.steps, 2);
        let fine: f64 = s.common[0].dw0[..4].iter().sum();
        assert!((c.common[0].dw0[0] - fine).abs() < 1e-15);
        assert_eq!(c.copy(0, 0, 1).c[2], s.copy(0, 0, 1).c[8]);
        assert!(s.coarsen(3).is_err());
    }

    #[test]
    fn ou_exact_transition_moments() {
        // 3-sigma band on the sample mean and variance of c_{t+h} given c_t.
        let ou = scalar_ou(1.5, 0.4, 0.8, 0.0);
        let h = 0.7;
        let tr = ou.transition(h);
        let mut rng = stream_rng(11, StreamRole::Probe, 0, 0);
        let c0 = [2.0];
        let n = 20_000;
        let xs: Vec<f64> = (0..n)
            .map(|_| {
                let z = standard_normals(&mut rng, tr.draw_len());
                let mut dw = [0.0];
                let mut next = [0.0];
                tr.apply(&c0, &z, &mut dw, &mut next);
                next[0]
            })
            .collect();
        let mean = xs.iter().sum::<f64>() / n as f64;
        let var = xs.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1) as f64;
        let exact_mean = ou.conditional_mean(&Vector::from_element(1, 2.0), 0.0, h)[0];
        let exact_var = ou.conditional_cov(h)[(0, 0)];
        assert!((mean - exact_mean).abs() < 3.0 * (exact_var / n as f64).sqrt());
        let var_se = exact_var * (2.0 / (n - 1) as f64).sqrt();
        assert!((var - exact_var).abs() < 3.0 * var_se);
    }

    #[test]
    fn conditional_mean_examples() {
        let v = Vector::from_vec(vec![1.0, -3.0]);
        assert_eq!(
            conditional_mean_estimate(&[v.clone(), v.clone(), v.clone()]).unwrap(),
            v
        );
        let pair = [Vector::from_element(1, 0.0), Vector::from_element(1, 2.0)];
        assert_eq!(conditional_mean_estimate(&pair).unwrap()[0], 1.0);
        assert!(conditional_mean_estimate(&pair[..1]).is_err());
    }

    #[test]
    fn conditional_mean_variance_is_one_over_k() {
        let k = 10;
        let reps = 4000;
        let mut rng = stream_rng(5, StreamRole::Probe, 0, 0);
        let ests: Vec<f64> = (0..reps)
            .map(|_| {
                let vals: Vec<Vector> = standard_normals(&mut rng, k)
                    .into_iter()
                    .map(|z| Vector::from_element(1, z))
                    .collect();
                conditional_mean_estimate(&vals).unwrap()[0]
            })
            .collect();
        let var = ests.iter().map(|e| e * e).sum::<f64>() / reps as f64;
        let expected = 1.0 / k as f64;
        // chi-square with `reps` dof: relative sd sqrt(2/reps)
        assert!((var - expected).abs() < 3.0 * expected * (2.0 / reps as f64).sqrt());
    }

    /// Brute force over every pairing of two equal-size samples.
    fn brute_force_wp(a: &[f64], b: &[f64], p: f64) -> f64 {
        fn perms(k: usize) -> Vec<Vec<usize>> {
            if k == 0 {
                return vec![vec![]];
            }
            let mut out = Vec::new();
            for p in perms(k - 1) {
                for i in 0..=p.len() {
                    let mut q = p.clone();
                    q.insert(i, k - 1);
                    out.push(q);
                }
            }
            out
        }
        perms(a.len())
            .iter()
            .map(|perm| {
                perm.iter()
                    .enumerate()
                    .map(|(i, &j)| (a[i] - b[j]).abs().powf(p))
                    .sum::<f64>()
                    / a.len() as f64
            })
            .fold(f64::INFINITY, f64::min)
            .powf(1.0 / p)
    }

    #[test]
    fn wasserstein_examples() {
        assert_eq!(wasserstein_1d(&[0.0, 2.0], &[1.0, 1.0], 1.0).unwrap(), 1.0);
        assert_eq!(wasserstein_1d(&[0.0, 2.0], &[1.0, 1.0], 2.0).unwrap(), 1.0);
        assert!((brute_force_wp(&[0.0, 2.0], &[1.0, 1.0], 2.0) - 1.0).abs() < 1e-15);
        assert_eq!(wasserstein_1d(&[0.3, -1.0], &[-1.0, 0.3], 2.0).unwrap(), 0.0);
        assert_eq!(wasserstein_1d(&[], &[1.0], 1.0), Err(Error::EmptySample));
    }

    #[test]
    fn scalar_path_matches_transition_steps() {
        let source = IdioSource {
            factor: scalar_ou(1.3, 0.4, 0.7, -0.2),
            initial_cov: Mat::from_element(1, 1, 0.3),
        };
        let grid = TimeGrid::new(1.0, 25).unwrap();
        let sampler = source.sampler(&grid);
        let mut rng = stream_rng(5, StreamRole::Agent { population: 0 }, 0, 0);
        let z = standard_normals(&mut rng, sampler.draw_len());
        let path = sampler.path_from_normals(&z);
        let tr = &sampler.transition;
        let mut c = vec![-0.2];
        for k in 0..grid.steps {
            let (mut dw, mut next) = ([0.0], [0.0]);
            tr.apply(&c, &z[1 + 2 * k..3 + 2 * k], &mut dw, &mut next);
            assert_eq!(dw[0], path.dw[k]);
            assert_eq!(next[0], path.c[k + 1]);
            c = next.to_vec();
        }
    }

    #[test]
    fn wasserstein_unequal_lengths_matches_replication() {
        // replicating each sample to a common length gives the same empirical measure
        let a = [0.5, -1.0, 2.0];
        let b = [0.0, 1.0];
        let a6: Vec<f64> = a.iter().flat_map(|x| [*x, *x]).collect();
        let b6: Vec<f64> = b.iter().flat_map(|x| [*x, *x, *x]).collect();
        for p in [1.0, 2.0] {
            let direct = wasserstein_1d(&a, &b, p).unwrap();
            let expanded = wasserstein_1d(&a6, &b6, p).unwrap();
            assert!((direct - expanded).abs() < 1e-14);
        }
    }

    proptest! {
        #[test]
        fn sorted_coupling_is_optimal(
            a in proptest::collection::vec(-5.0f64..5.0, 1..6),
            shift in proptest::collection::vec(-5.0f64..5.0, 6),
            p in prop_oneof![Just(1.0), Just(2.0)],
        ) {
            let b: Vec<f64> = shift[..a.len()].to_vec();
            let fast = wasserstein_1d(&a, &b, p).unwrap();
            let brute = brute_force_wp(&a, &b, p);
            prop_assert!((fast - brute).abs() < 1e-10);
        }

        #[test]
        fn mean_gap_below_w1_below_w2(
            a in proptest::collection::vec(-5.0f64..5.0, 1..40),
            b in proptest::collection::vec(-5.0f64..5.0, 1..40),
        ) {
            let ma = a.iter().sum::<f64>() / a.len() as f64;
            let mb = b.iter().sum::<f64>() / b.len() as f64;
            let w1 = wasserstein_1d(&a, &b, 1.0).unwrap();
            let w2 = wasserstein_1d(&a, &b, 2.0).unwrap();
            prop_assert!((ma - mb).abs() <= w1 + 1e-12);
            prop_assert!(w1 <= w2 + 1e-12);
        }
    }
}
