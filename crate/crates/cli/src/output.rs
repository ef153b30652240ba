//! CSV tables and the run manifest.

use std::collections::BTreeMap;
use std::fmt::Write as _;
use std::fs;
use std::path::{Path, PathBuf};

use mfclear_core::clearing::{ClearingReport, WassersteinReport};
use mfclear_core::stochastics::{fmt_f64, ScenarioSet};
use mfclear_core::{AffineSolution, EquilibriumSolution};
use serde::Serialize;
use sha2::{Digest, Sha256};

pub fn sha256_hex(bytes: &[u8]) -> String {
    hex::encode(Sha256::digest(bytes))
}

#[derive(Debug, Clone, Serialize)]
pub struct GridInfo {
    pub horizon: f64,
    pub steps: usize,
}

/// Inputs, output checksums and timings of one command run.
#[derive(Debug, Clone, Serialize)]
pub struct RunManifest {
    pub tool: String,
    pub version: String,
    pub command: String,
    pub config: String,
    pub config_sha256: String,
    pub seed: u64,
    pub grid: GridInfo,
    pub mode: String,
    pub workers: usize,
    pub arguments: BTreeMap<String, String>,
    pub outputs: BTreeMap<String, String>,
    pub timings_ms: BTreeMap<String, f64>,
}

/// Output directory that records a checksum for every file written.
pub struct OutDir {
    dir: PathBuf,
    pub checksums: BTreeMap<String, String>,
}

impl OutDir {
    pub fn create(dir: &Path) -> std::io::Result<Self> {
        fs::create_dir_all(dir)?;
        Ok(Self {
            dir: dir.to_path_buf(),
            checksums: BTreeMap::new(),
        })
    }

    pub fn write(&mut self, name: &str, content: &str) -> std::io::Result<()> {
        fs::write(self.dir.join(name), content)?;
        self.checksums.insert(name.to_string(), sha256_hex(content.as_bytes()));
        Ok(())
    }

    pub fn write_manifest(&self, manifest: &RunManifest) -> std::io::Result<()> {
        let mut text = serde_json::to_string_pretty(manifest).map_err(std::io::Error::other)?;
        text.push('\n');
        fs::write(self.dir.join("manifest.json"), text)
    }
}

fn header(cols: &[String]) -> String {
    let mut s = cols.join(",");
    s.push('\n');
    s
}

fn indexed(prefix: &str, n: usize) -> impl Iterator<Item = String> + '_ {
    (1..=n).map(move |i| format!("{prefix}_{i}"))
}

/// `m, k, t, phi_*, c0_*` and, with several populations, `ybar_p<p>_*`.
pub fn price_csv(sol: &EquilibriumSolution, scenarios: &ScenarioSet) -> String {
    let n = sol.n;
    let multi = sol.populations.len() > 1;
    let mut cols = vec!["m".to_string(), "k".into(), "t".into()];
    cols.extend(indexed("phi", n));
    cols.extend(indexed("c0", n));
    if multi {
        for p in 0..sol.populations.len() {
            cols.extend(indexed(&format!("ybar_p{p}"), n));
        }
    }
    let mut out = header(&cols);
    for m in 0..sol.common_paths {
        for k in 0..sol.grid.len() {
            let _ = write!(out, "{m},{k},{}", fmt_f64(sol.grid.node(k)));
            for v in sol.price_at(m, k) {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            for v in &scenarios.common[m].c0[k * n..(k + 1) * n] {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
            if multi {
                for pop in &sol.populations {
                    for v in &pop.ybar[m][k * n..(k + 1) * n] {
                        let _ = write!(out, ",{}", fmt_f64(*v));
                    }
                }
            }
            out.push('\n');
        }
    }
    out
}

/// `key, value` rows: solver summary followed by the residual history.
pub fn diagnostics_csv(sol: &EquilibriumSolution, extra: &[(&str, f64)]) -> String {
    let d = &sol.diagnostics;
    let mut out = String::from("key,value\n");
    let _ = writeln!(out, "mode,{}", sol.mode.label());
    let _ = writeln!(out, "iterations,{}", d.iterations);
    let _ = writeln!(out, "final_residual,{}", fmt_f64(d.final_residual));
    let _ = writeln!(out, "damping,{}", fmt_f64(d.damping));
    let _ = writeln!(out, "in_sample_imbalance,{}", fmt_f64(sol.in_sample_imbalance()));
    for (k, v) in extra {
        let _ = writeln!(out, "{k},{}", fmt_f64(*v));
    }
    for (i, r) in d.residuals.iter().enumerate() {
        let _ = writeln!(out, "residual_{},{}", i + 1, fmt_f64(*r));
    }
    out
}

/// Per-copy `X`, `Y`, `α̂` at every node.
pub fn solution_csv(sol: &EquilibriumSolution) -> String {
    let n = sol.n;
    let multi = sol.populations.len() > 1;
    let mut cols = vec!["m".to_string()];
    if multi {
        cols.push("p".into());
    }
    cols.extend(["i".to_string(), "k".into(), "t".into()]);
    cols.extend(indexed("X", n));
    cols.extend(indexed("Y", n));
    cols.extend(indexed("alpha", n));
    let mut out = header(&cols);
    let kk = sol.copies_per_path;
    for m in 0..sol.common_paths {
        for (p, pop) in sol.populations.iter().enumerate() {
            for i in 0..kk {
                let c = &pop.copies[m * kk + i];
                for k in 0..sol.grid.len() {
                    let _ = write!(out, "{m},");
                    if multi {
                        let _ = write!(out, "{p},");
                    }
                    let _ = write!(out, "{i},{k},{}", fmt_f64(sol.grid.node(k)));
                    for series in [&c.x, &c.y, &c.alpha] {
                        for v in &series[k * n..(k + 1) * n] {
                            let _ = write!(out, ",{}", fmt_f64(*v));
                        }
                    }
                    out.push('\n');
                }
            }
        }
    }
    out
}

pub fn paths_csv(scenarios: &ScenarioSet) -> String {
    let mut buf = Vec::new();
    scenarios.write_csv(&mut buf).expect("writing to memory");
    String::from_utf8(buf).expect("ascii output")
}

/// `N, reps, metric, stderr, epsilon_N, C_hat` and per-population metrics when there are several.
pub fn clearing_csv(report: &ClearingReport) -> String {
    let npop = report.rows.first().map_or(0, |r| r.per_population.len());
    let mut cols: Vec<String> = ["N", "reps", "metric", "stderr", "epsilon_N", "C_hat"]
        .iter()
        .map(|s| s.to_string())
        .collect();
    if npop > 1 {
        cols.extend((0..npop).map(|p| format!("metric_p{p}")));
    }
    let mut out = header(&cols);
    for r in &report.rows {
        let _ = write!(
            out,
            "{},{},{},{},{},{}",
            r.n_agents,
            r.reps,
            fmt_f64(r.metric),
            fmt_f64(r.stderr),
            fmt_f64(r.epsilon),
            fmt_f64(r.c_hat)
        );
        if npop > 1 {
            for v in &r.per_population {
                let _ = write!(out, ",{}", fmt_f64(*v));
            }
        }
        out.push('\n');
    }
    out
}

pub fn wasserstein_csv(report: &WassersteinReport) -> String {
    let mut out = String::from("t,N,W1,W2,mean_gap\n");
    for r in &report.rows {
        let _ = writeln!(
            out,
            "{},{},{},{},{}",
            fmt_f64(r.t),
            r.n_agents,
            fmt_f64(r.w1),
            fmt_f64(r.w2),
            fmt_f64(r.mean_gap)
        );
    }
    out
}

/// `t, A_ij, Abar_ij, beta_ij, beta0_i` with matrices in row-major order.
pub fn riccati_csv(sol: &AffineSolution) -> String {
    let n = sol.n;
    let mut cols = vec!["t".to_string()];
    for name in ["A", "Abar", "beta"] {
        for i in 1..=n {
            for j in 1..=n {
                cols.push(format!("{name}_{i}{j}"));
            }
        }
    }
    cols.extend(indexed("beta0", n));
    let mut out = header(&cols);
    for k in 0..sol.grid.len() {
        out.push_str(&fmt_f64(sol.grid.node(k)));
        for m in [sol.a(k), sol.abar(k), sol.beta(k)] {
            for i in 0..n {
                for j in 0..n {
                    let _ = write!(out, ",{}", fmt_f64(m[(i, j)]));
                }
            }
        }
        for v in sol.beta0(k).iter() {
            let _ = write!(out, ",{}", fmt_f64(*v));
        }
        out.push('\n');
    }
    out
}
