use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn config(name: &str) -> PathBuf {
    Path::new(env!("CARGO_MANIFEST_DIR")).join("../../configs").join(name)
}

fn mfclear(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_mfclear"))
        .args(args)
        .env_remove("MFCLEAR_WORKERS")
        .output()
        .expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn cfg(name: &str) -> String {
    config(name).display().to_string()
}

fn read(dir: &Path, name: &str) -> String {
    std::fs::read_to_string(dir.join(name)).unwrap()
}

/// Rows of a CSV file as string fields, header first.
fn rows(text: &str) -> Vec<Vec<String>> {
    text.lines().map(|l| l.split(',').map(str::to_string).collect()).collect()
}

fn column(table: &[Vec<String>], name: &str) -> usize {
    table[0].iter().position(|c| c == name).unwrap_or_else(|| panic!("no column {name}"))
}

#[test]
fn validate_futures_prints_gamma() {
    let o = mfclear(&["validate", &cfg("futures.toml")]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(stdout(&o).contains("monotonicity (futures terminal): gamma = 0.5"));
}

#[test]
fn validate_rejects_indefinite_lambda() {
    let o = mfclear(&["validate", &cfg("not_pd.toml")]);
    assert_eq!(code(&o), 2);
    assert!(stderr(&o).contains("positive definite"));
}

#[test]
fn validate_short_t_override() {
    let o = mfclear(&["validate", &cfg("adversarial.toml")]);
    assert_eq!(code(&o), 2);
    let o = mfclear(&["validate", &cfg("adversarial.toml"), "--allow-short-t"]);
    assert_eq!(code(&o), 0);
    assert!(stderr(&o).contains("warning"));
}

#[test]
fn config_errors_name_line_and_key() {
    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("bad.toml");
    std::fs::write(&path, "[model]\nn = 1\nhorizon = 1.0\nsteps = 10\n\n[lq]\nq = [1.0, 2.0]\n").unwrap();
    let o = mfclear(&["validate", path.to_str().unwrap()]);
    assert_eq!(code(&o), 2);
    let err = stderr(&o);
    assert!(err.contains("line 7") && err.contains("lq.q"), "{err}");
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&mfclear(&["validate", "/nonexistent/model.toml"])), 1);
    assert_eq!(code(&mfclear(&["solve"])), 1);
    assert_eq!(code(&mfclear(&["frobnicate"])), 1);
    assert_eq!(code(&mfclear(&["--help"])), 0);
    assert_eq!(code(&mfclear(&["--version"])), 0);
}

#[test]
fn futures_price_pins_to_dumped_payoff() {
    let dir = tempfile::tempdir().unwrap();
    let out = dir.path().to_str().unwrap();
    let o = mfclear(&["solve", &cfg("futures.toml"), "-M", "4", "-K", "8", "--dump-paths", "--out", out]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let price = rows(&read(dir.path(), "price.csv"));
    let paths = rows(&read(dir.path(), "paths.csv"));
    let (pm, pk, phi) = (column(&price, "m"), column(&price, "k"), column(&price, "phi_1"));
    let (qm, qi, qk, c0) = (
        column(&paths, "m"),
        column(&paths, "i"),
        column(&paths, "k"),
        column(&paths, "c0_1"),
    );
    let last = "100";
    let mut checked = 0;
    for row in price[1..].iter().filter(|r| r[pk] == last) {
        let dumped = paths[1..]
            .iter()
            .find(|p| p[qm] == row[pm] && p[qi] == "0" && p[qk] == last)
            .unwrap();
        assert_eq!(row[phi], dumped[c0]);
        checked += 1;
    }
    assert_eq!(checked, 4);
}

#[test]
fn same_seed_gives_same_checksums() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    for d in [&a, &b] {
        let o = mfclear(&["solve", &cfg("general.toml"), "-M", "3", "-K", "4", "--seed", "9", "--out", d.path().to_str().unwrap()]);
        assert_eq!(code(&o), 0);
    }
    let outputs = |d: &Path| -> serde_json::Value {
        let m: serde_json::Value = serde_json::from_str(&read(d, "manifest.json")).unwrap();
        m["outputs"].clone()
    };
    assert_eq!(outputs(a.path()), outputs(b.path()));
    assert_eq!(read(a.path(), "price.csv"), read(b.path(), "price.csv"));
}

#[test]
fn manifest_records_inputs() {
    let dir = tempfile::tempdir().unwrap();
    let o = Command::new(env!("CARGO_BIN_EXE_mfclear"))
        .args(["solve", &cfg("general.toml"), "-M", "2", "-K", "2", "--seed", "5", "--steps", "20"])
        .args(["--out", dir.path().to_str().unwrap()])
        .env("MFCLEAR_WORKERS", "2")
        .output()
        .unwrap();
    assert_eq!(code(&o), 0);
    let m: serde_json::Value = serde_json::from_str(&read(dir.path(), "manifest.json")).unwrap();
    assert_eq!(m["workers"], 2);
    assert_eq!(m["seed"], 5);
    assert_eq!(m["grid"]["steps"], 20);
    assert_eq!(m["mode"], "lq");
    let text = std::fs::read(config("general.toml")).unwrap();
    assert_eq!(m["config_sha256"], mfclear_cli::output::sha256_hex(&text));
    assert_eq!(
        m["outputs"]["price.csv"],
        mfclear_cli::output::sha256_hex(read(dir.path(), "price.csv").as_bytes())
    );
}

#[test]
fn single_copy_refused() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfclear(&["solve", &cfg("futures.toml"), "-K", "1", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("at least 2 copies"));
}

#[test]
fn saturating_model_uses_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfclear(&["solve", &cfg("saturating.toml"), "-M", "1", "-K", "4", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    assert!(read(dir.path(), "diagnostics.csv").contains("mode,nonlinear"));
    let o = mfclear(&["solve", &cfg("general.toml"), "--mode", "nonlinear", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 2, "common noise is outside the fixed-point route");
}

#[test]
fn clearing_needs_three_sizes() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfclear(&["clearing", &cfg("futures.toml"), "--n-list", "16,64", "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
    assert!(stderr(&o).contains("at least 3"));
}

#[test]
fn clearing_routes_multipop_config() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfclear(&[
        "clearing",
        &cfg("multipop.toml"),
        "--n-list",
        "10,20,40",
        "--reps",
        "4",
        "-M",
        "4",
        "-K",
        "4",
        "--steps",
        "20",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = rows(&read(dir.path(), "clearing.csv"));
    assert_eq!(table[0][6..], ["metric_p0", "metric_p1"]);
    assert_eq!(table.len(), 4);
    assert!(stdout(&o).contains("slope"));
}

#[test]
fn clearing_with_wasserstein_output() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfclear(&[
        "clearing",
        &cfg("futures.toml"),
        "--n-list",
        "8,16,32",
        "--reps",
        "2",
        "-M",
        "4",
        "--steps",
        "20",
        "--wasserstein",
        "--out",
        dir.path().to_str().unwrap(),
    ]);
    assert_eq!(code(&o), 0, "{}", stderr(&o));
    let table = rows(&read(dir.path(), "wasserstein.csv"));
    assert_eq!(table[0], ["t", "N", "W1", "W2", "mean_gap"]);
    // four nodes for each of three sizes
    assert_eq!(table.len(), 13);
}

#[test]
fn riccati_scalar_fixed_point() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfclear(&["riccati", &cfg("riccati_scalar.toml"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 0);
    let table = rows(&read(dir.path(), "riccati.csv"));
    let a = column(&table, "A_11");
    assert_eq!(table.len(), 102);
    for r in &table[1..] {
        assert_eq!(r[a].parse::<f64>().unwrap(), 1.0);
    }
}

#[test]
fn riccati_blowup_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfclear(&["riccati", &cfg("blowup.toml"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 3);
    let err = stderr(&o);
    assert!(err.contains("node 120"), "{err}");
}

#[test]
fn riccati_refinement_agrees_at_endpoints() {
    let a = tempfile::tempdir().unwrap();
    let b = tempfile::tempdir().unwrap();
    let run = |d: &Path, steps: &str| {
        let o = mfclear(&["riccati", &cfg("general.toml"), "--steps", steps, "--out", d.to_str().unwrap()]);
        assert_eq!(code(&o), 0);
        rows(&read(d, "riccati.csv"))
    };
    let coarse = run(a.path(), "100");
    let fine = run(b.path(), "200");
    assert_eq!(fine.len() - 1, 2 * (coarse.len() - 1) - 1);
    for (rc, rf) in [(1, 1), (coarse.len() - 1, fine.len() - 1)] {
        for j in 1..coarse[0].len() {
            let u: f64 = coarse[rc][j].parse().unwrap();
            let v: f64 = fine[rf][j].parse().unwrap();
            assert!((u - v).abs() <= 1e-8, "{}: {u} vs {v}", coarse[0][j]);
        }
    }
}

#[test]
fn riccati_refuses_multipop() {
    let dir = tempfile::tempdir().unwrap();
    let o = mfclear(&["riccati", &cfg("multipop.toml"), "--out", dir.path().to_str().unwrap()]);
    assert_eq!(code(&o), 1);
}
