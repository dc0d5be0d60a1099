use std::fs;
use std::path::{Path, PathBuf};
use std::process::{Command, Output};

fn abundance(args: &[&str], cwd: &Path) -> Output {
    Command::new(env!("CARGO_BIN_EXE_abundance")).args(args).current_dir(cwd).output().unwrap()
}

fn ok(args: &[&str], cwd: &Path) -> String {
    let out = abundance(args, cwd);
    assert!(out.status.success(), "{args:?}: {}", String::from_utf8_lossy(&out.stderr));
    String::from_utf8_lossy(&out.stdout).into_owned()
}

fn code(args: &[&str], cwd: &Path) -> i32 {
    abundance(args, cwd).status.code().unwrap()
}

fn read(p: impl AsRef<Path>) -> String {
    fs::read_to_string(p.as_ref()).unwrap_or_else(|e| panic!("{}: {e}", p.as_ref().display()))
}

/// Writes `run.toml` with a short chain on a simulated grid and returns its path.
fn setup(dir: &Path, extra_sim: &str) -> PathBuf {
    let cfg = dir.join("run.toml");
    fs::write(
        &cfg,
        format!(
            "seed = 3\n[paths]\ncells = \"sim/cells.csv\"\nsites = \"sim/sites.csv\"\nout = \"fit\"\n\
             [mcmc]\niterations = 300\nburn_in = 100\nthin = 2\nblocks = 3\ncheckpoint_every = 50\n\
             [simulate]\nnx = 12\nny = 10\n{extra_sim}"
        ),
    )
    .unwrap();
    ok(&["simulate", "-c", "run.toml", "--out", "sim"], dir);
    cfg
}

#[test]
fn simulate_is_deterministic_and_echoes_its_config() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "");
    ok(&["simulate", "-c", "run.toml", "--out", "sim2"], d);
    for f in ["cells.csv", "sites.csv", "truth_cells.csv", "truth_sites.csv", "truth_params.csv"] {
        assert_eq!(read(d.join("sim").join(f)), read(d.join("sim2").join(f)), "{f}");
    }
    let echo = read(d.join("sim/simulate_config.toml"));
    assert!(echo.contains("nx = 12") && echo.contains("seed = 1"), "{echo}");
    // The echo reruns to the same files.
    ok(&["simulate", "-c", "sim/simulate_config.toml", "--out", "sim3"], d);
    assert_eq!(read(d.join("sim/sites.csv")), read(d.join("sim3/sites.csv")));
}

#[test]
fn transformed_everywhere_yields_only_zeros() {
    let dir = tempfile::tempdir().unwrap();
    setup(dir.path(), "u = { kind = \"constant\", value = 0.0 }\n");
    let sites = read(dir.path().join("sim/sites.csv"));
    assert!(sites.lines().skip(1).all(|l| l.ends_with(",0")), "{sites}");
}

#[test]
fn fit_modes_resume_and_echo_agree() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "");
    let line = ok(&["fit", "-c", "run.toml"], d);
    assert!(line.contains("100 draws retained") && line.contains("MH acceptance"), "{line}");
    let chain = read(d.join("fit/chain.csv"));
    assert_eq!(chain.lines().count(), 101);
    assert!(chain.starts_with("sweep,alpha1,alpha2,beta_v1,beta_v2,theta_"));

    ok(&["fit", "-c", "run.toml", "--mode", "parallel", "--workers", "3", "--out", "par"], d);
    assert_eq!(chain, read(d.join("par/chain.csv")));
    assert_eq!(read(d.join("fit/sweeps.csv")), read(d.join("par/sweeps.csv")));

    // A run killed at sweep 180 has rows past its last checkpoint (150);
    // resuming must drop them and continue from the checkpoint.
    let base = read(d.join("run.toml"));
    fs::write(d.join("killed.toml"), base.replace("iterations = 300", "iterations = 180").replace("out = \"fit\"", "out = \"res\"")).unwrap();
    fs::write(d.join("ckpt.toml"), base.replace("iterations = 300", "iterations = 150").replace("out = \"fit\"", "out = \"ckpt\"")).unwrap();
    ok(&["fit", "-c", "killed.toml"], d);
    ok(&["fit", "-c", "ckpt.toml"], d);
    fs::copy(d.join("ckpt/checkpoint.json"), d.join("res/checkpoint.json")).unwrap();
    ok(&["fit", "-c", "run.toml", "--out", "res", "--resume"], d);
    assert_eq!(chain, read(d.join("res/chain.csv")));
    assert_eq!(read(d.join("fit/sweeps.csv")), read(d.join("res/sweeps.csv")));

    ok(&["fit", "-c", "fit/fit_config.toml", "--out", "again"], d);
    assert_eq!(chain, read(d.join("again/chain.csv")));
}

#[test]
fn summarize_writes_products_and_is_deterministic() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "u = { kind = \"constant\", value = 1.0 }\n");
    ok(&["fit", "-c", "run.toml"], d);
    let table = ok(&["summarize", "-c", "run.toml"], d);
    assert!(table.contains("v1") && table.contains("v2"), "{table}");
    let products = d.join("fit/products");
    for h in 0..4 {
        assert_eq!(read(products.join(format!("p{h}.csv"))), read(products.join(format!("r{h}.csv"))));
    }
    let p0 = read(products.join("p0.csv"));
    assert_eq!(p0.lines().next().unwrap(), "cell_id,x,y,value,lo95,hi95");
    assert_eq!(p0.lines().count(), 121);
    ok(&["summarize", "-c", "run.toml", "--out", "again", "--chain", "fit/chain.csv"], d);
    for f in ["coefficients.csv", "diagnostics.csv", "products/theta.csv"] {
        assert_eq!(read(d.join("fit").join(f)), read(d.join("again").join(f)), "{f}");
    }
    let coef = read(d.join("fit/coefficients.csv"));
    assert!(coef.starts_with("covariate,mean,ci_width,lo95,hi95,significant,table"));
}

#[test]
fn no_sites_means_the_coefficients_follow_their_prior() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "");
    fs::write(d.join("sim/sites.csv"), "cell_id,y\n").unwrap();
    let cfg = read(d.join("run.toml"))
        .replace("iterations = 300", "iterations = 2000")
        .replace("burn_in = 100", "burn_in = 0")
        .replace("thin = 2", "thin = 1");
    fs::write(d.join("prior.toml"), cfg).unwrap();
    ok(&["fit", "-c", "prior.toml"], d);
    let chain = read(d.join("fit/chain.csv"));
    let draws: Vec<f64> = chain.lines().skip(1).map(|l| l.split(',').nth(3).unwrap().parse().unwrap()).collect();
    let n = draws.len() as f64;
    assert_eq!(n, 2000.0);
    let mean = draws.iter().sum::<f64>() / n;
    let var = draws.iter().map(|b| (b - mean).powi(2)).sum::<f64>() / (n - 1.0);
    // Prior N(0, 100): standard errors 0.22 on the mean and 3.2 on the variance.
    assert!(mean.abs() < 5.0 * 0.224, "{mean}");
    assert!((var - 100.0).abs() < 5.0 * 3.16, "{var}");
}

#[test]
fn exit_codes() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    setup(d, "");
    assert_eq!(code(&["fit", "--no-such-flag"], d), 1);
    fs::write(d.join("typo.toml"), "[mcmc]\niteratons = 5\n").unwrap();
    assert_eq!(code(&["fit", "-c", "typo.toml"], d), 1);
    fs::write(d.join("burn.toml"), "[mcmc]\niterations = 5\nburn_in = 5\n").unwrap();
    assert_eq!(code(&["fit", "-c", "burn.toml"], d), 1);

    let bad = read(d.join("run.toml")).replace("sim/sites.csv", "bad_sites.csv");
    fs::write(d.join("bad.toml"), &bad).unwrap();
    fs::write(d.join("bad_sites.csv"), "cell_id,y\n0,1\n12345,2\n").unwrap();
    let out = abundance(&["fit", "-c", "bad.toml"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("12345"));

    let cells = read(d.join("sim/cells.csv"));
    let mut lines: Vec<String> = cells.lines().map(String::from).collect();
    let mut fields: Vec<&str> = lines[4].split(',').collect();
    fields[3] = "1.7";
    lines[4] = fields.join(",");
    fs::write(d.join("sim/cells.csv"), lines.join("\n")).unwrap();
    let out = abundance(&["fit", "-c", "run.toml"], d);
    assert_eq!(out.status.code(), Some(2));
    assert!(String::from_utf8_lossy(&out.stderr).contains("line 5"), "{}", String::from_utf8_lossy(&out.stderr));

    fs::remove_file(d.join("sim/cells.csv")).unwrap();
    assert_eq!(code(&["fit", "-c", "run.toml"], d), 2);
    assert_eq!(code(&["summarize", "-c", "run.toml", "--chain", "missing.csv"], d), 2);
}

#[test]
fn partition_bench_reports_feasible_block_counts() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    fs::write(d.join("bench.toml"), "[bench]\nnx = 15\nny = 8\nblocks = [1, 4, 9]\nworkers = [1, 2]\nrepetitions = 2\n").unwrap();
    let out = abundance(&["partition-bench", "-c", "bench.toml", "--out", "b"], d);
    assert!(out.status.success(), "{}", String::from_utf8_lossy(&out.stderr));
    assert!(String::from_utf8_lossy(&out.stderr).contains("L = 9"));
    let csv = read(d.join("b/bench.csv"));
    let mut lines = csv.lines();
    assert_eq!(lines.next().unwrap(), "L,workers,cells,critical_path,ms_per_sweep,speedup");
    let rows: Vec<Vec<&str>> = lines.map(|l| l.split(',').collect()).collect();
    assert_eq!(rows.len(), 4);
    assert_eq!(rows[0][..4], ["1", "1", "120", "120"]);
    // Four blocks along x: three separator columns of 8, blocks of 3 columns.
    assert_eq!(rows[2][..4], ["4", "1", "120", "48"]);
}

#[test]
fn validate_writes_the_oracle_report() {
    let dir = tempfile::tempdir().unwrap();
    let d = dir.path();
    ok(&["validate", "--kernel-draws", "20000", "--joint-length", "20000", "--out", "v"], d);
    let report = read(d.join("v/oracle_report.csv"));
    assert!(report.starts_with("check,statistic,threshold,passed"));
    assert_eq!(report.lines().count(), 1 + 33 + 16);
}
