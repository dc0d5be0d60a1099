use std::path::{Path, PathBuf};
use std::time::Instant;

use anyhow::{bail, Context};
use latent_abundance::io::{self, Checkpoint, ChainWriter, SweepLog};
use latent_abundance::lattice::{partition_stripes, SeparatorPartition};
use latent_abundance::model::{ChainState, Dataset, CATEGORIES};
use latent_abundance::oracle::{self, JointTestConfig, ReportRow};
use latent_abundance::sampler::{Fault, Sampler};
use latent_abundance::schedule::{bench_theta_sweep, ThetaSchedule};
use latent_abundance::sim::{simulate_dataset, SimConfig};
use latent_abundance::summary;
use latent_abundance::Error;

use crate::config::RunConfig;
use crate::{Command, UsageError};

pub fn run(cmd: Command) -> anyhow::Result<()> {
    match cmd {
        Command::Simulate { config, seed, out } => {
            let mut cfg = load(config.as_deref())?;
            if let Some(s) = seed {
                cfg.simulate.seed = s;
            }
            override_out(&mut cfg, out);
            simulate(&cfg)
        }
        Command::Fit { config, mode, workers, seed, out, resume, reference_settings } => {
            let mut cfg = load(config.as_deref())?;
            if reference_settings {
                cfg.apply_reference_settings();
            }
            if let Some(m) = mode {
                cfg.mcmc.mode = m;
            }
            if let Some(w) = workers {
                cfg.mcmc.workers = w;
            }
            if let Some(s) = seed {
                cfg.seed = s;
            }
            override_out(&mut cfg, out);
            fit(&cfg, resume)
        }
        Command::Summarize { config, chain, out, midpoints } => {
            let mut cfg = load(config.as_deref())?;
            if let Some(c) = chain {
                cfg.paths.chain = Some(c);
            }
            if let Some(m) = midpoints {
                cfg.summarize.midpoints = m
                    .try_into()
                    .map_err(|_| UsageError("--midpoints takes exactly four values".into()))?;
            }
            override_out(&mut cfg, out);
            summarize(&cfg)
        }
        Command::PartitionBench { config, data, out } => {
            let mut cfg = load(config.as_deref())?;
            override_out(&mut cfg, out);
            partition_bench(&cfg, data)
        }
        Command::Validate { config, kernel_draws, joint_length, faults, out } => {
            let mut cfg = load(config.as_deref())?;
            override_out(&mut cfg, out);
            validate(&cfg, kernel_draws, joint_length, faults)
        }
    }
}

fn load(path: Option<&Path>) -> anyhow::Result<RunConfig> {
    let cfg = match path {
        Some(p) => RunConfig::load(p)?,
        None => RunConfig::default(),
    };
    Ok(cfg)
}

fn override_out(cfg: &mut RunConfig, out: Option<PathBuf>) {
    if let Some(o) = out {
        cfg.paths.out = o;
    }
}

fn prepare_out(cfg: &RunConfig, echo_name: &str) -> anyhow::Result<PathBuf> {
    let out = cfg.paths.out.clone();
    std::fs::create_dir_all(&out).with_context(|| format!("creating {}", out.display()))?;
    cfg.echo(&out.join(echo_name))?;
    Ok(out)
}

fn load_dataset(cfg: &RunConfig) -> anyhow::Result<Dataset> {
    let (cells, names) = io::read_cells(&cfg.paths.cells)?;
    let sites = io::read_sites(&cfg.paths.sites)?;
    Ok(Dataset::new(cells, &sites, names, cfg.model.threshold, true)?)
}

fn build_partition(data: &Dataset, blocks: usize) -> latent_abundance::Result<SeparatorPartition> {
    partition_stripes(data.adjacency(), data.grid(), blocks)
}

// ---------------------------------------------------------------------------

fn simulate(cfg: &RunConfig) -> anyhow::Result<()> {
    cfg.simulate.validate().map_err(|e| UsageError(format!("[simulate]: {e}")))?;
    let start = Instant::now();
    let out = prepare_out(cfg, "simulate_config.toml")?;
    let sim = simulate_dataset(&cfg.simulate)?;
    io::write_simulation(&out, &sim)?;
    let mut counts = [0usize; CATEGORIES];
    for s in &sim.sites {
        counts[s.y as usize] += 1;
    }
    println!(
        "simulate: {} cells, {} sites (y counts {:?}), seed {}, ICAR {:?}, {:.2}s -> {}",
        sim.cells.len(),
        sim.sites.len(),
        counts,
        cfg.simulate.seed,
        sim.truth.car_method,
        start.elapsed().as_secs_f64(),
        out.display()
    );
    Ok(())
}

fn is_retained(cfg: &RunConfig, sweep: u64) -> bool {
    sweep > cfg.mcmc.burn_in && (sweep - cfg.mcmc.burn_in).is_multiple_of(cfg.mcmc.thin)
}

fn fit(cfg: &RunConfig, resume: bool) -> anyhow::Result<()> {
    cfg.validate()?;
    let data = load_dataset(cfg)?;
    let out = prepare_out(cfg, "fit_config.toml")?;
    let partition = build_partition(&data, cfg.mcmc.blocks)?;
    io::write_partition(&out.join("partition.csv"), &data, &partition)?;
    let schedule = ThetaSchedule::new(partition, data.adjacency(), cfg.mcmc.mode, cfg.mcmc.workers)?;
    let sampler = Sampler::new(&data, cfg.hyper(), cfg.sampler_options(), schedule, cfg.seed)?;

    let chain_path = out.join("chain.csv");
    let log_path = out.join("sweeps.csv");
    let ckpt_path = out.join("checkpoint.json");

    let (mut state, first, mut retained) = if resume {
        let cp = Checkpoint::load(&ckpt_path).with_context(|| format!("loading {}", ckpt_path.display()))?;
        if cp.seed != cfg.seed {
            bail!(UsageError(format!("checkpoint was written with seed {}, config has {}", cp.seed, cfg.seed)));
        }
        if cp.state.params.theta.len() != data.n_cells() || cp.state.latents.z_p.len() != data.n_sites() {
            bail!(Error::InvalidInput("checkpoint does not match the dataset dimensions".into()));
        }
        io::truncate_rows_after(&chain_path, cp.sweep)?;
        io::truncate_rows_after(&log_path, cp.sweep)?;
        (cp.state, cp.sweep + 1, cp.retained)
    } else {
        (sampler.initialize(&data)?, 1, 0)
    };
    let mut chain = ChainWriter::create(&chain_path, &data, resume)?;
    let mut log = SweepLog::create(&log_path, resume)?;

    let start = Instant::now();
    let (mut accepted, mut proposals) = (0.0, 0usize);
    let save = |sweep: u64, state: &ChainState, retained: usize| {
        Checkpoint { sweep, seed: cfg.seed, retained, state: state.clone() }.save(&ckpt_path)
    };
    for sweep in first..=cfg.mcmc.iterations {
        let report = sampler.sweep(&data, &mut state, sweep)?;
        accepted += report.mh_accept_rate * report.mh_proposals as f64;
        proposals += report.mh_proposals;
        log.push(&report)?;
        if is_retained(cfg, sweep) {
            chain.push(sweep, &state.params)?;
            retained += 1;
        }
        if cfg.mcmc.checkpoint_every > 0 && sweep % cfg.mcmc.checkpoint_every == 0 {
            chain.flush()?;
            log.flush()?;
            save(sweep, &state, retained)?;
        }
    }
    chain.flush()?;
    log.flush()?;
    save(cfg.mcmc.iterations, &state, retained)?;
    let rate = if proposals > 0 { accepted / proposals as f64 } else { 0.0 };
    println!(
        "fit: sweeps {}..={} ({:?}, {} workers), {} draws retained, MH acceptance {:.3}, wall {:.1}s -> {}",
        first,
        cfg.mcmc.iterations,
        cfg.mcmc.mode,
        cfg.mcmc.workers,
        retained,
        rate,
        start.elapsed().as_secs_f64(),
        chain_path.display()
    );
    Ok(())
}

fn summarize(cfg: &RunConfig) -> anyhow::Result<()> {
    let data = load_dataset(cfg)?;
    let chain = io::read_chain(&cfg.chain_path(), &data)?;
    if chain.draws.is_empty() {
        bail!(Error::InvalidInput(format!("{} holds no draws", cfg.chain_path().display())));
    }
    let out = prepare_out(cfg, "summarize_config.toml")?;
    let (cells, violations) = summary::summarize_cells(&data, &chain.draws, &cfg.summarize.midpoints)?;
    if let Some(v) = violations.first() {
        bail!(Error::Invariant(format!(
            "{} product violations; first: draw {} cell {} {} = {}",
            violations.len(),
            v.draw,
            v.cell_id,
            v.what,
            v.value
        )));
    }
    let products = out.join("products");
    std::fs::create_dir_all(&products)?;
    for (name, values) in summary::products(&cells) {
        io::write_product(&products.join(format!("{name}.csv")), &cells, &values)?;
    }

    let p = data.n_covariates();
    let beta: Vec<Vec<f64>> = (0..p).map(|k| chain.draws.iter().map(|d| d.beta[k]).collect()).collect();
    let table = summary::coefficient_table(data.covariate_names(), &beta)?;
    io::write_coefficients(&out.join("coefficients.csv"), &table)?;

    let mut w = std::fs::File::create(out.join("diagnostics.csv"))?;
    use std::io::Write;
    writeln!(w, "parameter,mean,ess,split_rhat")?;
    let mut scalars: Vec<(String, Vec<f64>)> = vec![
        ("alpha1".into(), chain.draws.iter().map(|d| d.alpha.a1).collect()),
        ("alpha2".into(), chain.draws.iter().map(|d| d.alpha.a2).collect()),
    ];
    scalars.extend(data.covariate_names().iter().map(|n| format!("beta_{n}")).zip(beta));
    for (name, x) in &scalars {
        let mean = x.iter().sum::<f64>() / x.len() as f64;
        writeln!(
            w,
            "{name},{mean},{},{}",
            summary::effective_sample_size(x),
            summary::split_rhat(x)
        )?;
    }
    println!("summarize: {} draws, {} cells -> {}", chain.draws.len(), cells.len(), out.display());
    for r in &table {
        println!("  {:<12} {:>8.3} ({:.3}){}", r.name, r.mean, r.width, if r.significant { " *" } else { "" });
    }
    Ok(())
}

fn partition_bench(cfg: &RunConfig, use_data: bool) -> anyhow::Result<()> {
    let b = &cfg.bench;
    if b.blocks.is_empty() || b.workers.is_empty() || b.repetitions == 0 {
        bail!(UsageError("[bench] needs non-empty blocks and workers and repetitions > 0".into()));
    }
    let data = if use_data {
        load_dataset(cfg)?
    } else {
        let sim = SimConfig { nx: b.nx, ny: b.ny, threshold: cfg.model.threshold, seed: cfg.seed, ..cfg.simulate.clone() };
        simulate_dataset(&sim)?.dataset(cfg.model.threshold)?
    };
    let out = prepare_out(cfg, "bench_config.toml")?;
    let mut rows = Vec::new();
    for &l in &b.blocks {
        match bench_theta_sweep(&data, &cfg.hyper(), &[l], &b.workers, b.repetitions, cfg.seed) {
            Ok(r) => rows.extend(r),
            Err(e @ (Error::InfeasiblePartition { .. } | Error::InvalidPartition(_))) => {
                eprintln!("L = {l}: {e}");
            }
            Err(e) => return Err(e.into()),
        }
    }
    io::write_bench(&out.join("bench.csv"), &rows)?;
    println!("{:>4} {:>7} {:>9} {:>12} {:>8}", "L", "workers", "steps", "ms/sweep", "speedup");
    for r in &rows {
        println!(
            "{:>4} {:>7} {:>9} {:>12.3} {:>8.2}",
            r.blocks, r.workers, r.critical_path, r.ms_per_sweep, r.speedup
        );
    }
    Ok(())
}

fn validate(cfg: &RunConfig, kernel_draws: usize, joint_length: usize, faults: bool) -> anyhow::Result<()> {
    let out = prepare_out(cfg, "validate_config.toml")?;
    let joint = JointTestConfig {
        forward_draws: joint_length,
        chain_length: joint_length,
        seed: cfg.seed,
        ..JointTestConfig::default()
    };
    let mut rows: Vec<ReportRow> = oracle::kernel_suite(kernel_draws, None)?.iter().map(ReportRow::from).collect();
    rows.extend(oracle::joint_distribution_test(&joint, None)?.iter().map(ReportRow::from));
    if faults {
        for f in Fault::ALL {
            let d = oracle::detect_fault(f, kernel_draws, &joint)?;
            rows.push(ReportRow {
                check: format!("fault_{f:?}"),
                statistic: (d.failed_kernels.len() + d.failed_joint.len()) as f64,
                threshold: 1.0,
                passed: d.detected(),
            });
        }
    }
    let path = out.join("oracle_report.csv");
    io::write_report(&path, &rows)?;
    let failed: Vec<&ReportRow> = rows.iter().filter(|r| !r.passed).collect();
    println!("validate: {} checks, {} failed -> {}", rows.len(), failed.len(), path.display());
    for r in &failed {
        println!("  FAIL {} statistic {:.4} threshold {}", r.check, r.statistic, r.threshold);
    }
    if !failed.is_empty() {
        bail!(Error::Numeric(format!("{} oracle checks failed", failed.len())));
    }
    Ok(())
}
