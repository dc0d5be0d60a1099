//! Acceptance criteria. Prints one verdict line per criterion and exits
//! non-zero if any fails. Pass criterion numbers as arguments to run a subset:
//! `cargo test --test acceptance -- 1 6`.

use std::collections::HashSet;
use std::process::ExitCode;
use std::time::Instant;

use latent_abundance::lattice::{build_adjacency, partition_layout, CellGrid, SeparatorPartition, StripeLayout};
use latent_abundance::model::{Dataset, HyperParams};
use latent_abundance::oracle::{
    detect_fault, joint_distribution_test, kernel_suite, JointTestConfig, KernelId, ORACLE_SEEDS,
};
use latent_abundance::sampler::{Fault, Sampler, SamplerOptions};
use latent_abundance::schedule::{bench_theta_sweep, ExecMode, ThetaSchedule};
use latent_abundance::sim::{simulate_dataset, SimConfig, SimOutput, SiteCount, UField};
use latent_abundance::stats::{left_tail_mean, orthant_prob, orthant_prob_quadrature};
use latent_abundance::summary::{pearson, summarize_cells, Interval, DEFAULT_MIDPOINTS};
use latent_abundance_verification::{criterion, fit, Verdict, DEFAULT_RUN};

type Check = Result<(bool, String), String>;

fn err<E: std::fmt::Display>(e: E) -> String {
    e.to_string()
}

// ---------------------------------------------------------------------------

fn scheduler_steps() -> Check {
    let grid = CellGrid::rectangular(15, 8);
    let adj = build_adjacency(&grid, 1.5).map_err(err)?;
    let p = partition_layout(&adj, &grid, StripeLayout { across: 4, down: 3 }).map_err(err)?;
    let sizes: Vec<usize> = p.blocks.iter().map(Vec::len).collect();
    let single = SeparatorPartition::single_block(grid.len());
    single.validate(&adj).map_err(err)?;
    let ok = p.boundary.len() == 48
        && p.blocks.len() == 12
        && sizes.iter().all(|&s| s == 6)
        && p.sequential_step_count() == 54
        && single.sequential_step_count() == 120;
    Ok((
        ok,
        format!(
            "|B| = {}, {} blocks of sizes {:?}, steps {} vs {} for one block (want 48, 12×6, 54 vs 120)",
            p.boundary.len(),
            p.blocks.len(),
            sizes.iter().collect::<HashSet<_>>(),
            p.sequential_step_count(),
            single.sequential_step_count()
        ),
    ))
}

fn chain_equivalence() -> Check {
    let cfg = SimConfig { nx: 30, ny: 30, seed: 11, ..Default::default() };
    let data = simulate_dataset(&cfg).map_err(err)?.dataset(cfg.threshold).map_err(err)?;
    let run = (200, 0, 1);
    let hyper = HyperParams::default();
    let seq = fit(&data, hyper, 5, run, 11, ExecMode::Sequential, 1).map_err(err)?;
    let par = fit(&data, hyper, 5, run, 11, ExecMode::Parallel, 4).map_err(err)?;
    let bits = |d: &[latent_abundance::model::ParameterState]| -> Vec<u64> {
        d.iter()
            .flat_map(|p| {
                [p.alpha.a1, p.alpha.a2].into_iter().chain(p.beta.iter().copied()).chain(p.theta.iter().copied())
            })
            .map(f64::to_bits)
            .collect()
    };
    let (a, b) = (bits(&seq), bits(&par));
    let first = a.iter().zip(&b).position(|(x, y)| x != y);
    Ok((
        a == b,
        match first {
            None => format!("{} sweeps × {} values identical (L = 11, 4 workers)", seq.len(), a.len() / seq.len()),
            Some(k) => format!("first difference at value {k}"),
        },
    ))
}

fn kernel_invariance() -> Check {
    let checks = kernel_suite(50_000, None).map_err(err)?;
    let failed: Vec<String> = checks
        .iter()
        .filter(|c| !c.passed())
        .map(|c| format!("{}#{} p={:.4}", c.kernel.name(), c.seed, c.p_value))
        .collect();
    let min_p = checks.iter().map(|c| c.p_value).fold(1.0, f64::min);
    let expected = KernelId::ALL.len() * ORACLE_SEEDS.len();
    Ok((
        failed.is_empty() && checks.len() == expected,
        if failed.is_empty() {
            format!("{} kernels × {} seeds, n = 50000, min p = {min_p:.4} > 0.01", KernelId::ALL.len(), ORACLE_SEEDS.len())
        } else {
            format!("failed: {}", failed.join(", "))
        },
    ))
}

fn joint_distribution() -> Check {
    let cfg = JointTestConfig::default();
    let stats = joint_distribution_test(&cfg, None).map_err(err)?;
    let worst = stats
        .iter()
        .max_by(|a, b| a.z.abs().total_cmp(&b.z.abs()))
        .ok_or("no statistics")?;
    let max_z = worst.z.abs();
    let clean = stats.iter().all(|s| s.passed());
    let required = [
        Fault::WrongVariance,
        Fault::DroppedIndicator,
        Fault::WrongMixtureWeight,
        Fault::MissingCentering,
        Fault::SwappedTruncation,
        Fault::OffByOneNeighborSum,
    ];
    let mut missed = Vec::new();
    for f in required {
        let d = detect_fault(f, 50_000, &cfg).map_err(err)?;
        println!(
            "    fault {f:?}: kernels {:?}, joint {:?}",
            d.failed_kernels, d.failed_joint
        );
        if !d.detected() {
            missed.push(format!("{f:?}"));
        }
    }
    Ok((
        clean && missed.is_empty(),
        format!(
            "{} statistics, max |z| = {max_z:.2} at {} (< 4); {}/6 faults caught{}",
            stats.len(),
            worst.name,
            6 - missed.len(),
            if missed.is_empty() { String::new() } else { format!(", missed {}", missed.join(", ")) }
        ),
    ))
}

/// One replicate of the recovery study.
fn recovery_config(replicate: u64) -> SimConfig {
    SimConfig {
        nx: 30,
        ny: 30,
        alpha: [1.0, 2.0],
        beta: vec![1.0, -0.5],
        car_scale: 0.1,
        u: UField::Smooth { lo: 0.3, hi: 1.0 },
        sites: SiteCount::Fixed { per_cell: 3 },
        seed: 1000 + replicate,
        ..Default::default()
    }
}

fn recovery() -> Check {
    let truth = [1.0, -0.5];
    let mut covered = [0usize; 2];
    let mut signs = [0usize; 2];
    let replicates = 20;
    for r in 0..replicates {
        let cfg = recovery_config(r);
        let data = simulate_dataset(&cfg).map_err(err)?.dataset(cfg.threshold).map_err(err)?;
        let t = Instant::now();
        let draws = fit(&data, HyperParams::default(), r + 1, DEFAULT_RUN, 11, ExecMode::Sequential, 1).map_err(err)?;
        let mut line = format!("    replicate {r:>2} ({:.1} s):", t.elapsed().as_secs_f64());
        for k in 0..2 {
            let iv = Interval::from_draws(&draws.iter().map(|d| d.beta[k]).collect::<Vec<_>>());
            let hit = iv.lo95 <= truth[k] && truth[k] <= iv.hi95;
            covered[k] += usize::from(hit);
            signs[k] += usize::from(iv.mean.signum() == truth[k].signum());
            line.push_str(&format!(
                " β{} {:+.3} [{:+.3}, {:+.3}]{}",
                k + 1,
                iv.mean,
                iv.lo95,
                iv.hi95,
                if hit { "" } else { " miss" }
            ));
        }
        println!("{line}");
    }
    let n = replicates as usize;
    Ok((
        covered.iter().all(|&c| c >= 15) && signs.iter().all(|&s| s == n),
        format!(
            "coverage β1 {}/{n}, β2 {}/{n} (need ≥ 15); signs {}/{n}, {}/{n}",
            covered[0], covered[1], signs[0], signs[1]
        ),
    ))
}

fn scalar_functions() -> Check {
    // E[V | V < 0] for V ~ N(μ, 1) as a ratio of integrals over t = −v ≥ 0,
    // with the common factor exp(−μ²/2) cancelled; composite Simpson.
    let oracle = |mu: f64| {
        let hi = (-mu).max(0.0) + 40.0;
        let n = 100_000;
        let h = hi / n as f64;
        let (mut num, mut den) = (0.0, 0.0);
        let shift = if mu < 0.0 { mu * mu / 2.0 } else { 0.0 };
        for k in 0..=n {
            let t = k as f64 * h;
            let w = if k == 0 || k == n { 1.0 } else if k % 2 == 1 { 4.0 } else { 2.0 };
            let g = (-t * t / 2.0 - t * mu - shift).exp();
            num += w * t * g;
            den += w * g;
        }
        -num / den
    };
    let mut worst = 0.0f64;
    let mut strict = true;
    for k in 0..=240 {
        let mu = -6.0 + 0.05 * k as f64;
        let c = left_tail_mean(mu);
        worst = worst.max((c - oracle(mu)).abs());
        strict &= c < mu.min(0.0);
    }
    let o0 = orthant_prob(0.0);
    let mut doubling = 0.0f64;
    for mu in [-5.0, 0.0, 5.0] {
        let a = orthant_prob_quadrature(mu, 10.0);
        let b = orthant_prob_quadrature(mu, 20.0);
        doubling = doubling.max((a - b).abs() / b.abs().max(1e-300));
    }
    Ok((
        worst < 1e-8 && strict && (o0 - 0.125).abs() < 1e-9 && doubling < 1e-9,
        format!(
            "left-tail mean max error {worst:.1e} (< 1e-8), below min(0, μ) {strict}, O(0) − 1/8 = {:.1e}, doubling rel change {doubling:.1e}",
            o0 - 0.125
        ),
    ))
}

fn summary_invariants() -> Check {
    let hyper = HyperParams::default();
    // Full retained chain on the first recovery replicate.
    let cfg = recovery_config(0);
    let full = simulate_dataset(&cfg).map_err(err)?;
    let data = full.dataset(cfg.threshold).map_err(err)?;
    let draws = fit(&data, hyper, 1, DEFAULT_RUN, 11, ExecMode::Sequential, 1).map_err(err)?;
    let (_, violations) = summarize_cells(&data, &draws, &DEFAULT_MIDPOINTS).map_err(err)?;

    // Same landscape with 70% of cells unsampled.
    let masked_cfg = SimConfig { unsampled_fraction: 0.7, ..cfg.clone() };
    let masked = simulate_dataset(&masked_cfg).map_err(err)?;
    if masked.truth.theta != full.truth.theta {
        return Err("masking changed the simulated field".into());
    }
    let mdata = masked.dataset(cfg.threshold).map_err(err)?;
    let mdraws = fit(&mdata, hyper, 2, DEFAULT_RUN, 11, ExecMode::Sequential, 1).map_err(err)?;
    let (cells, mviol) = summarize_cells(&mdata, &mdraws, &DEFAULT_MIDPOINTS).map_err(err)?;
    let (est, truth) = unsampled_theta(&masked, &mdata, &cells);
    let r = pearson(&est, &truth).unwrap_or(f64::NAN);
    let n = truth.len() as f64;
    let m = truth.iter().sum::<f64>() / n;
    let sd = (truth.iter().map(|t| (t - m) * (t - m)).sum::<f64>() / n).sqrt();
    let all_cells = cells.len() == mdata.n_cells() && cells.iter().all(|c| c.theta.mean.is_finite());
    Ok((
        violations.is_empty() && mviol.is_empty() && all_cells && r > 0.3,
        format!(
            "{} + {} draws, {} violations; {} unsampled cells summarised, θ Pearson r = {r:.3} (> 0.3), true θ sd {sd:.3}",
            draws.len(),
            mdraws.len(),
            violations.len() + mviol.len(),
            est.len()
        ),
    ))
}

fn unsampled_theta(
    sim: &SimOutput,
    data: &Dataset,
    cells: &[latent_abundance::summary::CellSummary],
) -> (Vec<f64>, Vec<f64>) {
    let truth: std::collections::HashMap<u64, f64> =
        sim.cells.iter().zip(&sim.truth.theta).map(|(c, t)| (c.id, *t)).collect();
    let mut est = Vec::new();
    let mut tru = Vec::new();
    for (k, c) in cells.iter().enumerate() {
        if data.site_count(k) == 0 {
            est.push(c.theta.mean);
            tru.push(truth[&c.cell_id]);
        }
    }
    (est, tru)
}

fn performance() -> Check {
    // 193 × 192 = 37,056 cells; masking 7,056 of them leaves 30,000 sites.
    let cfg = SimConfig {
        nx: 193,
        ny: 192,
        sites: SiteCount::Fixed { per_cell: 1 },
        unsampled_fraction: 7_056.0 / 37_056.0,
        seed: 37,
        ..Default::default()
    };
    let data = simulate_dataset(&cfg).map_err(err)?.dataset(cfg.threshold).map_err(err)?;
    let hyper = HyperParams::default();
    let sampler = Sampler::new(
        &data,
        hyper,
        SamplerOptions::default(),
        ThetaSchedule::sequential(data.adjacency()),
        1,
    )
    .map_err(err)?;
    let mut state = sampler.initialize(&data).map_err(err)?;
    let t = Instant::now();
    sampler.sweep(&data, &mut state, 1).map_err(err)?;
    let sweep_s = t.elapsed().as_secs_f64();

    let cores = std::thread::available_parallelism().map(|n| n.get()).unwrap_or(1);
    let rows = bench_theta_sweep(&data, &hyper, &[11], &[4], 50, 1).map_err(err)?;
    let row = &rows[0];
    Ok((
        row.speedup >= 1.8,
        format!(
            "{} cells, {} sites, full sweep {sweep_s:.2} s; θ sweep L = 11, 4 workers: {:.2} ms vs {:.2} ms sequential, speedup {:.2}× (need ≥ 1.8×; host has {cores} core(s))",
            data.n_cells(),
            data.n_sites(),
            row.ms_per_sweep,
            row.ms_per_sweep * row.speedup,
            row.speedup
        ),
    ))
}

fn main() -> ExitCode {
    let wanted: HashSet<u32> = std::env::args().skip(1).filter_map(|a| a.parse().ok()).collect();
    let selected = |id: u32| wanted.is_empty() || wanted.contains(&id);
    type Entry = (u32, &'static str, f64, fn() -> Check);
    let all: [Entry; 8] = [
        (1, "separator schedule step count on the 15×8 grid", 1.0, scheduler_steps),
        (2, "sequential and parallel chains bitwise identical", 120.0, chain_equivalence),
        (3, "kernel invariance suite", 300.0, kernel_invariance),
        (4, "joint-distribution test and fault detection", 900.0, joint_distribution),
        (5, "parameter recovery over 20 replicates", 4.0 * 3600.0, recovery),
        (6, "scalar functions", 10.0, scalar_functions),
        (7, "summary invariants and prediction at unsampled cells", 4.0 * 3600.0, summary_invariants),
        (8, "performance at 37,000 cells", f64::INFINITY, performance),
    ];
    let verdicts: Vec<Verdict> = all
        .into_iter()
        .filter(|e| selected(e.0))
        .map(|(id, title, budget, f)| criterion(id, title, budget, f))
        .collect();
    let failed: Vec<u32> = verdicts.iter().filter(|v| !v.passed).map(|v| v.id).collect();
    println!(
        "acceptance: {}/{} criteria passed{}",
        verdicts.len() - failed.len(),
        verdicts.len(),
        if failed.is_empty() { String::new() } else { format!("; failed {failed:?}") }
    );
    if failed.is_empty() {
        ExitCode::SUCCESS
    } else {
        ExitCode::FAILURE
    }
}
