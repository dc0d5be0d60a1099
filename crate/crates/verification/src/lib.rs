//! Shared plumbing for the acceptance target: fitting a chain the way the
//! command-line tool does, and reporting one verdict per criterion.

use std::time::Instant;

use latent_abundance::lattice::partition_stripes;
use latent_abundance::model::{Dataset, HyperParams, ParameterState};
use latent_abundance::sampler::{Sampler, SamplerOptions};
use latent_abundance::schedule::{ExecMode, ThetaSchedule};

/// Run length of a full fit: iterations, burn-in, thinning.
pub const DEFAULT_RUN: (u64, u64, u64) = (12_500, 7_500, 5);

/// Retained draws of one chain.
pub fn fit(
    data: &Dataset,
    hyper: HyperParams,
    seed: u64,
    run: (u64, u64, u64),
    blocks: usize,
    mode: ExecMode,
    workers: usize,
) -> latent_abundance::Result<Vec<ParameterState>> {
    let (iterations, burn_in, thin) = run;
    let partition = partition_stripes(data.adjacency(), data.grid(), blocks)?;
    let schedule = ThetaSchedule::new(partition, data.adjacency(), mode, workers)?;
    let sampler = Sampler::new(data, hyper, SamplerOptions::default(), schedule, seed)?;
    let mut state = sampler.initialize(data)?;
    let mut out = Vec::with_capacity(((iterations - burn_in) / thin) as usize);
    for sweep in 1..=iterations {
        sampler.sweep(data, &mut state, sweep)?;
        if sweep > burn_in && (sweep - burn_in) % thin == 0 {
            out.push(state.params.clone());
        }
    }
    Ok(out)
}

#[derive(Debug)]
pub struct Verdict {
    pub id: u32,
    pub title: &'static str,
    pub passed: bool,
    pub detail: String,
    pub seconds: f64,
}

/// Runs one criterion. An error counts as a failure; so does exceeding the
/// runtime budget.
pub fn criterion<F>(id: u32, title: &'static str, budget_s: f64, check: F) -> Verdict
where
    F: FnOnce() -> Result<(bool, String), String>,
{
    let start = Instant::now();
    let result = check();
    let seconds = start.elapsed().as_secs_f64();
    let (mut passed, mut detail) = result.unwrap_or_else(|e| (false, format!("error: {e}")));
    if seconds > budget_s {
        passed = false;
        detail.push_str(&format!("; over budget ({seconds:.1} s > {budget_s} s)"));
    }
    let v = Verdict { id, title, passed, detail, seconds };
    println!(
        "criterion {} {} — {} — {} [{:.1} s]",
        v.id,
        if v.passed { "PASS" } else { "FAIL" },
        v.title,
        v.detail,
        v.seconds
    );
    v
}
