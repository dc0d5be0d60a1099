//! Separator-scheduled sweep of the spatial effects.
//!
//! Phase 1 updates the boundary cells one at a time in ascending id order.
//! Phase 2 sweeps every block in ascending id order, with blocks running
//! concurrently. Each cell draws from its own keyed stream, so the result is
//! the same whichever mode or worker count executes the schedule.

use std::sync::Arc;
use std::time::Instant;

use rayon::prelude::*;
use rayon::ThreadPool;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{partition_stripes, Adjacency, SeparatorPartition};
use crate::model::{Dataset, HyperParams};
use crate::stats::{standard_normal, RngStream, StreamDomain};

const BOUNDARY: usize = usize::MAX;

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ExecMode {
    #[default]
    Sequential,
    Parallel,
}

impl std::str::FromStr for ExecMode {
    type Err = Error;
    fn from_str(s: &str) -> Result<Self> {
        match s {
            "sequential" => Ok(ExecMode::Sequential),
            "parallel" => Ok(ExecMode::Parallel),
            other => Err(Error::InvalidInput(format!("unknown mode `{other}`"))),
        }
    }
}

/// Gaussian full conditional of one spatial effect: `(mean, variance)`.
///
/// `resid_sum = Σ_j (z_P,ij − v_iᵀβ)` over the `sites` sites of the cell and
/// `neighbor_sum = Σ_j w_ij θ_j`. With no sites this is the CAR conditional
/// `N(neighbor_sum / degree, η₀² / degree)`.
pub fn theta_conditional(
    sites: usize,
    resid_sum: f64,
    neighbor_sum: f64,
    degree: usize,
    car_scale: f64,
) -> (f64, f64) {
    let precision = sites as f64 + degree as f64 / car_scale;
    let mean = (resid_sum + neighbor_sum / car_scale) / precision;
    (mean, 1.0 / precision)
}

/// Per-sweep inputs to the spatial-effect update.
pub struct ThetaInputs<'a> {
    pub adj: &'a Adjacency,
    pub resid_sum: &'a [f64],
    pub site_count: &'a [usize],
    pub car_scale: f64,
    pub seed: u64,
    pub sweep: u64,
    /// Drop the last neighbour from the neighbour sum (fault injection).
    pub drop_last_neighbor: bool,
}

impl<'a> ThetaInputs<'a> {
    /// Draws `θ_cell` from its full conditional given the other entries of
    /// `theta`.
    pub fn update_cell(&self, theta: &[f64], cell: usize) -> f64 {
        let nsum: f64 = self.neighbours(cell).iter().map(|&j| theta[j]).sum();
        self.draw(cell, nsum)
    }

    fn draw(&self, cell: usize, neighbor_sum: f64) -> f64 {
        let (mean, var) = theta_conditional(
            self.site_count[cell],
            self.resid_sum[cell],
            neighbor_sum,
            self.adj.degree(cell),
            self.car_scale,
        );
        let mut rng = RngStream::keyed(self.seed, StreamDomain::Theta, cell as u64, self.sweep).rng();
        mean + var.sqrt() * standard_normal(&mut rng)
    }

    fn neighbours(&self, cell: usize) -> &'a [usize] {
        let n = self.adj.neighbors(cell);
        if self.drop_last_neighbor && !n.is_empty() {
            &n[..n.len() - 1]
        } else {
            n
        }
    }
}

/// Step counts of one executed sweep.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct SweepSteps {
    pub boundary_steps: usize,
    pub longest_block: usize,
}

impl SweepSteps {
    pub fn critical_path(&self) -> usize {
        self.boundary_steps + self.longest_block
    }
}

/// A separator partition plus the execution mode and worker pool.
pub struct ThetaSchedule {
    partition: SeparatorPartition,
    mode: ExecMode,
    workers: usize,
    block_of: Vec<usize>,
    local_index: Vec<usize>,
    pool: Option<Arc<ThreadPool>>,
}

impl std::fmt::Debug for ThetaSchedule {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        f.debug_struct("ThetaSchedule")
            .field("blocks", &self.partition.blocks.len())
            .field("boundary", &self.partition.boundary.len())
            .field("mode", &self.mode)
            .field("workers", &self.workers)
            .finish()
    }
}

impl ThetaSchedule {
    pub fn new(
        partition: SeparatorPartition,
        adj: &Adjacency,
        mode: ExecMode,
        workers: usize,
    ) -> Result<Self> {
        partition.validate(adj)?;
        if workers == 0 {
            return Err(Error::InvalidInput("worker count must be positive".into()));
        }
        let n = adj.len();
        let mut block_of = vec![BOUNDARY; n];
        let mut local_index = vec![0; n];
        for (k, block) in partition.blocks.iter().enumerate() {
            for (pos, &c) in block.iter().enumerate() {
                block_of[c] = k;
                local_index[c] = pos;
            }
        }
        let pool = match mode {
            ExecMode::Sequential => None,
            ExecMode::Parallel => Some(Arc::new(
                rayon::ThreadPoolBuilder::new()
                    .num_threads(workers)
                    .build()
                    .map_err(|e| Error::InvalidInput(format!("thread pool: {e}")))?,
            )),
        };
        Ok(Self {
            partition,
            mode,
            workers,
            block_of,
            local_index,
            pool,
        })
    }

    /// Plain ascending-id sweep over all cells.
    pub fn sequential(adj: &Adjacency) -> Self {
        Self::new(SeparatorPartition::single_block(adj.len()), adj, ExecMode::Sequential, 1)
            .expect("single block partition is always valid")
    }

    pub fn partition(&self) -> &SeparatorPartition {
        &self.partition
    }

    pub fn mode(&self) -> ExecMode {
        self.mode
    }

    pub fn workers(&self) -> usize {
        self.workers
    }

    /// Runs `f` inside the worker pool when parallel, directly otherwise.
    pub fn install<T: Send>(&self, f: impl FnOnce() -> T + Send) -> T {
        match &self.pool {
            Some(pool) => pool.install(f),
            None => f(),
        }
    }

    pub fn is_parallel(&self) -> bool {
        self.pool.is_some()
    }

    fn sweep_block(&self, k: usize, theta: &[f64], inputs: &ThetaInputs<'_>) -> Vec<f64> {
        let block = &self.partition.blocks[k];
        let mut local: Vec<f64> = block.iter().map(|&c| theta[c]).collect();
        for (pos, &cell) in block.iter().enumerate() {
            let mut sum = 0.0;
            for &j in inputs.neighbours(cell) {
                let owner = self.block_of[j];
                debug_assert!(
                    owner == k || owner == BOUNDARY,
                    "block {k} read cell {j} owned by block {owner}"
                );
                sum += if owner == k {
                    local[self.local_index[j]]
                } else {
                    theta[j]
                };
            }
            local[pos] = inputs.draw(cell, sum);
        }
        local
    }

    /// One scheduled Gibbs scan over all spatial effects.
    pub fn run_theta_sweep(&self, theta: &mut [f64], inputs: &ThetaInputs<'_>) -> Result<SweepSteps> {
        let n = inputs.adj.len();
        if theta.len() != n || self.block_of.len() != n || inputs.resid_sum.len() != n || inputs.site_count.len() != n {
            return Err(Error::InvalidPartition(format!(
                "schedule covers {} cells, adjacency {}, theta {}",
                self.block_of.len(),
                n,
                theta.len()
            )));
        }
        for &cell in &self.partition.boundary {
            let sum: f64 = inputs.neighbours(cell).iter().map(|&j| theta[j]).sum();
            theta[cell] = inputs.draw(cell, sum);
        }
        let blocks = self.partition.blocks.len();
        match &self.pool {
            None => {
                for k in 0..blocks {
                    let local = self.sweep_block(k, theta, inputs);
                    for (&c, v) in self.partition.blocks[k].iter().zip(local) {
                        theta[c] = v;
                    }
                }
            }
            Some(pool) => {
                let snapshot: &[f64] = theta;
                let results: Vec<Vec<f64>> = pool.install(|| {
                    (0..blocks)
                        .into_par_iter()
                        .map(|k| self.sweep_block(k, snapshot, inputs))
                        .collect()
                });
                for (block, local) in self.partition.blocks.iter().zip(results) {
                    for (&c, v) in block.iter().zip(local) {
                        theta[c] = v;
                    }
                }
            }
        }
        Ok(SweepSteps {
            boundary_steps: self.partition.boundary.len(),
            longest_block: self.partition.blocks.iter().map(Vec::len).max().unwrap_or(0),
        })
    }
}

/// One row of the partition benchmark.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct BenchRow {
    #[serde(rename = "L")]
    pub blocks: usize,
    pub workers: usize,
    pub cells: usize,
    pub critical_path: usize,
    pub ms_per_sweep: f64,
    pub speedup: f64,
}

fn median(mut v: Vec<f64>) -> f64 {
    v.sort_by(f64::total_cmp);
    let n = v.len();
    if n == 0 {
        return f64::NAN;
    }
    if n % 2 == 1 {
        v[n / 2]
    } else {
        0.5 * (v[n / 2 - 1] + v[n / 2])
    }
}

fn time_sweeps(schedule: &ThetaSchedule, data: &Dataset, hyper: &HyperParams, reps: usize, seed: u64) -> Result<f64> {
    let n = data.n_cells();
    let resid = vec![0.0; n];
    let counts: Vec<usize> = (0..n).map(|i| data.site_count(i)).collect();
    let mut theta = vec![0.0; n];
    let mut times = Vec::with_capacity(reps);
    // one warm-up sweep
    for sweep in 0..=reps as u64 {
        let inputs = ThetaInputs {
            adj: data.adjacency(),
            resid_sum: &resid,
            site_count: &counts,
            car_scale: hyper.car_scale,
            seed,
            sweep,
            drop_last_neighbor: false,
        };
        let start = Instant::now();
        schedule.run_theta_sweep(&mut theta, &inputs)?;
        if sweep > 0 {
            times.push(start.elapsed().as_secs_f64() * 1e3);
        }
    }
    Ok(median(times))
}

/// Median wall-clock time per spatial-effect sweep for every `(L, workers)`
/// pair, with speedup relative to the plain sequential sweep (`L = 1`, one
/// worker).
pub fn bench_theta_sweep(
    data: &Dataset,
    hyper: &HyperParams,
    block_counts: &[usize],
    worker_counts: &[usize],
    repetitions: usize,
    seed: u64,
) -> Result<Vec<BenchRow>> {
    let adj = data.adjacency();
    let baseline = time_sweeps(&ThetaSchedule::sequential(adj), data, hyper, repetitions, seed)?;
    let mut rows = Vec::new();
    for &l in block_counts {
        let partition = partition_stripes(adj, data.grid(), l)?;
        let critical_path = partition.sequential_step_count();
        for &w in worker_counts {
            let ms = if l == 1 && w == 1 {
                baseline
            } else {
                let mode = if w > 1 { ExecMode::Parallel } else { ExecMode::Sequential };
                let schedule = ThetaSchedule::new(partition.clone(), adj, mode, w)?;
                time_sweeps(&schedule, data, hyper, repetitions, seed)?
            };
            rows.push(BenchRow {
                blocks: l,
                workers: w,
                cells: data.n_cells(),
                critical_path,
                ms_per_sweep: ms,
                speedup: baseline / ms,
            });
        }
    }
    Ok(rows)
}
