//! Forward simulation from the generative model.

use nalgebra::{DMatrix, SymmetricEigen};
use rand::Rng;
use rand_distr::{Distribution, Poisson};
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{build_adjacency, Adjacency, CellGrid};
use crate::model::{
    standardize, CellRecord, ChainState, CutPoints, Dataset, LatentState, ParameterState, SiteLatent, SiteRecord,
    ZeroCase,
};
use crate::sampler::center_theta;
use crate::schedule::theta_conditional;
use crate::stats::{left_tail_mean, standard_normal, RngStream, StreamDomain};

/// Largest graph for which the exact eigen-decomposition draw is used.
pub const EXACT_CAR_LIMIT: usize = 2500;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum UField {
    Constant { value: f64 },
    /// Linear in the x coordinate from `from` (left edge) to `to` (right edge).
    Gradient { from: f64, to: f64 },
    /// Low-frequency sinusoidal field rescaled onto `[lo, hi]`.
    Smooth { lo: f64, hi: f64 },
    /// One value per cell in cell-id order.
    Values { values: Vec<f64> },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "kind", rename_all = "lowercase")]
pub enum SiteCount {
    Fixed { per_cell: usize },
    Poisson { mean: f64 },
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct SimConfig {
    pub nx: usize,
    pub ny: usize,
    pub alpha: [f64; 2],
    /// True coefficients on the standardised covariate scale; one
    /// covariate is simulated per entry.
    pub beta: Vec<f64>,
    pub car_scale: f64,
    pub threshold: f64,
    pub u: UField,
    pub sites: SiteCount,
    /// Fraction of cells whose sites are withheld after simulation.
    pub unsampled_fraction: f64,
    /// Standard deviation of the white noise added to each smooth covariate.
    pub covariate_noise: f64,
    /// Prior-Gibbs sweeps for graphs above [`EXACT_CAR_LIMIT`] cells.
    pub car_gibbs_sweeps: u64,
    pub seed: u64,
}

impl Default for SimConfig {
    fn default() -> Self {
        Self {
            nx: 30,
            ny: 30,
            alpha: [1.0, 2.0],
            beta: vec![1.0, -0.5],
            car_scale: 0.1,
            threshold: 1.5,
            u: UField::Smooth { lo: 0.3, hi: 1.0 },
            sites: SiteCount::Fixed { per_cell: 3 },
            unsampled_fraction: 0.0,
            covariate_noise: 0.3,
            car_gibbs_sweeps: 500,
            seed: 1,
        }
    }
}

impl SimConfig {
    pub fn validate(&self) -> Result<()> {
        if self.nx == 0 || self.ny == 0 {
            return Err(Error::InvalidInput("grid dimensions must be positive".into()));
        }
        CutPoints::new(self.alpha[0], self.alpha[1])?;
        if !(self.car_scale > 0.0) {
            return Err(Error::InvalidInput("car_scale must be positive".into()));
        }
        if !(0.0..1.0).contains(&self.unsampled_fraction) {
            return Err(Error::InvalidInput("unsampled_fraction must lie in [0, 1)".into()));
        }
        let bad_u = |v: f64| !(0.0..=1.0).contains(&v);
        match &self.u {
            UField::Constant { value } if bad_u(*value) => {
                return Err(Error::InvalidInput(format!("u = {value} outside [0, 1]")))
            }
            UField::Gradient { from, to } if bad_u(*from) || bad_u(*to) => {
                return Err(Error::InvalidInput("u gradient ends outside [0, 1]".into()))
            }
            UField::Smooth { lo, hi } if bad_u(*lo) || bad_u(*hi) || lo > hi => {
                return Err(Error::InvalidInput("smooth u range must satisfy 0 <= lo <= hi <= 1".into()))
            }
            UField::Values { values } => {
                if values.len() != self.nx * self.ny {
                    return Err(Error::InvalidInput(format!(
                        "u field has {} values for {} cells",
                        values.len(),
                        self.nx * self.ny
                    )));
                }
                if let Some(v) = values.iter().find(|v| bad_u(**v)) {
                    return Err(Error::InvalidInput(format!("u = {v} outside [0, 1]")));
                }
            }
            _ => {}
        }
        if let SiteCount::Poisson { mean } = self.sites {
            if !(mean > 0.0) {
                return Err(Error::InvalidInput("Poisson site mean must be positive".into()));
            }
        }
        Ok(())
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum CarMethod {
    Eigen,
    PriorGibbs,
}

/// Intrinsic CAR prior with precision `(D − W)/η₀²`, restricted to `Σθ = 0`.
#[derive(Clone, Debug)]
pub struct IcarPrior {
    /// Columns `e_k η₀ / √λ_k` over the non-null eigenvectors.
    factor: Option<DMatrix<f64>>,
    adj: Adjacency,
    car_scale: f64,
    gibbs_sweeps: u64,
}

impl IcarPrior {
    pub fn new(adj: &Adjacency, car_scale: f64, gibbs_sweeps: u64) -> Result<Self> {
        let components = adj.component_count();
        if components != 1 {
            return Err(Error::Disconnected { components });
        }
        let n = adj.len();
        let factor = if n <= EXACT_CAR_LIMIT {
            let mut q = DMatrix::<f64>::zeros(n, n);
            for i in 0..n {
                q[(i, i)] = adj.degree(i) as f64;
                for &j in adj.neighbors(i) {
                    q[(i, j)] = -1.0;
                }
            }
            let eig = SymmetricEigen::new(q);
            let tol = 1e-9 * eig.eigenvalues.amax().max(1.0);
            let kept: Vec<usize> = (0..n).filter(|&k| eig.eigenvalues[k] > tol).collect();
            if kept.len() + 1 != n {
                return Err(Error::Disconnected { components: n - kept.len() });
            }
            let mut f = DMatrix::<f64>::zeros(n, kept.len());
            for (c, &k) in kept.iter().enumerate() {
                let s = (car_scale / eig.eigenvalues[k]).sqrt();
                f.set_column(c, &(eig.eigenvectors.column(k) * s));
            }
            Some(f)
        } else {
            None
        };
        Ok(Self {
            factor,
            adj: adj.clone(),
            car_scale,
            gibbs_sweeps,
        })
    }

    pub fn method(&self) -> CarMethod {
        if self.factor.is_some() {
            CarMethod::Eigen
        } else {
            CarMethod::PriorGibbs
        }
    }

    /// One draw; `key` selects the stream family.
    pub fn draw(&self, seed: u64, key: u64) -> Vec<f64> {
        match &self.factor {
            Some(f) => {
                let mut rng = RngStream::keyed(seed, StreamDomain::SimTheta, key, 0).rng();
                let z = nalgebra::DVector::from_iterator(f.ncols(), (0..f.ncols()).map(|_| standard_normal(&mut rng)));
                let mut theta: Vec<f64> = (f * z).iter().copied().collect();
                center_theta(&mut theta);
                theta
            }
            None => {
                let n = self.adj.len();
                let mut theta = vec![0.0; n];
                for sweep in 1..=self.gibbs_sweeps {
                    let mut rng =
                        RngStream::keyed(seed, StreamDomain::SimTheta, key, sweep).rng();
                    for i in 0..n {
                        let nsum: f64 = self.adj.neighbors(i).iter().map(|&j| theta[j]).sum();
                        let (m, v) = theta_conditional(0, 0.0, nsum, self.adj.degree(i), self.car_scale);
                        theta[i] = m + v.sqrt() * standard_normal(&mut rng);
                    }
                    center_theta(&mut theta);
                }
                theta
            }
        }
    }
}

/// Draws `θ` from the sum-to-zero intrinsic CAR prior.
pub fn simulate_theta(adj: &Adjacency, car_scale: f64, seed: u64) -> Result<(Vec<f64>, CarMethod)> {
    let prior = IcarPrior::new(adj, car_scale, SimConfig::default().car_gibbs_sweeps)?;
    Ok((prior.draw(seed, 0), prior.method()))
}

/// Generative outcome at one site.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteDraw {
    pub z_p: f64,
    pub z_t: f64,
    pub z_o: f64,
    pub transformed: bool,
    pub y: u8,
}

impl SiteDraw {
    /// The sampler's representation of this outcome.
    pub fn latent(&self) -> SiteLatent {
        if self.y > 0 {
            SiteLatent::Observed { z_o: self.z_o }
        } else if self.z_p <= 0.0 {
            SiteLatent::Zero(ZeroCase::Absent)
        } else if self.transformed {
            SiteLatent::Zero(ZeroCase::Transformed)
        } else {
            SiteLatent::Zero(ZeroCase::Missed)
        }
    }
}

/// `z_P ~ N(μ, 1)`; transformed with probability `1 − u` (then
/// `z_O = z_T = c(z_P)`); otherwise `z_O = z_P` when `z_P ≤ 0` and
/// `z_O ~ N(z_P, 1)` when `z_P > 0`.
pub fn simulate_site<R: Rng + ?Sized>(mu: f64, u: f64, alpha: &CutPoints, rng: &mut R) -> SiteDraw {
    let z_p = mu + standard_normal(rng);
    let transformed = rng.random::<f64>() >= u;
    let (z_t, z_o) = if transformed {
        let c = left_tail_mean(z_p);
        (c, c)
    } else if z_p <= 0.0 {
        (z_p, z_p)
    } else {
        (z_p, z_p + standard_normal(rng))
    };
    SiteDraw { z_p, z_t, z_o, transformed, y: alpha.category(z_o) }
}

/// Regenerates every site's latents and observation given the parameters.
/// Returns the observations and a chain state consistent with them.
pub fn simulate_observations(data: &Dataset, params: &ParameterState, seed: u64, key: u64) -> (Vec<u8>, ChainState) {
    let mut y = Vec::with_capacity(data.n_sites());
    let mut z_p = Vec::with_capacity(data.n_sites());
    let mut site = Vec::with_capacity(data.n_sites());
    for s in 0..data.n_sites() {
        let c = data.site_cell(s);
        let mu = data.regression(c, &params.beta) + params.theta[c];
        let mut rng = RngStream::keyed(seed, StreamDomain::SimSite, s as u64, key).rng();
        let d = simulate_site(mu, data.u(c), &params.alpha, &mut rng);
        y.push(d.y);
        z_p.push(d.z_p);
        site.push(d.latent());
    }
    let state = ChainState {
        params: params.clone(),
        latents: LatentState { z_p, site },
    };
    (y, state)
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SiteTruth {
    pub cell_id: u64,
    pub draw: SiteDraw,
    /// Withheld from the fitted dataset.
    pub held_out: bool,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Truth {
    pub alpha: [f64; 2],
    pub beta: Vec<f64>,
    /// Per cell in cell-id order.
    pub theta: Vec<f64>,
    pub sites: Vec<SiteTruth>,
    pub car_method: CarMethod,
}

#[derive(Clone, Debug)]
pub struct SimOutput {
    pub cells: Vec<CellRecord>,
    /// Fitted sites (held-out cells removed).
    pub sites: Vec<SiteRecord>,
    pub covariate_names: Vec<String>,
    pub truth: Truth,
}

impl SimOutput {
    pub fn dataset(&self, threshold: f64) -> Result<Dataset> {
        Dataset::new(self.cells.clone(), &self.sites, self.covariate_names.clone(), threshold, true)
    }
}

fn smooth_field<R: Rng + ?Sized>(grid: &CellGrid, nx: usize, ny: usize, rng: &mut R) -> Vec<f64> {
    let tau = std::f64::consts::TAU;
    let fx = rng.random_range(0.5..1.5);
    let fy = rng.random_range(0.5..1.5);
    let (px, py, pxy) = (rng.random::<f64>() * tau, rng.random::<f64>() * tau, rng.random::<f64>() * tau);
    grid.coords()
        .iter()
        .map(|&[x, y]| {
            let sx = x / nx.max(1) as f64;
            let sy = y / ny.max(1) as f64;
            (tau * fx * sx + px).sin() + (tau * fy * sy + py).cos() + 0.5 * (tau * (sx + sy) + pxy).sin()
        })
        .collect()
}

fn u_field(cfg: &SimConfig, grid: &CellGrid, seed: u64) -> Vec<f64> {
    match &cfg.u {
        UField::Constant { value } => vec![*value; grid.len()],
        UField::Gradient { from, to } => grid
            .coords()
            .iter()
            .map(|&[x, _]| {
                let t = if cfg.nx > 1 { x / (cfg.nx - 1) as f64 } else { 0.0 };
                from + (to - from) * t
            })
            .collect(),
        UField::Smooth { lo, hi } => {
            let mut rng = RngStream::keyed(seed, StreamDomain::SimCovariate, u64::MAX, 0).rng();
            let f = smooth_field(grid, cfg.nx, cfg.ny, &mut rng);
            let (min, max) = f.iter().fold((f64::INFINITY, f64::NEG_INFINITY), |(a, b), &v| (a.min(v), b.max(v)));
            let span = max - min;
            f.iter()
                .map(|v| if span > 0.0 { lo + (hi - lo) * (v - min) / span } else { 0.5 * (lo + hi) })
                .map(|v| v.clamp(0.0, 1.0))
                .collect()
        }
        UField::Values { values } => values.clone(),
    }
}

/// Simulates a complete dataset on an `nx × ny` unit grid.
pub fn simulate_dataset(cfg: &SimConfig) -> Result<SimOutput> {
    cfg.validate()?;
    let alpha = CutPoints::new(cfg.alpha[0], cfg.alpha[1])?;
    let grid = CellGrid::rectangular(cfg.nx, cfg.ny);
    let adj = build_adjacency(&grid, cfg.threshold)?;
    let n = grid.len();
    let p = cfg.beta.len();

    let mut columns = Vec::with_capacity(p);
    for k in 0..p {
        let mut rng = RngStream::keyed(cfg.seed, StreamDomain::SimCovariate, k as u64, 0).rng();
        let mut col = smooth_field(&grid, cfg.nx, cfg.ny, &mut rng);
        for v in &mut col {
            *v += cfg.covariate_noise * standard_normal(&mut rng);
        }
        columns.push(col);
    }
    let names: Vec<String> = (1..=p).map(|k| format!("v{k}")).collect();
    let (columns, _) = standardize(&columns, &names)?;
    let u = u_field(cfg, &grid, cfg.seed);

    let prior = IcarPrior::new(&adj, cfg.car_scale, cfg.car_gibbs_sweeps)?;
    let theta = prior.draw(cfg.seed, 0);

    let mut mask_rng = RngStream::keyed(cfg.seed, StreamDomain::SimMask, 0, 0).rng();
    let n_masked = (cfg.unsampled_fraction * n as f64).round() as usize;
    let held: Vec<bool> = {
        let picked = rand::seq::index::sample(&mut mask_rng, n, n_masked);
        let mut h = vec![false; n];
        for i in picked {
            h[i] = true;
        }
        h
    };

    let mut cells = Vec::with_capacity(n);
    let mut sites = Vec::new();
    let mut truth_sites = Vec::new();
    let mut counter = 0u64;
    for i in 0..n {
        let v: Vec<f64> = columns.iter().map(|c| c[i]).collect();
        let mu: f64 = v.iter().zip(&cfg.beta).map(|(a, b)| a * b).sum::<f64>() + theta[i];
        let [x, y] = grid.coord(i);
        let id = grid.id(i);
        cells.push(CellRecord { id, x, y, u: u[i], covariates: v });
        let mut rng = RngStream::keyed(cfg.seed, StreamDomain::SimSite, i as u64, 0).rng();
        let count = match cfg.sites {
            SiteCount::Fixed { per_cell } => per_cell,
            SiteCount::Poisson { mean } => Poisson::new(mean)
                .map_err(|e| Error::InvalidInput(e.to_string()))?
                .sample(&mut rng) as usize,
        };
        for _ in 0..count {
            let draw = simulate_site(mu, u[i], &alpha, &mut rng);
            if !held[i] {
                sites.push(SiteRecord { cell_id: id, y: draw.y });
            }
            truth_sites.push(SiteTruth { cell_id: id, draw, held_out: held[i] });
            counter += 1;
        }
    }
    debug_assert_eq!(counter as usize, truth_sites.len());

    Ok(SimOutput {
        cells,
        sites,
        covariate_names: names,
        truth: Truth {
            alpha: cfg.alpha,
            beta: cfg.beta.clone(),
            theta,
            sites: truth_sites,
            car_method: prior.method(),
        },
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::lattice::CellGrid;

    #[test]
    fn theta_sums_to_zero() {
        let grid = CellGrid::rectangular(6, 5);
        let adj = build_adjacency(&grid, 1.5).unwrap();
        for seed in 0..5 {
            let (theta, method) = simulate_theta(&adj, 0.1, seed).unwrap();
            assert_eq!(method, CarMethod::Eigen);
            assert!(theta.iter().sum::<f64>().abs() < 1e-10);
        }
    }

    #[test]
    fn two_cell_marginal_variance() {
        let grid = CellGrid::rectangular(2, 1);
        let adj = build_adjacency(&grid, 1.5).unwrap();
        let prior = IcarPrior::new(&adj, 0.1, 0).unwrap();
        let n = 100_000;
        let mut sum_sq = 0.0;
        for k in 0..n {
            let t = prior.draw(9, k);
            assert!((t[0] + t[1]).abs() < 1e-14);
            sum_sq += t[0] * t[0];
        }
        let var = sum_sq / n as f64;
        // θ₁ = −θ₂ ~ N(0, η₀²/4); sd of the estimate is about 0.025·√(2/n)
        assert!((var - 0.025).abs() < 5.0 * 0.025 * (2.0 / n as f64).sqrt(), "{var}");
    }

    #[test]
    fn disconnected_graph_is_rejected() {
        let grid = CellGrid::new(vec![0, 1, 2, 3], vec![[0.0, 0.0], [1.0, 0.0], [10.0, 0.0], [11.0, 0.0]]).unwrap();
        let adj = build_adjacency(&grid, 1.5).unwrap();
        assert!(matches!(simulate_theta(&adj, 0.1, 0), Err(Error::Disconnected { components: 2 })));
    }

    #[test]
    fn prior_gibbs_path_centres() {
        let grid = CellGrid::rectangular(4, 4);
        let adj = build_adjacency(&grid, 1.5).unwrap();
        let mut prior = IcarPrior::new(&adj, 0.1, 50).unwrap();
        prior.factor = None;
        assert_eq!(prior.method(), CarMethod::PriorGibbs);
        let t = prior.draw(1, 0);
        assert!(t.iter().sum::<f64>().abs() < 1e-12);
        assert!(t.iter().any(|v| *v != 0.0));
    }

    #[test]
    fn no_false_positives() {
        let alpha = CutPoints::new(1.0, 2.0).unwrap();
        let mut rng = RngStream::new(3, 3).rng();
        for k in 0..20_000 {
            let mu = -2.0 + 4.0 * (k as f64 / 20_000.0);
            let d = simulate_site(mu, 0.6, &alpha, &mut rng);
            assert!(d.z_t <= d.z_p);
            if d.transformed || d.z_p <= 0.0 {
                assert_eq!(d.y, 0);
            }
        }
    }

    #[test]
    fn zero_u_gives_only_zeros() {
        let cfg = SimConfig { nx: 5, ny: 4, u: UField::Constant { value: 0.0 }, ..Default::default() };
        let out = simulate_dataset(&cfg).unwrap();
        assert_eq!(out.sites.len(), 60);
        assert!(out.sites.iter().all(|s| s.y == 0));
    }

    #[test]
    fn masking_keeps_truth_everywhere() {
        let cfg = SimConfig { nx: 10, ny: 10, unsampled_fraction: 0.7, ..Default::default() };
        let out = simulate_dataset(&cfg).unwrap();
        assert_eq!(out.truth.sites.len(), 300);
        assert_eq!(out.sites.len(), 90);
        assert_eq!(out.truth.sites.iter().filter(|s| s.held_out).count(), 210);
        let data = out.dataset(1.5).unwrap();
        assert_eq!(data.sampled_cells(), 30);
    }

    #[test]
    fn simulation_is_deterministic() {
        let cfg = SimConfig { nx: 6, ny: 6, sites: SiteCount::Poisson { mean: 2.0 }, ..Default::default() };
        let a = simulate_dataset(&cfg).unwrap();
        let b = simulate_dataset(&cfg).unwrap();
        assert_eq!(a.truth, b.truth);
        assert_eq!(a.cells, b.cells);
    }
}
