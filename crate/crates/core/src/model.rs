//! Data, parameter and latent-state containers for the three-stage latent
//! abundance model, plus the unnormalised log posterior used as a chain
//! health check.
//!
//! Per site `j` in cell `i` the model chains three latent surfaces:
//!
//! ```text
//! z_P ~ N(v_iᵀβ + θ_i, 1)                         potential
//! z_T | z_P = z_P w.p. u_i, c(z_P) w.p. 1 - u_i    transformed
//! z_O | z_T ~ N(z_T, 1) if z_T >= 0, else z_T      observed
//! y = h  iff  α_{h-1} < z_O <= α_h
//! ```
//!
//! with `α_{-1} = -∞`, `α_0 = 0`, `α_3 = +∞`. `z_T` is marginalised out while
//! fitting, and `z_O` is only carried for sites with `y > 0`; for `y = 0`
//! sites the discrete [`ZeroCase`] records which of the three ways of
//! producing a zero is current.

use std::ops::Range;

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::lattice::{build_adjacency, Adjacency, CellGrid};
use crate::stats::{normal_cdf, normal_ln_pdf, normal_ln_sf};

/// Number of ordinal abundance classes (absent, 1–10, 11–100, >100).
pub const CATEGORIES: usize = 4;

/// One row of the cell table.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellRecord {
    pub id: u64,
    pub x: f64,
    pub y: f64,
    pub u: f64,
    pub covariates: Vec<f64>,
}

/// One ordinal observation at a sampling site.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
pub struct SiteRecord {
    pub cell_id: u64,
    pub y: u8,
}

/// Column means and standard deviations removed by [`standardize`].
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct Standardization {
    pub names: Vec<String>,
    pub means: Vec<f64>,
    pub scales: Vec<f64>,
}

impl Standardization {
    /// Converts a coefficient on the standardized scale to the raw scale.
    pub fn raw_coefficient(&self, k: usize, standardized: f64) -> f64 {
        standardized / self.scales[k]
    }
}

/// Centres and scales each column to mean 0 and sample sd 1.
pub fn standardize(columns: &[Vec<f64>], names: &[String]) -> Result<(Vec<Vec<f64>>, Standardization)> {
    let mut out = Vec::with_capacity(columns.len());
    let mut means = Vec::with_capacity(columns.len());
    let mut scales = Vec::with_capacity(columns.len());
    for (k, col) in columns.iter().enumerate() {
        let name = names.get(k).cloned().unwrap_or_else(|| format!("v{k}"));
        let n = col.len() as f64;
        if col.len() < 2 {
            return Err(Error::ConstantColumn(name));
        }
        let mean = col.iter().sum::<f64>() / n;
        let var = col.iter().map(|x| (x - mean).powi(2)).sum::<f64>() / (n - 1.0);
        let sd = var.sqrt();
        if !(sd > 1e-12 * (1.0 + mean.abs())) {
            return Err(Error::ConstantColumn(name));
        }
        out.push(col.iter().map(|x| (x - mean) / sd).collect());
        means.push(mean);
        scales.push(sd);
    }
    Ok((
        out,
        Standardization {
            names: names.to_vec(),
            means,
            scales,
        },
    ))
}

/// Prior settings.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct HyperParams {
    /// Variance of the independent normal prior on each coefficient.
    pub prior_var_beta: f64,
    /// Conditional scale `η₀²` of the intrinsic CAR prior.
    pub car_scale: f64,
}

impl Default for HyperParams {
    fn default() -> Self {
        Self {
            prior_var_beta: 100.0,
            car_scale: 0.1,
        }
    }
}

impl HyperParams {
    pub fn validate(&self) -> Result<()> {
        if !(self.prior_var_beta > 0.0) || !(self.car_scale > 0.0) {
            return Err(Error::InvalidInput(format!(
                "prior variances must be positive: {self:?}"
            )));
        }
        Ok(())
    }
}

/// Free cut points `0 = α_0 < α_1 < α_2`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct CutPoints {
    pub a1: f64,
    pub a2: f64,
}

impl CutPoints {
    pub fn new(a1: f64, a2: f64) -> Result<Self> {
        let c = Self { a1, a2 };
        if !c.is_ordered() {
            return Err(Error::InvalidInput(format!("cut points must satisfy 0 < a1 < a2: {a1}, {a2}")));
        }
        Ok(c)
    }

    pub fn is_ordered(&self) -> bool {
        0.0 < self.a1 && self.a1 < self.a2 && self.a2.is_finite()
    }

    /// `(α_{y-1}, α_y)`.
    pub fn interval(&self, y: u8) -> (f64, f64) {
        match y {
            0 => (f64::NEG_INFINITY, 0.0),
            1 => (0.0, self.a1),
            2 => (self.a1, self.a2),
            _ => (self.a2, f64::INFINITY),
        }
    }

    pub fn category(&self, z: f64) -> u8 {
        if z <= 0.0 {
            0
        } else if z <= self.a1 {
            1
        } else if z <= self.a2 {
            2
        } else {
            3
        }
    }

    /// Masses of the four classes under `N(mu, 1)`.
    pub fn probs(&self, mu: f64) -> [f64; CATEGORIES] {
        let c0 = normal_cdf(-mu);
        let c1 = normal_cdf(self.a1 - mu);
        let c2 = normal_cdf(self.a2 - mu);
        [c0, c1 - c0, c2 - c1, 1.0 - c2]
    }
}

/// Which of the three mutually exclusive routes produced a zero observation.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum ZeroCase {
    /// Untransformed, potentially present, observed as absent (`z_P > 0`).
    Missed,
    /// Potentially absent (`z_P < 0`).
    Absent,
    /// Potentially present but the location was transformed (`z_P > 0`).
    Transformed,
}

impl ZeroCase {
    pub fn label(&self) -> &'static str {
        match self {
            ZeroCase::Missed => "missed",
            ZeroCase::Absent => "absent",
            ZeroCase::Transformed => "transformed",
        }
    }
}

/// Per-site latent beyond `z_P`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub enum SiteLatent {
    /// `y > 0`: the observed-scale latent.
    Observed { z_o: f64 },
    /// `y = 0`: the mixture component.
    Zero(ZeroCase),
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ParameterState {
    pub alpha: CutPoints,
    pub beta: Vec<f64>,
    pub theta: Vec<f64>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct LatentState {
    pub z_p: Vec<f64>,
    pub site: Vec<SiteLatent>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ChainState {
    pub params: ParameterState,
    pub latents: LatentState,
}

/// Cells, adjacency, covariates, untransformed fractions and observations.
///
/// Cells with at least one site come first (`0..sampled_cells()`); sites are
/// stored grouped by cell.
#[derive(Clone, Debug)]
pub struct Dataset {
    grid: CellGrid,
    adj: Adjacency,
    covariates: Vec<f64>,
    p: usize,
    covariate_names: Vec<String>,
    standardization: Option<Standardization>,
    u: Vec<f64>,
    site_cell: Vec<usize>,
    site_y: Vec<u8>,
    cell_sites: Vec<usize>,
    sampled: usize,
}

impl Dataset {
    /// Builds a dataset from cell and site tables, re-indexing cells so the
    /// sampled ones come first. With `standardize_covariates` each covariate
    /// column is centred and scaled.
    pub fn new(
        cells: Vec<CellRecord>,
        sites: &[SiteRecord],
        covariate_names: Vec<String>,
        threshold: f64,
        standardize_covariates: bool,
    ) -> Result<Self> {
        if cells.is_empty() {
            return Err(Error::InvalidInput("no cells".into()));
        }
        let p = covariate_names.len();
        let mut index = std::collections::HashMap::with_capacity(cells.len());
        for (k, c) in cells.iter().enumerate() {
            let location = format!("cell {}", c.id);
            if c.covariates.len() != p {
                return Err(Error::data(
                    location,
                    format!("expected {p} covariates, found {}", c.covariates.len()),
                ));
            }
            if !(0.0..=1.0).contains(&c.u) {
                return Err(Error::data(location, format!("u = {} outside [0, 1]", c.u)));
            }
            if let Some(bad) = c.covariates.iter().position(|v| !v.is_finite()) {
                return Err(Error::data(location, format!("non-finite covariate `{}`", covariate_names[bad])));
            }
            if index.insert(c.id, k).is_some() {
                return Err(Error::data(location, "duplicate cell id"));
            }
        }
        let mut counts = vec![0usize; cells.len()];
        for (row, s) in sites.iter().enumerate() {
            let Some(&k) = index.get(&s.cell_id) else {
                return Err(Error::data(format!("site {row}"), format!("unknown cell_id {}", s.cell_id)));
            };
            if s.y as usize >= CATEGORIES {
                return Err(Error::data(format!("site {row}"), format!("category {} outside 0..=3", s.y)));
            }
            counts[k] += 1;
        }
        let order: Vec<usize> = (0..cells.len())
            .filter(|&k| counts[k] > 0)
            .chain((0..cells.len()).filter(|&k| counts[k] == 0))
            .collect();
        let sampled = counts.iter().filter(|&&n| n > 0).count();
        let mut new_index = vec![0usize; cells.len()];
        for (new, &old) in order.iter().enumerate() {
            new_index[old] = new;
        }

        let grid = CellGrid::new(
            order.iter().map(|&k| cells[k].id).collect(),
            order.iter().map(|&k| [cells[k].x, cells[k].y]).collect(),
        )?;
        let adj = build_adjacency(&grid, threshold)?;

        let mut columns: Vec<Vec<f64>> = (0..p)
            .map(|j| order.iter().map(|&k| cells[k].covariates[j]).collect())
            .collect();
        let standardization = if standardize_covariates && p > 0 {
            let (cols, record) = standardize(&columns, &covariate_names)?;
            columns = cols;
            Some(record)
        } else {
            None
        };
        let n = cells.len();
        let mut covariates = vec![0.0; n * p];
        for (j, col) in columns.iter().enumerate() {
            for (i, &v) in col.iter().enumerate() {
                covariates[i * p + j] = v;
            }
        }

        let mut cell_sites = vec![0usize; n + 1];
        for s in sites {
            cell_sites[new_index[index[&s.cell_id]] + 1] += 1;
        }
        for i in 0..n {
            cell_sites[i + 1] += cell_sites[i];
        }
        let mut cursor = cell_sites.clone();
        let mut site_cell = vec![0usize; sites.len()];
        let mut site_y = vec![0u8; sites.len()];
        for s in sites {
            let cell = new_index[index[&s.cell_id]];
            let slot = cursor[cell];
            cursor[cell] += 1;
            site_cell[slot] = cell;
            site_y[slot] = s.y;
        }

        Ok(Self {
            grid,
            adj,
            covariates,
            p,
            covariate_names,
            standardization,
            u: order.iter().map(|&k| cells[k].u).collect(),
            site_cell,
            site_y,
            cell_sites,
            sampled,
        })
    }

    /// Same cells and site layout with new observations (in site order).
    pub fn with_observations(&self, y: Vec<u8>) -> Result<Self> {
        if y.len() != self.site_y.len() {
            return Err(Error::InvalidInput(format!(
                "{} observations for {} sites",
                y.len(),
                self.site_y.len()
            )));
        }
        if let Some(bad) = y.iter().position(|&v| v as usize >= CATEGORIES) {
            return Err(Error::data(format!("site {bad}"), "category outside 0..=3"));
        }
        let mut out = self.clone();
        out.site_y = y;
        Ok(out)
    }

    pub fn grid(&self) -> &CellGrid {
        &self.grid
    }

    pub fn adjacency(&self) -> &Adjacency {
        &self.adj
    }

    pub fn n_cells(&self) -> usize {
        self.u.len()
    }

    pub fn n_sites(&self) -> usize {
        self.site_y.len()
    }

    /// Number of covariates `P`.
    pub fn n_covariates(&self) -> usize {
        self.p
    }

    pub fn covariate_names(&self) -> &[String] {
        &self.covariate_names
    }

    pub fn standardization(&self) -> Option<&Standardization> {
        self.standardization.as_ref()
    }

    pub fn covariates(&self, cell: usize) -> &[f64] {
        &self.covariates[cell * self.p..(cell + 1) * self.p]
    }

    /// `v_iᵀβ`.
    pub fn regression(&self, cell: usize, beta: &[f64]) -> f64 {
        self.covariates(cell).iter().zip(beta).map(|(v, b)| v * b).sum()
    }

    pub fn u(&self, cell: usize) -> f64 {
        self.u[cell]
    }

    pub fn u_values(&self) -> &[f64] {
        &self.u
    }

    pub fn sites_of(&self, cell: usize) -> Range<usize> {
        self.cell_sites[cell]..self.cell_sites[cell + 1]
    }

    pub fn site_count(&self, cell: usize) -> usize {
        self.cell_sites[cell + 1] - self.cell_sites[cell]
    }

    pub fn site_cell(&self, site: usize) -> usize {
        self.site_cell[site]
    }

    pub fn site_y(&self, site: usize) -> u8 {
        self.site_y[site]
    }

    pub fn observations(&self) -> &[u8] {
        &self.site_y
    }

    /// Number of cells with at least one site, `m`.
    pub fn sampled_cells(&self) -> usize {
        self.sampled
    }

    pub fn cell_label(&self, cell: usize) -> u64 {
        self.grid.id(cell)
    }

    /// Internal index of the cell with external label `id`.
    pub fn cell_index(&self, id: u64) -> Option<usize> {
        self.grid.ids().iter().position(|&x| x == id)
    }
}

/// Checks the state against every support constraint of the model.
///
/// With `require_positive_potential` the `y > 0` sites must carry
/// `z_P > 0`; the literal positive-site kernel does not enforce that.
pub fn check_state(
    data: &Dataset,
    params: &ParameterState,
    latents: &LatentState,
    require_positive_potential: bool,
) -> Result<()> {
    let fail = |m: String| Err(Error::Invariant(m));
    if params.beta.len() != data.n_covariates() {
        return fail(format!("beta has {} entries for {} covariates", params.beta.len(), data.n_covariates()));
    }
    if params.theta.len() != data.n_cells() {
        return fail(format!("theta has {} entries for {} cells", params.theta.len(), data.n_cells()));
    }
    if latents.z_p.len() != data.n_sites() || latents.site.len() != data.n_sites() {
        return fail("latent vectors do not match the site count".into());
    }
    if !params.alpha.is_ordered() {
        return fail(format!("cut points out of order: {:?}", params.alpha));
    }
    if params.beta.iter().chain(&params.theta).any(|v| !v.is_finite()) {
        return fail("non-finite beta or theta".into());
    }
    for s in 0..data.n_sites() {
        let y = data.site_y(s);
        let z_p = latents.z_p[s];
        if !z_p.is_finite() {
            return fail(format!("site {s}: non-finite z_P"));
        }
        match (y, latents.site[s]) {
            (0, SiteLatent::Zero(case)) => {
                let ok = match case {
                    ZeroCase::Absent => z_p < 0.0,
                    ZeroCase::Missed | ZeroCase::Transformed => z_p > 0.0,
                };
                if !ok {
                    return fail(format!("site {s}: z_P = {z_p} inconsistent with case {case:?}"));
                }
            }
            (y, SiteLatent::Observed { z_o }) if y > 0 => {
                let (lo, hi) = params.alpha.interval(y);
                if !(z_o > lo && z_o < hi) {
                    return fail(format!("site {s}: z_O = {z_o} outside ({lo}, {hi}) for y = {y}"));
                }
                if require_positive_potential && !(z_p > 0.0) {
                    return fail(format!("site {s}: y = {y} with z_P = {z_p} <= 0"));
                }
            }
            (y, other) => return fail(format!("site {s}: y = {y} carries {other:?}")),
        }
    }
    Ok(())
}

/// Unnormalised log joint posterior of `(z_P, z_O / case, α, β, θ)`.
///
/// Returns `-∞` when the state leaves the support. Point masses of the
/// observation model enter through the discrete zero case: `ln u + ln Φ̄(z_P)`
/// for a missed presence (with `z_O <= 0` integrated out), `0` for a
/// potential absence and `ln(1 - u)` for a transformed location.
pub fn log_unnormalized_posterior(
    data: &Dataset,
    params: &ParameterState,
    latents: &LatentState,
    hyper: &HyperParams,
) -> Result<f64> {
    if params.beta.len() != data.n_covariates()
        || params.theta.len() != data.n_cells()
        || latents.z_p.len() != data.n_sites()
        || latents.site.len() != data.n_sites()
    {
        return Err(Error::Invariant("state dimensions do not match the dataset".into()));
    }
    if !params.alpha.is_ordered() {
        return Ok(f64::NEG_INFINITY);
    }
    let mut total = 0.0;
    for s in 0..data.n_sites() {
        let cell = data.site_cell(s);
        let mu = data.regression(cell, &params.beta) + params.theta[cell];
        let u = data.u(cell);
        let z_p = latents.z_p[s];
        total += normal_ln_pdf(z_p - mu);
        let y = data.site_y(s);
        let term = match latents.site[s] {
            SiteLatent::Observed { z_o } => {
                let (lo, hi) = params.alpha.interval(y);
                if y == 0 || !(z_o > lo && z_o < hi) || !(z_p > 0.0) {
                    return Ok(f64::NEG_INFINITY);
                }
                u.ln() + normal_ln_pdf(z_o - z_p)
            }
            SiteLatent::Zero(case) => {
                if y != 0 {
                    return Ok(f64::NEG_INFINITY);
                }
                match case {
                    ZeroCase::Missed if z_p > 0.0 => u.ln() + normal_ln_sf(z_p),
                    ZeroCase::Absent if z_p < 0.0 => 0.0,
                    ZeroCase::Transformed if z_p > 0.0 => (1.0 - u).ln(),
                    _ => return Ok(f64::NEG_INFINITY),
                }
            }
        };
        total += term;
    }
    let phi = hyper.prior_var_beta;
    for b in &params.beta {
        total += normal_ln_pdf(b / phi.sqrt()) - 0.5 * phi.ln();
    }
    let quad: f64 = data
        .adjacency()
        .edges()
        .map(|(i, j)| (params.theta[i] - params.theta[j]).powi(2))
        .sum();
    total -= quad / (2.0 * hyper.car_scale);
    Ok(total)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::normal_sf;

    fn toy_two_cells() -> Dataset {
        let cells = vec![
            CellRecord { id: 1, x: 0.0, y: 0.0, u: 0.8, covariates: vec![0.5] },
            CellRecord { id: 2, x: 1.0, y: 0.0, u: 0.4, covariates: vec![-0.5] },
        ];
        let sites = [
            SiteRecord { cell_id: 1, y: 2 },
            SiteRecord { cell_id: 1, y: 0 },
            SiteRecord { cell_id: 2, y: 0 },
            SiteRecord { cell_id: 2, y: 0 },
        ];
        Dataset::new(cells, &sites, vec!["v".into()], 1.5, false).unwrap()
    }

    #[test]
    fn standardize_symmetric_triple() {
        let (cols, rec) = standardize(&[vec![1.0, 2.0, 3.0]], &["a".into()]).unwrap();
        assert_eq!(cols[0], vec![-1.0, 0.0, 1.0]);
        assert_eq!(rec.means, vec![2.0]);
        assert_eq!(rec.scales, vec![1.0]);
    }

    #[test]
    fn standardize_is_idempotent_and_columnwise() {
        let a = vec![3.0, 1.0, 4.0, 1.0, 5.0, 9.0, 2.0];
        let b = vec![2.0, 7.0, 1.0, 8.0, 2.0, 8.0, 1.0];
        let names = vec!["a".to_string(), "b".to_string()];
        let (both, _) = standardize(&[a.clone(), b.clone()], &names).unwrap();
        let (only_a, _) = standardize(&[a], &names[..1]).unwrap();
        let (only_b, _) = standardize(&[b], &names[1..]).unwrap();
        assert_eq!(both[0], only_a[0]);
        assert_eq!(both[1], only_b[0]);
        let (again, rec) = standardize(&both, &names).unwrap();
        for (x, y) in again.iter().flatten().zip(both.iter().flatten()) {
            assert!((x - y).abs() < 1e-12);
        }
        assert!(rec.means.iter().all(|m| m.abs() < 1e-12));
    }

    #[test]
    fn constant_column_is_named() {
        let err = standardize(&[vec![1.0, 2.0], vec![4.0, 4.0]], &["ok".into(), "flat".into()]).unwrap_err();
        assert!(matches!(err, Error::ConstantColumn(ref n) if n == "flat"));
    }

    #[test]
    fn sampled_cells_come_first() {
        let cells = (0..4)
            .map(|k| CellRecord { id: 10 + k, x: k as f64, y: 0.0, u: 1.0, covariates: vec![] })
            .collect();
        let sites = [SiteRecord { cell_id: 12, y: 1 }, SiteRecord { cell_id: 13, y: 0 }];
        let d = Dataset::new(cells, &sites, vec![], 1.5, false).unwrap();
        assert_eq!(d.sampled_cells(), 2);
        assert_eq!(d.cell_label(0), 12);
        assert_eq!(d.cell_label(1), 13);
        assert_eq!(d.cell_label(2), 10);
        assert_eq!(d.site_count(0), 1);
        assert_eq!(d.site_y(d.sites_of(1).start), 0);
    }

    #[test]
    fn unknown_cell_and_bad_u_are_data_errors() {
        let cells = vec![
            CellRecord { id: 1, x: 0.0, y: 0.0, u: 1.0, covariates: vec![] },
            CellRecord { id: 2, x: 1.0, y: 0.0, u: 1.0, covariates: vec![] },
        ];
        let err = Dataset::new(cells.clone(), &[SiteRecord { cell_id: 9, y: 0 }], vec![], 1.5, false).unwrap_err();
        assert!(err.is_data_error());
        let mut bad = cells;
        bad[1].u = 1.5;
        assert!(Dataset::new(bad, &[], vec![], 1.5, false).unwrap_err().is_data_error());
    }

    #[test]
    fn category_masses_form_a_simplex() {
        let alpha = CutPoints::new(0.7, 1.9).unwrap();
        for k in -60..=60 {
            let p = alpha.probs(k as f64 * 0.25);
            assert!((p.iter().sum::<f64>() - 1.0).abs() < 1e-12);
            assert!(p.iter().all(|&x| x >= 0.0));
        }
    }

    #[test]
    fn censoring_indicator_flags_out_of_support() {
        let cells = vec![
            CellRecord { id: 1, x: 0.0, y: 0.0, u: 1.0, covariates: vec![] },
            CellRecord { id: 2, x: 1.0, y: 0.0, u: 1.0, covariates: vec![] },
        ];
        let d = Dataset::new(cells, &[SiteRecord { cell_id: 1, y: 1 }], vec![], 1.5, false).unwrap();
        let params = ParameterState {
            alpha: CutPoints::new(1.0, 2.0).unwrap(),
            beta: vec![],
            theta: vec![0.0, 0.0],
        };
        let mut latents = LatentState {
            z_p: vec![0.4],
            site: vec![SiteLatent::Observed { z_o: 0.5 }],
        };
        let h = HyperParams::default();
        assert!(log_unnormalized_posterior(&d, &params, &latents, &h).unwrap().is_finite());
        latents.site[0] = SiteLatent::Observed { z_o: 1.2 };
        assert_eq!(log_unnormalized_posterior(&d, &params, &latents, &h).unwrap(), f64::NEG_INFINITY);
        assert!(check_state(&d, &params, &latents, true).is_err());
    }

    #[test]
    fn zero_effects_contribute_no_car_term() {
        let d = toy_two_cells();
        let params = ParameterState {
            alpha: CutPoints::new(1.0, 2.0).unwrap(),
            beta: vec![0.0],
            theta: vec![0.0, 0.0],
        };
        let latents = LatentState {
            z_p: vec![1.5, -0.3, -0.2, -0.1],
            site: vec![
                SiteLatent::Observed { z_o: 1.5 },
                SiteLatent::Zero(ZeroCase::Absent),
                SiteLatent::Zero(ZeroCase::Absent),
                SiteLatent::Zero(ZeroCase::Absent),
            ],
        };
        let h = HyperParams::default();
        let base = log_unnormalized_posterior(&d, &params, &latents, &h).unwrap();
        let mut shifted = params.clone();
        shifted.theta = vec![0.3, 0.3];
        // equal thetas: CAR kernel still zero; only the z_P likelihood moves
        let moved = log_unnormalized_posterior(&d, &shifted, &latents, &h).unwrap();
        let lik_delta: f64 = latents
            .z_p
            .iter()
            .map(|z| normal_ln_pdf(z - 0.3) - normal_ln_pdf(*z))
            .sum();
        assert!((moved - base - lik_delta).abs() < 1e-12);
    }

    #[test]
    fn two_cell_toy_matches_hand_sum() {
        let d = toy_two_cells();
        let params = ParameterState {
            alpha: CutPoints::new(1.0, 2.2).unwrap(),
            beta: vec![0.6],
            theta: vec![0.25, -0.25],
        };
        let latents = LatentState {
            z_p: vec![1.1, 0.4, -0.7, 0.9],
            site: vec![
                SiteLatent::Observed { z_o: 1.7 },
                SiteLatent::Zero(ZeroCase::Missed),
                SiteLatent::Zero(ZeroCase::Absent),
                SiteLatent::Zero(ZeroCase::Transformed),
            ],
        };
        let h = HyperParams { prior_var_beta: 4.0, car_scale: 0.5 };
        let got = log_unnormalized_posterior(&d, &params, &latents, &h).unwrap();

        let ln_phi = |x: f64| -0.5 * (2.0 * std::f64::consts::PI).ln() - 0.5 * x * x;
        let mu1 = 0.5 * 0.6 + 0.25;
        let mu2 = -0.5 * 0.6 - 0.25;
        let mut hand = 0.0;
        hand += ln_phi(1.1 - mu1) + 0.8f64.ln() + ln_phi(1.7 - 1.1);
        hand += ln_phi(0.4 - mu1) + 0.8f64.ln() + normal_sf(0.4).ln();
        hand += ln_phi(-0.7 - mu2);
        hand += ln_phi(0.9 - mu2) + (1.0f64 - 0.4).ln();
        hand += -0.5 * (2.0 * std::f64::consts::PI * 4.0).ln() - 0.6 * 0.6 / (2.0 * 4.0);
        hand += -(0.5f64).powi(2) / (2.0 * 0.5);
        assert!((got - hand).abs() < 1e-12, "{got} vs {hand}");
    }
}
