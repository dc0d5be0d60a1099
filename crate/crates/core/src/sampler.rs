//! Full-conditional kernels and the sweep that strings them together.
//!
//! A sweep updates every site latent given the current parameters, then the
//! cut points, then the coefficients, then the spatial effects under the
//! separator schedule, and finally centres the spatial effects.

use nalgebra::{Cholesky, DMatrix, DVector, Dyn};
use rand::Rng;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{
    check_state, ChainState, CutPoints, Dataset, HyperParams, LatentState, ParameterState, SiteLatent,
    ZeroCase,
};
use crate::schedule::{ThetaInputs, ThetaSchedule};
use crate::stats::{
    left_tail_mean, normal_cdf, normal_ln_cdf, normal_ln_sf, normal_sf, orthant_prob, sample_truncnorm,
    standard_normal, RngStream, StreamDomain,
};

/// Update used for the potential latent at sites with `y > 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum PositiveKernel {
    /// `z_P | z_O ~ N((z_O + μ)/2, 1/2)` restricted to `z_P > 0`; a positive
    /// observation is impossible unless `z_P > 0`.
    #[default]
    Exact,
    /// The same Gaussian without the positivity restriction.
    Literal,
}

/// Update used for `(case, z_P)` at sites with `y = 0`.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize, Default)]
#[serde(rename_all = "lowercase")]
pub enum ZeroKernel {
    /// Independence Metropolis–Hastings on the pair `(case, z_P)`: the case is
    /// proposed from the mixture weights and `z_P` from the matching
    /// truncated normal. The acceptance ratio reduces to
    /// `(1 − Φ(z*)) / (1 − Φ(z))` when both states are missed presences.
    #[default]
    Joint,
    /// Draw the case, then update `z_P` within the case; a missed presence
    /// uses the `(1 − Φ)` Metropolis–Hastings step against the current `z_P`.
    Literal,
}

/// Deliberate defects for exercising the correctness oracles.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
pub enum Fault {
    /// `z_P | z_O` drawn with variance 1 instead of 1/2.
    WrongVariance,
    /// Potential absences drawn without the `z_P < 0` restriction.
    DroppedIndicator,
    /// Transformed weight uses `u` in place of `1 − u`.
    WrongMixtureWeight,
    /// Spatial effects never centred.
    MissingCentering,
    /// Truncation sides of the absent and present cases swapped.
    SwappedTruncation,
    /// Last neighbour dropped from the CAR neighbour sum.
    OffByOneNeighborSum,
    /// Coefficient posterior precision doubled.
    BetaPrecisionDoubled,
}

impl Fault {
    pub const ALL: [Fault; 7] = [
        Fault::WrongVariance,
        Fault::DroppedIndicator,
        Fault::WrongMixtureWeight,
        Fault::MissingCentering,
        Fault::SwappedTruncation,
        Fault::OffByOneNeighborSum,
        Fault::BetaPrecisionDoubled,
    ];
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SamplerOptions {
    /// Stand-in for `α_3 = +∞` when no site is in the top class.
    pub alpha_cap: f64,
    pub positive_kernel: PositiveKernel,
    pub zero_kernel: ZeroKernel,
    /// Run [`check_state`] every this many sweeps (0 disables).
    pub check_every: u64,
    #[serde(skip)]
    pub fault: Option<Fault>,
}

impl Default for SamplerOptions {
    fn default() -> Self {
        Self {
            alpha_cap: 20.0,
            positive_kernel: PositiveKernel::Exact,
            zero_kernel: ZeroKernel::Joint,
            check_every: 0,
            fault: None,
        }
    }
}

/// Diagnostics of one sweep.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct SweepReport {
    pub sweep: u64,
    /// Acceptance rate of the missed-presence Metropolis–Hastings step
    /// (0 when no such step was attempted).
    pub mh_accept_rate: f64,
    pub mh_proposals: usize,
    pub alpha_interval_widths: [f64; 2],
    pub theta_center_shift: f64,
}

// ---------------------------------------------------------------------------
// single-site kernels

/// Draws `N(mean, var)` restricted to `(lower, upper)`.
fn truncnorm_scaled<R: Rng + ?Sized>(mean: f64, var: f64, lower: f64, upper: f64, rng: &mut R) -> Result<f64> {
    let sd = var.sqrt();
    let z = sample_truncnorm(mean / sd, lower / sd, upper / sd, rng)?;
    let x = z * sd;
    if x > lower && x < upper {
        Ok(x)
    } else {
        Err(Error::Numeric(format!("scaled truncated draw {x} left ({lower}, {upper})")))
    }
}

/// Site with `y > 0`: `z_O ~ N(z_P, 1)` on `(α_{y−1}, α_y)`, then `z_P` given
/// `z_O` and `μ = v_iᵀβ + θ_i`. Returns `(z_O, z_P)`.
pub fn update_site_positive<R: Rng + ?Sized>(
    y: u8,
    z_p: f64,
    mu: f64,
    alpha: &CutPoints,
    kernel: PositiveKernel,
    fault: Option<Fault>,
    rng: &mut R,
) -> Result<(f64, f64)> {
    debug_assert!(y > 0);
    let (lo, hi) = alpha.interval(y);
    let z_o = sample_truncnorm(z_p, lo, hi, rng)?;
    let z_p = potential_given_observed(z_o, mu, kernel, fault, rng)?;
    Ok((z_o, z_p))
}

/// Second half of [`update_site_positive`]: `z_P | z_O, μ`.
pub fn potential_given_observed<R: Rng + ?Sized>(
    z_o: f64,
    mu: f64,
    kernel: PositiveKernel,
    fault: Option<Fault>,
    rng: &mut R,
) -> Result<f64> {
    let mean = 0.5 * (z_o + mu);
    let var = if fault == Some(Fault::WrongVariance) { 1.0 } else { 0.5 };
    match kernel {
        PositiveKernel::Exact => truncnorm_scaled(mean, var, 0.0, f64::INFINITY, rng),
        PositiveKernel::Literal => Ok(mean + var.sqrt() * standard_normal(rng)),
    }
}

/// Unnormalised prior weights `(π₁, π₂, π₃)` of the three routes to a zero:
/// missed presence `u·P(z_P ≥ 0, z_O ≤ 0)`, potential absence `1 − Φ(μ)`,
/// transformed presence `(1 − u)·Φ(μ)`.
pub fn zero_case_weights(u: f64, mu: f64) -> [f64; 3] {
    [u * orthant_prob(mu), normal_sf(mu), (1.0 - u) * normal_cdf(mu)]
}

/// [`zero_case_weights`] with an optional injected defect.
pub fn zero_weights_with_fault(u: f64, mu: f64, fault: Option<Fault>) -> [f64; 3] {
    let mut w = zero_case_weights(u, mu);
    if fault == Some(Fault::WrongMixtureWeight) {
        w[2] = u * normal_cdf(mu);
    }
    w
}

/// Unnormalised conditional density of `z_P` for a missed presence:
/// `φ(z − μ)(1 − Φ(z))` on `z > 0`.
pub fn target_density_case1(z: f64, mu: f64) -> f64 {
    if z <= 0.0 {
        0.0
    } else {
        crate::stats::normal_pdf(z - mu) * normal_sf(z)
    }
}

/// One independence Metropolis–Hastings step for a missed presence, from a
/// valid current value `z > 0`. The proposal is `N(μ, 1)` on `(0, ∞)`, so the
/// ratio involves only the `1 − Φ` factors. Returns `(z, accepted)`.
pub fn mh_case1_step<R: Rng + ?Sized>(z: f64, mu: f64, rng: &mut R) -> Result<(f64, bool)> {
    let proposal = sample_truncnorm(mu, 0.0, f64::INFINITY, rng)?;
    let log_ratio = normal_ln_sf(proposal) - normal_ln_sf(z);
    let u: f64 = rng.random();
    if log_ratio >= 0.0 || u.ln() < log_ratio {
        Ok((proposal, true))
    } else {
        Ok((z, false))
    }
}

fn draw_case<R: Rng + ?Sized>(weights: &[f64; 3], rng: &mut R) -> Result<ZeroCase> {
    let total: f64 = weights.iter().sum();
    if !(total > 0.0) || !total.is_finite() {
        return Err(Error::Numeric(format!("zero-site mixture weights underflow: {weights:?}")));
    }
    let r = rng.random::<f64>() * total;
    Ok(if r < weights[0] {
        ZeroCase::Missed
    } else if r < weights[0] + weights[1] {
        ZeroCase::Absent
    } else {
        ZeroCase::Transformed
    })
}

/// Draws `z_P` given the zero-site case: `(−∞, 0)` for a potential absence,
/// `(0, ∞)` otherwise.
pub fn case_latent_draw<R: Rng + ?Sized>(case: ZeroCase, mu: f64, fault: Option<Fault>, rng: &mut R) -> Result<f64> {
    let swapped = fault == Some(Fault::SwappedTruncation);
    match (case, swapped) {
        (ZeroCase::Absent, false) | (ZeroCase::Missed | ZeroCase::Transformed, true) => {
            if fault == Some(Fault::DroppedIndicator) && case == ZeroCase::Absent {
                Ok(mu + standard_normal(rng))
            } else {
                sample_truncnorm(mu, f64::NEG_INFINITY, 0.0, rng)
            }
        }
        _ => sample_truncnorm(mu, 0.0, f64::INFINITY, rng),
    }
}

/// Outcome of a zero-site update.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct ZeroUpdate {
    pub case: ZeroCase,
    pub z_p: f64,
    /// A missed-presence Metropolis–Hastings decision was made.
    pub mh_attempted: bool,
    pub mh_accepted: bool,
}

/// Log importance weight of `(case, z)` under the joint independence
/// proposal: zero for the exactly-sampled cases, and
/// `ln(1 − Φ(z)) + ln Φ(μ) − ln P(z_P ≥ 0, z_O ≤ 0)` for a missed presence.
fn joint_log_weight(case: ZeroCase, z: f64, mu: f64, ln_orthant: f64) -> f64 {
    match case {
        ZeroCase::Missed => normal_ln_sf(z) + normal_ln_cdf(mu) - ln_orthant,
        _ => 0.0,
    }
}

/// Updates `(case, z_P)` at a site with `y = 0`.
///
/// `weights` are the (cell-level) [`zero_case_weights`]; `current` is the
/// site's present state, `None` on initialisation.
pub fn update_site_zero<R: Rng + ?Sized>(
    weights: &[f64; 3],
    mu: f64,
    current: Option<(ZeroCase, f64)>,
    kernel: ZeroKernel,
    fault: Option<Fault>,
    rng: &mut R,
) -> Result<ZeroUpdate> {
    let case = draw_case(weights, rng)?;
    let Some((old_case, old_z)) = current else {
        let z_p = case_latent_draw(case, mu, fault, rng)?;
        return Ok(ZeroUpdate { case, z_p, mh_attempted: false, mh_accepted: false });
    };
    match kernel {
        ZeroKernel::Joint => {
            let z_new = case_latent_draw(case, mu, fault, rng)?;
            if case != ZeroCase::Missed && old_case != ZeroCase::Missed {
                return Ok(ZeroUpdate { case, z_p: z_new, mh_attempted: false, mh_accepted: false });
            }
            let ln_orthant = orthant_prob(mu).ln();
            let log_ratio = joint_log_weight(case, z_new, mu, ln_orthant)
                - joint_log_weight(old_case, old_z, mu, ln_orthant);
            let u: f64 = rng.random();
            if log_ratio >= 0.0 || u.ln() < log_ratio {
                Ok(ZeroUpdate { case, z_p: z_new, mh_attempted: true, mh_accepted: true })
            } else {
                Ok(ZeroUpdate { case: old_case, z_p: old_z, mh_attempted: true, mh_accepted: false })
            }
        }
        ZeroKernel::Literal => {
            if case != ZeroCase::Missed {
                let z_p = case_latent_draw(case, mu, fault, rng)?;
                return Ok(ZeroUpdate { case, z_p, mh_attempted: false, mh_accepted: false });
            }
            if old_z > 0.0 {
                let (z_p, accepted) = mh_case1_step(old_z, mu, rng)?;
                return Ok(ZeroUpdate { case, z_p, mh_attempted: true, mh_accepted: accepted });
            }
            // no valid current value: rejection against the bound 1 − Φ(0) = 1/2
            let mut last = 0.0;
            for _ in 0..100 {
                last = sample_truncnorm(mu, 0.0, f64::INFINITY, rng)?;
                if rng.random::<f64>() < 2.0 * normal_sf(last) {
                    break;
                }
            }
            Ok(ZeroUpdate { case, z_p: last, mh_attempted: true, mh_accepted: true })
        }
    }
}

// ---------------------------------------------------------------------------
// cut points

fn uniform_open<R: Rng + ?Sized>(lo: f64, hi: f64, rng: &mut R) -> f64 {
    loop {
        let x = lo + (hi - lo) * rng.random::<f64>();
        if x > lo && x < hi {
            return x;
        }
    }
}

/// Extremes of `z_O` per positive class: `(max, min)` for classes 1..=3.
#[derive(Clone, Copy, Debug, Default)]
pub struct ClassExtremes {
    pub max: [Option<f64>; 3],
    pub min: [Option<f64>; 3],
}

impl ClassExtremes {
    pub fn from_latents(data: &Dataset, latents: &LatentState) -> Self {
        let mut out = Self::default();
        for (s, site) in latents.site.iter().enumerate() {
            if let SiteLatent::Observed { z_o } = *site {
                out.push(data.site_y(s), z_o);
            }
        }
        out
    }

    pub fn push(&mut self, y: u8, z_o: f64) {
        let k = y as usize - 1;
        self.max[k] = Some(self.max[k].map_or(z_o, |m| m.max(z_o)));
        self.min[k] = Some(self.min[k].map_or(z_o, |m| m.min(z_o)));
    }
}

/// The two uniform intervals `(lo_h, hi_h)` for `α_1` and `α_2`, with empty
/// classes falling back to the neighbouring cut point (`α_0 = 0` below,
/// `cap` above the top one). `α_2`'s interval uses the new `α_1`.
pub fn alpha_interval_1(ext: &ClassExtremes, current: &CutPoints) -> (f64, f64) {
    (ext.max[0].unwrap_or(0.0), ext.min[1].unwrap_or(current.a2))
}

/// The cap also bounds a non-empty top class, so the cut points always have
/// the proper prior `U{0 < α₁ < α₂ < cap}`.
pub fn alpha_interval_2(ext: &ClassExtremes, new_a1: f64, cap: f64) -> (f64, f64) {
    (ext.max[1].unwrap_or(new_a1), ext.min[2].map_or(cap, |m| m.min(cap)))
}

/// `α_h ~ U(max_{y=h} z_O, min_{y=h+1} z_O)` for `h = 1, 2`.
pub fn update_alpha<R: Rng + ?Sized>(
    ext: &ClassExtremes,
    current: &CutPoints,
    cap: f64,
    rng: &mut R,
) -> Result<(CutPoints, [f64; 2])> {
    let (lo1, hi1) = alpha_interval_1(ext, current);
    if !(lo1 < hi1) {
        return Err(Error::Invariant(format!("alpha_1 interval inverted: ({lo1}, {hi1})")));
    }
    let a1 = uniform_open(lo1, hi1, rng);
    let (lo2, hi2) = alpha_interval_2(ext, a1, cap);
    if !(lo2 < hi2) {
        return Err(Error::Invariant(format!("alpha_2 interval inverted: ({lo2}, {hi2})")));
    }
    let a2 = uniform_open(lo2, hi2, rng);
    Ok((CutPoints { a1, a2 }, [hi1 - lo1, hi2 - lo2]))
}

// ---------------------------------------------------------------------------
// coefficients

/// Conjugate normal update of `β` given the potential latents and `θ`.
///
/// Precision `Σ_i n_i v_i v_iᵀ + I/φ` depends only on the site layout and is
/// factorised once.
#[derive(Clone, Debug)]
pub struct BetaKernel {
    chol: Option<Cholesky<f64, Dyn>>,
    p: usize,
}

impl BetaKernel {
    pub fn new(data: &Dataset, hyper: &HyperParams, fault: Option<Fault>) -> Result<Self> {
        let precision = Self::precision(data, hyper, fault);
        let p = data.n_covariates();
        if p == 0 {
            return Ok(Self { chol: None, p });
        }
        let chol = Cholesky::new(precision)
            .ok_or_else(|| Error::Numeric("coefficient precision is not positive definite".into()))?;
        Ok(Self { chol: Some(chol), p })
    }

    pub fn precision(data: &Dataset, hyper: &HyperParams, fault: Option<Fault>) -> DMatrix<f64> {
        let p = data.n_covariates();
        let mut m = DMatrix::<f64>::identity(p, p) / hyper.prior_var_beta;
        for cell in 0..data.n_cells() {
            let n = data.site_count(cell) as f64;
            if n == 0.0 {
                continue;
            }
            let v = data.covariates(cell);
            for a in 0..p {
                for b in 0..p {
                    m[(a, b)] += n * v[a] * v[b];
                }
            }
        }
        if fault == Some(Fault::BetaPrecisionDoubled) {
            m *= 2.0;
        }
        m
    }

    /// `Σ_i v_i Σ_j (z_P,ij − θ_i)`.
    pub fn score(data: &Dataset, z_p: &[f64], theta: &[f64]) -> DVector<f64> {
        let p = data.n_covariates();
        let mut b = DVector::<f64>::zeros(p);
        for cell in 0..data.n_cells() {
            let range = data.sites_of(cell);
            if range.is_empty() {
                continue;
            }
            let r: f64 = z_p[range.clone()].iter().map(|z| z - theta[cell]).sum();
            for (k, v) in data.covariates(cell).iter().enumerate() {
                b[k] += v * r;
            }
        }
        b
    }

    /// Posterior mean for the given latents.
    pub fn mean(&self, data: &Dataset, z_p: &[f64], theta: &[f64]) -> DVector<f64> {
        match &self.chol {
            None => DVector::zeros(0),
            Some(c) => c.solve(&Self::score(data, z_p, theta)),
        }
    }

    pub fn draw<R: Rng + ?Sized>(&self, data: &Dataset, z_p: &[f64], theta: &[f64], rng: &mut R) -> Vec<f64> {
        let Some(chol) = &self.chol else {
            return Vec::new();
        };
        let mean = chol.solve(&Self::score(data, z_p, theta));
        let xi = DVector::from_iterator(self.p, (0..self.p).map(|_| standard_normal(rng)));
        // precision = L Lᵀ, so L⁻ᵀ ξ has covariance precision⁻¹
        let noise = chol
            .l()
            .transpose()
            .solve_upper_triangular(&xi)
            .expect("Cholesky factor has a positive diagonal");
        (mean + noise).iter().copied().collect()
    }
}

/// Subtracts the mean; returns the amount removed.
pub fn center_theta(theta: &mut [f64]) -> f64 {
    if theta.is_empty() {
        return 0.0;
    }
    let shift = theta.iter().sum::<f64>() / theta.len() as f64;
    for t in theta.iter_mut() {
        *t -= shift;
    }
    shift
}

// ---------------------------------------------------------------------------
// transformed latent

/// Posterior of `z_T` at one site: `z_P` with probability `untransformed`,
/// `c(z_P)` otherwise.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct TransformedLatent {
    pub z_p: f64,
    pub untransformed: f64,
}

impl TransformedLatent {
    pub fn transformed_value(&self) -> f64 {
        left_tail_mean(self.z_p)
    }

    pub fn mean(&self) -> f64 {
        self.untransformed * self.z_p + (1.0 - self.untransformed) * self.transformed_value()
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        if rng.random::<f64>() < self.untransformed {
            self.z_p
        } else {
            self.transformed_value()
        }
    }
}

/// `f(z_T | z_O, z_P) ∝ f(z_T | z_P) f(z_O | z_T)`.
///
/// A positive observation has `z_O > 0`, which the transformed branch (a point
/// mass at `c(z_P) < 0`) cannot produce, so `z_T = z_P`. A transformed zero
/// has `z_T = c(z_P)`, a missed presence `z_T = z_P`. For a potential absence
/// both branches give `z_O = z_T < 0`, so the prior odds `u : 1 − u` stand.
pub fn reconstruct_z_t(latent: &SiteLatent, z_p: f64, u: f64) -> TransformedLatent {
    let untransformed = match latent {
        SiteLatent::Observed { .. } => 1.0,
        SiteLatent::Zero(ZeroCase::Missed) => 1.0,
        SiteLatent::Zero(ZeroCase::Transformed) => 0.0,
        SiteLatent::Zero(ZeroCase::Absent) => u,
    };
    TransformedLatent { z_p, untransformed }
}

/// `E(z_T | z_P) = u z_P + (1 − u) c(z_P)`.
pub fn expected_z_t(z_p: f64, u: f64) -> f64 {
    u * z_p + (1.0 - u) * left_tail_mean(z_p)
}

// ---------------------------------------------------------------------------
// sweep

/// Gibbs sampler bound to a dataset layout and a spatial-effect schedule.
pub struct Sampler {
    hyper: HyperParams,
    options: SamplerOptions,
    schedule: ThetaSchedule,
    beta: BetaKernel,
    seed: u64,
    site_count: Vec<usize>,
    n_sites: usize,
}

impl Sampler {
    pub fn new(
        data: &Dataset,
        hyper: HyperParams,
        options: SamplerOptions,
        schedule: ThetaSchedule,
        seed: u64,
    ) -> Result<Self> {
        hyper.validate()?;
        if schedule.partition().blocks.iter().map(Vec::len).sum::<usize>() + schedule.partition().boundary.len()
            != data.n_cells()
        {
            return Err(Error::InvalidPartition("schedule does not cover the dataset".into()));
        }
        let beta = BetaKernel::new(data, &hyper, options.fault)?;
        Ok(Self {
            hyper,
            options,
            schedule,
            beta,
            seed,
            site_count: (0..data.n_cells()).map(|c| data.site_count(c)).collect(),
            n_sites: data.n_sites(),
        })
    }

    pub fn options(&self) -> &SamplerOptions {
        &self.options
    }

    pub fn hyper(&self) -> &HyperParams {
        &self.hyper
    }

    pub fn schedule(&self) -> &ThetaSchedule {
        &self.schedule
    }

    pub fn seed(&self) -> u64 {
        self.seed
    }

    /// Starting state: `α = (1, 2)` (raised if needed to sit below the cap),
    /// `β = 0`, `θ = 0`, latents drawn consistently with the observations.
    pub fn initialize(&self, data: &Dataset) -> Result<ChainState> {
        let a2 = 2.0f64.min(0.5 * self.options.alpha_cap);
        let alpha = CutPoints::new(0.5 * a2, a2)?;
        let params = ParameterState {
            alpha,
            beta: vec![0.0; data.n_covariates()],
            theta: vec![0.0; data.n_cells()],
        };
        let mut z_p = vec![0.0; data.n_sites()];
        let mut site = Vec::with_capacity(data.n_sites());
        for s in 0..data.n_sites() {
            let mut rng = RngStream::keyed(self.seed, StreamDomain::Init, s as u64, 0).rng();
            let y = data.site_y(s);
            if y > 0 {
                let (lo, hi) = alpha.interval(y);
                let z_o = sample_truncnorm(0.5 * (lo + hi.min(lo + 2.0)), lo, hi, &mut rng)?;
                z_p[s] = z_o;
                site.push(SiteLatent::Observed { z_o });
            } else {
                let upd = update_site_zero(
                    &zero_case_weights(data.u(data.site_cell(s)), 0.0),
                    0.0,
                    None,
                    self.options.zero_kernel,
                    None,
                    &mut rng,
                )?;
                z_p[s] = upd.z_p;
                site.push(SiteLatent::Zero(upd.case));
            }
        }
        Ok(ChainState {
            params,
            latents: LatentState { z_p, site },
        })
    }

    fn site_update(
        &self,
        data: &Dataset,
        s: usize,
        z_p: f64,
        latent: SiteLatent,
        mu: f64,
        weights: &[f64; 3],
        alpha: &CutPoints,
        sweep: u64,
    ) -> Result<(f64, SiteLatent, bool, bool)> {
        let mut rng = RngStream::keyed(self.seed, StreamDomain::SiteLatent, s as u64, sweep).rng();
        let y = data.site_y(s);
        match latent {
            SiteLatent::Observed { .. } => {
                let (z_o, z_p) = update_site_positive(
                    y,
                    z_p,
                    mu,
                    alpha,
                    self.options.positive_kernel,
                    self.options.fault,
                    &mut rng,
                )?;
                Ok((z_p, SiteLatent::Observed { z_o }, false, false))
            }
            SiteLatent::Zero(case) => {
                let upd = update_site_zero(
                    weights,
                    mu,
                    Some((case, z_p)),
                    self.options.zero_kernel,
                    self.options.fault,
                    &mut rng,
                )?;
                Ok((upd.z_p, SiteLatent::Zero(upd.case), upd.mh_attempted, upd.mh_accepted))
            }
        }
    }

    /// One full sweep; `sweep` keys every random stream used.
    pub fn sweep(&self, data: &Dataset, state: &mut ChainState, sweep: u64) -> Result<SweepReport> {
        if data.n_sites() != self.n_sites || data.n_cells() != self.site_count.len() {
            return Err(Error::InvalidInput("dataset layout differs from the one the sampler was built for".into()));
        }
        let n_cells = data.n_cells();
        let params = &mut state.params;
        let latents = &mut state.latents;
        let mu: Vec<f64> = (0..n_cells)
            .map(|c| data.regression(c, &params.beta) + params.theta[c])
            .collect();

        // cell-level mixture weights for zero sites
        let needs_weights: Vec<bool> = (0..n_cells)
            .map(|c| data.sites_of(c).any(|s| data.site_y(s) == 0))
            .collect();
        let fault = self.options.fault;
        let weight_of = |c: usize| {
            if needs_weights[c] {
                zero_weights_with_fault(data.u(c), mu[c], fault)
            } else {
                [0.0; 3]
            }
        };
        let weights: Vec<[f64; 3]> = if self.schedule.is_parallel() {
            self.schedule.install(|| (0..n_cells).into_par_iter().map(weight_of).collect())
        } else {
            (0..n_cells).map(weight_of).collect()
        };

        // site latents: conditionally independent given the parameters, and
        // keyed per site, so visiting order does not affect the result
        let alpha = params.alpha;
        let update = |s: usize| {
            let c = data.site_cell(s);
            self.site_update(data, s, latents.z_p[s], latents.site[s], mu[c], &weights[c], &alpha, sweep)
        };
        let results: Vec<Result<(f64, SiteLatent, bool, bool)>> = if self.schedule.is_parallel() {
            self.schedule.install(|| (0..data.n_sites()).into_par_iter().map(update).collect())
        } else {
            (0..data.n_sites()).map(update).collect()
        };
        let mut proposals = 0usize;
        let mut accepted = 0usize;
        for (s, r) in results.into_iter().enumerate() {
            let (z, latent, tried, ok) = r?;
            latents.z_p[s] = z;
            latents.site[s] = latent;
            proposals += usize::from(tried);
            accepted += usize::from(ok);
        }

        // cut points
        let ext = ClassExtremes::from_latents(data, latents);
        let mut rng = RngStream::keyed(self.seed, StreamDomain::Alpha, 0, sweep).rng();
        let (alpha, widths) = update_alpha(&ext, &params.alpha, self.options.alpha_cap, &mut rng)?;
        params.alpha = alpha;

        // coefficients
        let mut rng = RngStream::keyed(self.seed, StreamDomain::Beta, 0, sweep).rng();
        params.beta = self.beta.draw(data, &latents.z_p, &params.theta, &mut rng);

        // spatial effects
        let resid_sum: Vec<f64> = (0..n_cells)
            .map(|c| {
                let range = data.sites_of(c);
                let n = range.len() as f64;
                latents.z_p[range].iter().sum::<f64>() - n * data.regression(c, &params.beta)
            })
            .collect();
        let inputs = ThetaInputs {
            adj: data.adjacency(),
            resid_sum: &resid_sum,
            site_count: &self.site_count,
            car_scale: self.hyper.car_scale,
            seed: self.seed,
            sweep,
            drop_last_neighbor: fault == Some(Fault::OffByOneNeighborSum),
        };
        self.schedule.run_theta_sweep(&mut params.theta, &inputs)?;
        let shift = if fault == Some(Fault::MissingCentering) {
            0.0
        } else {
            center_theta(&mut params.theta)
        };

        if self.options.check_every > 0 && sweep.is_multiple_of(self.options.check_every) {
            check_state(
                data,
                &state.params,
                &state.latents,
                self.options.positive_kernel == PositiveKernel::Exact,
            )?;
        }

        Ok(SweepReport {
            sweep,
            mh_accept_rate: if proposals > 0 { accepted as f64 / proposals as f64 } else { 0.0 },
            mh_proposals: proposals,
            alpha_interval_widths: widths,
            theta_center_shift: shift,
        })
    }
}
