//! Correctness oracles that do not share numerics with the sampler.
//!
//! Normal tail probabilities here come from a tabulated Gauss–Legendre
//! integral of `exp(−x²/2)`, not from the library's `erfc` path, so a defect
//! in either shows up as a disagreement.

use std::sync::OnceLock;

use rand::Rng;
use serde::{Deserialize, Serialize};
use statrs::distribution::{ChiSquared, ContinuousCDF};

use crate::error::{Error, Result};
use crate::lattice::{build_adjacency, CellGrid};
use crate::model::{
    CellRecord, ChainState, CutPoints, Dataset, HyperParams, ParameterState, SiteLatent, SiteRecord, ZeroCase,
};
use crate::sampler::{
    case_latent_draw, mh_case1_step, potential_given_observed, update_alpha, update_site_positive,
    update_site_zero, zero_weights_with_fault, BetaKernel, ClassExtremes, Fault, PositiveKernel,
    Sampler, SamplerOptions, ZeroKernel,
};
use crate::schedule::{ThetaInputs, ThetaSchedule};
use crate::sim::{simulate_observations, IcarPrior, SimConfig, SiteCount, UField};
use crate::stats::{standard_normal, RngStream, StreamDomain};

// ---------------------------------------------------------------------------
// reference quadrature

const GL5_X: [f64; 5] = [
    -0.906_179_845_938_664,
    -0.538_469_310_105_683_1,
    0.0,
    0.538_469_310_105_683_1,
    0.906_179_845_938_664,
];
const GL5_W: [f64; 5] = [
    0.236_926_885_056_189_1,
    0.478_628_670_499_366_5,
    0.568_888_888_888_888_9,
    0.478_628_670_499_366_5,
    0.236_926_885_056_189_1,
];

/// Five-point Gauss–Legendre rule on `[a, b]`.
fn gl5<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> f64 {
    let c = 0.5 * (a + b);
    let r = 0.5 * (b - a);
    r * GL5_X.iter().zip(GL5_W).map(|(x, w)| w * f(c + r * x)).sum::<f64>()
}

fn ref_pdf(x: f64) -> f64 {
    (-0.5 * x * x).exp() / (2.0 * std::f64::consts::PI).sqrt()
}

struct RefNormal {
    lo: f64,
    h: f64,
    sf: Vec<f64>,
}

fn ref_normal() -> &'static RefNormal {
    static TABLE: OnceLock<RefNormal> = OnceLock::new();
    TABLE.get_or_init(|| {
        let (lo, hi, per_unit) = (-14.0, 14.0, 512usize);
        let n = ((hi - lo) * per_unit as f64) as usize;
        let h = (hi - lo) / n as f64;
        let mut sf = vec![0.0; n + 1];
        for k in (0..n).rev() {
            let a = lo + k as f64 * h;
            sf[k] = sf[k + 1] + gl5(&ref_pdf, a, a + h);
        }
        RefNormal { lo, h, sf }
    })
}

/// Upper tail `P(Z > x)` of the standard normal by tabulated quadrature.
pub fn reference_sf(x: f64) -> f64 {
    let t = ref_normal();
    let pos = (x - t.lo) / t.h;
    if pos <= 0.0 {
        return 1.0;
    }
    let k = pos.floor() as usize;
    if k + 1 >= t.sf.len() {
        return 0.0;
    }
    let a = t.lo + k as f64 * t.h;
    t.sf[k] - gl5(&ref_pdf, a, x)
}

pub fn reference_cdf(x: f64) -> f64 {
    1.0 - reference_sf(x)
}

/// Unnormalised density tabulated on `[lo, hi]` with cumulative masses, used
/// for exact inverse-CDF sampling and for the KS reference CDF.
#[derive(Clone, Debug)]
pub struct Tabulated {
    lo: f64,
    h: f64,
    cum: Vec<f64>,
    mass: f64,
}

impl Tabulated {
    pub fn new<F: Fn(f64) -> f64>(f: F, lo: f64, hi: f64, intervals: usize) -> Self {
        assert!(hi > lo && intervals > 0);
        let h = (hi - lo) / intervals as f64;
        let mut cum = Vec::with_capacity(intervals + 1);
        cum.push(0.0);
        let mut acc = 0.0;
        for k in 0..intervals {
            let a = lo + k as f64 * h;
            acc += gl5(&f, a, a + h);
            cum.push(acc);
        }
        for c in &mut cum {
            *c /= acc;
        }
        Self { lo, h, cum, mass: acc }
    }

    /// Total unnormalised mass.
    pub fn mass(&self) -> f64 {
        self.mass
    }

    pub fn cdf(&self, x: f64) -> f64 {
        let pos = (x - self.lo) / self.h;
        if pos <= 0.0 {
            return 0.0;
        }
        let k = pos.floor() as usize;
        if k + 1 >= self.cum.len() {
            return 1.0;
        }
        let w = pos - k as f64;
        self.cum[k] + w * (self.cum[k + 1] - self.cum[k])
    }

    pub fn quantile(&self, p: f64) -> f64 {
        let k = self.cum.partition_point(|&c| c < p).clamp(1, self.cum.len() - 1);
        let (c0, c1) = (self.cum[k - 1], self.cum[k]);
        let w = if c1 > c0 { (p - c0) / (c1 - c0) } else { 0.5 };
        self.lo + (k as f64 - 1.0 + w) * self.h
    }

    pub fn sample<R: Rng + ?Sized>(&self, rng: &mut R) -> f64 {
        self.quantile(rng.random::<f64>())
    }
}

// ---------------------------------------------------------------------------
// test statistics

/// One-sample Kolmogorov–Smirnov distance; sorts `sample` in place.
pub fn ks_statistic<F: Fn(f64) -> f64>(sample: &mut [f64], cdf: F) -> f64 {
    sample.sort_by(f64::total_cmp);
    let n = sample.len() as f64;
    sample
        .iter()
        .enumerate()
        .map(|(i, &x)| {
            let f = cdf(x);
            ((i + 1) as f64 / n - f).max(f - i as f64 / n)
        })
        .fold(0.0, f64::max)
}

/// `P(K > λ)` for the Kolmogorov distribution.
pub fn kolmogorov_sf(lambda: f64) -> f64 {
    if lambda < 0.2 {
        return 1.0;
    }
    let mut sum = 0.0;
    for k in 1..=100 {
        let kf = k as f64;
        let term = (-2.0 * kf * kf * lambda * lambda).exp();
        sum += if k % 2 == 1 { term } else { -term };
        if term < 1e-16 {
            break;
        }
    }
    (2.0 * sum).clamp(0.0, 1.0)
}

/// Asymptotic p-value with Stephens' small-sample correction.
pub fn ks_pvalue(d: f64, n: usize) -> f64 {
    let en = (n as f64).sqrt();
    kolmogorov_sf((en + 0.12 + 0.11 / en) * d)
}

/// Pearson chi-square statistic and p-value for counts against cell
/// probabilities (cells with zero probability must be empty).
pub fn chi_square_test(observed: &[usize], probs: &[f64]) -> (f64, f64) {
    let n: usize = observed.iter().sum();
    let mut stat = 0.0;
    let mut cells = 0;
    for (&o, &p) in observed.iter().zip(probs) {
        let e = p * n as f64;
        if e > 0.0 {
            stat += (o as f64 - e).powi(2) / e;
            cells += 1;
        } else if o > 0 {
            return (f64::INFINITY, 0.0);
        }
    }
    let df = (cells.max(2) - 1) as f64;
    let p = 1.0 - ChiSquared::new(df).expect("positive degrees of freedom").cdf(stat);
    (stat, p)
}

// ---------------------------------------------------------------------------
// single-kernel invariance

#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum KernelId {
    /// Missed presence, Metropolis–Hastings on `φ(z − μ)(1 − Φ(z))`.
    MissedPresence,
    PotentialAbsence,
    TransformedPresence,
    /// Case selection at a zero site (chi-square over the three cases).
    ZeroMixture,
    /// `z_O` at a positive site.
    ObservedLatent,
    /// `z_P | z_O` at a positive site.
    PositivePotential,
    Alpha1,
    Alpha2,
    ThetaSampled,
    ThetaUnsampled,
    /// Single-coefficient conjugate update.
    Beta,
}

impl KernelId {
    pub const ALL: [KernelId; 11] = [
        KernelId::MissedPresence,
        KernelId::PotentialAbsence,
        KernelId::TransformedPresence,
        KernelId::ZeroMixture,
        KernelId::ObservedLatent,
        KernelId::PositivePotential,
        KernelId::Alpha1,
        KernelId::Alpha2,
        KernelId::ThetaSampled,
        KernelId::ThetaUnsampled,
        KernelId::Beta,
    ];

    pub fn name(&self) -> &'static str {
        match self {
            KernelId::MissedPresence => "missed_presence",
            KernelId::PotentialAbsence => "potential_absence",
            KernelId::TransformedPresence => "transformed_presence",
            KernelId::ZeroMixture => "zero_mixture",
            KernelId::ObservedLatent => "observed_latent",
            KernelId::PositivePotential => "positive_potential",
            KernelId::Alpha1 => "alpha1",
            KernelId::Alpha2 => "alpha2",
            KernelId::ThetaSampled => "theta_sampled",
            KernelId::ThetaUnsampled => "theta_unsampled",
            KernelId::Beta => "beta",
        }
    }
}

/// Significance level of every oracle test.
pub const P_THRESHOLD: f64 = 0.01;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct KernelCheck {
    pub kernel: KernelId,
    pub seed: u64,
    pub n: usize,
    /// KS distance, or the chi-square statistic for [`KernelId::ZeroMixture`].
    pub statistic: f64,
    pub p_value: f64,
}

impl KernelCheck {
    pub fn passed(&self) -> bool {
        self.p_value > P_THRESHOLD
    }
}

const TAB: usize = 8000;

fn gaussian_tab(mean: f64, sd: f64, lo: f64, hi: f64) -> Tabulated {
    let lo = lo.max(mean - 12.0 * sd);
    let hi = hi.min(mean + 12.0 * sd);
    Tabulated::new(|z| ref_pdf((z - mean) / sd), lo, hi, TAB)
}

fn ks_check<F: Fn(f64) -> f64>(kernel: KernelId, seed: u64, mut out: Vec<f64>, cdf: F) -> KernelCheck {
    let n = out.len();
    let d = ks_statistic(&mut out, cdf);
    KernelCheck { kernel, seed, n, statistic: d, p_value: ks_pvalue(d, n) }
}

/// Draws `n` states from the kernel's exact conditional, applies the kernel
/// once to each and tests the output against the same conditional.
pub fn kernel_invariance_test(kernel: KernelId, n: usize, seed: u64, fault: Option<Fault>) -> Result<KernelCheck> {
    let mut rng = RngStream::keyed(seed, StreamDomain::Oracle, kernel as u64, 0).rng();
    let mu = 0.4;
    match kernel {
        KernelId::MissedPresence => {
            let target = Tabulated::new(|z| ref_pdf(z - mu) * reference_sf(z), 0.0, mu + 12.0, TAB);
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let z0 = target.sample(&mut rng);
                out.push(mh_case1_step(z0, mu, &mut rng)?.0);
            }
            Ok(ks_check(kernel, seed, out, |x| target.cdf(x)))
        }
        KernelId::PotentialAbsence | KernelId::TransformedPresence => {
            let (case, lo, hi) = if kernel == KernelId::PotentialAbsence {
                (ZeroCase::Absent, f64::NEG_INFINITY, 0.0)
            } else {
                (ZeroCase::Transformed, 0.0, f64::INFINITY)
            };
            let target = gaussian_tab(mu, 1.0, lo, hi);
            let out = (0..n)
                .map(|_| case_latent_draw(case, mu, fault, &mut rng))
                .collect::<Result<Vec<_>>>()?;
            Ok(ks_check(kernel, seed, out, |x| target.cdf(x)))
        }
        KernelId::ZeroMixture => zero_mixture_test(0.6, mu, n, seed, fault),
        KernelId::ObservedLatent => {
            let alpha = CutPoints::new(1.0, 2.0)?;
            let z_p = 1.3;
            let target = gaussian_tab(z_p, 1.0, 1.0, 2.0);
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let (z_o, _) = update_site_positive(2, z_p, mu, &alpha, PositiveKernel::Exact, fault, &mut rng)?;
                out.push(z_o);
            }
            Ok(ks_check(kernel, seed, out, |x| target.cdf(x)))
        }
        KernelId::PositivePotential => positive_potential_test(PositiveKernel::Exact, n, seed, fault),
        KernelId::Alpha1 | KernelId::Alpha2 => {
            let mut ext = ClassExtremes::default();
            for (y, z) in [(1, 0.2), (1, 0.5), (2, 0.9), (2, 1.4), (3, 2.3)] {
                ext.push(y, z);
            }
            let current = CutPoints::new(0.7, 1.8)?;
            let (lo, hi) = if kernel == KernelId::Alpha1 { (0.5, 0.9) } else { (1.4, 2.3) };
            let mut out = Vec::with_capacity(n);
            for _ in 0..n {
                let (a, _) = update_alpha(&ext, &current, 20.0, &mut rng)?;
                out.push(if kernel == KernelId::Alpha1 { a.a1 } else { a.a2 });
            }
            Ok(ks_check(kernel, seed, out, |x| ((x - lo) / (hi - lo)).clamp(0.0, 1.0)))
        }
        KernelId::ThetaSampled | KernelId::ThetaUnsampled => theta_test(kernel, n, seed, fault),
        KernelId::Beta => beta_test(n, seed, fault),
    }
}

/// `z_P | z_O` against `N((z_O + μ)/2, 1/2)` restricted to `z_P > 0`.
pub fn positive_potential_test(
    positive: PositiveKernel,
    n: usize,
    seed: u64,
    fault: Option<Fault>,
) -> Result<KernelCheck> {
    let kernel = KernelId::PositivePotential;
    let mut rng = RngStream::keyed(seed, StreamDomain::Oracle, kernel as u64, 1).rng();
    let (z_o, mu) = (0.8, -0.5);
    let target = gaussian_tab(0.5 * (z_o + mu), 0.5f64.sqrt(), 0.0, f64::INFINITY);
    let out = (0..n)
        .map(|_| potential_given_observed(z_o, mu, positive, fault, &mut rng))
        .collect::<Result<Vec<_>>>()?;
    Ok(ks_check(kernel, seed, out, |x| target.cdf(x)))
}

/// Zero-site update from an exact draw of `(case, z_P)`: chi-square of the
/// resulting case frequencies against the exact case probabilities.
pub fn zero_mixture_test(u: f64, mu: f64, n: usize, seed: u64, fault: Option<Fault>) -> Result<KernelCheck> {
    zero_mixture_test_with(u, mu, n, seed, fault, ZeroKernel::Joint)
}

pub fn zero_mixture_test_with(
    u: f64,
    mu: f64,
    n: usize,
    seed: u64,
    fault: Option<Fault>,
    kernel: ZeroKernel,
) -> Result<KernelCheck> {
    let mut rng = RngStream::keyed(seed, StreamDomain::Oracle, KernelId::ZeroMixture as u64, 0).rng();
    let missed = Tabulated::new(|z| ref_pdf(z - mu) * reference_sf(z), 0.0, mu + 12.0, TAB);
    let absent = gaussian_tab(mu, 1.0, f64::NEG_INFINITY, 0.0);
    let present = gaussian_tab(mu, 1.0, 0.0, f64::INFINITY);
    let raw = [u * missed.mass(), absent.mass(), (1.0 - u) * present.mass()];
    let total: f64 = raw.iter().sum();
    let probs: Vec<f64> = raw.iter().map(|w| w / total).collect();
    let weights = zero_weights_with_fault(u, mu, fault);
    let mut counts = [0usize; 3];
    for _ in 0..n {
        let r: f64 = rng.random();
        let (case, z) = if r < probs[0] {
            (ZeroCase::Missed, missed.sample(&mut rng))
        } else if r < probs[0] + probs[1] {
            (ZeroCase::Absent, absent.sample(&mut rng))
        } else {
            (ZeroCase::Transformed, present.sample(&mut rng))
        };
        let upd = update_site_zero(&weights, mu, Some((case, z)), kernel, fault, &mut rng)?;
        counts[upd.case as usize] += 1;
    }
    let (stat, p) = chi_square_test(&counts, &probs);
    Ok(KernelCheck { kernel: KernelId::ZeroMixture, seed, n, statistic: stat, p_value: p })
}

fn theta_test(kernel: KernelId, n: usize, seed: u64, fault: Option<Fault>) -> Result<KernelCheck> {
    let grid = CellGrid::rectangular(3, 3);
    let adj = build_adjacency(&grid, 1.5)?;
    let eta2 = 0.1;
    let theta: Vec<f64> = vec![0.3, -0.2, 0.1, 0.05, 0.0, -0.4, 0.25, 0.15, -0.1];
    let (cell, sites, resid) = if kernel == KernelId::ThetaSampled { (4, 2usize, 1.3) } else { (0, 0, 0.0) };
    let mut site_count = vec![0usize; 9];
    site_count[cell] = sites;
    let mut resid_sum = vec![0.0; 9];
    resid_sum[cell] = resid;
    // conditional worked out from the joint density directly
    let nbrs: Vec<usize> = (0..9)
        .filter(|&j| {
            let [a, b] = grid.coord(j);
            let [c, d] = grid.coord(cell);
            j != cell && (a - c).abs() <= 1.0 && (b - d).abs() <= 1.0
        })
        .collect();
    let precision = sites as f64 + nbrs.len() as f64 / eta2;
    let mean = (resid + nbrs.iter().map(|&j| theta[j]).sum::<f64>() / eta2) / precision;
    let sd = precision.recip().sqrt();
    let target = gaussian_tab(mean, sd, f64::NEG_INFINITY, f64::INFINITY);
    let out = (0..n)
        .map(|k| {
            ThetaInputs {
                adj: &adj,
                resid_sum: &resid_sum,
                site_count: &site_count,
                car_scale: eta2,
                seed: seed ^ 0x7e7a,
                sweep: k as u64,
                drop_last_neighbor: fault == Some(Fault::OffByOneNeighborSum),
            }
            .update_cell(&theta, cell)
        })
        .collect();
    Ok(ks_check(kernel, seed, out, |x| target.cdf(x)))
}

fn beta_test(n: usize, seed: u64, fault: Option<Fault>) -> Result<KernelCheck> {
    let v = [0.8, -1.1, 0.3];
    let cells: Vec<CellRecord> = v
        .iter()
        .enumerate()
        .map(|(k, &x)| CellRecord { id: k as u64, x: k as f64, y: 0.0, u: 1.0, covariates: vec![x] })
        .collect();
    let sites: Vec<SiteRecord> = [0u64, 0, 1, 2, 2, 2]
        .iter()
        .map(|&c| SiteRecord { cell_id: c, y: 0 })
        .collect();
    let data = Dataset::new(cells, &sites, vec!["v".into()], 1.5, false)?;
    let hyper = HyperParams { prior_var_beta: 2.0, car_scale: 0.1 };
    let z_p = [0.5, -0.3, -1.2, 0.4, 0.1, 0.9];
    let theta = [0.1, -0.2, 0.1];
    // dataset order equals input order here (every cell is sampled)
    let mut precision = 1.0 / hyper.prior_var_beta;
    let mut score = 0.0;
    for (s, &c) in [0usize, 0, 1, 2, 2, 2].iter().enumerate() {
        precision += v[c] * v[c];
        score += v[c] * (z_p[s] - theta[c]);
    }
    let target = gaussian_tab(score / precision, precision.recip().sqrt(), f64::NEG_INFINITY, f64::INFINITY);
    let kernel = BetaKernel::new(&data, &hyper, fault)?;
    let mut rng = RngStream::keyed(seed, StreamDomain::Oracle, KernelId::Beta as u64, 0).rng();
    let out = (0..n).map(|_| kernel.draw(&data, &z_p, &theta, &mut rng)[0]).collect();
    Ok(ks_check(KernelId::Beta, seed, out, |x| target.cdf(x)))
}

// ---------------------------------------------------------------------------
// tiny exact posterior

/// One cell with one site, `θ = 0`, fixed cut points and a scalar
/// coefficient with prior `N(0, prior_var)`.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct TinyModel {
    pub alpha: CutPoints,
    pub v: f64,
    pub prior_var: f64,
    pub u: f64,
}

impl TinyModel {
    /// `P(y | z_P)` for the three-stage observation model.
    pub fn likelihood(&self, y: u8, z: f64) -> f64 {
        if y == 0 {
            (1.0 - self.u) + self.u * if z <= 0.0 { 1.0 } else { reference_sf(z) }
        } else if z <= 0.0 {
            0.0
        } else {
            let (lo, hi) = self.alpha.interval(y);
            let upper = if hi.is_finite() { reference_sf(hi - z) } else { 0.0 };
            self.u * (reference_sf(lo - z) - upper)
        }
    }
}

/// Gridded posterior of `(β, z_P)`.
#[derive(Clone, Debug)]
pub struct TinyPosterior {
    pub beta: Vec<f64>,
    /// Offsets `t = z_P − βv`; the `(i, j)` cell is at `z_P = beta[i]·v + t[j]`.
    pub t: Vec<f64>,
    /// Joint cell masses, row-major over `(β, t)`, summing to 1.
    pub joint: Vec<f64>,
    /// Normalised marginal density of `β` at `beta`.
    pub marginal: Vec<f64>,
    step: f64,
}

impl TinyPosterior {
    /// Marginal CDF of `β` (trapezoid on the grid).
    pub fn cdf(&self, x: f64) -> f64 {
        let h = self.step;
        let lo = self.beta[0] - 0.5 * h;
        let pos = (x - lo) / h;
        if pos <= 0.0 {
            return 0.0;
        }
        let k = pos.floor() as usize;
        if k >= self.beta.len() {
            return 1.0;
        }
        let below: f64 = self.marginal[..k].iter().sum::<f64>() * h;
        below + (pos - k as f64) * self.marginal[k] * h
    }
}

fn tiny_marginal(tm: &TinyModel, y: u8, beta: f64) -> f64 {
    let mu = beta * tm.v;
    let f = |t: f64| ref_pdf(t) * tm.likelihood(y, mu + t);
    // split where the likelihood has a kink or jump (z_P = 0)
    let mut total = 0.0;
    let (a, b) = (-10.0, 10.0);
    let cut = (-mu).clamp(a, b);
    for (lo, hi) in [(a, cut), (cut, b)] {
        let panels = 200;
        let h = (hi - lo) / panels as f64;
        if h <= 0.0 {
            continue;
        }
        for k in 0..panels {
            let x = lo + k as f64 * h;
            total += gl5(&f, x, x + h);
        }
    }
    ref_pdf(beta / tm.prior_var.sqrt()) / tm.prior_var.sqrt() * total
}

/// Exact posterior on an `n × n` grid; `β` spans ±8 prior standard
/// deviations and `t` spans ±8.
pub fn exact_tiny_posterior(tm: &TinyModel, y: u8, n: usize) -> Result<TinyPosterior> {
    if y as usize >= crate::model::CATEGORIES {
        return Err(Error::InvalidInput(format!("category {y} outside 0..=3")));
    }
    if y > 0 && tm.u == 0.0 {
        return Err(Error::InvalidInput(format!(
            "y = {y} is impossible when u = 0: transformed land always yields y = 0"
        )));
    }
    let sd = tm.prior_var.sqrt();
    let h = 16.0 * sd / n as f64;
    let beta: Vec<f64> = (0..n).map(|i| -8.0 * sd + (i as f64 + 0.5) * h).collect();
    let ht = 16.0 / n as f64;
    let t: Vec<f64> = (0..n).map(|j| -8.0 + (j as f64 + 0.5) * ht).collect();
    let mut joint = Vec::with_capacity(n * n);
    for &b in &beta {
        let prior = ref_pdf(b / sd) / sd;
        for &tj in &t {
            joint.push(prior * ref_pdf(tj) * tm.likelihood(y, b * tm.v + tj) * h * ht);
        }
    }
    let total: f64 = joint.iter().sum();
    if !(total > 0.0) {
        return Err(Error::Numeric("tiny posterior has no mass on the grid".into()));
    }
    for m in &mut joint {
        *m /= total;
    }
    let mut marginal: Vec<f64> = beta.iter().map(|&b| tiny_marginal(tm, y, b)).collect();
    let z: f64 = marginal.iter().sum::<f64>() * h;
    for m in &mut marginal {
        *m /= z;
    }
    Ok(TinyPosterior { beta, t, joint, marginal, step: h })
}

/// Largest gap between the marginal CDFs at resolutions `n` and `2n`.
pub fn richardson_gap(tm: &TinyModel, y: u8, n: usize) -> Result<f64> {
    let coarse = exact_tiny_posterior(tm, y, n)?;
    let fine = exact_tiny_posterior(tm, y, 2 * n)?;
    Ok(coarse
        .beta
        .iter()
        .map(|&b| (coarse.cdf(b) - fine.cdf(b)).abs())
        .fold(0.0, f64::max))
}

/// Retained `β` draws of the Gibbs sampler on the tiny model.
pub fn tiny_gibbs_chain(
    tm: &TinyModel,
    y: u8,
    draws: usize,
    thin: usize,
    seed: u64,
    options: &SamplerOptions,
) -> Result<Vec<f64>> {
    let cells = vec![
        CellRecord { id: 0, x: 0.0, y: 0.0, u: tm.u, covariates: vec![tm.v] },
        CellRecord { id: 1, x: 1.0, y: 0.0, u: 1.0, covariates: vec![0.0] },
    ];
    let data = Dataset::new(cells, &[SiteRecord { cell_id: 0, y }], vec!["v".into()], 1.5, false)?;
    let hyper = HyperParams { prior_var_beta: tm.prior_var, car_scale: 0.1 };
    let beta_kernel = BetaKernel::new(&data, &hyper, options.fault)?;
    let theta = [0.0, 0.0];
    let mut beta = 0.0;
    let (mut z_p, mut latent) = if y > 0 {
        let (lo, hi) = tm.alpha.interval(y);
        let z = if hi.is_finite() { 0.5 * (lo + hi) } else { lo + 1.0 };
        (z, SiteLatent::Observed { z_o: z })
    } else {
        (-0.5, SiteLatent::Zero(ZeroCase::Absent))
    };
    let mut out = Vec::with_capacity(draws);
    let burn = 100 * thin;
    for sweep in 0..(burn + draws * thin) as u64 {
        let mut rng = RngStream::keyed(seed, StreamDomain::Oracle, 0, sweep).rng();
        let mu = beta * tm.v;
        match latent {
            SiteLatent::Observed { .. } => {
                let (z_o, z) =
                    update_site_positive(y, z_p, mu, &tm.alpha, options.positive_kernel, options.fault, &mut rng)?;
                z_p = z;
                latent = SiteLatent::Observed { z_o };
            }
            SiteLatent::Zero(case) => {
                let w = zero_weights_with_fault(tm.u, mu, options.fault);
                let upd = update_site_zero(&w, mu, Some((case, z_p)), options.zero_kernel, options.fault, &mut rng)?;
                z_p = upd.z_p;
                latent = SiteLatent::Zero(upd.case);
            }
        }
        beta = beta_kernel.draw(&data, &[z_p], &theta, &mut rng)[0];
        if sweep as usize >= burn && (sweep as usize - burn) % thin == thin - 1 {
            out.push(beta);
        }
    }
    Ok(out)
}

/// Chi-square comparison of chain draws with the exact marginal over
/// `bins` equiprobable bins.
pub fn tiny_posterior_check(post: &TinyPosterior, draws: &[f64], bins: usize) -> (f64, f64) {
    let mut counts = vec![0usize; bins];
    for &d in draws {
        let b = ((post.cdf(d) * bins as f64) as usize).min(bins - 1);
        counts[b] += 1;
    }
    chi_square_test(&counts, &vec![1.0 / bins as f64; bins])
}

// ---------------------------------------------------------------------------
// joint-distribution test

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(default)]
pub struct JointTestConfig {
    pub nx: usize,
    pub ny: usize,
    pub sites_per_cell: usize,
    pub n_covariates: usize,
    pub prior_var_beta: f64,
    pub car_scale: f64,
    /// Upper end of the uniform prior on `0 < α₁ < α₂ < cap`.
    pub alpha_cap: f64,
    /// Independent forward draws in the marginal-conditional arm.
    pub forward_draws: usize,
    /// Iterations of the successive-conditional arm.
    pub chain_length: usize,
    /// Posterior sweeps between data regenerations (0 = forward draws in
    /// both arms).
    pub sweeps_per_step: usize,
    pub batches: usize,
    pub seed: u64,
    pub zero_kernel: ZeroKernel,
    pub positive_kernel: PositiveKernel,
}

impl Default for JointTestConfig {
    fn default() -> Self {
        Self {
            nx: 5,
            ny: 5,
            sites_per_cell: 3,
            n_covariates: 2,
            prior_var_beta: 1.0,
            car_scale: 0.1,
            alpha_cap: 4.0,
            forward_draws: 100_000,
            chain_length: 200_000,
            sweeps_per_step: 1,
            batches: 100,
            seed: 1,
            zero_kernel: ZeroKernel::Joint,
            positive_kernel: PositiveKernel::Exact,
        }
    }
}

/// Threshold on the absolute z-score of every tracked moment.
pub const Z_THRESHOLD: f64 = 4.0;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct JointStat {
    pub name: String,
    /// 1 for the mean, 2 for the raw second moment.
    pub moment: u8,
    pub forward: f64,
    pub chain: f64,
    pub z: f64,
}

impl JointStat {
    pub fn passed(&self) -> bool {
        self.z.abs() < Z_THRESHOLD
    }
}

struct JointSetup {
    data: Dataset,
    prior: IcarPrior,
    tracked_cells: [usize; 3],
}

fn joint_setup(cfg: &JointTestConfig) -> Result<JointSetup> {
    let sim = SimConfig {
        nx: cfg.nx,
        ny: cfg.ny,
        beta: vec![0.0; cfg.n_covariates],
        car_scale: cfg.car_scale,
        u: UField::Smooth { lo: 0.4, hi: 1.0 },
        sites: SiteCount::Fixed { per_cell: cfg.sites_per_cell },
        seed: cfg.seed,
        ..SimConfig::default()
    };
    let out = crate::sim::simulate_dataset(&sim)?;
    let data = out.dataset(sim.threshold)?;
    let prior = IcarPrior::new(data.adjacency(), cfg.car_scale, sim.car_gibbs_sweeps)?;
    let n = data.n_cells();
    Ok(JointSetup { data, prior, tracked_cells: [0, n / 2, n - 1] })
}

fn prior_draw(cfg: &JointTestConfig, setup: &JointSetup, key: u64, arm: u64) -> ParameterState {
    let mut rng = RngStream::keyed(cfg.seed, StreamDomain::Oracle, key, arm).rng();
    let (mut a, mut b) = (0.0, 0.0);
    while !(a > 0.0 && b > a && b < cfg.alpha_cap) {
        let x = rng.random::<f64>() * cfg.alpha_cap;
        let y = rng.random::<f64>() * cfg.alpha_cap;
        (a, b) = (x.min(y), x.max(y));
    }
    let sd = cfg.prior_var_beta.sqrt();
    ParameterState {
        alpha: CutPoints { a1: a, a2: b },
        beta: (0..setup.data.n_covariates()).map(|_| sd * standard_normal(&mut rng)).collect(),
        theta: setup.prior.draw(cfg.seed ^ arm.rotate_left(17), key),
    }
}

fn tracked(setup: &JointSetup, state: &ChainState) -> Vec<f64> {
    let p = &state.params;
    let mut v = vec![p.alpha.a1, p.alpha.a2];
    v.extend(p.beta.iter().copied());
    v.extend(setup.tracked_cells.iter().map(|&c| p.theta[c]));
    let z = &state.latents.z_p;
    v.push(z.iter().sum::<f64>() / z.len().max(1) as f64);
    v
}

fn tracked_names(setup: &JointSetup) -> Vec<String> {
    let mut names = vec!["alpha1".to_string(), "alpha2".to_string()];
    names.extend((1..=setup.data.n_covariates()).map(|k| format!("beta{k}")));
    names.extend(setup.tracked_cells.iter().map(|&c| format!("theta_{}", setup.data.cell_label(c))));
    names.push("mean_z_p".into());
    names
}

/// Compares the prior-predictive joint distribution of parameters and
/// latents with the output of a chain that alternates data regeneration and
/// posterior sweeps. A correct sampler leaves that joint invariant.
pub fn joint_distribution_test(cfg: &JointTestConfig, fault: Option<Fault>) -> Result<Vec<JointStat>> {
    let setup = joint_setup(cfg)?;
    let names = tracked_names(&setup);
    let k = names.len();
    let data = &setup.data;

    // marginal-conditional arm
    let mut fwd_sum = vec![[0.0f64; 2]; k];
    let mut fwd_sq = vec![[0.0f64; 2]; k];
    for it in 0..cfg.forward_draws as u64 {
        let params = prior_draw(cfg, &setup, it, 1);
        let (_, state) = simulate_observations(data, &params, cfg.seed ^ 0xf0f0, it);
        for (j, x) in tracked(&setup, &state).into_iter().enumerate() {
            for (m, g) in [x, x * x].into_iter().enumerate() {
                fwd_sum[j][m] += g;
                fwd_sq[j][m] += g * g;
            }
        }
    }

    // successive-conditional arm
    let options = SamplerOptions {
        alpha_cap: cfg.alpha_cap,
        positive_kernel: cfg.positive_kernel,
        zero_kernel: cfg.zero_kernel,
        check_every: 0,
        fault,
    };
    let hyper = HyperParams { prior_var_beta: cfg.prior_var_beta, car_scale: cfg.car_scale };
    let sampler = Sampler::new(data, hyper, options, ThetaSchedule::sequential(data.adjacency()), cfg.seed ^ 0x5c5c)?;
    let mut params = prior_draw(cfg, &setup, 0, 2);
    let batch_len = (cfg.chain_length / cfg.batches).max(1);
    let n_chain = batch_len * cfg.batches;
    let mut batch_means = vec![[Vec::with_capacity(cfg.batches), Vec::with_capacity(cfg.batches)]; k];
    let mut acc = vec![[0.0f64; 2]; k];
    let mut sweep = 0u64;
    for it in 0..n_chain as u64 {
        let (y, mut state) = simulate_observations(data, &params, cfg.seed ^ 0x0f0f, it);
        if cfg.sweeps_per_step == 0 {
            params = prior_draw(cfg, &setup, it + 1, 2);
            let (_, fresh) = simulate_observations(data, &params, cfg.seed ^ 0x0f0f, it + n_chain as u64);
            state = fresh;
        } else {
            let observed = data.with_observations(y)?;
            for _ in 0..cfg.sweeps_per_step {
                sweep += 1;
                sampler.sweep(&observed, &mut state, sweep)?;
            }
            params = state.params.clone();
        }
        for (j, x) in tracked(&setup, &state).into_iter().enumerate() {
            acc[j][0] += x;
            acc[j][1] += x * x;
        }
        if (it as usize + 1).is_multiple_of(batch_len) {
            for j in 0..k {
                for m in 0..2 {
                    batch_means[j][m].push(acc[j][m] / batch_len as f64);
                    acc[j][m] = 0.0;
                }
            }
        }
    }

    let nf = cfg.forward_draws as f64;
    let nb = cfg.batches as f64;
    let mut out = Vec::with_capacity(2 * k);
    for j in 0..k {
        for m in 0..2 {
            let f_mean = fwd_sum[j][m] / nf;
            let f_var = (fwd_sq[j][m] / nf - f_mean * f_mean).max(0.0) * nf / (nf - 1.0);
            let bm = &batch_means[j][m];
            let c_mean = bm.iter().sum::<f64>() / nb;
            let c_var = bm.iter().map(|b| (b - c_mean).powi(2)).sum::<f64>() / (nb - 1.0);
            let se = (f_var / nf + c_var / nb).sqrt();
            let z = if se > 0.0 { (f_mean - c_mean) / se } else { 0.0 };
            out.push(JointStat { name: names[j].clone(), moment: m as u8 + 1, forward: f_mean, chain: c_mean, z });
        }
    }
    Ok(out)
}

// ---------------------------------------------------------------------------
// reporting and fault detection

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ReportRow {
    pub check: String,
    pub statistic: f64,
    pub threshold: f64,
    pub passed: bool,
}

impl From<&KernelCheck> for ReportRow {
    fn from(c: &KernelCheck) -> Self {
        Self {
            check: format!("kernel_{}_seed{}", c.kernel.name(), c.seed),
            statistic: c.p_value,
            threshold: P_THRESHOLD,
            passed: c.passed(),
        }
    }
}

impl From<&JointStat> for ReportRow {
    fn from(s: &JointStat) -> Self {
        Self {
            check: format!("joint_{}_m{}", s.name, s.moment),
            statistic: s.z,
            threshold: Z_THRESHOLD,
            passed: s.passed(),
        }
    }
}

/// Seeds used by every statistical oracle.
pub const ORACLE_SEEDS: [u64; 3] = [1, 2, 3];

/// Kernel-invariance checks over all kernels and [`ORACLE_SEEDS`].
pub fn kernel_suite(n: usize, fault: Option<Fault>) -> Result<Vec<KernelCheck>> {
    let mut out = Vec::new();
    for kernel in KernelId::ALL {
        for seed in ORACLE_SEEDS {
            out.push(kernel_invariance_test(kernel, n, seed, fault)?);
        }
    }
    Ok(out)
}

/// Which oracles flag an injected fault.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct FaultDetection {
    pub fault: Fault,
    pub failed_kernels: Vec<String>,
    pub failed_joint: Vec<String>,
}

impl FaultDetection {
    pub fn detected(&self) -> bool {
        !self.failed_kernels.is_empty() || !self.failed_joint.is_empty()
    }
}

/// Runs the kernel suite and the joint test with `fault` injected. A fault
/// counts as detected by the kernel suite when a kernel fails for every seed.
pub fn detect_fault(fault: Fault, kernel_n: usize, joint: &JointTestConfig) -> Result<FaultDetection> {
    let checks = kernel_suite(kernel_n, Some(fault))?;
    let failed_kernels = KernelId::ALL
        .iter()
        .filter(|k| checks.iter().filter(|c| c.kernel == **k).all(|c| !c.passed()))
        .map(|k| k.name().to_string())
        .collect();
    let failed_joint = match joint_distribution_test(joint, Some(fault)) {
        Ok(stats) => stats.iter().filter(|s| !s.passed()).map(|s| format!("{}_m{}", s.name, s.moment)).collect(),
        Err(e) => vec![format!("error: {e}")],
    };
    Ok(FaultDetection { fault, failed_kernels, failed_joint })
}

/// Fixed-seed reference for `orthant_prob`: `u·O(μ)` must match the tabulated
/// double integral.
pub fn orthant_reference(mu: f64) -> f64 {
    Tabulated::new(|z| ref_pdf(z - mu) * reference_sf(z), 0.0, mu.max(0.0) + 12.0, TAB).mass()
}

/// Zero-site weights recomputed from reference quadrature.
pub fn zero_weights_reference(u: f64, mu: f64) -> [f64; 3] {
    [u * orthant_reference(mu), reference_sf(mu), (1.0 - u) * reference_cdf(mu)]
}
