//! Posterior products computed from retained draws.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::model::{CutPoints, Dataset, ParameterState, CATEGORIES};
use crate::stats::left_tail_mean;

/// Class midpoints for absent, 1–10, 11–100 and >100 individuals.
pub const DEFAULT_MIDPOINTS: [f64; CATEGORIES] = [0.0, 5.0, 50.0, 150.0];

/// `p_h = Φ(α_h − μ) − Φ(α_{h−1} − μ)`.
pub fn category_probs(alpha: &CutPoints, mu: f64) -> [f64; CATEGORIES] {
    alpha.probs(mu)
}

/// `r = (1 − u + u p_0, u p_1, u p_2, u p_3)`.
pub fn transformed_probs(p: &[f64; CATEGORIES], u: f64) -> [f64; CATEGORIES] {
    [1.0 - u + u * p[0], u * p[1], u * p[2], u * p[3]]
}

pub fn grouped_mean(probs: &[f64; CATEGORIES], midpoints: &[f64; CATEGORIES]) -> f64 {
    probs.iter().zip(midpoints).map(|(p, m)| p * m).sum()
}

pub fn validate_midpoints(m: &[f64; CATEGORIES]) -> Result<()> {
    if m[0] != 0.0 || m.windows(2).any(|w| w[1] < w[0]) || m.iter().any(|v| !v.is_finite()) {
        return Err(Error::InvalidInput(format!(
            "midpoints must start at 0 and be nondecreasing, got {m:?}"
        )));
    }
    Ok(())
}

/// Equal-tail quantile by linear interpolation between order statistics.
pub fn quantile(sorted: &[f64], q: f64) -> f64 {
    assert!(!sorted.is_empty());
    let h = q * (sorted.len() - 1) as f64;
    let lo = h.floor() as usize;
    let hi = h.ceil() as usize;
    sorted[lo] + (h - lo as f64) * (sorted[hi] - sorted[lo])
}

/// Mean and 95% equal-tail interval.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
pub struct Interval {
    pub mean: f64,
    pub lo95: f64,
    pub hi95: f64,
}

impl Interval {
    pub fn from_draws(draws: &[f64]) -> Self {
        let mut s = draws.to_vec();
        s.sort_by(f64::total_cmp);
        Self {
            mean: draws.iter().sum::<f64>() / draws.len() as f64,
            lo95: quantile(&s, 0.025),
            hi95: quantile(&s, 0.975),
        }
    }

    pub fn width(&self) -> f64 {
        self.hi95 - self.lo95
    }

    pub fn excludes_zero(&self) -> bool {
        self.lo95 > 0.0 || self.hi95 < 0.0
    }
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CoefficientRow {
    pub name: String,
    pub mean: f64,
    pub width: f64,
    pub lo95: f64,
    pub hi95: f64,
    pub significant: bool,
}

/// Minimum retained draws for a coefficient table.
pub const MIN_TABLE_DRAWS: usize = 100;

/// Posterior mean, 95% interval width and significance per coefficient.
/// `draws[k]` is the chain of coefficient `k`.
pub fn coefficient_table(names: &[String], draws: &[Vec<f64>]) -> Result<Vec<CoefficientRow>> {
    if names.len() != draws.len() {
        return Err(Error::InvalidInput(format!("{} names for {} coefficient chains", names.len(), draws.len())));
    }
    names
        .iter()
        .zip(draws)
        .map(|(name, d)| {
            if d.len() < MIN_TABLE_DRAWS {
                return Err(Error::InvalidInput(format!(
                    "coefficient `{name}` has {} draws, at least {MIN_TABLE_DRAWS} needed",
                    d.len()
                )));
            }
            let iv = Interval::from_draws(d);
            Ok(CoefficientRow {
                name: name.clone(),
                mean: iv.mean,
                width: iv.width(),
                lo95: iv.lo95,
                hi95: iv.hi95,
                significant: iv.excludes_zero(),
            })
        })
        .collect()
}

/// Per-draw products at one cell.
#[derive(Clone, Copy, Debug, PartialEq)]
pub struct CellDraw {
    pub p: [f64; CATEGORIES],
    pub r: [f64; CATEGORIES],
    pub mean_potential: f64,
    pub mean_transformed: f64,
    pub z_p: f64,
    pub z_t: f64,
    pub theta: f64,
}

pub fn cell_draw(data: &Dataset, params: &ParameterState, cell: usize, midpoints: &[f64; CATEGORIES]) -> CellDraw {
    let mu = data.regression(cell, &params.beta) + params.theta[cell];
    let u = data.u(cell);
    let p = category_probs(&params.alpha, mu);
    let r = transformed_probs(&p, u);
    CellDraw {
        p,
        r,
        mean_potential: grouped_mean(&p, midpoints),
        mean_transformed: grouped_mean(&r, midpoints),
        z_p: mu,
        z_t: u * mu + (1.0 - u) * left_tail_mean(mu),
        theta: params.theta[cell],
    }
}

/// Posterior summaries at one cell.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct CellSummary {
    pub cell_id: u64,
    pub x: f64,
    pub y: f64,
    pub p: [Interval; CATEGORIES],
    pub r: [Interval; CATEGORIES],
    pub mean_potential: Interval,
    pub mean_transformed: Interval,
    pub z_p: Interval,
    pub z_t: Interval,
    pub theta: Interval,
}

/// A per-draw invariant that failed.
#[derive(Clone, Debug, PartialEq)]
pub struct Violation {
    pub draw: usize,
    pub cell_id: u64,
    pub what: &'static str,
    pub value: f64,
}

/// Checks the per-draw simplex and dominance properties.
pub fn check_draw(d: &CellDraw, u: f64) -> Option<(&'static str, f64)> {
    let ps: f64 = d.p.iter().sum();
    let rs: f64 = d.r.iter().sum();
    if (ps - 1.0).abs() > 1e-10 {
        return Some(("p sums to 1", ps));
    }
    if (rs - 1.0).abs() > 1e-10 {
        return Some(("r sums to 1", rs));
    }
    if d.r[0] < 1.0 - u - 1e-12 {
        return Some(("r0 >= 1 - u", d.r[0]));
    }
    if d.mean_transformed > d.mean_potential + 1e-9 {
        return Some(("grouped mean r <= p", d.mean_transformed - d.mean_potential));
    }
    if d.z_t > d.z_p {
        return Some(("z_T <= z_P", d.z_t - d.z_p));
    }
    None
}

/// Summaries for every cell (sampled or not) plus any per-draw violations.
pub fn summarize_cells(
    data: &Dataset,
    draws: &[ParameterState],
    midpoints: &[f64; CATEGORIES],
) -> Result<(Vec<CellSummary>, Vec<Violation>)> {
    validate_midpoints(midpoints)?;
    if draws.is_empty() {
        return Err(Error::InvalidInput("no retained draws".into()));
    }
    for (k, d) in draws.iter().enumerate() {
        if d.theta.len() != data.n_cells() || d.beta.len() != data.n_covariates() {
            return Err(Error::InvalidInput(format!(
                "draw {k} has {} effects and {} coefficients, dataset has {} cells and {} covariates",
                d.theta.len(),
                d.beta.len(),
                data.n_cells(),
                data.n_covariates()
            )));
        }
    }
    let n = draws.len();
    let mut violations = Vec::new();
    let mut out = Vec::with_capacity(data.n_cells());
    let mut cols: Vec<Vec<f64>> = (0..2 * CATEGORIES + 5).map(|_| Vec::with_capacity(n)).collect();
    for cell in 0..data.n_cells() {
        for c in cols.iter_mut() {
            c.clear();
        }
        let u = data.u(cell);
        for (k, params) in draws.iter().enumerate() {
            let d = cell_draw(data, params, cell, midpoints);
            if let Some((what, value)) = check_draw(&d, u) {
                violations.push(Violation { draw: k, cell_id: data.cell_label(cell), what, value });
            }
            for h in 0..CATEGORIES {
                cols[h].push(d.p[h]);
                cols[CATEGORIES + h].push(d.r[h]);
            }
            let base = 2 * CATEGORIES;
            cols[base].push(d.mean_potential);
            cols[base + 1].push(d.mean_transformed);
            cols[base + 2].push(d.z_p);
            cols[base + 3].push(d.z_t);
            cols[base + 4].push(d.theta);
        }
        let iv = |k: usize| Interval::from_draws(&cols[k]);
        let [x, y] = data.grid().coord(cell);
        let base = 2 * CATEGORIES;
        out.push(CellSummary {
            cell_id: data.cell_label(cell),
            x,
            y,
            p: std::array::from_fn(iv),
            r: std::array::from_fn(|h| iv(CATEGORIES + h)),
            mean_potential: iv(base),
            mean_transformed: iv(base + 1),
            z_p: iv(base + 2),
            z_t: iv(base + 3),
            theta: iv(base + 4),
        });
    }
    Ok((out, violations))
}

/// Named product maps, one interval per cell, for CSV export.
pub fn products(summaries: &[CellSummary]) -> Vec<(String, Vec<Interval>)> {
    let mut out = Vec::new();
    for h in 0..CATEGORIES {
        out.push((format!("p{h}"), summaries.iter().map(|s| s.p[h]).collect()));
    }
    for h in 0..CATEGORIES {
        out.push((format!("r{h}"), summaries.iter().map(|s| s.r[h]).collect()));
    }
    let pick = |f: fn(&CellSummary) -> Interval| summaries.iter().map(f).collect::<Vec<_>>();
    out.push(("mean_potential".into(), pick(|s| s.mean_potential)));
    out.push(("mean_transformed".into(), pick(|s| s.mean_transformed)));
    out.push(("z_p".into(), pick(|s| s.z_p)));
    out.push(("z_t".into(), pick(|s| s.z_t)));
    out.push(("theta".into(), pick(|s| s.theta)));
    out
}

/// Pearson correlation; `None` if either side is constant.
pub fn pearson(a: &[f64], b: &[f64]) -> Option<f64> {
    assert_eq!(a.len(), b.len());
    let n = a.len() as f64;
    let ma = a.iter().sum::<f64>() / n;
    let mb = b.iter().sum::<f64>() / n;
    let (mut sab, mut saa, mut sbb) = (0.0, 0.0, 0.0);
    for (x, y) in a.iter().zip(b) {
        sab += (x - ma) * (y - mb);
        saa += (x - ma).powi(2);
        sbb += (y - mb).powi(2);
    }
    (saa > 0.0 && sbb > 0.0).then(|| sab / (saa * sbb).sqrt())
}

/// Effective sample size by Geyer's initial monotone sequence estimator.
pub fn effective_sample_size(x: &[f64]) -> f64 {
    let n = x.len();
    if n < 4 {
        return n as f64;
    }
    let m = x.iter().sum::<f64>() / n as f64;
    let c: Vec<f64> = x.iter().map(|v| v - m).collect();
    let acov = |lag: usize| c[..n - lag].iter().zip(&c[lag..]).map(|(a, b)| a * b).sum::<f64>() / n as f64;
    let c0 = acov(0);
    if c0 <= 0.0 {
        return n as f64;
    }
    // Sum of adjacent-pair autocorrelations, truncated at the first
    // non-positive pair and forced to be non-increasing.
    let mut sum = 0.0;
    let mut prev = f64::INFINITY;
    let mut lag = 0;
    while lag + 1 < n {
        let pair = (acov(lag) + acov(lag + 1)) / c0;
        if pair <= 0.0 {
            break;
        }
        let pair = pair.min(prev);
        sum += pair;
        prev = pair;
        lag += 2;
    }
    let tau = 2.0 * sum - 1.0;
    n as f64 / tau.max(1.0 / n as f64)
}

/// Split-chain potential scale reduction of a single chain (halves compared).
pub fn split_rhat(x: &[f64]) -> f64 {
    let h = x.len() / 2;
    if h < 2 {
        return f64::NAN;
    }
    let halves = [&x[..h], &x[x.len() - h..]];
    let stats: Vec<(f64, f64)> = halves
        .iter()
        .map(|c| {
            let m = c.iter().sum::<f64>() / h as f64;
            (m, c.iter().map(|v| (v - m).powi(2)).sum::<f64>() / (h - 1) as f64)
        })
        .collect();
    let w = (stats[0].1 + stats[1].1) / 2.0;
    let grand = (stats[0].0 + stats[1].0) / 2.0;
    let b = h as f64 * stats.iter().map(|s| (s.0 - grand).powi(2)).sum::<f64>();
    let var = (h - 1) as f64 / h as f64 * w + b / h as f64;
    if w == 0.0 {
        return if b == 0.0 { 1.0 } else { f64::INFINITY };
    }
    (var / w).sqrt()
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::stats::{standard_normal, RngStream};

    fn close(a: &[f64], b: &[f64], tol: f64) -> bool {
        a.iter().zip(b).all(|(x, y)| (x - y).abs() < tol)
    }

    #[test]
    fn category_probs_at_zero() {
        let p = category_probs(&CutPoints::new(1.0, 2.0).unwrap(), 0.0);
        assert!(close(&p, &[0.5, 0.34134, 0.13591, 0.02275], 5e-6), "{p:?}");
        let p = category_probs(&CutPoints::new(1.0, 2.0).unwrap(), -40.0);
        assert_eq!(p, [1.0, 0.0, 0.0, 0.0]);
    }

    #[test]
    fn transformed_probs_examples() {
        let p = [0.5, 0.3, 0.15, 0.05];
        assert_eq!(transformed_probs(&p, 1.0), p);
        assert_eq!(transformed_probs(&p, 0.0), [1.0, 0.0, 0.0, 0.0]);
        assert!(close(&transformed_probs(&p, 0.6), &[0.7, 0.18, 0.09, 0.03], 1e-12));
    }

    #[test]
    fn grouped_means() {
        assert_eq!(grouped_mean(&[1.0, 0.0, 0.0, 0.0], &DEFAULT_MIDPOINTS), 0.0);
        let g = grouped_mean(&[0.7, 0.18, 0.09, 0.03], &DEFAULT_MIDPOINTS);
        assert!((g - 9.9).abs() < 1e-12);
        assert!(validate_midpoints(&[1.0, 2.0, 3.0, 4.0]).is_err());
        assert!(validate_midpoints(&[0.0, 5.0, 4.0, 6.0]).is_err());
    }

    #[test]
    fn constant_chain_has_zero_width() {
        let t = coefficient_table(&["a".into()], &[vec![2.5; 200]]).unwrap();
        assert_eq!((t[0].mean, t[0].width, t[0].significant), (2.5, 0.0, true));
        assert!(coefficient_table(&["a".into()], &[vec![1.0; 99]]).is_err());
    }

    #[test]
    fn normal_chain_width() {
        let mut rng = RngStream::new(4, 4).rng();
        let d: Vec<f64> = (0..100_000).map(|_| standard_normal(&mut rng)).collect();
        let t = coefficient_table(&["b".into()], &[d]).unwrap();
        assert!((t[0].width - 3.92).abs() < 0.05, "{}", t[0].width);
        assert!(!t[0].significant);
    }

    #[test]
    fn quantile_interpolates() {
        let s = [1.0, 2.0, 3.0, 4.0, 5.0];
        assert_eq!(quantile(&s, 0.5), 3.0);
        assert_eq!(quantile(&s, 0.125), 1.5);
        assert_eq!(quantile(&s, 1.0), 5.0);
    }

    #[test]
    fn pearson_basics() {
        assert!((pearson(&[1.0, 2.0, 3.0], &[2.0, 4.0, 6.0]).unwrap() - 1.0).abs() < 1e-12);
        assert!(pearson(&[1.0, 1.0], &[0.0, 1.0]).is_none());
    }

    #[test]
    fn ess_tracks_ar1_autocorrelation() {
        use rand::SeedableRng;
        use rand_distr::{Distribution, StandardNormal};
        let mut rng = rand_chacha::ChaCha8Rng::seed_from_u64(3);
        let n = 200_000;
        let iid: Vec<f64> = (0..n).map(|_| StandardNormal.sample(&mut rng)).collect();
        let e = effective_sample_size(&iid) / n as f64;
        assert!((e - 1.0).abs() < 0.05, "{e}");
        let rho: f64 = 0.8;
        let mut ar = vec![0.0; n];
        for t in 1..n {
            let z: f64 = StandardNormal.sample(&mut rng);
            ar[t] = rho * ar[t - 1] + (1.0 - rho * rho).sqrt() * z;
        }
        let expected = (1.0 - rho) / (1.0 + rho);
        let e = effective_sample_size(&ar) / n as f64;
        assert!((e / expected - 1.0).abs() < 0.1, "{e} vs {expected}");
        assert!((split_rhat(&iid) - 1.0).abs() < 0.01);
        let drift: Vec<f64> = (0..1000).map(|t| t as f64).collect();
        assert!(split_rhat(&drift) > 1.5);
    }
}
