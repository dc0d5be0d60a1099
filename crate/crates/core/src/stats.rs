//! Scalar statistical primitives shared by the sampler kernels and oracles.
//!
//! Every Gaussian in the model has unit variance, so the truncated-normal
//! sampler and the tail functions here are specialised to that case.

use std::f64::consts::FRAC_1_SQRT_2;

use rand::Rng;
use rand_chacha::rand_core::SeedableRng;
use rand_chacha::ChaCha8Rng;
use libm::erfc;

use crate::error::{Error, Result};

const LN_SQRT_2PI: f64 = 0.918_938_533_204_672_8;
const INV_SQRT_2PI: f64 = 0.398_942_280_401_432_7;

/// Smallest interval mass accepted by [`sample_truncnorm`].
pub const MIN_TRUNCATION_MASS: f64 = 1e-300;

pub fn normal_pdf(x: f64) -> f64 {
    INV_SQRT_2PI * (-0.5 * x * x).exp()
}

pub fn normal_ln_pdf(x: f64) -> f64 {
    -LN_SQRT_2PI - 0.5 * x * x
}

/// Standard normal distribution function, evaluated through `erfc` so the
/// lower tail keeps full relative precision.
pub fn normal_cdf(x: f64) -> f64 {
    0.5 * erfc(-x * FRAC_1_SQRT_2)
}

/// Upper tail `1 - Φ(x)`.
pub fn normal_sf(x: f64) -> f64 {
    0.5 * erfc(x * FRAC_1_SQRT_2)
}

/// Inverse of [`normal_cdf`] on `(0, 1)` (Wichura's AS241, followed by one
/// Newton step against [`normal_cdf`]).
pub fn normal_quantile(p: f64) -> f64 {
    if p <= 0.0 {
        return f64::NEG_INFINITY;
    }
    if p >= 1.0 {
        return f64::INFINITY;
    }
    let x = as241(p);
    if !x.is_finite() {
        return x;
    }
    // Newton on the tail that is being resolved
    let err = if x < 0.0 { normal_cdf(x) - p } else { (1.0 - p) - normal_sf(x) };
    let pdf = normal_pdf(x);
    if pdf > 0.0 {
        x - err / pdf
    } else {
        x
    }
}

fn as241(p: f64) -> f64 {
    let q = p - 0.5;
    if q.abs() <= 0.425 {
        let r = 0.180625 - q * q;
        return q
            * (((((((2509.080_928_730_122_7 * r + 33430.575_583_588_128) * r
                + 67265.770_927_008_7)
                * r
                + 45921.953_931_549_87)
                * r
                + 13731.693_765_509_461)
                * r
                + 1971.590_950_306_551_3)
                * r
                + 133.141_667_891_784_38)
                * r
                + 3.387_132_872_796_366_5)
            / (((((((5226.495_278_852_545 * r + 28729.085_735_721_943) * r
                + 39307.895_800_092_71)
                * r
                + 21213.794_301_586_597)
                * r
                + 5394.196_021_424_751)
                * r
                + 687.187_007_492_057_9)
                * r
                + 42.313_330_701_600_91)
                * r
                + 1.0);
    }
    let r = if q < 0.0 { p } else { 1.0 - p };
    let r = (-r.ln()).sqrt();
    let val = if r <= 5.0 {
        let r = r - 1.6;
        (((((((7.745_450_142_783_414e-4 * r + 0.022_723_844_989_269_184) * r
            + 0.241_780_725_177_450_6)
            * r
            + 1.270_458_252_452_368_4)
            * r
            + 3.647_848_324_763_204_5)
            * r
            + 5.769_497_221_460_691)
            * r
            + 4.630_337_846_156_546)
            * r
            + 1.423_437_110_749_683_5)
            / (((((((1.050_750_071_644_416_9e-9 * r + 5.475_938_084_995_345e-4) * r
                + 0.015_198_666_563_616_457)
                * r
                + 0.148_103_976_427_480_08)
                * r
                + 0.689_767_334_985_1)
                * r
                + 1.676_384_830_183_803_8)
                * r
                + 2.053_191_626_637_759)
                * r
                + 1.0)
    } else {
        let r = r - 5.0;
        (((((((2.010_334_399_292_288_1e-7 * r + 2.711_555_568_743_487_6e-5) * r
            + 0.001_242_660_947_388_078_4)
            * r
            + 0.026_532_189_526_576_124)
            * r
            + 0.296_560_571_828_504_9)
            * r
            + 1.784_826_539_917_291_3)
            * r
            + 5.463_784_911_164_114)
            * r
            + 6.657_904_643_501_103)
            / (((((((2.044_263_103_389_939_7e-15 * r + 1.421_511_758_316_446e-7) * r
                + 1.846_318_317_510_054_8e-5)
                * r
                + 7.868_691_311_456_133e-4)
                * r
                + 0.014_875_361_290_850_615)
                * r
                + 0.136_929_880_922_735_8)
                * r
                + 0.599_832_206_555_888)
                * r
                + 1.0)
    };
    if q < 0.0 {
        -val
    } else {
        val
    }
}

/// Mills ratio `(1 - Φ(x)) / φ(x)`.
///
/// Uses the Laplace continued fraction for `x >= 5`, where both numerator and
/// denominator head towards underflow.
pub fn mills_ratio(x: f64) -> f64 {
    if x == f64::INFINITY {
        return 0.0;
    }
    if x < 5.0 {
        return normal_sf(x) / normal_pdf(x);
    }
    // modified Lentz on x + 1/(x + 2/(x + 3/(x + ...)))
    let tiny = 1e-300;
    let mut f = x;
    let mut c = x;
    let mut d = 0.0;
    for k in 1..500 {
        let a = k as f64;
        d = x + a * d;
        if d.abs() < tiny {
            d = tiny;
        }
        c = x + a / c;
        if c.abs() < tiny {
            c = tiny;
        }
        d = 1.0 / d;
        let delta = c * d;
        f *= delta;
        if (delta - 1.0).abs() < 1e-16 {
            break;
        }
    }
    1.0 / f
}

/// Hazard `φ(x) / (1 - Φ(x))`.
pub fn normal_hazard(x: f64) -> f64 {
    if x < 5.0 {
        normal_pdf(x) / normal_sf(x)
    } else {
        1.0 / mills_ratio(x)
    }
}

/// `ln(1 - Φ(x))` without underflow for large `x`.
pub fn normal_ln_sf(x: f64) -> f64 {
    if x < 5.0 {
        normal_sf(x).ln()
    } else {
        normal_ln_pdf(x) + mills_ratio(x).ln()
    }
}

/// `ln Φ(x)`.
pub fn normal_ln_cdf(x: f64) -> f64 {
    normal_ln_sf(-x)
}

/// `E[V | V < 0]` for `V ~ N(mu, 1)`, i.e. `mu - φ(mu)/(1 - Φ(mu))`.
///
/// This is the latent value assigned to a transformed location. It is
/// strictly below `min(0, mu)`.
pub fn left_tail_mean(mu: f64) -> f64 {
    mu - normal_hazard(mu)
}

/// Mass of the standard normal on `(a, b)` on the log scale.
fn ln_interval_mass(a: f64, b: f64) -> f64 {
    if a >= 0.0 {
        let la = normal_ln_sf(a);
        let lb = normal_ln_sf(b);
        la + (-(lb - la).exp()).ln_1p()
    } else if b <= 0.0 {
        let lb = normal_ln_cdf(b);
        let la = normal_ln_cdf(a);
        lb + (-(la - lb).exp()).ln_1p()
    } else {
        (normal_cdf(b) - normal_cdf(a)).ln()
    }
}

/// Draws from `N(mean, 1)` restricted to the open interval `(lower, upper)`.
///
/// Moderate intervals use inversion of the distribution function; far tails
/// use exponential-proposal rejection; very narrow intervals use a uniform
/// proposal. The returned value always lies strictly inside the interval.
pub fn sample_truncnorm<R: Rng + ?Sized>(
    mean: f64,
    lower: f64,
    upper: f64,
    rng: &mut R,
) -> Result<f64> {
    if lower.is_nan() || upper.is_nan() || mean.is_nan() || !mean.is_finite() || lower >= upper {
        return Err(Error::Numeric(format!(
            "invalid truncation request: mean {mean}, interval ({lower}, {upper})"
        )));
    }
    let a = lower - mean;
    let b = upper - mean;
    if ln_interval_mass(a, b) < MIN_TRUNCATION_MASS.ln() {
        return Err(Error::NegligibleMass { mean, lower, upper });
    }
    for _ in 0..10_000 {
        let z = sample_standard_truncated(a, b, rng);
        let x = mean + z;
        if x > lower && x < upper {
            return Ok(x);
        }
    }
    Err(Error::Numeric(format!(
        "could not place a draw strictly inside ({lower}, {upper}) around mean {mean}"
    )))
}

fn sample_standard_truncated<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let width = b - a;
    if width.is_finite() && width * (a.abs().max(b.abs()) + 1.0) <= 2.0 {
        return uniform_rejection(a, b, rng);
    }
    if a >= 4.0 {
        return right_tail_exponential(a, b, rng);
    }
    if b <= -4.0 {
        return -right_tail_exponential(-b, -a, rng);
    }
    loop {
        let u: f64 = rng.random();
        let z = if a >= 0.0 {
            let pa = normal_sf(a);
            let pb = normal_sf(b);
            -normal_quantile(pb + u * (pa - pb))
        } else {
            let pa = normal_cdf(a);
            let pb = normal_cdf(b);
            normal_quantile(pa + u * (pb - pa))
        };
        if z > a && z < b {
            return z;
        }
    }
}

fn uniform_rejection<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    // envelope at the point of the interval closest to zero
    let peak = if a > 0.0 {
        a
    } else if b < 0.0 {
        b
    } else {
        0.0
    };
    loop {
        let x = a + (b - a) * rng.random::<f64>();
        let accept = (0.5 * (peak * peak - x * x)).exp();
        if rng.random::<f64>() <= accept && x > a && x < b {
            return x;
        }
    }
}

fn right_tail_exponential<R: Rng + ?Sized>(a: f64, b: f64, rng: &mut R) -> f64 {
    let rate = 0.5 * (a + (a * a + 4.0).sqrt());
    loop {
        let e = -(1.0 - rng.random::<f64>()).ln() / rate;
        let x = a + e;
        if x >= b || x <= a {
            continue;
        }
        let accept = (-0.5 * (x - rate) * (x - rate)).exp();
        if rng.random::<f64>() <= accept {
            return x;
        }
    }
}

/// `P(Z_P >= 0, Z_O <= 0)` where `Z_P ~ N(mu, 1)` and `Z_O | Z_P ~ N(Z_P, 1)`,
/// i.e. `O(μ) = ∫_0^∞ φ(t − μ) Φ(−t) dt`.
///
/// Differentiating under the integral and integrating by parts gives
/// `O'(μ) = φ(μ)/2 − φ(μ/√2) Φ(μ/√2)/√2`, hence
/// `O(μ) = [Φ(μ) − Φ(μ/√2)²] / 2`. For `μ > 0` the equivalent form
/// `[2s − s² − Φ̄(μ)] / 2` with `s = Φ̄(μ/√2)` avoids cancellation.
pub fn orthant_prob(mu: f64) -> f64 {
    let r = mu * std::f64::consts::FRAC_1_SQRT_2;
    let value = if mu > 0.0 {
        let s = normal_sf(r);
        0.5 * (2.0 * s - s * s - normal_sf(mu))
    } else {
        let c = normal_cdf(r);
        0.5 * (normal_cdf(mu) - c * c)
    };
    value.clamp(0.0, 1.0)
}

/// [`orthant_prob`] by adaptive quadrature of its defining integral over
/// `[0, max(μ, 0) + span]`.
pub fn orthant_prob_quadrature(mu: f64, span: f64) -> f64 {
    let upper = mu.max(0.0) + span;
    quad::integrate(|t| normal_pdf(t - mu) * normal_sf(t), 0.0, upper, 1e-14).clamp(0.0, 1.0)
}

pub mod quad {
    //! Adaptive Gauss–Kronrod (7/15) quadrature on finite intervals.

    const XGK: [f64; 8] = [
        0.991_455_371_120_812_6,
        0.949_107_912_342_758_5,
        0.864_864_423_359_769_1,
        0.741_531_185_599_394_4,
        0.586_087_235_467_691_1,
        0.405_845_151_377_397_2,
        0.207_784_955_007_898_5,
        0.0,
    ];
    const WGK: [f64; 8] = [
        0.022_935_322_010_529_22,
        0.063_092_092_629_978_55,
        0.104_790_010_322_250_2,
        0.140_653_259_715_525_9,
        0.169_004_726_639_267_9,
        0.190_350_578_064_785_4,
        0.204_432_940_075_298_9,
        0.209_482_141_084_727_8,
    ];
    const WG: [f64; 4] = [
        0.129_484_966_168_869_7,
        0.279_705_391_489_276_7,
        0.381_830_050_505_118_9,
        0.417_959_183_673_469_4,
    ];

    fn kronrod<F: Fn(f64) -> f64>(f: &F, a: f64, b: f64) -> (f64, f64) {
        let center = 0.5 * (a + b);
        let half = 0.5 * (b - a);
        let fc = f(center);
        let mut kronrod = WGK[7] * fc;
        let mut gauss = WG[3] * fc;
        for j in 0..7 {
            let dx = half * XGK[j];
            let sum = f(center - dx) + f(center + dx);
            kronrod += WGK[j] * sum;
            if j % 2 == 1 {
                gauss += WG[j / 2] * sum;
            }
        }
        (kronrod * half, ((kronrod - gauss) * half).abs())
    }

    /// Integrates `f` over `[a, b]` to the requested absolute tolerance.
    pub fn integrate<F: Fn(f64) -> f64>(f: F, a: f64, b: f64, abs_tol: f64) -> f64 {
        let mut total = 0.0;
        let mut stack = vec![(a, b, abs_tol, 0u32)];
        while let Some((lo, hi, tol, depth)) = stack.pop() {
            let (value, err) = kronrod(&f, lo, hi);
            if err <= tol || depth >= 40 {
                total += value;
            } else {
                let mid = 0.5 * (lo + hi);
                stack.push((lo, mid, 0.5 * tol, depth + 1));
                stack.push((mid, hi, 0.5 * tol, depth + 1));
            }
        }
        total
    }
}

/// Which part of the model a random stream feeds.
#[derive(Clone, Copy, Debug, PartialEq, Eq, Hash)]
#[repr(u64)]
pub enum StreamDomain {
    SiteLatent = 1,
    Alpha = 2,
    Beta = 3,
    Theta = 4,
    Init = 5,
    SimTheta = 6,
    SimCovariate = 7,
    SimSite = 8,
    SimMask = 9,
    Oracle = 10,
}

/// Counter-based random stream: the output depends only on
/// `(seed, stream_id)` and the draw index, never on which thread asks.
#[derive(Clone, Copy, Debug, PartialEq, Eq)]
pub struct RngStream {
    pub seed: u64,
    pub stream_id: u64,
}

fn splitmix64(mut z: u64) -> u64 {
    z = z.wrapping_add(0x9e37_79b9_7f4a_7c15);
    z = (z ^ (z >> 30)).wrapping_mul(0xbf58_476d_1ce4_e5b9);
    z = (z ^ (z >> 27)).wrapping_mul(0x94d0_49bb_1331_11eb);
    z ^ (z >> 31)
}

impl RngStream {
    pub fn new(seed: u64, stream_id: u64) -> Self {
        Self { seed, stream_id }
    }

    /// Stream for element `index` of `domain` at sweep `sweep`.
    pub fn keyed(seed: u64, domain: StreamDomain, index: u64, sweep: u64) -> Self {
        let id = splitmix64(splitmix64(splitmix64(sweep) ^ index) ^ (domain as u64));
        Self::new(seed, id)
    }

    pub fn rng(&self) -> ChaCha8Rng {
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(self.stream_id);
        rng
    }
}

/// Draws one standard normal variate.
pub fn standard_normal<R: Rng + ?Sized>(rng: &mut R) -> f64 {
    rng.sample(rand_distr::StandardNormal)
}
