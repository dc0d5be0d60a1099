//! Each update kernel leaves its exact conditional invariant.

use latent_abundance::model::CutPoints;
use latent_abundance::oracle::{
    exact_tiny_posterior, kernel_suite, positive_potential_test, richardson_gap, tiny_gibbs_chain,
    tiny_posterior_check, zero_mixture_test_with, KernelId, TinyModel, P_THRESHOLD,
};
use latent_abundance::sampler::{PositiveKernel, SamplerOptions, ZeroKernel};

#[test]
fn every_kernel_passes_for_every_seed() {
    let checks = kernel_suite(20_000, None).unwrap();
    assert_eq!(checks.len(), 3 * KernelId::ALL.len());
    let failed: Vec<_> = checks.iter().filter(|c| !c.passed()).collect();
    assert!(failed.is_empty(), "{failed:#?}");
}

#[test]
fn zero_mixture_over_a_grid_of_fractions_and_means() {
    for u in [0.05, 0.5, 1.0] {
        for mu in [-2.5, -0.3, 0.8, 2.0] {
            let c = zero_mixture_test_with(u, mu, 20_000, 11, None, ZeroKernel::Joint).unwrap();
            assert!(c.passed(), "u {u} mu {mu}: {c:?}");
        }
    }
}

#[test]
fn literal_zero_kernel_is_fine_at_moderate_means() {
    for mu in [-1.0, 0.0, 0.5] {
        let c = zero_mixture_test_with(0.6, mu, 20_000, 4, None, ZeroKernel::Literal).unwrap();
        assert!(c.passed(), "mu {mu}: {c:?}");
    }
}

#[test]
fn positive_potential_kernels() {
    let exact = positive_potential_test(PositiveKernel::Exact, 20_000, 5, None).unwrap();
    assert!(exact.passed(), "{exact:?}");
    // The untruncated rule puts mass on z_P < 0, which cannot produce y > 0.
    let literal = positive_potential_test(PositiveKernel::Literal, 20_000, 5, None).unwrap();
    assert!(literal.p_value < P_THRESHOLD, "{literal:?}");
}

fn tiny(u: f64) -> TinyModel {
    TinyModel { alpha: CutPoints::new(1.0, 2.0).unwrap(), v: 1.0, prior_var: 1.0, u }
}

#[test]
fn tiny_model_chains_match_exact_posteriors() {
    let options = SamplerOptions::default();
    for y in 0..=3u8 {
        let tm = tiny(0.5);
        let post = exact_tiny_posterior(&tm, y, 400).unwrap();
        let draws = tiny_gibbs_chain(&tm, y, 20_000, 5, 17 + y as u64, &options).unwrap();
        let (stat, p) = tiny_posterior_check(&post, &draws, 20);
        assert!(p > P_THRESHOLD, "y = {y}: chi2 {stat}, p {p}");
    }
}

#[test]
fn literal_zero_kernel_matches_tiny_posterior() {
    let options = SamplerOptions { zero_kernel: ZeroKernel::Literal, ..Default::default() };
    let tm = tiny(0.5);
    let post = exact_tiny_posterior(&tm, 0, 400).unwrap();
    let draws = tiny_gibbs_chain(&tm, 0, 20_000, 5, 3, &options).unwrap();
    let (stat, p) = tiny_posterior_check(&post, &draws, 20);
    assert!(p > P_THRESHOLD, "chi2 {stat}, p {p}");
}

#[test]
fn tiny_quadrature_is_resolved() {
    for y in 0..=3u8 {
        let gap = richardson_gap(&tiny(0.5), y, 400).unwrap();
        assert!(gap < 1e-3, "y = {y}: {gap}");
    }
    assert!(exact_tiny_posterior(&tiny(0.0), 2, 100).is_err());
    assert!(exact_tiny_posterior(&tiny(0.0), 0, 100).is_ok());
}
