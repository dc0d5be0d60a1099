use latent_abundance::model::{Dataset, HyperParams, ParameterState};
use latent_abundance::sampler::{Sampler, SamplerOptions};
use latent_abundance::schedule::ThetaSchedule;
use latent_abundance::sim::{simulate_dataset, SimConfig, UField};
use latent_abundance::summary::{
    cell_draw, check_draw, coefficient_table, products, summarize_cells, DEFAULT_MIDPOINTS,
};

fn chain(data: &Dataset, sweeps: u64, keep_from: u64) -> Vec<ParameterState> {
    let sched = ThetaSchedule::sequential(data.adjacency());
    let sampler = Sampler::new(data, HyperParams::default(), SamplerOptions::default(), sched, 8).unwrap();
    let mut state = sampler.initialize(data).unwrap();
    let mut out = Vec::new();
    for s in 1..=sweeps {
        sampler.sweep(data, &mut state, s).unwrap();
        if s > keep_from {
            out.push(state.params.clone());
        }
    }
    out
}

#[test]
fn every_retained_draw_satisfies_the_product_invariants() {
    let cfg = SimConfig { nx: 12, ny: 12, unsampled_fraction: 0.5, ..Default::default() };
    let data = simulate_dataset(&cfg).unwrap().dataset(cfg.threshold).unwrap();
    let draws = chain(&data, 300, 100);
    for d in &draws {
        for c in 0..data.n_cells() {
            let cd = cell_draw(&data, d, c, &DEFAULT_MIDPOINTS);
            assert_eq!(check_draw(&cd, data.u(c)), None, "cell {c}");
            assert!(cd.z_t <= cd.z_p);
        }
    }
    let (cells, violations) = summarize_cells(&data, &draws, &DEFAULT_MIDPOINTS).unwrap();
    assert!(violations.is_empty());
    assert_eq!(cells.len(), 144);
    for c in &cells {
        assert!(c.z_t.mean <= c.z_p.mean);
        assert!(c.mean_transformed.mean <= c.mean_potential.mean + 1e-12);
        assert!(c.theta.lo95 <= c.theta.mean && c.theta.mean <= c.theta.hi95);
    }
}

#[test]
fn untransformed_landscape_has_identical_products() {
    let cfg = SimConfig { nx: 8, ny: 8, u: UField::Constant { value: 1.0 }, ..Default::default() };
    let data = simulate_dataset(&cfg).unwrap().dataset(cfg.threshold).unwrap();
    let draws = chain(&data, 120, 20);
    let (cells, _) = summarize_cells(&data, &draws, &DEFAULT_MIDPOINTS).unwrap();
    let maps = products(&cells);
    let get = |name: &str| maps.iter().find(|(n, _)| n == name).unwrap().1.clone();
    for h in 0..4 {
        assert_eq!(get(&format!("p{h}")), get(&format!("r{h}")));
    }
    assert_eq!(get("mean_potential"), get("mean_transformed"));
    assert_eq!(get("z_p"), get("z_t"));
}

#[test]
fn coefficient_table_uses_linear_interpolated_quantiles() {
    // 1..=101 shuffled: the 2.5% point sits at rank 2.5 -> 3.5, the 97.5% at 97.5 -> 98.5.
    let draws: Vec<f64> = (0..101).map(|k| ((k * 37) % 101 + 1) as f64).collect();
    let neg: Vec<f64> = draws.iter().map(|v| v - 60.0).collect();
    let rows = coefficient_table(&["a".into(), "b".into()], &[draws, neg]).unwrap();
    assert_eq!((rows[0].mean, rows[0].lo95, rows[0].hi95), (51.0, 3.5, 98.5));
    assert_eq!(rows[0].width, 95.0);
    assert!(rows[0].significant && !rows[1].significant);
    assert!(coefficient_table(&["a".into()], &[vec![1.0; 99]]).is_err());
}

#[test]
fn summaries_reject_mismatched_draws() {
    let cfg = SimConfig { nx: 5, ny: 5, ..Default::default() };
    let data = simulate_dataset(&cfg).unwrap().dataset(cfg.threshold).unwrap();
    let mut d = chain(&data, 3, 0);
    d[1].theta.pop();
    assert!(summarize_cells(&data, &d, &DEFAULT_MIDPOINTS).is_err());
    assert!(summarize_cells(&data, &[], &DEFAULT_MIDPOINTS).is_err());
}
