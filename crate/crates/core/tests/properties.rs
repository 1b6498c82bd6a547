mod common;

use popdiff::assembly::assemble;
use popdiff::data::{generate_synthetic, PulseSpec, SynthMode, SynthOptions};
use popdiff::density::{sample, QPoint};
use popdiff::experiments::median;
use popdiff::forward::{
    monte_carlo_mean, simulate_deterministic, simulate_population, sup_diff, Episode,
};
use popdiff::grid_basis::{GridSpec, QBox};
use popdiff::objective::{cost, ObjectiveOptions};
use popdiff::optimizer::{fit, initialize, InitOptions, OptimizerOptions};
use popdiff::sampled_system::build_sampled;

use common::*;

const TAU: f64 = 1.0 / 12.0;

fn synth(spec: &GridSpec, n_episodes: usize, steps: usize, noise: f64, seed: u64) -> Vec<Episode> {
    let opts = SynthOptions {
        n_episodes,
        steps,
        noise_sigma: noise,
        seed,
        mode: SynthMode::Population,
        pulse: PulseSpec::default(),
        clamp_nonnegative: false,
        quad_order: 8,
    };
    generate_synthetic(&rho0(), spec, &opts).unwrap()
}

#[test]
fn noise_cost_matches_chi_square_mean() {
    let spec = GridSpec::new(4, 2, 2, TAU).unwrap();
    let (nu, mu, sigma) = (3usize, 40usize, 0.01);
    let costs: Vec<f64> = (0..20)
        .map(|seed| {
            cost(
                &rho0(),
                &spec,
                &synth(&spec, nu, mu, sigma, seed),
                &ObjectiveOptions::default(),
            )
            .unwrap()
        })
        .collect();
    let terms = (nu * (mu + 1)) as f64;
    let expected = terms * sigma * sigma;
    let se = (2.0 * terms).sqrt() * sigma * sigma / (costs.len() as f64).sqrt();
    let mean = costs.iter().sum::<f64>() / costs.len() as f64;
    assert!(
        (mean - expected).abs() < 3.0 * se,
        "mean {mean} expected {expected} se {se}"
    );
}

#[test]
fn stable_at_finest_grid() {
    let spec = GridSpec::new(16, 8, 8, TAU).unwrap();
    for rho in random_rhos(20, 16) {
        let sys = build_sampled(&assemble(&spec, &rho, 8).unwrap(), TAU).unwrap();
        assert!(sys.spectral_radius() < 1.0);
    }
}

#[test]
fn initialization_spans_two_clusters() {
    let u: Vec<f64> = (0..48)
        .map(|j| if (6..18).contains(&j) { 0.8 } else { 0.0 })
        .collect();
    let centres = [QPoint::new(0.4, 0.8), QPoint::new(0.9, 1.4)];
    let episodes: Vec<Episode> = (0..6)
        .map(|i| {
            let y = simulate_deterministic(centres[i % 2], 4, TAU, &u).unwrap();
            Episode::new(format!("e{i}"), TAU, u.clone(), y).unwrap()
        })
        .collect();
    let spec = GridSpec::new(4, 2, 2, TAU).unwrap();
    let init = initialize(
        &episodes,
        &spec,
        QBox::new(1e-3, 5.0, 0.0, 5.0),
        &InitOptions::default(),
        &OptimizerOptions::default(),
    )
    .unwrap();
    let r = init.rho;
    for c in centres {
        assert!(
            r.a1 < c.q1 && c.q1 < r.b1 && r.a2 < c.q2 && c.q2 < r.b2,
            "{r:?}"
        );
    }
    assert_eq!(r.l21, 0.0);
    assert!(
        (r.mu1 - 0.65).abs() < 1e-3 && (r.mu2 - 1.1).abs() < 1e-3,
        "{r:?}"
    );
    assert!((r.l11 - (r.b1 - r.a1) / 6.0).abs() < 1e-12);
}

#[test]
fn fit_is_deterministic_and_never_worse_than_start() {
    let spec = GridSpec::new(4, 2, 2, TAU).unwrap();
    let eps = synth(&spec, 3, 36, 0.01, 4);
    let gbox = QBox::new(1e-3, 5.0, 0.0, 5.0);
    let opt = OptimizerOptions {
        max_iter: 30,
        ..Default::default()
    };
    let init = initialize(&eps, &spec, gbox, &InitOptions::default(), &opt).unwrap();
    let a = fit(
        &eps,
        &spec,
        &init.rho,
        gbox,
        &ObjectiveOptions::default(),
        &opt,
    )
    .unwrap();
    let b = fit(
        &eps,
        &spec,
        &init.rho,
        gbox,
        &ObjectiveOptions::default(),
        &opt,
    )
    .unwrap();
    assert_eq!(a.rho_hat, b.rho_hat);
    assert_eq!(a.cost_trace, b.cost_trace);
    let j0 = cost(&init.rho, &spec, &eps, &ObjectiveOptions::default()).unwrap();
    assert!(a.final_cost() <= j0);
    a.rho_hat.validate().unwrap();
}

#[test]
fn monte_carlo_gap_shrinks_with_samples_and_cells() {
    let u = fixture_episode(1).u;
    let rho = rho0();
    let schedule = [(100usize, 2usize), (1000, 4), (10_000, 8)];
    let medians: Vec<f64> = schedule
        .iter()
        .map(|&(ns, m)| {
            let spec = GridSpec::new(8, m, m, TAU).unwrap();
            let pop = simulate_population(&rho, &spec, &u, 8).unwrap();
            let gaps: Vec<f64> = (1..=5u64)
                .map(|seed| {
                    let qs = sample(&rho, ns, seed).unwrap();
                    sup_diff(&pop, &monte_carlo_mean(&qs, 8, TAU, &u).unwrap())
                })
                .collect();
            median(&gaps)
        })
        .collect();
    assert!(medians.windows(2).all(|w| w[1] < w[0]), "{medians:?}");
}
