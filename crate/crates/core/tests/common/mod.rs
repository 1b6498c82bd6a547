#![allow(dead_code)]

use std::path::PathBuf;

use popdiff::data::load_episode;
use popdiff::density::{eval_density, QPoint, RhoParams};
use popdiff::forward::Episode;
use popdiff::quadrature::GaussLegendre;
use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;

pub const FIXTURE_TAU: f64 = 0.08333333333333333;

pub fn fixtures() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/fixtures")
}

pub fn golden() -> PathBuf {
    PathBuf::from(env!("CARGO_MANIFEST_DIR")).join("tests/golden")
}

pub fn fixture_episode_paths() -> Vec<PathBuf> {
    (1..=4)
        .map(|k| fixtures().join(format!("episodes/synth{k}.csv")))
        .collect()
}

pub fn fixture_episode(k: usize) -> Episode {
    load_episode(
        &fixtures().join(format!("episodes/synth{k}.csv")),
        FIXTURE_TAU,
    )
    .unwrap()
}

/// The law the fixture episodes were drawn from.
pub fn rho0() -> RhoParams {
    RhoParams {
        a1: 0.1,
        b1: 1.5,
        a2: 0.1,
        b2: 2.0,
        mu1: 0.63,
        mu2: 1.03,
        l11: 0.16,
        l21: 0.048,
        l22: 0.35,
    }
}

/// Valid laws whose spread is a moderate fraction of the box.
pub fn random_rho(rng: &mut ChaCha8Rng) -> RhoParams {
    let a1 = rng.random_range(0.05..0.4);
    let w1 = rng.random_range(0.6..1.4);
    let a2 = rng.random_range(0.05..0.5);
    let w2 = rng.random_range(0.8..1.8);
    let l22 = w2 * rng.random_range(0.15..0.4);
    RhoParams {
        a1,
        b1: a1 + w1,
        a2,
        b2: a2 + w2,
        mu1: a1 + w1 * rng.random_range(0.3..0.7),
        mu2: a2 + w2 * rng.random_range(0.3..0.7),
        l11: w1 * rng.random_range(0.15..0.4),
        l21: l22 * rng.random_range(-0.5..0.5),
        l22,
    }
}

pub fn random_rhos(count: usize, seed: u64) -> Vec<RhoParams> {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    (0..count).map(|_| random_rho(&mut rng)).collect()
}

/// Composite tensor Gauss rule over the box, `panels²` panels of order 20.
pub fn box_integral(rho: &RhoParams, panels: usize, f: impl Fn(QPoint) -> f64) -> f64 {
    let g = GaussLegendre::new(20);
    let h1 = (rho.b1 - rho.a1) / panels as f64;
    let h2 = (rho.b2 - rho.a2) / panels as f64;
    let mut total = 0.0;
    for i in 0..panels {
        for j in 0..panels {
            let lo1 = rho.a1 + i as f64 * h1;
            let lo2 = rho.a2 + j as f64 * h2;
            total += g.integrate(lo1, lo1 + h1, |x| {
                g.integrate(lo2, lo2 + h2, |y| f(QPoint::new(x, y)))
            });
        }
    }
    total
}

/// Mean and covariance diagonal of the truncated law by quadrature.
pub fn truncated_moments(rho: &RhoParams) -> ([f64; 2], [f64; 2]) {
    let d = |q: QPoint| eval_density(q, rho).unwrap();
    let m1 = box_integral(rho, 8, |q| q.q1 * d(q));
    let m2 = box_integral(rho, 8, |q| q.q2 * d(q));
    let v1 = box_integral(rho, 8, |q| (q.q1 - m1).powi(2) * d(q));
    let v2 = box_integral(rho, 8, |q| (q.q2 - m2).powi(2) * d(q));
    ([m1, m2], [v1, v2])
}

/// One line per criterion on the real stderr, so it shows even when the
/// harness captures test output.
pub fn report(id: &str, title: &str, pass: bool, detail: &str) {
    use std::io::Write;
    let verdict = if pass { "PASS" } else { "FAIL" };
    let _ = writeln!(
        std::io::stderr(),
        "[acceptance] {id} {verdict} {title}: {detail}"
    );
}
