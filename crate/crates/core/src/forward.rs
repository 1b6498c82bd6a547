//! Discrete-time simulation of the population system and of the
//! single-realization model.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, point_mass_operators};
use crate::density::{sample, QPoint, RhoParams};
use crate::error::{PopdiffError, Result};
use crate::grid_basis::GridSpec;
use crate::sampled_system::{build_sampled, build_with_sensitivities, SampledSystem};

/// One drinking episode on a uniform grid: zero-order-hold BrAC inputs
/// `u[0..μ]` and TAC observations `y_obs[0..=μ]`. The skin starts alcohol-free.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct Episode {
    pub id: String,
    /// Sampling interval, hours.
    pub tau: f64,
    pub u: Vec<f64>,
    pub y_obs: Vec<f64>,
}

impl Episode {
    pub fn new(id: impl Into<String>, tau: f64, u: Vec<f64>, y_obs: Vec<f64>) -> Result<Self> {
        let ep = Episode {
            id: id.into(),
            tau,
            u,
            y_obs,
        };
        ep.validate()?;
        Ok(ep)
    }

    /// Number of transitions `μ`.
    pub fn steps(&self) -> usize {
        self.u.len()
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(PopdiffError::Domain(format!(
                "episode `{}`: sampling interval must be positive",
                self.id
            )));
        }
        if self.y_obs.len() != self.u.len() + 1 {
            return Err(PopdiffError::Domain(format!(
                "episode `{}`: {} observations for {} inputs (need one more observation than inputs)",
                self.id,
                self.y_obs.len(),
                self.u.len()
            )));
        }
        if self.u.iter().chain(&self.y_obs).any(|v| !v.is_finite()) {
            return Err(PopdiffError::Domain(format!(
                "episode `{}` contains non-finite values",
                self.id
            )));
        }
        Ok(())
    }

    /// Sample times `jτ`, `j = 0..=μ`.
    pub fn times(&self) -> Vec<f64> {
        (0..=self.steps()).map(|j| j as f64 * self.tau).collect()
    }
}

/// Outputs `y_j = Ĉx_j` together with the states that produced them.
#[derive(Debug, Clone)]
pub struct Trajectory {
    pub outputs: Vec<f64>,
    pub states: Vec<DVector<f64>>,
}

/// Runs `x_{j+1} = Âx_j + B̂u_j` from `x0` and records `y_j = Ĉx_j`.
pub fn simulate_from(sys: &SampledSystem, x0: DVector<f64>, u: &[f64]) -> Result<Trajectory> {
    let bs = sys.block_size();
    if x0.len() != sys.dim() {
        return Err(PopdiffError::Domain(format!(
            "initial state has length {}, system dimension is {}",
            x0.len(),
            sys.dim()
        )));
    }
    if u.iter().any(|v| !v.is_finite()) {
        return Err(PopdiffError::Domain(
            "input contains non-finite values".into(),
        ));
    }
    let output = |x: &DVector<f64>| -> f64 {
        sys.blocks
            .iter()
            .enumerate()
            .map(|(c, b)| b.chat.dot(&x.rows(c * bs, bs)))
            .sum()
    };
    let mut states = Vec::with_capacity(u.len() + 1);
    let mut outputs = Vec::with_capacity(u.len() + 1);
    outputs.push(output(&x0));
    states.push(x0);
    for (j, &uj) in u.iter().enumerate() {
        let prev = &states[j];
        let mut next = DVector::zeros(sys.dim());
        for (c, b) in sys.blocks.iter().enumerate() {
            let mut seg = next.rows_mut(c * bs, bs);
            seg.gemv(1.0, &b.ahat, &prev.rows(c * bs, bs), 0.0);
            seg.axpy(uj, &b.bhat, 1.0);
        }
        if next.iter().any(|v| !v.is_finite()) {
            return Err(PopdiffError::SimulationDivergence {
                episode: String::new(),
                step: j + 1,
            });
        }
        outputs.push(output(&next));
        states.push(next);
    }
    Ok(Trajectory { outputs, states })
}

/// Simulation from the zero state; `u.len() + 1` outputs.
pub fn simulate(sys: &SampledSystem, u: &[f64]) -> Result<Trajectory> {
    simulate_from(sys, DVector::zeros(sys.dim()), u)
}

/// Sampled single-realization system at `q` with `n` depth elements.
/// With `with_grad`, sensitivities with respect to `(q1, q2)` are attached.
pub fn deterministic_system(
    q: QPoint,
    n: usize,
    tau: f64,
    with_grad: bool,
) -> Result<SampledSystem> {
    if !(q.q1 > 0.0) || !q.q2.is_finite() || !q.q1.is_finite() {
        return Err(PopdiffError::InvalidParameter(format!(
            "diffusivity must be positive, got q = ({}, {})",
            q.q1, q.q2
        )));
    }
    let ops = point_mass_operators(n, q.q1, q.q2)?;
    if with_grad {
        build_with_sensitivities(&ops, tau)
    } else {
        build_sampled(&ops, tau)
    }
}

/// Output of the model with fixed parameters `q`.
pub fn simulate_deterministic(q: QPoint, n: usize, tau: f64, u: &[f64]) -> Result<Vec<f64>> {
    let sys = deterministic_system(q, n, tau, false)?;
    Ok(simulate(&sys, u)?.outputs)
}

/// Population output for `rho` on `spec`.
pub fn simulate_population(
    rho: &RhoParams,
    spec: &GridSpec,
    u: &[f64],
    quad_order: usize,
) -> Result<Vec<f64>> {
    let ops = assemble(spec, rho, quad_order)?;
    let sys = build_sampled(&ops, spec.tau)?;
    Ok(simulate(&sys, u)?.outputs)
}

/// Mean output over realizations, each simulated with the single-q model.
pub fn monte_carlo_mean(qs: &[QPoint], n: usize, tau: f64, u: &[f64]) -> Result<Vec<f64>> {
    let runs = qs
        .par_iter()
        .map(|q| simulate_deterministic(*q, n, tau, u))
        .collect::<Result<Vec<_>>>()?;
    let mut mean = vec![0.0; u.len() + 1];
    for run in &runs {
        for (m, y) in mean.iter_mut().zip(run) {
            *m += y;
        }
    }
    let count = qs.len() as f64;
    mean.iter_mut().for_each(|m| *m /= count);
    Ok(mean)
}

#[derive(Debug, Clone)]
pub struct PopulationComparison {
    pub population: Vec<f64>,
    pub mc_mean: Vec<f64>,
    /// Sup-norm difference of the two outputs.
    pub discrepancy: f64,
}

/// Compares the population output against the Monte Carlo mean of
/// single-realization outputs drawn from the same law.
pub fn population_vs_montecarlo(
    rho: &RhoParams,
    spec: &GridSpec,
    u: &[f64],
    nsamples: usize,
    seed: u64,
    quad_order: usize,
) -> Result<PopulationComparison> {
    let population = simulate_population(rho, spec, u, quad_order)?;
    let qs = sample(rho, nsamples, seed)?;
    let mc_mean = monte_carlo_mean(&qs, spec.n, spec.tau, u)?;
    let discrepancy = sup_diff(&population, &mc_mean);
    Ok(PopulationComparison {
        population,
        mc_mean,
        discrepancy,
    })
}

pub fn sup_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::CellMoments;
    use crate::expm::expm;
    use crate::grid_basis::{hat_mass, hat_stiffness, QBox};
    use crate::sampled_system::BlockSystem;
    use nalgebra::DMatrix;

    fn scalar_system() -> SampledSystem {
        let b = BlockSystem::from_generator(
            DMatrix::from_element(1, 1, -1.0),
            DVector::from_element(1, 1.0),
            DVector::from_element(1, 1.0),
            2f64.ln(),
        )
        .unwrap();
        SampledSystem::from_blocks(vec![b], 2f64.ln())
    }

    fn pulse(len: usize) -> Vec<f64> {
        (0..len)
            .map(|j| {
                let t = j as f64 / 12.0;
                if (0.5..2.0).contains(&t) {
                    1.0
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn geometric_series() {
        let y = simulate(&scalar_system(), &[1.0; 6]).unwrap().outputs;
        let want = [0.0, 0.5, 0.75, 0.875, 0.9375, 0.96875, 0.984375];
        for (a, b) in y.iter().zip(want) {
            assert!((a - b).abs() < 1e-15);
        }
    }

    #[test]
    fn zero_input_zero_output() {
        let y = simulate_deterministic(QPoint::new(0.6, 1.0), 8, 1.0 / 12.0, &[0.0; 20]).unwrap();
        assert!(y.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn linearity_and_shift_invariance() {
        let sys = deterministic_system(QPoint::new(0.6, 1.2), 8, 1.0 / 12.0, false).unwrap();
        let u = pulse(40);
        let y = simulate(&sys, &u).unwrap().outputs;
        let u2: Vec<f64> = u.iter().map(|v| 2.0 * v).collect();
        let y2 = simulate(&sys, &u2).unwrap().outputs;
        for (a, b) in y.iter().zip(&y2) {
            assert!((2.0 * a - b).abs() < 1e-14);
        }
        // superposition with a second input
        let w: Vec<f64> = (0..40).map(|j| (j as f64 * 0.3).sin().abs()).collect();
        let yw = simulate(&sys, &w).unwrap().outputs;
        let sum: Vec<f64> = u.iter().zip(&w).map(|(a, b)| a + b).collect();
        let ys = simulate(&sys, &sum).unwrap().outputs;
        for j in 0..ys.len() {
            assert!((ys[j] - y[j] - yw[j]).abs() < 1e-13);
        }
        // delaying the input by 5 steps delays the output by 5 steps
        let mut delayed = vec![0.0; 5];
        delayed.extend_from_slice(&u[..35]);
        let yd = simulate(&sys, &delayed).unwrap().outputs;
        for j in 0..=35 {
            assert!((yd[j + 5] - y[j]).abs() < 1e-14);
        }
    }

    #[test]
    fn sealed_boundaries_conserve_mass() {
        let n = 10;
        let q1 = 0.7;
        let m = hat_mass(n);
        let k = hat_stiffness(n) * q1;
        let agen = -m.clone().cholesky().unwrap().solve(&k);
        let ahat = expm(&(agen * 0.1)).unwrap();
        let ones = DVector::from_element(n + 1, 1.0);
        let mut x = DVector::from_fn(n + 1, |i, _| (i as f64 / n as f64).powi(2));
        let total0 = (&m * &x).dot(&ones);
        for _ in 0..50 {
            x = &ahat * x;
            let total = (&m * &x).dot(&ones);
            assert!((total - total0).abs() < 1e-9);
        }
    }

    #[test]
    fn refinement_differences_shrink() {
        let u = pulse(60);
        let q = QPoint::new(0.6, 1.0);
        let y: Vec<Vec<f64>> = [16, 32, 64]
            .iter()
            .map(|&n| simulate_deterministic(q, n, 1.0 / 12.0, &u).unwrap())
            .collect();
        let d1 = sup_diff(&y[0], &y[1]);
        let d2 = sup_diff(&y[1], &y[2]);
        assert!(d2 < d1, "{d1} {d2}");
    }

    #[test]
    fn single_cell_population_equals_conditional_means() {
        // a one-cell population system is the deterministic model at the mean
        let rho = RhoParams::independent(QBox::new(0.3, 0.9, 0.5, 1.5), (0.6, 1.0), (0.2, 0.3));
        let spec = GridSpec::new(8, 1, 1, 1.0 / 12.0).unwrap();
        let (mo, _) = crate::assembly::cell_moments(&spec, &rho, 8, false).unwrap();
        let CellMoments { q1, q2, .. } = mo[0].clone();
        let u = pulse(30);
        let pop = simulate_population(&rho, &spec, &u, 8).unwrap();
        let det = simulate_deterministic(QPoint::new(q1, q2), 8, spec.tau, &u).unwrap();
        assert!(sup_diff(&pop, &det) < 1e-12);
    }

    #[test]
    fn zero_input_comparison_is_exact() {
        let rho = RhoParams::independent(QBox::new(0.3, 0.9, 0.5, 1.5), (0.6, 1.0), (0.2, 0.3));
        let spec = GridSpec::new(4, 2, 2, 1.0 / 12.0).unwrap();
        let cmp = population_vs_montecarlo(&rho, &spec, &[0.0; 10], 50, 3, 8).unwrap();
        assert_eq!(cmp.discrepancy, 0.0);
        assert!(cmp.population.iter().all(|v| *v == 0.0));
    }

    #[test]
    fn episode_validation() {
        assert!(Episode::new("a", 0.1, vec![1.0; 3], vec![0.0; 4]).is_ok());
        assert!(Episode::new("a", 0.1, vec![1.0; 3], vec![0.0; 3]).is_err());
        assert!(Episode::new("a", 0.0, vec![1.0; 3], vec![0.0; 4]).is_err());
        assert!(Episode::new("a", 0.1, vec![f64::NAN; 3], vec![0.0; 4]).is_err());
    }
}
