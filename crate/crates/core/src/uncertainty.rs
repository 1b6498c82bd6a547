//! Pointwise credible bands for the predicted TAC trajectory.

use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::assemble;
use crate::density::{sample, RhoParams};
use crate::error::{PopdiffError, Result};
use crate::forward::{simulate, simulate_deterministic, simulate_population};
use crate::grid_basis::GridSpec;
use crate::sampled_system::build_sampled;

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct CredibleBand {
    pub level: f64,
    pub lower: Vec<f64>,
    pub upper: Vec<f64>,
    /// Output of the population model.
    pub mean_output: Vec<f64>,
    pub nsamples: usize,
    pub seed: u64,
}

impl CredibleBand {
    pub fn max_width(&self) -> f64 {
        self.lower
            .iter()
            .zip(&self.upper)
            .map(|(l, u)| u - l)
            .fold(0.0, f64::max)
    }

    /// Fraction of time points where `y` lies inside the band.
    pub fn coverage_of(&self, y: &[f64]) -> f64 {
        let inside = self
            .lower
            .iter()
            .zip(&self.upper)
            .zip(y)
            .filter(|((l, u), v)| *l <= *v && *v <= *u)
            .count();
        inside as f64 / y.len() as f64
    }
}

/// Linear-interpolation quantile of sorted data.
pub fn quantile_sorted(sorted: &[f64], p: f64) -> f64 {
    let pos = p.clamp(0.0, 1.0) * (sorted.len() - 1) as f64;
    let lo = pos.floor() as usize;
    let hi = pos.ceil() as usize;
    let frac = pos - lo as f64;
    sorted[lo] + frac * (sorted[hi] - sorted[lo])
}

/// Trajectories of single-realization outputs for `nsamples` draws from the
/// fitted law; one row per draw.
pub fn sample_trajectories(
    rho: &RhoParams,
    n: usize,
    tau: f64,
    u: &[f64],
    nsamples: usize,
    seed: u64,
) -> Result<Vec<Vec<f64>>> {
    let qs = sample(rho, nsamples, seed)?;
    qs.par_iter()
        .map(|q| simulate_deterministic(*q, n, tau, u))
        .collect()
}

/// Pointwise band between the `(1−level)/2` and `(1+level)/2` empirical
/// quantiles of simulated trajectories.
pub fn credible_band(
    rho: &RhoParams,
    spec: &GridSpec,
    u: &[f64],
    level: f64,
    nsamples: usize,
    seed: u64,
    quad_order: usize,
) -> Result<CredibleBand> {
    if !(level > 0.0 && level < 1.0) {
        return Err(PopdiffError::Domain(format!(
            "credible level must lie in (0, 1), got {level}"
        )));
    }
    if nsamples < 100 {
        return Err(PopdiffError::Domain(format!(
            "credible bands need at least 100 samples, got {nsamples}"
        )));
    }
    let runs = sample_trajectories(rho, spec.n, spec.tau, u, nsamples, seed)?;
    let mean_output = simulate_population(rho, spec, u, quad_order)?;
    let (lower, upper) = band_from_runs(&runs, level);
    Ok(CredibleBand {
        level,
        lower,
        upper,
        mean_output,
        nsamples,
        seed,
    })
}

pub fn band_from_runs(runs: &[Vec<f64>], level: f64) -> (Vec<f64>, Vec<f64>) {
    let len = runs[0].len();
    let mut lower = Vec::with_capacity(len);
    let mut upper = Vec::with_capacity(len);
    let mut column = vec![0.0; runs.len()];
    for t in 0..len {
        for (c, r) in column.iter_mut().zip(runs) {
            *c = r[t];
        }
        column.sort_by(|a, b| a.total_cmp(b));
        lower.push(quantile_sorted(&column, 0.5 * (1.0 - level)));
        upper.push(quantile_sorted(&column, 0.5 * (1.0 + level)));
    }
    (lower, upper)
}

/// Surface value of the population state in each q-cell over time,
/// i.e. the tensor-basis state evaluated pointwise in q. One row per cell.
pub fn cell_surface_trajectories(
    rho: &RhoParams,
    spec: &GridSpec,
    u: &[f64],
    quad_order: usize,
) -> Result<Vec<Vec<f64>>> {
    let ops = assemble(spec, rho, quad_order)?;
    let sys = build_sampled(&ops, spec.tau)?;
    let traj = simulate(&sys, u)?;
    let bs = spec.block_size();
    Ok((0..spec.n_cells())
        .map(|c| traj.states.iter().map(|x| x[c * bs]).collect())
        .collect())
}
