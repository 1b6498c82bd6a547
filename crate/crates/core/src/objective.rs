//! Naive-pooled least-squares cost over all episodes and its gradient by the
//! discrete adjoint recursion, with central differences as a cross-check.

use nalgebra::DVector;
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::assembly::{assemble, assemble_with_grad, check_gamma_floor, DEFAULT_CELL_ORDER};
use crate::density::{RhoParams, N_RHO};
use crate::error::{PopdiffError, Result};
use crate::forward::{simulate, Episode};
use crate::grid_basis::GridSpec;
use crate::sampled_system::{build_sampled, build_with_sensitivities, SampledSystem};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct ObjectiveOptions {
    /// Gauss–Legendre order per axis inside each q-cell.
    pub quad_order: usize,
    /// Reject iterates whose density is too flat somewhere on the box.
    pub enforce_gamma_floor: bool,
}

impl Default for ObjectiveOptions {
    fn default() -> Self {
        ObjectiveOptions {
            quad_order: DEFAULT_CELL_ORDER,
            enforce_gamma_floor: true,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum GradientMethod {
    Adjoint,
    FiniteDifference,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct CostReport {
    pub cost: f64,
    pub grad: Vec<f64>,
    pub per_episode: Vec<(String, f64)>,
    pub method: GradientMethod,
}

fn check_episodes(spec: &GridSpec, episodes: &[Episode]) -> Result<()> {
    for ep in episodes {
        ep.validate()?;
        if (ep.tau - spec.tau).abs() > 1e-12 * spec.tau {
            return Err(PopdiffError::Domain(format!(
                "episode `{}` sampled at τ = {} but the grid uses τ = {}",
                ep.id, ep.tau, spec.tau
            )));
        }
    }
    Ok(())
}

fn episode_cost(sys: &SampledSystem, ep: &Episode) -> Result<f64> {
    let traj = simulate(sys, &ep.u).map_err(|e| tag(e, ep))?;
    Ok(traj
        .outputs
        .iter()
        .zip(&ep.y_obs)
        .map(|(y, o)| (y - o) * (y - o))
        .sum())
}

fn tag(e: PopdiffError, ep: &Episode) -> PopdiffError {
    match e {
        PopdiffError::SimulationDivergence { step, .. } => PopdiffError::SimulationDivergence {
            episode: ep.id.clone(),
            step,
        },
        other => other.in_episode(&ep.id),
    }
}

/// Cost of one episode and its gradient over the parameters carried by
/// `sys`, by the backward adjoint recursion
/// `λ_{j-1} = Âᵀλ_j + 2 r_{j-1} Ĉᵀ`, `λ_μ = 2 r_μ Ĉᵀ`.
pub fn episode_cost_grad(sys: &SampledSystem, ep: &Episode) -> Result<(f64, Vec<f64>)> {
    let traj = simulate(sys, &ep.u).map_err(|e| tag(e, ep))?;
    let bs = sys.block_size();
    let np = sys.n_params;
    let resid: Vec<f64> = traj
        .outputs
        .iter()
        .zip(&ep.y_obs)
        .map(|(y, o)| y - o)
        .collect();
    let cost = resid.iter().map(|r| r * r).sum();
    let mut grad = vec![0.0; np];
    let mu = ep.steps();

    // output map depends on the parameters too
    for (j, x) in traj.states.iter().enumerate() {
        if resid[j] == 0.0 {
            continue;
        }
        for (c, b) in sys.blocks.iter().enumerate() {
            let xc = x.rows(c * bs, bs);
            for (k, g) in grad.iter_mut().enumerate() {
                *g += 2.0 * resid[j] * b.d_chat[k].dot(&xc);
            }
        }
    }

    let mut lam: Vec<DVector<f64>> = sys
        .blocks
        .iter()
        .map(|b| &b.chat * (2.0 * resid[mu]))
        .collect();
    for j in (1..=mu).rev() {
        let x_prev = &traj.states[j - 1];
        let u_prev = ep.u[j - 1];
        for (c, b) in sys.blocks.iter().enumerate() {
            let xc = x_prev.rows(c * bs, bs);
            let lc = &lam[c];
            for (k, g) in grad.iter_mut().enumerate() {
                *g += lc.dot(&(&b.d_ahat[k] * xc)) + u_prev * lc.dot(&b.d_bhat[k]);
            }
        }
        for (c, b) in sys.blocks.iter().enumerate() {
            let next = b.ahat.tr_mul(&lam[c]) + &b.chat * (2.0 * resid[j - 1]);
            lam[c] = next;
        }
    }
    Ok((cost, grad))
}

/// Sum of squared residuals of `sys` against every episode.
pub fn system_cost(sys: &SampledSystem, episodes: &[Episode]) -> Result<(f64, Vec<(String, f64)>)> {
    let per: Vec<f64> = episodes
        .par_iter()
        .map(|ep| episode_cost(sys, ep))
        .collect::<Result<_>>()?;
    let total = per.iter().sum();
    Ok((
        total,
        episodes.iter().map(|e| e.id.clone()).zip(per).collect(),
    ))
}

/// Cost and adjoint gradient of `sys` against every episode.
pub fn system_cost_grad(sys: &SampledSystem, episodes: &[Episode]) -> Result<CostReport> {
    let per: Vec<(f64, Vec<f64>)> = episodes
        .par_iter()
        .map(|ep| episode_cost_grad(sys, ep))
        .collect::<Result<_>>()?;
    let mut grad = vec![0.0; sys.n_params];
    let mut cost = 0.0;
    for (c, g) in &per {
        cost += c;
        for (a, b) in grad.iter_mut().zip(g) {
            *a += b;
        }
    }
    Ok(CostReport {
        cost,
        grad,
        per_episode: episodes
            .iter()
            .map(|e| e.id.clone())
            .zip(per.iter().map(|p| p.0))
            .collect(),
        method: GradientMethod::Adjoint,
    })
}

fn population_system(
    rho: &RhoParams,
    spec: &GridSpec,
    opts: &ObjectiveOptions,
    with_grad: bool,
) -> Result<SampledSystem> {
    let ops = if with_grad {
        assemble_with_grad(spec, rho, opts.quad_order)?
    } else {
        assemble(spec, rho, opts.quad_order)?
    };
    if opts.enforce_gamma_floor {
        check_gamma_floor(&ops, rho)?;
    }
    if with_grad {
        build_with_sensitivities(&ops, spec.tau)
    } else {
        build_sampled(&ops, spec.tau)
    }
}

/// `J(ρ) = Σ_i Σ_j (ψ_ij − ỹ_ij)²` with unit weights, `j` running from 0.
pub fn cost(
    rho: &RhoParams,
    spec: &GridSpec,
    episodes: &[Episode],
    opts: &ObjectiveOptions,
) -> Result<f64> {
    check_episodes(spec, episodes)?;
    let sys = population_system(rho, spec, opts, false)?;
    Ok(system_cost(&sys, episodes)?.0)
}

pub fn gradient_adjoint(
    rho: &RhoParams,
    spec: &GridSpec,
    episodes: &[Episode],
    opts: &ObjectiveOptions,
) -> Result<CostReport> {
    check_episodes(spec, episodes)?;
    let sys = population_system(rho, spec, opts, true)?;
    system_cost_grad(&sys, episodes)
}

/// Central differences with per-component step `step·(1 + |ρ_k|)`.
pub fn gradient_fd(
    rho: &RhoParams,
    spec: &GridSpec,
    episodes: &[Episode],
    step: f64,
    opts: &ObjectiveOptions,
) -> Result<CostReport> {
    if !(step > 0.0) {
        return Err(PopdiffError::Domain(format!(
            "finite-difference step must be positive, got {step}"
        )));
    }
    check_episodes(spec, episodes)?;
    let sys = population_system(rho, spec, opts, false)?;
    let (total, per_episode) = system_cost(&sys, episodes)?;
    let base = rho.to_array();
    let grad = (0..N_RHO)
        .map(|k| {
            let h = step * (1.0 + base[k].abs());
            let mut plus = base;
            plus[k] += h;
            let mut minus = base;
            minus[k] -= h;
            let fp = cost(&RhoParams::from_array(&plus), spec, episodes, opts)?;
            let fm = cost(&RhoParams::from_array(&minus), spec, episodes, opts)?;
            Ok((fp - fm) / (2.0 * h))
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(CostReport {
        cost: total,
        grad,
        per_episode,
        method: GradientMethod::FiniteDifference,
    })
}

/// Largest componentwise relative gap between two gradients, relative
/// to `max(|b_k|, floor·‖b‖∞)`.
pub fn max_relative_error(a: &[f64], b: &[f64], floor: f64) -> f64 {
    let scale = b.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs() / y.abs().max(floor * scale).max(f64::MIN_POSITIVE))
        .fold(0.0, f64::max)
}
