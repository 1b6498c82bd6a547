//! Projected quasi-Newton minimization of the pooled cost.
//!
//! The nine entries of rho are mapped to unconstrained-or-boxed coordinates:
//! `a_i` stay raw and are projected onto their bounds, `b_i = a_i + w_i e^{s_i}`
//! keeps the box ordered, and `l_ii = L_FLOOR + c_i softplus(u_i)` keeps the
//! Cholesky diagonal above its floor. Trial points whose box leaves the
//! configured global rectangle, or whose density is degenerate, are treated
//! as failed trials and the line search backs off.

use nalgebra::{DMatrix, DVector};
use serde::{Deserialize, Serialize};

use crate::density::QPoint;
use crate::density::{RhoParams, L_FLOOR, N_RHO};
use crate::error::{PopdiffError, Result};
use crate::forward::{deterministic_system, Episode};
use crate::grid_basis::{GridSpec, QBox, Q1_FLOOR};
use crate::objective::{cost, episode_cost_grad, gradient_adjoint, ObjectiveOptions};

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct OptimizerOptions {
    /// Relative gradient tolerance: stop when ‖P∇‖ < gtol·(1 + cost).
    pub gtol: f64,
    /// Stop when an accepted step is shorter than this.
    pub xtol: f64,
    pub max_iter: usize,
    pub max_backtracks: usize,
    /// Sufficient-decrease constant.
    pub armijo: f64,
    /// Largest coordinate change allowed on the first step.
    pub initial_step: f64,
}

impl Default for OptimizerOptions {
    fn default() -> Self {
        OptimizerOptions {
            gtol: 1e-6,
            xtol: 1e-9,
            max_iter: 200,
            max_backtracks: 40,
            armijo: 1e-4,
            initial_step: 0.1,
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "kebab-case")]
pub enum FitStatus {
    Converged,
    MaxIterations,
    DegenerateDensity,
    LineSearchFailure,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TraceRow {
    pub iteration: usize,
    pub cost: f64,
    pub grad_norm: f64,
    pub step_norm: f64,
}

/// A smooth objective over coordinates `z`.
pub trait Problem {
    fn dim(&self) -> usize;
    fn cost(&mut self, z: &[f64]) -> Result<f64>;
    fn cost_grad(&mut self, z: &[f64]) -> Result<(f64, Vec<f64>)>;
}

#[derive(Debug, Clone)]
pub struct MinimizeResult {
    pub z: Vec<f64>,
    pub cost: f64,
    pub grad: Vec<f64>,
    pub trace: Vec<TraceRow>,
    pub status: FitStatus,
    pub n_cost_evals: usize,
    pub n_grad_evals: usize,
}

fn project(z: &mut [f64], lower: &[f64], upper: &[f64]) {
    for ((v, lo), hi) in z.iter_mut().zip(lower).zip(upper) {
        *v = v.clamp(*lo, *hi);
    }
}

/// Gradient with the components that push against an active bound removed.
fn projected_gradient(z: &[f64], g: &[f64], lower: &[f64], upper: &[f64]) -> Vec<f64> {
    z.iter()
        .zip(g)
        .zip(lower.iter().zip(upper))
        .map(|((&zi, &gi), (&lo, &hi))| {
            if (zi <= lo && gi > 0.0) || (zi >= hi && gi < 0.0) {
                0.0
            } else {
                gi
            }
        })
        .collect()
}

fn norm(v: &[f64]) -> f64 {
    v.iter().map(|x| x * x).sum::<f64>().sqrt()
}

/// Box-constrained BFGS with Powell-damped updates and a projected
/// backtracking line search. Only strict decreases are accepted.
pub fn minimize_box<P: Problem>(
    problem: &mut P,
    z0: &[f64],
    lower: &[f64],
    upper: &[f64],
    opts: &OptimizerOptions,
) -> MinimizeResult {
    let dim = problem.dim();
    let mut z = z0.to_vec();
    project(&mut z, lower, upper);
    let mut n_cost = 0;
    let mut n_grad = 1;
    let (mut f, mut g) = match problem.cost_grad(&z) {
        Ok(v) => v,
        Err(_) => {
            return MinimizeResult {
                z,
                cost: f64::NAN,
                grad: vec![f64::NAN; dim],
                trace: Vec::new(),
                status: FitStatus::DegenerateDensity,
                n_cost_evals: 0,
                n_grad_evals: 1,
            }
        }
    };
    let mut pg = projected_gradient(&z, &g, lower, upper);
    let mut trace = vec![TraceRow {
        iteration: 0,
        cost: f,
        grad_norm: norm(&pg),
        step_norm: 0.0,
    }];
    let ginf = pg.iter().fold(0.0f64, |m, v| m.max(v.abs()));
    let mut hess = DMatrix::<f64>::identity(dim, dim) * (ginf / opts.initial_step).max(1e-12);
    let mut first_update = true;
    let mut status = FitStatus::MaxIterations;

    for iter in 1..=opts.max_iter {
        if norm(&pg) < opts.gtol * (1.0 + f) {
            status = FitStatus::Converged;
            break;
        }
        let free: Vec<usize> = (0..dim)
            .filter(|&i| pg[i] != 0.0 || (z[i] > lower[i] && z[i] < upper[i]))
            .collect();
        let mut dir = vec![0.0; dim];
        let sub = DMatrix::from_fn(free.len(), free.len(), |r, c| hess[(free[r], free[c])]);
        let rhs = DVector::from_iterator(free.len(), free.iter().map(|&i| -pg[i]));
        match sub.cholesky() {
            Some(ch) => {
                let d = ch.solve(&rhs);
                for (k, &i) in free.iter().enumerate() {
                    dir[i] = d[k];
                }
            }
            None => {
                for &i in &free {
                    dir[i] = -pg[i];
                }
            }
        }
        let slope: f64 = dir.iter().zip(&g).map(|(d, gi)| d * gi).sum();
        if !(slope < 0.0) {
            hess = DMatrix::identity(dim, dim) * (ginf / opts.initial_step).max(1e-12);
            first_update = true;
            let scale = opts.initial_step / pg.iter().fold(1e-300f64, |m, v| m.max(v.abs()));
            dir = pg.iter().map(|v| -v * scale).collect();
        }

        // projected backtracking
        let mut alpha = 1.0;
        let mut accepted = None;
        for _ in 0..opts.max_backtracks {
            let mut trial: Vec<f64> = z.iter().zip(&dir).map(|(zi, di)| zi + alpha * di).collect();
            project(&mut trial, lower, upper);
            let step: Vec<f64> = trial.iter().zip(&z).map(|(a, b)| a - b).collect();
            let decrease: f64 = step.iter().zip(&g).map(|(s, gi)| s * gi).sum();
            n_cost += 1;
            match problem.cost(&trial) {
                Ok(ft) if ft.is_finite() && ft < f && ft <= f + opts.armijo * decrease => {
                    accepted = Some((trial, ft, step));
                    break;
                }
                Ok(_) => {}
                Err(e) if e.is_recoverable() => {}
                Err(_) => break,
            }
            alpha *= 0.5;
        }
        let Some((trial, _, step)) = accepted else {
            status = FitStatus::LineSearchFailure;
            break;
        };
        n_grad += 1;
        let (f_new, g_new) = match problem.cost_grad(&trial) {
            Ok(v) => v,
            Err(_) => {
                status = FitStatus::LineSearchFailure;
                break;
            }
        };
        let s = DVector::from_vec(step.clone());
        let y = DVector::from_iterator(dim, g_new.iter().zip(&g).map(|(a, b)| a - b));
        let step_norm = s.norm();
        z = trial;
        f = f_new;
        g = g_new;
        pg = projected_gradient(&z, &g, lower, upper);
        trace.push(TraceRow {
            iteration: iter,
            cost: f,
            grad_norm: norm(&pg),
            step_norm,
        });

        // damped BFGS update of the Hessian model
        let sy = s.dot(&y);
        if first_update && sy > 0.0 {
            hess = DMatrix::identity(dim, dim) * (y.dot(&y) / sy);
            first_update = false;
        }
        let bs = &hess * &s;
        let sbs = s.dot(&bs);
        if sbs > 0.0 {
            let theta = if sy >= 0.2 * sbs {
                1.0
            } else {
                0.8 * sbs / (sbs - sy)
            };
            let r = &y * theta + &bs * (1.0 - theta);
            let sr = s.dot(&r);
            if sr > 0.0 {
                hess = hess - (&bs * bs.transpose()) / sbs + (&r * r.transpose()) / sr;
            }
        }

        if step_norm < opts.xtol {
            status = FitStatus::Converged;
            break;
        }
    }
    if status == FitStatus::MaxIterations && norm(&pg) < opts.gtol * (1.0 + f) {
        status = FitStatus::Converged;
    }
    MinimizeResult {
        z,
        cost: f,
        grad: g,
        trace,
        status,
        n_cost_evals: n_cost,
        n_grad_evals: n_grad,
    }
}

fn softplus(u: f64) -> f64 {
    if u > 30.0 {
        u
    } else {
        u.exp().ln_1p()
    }
}

fn sigmoid(u: f64) -> f64 {
    1.0 / (1.0 + (-u).exp())
}

fn softplus_inv(v: f64) -> f64 {
    if v > 30.0 {
        v
    } else {
        v.exp_m1().ln()
    }
}

/// Map between rho and the optimizer's coordinates, anchored at an initial
/// point so that the initial coordinates are O(1).
#[derive(Debug, Clone, Copy)]
pub struct RhoTransform {
    pub global_box: QBox,
    width_scale: [f64; 2],
    l_scale: [f64; 2],
}

impl RhoTransform {
    pub fn new(anchor: &RhoParams, global_box: QBox) -> Self {
        RhoTransform {
            global_box,
            width_scale: [anchor.b1 - anchor.a1, anchor.b2 - anchor.a2],
            l_scale: [
                (anchor.l11 - L_FLOOR).max(1e-3) / std::f64::consts::LN_2,
                (anchor.l22 - L_FLOOR).max(1e-3) / std::f64::consts::LN_2,
            ],
        }
    }

    pub fn to_z(&self, rho: &RhoParams) -> Vec<f64> {
        vec![
            rho.a1,
            ((rho.b1 - rho.a1) / self.width_scale[0]).ln(),
            rho.a2,
            ((rho.b2 - rho.a2) / self.width_scale[1]).ln(),
            rho.mu1,
            rho.mu2,
            softplus_inv((rho.l11 - L_FLOOR).max(1e-300) / self.l_scale[0]),
            rho.l21,
            softplus_inv((rho.l22 - L_FLOOR).max(1e-300) / self.l_scale[1]),
        ]
    }

    pub fn to_rho(&self, z: &[f64]) -> RhoParams {
        RhoParams {
            a1: z[0],
            b1: z[0] + self.width_scale[0] * z[1].exp(),
            a2: z[2],
            b2: z[2] + self.width_scale[1] * z[3].exp(),
            mu1: z[4],
            mu2: z[5],
            l11: L_FLOOR + self.l_scale[0] * softplus(z[6]),
            l21: z[7],
            l22: L_FLOOR + self.l_scale[1] * softplus(z[8]),
        }
    }

    /// `dJ/dz` from `dJ/dρ`.
    pub fn chain(&self, z: &[f64], grad_rho: &[f64]) -> Vec<f64> {
        let g = grad_rho;
        vec![
            g[0] + g[1],
            g[1] * self.width_scale[0] * z[1].exp(),
            g[2] + g[3],
            g[3] * self.width_scale[1] * z[3].exp(),
            g[4],
            g[5],
            g[6] * self.l_scale[0] * sigmoid(z[6]),
            g[7],
            g[8] * self.l_scale[1] * sigmoid(z[8]),
        ]
    }

    pub fn bounds(&self) -> (Vec<f64>, Vec<f64>) {
        let gb = &self.global_box;
        let mut lower = vec![f64::NEG_INFINITY; N_RHO];
        let mut upper = vec![f64::INFINITY; N_RHO];
        lower[0] = gb.a1.max(Q1_FLOOR);
        upper[0] = gb.b1;
        lower[2] = gb.a2.max(0.0);
        upper[2] = gb.b2;
        (lower, upper)
    }

    /// Fails when the box of `rho` sticks out of the global rectangle.
    pub fn check_feasible(&self, rho: &RhoParams) -> Result<()> {
        if !rho.qbox().within(&self.global_box) {
            return Err(PopdiffError::InvalidParameter(format!(
                "support box {:?} leaves the admissible region {:?}",
                rho.qbox(),
                self.global_box
            )));
        }
        rho.validate()
    }
}

struct PopulationProblem<'a> {
    spec: &'a GridSpec,
    episodes: &'a [Episode],
    objective: &'a ObjectiveOptions,
    transform: RhoTransform,
}

impl Problem for PopulationProblem<'_> {
    fn dim(&self) -> usize {
        N_RHO
    }

    fn cost(&mut self, z: &[f64]) -> Result<f64> {
        let rho = self.transform.to_rho(z);
        self.transform.check_feasible(&rho)?;
        cost(&rho, self.spec, self.episodes, self.objective)
    }

    fn cost_grad(&mut self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let rho = self.transform.to_rho(z);
        self.transform.check_feasible(&rho)?;
        let rep = gradient_adjoint(&rho, self.spec, self.episodes, self.objective)?;
        Ok((rep.cost, self.transform.chain(z, &rep.grad)))
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct FitResult {
    pub rho_hat: RhoParams,
    pub cost_trace: Vec<TraceRow>,
    pub status: FitStatus,
    pub n_cost_evals: usize,
    pub n_grad_evals: usize,
}

impl FitResult {
    pub fn final_cost(&self) -> f64 {
        self.cost_trace.last().map_or(f64::NAN, |r| r.cost)
    }
}

/// Fits the population law to the pooled episodes starting from `init`.
pub fn fit(
    episodes: &[Episode],
    spec: &GridSpec,
    init: &RhoParams,
    global_box: QBox,
    objective: &ObjectiveOptions,
    opts: &OptimizerOptions,
) -> Result<FitResult> {
    if episodes.is_empty() {
        return Err(PopdiffError::Domain(
            "fit needs at least one episode".into(),
        ));
    }
    let transform = RhoTransform::new(init, global_box);
    transform.check_feasible(init)?;
    let (lower, upper) = transform.bounds();
    let z0 = transform.to_z(init);
    let mut problem = PopulationProblem {
        spec,
        episodes,
        objective,
        transform,
    };
    let res = minimize_box(&mut problem, &z0, &lower, &upper, opts);
    let rho_hat = if res.trace.is_empty() {
        *init
    } else {
        transform.to_rho(&res.z)
    };
    Ok(FitResult {
        rho_hat,
        cost_trace: res.trace,
        status: res.status,
        n_cost_evals: res.n_cost_evals,
        n_grad_evals: res.n_grad_evals,
    })
}

struct DeterministicProblem<'a> {
    episode: &'a Episode,
    n: usize,
}

impl Problem for DeterministicProblem<'_> {
    fn dim(&self) -> usize {
        2
    }

    fn cost(&mut self, z: &[f64]) -> Result<f64> {
        Ok(self.cost_grad(z)?.0)
    }

    fn cost_grad(&mut self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
        let sys = deterministic_system(QPoint::new(z[0], z[1]), self.n, self.episode.tau, true)?;
        episode_cost_grad(&sys, self.episode)
    }
}

/// Least-squares fit of a single `(q1, q2)` to one episode, with
/// `q1 ≥ Q1_FLOOR` and `q2 ≥ 0`.
pub fn fit_deterministic(
    episode: &Episode,
    n: usize,
    init: QPoint,
    opts: &OptimizerOptions,
) -> Result<(QPoint, f64, FitStatus)> {
    episode.validate()?;
    if !(init.q1 > Q1_FLOOR) {
        return Err(PopdiffError::InvalidParameter(format!(
            "initial diffusivity {} must exceed {Q1_FLOOR}",
            init.q1
        )));
    }
    let mut problem = DeterministicProblem { episode, n };
    let res = minimize_box(
        &mut problem,
        &[init.q1, init.q2],
        &[Q1_FLOOR, 0.0],
        &[f64::INFINITY, f64::INFINITY],
        opts,
    );
    if res.trace.is_empty() {
        return Err(PopdiffError::InvalidParameter(
            "deterministic model could not be evaluated at the initial point".into(),
        ));
    }
    Ok((QPoint::new(res.z[0], res.z[1]), res.cost, res.status))
}

/// Settings for the moment-based starting point.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(default, deny_unknown_fields)]
pub struct InitOptions {
    /// Starting point of each per-episode deterministic fit.
    pub q_start: (f64, f64),
    /// Box margin as a fraction of the spread of fitted values.
    pub margin_frac: f64,
    /// Smallest half-width of the initial box, relative to the mean.
    pub min_half_width_frac: f64,
}

impl Default for InitOptions {
    fn default() -> Self {
        InitOptions {
            q_start: (0.5, 1.0),
            margin_frac: 0.1,
            min_half_width_frac: 0.25,
        }
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct Initialization {
    pub rho: RhoParams,
    /// Per-episode deterministic estimates; `None` where the fit failed.
    pub fitted: Vec<Option<QPoint>>,
    pub warnings: Vec<String>,
}

/// Moment-based starting point: fit each episode deterministically, centre the
/// law at the sample mean, pad the range of fitted values into a box, and
/// take independent components with standard deviation one sixth of each
/// box edge.
pub fn initialize(
    episodes: &[Episode],
    spec: &GridSpec,
    global_box: QBox,
    init_opts: &InitOptions,
    opts: &OptimizerOptions,
) -> Result<Initialization> {
    if episodes.len() < 2 {
        return Err(PopdiffError::Domain(format!(
            "initialization needs at least 2 episodes, got {}",
            episodes.len()
        )));
    }
    let start = QPoint::new(init_opts.q_start.0, init_opts.q_start.1);
    let mut warnings = Vec::new();
    let fitted: Vec<Option<QPoint>> = episodes
        .iter()
        .map(|ep| match fit_deterministic(ep, spec.n, start, opts) {
            Ok((q, c, status)) if c.is_finite() && status != FitStatus::DegenerateDensity => {
                Some(q)
            }
            Ok((_, _, status)) => {
                warnings.push(format!(
                    "episode `{}`: deterministic fit ended with {status:?}",
                    ep.id
                ));
                None
            }
            Err(e) => {
                warnings.push(format!(
                    "episode `{}`: deterministic fit failed: {e}",
                    ep.id
                ));
                None
            }
        })
        .collect();
    let good: Vec<QPoint> = fitted.iter().flatten().copied().collect();
    if good.len() < fitted.len() || good.is_empty() {
        warnings.push("falling back to the global box for initialization".into());
        let gb = global_box;
        let qbox = QBox::new(gb.a1.max(Q1_FLOOR), gb.b1, gb.a2.max(0.0), gb.b2);
        let rho = RhoParams::independent(
            qbox,
            (0.5 * (qbox.a1 + qbox.b1), 0.5 * (qbox.a2 + qbox.b2)),
            ((qbox.b1 - qbox.a1) / 6.0, (qbox.b2 - qbox.a2) / 6.0),
        );
        return Ok(Initialization {
            rho,
            fitted,
            warnings,
        });
    }
    let count = good.len() as f64;
    let mean1 = good.iter().map(|q| q.q1).sum::<f64>() / count;
    let mean2 = good.iter().map(|q| q.q2).sum::<f64>() / count;
    let axis = |vals: Vec<f64>, mean: f64, floor: f64, lo_lim: f64, hi_lim: f64| -> (f64, f64) {
        let lo = vals.iter().copied().fold(f64::INFINITY, f64::min);
        let hi = vals.iter().copied().fold(f64::NEG_INFINITY, f64::max);
        let margin = (init_opts.margin_frac * (hi - lo))
            .max(init_opts.min_half_width_frac * mean.abs())
            .max(1e-3);
        let a = (lo - margin).max(floor).max(lo_lim);
        let b = (hi + margin).min(hi_lim);
        (a, b.max(a + 1e-3))
    };
    let (a1, b1) = axis(
        good.iter().map(|q| q.q1).collect(),
        mean1,
        Q1_FLOOR,
        global_box.a1,
        global_box.b1,
    );
    let (a2, b2) = axis(
        good.iter().map(|q| q.q2).collect(),
        mean2,
        0.0,
        global_box.a2,
        global_box.b2,
    );
    let rho = RhoParams {
        a1,
        b1,
        a2,
        b2,
        mu1: mean1.clamp(a1, b1),
        mu2: mean2.clamp(a2, b2),
        l11: ((b1 - a1) / 6.0).max(L_FLOOR),
        l21: 0.0,
        l22: ((b2 - a2) / 6.0).max(L_FLOOR),
    };
    Ok(Initialization {
        rho,
        fitted,
        warnings,
    })
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::forward::simulate_deterministic;

    struct Quadratic {
        center: Vec<f64>,
        evals: usize,
    }

    impl Problem for Quadratic {
        fn dim(&self) -> usize {
            self.center.len()
        }
        fn cost(&mut self, z: &[f64]) -> Result<f64> {
            Ok(self.cost_grad(z)?.0)
        }
        fn cost_grad(&mut self, z: &[f64]) -> Result<(f64, Vec<f64>)> {
            self.evals += 1;
            let mut f = 0.0;
            let mut g = Vec::new();
            for (i, (zi, ci)) in z.iter().zip(&self.center).enumerate() {
                let w = (i + 1) as f64;
                f += w * (zi - ci).powi(2);
                g.push(2.0 * w * (zi - ci));
            }
            Ok((f, g))
        }
    }

    #[test]
    fn bounded_quadratic() {
        let mut p = Quadratic {
            center: vec![1.0, -2.0, 3.0],
            evals: 0,
        };
        let res = minimize_box(
            &mut p,
            &[0.0, 0.0, 0.0],
            &[f64::NEG_INFINITY, -1.0, f64::NEG_INFINITY],
            &[f64::INFINITY, f64::INFINITY, 2.5],
            &OptimizerOptions::default(),
        );
        assert_eq!(res.status, FitStatus::Converged);
        assert!((res.z[0] - 1.0).abs() < 1e-6);
        assert_eq!(res.z[1], -1.0);
        assert_eq!(res.z[2], 2.5);
        for w in res.trace.windows(2) {
            assert!(w[1].cost < w[0].cost);
        }
    }

    #[test]
    fn starts_at_minimizer() {
        let mut p = Quadratic {
            center: vec![1.0, 2.0],
            evals: 0,
        };
        let res = minimize_box(
            &mut p,
            &[1.0, 2.0],
            &[f64::NEG_INFINITY; 2],
            &[f64::INFINITY; 2],
            &OptimizerOptions::default(),
        );
        assert_eq!(res.status, FitStatus::Converged);
        assert_eq!(res.trace.len(), 1);
        assert_eq!(p.evals, 1);
    }

    #[test]
    fn transform_roundtrip_and_chain_rule() {
        let rho = RhoParams {
            a1: 0.2,
            b1: 1.4,
            a2: 0.1,
            b2: 2.0,
            mu1: 0.7,
            mu2: 1.1,
            l11: 0.25,
            l21: 0.08,
            l22: 0.4,
        };
        let t = RhoTransform::new(&rho, QBox::new(0.0, 5.0, 0.0, 5.0));
        let z = t.to_z(&rho);
        let back = t.to_rho(&z);
        for (a, b) in back.to_array().iter().zip(rho.to_array()) {
            assert!((a - b).abs() < 1e-14);
        }
        // J(ρ) = Σ c_k ρ_k²: compare chain rule with FD in z
        let c: Vec<f64> = (0..N_RHO).map(|k| 0.3 + k as f64).collect();
        let j = |r: &RhoParams| {
            r.to_array()
                .iter()
                .zip(&c)
                .map(|(v, ck)| ck * v * v)
                .sum::<f64>()
        };
        let grad_rho: Vec<f64> = rho
            .to_array()
            .iter()
            .zip(&c)
            .map(|(v, ck)| 2.0 * ck * v)
            .collect();
        let gz = t.chain(&z, &grad_rho);
        for k in 0..N_RHO {
            let h = 1e-6;
            let mut zp = z.clone();
            zp[k] += h;
            let mut zm = z.clone();
            zm[k] -= h;
            let fd = (j(&t.to_rho(&zp)) - j(&t.to_rho(&zm))) / (2.0 * h);
            assert!(
                (fd - gz[k]).abs() < 1e-6 * fd.abs().max(1.0),
                "{k}: {fd} {}",
                gz[k]
            );
        }
    }

    fn pulses(len: usize) -> Vec<f64> {
        (0..len)
            .map(|j| {
                let t = j as f64 / 12.0;
                if (0.25..1.5).contains(&t) {
                    1.0
                } else if (2.0..2.5).contains(&t) {
                    0.5
                } else {
                    0.0
                }
            })
            .collect()
    }

    #[test]
    fn deterministic_fit_recovers_truth() {
        let tau = 1.0 / 12.0;
        let q = QPoint::new(0.6, 1.2);
        let u = pulses(60);
        let y = simulate_deterministic(q, 8, tau, &u).unwrap();
        let ep = Episode::new("d", tau, u, y).unwrap();
        let (fitted, c, _) =
            fit_deterministic(&ep, 8, QPoint::new(0.3, 0.5), &OptimizerOptions::default()).unwrap();
        assert!(c < 1e-10);
        assert!((fitted.q1 - q.q1).abs() < 1e-3 * q.q1, "{fitted:?}");
        assert!((fitted.q2 - q.q2).abs() < 1e-3 * q.q2, "{fitted:?}");
    }

    #[test]
    fn deterministic_fit_flat_on_zero_data() {
        let ep = Episode::new("z", 0.1, vec![0.0; 10], vec![0.0; 11]).unwrap();
        let init = QPoint::new(0.4, 0.9);
        let (q, c, status) = fit_deterministic(&ep, 6, init, &OptimizerOptions::default()).unwrap();
        assert_eq!(q, init);
        assert_eq!(c, 0.0);
        assert_eq!(status, FitStatus::Converged);
    }

    #[test]
    fn fitted_gain_scales_with_amplitude() {
        let tau = 1.0 / 12.0;
        let q = QPoint::new(0.5, 1.0);
        let u = pulses(50);
        let y = simulate_deterministic(q, 6, tau, &u).unwrap();
        let y3: Vec<f64> = y.iter().map(|v| 3.0 * v).collect();
        let opts = OptimizerOptions::default();
        let (f1, _, _) = fit_deterministic(
            &Episode::new("a", tau, u.clone(), y).unwrap(),
            6,
            QPoint::new(0.4, 0.8),
            &opts,
        )
        .unwrap();
        let (f3, _, _) = fit_deterministic(
            &Episode::new("b", tau, u, y3).unwrap(),
            6,
            QPoint::new(0.4, 0.8),
            &opts,
        )
        .unwrap();
        assert!((f3.q1 - f1.q1).abs() < 1e-3 * f1.q1);
        assert!((f3.q2 - 3.0 * f1.q2).abs() < 1e-3 * f3.q2);
    }
}
