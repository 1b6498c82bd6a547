//! Truncated bivariate normal law of `(q1, q2)` on a rectangle, with
//! covariance `Σ = L Lᵀ` for lower-triangular `L`.

use nalgebra::Matrix2;
use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use serde::{Deserialize, Serialize};
use std::f64::consts::PI;

use crate::error::{PopdiffError, Result};
use crate::grid_basis::{QBox, Q1_FLOOR};
use crate::quadrature::GaussLegendre;

/// Lower bound on the diagonal of the Cholesky factor.
pub const L_FLOOR: f64 = 1e-4;
/// Normalizations below this mean the mass has left the box.
pub const NORMALIZATION_FLOOR: f64 = 1e-12;
/// Default Gauss–Legendre order per axis for the normalization.
pub const DEFAULT_NORMALIZATION_ORDER: usize = 24;

/// Number of entries in [`RhoParams`].
pub const N_RHO: usize = 9;

pub const IDX_A1: usize = 0;
pub const IDX_B1: usize = 1;
pub const IDX_A2: usize = 2;
pub const IDX_B2: usize = 3;
pub const IDX_MU1: usize = 4;
pub const IDX_MU2: usize = 5;
pub const IDX_L11: usize = 6;
pub const IDX_L21: usize = 7;
pub const IDX_L22: usize = 8;

pub const RHO_NAMES: [&str; N_RHO] = ["a1", "b1", "a2", "b2", "mu1", "mu2", "l11", "l21", "l22"];

/// Estimation vector `(a1, b1, a2, b2, mu1, mu2, l11, l21, l22)`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RhoParams {
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
    pub mu1: f64,
    pub mu2: f64,
    pub l11: f64,
    pub l21: f64,
    pub l22: f64,
}

/// A single realization of the random parameters.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QPoint {
    /// Dimensionless diffusivity.
    pub q1: f64,
    /// Dimensionless input gain.
    pub q2: f64,
}

impl QPoint {
    pub fn new(q1: f64, q2: f64) -> Self {
        QPoint { q1, q2 }
    }
}

impl RhoParams {
    pub fn to_array(&self) -> [f64; N_RHO] {
        [
            self.a1, self.b1, self.a2, self.b2, self.mu1, self.mu2, self.l11, self.l21, self.l22,
        ]
    }

    pub fn from_array(v: &[f64]) -> Self {
        assert_eq!(v.len(), N_RHO, "rho vector must have nine entries");
        RhoParams {
            a1: v[0],
            b1: v[1],
            a2: v[2],
            b2: v[3],
            mu1: v[4],
            mu2: v[5],
            l11: v[6],
            l21: v[7],
            l22: v[8],
        }
    }

    /// Independent components with the given standard deviations.
    pub fn independent(qbox: QBox, mu: (f64, f64), sd: (f64, f64)) -> Self {
        RhoParams {
            a1: qbox.a1,
            b1: qbox.b1,
            a2: qbox.a2,
            b2: qbox.b2,
            mu1: mu.0,
            mu2: mu.1,
            l11: sd.0,
            l21: 0.0,
            l22: sd.1,
        }
    }

    pub fn qbox(&self) -> QBox {
        QBox::new(self.a1, self.b1, self.a2, self.b2)
    }

    pub fn validate(&self) -> Result<()> {
        if self.to_array().iter().any(|v| !v.is_finite()) {
            return Err(PopdiffError::InvalidParameter(format!(
                "non-finite entry in {self:?}"
            )));
        }
        self.qbox().validate()?;
        if self.a2 < 0.0 {
            return Err(PopdiffError::InvalidParameter(format!(
                "a2 = {} must be nonnegative",
                self.a2
            )));
        }
        if self.l11 < L_FLOOR || self.l22 < L_FLOOR {
            return Err(PopdiffError::InvalidParameter(format!(
                "Cholesky diagonal ({}, {}) below floor {L_FLOOR}",
                self.l11, self.l22
            )));
        }
        Ok(())
    }

    pub fn sigma(&self) -> Result<Matrix2<f64>> {
        sigma_from_l(self)
    }
}

/// `Σ = L Lᵀ`.
pub fn sigma_from_l(rho: &RhoParams) -> Result<Matrix2<f64>> {
    if !(rho.l11 >= L_FLOOR && rho.l22 >= L_FLOOR) || !rho.l21.is_finite() {
        return Err(PopdiffError::InvalidParameter(format!(
            "Cholesky diagonal ({}, {}) below floor {L_FLOOR}",
            rho.l11, rho.l22
        )));
    }
    let off = rho.l11 * rho.l21;
    Ok(Matrix2::new(
        rho.l11 * rho.l11,
        off,
        off,
        rho.l21 * rho.l21 + rho.l22 * rho.l22,
    ))
}

/// Whitened coordinates `z = L⁻¹(q − μ)`.
#[inline]
fn whiten(q1: f64, q2: f64, rho: &RhoParams) -> (f64, f64) {
    let z1 = (q1 - rho.mu1) / rho.l11;
    let z2 = (q2 - rho.mu2 - rho.l21 * z1) / rho.l22;
    (z1, z2)
}

/// Untruncated bivariate normal pdf.
#[inline]
pub fn normal_pdf(q1: f64, q2: f64, rho: &RhoParams) -> f64 {
    let (z1, z2) = whiten(q1, q2, rho);
    (-0.5 * (z1 * z1 + z2 * z2)).exp() / (2.0 * PI * rho.l11 * rho.l22)
}

/// Untruncated pdf together with the gradients of `log φ` with respect to
/// `(mu1, mu2, l11, l21, l22)` and `(q1, q2)`.
#[derive(Debug, Clone, Copy)]
pub struct PdfWithGrad {
    pub value: f64,
    /// d log φ / d(mu1, mu2, l11, l21, l22)
    pub dlog_theta: [f64; 5],
    /// d log φ / d(q1, q2)
    pub dlog_q: [f64; 2],
}

pub fn normal_pdf_with_grad(q1: f64, q2: f64, rho: &RhoParams) -> PdfWithGrad {
    let (z1, z2) = whiten(q1, q2, rho);
    let value = (-0.5 * (z1 * z1 + z2 * z2)).exp() / (2.0 * PI * rho.l11 * rho.l22);
    let (l11, l21, l22) = (rho.l11, rho.l21, rho.l22);
    // dz/dmu1, dz/dmu2
    let dz_mu1 = (-1.0 / l11, l21 / (l11 * l22));
    let dz_mu2 = (0.0, -1.0 / l22);
    let dz_l11 = (-z1 / l11, l21 * z1 / (l11 * l22));
    let dz_l21 = (0.0, -z1 / l22);
    let dz_l22 = (0.0, -z2 / l22);
    let quad = |d: (f64, f64)| -(z1 * d.0 + z2 * d.1);
    let dlog_theta = [
        quad(dz_mu1),
        quad(dz_mu2),
        quad(dz_l11) - 1.0 / l11,
        quad(dz_l21),
        quad(dz_l22) - 1.0 / l22,
    ];
    let dlog_q = [-quad(dz_mu1), -quad(dz_mu2)];
    PdfWithGrad {
        value,
        dlog_theta,
        dlog_q,
    }
}

/// Composite Gauss rule along one edge of the support box, in reference
/// coordinates on [0, 1] so derivatives with respect to the box edges follow
/// by the chain rule.
struct EdgeRule {
    s: Vec<f64>,
    /// Weights summing to 1.
    w: Vec<f64>,
}

/// Panels per marginal standard deviation span; keeps the per-panel rule
/// accurate when the box is wide compared with the spread.
const SDS_PER_PANEL: f64 = 4.0;
const MAX_PANELS: usize = 64;

impl EdgeRule {
    fn new(order: usize, width: f64, sd: f64) -> Self {
        let g = GaussLegendre::new(order);
        let panels = ((width / (SDS_PER_PANEL * sd)).ceil() as usize).clamp(1, MAX_PANELS);
        let mut s = Vec::with_capacity(order * panels);
        let mut w = Vec::with_capacity(order * panels);
        for p in 0..panels {
            for (x, wx) in g.nodes.iter().zip(&g.weights) {
                s.push((p as f64 + 0.5 * (x + 1.0)) / panels as f64);
                w.push(0.5 * wx / panels as f64);
            }
        }
        EdgeRule { s, w }
    }
}

/// Normalization constant and its gradient over all nine entries of rho.
fn normalization_with_grad_scaled(
    rho: &RhoParams,
    order: usize,
    scale: f64,
) -> (f64, [f64; N_RHO]) {
    let (h1, h2) = (rho.b1 - rho.a1, rho.b2 - rho.a2);
    let sd1 = rho.l11;
    let sd2 = (rho.l21 * rho.l21 + rho.l22 * rho.l22).sqrt();
    let rule1 = EdgeRule::new(order, h1, sd1);
    let rule2 = EdgeRule::new(order, h2, sd2);
    let area = h1 * h2;
    let mut z = 0.0;
    let mut grad = [0.0; N_RHO];
    for (&s1, &w1) in rule1.s.iter().zip(&rule1.w) {
        let q1 = rho.a1 + h1 * s1;
        for (&s2, &w2) in rule2.s.iter().zip(&rule2.w) {
            let q2 = rho.a2 + h2 * s2;
            let p = normal_pdf_with_grad(q1, q2, rho);
            let phi = scale * p.value;
            let w = w1 * w2;
            z += w * area * phi;
            // moving nodes and the Jacobian `area`
            let dq1 = phi * p.dlog_q[0];
            let dq2 = phi * p.dlog_q[1];
            grad[IDX_A1] += w * (area * dq1 * (1.0 - s1) - h2 * phi);
            grad[IDX_B1] += w * (area * dq1 * s1 + h2 * phi);
            grad[IDX_A2] += w * (area * dq2 * (1.0 - s2) - h1 * phi);
            grad[IDX_B2] += w * (area * dq2 * s2 + h1 * phi);
            for k in 0..5 {
                grad[IDX_MU1 + k] += w * area * phi * p.dlog_theta[k];
            }
        }
    }
    (z, grad)
}

/// Mass of the untruncated normal inside the support box.
pub fn normalization(rho: &RhoParams, quad_order: usize) -> Result<f64> {
    rho.validate()?;
    let (z, _) = normalization_with_grad_scaled(rho, quad_order, 1.0);
    check_normalization(z)
}

fn check_normalization(z: f64) -> Result<f64> {
    if !(z >= NORMALIZATION_FLOOR) {
        return Err(PopdiffError::DegenerateDensity(format!(
            "normal mass inside the support box is {z:e}"
        )));
    }
    Ok(z)
}

/// Precomputed evaluator for the truncated density at fixed parameters.
#[derive(Debug, Clone)]
pub struct TruncatedNormal {
    rho: RhoParams,
    z: f64,
    dz: [f64; N_RHO],
    scale: f64,
}

impl TruncatedNormal {
    pub fn new(rho: &RhoParams, quad_order: usize) -> Result<Self> {
        Self::with_scale(rho, quad_order, 1.0)
    }

    /// Same law, computed from `scale · φ` in both numerator and denominator.
    pub(crate) fn with_scale(rho: &RhoParams, quad_order: usize, scale: f64) -> Result<Self> {
        rho.validate()?;
        let (z, dz) = normalization_with_grad_scaled(rho, quad_order, scale);
        if !(z / scale >= NORMALIZATION_FLOOR) {
            return Err(PopdiffError::DegenerateDensity(format!(
                "normal mass inside the support box is {:e}",
                z / scale
            )));
        }
        Ok(TruncatedNormal {
            rho: *rho,
            z,
            dz,
            scale,
        })
    }

    pub fn rho(&self) -> &RhoParams {
        &self.rho
    }

    pub fn normalization(&self) -> f64 {
        self.z / self.scale
    }

    pub fn eval(&self, q: QPoint) -> f64 {
        if !self.rho.qbox().contains(q.q1, q.q2) {
            return 0.0;
        }
        self.scale * normal_pdf(q.q1, q.q2, &self.rho) / self.z
    }

    /// Gradient of the density value at an interior point. Support entries
    /// carry only the normalization's dependence on the box edges.
    pub fn grad_rho(&self, q: QPoint) -> [f64; N_RHO] {
        let mut g = [0.0; N_RHO];
        if !self.rho.qbox().contains(q.q1, q.q2) {
            return g;
        }
        let p = normal_pdf_with_grad(q.q1, q.q2, &self.rho);
        let f = self.scale * p.value / self.z;
        for (k, gk) in g.iter_mut().enumerate() {
            let dlog_phi = if k >= IDX_MU1 {
                p.dlog_theta[k - IDX_MU1]
            } else {
                0.0
            };
            *gk = f * (dlog_phi - self.dz[k] / self.z);
        }
        g
    }
}

pub fn eval_density(q: QPoint, rho: &RhoParams) -> Result<f64> {
    Ok(TruncatedNormal::new(rho, DEFAULT_NORMALIZATION_ORDER)?.eval(q))
}

pub fn density_grad_rho(q: QPoint, rho: &RhoParams) -> Result<[f64; N_RHO]> {
    Ok(TruncatedNormal::new(rho, DEFAULT_NORMALIZATION_ORDER)?.grad_rho(q))
}

/// Seeded rejection sampler for the truncated law.
pub struct TruncatedNormalSampler {
    rho: RhoParams,
    rng: ChaCha8Rng,
    proposed: u64,
    accepted: u64,
}

/// Proposals drawn before the acceptance rate is checked.
const PROBE_BATCH: u64 = 20_000;
const MIN_ACCEPTANCE: f64 = 1e-4;

impl TruncatedNormalSampler {
    pub fn new(rho: &RhoParams, seed: u64) -> Result<Self> {
        rho.validate()?;
        Ok(TruncatedNormalSampler {
            rho: *rho,
            rng: ChaCha8Rng::seed_from_u64(seed),
            proposed: 0,
            accepted: 0,
        })
    }

    pub fn draw(&mut self) -> Result<QPoint> {
        let qbox = self.rho.qbox();
        loop {
            let e1: f64 = StandardNormal.sample(&mut self.rng);
            let e2: f64 = StandardNormal.sample(&mut self.rng);
            let q1 = self.rho.mu1 + self.rho.l11 * e1;
            let q2 = self.rho.mu2 + self.rho.l21 * e1 + self.rho.l22 * e2;
            self.proposed += 1;
            if qbox.contains(q1, q2) {
                self.accepted += 1;
                return Ok(QPoint { q1, q2 });
            }
            if self.proposed >= PROBE_BATCH
                && (self.accepted as f64) < MIN_ACCEPTANCE * self.proposed as f64
            {
                return Err(PopdiffError::DegenerateDensity(format!(
                    "rejection sampler accepted {} of {} proposals; support box {:?} sits in the far tail of N(({}, {}), Σ)",
                    self.accepted, self.proposed, qbox, self.rho.mu1, self.rho.mu2
                )));
            }
        }
    }

    pub fn acceptance_rate(&self) -> f64 {
        if self.proposed == 0 {
            return f64::NAN;
        }
        self.accepted as f64 / self.proposed as f64
    }
}

pub fn sample(rho: &RhoParams, count: usize, seed: u64) -> Result<Vec<QPoint>> {
    if count < 1 {
        return Err(PopdiffError::Domain(
            "sample count must be at least 1".into(),
        ));
    }
    let mut sampler = TruncatedNormalSampler::new(rho, seed)?;
    (0..count).map(|_| sampler.draw()).collect()
}

/// Enforces `a1 ≥ Q1_FLOOR` and `a2 ≥ 0` by clamping, keeping `b` above `a`.
pub fn clamp_support(rho: &mut RhoParams) {
    rho.a1 = rho.a1.max(Q1_FLOOR);
    rho.a2 = rho.a2.max(0.0);
}

#[cfg(test)]
mod tests {
    use super::*;
    use proptest::prelude::*;
    use statrs::function::erf::erf;

    fn centered(sd1: f64, sd2: f64, k: f64) -> RhoParams {
        let mu = (3.0, 5.0);
        RhoParams::independent(
            QBox::new(
                mu.0 - k * sd1,
                mu.0 + k * sd1,
                mu.1 - k * sd2,
                mu.1 + k * sd2,
            ),
            mu,
            (sd1, sd2),
        )
    }

    #[test]
    fn sigma_examples() {
        let mut r = centered(1.0, 1.0, 3.0);
        assert_eq!(sigma_from_l(&r).unwrap(), Matrix2::identity());
        r.l11 = 2.0;
        r.l22 = 3.0;
        assert_eq!(sigma_from_l(&r).unwrap(), Matrix2::new(4.0, 0.0, 0.0, 9.0));
        r.l11 = 0.1609;
        r.l21 = 0.0479;
        r.l22 = 0.3477;
        let s = sigma_from_l(&r).unwrap();
        let printed = Matrix2::new(0.0259, 0.0077, 0.0077, 0.1232);
        assert!((s - printed).abs().max() < 1e-4, "{s}");
        r.l22 = 0.0;
        assert!(matches!(
            sigma_from_l(&r),
            Err(PopdiffError::InvalidParameter(_))
        ));
    }

    #[test]
    fn normalization_nearly_one_for_wide_box() {
        let r = centered(0.3, 0.5, 8.0);
        let z = normalization(&r, DEFAULT_NORMALIZATION_ORDER).unwrap();
        assert!((z - 1.0).abs() < 1e-10, "{z}");
    }

    #[test]
    fn normalization_one_sigma_box() {
        let r = centered(0.3, 0.5, 1.0);
        // P(|Z| < 1) from an independent erf; double-precision reference 0.6826894921370859
        let one_d = 0.6826894921370859;
        assert!((erf(1.0 / 2f64.sqrt()) - one_d).abs() < 1e-9);
        let z = normalization(&r, DEFAULT_NORMALIZATION_ORDER).unwrap();
        assert!((z - one_d * one_d).abs() < 1e-12, "{z}");
        assert!((z - 0.46606).abs() < 1e-5);
    }

    #[test]
    fn normalization_degenerate_box() {
        let mut r = centered(0.01, 0.01, 1.0);
        r.mu1 = 50.0;
        assert!(matches!(
            normalization(&r, 24),
            Err(PopdiffError::DegenerateDensity(_))
        ));
    }

    #[test]
    fn peak_value_example() {
        let r = RhoParams::independent(QBox::new(0.01, 1.0, 0.0, 1.0), (0.5, 0.5), (0.1, 0.1));
        let z = normalization(&r, 24).unwrap();
        let f = eval_density(QPoint::new(0.5, 0.5), &r).unwrap();
        let want = 1.0 / (2.0 * PI * 0.01 * z);
        assert!((f - want).abs() < 1e-10 * want);
        assert_eq!(eval_density(QPoint::new(1.5, 0.5), &r).unwrap(), 0.0);
        assert_eq!(eval_density(QPoint::new(0.5, -0.1), &r).unwrap(), 0.0);
    }

    #[test]
    fn symmetric_mu_derivative_vanishes_at_center() {
        let r = centered(0.3, 0.5, 2.0);
        let g = density_grad_rho(QPoint::new(r.mu1, r.mu2), &r).unwrap();
        assert!(g[IDX_MU1].abs() < 1e-12, "{}", g[IDX_MU1]);
        assert!(g[IDX_MU2].abs() < 1e-12);
        assert!(g[IDX_L21].abs() < 1e-12);
    }

    fn fd_grad(q: QPoint, rho: &RhoParams) -> [f64; N_RHO] {
        let base = rho.to_array();
        let mut g = [0.0; N_RHO];
        for k in 0..N_RHO {
            let h = 1e-6 * (1.0 + base[k].abs());
            let mut p = base;
            p[k] += h;
            let mut m = base;
            m[k] -= h;
            let fp = eval_density(q, &RhoParams::from_array(&p)).unwrap();
            let fm = eval_density(q, &RhoParams::from_array(&m)).unwrap();
            g[k] = (fp - fm) / (2.0 * h);
        }
        g
    }

    fn assert_grad_close(got: &[f64; N_RHO], want: &[f64; N_RHO], scale: f64) {
        for k in 0..N_RHO {
            let err = (got[k] - want[k]).abs();
            assert!(
                err < 1e-6 * want[k].abs().max(1e-3 * scale),
                "component {}: analytic {} fd {}",
                RHO_NAMES[k],
                got[k],
                want[k]
            );
        }
    }

    #[test]
    fn grad_matches_finite_differences() {
        let r = RhoParams {
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
        for q in [
            QPoint::new(0.5, 0.9),
            QPoint::new(1.2, 1.7),
            QPoint::new(0.3, 0.2),
        ] {
            let g = density_grad_rho(q, &r).unwrap();
            let f = eval_density(q, &r).unwrap();
            assert_grad_close(&g, &fd_grad(q, &r), f);
        }
    }

    #[test]
    fn l21_derivative_zero_on_axes_when_independent() {
        let r = centered(0.3, 0.5, 2.0);
        let fd = fd_grad(QPoint::new(r.mu1, r.mu2 + 0.3), &r);
        let g = density_grad_rho(QPoint::new(r.mu1, r.mu2 + 0.3), &r).unwrap();
        assert!(fd[IDX_L21].abs() < 1e-8);
        assert!(g[IDX_L21].abs() < 1e-12);
        let g = density_grad_rho(QPoint::new(r.mu1 + 0.2, r.mu2), &r).unwrap();
        assert!(g[IDX_L21].abs() < 1e-12);
    }

    #[test]
    fn integrates_to_one() {
        let r = RhoParams {
            a1: 0.05,
            b1: 1.5,
            a2: 0.0,
            b2: 2.0,
            mu1: 0.63,
            mu2: 1.03,
            l11: 0.1609,
            l21: 0.0479,
            l22: 0.3477,
        };
        let tn = TruncatedNormal::new(&r, 24).unwrap();
        // independent composite rule
        let g = GaussLegendre::new(10);
        let panels = 40;
        let mut total = 0.0;
        for p1 in 0..panels {
            let (lo1, hi1) = (
                r.a1 + (r.b1 - r.a1) * p1 as f64 / panels as f64,
                r.a1 + (r.b1 - r.a1) * (p1 + 1) as f64 / panels as f64,
            );
            total += g.integrate(lo1, hi1, |q1| {
                let mut inner = 0.0;
                for p2 in 0..panels {
                    let lo2 = r.a2 + (r.b2 - r.a2) * p2 as f64 / panels as f64;
                    let hi2 = r.a2 + (r.b2 - r.a2) * (p2 + 1) as f64 / panels as f64;
                    inner += g.integrate(lo2, hi2, |q2| tn.eval(QPoint::new(q1, q2)));
                }
                inner
            });
        }
        assert!((total - 1.0).abs() < 1e-8, "{total}");
    }

    #[test]
    fn sample_stays_in_box_and_is_deterministic() {
        let r = centered(0.3, 0.5, 1.0);
        let a = sample(&r, 500, 7).unwrap();
        let b = sample(&r, 500, 7).unwrap();
        assert_eq!(a, b);
        assert!(a.iter().all(|q| r.qbox().contains(q.q1, q.q2)));
        let c = sample(&r, 500, 8).unwrap();
        assert_ne!(a, c);
        assert!(sample(&r, 0, 1).is_err());
    }

    #[test]
    fn far_tail_box_rejected() {
        let mut r = centered(0.01, 0.01, 1.0);
        r.mu1 = r.a1 - 0.06;
        let err = sample(&r, 10, 1).unwrap_err();
        assert!(matches!(err, PopdiffError::DegenerateDensity(_)));
    }

    proptest! {
        #[test]
        fn sigma_is_spd(l11 in L_FLOOR..3.0, l21 in -3.0f64..3.0, l22 in L_FLOOR..3.0) {
            let mut r = centered(1.0, 1.0, 2.0);
            r.l11 = l11; r.l21 = l21; r.l22 = l22;
            let s = sigma_from_l(&r).unwrap();
            prop_assert_eq!(s[(0, 1)], s[(1, 0)]);
            let eig = s.symmetric_eigenvalues();
            prop_assert!(eig.min() > 0.0);
        }

        #[test]
        fn scaling_phi_leaves_density_unchanged(
            scale in 1e-6f64..1e6,
            q1 in 0.2f64..1.4,
            q2 in 0.1f64..2.0,
        ) {
            let r = RhoParams { a1: 0.2, b1: 1.4, a2: 0.1, b2: 2.0, mu1: 0.7, mu2: 1.1, l11: 0.25, l21: -0.1, l22: 0.4 };
            let plain = TruncatedNormal::new(&r, 24).unwrap();
            let scaled = TruncatedNormal::with_scale(&r, 24, scale).unwrap();
            let (a, b) = (plain.eval(QPoint::new(q1, q2)), scaled.eval(QPoint::new(q1, q2)));
            prop_assert!((a - b).abs() <= 1e-13 * a.abs());
            prop_assert!(a >= 0.0);
        }
    }
}
