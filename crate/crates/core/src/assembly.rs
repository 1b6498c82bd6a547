//! Density-weighted Galerkin operators of the population-averaged form.
//!
//! A tensor basis function is a hat in `eta` times the indicator of one
//! q-cell, so the bilinear forms never couple two cells: every operator is
//! block diagonal with one `(n+1) x (n+1)` block per cell. Inside cell `c`
//!
//! ```text
//! M_c = w_c M_eta
//! K_c = w_c e0 e0ᵀ + w1_c K_eta
//! B_c = w2_c e_n
//! C_c = w_c e_0
//! ```
//!
//! with the cell moments `w = ∫ f`, `w1 = ∫ q1 f`, `w2 = ∫ q2 f`. The moments
//! are integrated by Gauss–Legendre on each cell after mapping the cells
//! affinely onto a fixed reference square, so derivatives with respect to the
//! support edges are ordinary derivatives of nodes and weights.

use nalgebra::{DMatrix, DVector};
use rayon::prelude::*;

use crate::density::{
    normal_pdf_with_grad, RhoParams, IDX_A1, IDX_A2, IDX_B1, IDX_B2, IDX_MU1, N_RHO,
};
use crate::error::{PopdiffError, Result};
use crate::grid_basis::{hat_mass, hat_stiffness, GridSpec};
use crate::quadrature::GaussLegendre;

/// Default Gauss–Legendre order per axis inside each q-cell.
pub const DEFAULT_CELL_ORDER: usize = 8;

/// Probability mass and first moments of one q-cell, with optional
/// parameter derivatives.
#[derive(Debug, Clone, PartialEq)]
pub struct CellMoments {
    pub mass: f64,
    pub q1: f64,
    pub q2: f64,
    pub d_mass: Vec<f64>,
    pub d_q1: Vec<f64>,
    pub d_q2: Vec<f64>,
}

impl CellMoments {
    /// Moments without parameter dependence.
    pub fn fixed(mass: f64, q1: f64, q2: f64) -> Self {
        CellMoments {
            mass,
            q1,
            q2,
            d_mass: Vec::new(),
            d_q1: Vec::new(),
            d_q2: Vec::new(),
        }
    }
}

/// Operators of one q-cell plus their parameter derivatives.
#[derive(Debug, Clone)]
pub struct CellBlock {
    pub mass: DMatrix<f64>,
    pub stiffness: DMatrix<f64>,
    pub input: DVector<f64>,
    pub output: DVector<f64>,
    pub d_mass: Vec<DMatrix<f64>>,
    pub d_stiffness: Vec<DMatrix<f64>>,
    pub d_input: Vec<DVector<f64>>,
    pub d_output: Vec<DVector<f64>>,
}

#[derive(Debug, Clone)]
pub struct AssembledOperators {
    pub spec: GridSpec,
    pub blocks: Vec<CellBlock>,
    /// Number of parameters the derivative arrays run over (0 when absent).
    pub n_params: usize,
    /// Smallest density value seen at any cell quadrature node.
    pub min_node_density: f64,
}

/// Derivative tensors `(dM, dK, dB, dC)`, one entry per rho component.
pub type OperatorGradients = (
    Vec<DMatrix<f64>>,
    Vec<DMatrix<f64>>,
    Vec<DVector<f64>>,
    Vec<DVector<f64>>,
);

fn block_dense(blocks: &[CellBlock], pick: impl Fn(&CellBlock) -> &DMatrix<f64>) -> DMatrix<f64> {
    let bs = blocks.first().map_or(0, |b| b.mass.nrows());
    let dim = bs * blocks.len();
    let mut out = DMatrix::zeros(dim, dim);
    for (c, b) in blocks.iter().enumerate() {
        out.view_mut((c * bs, c * bs), (bs, bs)).copy_from(pick(b));
    }
    out
}

fn stack(blocks: &[CellBlock], pick: impl Fn(&CellBlock) -> &DVector<f64>) -> DVector<f64> {
    let parts: Vec<f64> = blocks
        .iter()
        .flat_map(|b| pick(b).iter().copied())
        .collect();
    DVector::from_vec(parts)
}

impl AssembledOperators {
    pub fn dim(&self) -> usize {
        self.spec.dim()
    }

    pub fn mass_matrix(&self) -> DMatrix<f64> {
        block_dense(&self.blocks, |b| &b.mass)
    }

    pub fn stiffness_matrix(&self) -> DMatrix<f64> {
        block_dense(&self.blocks, |b| &b.stiffness)
    }

    pub fn input_vector(&self) -> DVector<f64> {
        stack(&self.blocks, |b| &b.input)
    }

    pub fn output_vector(&self) -> DVector<f64> {
        stack(&self.blocks, |b| &b.output)
    }

    /// Full-size derivative tensors.
    pub fn gradients(&self) -> OperatorGradients {
        let k = self.n_params;
        (
            (0..k)
                .map(|p| block_dense(&self.blocks, |b| &b.d_mass[p]))
                .collect(),
            (0..k)
                .map(|p| block_dense(&self.blocks, |b| &b.d_stiffness[p]))
                .collect(),
            (0..k)
                .map(|p| stack(&self.blocks, |b| &b.d_input[p]))
                .collect(),
            (0..k)
                .map(|p| stack(&self.blocks, |b| &b.d_output[p]))
                .collect(),
        )
    }
}

/// Builds cell operators from given moments, cells in flat order.
pub fn assemble_from_moments(
    spec: &GridSpec,
    moments: &[CellMoments],
) -> Result<AssembledOperators> {
    spec.validate()?;
    if moments.len() != spec.n_cells() {
        return Err(PopdiffError::Domain(format!(
            "expected {} cell moments, got {}",
            spec.n_cells(),
            moments.len()
        )));
    }
    let n_params = moments[0].d_mass.len();
    let n = spec.n;
    let m_eta = hat_mass(n);
    let k_eta = hat_stiffness(n);
    let mut e0e0 = DMatrix::zeros(n + 1, n + 1);
    e0e0[(0, 0)] = 1.0;
    let unit = |j: usize, v: f64| {
        let mut e = DVector::zeros(n + 1);
        e[j] = v;
        e
    };
    let mut blocks = Vec::with_capacity(moments.len());
    for (c, mo) in moments.iter().enumerate() {
        if !(mo.mass > 0.0 && mo.mass.is_finite() && mo.q1 > 0.0 && mo.q1.is_finite()) {
            return Err(PopdiffError::SingularOperator(format!(
                "cell {c} has mass {:e} and q1-moment {:e}; its mass block cannot be factored",
                mo.mass, mo.q1
            )));
        }
        let stiff_of = |w: f64, w1: f64| &e0e0 * w + &k_eta * w1;
        blocks.push(CellBlock {
            mass: &m_eta * mo.mass,
            stiffness: stiff_of(mo.mass, mo.q1),
            input: unit(n, mo.q2),
            output: unit(0, mo.mass),
            d_mass: mo.d_mass.iter().map(|&d| &m_eta * d).collect(),
            d_stiffness: mo
                .d_mass
                .iter()
                .zip(&mo.d_q1)
                .map(|(&dw, &dw1)| stiff_of(dw, dw1))
                .collect(),
            d_input: mo.d_q2.iter().map(|&d| unit(n, d)).collect(),
            d_output: mo.d_mass.iter().map(|&d| unit(0, d)).collect(),
        });
    }
    Ok(AssembledOperators {
        spec: *spec,
        blocks,
        n_params,
        min_node_density: f64::NAN,
    })
}

/// Unnormalized integrals over one cell: `[∫φ, ∫q1 φ, ∫q2 φ]`, their rho
/// gradients, and the smallest φ at a node.
struct RawCell {
    ints: [f64; 3],
    grads: [[f64; N_RHO]; 3],
    min_phi: f64,
}

fn raw_cell(
    j1: usize,
    j2: usize,
    spec: &GridSpec,
    rho: &RhoParams,
    rule: &GaussLegendre,
    with_grad: bool,
) -> RawCell {
    let (h1, h2) = (rho.b1 - rho.a1, rho.b2 - rho.a2);
    let (m1, m2) = (spec.m1 as f64, spec.m2 as f64);
    let mut ints = [0.0; 3];
    let mut grads = [[0.0; N_RHO]; 3];
    let mut min_phi = f64::INFINITY;
    for (x1, w1) in rule.nodes.iter().zip(&rule.weights) {
        // reference coordinate in [0, 1] over the whole box
        let t1 = ((j1 - 1) as f64 + 0.5 * (x1 + 1.0)) / m1;
        let q1 = rho.a1 + h1 * t1;
        for (x2, w2) in rule.nodes.iter().zip(&rule.weights) {
            let t2 = ((j2 - 1) as f64 + 0.5 * (x2 + 1.0)) / m2;
            let q2 = rho.a2 + h2 * t2;
            let weight = 0.25 * w1 * w2 * h1 * h2 / (m1 * m2);
            let p = normal_pdf_with_grad(q1, q2, rho);
            let phi = p.value;
            min_phi = min_phi.min(phi);
            let vals = [phi, q1 * phi, q2 * phi];
            for (acc, v) in ints.iter_mut().zip(vals) {
                *acc += weight * v;
            }
            if !with_grad {
                continue;
            }
            // d(integrand)/d(q1), d(integrand)/d(q2)
            let dq1 = [
                phi * p.dlog_q[0],
                phi + q1 * phi * p.dlog_q[0],
                q2 * phi * p.dlog_q[0],
            ];
            let dq2 = [
                phi * p.dlog_q[1],
                q1 * phi * p.dlog_q[1],
                phi + q2 * phi * p.dlog_q[1],
            ];
            for r in 0..3 {
                let g = &mut grads[r];
                g[IDX_A1] += weight * (dq1[r] * (1.0 - t1) - vals[r] / h1);
                g[IDX_B1] += weight * (dq1[r] * t1 + vals[r] / h1);
                g[IDX_A2] += weight * (dq2[r] * (1.0 - t2) - vals[r] / h2);
                g[IDX_B2] += weight * (dq2[r] * t2 + vals[r] / h2);
                for k in 0..5 {
                    g[IDX_MU1 + k] += weight * vals[r] * p.dlog_theta[k];
                }
            }
        }
    }
    RawCell {
        ints,
        grads,
        min_phi,
    }
}

/// Normalized cell moments of the truncated density, cells in flat order.
/// The normalization is the sum of the cell integrals, so the masses add to
/// one by construction. Also returns the smallest nodal density.
pub fn cell_moments(
    spec: &GridSpec,
    rho: &RhoParams,
    quad_order: usize,
    with_grad: bool,
) -> Result<(Vec<CellMoments>, f64)> {
    spec.validate()?;
    rho.validate()?;
    let rule = GaussLegendre::new(quad_order);
    let raw: Vec<RawCell> = (0..spec.n_cells())
        .into_par_iter()
        .map(|c| {
            let (j1, j2) = spec.cell_pair(c);
            raw_cell(j1, j2, spec, rho, &rule, with_grad)
        })
        .collect();
    let z: f64 = raw.iter().map(|r| r.ints[0]).sum();
    if !(z >= crate::density::NORMALIZATION_FLOOR) {
        return Err(PopdiffError::DegenerateDensity(format!(
            "normal mass inside the support box is {z:e}"
        )));
    }
    let mut dz = [0.0; N_RHO];
    for r in &raw {
        for (d, g) in dz.iter_mut().zip(&r.grads[0]) {
            *d += g;
        }
    }
    let min_phi = raw.iter().map(|r| r.min_phi).fold(f64::INFINITY, f64::min);
    let moments = raw
        .iter()
        .map(|r| {
            let norm = |v: f64| v / z;
            let dnorm = |i: usize| -> Vec<f64> {
                if !with_grad {
                    return Vec::new();
                }
                (0..N_RHO)
                    .map(|k| (r.grads[i][k] - r.ints[i] * dz[k] / z) / z)
                    .collect()
            };
            CellMoments {
                mass: norm(r.ints[0]),
                q1: norm(r.ints[1]),
                q2: norm(r.ints[2]),
                d_mass: dnorm(0),
                d_q1: dnorm(1),
                d_q2: dnorm(2),
            }
        })
        .collect();
    Ok((moments, min_phi / z))
}

/// Population operators without derivative tensors.
pub fn assemble(spec: &GridSpec, rho: &RhoParams, quad_order: usize) -> Result<AssembledOperators> {
    let (moments, min_f) = cell_moments(spec, rho, quad_order, false)?;
    let mut ops = assemble_from_moments(spec, &moments)?;
    ops.min_node_density = min_f;
    Ok(ops)
}

/// Population operators with their nine rho-derivative tensors attached.
pub fn assemble_with_grad(
    spec: &GridSpec,
    rho: &RhoParams,
    quad_order: usize,
) -> Result<AssembledOperators> {
    let (moments, min_f) = cell_moments(spec, rho, quad_order, true)?;
    let mut ops = assemble_from_moments(spec, &moments)?;
    ops.min_node_density = min_f;
    Ok(ops)
}

/// `(dM, dK, dB, dC)` as full matrices and vectors.
pub fn assemble_grad(
    spec: &GridSpec,
    rho: &RhoParams,
    quad_order: usize,
) -> Result<OperatorGradients> {
    Ok(assemble_with_grad(spec, rho, quad_order)?.gradients())
}

/// Density floor below which an iterate counts as too flat to assemble
/// well-conditioned operators.
pub fn gamma_floor(rho: &RhoParams) -> f64 {
    1e-10 / rho.qbox().area()
}

/// Fails with a degenerate-density error when the smallest nodal density is
/// below [`gamma_floor`].
pub fn check_gamma_floor(ops: &AssembledOperators, rho: &RhoParams) -> Result<()> {
    let floor = gamma_floor(rho);
    if ops.min_node_density.is_nan() || ops.min_node_density >= floor {
        return Ok(());
    }
    Err(PopdiffError::DegenerateDensity(format!(
        "density falls to {:e} at a cell node, below the floor {floor:e}",
        ops.min_node_density
    )))
}

/// Operators of the single-realization model at `(q1, q2)`: one cell of unit
/// mass, with derivatives with respect to `(q1, q2)`.
pub fn point_mass_operators(n: usize, q1: f64, q2: f64) -> Result<AssembledOperators> {
    let spec = GridSpec::new(n, 1, 1, 1.0)?;
    let moments = CellMoments {
        mass: 1.0,
        q1,
        q2,
        d_mass: vec![0.0, 0.0],
        d_q1: vec![1.0, 0.0],
        d_q2: vec![0.0, 1.0],
    };
    assemble_from_moments(&spec, &[moments])
}
