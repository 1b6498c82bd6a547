//! Tensor-product approximation space: linear hats in depth `eta` times
//! piecewise constants on a uniform grid of the parameter box.
//!
//! Flat indices run `eta` fastest, so every (q1, q2) cell owns a contiguous
//! block of `n + 1` coefficients.

use nalgebra::DMatrix;
use serde::{Deserialize, Serialize};

use crate::error::{PopdiffError, Result};

/// Lower bound enforced on the diffusivity support (`a1`).
pub const Q1_FLOOR: f64 = 1e-6;

/// Discretization level `(n, m1, m2)` plus sampling interval.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct GridSpec {
    pub n: usize,
    pub m1: usize,
    pub m2: usize,
    /// Sampling interval in hours.
    pub tau: f64,
}

impl GridSpec {
    pub fn new(n: usize, m1: usize, m2: usize, tau: f64) -> Result<Self> {
        let spec = GridSpec { n, m1, m2, tau };
        spec.validate()?;
        Ok(spec)
    }

    pub fn validate(&self) -> Result<()> {
        if self.n < 1 || self.m1 < 1 || self.m2 < 1 {
            return Err(PopdiffError::Domain(format!(
                "grid sizes must be positive, got n={} m1={} m2={}",
                self.n, self.m1, self.m2
            )));
        }
        if !(self.tau > 0.0 && self.tau.is_finite()) {
            return Err(PopdiffError::Domain(format!(
                "sampling interval must be positive, got {}",
                self.tau
            )));
        }
        Ok(())
    }

    /// Number of basis functions per q-cell.
    pub fn block_size(&self) -> usize {
        self.n + 1
    }

    pub fn n_cells(&self) -> usize {
        self.m1 * self.m2
    }

    /// Total basis dimension `(n+1)·m1·m2`.
    pub fn dim(&self) -> usize {
        self.block_size() * self.n_cells()
    }

    /// Cell number (0-based) of the 1-based cell pair `(j1, j2)`.
    pub fn cell_number(&self, j1: usize, j2: usize) -> usize {
        (j1 - 1) + self.m1 * (j2 - 1)
    }

    /// Inverse of [`GridSpec::cell_number`].
    pub fn cell_pair(&self, cell: usize) -> (usize, usize) {
        (cell % self.m1 + 1, cell / self.m1 + 1)
    }
}

/// Multi-index `(j, j1, j2)` of a tensor basis function with its flat position.
#[derive(Debug, Clone, Copy, PartialEq, Eq)]
pub struct MultiIndex {
    pub j: usize,
    pub j1: usize,
    pub j2: usize,
    pub flat: usize,
}

/// Support rectangle `[a1, b1] x [a2, b2]`.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct QBox {
    pub a1: f64,
    pub b1: f64,
    pub a2: f64,
    pub b2: f64,
}

impl QBox {
    pub fn new(a1: f64, b1: f64, a2: f64, b2: f64) -> Self {
        QBox { a1, b1, a2, b2 }
    }

    pub fn validate(&self) -> Result<()> {
        let finite = [self.a1, self.b1, self.a2, self.b2]
            .iter()
            .all(|v| v.is_finite());
        if !finite || !(self.a1 < self.b1) || !(self.a2 < self.b2) {
            return Err(PopdiffError::InvalidParameter(format!(
                "support box must satisfy a1 < b1 and a2 < b2, got {self:?}"
            )));
        }
        if self.a1 < Q1_FLOOR {
            return Err(PopdiffError::InvalidParameter(format!(
                "a1 = {} is below the diffusivity floor {Q1_FLOOR}",
                self.a1
            )));
        }
        Ok(())
    }

    /// True when `self` lies inside `outer`.
    pub fn within(&self, outer: &QBox) -> bool {
        self.a1 >= outer.a1 && self.b1 <= outer.b1 && self.a2 >= outer.a2 && self.b2 <= outer.b2
    }

    pub fn area(&self) -> f64 {
        (self.b1 - self.a1) * (self.b2 - self.a2)
    }

    pub fn contains(&self, q1: f64, q2: f64) -> bool {
        q1 >= self.a1 && q1 <= self.b1 && q2 >= self.a2 && q2 <= self.b2
    }
}

/// Value of the `j`-th linear hat on the uniform mesh `{k/n}` of [0, 1].
pub fn hat_eval(j: usize, n: usize, eta: f64) -> Result<f64> {
    if n == 0 || j > n {
        return Err(PopdiffError::Domain(format!(
            "hat index {j} out of range for n = {n}"
        )));
    }
    if !(0.0..=1.0).contains(&eta) {
        return Err(PopdiffError::Domain(format!("eta = {eta} outside [0, 1]")));
    }
    let h = 1.0 / n as f64;
    let dist = (eta - j as f64 * h).abs();
    Ok((1.0 - dist / h).max(0.0))
}

/// Bounds of cell `j_i` (1-based) along axis `axis` (1 or 2) of the uniform
/// `m_i`-cell grid on `qbox`.
pub fn qcell_bounds(axis: usize, j_i: usize, qbox: &QBox, m_i: usize) -> Result<(f64, f64)> {
    let (a, b) = match axis {
        1 => (qbox.a1, qbox.b1),
        2 => (qbox.a2, qbox.b2),
        _ => {
            return Err(PopdiffError::Domain(format!(
                "axis must be 1 or 2, got {axis}"
            )))
        }
    };
    if m_i == 0 || j_i < 1 || j_i > m_i {
        return Err(PopdiffError::Domain(format!(
            "cell index {j_i} out of range 1..={m_i}"
        )));
    }
    let width = b - a;
    let lo = a + width * (j_i - 1) as f64 / m_i as f64;
    let hi = if j_i == m_i {
        b
    } else {
        a + width * j_i as f64 / m_i as f64
    };
    Ok((lo, hi))
}

pub fn flat_index(j: usize, j1: usize, j2: usize, spec: &GridSpec) -> Result<usize> {
    if j > spec.n || j1 < 1 || j1 > spec.m1 || j2 < 1 || j2 > spec.m2 {
        return Err(PopdiffError::Domain(format!(
            "multi-index ({j}, {j1}, {j2}) out of range for {spec:?}"
        )));
    }
    Ok(j + spec.block_size() * spec.cell_number(j1, j2))
}

pub fn multi_index(flat: usize, spec: &GridSpec) -> Result<MultiIndex> {
    if flat >= spec.dim() {
        return Err(PopdiffError::Domain(format!(
            "flat index {flat} out of range for dimension {}",
            spec.dim()
        )));
    }
    let j = flat % spec.block_size();
    let (j1, j2) = spec.cell_pair(flat / spec.block_size());
    Ok(MultiIndex { j, j1, j2, flat })
}

/// Exact Gram matrix of the hats on [0, 1].
pub fn hat_mass(n: usize) -> DMatrix<f64> {
    let h = 1.0 / n as f64;
    DMatrix::from_fn(n + 1, n + 1, |r, c| {
        if r == c {
            if r == 0 || r == n {
                h / 3.0
            } else {
                2.0 * h / 3.0
            }
        } else if r.abs_diff(c) == 1 {
            h / 6.0
        } else {
            0.0
        }
    })
}

/// Exact matrix of `∫ φ_r' φ_c'` over [0, 1].
pub fn hat_stiffness(n: usize) -> DMatrix<f64> {
    let nf = n as f64;
    DMatrix::from_fn(n + 1, n + 1, |r, c| {
        if r == c {
            if r == 0 || r == n {
                nf
            } else {
                2.0 * nf
            }
        } else if r.abs_diff(c) == 1 {
            -nf
        } else {
            0.0
        }
    })
}
