//! Zero-order-hold sampling of the Galerkin system and its parameter
//! sensitivities.
//!
//! Per cell block the generator is `A = −M⁻¹K`, the sampled state matrix is
//! `exp(Aτ)`, and the sampled input is `(exp(Aτ) − I) A⁻¹ M⁻¹B`.
//! Sensitivities of `exp(Aτ)` are read off the upper-right block of the
//! exponential of `[[A, dA], [0, A]]τ`.

use nalgebra::{DMatrix, DVector, LU};
use rayon::prelude::*;

use crate::assembly::{AssembledOperators, CellBlock};
use crate::error::{PopdiffError, Result};
use crate::expm::{expm, expm_with_directional};

/// Sampled system of one q-cell.
#[derive(Debug, Clone)]
pub struct BlockSystem {
    /// Generator `A = −M⁻¹K`.
    pub agen: DMatrix<f64>,
    /// `M⁻¹ B`.
    pub beta: DVector<f64>,
    pub ahat: DMatrix<f64>,
    pub bhat: DVector<f64>,
    pub chat: DVector<f64>,
    pub d_ahat: Vec<DMatrix<f64>>,
    pub d_bhat: Vec<DVector<f64>>,
    pub d_chat: Vec<DVector<f64>>,
    agen_lu: LU<f64, nalgebra::Dyn, nalgebra::Dyn>,
    tau: f64,
}

impl BlockSystem {
    /// Sampled system from a generator, input direction `beta` and output
    /// functional.
    pub fn from_generator(
        agen: DMatrix<f64>,
        beta: DVector<f64>,
        chat: DVector<f64>,
        tau: f64,
    ) -> Result<Self> {
        if !(tau > 0.0 && tau.is_finite()) {
            return Err(PopdiffError::Domain(format!(
                "sampling interval must be positive, got {tau}"
            )));
        }
        let dim = agen.nrows();
        let agen_lu = agen.clone().lu();
        if !agen_lu.is_invertible() {
            return Err(PopdiffError::SingularOperator(
                "generator is singular".into(),
            ));
        }
        let ahat = expm(&(&agen * tau))?;
        let g = solve(&agen_lu, &beta)?;
        let bhat = (&ahat - DMatrix::identity(dim, dim)) * g;
        Ok(BlockSystem {
            agen,
            beta,
            ahat,
            bhat,
            chat,
            d_ahat: Vec::new(),
            d_bhat: Vec::new(),
            d_chat: Vec::new(),
            agen_lu,
            tau,
        })
    }

    pub fn dim(&self) -> usize {
        self.agen.nrows()
    }

    /// `A⁻¹ v` by LU solve.
    pub fn solve_generator(&self, v: &DVector<f64>) -> Result<DVector<f64>> {
        solve(&self.agen_lu, v)
    }

    /// Appends the sensitivity for one parameter given `dA`, `dβ`, `dC`.
    pub fn push_sensitivity(
        &mut self,
        d_agen: &DMatrix<f64>,
        d_beta: &DVector<f64>,
        d_chat: DVector<f64>,
    ) -> Result<()> {
        let d_ahat = if d_agen.iter().all(|v| *v == 0.0) {
            DMatrix::zeros(self.dim(), self.dim())
        } else {
            let (_, upper) = expm_with_directional(&(&self.agen * self.tau), &(d_agen * self.tau))?;
            upper
        };
        // d[(Â − I) A⁻¹ β] = dÂ g + (Â − I) A⁻¹ (dβ − dA g),  g = A⁻¹ β
        let g = self.solve_generator(&self.beta)?;
        let inner = self.solve_generator(&(d_beta - d_agen * &g))?;
        let ident = DMatrix::<f64>::identity(self.dim(), self.dim());
        let d_bhat = &d_ahat * &g + (&self.ahat - ident) * inner;
        self.d_ahat.push(d_ahat);
        self.d_bhat.push(d_bhat);
        self.d_chat.push(d_chat);
        Ok(())
    }
}

fn solve(lu: &LU<f64, nalgebra::Dyn, nalgebra::Dyn>, v: &DVector<f64>) -> Result<DVector<f64>> {
    lu.solve(v)
        .filter(|x| x.iter().all(|e| e.is_finite()))
        .ok_or_else(|| PopdiffError::SingularOperator("generator solve failed".into()))
}

/// The sampled population system, one block per q-cell.
#[derive(Debug, Clone)]
pub struct SampledSystem {
    pub tau: f64,
    pub blocks: Vec<BlockSystem>,
    /// Number of parameters with sensitivities attached (0 if none).
    pub n_params: usize,
}

impl SampledSystem {
    pub fn from_blocks(blocks: Vec<BlockSystem>, tau: f64) -> Self {
        let n_params = blocks.first().map_or(0, |b| b.d_ahat.len());
        SampledSystem {
            tau,
            blocks,
            n_params,
        }
    }

    pub fn block_size(&self) -> usize {
        self.blocks.first().map_or(0, |b| b.dim())
    }

    pub fn dim(&self) -> usize {
        self.block_size() * self.blocks.len()
    }

    fn dense(&self, pick: impl Fn(&BlockSystem) -> &DMatrix<f64>) -> DMatrix<f64> {
        let bs = self.block_size();
        let mut out = DMatrix::zeros(self.dim(), self.dim());
        for (c, b) in self.blocks.iter().enumerate() {
            out.view_mut((c * bs, c * bs), (bs, bs)).copy_from(pick(b));
        }
        out
    }

    fn stacked(&self, pick: impl Fn(&BlockSystem) -> &DVector<f64>) -> DVector<f64> {
        DVector::from_iterator(
            self.dim(),
            self.blocks
                .iter()
                .flat_map(|b| pick(b).iter().copied().collect::<Vec<_>>()),
        )
    }

    pub fn ahat(&self) -> DMatrix<f64> {
        self.dense(|b| &b.ahat)
    }

    pub fn agen(&self) -> DMatrix<f64> {
        self.dense(|b| &b.agen)
    }

    pub fn bhat(&self) -> DVector<f64> {
        self.stacked(|b| &b.bhat)
    }

    pub fn chat(&self) -> DVector<f64> {
        self.stacked(|b| &b.chat)
    }

    pub fn d_ahat(&self, k: usize) -> DMatrix<f64> {
        self.dense(|b| &b.d_ahat[k])
    }

    pub fn d_bhat(&self, k: usize) -> DVector<f64> {
        self.stacked(|b| &b.d_bhat[k])
    }

    pub fn d_chat(&self, k: usize) -> DVector<f64> {
        self.stacked(|b| &b.d_chat[k])
    }

    /// Largest eigenvalue modulus of `Â`.
    pub fn spectral_radius(&self) -> f64 {
        self.blocks
            .iter()
            .flat_map(|b| {
                b.ahat
                    .clone()
                    .complex_eigenvalues()
                    .iter()
                    .map(|z| z.norm())
                    .collect::<Vec<_>>()
            })
            .fold(0.0, f64::max)
    }
}

type Generator = (
    nalgebra::Cholesky<f64, nalgebra::Dyn>,
    DMatrix<f64>,
    DVector<f64>,
);

fn block_generator(block: &CellBlock) -> Result<Generator> {
    let chol = block.mass.clone().cholesky().ok_or_else(|| {
        PopdiffError::SingularOperator("mass block is not positive definite".into())
    })?;
    let agen = -chol.solve(&block.stiffness);
    let beta = chol.solve(&block.input);
    Ok((chol, agen, beta))
}

/// `Â = exp(Aτ)`, `B̂ = (Â − I)A⁻¹M⁻¹B`, `Ĉ = C` for every cell block.
pub fn build_sampled(ops: &AssembledOperators, tau: f64) -> Result<SampledSystem> {
    let blocks = ops
        .blocks
        .par_iter()
        .map(|block| {
            let (_, agen, beta) = block_generator(block)?;
            BlockSystem::from_generator(agen, beta, block.output.clone(), tau)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampledSystem::from_blocks(blocks, tau))
}

/// Attaches `dÂ/dρ`, `dB̂/dρ`, `dĈ/dρ` for every parameter carried by `ops`.
pub fn build_sensitivities(ops: &AssembledOperators, sys: SampledSystem) -> Result<SampledSystem> {
    if ops.blocks.len() != sys.blocks.len() {
        return Err(PopdiffError::Domain(
            "operator and system block counts differ".into(),
        ));
    }
    let tau = sys.tau;
    let blocks = ops
        .blocks
        .par_iter()
        .zip(sys.blocks.into_par_iter())
        .map(|(block, mut bsys)| {
            let (chol, agen, beta) = block_generator(block)?;
            bsys.d_ahat.clear();
            bsys.d_bhat.clear();
            bsys.d_chat.clear();
            for k in 0..ops.n_params {
                // M A = −K  ⇒  dA = −M⁻¹(dK + dM A)
                let d_agen = -chol.solve(&(&block.d_stiffness[k] + &block.d_mass[k] * &agen));
                let d_beta = chol.solve(&(&block.d_input[k] - &block.d_mass[k] * &beta));
                bsys.push_sensitivity(&d_agen, &d_beta, block.d_output[k].clone())?;
            }
            Ok(bsys)
        })
        .collect::<Result<Vec<_>>>()?;
    Ok(SampledSystem::from_blocks(blocks, tau))
}

/// Convenience: sampled system with sensitivities in one call.
pub fn build_with_sensitivities(ops: &AssembledOperators, tau: f64) -> Result<SampledSystem> {
    let sys = build_sampled(ops, tau)?;
    build_sensitivities(ops, sys)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::assembly::{assemble, assemble_with_grad};
    use crate::density::{RhoParams, N_RHO};
    use crate::grid_basis::GridSpec;
    use crate::quadrature::GaussLegendre;

    fn scalar(a: f64, beta: f64, tau: f64) -> BlockSystem {
        BlockSystem::from_generator(
            DMatrix::from_element(1, 1, a),
            DVector::from_element(1, beta),
            DVector::from_element(1, 1.0),
            tau,
        )
        .unwrap()
    }

    fn rho() -> RhoParams {
        RhoParams {
            a1: 0.2,
            b1: 1.4,
            a2: 0.1,
            b2: 2.0,
            mu1: 0.7,
            mu2: 1.1,
            l11: 0.25,
            l21: 0.08,
            l22: 0.4,
        }
    }

    #[test]
    fn scalar_surrogate() {
        let s = scalar(-1.0, 1.0, 2f64.ln());
        assert!((s.ahat[(0, 0)] - 0.5).abs() < 1e-15);
        assert!((s.bhat[0] - 0.5).abs() < 1e-15);
    }

    #[test]
    fn scalar_sensitivity_closed_form() {
        let (a, tau) = (-0.8, 0.3);
        let mut s = scalar(a, 1.0, tau);
        s.push_sensitivity(
            &DMatrix::from_element(1, 1, 1.0),
            &DVector::zeros(1),
            DVector::zeros(1),
        )
        .unwrap();
        assert!((s.d_ahat[0][(0, 0)] - tau * f64::exp(a * tau)).abs() < 1e-15);
        // B̂ = (e^{aτ} − 1)/a
        let want = (tau * a * f64::exp(a * tau) - (f64::exp(a * tau) - 1.0)) / (a * a);
        assert!((s.d_bhat[0][0] - want).abs() < 1e-14);
    }

    #[test]
    fn zero_generator_derivative_gives_exact_zero() {
        let spec = GridSpec::new(3, 1, 1, 0.1).unwrap();
        let ops = assemble(&spec, &rho(), 8).unwrap();
        let mut sys = build_sampled(&ops, 0.1).unwrap();
        let b = &mut sys.blocks[0];
        b.push_sensitivity(&DMatrix::zeros(4, 4), &DVector::zeros(4), DVector::zeros(4))
            .unwrap();
        assert!(b.d_ahat[0].iter().all(|v| *v == 0.0));
        assert!(b.d_bhat[0].iter().all(|v| *v == 0.0));
    }

    #[test]
    fn tiny_tau_limit() {
        let spec = GridSpec::new(4, 2, 2, 1e-10).unwrap();
        let ops = assemble(&spec, &rho(), 8).unwrap();
        let sys = build_sampled(&ops, 1e-10).unwrap();
        let ident = DMatrix::<f64>::identity(sys.dim(), sys.dim());
        assert!((sys.ahat() - ident).abs().max() < 1e-8);
        assert!(sys.bhat().abs().max() < 1e-8);
    }

    #[test]
    fn bhat_matches_quadrature_of_semigroup() {
        let spec = GridSpec::new(6, 2, 2, 1.0 / 12.0).unwrap();
        let ops = assemble(&spec, &rho(), 8).unwrap();
        let sys = build_sampled(&ops, spec.tau).unwrap();
        let g = GaussLegendre::new(64);
        for b in &sys.blocks {
            let mut acc = DVector::zeros(b.dim());
            for (x, w) in g.nodes.iter().zip(&g.weights) {
                let s = 0.5 * spec.tau * (x + 1.0);
                acc += (b.agen.clone() * s).exp() * &b.beta * (0.5 * spec.tau * w);
            }
            assert!((&b.bhat - &acc).norm() < 1e-9 * acc.norm());
        }
    }

    #[test]
    fn semigroup_and_block_consistency() {
        let spec = GridSpec::new(8, 2, 2, 0.1).unwrap();
        let ops = assemble_with_grad(&spec, &rho(), 8).unwrap();
        let sys = build_sampled(&ops, 0.1).unwrap();
        let sys2 = build_sampled(&ops, 0.2).unwrap();
        let a = sys.ahat();
        assert!((&a * &a - sys2.ahat()).norm() < 1e-9 * sys2.ahat().norm());
        for b in &sys.blocks {
            let (lower, _) =
                expm_with_directional(&(&b.agen * 0.1), &(b.agen.clone() * 0.3)).unwrap();
            assert!((&lower - &b.ahat).norm() < 1e-10 * b.ahat.norm());
        }
        assert!(sys.spectral_radius() < 1.0);
    }

    #[test]
    fn sensitivities_match_finite_differences() {
        let spec = GridSpec::new(4, 2, 2, 0.1).unwrap();
        let r = rho();
        let ops = assemble_with_grad(&spec, &r, 8).unwrap();
        let sys = build_with_sensitivities(&ops, spec.tau).unwrap();
        let base = r.to_array();
        for k in 0..N_RHO {
            let h = 1e-6 * (1.0 + base[k].abs());
            let mut p = base;
            p[k] += h;
            let mut m = base;
            m[k] -= h;
            let sp = build_sampled(
                &assemble(&spec, &RhoParams::from_array(&p), 8).unwrap(),
                spec.tau,
            )
            .unwrap();
            let sm = build_sampled(
                &assemble(&spec, &RhoParams::from_array(&m), 8).unwrap(),
                spec.tau,
            )
            .unwrap();
            let fd_a = (sp.ahat() - sm.ahat()) / (2.0 * h);
            let fd_b = (sp.bhat() - sm.bhat()) / (2.0 * h);
            let fd_c = (sp.chat() - sm.chat()) / (2.0 * h);
            assert!(
                (sys.d_ahat(k) - &fd_a).norm() < 1e-5 * fd_a.norm().max(1e-8),
                "dA {k}"
            );
            assert!(
                (sys.d_bhat(k) - &fd_b).norm() < 1e-5 * fd_b.norm().max(1e-8),
                "dB {k}"
            );
            assert!(
                (sys.d_chat(k) - &fd_c).norm() < 1e-5 * fd_c.norm().max(1e-8),
                "dC {k}"
            );
        }
    }
}
