//! Covariance of the linearized solution, split into its initial-condition
//! and model-noise parts:
//!
//! `Λ_t = δ² J Ξ₀ Jᵀ + ε² J K_t Jᵀ`.

use crate::error::{Error, Result};
use crate::flowmap::{FlowSolution, PSD_CLAMP_TOL};
use crate::matops::{self, Matrix, SpdMatrix};

/// Uncertainty scales: model noise `ε`, initial-condition spread `δ`, and the
/// shape `Ξ₀` of the initial covariance `δ² Ξ₀`.
#[derive(Clone, Debug)]
pub struct UncertaintyScales {
    pub eps: f64,
    pub delta: f64,
    pub xi_cov: SpdMatrix,
}

impl UncertaintyScales {
    pub fn new(eps: f64, delta: f64, xi_cov: SpdMatrix) -> Result<Self> {
        if !(eps >= 0.0 && eps.is_finite()) || !(delta >= 0.0 && delta.is_finite()) {
            return Err(Error::invalid(format!(
                "uncertainty scales must be finite and non-negative (eps = {eps}, delta = {delta})"
            )));
        }
        Ok(UncertaintyScales { eps, delta, xi_cov })
    }

    pub fn isotropic(n: usize, eps: f64, delta: f64) -> Result<Self> {
        Self::new(eps, delta, SpdMatrix::identity(n))
    }

    pub fn dim(&self) -> usize {
        self.xi_cov.dim()
    }
}

#[derive(Clone, Debug)]
pub struct CovarianceDecomposition {
    /// `δ² J Ξ₀ Jᵀ`
    pub ic_term: Matrix,
    /// `ε² J K_t Jᵀ`
    pub noise_term: Matrix,
    pub total: Matrix,
}

/// `J X Jᵀ`, symmetrized and projected onto the PSD cone.
pub(crate) fn pushed_forward(j: &Matrix, x: &Matrix) -> Result<Matrix> {
    matops::clamp_psd(&j.congruence(x), PSD_CLAMP_TOL)
}

pub fn covariance(sol: &FlowSolution, scales: &UncertaintyScales) -> Result<CovarianceDecomposition> {
    if scales.dim() != sol.dim() {
        return Err(Error::invalid("Ξ₀ dimension does not match the flow"));
    }
    let ic_term = pushed_forward(&sol.jacobian, scales.xi_cov.matrix())?.scaled(scales.delta * scales.delta);
    let noise_term = pushed_forward(&sol.jacobian, &sol.quad)?.scaled(scales.eps * scales.eps);
    let total = ic_term.add(&noise_term);
    Ok(CovarianceDecomposition {
        ic_term,
        noise_term,
        total,
    })
}

/// Gaussian law `N(F₀ᵗ(ξ₀), Λ_t)` of the linearized solution `l_t`.
#[derive(Clone, Debug)]
pub struct GaussianPrediction {
    pub mean: Vec<f64>,
    pub cov: Matrix,
}

pub fn gaussian_predictive(sol: &FlowSolution, scales: &UncertaintyScales) -> Result<GaussianPrediction> {
    let cov = covariance(sol, scales)?.total;
    Ok(GaussianPrediction {
        mean: sol.position.clone(),
        cov,
    })
}
