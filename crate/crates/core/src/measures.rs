//! FTLE, SNIFTLE, stochastic sensitivity `S²` and the initial-condition
//! measure `Q²`.
//!
//! The suprema over unit projections that define `S²` and `Q²` are evaluated
//! as operator norms, and the scale parameters are divided back out, so none
//! of these functions take `ε` or `δ`.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowfield::SystemModel;
use crate::flowmap::{solve_flow, FlowSolution, IntegratorConfig};
use crate::matops::{self, SpdMatrix};
use crate::uqcov::pushed_forward;

/// All four measures at one `(ξ₀, t)`.
#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct MeasureRecord {
    pub xi0: Vec<f64>,
    pub t: f64,
    pub ftle: f64,
    pub sniftle: f64,
    pub s2: f64,
    pub q2: f64,
}

impl MeasureRecord {
    pub fn from_solution(sol: &FlowSolution, xi_cov: &SpdMatrix) -> Result<Self> {
        Ok(MeasureRecord {
            xi0: sol.xi0.clone(),
            t: sol.t,
            ftle: ftle(sol)?,
            sniftle: sniftle(sol, xi_cov)?,
            s2: s2(sol)?,
            q2: q2(sol, xi_cov)?,
        })
    }

    /// Placeholder for a failed grid point.
    pub fn missing(xi0: Vec<f64>, t: f64) -> Self {
        MeasureRecord {
            xi0,
            t,
            ftle: f64::NAN,
            sniftle: f64::NAN,
            s2: f64::NAN,
            q2: f64::NAN,
        }
    }
}

fn require_positive_time(sol: &FlowSolution) -> Result<()> {
    if sol.t > 0.0 {
        Ok(())
    } else {
        Err(Error::UndefinedMeasure(format!("exponents need t > 0, got t = {}", sol.t)))
    }
}

fn log_rate(norm: f64, t: f64) -> Result<f64> {
    if !(norm > 0.0) {
        return Err(Error::UndefinedMeasure("Jacobian has zero norm".into()));
    }
    Ok(norm.ln() / t)
}

/// `(1/t) ln ‖∇F₀ᵗ‖`
pub fn ftle(sol: &FlowSolution) -> Result<f64> {
    require_positive_time(sol)?;
    log_rate(matops::operator_norm(&sol.jacobian)?, sol.t)
}

/// `(1/t) ln ‖∇F₀ᵗ Ψ₀‖` with `Ξ₀ = Ψ₀ Ψ₀ᵀ`.
pub fn sniftle(sol: &FlowSolution, xi_cov: &SpdMatrix) -> Result<f64> {
    require_positive_time(sol)?;
    check_dim(sol, xi_cov)?;
    let psi = xi_cov.cholesky();
    log_rate(matops::operator_norm(&(&sol.jacobian * &psi))?, sol.t)
}

/// `‖J K_t Jᵀ‖`, the noise covariance per unit `ε²`.
pub fn s2(sol: &FlowSolution) -> Result<f64> {
    matops::operator_norm(&pushed_forward(&sol.jacobian, &sol.quad)?)
}

/// `‖J Ξ₀ Jᵀ‖`, the initial-condition covariance per unit `δ²`.
pub fn q2(sol: &FlowSolution, xi_cov: &SpdMatrix) -> Result<f64> {
    check_dim(sol, xi_cov)?;
    matops::operator_norm(&pushed_forward(&sol.jacobian, xi_cov.matrix())?)
}

fn check_dim(sol: &FlowSolution, xi_cov: &SpdMatrix) -> Result<()> {
    if xi_cov.dim() != sol.dim() {
        return Err(Error::invalid(format!(
            "Ξ₀ is {}x{} but the state has dimension {}",
            xi_cov.dim(),
            xi_cov.dim(),
            sol.dim()
        )));
    }
    Ok(())
}

/// One flow solve feeding all four measures.
pub fn measure_record(model: &SystemModel, xi0: &[f64], t: f64, xi_cov: &SpdMatrix, cfg: &IntegratorConfig) -> Result<MeasureRecord> {
    if !(t > 0.0) {
        return Err(Error::UndefinedMeasure(format!("t must be positive, got {t}")));
    }
    let sol = solve_flow(model, xi0, t, cfg)?;
    MeasureRecord::from_solution(&sol, xi_cov)
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowfield::{builtin_model, Builtin, Diffusion};
    use crate::matops::Matrix;
    use approx::assert_relative_eq;
    use proptest::prelude::*;

    fn model(b: Builtin) -> SystemModel {
        builtin_model(b, Diffusion::Identity).unwrap()
    }

    fn solve(b: Builtin, xi0: &[f64], t: f64) -> FlowSolution {
        solve_flow(&model(b), xi0, t, &IntegratorConfig::default()).unwrap()
    }

    #[test]
    fn ftle_examples() {
        assert_eq!(ftle(&solve(Builtin::Zero { dim: 2 }, &[0.0, 0.0], 3.0)).unwrap(), 0.0);
        for (a, t) in [(1.0, 1.0), (0.5, 3.0), (2.0, 0.7)] {
            let f = ftle(&solve(Builtin::LinearSaddle { a }, &[0.1, 0.1], t)).unwrap();
            assert!((f - a).abs() < 1e-8, "a={a} t={t} f={f}");
        }
        let f = ftle(&solve(Builtin::RigidRotation { omega: 2.0 }, &[1.0, 0.0], 4.0)).unwrap();
        assert!(f.abs() < 1e-8);
    }

    #[test]
    fn sniftle_examples() {
        let sol = solve(Builtin::standard_double_gyre(), &[0.5, 0.5], 5.0);
        assert_eq!(sniftle(&sol, &SpdMatrix::identity(2)).unwrap(), ftle(&sol).unwrap());

        // ‖diag(e, e⁻¹) diag(c, 1)‖ = c e
        let c: f64 = 2.5;
        let xi = SpdMatrix::new(Matrix::from_diag(&[c * c, 1.0])).unwrap();
        let sol = solve(Builtin::LinearSaddle { a: 1.0 }, &[0.0, 0.0], 1.0);
        assert!((sniftle(&sol, &xi).unwrap() - (1.0 + c.ln())).abs() < 1e-8);

        // ‖Ψ₀‖ = 2
        let xi = SpdMatrix::new(Matrix::from_diag(&[4.0, 1.0])).unwrap();
        let sol = solve(Builtin::Zero { dim: 2 }, &[0.0, 0.0], 2.0);
        assert_relative_eq!(sniftle(&sol, &xi).unwrap(), 0.5 * 2f64.ln(), max_relative = 1e-14);
    }

    #[test]
    fn s2_and_q2_examples() {
        let zero = solve(Builtin::Zero { dim: 2 }, &[0.0, 0.0], 2.0);
        assert_relative_eq!(s2(&zero).unwrap(), 2.0, max_relative = 1e-12);
        assert_eq!(q2(&zero, &SpdMatrix::identity(2)).unwrap(), 1.0);

        let e2 = 1f64.exp().powi(2);
        let saddle = solve(Builtin::LinearSaddle { a: 1.0 }, &[0.0, 0.0], 1.0);
        assert_relative_eq!(s2(&saddle).unwrap(), (e2 - 1.0) / 2.0, max_relative = 1e-6);
        assert_relative_eq!(q2(&saddle, &SpdMatrix::identity(2)).unwrap(), e2, max_relative = 1e-6);

        let rot = solve(Builtin::RigidRotation { omega: 0.7 }, &[1.0, 1.0], 3.0);
        assert!((s2(&rot).unwrap() - 3.0).abs() < 1e-8);
    }

    #[test]
    fn singular_sigma_gives_zero_s2() {
        let m = builtin_model(Builtin::standard_double_gyre(), Diffusion::Constant(Matrix::zeros(2))).unwrap();
        let sol = solve_flow(&m, &[0.3, 0.3], 2.0, &IntegratorConfig::default()).unwrap();
        assert_eq!(s2(&sol).unwrap(), 0.0);
    }

    #[test]
    fn record_bundles_measures() {
        let m = model(Builtin::Zero { dim: 2 });
        let r = measure_record(&m, &[0.0, 0.0], 2.0, &SpdMatrix::identity(2), &IntegratorConfig::default()).unwrap();
        assert_eq!((r.ftle, r.sniftle, r.q2), (0.0, 0.0, 1.0));
        assert_relative_eq!(r.s2, 2.0, max_relative = 1e-12);

        let m = model(Builtin::LinearSaddle { a: 1.0 });
        let r = measure_record(&m, &[0.2, 0.2], 1.0, &SpdMatrix::identity(2), &IntegratorConfig::default()).unwrap();
        let e2 = 1f64.exp().powi(2);
        assert!((r.ftle - 1.0).abs() < 1e-8);
        assert!((r.sniftle - 1.0).abs() < 1e-8);
        assert_relative_eq!(r.s2, (e2 - 1.0) / 2.0, max_relative = 1e-6);
        assert_relative_eq!(r.q2, e2, max_relative = 1e-6);
    }

    #[test]
    fn zero_time_is_undefined() {
        let mut sol = solve(Builtin::Zero { dim: 2 }, &[0.0, 0.0], 1.0);
        sol.t = 0.0;
        assert!(matches!(ftle(&sol), Err(Error::UndefinedMeasure(_))));
        assert!(matches!(sniftle(&sol, &SpdMatrix::identity(2)), Err(Error::UndefinedMeasure(_))));
        let m = model(Builtin::Zero { dim: 2 });
        assert!(measure_record(&m, &[0.0, 0.0], 0.0, &SpdMatrix::identity(2), &IntegratorConfig::default()).is_err());
    }

    fn random_spd(entries: &[f64], diag: &[f64]) -> SpdMatrix {
        let psi = Matrix::from_rows(&[vec![diag[0], 0.0], vec![entries[0], diag[1]]]).unwrap();
        SpdMatrix::new(&psi * &psi.transpose()).unwrap()
    }

    proptest! {
        #![proptest_config(ProptestConfig::with_cases(48))]

        #[test]
        fn q2_matches_sniftle_and_is_monotone(
            x in 0.05..1.95f64, y in 0.05..0.95f64, t in 0.5..6.0f64,
            off in prop::collection::vec(-1.0..1.0f64, 2),
            diag in prop::collection::vec(0.2..2.0f64, 2),
            extra in prop::collection::vec(0.0..1.0f64, 3),
        ) {
            let sol = solve(Builtin::standard_double_gyre(), &[x, y], t);
            let xi = random_spd(&off, &diag);
            let q = q2(&sol, &xi).unwrap();
            let lam = sniftle(&sol, &xi).unwrap();
            prop_assert!((q - (2.0 * t * lam).exp()).abs() <= 1e-10 * q);

            // Ξ₀' = Ξ₀ + (PSD increment) never lowers Q².
            let v = [extra[0] - 0.5, extra[1] - 0.5];
            let bump = Matrix::outer(&v).scaled(extra[2]);
            let bigger = SpdMatrix::new(xi.matrix().add(&bump)).unwrap();
            prop_assert!(q2(&sol, &bigger).unwrap() >= q * (1.0 - 1e-12));
        }
    }
}
