//! Finite-time Lyapunov exponents and linearized uncertainty quantification
//! for `dx = u(x,t) dt + ε σ(x,t) dW`, `x₀ ~ N(ξ₀, δ² Ξ₀)`.
//!
//! The covariance `Λ_t` of the linearized solution ties the measures
//! together: its model-noise part gives stochastic sensitivity `S²`, its
//! initial-condition part gives `Q²`, and `Q² = exp(2 t λ)` where `λ` is the
//! stochastic non-isotropic FTLE (which reduces to the classical FTLE when
//! `Ξ₀ = I`).

#![allow(clippy::neg_cmp_op_on_partial_ord)]

pub mod error;
pub mod fieldscan;
pub mod flowfield;
pub mod flowmap;
pub mod matops;
pub mod measures;
pub mod montecarlo;
pub mod uqcov;

pub use error::{Error, Result};
pub use fieldscan::{checkpoint_and_resume, run_scan, AxisSpec, FailurePolicy, FieldResult, RecordStatus, ScanSpec};
pub use flowfield::{builtin_model, model_from_grid, Builtin, Diffusion, GriddedField, OutOfDomain, SystemModel};
pub use flowmap::{flow_map_only, solve_flow, FlowSolution, IntegratorConfig, JacobianInverseMode};
pub use matops::{Matrix, SpdMatrix};
pub use measures::{measure_record, MeasureRecord};
pub use uqcov::{covariance, gaussian_predictive, CovarianceDecomposition, UncertaintyScales};
