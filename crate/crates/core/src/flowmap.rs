//! Deterministic flow map with its variational equations.
//!
//! One fixed-step RK4 stepper advances the augmented state
//!
//! ```text
//! dx/dτ    = u(x, τ)
//! dJ/dτ    = ∇u(x, τ) J            J(0)    = I
//! dJ⁻¹/dτ  = −J⁻¹ ∇u(x, τ)         J⁻¹(0)  = I
//! dK/dτ    = M Mᵀ,  M = J⁻¹ σ(x,τ)  K(0)    = 0
//! ```
//!
//! so the position, Jacobian, inverse Jacobian and noise quadrature are all
//! consistent at fourth order under a single step-size knob.

use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowfield::SystemModel;
use crate::matops::{self, kernels, Matrix};

/// Eigenvalues of `K` in `[-PSD_CLAMP_TOL·max(1,‖K‖), 0)` are clamped to zero.
pub const PSD_CLAMP_TOL: f64 = 1e-10;

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Scheme {
    #[default]
    Rk4,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum JacobianInverseMode {
    /// Integrate `J⁻¹` by its own adjoint equation.
    #[default]
    AdjointOde,
    /// Invert the stage Jacobian wherever `J⁻¹` is needed.
    DirectInvert,
}

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct IntegratorConfig {
    #[serde(default = "default_step")]
    pub step_size: f64,
    #[serde(default)]
    pub scheme: Scheme,
    #[serde(default)]
    pub jacobian_inverse_mode: JacobianInverseMode,
    #[serde(default = "default_defect")]
    pub defect_threshold: f64,
}

fn default_step() -> f64 {
    1e-3
}

fn default_defect() -> f64 {
    1e-6
}

impl Default for IntegratorConfig {
    fn default() -> Self {
        IntegratorConfig {
            step_size: default_step(),
            scheme: Scheme::Rk4,
            jacobian_inverse_mode: JacobianInverseMode::AdjointOde,
            defect_threshold: default_defect(),
        }
    }
}

impl IntegratorConfig {
    pub fn with_step(step_size: f64) -> Self {
        IntegratorConfig {
            step_size,
            ..Default::default()
        }
    }

    pub fn validate(&self) -> Result<()> {
        if !(self.step_size > 0.0) || !self.step_size.is_finite() {
            return Err(Error::invalid(format!("step size must be positive, got {}", self.step_size)));
        }
        if !(self.defect_threshold >= 0.0) {
            return Err(Error::invalid("defect threshold must be non-negative"));
        }
        Ok(())
    }

    /// Number of equal steps covering `span`, each no longer than the
    /// configured step.
    pub(crate) fn steps_for(&self, span: f64) -> usize {
        let raw = span / self.step_size;
        let rounded = raw.round();
        // Treat spans within roundoff of an integer multiple as exact.
        if (raw - rounded).abs() <= 1e-9 * raw.max(1.0) {
            (rounded as usize).max(1)
        } else {
            (raw.ceil() as usize).max(1)
        }
    }
}

/// Output of [`solve_flow`].
#[derive(Clone, Debug)]
pub struct FlowSolution {
    pub xi0: Vec<f64>,
    pub t: f64,
    pub position: Vec<f64>,
    pub jacobian: Matrix,
    pub jacobian_inverse: Matrix,
    /// `K_t = ∫₀ᵗ M Mᵀ dτ`, symmetric PSD.
    pub quad: Matrix,
    /// `‖J J⁻¹ − I‖` (operator norm).
    pub consistency_defect: f64,
}

impl FlowSolution {
    pub fn dim(&self) -> usize {
        self.position.len()
    }
}

/// Which blocks of the augmented state are integrated.
#[derive(Clone, Copy, PartialEq, Eq)]
enum Blocks {
    Jacobian,
    Full(JacobianInverseMode),
}

/// Offsets into the flat augmented state `[x | J | J⁻¹ | K]`.
struct Layout {
    n: usize,
    blocks: Blocks,
}

impl Layout {
    fn len(&self) -> usize {
        let n = self.n;
        match self.blocks {
            Blocks::Jacobian => n + n * n,
            Blocks::Full(JacobianInverseMode::AdjointOde) => n + 3 * n * n,
            Blocks::Full(JacobianInverseMode::DirectInvert) => n + 2 * n * n,
        }
    }

    fn jac(&self) -> std::ops::Range<usize> {
        self.n..self.n + self.n * self.n
    }

    fn inv(&self) -> Option<std::ops::Range<usize>> {
        let nn = self.n * self.n;
        match self.blocks {
            Blocks::Full(JacobianInverseMode::AdjointOde) => Some(self.n + nn..self.n + 2 * nn),
            _ => None,
        }
    }

    fn quad(&self) -> Option<std::ops::Range<usize>> {
        let nn = self.n * self.n;
        match self.blocks {
            Blocks::Jacobian => None,
            Blocks::Full(JacobianInverseMode::AdjointOde) => Some(self.n + 2 * nn..self.n + 3 * nn),
            Blocks::Full(JacobianInverseMode::DirectInvert) => Some(self.n + nn..self.n + 2 * nn),
        }
    }

    fn initial(&self, xi0: &[f64]) -> Vec<f64> {
        let n = self.n;
        let mut y = vec![0.0; self.len()];
        y[..n].copy_from_slice(xi0);
        let mut set_identity = |r: std::ops::Range<usize>| {
            for i in 0..n {
                y[r.start + i * n + i] = 1.0;
            }
        };
        set_identity(self.jac());
        if let Some(r) = self.inv() {
            set_identity(r);
        }
        y
    }
}

/// The right-hand side of the augmented system plus its scratch buffers.
struct Augmented<'a> {
    model: &'a SystemModel,
    layout: Layout,
    grad: Vec<f64>,
    sigma: Vec<f64>,
    m: Vec<f64>,
    inv: Vec<f64>,
    work: Vec<f64>,
}

impl<'a> Augmented<'a> {
    fn new(model: &'a SystemModel, blocks: Blocks) -> Self {
        let n = model.dim();
        let nn = n * n;
        Augmented {
            model,
            layout: Layout { n, blocks },
            grad: vec![0.0; nn],
            sigma: vec![0.0; nn],
            m: vec![0.0; nn],
            inv: vec![0.0; nn],
            work: vec![0.0; nn],
        }
    }

    fn rhs(&mut self, t: f64, y: &[f64], dy: &mut [f64]) -> Result<()> {
        let n = self.layout.n;
        let x = &y[..n];
        self.model.velocity(x, t, &mut dy[..n])?;
        self.model.velocity_gradient(x, t, &mut self.grad)?;

        let jr = self.layout.jac();
        kernels::mat_mul(n, &self.grad, &y[jr.clone()], &mut dy[jr.clone()]);

        let Some(qr) = self.layout.quad() else {
            return Ok(());
        };
        let inv: &[f64] = match self.layout.inv() {
            Some(ir) => {
                // d(J⁻¹) = −J⁻¹ ∇u
                kernels::mat_mul(n, &y[ir.clone()], &self.grad, &mut dy[ir.clone()]);
                dy[ir.clone()].iter_mut().for_each(|v| *v = -*v);
                &y[ir]
            }
            None => {
                self.work.copy_from_slice(&y[jr]);
                if !kernels::invert(n, &mut self.work, &mut self.inv) {
                    return Err(Error::Singular { condition: f64::INFINITY });
                }
                &self.inv
            }
        };
        self.model.diffusion(x, t, &mut self.sigma)?;
        kernels::mat_mul(n, inv, &self.sigma, &mut self.m);
        kernels::mat_mul_bt(n, &self.m, &self.m, &mut dy[qr]);
        Ok(())
    }
}

/// Classical fixed-step RK4 over a flat state vector.
struct Rk4 {
    k1: Vec<f64>,
    k2: Vec<f64>,
    k3: Vec<f64>,
    k4: Vec<f64>,
    stage: Vec<f64>,
}

impl Rk4 {
    fn new(len: usize) -> Self {
        Rk4 {
            k1: vec![0.0; len],
            k2: vec![0.0; len],
            k3: vec![0.0; len],
            k4: vec![0.0; len],
            stage: vec![0.0; len],
        }
    }

    fn step(&mut self, sys: &mut Augmented<'_>, t: f64, h: f64, y: &mut [f64]) -> Result<()> {
        let half = 0.5 * h;
        sys.rhs(t, y, &mut self.k1)?;
        for ((s, yi), k) in self.stage.iter_mut().zip(y.iter()).zip(&self.k1) {
            *s = yi + half * k;
        }
        sys.rhs(t + half, &self.stage, &mut self.k2)?;
        for ((s, yi), k) in self.stage.iter_mut().zip(y.iter()).zip(&self.k2) {
            *s = yi + half * k;
        }
        sys.rhs(t + half, &self.stage, &mut self.k3)?;
        for ((s, yi), k) in self.stage.iter_mut().zip(y.iter()).zip(&self.k3) {
            *s = yi + h * k;
        }
        sys.rhs(t + h, &self.stage, &mut self.k4)?;
        let sixth = h / 6.0;
        for (i, yi) in y.iter_mut().enumerate() {
            *yi += sixth * (self.k1[i] + 2.0 * self.k2[i] + 2.0 * self.k3[i] + self.k4[i]);
        }
        Ok(())
    }
}

fn check_request(model: &SystemModel, xi0: &[f64], times: &[f64], cfg: &IntegratorConfig) -> Result<()> {
    cfg.validate()?;
    if xi0.len() != model.dim() {
        return Err(Error::invalid(format!(
            "initial condition has dimension {}, model has {}",
            xi0.len(),
            model.dim()
        )));
    }
    if xi0.iter().any(|v| !v.is_finite()) {
        return Err(Error::invalid("initial condition must be finite"));
    }
    let mut prev = 0.0;
    for &t in times {
        if !(t > prev) {
            return Err(Error::invalid(format!(
                "horizon times must be positive and strictly increasing, got {times:?}"
            )));
        }
        if t > model.horizon() {
            return Err(Error::invalid(format!("time {t} exceeds the model horizon {}", model.horizon())));
        }
        prev = t;
    }
    if let Some(&last) = times.first() {
        // step_size ≤ t on the shortest request
        if cfg.step_size > last * (1.0 + 1e-12) {
            return Err(Error::invalid(format!("step size {} exceeds the horizon {last}", cfg.step_size)));
        }
    }
    Ok(())
}

/// Integrates the augmented state through the increasing `times`, calling
/// `capture` at each. Each segment between captures uses equal steps no
/// longer than the configured step. Stops at the first failure, returning
/// it after the successful captures.
fn integrate<F>(model: &SystemModel, xi0: &[f64], times: &[f64], cfg: &IntegratorConfig, blocks: Blocks, mut capture: F) -> Result<()>
where
    F: FnMut(f64, &[f64], &Layout) -> Result<()>,
{
    let mut sys = Augmented::new(model, blocks);
    let mut y = sys.layout.initial(xi0);
    let mut rk = Rk4::new(y.len());
    let n = model.dim();
    let mut t0 = 0.0;
    for &t1 in times {
        let steps = cfg.steps_for(t1 - t0);
        let h = (t1 - t0) / steps as f64;
        for k in 0..steps {
            let t = t0 + k as f64 * h;
            if let Err(e) = rk.step(&mut sys, t, h, &mut y) {
                return Err(match e {
                    e @ Error::OutOfDomain { .. } => Error::TrajectoryExit {
                        time: t,
                        position: y[..n].to_vec(),
                        source: Box::new(e),
                    },
                    other => other,
                });
            }
        }
        if y.iter().any(|v| !v.is_finite()) {
            return Err(Error::Conditioning {
                defect: f64::INFINITY,
                threshold: cfg.defect_threshold,
            });
        }
        capture(t1, &y, &sys.layout)?;
        t0 = t1;
    }
    Ok(())
}

fn assemble(xi0: &[f64], t: f64, y: &[f64], layout: &Layout, cfg: &IntegratorConfig) -> Result<FlowSolution> {
    let n = layout.n;
    let jacobian = Matrix::from_row_major(n, y[layout.jac()].to_vec())?;
    let jacobian_inverse = match layout.inv() {
        Some(r) => Matrix::from_row_major(n, y[r].to_vec())?,
        None => matops::invert(&jacobian)?,
    };
    let defect = operator_defect(&jacobian, &jacobian_inverse)?;
    if defect > cfg.defect_threshold {
        return Err(Error::Conditioning {
            defect,
            threshold: cfg.defect_threshold,
        });
    }
    let raw_quad = Matrix::from_row_major(n, y[layout.quad().expect("full blocks")].to_vec())?;
    let quad = matops::clamp_psd(&raw_quad, PSD_CLAMP_TOL)?;
    Ok(FlowSolution {
        xi0: xi0.to_vec(),
        t,
        position: y[..n].to_vec(),
        jacobian,
        jacobian_inverse,
        quad,
        consistency_defect: defect,
    })
}

fn operator_defect(j: &Matrix, jinv: &Matrix) -> Result<f64> {
    let r = (j * jinv).sub(&Matrix::identity(j.dim()));
    matops::operator_norm(&r)
}

/// Flow map, Jacobian, inverse Jacobian and noise quadrature at time `t`.
pub fn solve_flow(model: &SystemModel, xi0: &[f64], t: f64, cfg: &IntegratorConfig) -> Result<FlowSolution> {
    let mut out = solve_flow_at(model, xi0, &[t], cfg)?;
    Ok(out.pop().expect("one requested time"))
}

/// [`solve_flow`] at several increasing times from a single integration.
pub fn solve_flow_at(model: &SystemModel, xi0: &[f64], times: &[f64], cfg: &IntegratorConfig) -> Result<Vec<FlowSolution>> {
    let mut out = Vec::with_capacity(times.len());
    solve_flow_partial(model, xi0, times, cfg, &mut out)?;
    Ok(out)
}

/// Like [`solve_flow_at`] but keeps the captures made before a failure.
pub(crate) fn solve_flow_partial(
    model: &SystemModel,
    xi0: &[f64],
    times: &[f64],
    cfg: &IntegratorConfig,
    out: &mut Vec<FlowSolution>,
) -> Result<()> {
    check_request(model, xi0, times, cfg)?;
    let blocks = Blocks::Full(cfg.jacobian_inverse_mode);
    integrate(model, xi0, times, cfg, blocks, |t, y, layout| {
        out.push(assemble(xi0, t, y, layout, cfg)?);
        Ok(())
    })
}

/// Position and Jacobian only, for FTLE-only work.
pub fn flow_map_only(model: &SystemModel, xi0: &[f64], t: f64, cfg: &IntegratorConfig) -> Result<(Vec<f64>, Matrix)> {
    check_request(model, xi0, &[t], cfg)?;
    let mut result = None;
    integrate(model, xi0, &[t], cfg, Blocks::Jacobian, |_, y, layout| {
        let j = Matrix::from_row_major(layout.n, y[layout.jac()].to_vec())?;
        result = Some((y[..layout.n].to_vec(), j));
        Ok(())
    })?;
    Ok(result.expect("captured"))
}

/// Position only (no variational blocks). Used by trajectory-based checks.
pub fn advect(model: &SystemModel, xi0: &[f64], t: f64, cfg: &IntegratorConfig) -> Result<Vec<f64>> {
    Ok(flow_map_only(model, xi0, t, cfg)?.0)
}
