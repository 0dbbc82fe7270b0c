//! Monte Carlo simulation of the full SDE and of its linearization about the
//! deterministic path, driven by the same realization `(W, ξ)`.
//!
//! # Random streams
//!
//! Sample `i` draws from ChaCha8 seeded with `seed` (expanded by
//! `SeedableRng::seed_from_u64`) on stream number `i`. Within a stream the
//! first `n` standard normals (Ziggurat, `rand_distr::StandardNormal`) give
//! the initial perturbation `z`, with `ξ = ξ₀ + δ Ψ₀ z`; each Euler–Maruyama
//! step then consumes `n` more for the Wiener increment. Every sample's
//! result therefore depends only on `(seed, i)`, and ensembles are
//! bit-identical for any worker count.

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, StandardNormal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::error::{Error, Result};
use crate::flowfield::SystemModel;
use crate::flowmap::{solve_flow, IntegratorConfig};
use crate::matops::{self, kernels, Matrix, SpdMatrix};
use crate::measures;
use crate::uqcov::{gaussian_predictive, UncertaintyScales};

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum DomainExitPolicy {
    #[default]
    Abort,
    SkipAndCount,
}

#[derive(Clone, Debug)]
pub struct McConfig {
    pub samples: usize,
    pub em_step: f64,
    pub seed: u64,
    pub scales: UncertaintyScales,
    pub domain_exit: DomainExitPolicy,
    /// Orders `r` for the ensembles' moment tables.
    pub moment_orders: Vec<f64>,
}

impl McConfig {
    pub fn new(samples: usize, em_step: f64, seed: u64, scales: UncertaintyScales) -> Self {
        McConfig {
            samples,
            em_step,
            seed,
            scales,
            domain_exit: DomainExitPolicy::Abort,
            moment_orders: vec![1.0, 2.0],
        }
    }

    pub fn with_scales(&self, eps: f64, delta: f64) -> Result<Self> {
        let mut c = self.clone();
        c.scales = UncertaintyScales::new(eps, delta, self.scales.xi_cov.clone())?;
        Ok(c)
    }

    fn validate(&self, n: usize, t: f64) -> Result<()> {
        if self.samples < 2 {
            return Err(Error::invalid("Monte Carlo needs at least two samples"));
        }
        if !(self.em_step > 0.0) || self.em_step > t * (1.0 + 1e-12) {
            return Err(Error::invalid(format!(
                "Euler-Maruyama step must lie in (0, t], got {}",
                self.em_step
            )));
        }
        if self.scales.dim() != n {
            return Err(Error::invalid("Ξ₀ dimension does not match the model"));
        }
        if self.moment_orders.iter().any(|&r| !(r >= 1.0)) {
            return Err(Error::invalid("moment orders must be >= 1"));
        }
        Ok(())
    }

    fn grid(&self, t: f64) -> (usize, f64) {
        let steps = IntegratorConfig::with_step(self.em_step).steps_for(t);
        (steps, t / steps as f64)
    }
}

/// A set of final states with its summary statistics.
#[derive(Clone, Debug)]
pub struct Ensemble {
    dim: usize,
    /// Row-major `N × n`.
    pub final_states: Vec<f64>,
    pub mean: Vec<f64>,
    /// Unbiased (divisor `N − 1`).
    pub covariance: Matrix,
    /// `(r, (1/N) Σ ‖x_i − mean‖^r)`
    pub moment_table: Vec<(f64, f64)>,
}

impl Ensemble {
    pub fn from_states(dim: usize, final_states: Vec<f64>, orders: &[f64]) -> Result<Self> {
        if dim == 0 || !final_states.len().is_multiple_of(dim) {
            return Err(Error::invalid("state array does not match the dimension"));
        }
        let count = final_states.len() / dim;
        if count < 2 {
            return Err(Error::Estimation(format!("ensemble has {count} samples, need at least 2")));
        }
        let mut mean = vec![0.0; dim];
        for row in final_states.chunks(dim) {
            for (m, v) in mean.iter_mut().zip(row) {
                *m += v;
            }
        }
        mean.iter_mut().for_each(|m| *m /= count as f64);
        let covariance = covariance_about(&final_states, dim, &mean, 1.0);
        let moment_table = orders
            .iter()
            .map(|&r| {
                let s: f64 = final_states.chunks(dim).map(|row| distance(row, &mean).powf(r)).sum();
                (r, s / count as f64)
            })
            .collect();
        Ok(Ensemble {
            dim,
            final_states,
            mean,
            covariance,
            moment_table,
        })
    }

    pub fn dim(&self) -> usize {
        self.dim
    }

    pub fn len(&self) -> usize {
        self.final_states.len() / self.dim
    }

    pub fn is_empty(&self) -> bool {
        self.final_states.is_empty()
    }

    pub fn state(&self, i: usize) -> &[f64] {
        &self.final_states[i * self.dim..(i + 1) * self.dim]
    }

    pub fn states(&self) -> impl Iterator<Item = &[f64]> {
        self.final_states.chunks(self.dim)
    }
}

fn distance(a: &[f64], b: &[f64]) -> f64 {
    a.iter().zip(b).map(|(x, y)| (x - y) * (x - y)).sum::<f64>().sqrt()
}

/// Unbiased covariance of `(row − mean)/scale` over the rows.
fn covariance_about(states: &[f64], dim: usize, mean: &[f64], scale: f64) -> Matrix {
    let count = states.len() / dim;
    let mut cov = Matrix::zeros(dim);
    let mut d = vec![0.0; dim];
    for row in states.chunks(dim) {
        for k in 0..dim {
            d[k] = (row[k] - mean[k]) / scale;
        }
        for i in 0..dim {
            for j in i..dim {
                cov[(i, j)] += d[i] * d[j];
            }
        }
    }
    for i in 0..dim {
        for j in i..dim {
            let v = cov[(i, j)] / (count as f64 - 1.0);
            cov[(i, j)] = v;
            cov[(j, i)] = v;
        }
    }
    cov
}

/// Coupled ensembles of the full solution `x_t` and the linearized `l_t`,
/// index-aligned: sample `i` of both used the same `ξ` and Wiener path.
#[derive(Clone, Debug)]
pub struct PairEnsemble {
    pub x: Ensemble,
    pub l: Ensemble,
    /// Final deterministic centre `F₀ᵗ(ξ₀)` on the Euler–Maruyama grid.
    pub center: Vec<f64>,
    pub skipped: usize,
    pub attempted: usize,
}

impl PairEnsemble {
    pub fn skipped_fraction(&self) -> f64 {
        self.skipped as f64 / self.attempted as f64
    }

    /// `(1/N) Σ ‖x_i − l_i‖^r`, with its standard error.
    pub fn coupling_moment(&self, r: f64) -> (f64, f64) {
        let vals: Vec<f64> = self.x.states().zip(self.l.states()).map(|(x, l)| distance(x, l).powf(r)).collect();
        let count = vals.len() as f64;
        let mean = vals.iter().sum::<f64>() / count;
        let var = vals.iter().map(|v| (v - mean) * (v - mean)).sum::<f64>() / (count - 1.0);
        (mean, (var / count).sqrt())
    }
}

/// Deterministic centre path on the Euler–Maruyama grid, with `∇u` and `σ`
/// evaluated along it. Shared read-only by every sample.
struct CenterPath {
    n: usize,
    h: f64,
    steps: usize,
    /// `(steps + 1) × n`
    pos: Vec<f64>,
    /// `steps × n`
    vel: Vec<f64>,
    /// `steps × n²`
    grad: Vec<f64>,
    sigma: Vec<f64>,
}

impl CenterPath {
    /// Forward Euler on the same grid the samples use, so that with
    /// `ε = δ = 0` both ensembles reproduce it exactly.
    fn build(model: &SystemModel, xi0: &[f64], steps: usize, h: f64) -> Result<Self> {
        let n = model.dim();
        let nn = n * n;
        let mut path = CenterPath {
            n,
            h,
            steps,
            pos: Vec::with_capacity((steps + 1) * n),
            vel: vec![0.0; steps * n],
            grad: vec![0.0; steps * nn],
            sigma: vec![0.0; steps * nn],
        };
        path.pos.extend_from_slice(xi0);
        let mut x = xi0.to_vec();
        for k in 0..steps {
            let tk = k as f64 * h;
            let exit = |e: Error, x: &[f64]| match e {
                e @ Error::OutOfDomain { .. } => Error::TrajectoryExit {
                    time: tk,
                    position: x.to_vec(),
                    source: Box::new(e),
                },
                other => other,
            };
            model.velocity(&x, tk, &mut path.vel[k * n..(k + 1) * n]).map_err(|e| exit(e, &x))?;
            model
                .velocity_gradient(&x, tk, &mut path.grad[k * nn..(k + 1) * nn])
                .map_err(|e| exit(e, &x))?;
            model
                .diffusion(&x, tk, &mut path.sigma[k * nn..(k + 1) * nn])
                .map_err(|e| exit(e, &x))?;
            for (xi, v) in x.iter_mut().zip(&path.vel[k * n..(k + 1) * n]) {
                *xi += v * h;
            }
            path.pos.extend_from_slice(&x);
        }
        Ok(path)
    }

    fn final_position(&self) -> &[f64] {
        &self.pos[self.steps * self.n..]
    }
}

struct SampleRun<'a> {
    model: &'a SystemModel,
    path: &'a CenterPath,
    xi0: &'a [f64],
    psi: Matrix,
    eps: f64,
    delta: f64,
    seed: u64,
}

impl SampleRun<'_> {
    /// Final `(x_t, l_t)` of sample `index`. A domain exit of `x` is
    /// returned as an error.
    fn run(&self, index: usize) -> Result<(Vec<f64>, Vec<f64>)> {
        let n = self.path.n;
        let nn = n * n;
        let h = self.path.h;
        let sqrt_h = h.sqrt();
        let mut rng = ChaCha8Rng::seed_from_u64(self.seed);
        rng.set_stream(index as u64);

        let mut z = vec![0.0; n];
        z.iter_mut().for_each(|v| *v = StandardNormal.sample(&mut rng));
        let mut offset = vec![0.0; n];
        kernels::mat_vec(n, self.psi.as_slice(), &z, &mut offset);
        let mut x: Vec<f64> = self.xi0.iter().zip(&offset).map(|(c, o)| c + self.delta * o).collect();
        let mut l = x.clone();

        let mut dw = vec![0.0; n];
        let mut u = vec![0.0; n];
        let mut sigma = vec![0.0; nn];
        let mut noise = vec![0.0; n];
        let mut lin = vec![0.0; n];
        let mut dl = vec![0.0; n];
        for k in 0..self.path.steps {
            let tk = k as f64 * h;
            dw.iter_mut()
                .for_each(|v| *v = sqrt_h * Distribution::<f64>::sample(&StandardNormal, &mut rng));

            // full model
            self.model.velocity(&x, tk, &mut u).map_err(|e| self.exit(e, tk, &x))?;
            self.model.diffusion(&x, tk, &mut sigma).map_err(|e| self.exit(e, tk, &x))?;
            kernels::mat_vec(n, &sigma, &dw, &mut noise);
            for i in 0..n {
                x[i] += u[i] * h + self.eps * noise[i];
            }

            // linearization about the centre path
            let c = &self.path.pos[k * n..(k + 1) * n];
            for i in 0..n {
                dl[i] = l[i] - c[i];
            }
            kernels::mat_vec(n, &self.path.grad[k * nn..(k + 1) * nn], &dl, &mut lin);
            kernels::mat_vec(n, &self.path.sigma[k * nn..(k + 1) * nn], &dw, &mut noise);
            let uc = &self.path.vel[k * n..(k + 1) * n];
            for i in 0..n {
                l[i] += (uc[i] + lin[i]) * h + self.eps * noise[i];
            }
        }
        if x.iter().chain(&l).any(|v| !v.is_finite()) {
            return Err(Error::Estimation(format!("sample {index} diverged")));
        }
        Ok((x, l))
    }

    fn exit(&self, e: Error, t: f64, x: &[f64]) -> Error {
        match e {
            e @ Error::OutOfDomain { .. } => Error::TrajectoryExit {
                time: t,
                position: x.to_vec(),
                source: Box::new(e),
            },
            other => other,
        }
    }
}

/// Simulates `samples` coupled realizations of the full SDE and its
/// linearization from `N(ξ₀, δ² Ξ₀)` to time `t` by Euler–Maruyama.
///
/// Runs on the ambient rayon pool; results do not depend on its size.
pub fn simulate_pair(model: &SystemModel, xi0: &[f64], t: f64, cfg: &McConfig) -> Result<PairEnsemble> {
    let n = model.dim();
    if xi0.len() != n {
        return Err(Error::invalid("initial condition dimension mismatch"));
    }
    if !(t > 0.0) || t > model.horizon() {
        return Err(Error::invalid(format!("horizon {t} outside (0, {}]", model.horizon())));
    }
    cfg.validate(n, t)?;
    let (steps, h) = cfg.grid(t);
    let path = CenterPath::build(model, xi0, steps, h)?;
    let run = SampleRun {
        model,
        path: &path,
        xi0,
        psi: cfg.scales.xi_cov.cholesky(),
        eps: cfg.scales.eps,
        delta: cfg.scales.delta,
        seed: cfg.seed,
    };

    let outcomes: Vec<Result<(Vec<f64>, Vec<f64>)>> = (0..cfg.samples).into_par_iter().map(|i| run.run(i)).collect();

    let mut xs = Vec::with_capacity(cfg.samples * n);
    let mut ls = Vec::with_capacity(cfg.samples * n);
    let mut skipped = 0;
    for outcome in outcomes {
        match outcome {
            Ok((x, l)) => {
                xs.extend(x);
                ls.extend(l);
            }
            Err(Error::TrajectoryExit { .. }) if cfg.domain_exit == DomainExitPolicy::SkipAndCount => skipped += 1,
            Err(e) => return Err(e),
        }
    }
    Ok(PairEnsemble {
        x: Ensemble::from_states(n, xs, &cfg.moment_orders)?,
        l: Ensemble::from_states(n, ls, &cfg.moment_orders)?,
        center: path.final_position().to_vec(),
        skipped,
        attempted: cfg.samples,
    })
}

/// Largest eigenvalue of the empirical covariance of `(sample − center)/scale`,
/// which is the supremum over unit `p` of the empirical variance of
/// `pᵀ(sample − center)/scale`.
pub fn projection_variance_sup(ens: &Ensemble, center: &[f64], scale: f64) -> Result<f64> {
    if !(scale > 0.0) {
        return Err(Error::invalid("projection scale must be positive"));
    }
    if ens.len() < 2 {
        return Err(Error::Estimation("need at least two samples".into()));
    }
    if center.len() != ens.dim() {
        return Err(Error::invalid("centre dimension mismatch"));
    }
    let n = ens.dim();
    let shifted: Vec<f64> = ens
        .states()
        .flat_map(|row| row.iter().zip(center).map(|(x, c)| (x - c) / scale))
        .collect();
    let mut mean = vec![0.0; n];
    for row in shifted.chunks(n) {
        for (m, v) in mean.iter_mut().zip(row) {
            *m += v;
        }
    }
    mean.iter_mut().for_each(|m| *m /= ens.len() as f64);
    let cov = covariance_about(&shifted, n, &mean, 1.0);
    Ok(matops::sym_eig(&cov)?.values[0].max(0.0))
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum StudyAxis {
    /// Vary `ε` with `δ = 0`.
    EpsOnly,
    /// Vary `δ` with `ε = 0`.
    DeltaOnly,
}

/// Least span of the levels, in decades.
pub const MIN_STUDY_SPAN_DECADES: f64 = 1.5;
pub const MIN_STUDY_LEVELS: usize = 4;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct StudyRow {
    pub scale: f64,
    pub r: f64,
    pub moment: f64,
    pub stderr: f64,
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FitVerdict {
    Fitted,
    /// The moments do not increase with the scale; sampling noise dominates.
    Inconclusive,
    /// All moments vanish to integrator tolerance (the linearization is exact).
    DegenerateZero,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct SlopeFit {
    pub r: f64,
    /// Fitted `d ln(moment) / d ln(scale)`; NaN when degenerate.
    pub slope: f64,
    pub intercept: f64,
    /// Root-mean-square residual of the log-log fit.
    pub residual: f64,
    pub expected_slope: f64,
    pub verdict: FitVerdict,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
pub struct ScalingStudy {
    pub axis: StudyAxis,
    pub rows: Vec<StudyRow>,
    pub fits: Vec<SlopeFit>,
}

impl ScalingStudy {
    pub fn fit(&self, r: f64) -> Option<&SlopeFit> {
        self.fits.iter().find(|f| f.r == r)
    }

    /// Delimited text, one row per `(scale, r)`.
    pub fn to_delimited<W: std::io::Write>(&self, mut w: W) -> std::io::Result<()> {
        writeln!(w, "scale,r,moment,stderr")?;
        for row in &self.rows {
            writeln!(w, "{:.16e},{:.16e},{:.16e},{:.16e}", row.scale, row.r, row.moment, row.stderr)?;
        }
        Ok(())
    }
}

const DEGENERATE_TOL: f64 = 1e-9;

/// Sweeps one uncertainty scale and fits the log-log slope of
/// `E‖x_t − l_t‖^r`. Every level reuses the same seed, so the levels share
/// their underlying normal draws.
pub fn bound_scaling_study(
    model: &SystemModel,
    xi0: &[f64],
    t: f64,
    axis: StudyAxis,
    levels: &[f64],
    r_orders: &[f64],
    cfg: &McConfig,
) -> Result<ScalingStudy> {
    if levels.len() < MIN_STUDY_LEVELS {
        return Err(Error::invalid(format!(
            "insufficient levels: need at least {MIN_STUDY_LEVELS}, got {}",
            levels.len()
        )));
    }
    if levels.iter().any(|&s| !(s > 0.0) || !s.is_finite()) {
        return Err(Error::invalid("levels must be positive and finite"));
    }
    let mut sorted = levels.to_vec();
    sorted.sort_by(f64::total_cmp);
    sorted.dedup();
    if sorted.len() != levels.len() {
        return Err(Error::invalid("levels must be distinct"));
    }
    let span = (sorted[sorted.len() - 1] / sorted[0]).log10();
    if span < MIN_STUDY_SPAN_DECADES - 1e-12 {
        return Err(Error::invalid(format!(
            "insufficient levels: span of {span:.2} decades, need {MIN_STUDY_SPAN_DECADES}"
        )));
    }
    if r_orders.is_empty() || r_orders.iter().any(|&r| !(r >= 1.0)) {
        return Err(Error::invalid("moment orders must be >= 1"));
    }

    let reference = 1.0 + xi0.iter().map(|v| v * v).sum::<f64>().sqrt();
    let mut rows = Vec::new();
    for &scale in &sorted {
        let level_cfg = match axis {
            StudyAxis::EpsOnly => cfg.with_scales(scale, 0.0)?,
            StudyAxis::DeltaOnly => cfg.with_scales(0.0, scale)?,
        };
        let pair = simulate_pair(model, xi0, t, &level_cfg)?;
        for &r in r_orders {
            let (moment, stderr) = pair.coupling_moment(r);
            rows.push(StudyRow { scale, r, moment, stderr });
        }
    }

    let fits = r_orders
        .iter()
        .map(|&r| {
            let pts: Vec<(f64, f64)> = rows.iter().filter(|row| row.r == r).map(|row| (row.scale, row.moment)).collect();
            fit_slope(r, &pts, reference)
        })
        .collect();
    Ok(ScalingStudy { axis, rows, fits })
}

fn fit_slope(r: f64, pts: &[(f64, f64)], reference: f64) -> SlopeFit {
    let expected_slope = 2.0 * r;
    let degenerate = pts.iter().all(|&(_, m)| m.powf(1.0 / r) <= DEGENERATE_TOL * reference);
    if degenerate {
        return SlopeFit {
            r,
            slope: f64::NAN,
            intercept: f64::NAN,
            residual: f64::NAN,
            expected_slope,
            verdict: FitVerdict::DegenerateZero,
        };
    }
    let monotone = pts.windows(2).all(|w| w[1].1 > w[0].1);
    let logs: Vec<(f64, f64)> = pts.iter().map(|&(s, m)| (s.ln(), m.ln())).collect();
    let k = logs.len() as f64;
    let mx = logs.iter().map(|p| p.0).sum::<f64>() / k;
    let my = logs.iter().map(|p| p.1).sum::<f64>() / k;
    let sxx: f64 = logs.iter().map(|p| (p.0 - mx) * (p.0 - mx)).sum();
    let sxy: f64 = logs.iter().map(|p| (p.0 - mx) * (p.1 - my)).sum();
    let slope = sxy / sxx;
    let intercept = my - slope * mx;
    let residual = (logs.iter().map(|p| (p.1 - intercept - slope * p.0).powi(2)).sum::<f64>() / k).sqrt();
    SlopeFit {
        r,
        slope,
        intercept,
        residual,
        expected_slope,
        verdict: if monotone && slope.is_finite() {
            FitVerdict::Fitted
        } else {
            FitVerdict::Inconclusive
        },
    }
}

/// Empirical law of `x_t` against the Gaussian prediction `N(F₀ᵗ(ξ₀), Λ_t)`.
#[derive(Clone, Debug)]
pub struct GaussianReport {
    /// `‖C_emp − Λ_t‖_F / ‖Λ_t‖_F`
    pub cov_rel_error: f64,
    /// `‖mean_emp − F₀ᵗ(ξ₀)‖`
    pub mean_abs_error: f64,
    pub predicted_mean: Vec<f64>,
    pub predicted_cov: Matrix,
    pub empirical_mean: Vec<f64>,
    pub empirical_cov: Matrix,
    pub skipped: usize,
}

pub fn gaussian_validation(
    model: &SystemModel,
    xi0: &[f64],
    t: f64,
    mc: &McConfig,
    integrator: &IntegratorConfig,
) -> Result<GaussianReport> {
    let sol = solve_flow(model, xi0, t, integrator)?;
    let predicted = gaussian_predictive(&sol, &mc.scales)?;
    let pair = simulate_pair(model, xi0, t, mc)?;
    let diff = pair.x.covariance.sub(&predicted.cov).frobenius_norm();
    let denom = predicted.cov.frobenius_norm();
    let cov_rel_error = if denom > 0.0 {
        diff / denom
    } else if diff == 0.0 {
        0.0
    } else {
        f64::INFINITY
    };
    Ok(GaussianReport {
        cov_rel_error,
        mean_abs_error: distance(&pair.x.mean, &predicted.mean),
        predicted_mean: predicted.mean,
        predicted_cov: predicted.cov,
        empirical_mean: pair.x.mean.clone(),
        empirical_cov: pair.x.covariance.clone(),
        skipped: pair.skipped,
    })
}

/// Monte Carlo estimate of a limit measure next to its analytic value.
#[derive(Clone, Debug)]
pub struct MeasureCheck {
    pub analytic: f64,
    pub estimate: f64,
    pub rel_error: f64,
}

/// `S²` from an `(ε, 0)` ensemble, projected about the deterministic centre
/// and scaled by `ε`.
pub fn s2_check(model: &SystemModel, xi0: &[f64], t: f64, mc: &McConfig, integrator: &IntegratorConfig) -> Result<MeasureCheck> {
    let eps = mc.scales.eps;
    if !(eps > 0.0) {
        return Err(Error::invalid("S² check needs eps > 0"));
    }
    let sol = solve_flow(model, xi0, t, integrator)?;
    let analytic = measures::s2(&sol)?;
    let pair = simulate_pair(model, xi0, t, &mc.with_scales(eps, 0.0)?)?;
    let estimate = projection_variance_sup(&pair.x, &sol.position, eps)?;
    Ok(MeasureCheck {
        analytic,
        estimate,
        rel_error: (estimate - analytic).abs() / analytic,
    })
}

/// `Q²` from a `(0, δ)` ensemble, scaled by `δ`.
pub fn q2_check(model: &SystemModel, xi0: &[f64], t: f64, mc: &McConfig, integrator: &IntegratorConfig) -> Result<MeasureCheck> {
    let delta = mc.scales.delta;
    if !(delta > 0.0) {
        return Err(Error::invalid("Q² check needs delta > 0"));
    }
    let sol = solve_flow(model, xi0, t, integrator)?;
    let analytic = measures::q2(&sol, &mc.scales.xi_cov)?;
    let pair = simulate_pair(model, xi0, t, &mc.with_scales(0.0, delta)?)?;
    let estimate = projection_variance_sup(&pair.x, &sol.position, delta)?;
    Ok(MeasureCheck {
        analytic,
        estimate,
        rel_error: (estimate - analytic).abs() / analytic,
    })
}

/// Convenience for tests and the CLI: isotropic scales on an `n`-state model.
pub fn isotropic_config(n: usize, samples: usize, em_step: f64, seed: u64, eps: f64, delta: f64) -> Result<McConfig> {
    Ok(McConfig::new(
        samples,
        em_step,
        seed,
        UncertaintyScales::new(eps, delta, SpdMatrix::identity(n))?,
    ))
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowfield::{builtin_model, Builtin, Diffusion};
    use approx::assert_relative_eq;

    fn model(b: Builtin) -> SystemModel {
        builtin_model(b, Diffusion::Identity).unwrap()
    }

    #[test]
    fn noiseless_ensembles_collapse_to_the_centre() {
        let m = model(Builtin::standard_double_gyre());
        let cfg = isotropic_config(2, 16, 1e-2, 7, 0.0, 0.0).unwrap();
        let pair = simulate_pair(&m, &[1.0, 0.5], 2.0, &cfg).unwrap();
        for (x, l) in pair.x.states().zip(pair.l.states()) {
            assert_eq!(x, pair.center.as_slice());
            assert_eq!(l, pair.center.as_slice());
        }
        assert!(pair.x.covariance.max_abs() < 1e-28);
        // The Euler centre is first-order close to the RK4 flow map.
        let exact = crate::flowmap::advect(&m, &[1.0, 0.5], 2.0, &IntegratorConfig::default()).unwrap();
        assert!(distance(&pair.center, &exact) < 1e-2);
    }

    #[test]
    fn zero_drift_linearization_is_exact() {
        let m = model(Builtin::Zero { dim: 2 });
        let cfg = isotropic_config(2, 4000, 1e-2, 11, 0.5, 0.0).unwrap();
        let pair = simulate_pair(&m, &[0.0, 0.0], 1.0, &cfg).unwrap();
        for (x, l) in pair.x.states().zip(pair.l.states()) {
            assert_eq!(x, l);
        }
        // Var = ε² t I within sampling error (sqrt(2/N) ≈ 2.2%).
        let c = &pair.x.covariance;
        assert!((c[(0, 0)] - 0.25).abs() < 0.25 * 0.1);
        assert!((c[(1, 1)] - 0.25).abs() < 0.25 * 0.1);
        assert!(c[(0, 1)].abs() < 0.25 * 0.1);
    }

    #[test]
    fn linear_drift_linearization_is_exact() {
        let m = model(Builtin::LinearSaddle { a: 0.8 });
        let cfg = isotropic_config(2, 500, 1e-3, 5, 0.1, 0.1).unwrap();
        let pair = simulate_pair(&m, &[0.3, -0.2], 1.0, &cfg).unwrap();
        let worst = pair
            .x
            .states()
            .zip(pair.l.states())
            .map(|(x, l)| distance(x, l))
            .fold(0.0, f64::max);
        assert!(worst < 1e-13, "{worst}");
    }

    #[test]
    fn identical_seed_is_bit_identical() {
        let m = model(Builtin::standard_double_gyre());
        let cfg = isotropic_config(2, 64, 1e-2, 99, 0.01, 0.01).unwrap();
        let a = simulate_pair(&m, &[0.7, 0.3], 1.0, &cfg).unwrap();
        let single = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let b = single.install(|| simulate_pair(&m, &[0.7, 0.3], 1.0, &cfg).unwrap());
        assert_eq!(a.x.final_states, b.x.final_states);
        assert_eq!(a.l.final_states, b.l.final_states);
        let other = simulate_pair(&m, &[0.7, 0.3], 1.0, &McConfig { seed: 100, ..cfg }).unwrap();
        assert_ne!(a.x.final_states, other.x.final_states);
    }

    #[test]
    fn projection_sup_examples() {
        let same = Ensemble::from_states(2, [1.0, 2.0].repeat(10), &[]).unwrap();
        assert_eq!(projection_variance_sup(&same, &[1.0, 2.0], 1.0).unwrap(), 0.0);

        // N(0, diag(4, 1)) drawn directly.
        let mut rng = ChaCha8Rng::seed_from_u64(3);
        let states: Vec<f64> = (0..100_000)
            .flat_map(|_| {
                let a: f64 = StandardNormal.sample(&mut rng);
                let b: f64 = StandardNormal.sample(&mut rng);
                [2.0 * a, b]
            })
            .collect();
        let ens = Ensemble::from_states(2, states, &[]).unwrap();
        let sup = projection_variance_sup(&ens, &[0.0, 0.0], 1.0).unwrap();
        assert!((sup - 4.0).abs() < 0.2, "{sup}");

        let one = Ensemble {
            dim: 2,
            final_states: vec![0.0, 0.0],
            mean: vec![0.0, 0.0],
            covariance: Matrix::zeros(2),
            moment_table: vec![],
        };
        assert!(matches!(projection_variance_sup(&one, &[0.0, 0.0], 1.0), Err(Error::Estimation(_))));
    }

    #[test]
    fn projection_sup_is_the_dense_sweep_maximum() {
        let m = model(Builtin::standard_double_gyre());
        let cfg = isotropic_config(2, 300, 1e-2, 1, 0.05, 0.02).unwrap();
        let pair = simulate_pair(&m, &[1.0, 0.5], 3.0, &cfg).unwrap();
        let center = pair.center.clone();
        let sup = projection_variance_sup(&pair.x, &center, 0.05).unwrap();
        let cov = &pair.x.covariance;
        let steps = (std::f64::consts::PI / 1e-3).ceil() as usize;
        let swept = (0..steps)
            .map(|k| {
                let (s, c) = (k as f64 * 1e-3).sin_cos();
                (c * c * cov[(0, 0)] + 2.0 * s * c * cov[(0, 1)] + s * s * cov[(1, 1)]) / 0.0025
            })
            .fold(0.0, f64::max);
        assert!(sup >= swept * (1.0 - 1e-12));
        assert!((sup - swept) / sup < 1e-5);
    }

    #[test]
    fn ensemble_statistics() {
        let e = Ensemble::from_states(1, vec![1.0, 2.0, 3.0, 6.0], &[1.0, 2.0]).unwrap();
        assert_eq!(e.mean, vec![3.0]);
        assert_relative_eq!(e.covariance[(0, 0)], 14.0 / 3.0);
        assert_eq!(e.moment_table, vec![(1.0, 1.5), (2.0, 3.5)]);
    }

    #[test]
    fn domain_exit_policies() {
        use crate::flowfield::{model_from_grid, GriddedField, OutOfDomain};
        let zero = model(Builtin::Zero { dim: 2 });
        let axes = vec![vec![-1.0, 1.0], vec![-1.0, 1.0]];
        let field = GriddedField::sample(&zero, axes, vec![0.0, 2.0], false).unwrap();
        let m = model_from_grid(field, OutOfDomain::Error).unwrap();
        let mut cfg = isotropic_config(2, 200, 1e-2, 4, 0.0, 0.6).unwrap();
        assert!(matches!(
            simulate_pair(&m, &[0.0, 0.0], 1.0, &cfg),
            Err(Error::TrajectoryExit { .. })
        ));
        cfg.domain_exit = DomainExitPolicy::SkipAndCount;
        let pair = simulate_pair(&m, &[0.0, 0.0], 1.0, &cfg).unwrap();
        assert!(pair.skipped > 0);
        assert_eq!(pair.x.len() + pair.skipped, 200);
        assert!(pair.skipped_fraction() < 0.5);
    }

    #[test]
    fn study_preconditions() {
        let m = model(Builtin::LinearSaddle { a: 1.0 });
        let cfg = isotropic_config(2, 50, 1e-2, 1, 0.0, 0.0).unwrap();
        let err = bound_scaling_study(&m, &[0.1, 0.1], 1.0, StudyAxis::EpsOnly, &[0.1, 0.01], &[1.0], &cfg).unwrap_err();
        assert!(err.to_string().contains("insufficient levels"));
        let err = bound_scaling_study(&m, &[0.1, 0.1], 1.0, StudyAxis::EpsOnly, &[0.1, 0.09, 0.08, 0.07], &[1.0], &cfg).unwrap_err();
        assert!(err.to_string().contains("insufficient levels"));
    }

    #[test]
    fn linear_study_is_degenerate() {
        let m = model(Builtin::LinearSaddle { a: 1.0 });
        let cfg = isotropic_config(2, 100, 1e-2, 1, 0.0, 0.0).unwrap();
        let levels = [1e-1, 3e-2, 1e-2, 3e-3];
        for axis in [StudyAxis::EpsOnly, StudyAxis::DeltaOnly] {
            let study = bound_scaling_study(&m, &[0.1, 0.1], 1.0, axis, &levels, &[1.0, 2.0], &cfg).unwrap();
            assert_eq!(study.rows.len(), 8);
            assert!(study.fits.iter().all(|f| f.verdict == FitVerdict::DegenerateZero));
        }
    }

    #[test]
    fn slope_fit_on_exact_power_law() {
        let pts: Vec<(f64, f64)> = [0.1, 0.03, 0.01, 0.003].iter().rev().map(|&s| (s, 5.0 * s * s)).collect();
        let fit = fit_slope(1.0, &pts, 1.0);
        assert_eq!(fit.verdict, FitVerdict::Fitted);
        assert_relative_eq!(fit.slope, 2.0, max_relative = 1e-12);
        assert!(fit.residual < 1e-12);
        let noisy = vec![(0.003, 1.0), (0.01, 0.5), (0.03, 2.0), (0.1, 3.0)];
        assert_eq!(fit_slope(1.0, &noisy, 1.0).verdict, FitVerdict::Inconclusive);
    }
}
