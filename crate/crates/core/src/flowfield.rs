//! System models `dx = u(x,t) dt + ε σ(x,t) dW`: analytic fixtures and
//! multilinear interpolation of gridded velocity data.

use std::f64::consts::PI;
use std::fmt;
use std::io::Read;
use std::path::Path;
use std::sync::Arc;

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::matops::Matrix;

/// Axis index used in [`Error::OutOfDomain`] for the time coordinate.
pub const TIME_AXIS: usize = usize::MAX;

/// Deterministic drift `u(x, t)` with its spatial gradient.
///
/// Implementations write into caller-provided buffers so the integrators can
/// run without allocating. `velocity_gradient` writes the row-major matrix
/// `∂u_i/∂x_j`.
pub trait VectorField: Send + Sync {
    fn dim(&self) -> usize;
    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()>;
    fn velocity_gradient(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()>;
}

/// A state- and time-dependent `n×n` matrix field, used for `σ`.
pub trait MatrixField: Send + Sync {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()>;
}

impl<F> MatrixField for F
where
    F: Fn(&[f64], f64, &mut [f64]) + Send + Sync,
{
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self(x, t, out);
        Ok(())
    }
}

#[derive(Clone)]
pub enum Diffusion {
    Identity,
    Constant(Matrix),
    StateDependent(Arc<dyn MatrixField>),
}

impl fmt::Debug for Diffusion {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match self {
            Diffusion::Identity => f.write_str("Identity"),
            Diffusion::Constant(m) => f.debug_tuple("Constant").field(m).finish(),
            Diffusion::StateDependent(_) => f.write_str("StateDependent(..)"),
        }
    }
}

impl Diffusion {
    fn describe(&self) -> String {
        match self {
            Diffusion::Identity => "identity".into(),
            Diffusion::Constant(m) => format!("constant{:?}", m.as_slice()),
            Diffusion::StateDependent(_) => "state_dependent".into(),
        }
    }
}

/// Built-in analytic drifts.
#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(tag = "name", rename_all = "snake_case", deny_unknown_fields)]
pub enum Builtin {
    /// `u ≡ 0` in `dim` dimensions.
    Zero { dim: usize },
    /// `u = (a x₁, −a x₂)`.
    LinearSaddle { a: f64 },
    /// `u = (−ω x₂, ω x₁)`.
    RigidRotation { omega: f64 },
    /// The unsteady double gyre on `[0,2]×[0,1]`.
    DoubleGyre { amplitude: f64, perturbation: f64, frequency: f64 },
}

impl Builtin {
    /// The customary double-gyre parameters `A = 0.1, ε = 0.1, ω = π/5`.
    pub fn standard_double_gyre() -> Self {
        Builtin::DoubleGyre {
            amplitude: 0.1,
            perturbation: 0.1,
            frequency: PI / 5.0,
        }
    }

    fn params(&self) -> Vec<f64> {
        match *self {
            Builtin::Zero { .. } => vec![],
            Builtin::LinearSaddle { a } => vec![a],
            Builtin::RigidRotation { omega } => vec![omega],
            Builtin::DoubleGyre {
                amplitude,
                perturbation,
                frequency,
            } => vec![amplitude, perturbation, frequency],
        }
    }
}

impl fmt::Display for Builtin {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        match *self {
            Builtin::Zero { dim } => write!(f, "zero(dim={dim})"),
            Builtin::LinearSaddle { a } => write!(f, "linear_saddle(a={a:?})"),
            Builtin::RigidRotation { omega } => write!(f, "rigid_rotation(omega={omega:?})"),
            Builtin::DoubleGyre {
                amplitude,
                perturbation,
                frequency,
            } => write!(f, "double_gyre(A={amplitude:?},eps={perturbation:?},omega={frequency:?})"),
        }
    }
}

impl VectorField for Builtin {
    fn dim(&self) -> usize {
        match *self {
            Builtin::Zero { dim } => dim,
            _ => 2,
        }
    }

    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match *self {
            Builtin::Zero { .. } => out.iter_mut().for_each(|v| *v = 0.0),
            Builtin::LinearSaddle { a } => {
                out[0] = a * x[0];
                out[1] = -a * x[1];
            }
            Builtin::RigidRotation { omega } => {
                out[0] = -omega * x[1];
                out[1] = omega * x[0];
            }
            Builtin::DoubleGyre {
                amplitude,
                perturbation,
                frequency,
            } => {
                let g = Gyre::at(amplitude, perturbation, frequency, x, t);
                out[0] = -PI * amplitude * g.sin_f * g.cos_y;
                out[1] = PI * amplitude * g.cos_f * g.sin_y * g.df;
            }
        }
        Ok(())
    }

    fn velocity_gradient(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match *self {
            Builtin::Zero { .. } => out.iter_mut().for_each(|v| *v = 0.0),
            Builtin::LinearSaddle { a } => {
                out.copy_from_slice(&[a, 0.0, 0.0, -a]);
            }
            Builtin::RigidRotation { omega } => {
                out.copy_from_slice(&[0.0, -omega, omega, 0.0]);
            }
            Builtin::DoubleGyre {
                amplitude,
                perturbation,
                frequency,
            } => {
                let g = Gyre::at(amplitude, perturbation, frequency, x, t);
                let pa = PI * amplitude;
                let ppa = PI * pa;
                out[0] = -ppa * g.cos_f * g.df * g.cos_y;
                out[1] = ppa * g.sin_f * g.sin_y;
                out[2] = -ppa * g.sin_f * g.df * g.df * g.sin_y + pa * g.cos_f * g.sin_y * g.d2f;
                out[3] = ppa * g.cos_f * g.cos_y * g.df;
            }
        }
        Ok(())
    }
}

/// Shared trigonometric pieces of the double-gyre stream function
/// `ψ = A sin(π f(x,t)) sin(π y)`, `f = a(t) x² + b(t) x`.
struct Gyre {
    sin_f: f64,
    cos_f: f64,
    sin_y: f64,
    cos_y: f64,
    df: f64,
    d2f: f64,
}

impl Gyre {
    #[inline]
    fn at(_amplitude: f64, eps: f64, omega: f64, x: &[f64], t: f64) -> Self {
        let a = eps * (omega * t).sin();
        let b = 1.0 - 2.0 * a;
        let f = a * x[0] * x[0] + b * x[0];
        let (sin_f, cos_f) = (PI * f).sin_cos();
        let (sin_y, cos_y) = (PI * x[1]).sin_cos();
        Gyre {
            sin_f,
            cos_f,
            sin_y,
            cos_y,
            df: 2.0 * a * x[0] + b,
            d2f: 2.0 * a,
        }
    }
}

/// The pair `(u, σ)` with a time horizon.
///
/// Cloning is cheap; the drift is shared behind an `Arc`, and all evaluation
/// is read-only so a model can be used from many threads at once.
#[derive(Clone)]
pub struct SystemModel {
    drift: Arc<dyn VectorField>,
    diffusion: Diffusion,
    horizon: f64,
    descriptor: String,
}

impl fmt::Debug for SystemModel {
    fn fmt(&self, f: &mut fmt::Formatter<'_>) -> fmt::Result {
        f.debug_struct("SystemModel")
            .field("descriptor", &self.descriptor)
            .field("horizon", &self.horizon)
            .finish()
    }
}

impl SystemModel {
    /// Wraps an arbitrary drift. `descriptor` identifies the model in scan
    /// checkpoints and output provenance.
    pub fn new(drift: Arc<dyn VectorField>, diffusion: Diffusion, horizon: f64, descriptor: impl Into<String>) -> Result<Self> {
        let n = drift.dim();
        if n == 0 {
            return Err(Error::invalid("model dimension must be at least 1"));
        }
        if !(horizon > 0.0) {
            return Err(Error::invalid(format!("time horizon must be positive, got {horizon}")));
        }
        if let Diffusion::Constant(m) = &diffusion {
            if m.dim() != n || !m.is_finite() {
                return Err(Error::invalid("constant diffusion must be a finite n×n matrix"));
            }
        }
        let descriptor = format!("{};sigma={}", descriptor.into(), diffusion.describe());
        Ok(SystemModel {
            drift,
            diffusion,
            horizon,
            descriptor,
        })
    }

    pub fn dim(&self) -> usize {
        self.drift.dim()
    }

    /// Final time `T` of the model's time domain `[0, T]`.
    pub fn horizon(&self) -> f64 {
        self.horizon
    }

    pub fn with_horizon(mut self, horizon: f64) -> Result<Self> {
        if !(horizon > 0.0) {
            return Err(Error::invalid(format!("time horizon must be positive, got {horizon}")));
        }
        self.horizon = horizon;
        Ok(self)
    }

    /// Same drift and horizon with a different `σ`.
    pub fn with_diffusion(self, diffusion: Diffusion) -> Result<Self> {
        let base = self.descriptor.split(";sigma=").next().unwrap_or_default().to_string();
        SystemModel::new(self.drift, diffusion, self.horizon, base)
    }

    pub fn descriptor(&self) -> &str {
        &self.descriptor
    }

    pub fn diffusion_kind(&self) -> &Diffusion {
        &self.diffusion
    }

    #[inline]
    pub fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.drift.velocity(x, t, out)
    }

    #[inline]
    pub fn velocity_gradient(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        self.drift.velocity_gradient(x, t, out)
    }

    #[inline]
    pub fn diffusion(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        match &self.diffusion {
            Diffusion::Identity => {
                let n = x.len();
                out.iter_mut().for_each(|v| *v = 0.0);
                for i in 0..n {
                    out[i * n + i] = 1.0;
                }
                Ok(())
            }
            Diffusion::Constant(m) => {
                out.copy_from_slice(m.as_slice());
                Ok(())
            }
            Diffusion::StateDependent(field) => field.eval(x, t, out),
        }
    }

    /// Allocating convenience wrappers.
    pub fn velocity_at(&self, x: &[f64], t: f64) -> Result<Vec<f64>> {
        let mut out = vec![0.0; self.dim()];
        self.velocity(x, t, &mut out)?;
        Ok(out)
    }

    pub fn gradient_at(&self, x: &[f64], t: f64) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.dim());
        self.velocity_gradient(x, t, out.as_mut_slice())?;
        Ok(out)
    }

    pub fn diffusion_at(&self, x: &[f64], t: f64) -> Result<Matrix> {
        let mut out = Matrix::zeros(self.dim());
        self.diffusion(x, t, out.as_mut_slice())?;
        Ok(out)
    }
}

/// Builds one of the analytic fixtures. The time horizon is unbounded.
pub fn builtin_model(builtin: Builtin, diffusion: Diffusion) -> Result<SystemModel> {
    if builtin.params().iter().any(|p| !p.is_finite()) {
        return Err(Error::Config(format!("non-finite parameter in {builtin}")));
    }
    if let Builtin::Zero { dim } = builtin {
        if dim == 0 {
            return Err(Error::Config("zero model needs dim >= 1".into()));
        }
    }
    SystemModel::new(Arc::new(builtin), diffusion, f64::INFINITY, builtin.to_string())
}

/// Parses a built-in name with positional parameters, e.g.
/// `double_gyre` with `[0.1, 0.1, 0.628]`.
pub fn builtin_by_name(name: &str, params: &[f64]) -> Result<Builtin> {
    let want = |k: usize| -> Result<()> {
        if params.len() == k {
            Ok(())
        } else {
            Err(Error::Config(format!(
                "builtin '{name}' takes {k} parameters, got {}",
                params.len()
            )))
        }
    };
    match name {
        "zero" => {
            want(1)?;
            let dim = params[0];
            if dim < 1.0 || dim.fract() != 0.0 {
                return Err(Error::Config(format!("zero model dimension must be a positive integer, got {dim}")));
            }
            Ok(Builtin::Zero { dim: dim as usize })
        }
        "linear_saddle" => {
            want(1)?;
            Ok(Builtin::LinearSaddle { a: params[0] })
        }
        "rigid_rotation" => {
            want(1)?;
            Ok(Builtin::RigidRotation { omega: params[0] })
        }
        "double_gyre" => {
            want(3)?;
            Ok(Builtin::DoubleGyre {
                amplitude: params[0],
                perturbation: params[1],
                frequency: params[2],
            })
        }
        other => Err(Error::Config(format!("unknown builtin model '{other}'"))),
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutOfDomain {
    #[default]
    Error,
    Clamp,
}

/// Velocity samples on a tensor-product space-time grid.
///
/// `velocity` is laid out with dimension order `(time, axis₁, …, axisₙ,
/// component)`, last index fastest. `diffusion`, when present, has the same
/// layout with `n·n` row-major components per node.
#[derive(Clone, Debug, PartialEq)]
pub struct GriddedField {
    pub axes: Vec<Vec<f64>>,
    pub times: Vec<f64>,
    pub velocity: Vec<f64>,
    pub diffusion: Option<Vec<f64>>,
}

impl GriddedField {
    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    fn nodes(&self) -> usize {
        self.times.len() * self.axes.iter().map(Vec::len).product::<usize>()
    }

    pub fn validate(&self) -> Result<()> {
        let n = self.dim();
        if n == 0 {
            return Err(Error::invalid("gridded field needs at least one spatial axis"));
        }
        let strictly_increasing = |v: &[f64]| v.windows(2).all(|w| w[0] < w[1]) && v.iter().all(|c| c.is_finite());
        for (k, axis) in self.axes.iter().enumerate() {
            if axis.len() < 2 {
                return Err(Error::invalid(format!("axis {k} needs at least two coordinates")));
            }
            if !strictly_increasing(axis) {
                return Err(Error::invalid(format!("axis {k} is not strictly increasing")));
            }
        }
        if self.times.is_empty() || !strictly_increasing(&self.times) {
            return Err(Error::invalid("time coordinates must be non-empty and strictly increasing"));
        }
        let nodes = self.nodes();
        if self.velocity.len() != nodes * n {
            return Err(Error::invalid(format!(
                "velocity has {} samples, grid shape needs {}",
                self.velocity.len(),
                nodes * n
            )));
        }
        if let Some(d) = &self.diffusion {
            if d.len() != nodes * n * n {
                return Err(Error::invalid(format!(
                    "diffusion has {} samples, grid shape needs {}",
                    d.len(),
                    nodes * n * n
                )));
            }
        }
        if self.velocity.iter().any(|v| !v.is_finite()) || self.diffusion.iter().flatten().any(|v| !v.is_finite()) {
            return Err(Error::invalid("gridded samples must be finite"));
        }
        Ok(())
    }

    /// Samples a model on the grid. Handy for fixtures and for converting
    /// analytic fields to data.
    pub fn sample(model: &SystemModel, axes: Vec<Vec<f64>>, times: Vec<f64>, with_diffusion: bool) -> Result<Self> {
        let n = axes.len();
        if n != model.dim() {
            return Err(Error::invalid("axis count does not match model dimension"));
        }
        let shape: Vec<usize> = axes.iter().map(Vec::len).collect();
        let per_slice: usize = shape.iter().product();
        let mut velocity = Vec::with_capacity(times.len() * per_slice * n);
        let mut diffusion = with_diffusion.then(Vec::new);
        let mut x = vec![0.0; n];
        let mut u = vec![0.0; n];
        let mut s = vec![0.0; n * n];
        for &t in &times {
            for flat in 0..per_slice {
                let mut rem = flat;
                for k in (0..n).rev() {
                    x[k] = axes[k][rem % shape[k]];
                    rem /= shape[k];
                }
                model.velocity(&x, t, &mut u)?;
                velocity.extend_from_slice(&u);
                if let Some(d) = diffusion.as_mut() {
                    model.diffusion(&x, t, &mut s)?;
                    d.extend_from_slice(&s);
                }
            }
        }
        let field = GriddedField {
            axes,
            times,
            velocity,
            diffusion,
        };
        field.validate()?;
        Ok(field)
    }

    /// Reads the delimited-text format: one header line naming columns
    /// `t, x1..xn, u1..un` and optionally `s11..snn`, then one row per grid
    /// node in any order. Every node of the tensor grid must appear exactly
    /// once.
    pub fn from_delimited<R: Read>(reader: R) -> Result<Self> {
        let mut rdr = csv::ReaderBuilder::new()
            .trim(csv::Trim::All)
            .comment(Some(b'#'))
            .from_reader(reader);
        let headers = rdr.headers().map_err(|e| Error::Format(e.to_string()))?.clone();
        let cols: Vec<&str> = headers.iter().collect();
        let find = |name: &str| cols.iter().position(|c| *c == name);

        let t_col = find("t").ok_or_else(|| Error::Format("missing column 't'".into()))?;
        let mut n = 0;
        while find(&format!("x{}", n + 1)).is_some() {
            n += 1;
        }
        if n == 0 {
            return Err(Error::Format("missing column 'x1'".into()));
        }
        let x_cols: Vec<usize> = (1..=n).map(|i| find(&format!("x{i}")).unwrap()).collect();
        let u_cols = (1..=n)
            .map(|i| find(&format!("u{i}")).ok_or_else(|| Error::Format(format!("missing column 'u{i}'"))))
            .collect::<Result<Vec<_>>>()?;
        let s_names: Vec<String> = (1..=n).flat_map(|i| (1..=n).map(move |j| format!("s{i}{j}"))).collect();
        let s_found: Vec<Option<usize>> = s_names.iter().map(|s| find(s)).collect();
        let has_diffusion = s_found.iter().any(Option::is_some);
        if has_diffusion && s_found.iter().any(Option::is_none) {
            return Err(Error::Format("diffusion columns must be all of s11..snn or none".into()));
        }
        let known = 1 + 2 * n + if has_diffusion { n * n } else { 0 };
        if cols.len() != known {
            return Err(Error::Format(format!("unexpected columns in header {cols:?}")));
        }

        let mut rows: Vec<Vec<f64>> = Vec::new();
        for (line, rec) in rdr.records().enumerate() {
            let rec = rec.map_err(|e| Error::Format(e.to_string()))?;
            let row = rec
                .iter()
                .map(|f| {
                    f.parse::<f64>()
                        .map_err(|_| Error::Format(format!("data row {}: cannot parse '{f}'", line + 1)))
                })
                .collect::<Result<Vec<f64>>>()?;
            if row.len() != cols.len() {
                return Err(Error::Format(format!("data row {} has {} fields", line + 1, row.len())));
            }
            rows.push(row);
        }

        let unique = |col: usize| -> Vec<f64> {
            let mut v: Vec<f64> = rows.iter().map(|r| r[col]).collect();
            v.sort_by(f64::total_cmp);
            v.dedup();
            v
        };
        let times = unique(t_col);
        let axes: Vec<Vec<f64>> = x_cols.iter().map(|&c| unique(c)).collect();
        let shape: Vec<usize> = axes.iter().map(Vec::len).collect();
        let nodes = times.len() * shape.iter().product::<usize>();
        if rows.len() != nodes {
            return Err(Error::Format(format!(
                "{} data rows do not form a full tensor grid of {nodes} nodes",
                rows.len()
            )));
        }

        let mut velocity = vec![f64::NAN; nodes * n];
        let mut diffusion = has_diffusion.then(|| vec![f64::NAN; nodes * n * n]);
        let mut seen = vec![false; nodes];
        let locate = |v: &[f64], c: f64| v.binary_search_by(|p| p.total_cmp(&c)).unwrap();
        for row in &rows {
            let mut node = locate(&times, row[t_col]);
            for k in 0..n {
                node = node * shape[k] + locate(&axes[k], row[x_cols[k]]);
            }
            if std::mem::replace(&mut seen[node], true) {
                return Err(Error::Format("duplicate grid node in data".into()));
            }
            for (i, &c) in u_cols.iter().enumerate() {
                velocity[node * n + i] = row[c];
            }
            if let Some(d) = diffusion.as_mut() {
                for (i, c) in s_found.iter().enumerate() {
                    d[node * n * n + i] = row[c.unwrap()];
                }
            }
        }

        let field = GriddedField {
            axes,
            times,
            velocity,
            diffusion,
        };
        field.validate()?;
        Ok(field)
    }

    pub fn from_path(path: impl AsRef<Path>) -> Result<Self> {
        let file = std::fs::File::open(path)?;
        Self::from_delimited(std::io::BufReader::new(file))
    }

    /// Writes the delimited-text format read by [`GriddedField::from_delimited`].
    pub fn to_delimited<W: std::io::Write>(&self, writer: W) -> Result<()> {
        let n = self.dim();
        let mut w = csv::Writer::from_writer(writer);
        let mut header = vec!["t".to_string()];
        header.extend((1..=n).map(|i| format!("x{i}")));
        header.extend((1..=n).map(|i| format!("u{i}")));
        if self.diffusion.is_some() {
            header.extend((1..=n).flat_map(|i| (1..=n).map(move |j| format!("s{i}{j}"))));
        }
        w.write_record(&header).map_err(|e| Error::Format(e.to_string()))?;
        let shape: Vec<usize> = self.axes.iter().map(Vec::len).collect();
        let per_slice: usize = shape.iter().product();
        for (ti, &t) in self.times.iter().enumerate() {
            for flat in 0..per_slice {
                let node = ti * per_slice + flat;
                let mut coords = vec![0.0; n];
                let mut rem = flat;
                for k in (0..n).rev() {
                    coords[k] = self.axes[k][rem % shape[k]];
                    rem /= shape[k];
                }
                let mut rec = vec![format!("{t:?}")];
                rec.extend(coords.iter().map(|c| format!("{c:?}")));
                rec.extend(self.velocity[node * n..(node + 1) * n].iter().map(|v| format!("{v:?}")));
                if let Some(d) = &self.diffusion {
                    rec.extend(d[node * n * n..(node + 1) * n * n].iter().map(|v| format!("{v:?}")));
                }
                w.write_record(&rec).map_err(|e| Error::Format(e.to_string()))?;
            }
        }
        w.flush()?;
        Ok(())
    }

    fn content_hash(&self) -> String {
        let mut h = Sha256::new();
        for axis in &self.axes {
            h.update(b"axis");
            axis.iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        h.update(b"time");
        self.times.iter().for_each(|v| h.update(v.to_le_bytes()));
        h.update(b"u");
        self.velocity.iter().for_each(|v| h.update(v.to_le_bytes()));
        if let Some(d) = &self.diffusion {
            h.update(b"sigma");
            d.iter().for_each(|v| h.update(v.to_le_bytes()));
        }
        hex::encode(h.finalize())
    }
}

/// Multilinear interpolant over a [`GriddedField`].
struct Interpolant {
    field: GriddedField,
    policy: OutOfDomain,
    /// Node strides for (time, axis₁, …, axisₙ).
    strides: Vec<usize>,
}

/// Cell location along one coordinate.
#[derive(Clone, Copy)]
struct Bracket {
    lo: usize,
    weight: f64,
    /// `1 / (c[lo+1] − c[lo])`, or 0 when clamped or degenerate.
    inv_width: f64,
}

impl Interpolant {
    fn new(field: GriddedField, policy: OutOfDomain) -> Self {
        let n = field.dim();
        let mut strides = vec![0; n + 1];
        let mut s = 1;
        for k in (0..n).rev() {
            strides[k + 1] = s;
            s *= field.axes[k].len();
        }
        strides[0] = s;
        Interpolant { field, policy, strides }
    }

    fn bracket(&self, coords: &[f64], value: f64, axis: usize) -> Result<Bracket> {
        let len = coords.len();
        if len == 1 {
            return Ok(Bracket {
                lo: 0,
                weight: 0.0,
                inv_width: 0.0,
            });
        }
        let (first, last) = (coords[0], coords[len - 1]);
        if !(value >= first && value <= last) {
            if self.policy == OutOfDomain::Error || value.is_nan() {
                return Err(Error::OutOfDomain {
                    axis,
                    value,
                    lower: first,
                    upper: last,
                });
            }
            let (lo, weight) = if value < first { (0, 0.0) } else { (len - 2, 1.0) };
            return Ok(Bracket {
                lo,
                weight,
                inv_width: 0.0,
            });
        }
        // Index of the cell [c_lo, c_lo+1] containing value; points on an
        // interior plane belong to the cell above it.
        let lo = coords.partition_point(|&c| c <= value).saturating_sub(1).min(len - 2);
        let width = coords[lo + 1] - coords[lo];
        Ok(Bracket {
            lo,
            weight: (value - coords[lo]) / width,
            inv_width: 1.0 / width,
        })
    }

    fn locate(&self, x: &[f64], t: f64) -> Result<Vec<Bracket>> {
        let n = self.field.dim();
        let mut b = Vec::with_capacity(n + 1);
        b.push(self.bracket(&self.field.times, t, TIME_AXIS)?);
        for (k, (axis, &xk)) in self.field.axes.iter().zip(x).enumerate() {
            b.push(self.bracket(axis, xk, k)?);
        }
        Ok(b)
    }

    /// Evaluates `comps` components per node and, when `grad` is given, the
    /// spatial derivatives `grad[c*n + k] = ∂value_c/∂x_k`.
    fn eval(&self, samples: &[f64], comps: usize, x: &[f64], t: f64, out: &mut [f64], mut grad: Option<&mut [f64]>) -> Result<()> {
        let n = self.field.dim();
        let b = self.locate(x, t)?;
        out[..comps].iter_mut().for_each(|v| *v = 0.0);
        if let Some(g) = grad.as_deref_mut() {
            g[..comps * n].iter_mut().for_each(|v| *v = 0.0);
        }
        let dims = n + 1;
        for corner in 0..(1usize << dims) {
            let mut node = 0;
            let mut w = 1.0;
            let mut zero_count = 0;
            for (d, br) in b.iter().enumerate() {
                let up = (corner >> d) & 1 == 1;
                let len = if d == 0 {
                    self.field.times.len()
                } else {
                    self.field.axes[d - 1].len()
                };
                let idx = if up { (br.lo + 1).min(len - 1) } else { br.lo };
                node += idx * self.strides[d];
                let f = if up { br.weight } else { 1.0 - br.weight };
                if f == 0.0 {
                    zero_count += 1;
                }
                w *= f;
            }
            let base = node * comps;
            if w != 0.0 {
                for c in 0..comps {
                    out[c] += w * samples[base + c];
                }
            }
            if let Some(g) = grad.as_deref_mut() {
                // At most one weight may vanish for the derivative to be
                // non-zero, and only along the differentiated axis.
                if zero_count > 1 {
                    continue;
                }
                for k in 0..n {
                    let br = &b[k + 1];
                    if br.inv_width == 0.0 {
                        continue;
                    }
                    let up = (corner >> (k + 1)) & 1 == 1;
                    let mut wk = if up { br.inv_width } else { -br.inv_width };
                    for (d, bd) in b.iter().enumerate() {
                        if d == k + 1 {
                            continue;
                        }
                        let upd = (corner >> d) & 1 == 1;
                        wk *= if upd { bd.weight } else { 1.0 - bd.weight };
                    }
                    if wk != 0.0 {
                        for c in 0..comps {
                            g[c * n + k] += wk * samples[base + c];
                        }
                    }
                }
            }
        }
        Ok(())
    }
}

struct GriddedDrift(Arc<Interpolant>);

impl VectorField for GriddedDrift {
    fn dim(&self) -> usize {
        self.0.field.dim()
    }

    fn velocity(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let n = self.dim();
        self.0.eval(&self.0.field.velocity, n, x, t, out, None)
    }

    fn velocity_gradient(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let n = self.dim();
        let mut scratch = [0.0; 8];
        let mut heap;
        let value: &mut [f64] = if n <= 8 {
            &mut scratch[..n]
        } else {
            heap = vec![0.0; n];
            &mut heap
        };
        self.0.eval(&self.0.field.velocity, n, x, t, value, Some(out))
    }
}

struct GriddedDiffusion(Arc<Interpolant>);

impl MatrixField for GriddedDiffusion {
    fn eval(&self, x: &[f64], t: f64, out: &mut [f64]) -> Result<()> {
        let n = self.0.field.dim();
        let samples = self.0.field.diffusion.as_ref().expect("constructed with diffusion");
        self.0.eval(samples, n * n, x, t, out, None)
    }
}

/// Model backed by multilinear interpolation of gridded samples. The time
/// horizon is the last time slice; time is measured on the grid's clock.
/// Without diffusion samples `σ` is the identity.
pub fn model_from_grid(data: GriddedField, out_of_domain: OutOfDomain) -> Result<SystemModel> {
    data.validate()?;
    let descriptor = format!("gridded(sha256={},policy={:?})", data.content_hash(), out_of_domain);
    let horizon = *data.times.last().unwrap();
    let has_diffusion = data.diffusion.is_some();
    let interp = Arc::new(Interpolant::new(data, out_of_domain));
    let diffusion = if has_diffusion {
        Diffusion::StateDependent(Arc::new(GriddedDiffusion(interp.clone())))
    } else {
        Diffusion::Identity
    };
    let drift = Arc::new(GriddedDrift(interp));
    // The model's own horizon check is against `T`; a grid starting after
    // t = 0 is caught by the interpolant's time bracket instead.
    let horizon = if horizon > 0.0 { horizon } else { f64::INFINITY };
    SystemModel::new(drift, diffusion, horizon, descriptor)
}

/// Largest absolute entry of `fd − ∇u` over the probes, where `fd` is the
/// central-difference gradient with step `h`.
pub fn check_gradient_consistency(model: &SystemModel, probes: &[(Vec<f64>, f64)], h: f64) -> Result<f64> {
    if !(h > 0.0) {
        return Err(Error::invalid("finite-difference step must be positive"));
    }
    let n = model.dim();
    let mut worst: f64 = 0.0;
    let mut grad = vec![0.0; n * n];
    let mut up = vec![0.0; n];
    let mut dn = vec![0.0; n];
    for (x, t) in probes {
        if x.len() != n {
            return Err(Error::invalid("probe dimension mismatch"));
        }
        model.velocity_gradient(x, *t, &mut grad)?;
        let mut xp = x.clone();
        for k in 0..n {
            xp[k] = x[k] + h;
            model.velocity(&xp, *t, &mut up)?;
            xp[k] = x[k] - h;
            model.velocity(&xp, *t, &mut dn)?;
            xp[k] = x[k];
            for i in 0..n {
                let fd = (up[i] - dn[i]) / (2.0 * h);
                worst = worst.max((fd - grad[i * n + k]).abs());
            }
        }
    }
    Ok(worst)
}
