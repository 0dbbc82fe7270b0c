//! Run configuration: a TOML file with strict key checking.

use std::path::{Path, PathBuf};

use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};
use sniftle_core::fieldscan::{AxisSpec, FailurePolicy};
use sniftle_core::flowfield::builtin_by_name;
use sniftle_core::montecarlo::{DomainExitPolicy, StudyAxis};
use sniftle_core::{
    builtin_model, model_from_grid, Diffusion, GriddedField, IntegratorConfig, Matrix, OutOfDomain, SpdMatrix, SystemModel,
};

use crate::CliError;

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct RunConfig {
    #[serde(default)]
    pub seed: u64,
    pub model: ModelSection,
    #[serde(default)]
    pub scales: ScalesSection,
    #[serde(default)]
    pub integrator: IntegratorConfig,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub point: Option<PointSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub scan: Option<ScanSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub validate: Option<ValidateSection>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub study: Option<StudySection>,
    #[serde(default)]
    pub output: OutputSection,
}

/// Exactly one of `builtin` and `gridded`.
#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ModelSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub builtin: Option<String>,
    #[serde(default, skip_serializing_if = "Vec::is_empty")]
    pub params: Vec<f64>,
    /// Delimited velocity samples; relative paths resolve against the
    /// config file's directory.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub gridded: Option<PathBuf>,
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub out_of_domain: Option<OutOfDomain>,
    /// Constant diffusion matrix rows; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub sigma: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScalesSection {
    #[serde(default)]
    pub eps: f64,
    #[serde(default)]
    pub delta: f64,
    /// Rows of `Ξ₀`; identity when absent.
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub xi_cov: Option<Vec<Vec<f64>>>,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct PointSection {
    pub xi0: Vec<f64>,
    pub t: f64,
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ScanSection {
    pub axes: Vec<AxisSpec>,
    pub times: Vec<f64>,
    #[serde(default)]
    pub failure: FailurePolicy,
    /// Grid points per checkpoint when `--checkpoint` is given.
    #[serde(default = "default_checkpoint_every")]
    pub checkpoint_every: usize,
}

fn default_checkpoint_every() -> usize {
    1024
}

fn default_em_step() -> f64 {
    1e-3
}

fn default_tolerance() -> f64 {
    0.1
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct ValidateSection {
    pub samples: usize,
    #[serde(default = "default_em_step")]
    pub em_step: f64,
    #[serde(default)]
    pub domain_exit: DomainExitPolicy,
    /// Pass threshold for the Frobenius-relative covariance error.
    #[serde(default = "default_tolerance")]
    pub cov_tolerance: f64,
    /// Pass threshold for the relative `S²` and `Q²` errors.
    #[serde(default = "default_tolerance")]
    pub measure_tolerance: f64,
}

fn default_orders() -> Vec<f64> {
    vec![1.0]
}

#[derive(Clone, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct StudySection {
    pub axis: StudyAxis,
    pub levels: Vec<f64>,
    #[serde(default = "default_orders")]
    pub orders: Vec<f64>,
    pub samples: usize,
    #[serde(default = "default_em_step")]
    pub em_step: f64,
    #[serde(default)]
    pub domain_exit: DomainExitPolicy,
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum OutputFormat {
    #[default]
    Csv,
    Binary,
}

#[derive(Clone, Debug, Default, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct OutputSection {
    #[serde(default, skip_serializing_if = "Option::is_none")]
    pub path: Option<PathBuf>,
    #[serde(default)]
    pub format: OutputFormat,
}

fn config_error(field: &str, msg: impl std::fmt::Display) -> CliError {
    CliError::Config(format!("{field}: {msg}"))
}

fn square_matrix(field: &str, rows: &[Vec<f64>], n: usize) -> Result<Matrix, CliError> {
    if rows.len() != n || rows.iter().any(|r| r.len() != n) {
        return Err(config_error(field, format!("expected {n} rows of {n} entries")));
    }
    if rows.iter().flatten().any(|v| !v.is_finite()) {
        return Err(config_error(field, "entries must be finite"));
    }
    Matrix::from_rows(rows).map_err(|e| config_error(field, e))
}

impl RunConfig {
    pub fn parse(text: &str) -> Result<Self, CliError> {
        toml::from_str(text).map_err(|e| CliError::Config(e.to_string()))
    }

    pub fn load(path: &Path) -> Result<(Self, PathBuf), CliError> {
        let text = std::fs::read_to_string(path).map_err(|e| CliError::Io(format!("{}: {e}", path.display())))?;
        let cfg = Self::parse(&text).map_err(|e| match e {
            CliError::Config(msg) => CliError::Config(format!("{}: {msg}", path.display())),
            other => other,
        })?;
        let dir = path.parent().map(Path::to_path_buf).unwrap_or_default();
        Ok((cfg, dir))
    }

    /// Canonical TOML text. Parsing the result reproduces `self`.
    pub fn to_toml(&self) -> String {
        toml::to_string(self).expect("config is serializable")
    }

    /// SHA-256 of the canonical text.
    pub fn hash(&self) -> String {
        hex::encode(Sha256::digest(self.to_toml().as_bytes()))
    }

    pub fn build_model(&self, base_dir: &Path) -> Result<SystemModel, CliError> {
        let m = &self.model;
        let model = match (&m.builtin, &m.gridded) {
            (Some(name), None) => {
                if m.out_of_domain.is_some() {
                    return Err(config_error("model.out_of_domain", "only applies to gridded models"));
                }
                let b = builtin_by_name(name, &m.params).map_err(|e| config_error("model", e))?;
                let dim = builtin_dim(&b);
                builtin_model(b, self.diffusion(dim)?)?
            }
            (None, Some(path)) => {
                if !m.params.is_empty() {
                    return Err(config_error("model.params", "only applies to builtin models"));
                }
                let full = base_dir.join(path);
                let field = GriddedField::from_path(&full)?;
                let dim = field.dim();
                let model = model_from_grid(field, m.out_of_domain.unwrap_or_default())?;
                match self.model.sigma {
                    None => model,
                    Some(_) => model.with_diffusion(self.diffusion(dim)?)?,
                }
            }
            _ => return Err(config_error("model", "specify exactly one of 'builtin' and 'gridded'")),
        };
        Ok(model)
    }

    fn diffusion(&self, n: usize) -> Result<Diffusion, CliError> {
        match &self.model.sigma {
            None => Ok(Diffusion::Identity),
            Some(rows) => Ok(Diffusion::Constant(square_matrix("model.sigma", rows, n)?)),
        }
    }

    pub fn xi_cov(&self, n: usize) -> Result<SpdMatrix, CliError> {
        const FIELD: &str = "scales.xi_cov";
        let Some(rows) = &self.scales.xi_cov else {
            return Ok(SpdMatrix::identity(n));
        };
        let m = square_matrix(FIELD, rows, n)?;
        for i in 0..n {
            for j in 0..i {
                let (a, b) = (m[(i, j)], m[(j, i)]);
                if (a - b).abs() > 1e-12 * a.abs().max(b.abs()).max(1.0) {
                    return Err(config_error(
                        FIELD,
                        format!("matrix is not symmetric: entry ({i},{j}) = {a} but ({j},{i}) = {b}"),
                    ));
                }
            }
        }
        SpdMatrix::new(m).map_err(|e| config_error(FIELD, e))
    }

    pub fn check_scales(&self) -> Result<(), CliError> {
        for (field, v) in [("scales.eps", self.scales.eps), ("scales.delta", self.scales.delta)] {
            if !(v >= 0.0 && v.is_finite()) {
                return Err(config_error(field, format!("must be finite and non-negative, got {v}")));
            }
        }
        Ok(())
    }

    /// Point from flags, falling back to the `[point]` section.
    pub fn resolve_point(&self, xi0: Option<Vec<f64>>, t: Option<f64>, n: usize) -> Result<(Vec<f64>, f64), CliError> {
        let xi0 = xi0
            .or_else(|| self.point.as_ref().map(|p| p.xi0.clone()))
            .ok_or_else(|| config_error("point.xi0", "missing (set [point] or pass --xi0)"))?;
        let t = t
            .or_else(|| self.point.as_ref().map(|p| p.t))
            .ok_or_else(|| config_error("point.t", "missing (set [point] or pass --time)"))?;
        if xi0.len() != n {
            return Err(config_error("point.xi0", format!("expected {n} coordinates, got {}", xi0.len())));
        }
        if !(t > 0.0 && t.is_finite()) {
            return Err(config_error("point.t", format!("must be positive, got {t}")));
        }
        Ok((xi0, t))
    }
}

fn builtin_dim(b: &sniftle_core::Builtin) -> usize {
    match *b {
        sniftle_core::Builtin::Zero { dim } => dim,
        _ => 2,
    }
}
