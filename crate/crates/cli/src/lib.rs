//! Command implementations behind the `sniftle` binary.
//!
//! Every command reads a [`RunConfig`], writes a provenance header (artifact
//! version, config hash, seed) ahead of its output, and prints reals with 17
//! significant digits.

pub mod config;

use std::fs::File;
use std::io::{BufWriter, Write};
use std::path::{Path, PathBuf};

use sniftle_core::fieldscan::{fmt_real, run_scan_chunked, FieldResult, ScanSpec};
use sniftle_core::montecarlo::{bound_scaling_study, gaussian_validation, q2_check, s2_check, McConfig, MeasureCheck};
use sniftle_core::{covariance, solve_flow, Matrix, MeasureRecord, UncertaintyScales};

use config::OutputFormat;
pub use config::RunConfig;

pub const VERSION: &str = env!("CARGO_PKG_VERSION");

#[derive(Debug, thiserror::Error)]
pub enum CliError {
    #[error("configuration error: {0}")]
    Config(String),
    #[error(transparent)]
    Core(#[from] sniftle_core::Error),
    #[error("i/o error: {0}")]
    Io(String),
    #[error("validation failed: {0}")]
    ValidationFailed(String),
}

impl CliError {
    pub fn exit_code(&self) -> u8 {
        use sniftle_core::Error as E;
        match self {
            CliError::Config(_) => 2,
            CliError::Io(_) => 4,
            CliError::ValidationFailed(_) => 3,
            CliError::Core(E::Io(_)) => 4,
            CliError::Core(e) if e.is_numeric() => 3,
            CliError::Core(_) => 2,
        }
    }
}

fn io_error(path: &Path, e: impl std::fmt::Display) -> CliError {
    CliError::Io(format!("{}: {e}", path.display()))
}

/// Options shared by every command.
#[derive(Clone, Debug, Default)]
pub struct Invocation {
    pub config: PathBuf,
    pub output: Option<PathBuf>,
    pub seed: Option<u64>,
    pub xi0: Option<Vec<f64>>,
    pub time: Option<f64>,
    pub resume: Option<PathBuf>,
    pub checkpoint: Option<PathBuf>,
}

struct Context {
    cfg: RunConfig,
    base_dir: PathBuf,
    output: Option<PathBuf>,
}

impl Context {
    fn load(inv: &Invocation) -> Result<Self, CliError> {
        let (mut cfg, base_dir) = RunConfig::load(&inv.config)?;
        if let Some(seed) = inv.seed {
            cfg.seed = seed;
        }
        cfg.check_scales()?;
        let output = inv.output.clone().or_else(|| cfg.output.path.as_ref().map(|p| base_dir.join(p)));
        Ok(Context { cfg, base_dir, output })
    }

    fn provenance(&self) -> Vec<(String, String)> {
        vec![
            ("version".into(), format!("sniftle {VERSION}")),
            ("config_hash".into(), self.cfg.hash()),
            ("seed".into(), self.cfg.seed.to_string()),
        ]
    }

    fn header(&self) -> String {
        self.provenance().iter().map(|(k, v)| format!("# {k}={v}\n")).collect()
    }

    fn create_output(&self) -> Result<Option<(PathBuf, BufWriter<File>)>, CliError> {
        match &self.output {
            None => Ok(None),
            Some(p) => {
                let f = File::create(p).map_err(|e| io_error(p, e))?;
                Ok(Some((p.clone(), BufWriter::new(f))))
            }
        }
    }
}

/// Writes `text` to stdout and, when configured, to the output file.
fn emit(ctx: &Context, text: &str, stdout: &mut dyn Write) -> Result<(), CliError> {
    if let Some((path, mut w)) = ctx.create_output()? {
        w.write_all(text.as_bytes())
            .and_then(|_| w.flush())
            .map_err(|e| io_error(&path, e))?;
    }
    stdout.write_all(text.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}

fn fmt_vec(v: &[f64]) -> String {
    let parts: Vec<String> = v.iter().map(|x| fmt_real(*x)).collect();
    format!("[{}]", parts.join(", "))
}

fn fmt_matrix(m: &Matrix) -> String {
    let rows: Vec<String> = m.rows().iter().map(|r| fmt_vec(r)).collect();
    format!("[{}]", rows.join(", "))
}

pub fn cmd_point(inv: &Invocation, stdout: &mut dyn Write) -> Result<(), CliError> {
    let ctx = Context::load(inv)?;
    let model = ctx.cfg.build_model(&ctx.base_dir)?;
    let n = model.dim();
    let xi_cov = ctx.cfg.xi_cov(n)?;
    let (xi0, t) = ctx.cfg.resolve_point(inv.xi0.clone(), inv.time, n)?;
    let sol = solve_flow(&model, &xi0, t, &ctx.cfg.integrator)?;
    let rec = MeasureRecord::from_solution(&sol, &xi_cov)?;
    let scales = UncertaintyScales::new(ctx.cfg.scales.eps, ctx.cfg.scales.delta, xi_cov)?;
    let cov = covariance(&sol, &scales)?;

    let mut s = ctx.header();
    s += &format!("xi0 = {}\n", fmt_vec(&rec.xi0));
    s += &format!("t = {}\n", fmt_real(rec.t));
    s += &format!("position = {}\n", fmt_vec(&sol.position));
    for (k, v) in [("ftle", rec.ftle), ("sniftle", rec.sniftle), ("s2", rec.s2), ("q2", rec.q2)] {
        s += &format!("{k} = {}\n", fmt_real(v));
    }
    s += &format!("eps = {}\ndelta = {}\n", fmt_real(scales.eps), fmt_real(scales.delta));
    s += &format!("ic_term = {}\n", fmt_matrix(&cov.ic_term));
    s += &format!("noise_term = {}\n", fmt_matrix(&cov.noise_term));
    s += &format!("total = {}\n", fmt_matrix(&cov.total));
    emit(&ctx, &s, stdout)
}

fn write_atomic(path: &Path, result: &FieldResult, provenance: &[(String, String)]) -> Result<(), CliError> {
    let tmp = path.with_extension("partial");
    let f = File::create(&tmp).map_err(|e| io_error(&tmp, e))?;
    result.write_binary(BufWriter::new(f), provenance)?;
    std::fs::rename(&tmp, path).map_err(|e| io_error(path, e))
}

pub fn cmd_scan(inv: &Invocation, stdout: &mut dyn Write) -> Result<(), CliError> {
    let ctx = Context::load(inv)?;
    let section = ctx
        .cfg
        .scan
        .clone()
        .ok_or_else(|| CliError::Config("scan: section missing".into()))?;
    let model = ctx.cfg.build_model(&ctx.base_dir)?;
    let spec = ScanSpec {
        xi_cov: ctx.cfg.xi_cov(model.dim())?,
        axes: section.axes,
        times: section.times,
        model,
        integrator: ctx.cfg.integrator,
        failure: section.failure,
    };
    spec.validate().map_err(|e| CliError::Config(format!("scan: {e}")))?;
    if section.checkpoint_every == 0 {
        return Err(CliError::Config("scan.checkpoint_every: must be at least 1".into()));
    }
    let Some((out_path, out)) = ctx.create_output()? else {
        return Err(CliError::Config(
            "output.path: scan needs an output file (set it or pass --output)".into(),
        ));
    };
    let partial = match &inv.resume {
        Some(p) => {
            let f = File::open(p).map_err(|e| io_error(p, e))?;
            Some(FieldResult::read_binary(std::io::BufReader::new(f))?.0)
        }
        None => None,
    };
    let provenance = ctx.provenance();
    let (chunk, checkpoint) = match &inv.checkpoint {
        Some(p) => (section.checkpoint_every, Some(p.clone())),
        None => (usize::MAX, None),
    };
    let result = run_scan_chunked(&spec, partial, chunk, |r| match &checkpoint {
        Some(p) => write_atomic(p, r, &provenance).map_err(|e| match e {
            CliError::Core(c) => c,
            other => sniftle_core::Error::Io(std::io::Error::other(other.to_string())),
        }),
        None => Ok(()),
    })?;

    match ctx.cfg.output.format {
        OutputFormat::Csv => result.write_delimited(out, &provenance),
        OutputFormat::Binary => result.write_binary(out, &provenance),
    }
    .map_err(|e| match e {
        sniftle_core::Error::Io(io) => io_error(&out_path, io),
        other => other.into(),
    })?;

    let sum = result.summary();
    let mut s = format!("records = {}\n", result.records.len());
    for (k, (lo, hi)) in [("ftle", sum.ftle), ("sniftle", sum.sniftle), ("s2", sum.s2), ("q2", sum.q2)] {
        s += &format!("{k}: min = {}, max = {}\n", fmt_real(lo), fmt_real(hi));
    }
    for (k, _) in spec.times.iter().enumerate() {
        if let Some(cell) = result.max_ftle_cell(k) {
            s += &format!(
                "max ftle cell at t = {}: index {cell}, xi0 = {}\n",
                fmt_real(spec.times[k]),
                fmt_vec(&spec.point(cell))
            );
        }
    }
    s += &format!("failed = {}\n", sum.failed);
    s += &format!("output = {}\n", out_path.display());
    stdout.write_all(s.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}

fn mc_config(
    ctx: &Context,
    n: usize,
    samples: usize,
    em_step: f64,
    domain_exit: sniftle_core::montecarlo::DomainExitPolicy,
) -> Result<McConfig, CliError> {
    let scales = UncertaintyScales::new(ctx.cfg.scales.eps, ctx.cfg.scales.delta, ctx.cfg.xi_cov(n)?)?;
    let mut mc = McConfig::new(samples, em_step, ctx.cfg.seed, scales);
    mc.domain_exit = domain_exit;
    Ok(mc)
}

fn check_line(name: &str, check: &MeasureCheck, tol: f64) -> (String, bool) {
    let pass = check.rel_error <= tol;
    (
        format!(
            "{name}: analytic = {}, estimate = {}, rel_error = {}, {}\n",
            fmt_real(check.analytic),
            fmt_real(check.estimate),
            fmt_real(check.rel_error),
            if pass { "pass" } else { "fail" }
        ),
        pass,
    )
}

pub fn cmd_validate(inv: &Invocation, stdout: &mut dyn Write) -> Result<(), CliError> {
    let ctx = Context::load(inv)?;
    let section = ctx
        .cfg
        .validate
        .clone()
        .ok_or_else(|| CliError::Config("validate: section missing".into()))?;
    let model = ctx.cfg.build_model(&ctx.base_dir)?;
    let n = model.dim();
    let (xi0, t) = ctx.cfg.resolve_point(inv.xi0.clone(), inv.time, n)?;
    let mc = mc_config(&ctx, n, section.samples, section.em_step, section.domain_exit)?;
    let integ = &ctx.cfg.integrator;

    let report = gaussian_validation(&model, &xi0, t, &mc, integ)?;
    let mut s = ctx.header();
    s += &format!("xi0 = {}\nt = {}\nsamples = {}\n", fmt_vec(&xi0), fmt_real(t), section.samples);
    s += &format!("predicted_mean = {}\n", fmt_vec(&report.predicted_mean));
    s += &format!("empirical_mean = {}\n", fmt_vec(&report.empirical_mean));
    s += &format!("predicted_cov = {}\n", fmt_matrix(&report.predicted_cov));
    s += &format!("empirical_cov = {}\n", fmt_matrix(&report.empirical_cov));
    s += &format!("mean_abs_error = {}\n", fmt_real(report.mean_abs_error));
    s += &format!("skipped = {}\n", report.skipped);
    let cov_pass = report.cov_rel_error <= section.cov_tolerance;
    s += &format!(
        "cov_rel_error = {}, {}\n",
        fmt_real(report.cov_rel_error),
        if cov_pass { "pass" } else { "fail" }
    );
    let mut failures = Vec::new();
    if !cov_pass {
        failures.push("cov_rel_error");
    }

    if mc.scales.eps > 0.0 {
        let (line, pass) = check_line("s2_check", &s2_check(&model, &xi0, t, &mc, integ)?, section.measure_tolerance);
        s += &line;
        if !pass {
            failures.push("s2_check");
        }
    }
    if mc.scales.delta > 0.0 {
        let (line, pass) = check_line("q2_check", &q2_check(&model, &xi0, t, &mc, integ)?, section.measure_tolerance);
        s += &line;
        if !pass {
            failures.push("q2_check");
        }
    }
    s += &format!("result = {}\n", if failures.is_empty() { "pass" } else { "fail" });
    emit(&ctx, &s, stdout)?;
    if failures.is_empty() {
        Ok(())
    } else {
        Err(CliError::ValidationFailed(failures.join(", ")))
    }
}

pub fn cmd_bound_study(inv: &Invocation, stdout: &mut dyn Write) -> Result<(), CliError> {
    let ctx = Context::load(inv)?;
    let section = ctx
        .cfg
        .study
        .clone()
        .ok_or_else(|| CliError::Config("study: section missing".into()))?;
    let model = ctx.cfg.build_model(&ctx.base_dir)?;
    let n = model.dim();
    let (xi0, t) = ctx.cfg.resolve_point(inv.xi0.clone(), inv.time, n)?;
    let mc = mc_config(&ctx, n, section.samples, section.em_step, section.domain_exit)?;
    let out = ctx.create_output()?;
    let study = bound_scaling_study(&model, &xi0, t, section.axis, &section.levels, &section.orders, &mc).map_err(|e| match e {
        sniftle_core::Error::InvalidInput(msg) => CliError::Config(format!("study: {msg}")),
        other => other.into(),
    })?;

    let mut table = ctx.header().into_bytes();
    study.to_delimited(&mut table).map_err(|e| CliError::Io(e.to_string()))?;
    match out {
        Some((path, mut w)) => w.write_all(&table).and_then(|_| w.flush()).map_err(|e| io_error(&path, e))?,
        None => stdout.write_all(&table).map_err(|e| CliError::Io(e.to_string()))?,
    }
    let mut s = String::new();
    for fit in &study.fits {
        s += &format!(
            "r = {}: slope = {}, expected = {}, residual = {}, verdict = {:?}\n",
            fmt_real(fit.r),
            fmt_real(fit.slope),
            fmt_real(fit.expected_slope),
            fmt_real(fit.residual),
            fit.verdict
        );
    }
    stdout.write_all(s.as_bytes()).map_err(|e| CliError::Io(e.to_string()))
}
