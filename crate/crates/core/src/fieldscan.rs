//! Measure fields over rectangular grids of initial conditions.
//!
//! Grid points are enumerated in row-major order over the axes (first axis
//! slowest). Each point is integrated once up to the largest requested time,
//! with every smaller time captured on the way. Records are stored
//! point-major, then by time.

use std::io::{Read, Write};

use rayon::prelude::*;
use serde::{Deserialize, Serialize};
use sha2::{Digest, Sha256};

use crate::error::{Error, Result};
use crate::flowfield::SystemModel;
use crate::flowmap::{solve_flow_partial, IntegratorConfig};
use crate::matops::SpdMatrix;
use crate::measures::MeasureRecord;

pub const BINARY_MAGIC: &[u8; 5] = b"SNFK1";

#[derive(Clone, Copy, Debug, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields)]
pub struct AxisSpec {
    pub min: f64,
    pub max: f64,
    pub count: usize,
}

impl AxisSpec {
    pub fn coordinate(&self, i: usize) -> f64 {
        if self.count == 1 {
            self.min
        } else {
            self.min + (self.max - self.min) * i as f64 / (self.count - 1) as f64
        }
    }
}

#[derive(Clone, Copy, Debug, Default, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum FailurePolicy {
    #[default]
    RecordNan,
    Abort,
}

#[derive(Clone, Debug)]
pub struct ScanSpec {
    pub axes: Vec<AxisSpec>,
    pub times: Vec<f64>,
    pub xi_cov: SpdMatrix,
    pub model: SystemModel,
    pub integrator: IntegratorConfig,
    pub failure: FailurePolicy,
}

#[derive(Serialize)]
struct SpecIdentity<'a> {
    model: &'a str,
    axes: &'a [AxisSpec],
    times: &'a [f64],
    xi_cov: Vec<Vec<f64>>,
    integrator: &'a IntegratorConfig,
    failure: FailurePolicy,
}

impl ScanSpec {
    pub fn validate(&self) -> Result<()> {
        let n = self.model.dim();
        if self.axes.len() != n {
            return Err(Error::invalid(format!(
                "scan has {} axes, model has dimension {n}",
                self.axes.len()
            )));
        }
        for (k, a) in self.axes.iter().enumerate() {
            if a.count == 0 {
                return Err(Error::invalid(format!("axis {k} has zero points")));
            }
            if !(a.min < a.max) || !a.min.is_finite() || !a.max.is_finite() {
                return Err(Error::invalid(format!("axis {k} needs finite min < max")));
            }
        }
        if self.times.is_empty() {
            return Err(Error::invalid("scan needs at least one time"));
        }
        let mut prev = 0.0;
        for &t in &self.times {
            if !(t > prev) || t > self.model.horizon() {
                return Err(Error::invalid(format!(
                    "scan times must be strictly increasing in (0, {}], got {:?}",
                    self.model.horizon(),
                    self.times
                )));
            }
            prev = t;
        }
        if self.xi_cov.dim() != n {
            return Err(Error::invalid("Ξ₀ dimension does not match the model"));
        }
        self.integrator.validate()
    }

    pub fn point_count(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn record_count(&self) -> usize {
        self.point_count() * self.times.len()
    }

    pub fn point(&self, index: usize) -> Vec<f64> {
        let mut rem = index;
        let mut x = vec![0.0; self.axes.len()];
        for k in (0..self.axes.len()).rev() {
            let c = self.axes[k].count;
            x[k] = self.axes[k].coordinate(rem % c);
            rem /= c;
        }
        x
    }

    /// SHA-256 of the scan's identity: model descriptor, grid, times, `Ξ₀`,
    /// integrator settings and failure policy.
    pub fn hash(&self) -> String {
        let id = SpecIdentity {
            model: self.model.descriptor(),
            axes: &self.axes,
            times: &self.times,
            xi_cov: self.xi_cov.matrix().rows(),
            integrator: &self.integrator,
            failure: self.failure,
        };
        let json = serde_json::to_vec(&id).expect("serializable");
        hex::encode(Sha256::digest(&json))
    }
}

#[derive(Clone, Copy, Debug, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum RecordStatus {
    Ok,
    Failed,
    Pending,
}

impl RecordStatus {
    pub fn as_str(self) -> &'static str {
        match self {
            RecordStatus::Ok => "ok",
            RecordStatus::Failed => "failed",
            RecordStatus::Pending => "pending",
        }
    }

    fn code(self) -> f64 {
        match self {
            RecordStatus::Ok => 0.0,
            RecordStatus::Failed => 1.0,
            RecordStatus::Pending => 2.0,
        }
    }

    fn from_code(c: f64) -> Result<Self> {
        if c == 0.0 {
            Ok(RecordStatus::Ok)
        } else if c == 1.0 {
            Ok(RecordStatus::Failed)
        } else if c == 2.0 {
            Ok(RecordStatus::Pending)
        } else {
            Err(Error::Format(format!("unknown status code {c}")))
        }
    }
}

#[derive(Clone, Debug, PartialEq)]
pub struct FieldResult {
    pub spec_hash: String,
    pub axes: Vec<AxisSpec>,
    pub times: Vec<f64>,
    pub records: Vec<MeasureRecord>,
    pub status: Vec<RecordStatus>,
}

/// Range of each measure over the successful records.
#[derive(Clone, Debug, PartialEq)]
pub struct FieldSummary {
    pub ftle: (f64, f64),
    pub sniftle: (f64, f64),
    pub s2: (f64, f64),
    pub q2: (f64, f64),
    pub failed: usize,
    pub pending: usize,
}

impl FieldResult {
    /// All records pending.
    pub fn empty(spec: &ScanSpec) -> Self {
        let mut records = Vec::with_capacity(spec.record_count());
        for p in 0..spec.point_count() {
            let x = spec.point(p);
            for &t in &spec.times {
                records.push(MeasureRecord::missing(x.clone(), t));
            }
        }
        FieldResult {
            spec_hash: spec.hash(),
            axes: spec.axes.clone(),
            times: spec.times.clone(),
            status: vec![RecordStatus::Pending; records.len()],
            records,
        }
    }

    pub fn dim(&self) -> usize {
        self.axes.len()
    }

    pub fn point_count(&self) -> usize {
        self.axes.iter().map(|a| a.count).product()
    }

    pub fn is_complete(&self) -> bool {
        !self.status.contains(&RecordStatus::Pending)
    }

    pub fn record(&self, point: usize, time_index: usize) -> &MeasureRecord {
        &self.records[point * self.times.len() + time_index]
    }

    /// One time layer of a measure, in grid order.
    pub fn layer(&self, time_index: usize, measure: impl Fn(&MeasureRecord) -> f64) -> Vec<f64> {
        (0..self.point_count()).map(|p| measure(self.record(p, time_index))).collect()
    }

    /// Grid index of the largest finite FTLE at one time.
    pub fn max_ftle_cell(&self, time_index: usize) -> Option<usize> {
        self.layer(time_index, |r| r.ftle)
            .iter()
            .enumerate()
            .filter(|(_, v)| v.is_finite())
            .max_by(|a, b| a.1.total_cmp(b.1))
            .map(|(i, _)| i)
    }

    pub fn summary(&self) -> FieldSummary {
        let range = |f: &dyn Fn(&MeasureRecord) -> f64| {
            self.records
                .iter()
                .zip(&self.status)
                .filter(|(_, s)| **s == RecordStatus::Ok)
                .map(|(r, _)| f(r))
                .fold((f64::INFINITY, f64::NEG_INFINITY), |(lo, hi), v| (lo.min(v), hi.max(v)))
        };
        FieldSummary {
            ftle: range(&|r| r.ftle),
            sniftle: range(&|r| r.sniftle),
            s2: range(&|r| r.s2),
            q2: range(&|r| r.q2),
            failed: self.status.iter().filter(|s| **s == RecordStatus::Failed).count(),
            pending: self.status.iter().filter(|s| **s == RecordStatus::Pending).count(),
        }
    }

    fn columns(&self) -> Vec<String> {
        let mut cols: Vec<String> = (1..=self.dim()).map(|i| format!("x{i}")).collect();
        cols.extend(["t", "ftle", "sniftle", "s2", "q2", "status"].map(String::from));
        cols
    }

    /// Delimited text: optional `# key=value` provenance lines, a header
    /// row, then one row per record. Reals carry 17 significant digits.
    pub fn write_delimited<W: Write>(&self, mut w: W, provenance: &[(String, String)]) -> Result<()> {
        for (k, v) in provenance {
            writeln!(w, "# {k}={v}")?;
        }
        writeln!(w, "# spec_hash={}", self.spec_hash)?;
        writeln!(w, "{}", self.columns().join(","))?;
        let mut line = String::new();
        for (r, s) in self.records.iter().zip(&self.status) {
            line.clear();
            for v in r.xi0.iter().chain([r.t, r.ftle, r.sniftle, r.s2, r.q2].iter()) {
                line.push_str(&fmt_real(*v));
                line.push(',');
            }
            line.push_str(s.as_str());
            writeln!(w, "{line}")?;
        }
        w.flush()?;
        Ok(())
    }

    /// Binary dump: the magic bytes, a little-endian `u64` header length, the
    /// header as JSON, then every row of the delimited format as
    /// little-endian `f64` with the status encoded 0 = ok, 1 = failed,
    /// 2 = pending.
    pub fn write_binary<W: Write>(&self, mut w: W, provenance: &[(String, String)]) -> Result<()> {
        let header = BinaryHeader {
            format: "SNFK1".into(),
            columns: self.columns(),
            rows: self.records.len(),
            spec_hash: self.spec_hash.clone(),
            axes: self.axes.clone(),
            times: self.times.clone(),
            provenance: provenance.to_vec(),
        };
        let text = serde_json::to_vec(&header).map_err(|e| Error::Format(e.to_string()))?;
        w.write_all(BINARY_MAGIC)?;
        w.write_all(&(text.len() as u64).to_le_bytes())?;
        w.write_all(&text)?;
        for (r, s) in self.records.iter().zip(&self.status) {
            for v in r.xi0.iter().chain([r.t, r.ftle, r.sniftle, r.s2, r.q2, s.code()].iter()) {
                w.write_all(&v.to_le_bytes())?;
            }
        }
        w.flush()?;
        Ok(())
    }

    pub fn read_binary<R: Read>(mut r: R) -> Result<(Self, Vec<(String, String)>)> {
        let mut magic = [0u8; 5];
        r.read_exact(&mut magic)?;
        if &magic != BINARY_MAGIC {
            return Err(Error::Format("not an SNFK1 file".into()));
        }
        let mut len = [0u8; 8];
        r.read_exact(&mut len)?;
        let len = u64::from_le_bytes(len) as usize;
        let mut text = vec![0u8; len];
        r.read_exact(&mut text)?;
        let header: BinaryHeader = serde_json::from_slice(&text).map_err(|e| Error::Format(e.to_string()))?;
        let n = header.axes.len();
        let width = n + 6;
        if header.columns.len() != width {
            return Err(Error::Format("column count does not match the grid dimension".into()));
        }
        let mut records = Vec::with_capacity(header.rows);
        let mut status = Vec::with_capacity(header.rows);
        let mut buf = vec![0u8; width * 8];
        for _ in 0..header.rows {
            r.read_exact(&mut buf)?;
            let row: Vec<f64> = buf.chunks(8).map(|b| f64::from_le_bytes(b.try_into().unwrap())).collect();
            records.push(MeasureRecord {
                xi0: row[..n].to_vec(),
                t: row[n],
                ftle: row[n + 1],
                sniftle: row[n + 2],
                s2: row[n + 3],
                q2: row[n + 4],
            });
            status.push(RecordStatus::from_code(row[n + 5])?);
        }
        let result = FieldResult {
            spec_hash: header.spec_hash,
            axes: header.axes,
            times: header.times,
            records,
            status,
        };
        if result.records.len() != result.point_count() * result.times.len() {
            return Err(Error::Format("row count does not match the grid".into()));
        }
        Ok((result, header.provenance))
    }
}

#[derive(Serialize, Deserialize)]
struct BinaryHeader {
    format: String,
    columns: Vec<String>,
    rows: usize,
    spec_hash: String,
    axes: Vec<AxisSpec>,
    times: Vec<f64>,
    provenance: Vec<(String, String)>,
}

/// 17 significant digits, round-trip exact.
pub fn fmt_real(v: f64) -> String {
    if v.is_finite() {
        format!("{v:.16e}")
    } else {
        format!("{v}")
    }
}

/// Outcome for one grid point: a record and status per time, or the error
/// that ended its integration.
type PointOutcome = (Vec<MeasureRecord>, Vec<RecordStatus>, Option<Error>);

fn evaluate_point(spec: &ScanSpec, index: usize) -> PointOutcome {
    let x = spec.point(index);
    let mut sols = Vec::with_capacity(spec.times.len());
    let flow_err = solve_flow_partial(&spec.model, &x, &spec.times, &spec.integrator, &mut sols).err();
    let mut records = Vec::with_capacity(spec.times.len());
    let mut status = Vec::with_capacity(spec.times.len());
    let mut failure = None;
    for sol in &sols {
        match MeasureRecord::from_solution(sol, &spec.xi_cov) {
            Ok(r) => {
                records.push(r);
                status.push(RecordStatus::Ok);
            }
            Err(e) => {
                failure = Some(e);
                break;
            }
        }
    }
    let failure = failure.or(flow_err);
    while records.len() < spec.times.len() {
        records.push(MeasureRecord::missing(x.clone(), spec.times[records.len()]));
        status.push(RecordStatus::Failed);
    }
    (records, status, failure)
}

/// Evaluates every grid point.
pub fn run_scan(spec: &ScanSpec) -> Result<FieldResult> {
    run_scan_chunked(spec, None, usize::MAX, |_| Ok(()))
}

/// Fills at most `max_points` pending grid points of a fresh result, in grid
/// order, leaving the rest pending. Models an interrupted run.
pub fn run_scan_partial(spec: &ScanSpec, max_points: usize) -> Result<FieldResult> {
    spec.validate()?;
    let mut result = FieldResult::empty(spec);
    fill(spec, &mut result, max_points, usize::MAX, &mut |_| Ok(()))?;
    Ok(result)
}

/// Completes the pending points of `partial`. The spec must hash to the
/// value recorded in `partial`.
pub fn checkpoint_and_resume(partial: FieldResult, spec: &ScanSpec) -> Result<FieldResult> {
    run_scan_chunked(spec, Some(partial), usize::MAX, |_| Ok(()))
}

/// Runs or resumes a scan in chunks of `chunk` grid points, calling
/// `on_chunk` with the partial result after each one (e.g. to write a
/// checkpoint).
pub fn run_scan_chunked<F>(spec: &ScanSpec, partial: Option<FieldResult>, chunk: usize, mut on_chunk: F) -> Result<FieldResult>
where
    F: FnMut(&FieldResult) -> Result<()>,
{
    spec.validate()?;
    let mut result = match partial {
        Some(p) => {
            let expected = spec.hash();
            if p.spec_hash != expected {
                return Err(Error::Resume(format!(
                    "checkpoint was produced by a different scan (hash {} vs {expected})",
                    p.spec_hash
                )));
            }
            if p.records.len() != spec.record_count() || p.status.len() != p.records.len() {
                return Err(Error::Resume("checkpoint has the wrong number of records".into()));
            }
            p
        }
        None => FieldResult::empty(spec),
    };
    fill(spec, &mut result, usize::MAX, chunk.max(1), &mut on_chunk)?;
    Ok(result)
}

fn fill(
    spec: &ScanSpec,
    result: &mut FieldResult,
    max_points: usize,
    chunk: usize,
    on_chunk: &mut dyn FnMut(&FieldResult) -> Result<()>,
) -> Result<()> {
    let nt = spec.times.len();
    let pending: Vec<usize> = (0..spec.point_count())
        .filter(|&p| result.status[p * nt..(p + 1) * nt].contains(&RecordStatus::Pending))
        .take(max_points)
        .collect();
    for block in pending.chunks(chunk) {
        let outcomes: Vec<(usize, PointOutcome)> = block.par_iter().map(|&p| (p, evaluate_point(spec, p))).collect();
        if spec.failure == FailurePolicy::Abort {
            if let Some((p, (_, _, Some(_)))) = outcomes.iter().find(|(_, o)| o.2.is_some()) {
                let p = *p;
                let err = outcomes.into_iter().find(|(q, _)| *q == p).unwrap().1 .2.unwrap();
                return Err(Error::ScanAborted {
                    point: spec.point(p),
                    source: Box::new(err),
                });
            }
        }
        for (p, (records, status, _)) in outcomes {
            for (k, (r, s)) in records.into_iter().zip(status).enumerate() {
                result.records[p * nt + k] = r;
                result.status[p * nt + k] = s;
            }
        }
        on_chunk(result)?;
    }
    Ok(())
}

/// Convenience constructor for an isotropic scan.
pub fn isotropic_spec(model: SystemModel, axes: Vec<AxisSpec>, times: Vec<f64>) -> ScanSpec {
    let n = model.dim();
    ScanSpec {
        axes,
        times,
        xi_cov: SpdMatrix::identity(n),
        model,
        integrator: IntegratorConfig::default(),
        failure: FailurePolicy::RecordNan,
    }
}

#[cfg(test)]
mod tests {
    use super::*;
    use crate::flowfield::{builtin_model, model_from_grid, Builtin, Diffusion, GriddedField, OutOfDomain};
    use crate::measures::measure_record;

    fn model(b: Builtin) -> SystemModel {
        builtin_model(b, Diffusion::Identity).unwrap()
    }

    fn small_gyre_spec() -> ScanSpec {
        isotropic_spec(
            model(Builtin::standard_double_gyre()),
            vec![
                AxisSpec {
                    min: 0.0,
                    max: 2.0,
                    count: 9,
                },
                AxisSpec {
                    min: 0.0,
                    max: 1.0,
                    count: 5,
                },
            ],
            vec![1.0, 2.5],
        )
    }

    #[test]
    fn single_point_matches_measure_record() {
        let m = model(Builtin::standard_double_gyre());
        let spec = isotropic_spec(
            m.clone(),
            vec![
                AxisSpec {
                    min: 0.3,
                    max: 1.0,
                    count: 1,
                },
                AxisSpec {
                    min: 0.6,
                    max: 1.0,
                    count: 1,
                },
            ],
            vec![3.0],
        );
        let res = run_scan(&spec).unwrap();
        assert_eq!(res.records.len(), 1);
        let direct = measure_record(&m, &[0.3, 0.6], 3.0, &SpdMatrix::identity(2), &IntegratorConfig::default()).unwrap();
        assert_eq!(res.records[0], direct);
        assert_eq!(res.status, vec![RecordStatus::Ok]);
    }

    #[test]
    fn zero_model_field() {
        let spec = isotropic_spec(
            model(Builtin::Zero { dim: 2 }),
            vec![
                AxisSpec {
                    min: -1.0,
                    max: 1.0,
                    count: 3,
                },
                AxisSpec {
                    min: 0.0,
                    max: 1.0,
                    count: 4,
                },
            ],
            vec![0.5, 2.0],
        );
        let res = run_scan(&spec).unwrap();
        assert_eq!(res.records.len(), 24);
        for r in &res.records {
            assert_eq!(r.ftle, 0.0);
            assert!((r.s2 - r.t).abs() <= 1e-12 * r.t);
        }
    }

    #[test]
    fn grid_order_is_row_major() {
        let spec = small_gyre_spec();
        assert_eq!(spec.point(0), vec![0.0, 0.0]);
        assert_eq!(spec.point(1), vec![0.0, 0.25]);
        assert_eq!(spec.point(5), vec![0.25, 0.0]);
        assert_eq!(spec.point(44), vec![2.0, 1.0]);
    }

    #[test]
    fn multi_time_capture_matches_single_time_solves() {
        let spec = small_gyre_spec();
        let res = run_scan(&spec).unwrap();
        let m = &spec.model;
        for p in [3, 17, 31] {
            let x = spec.point(p);
            let first = measure_record(m, &x, 1.0, &spec.xi_cov, &spec.integrator).unwrap();
            assert_eq!(res.record(p, 0), &first);
            let second = measure_record(m, &x, 2.5, &spec.xi_cov, &spec.integrator).unwrap();
            assert!((res.record(p, 1).ftle - second.ftle).abs() < 1e-10);
        }
    }

    #[test]
    fn scheduling_invariance() {
        let spec = small_gyre_spec();
        let many = run_scan(&spec).unwrap();
        let pool = rayon::ThreadPoolBuilder::new().num_threads(1).build().unwrap();
        let one = pool.install(|| run_scan(&spec).unwrap());
        assert_eq!(many, one);
        let chunked = run_scan_chunked(&spec, None, 7, |_| Ok(())).unwrap();
        assert_eq!(many, chunked);
    }

    #[test]
    fn resume_reproduces_full_run() {
        let spec = small_gyre_spec();
        let full = run_scan(&spec).unwrap();
        let half = run_scan_partial(&spec, spec.point_count() / 2).unwrap();
        assert!(!half.is_complete());
        assert_eq!(half.summary().pending, (spec.point_count() - spec.point_count() / 2) * 2);
        let resumed = checkpoint_and_resume(half, &spec).unwrap();
        assert_eq!(resumed, full);
        let again = checkpoint_and_resume(full.clone(), &spec).unwrap();
        assert_eq!(again, full);
    }

    #[test]
    fn resume_rejects_other_spec() {
        let spec = small_gyre_spec();
        let half = run_scan_partial(&spec, 3).unwrap();
        let mut other = spec.clone();
        other.axes[0].count = 10;
        assert!(matches!(checkpoint_and_resume(half, &other), Err(Error::Resume(_))));
    }

    #[test]
    fn binary_round_trip_supports_resume() {
        let spec = small_gyre_spec();
        let half = run_scan_partial(&spec, 10).unwrap();
        let mut buf = Vec::new();
        let prov = vec![("seed".to_string(), "1".to_string())];
        half.write_binary(&mut buf, &prov).unwrap();
        assert_eq!(&buf[..5], b"SNFK1");
        let (back, prov_back) = FieldResult::read_binary(buf.as_slice()).unwrap();
        assert_eq!(prov_back, prov);
        assert_eq!(back.status, half.status);
        assert_eq!(back.spec_hash, half.spec_hash);
        let resumed = checkpoint_and_resume(back, &spec).unwrap();
        assert_eq!(resumed, run_scan(&spec).unwrap());
        assert!(FieldResult::read_binary(&b"SNFK2xxxxxxxx"[..]).is_err());
    }

    #[test]
    fn delimited_layout() {
        let spec = isotropic_spec(
            model(Builtin::Zero { dim: 2 }),
            vec![
                AxisSpec {
                    min: 0.0,
                    max: 1.0,
                    count: 2,
                },
                AxisSpec {
                    min: 0.0,
                    max: 1.0,
                    count: 1,
                },
            ],
            vec![1.0],
        );
        let res = run_scan(&spec).unwrap();
        let mut buf = Vec::new();
        res.write_delimited(&mut buf, &[("version".into(), "x".into())]).unwrap();
        let text = String::from_utf8(buf).unwrap();
        let lines: Vec<&str> = text.lines().collect();
        assert_eq!(lines[0], "# version=x");
        assert!(lines[1].starts_with("# spec_hash="));
        assert_eq!(lines[2], "x1,x2,t,ftle,sniftle,s2,q2,status");
        assert_eq!(lines.len(), 5);
        assert!(lines[4].starts_with("1.0000000000000000e0,0.0000000000000000e0,1.0000000000000000e0,"));
        assert!(lines[4].ends_with(",ok"));
    }

    #[test]
    fn failures_are_masked_or_abort() {
        let saddle = model(Builtin::LinearSaddle { a: 1.0 });
        let axes = vec![vec![-1.0, 0.0, 1.0], vec![-1.0, 0.0, 1.0]];
        let field = GriddedField::sample(&saddle, axes, vec![0.0, 5.0], false).unwrap();
        let gridded = model_from_grid(field, OutOfDomain::Error).unwrap();
        let mut spec = isotropic_spec(
            gridded,
            vec![
                AxisSpec {
                    min: -0.9,
                    max: 0.9,
                    count: 3,
                },
                AxisSpec {
                    min: -0.5,
                    max: 0.5,
                    count: 3,
                },
            ],
            vec![0.1, 1.0],
        );
        let res = run_scan(&spec).unwrap();
        // x = ±0.9 leaves [-1, 1] before t = 1 (0.9 e^t > 1 at t ≈ 0.105).
        let p = 0; // (-0.9, -0.5)
        assert_eq!(res.status[p * 2], RecordStatus::Ok);
        assert_eq!(res.status[p * 2 + 1], RecordStatus::Failed);
        assert!(res.record(p, 1).ftle.is_nan());
        let centre = 4; // (0, 0) never moves
        assert_eq!(res.status[centre * 2 + 1], RecordStatus::Ok);
        assert!(res.summary().failed > 0);

        spec.failure = FailurePolicy::Abort;
        match run_scan(&spec) {
            Err(Error::ScanAborted { point, .. }) => assert_eq!(point, vec![-0.9, -0.5]),
            other => panic!("unexpected {other:?}"),
        }
    }

    #[test]
    fn spec_validation() {
        let mut spec = small_gyre_spec();
        spec.times = vec![2.0, 1.0];
        assert!(run_scan(&spec).is_err());
        let mut spec = small_gyre_spec();
        spec.axes[0].count = 0;
        assert!(run_scan(&spec).is_err());
        let mut spec = small_gyre_spec();
        spec.axes[1] = AxisSpec {
            min: 1.0,
            max: 1.0,
            count: 3,
        };
        assert!(run_scan(&spec).is_err());
    }
}
