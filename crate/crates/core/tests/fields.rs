use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sniftle_core::fieldscan::{
    checkpoint_and_resume, run_scan, run_scan_chunked, run_scan_partial, AxisSpec, FailurePolicy, FieldResult, ScanSpec,
};
use sniftle_core::flowmap::advect;
use sniftle_core::{
    builtin_model, model_from_grid, Builtin, Diffusion, GriddedField, IntegratorConfig, OutOfDomain, SpdMatrix, SystemModel,
};

fn gyre() -> SystemModel {
    builtin_model(Builtin::standard_double_gyre(), Diffusion::Identity).unwrap()
}

fn linspace(lo: f64, hi: f64, n: usize) -> Vec<f64> {
    (0..n).map(|i| lo + (hi - lo) * i as f64 / (n - 1) as f64).collect()
}

fn gyre_spec(nx: usize, ny: usize, times: Vec<f64>) -> ScanSpec {
    ScanSpec {
        axes: vec![
            AxisSpec {
                min: 0.0,
                max: 2.0,
                count: nx,
            },
            AxisSpec {
                min: 0.0,
                max: 1.0,
                count: ny,
            },
        ],
        times,
        xi_cov: SpdMatrix::identity(2),
        model: gyre(),
        integrator: IntegratorConfig::default(),
        failure: FailurePolicy::RecordNan,
    }
}

#[test]
fn gridded_double_gyre_tracks_analytic_velocity() {
    let analytic = gyre();
    let field = GriddedField::sample(
        &analytic,
        vec![linspace(0.0, 2.0, 256), linspace(0.0, 1.0, 128)],
        linspace(0.0, 10.0, 50),
        false,
    )
    .unwrap();
    let gridded = model_from_grid(field, OutOfDomain::Error).unwrap();

    let mut rng = ChaCha8Rng::seed_from_u64(3);
    let mut worst = 0.0f64;
    for _ in 0..2000 {
        let x = [rng.random_range(0.0..2.0), rng.random_range(0.0..1.0)];
        let t = rng.random_range(0.0..10.0);
        let a = analytic.velocity_at(&x, t).unwrap();
        let g = gridded.velocity_at(&x, t).unwrap();
        worst = worst.max((a[0] - g[0]).abs()).max((a[1] - g[1]).abs());
    }
    assert!(worst <= 1e-3, "max velocity error {worst:e}");
}

/// FTLE from central differences of trajectories, with the largest
/// singular value of the 2×2 Jacobian taken in closed form.
fn fd_ftle(m: &SystemModel, x: &[f64], t: f64, h: f64) -> f64 {
    let cfg = IntegratorConfig::default();
    let mut j = [[0.0; 2]; 2];
    for k in 0..2 {
        let (mut p, mut q) = (x.to_vec(), x.to_vec());
        p[k] += h;
        q[k] -= h;
        let (fp, fq) = (advect(m, &p, t, &cfg).unwrap(), advect(m, &q, t, &cfg).unwrap());
        for i in 0..2 {
            j[i][k] = (fp[i] - fq[i]) / (2.0 * h);
        }
    }
    let c00 = j[0][0] * j[0][0] + j[1][0] * j[1][0];
    let c11 = j[0][1] * j[0][1] + j[1][1] * j[1][1];
    let c01 = j[0][0] * j[0][1] + j[1][0] * j[1][1];
    let lam = 0.5 * (c00 + c11) + (0.25 * (c00 - c11).powi(2) + c01 * c01).sqrt();
    0.5 * lam.ln() / t
}

#[test]
fn scan_agrees_with_trajectory_oracle() {
    let spec = gyre_spec(21, 11, vec![6.0]);
    let field = run_scan(&spec).unwrap();
    let mut worst = 0.0f64;
    for p in 0..spec.point_count() {
        let oracle = fd_ftle(&spec.model, &spec.point(p), 6.0, 1e-6);
        worst = worst.max((field.record(p, 0).ftle - oracle).abs());
    }
    assert!(worst <= 1e-4, "{worst:e}");
}

#[test]
fn refinement_barely_moves_the_maximum() {
    let max_ftle = |nx, ny| {
        let f = run_scan(&gyre_spec(nx, ny, vec![10.0])).unwrap();
        f.layer(0, |r| r.ftle).into_iter().fold(f64::NEG_INFINITY, f64::max)
    };
    let coarse = max_ftle(51, 26);
    let fine = max_ftle(101, 51);
    let change = (fine - coarse).abs() / fine;
    assert!(change <= 0.02, "coarse {coarse}, fine {fine}");
}

#[test]
fn worker_count_does_not_change_the_field() {
    let spec = gyre_spec(31, 16, vec![2.0, 4.0]);
    let run_with = |threads| {
        rayon::ThreadPoolBuilder::new()
            .num_threads(threads)
            .build()
            .unwrap()
            .install(|| run_scan(&spec).unwrap())
    };
    let one = run_with(1);
    let four = run_with(4);
    assert_eq!(one, four);
    let (mut a, mut b) = (Vec::new(), Vec::new());
    one.write_delimited(&mut a, &[]).unwrap();
    four.write_delimited(&mut b, &[]).unwrap();
    assert_eq!(a, b);
}

#[test]
fn resume_from_checkpoint_file() {
    let spec = gyre_spec(17, 9, vec![1.5, 3.0]);
    let full = run_scan(&spec).unwrap();

    let dir = tempfile::tempdir().unwrap();
    let path = dir.path().join("scan.snfk");
    let partial = run_scan_partial(&spec, 70).unwrap();
    partial.write_binary(std::fs::File::create(&path).unwrap(), &[]).unwrap();
    let (loaded, _) = FieldResult::read_binary(std::fs::File::open(&path).unwrap()).unwrap();
    assert_eq!(loaded.summary().pending, partial.summary().pending);
    let resumed = checkpoint_and_resume(loaded, &spec).unwrap();
    assert_eq!(resumed, full);

    // checkpoints written during a chunked run are valid resume points
    let mut snapshots = Vec::new();
    let chunked = run_scan_chunked(&spec, None, 40, |r| {
        snapshots.push(r.clone());
        Ok(())
    })
    .unwrap();
    assert_eq!(chunked, full);
    assert_eq!(snapshots.len(), 4);
    let resumed = checkpoint_and_resume(snapshots[1].clone(), &spec).unwrap();
    assert_eq!(resumed, full);

    let mut other = spec.clone();
    other.times = vec![1.5, 3.5];
    assert!(checkpoint_and_resume(partial, &other).is_err());
}
