use std::path::Path;
use std::process::{Command, Output};

use sniftle_core::{builtin_model, Builtin, Diffusion, GriddedField};

fn sniftle(dir: &Path, args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sniftle"))
        .args(args)
        .current_dir(dir)
        .env_remove("SNIFTLE_WORKERS")
        .output()
        .unwrap()
}

fn stdout(o: &Output) -> String {
    String::from_utf8_lossy(&o.stdout).into_owned()
}

fn stderr(o: &Output) -> String {
    String::from_utf8_lossy(&o.stderr).into_owned()
}

fn value(text: &str, key: &str) -> f64 {
    let line = text
        .lines()
        .find(|l| l.starts_with(&format!("{key} = ")))
        .unwrap_or_else(|| panic!("no {key} in {text}"));
    line[key.len() + 3..].parse().unwrap()
}

fn write(dir: &Path, name: &str, text: &str) {
    std::fs::write(dir.join(name), text).unwrap();
}

const ZERO: &str = r#"
[model]
builtin = "zero"
params = [2]

[scales]
eps = 0.1
delta = 0.1

[point]
xi0 = [0.0, 0.0]
t = 1.0

[validate]
samples = 2000
em_step = 1e-2

[scan]
axes = [{ min = 0.0, max = 1.0, count = 1 }, { min = 0.0, max = 1.0, count = 1 }]
times = [1.0]
"#;

#[test]
fn point_on_fixtures() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "zero.toml", ZERO);
    let o = sniftle(dir.path(), &["point", "--config", "zero.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = stdout(&o);
    assert_eq!(value(&text, "ftle"), 0.0);
    assert!((value(&text, "s2") - 1.0).abs() < 1e-12);
    assert!(text.contains("# config_hash="));
    assert!(text.contains("noise_term = "));

    let saddle = ZERO.replace("builtin = \"zero\"\nparams = [2]", "builtin = \"linear_saddle\"\nparams = [1.0]");
    write(dir.path(), "saddle.toml", &saddle);
    let o = sniftle(dir.path(), &["point", "--config", "saddle.toml", "--xi0", "0.2,-0.1"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!((value(&stdout(&o), "ftle") - 1.0).abs() < 1e-8);
}

#[test]
fn config_errors_exit_two() {
    let dir = tempfile::tempdir().unwrap();
    let asym = ZERO.replace("delta = 0.1", "delta = 0.1\nxi_cov = [[1.0, 0.1], [0.0, 1.0]]");
    write(dir.path(), "asym.toml", &asym);
    let o = sniftle(dir.path(), &["point", "--config", "asym.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("scales.xi_cov"), "{}", stderr(&o));

    write(dir.path(), "typo.toml", &ZERO.replace("eps = 0.1", "esp = 0.1"));
    let o = sniftle(dir.path(), &["point", "--config", "typo.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("line"), "{}", stderr(&o));

    let study = format!("{ZERO}\n[study]\naxis = \"eps_only\"\nlevels = [0.1, 0.01]\nsamples = 10\n");
    write(dir.path(), "study.toml", &study);
    let o = sniftle(dir.path(), &["bound-study", "--config", "study.toml"]);
    assert_eq!(o.status.code(), Some(2));
    assert!(stderr(&o).contains("insufficient levels"), "{}", stderr(&o));

    let o = sniftle(dir.path(), &["point", "--config", "missing.toml"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn scan_output_and_io_errors() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "zero.toml", ZERO);
    let o = sniftle(dir.path(), &["scan", "--config", "zero.toml", "--output", "one.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let text = std::fs::read_to_string(dir.path().join("one.csv")).unwrap();
    let data: Vec<&str> = text.lines().filter(|l| !l.starts_with('#')).collect();
    assert_eq!(data.len(), 2);
    assert_eq!(data[0], "x1,x2,t,ftle,sniftle,s2,q2,status");
    assert!(stdout(&o).contains("failed = 0"));

    let o = sniftle(dir.path(), &["scan", "--config", "zero.toml", "--output", "no/such/dir/out.csv"]);
    assert_eq!(o.status.code(), Some(4));
}

#[test]
fn numeric_failure_exits_three() {
    let dir = tempfile::tempdir().unwrap();
    let saddle = builtin_model(Builtin::LinearSaddle { a: 1.0 }, Diffusion::Identity).unwrap();
    let field = GriddedField::sample(&saddle, vec![vec![-1.0, 0.0, 1.0], vec![-1.0, 0.0, 1.0]], vec![0.0, 5.0], false).unwrap();
    field
        .to_delimited(std::fs::File::create(dir.path().join("saddle.csv")).unwrap())
        .unwrap();
    let cfg = "[model]\ngridded = \"saddle.csv\"\n\n[point]\nxi0 = [0.9, 0.0]\nt = 1.0\n";
    write(dir.path(), "grid.toml", cfg);
    let o = sniftle(dir.path(), &["point", "--config", "grid.toml"]);
    assert_eq!(o.status.code(), Some(3), "{}", stderr(&o));
    assert!(stderr(&o).contains("left the domain"), "{}", stderr(&o));

    let o = sniftle(dir.path(), &["point", "--config", "grid.toml", "--xi0", "0.0,0.9"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
}

#[test]
fn validate_linear_and_zero_models_pass() {
    let dir = tempfile::tempdir().unwrap();
    write(dir.path(), "zero.toml", ZERO);
    let o = sniftle(dir.path(), &["validate", "--config", "zero.toml"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("result = pass"));

    let saddle = ZERO.replace("builtin = \"zero\"\nparams = [2]", "builtin = \"linear_saddle\"\nparams = [0.5]");
    write(dir.path(), "saddle.toml", &saddle);
    let o = sniftle(dir.path(), &["validate", "--config", "saddle.toml", "--seed", "5"]);
    assert_eq!(o.status.code(), Some(0), "{}{}", stdout(&o), stderr(&o));
    assert!(stdout(&o).contains("# seed=5"));
}

#[test]
fn linear_study_reports_degenerate() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = ZERO.replace("builtin = \"zero\"\nparams = [2]", "builtin = \"linear_saddle\"\nparams = [1.0]")
        + "\n[study]\naxis = \"delta_only\"\nlevels = [1e-1, 3e-2, 1e-2, 3e-3]\nsamples = 100\nem_step = 1e-2\n";
    write(dir.path(), "study.toml", &cfg);
    let o = sniftle(dir.path(), &["bound-study", "--config", "study.toml", "--output", "study.csv"]);
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert!(stdout(&o).contains("DegenerateZero"), "{}", stdout(&o));
    let table = std::fs::read_to_string(dir.path().join("study.csv")).unwrap();
    assert_eq!(table.lines().filter(|l| !l.starts_with('#')).count(), 5);
}

#[test]
fn scan_checkpoint_and_resume() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = r#"
[model]
builtin = "double_gyre"
params = [0.1, 0.1, 0.6283185307179586]

[scan]
axes = [{ min = 0.0, max = 2.0, count = 13 }, { min = 0.0, max = 1.0, count = 7 }]
times = [1.0, 3.0]
checkpoint_every = 20

[output]
format = "binary"
"#;
    write(dir.path(), "gyre.toml", cfg);
    let o = sniftle(
        dir.path(),
        &["scan", "--config", "gyre.toml", "--output", "full.bin", "--checkpoint", "ck.bin"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    let full = std::fs::read(dir.path().join("full.bin")).unwrap();
    assert_eq!(&full[..5], b"SNFK1");
    assert!(dir.path().join("ck.bin").exists());

    let o = sniftle(
        dir.path(),
        &["scan", "--config", "gyre.toml", "--output", "resumed.bin", "--resume", "ck.bin"],
    );
    assert_eq!(o.status.code(), Some(0), "{}", stderr(&o));
    assert_eq!(std::fs::read(dir.path().join("resumed.bin")).unwrap(), full);

    write(dir.path(), "other.toml", &cfg.replace("count = 7", "count = 8"));
    let o = sniftle(
        dir.path(),
        &["scan", "--config", "other.toml", "--output", "x.bin", "--resume", "ck.bin"],
    );
    assert_eq!(o.status.code(), Some(2), "{}", stderr(&o));
    assert!(stderr(&o).contains("resume"), "{}", stderr(&o));
}
