use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use tempfile::TempDir;

const INDICATOR: &str = r#"
[market]
d = 1
n = 1
mu = "ind:j=1;c=0;lo=[0.2];hi=[1]"
sigma = "const:[1]"

[perturbation]
dmu = "const:[1]"
tau_grid = [0.0, 0.1]

[mc]
paths = 2000
steps = 50
seed = 11

[utility]
spec = "sqrt"
"#;

fn weaksens(args: &[&str], envs: &[(&str, &str)]) -> Output {
    let mut cmd = Command::new(env!("CARGO_BIN_EXE_weaksens"));
    cmd.args(args).env_remove("WEAKSENS_THREADS");
    for (k, v) in envs {
        cmd.env(k, v);
    }
    cmd.output().expect("binary runs")
}

fn code(o: &Output) -> i32 {
    o.status.code().expect("exit code")
}

fn write_config(dir: &Path, text: &str) -> String {
    let p = dir.join("run.toml");
    fs::write(&p, text).unwrap();
    p.to_string_lossy().into_owned()
}

fn run_in(dir: &TempDir, command: &str, config: &str, out: &str, extra: &[&str]) -> Output {
    let cfg = write_config(dir.path(), config);
    let out = dir.path().join(out);
    let mut args = vec![command, "--config", &cfg, "--out", out.to_str().unwrap()];
    args.extend_from_slice(extra);
    weaksens(&args, &[])
}

fn read(dir: &TempDir, rel: &str) -> String {
    fs::read_to_string(dir.path().join(rel)).unwrap()
}

#[test]
fn help_and_version_exit_zero() {
    assert_eq!(code(&weaksens(&["--help"], &[])), 0);
    assert_eq!(code(&weaksens(&["--version"], &[])), 0);
    assert_eq!(code(&weaksens(&["sens", "--help"], &[])), 0);
}

#[test]
fn usage_errors_exit_one() {
    assert_eq!(code(&weaksens(&["value", "--no-such-flag"], &[])), 1);
    assert_eq!(code(&weaksens(&["frobnicate"], &[])), 1);
    assert_eq!(code(&weaksens(&[], &[])), 1);
}

#[test]
fn config_errors_exit_two() {
    let dir = TempDir::new().unwrap();
    let o = run_in(&dir, "value", "[market]\nd = 1\n", "o", &[]);
    assert_eq!(code(&o), 2);
    let o = run_in(&dir, "value", &INDICATOR.replace("seed = 11\n", ""), "o", &[]);
    assert_eq!(code(&o), 2, "missing seed");
    assert!(String::from_utf8_lossy(&o.stderr).contains("seed"));
    let o = run_in(&dir, "value", &INDICATOR.replace("sqrt", "power:p=0.5"), "o", &[]);
    assert_eq!(code(&o), 2, "p must exceed 1");
    let o = weaksens(&["value", "--config", "/nonexistent/run.toml"], &[]);
    assert_eq!(code(&o), 2);
    let o = weaksens(&["example1", "--seed", "1", "--paths", "10", "--steps", "5"], &[("WEAKSENS_THREADS", "zero")]);
    assert_eq!(code(&o), 2);
}

#[test]
fn value_writes_surface_and_is_reproducible_across_threads() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), INDICATOR);
    let mut outputs = Vec::new();
    for threads in ["1", "2"] {
        let out = dir.path().join(format!("t{threads}"));
        let o = weaksens(&["value", "--config", &cfg, "--out", out.to_str().unwrap()], &[("WEAKSENS_THREADS", threads)]);
        assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
        outputs.push(fs::read(out.join("value.csv")).unwrap());
    }
    assert_eq!(outputs[0], outputs[1]);
    let text = String::from_utf8(outputs.remove(0)).unwrap();
    let mut lines = text.lines();
    assert_eq!(lines.next().unwrap(), "tau,u_weak,se_weak,u_strong,se_strong,weight_mean,seed");
    let first: Vec<&str> = lines.next().unwrap().split(',').collect();
    // At tau = 0 weak and strong values coincide exactly.
    assert_eq!(first[1], first[3]);
    assert_eq!(lines.count(), 1);
    assert!(dir.path().join("t1/value.txt").exists());
}

#[test]
fn example1_small_run() {
    let dir = TempDir::new().unwrap();
    let out = dir.path().join("e1");
    let o = weaksens(
        &["example1", "--seed", "5", "--paths", "20000", "--steps", "200", "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    let csv = fs::read_to_string(out.join("example1.csv")).unwrap();
    assert_eq!(csv.lines().count(), 4);
    assert!(csv.lines().skip(1).all(|l| l.contains(",pass,")));
    // Impossible tolerances turn into a failed verdict.
    let o = weaksens(
        &["example1", "--seed", "5", "--paths", "2000", "--steps", "50", "--tol-weak", "0", "--out", out.to_str().unwrap()],
        &[],
    );
    assert_eq!(code(&o), 3);
}

#[test]
fn sens_agrees_with_finite_differences() {
    let dir = TempDir::new().unwrap();
    let o = run_in(&dir, "sens", INDICATOR, "s", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&dir, "s/sens.csv");
    let rows: Vec<&str> = csv.lines().skip(1).collect();
    assert_eq!(rows.len(), 2);
    assert!(rows[0].starts_with("dmu,weak-fd,") && rows[0].contains(",pass,"));
    assert!(rows[1].starts_with("dmu,gap,"));
}

#[test]
fn sens_along_zero_direction_is_zero() {
    let dir = TempDir::new().unwrap();
    let cfg = INDICATOR.replace("dmu = \"const:[1]\"", "dmu = \"const:[0]\"\ndlambda = \"const:[0]\"");
    let o = run_in(&dir, "sens", &cfg, "z", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    for row in read(&dir, "z/sens.csv").lines().skip(1) {
        let f: Vec<&str> = row.split(',').collect();
        assert_eq!(f[2].parse::<f64>().unwrap(), 0.0, "{row}");
        assert_eq!(f[4].parse::<f64>().unwrap(), 0.0, "{row}");
    }
}

#[test]
fn xstar_export_import_round_trip() {
    let dir = TempDir::new().unwrap();
    let cfg = format!("{INDICATOR}\n[output]\nexport_xstar = true\n");
    let o = run_in(&dir, "sens", &cfg, "x", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let native = read(&dir, "x/sens.csv");
    let xstar = dir.path().join("x/xstar.csv");
    assert_eq!(fs::read_to_string(&xstar).unwrap().lines().count(), 2001);

    let cfg = INDICATOR.replace("seed = 11\n", "seed = 11\nxstar_file = \"x/xstar.csv\"\n");
    let o = run_in(&dir, "sens", &cfg, "y", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let imported = read(&dir, "y/sens.csv");
    let formula = |text: &str| text.lines().nth(1).unwrap().split(',').nth(2).unwrap().parse::<f64>().unwrap();
    assert!(imported.lines().nth(1).unwrap().starts_with("dmu,formula-external,"));
    let (a, b) = (formula(&native), formula(&imported));
    assert!((a - b).abs() <= 1e-9 * (1.0 + a.abs()), "{a} vs {b}");

    // A truncated file is an invalid input.
    fs::write(&xstar, "path_index,xstar\n0,1.0\n").unwrap();
    assert_eq!(code(&run_in(&dir, "sens", &cfg, "y", &[])), 2);
}

const TWO_FACTOR: &str = r#"
[market]
d = 1
n = 2
mu = "const:[0.3]"
sigma = "const:[1,0]"

[perturbation]
tau_grid = [0.0, 0.3]

[mc]
paths = 200
steps = 20
seed = 4
"#;

#[test]
fn h1check_accepts_kernel_family_and_rejects_rotation() {
    let dir = TempDir::new().unwrap();
    let keep = TWO_FACTOR.replace("tau_grid", "kernel_a = \"const:[0.5]\"\ntau_grid");
    let o = run_in(&dir, "h1check", &keep, "k", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    assert!(read(&dir, "k/h1check.csv").lines().skip(1).all(|l| l.contains("kernel-preserving,true,true")));

    let rotate = TWO_FACTOR.replace("tau_grid", "dsigma = \"const:[0,1]\"\ntau_grid");
    let o = run_in(&dir, "h1check", &rotate, "r", &[]);
    assert_eq!(code(&o), 3);
    let csv = read(&dir, "r/h1check.csv");
    assert!(csv.lines().nth(2).unwrap().starts_with("0.3,additive,true,false"));
}

#[test]
fn example2_deterministic_coincides() {
    let dir = TempDir::new().unwrap();
    let cfg = INDICATOR
        .replace("ind:j=1;c=0;lo=[0.2];hi=[1]", "const:[0.6]")
        .replace("dmu = \"const:[1]\"", "dlambda = \"const:[-1]\"");
    let o = run_in(&dir, "example2", &cfg, "e2", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let row = read(&dir, "e2/example2.csv");
    assert!(row.lines().nth(1).unwrap().split(',').nth(3) == Some("true"));
}

#[test]
fn norms_saturate_budget() {
    let dir = TempDir::new().unwrap();
    let cfg = INDICATOR.replace("sqrt", "power:p=3");
    let o = run_in(&dir, "norms", &cfg, "n", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = read(&dir, "n/norms.csv");
    let j: f64 = csv.lines().nth(1).unwrap().split(',').nth(1).unwrap().parse().unwrap();
    assert!((j - 1.0).abs() < 1e-6, "{j}");
    let o = run_in(&dir, "norms", &INDICATOR.replace("\"sqrt\"", "\"log\""), "n", &[]);
    assert_eq!(code(&o), 2, "norms needs a power utility");
}

#[test]
fn secondorder_residuals_are_quadratic() {
    let dir = TempDir::new().unwrap();
    let cfg = INDICATOR.replace("sqrt", "power:p=2");
    let o = run_in(&dir, "secondorder", &cfg, "so", &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stdout));
    assert_eq!(read(&dir, "so/secondorder.csv").lines().count(), 6);
}

#[test]
fn danskin_support_function() {
    let dir = TempDir::new().unwrap();
    let cloud = dir.path().join("cloud.csv");
    fs::write(&cloud, "# square\n1,0\n0,1\n-1,0\n0,-1\n").unwrap();
    let out = dir.path().join("d");
    let args = |delta: &str| {
        vec![
            "danskin".to_string(),
            "--cloud".into(),
            cloud.to_string_lossy().into_owned(),
            "--direction".into(),
            "1,1".into(),
            "--delta".into(),
            delta.into(),
            "--out".into(),
            out.to_string_lossy().into_owned(),
        ]
    };
    let o = weaksens(&args("-1,2").iter().map(String::as_str).collect::<Vec<_>>(), &[]);
    assert_eq!(code(&o), 0, "{}", String::from_utf8_lossy(&o.stderr));
    let csv = fs::read_to_string(out.join("danskin.csv")).unwrap();
    // Tie between the first two points; the derivative picks the better one.
    assert_eq!(csv.lines().nth(1).unwrap(), "1,0;1,1,2,0.000000000001");
    let o = weaksens(&args("1,2,3").iter().map(String::as_str).collect::<Vec<_>>(), &[]);
    assert_eq!(code(&o), 1);
}

#[test]
fn config_round_trips_through_the_cli() {
    let dir = TempDir::new().unwrap();
    let cfg = write_config(dir.path(), INDICATOR);
    let o = weaksens(&["config", "--config", &cfg, "--seed", "99"], &[]);
    assert_eq!(code(&o), 0);
    let printed = String::from_utf8(o.stdout).unwrap();
    assert!(printed.contains("seed = 99"));
    let again = write_config(dir.path(), &printed);
    let o2 = weaksens(&["config", "--config", &again], &[]);
    assert_eq!(String::from_utf8(o2.stdout).unwrap(), printed);
}
