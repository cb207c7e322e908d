use std::fs;
use std::path::Path;
use std::process::{Command, Output};

use serde_json::Value;

fn sbm(args: &[&str]) -> Output {
    Command::new(env!("CARGO_BIN_EXE_sbm"))
        .args(args)
        .env("SBM_WORKERS", "2")
        .env("RUST_LOG", "warn")
        .output()
        .expect("binary runs")
}

fn ok(args: &[&str]) -> String {
    let out = sbm(args);
    assert_eq!(
        out.status.code(),
        Some(0),
        "{args:?}\nstderr: {}",
        String::from_utf8_lossy(&out.stderr)
    );
    String::from_utf8(out.stdout).unwrap()
}

fn json(text: &str) -> Value {
    serde_json::from_str(text).expect("valid JSON")
}

fn write(dir: &Path, name: &str, text: &str) -> String {
    let p = dir.join(name);
    fs::write(&p, text).unwrap();
    p.display().to_string()
}

const FAST: [&str; 6] = [
    "--method",
    "lbfgs",
    "--restarts",
    "2",
    "--set",
    "solver.anneal.rounds=1",
];

#[test]
fn free_spin_energy() {
    let mut args = vec![
        "solve",
        "--tunneling",
        "0.1",
        "--alpha",
        "0",
        "--modes",
        "4",
        "-M",
        "2",
    ];
    args.extend(FAST);
    let r = json(&ok(&args));
    let e = r["result"]["observables"]["energy"].as_f64().unwrap();
    assert!((e + 0.05).abs() < 1e-10, "{e}");
    assert_eq!(r["command"], "solve");
    assert_eq!(r["schema_version"], 1);
}

#[test]
fn localized_ground_state_has_magnetization() {
    let mut args = vec![
        "solve",
        "--s",
        "0.3",
        "--tunneling",
        "0.1",
        "--alpha",
        "0.05",
        "--modes",
        "20",
        "-M",
        "4",
    ];
    args.extend(FAST);
    let r = json(&ok(&args));
    let sz = r["result"]["observables"]["sigma_z"].as_f64().unwrap();
    assert!(sz.abs() > 0.1, "sigma_z = {sz}");
}

#[test]
fn solve_output_is_deterministic_and_reparses() {
    let dir = tempfile::tempdir().unwrap();
    let a = dir.path().join("a.json");
    let b = dir.path().join("b.json");
    for p in [&a, &b] {
        let mut args = vec![
            "solve",
            "--s",
            "0.5",
            "--tunneling",
            "0.1",
            "--alpha",
            "0.05",
            "--modes",
            "8",
            "-M",
            "3",
            "-o",
            p.to_str().unwrap(),
        ];
        args.extend(FAST);
        ok(&args);
    }
    let ta = fs::read(&a).unwrap();
    assert_eq!(ta, fs::read(&b).unwrap());
    let v = json(std::str::from_utf8(&ta).unwrap());
    let again = serde_json::to_string_pretty(&v).unwrap() + "\n";
    assert_eq!(json(&again), v);
    assert!(v["result"]["restart_energies"].as_array().unwrap().len() == 2);
}

#[test]
fn rotation_removes_bias() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "rot.toml",
        r#"
[model]
layout = "single_bath_both"
bias = 0.17320508075688773
tunneling = 0.1
[bath]
s = 0.3
alpha = 0.01
[bath_x]
beta = 0.03
"#,
    );
    let text = ok(&[
        "rotate",
        "-c",
        &cfg,
        "--theta",
        &std::f64::consts::FRAC_PI_3.to_string(),
    ]);
    let t: toml::Table = toml::from_str(&text).unwrap();
    let model = t["model"].as_table().unwrap();
    assert_eq!(model["layout"].as_str(), Some("diagonal_only"));
    assert!(model["bias"].as_float().unwrap().abs() < 1e-12);
    assert!((model["tunneling"].as_float().unwrap() - 0.2).abs() < 1e-12);
    let alpha = t["bath"]["alpha"].as_float().unwrap();
    assert!((alpha - 0.04).abs() < 1e-12, "{alpha}");
    // the rotated config is itself a valid input
    let p = write(dir.path(), "rotated.toml", &text);
    ok(&["rotate", "-c", &p, "--theta", "0"]);

    // default angle is the one that removes the bias
    let text = ok(&["rotate", "-c", &cfg]);
    assert!(text.contains("tunneling = 0.2"), "{text}");
}

#[test]
fn rotating_a_result_preserves_bloch_length() {
    let dir = tempfile::tempdir().unwrap();
    let res = dir.path().join("r.json");
    let mut args = vec![
        "solve",
        "--s",
        "0.5",
        "--bias",
        "0.05",
        "--tunneling",
        "0.1",
        "--alpha",
        "0.05",
        "--modes",
        "6",
        "-M",
        "2",
        "-o",
        res.to_str().unwrap(),
    ];
    args.extend(FAST);
    ok(&args);
    let r = json(&fs::read_to_string(&res).unwrap());
    let o = &r["result"]["observables"];
    let (sz, sx) = (
        o["sigma_z"].as_f64().unwrap(),
        o["sigma_x"].as_f64().unwrap(),
    );
    let rot = json(&ok(&[
        "rotate",
        "--result",
        res.to_str().unwrap(),
        "--theta",
        "0.7",
    ]));
    let (rz, rx) = (
        rot["sigma_z"].as_f64().unwrap(),
        rot["sigma_x"].as_f64().unwrap(),
    );
    assert!((rz.hypot(rx) - sz.hypot(sx)).abs() < 1e-14);
    assert!((rz - (sz * 0.7f64.cos() + sx * 0.7f64.sin())).abs() < 1e-14);
}

#[test]
fn oracle_polaron_shift() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "one.toml",
        "[model]\ntunneling = 0.0\n[explicit]\nfrequencies = [1.0]\ndiag = [0.2]\n",
    );
    let r = json(&ok(&["oracle", "-c", &cfg]));
    let e = r["exact"]["energy"].as_f64().unwrap();
    assert!((e + 0.01).abs() < 1e-12, "{e}");
    assert!(r["gap"].is_null());
}

#[test]
fn oracle_reports_variational_gap_from_checkpoint() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "two.toml",
        "[model]\ntunneling = 0.1\n[explicit]\nfrequencies = [0.4, 1.1]\ndiag = [0.15, 0.3]\n",
    );
    let cp = dir.path().join("cp.json");
    let mut args = vec!["solve", "-c", &cfg, "-M", "2", "--set"];
    let set = format!("output.checkpoint=\"{}\"", cp.display());
    args.push(&set);
    args.extend(FAST);
    ok(&args);
    let r = json(&ok(&[
        "oracle",
        "-c",
        &cfg,
        "--checkpoint",
        cp.to_str().unwrap(),
    ]));
    let gap = r["gap"].as_f64().unwrap();
    assert!((0.0..1e-3).contains(&gap), "gap {gap}");
    let var = r["variational_energy"].as_f64().unwrap();
    assert!((var - gap - r["exact"]["energy"].as_f64().unwrap()).abs() < 1e-15);
}

#[test]
fn sweep_csv_columns() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "sweep.toml",
        r#"
[model]
tunneling = 0.1
[bath]
s = 0.5
modes = 6
[sweep]
parameter = "alpha"
linspace = { start = 0.0, stop = 0.02, points = 3 }
"#,
    );
    let mut args = vec!["sweep", "-c", &cfg, "-M", "2"];
    args.extend(FAST);
    let text = ok(&args);
    let mut lines = text.lines();
    assert_eq!(
        lines.next(),
        Some("param,E_g,sigma_z,sigma_x,entropy,converged,iterations")
    );
    let rows: Vec<&str> = lines.collect();
    assert_eq!(rows.len(), 3);
    let first: Vec<f64> = rows[0]
        .split(',')
        .take(2)
        .map(|x| x.parse().unwrap())
        .collect();
    assert_eq!(first[0], 0.0);
    assert!((first[1] + 0.05).abs() < 1e-12, "{}", rows[0]);
}

#[test]
fn critical_coupling_of_diagonal_bath() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(
        dir.path(),
        "crit.toml",
        r#"
[model]
tunneling = 0.1
[bath]
s = 0.5
modes = 20
lambda = 2.0
[solver]
method = "lbfgs"
multiplicity = 4
restarts = 2
[solver.anneal]
rounds = 1
[sweep]
parameter = "alpha"
grid = [0.08, 0.09, 0.10, 0.11, 0.12]
[critical]
resolution = 0.002
"#,
    );
    let r = json(&ok(&["critical", "-c", &cfg]));
    let ac = r["critical_value"].as_f64().unwrap();
    assert!((ac - 0.0981).abs() < 0.15 * 0.0981, "alpha_c = {ac}");
}

#[test]
fn config_errors_exit_with_one() {
    let dir = tempfile::tempdir().unwrap();
    let cfg = write(dir.path(), "bad.toml", "[bath]\ns = 0.3\nalpah = 0.1\n");
    let out = sbm(&["solve", "-c", &cfg]);
    assert_eq!(out.status.code(), Some(1));
    let err = String::from_utf8_lossy(&out.stderr);
    assert!(err.contains("line 3") && err.contains("alpah"), "{err}");

    let out = sbm(&["solve", "--set", "solver.multiplicity=0"]);
    assert_eq!(out.status.code(), Some(1));
    assert_eq!(sbm(&["nonsense"]).status.code(), Some(1));
    assert_eq!(sbm(&["solve", "--alpha", "abc"]).status.code(), Some(1));
    assert_eq!(sbm(&["--help"]).status.code(), Some(0));
}

#[test]
fn non_convergence_exits_with_two() {
    let mut args = vec![
        "solve",
        "--s",
        "0.3",
        "--tunneling",
        "0.1",
        "--alpha",
        "0.05",
        "--modes",
        "10",
        "-M",
        "3",
        "--set",
        "solver.lbfgs_max_iter=2",
        "--set",
        "solver.newton_steps=0",
    ];
    args.extend(FAST);
    let out = sbm(&args);
    assert_eq!(
        out.status.code(),
        Some(2),
        "{}",
        String::from_utf8_lossy(&out.stderr)
    );
    // the record is still written
    let r = json(&String::from_utf8(out.stdout).unwrap());
    assert_eq!(r["result"]["converged"], false);
}

#[test]
fn resolved_config_echo_round_trips() {
    let dir = tempfile::tempdir().unwrap();
    let echo = dir.path().join("resolved.toml");
    let set = format!("output.resolved_config=\"{}\"", echo.display());
    let mut args = vec![
        "solve", "--alpha", "0", "--modes", "2", "-M", "1", "--set", &set,
    ];
    args.extend(FAST);
    ok(&args);
    let text = fs::read_to_string(&echo).unwrap();
    assert!(text.contains("restarts = 2"));
    // feeding the echo back reproduces the same resolved config
    let echo2 = dir.path().join("resolved2.toml");
    let set2 = format!("output.resolved_config=\"{}\"", echo2.display());
    ok(&["solve", "-c", echo.to_str().unwrap(), "--set", &set2]);
    let again = fs::read_to_string(&echo2).unwrap();
    assert_eq!(
        text.replace("resolved.toml", ""),
        again.replace("resolved2.toml", "")
    );
}
