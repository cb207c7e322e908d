//! `sbm`: ground states and transitions of sub-Ohmic spin-boson models.

mod config;

use std::fs;
use std::io::Write;
use std::path::{Path, PathBuf};
use std::process::ExitCode;

use anyhow::{bail, Context, Result};
use clap::{Args, Parser, Subcommand};
use sbm_core::ansatz::{self, Checkpoint};
use sbm_core::model::rotate_observables;
use sbm_core::oracle::{ed_ground_state, ed_ground_state_adaptive, EdResult, FockTruncation};
use sbm_core::solver::{self, write_trace_csv, Method};
use sbm_core::transition::{locate_critical, sweep, write_sweep_csv, SweepRow, TransitionReport};
use sbm_core::GroundStateResult;
use serde::{Deserialize, Serialize};

use config::{parse_override, RunConfig, SCHEMA_VERSION};

#[derive(Parser)]
#[command(
    name = "sbm",
    version,
    about = "Multi-D2 ground states of sub-Ohmic spin-boson models"
)]
struct Cli {
    /// Worker threads (default: all cores).
    #[arg(long, global = true, env = "SBM_WORKERS")]
    workers: Option<usize>,
    #[command(subcommand)]
    command: Command,
}

#[derive(Subcommand)]
enum Command {
    /// Ground state at one parameter point.
    Solve {
        #[command(flatten)]
        common: Common,
        /// Start from a saved state (same model, same multiplicity).
        #[arg(long)]
        from_checkpoint: Option<PathBuf>,
    },
    /// Warm-started sweep over alpha or beta, written as CSV.
    Sweep {
        #[command(flatten)]
        common: Common,
    },
    /// Locate and classify the delocalized-localized transition.
    Critical {
        #[command(flatten)]
        common: Common,
    },
    /// Rotate a config onto its diagonal form, or rotate the observables of a result.
    Rotate {
        #[command(flatten)]
        common: Common,
        #[arg(long, allow_hyphen_values = true)]
        theta: Option<f64>,
        /// Solve record whose `sigma_z`, `sigma_x` are rotated instead of the config.
        #[arg(long)]
        result: Option<PathBuf>,
        /// With `--result`: map rotated-frame values back to the original frame.
        #[arg(long, requires = "result")]
        inverse: bool,
    },
    /// Exact diagonalization of a small model in a truncated Fock basis.
    Oracle {
        #[command(flatten)]
        common: Common,
        #[arg(long)]
        n_max: Option<usize>,
        /// Variational checkpoint to compare with the exact energy.
        #[arg(long)]
        checkpoint: Option<PathBuf>,
    },
}

#[derive(Args)]
struct Common {
    /// TOML run configuration.
    #[arg(short, long)]
    config: Option<PathBuf>,
    /// Override any config field, e.g. `--set solver.restarts=4`.
    #[arg(long = "set", value_name = "KEY=VALUE", value_parser = parse_override)]
    overrides: Vec<(String, toml::Value)>,
    #[arg(long, allow_hyphen_values = true)]
    bias: Option<f64>,
    #[arg(long)]
    tunneling: Option<f64>,
    #[arg(long)]
    s: Option<f64>,
    #[arg(long)]
    alpha: Option<f64>,
    #[arg(long)]
    beta: Option<f64>,
    /// Modes per bath.
    #[arg(long)]
    modes: Option<usize>,
    /// Coherent terms.
    #[arg(short = 'M', long)]
    multiplicity: Option<usize>,
    #[arg(long)]
    restarts: Option<usize>,
    #[arg(long)]
    seed: Option<u64>,
    #[arg(long, value_parser = parse_method)]
    method: Option<Method>,
    /// Main output file (default: stdout).
    #[arg(short, long)]
    output: Option<PathBuf>,
}

fn parse_method(s: &str) -> std::result::Result<Method, String> {
    match s {
        "fixed_point" | "fixed-point" => Ok(Method::FixedPoint),
        "lbfgs" => Ok(Method::Lbfgs),
        _ => Err(format!("unknown method `{s}` (fixed_point, lbfgs)")),
    }
}

impl Common {
    fn load(&self) -> Result<RunConfig> {
        let text = match &self.config {
            Some(p) => {
                fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?
            }
            None => String::new(),
        };
        let mut o = self.overrides.clone();
        let mut put = |k: &str, v: Option<toml::Value>| {
            if let Some(v) = v {
                o.push((k.to_string(), v));
            }
        };
        let float = |v: Option<f64>| v.map(toml::Value::Float);
        let int = |v: Option<usize>| v.map(|x| toml::Value::Integer(x as i64));
        put("model.bias", float(self.bias));
        put("model.tunneling", float(self.tunneling));
        put("bath.s", float(self.s));
        put("bath.alpha", float(self.alpha));
        put("bath_x.beta", float(self.beta));
        put("bath.modes", int(self.modes));
        put("solver.multiplicity", int(self.multiplicity));
        put("solver.restarts", int(self.restarts));
        put(
            "solver.rng_seed",
            self.seed.map(|x| toml::Value::Integer(x as i64)),
        );
        put(
            "solver.method",
            self.method.map(|m| {
                toml::Value::String(
                    if m == Method::Lbfgs {
                        "lbfgs"
                    } else {
                        "fixed_point"
                    }
                    .into(),
                )
            }),
        );
        put(
            "output.path",
            self.output
                .as_ref()
                .map(|p| toml::Value::String(p.display().to_string())),
        );
        let where_ = self
            .config
            .as_ref()
            .map_or("<defaults>".to_string(), |p| p.display().to_string());
        let cfg = RunConfig::load(&text, &o)
            .with_context(|| format!("configuration error in {where_}"))?;
        echo_config(&cfg)?;
        Ok(cfg)
    }
}

fn echo_config(cfg: &RunConfig) -> Result<()> {
    let text = cfg.to_toml();
    match &cfg.output.resolved_config {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            eprintln!("# resolved configuration\n{text}");
            Ok(())
        }
    }
}

/// Raised when a run finished but did not meet its convergence criterion.
#[derive(Debug)]
struct NotConverged(String);

impl std::fmt::Display for NotConverged {
    fn fmt(&self, f: &mut std::fmt::Formatter<'_>) -> std::fmt::Result {
        write!(f, "not converged: {}", self.0)
    }
}

impl std::error::Error for NotConverged {}

fn write_output(path: Option<&Path>, text: &str) -> Result<()> {
    match path {
        Some(p) => fs::write(p, text).with_context(|| format!("cannot write {}", p.display())),
        None => {
            let mut out = std::io::stdout().lock();
            out.write_all(text.as_bytes())?;
            out.flush()?;
            Ok(())
        }
    }
}

fn to_json<T: Serialize>(value: &T) -> String {
    let mut s = serde_json::to_string_pretty(value).expect("record serializes");
    s.push('\n');
    s
}

#[derive(Serialize, Deserialize)]
struct SolveRecord {
    schema_version: u32,
    command: String,
    model_fingerprint: String,
    result: GroundStateResult,
}

#[derive(Serialize, Deserialize)]
struct OracleRecord {
    schema_version: u32,
    command: String,
    model_fingerprint: String,
    exact: EdResult,
    /// Energy of the checkpointed state, when one was given.
    variational_energy: Option<f64>,
    /// `E_var - E_exact`.
    gap: Option<f64>,
}

#[derive(Serialize, Deserialize)]
struct RotatedObservables {
    schema_version: u32,
    command: String,
    theta: f64,
    /// `rotated` when original-frame values were mapped into the rotated frame.
    frame: String,
    sigma_z: f64,
    sigma_x: f64,
    bloch_length: f64,
}

fn cmd_solve(common: &Common, from_checkpoint: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let params = cfg.model()?;
    let seeds = match from_checkpoint {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            vec![Checkpoint::from_json(&text)?.state_for(&params)?]
        }
        None => Vec::new(),
    };
    let mut solver_cfg = cfg.solver.clone();
    if cfg.output.trace.is_some() && solver_cfg.trace_every == 0 {
        solver_cfg.trace_every = 100;
    }
    let result = solver::solve_with_seeds(&params, &solver_cfg, &seeds)?;
    log::info!(
        "E = {:.12}, sigma_z = {:.6}, termination {:?}",
        result.observables.energy,
        result.observables.sigma_z,
        result.termination
    );
    if let Some(p) = &cfg.output.checkpoint {
        fs::write(p, Checkpoint::new(&result.state, &params).to_json())
            .with_context(|| format!("cannot write {}", p.display()))?;
    }
    if let Some(p) = &cfg.output.trace {
        let f = fs::File::create(p).with_context(|| format!("cannot write {}", p.display()))?;
        write_trace_csv(std::io::BufWriter::new(f), &result.trace)?;
    }
    let converged = result.converged;
    let termination = result.termination;
    let record = SolveRecord {
        schema_version: SCHEMA_VERSION,
        command: "solve".into(),
        model_fingerprint: params.fingerprint(),
        result,
    };
    write_output(cfg.output.path.as_deref(), &to_json(&record))?;
    if !converged {
        return Err(NotConverged(format!("solver ended with {termination:?}")).into());
    }
    Ok(())
}

fn unconverged(rows: &[SweepRow]) -> Result<()> {
    let bad: Vec<String> = rows
        .iter()
        .filter(|r| !r.converged)
        .map(|r| r.param.to_string())
        .collect();
    if bad.is_empty() {
        Ok(())
    } else {
        Err(NotConverged(format!(
            "{} sweep point(s) at {}",
            bad.len(),
            bad.join(", ")
        ))
        .into())
    }
}

fn cmd_sweep(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let plan = cfg.sweep_plan()?;
    let rows: Vec<SweepRow> = sweep(&plan)?.iter().map(|p| p.row()).collect();
    let mut buf = Vec::new();
    write_sweep_csv(&mut buf, &rows)?;
    write_output(cfg.output.path.as_deref(), std::str::from_utf8(&buf)?)?;
    unconverged(&rows)
}

fn cmd_critical(common: &Common) -> Result<()> {
    let cfg = common.load()?;
    let plan = cfg.sweep_plan()?;
    let report: TransitionReport =
        locate_critical(&plan, cfg.critical.detector(), cfg.critical.resolution)?;
    for d in &report.diagnostics {
        log::warn!("{d}");
    }
    let mut text = report.to_json();
    text.push('\n');
    write_output(cfg.output.path.as_deref(), &text)?;
    unconverged(&report.sweep)
}

fn cmd_rotate(
    common: &Common,
    theta: Option<f64>,
    result: Option<&Path>,
    inverse: bool,
) -> Result<()> {
    let cfg = common.load()?;
    match result {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            let record: SolveRecord = serde_json::from_str(&text)
                .with_context(|| format!("{} is not a solve record", p.display()))?;
            let Some(angle) = theta.or(cfg.rotate.theta) else {
                bail!("rotating a result needs --theta or [rotate] theta");
            };
            let o = record.result.observables;
            let signed = if inverse { angle } else { -angle };
            let (sz, sx) = rotate_observables(o.sigma_z, o.sigma_x, signed);
            let out = RotatedObservables {
                schema_version: SCHEMA_VERSION,
                command: "rotate".into(),
                theta: angle,
                frame: if inverse { "original" } else { "rotated" }.into(),
                sigma_z: sz,
                sigma_x: sx,
                bloch_length: sz.hypot(sx),
            };
            write_output(cfg.output.path.as_deref(), &to_json(&out))
        }
        None => {
            let (rotated, angle) = cfg.rotated(theta)?;
            log::info!(
                "theta = {angle}: bias {} tunneling {} alpha {}",
                rotated.model.bias,
                rotated.model.tunneling,
                rotated.bath.alpha
            );
            let mut text = format!("# rotated by theta = {angle}\n");
            text.push_str(&rotated.to_toml());
            write_output(cfg.output.path.as_deref(), &text)
        }
    }
}

fn cmd_oracle(common: &Common, n_max: Option<usize>, checkpoint: Option<&Path>) -> Result<()> {
    let cfg = common.load()?;
    let params = cfg.model()?;
    let exact = match n_max.or(cfg.oracle.n_max) {
        Some(n) => ed_ground_state(&params, FockTruncation::new(n, params.num_modes())?)?,
        None => ed_ground_state_adaptive(&params, cfg.oracle.n_start, cfg.oracle.tol)?,
    };
    let checkpoint = checkpoint
        .map(Path::to_path_buf)
        .or(cfg.oracle.checkpoint.clone());
    let variational_energy = match &checkpoint {
        Some(p) => {
            let text =
                fs::read_to_string(p).with_context(|| format!("cannot read {}", p.display()))?;
            let state = Checkpoint::from_json(&text)?.state_for(&params)?;
            Some(ansatz::energy(&state, &params)?)
        }
        None => None,
    };
    let record = OracleRecord {
        schema_version: SCHEMA_VERSION,
        command: "oracle".into(),
        model_fingerprint: params.fingerprint(),
        gap: variational_energy.map(|e| e - exact.energy),
        variational_energy,
        exact,
    };
    write_output(cfg.output.path.as_deref(), &to_json(&record))
}

fn run(cli: Cli) -> Result<()> {
    if let Some(n) = cli.workers {
        if n == 0 {
            bail!("--workers must be >= 1");
        }
        rayon::ThreadPoolBuilder::new()
            .num_threads(n)
            .build_global()
            .context("cannot start the worker pool")?;
    }
    match &cli.command {
        Command::Solve {
            common,
            from_checkpoint,
        } => cmd_solve(common, from_checkpoint.as_deref()),
        Command::Sweep { common } => cmd_sweep(common),
        Command::Critical { common } => cmd_critical(common),
        Command::Rotate {
            common,
            theta,
            result,
            inverse,
        } => cmd_rotate(common, *theta, result.as_deref(), *inverse),
        Command::Oracle {
            common,
            n_max,
            checkpoint,
        } => cmd_oracle(common, *n_max, checkpoint.as_deref()),
    }
}

fn exit_code(err: &anyhow::Error) -> u8 {
    use sbm_core::Error as E;
    if err.downcast_ref::<NotConverged>().is_some() {
        return 2;
    }
    match err.downcast_ref::<E>() {
        Some(E::EigenNotConverged(_) | E::TruncationNotConverged(_) | E::CollapsedState(_)) => 2,
        _ => 1,
    }
}

fn main() -> ExitCode {
    env_logger::Builder::from_env(env_logger::Env::default().default_filter_or("info"))
        .format_timestamp(None)
        .init();
    let cli = match Cli::try_parse() {
        Ok(c) => c,
        Err(e) => {
            let code = if e.use_stderr() { 1 } else { 0 };
            let _ = e.print();
            return ExitCode::from(code);
        }
    };
    match run(cli) {
        Ok(()) => ExitCode::SUCCESS,
        Err(e) => {
            eprintln!("error: {e:#}");
            ExitCode::from(exit_code(&e))
        }
    }
}
