//! Ground-state search.
//!
//! The default optimizer, [`Method::FixedPoint`], evaluates the stationarity
//! targets `x*` and moves every parameter a fraction `t` of the way,
//! `x' = x + t (x* - x)`, until `max |x* - x| < tol`. The experimental
//! [`Method::Lbfgs`] minimizes `E = H / N` over all parameters with
//! preconditioned L-BFGS followed by a short Newton polish; it is much faster
//! on large baths.
//! Independent restarts and a short annealing schedule (perturb, re-relax, keep
//! strict improvements) guard against metastable states.

pub mod direct;
mod lbfgs;
mod targets;

use std::io::Write;

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use rand_distr::{Distribution, Normal};
use rayon::prelude::*;
use serde::{Deserialize, Serialize};

use crate::ansatz::{observables_from, Evaluation, Observables, VariationalState, COLLAPSE_NORM};
use crate::error::{Error, Result};
use crate::model::ModelParams;

pub use lbfgs::{LbfgsOptions, LbfgsOutcome, LbfgsStatus};
pub use targets::{energy_gradient, update_targets, TargetForm, Targets};

#[derive(Debug, Clone, Copy, PartialEq, Eq, Default, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Method {
    #[default]
    FixedPoint,
    /// Experimental.
    Lbfgs,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct AnnealConfig {
    pub rounds: usize,
    /// Kick width relative to the RMS of each parameter group.
    pub initial_noise_scale: f64,
    pub decay_factor: f64,
    /// L-BFGS only: width of the Gaussian offset, in displacement units, with
    /// which a light coherent term is re-placed next to the heaviest one.
    pub reseed_width: f64,
}

impl Default for AnnealConfig {
    fn default() -> Self {
        AnnealConfig {
            rounds: 5,
            initial_noise_scale: 0.1,
            decay_factor: 0.5,
            reseed_width: 0.3,
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
#[serde(deny_unknown_fields, default)]
pub struct SolverConfig {
    pub multiplicity: usize,
    pub method: Method,
    /// L-BFGS: a run is converged when `max |dE/dx| < grad_tol`.
    pub grad_tol: f64,
    /// L-BFGS iteration cap per run.
    pub lbfgs_max_iter: usize,
    /// Newton steps polishing the final state of every L-BFGS restart; 0
    /// disables.
    pub newton_steps: usize,
    pub relax_factor: f64,
    /// Fixed point: a run is converged when `max |x* - x| < tol`.
    pub tol: f64,
    pub max_iter: usize,
    pub restarts: usize,
    pub anneal: AnnealConfig,
    pub rng_seed: u64,
    pub target_form: TargetForm,
    /// Exact line minimization of the common shift of each mode across all
    /// coherent terms, interleaved with the fixed-point iteration.
    pub collective_shift: bool,
    /// Iterations between renormalizations to `N = 1`.
    pub renormalize_every: usize,
    /// Stagnation window: stop when `E` improves by less than `stagnation_tol`
    /// over this many iterations.
    pub stagnation_window: usize,
    pub stagnation_tol: f64,
    /// Record `(iteration, E, residual)` every this many iterations; 0 disables.
    pub trace_every: usize,
}

impl Default for SolverConfig {
    fn default() -> Self {
        SolverConfig {
            multiplicity: 6,
            method: Method::default(),
            grad_tol: 1e-6,
            lbfgs_max_iter: 20_000,
            newton_steps: 30,
            relax_factor: 0.1,
            tol: 1e-11,
            max_iter: 1_000_000,
            restarts: 10,
            anneal: AnnealConfig::default(),
            rng_seed: 0,
            target_form: TargetForm::default(),
            collective_shift: true,
            renormalize_every: 100,
            stagnation_window: 10_000,
            stagnation_tol: 1e-14,
            trace_every: 0,
        }
    }
}

impl SolverConfig {
    pub fn with_multiplicity(mut self, m: usize) -> Self {
        self.multiplicity = m;
        self
    }

    pub fn with_seed(mut self, seed: u64) -> Self {
        self.rng_seed = seed;
        self
    }

    pub fn validate(&self) -> Result<()> {
        let bad = |msg: String| Err(Error::InvalidConfig(msg));
        if self.multiplicity == 0 {
            return bad("multiplicity must be >= 1".into());
        }
        if !(self.relax_factor > 0.0 && self.relax_factor <= 1.0) {
            return bad(format!("relax_factor {} outside (0, 1]", self.relax_factor));
        }
        if !(self.tol > 0.0 && self.tol < 1e-6) {
            return bad(format!("tol {} must lie in (0, 1e-6)", self.tol));
        }
        if !(self.grad_tol > 0.0 && self.grad_tol < 1e-3) {
            return bad(format!("grad_tol {} must lie in (0, 1e-3)", self.grad_tol));
        }
        if self.max_iter == 0
            || self.lbfgs_max_iter == 0
            || self.restarts == 0
            || self.renormalize_every == 0
        {
            return bad("iteration caps, restarts and renormalize_every must be positive".into());
        }
        if self.stagnation_window == 0 || !(self.stagnation_tol > 0.0) {
            return bad("stagnation window and tolerance must be positive".into());
        }
        let a = &self.anneal;
        if !(a.initial_noise_scale > 0.0)
            || !(a.decay_factor > 0.0 && a.decay_factor <= 1.0)
            || !(a.reseed_width > 0.0)
        {
            return bad("anneal widths must be > 0 and decay in (0, 1]".into());
        }
        Ok(())
    }
}

/// One row of a convergence trace.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct TracePoint {
    pub restart: usize,
    pub iteration: usize,
    pub energy: f64,
    pub residual: f64,
}

pub fn write_trace_csv<W: Write>(mut out: W, trace: &[TracePoint]) -> std::io::Result<()> {
    writeln!(out, "restart,iteration,energy,residual")?;
    for p in trace {
        writeln!(
            out,
            "{},{},{:e},{:e}",
            p.restart, p.iteration, p.energy, p.residual
        )?;
    }
    Ok(())
}

/// How a single relaxation run ended.
#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Termination {
    /// The convergence criterion of the method was met.
    Converged,
    /// Energy stopped improving before the convergence criterion was met.
    Stagnated,
    MaxIterations,
    /// Norm collapsed or parameters became non-finite.
    Failed,
}

impl Termination {
    pub fn is_converged(self) -> bool {
        matches!(self, Termination::Converged | Termination::Stagnated)
    }
}

#[derive(Debug, Clone)]
pub struct RelaxOutcome {
    pub state: VariationalState,
    pub energy: f64,
    /// `max |dE/dx|` for L-BFGS, `max |x* - x|` for the fixed point.
    pub residual: f64,
    pub iterations: usize,
    pub termination: Termination,
    pub trace: Vec<TracePoint>,
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct GroundStateResult {
    pub state: VariationalState,
    pub observables: Observables,
    pub converged: bool,
    pub termination: Termination,
    pub iterations: usize,
    pub residual: f64,
    /// Final energy of every restart, in restart order.
    pub restart_energies: Vec<f64>,
    /// `<sigma_z>` of every restart, in restart order.
    pub restart_sigma_z: Vec<f64>,
    #[serde(skip)]
    pub trace: Vec<TracePoint>,
}

/// `x' = x + t (x* - x)` elementwise.
pub fn relax_step(
    state: &VariationalState,
    targets: &Targets,
    relax_factor: f64,
) -> Result<VariationalState> {
    let mut x = state.to_vec();
    let xt = targets.to_vec();
    if xt.len() != x.len() {
        return Err(Error::InvalidState(
            "target dimensions differ from state".into(),
        ));
    }
    for (xi, ti) in x.iter_mut().zip(&xt) {
        if !ti.is_finite() {
            return Err(Error::InvalidState("non-finite update target".into()));
        }
        *xi += relax_factor * (ti - *xi);
    }
    let mut next = state.clone();
    next.set_from_slice(&x);
    Ok(next)
}

fn rms(v: &[f64]) -> f64 {
    if v.is_empty() {
        return 0.0;
    }
    (v.iter().map(|x| x * x).sum::<f64>() / v.len() as f64).sqrt()
}

/// Replacement for an iteration whose fixed-point form is undefined: a short
/// gradient step of length `1e-3 * rms(x) / rms(grad)` per unit gradient.
fn gradient_step(
    state: &VariationalState,
    params: &ModelParams,
    eval: &Evaluation,
) -> VariationalState {
    let grad = energy_gradient(state, params, eval);
    let mut x = state.to_vec();
    let g_rms = rms(&grad);
    if g_rms == 0.0 {
        return state.clone();
    }
    let step = 1e-3 * rms(&x).max(1e-3) / g_rms;
    for (xi, gi) in x.iter_mut().zip(&grad) {
        *xi -= step * gi;
    }
    let mut next = state.clone();
    next.set_from_slice(&x);
    next
}

/// Exact minimization of `E` along a common shift `f_mk -> f_mk + c` of mode
/// `k` in every coherent term. Debye-Waller factors are unchanged by such a
/// shift and `H` is quadratic in `c`, so the optimum is closed-form:
/// `c = -dH/dc / (2 w_k N)`.
fn collective_shift(state: &mut VariationalState, params: &ModelParams, eval: &Evaluation) {
    let mm = state.multiplicity();
    let nk = state.num_modes();
    let up = state.up_amps().to_vec();
    let dn = state.down_amps().to_vec();
    // weights on f_mk + f_nk, on the diagonal coupling and on the off-diagonal coupling
    let mut sum_nu = vec![0.0; mm];
    let mut pol = 0.0;
    let mut coh = 0.0;
    for m in 0..mm {
        for n in 0..mm {
            let f = eval.overlap[eval.idx(m, n)];
            sum_nu[m] += f * (up[m] * up[n] + dn[m] * dn[n]);
            pol += f * (up[m] * up[n] - dn[m] * dn[n]);
            coh += f * (up[m] * dn[n] + dn[m] * up[n]);
        }
    }
    for k in 0..nk {
        let w = params.frequencies[k];
        // dH/dc at c = 0: sum_mn F [nu w (f_m + f_n) + p l + c h] = 2 w sum_m f_m S_m + p l + c h
        let mut linear = params.diag_amplitudes[k] * pol + params.offdiag_amplitudes[k] * coh;
        for m in 0..mm {
            linear += 2.0 * w * state.displacement(m, k) * sum_nu[m];
        }
        let shift = -linear / (2.0 * w * eval.norm);
        if shift.is_finite() {
            for m in 0..mm {
                state.row_mut(m)[k] += shift;
            }
        }
    }
}

/// Fixed-point iterates get their amplitudes from the exact amplitude solve
/// when the norm changes by more than this factor in one step, or when a
/// single squared amplitude exceeds the norm by its inverse.
const AMPLITUDE_GUARD: f64 = 1e-3;

fn renormalize(state: &mut VariationalState, norm: f64) {
    if norm > 0.0 && norm.is_finite() {
        state.scale_amplitudes(1.0 / norm.sqrt());
    }
}

fn max_abs_diff(a: &[f64], b: &[f64]) -> f64 {
    a.iter()
        .zip(b)
        .map(|(x, y)| (x - y).abs())
        .fold(0.0, f64::max)
}

/// Evaluate, rescale to `N = 1`, and re-evaluate.
fn normalized(
    mut state: VariationalState,
    params: &ModelParams,
) -> Result<(VariationalState, Evaluation)> {
    let eval = Evaluation::new(&state, params)?;
    if !(eval.norm > COLLAPSE_NORM) {
        return Err(Error::CollapsedState(eval.norm));
    }
    renormalize(&mut state, eval.norm);
    let eval = Evaluation::new(&state, params)?;
    Ok((state, eval))
}

/// Locally optimize `start` with the configured method.
pub fn relax(
    start: VariationalState,
    params: &ModelParams,
    config: &SolverConfig,
    restart: usize,
) -> Result<RelaxOutcome> {
    match config.method {
        Method::Lbfgs => relax_lbfgs(start, params, config, restart),
        Method::FixedPoint => relax_fixed_point(start, params, config, restart),
    }
}

fn relax_lbfgs(
    start: VariationalState,
    params: &ModelParams,
    config: &SolverConfig,
    restart: usize,
) -> Result<RelaxOutcome> {
    let opts = LbfgsOptions {
        max_iter: config.lbfgs_max_iter,
        grad_tol: 1e-2 * config.grad_tol,
        ..LbfgsOptions::default()
    };
    let mut trace = Vec::new();
    let every = config.trace_every;
    let (state, outcome) = direct::minimize_joint(&start, params, &opts, |it, e, g| {
        if every > 0 && it % every == 0 {
            trace.push(TracePoint {
                restart,
                iteration: it,
                energy: e,
                residual: g,
            });
        }
    })?;
    let mut relaxed = lbfgs_outcome(state, params, config, outcome.iterations, outcome.status)?;
    if every > 0 {
        trace.push(TracePoint {
            restart,
            iteration: outcome.iterations,
            energy: relaxed.energy,
            residual: relaxed.residual,
        });
    }
    relaxed.trace = trace;
    Ok(relaxed)
}

fn lbfgs_outcome(
    state: VariationalState,
    params: &ModelParams,
    config: &SolverConfig,
    iterations: usize,
    status: LbfgsStatus,
) -> Result<RelaxOutcome> {
    let (mut state, mut eval) = normalized(state, params)?;
    let mut energy = eval.energy()?;
    // the exact amplitude solve removes leftover amplitude gradient
    let mut trial = state.clone();
    if direct::optimal_amplitudes(&mut trial, params).is_ok() {
        if let Ok((s, ev)) = normalized(trial, params) {
            let e = ev.energy()?;
            if e <= energy {
                (state, eval, energy) = (s, ev, e);
            }
        }
    }
    let residual = energy_gradient(&state, params, &eval)
        .iter()
        .fold(0.0, |m: f64, g| m.max(g.abs()));
    let termination = if residual < config.grad_tol {
        Termination::Converged
    } else if status == LbfgsStatus::MaxIterations {
        Termination::MaxIterations
    } else {
        Termination::Stagnated
    };
    Ok(RelaxOutcome {
        state,
        energy,
        residual,
        iterations,
        termination,
        trace: Vec::new(),
    })
}

/// Newton polish of a finished L-BFGS run; kept only if `E` does not rise.
fn polish(best: RelaxOutcome, params: &ModelParams, config: &SolverConfig) -> Result<RelaxOutcome> {
    if config.newton_steps == 0 || best.termination.is_converged() {
        return Ok(best);
    }
    let mut state = best.state.clone();
    let out = direct::newton_polish(
        &mut state,
        params,
        1e-2 * config.grad_tol,
        config.newton_steps,
    )?;
    let status = if out.steps < config.newton_steps {
        LbfgsStatus::Stalled
    } else {
        LbfgsStatus::MaxIterations
    };
    let mut polished = lbfgs_outcome(state, params, config, best.iterations + out.steps, status)?;
    if polished.energy > best.energy {
        return Ok(best);
    }
    polished.trace = best.trace;
    Ok(polished)
}

/// Iterate update/relax from `start` until convergence, stagnation, or the
/// iteration cap.
fn relax_fixed_point(
    start: VariationalState,
    params: &ModelParams,
    config: &SolverConfig,
    restart: usize,
) -> Result<RelaxOutcome> {
    let (mut state, mut eval) = normalized(start, params)?;
    let mut trace = Vec::new();
    let mut energy = eval.energy()?;
    let mut residual = f64::INFINITY;
    let mut window_energy = energy;
    let mut termination = Termination::MaxIterations;
    let mut iterations = 0;

    for iter in 1..=config.max_iter {
        iterations = iter;
        let targets = update_targets(&state, params, &eval, energy, config.target_form);
        let x = state.to_vec();
        residual = max_abs_diff(&targets.to_vec(), &x);
        if config.trace_every > 0 && (iter - 1) % config.trace_every == 0 {
            trace.push(TracePoint {
                restart,
                iteration: iter - 1,
                energy,
                residual,
            });
        }
        if !targets.singular && residual < config.tol {
            termination = Termination::Converged;
            break;
        }
        let mut next = if targets.singular {
            gradient_step(&state, params, &eval)
        } else {
            relax_step(&state, &targets, config.relax_factor)?
        };
        // near-duplicate terms can make the amplitude update cancel out or
        // blow up; solve the amplitude equations exactly instead
        let (ratio, spread) = Evaluation::new(&next, params).map_or((0.0, 0.0), |e| {
            let big = next
                .up_amps()
                .iter()
                .chain(next.down_amps())
                .fold(0.0, |m: f64, a| m.max(a * a));
            (e.norm / eval.norm, big / e.norm)
        });
        if !(ratio > AMPLITUDE_GUARD
            && ratio < 1.0 / AMPLITUDE_GUARD
            && spread < 1.0 / AMPLITUDE_GUARD)
        {
            direct::optimal_amplitudes(&mut next, params)?;
        }
        if config.collective_shift {
            let e = Evaluation::new(&next, params)?;
            collective_shift(&mut next, params, &e);
        }
        if !next.is_finite() {
            termination = Termination::Failed;
            break;
        }
        eval = Evaluation::new(&next, params)?;
        if !(eval.norm > COLLAPSE_NORM) {
            termination = Termination::Failed;
            break;
        }
        state = next;
        if iter % config.renormalize_every == 0 {
            renormalize(&mut state, eval.norm);
            eval = Evaluation::new(&state, params)?;
        }
        energy = eval.hamiltonian / eval.norm;
        if iter % config.stagnation_window == 0 {
            if window_energy - energy < config.stagnation_tol {
                termination = Termination::Stagnated;
                break;
            }
            window_energy = energy;
        }
    }
    let (state, eval) = normalized(state, params)?;
    let energy = eval.energy()?;
    if config.trace_every > 0 {
        trace.push(TracePoint {
            restart,
            iteration: iterations,
            energy,
            residual,
        });
    }
    Ok(RelaxOutcome {
        state,
        energy,
        residual,
        iterations,
        termination,
        trace,
    })
}

/// Polaron displacement `-(A^2 - B^2) l_k + 2 A B h_k) / (2 (A^2 + B^2) w_k)` of a
/// single coherent term.
fn polaron_row(params: &ModelParams, up: f64, dn: f64) -> Vec<f64> {
    let nu = up * up + dn * dn;
    (0..params.num_modes())
        .map(|k| {
            -((up * up - dn * dn) * params.diag_amplitudes[k]
                + 2.0 * up * dn * params.offdiag_amplitudes[k])
                / (2.0 * nu * params.frequencies[k])
        })
        .collect()
}

/// Initial states. Restart 0 is localized in the up state, restart 1
/// delocalized in the `sigma_x = 1` state. Later restarts draw
/// `A, B ~ U(-0.5, 0.5)` per term and displace it by a random fraction of the
/// polaron displacement of its own spin direction, plus `U(-0.1, 0.1) g_k / w_k`
/// where `g_k` is the larger coupling amplitude of mode `k`.
pub fn initial_state(
    params: &ModelParams,
    multiplicity: usize,
    restart: usize,
    rng: &mut ChaCha8Rng,
) -> VariationalState {
    let nk = params.num_modes();
    let mut state = VariationalState::zeros(multiplicity, nk);
    let scale: Vec<f64> = (0..nk)
        .map(|k| {
            params.diag_amplitudes[k]
                .abs()
                .max(params.offdiag_amplitudes[k].abs())
                / params.frequencies[k]
        })
        .collect();
    match restart {
        0 | 1 => {
            let (a0, b0) = if restart == 0 { (1.0, 0.0) } else { (1.0, 1.0) };
            let base = polaron_row(params, a0, b0);
            for m in 0..multiplicity {
                let weight = if m == 0 { 1.0 } else { 0.1 };
                state.up_amps_mut()[m] = weight * a0 + rng.random_range(-0.01..0.01);
                state.down_amps_mut()[m] = weight * b0 + rng.random_range(-0.01..0.01);
                let spread = if m == 0 { 0.0 } else { 0.2 };
                for k in 0..nk {
                    state.row_mut(m)[k] = base[k] * (1.0 + rng.random_range(-spread..=spread))
                        + rng.random_range(-0.01..=0.01) * scale[k];
                }
            }
        }
        _ => {
            for m in 0..multiplicity {
                let (a, b) = (rng.random_range(-0.5..0.5), rng.random_range(-0.5..0.5));
                state.up_amps_mut()[m] = a;
                state.down_amps_mut()[m] = b;
                let base = polaron_row(params, a, b);
                let depth = rng.random_range(0.5..1.0);
                for k in 0..nk {
                    state.row_mut(m)[k] = depth * base[k] + rng.random_range(-0.1..0.1) * scale[k];
                }
            }
        }
    }
    state
}

/// Re-randomize coherent terms that duplicate an earlier term
/// (`F_mn > 1 - 1e-12`); returns whether any term changed.
fn split_duplicates(
    state: &mut VariationalState,
    params: &ModelParams,
    rng: &mut ChaCha8Rng,
) -> bool {
    let mm = state.multiplicity();
    let nk = state.num_modes();
    let mut changed = false;
    for m in 1..mm {
        for n in 0..m {
            if crate::ansatz::debye_waller(state, m, n) > 1.0 - 1e-12 {
                let amp = 0.1 * (state.up_amps()[n].abs() + state.down_amps()[n].abs()).max(1e-3);
                state.up_amps_mut()[m] = rng.random_range(-amp..amp);
                state.down_amps_mut()[m] = rng.random_range(-amp..amp);
                for k in 0..nk {
                    let s = params.diag_amplitudes[k]
                        .abs()
                        .max(params.offdiag_amplitudes[k].abs())
                        / params.frequencies[k];
                    let f = state.displacement(n, k) + rng.random_range(-0.1..0.1) * s.max(1e-3);
                    state.row_mut(m)[k] = f;
                }
                changed = true;
                break;
            }
        }
    }
    changed
}

/// Gaussian kick of every parameter group with width `scale * rms(group)`.
fn kick(state: &VariationalState, scale: f64, rng: &mut ChaCha8Rng) -> VariationalState {
    let mut next = state.clone();
    let amp_rms = rms(&[state.up_amps(), state.down_amps()].concat()).max(1e-6);
    let disp_rms = rms(state.displacements()).max(1e-6);
    let na = Normal::new(0.0, scale * amp_rms).expect("positive width");
    let nf = Normal::new(0.0, scale * disp_rms).expect("positive width");
    for a in next.up_amps_mut().iter_mut() {
        *a += na.sample(rng);
    }
    for b in next.down_amps_mut().iter_mut() {
        *b += na.sample(rng);
    }
    for f in next.displacements_mut().iter_mut() {
        *f += nf.sample(rng);
    }
    next
}

/// Deterministic per-restart RNG, independent of scheduling.
const SEED_STREAM_OFFSET: usize = 1 << 32;

fn restart_rng(seed: u64, restart: usize) -> ChaCha8Rng {
    let mut rng = ChaCha8Rng::seed_from_u64(seed);
    rng.set_stream(restart as u64 + 1);
    rng
}

/// Re-place every dead coherent term (weight below `1e-8` of the heaviest),
/// or the lightest term if none is dead, at the heaviest term's displacements
/// plus Gaussian noise of width `width`, with a small amplitude.
fn reseed(state: &VariationalState, width: f64, rng: &mut ChaCha8Rng) -> VariationalState {
    let mut next = state.clone();
    let mm = state.multiplicity();
    if mm < 2 {
        return next;
    }
    let weights: Vec<f64> = (0..mm)
        .map(|m| state.up_amps()[m].powi(2) + state.down_amps()[m].powi(2))
        .collect();
    let mut order: Vec<usize> = (0..mm).collect();
    order.sort_by(|&i, &j| weights[j].total_cmp(&weights[i]));
    let heavy = order[0];
    let mut targets: Vec<usize> = order[1..]
        .iter()
        .copied()
        .filter(|&m| weights[m] < 1e-8 * weights[heavy])
        .collect();
    if targets.is_empty() {
        targets.push(order[mm - 1]);
    }
    let noise = Normal::new(0.0, width).expect("positive width");
    let amp = 0.1 * weights[heavy].sqrt();
    for m in targets {
        next.up_amps_mut()[m] = amp * rng.random_range(-1.0..1.0);
        next.down_amps_mut()[m] = amp * rng.random_range(-1.0..1.0);
        for k in 0..state.num_modes() {
            next.row_mut(m)[k] = state.displacement(heavy, k) + noise.sample(rng);
        }
    }
    next
}

/// Relax one start, then anneal. Accepted annealing moves strictly lower `E`.
pub fn run_restart(
    start: VariationalState,
    params: &ModelParams,
    config: &SolverConfig,
    restart: usize,
    rng: &mut ChaCha8Rng,
) -> Result<RelaxOutcome> {
    let mut start = start;
    split_duplicates(&mut start, params, rng);
    let mut best = relax(start, params, config, restart)?;
    let mut scale = config.anneal.initial_noise_scale;
    for _ in 0..config.anneal.rounds {
        let trial_start = match config.method {
            Method::Lbfgs => reseed(&best.state, config.anneal.reseed_width, rng),
            Method::FixedPoint => kick(&best.state, scale, rng),
        };
        scale *= config.anneal.decay_factor;
        let trial = match relax(trial_start, params, config, restart) {
            Ok(t) => t,
            Err(_) => continue,
        };
        let accept = trial.energy < best.energy - 1e-13 * best.energy.abs();
        let iterations = best.iterations + trial.iterations;
        let mut trace = std::mem::take(&mut best.trace);
        trace.extend(trial.trace.iter().copied());
        if accept {
            best = trial;
        }
        best.iterations = iterations;
        best.trace = trace;
    }
    match config.method {
        Method::Lbfgs => polish(best, params, config),
        Method::FixedPoint => Ok(best),
    }
}

fn assemble(
    params: &ModelParams,
    outcomes: Vec<Result<RelaxOutcome>>,
) -> Result<GroundStateResult> {
    let mut restart_energies = Vec::with_capacity(outcomes.len());
    let mut restart_sigma_z = Vec::with_capacity(outcomes.len());
    let mut best: Option<(usize, RelaxOutcome, Observables)> = None;
    let mut trace = Vec::new();
    let mut iterations = 0;
    let mut last_err = None;
    for (i, outcome) in outcomes.into_iter().enumerate() {
        let outcome = match outcome {
            Ok(o) => o,
            Err(e) => {
                restart_energies.push(f64::NAN);
                restart_sigma_z.push(f64::NAN);
                last_err = Some(e);
                continue;
            }
        };
        let eval = Evaluation::new(&outcome.state, params)?;
        let obs = observables_from(&outcome.state, &eval)?;
        restart_energies.push(outcome.energy);
        restart_sigma_z.push(obs.sigma_z);
        iterations += outcome.iterations;
        trace.extend(outcome.trace.iter().copied());
        // lowest energy wins; ties keep the earlier restart
        let better = match &best {
            None => true,
            Some((_, b, _)) => outcome.energy < b.energy,
        };
        if better {
            best = Some((i, outcome, obs));
        }
    }
    let Some((_, outcome, observables)) = best else {
        return Err(last_err.unwrap_or(Error::InvalidConfig("no restarts".into())));
    };
    Ok(GroundStateResult {
        converged: outcome.termination.is_converged(),
        termination: outcome.termination,
        state: outcome.state,
        observables,
        iterations,
        residual: outcome.residual,
        restart_energies,
        restart_sigma_z,
        trace,
    })
}

/// Lowest-energy state over `config.restarts` independent restarts.
pub fn solve(params: &ModelParams, config: &SolverConfig) -> Result<GroundStateResult> {
    solve_with_seeds(params, config, &[])
}

/// Like [`solve`], with extra starting states (warm starts) run before the
/// regular restarts. The regular restarts are exactly those of [`solve`], so
/// seeding never raises the returned energy. Seeds of a different
/// multiplicity are rejected.
pub fn solve_with_seeds(
    params: &ModelParams,
    config: &SolverConfig,
    seeds: &[VariationalState],
) -> Result<GroundStateResult> {
    params.validate()?;
    config.validate()?;
    for s in seeds {
        s.check_model(params)?;
        if s.multiplicity() != config.multiplicity {
            return Err(Error::InvalidConfig(format!(
                "seed multiplicity {} differs from configured {}",
                s.multiplicity(),
                config.multiplicity
            )));
        }
    }
    let total = seeds.len() + config.restarts;
    let outcomes: Vec<Result<RelaxOutcome>> = (0..total)
        .into_par_iter()
        .map(|i| {
            // fresh restarts draw the same streams with or without seeds
            if i < seeds.len() {
                let mut rng = restart_rng(config.rng_seed, SEED_STREAM_OFFSET + i);
                run_restart(seeds[i].clone(), params, config, i, &mut rng)
            } else {
                let r = i - seeds.len();
                let mut rng = restart_rng(config.rng_seed, r);
                let start = initial_state(params, config.multiplicity, r, &mut rng);
                run_restart(start, params, config, i, &mut rng)
            }
        })
        .collect();
    assemble(params, outcomes)
}

/// Grow a converged state to a larger multiplicity by appending near-copies
/// of its dominant terms with tiny amplitude, so the padded state starts at
/// essentially the same energy.
pub fn pad_state(
    state: &VariationalState,
    multiplicity: usize,
    noise: f64,
    rng: &mut ChaCha8Rng,
) -> VariationalState {
    let m0 = state.multiplicity();
    assert!(multiplicity >= m0, "padding cannot shrink the state");
    let nk = state.num_modes();
    let mut order: Vec<usize> = (0..m0).collect();
    let weight = |m: usize| state.up_amps()[m].powi(2) + state.down_amps()[m].powi(2);
    order.sort_by(|&i, &j| weight(j).total_cmp(&weight(i)));
    let mut up = state.up_amps().to_vec();
    let mut dn = state.down_amps().to_vec();
    let mut f = state.displacements().to_vec();
    for j in 0..multiplicity - m0 {
        let src = order[j % m0];
        up.push(noise * rng.random_range(-1.0..1.0));
        dn.push(noise * rng.random_range(-1.0..1.0));
        for k in 0..nk {
            let base = state.displacement(src, k);
            f.push(base + noise * rng.random_range(-1.0..1.0) * base.abs().max(1.0));
        }
    }
    VariationalState::from_parts(up, dn, f, nk).expect("padded state is consistent")
}
