//! Acceptance suite. Prints one `PASS`/`FAIL` line per criterion.
//!
//! `SBM_ACCEPTANCE=1,4` runs a subset. Criterion outcomes do not fail the
//! target; panics (a run that errors out) do.

use std::f64::consts::{FRAC_PI_3, LN_2};
use std::io::Write;
use std::time::{Duration, Instant};

use rand::{Rng, SeedableRng};
use rand_chacha::ChaCha8Rng;
use sbm_core::ansatz::{self, Evaluation};
use sbm_core::bath::BathSpec;
use sbm_core::model::{rotate_observables, single_polaron_alpha_c, Layout};
use sbm_core::oracle::{ed_ground_state_adaptive, fock_expectation, FockTruncation};
use sbm_core::solver::{self, pad_state, update_targets, Method, TargetForm};
use sbm_core::transition::{
    locate_critical, ModelTemplate, SweepPlan, SweptParameter, TransitionOrder, TransitionReport,
};
use sbm_core::{Error, GroundStateResult, ModelParams, SolverConfig, VariationalState};

// criterion 1
const C1_RELATIVE_TOL: f64 = 0.15;
const C1_TIME_LIMIT: Duration = Duration::from_secs(15 * 60);
// criteria 2 and 3
const C2_BETA_C: f64 = 0.020;
const C2_TOL: f64 = 0.002;
const C3_BETA_C: f64 = 0.087;
const C3_TOL: f64 = 0.009;
const TWO_BATH_TIME_LIMIT: Duration = Duration::from_secs(10 * 60);
// criterion 4
const C4_ENERGY_REL_TOL: f64 = 3e-3;
const C4_SPIN_TOL: f64 = 0.02;
const C4_ALPHA_TILDE_C: f64 = 0.059;
const C4_ALPHA_TILDE_TOL: f64 = 0.006;
const C4_ALPHA_C: f64 = 0.01475;
const C4_ALPHA_TOL: f64 = 0.0015;
// criterion 5: printed digits
const C5_TABLE: [(f64, f64); 5] = [
    (0.1, 0.0065),
    (0.2, 0.0168),
    (0.3, 0.0316),
    (0.4, 0.0519),
    (0.5, 0.0784),
];
// criterion 6
const C6_CASES: usize = 100;
const C6_BOUND_SLACK: f64 = 1e-10;
const C6_MONOTONE_SLACK: f64 = 1e-12;
const C6_FOCK_TOL: f64 = 1e-8;
// criterion 7
const C7_GRAD_TOL: f64 = 1e-6;
const C7_FD_STEP: f64 = 1e-6;
const C7_DESCENT_FRACTION: f64 = 0.99;
const C7_DESCENT_TRIALS: usize = 1000;
// criterion 8
const C8_Z2_TOL: f64 = 1e-14;
const C8_BLOCH_TOL: f64 = 1e-14;

struct Suite {
    lines: Vec<String>,
    /// Solutions whose gradient is checked by criterion 7.
    solutions: Vec<(String, ModelParams, GroundStateResult)>,
    /// Every entropy produced, for criterion 8.
    entropies: Vec<f64>,
}

impl Suite {
    fn line(&mut self, id: &str, pass: bool, detail: String) {
        let l = format!("{} {id}: {detail}", if pass { "PASS" } else { "FAIL" });
        let mut out = std::io::stdout().lock();
        writeln!(out, "{l}").unwrap();
        out.flush().unwrap();
        self.lines.push(l);
    }

    fn info(&self, text: String) {
        let mut out = std::io::stdout().lock();
        writeln!(out, "  {text}").unwrap();
        out.flush().unwrap();
    }

    fn keep(&mut self, label: String, params: ModelParams, result: GroundStateResult) {
        self.entropies.push(result.observables.entropy);
        self.solutions.push((label, params, result));
    }

    fn keep_report(&mut self, r: &TransitionReport) {
        self.entropies.extend(r.sweep.iter().map(|row| row.entropy));
    }
}

fn lbfgs(m: usize, restarts: usize, rounds: usize) -> SolverConfig {
    let mut c = SolverConfig::default().with_multiplicity(m);
    c.method = Method::Lbfgs;
    c.restarts = restarts;
    c.anneal.rounds = rounds;
    c
}

fn describe(r: &TransitionReport) -> String {
    let unconverged = r.sweep.iter().filter(|row| !row.converged).count();
    format!(
        "bracket {:?}, order {:?}, {} of {} points unconverged",
        r.bracket,
        r.order,
        unconverged,
        r.sweep.len()
    )
}

fn criterion_1(suite: &mut Suite) {
    let cases = [
        (0.3, 0.0349, vec![0.030, 0.033, 0.036, 0.039], 0.039),
        (0.5, 0.0981, vec![0.085, 0.095, 0.105, 0.115], 0.115),
    ];
    let mut pass = true;
    let mut details = Vec::new();
    let config = lbfgs(6, 3, 2);
    for (s, reference, grid, localized) in cases {
        let t0 = Instant::now();
        let template = ModelTemplate::diagonal_only(BathSpec::new(s, 0.0, 50, 1.5), 0.0, 0.1);
        let plan = SweepPlan::new(
            SweptParameter::Alpha,
            grid,
            template.clone(),
            config.clone(),
        );
        let r = locate_critical(&plan, Default::default(), 5e-4).expect("criterion 1 sweep");
        let elapsed = t0.elapsed();
        suite.keep_report(&r);
        suite.info(format!(
            "s = {s}: {} in {:.0} s",
            describe(&r),
            elapsed.as_secs_f64()
        ));
        let ok = match r.critical_value {
            Some(ac) => {
                details.push(format!("s={s}: alpha_c {ac:.5} vs {reference}"));
                (ac - reference).abs() <= C1_RELATIVE_TOL * reference
            }
            None => {
                details.push(format!("s={s}: no transition found"));
                false
            }
        };
        pass &= ok && elapsed < C1_TIME_LIMIT;
        for a in [grid_first(&plan), localized] {
            let p = template.build(SweptParameter::Alpha, a).unwrap();
            let res = solver::solve(&p, &config).unwrap();
            suite.keep(format!("c1 s={s} alpha={a}"), p, res);
        }
    }
    suite.line("criterion 1", pass, details.join("; "));
}

fn grid_first(plan: &SweepPlan) -> f64 {
    plan.grid[0]
}

fn two_bath(
    suite: &mut Suite,
    id: &str,
    (s, s_bar): (f64, f64),
    grid: Vec<f64>,
    (reference, tol): (f64, f64),
    check_entropy: bool,
) {
    let t0 = Instant::now();
    let template = ModelTemplate::diagonal_only(BathSpec::new(s, 0.02, 20, 2.0), 0.0, 0.0)
        .with_offdiag(Layout::TwoBath, BathSpec::new(s_bar, 0.0, 20, 2.0));
    let config = lbfgs(12, 3, 2);
    let step = grid[1] - grid[0];
    let plan = SweepPlan::new(
        SweptParameter::Beta,
        grid.clone(),
        template.clone(),
        config.clone(),
    );
    let r = locate_critical(&plan, Default::default(), 5e-4).expect("two-bath sweep");
    let elapsed = t0.elapsed();
    suite.keep_report(&r);
    suite.info(format!(
        "{id}: {} in {:.0} s; evidence {:?}",
        describe(&r),
        elapsed.as_secs_f64(),
        r.evidence
    ));
    let mut pass = elapsed < TWO_BATH_TIME_LIMIT && r.order == TransitionOrder::First;
    let mut detail = match r.critical_value {
        Some(bc) => {
            pass &= (bc - reference).abs() <= tol;
            format!(
                "beta_c {bc:.5} vs {reference} +- {tol}, order {:?}",
                r.order
            )
        }
        None => {
            pass = false;
            "no transition found".to_string()
        }
    };
    if check_entropy {
        match (r.evidence, r.critical_value) {
            (Some(ev), Some(bc)) => {
                let near = (ev.entropy_peak - bc).abs() <= step + 1e-12;
                pass &= near;
                detail.push_str(&format!(", entropy peak at {}", ev.entropy_peak));
            }
            _ => pass = false,
        }
    }
    detail.push_str(&format!(", {:.0} s", elapsed.as_secs_f64()));
    suite.line(id, pass, detail);
    for b in [grid[0], grid[grid.len() - 1]] {
        let p = template.build(SweptParameter::Beta, b).unwrap();
        let res = solver::solve(&p, &config).unwrap();
        suite.keep(format!("{id} beta={b}"), p, res);
    }
}

fn criterion_4(suite: &mut Suite) {
    let theta = FRAC_PI_3;
    let bias = 0.1 * 3f64.sqrt();
    let original = ModelTemplate {
        beta_ratio: Some(3.0),
        ..ModelTemplate::diagonal_only(BathSpec::new(0.3, 0.0, 50, 1.5), bias, 0.1)
            .with_offdiag(Layout::SingleBathBoth, BathSpec::new(0.3, 0.0, 50, 1.5))
    };
    let rotated = ModelTemplate::diagonal_only(BathSpec::new(0.3, 0.0, 50, 1.5), 0.0, 0.2);
    let config = lbfgs(14, 3, 2);

    let mut pass = true;
    let mut worst_e: f64 = 0.0;
    let mut worst_s: f64 = 0.0;
    let grid = [0.0130, 0.0140, 0.0148, 0.0156, 0.0170];
    for &a in &grid {
        let p = original.build(SweptParameter::Alpha, a).unwrap();
        // alpha~ = (sqrt(a) cos + sqrt(3a) sin)^2 = 4a at theta = pi/3
        let q = rotated.build(SweptParameter::Alpha, 4.0 * a).unwrap();
        let before = solver::solve(&p, &config).unwrap();
        let after = solver::solve(&q, &config).unwrap();
        let (e0, e1) = (before.observables.energy, after.observables.energy);
        let (z0, x0) = rotate_observables(
            before.observables.sigma_z,
            before.observables.sigma_x,
            -theta,
        );
        let (z1, x1) = (after.observables.sigma_z, after.observables.sigma_x);
        let de = (e0 - e1).abs() / e1.abs();
        let ds = (z0.abs() - z1.abs()).abs().max((x0 - x1).abs());
        suite.info(format!(
            "alpha {a}: E {e0:.9} / {e1:.9} (rel {de:.1e}), rotated (sz, sx) ({z0:.4}, {x0:.4}) / ({z1:.4}, {x1:.4}), converged {} / {}",
            before.converged, after.converged
        ));
        worst_e = worst_e.max(de);
        worst_s = worst_s.max(ds);
        pass &= de <= C4_ENERGY_REL_TOL && ds <= C4_SPIN_TOL;
        suite.keep(format!("c4 single_bath_both alpha={a}"), p, before);
        suite.keep(format!("c4 rotated alpha~={}", 4.0 * a), q, after);
    }
    let mut detail = format!("max rel dE {worst_e:.1e}, max d(sigma) {worst_s:.1e}");

    let plan = SweepPlan::new(
        SweptParameter::Alpha,
        vec![0.052, 0.056, 0.060, 0.064, 0.068],
        rotated,
        config.clone(),
    );
    let r = locate_critical(&plan, Default::default(), 1e-3).expect("rotated sweep");
    suite.keep_report(&r);
    suite.info(format!("rotated model: {}", describe(&r)));
    match r.critical_value {
        Some(ac) => {
            pass &= (ac - C4_ALPHA_TILDE_C).abs() <= C4_ALPHA_TILDE_TOL;
            detail.push_str(&format!(", alpha~_c {ac:.5} vs {C4_ALPHA_TILDE_C}"));
        }
        None => {
            pass = false;
            detail.push_str(", no alpha~_c");
        }
    }

    let mut plan = SweepPlan::new(
        SweptParameter::Alpha,
        vec![0.013, 0.014, 0.015, 0.016, 0.017],
        original,
        config,
    );
    // order parameter measured in the diagonal frame
    plan.frame_angle = -theta;
    let r = locate_critical(&plan, Default::default(), 5e-4).expect("pre-rotation sweep");
    suite.keep_report(&r);
    suite.info(format!("pre-rotation model: {}", describe(&r)));
    match r.critical_value {
        Some(ac) => {
            pass &= (ac - C4_ALPHA_C).abs() <= C4_ALPHA_TOL;
            detail.push_str(&format!(", alpha_c {ac:.5} vs {C4_ALPHA_C}"));
        }
        None => {
            pass = false;
            detail.push_str(", no alpha_c");
        }
    }
    suite.line("criterion 4", pass, detail);
}

fn criterion_5(suite: &mut Suite) {
    let mut pass = true;
    let mut got = Vec::new();
    for (s, printed) in C5_TABLE {
        let v = single_polaron_alpha_c(s, 0.1, 1.0).unwrap();
        let rounded = (v * 1e4).round() / 1e4;
        pass &= (rounded - printed).abs() < 1e-12;
        got.push(format!("{v:.5}"));
    }
    suite.line(
        "criterion 5",
        pass,
        format!("single-polaron alpha_c {}", got.join(", ")),
    );
}

fn random_small_model(rng: &mut ChaCha8Rng) -> ModelParams {
    let n = rng.random_range(1..=2);
    let layout = [Layout::DiagonalOnly, Layout::SingleBathBoth][rng.random_range(0..2)];
    let eta = match layout {
        Layout::DiagonalOnly => vec![0.0; n],
        _ => (0..n).map(|_| rng.random_range(-0.3..0.3)).collect(),
    };
    ModelParams::new(
        rng.random_range(-0.2..0.2),
        rng.random_range(0.0..0.3),
        layout,
        (0..n).map(|_| rng.random_range(0.2..1.5)).collect(),
        (0..n).map(|_| rng.random_range(-0.4..0.4)).collect(),
        eta,
    )
    .unwrap()
}

fn fock_check(state: &VariationalState, p: &ModelParams) -> f64 {
    let eval = Evaluation::new(state, p).unwrap();
    for n_max in [20, 30, 45, 60] {
        let t = FockTruncation::new(n_max, p.num_modes()).unwrap();
        match fock_expectation(state, p, t) {
            Ok((h, n)) => return (h - eval.hamiltonian).abs().max((n - eval.norm).abs()),
            Err(Error::TruncationTail(_)) => continue,
            Err(e) => panic!("{e}"),
        }
    }
    f64::INFINITY
}

/// Previous state plus displaced terms of zero weight, so the seed starts at
/// exactly the previous energy.
fn ladder_seed(state: &VariationalState, m: usize, rng: &mut ChaCha8Rng) -> VariationalState {
    let m0 = state.multiplicity();
    let mut s = pad_state(state, m, 1e-2, rng);
    s.up_amps_mut()[m0..].fill(0.0);
    s.down_amps_mut()[m0..].fill(0.0);
    s
}

fn criterion_6(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(6);
    let mut bound_violations = 0;
    let mut monotone_violations = 0;
    let mut worst_fock: f64 = 0.0;
    let mut worst_gap: f64 = 0.0;
    let config = lbfgs(1, 2, 1);
    for case in 0..C6_CASES {
        let p = random_small_model(&mut rng);
        let exact = ed_ground_state_adaptive(&p, 8, 1e-12).unwrap().energy;
        let mut prev_gap = f64::INFINITY;
        let mut state: Option<VariationalState> = None;
        for m in [1, 2, 4, 8] {
            let cfg = config.clone().with_multiplicity(m).with_seed(case as u64);
            let seeds: Vec<VariationalState> =
                state.iter().map(|s| ladder_seed(s, m, &mut rng)).collect();
            let r = solver::solve_with_seeds(&p, &cfg, &seeds).unwrap();
            let gap = r.observables.energy - exact;
            if gap < -C6_BOUND_SLACK {
                bound_violations += 1;
            }
            if gap > prev_gap + C6_MONOTONE_SLACK {
                monotone_violations += 1;
                suite.info(format!("case {case}: gap at M={m} {gap:.3e} above {prev_gap:.3e}; seed E {:?}, restarts {:?}, {:?}", seeds.first().map(|s| ansatz::energy(s, &p).unwrap() - exact), r.restart_energies.iter().map(|e| e - exact).collect::<Vec<_>>(), r.termination));
            }
            worst_fock = worst_fock.max(fock_check(&r.state, &p));
            suite.entropies.push(r.observables.entropy);
            prev_gap = gap;
            state = Some(r.state);
        }
        worst_gap = worst_gap.max(prev_gap);
    }
    let pass = bound_violations == 0 && monotone_violations == 0 && worst_fock <= C6_FOCK_TOL;
    suite.line(
        "criterion 6",
        pass,
        format!(
            "{C6_CASES} cases: {bound_violations} bound violations, {monotone_violations} ladder increases, max |H,N - Fock| {worst_fock:.1e}, largest M=8 gap {worst_gap:.1e}"
        ),
    );
}

fn fd_gradient(state: &VariationalState, p: &ModelParams) -> f64 {
    let x0 = state.to_vec();
    let mut s = state.clone();
    let mut worst: f64 = 0.0;
    for i in 0..x0.len() {
        let mut x = x0.clone();
        x[i] = x0[i] + C7_FD_STEP;
        s.set_from_slice(&x);
        let ep = ansatz::energy(&s, p).unwrap();
        x[i] = x0[i] - C7_FD_STEP;
        s.set_from_slice(&x);
        let em = ansatz::energy(&s, p).unwrap();
        worst = worst.max(((ep - em) / (2.0 * C7_FD_STEP)).abs());
    }
    worst
}

fn descent_fraction() -> f64 {
    let mut rng = ChaCha8Rng::seed_from_u64(7);
    let mut good = 0;
    for _ in 0..C7_DESCENT_TRIALS {
        let n = 3;
        let p = ModelParams::new(
            rng.random_range(-0.2..0.2),
            rng.random_range(0.0..0.3),
            Layout::DiagonalOnly,
            (0..n).map(|_| rng.random_range(0.2..1.5)).collect(),
            (0..n).map(|_| rng.random_range(-0.4..0.4)).collect(),
            vec![0.0; n],
        )
        .unwrap();
        let m = 2;
        let s = VariationalState::from_parts(
            (0..m).map(|_| rng.random_range(-0.5..0.5)).collect(),
            (0..m).map(|_| rng.random_range(-0.5..0.5)).collect(),
            (0..m * n).map(|_| rng.random_range(-0.5..0.5)).collect(),
            n,
        )
        .unwrap();
        let eval = Evaluation::new(&s, &p).unwrap();
        let t = update_targets(&s, &p, &eval, eval.energy().unwrap(), TargetForm::default());
        let g = solver::energy_gradient(&s, &p, &eval);
        let dot: f64 = t
            .to_vec()
            .iter()
            .zip(s.to_vec())
            .zip(&g)
            .map(|((a, b), g)| (a - b) * -g)
            .sum();
        if !t.singular && dot > 0.0 {
            good += 1;
        }
    }
    good as f64 / C7_DESCENT_TRIALS as f64
}

fn criterion_7(suite: &mut Suite) {
    let mut worst: f64 = 0.0;
    let mut failing = Vec::new();
    let mut checked = 0;
    let mut unconverged = Vec::new();
    for (label, p, r) in &suite.solutions {
        if !r.converged {
            unconverged.push(label.clone());
            continue;
        }
        checked += 1;
        let g = fd_gradient(&r.state, p);
        worst = worst.max(g);
        if g >= C7_GRAD_TOL {
            failing.push(format!("{label} ({g:.1e}, {:?})", r.termination));
        }
    }
    if !unconverged.is_empty() {
        suite.info(format!(
            "unconverged, not checked: {}",
            unconverged.join(", ")
        ));
    }
    if !failing.is_empty() {
        suite.info(format!("gradient above tolerance: {}", failing.join(", ")));
    }
    let frac = descent_fraction();
    let pass = checked > 0 && failing.is_empty() && frac >= C7_DESCENT_FRACTION;
    suite.line(
        "criterion 7",
        pass,
        format!(
            "{checked} converged solutions, {} above {C7_GRAD_TOL:e} (max {worst:.1e}), {} unconverged; descent on {:.1}% of random states",
            failing.len(),
            unconverged.len(),
            100.0 * frac
        ),
    );
}

fn criterion_8(suite: &mut Suite) {
    let mut rng = ChaCha8Rng::seed_from_u64(8);
    let mut worst_z2: f64 = 0.0;
    for _ in 0..200 {
        let n = rng.random_range(1..=50);
        let p = ModelParams::new(
            0.0,
            rng.random_range(0.0..0.3),
            Layout::DiagonalOnly,
            (0..n).map(|_| rng.random_range(0.01..1.0)).collect(),
            (0..n).map(|_| rng.random_range(-0.3..0.3)).collect(),
            vec![0.0; n],
        )
        .unwrap();
        let m = rng.random_range(1..=8);
        let s = VariationalState::from_parts(
            (0..m).map(|_| rng.random_range(-0.5..0.5)).collect(),
            (0..m).map(|_| rng.random_range(-0.5..0.5)).collect(),
            (0..m * n).map(|_| rng.random_range(-1.0..1.0)).collect(),
            n,
        )
        .unwrap();
        let e = ansatz::energy(&s, &p).unwrap();
        let e2 = ansatz::energy(&s.parity_partner(), &p).unwrap();
        worst_z2 = worst_z2.max((e - e2).abs());
    }
    let mut worst_bloch: f64 = 0.0;
    for _ in 0..10_000 {
        let r: f64 = rng.random_range(0.0..1.0);
        let phi: f64 = rng.random_range(0.0..std::f64::consts::TAU);
        let (sz, sx) = (r * phi.cos(), r * phi.sin());
        let (a, b) = rotate_observables(sz, sx, rng.random_range(-3.2..3.2));
        worst_bloch = worst_bloch.max((a.hypot(b) - r).abs());
    }
    let bad_entropy = suite
        .entropies
        .iter()
        .filter(|&&s| !(0.0..=LN_2).contains(&s))
        .count();
    let pass = worst_z2 <= C8_Z2_TOL && worst_bloch <= C8_BLOCH_TOL && bad_entropy == 0;
    suite.line(
        "criterion 8",
        pass,
        format!(
            "Z2 max |dE| {worst_z2:.1e}, Bloch max |dr| {worst_bloch:.1e}, {bad_entropy} of {} entropies outside [0, ln 2]",
            suite.entropies.len()
        ),
    );
}

/// Default fixed point against L-BFGS at one localized point.
fn method_cross_check(suite: &mut Suite) {
    let template = ModelTemplate::diagonal_only(BathSpec::new(0.5, 0.0, 20, 2.0), 0.0, 0.1);
    let p = template.build(SweptParameter::Alpha, 0.12).unwrap();
    let mut fp = SolverConfig::default().with_multiplicity(4);
    fp.restarts = 3;
    fp.anneal.rounds = 2;
    let a = solver::solve(&p, &fp).unwrap();
    let b = solver::solve(&p, &lbfgs(4, 3, 2)).unwrap();
    let d = (a.observables.energy - b.observables.energy).abs();
    suite.info(format!(
        "method cross-check (not a criterion): fixed point E {:.10} ({:?}), L-BFGS E {:.10} ({:?}), |dE| {d:.1e}",
        a.observables.energy, a.termination, b.observables.energy, b.termination
    ));
}

fn main() {
    let selected: Option<Vec<u32>> = std::env::var("SBM_ACCEPTANCE")
        .ok()
        .map(|v| v.split(',').filter_map(|x| x.trim().parse().ok()).collect());
    let run = |i: u32| selected.as_ref().is_none_or(|s| s.contains(&i));
    let mut suite = Suite {
        lines: Vec::new(),
        solutions: Vec::new(),
        entropies: Vec::new(),
    };
    let t0 = Instant::now();
    if run(1) {
        criterion_1(&mut suite);
    }
    if run(2) {
        let grid = (0..7).map(|i| 0.014 + 0.002 * i as f64).collect();
        two_bath(
            &mut suite,
            "criterion 2",
            (0.25, 0.25),
            grid,
            (C2_BETA_C, C2_TOL),
            true,
        );
    }
    if run(3) {
        let grid = (0..7).map(|i| 0.075 + 0.005 * i as f64).collect();
        two_bath(
            &mut suite,
            "criterion 3",
            (0.1, 0.4),
            grid,
            (C3_BETA_C, C3_TOL),
            false,
        );
    }
    if run(4) {
        criterion_4(&mut suite);
    }
    if run(5) {
        criterion_5(&mut suite);
    }
    if run(6) {
        criterion_6(&mut suite);
    }
    if run(7) {
        criterion_7(&mut suite);
    }
    if run(8) {
        criterion_8(&mut suite);
    }
    if selected.is_none() {
        method_cross_check(&mut suite);
    }
    let passed = suite.lines.iter().filter(|l| l.starts_with("PASS")).count();
    println!(
        "acceptance: {passed} of {} criteria pass ({:.0} s)",
        suite.lines.len(),
        t0.elapsed().as_secs_f64()
    );
}
