//! Coupling sweeps, critical-point location by bisection, and transition-order
//! classification.

use std::io::{Read, Write};

use rand::SeedableRng;
use rand_chacha::ChaCha8Rng;
use serde::{Deserialize, Serialize};

use crate::ansatz::{observables, VariationalState};
use crate::bath::{discretize, BathSpec};
use crate::error::{Error, Result};
use crate::model::{rotate_observables, Layout, ModelParams};
use crate::solver::{self, initial_state, run_restart, GroundStateResult, SolverConfig};

/// Default threshold on `|sigma_z|` marking the localized phase.
pub const ORDER_THRESHOLD: f64 = 1e-2;
/// Default bisection resolution (absolute, in the swept parameter).
pub const DEFAULT_RESOLUTION: f64 = 1e-4;
/// Order-parameter jump above which a transition counts as discontinuous.
pub const FIRST_ORDER_JUMP: f64 = 0.1;
/// A jump "persists" under refinement if the fine bracket keeps this fraction
/// of the jump seen across the bracket twice as wide.
pub const PERSISTENCE_RATIO: f64 = 0.75;

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum SweptParameter {
    /// Coupling of the `sigma_z` bath.
    Alpha,
    /// Coupling of the `sigma_x` bath.
    Beta,
}

/// Everything needed to build the model at one value of the swept coupling.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct ModelTemplate {
    pub layout: Layout,
    pub bias: f64,
    pub tunneling: f64,
    /// Bath coupled through `sigma_z` (exponent `s`, coupling `alpha`).
    pub diag_bath: BathSpec,
    /// Bath coupled through `sigma_x` (exponent `s_bar`, coupling `beta`);
    /// required unless the layout is diagonal-only.
    pub offdiag_bath: Option<BathSpec>,
    /// When sweeping `alpha`, hold `beta = ratio * alpha`.
    pub beta_ratio: Option<f64>,
}

impl ModelTemplate {
    pub fn diagonal_only(bath: BathSpec, bias: f64, tunneling: f64) -> Self {
        ModelTemplate {
            layout: Layout::DiagonalOnly,
            bias,
            tunneling,
            diag_bath: bath,
            offdiag_bath: None,
            beta_ratio: None,
        }
    }

    pub fn with_offdiag(mut self, layout: Layout, bath: BathSpec) -> Self {
        self.layout = layout;
        self.offdiag_bath = Some(bath);
        self
    }

    pub fn build(&self, parameter: SweptParameter, value: f64) -> Result<ModelParams> {
        let mut z = self.diag_bath;
        let mut x = self.offdiag_bath;
        match parameter {
            SweptParameter::Alpha => {
                z.coupling = value;
                if let (Some(r), Some(b)) = (self.beta_ratio, x.as_mut()) {
                    b.coupling = r * value;
                }
            }
            SweptParameter::Beta => match x.as_mut() {
                Some(b) => b.coupling = value,
                None => {
                    return Err(Error::InvalidSweep(
                        "sweeping beta needs a sigma_x bath".into(),
                    ))
                }
            },
        }
        let bz = discretize(&z)?;
        match self.layout {
            Layout::DiagonalOnly => ModelParams::diagonal_only(&bz, self.bias, self.tunneling),
            layout => {
                let spec = x.ok_or_else(|| {
                    Error::InvalidSweep(format!("layout {layout:?} needs a sigma_x bath"))
                })?;
                let bx = discretize(&spec)?;
                if layout == Layout::TwoBath {
                    ModelParams::two_bath(&bz, &bx, self.bias, self.tunneling)
                } else {
                    ModelParams::single_bath_both(&bz, &bx, self.bias, self.tunneling)
                }
            }
        }
    }
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct SweepPlan {
    pub parameter: SweptParameter,
    pub grid: Vec<f64>,
    pub template: ModelTemplate,
    pub solver: SolverConfig,
    /// Seed each point with the previous point's solution (fresh restarts are
    /// always added).
    pub warm_start: bool,
    /// Also relax the localized and delocalized seeds (and the previous
    /// point's branch solutions) without annealing, and keep the lowest
    /// solution of each character.
    pub track_branches: bool,
    /// `|sigma_z|` separating localized from delocalized branch solutions.
    pub branch_threshold: f64,
    /// Observables are rotated by this angle before detection,
    /// `(sz, sx) -> rotate_observables(sz, sx, frame_angle)`.
    pub frame_angle: f64,
}

impl SweepPlan {
    pub fn new(
        parameter: SweptParameter,
        grid: Vec<f64>,
        template: ModelTemplate,
        solver: SolverConfig,
    ) -> Self {
        SweepPlan {
            parameter,
            grid,
            template,
            solver,
            warm_start: true,
            track_branches: false,
            branch_threshold: ORDER_THRESHOLD,
            frame_angle: 0.0,
        }
    }

    pub fn validate(&self) -> Result<()> {
        if self.grid.len() < 3 {
            return Err(Error::InvalidSweep(format!(
                "grid has {} points, need >= 3",
                self.grid.len()
            )));
        }
        if self.grid.iter().any(|x| !x.is_finite() || *x < 0.0) {
            return Err(Error::InvalidSweep(
                "grid values must be finite and >= 0".into(),
            ));
        }
        if self.grid.windows(2).any(|w| !(w[1] > w[0])) {
            return Err(Error::InvalidSweep(
                "grid must be strictly increasing".into(),
            ));
        }
        if !(self.branch_threshold > 0.0) {
            return Err(Error::InvalidSweep("branch threshold must be > 0".into()));
        }
        if !self.frame_angle.is_finite() {
            return Err(Error::InvalidSweep("frame angle must be finite".into()));
        }
        self.solver.validate()?;
        self.template
            .build(self.parameter, self.grid[0])
            .map(|_| ())
    }

    fn frame(&self, sigma_z: f64, sigma_x: f64) -> (f64, f64) {
        rotate_observables(sigma_z, sigma_x, self.frame_angle)
    }
}

/// Solution of one branch seed.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchSolution {
    pub energy: f64,
    pub sigma_z: f64,
    pub sigma_x: f64,
    pub converged: bool,
    pub state: VariationalState,
}

/// Lowest-energy solutions of each character found at one point.
#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct BranchPair {
    /// `|sigma_z| > branch_threshold` in the detection frame.
    pub localized: Option<BranchSolution>,
    pub delocalized: Option<BranchSolution>,
}

impl BranchPair {
    fn states(&self) -> impl Iterator<Item = &VariationalState> {
        self.localized
            .iter()
            .chain(&self.delocalized)
            .map(|b| &b.state)
    }
}

#[derive(Debug, Clone, Serialize, Deserialize)]
pub struct SweepPoint {
    pub value: f64,
    pub result: GroundStateResult,
    pub branches: Option<BranchPair>,
}

/// One CSV row.
#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct SweepRow {
    pub param: f64,
    #[serde(rename = "E_g")]
    pub energy: f64,
    pub sigma_z: f64,
    pub sigma_x: f64,
    pub entropy: f64,
    pub converged: bool,
    pub iterations: usize,
}

impl SweepPoint {
    pub fn row(&self) -> SweepRow {
        let o = &self.result.observables;
        SweepRow {
            param: self.value,
            energy: o.energy,
            sigma_z: o.sigma_z,
            sigma_x: o.sigma_x,
            entropy: o.entropy,
            converged: self.result.converged,
            iterations: self.result.iterations,
        }
    }
}

pub fn write_sweep_csv<W: Write>(out: W, rows: &[SweepRow]) -> Result<()> {
    let mut w = csv::Writer::from_writer(out);
    for r in rows {
        w.serialize(r)
            .map_err(|e| Error::InvalidSweep(format!("csv: {e}")))?;
    }
    w.flush()
        .map_err(|e| Error::InvalidSweep(format!("csv: {e}")))
}

pub fn read_sweep_csv<R: Read>(input: R) -> Result<Vec<SweepRow>> {
    csv::Reader::from_reader(input)
        .deserialize()
        .map(|r| r.map_err(|e| Error::InvalidSweep(format!("csv: {e}"))))
        .collect()
}

fn relax_branch(
    params: &ModelParams,
    config: &SolverConfig,
    start: Option<VariationalState>,
    which: usize,
) -> Result<BranchSolution> {
    let mut cfg = config.clone();
    cfg.anneal.rounds = 0;
    let mut rng = ChaCha8Rng::seed_from_u64(config.rng_seed ^ 0xb4a9c4);
    rng.set_stream(which as u64);
    let start =
        start.unwrap_or_else(|| initial_state(params, config.multiplicity, which, &mut rng));
    let out = run_restart(start, params, &cfg, which, &mut rng)?;
    let obs = observables(&out.state, params)?;
    Ok(BranchSolution {
        energy: out.energy,
        sigma_z: obs.sigma_z,
        sigma_x: obs.sigma_x,
        converged: out.termination.is_converged(),
        state: out.state,
    })
}

fn classify(plan: &SweepPlan, candidates: Vec<BranchSolution>) -> BranchPair {
    let mut pair = BranchPair {
        localized: None,
        delocalized: None,
    };
    for c in candidates {
        let z = plan.frame(c.sigma_z, c.sigma_x).0;
        let slot = if z.abs() > plan.branch_threshold {
            &mut pair.localized
        } else {
            &mut pair.delocalized
        };
        if slot.as_ref().is_none_or(|b| c.energy < b.energy) {
            *slot = Some(c);
        }
    }
    pair
}

/// Solve one point of the plan. `seeds` warm-start the main solve;
/// `branch_seeds` are continued as branch candidates.
pub fn solve_point(
    plan: &SweepPlan,
    value: f64,
    seeds: &[VariationalState],
    branch_seeds: &[VariationalState],
) -> Result<SweepPoint> {
    let params = plan.template.build(plan.parameter, value)?;
    let usable = |s: &&VariationalState| {
        s.check_model(&params).is_ok() && s.multiplicity() == plan.solver.multiplicity
    };
    let seeds: Vec<VariationalState> = seeds.iter().filter(usable).cloned().collect();
    let result = solver::solve_with_seeds(&params, &plan.solver, &seeds)?;
    let branches = if plan.track_branches {
        let o = &result.observables;
        let mut candidates = vec![BranchSolution {
            energy: o.energy,
            sigma_z: o.sigma_z,
            sigma_x: o.sigma_x,
            converged: result.converged,
            state: result.state.clone(),
        }];
        candidates.push(relax_branch(&params, &plan.solver, None, 0)?);
        candidates.push(relax_branch(&params, &plan.solver, None, 1)?);
        for (i, s) in branch_seeds.iter().filter(usable).enumerate() {
            candidates.push(relax_branch(&params, &plan.solver, Some(s.clone()), 2 + i)?);
        }
        Some(classify(plan, candidates))
    } else {
        None
    };
    Ok(SweepPoint {
        value,
        result,
        branches,
    })
}

/// Solve every grid point in order.
pub fn sweep(plan: &SweepPlan) -> Result<Vec<SweepPoint>> {
    plan.validate()?;
    let mut points: Vec<SweepPoint> = Vec::with_capacity(plan.grid.len());
    for &x in &plan.grid {
        let (seeds, branch_seeds) = match points.last() {
            Some(prev) => (
                if plan.warm_start {
                    vec![prev.result.state.clone()]
                } else {
                    Vec::new()
                },
                prev.branches
                    .iter()
                    .flat_map(|b| b.states().cloned())
                    .collect(),
            ),
            None => (Vec::new(), Vec::new()),
        };
        let p = solve_point(plan, x, &seeds, &branch_seeds)?;
        if !p.result.converged {
            log::warn!(
                "sweep point {x} did not converge ({:?})",
                p.result.termination
            );
        }
        points.push(p);
    }
    Ok(points)
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum Detector {
    /// `|sigma_z| > threshold` in the detection frame.
    OrderParameter { threshold: f64 },
    /// The localized-seeded branch lies below the delocalized-seeded branch.
    BranchCrossing,
}

impl Default for Detector {
    fn default() -> Self {
        Detector::OrderParameter {
            threshold: ORDER_THRESHOLD,
        }
    }
}

impl Detector {
    fn fires(&self, plan: &SweepPlan, point: &SweepPoint) -> Result<bool> {
        match *self {
            Detector::OrderParameter { threshold } => {
                let o = &point.result.observables;
                Ok(plan.frame(o.sigma_z, o.sigma_x).0.abs() > threshold)
            }
            Detector::BranchCrossing => {
                let b = point.branches.as_ref().ok_or_else(|| {
                    Error::InvalidSweep("branch-crossing detector needs track_branches".into())
                })?;
                Ok(match (&b.localized, &b.delocalized) {
                    (Some(l), Some(d)) => l.energy < d.energy - 1e-10 * d.energy.abs().max(1e-12),
                    (loc, _) => loc.is_some(),
                })
            }
        }
    }
}

#[derive(Debug, Clone, Copy, PartialEq, Eq, Serialize, Deserialize)]
#[serde(rename_all = "snake_case")]
pub enum TransitionOrder {
    First,
    Second,
    None,
}

#[derive(Debug, Clone, Copy, PartialEq, Serialize, Deserialize)]
pub struct Evidence {
    /// `|sigma_z|` jump across the final bracket.
    pub order_parameter_jump: f64,
    /// The same jump across the bracket before the last bisection step.
    pub coarse_jump: f64,
    /// Largest change of `dE/dx` between neighbouring grid points.
    pub derivative_jump: f64,
    /// Midpoint of the grid interval carrying that change.
    pub derivative_jump_location: f64,
    /// Grid point with the largest entropy.
    pub entropy_peak: f64,
}

#[derive(Debug, Clone, PartialEq, Serialize, Deserialize)]
pub struct TransitionReport {
    pub parameter: SweptParameter,
    pub detector: Detector,
    pub critical_value: Option<f64>,
    pub bracket: Option<(f64, f64)>,
    pub order: TransitionOrder,
    pub evidence: Option<Evidence>,
    /// Width of the final bracket.
    pub grid_resolution: f64,
    /// Visited brackets, widest first.
    pub bisection: Vec<(f64, f64)>,
    pub sweep: Vec<SweepRow>,
    pub diagnostics: Vec<String>,
}

impl TransitionReport {
    pub fn to_json(&self) -> String {
        serde_json::to_string_pretty(self).expect("report serializes")
    }
}

/// Central differences in the interior, one-sided at the ends.
pub fn energy_derivative(rows: &[SweepRow]) -> Result<Vec<(f64, f64)>> {
    if rows.len() < 3 {
        return Err(Error::InvalidSweep(format!(
            "need >= 3 points, got {}",
            rows.len()
        )));
    }
    if let Some(r) = rows.iter().find(|r| !r.converged) {
        return Err(Error::InvalidSweep(format!(
            "point {} is unconverged",
            r.param
        )));
    }
    let n = rows.len();
    Ok((0..n)
        .map(|i| {
            let (a, b) = match i {
                0 => (0, 1),
                i if i == n - 1 => (n - 2, n - 1),
                i => (i - 1, i + 1),
            };
            let d = (rows[b].energy - rows[a].energy) / (rows[b].param - rows[a].param);
            (rows[i].param, d)
        })
        .collect())
}

/// Largest `|dE/dx|` change between neighbours, with its location. Uses
/// one-sided interval slopes so that a kink is not smeared over two steps.
fn derivative_jump(rows: &[SweepRow]) -> (f64, f64) {
    let slopes: Vec<(f64, f64)> = rows
        .windows(2)
        .map(|w| {
            (
                0.5 * (w[0].param + w[1].param),
                (w[1].energy - w[0].energy) / (w[1].param - w[0].param),
            )
        })
        .collect();
    slopes
        .windows(2)
        .map(|w| ((w[1].1 - w[0].1).abs(), rows_mid(w)))
        .fold(
            (0.0, f64::NAN),
            |best, c| if c.0 > best.0 { c } else { best },
        )
}

fn rows_mid(w: &[(f64, f64)]) -> f64 {
    0.5 * (w[0].0 + w[1].0)
}

fn entropy_peak(rows: &[SweepRow]) -> f64 {
    rows.iter()
        .fold((f64::NEG_INFINITY, f64::NAN), |best, r| {
            if r.entropy > best.0 {
                (r.entropy, r.param)
            } else {
                best
            }
        })
        .1
}

/// Main-solve seeds and branch seeds taken from bracket endpoints.
fn seeds_of(points: &[&SweepPoint]) -> (Vec<VariationalState>, Vec<VariationalState>) {
    let main = points.iter().map(|p| p.result.state.clone()).collect();
    let branch = points
        .iter()
        .flat_map(|p| p.branches.iter().flat_map(|b| b.states().cloned()))
        .collect();
    (main, branch)
}

fn jump(plan: &SweepPlan, a: &SweepPoint, b: &SweepPoint) -> f64 {
    let za = plan
        .frame(a.result.observables.sigma_z, a.result.observables.sigma_x)
        .0;
    let zb = plan
        .frame(b.result.observables.sigma_z, b.result.observables.sigma_x)
        .0;
    (za.abs() - zb.abs()).abs()
}

/// Sweep the grid, bracket the first change of the detector, bisect it down
/// to `resolution`, and classify the transition.
pub fn locate_critical(
    plan: &SweepPlan,
    detector: Detector,
    resolution: f64,
) -> Result<TransitionReport> {
    if !(resolution > 0.0) {
        return Err(Error::InvalidSweep(format!(
            "resolution {resolution} must be > 0"
        )));
    }
    let mut plan = plan.clone();
    if detector == Detector::BranchCrossing {
        plan.track_branches = true;
    }
    let points = sweep(&plan)?;
    let rows: Vec<SweepRow> = points.iter().map(SweepPoint::row).collect();
    let mut diagnostics = Vec::new();
    for r in rows.iter().filter(|r| !r.converged) {
        diagnostics.push(format!("grid point {} unconverged", r.param));
    }
    let flags: Vec<bool> = points
        .iter()
        .map(|p| detector.fires(&plan, p))
        .collect::<Result<_>>()?;
    let flips: Vec<usize> = (0..flags.len() - 1)
        .filter(|&i| flags[i] != flags[i + 1])
        .collect();
    let (dj, dj_at) = derivative_jump(&rows);
    let peak = entropy_peak(&rows);

    let Some(&first) = flips.first() else {
        diagnostics.push(format!(
            "detector never changes on [{}, {}] (fires everywhere: {})",
            plan.grid[0],
            plan.grid[plan.grid.len() - 1],
            flags[0]
        ));
        return Ok(TransitionReport {
            parameter: plan.parameter,
            detector,
            critical_value: None,
            bracket: None,
            order: TransitionOrder::None,
            evidence: None,
            grid_resolution: 0.0,
            bisection: Vec::new(),
            sweep: rows,
            diagnostics,
        });
    };
    if flips.len() > 1 {
        diagnostics.push(format!(
            "detector changes {} times on the grid; using the first",
            flips.len()
        ));
    }

    let lo_flag = flags[first];
    let mut lo = points[first].clone();
    let mut hi = points[first + 1].clone();
    let mut history = vec![(lo.value, hi.value)];
    let mut coarse_jump = jump(&plan, &lo, &hi);
    let mut steps = 0;
    while hi.value - lo.value > resolution || steps == 0 {
        let mid_x = 0.5 * (lo.value + hi.value);
        if !(mid_x > lo.value && mid_x < hi.value) {
            break;
        }
        let (seeds, branch_seeds) = seeds_of(&[&lo, &hi]);
        let mid = solve_point(&plan, mid_x, &seeds, &branch_seeds)?;
        if !mid.result.converged {
            diagnostics.push(format!("bisection point {mid_x} unconverged"));
        }
        coarse_jump = jump(&plan, &lo, &hi);
        if detector.fires(&plan, &mid)? == lo_flag {
            lo = mid;
        } else {
            hi = mid;
        }
        history.push((lo.value, hi.value));
        steps += 1;
    }
    let fine_jump = jump(&plan, &lo, &hi);
    let order = if fine_jump > FIRST_ORDER_JUMP && fine_jump >= PERSISTENCE_RATIO * coarse_jump {
        TransitionOrder::First
    } else {
        TransitionOrder::Second
    };
    Ok(TransitionReport {
        parameter: plan.parameter,
        detector,
        critical_value: Some(0.5 * (lo.value + hi.value)),
        bracket: Some((lo.value, hi.value)),
        order,
        evidence: Some(Evidence {
            order_parameter_jump: fine_jump,
            coarse_jump,
            derivative_jump: dj,
            derivative_jump_location: dj_at,
            entropy_peak: peak,
        }),
        grid_resolution: hi.value - lo.value,
        bisection: history,
        sweep: rows,
        diagnostics,
    })
}
